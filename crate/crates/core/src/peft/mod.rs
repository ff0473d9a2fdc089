//! Parameter-efficient attachments for a frozen [`DualEncoderModel`]:
//! bottleneck adapters, deep prompts, and low-rank Q/K/V updates.
//!
//! Attaching freezes every backbone tensor and leaves exactly the new
//! blocks plus the classifier head trainable.

mod attach;
mod config;

pub use attach::{attach, attach_adapters, attach_lora, attach_prompts, detach, trainable_parameter_count};
pub use config::{head_parameters, AdapterConfig, LoraConfig, PeftVariant, PromptConfig};

use crate::diffcore::{ParamId, ParamStore, Tape, Var};
use crate::encoder::{DualEncoderModel, PromptSide};
use crate::error::{Error, Result};

/// Name prefix of every PEFT tensor in a [`ParamStore`].
pub const PREFIX: &str = "peft/";

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    /// `[bottleneck, width]`
    pub down: ParamId,
    /// `[width, bottleneck]`
    pub up: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptLayer {
    /// `[length, width]`
    pub prompts: ParamId,
}

/// `ΔW = B·A` with `A: [rank, in]` and `B: [out, rank]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub q: LoraFactors,
    pub k: LoraFactors,
    pub v: LoraFactors,
    pub gamma: f64,
}

/// What one transformer layer carries.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerPeft {
    None,
    Adapter(AdapterLayer),
    Prompt(PromptLayer),
    Lora(LoraLayer),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeftAttachment {
    pub variant: PeftVariant,
    pub vision: Vec<LayerPeft>,
    pub text: Vec<LayerPeft>,
    /// When false, prompt positions are masked out as attention keys.
    pub prompts_visible: bool,
}

/// `Ad(h) = M_up · ReLU(M_down · h)`, row-wise over `h: [rows, width]`.
pub fn adapter_forward(tape: &mut Tape, store: &ParamStore, h: Var, adapter: &AdapterLayer) -> Result<Var> {
    let width = tape.shape(h).get(1).copied().unwrap_or(0);
    let down_in = store.get(adapter.down).shape()[1];
    if width != down_in {
        return Err(Error::shape(
            "adapter_forward",
            format!("input width {width}, adapter expects {down_in}"),
        ));
    }
    let down = tape.param(store, adapter.down);
    let up = tape.param(store, adapter.up);
    let z = tape.matmul_t(h, down)?;
    let z = tape.relu(z);
    tape.matmul_t(z, up)
}

/// `γ·(B·A)·x` computed as `γ·B·(A·x)`.
pub(crate) fn lora_delta(tape: &mut Tape, store: &ParamStore, x: Var, f: &LoraFactors, gamma: f64) -> Result<Var> {
    let a = tape.param(store, f.a);
    let b = tape.param(store, f.b);
    let ax = tape.matmul_t(x, a)?;
    let bax = tape.matmul_t(ax, b)?;
    Ok(tape.scale(bax, gamma))
}

/// `h = W·x + γ·B·(A·x)` over the rows of `x`, for `W: [d₁, d₂]`, `A: [r, d₂]`, `B: [d₁, r]`.
pub fn lora_forward(tape: &mut Tape, x: Var, w: Var, a: Var, b: Var, gamma: f64) -> Result<Var> {
    let (ws, as_, bs) = (tape.shape(w).to_vec(), tape.shape(a).to_vec(), tape.shape(b).to_vec());
    let ok = ws.len() == 2 && as_.len() == 2 && bs.len() == 2 && as_[1] == ws[1] && bs[0] == ws[0] && bs[1] == as_[0];
    if !ok {
        return Err(Error::shape(
            "lora_forward",
            format!("W {ws:?}, A {as_:?}, B {bs:?} do not form W + B·A"),
        ));
    }
    let base = tape.matmul_t(x, w)?;
    let ax = tape.matmul_t(x, a)?;
    let bax = tape.matmul_t(ax, b)?;
    let delta = tape.scale(bax, gamma);
    tape.add(base, delta)
}

/// Splices `n_prompts` prompt rows into every sequence of `x`.
///
/// Returns the extended sequence, its key mask, and the rows holding the
/// original positions (in order), so the caller can drop the prompt outputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn insert_prompts(
    tape: &mut Tape,
    x: Var,
    prompts: Var,
    batch: usize,
    seq: usize,
    n_prompts: usize,
    side: PromptSide,
    real_mask: &[bool],
    visible: bool,
) -> Result<(Var, Vec<bool>, Vec<usize>)> {
    let stacked = tape.concat(x, prompts, 0)?;
    let prompt_base = batch * seq;
    let total = seq + n_prompts;
    let mut order = Vec::with_capacity(batch * total);
    let mut mask = Vec::with_capacity(batch * total);
    let mut real_rows = Vec::with_capacity(batch * seq);
    for b in 0..batch {
        let real = (b * seq)..((b + 1) * seq);
        let start = b * total;
        match side {
            PromptSide::Append => {
                order.extend(real.clone());
                mask.extend_from_slice(&real_mask[real]);
                order.extend(prompt_base..prompt_base + n_prompts);
                mask.extend(std::iter::repeat(visible).take(n_prompts));
                real_rows.extend(start..start + seq);
            }
            PromptSide::Prepend => {
                order.extend(prompt_base..prompt_base + n_prompts);
                mask.extend(std::iter::repeat(visible).take(n_prompts));
                order.extend(real.clone());
                mask.extend_from_slice(&real_mask[real]);
                real_rows.extend(start + n_prompts..start + total);
            }
        }
    }
    let with = tape.gather_rows(stacked, &order)?;
    Ok((with, mask, real_rows))
}

impl DualEncoderModel {
    /// Tensors that belong to the attached PEFT blocks.
    pub fn peft_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, name, _)| name.starts_with(PREFIX))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Hide or reveal prompt positions to attention. No-op without prompts.
    pub fn set_prompts_visible(&mut self, visible: bool) {
        if let Some(p) = self.peft.as_mut() {
            p.prompts_visible = visible;
        }
    }
}
