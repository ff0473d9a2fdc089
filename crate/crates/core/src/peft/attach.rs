use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    AdapterConfig, AdapterLayer, LayerPeft, LoraConfig, LoraFactors, LoraLayer, PeftAttachment, PeftVariant,
    PromptConfig, PromptLayer, PREFIX,
};
use crate::diffcore::{ParamId, ParamStore, Tensor};
use crate::encoder::{BranchKind, DualEncoderModel};
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng)).trainable(true);
        self.store.insert(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.store.insert(name, Tensor::zeros(shape).trainable(true))
    }

    fn layer(&mut self, variant: &PeftVariant, branch: BranchKind, i: usize, width: usize) -> Result<LayerPeft> {
        let p = format!("{PREFIX}{}.layers.{i}", branch.tag());
        Ok(match variant {
            PeftVariant::Adapter(c) => {
                let r = c.bottleneck_for(width);
                LayerPeft::Adapter(AdapterLayer {
                    down: self.normal(format!("{p}.adapter.down"), &[r, width], 1.0 / (width as f64).sqrt())?,
                    up: self.zeros(format!("{p}.adapter.up"), &[width, r])?,
                })
            }
            PeftVariant::Prompt(c) => LayerPeft::Prompt(PromptLayer {
                prompts: self.normal(format!("{p}.prompts"), &[c.length, width], INIT_STD)?,
            }),
            PeftVariant::Lora(c) => {
                let mut factors = |m: &str| -> Result<LoraFactors> {
                    Ok(LoraFactors {
                        a: self.normal(format!("{p}.lora.{m}.a"), &[c.rank, width], INIT_STD)?,
                        b: self.zeros(format!("{p}.lora.{m}.b"), &[width, c.rank])?,
                    })
                };
                LayerPeft::Lora(LoraLayer {
                    q: factors("q")?,
                    k: factors("k")?,
                    v: factors("v")?,
                    gamma: c.gamma(),
                })
            }
        })
    }
}

/// Attach `variant` to every layer of both branches and apply the freeze mask.
pub fn attach(model: &mut DualEncoderModel, variant: PeftVariant, seed: u64) -> Result<&PeftAttachment> {
    if model.peft.is_some() {
        return Err(Error::invalid("model already carries a PEFT attachment"));
    }
    variant.validate(&model.config)?;
    let cfg = model.config.clone();
    let mut b = Builder {
        store: &mut model.store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let vision = (0..cfg.layers)
        .map(|i| b.layer(&variant, BranchKind::Vision, i, cfg.vision_width))
        .collect::<Result<Vec<_>>>()?;
    let text = (0..cfg.layers)
        .map(|i| b.layer(&variant, BranchKind::Text, i, cfg.text_width))
        .collect::<Result<Vec<_>>>()?;
    model.peft = Some(PeftAttachment {
        variant,
        vision,
        text,
        prompts_visible: true,
    });
    apply_freeze_mask(model);
    Ok(model.peft.as_ref().expect("just attached"))
}

/// Backbone frozen; PEFT blocks and the classifier head trainable.
fn apply_freeze_mask(model: &mut DualEncoderModel) {
    let head = model.head_ids();
    for (id, name, t) in model.store.iter_mut() {
        t.set_trainable(name.starts_with(PREFIX) || head.contains(&id));
    }
}

pub fn attach_adapters(model: &mut DualEncoderModel, cfg: AdapterConfig, seed: u64) -> Result<&PeftAttachment> {
    attach(model, PeftVariant::Adapter(cfg), seed)
}

pub fn attach_prompts(model: &mut DualEncoderModel, cfg: PromptConfig, seed: u64) -> Result<&PeftAttachment> {
    attach(model, PeftVariant::Prompt(cfg), seed)
}

pub fn attach_lora(model: &mut DualEncoderModel, cfg: LoraConfig, seed: u64) -> Result<&PeftAttachment> {
    attach(model, PeftVariant::Lora(cfg), seed)
}

/// Remove the attachment and its tensors; the backbone becomes fully trainable again.
pub fn detach(model: &mut DualEncoderModel) -> Option<PeftAttachment> {
    let p = model.peft.take()?;
    // PEFT tensors were appended after every backbone tensor, so backbone ids stay valid.
    model.store.remove_prefix(PREFIX);
    for (_, _, t) in model.store.iter_mut() {
        t.set_trainable(true);
    }
    Some(p)
}

/// Exact number of scalars in trainable tensors.
pub fn trainable_parameter_count(model: &DualEncoderModel) -> usize {
    model.trainable_parameter_count()
}
