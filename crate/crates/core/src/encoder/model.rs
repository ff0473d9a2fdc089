use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Batch, EncoderConfig, PAD_ID};
use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::peft::{self, LayerPeft, PeftAttachment};

const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub ln1: LayerNormParams,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub ln_post: LayerNormParams,
    /// `[embed_dim, width]`, no bias.
    pub proj: ParamId,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionBranch {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub branch: Branch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextBranch {
    pub token_embed: ParamId,
    pub branch: Branch,
}

/// Which branch a tensor or hook belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Vision,
    Text,
}

impl BranchKind {
    pub fn tag(self) -> &'static str {
        match self {
            BranchKind::Vision => "vision",
            BranchKind::Text => "text",
        }
    }
}

/// Two transformer encoders, their shared-space projections, and a linear
/// classifier over the concatenated embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderModel {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub vision: VisionBranch,
    pub text: TextBranch,
    /// `[classes, 2·embed_dim]`
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub(crate) peft: Option<PeftAttachment>,
}

/// Output of one branch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[batch, embed_dim]`
    pub embedding: Var,
    /// Pooled hidden state after every layer, `[batch, width]` each; empty unless requested.
    pub layer_states: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub image: Encoded,
    pub text: Encoded,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng)).trainable(true);
        self.store.insert(name, t)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.insert(name, Tensor::filled(shape, v).trainable(true))
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, bias: bool) -> Result<Linear> {
        let weight = self.normal(format!("{name}.weight"), &[out, inp], 1.0 / (inp as f64).sqrt())?;
        let bias = if bias {
            Some(self.fill(format!("{name}.bias"), &[out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    fn layer_norm(&mut self, name: &str, width: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.fill(format!("{name}.gain"), &[width], 1.0)?,
            bias: self.fill(format!("{name}.bias"), &[width], 0.0)?,
        })
    }

    fn branch(&mut self, prefix: &str, cfg: &EncoderConfig, width: usize, seq: usize) -> Result<Branch> {
        let pos = self.normal(format!("{prefix}.pos"), &[seq, width], EMBED_STD)?;
        let hidden = width * cfg.mlp_ratio;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                Ok(TransformerLayer {
                    ln1: self.layer_norm(&format!("{p}.ln1"), width)?,
                    wq: self.linear(&format!("{p}.attn.q"), width, width, true)?,
                    wk: self.linear(&format!("{p}.attn.k"), width, width, true)?,
                    wv: self.linear(&format!("{p}.attn.v"), width, width, true)?,
                    wo: self.linear(&format!("{p}.attn.out"), width, width, true)?,
                    ln2: self.layer_norm(&format!("{p}.ln2"), width)?,
                    fc1: self.linear(&format!("{p}.mlp.fc1"), hidden, width, true)?,
                    fc2: self.linear(&format!("{p}.mlp.fc2"), width, hidden, true)?,
                    width,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Branch {
            pos,
            layers,
            ln_post: self.layer_norm(&format!("{prefix}.ln_post"), width)?,
            proj: self.normal(format!("{prefix}.proj"), &[cfg.embed_dim, width], EMBED_STD)?,
            width,
        })
    }
}

pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, x: Var, lin: &Linear) -> Result<Var> {
    let w = tape.param(store, lin.weight);
    let y = tape.matmul_t(x, w)?;
    match lin.bias {
        Some(b) => {
            let bv = tape.param(store, b);
            tape.add_row(y, bv)
        }
        None => Ok(y),
    }
}

fn layer_norm(tape: &mut Tape, store: &ParamStore, x: Var, ln: &LayerNormParams) -> Result<Var> {
    let g = tape.param(store, ln.gain);
    let b = tape.param(store, ln.bias);
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Geometry of one packed batch of sequences.
struct SeqLayout<'a> {
    batch: usize,
    seq: usize,
    mask: &'a [bool],
}

impl TransformerLayer {
    fn project(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        lin: &Linear,
        lora: Option<&peft::LoraFactors>,
        gamma: f64,
    ) -> Result<Var> {
        let base = linear(tape, store, h, lin)?;
        match lora {
            Some(f) => peft::lora_delta(tape, store, h, f, gamma).and_then(|d| tape.add(base, d)),
            None => Ok(base),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        heads: usize,
        x: Var,
        layout: &SeqLayout,
        hook: &LayerPeft,
    ) -> Result<Var> {
        let (lora, gamma) = match hook {
            LayerPeft::Lora(l) => (Some(l), l.gamma),
            _ => (None, 0.0),
        };
        let h = layer_norm(tape, store, x, &self.ln1)?;
        let q = self.project(tape, store, h, &self.wq, lora.map(|l| &l.q), gamma)?;
        let k = self.project(tape, store, h, &self.wk, lora.map(|l| &l.k), gamma)?;
        let v = self.project(tape, store, h, &self.wv, lora.map(|l| &l.v), gamma)?;
        let a = tape.attention(q, k, v, layout.batch, heads, layout.mask)?;
        let a = linear(tape, store, a, &self.wo)?;
        let x1 = tape.add(x, a)?;
        let h2 = layer_norm(tape, store, x1, &self.ln2)?;
        let m = linear(tape, store, h2, &self.fc1)?;
        let m = tape.gelu(m);
        let m = linear(tape, store, m, &self.fc2)?;
        let out = tape.add(x1, m)?;
        match hook {
            LayerPeft::Adapter(ad) => {
                let delta = peft::adapter_forward(tape, store, x, ad)?;
                tape.add(out, delta)
            }
            _ => Ok(out),
        }
    }
}

/// Where deep prompts sit in a branch's sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum PromptSide {
    /// After the last real position (vision).
    Append,
    /// Before the first real position (text).
    Prepend,
}

impl BranchKind {
    pub(crate) fn prompt_side(self) -> PromptSide {
        match self {
            BranchKind::Vision => PromptSide::Append,
            BranchKind::Text => PromptSide::Prepend,
        }
    }
}

impl Branch {
    /// Runs every layer over `x` (`[batch·seq, width]`, positions already added)
    /// and returns the projected embedding of the row `pool[b]` of each sequence.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        heads: usize,
        mut x: Var,
        batch: usize,
        real_mask: &[bool],
        pool: &[usize],
        hooks: Option<(&[LayerPeft], PromptSide, bool)>,
        keep_states: bool,
    ) -> Result<Encoded> {
        let seq = real_mask.len() / batch;
        let pooled_rows: Vec<usize> = pool.iter().enumerate().map(|(b, &p)| b * seq + p).collect();
        let mut layer_states = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let hook = hooks.map_or(&LayerPeft::None, |(h, _, _)| &h[i]);
            x = match (hook, hooks) {
                (LayerPeft::Prompt(p), Some((_, side, visible))) => {
                    let prompt = tape.param(store, p.prompts);
                    let n_prompts = store.get(p.prompts).shape()[0];
                    let (with, mask, real_rows) =
                        peft::insert_prompts(tape, x, prompt, batch, seq, n_prompts, side, real_mask, visible)?;
                    let layout = SeqLayout {
                        batch,
                        seq: seq + n_prompts,
                        mask: &mask,
                    };
                    let y = layer.forward(tape, store, heads, with, &layout, hook)?;
                    debug_assert_eq!(layout.seq * batch, tape.shape(y)[0]);
                    tape.gather_rows(y, &real_rows)?
                }
                _ => {
                    let layout = SeqLayout {
                        batch,
                        seq,
                        mask: real_mask,
                    };
                    layer.forward(tape, store, heads, x, &layout, hook)?
                }
            };
            if keep_states {
                layer_states.push(tape.gather_rows(x, &pooled_rows)?);
            }
        }
        let pooled = tape.gather_rows(x, &pooled_rows)?;
        let pooled = layer_norm(tape, store, pooled, &self.ln_post)?;
        let proj = tape.param(store, self.proj);
        let embedding = tape.matmul_t(pooled, proj)?;
        Ok(Encoded {
            embedding,
            layer_states,
        })
    }
}

impl DualEncoderModel {
    /// Fresh model; every tensor starts trainable.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (dv, dt) = (config.vision_width, config.text_width);
        let vision = VisionBranch {
            patch_embed: init.linear("vision.patch_embed", dv, dv, true)?,
            cls: init.fill("vision.cls".into(), &[1, dv], 0.0)?,
            branch: init.branch("vision", &config, dv, config.vision_seq())?,
        };
        let text = TextBranch {
            token_embed: init.normal("text.token_embed".into(), &[config.vocab, dt], EMBED_STD)?,
            branch: init.branch("text", &config, dt, config.max_tokens)?,
        };
        let head_weight = init.normal(
            "head.weight".into(),
            &[config.classes, 2 * config.embed_dim],
            EMBED_STD,
        )?;
        let head_bias = init.fill("head.bias".into(), &[config.classes], 0.0)?;
        Ok(Self {
            config,
            store,
            vision,
            text,
            head_weight,
            head_bias,
            peft: None,
        })
    }

    pub fn attachment(&self) -> Option<&PeftAttachment> {
        self.peft.as_ref()
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.head_weight, self.head_bias]
    }

    fn hooks(&self, kind: BranchKind) -> Option<(&[LayerPeft], PromptSide, bool)> {
        self.peft.as_ref().map(|p| {
            let layers = match kind {
                BranchKind::Vision => p.vision.as_slice(),
                BranchKind::Text => p.text.as_slice(),
            };
            (layers, kind.prompt_side(), p.prompts_visible)
        })
    }

    /// Image embedding `h_img`: the projected final classification-token state.
    pub fn encode_image(&self, tape: &mut Tape, patches: &Tensor, keep_states: bool) -> Result<Encoded> {
        let cfg = &self.config;
        let [batch, m, dv] = *patches.shape() else {
            return Err(Error::shape("encode_image", format!("patches must be [batch, m, d_v], got {:?}", patches.shape())));
        };
        if m != cfg.patches || dv != cfg.vision_width {
            return Err(Error::shape(
                "encode_image",
                format!("expected [_, {}, {}], got {:?}", cfg.patches, cfg.vision_width, patches.shape()),
            ));
        }
        let store = &self.store;
        let flat = tape.constant_from(&[batch * m, dv], patches.values().to_vec())?;
        let e = linear(tape, store, flat, &self.vision.patch_embed)?;
        let cls = tape.param(store, self.vision.cls);
        let stacked = tape.concat(cls, e, 0)?;
        let seq = m + 1;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(0).chain((0..m).map(move |j| 1 + b * m + j)))
            .collect();
        let x = tape.gather_rows(stacked, &order)?;
        let pos = tape.param(store, self.vision.branch.pos);
        let pos_rows: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let pos = tape.gather_rows(pos, &pos_rows)?;
        let x = tape.add(x, pos)?;
        let mask = vec![true; batch * seq];
        let pool = vec![0; batch];
        self.vision.branch.run(
            tape,
            store,
            cfg.heads,
            x,
            batch,
            &mask,
            &pool,
            self.hooks(BranchKind::Vision),
            keep_states,
        )
    }

    /// Text embedding `h_txt`: the projected final state of each row's last non-padding token.
    pub fn encode_text(&self, tape: &mut Tape, tokens: &[usize], batch: usize, keep_states: bool) -> Result<Encoded> {
        let cfg = &self.config;
        let n = cfg.max_tokens;
        if batch == 0 || tokens.len() != batch * n {
            return Err(Error::shape(
                "encode_text",
                format!("{} token ids for batch {batch} of length {n}", tokens.len()),
            ));
        }
        let mut pool = Vec::with_capacity(batch);
        for (b, row) in tokens.chunks(n).enumerate() {
            match row.iter().rposition(|&t| t != PAD_ID) {
                Some(last) => pool.push(last),
                None => return Err(Error::invalid(format!("token row {b} is all padding"))),
            }
        }
        let store = &self.store;
        let table = tape.param(store, self.text.token_embed);
        let x = tape.embed(table, tokens)?;
        let pos = tape.param(store, self.text.branch.pos);
        let pos_rows: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let pos = tape.gather_rows(pos, &pos_rows)?;
        let x = tape.add(x, pos)?;
        let mask: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        self.text.branch.run(
            tape,
            store,
            cfg.heads,
            x,
            batch,
            &mask,
            &pool,
            self.hooks(BranchKind::Text),
            keep_states,
        )
    }

    /// `logits = W_head · (h_img ⊕ h_txt) + b`.
    pub fn classify(&self, tape: &mut Tape, h_img: Var, h_txt: Var) -> Result<Var> {
        let d = self.config.embed_dim;
        for v in [h_img, h_txt] {
            if tape.shape(v).len() != 2 || tape.shape(v)[1] != d {
                return Err(Error::shape("classify", format!("embedding {:?}, expected width {d}", tape.shape(v))));
            }
        }
        let joint = tape.concat(h_img, h_txt, 1)?;
        let w = tape.param(&self.store, self.head_weight);
        let b = tape.param(&self.store, self.head_bias);
        let logits = tape.matmul_t(joint, w)?;
        tape.add_row(logits, b)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch, keep_states: bool) -> Result<ForwardOutput> {
        batch.validate(&self.config)?;
        let image = self.encode_image(tape, &batch.patches, keep_states)?;
        let text = self.encode_text(tape, &batch.tokens, batch.len(), keep_states)?;
        let logits = self.classify(tape, image.embedding, text.embedding)?;
        Ok(ForwardOutput { logits, image, text })
    }

    /// Evaluation-mode logits, `[batch, classes]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, batch, false)?;
        Ok(tape.to_tensor(out.logits))
    }

    /// Encoder tensors: everything except the classifier head and PEFT blocks.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, name, _)| !name.starts_with(peft::PREFIX) && !name.starts_with("head."))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.store.trainable_count()
    }
}
