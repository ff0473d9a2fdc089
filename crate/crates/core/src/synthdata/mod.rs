//! Synthetic cross-modal incongruity task.
//!
//! A scene is a (shape, colour) pair. Half the colours read as pleasant and
//! half as grim. The image shows the scene as noisy attribute codes spread
//! over patches; the sentence describes it. Label 0 sentences are truthful.
//! Label 1 sentences praise a grim scene with a pleasant colour it does not
//! have, which is the same move as "lovely weather" under a storm photo.
//!
//! Either modality alone reaches about 75% accuracy; both together reach 100%
//! with an additive read-out, which a linear head over two independent
//! embeddings can represent.

mod check;
mod format;
mod split;
mod vocab;

pub use check::{derive_label, verify_labels};
pub use format::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use split::{annotate, split, SplitSpec, Splits};
pub use vocab::Vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::encoder::{Batch, EncoderConfig};
use crate::error::{Error, Result};

/// Remaps every attribute code part-way towards a fresh random code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// `0` is the identity and rejected; `1` replaces codes outright.
    pub strength: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    /// Per-example randomness.
    pub seed: u64,
    /// Attribute-to-feature codes; datasets sharing it share a domain.
    pub code_seed: u64,
    /// Training pool size.
    pub n_examples: usize,
    /// Held-out test examples stored after the pool.
    pub n_test: usize,
    pub shapes: usize,
    /// Must be even: the first half are pleasant, the rest grim.
    pub colors: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub max_tokens: usize,
    pub vocab: usize,
    /// Gaussian noise on every patch feature.
    pub sigma: f64,
    /// Fraction of patches replaced by label-irrelevant clutter.
    pub distractor_rate: f64,
    pub shift: Option<ShiftSpec>,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            code_seed: 7,
            n_examples: 20_000,
            n_test: 2_000,
            shapes: 6,
            colors: 8,
            patches: 12,
            patch_dim: 32,
            max_tokens: 12,
            vocab: 256,
            sigma: 0.3,
            distractor_rate: 0.1,
            shift: None,
        }
    }
}

const CLUTTER_CODES: usize = 8;

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.colors < 2 || self.colors % 2 != 0 {
            return bad(format!("colors must be even and at least 2, got {}", self.colors));
        }
        if self.shapes == 0 || self.patches == 0 || self.patch_dim == 0 {
            return bad("shapes, patches and patch_dim must be positive".into());
        }
        if self.max_tokens < vocab::MAX_SENTENCE {
            return bad(format!("max_tokens must be at least {}", vocab::MAX_SENTENCE));
        }
        Vocab::new(self)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be finite and non-negative, got {}", self.sigma));
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return bad(format!("distractor_rate must lie in [0, 1), got {}", self.distractor_rate));
        }
        if let Some(s) = &self.shift {
            if !(s.strength > 0.0 && s.strength <= 1.0) {
                return bad(format!("shift strength must lie in (0, 1], got {}", s.strength));
            }
        }
        let seeds = [Some(self.seed), Some(self.code_seed), self.shift.as_ref().map(|s| s.seed)];
        if seeds.into_iter().flatten().any(|s| s > i64::MAX as u64) {
            return bad("seeds must fit in a signed 64-bit integer".into());
        }
        if self.n_examples + self.n_test == 0 {
            return bad("dataset would be empty".into());
        }
        Ok(())
    }

    /// Whether an encoder can consume this data.
    pub fn check_encoder(&self, cfg: &EncoderConfig) -> Result<()> {
        if cfg.patches != self.patches
            || cfg.vision_width != self.patch_dim
            || cfg.max_tokens != self.max_tokens
            || cfg.vocab != self.vocab
            || cfg.classes != 2
        {
            return Err(Error::format(format!(
                "data has {} patches × {}, {} tokens over {} ids, 2 classes; encoder expects {} × {}, {} over {}, {} classes",
                self.patches,
                self.patch_dim,
                self.max_tokens,
                self.vocab,
                cfg.patches,
                cfg.vision_width,
                cfg.max_tokens,
                cfg.vocab,
                cfg.classes
            )));
        }
        Ok(())
    }

    pub fn is_pleasant(&self, color: usize) -> bool {
        color < self.colors / 2
    }
}

/// Ground truth behind one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneMeta {
    pub shape: u8,
    pub color: u8,
    pub claimed_shape: u8,
    pub claimed_color: u8,
    pub template: u8,
}

impl SceneMeta {
    const VERSION: u8 = 1;

    pub fn to_bytes(self) -> Vec<u8> {
        vec![
            Self::VERSION,
            self.shape,
            self.color,
            self.claimed_shape,
            self.claimed_color,
            self.template,
        ]
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        match b {
            [Self::VERSION, shape, color, claimed_shape, claimed_color, template] => Ok(Self {
                shape: *shape,
                color: *color,
                claimed_shape: *claimed_shape,
                claimed_color: *claimed_color,
                template: *template,
            }),
            _ => Err(Error::format(format!("unrecognised scene metadata {b:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    /// `[patches × patch_dim]`, row-major.
    pub patches: Vec<f64>,
    /// `max_tokens` ids, padded with [`crate::encoder::PAD_ID`].
    pub tokens: Vec<usize>,
    pub label: usize,
    pub meta: SceneMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: GenSpec,
    /// Pool examples first, then `spec.n_test` test examples.
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn pool(&self) -> &[Example] {
        &self.examples[..self.spec.n_examples.min(self.examples.len())]
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (self.spec.n_examples..self.examples.len()).collect()
    }

    pub fn label_counts(&self, idx: &[usize]) -> [usize; 2] {
        let mut c = [0; 2];
        idx.iter().for_each(|&i| c[self.examples[i].label] += 1);
        c
    }

    /// Packs the examples at `idx` into a model batch.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let per = self.spec.patches * self.spec.patch_dim;
        let mut patches = Vec::with_capacity(idx.len() * per);
        let mut tokens = Vec::with_capacity(idx.len() * self.spec.max_tokens);
        for &i in idx {
            patches.extend_from_slice(&self.examples[i].patches);
            tokens.extend_from_slice(&self.examples[i].tokens);
        }
        Batch {
            ids: idx.iter().map(|&i| self.examples[i].id).collect(),
            patches: Tensor::new(&[idx.len(), self.spec.patches, self.spec.patch_dim], patches)
                .expect("examples match their spec"),
            tokens,
            labels: idx.iter().map(|&i| self.examples[i].label).collect(),
        }
    }
}

/// Attribute feature codes for one domain.
struct Codes {
    shape: Vec<Vec<f64>>,
    color: Vec<Vec<f64>>,
    clutter: Vec<Vec<f64>>,
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..rows).map(|_| (0..dim).map(|_| n.sample(rng)).collect()).collect()
}

impl Codes {
    fn new(spec: &GenSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.code_seed);
        let mut codes = Codes {
            shape: gaussian_rows(&mut rng, spec.shapes, spec.patch_dim),
            color: gaussian_rows(&mut rng, spec.colors, spec.patch_dim),
            clutter: gaussian_rows(&mut rng, CLUTTER_CODES, spec.patch_dim),
        };
        if let Some(shift) = &spec.shift {
            let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
            for table in [&mut codes.shape, &mut codes.color, &mut codes.clutter] {
                let fresh = gaussian_rows(&mut rng, table.len(), spec.patch_dim);
                for (row, new) in table.iter_mut().zip(fresh) {
                    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let before = norm(row);
                    row.iter_mut()
                        .zip(&new)
                        .for_each(|(a, b)| *a = (1.0 - shift.strength) * *a + shift.strength * b);
                    // keep the code's scale so only its direction moves
                    let after = norm(row).max(1e-12);
                    row.iter_mut().for_each(|a| *a *= before / after);
                }
            }
        }
        codes
    }
}

enum PatchKind {
    Color,
    Shape,
    Background,
    Clutter(usize),
}

fn render_example(spec: &GenSpec, codes: &Codes, vocab: &Vocab, index: usize, label: usize, stream: u64) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let half = spec.colors / 2;
    let shape = rng.random_range(0..spec.shapes);
    let (color, claimed_color) = if label == 1 {
        (half + rng.random_range(0..half), rng.random_range(0..half))
    } else {
        let c = rng.random_range(0..spec.colors);
        (c, c)
    };
    let (template, tokens) = vocab.sentence(&mut rng, shape, claimed_color, spec.max_tokens);

    let kinds: Vec<PatchKind> = (0..spec.patches)
        .map(|_| {
            if rng.random_range(0.0..1.0) < spec.distractor_rate {
                PatchKind::Clutter(rng.random_range(0..CLUTTER_CODES))
            } else {
                match rng.random_range(0..10) {
                    0..=3 => PatchKind::Color,
                    4..=6 => PatchKind::Shape,
                    _ => PatchKind::Background,
                }
            }
        })
        .collect();
    let mut kinds = kinds;
    if !kinds.iter().any(|k| matches!(k, PatchKind::Color)) {
        let j = rng.random_range(0..spec.patches);
        kinds[j] = PatchKind::Color;
    }
    let noise = Normal::new(0.0, spec.sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut patches = Vec::with_capacity(spec.patches * spec.patch_dim);
    for k in &kinds {
        let code: Option<&[f64]> = match k {
            PatchKind::Color => Some(&codes.color[color]),
            PatchKind::Shape => Some(&codes.shape[shape]),
            PatchKind::Clutter(c) => Some(&codes.clutter[*c]),
            PatchKind::Background => None,
        };
        for d in 0..spec.patch_dim {
            let base = code.map_or(0.0, |c| c[d]);
            let eps = if spec.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            patches.push(base + eps);
        }
    }
    Example {
        id: index as u64,
        patches,
        tokens,
        label,
        meta: SceneMeta {
            shape: shape as u8,
            color: color as u8,
            claimed_shape: shape as u8,
            claimed_color: claimed_color as u8,
            template,
        },
    }
}

/// Example `index` of the dataset `spec` describes, computed on its own.
pub fn example(spec: &GenSpec, index: usize) -> Result<Example> {
    spec.validate()?;
    let total = spec.n_examples + spec.n_test;
    if index >= total {
        return Err(Error::invalid(format!("example {index} of {total}")));
    }
    Ok(render_example(spec, &Codes::new(spec), &Vocab::new(spec)?, index, label_of(spec, index), index as u64))
}

/// Alternating labels within the pool and within the test block, so both
/// are exactly balanced when their sizes are even.
fn label_of(spec: &GenSpec, index: usize) -> usize {
    if index < spec.n_examples {
        index % 2
    } else {
        (index - spec.n_examples) % 2
    }
}

pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let codes = Codes::new(spec);
    let vocab = Vocab::new(spec)?;
    let examples = (0..spec.n_examples + spec.n_test)
        .map(|i| render_example(spec, &codes, &vocab, i, label_of(spec, i), i as u64))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        examples,
    })
}

/// Test-only dataset of `base`'s domain with every attribute code moved by `shift`.
pub fn shifted_testset(base: &GenSpec, shift: ShiftSpec) -> Result<Dataset> {
    if shift.strength == 0.0 {
        return Err(Error::Config("a shift of strength 0 is the identity".into()));
    }
    let spec = GenSpec {
        n_examples: 0,
        n_test: base.n_test.max(2),
        shift: Some(shift),
        ..base.clone()
    };
    generate(&spec)
}

#[cfg(test)]
mod tests;
