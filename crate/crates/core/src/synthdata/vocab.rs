use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::GenSpec;
use crate::encoder::PAD_ID;
use crate::error::{Error, Result};

const THE: usize = 1;
const A: usize = 2;
const IS: usize = 3;
const LOOKS: usize = 4;
const WHAT: usize = 5;
const SO: usize = 6;
const TODAY: usize = 7;
const I: usize = 8;
const LOVE: usize = 9;
const THIS: usize = 10;
const AND: usize = 11;
const FUNCTION_WORDS: usize = 16;
const SYNONYMS: usize = 2;
const MIN_FILLERS: usize = 16;
const MAX_FILLER_TOKENS: usize = 4;

/// Slot markers inside templates.
const SHAPE: usize = usize::MAX;
const COLOR: usize = usize::MAX - 1;

const TEMPLATES: [&[usize]; 6] = [
    &[THE, SHAPE, IS, COLOR],
    &[A, COLOR, SHAPE],
    &[WHAT, A, COLOR, SHAPE],
    &[THIS, SHAPE, LOOKS, SO, COLOR],
    &[I, LOVE, THIS, COLOR, SHAPE],
    &[SHAPE, AND, COLOR, TODAY],
];

/// Longest sentence the templates can produce.
pub(super) const MAX_SENTENCE: usize = 5 + MAX_FILLER_TOKENS;

/// Token id layout: padding, function words, shape words, colour words, filler.
#[derive(Clone, Debug)]
pub struct Vocab {
    shapes: usize,
    colors: usize,
    size: usize,
}

impl Vocab {
    pub fn new(spec: &GenSpec) -> Result<Self> {
        let v = Self {
            shapes: spec.shapes,
            colors: spec.colors,
            size: spec.vocab,
        };
        if v.filler_start() + MIN_FILLERS > spec.vocab {
            return Err(Error::Config(format!(
                "vocab of {} is too small for {} shapes and {} colours",
                spec.vocab, spec.shapes, spec.colors
            )));
        }
        Ok(v)
    }

    fn shape_start(&self) -> usize {
        FUNCTION_WORDS
    }

    fn color_start(&self) -> usize {
        self.shape_start() + SYNONYMS * self.shapes
    }

    fn filler_start(&self) -> usize {
        self.color_start() + SYNONYMS * self.colors
    }

    pub fn shape_word(&self, shape: usize, synonym: usize) -> usize {
        self.shape_start() + SYNONYMS * shape + synonym
    }

    pub fn color_word(&self, color: usize, synonym: usize) -> usize {
        self.color_start() + SYNONYMS * color + synonym
    }

    /// The shape a token names, if any.
    pub fn shape_of(&self, token: usize) -> Option<usize> {
        (self.shape_start()..self.color_start())
            .contains(&token)
            .then(|| (token - self.shape_start()) / SYNONYMS)
    }

    pub fn color_of(&self, token: usize) -> Option<usize> {
        (self.color_start()..self.filler_start())
            .contains(&token)
            .then(|| (token - self.color_start()) / SYNONYMS)
    }

    pub(super) fn sentence(&self, rng: &mut ChaCha8Rng, shape: usize, color: usize, len: usize) -> (u8, Vec<usize>) {
        let t = rng.random_range(0..TEMPLATES.len());
        let mut tokens: Vec<usize> = TEMPLATES[t]
            .iter()
            .map(|&w| match w {
                SHAPE => self.shape_word(shape, rng.random_range(0..SYNONYMS)),
                COLOR => self.color_word(color, rng.random_range(0..SYNONYMS)),
                w => w,
            })
            .collect();
        for _ in 0..rng.random_range(0..=MAX_FILLER_TOKENS) {
            tokens.push(rng.random_range(self.filler_start()..self.size));
        }
        tokens.resize(len, PAD_ID);
        (t as u8, tokens)
    }
}
