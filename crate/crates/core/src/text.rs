//! Text prompts: a frozen, deterministic label embedder and the trainable
//! text affine layer (TAL) applied before the prompt encoder.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::TalActivation;
use crate::params::{ParamGroup, ParamStore};

pub const DEFAULT_TEXT_SEED: u64 = 0x5eed_7e47;

/// Anything that maps a prompt string to a fixed-width vector. The hashed
/// embedder below is the built-in implementation; a real text encoder can be
/// plugged in behind the same trait.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f32>>;

    fn embed_batch(&self, texts: &[&str], device: &Device) -> Result<Tensor> {
        let mut data = Vec::with_capacity(texts.len() * self.dim());
        for t in texts {
            data.extend(self.embed(t)?);
        }
        Ok(Tensor::from_vec(data, (texts.len(), self.dim()), device)?)
    }
}

/// Frozen hashed-table text embedder.
///
/// Each token's row is drawn from a Gaussian stream seeded by the table seed
/// and the FNV-1a hash of the token bytes, so a token embeds identically
/// whether or not it is in the vocabulary.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    dim: usize,
    seed: u64,
    vocabulary: BTreeMap<String, usize>,
    table: Vec<Vec<f64>>,
}


fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

impl TextEmbedder {
    pub fn new<S: AsRef<str>>(dim: usize, seed: u64, labels: &[S]) -> Self {
        let mut vocabulary = BTreeMap::new();
        for label in labels {
            for tok in tokenize(label.as_ref()) {
                let next = vocabulary.len();
                vocabulary.entry(tok).or_insert(next);
            }
        }
        let mut table = vec![Vec::new(); vocabulary.len()];
        for (tok, &i) in &vocabulary {
            table[i] = Self::hashed_row(dim, seed, tok);
        }
        Self {
            dim,
            seed,
            vocabulary,
            table,
        }
    }

    fn hashed_row(dim: usize, seed: u64, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ crate::seed::fnv1a(token.as_bytes()));
        (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, usize> {
        &self.vocabulary
    }

    fn token_row(&self, token: &str) -> Vec<f64> {
        match self.vocabulary.get(token) {
            Some(&i) => self.table[i].clone(),
            None => Self::hashed_row(self.dim, self.seed, token),
        }
    }

    /// Unit-norm embedding of a single token, before any averaging.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        normalize(self.token_row(&token.to_lowercase()))
    }

    pub fn embed_text(&self, label: &str) -> Result<Vec<f32>> {
        let tokens = tokenize(label);
        if tokens.is_empty() {
            return Err(Error::Prompt("empty prompt".into()));
        }
        let mut acc = vec![0.0f64; self.dim];
        for tok in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(tok)) {
                *a += v;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(normalize(acc).into_iter().map(|v| v as f32).collect())
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl TextEncoder for TextEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>> {
        self.embed_text(text)
    }
}

/// Text affine layer: `e ↦ W e + b`.
#[derive(Debug, Clone)]
pub struct TextAffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: TalActivation,
}

pub const TAL_WEIGHT: &str = "tal.weight";
pub const TAL_BIAS: &str = "tal.bias";

impl TextAffineLayer {
    pub fn identity(dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            weight: Tensor::eye(dim, dtype, device)?,
            bias: Tensor::zeros(dim, dtype, device)?,
            activation: TalActivation::None,
        })
    }

    /// Load from the store; `None` if the model has no TAL (pretrained models).
    pub fn load(store: &ParamStore, activation: TalActivation) -> Result<Option<Self>> {
        if !store.contains(TAL_WEIGHT) {
            return Ok(None);
        }
        Ok(Some(Self {
            weight: store.get(TAL_WEIGHT)?,
            bias: store.get(TAL_BIAS)?,
            activation,
        }))
    }

    /// Insert an identity-initialized TAL into `store` if it has none.
    pub fn ensure_in_store(store: &mut ParamStore, dim: usize) -> Result<()> {
        if store.contains(TAL_WEIGHT) {
            return Ok(());
        }
        let tal = Self::identity(dim, DType::F32, store.device())?;
        store.insert(TAL_WEIGHT, tal.weight, ParamGroup::Tal);
        store.insert(TAL_BIAS, tal.bias, ParamGroup::Tal);
        Ok(())
    }

    /// `e` has shape `(B, E)` or `(E,)`.
    pub fn forward(&self, e: &Tensor) -> Result<Tensor> {
        let (batched, e2) = match e.rank() {
            1 => (false, e.unsqueeze(0)?),
            _ => (true, e.clone()),
        };
        let mut y = e2.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        if self.activation == TalActivation::Relu {
            y = y.relu()?;
        }
        Ok(if batched { y } else { y.squeeze(0)? })
    }

    pub fn param_count(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }
}

pub fn apply_tal(tal: &TextAffineLayer, e: &Tensor) -> Result<Tensor> {
    tal.forward(e)
}
