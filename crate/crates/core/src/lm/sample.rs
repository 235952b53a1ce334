use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LanguageModel;
use crate::data::tokenizer::{TokenId, EOT};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    /// `0` means greedy decoding.
    pub temperature: f64,
    pub max_new_tokens: usize,
    /// Generation stops after emitting this token; it is not returned.
    pub stop_token: Option<TokenId>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_new_tokens: 16,
            stop_token: Some(EOT),
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Draws from `softmax(logits / temperature)`, or takes the argmax when the
/// temperature is zero.
/// Sampling distribution at `temperature` (> 0).
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let probs = softmax(logits, temperature);
    let mut u = rng.random::<f64>();
    let mut last = 0;
    for (i, &w) in probs.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return i;
            }
            u -= w;
            last = i;
        }
    }
    last
}

pub fn sample_generate(
    lm: &LanguageModel,
    prompt: &[TokenId],
    prefix: Option<&[f64]>,
    config: &GenerationConfig,
    seed: u64,
) -> Result<Vec<TokenId>> {
    sample_generate_with(lm, prompt, prefix, config, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Autoregressive continuation of `prompt`, optionally behind a soft prefix
/// row. Stops at the stop token, after `max_new_tokens`, or when the context
/// window is full.
pub fn sample_generate_with<R: Rng + ?Sized>(
    lm: &LanguageModel,
    prompt: &[TokenId],
    prefix: Option<&[f64]>,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let d = lm.config().hidden_dim;
    let max_len = lm.config().max_seq_len;
    let prefix_rows = usize::from(prefix.is_some());
    if prompt.is_empty() && prefix.is_none() {
        return Err(Error::Input("generation needs a prompt or a prefix".into()));
    }
    if prompt.len() + prefix_rows > max_len {
        return Err(Error::Length {
            len: prompt.len() + prefix_rows,
            max: max_len,
        });
    }
    let prefix = prefix
        .map(|p| Tensor::matrix(1, d, p.to_vec()).map_err(|_| Error::shape("generate.prefix", &[p.len()], &[d])))
        .transpose()?;
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < config.max_new_tokens && tokens.len() + prefix_rows < max_len {
        let mut g = Graph::new();
        let b = lm.bind(&mut g);
        let p = prefix.as_ref().map(|t| g.constant(t));
        let h0 = lm.prefixed_rows(&mut g, &b, p, &tokens)?;
        let hidden = lm.hidden(&mut g, &b, h0, true)?;
        let last = tokens.len() + prefix_rows - 1;
        let logits = lm.logits(&mut g, &b, hidden, Some(&[last]))?;
        let next = sample_token(g.value(logits), config.temperature, rng) as TokenId;
        if Some(next) == config.stop_token {
            break;
        }
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}
