use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FrozenLm, LanguageModel, LmConfig};
use crate::data::tokenizer::TokenId;
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            optimizer: AdamWConfig {
                learning_rate: 3e-3,
                ..AdamWConfig::default()
            },
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean next-token loss per sequence, averaged over each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub sequences: usize,
    pub param_digest: String,
}

/// Next-token training over `corpus`, then freezing. Sequences longer than
/// the context window keep their last `max_seq_len` tokens; sequences with
/// fewer than two tokens are skipped.
pub fn pretrain(corpus: &[Vec<TokenId>], config: &LmConfig, opts: &PretrainConfig) -> Result<(FrozenLm, PretrainReport)> {
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    let mut model = LanguageModel::new(config.clone())?;
    let max = config.max_seq_len;
    let seqs: Vec<&[TokenId]> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| &s[s.len().saturating_sub(max)..])
        .collect();
    if seqs.is_empty() {
        return Err(Error::Input("pretraining corpus has no sequence with two or more tokens".into()));
    }
    if let Some(bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Index {
            index: *bad as usize,
            bound: config.vocab_size,
            context: "pretraining token",
        });
    }

    let names = model.parameter_names();
    let mut opt = AdamW::new(
        opts.optimizer.clone(),
        names.iter().map(String::as_str).zip(model.parameters()),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut acc: Vec<Vec<f64>> = model.parameters().iter().map(|t| vec![0.0; t.numel()]).collect();
            for &i in batch {
                let seq = seqs[i];
                let mut g = Graph::new();
                let b = model.bind(&mut g);
                let h0 = model.input_rows(&mut g, &b, seq)?;
                let per_token = model.target_losses(&mut g, &b, h0, seq, 1, 0)?;
                let loss = g.mean(per_token);
                total += g.scalar(loss)?;
                g.backward(loss)?;
                for (a, v) in acc.iter_mut().zip(b.vars()) {
                    if let Some(gr) = g.grad(v) {
                        a.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut params = model.parameters_mut();
            for (p, a) in params.iter_mut().zip(&acc) {
                p.zero_grad();
                let g: Vec<f64> = a.iter().map(|x| x * scale).collect();
                p.accumulate_grad(&g)?;
            }
            opt.step(&mut params)?;
        }
        let mean = total / seqs.len() as f64;
        info!("pretrain epoch {} loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }

    let frozen = model.freeze();
    let report = PretrainReport {
        epoch_losses,
        steps: opt.steps_taken(),
        sequences: seqs.len(),
        param_digest: frozen.digest().to_owned(),
    };
    Ok((frozen, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LmConfig {
        LmConfig {
            vocab_size: 8,
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 12,
            layer_norm_eps: 1e-5,
            seed: 3,
        }
    }

    #[test]
    fn loss_falls_on_a_repeating_pattern() {
        let corpus: Vec<Vec<TokenId>> = (0..16).map(|k| (0..10).map(|i| ((i + k) % 4) as TokenId).collect()).collect();
        let opts = PretrainConfig {
            epochs: 6,
            batch_size: 4,
            optimizer: AdamWConfig {
                learning_rate: 1e-2,
                ..AdamWConfig::default()
            },
            seed: 1,
        };
        let (lm, report) = pretrain(&corpus, &cfg(), &opts).unwrap();
        assert_eq!(report.steps, 24);
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(first > 1.5 && last < 0.5 * first, "{:?}", report.epoch_losses);
        lm.verify().unwrap();
        let (again, _) = pretrain(&corpus, &cfg(), &opts).unwrap();
        assert_eq!(again.digest(), lm.digest());
    }

    #[test]
    fn unusable_corpus_is_rejected() {
        let opts = PretrainConfig::default();
        assert!(matches!(pretrain(&[vec![1]], &cfg(), &opts), Err(Error::Input(_))));
        assert!(matches!(pretrain(&[vec![1, 9]], &cfg(), &opts), Err(Error::Index { .. })));
    }
}
