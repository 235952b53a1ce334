//! User-embedding projection, prefix injection, training objectives and the
//! φ-only training loop.

use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{parameter_digest, Checkpoint};
use crate::data::tokenizer::ByteTokenizer;
use crate::data::{split_system, system_token_len, Example, LmRecord, PrefRecord};
use crate::error::{Error, Result};
use crate::lm::{BoundLm, FrozenLm, LanguageModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Graph, Tensor, Var};

pub const PROB_CLAMP: f64 = 1e-12;

const PARAM_NAMES: [&str; 5] = ["w1", "w2", "b", "norm_gamma", "norm_beta"];

/// φ(c) = LayerNorm(ReLU(W1 c)) W2 + b with an affine layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `d_c × d`
    pub w1: Tensor,
    /// `d_c × d_h`
    pub w2: Tensor,
    /// `d_h`
    pub b: Tensor,
    /// `d_c`
    pub norm_gamma: Tensor,
    /// `d_c`
    pub norm_beta: Tensor,
    pub eps: f64,
}

pub struct BoundProjection {
    vars: [Var; 5],
}

impl BoundProjection {
    pub fn vars(&self) -> [Var; 5] {
        self.vars
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("consistent shape")
}

impl Projection {
    /// W1, W2 ~ U(±1/sqrt(fan_in)); b = 0, gamma = 1, beta = 0.
    pub fn new(d: usize, d_c: usize, d_h: usize, seed: u64) -> Result<Self> {
        if d == 0 || d_c == 0 || d_h == 0 {
            return Err(Error::Config("projection widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = uniform(&mut rng, d_c, d, d);
        let w2 = uniform(&mut rng, d_c, d_h, d_c);
        let full = |n, v| Tensor::full(vec![n], v).expect("positive width");
        let mut p = Self {
            w1,
            w2,
            b: full(d_h, 0.0),
            norm_gamma: full(d_c, 1.0),
            norm_beta: full(d_c, 0.0),
            eps: 1e-5,
        };
        for t in p.parameters_mut() {
            t.set_requires_grad(true);
        }
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.b.numel()
    }

    pub fn parameter_names(&self) -> [&'static str; 5] {
        PARAM_NAMES
    }

    pub fn parameters(&self) -> [&Tensor; 5] {
        [&self.w1, &self.w2, &self.b, &self.norm_gamma, &self.norm_beta]
    }

    pub fn parameters_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.w1,
            &mut self.w2,
            &mut self.b,
            &mut self.norm_gamma,
            &mut self.norm_beta,
        ]
    }

    pub fn digest(&self) -> String {
        parameter_digest(PARAM_NAMES.into_iter().zip(self.parameters()))
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundProjection {
        BoundProjection {
            vars: self.parameters().map(|t| g.leaf(t)),
        }
    }

    /// Prefix row (`1×d_h`) for a `1×d` embedding row.
    pub fn forward(&self, g: &mut Graph<'_>, bp: &BoundProjection, c: Var) -> Result<Var> {
        let [w1, w2, b, gamma, beta] = bp.vars;
        let shape = g.shape(c);
        if shape != [1, self.input_dim()] {
            return Err(Error::shape("project", shape, self.w1.shape()));
        }
        let h = g.matmul_nt(c, w1)?;
        let h = g.relu(h);
        let h = g.layer_norm(h, gamma, beta, self.eps)?;
        let p = g.matmul(h, w2)?;
        g.add_row_bias(p, b)
    }

    /// φ(c) without gradient tracking.
    pub fn project(&self, c: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.input_dim() {
            return Err(Error::shape("project", &[c.len()], self.w1.shape()));
        }
        let mut g = Graph::new();
        let bp = self.bind(&mut g);
        let c = g.input(Tensor::matrix(1, c.len(), c.to_vec())?);
        let p = self.forward(&mut g, &bp, c)?;
        Ok(g.value(p).to_vec())
    }

    pub fn to_checkpoint(&self, meta: &ProjectionMeta) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "projection",
            "d": self.input_dim(),
            "d_c": self.hidden_width(),
            "d_h": self.output_dim(),
            "eps": self.eps,
            "objective": meta.objective.to_string(),
            "alpha": meta.alpha,
            "lm_digest": meta.lm_digest,
            "seed": meta.seed,
            "param_digest": self.digest(),
        }));
        for (n, t) in PARAM_NAMES.into_iter().zip(self.parameters()) {
            ck.push(n, t.clone().with_requires_grad(false));
        }
        ck
    }

    /// Loads φ. When `lm` is given and its digest differs from the one φ was
    /// trained against, a warning is logged; callers decide whether to refuse.
    pub fn from_checkpoint(ck: &Checkpoint, lm: Option<&FrozenLm>) -> Result<(Self, ProjectionMeta)> {
        if ck.header_str("kind") != Some("projection") {
            return Err(Error::Checkpoint("not a projection checkpoint".into()));
        }
        let dim = |k: &str| {
            ck.header
                .get(k)
                .and_then(serde_json::Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("header is missing `{k}`")))
        };
        let (d, d_c, d_h) = (dim("d")?, dim("d_c")?, dim("d_h")?);
        let mut p = Self::new(d, d_c, d_h, 0)?;
        p.eps = ck.header.get("eps").and_then(serde_json::Value::as_f64).unwrap_or(1e-5);
        for (n, t) in PARAM_NAMES.into_iter().zip(p.parameters_mut()) {
            let src = ck.block(n)?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "block `{n}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        let meta = ProjectionMeta {
            objective: ck.header_str("objective").unwrap_or("lm").parse()?,
            alpha: ck.header.get("alpha").and_then(serde_json::Value::as_f64).unwrap_or(1.0),
            lm_digest: ck.header_str("lm_digest").unwrap_or_default().to_owned(),
            seed: ck.header.get("seed").and_then(serde_json::Value::as_u64).unwrap_or(0),
        };
        if let Some(lm) = lm {
            if lm.digest() != meta.lm_digest {
                warn!(
                    "projection was trained against lm {} but lm {} is loaded",
                    meta.lm_digest,
                    lm.digest()
                );
            }
        }
        Ok((p, meta))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMeta {
    pub objective: Objective,
    pub alpha: f64,
    pub lm_digest: String,
    pub seed: u64,
}

/// `[p; E(x)]` plus positions: the prefix row takes position 0.
pub fn inject(lm: &LanguageModel, g: &mut Graph<'_>, b: &BoundLm, p: Var, tokens: &[u32]) -> Result<Var> {
    lm.prefixed_rows(g, b, Some(p), tokens)
}

/// Per-target-token cross-entropy of `ex`, behind `prefix` if given.
pub fn token_losses(lm: &LanguageModel, g: &mut Graph<'_>, b: &BoundLm, prefix: Option<Var>, ex: &Example) -> Result<Var> {
    let rows = usize::from(prefix.is_some());
    let h0 = lm.prefixed_rows(g, b, prefix, &ex.tokens)?;
    lm.target_losses(g, b, h0, &ex.tokens, ex.first_target, rows)
}

/// Mean negative log-likelihood over the response tokens.
pub fn lm_loss(lm: &LanguageModel, g: &mut Graph<'_>, b: &BoundLm, prefix: Option<Var>, ex: &Example) -> Result<Var> {
    let per_token = token_losses(lm, g, b, prefix, ex)?;
    Ok(g.mean(per_token))
}

/// One example's KTO term, `−[y log p + α(1−y) log(1−p)]`, where
/// `p = exp(−mean_nll)` is the geometric-mean token probability.
pub fn kto_term(g: &mut Graph<'_>, mean_nll: Var, label: u8, alpha: f64) -> Result<Var> {
    if label > 1 {
        return Err(Error::Input(format!("label must be 0 or 1, got {label}")));
    }
    if !(alpha >= 0.0) {
        return Err(Error::Input(format!("alpha must be non-negative, got {alpha}")));
    }
    let log_p = g.scale(mean_nll, -1.0);
    let p = g.exp(log_p);
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    Ok(if label == 1 {
        let lp = g.ln(p);
        g.scale(lp, -1.0)
    } else {
        let q = g.affine(p, -1.0, 1.0);
        let lq = g.ln(q);
        g.scale(lq, -alpha)
    })
}

/// The KTO batch loss from sequence probabilities directly.
pub fn kto_from_probabilities(p: &[f64], labels: &[u8], alpha: f64) -> Result<f64> {
    if p.len() != labels.len() || p.is_empty() {
        return Err(Error::Input("probabilities and labels must be non-empty and aligned".into()));
    }
    let mut total = 0.0;
    for (&pi, &y) in p.iter().zip(labels) {
        let pi = pi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += match y {
            1 => pi.ln(),
            0 => alpha * (1.0 - pi).ln(),
            _ => return Err(Error::Input(format!("label must be 0 or 1, got {y}"))),
        };
    }
    Ok(-total / p.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Lm,
    Kto,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Lm => "lm",
            Objective::Kto => "kto",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lm" => Ok(Objective::Lm),
            "kto" => Ok(Objective::Kto),
            _ => Err(Error::Config(format!("unknown objective `{s}` (expected lm or kto)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Projection hidden width; `None` means `d_h`.
    pub hidden_width: Option<usize>,
}

impl Default for TrainConfig {
    /// Global fallback: lr 5e-6, batch 32, 5 epochs.
    fn default() -> Self {
        Self {
            learning_rate: 5e-6,
            batch_size: 32,
            epochs: 5,
            seed: 42,
            alpha: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            hidden_width: None,
        }
    }
}

impl TrainConfig {
    pub const PRESETS: [&'static str; 6] = ["default", "persona-chat", "pens", "music", "podcast", "synthetic"];

    /// Per-task defaults. `synthetic` is sized for the desk-scale corpus.
    pub fn preset(name: &str) -> Result<Self> {
        let (learning_rate, batch_size, epochs) = match name {
            "default" => return Ok(Self::default()),
            "persona-chat" => (5e-6, 64, 3),
            "pens" => (5e-6, 32, 3),
            "music" => (5e-7, 256, 5),
            "podcast" => (1e-5, 16, 5),
            "synthetic" => (3e-3, 16, 2),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset `{name}` (one of {})",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            learning_rate,
            batch_size,
            epochs,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// A tokenized training or evaluation item with its user embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct E2pExample {
    pub embedding: Vec<f64>,
    pub example: Example,
    /// Token count of the profile block kept in `example`, 0 when stripped.
    pub profile_len: usize,
    pub label: Option<u8>,
}

impl E2pExample {
    /// Tokenizes an LM record; the leading system (profile) block is dropped
    /// unless `keep_profile`.
    pub fn from_lm(rec: &LmRecord, keep_profile: bool) -> Self {
        let text = if keep_profile {
            rec.text.as_str()
        } else {
            split_system(&rec.text).1
        };
        let tokens = ByteTokenizer.encode(text);
        let profile_len = system_token_len(&tokens);
        Self {
            embedding: rec.uservector.clone(),
            example: Example::from_text(tokens),
            profile_len,
            label: None,
        }
    }

    /// Prompt tokens followed by completion tokens; only the completion is scored.
    pub fn from_pref(rec: &PrefRecord, keep_profile: bool) -> Self {
        let prompt = if keep_profile {
            rec.prompt.as_str()
        } else {
            split_system(&rec.prompt).1
        };
        let mut tokens = ByteTokenizer.encode(prompt);
        let profile_len = system_token_len(&tokens);
        let first_target = tokens.len();
        tokens.extend(ByteTokenizer.encode(&rec.completion));
        Self {
            embedding: rec.uservector.clone(),
            example: Example::new(tokens, first_target),
            profile_len,
            label: Some(rec.label),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: Objective,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub lm_digest: String,
    pub phi_digest: String,
}

/// Loss of one example and the gradient of every φ tensor, scaled by `weight`.
fn example_grads(
    lm: &FrozenLm,
    phi: &Projection,
    ex: &E2pExample,
    objective: Objective,
    alpha: f64,
    weight: f64,
) -> Result<(f64, [Option<Vec<f64>>; 5])> {
    let model = lm.model();
    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let bp = phi.bind(&mut g);
    let c = g.input(Tensor::matrix(1, ex.embedding.len(), ex.embedding.clone())?);
    let p = phi.forward(&mut g, &bp, c)?;
    let nll = lm_loss(model, &mut g, &b, Some(p), &ex.example)?;
    let loss = match objective {
        Objective::Lm => nll,
        Objective::Kto => {
            let label = ex
                .label
                .ok_or_else(|| Error::Input("kto objective needs labeled examples".into()))?;
            kto_term(&mut g, nll, label, alpha)?
        }
    };
    let value = g.scalar(loss)?;
    let scaled = g.scale(loss, weight);
    g.backward(scaled)?;
    Ok((value, bp.vars().map(|v| g.grad(v).map(<[f64]>::to_vec))))
}

/// Trains φ against a frozen LM. Only the five φ tensors are updated; the LM
/// digest is re-verified before returning.
pub fn train_e2p(
    lm: &FrozenLm,
    data: &[E2pExample],
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<(Projection, TrainReport)> {
    cfg.validate()?;
    let first = data.first().ok_or_else(|| Error::Input("training data is empty".into()))?;
    let d = first.embedding.len();
    if let Some(bad) = data.iter().find(|e| e.embedding.len() != d) {
        return Err(Error::shape("train_e2p.embedding", &[bad.embedding.len()], &[d]));
    }
    let d_h = lm.config().hidden_dim;
    let max = lm.config().max_seq_len;
    let data: Vec<E2pExample> = data
        .iter()
        .map(|e| {
            Ok(E2pExample {
                example: e.example.clone().fit(max, 1)?,
                ..e.clone()
            })
        })
        .collect::<Result<_>>()?;

    let mut phi = Projection::new(d, cfg.hidden_width.unwrap_or(d_h), d_h, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer(), PARAM_NAMES.into_iter().zip(phi.parameters()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let mut acc: Vec<Vec<f64>> = phi.parameters().iter().map(|t| vec![0.0; t.numel()]).collect();
            for &i in batch {
                let (loss, grads) = example_grads(lm, &phi, &data[i], objective, cfg.alpha, weight)?;
                total += loss;
                for (a, gr) in acc.iter_mut().zip(grads) {
                    if let Some(gr) = gr {
                        a.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
            }
            let mut params = phi.parameters_mut();
            for (p, a) in params.iter_mut().zip(&acc) {
                p.zero_grad();
                p.accumulate_grad(a)?;
            }
            opt.step(&mut params)?;
        }
        let mean = total / data.len() as f64;
        info!("e2p epoch {} {objective} loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }
    lm.verify()?;
    let report = TrainReport {
        objective,
        epoch_losses,
        steps: opt.steps_taken(),
        seed: cfg.seed,
        config: cfg.clone(),
        lm_digest: lm.digest().to_owned(),
        phi_digest: phi.digest(),
    };
    Ok((phi, report))
}
