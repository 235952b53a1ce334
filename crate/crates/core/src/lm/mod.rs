//! Small pre-LN decoder-only transformer.
//!
//! The model is trained with [`pretrain`] and then frozen into a [`FrozenLm`],
//! which exposes no mutable access and carries a SHA-256 digest of every
//! parameter. Input rows to [`LanguageModel::forward`] are already-embedded
//! vectors, so a soft prefix row can sit in front of the token rows.

mod pretrain;
mod sample;

pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use sample::{argmax, sample_generate, sample_generate_with, sample_token, softmax, GenerationConfig};

use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{parameter_digest, Checkpoint};
use crate::data::tokenizer::{TokenId, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            layer_norm_eps: 1e-5,
            seed: 42,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden_dim == 0 || self.n_layers == 0 {
            return Err(Error::Config("vocab_size, hidden_dim and n_layers must be positive".into()));
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must leave room for a prefix and one token".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
    w_up: Tensor,
    b_up: Tensor,
    w_down: Tensor,
    b_down: Tensor,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
    "attn.bo", "ln2.gamma", "ln2.beta", "ffn.w_up", "ffn.b_up", "ffn.w_down", "ffn.b_down",
];

impl Block {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }
}

/// Graph handles for one model's parameters, valid for a single forward pass.
pub struct BoundLm {
    token_embedding: Var,
    position_embedding: Var,
    blocks: Vec<[Var; 16]>,
    final_gamma: Var,
    final_beta: Var,
}

impl BoundLm {
    /// Parameter handles in [`LanguageModel::named_parameters`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        for b in &self.blocks {
            out.extend_from_slice(b);
        }
        out.push(self.final_gamma);
        out.push(self.final_beta);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    config: LmConfig,
    token_embedding: Tensor,
    position_embedding: Tensor,
    blocks: Vec<Block>,
    final_gamma: Tensor,
    final_beta: Tensor,
}

fn normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is positive");
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape and data agree")
}

fn constant(shape: Vec<usize>, value: f64) -> Tensor {
    Tensor::full(shape, value).expect("extents are positive")
}

impl LanguageModel {
    /// Randomly initialized, trainable model. Weights are drawn from
    /// N(0, 0.02²); residual output projections are further scaled by
    /// 1/sqrt(2·n_layers).
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f) = (config.vocab_size, config.hidden_dim, config.ffn_dim());
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
        let token_embedding = normal(&mut rng, vec![v, d], std);
        let position_embedding = normal(&mut rng, vec![config.max_seq_len, d], std);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1_gamma: constant(vec![d], 1.0),
                ln1_beta: constant(vec![d], 0.0),
                wq: normal(&mut rng, vec![d, d], std),
                bq: constant(vec![d], 0.0),
                wk: normal(&mut rng, vec![d, d], std),
                bk: constant(vec![d], 0.0),
                wv: normal(&mut rng, vec![d, d], std),
                bv: constant(vec![d], 0.0),
                wo: normal(&mut rng, vec![d, d], resid_std),
                bo: constant(vec![d], 0.0),
                ln2_gamma: constant(vec![d], 1.0),
                ln2_beta: constant(vec![d], 0.0),
                w_up: normal(&mut rng, vec![d, f], std),
                b_up: constant(vec![f], 0.0),
                w_down: normal(&mut rng, vec![f, d], resid_std),
                b_down: constant(vec![d], 0.0),
            })
            .collect();
        let mut model = Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_gamma: constant(vec![d], 1.0),
            final_beta: constant(vec![d], 0.0),
        };
        model.set_trainable(true);
        Ok(model)
    }

    /// A model whose every weight is zero (layer-norm gains stay 1), so all
    /// logits are 0 and every next-token distribution is uniform.
    pub fn zeroed(config: LmConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        let names = m.parameter_names();
        for (name, t) in names.iter().zip(m.parameters_mut()) {
            if !name.ends_with("gamma") {
                t.data_mut().fill(0.0);
            }
        }
        Ok(m)
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.token_embedding
    }

    /// The output projection is tied to the token embedding table.
    pub fn output_projection(&self) -> &Tensor {
        &self.token_embedding
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_owned(), "pos_emb".to_owned()];
        for i in 0..self.blocks.len() {
            names.extend(BLOCK_FIELDS.iter().map(|f| format!("layers.{i}.{f}")));
        }
        names.push("final_norm.gamma".into());
        names.push("final_norm.beta".into());
        names
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.push(&self.final_gamma);
        out.push(&self.final_beta);
        out
    }

    pub(crate) fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.parameter_names().into_iter().zip(self.parameters()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for t in self.parameters_mut() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn digest(&self) -> String {
        let names = self.parameter_names();
        parameter_digest(names.iter().map(String::as_str).zip(self.parameters()))
    }

    pub fn freeze(mut self) -> FrozenLm {
        self.set_trainable(false);
        for t in self.parameters_mut() {
            t.zero_grad();
        }
        let digest = self.digest();
        FrozenLm { model: self, digest }
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundLm {
        BoundLm {
            token_embedding: g.leaf(&self.token_embedding),
            position_embedding: g.leaf(&self.position_embedding),
            blocks: self
                .blocks
                .iter()
                .map(|b| b.tensors().map(|t| g.leaf(t)))
                .collect(),
            final_gamma: g.leaf(&self.final_gamma),
            final_beta: g.leaf(&self.final_beta),
        }
    }

    /// Token-embedding rows for `tokens`, without positional information.
    pub fn embed(&self, g: &mut Graph<'_>, b: &BoundLm, tokens: &[TokenId]) -> Result<Var> {
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        g.gather_rows(b.token_embedding, &ids)
    }

    /// Adds learned absolute position embeddings `0..L` to an `L×d` input.
    pub fn add_positions(&self, g: &mut Graph<'_>, b: &BoundLm, h: Var) -> Result<Var> {
        let len = g.shape(h)[0];
        if len > self.config.max_seq_len {
            return Err(Error::Length {
                len,
                max: self.config.max_seq_len,
            });
        }
        let rows: Vec<usize> = (0..len).collect();
        let pos = g.select_rows(b.position_embedding, &rows)?;
        g.add(h, pos)
    }

    /// `embed` followed by `add_positions`: the input rows without a prefix.
    pub fn input_rows(&self, g: &mut Graph<'_>, b: &BoundLm, tokens: &[TokenId]) -> Result<Var> {
        let e = self.embed(g, b, tokens)?;
        self.add_positions(g, b, e)
    }

    /// Input rows `[p; E(x)]` with positions added after concatenation, so a
    /// prefix row takes position 0 and token `t` takes position `t + 1`.
    pub fn prefixed_rows(&self, g: &mut Graph<'_>, b: &BoundLm, prefix: Option<Var>, tokens: &[TokenId]) -> Result<Var> {
        let d = self.config.hidden_dim;
        if let Some(p) = prefix {
            let shape = g.shape(p);
            if shape != [1, d] {
                return Err(Error::shape("inject", shape, &[1, d]));
            }
        }
        let rows = match (prefix, tokens.is_empty()) {
            (None, true) => return Err(Error::Input("empty token sequence".into())),
            (Some(p), true) => p,
            (None, false) => self.embed(g, b, tokens)?,
            (Some(p), false) => {
                let e = self.embed(g, b, tokens)?;
                g.concat_rows(&[p, e])?
            }
        };
        self.add_positions(g, b, rows)
    }

    /// Final normalized hidden states for input rows `h0` (`L×d`).
    pub fn hidden(&self, g: &mut Graph<'_>, b: &BoundLm, h0: Var, causal: bool) -> Result<Var> {
        let shape = g.shape(h0).to_vec();
        let d = self.config.hidden_dim;
        match shape.as_slice() {
            [len, cols] if *cols == d => {
                if *len > self.config.max_seq_len {
                    return Err(Error::Length {
                        len: *len,
                        max: self.config.max_seq_len,
                    });
                }
            }
            _ => return Err(Error::shape("lm.forward", &shape, &[self.config.max_seq_len, d])),
        }
        let eps = self.config.layer_norm_eps;
        let heads = self.config.n_heads;
        let mut h = h0;
        for p in &b.blocks {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w_up, b_up, w_down, b_down] = *p;
            let a = g.layer_norm(h, ln1_g, ln1_b, eps)?;
            let q = g.matmul(a, wq)?;
            let q = g.add_row_bias(q, bq)?;
            let k = g.matmul(a, wk)?;
            let k = g.add_row_bias(k, bk)?;
            let v = g.matmul(a, wv)?;
            let v = g.add_row_bias(v, bv)?;
            let att = g.attention(q, k, v, heads, causal)?;
            let o = g.matmul(att, wo)?;
            let o = g.add_row_bias(o, bo)?;
            h = g.add(h, o)?;

            let m = g.layer_norm(h, ln2_g, ln2_b, eps)?;
            let u = g.matmul(m, w_up)?;
            let u = g.add_row_bias(u, b_up)?;
            let u = g.relu(u);
            let f = g.matmul(u, w_down)?;
            let f = g.add_row_bias(f, b_down)?;
            h = g.add(h, f)?;
        }
        g.layer_norm(h, b.final_gamma, b.final_beta, eps)
    }

    /// Tied output projection, optionally restricted to selected rows.
    pub fn logits(&self, g: &mut Graph<'_>, b: &BoundLm, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => g.select_rows(hidden, r)?,
            None => hidden,
        };
        g.matmul_nt(h, b.token_embedding)
    }

    /// Logits for every input row (`L×V`).
    pub fn forward(&self, g: &mut Graph<'_>, b: &BoundLm, h0: Var, causal: bool) -> Result<Var> {
        let hidden = self.hidden(g, b, h0, causal)?;
        self.logits(g, b, hidden, None)
    }

    /// Per-token cross-entropy of `tokens[first_target..]` given input rows
    /// `h0`, whose first `prefix_rows` rows precede the token rows. Row `r`
    /// predicts the token in row `r + 1`.
    pub fn target_losses(
        &self,
        g: &mut Graph<'_>,
        b: &BoundLm,
        h0: Var,
        tokens: &[TokenId],
        first_target: usize,
        prefix_rows: usize,
    ) -> Result<Var> {
        let first = first_target.max(1usize.saturating_sub(prefix_rows));
        if first >= tokens.len() {
            return Err(Error::Input("no target tokens to score".into()));
        }
        let rows: Vec<usize> = (first..tokens.len()).map(|t| t + prefix_rows - 1).collect();
        let targets: Vec<usize> = tokens[first..].iter().map(|&t| t as usize).collect();
        let hidden = self.hidden(g, b, h0, true)?;
        let logits = self.logits(g, b, hidden, Some(&rows))?;
        g.cross_entropy(logits, &targets)
    }

    pub fn to_checkpoint(&self, header: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(header);
        for (name, t) in self.named_parameters() {
            ck.push(name, t.clone().with_requires_grad(false));
        }
        ck
    }

    fn from_blocks(config: LmConfig, ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(config)?;
        let names = model.parameter_names();
        for (name, t) in names.iter().zip(model.parameters_mut()) {
            let src = ck.block(name)?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "block `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(model)
    }
}

/// Immutable, digest-sealed model weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLm {
    model: LanguageModel,
    digest: String,
}

impl Deref for FrozenLm {
    type Target = LanguageModel;

    fn deref(&self) -> &LanguageModel {
        &self.model
    }
}

impl FrozenLm {
    /// Digest recorded at freeze time.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Recomputes the digest and fails if any parameter bit changed.
    pub fn verify(&self) -> Result<()> {
        let actual = self.model.digest();
        if actual != self.digest {
            return Err(Error::FreezeViolation {
                expected: self.digest.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn model(&self) -> &LanguageModel {
        &self.model
    }

    /// Returns a trainable copy; the seal is dropped.
    pub fn thaw(self) -> LanguageModel {
        let mut m = self.model;
        m.set_trainable(true);
        m
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut header = json!({
            "kind": "frozen_lm",
            "config": self.model.config,
            "param_digest": self.digest,
        });
        if let (Some(h), serde_json::Value::Object(e)) = (header.as_object_mut(), extra) {
            for (k, v) in e {
                h.entry(k).or_insert(v);
            }
        }
        Ok(self.model.to_checkpoint(header))
    }

    /// Rebuilds a frozen model; fails with a freeze violation if the stored
    /// digest does not match the loaded values.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header_str("kind") != Some("frozen_lm") {
            return Err(Error::Checkpoint("not a frozen_lm checkpoint".into()));
        }
        let config: LmConfig = serde_json::from_value(ck.header["config"].clone())?;
        let recorded = ck
            .header_str("param_digest")
            .ok_or_else(|| Error::Checkpoint("missing param_digest".into()))?
            .to_owned();
        let frozen = LanguageModel::from_blocks(config, ck)?.freeze();
        if frozen.digest != recorded {
            return Err(Error::FreezeViolation {
                expected: recorded,
                actual: frozen.digest,
            });
        }
        Ok(frozen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> LmConfig {
        LmConfig {
            vocab_size: 64,
            hidden_dim: 16,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 16,
            layer_norm_eps: 1e-5,
            seed: 7,
        }
    }

    fn logits_for(model: &LanguageModel, rows: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        let h0 = g.constant(rows);
        let l = model.forward(&mut g, &b, h0, true).unwrap();
        g.value(l).to_vec()
    }

    #[test]
    fn config_validation() {
        assert!(LmConfig::default().validate().is_ok());
        let bad = LmConfig {
            n_heads: 3,
            ..LmConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let short = LmConfig {
            max_seq_len: 1,
            ..LmConfig::default()
        };
        assert!(short.validate().is_err());
    }

    #[test]
    fn embed_rows_and_shapes() {
        let cfg = LmConfig {
            hidden_dim: 32,
            ..tiny_config()
        };
        let m = LanguageModel::new(cfg).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let e = m.embed(&mut g, &b, &[0]).unwrap();
        assert_eq!(g.value(e), &m.token_embedding().data()[..32]);
        let e = m.embed(&mut g, &b, &[3, 1, 3, 4, 5]).unwrap();
        assert_eq!(g.shape(e), &[5, 32]);
        let v = g.value(e);
        assert_eq!(&v[..32], &v[64..96]);
        assert!(matches!(m.embed(&mut g, &b, &[64]), Err(Error::Index { .. })));
    }

    #[test]
    fn forward_shape_and_length_limit() {
        let cfg = LmConfig {
            vocab_size: 64,
            ..tiny_config()
        };
        let m = LanguageModel::new(cfg).unwrap();
        let rows = Tensor::full(vec![6, 16], 0.1).unwrap();
        assert_eq!(logits_for(&m, &rows).len(), 6 * 64);
        let long = Tensor::full(vec![17, 16], 0.1).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let h0 = g.constant(&long);
        assert!(matches!(m.forward(&mut g, &b, h0, true), Err(Error::Length { len: 17, max: 16 })));
    }

    #[test]
    fn causal_mask_isolates_future_rows() {
        let m = LanguageModel::new(tiny_config()).unwrap();
        let base: Vec<f64> = (0..6 * 16).map(|i| (i as f64 * 0.13).sin()).collect();
        let rows = Tensor::matrix(6, 16, base.clone()).unwrap();
        let reference = logits_for(&m, &rows);
        let v = 64;
        for i in 0..6 {
            let mut pert = base.clone();
            // a constant shift would vanish under layer norm
            pert[i * 16..(i + 1) * 16]
                .iter_mut()
                .enumerate()
                .for_each(|(j, x)| *x += 0.1 * j as f64);
            let changed = logits_for(&m, &Tensor::matrix(6, 16, pert).unwrap());
            for pos in 0..6 {
                let delta = (0..v)
                    .map(|j| (changed[pos * v + j] - reference[pos * v + j]).abs())
                    .fold(0.0, f64::max);
                if pos < i {
                    assert_eq!(delta, 0.0, "row {i} leaked into position {pos}");
                } else {
                    assert!(delta > 0.0, "row {i} did not reach position {pos}");
                }
            }
        }
    }

    #[test]
    fn weights_are_tied() {
        let m = LanguageModel::new(tiny_config()).unwrap();
        assert!(std::ptr::eq(m.output_projection(), m.token_embedding()));
    }

    #[test]
    fn freeze_checkpoint_round_trip_and_tamper_detection() {
        let frozen = LanguageModel::new(tiny_config()).unwrap().freeze();
        assert!(frozen.parameters().iter().all(|t| !t.requires_grad()));
        frozen.verify().unwrap();
        let ck = frozen.to_checkpoint(json!({"seed": 7})).unwrap();
        let back = FrozenLm::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.digest(), frozen.digest());

        let mut tampered = ck.clone();
        tampered.blocks[3].1.data_mut()[0] += 1e-300;
        assert!(matches!(
            FrozenLm::from_checkpoint(&tampered),
            Err(Error::FreezeViolation { .. })
        ));
    }

    #[test]
    fn parameter_names_align_with_tensors() {
        let m = LanguageModel::new(tiny_config()).unwrap();
        assert_eq!(m.parameter_names().len(), m.parameters().len());
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        assert_eq!(b.vars().len(), m.parameters().len());
        for (v, t) in b.vars().into_iter().zip(m.parameters()) {
            assert_eq!(g.shape(v), t.shape());
        }
    }
}
