//! Metrics, baselines, significance tests and the prefix-space export.

pub mod rouge;
pub mod space;
pub mod stats;

pub use rouge::{rouge, RougeVariant};
pub use space::{export_prefix_space, neighbor_agreement, pca_2d, prefix_space, SpaceExport};
pub use stats::{paired_t_test, TTest};

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::tokenizer::{ByteTokenizer, TokenId, EOT};
use crate::data::{Example, LmRecord, PrefRecord};
use crate::error::{Error, Result};
use crate::lm::{sample_generate_with, GenerationConfig, LanguageModel};
use crate::prefix::{lm_loss, E2pExample, Projection};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub baseline: String,
    /// Perplexity: exp of the mean of `per_example` (per-record mean NLL).
    /// Every other metric: the plain mean of `per_example`.
    pub aggregate: f64,
    pub n: usize,
    pub seed: u64,
    pub config_digest: String,
    pub data_digest: String,
    /// Extra input rows the method spends on personalization; `None` when
    /// the method does not prompt the LM.
    pub context_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_example: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn scores(&self) -> Result<&[f64]> {
        self.per_example
            .as_deref()
            .ok_or_else(|| Error::Input(format!("report `{}` has no per-example scores", self.baseline)))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean response NLL of one example, behind `prefix` if given.
pub fn example_nll(lm: &LanguageModel, prefix: Option<&[f64]>, ex: &Example) -> Result<f64> {
    let mut g = Graph::new();
    let b = lm.bind(&mut g);
    let p = prefix
        .map(|p| Tensor::matrix(1, p.len(), p.to_vec()).map(|t| g.input(t)))
        .transpose()?;
    let loss = lm_loss(lm, &mut g, &b, p, ex)?;
    g.scalar(loss)
}

/// Per-example mean NLL and `exp(mean)` over them.
pub fn perplexity(lm: &LanguageModel, items: &[(Option<Vec<f64>>, Example)]) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Input("perplexity needs at least one example".into()));
    }
    let max = lm.config().max_seq_len;
    let scores = items
        .iter()
        .map(|(p, ex)| {
            if ex.targets().is_empty() {
                return Err(Error::Input("example has no target tokens".into()));
            }
            let ex = ex.clone().fit(max, usize::from(p.is_some()))?;
            example_nll(lm, p.as_deref(), &ex)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((mean(&scores).exp(), scores))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HitrateConfig {
    pub k: usize,
    pub temperature: f64,
    pub stop_token: Option<TokenId>,
}

impl Default for HitrateConfig {
    fn default() -> Self {
        Self {
            k: 30,
            temperature: 1.0,
            stop_token: Some(EOT),
        }
    }
}

/// 1 if any of `k` sampled continuations of the prompt equals the target,
/// else 0. Draws come from one RNG seeded with `seed`.
pub fn hit(lm: &LanguageModel, prefix: Option<&[f64]>, ex: &Example, cfg: &HitrateConfig, seed: u64) -> Result<f64> {
    if cfg.k == 0 {
        return Err(Error::Config("hitrate needs k ≥ 1".into()));
    }
    let target = ex.targets();
    let prompt = &ex.tokens[..ex.first_target];
    let gen = GenerationConfig {
        temperature: cfg.temperature,
        max_new_tokens: target.len(),
        stop_token: cfg.stop_token,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.k {
        if sample_generate_with(lm, prompt, prefix, &gen, &mut rng)? == target {
            return Ok(1.0);
        }
    }
    Ok(0.0)
}

/// Per-query hits with seeds `seed + i`, and their mean.
pub fn hitrate_at_k(
    lm: &LanguageModel,
    items: &[(Option<Vec<f64>>, Example)],
    cfg: &HitrateConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::Input("hitrate needs at least one query".into()));
    }
    let scores = items
        .iter()
        .enumerate()
        .map(|(i, (p, ex))| hit(lm, p.as_deref(), ex, cfg, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((mean(&scores), scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    NoContext,
    PromptContext,
    #[serde(rename = "e2p-random")]
    E2PRandom,
    #[serde(rename = "e2p")]
    E2P,
    #[serde(rename = "e2p-plus-prompt")]
    E2PPlusPrompt,
    EmbeddingRetrieval,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 6] = [
        BaselineKind::NoContext,
        BaselineKind::PromptContext,
        BaselineKind::E2PRandom,
        BaselineKind::E2P,
        BaselineKind::E2PPlusPrompt,
        BaselineKind::EmbeddingRetrieval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::NoContext => "no-context",
            BaselineKind::PromptContext => "prompt-context",
            BaselineKind::E2PRandom => "e2p-random",
            BaselineKind::E2P => "e2p",
            BaselineKind::E2PPlusPrompt => "e2p-plus-prompt",
            BaselineKind::EmbeddingRetrieval => "embedding-retrieval",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::NoContext => "No Context",
            BaselineKind::PromptContext => "Prompt Context",
            BaselineKind::E2PRandom => "E2P-Random",
            BaselineKind::E2P => "E2P",
            BaselineKind::E2PPlusPrompt => "E2P + Prompt",
            BaselineKind::EmbeddingRetrieval => "Embedding Retrieval",
        }
    }

    pub fn uses_prefix(self) -> bool {
        matches!(self, BaselineKind::E2P | BaselineKind::E2PRandom | BaselineKind::E2PPlusPrompt)
    }

    pub fn uses_profile(self) -> bool {
        matches!(self, BaselineKind::PromptContext | BaselineKind::E2PPlusPrompt)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    Perplexity,
    Rouge {
        variant: RougeVariant,
        temperature: f64,
        max_new_tokens: usize,
    },
    Hitrate(HitrateConfig),
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::Perplexity => "perplexity".into(),
            Metric::Rouge { variant, .. } => variant.to_string(),
            Metric::Hitrate(c) => format!("hitrate@{}", c.k),
        }
    }

    pub fn lower_is_better(&self) -> bool {
        matches!(self, Metric::Perplexity)
    }
}

/// One held-out query, tokenized with and without its profile block.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub plain: E2pExample,
    pub profiled: E2pExample,
}

impl EvalItem {
    pub fn from_lm(rec: &LmRecord) -> Self {
        Self {
            plain: E2pExample::from_lm(rec, false),
            profiled: E2pExample::from_lm(rec, true),
        }
    }

    pub fn from_pref(rec: &PrefRecord) -> Self {
        Self {
            plain: E2pExample::from_pref(rec, false),
            profiled: E2pExample::from_pref(rec, true),
        }
    }

    pub fn embedding(&self) -> &[f64] {
        &self.plain.embedding
    }

    pub fn reference(&self) -> Result<String> {
        ByteTokenizer.decode(self.plain.example.targets())
    }
}

/// A candidate for embedding retrieval: its vector and the response text it
/// stands for (e.g. a semantic id).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub embedding: Vec<f64>,
    pub response: String,
}

/// Everything a baseline may need. `phi` is required by prefix kinds and
/// `candidates` by retrieval.
pub struct EvalContext<'a> {
    pub lm: &'a LanguageModel,
    pub phi: Option<&'a Projection>,
    pub items: &'a [EvalItem],
    pub candidates: Option<&'a [Candidate]>,
    pub metric: Metric,
    pub seed: u64,
    pub config_digest: String,
    pub data_digest: String,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Candidate indices by descending cosine similarity to `user`, ties to the
/// lower index.
pub fn rank_by_cosine(user: &[f64], candidates: &[Candidate]) -> Vec<usize> {
    let sims: Vec<f64> = candidates.iter().map(|c| cosine(user, &c.embedding)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Index of the test-set user whose embedding E2P-Random injects for item `i`.
pub fn random_source(n_items: usize, seed: u64, i: usize) -> usize {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)).random_range(0..n_items)
}

fn retrieval(ctx: &EvalContext<'_>) -> Result<Vec<f64>> {
    let candidates = ctx
        .candidates
        .ok_or_else(|| Error::Config("embedding-retrieval needs candidate item embeddings".into()))?;
    let Metric::Hitrate(cfg) = &ctx.metric else {
        return Err(Error::Config(format!(
            "embedding-retrieval only supports hitrate, not {}",
            ctx.metric.name()
        )));
    };
    Ok(ctx
        .items
        .iter()
        .map(|it| {
            let want = it.reference().unwrap_or_default();
            let top = rank_by_cosine(it.embedding(), candidates);
            let hit = top.iter().take(cfg.k).any(|&j| candidates[j].response == want);
            if hit {
                1.0
            } else {
                0.0
            }
        })
        .collect())
}

/// Runs one method over the held-out items and reports the metric.
pub fn run_baseline(kind: BaselineKind, ctx: &EvalContext<'_>) -> Result<EvalReport> {
    let items = ctx.items;
    if items.is_empty() {
        return Err(Error::Input("no evaluation items".into()));
    }
    if kind.uses_prefix() && ctx.phi.is_none() {
        return Err(Error::Config(format!("{kind} needs a trained projection (phi)")));
    }
    if kind.uses_profile() && items.iter().all(|it| it.profiled.profile_len == 0) {
        return Err(Error::Config(format!("{kind} needs textual profiles in the data")));
    }
    let per_example = if kind == BaselineKind::EmbeddingRetrieval {
        retrieval(ctx)?
    } else {
        let pool: Vec<&[f64]> = items.iter().map(EvalItem::embedding).collect();
        let inputs = items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let ex = if kind.uses_profile() { &it.profiled } else { &it.plain };
                let source = match kind {
                    BaselineKind::E2PRandom => Some(pool[random_source(pool.len(), ctx.seed, i)]),
                    k if k.uses_prefix() => Some(it.embedding()),
                    _ => None,
                };
                let prefix = match (source, ctx.phi) {
                    (Some(c), Some(phi)) => Some(phi.project(c)?),
                    _ => None,
                };
                Ok((prefix, ex.example.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        score(ctx, &inputs)?
    };
    let aggregate = match ctx.metric {
        Metric::Perplexity => mean(&per_example).exp(),
        _ => mean(&per_example),
    };
    let profile = mean(&items.iter().map(|it| it.profiled.profile_len as f64).collect::<Vec<_>>());
    let context_length = match kind {
        BaselineKind::NoContext => Some(0.0),
        BaselineKind::E2P | BaselineKind::E2PRandom => Some(1.0),
        BaselineKind::PromptContext => Some(profile),
        BaselineKind::E2PPlusPrompt => Some(profile + 1.0),
        BaselineKind::EmbeddingRetrieval => None,
    };
    Ok(EvalReport {
        metric: ctx.metric.name(),
        baseline: kind.name().to_owned(),
        aggregate,
        n: per_example.len(),
        seed: ctx.seed,
        config_digest: ctx.config_digest.clone(),
        data_digest: ctx.data_digest.clone(),
        context_length,
        per_example: Some(per_example),
    })
}

fn score(ctx: &EvalContext<'_>, inputs: &[(Option<Vec<f64>>, Example)]) -> Result<Vec<f64>> {
    match &ctx.metric {
        Metric::Perplexity => Ok(perplexity(ctx.lm, inputs)?.1),
        Metric::Hitrate(cfg) => Ok(hitrate_at_k(ctx.lm, inputs, cfg, ctx.seed)?.1),
        Metric::Rouge {
            variant,
            temperature,
            max_new_tokens,
        } => inputs
            .iter()
            .enumerate()
            .map(|(i, (p, ex))| {
                let gen = GenerationConfig {
                    temperature: *temperature,
                    max_new_tokens: *max_new_tokens,
                    stop_token: Some(EOT),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed.wrapping_add(i as u64));
                let out = sample_generate_with(ctx.lm, &ex.tokens[..ex.first_target], p.as_deref(), &gen, &mut rng)?;
                let cand = ByteTokenizer.decode(&out)?;
                let reference = ByteTokenizer.decode(ex.targets())?;
                Ok(rouge(&cand, &reference, *variant))
            })
            .collect(),
    }
}

fn format_context(c: Option<f64>) -> String {
    match c {
        None => "n/a".into(),
        Some(v) if v.fract() == 0.0 => format!("{v:.0}"),
        Some(v) => format!("{v:.1}"),
    }
}

/// Markdown table with one row per method: method, context length, then one
/// column per metric. Refuses reports computed on different data.
pub fn comparison_table(reports: &[EvalReport]) -> Result<String> {
    let first = reports.first().ok_or_else(|| Error::Input("no reports to compare".into()))?;
    if let Some(r) = reports.iter().find(|r| r.data_digest != first.data_digest) {
        return Err(Error::Contract(format!(
            "reports `{}` and `{}` come from different test splits",
            first.baseline, r.baseline
        )));
    }
    let mut metrics: Vec<&str> = Vec::new();
    let mut rows: BTreeMap<BaselineKind, (Option<f64>, BTreeMap<&str, f64>)> = BTreeMap::new();
    for r in reports {
        if !metrics.contains(&r.metric.as_str()) {
            metrics.push(&r.metric);
        }
        let kind: BaselineKind = r.baseline.parse()?;
        let row = rows.entry(kind).or_insert((r.context_length, BTreeMap::new()));
        row.1.insert(&r.metric, r.aggregate);
    }
    let mut out = String::from("| Method | Context length |");
    for m in &metrics {
        write!(out, " {m} |").expect("writing to a String");
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(metrics.len()));
    out.push('\n');
    for (kind, (ctx_len, vals)) in rows {
        write!(out, "| {} | {} |", kind.label(), format_context(ctx_len)).expect("writing to a String");
        for m in &metrics {
            match vals.get(m) {
                Some(v) => write!(out, " {v:.4} |"),
                None => write!(out, " - |"),
            }
            .expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::chat_text;
    use crate::lm::LmConfig;

    fn tiny() -> LanguageModel {
        LanguageModel::new(LmConfig {
            hidden_dim: 16,
            n_heads: 2,
            n_layers: 1,
            max_seq_len: 64,
            ..LmConfig::default()
        })
        .unwrap()
    }

    fn items(n: usize) -> Vec<EvalItem> {
        (0..n)
            .map(|i| {
                EvalItem::from_lm(&LmRecord {
                    uservector: vec![i as f64, 1.0, -1.0],
                    text: chat_text(Some("favourites: a b c"), "q", "abab"),
                })
            })
            .collect()
    }

    fn ctx<'a>(lm: &'a LanguageModel, phi: Option<&'a Projection>, items: &'a [EvalItem]) -> EvalContext<'a> {
        EvalContext {
            lm,
            phi,
            items,
            candidates: None,
            metric: Metric::Perplexity,
            seed: 3,
            config_digest: "c".into(),
            data_digest: "d".into(),
        }
    }

    #[test]
    fn uniform_model_perplexity_is_the_vocabulary_size() {
        let lm = LanguageModel::zeroed(LmConfig::default()).unwrap();
        let ex = Example::new(vec![1, 2, 3, 4, 5], 2);
        let (ppl, _) = perplexity(&lm, &[(None, ex)]).unwrap();
        assert!((ppl - 260.0).abs() < 1e-9);
    }

    #[test]
    fn context_lengths_follow_the_method() {
        let lm = tiny();
        let phi = Projection::new(3, 16, 16, 1).unwrap();
        let its = items(4);
        let c = ctx(&lm, Some(&phi), &its);
        let profile = its[0].profiled.profile_len as f64;
        assert_eq!(profile, 1.0 + 1.0 + 17.0 + 1.0 + 1.0 + 1.0);
        let want = [
            (BaselineKind::NoContext, 0.0),
            (BaselineKind::E2P, 1.0),
            (BaselineKind::E2PRandom, 1.0),
            (BaselineKind::PromptContext, profile),
            (BaselineKind::E2PPlusPrompt, profile + 1.0),
        ];
        for (k, len) in want {
            assert_eq!(run_baseline(k, &c).unwrap().context_length, Some(len), "{k}");
        }
    }

    #[test]
    fn missing_artifacts_are_config_errors() {
        let lm = tiny();
        let its = items(2);
        let c = ctx(&lm, None, &its);
        assert!(matches!(run_baseline(BaselineKind::E2P, &c), Err(Error::Config(_))));
        assert!(matches!(run_baseline(BaselineKind::EmbeddingRetrieval, &c), Err(Error::Config(_))));
        let bare: Vec<EvalItem> = (0..2)
            .map(|_| {
                EvalItem::from_lm(&LmRecord {
                    uservector: vec![0.0; 3],
                    text: chat_text(None, "q", "ab"),
                })
            })
            .collect();
        let c = ctx(&lm, None, &bare);
        assert!(matches!(run_baseline(BaselineKind::PromptContext, &c), Err(Error::Config(_))));
    }

    #[test]
    fn random_prefix_is_reproducible_and_matches_e2p_when_drawing_self() {
        let lm = tiny();
        let phi = Projection::new(3, 16, 16, 1).unwrap();
        let its = items(5);
        let c = ctx(&lm, Some(&phi), &its);
        let a = run_baseline(BaselineKind::E2PRandom, &c).unwrap();
        assert_eq!(a, run_baseline(BaselineKind::E2PRandom, &c).unwrap());
        let e2p = run_baseline(BaselineKind::E2P, &c).unwrap();
        for i in 0..its.len() {
            if random_source(its.len(), c.seed, i) == i {
                assert_eq!(a.scores().unwrap()[i], e2p.scores().unwrap()[i]);
            }
        }
    }

    #[test]
    fn retrieval_ranks_identical_embedding_first() {
        let cands = vec![
            Candidate {
                embedding: vec![0.0, 1.0, -1.0],
                response: "x".into(),
            },
            Candidate {
                embedding: vec![2.0, 1.0, -1.0],
                response: "abab".into(),
            },
        ];
        assert_eq!(rank_by_cosine(&[2.0, 1.0, -1.0], &cands)[0], 1);
        let lm = tiny();
        let its = items(3);
        let mut c = ctx(&lm, None, &its);
        c.candidates = Some(&cands);
        c.metric = Metric::Hitrate(HitrateConfig {
            k: 1,
            ..HitrateConfig::default()
        });
        let r = run_baseline(BaselineKind::EmbeddingRetrieval, &c).unwrap();
        assert_eq!(r.per_example.unwrap(), vec![0.0, 1.0, 1.0]);
        assert_eq!(r.context_length, None);
    }

    #[test]
    fn table_refuses_mixed_splits_and_lists_methods() {
        let lm = tiny();
        let phi = Projection::new(3, 16, 16, 1).unwrap();
        let its = items(3);
        let c = ctx(&lm, Some(&phi), &its);
        let a = run_baseline(BaselineKind::NoContext, &c).unwrap();
        let b = run_baseline(BaselineKind::E2P, &c).unwrap();
        let table = comparison_table(&[a.clone(), b.clone()]).unwrap();
        assert!(table.contains("| No Context | 0 |"));
        assert!(table.contains("| E2P | 1 |"));
        let mut other = b;
        other.data_digest = "elsewhere".into();
        assert!(matches!(comparison_table(&[a, other]), Err(Error::Contract(_))));
    }

    #[test]
    fn hitrate_is_monotone_in_k() {
        let lm = tiny();
        let its = items(6);
        let inputs: Vec<_> = its.iter().map(|it| (None, it.plain.example.clone())).collect();
        let mut last = 0.0;
        for k in [1, 5, 20, 60] {
            let cfg = HitrateConfig {
                k,
                temperature: 1.0,
                stop_token: None,
            };
            let (h, _) = hitrate_at_k(&lm, &inputs, &cfg, 11).unwrap();
            assert!(h >= last);
            last = h;
        }
    }

    #[test]
    fn report_json_has_the_documented_fields() {
        let lm = tiny();
        let its = items(2);
        let r = run_baseline(BaselineKind::NoContext, &ctx(&lm, None, &its)).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for f in ["metric", "aggregate", "n", "seed", "config_digest", "per_example"] {
            assert!(v.get(f).is_some(), "{f}");
        }
        let back: EvalReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
        let mean_nll = r.per_example.unwrap().iter().sum::<f64>() / 2.0;
        assert!((r.aggregate - mean_nll.exp()).abs() < 1e-12);
    }
}
