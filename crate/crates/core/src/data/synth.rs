//! Synthetic user population with a known generative model.
//!
//! Users belong to one of `K` clusters. A user's embedding is the cluster
//! center plus isotropic Gaussian noise, and every response symbol is drawn
//! from the cluster's emission table, so the ideal perplexity of the corpus
//! is known in closed form.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::codebook::{build_codebook, Codebook};
use super::{LmRecord, PrefRecord};
use crate::error::{Error, Result};

const SYMBOLS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const QUERIES: [&str; 4] = ["play something", "what next?", "pick for me", "surprise me"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub n_clusters: usize,
    pub dim: usize,
    pub sigma: f64,
    pub n_users: usize,
    pub records_per_user: usize,
    pub n_symbols: usize,
    pub target_len: usize,
    /// Inverse temperature of the random emission logits.
    pub concentration: f64,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            n_clusters: 4,
            dim: 16,
            sigma: 0.05,
            n_users: 200,
            records_per_user: 50,
            n_symbols: 8,
            target_len: 8,
            concentration: 2.0,
            seed: 42,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters < 2 {
            return Err(Error::Config("n_clusters must be at least 2".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config("sigma must be finite and non-negative".into()));
        }
        if !(2..=SYMBOLS.len()).contains(&self.n_symbols) {
            return Err(Error::Config(format!("n_symbols must lie in 2..={}", SYMBOLS.len())));
        }
        if self.dim == 0 || self.n_users == 0 || self.target_len == 0 || self.records_per_user == 0 {
            return Err(Error::Config("dim, n_users, records_per_user and target_len must be positive".into()));
        }
        if !self.concentration.is_finite() || self.concentration < 0.0 {
            return Err(Error::Config("concentration must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: usize,
    pub cluster: usize,
    pub embedding: Vec<f64>,
}

/// The generative model behind a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub symbols: String,
    pub centers: Vec<Vec<f64>>,
    /// Row `k` is cluster `k`'s distribution over `symbols`.
    pub emissions: Vec<Vec<f64>>,
    pub users: Vec<User>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

impl Oracle {
    pub fn n_clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn cluster_of(&self, user: usize) -> usize {
        self.users[user].cluster
    }

    pub fn entropy(&self, cluster: usize) -> f64 {
        entropy(&self.emissions[cluster])
    }

    /// exp of the mean per-symbol entropy over the given records' clusters.
    pub fn expected_perplexity(&self, clusters: &[usize]) -> f64 {
        let h = clusters.iter().map(|&k| self.entropy(k)).sum::<f64>() / clusters.len().max(1) as f64;
        h.exp()
    }

    /// Entropy of the cluster mixture, the best any context-free model can do
    /// when clusters are equally likely.
    pub fn marginal_entropy(&self) -> f64 {
        let k = self.n_clusters() as f64;
        let n = self.symbols.len();
        let mix: Vec<f64> = (0..n).map(|s| self.emissions.iter().map(|e| e[s]).sum::<f64>() / k).collect();
        entropy(&mix)
    }

    /// Mean negative log-likelihood of `response` under cluster `k`.
    pub fn response_nll(&self, cluster: usize, response: &str) -> Result<f64> {
        let mut total = 0.0;
        for c in response.chars() {
            let s = self
                .symbols
                .find(c)
                .ok_or_else(|| Error::Input(format!("symbol {c:?} is not in the oracle alphabet")))?;
            total -= self.emissions[cluster][s].ln();
        }
        Ok(total / response.chars().count().max(1) as f64)
    }

    /// Profile text for a cluster: its three likeliest symbols.
    pub fn profile(&self, cluster: usize) -> String {
        let e = &self.emissions[cluster];
        let mut order: Vec<usize> = (0..e.len()).collect();
        order.sort_by(|&a, &b| e[b].total_cmp(&e[a]).then(a.cmp(&b)));
        let top: Vec<String> = order
            .iter()
            .take(3)
            .map(|&i| (SYMBOLS[i] as char).to_string())
            .collect();
        format!("favourites: {}", top.join(" "))
    }

    fn draw<R: Rng>(&self, cluster: usize, len: usize, rng: &mut R) -> String {
        let e = &self.emissions[cluster];
        (0..len)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = e.len() - 1;
                for (i, p) in e.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                SYMBOLS[pick] as char
            })
            .collect()
    }
}

/// Draws cluster centers, emission tables and users.
pub fn population(cfg: &PopulationConfig) -> Result<Oracle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let emissions = (0..cfg.n_clusters)
        .map(|_| {
            let g: Vec<f64> = (0..cfg.n_symbols)
                .map(|_| cfg.concentration * rng.sample::<f64, _>(StandardNormal))
                .collect();
            softmax(&g)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let users = (0..cfg.n_users)
        .map(|id| {
            let cluster = id % cfg.n_clusters;
            let embedding = centers[cluster].iter().map(|m| m + noise.sample(&mut rng)).collect();
            User { id, cluster, embedding }
        })
        .collect();
    Ok(Oracle {
        symbols: String::from_utf8(SYMBOLS[..cfg.n_symbols].to_vec()).expect("ascii"),
        centers,
        emissions,
        users,
    })
}

pub fn chat_text(profile: Option<&str>, query: &str, response: &str) -> String {
    let system = profile.map_or(String::new(), |p| format!("<|system|>\n{p}\n<|eot_id|>\n"));
    format!("{system}<|user|>\n{query}\n<|eot_id|>\n<|model|>\n{response}")
}

/// A record tagged with the user that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tagged<T> {
    pub user: usize,
    pub record: T,
}

/// Language-modeling corpus: each record's response is `target_len` symbols
/// from the user's cluster table, behind a system block carrying the
/// cluster profile.
pub fn lm_corpus(cfg: &PopulationConfig) -> Result<(Vec<Tagged<LmRecord>>, Oracle)> {
    let oracle = population(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c6d);
    let mut out = Vec::with_capacity(cfg.n_users * cfg.records_per_user);
    for u in &oracle.users {
        let profile = oracle.profile(u.cluster);
        for _ in 0..cfg.records_per_user {
            let query = QUERIES.choose(&mut rng).expect("non-empty");
            let response = oracle.draw(u.cluster, cfg.target_len, &mut rng);
            out.push(Tagged {
                user: u.id,
                record: LmRecord {
                    uservector: u.embedding.clone(),
                    text: chat_text(Some(&profile), query, &response),
                },
            });
        }
    }
    Ok((out, oracle))
}

/// Preference corpus: half the completions come from the user's own cluster
/// (label 1), half from a different cluster (label 0).
pub fn pref_corpus(cfg: &PopulationConfig) -> Result<(Vec<Tagged<PrefRecord>>, Oracle)> {
    let oracle = population(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072);
    let mut out = Vec::with_capacity(cfg.n_users * cfg.records_per_user);
    let prompt = chat_text(None, "pick some for me", "");
    for u in &oracle.users {
        for _ in 0..cfg.records_per_user {
            let label: u8 = rng.random_range(0..2);
            let cluster = if label == 1 {
                u.cluster
            } else {
                (u.cluster + rng.random_range(1..cfg.n_clusters)) % cfg.n_clusters
            };
            out.push(Tagged {
                user: u.id,
                record: PrefRecord {
                    uservector: u.embedding.clone(),
                    prompt: prompt.clone(),
                    completion: oracle.draw(cluster, cfg.target_len, &mut rng),
                    label,
                },
            });
        }
    }
    Ok((out, oracle))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: usize,
    pub cluster: usize,
    pub embedding: Vec<f64>,
    pub semantic_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecConfig {
    pub n_items: usize,
    pub n_codes: usize,
    pub item_sigma: f64,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            n_items: 256,
            n_codes: 32,
            item_sigma: 0.5,
        }
    }
}

pub struct RecCorpus {
    pub records: Vec<Tagged<LmRecord>>,
    pub items: Vec<Item>,
    pub codebook: Codebook,
    pub oracle: Oracle,
}

/// Recommendation corpus: items scatter around cluster centers, each user's
/// target is an item from their own cluster, and the response is the item's
/// semantic id from a k-means codebook over item embeddings.
pub fn rec_corpus(cfg: &PopulationConfig, rec: &RecConfig) -> Result<RecCorpus> {
    let oracle = population(cfg)?;
    if rec.n_items < cfg.n_clusters {
        return Err(Error::Config("n_items must cover every cluster".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7265);
    let noise = Normal::new(0.0, rec.item_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let raw: Vec<(usize, Vec<f64>)> = (0..rec.n_items)
        .map(|i| {
            let k = i % cfg.n_clusters;
            (k, oracle.centers[k].iter().map(|m| m + noise.sample(&mut rng)).collect())
        })
        .collect();
    let embeddings: Vec<Vec<f64>> = raw.iter().map(|(_, e)| e.clone()).collect();
    let codebook = build_codebook(&embeddings, rec.n_codes, cfg.seed)?.codebook;
    let items: Vec<Item> = raw
        .into_iter()
        .enumerate()
        .map(|(id, (cluster, embedding))| Item {
            id,
            cluster,
            semantic_id: codebook.assign(&embedding),
            embedding,
        })
        .collect();
    let mut by_cluster: Vec<Vec<&Item>> = vec![Vec::new(); cfg.n_clusters];
    for it in &items {
        by_cluster[it.cluster].push(it);
    }
    let mut records = Vec::with_capacity(cfg.n_users * cfg.records_per_user);
    for u in &oracle.users {
        for _ in 0..cfg.records_per_user {
            let it = by_cluster[u.cluster].choose(&mut rng).expect("every cluster has items");
            let query = QUERIES.choose(&mut rng).expect("non-empty");
            records.push(Tagged {
                user: u.id,
                record: LmRecord {
                    uservector: u.embedding.clone(),
                    text: chat_text(None, query, &codebook.id_string(it.semantic_id)),
                },
            });
        }
    }
    Ok(RecCorpus {
        records,
        items,
        codebook,
        oracle,
    })
}

/// Train/dev/test user ids: a seeded shuffle cut 80/10/10.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_users(n_users: usize, seed: u64) -> Splits {
    let mut ids: Vec<usize> = (0..n_users).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let tr = (0.8 * n_users as f64) as usize;
    let dv = (0.9 * n_users as f64) as usize;
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Splits {
        train: sorted(&ids[..tr]),
        dev: sorted(&ids[tr..dv]),
        test: sorted(&ids[dv..]),
    }
}

impl Splits {
    pub fn select<T: Clone>(users: &[usize], records: &[Tagged<T>]) -> Vec<Tagged<T>> {
        records.iter().filter(|r| users.binary_search(&r.user).is_ok()).cloned().collect()
    }
}
