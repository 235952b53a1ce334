//! Nearest-centroid quantizer producing semantic IDs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ITERS: usize = 100;
const TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Vec<Vec<f64>>,
}

/// Result of fitting: the codebook and the mean squared distance to the
/// assigned centroid after each assignment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Fit {
    pub codebook: Codebook,
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let dim = centroids.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || centroids.iter().any(|c| c.len() != dim) {
            return Err(Error::Input("centroids must be non-empty with a common positive width".into()));
        }
        if centroids.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Input("centroids must be finite".into()));
        }
        Ok(Self { centroids })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Nearest centroid by Euclidean distance; ties go to the lowest id.
    pub fn assign(&self, item: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = sq_dist(item, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn decode(&self, id: usize) -> Result<&[f64]> {
        self.centroids.get(id).map(Vec::as_slice).ok_or(Error::Index {
            index: id,
            bound: self.len(),
            context: "semantic id",
        })
    }

    /// Zero-padded decimal rendering wide enough for every id.
    pub fn id_string(&self, id: usize) -> String {
        let width = (self.len().max(2) - 1).to_string().len();
        format!("{id:0width$}")
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({"kind": "codebook", "m": self.len(), "dim": self.dim()}));
        let data = self.centroids.iter().flatten().copied().collect();
        ck.push("centroids", Tensor::matrix(self.len(), self.dim(), data).expect("consistent widths"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header_str("kind") != Some("codebook") {
            return Err(Error::Checkpoint("not a codebook checkpoint".into()));
        }
        let t = ck.block("centroids")?;
        let [_, dim] = t.shape() else {
            return Err(Error::Checkpoint("centroids must be a matrix".into()));
        };
        Self::new(t.data().chunks(*dim).map(<[f64]>::to_vec).collect())
    }
}

/// k-means++ seeding over distinct items: each new center is drawn with
/// probability proportional to its squared distance from the nearest center
/// chosen so far, so no item is picked twice.
fn plus_plus(distinct: &[&Vec<f64>], m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![distinct[rng.random_range(0..distinct.len())].to_vec()];
    let mut d2: Vec<f64> = distinct.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("m does not exceed distinct items");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        let c = distinct[pick].to_vec();
        d2.iter_mut().zip(distinct).for_each(|(d, x)| *d = d.min(sq_dist(x, &c)));
        centers.push(c);
    }
    centers
}

/// Lloyd's k-means from a k-means++ start over distinct items, run until no centroid
/// moves more than 1e-9 or 100 iterations. A centroid that loses all of its
/// items stays where it was.
pub fn build_codebook(items: &[Vec<f64>], m: usize, seed: u64) -> Result<Fit> {
    if m == 0 {
        return Err(Error::Input("codebook size must be positive".into()));
    }
    let dim = items.first().map(Vec::len).unwrap_or(0);
    if items.iter().any(|x| x.len() != dim) || dim == 0 {
        return Err(Error::Input("items must share a positive width".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for x in items {
        if !distinct.iter().any(|d| *d == x) {
            distinct.push(x);
        }
    }
    if m > distinct.len() {
        return Err(Error::Input(format!(
            "codebook size {m} exceeds {} distinct items",
            distinct.len()
        )));
    }
    let mut book = Codebook::new(plus_plus(&distinct, m, seed))?;
    let mut objective = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        let assign: Vec<usize> = items.iter().map(|x| book.assign(x)).collect();
        objective.push(
            items
                .iter()
                .zip(&assign)
                .map(|(x, &a)| sq_dist(x, &book.centroids[a]))
                .sum::<f64>()
                / items.len() as f64,
        );
        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (x, &a) in items.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        let mut shift: f64 = 0.0;
        for (k, c) in book.centroids.iter_mut().enumerate() {
            if counts[k] == 0 {
                continue;
            }
            let next: Vec<f64> = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            shift = shift.max(sq_dist(c, &next).sqrt());
            *c = next;
        }
        if shift < TOL {
            break;
        }
    }
    Ok(Fit {
        codebook: book,
        objective,
        iterations,
    })
}
