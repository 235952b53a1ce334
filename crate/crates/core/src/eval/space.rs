//! Linear 2-D views of the embedding and prefix spaces and a
//! cluster-preservation score.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefix::Projection;

pub const NEIGHBORS: usize = 10;

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map(Vec::len).unwrap_or(0);
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Input("points must share a positive width".into()));
    }
    Ok(dim)
}

/// Coordinates on the top two principal components. Each component's sign is
/// fixed so that its largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let dim = check_points(points)?;
    let n = points.len();
    let x = DMatrix::from_fn(n, dim, |i, j| points[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let mut out = [0.0; 2];
            for (o, axis) in out.iter_mut().zip(&axes) {
                *o = (0..dim).map(|j| centered[(i, j)] * axis[j]).sum();
            }
            out
        })
        .collect())
}

/// Mean fraction of each point's `k` nearest neighbors (Euclidean, self
/// excluded, ties to the lower index) that share its label.
pub fn neighbor_agreement(points: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    check_points(points)?;
    if labels.len() != points.len() {
        return Err(Error::Input("one label per point is required".into()));
    }
    if k == 0 || points.len() <= k {
        return Err(Error::Input(format!(
            "{} points cannot supply {k} neighbors each",
            points.len()
        )));
    }
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut d: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, q)| (p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let same = d[..k].iter().filter(|&&(_, j)| labels[j] == labels[i]).count();
        total += same as f64 / k as f64;
    }
    Ok(total / points.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceExport {
    pub embedding_agreement: f64,
    pub prefix_agreement: f64,
    pub k: usize,
    pub n: usize,
    pub csv: String,
}

/// Projects every embedding through φ, scores neighbor agreement in both
/// spaces and renders the plot-ready CSV.
pub fn prefix_space(phi: &Projection, embeddings: &[Vec<f64>], clusters: &[usize]) -> Result<SpaceExport> {
    if embeddings.len() < NEIGHBORS {
        return Err(Error::Input(format!("need at least {NEIGHBORS} points")));
    }
    let mut distinct = clusters.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Input("need at least two clusters".into()));
    }
    let prefixes = embeddings.iter().map(|c| phi.project(c)).collect::<Result<Vec<_>>>()?;
    let embedding_agreement = neighbor_agreement(embeddings, clusters, NEIGHBORS)?;
    let prefix_agreement = neighbor_agreement(&prefixes, clusters, NEIGHBORS)?;
    let e2 = pca_2d(embeddings)?;
    let p2 = pca_2d(&prefixes)?;
    let mut csv = String::from("point_id,cluster,emb_x,emb_y,prefix_x,prefix_y\n");
    for i in 0..embeddings.len() {
        writeln!(
            csv,
            "{i},{},{},{},{},{}",
            clusters[i], e2[i][0], e2[i][1], p2[i][0], p2[i][1]
        )
        .expect("writing to a String");
    }
    Ok(SpaceExport {
        embedding_agreement,
        prefix_agreement,
        k: NEIGHBORS,
        n: embeddings.len(),
        csv,
    })
}

pub fn export_prefix_space(
    phi: &Projection,
    embeddings: &[Vec<f64>],
    clusters: &[usize],
    out: &Path,
) -> Result<SpaceExport> {
    let export = prefix_space(phi, embeddings, clusters)?;
    std::fs::write(out, &export.csv).map_err(|e| Error::io(out, e))?;
    Ok(export)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clustered(sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let labels: Vec<usize> = (0..60).map(|i| i % 4).collect();
        let pts = labels
            .iter()
            .map(|&l| centers[l].iter().map(|c| c + sigma * rng.random_range(-1.0..1.0)).collect())
            .collect();
        (pts, labels)
    }

    #[test]
    fn collapsed_clusters_agree_perfectly() {
        let (pts, labels) = clustered(0.0, 1);
        assert_eq!(neighbor_agreement(&pts, &labels, 10).unwrap(), 1.0);
        let phi = Projection::new(6, 8, 8, 3).unwrap();
        let ex = prefix_space(&phi, &pts, &labels).unwrap();
        assert_eq!(ex.embedding_agreement, 1.0);
        assert_eq!(ex.prefix_agreement, 1.0);
        assert_eq!(ex.csv.lines().count(), 61);
    }

    #[test]
    fn shuffled_labels_agree_at_chance() {
        let (pts, labels) = clustered(0.1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sum = 0.0;
        for _ in 0..100 {
            let mut l = labels.clone();
            l.shuffle(&mut rng);
            sum += neighbor_agreement(&pts, &l, 10).unwrap();
        }
        // Without replacement the expected share is (n/K − 1)/(n − 1).
        let chance = (60.0 / 4.0 - 1.0) / 59.0;
        assert!((sum / 100.0 - chance).abs() < 0.02, "{}", sum / 100.0);
    }

    #[test]
    fn too_few_points_is_an_input_error() {
        let (pts, labels) = clustered(0.1, 3);
        assert!(matches!(neighbor_agreement(&pts[..10], &labels[..10], 10), Err(Error::Input(_))));
    }

    #[test]
    fn pca_recovers_the_dominant_axis() {
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 0.1 * ((i * 7) % 5) as f64, 0.0]).collect();
        let xy = pca_2d(&pts).unwrap();
        for w in xy.windows(2) {
            assert!(w[1][0] > w[0][0]);
        }
        assert_eq!(pca_2d(&pts).unwrap(), xy);
    }

    #[test]
    fn identity_projection_preserves_distance_order() {
        let mut phi = Projection::new(3, 3, 3, 0).unwrap();
        phi.w1.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        phi.w2.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        // Inputs chosen to stay in ReLU's linear region with a fixed mean and
        // spread, where the layer norm is an isometry up to scale.
        let pts = [vec![3.0, 2.0, 1.0], vec![2.9, 2.0, 1.1], vec![1.0, 2.0, 3.0]];
        let out: Vec<Vec<f64>> = pts.iter().map(|p| phi.project(p).unwrap()).collect();
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        assert!(d(&pts[0], &pts[1]) < d(&pts[0], &pts[2]));
        assert!(d(&out[0], &out[1]) < d(&out[0], &out[2]));
    }
}
