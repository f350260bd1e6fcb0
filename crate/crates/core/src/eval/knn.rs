//! k-NN manifold precision and recall: each set's manifold is the union of
//! balls centered at its points with radius the distance to the k-th
//! nearest neighbor within the same set; membership is inclusive.

use super::features::{dist2, FeatureSet};
use crate::{Error, Result};

/// Squared radius of the ball at each point of `set`: squared distance to
/// its k-th nearest neighbor within the set (self excluded).
fn knn_radii2(set: &FeatureSet, k: usize) -> Vec<f64> {
    let n = set.n;
    let mut radii = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| dist2(set.row(i), set.row(j)))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        radii.push(dists[k - 1]);
    }
    radii
}

fn fraction_inside(points: &FeatureSet, manifold: &FeatureSet, radii2: &[f64]) -> f64 {
    let mut hits = 0usize;
    for i in 0..points.n {
        let inside = (0..manifold.n)
            .any(|j| dist2(points.row(i), manifold.row(j)) <= radii2[j]);
        if inside {
            hits += 1;
        }
    }
    hits as f64 / points.n as f64
}

pub fn knn_precision_recall(
    real: &FeatureSet,
    gen: &FeatureSet,
    k: usize,
) -> Result<(f64, f64, f64)> {
    if real.d != gen.d {
        return Err(Error::validation(format!(
            "feature dimensions differ: {} vs {}",
            real.d, gen.d
        )));
    }
    if k == 0 || k >= real.n.min(gen.n) {
        return Err(Error::validation(format!(
            "k = {k} out of range for set sizes {} and {}",
            real.n, gen.n
        )));
    }
    let real_radii = knn_radii2(real, k);
    let gen_radii = knn_radii2(gen, k);
    let precision = fraction_inside(gen, real, &real_radii);
    let recall = fraction_inside(real, gen, &gen_radii);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok((precision, recall, f1))
}
