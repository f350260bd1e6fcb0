//! Fréchet distance between Gaussian fits of two feature sets:
//! ||mu_a - mu_b||^2 + Tr(Sigma_a + Sigma_b - 2 (Sigma_a Sigma_b)^{1/2}).

use super::features::FeatureSet;
use crate::{Error, Result};

/// Ridge added to both covariances so small-sample fits stay positive
/// definite.
pub const COV_SHRINKAGE: f64 = 1e-6;

/// Dense row-major square matrix helpers, all f64.
#[derive(Clone, Debug)]
pub(crate) struct Mat {
    pub d: usize,
    pub a: Vec<f64>,
}

impl Mat {
    pub fn zeros(d: usize) -> Mat {
        Mat {
            d,
            a: vec![0.0; d * d],
        }
    }

    pub fn identity(d: usize) -> Mat {
        let mut m = Mat::zeros(d);
        for i in 0..d {
            m.a[i * d + i] = 1.0;
        }
        m
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.d + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.d + j] = v;
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        let d = self.d;
        let mut out = Mat::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let x = self.at(i, k);
                if x == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out.a[i * d + j] += x * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.at(i, i)).sum()
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns of V). Deterministic sweep order.
pub(crate) fn jacobi_eigh(m: &Mat) -> (Vec<f64>, Mat) {
    let d = m.d;
    let mut a = m.clone();
    let mut v = Mat::identity(d);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a.at(i, j) * a.at(i, j);
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a.at(p, q);
                if apq.abs() < 1e-18 {
                    continue;
                }
                let app = a.at(p, p);
                let aqq = a.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                // Stable tangent of the rotation angle.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a.at(k, p);
                    let akq = a.at(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..d {
                    let apk = a.at(p, k);
                    let aqk = a.at(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..d {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let evals = (0..d).map(|i| a.at(i, i)).collect();
    (evals, v)
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// from roundoff clamp to zero.
pub(crate) fn sqrtm_psd(m: &Mat) -> Mat {
    let d = m.d;
    let (evals, v) = jacobi_eigh(m);
    let mut scaled = Mat::zeros(d);
    for j in 0..d {
        let r = evals[j].max(0.0).sqrt();
        for i in 0..d {
            scaled.set(i, j, v.at(i, j) * r);
        }
    }
    // V diag(sqrt) V^T
    let mut out = Mat::zeros(d);
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += scaled.at(i, k) * v.at(j, k);
            }
            out.set(i, j, acc);
        }
    }
    out
}

fn mean_and_cov(set: &FeatureSet) -> Result<(Vec<f64>, Mat)> {
    if set.n < 2 {
        return Err(Error::validation(format!(
            "feature set {} needs at least 2 vectors for a Gaussian fit",
            set.source
        )));
    }
    let (n, d) = (set.n, set.d);
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mu.iter_mut().zip(set.row(i)) {
            *m += x;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = Mat::zeros(d);
    for i in 0..n {
        let row = set.row(i);
        for a in 0..d {
            let da = row[a] - mu[a];
            for b in a..d {
                let v = da * (row[b] - mu[b]);
                cov.a[a * d + b] += v;
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov.at(a, b) / denom;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    for i in 0..d {
        let v = cov.at(i, i) + COV_SHRINKAGE;
        cov.set(i, i, v);
    }
    Ok((mu, cov))
}

/// Fréchet distance between the Gaussian fits of two feature sets. The
/// cross-covariance square root is computed on the symmetrized product
/// A^{1/2} B A^{1/2}, whose trace equals Tr((AB)^{1/2}).
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.d != b.d {
        return Err(Error::validation(format!(
            "feature dimensions differ: {} vs {}",
            a.d, b.d
        )));
    }
    let (mu_a, cov_a) = mean_and_cov(a)?;
    let (mu_b, cov_b) = mean_and_cov(b)?;
    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let root_a = sqrtm_psd(&cov_a);
    let inner = root_a.matmul(&cov_b).matmul(&root_a);
    // Roundoff can leave `inner` slightly asymmetric; resymmetrize.
    let d = inner.d;
    let mut sym = Mat::zeros(d);
    for i in 0..d {
        for j in 0..d {
            sym.set(i, j, 0.5 * (inner.at(i, j) + inner.at(j, i)));
        }
    }
    let cross = sqrtm_psd(&sym).trace();
    let val = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !val.is_finite() {
        return Err(Error::data("frechet distance is non-finite"));
    }
    // Exact-zero case lands at tiny negatives through roundoff.
    Ok(val.max(0.0))
}
