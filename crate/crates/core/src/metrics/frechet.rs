use log::warn;

use crate::error::{Error, Result};

/// Mean and covariance of pooled feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// Row-major `dim x dim`.
    pub sigma: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Sample mean and unbiased covariance of `rows`.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::invalid(format!("feature statistics need at least 2 samples, got {n}")));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("feature_stats", "ragged feature rows".to_string()));
        }
        if n < dim + 1 {
            warn!("{n} samples for {dim}-dimensional features; covariance is rank deficient");
        }
        let mut mu = vec![0.0; dim];
        for r in rows {
            for (m, v) in mu.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut sigma = vec![0.0; dim * dim];
        for r in rows {
            for i in 0..dim {
                let di = r[i] - mu[i];
                for j in 0..dim {
                    sigma[i * dim + j] += di * (r[j] - mu[j]) / (n - 1) as f64;
                }
            }
        }
        Ok(Self { mu, sigma, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.sigma.len() != d * d {
            return Err(Error::shape("feature_stats", format!("{} covariance entries for dim {d}", self.sigma.len())));
        }
        if self.mu.iter().chain(&self.sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature statistics".into()));
        }
        let scale = self.sigma.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in 0..i {
                if (self.sigma[i * d + j] - self.sigma[j * d + i]).abs() > 1e-9 * scale {
                    return Err(Error::invalid("covariance matrix is not symmetric"));
                }
            }
        }
        Ok(())
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix by cyclic
/// Jacobi rotations.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

fn clamp_eigs(eigs: &mut [f64], what: &str) -> Result<()> {
    let scale = eigs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for e in eigs.iter_mut() {
        if *e < -1e-8 * scale {
            return Err(Error::NonFinite(format!("{what} has a negative eigenvalue {e:e}")));
        }
        *e = e.max(0.0);
    }
    Ok(())
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Frechet distance `|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with
/// the trace term taken from the eigenvalues of `S1^(1/2) S2 S1^(1/2)`.
pub fn mfd(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let n = a.dim();
    if b.dim() != n {
        return Err(Error::shape("mfd", format!("feature dims {n} and {}", b.dim())));
    }
    let (mut ea, va) = symmetric_eigen(&a.sigma, n);
    clamp_eigs(&mut ea, "first covariance")?;
    // S1^(1/2) = V diag(sqrt(l)) V^T
    let mut root = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            root[i * n + j] = (0..n).map(|k| va[i * n + k] * ea[k].sqrt() * va[j * n + k]).sum();
        }
    }
    let mut m = matmul(&matmul(&root, &b.sigma, n), &root, n);
    // symmetrise against rounding
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let (mut em, _) = symmetric_eigen(&m, n);
    clamp_eigs(&mut em, "covariance product")?;
    let tr_sqrt: f64 = em.iter().map(|e| e.sqrt()).sum();
    let tr_a: f64 = (0..n).map(|i| a.sigma[i * n + i]).sum();
    let tr_b: f64 = (0..n).map(|i| b.sigma[i * n + i]).sum();
    let dmu: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    let d = dmu + tr_a + tr_b - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::NonFinite("Frechet distance".into()));
    }
    Ok(d.max(0.0))
}
