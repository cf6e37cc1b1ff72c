use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian fit of an embedding population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedStats {
    pub mean: Vec<f64>,
    /// Row-major d × d, symmetric.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl EmbedStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::shape("embed_stats", &[d, d], &[cov.len()]));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-9 {
                    return Err(Error::contract(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (n−1) covariance.
pub fn embed_stats(embeddings: &[Vec<f64>]) -> Result<EmbedStats> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "embed_stats needs at least 2 embeddings, got {n}"
        )));
    }
    let d = embeddings[0].len();
    if let Some(bad) = embeddings.iter().find(|e| e.len() != d) {
        return Err(Error::shape("embed_stats", &[d], &[bad.len()]));
    }
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for e in embeddings {
        for i in 0..d {
            let di = e[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += di * (e[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    EmbedStats::new(mean, cov, n)
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let d = m.nrows();
    let frob = m.norm();
    let diag = m.diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    SymmetricEigen::try_new(m, 1e-15, 10_000).ok_or_else(|| {
        Error::Numeric(format!(
            "symmetric eigensolver did not converge on {d}×{d} matrix (Frobenius {frob:.3e}, diagonal range [{lo:.3e}, {hi:.3e}])"
        ))
    })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric PSD matrix through its eigendecomposition;
/// eigenvalues below zero are clamped to zero.
pub fn sqrtm_psd(m: &[f64], d: usize) -> Result<Vec<f64>> {
    if m.len() != d * d {
        return Err(Error::shape("sqrtm_psd", &[d, d], &[m.len()]));
    }
    let e = eigen(symmetrize(&DMatrix::from_row_slice(d, d, m)))?;
    let root = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &e.eigenvectors;
    let r = q * DMatrix::from_diagonal(&root) * q.transpose();
    Ok(r.transpose().as_slice().to_vec())
}

/// ‖μa−μb‖² + Tr(Σa + Σb − 2 (Σa^{1/2} Σb Σa^{1/2})^{1/2}), floored at 0.
pub fn frechet_distance(a: &EmbedStats, b: &EmbedStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::shape("frechet_distance", &[d], &[b.dim()]));
    }
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let root_a = DMatrix::from_row_slice(d, d, &sqrtm_psd(&a.cov, d)?);
    let inner = symmetrize(&(&root_a * &sb * &root_a));
    let e = eigen(inner)?;
    let tr_root: f64 = e.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let fd = dmu + sa.trace() + sb.trace() - 2.0 * tr_root;
    if !fd.is_finite() {
        return Err(Error::Numeric(format!("Fréchet distance is {fd}")));
    }
    Ok(fd.max(0.0))
}

/// Mean of the left-channel and right-channel distances.
pub fn stereo_fd(
    gen_left: &EmbedStats,
    gen_right: &EmbedStats,
    ref_left: &EmbedStats,
    ref_right: &EmbedStats,
) -> Result<f64> {
    let l = frechet_distance(gen_left, ref_left)?;
    let r = frechet_distance(gen_right, ref_right)?;
    Ok((l + r) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn stats(mean: Vec<f64>, cov: Vec<f64>) -> EmbedStats {
        EmbedStats::new(mean, cov, 100).unwrap()
    }

    #[test]
    fn two_opposite_points() {
        let x = vec![1.0, -2.0, 0.5];
        let s = embed_stats(&[x.clone(), x.iter().map(|v| -v).collect()]).unwrap();
        assert!(s.mean.iter().all(|&m| m == 0.0));
        for i in 0..3 {
            for j in 0..3 {
                assert!((s.cov[i * 3 + j] - 2.0 * x[i] * x[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_points_have_zero_covariance() {
        let s = embed_stats(&vec![vec![3.0, 4.0]; 5]).unwrap();
        assert!(s.cov.iter().all(|&c| c == 0.0));
        assert!(embed_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn sample_covariance_concentrates() {
        // Σ = L Lᵀ with L lower triangular.
        let l = [[1.0, 0.0, 0.0], [0.5, 1.2, 0.0], [-0.3, 0.4, 0.7]];
        let mut truth = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                truth[i * 3 + j] = (0..3).map(|k| l[i][k] * l[j][k]).sum();
            }
        }
        let mut rng = Rng::new(11);
        let draws: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                let z: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
                (0..3).map(|i| (0..3).map(|k| l[i][k] * z[k]).sum()).collect()
            })
            .collect();
        let s = embed_stats(&draws).unwrap();
        let err: f64 = s
            .cov
            .iter()
            .zip(&truth)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 0.15 * norm, "{err} vs {norm}");
    }

    #[test]
    fn fd_closed_forms() {
        let a = stats(vec![0.0], vec![1.0]);
        let b = stats(vec![3.0], vec![4.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-6);
        let a = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        let b = stats(vec![1.0, 0.0], vec![4.0, 0.0, 0.0, 1.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-6);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn fd_dimension_mismatch() {
        let a = stats(vec![0.0], vec![1.0]);
        let b = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn stereo_is_channel_mean() {
        let z = stats(vec![0.0], vec![1.0]);
        let far = stats(vec![3.0], vec![4.0]);
        assert_eq!(stereo_fd(&far, &z, &z, &z).unwrap(), 5.0);
        assert_eq!(stereo_fd(&z, &far, &z, &z).unwrap(), 5.0);
        let mono = frechet_distance(&far, &z).unwrap();
        assert_eq!(stereo_fd(&far, &far, &z, &z).unwrap(), mono);
    }

    fn random_psd(d: usize, rng: &mut Rng) -> Vec<f64> {
        let a: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() / d as f64;
            }
        }
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn sqrtm_squares_back(d in 1usize..=32, seed in 0u64..10_000) {
            let m = random_psd(d, &mut Rng::new(seed));
            let r = sqrtm_psd(&m, d).unwrap();
            let mut err = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let v: f64 = (0..d).map(|k| r[i * d + k] * r[k * d + j]).sum();
                    err += (v - m[i * d + j]).powi(2);
                }
            }
            let norm: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(err.sqrt() < 1e-6 * norm);
        }

        #[test]
        fn fd_is_symmetric_and_separates_means(d in 1usize..=8, seed in 0u64..10_000, shift in 0.01f64..2.0) {
            let mut rng = Rng::new(seed);
            let a = stats((0..d).map(|_| rng.normal()).collect(), random_psd(d, &mut rng));
            let mut mb: Vec<f64> = a.mean.clone();
            mb[0] += shift;
            let b = stats(mb, random_psd(d, &mut rng));
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6 * ab.max(1.0));
            prop_assert!(ab > 0.0);
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8 * a.cov.iter().map(|v| v.abs()).sum::<f64>().max(1.0));
        }
    }
}
