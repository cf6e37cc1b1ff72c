//! Tensor-level entry points for the graph primitives, for callers that do
//! not need gradients.

use crate::autograd::Graph;
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a), g.constant(b));
    let c = g.matmul(a, b)?;
    Ok(g.value(c))
}

/// Scaled dot-product attention over [h×L×d] inputs.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
    let o = g.attention(q, k, v)?;
    Ok(g.value(o))
}

pub fn modulated_layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, s, b) = (g.constant(x), g.constant(scale), g.constant(shift));
    let y = g.modulated_layer_norm(x, s, b, eps)?;
    Ok(g.value(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identity_times_b_is_b() {
        let mut rng = Rng::new(1);
        let b = Tensor::randn(&[3, 5], &mut rng);
        assert!(matmul(&Tensor::eye(3), &b).unwrap().bit_eq(&b));
    }

    #[test]
    fn one_by_one_product() {
        let a = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let b = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = Rng::new(5);
        let a = Tensor::randn(&[7, 5], &mut rng);
        let b = Tensor::randn(&[5, 4], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..4 {
                let mut s = 0.0f64;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] as f64 * b.data()[p * 4 + j] as f64;
                }
                assert!((c.data()[i * 4 + j] as f64 - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mismatched_inner_dims_error() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn single_key_attention_returns_v() {
        let mut rng = Rng::new(9);
        let q = Tensor::randn(&[2, 1, 3], &mut rng);
        let k = Tensor::randn(&[2, 1, 3], &mut rng);
        let v = Tensor::randn(&[2, 1, 3], &mut rng);
        assert!(attention(&q, &k, &v).unwrap().bit_eq(&v));
    }

    #[test]
    fn equal_scores_average_v() {
        let mut rng = Rng::new(10);
        let q = Tensor::zeros(&[1, 4, 3]);
        let k = Tensor::randn(&[1, 4, 3], &mut rng);
        let v = Tensor::randn(&[1, 4, 3], &mut rng);
        let o = attention(&q, &k, &v).unwrap();
        for c in 0..3 {
            let mean: f64 = (0..4).map(|r| v.data()[r * 3 + c] as f64).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((o.data()[r * 3 + c] as f64 - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_matches_explicit_softmax() {
        let mut rng = Rng::new(12);
        let (h, l, d) = (2, 4, 3);
        let q = Tensor::randn(&[h, l, d], &mut rng);
        let k = Tensor::randn(&[h, l, d], &mut rng);
        let v = Tensor::randn(&[h, l, d], &mut rng);
        let o = attention(&q, &k, &v).unwrap();
        let at = |t: &Tensor, a: usize, b: usize, c: usize| t.data()[a * l * d + b * d + c] as f64;
        for hh in 0..h {
            for i in 0..l {
                let scores: Vec<f64> = (0..l)
                    .map(|j| (0..d).map(|c| at(&q, hh, i, c) * at(&k, hh, j, c)).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in 0..d {
                    let want: f64 = (0..l).map(|j| scores[j].exp() / z * at(&v, hh, j, c)).sum();
                    assert!((at(&o, hh, i, c) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn plain_layer_norm_rows_have_zero_mean() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[5, 8], &mut rng).scale(3.0);
        let zero = Tensor::zeros(&[8]);
        let y = modulated_layer_norm(&x, &zero, &zero, DEFAULT_LN_EPS).unwrap();
        for r in 0..5 {
            let m: f64 = y.row(r).iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-6);
        }
    }

    #[test]
    fn constant_row_maps_to_shift() {
        let x = Tensor::full(&[1, 4], 2.5);
        let scale = Tensor::vector(vec![0.3, -0.2, 1.0, 0.0]);
        let shift = Tensor::vector(vec![1.0, 2.0, -3.0, 0.5]);
        let y = modulated_layer_norm(&x, &scale, &shift, DEFAULT_LN_EPS).unwrap();
        assert_eq!(y.data(), shift.data());
    }

    #[test]
    fn normalized_row_has_unit_variance() {
        let mut rng = Rng::new(21);
        let x = Tensor::randn(&[1, 64], &mut rng).scale(4.0);
        let zero = Tensor::zeros(&[64]);
        let y = modulated_layer_norm(&x, &zero, &zero, DEFAULT_LN_EPS).unwrap();
        // two-pass oracle on the output
        let v: Vec<f64> = y.data().iter().map(|&a| a as f64).collect();
        let mean = v.iter().sum::<f64>() / 64.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 64.0;
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}
