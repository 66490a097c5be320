//! Classifier-free guidance and the delta-denoising / score-distillation
//! gradients.

use ndarray::{Array, ArrayView, Dimension, Zip};

use crate::error::{check_shape, Result};

/// `(1 + ω)·ε_cond − ω·ε_null`.
pub fn cfg_predict<D: Dimension>(
    eps_cond: &ArrayView<f64, D>,
    eps_null: &ArrayView<f64, D>,
    omega: f64,
) -> Result<Array<f64, D>> {
    check_shape("cfg_predict", eps_cond.shape(), eps_null.shape())?;
    if omega == 0.0 {
        return Ok(eps_cond.to_owned());
    }
    if omega == -1.0 {
        return Ok(eps_null.to_owned());
    }
    Ok(Zip::from(eps_cond)
        .and(eps_null)
        .map_collect(|&c, &n| (1.0 + omega) * c - omega * n))
}

/// Squared L2 distance between the guided target and source predictions.
pub fn dds_loss<D: Dimension>(eps_trg: &ArrayView<f64, D>, eps_src: &ArrayView<f64, D>) -> Result<f64> {
    check_shape("dds_loss", eps_trg.shape(), eps_src.shape())?;
    Ok(Zip::from(eps_trg)
        .and(eps_src)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b)))
}

/// `ε_trg − ε_src`, applied directly at the latent with the denoiser
/// Jacobian omitted.
pub fn dds_gradient<D: Dimension>(eps_trg: &ArrayView<f64, D>, eps_src: &ArrayView<f64, D>) -> Result<Array<f64, D>> {
    check_shape("dds_gradient", eps_trg.shape(), eps_src.shape())?;
    Ok(eps_trg - eps_src)
}

/// Single-branch score distillation: `ε_pred − ε`.
pub fn sds_gradient<D: Dimension>(eps_pred: &ArrayView<f64, D>, eps_true: &ArrayView<f64, D>) -> Result<Array<f64, D>> {
    check_shape("sds_gradient", eps_pred.shape(), eps_true.shape())?;
    Ok(eps_pred - eps_true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    #[test]
    fn cfg_collapses_at_special_weights() {
        let c = array![1.0, 0.0];
        let n = array![0.0, 1.0];
        assert_eq!(cfg_predict(&c.view(), &n.view(), 0.0).unwrap(), c);
        assert_eq!(cfg_predict(&c.view(), &n.view(), -1.0).unwrap(), n);
        assert_eq!(cfg_predict(&c.view(), &n.view(), 7.5).unwrap(), array![8.5, -7.5]);
        assert!(cfg_predict(&c.view(), &array![1.0].view(), 1.0).is_err());
    }

    #[test]
    fn dds_values() {
        let a = array![1.0, 1.0];
        let z = array![0.0, 0.0];
        assert_eq!(dds_loss(&a.view(), &a.view()).unwrap(), 0.0);
        assert_eq!(dds_loss(&a.view(), &z.view()).unwrap(), 2.0);
        assert_eq!(dds_gradient(&a.view(), &z.view()).unwrap(), array![1.0, 1.0]);
        assert_eq!(dds_gradient(&a.view(), &a.view()).unwrap(), array![0.0, 0.0]);
        assert!(dds_loss(&a.view(), &array![0.0].view()).is_err());
    }

    #[test]
    fn sds_values() {
        let a = array![2.0];
        assert_eq!(sds_gradient(&a.view(), &array![1.0].view()).unwrap(), array![1.0]);
        assert_eq!(sds_gradient(&a.view(), &a.view()).unwrap(), array![0.0]);
    }

    fn vec6() -> impl Strategy<Value = Array1<f64>> {
        proptest::collection::vec(-10.0f64..10.0, 6).prop_map(Array1::from)
    }

    proptest! {
        #[test]
        fn cfg_is_affine_in_omega(c in vec6(), n in vec6(), w1 in -10.0f64..10.0, w2 in -10.0f64..10.0) {
            let lhs = cfg_predict(&c.view(), &n.view(), w1).unwrap() + cfg_predict(&c.view(), &n.view(), w2).unwrap();
            let rhs = cfg_predict(&c.view(), &n.view(), (w1 + w2) / 2.0).unwrap() * 2.0;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }

        #[test]
        fn dds_loss_nonnegative_zero_iff_equal(a in vec6(), b in vec6()) {
            let l = dds_loss(&a.view(), &b.view()).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, a == b);
            let g1 = dds_gradient(&a.view(), &b.view()).unwrap();
            let g2 = dds_gradient(&b.view(), &a.view()).unwrap();
            prop_assert_eq!(g1, -g2);
        }

        #[test]
        fn dds_gradient_is_half_the_loss_gradient(a in vec6(), b in vec6()) {
            let g = dds_gradient(&a.view(), &b.view()).unwrap();
            let h = 1e-5;
            for i in 0..a.len() {
                let mut ap = a.clone();
                ap[i] += h;
                let mut am = a.clone();
                am[i] -= h;
                let fd = (dds_loss(&ap.view(), &b.view()).unwrap() - dds_loss(&am.view(), &b.view()).unwrap()) / (2.0 * h);
                prop_assert!((fd - 2.0 * g[i]).abs() < 1e-5 * (1.0 + fd.abs()));
            }
        }
    }
}
