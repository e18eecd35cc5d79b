use ndarray::{Array, Dimension, Zip};

use super::DiffusionError;

/// Classifier-free guidance, `w·ε_cond + (1−w)·ε_uncond`.
///
/// Evaluated as `ε_uncond + w·(ε_cond − ε_uncond)`; `w = 1` returns the
/// conditional prediction bit-exactly.
pub fn cfg_predict<D: Dimension>(
    eps_cond: &Array<f64, D>,
    eps_uncond: &Array<f64, D>,
    w: f64,
) -> Result<Array<f64, D>, DiffusionError> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(DiffusionError::Shape(format!(
            "cfg: cond {:?} vs uncond {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    if w == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok(Zip::from(eps_cond).and(eps_uncond).map_collect(|&c, &u| u + w * (c - u)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;

    #[test]
    fn unit_weight_is_conditional() {
        let c = arr1(&[1e20, -3.0, 0.1]);
        let u = arr1(&[-1e20, 7.0, f64::MAX]);
        assert_eq!(cfg_predict(&c, &u, 1.0).unwrap(), c);
    }

    #[test]
    fn default_guidance_scale() {
        let r = cfg_predict(&arr1(&[1.0]), &arr1(&[0.0]), 12.5).unwrap();
        assert_eq!(r[0], 12.5);
    }

    #[test]
    fn shape_mismatch() {
        assert!(cfg_predict(&Array1::<f64>::zeros(2), &Array1::zeros(3), 2.0).is_err());
    }

    proptest! {
        #[test]
        fn fixed_point_and_affinity(a in -10.0f64..10.0, b in -10.0f64..10.0, w in -20.0f64..20.0) {
            let same = cfg_predict(&arr1(&[a]), &arr1(&[a]), w).unwrap();
            prop_assert_eq!(same[0], a);
            let r = cfg_predict(&arr1(&[a]), &arr1(&[b]), w).unwrap()[0];
            let affine = b + w * (a - b);
            let literal = w * a + (1.0 - w) * b;
            prop_assert!((r - affine).abs() <= 1e-12 * (1.0 + affine.abs()));
            prop_assert!((r - literal).abs() <= 1e-12 * (1.0 + literal.abs() + (w * a).abs() + ((1.0 - w) * b).abs()));
        }
    }
}
