use ndarray::{Array, Array2, Array3, Dimension, Zip};

use super::{DiffusionError, FrameDenoiser, NoiseSchedule};

/// Coefficients `(a, b)` of the deterministic update `z_prev = a·z_t + b·ε`
/// between noise levels `alpha_bar_t` and `alpha_bar_prev`.
fn coefficients(alpha_bar_t: f64, alpha_bar_prev: f64) -> (f64, f64) {
    let a = (alpha_bar_prev / alpha_bar_t).sqrt();
    let b = (1.0 - alpha_bar_prev).sqrt() - a * (1.0 - alpha_bar_t).sqrt();
    (a, b)
}

pub fn ddim_coefficients(sched: &NoiseSchedule, t: usize, t_prev: usize) -> Result<(f64, f64), DiffusionError> {
    Ok(coefficients(sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?))
}

fn check_shapes<D: Dimension>(z: &Array<f64, D>, eps: &Array<f64, D>) -> Result<(), DiffusionError> {
    if z.shape() != eps.shape() {
        return Err(DiffusionError::Shape(format!("latent {:?} vs noise {:?}", z.shape(), eps.shape())));
    }
    Ok(())
}

/// The DDIM update on raw noise levels:
/// `√(ᾱ_prev/ᾱ_t)·z + (√(1−ᾱ_prev) − √(ᾱ_prev/ᾱ_t)·√(1−ᾱ_t))·ε`.
pub fn ddim_update<D: Dimension>(
    z: &Array<f64, D>,
    eps: &Array<f64, D>,
    alpha_bar_t: f64,
    alpha_bar_prev: f64,
) -> Result<Array<f64, D>, DiffusionError> {
    check_shapes(z, eps)?;
    let (a, b) = coefficients(alpha_bar_t, alpha_bar_prev);
    Ok(Zip::from(z).and(eps).map_collect(|&z, &e| a * z + b * e))
}

/// One deterministic denoising step from `t` down to `t_prev`.
pub fn ddim_step<D: Dimension>(
    z_t: &Array<f64, D>,
    eps: &Array<f64, D>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>, DiffusionError> {
    if t <= t_prev {
        return Err(DiffusionError::TimestepOrder(format!("ddim_step needs t ({t}) > t_prev ({t_prev})")));
    }
    ddim_update(z_t, eps, sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?)
}

/// Exact algebraic inverse of [`ddim_step`] for a fixed `eps`: maps `z_t` up to
/// `t_next` so that `ddim_step(result, eps, t_next, t)` returns `z_t`.
pub fn ddim_invert_step<D: Dimension>(
    z_t: &Array<f64, D>,
    eps: &Array<f64, D>,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>, DiffusionError> {
    if t_next <= t {
        return Err(DiffusionError::TimestepOrder(format!("ddim_invert_step needs t_next ({t_next}) > t ({t})")));
    }
    check_shapes(z_t, eps)?;
    let (a, b) = ddim_coefficients(sched, t_next, t)?;
    Ok(Zip::from(z_t).and(eps).map_collect(|&z, &e| (z - b * e) / a))
}

/// Latents `z*_0 .. z*_S` of one frame along the inference subsequence.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrajectory {
    pub latents: Vec<Array3<f64>>,
}

impl InversionTrajectory {
    pub fn clean(&self) -> &Array3<f64> {
        &self.latents[0]
    }

    pub fn noisiest(&self) -> &Array3<f64> {
        self.latents.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

fn ensure_finite(a: &Array3<f64>, what: &'static str, t: usize) -> Result<(), DiffusionError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffusionError::NonFinite { what, t })
    }
}

/// DDIM inversion of one frame with guidance weight 1.
///
/// Each step queries the denoiser with the current latent at the step's
/// target timestep, the usual fixed-point approximation of the implicit
/// inverse update.
pub fn ddim_invert_frame<F: FrameDenoiser + ?Sized>(
    z0: &Array3<f64>,
    denoiser: &F,
    context: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<InversionTrajectory, DiffusionError> {
    let mut latents = Vec::with_capacity(sched.num_inference_steps() + 1);
    latents.push(z0.clone());
    for k in 1..=sched.num_inference_steps() {
        let (t, t_next) = (sched.timestep_at(k - 1), sched.timestep_at(k));
        let z = latents.last().unwrap();
        let eps = denoiser.predict(z, t_next, context)?;
        ensure_finite(&eps, "denoiser output", t_next)?;
        let next = ddim_invert_step(z, &eps, t, t_next, sched)?;
        latents.push(next);
    }
    Ok(InversionTrajectory { latents })
}

/// Plain conditional DDIM sampling of one frame from `z_T` down to `z_0`.
pub fn ddim_sample_frame<F: FrameDenoiser + ?Sized>(
    z_t: &Array3<f64>,
    denoiser: &F,
    context: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array3<f64>, DiffusionError> {
    let mut z = z_t.clone();
    for k in (1..=sched.num_inference_steps()).rev() {
        let (t, t_prev) = (sched.timestep_at(k), sched.timestep_at(k - 1));
        let eps = denoiser.predict(&z, t, context)?;
        ensure_finite(&eps, "denoiser output", t)?;
        z = ddim_step(&z, &eps, t, t_prev, sched)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, ZeroDenoiser};
    use crate::rng::SeededRng;
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;

    #[test]
    fn equal_noise_levels_return_input() {
        let z = arr1(&[0.3, -1.7, 2.0]);
        let eps = arr1(&[5.0, -5.0, 1e6]);
        assert_eq!(ddim_update(&z, &eps, 0.42, 0.42).unwrap(), z);
    }

    #[test]
    fn zero_noise_is_rescale() {
        let z = arr1(&[0.5, -2.0]);
        let out = ddim_update(&z, &Array1::zeros(2), 0.25, 0.81).unwrap();
        assert_eq!(out, &z * (0.81f64 / 0.25).sqrt());
    }

    #[test]
    fn scalar_step_matches_x0_route() {
        // independent route: predict x0, then re-noise deterministically
        let out = ddim_update(&arr1(&[1.0]), &arr1(&[0.5]), 0.25, 0.81).unwrap()[0];
        assert!((out - 1.238522083771039).abs() < 1e-14, "{out}");
    }

    #[test]
    fn scalar_invert_matches_x0_route() {
        let s = NoiseSchedule::from_alpha_bars_for_tests(vec![0.81, 0.25]);
        let out = ddim_invert_step(&arr1(&[0.9]), &arr1(&[0.1]), 1, 2, &s).unwrap()[0];
        assert!((out - 0.5623864351365512).abs() < 1e-14, "{out}");
        let zero = ddim_invert_step(&arr1(&[0.9]), &arr1(&[0.0]), 1, 2, &s).unwrap()[0];
        assert!((zero - 0.9 * (0.25f64 / 0.81).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_bad_order_and_range() {
        let s = make_schedule(10, 0.01, 0.02, 5).unwrap();
        let z = arr1(&[1.0]);
        assert!(ddim_step(&z, &z, 2, 2, &s).is_err());
        assert!(ddim_step(&z, &z, 11, 2, &s).is_err());
        assert!(ddim_invert_step(&z, &z, 4, 3, &s).is_err());
        assert!(ddim_step(&z, &arr1(&[1.0, 2.0]), 4, 2, &s).is_err());
    }

    #[test]
    fn zero_denoiser_inversion_is_rescaling() {
        let s = make_schedule(100, 1e-4, 0.02, 4).unwrap();
        let z0 = SeededRng::new(1).uniform_matrix(4, 8, 1.0).into_shape_with_order((2, 4, 4)).unwrap();
        let ctx = Array2::zeros((2, 2));
        let traj = ddim_invert_frame(&z0, &ZeroDenoiser, &ctx, &s).unwrap();
        assert_eq!(traj.len(), 5);
        for k in 0..traj.len() {
            let scale = s.alpha_bar(s.timestep_at(k)).unwrap().sqrt();
            for (a, b) in traj.latents[k].iter().zip(z0.iter()) {
                assert!((a - scale * b).abs() < 1e-12);
            }
        }
        let back = ddim_sample_frame(traj.noisiest(), &ZeroDenoiser, &ctx, &s).unwrap();
        for (a, b) in back.iter().zip(z0.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_trajectory_has_two_entries() {
        let s = make_schedule(10, 0.01, 0.02, 1).unwrap();
        let traj = ddim_invert_frame(&Array3::ones((1, 1, 1)), &ZeroDenoiser, &Array2::zeros((1, 1)), &s).unwrap();
        assert_eq!(traj.len(), 2);
    }

    proptest! {
        #[test]
        fn step_and_invert_are_mutual_inverses(
            zs in proptest::collection::vec(-5.0f64..5.0, 1..16),
            seed in 0u64..1000,
            i in 0usize..49, j in 1usize..50,
        ) {
            let s = make_schedule(1000, 1e-4, 0.02, 50).unwrap();
            let (lo, hi) = if i < j { (i, j) } else { (j - 1, i + 1) };
            let (t, t_next) = (s.timestep_at(lo), s.timestep_at(hi.min(50)));
            prop_assume!(t < t_next);
            let z = Array1::from(zs);
            let mut r = SeededRng::new(seed);
            let eps = Array1::from_shape_simple_fn(z.len(), || r.uniform(-3.0, 3.0));
            let up = ddim_invert_step(&z, &eps, t, t_next, &s).unwrap();
            let down = ddim_step(&up, &eps, t_next, t, &s).unwrap();
            for (a, b) in down.iter().zip(z.iter()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}
