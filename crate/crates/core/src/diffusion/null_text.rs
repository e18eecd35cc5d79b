use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use super::{cfg_predict, ddim_coefficients, ddim_step, DiffusionError, FrameDenoiser, InversionTrajectory, NoiseSchedule};
use crate::tensor_io;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NullOptOptions {
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub early_stop_loss: f64,
}

impl Default for NullOptOptions {
    fn default() -> Self {
        Self { inner_steps: 10, learning_rate: 1e-2, early_stop_loss: 1e-5 }
    }
}

/// Per-timestep losses, indexed by trajectory position `k - 1` (ascending
/// timestep order, like the schedule's inference steps).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NullOptReport {
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
    /// Positions where no inner iterate improved on the starting loss.
    pub diverged: Vec<usize>,
}

impl NullOptReport {
    pub fn initial_total(&self) -> f64 {
        self.initial_losses.iter().sum()
    }

    pub fn final_total(&self) -> f64 {
        self.final_losses.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct FrameNullResult {
    /// Optimized unconditional context per inference step (ascending timestep order).
    pub embeddings: Vec<Array2<f64>>,
    pub report: NullOptReport,
}

/// Optimized unconditional contexts `[N, S, L, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NullTrajectory {
    embeddings: Array4<f64>,
}

impl NullTrajectory {
    pub fn new(embeddings: Array4<f64>) -> Result<Self, DiffusionError> {
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite { what: "null embedding", t: 0 });
        }
        Ok(Self { embeddings })
    }

    pub fn from_frames(frames: &[Vec<Array2<f64>>]) -> Result<Self, DiffusionError> {
        let n = frames.len();
        let steps = frames.first().map_or(0, Vec::len);
        let (l, d) = frames.first().and_then(|f| f.first()).map_or((0, 0), |e| e.dim());
        let mut out = Array4::zeros((n, steps, l, d));
        for (i, per_step) in frames.iter().enumerate() {
            if per_step.len() != steps {
                return Err(DiffusionError::Shape(format!("frame {i} has {} steps, expected {steps}", per_step.len())));
            }
            for (k, e) in per_step.iter().enumerate() {
                if e.dim() != (l, d) {
                    return Err(DiffusionError::Shape(format!("frame {i} step {k} embedding {:?}", e.dim())));
                }
                out.slice_mut(s![i, k, .., ..]).assign(e);
            }
        }
        Self::new(out)
    }

    pub fn frame_count(&self) -> usize {
        self.embeddings.dim().0
    }

    pub fn step_count(&self) -> usize {
        self.embeddings.dim().1
    }

    pub fn get(&self, frame: usize, step: usize) -> ArrayView2<'_, f64> {
        self.embeddings.slice(s![frame, step, .., ..])
    }

    /// All frames' contexts at inference position `step`: `[N, L, d]`.
    pub fn at_step(&self, step: usize) -> Array3<f64> {
        self.embeddings.slice(s![.., step, .., ..]).to_owned()
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.embeddings
    }

    pub fn write(&self, path: &Path) -> Result<(), DiffusionError> {
        Ok(tensor_io::write_tensor4(path, &self.embeddings)?)
    }

    pub fn read(path: &Path) -> Result<Self, DiffusionError> {
        Self::new(tensor_io::read_tensor4(path)?)
    }
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    step: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(dim: (usize, usize), lr: f64) -> Self {
        Self { m: Array2::zeros(dim), v: Array2::zeros(dim), step: 0, lr }
    }

    fn update(&mut self, param: &mut Array2<f64>, grad: &Array2<f64>) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let lr = self.lr;
        Zip::from(param).and(&mut self.m).and(&mut self.v).and(grad).for_each(|p, m, v, &g| {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        });
    }
}

fn mse(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y)) / a.len() as f64
}

/// One guided step and its loss against the trajectory target.
struct StepProblem<'a, F: ?Sized> {
    denoiser: &'a F,
    z: &'a Array3<f64>,
    target: &'a Array3<f64>,
    eps_cond: Array3<f64>,
    t: usize,
    t_prev: usize,
    w: f64,
    sched: &'a NoiseSchedule,
}

impl<F: FrameDenoiser + ?Sized> StepProblem<'_, F> {
    fn step_with(&self, eps_uncond: &Array3<f64>) -> Result<Array3<f64>, DiffusionError> {
        let eps = cfg_predict(&self.eps_cond, eps_uncond, self.w)?;
        ddim_step(self.z, &eps, self.t, self.t_prev, self.sched)
    }

    fn loss(&self, null: &Array2<f64>) -> Result<(f64, Array3<f64>), DiffusionError> {
        let eps_u = self.denoiser.predict(self.z, self.t, null)?;
        let out = self.step_with(&eps_u)?;
        Ok((mse(&out, self.target), eps_u))
    }

    fn loss_and_grad(&self, null: &Array2<f64>) -> Result<(f64, Array3<f64>, Array2<f64>), DiffusionError> {
        let (eps_u, pullback) = self.denoiser.predict_with_pullback(self.z, self.t, null)?;
        let out = self.step_with(&eps_u)?;
        let loss = mse(&out, self.target);
        let (_, b) = ddim_coefficients(self.sched, self.t, self.t_prev)?;
        // d out / d eps_u = b·(1 − w)
        let k = 2.0 * b * (1.0 - self.w) / out.len() as f64;
        let cotangent = Zip::from(&out).and(self.target).map_collect(|&o, &t| k * (o - t));
        let grad = pullback(&cotangent);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(DiffusionError::NonFinite { what: "null-text gradient", t: self.t });
        }
        Ok((loss, eps_u, grad))
    }
}

/// Null-text optimization for one frame.
///
/// Walks the inference steps from the noisiest down. At each step the
/// unconditional context is tuned (Adam, warm-started from the previous
/// step's result) so the guided DDIM step from the current latent lands on
/// the inversion trajectory; the best iterate is kept, so each step's final
/// loss never exceeds its initial loss. The guided latent is then carried
/// forward.
pub fn optimize_null_embeddings<F: FrameDenoiser + ?Sized>(
    traj: &InversionTrajectory,
    denoiser: &F,
    cond_context: &Array2<f64>,
    null_init: &Array2<f64>,
    w: f64,
    sched: &NoiseSchedule,
    opts: &NullOptOptions,
) -> Result<FrameNullResult, DiffusionError> {
    let steps = sched.num_inference_steps();
    if traj.len() != steps + 1 {
        return Err(DiffusionError::Shape(format!(
            "trajectory has {} entries, schedule needs {}",
            traj.len(),
            steps + 1
        )));
    }
    let mut embeddings = vec![Array2::zeros(null_init.dim()); steps];
    let mut report = NullOptReport {
        initial_losses: vec![0.0; steps],
        final_losses: vec![0.0; steps],
        diverged: Vec::new(),
    };
    let mut null = null_init.clone();
    let mut z = traj.noisiest().clone();

    for k in (1..=steps).rev() {
        let (t, t_prev) = (sched.timestep_at(k), sched.timestep_at(k - 1));
        let problem = StepProblem {
            denoiser,
            z: &z,
            target: &traj.latents[k - 1],
            eps_cond: denoiser.predict(&z, t, cond_context)?,
            t,
            t_prev,
            w,
            sched,
        };

        let (initial, mut best_eps) = problem.loss(&null)?;
        let mut best_loss = initial;
        // With w = 1 the unconditional branch drops out of the guided step.
        if w != 1.0 && initial >= opts.early_stop_loss && opts.inner_steps > 0 {
            let mut adam = Adam::new(null.dim(), opts.learning_rate);
            let mut best_null = null.clone();
            let mut current = null.clone();
            for it in 0..=opts.inner_steps {
                let (loss, eps_u, grad) = if it < opts.inner_steps {
                    problem.loss_and_grad(&current)?
                } else {
                    let (loss, eps_u) = problem.loss(&current)?;
                    (loss, eps_u, Array2::zeros((0, 0)))
                };
                if loss < best_loss {
                    best_loss = loss;
                    best_eps = eps_u;
                    best_null.assign(&current);
                }
                if loss < opts.early_stop_loss || it == opts.inner_steps {
                    break;
                }
                adam.update(&mut current, &grad);
            }
            if best_loss >= initial {
                log::warn!("null-text optimization made no progress at timestep {t}");
                report.diverged.push(k - 1);
            }
            null = best_null;
        }
        report.initial_losses[k - 1] = initial;
        report.final_losses[k - 1] = best_loss;
        z = problem.step_with(&best_eps)?;
        embeddings[k - 1] = null.clone();
    }
    Ok(FrameNullResult { embeddings, report })
}

/// Guided DDIM sampling of one frame from `z_T`, using `nulls[k - 1]` as the
/// unconditional context at inference position `k`.
pub fn guided_reconstruct<F: FrameDenoiser + ?Sized>(
    z_t: &Array3<f64>,
    denoiser: &F,
    cond_context: &Array2<f64>,
    nulls: &[Array2<f64>],
    w: f64,
    sched: &NoiseSchedule,
) -> Result<Array3<f64>, DiffusionError> {
    if nulls.len() != sched.num_inference_steps() {
        return Err(DiffusionError::Shape(format!("{} null contexts for {} steps", nulls.len(), sched.num_inference_steps())));
    }
    let mut z = z_t.clone();
    for k in (1..=sched.num_inference_steps()).rev() {
        let (t, t_prev) = (sched.timestep_at(k), sched.timestep_at(k - 1));
        let eps_c = denoiser.predict(&z, t, cond_context)?;
        let eps = if w == 1.0 { eps_c } else { cfg_predict(&eps_c, &denoiser.predict(&z, t, &nulls[k - 1])?, w)? };
        z = ddim_step(&z, &eps, t, t_prev, sched)?;
    }
    Ok(z)
}
