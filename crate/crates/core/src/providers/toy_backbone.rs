//! Seeded two-level attention backbone and its inflated control branch.
//!
//! Tokens are latent cells (`h·w` rows per frame). Each level runs
//!
//! ```text
//! x += st_self_attn(x)
//! x  = gated_attn(x, grounding)      (backbone only)
//! x += modulated_cross_attn(x, ctx)
//! x += x·W_mix + b_mix
//! ```
//!
//! Level 0 works at latent resolution, level 1 after 2×2 average pooling. The
//! decoder path is `mid = x1 + x1·W_mid + b_mid`, then
//! `y = up(mid + skip1) + skip0` and a linear read-out. Control residuals are
//! added to `skip0`, `skip1` and `mid` (the three injection sites).

use std::path::Path;

use ndarray::{Array2, Array3, Array4, Axis};

use super::{ClipPullback, ControlBranch, DenoiseRequest, ProviderError, VideoDenoiser};
use crate::attention::{
    cross_frame_gated_g, modulated_cross_attention_g, st_self_attention_g, AttentionWeights, BoundAttention,
    ContextMode, GateParams,
};
use crate::autograd::{Graph, Var};
use crate::control::ControlResiduals;
use crate::rng::SeededRng;
use crate::tensor_io;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyBackboneConfig {
    pub channels: usize,
    pub d_model: usize,
    pub d_ctx: usize,
    pub heads: usize,
    pub init_bound: f64,
    pub gate: GateParams,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self { channels: 4, d_model: 16, d_ctx: 16, heads: 2, init_bound: 0.04, gate: GateParams::default() }
    }
}

/// Weights of one resolution level.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLevel {
    pub self_attn: AttentionWeights,
    pub gated: Option<AttentionWeights>,
    pub cross: AttentionWeights,
    pub mix_w: Array2<f64>,
    pub mix_b: Array2<f64>,
}

impl ToyLevel {
    fn seeded(r: &mut SeededRng, seed: u64, label: &str, cfg: &ToyBackboneConfig, gated: bool) -> Self {
        let (d, b) = (cfg.d_model, cfg.init_bound);
        Self {
            self_attn: AttentionWeights::seeded(seed, &format!("{label}.self"), d, d, cfg.heads, b),
            gated: gated.then(|| AttentionWeights::seeded(seed, &format!("{label}.gated"), d, d, cfg.heads, b)),
            cross: AttentionWeights::seeded(seed, &format!("{label}.cross"), d, cfg.d_ctx, cfg.heads, b),
            mix_w: r.uniform_matrix(d, d, b),
            mix_b: r.uniform_matrix(1, d, b),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let ToyLevel { self_attn, gated, cross, mix_w, mix_b } = self;
        let mut out: Vec<&mut Array2<f64>> = Vec::new();
        out.extend([&mut self_attn.wq, &mut self_attn.wk, &mut self_attn.wv, &mut self_attn.wo]);
        if let Some(g) = gated {
            out.extend([&mut g.wq, &mut g.wk, &mut g.wv, &mut g.wo]);
        }
        out.extend([&mut cross.wq, &mut cross.wk, &mut cross.wv, &mut cross.wo]);
        out.extend([mix_w, mix_b]);
        out
    }

    fn bind(&self, g: &mut Graph) -> BoundLevel {
        BoundLevel {
            self_attn: self.self_attn.bind(g),
            gated: self.gated.as_ref().map(|w| w.bind(g)),
            cross: self.cross.bind(g),
            mix_w: g.constant(self.mix_w.clone()),
            mix_b: g.constant(self.mix_b.clone()),
        }
    }
}

struct BoundLevel {
    self_attn: BoundAttention,
    gated: Option<BoundAttention>,
    cross: BoundAttention,
    mix_w: Var,
    mix_b: Var,
}

impl BoundLevel {
    fn forward(
        &self,
        g: &mut Graph,
        xs: Vec<Var>,
        contexts: &[Var],
        mode: ContextMode,
        grounding: &[Var],
        gate: GateParams,
    ) -> Vec<Var> {
        let sa = st_self_attention_g(g, &self.self_attn, &xs);
        let mut xs: Vec<Var> = xs.iter().zip(sa).map(|(&x, a)| g.add(x, a)).collect();
        if let Some(gw) = &self.gated {
            xs = cross_frame_gated_g(g, gw, &xs, grounding, gate);
        }
        let ca = modulated_cross_attention_g(g, &self.cross, &xs, contexts, mode);
        xs.iter()
            .zip(ca)
            .map(|(&x, a)| {
                let x = g.add(x, a);
                let m = g.matmul(x, self.mix_w);
                let m = g.add_row(m, self.mix_b);
                g.add(x, m)
            })
            .collect()
    }
}

/// `[h/2·w/2, h·w]` matrix averaging each 2×2 cell.
fn pool_matrix(h: usize, w: usize) -> Array2<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut m = Array2::zeros((h2 * w2, h * w));
    for y in 0..h {
        for x in 0..w {
            m[((y / 2) * w2 + x / 2, y * w + x)] = 0.25;
        }
    }
    m
}

/// Sinusoidal embedding of `t`, sine half then cosine half.
fn timestep_embedding(t: usize, width: usize) -> Array2<f64> {
    let half = width / 2;
    let mut e = Array2::zeros((1, width));
    for j in 0..half {
        let freq = (-(10000f64).ln() * j as f64 / half as f64).exp();
        e[(0, j)] = (t as f64 * freq).sin();
        e[(0, half + j)] = (t as f64 * freq).cos();
    }
    e
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Input projection plus time conditioning:
/// `x·W_in + b_in + silu(sinusoid(t)·W_t + b_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyStem {
    pub proj_in_w: Array2<f64>,
    pub proj_in_b: Array2<f64>,
    pub time_w: Array2<f64>,
    pub time_b: Array2<f64>,
}

impl ToyStem {
    fn seeded(r: &mut SeededRng, cfg: &ToyBackboneConfig) -> Self {
        let (d, b) = (cfg.d_model, cfg.init_bound);
        Self {
            proj_in_w: r.uniform_matrix(cfg.channels, d, b),
            proj_in_b: r.uniform_matrix(1, d, b),
            time_w: r.uniform_matrix(d, d, b),
            time_b: r.uniform_matrix(1, d, b),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.proj_in_w, &mut self.proj_in_b, &mut self.time_w, &mut self.time_b]
    }

    /// Per-frame tokens `x_i·W_in + b_in + temb(t)`.
    fn tokens(&self, g: &mut Graph, latents: &Array4<f64>, t: usize) -> Vec<Var> {
        let (_, h, w, c) = latents.dim();
        let temb = (timestep_embedding(t, self.time_w.nrows()).dot(&self.time_w) + &self.time_b).mapv(silu);
        let bias = g.constant(&self.proj_in_b + &temb);
        let win = g.constant(self.proj_in_w.clone());
        latents
            .outer_iter()
            .map(|f| {
                let x = g.constant(f.to_owned().into_shape_with_order((h * w, c)).expect("owned frame is contiguous"));
                let p = g.matmul(x, win);
                g.add_row(p, bias)
            })
            .collect()
    }
}

fn check_latents(latents: &Array4<f64>, channels: usize) -> Result<(usize, usize, usize), ProviderError> {
    let (n, h, w, c) = latents.dim();
    if c != channels {
        return Err(ProviderError::Shape(format!("latents have {c} channels, backbone expects {channels}")));
    }
    if n == 0 || h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(ProviderError::Shape(format!("latent grid {n}x{h}x{w} must be non-empty with even sides")));
    }
    Ok((n, h, w))
}

fn check_contexts(contexts: &Array3<f64>, n: usize, d_ctx: usize) -> Result<(), ProviderError> {
    let (nc, l, d) = contexts.dim();
    if nc != n || d != d_ctx || l == 0 {
        return Err(ProviderError::Shape(format!("contexts {nc}x{l}x{d} for {n} frames of width {d_ctx}")));
    }
    Ok(())
}

fn sites(n: usize, h: usize, w: usize, d: usize) -> Vec<[usize; 4]> {
    vec![[n, h, w, d], [n, h / 2, w / 2, d], [n, h / 2, w / 2, d]]
}

fn frame_rows(a: &Array4<f64>, i: usize) -> Array2<f64> {
    let (_, h, w, c) = a.dim();
    a.index_axis(Axis(0), i).to_owned().into_shape_with_order((h * w, c)).expect("owned frame is contiguous")
}

fn stack_rows(g: &Graph, vars: &[Var], dims: (usize, usize, usize, usize)) -> Array4<f64> {
    let views: Vec<_> = vars.iter().map(|&v| g.value(v).view()).collect();
    ndarray::concatenate(Axis(0), &views)
        .expect("uniform token widths")
        .into_shape_with_order(dims)
        .expect("rows match latent grid")
}

fn load_into(path: &Path, params: Vec<&mut Array2<f64>>) -> Result<(), ProviderError> {
    let werr = |reason: String| ProviderError::Weights { path: path.to_path_buf(), reason };
    let mats = tensor_io::read_matrices(path).map_err(|e| werr(e.to_string()))?;
    if mats.len() != params.len() {
        return Err(werr(format!("expected {} matrices, found {}", params.len(), mats.len())));
    }
    for (i, (dst, src)) in params.into_iter().zip(mats).enumerate() {
        if dst.dim() != src.dim() {
            return Err(werr(format!("matrix {i}: expected {:?}, found {:?}", dst.dim(), src.dim())));
        }
        *dst = src;
    }
    Ok(())
}

/// The toy noise-prediction backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub config: ToyBackboneConfig,
    pub stem: ToyStem,
    pub levels: [ToyLevel; 2],
    pub mid_w: Array2<f64>,
    pub mid_b: Array2<f64>,
    pub proj_out_w: Array2<f64>,
    pub proj_out_b: Array2<f64>,
}

impl ToyDenoiser {
    pub fn seeded(seed: u64, config: ToyBackboneConfig) -> Self {
        let mut r = SeededRng::labelled(seed, "denoiser");
        let (d, b) = (config.d_model, config.init_bound);
        Self {
            stem: ToyStem::seeded(&mut r, &config),
            levels: [
                ToyLevel::seeded(&mut r, seed, "denoiser.level0", &config, true),
                ToyLevel::seeded(&mut r, seed, "denoiser.level1", &config, true),
            ],
            mid_w: r.uniform_matrix(d, d, b),
            mid_b: r.uniform_matrix(1, d, b),
            proj_out_w: r.uniform_matrix(d, config.channels, b),
            proj_out_b: r.uniform_matrix(1, config.channels, b),
            config,
        }
    }

    /// Same architecture with every weight zero.
    pub fn zeros(config: ToyBackboneConfig) -> Self {
        let mut d = Self::seeded(0, config);
        for p in d.params_mut() {
            p.fill(0.0);
        }
        d
    }

    /// Parameters in file order: stem, level 0, level 1, mid, read-out.
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let [l0, l1] = &mut self.levels;
        let mut out = self.stem.params_mut();
        out.extend(l0.params_mut());
        out.extend(l1.params_mut());
        out.extend([&mut self.mid_w, &mut self.mid_b, &mut self.proj_out_w, &mut self.proj_out_b]);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ProviderError> {
        let mut copy = self.clone();
        let params = copy.params_mut();
        let refs: Vec<&Array2<f64>> = params.into_iter().map(|p| &*p).collect();
        tensor_io::write_matrices(path, &refs)
            .map_err(|e| ProviderError::Weights { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn load(path: &Path, config: ToyBackboneConfig) -> Result<Self, ProviderError> {
        let mut d = Self::seeded(0, config);
        load_into(path, d.params_mut())?;
        Ok(d)
    }

    fn validate(&self, req: &DenoiseRequest) -> Result<(usize, usize, usize), ProviderError> {
        let (n, h, w) = check_latents(req.latents, self.config.channels)?;
        check_contexts(req.contexts, n, self.config.d_ctx)?;
        if let Some(u) = req.grounding {
            let (nu, _, du) = u.dim();
            if nu != n || du != self.config.d_model {
                return Err(ProviderError::Shape(format!(
                    "grounding tokens {:?} for {n} frames of width {}",
                    u.dim(),
                    self.config.d_model
                )));
            }
        }
        if let Some(r) = req.residuals {
            let want = self.injection_sites(n, h, w);
            if r.shapes() != want {
                return Err(ProviderError::Shape(format!("residual shapes {:?}, sites {:?}", r.shapes(), want)));
            }
        }
        Ok((n, h, w))
    }

    /// Builds the forward pass; returns the per-frame predictions `[h·w, c]`.
    fn forward(&self, g: &mut Graph, req: &DenoiseRequest, contexts: &[Var], h: usize, w: usize) -> Vec<Var> {
        let n = contexts.len();
        let residual = |g: &mut Graph, site: usize, i: usize| {
            req.residuals.map(|r| g.constant(frame_rows(&r.levels[site], i)))
        };
        let grounding: Vec<Var> = match req.grounding {
            Some(u) if u.dim().1 > 0 => u.outer_iter().map(|f| g.constant(f.to_owned())).collect(),
            _ => Vec::new(),
        };
        let gate = self.config.gate;
        let l0 = self.levels[0].bind(g);
        let l1 = self.levels[1].bind(g);
        let pool = g.constant(pool_matrix(h, w));
        let unpool = g.constant(pool_matrix(h, w).t().mapv(|v| v * 4.0));
        let mid_w = g.constant(self.mid_w.clone());
        let mid_b = g.constant(self.mid_b.clone());
        let out_w = g.constant(self.proj_out_w.clone());
        let out_b = g.constant(self.proj_out_b.clone());

        let x = self.stem.tokens(g, req.latents, req.t);
        let x0 = l0.forward(g, x, contexts, req.mode, &grounding, gate);
        let pooled: Vec<Var> = x0.iter().map(|&v| g.matmul(pool, v)).collect();
        let x1 = l1.forward(g, pooled, contexts, req.mode, &grounding, gate);
        (0..n)
            .map(|i| {
                let mut skip0 = x0[i];
                let mut skip1 = x1[i];
                let m = g.matmul(x1[i], mid_w);
                let m = g.add_row(m, mid_b);
                let mut mid = g.add(x1[i], m);
                if let Some(r) = residual(g, 0, i) {
                    skip0 = g.add(skip0, r);
                }
                if let Some(r) = residual(g, 1, i) {
                    skip1 = g.add(skip1, r);
                }
                if let Some(r) = residual(g, 2, i) {
                    mid = g.add(mid, r);
                }
                let up = g.add(mid, skip1);
                let up = g.matmul(unpool, up);
                let y = g.add(up, skip0);
                let y = g.matmul(y, out_w);
                g.add_row(y, out_b)
            })
            .collect()
    }
}

impl VideoDenoiser for ToyDenoiser {
    fn predict(&self, req: &DenoiseRequest) -> Result<Array4<f64>, ProviderError> {
        let (n, h, w) = self.validate(req)?;
        let mut g = Graph::new();
        let ctx: Vec<Var> = req.contexts.outer_iter().map(|c| g.constant(c.to_owned())).collect();
        let outs = self.forward(&mut g, req, &ctx, h, w);
        Ok(stack_rows(&g, &outs, (n, h, w, self.config.channels)))
    }

    fn predict_with_pullback<'a>(
        &'a self,
        req: &DenoiseRequest,
    ) -> Result<(Array4<f64>, ClipPullback<'a>), ProviderError> {
        let (n, h, w) = self.validate(req)?;
        let c = self.config.channels;
        let mut g = Graph::new();
        let ctx: Vec<Var> = req.contexts.outer_iter().map(|c| g.param(c.to_owned())).collect();
        let outs = self.forward(&mut g, req, &ctx, h, w);
        let joined = g.concat_rows(&outs);
        let pred = g.value(joined).clone().into_shape_with_order((n, h, w, c)).expect("rows match latent grid");
        let ctx_dim = req.contexts.dim();
        let pullback: ClipPullback<'a> = Box::new(move |cot: &Array4<f64>| {
            let seed = cot.to_owned().into_shape_with_order((n * h * w, c)).expect("cotangent matches prediction");
            let grads = g.backward(joined, seed);
            let mut out = Array3::zeros(ctx_dim);
            for (i, &v) in ctx.iter().enumerate() {
                if let Some(gr) = grads.get(v) {
                    out.index_axis_mut(Axis(0), i).assign(gr);
                }
            }
            out
        });
        Ok((pred, pullback))
    }

    fn injection_sites(&self, n: usize, h: usize, w: usize) -> Vec<[usize; 4]> {
        sites(n, h, w, self.config.d_model)
    }

    fn model_width(&self) -> usize {
        self.config.d_model
    }
}

/// Inflated control branch: a copy of the backbone encoder without gated
/// attention, fed an extra projection of the condition maps, with a linear
/// read-out per injection site.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyControlBranch {
    pub config: ToyBackboneConfig,
    pub condition_channels: usize,
    pub stem: ToyStem,
    pub hint_w: Array2<f64>,
    pub hint_b: Array2<f64>,
    pub levels: [ToyLevel; 2],
    pub mid_w: Array2<f64>,
    pub mid_b: Array2<f64>,
    pub out_w: [Array2<f64>; 3],
}

impl ToyControlBranch {
    pub fn seeded(seed: u64, config: ToyBackboneConfig, condition_channels: usize) -> Self {
        let mut r = SeededRng::labelled(seed, "control");
        let (d, b) = (config.d_model, config.init_bound);
        Self {
            stem: ToyStem::seeded(&mut r, &config),
            hint_w: r.uniform_matrix(condition_channels, d, b),
            hint_b: r.uniform_matrix(1, d, b),
            levels: [
                ToyLevel::seeded(&mut r, seed, "control.level0", &config, false),
                ToyLevel::seeded(&mut r, seed, "control.level1", &config, false),
            ],
            mid_w: r.uniform_matrix(d, d, b),
            mid_b: r.uniform_matrix(1, d, b),
            out_w: [r.uniform_matrix(d, d, b), r.uniform_matrix(d, d, b), r.uniform_matrix(d, d, b)],
            config,
            condition_channels,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let [l0, l1] = &mut self.levels;
        let [o0, o1, o2] = &mut self.out_w;
        let mut out = self.stem.params_mut();
        out.extend([&mut self.hint_w, &mut self.hint_b]);
        out.extend(l0.params_mut());
        out.extend(l1.params_mut());
        out.extend([&mut self.mid_w, &mut self.mid_b, o0, o1, o2]);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ProviderError> {
        let mut copy = self.clone();
        let refs: Vec<&Array2<f64>> = copy.params_mut().into_iter().map(|p| &*p).collect();
        tensor_io::write_matrices(path, &refs)
            .map_err(|e| ProviderError::Weights { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn load(path: &Path, config: ToyBackboneConfig, condition_channels: usize) -> Result<Self, ProviderError> {
        let mut b = Self::seeded(0, config, condition_channels);
        load_into(path, b.params_mut())?;
        Ok(b)
    }

    /// Runs each frame through the branch on its own (no cross-frame
    /// attention).
    pub fn residuals_per_frame(
        &self,
        latents: &Array4<f64>,
        t: usize,
        contexts: &Array3<f64>,
        conditions: &Array4<f64>,
    ) -> Result<ControlResiduals, ProviderError> {
        let n = latents.dim().0;
        let mut per_frame = Vec::with_capacity(n);
        for i in 0..n {
            let one = |a: &Array4<f64>| a.index_axis(Axis(0), i).insert_axis(Axis(0)).to_owned();
            let c = contexts.index_axis(Axis(0), i).insert_axis(Axis(0)).to_owned();
            per_frame.push(self.residuals(&one(latents), t, &c, ContextMode::Cond, &one(conditions))?);
        }
        let levels = (0..3)
            .map(|l| {
                let views: Vec<_> = per_frame.iter().map(|r| r.levels[l].view()).collect();
                ndarray::concatenate(Axis(0), &views).expect("per-frame residuals share shape")
            })
            .collect();
        Ok(ControlResiduals { levels })
    }
}

impl ControlBranch for ToyControlBranch {
    fn condition_channels(&self) -> usize {
        self.condition_channels
    }

    fn residuals(
        &self,
        latents: &Array4<f64>,
        t: usize,
        contexts: &Array3<f64>,
        mode: ContextMode,
        conditions: &Array4<f64>,
    ) -> Result<ControlResiduals, ProviderError> {
        let (n, h, w) = check_latents(latents, self.config.channels)?;
        check_contexts(contexts, n, self.config.d_ctx)?;
        if conditions.dim() != (n, h, w, self.condition_channels) {
            return Err(ProviderError::Shape(format!(
                "conditions {:?}, expected {:?}",
                conditions.dim(),
                (n, h, w, self.condition_channels)
            )));
        }
        let d = self.config.d_model;
        let mut g = Graph::new();
        let ctx: Vec<Var> = contexts.outer_iter().map(|c| g.constant(c.to_owned())).collect();
        let l0 = self.levels[0].bind(&mut g);
        let l1 = self.levels[1].bind(&mut g);
        let hint_w = g.constant(self.hint_w.clone());
        let hint_b = g.constant(self.hint_b.clone());
        let pool = g.constant(pool_matrix(h, w));
        let mid_w = g.constant(self.mid_w.clone());
        let mid_b = g.constant(self.mid_b.clone());
        let outs: Vec<Var> = self.out_w.iter().map(|o| g.constant(o.clone())).collect();

        let base = self.stem.tokens(&mut g, latents, t);
        let x: Vec<Var> = base
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let c = g.constant(frame_rows(conditions, i));
                let hint = g.matmul(c, hint_w);
                let hint = g.add_row(hint, hint_b);
                g.add(b, hint)
            })
            .collect();
        let x0 = l0.forward(&mut g, x, &ctx, mode, &[], GateParams::default());
        let pooled: Vec<Var> = x0.iter().map(|&v| g.matmul(pool, v)).collect();
        let x1 = l1.forward(&mut g, pooled, &ctx, mode, &[], GateParams::default());
        let mut r0 = Vec::with_capacity(n);
        let mut r1 = Vec::with_capacity(n);
        let mut rm = Vec::with_capacity(n);
        for i in 0..n {
            r0.push(g.matmul(x0[i], outs[0]));
            r1.push(g.matmul(x1[i], outs[1]));
            let m = g.matmul(x1[i], mid_w);
            let m = g.add_row(m, mid_b);
            let m = g.add(x1[i], m);
            rm.push(g.matmul(m, outs[2]));
        }
        Ok(ControlResiduals {
            levels: vec![
                stack_rows(&g, &r0, (n, h, w, d)),
                stack_rows(&g, &r1, (n, h / 2, w / 2, d)),
                stack_rows(&g, &rm, (n, h / 2, w / 2, d)),
            ],
        })
    }
}
