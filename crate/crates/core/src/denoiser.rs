//! Window MLP that predicts clean tokens from noisy ones, with per-frame
//! noise levels, plus training and checkpointing.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maze::Dataset;
use crate::trajectory::{build_beta_schedule, BetaSchedule, ScheduleKind, DEFAULT_FRAME_STACK};

pub const CHECKPOINT_VERSION: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Token dimension `D`.
    pub dim: usize,
    /// Environment steps per frame.
    pub frame_stack: usize,
    /// Frames seen by one forward pass.
    pub window: usize,
    pub hidden: Vec<usize>,
    /// Sinusoidal embedding width per frame (even).
    pub embed_dim: usize,
    /// Number of noise levels `K`.
    pub levels: usize,
    pub schedule: ScheduleKind,
    /// Append the normalized goal position to the input.
    pub goal_input: bool,
    /// Extra input flag marking windows whose first token is a clean,
    /// pinned start state.
    pub start_flag: bool,
    /// Predict `x0 = sqrt(a) x_t + sqrt(1 - a) f(.)` instead of `f(.)` directly.
    pub skip: bool,
    /// Project each predicted window onto its lowest cosine modes along time.
    pub smooth_modes: Option<usize>,
    /// Rebuild predicted positions by integrating predicted velocities
    /// (tokens laid out as position then velocity, two axes each).
    pub integrate_positions: bool,
    /// Width of a learned embedding table over maze cells, sampled
    /// bilinearly at each token's position and fed as input; 0 disables it.
    pub map_embedding: usize,
    /// Cells of the embedding table along each position axis. Required when
    /// the embedding is on; training fills it from the dataset when unset.
    pub map_extent: Option<[usize; 2]>,
    /// Table nodes per cell along each axis.
    pub map_resolution: usize,
    /// Average each plan frame over every window covering it instead of
    /// reading it from the window that ends with it.
    pub blend_windows: bool,
    /// Frames between the starts of blended windows (the last window is
    /// always included).
    pub blend_stride: usize,
    /// Shift the integrated positions of each plan frame so that they
    /// continue from the previous frame when both are being predicted.
    pub chain_frames: bool,
    /// Feed the window as its lowest cosine modes along time (plus the raw
    /// first token) instead of every token; cell features are then read at
    /// the smoothed positions.
    pub input_modes: Option<usize>,
    /// Fit a Gaussian window prior when training on a dataset; the linear
    /// part of every clean estimate is then its posterior mean.
    pub fit_prior: bool,
    /// Feed the linear clean estimate of the window to the network instead
    /// of the noisy tokens.
    pub estimate_input: bool,
    /// Training windows kept as a kernel memory whose posterior mean
    /// replaces the linear estimate; 0 disables the memory.
    pub memory_windows: usize,
    /// Floor on the per-token noise variance of the memory kernel.
    pub memory_bandwidth: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            frame_stack: DEFAULT_FRAME_STACK,
            window: 11,
            hidden: vec![128, 128],
            embed_dim: 8,
            levels: 200,
            schedule: ScheduleKind::Linear,
            goal_input: false,
            start_flag: true,
            skip: true,
            smooth_modes: Some(8),
            integrate_positions: true,
            map_embedding: 8,
            map_extent: None,
            map_resolution: 4,
            blend_windows: true,
            blend_stride: 1,
            chain_frames: false,
            input_modes: None,
            fit_prior: true,
            estimate_input: true,
            memory_windows: 2000,
            memory_bandwidth: 0.05,
        }
    }
}

impl DenoiserConfig {
    pub fn frame_width(&self) -> usize {
        self.frame_stack * self.dim
    }

    /// Tokens covered by one window.
    pub fn window_tokens(&self) -> usize {
        self.window * self.frame_stack
    }

    pub fn input_width(&self) -> usize {
        let tokens = match self.input_modes {
            Some(m) => (m + 1) * self.dim,
            None => self.window * self.frame_width(),
        };
        tokens
            + self.window * self.embed_dim
            + self.window_tokens() * self.map_embedding
            + if self.goal_input { 2 } else { 0 }
            + usize::from(self.start_flag)
    }

    pub fn output_width(&self) -> usize {
        self.window * self.frame_width()
    }

    fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.frame_stack == 0 || self.window == 0 || self.levels == 0 {
            return Err(Error::Config(
                "dim >= 2, frame_stack, window and levels >= 1 required".into(),
            ));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config("embed_dim must be even".into()));
        }
        if self
            .input_modes
            .is_some_and(|m| m == 0 || m > self.window_tokens())
        {
            return Err(Error::Config(
                "input_modes must lie in [1, window tokens]".into(),
            ));
        }
        if self
            .smooth_modes
            .is_some_and(|m| m == 0 || m > self.window_tokens())
        {
            return Err(Error::Config(
                "smooth_modes must lie in [1, window tokens]".into(),
            ));
        }
        if self.integrate_positions && self.dim != 4 {
            return Err(Error::Config(
                "integrate_positions needs position and velocity tokens (dim 4)".into(),
            ));
        }
        if !(self.memory_bandwidth > 0.0 && self.memory_bandwidth.is_finite()) {
            return Err(Error::Config("memory bandwidth must be positive".into()));
        }
        if self.blend_stride == 0 || self.blend_stride > self.window {
            return Err(Error::Config("blend stride must lie in 1..=window".into()));
        }
        if self.map_resolution == 0 {
            return Err(Error::Config("map resolution must be at least 1".into()));
        }
        if self.map_embedding > 0 && self.map_extent.is_none_or(|[a, b]| a == 0 || b == 0) {
            return Err(Error::Config(
                "map embedding needs a non-empty map extent".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Trained (or untrained) denoiser with its schedule and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    schedule: BetaSchedule,
    layers: Vec<Dense>,
    mean: Vec<f64>,
    std: Vec<f64>,
    smoother: Option<Array2<f64>>,
    input_basis: Option<Array2<f64>>,
    /// Per-dimension second moments of normalized training windows.
    prior: Option<Vec<Array2<f64>>>,
    skip_cache: SkipCache,
    /// Cell embedding table, one row per cell (`b` is empty).
    map: Option<Dense>,
    /// Flattened normalized memory windows, one per row, with their
    /// squared entries.
    memory: Option<(Array2<f64>, Array2<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    precision: String,
    config: DenoiserConfig,
    mean: Vec<f64>,
    std: Vec<f64>,
    prior: Option<Vec<Array2<f64>>>,
    memory: Option<Array2<f64>>,
    params: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// `x_t = sqrt(a) x0 + sqrt(1 - a) eps` with `a` the cumulative signal at `t`.
pub fn forward_noise(x0: f64, eps: f64, alpha_bar: f64) -> f64 {
    alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps
}

/// Applies [`forward_noise`] row-wise with one noise index per token.
pub fn forward_noise_tokens(
    x0: ArrayView2<f64>,
    levels: &[usize],
    eps: ArrayView2<f64>,
    schedule: &BetaSchedule,
) -> Result<Array2<f64>> {
    check_token_shapes(x0, eps, levels)?;
    let mut out = x0.to_owned();
    for (i, &t) in levels.iter().enumerate() {
        let a = schedule.alpha_bar(t)?;
        if t == 0 {
            continue;
        }
        Zip::from(out.row_mut(i))
            .and(eps.row(i))
            .for_each(|x, &e| *x = forward_noise(*x, e, a));
    }
    Ok(out)
}

/// Noise implied by a clean-token estimate: `(x_t - sqrt(a) x0) / sqrt(1 - a)`.
pub fn epsilon_from_x0(x_t: f64, x0: f64, alpha_bar: f64) -> f64 {
    (x_t - alpha_bar.sqrt() * x0) / (1.0 - alpha_bar).sqrt()
}

pub fn epsilon_from_x0_tokens(
    x_t: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    levels: &[usize],
    schedule: &BetaSchedule,
) -> Result<Array2<f64>> {
    check_token_shapes(x_t, x0, levels)?;
    let mut out = Array2::zeros(x_t.raw_dim());
    for (i, &t) in levels.iter().enumerate() {
        if t == 0 {
            return Err(Error::NoiseIndex {
                index: 0,
                max: schedule.levels(),
            });
        }
        let a = schedule.alpha_bar(t)?;
        Zip::from(out.row_mut(i))
            .and(x_t.row(i))
            .and(x0.row(i))
            .for_each(|e, &x, &c| *e = epsilon_from_x0(x, c, a));
    }
    Ok(out)
}

fn check_token_shapes(a: ArrayView2<f64>, b: ArrayView2<f64>, levels: &[usize]) -> Result<()> {
    if a.dim() != b.dim() || a.nrows() != levels.len() {
        return Err(Error::ModelContract(format!(
            "token shapes {:?} / {:?} with {} levels",
            a.dim(),
            b.dim(),
            levels.len()
        )));
    }
    Ok(())
}

/// Sinusoidal features of a noise index `t` out of `k`, at octave
/// frequencies of the relative level `t / k`.
pub fn level_embedding(t: usize, k: usize, width: usize, out: &mut [f64]) {
    let half = width / 2;
    let tau = t as f64 / k as f64;
    for i in 0..half {
        let arg = std::f64::consts::PI * 2f64.powi(i as i32) * tau;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
}

/// Orthogonal projector onto the first `modes` DCT-II vectors of length `n`.
pub fn cosine_projector(n: usize, modes: usize) -> Array2<f64> {
    let basis = cosine_basis(n, modes);
    basis.dot(&basis.t())
}

/// First `modes` columns of the orthonormal DCT-II basis on `n` points.
pub fn cosine_basis(n: usize, modes: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, modes), |(i, k)| {
        let c = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        c * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()
    })
}

/// One model input: window tokens, per-frame levels and whether the first
/// token is a pinned clean state.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub tokens: ArrayView2<'a, f64>,
    pub levels: &'a [usize],
    pub pinned: bool,
}

/// Per-sample intermediate values kept for backpropagation.
/// Window offset stride used to fit the prior.
const PRIOR_STRIDE: usize = 5;

/// Diagonal regularizer of the noisy window covariance.
const PRIOR_JITTER: f64 = 1e-9;

struct LinearSkip {
    /// Posterior mean map per token dimension.
    maps: Vec<Array2<f64>>,
    /// Posterior standard deviation per token and dimension; scales the
    /// learned correction.
    scale: Array2<f64>,
}

type SkipKey = (Vec<usize>, bool);

/// Memo of linear skips by level pattern. Clones start empty.
#[derive(Default)]
struct SkipCache(Mutex<HashMap<SkipKey, Arc<LinearSkip>>>);

impl SkipCache {
    const CAPACITY: usize = 4096;

    fn get(&self, key: &SkipKey) -> Option<Arc<LinearSkip>> {
        self.0.lock().expect("skip cache lock").get(key).cloned()
    }

    fn insert(&self, key: SkipKey, value: Arc<LinearSkip>) {
        let mut map = self.0.lock().expect("skip cache lock");
        if map.len() >= Self::CAPACITY {
            map.clear();
        }
        map.insert(key, value);
    }

    fn clear(&self) {
        self.0.lock().expect("skip cache lock").clear();
    }
}

impl Clone for SkipCache {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl PartialEq for SkipCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl std::fmt::Debug for SkipCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SkipCache")
    }
}

/// Signal-to-noise ceiling of the anchor weights; clean tokens sit at it.
const ANCHOR_SNR_CAP: f64 = 1e4;

enum Anchor<'a> {
    /// Positions start at this (clean) token.
    Pinned(ArrayView1<'a, f64>),
    /// Per-token weights summing to one.
    Weighted(Vec<f64>),
}

struct Trace {
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl Denoiser {
    /// Fresh model with identity normalization. Hidden layers use scaled
    /// uniform initialization; the output layer starts at zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = build_beta_schedule(config.schedule, config.levels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![config.input_width()];
        widths.extend(&config.hidden);
        widths.push(config.output_width());
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let w = if l + 1 == n {
                    Array2::zeros((fan_in, fan_out))
                } else {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
                };
                Dense {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        let map = config
            .map_extent
            .filter(|_| config.map_embedding > 0)
            .map(|[a, b]| Dense {
                w: Array2::from_shape_fn(
                    (a * b * config.map_resolution.pow(2), config.map_embedding),
                    |_| rng.random_range(-0.5..0.5),
                ),
                b: Array1::zeros(0),
            });
        Ok(Self {
            map,
            memory: None,
            prior: None,
            skip_cache: SkipCache::default(),
            input_basis: config
                .input_modes
                .map(|m| cosine_basis(config.window_tokens(), m)),
            smoother: config
                .smooth_modes
                .map(|m| cosine_projector(config.window_tokens(), m)),
            schedule,
            layers,
            mean: vec![0.0; config.dim],
            std: vec![1.0; config.dim],
            config,
        })
    }

    /// Changes how overlapping window predictions are merged at inference.
    pub fn set_blending(&mut self, blend: bool, stride: usize) -> Result<()> {
        let mut c = self.config.clone();
        c.blend_windows = blend;
        c.blend_stride = stride;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &BetaSchedule {
        &self.schedule
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn set_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        if mean.len() != self.config.dim || std.len() != self.config.dim {
            return Err(Error::ModelContract("normalization width != dim".into()));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::ModelContract(
                "normalization std must be positive".into(),
            ));
        }
        self.mean = mean;
        self.std = std;
        Ok(())
    }

    pub fn normalize(&self, raw: ArrayView2<f64>) -> Array2<f64> {
        let mut out = raw.to_owned();
        for mut row in out.rows_mut() {
            for d in 0..self.config.dim {
                row[d] = (row[d] - self.mean[d]) / self.std[d];
            }
        }
        out
    }

    pub fn denormalize(&self, norm: ArrayView2<f64>) -> Array2<f64> {
        let mut out = norm.to_owned();
        for mut row in out.rows_mut() {
            for d in 0..self.config.dim {
                row[d] = row[d] * self.std[d] + self.mean[d];
            }
        }
        out
    }

    /// Goal position in normalized coordinates.
    pub fn normalize_goal(&self, goal: [f64; 2]) -> [f64; 2] {
        [
            (goal[0] - self.mean[0]) / self.std[0],
            (goal[1] - self.mean[1]) / self.std[1],
        ]
    }

    /// Every trainable block: the layers, then the cell table.
    fn blocks(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().chain(self.map.as_ref())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.layers.iter_mut().chain(self.map.as_mut())
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in self.blocks() {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::ModelContract(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                params.len()
            )));
        }
        let mut it = params.iter();
        for l in self.blocks_mut() {
            l.w.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.b.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
        Ok(())
    }

    /// Writes one input row: flattened window tokens, per-frame embeddings,
    /// optional goal and start flag.
    fn fill_input(
        &self,
        w: &Window<'_>,
        base: &Array2<f64>,
        goal: Option<[f64; 2]>,
        row: &mut [f64],
    ) {
        let levels = w.levels;
        let c = &self.config;
        let tokens = self.input_tokens(w.tokens, base);
        let mut k = 0;
        let coeffs = self.input_basis.as_ref().map(|b| b.t().dot(&tokens));
        match &coeffs {
            Some(m) => {
                for v in m.iter().chain(tokens.row(0).iter()) {
                    row[k] = *v;
                    k += 1;
                }
            }
            None => {
                for v in tokens.iter() {
                    row[k] = *v;
                    k += 1;
                }
            }
        }
        debug_assert_eq!(k, self.map_offset() - c.window * c.embed_dim);
        for &t in levels {
            level_embedding(t, c.levels, c.embed_dim, &mut row[k..k + c.embed_dim]);
            k += c.embed_dim;
        }
        if let Some(map) = &self.map {
            let e = c.map_embedding;
            for tok in self.map_positions(tokens).rows() {
                let out = &mut row[k..k + e];
                out.fill(0.0);
                for (cell, wt) in self.map_corners(tok) {
                    for (o, v) in out.iter_mut().zip(map.w.row(cell)) {
                        *o += wt * v;
                    }
                }
                k += e;
            }
        }
        if c.goal_input {
            let g = goal.unwrap_or([0.0, 0.0]);
            row[k] = g[0];
            row[k + 1] = g[1];
            k += 2;
        }
        if c.start_flag {
            row[k] = if w.pinned { 1.0 } else { 0.0 };
        }
    }

    /// Table rows and bilinear weights around a normalized token's position.
    /// Table nodes sit at cell centers; positions outside are clamped.
    fn map_corners(&self, tok: ArrayView1<f64>) -> [(usize, f64); 4] {
        let [na, nb] = self.config.map_extent.expect("checked by validate");
        let r = self.config.map_resolution;
        let (na, nb) = (na * r, nb * r);
        let axis = |d: usize, n: usize| {
            let u =
                ((tok[d] * self.std[d] + self.mean[d]) * r as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (u.floor() as usize).min(n.saturating_sub(2));
            (i, (u - i as f64).min(1.0), usize::from(n > 1))
        };
        let (i, fa, da) = axis(0, na);
        let (j, fb, db) = axis(1, nb);
        [
            (i * nb + j, (1.0 - fa) * (1.0 - fb)),
            ((i + da) * nb + j, fa * (1.0 - fb)),
            (i * nb + j + db, (1.0 - fa) * fb),
            ((i + da) * nb + j + db, fa * fb),
        ]
    }

    /// Offset of the cell features inside an input row.
    fn map_offset(&self) -> usize {
        let c = &self.config;
        let tokens = match c.input_modes {
            Some(m) => (m + 1) * c.dim,
            None => c.window * c.frame_width(),
        };
        tokens + c.window * c.embed_dim
    }

    /// Window tokens as the network sees them: the linear clean estimate
    /// when `estimate_input` is set, else the noisy tokens.
    fn input_tokens<'a>(
        &self,
        noisy: ArrayView2<'a, f64>,
        base: &'a Array2<f64>,
    ) -> ArrayView2<'a, f64> {
        if self.config.estimate_input {
            base.view()
        } else {
            noisy
        }
    }

    /// Clean estimates the learned correction is added to: the memory
    /// posterior mean when a memory is loaded, else the linear estimate.
    fn base_estimates(&self, windows: &[Window<'_>]) -> Vec<Array2<f64>> {
        if self.memory.is_some() {
            return self.memory_estimates(windows);
        }
        windows
            .iter()
            .map(|w| {
                let lin = self.linear_skip(w.levels, w.pinned);
                let mut est = Array2::zeros(w.tokens.raw_dim());
                for d in 0..self.config.dim {
                    est.column_mut(d)
                        .assign(&lin.maps[d].dot(&w.tokens.column(d)));
                }
                est
            })
            .collect()
    }

    /// Posterior means of the windows under a uniform mixture of the memory
    /// windows observed through the forward process.
    fn memory_estimates(&self, windows: &[Window<'_>]) -> Vec<Array2<f64>> {
        let (bank, bank_sq) = self.memory.as_ref().expect("caller checked");
        let c = &self.config;
        let n = c.window_tokens();
        let width = n * c.dim;
        let mut u = Array2::zeros((windows.len(), width));
        let mut q = Array2::zeros((windows.len(), width));
        for (i, w) in windows.iter().enumerate() {
            for r in 0..n {
                let ab = self.schedule.alpha_bars()[w.levels[r / c.frame_stack]];
                let (a, var) = if w.pinned && r == 0 {
                    (1.0, 0.0)
                } else {
                    (ab.sqrt(), 1.0 - ab)
                };
                let prec = 1.0 / var.max(c.memory_bandwidth);
                for d in 0..c.dim {
                    u[[i, r * c.dim + d]] = prec * a * w.tokens[[r, d]];
                    q[[i, r * c.dim + d]] = 0.5 * prec * a * a;
                }
            }
        }
        let mut logw = u.dot(&bank.t()) - q.dot(&bank_sq.t());
        for mut row in logw.rows_mut() {
            let top = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - top).exp());
            let z = row.sum();
            row /= z;
        }
        let means = logw.dot(bank);
        means
            .rows()
            .into_iter()
            .map(|m| {
                m.to_owned()
                    .into_shape_with_order((n, c.dim))
                    .expect("memory rows are flattened windows")
            })
            .collect()
    }

    /// Stores up to `count` training windows, evenly spaced over the
    /// episodes, as the kernel memory.
    pub fn fit_memory(&mut self, data: &TrainingData, count: usize) -> Result<()> {
        let c = &self.config;
        let n = c.window_tokens();
        let offsets: Vec<(usize, usize)> = data
            .episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.nrows() >= n)
            .flat_map(|(i, e)| (0..=e.nrows() - n).map(move |o| (i, o)))
            .collect();
        if offsets.is_empty() {
            return Err(Error::Training(format!(
                "no episode holds a {n}-step window"
            )));
        }
        let count = count.min(offsets.len());
        let bank = Array2::from_shape_fn((count, n * c.dim), |(k, j)| {
            let (e, o) = offsets[k * offsets.len() / count];
            data.episodes[e][[o + j / c.dim, j % c.dim]]
        });
        self.set_memory(Some(bank))
    }

    pub fn set_memory(&mut self, memory: Option<Array2<f64>>) -> Result<()> {
        let width = self.config.window_tokens() * self.config.dim;
        if let Some(m) = &memory {
            if m.ncols() != width || m.nrows() == 0 {
                return Err(Error::ModelContract(format!(
                    "memory rows must hold {width} values"
                )));
            }
        }
        self.memory = memory.map(|m| {
            let sq = m.mapv(|v| v * v);
            (m, sq)
        });
        Ok(())
    }

    /// Tokens whose positions index the cell table.
    fn map_positions(&self, tokens: ArrayView2<f64>) -> Array2<f64> {
        match &self.input_basis {
            Some(b) => b.dot(&b.t().dot(&tokens)),
            None => tokens.to_owned(),
        }
    }

    fn forward_trace(&self, input: Array2<f64>) -> (Array2<f64>, Trace) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = vec![input];
        let n = self.layers.len();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = post[l].dot(&layer.w);
            z += &layer.b;
            if l + 1 == n {
                pre.push(z.clone());
                return (z, Trace { pre, post });
            }
            let a = z.mapv(silu);
            pre.push(z);
            post.push(a);
        }
        unreachable!("at least one layer")
    }

    /// Linear part of the clean estimate for a window with these levels,
    /// cached per level pattern.
    fn linear_skip(&self, levels: &[usize], pinned: bool) -> Arc<LinearSkip> {
        let key = (levels.to_vec(), pinned);
        if let Some(hit) = self.skip_cache.get(&key) {
            return hit;
        }
        let skip = Arc::new(self.compute_linear_skip(levels, pinned));
        self.skip_cache.insert(key, skip.clone());
        skip
    }

    /// Posterior mean map and posterior standard deviations of a Gaussian
    /// window prior observed through the forward process. A pinned first
    /// token is observed without noise. Without a fitted prior the tokens
    /// are independent with unit variance.
    fn compute_linear_skip(&self, levels: &[usize], pinned: bool) -> LinearSkip {
        let c = &self.config;
        let n = c.window_tokens();
        let mut a = vec![0.0; n];
        let mut sd = vec![0.0; n];
        for r in 0..n {
            let ab = self.schedule.alpha_bars()[levels[r / c.frame_stack]];
            (a[r], sd[r]) = if pinned && r == 0 {
                (1.0, 0.0)
            } else {
                (ab.sqrt(), (1.0 - ab).sqrt())
            };
        }
        if !c.skip {
            return LinearSkip {
                maps: vec![Array2::zeros((n, n)); c.dim],
                scale: Array2::ones((n, c.dim)),
            };
        }
        let mut maps = Vec::with_capacity(c.dim);
        let mut scale = Array2::zeros((n, c.dim));
        for d in 0..c.dim {
            let prior = match &self.prior {
                Some(p) => DMatrix::from_fn(n, n, |i, j| p[d][[i, j]]),
                None => DMatrix::identity(n, n),
            };
            let a_s = DMatrix::from_fn(n, n, |i, j| a[i] * prior[(i, j)]);
            let mut m = DMatrix::from_fn(n, n, |i, j| a_s[(i, j)] * a[j]);
            for i in 0..n {
                m[(i, i)] += sd[i] * sd[i] + PRIOR_JITTER;
            }
            let chol = m
                .cholesky()
                .expect("noisy window covariance is positive definite");
            let gain = chol.solve(&a_s).transpose();
            let post = &prior - &gain * &a_s;
            maps.push(Array2::from_shape_fn((n, n), |(i, j)| gain[(i, j)]));
            for i in 0..n {
                scale[[i, d]] = post[(i, i)].max(0.0).sqrt();
            }
        }
        LinearSkip { maps, scale }
    }

    /// Fits the Gaussian window prior to normalized training windows.
    pub fn fit_prior(&mut self, data: &TrainingData, stride: usize) -> Result<()> {
        let c = &self.config;
        let n = c.window_tokens();
        let mut prior = vec![Array2::<f64>::zeros((n, n)); c.dim];
        let mut count = 0.0;
        for ep in data.episodes.iter().filter(|e| e.nrows() >= n) {
            let mut o = 0;
            while o + n <= ep.nrows() {
                let w = ep.slice(s![o..o + n, ..]);
                for (d, p) in prior.iter_mut().enumerate() {
                    let col = w.column(d);
                    for i in 0..n {
                        for j in 0..n {
                            p[[i, j]] += col[i] * col[j];
                        }
                    }
                }
                count += 1.0;
                o += stride.max(1);
            }
        }
        if count == 0.0 {
            return Err(Error::Training(format!(
                "no episode holds a {n}-step window"
            )));
        }
        for p in &mut prior {
            p.mapv_inplace(|v| v / count);
        }
        self.set_prior(Some(prior))
    }

    pub fn prior(&self) -> Option<&[Array2<f64>]> {
        self.prior.as_deref()
    }

    pub fn set_prior(&mut self, prior: Option<Vec<Array2<f64>>>) -> Result<()> {
        let n = self.config.window_tokens();
        if let Some(p) = &prior {
            if p.len() != self.config.dim || p.iter().any(|m| m.dim() != (n, n)) {
                return Err(Error::ModelContract(format!(
                    "prior must hold {} matrices of {n} x {n}",
                    self.config.dim
                )));
            }
        }
        self.prior = prior;
        self.skip_cache.clear();
        Ok(())
    }

    fn check_window(&self, tokens: ArrayView2<f64>, levels: &[usize]) -> Result<()> {
        let c = &self.config;
        if tokens.dim() != (c.window_tokens(), c.dim) {
            return Err(Error::ModelContract(format!(
                "window shape {:?}, expected ({}, {})",
                tokens.dim(),
                c.window_tokens(),
                c.dim
            )));
        }
        if levels.len() != c.window {
            return Err(Error::ModelContract(format!(
                "{} frame levels for a window of {} frames",
                levels.len(),
                c.window
            )));
        }
        if let Some(&t) = levels.iter().find(|&&t| t > c.levels) {
            return Err(Error::NoiseIndex {
                index: t,
                max: c.levels,
            });
        }
        Ok(())
    }

    /// Predicts the clean window from normalized noisy tokens
    /// (`window * frame_stack` rows) and one noise index per frame.
    pub fn predict_x0(&self, window: Window<'_>, goal: Option<[f64; 2]>) -> Result<Array2<f64>> {
        self.check_window(window.tokens, window.levels)?;
        let out = self.predict_batch(&[window], goal);
        Ok(out.into_iter().next().unwrap())
    }

    fn predict_batch(&self, windows: &[Window<'_>], goal: Option<[f64; 2]>) -> Vec<Array2<f64>> {
        let c = &self.config;
        let mut input = Array2::zeros((windows.len(), c.input_width()));
        let bases = self.base_estimates(windows);
        for (i, w) in windows.iter().enumerate() {
            self.fill_input(w, &bases[i], goal, input.row_mut(i).as_slice_mut().unwrap());
        }
        let (y, _) = self.forward_trace(input);
        windows
            .iter()
            .enumerate()
            .zip(bases)
            .map(|((i, w), base)| self.combine(w, base, y.row(i).as_slice().unwrap()))
            .collect()
    }

    fn combine(&self, w: &Window<'_>, base: Array2<f64>, y: &[f64]) -> Array2<f64> {
        let c = &self.config;
        let lin = self.linear_skip(w.levels, w.pinned);
        let mut z = base;
        for r in 0..c.window_tokens() {
            for d in 0..c.dim {
                z[[r, d]] += lin.scale[[r, d]] * y[r * c.dim + d];
            }
        }
        let anchor = match w.pinned {
            true => Anchor::Pinned(w.tokens.row(0)),
            false => Anchor::Weighted(self.anchor_weights(w.levels)),
        };
        self.head(z, &anchor)
    }

    /// Per-token weights of the position anchor, proportional to the
    /// (capped) signal-to-noise ratio of each token's level.
    fn anchor_weights(&self, levels: &[usize]) -> Vec<f64> {
        let fs = self.config.frame_stack;
        let per_frame: Vec<f64> = levels
            .iter()
            .map(|&t| {
                let a = self.schedule.alpha_bars()[t];
                if a >= 1.0 {
                    ANCHOR_SNR_CAP
                } else {
                    (a / (1.0 - a)).min(ANCHOR_SNR_CAP)
                }
            })
            .collect();
        let total = per_frame.iter().sum::<f64>() * fs as f64;
        (0..levels.len() * fs)
            .map(|r| per_frame[r / fs] / total)
            .collect()
    }

    /// Output head on the combined prediction `z`: optional temporal smoothing,
    /// then optional position integration. Integrated positions are anchored
    /// at the pinned start, or so that their weighted mean matches the
    /// weighted mean of the positions in `z`.
    fn head(&self, z: Array2<f64>, anchor: &Anchor<'_>) -> Array2<f64> {
        let mut x = match &self.smoother {
            Some(p) => p.dot(&z),
            None => z.clone(),
        };
        if !self.config.integrate_positions {
            return x;
        }
        let n = x.nrows();
        for a in 0..2 {
            let ratio = self.std[2 + a] / self.std[a];
            let shift = self.mean[2 + a] / self.std[a];
            let mut cum = vec![0.0; n];
            for i in 1..n {
                cum[i] = cum[i - 1] + x[[i, 2 + a]] * ratio + shift;
            }
            let base = match anchor {
                Anchor::Pinned(row) => row[a],
                Anchor::Weighted(w) => (0..n).map(|i| w[i] * (z[[i, a]] - cum[i])).sum(),
            };
            for i in 0..n {
                x[[i, a]] = base + cum[i];
            }
        }
        x
    }

    /// Gradient through [`Self::head`] with respect to `z`.
    fn head_backward(&self, mut g: Array2<f64>, anchor: &Anchor<'_>) -> Array2<f64> {
        let n = g.nrows();
        let mut direct = Array2::zeros(g.raw_dim());
        if self.config.integrate_positions {
            for a in 0..2 {
                let ratio = self.std[2 + a] / self.std[a];
                let total: f64 = g.column(a).sum();
                let mut tail = 0.0;
                let mut tail_w = 0.0;
                for j in (1..n).rev() {
                    tail += g[[j, a]];
                    if let Anchor::Weighted(w) = anchor {
                        tail_w += w[j];
                    }
                    g[[j, 2 + a]] += (tail - total * tail_w) * ratio;
                }
                if let Anchor::Weighted(w) = anchor {
                    for i in 0..n {
                        direct[[i, a]] = total * w[i];
                    }
                }
                g.column_mut(a).fill(0.0);
            }
        }
        let g = match &self.smoother {
            Some(p) => p.t().dot(&g),
            None => g,
        };
        g + direct
    }

    /// Clean-token estimates for every frame flagged in `active`. Each frame is
    /// read from the window that ends with it (or the first window). Rows of inactive
    /// frames are copied from `tokens`. With `pin_start`, the first plan token
    /// is treated as a clean start state.
    pub fn predict_plan(
        &self,
        tokens: ArrayView2<f64>,
        frame_levels: &[usize],
        active: &[bool],
        pin_start: bool,
        goal: Option<[f64; 2]>,
    ) -> Result<Array2<f64>> {
        let c = &self.config;
        let frames = frame_levels.len();
        if tokens.nrows() != frames * c.frame_stack
            || tokens.ncols() != c.dim
            || active.len() != frames
        {
            return Err(Error::ModelContract(format!(
                "plan shape {:?} does not match {} frames of {} x {}",
                tokens.dim(),
                frames,
                c.frame_stack,
                c.dim
            )));
        }
        if frames < c.window {
            return Err(Error::ModelContract(format!(
                "plan has {frames} frames, model window needs {}",
                c.window
            )));
        }
        if let Some(&t) = frame_levels.iter().find(|&&t| t > c.levels) {
            return Err(Error::NoiseIndex {
                index: t,
                max: c.levels,
            });
        }
        let last_start = frames - c.window;
        let owner = |f: usize| (f + 1).saturating_sub(c.window).min(last_start);
        let stride = c.blend_stride;
        let on_grid = |w: &usize| (*w).is_multiple_of(stride) || *w == last_start;
        let covers = |f: usize| {
            if c.blend_windows {
                f.saturating_sub(c.window - 1)..=f.min(last_start)
            } else {
                owner(f)..=owner(f)
            }
        };
        let mut starts: Vec<usize> = (0..frames)
            .filter(|&f| active[f])
            .flat_map(|f| covers(f).filter(|w| !c.blend_windows || on_grid(w)))
            .collect();
        starts.sort_unstable();
        starts.dedup();
        let fs = c.frame_stack;
        let mut out = tokens.to_owned();
        let mut sums = Array2::<f64>::zeros(tokens.raw_dim());
        let mut weights = vec![0.0; tokens.nrows()];
        let n = c.window_tokens();
        let taper: Vec<f64> = (0..n)
            .map(|i| {
                if c.blend_windows {
                    (std::f64::consts::PI * (i as f64 + 0.5) / n as f64)
                        .sin()
                        .powi(2)
                } else {
                    1.0
                }
            })
            .collect();
        for chunk in starts.chunks(256) {
            let windows: Vec<Window<'_>> = chunk
                .iter()
                .map(|&w| Window {
                    tokens: tokens.slice(s![w * fs..(w + c.window) * fs, ..]),
                    levels: &frame_levels[w..w + c.window],
                    pinned: pin_start && w == 0,
                })
                .collect();
            let preds = self.predict_batch(&windows, goal);
            for (&w, p) in chunk.iter().zip(preds) {
                for f in (w..w + c.window).filter(|&f| active[f] && (covers(f).contains(&w))) {
                    for i in (f - w) * fs..(f - w + 1) * fs {
                        let r = w * fs + i;
                        sums.row_mut(r).scaled_add(taper[i], &p.row(i));
                        weights[r] += taper[i];
                    }
                }
            }
        }
        for f in (0..frames).filter(|&f| active[f]) {
            for r in f * fs..(f + 1) * fs {
                let row = sums.row(r).mapv(|v| v / weights[r]);
                out.row_mut(r).assign(&row);
            }
        }
        if c.integrate_positions && c.chain_frames {
            for f in (1..frames).filter(|&f| active[f] && active[f - 1]) {
                let r = f * fs;
                for a in 0..2 {
                    let step = out[[r, 2 + a]] * self.std[2 + a] / self.std[a]
                        + self.mean[2 + a] / self.std[a];
                    let shift = out[[r - 1, a]] + step - out[[r, a]];
                    out.slice_mut(s![r..r + fs, a]).mapv_inplace(|v| v + shift);
                }
            }
        }
        Ok(out)
    }

    /// Mean squared error of the x0 prediction over a batch, and its gradient
    /// with respect to every layer.
    /// Batch loss and its gradient, flattened in the order of `parameters`.
    pub fn loss_and_gradient(
        &self,
        batch: &TrainingBatch,
        snr_cap: Option<f64>,
    ) -> (f64, Vec<f64>) {
        let (loss, grads) = self.loss_and_grads(batch, snr_cap);
        let flat = grads
            .iter()
            .flat_map(|g| g.w.iter().chain(g.b.iter()).copied().collect::<Vec<_>>())
            .collect();
        (loss, flat)
    }

    fn loss_and_grads(&self, batch: &TrainingBatch, snr_cap: Option<f64>) -> (f64, Vec<Dense>) {
        let c = &self.config;
        let b = batch.x0.len();
        let mut input = Array2::zeros((b, c.input_width()));
        let mut noisy = Vec::with_capacity(b);
        for i in 0..b {
            let tok_levels: Vec<usize> = (0..c.window_tokens())
                .map(|r| batch.levels[i][r / c.frame_stack])
                .collect();
            let mut x_t = forward_noise_tokens(
                batch.x0[i].view(),
                &tok_levels,
                batch.eps[i].view(),
                &self.schedule,
            )
            .expect("levels validated when the batch was drawn");
            let pinned = batch.pinned.get(i).copied().unwrap_or(false);
            if pinned {
                x_t.row_mut(0).assign(&batch.x0[i].row(0));
            }
            noisy.push(x_t);
        }
        let windows: Vec<Window<'_>> = noisy
            .iter()
            .enumerate()
            .map(|(i, x_t)| Window {
                tokens: x_t.view(),
                levels: &batch.levels[i],
                pinned: batch.pinned.get(i).copied().unwrap_or(false),
            })
            .collect();
        let bases = self.base_estimates(&windows);
        for (i, w) in windows.iter().enumerate() {
            self.fill_input(
                w,
                &bases[i],
                batch.goals.get(i).copied(),
                input.row_mut(i).as_slice_mut().unwrap(),
            );
        }
        let (y, trace) = self.forward_trace(input);
        let width = c.output_width();
        let norm = (b * width) as f64;
        let mut dy = Array2::zeros((b, width));
        let mut loss = 0.0;
        for i in 0..b {
            let pinned = batch.pinned.get(i).copied().unwrap_or(false);
            let lin = self.linear_skip(&batch.levels[i], pinned);
            let weight: Vec<f64> = batch.levels[i]
                .iter()
                .map(|&t| {
                    snr_cap.map_or(1.0, |cap| {
                        let a = self.schedule.alpha_bars()[t];
                        1.0 + (a / (1.0 - a)).min(cap)
                    })
                })
                .collect();
            let pred = self.combine(&windows[i], bases[i].clone(), y.row(i).as_slice().unwrap());
            let mut g = Array2::zeros((c.window_tokens(), c.dim));
            for r in 0..c.window_tokens() {
                let f = r / c.frame_stack;
                for d in 0..c.dim {
                    let err = pred[[r, d]] - batch.x0[i][[r, d]];
                    loss += weight[f] * err * err;
                    g[[r, d]] = 2.0 * weight[f] * err / norm;
                }
            }
            let anchor = match pinned {
                true => Anchor::Pinned(noisy[i].row(0)),
                false => Anchor::Weighted(self.anchor_weights(&batch.levels[i])),
            };
            let g = self.head_backward(g, &anchor);
            for r in 0..c.window_tokens() {
                for d in 0..c.dim {
                    dy[[i, r * c.dim + d]] = g[[r, d]] * lin.scale[[r, d]];
                }
            }
        }
        loss /= norm;

        let n = self.layers.len();
        let mut grads: Vec<Dense> = Vec::with_capacity(n);
        let mut delta = dy;
        for l in (0..n).rev() {
            let gw = trace.post[l].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Dense { w: gw, b: gb });
            if l > 0 {
                let mut da = delta.dot(&self.layers[l].w.t());
                Zip::from(&mut da)
                    .and(&trace.pre[l - 1])
                    .for_each(|g, &z| *g *= silu_grad(z));
                delta = da;
            }
        }
        grads.reverse();
        if let Some(map) = &self.map {
            let e = c.map_embedding;
            let off = self.map_offset();
            let din = delta.dot(
                &self.layers[0]
                    .w
                    .slice(s![off..off + c.window_tokens() * e, ..])
                    .t(),
            );
            let mut gw = Array2::zeros(map.w.raw_dim());
            for (i, w) in windows.iter().enumerate() {
                let seen = self.input_tokens(w.tokens, &bases[i]);
                for (r, tok) in self.map_positions(seen).rows().into_iter().enumerate() {
                    let g = din.slice(s![i, r * e..(r + 1) * e]);
                    for (cell, wt) in self.map_corners(tok) {
                        gw.row_mut(cell).scaled_add(wt, &g);
                    }
                }
            }
            grads.push(Dense {
                w: gw,
                b: Array1::zeros(0),
            });
        }
        (loss, grads)
    }
}

/// Clean windows with their sampled per-frame noise indices and noise draws.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub x0: Vec<Array2<f64>>,
    pub levels: Vec<Vec<usize>>,
    pub eps: Vec<Array2<f64>>,
    pub goals: Vec<[f64; 2]>,
    /// Windows whose first token is given clean.
    pub pinned: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: Option<f64>,
    /// Per-window loss weight `1 + min(snr, cap)`; `None` weighs all levels equally.
    pub snr_weight_cap: Option<f64>,
    pub cosine_decay: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3_000,
            batch_size: 64,
            learning_rate: 5e-4,
            weight_decay: 1e-4,
            warmup_steps: 200,
            grad_clip: Some(1.0),
            snr_weight_cap: Some(20.0),
            cosine_decay: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Linear warmup, then cosine decay to zero when enabled.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = if self.cosine_decay && self.steps > self.warmup_steps {
            let done = step.saturating_sub(self.warmup_steps) as f64
                / (self.steps - self.warmup_steps) as f64;
            0.5 * (1.0 + (std::f64::consts::PI * done).cos())
        } else {
            1.0
        };
        self.learning_rate * warm * decay
    }
}

/// Draws per-frame noise indices: half the time one shared index in `[1, K]`
/// (flat schedules), otherwise independent indices sorted so that earlier
/// frames are cleaner (causal schedules), where index 0 marks committed frames.
fn sample_levels(rng: &mut impl Rng, window: usize, k: usize) -> Vec<usize> {
    if rng.random_bool(0.5) {
        vec![rng.random_range(1..=k); window]
    } else {
        let mut v: Vec<usize> = (0..window).map(|_| rng.random_range(0..=k)).collect();
        v.sort_unstable();
        v
    }
}

/// Normalized episodes from which windows are drawn.
pub struct TrainingData {
    episodes: Vec<Array2<f64>>,
}

impl TrainingData {
    pub fn new(episodes: Vec<Array2<f64>>) -> Self {
        Self { episodes }
    }

    pub fn from_dataset(model: &Denoiser, ds: &Dataset) -> Self {
        Self::new(
            ds.episodes
                .iter()
                .map(|e| model.normalize(e.view()))
                .collect(),
        )
    }

    pub fn sample_batch(
        &self,
        model: &Denoiser,
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<TrainingBatch> {
        let c = &model.config;
        let len = c.window_tokens();
        let usable: Vec<&Array2<f64>> = self.episodes.iter().filter(|e| e.nrows() >= len).collect();
        if usable.is_empty() {
            return Err(Error::Training(format!(
                "no episode holds a {len}-step window"
            )));
        }
        let mut batch = TrainingBatch {
            x0: Vec::with_capacity(size),
            levels: Vec::with_capacity(size),
            eps: Vec::with_capacity(size),
            goals: Vec::with_capacity(size),
            pinned: Vec::with_capacity(size),
        };
        for _ in 0..size {
            let ep = usable[rng.random_range(0..usable.len())];
            let o = rng.random_range(0..=ep.nrows() - len);
            let x0 = ep.slice(s![o..o + len, ..c.dim]).to_owned();
            let levels = sample_levels(rng, c.window, c.levels);
            let eps = Array2::from_shape_fn((len, c.dim), |_| rng.sample(StandardNormal));
            let g = ep.row(rng.random_range(o..ep.nrows()));
            batch.goals.push([g[0], g[1]]);
            batch.pinned.push(c.start_flag && rng.random_bool(0.5));
            batch.x0.push(x0);
            batch.levels.push(levels);
            batch.eps.push(eps);
        }
        Ok(batch)
    }
}

struct AdamW {
    m: Vec<Dense>,
    v: Vec<Dense>,
    step: usize,
}

impl AdamW {
    fn new(model: &Denoiser) -> Self {
        let zeros = || {
            model
                .blocks()
                .map(|l| Dense {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect::<Vec<_>>()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut Denoiser, grads: &[Dense], lr: f64, wd: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step as i32);
        let c2 = 1.0 - B2.powi(self.step as i32);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            let step = (*m / c1) / ((*v / c2).sqrt() + EPS);
            *p -= lr * (step + wd * *p);
        };
        for (l, layer) in model.blocks_mut().enumerate() {
            Zip::from(&mut layer.w)
                .and(&grads[l].w)
                .and(&mut self.m[l].w)
                .and(&mut self.v[l].w)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            Zip::from(&mut layer.b)
                .and(&grads[l].b)
                .and(&mut self.m[l].b)
                .and(&mut self.v[l].b)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Trains in place and returns the loss of every step.
pub fn train(model: &mut Denoiser, data: &TrainingData, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if data.episodes.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Training("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = data.sample_batch(model, cfg.batch_size, &mut rng)?;
        let (loss, mut grads) = model.loss_and_grads(&batch, cfg.snr_weight_cap);
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if let Some(clip) = cfg.grad_clip {
            let norm: f64 = grads
                .iter()
                .map(|g| g.w.iter().chain(g.b.iter()).map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let f = clip / norm;
                for g in &mut grads {
                    g.w.mapv_inplace(|v| v * f);
                    g.b.mapv_inplace(|v| v * f);
                }
            }
        }
        opt.apply(model, &grads, cfg.learning_rate_at(step), cfg.weight_decay);
        losses.push(loss);
    }
    Ok(losses)
}

/// Builds a model, sets normalization from the dataset and trains it.
pub fn train_on_dataset(
    config: DenoiserConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Denoiser, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    if dataset.dim != config.dim {
        return Err(Error::ModelContract(format!(
            "dataset dim {} != model dim {}",
            dataset.dim, config.dim
        )));
    }
    let mut config = config;
    if config.map_embedding > 0 && config.map_extent.is_none() {
        let extent = |d: usize| {
            let max = dataset
                .episodes
                .iter()
                .flat_map(|e| e.column(d).to_vec())
                .fold(0.0f64, f64::max);
            max.floor() as usize + 1
        };
        config.map_extent = Some([extent(0), extent(1)]);
    }
    let mut model = Denoiser::new(config, cfg.seed)?;
    model.set_normalization(dataset.mean.clone(), dataset.std.clone())?;
    let data = TrainingData::from_dataset(&model, dataset);
    if model.config.fit_prior {
        model.fit_prior(&data, PRIOR_STRIDE)?;
    }
    if model.config.memory_windows > 0 {
        model.fit_memory(&data, model.config.memory_windows)?;
    }
    let losses = train(&mut model, &data, cfg)?;
    Ok((model, losses))
}

impl Denoiser {
    pub fn to_bytes(&self) -> Vec<u8> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            precision: "f64".into(),
            config: self.config.clone(),
            mean: self.mean.clone(),
            std: self.std.clone(),
            prior: self.prior.clone(),
            memory: self.memory.as_ref().map(|(m, _)| m.clone()),
            params: self.parameters(),
        };
        bincode::serialize(&ck).expect("checkpoint serializes")
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let ck: Checkpoint = bincode::deserialize(bytes).map_err(|e| fmt(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(fmt(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        if ck.precision != "f64" {
            return Err(fmt(format!("unsupported precision {}", ck.precision)));
        }
        let mut model = Denoiser::new(ck.config, 0)?;
        model.set_normalization(ck.mean, ck.std)?;
        model.set_prior(ck.prior)?;
        model.set_memory(ck.memory)?;
        model.set_parameters(&ck.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
