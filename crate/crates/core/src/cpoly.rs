//! Low-rank adapters and the C-Poly adapter-mixture forward rule.
//!
//! For task `t` the output is
//!
//! ```text
//! y = sum_i w_i^t * phi_i(x)  +  w^t * phi^t(x)
//! ```
//!
//! where `phi_i` are the `A` shared adapters, `phi^t` is the adapter owned by
//! task `t`, and the weights come from row `t` of the allocation matrix
//! `W = [W_A | W_B]` (shape `T x (A + T)`). `w^t` is the diagonal entry
//! `W_B[t, t]`; off-diagonal entries of `W_B` must be zero so a task never
//! reads another task's adapter.
//!
//! Everything is `f64`. Gradients are available in closed form and can be
//! verified against central differences with [`grad_check`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CpolyError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("task index {t} out of range for {tasks} tasks")]
    TaskIndex { t: usize, tasks: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// `scale * up * (down * x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    down: DMatrix<f64>,
    up: DMatrix<f64>,
    scale: f64,
}

impl LowRankAdapter {
    /// `down` is `r x d_in`, `up` is `d_out x r`.
    pub fn new(down: DMatrix<f64>, up: DMatrix<f64>, scale: f64) -> Result<Self, CpolyError> {
        if down.nrows() == 0 {
            return Err(CpolyError::InvalidParameter("rank must be at least 1".into()));
        }
        if up.ncols() != down.nrows() {
            return Err(CpolyError::Dimension(format!(
                "up is {}x{} but down has rank {}",
                up.nrows(),
                up.ncols(),
                down.nrows()
            )));
        }
        if !all_finite(&down) || !all_finite(&up) || !scale.is_finite() {
            return Err(CpolyError::NonFinite("adapter entries".into()));
        }
        Ok(Self { down, up, scale })
    }

    /// Zero `up`, the usual LoRA initialisation: the adapter starts as a no-op.
    pub fn zero_init(down: DMatrix<f64>, d_out: usize) -> Result<Self, CpolyError> {
        let r = down.nrows();
        Self::new(down, DMatrix::zeros(d_out, r), 1.0)
    }

    /// Entries uniform in `[-1, 1)`.
    pub fn random<R: Rng>(rng: &mut R, d_in: usize, d_out: usize, rank: usize, scale: f64) -> Result<Self, CpolyError> {
        let down = DMatrix::from_fn(rank, d_in, |_, _| rng.random_range(-1.0..1.0));
        let up = DMatrix::from_fn(d_out, rank, |_, _| rng.random_range(-1.0..1.0));
        Self::new(down, up, scale)
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.down.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.up.nrows()
    }

    pub fn down(&self) -> &DMatrix<f64> {
        &self.down
    }

    pub fn up(&self) -> &DMatrix<f64> {
        &self.up
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>, CpolyError> {
        if x.len() != self.d_in() {
            return Err(CpolyError::Dimension(format!(
                "adapter expects input of length {}, got {}",
                self.d_in(),
                x.len()
            )));
        }
        Ok(&self.up * (&self.down * x) * self.scale)
    }
}

pub fn adapter_apply(adapter: &LowRankAdapter, x: &DVector<f64>) -> Result<DVector<f64>, CpolyError> {
    adapter.apply(x)
}

/// How the shared-adapter weights `W_A[t, i]` are turned into mixture weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardMode {
    /// Raw allocation entries, exactly the mixture formula.
    #[default]
    Direct,
    /// `sigmoid(W_A[t, i])`.
    Eval,
    /// Gumbel-sigmoid samples of `W_A[t, i]` at the config temperature.
    Train { seed: u64 },
}

/// Shape parameters for random configs and the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpolyShape {
    pub tasks: usize,
    pub shared: usize,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub tau: f64,
    pub scale: f64,
}

impl Default for CpolyShape {
    fn default() -> Self {
        Self {
            tasks: 3,
            shared: 4,
            rank: 4,
            d_in: 8,
            d_out: 8,
            tau: 1.0,
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpolyConfig {
    shared: Vec<LowRankAdapter>,
    task: Vec<LowRankAdapter>,
    allocation: DMatrix<f64>,
    tau: f64,
}

impl CpolyConfig {
    /// One task adapter per task (`B = 1`).
    pub fn new(
        shared: Vec<LowRankAdapter>,
        task: Vec<LowRankAdapter>,
        allocation: DMatrix<f64>,
        tau: f64,
    ) -> Result<Self, CpolyError> {
        let t_count = task.len();
        if t_count == 0 {
            return Err(CpolyError::InvalidParameter("at least one task is required".into()));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(CpolyError::InvalidParameter(format!("temperature must be positive, got {tau}")));
        }
        let a = shared.len();
        if allocation.shape() != (t_count, a + t_count) {
            return Err(CpolyError::Dimension(format!(
                "allocation must be {}x{}, got {}x{}",
                t_count,
                a + t_count,
                allocation.nrows(),
                allocation.ncols()
            )));
        }
        if !all_finite(&allocation) {
            return Err(CpolyError::NonFinite("allocation matrix".into()));
        }
        for row in 0..t_count {
            for col in 0..t_count {
                if row != col && allocation[(row, a + col)] != 0.0 {
                    return Err(CpolyError::InvalidParameter(format!(
                        "W_B[{row}, {col}] is non-zero; task {row} may only use its own adapter"
                    )));
                }
            }
        }
        let first = &task[0];
        let (d_in, d_out, rank) = (first.d_in(), first.d_out(), first.rank());
        for (kind, ad) in shared.iter().map(|s| ("shared", s)).chain(task.iter().map(|s| ("task", s))) {
            if ad.d_in() != d_in || ad.d_out() != d_out {
                return Err(CpolyError::Dimension(format!(
                    "{kind} adapter is {}->{}, expected {d_in}->{d_out}",
                    ad.d_in(),
                    ad.d_out()
                )));
            }
            if ad.rank() != rank {
                return Err(CpolyError::Dimension(format!(
                    "{kind} adapter has rank {}, expected {rank}",
                    ad.rank()
                )));
            }
        }
        Ok(Self {
            shared,
            task,
            allocation,
            tau,
        })
    }

    /// Adapter entries uniform in `[-1, 1)`, `W_A` uniform in `[-2, 2)` and
    /// `W_B` diagonal uniform in `[0.5, 1.5)`.
    pub fn random<R: Rng>(rng: &mut R, shape: &CpolyShape) -> Result<Self, CpolyError> {
        let adapter = |rng: &mut R| LowRankAdapter::random(rng, shape.d_in, shape.d_out, shape.rank, shape.scale);
        let shared = (0..shape.shared).map(|_| adapter(rng)).collect::<Result<Vec<_>, _>>()?;
        let task = (0..shape.tasks).map(|_| adapter(rng)).collect::<Result<Vec<_>, _>>()?;
        let a = shape.shared;
        let mut w = DMatrix::zeros(shape.tasks, a + shape.tasks);
        for t in 0..shape.tasks {
            for i in 0..a {
                w[(t, i)] = rng.random_range(-2.0..2.0);
            }
            w[(t, a + t)] = rng.random_range(0.5..1.5);
        }
        Self::new(shared, task, w, shape.tau)
    }

    pub fn tasks(&self) -> usize {
        self.task.len()
    }

    pub fn shared_count(&self) -> usize {
        self.shared.len()
    }

    pub fn rank(&self) -> usize {
        self.task[0].rank()
    }

    pub fn d_in(&self) -> usize {
        self.task[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.task[0].d_out()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn shared_adapters(&self) -> &[LowRankAdapter] {
        &self.shared
    }

    pub fn task_adapters(&self) -> &[LowRankAdapter] {
        &self.task
    }

    pub fn allocation(&self) -> &DMatrix<f64> {
        &self.allocation
    }

    /// `W_A[t, i]`.
    pub fn shared_weight(&self, t: usize, i: usize) -> f64 {
        self.allocation[(t, i)]
    }

    /// `w^t = W_B[t, t]`.
    pub fn task_weight(&self, t: usize) -> f64 {
        self.allocation[(t, self.shared.len() + t)]
    }

    pub fn shape(&self) -> CpolyShape {
        CpolyShape {
            tasks: self.tasks(),
            shared: self.shared_count(),
            rank: self.rank(),
            d_in: self.d_in(),
            d_out: self.d_out(),
            tau: self.tau,
            scale: self.task[0].scale,
        }
    }

    /// Returns a copy with task adapter `t` replaced.
    pub fn with_task_adapter(&self, t: usize, adapter: LowRankAdapter) -> Result<Self, CpolyError> {
        self.check_task(t)?;
        let mut task = self.task.clone();
        task[t] = adapter;
        Self::new(self.shared.clone(), task, self.allocation.clone(), self.tau)
    }

    fn check_task(&self, t: usize) -> Result<(), CpolyError> {
        if t >= self.tasks() {
            return Err(CpolyError::TaskIndex { t, tasks: self.tasks() });
        }
        Ok(())
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<(), CpolyError> {
        if x.len() != self.d_in() {
            return Err(CpolyError::Dimension(format!(
                "input has length {}, config expects {}",
                x.len(),
                self.d_in()
            )));
        }
        Ok(())
    }
}

/// Mixture weights for task `t`: shared weights and their derivatives with
/// respect to `W_A[t, i]`, then `w^t`.
fn mixture(config: &CpolyConfig, t: usize, mode: ForwardMode) -> Result<(Vec<(f64, f64)>, f64), CpolyError> {
    let shared = (0..config.shared_count())
        .map(|i| {
            let l = config.shared_weight(t, i);
            Ok(match mode {
                ForwardMode::Direct => (l, 1.0),
                ForwardMode::Eval => {
                    let s = sigmoid(l);
                    (s, s * (1.0 - s))
                }
                ForwardMode::Train { seed } => {
                    let s = gumbel_sigmoid(l, config.tau, derive_seed(seed, t, i))?;
                    (s, s * (1.0 - s) / config.tau)
                }
            })
        })
        .collect::<Result<Vec<_>, CpolyError>>()?;
    Ok((shared, config.task_weight(t)))
}

/// The weights task `t` applies to each shared adapter under `mode`.
pub fn shared_mixture_weights(config: &CpolyConfig, t: usize, mode: ForwardMode) -> Result<Vec<f64>, CpolyError> {
    config.check_task(t)?;
    Ok(mixture(config, t, mode)?.0.into_iter().map(|(w, _)| w).collect())
}

/// The mixture formula with raw allocation weights.
pub fn cpoly_forward(config: &CpolyConfig, t: usize, x: &DVector<f64>) -> Result<DVector<f64>, CpolyError> {
    cpoly_forward_mode(config, t, x, ForwardMode::Direct)
}

pub fn cpoly_forward_mode(
    config: &CpolyConfig,
    t: usize,
    x: &DVector<f64>,
    mode: ForwardMode,
) -> Result<DVector<f64>, CpolyError> {
    config.check_task(t)?;
    config.check_input(x)?;
    let (shared, wt) = mixture(config, t, mode)?;
    let mut y = config.task[t].apply(x)? * wt;
    for (adapter, (w, _)) in config.shared.iter().zip(shared) {
        y += adapter.apply(x)? * w;
    }
    Ok(y)
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-entry seed for `W_A[t, i]`.
pub fn derive_seed(seed: u64, t: usize, i: usize) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(t as u64)) ^ i as u64)
}

/// Two independent standard Gumbel draws from `seed`.
pub fn gumbel_pair(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = || {
        let u: f64 = rng.sample(Open01);
        -(-u.ln()).ln()
    };
    let g1 = g();
    (g1, g())
}

const SAMPLE_LO: f64 = f64::MIN_POSITIVE;
const SAMPLE_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// `sigmoid((logit + G1 - G2) / tau)` with Gumbel noise drawn from `seed`.
///
/// Results are clamped to the open interval; at small `tau` the exact
/// sigmoid would otherwise round to 0 or 1.
pub fn gumbel_sigmoid(logit: f64, tau: f64, seed: u64) -> Result<f64, CpolyError> {
    if !(tau > 0.0) {
        return Err(CpolyError::InvalidParameter(format!("temperature must be positive, got {tau}")));
    }
    if !logit.is_finite() {
        return Err(CpolyError::NonFinite(format!("logit {logit}")));
    }
    let (g1, g2) = gumbel_pair(seed);
    Ok(sigmoid((logit + g1 - g2) / tau).clamp(SAMPLE_LO, SAMPLE_HI))
}

/// Denominator floor for [`grad_check`].
pub const GRAD_FLOOR: f64 = 1e-6;

/// A scalar function of a flat parameter vector with a known gradient.
pub trait Differentiable {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// Maximum over coordinates of `|g - fd| / max(|g|, |fd|, GRAD_FLOOR)`, where
/// `g` is the analytic gradient and `fd` the central difference with step
/// `eps`. The floor keeps coordinates whose true gradient is near zero from
/// reporting central-difference roundoff as a relative error.
pub fn grad_check(f: &dyn Differentiable, x: &[f64], eps: f64) -> Result<f64, CpolyError> {
    if !(eps > 0.0) {
        return Err(CpolyError::InvalidParameter(format!("step must be positive, got {eps}")));
    }
    let analytic = f.gradient(x);
    if analytic.len() != x.len() {
        return Err(CpolyError::Dimension(format!(
            "gradient has {} entries for {} coordinates",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for (k, g) in analytic.iter().enumerate() {
        probe[k] = x[k] + eps;
        let hi = f.value(&probe);
        probe[k] = x[k] - eps;
        let lo = f.value(&probe);
        probe[k] = x[k];
        let fd = (hi - lo) / (2.0 * eps);
        if !g.is_finite() || !fd.is_finite() {
            return Err(CpolyError::NonFinite(format!(
                "coordinate {k}: analytic {g}, finite difference {fd}"
            )));
        }
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(GRAD_FLOOR));
    }
    Ok(worst)
}

/// Gradients of `c . cpoly_forward_mode(config, t, x, mode)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpolyGradients {
    /// `W_A[t, 0..A]`.
    pub shared_weights: Vec<f64>,
    /// `W_B[t, t]`.
    pub task_weight: f64,
    pub shared_down: Vec<DMatrix<f64>>,
    pub shared_up: Vec<DMatrix<f64>>,
    pub task_down: DMatrix<f64>,
    pub task_up: DMatrix<f64>,
    pub input: DVector<f64>,
}

pub fn cpoly_gradients(
    config: &CpolyConfig,
    t: usize,
    x: &DVector<f64>,
    c: &DVector<f64>,
    mode: ForwardMode,
) -> Result<CpolyGradients, CpolyError> {
    config.check_task(t)?;
    config.check_input(x)?;
    if c.len() != config.d_out() {
        return Err(CpolyError::Dimension(format!(
            "projection has length {}, output is {}",
            c.len(),
            config.d_out()
        )));
    }
    let (shared, wt) = mixture(config, t, mode)?;
    // d(c . w s up down x) = w s (up^T c) x^T for down, w s c (down x)^T for up.
    let parts = |ad: &LowRankAdapter, w: f64| {
        let h = &ad.down * x;
        let back = ad.up.transpose() * c;
        let k = w * ad.scale;
        (
            c.dot(&(&ad.up * &h)) * ad.scale,
            &back * x.transpose() * k,
            c * h.transpose() * k,
            ad.down.transpose() * back * k,
        )
    };
    let mut input = DVector::zeros(config.d_in());
    let mut out = CpolyGradients {
        shared_weights: Vec::with_capacity(shared.len()),
        task_weight: 0.0,
        shared_down: Vec::with_capacity(shared.len()),
        shared_up: Vec::with_capacity(shared.len()),
        task_down: DMatrix::zeros(0, 0),
        task_up: DMatrix::zeros(0, 0),
        input: DVector::zeros(0),
    };
    for (ad, (w, dw)) in config.shared.iter().zip(shared) {
        let (proj, g_down, g_up, g_x) = parts(ad, w);
        out.shared_weights.push(dw * proj);
        out.shared_down.push(g_down);
        out.shared_up.push(g_up);
        input += g_x;
    }
    let (proj, g_down, g_up, g_x) = parts(&config.task[t], wt);
    out.task_weight = proj;
    out.task_down = g_down;
    out.task_up = g_up;
    input += g_x;
    out.input = input;
    Ok(out)
}

/// One group of parameters of the mixture formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    /// Row `t` of `W`: the `A` shared entries followed by `W_B[t, t]`.
    AllocationRow,
    SharedDown(usize),
    SharedUp(usize),
    TaskDown,
    TaskUp,
    Input,
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamClass::AllocationRow => f.write_str("allocation row"),
            ParamClass::SharedDown(i) => write!(f, "shared[{i}].down"),
            ParamClass::SharedUp(i) => write!(f, "shared[{i}].up"),
            ParamClass::TaskDown => f.write_str("task.down"),
            ParamClass::TaskUp => f.write_str("task.up"),
            ParamClass::Input => f.write_str("input"),
        }
    }
}

/// `c . cpoly_forward_mode(..)` as a function of one parameter class.
#[derive(Debug, Clone)]
pub struct CpolyProbe<'a> {
    pub config: &'a CpolyConfig,
    pub t: usize,
    pub x: DVector<f64>,
    pub c: DVector<f64>,
    pub mode: ForwardMode,
    pub class: ParamClass,
}

fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

fn unflatten(like: &DMatrix<f64>, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(like.nrows(), like.ncols(), v)
}

impl CpolyProbe<'_> {
    /// Current values of the probed parameters.
    pub fn params(&self) -> Vec<f64> {
        let cfg = self.config;
        match self.class {
            ParamClass::AllocationRow => {
                let mut v: Vec<f64> = (0..cfg.shared_count()).map(|i| cfg.shared_weight(self.t, i)).collect();
                v.push(cfg.task_weight(self.t));
                v
            }
            ParamClass::SharedDown(i) => flatten(&cfg.shared[i].down),
            ParamClass::SharedUp(i) => flatten(&cfg.shared[i].up),
            ParamClass::TaskDown => flatten(&cfg.task[self.t].down),
            ParamClass::TaskUp => flatten(&cfg.task[self.t].up),
            ParamClass::Input => self.x.iter().copied().collect(),
        }
    }

    fn rebuild(&self, p: &[f64]) -> (CpolyConfig, DVector<f64>) {
        let mut cfg = self.config.clone();
        let mut x = self.x.clone();
        let t = self.t;
        match self.class {
            ParamClass::AllocationRow => {
                let a = cfg.shared.len();
                for (i, v) in p[..a].iter().enumerate() {
                    cfg.allocation[(t, i)] = *v;
                }
                cfg.allocation[(t, a + t)] = p[a];
            }
            ParamClass::SharedDown(i) => cfg.shared[i].down = unflatten(&cfg.shared[i].down, p),
            ParamClass::SharedUp(i) => cfg.shared[i].up = unflatten(&cfg.shared[i].up, p),
            ParamClass::TaskDown => cfg.task[t].down = unflatten(&cfg.task[t].down, p),
            ParamClass::TaskUp => cfg.task[t].up = unflatten(&cfg.task[t].up, p),
            ParamClass::Input => x = DVector::from_column_slice(p),
        }
        (cfg, x)
    }
}

impl Differentiable for CpolyProbe<'_> {
    fn value(&self, p: &[f64]) -> f64 {
        let (cfg, x) = self.rebuild(p);
        let y = cpoly_forward_mode(&cfg, self.t, &x, self.mode).expect("probe keeps shapes valid");
        self.c.dot(&y)
    }

    fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let (cfg, x) = self.rebuild(p);
        let g = cpoly_gradients(&cfg, self.t, &x, &self.c, self.mode).expect("probe keeps shapes valid");
        match self.class {
            ParamClass::AllocationRow => {
                let mut v = g.shared_weights;
                v.push(g.task_weight);
                v
            }
            ParamClass::SharedDown(i) => flatten(&g.shared_down[i]),
            ParamClass::SharedUp(i) => flatten(&g.shared_up[i]),
            ParamClass::TaskDown => flatten(&g.task_down),
            ParamClass::TaskUp => flatten(&g.task_up),
            ParamClass::Input => g.input.iter().copied().collect(),
        }
    }
}

/// Runs [`grad_check`] over every parameter class for task `t`, returning
/// the worst relative error per class.
pub fn check_all_gradients(
    config: &CpolyConfig,
    t: usize,
    x: &DVector<f64>,
    c: &DVector<f64>,
    mode: ForwardMode,
    eps: f64,
) -> Result<Vec<(ParamClass, f64)>, CpolyError> {
    config.check_task(t)?;
    config.check_input(x)?;
    let mut classes = vec![ParamClass::AllocationRow];
    for i in 0..config.shared_count() {
        classes.push(ParamClass::SharedDown(i));
        classes.push(ParamClass::SharedUp(i));
    }
    classes.extend([ParamClass::TaskDown, ParamClass::TaskUp, ParamClass::Input]);
    classes
        .into_iter()
        .map(|class| {
            let probe = CpolyProbe {
                config,
                t,
                x: x.clone(),
                c: c.clone(),
                mode,
                class,
            };
            Ok((class, grad_check(&probe, &probe.params(), eps)?))
        })
        .collect()
}

/// Manifest written next to the parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpolyManifest {
    #[serde(rename = "T")]
    pub tasks: usize,
    #[serde(rename = "A")]
    pub shared: usize,
    #[serde(rename = "B")]
    pub per_task: usize,
    pub r: usize,
    pub tau: f64,
    pub d_in: usize,
    pub d_out: usize,
    pub scale: f64,
    /// Parameter file, relative to the manifest.
    pub params: String,
}

fn io_err(path: &Path, e: impl fmt::Display) -> CpolyError {
    CpolyError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_block(out: &mut String, name: &str, m: &DMatrix<f64>) {
    out.push_str(&format!("# {name} {} {}\n", m.nrows(), m.ncols()));
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:?}", m[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

/// Serializes the parameters: `# name rows cols` headers, each followed by
/// one line per row. Floats round-trip exactly.
pub fn params_to_string(config: &CpolyConfig) -> String {
    let mut out = String::new();
    write_block(&mut out, "allocation", &config.allocation);
    for (kind, list) in [("shared", &config.shared), ("task", &config.task)] {
        for (i, a) in list.iter().enumerate() {
            write_block(&mut out, &format!("{kind}.{i}.down"), &a.down);
            write_block(&mut out, &format!("{kind}.{i}.up"), &a.up);
        }
    }
    out
}

fn parse_blocks(text: &str, path: &str) -> Result<Vec<(String, DMatrix<f64>)>, CpolyError> {
    let fmt_err = |line: usize, message: String| CpolyError::Format {
        path: path.into(),
        line,
        message,
    };
    let mut blocks = Vec::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    while let Some((no, header)) = lines.next() {
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [hash, name, rows, cols] = parts.as_slice() else {
            return Err(fmt_err(no + 1, "expected `# name rows cols`".into()));
        };
        if *hash != "#" {
            return Err(fmt_err(no + 1, "expected `# name rows cols`".into()));
        }
        let rows: usize = rows.parse().map_err(|_| fmt_err(no + 1, "bad row count".into()))?;
        let cols: usize = cols.parse().map_err(|_| fmt_err(no + 1, "bad column count".into()))?;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rno, row) = lines
                .next()
                .ok_or_else(|| fmt_err(no + 1, format!("block {name} is truncated")))?;
            let before = values.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| fmt_err(rno + 1, format!("bad number `{tok}`")))?;
                values.push(v);
            }
            if values.len() - before != cols {
                return Err(fmt_err(rno + 1, format!("expected {cols} values")));
            }
        }
        blocks.push((name.to_string(), DMatrix::from_row_slice(rows, cols, &values)));
    }
    Ok(blocks)
}

pub fn params_from_str(manifest: &CpolyManifest, text: &str, origin: &str) -> Result<CpolyConfig, CpolyError> {
    if manifest.per_task != 1 {
        return Err(CpolyError::InvalidParameter(format!(
            "only one adapter per task is supported, manifest has B = {}",
            manifest.per_task
        )));
    }
    let mut blocks = parse_blocks(text, origin)?.into_iter();
    let mut take = |expect: &str| -> Result<DMatrix<f64>, CpolyError> {
        match blocks.next() {
            Some((name, m)) if name == expect => Ok(m),
            Some((name, _)) => Err(CpolyError::Format {
                path: origin.into(),
                line: 0,
                message: format!("expected block {expect}, found {name}"),
            }),
            None => Err(CpolyError::Format {
                path: origin.into(),
                line: 0,
                message: format!("missing block {expect}"),
            }),
        }
    };
    let allocation = take("allocation")?;
    let mut adapters = |kind: &str, n: usize| -> Result<Vec<LowRankAdapter>, CpolyError> {
        (0..n)
            .map(|i| {
                let down = take(&format!("{kind}.{i}.down"))?;
                let up = take(&format!("{kind}.{i}.up"))?;
                LowRankAdapter::new(down, up, manifest.scale)
            })
            .collect()
    };
    let shared = adapters("shared", manifest.shared)?;
    let task = adapters("task", manifest.tasks)?;
    let config = CpolyConfig::new(shared, task, allocation, manifest.tau)?;
    let shape = config.shape();
    if (shape.rank, shape.d_in, shape.d_out) != (manifest.r, manifest.d_in, manifest.d_out) {
        return Err(CpolyError::Dimension(format!(
            "manifest says r={} {}->{}, parameters are r={} {}->{}",
            manifest.r, manifest.d_in, manifest.d_out, shape.rank, shape.d_in, shape.d_out
        )));
    }
    Ok(config)
}

pub fn manifest_for(config: &CpolyConfig, params_file: &str) -> CpolyManifest {
    let s = config.shape();
    CpolyManifest {
        tasks: s.tasks,
        shared: s.shared,
        per_task: 1,
        r: s.rank,
        tau: s.tau,
        d_in: s.d_in,
        d_out: s.d_out,
        scale: s.scale,
        params: params_file.into(),
    }
}

/// Writes `<stem>.toml` (manifest) and `<stem>.params` into `dir`.
pub fn save_config(config: &CpolyConfig, dir: &Path, stem: &str) -> Result<PathBuf, CpolyError> {
    if config.task.iter().chain(&config.shared).any(|a| a.scale != config.task[0].scale) {
        return Err(CpolyError::InvalidParameter("all adapters must share one scale to be saved".into()));
    }
    let params_name = format!("{stem}.params");
    let manifest = manifest_for(config, &params_name);
    let manifest_path = dir.join(format!("{stem}.toml"));
    let body = toml::to_string(&manifest).map_err(|e| io_err(&manifest_path, e))?;
    crate::jsonl::write_text_atomic(&dir.join(&params_name), &params_to_string(config))
        .map_err(|e| io_err(&dir.join(&params_name), e))?;
    crate::jsonl::write_text_atomic(&manifest_path, &body).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn load_config(manifest_path: &Path) -> Result<CpolyConfig, CpolyError> {
    let text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: CpolyManifest = toml::from_str(&text).map_err(|e| CpolyError::Format {
        path: manifest_path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let params_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.params);
    let params = fs::read_to_string(&params_path).map_err(|e| io_err(&params_path, e))?;
    params_from_str(&manifest, &params, &params_path.display().to_string())
}
