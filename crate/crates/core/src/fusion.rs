//! Reference kernels for routed low-rank scale experts and dense-feature
//! cross-attention fusion, with hand-written backward passes.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::rng::SplitMix64;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch { what: &'static str, expected: usize, got: usize },
    #[error("temporal patch {tau} does not divide {frames} frames")]
    IndivisibleT { frames: usize, tau: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, FusionError>;

fn expect_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(FusionError::DimMismatch { what, expected, got })
    }
}

pub fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.normal() * scale)
}

pub fn random_vector(rng: &mut SplitMix64, len: usize, scale: f64) -> Vector {
    Vector::from_fn(len, |_, _| rng.normal() * scale)
}

fn add_row_bias(m: &mut Mat, b: &Vector) {
    for (j, bj) in b.iter().enumerate() {
        for i in 0..m.nrows() {
            m[(i, j)] += bj;
        }
    }
}

fn column_sums(m: &Mat) -> Vector {
    Vector::from_fn(m.ncols(), |j, _| m.column(j).iter().sum())
}

/// Two-layer perceptron with a ReLU between the layers, applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// hidden × input
    pub w1: Mat,
    pub b1: Vector,
    /// output × hidden
    pub w2: Mat,
    pub b2: Vector,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Mat,
    pre: Mat,
    hidden: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Mat,
    pub b1: Vector,
    pub w2: Mat,
    pub b2: Vector,
}

impl Mlp {
    pub fn new(w1: Mat, b1: Vector, w2: Mat, b2: Vector) -> Result<Self> {
        let mlp = Mlp { w1, b1, w2, b2 };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn random(rng: &mut SplitMix64, input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            w1: random_matrix(rng, hidden, input, 1.0 / (input as f64).sqrt()),
            b1: random_vector(rng, hidden, 0.1),
            w2: random_matrix(rng, output, hidden, 1.0 / (hidden as f64).sqrt()),
            b2: random_vector(rng, output, 0.1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        expect_dim("mlp first bias", self.w1.nrows(), self.b1.len())?;
        expect_dim("mlp second layer input", self.w1.nrows(), self.w2.ncols())?;
        expect_dim("mlp second bias", self.w2.nrows(), self.b2.len())
    }

    fn forward_cached(&self, x: &Mat) -> Result<(Mat, MlpCache)> {
        self.validate()?;
        expect_dim("mlp input", self.input_dim(), x.ncols())?;
        let mut pre = x * self.w1.transpose();
        add_row_bias(&mut pre, &self.b1);
        let hidden = pre.map(|v| v.max(0.0));
        let mut y = &hidden * self.w2.transpose();
        add_row_bias(&mut y, &self.b2);
        Ok((y, MlpCache { input: x.clone(), pre, hidden }))
    }

    pub fn forward_rows(&self, x: &Mat) -> Result<Mat> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    /// Parameter gradients and the input gradient for upstream `dy`.
    pub fn backward(&self, cache: &MlpCache, dy: &Mat) -> (MlpGrads, Mat) {
        let w2 = dy.transpose() * &cache.hidden;
        let b2 = column_sums(dy);
        let mut dh = dy * &self.w2;
        dh.zip_apply(&cache.pre, |g, p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = dh.transpose() * &cache.input;
        let b1 = column_sums(&dh);
        let dx = &dh * &self.w1;
        (MlpGrads { w1, b1, w2, b2 }, dx)
    }
}

pub fn softmax(z: &Vector) -> Vector {
    let max = z.max();
    let e = z.map(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn softmax_rows(s: &Mat) -> Mat {
    let mut out = s.clone();
    for mut row in out.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Mixing weights over the experts: softmax of the router's logits.
pub fn router_weights(x: &Vector, router: &Mlp) -> Result<Vector> {
    let row = Mat::from_row_slice(1, x.len(), x.as_slice());
    let logits = router.forward_rows(&row)?;
    Ok(softmax(&logits.row(0).transpose()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    /// r × d
    pub a: Mat,
    /// d × r
    pub b: Mat,
    pub alpha: f64,
}

impl LoraExpert {
    pub fn new(a: Mat, b: Mat, alpha: f64) -> Result<Self> {
        let e = LoraExpert { a, b, alpha };
        e.validate(e.a.ncols())?;
        Ok(e)
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let r = self.rank();
        if r == 0 || r >= d {
            return Err(FusionError::InvalidConfig(format!("rank {r} must satisfy 1 <= r < {d}")));
        }
        expect_dim("expert A columns", d, self.a.ncols())?;
        expect_dim("expert B rows", d, self.b.nrows())?;
        expect_dim("expert B columns", r, self.b.ncols())
    }

    /// Dense `B A`.
    pub fn delta(&self) -> Mat {
        &self.b * &self.a
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertStack {
    pub w0: Mat,
    pub experts: Vec<LoraExpert>,
    pub router: Mlp,
}

impl ExpertStack {
    pub fn new(w0: Mat, experts: Vec<LoraExpert>, router: Mlp) -> Result<Self> {
        let s = ExpertStack { w0, experts, router };
        s.validate()?;
        Ok(s)
    }

    pub fn random(rng: &mut SplitMix64, d: usize, m: usize, rank: usize, hidden: usize) -> Result<Self> {
        let w0 = random_matrix(rng, d, d, 1.0 / (d as f64).sqrt());
        let experts = (0..m)
            .map(|_| LoraExpert {
                a: random_matrix(rng, rank, d, 1.0 / (d as f64).sqrt()),
                b: random_matrix(rng, d, rank, 1.0 / (rank as f64).sqrt()),
                alpha: rng.uniform(0.5, 2.0),
            })
            .collect();
        let router = Mlp::random(rng, d, hidden, m);
        ExpertStack::new(w0, experts, router)
    }

    pub fn dim(&self) -> usize {
        self.w0.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        expect_dim("base matrix columns", d, self.w0.ncols())?;
        let Some(first) = self.experts.first() else {
            return Err(FusionError::InvalidConfig("at least one expert is required".into()));
        };
        for e in &self.experts {
            e.validate(d)?;
            expect_dim("expert rank", first.rank(), e.rank())?;
        }
        expect_dim("router input", d, self.router.input_dim())?;
        expect_dim("router output", self.experts.len(), self.router.output_dim())?;
        self.router.validate()
    }
}

fn lora_term(x: &Vector, e: &LoraExpert, weight: f64) -> Vector {
    (&e.b * (&e.a * x)) * weight
}

/// `W0 x + sum_i (alpha_i lambda_i) B_i (A_i x)`.
pub fn expert_forward(x: &Vector, stack: &ExpertStack, lambda: &Vector) -> Result<Vector> {
    stack.validate()?;
    expect_dim("input", stack.dim(), x.len())?;
    expect_dim("mixing weights", stack.experts.len(), lambda.len())?;
    let mut h = &stack.w0 * x;
    for (e, l) in stack.experts.iter().zip(lambda.iter()) {
        h += lora_term(x, e, e.alpha * l);
    }
    Ok(h)
}

/// Plain one-adapter forward `W0 x + alpha B (A x)`.
pub fn single_expert_forward(x: &Vector, w0: &Mat, expert: &LoraExpert) -> Result<Vector> {
    expect_dim("input", w0.ncols(), x.len())?;
    expert.validate(w0.nrows())?;
    let mut h = w0 * x;
    h += lora_term(x, expert, expert.alpha * 1.0);
    Ok(h)
}

/// Forward pass with mixing weights taken from the stack's own router.
pub fn routed_forward(x: &Vector, stack: &ExpertStack) -> Result<(Vector, Vector)> {
    let lambda = router_weights(x, &stack.router)?;
    let h = expert_forward(x, stack, &lambda)?;
    Ok((h, lambda))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrads {
    pub w0: Mat,
    pub a: Vec<Mat>,
    pub b: Vec<Mat>,
    pub alpha: Vec<f64>,
    pub router: MlpGrads,
    pub x: Vector,
}

/// Gradients of `g . routed_forward(x)` with respect to every parameter and
/// the input.
pub fn routed_backward(x: &Vector, stack: &ExpertStack, g: &Vector) -> Result<ExpertGrads> {
    stack.validate()?;
    expect_dim("input", stack.dim(), x.len())?;
    expect_dim("upstream gradient", stack.dim(), g.len())?;
    let row = Mat::from_row_slice(1, x.len(), x.as_slice());
    let (logits, cache) = stack.router.forward_cached(&row)?;
    let lambda = softmax(&logits.row(0).transpose());

    let mut dx = stack.w0.transpose() * g;
    let w0 = g * x.transpose();
    let m = stack.experts.len();
    let (mut da, mut db, mut dalpha) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    let mut dlambda = Vector::zeros(m);
    for (i, e) in stack.experts.iter().enumerate() {
        let s = e.alpha * lambda[i];
        let u = &e.a * x;
        let v = &e.b * &u;
        let bt_g = e.b.transpose() * g;
        db.push(g * u.transpose() * s);
        da.push(&bt_g * x.transpose() * s);
        let gv = g.dot(&v);
        dalpha.push(lambda[i] * gv);
        dlambda[i] = e.alpha * gv;
        dx += e.a.transpose() * bt_g * s;
    }
    let inner = dlambda.dot(&lambda);
    let dz = lambda.zip_map(&dlambda, |l, d| l * (d - inner));
    let dz_row = Mat::from_row_slice(1, m, dz.as_slice());
    let (router, dx_router) = stack.router.backward(&cache, &dz_row);
    dx += dx_router.row(0).transpose();
    Ok(ExpertGrads { w0, a: da, b: db, alpha: dalpha, router, x: dx })
}

/// Mean over consecutive blocks of `tau` rows.
pub fn temporal_pool(f: &Mat, tau: usize) -> Result<Mat> {
    let t = f.nrows();
    if tau == 0 || !t.is_multiple_of(tau) {
        return Err(FusionError::IndivisibleT { frames: t, tau });
    }
    if tau == 1 {
        return Ok(f.clone());
    }
    let blocks = t / tau;
    let mut out = Mat::zeros(blocks, f.ncols());
    for b in 0..blocks {
        for j in 0..f.ncols() {
            let sum: f64 = (0..tau).map(|k| f[(b * tau + k, j)]).sum();
            out[(b, j)] = sum / tau as f64;
        }
    }
    Ok(out)
}

/// Row-wise perceptron mapping depth channels onto visual channels.
pub fn channel_map(f: &Mat, mlp: &Mlp) -> Result<Mat> {
    mlp.forward_rows(f)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

impl AttentionLayer {
    pub fn random(rng: &mut SplitMix64, d: usize) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        AttentionLayer {
            wq: random_matrix(rng, d, d, s),
            wk: random_matrix(rng, d, d, s),
            wv: random_matrix(rng, d, d, s),
            wo: random_matrix(rng, d, d, s),
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        for (what, m) in [("query", &self.wq), ("key", &self.wk), ("value", &self.wv), ("output", &self.wo)] {
            expect_dim(what, d, m.nrows())?;
            expect_dim(what, d, m.ncols())?;
        }
        Ok(())
    }
}

/// Where the identity shortcut around the attention stack goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Residual {
    /// Added once after the last layer.
    #[default]
    Once,
    /// Added around every layer.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub layers: Vec<AttentionLayer>,
    pub residual: Residual,
    pub tau: usize,
    pub channel: Mlp,
}

impl FusionParams {
    pub fn random(rng: &mut SplitMix64, d_v: usize, d_d: usize, hidden: usize, layers: usize, tau: usize) -> Self {
        let channel = Mlp::random(rng, d_d, hidden, d_v);
        let layers = (0..layers).map(|_| AttentionLayer::random(rng, d_v)).collect();
        FusionParams { layers, residual: Residual::Once, tau, channel }
    }

    pub fn dim(&self) -> usize {
        self.channel.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(FusionError::InvalidConfig("temporal patch must be at least 1".into()));
        }
        if self.layers.is_empty() {
            return Err(FusionError::InvalidConfig("at least one attention layer is required".into()));
        }
        self.channel.validate()?;
        self.layers.iter().try_for_each(|l| l.validate(self.dim()))
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    a: Mat,
    c: Mat,
}

fn layer_forward(layer: &AttentionLayer, x: &Mat, fd: &Mat) -> (Mat, LayerCache) {
    let scale = 1.0 / (layer.wq.nrows() as f64).sqrt();
    let q = x * layer.wq.transpose();
    let k = fd * layer.wk.transpose();
    let v = fd * layer.wv.transpose();
    let a = softmax_rows(&((&q * k.transpose()) * scale));
    let c = &a * &v;
    let o = &c * layer.wo.transpose();
    (o, LayerCache { x: x.clone(), q, k, v, a, c })
}

fn check_fusion_inputs(fv: &Mat, fd: &Mat, params: &FusionParams) -> Result<()> {
    params.validate()?;
    expect_dim("visual features", params.dim(), fv.ncols())?;
    expect_dim("depth features", params.dim(), fd.ncols())?;
    if fd.nrows() == 0 {
        return Err(FusionError::DimMismatch { what: "depth feature rows", expected: 1, got: 0 });
    }
    Ok(())
}

fn fuse_cached(fv: &Mat, fd: &Mat, params: &FusionParams) -> (Mat, Vec<LayerCache>) {
    let mut x = fv.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (o, cache) = layer_forward(layer, &x, fd);
        caches.push(cache);
        x = match params.residual {
            Residual::Once => o,
            Residual::PerLayer => x + o,
        };
    }
    let out = match params.residual {
        Residual::Once => x + fv,
        Residual::PerLayer => x,
    };
    (out, caches)
}

/// Stacked single-head cross-attention with visual queries and depth
/// keys/values, plus the identity shortcut.
pub fn cross_attention_fuse(fv: &Mat, fd: &Mat, params: &FusionParams) -> Result<Mat> {
    check_fusion_inputs(fv, fd, params)?;
    Ok(fuse_cached(fv, fd, params).0)
}

/// Attention matrix of the first layer (rows: visual tokens, columns: depth
/// tokens).
pub fn attention_weights(fv: &Mat, fd: &Mat, params: &FusionParams) -> Result<Mat> {
    check_fusion_inputs(fv, fd, params)?;
    Ok(layer_forward(&params.layers[0], fv, fd).1.a)
}

/// Full depth branch: pool raw per-frame depth features in time, map their
/// channels, then fuse into the visual features.
pub fn fuse_features(fv: &Mat, depth_frames: &Mat, params: &FusionParams) -> Result<Mat> {
    let pooled = temporal_pool(depth_frames, params.tau)?;
    let mapped = channel_map(&pooled, &params.channel)?;
    cross_attention_fuse(fv, &mapped, params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub fv: Mat,
    pub fd: Mat,
    pub layers: Vec<LayerGrads>,
}

/// Gradients of `sum(G .* cross_attention_fuse(fv, fd))`.
pub fn cross_attention_backward(fv: &Mat, fd: &Mat, params: &FusionParams, g: &Mat) -> Result<FusionGrads> {
    check_fusion_inputs(fv, fd, params)?;
    expect_dim("upstream gradient rows", fv.nrows(), g.nrows())?;
    expect_dim("upstream gradient columns", fv.ncols(), g.ncols())?;
    let (_, caches) = fuse_cached(fv, fd, params);
    let mut dfv = match params.residual {
        Residual::Once => g.clone(),
        Residual::PerLayer => Mat::zeros(fv.nrows(), fv.ncols()),
    };
    let mut dfd = Mat::zeros(fd.nrows(), fd.ncols());
    let mut dx = g.clone();
    let mut layer_grads = Vec::with_capacity(params.layers.len());
    for (layer, c) in params.layers.iter().zip(&caches).rev() {
        let scale = 1.0 / (layer.wq.nrows() as f64).sqrt();
        let d_o = &dx;
        let wo = d_o.transpose() * &c.c;
        let dc = d_o * &layer.wo;
        let da = &dc * c.v.transpose();
        let dv = c.a.transpose() * &dc;
        let mut ds = c.a.clone();
        for i in 0..ds.nrows() {
            let inner: f64 = da.row(i).dot(&c.a.row(i));
            for j in 0..ds.ncols() {
                ds[(i, j)] = c.a[(i, j)] * (da[(i, j)] - inner);
            }
        }
        let dq = (&ds * &c.k) * scale;
        let dk = (ds.transpose() * &c.q) * scale;
        let wq = dq.transpose() * &c.x;
        let wk = dk.transpose() * fd;
        let wv = dv.transpose() * fd;
        dfd += &dk * &layer.wk + &dv * &layer.wv;
        let dx_layer = &dq * &layer.wq;
        dx = match params.residual {
            Residual::Once => dx_layer,
            Residual::PerLayer => dx_layer + &dx,
        };
        layer_grads.push(LayerGrads { wq, wk, wv, wo });
    }
    dfv += dx;
    layer_grads.reverse();
    Ok(FusionGrads { fv: dfv, fd: dfd, layers: layer_grads })
}

/// Central finite-difference gradient of `loss` over `n` scalar parameters
/// reachable through `param`.
pub fn finite_difference<T: Clone>(
    base: &T,
    n: usize,
    step: f64,
    param: impl Fn(&mut T, usize) -> &mut f64,
    loss: impl Fn(&T) -> f64,
) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut plus = base.clone();
            *param(&mut plus, i) += step;
            let mut minus = base.clone();
            *param(&mut minus, i) -= step;
            (loss(&plus) - loss(&minus)) / (2.0 * step)
        })
        .collect()
}

/// Largest elementwise `|a - f| / max(|a|, |f|, 1e-6)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| {
            let err = (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
            if err.is_nan() { f64::INFINITY } else { err }
        })
        .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        CheckOutcome { name: name.into(), error, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckConfig {
    pub dim: usize,
    pub experts: usize,
    pub rank: usize,
    pub hidden: usize,
    pub layers: usize,
    pub frames: usize,
    pub tau: usize,
    pub tokens: usize,
    pub seed: u64,
    /// Corrupt one analytic gradient entry so the harness must fail.
    pub inject_fault: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { dim: 16, experts: 4, rank: 4, hidden: 16, layers: 2, frames: 8, tau: 2, tokens: 6, seed: 0, inject_fault: false }
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn flat(m: &Mat) -> Vec<f64> {
    m.as_slice().to_vec()
}

fn grad_check<T: Clone>(
    name: &str,
    analytic: &[f64],
    base: &T,
    param: impl Fn(&mut T, usize) -> &mut f64,
    loss: impl Fn(&T) -> f64,
) -> CheckOutcome {
    let numeric = finite_difference(base, analytic.len(), FD_STEP, param, loss);
    CheckOutcome::new(name, max_relative_error(analytic, &numeric), FD_TOLERANCE)
}

/// Every equivalence and gradient check of the kernels on one random
/// configuration.
pub fn run_checks(cfg: &CheckConfig) -> Result<Vec<CheckOutcome>> {
    if cfg.dim < 2 || cfg.experts == 0 || cfg.rank == 0 || cfg.rank >= cfg.dim || cfg.hidden == 0 || cfg.layers == 0 {
        return Err(FusionError::InvalidConfig(format!("unusable check configuration {cfg:?}")));
    }
    if cfg.tau == 0 || !cfg.frames.is_multiple_of(cfg.tau) {
        return Err(FusionError::IndivisibleT { frames: cfg.frames, tau: cfg.tau });
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let d = cfg.dim;
    let stack = ExpertStack::random(&mut rng, d, cfg.experts, cfg.rank, cfg.hidden)?;
    let mut out = Vec::new();

    // Equivalences of the expert kernel.
    let mut dense_err: f64 = 0.0;
    let mut onehot_err: f64 = 0.0;
    let mut sum_err: f64 = 0.0;
    let mut linear_err: f64 = 0.0;
    for _ in 0..16 {
        let x = random_vector(&mut rng, d, 1.0);
        let lambda = router_weights(&x, &stack.router)?;
        sum_err = sum_err.max((lambda.sum() - 1.0).abs());
        let h = expert_forward(&x, &stack, &lambda)?;
        let mut dense = stack.w0.clone();
        for (e, l) in stack.experts.iter().zip(lambda.iter()) {
            dense += e.delta() * (e.alpha * l);
        }
        dense_err = dense_err.max(max_abs_diff(h.as_slice(), (dense * &x).as_slice()));
        for i in 0..stack.experts.len() {
            let mut onehot = Vector::zeros(stack.experts.len());
            onehot[i] = 1.0;
            let a = expert_forward(&x, &stack, &onehot)?;
            let b = single_expert_forward(&x, &stack.w0, &stack.experts[i])?;
            onehot_err = onehot_err.max(max_abs_diff(a.as_slice(), b.as_slice()));
        }
        let y = random_vector(&mut rng, d, 1.0);
        let (p, q) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
        let lhs = expert_forward(&(&x * p + &y * q), &stack, &lambda)?;
        let rhs = expert_forward(&x, &stack, &lambda)? * p + expert_forward(&y, &stack, &lambda)? * q;
        linear_err = linear_err.max(max_abs_diff(lhs.as_slice(), rhs.as_slice()));
    }
    out.push(CheckOutcome::new("expert_dense_equivalence", dense_err, 1e-10));
    out.push(CheckOutcome::new("expert_one_hot_exact", onehot_err, 0.0));
    out.push(CheckOutcome::new("router_simplex", sum_err, 1e-12));
    out.push(CheckOutcome::new("expert_linearity", linear_err, 1e-10));

    // Expert gradients through the router.
    let x = random_vector(&mut rng, d, 1.0);
    let g = random_vector(&mut rng, d, 1.0);
    let mut grads = routed_backward(&x, &stack, &g)?;
    if cfg.inject_fault {
        grads.w0[(0, 0)] += 0.5 + grads.w0[(0, 0)].abs();
    }
    let loss = |s: &ExpertStack, x: &Vector| routed_forward(x, s).map(|(h, _)| h.dot(&g)).unwrap_or(f64::NAN);
    out.push(grad_check("expert_grad_w0", &flat(&grads.w0), &stack, |s, i| &mut s.w0.as_mut_slice()[i], |s| loss(s, &x)));
    for i in 0..stack.experts.len() {
        out.push(grad_check(
            &format!("expert_grad_a{i}"),
            &flat(&grads.a[i]),
            &stack,
            |s, k| &mut s.experts[i].a.as_mut_slice()[k],
            |s| loss(s, &x),
        ));
        out.push(grad_check(
            &format!("expert_grad_b{i}"),
            &flat(&grads.b[i]),
            &stack,
            |s, k| &mut s.experts[i].b.as_mut_slice()[k],
            |s| loss(s, &x),
        ));
    }
    out.push(grad_check("expert_grad_alpha", &grads.alpha, &stack, |s, i| &mut s.experts[i].alpha, |s| loss(s, &x)));
    out.push(grad_check("router_grad_w1", &flat(&grads.router.w1), &stack, |s, i| &mut s.router.w1.as_mut_slice()[i], |s| loss(s, &x)));
    out.push(grad_check("router_grad_b1", grads.router.b1.as_slice(), &stack, |s, i| &mut s.router.b1[i], |s| loss(s, &x)));
    out.push(grad_check("router_grad_w2", &flat(&grads.router.w2), &stack, |s, i| &mut s.router.w2.as_mut_slice()[i], |s| loss(s, &x)));
    out.push(grad_check("router_grad_b2", grads.router.b2.as_slice(), &stack, |s, i| &mut s.router.b2[i], |s| loss(s, &x)));
    out.push(grad_check("expert_grad_input", grads.x.as_slice(), &x, |x, i| &mut x[i], |x| loss(&stack, x)));

    // Channel map.
    let d_depth = d.div_ceil(2).max(2);
    let mut params = FusionParams::random(&mut rng, d, d_depth, cfg.hidden, cfg.layers, cfg.tau);
    let raw = random_matrix(&mut rng, cfg.frames, d_depth, 1.0);
    let pooled = temporal_pool(&raw, cfg.tau)?;
    let (mapped, cache) = params.channel.forward_cached(&pooled)?;
    let gm = random_matrix(&mut rng, mapped.nrows(), mapped.ncols(), 1.0);
    let (cg, cdx) = params.channel.backward(&cache, &gm);
    let mloss = |m: &Mlp, f: &Mat| m.forward_rows(f).map(|y| y.component_mul(&gm).sum()).unwrap_or(f64::NAN);
    let ch = &params.channel;
    out.push(grad_check("channel_grad_w1", &flat(&cg.w1), ch, |m, i| &mut m.w1.as_mut_slice()[i], |m| mloss(m, &pooled)));
    out.push(grad_check("channel_grad_b1", cg.b1.as_slice(), ch, |m, i| &mut m.b1[i], |m| mloss(m, &pooled)));
    out.push(grad_check("channel_grad_w2", &flat(&cg.w2), ch, |m, i| &mut m.w2.as_mut_slice()[i], |m| mloss(m, &pooled)));
    out.push(grad_check("channel_grad_b2", cg.b2.as_slice(), ch, |m, i| &mut m.b2[i], |m| mloss(m, &pooled)));
    out.push(grad_check("channel_grad_input", &flat(&cdx), &pooled, |f, i| &mut f.as_mut_slice()[i], |f| mloss(ch, f)));

    // Cross-attention, both residual wirings.
    let fv = random_matrix(&mut rng, cfg.tokens, d, 1.0);
    let fd = mapped;
    let ga = random_matrix(&mut rng, cfg.tokens, d, 1.0);
    let mut row_err: f64 = 0.0;
    for row in attention_weights(&fv, &fd, &params)?.row_iter() {
        row_err = row_err.max((row.sum() - 1.0).abs());
    }
    out.push(CheckOutcome::new("attention_rows_sum_to_one", row_err, 1e-12));

    let fused = cross_attention_fuse(&fv, &fd, &params)?;
    let perm: Vec<usize> = {
        let mut p: Vec<usize> = (0..fd.nrows()).collect();
        rng.shuffle(&mut p);
        p
    };
    let fd_perm = Mat::from_fn(fd.nrows(), fd.ncols(), |i, j| fd[(perm[i], j)]);
    let fused_perm = cross_attention_fuse(&fv, &fd_perm, &params)?;
    out.push(CheckOutcome::new("attention_key_permutation", max_abs_diff(fused.as_slice(), fused_perm.as_slice()), 1e-12));

    let mut zero_v = params.clone();
    for l in &mut zero_v.layers {
        l.wv.fill(0.0);
    }
    let exact = cross_attention_fuse(&fv, &fd, &zero_v)? == fv;
    out.push(CheckOutcome::new("zero_value_projection_identity", if exact { 0.0 } else { 1.0 }, 0.0));

    for residual in [Residual::Once, Residual::PerLayer] {
        params.residual = residual;
        let tag = match residual {
            Residual::Once => "once",
            Residual::PerLayer => "per_layer",
        };
        let grads = cross_attention_backward(&fv, &fd, &params, &ga)?;
        let floss = |p: &FusionParams, v: &Mat, k: &Mat| cross_attention_fuse(v, k, p).map(|y| y.component_mul(&ga).sum()).unwrap_or(f64::NAN);
        out.push(grad_check(&format!("attention_{tag}_grad_visual"), &flat(&grads.fv), &fv, |m, i| &mut m.as_mut_slice()[i], |m| floss(&params, m, &fd)));
        out.push(grad_check(&format!("attention_{tag}_grad_depth"), &flat(&grads.fd), &fd, |m, i| &mut m.as_mut_slice()[i], |m| floss(&params, &fv, m)));
        for (l, lg) in grads.layers.iter().enumerate() {
            let named = [("wq", &lg.wq), ("wk", &lg.wk), ("wv", &lg.wv), ("wo", &lg.wo)];
            for (which, (name, analytic)) in named.into_iter().enumerate() {
                out.push(grad_check(
                    &format!("attention_{tag}_grad_layer{l}_{name}"),
                    &flat(analytic),
                    &params,
                    |p, i| {
                        let layer = &mut p.layers[l];
                        let m = match which {
                            0 => &mut layer.wq,
                            1 => &mut layer.wk,
                            2 => &mut layer.wv,
                            _ => &mut layer.wo,
                        };
                        &mut m.as_mut_slice()[i]
                    },
                    |p| floss(p, &fv, &fd),
                ));
            }
        }
    }
    Ok(out)
}
