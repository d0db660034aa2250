//! Relational distillation losses with exact student gradients.
//!
//! A relation matrix holds `R[i][j] = r(a_i, b_j)` for one agent pair
//! (teacher-teacher, student-student or teacher-student) under one geometry.
//! A scheme compares two such matrices entrywise with the Huber element loss:
//!
//! | scheme  | left | right |
//! |---------|------|-------|
//! | `TtSs`  | TT   | SS    |
//! | `TsSs`  | TS   | SS    |
//! | `TtTs`  | TT   | TS    |
//!
//! `Direct` skips relations and compares `t_i` and `s_i` coordinatewise.
//! The teacher batch is a constant throughout; every gradient returned here
//! is `dL/dS`.

use crate::error::{Error, Result};
use crate::manifold::{
    cosine_grad_into, cosine_relation, embed_in_ball, embed_in_ball_vjp, euclidean_grad_into,
    euclidean_unchecked, hyperbolic_grad_into, hyperbolic_unchecked, Curvature, DistanceKind,
};
use crate::numeric::Matrix;
use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

/// `N x C` batch of descriptors, one agent per row.
pub type EmbeddingBatch = Matrix;
/// `N x C` matrix of `dL/ds_{i,k}`.
pub type GradientBatch = Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentPair {
    TT,
    SS,
    TS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    TtSs,
    TsSs,
    TtTs,
    Direct,
}

impl Scheme {
    pub const RELATIONAL: [Scheme; 3] = [Scheme::TtSs, Scheme::TsSs, Scheme::TtTs];

    pub fn tag(self) -> &'static str {
        match self {
            Scheme::TtSs => "tt_ss",
            Scheme::TsSs => "ts_ss",
            Scheme::TtTs => "tt_ts",
            Scheme::Direct => "direct",
        }
    }

    fn pairs(self) -> Option<(AgentPair, AgentPair)> {
        match self {
            Scheme::TtSs => Some((AgentPair::TT, AgentPair::SS)),
            Scheme::TsSs => Some((AgentPair::TS, AgentPair::SS)),
            Scheme::TtTs => Some((AgentPair::TT, AgentPair::TS)),
            Scheme::Direct => None,
        }
    }
}

/// Geometry selector without parameters; combined with the configured
/// curvature it yields a [`DistanceKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Manifold {
    Euclidean,
    Cosine,
    Hyperbolic,
}

impl Manifold {
    pub const ALL: [Manifold; 3] = [Manifold::Euclidean, Manifold::Cosine, Manifold::Hyperbolic];

    pub fn kind(self, curvature: Curvature) -> DistanceKind {
        match self {
            Manifold::Euclidean => DistanceKind::Euclidean,
            Manifold::Cosine => DistanceKind::Cosine,
            Manifold::Hyperbolic => DistanceKind::Hyperbolic(curvature),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Manifold::Euclidean => "euc",
            Manifold::Cosine => "cos",
            Manifold::Hyperbolic => "hyp",
        }
    }
}

impl FromStr for Manifold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "euc" | "euclidean" => Ok(Manifold::Euclidean),
            "cos" | "cosine" => Ok(Manifold::Cosine),
            "hyp" | "hyperbolic" => Ok(Manifold::Hyperbolic),
            other => Err(Error::InvalidConfig(format!("unknown manifold '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Which objective to train: task only, or task plus the self, cross or
/// both distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    None,
    S,
    C,
    SC,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::None, Variant::S, Variant::C, Variant::SC];

    fn uses_self(self) -> bool {
        matches!(self, Variant::S | Variant::SC)
    }

    fn uses_cross(self) -> bool {
        matches!(self, Variant::C | Variant::SC)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::None => "none",
            Variant::S => "s",
            Variant::C => "c",
            Variant::SC => "sc",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Variant::None),
            "s" => Ok(Variant::S),
            "c" => Ok(Variant::C),
            "sc" => Ok(Variant::SC),
            other => Err(Error::InvalidConfig(format!("unknown variant '{other}'"))),
        }
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub curvature: Curvature,
    pub huber_delta: f64,
    pub reduction: Reduction,
    /// Include the `i == j` terms of each relational sum.
    pub include_diagonal: bool,
    /// Divide each relation matrix by the mean of its off-diagonal entries.
    pub rkd_normalize: bool,
    /// Factor applied to raw descriptors before the origin exponential map.
    pub hyp_prescale: f64,
    pub manifolds: Vec<Manifold>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_s: 1.0,
            lambda_c: 1.0,
            curvature: Curvature::default(),
            huber_delta: 1.0,
            reduction: Reduction::Mean,
            include_diagonal: true,
            rkd_normalize: false,
            hyp_prescale: 1.0,
            manifolds: Manifold::ALL.to_vec(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda_s.is_finite() && self.lambda_s >= 0.0) {
            return bad(format!("lambda_s = {} must be finite and >= 0", self.lambda_s));
        }
        if !(self.lambda_c.is_finite() && self.lambda_c >= 0.0) {
            return bad(format!("lambda_c = {} must be finite and >= 0", self.lambda_c));
        }
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return bad(format!("huber delta = {} must be > 0", self.huber_delta));
        }
        if !(self.hyp_prescale.is_finite() && self.hyp_prescale > 0.0) {
            return bad(format!("hyp_prescale = {} must be > 0", self.hyp_prescale));
        }
        if self.manifolds.is_empty() {
            return bad("manifold set is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    pub data: Matrix,
    pub kind: DistanceKind,
    pub pair: AgentPair,
}

/// A scalar loss and its gradient w.r.t. the student batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: GradientBatch,
}

impl LossValue {
    fn zero(rows: usize, cols: usize) -> Self {
        Self {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
        }
    }

    fn accumulate(&mut self, weight: f64, other: &LossValue) {
        self.value += weight * other.value;
        self.grad.axpy(weight, &other.grad);
    }
}

/// Smooth-L1 element loss.
pub fn huber(a: f64, b: f64, delta: f64) -> f64 {
    let d = (a - b).abs();
    if d <= delta {
        0.5 * d * d
    } else {
        delta * (d - 0.5 * delta)
    }
}

/// `d huber(a, b) / d a`; the derivative in `b` is its negation.
pub fn huber_grad(a: f64, b: f64, delta: f64) -> f64 {
    let d = a - b;
    if d.abs() <= delta {
        d
    } else {
        delta * d.signum()
    }
}

fn check_batches(t: &Matrix, s: &Matrix) -> Result<()> {
    if t.rows() != s.rows() {
        return Err(Error::BatchMismatch {
            teacher: t.rows(),
            student: s.rows(),
        });
    }
    if t.cols() != s.cols() {
        return Err(Error::DimensionMismatch {
            expected: t.cols(),
            actual: s.cols(),
        });
    }
    if t.rows() < 2 {
        return Err(Error::InvalidConfig(format!(
            "batch needs at least 2 agents, got {}",
            t.rows()
        )));
    }
    if t.cols() == 0 {
        return Err(Error::Empty("embedding dimension is zero"));
    }
    Ok(())
}

/// Rows in the space where `kind` is evaluated.
fn prepare<'a>(x: &'a Matrix, kind: DistanceKind, cfg: &DistillConfig) -> Cow<'a, Matrix> {
    match kind {
        DistanceKind::Hyperbolic(c) => {
            let mut out = Matrix::zeros(x.rows(), x.cols());
            for i in 0..x.rows() {
                out.row_mut(i)
                    .copy_from_slice(&embed_in_ball(x.row(i), c, cfg.hyp_prescale));
            }
            Cow::Owned(out)
        }
        _ => Cow::Borrowed(x),
    }
}

fn pair_value(kind: DistanceKind, x: &[f64], y: &[f64]) -> Result<f64> {
    match kind {
        DistanceKind::Euclidean => Ok(euclidean_unchecked(x, y)),
        DistanceKind::Cosine => cosine_relation(x, y),
        DistanceKind::Hyperbolic(c) => Ok(hyperbolic_unchecked(x, y, c)),
    }
}

/// Writes the gradients of `d_kind(x, y)` into `gx` and `gy`.
fn pair_grad(kind: DistanceKind, x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]) -> Result<()> {
    match kind {
        DistanceKind::Euclidean => {
            euclidean_grad_into(x, y, gx);
            gy.iter_mut().zip(gx.iter()).for_each(|(b, a)| *b = -a);
        }
        DistanceKind::Cosine => {
            cosine_grad_into(x, y, gx, gy)?;
        }
        DistanceKind::Hyperbolic(c) => {
            hyperbolic_grad_into(x, y, c, gx, gy);
        }
    }
    Ok(())
}

/// Raw relation matrix between already-prepared rows, plus the normalizer
/// (1.0 when normalization is off).
fn raw_relation(
    a: &Matrix,
    b: &Matrix,
    kind: DistanceKind,
    cfg: &DistillConfig,
    context: &'static str,
) -> Result<(Matrix, f64)> {
    let n = a.rows();
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = pair_value(kind, a.row(i), b.row(j))?;
            if !v.is_finite() {
                return Err(Error::NonFinite { context, i, j });
            }
            r.set(i, j, v);
        }
    }
    let mu = if cfg.rkd_normalize {
        let mu = off_diagonal_mean(&r);
        if mu.is_nan() || mu < 1e-12 {
            return Err(Error::DegenerateNormalization(mu));
        }
        r.scale(1.0 / mu);
        mu
    } else {
        1.0
    };
    Ok((r, mu))
}

fn off_diagonal_mean(r: &Matrix) -> f64 {
    let n = r.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += r.get(i, j);
            }
        }
    }
    sum / (n * (n - 1)) as f64
}

/// Relation matrix `R[i][j] = d_kind(a_i, b_j)`.
///
/// Under the hyperbolic kind both batches are first scaled by
/// `cfg.hyp_prescale`, mapped with the origin exponential map and projected
/// into the ball. With `cfg.rkd_normalize` the matrix is divided by its
/// off-diagonal mean.
pub fn relation_matrix(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
    kind: DistanceKind,
    pair: AgentPair,
    cfg: &DistillConfig,
) -> Result<RelationMatrix> {
    check_batches(a, b)?;
    let (pa, pb) = (prepare(a, kind, cfg), prepare(b, kind, cfg));
    let (data, _) = raw_relation(&pa, &pb, kind, cfg, "relation matrix")?;
    Ok(RelationMatrix { data, kind, pair })
}

/// Number of summed terms for a scheme on a batch of `n` agents of
/// dimension `dim`.
pub fn term_count(scheme: Scheme, n: usize, dim: usize, include_diagonal: bool) -> usize {
    match scheme {
        Scheme::Direct => n * dim,
        _ if include_diagonal => n * n,
        _ => n * (n - 1),
    }
}

/// One scheme under one geometry. `kind` is ignored by [`Scheme::Direct`].
pub fn scheme_loss(
    t: &EmbeddingBatch,
    s: &EmbeddingBatch,
    scheme: Scheme,
    kind: DistanceKind,
    cfg: &DistillConfig,
) -> Result<LossValue> {
    check_batches(t, s)?;
    cfg.validate()?;
    let Some((left, right)) = scheme.pairs() else {
        return direct_loss(t, s, cfg);
    };

    let n = t.rows();
    let tp = prepare(t, kind, cfg);
    let sp = prepare(s, kind, cfg);
    let relation = |pair: AgentPair| -> Result<(Matrix, f64)> {
        match pair {
            AgentPair::TT => raw_relation(&tp, &tp, kind, cfg, "teacher-teacher relation"),
            AgentPair::SS => raw_relation(&sp, &sp, kind, cfg, "student-student relation"),
            AgentPair::TS => raw_relation(&tp, &sp, kind, cfg, "teacher-student relation"),
        }
    };
    let (r_left, mu_left) = relation(left)?;
    let (r_right, mu_right) = relation(right)?;

    let count = term_count(scheme, n, t.cols(), cfg.include_diagonal);
    let weight = match cfg.reduction {
        Reduction::Mean => 1.0 / count as f64,
        Reduction::Sum => 1.0,
    };
    let delta = cfg.huber_delta;

    let mut value = 0.0;
    let mut g_left = Matrix::zeros(n, n);
    let mut g_right = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j && !cfg.include_diagonal {
                continue;
            }
            let (a, b) = (r_left.get(i, j), r_right.get(i, j));
            value += huber(a, b, delta);
            let g = huber_grad(a, b, delta) * weight;
            g_left.set(i, j, g);
            g_right.set(i, j, -g);
        }
    }
    value *= weight;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "scheme loss",
            i: 0,
            j: 0,
        });
    }

    let mut grad_mapped = Matrix::zeros(n, s.cols());
    for (pair, upstream, r, mu) in [
        (left, g_left, &r_left, mu_left),
        (right, g_right, &r_right, mu_right),
    ] {
        if pair == AgentPair::TT {
            continue;
        }
        let upstream = if cfg.rkd_normalize {
            unnormalize_grad(&upstream, r, mu)
        } else {
            upstream
        };
        backprop_relation(pair, &tp, &sp, kind, &upstream, &mut grad_mapped)?;
    }

    let grad = match kind {
        DistanceKind::Hyperbolic(c) => pull_back_ball(s, &grad_mapped, c, cfg.hyp_prescale),
        _ => grad_mapped,
    };
    Ok(LossValue { value, grad })
}

/// Gradient w.r.t. the unnormalized matrix given the gradient `g` w.r.t.
/// `r_norm = r / mu`.
fn unnormalize_grad(g: &Matrix, r_norm: &Matrix, mu: f64) -> Matrix {
    let n = g.rows();
    let inner: f64 = g
        .as_slice()
        .iter()
        .zip(r_norm.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    let shift = inner / (mu * (n * (n - 1)) as f64);
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut v = g.get(i, j) / mu;
            if i != j {
                v -= shift;
            }
            out.set(i, j, v);
        }
    }
    out
}

fn backprop_relation(
    pair: AgentPair,
    tp: &Matrix,
    sp: &Matrix,
    kind: DistanceKind,
    upstream: &Matrix,
    grad: &mut Matrix,
) -> Result<()> {
    let n = sp.rows();
    let dim = sp.cols();
    let (mut gx, mut gy) = (vec![0.0; dim], vec![0.0; dim]);
    for i in 0..n {
        for j in 0..n {
            let w = upstream.get(i, j);
            if w == 0.0 {
                continue;
            }
            match pair {
                AgentPair::SS => {
                    pair_grad(kind, sp.row(i), sp.row(j), &mut gx, &mut gy)?;
                    grad.row_mut(i).iter_mut().zip(&gx).for_each(|(g, v)| *g += w * v);
                    grad.row_mut(j).iter_mut().zip(&gy).for_each(|(g, v)| *g += w * v);
                }
                AgentPair::TS => {
                    pair_grad(kind, tp.row(i), sp.row(j), &mut gx, &mut gy)?;
                    grad.row_mut(j).iter_mut().zip(&gy).for_each(|(g, v)| *g += w * v);
                }
                AgentPair::TT => {}
            }
        }
    }
    Ok(())
}

fn pull_back_ball(raw: &Matrix, grad_mapped: &Matrix, c: Curvature, prescale: f64) -> Matrix {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let g = embed_in_ball_vjp(raw.row(i), c, prescale, grad_mapped.row(i));
        out.row_mut(i).copy_from_slice(&g);
    }
    out
}

/// Sample-wise supervision: Huber applied to every coordinate of `t_i - s_i`.
/// Mean reduction averages over all `N * C` elements.
fn direct_loss(t: &Matrix, s: &Matrix, cfg: &DistillConfig) -> Result<LossValue> {
    let count = term_count(Scheme::Direct, t.rows(), t.cols(), cfg.include_diagonal);
    let weight = match cfg.reduction {
        Reduction::Mean => 1.0 / count as f64,
        Reduction::Sum => 1.0,
    };
    let mut value = 0.0;
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    for (idx, (tv, sv)) in t.as_slice().iter().zip(s.as_slice()).enumerate() {
        value += huber(*tv, *sv, cfg.huber_delta);
        grad.as_mut_slice()[idx] = -huber_grad(*tv, *sv, cfg.huber_delta) * weight;
    }
    Ok(LossValue {
        value: value * weight,
        grad,
    })
}

fn kd_sum(t: &Matrix, s: &Matrix, scheme: Scheme, cfg: &DistillConfig) -> Result<LossValue> {
    check_batches(t, s)?;
    cfg.validate()?;
    let mut total = LossValue::zero(s.rows(), s.cols());
    for m in &cfg.manifolds {
        let part = scheme_loss(t, s, scheme, m.kind(cfg.curvature), cfg)?;
        total.accumulate(1.0, &part);
    }
    Ok(total)
}

/// Self-agent distillation: `TtSs` summed over the configured manifolds.
pub fn kd_s_loss(t: &EmbeddingBatch, s: &EmbeddingBatch, cfg: &DistillConfig) -> Result<LossValue> {
    kd_sum(t, s, Scheme::TtSs, cfg)
}

/// Cross-agent distillation: `TsSs` summed over the configured manifolds.
pub fn kd_c_loss(t: &EmbeddingBatch, s: &EmbeddingBatch, cfg: &DistillConfig) -> Result<LossValue> {
    kd_sum(t, s, Scheme::TsSs, cfg)
}

/// Task loss plus the weighted distillation terms selected by `variant`.
pub fn total_loss(
    task: &LossValue,
    t: &EmbeddingBatch,
    s: &EmbeddingBatch,
    cfg: &DistillConfig,
    variant: Variant,
) -> Result<LossValue> {
    check_batches(t, s)?;
    if task.grad.rows() != s.rows() || task.grad.cols() != s.cols() {
        return Err(Error::DimensionMismatch {
            expected: s.rows() * s.cols(),
            actual: task.grad.rows() * task.grad.cols(),
        });
    }
    let kd_s = variant.uses_self().then(|| kd_s_loss(t, s, cfg)).transpose()?;
    let kd_c = variant.uses_cross().then(|| kd_c_loss(t, s, cfg)).transpose()?;
    Ok(combine_objective(task, kd_s.as_ref(), kd_c.as_ref(), cfg, variant))
}

/// `task + lambda_s * kd_s + lambda_c * kd_c`, keeping only the terms that
/// `variant` selects. Missing terms a variant needs are treated as zero.
pub fn combine_objective(
    task: &LossValue,
    kd_s: Option<&LossValue>,
    kd_c: Option<&LossValue>,
    cfg: &DistillConfig,
    variant: Variant,
) -> LossValue {
    let mut total = task.clone();
    if let (true, Some(kd)) = (variant.uses_self(), kd_s) {
        total.accumulate(cfg.lambda_s, kd);
    }
    if let (true, Some(kd)) = (variant.uses_cross(), kd_c) {
        total.accumulate(cfg.lambda_c, kd);
    }
    total
}
