//! Relation functions on three constant-curvature geometries.
//!
//! * Euclidean: straight-line distance `|x - y|`.
//! * Spherical: the cosine relation `<x, y> / (|x| |y|)`. This is a
//!   similarity (larger means closer) and is kept that way on purpose; the
//!   losses only ever compare teacher and student values of the same function.
//! * Hyperbolic: the Poincare ball `{p : c |p|^2 < 1}` with Mobius addition,
//!   conformal factor, exponential maps and geodesic distance.
//!
//! The `*_grad` / `*_vjp` helpers return exact derivatives and are what the
//! loss module uses for its backward pass.

use crate::error::{Error, Result};
use crate::numeric::{dot_unchecked, norm, norm_sq};

/// Norms at or below this are treated as zero.
pub const EPS_NORM: f64 = 1e-12;
/// Relative margin kept from the ball boundary by [`project_to_ball`].
pub const EPS_BALL: f64 = 1e-5;
/// Upper clamp on the `artanh` argument of the hyperbolic distance.
pub const ARTANH_CLAMP: f64 = 1.0 - 1e-7;

/// Positive curvature parameter `c`; the ball has sectional curvature `-c`
/// in the `c |p|^2 < 1` convention used throughout.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(Error::InvalidCurvature(c))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self(1.0)
    }
}

/// A point strictly inside the Poincare ball of curvature `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl BallPoint {
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if let Some(pos) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "ball point",
                i: 0,
                j: pos,
            });
        }
        let value = curvature.value() * norm_sq(&coords);
        if value >= 1.0 {
            return Err(Error::OutsideBall { value });
        }
        Ok(Self { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        Self {
            coords: vec![0.0; dim],
            curvature,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Additive inverse `-p` (also the Mobius inverse).
    pub fn neg(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|v| -v).collect(),
            curvature: self.curvature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistanceKind {
    Euclidean,
    Cosine,
    Hyperbolic(Curvature),
}

impl DistanceKind {
    /// Short tag used in reports: `euc`, `cos`, `hyp`.
    pub fn tag(&self) -> &'static str {
        match self {
            DistanceKind::Euclidean => "euc",
            DistanceKind::Cosine => "cos",
            DistanceKind::Hyperbolic(_) => "hyp",
        }
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    Ok(())
}

fn check_pair(p: &BallPoint, q: &BallPoint) -> Result<()> {
    if p.curvature != q.curvature {
        return Err(Error::CurvatureMismatch {
            left: p.curvature.value(),
            right: q.curvature.value(),
        });
    }
    check_dims(&p.coords, &q.coords)
}

pub fn euclidean_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    Ok(euclidean_unchecked(x, y))
}

#[inline]
pub(crate) fn euclidean_unchecked(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

pub fn cosine_relation(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    let (nx, ny) = (norm(x), norm(y));
    if nx <= EPS_NORM {
        return Err(Error::ZeroNorm { arg: "first", norm: nx });
    }
    if ny <= EPS_NORM {
        return Err(Error::ZeroNorm { arg: "second", norm: ny });
    }
    Ok(dot_unchecked(x, y) / (nx * ny))
}

/// `lambda_c(p) = 2 / (1 - c |p|^2)`.
pub fn conformal_factor(p: &BallPoint) -> f64 {
    2.0 / (1.0 - p.curvature.value() * norm_sq(&p.coords))
}

/// Closed-form Mobius sum without any boundary handling.
fn mobius_raw(p: &[f64], q: &[f64], c: f64) -> Vec<f64> {
    let pq = dot_unchecked(p, q);
    let p2 = norm_sq(p);
    let q2 = norm_sq(q);
    let a = 1.0 + 2.0 * c * pq + c * q2;
    let b = 1.0 - c * p2;
    let den = 1.0 + 2.0 * c * pq + c * c * p2 * q2;
    p.iter().zip(q).map(|(pi, qi)| (a * pi + b * qi) / den).collect()
}

/// Mobius addition `p (+)_c q`. A result that round-off places on or past the
/// boundary is pulled back by [`project_to_ball`].
pub fn mobius_add(p: &BallPoint, q: &BallPoint) -> Result<BallPoint> {
    check_pair(p, q)?;
    let c = p.curvature;
    let coords = mobius_raw(&p.coords, &q.coords, c.value());
    if c.value() * norm_sq(&coords) >= 1.0 {
        return Ok(project_to_ball(&coords, c));
    }
    Ok(BallPoint {
        coords,
        curvature: c,
    })
}

/// Exponential map at base point `z`:
/// `z (+)_c (tanh(sqrt(c) lambda_c(z) |v| / 2) v / (sqrt(c) |v|))`.
/// Returns `z` when `|v| <= EPS_NORM`.
pub fn exp_map(z: &BallPoint, v: &[f64]) -> Result<BallPoint> {
    check_dims(&z.coords, v)?;
    let c = z.curvature;
    let r = norm(v);
    if r <= EPS_NORM {
        return Ok(z.clone());
    }
    let sqrt_c = c.sqrt();
    let lambda = conformal_factor(z);
    let scale = (sqrt_c * lambda * r / 2.0).tanh() / (sqrt_c * r);
    let step: Vec<f64> = v.iter().map(|x| x * scale).collect();
    let step = project_to_ball(&step, c);
    mobius_add(z, &step)
}

/// Exponential map at the origin: `tanh(sqrt(c) |v|) v / (sqrt(c) |v|)`.
/// Saturated outputs (possible once `tanh` rounds to 1) are projected.
pub fn exp_map_origin(v: &[f64], c: Curvature) -> BallPoint {
    let r = norm(v);
    if r <= EPS_NORM {
        return BallPoint::origin(v.len(), c);
    }
    let sqrt_c = c.sqrt();
    let scale = (sqrt_c * r).tanh() / (sqrt_c * r);
    let y: Vec<f64> = v.iter().map(|x| x * scale).collect();
    project_to_ball(&y, c)
}

/// Leaves `x` alone when `c |x|^2 < (1 - EPS_BALL)^2`, otherwise rescales it
/// to norm `(1 - EPS_BALL) / sqrt(c)`.
pub fn project_to_ball(x: &[f64], c: Curvature) -> BallPoint {
    let limit = 1.0 - EPS_BALL;
    let n2 = norm_sq(x);
    if c.value() * n2 < limit * limit {
        return BallPoint {
            coords: x.to_vec(),
            curvature: c,
        };
    }
    let target = limit / c.sqrt();
    let s = target / n2.sqrt();
    BallPoint {
        coords: x.iter().map(|v| v * s).collect(),
        curvature: c,
    }
}

/// `d(p, q) = (2 / sqrt(c)) artanh(sqrt(c) |(-p) (+)_c q|)`, with the
/// `artanh` argument clamped to [`ARTANH_CLAMP`]. Computed through the
/// equivalent `acosh` form for accuracy near the boundary.
pub fn hyperbolic_distance(p: &BallPoint, q: &BallPoint) -> Result<f64> {
    check_pair(p, q)?;
    Ok(hyperbolic_unchecked(&p.coords, &q.coords, p.curvature))
}

/// Evaluated through the equivalent closed form
/// `acosh(1 + 2c |p - q|^2 / ((1 - c|p|^2)(1 - c|q|^2))) / sqrt(c)`, which
/// stays well conditioned near the boundary where `artanh` of a value close
/// to one loses most of its digits. The result is capped at the distance
/// that corresponds to the clamped `artanh` argument.
pub(crate) fn hyperbolic_unchecked(p: &[f64], q: &[f64], c: Curvature) -> f64 {
    hyperbolic_parts(p, q, c).0
}

fn max_hyperbolic_distance(c: Curvature) -> f64 {
    2.0 / c.sqrt() * ARTANH_CLAMP.atanh()
}

/// Distance, `x = 2c|p-q|^2 / (A B)`, `A = 1 - c|p|^2`, `B = 1 - c|q|^2`,
/// `|p - q|^2`, and whether the cap was hit.
fn hyperbolic_parts(p: &[f64], q: &[f64], c: Curvature) -> (f64, f64, f64, f64, f64, bool) {
    let cv = c.value();
    let diff2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
    let a = 1.0 - cv * norm_sq(p);
    let b = 1.0 - cv * norm_sq(q);
    let x = 2.0 * cv * diff2 / (a * b);
    // acosh(1 + x) = ln(1 + x + sqrt(x (x + 2))), written to keep small x exact.
    let d = (x + (x * (x + 2.0)).sqrt()).ln_1p() / c.sqrt();
    let cap = max_hyperbolic_distance(c);
    if d >= cap {
        (cap, x, a, b, diff2, true)
    } else {
        (d, x, a, b, diff2, false)
    }
}

/// Euclidean distance and its gradient w.r.t. `x` (the gradient w.r.t. `y`
/// is the negation). At `x == y` the zero subgradient is returned.
pub fn euclidean_distance_grad(x: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let d = euclidean_grad_into(x, y, &mut gx);
    (d, gx)
}

pub(crate) fn euclidean_grad_into(x: &[f64], y: &[f64], gx: &mut [f64]) -> f64 {
    let d = euclidean_unchecked(x, y);
    if d <= 0.0 {
        gx.fill(0.0);
        return 0.0;
    }
    for ((g, a), b) in gx.iter_mut().zip(x).zip(y) {
        *g = (a - b) / d;
    }
    d
}

/// Cosine relation with gradients w.r.t. both arguments.
pub fn cosine_relation_grad(x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (mut gx, mut gy) = (vec![0.0; x.len()], vec![0.0; y.len()]);
    let v = cosine_grad_into(x, y, &mut gx, &mut gy)?;
    Ok((v, gx, gy))
}

pub(crate) fn cosine_grad_into(x: &[f64], y: &[f64], gx: &mut [f64], gy: &mut [f64]) -> Result<f64> {
    let v = cosine_relation(x, y)?;
    let (nx, ny) = (norm(x), norm(y));
    let inv = 1.0 / (nx * ny);
    let (ix2, iy2) = (1.0 / (nx * nx), 1.0 / (ny * ny));
    for k in 0..x.len() {
        gx[k] = y[k] * inv - v * x[k] * ix2;
        gy[k] = x[k] * inv - v * y[k] * iy2;
    }
    Ok(v)
}

/// Hyperbolic distance between raw ball coordinates with gradients w.r.t.
/// both points.
///
/// Value as in [`hyperbolic_distance`]; the gradient is that of the `acosh`
/// form. Capped or coincident pairs get a zero gradient.
pub fn hyperbolic_distance_grad(
    p: &[f64],
    q: &[f64],
    c: Curvature,
) -> (f64, Vec<f64>, Vec<f64>) {
    let (mut gp, mut gq) = (vec![0.0; p.len()], vec![0.0; q.len()]);
    let d = hyperbolic_grad_into(p, q, c, &mut gp, &mut gq);
    (d, gp, gq)
}

pub(crate) fn hyperbolic_grad_into(p: &[f64], q: &[f64], c: Curvature, gp: &mut [f64], gq: &mut [f64]) -> f64 {
    let (d, x, a, b, diff2, capped) = hyperbolic_parts(p, q, c);
    if diff2 <= 0.0 || capped {
        gp.fill(0.0);
        gq.fill(0.0);
        return d;
    }
    let cv = c.value();
    // dd/dx = 1 / (sqrt(c) sqrt(x (x + 2))), dx/dp = 4c/(AB) ((p - q) + c |p-q|^2 p / A).
    let outer = 4.0 * cv / (a * b) / (c.sqrt() * (x * (x + 2.0)).sqrt());
    for k in 0..p.len() {
        let diff = p[k] - q[k];
        gp[k] = outer * (diff + cv * diff2 * p[k] / a);
        gq[k] = outer * (-diff + cv * diff2 * q[k] / b);
    }
    d
}

/// Maps a raw descriptor into the ball: scale by `prescale`, apply
/// [`exp_map_origin`] (which projects saturated outputs).
pub fn embed_in_ball(raw: &[f64], c: Curvature, prescale: f64) -> Vec<f64> {
    let v: Vec<f64> = raw.iter().map(|x| x * prescale).collect();
    exp_map_origin(&v, c).into_coords()
}

/// Vector-Jacobian product of [`embed_in_ball`] at `raw` with `upstream`.
pub fn embed_in_ball_vjp(raw: &[f64], c: Curvature, prescale: f64, upstream: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = raw.iter().map(|x| x * prescale).collect();
    let r = norm(&v);
    if r <= EPS_NORM {
        return upstream.iter().map(|u| u * prescale).collect();
    }
    let sqrt_c = c.sqrt();
    let a = sqrt_c * r;
    let t = a.tanh();
    let g = t / a;
    let y: Vec<f64> = v.iter().map(|x| x * g).collect();

    // Pull back through the projection first.
    let limit = 1.0 - EPS_BALL;
    let y2 = norm_sq(&y);
    let upstream_y: Vec<f64> = if c.value() * y2 < limit * limit {
        upstream.to_vec()
    } else {
        let ny = y2.sqrt();
        let m = limit / sqrt_c;
        let proj = dot_unchecked(&y, upstream) / y2;
        upstream
            .iter()
            .zip(&y)
            .map(|(u, yi)| m / ny * (u - yi * proj))
            .collect()
    };

    // y = g(r) v with Jacobian g I + (g'(r)/r) v v^T.
    let gprime_over_r = if a < 1e-3 {
        c.value() * (-2.0 / 3.0 + 8.0 / 15.0 * a * a)
    } else {
        let sech2 = 1.0 - t * t;
        c.value() * (a * sech2 - t) / (a * a * a)
    };
    let vu = dot_unchecked(&v, &upstream_y);
    v.iter()
        .zip(&upstream_y)
        .map(|(vi, ui)| prescale * (g * ui + gprime_over_r * vu * vi))
        .collect()
}
