//! Analytic-versus-numeric gradient comparison for every loss configuration.

use crate::error::Result;
use crate::numeric::{finite_diff_grad, seeded_rng, Matrix, DEFAULT_FD_STEP};
use crate::relational::{scheme_loss, DistillConfig, Manifold, Scheme};

/// Entry-wise relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckCase {
    pub scheme: Scheme,
    /// `None` for [`Scheme::Direct`], which has no geometry.
    pub manifold: Option<Manifold>,
    pub max_rel_error: f64,
}

impl GradcheckCase {
    pub fn label(&self) -> String {
        match self.manifold {
            Some(m) => format!("{}_{}", self.scheme.tag(), m.tag()),
            None => self.scheme.tag().to_string(),
        }
    }
}

/// The three relational schemes under each geometry, plus direct
/// supervision.
pub fn all_configurations() -> Vec<(Scheme, Option<Manifold>)> {
    let mut out: Vec<_> = Scheme::RELATIONAL
        .iter()
        .flat_map(|&s| Manifold::ALL.iter().map(move |&m| (s, Some(m))))
        .collect();
    out.push((Scheme::Direct, None));
    out
}

/// Random `n x c` teacher and student batches drawn from `seed`.
pub fn random_batches(n: usize, c: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = seeded_rng(seed);
    let t = rng.normal_matrix(n, c, 1.0);
    let s = rng.normal_matrix(n, c, 1.0);
    (t, s)
}

pub fn check_case(
    t: &Matrix,
    s: &Matrix,
    scheme: Scheme,
    manifold: Option<Manifold>,
    cfg: &DistillConfig,
) -> Result<GradcheckCase> {
    let kind = manifold.unwrap_or(Manifold::Euclidean).kind(cfg.curvature);
    let analytic = scheme_loss(t, s, scheme, kind, cfg)?.grad;
    let numeric = finite_diff_grad(
        |x| {
            let sx = Matrix::from_vec(s.rows(), s.cols(), x.to_vec()).expect("finite probe");
            scheme_loss(t, &sx, scheme, kind, cfg).map_or(f64::NAN, |l| l.value)
        },
        s.as_slice(),
        DEFAULT_FD_STEP,
    )?;
    let max_rel_error = analytic
        .as_slice()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradcheckCase {
        scheme,
        manifold,
        max_rel_error,
    })
}

/// Checks every configuration on one random batch pair.
pub fn run_gradcheck(n: usize, c: usize, seed: u64, cfg: &DistillConfig) -> Result<Vec<GradcheckCase>> {
    let (t, s) = random_batches(n, c, seed);
    all_configurations()
        .into_iter()
        .map(|(scheme, manifold)| check_case(&t, &s, scheme, manifold, cfg))
        .collect()
}
