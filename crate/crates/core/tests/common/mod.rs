//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use distilvpr::numeric::{Matrix, RngStream};

pub fn dist_euc(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

pub fn cos_rel(x: &[f64], y: &[f64]) -> f64 {
    let d: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    d / (nx * ny)
}

/// Mobius addition written component-wise from its definition.
pub fn mobius(p: &[f64], q: &[f64], c: f64) -> Vec<f64> {
    let pq: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let p2: f64 = p.iter().map(|a| a * a).sum();
    let q2: f64 = q.iter().map(|a| a * a).sum();
    (0..p.len())
        .map(|k| {
            ((1.0 + 2.0 * c * pq + c * q2) * p[k] + (1.0 - c * p2) * q[k])
                / (1.0 + 2.0 * c * pq + c * c * p2 * q2)
        })
        .collect()
}

pub fn dist_hyp(p: &[f64], q: &[f64], c: f64) -> f64 {
    let neg: Vec<f64> = p.iter().map(|v| -v).collect();
    let m = mobius(&neg, q, c);
    let n = m.iter().map(|a| a * a).sum::<f64>().sqrt();
    let arg = (c.sqrt() * n).min(1.0 - 1e-7);
    2.0 / c.sqrt() * arg.atanh()
}

/// Origin exponential map followed by the ball projection.
pub fn exp0(v: &[f64], c: f64, prescale: f64) -> Vec<f64> {
    let v: Vec<f64> = v.iter().map(|x| x * prescale).collect();
    let r = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if r <= 1e-12 {
        return vec![0.0; v.len()];
    }
    let s = (c.sqrt() * r).tanh() / (c.sqrt() * r);
    let y: Vec<f64> = v.iter().map(|x| x * s).collect();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    let limit = (1.0 - 1e-5) / c.sqrt();
    if ny < limit {
        y
    } else {
        y.iter().map(|x| x * limit / ny).collect()
    }
}

pub fn huber(a: f64, b: f64, delta: f64) -> f64 {
    let d = (a - b).abs();
    if d <= delta {
        0.5 * d * d
    } else {
        delta * (d - 0.5 * delta)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Geo {
    Euc,
    Cos,
    Hyp,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Pair {
    TT,
    SS,
    TS,
}

/// Relational loss with Mean reduction, diagonal included and no
/// normalization, evaluated by brute force over every `(i, j)`.
pub fn relational_oracle(t: &Matrix, s: &Matrix, left: Pair, right: Pair, geo: Geo, c: f64) -> f64 {
    let n = t.rows();
    let map = |m: &Matrix| -> Vec<Vec<f64>> {
        m.iter_rows()
            .map(|r| if geo == Geo::Hyp { exp0(r, c, 1.0) } else { r.to_vec() })
            .collect()
    };
    let (tm, sm) = (map(t), map(s));
    let rel = |pair: Pair, i: usize, j: usize| {
        let (a, b) = match pair {
            Pair::TT => (&tm[i], &tm[j]),
            Pair::SS => (&sm[i], &sm[j]),
            Pair::TS => (&tm[i], &sm[j]),
        };
        match geo {
            Geo::Euc => dist_euc(a, b),
            Geo::Cos => cos_rel(a, b),
            Geo::Hyp => dist_hyp(a, b, c),
        }
    };
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += huber(rel(left, i, j), rel(right, i, j), 1.0);
        }
    }
    total / (n * n) as f64
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(dim: usize, rng: &mut RngStream) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_rows(&basis).unwrap()
}

/// Recall@k by exhaustively scanning the full sorted order.
pub fn brute_force_recall(q: &Matrix, db: &Matrix, positives: &[Vec<usize>], k: usize) -> Option<f64> {
    let mut hits = 0usize;
    let mut counted = 0usize;
    for (qi, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            continue;
        }
        counted += 1;
        let mut idx: Vec<usize> = (0..db.rows()).collect();
        let d: Vec<f64> = (0..db.rows()).map(|j| dist_euc(q.row(qi), db.row(j))).collect();
        // Stable sort keeps lower indices first among equal distances.
        idx.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap());
        if idx[..k].iter().any(|j| pos.contains(j)) {
            hits += 1;
        }
    }
    (counted > 0).then(|| 100.0 * hits as f64 / counted as f64)
}
