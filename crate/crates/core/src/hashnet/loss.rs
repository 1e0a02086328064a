//! Composite hashing objective over one mini-batch.
//!
//! With `h_ij = cos(z_i, z_j)` and a batch similarity block `q`:
//!
//! ```text
//! l2          = 1/t^2 * sum_ij (h_ij - q_ij)^2
//! contrastive = 1/t * sum_i 1/|P_i| * sum_{j in P_i}
//!                 -log( e^{h_ij/g} / (e^{h_ij/g} + sum_{l in N_i} e^{h_il/g}) )
//! quant       = 1/t * sum_i |z_i - sgn(z_i)|^2
//! total       = l2 + alpha * contrastive + beta * quant
//! ```
//!
//! `P_i = {j != i : q_ij >= lambda}`, `N_i = {j != i : q_ij < lambda}`.
//! Rows with empty `P_i` contribute nothing to the contrastive term.

use crate::error::{Error, Result};
use crate::hashnet::TrainConfig;
use crate::matrix::{dot, norm, DenseMatrix};

/// Per-term values of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l2_term: f64,
    pub contrastive_term: f64,
    pub quant_term: f64,
    pub total: f64,
}

/// `sgn` with `sgn(0) = -1`.
#[inline]
pub(crate) fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Positive and negative index sets of row `i`.
pub fn partition(q: &DenseMatrix, i: usize, lambda: f64) -> (Vec<usize>, Vec<usize>) {
    (0..q.cols())
        .filter(|&j| j != i)
        .partition(|&j| q.get(i, j) >= lambda)
}

const SYMMETRY_TOLERANCE: f64 = 1e-6;

fn check_inputs(z: &DenseMatrix, q: &DenseMatrix) -> Result<()> {
    let t = z.rows();
    if q.rows() != t || q.cols() != t {
        return Err(Error::Shape(format!(
            "similarity block is {}x{}, batch has {t} codes",
            q.rows(),
            q.cols()
        )));
    }
    for i in 0..t {
        if (q.get(i, i) - 1.0).abs() > SYMMETRY_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "similarity block diagonal at {i} is {}, expected 1",
                q.get(i, i)
            )));
        }
        for j in 0..i {
            if (q.get(i, j) - q.get(j, i)).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "similarity block is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

struct Cosines {
    norms: Vec<f64>,
    units: DenseMatrix,
    h: DenseMatrix,
}

fn cosines(z: &DenseMatrix) -> Result<Cosines> {
    let t = z.rows();
    let mut norms = Vec::with_capacity(t);
    let mut units = z.clone();
    for i in 0..t {
        let len = norm(z.row(i));
        if !(len > 0.0 && len.is_finite()) {
            return Err(Error::ZeroNorm { row: i });
        }
        norms.push(len);
        units.row_mut(i).iter_mut().for_each(|v| *v /= len);
    }
    let mut h = DenseMatrix::zeros(t, t);
    for i in 0..t {
        h.set(i, i, 1.0);
        for j in 0..i {
            let c = dot(units.row(i), units.row(j));
            h.set(i, j, c);
            h.set(j, i, c);
        }
    }
    Ok(Cosines { norms, units, h })
}

/// Log-sum-exp of a single value `a` together with a pre-reduced set
/// `{b_l}` given as `(max_b, sum_l e^{b_l - max_b})`.
#[inline]
fn lse_with(a: f64, neg_max: f64, neg_sum: f64) -> f64 {
    if neg_sum == 0.0 {
        return a;
    }
    let mx = a.max(neg_max);
    mx + ((a - mx).exp() + neg_sum * (neg_max - mx).exp()).ln()
}

/// Evaluates the objective and, if `grad` is set, `d total / d Z`.
fn evaluate(
    z: &DenseMatrix,
    q: &DenseMatrix,
    cfg: &TrainConfig,
    grad: bool,
) -> Result<(LossBreakdown, Option<DenseMatrix>)> {
    check_inputs(z, q)?;
    let t = z.rows();
    let tf = t as f64;
    let k = z.cols();
    let Cosines { norms, units, h } = cosines(z)?;
    let inv_gamma = 1.0 / cfg.gamma;

    // dL/dh, not symmetric in general
    let mut g = DenseMatrix::zeros(t, t);

    let mut l2 = 0.0;
    for i in 0..t {
        for j in 0..t {
            let diff = h.get(i, j) - q.get(i, j);
            l2 += diff * diff;
            if i != j {
                g.set(i, j, 2.0 * diff / (tf * tf));
            }
        }
    }
    l2 /= tf * tf;

    let mut contrastive = 0.0;
    for i in 0..t {
        let (pos, neg) = partition(q, i, cfg.lambda);
        if pos.is_empty() {
            continue;
        }
        let neg_max = neg
            .iter()
            .map(|&l| h.get(i, l) * inv_gamma)
            .fold(f64::NEG_INFINITY, f64::max);
        let neg_sum: f64 = neg
            .iter()
            .map(|&l| (h.get(i, l) * inv_gamma - neg_max).exp())
            .sum();

        let mut row_sum = 0.0;
        // sum over positives of e^{neg_max - lse_j}, for the negatives' gradient
        let mut neg_weight = 0.0;
        let scale = cfg.alpha / (tf * pos.len() as f64);
        for &j in &pos {
            let a = h.get(i, j) * inv_gamma;
            let lse = lse_with(a, neg_max, neg_sum);
            row_sum += lse - a;
            if grad {
                let p_pos = (a - lse).exp();
                g.set(i, j, g.get(i, j) + scale * (p_pos - 1.0) * inv_gamma);
                if !neg.is_empty() {
                    neg_weight += (neg_max - lse).exp();
                }
            }
        }
        contrastive += row_sum / pos.len() as f64;
        if grad {
            for &l in &neg {
                let w = (h.get(i, l) * inv_gamma - neg_max).exp() * neg_weight;
                g.set(i, l, g.get(i, l) + scale * w * inv_gamma);
            }
        }
    }
    contrastive /= tf;

    let mut quant = 0.0;
    for v in z.as_slice() {
        let d = v - sgn(*v);
        quant += d * d;
    }
    quant /= tf;

    let total = l2 + cfg.alpha * contrastive + cfg.beta * quant;
    let breakdown = LossBreakdown {
        l2_term: l2,
        contrastive_term: contrastive,
        quant_term: quant,
        total,
    };
    if !grad {
        return Ok((breakdown, None));
    }

    // h_ij = u_i . u_j, so dL/du_i = sum_j (g_ij + g_ji) u_j and
    // dL/dz_i = (I - u_i u_i^T) dL/du_i / |z_i|.
    let mut dz = DenseMatrix::zeros(t, k);
    let mut du = vec![0.0; k];
    for (i, &norm_i) in norms.iter().enumerate() {
        du.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..t {
            if j == i {
                continue;
            }
            let c = g.get(i, j) + g.get(j, i);
            if c != 0.0 {
                for (d, u) in du.iter_mut().zip(units.row(j)) {
                    *d += c * u;
                }
            }
        }
        let ui = units.row(i);
        let radial = dot(ui, &du);
        let out = dz.row_mut(i);
        for c in 0..k {
            out[c] = (du[c] - radial * ui[c]) / norm_i;
            let zc = z.get(i, c);
            out[c] += cfg.beta * 2.0 * (zc - sgn(zc)) / tf;
        }
    }
    Ok((breakdown, Some(dz)))
}

pub fn loss(z: &DenseMatrix, q: &DenseMatrix, cfg: &TrainConfig) -> Result<LossBreakdown> {
    Ok(evaluate(z, q, cfg, false)?.0)
}

/// Gradient of the total loss w.r.t. the relaxed codes. `sgn(z)` in the
/// quantization term is held constant.
pub fn loss_grad(z: &DenseMatrix, q: &DenseMatrix, cfg: &TrainConfig) -> Result<DenseMatrix> {
    Ok(evaluate(z, q, cfg, true)?.1.expect("gradient requested"))
}

pub fn loss_and_grad(
    z: &DenseMatrix,
    q: &DenseMatrix,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, DenseMatrix)> {
    let (b, g) = evaluate(z, q, cfg, true)?;
    Ok((b, g.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight transcription of the objective: explicit sets, no
    /// stabilization, cosines recomputed per pair.
    fn naive_total(z: &DenseMatrix, q: &DenseMatrix, cfg: &TrainConfig) -> f64 {
        let t = z.rows();
        let cos = |a: usize, b: usize| {
            let (za, zb) = (z.row(a), z.row(b));
            let mut ab = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            for c in 0..za.len() {
                ab += za[c] * zb[c];
                aa += za[c] * za[c];
                bb += zb[c] * zb[c];
            }
            ab / (aa.sqrt() * bb.sqrt())
        };
        let mut l2 = 0.0;
        for i in 0..t {
            for j in 0..t {
                l2 += (cos(i, j) - q.get(i, j)).powi(2);
            }
        }
        l2 /= (t * t) as f64;
        let mut lc = 0.0;
        for i in 0..t {
            let psi: Vec<usize> = (0..t)
                .filter(|&j| j != i && q.get(i, j) >= cfg.lambda)
                .collect();
            let phi: Vec<usize> = (0..t)
                .filter(|&j| j != i && q.get(i, j) < cfg.lambda)
                .collect();
            if psi.is_empty() {
                continue;
            }
            let mut s = 0.0;
            for &j in &psi {
                let num = (cos(i, j) / cfg.gamma).exp();
                let den = num
                    + phi
                        .iter()
                        .map(|&l| (cos(i, l) / cfg.gamma).exp())
                        .sum::<f64>();
                s += -(num / den).ln() / psi.len() as f64;
            }
            lc += s;
        }
        lc /= t as f64;
        let mut lq = 0.0;
        for i in 0..t {
            for &v in z.row(i) {
                let b = if v > 0.0 { 1.0 } else { -1.0 };
                lq += (v - b) * (v - b);
            }
        }
        lq /= t as f64;
        l2 + cfg.alpha * lc + cfg.beta * lq
    }

    fn random_z(rng: &mut ChaCha8Rng, t: usize, k: usize) -> DenseMatrix {
        let v = (0..t * k)
            .map(|_| {
                // keep away from 0 so sgn stays fixed under small steps
                let m: f64 = rng.random_range(0.01..0.99);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        DenseMatrix::from_vec(t, k, v).unwrap()
    }

    fn random_q(rng: &mut ChaCha8Rng, t: usize) -> DenseMatrix {
        // cosines of non-negative vectors: symmetric, unit diagonal, in [0, 1]
        let dim = 4;
        let v: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                (0..dim)
                    .map(|_| rng.random_range(0.0..1.0f64).powi(3))
                    .collect()
            })
            .collect();
        let mut q = DenseMatrix::zeros(t, t);
        for i in 0..t {
            for j in 0..t {
                let c = if i == j {
                    1.0
                } else {
                    dot(&v[i], &v[j]) / (norm(&v[i]) * norm(&v[j]))
                };
                q.set(i, j, c);
            }
        }
        q
    }

    fn random_cfg(rng: &mut ChaCha8Rng) -> TrainConfig {
        TrainConfig {
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..0.1),
            gamma: rng.random_range(0.1..1.0),
            lambda: rng.random_range(0.3..0.95),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn matches_naive_evaluator() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = rng.random_range(2..=8);
            let k = rng.random_range(1..=16);
            let z = random_z(&mut rng, t, k);
            let q = random_q(&mut rng, t);
            let cfg = random_cfg(&mut rng);
            let b = loss(&z, &q, &cfg).unwrap();
            let expect = naive_total(&z, &q, &cfg);
            assert!((b.total - expect).abs() < 1e-10, "{} vs {expect}", b.total);
            let recombined = b.l2_term + cfg.alpha * b.contrastive_term + cfg.beta * b.quant_term;
            assert!((b.total - recombined).abs() < 1e-10);
        }
    }

    #[test]
    fn t6_k8_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let z = random_z(&mut rng, 6, 8);
        let q = random_q(&mut rng, 6);
        let cfg = TrainConfig::default();
        let b = loss(&z, &q, &cfg).unwrap();
        assert!((b.total - naive_total(&z, &q, &cfg)).abs() < 1e-10);
    }

    #[test]
    fn perfectly_fit_batch_has_zero_loss() {
        let z = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let q = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let cfg = TrainConfig {
            lambda: 0.8,
            ..TrainConfig::default()
        };
        let b = loss(&z, &q, &cfg).unwrap();
        assert!(b.l2_term.abs() < 1e-15);
        assert_eq!(b.quant_term, 0.0);
        assert!(b.contrastive_term.abs() < 1e-15);
        assert!(b.total.abs() < 1e-15);
    }

    #[test]
    fn orthogonal_dissimilar_pair() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let z = DenseMatrix::from_rows(&[[s, s], [s, -s]]).unwrap();
        let q = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = loss(&z, &q, &TrainConfig::default()).unwrap();
        assert_eq!(b.contrastive_term, 0.0);
        assert!(b.l2_term.abs() < 1e-30);
    }

    #[test]
    fn zero_row_and_bad_block_rejected() {
        let cfg = TrainConfig::default();
        let z = DenseMatrix::from_rows(&[[0.0, 0.0], [1.0, 0.5]]).unwrap();
        let q = DenseMatrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap();
        assert!(matches!(
            loss(&z, &q, &cfg),
            Err(Error::ZeroNorm { row: 0 })
        ));
        let z = DenseMatrix::from_rows(&[[0.3, 0.1], [1.0, 0.5]]).unwrap();
        let asym = DenseMatrix::from_rows(&[[1.0, 0.5], [0.4, 1.0]]).unwrap();
        assert!(loss(&z, &asym, &cfg).is_err());
        let diag = DenseMatrix::from_rows(&[[0.9, 0.5], [0.5, 1.0]]).unwrap();
        assert!(loss(&z, &diag, &cfg).is_err());
        let shape = DenseMatrix::zeros(3, 3);
        assert!(matches!(loss(&z, &shape, &cfg), Err(Error::Shape(_))));
    }

    fn fd_grad(z: &DenseMatrix, q: &DenseMatrix, cfg: &TrainConfig, h: f64) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(z.rows(), z.cols());
        for i in 0..z.as_slice().len() {
            let mut plus = z.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = z.clone();
            minus.as_mut_slice()[i] -= h;
            let d = (loss(&plus, q, cfg).unwrap().total - loss(&minus, q, cfg).unwrap().total)
                / (2.0 * h);
            out.as_mut_slice()[i] = d;
        }
        out
    }

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        let diff = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = a
            .as_slice()
            .iter()
            .chain(b.as_slice())
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for _ in 0..50 {
            let t = rng.random_range(2..=8);
            let k = rng.random_range(1..=16);
            let z = random_z(&mut rng, t, k);
            let q = random_q(&mut rng, t);
            let cfg = random_cfg(&mut rng);
            let an = loss_grad(&z, &q, &cfg).unwrap();
            let fd = fd_grad(&z, &q, &cfg, 1e-5);
            let e = rel_err(&an, &fd);
            assert!(e < 1e-4, "relative error {e}");
        }
        // the t=5, k=6 example
        let z = random_z(&mut rng, 5, 6);
        let q = random_q(&mut rng, 5);
        let cfg = TrainConfig::default();
        assert!(
            rel_err(
                &loss_grad(&z, &q, &cfg).unwrap(),
                &fd_grad(&z, &q, &cfg, 1e-5)
            ) < 1e-4
        );
    }

    #[test]
    fn stationary_when_similarities_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z0 = random_z(&mut rng, 6, 5);
        let cfg = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            ..TrainConfig::default()
        };
        let q = cosines(&z0).unwrap().h;
        let b = loss(&z0, &q, &cfg).unwrap();
        assert!(b.total.abs() < 1e-28);
        let g = loss_grad(&z0, &q, &cfg).unwrap();
        assert!(norm(g.as_slice()) < 1e-8);
        // any other codes cannot do better
        let z1 = random_z(&mut rng, 6, 5);
        assert!(loss(&z1, &q, &cfg).unwrap().total >= b.total);
    }

    #[test]
    fn gradient_orthogonal_to_row_without_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let z = random_z(&mut rng, 6, 7);
            let q = random_q(&mut rng, 6);
            let cfg = TrainConfig {
                beta: 0.0,
                ..random_cfg(&mut rng)
            };
            let g = loss_grad(&z, &q, &cfg).unwrap();
            for i in 0..6 {
                assert!(dot(g.row(i), z.row(i)).abs() < 1e-8);
            }
            // and scaling a row does not change the loss
            let mut scaled = z.clone();
            scaled.row_mut(2).iter_mut().for_each(|v| *v *= 0.5);
            let a = loss(&z, &q, &cfg).unwrap();
            let b = loss(&scaled, &q, &cfg).unwrap();
            assert!((a.l2_term - b.l2_term).abs() < 1e-12);
            assert!((a.contrastive_term - b.contrastive_term).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_is_exact_and_monotone_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let q = random_q(&mut rng, 8);
        for i in 0..8 {
            let mut prev: Option<Vec<usize>> = None;
            for step in 0..=20 {
                let lambda = step as f64 / 20.0;
                let (pos, neg) = partition(&q, i, lambda);
                let mut all: Vec<usize> = pos.iter().chain(&neg).copied().collect();
                all.sort_unstable();
                let expect: Vec<usize> = (0..8).filter(|&j| j != i).collect();
                assert_eq!(all, expect);
                assert!(pos.iter().all(|j| !neg.contains(j)));
                if let Some(p) = prev {
                    assert!(pos.iter().all(|j| p.contains(j)));
                }
                prev = Some(pos);
            }
        }
    }

    #[test]
    fn large_inverse_temperature_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let z = random_z(&mut rng, 8, 4);
        let q = random_q(&mut rng, 8);
        let cfg = TrainConfig {
            gamma: 1e-3,
            lambda: 0.3,
            ..TrainConfig::default()
        };
        let (b, g) = loss_and_grad(&z, &q, &cfg).unwrap();
        assert!(b.total.is_finite());
        assert!(g.all_finite());
    }
}
