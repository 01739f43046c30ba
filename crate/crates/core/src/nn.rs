//! Taped neural-network building blocks and initialization rules.
//!
//! Everything here composes tape primitives, so gradients (and gradients of
//! gradients) follow from [`crate::tape::Tape::backward`] with no extra
//! adjoint code.

use crate::geometry::RadialBasis;
use crate::tape::{Tape, TensorData, ValueId};
use crate::Real;
use rand::rngs::StdRng;
use rand::Rng;

/// Variance floor added inside layer normalization.
pub const LAYER_NORM_EPS: Real = 1e-5;

/// `y = x W^T + b` for `x: [B, C_in]`, `w: [C_out, C_in]`, `b: [C_out]`.
pub fn linear(tape: &mut Tape, x: ValueId, w: ValueId, b: Option<ValueId>) -> ValueId {
    let y = tape.mix_channels(x, w);
    match b {
        Some(b) => {
            let batch = tape.value(y).shape()[0];
            let bb = tape.expand_leading(b, batch);
            tape.add(y, bb)
        }
        None => y,
    }
}

/// Chain of [`linear`] layers with a silu between consecutive layers and no
/// activation after the last one.
pub fn mlp(tape: &mut Tape, x: ValueId, layers: &[(ValueId, Option<ValueId>)]) -> ValueId {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        if i > 0 {
            h = tape.silu(h);
        }
        h = linear(tape, h, w, b);
    }
    h
}

/// Normalize the last dim of `x: [B, F]` to zero mean and unit variance
/// (biased variance, `LAYER_NORM_EPS` floor), then scale/shift with
/// `gamma`/`beta` of shape `[F]`.
pub fn layer_norm(
    tape: &mut Tape,
    x: ValueId,
    gamma: ValueId,
    beta: ValueId,
    eps: Real,
) -> ValueId {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 2, "layer_norm expects [B, F], got {shape:?}");
    let (b, f) = (shape[0], shape[1]);
    let mean = {
        let s = tape.sum_trailing(x, 1);
        tape.scale(s, 1.0 / f as Real)
    };
    let mean_b = tape.expand_trailing(mean, &[f]);
    let centered = tape.sub(x, mean_b);
    let var = {
        let sq = tape.mul(centered, centered);
        let s = tape.sum_trailing(sq, 1);
        tape.scale(s, 1.0 / f as Real)
    };
    let inv_std = {
        let shifted = tape.affine(var, 1.0, eps);
        let std = tape.sqrt(shifted);
        tape.recip(std)
    };
    let inv_b = tape.expand_trailing(inv_std, &[f]);
    let normalized = tape.mul(centered, inv_b);
    let gamma_b = tape.expand_leading(gamma, b);
    let beta_b = tape.expand_leading(beta, b);
    let scaled = tape.mul(normalized, gamma_b);
    tape.add(scaled, beta_b)
}

/// Expand distances `r: [E]` into the Gaussian basis of `exp(-r)`:
/// `e_k(r) = exp(-beta_k (exp(-r) - mu_k)^2)`, output `[E, count]`.
///
/// Centers and widths enter as non-differentiable constants.
pub fn radial_expansion(tape: &mut Tape, r: ValueId, basis: &RadialBasis) -> ValueId {
    let e = tape.value(r).shape()[0];
    let d = basis.count;
    let neg_r = tape.neg(r);
    let m = tape.exp(neg_r);
    let m_b = tape.expand_trailing(m, &[d]);
    let mu = tape.constant(TensorData::new(vec![d], basis.centers.clone()));
    let mu_b = tape.expand_leading(mu, e);
    let diff = tape.sub(m_b, mu_b);
    let sq = tape.mul(diff, diff);
    // All widths are equal by construction; fold the single coefficient in.
    let scaled = tape.affine(sq, -basis.betas[0], 0.0);
    tape.exp(scaled)
}

/// Cosine switching window `0.5 (cos(pi r / cutoff) + 1)` on the tape.
///
/// Callers must guarantee `r <= cutoff` (edge lists do); the untaped
/// [`crate::geometry::cutoff_fn`] handles the outside branch.
pub fn cutoff_window(tape: &mut Tape, r: ValueId, cutoff: Real) -> ValueId {
    let arg = tape.affine(r, std::f64::consts::PI as Real / cutoff, 0.0);
    let c = tape.cos(arg);
    tape.affine(c, 0.5, 0.5)
}

// ---- initialization ----

/// Uniform on `±sqrt(1/fan_in)` — the default for hidden linear layers and
/// their biases.
pub fn init_fan_in_uniform(rng: &mut StdRng, rows: usize, fan_in: usize) -> Vec<Real> {
    let bound = (1.0 / fan_in as Real).sqrt();
    (0..rows * fan_in).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Bias companion to [`init_fan_in_uniform`].
pub fn init_bias_uniform(rng: &mut StdRng, rows: usize, fan_in: usize) -> Vec<Real> {
    let bound = (1.0 / fan_in as Real).sqrt();
    (0..rows).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Uniform on `±sqrt(6 / (fan_in + fan_out))` — used for the last two
/// layers of output heads (paired with zero biases).
pub fn init_xavier_uniform(rng: &mut StdRng, rows: usize, cols: usize) -> Vec<Real> {
    let bound = (6.0 / (rows + cols) as Real).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Standard normal via Box-Muller — used for the species embedding table.
pub fn init_standard_normal(rng: &mut StdRng, n: usize) -> Vec<Real> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: Real = rng.gen_range(Real::EPSILON..1.0);
        let u2: Real = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI as Real * u2;
        out.push(r * theta.cos());
        if out.len() < n {
            out.push(r * theta.sin());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry;
    use rand::SeedableRng;

    #[test]
    fn layer_norm_matches_direct_reference() {
        // Independent scalar-loop reference for one batch row.
        let x = vec![0.5, -1.0, 2.0, 0.25];
        let gamma = vec![1.5, 1.0, 0.5, 2.0];
        let beta = vec![0.1, -0.2, 0.0, 0.3];
        let f = 4;
        let mean: Real = x.iter().sum::<Real>() / f as Real;
        let var: Real = x.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / f as Real;
        let expect: Vec<Real> = (0..f)
            .map(|i| gamma[i] * (x[i] - mean) / (var + LAYER_NORM_EPS).sqrt() + beta[i])
            .collect();

        let mut tape = Tape::new();
        let xid = tape.leaf(TensorData::new(vec![1, 4], x));
        let g = tape.leaf(TensorData::new(vec![4], gamma));
        let b = tape.leaf(TensorData::new(vec![4], beta));
        let y = layer_norm(&mut tape, xid, g, b, LAYER_NORM_EPS);
        for (got, want) in tape.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(31);
        let base: Vec<Real> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma: Vec<Real> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<Real> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let eval = |xv: &[Real]| -> (Real, Vec<Real>) {
            let mut tape = Tape::new();
            let x = tape.leaf(TensorData::new(vec![2, 3], xv.to_vec()));
            let g = tape.constant(TensorData::new(vec![3], gamma.clone()));
            let b = tape.constant(TensorData::new(vec![3], beta.clone()));
            let y = layer_norm(&mut tape, x, g, b, LAYER_NORM_EPS);
            // Asymmetric contraction to exercise all entries.
            let w = tape.constant(TensorData::new(
                vec![2, 3],
                vec![0.9, -0.3, 0.5, 1.1, 0.2, -0.7],
            ));
            let p = tape.mul(y, w);
            let s = tape.sum_all(p);
            let grads = tape.backward(s);
            let gx = grads.get(x).unwrap();
            (tape.value(s).item(), tape.value(gx).data().to_vec())
        };

        let (_, analytic) = eval(&base);
        let h = 1e-6;
        for e in 0..base.len() {
            let mut plus = base.clone();
            plus[e] += h;
            let mut minus = base.clone();
            minus[e] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            assert!(
                (analytic[e] - fd).abs() / fd.abs().max(1.0) <= 1e-6,
                "entry {e}: {} vs {fd}",
                analytic[e]
            );
        }
    }

    #[test]
    fn radial_expansion_matches_untaped_basis() {
        let basis = RadialBasis::new(8, 5.0).unwrap();
        let rs = vec![0.7, 1.9, 3.2, 4.9];
        let mut tape = Tape::new();
        let r = tape.leaf(TensorData::new(vec![4], rs.clone()));
        let e = radial_expansion(&mut tape, r, &basis);
        let taped = tape.value(e).data();
        for (i, &rv) in rs.iter().enumerate() {
            let direct = basis.expand(rv);
            for k in 0..8 {
                assert!(
                    (taped[8 * i + k] - direct[k]).abs() <= 1e-14,
                    "r = {rv}, k = {k}"
                );
            }
        }
    }

    #[test]
    fn radial_expansion_gradient_matches_finite_differences() {
        let basis = RadialBasis::new(6, 4.5).unwrap();
        let eval = |rv: Real| -> (Real, Real) {
            let mut tape = Tape::new();
            let r = tape.leaf(TensorData::new(vec![1], vec![rv]));
            let e = radial_expansion(&mut tape, r, &basis);
            let w = tape.constant(TensorData::new(
                vec![1, 6],
                vec![0.2, -0.4, 0.9, 1.3, -0.1, 0.6],
            ));
            let p = tape.mul(e, w);
            let s = tape.sum_all(p);
            let grads = tape.backward(s);
            let g = grads.get(r).unwrap();
            (tape.value(s).item(), tape.value(g).data()[0])
        };
        let h = 1e-6;
        for rv in [0.6, 2.3, 4.2] {
            let (_, analytic) = eval(rv);
            let fd = (eval(rv + h).0 - eval(rv - h).0) / (2.0 * h);
            assert!((analytic - fd).abs() / fd.abs().max(1.0) <= 1e-6);
        }
    }

    #[test]
    fn cutoff_window_matches_untaped_inside() {
        let rc = 4.5;
        let mut tape = Tape::new();
        let r = tape.leaf(TensorData::new(vec![3], vec![0.5, 2.25, 4.4]));
        let w = cutoff_window(&mut tape, r, rc);
        let got = tape.value(w).data();
        for (i, &rv) in [0.5, 2.25, 4.4].iter().enumerate() {
            assert!((got[i] - geometry::cutoff_fn(rv, rc)).abs() <= 1e-15);
        }
    }

    #[test]
    fn mlp_layer_count_and_activation_placement() {
        // 2 -> 3 -> 1 with silu between: y = w2 silu(w1 x + b1) + b2.
        let mut tape = Tape::new();
        let x = tape.leaf(TensorData::new(vec![1, 2], vec![0.7, -0.4]));
        let w1 = tape.constant(TensorData::new(vec![3, 2], vec![0.5, 0.1, -0.2, 0.8, 0.3, 0.3]));
        let b1 = tape.constant(TensorData::new(vec![3], vec![0.05, -0.1, 0.2]));
        let w2 = tape.constant(TensorData::new(vec![1, 3], vec![1.0, -0.5, 0.25]));
        let b2 = tape.constant(TensorData::new(vec![1], vec![0.3]));
        let y = mlp(&mut tape, x, &[(w1, Some(b1)), (w2, Some(b2))]);

        let silu = |v: Real| v / (1.0 + (-v).exp());
        let h: Vec<Real> = (0..3)
            .map(|i| {
                let pre = 0.7 * tape.value(w1).data()[2 * i] - 0.4 * tape.value(w1).data()[2 * i + 1]
                    + tape.value(b1).data()[i];
                silu(pre)
            })
            .collect();
        let expect = 1.0 * h[0] - 0.5 * h[1] + 0.25 * h[2] + 0.3;
        assert!((tape.value(y).data()[0] - expect).abs() <= 1e-12);
    }

    #[test]
    fn init_ranges() {
        let mut rng = StdRng::seed_from_u64(5);
        let w = init_fan_in_uniform(&mut rng, 16, 64);
        let bound = (1.0 / 64.0 as Real).sqrt();
        assert!(w.iter().all(|v| v.abs() < bound));
        let x = init_xavier_uniform(&mut rng, 8, 24);
        let xb = (6.0 / 32.0 as Real).sqrt();
        assert!(x.iter().all(|v| v.abs() < xb));
        // Normal init: mean near zero, variance near one on a large draw.
        let n = init_standard_normal(&mut rng, 20_000);
        let mean: Real = n.iter().sum::<Real>() / n.len() as Real;
        let var: Real = n.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n.len() as Real;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
