//! Independent verification engines.
//!
//! Two tools live here: a central finite-difference gradient checker, and a
//! scalar reference implementation of one full training-mode attention step
//! (slice, interpolate, gate, cache update, both attention branches, mixing,
//! output projection). The reference deliberately shares no code with the
//! tensor or tape modules; everything is explicit loops over nested `Vec`s
//! so a systematic bug in the main library cannot hide in both places.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Floor inside the relative-error denominator so comparisons against
/// near-zero gradients stay meaningful.
pub const REL_ERR_FLOOR: f64 = 1e-12;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Central differences (f(x+eps) - f(x-eps)) / 2eps, one coordinate at a
/// time. `f` sees a scratch copy of `theta`; the original is untouched.
pub fn finite_diff_grad<F>(theta: &[f64], eps: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut scratch = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        scratch[i] = theta[i] + eps;
        let up = f(&scratch)?;
        scratch[i] = theta[i] - eps;
        let down = f(&scratch)?;
        scratch[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::oracle(format!(
                "non-finite evaluation while perturbing coordinate {i}"
            )));
        }
        grad[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Comparison between an analytic gradient and its finite-difference
/// estimate for one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64], tol: f64) -> Self {
        debug_assert_eq!(analytic.len(), numeric.len());
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for (&a, &n) in analytic.iter().zip(numeric) {
            max_rel = max_rel.max(rel_err(a, n));
            max_abs = max_abs.max((a - n).abs());
        }
        GradCheckReport {
            name: name.into(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed: max_rel < tol,
        }
    }
}

/// Upper bound on sizes the scalar reference accepts. It is written for
/// clarity, not speed, and larger instances defeat its purpose.
pub const REF_MAX_SEQ: usize = 4;
pub const REF_MAX_WIDTH: usize = 8;

/// All weights of one attention layer as plain nested vectors. Matrices are
/// stored row-major as `[input][output]`, applied as `y = x * W + b`.
#[derive(Debug, Clone)]
pub struct RefWeights {
    pub w_q: Vec<Vec<f64>>,
    pub w_k: Vec<Vec<f64>>,
    pub w_v: Vec<Vec<f64>>,
    pub w_o: Vec<Vec<f64>>,
    /// [D_m][D]: queries projected from the channel slice
    pub w_qbar: Vec<Vec<f64>>,
    /// [D_m][D]: keys projected from the cache
    pub w_kbar: Vec<Vec<f64>>,
    /// [D_m][D]: values projected from the cache, widened to D so per-head
    /// widths match the self branch
    pub w_vbar: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    /// [2*D_m][D_m]
    pub w_u: Vec<Vec<f64>>,
    pub w_r: Vec<Vec<f64>>,
    pub w_c: Vec<Vec<f64>>,
    pub b_u: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_c: Vec<f64>,
}

/// One training-step problem instance.
#[derive(Debug, Clone)]
pub struct RefInstance {
    pub b: usize,
    pub t: usize,
    pub t_m: usize,
    pub d: usize,
    pub d_m: usize,
    pub h: usize,
    /// [B][T][D]
    pub x: Vec<Vec<Vec<f64>>>,
    /// [T_m][D_m]
    pub c_prev: Vec<Vec<f64>>,
    /// Valid tokens per batch item; `None` means every item uses all T.
    pub lengths: Option<Vec<usize>>,
}

/// Output of the reference step: the updated cache and the layer output.
#[derive(Debug, Clone)]
pub struct RefStepOut {
    /// [T_m][D_m]
    pub c_t: Vec<Vec<f64>>,
    /// [B][T][D]
    pub output: Vec<Vec<Vec<f64>>>,
}

fn sig(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// y[j] = sum_i x[i] * w[i][j] + b[j]
fn affine(x: &[f64], w: &[Vec<f64>], b: Option<&[f64]>) -> Vec<f64> {
    let out = w[0].len();
    let mut y = vec![0.0; out];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i][j];
        }
    }
    if let Some(b) = b {
        for j in 0..out {
            y[j] += b[j];
        }
    }
    y
}

fn softmax(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Linear resampling of `rows[0..valid]` to `out_len` rows; position j
/// samples fraction j/(out_len-1) of the valid span.
fn interp_rows(rows: &[Vec<f64>], valid: usize, out_len: usize) -> Vec<Vec<f64>> {
    let width = rows[0].len();
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let p = if out_len == 1 {
            0.0
        } else {
            j as f64 * (valid - 1) as f64 / (out_len - 1) as f64
        };
        let i0 = p.floor() as usize;
        let w = p - i0 as f64;
        let mut row = vec![0.0; width];
        if w == 0.0 {
            row.copy_from_slice(&rows[i0]);
        } else {
            let i1 = (i0 + 1).min(valid - 1);
            for c in 0..width {
                row[c] = (1.0 - w) * rows[i0][c] + w * rows[i1][c];
            }
        }
        out.push(row);
    }
    out
}

/// One training-mode forward step of the full attention layer, evaluated
/// with explicit scalar loops: channel slice, interpolation, gated cache
/// update with batch averaging, self and cached attention, per-head mixing,
/// then the output projection. Sizes are capped; this is a golden source,
/// not a fast path.
pub fn reference_grc_step(inst: &RefInstance, w: &RefWeights) -> Result<RefStepOut> {
    let RefInstance { b, t, t_m, d, d_m, h, .. } = *inst;
    if b > REF_MAX_SEQ || t > REF_MAX_SEQ || t_m > REF_MAX_SEQ || d > REF_MAX_WIDTH {
        return Err(Error::oracle(format!(
            "reference step capped at B,T,T_m <= {REF_MAX_SEQ} and D <= {REF_MAX_WIDTH}, \
             got B={b} T={t} T_m={t_m} D={d}"
        )));
    }
    if d % h != 0 || d_m % h != 0 {
        return Err(Error::oracle(format!(
            "head count {h} must divide both D={d} and D_m={d_m}"
        )));
    }
    let dh = d / h;
    let dmh = d_m / h;

    // Channel slice: first d_m channels of every token.
    let xbar: Vec<Vec<Vec<f64>>> = inst
        .x
        .iter()
        .map(|item| item.iter().map(|tok| tok[..d_m].to_vec()).collect())
        .collect();

    // Per-item gated update against the shared previous cache, then the
    // batch mean becomes the new cache.
    let mut c_t = vec![vec![0.0; d_m]; t_m];
    for bi in 0..b {
        let valid = inst.lengths.as_ref().map_or(t, |ls| ls[bi]);
        let xi = interp_rows(&xbar[bi], valid, t_m);
        for s in 0..t_m {
            let mut cat: Vec<f64> = xi[s].clone();
            cat.extend_from_slice(&inst.c_prev[s]);
            let g_u: Vec<f64> = affine(&cat, &w.w_u, Some(&w.b_u))
                .into_iter()
                .map(sig)
                .collect();
            let g_r: Vec<f64> = affine(&cat, &w.w_r, Some(&w.b_r))
                .into_iter()
                .map(sig)
                .collect();
            let mut cat_reset: Vec<f64> = xi[s].clone();
            for c in 0..d_m {
                cat_reset.push(g_r[c] * inst.c_prev[s][c]);
            }
            let cand = affine(&cat_reset, &w.w_c, Some(&w.b_c));
            for c in 0..d_m {
                let updated = (1.0 - g_u[c]) * inst.c_prev[s][c] + g_u[c] * cand[c];
                c_t[s][c] += updated / b as f64;
            }
        }
    }

    // Self attention branch.
    let mut o_self = vec![vec![vec![0.0; d]; t]; b];
    for bi in 0..b {
        let q: Vec<Vec<f64>> = inst.x[bi].iter().map(|tok| affine(tok, &w.w_q, None)).collect();
        let k: Vec<Vec<f64>> = inst.x[bi].iter().map(|tok| affine(tok, &w.w_k, None)).collect();
        let v: Vec<Vec<f64>> = inst.x[bi].iter().map(|tok| affine(tok, &w.w_v, None)).collect();
        for hi in 0..h {
            let lo = hi * dh;
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for j in 0..t {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q[i][lo + c] * k[j][lo + c];
                    }
                    scores[j] = dot / (dh as f64).sqrt();
                }
                softmax(&mut scores);
                for j in 0..t {
                    for c in 0..dh {
                        o_self[bi][i][lo + c] += scores[j] * v[j][lo + c];
                    }
                }
            }
        }
    }

    // Cached attention branch: queries from the un-interpolated slice,
    // keys/values from the freshly updated cache, all projected to width D.
    // The softmax temperature stays sqrt(D_m/H) regardless.
    let kbar: Vec<Vec<f64>> = c_t.iter().map(|row| affine(row, &w.w_kbar, None)).collect();
    let vbar: Vec<Vec<f64>> = c_t.iter().map(|row| affine(row, &w.w_vbar, None)).collect();
    let mut o_mem = vec![vec![vec![0.0; d]; t]; b];
    for bi in 0..b {
        let qbar: Vec<Vec<f64>> = xbar[bi].iter().map(|tok| affine(tok, &w.w_qbar, None)).collect();
        for hi in 0..h {
            let lo = hi * dh;
            for i in 0..t {
                let mut scores = vec![0.0; t_m];
                for s in 0..t_m {
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += qbar[i][lo + c] * kbar[s][lo + c];
                    }
                    scores[s] = dot / (dmh as f64).sqrt();
                }
                softmax(&mut scores);
                for s in 0..t_m {
                    for c in 0..dh {
                        o_mem[bi][i][lo + c] += scores[s] * vbar[s][lo + c];
                    }
                }
            }
        }
    }

    // Per-head sigmoid mixing, then the output projection.
    let mut output = vec![vec![vec![0.0; d]; t]; b];
    for bi in 0..b {
        for i in 0..t {
            let mut mixed = vec![0.0; d];
            for hi in 0..h {
                let ratio = sig(w.lambda[hi]);
                for c in hi * dh..(hi + 1) * dh {
                    mixed[c] = ratio * o_mem[bi][i][c] + (1.0 - ratio) * o_self[bi][i][c];
                }
            }
            output[bi][i] = affine(&mixed, &w.w_o, None);
        }
    }

    Ok(RefStepOut { c_t, output })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_weights(d: usize, d_m: usize, h: usize) -> RefWeights {
        RefWeights {
            w_q: vec![vec![0.0; d]; d],
            w_k: vec![vec![0.0; d]; d],
            w_v: vec![vec![0.0; d]; d],
            w_o: vec![vec![0.0; d]; d],
            w_qbar: vec![vec![0.0; d]; d_m],
            w_kbar: vec![vec![0.0; d]; d_m],
            w_vbar: vec![vec![0.0; d]; d_m],
            lambda: vec![0.0; h],
            w_u: vec![vec![0.0; d_m]; 2 * d_m],
            w_r: vec![vec![0.0; d_m]; 2 * d_m],
            w_c: vec![vec![0.0; d_m]; 2 * d_m],
            b_u: vec![0.0; d_m],
            b_r: vec![0.0; d_m],
            b_c: vec![0.0; d_m],
        }
    }

    fn zero_instance(b: usize, t: usize, t_m: usize, d: usize, d_m: usize, h: usize) -> RefInstance {
        RefInstance {
            b,
            t,
            t_m,
            d,
            d_m,
            h,
            x: vec![vec![vec![0.0; d]; t]; b],
            c_prev: vec![vec![0.0; d_m]; t_m],
            lengths: None,
        }
    }

    #[test]
    fn zero_everything_gives_zero_output_and_cache() {
        let inst = zero_instance(2, 2, 2, 4, 2, 2);
        let w = zero_weights(4, 2, 2);
        let out = reference_grc_step(&inst, &w).unwrap();
        for row in &out.c_t {
            assert!(row.iter().all(|&v| v == 0.0), "cache row {row:?}");
        }
        for item in &out.output {
            for tok in item {
                assert!(tok.iter().all(|&v| v == 0.0), "output token {tok:?}");
            }
        }
    }

    #[test]
    fn size_cap_is_enforced() {
        let inst = zero_instance(1, 5, 2, 4, 2, 2);
        let w = zero_weights(4, 2, 2);
        let err = reference_grc_step(&inst, &w).unwrap_err();
        assert!(matches!(err, Error::Oracle(_)), "got {err:?}");
    }

    #[test]
    fn update_gate_bias_minus_inf_keeps_previous_cache() {
        let mut inst = zero_instance(1, 2, 2, 4, 2, 1);
        inst.c_prev = vec![vec![0.7, -0.3], vec![0.1, 0.9]];
        inst.x = vec![vec![vec![0.5, -0.5, 0.25, 0.0], vec![1.0, 2.0, -1.0, 0.5]]];
        let mut w = zero_weights(4, 2, 1);
        w.b_u = vec![-1e9, -1e9];
        let out = reference_grc_step(&inst, &w).unwrap();
        for s in 0..2 {
            for c in 0..2 {
                assert!(
                    (out.c_t[s][c] - inst.c_prev[s][c]).abs() < 1e-12,
                    "cache moved at [{s}][{c}]"
                );
            }
        }
    }

    #[test]
    fn lambda_zero_output_is_branch_midpoint() {
        // With lambda at zero the mixed pre-projection signal is the average
        // of the two branches; compare against runs where each branch is
        // isolated by saturating lambda.
        let mut inst = zero_instance(1, 2, 2, 2, 2, 1);
        inst.x = vec![vec![vec![0.4, -0.2], vec![-0.6, 0.8]]];
        inst.c_prev = vec![vec![0.3, 0.1], vec![-0.2, 0.5]];
        let mut w = zero_weights(2, 2, 1);
        // Identity-ish weights so both branches are non-trivial.
        for i in 0..2 {
            w.w_q[i][i] = 1.0;
            w.w_k[i][i] = 0.5;
            w.w_v[i][i] = 1.0;
            w.w_o[i][i] = 1.0;
            w.w_qbar[i][i] = 0.8;
            w.w_kbar[i][i] = 1.0;
            w.w_vbar[i][i] = 1.0;
            w.w_c[i][i] = 0.9;
        }
        w.w_u[0][0] = 0.3;
        w.w_r[3][1] = -0.4;

        let mid = reference_grc_step(&inst, &w).unwrap();
        let mut w_self = w.clone();
        w_self.lambda = vec![-1e4];
        let only_self = reference_grc_step(&inst, &w_self).unwrap();
        let mut w_mem = w.clone();
        w_mem.lambda = vec![1e4];
        let only_mem = reference_grc_step(&inst, &w_mem).unwrap();

        for i in 0..2 {
            for c in 0..2 {
                let expect = 0.5 * (only_self.output[0][i][c] + only_mem.output[0][i][c]);
                assert!(
                    (mid.output[0][i][c] - expect).abs() < 1e-12,
                    "midpoint mismatch at token {i} channel {c}"
                );
            }
        }
    }

    #[test]
    fn finite_diff_matches_simple_analytic_gradients() {
        // f(x) = x0^2 + 3*x1 has gradient (2*x0, 3).
        let theta = [3.0, -1.25];
        let g = finite_diff_grad(&theta, 1e-5, |p| Ok(p[0] * p[0] + 3.0 * p[1])).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8, "quadratic coordinate: {}", g[0]);
        assert!((g[1] - 3.0).abs() < 1e-9, "linear coordinate: {}", g[1]);
    }

    #[test]
    fn finite_diff_reports_non_finite_coordinate() {
        let theta = [1.0];
        let err = finite_diff_grad(&theta, 0.5, |p| Ok((1.0 / (p[0] - 1.5)).abs().ln()))
            .map(|_| ())
            .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)), "got {err:?}");
    }

    #[test]
    fn report_flags_mismatched_gradients() {
        let good = GradCheckReport::compare("w", &[1.0, 2.0], &[1.0 + 1e-9, 2.0], 1e-5);
        assert!(good.passed, "rel err {}", good.max_rel_err);
        let bad = GradCheckReport::compare("w", &[1.0, 2.0], &[1.1, 2.0], 1e-5);
        assert!(!bad.passed);
        assert!((bad.max_abs_err - 0.1).abs() < 1e-12);
    }
}
