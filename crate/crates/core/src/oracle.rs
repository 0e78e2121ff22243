//! Slow, independent reference implementations.
//!
//! Nothing here calls into the kernels it is used to check: every routine is
//! written with plain index loops over `f64`, so a shared bug cannot cancel
//! out. They are meant for sequences of a few hundred tokens at most.

use ndarray::{Array2, ArrayView2};

use crate::real::Precision;

/// Dense `softmax(Q K^T / sqrt(d) + bias) V` with per-row max subtraction.
/// Keys with `key_mask[j] == false` get zero weight.
pub fn dense_reference(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    bias: Option<ArrayView2<'_, f64>>,
    key_mask: Option<&[bool]>,
) -> Array2<f64> {
    let (n, d) = q.dim();
    let m = k.nrows();
    let dv = v.ncols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Array2::zeros((n, dv));
    let mut scores = vec![0.0; m];
    for i in 0..n {
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            if key_mask.is_some_and(|mask| !mask[j]) {
                scores[j] = f64::NEG_INFINITY;
                continue;
            }
            let mut s = 0.0;
            for c in 0..d {
                s += q[[i, c]] * k[[j, c]];
            }
            s *= scale;
            if let Some(b) = bias {
                s += b[[i, j]];
            }
            scores[j] = s;
            if s > max {
                max = s;
            }
        }
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = if s.is_finite() { (*s - max).exp() } else { 0.0 };
            total += *s;
        }
        for j in 0..m {
            let w = scores[j] / total;
            if w == 0.0 {
                continue;
            }
            for c in 0..dv {
                out[[i, c]] += w * v[[j, c]];
            }
        }
    }
    out
}

/// Indices of the `k` largest non-excluded scores, ties to the lowest index,
/// returned ascending. Implemented as a full stable sort.
pub fn brute_force_topk(scores: &[f64], k: usize, excluded: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable: equal scores keep ascending index order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut picked: Vec<usize> = order.into_iter().filter(|&j| !excluded[j]).take(k).collect();
    picked.sort_unstable();
    picked
}

/// Ball attention as a block-diagonal dense computation: each length
/// `ball_size` run of rows attends only inside itself. Padded rows
/// (`valid[i] == false`) are excluded as keys and produce zero rows.
pub fn ball_reference(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    ball_size: usize,
    valid: &[bool],
) -> Array2<f64> {
    let n = q.nrows();
    let mut out = Array2::zeros((n, v.ncols()));
    for start in (0..n).step_by(ball_size) {
        let end = start + ball_size;
        let qs = q.slice(ndarray::s![start..end, ..]);
        let ks = k.slice(ndarray::s![start..end, ..]);
        let vs = v.slice(ndarray::s![start..end, ..]);
        let mask = &valid[start..end];
        if !mask.iter().any(|&x| x) {
            continue;
        }
        let o = dense_reference(qs, ks, vs, None, Some(mask));
        for i in 0..ball_size {
            if valid[start + i] {
                for c in 0..v.ncols() {
                    out[[start + i, c]] = o[[i, c]];
                }
            }
        }
    }
    out
}

/// Selection attention by materialising, for every query row, the gathered
/// key/value rows of its block set and running dense attention on them.
pub fn selection_reference(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    blocks_for_row: &[Vec<usize>],
    block_len: usize,
    valid: &[bool],
) -> Array2<f64> {
    let n = q.nrows();
    let d = k.ncols();
    let mut out = Array2::zeros((n, v.ncols()));
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        let rows: Vec<usize> = blocks_for_row[i]
            .iter()
            .flat_map(|&b| b * block_len..(b + 1) * block_len)
            .collect();
        let mut kg = Array2::zeros((rows.len(), d));
        let mut vg = Array2::zeros((rows.len(), v.ncols()));
        let mut mask = Vec::with_capacity(rows.len());
        for (r, &src) in rows.iter().enumerate() {
            for c in 0..d {
                kg[[r, c]] = k[[src, c]];
            }
            for c in 0..v.ncols() {
                vg[[r, c]] = v[[src, c]];
            }
            mask.push(valid[src]);
        }
        let qi = q.slice(ndarray::s![i..i + 1, ..]);
        let o = dense_reference(qi, kg.view(), vg.view(), None, Some(&mask));
        for c in 0..v.ncols() {
            out[[i, c]] = o[[0, c]];
        }
    }
    out
}

/// Mean of the valid rows of each length-`block_len` block; blocks without
/// valid rows give zero rows.
pub fn block_mean_reference(t: ArrayView2<'_, f64>, block_len: usize, valid: &[bool]) -> Array2<f64> {
    let n_blocks = t.nrows().div_ceil(block_len);
    let mut out = Array2::zeros((n_blocks, t.ncols()));
    for b in 0..n_blocks {
        let mut count = 0usize;
        for r in b * block_len..((b + 1) * block_len).min(t.nrows()) {
            if valid[r] {
                count += 1;
                for c in 0..t.ncols() {
                    out[[b, c]] += t[[r, c]];
                }
            }
        }
        if count > 0 {
            for c in 0..t.ncols() {
                out[[b, c]] /= count as f64;
            }
        }
    }
    out
}

/// Outcome of a finite-difference VJP check.
#[derive(Debug, Clone, PartialEq)]
pub struct FdCheckReport {
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)` with
    /// `floor = 1e-3 * max_i |n_i|` (at least `1e-12`).
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coordinate: usize,
    pub step: f64,
    pub precision: Precision,
    /// The step is too coarse for a trustworthy central difference.
    pub step_too_large: bool,
}

impl FdCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol && !self.step_too_large
    }
}

/// Largest step accepted without flagging the report.
pub const MAX_TRUSTED_STEP: f64 = 1e-3;

/// Compares an analytic VJP `analytic = J(x)^T grad_out` of `f` against
/// central differences of `<grad_out, f(x)>`, one coordinate at a time.
pub fn fd_vjp_check<F>(f: F, x: &[f64], grad_out: &[f64], analytic: &[f64], step: f64) -> FdCheckReport
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(x.len(), analytic.len(), "one analytic entry per input coordinate");
    let objective = |p: &[f64]| -> f64 {
        let y = f(p);
        assert_eq!(y.len(), grad_out.len(), "grad_out must match the output length");
        y.iter().zip(grad_out).map(|(a, b)| a * b).sum()
    };
    let mut point = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + step;
        let up = objective(&point);
        point[i] = orig - step;
        let down = objective(&point);
        point[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut report = FdCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: 0,
        step,
        precision: Precision::High,
        step_too_large: step > MAX_TRUSTED_STEP,
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_coordinate = i;
        }
    }
    report
}
