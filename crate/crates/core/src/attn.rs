//! Dense attention, projections, RMSNorm and SwiGLU with their exact
//! vector-Jacobian products.
//!
//! Attention is evaluated in row chunks, so the full `n x m` score matrix is
//! never materialised; the backward pass recomputes the probabilities chunk
//! by chunk from the saved inputs.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{shape_err, BsaError, Result};
use crate::real::Real;

const ROW_CHUNK: usize = 64;

/// Rows per chunk in the attention kernels.
pub fn row_chunk() -> usize {
    ROW_CHUNK
}

/// Q/K/V (and output) projection matrices for all heads, heads laid out
/// side by side along the columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights<T> {
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Option<Array2<T>>,
}

/// Projected queries, keys and values for every head.
#[derive(Debug, Clone)]
pub struct Qkv<T> {
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Real> Qkv<T> {
    pub fn head(&self, h: usize) -> (ArrayView2<'_, T>, ArrayView2<'_, T>, ArrayView2<'_, T>) {
        let cols = s![.., h * self.head_dim..(h + 1) * self.head_dim];
        (self.q.slice(cols), self.k.slice(cols), self.v.slice(cols))
    }
}

pub fn project_qkv<T: Real>(x: ArrayView2<'_, T>, w: &ProjectionWeights<T>, heads: usize) -> Result<Qkv<T>> {
    let c = x.ncols();
    for (name, m) in [("wq", &w.wq), ("wk", &w.wk), ("wv", &w.wv)] {
        if m.nrows() != c || m.ncols() != w.wq.ncols() {
            return Err(shape_err(format!(
                "{name} is {}x{}, expected {c}x{}",
                m.nrows(),
                m.ncols(),
                w.wq.ncols()
            )));
        }
    }
    if heads == 0 || w.wq.ncols() % heads != 0 {
        return Err(shape_err(format!(
            "{} projection columns do not split into {heads} heads",
            w.wq.ncols()
        )));
    }
    Ok(Qkv {
        q: x.dot(&w.wq),
        k: x.dot(&w.wk),
        v: x.dot(&w.wv),
        heads,
        head_dim: w.wq.ncols() / heads,
    })
}

fn check_attend_shapes<T: Real>(
    q: &ArrayView2<'_, T>,
    k: &ArrayView2<'_, T>,
    v: &ArrayView2<'_, T>,
    bias: Option<&ArrayView2<'_, T>>,
    key_mask: Option<&[bool]>,
) -> Result<()> {
    if q.ncols() == 0 || q.ncols() != k.ncols() {
        return Err(shape_err(format!("query dim {} vs key dim {}", q.ncols(), k.ncols())));
    }
    if k.nrows() != v.nrows() {
        return Err(shape_err(format!("{} keys vs {} values", k.nrows(), v.nrows())));
    }
    if k.nrows() == 0 {
        return Err(BsaError::FullyMasked { row: 0 });
    }
    if let Some(b) = bias {
        if b.dim() != (q.nrows(), k.nrows()) {
            return Err(shape_err(format!(
                "bias is {:?}, expected {}x{}",
                b.dim(),
                q.nrows(),
                k.nrows()
            )));
        }
        if b.iter().any(|&x| x == T::infinity() || x.is_nan()) {
            return Err(BsaError::InvalidInput("bias contains +inf or NaN".into()));
        }
    }
    if let Some(m) = key_mask {
        if m.len() != k.nrows() {
            return Err(shape_err(format!(
                "key mask has {} entries for {} keys",
                m.len(),
                k.nrows()
            )));
        }
    }
    // A row is fully masked when every key is masked out by the key mask or
    // by a mask-valued bias.
    let masked_cutoff = T::mask_value() / T::c(2.0);
    let admissible = |row: usize, col: usize| -> bool {
        key_mask.is_none_or(|m| m[col]) && bias.is_none_or(|b| b[[row, col]] > masked_cutoff)
    };
    if bias.is_none() {
        if !(0..k.nrows()).any(|j| admissible(0, j)) {
            return Err(BsaError::FullyMasked { row: 0 });
        }
    } else {
        for i in 0..q.nrows() {
            if !(0..k.nrows()).any(|j| admissible(i, j)) {
                return Err(BsaError::FullyMasked { row: i });
            }
        }
    }
    Ok(())
}

/// Attention probabilities for a chunk of query rows.
fn chunk_probs<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    bias: Option<ArrayView2<'_, T>>,
    key_mask: Option<&[bool]>,
    scale: T,
) -> Array2<T> {
    let mut s = q.dot(&k.t());
    if !s.is_standard_layout() {
        s = s.as_standard_layout().into_owned();
    }
    s.mapv_inplace(|x| x * scale);
    if let Some(b) = bias {
        s += &b;
    }
    if let Some(mask) = key_mask {
        for mut row in s.rows_mut() {
            for (x, &keep) in row.iter_mut().zip(mask) {
                if !keep {
                    *x = T::mask_value();
                }
            }
        }
    }
    for mut row in s.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("standard layout"));
    }
    s
}

/// Row softmax with max subtraction.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = sum.recip();
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// `softmax(Q K^T / sqrt(d) + bias) V`, with keys where `key_mask` is false
/// excluded.
pub fn attend<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    bias: Option<ArrayView2<'_, T>>,
    key_mask: Option<&[bool]>,
) -> Result<Array2<T>> {
    check_attend_shapes(&q, &k, &v, bias.as_ref(), key_mask)?;
    Ok(attend_unchecked(q, k, v, bias, key_mask))
}

pub(crate) fn attend_unchecked<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    bias: Option<ArrayView2<'_, T>>,
    key_mask: Option<&[bool]>,
) -> Array2<T> {
    let scale = T::c(q.ncols() as f64).sqrt().recip();
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    if q.nrows() <= ROW_CHUNK {
        let p = chunk_probs(q, k, bias, key_mask, scale);
        out.assign(&p.dot(&v));
        return out;
    }
    out.axis_chunks_iter_mut(Axis(0), ROW_CHUNK)
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut o)| {
            let r0 = ci * ROW_CHUNK;
            let qc = q.slice(s![r0..r0 + o.nrows(), ..]);
            let b = bias.map(|b| b.slice_move(s![r0..r0 + qc.nrows(), ..]));
            let p = chunk_probs(qc, k, b, key_mask, scale);
            o.assign(&p.dot(&v));
        });
    out
}

/// Gradients of [`attend`].
#[derive(Debug, Clone)]
pub struct AttendGrads<T> {
    pub dq: Array2<T>,
    pub dk: Array2<T>,
    pub dv: Array2<T>,
    /// Present only when the forward call had a bias.
    pub dbias: Option<Array2<T>>,
}

/// Saved inputs of one [`attend`] call.
#[derive(Debug, Clone)]
pub struct AttendWorkspace<T> {
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    bias: Option<Array2<T>>,
    key_mask: Option<Vec<bool>>,
}

/// [`attend`] that also returns the workspace needed by [`attend_vjp`].
pub fn attend_with_workspace<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    bias: Option<ArrayView2<'_, T>>,
    key_mask: Option<&[bool]>,
) -> Result<(Array2<T>, AttendWorkspace<T>)> {
    let out = attend(q, k, v, bias, key_mask)?;
    let ws = AttendWorkspace {
        q: q.to_owned(),
        k: k.to_owned(),
        v: v.to_owned(),
        bias: bias.map(|b| b.to_owned()),
        key_mask: key_mask.map(<[bool]>::to_vec),
    };
    Ok((out, ws))
}

pub fn attend_vjp<T: Real>(ws: &AttendWorkspace<T>, grad_out: ArrayView2<'_, T>) -> Result<AttendGrads<T>> {
    if grad_out.dim() != (ws.q.nrows(), ws.v.ncols()) {
        return Err(BsaError::StaleWorkspace(format!(
            "grad_out is {:?}, forward output was {}x{}",
            grad_out.dim(),
            ws.q.nrows(),
            ws.v.ncols()
        )));
    }
    Ok(attend_vjp_raw(
        ws.q.view(),
        ws.k.view(),
        ws.v.view(),
        ws.bias.as_ref().map(|b| b.view()),
        ws.key_mask.as_deref(),
        grad_out,
    ))
}

/// Backward of [`attend`] from its inputs; callers guarantee the inputs
/// passed the forward checks.
pub fn attend_vjp_raw<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    bias: Option<ArrayView2<'_, T>>,
    key_mask: Option<&[bool]>,
    grad_out: ArrayView2<'_, T>,
) -> AttendGrads<T> {
    let scale = T::c(q.ncols() as f64).sqrt().recip();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    let mut dbias = bias.map(|b| Array2::zeros(b.raw_dim()));
    let n = q.nrows();
    let mut r0 = 0;
    while r0 < n {
        let r1 = (r0 + ROW_CHUNK).min(n);
        let qc = q.slice(s![r0..r1, ..]);
        let go = grad_out.slice(s![r0..r1, ..]);
        let p = chunk_probs(qc, k, bias.map(|b| b.slice_move(s![r0..r1, ..])), key_mask, scale);
        dv += &p.t().dot(&go);
        let dp = go.dot(&v.t());
        let mut ds = &p * &dp;
        let row_dot = ds.sum_axis(Axis(1));
        Zip::from(ds.rows_mut())
            .and(p.rows())
            .and(&row_dot)
            .for_each(|mut d, pr, &rd| d.zip_mut_with(&pr, |x, &pv| *x -= pv * rd));
        if let Some(db) = dbias.as_mut() {
            db.slice_mut(s![r0..r1, ..]).assign(&ds);
        }
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(s![r0..r1, ..]).assign(&ds.dot(&k));
        dk += &ds.t().dot(&qc);
        r0 = r1;
    }
    AttendGrads { dq, dk, dv, dbias }
}

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise `x / sqrt(mean(x^2) + eps) * gain`.
pub fn rmsnorm<T: Real>(x: ArrayView2<'_, T>, gain: ArrayView1<'_, T>) -> Result<Array2<T>> {
    if x.ncols() == 0 || gain.len() != x.ncols() {
        return Err(shape_err(format!(
            "gain has {} entries for {} columns",
            gain.len(),
            x.ncols()
        )));
    }
    let mut y = x.to_owned();
    let inv_c = T::c(x.ncols() as f64).recip();
    let eps = T::c(RMS_EPS);
    for mut row in y.rows_mut() {
        let ms = row.iter().map(|&v| v * v).sum::<T>() * inv_c;
        let r = (ms + eps).sqrt().recip();
        row.zip_mut_with(&gain, |v, &g| *v = *v * r * g);
    }
    Ok(y)
}

/// Returns `(dx, dgain)`.
pub fn rmsnorm_vjp<T: Real>(
    x: ArrayView2<'_, T>,
    gain: ArrayView1<'_, T>,
    grad_out: ArrayView2<'_, T>,
) -> (Array2<T>, Array1<T>) {
    let c = x.ncols();
    let inv_c = T::c(c as f64).recip();
    let eps = T::c(RMS_EPS);
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dgain = Array1::zeros(c);
    for ((xr, gr), mut dr) in x.rows().into_iter().zip(grad_out.rows()).zip(dx.rows_mut()) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() * inv_c;
        let r = (ms + eps).sqrt().recip();
        let mut proj = T::zero();
        for j in 0..c {
            let xhat = xr[j] * r;
            dgain[j] += gr[j] * xhat;
            proj += gr[j] * gain[j] * xhat;
        }
        proj *= inv_c;
        for j in 0..c {
            dr[j] = r * (gr[j] * gain[j] - xr[j] * r * proj);
        }
    }
    (dx, dgain)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Weights of a SwiGLU feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct SwigluWeights<T> {
    pub w1: Array2<T>,
    pub w2: Array2<T>,
    pub w3: Array2<T>,
}

/// `(silu(x w1) * (x w2)) w3`.
pub fn swiglu<T: Real>(x: ArrayView2<'_, T>, w: &SwigluWeights<T>) -> Result<Array2<T>> {
    check_swiglu(x, w)?;
    let a = x.dot(&w.w1);
    let b = x.dot(&w.w2);
    let h = Zip::from(&a).and(&b).map_collect(|&a, &b| silu(a) * b);
    Ok(h.dot(&w.w3))
}

fn check_swiglu<T: Real>(x: ArrayView2<'_, T>, w: &SwigluWeights<T>) -> Result<()> {
    let (c, h) = w.w1.dim();
    if x.ncols() != c || w.w2.dim() != (c, h) || w.w3.dim() != (h, c) {
        return Err(shape_err(format!(
            "swiglu weights {:?}/{:?}/{:?} for input width {}",
            w.w1.dim(),
            w.w2.dim(),
            w.w3.dim(),
            x.ncols()
        )));
    }
    Ok(())
}

/// Returns `(dx, dw)`.
pub fn swiglu_vjp<T: Real>(
    x: ArrayView2<'_, T>,
    w: &SwigluWeights<T>,
    grad_out: ArrayView2<'_, T>,
) -> (Array2<T>, SwigluWeights<T>) {
    let a = x.dot(&w.w1);
    let b = x.dot(&w.w2);
    let h = Zip::from(&a).and(&b).map_collect(|&a, &b| silu(a) * b);
    let dw3 = h.t().dot(&grad_out);
    let dh = grad_out.dot(&w.w3.t());
    let da = Zip::from(&dh)
        .and(&a)
        .and(&b)
        .map_collect(|&g, &a, &b| g * b * silu_grad(a));
    let db = Zip::from(&dh).and(&a).map_collect(|&g, &a| g * silu(a));
    let dw1 = x.t().dot(&da);
    let dw2 = x.t().dot(&db);
    let dx = da.dot(&w.w1.t()) + db.dot(&w.w2.t());
    (
        dx,
        SwigluWeights {
            w1: dw1,
            w2: dw2,
            w3: dw3,
        },
    )
}
