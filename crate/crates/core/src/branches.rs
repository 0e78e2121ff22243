//! The three sparse branches, all operating on sequences in ball-tree order.
//!
//! * Compression pools every length-`block_len` block of keys and values into
//!   one coarse token and lets each query attend to all coarse tokens.
//! * Selection scores the coarse keys against queries (or query groups),
//!   keeps the `top_k` best blocks per group and attends to their tokens.
//! * Ball attention is dense attention inside each ball.
//!
//! Padded slots never act as keys. Their query rows are zero in ball
//! attention; the other branches compute them and the fused layer output
//! zeroes them.

use std::cmp::Ordering;
use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::attn::{attend, attend_unchecked, attend_vjp_raw, row_chunk, silu, silu_grad};
use crate::config::PhiKind;
use crate::error::{shape_err, BsaError, Result};
use crate::geom::BallTree;
use crate::real::Real;

/// Block compressor weights.
#[derive(Debug, Clone, PartialEq)]
pub enum PhiWeights<T> {
    Mean,
    /// `flat (block_len * d) -> w1 -> SiLU -> w2 -> d`.
    Mlp {
        w1: Array2<T>,
        w2: Array2<T>,
    },
}

impl<T: Real> PhiWeights<T> {
    pub fn kind(&self) -> PhiKind {
        match self {
            PhiWeights::Mean => PhiKind::Mean,
            PhiWeights::Mlp { .. } => PhiKind::Mlp,
        }
    }

    /// Random MLP weights with fan-in scaling, or `Mean`.
    pub fn init<R: Rng>(kind: PhiKind, block_len: usize, dim: usize, rng: &mut R) -> Self {
        match kind {
            PhiKind::Mean => PhiWeights::Mean,
            PhiKind::Mlp => {
                let hidden = 2 * dim;
                let fan_in = block_len * dim;
                let s1 = (1.0 / fan_in as f64).sqrt();
                let s2 = (1.0 / hidden as f64).sqrt();
                let mut draw = |r, c, s: f64| {
                    Array2::from_shape_simple_fn((r, c), || {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        T::c(z * s)
                    })
                };
                let w1 = draw(fan_in, hidden, s1);
                let w2 = draw(hidden, dim, s2);
                PhiWeights::Mlp { w1, w2 }
            }
        }
    }

    /// MLP weights that reproduce their input exactly for `block_len == 1`,
    /// using `silu(x) - silu(-x) = x`.
    pub fn identity_mlp(dim: usize) -> Self {
        let mut w1 = Array2::zeros((dim, 2 * dim));
        let mut w2 = Array2::zeros((2 * dim, dim));
        for i in 0..dim {
            w1[[i, i]] = T::one();
            w1[[i, dim + i]] = -T::one();
            w2[[i, i]] = T::one();
            w2[[dim + i, i]] = -T::one();
        }
        PhiWeights::Mlp { w1, w2 }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            PhiWeights::Mean => PhiWeights::Mean,
            PhiWeights::Mlp { w1, w2 } => PhiWeights::Mlp {
                w1: Array2::zeros(w1.raw_dim()),
                w2: Array2::zeros(w2.raw_dim()),
            },
        }
    }

    fn check(&self, block_len: usize, dim: usize) -> Result<()> {
        if let PhiWeights::Mlp { w1, w2 } = self {
            if w1.nrows() != block_len * dim || w2.ncols() != dim || w1.ncols() != w2.nrows() {
                return Err(shape_err(format!(
                    "phi weights {:?}/{:?} for blocks of {block_len}x{dim}",
                    w1.dim(),
                    w2.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Coarse tokens produced by [`compress_blocks`].
#[derive(Debug, Clone)]
pub struct Compressed<T> {
    pub tokens: Array2<T>,
    /// False for blocks without a single valid row.
    pub valid: Vec<bool>,
    counts: Vec<usize>,
    /// MLP pre-activations, kept for the backward pass.
    pre: Option<Array2<T>>,
    flat: Option<Array2<T>>,
}

/// Per-block mean over valid rows, summing in row order. Blocks without a
/// valid row fall back to the plain mean (zero for zero-filled padding).
fn masked_block_means<T: Real>(t: ArrayView2<'_, T>, size: usize, valid: &[bool]) -> (Array2<T>, Vec<usize>) {
    let n_units = t.nrows().div_ceil(size);
    let mut out = Array2::zeros((n_units, t.ncols()));
    let mut counts = Vec::with_capacity(n_units);
    for (u, mut row) in out.rows_mut().into_iter().enumerate() {
        let rows = u * size..((u + 1) * size).min(t.nrows());
        let mut count = 0;
        for r in rows.clone() {
            if valid[r] {
                row += &t.row(r);
                count += 1;
            }
        }
        if count == 0 {
            for r in rows.clone() {
                row += &t.row(r);
            }
            row /= T::c(rows.len() as f64);
        } else {
            row /= T::c(count as f64);
        }
        counts.push(count);
    }
    (out, counts)
}

/// Maps each length-`block_len` block of `t` to one coarse token.
pub fn compress_blocks<T: Real>(
    t: ArrayView2<'_, T>,
    block_len: usize,
    phi: &PhiWeights<T>,
    valid: &[bool],
) -> Result<Compressed<T>> {
    if block_len == 0 {
        return Err(BsaError::InvalidArgument("block_len must be >= 1".into()));
    }
    if valid.len() != t.nrows() {
        return Err(shape_err(format!(
            "{} validity flags for {} rows",
            valid.len(),
            t.nrows()
        )));
    }
    phi.check(block_len, t.ncols())?;
    let n_blocks = t.nrows().div_ceil(block_len);
    let counts: Vec<usize> = (0..n_blocks)
        .map(|b| {
            (b * block_len..((b + 1) * block_len).min(t.nrows()))
                .filter(|&r| valid[r])
                .count()
        })
        .collect();
    let block_valid: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    match phi {
        PhiWeights::Mean => {
            let (mut tokens, counts) = masked_block_means(t, block_len, valid);
            for (mut row, &c) in tokens.rows_mut().into_iter().zip(&counts) {
                if c == 0 {
                    row.fill(T::zero());
                }
            }
            Ok(Compressed {
                tokens,
                valid: block_valid,
                counts,
                pre: None,
                flat: None,
            })
        }
        PhiWeights::Mlp { w1, w2 } => {
            let d = t.ncols();
            let mut flat = Array2::zeros((n_blocks, block_len * d));
            for (r, &ok) in valid.iter().enumerate().take(t.nrows()) {
                if ok {
                    let (b, off) = (r / block_len, r % block_len);
                    flat.slice_mut(s![b, off * d..(off + 1) * d]).assign(&t.row(r));
                }
            }
            let pre = flat.dot(w1);
            let hidden = pre.mapv(silu);
            let mut tokens = hidden.dot(w2);
            for (mut row, &ok) in tokens.rows_mut().into_iter().zip(&block_valid) {
                if !ok {
                    row.fill(T::zero());
                }
            }
            Ok(Compressed {
                tokens,
                valid: block_valid,
                counts,
                pre: Some(pre),
                flat: Some(flat),
            })
        }
    }
}

/// Backward of [`compress_blocks`]. Returns the gradient for `t` (zero on
/// padded rows) and, for the MLP compressor, its weight gradients.
pub fn compress_blocks_vjp<T: Real>(
    n_rows: usize,
    block_len: usize,
    phi: &PhiWeights<T>,
    valid: &[bool],
    comp: &Compressed<T>,
    grad: ArrayView2<'_, T>,
) -> (Array2<T>, PhiWeights<T>) {
    let d = grad.ncols();
    let mut dt = Array2::zeros((n_rows, d));
    match phi {
        PhiWeights::Mean => {
            for (r, &ok) in valid.iter().enumerate().take(n_rows) {
                let b = r / block_len;
                if ok && comp.valid[b] {
                    let inv = T::c(comp.counts[b] as f64).recip();
                    dt.row_mut(r).zip_mut_with(&grad.row(b), |x, &g| *x = g * inv);
                }
            }
            (dt, PhiWeights::Mean)
        }
        PhiWeights::Mlp { w1, w2 } => {
            let pre = comp.pre.as_ref().expect("mlp forward keeps pre-activations");
            let flat = comp.flat.as_ref().expect("mlp forward keeps inputs");
            let mut g = grad.to_owned();
            for (mut row, &ok) in g.rows_mut().into_iter().zip(&comp.valid) {
                if !ok {
                    row.fill(T::zero());
                }
            }
            let hidden = pre.mapv(silu);
            let dw2 = hidden.t().dot(&g);
            let dh = g.dot(&w2.t());
            let dpre = Zip::from(&dh).and(pre).map_collect(|&g, &p| g * silu_grad(p));
            let dw1 = flat.t().dot(&dpre);
            let dflat = dpre.dot(&w1.t());
            for (r, &ok) in valid.iter().enumerate().take(n_rows) {
                if ok {
                    let (b, off) = (r / block_len, r % block_len);
                    dt.row_mut(r).assign(&dflat.slice(s![b, off * d..(off + 1) * d]));
                }
            }
            (dt, PhiWeights::Mlp { w1: dw1, w2: dw2 })
        }
    }
}

/// Every query attends to all valid coarse tokens.
pub fn compressed_attention<T: Real>(
    q: ArrayView2<'_, T>,
    kc: ArrayView2<'_, T>,
    vc: ArrayView2<'_, T>,
    coarse_valid: &[bool],
) -> Result<Array2<T>> {
    attend(q, kc, vc, None, Some(coarse_valid))
}

/// Returns `(dq, dkc, dvc)`.
pub fn compressed_attention_vjp<T: Real>(
    q: ArrayView2<'_, T>,
    kc: ArrayView2<'_, T>,
    vc: ArrayView2<'_, T>,
    coarse_valid: &[bool],
    grad: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let g = attend_vjp_raw(q, kc, vc, None, Some(coarse_valid), grad);
    (g.dq, g.dk, g.dv)
}

/// Compressed attention at coarse query resolution; each coarse output row
/// is repeated `block_len` times.
pub fn group_compressed_attention<T: Real>(
    qc: ArrayView2<'_, T>,
    kc: ArrayView2<'_, T>,
    vc: ArrayView2<'_, T>,
    coarse_valid: &[bool],
    block_len: usize,
) -> Result<Array2<T>> {
    let coarse = attend(qc, kc, vc, None, Some(coarse_valid))?;
    Ok(repeat_rows(coarse.view(), block_len))
}

pub fn repeat_rows<T: Real>(x: ArrayView2<'_, T>, times: usize) -> Array2<T> {
    let mut out = Array2::zeros((x.nrows() * times, x.ncols()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&x.row(i / times));
    }
    out
}

/// Adjoint of [`repeat_rows`]: sums each run of `times` rows.
pub fn sum_row_runs<T: Real>(x: ArrayView2<'_, T>, times: usize) -> Array2<T> {
    let mut out = Array2::zeros((x.nrows().div_ceil(times), x.ncols()));
    for (i, row) in x.rows().into_iter().enumerate() {
        let mut o = out.row_mut(i / times);
        o += &row;
    }
    out
}

/// Returns `(dqc, dkc, dvc)`.
pub fn group_compressed_attention_vjp<T: Real>(
    qc: ArrayView2<'_, T>,
    kc: ArrayView2<'_, T>,
    vc: ArrayView2<'_, T>,
    coarse_valid: &[bool],
    block_len: usize,
    grad: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let g_coarse = sum_row_runs(grad, block_len);
    let g = attend_vjp_raw(qc, kc, vc, None, Some(coarse_valid), g_coarse.view());
    (g.dq, g.dk, g.dv)
}

/// Raw dot-product similarities `qs kc^T` (no scaling, no softmax).
pub fn importance_scores<T: Real>(qs: ArrayView2<'_, T>, kc: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if qs.ncols() != kc.ncols() {
        return Err(shape_err(format!("query dim {} vs key dim {}", qs.ncols(), kc.ncols())));
    }
    Ok(qs.dot(&kc.t()))
}

/// Mean of each contiguous group of `g` rows, over valid rows only when
/// `valid` is given.
pub fn group_average_scores<T: Real>(s: ArrayView2<'_, T>, g: usize, valid: Option<&[bool]>) -> Result<Array2<T>> {
    group_means(s, g, valid)
}

/// Pooled query of each contiguous group of `g` rows.
pub fn pool_group_queries<T: Real>(q: ArrayView2<'_, T>, g: usize, valid: Option<&[bool]>) -> Result<Array2<T>> {
    group_means(q, g, valid)
}

fn group_means<T: Real>(x: ArrayView2<'_, T>, g: usize, valid: Option<&[bool]>) -> Result<Array2<T>> {
    if g == 0 {
        return Err(BsaError::InvalidArgument("group size must be >= 1".into()));
    }
    let all;
    let valid = match valid {
        Some(v) if v.len() != x.nrows() => {
            return Err(shape_err(format!("{} validity flags for {} rows", v.len(), x.nrows())))
        }
        Some(v) => v,
        None => {
            all = vec![true; x.nrows()];
            &all
        }
    };
    Ok(masked_block_means(x, g, valid).0)
}

/// The granularity at which a ball mask is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskUnit {
    /// One row per token.
    Query,
    /// One row per contiguous group of this many tokens.
    Group(usize),
    /// One row per coarse (block) token.
    CoarseGroup,
}

/// Blocks excluded from selection because they lie inside the unit's own
/// ball. Stored as one excluded block range per unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    excluded: Vec<Range<usize>>,
    n_blocks: usize,
}

impl BlockMask {
    pub fn n_units(&self) -> usize {
        self.excluded.len()
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn is_excluded(&self, unit: usize, block: usize) -> bool {
        self.excluded[unit].contains(&block)
    }

    pub fn excluded_range(&self, unit: usize) -> Range<usize> {
        self.excluded[unit].clone()
    }

    pub fn row(&self, unit: usize) -> Vec<bool> {
        (0..self.n_blocks).map(|j| self.is_excluded(unit, j)).collect()
    }

    pub fn to_dense(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.n_units(), self.n_blocks), |(u, j)| self.is_excluded(u, j))
    }
}

/// Entry `(u, j)` is true when block `j` lies entirely inside the ball that
/// contains unit `u`.
pub fn ball_block_mask(tree: &BallTree, block_len: usize, unit: MaskUnit, enabled: bool) -> Result<BlockMask> {
    let n = tree.n_padded();
    let m = tree.ball_size();
    if block_len == 0 || m % block_len != 0 {
        return Err(BsaError::InvalidConfig(format!(
            "ball_size {m} is not divisible by block_len {block_len}"
        )));
    }
    let unit_len = match unit {
        MaskUnit::Query => 1,
        MaskUnit::Group(g) => g,
        MaskUnit::CoarseGroup => block_len,
    };
    if unit_len == 0 || m % unit_len != 0 {
        return Err(BsaError::InvalidConfig(format!(
            "units of {unit_len} tokens straddle balls of {m}"
        )));
    }
    let n_blocks = n / block_len;
    let excluded = (0..n / unit_len)
        .map(|u| {
            if enabled {
                let ball = tree.ball_of(u * unit_len);
                ball * m / block_len..(ball + 1) * m / block_len
            } else {
                0..0
            }
        })
        .collect();
    Ok(BlockMask { excluded, n_blocks })
}

/// Tie handling in top-k. Only `LowestIndex` is used by the layer; the other
/// rule exists so the check suite can prove it detects a wrong tie rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    LowestIndex,
    HighestIndex,
}

/// Indices of the `k` largest scores that are not excluded, ties toward the
/// lowest index, sorted ascending.
pub fn select_topk<T: Real>(scores: &[T], k: usize, excluded: &[bool]) -> Result<Vec<usize>> {
    select_topk_with(scores, k, |j| excluded[j], TieBreak::LowestIndex)
}

pub fn select_topk_with<T: Real>(
    scores: &[T],
    k: usize,
    excluded: impl Fn(usize) -> bool,
    tie: TieBreak,
) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&j| !excluded(j)).collect();
    if k > candidates.len() {
        return Err(BsaError::InvalidConfig(format!(
            "top_k {k} exceeds {} candidate blocks",
            candidates.len()
        )));
    }
    let rank = |a: &usize, b: &usize| -> Ordering {
        let by_score = scores[*b].to_f64().total_cmp(&scores[*a].to_f64());
        match tie {
            TieBreak::LowestIndex => by_score.then(a.cmp(b)),
            TieBreak::HighestIndex => by_score.then(b.cmp(a)),
        }
    };
    if k < candidates.len() && k > 0 {
        candidates.select_nth_unstable_by(k - 1, rank);
    }
    candidates.truncate(k);
    candidates.sort_unstable();
    Ok(candidates)
}

/// Selected blocks per query group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionPlan {
    group_size: usize,
    block_len: usize,
    top_k: usize,
    n_padded: usize,
    /// `n_groups * top_k` block indices, ascending within each group.
    blocks: Vec<usize>,
}

impl SelectionPlan {
    pub fn new(
        group_size: usize,
        block_len: usize,
        top_k: usize,
        n_padded: usize,
        per_group: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n_blocks = n_padded / block_len;
        if group_size == 0 || n_padded % group_size != 0 || per_group.len() != n_padded / group_size {
            return Err(BsaError::InvalidArgument(format!(
                "{} groups of {group_size} do not tile {n_padded} tokens",
                per_group.len()
            )));
        }
        let mut blocks = Vec::with_capacity(per_group.len() * top_k);
        for set in per_group {
            if set.len() != top_k || set.windows(2).any(|w| w[0] >= w[1]) || set.iter().any(|&b| b >= n_blocks) {
                return Err(BsaError::InvalidArgument(format!("malformed block set {set:?}")));
            }
            blocks.extend(set);
        }
        Ok(Self {
            group_size,
            block_len,
            top_k,
            n_padded,
            blocks,
        })
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn n_padded(&self) -> usize {
        self.n_padded
    }

    pub fn n_groups(&self) -> usize {
        self.n_padded / self.group_size
    }

    pub fn group_of(&self, token: usize) -> usize {
        token / self.group_size
    }

    pub fn group_tokens(&self, group: usize) -> Range<usize> {
        group * self.group_size..(group + 1) * self.group_size
    }

    pub fn blocks_for_group(&self, group: usize) -> &[usize] {
        &self.blocks[group * self.top_k..(group + 1) * self.top_k]
    }

    pub fn blocks_for_token(&self, token: usize) -> &[usize] {
        self.blocks_for_group(self.group_of(token))
    }

    /// Token positions gathered for `group`, in ascending block order.
    pub fn gathered_rows(&self, group: usize) -> impl Iterator<Item = usize> + '_ {
        let l = self.block_len;
        self.blocks_for_group(group)
            .iter()
            .flat_map(move |&b| b * l..(b + 1) * l)
    }
}

/// How selection scores are formed.
#[derive(Debug, Clone, Copy)]
pub enum ScoreSource<'a, T> {
    /// Per-token queries; each unit of `group_size` tokens averages its
    /// valid tokens' scores (`group_size == 1` means per-token selection).
    Tokens { q: ArrayView2<'a, T>, group_size: usize },
    /// Coarse queries (one per block); a group spans `group_size / block_len`
    /// coarse rows whose valid scores are averaged.
    Coarse {
        qc: ArrayView2<'a, T>,
        qc_valid: &'a [bool],
        group_size: usize,
    },
}

/// Output of [`plan_selection`].
#[derive(Debug, Clone)]
pub struct PlannedSelection<T> {
    pub plan: SelectionPlan,
    /// Group-by-block score matrix, kept when it is small.
    pub scores: Option<Array2<T>>,
}

/// Largest score matrix (entries) retained for inspection.
pub const MAX_RETAINED_SCORES: usize = 1 << 20;

/// Scores every group against the coarse keys and keeps the `top_k`
/// admissible blocks. Excluded are in-ball blocks (when `ball_masking`) and
/// blocks without a valid token.
#[allow(clippy::too_many_arguments)]
pub fn plan_selection<T: Real>(
    source: ScoreSource<'_, T>,
    kc: ArrayView2<'_, T>,
    kc_valid: &[bool],
    tree: &BallTree,
    block_len: usize,
    top_k: usize,
    ball_masking: bool,
    tie: TieBreak,
) -> Result<PlannedSelection<T>> {
    let n = tree.n_padded();
    let valid = tree.valid_mask();
    let n_blocks = kc.nrows();
    if n_blocks * block_len != n || kc_valid.len() != n_blocks {
        return Err(shape_err(format!(
            "{n_blocks} coarse keys of length {block_len} for {n} tokens"
        )));
    }
    let group_size = match source {
        ScoreSource::Tokens { group_size, .. } | ScoreSource::Coarse { group_size, .. } => group_size,
    };
    let mask = ball_block_mask(tree, block_len, MaskUnit::Group(group_size), ball_masking)?;
    let n_groups = n / group_size;
    let keep_scores = n_groups * n_blocks <= MAX_RETAINED_SCORES;
    let mut retained = keep_scores.then(|| Array2::zeros((n_groups, n_blocks)));
    let mut per_group = Vec::with_capacity(n_groups);

    // Groups are processed in chunks so the score matrix is never held in
    // full for long sequences.
    let groups_per_chunk = (row_chunk() / group_size).max(1);
    let mut g0 = 0;
    while g0 < n_groups {
        let g1 = (g0 + groups_per_chunk).min(n_groups);
        let chunk_scores = match source {
            ScoreSource::Tokens { q, group_size } => {
                let rows = g0 * group_size..g1 * group_size;
                let s = q.slice(s![rows.clone(), ..]).dot(&kc.t());
                masked_block_means(s.view(), group_size, &valid[rows]).0
            }
            ScoreSource::Coarse {
                qc,
                qc_valid,
                group_size,
            } => {
                if group_size % block_len != 0 {
                    return Err(BsaError::InvalidConfig(format!(
                        "group_size {group_size} is not a multiple of block_len {block_len}"
                    )));
                }
                let per = group_size / block_len;
                let rows = g0 * per..g1 * per;
                let s = qc.slice(s![rows.clone(), ..]).dot(&kc.t());
                masked_block_means(s.view(), per, &qc_valid[rows]).0
            }
        };
        for (i, row) in chunk_scores.rows().into_iter().enumerate() {
            let p = g0 + i;
            let row = row.to_vec();
            let excluded = |j: usize| mask.is_excluded(p, j) || !kc_valid[j];
            per_group.push(select_topk_with(&row, top_k, excluded, tie)?);
        }
        if let Some(r) = retained.as_mut() {
            r.slice_mut(s![g0..g1, ..]).assign(&chunk_scores);
        }
        g0 = g1;
    }
    Ok(PlannedSelection {
        plan: SelectionPlan::new(group_size, block_len, top_k, n, per_group)?,
        scores: retained,
    })
}

/// Keys and values gathered for one group.
#[derive(Debug, Clone)]
pub struct Gathered<T> {
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub valid: Vec<bool>,
}

/// Concatenates the selected blocks' rows for every group.
pub fn gather_selected<T: Real>(
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    plan: &SelectionPlan,
    valid: &[bool],
) -> Result<Vec<Gathered<T>>> {
    if k.nrows() != plan.n_padded() || v.nrows() != plan.n_padded() || valid.len() != plan.n_padded() {
        return Err(shape_err("plan and key/value lengths differ"));
    }
    Ok((0..plan.n_groups())
        .map(|p| gather_group(k, v, plan, valid, p))
        .collect())
}

fn gather_group<T: Real>(
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    plan: &SelectionPlan,
    valid: &[bool],
    group: usize,
) -> Gathered<T> {
    let rows: Vec<usize> = plan.gathered_rows(group).collect();
    Gathered {
        k: k.select(Axis(0), &rows),
        v: v.select(Axis(0), &rows),
        valid: rows.iter().map(|&r| valid[r]).collect(),
    }
}

/// Each query attends to the tokens of its group's selected blocks.
pub fn selection_attention<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    plan: &SelectionPlan,
    valid: &[bool],
) -> Result<Array2<T>> {
    let n = plan.n_padded();
    if q.nrows() != n || k.nrows() != n || v.nrows() != n || valid.len() != n || q.ncols() != k.ncols() {
        return Err(shape_err("plan and query/key/value lengths differ"));
    }
    for p in 0..plan.n_groups() {
        if !plan.gathered_rows(p).any(|r| valid[r]) {
            return Err(BsaError::FullyMasked {
                row: p * plan.group_size(),
            });
        }
    }
    let g = plan.group_size();
    let mut out = Array2::zeros((n, v.ncols()));
    out.axis_chunks_iter_mut(Axis(0), g)
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut o)| {
            let qg = q.slice(s![p * g..(p + 1) * g, ..]);
            let gathered = gather_group(k, v, plan, valid, p);
            o.assign(&attend_unchecked(
                qg,
                gathered.k.view(),
                gathered.v.view(),
                None,
                Some(&gathered.valid),
            ));
        });
    Ok(out)
}

/// Returns `(dq, dk, dv)` with the plan held fixed.
pub fn selection_attention_vjp<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    plan: &SelectionPlan,
    valid: &[bool],
    grad: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let g = plan.group_size();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for p in 0..plan.n_groups() {
        let tokens = p * g..(p + 1) * g;
        let gathered = gather_group(k, v, plan, valid, p);
        let grads = attend_vjp_raw(
            q.slice(s![tokens.clone(), ..]),
            gathered.k.view(),
            gathered.v.view(),
            None,
            Some(&gathered.valid),
            grad.slice(s![tokens.clone(), ..]),
        );
        dq.slice_mut(s![tokens, ..]).assign(&grads.dq);
        for (i, r) in plan.gathered_rows(p).enumerate() {
            let mut kr = dk.row_mut(r);
            kr += &grads.dk.row(i);
            let mut vr = dv.row_mut(r);
            vr += &grads.dv.row(i);
        }
    }
    (dq, dk, dv)
}

/// Dense attention inside each ball. Padded keys are masked and padded
/// query rows are zero.
pub fn ball_attention<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    tree: &BallTree,
) -> Result<Array2<T>> {
    let n = tree.n_padded();
    if q.nrows() != n || k.nrows() != n || v.nrows() != n || q.ncols() != k.ncols() {
        return Err(shape_err("tree and query/key/value lengths differ"));
    }
    let m = tree.ball_size();
    let valid = tree.valid_mask();
    let mut out = Array2::zeros((n, v.ncols()));
    out.axis_chunks_iter_mut(Axis(0), m)
        .into_par_iter()
        .enumerate()
        .for_each(|(b, mut o)| {
            let r = b * m..(b + 1) * m;
            let qb = q.slice(s![r.clone(), ..]);
            let mask = &valid[r.clone()];
            if !mask.iter().any(|&x| x) {
                return;
            }
            let res = attend_unchecked(
                qb,
                k.slice(s![r.clone(), ..]),
                v.slice(s![r.clone(), ..]),
                None,
                Some(mask),
            );
            for (i, (mut orow, rrow)) in o.rows_mut().into_iter().zip(res.rows()).enumerate() {
                if mask[i] {
                    orow.assign(&rrow);
                }
            }
        });
    Ok(out)
}

/// Returns `(dq, dk, dv)`.
pub fn ball_attention_vjp<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    tree: &BallTree,
    grad: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let m = tree.ball_size();
    let valid = tree.valid_mask();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for b in 0..tree.n_balls() {
        let r = b * m..(b + 1) * m;
        let mask = &valid[r.clone()];
        if !mask.iter().any(|&x| x) {
            continue;
        }
        // Padded query rows were zeroed in the forward pass.
        let mut g = grad.slice(s![r.clone(), ..]).to_owned();
        for (mut row, &ok) in g.rows_mut().into_iter().zip(mask) {
            if !ok {
                row.fill(T::zero());
            }
        }
        let grads = attend_vjp_raw(
            q.slice(s![r.clone(), ..]),
            k.slice(s![r.clone(), ..]),
            v.slice(s![r.clone(), ..]),
            None,
            Some(mask),
            g.view(),
        );
        dq.slice_mut(s![r.clone(), ..]).assign(&grads.dq);
        dk.slice_mut(s![r.clone(), ..]).assign(&grads.dk);
        dv.slice_mut(s![r, ..]).assign(&grads.dv);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{
        ball_reference, block_mean_reference, brute_force_topk, dense_reference, fd_vjp_check, selection_reference,
    };
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mean_compression() {
        let t = array![[1.0], [3.0]];
        let c = compress_blocks(t.view(), 2, &PhiWeights::Mean, &[true, true]).unwrap();
        assert_eq!(c.tokens, array![[2.0]]);
        let t = array![[1.0], [3.0], [5.0], [0.0]];
        let c = compress_blocks(t.view(), 2, &PhiWeights::Mean, &[true, true, true, false]).unwrap();
        assert_eq!(c.tokens, array![[2.0], [5.0]]);
        assert_eq!(c.valid, vec![true, true]);
        let c = compress_blocks(t.view(), 2, &PhiWeights::Mean, &[true, true, false, false]).unwrap();
        assert_eq!(c.valid, vec![true, false]);
        assert_eq!(c.tokens.row(1).to_vec(), vec![0.0]);
    }

    #[test]
    fn identity_mlp_on_unit_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = rand_mat(&mut rng, 5, 3);
        let c = compress_blocks(t.view(), 1, &PhiWeights::identity_mlp(3), &[true; 5]).unwrap();
        assert_abs_diff_eq!(c.tokens, t, epsilon = 1e-12);
    }

    #[test]
    fn mlp_zero_fills_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi = PhiWeights::<f64>::init(PhiKind::Mlp, 2, 3, &mut rng);
        let mut t = rand_mat(&mut rng, 4, 3);
        let valid = [true, true, true, false];
        let a = compress_blocks(t.view(), 2, &phi, &valid).unwrap();
        t.row_mut(3).fill(123.0);
        let b = compress_blocks(t.view(), 2, &phi, &valid).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn compressed_attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_mat(&mut rng, 8, 3);
        let (k, v) = (rand_mat(&mut rng, 8, 3), rand_mat(&mut rng, 8, 3));
        let valid = [true; 8];
        // One block covering everything.
        let kc = compress_blocks(k.view(), 8, &PhiWeights::Mean, &valid).unwrap();
        let vc = compress_blocks(v.view(), 8, &PhiWeights::Mean, &valid).unwrap();
        let out = compressed_attention(q.view(), kc.tokens.view(), vc.tokens.view(), &kc.valid).unwrap();
        for row in out.rows() {
            assert_abs_diff_eq!(row, vc.tokens.row(0), epsilon = 1e-14);
        }
        // Two blocks against the dense oracle on the coarse tokens.
        let kc = compress_blocks(k.view(), 4, &PhiWeights::Mean, &valid).unwrap();
        let vc = compress_blocks(v.view(), 4, &PhiWeights::Mean, &valid).unwrap();
        let out = compressed_attention(q.view(), kc.tokens.view(), vc.tokens.view(), &kc.valid).unwrap();
        let kr = block_mean_reference(k.view(), 4, &valid);
        let vr = block_mean_reference(v.view(), 4, &valid);
        assert_abs_diff_eq!(
            out,
            dense_reference(q.view(), kr.view(), vr.view(), None, None),
            epsilon = 1e-12
        );
        // Identical coarse keys.
        let kc_same = array![[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]];
        let out = compressed_attention(q.view(), kc_same.view(), vc.tokens.view(), &[true, true]).unwrap();
        let mean = (&vc.tokens.row(0) + &vc.tokens.row(1)) / 2.0;
        assert_abs_diff_eq!(out.row(3), mean.view(), epsilon = 1e-14);
        assert!(matches!(
            compressed_attention(q.view(), kc_same.view(), vc.tokens.view(), &[false, false]),
            Err(BsaError::FullyMasked { .. })
        ));
    }

    #[test]
    fn score_helpers() {
        let s = importance_scores(array![[2.0]].view(), array![[3.0], [-1.0]].view()).unwrap();
        assert_eq!(s, array![[6.0, -2.0]]);
        let z = importance_scores(Array2::<f64>::zeros((2, 2)).view(), array![[1.0, 2.0]].view()).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        let o = importance_scores(array![[1.0, 0.0]].view(), array![[0.0, 4.0], [0.0, -2.0]].view()).unwrap();
        assert_eq!(o, array![[0.0, 0.0]]);

        let s = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(group_average_scores(s.view(), 1, None).unwrap(), s);
        assert_eq!(group_average_scores(s.view(), 2, None).unwrap(), array![[0.5, 0.5]]);
        let q = array![[0.0], [2.0]];
        assert_eq!(pool_group_queries(q.view(), 2, None).unwrap(), array![[1.0]]);
        assert_eq!(pool_group_queries(q.view(), 1, None).unwrap(), q);
        let same = array![[3.0, 1.0], [3.0, 1.0]];
        assert_eq!(pool_group_queries(same.view(), 2, None).unwrap(), array![[3.0, 1.0]]);
    }

    #[test]
    fn ball_mask_examples() {
        let tree = BallTree::sequential(8, 4).unwrap();
        let m = ball_block_mask(&tree, 2, MaskUnit::Query, true).unwrap();
        assert_eq!(m.row(0), vec![true, true, false, false]);
        assert_eq!(m.row(5), vec![false, false, true, true]);
        let one = ball_block_mask(&tree, 4, MaskUnit::Query, true).unwrap();
        for u in 0..8 {
            assert_eq!(one.row(u).iter().filter(|&&x| x).count(), 1);
        }
        let off = ball_block_mask(&tree, 2, MaskUnit::Group(2), false).unwrap();
        assert!(off.to_dense().iter().all(|&x| !x));
        assert!(ball_block_mask(&tree, 3, MaskUnit::Query, true).is_err());
        assert!(ball_block_mask(&tree, 2, MaskUnit::Group(8), true).is_err());
        let coarse = ball_block_mask(&tree, 2, MaskUnit::CoarseGroup, true).unwrap();
        assert_eq!(coarse.n_units(), 4);
        assert_eq!(coarse.row(3), vec![false, false, true, true]);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(select_topk(&[0.5, 0.9, 0.5, 0.1], 2, &[false; 4]).unwrap(), vec![0, 1]);
        assert_eq!(select_topk(&[0.5, 0.9, 0.5], 3, &[false; 3]).unwrap(), vec![0, 1, 2]);
        assert_eq!(
            select_topk(&[9.0, 8.0, 7.0], 1, &[true, false, false]).unwrap(),
            vec![1]
        );
        assert!(matches!(
            select_topk(&[1.0, 2.0], 2, &[true, false]),
            Err(BsaError::InvalidConfig(_))
        ));
        let hi = select_topk_with(&[0.5, 0.9, 0.5, 0.1], 2, |_| false, TieBreak::HighestIndex).unwrap();
        assert_eq!(hi, vec![1, 2]);
    }

    #[test]
    fn topk_matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let n = rng.random_range(1..24);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 * 0.25).collect();
            let excluded: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
            let avail = excluded.iter().filter(|&&e| !e).count();
            let k = rng.random_range(0..=avail);
            assert_eq!(
                select_topk(&scores, k, &excluded).unwrap(),
                brute_force_topk(&scores, k, &excluded)
            );
        }
    }

    #[test]
    fn gather_examples() {
        let k = Array2::from_shape_fn((8, 1), |(i, _)| i as f64);
        let plan = SelectionPlan::new(8, 2, 2, 8, vec![vec![1, 3]]).unwrap();
        let g = gather_selected(k.view(), k.view(), &plan, &[true; 8]).unwrap();
        assert_eq!(g[0].k.column(0).to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
        let plan = SelectionPlan::new(8, 2, 1, 8, vec![vec![0]]).unwrap();
        let g = gather_selected(k.view(), k.view(), &plan, &[true; 8]).unwrap();
        assert_eq!(g[0].v.column(0).to_vec(), vec![0.0, 1.0]);
        let plan = SelectionPlan::new(8, 2, 4, 8, vec![vec![0, 1, 2, 3]]).unwrap();
        let g = gather_selected(k.view(), k.view(), &plan, &[true; 8]).unwrap();
        assert_eq!(g[0].k, k);
        assert!(SelectionPlan::new(8, 2, 2, 8, vec![vec![3, 1]]).is_err());
        assert!(SelectionPlan::new(8, 2, 2, 8, vec![vec![1, 4]]).is_err());
    }

    #[test]
    fn selection_saturates_to_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (q, k, v) = (
            rand_mat(&mut rng, 8, 3),
            rand_mat(&mut rng, 8, 3),
            rand_mat(&mut rng, 8, 3),
        );
        let all: Vec<Vec<usize>> = (0..8).map(|_| vec![0, 1, 2, 3]).collect();
        let plan = SelectionPlan::new(1, 2, 4, 8, all).unwrap();
        let out = selection_attention(q.view(), k.view(), v.view(), &plan, &[true; 8]).unwrap();
        assert_abs_diff_eq!(
            out,
            dense_reference(q.view(), k.view(), v.view(), None, None),
            epsilon = 1e-12
        );
        // A single gathered token.
        let single: Vec<Vec<usize>> = (0..8).map(|i| vec![(i + 3) % 8]).collect();
        let plan = SelectionPlan::new(1, 1, 1, 8, single).unwrap();
        let out = selection_attention(q.view(), k.view(), v.view(), &plan, &[true; 8]).unwrap();
        for i in 0..8 {
            assert_eq!(out.row(i), v.row((i + 3) % 8));
        }
    }

    #[test]
    fn selection_matches_gather_then_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (
            rand_mat(&mut rng, 8, 3),
            rand_mat(&mut rng, 8, 3),
            rand_mat(&mut rng, 8, 3),
        );
        let tree = BallTree::sequential(7, 4).unwrap();
        let valid = tree.valid_mask();
        let kc = compress_blocks(k.view(), 2, &PhiWeights::Mean, valid).unwrap();
        let planned = plan_selection(
            ScoreSource::Tokens {
                q: q.view(),
                group_size: 2,
            },
            kc.tokens.view(),
            &kc.valid,
            &tree,
            2,
            2,
            false,
            TieBreak::LowestIndex,
        )
        .unwrap();
        let plan = planned.plan;
        let out = selection_attention(q.view(), k.view(), v.view(), &plan, valid).unwrap();
        let sets: Vec<Vec<usize>> = (0..8).map(|t| plan.blocks_for_token(t).to_vec()).collect();
        let reference = selection_reference(q.view(), k.view(), v.view(), &sets, 2, valid);
        for t in 0..7 {
            assert_abs_diff_eq!(out.row(t), reference.row(t), epsilon = 1e-12);
        }
    }

    #[test]
    fn ball_attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (
            rand_mat(&mut rng, 8, 3),
            rand_mat(&mut rng, 8, 3),
            rand_mat(&mut rng, 8, 2),
        );
        let one = BallTree::sequential(8, 8).unwrap();
        let out = ball_attention(q.view(), k.view(), v.view(), &one).unwrap();
        assert_abs_diff_eq!(
            out,
            dense_reference(q.view(), k.view(), v.view(), None, None),
            epsilon = 1e-12
        );
        let unit = BallTree::sequential(8, 1).unwrap();
        assert_eq!(ball_attention(q.view(), k.view(), v.view(), &unit).unwrap(), v);
        let tree = BallTree::sequential(6, 4).unwrap();
        let out = ball_attention(q.view(), k.view(), v.view(), &tree).unwrap();
        let reference = ball_reference(q.view(), k.view(), v.view(), 4, tree.valid_mask());
        assert_abs_diff_eq!(out, reference, epsilon = 1e-12);
        assert!(out.row(7).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn group_compression_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, v) = (
            rand_mat(&mut rng, 8, 3),
            rand_mat(&mut rng, 8, 3),
            rand_mat(&mut rng, 8, 3),
        );
        let valid = [true; 8];
        let qc = compress_blocks(q.view(), 4, &PhiWeights::Mean, &valid).unwrap();
        let kc = compress_blocks(k.view(), 4, &PhiWeights::Mean, &valid).unwrap();
        let vc = compress_blocks(v.view(), 4, &PhiWeights::Mean, &valid).unwrap();
        let out =
            group_compressed_attention(qc.tokens.view(), kc.tokens.view(), vc.tokens.view(), &kc.valid, 4).unwrap();
        let coarse = dense_reference(qc.tokens.view(), kc.tokens.view(), vc.tokens.view(), None, None);
        for i in 0..8 {
            assert_eq!(out.row(i), out.row(4 * (i / 4)));
            assert_abs_diff_eq!(out.row(i), coarse.row(i / 4), epsilon = 1e-12);
        }
        // With unit blocks it is ordinary compressed attention.
        let qc = compress_blocks(q.view(), 1, &PhiWeights::Mean, &valid).unwrap();
        let kc = compress_blocks(k.view(), 1, &PhiWeights::Mean, &valid).unwrap();
        let vc = compress_blocks(v.view(), 1, &PhiWeights::Mean, &valid).unwrap();
        let a = group_compressed_attention(qc.tokens.view(), kc.tokens.view(), vc.tokens.view(), &kc.valid, 1).unwrap();
        let b = compressed_attention(q.view(), kc.tokens.view(), vc.tokens.view(), &kc.valid).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-14);
    }

    #[test]
    fn coarsening_and_score_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_mat(&mut rng, 16, 4);
        let k = rand_mat(&mut rng, 16, 4);
        let valid: Vec<bool> = (0..16).map(|i| i < 13).collect();
        let qc = compress_blocks(q.view(), 4, &PhiWeights::Mean, &valid).unwrap();
        let pooled = pool_group_queries(q.view(), 4, Some(&valid)).unwrap();
        assert_eq!(pooled.slice(s![..4, ..]), qc.tokens.slice(s![..4, ..]));
        assert_abs_diff_eq!(qc.tokens, block_mean_reference(q.view(), 4, &valid), epsilon = 1e-15);

        let kc = compress_blocks(k.view(), 4, &PhiWeights::Mean, &valid).unwrap();
        let a = group_average_scores(
            importance_scores(q.view(), kc.tokens.view()).unwrap().view(),
            4,
            Some(&valid),
        )
        .unwrap();
        let b = importance_scores(qc.tokens.view(), kc.tokens.view()).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn branch_vjps_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let n = 8;
            let d = 3;
            let tree = BallTree::sequential(7, 4).unwrap();
            let valid = tree.valid_mask().to_vec();
            let phi = PhiWeights::<f64>::init(PhiKind::Mlp, 2, d, &mut rng);
            let q = rand_mat(&mut rng, n, d);
            let k = rand_mat(&mut rng, n, d);
            let v = rand_mat(&mut rng, n, d);
            let g = rand_mat(&mut rng, n, d);
            let plan = SelectionPlan::new(2, 2, 2, n, vec![vec![0, 2], vec![1, 3], vec![0, 1], vec![2, 3]]).unwrap();
            let phi_w: Vec<f64> = match &phi {
                PhiWeights::Mlp { w1, w2 } => w1.iter().chain(w2.iter()).copied().collect(),
                PhiWeights::Mean => unreachable!(),
            };
            let unpack = |x: &[f64]| {
                let q = Array2::from_shape_vec((n, d), x[..24].to_vec()).unwrap();
                let k = Array2::from_shape_vec((n, d), x[24..48].to_vec()).unwrap();
                let v = Array2::from_shape_vec((n, d), x[48..72].to_vec()).unwrap();
                let w1 = Array2::from_shape_vec((2 * d, 2 * d), x[72..108].to_vec()).unwrap();
                let w2 = Array2::from_shape_vec((2 * d, d), x[108..126].to_vec()).unwrap();
                (q, k, v, PhiWeights::Mlp { w1, w2 })
            };
            // Sum of all branches, with the MLP compressor on q, k and v.
            let forward = |x: &[f64]| {
                let (q, k, v, phi) = unpack(x);
                let kc = compress_blocks(k.view(), 2, &phi, &valid).unwrap();
                let vc = compress_blocks(v.view(), 2, &phi, &valid).unwrap();
                let qc = compress_blocks(q.view(), 2, &phi, &valid).unwrap();
                let ball = ball_attention(q.view(), k.view(), v.view(), &tree).unwrap();
                let cmp = compressed_attention(q.view(), kc.tokens.view(), vc.tokens.view(), &kc.valid).unwrap();
                let gc = group_compressed_attention(qc.tokens.view(), kc.tokens.view(), vc.tokens.view(), &kc.valid, 2)
                    .unwrap();
                let slc = selection_attention(q.view(), k.view(), v.view(), &plan, &valid).unwrap();
                (ball + cmp + gc + slc).into_raw_vec_and_offset().0
            };
            let mut x: Vec<f64> = q.iter().chain(&k).chain(&v).copied().collect();
            x.extend(phi_w);
            let (q, k, v, phi) = unpack(&x);
            let kc = compress_blocks(k.view(), 2, &phi, &valid).unwrap();
            let vc = compress_blocks(v.view(), 2, &phi, &valid).unwrap();
            let qc = compress_blocks(q.view(), 2, &phi, &valid).unwrap();
            let (bq, bk, bv) = ball_attention_vjp(q.view(), k.view(), v.view(), &tree, g.view());
            let (cq, dkc1, dvc1) =
                compressed_attention_vjp(q.view(), kc.tokens.view(), vc.tokens.view(), &kc.valid, g.view());
            let (dqc, dkc2, dvc2) = group_compressed_attention_vjp(
                qc.tokens.view(),
                kc.tokens.view(),
                vc.tokens.view(),
                &kc.valid,
                2,
                g.view(),
            );
            let (sq, sk, sv) = selection_attention_vjp(q.view(), k.view(), v.view(), &plan, &valid, g.view());
            let (kq, pk) = compress_blocks_vjp(n, 2, &phi, &valid, &kc, (dkc1 + dkc2).view());
            let (vq, pv) = compress_blocks_vjp(n, 2, &phi, &valid, &vc, (dvc1 + dvc2).view());
            let (qq, pq) = compress_blocks_vjp(n, 2, &phi, &valid, &qc, dqc.view());
            let dq = bq + cq + sq + qq;
            let dk = bk + sk + kq;
            let dv = bv + sv + vq;
            let mut analytic: Vec<f64> = dq.iter().chain(&dk).chain(&dv).copied().collect();
            let (
                PhiWeights::Mlp { w1: a1, w2: a2 },
                PhiWeights::Mlp { w1: b1, w2: b2 },
                PhiWeights::Mlp { w1: c1, w2: c2 },
            ) = (pk, pv, pq)
            else {
                unreachable!()
            };
            analytic.extend((a1 + b1 + c1).iter());
            analytic.extend((a2 + b2 + c2).iter());
            let report = fd_vjp_check(forward, &x, g.as_slice().unwrap(), &analytic, 1e-5);
            assert!(report.max_rel_error <= 1e-6, "seed {seed}: {report:?}");
        }
    }
}
