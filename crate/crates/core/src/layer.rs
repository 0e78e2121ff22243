//! Gated fusion of the three branches and the transformer block built
//! around it (RMSNorm -> attention -> residual, RMSNorm -> SwiGLU ->
//! residual).
//!
//! The `*_padded` functions work on sequences already in tree order with
//! `tree.n_padded()` rows; the plain ones permute on the way in and out.

use ndarray::{s, Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attn::{
    attend, attend_vjp_raw, project_qkv, rmsnorm, rmsnorm_vjp, sigmoid, swiglu, swiglu_vjp, ProjectionWeights, Qkv,
    SwigluWeights,
};
use crate::branches::{
    ball_attention, ball_attention_vjp, compress_blocks, compress_blocks_vjp, compressed_attention,
    compressed_attention_vjp, group_compressed_attention, group_compressed_attention_vjp, plan_selection,
    selection_attention, selection_attention_vjp, Compressed, PhiWeights, ScoreSource, SelectionPlan, TieBreak,
};
use crate::config::BsaConfig;
use crate::error::{shape_err, BsaError, Result};
use crate::geom::{permute_features, unpermute_features, BallTree};
use crate::real::Real;

/// Branch order used for gate columns.
pub const BALL: usize = 0;
pub const CMP: usize = 1;
pub const SLC: usize = 2;

/// Per-head gate logits, one column per branch (ball, compression,
/// selection).
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    pub logits: Array2<T>,
}

impl<T: Real> GateParams<T> {
    pub fn zeros(heads: usize) -> Self {
        Self {
            logits: Array2::zeros((heads, 3)),
        }
    }

    pub fn head(&self, h: usize) -> [T; 3] {
        [self.logits[[h, BALL]], self.logits[[h, CMP]], self.logits[[h, SLC]]]
    }
}

/// `sum_b sigmoid(gate_b) * branch_b` over the enabled branches.
pub fn gate_fuse<T: Real>(branches: [Option<ArrayView2<'_, T>>; 3], gates: [T; 3]) -> Result<Array2<T>> {
    let dim = branches
        .iter()
        .flatten()
        .next()
        .map(|b| b.raw_dim())
        .ok_or_else(|| BsaError::InvalidArgument("no branch to fuse".into()))?;
    let mut out = Array2::zeros(dim);
    for (b, g) in branches.iter().zip(gates) {
        if let Some(b) = b {
            if b.raw_dim() != out.raw_dim() {
                return Err(shape_err("branch outputs differ in shape"));
            }
            let w = sigmoid(g);
            Zip::from(&mut out).and(b).for_each(|o, &x| *o += w * x);
        }
    }
    Ok(out)
}

/// All learnable state of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub norm_attn: Array1<T>,
    /// `wo` is always present.
    pub proj: ProjectionWeights<T>,
    pub phi_q: PhiWeights<T>,
    pub phi_k: PhiWeights<T>,
    pub phi_v: PhiWeights<T>,
    pub gates: GateParams<T>,
    pub norm_ffn: Array1<T>,
    pub ffn: SwigluWeights<T>,
}

fn normal_matrix<T: Real, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(&mut *rng);
        T::c(z * std)
    })
}

impl<T: Real> LayerParams<T> {
    /// Fan-in scaled normal weights, unit norm gains, zero gate logits.
    pub fn init<R: Rng>(cfg: &BsaConfig, rng: &mut R) -> Self {
        let c = cfg.model_dim;
        let inner = cfg.inner_dim();
        let s_c = (1.0 / c as f64).sqrt();
        let s_inner = (1.0 / inner as f64).sqrt();
        let s_ffn = (1.0 / cfg.ffn_dim as f64).sqrt();
        let proj = ProjectionWeights {
            wq: normal_matrix(c, inner, s_c, rng),
            wk: normal_matrix(c, inner, s_c, rng),
            wv: normal_matrix(c, inner, s_c, rng),
            wo: Some(normal_matrix(inner, c, s_inner, rng)),
        };
        let phi_q = PhiWeights::init(cfg.phi, cfg.block_len, cfg.head_dim, rng);
        let phi_k = PhiWeights::init(cfg.phi, cfg.block_len, cfg.head_dim, rng);
        let phi_v = PhiWeights::init(cfg.phi, cfg.block_len, cfg.head_dim, rng);
        let ffn = SwigluWeights {
            w1: normal_matrix(c, cfg.ffn_dim, s_c, rng),
            w2: normal_matrix(c, cfg.ffn_dim, s_c, rng),
            w3: normal_matrix(cfg.ffn_dim, c, s_ffn, rng),
        };
        Self {
            norm_attn: Array1::ones(c),
            proj,
            phi_q,
            phi_k,
            phi_v,
            gates: GateParams::zeros(cfg.heads),
            norm_ffn: Array1::ones(c),
            ffn,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Array2<T>| Array2::zeros(m.raw_dim());
        Self {
            norm_attn: Array1::zeros(self.norm_attn.len()),
            proj: ProjectionWeights {
                wq: z(&self.proj.wq),
                wk: z(&self.proj.wk),
                wv: z(&self.proj.wv),
                wo: self.proj.wo.as_ref().map(z),
            },
            phi_q: self.phi_q.zeros_like(),
            phi_k: self.phi_k.zeros_like(),
            phi_v: self.phi_v.zeros_like(),
            gates: GateParams {
                logits: z(&self.gates.logits),
            },
            norm_ffn: Array1::zeros(self.norm_ffn.len()),
            ffn: SwigluWeights {
                w1: z(&self.ffn.w1),
                w2: z(&self.ffn.w2),
                w3: z(&self.ffn.w3),
            },
        }
    }

    fn wo(&self) -> &Array2<T> {
        self.proj.wo.as_ref().expect("layer output projection")
    }

    fn check(&self, cfg: &BsaConfig) -> Result<()> {
        let c = cfg.model_dim;
        let inner = cfg.inner_dim();
        let ok = self.norm_attn.len() == c
            && self.norm_ffn.len() == c
            && self.proj.wq.dim() == (c, inner)
            && self.proj.wk.dim() == (c, inner)
            && self.proj.wv.dim() == (c, inner)
            && self.proj.wo.as_ref().is_some_and(|w| w.dim() == (inner, c))
            && self.gates.logits.dim() == (cfg.heads, 3)
            && self.ffn.w1.dim() == (c, cfg.ffn_dim)
            && self.ffn.w2.dim() == (c, cfg.ffn_dim)
            && self.ffn.w3.dim() == (cfg.ffn_dim, c);
        if !ok {
            return Err(shape_err("layer parameters do not match the config"));
        }
        Ok(())
    }
}

/// Per-head intermediates of one attention forward.
#[derive(Debug, Clone)]
pub struct HeadWorkspace<T> {
    pub kc: Option<Compressed<T>>,
    pub vc: Option<Compressed<T>>,
    pub qc: Option<Compressed<T>>,
    pub plan: Option<SelectionPlan>,
    /// Group-by-block selection scores (small problems only).
    pub scores: Option<Array2<T>>,
    pub ball: Option<Array2<T>>,
    pub cmp: Option<Array2<T>>,
    pub slc: Option<Array2<T>>,
}

/// Everything one attention forward keeps for the backward pass and for
/// inspection.
#[derive(Debug, Clone)]
pub struct AttentionWorkspace<T> {
    pub input: Array2<T>,
    pub qkv: Qkv<T>,
    pub heads: Vec<HeadWorkspace<T>>,
    /// Fused head outputs side by side, before the output projection.
    pub fused: Array2<T>,
}

impl<T: Real> AttentionWorkspace<T> {
    pub fn plans(&self) -> Vec<SelectionPlan> {
        self.heads.iter().filter_map(|h| h.plan.clone()).collect()
    }
}

/// Knobs that only matter for testing and diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Reuse these per-head plans instead of selecting.
    pub frozen_plans: Option<&'a [SelectionPlan]>,
    pub tie: TieBreak,
}

/// The sparse (or dense, for `full_attention`) attention sublayer on a
/// tree-ordered, padded input.
pub fn attention_forward_padded<T: Real>(
    x: ArrayView2<'_, T>,
    tree: &BallTree,
    cfg: &BsaConfig,
    params: &LayerParams<T>,
    opts: ForwardOptions<'_>,
) -> Result<(Array2<T>, AttentionWorkspace<T>)> {
    let n = tree.n_padded();
    if x.nrows() != n || x.ncols() != cfg.model_dim {
        return Err(shape_err(format!(
            "input is {:?}, expected {n}x{}",
            x.dim(),
            cfg.model_dim
        )));
    }
    cfg.validate_for(n)?;
    params.check(cfg)?;
    if !cfg.full_attention && tree.ball_size() != cfg.ball_size {
        return Err(BsaError::InvalidConfig(format!(
            "tree balls hold {} points, config expects {}",
            tree.ball_size(),
            cfg.ball_size
        )));
    }
    let uses_plans = cfg.branches.selection && !cfg.full_attention;
    let frozen_plans = opts.frozen_plans.filter(|_| uses_plans);
    if let Some(f) = frozen_plans {
        if f.len() != cfg.heads {
            return Err(BsaError::InvalidArgument(format!(
                "{} frozen plans for {} heads",
                f.len(),
                cfg.heads
            )));
        }
    }
    let valid = tree.valid_mask();
    let qkv = project_qkv(x, &params.proj, cfg.heads)?;
    let dh = cfg.head_dim;
    let mut fused = Array2::zeros((n, cfg.inner_dim()));
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (q, k, v) = qkv.head(h);
        let (out, ws) = if cfg.full_attention {
            let out = attend(q, k, v, None, Some(valid))?;
            let ws = HeadWorkspace {
                kc: None,
                vc: None,
                qc: None,
                plan: None,
                scores: None,
                ball: None,
                cmp: None,
                slc: None,
            };
            (out, ws)
        } else {
            let frozen = frozen_plans.map(|p| &p[h]);
            head_forward(q, k, v, tree, cfg, params, params.gates.head(h), frozen, opts.tie)?
        };
        fused.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&out);
        heads.push(ws);
    }
    zero_padded_rows(&mut fused, valid);
    let out = fused.dot(params.wo());
    Ok((
        out,
        AttentionWorkspace {
            input: x.to_owned(),
            qkv,
            heads,
            fused,
        },
    ))
}

fn zero_padded_rows<T: Real>(m: &mut Array2<T>, valid: &[bool]) {
    for (mut row, &ok) in m.rows_mut().into_iter().zip(valid) {
        if !ok {
            row.fill(T::zero());
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn head_forward<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    tree: &BallTree,
    cfg: &BsaConfig,
    params: &LayerParams<T>,
    gates: [T; 3],
    frozen: Option<&SelectionPlan>,
    tie: TieBreak,
) -> Result<(Array2<T>, HeadWorkspace<T>)> {
    let valid = tree.valid_mask();
    let l = cfg.block_len;
    let br = cfg.branches;
    let need_coarse_kv = br.compression || (br.selection && frozen.is_none());
    let kc = need_coarse_kv
        .then(|| compress_blocks(k, l, &params.phi_k, valid))
        .transpose()?;
    let vc = br
        .compression
        .then(|| compress_blocks(v, l, &params.phi_v, valid))
        .transpose()?;
    let qc = cfg
        .needs_coarse_queries()
        .then(|| compress_blocks(q, l, &params.phi_q, valid))
        .transpose()?;

    let ball = br.ball.then(|| ball_attention(q, k, v, tree)).transpose()?;

    let cmp = if br.compression {
        let (kc, vc) = (kc.as_ref().expect("kc"), vc.as_ref().expect("vc"));
        Some(if cfg.group_compression {
            let qc = qc.as_ref().expect("qc");
            group_compressed_attention(qc.tokens.view(), kc.tokens.view(), vc.tokens.view(), &kc.valid, l)?
        } else {
            compressed_attention(q, kc.tokens.view(), vc.tokens.view(), &kc.valid)?
        })
    } else {
        None
    };

    let (plan, scores, slc) = if br.selection {
        let (plan, scores) = match frozen {
            Some(p) => (p.clone(), None),
            None => {
                let kc = kc.as_ref().expect("kc");
                let source = if cfg.coarse_scoring() {
                    let qc = qc.as_ref().expect("qc");
                    ScoreSource::Coarse {
                        qc: qc.tokens.view(),
                        qc_valid: &qc.valid,
                        group_size: cfg.group_size,
                    }
                } else {
                    ScoreSource::Tokens {
                        q,
                        group_size: cfg.effective_group(),
                    }
                };
                let planned = plan_selection(
                    source,
                    kc.tokens.view(),
                    &kc.valid,
                    tree,
                    l,
                    cfg.top_k,
                    cfg.ball_masking,
                    tie,
                )?;
                (planned.plan, planned.scores)
            }
        };
        let out = selection_attention(q, k, v, &plan, valid)?;
        (Some(plan), scores, Some(out))
    } else {
        (None, None, None)
    };

    let fused = gate_fuse(
        [
            ball.as_ref().map(|b| b.view()),
            cmp.as_ref().map(|c| c.view()),
            slc.as_ref().map(|s| s.view()),
        ],
        gates,
    )?;
    Ok((
        fused,
        HeadWorkspace {
            kc,
            vc,
            qc,
            plan,
            scores,
            ball,
            cmp,
            slc,
        },
    ))
}

/// Backward of [`attention_forward_padded`]. Selection plans are constants.
/// Accumulates parameter gradients into `grads` and returns the input
/// gradient.
pub fn attention_backward_padded<T: Real>(
    ws: &AttentionWorkspace<T>,
    tree: &BallTree,
    cfg: &BsaConfig,
    params: &LayerParams<T>,
    grad_out: ArrayView2<'_, T>,
    grads: &mut LayerParams<T>,
) -> Result<Array2<T>> {
    if grad_out.dim() != (tree.n_padded(), cfg.model_dim) || ws.heads.len() != cfg.heads {
        return Err(BsaError::StaleWorkspace(
            "attention workspace does not match gradient".into(),
        ));
    }
    let valid = tree.valid_mask();
    let l = cfg.block_len;
    let dh = cfg.head_dim;
    *grads.proj.wo.as_mut().expect("wo grad") += &ws.fused.t().dot(&grad_out);
    let mut dfused = grad_out.dot(&params.wo().t());
    zero_padded_rows(&mut dfused, valid);

    let n = tree.n_padded();
    let mut dq_all = Array2::zeros((n, cfg.inner_dim()));
    let mut dk_all = Array2::zeros((n, cfg.inner_dim()));
    let mut dv_all = Array2::zeros((n, cfg.inner_dim()));
    for (h, hw) in ws.heads.iter().enumerate() {
        let (q, k, v) = ws.qkv.head(h);
        let g = dfused.slice(s![.., h * dh..(h + 1) * dh]);
        let mut dq = Array2::zeros(q.raw_dim());
        let mut dk = Array2::zeros(k.raw_dim());
        let mut dv = Array2::zeros(v.raw_dim());
        if cfg.full_attention {
            let gr = attend_vjp_raw(q, k, v, None, Some(valid), g);
            dq += &gr.dq;
            dk += &gr.dk;
            dv += &gr.dv;
        } else {
            let gates = params.gates.head(h);
            let mut dkc: Option<Array2<T>> = None;
            let mut dvc: Option<Array2<T>> = None;
            let mut dqc: Option<Array2<T>> = None;
            let branch_outs = [&hw.ball, &hw.cmp, &hw.slc];
            let mut branch_grads: [Option<Array2<T>>; 3] = [None, None, None];
            for b in 0..3 {
                if let Some(out) = branch_outs[b] {
                    let sg = sigmoid(gates[b]);
                    let dot = Zip::from(&g).and(out).fold(T::zero(), |acc, &a, &o| acc + a * o);
                    grads.gates.logits[[h, b]] += dot * sg * (T::one() - sg);
                    branch_grads[b] = Some(g.mapv(|x| x * sg));
                }
            }
            if let Some(gb) = &branch_grads[BALL] {
                let (a, b, c) = ball_attention_vjp(q, k, v, tree, gb.view());
                dq += &a;
                dk += &b;
                dv += &c;
            }
            if let Some(gc) = &branch_grads[CMP] {
                let kc = hw.kc.as_ref().expect("kc");
                let vc = hw.vc.as_ref().expect("vc");
                if cfg.group_compression {
                    let qc = hw.qc.as_ref().expect("qc");
                    let (a, b, c) = group_compressed_attention_vjp(
                        qc.tokens.view(),
                        kc.tokens.view(),
                        vc.tokens.view(),
                        &kc.valid,
                        l,
                        gc.view(),
                    );
                    dqc = Some(a);
                    dkc = Some(b);
                    dvc = Some(c);
                } else {
                    let (a, b, c) =
                        compressed_attention_vjp(q, kc.tokens.view(), vc.tokens.view(), &kc.valid, gc.view());
                    dq += &a;
                    dkc = Some(b);
                    dvc = Some(c);
                }
            }
            if let Some(gs) = &branch_grads[SLC] {
                let plan = hw.plan.as_ref().expect("plan");
                let (a, b, c) = selection_attention_vjp(q, k, v, plan, valid, gs.view());
                dq += &a;
                dk += &b;
                dv += &c;
            }
            // Selection scores are piecewise constant, so only the
            // compression branch sends gradient through the coarse tokens.
            if let (Some(d), Some(kc)) = (&dkc, &hw.kc) {
                let (dt, dphi) = compress_blocks_vjp(n, l, &params.phi_k, valid, kc, d.view());
                dk += &dt;
                add_phi(&mut grads.phi_k, &dphi);
            }
            if let (Some(d), Some(vc)) = (&dvc, &hw.vc) {
                let (dt, dphi) = compress_blocks_vjp(n, l, &params.phi_v, valid, vc, d.view());
                dv += &dt;
                add_phi(&mut grads.phi_v, &dphi);
            }
            if let (Some(d), Some(qc)) = (&dqc, &hw.qc) {
                let (dt, dphi) = compress_blocks_vjp(n, l, &params.phi_q, valid, qc, d.view());
                dq += &dt;
                add_phi(&mut grads.phi_q, &dphi);
            }
        }
        dq_all.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
        dk_all.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dk);
        dv_all.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dv);
    }
    let x = ws.input.view();
    grads.proj.wq += &x.t().dot(&dq_all);
    grads.proj.wk += &x.t().dot(&dk_all);
    grads.proj.wv += &x.t().dot(&dv_all);
    let dx = dq_all.dot(&params.proj.wq.t()) + dk_all.dot(&params.proj.wk.t()) + dv_all.dot(&params.proj.wv.t());
    Ok(dx)
}

fn add_phi<T: Real>(acc: &mut PhiWeights<T>, d: &PhiWeights<T>) {
    if let (PhiWeights::Mlp { w1, w2 }, PhiWeights::Mlp { w1: d1, w2: d2 }) = (acc, d) {
        *w1 += d1;
        *w2 += d2;
    }
}

/// Attention sublayer on an input in original point order.
pub fn bsa_forward<T: Real>(
    x: ArrayView2<'_, T>,
    tree: &BallTree,
    cfg: &BsaConfig,
    params: &LayerParams<T>,
) -> Result<(Array2<T>, AttentionWorkspace<T>)> {
    let xp = permute_features(tree, x, T::zero())?;
    let (out, ws) = attention_forward_padded(xp.view(), tree, cfg, params, ForwardOptions::default())?;
    Ok((unpermute_features(tree, out.view())?, ws))
}

/// Intermediates of one block forward.
#[derive(Debug, Clone)]
pub struct BlockWorkspace<T> {
    pub x: Array2<T>,
    pub h_attn: Array2<T>,
    pub attn: AttentionWorkspace<T>,
    pub x_mid: Array2<T>,
    pub h_ffn: Array2<T>,
}

/// `x' = x + attn(rmsnorm(x))`, `x'' = x' + swiglu(rmsnorm(x'))`.
pub fn block_forward_padded<T: Real>(
    x: ArrayView2<'_, T>,
    tree: &BallTree,
    cfg: &BsaConfig,
    params: &LayerParams<T>,
    opts: ForwardOptions<'_>,
) -> Result<(Array2<T>, BlockWorkspace<T>)> {
    let h_attn = rmsnorm(x, params.norm_attn.view())?;
    let (a, attn) = attention_forward_padded(h_attn.view(), tree, cfg, params, opts)?;
    let x_mid = &x + &a;
    let h_ffn = rmsnorm(x_mid.view(), params.norm_ffn.view())?;
    let mut f = swiglu(h_ffn.view(), &params.ffn)?;
    zero_padded_rows(&mut f, tree.valid_mask());
    let out = &x_mid + &f;
    Ok((
        out,
        BlockWorkspace {
            x: x.to_owned(),
            h_attn,
            attn,
            x_mid,
            h_ffn,
        },
    ))
}

pub fn block_backward_padded<T: Real>(
    ws: &BlockWorkspace<T>,
    tree: &BallTree,
    cfg: &BsaConfig,
    params: &LayerParams<T>,
    grad_out: ArrayView2<'_, T>,
    grads: &mut LayerParams<T>,
) -> Result<Array2<T>> {
    let mut g_f = grad_out.to_owned();
    zero_padded_rows(&mut g_f, tree.valid_mask());
    let (dh_ffn, dffn) = swiglu_vjp(ws.h_ffn.view(), &params.ffn, g_f.view());
    grads.ffn.w1 += &dffn.w1;
    grads.ffn.w2 += &dffn.w2;
    grads.ffn.w3 += &dffn.w3;
    let (dx_mid_norm, dgain) = rmsnorm_vjp(ws.x_mid.view(), params.norm_ffn.view(), dh_ffn.view());
    grads.norm_ffn += &dgain;
    let d_mid = &grad_out + &dx_mid_norm;
    let dh_attn = attention_backward_padded(&ws.attn, tree, cfg, params, d_mid.view(), grads)?;
    let (dx_norm, dgain) = rmsnorm_vjp(ws.x.view(), params.norm_attn.view(), dh_attn.view());
    grads.norm_attn += &dgain;
    Ok(d_mid + dx_norm)
}

/// One block on an input in original point order.
pub fn block_forward<T: Real>(
    x: ArrayView2<'_, T>,
    tree: &BallTree,
    cfg: &BsaConfig,
    params: &LayerParams<T>,
) -> Result<Array2<T>> {
    let xp = permute_features(tree, x, T::zero())?;
    let (out, _) = block_forward_padded(xp.view(), tree, cfg, params, ForwardOptions::default())?;
    unpermute_features(tree, out.view())
}

/// Tree positions that can influence one token, split by branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceptiveField {
    pub ball: Vec<bool>,
    pub selection: Vec<bool>,
    pub compression: Vec<bool>,
}

impl ReceptiveField {
    pub fn union(&self) -> Vec<bool> {
        (0..self.ball.len())
            .map(|i| self.ball[i] || self.selection[i] || self.compression[i])
            .collect()
    }

    pub fn union_len(&self) -> usize {
        self.union().iter().filter(|&&x| x).count()
    }
}

/// Receptive field of tree position `token` for one layer: its ball, the
/// tokens of the blocks selected for its group (any head), and every token
/// under a valid coarse token when compression is on.
pub fn receptive_field(
    tree: &BallTree,
    cfg: &BsaConfig,
    plans: &[SelectionPlan],
    token: usize,
) -> Result<ReceptiveField> {
    let n = tree.n_padded();
    if token >= n {
        return Err(BsaError::InvalidArgument(format!("token {token} out of range 0..{n}")));
    }
    let valid = tree.valid_mask();
    let mut rf = ReceptiveField {
        ball: vec![false; n],
        selection: vec![false; n],
        compression: vec![false; n],
    };
    if cfg.full_attention {
        rf.compression.copy_from_slice(valid);
        return Ok(rf);
    }
    if cfg.branches.ball {
        for i in tree.ball_range(tree.ball_of(token)) {
            rf.ball[i] = valid[i];
        }
    }
    if cfg.branches.selection {
        for plan in plans {
            if plan.n_padded() != n {
                return Err(shape_err("plan built for another sequence"));
            }
            for i in plan.gathered_rows(plan.group_of(token)) {
                rf.selection[i] = valid[i];
            }
        }
    }
    if cfg.branches.compression {
        // A coarse token is valid iff its block holds a valid token, so the
        // compression branch reaches every valid token.
        rf.compression.copy_from_slice(valid);
    }
    Ok(rf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BranchSet, PhiKind};
    use crate::geom::{build_ball_tree, PointCloud};
    use crate::oracle::dense_reference;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BsaConfig {
        BsaConfig {
            ball_size: 16,
            block_len: 4,
            top_k: 2,
            group_size: 4,
            heads: 2,
            model_dim: 8,
            head_dim: 4,
            ffn_dim: 16,
            ..BsaConfig::desk_default()
        }
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(Array2::from_shape_simple_fn((n, 3), || rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn gate_fuse_cases() {
        let a = array![[1.0, 2.0]];
        let b = array![[3.0, -1.0]];
        let c = array![[0.5, 0.5]];
        let sat = gate_fuse([Some(a.view()), Some(b.view()), Some(c.view())], [1e9, -1e9, -1e9]).unwrap();
        assert_abs_diff_eq!(sat, a, epsilon = 1e-12);
        let half = gate_fuse([Some(a.view()), Some(b.view()), Some(c.view())], [0.0; 3]).unwrap();
        assert_abs_diff_eq!(half, (&a + &b + &c) * 0.5, epsilon = 1e-15);
        let g = [0.3, -1.2, 2.0];
        let out = gate_fuse([Some(a.view()), Some(b.view()), Some(c.view())], g).unwrap();
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        for j in 0..2 {
            let expect = s(g[0]) * a[[0, j]] + s(g[1]) * b[[0, j]] + s(g[2]) * c[[0, j]];
            assert_abs_diff_eq!(out[[0, j]], expect, epsilon = 1e-15);
        }
        assert!(gate_fuse::<f64>([None, None, None], [0.0; 3]).is_err());
    }

    #[test]
    fn gate_monotonicity() {
        let a = array![[1.0, -2.0, 0.5]];
        let b = array![[3.0, 1.0, 0.5]];
        let c = array![[-1.0, 0.0, 4.0]];
        let mut prev: Option<Array2<f64>> = None;
        for step in 0..40 {
            let g = -10.0 + 0.5 * step as f64;
            let out = gate_fuse([Some(a.view()), Some(b.view()), Some(c.view())], [g, 0.3, -0.7]).unwrap();
            if let Some(p) = &prev {
                for j in 0..3 {
                    // Moving toward attn_ball means the gap to it never grows
                    // in the direction a[j] points.
                    let delta = out[[0, j]] - p[[0, j]];
                    assert!(delta * a[[0, j]] >= 0.0);
                }
            }
            prev = Some(out);
        }
    }

    #[test]
    fn saturated_config_equals_dense_attention() {
        let cfg = BsaConfig {
            ball_size: 32,
            block_len: 4,
            top_k: 8,
            group_size: 1,
            heads: 1,
            model_dim: 6,
            head_dim: 6,
            ffn_dim: 8,
            ball_masking: false,
            group_selection: false,
            ..BsaConfig::desk_default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tree = build_ball_tree(&random_cloud(32, 1), 32).unwrap();
        let mut params = LayerParams::<f64>::init(&cfg, &mut rng);
        params.proj.wo = Some(Array2::eye(6));
        let x = Array2::from_shape_simple_fn((32, 6), || rng.random_range(-1.0..1.0));
        let q = x.dot(&params.proj.wq);
        let k = x.dot(&params.proj.wk);
        let v = x.dot(&params.proj.wv);
        let dense = dense_reference(q.view(), k.view(), v.view(), None, None);
        for open in [BALL, SLC] {
            let mut p = params.clone();
            p.gates.logits.fill(-1e9);
            p.gates.logits[[0, open]] = 1e9;
            let (out, _) = attention_forward_padded(x.view(), &tree, &cfg, &p, ForwardOptions::default()).unwrap();
            assert_abs_diff_eq!(out, dense, epsilon = 1e-10);
        }
    }

    #[test]
    fn single_point_is_finite() {
        let cfg = BsaConfig {
            branches: BranchSet::ALL,
            ball_masking: false,
            top_k: 1,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = LayerParams::<f64>::init(&cfg, &mut rng);
        let tree = build_ball_tree(&random_cloud(1, 2), 16).unwrap();
        let x = array![[0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]];
        let (out, _) = bsa_forward(x.view(), &tree, &cfg, &params).unwrap();
        assert_eq!(out.dim(), (1, 8));
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_weights_make_the_block_an_identity() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = LayerParams::<f64>::init(&cfg, &mut rng);
        let mut zero = params.zeros_like();
        zero.norm_attn.fill(1.0);
        zero.norm_ffn.fill(1.0);
        let tree = build_ball_tree(&random_cloud(64, 5), 16).unwrap();
        let x = Array2::from_shape_simple_fn((64, 8), || rng.random_range(-1.0..1.0));
        assert_eq!(block_forward(x.view(), &tree, &cfg, &zero).unwrap(), x);
    }

    #[test]
    fn block_is_the_composition_of_its_parts() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = LayerParams::<f64>::init(&cfg, &mut rng);
        let tree = build_ball_tree(&random_cloud(64, 7), 16).unwrap();
        let x = Array2::from_shape_simple_fn((64, 8), || rng.random_range(-1.0..1.0));
        let h = rmsnorm(x.view(), params.norm_attn.view()).unwrap();
        let (a, _) = bsa_forward(h.view(), &tree, &cfg, &params).unwrap();
        let x1 = &x + &a;
        let h2 = rmsnorm(x1.view(), params.norm_ffn.view()).unwrap();
        let manual = &x1 + &swiglu(h2.view(), &params.ffn).unwrap();
        assert_abs_diff_eq!(
            block_forward(x.view(), &tree, &cfg, &params).unwrap(),
            manual,
            epsilon = 1e-12
        );
    }

    #[test]
    fn block_outputs_are_finite() {
        for seed in 0..10 {
            let cfg = BsaConfig {
                phi: if seed % 2 == 0 { PhiKind::Mean } else { PhiKind::Mlp },
                group_compression: seed % 3 == 0,
                ..small_cfg()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = LayerParams::<f32>::init(&cfg, &mut rng);
            let tree = build_ball_tree(&random_cloud(57, seed), 16).unwrap();
            let x = Array2::from_shape_simple_fn((57, 8), || rng.random_range(-2.0f32..2.0));
            let y = block_forward(x.view(), &tree, &cfg, &params).unwrap();
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn receptive_field_examples() {
        let tree = BallTree::sequential(8, 4).unwrap();
        let cfg = BsaConfig {
            ball_size: 4,
            block_len: 2,
            top_k: 1,
            group_size: 2,
            ..small_cfg()
        };
        let plan = SelectionPlan::new(2, 2, 1, 8, vec![vec![3], vec![2], vec![0], vec![1]]).unwrap();
        let ball_only = BsaConfig {
            branches: BranchSet::BALL_ONLY,
            ..cfg.clone()
        };
        let rf = receptive_field(&tree, &ball_only, std::slice::from_ref(&plan), 1).unwrap();
        assert_eq!(rf.union(), vec![true, true, true, true, false, false, false, false]);
        let with_sel = BsaConfig {
            branches: BranchSet::BALL_SELECTION,
            ..cfg.clone()
        };
        let rf = receptive_field(&tree, &with_sel, std::slice::from_ref(&plan), 1).unwrap();
        assert_eq!(rf.union(), vec![true, true, true, true, false, false, true, true]);
        let rf = receptive_field(&tree, &cfg, &[plan], 1).unwrap();
        assert_eq!(rf.union_len(), 8);
        assert!(receptive_field(&tree, &cfg, &[], 8).is_err());
    }
}
