//! Invariant and oracle checks, runnable from tests and from the command
//! line. Each check returns a [`CheckResult`] instead of panicking so a
//! caller can report every failure in one pass.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attn::attend;
use crate::branches::{
    ball_attention, compress_blocks, compressed_attention, plan_selection, select_topk_with, selection_attention,
    PhiWeights, ScoreSource, SelectionPlan, TieBreak,
};
use crate::config::{BranchSet, BsaConfig, PhiKind, Variant};
use crate::geom::{build_ball_tree, BallTree, PointCloud};
use crate::layer::{attention_forward_padded, receptive_field, ForwardOptions, LayerParams};
use crate::model::{input_matrix, Model, ModelConfig, ModelOptions};
use crate::oracle::{ball_reference, brute_force_topk, dense_reference, fd_vjp_check, selection_reference};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_errors(name: impl Into<String>, errors: Vec<String>, ok_detail: impl Into<String>) -> Self {
        match errors.first() {
            None => Self::new(name, true, ok_detail),
            Some(first) => Self::new(name, false, format!("{} failure(s), first: {first}", errors.len())),
        }
    }
}

/// Knobs of [`run_all`].
#[derive(Debug, Clone)]
pub struct SuiteOptions {
    /// Tie rule handed to the top-k routine under test. Anything but the
    /// default must make the suite fail.
    pub tie: TieBreak,
    pub gradient_seeds: u64,
    pub saturation_sizes: Vec<usize>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            tie: TieBreak::LowestIndex,
            gradient_seeds: 12,
            saturation_sizes: vec![64, 256, 512],
        }
    }
}

pub fn run_all(opts: &SuiteOptions) -> Vec<CheckResult> {
    let mut out = saturation_equivalence(&opts.saturation_sizes);
    out.push(topk_equivalence(1000, opts.tie));
    out.extend(branch_oracles(50, opts.tie));
    out.push(gradient_suite(opts.gradient_seeds));
    out.extend(structural_invariants(8, opts.tie));
    out
}

fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    if a.dim() != b.dim() {
        return f64::INFINITY;
    }
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn random_tree(n: usize, m: usize, rng: &mut ChaCha8Rng) -> BallTree {
    let pts = PointCloud::new(Array2::from_shape_simple_fn((n, 3), || rng.random_range(0.0..1.0))).expect("finite");
    build_ball_tree(&pts, m).expect("valid ball size")
}

/// Rows of `x` at padded positions set to zero, the layout every kernel
/// receives.
fn zero_padding(mut x: Array2<f64>, valid: &[bool]) -> Array2<f64> {
    for (mut row, &ok) in x.rows_mut().into_iter().zip(valid) {
        if !ok {
            row.fill(0.0);
        }
    }
    x
}

/// With one ball covering the sequence, blocks of one token, every block
/// selected, no masking and per-token groups, each branch is exactly dense
/// attention.
pub fn saturation_equivalence(sizes: &[usize]) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for &n in sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let tree = random_tree(n, n, &mut rng);
        let valid = tree.valid_mask();
        let d = 8;
        let (q, k, v) = (
            uniform(n, d, &mut rng),
            uniform(n, d, &mut rng),
            uniform(n, d, &mut rng),
        );
        let dense = dense_reference(q.view(), k.view(), v.view(), None, None);
        let mut errs = Vec::new();
        let mut record = |branch: &str, got: crate::Result<Array2<f64>>| match got {
            Ok(o) => errs.push((branch.to_string(), max_abs_diff(o.view(), dense.view()))),
            Err(e) => errs.push((format!("{branch} ({e})"), f64::INFINITY)),
        };
        record("ball", ball_attention(q.view(), k.view(), v.view(), &tree));
        let comp = (|| {
            let kc = compress_blocks(k.view(), 1, &PhiWeights::Mean, valid)?;
            let vc = compress_blocks(v.view(), 1, &PhiWeights::Mean, valid)?;
            compressed_attention(q.view(), kc.tokens.view(), vc.tokens.view(), &kc.valid)
        })();
        record("compression", comp);
        let slc = (|| {
            let kc = compress_blocks(k.view(), 1, &PhiWeights::Mean, valid)?;
            let source = ScoreSource::Tokens {
                q: q.view(),
                group_size: 1,
            };
            let planned = plan_selection(
                source,
                kc.tokens.view(),
                &kc.valid,
                &tree,
                1,
                n,
                false,
                TieBreak::default(),
            )?;
            selection_attention(q.view(), k.view(), v.view(), &planned.plan, valid)
        })();
        record("selection", slc);
        let worst = errs.iter().fold(0.0f64, |m, (_, e)| m.max(*e));
        let detail = errs
            .iter()
            .map(|(b, e)| format!("{b}={e:.2e}"))
            .collect::<Vec<_>>()
            .join(" ");
        out.push(CheckResult::new(format!("saturation n={n}"), worst <= 1e-5, detail));
    }
    out
}

/// `select_topk` against a full stable sort on rows with many ties.
pub fn topk_equivalence(rows: usize, tie: TieBreak) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut errors = Vec::new();
    for r in 0..rows {
        let len = rng.random_range(1..48);
        let scores: Vec<f64> = (0..len).map(|_| rng.random_range(0..6) as f64 * 0.5).collect();
        let excluded: Vec<bool> = (0..len).map(|_| rng.random_bool(0.2)).collect();
        let candidates = excluded.iter().filter(|&&e| !e).count();
        let k = rng.random_range(0..=candidates);
        let expected = brute_force_topk(&scores, k, &excluded);
        match select_topk_with(&scores, k, |j| excluded[j], tie) {
            Ok(got) if got == expected => {}
            Ok(got) => errors.push(format!("row {r}: {got:?} != {expected:?}")),
            Err(e) => errors.push(format!("row {r}: {e}")),
        }
    }
    CheckResult::from_errors("top-k vs brute force", errors, format!("{rows} rows"))
}

/// A random small configuration whose every group has at least `top_k`
/// admissible blocks.
struct SmallCase {
    n: usize,
    ball_size: usize,
    block_len: usize,
    group_size: usize,
    top_k: usize,
    coarse: bool,
}

fn small_case(rng: &mut ChaCha8Rng) -> SmallCase {
    let ball_size = [8usize, 16][rng.random_range(0..2)];
    let block_len = [2usize, 4][rng.random_range(0..2)];
    let group_size = [1, block_len, 2 * block_len][rng.random_range(0..3)];
    // Two full balls guarantee every group a whole foreign ball of
    // candidates.
    let n = rng.random_range(2 * ball_size + 1..=4 * ball_size);
    let top_k = rng.random_range(1..=(ball_size / block_len).min(3));
    SmallCase {
        n,
        ball_size,
        block_len,
        group_size,
        top_k,
        coarse: group_size % block_len == 0 && rng.random_bool(0.5),
    }
}

fn plan_for(
    case: &SmallCase,
    tree: &BallTree,
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    tie: TieBreak,
) -> crate::Result<SelectionPlan> {
    let valid = tree.valid_mask();
    let kc = compress_blocks(k, case.block_len, &PhiWeights::Mean, valid)?;
    let qc = compress_blocks(q, case.block_len, &PhiWeights::Mean, valid)?;
    let source = if case.coarse {
        ScoreSource::Coarse {
            qc: qc.tokens.view(),
            qc_valid: &qc.valid,
            group_size: case.group_size,
        }
    } else {
        ScoreSource::Tokens {
            q,
            group_size: case.group_size,
        }
    };
    Ok(plan_selection(
        source,
        kc.tokens.view(),
        &kc.valid,
        tree,
        case.block_len,
        case.top_k,
        true,
        tie,
    )?
    .plan)
}

/// Dense attention, ball attention and selection attention against their
/// loop-based oracles on random small problems.
pub fn branch_oracles(cases: usize, tie: TieBreak) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (mut dense_errs, mut ball_errs, mut slc_errs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut dense_worst, mut ball_worst, mut slc_worst) = (0.0f64, 0.0f64, 0.0f64);
    for c in 0..cases {
        let (nq, nk, d) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..6));
        let (q, k, v) = (
            uniform(nq, d, &mut rng),
            uniform(nk, d, &mut rng),
            uniform(nk, 3, &mut rng),
        );
        let bias = uniform(nq, nk, &mut rng);
        match attend(q.view(), k.view(), v.view(), Some(bias.view()), None) {
            Ok(o) => {
                let e = max_abs_diff(
                    o.view(),
                    dense_reference(q.view(), k.view(), v.view(), Some(bias.view()), None).view(),
                );
                dense_worst = dense_worst.max(e);
                if e > 1e-6 {
                    dense_errs.push(format!("case {c}: {e:.2e}"));
                }
            }
            Err(e) => dense_errs.push(format!("case {c}: {e}")),
        }

        let case = small_case(&mut rng);
        let tree = random_tree(case.n, case.ball_size, &mut rng);
        let valid = tree.valid_mask();
        let n = tree.n_padded();
        let q = zero_padding(uniform(n, 4, &mut rng), valid);
        let k = zero_padding(uniform(n, 4, &mut rng), valid);
        let v = zero_padding(uniform(n, 3, &mut rng), valid);
        match ball_attention(q.view(), k.view(), v.view(), &tree) {
            Ok(o) => {
                let e = max_abs_diff(
                    o.view(),
                    ball_reference(q.view(), k.view(), v.view(), case.ball_size, valid).view(),
                );
                ball_worst = ball_worst.max(e);
                if e > 1e-5 {
                    ball_errs.push(format!("case {c}: {e:.2e}"));
                }
            }
            Err(e) => ball_errs.push(format!("case {c}: {e}")),
        }
        let slc = plan_for(&case, &tree, q.view(), k.view(), tie).and_then(|plan| {
            // Padded query rows are zeroed by the layer, not the kernel.
            let o = zero_padding(selection_attention(q.view(), k.view(), v.view(), &plan, valid)?, valid);
            let rows: Vec<Vec<usize>> = (0..n).map(|i| plan.blocks_for_token(i).to_vec()).collect();
            Ok(max_abs_diff(
                o.view(),
                selection_reference(q.view(), k.view(), v.view(), &rows, case.block_len, valid).view(),
            ))
        });
        match slc {
            Ok(e) => {
                slc_worst = slc_worst.max(e);
                if e > 1e-5 {
                    slc_errs.push(format!("case {c}: {e:.2e}"));
                }
            }
            Err(e) => slc_errs.push(format!("case {c}: {e}")),
        }
    }
    vec![
        CheckResult::from_errors(
            "attend vs dense oracle",
            dense_errs,
            format!("{cases} cases, max err {dense_worst:.2e}"),
        ),
        CheckResult::from_errors(
            "ball attention vs block-diagonal oracle",
            ball_errs,
            format!("{cases} cases, max err {ball_worst:.2e}"),
        ),
        CheckResult::from_errors(
            "selection attention vs gather oracle",
            slc_errs,
            format!("{cases} cases, max err {slc_worst:.2e}"),
        ),
    ]
}

/// The small model used by the gradient checks: N=32 points, width 8,
/// two blocks.
pub fn gradient_model_config(variant: Variant) -> ModelConfig {
    let layer = BsaConfig {
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
    .with_variant(variant);
    ModelConfig {
        in_dim: 3,
        depth: 2,
        layer,
    }
}

/// Max relative errors `(parameters, input)` of the model VJP against
/// central differences, selection plans frozen at the unperturbed point.
/// Gates and norm gains are randomised so no branch sits at a symmetric
/// point.
pub fn model_gradient_error(cfg: ModelConfig, n: usize, seed: u64) -> crate::Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::new(cfg, seed)?;
    for l in &mut model.params.layers {
        l.gates.logits.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        l.norm_attn.mapv_inplace(|g| g + rng.random_range(-0.2..0.2));
    }
    let pts = PointCloud::new(Array2::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0)))?;
    let tree = model.build_tree(&pts)?;
    let in_dim = model.config.in_dim;
    let x = input_matrix::<f64>(&pts, None)?;
    let (_, ws) = model.forward(&tree, x.view(), ModelOptions::default())?;
    let plans = ws.plans();
    let opts = ModelOptions {
        frozen_plans: Some(&plans),
        ..Default::default()
    };
    let g = Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0));
    let (grads, dx) = model.backward(&tree, &ws, g.view())?;
    let grad_out = g.to_vec();

    let param_report = fd_vjp_check(
        |p: &[f64]| {
            let mut m = model.clone();
            m.params.assign_flat(p).expect("same length");
            m.forward(&tree, x.view(), opts).expect("valid model").0.to_vec()
        },
        &model.params.flatten(),
        &grad_out,
        &grads.flatten(),
        1e-5,
    );
    let input_report = fd_vjp_check(
        |p: &[f64]| {
            let xi = Array2::from_shape_vec((n, in_dim), p.to_vec()).expect("same length");
            model.forward(&tree, xi.view(), opts).expect("valid model").0.to_vec()
        },
        &x.iter().copied().collect::<Vec<_>>(),
        &grad_out,
        &dx.iter().copied().collect::<Vec<_>>(),
        1e-5,
    );
    Ok((param_report.max_rel_error, input_report.max_rel_error))
}

/// End-to-end gradient check over `seeds` seeds, cycling through the
/// variants.
pub fn gradient_suite(seeds: u64) -> CheckResult {
    let mut errors = Vec::new();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let variant = Variant::ALL[seed as usize % Variant::ALL.len()];
        match model_gradient_error(gradient_model_config(variant), 32, seed) {
            Ok((p, x)) => {
                worst = worst.max(p).max(x);
                if p.max(x) > 1e-4 || !p.is_finite() || !x.is_finite() {
                    errors.push(format!("seed {seed} {variant}: params {p:.2e}, input {x:.2e}"));
                }
            }
            Err(e) => errors.push(format!("seed {seed} {variant}: {e}")),
        }
    }
    CheckResult::from_errors(
        "model gradient vs finite differences",
        errors,
        format!("{seeds} seeds, max rel err {worst:.2e}"),
    )
}

fn structural_config(variant: Variant, heads: usize) -> BsaConfig {
    BsaConfig {
        ball_size: 16,
        block_len: 4,
        top_k: 2,
        group_size: 8,
        heads,
        model_dim: 16,
        head_dim: 4,
        ffn_dim: 16,
        ..BsaConfig::desk_default()
    }
    .with_variant(variant)
}

/// Exact structural properties of a real layer forward on random clouds:
/// group consistency, mask soundness, the repeat structure of group
/// compression, and receptive-field nesting with global coverage.
pub fn structural_invariants(clouds: u64, tie: TieBreak) -> Vec<CheckResult> {
    let (mut group, mut mask, mut repeat, mut rf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut groups_seen = 0usize;
    for seed in 0..clouds {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(40..=96);
        let variant = [Variant::Bsa, Variant::BsaNoGroup, Variant::BsaGroupCompression][seed as usize % 3];
        let mut cfg = structural_config(variant, 2);
        if seed % 2 == 1 {
            cfg.phi = PhiKind::Mlp;
        }
        let tree = random_tree(n, cfg.ball_size, &mut rng);
        let valid = tree.valid_mask().to_vec();
        let np = tree.n_padded();
        let params = LayerParams::<f64>::init(&cfg, &mut rng);
        let x = zero_padding(uniform(np, cfg.model_dim, &mut rng), &valid);
        let ws = match attention_forward_padded(
            x.view(),
            &tree,
            &cfg,
            &params,
            ForwardOptions {
                frozen_plans: None,
                tie,
            },
        ) {
            Ok((_, ws)) => ws,
            Err(e) => {
                group.push(format!("cloud {seed}: forward failed: {e}"));
                continue;
            }
        };
        let plans = ws.plans();
        let l = cfg.block_len;
        let m = cfg.ball_size;
        for (h, head) in ws.heads.iter().enumerate() {
            let plan = head.plan.as_ref().expect("selection enabled");
            let gsz = cfg.effective_group();
            if plan.group_size() != gsz {
                group.push(format!(
                    "cloud {seed} head {h}: plan groups {} != {gsz}",
                    plan.group_size()
                ));
            }
            // Group consistency: every member of a group sees one block set,
            // and that set is exactly the top-k of the group's scores.
            let scores = head.scores.as_ref().expect("small problem keeps scores");
            let kc_valid = &head.kc.as_ref().expect("coarse keys").valid;
            for p in 0..plan.n_groups() {
                groups_seen += 1;
                let set = plan.blocks_for_group(p);
                if plan.group_tokens(p).any(|t| plan.blocks_for_token(t) != set) {
                    group.push(format!("cloud {seed} head {h} group {p}: members disagree"));
                }
                let own_ball = tree.ball_of(p * gsz);
                if plan.group_tokens(p).any(|t| tree.ball_of(t) != own_ball) {
                    mask.push(format!("cloud {seed} group {p} straddles balls"));
                }
                let in_ball = own_ball * m / l..(own_ball + 1) * m / l;
                let excluded: Vec<bool> = (0..plan.n_padded() / l)
                    .map(|j| in_ball.contains(&j) || !kc_valid[j])
                    .collect();
                let row: Vec<f64> = scores.row(p).to_vec();
                let expected = brute_force_topk(&row, cfg.top_k, &excluded);
                if set != expected.as_slice() {
                    group.push(format!(
                        "cloud {seed} head {h} group {p}: {set:?} != top-k {expected:?}"
                    ));
                }
                // Mask soundness: nothing selected from the own ball or from
                // an all-padding block.
                for &b in set {
                    if in_ball.contains(&b) {
                        mask.push(format!("cloud {seed} head {h} group {p}: block {b} in own ball"));
                    }
                    if !(b * l..(b + 1) * l).any(|i| valid[i]) {
                        mask.push(format!("cloud {seed} head {h} group {p}: block {b} is padding"));
                    }
                }
            }
            if cfg.group_compression {
                let cmp = head.cmp.as_ref().expect("compression enabled");
                for b in 0..np / l {
                    let first = cmp.row(b * l);
                    if (b * l + 1..(b + 1) * l).any(|i| cmp.row(i) != first) {
                        repeat.push(format!("cloud {seed} head {h} block {b}: rows differ"));
                    }
                }
            }
        }

        let only = |ball, selection, compression| BsaConfig {
            branches: BranchSet {
                ball,
                compression,
                selection,
            },
            ..cfg.clone()
        };
        let (c_ball, c_sel, c_all) = (
            only(true, false, false),
            only(true, true, false),
            only(true, true, true),
        );
        let n_valid = tree.n_valid();
        for t in (0..np).filter(|&t| valid[t]) {
            let fields = [&c_ball, &c_sel, &c_all].map(|c| receptive_field(&tree, c, &plans, t).map(|r| r.union()));
            let [Ok(a), Ok(b), Ok(c)] = fields else {
                rf.push(format!("cloud {seed} token {t}: receptive_field failed"));
                continue;
            };
            let ball_members = tree.ball_range(tree.ball_of(t)).filter(|&i| valid[i]).count();
            if a.iter().filter(|&&x| x).count() != ball_members {
                rf.push(format!("cloud {seed} token {t}: ball field is not the ball"));
            }
            if (0..np).any(|i| (a[i] && !b[i]) || (b[i] && !c[i])) {
                rf.push(format!("cloud {seed} token {t}: fields not nested"));
            }
            if c.iter().filter(|&&x| x).count() != n_valid || (0..np).any(|i| c[i] != valid[i]) {
                rf.push(format!("cloud {seed} token {t}: compression field is not global"));
            }
            if b.iter().filter(|&&x| x).count() <= ball_members {
                rf.push(format!(
                    "cloud {seed} token {t}: selection adds nothing outside the ball"
                ));
            }
        }
    }
    vec![
        CheckResult::from_errors("group consistency", group, format!("{groups_seen} groups")),
        CheckResult::from_errors("mask soundness", mask, format!("{clouds} clouds")),
        CheckResult::from_errors("group compression repeat structure", repeat, format!("{clouds} clouds")),
        CheckResult::from_errors("receptive field nesting and coverage", rf, format!("{clouds} clouds")),
    ]
}
