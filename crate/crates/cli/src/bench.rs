//! Runtime sweep of one attention layer forward.

use std::time::Instant;

use bsa_core::layer::{attention_forward_padded, ForwardOptions, LayerParams};
use bsa_core::{build_ball_tree, flops_bsa, BsaConfig, PointCloud, Real, Variant};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub variant: Variant,
    pub ms_median: f64,
    /// Analytic FLOPs of the timed work: attention plus projections.
    pub flops: f64,
    pub threads: usize,
    /// Ball size actually used (see [`fit_to_length`]).
    pub ball_size: usize,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "n,variant,ms_median,flops,threads,ball_size";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.0},{},{}",
            self.n, self.variant, self.ms_median, self.flops, self.threads, self.ball_size
        )
    }
}

/// Halves the ball size until a sequence of `n` points spans at least two
/// balls, as long as blocks and groups still tile a ball. With a single
/// ball, ball masking would leave selection nothing to choose from.
pub fn fit_to_length(cfg: &BsaConfig, n: usize) -> BsaConfig {
    let mut c = cfg.clone();
    if c.full_attention {
        return c;
    }
    while n.div_ceil(c.ball_size) < 2 {
        let half = c.ball_size / 2;
        if half == 0 || half % c.block_len != 0 || half % c.effective_group() != 0 {
            break;
        }
        c.ball_size = half;
    }
    c
}

/// `min_n, 2 min_n, ...` up to and including `max_n`.
pub fn doubling(min_n: usize, max_n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut n = min_n.max(1);
    while n <= max_n {
        out.push(n);
        n *= 2;
    }
    out
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub ns: Vec<usize>,
    pub variants: Vec<Variant>,
    pub base: BsaConfig,
    pub repeats: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl SweepSpec {
    /// The configuration benchmarked for `variant` at `n`.
    pub fn config(&self, variant: Variant, n: usize) -> BsaConfig {
        fit_to_length(&self.base.clone().with_variant(variant), n)
    }

    /// Checks every cell before anything is allocated.
    pub fn validate(&self) -> CliResult<()> {
        if self.repeats == 0 {
            return Err(crate::CliError::invalid_config("repeats must be >= 1"));
        }
        if self.ns.is_empty() || self.variants.is_empty() {
            return Err(crate::CliError::invalid_config(
                "empty sweep (check min-n, max-n and variant)",
            ));
        }
        for &n in &self.ns {
            for &v in &self.variants {
                self.config(v, n).validate_points(n)?;
            }
        }
        Ok(())
    }
}

/// Times every `(n, variant)` cell; `on_row` sees rows as they finish.
pub fn sweep<T: Real>(spec: &SweepSpec, mut on_row: impl FnMut(&BenchRow)) -> CliResult<Vec<BenchRow>> {
    spec.validate()?;
    let threads = rayon::current_num_threads();
    let mut rows = Vec::new();
    for &n in &spec.ns {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (n as u64).rotate_left(32));
        let pts = PointCloud::new(Array2::from_shape_simple_fn((n, 3), || rng.random_range(0.0..1.0)))?;
        for &variant in &spec.variants {
            let cfg = spec.config(variant, n);
            let tree = build_ball_tree(&pts, cfg.ball_size)?;
            let params = LayerParams::<T>::init(&cfg, &mut rng);
            let np = tree.n_padded();
            let mut x = Array2::from_shape_simple_fn((np, cfg.model_dim), || T::c(rng.random_range(-1.0..1.0)));
            for (mut row, &ok) in x.rows_mut().into_iter().zip(tree.valid_mask()) {
                if !ok {
                    row.fill(T::zero());
                }
            }
            let mut times = Vec::with_capacity(spec.repeats);
            for i in 0..spec.warmups + spec.repeats {
                let start = Instant::now();
                let out = attention_forward_padded(x.view(), &tree, &cfg, &params, ForwardOptions::default())?;
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(out);
                if i >= spec.warmups {
                    times.push(elapsed);
                }
            }
            let cost = flops_bsa(n, &cfg, variant, 1)?;
            let row = BenchRow {
                n,
                variant,
                ms_median: median(times),
                flops: cost.layer_attention() + cost.flops_proj,
                threads,
                ball_size: if cfg.full_attention { 0 } else { cfg.ball_size },
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln(ms)` against `ln(n)`.
pub fn loglog_slope(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, t)| t.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Slope over the `top` largest `n` measured for `variant`.
pub fn variant_slope(rows: &[BenchRow], variant: Variant, top: usize) -> Option<f64> {
    let mut pts: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| (r.n, r.ms_median))
        .collect();
    pts.sort_by_key(|p| p.0);
    if pts.len() < top.max(2) {
        return None;
    }
    Some(loglog_slope(&pts[pts.len() - top..]))
}
