use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use bsa_core::branches::TieBreak;
use bsa_core::checkpoint::{load_model, save_model};
use bsa_core::data::{synthetic, Dataset, Sample, SyntheticSpec};
use bsa_core::geom::read_points_file;
use bsa_core::layer::receptive_field;
use bsa_core::model::{input_matrix, ModelOptions};
use bsa_core::suite::{run_all, SuiteOptions};
use bsa_core::train::{prepare, train, StepMetrics, TrainConfig, TrainOutcome};
use bsa_core::{flops_bsa, BsaConfig, CostReport, Model, ModelConfig, PointCloud, Precision, Real, Variant};

use crate::args::{AblateArgs, BenchArgs, CheckArgs, FlopsArgs, ReportFormat, RfArgs, TrainArgs, TrainingArgs};
use crate::bench::{doubling, sweep, BenchRow, SweepSpec};
use crate::error::{CliError, CliResult, EXIT_FAILURE};

/// Ball size used by the training-style commands when none is given: small
/// enough that a default 256-point cloud spans several balls.
pub const TRAIN_BALL_SIZE: usize = 64;
/// Ball size of the benchmark and cost commands.
pub const BENCH_BALL_SIZE: usize = 256;

pub fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

/// Runs the suite, writes one line per check, and fails when any check
/// fails.
pub fn cmd_check(args: &CheckArgs, w: &mut dyn Write) -> CliResult<()> {
    let opts = SuiteOptions {
        tie: if args.corrupt_tie {
            TieBreak::HighestIndex
        } else {
            TieBreak::LowestIndex
        },
        gradient_seeds: args.gradient_seeds,
        ..Default::default()
    };
    let results = run_all(&opts);
    let failed = results.iter().filter(|r| !r.passed).count();
    for r in &results {
        writeln!(w, "{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail)?;
    }
    writeln!(w, "checks={} failed={failed}", results.len())?;
    w.flush()?;
    if failed > 0 {
        return Err(CliError::new(
            "check-failed",
            format!("{failed} of {} checks failed", results.len()),
            EXIT_FAILURE,
        ));
    }
    Ok(())
}

pub fn bench_spec(args: &BenchArgs) -> SweepSpec {
    SweepSpec {
        ns: doubling(args.min_n, args.max_n),
        variants: args.variant.clone(),
        base: args.layer.config(Variant::Bsa, BENCH_BALL_SIZE),
        repeats: args.repeats,
        warmups: args.warmups,
        seed: args.seed,
    }
}

pub fn cmd_bench(args: &BenchArgs, w: &mut dyn Write) -> CliResult<Vec<BenchRow>> {
    let spec = bench_spec(args);
    spec.validate()?;
    writeln!(w, "{}", BenchRow::CSV_HEADER)?;
    let mut io_err = None;
    let mut emit = |r: &BenchRow| {
        if let Err(e) = writeln!(w, "{}", r.to_csv_row()).and_then(|_| w.flush()) {
            io_err.get_or_insert(e);
        }
    };
    let rows = match args.precision {
        Precision::Working => sweep::<f32>(&spec, &mut emit)?,
        Precision::High => sweep::<f64>(&spec, &mut emit)?,
    };
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(rows),
    }
}

pub fn flops_reports(args: &FlopsArgs) -> CliResult<Vec<(Variant, CostReport)>> {
    if args.depth == 0 {
        return Err(CliError::invalid_config("depth must be >= 1"));
    }
    args.variant
        .iter()
        .map(|&v| {
            let cfg = args.layer.config(v, BENCH_BALL_SIZE);
            cfg.validate_points(args.n)?;
            Ok((v, flops_bsa(args.n, &cfg, v, args.depth)?))
        })
        .collect()
}

pub fn cmd_flops(args: &FlopsArgs, w: &mut dyn Write) -> CliResult<()> {
    let reports = flops_reports(args)?;
    match args.format {
        ReportFormat::Kv => {
            for (i, (v, r)) in reports.iter().enumerate() {
                if i > 0 {
                    writeln!(w)?;
                }
                write!(w, "{}", r.to_key_values(v.name()))?;
            }
        }
        ReportFormat::Csv => {
            writeln!(w, "{}", CostReport::CSV_HEADER)?;
            for (v, r) in &reports {
                writeln!(w, "{}", r.to_csv_row(v.name()))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

impl TrainingArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            eval_every: self.eval_every,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_points: self.n,
            n_train: self.train_clouds,
            n_test: self.test_clouds,
            seed: self.seed,
        }
    }

    fn validate(&self) -> CliResult<()> {
        if self.depth == 0 || self.batch_size == 0 || self.train_clouds == 0 || self.test_clouds == 0 {
            return Err(CliError::invalid_config(
                "depth, batch size and cloud counts must be >= 1",
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::invalid_config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

fn read_cloud(path: &Path, dim: usize) -> CliResult<Sample> {
    let (points, extra) = read_points_file(path, dim)?;
    if extra.ncols() == 0 {
        return Err(CliError::new(
            "invalid-input",
            format!("{}: no target column after the {dim} coordinates", path.display()),
            crate::error::EXIT_INVALID_CONFIG,
        ));
    }
    Ok(Sample {
        points,
        target: extra.column(0).to_owned(),
    })
}

/// Trains a fresh model with `seed` on `data`; `on_step` sees every
/// metrics row.
pub fn train_model<T: Real>(
    config: ModelConfig,
    data: &Dataset,
    tcfg: &TrainConfig,
    seed: u64,
    on_step: impl FnMut(&StepMetrics),
) -> CliResult<(Model<T>, TrainOutcome)> {
    let mut model = Model::<T>::new(config, seed)?;
    let tr = prepare(&model, &data.train)?;
    let te = prepare(&model, &data.test)?;
    let outcome = train(&mut model, &tr, &te, tcfg, on_step)?;
    Ok((model, outcome))
}

fn write_metrics<T: Real>(
    config: ModelConfig,
    data: &Dataset,
    tcfg: &TrainConfig,
    seed: u64,
    w: &mut dyn Write,
    checkpoint: Option<&Path>,
) -> CliResult<TrainOutcome> {
    writeln!(w, "{}", StepMetrics::CSV_HEADER)?;
    let mut io_err = None;
    let (model, outcome) = train_model::<T>(config, data, tcfg, seed, |m| {
        if let Err(e) = writeln!(w, "{}", m.to_csv_row()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    if let Some(p) = checkpoint {
        save_model(&model, p)?;
    }
    Ok(outcome)
}

pub fn cmd_train(args: &TrainArgs, w: &mut dyn Write) -> CliResult<TrainOutcome> {
    let t = &args.training;
    t.validate()?;
    let layer = args.layer.config(args.variant, TRAIN_BALL_SIZE);
    let (data, in_dim) = if args.data.is_empty() {
        layer.validate_points(t.n)?;
        (synthetic(t.synthetic_spec())?, 3)
    } else {
        let train: Vec<Sample> = args
            .data
            .iter()
            .map(|p| read_cloud(p, args.dim))
            .collect::<CliResult<_>>()?;
        let test: Vec<Sample> = if args.test_data.is_empty() {
            train.clone()
        } else {
            args.test_data
                .iter()
                .map(|p| read_cloud(p, args.dim))
                .collect::<CliResult<_>>()?
        };
        for s in train.iter().chain(&test) {
            layer.validate_points(s.points.n_points())?;
        }
        let data = Dataset {
            train,
            test,
            target_mean: 0.0,
            target_std: 1.0,
        };
        (data, args.dim)
    };
    let config = ModelConfig {
        in_dim,
        depth: t.depth,
        layer,
    };
    config.validate()?;
    let tcfg = t.train_config();
    let ckpt = args.checkpoint.as_deref();
    match t.precision {
        Precision::Working => write_metrics::<f32>(config, &data, &tcfg, t.seed, w, ckpt),
        Precision::High => write_metrics::<f64>(config, &data, &tcfg, t.seed, w, ckpt),
    }
}

/// The (block length, group size) grid: four diagonal cells and four
/// off-diagonal ones.
pub const ABLATION_GRID: [(usize, usize); 8] = [(4, 4), (8, 8), (16, 16), (32, 32), (4, 8), (16, 8), (8, 4), (8, 16)];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub block_len: usize,
    pub group_size: usize,
    /// `coarse` when groups are scored from pooled queries, `token` when
    /// per-token scores are averaged (groups smaller than or not a multiple
    /// of a block).
    pub scoring: &'static str,
    pub flops: f64,
    pub train_mse: f64,
    pub test_mse: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "block_len,group_size,scoring,flops,train_mse,test_mse";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{:.0},{:.9e},{:.9e}",
            self.block_len, self.group_size, self.scoring, self.flops, self.train_mse, self.test_mse
        )
    }
}

pub fn ablation_configs(args: &AblateArgs) -> CliResult<Vec<BsaConfig>> {
    args.training.validate()?;
    ABLATION_GRID
        .iter()
        .map(|&(l, g)| {
            let mut cfg = args.layer.config(Variant::Bsa, TRAIN_BALL_SIZE);
            cfg.block_len = l;
            cfg.group_size = g;
            cfg.coarsen_queries = g % l == 0;
            cfg.validate_points(args.training.n)?;
            Ok(cfg)
        })
        .collect()
}

fn ablate_with<T: Real>(args: &AblateArgs, configs: Vec<BsaConfig>, w: &mut dyn Write) -> CliResult<Vec<AblationRow>> {
    let t = &args.training;
    let data = synthetic(t.synthetic_spec())?;
    let tcfg = TrainConfig {
        eval_every: 0,
        ..t.train_config()
    };
    writeln!(w, "{}", AblationRow::CSV_HEADER)?;
    let mut rows = Vec::new();
    for layer in configs {
        let flops = flops_bsa(t.n, &layer, Variant::Bsa, t.depth)
            .map(|r| r.total())
            .unwrap_or(f64::NAN);
        let row_base = (
            layer.block_len,
            layer.group_size,
            if layer.coarse_scoring() { "coarse" } else { "token" },
        );
        let config = ModelConfig {
            in_dim: 3,
            depth: t.depth,
            layer,
        };
        let (_, out) = train_model::<T>(config, &data, &tcfg, t.seed, |_| {})?;
        let row = AblationRow {
            block_len: row_base.0,
            group_size: row_base.1,
            scoring: row_base.2,
            flops,
            train_mse: out.final_train_mse,
            test_mse: out.final_test_mse,
        };
        writeln!(w, "{}", row.to_csv_row())?;
        w.flush()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn cmd_ablate(args: &AblateArgs, w: &mut dyn Write) -> CliResult<Vec<AblationRow>> {
    let configs = ablation_configs(args)?;
    match args.training.precision {
        Precision::Working => ablate_with::<f32>(args, configs, w),
        Precision::High => ablate_with::<f64>(args, configs, w),
    }
}

/// One output row of `rf`, in input order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfRow {
    pub token: usize,
    pub in_ball: bool,
    pub in_selection: bool,
    pub in_compression: bool,
}

pub fn receptive_rows(args: &RfArgs) -> CliResult<Vec<RfRow>> {
    let (points, extra) = match &args.points {
        Some(p) => read_points_file(p, args.dim)?,
        None => {
            let data = synthetic(SyntheticSpec {
                n_points: args.n,
                n_train: 1,
                n_test: 0,
                seed: args.seed,
            })?;
            let pts: PointCloud = data.train[0].points.clone();
            let cols = ndarray::Array2::zeros((pts.n_points(), 0));
            (pts, cols)
        }
    };
    let n = points.n_points();
    if args.token >= n {
        return Err(CliError::invalid_config(format!(
            "token {} out of range 0..{n}",
            args.token
        )));
    }
    let mut model: Model<f64> = match &args.checkpoint {
        Some(p) => load_model(p)?,
        None => {
            let mut layer = args.layer.config(args.variant, TRAIN_BALL_SIZE);
            if let Some(b) = args.branch_set() {
                layer.branches = b;
            }
            let config = ModelConfig {
                in_dim: points.dim(),
                depth: 1,
                layer,
            };
            config.validate()?;
            Model::new(config, args.seed)?
        }
    };
    if args.checkpoint.is_some() {
        if let Some(b) = args.branch_set() {
            model.config.layer.branches = b;
        }
    }
    let cfg = model.config.layer.clone();
    cfg.validate_points(n)?;
    // Trailing columns feed a checkpointed model that was trained with them.
    let extra_cols = model.config.in_dim.saturating_sub(points.dim());
    let input = if extra_cols > 0 {
        if extra.ncols() < extra_cols {
            return Err(CliError::invalid_config(format!(
                "model expects {} input columns, file has {}",
                model.config.in_dim,
                points.dim() + extra.ncols()
            )));
        }
        input_matrix::<f64>(&points, Some(extra.slice(ndarray::s![.., ..extra_cols])))?
    } else {
        input_matrix::<f64>(&points, None)?
    };
    let tree = model.build_tree(&points)?;
    let (_, ws) = model.forward(&tree, input.view(), ModelOptions::default())?;
    let plans = ws.plans().into_iter().next().unwrap_or_default();
    let pos = tree.inverse_permutation()[args.token];
    let rf = receptive_field(&tree, &cfg, &plans, pos)?;
    Ok((0..n)
        .map(|i| {
            let p = tree.inverse_permutation()[i];
            RfRow {
                token: i,
                in_ball: rf.ball[p],
                in_selection: rf.selection[p],
                in_compression: rf.compression[p],
            }
        })
        .collect())
}

pub fn cmd_rf(args: &RfArgs, w: &mut dyn Write) -> CliResult<Vec<RfRow>> {
    let rows = receptive_rows(args)?;
    writeln!(w, "token,in_ball,in_selection,in_compression")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.token, r.in_ball as u8, r.in_selection as u8, r.in_compression as u8
        )?;
    }
    w.flush()?;
    Ok(rows)
}
