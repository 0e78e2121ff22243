use std::process::{Command, Output};

use bsa_cli::args::{Cli, Command as Sub};
use bsa_cli::commands::{cmd_train, receptive_rows};
use clap::Parser;

fn bsa(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bsa"));
    c.args(args);
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn invalid_config_exits_with_one_error_line() {
    let o = bsa(&["flops", "--n", "1", "--variant", "bsa"], &[]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error kind=invalid-config msg=\""), "{err}");

    let o = bsa(&["train", "--block-len", "5"], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = bsa(&["bench", "--variant", "sparse"], &[]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn environment_overrides_flags_defaults() {
    let o = bsa(&["flops", "--variant", "bsa"], &[("BSA_TOP_K", "600")]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = bsa(
        &["flops", "--format", "csv"],
        &[("BSA_N", "1024"), ("BSA_VARIANT", "full")],
    );
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("full,1024,2,"));
}

#[test]
fn flops_reports_small_n_and_doubling() {
    let o = bsa(
        &[
            "flops",
            "--n",
            "1",
            "--variant",
            "full",
            "--heads",
            "1",
            "--head-dim",
            "4",
        ],
        &[],
    );
    let text = String::from_utf8(o.stdout).unwrap();
    // One query against one key: 2d + 5 + 2d.
    assert!(text.contains("flops_dense=21\n"), "{text}");
    let dense = |n: &str| -> f64 {
        let o = bsa(&["flops", "--n", n, "--variant", "full"], &[]);
        let text = String::from_utf8(o.stdout).unwrap();
        text.lines()
            .find_map(|l| l.strip_prefix("flops_dense="))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(dense("2048"), 4.0 * dense("1024"));
}

#[test]
fn check_fails_with_corrupted_tie_rule() {
    let o = bsa(&["check", "--corrupt-tie", "--gradient-seeds", "1"], &[]);
    assert_eq!(o.status.code(), Some(1));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().any(|l| l.starts_with("FAIL top-k")));
    assert!(stderr(&o).starts_with("error kind=check-failed"));
}

fn train_args(extra: &[&str]) -> bsa_cli::args::TrainArgs {
    let base = [
        "bsa",
        "train",
        "--n",
        "64",
        "--train-clouds",
        "4",
        "--test-clouds",
        "2",
        "--model-dim",
        "16",
        "--heads",
        "2",
        "--head-dim",
        "8",
        "--ball-size",
        "16",
        "--block-len",
        "4",
        "--group-size",
        "4",
        "--top-k",
        "2",
    ];
    match Cli::try_parse_from(base.iter().chain(extra)).unwrap().command {
        Sub::Train(a) => a,
        _ => unreachable!(),
    }
}

#[test]
fn zero_steps_writes_only_the_initial_row() {
    let mut buf = Vec::new();
    cmd_train(&train_args(&["--steps", "0"]), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "step,lr,train_loss,test_mse");
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn training_csv_is_reproducible_and_checkpoint_loads() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let args = train_args(&[
        "--steps",
        "6",
        "--eval-every",
        "3",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    cmd_train(&args, &mut a).unwrap();
    cmd_train(&args, &mut b).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().lines().last().unwrap().starts_with("6,"));
    let model: bsa_core::Model<f32> = bsa_core::checkpoint::load_model(&ckpt).unwrap();
    assert_eq!(model.config.layer.ball_size, 16);
}

#[test]
fn training_from_point_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.txt");
    let mut text = String::new();
    for i in 0..40 {
        let t = i as f64 * 0.3;
        text.push_str(&format!(
            "{} {} {} {}\n",
            t.cos(),
            t.sin(),
            0.1 * i as f64,
            t.sin() * 2.0
        ));
    }
    std::fs::write(&path, text).unwrap();
    let args = train_args(&["--steps", "3", "--data", path.to_str().unwrap()]);
    let mut out = Vec::new();
    let outcome = cmd_train(&args, &mut out).unwrap();
    assert!(outcome.final_test_mse.is_finite());
}

fn rf_args(extra: &[&str]) -> bsa_cli::args::RfArgs {
    let base = [
        "bsa",
        "rf",
        "--n",
        "200",
        "--model-dim",
        "16",
        "--heads",
        "2",
        "--head-dim",
        "8",
    ];
    match Cli::try_parse_from(base.iter().chain(extra)).unwrap().command {
        Sub::Rf(a) => a,
        _ => unreachable!(),
    }
}

#[test]
fn receptive_field_rows() {
    let ball = receptive_rows(&rf_args(&["--branches", "ball", "--token", "0"])).unwrap();
    let marked = ball.iter().filter(|r| r.in_ball).count();
    // 200 points in balls of 64: any token's ball holds 64 or 8 points.
    assert!(marked == 64 || marked == 8, "{marked}");
    assert!(ball.iter().all(|r| !r.in_selection && !r.in_compression));

    for token in ["0", "57", "199"] {
        let sel = receptive_rows(&rf_args(&["--branches", "ball,selection", "--token", token])).unwrap();
        let all = receptive_rows(&rf_args(&["--token", token])).unwrap();
        let b = receptive_rows(&rf_args(&["--branches", "ball", "--token", token])).unwrap();
        for i in 0..200 {
            let f1 = b[i].in_ball;
            let f2 = sel[i].in_ball || sel[i].in_selection;
            let f3 = all[i].in_ball || all[i].in_selection || all[i].in_compression;
            assert!((!f1 || f2) && (!f2 || f3));
            assert!(all[i].in_compression);
            assert!(!(sel[i].in_ball && sel[i].in_selection));
        }
    }
    assert!(receptive_rows(&rf_args(&["--token", "200"])).is_err());
}
