use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn purilab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_purilab"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Data rows of a CSV file, header excluded and metadata comment dropped.
fn csv_rows(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

const SMALL_NET: &str = "[training]\nhidden = [32, 32]\n";

#[test]
fn certify_writes_curve_and_records() {
    let tmp = TempDir::new().unwrap();
    let out = purilab(
        tmp.path(),
        &[
            "certify",
            "--num-points",
            "12",
            "--n-cert",
            "500",
            "--seed",
            "4",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = csv_rows(&tmp.path().join("curve_onestep.csv"));
    assert_eq!(
        header,
        "eps,acc_sigma_0.25,acc_sigma_0.5,acc_sigma_1.0,best"
    );
    assert_eq!(rows.len(), 41);
    assert_eq!(rows[0][0], "0.0");

    let records = jsonl(&tmp.path().join("certify_onestep.jsonl"));
    assert_eq!(records[0]["record"], "meta");
    assert_eq!(records[0]["meta"]["seed"], 4);
    assert_eq!(records.len(), 1 + 3 * 12);
    for r in &records[1..] {
        let n: u64 = r["counts"]
            .as_object()
            .unwrap()
            .values()
            .map(|v| v.as_u64().unwrap())
            .sum();
        assert_eq!(n, 500);
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy"));
}

#[test]
fn missing_distribution_file_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("no_such_dist.toml");
    let out = purilab(
        tmp.path(),
        &["certify", "--distribution", missing.to_str().unwrap()],
    );
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("no_such_dist.toml"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn distribution_file_is_used() {
    let tmp = TempDir::new().unwrap();
    let dist = write_config(
        tmp.path(),
        "dist.toml",
        "[[component]]\ncenter = [-2.0]\nweight = 0.5\nlabel = 0\n\n\
         [[component]]\ncenter = [2.0]\nscale = 0.1\nweight = 0.5\nlabel = 1\n",
    );
    let out = purilab(
        tmp.path(),
        &[
            "certify",
            "--distribution",
            &dist,
            "--num-points",
            "5",
            "--n-cert",
            "200",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let records = jsonl(&tmp.path().join("certify_onestep.jsonl"));
    assert!(records[1..]
        .iter()
        .all(|r| r["x"][0].as_f64().unwrap().abs() > 1.0));
}

#[test]
fn consistency_net_needs_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let out = purilab(tmp.path(), &["certify", "--purifier", "cm-net"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--checkpoint"));
    let out = purilab(tmp.path(), &["finetune"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_config_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "[grid]\nepsilon = 0.1\n");
    assert_eq!(
        code(&purilab(tmp.path(), &["certify", "--config", &cfg])),
        2
    );
    assert_eq!(
        code(&purilab(tmp.path(), &["certify", "--purifier", "magic"])),
        2
    );
    assert_eq!(
        code(&purilab(tmp.path(), &["certify", "--t-eps", "100"])),
        2
    );
    assert_eq!(code(&purilab(tmp.path(), &["certify", "--bogus-flag"])), 2);
}

#[test]
fn flags_override_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "seed = 5\n[smoothing]\nnum_points = 3\nn_cert = 100\n",
    );
    let out = purilab(
        tmp.path(),
        &[
            "certify",
            "--config",
            &cfg,
            "--seed",
            "7",
            "--num-points",
            "2",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let records = jsonl(&tmp.path().join("certify_onestep.jsonl"));
    assert_eq!(records[0]["meta"]["seed"], 7);
    assert_eq!(records.len(), 1 + 3 * 2);
}

#[test]
fn distill_reaches_oracle_agreement() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL_NET);
    let out = purilab(tmp.path(), &["distill", "--config", &cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = fs::read_to_string(tmp.path().join("distill.ckpt")).unwrap();
    assert!(ckpt
        .lines()
        .last()
        .unwrap()
        .starts_with("# seed=0 config_hash="));
    let log = jsonl(&tmp.path().join("distill_log.jsonl"));
    let last = log.last().unwrap();
    assert_eq!(last["record"], "final");
    assert_eq!(last["iter"], 4000);
    assert!(last["oracle_agreement"].as_f64().unwrap() >= 0.99, "{last}");
}

#[test]
fn divergence_exits_with_training_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[training]\nhidden = [8]\nlr = 1e300\niters = 20\n",
    );
    let out = purilab(tmp.path(), &["distill", "--config", &cfg]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("last finite loss"));
    let log = jsonl(&tmp.path().join("distill_log.jsonl"));
    assert_eq!(log.last().unwrap()["record"], "error");
}

fn quick_checkpoint(dir: &Path) -> String {
    let cfg = write_config(
        dir,
        "quick.toml",
        "[training]\nhidden = [16]\niters = 50\neval_draws = 50\n",
    );
    let out = purilab(dir, &["distill", "--config", &cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir.join("distill.ckpt").to_str().unwrap().to_string()
}

#[test]
fn finetune_logs_transport_before_and_after() {
    let tmp = TempDir::new().unwrap();
    let ckpt = quick_checkpoint(tmp.path());
    let cfg = write_config(
        tmp.path(),
        "ft.toml",
        "[training]\neval_draws = 200\n[finetune]\niters = 30\nbatch = 32\n",
    );
    let out = purilab(
        tmp.path(),
        &[
            "finetune",
            "--config",
            &cfg,
            "--checkpoint",
            &ckpt,
            "--loss",
            "feature",
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = jsonl(&tmp.path().join("finetune_log.jsonl"));
    let before = log.iter().find(|r| r["record"] == "before").unwrap();
    let after = log.iter().find(|r| r["record"] == "after").unwrap();
    assert_eq!(before["loss"], "feature");
    for rec in [before, after] {
        let sigmas: Vec<f64> = rec["per_sigma"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| {
                assert!(s["transport_mean"].as_f64().unwrap() >= 0.0);
                s["sigma"].as_f64().unwrap()
            })
            .collect();
        assert_eq!(sigmas, vec![0.25, 0.5, 1.0]);
    }
    assert_ne!(
        fs::read(&ckpt).unwrap(),
        fs::read(tmp.path().join("finetune.ckpt")).unwrap()
    );
}

#[test]
fn finetune_without_iterations_copies_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let ckpt = quick_checkpoint(tmp.path());
    let target = tmp.path().join("copy.ckpt");
    let out = purilab(
        tmp.path(),
        &[
            "finetune",
            "--checkpoint",
            &ckpt,
            "--iters",
            "0",
            "--checkpoint-out",
            target.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&target).unwrap());
}

#[test]
fn transport_default_purifiers_pass() {
    let tmp = TempDir::new().unwrap();
    let out = purilab(tmp.path(), &["transport"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = csv_rows(&tmp.path().join("transport.csv"));
    assert_eq!(header, "purifier,sigma,n,mean_dist,std_err");
    let mut kinds: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    kinds.dedup();
    assert_eq!(kinds, ["onestep", "pfode", "sde", "cm-oracle"]);
    assert_eq!(rows.len(), 16);
    let (_, report) = csv_rows(&tmp.path().join("markov_report.csv"));
    assert_eq!(report.len(), 16 * 5);
    assert!(report.iter().all(|r| r[8] == "true"));
}

#[test]
fn transport_records_sample_size() {
    let tmp = TempDir::new().unwrap();
    let out = purilab(tmp.path(), &["transport", "--n", "100"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (_, rows) = csv_rows(&tmp.path().join("transport.csv"));
    assert!(rows.iter().all(|r| r[2] == "100"));
    let (_, report) = csv_rows(&tmp.path().join("markov_report.csv"));
    assert!(report.iter().all(|r| r[2] == "100"));
}

#[test]
fn shifted_purifier_still_satisfies_markov() {
    // Distances concentrate near 10, so the exceedance at r = 20 is zero and
    // the bound 10/20 holds.
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[transport]\npurifiers = [\"broken-shift\"]\nr_grid = [2.0, 20.0]\nn = 2000\n",
    );
    let out = purilab(tmp.path(), &["transport", "--config", &cfg]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (_, rows) = csv_rows(&tmp.path().join("transport.csv"));
    for r in &rows {
        assert!((r[3].parse::<f64>().unwrap() - 10.0).abs() < 0.5);
    }
}

#[test]
fn understated_transport_is_reported() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[transport]\npurifiers = [\"onestep\"]\nsigmas = [1.0]\nn = 2000\n",
    );
    let out = purilab(
        tmp.path(),
        &["transport", "--config", &cfg, "--inject-mean-scale", "0.01"],
    );
    assert_eq!(code(&out), 4);
    assert!(
        stderr(&out).contains("(onestep, 1, 0.1)"),
        "{}",
        stderr(&out)
    );
    let (_, report) = csv_rows(&tmp.path().join("markov_report.csv"));
    assert!(report.iter().any(|r| r[8] == "false"));
}

#[test]
fn ode_demo_trajectories_do_not_cross() {
    let tmp = TempDir::new().unwrap();
    let out = purilab(tmp.path(), &["ode-demo"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let (header, rows) = csv_rows(&tmp.path().join("trajectories.csv"));
    assert_eq!(header, "trajectory,step,t,x");
    let mut paths: Vec<Vec<f64>> = Vec::new();
    for r in &rows {
        let k: usize = r[0].parse().unwrap();
        if k == paths.len() {
            paths.push(Vec::new());
        }
        paths[k].push(r[3].parse().unwrap());
    }
    assert_eq!(paths.len(), 20);
    for p in &paths {
        let end = *p.last().unwrap();
        assert!((end.abs() - 1.0).abs() < 1e-3, "endpoint {end}");
        assert!(p.iter().all(|x| x.signum() == p[0].signum()));
    }

    let (_, pm) = csv_rows(&tmp.path().join("posterior_mean.csv"));
    let at_zero: Vec<_> = pm.iter().filter(|r| r[1] == "0.0").collect();
    assert_eq!(at_zero.len(), 5);
    assert!(at_zero.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0));
    for r in &pm {
        let (t, x, m): (f64, f64, f64) = (
            r[0].parse().unwrap(),
            r[1].parse().unwrap(),
            r[2].parse().unwrap(),
        );
        assert!((m - (x / (t * t)).tanh()).abs() < 1e-12);
    }
    assert!(tmp.path().join("score_field.csv").is_file());
}

#[test]
fn ode_demo_rejects_higher_dimensions() {
    let tmp = TempDir::new().unwrap();
    let out = purilab(tmp.path(), &["ode-demo", "--distribution", "four-cluster"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn report_orders_purifiers_by_name() {
    let tmp = TempDir::new().unwrap();
    for p in ["pfode", "onestep"] {
        let out = purilab(
            tmp.path(),
            &[
                "certify",
                "--purifier",
                p,
                "--num-points",
                "4",
                "--n-cert",
                "200",
            ],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "[transport]\npurifiers = [\"onestep\"]\nn = 500\n",
    );
    assert_eq!(
        code(&purilab(tmp.path(), &["transport", "--config", &cfg])),
        0
    );
    let out = purilab(tmp.path(), &["report"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let (header, rows) = csv_rows(&tmp.path().join("summary_curves.csv"));
    let cols: Vec<&str> = header.split(',').collect();
    assert_eq!(cols[0], "eps");
    assert!(cols[1].starts_with("onestep:"));
    assert_eq!(cols[4], "onestep:best");
    assert!(cols[5].starts_with("pfode:"));
    assert_eq!(rows.len(), 41);

    let summary: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("summary.json")).unwrap())
            .unwrap();
    let names: Vec<&String> = summary["certified_accuracy"]
        .as_object()
        .unwrap()
        .keys()
        .collect();
    assert_eq!(names, ["onestep", "pfode"]);
    assert_eq!(summary["transport"].as_array().unwrap().len(), 4);
    assert!(summary["meta"]["config_hash"].is_string());
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&purilab(tmp.path(), &["report"])), 2);
    assert_eq!(code(&purilab(&tmp.path().join("missing"), &["report"])), 2);
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for (dir, workers) in [(a.path(), "1"), (b.path(), "3")] {
        let args = [
            "--workers",
            workers,
            "--num-points",
            "6",
            "--n-cert",
            "300",
            "--n",
            "300",
        ];
        for cmd in ["certify", "transport"] {
            let mut full = vec![cmd];
            full.extend(args);
            if cmd == "certify" {
                full.extend(["--purifier", "sde"]);
            }
            let out = purilab(dir, &full);
            assert_eq!(code(&out), 0, "{}", stderr(&out));
        }
    }
    for file in [
        "certify_sde.jsonl",
        "curve_sde.csv",
        "transport.csv",
        "markov_report.csv",
    ] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
}
