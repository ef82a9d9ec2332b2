use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};

use purilab::diffusion::{solve_pf_ode_path, OdeMethod, OdeSolverConfig};
use purilab::distributions::MixtureDistribution;
use purilab::nn::{ConsistencyNet, NetConfig};
use purilab::purifiers::{Purifier, PurifierKind, Purify};
use purilab::rng::{derive_rng, derive_seed, Rng64};
use purilab::smoothing::{
    self, best_over_sigma, certified_accuracy_curve, CertifyOutcome, Classifier,
};
use purilab::timegrid::KarrasGrid;
use purilab::training::{
    distill_with_log, finetune_with_log, DistillConfig, FinetuneConfig, LossKind, SigmaSchedule,
    TrainEvent,
};
use purilab::transport::{estimate_transport, markov_bound_report, TransportEstimate};
use purilab::Point;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{self, num, Csv, JsonLines, Meta};

/// Settings that only steer where things go or how they are checked.
#[derive(Debug, Clone, Default)]
pub struct Extra {
    pub checkpoint_out: Option<PathBuf>,
    /// Multiplies every transport mean before the Markov check.
    pub inject_mean_scale: Option<f64>,
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub meta: Meta,
    pub dist: Arc<MixtureDistribution>,
    pub grid: KarrasGrid,
    pub extra: Extra,
}

const DEFAULT_PURIFIERS: [&str; 4] = ["onestep", "pfode", "sde", "cm-oracle"];

impl Context {
    pub fn new(cfg: ExperimentConfig, extra: Extra) -> Result<Self, CliError> {
        let dist = Arc::new(cfg.distribution.resolve()?);
        let grid = cfg.grid.build()?;
        if let Some(path) = &cfg.purifier.checkpoint {
            if !path.is_file() {
                return Err(CliError::Config(format!(
                    "checkpoint {} does not exist",
                    path.display()
                )));
            }
        }
        let meta = Meta::new(cfg.seed, cfg.hash());
        Ok(Self {
            cfg,
            meta,
            dist,
            grid,
            extra,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn load_net(&self) -> Result<(ConsistencyNet, Vec<u8>), CliError> {
        let path = self.cfg.purifier.checkpoint.as_ref().ok_or_else(|| {
            CliError::Config("a consistency network is required; pass --checkpoint <file>".into())
        })?;
        let bytes = fs::read(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| CliError::Config(format!("checkpoint {} is not UTF-8", path.display())))?;
        let net = ConsistencyNet::from_checkpoint(&text)
            .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))?;
        Ok((net, bytes))
    }

    fn t_end(&self) -> f64 {
        self.cfg.purifier.t_end.unwrap_or(self.grid.eps())
    }

    fn purifier(&self, name: &str) -> Result<Box<dyn Purify>, CliError> {
        let p = &self.cfg.purifier;
        let kind = match name {
            "onestep" => PurifierKind::OnestepPosteriorMean,
            "pfode" => {
                let method: OdeMethod = p
                    .solver
                    .parse()
                    .map_err(|e| CliError::Config(format!("{e}")))?;
                PurifierKind::PfOde(OdeSolverConfig::new(method, p.ode_steps, self.t_end())?)
            }
            "sde" => PurifierKind::ReverseSde { steps: p.sde_steps },
            "cm-oracle" => PurifierKind::ConsistencyOracle(OdeSolverConfig::heun(
                p.oracle_steps,
                self.t_end(),
            )?),
            "cm-net" => PurifierKind::ConsistencyNet(Arc::new(self.load_net()?.0)),
            "broken-shift" => return Ok(Box::new(BrokenShift)),
            other => {
                return Err(CliError::Config(format!(
                    "unknown purifier '{other}' (expected onestep, pfode, sde, cm-oracle or cm-net)"
                )))
            }
        };
        Ok(Box::new(Purifier::new(
            kind,
            self.dist.clone(),
            self.grid.clone(),
        )?))
    }

    fn classifier(&self) -> Result<Classifier, CliError> {
        let c = &self.cfg.classifier;
        match c.kind.as_str() {
            "nearest-centroid" => Ok(Classifier::from_mixture(&self.dist)),
            "logistic" => {
                if c.weights.len() != self.dist.dim() || c.labels.len() != 2 {
                    return Err(CliError::Config(format!(
                        "logistic classifier needs {} weights and two labels",
                        self.dist.dim()
                    )));
                }
                Ok(Classifier::Logistic {
                    weights: c.weights.clone(),
                    bias: c.bias,
                    labels: [c.labels[0], c.labels[1]],
                })
            }
            other => Err(CliError::Config(format!(
                "unknown classifier '{other}' (expected nearest-centroid or logistic)"
            ))),
        }
    }

    fn oracle(&self) -> Result<Purifier, CliError> {
        let kind = PurifierKind::ConsistencyOracle(OdeSolverConfig::heun(
            self.cfg.purifier.oracle_steps,
            self.t_end(),
        )?);
        Ok(Purifier::new(kind, self.dist.clone(), self.grid.clone())?)
    }

    fn net_purifier(&self, net: &ConsistencyNet) -> Result<Purifier, CliError> {
        let kind = PurifierKind::ConsistencyNet(Arc::new(net.clone()));
        Ok(Purifier::new(kind, self.dist.clone(), self.grid.clone())?)
    }
}

/// Shifts the first coordinate by 10; used to exercise the transport report.
struct BrokenShift;

impl Purify for BrokenShift {
    fn purify(&self, x: &[f64], _sigma: f64, _rng: &mut Rng64) -> purilab::Result<Point> {
        let mut out = x.to_vec();
        if let Some(v) = out.first_mut() {
            *v += 10.0;
        }
        Ok(out)
    }

    fn name(&self) -> String {
        "broken-shift".into()
    }
}

fn test_points(ctx: &Context) -> Vec<(Point, u32)> {
    (0..ctx.cfg.smoothing.num_points)
        .map(|i| {
            ctx.dist
                .sample_one(&mut derive_rng(ctx.cfg.seed, &[100, i as u64]))
        })
        .collect()
}

pub fn certify(ctx: &Context) -> Result<(), CliError> {
    let s = &ctx.cfg.smoothing;
    if s.sigmas.is_empty() || s.num_points == 0 {
        return Err(CliError::Config(
            "certify needs at least one sigma and one test point".into(),
        ));
    }
    let name = ctx.cfg.purifier.kind.clone();
    let purifier = ctx.purifier(&name)?;
    let classifier = ctx.classifier()?;
    let points = test_points(ctx);
    let started = Instant::now();

    let mut records = JsonLines::new(&ctx.meta);
    let mut curves = Vec::with_capacity(s.sigmas.len());
    println!(
        "purifier {name}: {} points, n0 {}, n {}, alpha {}",
        points.len(),
        s.n0,
        s.n_cert,
        s.alpha
    );
    println!(
        "{:>8} {:>10} {:>10} {:>12}",
        "sigma", "accuracy", "abstain", "mean_radius"
    );
    for (si, &sigma) in s.sigmas.iter().enumerate() {
        let mut outcomes: Vec<(CertifyOutcome, u32)> = Vec::with_capacity(points.len());
        for (i, (x, label)) in points.iter().enumerate() {
            let seed = derive_seed(ctx.cfg.seed, &[101, si as u64, i as u64]);
            let o = smoothing::certify(
                &*purifier,
                &classifier,
                x,
                sigma,
                s.n0,
                s.n_cert,
                s.alpha,
                seed,
            )?;
            records.push(&json!({
                "record": "point",
                "index": i,
                "sigma": sigma,
                "x": x,
                "label": label,
                "prediction": o.prediction,
                "correct": o.prediction == Some(*label),
                "radius": o.radius,
                "p_a_lower": o.p_a_lower,
                "counts0": o.counts0,
                "counts": o.counts,
            }));
            outcomes.push((o, *label));
        }
        let correct: Vec<f64> = outcomes
            .iter()
            .filter(|(o, l)| o.prediction == Some(*l))
            .map(|(o, _)| o.radius)
            .collect();
        let abstain = outcomes
            .iter()
            .filter(|(o, _)| o.prediction.is_none())
            .count();
        let mean_radius = if correct.is_empty() {
            0.0
        } else {
            correct.iter().sum::<f64>() / correct.len() as f64
        };
        println!(
            "{:>8} {:>10.4} {:>10} {:>12.4}",
            sigma,
            correct.len() as f64 / outcomes.len() as f64,
            abstain,
            mean_radius
        );
        curves.push(certified_accuracy_curve(&outcomes, &s.eps_grid)?);
    }
    let best = best_over_sigma(&curves)?;

    let mut header = vec!["eps".to_string()];
    header.extend(s.sigmas.iter().map(|&v| format!("acc_sigma_{}", num(v))));
    header.push("best".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header);
    for (k, &eps) in s.eps_grid.iter().enumerate() {
        let mut row = vec![num(eps)];
        row.extend(curves.iter().map(|c| num(c[k])));
        row.push(num(best[k]));
        csv.row(&row);
    }

    let jsonl = output::write(
        &ctx.out(&format!("certify_{name}.jsonl")),
        &records.into_string(),
    )?;
    let curve = output::write(
        &ctx.out(&format!("curve_{name}.csv")),
        &csv.finish(&ctx.meta),
    )?;
    println!(
        "wrote {} and {} in {:.1}s",
        jsonl.display(),
        curve.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Per-σ agreement with the oracle and transport of `net`, evaluated on
/// `draws` paired samples.
fn evaluate_net(
    ctx: &Context,
    net: &ConsistencyNet,
    sigmas: &[f64],
    seed: u64,
) -> Result<Vec<Value>, CliError> {
    let draws = ctx.cfg.training.eval_draws;
    if draws < 2 {
        return Err(CliError::Config("eval_draws must be at least 2".into()));
    }
    let classifier = ctx.classifier()?;
    let oracle = ctx.oracle()?;
    let purifier = ctx.net_purifier(net)?;
    sigmas
        .iter()
        .enumerate()
        .map(|(si, &sigma)| {
            let agree = (0..draws)
                .into_par_iter()
                .map(|i| -> Result<u64, CliError> {
                    let mut rng = derive_rng(seed, &[si as u64, i as u64]);
                    let (x, _) = ctx.dist.sample_one(&mut rng);
                    let noisy = purilab::diffusion::perturb(&x, sigma, &mut rng);
                    let a = classifier.classify(&purifier.purify(&noisy, sigma, &mut rng)?)?;
                    let b = classifier.classify(&oracle.purify(&noisy, sigma, &mut rng)?)?;
                    Ok((a == b) as u64)
                })
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .sum::<u64>();
            let est = estimate_transport(
                &ctx.dist,
                &purifier,
                sigma,
                draws,
                &ctx.cfg.transport.r_grid,
                seed,
            )?;
            Ok(json!({
                "sigma": sigma,
                "oracle_agreement": agree as f64 / draws as f64,
                "transport_mean": est.mean_dist,
                "transport_std_err": est.std_err,
            }))
        })
        .collect()
}

fn min_agreement(rows: &[Value]) -> f64 {
    rows.iter()
        .filter_map(|r| r["oracle_agreement"].as_f64())
        .fold(f64::INFINITY, f64::min)
}

fn progress_record(ev: &TrainEvent) -> Value {
    json!({ "record": "progress", "iter": ev.iter, "loss": ev.loss })
}

/// Writes the log, then converts a training error into the CLI error.
fn finish_training<T>(
    ctx: &Context,
    log_name: &str,
    mut log: JsonLines,
    result: purilab::Result<T>,
) -> Result<T, CliError> {
    match result {
        Ok(v) => Ok(v),
        Err(e) => {
            log.push(&json!({ "record": "error", "message": e.to_string() }));
            output::write(&ctx.out(log_name), &log.into_string())?;
            Err(e.into())
        }
    }
}

pub fn distill(ctx: &Context) -> Result<(), CliError> {
    let t = &ctx.cfg.training;
    let dim = ctx.dist.dim();
    let net_cfg = NetConfig {
        data_dim: dim,
        hidden: t.hidden.clone(),
        activation: t.activation.parse()?,
        frequencies: t.frequencies,
        sigma_data: t.sigma_data,
    };
    let net = ConsistencyNet::new(&net_cfg, &ctx.grid, &mut derive_rng(ctx.cfg.seed, &[200]))?;
    let cfg = DistillConfig {
        grid: ctx.grid.clone(),
        batch: t.batch,
        iters: t.iters,
        ema_decay: t.ema_decay,
        lr: t.lr,
        loss: LossKind::from_name(&t.loss, dim, t.feature_seed)?,
        seed: derive_seed(ctx.cfg.seed, &[201]),
        log_every: t.log_every,
    };
    let started = Instant::now();
    let mut log = JsonLines::new(&ctx.meta);
    let mut last_loss = f64::NAN;
    let result = distill_with_log(&ctx.dist, net, &cfg, &mut |ev| {
        last_loss = ev.loss;
        log.push(&progress_record(ev));
    });
    let net = finish_training(ctx, "distill_log.jsonl", log.clone(), result)?;

    let ckpt_path = ctx
        .extra
        .checkpoint_out
        .clone()
        .unwrap_or_else(|| ctx.out("distill.ckpt"));
    output::write(&ckpt_path, &(net.to_checkpoint() + &ctx.meta.comment()))?;
    let eval = evaluate_net(ctx, &net, &t.eval_sigmas, derive_seed(ctx.cfg.seed, &[202]))?;
    let agreement = min_agreement(&eval);
    log.push(&json!({
        "record": "final",
        "iter": t.iters,
        "loss": last_loss,
        "oracle_agreement": agreement,
        "per_sigma": eval,
        "param_hash": net.param_hash(),
        "checkpoint": ckpt_path.display().to_string(),
    }));
    let log_path = output::write(&ctx.out("distill_log.jsonl"), &log.into_string())?;
    println!(
        "distilled {} iterations in {:.1}s; oracle agreement {:.4}; wrote {} and {}",
        t.iters,
        started.elapsed().as_secs_f64(),
        agreement,
        ckpt_path.display(),
        log_path.display()
    );
    Ok(())
}

pub fn finetune(ctx: &Context) -> Result<(), CliError> {
    let (net, input_bytes) = ctx.load_net()?;
    let f = &ctx.cfg.finetune;
    let schedule: SigmaSchedule = f.schedule.parse()?;
    let cfg = FinetuneConfig {
        sigmas: f.sigmas.clone(),
        schedule,
        batch: f.batch,
        iters: f.iters,
        lr: f.lr,
        loss: LossKind::from_name(&f.loss, ctx.dist.dim(), ctx.cfg.training.feature_seed)?,
        seed: derive_seed(ctx.cfg.seed, &[300]),
        log_every: ctx.cfg.training.log_every,
    };
    let eval_seed = derive_seed(ctx.cfg.seed, &[301]);
    let started = Instant::now();
    let mut log = JsonLines::new(&ctx.meta);
    let before = evaluate_net(ctx, &net, &f.sigmas, eval_seed)?;
    log.push(&json!({ "record": "before", "loss": f.loss, "per_sigma": before }));

    let ckpt_path = ctx
        .extra
        .checkpoint_out
        .clone()
        .unwrap_or_else(|| ctx.out("finetune.ckpt"));
    let tuned = if cfg.iters == 0 {
        output::ensure_dir(ckpt_path.parent().unwrap_or(Path::new(".")))?;
        fs::write(&ckpt_path, &input_bytes)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", ckpt_path.display())))?;
        net
    } else {
        let result = finetune_with_log(&ctx.dist, net, &ctx.grid, &cfg, &mut |ev| {
            log.push(&progress_record(ev));
        });
        let tuned = finish_training(ctx, "finetune_log.jsonl", log.clone(), result)?;
        output::write(&ckpt_path, &(tuned.to_checkpoint() + &ctx.meta.comment()))?;
        tuned
    };
    let after = evaluate_net(ctx, &tuned, &f.sigmas, eval_seed)?;
    log.push(&json!({
        "record": "after",
        "iter": cfg.iters,
        "oracle_agreement": min_agreement(&after),
        "per_sigma": after,
        "param_hash": tuned.param_hash(),
        "checkpoint": ckpt_path.display().to_string(),
    }));
    let log_path = output::write(&ctx.out("finetune_log.jsonl"), &log.into_string())?;
    println!(
        "{:>8} {:>14} {:>14}",
        "sigma", "transport_pre", "transport_post"
    );
    for (b, a) in before.iter().zip(&after) {
        println!(
            "{:>8} {:>14.5} {:>14.5}",
            b["sigma"].as_f64().unwrap_or(f64::NAN),
            b["transport_mean"].as_f64().unwrap_or(f64::NAN),
            a["transport_mean"].as_f64().unwrap_or(f64::NAN)
        );
    }
    println!(
        "fine-tuned {} iterations in {:.1}s; wrote {} and {}",
        cfg.iters,
        started.elapsed().as_secs_f64(),
        ckpt_path.display(),
        log_path.display()
    );
    Ok(())
}

pub fn transport(ctx: &Context) -> Result<(), CliError> {
    let tc = &ctx.cfg.transport;
    let names: Vec<String> = if tc.purifiers.is_empty() {
        let mut v: Vec<String> = DEFAULT_PURIFIERS.iter().map(|s| s.to_string()).collect();
        if ctx.cfg.purifier.checkpoint.is_some() {
            v.push("cm-net".into());
        }
        v
    } else {
        tc.purifiers.clone()
    };
    if tc.sigmas.is_empty() {
        return Err(CliError::Config(
            "transport needs at least one sigma".into(),
        ));
    }
    let purifiers = names
        .iter()
        .map(|n| ctx.purifier(n))
        .collect::<Result<Vec<_>, _>>()?;
    let seed = derive_seed(ctx.cfg.seed, &[400]);
    let mut table = Csv::new(&["purifier", "sigma", "n", "mean_dist", "std_err"]);
    let mut report = Csv::new(&[
        "purifier",
        "sigma",
        "n",
        "r",
        "exceedance",
        "bound",
        "slack",
        "combined_se",
        "pass",
    ]);
    let mut failing = Vec::new();
    println!(
        "{:>12} {:>8} {:>8} {:>12} {:>10}",
        "purifier", "sigma", "n", "transport", "std_err"
    );
    for (name, p) in names.iter().zip(&purifiers) {
        for &sigma in &tc.sigmas {
            let mut est: TransportEstimate =
                estimate_transport(&ctx.dist, &**p, sigma, tc.n, &tc.r_grid, seed)?;
            if let Some(k) = ctx.extra.inject_mean_scale {
                est.mean_dist *= k;
            }
            println!(
                "{:>12} {:>8} {:>8} {:>12.6} {:>10.6}",
                name, sigma, est.n, est.mean_dist, est.std_err
            );
            table.row(&[
                name.clone(),
                num(sigma),
                est.n.to_string(),
                num(est.mean_dist),
                num(est.std_err),
            ]);
            for rec in markov_bound_report(&est)? {
                if !rec.pass {
                    failing.push(format!("({name}, {sigma}, {})", rec.r));
                }
                report.row(&[
                    name.clone(),
                    num(sigma),
                    est.n.to_string(),
                    num(rec.r),
                    num(rec.exceedance),
                    num(rec.bound),
                    num(rec.slack),
                    num(rec.combined_se),
                    rec.pass.to_string(),
                ]);
            }
        }
    }
    output::write(&ctx.out("transport.csv"), &table.finish(&ctx.meta))?;
    let report_path = output::write(&ctx.out("markov_report.csv"), &report.finish(&ctx.meta))?;
    if failing.is_empty() {
        println!(
            "Markov bound holds for every (purifier, sigma, r); report in {}",
            report_path.display()
        );
        Ok(())
    } else {
        Err(CliError::Violation(format!(
            "Markov bound fails for (purifier, sigma, r): {}",
            failing.join(", ")
        )))
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn ode_demo(ctx: &Context) -> Result<(), CliError> {
    if ctx.dist.dim() != 1 {
        return Err(CliError::Config(format!(
            "ode-demo needs a 1D distribution, got dimension {}",
            ctx.dist.dim()
        )));
    }
    let d = &ctx.cfg.ode_demo;
    let solver = OdeSolverConfig::heun(d.steps, d.t_end)?;
    let dist = &*ctx.dist;
    let score = |x: &[f64], t: f64| dist.score_unchecked(x, t);

    let starts = linspace(-d.x_range, d.x_range, d.trajectories);
    let paths = starts
        .par_iter()
        .map(|&x0| solve_pf_ode_path(score, &[x0], d.t_start, &solver))
        .collect::<purilab::Result<Vec<_>>>()?;
    let mut traj = Csv::new(&["trajectory", "step", "t", "x"]);
    for (k, path) in paths.iter().enumerate() {
        for (step, (t, x)) in path.iter().enumerate() {
            traj.row(&[k.to_string(), step.to_string(), num(*t), num(x[0])]);
        }
    }

    let xs = linspace(-d.x_range, d.x_range, d.field_points);
    let mut pm = Csv::new(&["t", "x", "posterior_mean"]);
    let mut sf = Csv::new(&["t", "x", "score"]);
    for &t in &d.field_times {
        for &x in &xs {
            pm.row(&[num(t), num(x), num(dist.posterior_mean(&[x], t)?[0])]);
            sf.row(&[num(t), num(x), num(dist.score(&[x], t)?[0])]);
        }
    }
    output::write(&ctx.out("trajectories.csv"), &traj.finish(&ctx.meta))?;
    output::write(&ctx.out("posterior_mean.csv"), &pm.finish(&ctx.meta))?;
    output::write(&ctx.out("score_field.csv"), &sf.finish(&ctx.meta))?;

    let crossings = paths
        .iter()
        .filter(|p| p.windows(2).any(|w| w[0].1[0] * w[1].1[0] < 0.0))
        .count();
    println!(
        "{} trajectories from t={} to t={}; {} change sign; wrote {}",
        paths.len(),
        d.t_start,
        d.t_end,
        crossings,
        ctx.cfg.out_dir.display()
    );
    Ok(())
}

struct CurveFile {
    columns: Vec<String>,
    eps: Vec<f64>,
    values: Vec<Vec<f64>>,
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect::<Vec<_>>();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    if rows.iter().any(|r| r.len() != header.len()) {
        return Err(CliError::Config(format!(
            "{} has ragged rows",
            path.display()
        )));
    }
    Ok((header, rows))
}

fn parse_num(s: &str, path: &Path) -> Result<f64, CliError> {
    s.parse()
        .map_err(|_| CliError::Config(format!("{}: '{s}' is not a number", path.display())))
}

fn read_curve(path: &Path) -> Result<CurveFile, CliError> {
    let (header, rows) = read_csv(path)?;
    if header.first().map(String::as_str) != Some("eps") {
        return Err(CliError::Config(format!(
            "{} does not start with an eps column",
            path.display()
        )));
    }
    let mut eps = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    for r in &rows {
        eps.push(parse_num(&r[0], path)?);
        values.push(
            r[1..]
                .iter()
                .map(|v| parse_num(v, path))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(CurveFile {
        columns: header[1..].to_vec(),
        eps,
        values,
    })
}

pub fn report(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let dir = &cfg.out_dir;
    let entries = fs::read_dir(dir).map_err(|e| {
        CliError::Config(format!(
            "cannot read results directory {}: {e}",
            dir.display()
        ))
    })?;
    let mut curves: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Io(e.to_string()))?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        if let Some(name) = file
            .strip_prefix("curve_")
            .and_then(|f| f.strip_suffix(".csv"))
        {
            curves.insert(name.to_string(), path.clone());
        }
    }
    let transport_path = dir.join("transport.csv");
    let markov_path = dir.join("markov_report.csv");
    if curves.is_empty() && !transport_path.is_file() {
        return Err(CliError::Config(format!(
            "no certification curves or transport results in {}",
            dir.display()
        )));
    }

    let mut summary = serde_json::Map::new();
    summary.insert("meta".into(), Meta::new(cfg.seed, cfg.hash()).json());
    let mut acc = serde_json::Map::new();
    let mut header = vec!["eps".to_string()];
    let mut eps_grid: Option<Vec<f64>> = None;
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (name, path) in &curves {
        let c = read_curve(path)?;
        match &eps_grid {
            None => eps_grid = Some(c.eps.clone()),
            Some(g) if *g != c.eps => {
                return Err(CliError::Config(format!(
                    "{} uses a different eps grid from the other curves",
                    path.display()
                )))
            }
            _ => {}
        }
        let mut entry = serde_json::Map::new();
        entry.insert("eps".into(), json!(c.eps));
        for (j, col) in c.columns.iter().enumerate() {
            let values: Vec<f64> = c.values.iter().map(|r| r[j]).collect();
            entry.insert(col.clone(), json!(values));
            header.push(format!("{name}:{col}"));
            columns.push(values);
        }
        acc.insert(name.clone(), Value::Object(entry));
    }
    summary.insert("certified_accuracy".into(), Value::Object(acc));

    for (key, path) in [("transport", &transport_path), ("markov", &markov_path)] {
        if !path.is_file() {
            continue;
        }
        let (h, rows) = read_csv(path)?;
        let records: Vec<Value> = rows
            .iter()
            .map(|r| {
                let obj = h
                    .iter()
                    .zip(r)
                    .map(|(k, v)| {
                        let val = match (k.as_str(), v.parse::<f64>()) {
                            ("purifier", _) | (_, Err(_)) => match v.as_str() {
                                "true" => Value::Bool(true),
                                "false" => Value::Bool(false),
                                _ => Value::String(v.clone()),
                            },
                            ("n", Ok(x)) => json!(x as u64),
                            (_, Ok(x)) => json!(x),
                        };
                        (k.clone(), val)
                    })
                    .collect::<serde_json::Map<_, _>>();
                Value::Object(obj)
            })
            .collect();
        summary.insert(key.into(), Value::Array(records));
    }

    let meta = Meta::new(cfg.seed, cfg.hash());
    let json_text =
        serde_json::to_string_pretty(&Value::Object(summary)).expect("summary serializes") + "\n";
    let json_path = output::write(&dir.join("summary.json"), &json_text)?;
    if let Some(grid) = eps_grid {
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut csv = Csv::new(&h);
        for (k, eps) in grid.iter().enumerate() {
            let mut row = vec![num(*eps)];
            row.extend(columns.iter().map(|c| num(c[k])));
            csv.row(&row);
        }
        output::write(&dir.join("summary_curves.csv"), &csv.finish(&meta))?;
    }
    println!(
        "summarized {} purifier curve(s){} into {}",
        curves.len(),
        if transport_path.is_file() {
            " and transport results"
        } else {
            ""
        },
        json_path.display()
    );
    Ok(())
}
