//! Consistency distillation from the exact-score PF-ODE, and consistency
//! fine-tuning against clean samples at the smoothing noise levels.
//!
//! Each batch is split into fixed chunks whose gradients are computed in
//! parallel and summed in chunk order, so training is bit-reproducible for
//! any worker count.

use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ode_step, perturb, OdeMethod};
use crate::distributions::MixtureDistribution;
use crate::nn::{param_hash, Activation, AdamState, ConsistencyNet, EmaShadow, Mlp};
use crate::rng::derive_rng;
use crate::timegrid::KarrasGrid;
use crate::{Error, Point, Result};

const CHUNK: usize = 32;

/// Frozen random two-layer network used as a feature-space "perceptual" metric.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    mlp: Mlp,
    hash: String,
}

impl FeatureMap {
    pub fn new(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if output_dim == 0 {
            return Err(Error::domain(
                "feature map output dimension must be at least 1",
            ));
        }
        let mut rng = derive_rng(seed, &[0xfea7]);
        let mlp = Mlp::new(&[input_dim, hidden, output_dim], Activation::Tanh, &mut rng)?;
        let hash = param_hash(mlp.params());
        Ok(Self { mlp, hash })
    }

    /// 32 hidden units, 16 features.
    pub fn default_for(input_dim: usize, seed: u64) -> Result<Self> {
        Self::new(input_dim, 32, 16, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// True while the parameters still match the hash taken at creation.
    pub fn is_intact(&self) -> bool {
        param_hash(self.mlp.params()) == self.hash
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(x)
    }
}

#[derive(Debug, Clone)]
pub enum LossKind {
    L1,
    L2,
    Feature(FeatureMap),
}

impl LossKind {
    /// `l1`, `l2` or `feature`; the feature map is built from `seed`.
    pub fn from_name(name: &str, dim: usize, seed: u64) -> Result<Self> {
        match name {
            "l1" => Ok(LossKind::L1),
            "l2" => Ok(LossKind::L2),
            "feature" => Ok(LossKind::Feature(FeatureMap::default_for(dim, seed)?)),
            other => Err(Error::Parse(format!(
                "unknown loss '{other}' (expected l1, l2 or feature)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::Feature(_) => "feature",
        }
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// ℓ1 sum, ℓ2 norm, or ℓ2 distance between frozen feature embeddings.
pub fn perceptual_distance(a: &[f64], b: &[f64], kind: &LossKind) -> Result<f64> {
    check_dims(a, b)?;
    Ok(match kind {
        LossKind::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        LossKind::L2 => {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            l2_norm(&diff)
        }
        LossKind::Feature(fm) => {
            let (fa, fb) = (fm.features(a)?, fm.features(b)?);
            let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
            l2_norm(&diff)
        }
    })
}

/// The distance and its gradient with respect to `a`. Where the distance is
/// not differentiable (coincident points) the zero subgradient is used.
pub fn distance_and_grad(a: &[f64], b: &[f64], kind: &LossKind) -> Result<(f64, Vec<f64>)> {
    check_dims(a, b)?;
    match kind {
        LossKind::L1 => {
            let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            let g = a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Ok((d, g))
        }
        LossKind::L2 => {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let d = l2_norm(&diff);
            let g = if d > 0.0 {
                diff.iter().map(|v| v / d).collect()
            } else {
                vec![0.0; a.len()]
            };
            Ok((d, g))
        }
        LossKind::Feature(fm) => {
            let (fa, tape) = fm.mlp.forward_tape(a)?;
            let fb = fm.features(b)?;
            let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
            let d = l2_norm(&diff);
            if d == 0.0 {
                return Ok((0.0, vec![0.0; a.len()]));
            }
            let d_feat: Vec<f64> = diff.iter().map(|v| v / d).collect();
            let mut scratch = vec![0.0; fm.mlp.num_params()];
            let g = fm.mlp.backward(&tape, &d_feat, &mut scratch)?;
            Ok((d, g))
        }
    }
}

/// How fine-tuning draws its noise level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaSchedule {
    /// Uniform over the configured set.
    Discrete,
    /// Uniform on `[min, max]` of the configured set.
    Continuous,
}

impl FromStr for SigmaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(SigmaSchedule::Discrete),
            "continuous" => Ok(SigmaSchedule::Continuous),
            other => Err(Error::Parse(format!("unknown sigma schedule '{other}'"))),
        }
    }
}

pub fn sample_sigma<R: Rng + ?Sized>(schedule: SigmaSchedule, sigmas: &[f64], rng: &mut R) -> f64 {
    match schedule {
        SigmaSchedule::Discrete => sigmas[rng.random_range(0..sigmas.len())],
        SigmaSchedule::Continuous => {
            let lo = sigmas.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub grid: KarrasGrid,
    pub batch: usize,
    pub iters: usize,
    pub ema_decay: f64,
    pub lr: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Log every this many iterations (0 disables logging).
    pub log_every: usize,
}

impl DistillConfig {
    /// Batch 256, 4000 iterations, EMA 0.999, learning rate 1e-3, ℓ2 loss.
    pub fn new(grid: KarrasGrid, seed: u64) -> Self {
        Self {
            grid,
            batch: 256,
            iters: 4000,
            ema_decay: 0.999,
            lr: 1e-3,
            loss: LossKind::L2,
            seed,
            log_every: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::domain("batch must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::domain("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::domain("EMA decay must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub sigmas: Vec<f64>,
    pub schedule: SigmaSchedule,
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub log_every: usize,
}

impl FinetuneConfig {
    /// σ ∈ {0.25, 0.5, 1.0} (discrete), batch 256, 2000 iterations,
    /// learning rate 1e-4.
    pub fn new(loss: LossKind, seed: u64) -> Self {
        Self {
            sigmas: vec![0.25, 0.5, 1.0],
            schedule: SigmaSchedule::Discrete,
            batch: 256,
            iters: 2000,
            lr: 1e-4,
            loss,
            seed,
            log_every: 0,
        }
    }

    fn validate(&self, grid: &KarrasGrid) -> Result<()> {
        if self.sigmas.is_empty() {
            return Err(Error::domain("fine-tuning needs at least one sigma"));
        }
        if let Some(s) = self
            .sigmas
            .iter()
            .find(|&&s| !(s >= grid.eps() && s <= grid.t_max()))
        {
            return Err(Error::domain(format!(
                "sigma {s} lies outside the grid horizon [{}, {}]",
                grid.eps(),
                grid.t_max()
            )));
        }
        if self.batch == 0 {
            return Err(Error::domain("batch must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::domain("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Passed to the logging callback every `log_every` iterations and once more
/// after the final one.
pub struct TrainEvent<'a> {
    /// Number of completed iterations.
    pub iter: usize,
    /// Mean batch loss of the last iteration.
    pub loss: f64,
    /// The network that would be returned if training stopped here.
    pub net: &'a ConsistencyNet,
}

/// One training example: produces `(loss, d_loss/d_output)` after the
/// online network has been evaluated on `input` at `t`.
struct Example {
    input: Point,
    t: f64,
    target: Point,
}

fn check_loss_dim(loss: &LossKind, dim: usize) -> Result<()> {
    if let LossKind::Feature(fm) = loss {
        if fm.input_dim() != dim {
            return Err(Error::domain(format!(
                "feature map expects dimension {}, data has {dim}",
                fm.input_dim()
            )));
        }
    }
    Ok(())
}

/// Mean loss and summed-then-averaged gradient over the batch, reduced in a
/// fixed chunk order.
fn batch_gradient(
    net: &ConsistencyNet,
    examples: &[Example],
    loss: &LossKind,
) -> Result<(f64, Vec<f64>)> {
    let n_params = net.params().len();
    let partials: Vec<(f64, Vec<f64>)> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = vec![0.0; n_params];
            let mut total = 0.0;
            for ex in chunk {
                let (out, tape) = net.forward_tape(&ex.input, ex.t)?;
                let (d, g) = distance_and_grad(&out, &ex.target, loss)?;
                total += d;
                net.backward(&tape, &g, &mut grads)?;
            }
            Ok((total, grads))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / examples.len() as f64;
    let mut grads = vec![0.0; n_params];
    let mut total = 0.0;
    for (l, g) in partials {
        total += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    grads.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grads))
}

fn apply_step(
    net: &mut ConsistencyNet,
    adam: &mut AdamState,
    grads: &[f64],
    loss: f64,
    iter: usize,
    last_finite: f64,
) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Training {
            iter,
            last_finite_loss: last_finite,
        });
    }
    let mut params = net.params().to_vec();
    adam.step(&mut params, grads).map_err(|_| Error::Training {
        iter,
        last_finite_loss: last_finite,
    })?;
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Training {
            iter,
            last_finite_loss: last_finite,
        });
    }
    net.mlp_mut().set_params(&params)
}

pub fn distill(
    dist: &MixtureDistribution,
    net: ConsistencyNet,
    cfg: &DistillConfig,
) -> Result<ConsistencyNet> {
    distill_with_log(dist, net, cfg, &mut |_| {})
}

/// Consistency distillation. Returns the EMA (target) parameters.
pub fn distill_with_log(
    dist: &MixtureDistribution,
    mut net: ConsistencyNet,
    cfg: &DistillConfig,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<ConsistencyNet> {
    cfg.validate()?;
    if net.data_dim() != dist.dim() {
        return Err(Error::domain(format!(
            "network data_dim {} does not match distribution dim {}",
            net.data_dim(),
            dist.dim()
        )));
    }
    check_loss_dim(&cfg.loss, dist.dim())?;
    if cfg.iters == 0 {
        return Ok(net);
    }
    let points = cfg.grid.points();
    if points.len() < 2 {
        return Err(Error::domain(
            "distillation needs a grid with at least two points",
        ));
    }
    let score = |x: &[f64], t: f64| dist.score_unchecked(x, t);
    let mut ema = EmaShadow::new(net.params(), cfg.ema_decay)?;
    let mut adam = AdamState::new(net.params().len(), cfg.lr);
    let mut last_finite = f64::NAN;
    for iter in 0..cfg.iters {
        let target_net = net.with_params(ema.params())?;
        let examples: Vec<Example> = (0..cfg.batch)
            .into_par_iter()
            .map(|b| {
                let mut rng = derive_rng(cfg.seed, &[1, iter as u64, b as u64]);
                let (x0, _) = dist.sample_one(&mut rng);
                let i = rng.random_range(0..points.len() - 1);
                let (t_lo, t_hi) = (points[i], points[i + 1]);
                let x_hi = perturb(&x0, t_hi, &mut rng);
                let x_lo = ode_step(&score, &x_hi, t_hi, t_lo, OdeMethod::Heun)?;
                let target = target_net.forward(&x_lo, t_lo)?;
                Ok(Example {
                    input: x_hi,
                    t: t_hi,
                    target,
                })
            })
            .collect::<Result<_>>()?;
        let (loss, grads) = batch_gradient(&net, &examples, &cfg.loss)?;
        apply_step(&mut net, &mut adam, &grads, loss, iter, last_finite)?;
        last_finite = loss;
        ema.update(net.params())?;
        let done = iter + 1;
        if (cfg.log_every > 0 && done % cfg.log_every == 0) || done == cfg.iters {
            let current = net.with_params(ema.params())?;
            log(&TrainEvent {
                iter: done,
                loss,
                net: &current,
            });
        }
    }
    net.with_params(ema.params())
}

pub fn finetune(
    dist: &MixtureDistribution,
    net: ConsistencyNet,
    grid: &KarrasGrid,
    cfg: &FinetuneConfig,
) -> Result<ConsistencyNet> {
    finetune_with_log(dist, net, grid, cfg, &mut |_| {})
}

/// Consistency fine-tuning: minimizes `loss(x, D(x + σz, t*(σ)))` with σ drawn
/// from the configured schedule.
pub fn finetune_with_log(
    dist: &MixtureDistribution,
    mut net: ConsistencyNet,
    grid: &KarrasGrid,
    cfg: &FinetuneConfig,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<ConsistencyNet> {
    cfg.validate(grid)?;
    if net.data_dim() != dist.dim() {
        return Err(Error::domain(format!(
            "network data_dim {} does not match distribution dim {}",
            net.data_dim(),
            dist.dim()
        )));
    }
    check_loss_dim(&cfg.loss, dist.dim())?;
    if cfg.iters == 0 {
        return Ok(net);
    }
    let mut adam = AdamState::new(net.params().len(), cfg.lr);
    let mut last_finite = f64::NAN;
    for iter in 0..cfg.iters {
        let examples: Vec<Example> = (0..cfg.batch)
            .map(|b| {
                let mut rng = derive_rng(cfg.seed, &[2, iter as u64, b as u64]);
                let (x0, _) = dist.sample_one(&mut rng);
                let sigma = sample_sigma(cfg.schedule, &cfg.sigmas, &mut rng);
                let noisy = perturb(&x0, sigma, &mut rng);
                Example {
                    input: noisy,
                    t: grid.select_timestep(sigma),
                    target: x0,
                }
            })
            .collect();
        let (loss, grads) = batch_gradient(&net, &examples, &cfg.loss)?;
        apply_step(&mut net, &mut adam, &grads, loss, iter, last_finite)?;
        last_finite = loss;
        let done = iter + 1;
        if (cfg.log_every > 0 && done % cfg.log_every == 0) || done == cfg.iters {
            log(&TrainEvent {
                iter: done,
                loss,
                net: &net,
            });
        }
    }
    Ok(net)
}
