//! EDM-parameterized diffusion: `s(t) = 1`, `σ(t) = t`.
//!
//! Forward: `x_t = x_0 + t z`. The probability-flow ODE is
//! `dx = -t ∇log p_t(x) dt` and the reverse SDE is
//! `dx = -2t ∇log p_t(x) dt + sqrt(2t) dw̄`, both integrated from `t_start`
//! down to `t_end` on a ρ-warped time schedule.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::timegrid::{karras_points, DEFAULT_EPS, DEFAULT_RHO};
use crate::{Error, Point, Result};

/// The EDM noise schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EdmSchedule;

impl EdmSchedule {
    pub fn s(&self, _t: f64) -> f64 {
        1.0
    }

    pub fn sigma(&self, t: f64) -> f64 {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeMethod {
    Euler,
    Heun,
}

impl std::str::FromStr for OdeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(OdeMethod::Euler),
            "heun" => Ok(OdeMethod::Heun),
            other => Err(Error::Parse(format!("unknown ODE method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeSolverConfig {
    pub method: OdeMethod,
    pub steps: usize,
    pub t_end: f64,
}

impl OdeSolverConfig {
    pub fn new(method: OdeMethod, steps: usize, t_end: f64) -> Result<Self> {
        let cfg = Self {
            method,
            steps,
            t_end,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn heun(steps: usize, t_end: f64) -> Result<Self> {
        Self::new(OdeMethod::Heun, steps, t_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::domain("ODE solver needs at least one step"));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::domain(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        Ok(())
    }
}

impl Default for OdeSolverConfig {
    /// Heun with 18 steps down to the default grid minimum.
    fn default() -> Self {
        Self {
            method: OdeMethod::Heun,
            steps: 18,
            t_end: DEFAULT_EPS,
        }
    }
}

/// Draw `x_0 + t z`.
pub fn perturb<R: Rng + ?Sized>(x0: &[f64], t: f64, rng: &mut R) -> Point {
    x0.iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            v + t * z
        })
        .collect()
}

/// Descending solver times from `t_start` to `t_end`, warped like the Karras grid.
pub fn solver_times(t_start: f64, t_end: f64, steps: usize) -> Result<Vec<f64>> {
    if !(t_start > t_end) {
        return Err(Error::domain(format!(
            "integration must run backward: t_start={t_start} <= t_end={t_end}"
        )));
    }
    if !(t_end > 0.0) {
        return Err(Error::domain(format!(
            "t_end must be positive, got {t_end}"
        )));
    }
    let mut times = karras_points(t_end, t_start, DEFAULT_RHO, steps + 1)?;
    times.reverse();
    Ok(times)
}

fn checked<F>(score_fn: &F, x: &[f64], t: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    let s = score_fn(x, t);
    if s.len() != x.len() {
        return Err(Error::domain(format!(
            "score has dimension {}, expected {}",
            s.len(),
            x.len()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            msg: "non-finite score".into(),
            x: x.to_vec(),
            t,
        });
    }
    Ok(s)
}

/// Integrate the PF-ODE and return every `(t, x)` visited, starting with
/// `(t_start, x_t)`.
pub fn solve_pf_ode_path<F>(
    score_fn: F,
    x_t: &[f64],
    t_start: f64,
    cfg: &OdeSolverConfig,
) -> Result<Vec<(f64, Point)>>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    cfg.validate()?;
    let times = solver_times(t_start, cfg.t_end, cfg.steps)?;
    let mut path = Vec::with_capacity(times.len());
    let mut x = x_t.to_vec();
    let mut scratch = vec![0.0; x.len()];
    path.push((times[0], x.clone()));
    for w in times.windows(2) {
        step_in_place(&score_fn, &mut x, &mut scratch, w[0], w[1], cfg.method)?;
        path.push((w[1], x.clone()));
    }
    Ok(path)
}

/// Integrate `dx/dt = -t score(x, t)` from `t_start` down to `cfg.t_end`.
pub fn solve_pf_ode<F>(
    score_fn: F,
    x_t: &[f64],
    t_start: f64,
    cfg: &OdeSolverConfig,
) -> Result<Point>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    cfg.validate()?;
    let times = solver_times(t_start, cfg.t_end, cfg.steps)?;
    let mut x = x_t.to_vec();
    let mut scratch = vec![0.0; x.len()];
    for w in times.windows(2) {
        step_in_place(&score_fn, &mut x, &mut scratch, w[0], w[1], cfg.method)?;
    }
    Ok(x)
}

/// One solver step of the PF-ODE from `t` to `t_next`.
pub fn ode_step<F>(score_fn: &F, x: &[f64], t: f64, t_next: f64, method: OdeMethod) -> Result<Point>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    let mut out = x.to_vec();
    let mut scratch = vec![0.0; x.len()];
    step_in_place(score_fn, &mut out, &mut scratch, t, t_next, method)?;
    Ok(out)
}

/// `dx/dt = -t score`; `scratch` holds the Euler predictor.
fn step_in_place<F>(
    score_fn: &F,
    x: &mut [f64],
    scratch: &mut [f64],
    t: f64,
    t_next: f64,
    method: OdeMethod,
) -> Result<()>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    let h = t_next - t;
    let s = checked(score_fn, x, t)?;
    match method {
        OdeMethod::Euler => {
            for (xi, si) in x.iter_mut().zip(&s) {
                *xi -= h * t * si;
            }
        }
        OdeMethod::Heun => {
            for ((e, xi), si) in scratch.iter_mut().zip(x.iter()).zip(&s) {
                *e = xi - h * t * si;
            }
            let s2 = checked(score_fn, scratch, t_next)?;
            for ((xi, a), b) in x.iter_mut().zip(&s).zip(&s2) {
                *xi -= 0.5 * h * (t * a + t_next * b);
            }
        }
    }
    Ok(())
}

/// Euler–Maruyama on the reverse SDE from `t_start` to `t_end`, using the same
/// time points as [`solve_pf_ode`] with the same step count.
pub fn solve_reverse_sde<F, R>(
    score_fn: F,
    x_t: &[f64],
    t_start: f64,
    t_end: f64,
    steps: usize,
    rng: &mut R,
) -> Result<Point>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
    R: Rng + ?Sized,
{
    if steps == 0 {
        return Err(Error::domain("reverse SDE needs at least one step"));
    }
    let times = solver_times(t_start, t_end, steps)?;
    let mut x = x_t.to_vec();
    for w in times.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let dt = t - t_next;
        let s = checked(&score_fn, &x, t)?;
        let noise = (2.0 * t * dt).sqrt();
        for (xi, si) in x.iter_mut().zip(&s) {
            let z: f64 = rng.sample(StandardNormal);
            *xi += 2.0 * t * si * dt + noise * z;
        }
    }
    Ok(x)
}
