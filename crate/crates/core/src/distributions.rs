//! Analytic data distributions.
//!
//! A [`MixtureDistribution`] is a weighted set of isotropic Gaussians; a
//! component with `scale == 0` is a Dirac mass. Under the perturbation kernel
//! `x_t = x_0 + t z` every component becomes a Gaussian with variance
//! `scale² + t²`, so densities, scores and posterior means are available in
//! closed form for all `t > 0`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::smoothing::normal_cdf;
use crate::{Error, Point, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub center: Vec<f64>,
    /// Standard deviation; zero means a Dirac mass.
    pub scale: f64,
    pub weight: f64,
    pub label: u32,
}

impl MixtureComponent {
    pub fn dirac(center: Vec<f64>, weight: f64, label: u32) -> Self {
        Self {
            center,
            scale: 0.0,
            weight,
            label,
        }
    }

    pub fn gaussian(center: Vec<f64>, scale: f64, weight: f64, label: u32) -> Self {
        Self {
            center,
            scale,
            weight,
            label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureDistribution {
    components: Vec<MixtureComponent>,
    dim: usize,
    #[serde(skip)]
    log_weights: Vec<f64>,
    /// All components share one scale, so the normalizers cancel in ratios.
    #[serde(skip)]
    uniform_scale: bool,
}

impl MixtureDistribution {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::domain("mixture needs at least one component"))?;
        let dim = first.center.len();
        if dim == 0 {
            return Err(Error::domain("component centers must be nonempty"));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.center.len() != dim {
                return Err(Error::domain(format!(
                    "component {i} has dimension {}, expected {dim}",
                    c.center.len()
                )));
            }
            if !(c.scale >= 0.0) || !c.scale.is_finite() {
                return Err(Error::domain(format!(
                    "component {i} has invalid scale {}",
                    c.scale
                )));
            }
            if !(c.weight > 0.0) || c.weight > 1.0 {
                return Err(Error::domain(format!(
                    "component {i} has invalid weight {}",
                    c.weight
                )));
            }
            if c.center.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!(
                    "component {i} has a non-finite center"
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!(
                "component weights sum to {total}, not 1"
            )));
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        let uniform_scale = components.iter().all(|c| c.scale == components[0].scale);
        Ok(Self {
            components,
            dim,
            log_weights,
            uniform_scale,
        })
    }

    /// Diracs at -1 (label 0) and +1 (label 1) with equal weight.
    pub fn two_dirac() -> Self {
        Self::new(vec![
            MixtureComponent::dirac(vec![-1.0], 0.5, 0),
            MixtureComponent::dirac(vec![1.0], 0.5, 1),
        ])
        .expect("valid two-Dirac mixture")
    }

    /// Four equally weighted components at (±c, ±c), labelled 0..4 by quadrant.
    pub fn four_cluster_2d(c: f64, scale: f64) -> Self {
        let centers = [[-c, -c], [-c, c], [c, -c], [c, c]];
        Self::new(
            centers
                .iter()
                .enumerate()
                .map(|(i, p)| MixtureComponent::gaussian(p.to_vec(), scale, 0.25, i as u32))
                .collect(),
        )
        .expect("valid four-cluster mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn is_dirac(&self) -> bool {
        self.components.iter().all(|c| c.scale == 0.0)
    }

    /// Distinct labels in ascending order.
    pub fn labels(&self) -> Vec<u32> {
        let mut labels: Vec<u32> = self.components.iter().map(|c| c.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> (Point, u32) {
        let k = if self.components.len() == 1 {
            0
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let c = &self.components[k];
        let point = c
            .center
            .iter()
            .map(|&m| {
                if c.scale == 0.0 {
                    m
                } else {
                    let z: f64 = rng.sample(StandardNormal);
                    m + c.scale * z
                }
            })
            .collect();
        (point, c.label)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(Point, u32)> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    fn check(&self, x: &[f64], t: f64) -> Result<()> {
        if !(t > 0.0) {
            return Err(Error::domain(format!(
                "diffusion time must be positive, got {t}"
            )));
        }
        if x.len() != self.dim {
            return Err(Error::domain(format!(
                "point has dimension {}, expected {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Per-component log joint terms `ln w_k + ln N(x; μ_k, (s_k² + t²) I)`.
    fn log_terms(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim as f64;
        self.components
            .iter()
            .map(|c| {
                let var = c.scale * c.scale + t * t;
                let sq: f64 = x
                    .iter()
                    .zip(&c.center)
                    .map(|(a, m)| (a - m) * (a - m))
                    .sum();
                c.weight.ln() - 0.5 * d * (LN_2PI + var.ln()) - 0.5 * sq / var
            })
            .collect()
    }

    /// Writes posterior component responsibilities at `(x, t)` into `out`.
    fn fill_responsibilities(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim as f64;
        let mut max = f64::NEG_INFINITY;
        for ((o, c), lw) in out.iter_mut().zip(&self.components).zip(&self.log_weights) {
            let var = c.scale * c.scale + t * t;
            let sq: f64 = x
                .iter()
                .zip(&c.center)
                .map(|(a, m)| (a - m) * (a - m))
                .sum();
            let mut v = lw - 0.5 * sq / var;
            if !self.uniform_scale {
                v -= 0.5 * d * var.ln();
            }
            *o = v;
            max = max.max(v);
        }
        let mut total = 0.0;
        for v in out.iter_mut() {
            let d = *v - max;
            // below this exp underflows to zero anyway
            *v = if d < -746.0 { 0.0 } else { d.exp() };
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }

    fn with_responsibilities<T>(&self, x: &[f64], t: f64, f: impl FnOnce(&[f64]) -> T) -> T {
        let k = self.components.len();
        let mut stack = [0.0f64; 16];
        let mut heap = Vec::new();
        let buf: &mut [f64] = if k <= stack.len() {
            &mut stack[..k]
        } else {
            heap.resize(k, 0.0);
            &mut heap
        };
        self.fill_responsibilities(x, t, buf);
        f(buf)
    }

    /// `log p_t(x)` for the mixture convolved with `N(0, t² I)`.
    pub fn diffused_log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check(x, t)?;
        Ok(log_sum_exp(&self.log_terms(x, t)))
    }

    /// `∇_x log p_t(x)`.
    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check(x, t)?;
        Ok(self.score_unchecked(x, t))
    }

    /// [`score`](Self::score) without argument checks; `x` must have the
    /// distribution's dimension and `t` must be positive.
    pub fn score_unchecked(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.with_responsibilities(x, t, |gamma| {
            for (g, c) in gamma.iter().zip(&self.components) {
                if *g == 0.0 {
                    continue;
                }
                let w = g / (c.scale * c.scale + t * t);
                for ((o, &xi), &m) in out.iter_mut().zip(x).zip(&c.center) {
                    *o += w * (m - xi);
                }
            }
        });
        out
    }

    /// `E[x_0 | x_t = x]`, computed as the responsibility-weighted mix of
    /// per-component Gaussian posterior means.
    pub fn posterior_mean(&self, x: &[f64], t: f64) -> Result<Point> {
        self.check(x, t)?;
        let mut out = vec![0.0; self.dim];
        self.with_responsibilities(x, t, |gamma| {
            for (g, c) in gamma.iter().zip(&self.components) {
                if *g == 0.0 {
                    continue;
                }
                let shrink = c.scale * c.scale / (c.scale * c.scale + t * t);
                for ((o, &xi), &m) in out.iter_mut().zip(x).zip(&c.center) {
                    *o += g * (m + shrink * (xi - m));
                }
            }
        });
        Ok(out)
    }

    /// Center closest to `x` in Euclidean distance; ties go to the lowest index.
    pub fn nearest_data_point(&self, x: &[f64]) -> Result<(Point, u32)> {
        if !self.is_dirac() {
            return Err(Error::Unsupported(
                "nearest_data_point requires an all-Dirac mixture".into(),
            ));
        }
        if x.len() != self.dim {
            return Err(Error::domain(format!(
                "point has dimension {}, expected {}",
                x.len(),
                self.dim
            )));
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.components.iter().enumerate() {
            let d: f64 = x
                .iter()
                .zip(&c.center)
                .map(|(a, m)| (a - m) * (a - m))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let c = &self.components[best];
        Ok((c.center.clone(), c.label))
    }

    /// CDF of the one-dimensional diffused marginal `p_t`.
    pub fn diffused_cdf_1d(&self, x: f64, t: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::domain("diffused_cdf_1d requires a 1D distribution"));
        }
        if !(t > 0.0) {
            return Err(Error::domain(format!(
                "diffusion time must be positive, got {t}"
            )));
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                let sd = (c.scale * c.scale + t * t).sqrt();
                c.weight * normal_cdf((x - c.center[0]) / sd)
            })
            .sum())
    }
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
