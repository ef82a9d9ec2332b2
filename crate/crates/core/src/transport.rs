//! Monte Carlo estimates of the purifier transport `E‖x − π(x + σz)‖` and an
//! empirical check of the Markov bound `P(‖x − x̂‖ > r) ≤ T / r`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::perturb;
use crate::distributions::MixtureDistribution;
use crate::purifiers::Purify;
use crate::rng::derive_rng;
use crate::{Error, Result};

pub const DEFAULT_R_GRID: [f64; 5] = [0.1, 0.25, 0.5, 1.0, 2.0];

/// Number of standard errors allowed before a bound check fails.
pub const SLACK_SE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportEstimate {
    pub sigma: f64,
    pub n: usize,
    pub mean_dist: f64,
    pub std_err: f64,
    /// `(r, fraction of draws with distance > r)`, `r` ascending.
    pub exceedance: Vec<(f64, f64)>,
}

/// Recursive pairwise summation; the result depends only on the order of `v`.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn check_r_grid(r_grid: &[f64]) -> Result<()> {
    if r_grid.is_empty() {
        return Err(Error::domain("r grid must be nonempty"));
    }
    if r_grid.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::domain("every r must be positive and finite"));
    }
    if r_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::domain("r grid must be sorted ascending"));
    }
    Ok(())
}

/// Summarize a sample of distances.
pub fn estimate_from_distances(
    sigma: f64,
    distances: &[f64],
    r_grid: &[f64],
) -> Result<TransportEstimate> {
    check_r_grid(r_grid)?;
    let n = distances.len();
    if n < 2 {
        return Err(Error::domain("transport estimate needs at least two draws"));
    }
    if distances.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::domain("distances must be nonnegative"));
    }
    let mean = pairwise_sum(distances) / n as f64;
    let sq: Vec<f64> = distances.iter().map(|d| (d - mean) * (d - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    let exceedance = r_grid
        .iter()
        .map(|&r| {
            (
                r,
                distances.iter().filter(|&&d| d > r).count() as f64 / n as f64,
            )
        })
        .collect();
    Ok(TransportEstimate {
        sigma,
        n,
        mean_dist: mean,
        std_err: (var / n as f64).sqrt(),
        exceedance,
    })
}

/// Euclidean distances `‖x − purify(x + σz)‖` for `n` draws `x ~ dist`.
///
/// Draw `i` uses a generator derived from `(seed, i)`: the clean sample and
/// the noise are drawn first, so purifiers sharing a seed see paired inputs.
pub fn transport_distances(
    dist: &MixtureDistribution,
    purifier: &dyn Purify,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng(seed, &[i as u64]);
            let (x, _) = dist.sample_one(&mut rng);
            let noisy = perturb(&x, sigma, &mut rng);
            let x_hat = purifier
                .purify(&noisy, sigma, &mut rng)
                .map_err(|e| Error::Draw {
                    index: i,
                    source: Box::new(e),
                })?;
            if x_hat.len() != x.len() {
                return Err(Error::Draw {
                    index: i,
                    source: Box::new(Error::domain("purifier changed the dimension")),
                });
            }
            Ok(x.iter()
                .zip(&x_hat)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt())
        })
        .collect()
}

pub fn estimate_transport(
    dist: &MixtureDistribution,
    purifier: &dyn Purify,
    sigma: f64,
    n: usize,
    r_grid: &[f64],
    seed: u64,
) -> Result<TransportEstimate> {
    check_r_grid(r_grid)?;
    if n < 2 {
        return Err(Error::domain("transport estimate needs n >= 2"));
    }
    if !(sigma > 0.0) {
        return Err(Error::domain(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let d = transport_distances(dist, purifier, sigma, n, seed)?;
    estimate_from_distances(sigma, &d, r_grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovRecord {
    pub r: f64,
    pub exceedance: f64,
    /// `T̂ / r`
    pub bound: f64,
    /// `bound − exceedance`
    pub slack: f64,
    /// Binomial SE of the exceedance plus `std_err / r`.
    pub combined_se: f64,
    pub pass: bool,
}

pub fn markov_bound_report(est: &TransportEstimate) -> Result<Vec<MarkovRecord>> {
    est.exceedance
        .iter()
        .map(|&(r, p)| {
            if !(r > 0.0) {
                return Err(Error::domain(format!("r must be positive, got {r}")));
            }
            let bound = est.mean_dist / r;
            let se = (p * (1.0 - p) / est.n as f64).sqrt() + est.std_err / r;
            Ok(MarkovRecord {
                r,
                exceedance: p,
                bound,
                slack: bound - p,
                combined_se: se,
                pass: p <= bound + SLACK_SE * se,
            })
        })
        .collect()
}

/// One estimate per `(purifier, σ)`, all sharing `seed` so rows are paired.
pub fn transport_comparison(
    dist: &MixtureDistribution,
    purifiers: &[&dyn Purify],
    sigmas: &[f64],
    n: usize,
    r_grid: &[f64],
    seed: u64,
) -> Result<Vec<(String, TransportEstimate)>> {
    if purifiers.is_empty() || sigmas.is_empty() {
        return Err(Error::domain(
            "transport comparison needs purifiers and sigmas",
        ));
    }
    let mut rows = Vec::with_capacity(purifiers.len() * sigmas.len());
    for p in purifiers {
        for &s in sigmas {
            rows.push((p.name(), estimate_transport(dist, *p, s, n, r_grid, seed)?));
        }
    }
    Ok(rows)
}
