//! Purifiers: maps from a noisy sample and its noise level to a purified sample.

use std::fmt;
use std::sync::Arc;

use crate::diffusion::{solve_pf_ode, solve_reverse_sde, OdeSolverConfig};
use crate::distributions::MixtureDistribution;
use crate::nn::ConsistencyNet;
use crate::rng::Rng64;
use crate::timegrid::KarrasGrid;
use crate::{Error, Point, Result};

/// Anything that can purify a noisy sample.
///
/// Implementations must be deterministic given `(x_noisy, sigma)` and the
/// state of `rng`; deterministic purifiers simply ignore it.
pub trait Purify: Send + Sync {
    fn purify(&self, x_noisy: &[f64], sigma: f64, rng: &mut Rng64) -> Result<Point>;

    fn name(&self) -> String;
}

#[derive(Debug, Clone)]
pub enum PurifierKind {
    /// Exact Tweedie posterior mean at the selected grid time.
    OnestepPosteriorMean,
    PfOde(OdeSolverConfig),
    ReverseSde {
        steps: usize,
    },
    /// Accurate PF-ODE solve to `ε`; the ideal consistency function.
    ConsistencyOracle(OdeSolverConfig),
    ConsistencyNet(Arc<ConsistencyNet>),
}

impl PurifierKind {
    pub fn name(&self) -> &'static str {
        match self {
            PurifierKind::OnestepPosteriorMean => "onestep",
            PurifierKind::PfOde(_) => "pfode",
            PurifierKind::ReverseSde { .. } => "sde",
            PurifierKind::ConsistencyOracle(_) => "cm-oracle",
            PurifierKind::ConsistencyNet(_) => "cm-net",
        }
    }

    /// Heun with 400 steps down to `t_end`.
    pub fn default_oracle(t_end: f64) -> Self {
        PurifierKind::ConsistencyOracle(
            OdeSolverConfig::heun(400, t_end).expect("valid oracle config"),
        )
    }
}

impl fmt::Display for PurifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A purifier backend bound to its distribution and time grid.
#[derive(Debug, Clone)]
pub struct Purifier {
    kind: PurifierKind,
    dist: Arc<MixtureDistribution>,
    grid: KarrasGrid,
}

impl Purifier {
    pub fn new(
        kind: PurifierKind,
        dist: Arc<MixtureDistribution>,
        grid: KarrasGrid,
    ) -> Result<Self> {
        match &kind {
            PurifierKind::PfOde(cfg) | PurifierKind::ConsistencyOracle(cfg) => cfg.validate()?,
            PurifierKind::ReverseSde { steps } if *steps == 0 => {
                return Err(Error::domain("reverse SDE needs at least one step"))
            }
            PurifierKind::ConsistencyNet(net) if net.data_dim() != dist.dim() => {
                return Err(Error::domain(format!(
                    "network data_dim {} does not match distribution dim {}",
                    net.data_dim(),
                    dist.dim()
                )))
            }
            _ => {}
        }
        Ok(Self { kind, dist, grid })
    }

    pub fn kind(&self) -> &PurifierKind {
        &self.kind
    }

    pub fn grid(&self) -> &KarrasGrid {
        &self.grid
    }

    pub fn distribution(&self) -> &MixtureDistribution {
        &self.dist
    }
}

impl Purify for Purifier {
    fn purify(&self, x_noisy: &[f64], sigma: f64, rng: &mut Rng64) -> Result<Point> {
        if !(sigma > 0.0) {
            return Err(Error::domain(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        if x_noisy.len() != self.dist.dim() {
            return Err(Error::domain(format!(
                "input has dimension {}, expected {}",
                x_noisy.len(),
                self.dist.dim()
            )));
        }
        let t = self.grid.select_timestep(sigma);
        let dist = &*self.dist;
        let score = |x: &[f64], t: f64| dist.score_unchecked(x, t);
        match &self.kind {
            PurifierKind::OnestepPosteriorMean => dist.posterior_mean(x_noisy, t),
            PurifierKind::PfOde(cfg) | PurifierKind::ConsistencyOracle(cfg) => {
                if t <= cfg.t_end {
                    Ok(x_noisy.to_vec())
                } else {
                    solve_pf_ode(score, x_noisy, t, cfg)
                }
            }
            PurifierKind::ReverseSde { steps } => {
                if t <= self.grid.eps() {
                    Ok(x_noisy.to_vec())
                } else {
                    solve_reverse_sde(score, x_noisy, t, self.grid.eps(), *steps, rng)
                }
            }
            PurifierKind::ConsistencyNet(net) => net.forward(x_noisy, t),
        }
    }

    fn name(&self) -> String {
        self.kind.name().to_string()
    }
}

/// A variance-preserving noise level `ᾱ` and its EDM equivalent
/// `σ = sqrt((1 - ᾱ) / ᾱ)`.
///
/// A VP sample `x_vp = sqrt(ᾱ) x_0 + sqrt(1 - ᾱ) ε` rescales to the EDM sample
/// `x_vp / sqrt(ᾱ) = x_0 + σ ε`, and the one-step reconstruction
/// `(x_vp - sqrt(1 - ᾱ) ε̂) / sqrt(ᾱ)` with `ε̂ = -σ ∇log p_σ` is exactly the
/// Tweedie posterior mean at time `σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpMapping {
    pub alpha_bar: f64,
    pub sigma: f64,
}

pub fn vp_to_edm(alpha_bar: f64) -> Result<VpMapping> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::domain(format!(
            "alpha_bar must lie in (0, 1), got {alpha_bar}"
        )));
    }
    Ok(VpMapping {
        alpha_bar,
        sigma: ((1.0 - alpha_bar) / alpha_bar).sqrt(),
    })
}

impl VpMapping {
    pub fn from_sigma(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::domain(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self {
            alpha_bar: 1.0 / (1.0 + sigma * sigma),
            sigma,
        })
    }

    /// `(x_vp - sqrt(1 - ᾱ) ε̂) / sqrt(ᾱ)`.
    pub fn onestep_reconstruction(&self, x_vp: &[f64], eps_hat: &[f64]) -> Point {
        let a = self.alpha_bar;
        x_vp.iter()
            .zip(eps_hat)
            .map(|(x, e)| (x - (1.0 - a).sqrt() * e) / a.sqrt())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetConfig;
    use crate::rng::{derive_rng, seeded};
    use crate::timegrid::DEFAULT_EPS;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn two_dirac() -> Arc<MixtureDistribution> {
        Arc::new(MixtureDistribution::two_dirac())
    }

    fn purifier(kind: PurifierKind) -> Purifier {
        Purifier::new(kind, two_dirac(), KarrasGrid::default()).unwrap()
    }

    fn all_kinds() -> Vec<PurifierKind> {
        let grid = KarrasGrid::default();
        let net = ConsistencyNet::new(&NetConfig::default_for(1), &grid, &mut seeded(0)).unwrap();
        vec![
            PurifierKind::OnestepPosteriorMean,
            PurifierKind::PfOde(OdeSolverConfig::default()),
            PurifierKind::ReverseSde { steps: 50 },
            PurifierKind::default_oracle(DEFAULT_EPS),
            PurifierKind::ConsistencyNet(Arc::new(net)),
        ]
    }

    #[test]
    fn onestep_matches_closed_form() {
        let p = purifier(PurifierKind::OnestepPosteriorMean);
        let t = p.grid().select_timestep(0.5);
        let got = p.purify(&[0.4], 0.5, &mut seeded(0)).unwrap()[0];
        let e = (2.0 * 0.4 / (t * t)).exp();
        assert!((got - (e - 1.0) / (e + 1.0)).abs() < 1e-14);
    }

    /// With a much smaller stopping time the oracle lands on the Dirac itself.
    #[test]
    fn oracle_maps_to_the_data_point() {
        let p = purifier(PurifierKind::default_oracle(1e-4));
        let got = p.purify(&[0.4], 0.5, &mut seeded(0)).unwrap()[0];
        assert!((got - 1.0).abs() < 1e-3, "{got}");
    }

    /// Stopping at ε, the exact flow maps quantiles of `p_t` to quantiles of
    /// `p_ε`: the answer is `1 + ε z` where `z` solves
    /// `½ + ½Φ(z) = F_t(0.4)`.
    #[test]
    fn oracle_at_eps_lands_on_the_matching_quantile() {
        use crate::smoothing::inverse_normal_cdf;
        let p = purifier(PurifierKind::default_oracle(DEFAULT_EPS));
        let d = MixtureDistribution::two_dirac();
        let t = p.grid().select_timestep(0.5);
        let f = d.diffused_cdf_1d(0.4, t).unwrap();
        let z = inverse_normal_cdf(2.0 * f - 1.0).unwrap();
        let expected = 1.0 + DEFAULT_EPS * z;
        let got = p.purify(&[0.4], 0.5, &mut seeded(0)).unwrap()[0];
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    }

    #[test]
    fn smallest_cell_keeps_data_points() {
        for kind in all_kinds() {
            let p = purifier(kind.clone());
            let got = p.purify(&[1.0], 1e-4, &mut seeded(1)).unwrap()[0];
            assert!((got - 1.0).abs() < 1e-6, "{kind}: {got}");
        }
    }

    #[test]
    fn deterministic_kinds_ignore_the_generator() {
        for kind in all_kinds() {
            if matches!(kind, PurifierKind::ReverseSde { .. }) {
                continue;
            }
            let p = purifier(kind.clone());
            let a = p.purify(&[0.3], 0.5, &mut seeded(1)).unwrap();
            let b = p.purify(&[0.3], 0.5, &mut seeded(2)).unwrap();
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn on_manifold_versus_ambiguous_region() {
        let oracle = purifier(PurifierKind::default_oracle(DEFAULT_EPS));
        let onestep = purifier(PurifierKind::OnestepPosteriorMean);
        let d = MixtureDistribution::two_dirac();
        let n = 2000;
        for sigma in [0.25, 0.5, 1.0] {
            let mut near = 0;
            let mut ambiguous = 0;
            for i in 0..n {
                let mut rng = derive_rng(17, &[i]);
                let (x, _) = d.sample_one(&mut rng);
                let z: f64 = rng.sample(StandardNormal);
                let noisy = [x[0] + sigma * z];
                let y = oracle.purify(&noisy, sigma, &mut rng).unwrap()[0];
                if (y.abs() - 1.0).abs() <= 0.01 {
                    near += 1;
                }
                if onestep.purify(&noisy, sigma, &mut rng).unwrap()[0].abs() < 0.9 {
                    ambiguous += 1;
                }
            }
            assert!(near as f64 >= 0.999 * n as f64, "sigma {sigma}: {near}");
            if sigma == 1.0 {
                assert!(ambiguous as f64 >= 0.1 * n as f64, "{ambiguous}");
            }
        }
    }

    #[test]
    fn net_dimension_mismatch_is_rejected() {
        let grid = KarrasGrid::default();
        let net = ConsistencyNet::new(&NetConfig::default_for(2), &grid, &mut seeded(0)).unwrap();
        let err = Purifier::new(
            PurifierKind::ConsistencyNet(Arc::new(net)),
            two_dirac(),
            grid,
        );
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn vp_mapping_examples() {
        assert!((vp_to_edm(0.5).unwrap().sigma - 1.0).abs() < 1e-15);
        assert!((vp_to_edm(0.8).unwrap().sigma - 0.5).abs() < 1e-15);
        assert!(vp_to_edm(0.0).is_err());
        assert!(vp_to_edm(1.0).is_err());
        for a in [0.01, 0.3, 0.5, 0.77, 0.999] {
            let m = vp_to_edm(a).unwrap();
            let back = VpMapping::from_sigma(m.sigma).unwrap();
            assert!((back.alpha_bar - a).abs() < 1e-14);
            assert!((m.sigma * m.sigma - (1.0 - a) / a).abs() <= 1e-12);
        }
    }

    #[test]
    fn vp_reconstruction_is_tweedie() {
        let d = MixtureDistribution::four_cluster_2d(2.0, 0.3);
        let mut rng = seeded(4);
        for _ in 0..200 {
            let a: f64 = rng.random_range(0.05..0.95);
            let m = vp_to_edm(a).unwrap();
            let x_edm = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let x_vp: Vec<f64> = x_edm.iter().map(|v| v * a.sqrt()).collect();
            let s = d.score(&x_edm, m.sigma).unwrap();
            let eps_hat: Vec<f64> = s.iter().map(|v| -m.sigma * v).collect();
            let rec = m.onestep_reconstruction(&x_vp, &eps_hat);
            let pm = d.posterior_mean(&x_edm, m.sigma).unwrap();
            for j in 0..2 {
                assert!((rec[j] - pm[j]).abs() < 1e-12);
            }
        }
    }
}
