//! Randomized-smoothing certification through a purifier and a base classifier.
//!
//! Votes are drawn in parallel; vote `i` of stage `s` uses a generator derived
//! from `(seed, s, i)`, so outcomes are identical for any worker count.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use crate::diffusion::perturb;
use crate::nn::Mlp;
use crate::purifiers::Purify;
use crate::rng::derive_rng;
use crate::{Error, Point, Result};

pub const DEFAULT_ALPHA: f64 = 0.001;
pub const DEFAULT_N0: usize = 100;
pub const DEFAULT_N_CERT: usize = 10_000;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `Φ⁻¹(p)`: Acklam's rational approximation followed by one Halley step.
pub fn inverse_normal_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!(
            "inverse_normal_cdf needs p in (0, 1), got {p}"
        )));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let mut z = if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    };
    // Halley refinement against the erfc-based CDF; work in the lower tail
    // to avoid cancellation in 1 - p.
    let (target, sign) = if p > 0.5 { (1.0 - p, -1.0) } else { (p, 1.0) };
    z *= sign;
    let e = normal_cdf(z) - target;
    let u = e / normal_pdf(z);
    z -= u / (1.0 + 0.5 * z * u);
    Ok(sign * z)
}

/// Exact one-sided `(1 - alpha)` lower confidence bound for a binomial
/// proportion given `k` successes out of `n`: the `p` solving
/// `P(Bin(n, p) ≥ k) = alpha`.
pub fn clopper_pearson_lower(k: u64, n: u64, alpha: f64) -> Result<f64> {
    if n == 0 || k > n {
        return Err(Error::domain(format!(
            "need 0 <= k <= n, n >= 1; got k={k}, n={n}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        return Ok(alpha.powf(1.0 / n as f64));
    }
    // P(X >= k | p) = I_p(k, n - k + 1), increasing in p.
    let (a, b) = (k as f64, (n - k + 1) as f64);
    let (mut lo, mut hi) = (0.0f64, k as f64 / n as f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `ln n! - ln Γ-Stirling(n)`, the Stirling-series remainder.
fn stirling_error(n: f64) -> f64 {
    if n <= 15.0 {
        let mut fact = 1.0;
        for i in 2..=(n as u64) {
            fact *= i as f64;
        }
        fact.ln() - ((n + 0.5) * n.ln() - n + 0.5 * (2.0 * PI).ln())
    } else {
        const S0: f64 = 1.0 / 12.0;
        const S1: f64 = 1.0 / 360.0;
        const S2: f64 = 1.0 / 1260.0;
        const S3: f64 = 1.0 / 1680.0;
        const S4: f64 = 1.0 / 1188.0;
        let nn = n * n;
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term `x ln(x / np) + np - x`, evaluated without cancellation.
fn deviance(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        let v2 = v * v;
        for j in 1..1000 {
            ej *= v2;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / np).ln() + np - x
    }
}

/// Binomial pmf via the saddle-point expansion, accurate to a few ulps
/// relative even for large `n`.
pub fn binomial_pmf(k: u64, n: u64, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    let q = 1.0 - p;
    if k == 0 {
        return (n as f64 * q.ln()).exp();
    }
    if k == n {
        return (n as f64 * p.ln()).exp();
    }
    let (x, nf) = (k as f64, n as f64);
    let lc = stirling_error(nf)
        - stirling_error(x)
        - stirling_error(nf - x)
        - deviance(x, nf * p)
        - deviance(nf - x, nf * q);
    let lf = (2.0 * PI).ln() + x.ln() + (-x / nf).ln_1p();
    (lc - 0.5 * lf).exp()
}

/// Two-sided exact binomial test of `k` successes in `n` trials against
/// success probability ½: twice the smaller tail, capped at 1.
pub fn binom_test_two_sided(k: u64, n: u64) -> Result<f64> {
    if k > n {
        return Err(Error::domain(format!("need k <= n, got k={k}, n={n}")));
    }
    if n == 0 {
        return Ok(1.0);
    }
    let m = k.max(n - k);
    // smallest terms first
    let tail: f64 = (m..=n).rev().map(|j| binomial_pmf(j, n, 0.5)).sum();
    Ok((2.0 * tail).min(1.0))
}

/// Base classifier applied to purified samples.
#[derive(Debug, Clone)]
pub enum Classifier {
    /// Label of the nearest center; ties go to the lowest index.
    NearestCentroid {
        centers: Vec<Point>,
        labels: Vec<u32>,
    },
    /// `labels[1]` when `w·x + b > 0`, else `labels[0]`.
    Logistic {
        weights: Vec<f64>,
        bias: f64,
        labels: [u32; 2],
    },
    /// Argmax over the network's outputs; ties go to the lowest index.
    Mlp { net: Mlp, labels: Vec<u32> },
}

impl Classifier {
    pub fn nearest_centroid(centers: Vec<Point>, labels: Vec<u32>) -> Result<Self> {
        if centers.is_empty() || centers.len() != labels.len() {
            return Err(Error::domain(
                "nearest-centroid classifier needs one label per center",
            ));
        }
        Ok(Classifier::NearestCentroid { centers, labels })
    }

    /// Nearest-centroid classifier on the component centers of a mixture.
    pub fn from_mixture(dist: &crate::distributions::MixtureDistribution) -> Self {
        let (centers, labels) = dist
            .components()
            .iter()
            .map(|c| (c.center.clone(), c.label))
            .unzip();
        Classifier::NearestCentroid { centers, labels }
    }

    pub fn mlp(net: Mlp, labels: Vec<u32>) -> Result<Self> {
        if labels.is_empty() || net.output_dim() != labels.len() {
            return Err(Error::domain("MLP classifier needs one label per output"));
        }
        Ok(Classifier::Mlp { net, labels })
    }

    pub fn classify(&self, x: &[f64]) -> Result<u32> {
        match self {
            Classifier::NearestCentroid { centers, labels } => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, c) in centers.iter().enumerate() {
                    if c.len() != x.len() {
                        return Err(Error::domain("classifier input dimension mismatch"));
                    }
                    let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                Ok(labels[best])
            }
            Classifier::Logistic {
                weights,
                bias,
                labels,
            } => {
                if weights.len() != x.len() {
                    return Err(Error::domain("classifier input dimension mismatch"));
                }
                let z = bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                Ok(if z > 0.0 { labels[1] } else { labels[0] })
            }
            Classifier::Mlp { net, labels } => {
                let out = net.forward(x)?;
                let mut best = 0;
                for (i, v) in out.iter().enumerate() {
                    if *v > out[best] {
                        best = i;
                    }
                }
                Ok(labels[best])
            }
        }
    }
}

pub type VoteCounts = BTreeMap<u32, u64>;

/// A label and its vote count.
pub type Vote = (u32, u64);

/// Classify `n` purified noisy copies of `x`, vote `i` seeded by `(seed, stage, i)`.
pub fn sample_votes(
    purifier: &dyn Purify,
    classifier: &Classifier,
    x: &[f64],
    sigma: f64,
    n: usize,
    seed: u64,
    stage: u64,
) -> Result<VoteCounts> {
    let votes: Vec<u32> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = derive_rng(seed, &[stage, i as u64]);
            let noisy = perturb(x, sigma, &mut rng);
            let purified = purifier
                .purify(&noisy, sigma, &mut rng)
                .map_err(|e| Error::Draw {
                    index: i,
                    source: Box::new(e),
                })?;
            classifier.classify(&purified)
        })
        .collect::<Result<_>>()?;
    let mut counts = VoteCounts::new();
    for v in votes {
        *counts.entry(v).or_default() += 1;
    }
    Ok(counts)
}

/// The two most-voted labels with their counts; ties go to the lower label.
pub fn top_two(counts: &VoteCounts) -> Option<(Vote, Option<Vote>)> {
    let mut sorted: Vec<Vote> = counts.iter().map(|(&l, &c)| (l, c)).collect();
    sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut it = sorted.into_iter();
    let first = it.next()?;
    Some((first, it.next()))
}

/// Smoothed prediction: `None` means abstain.
pub fn predict_from_counts(counts: &VoteCounts, alpha: f64) -> Result<Option<u32>> {
    let Some(((label, n_a), second)) = top_two(counts) else {
        return Ok(None);
    };
    let n_b = second.map_or(0, |(_, c)| c);
    if binom_test_two_sided(n_a, n_a + n_b)? <= alpha {
        Ok(Some(label))
    } else {
        Ok(None)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn predict(
    purifier: &dyn Purify,
    classifier: &Classifier,
    x: &[f64],
    sigma: f64,
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<Option<u32>> {
    if n == 0 {
        return Err(Error::domain("predict needs n >= 1"));
    }
    let counts = sample_votes(purifier, classifier, x, sigma, n, seed, 0)?;
    predict_from_counts(&counts, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyOutcome {
    /// `None` means abstain.
    pub prediction: Option<u32>,
    pub radius: f64,
    pub p_a_lower: f64,
    pub counts0: VoteCounts,
    pub counts: VoteCounts,
    pub sigma: f64,
}

/// `σ Φ⁻¹(p_a_lower)` when `p_a_lower > ½`, otherwise an abstention.
pub fn outcome_from_bound(
    candidate: u32,
    p_a_lower: f64,
    sigma: f64,
    counts0: VoteCounts,
    counts: VoteCounts,
) -> Result<CertifyOutcome> {
    let (prediction, radius) = if p_a_lower > 0.5 {
        (Some(candidate), sigma * inverse_normal_cdf(p_a_lower)?)
    } else {
        (None, 0.0)
    };
    Ok(CertifyOutcome {
        prediction,
        radius,
        p_a_lower,
        counts0,
        counts,
        sigma,
    })
}

/// Selects the candidate from `counts0` and bounds its probability with `counts`.
pub fn certify_from_counts(
    counts0: VoteCounts,
    counts: VoteCounts,
    n_cert: u64,
    sigma: f64,
    alpha: f64,
) -> Result<CertifyOutcome> {
    let Some(((candidate, _), _)) = top_two(&counts0) else {
        return Err(Error::domain("selection votes are empty"));
    };
    let k = counts.get(&candidate).copied().unwrap_or(0);
    let p_lower = clopper_pearson_lower(k, n_cert, alpha)?;
    outcome_from_bound(candidate, p_lower, sigma, counts0, counts)
}

#[allow(clippy::too_many_arguments)]
pub fn certify(
    purifier: &dyn Purify,
    classifier: &Classifier,
    x: &[f64],
    sigma: f64,
    n0: usize,
    n_cert: usize,
    alpha: f64,
    seed: u64,
) -> Result<CertifyOutcome> {
    if n0 == 0 || n_cert == 0 {
        return Err(Error::domain("certify needs n0 >= 1 and n_cert >= 1"));
    }
    let counts0 = sample_votes(purifier, classifier, x, sigma, n0, seed, 0)?;
    let counts = sample_votes(purifier, classifier, x, sigma, n_cert, seed, 1)?;
    certify_from_counts(counts0, counts, n_cert as u64, sigma, alpha)
}

/// Fraction of outcomes that are correct with radius ≥ ε, for each ε.
/// Abstentions count as incorrect.
pub fn certified_accuracy_curve(
    outcomes: &[(CertifyOutcome, u32)],
    eps_grid: &[f64],
) -> Result<Vec<f64>> {
    if outcomes.is_empty() {
        return Err(Error::domain(
            "certified accuracy needs at least one outcome",
        ));
    }
    let n = outcomes.len() as f64;
    Ok(eps_grid
        .iter()
        .map(|&eps| {
            outcomes
                .iter()
                .filter(|(o, label)| o.prediction == Some(*label) && o.radius >= eps)
                .count() as f64
                / n
        })
        .collect())
}

/// Pointwise maximum across per-σ curves.
pub fn best_over_sigma(curves: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::domain("need at least one curve"))?;
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::domain("curves have different lengths"));
    }
    Ok((0..first.len())
        .map(|i| {
            curves
                .iter()
                .map(|c| c[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::MixtureDistribution;
    use crate::purifiers::{Purifier, PurifierKind};
    use crate::rng::{derive_rng, Rng64};
    use crate::timegrid::{KarrasGrid, DEFAULT_EPS};
    use rand_distr::{Binomial, Distribution};
    use statrs::function::erf::erf;
    use std::sync::Arc;

    fn phi(z: f64) -> f64 {
        0.5 * (1.0 + erf(z / SQRT_2))
    }

    fn counts(pairs: &[(u32, u64)]) -> VoteCounts {
        pairs.iter().copied().collect()
    }

    struct Identity;

    impl Purify for Identity {
        fn purify(&self, x: &[f64], _: f64, _: &mut Rng64) -> Result<Point> {
            Ok(x.to_vec())
        }
        fn name(&self) -> String {
            "identity".into()
        }
    }

    #[test]
    fn inverse_normal_examples() {
        assert_eq!(inverse_normal_cdf(0.5).unwrap(), 0.0);
        assert!((inverse_normal_cdf(0.975).unwrap() - 1.959_963_985).abs() < 1e-9);
        assert!((inverse_normal_cdf(0.841_344_74).unwrap() - 1.0).abs() < 1e-6);
        assert!((inverse_normal_cdf(phi(1.0)).unwrap() - 1.0).abs() < 1e-12);
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(inverse_normal_cdf(bad).is_err());
        }
    }

    #[test]
    fn inverse_normal_is_antisymmetric() {
        for p in [2f64.powi(-40), 2f64.powi(-17), 1.0 / 128.0, 0.25, 0.375] {
            let a = inverse_normal_cdf(p).unwrap();
            let b = inverse_normal_cdf(1.0 - p).unwrap();
            assert!((a + b).abs() < 1e-9 * (1.0 + a.abs()), "p={p}: {a} {b}");
        }
    }

    #[test]
    fn clopper_pearson_closed_forms() {
        assert_eq!(clopper_pearson_lower(0, 50, 0.01).unwrap(), 0.0);
        let v = clopper_pearson_lower(100, 100, 0.001).unwrap();
        assert!((v - 0.001f64.powf(0.01)).abs() < 1e-15);
        assert!((v - 0.93325).abs() < 1e-5);
        assert!(clopper_pearson_lower(5, 4, 0.01).is_err());
        assert!(clopper_pearson_lower(0, 0, 0.01).is_err());
        assert!(clopper_pearson_lower(1, 4, 1.5).is_err());
    }

    #[test]
    fn clopper_pearson_is_monotone_and_below_mle() {
        let n = 200;
        let mut prev = 0.0;
        for k in 0..=n {
            let v = clopper_pearson_lower(k, n, 0.01).unwrap();
            assert!(v >= prev);
            assert!(v <= k as f64 / n as f64);
            prev = v;
        }
        let mut prev = 1.0;
        for alpha in [1e-6, 1e-4, 1e-3, 0.01, 0.05, 0.2] {
            let v = clopper_pearson_lower(150, n, alpha).unwrap();
            assert!(v >= prev || prev == 1.0);
            prev = v;
        }
    }

    #[test]
    fn clopper_pearson_coverage() {
        let alpha = 0.001;
        let n = 500u64;
        for p in [0.6, 0.9, 0.99] {
            let bin = Binomial::new(n, p).unwrap();
            let mut rng = derive_rng(31, &[(p * 100.0) as u64]);
            let misses = (0..1000)
                .filter(|_| clopper_pearson_lower(bin.sample(&mut rng), n, alpha).unwrap() > p)
                .count();
            let limit = alpha * 1000.0 + 3.0 * (alpha * 1000.0f64).sqrt();
            assert!(misses as f64 <= limit, "p={p}: {misses}");
        }
    }

    #[test]
    fn binom_test_examples() {
        assert_eq!(binom_test_two_sided(50, 100).unwrap(), 1.0);
        assert!((binom_test_two_sided(10, 10).unwrap() - 1.0 / 512.0).abs() < 1e-15);
        assert!((binom_test_two_sided(0, 10).unwrap() - 1.0 / 512.0).abs() < 1e-15);
        // 2 Σ_{j≥60} C(100, j) / 2^100 by direct pmf summation
        let mut pmf = vec![0.0f64; 101];
        pmf[0] = 0.5f64.powi(100);
        for j in 1..=100 {
            pmf[j] = pmf[j - 1] * (101 - j) as f64 / j as f64;
        }
        let direct: f64 = 2.0 * pmf[60..].iter().sum::<f64>();
        assert!((binom_test_two_sided(60, 100).unwrap() - direct).abs() < 1e-14);
        assert!(binom_test_two_sided(11, 10).is_err());
    }

    #[test]
    fn pmf_sums_to_one() {
        for (n, p) in [(10u64, 0.3), (1000, 0.5), (7, 0.99)] {
            let s: f64 = (0..=n).map(|k| binomial_pmf(k, n, p)).sum();
            assert!((s - 1.0).abs() < 1e-13, "n={n} p={p}: {s}");
        }
    }

    #[test]
    fn top_two_breaks_ties_by_label() {
        assert_eq!(
            top_two(&counts(&[(3, 5), (1, 5), (2, 1)])),
            Some(((1, 5), Some((3, 5))))
        );
        assert_eq!(top_two(&counts(&[(4, 2)])), Some(((4, 2), None)));
        assert_eq!(top_two(&VoteCounts::new()), None);
    }

    fn two_dirac_setup(kind: PurifierKind) -> (Purifier, Classifier) {
        let d = MixtureDistribution::two_dirac();
        let classifier = Classifier::from_mixture(&d);
        let p = Purifier::new(kind, Arc::new(d), KarrasGrid::default()).unwrap();
        (p, classifier)
    }

    #[test]
    fn predict_on_a_data_point() {
        let (p, c) = two_dirac_setup(PurifierKind::default_oracle(DEFAULT_EPS));
        let got = predict(&p, &c, &[1.0], 0.25, 100, 0.001, 5).unwrap();
        assert_eq!(got, Some(1));
    }

    #[test]
    fn constant_classifier_always_wins() {
        let c = Classifier::nearest_centroid(vec![vec![0.0]], vec![7]).unwrap();
        for x in [-3.0, 0.0, 2.5] {
            assert_eq!(
                predict(&Identity, &c, &[x], 1.0, 50, 0.001, 1).unwrap(),
                Some(7)
            );
        }
    }

    #[test]
    fn balanced_votes_abstain() {
        let (p, c) = two_dirac_setup(PurifierKind::default_oracle(DEFAULT_EPS));
        let abstains = (0..20)
            .filter(|&s| {
                predict(&p, &c, &[0.0], 0.5, 100, 0.001, s)
                    .unwrap()
                    .is_none()
            })
            .count();
        assert!(abstains >= 18, "{abstains}");
    }

    #[test]
    fn unanimous_radius_composes() {
        let n = 10_000u64;
        let out =
            certify_from_counts(counts(&[(1, 100)]), counts(&[(1, n)]), n, 0.5, 0.001).unwrap();
        let expected =
            0.5 * inverse_normal_cdf(clopper_pearson_lower(n, n, 0.001).unwrap()).unwrap();
        assert_eq!(out.prediction, Some(1));
        assert_eq!(out.radius, expected);
    }

    #[test]
    fn injected_bound_gives_unit_z_radius() {
        let out =
            outcome_from_bound(2, phi(1.0), 0.5, VoteCounts::new(), VoteCounts::new()).unwrap();
        assert!((out.radius - 0.5).abs() < 1e-6);
        assert_eq!(out.prediction, Some(2));
    }

    #[test]
    fn split_votes_abstain() {
        let out = certify_from_counts(
            counts(&[(0, 50), (1, 50)]),
            counts(&[(0, 5000), (1, 5000)]),
            10_000,
            0.5,
            0.001,
        )
        .unwrap();
        assert_eq!(out.prediction, None);
        assert_eq!(out.radius, 0.0);
        assert!(out.p_a_lower <= 0.5);
    }

    #[test]
    fn radius_is_linear_in_sigma_and_monotone_in_bound() {
        let mut prev = 0.0;
        for p in [0.55, 0.7, 0.9, 0.99, 0.9999] {
            let a = outcome_from_bound(0, p, 1.0, VoteCounts::new(), VoteCounts::new()).unwrap();
            let b = outcome_from_bound(0, p, 0.25, VoteCounts::new(), VoteCounts::new()).unwrap();
            assert!(a.radius > prev);
            assert!((b.radius - 0.25 * a.radius).abs() < 1e-15);
            prev = a.radius;
        }
    }

    #[test]
    fn certify_counts_match_sample_sizes() {
        let (p, c) = two_dirac_setup(PurifierKind::OnestepPosteriorMean);
        let out = certify(&p, &c, &[1.0], 0.5, 30, 400, 0.001, 9).unwrap();
        assert_eq!(out.counts0.values().sum::<u64>(), 30);
        assert_eq!(out.counts.values().sum::<u64>(), 400);
        assert_eq!(out.prediction.is_some(), out.p_a_lower > 0.5);
    }

    fn outcome(pred: Option<u32>, radius: f64) -> CertifyOutcome {
        CertifyOutcome {
            prediction: pred,
            radius,
            p_a_lower: 0.9,
            counts0: VoteCounts::new(),
            counts: VoteCounts::new(),
            sigma: 0.5,
        }
    }

    #[test]
    fn curve_examples() {
        let all = vec![(outcome(Some(1), 1.0), 1); 3];
        assert_eq!(
            certified_accuracy_curve(&all, &[0.0, 0.5, 1.0]).unwrap(),
            vec![1.0; 3]
        );
        let none = vec![(outcome(None, 0.0), 1); 3];
        assert_eq!(
            certified_accuracy_curve(&none, &[0.0, 0.5, 1.0]).unwrap(),
            vec![0.0; 3]
        );
        // correct r=0.8; correct r=0.3; wrong label r=2; abstain
        let mixed = vec![
            (outcome(Some(1), 0.8), 1),
            (outcome(Some(0), 0.3), 0),
            (outcome(Some(2), 2.0), 1),
            (outcome(None, 0.0), 0),
        ];
        assert_eq!(
            certified_accuracy_curve(&mixed, &[0.0, 0.3, 0.5, 0.8, 1.0]).unwrap(),
            vec![0.5, 0.5, 0.25, 0.25, 0.0]
        );
        assert!(certified_accuracy_curve(&[], &[0.0]).is_err());
    }

    #[test]
    fn best_over_sigma_is_pointwise_max() {
        let best = best_over_sigma(&[vec![0.9, 0.5, 0.0], vec![0.8, 0.6, 0.1]]).unwrap();
        assert_eq!(best, vec![0.9, 0.6, 0.1]);
    }

    #[test]
    fn certify_is_independent_of_worker_count() {
        let (p, c) = two_dirac_setup(PurifierKind::ReverseSde { steps: 20 });
        let run = |workers| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap()
                .install(|| certify(&p, &c, &[0.2], 1.0, 50, 500, 0.001, 77).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn classifier_variants() {
        let lr = Classifier::Logistic {
            weights: vec![1.0, -1.0],
            bias: 0.0,
            labels: [3, 4],
        };
        assert_eq!(lr.classify(&[2.0, 1.0]).unwrap(), 4);
        assert_eq!(lr.classify(&[1.0, 1.0]).unwrap(), 3);
        let mlp = Mlp::from_params(
            &[1, 2],
            crate::nn::Activation::Tanh,
            vec![1.0, -1.0, 0.0, 0.0],
        )
        .unwrap();
        let c = Classifier::mlp(mlp, vec![10, 20]).unwrap();
        assert_eq!(c.classify(&[0.5]).unwrap(), 10);
        assert_eq!(c.classify(&[-0.5]).unwrap(), 20);
        assert_eq!(c.classify(&[0.0]).unwrap(), 10);
        let nc = Classifier::nearest_centroid(vec![vec![-1.0], vec![1.0]], vec![0, 1]).unwrap();
        assert_eq!(nc.classify(&[0.0]).unwrap(), 0);
        assert!(nc.classify(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn votes_follow_the_noise() {
        let c = Classifier::nearest_centroid(vec![vec![-1.0], vec![1.0]], vec![0, 1]).unwrap();
        let votes = sample_votes(&Identity, &c, &[0.0], 1.0, 2000, 3, 0).unwrap();
        let ones = votes[&1] as f64;
        assert!((ones / 2000.0 - 0.5).abs() < 0.05);
    }
}
