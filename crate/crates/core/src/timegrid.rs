//! The Karras time grid and noise-level to timestep selection.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_EPS: f64 = 0.002;
pub const DEFAULT_T_MAX: f64 = 80.0;
pub const DEFAULT_RHO: f64 = 7.0;
pub const DEFAULT_N: usize = 18;

/// `n` points `t_1 = eps < ... < t_n = t_max` warped by `rho`:
/// `t_i = (eps^{1/ρ} + (i-1)/(n-1) (t_max^{1/ρ} - eps^{1/ρ}))^ρ`.
pub fn karras_points(eps: f64, t_max: f64, rho: f64, n: usize) -> Result<Vec<f64>> {
    if !(eps > 0.0 && eps < t_max && t_max.is_finite()) {
        return Err(Error::domain(format!(
            "need 0 < eps < t_max, got eps={eps}, t_max={t_max}"
        )));
    }
    if n < 2 {
        return Err(Error::domain(format!(
            "grid needs at least 2 points, got {n}"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::domain(format!("rho must be positive, got {rho}")));
    }
    let lo = eps.powf(1.0 / rho);
    let hi = t_max.powf(1.0 / rho);
    let mut points: Vec<f64> = (0..n)
        .map(|i| (lo + i as f64 / (n - 1) as f64 * (hi - lo)).powf(rho))
        .collect();
    // The endpoints are pinned exactly; powf round-trips are off by an ulp.
    points[0] = eps;
    points[n - 1] = t_max;
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KarrasGrid {
    eps: f64,
    t_max: f64,
    rho: f64,
    points: Vec<f64>,
    /// `(t_i + t_{i+1}) / 2` for consecutive points.
    midpoints: Vec<f64>,
}

impl KarrasGrid {
    pub fn new(eps: f64, t_max: f64, rho: f64, n: usize) -> Result<Self> {
        let points = karras_points(eps, t_max, rho, n)?;
        let midpoints = points.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Ok(Self {
            eps,
            t_max,
            rho,
            points,
            midpoints,
        })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Index of the grid time assigned to noise level `sigma`: the cell
    /// `((t_{i-1}+t_i)/2, (t_i+t_{i+1})/2]` containing it. Values below the
    /// first midpoint map to `t_1`, values above the last to `t_n`.
    pub fn select_index(&self, sigma: f64) -> usize {
        self.midpoints.partition_point(|&m| m < sigma)
    }

    pub fn select_timestep(&self, sigma: f64) -> f64 {
        self.points[self.select_index(sigma)]
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.eps && t <= self.t_max
    }
}

impl Default for KarrasGrid {
    fn default() -> Self {
        Self::new(DEFAULT_EPS, DEFAULT_T_MAX, DEFAULT_RHO, DEFAULT_N).expect("default grid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_are_exact() {
        let g = KarrasGrid::default();
        assert_eq!(g.points()[0], 0.002);
        assert_eq!(g.points()[17], 80.0);
        assert!(g.points().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(KarrasGrid::new(0.0, 80.0, 7.0, 18).is_err());
        assert!(KarrasGrid::new(1.0, 0.5, 7.0, 18).is_err());
        assert!(KarrasGrid::new(0.002, 80.0, 7.0, 1).is_err());
        assert!(KarrasGrid::new(0.002, 80.0, 0.0, 18).is_err());
    }

    #[test]
    fn boundary_sigma_goes_to_lower_cell() {
        let g = KarrasGrid::default();
        let p = g.points();
        assert_eq!(g.select_timestep(p[4]), p[4]);
        assert_eq!(g.select_timestep(0.5 * (p[3] + p[4])), p[3]);
        assert_eq!(g.select_timestep(1e-9), p[0]);
        assert_eq!(g.select_timestep(1e9), p[17]);
    }

    #[test]
    fn smoothing_levels_land_on_expected_points() {
        let g = KarrasGrid::default();
        let p = g.points();
        assert_eq!(g.select_timestep(0.25), p[5]);
        assert_eq!(g.select_timestep(0.5), p[6]);
        assert_eq!(g.select_timestep(1.0), p[7]);
    }

    proptest! {
        #[test]
        fn selection_is_monotone_and_on_grid(a in 1e-4f64..100.0, b in 1e-4f64..100.0) {
            let g = KarrasGrid::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let tl = g.select_timestep(lo);
            let th = g.select_timestep(hi);
            prop_assert!(tl <= th);
            prop_assert!(g.points().contains(&tl));
        }

        #[test]
        fn selection_is_nearest_point(s in 1e-4f64..100.0) {
            let g = KarrasGrid::default();
            let t = g.select_timestep(s);
            let best = g.points().iter().map(|p| (p - s).abs()).fold(f64::INFINITY, f64::min);
            prop_assert!((t - s).abs() <= best);
        }

        #[test]
        fn grid_points_map_to_themselves(
            eps in 1e-4f64..0.1, span in 1.0f64..100.0, rho in 1.0f64..10.0, n in 2usize..40
        ) {
            let g = KarrasGrid::new(eps, eps + span, rho, n).unwrap();
            for &p in g.points() {
                prop_assert_eq!(g.select_timestep(p), p);
            }
        }
    }
}
