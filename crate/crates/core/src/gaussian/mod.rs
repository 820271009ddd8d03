//! Gaussian-interval radii: per-step mean + z·std of calibration scores.

use serde::{Deserialize, Serialize};

use crate::agents::TrajectoryRecord;
use crate::conformal::{score_table, ConformalRadii, NonconformityTable, RadiusMethod, ScoreKind, RADII_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::predictor::TrajectoryPredictor;
use crate::scalar::Scalar;

/// Standard normal quantile by Acklam's rational approximation
/// (relative error below 1.15e-9 over the open unit interval).
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    const P_LOW: f64 = 0.02425;

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianRadii {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub z: f64,
    pub delta_bar: f64,
    pub n: usize,
    pub radii: Vec<f64>,
}

impl GaussianRadii {
    /// Shared radii container tagged with the Gaussian method.
    pub fn to_container(&self, delta: f64) -> ConformalRadii {
        ConformalRadii {
            schema_version: RADII_SCHEMA_VERSION,
            method: RadiusMethod::Gaussian,
            delta,
            delta_bar: self.delta_bar,
            n: self.n,
            p: None,
            radii: self.radii.clone(),
            score: Some(ScoreKind::Stacked),
            mean: Some(self.mean.clone()),
            std: Some(self.std.clone()),
            z: Some(self.z),
        }
    }
}

pub fn fit_gaussian_table(table: &NonconformityTable, delta_bar: f64) -> Result<GaussianRadii> {
    if table.n < 2 {
        return Err(Error::InvalidInput(format!("Gaussian fit needs at least 2 calibration episodes, got {}", table.n)));
    }
    if !(delta_bar > 0.0 && delta_bar < 1.0) {
        return Err(Error::InvalidInput(format!("δ̄ must lie in (0, 1), got {delta_bar}")));
    }
    let z = normal_quantile(1.0 - delta_bar);
    let n = table.n as f64;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for s in &table.scores {
        // shifted by the first score, so constant lists give exactly std 0
        let k = s[0];
        let d_mean = s.iter().map(|x| x - k).sum::<f64>() / n;
        let m = k + d_mean;
        let var = s.iter().map(|x| (x - k - d_mean) * (x - k - d_mean)).sum::<f64>() / (n - 1.0);
        mean.push(m);
        std.push(var.sqrt());
    }
    let radii = mean.iter().zip(&std).map(|(m, s)| m + z * s).collect();
    Ok(GaussianRadii { mean, std, z, delta_bar, n: table.n, radii })
}

pub fn fit_gaussian<T: Scalar, P: TrajectoryPredictor<T> + ?Sized>(
    predictor: &P,
    cal: &[TrajectoryRecord<T>],
    t_obs: usize,
    delta_bar: f64,
) -> Result<GaussianRadii> {
    let table = score_table(predictor, cal, t_obs, ScoreKind::Stacked)?;
    fit_gaussian_table(&table, delta_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{calibrate_table, coverage_from_table};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use statrs::distribution::{ContinuousCDF, Normal};

    fn table(scores: Vec<f64>) -> NonconformityTable {
        NonconformityTable { n: scores.len(), scores: vec![scores] }
    }

    #[test]
    fn quantile_matches_oracle() {
        assert!((normal_quantile(0.99) - 2.326_347_874_040_840_8).abs() < 1e-6);
        let oracle = Normal::new(0.0, 1.0).unwrap();
        for k in 1..2000 {
            let p = k as f64 / 2000.0;
            assert!((normal_quantile(p) - oracle.inverse_cdf(p)).abs() < 1e-6, "p = {p}");
        }
        for p in [1e-6, 1e-4, 0.999_875, 1.0 - 1e-6] {
            assert!((normal_quantile(p) - oracle.inverse_cdf(p)).abs() < 1e-6, "p = {p}");
        }
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn degenerate_and_median_cases() {
        let g = fit_gaussian_table(&table(vec![0.8; 10]), 0.01).unwrap();
        assert_eq!(g.std, vec![0.0]);
        assert_eq!(g.radii, vec![0.8]);
        let g = fit_gaussian_table(&table(vec![1.0, 2.0, 3.0]), 0.5).unwrap();
        assert_eq!(g.radii, vec![2.0]);
        let g = fit_gaussian_table(&table(vec![1.0, 2.0, 3.0]), 0.01).unwrap();
        assert_eq!(g.std, vec![1.0]);
        assert!((g.radii[0] - (2.0 + 2.326_347_874_040_840_8)).abs() < 1e-6);
        assert!(fit_gaussian_table(&table(vec![1.0]), 0.1).is_err());
    }

    #[test]
    fn container_is_tagged() {
        let g = fit_gaussian_table(&table(vec![1.0, 2.0, 3.0]), 0.05).unwrap();
        let c = g.to_container(0.2);
        assert_eq!(c.method, RadiusMethod::Gaussian);
        assert!(serde_json::to_string(&c).unwrap().contains(r#""method":"gaussian""#));
    }

    #[test]
    fn heavy_tails_undercover_where_conformal_does_not() {
        // 95% N(1, 0.1²) plus a 5% mode near 10 m
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let normal = rand_distr::Normal::new(1.0, 0.1).unwrap();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.random::<f64>() < 0.05 { 10.0 + rng.random::<f64>() } else { rng.sample(normal) })
                .collect()
        };
        let delta_bar = 0.01;
        let cal = table(draw(2000));
        let test = table(draw(2000));
        let g = fit_gaussian_table(&cal, delta_bar).unwrap();
        let c = calibrate_table(&cal, delta_bar, delta_bar);
        let g_cov = coverage_from_table(&test, &g.radii).unwrap().per_step[0];
        let c_cov = coverage_from_table(&test, &c.radii).unwrap().per_step[0];
        assert!(g_cov < 1.0 - delta_bar - 0.02, "gaussian coverage {g_cov}");
        assert!(c_cov >= 1.0 - delta_bar - 0.005, "conformal coverage {c_cov}");
    }

    proptest! {
        #[test]
        fn radii_monotone_in_level(scores in proptest::collection::vec(0.0..5.0f64, 2..50), a in 1usize..999, b in 1usize..999) {
            let t = table(scores);
            let (lo, hi) = (a.min(b) as f64 / 1000.0, a.max(b) as f64 / 1000.0);
            let r_lo = fit_gaussian_table(&t, lo).unwrap().radii[0];
            let r_hi = fit_gaussian_table(&t, hi).unwrap().radii[0];
            prop_assert!(r_lo >= r_hi - 1e-12);
        }
    }
}
