//! Coverage tables and plots, and the distribution-shift diagnostic.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ShiftConfig;
use crate::agents::TrajectoryRecord;
use crate::conformal::{coverage_from_table, score_table, ConformalRadii};
use crate::error::{Error, Result};
use crate::predictor::TrajectoryPredictor;

pub const SHIFT_SCHEMA_VERSION: u32 = 1;

/// Per-step row of the coverage table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub h: usize,
    pub n: usize,
    pub mean_error: f64,
    pub q50: f64,
    pub q90: f64,
    pub q95: f64,
    pub radius: f64,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub rows: Vec<CoverageRow>,
    pub joint: f64,
}

/// Lower empirical quantile: the ⌈q·n⌉-th smallest value.
fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

pub fn coverage_report<P: TrajectoryPredictor<f64> + ?Sized>(
    radii: &ConformalRadii,
    predictor: &P,
    test: &[TrajectoryRecord<f64>],
    t_obs: usize,
) -> Result<CoverageReport> {
    if test.is_empty() {
        return Err(Error::Empty("coverage test set".into()));
    }
    if radii.horizon() != predictor.horizon() {
        return Err(Error::Shape { expected: vec![predictor.horizon()], found: vec![radii.horizon()] });
    }
    let table = score_table(predictor, test, t_obs, radii.score.unwrap_or_default())?;
    let cov = coverage_from_table(&table, &radii.radii)?;
    let rows = table
        .scores
        .iter()
        .enumerate()
        .map(|(h, s)| {
            let mut sorted = s.clone();
            sorted.sort_by(f64::total_cmp);
            CoverageRow {
                h: h + 1,
                n: s.len(),
                mean_error: s.iter().sum::<f64>() / s.len() as f64,
                q50: empirical_quantile(&sorted, 0.5),
                q90: empirical_quantile(&sorted, 0.9),
                q95: empirical_quantile(&sorted, 0.95),
                radius: radii.radii[h],
                coverage: cov.per_step[h],
            }
        })
        .collect();
    Ok(CoverageReport { rows, joint: cov.joint })
}

/// Bar chart of mean error per step with the 95% error quantile as a tick
/// and C_h as a dashed line. Infinite radii are drawn at the top edge.
pub fn coverage_svg(rows: &[CoverageRow]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const L: f64 = 60.0;
    const R: f64 = 20.0;
    const T: f64 = 30.0;
    const B: f64 = 50.0;
    let top = rows
        .iter()
        .flat_map(|r| [r.mean_error, r.q95, r.radius])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.15;
    let y = |v: f64| if v.is_finite() { T + (H - T - B) * (1.0 - v / top) } else { T };
    let slot = (W - L - R) / rows.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - B, W - R, H - B);
    let _ = writeln!(s, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#, H - B);
    for k in 0..=4 {
        let v = top * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" font-size="10" text-anchor="end">{v:.2}</text>"#, L - 4.0, y(v) + 3.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{}" font-size="12" text-anchor="middle">prediction step h</text>"#, L + (W - L - R) / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{:.2}" font-size="12" transform="rotate(-90 14 {:.2})" text-anchor="middle">error (m)</text>"#, H / 2.0, H / 2.0);
    for (i, r) in rows.iter().enumerate() {
        let x0 = L + slot * i as f64;
        let cx = x0 + slot / 2.0;
        let bw = slot * 0.5;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#6a8fc7"/>"##,
            cx - bw / 2.0,
            y(r.mean_error),
            bw,
            (H - B - y(r.mean_error)).max(0.0)
        );
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#, cx - bw / 4.0, y(r.q95), cx + bw / 4.0, y(r.q95));
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d4a017" stroke-width="2" stroke-dasharray="5,3"/>"##,
            x0 + 2.0,
            y(r.radius),
            x0 + slot - 2.0,
            y(r.radius)
        );
        let label = if r.radius.is_finite() { format!("{:.3}", r.coverage) } else { format!("{:.3} (C=inf)", r.coverage) };
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" font-size="10" text-anchor="middle">{label}</text>"#, T - 8.0);
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#, H - B + 15.0, r.h);
    }
    s.push_str("</svg>\n");
    s
}

/// Two-sample Kolmogorov-Smirnov statistic sup |F_a − F_b|.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Some(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramPanel {
    /// Prediction step h.
    pub step: usize,
    pub samples: usize,
    pub counts: Vec<usize>,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftCategory {
    pub lower: f64,
    /// `None` for the open last category.
    pub upper: Option<f64>,
    pub episodes: usize,
    pub panels: Vec<HistogramPanel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacentDistance {
    pub lower_category: usize,
    pub step: usize,
    /// KS distance; absent when either category is empty.
    pub ks: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub schema_version: u32,
    /// Shared histogram bin edges per step.
    pub bin_edges: Vec<Vec<f64>>,
    pub categories: Vec<ShiftCategory>,
    pub distances: Vec<AdjacentDistance>,
    pub threshold: f64,
    /// Every adjacent pair among the first three categories is below the
    /// threshold at every reported step.
    pub similar_first_three: bool,
}

/// Smallest distance between any two agents over the whole episode
/// (infinite with fewer than two agents).
pub fn min_inter_agent_distance(ep: &TrajectoryRecord<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for snap in &ep.steps {
        let p = &snap.positions;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                best = best.min((p[i] - p[j]).norm());
            }
        }
    }
    best
}

/// Groups episodes by minimum inter-agent distance and compares per-agent
/// prediction-error distributions at the configured steps.
pub fn shift_diagnostic<P: TrajectoryPredictor<f64> + ?Sized>(
    episodes: &[TrajectoryRecord<f64>],
    predictor: &P,
    t_obs: usize,
    config: &ShiftConfig,
) -> Result<ShiftReport> {
    let horizon = predictor.horizon();
    if let Some(&bad) = config.steps.iter().find(|&&h| h == 0 || h > horizon) {
        return Err(Error::InvalidInput(format!("shift step {bad} outside 1..={horizon}")));
    }
    if episodes.len() < 100 {
        log::warn!("shift diagnostic on only {} episodes", episodes.len());
    }
    let ncat = config.edges.len() + 1;
    let category = |d: f64| config.edges.iter().position(|&e| d < e).unwrap_or(ncat - 1);

    // errors[episode][step index] = per-agent errors over all cuts
    let per_episode: Vec<Result<(usize, Vec<Vec<f64>>)>> = episodes
        .par_iter()
        .map(|ep| {
            let cat = category(min_inter_agent_distance(ep));
            let mut errs = vec![Vec::new(); config.steps.len()];
            let last = ep.len().saturating_sub(horizon + 1);
            let mut t = t_obs;
            while t <= last {
                let bundle = predictor.predict(ep.history(t))?;
                for (k, &h) in config.steps.iter().enumerate() {
                    let truth = &ep.steps[t + h];
                    for (p, q) in truth.positions.iter().zip(&bundle.predicted[h - 1].positions) {
                        errs[k].push((*p - *q).norm());
                    }
                }
                t += config.cut_stride.max(1);
            }
            Ok((cat, errs))
        })
        .collect();

    let mut samples = vec![vec![Vec::new(); config.steps.len()]; ncat];
    let mut counts = vec![0usize; ncat];
    for r in per_episode {
        let (cat, errs) = r?;
        counts[cat] += 1;
        for (k, e) in errs.into_iter().enumerate() {
            samples[cat][k].extend(e);
        }
    }

    let bins = config.histogram_bins.max(1);
    let bin_edges: Vec<Vec<f64>> = (0..config.steps.len())
        .map(|k| {
            let top = samples.iter().flat_map(|c| c[k].iter().copied()).fold(0.0f64, f64::max).max(1e-9);
            (0..=bins).map(|b| top * b as f64 / bins as f64).collect()
        })
        .collect();

    let categories = (0..ncat)
        .map(|c| ShiftCategory {
            lower: if c == 0 { 0.0 } else { config.edges[c - 1] },
            upper: config.edges.get(c).copied(),
            episodes: counts[c],
            panels: config
                .steps
                .iter()
                .enumerate()
                .map(|(k, &step)| {
                    let s = &samples[c][k];
                    let top = bin_edges[k][bins];
                    let mut hist = vec![0usize; bins];
                    for &x in s {
                        hist[((x / top * bins as f64) as usize).min(bins - 1)] += 1;
                    }
                    HistogramPanel {
                        step,
                        samples: s.len(),
                        counts: hist,
                        mean: (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64),
                    }
                })
                .collect(),
        })
        .collect();

    let mut distances = Vec::new();
    for c in 0..ncat.saturating_sub(1) {
        for (k, &step) in config.steps.iter().enumerate() {
            distances.push(AdjacentDistance { lower_category: c, step, ks: ks_statistic(&samples[c][k], &samples[c + 1][k]) });
        }
    }
    let similar_first_three = distances
        .iter()
        .filter(|d| d.lower_category < 2)
        .all(|d| d.ks.is_some_and(|v| v < config.threshold));
    Ok(ShiftReport { schema_version: SHIFT_SCHEMA_VERSION, bin_edges, categories, distances, threshold: config.threshold, similar_first_three })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::sim::episodes_for_seeds;
    use crate::conformal::{calibrate, ScoreKind};
    use crate::predictor::ConstantVelocity;
    use crate::world::ScenarioConfig;

    #[test]
    fn ks_oracle() {
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Some(0.0));
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), Some(1.0));
        // F_a jumps to 0.5 at 1, F_b stays 0 until 1.5.
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.5, 2.5]), Some(0.5));
        assert_eq!(ks_statistic(&[], &[1.0]), None);
    }

    #[test]
    fn empirical_quantiles() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(empirical_quantile(&s, 0.5), 10.0);
        assert_eq!(empirical_quantile(&s, 0.95), 19.0);
        assert_eq!(empirical_quantile(&s, 1.0), 20.0);
    }

    fn setup() -> (ScenarioConfig, Vec<TrajectoryRecord<f64>>) {
        let cfg = ScenarioConfig { num_agents: 3, horizon_t: 20, ..Default::default() };
        let eps = episodes_for_seeds(&cfg, &(0..40).collect::<Vec<_>>()).unwrap();
        (cfg, eps)
    }

    #[test]
    fn infinite_radii_cover_everything() {
        let (_, eps) = setup();
        let cv = ConstantVelocity { horizon: 7 };
        let mut radii = calibrate(&cv, &eps[..5], 0.05, 20, 8, ScoreKind::Stacked).unwrap();
        assert!(!radii.all_finite());
        radii.radii = vec![f64::INFINITY; 7];
        let rep = coverage_report(&radii, &cv, &eps[5..], 8).unwrap();
        assert!(rep.rows.iter().all(|r| r.coverage == 1.0));
        assert_eq!(rep.joint, 1.0);
    }

    #[test]
    fn csv_reread_gives_identical_svg() {
        let (_, eps) = setup();
        let cv = ConstantVelocity { horizon: 7 };
        let radii = calibrate(&cv, &eps[..20], 0.5, 1, 8, ScoreKind::Stacked).unwrap();
        let rep = coverage_report(&radii, &cv, &eps[20..], 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        super::super::io::write_csv(&p, &rep.rows).unwrap();
        let back: Vec<CoverageRow> = super::super::io::read_csv(&p).unwrap();
        assert_eq!(back, rep.rows);
        assert_eq!(coverage_svg(&back), coverage_svg(&rep.rows));
        assert!(coverage_svg(&back).starts_with("<svg"));
    }

    #[test]
    fn single_episode_populates_one_category() {
        let (_, eps) = setup();
        let cv = ConstantVelocity { horizon: 7 };
        let rep = shift_diagnostic(&eps[..1], &cv, 8, &ShiftConfig::default()).unwrap();
        assert_eq!(rep.categories.len(), 4);
        assert_eq!(rep.categories.iter().filter(|c| c.episodes > 0).count(), 1);
        for c in &rep.categories {
            assert_eq!(c.panels.len(), 3);
            assert_eq!(c.panels.iter().map(|p| p.step).collect::<Vec<_>>(), vec![1, 4, 7]);
        }
        assert!(!rep.similar_first_three);
    }

    #[test]
    fn category_edges() {
        let (_, eps) = setup();
        let cv = ConstantVelocity { horizon: 7 };
        let rep = shift_diagnostic(&eps, &cv, 8, &ShiftConfig::default()).unwrap();
        assert_eq!(rep.categories.iter().map(|c| c.episodes).sum::<usize>(), eps.len());
        for ep in &eps {
            let d = min_inter_agent_distance(ep);
            let c = rep.categories.iter().find(|c| d >= c.lower && c.upper.is_none_or(|u| d < u)).unwrap();
            assert!(c.episodes > 0);
        }
    }
}
