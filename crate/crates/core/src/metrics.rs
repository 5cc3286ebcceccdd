//! Speedup arithmetic, toy quality metrics and the steps × retention sweep.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cost of the CFG baseline (`base_steps · cfg_factor` forwards) over the
/// cost of a `K`-step student running a fraction `ρ` of the parameters.
pub fn theoretical_speedup(base_steps: f64, cfg_factor: f64, steps: f64, retention: f64) -> Result<f64> {
    let denom = steps * retention;
    if !(base_steps > 0.0 && cfg_factor > 0.0 && steps > 0.0 && retention > 0.0) || denom == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "speedup needs positive inputs, got base {base_steps}, cfg {cfg_factor}, K {steps}, ρ {retention}"
        )));
    }
    Ok(base_steps * cfg_factor / denom)
}

/// Speedup over the default 50-step CFG baseline.
pub fn default_speedup(steps: usize, retention: f64) -> Result<f64> {
    theoretical_speedup(50.0, 2.0, steps as f64, retention)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pair_dist(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += dist(x.data(), y.data());
        }
    }
    total / (a.len() * b.len()) as f64
}

/// `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` with every expectation an exact mean over
/// all ordered pairs (self-pairs included), clamped at zero against
/// rounding.
pub fn energy_distance(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("energy distance of an empty sample set".into()));
    }
    let n = a[0].numel();
    if a.iter().chain(b).any(|t| t.numel() != n) {
        return Err(Error::InvalidArgument("energy distance needs equal sample sizes".into()));
    }
    let ab = mean_pair_dist(a, b);
    let aa = mean_pair_dist(a, a);
    let bb = mean_pair_dist(b, b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

fn frames(video: &Tensor, min: usize, what: &str) -> Result<Vec<Tensor>> {
    let f = video.unstack();
    if video.rank() != 2 || f.len() < min {
        return Err(Error::InvalidArgument(format!(
            "{what} needs videos of shape [frames ≥ {min}, tokens], got {:?}",
            video.shape()
        )));
    }
    Ok(f)
}

fn mean_over<F: Fn(&Tensor) -> Result<f64>>(videos: &[Tensor], f: F) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::InvalidArgument("no videos to measure".into()));
    }
    let mut s = 0.0;
    for v in videos {
        s += f(v)?;
    }
    Ok(s / videos.len() as f64)
}

/// Mean frame-to-frame L2 change.
pub fn dynamic_degree(videos: &[Tensor]) -> Result<f64> {
    mean_over(videos, |v| {
        let f = frames(v, 2, "dynamic_degree")?;
        let total: f64 = f.windows(2).map(|w| dist(w[1].data(), w[0].data())).sum();
        Ok(total / (f.len() - 1) as f64)
    })
}

/// `exp(−mean‖f_{j+1} − 2f_j + f_{j−1}‖)`.
pub fn motion_smoothness(videos: &[Tensor]) -> Result<f64> {
    mean_over(videos, |v| {
        let f = frames(v, 3, "motion_smoothness")?;
        let total: f64 = f
            .windows(3)
            .map(|w| {
                w[2].data()
                    .iter()
                    .zip(w[1].data())
                    .zip(w[0].data())
                    .map(|((a, b), c)| (a - 2.0 * b + c).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        Ok((-total / (f.len() - 2) as f64).exp())
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let sa: f64 = a.iter().map(|x| x * x).sum();
    let sb: f64 = b.iter().map(|x| x * x).sum();
    if sa == 0.0 || sb == 0.0 {
        return if sa == sb { 1.0 } else { 0.0 };
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // sqrt(sa·sb) rather than √sa·√sb so identical frames give exactly 1
    (dot / (sa * sb).sqrt()).clamp(-1.0, 1.0)
}

/// Mean cosine similarity of frame 0 with each later frame.
pub fn subject_consistency(videos: &[Tensor]) -> Result<f64> {
    mean_over(videos, |v| {
        let f = frames(v, 2, "subject_consistency")?;
        let total: f64 = f[1..].iter().map(|x| cosine(f[0].data(), x.data())).sum();
        Ok(total / (f.len() - 1) as f64)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub dynamic_degree: f64,
    pub motion_smoothness: f64,
    pub subject_consistency: f64,
    pub n_samples: usize,
    /// Short hash identifying the configuration that produced the samples.
    pub fingerprint: String,
}

impl MetricReport {
    /// Metrics of `samples` (each `[frames, tokens]`) against `reference`.
    pub fn evaluate(samples: &[Tensor], reference: &[Tensor], fingerprint: impl Into<String>) -> Result<Self> {
        Ok(Self {
            energy_distance: energy_distance(samples, reference)?,
            dynamic_degree: dynamic_degree(samples)?,
            motion_smoothness: motion_smoothness(samples)?,
            subject_consistency: subject_consistency(samples)?,
            n_samples: samples.len(),
            fingerprint: fingerprint.into(),
        })
    }
}

/// First 16 hex digits of SHA-256 over any serializable value's JSON.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub steps: usize,
    /// Nominal retention of the grid.
    pub retention: f64,
    /// Retention of the keep-set actually chosen for this cell.
    pub achieved_retention: f64,
    pub n_short: usize,
    pub speedup: f64,
    /// `Err` carries the failure message of a cell that did not finish.
    pub metrics: std::result::Result<MetricReport, String>,
}

/// CSV `steps,retention,energy_distance,dynamic_degree,motion_smoothness,subject_consistency,speedup`,
/// rows ordered by `(K, ρ)`. Failed cells carry `NaN` metrics.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut sorted: Vec<&SweepCell> = cells.iter().collect();
    sorted.sort_by(|a, b| a.steps.cmp(&b.steps).then(a.retention.total_cmp(&b.retention)));
    let mut out = String::from("steps,retention,energy_distance,dynamic_degree,motion_smoothness,subject_consistency,speedup\n");
    for c in sorted {
        let (ed, dd, ms, sc) = match &c.metrics {
            Ok(m) => (m.energy_distance, m.dynamic_degree, m.motion_smoothness, m.subject_consistency),
            Err(_) => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
        };
        out.push_str(&format!("{},{},{ed},{dd},{ms},{sc},{:.3}\n", c.steps, c.retention, c.speedup));
    }
    out
}

/// Gnuplot matrix of the composite score: `K` rows by `ρ` columns.
///
/// The composite is the mean of dynamic degree, negated energy distance and
/// motion smoothness, each min-max normalized over the finished cells (a
/// metric with no spread normalizes to 0.5). Failed cells print `nan`.
pub fn sweep_surface(cells: &[SweepCell], steps: &[usize], retentions: &[f64]) -> String {
    let ok: Vec<&MetricReport> = cells.iter().filter_map(|c| c.metrics.as_ref().ok()).collect();
    let extractors: [fn(&MetricReport) -> f64; 3] = [|m| m.dynamic_degree, |m| -m.energy_distance, |m| m.motion_smoothness];
    let ranges: Vec<(f64, f64)> = extractors
        .iter()
        .map(|f| {
            ok.iter().map(|m| f(m)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect();
    let composite = |m: &MetricReport| {
        extractors
            .iter()
            .zip(&ranges)
            .map(|(f, &(lo, hi))| if hi > lo { (f(m) - lo) / (hi - lo) } else { 0.5 })
            .sum::<f64>()
            / 3.0
    };
    let mut out = format!(
        "# composite score; rows K = {steps:?}, columns retention = {retentions:?}\n"
    );
    for &k in steps {
        let row: Vec<String> = retentions
            .iter()
            .map(|&r| {
                cells
                    .iter()
                    .find(|c| c.steps == k && c.retention == r)
                    .and_then(|c| c.metrics.as_ref().ok())
                    .map(|m| format!("{:.6}", composite(m)))
                    .unwrap_or_else(|| "nan".into())
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn speedup_examples() {
        assert!((default_speedup(4, 0.7).unwrap() - 35.714_285_714).abs() < 1e-6);
        assert_eq!(default_speedup(4, 0.5).unwrap(), 50.0);
        assert!((default_speedup(3, 1.0).unwrap() - 33.333_333).abs() < 1e-5);
        assert_eq!(default_speedup(100, 1.0).unwrap(), 1.0);
        assert!(default_speedup(0, 1.0).is_err());
        assert!(default_speedup(4, 0.0).is_err());
        assert!(default_speedup(4, 0.7).unwrap() > default_speedup(5, 0.7).unwrap());
        assert!(default_speedup(4, 0.7).unwrap() > default_speedup(4, 0.8).unwrap());
    }

    #[test]
    fn energy_distance_examples() {
        let a = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let b = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        assert!(energy_distance(&a, &a).unwrap().abs() < 1e-12);
        assert_eq!(energy_distance(&a, &b).unwrap(), energy_distance(&b, &a).unwrap());
        let p = vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()];
        assert_eq!(energy_distance(&p, &b).unwrap(), 10.0);
        assert!(energy_distance(&[], &b).is_err());
    }

    #[test]
    fn video_metric_examples() {
        let constant = video(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        assert_eq!(dynamic_degree(std::slice::from_ref(&constant)).unwrap(), 0.0);
        assert_eq!(motion_smoothness(std::slice::from_ref(&constant)).unwrap(), 1.0);
        assert_eq!(subject_consistency(&[constant]).unwrap(), 1.0);
        assert_eq!(dynamic_degree(&[video(&[&[0.0, 0.0], &[3.0, 0.0]])]).unwrap(), 3.0);
        let ramp = video(&[&[0.0, 0.0], &[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        assert_eq!(motion_smoothness(&[ramp]).unwrap(), 1.0);
        assert!(motion_smoothness(&[video(&[&[0.0], &[1.0]])]).is_err());
    }

    #[test]
    fn sweep_outputs() {
        let m = |ed| MetricReport {
            energy_distance: ed,
            dynamic_degree: 1.0,
            motion_smoothness: 0.5,
            subject_consistency: 0.9,
            n_samples: 4,
            fingerprint: "x".into(),
        };
        let cells = vec![
            SweepCell { steps: 4, retention: 0.7, achieved_retention: 0.71, n_short: 5, speedup: 35.714285, metrics: Ok(m(0.2)) },
            SweepCell { steps: 1, retention: 0.7, achieved_retention: 0.71, n_short: 5, speedup: 142.857, metrics: Err("boom".into()) },
            SweepCell { steps: 4, retention: 1.0, achieved_retention: 1.0, n_short: 8, speedup: 25.0, metrics: Ok(m(0.1)) },
        ];
        let csv = sweep_csv(&cells);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,0.7,NaN"));
        assert!(lines[2].ends_with(",35.714"));
        let surface = sweep_surface(&cells, &[1, 4], &[0.7, 1.0]);
        let rows: Vec<&str> = surface.lines().skip(1).collect();
        assert_eq!(rows, vec!["nan nan", "0.333333 0.666667"]);
    }
}
