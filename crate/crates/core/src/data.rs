//! Synthetic "videos": a Gaussian blob moving across a toroidal grid.
//!
//! The class label picks the motion direction. Frames are flattened to
//! `grid_h · grid_w` tokens, so a sample is a `[frames, grid_h·grid_w]`
//! tensor with values in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower clamp of diffusion time.
pub const T_MIN: f64 = 0.001;
/// Upper clamp of diffusion time.
pub const T_MAX: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub frames: usize,
    pub n_classes: usize,
    pub blob_sigma: f64,
    pub speed: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            frames: 8,
            n_classes: 5,
            blob_sigma: 1.0,
            speed: 0.75,
        }
    }
}

impl DataConfig {
    pub fn token_dim(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Label reserved for the unconditional (null) prompt.
    pub fn null_label(&self) -> usize {
        self.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h < 4 || self.grid_w < 4 {
            return Err(Error::Config(format!("grid must be at least 4x4, got {}x{}", self.grid_h, self.grid_w)));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if !(self.blob_sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("blob_sigma must be positive, got {}", self.blob_sigma)));
        }
        Ok(())
    }

    /// Per-frame displacement `(d_row, d_col)` in cells for a class.
    ///
    /// Classes 0..4 are up, down, left, right and static; any further
    /// classes move along directions spaced by the golden angle.
    pub fn direction(&self, class: usize) -> (f64, f64) {
        let (dr, dc) = match class {
            0 => (-1.0, 0.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            3 => (0.0, 1.0),
            4 => (0.0, 0.0),
            c => {
                let theta = (c - 5) as f64 * 2.399_963_229_728_653 + std::f64::consts::FRAC_PI_4;
                (theta.sin(), theta.cos())
            }
        };
        (dr * self.speed, dc * self.speed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub x0: Tensor,
    pub label: usize,
}

fn torus_delta(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

/// Renders one frame with the blob centered at `(row, col)`.
pub fn render_frame(config: &DataConfig, row: f64, col: f64) -> Vec<f64> {
    let (h, w) = (config.grid_h as f64, config.grid_w as f64);
    let denom = 2.0 * config.blob_sigma * config.blob_sigma;
    let mut out = Vec::with_capacity(config.token_dim());
    for r in 0..config.grid_h {
        let dr = torus_delta(r as f64, row, h);
        for c in 0..config.grid_w {
            let dc = torus_delta(c as f64, col, w);
            out.push((-(dr * dr + dc * dc) / denom).exp());
        }
    }
    out
}

/// Renders a full video starting at `(row, col)`.
pub fn render_video(config: &DataConfig, class: usize, row: f64, col: f64) -> Tensor {
    let (dr, dc) = config.direction(class);
    let mut data = Vec::with_capacity(config.frames * config.token_dim());
    for j in 0..config.frames {
        let t = j as f64;
        let r = (row + t * dr).rem_euclid(config.grid_h as f64);
        let c = (col + t * dc).rem_euclid(config.grid_w as f64);
        data.extend(render_frame(config, r, c));
    }
    Tensor::new(vec![config.frames, config.token_dim()], data).expect("frame sizes agree")
}

pub fn generate_dataset(config: &DataConfig, n: usize, seed: u64) -> Result<Vec<VideoSample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let mut rng = Rng::stream(seed, "data");
    let (h, w) = (config.grid_h as f64, config.grid_w as f64);
    Ok((0..n)
        .map(|_| {
            let label = rng.below(config.n_classes);
            let row = rng.uniform(1.0, h - 1.0);
            let col = rng.uniform(1.0, w - 1.0);
            VideoSample {
                x0: render_video(config, label, row, col),
                label,
            }
        })
        .collect())
}

/// Circular (toroidal) intensity-weighted centroid of a frame.
pub fn frame_centroid(frame: &[f64], grid_h: usize, grid_w: usize) -> (f64, f64) {
    let axis = |period: usize, coord: &dyn Fn(usize) -> usize| {
        let (mut s, mut c) = (0.0, 0.0);
        for (i, &v) in frame.iter().enumerate() {
            let angle = std::f64::consts::TAU * coord(i) as f64 / period as f64;
            s += v * angle.sin();
            c += v * angle.cos();
        }
        (s.atan2(c) / std::f64::consts::TAU * period as f64).rem_euclid(period as f64)
    };
    (axis(grid_h, &|i| i / grid_w), axis(grid_w, &|i| i % grid_w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeSampling {
    /// `t ~ U[T_MIN, T_MAX]` per sample.
    Uniform,
    /// Every sample at the given time (not clamped).
    Fixed(f64),
}

/// Noised training pairs on the linear interpolant `x_t = (1−t)·x0 + t·x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionBatch {
    /// `[B, frames, tokens]`
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Vec<f64>,
    pub xt: Tensor,
    pub labels: Vec<usize>,
}

impl DiffusionBatch {
    /// Builds a batch from stacked clean data `x0`, drawing noise and times from `rng`.
    pub fn from_data(x0: Tensor, labels: Vec<usize>, sampling: TimeSampling, rng: &mut Rng) -> Result<Self> {
        let batch = x0.shape().first().copied().unwrap_or(0);
        if batch == 0 || labels.len() != batch {
            return Err(Error::InvalidArgument(format!("{} labels for a batch of {batch}", labels.len())));
        }
        let t: Vec<f64> = (0..batch)
            .map(|_| match sampling {
                TimeSampling::Uniform => rng.uniform(T_MIN, T_MAX),
                TimeSampling::Fixed(t) => t,
            })
            .collect();
        let x1 = Tensor::new(x0.shape().to_vec(), rng.normal_vec(x0.numel()))?;
        Ok(Self::assemble(x0, x1, t, labels))
    }

    /// Exact interpolant for given endpoints and times.
    pub fn assemble(x0: Tensor, x1: Tensor, t: Vec<f64>, labels: Vec<usize>) -> Self {
        let per = x0.numel() / t.len().max(1);
        let xt_data = x0
            .data()
            .iter()
            .zip(x1.data())
            .enumerate()
            .map(|(i, (&a, &b))| {
                let ti = t[i / per];
                (1.0 - ti) * a + ti * b
            })
            .collect();
        let xt = Tensor::new(x0.shape().to_vec(), xt_data).expect("same shape as x0");
        Self { x0, x1, t, xt, labels }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Flow-matching velocity target `x1 − x0`.
    pub fn velocity_target(&self) -> Tensor {
        self.x1.zip_map(&self.x0, |a, b| a - b).expect("x0 and x1 share a shape")
    }

    /// Replaces each label with `null_label` independently with probability `p`.
    pub fn drop_labels(&mut self, p: f64, null_label: usize, rng: &mut Rng) {
        for l in &mut self.labels {
            if rng.bernoulli(p) {
                *l = null_label;
            }
        }
    }
}

/// Draws `batch_size` distinct samples and noises them.
pub fn make_batch(samples: &[VideoSample], batch_size: usize, sampling: TimeSampling, rng: &mut Rng) -> Result<DiffusionBatch> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty sample list".into()));
    }
    if batch_size == 0 || batch_size > samples.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} with {} samples available",
            samples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    for i in 0..batch_size {
        let j = i + rng.below(samples.len() - i);
        idx.swap(i, j);
    }
    let chosen: Vec<&VideoSample> = idx[..batch_size].iter().map(|&i| &samples[i]).collect();
    let x0 = Tensor::stack(&chosen.iter().map(|s| s.x0.clone()).collect::<Vec<_>>())?;
    let labels = chosen.iter().map(|s| s.label).collect();
    DiffusionBatch::from_data(x0, labels, sampling, rng)
}

/// Dataset as a tensor container with names `x0/<i>`.
pub fn dataset_checkpoint(samples: &[VideoSample], config: &DataConfig, seed: u64) -> Checkpoint {
    Checkpoint::new(
        samples.iter().enumerate().map(|(i, s)| (format!("x0/{i}"), s.x0.clone())).collect(),
        serde_json::json!({"kind": "dataset", "seed": seed, "data": config}),
    )
}

/// Sidecar CSV `index,label`.
pub fn labels_csv(samples: &[VideoSample]) -> String {
    let mut out = String::from("index,label\n");
    for (i, s) in samples.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", s.label));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_generation() {
        let cfg = DataConfig::default();
        assert_eq!(generate_dataset(&cfg, 20, 5).unwrap(), generate_dataset(&cfg, 20, 5).unwrap());
        assert_ne!(generate_dataset(&cfg, 20, 5).unwrap(), generate_dataset(&cfg, 20, 6).unwrap());
    }

    #[test]
    fn static_class_has_identical_frames() {
        let cfg = DataConfig::default();
        let v = render_video(&cfg, 4, 3.3, 2.7);
        assert_eq!(v.index_outer(0), v.index_outer(cfg.frames - 1));
    }

    #[test]
    fn rightward_centroid_advances_one_cell_per_frame() {
        let cfg = DataConfig { speed: 1.0, ..DataConfig::default() };
        let v = render_video(&cfg, 3, 4.0, 6.2);
        let d = cfg.token_dim();
        let cols: Vec<f64> = (0..cfg.frames)
            .map(|j| frame_centroid(&v.data()[j * d..(j + 1) * d], cfg.grid_h, cfg.grid_w).1)
            .collect();
        for w in cols.windows(2) {
            let step = (w[1] - w[0]).rem_euclid(cfg.grid_w as f64);
            assert!((step - 1.0).abs() <= 0.5, "step {step}");
        }
    }

    #[test]
    fn frames_show_a_visible_blob_in_unit_range() {
        let cfg = DataConfig::default();
        for s in generate_dataset(&cfg, 50, 1).unwrap() {
            assert!(s.x0.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for frame in s.x0.data().chunks(cfg.token_dim()) {
                let m = frame.iter().cloned().fold(0.0, f64::max);
                assert!((0.5..=1.0).contains(&m));
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let cfg = DataConfig { blob_sigma: 0.0, ..DataConfig::default() };
        assert!(generate_dataset(&cfg, 4, 0).is_err());
        assert!(generate_dataset(&DataConfig::default(), 0, 0).is_err());
        assert!(DataConfig { grid_h: 3, ..DataConfig::default() }.validate().is_err());
    }

    #[test]
    fn interpolant_endpoints_and_probe() {
        let cfg = DataConfig::default();
        let data = generate_dataset(&cfg, 8, 2).unwrap();
        let mut rng = Rng::new(9);
        let b0 = make_batch(&data, 4, TimeSampling::Fixed(0.0), &mut rng).unwrap();
        assert_eq!(b0.xt, b0.x0);
        let b1 = make_batch(&data, 4, TimeSampling::Fixed(1.0), &mut rng).unwrap();
        assert_eq!(b1.xt, b1.x1);
        let probe = DiffusionBatch::assemble(Tensor::zeros(vec![1, 1]), Tensor::full(vec![1, 1], 2.0), vec![0.5], vec![0]);
        assert_eq!(probe.xt.data(), &[1.0]);
        assert!(make_batch(&[], 1, TimeSampling::Uniform, &mut rng).is_err());
        assert!(make_batch(&data, 9, TimeSampling::Uniform, &mut rng).is_err());
    }

    #[test]
    fn uniform_times_are_clamped() {
        let cfg = DataConfig::default();
        let data = generate_dataset(&cfg, 16, 2).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let b = make_batch(&data, 16, TimeSampling::Uniform, &mut rng).unwrap();
            assert!(b.t.iter().all(|&t| (T_MIN..=T_MAX).contains(&t)));
        }
    }
}
