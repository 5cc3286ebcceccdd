//! Block importance: the x₀-reconstruction error when one block is skipped.
//!
//! For block `i` the score is `E‖x_t − t·v^{skip-i}(x_t, t) − x_0‖²`, a
//! Monte-Carlo mean over a fixed stream of noised batches. The same stream
//! is replayed for every block so scores differ only through the mask.
//! Blocks are ranked by descending score and the top `n_short` form the
//! keep-set; everything else is skipped in the pruned model.
//!
//! [`exhaustive_oracle`] measures how far that one-at-a-time ranking is
//! from the best subset under the output-matching objective
//! `E‖y_original − y_pruned‖²`.

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, DiffusionBatch, TimeSampling, VideoSample};
use crate::error::{Error, Result};
use crate::model::{retention_ratio, x0_from_velocity, DiTConfig, ModelParams, SkipMask};
use crate::rng::Rng;

/// Largest subset table the oracle will enumerate.
pub const ORACLE_LIMIT: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportanceConfig {
    /// Number of noised batches in the draw stream.
    pub n_samples: usize,
    pub batch_size: usize,
    pub n_short: usize,
    /// Target retention ratio; when set it overrides `n_short` through
    /// [`n_short_for_retention`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retention: Option<f64>,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            batch_size: 8,
            n_short: 6,
            retention: None,
        }
    }
}

impl ImportanceConfig {
    pub fn resolve_n_short(&self, config: &DiTConfig) -> usize {
        match self.retention {
            Some(r) => n_short_for_retention(config, r),
            None => self.n_short,
        }
    }
}

/// Keep-set size whose retention ratio (over all parameters, including the
/// projections and embeddings) is closest to `target`; ties go to the
/// larger keep-set.
pub fn n_short_for_retention(config: &DiTConfig, target: f64) -> usize {
    let n = config.n_blocks;
    let achieved = |k: usize| retention_ratio(config, &SkipMask::from_keep_set(n, &(0..k).collect::<Vec<_>>()));
    (1..=n)
        .rev()
        .min_by(|&a, &b| (achieved(a) - target).abs().total_cmp(&(achieved(b) - target).abs()))
        .expect("at least one block")
}

/// A replayable sequence of `(x0, x1, t)` batches.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawStream {
    pub batches: Vec<DiffusionBatch>,
    pub seed: u64,
}

impl DrawStream {
    pub fn new(data: &[VideoSample], n_batches: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_batches == 0 {
            return Err(Error::InvalidArgument("importance scoring needs at least one sample batch".into()));
        }
        let mut rng = Rng::stream(seed, "importance");
        let batches = (0..n_batches)
            .map(|_| make_batch(data, batch_size, TimeSampling::Uniform, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { batches, seed })
    }

    pub fn sample_count(&self) -> usize {
        self.batches.iter().map(DiffusionBatch::len).sum()
    }
}

/// Per-sample squared norms of `a − b` over the leading axis.
fn per_sample_sq<'a>(a: &'a [f64], b: &'a [f64], n: usize) -> impl Iterator<Item = f64> + 'a {
    let per = a.len() / n;
    (0..n).map(move |s| {
        a[s * per..(s + 1) * per]
            .iter()
            .zip(&b[s * per..(s + 1) * per])
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    })
}

/// Mean x₀-reconstruction error over `draws` under an arbitrary mask.
///
/// Samples are accumulated in stream order, batch by batch.
pub fn reconstruction_error(params: &ModelParams, draws: &DrawStream, mask: &SkipMask) -> Result<f64> {
    let mut total = 0.0;
    for b in &draws.batches {
        let v = params.velocity(&b.xt, &b.t, &b.labels, mask)?;
        let x0_hat = x0_from_velocity(&b.xt, &b.t, &v)?;
        for sq in per_sample_sq(x0_hat.data(), b.x0.data(), b.len()) {
            total += sq;
        }
    }
    Ok(total / draws.sample_count() as f64)
}

/// Importance `E^i` of block `i`: the reconstruction error with only `i` skipped.
pub fn score_block(params: &ModelParams, draws: &DrawStream, block: usize) -> Result<f64> {
    let n = params.config.n_blocks;
    if block >= n {
        return Err(Error::InvalidArgument(format!("block {block} out of range for {n} blocks")));
    }
    reconstruction_error(params, draws, &SkipMask::only(n, block))
}

/// Scores every block on a shared draw stream.
pub fn score_all(params: &ModelParams, draws: &DrawStream) -> Result<Vec<f64>> {
    (0..params.config.n_blocks).map(|i| score_block(params, draws, i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub scores: Vec<f64>,
    /// Block indices by descending score, ties toward the lower index.
    pub ranking: Vec<usize>,
    /// The first `n_short` entries of `ranking`.
    pub keep_set: Vec<usize>,
    pub n_short: usize,
    /// Samples in the draw stream (batches × batch size).
    pub n_samples: usize,
    pub seed: u64,
    /// Checksum of the scored parameters.
    pub model: String,
    /// Reconstruction error of the unpruned model on the same draws.
    pub baseline: Option<f64>,
}

impl ImportanceReport {
    pub fn skip_mask(&self) -> SkipMask {
        SkipMask::from_keep_set(self.scores.len(), &self.keep_set)
    }

    /// CSV `block_index,score,rank,kept` with 1-based ranks.
    pub fn to_csv(&self) -> String {
        let mut rank = vec![0; self.scores.len()];
        for (r, &b) in self.ranking.iter().enumerate() {
            rank[b] = r + 1;
        }
        let mut out = String::from("block_index,score,rank,kept\n");
        for (i, s) in self.scores.iter().enumerate() {
            out.push_str(&format!("{i},{s},{},{}\n", rank[i], self.keep_set.contains(&i)));
        }
        out
    }

    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "n_samples": self.n_samples,
            "N_short": self.n_short,
            "ushape_ratio": ushape_diagnostic(&self.scores).map(|u| u.ratio),
            "baseline": self.baseline,
            "model": self.model,
            "ranking": self.ranking,
            "keep_set": self.keep_set,
        })
    }
}

/// Sorts blocks by descending score (ties toward the lower index) and keeps
/// the first `n_short`. Provenance fields are left empty.
pub fn rank_and_select(scores: &[f64], n_short: usize) -> Result<ImportanceReport> {
    let n = scores.len();
    if n_short == 0 || n_short > n {
        return Err(Error::InvalidArgument(format!("n_short must be in 1..={n}, got {n_short}")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("importance score {bad} is not finite")));
    }
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(ImportanceReport {
        scores: scores.to_vec(),
        keep_set: ranking[..n_short].to_vec(),
        ranking,
        n_short,
        n_samples: 0,
        seed: 0,
        model: String::new(),
        baseline: None,
    })
}

/// Builds the draw stream, scores all blocks and selects the keep-set.
pub fn importance_report(params: &ModelParams, data: &[VideoSample], config: &ImportanceConfig, seed: u64) -> Result<ImportanceReport> {
    let draws = DrawStream::new(data, config.n_samples, config.batch_size, seed)?;
    let scores = score_all(params, &draws)?;
    let mut report = rank_and_select(&scores, config.resolve_n_short(&params.config))?;
    report.n_samples = draws.sample_count();
    report.seed = seed;
    report.model = params.checksum();
    report.baseline = Some(reconstruction_error(params, &draws, &SkipMask::none(params.config.n_blocks))?);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    /// Every keep-set of size `n_short` in lexicographic order with its
    /// output-matching objective.
    pub table: Vec<(Vec<usize>, f64)>,
    pub best_keep_set: Vec<usize>,
    /// 1 + number of subsets strictly better than the greedy keep-set.
    pub greedy_rank: Option<usize>,
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul((n - i) as u64) / (i as u64 + 1))
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < n - k + i) else {
            return out;
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// `E‖y_original − y_pruned‖²` for one keep-set on `draws`.
pub fn output_objective(params: &ModelParams, draws: &DrawStream, keep: &[usize]) -> Result<f64> {
    let n = params.config.n_blocks;
    let full = SkipMask::none(n);
    let pruned = SkipMask::from_keep_set(n, keep);
    let mut total = 0.0;
    for b in &draws.batches {
        let y = params.velocity(&b.xt, &b.t, &b.labels, &full)?;
        let yp = params.velocity(&b.xt, &b.t, &b.labels, &pruned)?;
        for sq in per_sample_sq(y.data(), yp.data(), b.len()) {
            total += sq;
        }
    }
    Ok(total / draws.sample_count() as f64)
}

/// Evaluates every keep-set of size `n_short`; `greedy` (if given) is
/// located in the resulting table.
pub fn exhaustive_oracle(params: &ModelParams, draws: &DrawStream, n_short: usize, greedy: Option<&[usize]>) -> Result<OracleReport> {
    let n = params.config.n_blocks;
    if n_short == 0 || n_short > n {
        return Err(Error::InvalidArgument(format!("n_short must be in 1..={n}, got {n_short}")));
    }
    let count = binomial(n, n_short);
    if count > ORACLE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "C({n}, {n_short}) = {count} subsets exceeds the oracle limit of {ORACLE_LIMIT}"
        )));
    }
    let table = subsets(n, n_short)
        .into_iter()
        .map(|keep| output_objective(params, draws, &keep).map(|o| (keep, o)))
        .collect::<Result<Vec<_>>>()?;
    let best_keep_set = table
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k.clone())
        .expect("at least one subset");
    let greedy_rank = greedy.and_then(|g| {
        let mut g = g.to_vec();
        g.sort_unstable();
        let obj = table.iter().find(|(k, _)| *k == g)?.1;
        Some(1 + table.iter().filter(|(_, o)| *o < obj).count())
    });
    Ok(OracleReport {
        table,
        best_keep_set,
        greedy_rank,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UShape {
    pub edge_mean: f64,
    pub middle_mean: f64,
    pub ratio: f64,
}

/// Mean score of the first and last `N/4` blocks over the mean of the
/// rest. Informational only; `None` for fewer than 8 blocks.
pub fn ushape_diagnostic(scores: &[f64]) -> Option<UShape> {
    let n = scores.len();
    if n < 8 {
        return None;
    }
    let q = n / 4;
    let edges: Vec<f64> = scores[..q].iter().chain(&scores[n - q..]).copied().collect();
    let middle = &scores[q..n - q];
    let edge_mean = edges.iter().sum::<f64>() / edges.len() as f64;
    let middle_mean = middle.iter().sum::<f64>() / middle.len() as f64;
    let ratio = if edge_mean == middle_mean { 1.0 } else { edge_mean / middle_mean };
    Some(UShape {
        edge_mean,
        middle_mean,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::model::tests::{tiny_data, tiny_model};

    fn fixture(n_blocks: usize) -> (ModelParams, DrawStream) {
        let data = generate_dataset(&tiny_data(), 16, 3).unwrap();
        (tiny_model(n_blocks, 2), DrawStream::new(&data, 3, 4, 9).unwrap())
    }

    #[test]
    fn ranking_examples() {
        let r = rank_and_select(&[5.0, 1.0, 3.0, 2.0], 2).unwrap();
        assert_eq!(r.ranking, vec![0, 2, 3, 1]);
        assert_eq!(r.keep_set, vec![0, 2]);
        let r = rank_and_select(&[1.0, 1.0, 2.0], 2).unwrap();
        assert_eq!(r.keep_set, vec![2, 0]);
        let r = rank_and_select(&[1.0, 1.0, 2.0], 3).unwrap();
        assert!(r.skip_mask().is_unpruned());
        assert!(rank_and_select(&[1.0], 2).is_err());
        assert!(rank_and_select(&[1.0], 0).is_err());
        assert!(rank_and_select(&[f64::NAN], 1).is_err());
    }

    #[test]
    fn zeroed_block_scores_the_baseline() {
        let (mut p, draws) = fixture(4);
        p.zero_block_residual(1);
        let base = reconstruction_error(&p, &draws, &SkipMask::none(4)).unwrap();
        assert_eq!(score_block(&p, &draws, 1).unwrap(), base);
        assert_ne!(score_block(&p, &draws, 2).unwrap(), base);
        assert!(score_block(&p, &draws, 4).is_err());
    }

    #[test]
    fn scoring_is_deterministic() {
        let (p, draws) = fixture(4);
        let again = DrawStream::new(&generate_dataset(&tiny_data(), 16, 3).unwrap(), 3, 4, 9).unwrap();
        assert_eq!(draws, again);
        assert_eq!(score_all(&p, &draws).unwrap(), score_all(&p, &again).unwrap());
    }

    #[test]
    fn oracle_enumeration() {
        assert_eq!(subsets(4, 2).len(), 6);
        assert_eq!(subsets(6, 3).len(), 20);
        assert_eq!(binomial(30, 15), 155_117_520);
        let (p, draws) = fixture(4);
        let o = exhaustive_oracle(&p, &draws, 2, Some(&[3, 0])).unwrap();
        assert_eq!(o.table.len(), 6);
        assert!(o.greedy_rank.unwrap() >= 1);
        let (p2, draws2) = fixture(2);
        let o = exhaustive_oracle(&p2, &draws2, 2, None).unwrap();
        assert_eq!(o.table, vec![(vec![0, 1], 0.0)]);
    }

    #[test]
    fn oracle_guard() {
        let data = generate_dataset(&tiny_data(), 8, 3).unwrap();
        let p = tiny_model(16, 0);
        let draws = DrawStream::new(&data, 1, 2, 0).unwrap();
        assert!(exhaustive_oracle(&p, &draws, 8, None).is_err());
    }

    #[test]
    fn ushape_examples() {
        assert_eq!(ushape_diagnostic(&[2.0; 8]).unwrap().ratio, 1.0);
        let u = ushape_diagnostic(&[4.0, 3.0, 1.0, 1.0, 1.0, 1.0, 3.0, 4.0]).unwrap();
        assert_eq!((u.edge_mean, u.middle_mean, u.ratio), (3.5, 1.0, 3.5));
        let inc: Vec<f64> = (0..8).map(f64::from).collect();
        assert!(ushape_diagnostic(&inc).unwrap().ratio.is_finite());
        assert!(ushape_diagnostic(&[1.0; 4]).is_none());
    }

    #[test]
    fn retention_targets() {
        let cfg = tiny_model(8, 0).config;
        assert_eq!(n_short_for_retention(&cfg, 1.0), 8);
        let k = n_short_for_retention(&cfg, 0.7);
        let r = |k: usize| retention_ratio(&cfg, &SkipMask::from_keep_set(8, &(0..k).collect::<Vec<_>>()));
        assert!((1..=8).all(|j| (r(k) - 0.7).abs() <= (r(j) - 0.7).abs()));
    }

    #[test]
    fn csv_layout() {
        let r = rank_and_select(&[5.0, 1.0, 3.0, 2.0], 2).unwrap();
        assert_eq!(
            r.to_csv(),
            "block_index,score,rank,kept\n0,5,1,true\n1,1,4,false\n2,3,2,true\n3,2,3,false\n"
        );
    }
}
