//! Per-episode metrics, learning-curve smoothing, seed aggregation and the
//! steps-to-threshold comparisons between algorithms.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::Algo;
use crate::error::Result;

/// Smoothing window of the learning curves.
pub const RUNNING_WINDOW: usize = 20;
/// Running-average return regarded as near optimal.
pub const RETURN_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub steps: usize,
    pub total_steps: u64,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub epsilon: f64,
    pub dqn_loss: Option<f64>,
    pub advantage_loss: Option<f64>,
    pub invariance_loss: Option<f64>,
    pub explanation_loss: Option<f64>,
    pub feedback_loss: Option<f64>,
    pub updates: usize,
    pub feedback_updates: usize,
    pub feedback_records: usize,
    pub wall_clock: f64,
}

/// Append-only JSONL sink, flushed per line.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, m: &EpisodeMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeMetrics>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Mean of up to the last `window` values at each index.
pub fn running_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Vec<f64>,
    pub sem: Vec<f64>,
}

/// Pointwise mean and standard error (sample sd over sqrt(n)). Shorter runs
/// are padded with their last value.
pub fn aggregate_seeds(runs: &[Vec<f64>]) -> Aggregate {
    let len = runs.iter().map(Vec::len).max().unwrap_or(0);
    let runs: Vec<&Vec<f64>> = runs.iter().filter(|r| !r.is_empty()).collect();
    let n = runs.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut sem = Vec::with_capacity(len);
    for i in 0..len {
        let xs: Vec<f64> = runs.iter().map(|r| *r.get(i).unwrap_or(r.last().expect("non-empty"))).collect();
        let m = xs.iter().sum::<f64>() / n;
        let s = if runs.len() > 1 {
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        mean.push(m);
        sem.push(s);
    }
    Aggregate { mean, sem }
}

/// Environment steps consumed when the running-average return first reaches
/// the threshold. Runs that never get there count their total steps and are
/// marked unreached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepsToThreshold {
    pub steps: u64,
    pub reached: bool,
}

pub fn steps_to_threshold(metrics: &[EpisodeMetrics], threshold: f64, window: usize) -> StepsToThreshold {
    let returns: Vec<f64> = metrics.iter().map(|m| m.episode_return).collect();
    let avg = running_average(&returns, window);
    match avg.iter().position(|&a| a >= threshold) {
        Some(i) => StepsToThreshold {
            steps: metrics[i].total_steps,
            reached: true,
        },
        None => StepsToThreshold {
            steps: metrics.last().map_or(0, |m| m.total_steps),
            reached: false,
        },
    }
}

pub fn mean_steps(runs: &[StepsToThreshold]) -> f64 {
    runs.iter().map(|r| r.steps as f64).sum::<f64>() / runs.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// EXPAND reaches the threshold on every seed with at least `min_saving`
/// fewer mean steps than DQN-Feedback, and both beat plain DQN.
pub fn efficiency_claim(expand: &[StepsToThreshold], dqn_feedback: &[StepsToThreshold], dqn_only: &[StepsToThreshold], min_saving: f64) -> CriterionResult {
    let (e, f, d) = (mean_steps(expand), mean_steps(dqn_feedback), mean_steps(dqn_only));
    let all_reached = !expand.is_empty() && expand.iter().all(|r| r.reached);
    let saving = 1.0 - e / f;
    CriterionResult {
        name: "efficiency".into(),
        passed: all_reached && saving >= min_saving && e < d && f < d,
        detail: format!(
            "expand {e:.0} steps (all reached: {all_reached}), dqn-feedback {f:.0}, dqn-only {d:.0}, saving {:.1}%",
            100.0 * saving
        ),
    }
}

/// Both ablations beat DQN-Feedback and full EXPAND is no slower than either.
pub fn ablation_ordering(
    expand: &[StepsToThreshold],
    no_invariance: &[StepsToThreshold],
    no_aug_advantage: &[StepsToThreshold],
    dqn_feedback: &[StepsToThreshold],
) -> CriterionResult {
    let (e, i, a, f) = (mean_steps(expand), mean_steps(no_invariance), mean_steps(no_aug_advantage), mean_steps(dqn_feedback));
    CriterionResult {
        name: "ablation-ordering".into(),
        passed: i < f && a < f && e <= i && e <= a,
        detail: format!("expand {e:.0}, no-invariance {i:.0}, no-aug-advantage {a:.0}, dqn-feedback {f:.0}"),
    }
}

/// Context-agnostic augmentations do not beat DQN-Feedback by more than
/// `tolerance` (fractional).
pub fn context_agnostic_negative(crop: &[StepsToThreshold], blur: &[StepsToThreshold], dqn_feedback: &[StepsToThreshold], tolerance: f64) -> CriterionResult {
    let (c, b, f) = (mean_steps(crop), mean_steps(blur), mean_steps(dqn_feedback));
    let floor = (1.0 - tolerance) * f;
    CriterionResult {
        name: "context-agnostic-negative".into(),
        passed: c >= floor && b >= floor,
        detail: format!("aug-crop {c:.0}, aug-blur {b:.0}, dqn-feedback {f:.0}, floor {floor:.0}"),
    }
}

/// Metrics of every `<out>/<algo>/seed*/metrics.jsonl`, seeds in name order.
pub fn load_sweep(out: &Path) -> Result<BTreeMap<String, Vec<Vec<EpisodeMetrics>>>> {
    let mut sweep = BTreeMap::new();
    for algo in Algo::ALL {
        let dir = out.join(algo.as_str());
        if !dir.is_dir() {
            continue;
        }
        let mut seeds: Vec<_> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.join("metrics.jsonl").is_file())
            .collect();
        seeds.sort();
        let runs = seeds
            .iter()
            .map(|p| read_metrics(&p.join("metrics.jsonl")))
            .collect::<Result<Vec<_>>>()?;
        if !runs.is_empty() {
            sweep.insert(algo.as_str().to_string(), runs);
        }
    }
    Ok(sweep)
}
