//! Adaptation timing, the FLOP cost model, and report emission.

use std::fmt::Write as _;
use std::fs;
use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lambda_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::episodes::Episode;
use crate::error::{io_err, Error, Result};
use crate::maml::{adapt, csv_err, EpisodeTask, EvalSummary};
use crate::nn::{accuracy, Architecture, LayerSpec, WeightSet};
use crate::pattern::{plan, LambdaPattern};
use crate::search::{best_at_one_step, SearchReport, Sweep};

pub const DEFAULT_WARMUP: usize = 5;
pub const MIN_SAMPLES: usize = 30;

/// Operation counts of one block for a batch of a given size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub forward: u64,
    /// Backward through the elementwise tail (pool, ReLU, batch norm, bias) to the
    /// convolution or matmul output. Needed for either gradient kind.
    pub backward_local: u64,
    pub backward_input: u64,
    pub backward_weight: u64,
    /// Applying `θ − α·g` to the block's parameters.
    pub update: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub batch: usize,
    pub layers: Vec<LayerCost>,
}

impl CostModel {
    /// Counts for one support batch of `batch` images. Multiply-adds count as 2.
    pub fn new(arch: &Architecture, batch: usize) -> Self {
        let n = batch as u64;
        let layers = arch
            .layers
            .iter()
            .zip(arch.layer_input_shapes())
            .map(|(spec, [c, h, w])| {
                let params = 2 * spec.param_count() as u64;
                match *spec {
                    LayerSpec::ConvBlock { out_channels, .. } => {
                        let out = (out_channels * h * w) as u64 * n;
                        let conv = 2 * 9 * c as u64 * out;
                        LayerCost {
                            forward: conv + 10 * out,
                            backward_local: 12 * out,
                            backward_input: conv,
                            backward_weight: conv + 3 * out,
                            update: params,
                        }
                    }
                    LayerSpec::Linear {
                        in_features,
                        out_features,
                    } => {
                        let out = out_features as u64 * n;
                        let mm = 2 * in_features as u64 * out;
                        LayerCost {
                            // includes softmax cross-entropy
                            forward: mm + 5 * out,
                            backward_local: 2 * out,
                            backward_input: mm,
                            backward_weight: mm + out,
                            update: params,
                        }
                    }
                }
            })
            .collect();
        Self { batch, layers }
    }

    /// Cost of a single adaptation step under `pattern`.
    pub fn step_cost(&self, pattern: &LambdaPattern) -> Result<u64> {
        let pl = plan(pattern, self.layers.len())?;
        let mut total: u64 = self.layers.iter().map(|l| l.forward).sum();
        for l in pl.backward() {
            total += self.layers[l].backward_local;
        }
        for &l in &pl.grad_flow {
            total += self.layers[l].backward_input;
        }
        for &l in &pl.update {
            total += self.layers[l].backward_weight + self.layers[l].update;
        }
        Ok(total)
    }
}

/// `P ×` the single-step cost for a support batch of `batch` images.
pub fn flop_cost(arch: &Architecture, batch: usize, pattern: &LambdaPattern, steps: usize) -> Result<u64> {
    Ok(steps as u64 * CostModel::new(arch, batch).step_cost(pattern)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub config: String,
    pub pattern: LambdaPattern,
    pub steps: usize,
    pub warmup: usize,
    /// Wall time of each timed adaptation.
    pub times_ms: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingSummary {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (0 for a single sample).
    pub std: f64,
    pub median: f64,
    /// At least [`MIN_SAMPLES`] timed runs.
    pub reliable: bool,
}

impl TimingSample {
    pub fn summary(&self) -> TimingSummary {
        summarize(&self.times_ms)
    }
}

pub fn summarize(times: &[f64]) -> TimingSummary {
    let count = times.len();
    if count == 0 {
        return TimingSummary {
            count,
            mean: f64::NAN,
            std: f64::NAN,
            median: f64::NAN,
            reliable: false,
        };
    }
    let mean = times.iter().sum::<f64>() / count as f64;
    let std = if count > 1 {
        (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if count % 2 == 1 {
        sorted[count / 2]
    } else {
        (sorted[count / 2 - 1] + sorted[count / 2]) / 2.0
    };
    TimingSummary {
        count,
        mean,
        std,
        median,
        reliable: count >= MIN_SAMPLES,
    }
}

/// Runs `f` `warmup` times (cycling through `items`, results discarded), then once per
/// item, returning per-item wall times in milliseconds from a monotonic clock.
pub fn time_each<E>(items: &[E], warmup: usize, mut f: impl FnMut(&E) -> Result<()>) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Bench("nothing to time: zero episodes".into()));
    }
    for i in 0..warmup {
        f(&items[i % items.len()])?;
    }
    items
        .iter()
        .map(|item| {
            let start = Instant::now();
            f(item)?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

/// Times `adapt` alone on each prepared task; tasks are built before timing starts.
#[allow(clippy::too_many_arguments)]
pub fn time_adaptation<T: Scalar>(
    config: &str,
    arch: &Architecture,
    weights: &WeightSet<T>,
    tasks: &[EpisodeTask<'_, T>],
    pattern: &LambdaPattern,
    steps: usize,
    alpha: f64,
    warmup: usize,
) -> Result<TimingSample> {
    let alpha = T::from_f64_lossy(alpha);
    let times_ms = time_each(tasks, warmup, |task| {
        black_box(adapt(arch, weights, task, pattern, steps, alpha)?);
        Ok(())
    })?;
    let sample = TimingSample {
        config: config.to_string(),
        pattern: pattern.clone(),
        steps,
        warmup,
        times_ms,
    };
    if !sample.summary().reliable {
        log::warn!(
            "timing for {pattern} at P={steps} uses {} samples (< {MIN_SAMPLES}); summary unreliable",
            sample.times_ms.len()
        );
    }
    Ok(sample)
}

/// Evaluates every episode and records the wall time of each adaptation, excluding
/// the query forward pass.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_timed<T: Scalar>(
    config: &str,
    arch: &Architecture,
    weights: &WeightSet<T>,
    episodes: &[Episode],
    pattern: &LambdaPattern,
    steps: usize,
    alpha: f64,
    warmup: usize,
) -> Result<(EvalSummary, TimingSample)> {
    if episodes.is_empty() {
        return Err(Error::Bench("nothing to time: zero episodes".into()));
    }
    let tasks: Vec<EpisodeTask<'_, T>> = episodes.iter().map(|e| EpisodeTask::new(arch, e)).collect();
    let a = T::from_f64_lossy(alpha);
    for i in 0..warmup {
        black_box(adapt(arch, weights, &tasks[i % tasks.len()], pattern, steps, a)?);
    }
    let mut accuracies = Vec::with_capacity(tasks.len());
    let mut times_ms = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let start = Instant::now();
        let adapted = adapt(arch, weights, task, pattern, steps, a)?;
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
        accuracies.push(accuracy(&task.query_y, &task.query_logits(&adapted.tensors())?)?);
    }
    Ok((
        EvalSummary::from_accuracies(accuracies)?,
        TimingSample {
            config: config.to_string(),
            pattern: pattern.clone(),
            steps,
            warmup,
            times_ms,
        },
    ))
}

/// Writes plot-ready CSVs and a Markdown summary to `dir`; returns the files written.
///
/// * `timing.csv`: one row per timing sample (mean / std / median adaptation time).
/// * `sweep.csv`: accuracy per configuration, mean time and cost per (steps, pattern).
/// * `search.csv`, `search.md`: the admissible patterns of a threshold search.
/// * `best_one_step.csv`: best pattern per configuration at a single step.
/// * `long.csv`: every value as `pattern, steps, config, metric, value`.
/// * `summary.md`.
pub fn emit_report(
    dir: &Path,
    samples: &[TimingSample],
    sweep: Option<&Sweep>,
    search: Option<&SearchReport>,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))?;
        written.push(path);
        Ok(())
    };

    put("timing.csv", timing_csv(samples)?)?;
    let empty = Sweep::default();
    let sweep_ref = sweep.unwrap_or(&empty);
    put("sweep.csv", sweep_ref.to_csv()?)?;
    match search {
        Some(report) => {
            put("search.csv", report.to_csv()?)?;
            put("search.md", report.to_markdown())?;
        }
        None => {
            put("search.csv", SearchReport::csv_header(&sweep_ref.configs)?)?;
            put("search.md", SearchReport::markdown_header(&sweep_ref.configs))?;
        }
    }
    let best = if sweep_ref.records.iter().any(|r| r.steps == 1) {
        best_at_one_step(sweep_ref)?
    } else {
        Vec::new()
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["config", "pattern", "accuracy", "full_pattern_accuracy"];
    w.write_record(header).map_err(|e| csv_err(dir, e))?;
    for b in &best {
        w.write_record([
            b.config.clone(),
            b.record.pattern.to_string(),
            b.accuracy.to_string(),
            b.full_pattern_accuracy.map_or(String::new(), |a| a.to_string()),
        ])
        .map_err(|e| csv_err(dir, e))?;
    }
    put("best_one_step.csv", into_string(w, dir)?)?;
    put("long.csv", long_csv(samples, sweep_ref)?)?;
    put("summary.md", summary_md(samples, sweep_ref, search, &best))?;
    Ok(written)
}

fn into_string(w: csv::Writer<Vec<u8>>, dir: &Path) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn timing_csv(samples: &[TimingSample]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let here = Path::new("timing.csv");
    w.write_record(["config", "pattern", "steps", "count", "mean_ms", "std_ms", "median_ms", "reliable"])
        .map_err(|e| csv_err(here, e))?;
    for s in samples {
        let t = s.summary();
        w.write_record([
            s.config.clone(),
            s.pattern.to_string(),
            s.steps.to_string(),
            t.count.to_string(),
            format!("{:.4}", t.mean),
            format!("{:.4}", t.std),
            format!("{:.4}", t.median),
            t.reliable.to_string(),
        ])
        .map_err(|e| csv_err(here, e))?;
    }
    into_string(w, here)
}

fn long_csv(samples: &[TimingSample], sweep: &Sweep) -> Result<String> {
    let here = Path::new("long.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pattern", "steps", "config", "metric", "value"])
        .map_err(|e| csv_err(here, e))?;
    let mut row = |p: &LambdaPattern, steps: usize, config: &str, metric: &str, value: String| {
        w.write_record([p.to_string(), steps.to_string(), config.to_string(), metric.to_string(), value])
            .map_err(|e| csv_err(here, e))
    };
    for r in &sweep.records {
        for (config, acc) in sweep.configs.iter().zip(&r.accuracy) {
            row(&r.pattern, r.steps, config, "accuracy", acc.to_string())?;
        }
        row(&r.pattern, r.steps, "mean", "time_ms", format!("{:.4}", r.time_ms))?;
        row(&r.pattern, r.steps, "mean", "flop_cost", r.flop_cost.to_string())?;
    }
    for s in samples {
        let t = s.summary();
        row(&s.pattern, s.steps, &s.config, "mean_ms", format!("{:.4}", t.mean))?;
        row(&s.pattern, s.steps, &s.config, "median_ms", format!("{:.4}", t.median))?;
    }
    into_string(w, here)
}

fn summary_md(
    samples: &[TimingSample],
    sweep: &Sweep,
    search: Option<&SearchReport>,
    best: &[crate::search::BestPattern],
) -> String {
    let mut s = String::from("# Adaptation report\n\n## Adaptation time\n\n");
    s.push_str("| Config | Pattern | Steps | Count | Mean (ms) | Std (ms) | Median (ms) |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for sample in samples {
        let t = sample.summary();
        let flag = if t.reliable { "" } else { " (unreliable)" };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {}{} | {:.2} | {:.2} | {:.2} |",
            sample.config, sample.pattern, sample.steps, t.count, flag, t.mean, t.std, t.median
        );
    }
    let _ = writeln!(s, "\n## Sweep\n\n{} records over {} configurations.", sweep.records.len(), sweep.configs.len());
    if let Some(report) = search {
        s.push_str("\n## Threshold search\n\n");
        s.push_str(&report.to_markdown());
        let _ = writeln!(
            s,
            "\nSelected {} at P={} ({:.2}x faster than the full pattern at P={}).",
            report.selected.pattern, report.selected.steps, report.speedup, report.reference_steps
        );
    }
    if !best.is_empty() {
        s.push_str("\n## Best pattern at one step\n\n| Config | Pattern | Accuracy (%) | Full pattern (%) |\n|---|---|---|---|\n");
        for b in best {
            let full = b
                .full_pattern_accuracy
                .map_or("n/a".to_string(), |a| format!("{:.1}", a * 100.0));
            let _ = writeln!(s, "| {} | {} | {:.1} | {} |", b.config, b.record.pattern, b.accuracy * 100.0, full);
        }
    }
    s
}
