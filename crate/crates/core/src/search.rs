//! Pattern sweeps and the threshold search over their results.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{evaluate_timed, flop_cost};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::maml::csv_err;
use crate::nn::{Architecture, WeightSet};
use crate::pattern::LambdaPattern;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub pattern: LambdaPattern,
    pub steps: usize,
    /// Accuracy per configuration, aligned with [`Sweep::configs`].
    pub accuracy: Vec<f64>,
    /// Unweighted mean over configurations of the mean adaptation time.
    pub time_ms: f64,
    /// Mean over configurations of the cost model's count.
    pub flop_cost: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub configs: Vec<String>,
    pub records: Vec<SweepRecord>,
}

/// One trained model and its fixed evaluation episodes.
pub struct SweepConfig<'a> {
    pub name: String,
    pub arch: &'a Architecture,
    pub weights: &'a WeightSet<f64>,
    pub episodes: &'a [Episode],
    pub alpha: f64,
}

/// Evaluates and times every `(steps, pattern)` pair on every configuration. The same
/// episodes are used for every pattern.
pub fn sweep(
    configs: &[SweepConfig<'_>],
    patterns: &[LambdaPattern],
    steps_list: &[usize],
    warmup: usize,
) -> Result<Sweep> {
    if patterns.is_empty() {
        return Err(Error::Search("no patterns to sweep".into()));
    }
    if steps_list.is_empty() || configs.is_empty() {
        return Err(Error::Search("sweep needs at least one step count and one configuration".into()));
    }
    let mut records = Vec::with_capacity(patterns.len() * steps_list.len());
    for &steps in steps_list {
        for pattern in patterns {
            let mut accuracy = Vec::with_capacity(configs.len());
            let mut time = 0.0;
            let mut cost = 0.0;
            for cfg in configs {
                let (summary, timing) = evaluate_timed(
                    &cfg.name, cfg.arch, cfg.weights, cfg.episodes, pattern, steps, cfg.alpha, warmup,
                )?;
                accuracy.push(summary.mean);
                time += timing.summary().mean;
                let batch = cfg.episodes[0].support_y.len();
                cost += flop_cost(cfg.arch, batch, pattern, steps)? as f64;
            }
            log::info!("swept {pattern} at P={steps}");
            records.push(SweepRecord {
                pattern: pattern.clone(),
                steps,
                accuracy,
                time_ms: time / configs.len() as f64,
                flop_cost: cost / configs.len() as f64,
            });
        }
    }
    Ok(Sweep {
        configs: configs.iter().map(|c| c.name.clone()).collect(),
        records,
    })
}

impl Sweep {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.accuracy.len() != self.configs.len() {
                return Err(Error::Search(format!(
                    "record {} at P={} has {} accuracies for {} configurations",
                    r.pattern,
                    r.steps,
                    r.accuracy.len(),
                    self.configs.len()
                )));
            }
            if r.accuracy.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Search(format!("record {} at P={}: accuracy outside [0, 1]", r.pattern, r.steps)));
            }
            if !(r.time_ms > 0.0 && r.time_ms.is_finite()) {
                return Err(Error::Search(format!("record {} at P={}: time must be positive", r.pattern, r.steps)));
            }
        }
        Ok(())
    }

    /// `steps, pattern, <one accuracy column per configuration>, time_ms, flop_cost`.
    pub fn to_csv(&self) -> Result<String> {
        let here = Path::new("sweep.csv");
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["steps".to_string(), "pattern".to_string()];
        header.extend(self.configs.iter().cloned());
        header.extend(["time_ms".to_string(), "flop_cost".to_string()]);
        w.write_record(&header).map_err(|e| csv_err(here, e))?;
        for r in &self.records {
            let mut row = vec![r.steps.to_string(), r.pattern.to_string()];
            row.extend(r.accuracy.iter().map(f64::to_string));
            row.extend([r.time_ms.to_string(), r.flop_cost.to_string()]);
            w.write_record(&row).map_err(|e| csv_err(here, e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Search(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::Search(e.to_string()))?.clone();
        let n = header.len();
        if n < 4 || &header[0] != "steps" || &header[1] != "pattern" || &header[n - 2] != "time_ms" || &header[n - 1] != "flop_cost" {
            return Err(Error::Search("sweep CSV header must be steps, pattern, <configs>, time_ms, flop_cost".into()));
        }
        let configs: Vec<String> = header.iter().skip(2).take(n - 4).map(String::from).collect();
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Search(format!("bad {what} {s:?} in sweep CSV")))
        };
        let mut records = Vec::new();
        for row in r.records() {
            let row = row.map_err(|e| Error::Search(e.to_string()))?;
            records.push(SweepRecord {
                steps: row[0].parse().map_err(|_| Error::Search(format!("bad steps {:?}", &row[0])))?,
                pattern: row[1].parse()?,
                accuracy: (2..n - 2).map(|i| num(&row[i], "accuracy")).collect::<Result<_>>()?,
                time_ms: num(&row[n - 2], "time")?,
                flop_cost: num(&row[n - 1], "cost")?,
            });
        }
        let sweep = Self { configs, records };
        sweep.validate()?;
        Ok(sweep)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub configs: Vec<String>,
    pub threshold: f64,
    pub reference_steps: usize,
    pub baseline: SweepRecord,
    /// Sorted by steps, then pattern string.
    pub admissible: Vec<SweepRecord>,
    pub selected: SweepRecord,
    /// `baseline.time_ms / selected.time_ms`.
    pub speedup: f64,
}

fn pattern_order(a: &SweepRecord, b: &SweepRecord) -> Ordering {
    a.pattern
        .active_count()
        .cmp(&b.pattern.active_count())
        .then_with(|| a.pattern.to_string().cmp(&b.pattern.to_string()))
}

/// Fastest record whose accuracy stays within `threshold` (relative) of the full
/// pattern at `reference_steps` in every configuration.
///
/// `floors`, when given, are extra per-configuration minimum accuracies applied to
/// every record except the baseline. Equal times are broken by fewer active blocks,
/// then the smaller pattern string, then fewer steps.
pub fn select_fastest(
    sweep: &Sweep,
    threshold: f64,
    reference_steps: usize,
    floors: Option<&[f64]>,
) -> Result<SearchReport> {
    sweep.validate()?;
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Search(format!("threshold must be non-negative, got {threshold}")));
    }
    if let Some(f) = floors {
        if f.len() != sweep.configs.len() {
            return Err(Error::Search(format!(
                "{} floors for {} configurations",
                f.len(),
                sweep.configs.len()
            )));
        }
    }
    let baseline = sweep
        .records
        .iter()
        .find(|r| r.steps == reference_steps && r.pattern.is_full())
        .cloned()
        .ok_or_else(|| {
            Error::Search(format!("no full-pattern record at the reference P={reference_steps}"))
        })?;
    let is_baseline = |r: &SweepRecord| r.steps == baseline.steps && r.pattern == baseline.pattern;
    let mut admissible: Vec<SweepRecord> = sweep
        .records
        .iter()
        .filter(|r| {
            let within = r
                .accuracy
                .iter()
                .zip(&baseline.accuracy)
                .all(|(&a, &base)| a >= (1.0 - threshold) * base);
            let above_floor = is_baseline(r)
                || floors.is_none_or(|f| r.accuracy.iter().zip(f).all(|(&a, &floor)| a >= floor));
            within && above_floor
        })
        .cloned()
        .collect();
    admissible.sort_by(|a, b| {
        a.steps
            .cmp(&b.steps)
            .then_with(|| a.pattern.to_string().cmp(&b.pattern.to_string()))
    });
    admissible.dedup_by(|a, b| a.steps == b.steps && a.pattern == b.pattern);
    let selected = admissible
        .iter()
        .min_by(|a, b| {
            a.time_ms
                .total_cmp(&b.time_ms)
                .then_with(|| pattern_order(a, b))
                .then_with(|| a.steps.cmp(&b.steps))
        })
        .cloned()
        .unwrap_or_else(|| baseline.clone());
    Ok(SearchReport {
        configs: sweep.configs.clone(),
        threshold,
        reference_steps,
        speedup: baseline.time_ms / selected.time_ms,
        baseline,
        admissible,
        selected,
    })
}

impl SearchReport {
    pub fn csv_header(configs: &[String]) -> Result<String> {
        let mut header = vec!["steps".to_string(), "pattern".to_string()];
        header.extend(configs.iter().cloned());
        header.extend(["mean_time_ms".into(), "relative_speedup".into(), "selected".into()]);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).map_err(|e| csv_err(Path::new("search.csv"), e))?;
        let bytes = w.into_inner().map_err(|e| Error::Search(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("UTF-8"))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = Self::csv_header(&self.configs)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.admissible {
            let mut row = vec![r.steps.to_string(), r.pattern.to_string()];
            row.extend(r.accuracy.iter().map(f64::to_string));
            row.push(r.time_ms.to_string());
            row.push((self.baseline.time_ms / r.time_ms).to_string());
            let chosen = r.steps == self.selected.steps && r.pattern == self.selected.pattern;
            row.push(chosen.to_string());
            w.write_record(&row).map_err(|e| csv_err(Path::new("search.csv"), e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Search(e.to_string()))?;
        out.push_str(std::str::from_utf8(&bytes).expect("UTF-8"));
        Ok(out)
    }

    pub fn markdown_header(configs: &[String]) -> String {
        let mut s = String::from("| Adaptation Steps | Pattern |");
        for c in configs {
            let _ = write!(s, " {c} (%) |");
        }
        s.push_str(" Mean Adaptation Time (ms) | Relative Speedup |\n|---|---|");
        for _ in configs {
            s.push_str("---|");
        }
        s.push_str("---|---|\n");
        s
    }

    /// One row per admissible record, accuracies in percent.
    pub fn to_markdown(&self) -> String {
        let mut s = Self::markdown_header(&self.configs);
        for r in &self.admissible {
            let _ = write!(s, "| {} | {} |", r.steps, r.pattern);
            for a in &r.accuracy {
                let _ = write!(s, " {:.1} |", a * 100.0);
            }
            let _ = writeln!(s, " {:.1} | {:.1} |", r.time_ms, self.baseline.time_ms / r.time_ms);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPattern {
    pub config: String,
    pub record: SweepRecord,
    pub accuracy: f64,
    /// The full pattern's accuracy at one step, if it was swept.
    pub full_pattern_accuracy: Option<f64>,
}

/// Highest single-step accuracy per configuration; ties go to fewer active blocks,
/// then the smaller pattern string.
pub fn best_at_one_step(sweep: &Sweep) -> Result<Vec<BestPattern>> {
    sweep.validate()?;
    let one: Vec<&SweepRecord> = sweep.records.iter().filter(|r| r.steps == 1).collect();
    if one.is_empty() {
        return Err(Error::Search("no records at P=1".into()));
    }
    let full = one.iter().find(|r| r.pattern.is_full());
    Ok(sweep
        .configs
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let best = one
                .iter()
                .min_by(|a, b| {
                    b.accuracy[c]
                        .total_cmp(&a.accuracy[c])
                        .then_with(|| pattern_order(a, b))
                })
                .expect("non-empty");
            BestPattern {
                config: name.clone(),
                record: (*best).clone(),
                accuracy: best.accuracy[c],
                full_pattern_accuracy: full.map(|f| f.accuracy[c]),
            }
        })
        .collect())
}
