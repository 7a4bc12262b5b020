use std::fs;
use std::path::{Path, PathBuf};

use lambda_maml::bench::{emit_report, time_adaptation, TimingSample};
use lambda_maml::checkpoint::{load_checkpoint, save_checkpoint};
use lambda_maml::episodes::{
    apply_split, load_cifar100, partition_classes, synth_taskspace, Episode, EpisodeSpec,
    SplitDatasets, SplitManifest, SynthSpec,
};
use lambda_maml::maml::{
    evaluate, rng_stream, sample_episodes, stream, train, write_train_log, EpisodeTask, EvalSummary,
    MetaModel,
};
use lambda_maml::nn::{build_cnn4, Architecture, Cnn4Config, WeightSet};
use lambda_maml::search::{select_fastest, sweep, Sweep, SweepConfig};
use lambda_tensor::Scalar;

use crate::config::{Precision, RunConfig, Source};
use crate::error::{CliError, CliResult};

pub struct Outcome {
    pub run_dir: PathBuf,
    pub summary: String,
}

/// Creates `<out_dir>/<command>-<timestamp>` and writes the resolved config into it.
pub fn prepare_run_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = cfg.out_dir.join(format!("{}-{stamp}", cfg.command));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        n += 1;
        dir = PathBuf::from(format!("{}-{n}", base.display()));
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| CliError::io(&path, e))?;
    Ok(dir)
}

pub fn load_data(cfg: &RunConfig) -> CliResult<SplitDatasets> {
    let d = &cfg.data;
    let split = match d.source {
        Source::Synthetic => {
            let spec = SynthSpec {
                n_classes: d.classes,
                shape: [3, d.image_size, d.image_size],
                difficulty: d.difficulty,
                images_per_class: d.images_per_class,
            };
            let ds = synth_taskspace(&spec, &mut rng_stream(cfg.meta.seed, stream::DATA))?;
            partition_classes(ds, d.split)?
        }
        Source::Cifar => {
            let dir = d
                .cifar_dir
                .as_ref()
                .ok_or_else(|| CliError::config("cifar source needs --cifar <DIR>"))?;
            let manifest = d
                .manifest
                .as_ref()
                .ok_or_else(|| CliError::config("cifar source needs --manifest <PATH> listing the class split"))?;
            let manifest = SplitManifest::load(manifest)?;
            apply_split(load_cifar100(dir)?, &manifest)?
        }
    };
    for w in &split.warnings {
        log::warn!("{w}");
    }
    Ok(split)
}

fn episode_spec(cfg: &RunConfig, n_way: usize, k_shot: usize) -> EpisodeSpec {
    EpisodeSpec {
        n_way,
        k_shot,
        k_query: cfg.episode.k_query,
    }
}

fn fresh_model(cfg: &RunConfig, spec: EpisodeSpec, shape: [usize; 3]) -> CliResult<MetaModel> {
    let mut c = Cnn4Config::new(cfg.model.filters, spec.n_way, shape);
    c.feature_dim = cfg.model.feature_dim;
    let (arch, w) = build_cnn4(&c, &mut rng_stream(cfg.meta.seed, stream::INIT))?;
    Ok(MetaModel::new(arch, w, cfg.meta.clone(), spec)?)
}

fn check_shape(arch: &Architecture, data: &SplitDatasets, what: &Path) -> CliResult<()> {
    if arch.input_shape != data.test.shape {
        return Err(CliError::config(format!(
            "{} expects {:?} images but the dataset has {:?}",
            what.display(),
            arch.input_shape,
            data.test.shape
        )));
    }
    Ok(())
}

fn first_checkpoint<'a>(cfg: &'a RunConfig, command: &str) -> CliResult<&'a Path> {
    cfg.checkpoints
        .first()
        .map(PathBuf::as_path)
        .ok_or_else(|| CliError::usage(format!("{command} requires --checkpoint <PATH>")))
}

fn write(path: &Path, body: &str) -> CliResult<()> {
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

pub fn train_cmd(cfg: &RunConfig) -> CliResult<Outcome> {
    let data = load_data(cfg)?;
    let spec = episode_spec(cfg, cfg.episode.n_way, cfg.episode.k_shot);
    let mut model = fresh_model(cfg, spec, data.train.shape)?;
    let run_dir = prepare_run_dir(cfg)?;
    let out = train(&mut model, &data.train, &data.validation, &cfg.pattern)?;
    let ckpt = run_dir.join("model.ckpt");
    save_checkpoint(&out.best, &ckpt)?;
    write_train_log(&out.log, &run_dir.join("train_log.csv"))?;
    let best = match out.best_epoch {
        Some(e) => format!(
            "best validation accuracy {:.4} at epoch {e}",
            out.log[e - 1].val_accuracy
        ),
        None => "no epochs run".to_string(),
    };
    Ok(Outcome {
        summary: format!("train: {} epochs, {best}; checkpoint {}", out.log.len(), ckpt.display()),
        run_dir,
    })
}

fn eval_at(cfg: &RunConfig, model: &MetaModel, episodes: &[Episode]) -> CliResult<EvalSummary> {
    let (p, steps, alpha) = (&cfg.pattern, cfg.meta.steps, cfg.meta.alpha);
    Ok(match cfg.eval.precision {
        Precision::F64 => evaluate(&model.arch, &model.weights, episodes, p, steps, alpha)?,
        Precision::F32 => evaluate(&model.arch, &model.weights.cast::<f32>(), episodes, p, steps, alpha)?,
    })
}

pub fn eval_cmd(cfg: &RunConfig) -> CliResult<Outcome> {
    let path = first_checkpoint(cfg, "eval")?;
    let model = load_checkpoint(path)?;
    let data = load_data(cfg)?;
    check_shape(&model.arch, &data, path)?;
    let spec = EpisodeSpec {
        k_query: cfg.episode.k_query,
        ..model.episode
    };
    let episodes = sample_episodes(&data.test, spec, cfg.eval.episodes, &mut rng_stream(cfg.meta.seed, stream::EVAL))?;
    let summary = eval_at(cfg, &model, &episodes)?;
    let run_dir = prepare_run_dir(cfg)?;
    let mut csv = String::from("episode,accuracy\n");
    for (i, a) in summary.accuracies.iter().enumerate() {
        csv.push_str(&format!("{i},{a}\n"));
    }
    write(&run_dir.join("eval.csv"), &csv)?;
    write(
        &run_dir.join("eval_summary.csv"),
        &format!(
            "config,pattern,steps,episodes,mean,ci95\n{},\"{}\",{},{},{},{}\n",
            spec.label(),
            cfg.pattern,
            cfg.meta.steps,
            summary.n(),
            summary.mean,
            summary.ci95
        ),
    )?;
    Ok(Outcome {
        summary: format!(
            "eval: {} {} P={}: accuracy {:.4} ± {:.4} (95% CI, {} episodes)",
            spec.label(),
            cfg.pattern,
            cfg.meta.steps,
            summary.mean,
            summary.ci95,
            summary.n()
        ),
        run_dir,
    })
}

/// Models to sweep: the given checkpoints, or untrained models for every way × shot.
fn sweep_models(cfg: &RunConfig, data: &SplitDatasets) -> CliResult<Vec<(String, MetaModel)>> {
    let mut models = Vec::new();
    if cfg.checkpoints.is_empty() {
        log::warn!("no checkpoints given; sweeping untrained models");
        for &n_way in &cfg.search.ways {
            for &k_shot in &cfg.search.shots {
                let spec = episode_spec(cfg, n_way, k_shot);
                models.push((spec.label(), fresh_model(cfg, spec, data.test.shape)?));
            }
        }
    } else {
        for path in &cfg.checkpoints {
            let model = load_checkpoint(path)?;
            check_shape(&model.arch, data, path)?;
            let mut name = model.episode.label();
            if models.iter().any(|(n, _)| *n == name) {
                name = format!("{name} ({})", path.display());
            }
            models.push((name, model));
        }
    }
    Ok(models)
}

fn run_sweep(cfg: &RunConfig) -> CliResult<Sweep> {
    let data = load_data(cfg)?;
    let models = sweep_models(cfg, &data)?;
    let mut episodes = Vec::with_capacity(models.len());
    for (_, m) in &models {
        let spec = EpisodeSpec {
            k_query: cfg.episode.k_query,
            ..m.episode
        };
        let mut rng = rng_stream(cfg.meta.seed, stream::EVAL);
        episodes.push(sample_episodes(&data.test, spec, cfg.eval.episodes, &mut rng)?);
    }
    let configs: Vec<SweepConfig<'_>> = models
        .iter()
        .zip(&episodes)
        .map(|((name, m), eps)| SweepConfig {
            name: name.clone(),
            arch: &m.arch,
            weights: &m.weights,
            episodes: eps,
            alpha: cfg.meta.alpha,
        })
        .collect();
    Ok(sweep(&configs, &cfg.patterns()?, &cfg.search.steps, cfg.eval.warmup)?)
}

pub fn sweep_cmd(cfg: &RunConfig) -> CliResult<Outcome> {
    let result = run_sweep(cfg)?;
    let run_dir = prepare_run_dir(cfg)?;
    emit_report(&run_dir, &[], Some(&result), None)?;
    Ok(Outcome {
        summary: format!(
            "sweep: {} records over {} configurations; {}",
            result.records.len(),
            result.configs.len(),
            run_dir.join("sweep.csv").display()
        ),
        run_dir,
    })
}

fn read_records(path: &Path, steps: Option<&[usize]>) -> CliResult<Sweep> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut s = Sweep::from_csv(&text)?;
    if let Some(steps) = steps {
        s.records.retain(|r| steps.contains(&r.steps));
    }
    Ok(s)
}

pub fn search_cmd(cfg: &RunConfig) -> CliResult<Outcome> {
    if !cfg.search.steps.contains(&cfg.search.reference_steps) {
        return Err(CliError::config(format!(
            "reference steps {} missing from the step list {:?}",
            cfg.search.reference_steps, cfg.search.steps
        )));
    }
    let records = match &cfg.records {
        Some(path) => read_records(path, Some(&cfg.search.steps))?,
        None => run_sweep(cfg)?,
    };
    let report = select_fastest(
        &records,
        cfg.search.threshold,
        cfg.search.reference_steps,
        cfg.search.floors.as_deref(),
    )?;
    let run_dir = prepare_run_dir(cfg)?;
    emit_report(&run_dir, &[], Some(&records), Some(&report))?;
    Ok(Outcome {
        summary: format!(
            "search: {} of {} records admissible at threshold {}; selected {} at P={} ({:.2}x faster than the full pattern at P={})",
            report.admissible.len(),
            records.records.len(),
            cfg.search.threshold,
            report.selected.pattern,
            report.selected.steps,
            report.speedup,
            cfg.search.reference_steps
        ),
        run_dir,
    })
}

fn time_all<T: Scalar>(
    cfg: &RunConfig,
    label: &str,
    arch: &Architecture,
    weights: &WeightSet<T>,
    episodes: &[Episode],
) -> CliResult<Vec<TimingSample>> {
    let tasks: Vec<EpisodeTask<'_, T>> = episodes.iter().map(|e| EpisodeTask::new(arch, e)).collect();
    let mut samples = Vec::new();
    for &steps in &cfg.search.steps {
        for pattern in cfg.patterns()? {
            samples.push(time_adaptation(
                label,
                arch,
                weights,
                &tasks,
                &pattern,
                steps,
                cfg.meta.alpha,
                cfg.eval.warmup,
            )?);
        }
    }
    Ok(samples)
}

pub fn bench_cmd(cfg: &RunConfig) -> CliResult<Outcome> {
    let data = load_data(cfg)?;
    let model = match cfg.checkpoints.first() {
        Some(path) => {
            let m = load_checkpoint(path)?;
            check_shape(&m.arch, &data, path)?;
            m
        }
        None => fresh_model(cfg, episode_spec(cfg, cfg.episode.n_way, cfg.episode.k_shot), data.test.shape)?,
    };
    let spec = EpisodeSpec {
        k_query: cfg.episode.k_query,
        ..model.episode
    };
    let episodes = sample_episodes(&data.test, spec, cfg.eval.episodes, &mut rng_stream(cfg.meta.seed, stream::BENCH))?;
    let label = spec.label();
    let samples = match cfg.eval.precision {
        Precision::F64 => time_all(cfg, &label, &model.arch, &model.weights, &episodes)?,
        Precision::F32 => time_all(cfg, &label, &model.arch, &model.weights.cast::<f32>(), &episodes)?,
    };
    let run_dir = prepare_run_dir(cfg)?;
    emit_report(&run_dir, &samples, None, None)?;
    let fastest = samples
        .iter()
        .map(|s| (s.summary().mean, s))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(t, s)| format!("; fastest {} at P={} ({t:.3} ms)", s.pattern, s.steps))
        .unwrap_or_default();
    Ok(Outcome {
        summary: format!("bench: {} timings over {} episodes{fastest}", samples.len(), episodes.len()),
        run_dir,
    })
}

pub fn report_cmd(cfg: &RunConfig) -> CliResult<Outcome> {
    let path = cfg
        .records
        .as_ref()
        .ok_or_else(|| CliError::usage("report requires --records <PATH>"))?;
    let records = read_records(path, None)?;
    let has_reference = records
        .records
        .iter()
        .any(|r| r.steps == cfg.search.reference_steps && r.pattern.is_full());
    let report = if has_reference {
        Some(select_fastest(
            &records,
            cfg.search.threshold,
            cfg.search.reference_steps,
            cfg.search.floors.as_deref(),
        )?)
    } else {
        log::warn!(
            "no full-pattern record at P={}; skipping the threshold search",
            cfg.search.reference_steps
        );
        None
    };
    let run_dir = prepare_run_dir(cfg)?;
    let files = emit_report(&run_dir, &[], Some(&records), report.as_ref())?;
    Ok(Outcome {
        summary: format!("report: {} files in {}", files.len(), run_dir.display()),
        run_dir,
    })
}
