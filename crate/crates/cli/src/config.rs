use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use lambda_maml::maml::MetaConfig;
use lambda_maml::pattern::{enumerate_patterns, trivial_patterns, LambdaPattern};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const OUT_DIR_ENV: &str = "LAMBDA_MAML_OUT";
pub const BLOCKS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Cifar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Source,
    /// Directory holding `train.bin` / `test.bin`.
    pub cifar_dir: Option<PathBuf>,
    /// Class split list; required for the cifar source.
    pub manifest: Option<PathBuf>,
    pub classes: usize,
    pub image_size: usize,
    pub images_per_class: usize,
    pub difficulty: f64,
    /// Train / validation / test class counts of the synthetic source.
    pub split: [usize; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: Source::Synthetic,
            cifar_dir: None,
            manifest: None,
            classes: 32,
            image_size: 16,
            images_per_class: 40,
            difficulty: 0.0,
            split: [20, 6, 6],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            k_query: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub filters: usize,
    pub feature_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            filters: 32,
            feature_dim: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub threshold: f64,
    pub reference_steps: usize,
    pub steps: Vec<usize>,
    /// `;`-separated pattern literals or the keywords `all`, `trivial`, `full`.
    pub patterns: String,
    pub floors: Option<Vec<f64>>,
    /// Untrained configurations: every way paired with every shot.
    pub ways: Vec<usize>,
    pub shots: Vec<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            threshold: 0.07,
            reference_steps: 10,
            steps: vec![1, 3, 5, 10],
            patterns: "all".into(),
            floors: None,
            ways: vec![2, 5],
            shots: vec![1, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub warmup: usize,
    pub precision: Precision,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 400,
            warmup: lambda_maml::bench::DEFAULT_WARMUP,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub out_dir: PathBuf,
    pub pattern: LambdaPattern,
    pub checkpoints: Vec<PathBuf>,
    pub records: Option<PathBuf>,
    pub data: DataConfig,
    pub episode: EpisodeConfig,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            out_dir: PathBuf::from("runs"),
            pattern: LambdaPattern::full(BLOCKS),
            checkpoints: Vec::new(),
            records: None,
            data: DataConfig::default(),
            episode: EpisodeConfig::default(),
            model: ModelConfig::default(),
            meta: MetaConfig::default(),
            search: SearchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Flags shared by every command. Each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// TOML run config; flags win over its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root for run directories (also LAMBDA_MAML_OUT).
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,

    /// Use the generated task space.
    #[arg(long, conflicts_with = "cifar")]
    pub synthetic: bool,
    /// CIFAR-100 binary directory.
    #[arg(long, value_name = "DIR")]
    pub cifar: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub synth_classes: Option<usize>,
    #[arg(long)]
    pub synth_images: Option<usize>,
    #[arg(long)]
    pub difficulty: Option<f64>,
    /// Train,validation,test class counts of the synthetic source.
    #[arg(long, value_delimiter = ',')]
    pub synth_split: Option<Vec<usize>>,

    #[arg(long)]
    pub n_way: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub k_query: Option<usize>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,

    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Adaptation steps; a list for sweep, search and bench.
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub meta_batch: Option<usize>,
    #[arg(long)]
    pub tasks_per_epoch: Option<usize>,
    #[arg(long)]
    pub val_episodes: Option<usize>,
    #[arg(long)]
    pub first_order: bool,

    /// Layer pattern such as 1,0,1,1,1.
    #[arg(long)]
    pub pattern: Option<String>,
    /// Patterns or the keywords all, trivial, full, separated by ';'.
    #[arg(long)]
    pub patterns: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub reference_steps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub floors: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub ways: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,

    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Meta-trained model; repeat for several configurations.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Vec<PathBuf>,
    /// Sweep records CSV.
    #[arg(long, value_name = "PATH")]
    pub records: Option<PathBuf>,
}

/// Loads the config file (if any), then applies the flags.
pub fn resolve(command: &str, o: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => load(path)?,
        None => RunConfig::default(),
    };
    cfg.command = command.to_string();
    if let Some(v) = &o.out_dir {
        cfg.out_dir = v.clone();
    } else if let Some(v) = std::env::var_os(OUT_DIR_ENV) {
        cfg.out_dir = PathBuf::from(v);
    }
    set(&mut cfg.meta.seed, o.seed);

    if o.synthetic {
        cfg.data.source = Source::Synthetic;
    }
    if let Some(dir) = &o.cifar {
        cfg.data.source = Source::Cifar;
        cfg.data.cifar_dir = Some(dir.clone());
    }
    if o.manifest.is_some() {
        cfg.data.manifest = o.manifest.clone();
    }
    set(&mut cfg.data.image_size, o.image_size);
    set(&mut cfg.data.classes, o.synth_classes);
    set(&mut cfg.data.images_per_class, o.synth_images);
    set(&mut cfg.data.difficulty, o.difficulty);
    if let Some(s) = &o.synth_split {
        match s.as_slice() {
            &[a, b, c] => cfg.data.split = [a, b, c],
            _ => return Err(CliError::config("--synth-split takes three counts: train,validation,test")),
        }
    }

    set(&mut cfg.episode.n_way, o.n_way);
    set(&mut cfg.episode.k_shot, o.k_shot);
    set(&mut cfg.episode.k_query, o.k_query);
    set(&mut cfg.model.filters, o.filters);
    if o.feature_dim.is_some() {
        cfg.model.feature_dim = o.feature_dim;
    }

    set(&mut cfg.meta.alpha, o.alpha);
    set(&mut cfg.meta.beta, o.beta);
    set(&mut cfg.meta.epochs, o.epochs);
    set(&mut cfg.meta.meta_batch, o.meta_batch);
    set(&mut cfg.meta.tasks_per_epoch, o.tasks_per_epoch);
    set(&mut cfg.meta.val_episodes, o.val_episodes);
    if o.first_order {
        cfg.meta.first_order = true;
    }
    if let Some(steps) = &o.steps {
        if matches!(command, "train" | "eval") {
            match steps.as_slice() {
                [p] => cfg.meta.steps = *p,
                _ => return Err(CliError::config(format!("{command} takes a single --steps value"))),
            }
        } else {
            cfg.search.steps = steps.clone();
        }
    }

    if let Some(p) = &o.pattern {
        cfg.pattern = p.parse()?;
    }
    if let Some(p) = &o.patterns {
        cfg.search.patterns = p.clone();
    }
    set(&mut cfg.search.threshold, o.threshold);
    set(&mut cfg.search.reference_steps, o.reference_steps);
    if o.floors.is_some() {
        cfg.search.floors = o.floors.clone();
    }
    if let Some(w) = &o.ways {
        cfg.search.ways = w.clone();
    }
    if let Some(s) = &o.shots {
        cfg.search.shots = s.clone();
    }

    set(&mut cfg.eval.episodes, o.episodes);
    set(&mut cfg.eval.warmup, o.warmup);
    set(&mut cfg.eval.precision, o.precision);
    if !o.checkpoint.is_empty() {
        cfg.checkpoints = o.checkpoint.clone();
    }
    if o.records.is_some() {
        cfg.records = o.records.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn load(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        self.meta.validate()?;
        self.pattern.check_blocks(BLOCKS)?;
        // the config file stores the seed as a TOML integer
        if i64::try_from(self.meta.seed).is_err() {
            return Err(CliError::config(format!("seed {} exceeds {}", self.meta.seed, i64::MAX)));
        }
        if self.model.filters == 0 {
            return Err(CliError::config("filters must be positive"));
        }
        if self.data.image_size < 16 {
            return Err(CliError::config("image size must be at least 16 for four pooling stages"));
        }
        if !(0.0..=1.0).contains(&self.data.difficulty) {
            return Err(CliError::config("difficulty must lie in [0, 1]"));
        }
        if self.search.steps.is_empty() || self.search.steps.contains(&0) {
            return Err(CliError::config("step list must be non-empty and positive"));
        }
        if self.search.threshold.is_nan() || self.search.threshold < 0.0 {
            return Err(CliError::config("threshold must be non-negative"));
        }
        if self.search.ways.is_empty() || self.search.shots.is_empty() {
            return Err(CliError::config("ways and shots lists must be non-empty"));
        }
        self.patterns()?;
        Ok(())
    }

    pub fn patterns(&self) -> CliResult<Vec<LambdaPattern>> {
        let mut patterns: Vec<LambdaPattern> = Vec::new();
        for item in self.search.patterns.split(';').map(str::trim) {
            let group = match item {
                "all" => enumerate_patterns(BLOCKS),
                "trivial" => trivial_patterns(BLOCKS),
                "full" => vec![LambdaPattern::full(BLOCKS)],
                literal => vec![literal.parse()?],
            };
            for p in group {
                p.check_blocks(BLOCKS)?;
                if !patterns.contains(&p) {
                    patterns.push(p);
                }
            }
        }
        Ok(patterns)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::config(format!("cannot serialise config: {e}")))
    }
}
