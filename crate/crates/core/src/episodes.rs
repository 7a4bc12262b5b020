//! Class-labelled image sets and N-way K-shot episode sampling.
//!
//! Pixels are kept as bytes and scaled to `[0, 1]` when an episode is materialised.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fs;
use std::path::Path;

use lambda_tensor::TensorData;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR_RECORD: usize = 2 + 3072;
pub const CIFAR_CLASSES: usize = 100;

const CIFAR100_FINE_LABELS: [&str; CIFAR_CLASSES] = [
    "apple", "aquarium_fish", "baby", "bear", "beaver", "bed", "bee", "beetle", "bicycle",
    "bottle", "bowl", "boy", "bridge", "bus", "butterfly", "camel", "can", "castle",
    "caterpillar", "cattle", "chair", "chimpanzee", "clock", "cloud", "cockroach", "couch",
    "crab", "crocodile", "cup", "dinosaur", "dolphin", "elephant", "flatfish", "forest", "fox",
    "girl", "hamster", "house", "kangaroo", "keyboard", "lamp", "lawn_mower", "leopard", "lion",
    "lizard", "lobster", "man", "maple_tree", "motorcycle", "mountain", "mouse", "mushroom",
    "oak_tree", "orange", "orchid", "otter", "palm_tree", "pear", "pickup_truck", "pine_tree",
    "plain", "plate", "poppy", "porcupine", "possum", "rabbit", "raccoon", "ray", "road",
    "rocket", "rose", "sea", "seal", "shark", "shrew", "skunk", "skyscraper", "snail", "snake",
    "spider", "squirrel", "streetcar", "sunflower", "sweet_pepper", "table", "tank",
    "telephone", "television", "tiger", "tractor", "train", "trout", "tulip", "turtle",
    "wardrobe", "whale", "willow_tree", "wolf", "woman", "worm",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRecord {
    pub class_id: usize,
    pub name: String,
    /// Each image is `C·H·W` bytes, channel planes in row-major order.
    pub images: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassDataset {
    pub split: Option<Split>,
    pub shape: [usize; 3],
    pub classes: Vec<ClassRecord>,
}

impl ClassDataset {
    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.image_len();
        let mut ids = HashSet::new();
        for class in &self.classes {
            if !ids.insert(class.class_id) {
                return Err(Error::Dataset(format!("duplicate class id {}", class.class_id)));
            }
            if let Some(img) = class.images.iter().find(|img| img.len() != len) {
                return Err(Error::Dataset(format!(
                    "class {} has an image of {} bytes, expected {len}",
                    class.name,
                    img.len()
                )));
            }
        }
        Ok(())
    }

    /// Restricts to the first `n` images of each class.
    pub fn truncate_images(&mut self, n: usize) {
        for class in &mut self.classes {
            class.images.truncate(n);
        }
    }
}

/// Decodes CIFAR-100 binary records into `(fine_label, image)` pairs.
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<Vec<(usize, Vec<u8>)>> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: whole as u64,
            detail: format!(
                "file length {} is not a multiple of {CIFAR_RECORD}; trailing partial record",
                bytes.len()
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let fine = rec[1] as usize;
            if fine >= CIFAR_CLASSES {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    offset: (i * CIFAR_RECORD + 1) as u64,
                    detail: format!("fine label {fine} is not below {CIFAR_CLASSES}"),
                });
            }
            Ok((fine, rec[2..].to_vec()))
        })
        .collect()
}

/// Encodes `(coarse, fine, image)` records in the CIFAR-100 binary layout.
pub fn encode_cifar_records(records: &[(u8, u8, &[u8])]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD);
    for &(coarse, fine, image) in records {
        assert_eq!(image.len(), 3072, "CIFAR images are 3072 bytes");
        out.push(coarse);
        out.push(fine);
        out.extend_from_slice(image);
    }
    out
}

/// Reads `train.bin` and `test.bin` (either may be absent, not both) from `dir` and
/// pools them per fine class. Class names come from `fine_label_names.txt` when present.
pub fn load_cifar100(dir: &Path) -> Result<ClassDataset> {
    let names = match fs::read_to_string(dir.join("fine_label_names.txt")) {
        Ok(text) => {
            let names: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            if names.len() != CIFAR_CLASSES {
                return Err(Error::Dataset(format!(
                    "fine_label_names.txt lists {} names, expected {CIFAR_CLASSES}",
                    names.len()
                )));
            }
            names
        }
        Err(_) => CIFAR100_FINE_LABELS.iter().map(|s| s.to_string()).collect(),
    };
    let mut classes: Vec<ClassRecord> = names
        .into_iter()
        .enumerate()
        .map(|(class_id, name)| ClassRecord {
            class_id,
            name,
            images: Vec::new(),
        })
        .collect();
    let mut found = false;
    for file in ["train.bin", "test.bin"] {
        let path = dir.join(file);
        if !path.exists() {
            continue;
        }
        found = true;
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        for (fine, image) in parse_cifar_records(&bytes, &path)? {
            classes[fine].images.push(image);
        }
        log::info!("loaded {}", path.display());
    }
    if !found {
        return Err(Error::Dataset(format!(
            "no train.bin or test.bin in {}",
            dir.display()
        )));
    }
    Ok(ClassDataset {
        split: None,
        shape: CIFAR_SHAPE,
        classes,
    })
}

/// Class lists per split, in manifest order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    /// Headings are `train:`, `validation:` (or `val:`), `test:`, optionally bracketed
    /// as `[train]`. Entries are class names or numeric ids, one per line; `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = Self::default();
        let mut current: Option<Split> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let heading = line
                .strip_suffix(':')
                .or_else(|| line.strip_prefix('[').and_then(|l| l.strip_suffix(']')))
                .map(|h| h.trim().to_ascii_lowercase());
            if let Some(h) = heading {
                current = Some(match h.as_str() {
                    "train" => Split::Train,
                    "val" | "validation" => Split::Validation,
                    "test" => Split::Test,
                    other => {
                        return Err(Error::Dataset(format!(
                            "manifest line {}: unknown heading {other:?}",
                            lineno + 1
                        )))
                    }
                });
                continue;
            }
            let list = match current {
                Some(Split::Train) => &mut manifest.train,
                Some(Split::Validation) => &mut manifest.validation,
                Some(Split::Test) => &mut manifest.test,
                None => {
                    return Err(Error::Dataset(format!(
                        "manifest line {}: class {line:?} before any heading",
                        lineno + 1
                    )))
                }
            };
            list.push(line.to_string());
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDatasets {
    pub train: ClassDataset,
    pub validation: ClassDataset,
    pub test: ClassDataset,
    /// Non-fatal findings, e.g. split sizes other than 64/16/20.
    pub warnings: Vec<String>,
}

/// Distributes the classes of `raw` over the three splits listed in `manifest`.
pub fn apply_split(raw: ClassDataset, manifest: &SplitManifest) -> Result<SplitDatasets> {
    let by_name: BTreeMap<&str, usize> = raw
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.name.as_str(), i))
        .collect();
    let by_id: BTreeMap<usize, usize> = raw
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.class_id, i))
        .collect();
    let mut owner: BTreeMap<usize, Split> = BTreeMap::new();
    let mut picks: Vec<(Split, Vec<usize>)> = Vec::new();
    for (split, entries) in [
        (Split::Train, &manifest.train),
        (Split::Validation, &manifest.validation),
        (Split::Test, &manifest.test),
    ] {
        let mut idx = Vec::with_capacity(entries.len());
        for entry in entries {
            let i = by_name
                .get(entry.as_str())
                .copied()
                .or_else(|| entry.parse::<usize>().ok().and_then(|id| by_id.get(&id).copied()))
                .ok_or_else(|| Error::Dataset(format!("unknown class {entry:?} in split manifest")))?;
            if let Some(prev) = owner.insert(i, split) {
                return Err(Error::Dataset(format!(
                    "class {:?} listed more than once (in {prev:?} and {split:?})",
                    raw.classes[i].name
                )));
            }
            idx.push(i);
        }
        picks.push((split, idx));
    }
    let mut warnings = Vec::new();
    for ((split, idx), expected) in picks.iter().zip([64, 16, 20]) {
        if idx.len() != expected {
            let msg = format!("{split:?} split has {} classes, expected {expected}", idx.len());
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let mut slots: Vec<Option<ClassRecord>> = raw.classes.into_iter().map(Some).collect();
    let mut take = |split: Split, idx: &[usize]| ClassDataset {
        split: Some(split),
        shape: raw.shape,
        classes: idx.iter().map(|&i| slots[i].take().expect("unique")).collect(),
    };
    Ok(SplitDatasets {
        train: take(Split::Train, &picks[0].1),
        validation: take(Split::Validation, &picks[1].1),
        test: take(Split::Test, &picks[2].1),
        warnings,
    })
}

/// Partitions classes in order into consecutive `counts[0] / counts[1] / counts[2]` blocks.
pub fn partition_classes(ds: ClassDataset, counts: [usize; 3]) -> Result<SplitDatasets> {
    let total: usize = counts.iter().sum();
    if total > ds.classes.len() {
        return Err(Error::Dataset(format!(
            "cannot split {} classes into {counts:?}",
            ds.classes.len()
        )));
    }
    let mut rest = ds.classes.into_iter();
    let mut take = |split: Split, n: usize| ClassDataset {
        split: Some(split),
        shape: ds.shape,
        classes: rest.by_ref().take(n).collect(),
    };
    Ok(SplitDatasets {
        train: take(Split::Train, counts[0]),
        validation: take(Split::Validation, counts[1]),
        test: take(Split::Test, counts[2]),
        warnings: Vec::new(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub k_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize) -> Self {
        Self {
            n_way,
            k_shot,
            k_query: 15,
        }
    }

    /// `"1-shot 5-way"`.
    pub fn label(&self) -> String {
        format!("{}-shot {}-way", self.k_shot, self.n_way)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.k_query == 0 {
            return Err(Error::Config(format!(
                "episode needs n_way ≥ 2, k_shot ≥ 1, k_query ≥ 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One N-way task: support and query sets in class-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    /// `(N·K, C, H, W)` in `[0, 1]`.
    pub support_x: TensorData<f64>,
    pub support_y: Vec<usize>,
    pub query_x: TensorData<f64>,
    pub query_y: Vec<usize>,
    /// Episode label → original class id.
    pub class_map: Vec<usize>,
    /// `(class_id, image index)` of each support / query image.
    pub support_ids: Vec<(usize, usize)>,
    pub query_ids: Vec<(usize, usize)>,
}

pub fn sample_episode(ds: &ClassDataset, spec: EpisodeSpec, rng: &mut impl Rng) -> Result<Episode> {
    spec.validate()?;
    if ds.classes.len() < spec.n_way {
        return Err(Error::Dataset(format!(
            "{}-way episode needs {} classes, dataset has {}",
            spec.n_way,
            spec.n_way,
            ds.classes.len()
        )));
    }
    let per_class = spec.k_shot + spec.k_query;
    if let Some(c) = ds.classes.iter().find(|c| c.images.len() < per_class) {
        return Err(Error::Dataset(format!(
            "class {:?} has {} images, episode needs {per_class}",
            c.name,
            c.images.len()
        )));
    }
    let chosen = sample(rng, ds.classes.len(), spec.n_way).into_vec();
    let mut episode = Episode {
        spec,
        support_x: TensorData::zeros(&[0]),
        support_y: Vec::new(),
        query_x: TensorData::zeros(&[0]),
        query_y: Vec::new(),
        class_map: Vec::with_capacity(spec.n_way),
        support_ids: Vec::new(),
        query_ids: Vec::new(),
    };
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot * ds.image_len());
    let mut query = Vec::with_capacity(spec.n_way * spec.k_query * ds.image_len());
    for (label, &ci) in chosen.iter().enumerate() {
        let class = &ds.classes[ci];
        episode.class_map.push(class.class_id);
        let picks = sample(rng, class.images.len(), per_class).into_vec();
        for (j, &img) in picks.iter().enumerate() {
            let pixels = class.images[img].iter().map(|&b| f64::from(b) / 255.0);
            if j < spec.k_shot {
                support.extend(pixels);
                episode.support_y.push(label);
                episode.support_ids.push((class.class_id, img));
            } else {
                query.extend(pixels);
                episode.query_y.push(label);
                episode.query_ids.push((class.class_id, img));
            }
        }
    }
    let [c, h, w] = ds.shape;
    episode.support_x = TensorData::new(&[spec.n_way * spec.k_shot, c, h, w], support)?;
    episode.query_x = TensorData::new(&[spec.n_way * spec.k_query, c, h, w], query)?;
    Ok(episode)
}

/// Parameters of a procedurally generated class family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub shape: [usize; 3],
    /// 0 keeps classes far apart; 1 collapses them onto one shared prototype.
    pub difficulty: f64,
    pub images_per_class: usize,
}

#[derive(Clone, Copy, Debug)]
struct ClassLook {
    hue: f64,
    gradient_angle: f64,
    stripe_angle: f64,
    stripe_freq: f64,
    blob_x: f64,
    blob_y: f64,
}

impl ClassLook {
    fn random(rng: &mut impl Rng, hue: f64) -> Self {
        Self {
            hue,
            gradient_angle: rng.random_range(0.0..2.0 * PI),
            stripe_angle: rng.random_range(0.0..PI),
            stripe_freq: rng.random_range(1.0..3.5),
            blob_x: rng.random_range(0.25..0.75),
            blob_y: rng.random_range(0.25..0.75),
        }
    }

    fn lerp(&self, other: &Self, t: f64) -> Self {
        let mix = |a: f64, b: f64| a + (b - a) * t;
        Self {
            hue: mix(self.hue, other.hue),
            gradient_angle: mix(self.gradient_angle, other.gradient_angle),
            stripe_angle: mix(self.stripe_angle, other.stripe_angle),
            stripe_freq: mix(self.stripe_freq, other.stripe_freq),
            blob_x: mix(self.blob_x, other.blob_x),
            blob_y: mix(self.blob_y, other.blob_y),
        }
    }
}

fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Classes of colour gradients, oriented stripes and a soft blob, with per-image jitter
/// (stripe phase, blob position, hue) and pixel noise. Reproducible for a given rng state.
pub fn synth_taskspace(spec: &SynthSpec, rng: &mut impl Rng) -> Result<ClassDataset> {
    if spec.n_classes < 2 {
        return Err(Error::Config("synthetic taskspace needs at least 2 classes".into()));
    }
    if !(0.0..=1.0).contains(&spec.difficulty) {
        return Err(Error::Config(format!(
            "difficulty must lie in [0, 1], got {}",
            spec.difficulty
        )));
    }
    let [channels, h, w] = spec.shape;
    if channels == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("bad image shape {:?}", spec.shape)));
    }
    let d = spec.difficulty;
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    let hue0: f64 = rng.random();
    let prototype = ClassLook::random(rng, 0.5);
    let noise = Normal::new(0.0, 0.03 + 0.3 * d).expect("finite std");
    let mut classes = Vec::with_capacity(spec.n_classes);
    for class_id in 0..spec.n_classes {
        let own = ClassLook::random(rng, (hue0 + class_id as f64 * golden).fract());
        let look = own.lerp(&prototype, d);
        let mut images = Vec::with_capacity(spec.images_per_class);
        for _ in 0..spec.images_per_class {
            let phase = rng.random_range(0.0..2.0 * PI);
            let bx = look.blob_x + rng.random_range(-0.05..0.05);
            let by = look.blob_y + rng.random_range(-0.05..0.05);
            let rgb = hue_to_rgb(look.hue + rng.random_range(-0.02..0.02));
            let (gc, gs) = (look.gradient_angle.cos(), look.gradient_angle.sin());
            let (sc, ss) = (look.stripe_angle.cos(), look.stripe_angle.sin());
            let mut img = vec![0u8; channels * h * w];
            for y in 0..h {
                let v = (y as f64 + 0.5) / h as f64;
                for x in 0..w {
                    let u = (x as f64 + 0.5) / w as f64;
                    let (cu, cv) = (u - 0.5, v - 0.5);
                    let grad = 0.5 + (cu * gc + cv * gs) * FRAC_1_SQRT_2;
                    let stripe =
                        0.5 + 0.5 * (2.0 * PI * look.stripe_freq * (cu * sc + cv * ss) + phase).sin();
                    let blob = (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * 0.15 * 0.15)).exp();
                    let intensity = 0.4 * grad + 0.3 * stripe + 0.3 * blob;
                    for ch in 0..channels {
                        let tint = rgb[ch % 3];
                        let value = tint * intensity + (1.0 - tint) * 0.2 * (1.0 - intensity)
                            + noise.sample(rng);
                        img[(ch * h + y) * w + x] = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
            images.push(img);
        }
        classes.push(ClassRecord {
            class_id,
            name: format!("synth-{class_id:03}"),
            images,
        });
    }
    Ok(ClassDataset {
        split: None,
        shape: spec.shape,
        classes,
    })
}
