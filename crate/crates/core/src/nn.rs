//! Layer specifications, weight sets and the functional CNN4 forward pass.
//!
//! The forward pass takes weights as arguments rather than reading them from the model,
//! so adapted per-task weights can be substituted without touching the meta-weights.
//!
//! Batch normalisation always normalises with the statistics of the batch being
//! processed, in both [`ForwardMode::Train`] and [`ForwardMode::Eval`]. There are no
//! running statistics: every episode is normalised transductively.

use lambda_tensor::{matmul_t, Scalar, Tape, Tensor, TensorData};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const CONV_KERNEL: usize = 3;
pub const CONV_PAD: usize = 1;

/// One of the `B` blocks the adaptation pattern addresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// 3×3 convolution (padding 1, stride 1), batch norm, ReLU, 2×2 max-pool.
    ConvBlock {
        in_channels: usize,
        out_channels: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// `(suffix, shape)` for every tensor of the layer, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::ConvBlock {
                in_channels,
                out_channels,
            } => vec![
                (
                    "conv.weight",
                    vec![out_channels, in_channels, CONV_KERNEL, CONV_KERNEL],
                ),
                ("conv.bias", vec![out_channels]),
                ("bn.gamma", vec![out_channels]),
                ("bn.beta", vec![out_channels]),
            ],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                ("weight", vec![out_features, in_features]),
                ("bias", vec![out_features]),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cnn4Config {
    pub filters: usize,
    pub n_way: usize,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    /// Overrides the linear layer's input width. The flattened feature map of a 32×32
    /// input is `filters·2·2`; a head sized for 800 features needs this override.
    pub feature_dim: Option<usize>,
}

impl Cnn4Config {
    pub fn new(filters: usize, n_way: usize, input_shape: [usize; 3]) -> Self {
        Self {
            filters,
            n_way,
            input_shape,
            feature_dim: None,
        }
    }
}

/// Ordered list of conv-blocks followed by exactly one linear layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Location of one tensor inside a [`WeightSet`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    /// 0-based block index (0 = nearest the input).
    pub layer: usize,
    pub shape: Vec<usize>,
}

impl Architecture {
    pub fn cnn4(cfg: &Cnn4Config) -> Result<Self> {
        Self::conv_net(cfg.input_shape, cfg.filters, 4, cfg.n_way, cfg.feature_dim)
    }

    /// `blocks` conv-blocks of `filters` channels and a linear head.
    pub fn conv_net(
        input_shape: [usize; 3],
        filters: usize,
        blocks: usize,
        n_way: usize,
        feature_dim: Option<usize>,
    ) -> Result<Self> {
        if filters == 0 {
            return Err(Error::Config("filters must be at least 1".into()));
        }
        if n_way < 2 {
            return Err(Error::Config(format!("n_way must be at least 2, got {n_way}")));
        }
        let [channels, h, w] = input_shape;
        if channels == 0 {
            return Err(Error::Config("input must have at least one channel".into()));
        }
        let (mut fh, mut fw) = (h, w);
        for b in 0..blocks {
            if fh < 2 || fw < 2 {
                return Err(Error::Config(format!(
                    "input {h}×{w} too small: feature map is {fh}×{fw} before pool {}",
                    b + 1
                )));
            }
            fh /= 2;
            fw /= 2;
        }
        let mut layers = Vec::with_capacity(blocks + 1);
        let mut in_ch = channels;
        for _ in 0..blocks {
            layers.push(LayerSpec::ConvBlock {
                in_channels: in_ch,
                out_channels: filters,
            });
            in_ch = filters;
        }
        let flat = if blocks == 0 { channels * h * w } else { filters * fh * fw };
        layers.push(LayerSpec::Linear {
            in_features: feature_dim.unwrap_or(flat),
            out_features: n_way,
        });
        Ok(Self {
            input_shape,
            layers,
        })
    }

    /// Number of blocks `B`, i.e. the pattern length.
    pub fn num_blocks(&self) -> usize {
        self.layers.len()
    }

    pub fn n_way(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features, .. }) => *out_features,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.layers.iter().map(LayerSpec::param_count).collect()
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        let last = self.layers.len().saturating_sub(1);
        let mut slots = Vec::new();
        for (layer, spec) in self.layers.iter().enumerate() {
            let prefix = if layer == last && matches!(spec, LayerSpec::Linear { .. }) {
                "linear".to_string()
            } else {
                format!("block{}", layer + 1)
            };
            for (suffix, shape) in spec.param_shapes() {
                slots.push(ParamSlot {
                    name: format!("{prefix}.{suffix}"),
                    layer,
                    shape,
                });
            }
        }
        slots
    }

    /// Input shape `(C, H, W)` seen by each conv-block, then `(F, 1, 1)` for the head.
    pub fn layer_input_shapes(&self) -> Vec<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input_shape;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            match *spec {
                LayerSpec::ConvBlock { out_channels, .. } => {
                    shapes.push([c, h, w]);
                    c = out_channels;
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::Linear { in_features, .. } => shapes.push([in_features, 1, 1]),
            }
        }
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        let Some((head, body)) = self.layers.split_last() else {
            return Err(Error::Config("architecture has no layers".into()));
        };
        if !matches!(head, LayerSpec::Linear { .. })
            || body.iter().any(|l| !matches!(l, LayerSpec::ConvBlock { .. }))
        {
            return Err(Error::Config(
                "expected conv-blocks followed by one linear layer".into(),
            ));
        }
        Ok(())
    }
}

/// One named tensor of a [`WeightSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub layer: usize,
    pub data: TensorData<T>,
}

/// Plain (tape-free) weights ordered as [`Architecture::param_slots`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<T = f64> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> WeightSet<T> {
    pub fn new(arch: &Architecture, data: Vec<TensorData<T>>) -> Result<Self> {
        let slots = arch.param_slots();
        if slots.len() != data.len() {
            return Err(Error::Config(format!(
                "architecture has {} tensors, got {}",
                slots.len(),
                data.len()
            )));
        }
        let mut params = Vec::with_capacity(slots.len());
        for (slot, d) in slots.into_iter().zip(data) {
            if d.shape() != slot.shape.as_slice() {
                return Err(Error::Config(format!(
                    "{} expects shape {:?}, got {:?}",
                    slot.name,
                    slot.shape,
                    d.shape()
                )));
            }
            params.push(Param {
                name: slot.name,
                layer: slot.layer,
                data: d,
            });
        }
        Ok(Self { params })
    }

    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            params: arch
                .param_slots()
                .into_iter()
                .map(|s| Param {
                    data: TensorData::zeros(&s.shape),
                    name: s.name,
                    layer: s.layer,
                })
                .collect(),
        }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TensorData<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.data)
    }

    /// Block index of every tensor.
    pub fn layer_of(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.layer).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn layer_param_counts(&self) -> Vec<usize> {
        let blocks = self.params.iter().map(|p| p.layer + 1).max().unwrap_or(0);
        let mut counts = vec![0; blocks];
        for p in &self.params {
            counts[p.layer] += p.data.len();
        }
        counts
    }

    pub fn data(&self) -> Vec<TensorData<T>> {
        self.params.iter().map(|p| p.data.clone()).collect()
    }

    /// Untracked tensors.
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| Tensor::from(p.data.clone())).collect()
    }

    /// Registers every tensor as a leaf of `tape`.
    pub fn track(&self, tape: &Tape<T>) -> Result<Vec<Tensor<T>>> {
        self.params
            .iter()
            .map(|p| tape.var(p.data.clone()).map_err(Error::from))
            .collect()
    }

    /// Same names and layout with new values (detached from any tape).
    pub fn with_tensors(&self, tensors: &[Tensor<T>]) -> Result<Self> {
        self.with_data(tensors.iter().map(|t| t.data().clone()).collect())
    }

    pub fn with_data(&self, data: Vec<TensorData<T>>) -> Result<Self> {
        if data.len() != self.params.len() {
            return Err(Error::Config(format!(
                "weight set has {} tensors, got {}",
                self.params.len(),
                data.len()
            )));
        }
        let mut params = self.params.clone();
        for (p, d) in params.iter_mut().zip(data) {
            if d.shape() != p.data.shape() {
                return Err(Error::Config(format!(
                    "{} expects shape {:?}, got {:?}",
                    p.name,
                    p.data.shape(),
                    d.shape()
                )));
            }
            p.data = d;
        }
        Ok(Self { params })
    }

    pub fn cast<U: Scalar>(&self) -> WeightSet<U> {
        WeightSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    layer: p.layer,
                    data: p.data.cast(),
                })
                .collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.data.bit_eq(&b.data))
    }
}

/// Truncated normal (±2σ) with std 0.02 for kernels and linear weights, zero biases,
/// unit BN scale, zero BN shift.
pub fn init_weights(arch: &Architecture, rng: &mut impl Rng) -> WeightSet<f64> {
    let params = arch
        .param_slots()
        .into_iter()
        .map(|slot| {
            let n: usize = slot.shape.iter().product();
            let values = if slot.name.ends_with("weight") {
                (0..n).map(|_| truncated_normal(rng) * INIT_STD).collect()
            } else if slot.name.ends_with("gamma") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            Param {
                data: TensorData::new(&slot.shape, values).expect("slot shape"),
                name: slot.name,
                layer: slot.layer,
            }
        })
        .collect();
    WeightSet { params }
}

fn truncated_normal(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z;
        }
    }
}

pub fn build_cnn4(cfg: &Cnn4Config, rng: &mut impl Rng) -> Result<(Architecture, WeightSet<f64>)> {
    let arch = Architecture::cnn4(cfg)?;
    let weights = init_weights(&arch, rng);
    Ok((arch, weights))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    /// Same computation as `Train`: batch norm still uses the current batch statistics.
    Eval,
}

/// Per-channel normalisation over `(N, H, W)` with the batch's own statistics
/// (biased variance), followed by scale and shift.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    let count = shape.iter().product::<usize>() / shape[1];
    let inv_count = T::one() / T::from_usize(count).expect("count");
    let mean = x.reduce_axis1()?.scale(inv_count)?;
    let centered = x.sub(&mean.broadcast_axis1(&shape)?)?;
    let var = centered.mul(&centered)?.reduce_axis1()?.scale(inv_count)?;
    let inv_std = var.add_scalar(T::from_f64_lossy(BN_EPS))?.powf(T::from_f64_lossy(-0.5))?;
    let normalized = centered.mul(&inv_std.broadcast_axis1(&shape)?)?;
    Ok(normalized
        .mul(&gamma.broadcast_axis1(&shape)?)?
        .add(&beta.broadcast_axis1(&shape)?)?)
}

/// `Φ(weights, x)`: logits of shape `(batch, n_way)`.
///
/// `params` must follow [`Architecture::param_slots`] order and may be tracked on a tape.
pub fn forward<T: Scalar>(
    arch: &Architecture,
    params: &[Tensor<T>],
    x: &Tensor<T>,
    _mode: ForwardMode,
) -> Result<Tensor<T>> {
    let expected = arch.param_slots().len();
    if params.len() != expected {
        return Err(Error::Config(format!(
            "forward: expected {expected} weight tensors, got {}",
            params.len()
        )));
    }
    let xs = x.shape();
    if xs.len() != 4 || xs[1..] != arch.input_shape {
        return Err(Error::Config(format!(
            "forward: input shape {:?} does not match (batch, {:?})",
            xs, arch.input_shape
        )));
    }
    let mut h = x.clone();
    let mut cursor = 0;
    for spec in &arch.layers {
        match spec {
            LayerSpec::ConvBlock { .. } => {
                let [kernel, bias, gamma, beta] = &params[cursor..cursor + 4] else {
                    unreachable!()
                };
                cursor += 4;
                let conv = h.conv2d(kernel, CONV_PAD)?;
                let conv = conv.add(&bias.broadcast_axis1(conv.shape())?)?;
                h = batch_norm(&conv, gamma, beta)?.relu()?.max_pool2x2()?;
            }
            LayerSpec::Linear { in_features, .. } => {
                let [weight, bias] = &params[cursor..cursor + 2] else {
                    unreachable!()
                };
                cursor += 2;
                let batch = h.shape()[0];
                let flat = h.numel() / batch.max(1);
                if flat != *in_features {
                    return Err(Error::Config(format!(
                        "forward: flattened features {flat} do not match linear in_features {in_features}"
                    )));
                }
                let z = matmul_t(&h.reshape(&[batch, flat])?, weight, false, true)?;
                h = z.add(&bias.broadcast_axis1(z.shape())?)?;
            }
        }
    }
    Ok(h)
}

fn check_labels<T: Scalar>(labels: &[usize], logits: &Tensor<T>) -> Result<usize> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Config(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            shape
        )));
    }
    let n_way = shape[1];
    if let Some(&label) = labels.iter().find(|&&l| l >= n_way) {
        return Err(Error::InvalidLabel { label, n_way });
    }
    Ok(n_way)
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(labels: &[usize], logits: &Tensor<T>) -> Result<Tensor<T>> {
    check_labels(labels, logits)?;
    let lse = logits.logsumexp_last()?;
    Ok(lse.sub(&logits.pick(labels)?)?.mean_all()?)
}

/// Fraction of rows whose argmax equals the label; ties go to the lowest class index.
pub fn accuracy<T: Scalar>(labels: &[usize], logits: &Tensor<T>) -> Result<f64> {
    let n_way = check_labels(labels, logits)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = logits
        .values()
        .chunks(n_way)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
