//! Λ adaptation patterns: which blocks are updated during adaptation, and how far
//! backpropagation has to reach to produce their gradients.

use std::fmt;
use std::str::FromStr;

use lambda_tensor::{Scalar, Tensor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Bit `l` (0-based) is block `l + 1`, counted from the input.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LambdaPattern {
    bits: Vec<bool>,
}

impl LambdaPattern {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Pattern("pattern is empty".into()));
        }
        if !bits.iter().any(|&b| b) {
            return Err(Error::Pattern(
                "all-zero pattern updates nothing, so no adaptation is possible".into(),
            ));
        }
        Ok(Self { bits })
    }

    pub fn full(blocks: usize) -> Self {
        Self {
            bits: vec![true; blocks.max(1)],
        }
    }

    /// Exactly one block set (a "trivial" pattern).
    pub fn single(blocks: usize, layer: usize) -> Result<Self> {
        if layer >= blocks {
            return Err(Error::Pattern(format!("layer {layer} out of range for {blocks} blocks")));
        }
        let mut bits = vec![false; blocks];
        bits[layer] = true;
        Self::new(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_active(&self, layer: usize) -> bool {
        self.bits.get(layer).copied().unwrap_or(false)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Index of the active block nearest the input.
    pub fn first_active(&self) -> usize {
        self.bits.iter().position(|&b| b).expect("validated non-zero")
    }

    /// Reads the bits as a binary number with block 1 as the most significant bit.
    pub fn value(&self) -> u64 {
        self.bits.iter().fold(0, |acc, &b| (acc << 1) | u64::from(b))
    }

    /// `true` if every block active here is also active in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn check_blocks(&self, blocks: usize) -> Result<()> {
        if self.len() != blocks {
            return Err(Error::Pattern(format!(
                "pattern {self} has {} bits but the model has {blocks} blocks",
                self.len()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for LambdaPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &b) in self.bits.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for LambdaPattern {
    type Err = Error;

    /// Accepts `1,0,1,1,1`, optionally wrapped in braces.
    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim();
        let body = body
            .strip_prefix('{')
            .and_then(|b| b.strip_suffix('}'))
            .unwrap_or(body);
        let bits = body
            .split(',')
            .map(|t| match t.trim() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(Error::Pattern(format!("bad bit {other:?} in {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }
}

impl Serialize for LambdaPattern {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LambdaPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All `2^B − 1` non-zero patterns in ascending binary value.
pub fn enumerate_patterns(blocks: usize) -> Vec<LambdaPattern> {
    assert!((1..64).contains(&blocks), "unsupported block count {blocks}");
    (1u64..1 << blocks)
        .map(|v| LambdaPattern {
            bits: (0..blocks).map(|l| (v >> (blocks - 1 - l)) & 1 == 1).collect(),
        })
        .collect()
}

/// The `B` single-bit patterns, block 1 first.
pub fn trivial_patterns(blocks: usize) -> Vec<LambdaPattern> {
    (0..blocks)
        .map(|l| LambdaPattern::single(blocks, l).expect("in range"))
        .collect()
}

/// Which blocks compute what during one adaptation step (0-based block indices).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackpropPlan {
    /// Blocks whose weights are updated, and so need weight gradients.
    pub update: Vec<usize>,
    /// Blocks that must pass a gradient on to their input.
    pub grad_flow: Vec<usize>,
    /// Blocks below the first active one: no gradient work at all.
    pub skip: Vec<usize>,
}

impl BackpropPlan {
    /// Blocks that run any backward computation, ascending.
    pub fn backward(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.update.iter().chain(&self.grad_flow).copied().collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }
}

pub fn plan(pattern: &LambdaPattern, blocks: usize) -> Result<BackpropPlan> {
    pattern.check_blocks(blocks)?;
    let first = pattern.first_active();
    Ok(BackpropPlan {
        update: (0..blocks).filter(|&l| pattern.is_active(l)).collect(),
        grad_flow: (first + 1..blocks).collect(),
        skip: (0..first).collect(),
    })
}

/// `θ′ = θ − α·g` for tensors in active blocks; frozen tensors are passed through as-is.
///
/// `layer_of[i]` is the block of tensor `i`. Active tensors must have a gradient.
pub fn masked_step<T: Scalar>(
    weights: &[Tensor<T>],
    grads: &[Option<Tensor<T>>],
    layer_of: &[usize],
    pattern: &LambdaPattern,
    alpha: T,
) -> Result<Vec<Tensor<T>>> {
    if weights.len() != grads.len() || weights.len() != layer_of.len() {
        return Err(Error::Pattern(format!(
            "misaligned step: {} weights, {} gradients, {} layer indices",
            weights.len(),
            grads.len(),
            layer_of.len()
        )));
    }
    if let Some(&max) = layer_of.iter().max() {
        pattern.check_blocks(max + 1)?;
    }
    weights
        .iter()
        .zip(grads)
        .zip(layer_of)
        .map(|((w, g), &layer)| {
            if !pattern.is_active(layer) {
                return Ok(w.clone());
            }
            let g = g.as_ref().ok_or_else(|| {
                Error::Pattern(format!("missing gradient for a tensor of active block {}", layer + 1))
            })?;
            if g.shape() != w.shape() {
                return Err(Error::Pattern(format!(
                    "gradient shape {:?} does not match weight shape {:?}",
                    g.shape(),
                    w.shape()
                )));
            }
            Ok(w.sub(&g.scale(alpha)?)?)
        })
        .collect()
}
