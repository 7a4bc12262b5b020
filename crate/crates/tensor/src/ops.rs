//! Differentiable operations.
//!
//! Each VJP is written with operations from this same set, which closes the set under
//! differentiation. The three convolution operators are the partial derivatives of a
//! single trilinear form, so each one's VJP is expressed through the other two. The
//! same holds for the gather/scatter and pick/scatter-pick adjoint pairs.

use std::sync::Arc;

use crate::data::{numel, TensorData};
use crate::error::{mismatch, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tape::Tensor;

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(T),
    AddScalar,
    PowF(T),
    Exp,
    Ln,
    MaskMul(TensorData<T>),
    MatMul { trans_a: bool, trans_b: bool },
    SumAll,
    Expand,
    ReduceAxis1,
    BroadcastAxis1,
    SumLast,
    ExpandLast,
    LogSumExpLast,
    Pick(Arc<[usize]>),
    ScatterPick(Arc<[usize]>),
    Conv2d { pad: usize },
    Conv2dInputGrad { pad: usize },
    Conv2dWeightGrad { pad: usize },
    Gather(Arc<[usize]>),
    Scatter(Arc<[usize]>),
    Reshape,
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(mismatch(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Self) -> Result<Self> {
        same_shape("add", self, other)?;
        let v = self.data().zip_map(other.data(), |a, b| a + b);
        Self::record("add", Op::Add, &[self, other], v)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        same_shape("sub", self, other)?;
        let v = self.data().zip_map(other.data(), |a, b| a - b);
        Self::record("sub", Op::Sub, &[self, other], v)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        same_shape("mul", self, other)?;
        let v = self.data().zip_map(other.data(), |a, b| a * b);
        Self::record("mul", Op::Mul, &[self, other], v)
    }

    pub fn neg(&self) -> Result<Self> {
        Self::record("neg", Op::Neg, &[self], self.data().map(|a| -a))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: T) -> Result<Self> {
        Self::record("scale", Op::Scale(c), &[self], self.data().map(|a| a * c))
    }

    /// Addition of a constant.
    pub fn add_scalar(&self, c: T) -> Result<Self> {
        Self::record("add_scalar", Op::AddScalar, &[self], self.data().map(|a| a + c))
    }

    pub fn powf(&self, p: T) -> Result<Self> {
        Self::record("powf", Op::PowF(p), &[self], self.data().map(|a| a.powf(p)))
    }

    pub fn exp(&self) -> Result<Self> {
        Self::record("exp", Op::Exp, &[self], self.data().map(|a| a.exp()))
    }

    pub fn ln(&self) -> Result<Self> {
        Self::record("ln", Op::Ln, &[self], self.data().map(|a| a.ln()))
    }

    /// Product with a constant (non-differentiable) mask.
    pub fn mask_mul(&self, mask: &TensorData<T>) -> Result<Self> {
        if self.shape() != mask.shape() {
            return Err(mismatch(
                "mask_mul",
                format!("{:?} vs mask {:?}", self.shape(), mask.shape()),
            ));
        }
        let v = self.data().zip_map(mask, |a, m| a * m);
        Self::record("mask_mul", Op::MaskMul(mask.clone()), &[self], v)
    }

    /// `max(x, 0)`. The derivative at exactly 0 is taken as 0.
    pub fn relu(&self) -> Result<Self> {
        let mask = self
            .data()
            .map(|a| if a > T::zero() { T::one() } else { T::zero() });
        self.mask_mul(&mask)
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul_t(self, other, false, false)
    }

    pub fn sum_all(&self) -> Result<Self> {
        let total: T = self.values().iter().copied().sum();
        Self::record("sum_all", Op::SumAll, &[self], TensorData::scalar(total))
    }

    pub fn mean_all(&self) -> Result<Self> {
        let n = T::from_usize(self.numel().max(1)).expect("count");
        self.sum_all()?.scale(T::one() / n)
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Self> {
        if self.numel() != 1 {
            return Err(mismatch("expand", format!("source shape {:?}", self.shape())));
        }
        let v = TensorData::filled(shape, self.values()[0]);
        Self::record("expand", Op::Expand, &[self], v)
    }

    /// Sums over every axis except axis 1: `(N, C, ...) -> (C)`.
    pub fn reduce_axis1(&self) -> Result<Self> {
        if self.shape().len() < 2 {
            return Err(mismatch("reduce_axis1", format!("shape {:?}", self.shape())));
        }
        let out = kernels::reduce_axis1(self.shape(), self.values());
        let v = TensorData::from_parts(&[self.shape()[1]], out);
        Self::record("reduce_axis1", Op::ReduceAxis1, &[self], v)
    }

    /// Broadcasts a `(C)` vector along axis 1 of `shape`.
    pub fn broadcast_axis1(&self, shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 || self.shape() != [shape[1]] {
            return Err(mismatch(
                "broadcast_axis1",
                format!("{:?} into {:?}", self.shape(), shape),
            ));
        }
        let v = TensorData::from_parts(shape, kernels::broadcast_axis1(shape, self.values()));
        Self::record("broadcast_axis1", Op::BroadcastAxis1, &[self], v)
    }

    /// `(N, K) -> (N)` row sums.
    pub fn sum_last(&self) -> Result<Self> {
        expect_rank("sum_last", self, 2)?;
        let k = self.shape()[1];
        let out = self
            .values()
            .chunks(k.max(1))
            .map(|row| row.iter().copied().sum())
            .collect();
        let v = TensorData::from_parts(&[self.shape()[0]], out);
        Self::record("sum_last", Op::SumLast, &[self], v)
    }

    /// `(N) -> (N, K)` by repeating each entry `k` times.
    pub fn expand_last(&self, k: usize) -> Result<Self> {
        expect_rank("expand_last", self, 1)?;
        let out = self
            .values()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, k))
            .collect();
        let v = TensorData::from_parts(&[self.shape()[0], k], out);
        Self::record("expand_last", Op::ExpandLast, &[self], v)
    }

    /// Row-wise `log Σ exp`, computed with the max shift.
    pub fn logsumexp_last(&self) -> Result<Self> {
        expect_rank("logsumexp_last", self, 2)?;
        let k = self.shape()[1];
        if k == 0 {
            return Err(mismatch("logsumexp_last", "empty rows"));
        }
        let out = self
            .values()
            .chunks(k)
            .map(|row| {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let s: T = row.iter().map(|&v| (v - m).exp()).sum();
                m + s.ln()
            })
            .collect();
        let v = TensorData::from_parts(&[self.shape()[0]], out);
        Self::record("logsumexp_last", Op::LogSumExpLast, &[self], v)
    }

    /// `out[n] = x[n, labels[n]]`.
    pub fn pick(&self, labels: &[usize]) -> Result<Self> {
        expect_rank("pick", self, 2)?;
        let (n, k) = (self.shape()[0], self.shape()[1]);
        check_labels("pick", labels, n, k)?;
        let out = labels
            .iter()
            .enumerate()
            .map(|(row, &c)| self.values()[row * k + c])
            .collect();
        let v = TensorData::from_parts(&[n], out);
        Self::record("pick", Op::Pick(labels.into()), &[self], v)
    }

    /// Adjoint of [`Tensor::pick`]: places `g[n]` at `(n, labels[n])` of an `(N, K)` zero matrix.
    pub fn scatter_pick(&self, labels: &[usize], k: usize) -> Result<Self> {
        expect_rank("scatter_pick", self, 1)?;
        let n = self.shape()[0];
        check_labels("scatter_pick", labels, n, k)?;
        let mut out = vec![T::zero(); n * k];
        for (row, &c) in labels.iter().enumerate() {
            out[row * k + c] = self.values()[row];
        }
        let v = TensorData::from_parts(&[n, k], out);
        Self::record("scatter_pick", Op::ScatterPick(labels.into()), &[self], v)
    }

    /// Stride-1 2-D convolution of `(N, Cin, H, W)` with `(Cout, Cin, kh, kw)`,
    /// zero padding `pad` on every side.
    pub fn conv2d(&self, kernel: &Self, pad: usize) -> Result<Self> {
        let g = conv_geom("conv2d", self.shape(), kernel.shape(), pad)?;
        let out = kernels::conv2d(&g, self.values(), kernel.values());
        let v = TensorData::from_parts(&[g.batch, g.out_ch, g.out_h(), g.out_w()], out);
        Self::record("conv2d", Op::Conv2d { pad }, &[self, kernel], v)
    }

    /// `(N, C, H, W) -> (N, C, H/2, W/2)`, 2×2 windows with stride 2; odd sizes floor.
    pub fn max_pool2x2(&self) -> Result<Self> {
        expect_rank("max_pool2x2", self, 4)?;
        let s = self.shape();
        if s[2] < 2 || s[3] < 2 {
            return Err(mismatch("max_pool2x2", format!("spatial size {:?} < 2", s)));
        }
        let idx = kernels::max_pool2x2_indices(s, self.values());
        self.gather(idx.into(), &[s[0], s[1], s[2] / 2, s[3] / 2])
    }

    /// `out.flat[i] = x.flat[idx[i]]`.
    pub fn gather(&self, idx: Arc<[usize]>, out_shape: &[usize]) -> Result<Self> {
        if numel(out_shape) != idx.len() || idx.iter().any(|&i| i >= self.numel()) {
            return Err(mismatch(
                "gather",
                format!("{} indices into {:?} for {:?}", idx.len(), self.shape(), out_shape),
            ));
        }
        let out = idx.iter().map(|&i| self.values()[i]).collect();
        let v = TensorData::from_parts(out_shape, out);
        Self::record("gather", Op::Gather(idx), &[self], v)
    }

    /// Adjoint of [`Tensor::gather`]: `out.flat[idx[i]] += g.flat[i]`.
    pub fn scatter(&self, idx: Arc<[usize]>, out_shape: &[usize]) -> Result<Self> {
        let total = numel(out_shape);
        if self.numel() != idx.len() || idx.iter().any(|&i| i >= total) {
            return Err(mismatch(
                "scatter",
                format!("{:?} with {} indices into {:?}", self.shape(), idx.len(), out_shape),
            ));
        }
        let mut out = vec![T::zero(); total];
        for (&i, &g) in idx.iter().zip(self.values()) {
            out[i] = out[i] + g;
        }
        let v = TensorData::from_parts(out_shape, out);
        Self::record("scatter", Op::Scatter(idx), &[self], v)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let v = self.data().reshaped(shape)?;
        Self::record("reshape", Op::Reshape, &[self], v)
    }
}

/// Matrix product with optional transposition of either operand.
pub fn matmul_t<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, ka) = if trans_a {
        (a.shape()[1], a.shape()[0])
    } else {
        (a.shape()[0], a.shape()[1])
    };
    let (kb, n) = if trans_b {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if ka != kb {
        return Err(mismatch(
            "matmul",
            format!(
                "{:?}{} x {:?}{}",
                a.shape(),
                if trans_a { "ᵀ" } else { "" },
                b.shape(),
                if trans_b { "ᵀ" } else { "" }
            ),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    kernels::gemm(trans_a, trans_b, m, ka, n, a.values(), b.values(), T::zero(), &mut out);
    let v = TensorData::from_parts(&[m, n], out);
    Tensor::record("matmul", Op::MatMul { trans_a, trans_b }, &[a, b], v)
}

/// Adjoint of [`Tensor::conv2d`] in its input. `input_hw` is the spatial size of the
/// original input.
pub fn conv2d_input_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: usize,
    input_hw: (usize, usize),
) -> Result<Tensor<T>> {
    expect_rank("conv2d_input_grad", grad_out, 4)?;
    expect_rank("conv2d_input_grad", kernel, 4)?;
    let gs = grad_out.shape();
    let ks = kernel.shape();
    let in_shape = [gs[0], ks[1], input_hw.0, input_hw.1];
    let g = conv_geom("conv2d_input_grad", &in_shape, ks, pad)?;
    if gs != [g.batch, g.out_ch, g.out_h(), g.out_w()] {
        return Err(mismatch(
            "conv2d_input_grad",
            format!("gradient {:?} does not fit input {:?} and kernel {:?}", gs, in_shape, ks),
        ));
    }
    let out = kernels::conv2d_input_grad(&g, grad_out.values(), kernel.values());
    let v = TensorData::from_parts(&in_shape, out);
    Tensor::record(
        "conv2d_input_grad",
        Op::Conv2dInputGrad { pad },
        &[grad_out, kernel],
        v,
    )
}

/// Adjoint of [`Tensor::conv2d`] in its kernel.
pub fn conv2d_weight_grad<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad: usize,
    kernel_hw: (usize, usize),
) -> Result<Tensor<T>> {
    expect_rank("conv2d_weight_grad", input, 4)?;
    expect_rank("conv2d_weight_grad", grad_out, 4)?;
    let xs = input.shape();
    let gs = grad_out.shape();
    let k_shape = [gs[1], xs[1], kernel_hw.0, kernel_hw.1];
    let g = conv_geom("conv2d_weight_grad", xs, &k_shape, pad)?;
    if gs != [g.batch, g.out_ch, g.out_h(), g.out_w()] {
        return Err(mismatch(
            "conv2d_weight_grad",
            format!("gradient {:?} does not fit input {:?}", gs, xs),
        ));
    }
    let out = kernels::conv2d_weight_grad(&g, input.values(), grad_out.values());
    let v = TensorData::from_parts(&k_shape, out);
    Tensor::record(
        "conv2d_weight_grad",
        Op::Conv2dWeightGrad { pad },
        &[input, grad_out],
        v,
    )
}

fn conv_geom(op: &'static str, x: &[usize], k: &[usize], pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || k.len() != 4 {
        return Err(mismatch(op, format!("input {:?}, kernel {:?}", x, k)));
    }
    if x[1] != k[1] {
        return Err(mismatch(
            op,
            format!("input channels {} vs kernel {:?}", x[1], k),
        ));
    }
    if x[2] + 2 * pad < k[2] || x[3] + 2 * pad < k[3] {
        return Err(mismatch(
            op,
            format!("kernel {:?} larger than padded input {:?}", k, x),
        ));
    }
    Ok(ConvGeom {
        batch: x[0],
        in_ch: x[1],
        out_ch: k[0],
        in_h: x[2],
        in_w: x[3],
        k_h: k[2],
        k_w: k[3],
        pad,
    })
}

fn check_labels(op: &'static str, labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(mismatch(op, format!("{} labels for {} rows", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= k) {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!("label {bad} out of range for {k} classes"),
        });
    }
    Ok(())
}

/// Vector-Jacobian product of `op` with respect to input `slot`.
pub(crate) fn vjp<T: Scalar>(
    op: &Op<T>,
    slot: usize,
    g: &Tensor<T>,
    inputs: &[Tensor<T>],
    out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let x = &inputs[0];
    match op {
        Op::Leaf | Op::Constant => unreachable!("leaves have no inputs"),
        Op::Add | Op::AddScalar => Ok(g.clone()),
        Op::Sub => {
            if slot == 0 {
                Ok(g.clone())
            } else {
                g.neg()
            }
        }
        Op::Mul => g.mul(&inputs[1 - slot]),
        Op::Neg => g.neg(),
        Op::Scale(c) => g.scale(*c),
        Op::PowF(p) => g.mul(&x.powf(*p - T::one())?.scale(*p)?),
        Op::Exp => g.mul(out),
        Op::Ln => g.mul(&x.powf(-T::one())?),
        Op::MaskMul(mask) => g.mask_mul(mask),
        Op::MatMul { trans_a, trans_b } => {
            let (a, b) = (&inputs[0], &inputs[1]);
            match (slot, trans_a, trans_b) {
                (0, false, false) => matmul_t(g, b, false, true),
                (0, false, true) => matmul_t(g, b, false, false),
                (0, true, false) => matmul_t(b, g, false, true),
                (0, true, true) => matmul_t(b, g, true, true),
                (_, false, false) => matmul_t(a, g, true, false),
                (_, false, true) => matmul_t(g, a, true, false),
                (_, true, false) => matmul_t(a, g, false, false),
                (_, true, true) => matmul_t(g, a, true, true),
            }
        }
        Op::SumAll => g.expand(x.shape()),
        Op::Expand => g.sum_all()?.reshape(x.shape()),
        Op::ReduceAxis1 => g.broadcast_axis1(x.shape()),
        Op::BroadcastAxis1 => g.reduce_axis1(),
        Op::SumLast => g.expand_last(x.shape()[1]),
        Op::ExpandLast => g.sum_last(),
        Op::LogSumExpLast => {
            let k = x.shape()[1];
            let softmax = x.sub(&out.expand_last(k)?)?.exp()?;
            g.expand_last(k)?.mul(&softmax)
        }
        Op::Pick(labels) => g.scatter_pick(labels, x.shape()[1]),
        Op::ScatterPick(labels) => g.pick(labels),
        Op::Conv2d { pad } => {
            let (input, kernel) = (&inputs[0], &inputs[1]);
            let ks = kernel.shape();
            if slot == 0 {
                let s = input.shape();
                conv2d_input_grad(g, kernel, *pad, (s[2], s[3]))
            } else {
                conv2d_weight_grad(input, g, *pad, (ks[2], ks[3]))
            }
        }
        Op::Conv2dInputGrad { pad } => {
            // out has the shape of the original conv input
            let (grad_out, kernel) = (&inputs[0], &inputs[1]);
            if slot == 0 {
                g.conv2d(kernel, *pad)
            } else {
                let ks = kernel.shape();
                conv2d_weight_grad(g, grad_out, *pad, (ks[2], ks[3]))
            }
        }
        Op::Conv2dWeightGrad { pad } => {
            // out has the shape of the kernel
            let (input, grad_out) = (&inputs[0], &inputs[1]);
            if slot == 0 {
                let s = input.shape();
                conv2d_input_grad(grad_out, g, *pad, (s[2], s[3]))
            } else {
                input.conv2d(g, *pad)
            }
        }
        Op::Gather(idx) => g.scatter(idx.clone(), x.shape()),
        Op::Scatter(idx) => g.gather(idx.clone(), x.shape()),
        Op::Reshape => g.reshape(x.shape()),
    }
}
