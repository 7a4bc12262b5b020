//! Raw numeric kernels on slices. No shape validation happens here; callers in
//! `ops` check shapes before dispatching.

use crate::scalar::Scalar;

/// `c = op(a) * op(b) + beta * c`, all row-major. `op(a)` is `m×k`, `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // stored layout: a is m×k (or k×m when transposed), b is k×n (or n×k)
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stored row-major layouts.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h + 2 * self.pad + 1 - self.k_h
    }

    pub fn out_w(&self) -> usize {
        self.in_w + 2 * self.pad + 1 - self.k_w
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_image(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }

    fn out_image(&self) -> usize {
        self.out_ch * self.col_cols()
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = y as isize + kh as isize - pad;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (x, slot) in line.iter_mut().enumerate() {
                        let ix = x as isize + kw as isize - pad;
                        *slot = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = y as isize + kh as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for x in 0..ow {
                        let ix = x as isize + kw as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[y * ow + x];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[n] = W * im2col(x[n])`.
pub(crate) fn conv2d<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_image()..(n + 1) * g.in_image()], &mut cols);
        gemm(
            false,
            false,
            g.out_ch,
            g.col_rows(),
            g.col_cols(),
            w,
            &cols,
            T::zero(),
            &mut out[n * g.out_image()..(n + 1) * g.out_image()],
        );
    }
    out
}

/// Adjoint of `conv2d` in its input: `x̄[n] = col2im(Wᵀ * ḡ[n])`.
pub(crate) fn conv2d_input_grad<T: Scalar>(g: &ConvGeom, grad_out: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.in_image()];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..g.batch {
        gemm(
            true,
            false,
            g.col_rows(),
            g.out_ch,
            g.col_cols(),
            w,
            &grad_out[n * g.out_image()..(n + 1) * g.out_image()],
            T::zero(),
            &mut cols,
        );
        col2im_add(g, &cols, &mut out[n * g.in_image()..(n + 1) * g.in_image()]);
    }
    out
}

/// Adjoint of `conv2d` in its kernel: `W̄ = Σₙ ḡ[n] * im2col(x[n])ᵀ`, summed in batch order.
pub(crate) fn conv2d_weight_grad<T: Scalar>(g: &ConvGeom, x: &[T], grad_out: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.out_ch * g.col_rows()];
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_image()..(n + 1) * g.in_image()], &mut cols);
        gemm(
            false,
            true,
            g.out_ch,
            g.col_cols(),
            g.col_rows(),
            &grad_out[n * g.out_image()..(n + 1) * g.out_image()],
            &cols,
            if n == 0 { T::zero() } else { T::one() },
            &mut out,
        );
    }
    out
}

/// 2×2 stride-2 max pooling over `(N, C, H, W)`. Returns flat source indices of the
/// maxima; ties resolve to the first element in row-major window order.
pub(crate) fn max_pool2x2_indices<T: Scalar>(shape: &[usize], x: &[T]) -> Vec<usize> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(nc * oh * ow);
    for plane in 0..nc {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

/// Views `shape` as `(outer, shape[1], inner)`.
pub(crate) fn axis1_split(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let mid = shape[1];
    let inner = shape[2..].iter().product();
    (outer, mid, inner)
}

/// Sums everything except axis 1. Inner extents are summed per outer slice first,
/// then slices are added in order.
pub(crate) fn reduce_axis1<T: Scalar>(shape: &[usize], x: &[T]) -> Vec<T> {
    let (outer, mid, inner) = axis1_split(shape);
    let mut out = vec![T::zero(); mid];
    for o in 0..outer {
        for (c, acc) in out.iter_mut().enumerate() {
            let start = (o * mid + c) * inner;
            let partial: T = x[start..start + inner].iter().copied().sum();
            *acc = *acc + partial;
        }
    }
    out
}

pub(crate) fn broadcast_axis1<T: Scalar>(shape: &[usize], v: &[T]) -> Vec<T> {
    let (outer, mid, inner) = axis1_split(shape);
    let mut out = Vec::with_capacity(outer * mid * inner);
    for _ in 0..outer {
        for &value in v.iter().take(mid) {
            out.extend(std::iter::repeat_n(value, inner));
        }
    }
    out
}
