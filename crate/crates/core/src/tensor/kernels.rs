//! NHWC convolution and max-pooling kernels.
//!
//! Filters use the `[height, width, in_channels, out_channels]` layout and
//! convolution is cross-correlation (no kernel flip).

use serde::{Deserialize, Serialize};

use super::{shape_err, TensorError};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, zero padding split with the
    /// smaller half before.
    Same,
    /// No padding; output extent `(in - k) / stride + 1`.
    Valid,
}

/// Resolved extents for a windowed NHWC operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_extent(
    op: &'static str,
    input: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize), TensorError> {
    if stride == 0 || k == 0 {
        return Err(shape_err(op, "kernel and stride extents must be positive"));
    }
    match padding {
        Padding::Valid => {
            if k > input {
                return Err(shape_err(
                    op,
                    format!("kernel extent {k} exceeds input extent {input}"),
                ));
            }
            Ok(((input - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

impl PoolGeometry {
    pub fn resolve(
        op: &'static str,
        input_shape: &[usize],
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self, TensorError> {
        let &[batch, in_h, in_w, channels] = input_shape else {
            return Err(shape_err(
                op,
                format!("expected N×H×W×C input, got {input_shape:?}"),
            ));
        };
        let (out_h, pad_top) = out_extent(op, in_h, kernel.0, stride.0, padding)?;
        let (out_w, pad_left) = out_extent(op, in_w, kernel.1, stride.1, padding)?;
        Ok(PoolGeometry {
            batch,
            in_h,
            in_w,
            channels,
            k_h: kernel.0,
            k_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn output_shape(&self, channels: usize) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, channels]
    }

    /// Input coordinate for an output position and kernel offset, or `None`
    /// when it falls in padding.
    #[inline]
    fn source(
        &self,
        out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        extent: usize,
    ) -> Option<usize> {
        let pos = (out * stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    #[inline]
    fn src_y(&self, oy: usize, ky: usize) -> Option<usize> {
        self.source(oy, ky, self.stride_h, self.pad_top, self.in_h)
    }

    #[inline]
    fn src_x(&self, ox: usize, kx: usize) -> Option<usize> {
        self.source(ox, kx, self.stride_w, self.pad_left, self.in_w)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &PoolGeometry,
    x: &[T],
    w: &[T],
    filters: usize,
) -> Vec<T> {
    let c = g.channels;
    let mut out = vec![T::zero(); g.batch * g.out_h * g.out_w * filters];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o_base = ((n * g.out_h + oy) * g.out_w + ox) * filters;
                let acc = &mut out[o_base..o_base + filters];
                for ky in 0..g.k_h {
                    let Some(iy) = g.src_y(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.src_x(ox, kx) else { continue };
                        let x_base = ((n * g.in_h + iy) * g.in_w + ix) * c;
                        for ci in 0..c {
                            let xv = x[x_base + ci];
                            let w_base = ((ky * g.k_w + kx) * c + ci) * filters;
                            for (a, &wv) in acc.iter_mut().zip(&w[w_base..w_base + filters]) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_filter)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &PoolGeometry,
    x: &[T],
    w: &[T],
    filters: usize,
    d_out: &[T],
    want_input: bool,
    want_filter: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let c = g.channels;
    let mut dx = want_input.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_filter.then(|| vec![T::zero(); w.len()]);
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o_base = ((n * g.out_h + oy) * g.out_w + ox) * filters;
                let grad = &d_out[o_base..o_base + filters];
                for ky in 0..g.k_h {
                    let Some(iy) = g.src_y(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.src_x(ox, kx) else { continue };
                        let x_base = ((n * g.in_h + iy) * g.in_w + ix) * c;
                        for ci in 0..c {
                            let w_base = ((ky * g.k_w + kx) * c + ci) * filters;
                            if let Some(dx) = dx.as_mut() {
                                let mut s = T::zero();
                                for (&gv, &wv) in grad.iter().zip(&w[w_base..w_base + filters]) {
                                    s += gv * wv;
                                }
                                dx[x_base + ci] += s;
                            }
                            if let Some(dw) = dw.as_mut() {
                                let xv = x[x_base + ci];
                                for (d, &gv) in dw[w_base..w_base + filters].iter_mut().zip(grad) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Windowed maximum. Also returns, per output element, the flat input index
/// that won; ties go to the first candidate in row-major window order.
pub(crate) fn maxpool_forward<T: Scalar>(g: &PoolGeometry, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let c = g.channels;
    let len = g.batch * g.out_h * g.out_w * c;
    let mut out = Vec::with_capacity(len);
    let mut argmax = Vec::with_capacity(len);
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for ci in 0..c {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..g.k_h {
                        let Some(iy) = g.src_y(oy, ky) else { continue };
                        for kx in 0..g.k_w {
                            let Some(ix) = g.src_x(ox, kx) else { continue };
                            let idx = ((n * g.in_h + iy) * g.in_w + ix) * c + ci;
                            let v = x[idx];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    // `resolve` guarantees every window overlaps the input.
                    let (v, idx) = best.expect("pool window entirely in padding");
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
    }
    (out, argmax)
}
