use super::{TensorError, TensorResult};

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> TensorResult<(usize, usize, usize)> {
    match (a, b) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }),
    }
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

pub(crate) fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub(crate) fn conv_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

pub(crate) fn pool_output_len(input: usize, size: usize, stride: usize) -> Option<usize> {
    conv_output_len(input, size, stride, 0)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernels: &[usize],
        stride: usize,
        padding: usize,
    ) -> TensorResult<(Self, usize)> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernels.to_vec(),
        };
        let (&[c_in, h, w], &[c_out, kc, kh, kw]) = (input, kernels) else {
            return Err(mismatch());
        };
        if kc != c_in {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let (Some(oh), Some(ow)) = (
            conv_output_len(h, kh, stride, padding),
            conv_output_len(w, kw, stride, padding),
        ) else {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!(
                    "kernel {kh}×{kw} larger than padded input {h}×{w} (padding {padding})"
                ),
            });
        };
        Ok((
            Self {
                c_in,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
            },
            c_out,
        ))
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Unfolds the input into a `(c_in·kh·kw) × (oh·ow)` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.out_len();
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, xx)) = g.source(oy, ky, ox, kx) {
                            dst[oy * g.ow + ox] = plane[y * g.w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub(crate) fn col2im(cols_grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.out_len();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, xx)) = g.source(oy, ky, ox, kx) {
                            plane[y * g.w + xx] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Max pooling over `c×h×w`; returns the pooled values and, per output, the
/// flat input index of the winning element (lowest index on ties).
pub(crate) fn max_pool2d(
    x: &[f64],
    shape: &[usize],
    size: usize,
    stride: usize,
) -> TensorResult<(Vec<usize>, Vec<f64>, Vec<usize>)> {
    let &[c, h, w] = shape else {
        return Err(TensorError::InvalidArgument {
            op: "max_pool2d",
            msg: format!("expects c×h×w, got {shape:?}"),
        });
    };
    let (Some(oh), Some(ow)) = (
        pool_output_len(h, size, stride),
        pool_output_len(w, size, stride),
    ) else {
        return Err(TensorError::InvalidArgument {
            op: "max_pool2d",
            msg: format!("window {size} (stride {stride}) does not fit {h}×{w}"),
        });
    };
    let mut values = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best_v || best == usize::MAX {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                values.push(best_v);
                argmax.push(best);
            }
        }
    }
    Ok((vec![c, oh, ow], values, argmax))
}

/// Splits a shape around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_extents(
    shape: &[usize],
    axis: usize,
    op: &'static str,
) -> TensorResult<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
