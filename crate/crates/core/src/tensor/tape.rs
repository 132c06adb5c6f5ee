use rand::{Rng, RngCore};

use super::kernels::{self, ConvGeom};
use super::{Tensor, TensorError, TensorResult};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernels: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BiasAdd(Var, Var),
    Relu(Var),
    SignedSqrt(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Log(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    L2Normalize {
        input: Var,
        axis: usize,
        norms: Vec<f64>,
        eps: f64,
    },
    Stack(Vec<Var>),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    Pick {
        input: Var,
        cols: Vec<usize>,
    },
    BilinearPool(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations for one forward pass.
///
/// Every op appends a node; [`Tape::backward`] walks the nodes in exact
/// reverse order. A tape is single-use and single-threaded: build a fresh one
/// per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input; it takes part in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a named parameter. Every registered parameter gets an entry in
    /// [`Gradients::params`], zero-filled when the loss does not reach it.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<()> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            })
        }
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> TensorResult<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::from_op(op_name, shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, op, rg))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorResult<Var> {
        self.same_shape(op_name, a, b)?;
        let shape = self.shape(a).to_vec();
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_op(op_name, shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (m, k, n) = kernels::matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let value = Tensor::from_op("matmul", vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> TensorResult<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> TensorResult<Var> {
        let value = self.value(x).reshape(shape)?.with_requires_grad(false);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Plain 2-D convolution of one `c_in×h×w` image with `c_out×c_in×kh×kw`
    /// kernels and symmetric zero padding.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
    ) -> TensorResult<Var> {
        let (geom, c_out) = ConvGeom::new(self.shape(input), self.shape(kernels), stride, padding)?;
        let cols = kernels::im2col(self.data(input), &geom);
        let mut out = vec![0.0; c_out * geom.out_len()];
        kernels::matmul_into(
            self.data(kernels),
            &cols,
            &mut out,
            c_out,
            geom.patch_len(),
            geom.out_len(),
        );
        let value = Tensor::from_op("conv2d", vec![c_out, geom.oh, geom.ow], out)?;
        let rg = self.rg(input) || self.rg(kernels);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every element of slice `c` along the leading axis.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let shape = self.shape(x).to_vec();
        if self.shape(bias) != [shape[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "bias_add",
                lhs: shape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let inner = self.value(x).len() / shape[0];
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i / inner])
            .collect();
        let value = Tensor::from_op("bias_add", shape, data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::BiasAdd(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> TensorResult<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `sign(x)·sqrt(|x|)`, with derivative taken as 0 at the origin.
    pub fn signed_sqrt(&mut self, x: Var) -> TensorResult<Var> {
        self.unary("signed_sqrt", x, signed_sqrt, Op::SignedSqrt(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> TensorResult<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> TensorResult<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> TensorResult<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn log(&mut self, x: Var) -> TensorResult<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> TensorResult<Var> {
        self.unary("clamp_min", x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    pub fn sum(&mut self, x: Var) -> TensorResult<Var> {
        let value = Tensor::from_op("sum", vec![1], vec![self.value(x).sum()])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> TensorResult<Var> {
        let t = self.value(x);
        let value = Tensor::from_op("mean", vec![1], vec![t.sum() / t.len() as f64])?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// Row sums of an `r×c` matrix, giving a length-`r` vector.
    pub fn sum_rows(&mut self, x: Var) -> TensorResult<Var> {
        let &[r, c] = self.shape(x) else {
            return Err(TensorError::InvalidArgument {
                op: "sum_rows",
                msg: format!("needs a 2-D tensor, got {:?}", self.shape(x)),
            });
        };
        let data = self.data(x).chunks(c).map(|row| row.iter().sum()).collect();
        let value = Tensor::from_op("sum_rows", vec![r], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumRows(x), rg))
    }

    /// Max pooling with a square window over a `c×h×w` map, no padding.
    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> TensorResult<Var> {
        let (shape, values, argmax) =
            kernels::max_pool2d(self.data(x), self.shape(x), size, stride)?;
        let value = Tensor::from_op("max_pool2d", shape, values)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MaxPool2d { input: x, argmax }, rg))
    }

    /// Spatial mean of a `c×h×w` map, giving a length-`c` vector.
    pub fn global_avg_pool(&mut self, x: Var) -> TensorResult<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                msg: format!("expects c×h×w, got {:?}", self.shape(x)),
            });
        };
        let hw = (h * w) as f64;
        let data = self
            .data(x)
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let value = Tensor::from_op("global_avg_pool", vec![c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Inverted dropout. With `rng == None` (inference) or `rate == 0` this is
    /// the identity and records nothing.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> TensorResult<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_op("dropout", shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { input: x, mask }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> TensorResult<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::axis_extents(&shape, axis, "softmax")?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::from_op("softmax", shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { input: x, axis }, rg))
    }

    /// Divides each slice along `axis` by `max(‖slice‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> TensorResult<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "l2_normalize",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = kernels::axis_extents(&shape, axis, "l2_normalize")?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let norm = (0..n).map(|j| src[at(j)] * src[at(j)]).sum::<f64>().sqrt();
                let denom = norm.max(eps);
                for j in 0..n {
                    out[at(j)] = src[at(j)] / denom;
                }
                norms.push(norm);
            }
        }
        let value = Tensor::from_op("l2_normalize", shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::L2Normalize {
                input: x,
                axis,
                norms,
                eps,
            },
            rg,
        ))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> TensorResult<Var> {
        let items: Vec<Tensor> = xs.iter().map(|&v| self.value(v).clone()).collect();
        let value = Tensor::stack(&items)?;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Stack(xs.to_vec()), rg))
    }

    /// Selects rows of an `r×c` matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> TensorResult<Var> {
        let &[r, c] = self.shape(x) else {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("needs a 2-D tensor, got {:?}", self.shape(x)),
            });
        };
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row indices must be non-empty and below {r}"),
            });
        }
        let src = self.data(x);
        let data = rows
            .iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect();
        let value = Tensor::from_op("gather_rows", vec![rows.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                input: x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `out[i] = x[i][cols[i]]` for an `r×c` matrix.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> TensorResult<Var> {
        let &[r, c] = self.shape(x) else {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                msg: format!("needs a 2-D tensor, got {:?}", self.shape(x)),
            });
        };
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(TensorError::InvalidArgument {
                op: "pick",
                msg: format!("need {r} column indices below {c}"),
            });
        }
        let src = self.data(x);
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * c + j])
            .collect();
        let value = Tensor::from_op("pick", vec![r], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Pick {
                input: x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_l map_a[l]ᵀ · map_b[l]` for location-major maps `Y×N` and `Y×M`.
    ///
    /// Each entry sums its `Y` products in order of increasing magnitude, so
    /// the result is bit-identical under any permutation of the locations.
    pub fn bilinear_pool(&mut self, map_a: Var, map_b: Var) -> TensorResult<Var> {
        let (&[ya, n], &[yb, m]) = (self.shape(map_a), self.shape(map_b)) else {
            return Err(TensorError::InvalidArgument {
                op: "bilinear_pool",
                msg: format!(
                    "expects Y×N and Y×M maps, got {:?} and {:?}",
                    self.shape(map_a),
                    self.shape(map_b)
                ),
            });
        };
        if ya != yb {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_pool",
                lhs: self.shape(map_a).to_vec(),
                rhs: self.shape(map_b).to_vec(),
            });
        }
        let (a, b) = (self.data(map_a), self.data(map_b));
        let mut out = vec![0.0; n * m];
        let mut terms = vec![0.0; ya];
        for i in 0..n {
            for j in 0..m {
                for (l, t) in terms.iter_mut().enumerate() {
                    *t = a[l * n + i] * b[l * m + j];
                }
                terms.sort_unstable_by(|x, y| x.abs().total_cmp(&y.abs()).then(x.total_cmp(y)));
                out[i * m + j] = terms.iter().sum();
            }
        }
        let value = Tensor::from_op("bilinear_pool", vec![n, m], out)?;
        let rg = self.rg(map_a) || self.rg(map_b);
        Ok(self.push(value, Op::BilinearPool(map_a, map_b), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(g) => {
                    Tensor::from_op("backward", self.nodes[i].value.shape().to_vec(), g).map(Some)
                }
                None => Ok(None),
            })
            .collect::<TensorResult<Vec<_>>>()?;
        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = match &grads[v.0] {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(self.shape(*v).to_vec())?,
                };
                Ok((name.clone(), g))
            })
            .collect::<TensorResult<Vec<_>>>()?;
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = kernels::matmul_dims(self.shape(*a), self.shape(*b))
                    .expect("checked in forward");
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt_into(g, self.data(*b), &mut da, m, n, k);
                    acc(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn_into(self.data(*a), g, &mut db, m, k, n);
                    acc(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                acc(*x, kernels::transpose(g, c, r));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Conv2d {
                input,
                kernels: k,
                geom,
                cols,
            } => {
                let c_out = self.shape(*k)[0];
                if self.rg(*k) {
                    let mut dk = vec![0.0; c_out * geom.patch_len()];
                    kernels::matmul_nt_into(
                        g,
                        cols,
                        &mut dk,
                        c_out,
                        geom.out_len(),
                        geom.patch_len(),
                    );
                    acc(*k, dk);
                }
                if self.rg(*input) {
                    let mut dcols = vec![0.0; geom.patch_len() * geom.out_len()];
                    kernels::matmul_tn_into(
                        self.data(*k),
                        g,
                        &mut dcols,
                        c_out,
                        geom.patch_len(),
                        geom.out_len(),
                    );
                    acc(*input, kernels::col2im(&dcols, geom));
                }
            }
            Op::BiasAdd(x, b) => {
                acc(*x, g.to_vec());
                let c = self.shape(*b)[0];
                let inner = g.len() / c;
                acc(*b, g.chunks(inner).map(|s| s.iter().sum()).collect());
            }
            Op::Relu(x) => {
                let xs = self.data(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::SignedSqrt(x) => {
                acc(
                    *x,
                    g.iter()
                        .zip(y)
                        .map(|(g, &s)| if s == 0.0 { 0.0 } else { g / (2.0 * s.abs()) })
                        .collect(),
                );
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Square(x) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(g, v)| 2.0 * v * g)
                    .collect(),
            ),
            Op::Log(x) => acc(
                *x,
                g.iter().zip(self.data(*x)).map(|(g, v)| g / v).collect(),
            ),
            Op::ClampMin(x, floor) => acc(
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(g, v)| if v > floor { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumRows(x) => {
                let c = self.shape(*x)[1];
                acc(
                    *x,
                    g.iter()
                        .flat_map(|&v| std::iter::repeat_n(v, c))
                        .collect(),
                );
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (gv, &i) in g.iter().zip(argmax) {
                    dx[i] += gv;
                }
                acc(*input, dx);
            }
            Op::GlobalAvgPool(x) => {
                let hw = self.value(*x).len() / g.len();
                acc(
                    *x,
                    g.iter()
                        .flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw))
                        .collect(),
                );
            }
            Op::Dropout { input, mask } => {
                acc(*input, g.iter().zip(mask).map(|(g, m)| g * m).collect())
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = kernels::axis_extents(node.value.shape(), *axis, "softmax")
                    .expect("checked in forward");
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*input, dx);
            }
            Op::L2Normalize {
                input,
                axis,
                norms,
                eps,
            } => {
                let (outer, n, inner) =
                    kernels::axis_extents(node.value.shape(), *axis, "l2_normalize")
                        .expect("checked in forward");
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let norm = norms[o * inner + i];
                        if norm > *eps {
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] = (g[at(j)] - y[at(j)] * dot) / norm;
                            }
                        } else {
                            for j in 0..n {
                                dx[at(j)] = g[at(j)] / eps;
                            }
                        }
                    }
                }
                acc(*input, dx);
            }
            Op::Stack(xs) => {
                let inner = g.len() / xs.len();
                for (slice, &x) in g.chunks(inner).zip(xs) {
                    acc(x, slice.to_vec());
                }
            }
            Op::GatherRows { input, rows } => {
                let c = self.shape(*input)[1];
                let mut dx = vec![0.0; self.value(*input).len()];
                for (src, &r) in g.chunks(c).zip(rows) {
                    dx[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
                acc(*input, dx);
            }
            Op::BilinearPool(a, b) => {
                let (y_len, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                if self.rg(*a) {
                    // d map_a = map_b · gᵀ
                    let mut da = vec![0.0; y_len * n];
                    kernels::matmul_nt_into(self.data(*b), g, &mut da, y_len, m, n);
                    acc(*a, da);
                }
                if self.rg(*b) {
                    // d map_b = map_a · g
                    let mut db = vec![0.0; y_len * m];
                    kernels::matmul_into(self.data(*a), g, &mut db, y_len, n, m);
                    acc(*b, db);
                }
            }
            Op::Pick { input, cols } => {
                let c = self.shape(*input)[1];
                let mut dx = vec![0.0; self.value(*input).len()];
                for (i, (&j, gv)) in cols.iter().zip(g).enumerate() {
                    dx[i * c + j] += gv;
                }
                acc(*input, dx);
            }
        }
    }
}

pub(crate) fn signed_sqrt(v: f64) -> f64 {
    if v < 0.0 {
        -(-v).sqrt()
    } else {
        v.sqrt()
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Tensor)>,
}

impl Gradients {
    /// Gradient of any recorded node, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient per registered parameter, in registration order.
    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn into_params(self) -> Vec<(String, Tensor)> {
        self.params
    }
}
