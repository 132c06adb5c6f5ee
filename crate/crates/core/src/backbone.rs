//! Convolutional feature streams and the two network heads.
//!
//! Each stream is a stack of `conv → bias → relu → max-pool` blocks with
//! "same" padding. The classifier head maps the bilinear feature of the two
//! streams to class probabilities; the embedding head global-average-pools
//! stream A and projects it to an L2-normalised `d`-dimensional embedding.
//! The two heads have separate reduction layers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bilinear::{head_on_tape, BilinearPooling, L2_EPS};
use crate::tensor::{conv_output_len, pool_output_len, Tape, Tensor, Var};
use crate::{Error, Result};

/// One `conv → bias → relu → max-pool` block. `pool == 1` skips pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

impl ConvBlock {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, pool: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            pool,
        }
    }

    pub(crate) fn padding(&self) -> usize {
        self.kernel / 2
    }
}

impl fmt::Display for ConvBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.out_channels, self.kernel, self.stride, self.pool
        )
    }
}

impl FromStr for ConvBlock {
    type Err = String;

    /// `channels x kernel x stride x pool`, e.g. `8x3x1x2`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .trim()
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format!("conv block '{s}' is not of the form CxKxSxP"))?;
        match parts[..] {
            [c, k, st, p] => Ok(Self::new(c, k, st, p)),
            _ => Err(format!("conv block '{s}' is not of the form CxKxSxP")),
        }
    }
}

pub fn parse_blocks(s: &str) -> std::result::Result<Vec<ConvBlock>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

pub fn format_blocks(blocks: &[ConvBlock]) -> String {
    blocks
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// `(channels, height, width)`.
    pub input_size: [usize; 3],
    pub conv_blocks: Vec<ConvBlock>,
    pub embedding_dim: usize,
    pub dropout_rate: f64,
    pub shared_streams: bool,
    pub num_classes: usize,
    pub pooling: BilinearPooling,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: [3, 32, 32],
            conv_blocks: vec![ConvBlock::new(8, 3, 1, 2), ConvBlock::new(16, 3, 1, 2)],
            embedding_dim: 128,
            dropout_rate: 0.25,
            shared_streams: true,
            num_classes: 4,
            pooling: BilinearPooling::Sum,
        }
    }
}

impl BackboneConfig {
    /// `(channels, grid height, grid width)` of each stream's final map.
    pub fn feature_shape(&self) -> Result<[usize; 3]> {
        let [mut c, mut h, mut w] = self.input_size;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input size {:?} has a zero dimension",
                self.input_size
            )));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            let bad = |msg: &str| Error::Config(format!("conv block {i} ({b}): {msg}"));
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 || b.pool == 0 {
                return Err(bad("all sizes must be positive"));
            }
            let p = b.padding();
            h = conv_output_len(h, b.kernel, b.stride, p)
                .ok_or_else(|| bad("kernel larger than input"))?;
            w = conv_output_len(w, b.kernel, b.stride, p)
                .ok_or_else(|| bad("kernel larger than input"))?;
            h = pool_output_len(h, b.pool, b.pool)
                .ok_or_else(|| bad("pool window larger than map"))?;
            w = pool_output_len(w, b.pool, b.pool)
                .ok_or_else(|| bad("pool window larger than map"))?;
            c = b.out_channels;
        }
        Ok([c, h, w])
    }

    /// Location count `Y` of the bilinear pooling.
    pub fn locations(&self) -> Result<usize> {
        let [_, h, w] = self.feature_shape()?;
        Ok(h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks.is_empty() {
            return Err(Error::Config("at least one conv block is required".into()));
        }
        self.feature_shape()?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(0.25..=0.5).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0.25, 0.5]",
                self.dropout_rate
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn stream_param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut c_in = self.input_size[0];
        let mut out = Vec::new();
        for (i, b) in self.conv_blocks.iter().enumerate() {
            out.push((
                format!("{prefix}.conv{i}.weight"),
                vec![b.out_channels, c_in, b.kernel, b.kernel],
            ));
            out.push((format!("{prefix}.conv{i}.bias"), vec![b.out_channels]));
            c_in = b.out_channels;
        }
        out
    }

    /// Every parameter name and shape, in registration order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let [c, _, _] = self.feature_shape()?;
        let mut out = self.stream_param_shapes("stream_a");
        if !self.shared_streams {
            out.extend(self.stream_param_shapes("stream_b"));
        }
        out.push(("classifier.weight".into(), vec![self.num_classes, c * c]));
        out.push(("classifier.bias".into(), vec![self.num_classes]));
        out.push(("embedding.weight".into(), vec![self.embedding_dim, c]));
        out.push(("embedding.bias".into(), vec![self.embedding_dim]));
        Ok(out)
    }
}

/// Parameters of the embedding head, which phase-one training keeps frozen.
pub fn is_embedding_param(name: &str) -> bool {
    name.starts_with("embedding.")
}

/// Whether dropout is active.
pub enum Mode<'a> {
    Inference,
    Train(&'a mut dyn RngCore),
}

/// Tape handles produced by [`Network::forward_on_tape`].
pub struct ForwardVars {
    /// `B×k` softmax outputs.
    pub probs: Var,
    /// `B×d` unit-norm embeddings.
    pub embeddings: Var,
    /// One handle per parameter, in [`Network::params`] order.
    pub params: Vec<Var>,
}

/// Named parameters plus the configuration that fixes their shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: BackboneConfig,
    params: Vec<(String, Tensor)>,
}

impl Network {
    /// Fan-in uniform weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, &[0x1417]);
        let params = config
            .param_shapes()?
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(config: BackboneConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes()?;
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in expected.iter().zip(&params) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces parameter values in order; shapes must be unchanged.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::InvalidInput(format!(
                "{} parameter values for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for ((name, old), new) in self.params.iter().zip(&values) {
            if old.shape() != new.shape() {
                return Err(Error::InvalidInput(format!(
                    "parameter {name}: shape {:?} replaced by {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
        }
        for ((_, old), new) in self.params.iter_mut().zip(values) {
            *old = new;
        }
        Ok(())
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.config.input_size {
            return Err(Error::InvalidInput(format!(
                "image shape {:?} does not match input size {:?}",
                image.shape(),
                self.config.input_size
            )));
        }
        Ok(())
    }

    /// Registers every parameter: trainable ones via [`Tape::param`], the
    /// rest as constants.
    pub fn register(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(name, t)| {
                if trainable(name) {
                    tape.param(name.clone(), t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        let i = self
            .params
            .iter()
            .position(|(n, _)| n == name)
            .expect("known parameter name");
        vars[i]
    }

    /// Runs one stream on a `c×h×w` image, returning its `C×gh×gw` map.
    fn stream(&self, tape: &mut Tape, vars: &[Var], prefix: &str, image: Var) -> Result<Var> {
        let mut x = image;
        for (i, b) in self.config.conv_blocks.iter().enumerate() {
            let w = self.var(vars, &format!("{prefix}.conv{i}.weight"));
            let bias = self.var(vars, &format!("{prefix}.conv{i}.bias"));
            x = tape.conv2d(x, w, b.stride, b.padding())?;
            x = tape.bias_add(x, bias)?;
            x = tape.relu(x)?;
            if b.pool > 1 {
                x = tape.max_pool2d(x, b.pool, b.pool)?;
            }
        }
        Ok(x)
    }

    /// `C×gh×gw` map to location-major `Y×C`.
    fn locations_major(tape: &mut Tape, map: Var) -> Result<Var> {
        let &[c, h, w] = tape.shape(map) else {
            unreachable!("stream output is 3-D")
        };
        let flat = tape.reshape(map, vec![c, h * w])?;
        Ok(tape.transpose(flat)?)
    }

    fn streams(&self, tape: &mut Tape, vars: &[Var], image: Var) -> Result<(Var, Var)> {
        let a = self.stream(tape, vars, "stream_a", image)?;
        let b = if self.config.shared_streams {
            a
        } else {
            self.stream(tape, vars, "stream_b", image)?
        };
        Ok((a, b))
    }

    /// Dense layer on stacked rows: `rows[B×in] → B×out` with weight
    /// `out×in` and bias `out`.
    fn dense(tape: &mut Tape, rows: Var, weight: Var, bias: Var) -> Result<Var> {
        let rows_t = tape.transpose(rows)?;
        let out_t = tape.matmul(weight, rows_t)?;
        let out_t = tape.bias_add(out_t, bias)?;
        Ok(tape.transpose(out_t)?)
    }

    /// Records a full forward pass over a batch `B×c×h×w` of model-range
    /// images.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        images: &Tensor,
        mut mode: Mode<'_>,
    ) -> Result<ForwardVars> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != self.config.input_size {
            return Err(Error::InvalidInput(format!(
                "batch shape {shape:?} does not match B×{:?}",
                self.config.input_size
            )));
        }
        let mut bilinear_rows = Vec::with_capacity(shape[0]);
        let mut pooled_rows = Vec::with_capacity(shape[0]);
        for i in 0..shape[0] {
            let image = tape.constant(images.index_axis0(i)?);
            let (a, b) = self.streams(tape, vars, image)?;
            let (la, lb) = (
                Self::locations_major(tape, a)?,
                Self::locations_major(tape, b)?,
            );
            let feature = head_on_tape(tape, la, lb, self.config.pooling)?;
            let rng = match &mut mode {
                Mode::Inference => None,
                Mode::Train(rng) => Some(&mut **rng as &mut dyn RngCore),
            };
            bilinear_rows.push(tape.dropout(feature, self.config.dropout_rate, rng)?);
            pooled_rows.push(tape.global_avg_pool(a)?);
        }
        let bilinear = tape.stack(&bilinear_rows)?;
        let logits = Self::dense(
            tape,
            bilinear,
            self.var(vars, "classifier.weight"),
            self.var(vars, "classifier.bias"),
        )?;
        let probs = tape.softmax(logits, 1)?;
        let pooled = tape.stack(&pooled_rows)?;
        let projected = Self::dense(
            tape,
            pooled,
            self.var(vars, "embedding.weight"),
            self.var(vars, "embedding.bias"),
        )?;
        let embeddings = tape.l2_normalize(projected, 1, L2_EPS)?;
        Ok(ForwardVars {
            probs,
            embeddings,
            params: vars.to_vec(),
        })
    }

    /// Location-major stream maps `(Y×N, Y×M)` of one image.
    pub fn forward_features(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, &|_| false);
        let x = tape.constant(image.clone());
        let (a, b) = self.streams(&mut tape, &vars, x)?;
        let (la, lb) = (
            Self::locations_major(&mut tape, a)?,
            Self::locations_major(&mut tape, b)?,
        );
        Ok((tape.value(la).clone(), tape.value(lb).clone()))
    }

    /// Class probabilities and embedding of one image, in inference mode.
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, &|_| false);
        let batch = image.reshape(batch_shape(image.shape(), 1))?;
        let out = self.forward_on_tape(&mut tape, &vars, &batch, Mode::Inference)?;
        let k = self.config.num_classes;
        let d = self.config.embedding_dim;
        Ok((
            tape.value(out.probs).reshape(vec![k])?,
            tape.value(out.embeddings).reshape(vec![d])?,
        ))
    }

    pub fn forward_embedding(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.infer(image)?.1)
    }

    /// Inference over many images in parallel: `(B×k probabilities, B×d
    /// embeddings)`. Each image gets its own tape, so results do not depend
    /// on the thread count.
    pub fn infer_many(&self, images: &[Tensor]) -> Result<(Tensor, Tensor)> {
        if images.is_empty() {
            return Err(Error::InvalidInput("no images to evaluate".into()));
        }
        let outs: Vec<(Tensor, Tensor)> = images
            .par_iter()
            .map(|img| self.infer(img))
            .collect::<Result<_>>()?;
        let (probs, embs): (Vec<Tensor>, Vec<Tensor>) = outs.into_iter().unzip();
        Ok((Tensor::stack(&probs)?, Tensor::stack(&embs)?))
    }
}

fn batch_shape(image: &[usize], b: usize) -> Vec<usize> {
    let mut s = vec![b];
    s.extend_from_slice(image);
    s
}
