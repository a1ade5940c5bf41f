//! Parameter layouts and forward passes of the network blocks: the BEV
//! encoders, the 1-D UNet over motion features, and MLP heads.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{ConvSpec, Graph, Var};
use super::tensor::{ParamSet, Tensor};

fn he(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("sized").trainable()
}

fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).trainable()
}

/// BEV encoder: average-pool stem, three blocks of two 3×3 conv + ReLU with
/// 2×2 average pooling between blocks, then bilinear ×2 upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub stem_pool: usize,
}

impl EncoderConfig {
    /// Input cells per output cell.
    pub fn stride(&self) -> usize {
        2 * self.stem_pool
    }

    /// Spatial dimensions must be multiples of this.
    pub fn granularity(&self) -> usize {
        4 * self.stem_pool
    }

    pub fn out_channels(&self) -> usize {
        self.widths[2]
    }

    /// Maps a continuous input index (cell centers at integers) to the
    /// matching continuous index on the output map.
    pub fn feature_coord(&self, u: f64) -> f64 {
        let s = self.stride() as f64;
        (u - 0.5 * (s - 1.0)) / s
    }

    /// Receptive field of one output cell, in input cells.
    pub fn receptive_field(&self) -> usize {
        // stem, then each block adds two 3×3 convs at its own jump
        let mut rf = self.stem_pool;
        let mut jump = self.stem_pool;
        for b in 0..3 {
            rf += 4 * jump;
            if b < 2 {
                rf += jump;
                jump *= 2;
            }
        }
        rf
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut cin = self.in_channels;
        for (b, &w) in self.widths.iter().enumerate() {
            for c in 0..2 {
                ps.insert(format!("b{b}.c{c}.w"), he(rng, vec![w, cin, 3, 3], cin * 9));
                ps.insert(format!("b{b}.c{c}.b"), zeros(vec![w]));
                cin = w;
            }
        }
        ps
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let gr = self.granularity();
        if s.len() != 3 || s[0] != self.in_channels || !s[1].is_multiple_of(gr) || !s[2].is_multiple_of(gr) {
            return Err(Error::ShapeMismatch(format!(
                "encoder wants [{}, k·{gr}, k·{gr}], got {s:?}",
                self.in_channels
            )));
        }
        let mut h = if self.stem_pool > 1 {
            g.avg_pool2d(x, self.stem_pool)?
        } else {
            x
        };
        for b in 0..3 {
            for c in 0..2 {
                let w = g.param(ps, &format!("{prefix}b{b}.c{c}.w"))?;
                let bias = g.param(ps, &format!("{prefix}b{b}.c{c}.b"))?;
                h = g.conv2d(h, w, Some(bias), ConvSpec::same(3))?;
                h = g.relu(h);
            }
            if b < 2 {
                h = g.avg_pool2d(h, 2)?;
            }
        }
        g.upsample2x(h)
    }
}

/// Fully connected layers with ReLU between them; the last layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
}

impl MlpConfig {
    pub fn new(widths: &[usize]) -> Self {
        Self {
            widths: widths.to_vec(),
        }
    }

    /// He-initialized hidden layers; the output layer starts at zero when
    /// `zero_last` so the head initially predicts exactly its bias.
    pub fn init(&self, rng: &mut impl Rng, zero_last: bool) -> ParamSet {
        let mut ps = ParamSet::new();
        let n = self.widths.len() - 1;
        for i in 0..n {
            let (din, dout) = (self.widths[i], self.widths[i + 1]);
            let w = if zero_last && i == n - 1 {
                zeros(vec![dout, din])
            } else {
                he(rng, vec![dout, din], din)
            };
            ps.insert(format!("l{i}.w"), w);
            ps.insert(format!("l{i}.b"), zeros(vec![dout]));
        }
        ps
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
        let n = self.widths.len() - 1;
        let mut h = x;
        for i in 0..n {
            let w = g.param(ps, &format!("{prefix}l{i}.w"))?;
            let b = g.param(ps, &format!("{prefix}l{i}.b"))?;
            h = g.linear(h, w, Some(b))?;
            if i + 1 < n {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// 1-D UNet over per-frame feature sequences: two strided-conv downsamplings,
/// transposed-conv upsamplings, and skip connections by channel concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base: usize,
    pub out_channels: usize,
}

impl UNetConfig {
    /// Sequence lengths are padded to a multiple of this.
    pub const MULTIPLE: usize = 4;

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let b = self.base;
        let mut ps = ParamSet::new();
        let mut conv = |name: &str, o: usize, i: usize, k: usize| {
            ps.insert(format!("{name}.w"), he(rng, vec![o, i, k], i * k));
            ps.insert(format!("{name}.b"), zeros(vec![o]));
        };
        conv("e1", b, self.in_channels, 3);
        conv("d1", 2 * b, b, 2);
        conv("e2", 2 * b, 2 * b, 3);
        conv("d2", 4 * b, 2 * b, 2);
        conv("mid", 4 * b, 4 * b, 3);
        conv("c2", 2 * b, 4 * b, 3);
        conv("out", self.out_channels, 2 * b, 3);
        ps.insert("u2.w", he(rng, vec![4 * b, 2 * b, 2], 4 * b));
        ps.insert("u2.b", zeros(vec![2 * b]));
        ps.insert("u1.w", he(rng, vec![2 * b, b, 2], 2 * b));
        ps.insert("u1.b", zeros(vec![b]));
        ps
    }

    /// `x: [C_in, L]` with L a multiple of [`UNetConfig::MULTIPLE`] → `[C_out, L]`.
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[0] != self.in_channels || s[1] == 0 || !s[1].is_multiple_of(Self::MULTIPLE) {
            return Err(Error::ShapeMismatch(format!("unet input {s:?}")));
        }
        let p = |g: &mut Graph, n: &str| -> Result<(Var, Var)> {
            Ok((
                g.param(ps, &format!("{prefix}{n}.w"))?,
                g.param(ps, &format!("{prefix}{n}.b"))?,
            ))
        };
        let conv = |g: &mut Graph, h: Var, n: &str, stride: usize, pad: usize, act: bool| -> Result<Var> {
            let (w, b) = p(g, n)?;
            let y = g.conv1d(h, w, Some(b), stride, pad)?;
            Ok(if act { g.relu(y) } else { y })
        };
        let e1 = conv(g, x, "e1", 1, 1, true)?;
        let d1 = conv(g, e1, "d1", 2, 0, true)?;
        let e2 = conv(g, d1, "e2", 1, 1, true)?;
        let d2 = conv(g, e2, "d2", 2, 0, true)?;
        let mid = conv(g, d2, "mid", 1, 1, true)?;
        let (w, b) = p(g, "u2")?;
        let u2 = g.conv_transpose1d(mid, w, Some(b))?;
        let u2 = g.relu(u2);
        let cat2 = g.concat(&[u2, e2], 0)?;
        let c2 = conv(g, cat2, "c2", 1, 1, true)?;
        let (w, b) = p(g, "u1")?;
        let u1 = g.conv_transpose1d(c2, w, Some(b))?;
        let u1 = g.relu(u1);
        let cat1 = g.concat(&[u1, e1], 0)?;
        conv(g, cat1, "out", 1, 1, false)
    }

    /// Runs on any length by zero-padding the tail and cropping the output.
    pub fn forward_any(&self, g: &mut Graph, ps: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::ShapeMismatch(format!("unet input {s:?}")));
        }
        let len = s[1];
        let padded = len.div_ceil(Self::MULTIPLE) * Self::MULTIPLE;
        let xin = if padded == len {
            x
        } else {
            let z = g.input(Tensor::zeros(vec![s[0], padded - len]));
            g.concat(&[x, z], 1)?
        };
        let y = self.forward(g, ps, prefix, xin)?;
        if padded == len {
            Ok(y)
        } else {
            g.slice(y, 1, 0, len)
        }
    }
}
