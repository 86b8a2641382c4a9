//! Small dense convolutions used by the encoder, the offset generator and the
//! depth/context split.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor3;

/// Square `k×k` convolution weights, `out × in × k × k`, plus one bias per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("kernel size must be odd, got {kernel}")));
        }
        if weight.len() != out_channels * in_channels * kernel * kernel {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for a {out_channels}x{in_channels}x{kernel}x{kernel} kernel",
                weight.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::ShapeMismatch(format!("{} biases for {out_channels} output channels", bias.len())));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("convolution parameters".into()));
        }
        Ok(Self { out_channels, in_channels, kernel, weight, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(
            out_channels,
            in_channels,
            kernel,
            vec![0.0; out_channels * in_channels * kernel * kernel],
            vec![0.0; out_channels],
        )
    }

    /// Uniform weights in `±scale / sqrt(fan_in)`, zero bias.
    pub fn seeded(out_channels: usize, in_channels: usize, kernel: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = scale / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight =
            (0..out_channels * in_channels * kernel * kernel).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(out_channels, in_channels, kernel, weight, vec![0.0; out_channels])
    }

    /// Weights from a raw tensor of shape `[out, in, k*k]`, bias from `[1, 1, out]`.
    pub fn from_tensors(weight: &Tensor3, bias: &Tensor3) -> Result<Self> {
        let [out, inp, kk] = weight.shape();
        let k = (kk as f64).sqrt().round() as usize;
        if k * k != kk {
            return Err(Error::ShapeMismatch(format!("last weight dimension {kk} is not a square")));
        }
        if bias.shape() != [1, 1, out] {
            return Err(Error::ShapeMismatch(format!("bias shape {:?}, expected [1, 1, {out}]", bias.shape())));
        }
        Self::new(out, inp, k, weight.data().to_vec(), bias.data().to_vec())
    }

    pub fn load(weight: impl AsRef<Path>, bias: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensors(&io::read_raw(weight)?, &io::read_raw(bias)?)
    }

    pub fn weight_tensor(&self) -> Tensor3 {
        Tensor3::new(self.out_channels, self.in_channels, self.kernel * self.kernel, self.weight.clone())
            .expect("validated on construction")
    }

    pub fn bias_tensor(&self) -> Tensor3 {
        Tensor3::new(1, 1, self.out_channels, self.bias.clone()).expect("validated on construction")
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    /// Same-size convolution with edge replication at the borders.
    pub fn apply(&self, input: &Tensor3) -> Result<Tensor3> {
        if input.channels() != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        let (h, w) = (input.height(), input.width());
        let r = (self.kernel / 2) as i64;
        let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        Tensor3::from_fn(self.out_channels, h, w, |o, y, x| {
            let mut acc = self.bias[o];
            for i in 0..self.in_channels {
                for ky in 0..self.kernel {
                    let sy = clampi(y as i64 + ky as i64 - r, h);
                    for kx in 0..self.kernel {
                        let sx = clampi(x as i64 + kx as i64 - r, w);
                        acc += self.w(o, i, ky, kx) * input.get(i, sy, sx);
                    }
                }
            }
            acc
        })
    }
}

pub fn relu(t: &Tensor3) -> Tensor3 {
    t.map(|v| v.max(0.0)).expect("relu keeps values finite")
}

/// Non-overlapping `factor×factor` average pooling.
pub fn avg_pool(t: &Tensor3, factor: usize) -> Result<Tensor3> {
    if factor == 0 || !t.height().is_multiple_of(factor) || !t.width().is_multiple_of(factor) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} is not divisible by pooling factor {factor}",
            t.height(),
            t.width()
        )));
    }
    let area = (factor * factor) as f64;
    Tensor3::from_fn(t.channels(), t.height() / factor, t.width() / factor, |c, y, x| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += t.get(c, y * factor + dy, x * factor + dx);
            }
        }
        s / area
    })
}
