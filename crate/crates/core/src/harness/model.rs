//! Loadable parameter blocks for the desk-scale network: a two-layer
//! convolutional encoder, the offset generator, the depth/context net, the
//! attention maps and a per-cell channel-to-height classifier head.

use std::fs;
use std::path::Path;

use crate::bev::{AttentionParams, BevFeature};
use crate::conv::{avg_pool, relu, ConvParams};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::VoxelLogits;
use crate::tensor::Tensor3;

/// Architecture sizes the parameter blocks must agree with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub encoder_channels: [usize; 2],
    pub igs_points: usize,
    pub context_channels: usize,
    pub depth_bins: usize,
    pub attention_points: usize,
    pub height_cells: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: [ConvParams; 2],
    pub offset_conv: ConvParams,
    pub igs_kernel: Vec<f64>,
    pub depth_net: ConvParams,
    pub attention: AttentionParams,
    /// 1×1 map from context channels to `Z · N_cla` logits per BEV cell.
    pub head: ConvParams,
}

/// File names used by [`ModelParams::load_dir`] and [`ModelParams::save_dir`].
pub const PARAM_FILES: [&str; 13] = [
    "encoder1_weight.raw",
    "encoder1_bias.raw",
    "encoder2_weight.raw",
    "encoder2_bias.raw",
    "offset_weight.raw",
    "offset_bias.raw",
    "igs_kernel.raw",
    "depth_weight.raw",
    "depth_bias.raw",
    "attention_offsets.raw",
    "attention_logits.raw",
    "head_weight.raw",
    "head_bias.raw",
];

impl ModelParams {
    /// Deterministic untrained parameters. The head is biased towards
    /// ground in the lowest layer and free space above it.
    pub fn seeded(shape: &ModelShape, seed: u64) -> Result<Self> {
        let [c1, c2] = shape.encoder_channels;
        let k = shape.igs_points;
        let encoder = [ConvParams::seeded(c1, 3, 3, 1.0, seed)?, ConvParams::seeded(c2, c1, 3, 1.0, seed + 1)?];
        let offset_conv = ConvParams::seeded(3 * k, 1, 3, 2.0, seed + 2)?;
        let igs_kernel = vec![1.0 / k as f64; k];
        let depth_net = ConvParams::seeded(shape.context_channels + shape.depth_bins, c2, 1, 1.0, seed + 3)?;
        let attention = AttentionParams::seeded(shape.attention_points, shape.context_channels, 0.5, seed + 4)?;
        let mut head =
            ConvParams::seeded(shape.height_cells * shape.n_classes, shape.context_channels, 1, 0.1, seed + 5)?;
        for z in 0..shape.height_cells {
            let favoured = if z == 0 { 1 } else { 0 };
            if favoured < shape.n_classes {
                head.bias_mut()[z * shape.n_classes + favoured] = 1.0;
            }
        }
        let p = Self { encoder, offset_conv, igs_kernel, depth_net, attention, head };
        p.check(shape)?;
        Ok(p)
    }

    pub fn check(&self, s: &ModelShape) -> Result<()> {
        let [c1, c2] = s.encoder_channels;
        let conv_ok = |p: &ConvParams, o: usize, i: usize, k: usize| {
            p.out_channels() == o && p.in_channels() == i && p.kernel() == k
        };
        let ok = conv_ok(&self.encoder[0], c1, 3, 3)
            && conv_ok(&self.encoder[1], c2, c1, 3)
            && conv_ok(&self.offset_conv, 3 * s.igs_points, 1, self.offset_conv.kernel())
            && self.igs_kernel.len() == s.igs_points
            && conv_ok(&self.depth_net, s.context_channels + s.depth_bins, c2, 1)
            && self.attention.k_points() == s.attention_points
            && self.attention.channels() == s.context_channels
            && conv_ok(&self.head, s.height_cells * s.n_classes, s.context_channels, 1);
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("model parameters do not match architecture {s:?}")))
        }
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let f = |i: usize| dir.join(PARAM_FILES[i]);
        let kernel = io::read_raw(f(6))?;
        if kernel.channels() != 1 || kernel.height() != 1 {
            return Err(Error::ShapeMismatch(format!("igs kernel shape {:?}, expected [1, 1, K]", kernel.shape())));
        }
        Ok(Self {
            encoder: [ConvParams::load(f(0), f(1))?, ConvParams::load(f(2), f(3))?],
            offset_conv: ConvParams::load(f(4), f(5))?,
            igs_kernel: kernel.into_data(),
            depth_net: ConvParams::load(f(7), f(8))?,
            attention: AttentionParams::load(f(9), f(10))?,
            head: ConvParams::load(f(11), f(12))?,
        })
    }

    /// Writes every block as an `f64` raw tensor; returns the written paths.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let k = self.igs_kernel.len();
        let attention = self.attention.to_tensors();
        let tensors = [
            self.encoder[0].weight_tensor(),
            self.encoder[0].bias_tensor(),
            self.encoder[1].weight_tensor(),
            self.encoder[1].bias_tensor(),
            self.offset_conv.weight_tensor(),
            self.offset_conv.bias_tensor(),
            Tensor3::new(1, 1, k, self.igs_kernel.clone())?,
            self.depth_net.weight_tensor(),
            self.depth_net.bias_tensor(),
            attention.0,
            attention.1,
            self.head.weight_tensor(),
            self.head.bias_tensor(),
        ];
        let mut paths = Vec::new();
        for (name, t) in PARAM_FILES.iter().zip(&tensors) {
            let p = dir.join(name);
            io::write_raw(&p, t, io::DType::F64)?;
            paths.push(p);
        }
        Ok(paths)
    }

    /// Two conv + ReLU + 2×2 average pooling stages: `3×H×W → C2×H/4×W/4`.
    pub fn encode(&self, image: &Tensor3) -> Result<Tensor3> {
        let x = avg_pool(&relu(&self.encoder[0].apply(image)?), 2)?;
        avg_pool(&relu(&self.encoder[1].apply(&x)?), 2)
    }

    /// Per-cell logits reshaped channel-to-height into voxel order `(x, y, z)`.
    pub fn classify(&self, f_bev: &BevFeature, height_cells: usize, n_classes: usize) -> Result<VoxelLogits> {
        let out = self.head.apply(f_bev.tensor())?;
        let (nx, ny) = (out.height(), out.width());
        let mut data = Vec::with_capacity(nx * ny * height_cells * n_classes);
        for i in 0..nx {
            for j in 0..ny {
                for z in 0..height_cells {
                    for m in 0..n_classes {
                        data.push(out.get(z * n_classes + m, i, j));
                    }
                }
            }
        }
        VoxelLogits::new(n_classes, data)
    }
}
