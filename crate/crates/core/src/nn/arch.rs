//! Encoder/decoder presets for 3×32×32 inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Builder, Layer, Sequential};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Three stride-2 convolutions; fast enough for tests.
    Tiny,
    /// CIFAR-style ResNet18 trunk: 3×3 stem, no max-pool.
    #[serde(rename = "resnet18_32")]
    Resnet18_32,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Resnet18_32 => "resnet18_32",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "resnet18_32" => Ok(Preset::Resnet18_32),
            other => Err(format!("unknown preset `{other}` (expected tiny or resnet18_32)")),
        }
    }
}

/// `(channels, first-block stride)` per ResNet18 stage.
pub const RESNET18_STAGES: [(usize, usize); 4] = [(64, 1), (128, 2), (256, 2), (512, 2)];
pub const TINY_CHANNELS: [usize; 3] = [8, 16, 32];
pub const DECODER_CHANNELS: [usize; 6] = [512, 256, 128, 64, 32, 3];

fn basic_block<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Layer {
    let main = vec![
        b.conv(&format!("{name}.conv1"), cin, cout, 3, stride, 1, false),
        b.batch_norm(&format!("{name}.bn1"), cout),
        Layer::Relu,
        b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false),
        b.batch_norm(&format!("{name}.bn2"), cout),
    ];
    let shortcut = if stride != 1 || cin != cout {
        vec![
            b.conv(&format!("{name}.shortcut.conv"), cin, cout, 1, stride, 0, false),
            b.batch_norm(&format!("{name}.shortcut.bn"), cout),
        ]
    } else {
        Vec::new()
    };
    Layer::Residual { main, shortcut }
}

/// Feature extractor without the output head; returns the trunk and its width.
pub fn trunk<T: Scalar>(b: &mut Builder<'_, T>, preset: Preset, prefix: &str) -> (Sequential, usize) {
    let mut layers = Vec::new();
    match preset {
        Preset::Resnet18_32 => {
            layers.push(b.conv(&format!("{prefix}.stem.conv"), 3, 64, 3, 1, 1, false));
            layers.push(b.batch_norm(&format!("{prefix}.stem.bn"), 64));
            layers.push(Layer::Relu);
            let mut cin = 64;
            for (s, &(cout, stride)) in RESNET18_STAGES.iter().enumerate() {
                for blk in 0..2 {
                    let name = format!("{prefix}.layer{}.{blk}", s + 1);
                    let st = if blk == 0 { stride } else { 1 };
                    layers.push(basic_block(b, &name, cin, cout, st));
                    cin = cout;
                }
            }
            layers.push(Layer::GlobalAvgPool);
            (Sequential { layers }, 512)
        }
        Preset::Tiny => {
            let mut cin = 3;
            for (i, &c) in TINY_CHANNELS.iter().enumerate() {
                layers.push(b.conv(&format!("{prefix}.conv{}", i + 1), cin, c, 3, 2, 1, true));
                layers.push(Layer::Relu);
                cin = c;
            }
            layers.push(Layer::Flatten);
            (Sequential { layers }, 32 * 4 * 4)
        }
    }
}

/// Trunk followed by a linear head to `out_dim`.
pub fn encoder<T: Scalar>(b: &mut Builder<'_, T>, preset: Preset, prefix: &str, out_dim: usize) -> Sequential {
    let (mut seq, width) = trunk(b, preset, prefix);
    seq.layers.push(b.linear(&format!("{prefix}.fc"), width, out_dim));
    seq
}

/// Latent vector back to a sigmoid-activated `[N, 3, 32, 32]` image.
pub fn decoder<T: Scalar>(b: &mut Builder<'_, T>, preset: Preset, prefix: &str, latent_dim: usize) -> Sequential {
    let mut layers = Vec::new();
    match preset {
        Preset::Resnet18_32 => {
            layers.push(b.linear(&format!("{prefix}.fc"), latent_dim, 512));
            layers.push(Layer::Relu);
            layers.push(Layer::Unflatten(vec![512, 1, 1]));
            for (i, w) in DECODER_CHANNELS.windows(2).enumerate() {
                layers.push(b.conv_transpose(&format!("{prefix}.deconv{}", i + 1), w[0], w[1], 4, 2, 1));
                if i + 2 < DECODER_CHANNELS.len() {
                    layers.push(Layer::Relu);
                }
            }
        }
        Preset::Tiny => {
            layers.push(b.linear(&format!("{prefix}.fc"), latent_dim, 32 * 4 * 4));
            layers.push(Layer::Relu);
            layers.push(Layer::Unflatten(vec![32, 4, 4]));
            let chans = [32, 16, 8, 3];
            for (i, w) in chans.windows(2).enumerate() {
                layers.push(b.conv_transpose(&format!("{prefix}.deconv{}", i + 1), w[0], w[1], 4, 2, 1));
                if i + 2 < chans.len() {
                    layers.push(Layer::Relu);
                }
            }
        }
    }
    layers.push(Layer::Sigmoid);
    Sequential { layers }
}
