//! Reference architectures: a 1-D residual regressor for scalar targets and
//! a 1-D U-Net for signal-to-signal targets. Both are built from the generic
//! layer catalog so the search and quantization passes treat them like any
//! other graph.

use super::{Graph, LayerSpec, INPUT};
use crate::error::{Error, Result};

/// Residual scalar regressor. `blocks_per_stage` basic blocks at each of the
/// three stages; stage channel counts are `base`, `2*base`, `4*base`; stages
/// after the first downsample by 2. Output is a single value per input.
#[derive(Debug, Clone, Copy)]
pub struct ResNetConfig {
    pub input_len: usize,
    pub blocks_per_stage: usize,
    pub base_channels: usize,
    pub k: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            input_len: 625,
            blocks_per_stage: 2,
            base_channels: 58,
            k: 3,
        }
    }
}

pub fn build_resnet1d(cfg: &ResNetConfig) -> Result<Graph> {
    if cfg.k % 2 == 0 || cfg.k == 0 {
        return Err(Error::Invalid("residual block kernel must be odd".into()));
    }
    if cfg.base_channels == 0 || cfg.blocks_per_stage == 0 {
        return Err(Error::Invalid("base_channels and blocks_per_stage must be positive".into()));
    }
    let mut g = Graph::new(1, cfg.input_len);
    let pad = cfg.k / 2;

    let stem = g.push(
        LayerSpec::Conv1d {
            c_in: 1,
            c_out: cfg.base_channels,
            k: 7,
            stride: 2,
            padding: 3,
        },
        vec![INPUT],
    );
    let stem_bn = g.push(LayerSpec::BatchNorm { c: cfg.base_channels }, vec![stem]);
    let mut prev = g.push(LayerSpec::Relu, vec![stem_bn]);
    let mut c_prev = cfg.base_channels;

    for stage in 0..3 {
        let c = cfg.base_channels << stage;
        for block in 0..cfg.blocks_per_stage {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let conv1 = g.push(
                LayerSpec::Conv1d {
                    c_in: c_prev,
                    c_out: c,
                    k: cfg.k,
                    stride,
                    padding: pad,
                },
                vec![prev],
            );
            let bn1 = g.push(LayerSpec::BatchNorm { c }, vec![conv1]);
            let act1 = g.push(LayerSpec::Relu, vec![bn1]);
            let conv2 = g.push(
                LayerSpec::Conv1d {
                    c_in: c,
                    c_out: c,
                    k: cfg.k,
                    stride: 1,
                    padding: pad,
                },
                vec![act1],
            );
            let bn2 = g.push(LayerSpec::BatchNorm { c }, vec![conv2]);
            let skip = if stride != 1 || c_prev != c {
                let proj = g.push(
                    LayerSpec::Conv1d {
                        c_in: c_prev,
                        c_out: c,
                        k: 1,
                        stride,
                        padding: 0,
                    },
                    vec![prev],
                );
                g.push(LayerSpec::BatchNorm { c }, vec![proj])
            } else {
                prev
            };
            let sum = g.push(LayerSpec::Add, vec![bn2, skip]);
            prev = g.push(LayerSpec::Relu, vec![sum]);
            c_prev = c;
        }
    }

    let gap = g.push(LayerSpec::GlobalAvgPool, vec![prev]);
    g.push(
        LayerSpec::Linear {
            in_features: c_prev,
            out_features: 1,
        },
        vec![gap],
    );
    g.validate()?;
    Ok(g)
}

/// U-shaped signal-to-signal network: `depth` encoder levels of
/// conv/norm/relu + max-pool, a bottleneck, then mirrored upsample + skip
/// concatenation + conv levels and a 1x1 head back to one channel. The
/// input length must be divisible by `2^depth`.
#[derive(Debug, Clone, Copy)]
pub struct UNetConfig {
    pub input_len: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub k: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_len: 624,
            depth: 2,
            base_channels: 15,
            k: 5,
        }
    }
}

pub fn build_unet1d(cfg: &UNetConfig) -> Result<Graph> {
    if cfg.k % 2 == 0 || cfg.k == 0 {
        return Err(Error::Invalid("unet kernel must be odd".into()));
    }
    if cfg.depth == 0 || cfg.base_channels == 0 {
        return Err(Error::Invalid("depth and base_channels must be positive".into()));
    }
    if cfg.input_len % (1 << cfg.depth) != 0 {
        return Err(Error::Invalid(format!(
            "input length {} is not divisible by 2^{}",
            cfg.input_len, cfg.depth
        )));
    }
    let mut g = Graph::new(1, cfg.input_len);
    let pad = cfg.k / 2;
    let conv_bn_relu = |g: &mut Graph, c_in: usize, c_out: usize, src: usize| {
        let conv = g.push(
            LayerSpec::Conv1d {
                c_in,
                c_out,
                k: cfg.k,
                stride: 1,
                padding: pad,
            },
            vec![src],
        );
        let bn = g.push(LayerSpec::BatchNorm { c: c_out }, vec![conv]);
        g.push(LayerSpec::Relu, vec![bn])
    };

    let mut skips = Vec::with_capacity(cfg.depth);
    let mut prev = INPUT;
    let mut c_prev = 1;
    for level in 0..cfg.depth {
        let c = cfg.base_channels << level;
        let feat = conv_bn_relu(&mut g, c_prev, c, prev);
        skips.push((feat, c));
        prev = g.push(LayerSpec::MaxPool { k: 2, stride: 2 }, vec![feat]);
        c_prev = c;
    }

    let c_bottleneck = cfg.base_channels << cfg.depth;
    prev = conv_bn_relu(&mut g, c_prev, c_bottleneck, prev);
    c_prev = c_bottleneck;

    for level in (0..cfg.depth).rev() {
        let (skip, c_skip) = skips[level];
        let up = g.push(LayerSpec::Upsample { factor: 2 }, vec![prev]);
        let cat = g.push(LayerSpec::Concat, vec![skip, up]);
        let c = cfg.base_channels << level;
        prev = conv_bn_relu(&mut g, c_skip + c_prev, c, cat);
        c_prev = c;
    }

    g.push(
        LayerSpec::Conv1d {
            c_in: c_prev,
            c_out: 1,
            k: 1,
            stride: 1,
            padding: 0,
        },
        vec![prev],
    );
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Shape;

    #[test]
    fn resnet_profile_size_and_output() {
        let g = build_resnet1d(&ResNetConfig::default()).unwrap();
        assert_eq!(g.param_count(), 787_177);
        assert_eq!(g.output_shape().unwrap(), Shape::Vector { f: 1 });
        // Within 5% of the 792k reference budget.
        let p = g.param_count() as f64;
        assert!((p - 792_000.0).abs() / 792_000.0 < 0.05);
    }

    #[test]
    fn unet_profile_size_and_output() {
        let g = build_unet1d(&UNetConfig::default()).unwrap();
        assert_eq!(g.param_count(), 28_666);
        assert_eq!(g.output_shape().unwrap(), Shape::Series { c: 1, l: 624 });
        let p = g.param_count() as f64;
        assert!((p - 29_700.0).abs() / 29_700.0 < 0.05);
    }

    #[test]
    fn param_count_matches_spelled_out_sum() {
        // Recount the residual profile layer by layer, straight off the node
        // list, as a cross-check on the closed-form accounting.
        let g = build_resnet1d(&ResNetConfig::default()).unwrap();
        let mut total = 0u64;
        for node in &g.nodes {
            total += match node.spec {
                LayerSpec::Conv1d { c_in, c_out, k, .. } => (c_out * c_in * k + c_out) as u64,
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => (in_features * out_features + out_features) as u64,
                LayerSpec::BatchNorm { c } => 2 * c as u64,
                _ => 0,
            };
        }
        assert_eq!(total, g.param_count());
    }

    #[test]
    fn unet_rejects_indivisible_length() {
        let cfg = UNetConfig {
            input_len: 625,
            ..UNetConfig::default()
        };
        assert!(build_unet1d(&cfg).is_err());
    }

    #[test]
    fn small_variants_stay_valid() {
        for blocks in 1..=2 {
            for base in [4usize, 8] {
                let g = build_resnet1d(&ResNetConfig {
                    input_len: 64,
                    blocks_per_stage: blocks,
                    base_channels: base,
                    k: 3,
                })
                .unwrap();
                assert_eq!(g.output_shape().unwrap(), Shape::Vector { f: 1 });
            }
        }
        for depth in 1..=3 {
            let g = build_unet1d(&UNetConfig {
                input_len: 64,
                depth,
                base_channels: 4,
                k: 3,
            })
            .unwrap();
            assert_eq!(g.output_shape().unwrap(), Shape::Series { c: 1, l: 64 });
        }
    }
}
