//! U-Net style 3D reconstruction network.
//!
//! Contracting/bottleneck/expanding stages with channel doubling per
//! downsampling level, skip concatenations between equal resolutions,
//! residual blocks near the input and output, PReLU activations throughout,
//! and a linear single-channel projection at the end. Downsampling uses
//! stride-2 3x3x3 convolutions and upsampling uses 3x4x4 transposed
//! convolutions, both acting on h and w only; the depth axis is never
//! resampled.
//!
//! The layer count reported by `layer_count` follows one convention: every
//! weight-bearing convolution (standard or transposed) is a layer; PReLU
//! activations are not counted.

use crate::error::{Error, Result};
use crate::tensor::{numel, ConvSpec, Dims5, NodeId, Tape, Tensor5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const INPUT_CHANNELS: usize = 2;
pub const OUTPUT_CHANNELS: usize = 1;
const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    /// Number of distinct transaxial resolutions (1 = no resampling).
    pub resolution_levels: usize,
    pub entry_residual_blocks: usize,
    pub exit_residual_blocks: usize,
}

impl NetworkConfig {
    /// Small configuration that trains on a workstation in minutes.
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            resolution_levels: 2,
            entry_residual_blocks: 1,
            exit_residual_blocks: 1,
        }
    }

    /// Full-scale configuration: 31 convolution layers, parameter count in
    /// the tens of millions.
    pub fn reference() -> Self {
        Self {
            base_channels: 24,
            resolution_levels: 5,
            entry_residual_blocks: 3,
            exit_residual_blocks: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 {
            return Err(Error::InvalidConfig("base channels must be at least 1".into()));
        }
        if self.resolution_levels < 1 {
            return Err(Error::InvalidConfig("need at least one resolution level".into()));
        }
        Ok(())
    }

    /// h and w of any input must be divisible by this.
    pub fn divisibility(&self) -> usize {
        1 << (self.resolution_levels - 1)
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// One architectural stage; each expands to a fixed set of parameters.
#[derive(Clone, Debug)]
enum Stage {
    /// Conv + PReLU (entry, per-level and bottleneck convolutions).
    Conv { spec: ConvSpec, tag: String },
    /// conv-PReLU-conv, additive skip, PReLU after the sum.
    Residual { channels: usize, tag: String },
    /// Remember the current tensor as the skip for `level`.
    SaveSkip { level: usize },
    /// Stride-2 conv + PReLU into a deeper level.
    Down { spec: ConvSpec, tag: String },
    /// Transposed conv + PReLU, concat with the skip, conv + PReLU.
    Up { up: ConvSpec, merge: ConvSpec, level: usize, tag: String },
    /// Linear 1-channel projection.
    Projection { spec: ConvSpec },
}

fn stages(config: &NetworkConfig) -> Vec<Stage> {
    let mut out = Vec::new();
    let levels = config.resolution_levels;
    out.push(Stage::Conv {
        spec: ConvSpec::standard(INPUT_CHANNELS, config.base_channels),
        tag: "entry".into(),
    });
    for i in 0..config.entry_residual_blocks {
        out.push(Stage::Residual { channels: config.base_channels, tag: format!("entry_res{i}") });
    }
    for level in 1..levels {
        out.push(Stage::SaveSkip { level: level - 1 });
        out.push(Stage::Down {
            spec: ConvSpec::downsample(config.channels_at(level - 1), config.channels_at(level)),
            tag: format!("enc{level}_down"),
        });
        out.push(Stage::Conv {
            spec: ConvSpec::standard(config.channels_at(level), config.channels_at(level)),
            tag: format!("enc{level}_conv"),
        });
    }
    let bottom = config.channels_at(levels - 1);
    out.push(Stage::Conv {
        spec: ConvSpec::standard(bottom, bottom),
        tag: "bottleneck".into(),
    });
    for level in (1..levels).rev() {
        let hi = config.channels_at(level);
        let lo = config.channels_at(level - 1);
        out.push(Stage::Up {
            up: ConvSpec::upsample(hi, lo),
            merge: ConvSpec::standard(2 * lo, lo),
            level: level - 1,
            tag: format!("dec{level}"),
        });
    }
    for i in 0..config.exit_residual_blocks {
        out.push(Stage::Residual { channels: config.base_channels, tag: format!("exit_res{i}") });
    }
    out.push(Stage::Projection {
        spec: ConvSpec::standard(config.base_channels, OUTPUT_CHANNELS),
    });
    out
}

/// Weight-bearing convolution layers in the canonical layout.
pub fn layer_count(config: &NetworkConfig) -> usize {
    stages(config)
        .iter()
        .map(|s| match s {
            Stage::Conv { .. } | Stage::Down { .. } | Stage::Projection { .. } => 1,
            Stage::Residual { .. } | Stage::Up { .. } => 2,
            Stage::SaveSkip { .. } => 0,
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor5,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: Vec<Parameter>,
}

/// Parameter manifest: names and dims in forward order.
pub fn param_specs(config: &NetworkConfig) -> Result<Vec<(String, Dims5)>> {
    config.validate()?;
    let mut out = Vec::new();
    let mut conv = |tag: &str, spec: &ConvSpec, with_act: bool, out: &mut Vec<(String, Dims5)>| {
        out.push((format!("{tag}.w"), spec.weight_dims()));
        out.push((format!("{tag}.b"), spec.bias_dims()));
        if with_act {
            out.push((format!("{tag}.prelu"), [1, spec.out_channels, 1, 1, 1]));
        }
    };
    for stage in stages(config) {
        match stage {
            Stage::Conv { spec, tag } | Stage::Down { spec, tag } => {
                conv(&tag, &spec, true, &mut out);
            }
            Stage::Residual { channels, tag } => {
                let spec = ConvSpec::standard(channels, channels);
                conv(&format!("{tag}.conv1"), &spec, true, &mut out);
                conv(&format!("{tag}.conv2"), &spec, false, &mut out);
                out.push((format!("{tag}.prelu"), [1, channels, 1, 1, 1]));
            }
            Stage::SaveSkip { .. } => {}
            Stage::Up { up, merge, tag, .. } => {
                conv(&format!("{tag}.up"), &up, true, &mut out);
                conv(&format!("{tag}.merge"), &merge, true, &mut out);
            }
            Stage::Projection { spec } => {
                out.push(("proj.w".into(), spec.weight_dims()));
                out.push(("proj.b".into(), spec.bias_dims()));
            }
        }
    }
    Ok(out)
}

/// Build a model with Kaiming fan-in initialization (rectifier gain for the
/// 0.25 PReLU slope), zero biases and 0.25 slopes. Deterministic per seed.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Model> {
    let specs = param_specs(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(specs.len());
    for (name, dims) in specs {
        let tensor = if name.ends_with(".w") {
            let fan_in = dims[1] * dims[2] * dims[3] * dims[4];
            let gain = 2.0 / (1.0 + PRELU_INIT * PRELU_INIT);
            let std = (gain / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..numel(dims)).map(|_| normal.sample(&mut rng)).collect();
            Tensor5::from_vec(dims, data)?
        } else if name.ends_with(".prelu") {
            Tensor5::from_vec(dims, vec![PRELU_INIT; numel(dims)])?
        } else {
            Tensor5::zeros(dims)
        };
        params.push(Parameter { name, tensor });
    }
    Ok(Model { config: *config, params })
}

pub fn param_count(model: &Model) -> usize {
    model.params.iter().map(|p| p.tensor.numel()).sum()
}

/// Run the network on an existing tape. Returns the output node and the
/// parameter leaf nodes in `model.params` order (for optimizer updates).
pub fn forward_on_tape(
    model: &Model,
    tape: &mut Tape,
    input: NodeId,
    trainable: bool,
) -> Result<(NodeId, Vec<NodeId>)> {
    let config = &model.config;
    config.validate()?;
    let [_, c, d, h, w] = tape.dims(input);
    if c != INPUT_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "network input must have {INPUT_CHANNELS} channels, got {c}"
        )));
    }
    let div = config.divisibility();
    if h % div != 0 || w % div != 0 {
        return Err(Error::ShapeMismatch(format!(
            "input h and w must be divisible by {div} for {} resolution levels, got {h}x{w}",
            config.resolution_levels
        )));
    }

    let param_ids: Vec<NodeId> = model
        .params
        .iter()
        .map(|p| tape.leaf(p.tensor.clone(), trainable))
        .collect();
    let mut cursor = 0usize;
    let mut next = |tape: &Tape, expect: Dims5| -> Result<NodeId> {
        let id = param_ids[cursor];
        if tape.dims(id) != expect {
            return Err(Error::IncompatibleCheckpoint(format!(
                "parameter {} has dims {:?}, expected {:?}",
                model.params[cursor].name,
                tape.dims(id),
                expect
            )));
        }
        cursor += 1;
        Ok(id)
    };

    let conv_act = |tape: &mut Tape,
                    next: &mut dyn FnMut(&Tape, Dims5) -> Result<NodeId>,
                    x: NodeId,
                    spec: &ConvSpec,
                    act: bool|
     -> Result<NodeId> {
        let wid = next(tape, spec.weight_dims())?;
        let bid = next(tape, spec.bias_dims())?;
        let y = if spec.transposed {
            tape.conv3d_transpose(x, wid, Some(bid), spec)?
        } else {
            tape.conv3d(x, wid, Some(bid), spec)?
        };
        if act {
            let slope = next(tape, [1, spec.out_channels, 1, 1, 1])?;
            tape.prelu(y, slope)
        } else {
            Ok(y)
        }
    };

    let mut x = input;
    let mut skips: Vec<Option<NodeId>> = vec![None; config.resolution_levels];
    for stage in stages(config) {
        match stage {
            Stage::Conv { spec, .. } | Stage::Down { spec, .. } => {
                x = conv_act(tape, &mut next, x, &spec, true)?;
            }
            Stage::Residual { channels, .. } => {
                let spec = ConvSpec::standard(channels, channels);
                let y = conv_act(tape, &mut next, x, &spec, true)?;
                let y = conv_act(tape, &mut next, y, &spec, false)?;
                let summed = tape.add(x, y)?;
                let slope = next(tape, [1, channels, 1, 1, 1])?;
                x = tape.prelu(summed, slope)?;
            }
            Stage::SaveSkip { level } => {
                skips[level] = Some(x);
            }
            Stage::Up { up, merge, level, .. } => {
                let upped = conv_act(tape, &mut next, x, &up, true)?;
                let skip = skips[level].ok_or_else(|| {
                    Error::GraphContract(format!("missing skip tensor for level {level}"))
                })?;
                // Skip concatenation requires equal resolutions.
                if tape.dims(skip)[2..] != tape.dims(upped)[2..] {
                    return Err(Error::ShapeMismatch(format!(
                        "skip {:?} vs upsampled {:?}",
                        tape.dims(skip),
                        tape.dims(upped)
                    )));
                }
                let cat = tape.concat_channels(skip, upped)?;
                x = conv_act(tape, &mut next, cat, &merge, true)?;
            }
            Stage::Projection { spec } => {
                x = conv_act(tape, &mut next, x, &spec, false)?;
            }
        }
        // Depth is never resampled.
        assert_eq!(tape.dims(x)[2], d, "depth changed mid-network");
    }
    debug_assert_eq!(cursor, param_ids.len());
    Ok((x, param_ids))
}

/// Frozen-model inference on a fresh tape.
pub fn forward(model: &Model, input: &Tensor5) -> Result<Tensor5> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let (out, _) = forward_on_tape(model, &mut tape, x, false)?;
    Tensor5::from_vec(tape.dims(out), tape.values(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_builds_deterministically() {
        let config = NetworkConfig::desk();
        let a = build_network(&config, 42).unwrap();
        let b = build_network(&config, 42).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_network(&config, 43).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn reference_config_hits_the_layer_and_parameter_budget() {
        let config = NetworkConfig::reference();
        assert_eq!(layer_count(&config), 31);
        let total: usize = param_specs(&config)
            .unwrap()
            .iter()
            .map(|(_, d)| numel(*d))
            .sum();
        assert!(
            (18_000_000..=22_000_000).contains(&total),
            "reference parameter count {total}"
        );
    }

    #[test]
    fn single_conv_param_count_matches_closed_form() {
        // One 3x3x3 conv from 2 to 8 channels with bias: 2*8*27 + 8 = 440.
        let spec = ConvSpec::standard(2, 8);
        let w = numel(spec.weight_dims());
        let b = numel(spec.bias_dims());
        assert_eq!(w + b, 440);
        // PReLU over 8 channels adds 8 learnable slopes.
        assert_eq!(numel([1, 8, 1, 1, 1]), 8);
    }

    #[test]
    fn forward_preserves_shape() {
        let config = NetworkConfig {
            base_channels: 4,
            resolution_levels: 3,
            entry_residual_blocks: 1,
            exit_residual_blocks: 1,
        };
        let model = build_network(&config, 7).unwrap();
        let input = Tensor5::zeros([1, 2, 5, 16, 16]);
        let out = forward(&model, &input).unwrap();
        assert_eq!(out.dims, [1, 1, 5, 16, 16]);
        assert!(out.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn indivisible_input_is_rejected_with_divisibility() {
        let config = NetworkConfig {
            base_channels: 4,
            resolution_levels: 3,
            entry_residual_blocks: 1,
            exit_residual_blocks: 1,
        };
        let model = build_network(&config, 7).unwrap();
        let input = Tensor5::zeros([1, 2, 4, 18, 16]);
        let err = forward(&model, &input).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "{err}");
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let model = build_network(&NetworkConfig::desk(), 7).unwrap();
        let input = Tensor5::zeros([1, 3, 4, 16, 16]);
        assert!(forward(&model, &input).is_err());
    }

    #[test]
    fn channel_doubling_by_level() {
        let config = NetworkConfig::reference();
        for (level, want) in [(0, 24), (1, 48), (2, 96), (3, 192), (4, 384)] {
            assert_eq!(config.channels_at(level), want);
        }
    }

    #[test]
    fn forward_is_deterministic_for_fixed_weights() {
        let model = build_network(&NetworkConfig::desk(), 3).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let input = Tensor5::random([2, 2, 4, 8, 8], &mut rng, -1.0, 1.0);
        let a = forward(&model, &input).unwrap();
        let b = forward(&model, &input).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
