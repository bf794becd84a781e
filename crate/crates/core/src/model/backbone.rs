//! Toy-scale convolutional backbones built from [`BackboneSpec`]s.
//!
//! Layout: a stride-2 stem convolution, one stride-2 reduction layer per
//! remaining halving, residual blocks spread over the stages, then a 1×1
//! projection to `final_channels`. With `block_count == 0` the projection is
//! omitted and the stem width is the output width.

use rand::Rng;

use super::spec::{BackboneFamily, BackboneSpec};
use crate::error::Result;
use crate::param::{ParamStore, Parameter};
use crate::tensor::{Padding, Tape, Tensor, Var};

/// Exponential-average weight kept on the old running statistics.
pub const RUNNING_STATS_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// 3×3 full convolution, same padding.
    Conv { kernel: String, stride: usize },
    /// 3×3 depthwise convolution, same padding.
    Depthwise { kernel: String, stride: usize },
    Pointwise { kernel: String },
    /// Parameter prefix; owns `gamma`, `beta`, `running_mean`, `running_var`.
    BatchNorm { prefix: String },
    Act(Activation),
    /// `x + body(x)`.
    Residual(Vec<Layer>),
}

/// Running-statistic updates gathered during a training-mode forward pass.
#[derive(Debug, Default)]
pub struct BatchStats {
    pub updates: Vec<(String, Tensor, Tensor)>,
}

pub struct Ctx<'a, R: Rng + ?Sized> {
    pub training: bool,
    pub stats: &'a mut BatchStats,
    pub rng: &'a mut R,
}

impl Layer {
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        params: &ParamStore,
        x: Var,
        ctx: &mut Ctx<'_, R>,
    ) -> Result<Var> {
        match self {
            Layer::Conv { kernel, stride } => {
                let k = params.bind(tape, kernel)?;
                tape.conv2d(x, k, *stride, Padding::Same)
            }
            Layer::Depthwise { kernel, stride } => {
                let k = params.bind(tape, kernel)?;
                tape.depthwise_conv2d(x, k, *stride, Padding::Same)
            }
            Layer::Pointwise { kernel } => {
                let k = params.bind(tape, kernel)?;
                tape.pointwise_conv2d(x, k)
            }
            Layer::BatchNorm { prefix } => {
                let gamma = params.bind(tape, &format!("{prefix}/gamma"))?;
                let beta = params.bind(tape, &format!("{prefix}/beta"))?;
                let mean = &params.expect(&format!("{prefix}/running_mean"))?.value;
                let var = &params.expect(&format!("{prefix}/running_var"))?.value;
                let out = tape.batch_norm(x, gamma, beta, (mean, var), ctx.training)?;
                if let Some((m, v)) = out.batch_stats {
                    ctx.stats.updates.push((prefix.clone(), m, v));
                }
                Ok(out.output)
            }
            Layer::Act(Activation::Relu) => tape.relu(x),
            Layer::Act(Activation::Swish) => tape.swish(x),
            Layer::Residual(body) => {
                let mut h = x;
                for layer in body {
                    h = layer.forward(tape, params, h, ctx)?;
                }
                tape.add(x, h)
            }
        }
    }
}

/// A built backbone: its layer list plus output geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub prefix: String,
    pub layers: Vec<Layer>,
    pub output_extent: usize,
    pub output_channels: usize,
}

impl Backbone {
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        params: &ParamStore,
        x: Var,
        ctx: &mut Ctx<'_, R>,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, params, h, ctx)?;
        }
        Ok(h)
    }
}

struct Builder<'a, R: Rng + ?Sized> {
    params: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    /// Fan-in scaled normal initialization.
    fn kernel(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<String> {
        let std = (2.0 / fan_in as f64).sqrt();
        self.params
            .insert(Parameter::new(name.clone(), Tensor::randn(shape, std, self.rng), true))?;
        Ok(name)
    }

    fn conv(&mut self, name: String, cin: usize, cout: usize, stride: usize) -> Result<Layer> {
        let kernel = self.kernel(name, &[3, 3, cin, cout], 9 * cin)?;
        Ok(Layer::Conv { kernel, stride })
    }

    fn depthwise(&mut self, name: String, c: usize, stride: usize) -> Result<Layer> {
        let kernel = self.kernel(name, &[3, 3, c], 9)?;
        Ok(Layer::Depthwise { kernel, stride })
    }

    fn pointwise(&mut self, name: String, cin: usize, cout: usize) -> Result<Layer> {
        let kernel = self.kernel(name, &[1, 1, cin, cout], cin)?;
        Ok(Layer::Pointwise { kernel })
    }

    fn bn(&mut self, prefix: String, c: usize) -> Result<Layer> {
        self.params
            .insert(Parameter::new(format!("{prefix}/gamma"), Tensor::ones(&[c]), true))?;
        self.params
            .insert(Parameter::new(format!("{prefix}/beta"), Tensor::zeros(&[c]), true))?;
        self.params.insert(Parameter::new(
            format!("{prefix}/running_mean"),
            Tensor::zeros(&[c]),
            false,
        ))?;
        self.params.insert(Parameter::new(
            format!("{prefix}/running_var"),
            Tensor::ones(&[c]),
            false,
        ))?;
        Ok(Layer::BatchNorm { prefix })
    }
}

const FUSED_EXPANSION: usize = 4;

/// Builds the layers of `spec` for square inputs of `input_size` pixels with
/// `in_channels` channels, registering parameters under `prefix/`.
pub fn build_backbone<R: Rng + ?Sized>(
    spec: &BackboneSpec,
    input_size: usize,
    in_channels: usize,
    prefix: &str,
    params: &mut ParamStore,
    rng: &mut R,
) -> Result<Backbone> {
    let output_extent = spec.output_extent(input_size)?;
    let reductions = spec.reductions() as usize;
    let stages = reductions.max(1);
    let width = spec.stem_channels;
    let act = match spec.family {
        BackboneFamily::XceptionMini => Activation::Relu,
        BackboneFamily::Effv2Mini => Activation::Swish,
    };
    let mut b = Builder { params, rng };
    let mut layers = Vec::new();

    let stem_stride = if reductions > 0 { 2 } else { 1 };
    layers.push(b.conv(format!("{prefix}/stem/conv"), in_channels, width, stem_stride)?);
    layers.push(b.bn(format!("{prefix}/stem/bn"), width)?);
    layers.push(Layer::Act(act));

    let mut next_block = 0;
    for stage in 0..stages {
        if stage > 0 {
            let p = format!("{prefix}/reduce{stage}");
            match spec.family {
                BackboneFamily::XceptionMini => {
                    layers.push(b.depthwise(format!("{p}/dw"), width, 2)?);
                    layers.push(b.pointwise(format!("{p}/pw"), width, width)?);
                }
                BackboneFamily::Effv2Mini => {
                    layers.push(b.conv(format!("{p}/conv"), width, width, 2)?);
                }
            }
            layers.push(b.bn(format!("{p}/bn"), width)?);
            layers.push(Layer::Act(act));
        }
        // Blocks whose index maps onto this stage.
        while next_block < spec.block_count && next_block * stages / spec.block_count == stage {
            let p = format!("{prefix}/block{next_block}");
            let body = match spec.family {
                BackboneFamily::XceptionMini => vec![
                    Layer::Act(Activation::Relu),
                    b.depthwise(format!("{p}/dw"), width, 1)?,
                    b.pointwise(format!("{p}/pw"), width, width)?,
                    b.bn(format!("{p}/bn"), width)?,
                ],
                BackboneFamily::Effv2Mini => {
                    let wide = width * FUSED_EXPANSION;
                    vec![
                        b.conv(format!("{p}/expand"), width, wide, 1)?,
                        b.bn(format!("{p}/bn1"), wide)?,
                        Layer::Act(Activation::Swish),
                        b.pointwise(format!("{p}/project"), wide, width)?,
                        b.bn(format!("{p}/bn2"), width)?,
                    ]
                }
            };
            layers.push(Layer::Residual(body));
            next_block += 1;
        }
    }

    if spec.block_count > 0 {
        layers.push(b.pointwise(format!("{prefix}/final/pw"), width, spec.final_channels)?);
        layers.push(b.bn(format!("{prefix}/final/bn"), spec.final_channels)?);
        layers.push(Layer::Act(act));
    }

    Ok(Backbone {
        spec: *spec,
        prefix: prefix.to_string(),
        layers,
        output_extent,
        output_channels: spec.output_channels(),
    })
}
