//! Models: ordered layer stacks with a named parameter registry, batched
//! forward/backward, and checkpoints in the container format of
//! [`crate::io`].
//!
//! Every learnable tensor is registered exactly once under a unique name and
//! tagged with its optimizer group (weights that take decay, plain affine
//! weights, and bias-like parameters).

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::{map_indexed, Exec};
use crate::filters::{
    gbias_grad, group_filter_grad, init_kaiming, lift_filter_grad, GBiases,
};
use crate::group::CyclicGroup;
use crate::io::{self, Dtype};
use crate::layers::{
    build_bank, conv_apply, conv_apply_backward, gbatchnorm_backward, gbatchnorm_forward,
    global_avg_pool, global_avg_pool_backward, gmaxpool, gmaxpool_backward, linear_backward,
    linear_forward, BnCache, BnState, ConvCfg, ConvKind, ConvLayer, Mode,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Optimizer grouping of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Convolution and head weights; weight decay applies.
    Decay,
    /// Batch-norm scale; no decay.
    NoDecay,
    /// Bias-like parameters (G-Biases, batch-norm shift, head bias); no
    /// decay, separate warmup schedule.
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub group: ParamGroup,
}

/// Flat parameter registry. Ids are stable indices.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    params: Vec<Parameter>,
}

impl Registry {
    pub fn register(&mut self, name: &str, value: Tensor, group: ParamGroup) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Checkpoint(format!(
                "parameter {name} registered twice"
            )));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            group,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_add(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        self.params[id.0].grad.add_assign(delta)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// One node of the layer stack.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv {
        name: String,
        cfg: ConvCfg,
        w: ParamId,
        bias: Option<ParamId>,
    },
    BatchNorm {
        name: String,
        channels: usize,
        gamma: ParamId,
        beta: ParamId,
        state: BnState,
        eps: f64,
        momentum: f64,
    },
    Relu,
    GMaxPool,
    GlobalAvgPool,
    Linear {
        name: String,
        w: ParamId,
        bias: ParamId,
    },
    Residual {
        name: String,
        inner: Vec<Layer>,
    },
}

/// Per-layer cache from a forward pass, consumed once by backward.
#[derive(Debug)]
pub enum Trace {
    Conv { input: Tensor, bank: Tensor },
    BatchNorm { cache: Option<BnCache> },
    Relu { input: Tensor },
    GMaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    GlobalAvgPool { in_shape: Vec<usize> },
    Linear { input: Tensor },
    Residual { inner: Vec<Trace> },
    Identity,
}

#[derive(Debug)]
pub struct ModelTrace {
    traces: Vec<Trace>,
}

/// Architectures this crate knows how to build from a spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelArch {
    /// Lift stem (8 channels), two residual stages (16 and 32 channels) with
    /// stride-2 depthwise downsampling, group-max pooling and a linear head.
    RrenetTiny,
    /// Two convolution layers and a head, under 500 parameters; meant for
    /// finite-difference gradient checks.
    GradCheckTiny,
}

/// Everything needed to rebuild a model deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ModelArch,
    pub group_order: usize,
    pub num_classes: usize,
    pub relaxed: bool,
    pub seed: u64,
}

pub struct Model {
    pub group: CyclicGroup,
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
    pub registry: Registry,
}

struct Builder {
    group: CyclicGroup,
    relaxed: bool,
    rng: Rng,
    registry: Registry,
}

impl Builder {
    fn conv(
        &mut self,
        name: &str,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<Layer> {
        let n = self.group.order();
        let cfg = ConvCfg::same(kind, c_in, c_out, k, self.relaxed).with_stride(stride);
        cfg.validate()?;
        let w = init_kaiming(&cfg.weight_shape(n), cfg.fan_in(n), &mut self.rng);
        let w = self.registry.register(&format!("{name}.w"), w, ParamGroup::Decay)?;
        let bias = if self.relaxed {
            // zero-init draws nothing from the rng, so strict and relaxed
            // models share the same weight stream
            let b = GBiases::zeros(n, c_out, k);
            Some(self.registry.register(
                &format!("{name}.gbias"),
                b.tensor().clone(),
                ParamGroup::Bias,
            )?)
        } else {
            None
        };
        Ok(Layer::Conv {
            name: name.to_string(),
            cfg,
            w,
            bias,
        })
    }

    fn bn(&mut self, name: &str, channels: usize) -> Result<Layer> {
        let gamma = self.registry.register(
            &format!("{name}.gamma"),
            Tensor::full(&[channels], 1.0),
            ParamGroup::NoDecay,
        )?;
        let beta = self.registry.register(
            &format!("{name}.beta"),
            Tensor::zeros(&[channels]),
            ParamGroup::Bias,
        )?;
        Ok(Layer::BatchNorm {
            name: name.to_string(),
            channels,
            gamma,
            beta,
            state: BnState::new(channels),
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    fn linear(&mut self, name: &str, c_in: usize, c_out: usize) -> Result<Layer> {
        let w = init_kaiming(&[c_out, c_in], c_in, &mut self.rng);
        let w = self.registry.register(&format!("{name}.w"), w, ParamGroup::Decay)?;
        let bias = self.registry.register(
            &format!("{name}.bias"),
            Tensor::zeros(&[c_out]),
            ParamGroup::Bias,
        )?;
        Ok(Layer::Linear {
            name: name.to_string(),
            w,
            bias,
        })
    }

    /// Conv + BatchNorm + activation.
    fn cba(
        &mut self,
        out: &mut Vec<Layer>,
        name: &str,
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Result<()> {
        out.push(self.conv(name, kind, c_in, c_out, k, stride)?);
        out.push(self.bn(&format!("{name}.bn"), c_out)?);
        out.push(Layer::Relu);
        Ok(())
    }

    /// Residual block: pointwise in, two depthwise, pointwise out (without
    /// trailing activation), residual add, then relu outside.
    fn pd_block(&mut self, out: &mut Vec<Layer>, name: &str, channels: usize) -> Result<()> {
        let mut inner = Vec::new();
        self.cba(
            &mut inner,
            &format!("{name}.pw_in"),
            ConvKind::Group,
            channels,
            channels,
            1,
            1,
        )?;
        self.cba(
            &mut inner,
            &format!("{name}.dw1"),
            ConvKind::Depthwise,
            channels,
            channels,
            3,
            1,
        )?;
        self.cba(
            &mut inner,
            &format!("{name}.dw2"),
            ConvKind::Depthwise,
            channels,
            channels,
            3,
            1,
        )?;
        inner.push(self.conv(
            &format!("{name}.pw_out"),
            ConvKind::Group,
            channels,
            channels,
            1,
            1,
        )?);
        inner.push(self.bn(&format!("{name}.pw_out.bn"), channels)?);
        out.push(Layer::Residual {
            name: name.to_string(),
            inner,
        });
        out.push(Layer::Relu);
        Ok(())
    }
}

/// Builds a model from its spec. Initialization is deterministic in
/// `spec.seed`.
pub fn build_model(spec: ModelSpec) -> Result<Model> {
    let group = CyclicGroup::new(spec.group_order)?;
    let mut b = Builder {
        group,
        relaxed: spec.relaxed,
        rng: Rng::with_stream(spec.seed, 0xC0DE),
        registry: Registry::default(),
    };
    let mut layers = Vec::new();
    match spec.arch {
        ModelArch::RrenetTiny => {
            b.cba(&mut layers, "lift", ConvKind::Lift, 1, 8, 3, 1)?;
            b.cba(&mut layers, "ds1.dw", ConvKind::Depthwise, 8, 8, 3, 2)?;
            b.cba(&mut layers, "ds1.pw", ConvKind::Group, 8, 16, 1, 1)?;
            b.pd_block(&mut layers, "block1", 16)?;
            b.cba(&mut layers, "ds2.dw", ConvKind::Depthwise, 16, 16, 3, 2)?;
            b.cba(&mut layers, "ds2.pw", ConvKind::Group, 16, 32, 1, 1)?;
            b.pd_block(&mut layers, "block2", 32)?;
            layers.push(Layer::GMaxPool);
            layers.push(Layer::GlobalAvgPool);
            layers.push(b.linear("head.fc", 32, spec.num_classes)?);
        }
        ModelArch::GradCheckTiny => {
            b.cba(&mut layers, "lift", ConvKind::Lift, 1, 2, 3, 1)?;
            layers.push(b.conv("gconv", ConvKind::Group, 2, 2, 3, 1)?);
            layers.push(Layer::GMaxPool);
            layers.push(Layer::GlobalAvgPool);
            layers.push(b.linear("head.fc", 2, spec.num_classes)?);
        }
    }
    Ok(Model {
        group,
        spec,
        layers,
        registry: b.registry,
    })
}

fn act_batch_size(x: &Tensor) -> Result<usize> {
    if x.rank() < 1 || x.shape()[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(x.shape()[0])
}

fn forward_layers(
    layers: &mut [Layer],
    registry: &Registry,
    group: &CyclicGroup,
    input: Tensor,
    mode: Mode,
    exec: Exec,
    base_index: usize,
) -> Result<(Tensor, Vec<Trace>)> {
    let mut current = input;
    let mut traces = Vec::with_capacity(layers.len());
    for (idx, layer) in layers.iter_mut().enumerate() {
        let name = layer_name(layer).to_string();
        let wrap = |e: Error| e.in_layer(base_index + idx, &name);
        match layer {
            Layer::Conv { cfg, w, bias, .. } => {
                let gb = match bias {
                    Some(id) => Some(GBiases::from_tensor(registry.value(*id).clone())
                        .map_err(wrap)?),
                    None => None,
                };
                let bank = build_bank(registry.value(*w), gb.as_ref(), cfg, group)
                    .map_err(wrap)?;
                let bsz = act_batch_size(&current).map_err(wrap)?;
                let cfg = *cfg;
                let parts = map_indexed(exec, bsz, |i| {
                    conv_apply(&current.subtensor(i), &bank, &cfg, group)
                });
                let parts = parts.into_iter().collect::<Result<Vec<_>>>().map_err(wrap)?;
                let out = Tensor::stack(&parts).map_err(wrap)?;
                traces.push(Trace::Conv {
                    input: std::mem::replace(&mut current, out),
                    bank,
                });
            }
            Layer::BatchNorm {
                gamma,
                beta,
                state,
                eps,
                momentum,
                ..
            } => {
                let (out, cache) = gbatchnorm_forward(
                    &current,
                    registry.value(*gamma),
                    registry.value(*beta),
                    state,
                    mode,
                    *eps,
                    *momentum,
                )
                .map_err(wrap)?;
                current = out;
                traces.push(Trace::BatchNorm { cache });
            }
            Layer::Relu => {
                let out = current.relu();
                traces.push(Trace::Relu {
                    input: std::mem::replace(&mut current, out),
                });
            }
            Layer::GMaxPool => {
                let bsz = act_batch_size(&current).map_err(wrap)?;
                let in_shape = current.shape().to_vec();
                let mut parts = Vec::with_capacity(bsz);
                let mut argmax = Vec::new();
                for i in 0..bsz {
                    let (o, a) = gmaxpool(&current.subtensor(i)).map_err(wrap)?;
                    parts.push(o);
                    argmax.extend(a);
                }
                current = Tensor::stack(&parts).map_err(wrap)?;
                traces.push(Trace::GMaxPool { argmax, in_shape });
            }
            Layer::GlobalAvgPool => {
                let bsz = act_batch_size(&current).map_err(wrap)?;
                let in_shape = current.shape().to_vec();
                let mut parts = Vec::with_capacity(bsz);
                for i in 0..bsz {
                    parts.push(global_avg_pool(&current.subtensor(i)).map_err(wrap)?);
                }
                current = Tensor::stack(&parts).map_err(wrap)?;
                traces.push(Trace::GlobalAvgPool { in_shape });
            }
            Layer::Linear { w, bias, .. } => {
                let out = linear_forward(&current, registry.value(*w), registry.value(*bias))
                    .map_err(wrap)?;
                traces.push(Trace::Linear {
                    input: std::mem::replace(&mut current, out),
                });
            }
            Layer::Residual { inner, .. } => {
                let skip = current.clone();
                let (out, inner_traces) =
                    forward_layers(inner, registry, group, current, mode, exec, 0)
                        .map_err(|e| e.in_layer(base_index + idx, "residual"))?;
                current = out.add(&skip).map_err(wrap)?;
                traces.push(Trace::Residual {
                    inner: inner_traces,
                });
            }
        }
    }
    Ok((current, traces))
}

fn backward_layers(
    layers: &[Layer],
    registry: &mut Registry,
    group: &CyclicGroup,
    traces: Vec<Trace>,
    d_out: Tensor,
    exec: Exec,
) -> Result<Tensor> {
    let mut grad = d_out;
    for (layer, trace) in layers.iter().zip(traces.into_iter()).rev() {
        match (layer, trace) {
            (Layer::Conv { cfg, w, bias, .. }, Trace::Conv { input, bank }) => {
                let bsz = grad.shape()[0];
                let cfg = *cfg;
                let results = map_indexed(exec, bsz, |i| {
                    conv_apply_backward(
                        &grad.subtensor(i),
                        &input.subtensor(i),
                        &bank,
                        &cfg,
                        group,
                    )
                });
                let mut d_bank = Tensor::zeros(bank.shape());
                let mut dx_parts = Vec::with_capacity(bsz);
                for r in results {
                    let (dx, db) = r?;
                    dx_parts.push(dx);
                    d_bank.add_assign(&db)?;
                }
                grad = Tensor::stack(&dx_parts)?;
                let dw = match cfg.kind {
                    ConvKind::Lift => lift_filter_grad(&d_bank, group)?,
                    ConvKind::Group | ConvKind::Depthwise => group_filter_grad(&d_bank, group)?,
                };
                registry.grad_add(*w, &dw)?;
                if let Some(bid) = bias {
                    let db = gbias_grad(&d_bank)?;
                    registry.grad_add(*bid, &db)?;
                }
            }
            (Layer::BatchNorm { gamma, beta, .. }, Trace::BatchNorm { cache }) => {
                let cache = cache.ok_or(Error::BatchNormUninitialized)?;
                let (dx, dgamma, dbeta) =
                    gbatchnorm_backward(&grad, &cache, registry.value(*gamma))?;
                registry.grad_add(*gamma, &dgamma)?;
                registry.grad_add(*beta, &dbeta)?;
                grad = dx;
            }
            (Layer::Relu, Trace::Relu { input }) => {
                grad = grad.mul(&input.relu_grad())?;
            }
            (Layer::GMaxPool, Trace::GMaxPool { argmax, in_shape }) => {
                let bsz = grad.shape()[0];
                let per = argmax.len() / bsz;
                let mut parts = Vec::with_capacity(bsz);
                for i in 0..bsz {
                    parts.push(gmaxpool_backward(
                        &grad.subtensor(i),
                        &argmax[i * per..(i + 1) * per],
                        &in_shape[1..],
                    ));
                }
                grad = Tensor::stack(&parts)?;
            }
            (Layer::GlobalAvgPool, Trace::GlobalAvgPool { in_shape }) => {
                let bsz = grad.shape()[0];
                let mut parts = Vec::with_capacity(bsz);
                for i in 0..bsz {
                    parts.push(global_avg_pool_backward(&grad.subtensor(i), &in_shape[1..]));
                }
                grad = Tensor::stack(&parts)?;
            }
            (Layer::Linear { w, bias, .. }, Trace::Linear { input }) => {
                let (dx, dw, db) = linear_backward(&grad, &input, registry.value(*w))?;
                registry.grad_add(*w, &dw)?;
                registry.grad_add(*bias, &db)?;
                grad = dx;
            }
            (Layer::Residual { inner, .. }, Trace::Residual { inner: itr }) => {
                let skip_grad = grad.clone();
                let dx = backward_layers(inner, registry, group, itr, grad, exec)?;
                grad = dx.add(&skip_grad)?;
            }
            _ => {
                return Err(Error::Checkpoint(
                    "trace does not match layer structure".into(),
                ))
            }
        }
    }
    Ok(grad)
}

fn layer_name(layer: &Layer) -> &str {
    match layer {
        Layer::Conv { name, .. } => name,
        Layer::BatchNorm { name, .. } => name,
        Layer::Relu => "relu",
        Layer::GMaxPool => "gmaxpool",
        Layer::GlobalAvgPool => "gap",
        Layer::Linear { name, .. } => name,
        Layer::Residual { name, .. } => name,
    }
}

impl Model {
    /// Forward through the stack. Input is `[B, C, h, w]` with square
    /// spatial dims; output is `[B, num_classes]`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, exec: Exec) -> Result<(Tensor, ModelTrace)> {
        if x.rank() != 4 {
            return Err(Error::BadShape {
                op: "Model::forward",
                shape: x.shape().to_vec(),
                reason: "expected [B, C, h, w]".into(),
            });
        }
        if x.shape()[2] != x.shape()[3] {
            return Err(Error::BadShape {
                op: "Model::forward",
                shape: x.shape().to_vec(),
                reason: "input spatial dims must be square".into(),
            });
        }
        let (out, traces) = forward_layers(
            &mut self.layers,
            &self.registry,
            &self.group,
            x.clone(),
            mode,
            exec,
            0,
        )?;
        Ok((out, ModelTrace { traces }))
    }

    /// Eval-mode logits without keeping a trace.
    pub fn infer(&mut self, x: &Tensor, exec: Exec) -> Result<Tensor> {
        let (out, _) = self.forward(x, Mode::Eval, exec)?;
        Ok(out)
    }

    /// Accumulates parameter gradients from the upstream logits gradient.
    pub fn backward(&mut self, trace: ModelTrace, d_logits: &Tensor, exec: Exec) -> Result<()> {
        backward_layers(
            &self.layers,
            &mut self.registry,
            &self.group,
            trace.traces,
            d_logits.clone(),
            exec,
        )?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.registry.zero_grad();
    }

    fn visit_conv<'a>(layers: &'a [Layer], f: &mut impl FnMut(&'a Layer)) {
        for layer in layers {
            match layer {
                Layer::Conv { .. } => f(layer),
                Layer::Residual { inner, .. } => Self::visit_conv(inner, f),
                _ => {}
            }
        }
    }

    /// Names of every convolution layer, outermost first.
    pub fn conv_layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        Self::visit_conv(&self.layers, &mut |l| {
            if let Layer::Conv { name, .. } = l {
                names.push(name.clone());
            }
        });
        names
    }

    /// Materializes one convolution layer by name for the diagnostics.
    pub fn conv_layer(&self, name: &str) -> Result<ConvLayer> {
        let mut found = None;
        Self::visit_conv(&self.layers, &mut |l| {
            if let Layer::Conv {
                name: n, cfg, w, bias,
            } = l
            {
                if n == name {
                    found = Some((*cfg, *w, *bias));
                }
            }
        });
        let (cfg, w, bias) = found
            .ok_or_else(|| Error::Checkpoint(format!("no convolution layer named {name}")))?;
        let bias = match bias {
            Some(id) => Some(GBiases::from_tensor(self.registry.value(id).clone())?),
            None => None,
        };
        ConvLayer::new(self.group, cfg, self.registry.value(w).clone(), bias)
    }

    /// Per-parameter L2 norms, for failure diagnostics.
    pub fn param_norms(&self) -> Vec<(String, f64)> {
        self.registry
            .iter()
            .map(|p| (p.name.clone(), p.value.l2_norm()))
            .collect()
    }

    fn visit_bn_mut(layers: &mut [Layer], f: &mut impl FnMut(&str, &mut BnState)) {
        for layer in layers {
            match layer {
                Layer::BatchNorm { name, state, .. } => f(name, state),
                Layer::Residual { inner, .. } => Self::visit_bn_mut(inner, f),
                _ => {}
            }
        }
    }

    /// Runs one training-mode forward to populate batch-norm running
    /// statistics, discarding the output.
    pub fn warm_bn(&mut self, x: &Tensor, exec: Exec) -> Result<()> {
        let _ = self.forward(x, Mode::Train, exec)?;
        Ok(())
    }
}

// --- checkpoints -------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelSpec,
    epoch: usize,
    bn_initialized: Vec<(String, bool)>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Saves model parameters, batch-norm state and (optionally) optimizer
/// velocities into one container.
pub fn save_checkpoint(
    path: &Path,
    model: &mut Model,
    velocities: Option<&[Tensor]>,
    epoch: usize,
    extra: serde_json::Value,
) -> Result<()> {
    let mut names: Vec<String> = Vec::new();
    let mut tensors: Vec<Tensor> = Vec::new();
    for p in model.registry.iter() {
        names.push(format!("param.{}", p.name));
        tensors.push(p.value.clone());
    }
    let mut bn_init = Vec::new();
    Model::visit_bn_mut(&mut model.layers, &mut |name, state| {
        names.push(format!("bn.{name}.mean"));
        tensors.push(Tensor::from_vec(&[state.running_mean.len()], state.running_mean.clone()).unwrap());
        names.push(format!("bn.{name}.var"));
        tensors.push(Tensor::from_vec(&[state.running_var.len()], state.running_var.clone()).unwrap());
        bn_init.push((name.to_string(), state.initialized));
    });
    if let Some(vel) = velocities {
        if vel.len() != model.registry.len() {
            return Err(Error::Checkpoint(format!(
                "{} velocities for {} parameters",
                vel.len(),
                model.registry.len()
            )));
        }
        for (p, v) in model.registry.iter().zip(vel) {
            names.push(format!("velocity.{}", p.name));
            tensors.push(v.clone());
        }
    }
    let meta = CheckpointMeta {
        model: model.spec,
        epoch,
        bn_initialized: bn_init,
        extra,
    };
    let records: Vec<(&str, &Tensor, Dtype)> = names
        .iter()
        .zip(&tensors)
        .map(|(n, t)| (n.as_str(), t, Dtype::F64))
        .collect();
    io::write_bank(path, &records, serde_json::to_value(&meta)?)
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub velocities: Option<Vec<Tensor>>,
    pub epoch: usize,
    pub extra: serde_json::Value,
}

/// Rebuilds a model from a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let (records, meta) = io::read_bank(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint manifest: {e}")))?;
    let mut model = build_model(meta.model)?;

    for p in model.registry.iter_mut() {
        let rec = io::find_tensor(&records, &format!("param.{}", p.name))?;
        if rec.tensor.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?} in checkpoint, expected {:?}",
                p.name,
                rec.tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = rec.tensor.clone();
    }

    let init: std::collections::HashMap<String, bool> =
        meta.bn_initialized.iter().cloned().collect();
    let mut bn_err = None;
    Model::visit_bn_mut(&mut model.layers, &mut |name, state| {
        let mean = io::find_tensor(&records, &format!("bn.{name}.mean"));
        let var = io::find_tensor(&records, &format!("bn.{name}.var"));
        match (mean, var) {
            (Ok(m), Ok(v)) => {
                state.running_mean = m.tensor.data().to_vec();
                state.running_var = v.tensor.data().to_vec();
                state.initialized = init.get(name).copied().unwrap_or(false);
            }
            _ => bn_err = Some(name.to_string()),
        }
    });
    if let Some(name) = bn_err {
        return Err(Error::Checkpoint(format!(
            "missing batch-norm state for layer {name}"
        )));
    }

    let mut velocities = None;
    let have_velocity: HashSet<&str> = records
        .iter()
        .filter_map(|r| r.name.strip_prefix("velocity."))
        .collect();
    if !have_velocity.is_empty() {
        let mut vel = Vec::with_capacity(model.registry.len());
        for p in model.registry.iter() {
            let rec = io::find_tensor(&records, &format!("velocity.{}", p.name))?;
            vel.push(rec.tensor.clone());
        }
        velocities = Some(vel);
    }

    Ok(LoadedCheckpoint {
        model,
        velocities,
        epoch: meta.epoch,
        extra: meta.extra,
    })
}
