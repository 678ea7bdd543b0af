//! Layer graphs over a shared parameter store.

pub mod arch;
pub mod checkpoint;
mod fit;

pub use arch::Preset;
pub use fit::{fit, FitConfig, TrainingReport};

use std::collections::HashMap;

use crate::rng::{kaiming_uniform, Rng};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, BatchNormStats, Parameter, Result, Tape, Tensor, TensorError, Var};

/// Trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<Parameter<T>>,
    pub stats: Vec<(String, BatchNormStats<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn add(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, tensor.requires_grad(true)));
        self.params.len() - 1
    }

    /// All tensors that define the model, params first, then running stats
    /// as `<name>.running_mean` / `<name>.running_var`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        for (name, s) in &self.stats {
            let c = s.channels();
            out.push((format!("{name}.running_mean"), Tensor::new([c], s.mean.clone()).expect("stats")));
            out.push((format!("{name}.running_var"), Tensor::new([c], s.var.clone()).expect("stats")));
        }
        out
    }

    /// Overwrites every tensor from `named`, which must cover the store exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> std::result::Result<(), String> {
        let map: HashMap<&str, &Tensor<T>> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let expected = self.params.len() + 2 * self.stats.len();
        if map.len() != expected {
            return Err(format!("expected {expected} tensors, found {}", map.len()));
        }
        for p in &mut self.params {
            let t = map.get(p.name.as_str()).ok_or_else(|| format!("missing tensor `{}`", p.name))?;
            if t.shape() != p.tensor.shape() {
                return Err(format!("tensor `{}` has shape {:?}, expected {:?}", p.name, t.shape(), p.tensor.shape()));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        for (name, s) in &mut self.stats {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let key = format!("{name}.{suffix}");
                let t = map.get(key.as_str()).ok_or_else(|| format!("missing tensor `{key}`"))?;
                if t.numel() != dst.len() {
                    return Err(format!("tensor `{key}` has {} values, expected {}", t.numel(), dst.len()));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    /// Copies every tensor from `named` whose name and shape match one in the
    /// store; returns how many were copied. Used to warm-start a model from a
    /// related checkpoint.
    pub fn load_matching(&mut self, named: &[(String, Tensor<T>)]) -> usize {
        let map: HashMap<&str, &Tensor<T>> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut loaded = 0;
        for p in &mut self.params {
            if let Some(t) = map.get(p.name.as_str()).filter(|t| t.shape() == p.tensor.shape()) {
                p.tensor.data_mut().copy_from_slice(t.data());
                loaded += 1;
            }
        }
        for (name, s) in &mut self.stats {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                if let Some(t) = map.get(format!("{name}.{suffix}").as_str()).filter(|t| t.numel() == dst.len()) {
                    dst.copy_from_slice(t.data());
                    loaded += 1;
                }
            }
        }
        loaded
    }

    /// Moves gradients recorded on `tape` into the parameters bound there.
    pub fn collect_grads(&mut self, tape: &mut Tape<T>, binding: &Binding) -> Result<()> {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
        for (&idx, &var) in &binding.vars {
            let g = tape.take_grad(var);
            self.params[idx].tensor.set_grad(g)?;
        }
        Ok(())
    }
}

/// Lazily places store parameters on a tape, once per forward pass.
#[derive(Default)]
pub struct Binding {
    vars: HashMap<usize, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    fn bind<T: Scalar>(&mut self, params: &[Parameter<T>], tape: &mut Tape<T>, idx: usize, trainable: bool) -> Var {
        *self.vars.entry(idx).or_insert_with(|| {
            let t = params[idx].tensor.clone().requires_grad(trainable);
            tape.leaf(t)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    ConvTranspose {
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        stats: usize,
    },
    Linear {
        weight: usize,
        bias: Option<usize>,
    },
    Relu,
    Sigmoid,
    GlobalAvgPool,
    /// `[N, ...] -> [N, prod(...)]`
    Flatten,
    /// `[N, D] -> [N, shape...]`
    Unflatten(Vec<usize>),
    /// ResNet basic block: `relu(main(x) + shortcut(x))`, identity shortcut when empty.
    Residual {
        main: Vec<Layer>,
        shortcut: Vec<Layer>,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv2d",
            Layer::ConvTranspose { .. } => "conv_transpose2d",
            Layer::BatchNorm { .. } => "batch_norm2d",
            Layer::Linear { .. } => "linear",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::GlobalAvgPool => "global_avg_pool2d",
            Layer::Flatten => "flatten",
            Layer::Unflatten(_) => "unflatten",
            Layer::Residual { .. } => "basic_block",
        }
    }
}

/// Per-pass settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub bn: BatchNormMode,
    /// Whether parameters are recorded as requiring gradients.
    pub trainable: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        bn: BatchNormMode::Train { update_running: true },
        trainable: true,
    };
    pub const EVAL: Pass = Pass {
        bn: BatchNormMode::Eval,
        trainable: false,
    };
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn forward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        binding: &mut Binding,
        x: Var,
        pass: Pass,
    ) -> Result<Var> {
        run_layers(&self.layers, &store.params, &mut store.stats, tape, binding, x, pass)
    }

    /// Eval-mode forward that leaves the store untouched.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut stats = store.stats.clone();
        run_layers(&self.layers, &store.params, &mut stats, tape, &mut Binding::new(), x, Pass::EVAL)
    }

    /// Layer kinds in execution order, with residual blocks expanded.
    pub fn flat_kinds(&self) -> Vec<&'static str> {
        fn walk(layers: &[Layer], out: &mut Vec<&'static str>) {
            for l in layers {
                if let Layer::Residual { main, shortcut } = l {
                    walk(main, out);
                    walk(shortcut, out);
                    out.push("add");
                } else {
                    out.push(l.kind());
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    pub fn count(&self, kind: &str) -> usize {
        self.flat_kinds().iter().filter(|k| **k == kind).count()
    }

    /// Sum of sizes of all parameters referenced by this sequence.
    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        fn walk<T: Scalar>(layers: &[Layer], store: &ParamStore<T>) -> usize {
            let size = |i: usize| store.params[i].tensor.numel();
            layers
                .iter()
                .map(|l| match l {
                    Layer::Conv { weight, bias, .. }
                    | Layer::ConvTranspose { weight, bias, .. }
                    | Layer::Linear { weight, bias } => size(*weight) + bias.map_or(0, size),
                    Layer::BatchNorm { gamma, beta, .. } => size(*gamma) + size(*beta),
                    Layer::Residual { main, shortcut } => walk(main, store) + walk(shortcut, store),
                    _ => 0,
                })
                .sum()
        }
        walk(&self.layers, store)
    }
}

fn run_layers<T: Scalar>(
    layers: &[Layer],
    params: &[Parameter<T>],
    stats: &mut [(String, BatchNormStats<T>)],
    tape: &mut Tape<T>,
    binding: &mut Binding,
    mut x: Var,
    pass: Pass,
) -> Result<Var> {
    let tr = pass.trainable;
    for layer in layers {
        x = match layer {
            Layer::Conv { weight, bias, stride, padding } => {
                let w = binding.bind(params, tape, *weight, tr);
                let b = bias.map(|b| binding.bind(params, tape, b, tr));
                tape.conv2d(x, w, b, *stride, *padding)?
            }
            Layer::ConvTranspose { weight, bias, stride, padding } => {
                let w = binding.bind(params, tape, *weight, tr);
                let b = bias.map(|b| binding.bind(params, tape, b, tr));
                tape.conv_transpose2d(x, w, b, *stride, *padding)?
            }
            Layer::BatchNorm { gamma, beta, stats: idx } => {
                let g = binding.bind(params, tape, *gamma, tr);
                let b = binding.bind(params, tape, *beta, tr);
                tape.batch_norm2d(x, g, b, &mut stats[*idx].1, pass.bn)?
            }
            Layer::Linear { weight, bias } => {
                let w = binding.bind(params, tape, *weight, tr);
                let b = bias.map(|b| binding.bind(params, tape, b, tr));
                tape.linear(x, w, b)?
            }
            Layer::Relu => tape.relu(x)?,
            Layer::Sigmoid => tape.sigmoid(x)?,
            Layer::GlobalAvgPool => tape.global_avg_pool2d(x)?,
            Layer::Flatten => {
                let s = tape.shape(x);
                let n = s[0];
                let rest: usize = s[1..].iter().product();
                tape.reshape(x, [n, rest])?
            }
            Layer::Unflatten(shape) => {
                let n = tape.shape(x)[0];
                let mut full = vec![n];
                full.extend(shape);
                tape.reshape(x, full)?
            }
            Layer::Residual { main, shortcut } => {
                let a = run_layers(main, params, stats, tape, binding, x, pass)?;
                let s = if shortcut.is_empty() {
                    x
                } else {
                    run_layers(shortcut, params, stats, tape, binding, x, pass)?
                };
                let sum = tape.add(a, s)?;
                tape.relu(sum)?
            }
        };
    }
    Ok(x)
}

/// Appends freshly initialized layers to a store.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut Rng,
}

impl<T: Scalar> Builder<'_, T> {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize, bias: bool) -> Layer {
        let fan_in = cin * k * k;
        let w = Tensor::new([cout, cin, k, k], kaiming_uniform(self.rng, fan_in, cout * fan_in)).expect("conv weight");
        let weight = self.store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros([cout])));
        Layer::Conv { weight, bias, stride, padding }
    }

    pub fn conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Layer {
        let fan_in = cout * k * k;
        let w = Tensor::new([cin, cout, k, k], kaiming_uniform(self.rng, fan_in, cin * fan_in)).expect("convT weight");
        let weight = self.store.add(format!("{name}.weight"), w);
        let bias = Some(self.store.add(format!("{name}.bias"), Tensor::zeros([cout])));
        Layer::ConvTranspose { weight, bias, stride, padding }
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Layer {
        let gamma = self.store.add(format!("{name}.gamma"), Tensor::ones([channels]));
        let beta = self.store.add(format!("{name}.beta"), Tensor::zeros([channels]));
        self.store.stats.push((name.to_string(), BatchNormStats::new(channels)));
        Layer::BatchNorm {
            gamma,
            beta,
            stats: self.store.stats.len() - 1,
        }
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Layer {
        let w = Tensor::new([dout, din], kaiming_uniform(self.rng, din, dout * din)).expect("linear weight");
        let weight = self.store.add(format!("{name}.weight"), w);
        let bias = Some(self.store.add(format!("{name}.bias"), Tensor::zeros([dout])));
        Layer::Linear { weight, bias }
    }

    /// Re-draws the weights and zeroes the bias of an existing linear layer.
    pub fn reinit_linear(&mut self, layer: &Layer) {
        if let Layer::Linear { weight, bias } = layer {
            let shape = self.store.params[*weight].tensor.shape().to_vec();
            let fresh = kaiming_uniform(self.rng, shape[1], shape[0] * shape[1]);
            self.store.params[*weight].tensor.data_mut().copy_from_slice(&fresh);
            if let Some(b) = bias {
                self.store.params[*b].tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

pub fn ensure_image_batch<T: Scalar>(t: &Tensor<T>) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 || s[2] != 32 || s[3] != 32 {
        return Err(TensorError::Dimension {
            op: "image batch",
            detail: format!("expected [N,3,32,32], got {s:?}"),
        });
    }
    Ok(())
}
