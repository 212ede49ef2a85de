//! Parameters, layer building blocks and the forward context.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Optimiser parameter group; the two groups get separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Staged residual backbones of the encoders and mixers.
    Backbone,
    /// Projections, gate modules and the decoder.
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Trainable,
    /// Non-trained state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    pub init: Init,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    /// Panics on unknown names: models only look up what they registered.
    pub fn tensor(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Sets every trainable tensor whose name starts with `prefix` to `value`.
    pub fn fill_prefix(&mut self, prefix: &str, value: f64) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) && p.kind == ParamKind::Trainable {
                p.value.data_mut().fill(value);
            }
        }
    }
}

/// Collects parameter specs while a model is being constructed.
#[derive(Debug, Default)]
pub struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, shape: [usize; 4], init: Init, group: ParamGroup, kind: ParamKind) -> String {
        debug_assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter name {name}"
        );
        self.specs.push(ParamSpec {
            name: name.clone(),
            shape,
            init,
            group,
            kind,
        });
        name
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Materialises specs with a seeded generator, in registration order.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let value = match spec.init {
            Init::Zeros => Tensor::zeros(spec.shape),
            Init::Ones => Tensor::full(spec.shape, 1.0),
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(spec.shape, |_| rng.gen_range(-bound..bound))
            }
        };
        store.insert(
            spec.name.clone(),
            Param {
                value,
                group: spec.group,
                kind: spec.kind,
            },
        );
    }
    store
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Forward context: owns the tape and binds parameter names to leaves.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    leaves: HashMap<String, Var>,
    mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            leaves: HashMap::new(),
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.leaves.get(name) {
            return *v;
        }
        let p = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        let v = self.tape.leaf(p.value.clone(), p.kind == ParamKind::Trainable);
        self.leaves.insert(name.to_string(), v);
        v
    }

    fn buffer(&self, name: &str) -> &[f64] {
        self.store.tensor(name).data()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Maps tape gradients back onto parameter names (trainable only).
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.leaves {
            if let Some(g) = grads.get(*v) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, cx: &mut Ctx<'_>, x: Var) -> Var {
        match self {
            Activation::Relu => cx.tape.relu(x),
            Activation::Sigmoid => cx.tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Square-kernel 2-D convolution; padding keeps "same" size at stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: String,
    bias: Option<String>,
    stride: usize,
    pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = reg.add(
            format!("{name}.weight"),
            [out_channels, in_channels, kernel, kernel],
            Init::KaimingUniform { fan_in },
            group,
            ParamKind::Trainable,
        );
        let bias = bias.then(|| {
            reg.add(
                format!("{name}.bias"),
                [1, out_channels, 1, 1],
                Init::Zeros,
                group,
                ParamKind::Trainable,
            )
        });
        Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        let w = cx.param(&self.weight);
        let b = self.bias.as_deref().map(|b| cx.param(b));
        cx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
}

impl BatchNorm {
    pub fn new(reg: &mut Registry, name: &str, channels: usize, group: ParamGroup) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: reg.add(format!("{name}.gamma"), shape, Init::Ones, group, ParamKind::Trainable),
            beta: reg.add(format!("{name}.beta"), shape, Init::Zeros, group, ParamKind::Trainable),
            running_mean: reg.add(format!("{name}.running_mean"), shape, Init::Zeros, group, ParamKind::Buffer),
            running_var: reg.add(format!("{name}.running_var"), shape, Init::Ones, group, ParamKind::Buffer),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        let g = cx.param(&self.gamma);
        let b = cx.param(&self.beta);
        match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.tape.batch_norm_train(x, g, b);
                cx.bn_updates.push(BnUpdate {
                    mean_name: self.running_mean.clone(),
                    var_name: self.running_var.clone(),
                    mean: stats.mean,
                    var: stats.var,
                });
                y
            }
            Mode::Eval => {
                let mean = cx.buffer(&self.running_mean).to_vec();
                let var = cx.buffer(&self.running_var).to_vec();
                cx.tape.batch_norm_eval(x, g, b, &mean, &var)
            }
        }
    }
}

/// Convolution (with bias) followed by an activation, no normalisation.
#[derive(Clone, Debug)]
pub struct ConvAct {
    pub conv: Conv2d,
    pub act: Activation,
}

impl ConvAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        act: Activation,
        group: ParamGroup,
    ) -> Self {
        Self {
            conv: Conv2d::new(reg, name, cin, cout, kernel, 1, true, group),
            act,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        self.act.apply(cx, y)
    }
}

/// Convolution, batch norm, then an activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub act: Activation,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
        group: ParamGroup,
    ) -> Self {
        Self {
            conv: Conv2d::new(reg, &format!("{name}.conv"), cin, cout, kernel, stride, false, group),
            bn: BatchNorm::new(reg, &format!("{name}.bn"), cout, group),
            act,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        let y = self.bn.forward(cx, y);
        self.act.apply(cx, y)
    }
}
