//! Declarative layer graphs. A [`ModelGraph`] is an acyclic, name-wired list
//! of [`LayerSpec`]s shared by three consumers: the runtime executor (forward
//! on a tape), the FLOPs/params counters, and the plain-text architecture
//! format used by the CLI.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{convt_same_geom, Conv2dGeom};
use crate::real::{c, Real};
use crate::rng::stream;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Swish,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Swish => "swish",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "swish" => Ok(Activation::Swish),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

/// One layer kind with its attributes. Convolutions are "same"-padded so a
/// stride-2 conv exactly halves spatial extent and a stride-2 transpose
/// exactly doubles it.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
    ConvTranspose { in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
    BatchNorm { channels: usize },
    Activation { kind: Activation },
    /// Channel modulation; the side input carries [gamma | beta], 2*channels wide.
    Film { channels: usize },
    GlobalAvgPool,
    Flatten,
    Reshape { shape: Vec<usize> },
    Upsample { factor: usize },
    /// Concatenation along the feature (last) axis.
    Concat,
    /// Elementwise residual addition.
    Add,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::ConvTranspose { .. } => "conv-transpose",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Activation { .. } => "activation",
            LayerSpec::Film { .. } => "film",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::Upsample { .. } => "upsample",
            LayerSpec::Concat => "concat",
            LayerSpec::Add => "add",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        match self {
            LayerSpec::Dense { in_dim, out_dim } => {
                if *in_dim == 0 || *out_dim == 0 {
                    return bad(format!("zero-size dense layer {in_dim}->{out_dim}"));
                }
            }
            LayerSpec::Conv { in_ch, out_ch, kernel, stride }
            | LayerSpec::ConvTranspose { in_ch, out_ch, kernel, stride } => {
                if *in_ch == 0 || *out_ch == 0 {
                    return bad(format!("zero-channel conv {in_ch}->{out_ch}"));
                }
                if *kernel == 0 || *stride == 0 {
                    return bad(format!("conv kernel/stride must be positive, got {kernel}/{stride}"));
                }
            }
            LayerSpec::BatchNorm { channels } | LayerSpec::Film { channels } => {
                if *channels == 0 {
                    return bad("zero-channel batchnorm/film layer".into());
                }
            }
            LayerSpec::Reshape { shape } => {
                if shape.iter().any(|&d| d == 0) {
                    return bad(format!("zero extent in reshape {shape:?}"));
                }
            }
            LayerSpec::Upsample { factor } => {
                if *factor == 0 {
                    return bad("upsample factor must be positive".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// A named node in the graph: `spec` applied to `inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphLayer {
    pub name: String,
    pub inputs: Vec<String>,
    pub spec: LayerSpec,
}

/// Acyclic layer graph. Layers appear in topological order: every input name
/// refers either to the graph input or to an earlier layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    /// Per-sample input shape, e.g. `[32, 32, 3]` or `[128]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<GraphLayer>,
    /// Names of the layers whose values the model exposes.
    pub outputs: Vec<String>,
}

pub const GRAPH_INPUT: &str = "input";

impl ModelGraph {
    pub fn new(input_shape: &[usize]) -> Self {
        ModelGraph {
            input_shape: input_shape.to_vec(),
            layers: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Append a single-input layer; returns its output name for chaining.
    pub fn push(&mut self, name: &str, input: &str, spec: LayerSpec) -> String {
        self.layers.push(GraphLayer {
            name: name.to_string(),
            inputs: vec![input.to_string()],
            spec,
        });
        name.to_string()
    }

    pub fn push_multi(&mut self, name: &str, inputs: &[&str], spec: LayerSpec) -> String {
        self.layers.push(GraphLayer {
            name: name.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            spec,
        });
        name.to_string()
    }

    /// Per-sample output shape of each layer, in order, plus validation of
    /// wiring and attributes. Errors on shape clashes, unknown inputs and
    /// zero-size layers.
    pub fn resolve_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut known: HashMap<&str, Vec<usize>> = HashMap::new();
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!(
                "zero extent in graph input shape {:?}",
                self.input_shape
            )));
        }
        known.insert(GRAPH_INPUT, self.input_shape.clone());
        let mut resolved = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layer.spec.validate()?;
            let mut in_shapes = Vec::new();
            for input in &layer.inputs {
                let shape = known.get(input.as_str()).ok_or_else(|| {
                    Error::config(format!(
                        "layer '{}' consumes unknown input '{}'",
                        layer.name, input
                    ))
                })?;
                in_shapes.push(shape.clone());
            }
            let out = propagate(&layer.spec, &in_shapes, &layer.name)?;
            known.insert(layer.name.as_str(), out.clone());
            resolved.push(out);
        }
        for output in &self.outputs {
            if !known.contains_key(output.as_str()) {
                return Err(Error::config(format!("unknown graph output '{output}'")));
            }
        }
        Ok(resolved)
    }

    pub fn output_shape(&self, name: &str) -> Result<Vec<usize>> {
        let shapes = self.resolve_shapes()?;
        if name == GRAPH_INPUT {
            return Ok(self.input_shape.clone());
        }
        for (layer, shape) in self.layers.iter().zip(shapes.iter()) {
            if layer.name == name {
                return Ok(shape.clone());
            }
        }
        Err(Error::config(format!("unknown layer '{name}'")))
    }

    /// Line-oriented plain-text form: `input H W C` (or `input F`), then one
    /// layer per line `kind name inputs... attrs...`, then `output names...`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("input");
        for d in &self.input_shape {
            out.push_str(&format!(" {d}"));
        }
        out.push('\n');
        for layer in &self.layers {
            let mut line = format!("{} {}", layer.spec.kind_name(), layer.name);
            for i in &layer.inputs {
                line.push_str(&format!(" {i}"));
            }
            match &layer.spec {
                LayerSpec::Dense { in_dim, out_dim } => {
                    line.push_str(&format!(" {in_dim} {out_dim}"));
                }
                LayerSpec::Conv { in_ch, out_ch, kernel, stride }
                | LayerSpec::ConvTranspose { in_ch, out_ch, kernel, stride } => {
                    line.push_str(&format!(" {in_ch} {out_ch} {kernel} {stride}"));
                }
                LayerSpec::BatchNorm { channels } | LayerSpec::Film { channels } => {
                    line.push_str(&format!(" {channels}"));
                }
                LayerSpec::Activation { kind } => line.push_str(&format!(" {}", kind.name())),
                LayerSpec::Reshape { shape } => {
                    for d in shape {
                        line.push_str(&format!(" {d}"));
                    }
                }
                LayerSpec::Upsample { factor } => line.push_str(&format!(" {factor}")),
                LayerSpec::GlobalAvgPool | LayerSpec::Flatten | LayerSpec::Concat | LayerSpec::Add => {}
            }
            out.push_str(&line);
            out.push('\n');
        }
        out.push_str("output");
        for o in &self.outputs {
            out.push_str(&format!(" {o}"));
        }
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut input_shape: Option<Vec<usize>> = None;
        let mut layers = Vec::new();
        let mut outputs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let parse_usize = |s: &str| -> Result<usize> {
                s.parse::<usize>()
                    .map_err(|_| Error::config(format!("line {}: bad integer '{s}'", lineno + 1)))
            };
            let need = |n: usize| -> Result<()> {
                if rest.len() != n {
                    return Err(Error::config(format!(
                        "line {}: '{kind}' expects {n} fields, got {}",
                        lineno + 1,
                        rest.len()
                    )));
                }
                Ok(())
            };
            match kind {
                "input" => {
                    let mut dims = Vec::new();
                    for s in &rest {
                        dims.push(parse_usize(s)?);
                    }
                    input_shape = Some(dims);
                }
                "output" => {
                    outputs = rest.iter().map(|s| s.to_string()).collect();
                }
                "dense" => {
                    need(4)?;
                    layers.push(GraphLayer {
                        name: rest[0].into(),
                        inputs: vec![rest[1].into()],
                        spec: LayerSpec::Dense {
                            in_dim: parse_usize(rest[2])?,
                            out_dim: parse_usize(rest[3])?,
                        },
                    });
                }
                "conv" | "conv-transpose" => {
                    need(6)?;
                    let (in_ch, out_ch) = (parse_usize(rest[2])?, parse_usize(rest[3])?);
                    let (kernel, stride) = (parse_usize(rest[4])?, parse_usize(rest[5])?);
                    let spec = if kind == "conv" {
                        LayerSpec::Conv { in_ch, out_ch, kernel, stride }
                    } else {
                        LayerSpec::ConvTranspose { in_ch, out_ch, kernel, stride }
                    };
                    layers.push(GraphLayer {
                        name: rest[0].into(),
                        inputs: vec![rest[1].into()],
                        spec,
                    });
                }
                "batchnorm" => {
                    need(3)?;
                    layers.push(GraphLayer {
                        name: rest[0].into(),
                        inputs: vec![rest[1].into()],
                        spec: LayerSpec::BatchNorm { channels: parse_usize(rest[2])? },
                    });
                }
                "activation" => {
                    need(3)?;
                    layers.push(GraphLayer {
                        name: rest[0].into(),
                        inputs: vec![rest[1].into()],
                        spec: LayerSpec::Activation { kind: Activation::parse(rest[2])? },
                    });
                }
                "film" => {
                    need(4)?;
                    layers.push(GraphLayer {
                        name: rest[0].into(),
                        inputs: vec![rest[1].into(), rest[2].into()],
                        spec: LayerSpec::Film { channels: parse_usize(rest[3])? },
                    });
                }
                "global-avg-pool" | "flatten" => {
                    need(2)?;
                    let spec = if kind == "flatten" {
                        LayerSpec::Flatten
                    } else {
                        LayerSpec::GlobalAvgPool
                    };
                    layers.push(GraphLayer {
                        name: rest[0].into(),
                        inputs: vec![rest[1].into()],
                        spec,
                    });
                }
                "reshape" => {
                    if rest.len() < 3 {
                        return Err(Error::config(format!(
                            "line {}: reshape needs name, input and extents",
                            lineno + 1
                        )));
                    }
                    let mut shape = Vec::new();
                    for s in &rest[2..] {
                        shape.push(parse_usize(s)?);
                    }
                    layers.push(GraphLayer {
                        name: rest[0].into(),
                        inputs: vec![rest[1].into()],
                        spec: LayerSpec::Reshape { shape },
                    });
                }
                "upsample" => {
                    need(3)?;
                    layers.push(GraphLayer {
                        name: rest[0].into(),
                        inputs: vec![rest[1].into()],
                        spec: LayerSpec::Upsample { factor: parse_usize(rest[2])? },
                    });
                }
                "concat" | "add" => {
                    need(3)?;
                    let spec = if kind == "concat" { LayerSpec::Concat } else { LayerSpec::Add };
                    layers.push(GraphLayer {
                        name: rest[0].into(),
                        inputs: vec![rest[1].into(), rest[2].into()],
                        spec,
                    });
                }
                other => {
                    return Err(Error::config(format!(
                        "line {}: unknown layer kind '{other}'",
                        lineno + 1
                    )));
                }
            }
        }
        let graph = ModelGraph {
            input_shape: input_shape
                .ok_or_else(|| Error::config("architecture text missing 'input' line"))?,
            layers,
            outputs,
        };
        graph.resolve_shapes()?;
        Ok(graph)
    }
}

fn propagate(spec: &LayerSpec, inputs: &[Vec<usize>], name: &str) -> Result<Vec<usize>> {
    let one = |msg: &str| -> Result<&Vec<usize>> {
        if inputs.len() != 1 {
            return Err(Error::config(format!(
                "layer '{name}' ({msg}) expects one input, got {}",
                inputs.len()
            )));
        }
        Ok(&inputs[0])
    };
    match spec {
        LayerSpec::Dense { in_dim, out_dim } => {
            let shape = one("dense")?;
            if shape != &[*in_dim] {
                return Err(Error::config(format!(
                    "dense layer '{name}' expects input [{}], got {:?}",
                    in_dim, shape
                )));
            }
            Ok(vec![*out_dim])
        }
        LayerSpec::Conv { in_ch, out_ch, kernel: _, stride } => {
            let shape = one("conv")?;
            if shape.len() != 3 || shape[2] != *in_ch {
                return Err(Error::config(format!(
                    "conv layer '{name}' expects [H, W, {in_ch}], got {shape:?}"
                )));
            }
            let (h, w) = (shape[0], shape[1]);
            if h % stride != 0 || w % stride != 0 {
                return Err(Error::config(format!(
                    "conv layer '{name}': spatial {h}x{w} not divisible by stride {stride}"
                )));
            }
            Ok(vec![h / stride, w / stride, *out_ch])
        }
        LayerSpec::ConvTranspose { in_ch, out_ch, kernel: _, stride } => {
            let shape = one("conv-transpose")?;
            if shape.len() != 3 || shape[2] != *in_ch {
                return Err(Error::config(format!(
                    "conv-transpose layer '{name}' expects [H, W, {in_ch}], got {shape:?}"
                )));
            }
            Ok(vec![shape[0] * stride, shape[1] * stride, *out_ch])
        }
        LayerSpec::BatchNorm { channels } => {
            let shape = one("batchnorm")?;
            if shape.last() != Some(channels) {
                return Err(Error::config(format!(
                    "batchnorm layer '{name}' expects {channels} channels, got {shape:?}"
                )));
            }
            Ok(shape.clone())
        }
        LayerSpec::Activation { .. } => Ok(one("activation")?.clone()),
        LayerSpec::Film { channels } => {
            if inputs.len() != 2 {
                return Err(Error::config(format!(
                    "film layer '{name}' expects features and conditioner inputs"
                )));
            }
            let feat = &inputs[0];
            if feat.last() != Some(channels) {
                return Err(Error::config(format!(
                    "film layer '{name}' expects {channels} feature channels, got {feat:?}"
                )));
            }
            if inputs[1] != vec![2 * channels] {
                return Err(Error::config(format!(
                    "film layer '{name}' conditioner must be [{}], got {:?}",
                    2 * channels,
                    inputs[1]
                )));
            }
            Ok(feat.clone())
        }
        LayerSpec::GlobalAvgPool => {
            let shape = one("global-avg-pool")?;
            if shape.len() != 3 {
                return Err(Error::config(format!(
                    "global-avg-pool layer '{name}' expects [H, W, C], got {shape:?}"
                )));
            }
            Ok(vec![shape[2]])
        }
        LayerSpec::Flatten => {
            let shape = one("flatten")?;
            Ok(vec![shape.iter().product()])
        }
        LayerSpec::Reshape { shape } => {
            let input = one("reshape")?;
            let (a, b): (usize, usize) = (input.iter().product(), shape.iter().product());
            if a != b {
                return Err(Error::config(format!(
                    "reshape layer '{name}': {input:?} has {a} values, target {shape:?} has {b}"
                )));
            }
            Ok(shape.clone())
        }
        LayerSpec::Upsample { factor } => {
            let shape = one("upsample")?;
            if shape.len() != 3 {
                return Err(Error::config(format!(
                    "upsample layer '{name}' expects [H, W, C], got {shape:?}"
                )));
            }
            Ok(vec![shape[0] * factor, shape[1] * factor, shape[2]])
        }
        LayerSpec::Concat => {
            if inputs.len() != 2 {
                return Err(Error::config(format!("concat layer '{name}' expects two inputs")));
            }
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.len() != b.len() || a[..a.len() - 1] != b[..b.len() - 1] {
                return Err(Error::config(format!(
                    "concat layer '{name}': incompatible shapes {a:?} and {b:?}"
                )));
            }
            let mut out = a.clone();
            *out.last_mut().unwrap() += b.last().unwrap();
            Ok(out)
        }
        LayerSpec::Add => {
            if inputs.len() != 2 || inputs[0] != inputs[1] {
                return Err(Error::config(format!(
                    "add layer '{name}': inputs must match, got {inputs:?}"
                )));
            }
            Ok(inputs[0].clone())
        }
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

/// Ordered, named parameter tensors. Order is the optimizer and checkpoint
/// order, so it must be stable across runs.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &mut self.entries[idx].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Insert every parameter into the tape as a tracked leaf, in order.
    /// Returns name -> node id.
    pub fn leaves(&self, tape: &mut Tape<T>) -> HashMap<String, NodeId> {
        let mut ids = HashMap::new();
        for (name, tensor) in &self.entries {
            ids.insert(name.clone(), tape.leaf(tensor.clone()));
        }
        ids
    }
}

impl ParamSet<f32> {
    pub fn cast_f64(&self) -> ParamSet<f64> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.add(n, t.cast_f64());
        }
        out
    }
}

/// Batch-norm running statistics per layer name. Single-writer during
/// training; frozen for eval.
#[derive(Clone, Debug, Default)]
pub struct BnStats<T> {
    pub stats: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> BnStats<T> {
    pub fn new() -> Self {
        BnStats {
            stats: HashMap::new(),
        }
    }

    pub fn init(&mut self, name: &str, channels: usize) {
        self.stats
            .insert(name.to_string(), (vec![T::zero(); channels], vec![T::one(); channels]));
    }

    pub fn update(&mut self, name: &str, mean: &[T], var: &[T]) {
        let m = c::<T>(BN_MOMENTUM);
        let one_m = c::<T>(1.0 - BN_MOMENTUM);
        let (rm, rv) = self
            .stats
            .get_mut(name)
            .unwrap_or_else(|| panic!("batchnorm state '{name}' not initialized"));
        for (r, &b) in rm.iter_mut().zip(mean.iter()) {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in rv.iter_mut().zip(var.iter()) {
            *r = m * *r + one_m * b;
        }
    }

    pub fn get(&self, name: &str) -> (&[T], &[T]) {
        let (rm, rv) = self
            .stats
            .get(name)
            .unwrap_or_else(|| panic!("batchnorm state '{name}' not initialized"));
        (rm, rv)
    }
}

/// One fan-in-scaled uniform tensor: U(-a, a) with a = 1/sqrt(fan_in).
pub fn uniform_init<T: Real>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor<T> {
    let limit = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let u: f64 = rand::Rng::gen_range(rng, -1.0..1.0);
            T::from_f64(u * limit)
        })
        .collect();
    Tensor::new(shape, data)
}

/// Fan-in-scaled uniform init: weights drawn from U(-a, a) with
/// a = 1/sqrt(fan_in) (giving std a/sqrt(3)); biases zero; batch-norm scale 1
/// and shift 0. Deterministic per seed: parameters are created in layer
/// order on a dedicated "init" stream.
pub fn init_params<T: Real>(graph: &ModelGraph, seed: u64, prefix: &str) -> Result<(ParamSet<T>, BnStats<T>)> {
    graph.resolve_shapes()?;
    let mut rng = stream(seed, &format!("init.{prefix}"));
    let mut params = ParamSet::new();
    let mut bn = BnStats::new();
    let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor<T> { uniform_init(shape, fan_in, &mut rng) };
    for layer in &graph.layers {
        let name = |suffix: &str| format!("{prefix}.{}.{suffix}", layer.name);
        match &layer.spec {
            LayerSpec::Dense { in_dim, out_dim } => {
                params.add(&name("w"), uniform(&[*in_dim, *out_dim], *in_dim));
                params.add(&name("b"), Tensor::zeros(&[*out_dim]));
            }
            LayerSpec::Conv { in_ch, out_ch, kernel, .. }
            | LayerSpec::ConvTranspose { in_ch, out_ch, kernel, .. } => {
                let fan_in = kernel * kernel * in_ch;
                params.add(&name("w"), uniform(&[*kernel, *kernel, *in_ch, *out_ch], fan_in));
                params.add(&name("b"), Tensor::zeros(&[*out_ch]));
            }
            LayerSpec::BatchNorm { channels } => {
                params.add(&name("gamma"), Tensor::filled(&[*channels], T::one()));
                params.add(&name("beta"), Tensor::zeros(&[*channels]));
                bn.init(&format!("{prefix}.{}", layer.name), *channels);
            }
            _ => {}
        }
    }
    Ok((params, bn))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Run the graph on a tape. `feeds` must provide the graph input and any
/// side inputs (film conditioners fed from outside the graph). Returns the
/// node id of every named layer. In train mode, batch-norm running stats in
/// `bn` are updated.
pub fn graph_forward<T: Real>(
    graph: &ModelGraph,
    prefix: &str,
    param_ids: &HashMap<String, NodeId>,
    bn: &mut BnStats<T>,
    tape: &mut Tape<T>,
    feeds: &[(&str, NodeId)],
    mode: Mode,
) -> HashMap<String, NodeId> {
    let mut nodes: HashMap<String, NodeId> = feeds
        .iter()
        .map(|(n, id)| (n.to_string(), *id))
        .collect();
    let batch = tape.shape(nodes[GRAPH_INPUT])[0];
    for layer in &graph.layers {
        let pid = |suffix: &str| -> NodeId {
            let full = format!("{prefix}.{}.{suffix}", layer.name);
            *param_ids
                .get(&full)
                .unwrap_or_else(|| panic!("parameter '{full}' not on tape"))
        };
        let input_id = |idx: usize| -> NodeId {
            *nodes
                .get(&layer.inputs[idx])
                .unwrap_or_else(|| panic!("layer '{}' input '{}' not computed", layer.name, layer.inputs[idx]))
        };
        let x = input_id(0);
        let out = match &layer.spec {
            LayerSpec::Dense { .. } => {
                let y = tape.matmul(x, pid("w"));
                tape.add_bias(y, pid("b"))
            }
            LayerSpec::Conv { in_ch, out_ch, kernel, stride } => {
                let xs = tape.shape(x).to_vec();
                let geom = Conv2dGeom::same(xs[0], xs[1], xs[2], *in_ch, *kernel, *out_ch, *stride);
                tape.conv2d(x, pid("w"), Some(pid("b")), geom)
            }
            LayerSpec::ConvTranspose { in_ch, out_ch, kernel, stride } => {
                let xs = tape.shape(x).to_vec();
                let geom = convt_same_geom(xs[0], xs[1], xs[2], *in_ch, *kernel, *out_ch, *stride);
                tape.convt2d(x, pid("w"), Some(pid("b")), geom)
            }
            LayerSpec::BatchNorm { .. } => {
                let state_key = format!("{prefix}.{}", layer.name);
                match mode {
                    Mode::Train => {
                        let (y, mean, var) =
                            tape.batchnorm_train(x, pid("gamma"), pid("beta"), BN_EPS);
                        bn.update(&state_key, &mean, &var);
                        y
                    }
                    Mode::Eval => {
                        let (rm, rv) = bn.get(&state_key);
                        let (rm, rv) = (rm.to_vec(), rv.to_vec());
                        tape.batchnorm_eval(x, pid("gamma"), pid("beta"), &rm, &rv, BN_EPS)
                    }
                }
            }
            LayerSpec::Activation { kind } => match kind {
                Activation::Relu => tape.relu(x),
                Activation::Sigmoid => tape.sigmoid(x),
                Activation::Swish => tape.swish(x),
            },
            LayerSpec::Film { channels } => {
                let cond = input_id(1);
                let gamma = tape.slice_last(cond, 0, *channels);
                let beta = tape.slice_last(cond, *channels, *channels);
                film_modulate(tape, x, gamma, beta)
            }
            LayerSpec::GlobalAvgPool => tape.global_avg_pool(x),
            LayerSpec::Flatten => {
                let per: usize = tape.shape(x)[1..].iter().product();
                tape.reshape(x, &[batch, per])
            }
            LayerSpec::Reshape { shape } => {
                let mut full = vec![batch];
                full.extend_from_slice(shape);
                tape.reshape(x, &full)
            }
            LayerSpec::Upsample { factor } => tape.upsample(x, *factor),
            LayerSpec::Concat => {
                let b = input_id(1);
                tape.concat_last(x, b)
            }
            LayerSpec::Add => {
                let b = input_id(1);
                tape.add(x, b)
            }
        };
        nodes.insert(layer.name.clone(), out);
    }
    nodes
}

/// Featurewise linear modulation: output channel c is
/// `gamma[c] * features[c] + beta[c]`, with per-sample gamma/beta of shape
/// [N, C]. Errors (panics) on channel-count mismatch.
pub fn film_modulate<T: Real>(tape: &mut Tape<T>, features: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
    let scaled = tape.scale_channels(features, gamma);
    tape.add_channels(scaled, beta)
}

// ── Named builders ──────────────────────────────────────────────────────

fn cnn_stage_plan(input_side: usize) -> Result<usize> {
    if input_side >= 32 {
        if input_side % 16 != 0 {
            return Err(Error::config(format!(
                "input_side {input_side} not divisible by 2^4 (required for sides >= 32)"
            )));
        }
        Ok(4)
    } else if input_side % 4 == 0 && input_side >= 8 {
        Ok(2)
    } else {
        Err(Error::config(format!(
            "input_side {input_side} unsupported: need a multiple of 4 (>= 8) or of 16 (>= 32)"
        )))
    }
}

fn cnn_encoder_trunk(graph: &mut ModelGraph, base: usize, channels: usize, stages: usize) -> (String, usize) {
    let mut prev = GRAPH_INPUT.to_string();
    let mut in_ch = channels;
    for s in 0..stages {
        let out_ch = base << s;
        prev = graph.push(
            &format!("conv{}", s + 1),
            &prev,
            LayerSpec::Conv { in_ch, out_ch, kernel: 4, stride: 2 },
        );
        prev = graph.push(&format!("bn{}", s + 1), &prev, LayerSpec::BatchNorm { channels: out_ch });
        prev = graph.push(
            &format!("act{}", s + 1),
            &prev,
            LayerSpec::Activation { kind: Activation::Relu },
        );
        in_ch = out_ch;
    }
    (prev, in_ch)
}

fn cnn_decoder(input_side: usize, base: usize, channels: usize, latent_dim: usize, stages: usize) -> ModelGraph {
    // The decoder reverses the encoder's channel progression but re-enters
    // image space at input_side / 2^(stages/2), so it has half as many
    // upsampling steps as the encoder has downsampling steps.
    let ups = stages / 2;
    let side0 = input_side >> ups;
    let top_ch = base << (stages - 1);
    let mut graph = ModelGraph::new(&[latent_dim]);
    let mut prev = graph.push(
        "expand",
        GRAPH_INPUT,
        LayerSpec::Dense { in_dim: latent_dim, out_dim: side0 * side0 * top_ch },
    );
    prev = graph.push(
        "unflatten",
        &prev,
        LayerSpec::Reshape { shape: vec![side0, side0, top_ch] },
    );
    prev = graph.push("bn0", &prev, LayerSpec::BatchNorm { channels: top_ch });
    prev = graph.push("act0", &prev, LayerSpec::Activation { kind: Activation::Relu });
    let mut in_ch = top_ch;
    for s in 0..ups {
        let out_ch = in_ch / 2;
        prev = graph.push(
            &format!("deconv{}", s + 1),
            &prev,
            LayerSpec::ConvTranspose { in_ch, out_ch, kernel: 4, stride: 2 },
        );
        prev = graph.push(&format!("bn{}", s + 1), &prev, LayerSpec::BatchNorm { channels: out_ch });
        prev = graph.push(
            &format!("act{}", s + 1),
            &prev,
            LayerSpec::Activation { kind: Activation::Relu },
        );
        in_ch = out_ch;
    }
    prev = graph.push(
        "to_image",
        &prev,
        LayerSpec::Conv { in_ch, out_ch: channels, kernel: 4, stride: 1 },
    );
    prev = graph.push("out", &prev, LayerSpec::Activation { kind: Activation::Sigmoid });
    graph.outputs = vec![prev];
    graph
}

/// Convolutional VAE: stride-2, kernel-4 conv stages that double channels
/// (base, 2base, 4base, 8base for sides >= 32), batch-norm and ReLU
/// throughout, two independent dense heads for the posterior mean and
/// log-variance, and a decoder that mirrors the channel progression back up
/// to a sigmoid output.
pub fn build_vanilla_cnn(
    input_side: usize,
    base_channels: usize,
    latent_dim: usize,
    channels: usize,
) -> Result<(ModelGraph, ModelGraph)> {
    if base_channels == 0 || latent_dim == 0 || channels == 0 {
        return Err(Error::config(
            "base_channels, latent_dim and channels must be positive",
        ));
    }
    let stages = cnn_stage_plan(input_side)?;
    let mut encoder = ModelGraph::new(&[input_side, input_side, channels]);
    let (trunk, _top) = cnn_encoder_trunk(&mut encoder, base_channels, channels, stages);
    let flat = encoder.push("flat", &trunk, LayerSpec::Flatten);
    let flat_dim = (input_side >> stages) * (input_side >> stages) * (base_channels << (stages - 1));
    encoder.push("mean", &flat, LayerSpec::Dense { in_dim: flat_dim, out_dim: latent_dim });
    encoder.push("logvar", &flat, LayerSpec::Dense { in_dim: flat_dim, out_dim: latent_dim });
    encoder.outputs = vec!["mean".into(), "logvar".into()];
    encoder.resolve_shapes()?;

    let decoder = cnn_decoder(input_side, base_channels, channels, latent_dim, stages);
    decoder.resolve_shapes()?;
    Ok((encoder, decoder))
}

/// Deterministic-autoencoder variant: identical to [`build_vanilla_cnn`]
/// except the latent stage is a single dense layer producing z directly.
pub fn build_rae_cnn(
    input_side: usize,
    base_channels: usize,
    latent_dim: usize,
    channels: usize,
) -> Result<(ModelGraph, ModelGraph)> {
    if base_channels == 0 || latent_dim == 0 || channels == 0 {
        return Err(Error::config(
            "base_channels, latent_dim and channels must be positive",
        ));
    }
    let stages = cnn_stage_plan(input_side)?;
    let mut encoder = ModelGraph::new(&[input_side, input_side, channels]);
    let (trunk, _top) = cnn_encoder_trunk(&mut encoder, base_channels, channels, stages);
    let flat = encoder.push("flat", &trunk, LayerSpec::Flatten);
    let flat_dim = (input_side >> stages) * (input_side >> stages) * (base_channels << (stages - 1));
    encoder.push("z", &flat, LayerSpec::Dense { in_dim: flat_dim, out_dim: latent_dim });
    encoder.outputs = vec!["z".into()];
    encoder.resolve_shapes()?;

    let decoder = cnn_decoder(input_side, base_channels, channels, latent_dim, stages);
    decoder.resolve_shapes()?;
    Ok((encoder, decoder))
}

/// Append one residual Scale Block (batchnorm -> relu -> conv, twice, plus a
/// residual add) operating at fixed spatial extent and channel count.
/// Returns the output name.
pub fn append_scale_block(
    graph: &mut ModelGraph,
    prefix: &str,
    input: &str,
    channels: usize,
    res_blocks: usize,
) -> String {
    let mut prev = input.to_string();
    for r in 0..res_blocks {
        let p = format!("{prefix}_r{r}");
        let skip = prev.clone();
        let mut cur = graph.push(&format!("{p}_bn1"), &prev, LayerSpec::BatchNorm { channels });
        cur = graph.push(&format!("{p}_act1"), &cur, LayerSpec::Activation { kind: Activation::Relu });
        cur = graph.push(
            &format!("{p}_conv1"),
            &cur,
            LayerSpec::Conv { in_ch: channels, out_ch: channels, kernel: 3, stride: 1 },
        );
        cur = graph.push(&format!("{p}_bn2"), &cur, LayerSpec::BatchNorm { channels });
        cur = graph.push(&format!("{p}_act2"), &cur, LayerSpec::Activation { kind: Activation::Relu });
        cur = graph.push(
            &format!("{p}_conv2"),
            &cur,
            LayerSpec::Conv { in_ch: channels, out_ch: channels, kernel: 3, stride: 1 },
        );
        prev = graph.push_multi(&format!("{p}_add"), &[&cur, &skip], LayerSpec::Add);
    }
    prev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_cnn_shapes_roundtrip() {
        for side in [16usize, 28, 32, 64] {
            let (enc, dec) = build_vanilla_cnn(side, 2, 5, 3).unwrap();
            assert_eq!(enc.output_shape("mean").unwrap(), vec![5]);
            assert_eq!(enc.output_shape("logvar").unwrap(), vec![5]);
            let out = dec.output_shape(dec.outputs[0].as_str()).unwrap();
            assert_eq!(out, vec![side, side, 3], "side {side}");
        }
    }

    #[test]
    fn unsupported_side_rejected() {
        let err = build_vanilla_cnn(33, 2, 5, 3).unwrap_err();
        assert!(err.to_string().contains("33"));
        let err = build_vanilla_cnn(40, 2, 5, 3).unwrap_err();
        assert!(err.to_string().contains("2^4"));
    }

    #[test]
    fn zero_size_layer_rejected() {
        let mut g = ModelGraph::new(&[4]);
        g.push("d", GRAPH_INPUT, LayerSpec::Dense { in_dim: 4, out_dim: 0 });
        assert!(g.resolve_shapes().is_err());
    }

    #[test]
    fn text_roundtrip() {
        let (enc, _) = build_vanilla_cnn(32, 4, 8, 3).unwrap();
        let text = enc.to_text();
        let back = ModelGraph::from_text(&text).unwrap();
        assert_eq!(enc, back);
    }

    #[test]
    fn minimal_config_forward_runs() {
        // (32, 1, 1): every layer shape-checks and forward runs on one sample.
        let (enc, dec) = build_vanilla_cnn(32, 1, 1, 3).unwrap();
        let (p_enc, mut bn_enc) = init_params::<f32>(&enc, 1, "enc").unwrap();
        let (p_dec, mut bn_dec) = init_params::<f32>(&dec, 2, "dec").unwrap();
        let mut tape = Tape::new();
        let ids_enc = p_enc.leaves(&mut tape);
        let ids_dec = p_dec.leaves(&mut tape);
        // Eval mode allows batch size 1 through batch-norm.
        let x = tape.constant(Tensor::filled(&[1, 32, 32, 3], 0.5f32));
        let out = graph_forward(
            &enc, "enc", &ids_enc, &mut bn_enc, &mut tape,
            &[(GRAPH_INPUT, x)], Mode::Eval,
        );
        let z = out["mean"];
        assert_eq!(tape.shape(z), &[1, 1]);
        let out = graph_forward(
            &dec, "dec", &ids_dec, &mut bn_dec, &mut tape,
            &[(GRAPH_INPUT, z)], Mode::Eval,
        );
        let img = out[dec.outputs[0].as_str()];
        assert_eq!(tape.shape(img), &[1, 32, 32, 3]);
        assert!(tape.value(img).is_finite());
    }

    #[test]
    fn film_identity_and_constant() {
        let mut tape: Tape<f32> = Tape::new();
        let feats = tape.constant(Tensor::from_f64(&[1, 2, 2, 2], &[0.5; 8]));
        let ones = tape.constant(Tensor::filled(&[1, 2], 1.0f32));
        let zeros = tape.constant(Tensor::zeros(&[1, 2]));
        let same = film_modulate(&mut tape, feats, ones, zeros);
        assert_eq!(tape.value(same).data(), tape.value(feats).data());
        // gamma = 0, beta = b: constant channels.
        let beta = tape.constant(Tensor::from_f64(&[1, 2], &[3.0, -1.0]));
        let constant = film_modulate(&mut tape, feats, zeros, beta);
        let d = tape.value(constant).data();
        assert!(d.chunks(2).all(|p| p[0] == 3.0 && p[1] == -1.0));
        // gamma = 2, beta = -1 on features 0.5: output 0.
        let two = tape.constant(Tensor::filled(&[1, 2], 2.0f32));
        let negone = tape.constant(Tensor::filled(&[1, 2], -1.0f32));
        let zero_out = film_modulate(&mut tape, feats, two, negone);
        assert!(tape.value(zero_out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_and_fan_in_scaled() {
        let mut g = ModelGraph::new(&[100]);
        g.push("d", GRAPH_INPUT, LayerSpec::Dense { in_dim: 100, out_dim: 100 });
        g.outputs = vec!["d".into()];
        let (p1, _) = init_params::<f32>(&g, 9, "m").unwrap();
        let (p2, _) = init_params::<f32>(&g, 9, "m").unwrap();
        assert_eq!(p1.get("m.d.w").data(), p2.get("m.d.w").data());
        let w = p1.get("m.d.w");
        let mean: f64 = w.data().iter().map(|&v| v as f64).sum::<f64>() / w.numel() as f64;
        let var: f64 =
            w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.numel() as f64;
        // Documented scheme: U(-a, a) with a = 1/sqrt(fan_in), std = a/sqrt(3).
        let expect = (1.0f64 / 100.0).sqrt() / 3.0f64.sqrt();
        assert!(
            (var.sqrt() - expect).abs() / expect < 0.2,
            "std {} vs {}",
            var.sqrt(),
            expect
        );
    }

    #[test]
    fn scale_block_preserves_shape() {
        let mut g = ModelGraph::new(&[8, 8, 4]);
        let out = append_scale_block(&mut g, "sb0", GRAPH_INPUT, 4, 2);
        g.outputs = vec![out.clone()];
        assert_eq!(g.output_shape(&out).unwrap(), vec![8, 8, 4]);
    }

    #[test]
    fn batchnorm_batch_of_one_panics_in_train() {
        let mut g = ModelGraph::new(&[3]);
        g.push("bn", GRAPH_INPUT, LayerSpec::BatchNorm { channels: 3 });
        g.outputs = vec!["bn".into()];
        let (p, mut bn) = init_params::<f32>(&g, 0, "m").unwrap();
        let mut tape = Tape::new();
        let ids = p.leaves(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            graph_forward(&g, "m", &ids, &mut bn, &mut tape, &[(GRAPH_INPUT, x)], Mode::Train)
        }));
        assert!(result.is_err());
    }
}
