//! Computation-graph IR: typed layer nodes, static shape inference and a
//! deterministic topological execution order.
//!
//! The same graph value represents both the original whole-sequence model
//! and its streaming rewrite; the difference is the [`Mode`] plus, for
//! streaming graphs, the inserted [`LayerKind::RingBuffer`] nodes and the
//! state registry. Graphs are immutable after construction; every
//! transformation builds a new graph.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::StateSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero-pad `dilation_t * (kernel_t - 1)` frames on the past side only,
    /// so no output frame depends on future input. Preserves time length at
    /// stride 1 and is the convention required for exact streaming.
    Causal,
    /// No padding; the time axis shrinks by the kernel span.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
    /// Normalizes over the last axis, computed with max subtraction.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Graph entry point. `frame_shape` is the shape of a single time frame;
    /// the time length itself is supplied at shape-inference time.
    Input {
        frame_shape: Vec<usize>,
    },
    Conv2d {
        kernel_t: usize,
        kernel_f: usize,
        stride_t: usize,
        stride_f: usize,
        dilation_t: usize,
        filters: usize,
        padding: Padding,
    },
    Conv1d {
        kernel_t: usize,
        stride_t: usize,
        dilation_t: usize,
        filters: usize,
        padding: Padding,
    },
    DepthwiseConv1d {
        kernel_t: usize,
        multiplier: usize,
        padding: Padding,
    },
    Dense {
        units: usize,
        use_bias: bool,
    },
    /// Collapses the whole (time-complete) input into one vector.
    Flatten,
    /// Mean over the time axis; keeps the per-frame axes.
    GlobalAvgPoolTime,
    AvgPool2d {
        pool_t: usize,
        pool_f: usize,
        stride_t: usize,
        stride_f: usize,
    },
    Activation {
        kind: ActivationKind,
    },
    /// Inference-only batch norm: per-channel `scale`/`offset` weights,
    /// folded from training statistics. No running-statistics update.
    BatchNormInference,
    Gru {
        units: usize,
        return_sequences: bool,
    },
    BidirectionalGru {
        units: usize,
    },
    Add,
    Concat {
        axis: usize,
    },
    /// Two inputs: a query vector and a `[T, D]` key/value sequence.
    MultiHeadAttention {
        heads: usize,
        key_dim: usize,
    },
    /// Picks the frame at index `floor(T / 2)` of its input sequence.
    CenterSelect,
    /// FIFO of the most recent `length` input frames; inserted only by the
    /// streaming conversion, never present in non-streaming graphs.
    RingBuffer {
        length: usize,
    },
    /// Explicit marker that a layer buffers frames when streamed. Behaves
    /// exactly like `inner` otherwise; the conversion derives buffer sizes
    /// automatically, with or without the marker.
    Stream {
        inner: Box<LayerKind>,
    },
}

impl LayerKind {
    /// The effective kind with any `Stream` markers stripped.
    pub fn core_kind(&self) -> &LayerKind {
        match self {
            LayerKind::Stream { inner } => inner.core_kind(),
            other => other,
        }
    }

    pub fn requires_weights(&self) -> bool {
        matches!(
            self.core_kind(),
            LayerKind::Conv2d { .. }
                | LayerKind::Conv1d { .. }
                | LayerKind::DepthwiseConv1d { .. }
                | LayerKind::Dense { .. }
                | LayerKind::BatchNormInference
                | LayerKind::Gru { .. }
                | LayerKind::BidirectionalGru { .. }
                | LayerKind::MultiHeadAttention { .. }
        )
    }

    fn validate_params(&self) -> Result<()> {
        let positive = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::InvalidSpec(format!("{what} must be >= 1")))
            } else {
                Ok(())
            }
        };
        match self {
            LayerKind::Conv2d {
                kernel_t,
                kernel_f,
                stride_t,
                stride_f,
                dilation_t,
                filters,
                ..
            } => {
                positive(*kernel_t, "kernel_t")?;
                positive(*kernel_f, "kernel_f")?;
                positive(*stride_t, "stride_t")?;
                positive(*stride_f, "stride_f")?;
                positive(*dilation_t, "dilation_t")?;
                positive(*filters, "filters")
            }
            LayerKind::Conv1d {
                kernel_t,
                stride_t,
                dilation_t,
                filters,
                ..
            } => {
                positive(*kernel_t, "kernel_t")?;
                positive(*stride_t, "stride_t")?;
                positive(*dilation_t, "dilation_t")?;
                positive(*filters, "filters")
            }
            LayerKind::DepthwiseConv1d {
                kernel_t,
                multiplier,
                ..
            } => {
                positive(*kernel_t, "kernel_t")?;
                positive(*multiplier, "multiplier")
            }
            LayerKind::Dense { units, .. } => positive(*units, "units"),
            LayerKind::AvgPool2d {
                pool_t,
                pool_f,
                stride_t,
                stride_f,
            } => {
                positive(*pool_t, "pool_t")?;
                positive(*pool_f, "pool_f")?;
                positive(*stride_t, "stride_t")?;
                positive(*stride_f, "stride_f")
            }
            LayerKind::Gru { units, .. } | LayerKind::BidirectionalGru { units } => {
                positive(*units, "units")
            }
            LayerKind::MultiHeadAttention { heads, key_dim } => {
                positive(*heads, "heads")?;
                positive(*key_dim, "key_dim")
            }
            LayerKind::RingBuffer { length } => positive(*length, "ring buffer length"),
            LayerKind::Stream { inner } => inner.validate_params(),
            LayerKind::Input { frame_shape } => {
                if frame_shape.is_empty() || frame_shape.contains(&0) {
                    return Err(Error::InvalidSpec(format!(
                        "input frame shape {frame_shape:?} must be non-empty with positive axes"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Concrete shape of a node output. `has_time` marks sequence tensors whose
/// axis 0 is time; layers such as `Flatten` or `CenterSelect` collapse the
/// time axis and produce plain vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub dims: Vec<usize>,
    pub has_time: bool,
}

impl Shape {
    pub fn seq(dims: Vec<usize>) -> Shape {
        Shape {
            dims,
            has_time: true,
        }
    }

    pub fn vector(dims: Vec<usize>) -> Shape {
        Shape {
            dims,
            has_time: false,
        }
    }

    /// Time length, if this is a sequence shape.
    pub fn time_len(&self) -> Option<usize> {
        if self.has_time {
            Some(self.dims[0])
        } else {
            None
        }
    }

    /// Per-frame dims of a sequence shape (everything after the time axis).
    pub fn frame_dims(&self) -> &[usize] {
        debug_assert!(self.has_time);
        &self.dims[1..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    /// Named weight tensors. Shared (not copied) between graph rewrites.
    pub weights: BTreeMap<String, Arc<Tensor>>,
    /// Filled by [`Graph::infer_shapes`]; `None` until then.
    pub out_shape: Option<Shape>,
}

impl Node {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: Vec<String>) -> Node {
        Node {
            id: id.into(),
            kind,
            inputs,
            weights: BTreeMap::new(),
            out_shape: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<(&str, Tensor)>) -> Node {
        for (name, t) in weights {
            self.weights.insert(name.to_string(), Arc::new(t));
        }
        self
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::MissingWeight {
                node: self.id.clone(),
                name: name.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NonStreaming,
    StreamingInternal,
    StreamingExternal,
}

impl Mode {
    pub fn is_streaming(&self) -> bool {
        matches!(self, Mode::StreamingInternal | Mode::StreamingExternal)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::NonStreaming => "non_streaming",
            Mode::StreamingInternal => "streaming_internal",
            Mode::StreamingExternal => "streaming_external",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub nodes: BTreeMap<String, Node>,
    pub input_ids: Vec<String>,
    pub output_ids: Vec<String>,
    pub mode: Mode,
    /// State registry for streaming graphs, ordered by the owning node's
    /// topological position. Empty for non-streaming graphs. In external
    /// mode these are exactly the extra model inputs/outputs.
    pub states: Vec<StateSpec>,
}

impl Graph {
    /// Builds a non-streaming graph and validates its structure.
    pub fn new(nodes: Vec<Node>, input_ids: Vec<String>, output_ids: Vec<String>) -> Result<Graph> {
        let g = Graph::assemble(nodes, input_ids, output_ids, Mode::NonStreaming, Vec::new())?;
        Ok(g)
    }

    pub(crate) fn assemble(
        nodes: Vec<Node>,
        input_ids: Vec<String>,
        output_ids: Vec<String>,
        mode: Mode,
        states: Vec<StateSpec>,
    ) -> Result<Graph> {
        let mut map = BTreeMap::new();
        for n in nodes {
            if map.insert(n.id.clone(), n).is_some() {
                return Err(Error::InvalidSpec("duplicate node id".into()));
            }
        }
        let g = Graph {
            nodes: map,
            input_ids,
            output_ids,
            mode,
            states,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_ids.is_empty() || self.output_ids.is_empty() {
            return Err(Error::InvalidSpec(
                "graph needs at least one input and one output".into(),
            ));
        }
        for id in self.input_ids.iter().chain(&self.output_ids) {
            if !self.nodes.contains_key(id) {
                return Err(Error::InvalidSpec(format!("unknown graph i/o node `{id}`")));
            }
        }
        for node in self.nodes.values() {
            node.kind.validate_params()?;
            for input in &node.inputs {
                if !self.nodes.contains_key(input) {
                    return Err(Error::InvalidSpec(format!(
                        "node `{}` references unknown input `{input}`",
                        node.id
                    )));
                }
            }
            let is_input_kind = matches!(node.kind.core_kind(), LayerKind::Input { .. });
            if is_input_kind != self.input_ids.contains(&node.id) {
                return Err(Error::InvalidSpec(format!(
                    "node `{}`: input kind and input_ids listing disagree",
                    node.id
                )));
            }
            if node.kind.requires_weights() && node.weights.is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "node `{}` requires weights but has none",
                    node.id
                )));
            }
            if !node.kind.requires_weights() && !node.weights.is_empty() {
                return Err(Error::InvalidSpec(format!(
                    "node `{}` carries weights its kind does not use",
                    node.id
                )));
            }
            if matches!(node.kind.core_kind(), LayerKind::RingBuffer { .. })
                && !self.mode.is_streaming()
            {
                return Err(Error::InvalidSpec(format!(
                    "ring buffer node `{}` in a non-streaming graph",
                    node.id
                )));
            }
        }
        if !self.mode.is_streaming() && !self.states.is_empty() {
            return Err(Error::InvalidSpec(
                "non-streaming graph carries streaming states".into(),
            ));
        }
        if self.mode.is_streaming() {
            // Streaming graphs run one frame at a time.
            for id in &self.input_ids {
                if let Some(shape) = &self.nodes[id].out_shape {
                    if shape.time_len() != Some(1) {
                        return Err(Error::InvalidSpec(format!(
                            "streaming graph input `{id}` has time length {:?}, expected 1",
                            shape.time_len()
                        )));
                    }
                }
            }
        }
        self.topo_order()?;
        Ok(())
    }

    pub fn node(&self, id: &str) -> Result<&Node> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown node `{id}`")))
    }

    /// Deterministic topological order: every node appears after all of its
    /// inputs, ties broken by node id (the ready set is kept sorted).
    pub fn topo_order(&self) -> Result<Vec<String>> {
        let mut indegree: BTreeMap<&str, usize> = BTreeMap::new();
        let mut consumers: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for node in self.nodes.values() {
            indegree.entry(&node.id).or_insert(0);
            for input in &node.inputs {
                *indegree.entry(&node.id).or_insert(0) += 1;
                consumers.entry(input).or_default().push(&node.id);
            }
        }
        let mut ready: std::collections::BTreeSet<&str> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| id)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(&id) = ready.iter().next() {
            ready.remove(id);
            order.push(id.to_string());
            if let Some(next) = consumers.get(id) {
                for &c in next {
                    let d = indegree.get_mut(c).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        ready.insert(c);
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::CycleDetected);
        }
        Ok(order)
    }

    pub fn is_shape_inferred(&self) -> bool {
        self.nodes.values().all(|n| n.out_shape.is_some())
    }

    /// The single data input node (states in external mode are not graph
    /// nodes; they live in the state registry).
    pub fn single_input(&self) -> Result<&Node> {
        if self.input_ids.len() != 1 {
            return Err(Error::InvalidSpec(format!(
                "expected exactly one input node, found {}",
                self.input_ids.len()
            )));
        }
        self.node(&self.input_ids[0])
    }

    pub fn single_output_id(&self) -> Result<&str> {
        if self.output_ids.len() != 1 {
            return Err(Error::InvalidSpec(format!(
                "expected exactly one output node, found {}",
                self.output_ids.len()
            )));
        }
        Ok(&self.output_ids[0])
    }

    pub fn input_frame_shape(&self) -> Result<Vec<usize>> {
        match self.single_input()?.kind.core_kind() {
            LayerKind::Input { frame_shape } => Ok(frame_shape.clone()),
            _ => Err(Error::InvalidSpec("input node has non-input kind".into())),
        }
    }

    /// Returns a copy of the graph with every node's `out_shape` concretized
    /// for the given input time length. Also validates weight dimensions
    /// against layer parameters. Idempotent.
    pub fn infer_shapes(&self, input_time_len: usize) -> Result<Graph> {
        if input_time_len == 0 {
            return Err(Error::InvalidShape("input time length must be >= 1".into()));
        }
        let order = self.topo_order()?;
        let mut g = self.clone();
        let mut shapes: BTreeMap<String, Shape> = BTreeMap::new();
        for id in &order {
            let node = &g.nodes[id];
            let input_shapes: Vec<&Shape> = node
                .inputs
                .iter()
                .map(|i| shapes.get(i).expect("inputs precede consumers"))
                .collect();
            let shape = infer_node_shape(node, &input_shapes, input_time_len)?;
            shapes.insert(id.clone(), shape);
        }
        for (id, shape) in shapes {
            g.nodes.get_mut(&id).unwrap().out_shape = Some(shape);
        }
        Ok(g)
    }
}

fn want_rank(node: &Node, s: &Shape, rank: usize, seq: bool) -> Result<()> {
    if s.dims.len() != rank || s.has_time != seq {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: expected a rank-{rank} {} input, got {:?} (has_time={})",
            node.id,
            if seq { "sequence" } else { "vector" },
            s.dims,
            s.has_time
        )));
    }
    Ok(())
}

fn want_weight_dims(node: &Node, name: &str, dims: &[usize]) -> Result<()> {
    let w = node.weight(name)?;
    if w.shape() != dims {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: weight `{name}` has shape {:?}, expected {dims:?}",
            node.id,
            w.shape()
        )));
    }
    Ok(())
}

/// Output time length of a time convolution.
pub fn conv_time_len(
    t: usize,
    kernel_t: usize,
    stride_t: usize,
    dilation_t: usize,
    padding: Padding,
    node_id: &str,
) -> Result<usize> {
    match padding {
        Padding::Causal => Ok(t.div_ceil(stride_t)),
        Padding::Valid => {
            let span = dilation_t * (kernel_t - 1) + 1;
            if t < span {
                return Err(Error::ShapeMismatch(format!(
                    "node `{node_id}`: valid conv needs {span} frames, input has {t}"
                )));
            }
            Ok((t - span) / stride_t + 1)
        }
    }
}

fn infer_node_shape(node: &Node, inputs: &[&Shape], input_time_len: usize) -> Result<Shape> {
    let one = |what: &str| -> Result<()> {
        if inputs.len() == 1 {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "node `{}` ({what}) takes exactly one input, got {}",
                node.id,
                inputs.len()
            )))
        }
    };
    match node.kind.core_kind() {
        LayerKind::Input { frame_shape } => {
            if !inputs.is_empty() {
                return Err(Error::ShapeMismatch(format!(
                    "input node `{}` cannot have inputs",
                    node.id
                )));
            }
            let mut dims = vec![input_time_len];
            dims.extend_from_slice(frame_shape);
            Ok(Shape::seq(dims))
        }
        LayerKind::Conv2d {
            kernel_t,
            kernel_f,
            stride_t,
            stride_f,
            dilation_t,
            filters,
            padding,
        } => {
            one("conv2d")?;
            let s = inputs[0];
            want_rank(node, s, 3, true)?;
            let (t, f, c) = (s.dims[0], s.dims[1], s.dims[2]);
            want_weight_dims(node, "kernel", &[*kernel_t, *kernel_f, c, *filters])?;
            want_weight_dims(node, "bias", &[*filters])?;
            let t_out = conv_time_len(t, *kernel_t, *stride_t, *dilation_t, *padding, &node.id)?;
            if f < *kernel_f {
                return Err(Error::ShapeMismatch(format!(
                    "node `{}`: kernel_f {kernel_f} exceeds feature axis {f}",
                    node.id
                )));
            }
            let f_out = (f - kernel_f) / stride_f + 1;
            Ok(Shape::seq(vec![t_out, f_out, *filters]))
        }
        LayerKind::Conv1d {
            kernel_t,
            stride_t,
            dilation_t,
            filters,
            padding,
        } => {
            one("conv1d")?;
            let s = inputs[0];
            want_rank(node, s, 2, true)?;
            let (t, c) = (s.dims[0], s.dims[1]);
            want_weight_dims(node, "kernel", &[*kernel_t, c, *filters])?;
            want_weight_dims(node, "bias", &[*filters])?;
            let t_out = conv_time_len(t, *kernel_t, *stride_t, *dilation_t, *padding, &node.id)?;
            Ok(Shape::seq(vec![t_out, *filters]))
        }
        LayerKind::DepthwiseConv1d {
            kernel_t,
            multiplier,
            padding,
        } => {
            one("depthwise_conv1d")?;
            let s = inputs[0];
            want_rank(node, s, 2, true)?;
            let (t, c) = (s.dims[0], s.dims[1]);
            want_weight_dims(node, "kernel", &[*kernel_t, c, *multiplier])?;
            want_weight_dims(node, "bias", &[c * multiplier])?;
            let t_out = conv_time_len(t, *kernel_t, 1, 1, *padding, &node.id)?;
            Ok(Shape::seq(vec![t_out, c * multiplier]))
        }
        LayerKind::Dense { units, use_bias } => {
            one("dense")?;
            let s = inputs[0];
            if s.dims.is_empty() {
                return Err(Error::shape_mismatch("dense input must have rank >= 1"));
            }
            let f = *s.dims.last().unwrap();
            want_weight_dims(node, "kernel", &[f, *units])?;
            if *use_bias {
                want_weight_dims(node, "bias", &[*units])?;
            } else if node.weights.contains_key("bias") {
                return Err(Error::InvalidSpec(format!(
                    "node `{}`: bias weight present but use_bias is false",
                    node.id
                )));
            }
            let mut dims = s.dims.clone();
            *dims.last_mut().unwrap() = *units;
            Ok(Shape {
                dims,
                has_time: s.has_time,
            })
        }
        LayerKind::Flatten => {
            one("flatten")?;
            let numel = inputs[0].dims.iter().product();
            Ok(Shape::vector(vec![numel]))
        }
        LayerKind::GlobalAvgPoolTime => {
            one("global_avg_pool_time")?;
            let s = inputs[0];
            if !s.has_time || s.dims.len() < 2 {
                return Err(Error::ShapeMismatch(format!(
                    "node `{}`: time pooling needs a sequence of rank >= 2",
                    node.id
                )));
            }
            Ok(Shape::vector(s.dims[1..].to_vec()))
        }
        LayerKind::AvgPool2d {
            pool_t,
            pool_f,
            stride_t,
            stride_f,
        } => {
            one("avg_pool2d")?;
            let s = inputs[0];
            want_rank(node, s, 3, true)?;
            let (t, f, c) = (s.dims[0], s.dims[1], s.dims[2]);
            if t < *pool_t || f < *pool_f {
                return Err(Error::ShapeMismatch(format!(
                    "node `{}`: pool window {pool_t}x{pool_f} exceeds input {t}x{f}",
                    node.id
                )));
            }
            Ok(Shape::seq(vec![
                (t - pool_t) / stride_t + 1,
                (f - pool_f) / stride_f + 1,
                c,
            ]))
        }
        LayerKind::Activation { .. } => {
            one("activation")?;
            Ok(inputs[0].clone())
        }
        LayerKind::BatchNormInference => {
            one("batch_norm")?;
            let s = inputs[0];
            let c = *s.dims.last().unwrap();
            want_weight_dims(node, "scale", &[c])?;
            want_weight_dims(node, "offset", &[c])?;
            Ok(s.clone())
        }
        LayerKind::Gru {
            units,
            return_sequences,
        } => {
            one("gru")?;
            let s = inputs[0];
            if !s.has_time || s.dims.len() < 2 {
                return Err(Error::ShapeMismatch(format!(
                    "node `{}`: gru needs a sequence input",
                    node.id
                )));
            }
            let f: usize = s.dims[1..].iter().product();
            check_gru_weights(node, "", f, *units)?;
            if *return_sequences {
                Ok(Shape::seq(vec![s.dims[0], *units]))
            } else {
                Ok(Shape::vector(vec![*units]))
            }
        }
        LayerKind::BidirectionalGru { units } => {
            one("bidirectional_gru")?;
            let s = inputs[0];
            if !s.has_time || s.dims.len() < 2 {
                return Err(Error::ShapeMismatch(format!(
                    "node `{}`: bidirectional gru needs a sequence input",
                    node.id
                )));
            }
            let f: usize = s.dims[1..].iter().product();
            check_gru_weights(node, "fw_", f, *units)?;
            check_gru_weights(node, "bw_", f, *units)?;
            Ok(Shape::seq(vec![s.dims[0], 2 * units]))
        }
        LayerKind::Add => {
            if inputs.len() < 2 {
                return Err(Error::shape_mismatch("add needs at least two inputs"));
            }
            for s in &inputs[1..] {
                if *s != inputs[0] {
                    return Err(Error::ShapeMismatch(format!(
                        "node `{}`: add inputs disagree: {:?} vs {:?}",
                        node.id, inputs[0].dims, s.dims
                    )));
                }
            }
            Ok(inputs[0].clone())
        }
        LayerKind::Concat { axis } => {
            if inputs.len() < 2 {
                return Err(Error::shape_mismatch("concat needs at least two inputs"));
            }
            let first = inputs[0];
            if *axis >= first.dims.len() {
                return Err(Error::ShapeMismatch(format!(
                    "node `{}`: concat axis {axis} out of range for rank {}",
                    node.id,
                    first.dims.len()
                )));
            }
            let mut dims = first.dims.clone();
            for s in &inputs[1..] {
                if s.dims.len() != first.dims.len() || s.has_time != first.has_time {
                    return Err(Error::ShapeMismatch(format!(
                        "node `{}`: concat inputs have mismatched ranks",
                        node.id
                    )));
                }
                for (ax, (&a, &b)) in first.dims.iter().zip(&s.dims).enumerate() {
                    if ax != *axis && a != b {
                        return Err(Error::ShapeMismatch(format!(
                            "node `{}`: concat inputs differ on axis {ax}",
                            node.id
                        )));
                    }
                }
                dims[*axis] += s.dims[*axis];
            }
            Ok(Shape {
                dims,
                has_time: first.has_time,
            })
        }
        LayerKind::MultiHeadAttention { heads, key_dim } => {
            if inputs.len() != 2 {
                return Err(Error::shape_mismatch(
                    "multi-head attention takes (query, key/value sequence)",
                ));
            }
            let (q, kv) = (inputs[0], inputs[1]);
            want_rank(node, q, 1, false)?;
            want_rank(node, kv, 2, true)?;
            let d = heads * key_dim;
            want_weight_dims(node, "w_q", &[q.dims[0], d])?;
            want_weight_dims(node, "w_k", &[kv.dims[1], d])?;
            want_weight_dims(node, "w_v", &[kv.dims[1], d])?;
            want_weight_dims(node, "w_o", &[d, d])?;
            Ok(Shape::vector(vec![d]))
        }
        LayerKind::CenterSelect => {
            one("center_select")?;
            let s = inputs[0];
            want_rank(node, s, 2, true)?;
            Ok(Shape::vector(vec![s.dims[1]]))
        }
        LayerKind::RingBuffer { length } => {
            one("ring_buffer")?;
            let s = inputs[0];
            if !s.has_time || s.dims[0] != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "node `{}`: ring buffer consumes single frames, got {:?}",
                    node.id, s.dims
                )));
            }
            let mut dims = s.dims.clone();
            dims[0] = *length;
            Ok(Shape::seq(dims))
        }
        LayerKind::Stream { .. } => unreachable!("core_kind strips stream markers"),
    }
}

fn check_gru_weights(node: &Node, prefix: &str, f: usize, units: usize) -> Result<()> {
    for gate in ["z", "r", "h"] {
        want_weight_dims(node, &format!("{prefix}w_{gate}"), &[f, units])?;
        want_weight_dims(node, &format!("{prefix}u_{gate}"), &[units, units])?;
        want_weight_dims(node, &format!("{prefix}b_{gate}"), &[units])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{dense_weights, glorot, WeightRng};

    fn conv_flatten_dense() -> Graph {
        // 6x3 input, 3x3 valid conv (1 filter), flatten, dense.
        let mut rng = WeightRng::new(7);
        let nodes = vec![
            Node::new(
                "input",
                LayerKind::Input {
                    frame_shape: vec![3, 1],
                },
                vec![],
            ),
            Node::new(
                "conv",
                LayerKind::Conv2d {
                    kernel_t: 3,
                    kernel_f: 3,
                    stride_t: 1,
                    stride_f: 1,
                    dilation_t: 1,
                    filters: 1,
                    padding: Padding::Valid,
                },
                vec!["input".into()],
            )
            .with_weights(vec![
                ("kernel", glorot(&mut rng, &[3, 3, 1, 1])),
                ("bias", Tensor::zeros(&[1]).unwrap()),
            ]),
            Node::new("flatten", LayerKind::Flatten, vec!["conv".into()]),
            Node::new(
                "dense",
                LayerKind::Dense {
                    units: 2,
                    use_bias: true,
                },
                vec!["flatten".into()],
            )
            .with_weights(dense_weights(&mut rng, 4, 2)),
        ];
        Graph::new(nodes, vec!["input".into()], vec!["dense".into()]).unwrap()
    }

    #[test]
    fn topo_order_linear_chain() {
        let g = conv_flatten_dense();
        assert_eq!(
            g.topo_order().unwrap(),
            vec!["input", "conv", "flatten", "dense"]
        );
    }

    #[test]
    fn topo_order_diamond_puts_branches_before_add() {
        let mut rng = WeightRng::new(3);
        let nodes = vec![
            Node::new(
                "in",
                LayerKind::Input {
                    frame_shape: vec![4],
                },
                vec![],
            ),
            Node::new(
                "b",
                LayerKind::Dense {
                    units: 4,
                    use_bias: false,
                },
                vec!["in".into()],
            )
            .with_weights(vec![("kernel", glorot(&mut rng, &[4, 4]))]),
            Node::new(
                "a",
                LayerKind::Activation {
                    kind: ActivationKind::Relu,
                },
                vec!["in".into()],
            ),
            Node::new("add", LayerKind::Add, vec!["a".into(), "b".into()]),
        ];
        let g = Graph::new(nodes, vec!["in".into()], vec!["add".into()]).unwrap();
        let order = g.topo_order().unwrap();
        let pos = |id: &str| order.iter().position(|x| x == id).unwrap();
        assert!(pos("a") < pos("add"));
        assert!(pos("b") < pos("add"));
        assert_eq!(pos("in"), 0);
    }

    #[test]
    fn back_edge_is_a_cycle() {
        // Assemble by hand to bypass `new`'s validation.
        let mut nodes = BTreeMap::new();
        for (id, input) in [("x", "y"), ("y", "x")] {
            nodes.insert(
                id.to_string(),
                Node::new(id, LayerKind::Add, vec![input.into(), input.into()]),
            );
        }
        let g = Graph {
            nodes,
            input_ids: vec!["x".into()],
            output_ids: vec!["y".into()],
            mode: Mode::NonStreaming,
            states: vec![],
        };
        assert!(matches!(g.topo_order(), Err(Error::CycleDetected)));
    }

    #[test]
    fn valid_conv_time_length_matches_window_enumeration() {
        // Oracle: a valid k-frame window fits at positions 0..=T-k.
        let enumerate_windows = |t: usize, k: usize| (0..=t - k).count();
        let g = conv_flatten_dense().infer_shapes(6).unwrap();
        let conv_t = g.nodes["conv"].out_shape.as_ref().unwrap().dims[0];
        assert_eq!(conv_t, enumerate_windows(6, 3));
        assert_eq!(conv_t, 4);
        assert_eq!(g.nodes["flatten"].out_shape.as_ref().unwrap().dims, vec![4]);
        assert_eq!(g.nodes["dense"].out_shape.as_ref().unwrap().dims, vec![2]);
    }

    #[test]
    fn dense_is_time_pointwise() {
        let mut rng = WeightRng::new(1);
        let nodes = vec![
            Node::new(
                "in",
                LayerKind::Input {
                    frame_shape: vec![64],
                },
                vec![],
            ),
            Node::new(
                "d",
                LayerKind::Dense {
                    units: 16,
                    use_bias: true,
                },
                vec!["in".into()],
            )
            .with_weights(dense_weights(&mut rng, 64, 16)),
        ];
        let g = Graph::new(nodes, vec!["in".into()], vec!["d".into()]).unwrap();
        let gi = g.infer_shapes(11).unwrap();
        let s = gi.nodes["d"].out_shape.as_ref().unwrap();
        assert_eq!(s.dims, vec![11, 16]);
        assert!(s.has_time);
    }

    #[test]
    fn causal_conv_preserves_time_length() {
        let mut rng = WeightRng::new(2);
        let nodes = vec![
            Node::new(
                "in",
                LayerKind::Input {
                    frame_shape: vec![8],
                },
                vec![],
            ),
            Node::new(
                "c",
                LayerKind::Conv1d {
                    kernel_t: 3,
                    stride_t: 1,
                    dilation_t: 1,
                    filters: 4,
                    padding: Padding::Causal,
                },
                vec!["in".into()],
            )
            .with_weights(vec![
                ("kernel", glorot(&mut rng, &[3, 8, 4])),
                ("bias", Tensor::zeros(&[4]).unwrap()),
            ]),
        ];
        let g = Graph::new(nodes, vec!["in".into()], vec!["c".into()]).unwrap();
        let gi = g.infer_shapes(49).unwrap();
        assert_eq!(gi.nodes["c"].out_shape.as_ref().unwrap().dims, vec![49, 4]);
    }

    #[test]
    fn infer_shapes_is_idempotent() {
        let g = conv_flatten_dense();
        let once = g.infer_shapes(6).unwrap();
        let twice = once.infer_shapes(6).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn stream_marker_is_transparent_for_shapes() {
        let bare = conv_flatten_dense().infer_shapes(6).unwrap();
        let mut wrapped = conv_flatten_dense();
        let conv = wrapped.nodes.get_mut("conv").unwrap();
        conv.kind = LayerKind::Stream {
            inner: Box::new(conv.kind.clone()),
        };
        let wrapped = wrapped.infer_shapes(6).unwrap();
        assert_eq!(
            bare.nodes["conv"].out_shape,
            wrapped.nodes["conv"].out_shape
        );
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = conv_flatten_dense();
        // Dense kernel sized for 4 inputs; a 7-frame input makes flatten emit 5.
        assert!(matches!(g.infer_shapes(7), Err(Error::ShapeMismatch(_))));
        // Remove a required weight: caught by validation.
        let conv = g.nodes.get_mut("conv").unwrap();
        conv.weights.clear();
        assert!(g.validate().is_err());
    }
}
