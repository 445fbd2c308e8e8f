//! Execution engine: whole-sequence evaluation for non-streaming graphs and
//! frame-by-frame sessions for streaming graphs in both state modes.
//!
//! Internal and external state modes share one pure step evaluator, so
//! threading states by hand reproduces a session bit-for-bit.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerKind, Mode};
use crate::kernels::{self, GruWeights};
use crate::stream::{gru_state_name, ring_buffer_step};
use crate::tensor::Tensor;

/// Output of one streaming step. `new_states` is populated in external mode
/// only; internal sessions keep their states to themselves.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub output: Tensor,
    pub new_states: BTreeMap<String, Tensor>,
}

/// Evaluates a non-streaming graph on a whole `[T, ...]` input sequence.
/// Pure: the same input yields bit-identical output.
pub fn run_non_streaming(g: &Graph, x: &Tensor) -> Result<Tensor> {
    if g.mode != Mode::NonStreaming {
        return Err(Error::WrongMode {
            expected: Mode::NonStreaming.name().into(),
            found: g.mode.name().into(),
        });
    }
    let frame_shape = g.input_frame_shape()?;
    if x.rank() < 1 || x.frame_shape() != frame_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "graph expects [T{frame_shape:?}] input, got {:?}",
            x.shape()
        )));
    }

    let order = g.topo_order()?;
    let mut outputs: HashMap<&str, Tensor> = HashMap::with_capacity(order.len());
    for id in &order {
        let node = &g.nodes[id];
        let out = if matches!(node.kind.core_kind(), LayerKind::Input { .. }) {
            x.clone()
        } else {
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &outputs[i.as_str()]).collect();
            kernels::forward_node(node, &inputs)?
        };
        outputs.insert(id, out);
    }
    Ok(outputs.remove(g.single_output_id()?).unwrap())
}

/// One streaming step as a pure function: takes the current states, returns
/// the classification output and every updated state.
fn eval_step(
    g: &Graph,
    frame: &Tensor,
    states: &BTreeMap<String, Tensor>,
    order: &[String],
) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
    let frame_shape = g.input_frame_shape()?;
    if frame.rank() < 1 || frame.shape()[0] != 1 || frame.frame_shape() != frame_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "streaming step expects a [1{frame_shape:?}] frame, got {:?}",
            frame.shape()
        )));
    }

    let mut outputs: HashMap<&str, Tensor> = HashMap::with_capacity(order.len());
    let mut new_states: BTreeMap<String, Tensor> = BTreeMap::new();
    for id in order {
        let node = &g.nodes[id];
        let out = match node.kind.core_kind() {
            LayerKind::Input { .. } => frame.clone(),
            LayerKind::RingBuffer { .. } => {
                let state = states
                    .get(id)
                    .ok_or_else(|| Error::MissingState { name: id.clone() })?;
                let input = &outputs[node.inputs[0].as_str()];
                let updated = ring_buffer_step(state, input)?;
                new_states.insert(id.clone(), updated.clone());
                updated
            }
            LayerKind::Gru {
                return_sequences, ..
            } => {
                let state_name = gru_state_name(g, id)?;
                let h = states.get(state_name).ok_or_else(|| Error::MissingState {
                    name: state_name.to_string(),
                })?;
                let input = &outputs[node.inputs[0].as_str()];
                let w = GruWeights::from_node(node, "")?;
                let (seq, h_next) = kernels::gru_forward(input, &w, h)?;
                new_states.insert(state_name.to_string(), h_next.clone());
                if *return_sequences {
                    seq
                } else {
                    h_next
                }
            }
            _ => {
                let inputs: Vec<&Tensor> =
                    node.inputs.iter().map(|i| &outputs[i.as_str()]).collect();
                kernels::forward_node(node, &inputs)?
            }
        };
        outputs.insert(id, out);
    }
    let output = outputs.remove(g.single_output_id()?).unwrap();
    Ok((output, new_states))
}

/// An executable streaming instance. Internal-mode sessions own their
/// states by value; two sessions over the same graph never share state.
/// Session memory is constant in the number of steps taken.
#[derive(Debug, Clone)]
pub struct StreamSession {
    graph: Graph,
    order: Vec<String>,
    states: BTreeMap<String, Tensor>,
    step_count: u64,
}

/// Creates a session over a streaming graph. Internal mode starts with all
/// states zero-filled: the model behaves as if it had seen an infinite
/// silence of zero frames.
pub fn new_session(g: &Graph) -> Result<StreamSession> {
    if !g.mode.is_streaming() {
        return Err(Error::WrongMode {
            expected: "streaming_internal or streaming_external".into(),
            found: g.mode.name().into(),
        });
    }
    let order = g.topo_order()?;
    let states = if g.mode == Mode::StreamingInternal {
        zero_states(g)?
    } else {
        BTreeMap::new()
    };
    Ok(StreamSession {
        graph: g.clone(),
        order,
        states,
        step_count: 0,
    })
}

/// Zero-filled tensors for every registered state, keyed by state name.
pub fn zero_states(g: &Graph) -> Result<BTreeMap<String, Tensor>> {
    let mut map = BTreeMap::new();
    for spec in &g.states {
        map.insert(spec.name().to_string(), Tensor::zeros(&spec.shape())?);
    }
    Ok(map)
}

impl StreamSession {
    /// Feeds one `[1, ...]` frame, updates the internal states and returns
    /// the classification output for this step.
    pub fn step(&mut self, frame: &Tensor) -> Result<StepResult> {
        if self.graph.mode != Mode::StreamingInternal {
            return Err(Error::WrongMode {
                expected: Mode::StreamingInternal.name().into(),
                found: self.graph.mode.name().into(),
            });
        }
        let (output, new_states) = eval_step(&self.graph, frame, &self.states, &self.order)?;
        self.states = new_states;
        self.step_count += 1;
        Ok(StepResult {
            output,
            new_states: BTreeMap::new(),
        })
    }

    /// Feeds every frame of a `[T, ...]` sequence in order.
    pub fn run_sequence(&mut self, x: &Tensor) -> Result<Vec<Tensor>> {
        let t = x.shape()[0];
        let mut outputs = Vec::with_capacity(t);
        for ti in 0..t {
            let frame = x.slice_time(ti, 1)?;
            outputs.push(self.step(&frame)?.output);
        }
        Ok(outputs)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Current state tensors (internal mode), for audits and tests.
    pub fn states(&self) -> &BTreeMap<String, Tensor> {
        &self.states
    }
}

/// One step of an external-state graph. Pure and thread-safe: the caller
/// supplies every state and receives every updated state; folding this over
/// a frame sequence reproduces an internal-mode session bit-exactly.
pub fn step_external(
    g: &Graph,
    frame: &Tensor,
    states_in: &BTreeMap<String, Tensor>,
) -> Result<StepResult> {
    if g.mode != Mode::StreamingExternal {
        return Err(Error::WrongMode {
            expected: Mode::StreamingExternal.name().into(),
            found: g.mode.name().into(),
        });
    }
    for spec in &g.states {
        let state = states_in
            .get(spec.name())
            .ok_or_else(|| Error::MissingState {
                name: spec.name().to_string(),
            })?;
        if state.shape() != spec.shape().as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "state `{}` has shape {:?}, expected {:?}",
                spec.name(),
                state.shape(),
                spec.shape()
            )));
        }
    }
    let order = g.topo_order()?;
    let (output, new_states) = eval_step(g, frame, states_in, &order)?;
    Ok(StepResult { output, new_states })
}
