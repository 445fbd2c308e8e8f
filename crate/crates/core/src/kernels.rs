//! Forward (inference-only) implementations of every layer kind, operating
//! on full sequences. All kernels are pure functions: the same input
//! produces bit-identical output.
//!
//! Accumulation orders are fixed (kernel taps outer, channels inner) so the
//! streaming executor, which evaluates the same kernels over buffered
//! windows, reproduces non-streaming results exactly.

use crate::error::{Error, Result};
use crate::graph::{ActivationKind, LayerKind, Node, Padding};
use crate::tensor::Tensor;

/// Dispatch a node's forward computation. Stateful kinds (`RingBuffer`,
/// `Gru` mid-stream) are handled by the runtime before falling through to
/// this table; here a GRU always starts from a zero hidden state.
pub fn forward_node(node: &Node, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = |n: usize| -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "node `{}`: expected {n} inputs, got {}",
                node.id,
                inputs.len()
            )))
        }
    };
    match node.kind.core_kind() {
        LayerKind::Input { .. } => {
            arity(1)?;
            Ok(inputs[0].clone())
        }
        LayerKind::Conv2d { .. } => {
            arity(1)?;
            conv2d_forward(inputs[0], node)
        }
        LayerKind::Conv1d { .. } => {
            arity(1)?;
            conv1d_forward(inputs[0], node)
        }
        LayerKind::DepthwiseConv1d { .. } => {
            arity(1)?;
            depthwise_conv1d_forward(inputs[0], node)
        }
        LayerKind::Dense { .. } => {
            arity(1)?;
            dense_forward(inputs[0], node)
        }
        LayerKind::Flatten => {
            arity(1)?;
            flatten_forward(inputs[0])
        }
        LayerKind::GlobalAvgPoolTime => {
            arity(1)?;
            global_avg_pool_time_forward(inputs[0])
        }
        LayerKind::AvgPool2d { .. } => {
            arity(1)?;
            avgpool_forward(inputs[0], node)
        }
        LayerKind::Activation { kind } => {
            arity(1)?;
            activation_forward(inputs[0], *kind)
        }
        LayerKind::BatchNormInference => {
            arity(1)?;
            batchnorm_forward(inputs[0], node)
        }
        LayerKind::Gru {
            units,
            return_sequences,
        } => {
            arity(1)?;
            let w = GruWeights::from_node(node, "")?;
            let h0 = Tensor::zeros(&[*units])?;
            let (seq, h_last) = gru_forward(inputs[0], &w, &h0)?;
            Ok(if *return_sequences { seq } else { h_last })
        }
        LayerKind::BidirectionalGru { .. } => {
            arity(1)?;
            bidirectional_gru_forward(inputs[0], node)
        }
        LayerKind::Add => {
            if inputs.len() < 2 {
                return Err(Error::shape_mismatch("add needs at least two inputs"));
            }
            add_forward(inputs)
        }
        LayerKind::Concat { axis } => {
            if inputs.len() < 2 {
                return Err(Error::shape_mismatch("concat needs at least two inputs"));
            }
            concat_forward(inputs, *axis)
        }
        LayerKind::MultiHeadAttention { heads, .. } => {
            arity(2)?;
            let w = MhaWeights::from_node(node)?;
            multihead_attention_forward(inputs[0], inputs[1], *heads, &w)
        }
        LayerKind::CenterSelect => {
            arity(1)?;
            center_select_forward(inputs[0])
        }
        LayerKind::RingBuffer { .. } => Err(Error::InvalidSpec(format!(
            "ring buffer node `{}` cannot run without session state",
            node.id
        ))),
        LayerKind::Stream { .. } => unreachable!("core_kind strips stream markers"),
    }
}

fn conv_params(kind: &LayerKind) -> (usize, usize, usize, Padding) {
    match kind {
        LayerKind::Conv2d {
            kernel_t,
            stride_t,
            dilation_t,
            padding,
            ..
        }
        | LayerKind::Conv1d {
            kernel_t,
            stride_t,
            dilation_t,
            padding,
            ..
        } => (*kernel_t, *stride_t, *dilation_t, *padding),
        LayerKind::DepthwiseConv1d {
            kernel_t, padding, ..
        } => (*kernel_t, 1, 1, *padding),
        _ => unreachable!(),
    }
}

/// Time index into the (virtually padded) input for output position `t_out`
/// and kernel tap `dt`. `None` lands in the causal zero padding.
fn conv_src_t(
    t_out: usize,
    dt: usize,
    stride_t: usize,
    dilation_t: usize,
    kernel_t: usize,
    padding: Padding,
) -> Option<usize> {
    match padding {
        Padding::Valid => Some(t_out * stride_t + dt * dilation_t),
        Padding::Causal => {
            let pad = dilation_t * (kernel_t - 1);
            (t_out * stride_t + dt * dilation_t).checked_sub(pad)
        }
    }
}

fn out_time_len(t: usize, kind: &LayerKind, node_id: &str) -> Result<usize> {
    let (kernel_t, stride_t, dilation_t, padding) = conv_params(kind);
    crate::graph::conv_time_len(t, kernel_t, stride_t, dilation_t, padding, node_id)
}

/// Standard cross-correlation over `[T, F, C]` input. Causal padding
/// left-pads `dilation_t * (kernel_t - 1)` zero frames in time; the feature
/// axis is never padded.
pub fn conv2d_forward(x: &Tensor, node: &Node) -> Result<Tensor> {
    let kind = node.kind.core_kind();
    let LayerKind::Conv2d {
        kernel_t,
        kernel_f,
        stride_t,
        stride_f,
        dilation_t,
        filters,
        padding,
    } = *kind
    else {
        unreachable!()
    };
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: conv2d input must be [T, F, C], got {:?}",
            node.id,
            x.shape()
        )));
    }
    let (t, f, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let kernel = node.weight("kernel")?;
    let bias = node.weight("bias")?;
    if kernel.shape() != [kernel_t, kernel_f, c, filters] {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: kernel shape {:?} does not match input channels {c}",
            node.id,
            kernel.shape()
        )));
    }
    let t_out = out_time_len(t, kind, &node.id)?;
    if f < kernel_f {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: kernel_f {kernel_f} exceeds feature axis {f}",
            node.id
        )));
    }
    let f_out = (f - kernel_f) / stride_f + 1;

    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; t_out * f_out * filters];
    for to in 0..t_out {
        for fo in 0..f_out {
            for o in 0..filters {
                let mut acc = 0.0f32;
                for dt in 0..kernel_t {
                    let Some(ti) = conv_src_t(to, dt, stride_t, dilation_t, kernel_t, padding)
                    else {
                        continue;
                    };
                    if ti >= t {
                        continue;
                    }
                    for df in 0..kernel_f {
                        let fi = fo * stride_f + df;
                        for ci in 0..c {
                            acc += xd[(ti * f + fi) * c + ci]
                                * kd[((dt * kernel_f + df) * c + ci) * filters + o];
                        }
                    }
                }
                out[(to * f_out + fo) * filters + o] = acc + bd[o];
            }
        }
    }
    Tensor::from_vec(vec![t_out, f_out, filters], out)
}

pub fn conv1d_forward(x: &Tensor, node: &Node) -> Result<Tensor> {
    let kind = node.kind.core_kind();
    let LayerKind::Conv1d {
        kernel_t,
        stride_t,
        dilation_t,
        filters,
        padding,
    } = *kind
    else {
        unreachable!()
    };
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: conv1d input must be [T, C], got {:?}",
            node.id,
            x.shape()
        )));
    }
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let kernel = node.weight("kernel")?;
    let bias = node.weight("bias")?;
    if kernel.shape() != [kernel_t, c, filters] {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: kernel shape {:?} does not match input channels {c}",
            node.id,
            kernel.shape()
        )));
    }
    let t_out = out_time_len(t, kind, &node.id)?;
    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; t_out * filters];
    for to in 0..t_out {
        for o in 0..filters {
            let mut acc = 0.0f32;
            for dt in 0..kernel_t {
                let Some(ti) = conv_src_t(to, dt, stride_t, dilation_t, kernel_t, padding) else {
                    continue;
                };
                if ti >= t {
                    continue;
                }
                for ci in 0..c {
                    acc += xd[ti * c + ci] * kd[(dt * c + ci) * filters + o];
                }
            }
            out[to * filters + o] = acc + bd[o];
        }
    }
    Tensor::from_vec(vec![t_out, filters], out)
}

/// Per-channel time convolution: channel `c` of the input produces output
/// channels `c*multiplier ..< (c+1)*multiplier`.
pub fn depthwise_conv1d_forward(x: &Tensor, node: &Node) -> Result<Tensor> {
    let kind = node.kind.core_kind();
    let LayerKind::DepthwiseConv1d {
        kernel_t,
        multiplier,
        padding,
    } = *kind
    else {
        unreachable!()
    };
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: depthwise conv input must be [T, C], got {:?}",
            node.id,
            x.shape()
        )));
    }
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let kernel = node.weight("kernel")?;
    let bias = node.weight("bias")?;
    if kernel.shape() != [kernel_t, c, multiplier] {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: kernel shape {:?} does not match input channels {c}",
            node.id,
            kernel.shape()
        )));
    }
    let t_out = out_time_len(t, kind, &node.id)?;
    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.data();
    let c_out = c * multiplier;
    let mut out = vec![0.0f32; t_out * c_out];
    for to in 0..t_out {
        for ci in 0..c {
            for m in 0..multiplier {
                let mut acc = 0.0f32;
                for dt in 0..kernel_t {
                    let Some(ti) = conv_src_t(to, dt, 1, 1, kernel_t, padding) else {
                        continue;
                    };
                    if ti >= t {
                        continue;
                    }
                    acc += xd[ti * c + ci] * kd[(dt * c + ci) * multiplier + m];
                }
                let oc = ci * multiplier + m;
                out[to * c_out + oc] = acc + bd[oc];
            }
        }
    }
    Tensor::from_vec(vec![t_out, c_out], out)
}

/// Applied to the last axis; leading axes (time included) pass through, so
/// dense is pointwise in time.
pub fn dense_forward(x: &Tensor, node: &Node) -> Result<Tensor> {
    let LayerKind::Dense { units, use_bias } = *node.kind.core_kind() else {
        unreachable!()
    };
    let f = *x.shape().last().unwrap();
    let kernel = node.weight("kernel")?;
    if kernel.shape() != [f, units] {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: dense kernel {:?} does not match input features {f}",
            node.id,
            kernel.shape()
        )));
    }
    let bias = if use_bias {
        Some(node.weight("bias")?)
    } else {
        None
    };
    let rows = x.numel() / f;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0f32; rows * units];
    for r in 0..rows {
        for u in 0..units {
            let mut acc = 0.0f32;
            for i in 0..f {
                acc += xd[r * f + i] * kd[i * units + u];
            }
            if let Some(b) = bias {
                acc += b.data()[u];
            }
            out[r * units + u] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = units;
    Tensor::from_vec(shape, out)
}

pub fn flatten_forward(x: &Tensor) -> Result<Tensor> {
    x.reshape(vec![x.numel()])
}

/// Mean over the time axis, summed in time order.
pub fn global_avg_pool_time_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::shape_mismatch("time pooling needs rank >= 2"));
    }
    let t = x.shape()[0];
    let rest = x.frame_numel();
    let xd = x.data();
    let mut out = vec![0.0f32; rest];
    for ti in 0..t {
        for j in 0..rest {
            out[j] += xd[ti * rest + j];
        }
    }
    let inv = 1.0 / t as f32;
    for v in &mut out {
        *v *= inv;
    }
    Tensor::from_vec(x.shape()[1..].to_vec(), out)
}

pub fn avgpool_forward(x: &Tensor, node: &Node) -> Result<Tensor> {
    let LayerKind::AvgPool2d {
        pool_t,
        pool_f,
        stride_t,
        stride_f,
    } = *node.kind.core_kind()
    else {
        unreachable!()
    };
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: avg pool input must be [T, F, C], got {:?}",
            node.id,
            x.shape()
        )));
    }
    let (t, f, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if t < pool_t || f < pool_f {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: pool window {pool_t}x{pool_f} exceeds input {t}x{f}",
            node.id
        )));
    }
    let t_out = (t - pool_t) / stride_t + 1;
    let f_out = (f - pool_f) / stride_f + 1;
    let xd = x.data();
    let inv = 1.0 / (pool_t * pool_f) as f32;
    let mut out = vec![0.0f32; t_out * f_out * c];
    for to in 0..t_out {
        for fo in 0..f_out {
            for ci in 0..c {
                let mut acc = 0.0f32;
                for dt in 0..pool_t {
                    for df in 0..pool_f {
                        acc += xd[((to * stride_t + dt) * f + fo * stride_f + df) * c + ci];
                    }
                }
                out[(to * f_out + fo) * c + ci] = acc * inv;
            }
        }
    }
    Tensor::from_vec(vec![t_out, f_out, c], out)
}

pub fn activation_forward(x: &Tensor, kind: ActivationKind) -> Result<Tensor> {
    let mut data = x.data().to_vec();
    match kind {
        ActivationKind::Relu => {
            for v in &mut data {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        ActivationKind::Sigmoid => {
            for v in &mut data {
                *v = sigmoid(*v);
            }
        }
        ActivationKind::Tanh => {
            for v in &mut data {
                *v = v.tanh();
            }
        }
        ActivationKind::Softmax => {
            let f = *x.shape().last().unwrap();
            for row in data.chunks_mut(f) {
                softmax_in_place(row);
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), data)
}

pub fn batchnorm_forward(x: &Tensor, node: &Node) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    let scale = node.weight("scale")?;
    let offset = node.weight("offset")?;
    if scale.shape() != [c] || offset.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "node `{}`: batch norm weights do not match {c} channels",
            node.id
        )));
    }
    let sd = scale.data();
    let od = offset.data();
    let mut data = x.data().to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        let ci = i % c;
        *v = *v * sd[ci] + od[ci];
    }
    Tensor::from_vec(x.shape().to_vec(), data)
}

pub fn add_forward(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs[0];
    let mut data = first.data().to_vec();
    for x in &inputs[1..] {
        if x.shape() != first.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add inputs disagree: {:?} vs {:?}",
                first.shape(),
                x.shape()
            )));
        }
        for (a, b) in data.iter_mut().zip(x.data()) {
            *a += b;
        }
    }
    Tensor::from_vec(first.shape().to_vec(), data)
}

pub fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs[0];
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape_mismatch("concat axis out of range"));
    }
    let mut out_shape = first.shape().to_vec();
    for x in &inputs[1..] {
        if x.rank() != rank {
            return Err(Error::shape_mismatch("concat inputs have mismatched ranks"));
        }
        for ax in 0..rank {
            if ax != axis && x.shape()[ax] != first.shape()[ax] {
                return Err(Error::ShapeMismatch(format!(
                    "concat inputs differ on axis {ax}"
                )));
            }
        }
        out_shape[axis] += x.shape()[axis];
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    for block in 0..outer {
        for x in inputs {
            let len = x.shape()[axis] * inner;
            let start = block * len;
            out.extend_from_slice(&x.data()[start..start + len]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn center_select_forward(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::shape_mismatch("center select input must be [T, F]"));
    }
    let t = x.shape()[0];
    let center = x.slice_time(t / 2, 1)?;
    center.reshape(vec![x.shape()[1]])
}

pub struct GruWeights<'a> {
    pub w_z: &'a Tensor,
    pub w_r: &'a Tensor,
    pub w_h: &'a Tensor,
    pub u_z: &'a Tensor,
    pub u_r: &'a Tensor,
    pub u_h: &'a Tensor,
    pub b_z: &'a Tensor,
    pub b_r: &'a Tensor,
    pub b_h: &'a Tensor,
}

impl<'a> GruWeights<'a> {
    pub fn from_node(node: &'a Node, prefix: &str) -> Result<GruWeights<'a>> {
        let get = |name: String| node.weight(&name);
        Ok(GruWeights {
            w_z: get(format!("{prefix}w_z"))?,
            w_r: get(format!("{prefix}w_r"))?,
            w_h: get(format!("{prefix}w_h"))?,
            u_z: get(format!("{prefix}u_z"))?,
            u_r: get(format!("{prefix}u_r"))?,
            u_h: get(format!("{prefix}u_h"))?,
            b_z: get(format!("{prefix}b_z"))?,
            b_r: get(format!("{prefix}b_r"))?,
            b_h: get(format!("{prefix}b_h"))?,
        })
    }

    fn units(&self) -> usize {
        self.b_z.shape()[0]
    }

    fn features(&self) -> usize {
        self.w_z.shape()[0]
    }
}

/// GRU over a `[T, ...]` sequence (per-frame axes are flattened to the
/// feature vector). Gate equations:
///
/// ```text
/// z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
/// r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
/// c_t = tanh(W_h x_t + U_h (r_t .* h_{t-1}) + b_h)
/// h_t = (1 - z_t) .* c_t + z_t .* h_{t-1}
/// ```
///
/// The reset gate is applied before the hidden matmul. Returns the full
/// output sequence and the final hidden state.
pub fn gru_forward(x: &Tensor, w: &GruWeights, h0: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.rank() < 2 {
        return Err(Error::shape_mismatch("gru input must be a sequence"));
    }
    let t = x.shape()[0];
    let f = x.frame_numel();
    let units = w.units();
    if w.features() != f {
        return Err(Error::ShapeMismatch(format!(
            "gru weights expect {} features, input frames have {f}",
            w.features()
        )));
    }
    if h0.shape() != [units] {
        return Err(Error::ShapeMismatch(format!(
            "gru initial state {:?} does not match {units} units",
            h0.shape()
        )));
    }
    let xd = x.data();
    let mut h = h0.data().to_vec();
    let mut seq = Vec::with_capacity(t * units);
    let mut reset_h = vec![0.0f32; units];
    for ti in 0..t {
        let xt = &xd[ti * f..(ti + 1) * f];
        let z = gate(xt, &h, w.w_z, w.u_z, w.b_z, GateAct::Sigmoid);
        let r = gate(xt, &h, w.w_r, w.u_r, w.b_r, GateAct::Sigmoid);
        for u in 0..units {
            reset_h[u] = r[u] * h[u];
        }
        let cand = gate(xt, &reset_h, w.w_h, w.u_h, w.b_h, GateAct::Tanh);
        for u in 0..units {
            h[u] = (1.0 - z[u]) * cand[u] + z[u] * h[u];
        }
        seq.extend_from_slice(&h);
    }
    Ok((
        Tensor::from_vec(vec![t, units], seq)?,
        Tensor::from_vec(vec![units], h)?,
    ))
}

enum GateAct {
    Sigmoid,
    Tanh,
}

fn gate(x: &[f32], h: &[f32], w: &Tensor, u: &Tensor, b: &Tensor, act: GateAct) -> Vec<f32> {
    let units = b.shape()[0];
    let f = w.shape()[0];
    let wd = w.data();
    let ud = u.data();
    let mut out = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate().take(f) {
        for uu in 0..units {
            out[uu] += xi * wd[i * units + uu];
        }
    }
    for (j, &hj) in h.iter().enumerate() {
        for uu in 0..units {
            out[uu] += hj * ud[j * units + uu];
        }
    }
    for v in &mut out {
        *v = match act {
            GateAct::Sigmoid => sigmoid(*v),
            GateAct::Tanh => v.tanh(),
        };
    }
    out
}

/// Forward GRU and a backward GRU over the reversed sequence, outputs
/// concatenated per frame: `[T, 2*units]`. Depends on future frames, so it
/// is never streamable.
pub fn bidirectional_gru_forward(x: &Tensor, node: &Node) -> Result<Tensor> {
    let LayerKind::BidirectionalGru { units } = *node.kind.core_kind() else {
        unreachable!()
    };
    let fw = GruWeights::from_node(node, "fw_")?;
    let bw = GruWeights::from_node(node, "bw_")?;
    let h0 = Tensor::zeros(&[units])?;
    let (fw_seq, _) = gru_forward(x, &fw, &h0)?;

    let t = x.shape()[0];
    let f = x.frame_numel();
    let mut rev = Vec::with_capacity(t * f);
    for ti in (0..t).rev() {
        rev.extend_from_slice(&x.data()[ti * f..(ti + 1) * f]);
    }
    let rev = Tensor::from_vec(vec![t, f], rev)?;
    let (bw_seq_rev, _) = gru_forward(&rev, &bw, &h0)?;

    let mut out = Vec::with_capacity(t * 2 * units);
    for ti in 0..t {
        out.extend_from_slice(&fw_seq.data()[ti * units..(ti + 1) * units]);
        let bi = t - 1 - ti;
        out.extend_from_slice(&bw_seq_rev.data()[bi * units..(bi + 1) * units]);
    }
    Tensor::from_vec(vec![t, 2 * units], out)
}

pub struct MhaWeights<'a> {
    pub w_q: &'a Tensor,
    pub w_k: &'a Tensor,
    pub w_v: &'a Tensor,
    pub w_o: &'a Tensor,
}

impl<'a> MhaWeights<'a> {
    pub fn from_node(node: &'a Node) -> Result<MhaWeights<'a>> {
        Ok(MhaWeights {
            w_q: node.weight("w_q")?,
            w_k: node.weight("w_k")?,
            w_v: node.weight("w_v")?,
            w_o: node.weight("w_o")?,
        })
    }
}

/// Attention of one projected query over a `[T, D]` key/value sequence.
/// Per head: `softmax(q . K^T / sqrt(head_dim)) . V`; head outputs are
/// concatenated and passed through the output projection.
pub fn multihead_attention_forward(
    query: &Tensor,
    kv: &Tensor,
    heads: usize,
    w: &MhaWeights,
) -> Result<Tensor> {
    if query.rank() != 1 || kv.rank() != 2 {
        return Err(Error::shape_mismatch(
            "attention takes a query vector and a [T, D] sequence",
        ));
    }
    let d = w.w_q.shape()[1];
    if !d.is_multiple_of(heads) {
        return Err(Error::ShapeMismatch(format!(
            "projected dim {d} not divisible by {heads} heads"
        )));
    }
    let head_dim = d / heads;
    let t = kv.shape()[0];

    let q = matvec(query.data(), w.w_q)?;
    let keys = matmul_rows(kv, w.w_k)?;
    let values = matmul_rows(kv, w.w_v)?;

    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut context = vec![0.0f32; d];
    let mut scores = vec![0.0f32; t];
    for h in 0..heads {
        let base = h * head_dim;
        for ti in 0..t {
            let mut s = 0.0f32;
            for k in 0..head_dim {
                s += q[base + k] * keys[ti * d + base + k];
            }
            scores[ti] = s * scale;
        }
        softmax_in_place(&mut scores);
        for ti in 0..t {
            let a = scores[ti];
            for k in 0..head_dim {
                context[base + k] += a * values[ti * d + base + k];
            }
        }
    }
    let out = matvec(&context, w.w_o)?;
    Tensor::from_vec(vec![w.w_o.shape()[1]], out)
}

fn matvec(x: &[f32], w: &Tensor) -> Result<Vec<f32>> {
    let (f, u) = (w.shape()[0], w.shape()[1]);
    if x.len() != f {
        return Err(Error::ShapeMismatch(format!(
            "matvec: vector length {} vs weight rows {f}",
            x.len()
        )));
    }
    let wd = w.data();
    let mut out = vec![0.0f32; u];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..u {
            out[j] += xi * wd[i * u + j];
        }
    }
    Ok(out)
}

fn matmul_rows(x: &Tensor, w: &Tensor) -> Result<Vec<f32>> {
    let t = x.shape()[0];
    let u = w.shape()[1];
    let mut out = Vec::with_capacity(t * u);
    for ti in 0..t {
        let row = &x.data()[ti * x.shape()[1]..(ti + 1) * x.shape()[1]];
        out.extend(matvec(row, w)?);
    }
    Ok(out)
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax: subtracts the row max before exponentiating.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{glorot, WeightRng};

    fn conv2d_node(kernel_t: usize, kernel_f: usize, padding: Padding, kernel: Tensor) -> Node {
        let filters = *kernel.shape().last().unwrap();
        Node::new(
            "c",
            LayerKind::Conv2d {
                kernel_t,
                kernel_f,
                stride_t: 1,
                stride_f: 1,
                dilation_t: 1,
                filters,
                padding,
            },
            vec!["x".into()],
        )
        .with_weights(vec![
            ("kernel", kernel),
            ("bias", Tensor::zeros(&[filters]).unwrap()),
        ])
    }

    #[test]
    fn ones_conv_sums_the_window() {
        // 6x3x1 ones input, 3x3 ones kernel, valid: each output is a sum of
        // 9 ones.
        let x = Tensor::from_vec(vec![6, 3, 1], vec![1.0; 18]).unwrap();
        let node = conv2d_node(
            3,
            3,
            Padding::Valid,
            Tensor::from_vec(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap(),
        );
        let y = conv2d_forward(&x, &node).unwrap();
        assert_eq!(y.shape(), &[4, 1, 1]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::from_vec(vec![5, 2, 1], (0..10).map(|i| i as f32).collect()).unwrap();
        let node = conv2d_node(
            1,
            1,
            Padding::Valid,
            Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
        );
        let y = conv2d_forward(&x, &node).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dilated_causal_conv_matches_explicit_padding() {
        // Causal padding for a dilated kernel spans d*(k-1) frames; the
        // oracle pads that many zeros by hand and runs the valid path.
        let mut rng = WeightRng::new(21);
        let kernel = glorot(&mut rng, &[3, 2, 2]);
        let bias = glorot(&mut rng, &[2]);
        let x = crate::rng::uniform_tensor(&mut rng, &[7, 2], -1.0, 1.0);
        let node = |padding: Padding| {
            Node::new(
                "c",
                LayerKind::Conv1d {
                    kernel_t: 3,
                    stride_t: 1,
                    dilation_t: 2,
                    filters: 2,
                    padding,
                },
                vec!["x".into()],
            )
            .with_weights(vec![("kernel", kernel.clone()), ("bias", bias.clone())])
        };
        let causal = conv1d_forward(&x, &node(Padding::Causal)).unwrap();
        assert_eq!(causal.shape(), &[7, 2]);
        let padded = x.zero_left_pad_time(7 + 2 * 2).unwrap();
        let want = conv1d_forward(&padded, &node(Padding::Valid)).unwrap();
        assert!(causal.bits_eq(&want));
    }

    #[test]
    fn dense_without_bias() {
        let node = Node::new(
            "d",
            LayerKind::Dense {
                units: 2,
                use_bias: false,
            },
            vec!["x".into()],
        )
        .with_weights(vec![(
            "kernel",
            Tensor::from_vec(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap(),
        )]);
        let x = Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap();
        let y = dense_forward(&x, &node).unwrap();
        assert_eq!(y.data(), &[2.0, -3.0]);
    }

    #[test]
    fn causal_single_frame_sees_zero_history() {
        // T=1 causal conv with kernel_t=3 must equal a valid conv over
        // [0, 0, x].
        let mut rng = WeightRng::new(5);
        let kernel = glorot(&mut rng, &[3, 2, 1, 2]);
        let x = Tensor::from_vec(vec![1, 2, 1], vec![0.7, -0.3]).unwrap();
        let causal = conv2d_node(3, 2, Padding::Causal, kernel.clone());
        let y = conv2d_forward(&x, &causal).unwrap();

        let padded = x.zero_left_pad_time(3).unwrap();
        let valid = conv2d_node(3, 2, Padding::Valid, kernel);
        let y_ref = conv2d_forward(&padded, &valid).unwrap();
        assert!(y.bits_eq(&y_ref));
    }

    #[test]
    fn depthwise_ones_kernel_sums_each_channel() {
        let x = Tensor::from_vec(vec![5, 1], vec![1.0; 5]).unwrap();
        let node = Node::new(
            "dw",
            LayerKind::DepthwiseConv1d {
                kernel_t: 3,
                multiplier: 1,
                padding: Padding::Valid,
            },
            vec!["x".into()],
        )
        .with_weights(vec![
            (
                "kernel",
                Tensor::from_vec(vec![3, 1, 1], vec![1.0; 3]).unwrap(),
            ),
            ("bias", Tensor::zeros(&[1]).unwrap()),
        ]);
        let y = depthwise_conv1d_forward(&x, &node).unwrap();
        assert_eq!(y.shape(), &[3, 1]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn dense_identity() {
        let node = Node::new(
            "d",
            LayerKind::Dense {
                units: 2,
                use_bias: true,
            },
            vec!["x".into()],
        )
        .with_weights(vec![
            (
                "kernel",
                Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            ),
            ("bias", Tensor::zeros(&[2]).unwrap()),
        ]);
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let y = dense_forward(&x, &node).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = activation_forward(&x, ActivationKind::Relu).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_huge_logits() {
        let x =
            Tensor::from_vec(vec![2, 3], vec![1e4, 1e4 + 1.0, 1e4 - 2.0, -1e4, 0.0, 1e4]).unwrap();
        let y = activation_forward(&x, ActivationKind::Softmax).unwrap();
        for row in y.data().chunks(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn batchnorm_applies_scale_and_offset() {
        let node =
            Node::new("bn", LayerKind::BatchNormInference, vec!["x".into()]).with_weights(vec![
                ("scale", Tensor::from_vec(vec![2], vec![2.0, 0.5]).unwrap()),
                (
                    "offset",
                    Tensor::from_vec(vec![2], vec![1.0, -1.0]).unwrap(),
                ),
            ]);
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = batchnorm_forward(&x, &node).unwrap();
        assert_eq!(y.data(), &[3.0, 0.0, 7.0, 1.0]);
    }

    #[test]
    fn avgpool_means_the_window() {
        let x = Tensor::from_vec(vec![2, 2, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let node = Node::new(
            "p",
            LayerKind::AvgPool2d {
                pool_t: 2,
                pool_f: 2,
                stride_t: 1,
                stride_f: 1,
            },
            vec!["x".into()],
        );
        let y = avgpool_forward(&x, &node).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn concat_feature_axis() {
        let a = Tensor::from_vec(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = concat_forward(&[&a, &b], 1).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn center_select_picks_middle_frame() {
        let x = Tensor::from_vec(vec![5, 2], (0..10).map(|i| i as f32).collect()).unwrap();
        let y = center_select_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0]); // frame 2 = floor(5/2)
        let x4 = Tensor::from_vec(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(center_select_forward(&x4).unwrap().data(), &[2.0]);
    }

    fn zero_gru(f: usize, units: usize) -> Node {
        let zeros = |shape: &[usize]| Tensor::zeros(shape).unwrap();
        Node::new(
            "g",
            LayerKind::Gru {
                units,
                return_sequences: true,
            },
            vec!["x".into()],
        )
        .with_weights(vec![
            ("w_z", zeros(&[f, units])),
            ("w_r", zeros(&[f, units])),
            ("w_h", zeros(&[f, units])),
            ("u_z", zeros(&[units, units])),
            ("u_r", zeros(&[units, units])),
            ("u_h", zeros(&[units, units])),
            ("b_z", zeros(&[units])),
            ("b_r", zeros(&[units])),
            ("b_h", zeros(&[units])),
        ])
    }

    #[test]
    fn zero_weight_gru_halves_the_state() {
        // With all-zero weights: z = sigmoid(0) = 0.5 and the candidate is
        // 0, so h_t = 0.5 * h_{t-1}.
        let node = zero_gru(2, 3);
        let w = GruWeights::from_node(&node, "").unwrap();
        let x = Tensor::from_vec(vec![4, 2], vec![1.0; 8]).unwrap();

        let h0 = Tensor::zeros(&[3]).unwrap();
        let (seq, h_last) = gru_forward(&x, &w, &h0).unwrap();
        assert!(seq.data().iter().all(|&v| v == 0.0));
        assert!(h_last.data().iter().all(|&v| v == 0.0));

        let h0 = Tensor::from_vec(vec![3], vec![1.0; 3]).unwrap();
        let (seq, _) = gru_forward(&x, &w, &h0).unwrap();
        for t in 0..4 {
            let expect = 0.5f32.powi(t as i32 + 1);
            assert!(seq.data()[t * 3..(t + 1) * 3].iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn gru_single_frame_equals_one_cell_step() {
        let mut rng = WeightRng::new(11);
        let mut node = zero_gru(3, 4);
        for name in ["w_z", "w_r", "w_h"] {
            node.weights
                .insert(name.into(), glorot(&mut rng, &[3, 4]).into());
        }
        for name in ["u_z", "u_r", "u_h"] {
            node.weights
                .insert(name.into(), glorot(&mut rng, &[4, 4]).into());
        }
        let w = GruWeights::from_node(&node, "").unwrap();
        let x = Tensor::from_vec(vec![1, 3], vec![0.3, -0.7, 0.2]).unwrap();
        let h0 = Tensor::from_vec(vec![4], vec![0.1, 0.2, -0.1, 0.0]).unwrap();
        let (seq, h1) = gru_forward(&x, &w, &h0).unwrap();
        assert_eq!(seq.shape(), &[1, 4]);
        assert_eq!(seq.data(), h1.data());
    }

    #[test]
    fn attention_with_one_key_returns_projected_value() {
        // T=1: softmax over a single score is 1.0, so the output is the
        // value row pushed through the output projection.
        let d = 4;
        let eye = |n: usize| {
            let mut v = vec![0.0; n * n];
            for i in 0..n {
                v[i * n + i] = 1.0;
            }
            Tensor::from_vec(vec![n, n], v).unwrap()
        };
        let node = Node::new(
            "a",
            LayerKind::MultiHeadAttention {
                heads: 2,
                key_dim: 2,
            },
            vec!["q".into(), "kv".into()],
        )
        .with_weights(vec![
            ("w_q", eye(d)),
            ("w_k", eye(d)),
            ("w_v", eye(d)),
            ("w_o", eye(d)),
        ]);
        let w = MhaWeights::from_node(&node).unwrap();
        let q = Tensor::from_vec(vec![4], vec![5.0, -2.0, 0.1, 3.0]).unwrap();
        let kv = Tensor::from_vec(vec![1, 4], vec![0.5, 1.5, -0.5, 2.0]).unwrap();
        let y = multihead_attention_forward(&q, &kv, 2, &w).unwrap();
        assert_eq!(y.data(), kv.data());
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        // A zero key projection makes every key identical, so all scores
        // tie and the softmax is uniform (1/T). With identity value and
        // output projections the result is the mean of the value rows.
        let d = 2;
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let node = Node::new(
            "a",
            LayerKind::MultiHeadAttention {
                heads: 1,
                key_dim: 2,
            },
            vec!["q".into(), "kv".into()],
        )
        .with_weights(vec![
            ("w_q", eye.clone()),
            ("w_k", Tensor::zeros(&[2, 2]).unwrap()),
            ("w_v", eye.clone()),
            ("w_o", eye),
        ]);
        let w = MhaWeights::from_node(&node).unwrap();
        let q = Tensor::from_vec(vec![d], vec![1.0, 2.0]).unwrap();
        let kv = Tensor::from_vec(vec![3, d], vec![3.0, 0.0, 6.0, 3.0, 0.0, -3.0]).unwrap();
        let y = multihead_attention_forward(&q, &kv, 1, &w).unwrap();
        for (a, b) in y.data().iter().zip([3.0, 0.0]) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn add_folds_all_inputs() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![10.0, 20.0]).unwrap();
        let c = Tensor::from_vec(vec![2], vec![100.0, 200.0]).unwrap();
        let y = add_forward(&[&a, &b, &c]).unwrap();
        assert_eq!(y.data(), &[111.0, 222.0]);
    }
}
