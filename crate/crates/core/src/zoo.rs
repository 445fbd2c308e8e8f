//! Builders for the keyword-spotting model zoo.
//!
//! Each builder constructs a non-streaming graph with seeded random weights
//! so the streaming conversion, equivalence suite and benchmarks can run on
//! realistic topologies without training. Layer counts and widths are
//! scaled-down defaults chosen to keep tests fast; the contract is
//! topological fidelity (layer kinds, ordering, streaming behavior), not
//! parameter counts.
//!
//! Weight init: kernels are Glorot-uniform (`[-s, s]`,
//! `s = sqrt(6/(fan_in+fan_out))`) drawn from a SplitMix64 stream in
//! construction order, batch-norm scales uniform in `[0.75, 1.25]`, and all
//! additive parameters (biases, batch-norm offsets) are zero. Zero additive
//! parameters keep a silent input silent through the network, which is what
//! lets zero-initialized ring buffers reproduce the zero-padded history
//! exactly from the very first frame.

use crate::error::{Error, Result};
use crate::graph::{ActivationKind, Graph, LayerKind, Node, Padding};
use crate::rng::{glorot_uniform, uniform_tensor, SplitMix64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelId {
    Dnn,
    Cnn,
    CnnStrided,
    Crnn,
    GruNet,
    Dscnn,
    DscnnStrided,
    SvdfNet,
    TcResnet,
    MhattRnn,
}

impl ModelId {
    pub const ALL: [ModelId; 10] = [
        ModelId::Dnn,
        ModelId::Cnn,
        ModelId::CnnStrided,
        ModelId::Crnn,
        ModelId::GruNet,
        ModelId::Dscnn,
        ModelId::DscnnStrided,
        ModelId::SvdfNet,
        ModelId::TcResnet,
        ModelId::MhattRnn,
    ];

    /// Models that convert to streaming mode (no time striding/pooling, no
    /// dependence on future frames).
    pub const STREAMABLE: [ModelId; 7] = [
        ModelId::Dnn,
        ModelId::Cnn,
        ModelId::Crnn,
        ModelId::GruNet,
        ModelId::Dscnn,
        ModelId::SvdfNet,
        ModelId::TcResnet,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelId::Dnn => "dnn",
            ModelId::Cnn => "cnn",
            ModelId::CnnStrided => "cnn_strided",
            ModelId::Crnn => "crnn",
            ModelId::GruNet => "gru_net",
            ModelId::Dscnn => "dscnn",
            ModelId::DscnnStrided => "dscnn_strided",
            ModelId::SvdfNet => "svdf_net",
            ModelId::TcResnet => "tc_resnet",
            ModelId::MhattRnn => "mhatt_rnn",
        }
    }

    pub fn parse(name: &str) -> Option<ModelId> {
        ModelId::ALL.iter().copied().find(|m| m.name() == name)
    }
}

#[derive(Debug, Clone)]
pub struct ZooSpec {
    pub model: ModelId,
    /// Training-time sequence length; also the window whole-sequence layers
    /// buffer when streamed.
    pub input_frames: usize,
    pub input_features: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl ZooSpec {
    pub fn new(model: ModelId) -> ZooSpec {
        ZooSpec {
            model,
            input_frames: 49,
            input_features: 20,
            num_classes: 12,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> ZooSpec {
        self.seed = seed;
        self
    }
}

/// Total number of scalar weights in a graph.
pub fn count_params(g: &Graph) -> usize {
    g.nodes
        .values()
        .flat_map(|n| n.weights.values())
        .map(|w| w.numel())
        .sum()
}

/// Builds the requested architecture as a shape-inferable non-streaming
/// graph. Deterministic: the same spec (including seed) produces
/// bit-identical weights.
pub fn build(spec: &ZooSpec) -> Result<Graph> {
    if spec.num_classes < 2 {
        return Err(Error::InvalidSpec(format!(
            "need at least 2 classes, got {}",
            spec.num_classes
        )));
    }
    if spec.input_frames == 0 || spec.input_features == 0 {
        return Err(Error::InvalidSpec("empty input geometry".into()));
    }
    let (min_frames, min_features) = match spec.model {
        ModelId::Dnn | ModelId::GruNet => (1, 1),
        ModelId::Cnn | ModelId::CnnStrided => (5, 8),
        ModelId::Crnn => (5, 5),
        ModelId::Dscnn | ModelId::DscnnStrided => (7, 1),
        ModelId::SvdfNet => (29, 1),
        ModelId::TcResnet => (35, 1),
        ModelId::MhattRnn => (5, 1),
    };
    if spec.input_frames < min_frames {
        return Err(Error::InvalidSpec(format!(
            "{} needs an input of at least {min_frames} frames (receptive field), got {}",
            spec.model.name(),
            spec.input_frames
        )));
    }
    if spec.input_features < min_features {
        return Err(Error::InvalidSpec(format!(
            "{} needs at least {min_features} input features, got {}",
            spec.model.name(),
            spec.input_features
        )));
    }

    let mut b = Builder::new(spec.seed);
    match spec.model {
        ModelId::Dnn => build_dnn(&mut b, spec),
        ModelId::Cnn => build_cnn(&mut b, spec, 1),
        ModelId::CnnStrided => build_cnn(&mut b, spec, 2),
        ModelId::Crnn => build_crnn(&mut b, spec),
        ModelId::GruNet => build_gru_net(&mut b, spec),
        ModelId::Dscnn => build_dscnn(&mut b, spec, 1),
        ModelId::DscnnStrided => build_dscnn(&mut b, spec, 2),
        ModelId::SvdfNet => build_svdf(&mut b, spec),
        ModelId::TcResnet => build_tc_resnet(&mut b, spec),
        ModelId::MhattRnn => build_mhatt_rnn(&mut b, spec),
    }
}

struct Builder {
    rng: SplitMix64,
    nodes: Vec<Node>,
}

impl Builder {
    fn new(seed: u64) -> Builder {
        Builder {
            rng: SplitMix64::new(seed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, node: Node) -> String {
        let id = node.id.clone();
        self.nodes.push(node);
        id
    }

    fn input(&mut self, frame_shape: Vec<usize>) -> String {
        self.push(Node::new("input", LayerKind::Input { frame_shape }, vec![]))
    }

    fn conv2d(
        &mut self,
        id: &str,
        from: &str,
        kernel: (usize, usize),
        stride: (usize, usize),
        in_channels: usize,
        filters: usize,
    ) -> String {
        let kernel_w = glorot_uniform(&mut self.rng, &[kernel.0, kernel.1, in_channels, filters]);
        self.push(
            Node::new(
                id,
                LayerKind::Conv2d {
                    kernel_t: kernel.0,
                    kernel_f: kernel.1,
                    stride_t: stride.0,
                    stride_f: stride.1,
                    dilation_t: 1,
                    filters,
                    padding: Padding::Causal,
                },
                vec![from.into()],
            )
            .with_weights(vec![
                ("kernel", kernel_w),
                ("bias", Tensor::zeros(&[filters]).unwrap()),
            ]),
        )
    }

    fn conv1d(
        &mut self,
        id: &str,
        from: &str,
        kernel_t: usize,
        stride_t: usize,
        in_channels: usize,
        filters: usize,
    ) -> String {
        let kernel = glorot_uniform(&mut self.rng, &[kernel_t, in_channels, filters]);
        self.push(
            Node::new(
                id,
                LayerKind::Conv1d {
                    kernel_t,
                    stride_t,
                    dilation_t: 1,
                    filters,
                    padding: Padding::Causal,
                },
                vec![from.into()],
            )
            .with_weights(vec![
                ("kernel", kernel),
                ("bias", Tensor::zeros(&[filters]).unwrap()),
            ]),
        )
    }

    fn depthwise(&mut self, id: &str, from: &str, kernel_t: usize, channels: usize) -> String {
        let kernel = glorot_uniform(&mut self.rng, &[kernel_t, channels, 1]);
        self.push(
            Node::new(
                id,
                LayerKind::DepthwiseConv1d {
                    kernel_t,
                    multiplier: 1,
                    padding: Padding::Causal,
                },
                vec![from.into()],
            )
            .with_weights(vec![
                ("kernel", kernel),
                ("bias", Tensor::zeros(&[channels]).unwrap()),
            ]),
        )
    }

    fn dense(&mut self, id: &str, from: &str, features: usize, units: usize) -> String {
        let kernel = glorot_uniform(&mut self.rng, &[features, units]);
        self.push(
            Node::new(
                id,
                LayerKind::Dense {
                    units,
                    use_bias: true,
                },
                vec![from.into()],
            )
            .with_weights(vec![
                ("kernel", kernel),
                ("bias", Tensor::zeros(&[units]).unwrap()),
            ]),
        )
    }

    fn batch_norm(&mut self, id: &str, from: &str, channels: usize) -> String {
        let scale = uniform_tensor(&mut self.rng, &[channels], 0.75, 1.25);
        self.push(
            Node::new(id, LayerKind::BatchNormInference, vec![from.into()]).with_weights(vec![
                ("scale", scale),
                ("offset", Tensor::zeros(&[channels]).unwrap()),
            ]),
        )
    }

    fn activation(&mut self, id: &str, from: &str, kind: ActivationKind) -> String {
        self.push(Node::new(
            id,
            LayerKind::Activation { kind },
            vec![from.into()],
        ))
    }

    fn relu(&mut self, id: &str, from: &str) -> String {
        self.activation(id, from, ActivationKind::Relu)
    }

    fn gru_weights(
        &mut self,
        features: usize,
        units: usize,
        prefix: &str,
    ) -> Vec<(String, Tensor)> {
        let mut w = Vec::new();
        for gate in ["z", "r", "h"] {
            w.push((
                format!("{prefix}w_{gate}"),
                glorot_uniform(&mut self.rng, &[features, units]),
            ));
        }
        for gate in ["z", "r", "h"] {
            w.push((
                format!("{prefix}u_{gate}"),
                glorot_uniform(&mut self.rng, &[units, units]),
            ));
        }
        for gate in ["z", "r", "h"] {
            w.push((
                format!("{prefix}b_{gate}"),
                Tensor::zeros(&[units]).unwrap(),
            ));
        }
        w
    }

    fn gru(
        &mut self,
        id: &str,
        from: &str,
        features: usize,
        units: usize,
        return_sequences: bool,
    ) -> String {
        let weights = self.gru_weights(features, units, "");
        let mut node = Node::new(
            id,
            LayerKind::Gru {
                units,
                return_sequences,
            },
            vec![from.into()],
        );
        for (name, t) in weights {
            node.weights.insert(name, t.into());
        }
        self.push(node)
    }

    fn bigru(&mut self, id: &str, from: &str, features: usize, units: usize) -> String {
        let mut node = Node::new(id, LayerKind::BidirectionalGru { units }, vec![from.into()]);
        for prefix in ["fw_", "bw_"] {
            for (name, t) in self.gru_weights(features, units, prefix) {
                node.weights.insert(name, t.into());
            }
        }
        self.push(node)
    }

    fn global_pool(&mut self, id: &str, from: &str) -> String {
        self.push(Node::new(
            id,
            LayerKind::GlobalAvgPoolTime,
            vec![from.into()],
        ))
    }

    fn flatten(&mut self, id: &str, from: &str) -> String {
        self.push(Node::new(id, LayerKind::Flatten, vec![from.into()]))
    }

    fn head(&mut self, from: &str, features: usize, classes: usize) -> String {
        let logits = self.dense("logits", from, features, classes);
        self.activation("scores", &logits, ActivationKind::Softmax)
    }

    /// Wraps the most recently added node in an explicit `Stream` marker.
    fn mark_streamed(&mut self) {
        let node = self.nodes.last_mut().expect("a node to mark");
        let kind = std::mem::replace(&mut node.kind, LayerKind::Flatten);
        node.kind = LayerKind::Stream {
            inner: Box::new(kind),
        };
    }

    fn finish(&mut self, output: &str) -> Result<Graph> {
        let nodes = std::mem::take(&mut self.nodes);
        Graph::new(nodes, vec!["input".into()], vec![output.into()])
    }
}

/// Fully-connected layers per frame, pooled over time, then more
/// fully-connected layers.
fn build_dnn(b: &mut Builder, spec: &ZooSpec) -> Result<Graph> {
    let input = b.input(vec![spec.input_features]);
    let d1 = b.dense("frame_fc1", &input, spec.input_features, 64);
    let r1 = b.relu("frame_relu1", &d1);
    let d2 = b.dense("frame_fc2", &r1, 64, 64);
    let r2 = b.relu("frame_relu2", &d2);
    let pool = b.global_pool("pool", &r2);
    let d3 = b.dense("fc3", &pool, 64, 64);
    let r3 = b.relu("relu3", &d3);
    let out = b.head(&r3, 64, spec.num_classes);
    b.finish(&out)
}

/// Two 2-D convolutions (24/36 filters) with feature-axis pooling between
/// them, flattened into fully-connected layers. `stride_t = 2` builds the
/// non-streamable strided variant.
fn build_cnn(b: &mut Builder, spec: &ZooSpec, stride_t: usize) -> Result<Graph> {
    let f = spec.input_features;
    let input = b.input(vec![f, 1]);
    let t1 = if stride_t == 1 {
        spec.input_frames
    } else {
        spec.input_frames.div_ceil(stride_t)
    };
    let c1 = b.conv2d("conv1", &input, (3, 3), (stride_t, 1), 1, 24);
    b.mark_streamed();
    let f1 = f - 2;
    let r1 = b.relu("relu1", &c1);
    let pool = b.push(Node::new(
        "feature_pool",
        LayerKind::AvgPool2d {
            pool_t: 1,
            pool_f: 2,
            stride_t: 1,
            stride_f: 2,
        },
        vec![r1],
    ));
    let f_pool = (f1 - 2) / 2 + 1;
    let c2 = b.conv2d("conv2", &pool, (3, 3), (1, 1), 24, 36);
    b.mark_streamed();
    let f2 = f_pool - 2;
    let r2 = b.relu("relu2", &c2);
    let flat = b.flatten("flatten", &r2);
    b.mark_streamed();
    let d = b.dense("fc1", &flat, t1 * f2 * 36, 32);
    let r = b.relu("relu3", &d);
    let out = b.head(&r, 32, spec.num_classes);
    b.finish(&out)
}

/// 2-D convolutions followed by a GRU and fully-connected layers.
fn build_crnn(b: &mut Builder, spec: &ZooSpec) -> Result<Graph> {
    let f = spec.input_features;
    let input = b.input(vec![f, 1]);
    let c1 = b.conv2d("conv1", &input, (3, 3), (1, 1), 1, 16);
    let r1 = b.relu("relu1", &c1);
    let c2 = b.conv2d("conv2", &r1, (3, 3), (1, 1), 16, 16);
    let r2 = b.relu("relu2", &c2);
    let gru = b.gru("gru", &r2, (f - 4) * 16, 32, false);
    let d = b.dense("fc1", &gru, 32, 32);
    let r = b.relu("relu3", &d);
    let out = b.head(&r, 32, spec.num_classes);
    b.finish(&out)
}

/// Two stacked GRUs: the first returns the sequence, the second its final
/// state.
fn build_gru_net(b: &mut Builder, spec: &ZooSpec) -> Result<Graph> {
    let input = b.input(vec![spec.input_features]);
    let g1 = b.gru("gru1", &input, spec.input_features, 32, true);
    let g2 = b.gru("gru2", &g1, 32, 32, false);
    let d = b.dense("fc1", &g2, 32, 32);
    let r = b.relu("relu1", &d);
    let out = b.head(&r, 32, spec.num_classes);
    b.finish(&out)
}

/// Depthwise-separable convolution stack with batch norm, pooled over time.
fn build_dscnn(b: &mut Builder, spec: &ZooSpec, stride_t: usize) -> Result<Graph> {
    let input = b.input(vec![spec.input_features]);
    let mut cur = b.conv1d("conv_in", &input, 3, stride_t, spec.input_features, 32);
    cur = b.batch_norm("bn_in", &cur, 32);
    cur = b.relu("relu_in", &cur);
    for i in 1..=2 {
        let dw = b.depthwise(&format!("dw{i}"), &cur, 3, 32);
        let bn1 = b.batch_norm(&format!("dw{i}_bn"), &dw, 32);
        let rl1 = b.relu(&format!("dw{i}_relu"), &bn1);
        let pw = b.conv1d(&format!("pw{i}"), &rl1, 1, 1, 32, 32);
        let bn2 = b.batch_norm(&format!("pw{i}_bn"), &pw, 32);
        cur = b.relu(&format!("pw{i}_relu"), &bn2);
    }
    let pool = b.global_pool("pool", &cur);
    let d = b.dense("fc1", &pool, 32, 32);
    let r = b.relu("relu_fc", &d);
    let out = b.head(&r, 32, spec.num_classes);
    b.finish(&out)
}

/// Low-rank time-feature blocks: a pointwise feature convolution feeding a
/// depthwise convolution over an 8-frame memory, then a bottleneck.
fn build_svdf(b: &mut Builder, spec: &ZooSpec) -> Result<Graph> {
    let input = b.input(vec![spec.input_features]);
    let mut cur = input;
    let mut in_ch = spec.input_features;
    for i in 1..=4 {
        let feat = b.conv1d(&format!("svdf{i}_feat"), &cur, 1, 1, in_ch, 32);
        let time = b.depthwise(&format!("svdf{i}_time"), &feat, 8, 32);
        let relu = b.relu(&format!("svdf{i}_relu"), &time);
        cur = b.dense(&format!("svdf{i}_bottleneck"), &relu, 32, 32);
        in_ch = 32;
    }
    let pool = b.global_pool("pool", &cur);
    let out = b.head(&pool, 32, spec.num_classes);
    b.finish(&out)
}

/// Residual blocks of 1-D convolutions over time.
fn build_tc_resnet(b: &mut Builder, spec: &ZooSpec) -> Result<Graph> {
    let input = b.input(vec![spec.input_features]);
    let stem = b.conv1d("stem", &input, 3, 1, spec.input_features, 24);
    let stem_bn = b.batch_norm("stem_bn", &stem, 24);
    let mut cur = b.relu("stem_relu", &stem_bn);
    let mut in_ch = 24;
    for (i, out_ch) in [(1usize, 32usize), (2, 32)] {
        let c1 = b.conv1d(&format!("res{i}_conv1"), &cur, 9, 1, in_ch, out_ch);
        let bn1 = b.batch_norm(&format!("res{i}_bn1"), &c1, out_ch);
        let r1 = b.relu(&format!("res{i}_relu1"), &bn1);
        let c2 = b.conv1d(&format!("res{i}_conv2"), &r1, 9, 1, out_ch, out_ch);
        let bn2 = b.batch_norm(&format!("res{i}_bn2"), &c2, out_ch);
        let skip = if in_ch == out_ch {
            cur.clone()
        } else {
            b.conv1d(&format!("res{i}_skip"), &cur, 1, 1, in_ch, out_ch)
        };
        let sum = b.push(Node::new(
            format!("res{i}_add"),
            LayerKind::Add,
            vec![bn2, skip],
        ));
        cur = b.relu(&format!("res{i}_out"), &sum);
        in_ch = out_ch;
    }
    let pool = b.global_pool("pool", &cur);
    let out = b.head(&pool, 32, spec.num_classes);
    b.finish(&out)
}

/// Convolutions, a bidirectional GRU, and multi-head attention (4 heads)
/// with the center frame of the recurrent output as query. Reads future
/// frames, so it never converts to streaming mode.
fn build_mhatt_rnn(b: &mut Builder, spec: &ZooSpec) -> Result<Graph> {
    let f = spec.input_features;
    let input = b.input(vec![f, 1]);
    let c1 = b.conv2d("conv1", &input, (3, 1), (1, 1), 1, 8);
    let r1 = b.relu("relu1", &c1);
    let c2 = b.conv2d("conv2", &r1, (3, 1), (1, 1), 8, 8);
    let r2 = b.relu("relu2", &c2);
    let rnn = b.bigru("bigru", &r2, f * 8, 32);
    let center = b.push(Node::new(
        "center",
        LayerKind::CenterSelect,
        vec![rnn.clone()],
    ));
    let query = b.dense("query", &center, 64, 64);
    let heads = 4;
    let key_dim = 16;
    let d = heads * key_dim;
    let mut mha = Node::new(
        "attention",
        LayerKind::MultiHeadAttention { heads, key_dim },
        vec![query, rnn],
    );
    for name in ["w_q", "w_k", "w_v", "w_o"] {
        let rows = if name == "w_o" { d } else { 64 };
        mha.weights
            .insert(name.into(), glorot_uniform(&mut b.rng, &[rows, d]).into());
    }
    let mha = b.push(mha);
    let fc = b.dense("fc1", &mha, d, 32);
    let r = b.relu("relu3", &fc);
    let out = b.head(&r, 32, spec.num_classes);
    b.finish(&out)
}
