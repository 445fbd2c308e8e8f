//! On-disk model and tensor formats.
//!
//! Model files (`.skgf`) are a JSON manifest plus one raw weight blob:
//!
//! ```text
//! magic   4 bytes   "SKGF"
//! version u32 LE    currently 1
//! mlen    u64 LE    manifest length in bytes
//! manifest          JSON: mode, i/o ids, nodes (topological order) with
//!                   kind/inputs/out_shape and weight table entries
//!                   {name, shape, offset, len} in f32 elements, states
//! blob              little-endian raw f32, offsets/lengths as declared
//! ```
//!
//! Tensor files (`.sktf`) carry one tensor:
//!
//! ```text
//! magic   4 bytes   "SKTF"
//! version u32 LE    currently 1
//! rank    u32 LE
//! dims    u64 LE * rank
//! data    f32 LE * product(dims)
//! ```
//!
//! Serialization is deterministic: the same graph always produces the same
//! bytes. Loading an identical graph back is guaranteed bit-exact in both
//! structure and weights.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, LayerKind, Mode, Node, Shape};
use crate::stream::StateSpec;
use crate::tensor::Tensor;

const GRAPH_MAGIC: &[u8; 4] = b"SKGF";
const TENSOR_MAGIC: &[u8; 4] = b"SKTF";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    mode: Mode,
    input_ids: Vec<String>,
    output_ids: Vec<String>,
    nodes: Vec<NodeEntry>,
    states: Vec<StateSpec>,
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    id: String,
    kind: LayerKind,
    inputs: Vec<String>,
    out_shape: Option<Shape>,
    weights: Vec<WeightEntry>,
}

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the weight blob, in f32 elements.
    offset: u64,
    /// Element count; always the product of `shape`.
    len: u64,
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        reason: reason.into(),
    }
}

/// Serializes a shape-inferred graph. Nodes are written in topological
/// order and weights in name order, so equal graphs produce equal bytes.
pub fn save_graph(g: &Graph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, graph_to_bytes(g)?)?;
    Ok(())
}

pub fn graph_to_bytes(g: &Graph) -> Result<Vec<u8>> {
    if !g.is_shape_inferred() {
        return Err(format_err(
            "graph must be shape-inferred before serialization",
        ));
    }
    let order = g.topo_order()?;
    let mut blob: Vec<f32> = Vec::new();
    let mut nodes = Vec::with_capacity(order.len());
    for id in &order {
        let node = &g.nodes[id];
        let mut weights = Vec::with_capacity(node.weights.len());
        for (name, tensor) in &node.weights {
            weights.push(WeightEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset: blob.len() as u64,
                len: tensor.numel() as u64,
            });
            blob.extend_from_slice(tensor.data());
        }
        nodes.push(NodeEntry {
            id: node.id.clone(),
            kind: node.kind.clone(),
            inputs: node.inputs.clone(),
            out_shape: node.out_shape.clone(),
            weights,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        mode: g.mode,
        input_ids: g.input_ids.clone(),
        output_ids: g.output_ids.clone(),
        nodes,
        states: g.states.clone(),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| format_err(format!("manifest encode: {e}")))?;

    let mut out = Vec::with_capacity(16 + manifest_bytes.len() + blob.len() * 4);
    out.extend_from_slice(GRAPH_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for v in &blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    graph_from_bytes(&fs::read(path)?)
}

pub fn graph_from_bytes(bytes: &[u8]) -> Result<Graph> {
    if bytes.len() < 16 {
        return Err(format_err("file too short for header"));
    }
    if &bytes[0..4] != GRAPH_MAGIC {
        return Err(format_err("bad magic, not a model file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format_err(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(format_err("manifest extends past end of file"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| format_err(format!("manifest decode: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(format_err("manifest/header version mismatch"));
    }

    let blob_bytes = &bytes[16 + mlen..];
    if !blob_bytes.len().is_multiple_of(4) {
        return Err(format_err("weight blob is not a whole number of f32s"));
    }
    let blob: Vec<f32> = blob_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let declared: u64 = manifest
        .nodes
        .iter()
        .flat_map(|n| &n.weights)
        .map(|w| w.len)
        .sum();
    if declared != blob.len() as u64 {
        return Err(format_err(format!(
            "manifest declares {declared} weight floats over a {}-float blob",
            blob.len()
        )));
    }

    let mut nodes = Vec::with_capacity(manifest.nodes.len());
    for entry in manifest.nodes {
        let mut weights = BTreeMap::new();
        for w in entry.weights {
            let numel: usize = w.shape.iter().product();
            if numel as u64 != w.len {
                return Err(format_err(format!(
                    "weight `{}` shape {:?} disagrees with length {}",
                    w.name, w.shape, w.len
                )));
            }
            let start = w.offset as usize;
            let end = start
                .checked_add(numel)
                .ok_or_else(|| format_err("weight range overflow"))?;
            if end > blob.len() {
                return Err(format_err(format!(
                    "weight `{}` extends past the blob",
                    w.name
                )));
            }
            let tensor = Tensor::from_vec(w.shape, blob[start..end].to_vec())
                .map_err(|e| format_err(format!("weight `{}`: {e}", w.name)))?;
            if weights.insert(w.name.clone(), Arc::new(tensor)).is_some() {
                return Err(format_err(format!("duplicate weight `{}`", w.name)));
            }
        }
        nodes.push(Node {
            id: entry.id,
            kind: entry.kind,
            inputs: entry.inputs,
            weights,
            out_shape: entry.out_shape,
        });
    }
    Graph::assemble(
        nodes,
        manifest.input_ids,
        manifest.output_ids,
        manifest.mode,
        manifest.states,
    )
    .map_err(|e| format_err(format!("invalid graph: {e}")))
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(12 + t.rank() * 8 + t.numel() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(format_err("file too short for tensor header"));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(format_err("bad magic, not a tensor file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported tensor version {version}")));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + rank * 8;
    if bytes.len() < header {
        return Err(format_err("dims extend past end of file"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[12 + i * 8..20 + i * 8].try_into().unwrap()) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != numel * 4 {
        return Err(format_err(format!(
            "tensor data holds {} bytes, shape {dims:?} needs {}",
            payload.len(),
            numel * 4
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(dims, data).map_err(|e| format_err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Padding;
    use crate::testutil::{dense_weights, glorot, WeightRng};

    fn small_model() -> Graph {
        let mut rng = WeightRng::new(5);
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
        Graph::new(nodes, vec!["input".into()], vec!["dense".into()])
            .unwrap()
            .infer_shapes(6)
            .unwrap()
    }

    #[test]
    fn round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.skgf");
        let g = small_model();
        save_graph(&g, &path).unwrap();
        let back = load_graph(&path).unwrap();
        assert_eq!(g, back);
        assert_eq!(g.topo_order().unwrap(), back.topo_order().unwrap());
        // Weights bit-equal.
        for (id, node) in &g.nodes {
            for (name, w) in &node.weights {
                assert!(w.bits_eq(&back.nodes[id].weights[name]));
            }
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let g = small_model();
        assert_eq!(graph_to_bytes(&g).unwrap(), graph_to_bytes(&g).unwrap());
    }

    #[test]
    fn uninferred_graph_is_rejected() {
        let mut g = small_model();
        for node in g.nodes.values_mut() {
            node.out_shape = None;
        }
        assert!(matches!(graph_to_bytes(&g), Err(Error::Format { .. })));
    }

    #[test]
    fn blob_length_mismatch_is_rejected() {
        let g = small_model();
        let mut bytes = graph_to_bytes(&g).unwrap();
        bytes.truncate(bytes.len() - 4); // drop one declared float
        match graph_from_bytes(&bytes) {
            Err(Error::Format { reason }) => assert!(reason.contains("blob")),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let g = small_model();
        let bytes = graph_to_bytes(&g).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(graph_from_bytes(&bad), Err(Error::Format { .. })));

        let mut newer = bytes;
        newer[4] = 9;
        match graph_from_bytes(&newer) {
            Err(Error::Format { reason }) => assert!(reason.contains("version")),
            other => panic!("expected Format error, got {other:?}"),
        }
    }

    #[test]
    fn tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sktf");
        let mut rng = WeightRng::new(3);
        let t = crate::rng::uniform_tensor(&mut rng, &[7, 3], -2.0, 2.0);
        save_tensor(&t, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        assert!(t.bits_eq(&back));
    }
}
