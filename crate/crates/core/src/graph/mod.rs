//! Branch-free inference graphs.
//!
//! A graph is a topologically ordered list of nodes drawn from a small,
//! accelerator-legal op set. Runtime parameter selection is expressed with
//! the ReLU multiplexer `ReLU(r)*x + ReLU(-r)*y` driven by `RandomInput`
//! nodes that take the values `+1` or `-1`, so every node is evaluated on
//! every inference regardless of the selected configuration.

mod compile;
mod exec;
mod validate;

use std::collections::HashMap;
use std::fmt::{self, Write as _};

pub use compile::{bits_for_selection, bits_per_group, compile_bundle, compile_model, selection_for_bits};
pub use exec::Execution;
pub use validate::{validate_graph, Violation};

use crate::error::{Error, Result};
use crate::mlp::Architecture;
use crate::tensor::{format_shape, Tensor};
use crate::training::SelectionMode;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Input,
    /// Scalar selection bit supplied at run time, `+1` or `-1`.
    RandomInput,
    /// `W [out, in] x x [in] -> [out]`.
    MatMul,
    Add,
    Mul,
    Neg,
    Relu,
    Softmax,
    /// Anything outside the supported set. Only ever produced by
    /// [`OpKind::from_name`] or hand-built graphs; rejected by validation
    /// and execution.
    Other(String),
}

impl OpKind {
    pub fn name(&self) -> &str {
        match self {
            OpKind::Constant => "Constant",
            OpKind::Input => "Input",
            OpKind::RandomInput => "RandomInput",
            OpKind::MatMul => "MatMul",
            OpKind::Add => "Add",
            OpKind::Mul => "Mul",
            OpKind::Neg => "Neg",
            OpKind::Relu => "ReLU",
            OpKind::Softmax => "Softmax",
            OpKind::Other(name) => name,
        }
    }

    pub fn from_name(name: &str) -> OpKind {
        match name {
            "Constant" => OpKind::Constant,
            "Input" => OpKind::Input,
            "RandomInput" => OpKind::RandomInput,
            "MatMul" => OpKind::MatMul,
            "Add" => OpKind::Add,
            "Mul" => OpKind::Mul,
            "Neg" => OpKind::Neg,
            "ReLU" => OpKind::Relu,
            "Softmax" => OpKind::Softmax,
            other => OpKind::Other(other.to_string()),
        }
    }

    /// Nodes whose value is supplied rather than computed.
    pub fn is_source(&self) -> bool {
        matches!(self, OpKind::Constant | OpKind::Input | OpKind::RandomInput)
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Constant | OpKind::Input | OpKind::RandomInput => Some(0),
            OpKind::Neg | OpKind::Relu | OpKind::Softmax => Some(1),
            OpKind::MatMul | OpKind::Add | OpKind::Mul => Some(2),
            OpKind::Other(_) => None,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    /// Value of a `Constant` node.
    pub payload: Option<Tensor>,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphMeta {
    pub arch: Option<Architecture>,
    pub m: usize,
    pub mode: SelectionMode,
    pub selection_bit_count: usize,
    /// Number of two-way multiplexers in the graph.
    pub mux_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchFreeGraph {
    nodes: Vec<Node>,
    image_input: NodeId,
    random_inputs: Vec<NodeId>,
    output: NodeId,
    meta: GraphMeta,
}

impl BranchFreeGraph {
    /// Assembles a graph without checking it; see [`validate_graph`].
    pub fn from_parts(
        nodes: Vec<Node>,
        image_input: NodeId,
        random_inputs: Vec<NodeId>,
        output: NodeId,
        meta: GraphMeta,
    ) -> Self {
        Self { nodes, image_input, random_inputs, output, meta }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn image_input(&self) -> NodeId {
        self.image_input
    }

    pub fn random_inputs(&self) -> &[NodeId] {
        &self.random_inputs
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn meta(&self) -> &GraphMeta {
        &self.meta
    }

    pub fn selection_bit_count(&self) -> usize {
        self.meta.selection_bit_count
    }

    /// Pre-softmax node when the output is a softmax.
    pub fn logits(&self) -> NodeId {
        let out = &self.nodes[self.output];
        match out.kind {
            OpKind::Softmax => out.inputs[0],
            _ => self.output,
        }
    }

    pub fn count_kind(&self, kind: &OpKind) -> usize {
        self.nodes.iter().filter(|n| &n.kind == kind).count()
    }

    /// One line per node: `id kind shape inputs`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for n in &self.nodes {
            let inputs: Vec<String> = n.inputs.iter().map(|i| i.to_string()).collect();
            writeln!(s, "{} {} {} [{}]", n.id, n.kind, format_shape(&n.shape), inputs.join(",")).unwrap();
        }
        s
    }
}

/// Output shape of `kind` applied to inputs of the given shapes.
pub(crate) fn infer_shape(kind: &OpKind, inputs: &[&[usize]]) -> std::result::Result<Vec<usize>, String> {
    if let Some(arity) = kind.arity() {
        if inputs.len() != arity {
            return Err(format!("{kind} takes {arity} inputs, got {}", inputs.len()));
        }
    }
    match kind {
        OpKind::MatMul => match (inputs[0], inputs[1]) {
            ([o, i], [k]) if i == k => Ok(vec![*o]),
            (a, b) => Err(format!("MatMul of {} and {}", format_shape(a), format_shape(b))),
        },
        OpKind::Add | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a == b || b.is_empty() {
                Ok(a.to_vec())
            } else if a.is_empty() {
                Ok(b.to_vec())
            } else {
                Err(format!("{kind} of {} and {}", format_shape(a), format_shape(b)))
            }
        }
        OpKind::Neg | OpKind::Relu => Ok(inputs[0].to_vec()),
        OpKind::Softmax => match inputs[0] {
            [n] if *n > 0 => Ok(vec![*n]),
            s => Err(format!("Softmax of {}", format_shape(s))),
        },
        OpKind::RandomInput => Ok(Vec::new()),
        OpKind::Constant | OpKind::Input => Err(format!("{kind} shape is declared, not inferred")),
        OpKind::Other(name) => Err(format!("unsupported op {name}")),
    }
}

/// Incremental graph construction with shape checking.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    // per selection bit: (ReLU(r), ReLU(-r))
    selectors: HashMap<NodeId, (NodeId, NodeId)>,
    mux_count: usize,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mux_count(&self) -> usize {
        self.mux_count
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, payload: Option<Tensor>, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { id, kind, inputs, payload, shape });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(OpKind::Constant, Vec::new(), Some(value), shape)
    }

    pub fn input(&mut self, shape: Vec<usize>) -> NodeId {
        self.push(OpKind::Input, Vec::new(), None, shape)
    }

    pub fn random_input(&mut self) -> NodeId {
        self.push(OpKind::RandomInput, Vec::new(), None, Vec::new())
    }

    pub fn op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Graph(format!("input {bad} does not exist yet")));
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.nodes[i].shape.as_slice()).collect();
        let shape = infer_shape(&kind, &shapes).map_err(Error::Shape)?;
        Ok(self.push(kind, inputs.to_vec(), None, shape))
    }

    pub fn matmul(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        self.op(OpKind::MatMul, &[w, x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(OpKind::Mul, &[a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(OpKind::Neg, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(OpKind::Relu, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(OpKind::Softmax, &[a])
    }

    /// `ReLU(r)*x + ReLU(-r)*y`: `x` when `r = +1`, `y` when `r = -1`.
    /// The two ReLU selectors of each bit are built once and shared.
    pub fn relu_mux(&mut self, x: NodeId, y: NodeId, r: NodeId) -> Result<NodeId> {
        if self.shape(x) != self.shape(y) {
            return Err(Error::Shape(format!(
                "mux inputs {} and {}",
                format_shape(self.shape(x)),
                format_shape(self.shape(y))
            )));
        }
        if !self.shape(r).is_empty() {
            return Err(Error::Shape(format!("mux selector must be scalar, got {}", format_shape(self.shape(r)))));
        }
        let (pos, neg) = match self.selectors.get(&r) {
            Some(&pair) => pair,
            None => {
                let pos = self.relu(r)?;
                let minus = self.neg(r)?;
                let neg = self.relu(minus)?;
                self.selectors.insert(r, (pos, neg));
                (pos, neg)
            }
        };
        let a = self.mul(pos, x)?;
        let b = self.mul(neg, y)?;
        self.mux_count += 1;
        self.add(a, b)
    }

    /// Selects `values[index]` with `index = sum_i (bits[i] == -1) << i`.
    /// Bit 0 drives the leaf level. Lists that are not a power of two are
    /// padded by repeating the last value, so out-of-range indices resolve
    /// to the last value.
    pub fn build_mux_tree(&mut self, values: &[NodeId], bits: &[NodeId]) -> Result<NodeId> {
        if values.is_empty() {
            return Err(Error::Graph("mux tree needs at least one value".into()));
        }
        let needed = bits_per_group(values.len());
        if bits.len() != needed {
            return Err(Error::Graph(format!(
                "{} values need {needed} selection bits, got {}",
                values.len(),
                bits.len()
            )));
        }
        let mut level: Vec<NodeId> = values.to_vec();
        level.resize(1 << needed, *values.last().unwrap());
        for &bit in bits {
            let mut next = Vec::with_capacity(level.len() / 2);
            for pair in level.chunks(2) {
                // identical halves need no selection
                next.push(if pair[0] == pair[1] { pair[0] } else { self.relu_mux(pair[0], pair[1], bit)? });
            }
            level = next;
        }
        Ok(level[0])
    }

    pub fn finish(
        self,
        image_input: NodeId,
        random_inputs: Vec<NodeId>,
        output: NodeId,
        mut meta: GraphMeta,
    ) -> BranchFreeGraph {
        meta.mux_count = self.mux_count;
        BranchFreeGraph { nodes: self.nodes, image_input, random_inputs, output, meta }
    }
}
