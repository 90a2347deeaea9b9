//! Structural checks mirroring an edge-accelerator compiler's restrictions:
//! supported ops only, no control flow, static shapes, acyclic.

use std::collections::VecDeque;
use std::fmt;

use super::{bits_per_group, infer_shape, BranchFreeGraph, OpKind};
use crate::tensor::format_shape;
use crate::training::SelectionMode;

const CONTROL_FLOW: &[&str] = &["If", "While", "Cond", "Switch", "Merge", "Loop", "Select", "Where"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Cycle,
    NotTopological { node: usize, input: usize },
    IdMismatch { position: usize, id: usize },
    DanglingInput { node: usize, input: usize },
    UnsupportedOp { node: usize, op: String },
    ControlFlow { node: usize, op: String },
    Shape { node: usize, detail: String },
    MissingPayload { node: usize },
    ImageInputCount(usize),
    BadEndpoint { role: &'static str, node: usize },
    SelectionBitCount { declared: usize, expected: usize },
    UnreachableRandomInput { node: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Cycle => write!(f, "cycle: graph is not acyclic"),
            Violation::NotTopological { node, input } => write!(f, "order: node {node} reads later node {input}"),
            Violation::IdMismatch { position, id } => write!(f, "id: node at position {position} has id {id}"),
            Violation::DanglingInput { node, input } => {
                write!(f, "dangling input: node {node} reads missing node {input}")
            }
            Violation::UnsupportedOp { node, op } => write!(f, "unsupported op: node {node} is {op}"),
            Violation::ControlFlow { node, op } => write!(f, "control flow: node {node} is {op}"),
            Violation::Shape { node, detail } => write!(f, "shape: node {node}: {detail}"),
            Violation::MissingPayload { node } => write!(f, "constant node {node} has no payload"),
            Violation::ImageInputCount(n) => write!(f, "image inputs: expected exactly 1, found {n}"),
            Violation::BadEndpoint { role, node } => write!(f, "{role} node {node} is invalid"),
            Violation::SelectionBitCount { declared, expected } => {
                write!(f, "selection bits: declared {declared}, mode requires {expected}")
            }
            Violation::UnreachableRandomInput { node } => {
                write!(f, "random input {node} does not reach the output")
            }
        }
    }
}

/// Every violation found; an empty list means the graph is deployable.
pub fn validate_graph(g: &BranchFreeGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let nodes = &g.nodes;
    let count = nodes.len();

    let mut edges_ok = true;
    for (pos, node) in nodes.iter().enumerate() {
        if node.id != pos {
            out.push(Violation::IdMismatch { position: pos, id: node.id });
        }
        for &input in &node.inputs {
            if input >= count {
                out.push(Violation::DanglingInput { node: pos, input });
                edges_ok = false;
            }
        }
        match &node.kind {
            OpKind::Other(op) if CONTROL_FLOW.contains(&op.as_str()) => {
                out.push(Violation::ControlFlow { node: pos, op: op.clone() })
            }
            OpKind::Other(op) => out.push(Violation::UnsupportedOp { node: pos, op: op.clone() }),
            OpKind::Constant => match &node.payload {
                None => out.push(Violation::MissingPayload { node: pos }),
                Some(t) if t.shape() != node.shape.as_slice() => out.push(Violation::Shape {
                    node: pos,
                    detail: format!("payload {} declared {}", format_shape(t.shape()), format_shape(&node.shape)),
                }),
                _ => {}
            },
            _ => {}
        }
    }
    if !edges_ok {
        return out;
    }

    let acyclic = is_acyclic(g);
    if !acyclic {
        out.push(Violation::Cycle);
    } else {
        let mut ordered = true;
        for (pos, node) in nodes.iter().enumerate() {
            for &input in &node.inputs {
                if input >= pos {
                    out.push(Violation::NotTopological { node: pos, input });
                    ordered = false;
                }
            }
        }
        if ordered {
            check_shapes(g, &mut out);
        }
    }

    let images = nodes.iter().filter(|n| n.kind == OpKind::Input).count();
    if images != 1 {
        out.push(Violation::ImageInputCount(images));
    }
    if g.image_input >= count || nodes[g.image_input].kind != OpKind::Input {
        out.push(Violation::BadEndpoint { role: "image input", node: g.image_input });
    }
    if g.output >= count {
        out.push(Violation::BadEndpoint { role: "output", node: g.output });
        return out;
    }
    for &r in &g.random_inputs {
        if r >= count || nodes[r].kind != OpKind::RandomInput {
            out.push(Violation::BadEndpoint { role: "random input", node: r });
        }
    }
    let declared_random = nodes.iter().filter(|n| n.kind == OpKind::RandomInput).count();
    if declared_random != g.random_inputs.len() {
        out.push(Violation::SelectionBitCount { declared: g.random_inputs.len(), expected: declared_random });
    }
    let expected_bits = match (&g.meta.mode, &g.meta.arch) {
        (SelectionMode::Baseline, _) => Some(0),
        (SelectionMode::Modelwise, _) => Some(bits_per_group(g.meta.m.max(1))),
        (SelectionMode::Layerwise, Some(arch)) => Some(arch.layer_count() * bits_per_group(g.meta.m.max(1))),
        (SelectionMode::Layerwise, None) => None,
    };
    if let Some(expected) = expected_bits {
        if g.meta.selection_bit_count != expected || g.random_inputs.len() != expected {
            out.push(Violation::SelectionBitCount { declared: g.meta.selection_bit_count, expected });
        }
    }

    if acyclic {
        let reach = reachable_from_output(g);
        for &r in &g.random_inputs {
            if r < count && !reach[r] {
                out.push(Violation::UnreachableRandomInput { node: r });
            }
        }
    }
    out
}

// Kahn's algorithm
fn is_acyclic(g: &BranchFreeGraph) -> bool {
    let n = g.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (pos, node) in g.nodes.iter().enumerate() {
        for &input in &node.inputs {
            indegree[pos] += 1;
            consumers[input].push(pos);
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop_front() {
        seen += 1;
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    seen == n
}

fn check_shapes(g: &BranchFreeGraph, out: &mut Vec<Violation>) {
    for (pos, node) in g.nodes.iter().enumerate() {
        if node.kind.is_source() || matches!(node.kind, OpKind::Other(_)) {
            if node.kind == OpKind::RandomInput && !node.shape.is_empty() {
                out.push(Violation::Shape { node: pos, detail: "random input must be scalar".into() });
            }
            continue;
        }
        let shapes: Vec<&[usize]> = node.inputs.iter().map(|&i| g.nodes[i].shape.as_slice()).collect();
        match infer_shape(&node.kind, &shapes) {
            Ok(s) if s == node.shape => {}
            Ok(s) => out.push(Violation::Shape {
                node: pos,
                detail: format!("declared {} inferred {}", format_shape(&node.shape), format_shape(&s)),
            }),
            Err(detail) => out.push(Violation::Shape { node: pos, detail }),
        }
    }
}

fn reachable_from_output(g: &BranchFreeGraph) -> Vec<bool> {
    let mut seen = vec![false; g.nodes.len()];
    let mut stack = vec![g.output];
    while let Some(i) = stack.pop() {
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        stack.extend(g.nodes[i].inputs.iter().copied());
    }
    seen
}
