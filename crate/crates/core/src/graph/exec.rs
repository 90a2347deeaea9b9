//! Reference float interpreter.

use super::{BranchFreeGraph, Node, OpKind};
use crate::error::{Error, Result};
use crate::mlp::softmax_row;
use crate::tensor::{format_shape, Tensor};

/// Result of a traced run: the output plus every node's value in node order.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub output: Tensor,
    pub values: Vec<Tensor>,
    /// Number of nodes evaluated; always the node count of the graph.
    pub evaluated_nodes: usize,
}

impl BranchFreeGraph {
    /// Checks runtime inputs against the graph's interface.
    pub(crate) fn check_inputs(&self, image: &Tensor, bits: &[f32]) -> Result<()> {
        let expected = &self.nodes[self.image_input].shape;
        if image.shape() != expected.as_slice() {
            return Err(Error::Shape(format!(
                "image {} for input {}",
                format_shape(image.shape()),
                format_shape(expected)
            )));
        }
        if bits.len() != self.random_inputs.len() || bits.len() != self.meta.selection_bit_count {
            return Err(Error::Shape(format!(
                "{} random bits for a graph with {} selection inputs",
                bits.len(),
                self.random_inputs.len()
            )));
        }
        if let Some((index, &value)) = bits.iter().enumerate().find(|(_, &b)| b != 1.0 && b != -1.0) {
            return Err(Error::BitOutOfRange { index, value });
        }
        Ok(())
    }

    pub fn execute(&self, image: &Tensor, bits: &[f32]) -> Result<Tensor> {
        Ok(self.execute_traced(image, bits)?.output)
    }

    /// Evaluates every node in order.
    pub fn execute_traced(&self, image: &Tensor, bits: &[f32]) -> Result<Execution> {
        self.check_inputs(image, bits)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut evaluated_nodes = 0;
        for (pos, node) in self.nodes.iter().enumerate() {
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= pos) {
                return Err(Error::Graph(format!("node {pos} reads node {bad} before it is computed")));
            }
            let value = if pos == self.image_input {
                image.clone()
            } else if let Some(slot) = self.random_inputs.iter().position(|&r| r == pos) {
                Tensor::scalar(bits[slot])
            } else {
                eval_node(node, &values)?
            };
            values.push(value);
            evaluated_nodes += 1;
        }
        Ok(Execution { output: values[self.output].clone(), values, evaluated_nodes })
    }
}

fn eval_node(node: &Node, values: &[Tensor]) -> Result<Tensor> {
    let arg = |i: usize| &values[node.inputs[i]];
    let out = match &node.kind {
        OpKind::Constant => {
            node.payload.clone().ok_or_else(|| Error::Graph(format!("constant node {} has no payload", node.id)))?
        }
        OpKind::Input | OpKind::RandomInput => {
            return Err(Error::Graph(format!("node {} is an unbound {}", node.id, node.kind)))
        }
        OpKind::MatMul => {
            let (w, x) = (arg(0), arg(1));
            let (outs, ins) = (w.shape()[0], w.shape()[1]);
            let data = (0..outs)
                .map(|o| w.data()[o * ins..(o + 1) * ins].iter().zip(x.data()).map(|(a, b)| a * b).sum())
                .collect();
            Tensor::new(vec![outs], data)?
        }
        OpKind::Add => broadcast(arg(0), arg(1), |a, b| a + b)?,
        OpKind::Mul => broadcast(arg(0), arg(1), |a, b| a * b)?,
        OpKind::Neg => arg(0).map(|v| -v),
        OpKind::Relu => arg(0).map(|v| v.max(0.0)),
        OpKind::Softmax => {
            let mut t = arg(0).clone();
            softmax_row(t.data_mut());
            t
        }
        OpKind::Other(name) => return Err(Error::Graph(format!("unsupported op {name} at node {}", node.id))),
    };
    if out.shape() != node.shape.as_slice() {
        return Err(Error::Shape(format!(
            "node {} produced {}, declared {}",
            node.id,
            format_shape(out.shape()),
            format_shape(&node.shape)
        )));
    }
    Ok(out)
}

fn broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    } else if b.shape().is_empty() {
        let y = b.data()[0];
        Ok(a.map(|x| f(x, y)))
    } else if a.shape().is_empty() {
        let x = a.data()[0];
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(Error::Shape(format!("cannot combine {} and {}", format_shape(a.shape()), format_shape(b.shape()))))
    }
}
