use super::{BranchFreeGraph, GraphBuilder, GraphMeta, NodeId};
use crate::error::{Error, Result};
use crate::mlp::ModelParams;
use crate::training::{ModelBundle, SelectionMode, SelectionVector};

/// `ceil(log2 m)`: bits needed to address `m` choices.
pub fn bits_per_group(m: usize) -> usize {
    assert!(m >= 1);
    (usize::BITS - (m - 1).leading_zeros()) as usize
}

/// Single-model graph without selection inputs.
pub fn compile_model(params: &ModelParams) -> BranchFreeGraph {
    let arch = params.arch();
    let mut b = GraphBuilder::new();
    let image = b.input(vec![arch.input_dim()]);
    let mut x = image;
    let n = arch.layer_count();
    for (j, layer) in params.layers().iter().enumerate() {
        let w = b.constant(layer.weights.clone());
        let bias = b.constant(layer.bias.clone());
        x = dense(&mut b, w, bias, x, j + 1 == n).expect("shapes come from a validated model");
    }
    let meta = GraphMeta {
        arch: Some(arch.clone()),
        m: 1,
        mode: SelectionMode::Baseline,
        selection_bit_count: 0,
        mux_count: 0,
    };
    b.finish(image, Vec::new(), x, meta)
}

fn dense(b: &mut GraphBuilder, w: NodeId, bias: NodeId, x: NodeId, last: bool) -> Result<NodeId> {
    let z = b.matmul(w, x)?;
    let z = b.add(z, bias)?;
    if last {
        b.softmax(z)
    } else {
        b.relu(z)
    }
}

/// Compiles a multi-model bundle. Modelwise bundles share one group of
/// `ceil(log2 m)` selection bits across all layers; layerwise bundles get
/// one group per layer. Muxes select the weight and bias tensors before
/// each layer's MatMul.
pub fn compile_bundle(bundle: &ModelBundle) -> Result<BranchFreeGraph> {
    let m = bundle.model_count();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("compile_bundle needs m >= 2, got {m}; use compile_model")));
    }
    let arch = bundle.arch();
    let n = arch.layer_count();
    let per_group = bits_per_group(m);
    let groups = match bundle.mode() {
        SelectionMode::Modelwise => 1,
        SelectionMode::Layerwise => n,
        SelectionMode::Baseline => {
            return Err(Error::InvalidArgument("baseline bundles compile with compile_model".into()))
        }
    };

    let mut b = GraphBuilder::new();
    let image = b.input(vec![arch.input_dim()]);
    let random: Vec<NodeId> = (0..groups * per_group).map(|_| b.random_input()).collect();
    let mut x = image;
    for j in 0..n {
        let group = if groups == 1 { 0 } else { j };
        let bits = &random[group * per_group..(group + 1) * per_group];
        let ws: Vec<NodeId> = bundle.models().iter().map(|p| b.constant(p.layer(j).weights.clone())).collect();
        let w = b.build_mux_tree(&ws, bits)?;
        let bs: Vec<NodeId> = bundle.models().iter().map(|p| b.constant(p.layer(j).bias.clone())).collect();
        let bias = b.build_mux_tree(&bs, bits)?;
        x = dense(&mut b, w, bias, x, j + 1 == n)?;
    }
    let meta =
        GraphMeta { arch: Some(arch.clone()), m, mode: bundle.mode(), selection_bit_count: random.len(), mux_count: 0 };
    Ok(b.finish(image, random.clone(), x, meta))
}

/// Bit pattern that makes a compiled graph compute `selection`.
pub fn bits_for_selection(graph: &BranchFreeGraph, selection: &SelectionVector) -> Result<Vec<f32>> {
    let meta = graph.meta();
    if meta.m < 2 {
        return Ok(Vec::new());
    }
    let per_group = bits_per_group(meta.m);
    let groups = meta.selection_bit_count / per_group;
    let choices = selection.choices();
    if choices.iter().any(|&k| k >= meta.m) {
        return Err(Error::InvalidArgument(format!("selection {choices:?} out of range for m = {}", meta.m)));
    }
    let group_choices: Vec<usize> = match meta.mode {
        SelectionMode::Modelwise => {
            if choices.iter().any(|&k| k != choices[0]) {
                return Err(Error::InvalidArgument("modelwise graphs select one model for all layers".into()));
            }
            vec![choices[0]]
        }
        _ => {
            if choices.len() != groups {
                return Err(Error::Shape(format!("selection of {} layers for {groups} bit groups", choices.len())));
            }
            choices.to_vec()
        }
    };
    Ok(group_choices
        .iter()
        .flat_map(|&k| (0..per_group).map(move |i| if k >> i & 1 == 1 { -1.0 } else { 1.0 }))
        .collect())
}

/// Per-layer choices that a bit pattern selects, after padding.
pub fn selection_for_bits(graph: &BranchFreeGraph, bits: &[f32]) -> Result<SelectionVector> {
    let meta = graph.meta();
    let n = meta.arch.as_ref().map_or(1, |a| a.layer_count());
    if meta.m < 2 {
        return Ok(SelectionVector::uniform(0, n));
    }
    if bits.len() != meta.selection_bit_count {
        return Err(Error::Shape(format!("{} bits for {} inputs", bits.len(), meta.selection_bit_count)));
    }
    let per_group = bits_per_group(meta.m);
    let group_choice = |g: usize| {
        let index: usize = (0..per_group).map(|i| usize::from(bits[g * per_group + i] < 0.0) << i).sum();
        index.min(meta.m - 1)
    };
    let choices = match meta.mode {
        SelectionMode::Modelwise => vec![group_choice(0); n],
        _ => (0..n).map(group_choice).collect(),
    };
    SelectionVector::new(choices, meta.m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{validate_graph, OpKind};
    use crate::mlp::{init_params, predict_proba, Architecture};
    use crate::tensor::Tensor;

    fn bundle(mode: SelectionMode, m: usize, sizes: &[usize]) -> ModelBundle {
        let arch = Architecture::new(sizes.to_vec()).unwrap();
        ModelBundle::new(mode, (0..m as u64).map(|k| init_params(&arch, 40 + k, 1.0)).collect()).unwrap()
    }

    #[test]
    fn bit_widths() {
        assert_eq!(bits_per_group(1), 0);
        assert_eq!(bits_per_group(2), 1);
        assert_eq!(bits_per_group(3), 2);
        assert_eq!(bits_per_group(4), 2);
        assert_eq!(bits_per_group(5), 3);
    }

    #[test]
    fn selection_bit_counts() {
        assert_eq!(
            compile_bundle(&bundle(SelectionMode::Layerwise, 4, &[3, 3, 3, 2])).unwrap().selection_bit_count(),
            6
        );
        assert_eq!(compile_bundle(&bundle(SelectionMode::Layerwise, 2, &[3, 3, 2])).unwrap().random_inputs().len(), 2);
        assert_eq!(compile_bundle(&bundle(SelectionMode::Modelwise, 2, &[3, 3, 2])).unwrap().random_inputs().len(), 1);
        assert_eq!(compile_bundle(&bundle(SelectionMode::Layerwise, 3, &[3, 3, 2])).unwrap().selection_bit_count(), 4);
    }

    #[test]
    fn rejects_single_model() {
        let b = ModelBundle::baseline(init_params(&Architecture::new(vec![2, 2]).unwrap(), 0, 1.0));
        assert!(compile_bundle(&b).is_err());
    }

    #[test]
    fn baseline_graph_matches_forward() {
        let p = init_params(&Architecture::new(vec![6, 5, 3]).unwrap(), 2, 1.0);
        let g = compile_model(&p);
        assert!(validate_graph(&g).is_empty());
        let x = Tensor::vector(vec![0.1, -0.4, 0.9, 0.0, 0.3, 1.0]);
        let out = g.execute(&x, &[]).unwrap();
        assert!(out.max_abs_diff(&predict_proba(&p, &x).unwrap()).unwrap() < 1e-6);
        assert_eq!(g.count_kind(&OpKind::MatMul), 2);
    }

    #[test]
    fn mux_node_overhead() {
        // for power-of-two m each layer adds (m-1) muxes on W and on B
        for m in [2usize, 4] {
            let sizes = [5, 4, 4, 3];
            let n = sizes.len() - 1;
            let b = bundle(SelectionMode::Layerwise, m, &sizes);
            let g = compile_bundle(&b).unwrap();
            let base = compile_model(b.model(0));
            assert_eq!(g.meta().mux_count, n * (m - 1) * 2);
            let bits = g.selection_bit_count();
            let extra_constants = 2 * n * (m - 1);
            // per mux: Mul, Mul, Add; per bit: RandomInput, ReLU, Neg, ReLU
            assert_eq!(g.node_count(), base.node_count() + 3 * g.meta().mux_count + 4 * bits + extra_constants);
        }
    }

    #[test]
    fn bit_mapping_round_trip() {
        let b = bundle(SelectionMode::Layerwise, 3, &[3, 3, 2]);
        let g = compile_bundle(&b).unwrap();
        for index in 0..9 {
            let s = SelectionVector::from_index(index, 3, 2);
            let bits = bits_for_selection(&g, &s).unwrap();
            assert_eq!(selection_for_bits(&g, &bits).unwrap(), s);
        }
        let mw = compile_bundle(&bundle(SelectionMode::Modelwise, 3, &[3, 3, 2])).unwrap();
        assert!(bits_for_selection(&mw, &SelectionVector::new(vec![0, 1], 3).unwrap()).is_err());
        assert_eq!(selection_for_bits(&mw, &[-1.0, -1.0]).unwrap().choices(), &[2, 2]);
    }
}
