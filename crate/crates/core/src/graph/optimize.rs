//! Graph passes run when a trace is finalized.

use std::collections::{BTreeSet, HashMap};

use crate::device::DeviceName;
use crate::dispatch::{run_kernel, Operand};
use crate::registry::{AttrValue, Attrs, TensorSpec};
use crate::runtime::Runtime;
use crate::tensor::Tensor;

use super::{GraphFunction, Library, Node, Output, ValueRef};

/// Keeps the nodes flagged in `keep`, renumbering ids densely and dropping
/// library entries nothing refers to any more.
fn compact(g: &GraphFunction, nodes: Vec<Node>, keep: &[bool]) -> GraphFunction {
    let n_in = g.inputs.len() as u32;
    let mut remap: HashMap<u32, u32> = HashMap::new();
    let mut kept = Vec::new();
    for (j, mut node) in nodes.into_iter().enumerate() {
        if !keep[j] {
            continue;
        }
        let id = n_in + kept.len() as u32;
        remap.insert(node.id, id);
        node.id = id;
        for r in &mut node.inputs {
            if r.node >= n_in {
                r.node = remap[&r.node];
            }
        }
        kept.push(node);
    }
    let fix = |r: ValueRef| if r.node >= n_in { ValueRef { node: remap[&r.node], output: r.output } } else { r };
    let outputs = g.outputs.iter().map(|o| Output { name: o.name.clone(), value: fix(o.value) }).collect();

    let mut wanted: BTreeSet<String> = kept.iter().flat_map(|n| n.func_attrs().map(str::to_string)).collect();
    let mut frontier: Vec<String> = wanted.iter().cloned().collect();
    while let Some(name) = frontier.pop() {
        if let Some(f) = g.library.get(&name) {
            for n in &f.nodes {
                for callee in n.func_attrs() {
                    if g.library.contains_key(callee) && wanted.insert(callee.to_string()) {
                        frontier.push(callee.to_string());
                    }
                }
            }
        }
    }
    let library: Library =
        g.library.iter().filter(|(k, _)| wanted.contains(*k)).map(|(k, v)| (k.clone(), v.clone())).collect();
    GraphFunction::new(g.name.clone(), g.inputs.clone(), kept, outputs, library).expect("compaction preserves topology")
}

/// Removes stateless nodes that neither reach an output nor feed a stateful
/// node. Stateful nodes are always kept.
pub fn prune(g: &GraphFunction) -> GraphFunction {
    let rt = Runtime::current();
    let n_in = g.inputs.len() as u32;
    let n = g.nodes.len();
    let mut live = vec![false; n];
    let mut stack: Vec<usize> = g
        .outputs
        .iter()
        .filter(|o| o.value.node >= n_in)
        .map(|o| (o.value.node - n_in) as usize)
        .chain((0..n).filter(|&j| g.node_is_stateful(&rt, &g.nodes[j])))
        .collect();
    while let Some(j) = stack.pop() {
        if std::mem::replace(&mut live[j], true) {
            continue;
        }
        stack.extend(g.nodes[j].inputs.iter().filter(|r| r.node >= n_in).map(|r| (r.node - n_in) as usize));
    }
    compact(g, g.nodes.clone(), &live)
}

/// Largest `ones_like`/`zeros_like` output folded from its static shape
/// alone; bigger fills stay nodes so graphs do not embed batch-sized data.
const SHAPE_FOLD_LIMIT: usize = 64;

/// Value of a fill op whose result is fixed by its static output type.
fn shape_fold(node: &Node) -> Option<Tensor> {
    let fill = match node.op.as_str() {
        "ones_like" => 1.0,
        "zeros_like" => 0.0,
        _ => return None,
    };
    let spec = node.outputs.first()?;
    let shape = spec.shape.to_shape().filter(|s| s.num_elements() <= SHAPE_FOLD_LIMIT)?;
    Tensor::from_values(&vec![fill; shape.num_elements()], shape, spec.dtype).ok()
}

/// Replaces every stateless node whose inputs are all constants, and every
/// small fill op with a static shape, by a constant holding its value. A
/// node whose kernel fails is left alone.
/// Constants orphaned by folding are dropped; nodes that were already unused
/// are left for [`prune`].
pub fn constant_fold(g: &GraphFunction) -> GraphFunction {
    let rt = Runtime::current();
    let cpu = DeviceName::default_cpu();
    let n_in = g.inputs.len() as u32;
    let n = g.nodes.len();
    let mut nodes = g.nodes.clone();
    let mut values: HashMap<u32, Tensor> = HashMap::new();

    let mut used_before = vec![false; n];
    for r in g.nodes.iter().flat_map(|x| &x.inputs).chain(g.outputs.iter().map(|o| &o.value)) {
        if r.node >= n_in {
            used_before[(r.node - n_in) as usize] = true;
        }
    }

    for j in 0..n {
        let node = &nodes[j];
        if node.op == "constant" {
            if let Some(AttrValue::Tensor(h)) = node.attrs.get("value") {
                values.insert(node.id, Tensor::from_host(h.clone()));
            }
            continue;
        }
        let Some(def) = rt.registry().get(&node.op) else { continue };
        if def.is_higher_order() || g.node_is_stateful(&rt, node) || node.outputs.len() != 1 {
            continue;
        }
        let value = match shape_fold(node) {
            Some(v) => v,
            None => {
                let Some(args) = node
                    .inputs
                    .iter()
                    .map(|r| values.get(&r.node).filter(|_| r.output == 0).cloned().map(Operand::Tensor))
                    .collect::<Option<Vec<_>>>()
                else {
                    continue;
                };
                let Ok(mut out) = run_kernel(&rt, def, &node.attrs, &cpu, None, &args) else { continue };
                if out.len() != 1 {
                    continue;
                }
                out.remove(0)
            }
        };
        let Ok(host) = value.to_host() else { continue };
        let mut attrs = Attrs::new();
        let spec = TensorSpec::new(host.dtype(), &host.shape);
        attrs.insert("value".into(), AttrValue::Tensor(host));
        nodes[j] = Node {
            id: node.id,
            op: "constant".into(),
            inputs: Vec::new(),
            attrs,
            device: node.device.clone(),
            outputs: vec![spec],
        };
        values.insert(nodes[j].id, value);
    }

    let mut uses = vec![0usize; n];
    for r in nodes.iter().flat_map(|x| &x.inputs).chain(g.outputs.iter().map(|o| &o.value)) {
        if r.node >= n_in {
            uses[(r.node - n_in) as usize] += 1;
        }
    }
    let mut keep = vec![true; n];
    let mut work: Vec<usize> = (0..n).filter(|&j| used_before[j] && uses[j] == 0).collect();
    while let Some(j) = work.pop() {
        if !keep[j] || g.node_is_stateful(&rt, &nodes[j]) {
            continue;
        }
        keep[j] = false;
        for r in &nodes[j].inputs {
            if r.node >= n_in {
                let k = (r.node - n_in) as usize;
                uses[k] -= 1;
                if uses[k] == 0 {
                    work.push(k);
                }
            }
        }
    }
    compact(g, nodes, &keep)
}

/// The finalization pipeline: fold, then prune.
pub fn optimize(g: &GraphFunction) -> GraphFunction {
    prune(&constant_fold(g))
}
