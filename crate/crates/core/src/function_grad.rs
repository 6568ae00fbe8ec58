//! Staged gradients of graph functions.
//!
//! The first time a tape records a call to a graph function `g`, `g` is
//! replayed in a fresh trace under an internal tape and differentiated
//! symbolically. The combined graph is split by dependence on the upstream
//! gradients into a forward variant (g's outputs plus the intermediates the
//! backward part reads) and a backward function. Both are graph functions,
//! so a staged forward pass gets a staged backward pass.

use std::collections::HashMap;
use std::sync::Arc;

use crate::context;
use crate::device::device_scope;
use crate::dispatch::{dispatch, Operand};
use crate::error::{Error, Result};
use crate::graph::{optimize, GraphFunction, Input, InputKind, Node, Output, ValueRef};
use crate::ops;
use crate::registry::TensorSpec;
use crate::runtime::Runtime;
use crate::tape::GradientTape;
use crate::tensor::Tensor;
use crate::trace::{run_in_trace, TraceState};

/// Forward variant and backward function of one graph function.
#[derive(Debug)]
pub(crate) struct GradientPair {
    /// Inputs as the original; outputs are the original outputs followed by
    /// saved intermediates.
    pub forward: Arc<GraphFunction>,
    /// Inputs: one upstream gradient per `dy_outputs` entry, the saved
    /// intermediates, then the original inputs listed in `saved_inputs`.
    /// Outputs: one gradient per `grad_inputs` entry.
    pub backward: Arc<GraphFunction>,
    pub num_outputs: usize,
    pub dy_outputs: Vec<usize>,
    pub grad_inputs: Vec<usize>,
    pub saved_inputs: Vec<usize>,
}

/// Gradient functions of `g`, built on first use and cached on `g`.
pub(crate) fn pair_for(rt: &Runtime, g: &Arc<GraphFunction>, operands: &[Operand]) -> Result<Arc<GradientPair>> {
    if let Some(p) = g.gradient.lock().unwrap().as_ref() {
        return Ok(Arc::clone(p));
    }
    let pair = Arc::new(build_pair(rt, g, operands)?);
    rt.register_function(Arc::clone(&pair.forward));
    rt.register_function(Arc::clone(&pair.backward));
    rt.metrics().record_gradient_functions(2);
    Ok(Arc::clone(g.gradient.lock().unwrap().get_or_insert(pair)))
}

/// Re-dispatches every node of `g` on `args`, honoring node placements.
pub(crate) fn replay(g: &GraphFunction, args: &[Operand]) -> Result<Vec<Tensor>> {
    let n_in = args.len();
    let mut values: Vec<Vec<Tensor>> = Vec::with_capacity(g.nodes().len());
    let get = |values: &Vec<Vec<Tensor>>, r: ValueRef| -> Operand {
        let node = r.node as usize;
        if node < n_in {
            args[node].clone()
        } else {
            Operand::Tensor(values[node - n_in][r.output as usize].clone())
        }
    };
    for node in g.nodes() {
        let inputs: Vec<Operand> = node.inputs.iter().map(|r| get(&values, *r)).collect();
        let _scope = node.device.as_ref().map(device_scope).transpose()?;
        values.push(dispatch(&node.op, &inputs, node.attrs.clone())?);
    }
    g.outputs()
        .iter()
        .map(|o| match get(&values, o.value) {
            Operand::Tensor(t) => Ok(t),
            Operand::Variable(_) => Err(Error::InputMismatch(format!("output `{}` is a variable", o.name))),
        })
        .collect()
}

/// Opens a trace whose placeholders mirror `operands`: tensors become
/// symbolic inputs, variables are bound by identity.
fn mirror_inputs(st: &mut TraceState, kinds: &[(InputKind, TensorSpec)], operands: &[Operand]) -> Result<Vec<Operand>> {
    kinds
        .iter()
        .zip(operands)
        .map(|((kind, spec), o)| match (kind, o) {
            (InputKind::Tensor, _) => Ok(Operand::Tensor(st.add_input(spec.clone()))),
            (InputKind::Variable, Operand::Variable(v)) => {
                st.add_variable_input(v);
                Ok(Operand::Variable(v.clone()))
            }
            (InputKind::Variable, Operand::Tensor(_)) => {
                Err(Error::InputMismatch("expected a variable operand".into()))
            }
        })
        .collect()
}

fn build_pair(rt: &Runtime, g: &Arc<GraphFunction>, operands: &[Operand]) -> Result<GradientPair> {
    let n_g = g.inputs().len();
    if operands.len() != n_g {
        return Err(Error::InputMismatch(format!("`{}` takes {n_g} inputs, got {}", g.name(), operands.len())));
    }
    let mut st = TraceState::new(&format!("{}_combined", g.name()));
    st.library = g.library().clone();
    let kinds: Vec<(InputKind, TensorSpec)> = g.inputs().iter().map(|i| (i.kind, i.spec.clone())).collect();
    let syms = mirror_inputs(&mut st, &kinds, operands)?;
    let grad_inputs: Vec<usize> = (0..n_g).filter(|&i| g.inputs()[i].spec.dtype.is_float()).collect();

    let ((outs, grads, dy_outputs), st) = run_in_trace(st, |state| {
        let tape = GradientTape::new();
        for &i in &grad_inputs {
            tape.watch(syms[i].clone())?;
        }
        let outs = replay(g, &syms)?;
        tape.end()?;
        let dy_outputs: Vec<usize> = (0..outs.len()).filter(|&i| outs[i].dtype().is_float()).collect();
        let dys: Vec<Tensor> = dy_outputs
            .iter()
            .map(|&i| state.borrow_mut().add_input(TensorSpec { dtype: outs[i].dtype(), shape: outs[i].shape() }))
            .collect();
        let targets: Vec<Tensor> = dy_outputs.iter().map(|&i| outs[i].clone()).collect();
        let sources: Vec<Operand> = grad_inputs.iter().map(|&i| syms[i].clone()).collect();
        let grads = tape.gradient_with(&targets, &dys, &sources)?;
        Ok((outs, grads, dy_outputs))
    })?;

    let num_outputs = outs.len();
    let mut all = outs;
    all.extend(grads);
    let (combined, captures) = st.finalize(&all)?;
    if !captures.is_empty() {
        return Err(Error::Staging(format!("gradient of `{}` captured external values", g.name())));
    }
    let split = split_combined(&combined, g, dy_outputs.len(), num_outputs)?;
    let forward = Arc::new(optimize(&split.forward.renamed(rt.unique_name(&format!("{}_forward", g.name())))?));
    let backward = Arc::new(optimize(&split.backward.renamed(rt.unique_name(&format!("{}_backward", g.name())))?));
    Ok(GradientPair { forward, backward, num_outputs, dy_outputs, grad_inputs, saved_inputs: split.saved_inputs })
}

struct Split {
    forward: GraphFunction,
    backward: GraphFunction,
    saved_inputs: Vec<usize>,
}

/// Splits the combined graph (inputs: g's inputs then the upstream
/// gradients; outputs: g's outputs then the input gradients).
fn split_combined(c: &GraphFunction, g: &GraphFunction, n_dy: usize, n_out: usize) -> Result<Split> {
    let n_g = g.inputs().len();
    let n_c = (n_g + n_dy) as u32;
    let rt = Runtime::current();
    let nodes = c.nodes();
    let node_of = |r: ValueRef| (r.node >= n_c).then(|| (r.node - n_c) as usize);

    let mut dep = vec![false; nodes.len()];
    let is_dy =
        |dep: &[bool], r: ValueRef| (r.node >= n_g as u32 && r.node < n_c) || node_of(r).is_some_and(|j| dep[j]);
    for (j, n) in nodes.iter().enumerate() {
        dep[j] = n.inputs.iter().any(|r| is_dy(&dep, *r));
    }
    // Zero-input stateless nodes are recomputed in the backward function
    // instead of being saved.
    let cheap: Vec<bool> = nodes
        .iter()
        .map(|n| n.inputs.is_empty() && rt.registry().get(&n.op).is_some_and(|d| !d.stateful && !d.is_higher_order()))
        .collect();

    let bwd_refs: Vec<ValueRef> = nodes
        .iter()
        .enumerate()
        .filter(|(j, _)| dep[*j])
        .flat_map(|(_, n)| n.inputs.iter().copied())
        .chain(c.outputs()[n_out..].iter().map(|o| o.value))
        .collect();
    let mut saved: Vec<ValueRef> = Vec::new();
    let mut saved_inputs: Vec<usize> = Vec::new();
    for r in &bwd_refs {
        if is_dy(&dep, *r) {
            continue;
        }
        match node_of(*r) {
            Some(j) if !cheap[j] => {
                if !saved.contains(r) {
                    saved.push(*r);
                }
            }
            Some(_) => {}
            None => {
                let i = r.node as usize;
                if !saved_inputs.contains(&i) {
                    saved_inputs.push(i);
                }
            }
        }
    }
    saved_inputs.sort_unstable();

    // Forward: the non-dependent nodes over g's inputs.
    let mut fwd_nodes: Vec<Node> = Vec::new();
    let mut fwd_map: HashMap<u32, u32> = HashMap::new();
    let fwd_ref = |map: &HashMap<u32, u32>, r: ValueRef| -> ValueRef {
        if r.node < n_g as u32 {
            r
        } else {
            ValueRef { node: map[&r.node], output: r.output }
        }
    };
    for (j, n) in nodes.iter().enumerate().filter(|(j, _)| !dep[*j]) {
        let id = (n_g + fwd_nodes.len()) as u32;
        fwd_map.insert(n_c + j as u32, id);
        fwd_nodes.push(Node { id, inputs: n.inputs.iter().map(|r| fwd_ref(&fwd_map, *r)).collect(), ..n.clone() });
    }
    let mut fwd_outputs: Vec<Output> = g
        .outputs()
        .iter()
        .zip(&c.outputs()[..n_out])
        .map(|(orig, o)| Output { name: orig.name.clone(), value: fwd_ref(&fwd_map, o.value) })
        .collect();
    fwd_outputs.extend(
        saved.iter().enumerate().map(|(k, r)| Output { name: format!("saved_{k}"), value: fwd_ref(&fwd_map, *r) }),
    );
    let forward = GraphFunction::new(g.name(), g.inputs().to_vec(), fwd_nodes, fwd_outputs, c.library().clone())?;

    // Backward: dys, saved values, then the original inputs it reads.
    let mut bwd_inputs: Vec<Input> = (0..n_dy)
        .map(|k| Input { name: format!("dy_{k}"), kind: InputKind::Tensor, spec: c.inputs()[n_g + k].spec.clone() })
        .collect();
    bwd_inputs.extend(saved.iter().enumerate().map(|(k, r)| Input {
        name: format!("saved_{k}"),
        kind: InputKind::Tensor,
        spec: c.value_spec(*r).clone(),
    }));
    bwd_inputs.extend(saved_inputs.iter().map(|&i| g.inputs()[i].clone()));
    let n_b = bwd_inputs.len() as u32;
    let mut bwd_nodes: Vec<Node> = Vec::new();
    let mut bwd_map: HashMap<u32, u32> = HashMap::new();
    let bwd_ref = |bwd_nodes: &mut Vec<Node>, bwd_map: &mut HashMap<u32, u32>, r: ValueRef| -> ValueRef {
        if r.node >= n_g as u32 && r.node < n_c {
            return ValueRef { node: r.node - n_g as u32, output: 0 };
        }
        if r.node < n_g as u32 {
            let k = saved_inputs.iter().position(|&i| i == r.node as usize).expect("input recorded as saved");
            return ValueRef { node: (n_dy + saved.len() + k) as u32, output: 0 };
        }
        if let Some(&id) = bwd_map.get(&r.node) {
            return ValueRef { node: id, output: r.output };
        }
        if let Some(k) = saved.iter().position(|s| *s == r) {
            return ValueRef { node: (n_dy + k) as u32, output: 0 };
        }
        // Cheap forward node used for the first time: clone it here.
        let n = &nodes[(r.node - n_c) as usize];
        let id = n_b + bwd_nodes.len() as u32;
        bwd_nodes.push(Node { id, ..n.clone() });
        bwd_map.insert(r.node, id);
        ValueRef { node: id, output: r.output }
    };
    for (j, n) in nodes.iter().enumerate().filter(|(j, _)| dep[*j]) {
        let inputs: Vec<ValueRef> = n.inputs.iter().map(|r| bwd_ref(&mut bwd_nodes, &mut bwd_map, *r)).collect();
        let id = n_b + bwd_nodes.len() as u32;
        bwd_map.insert(n_c + j as u32, id);
        bwd_nodes.push(Node { id, inputs, ..n.clone() });
    }
    let bwd_outputs: Vec<Output> = c.outputs()[n_out..]
        .iter()
        .enumerate()
        .map(|(k, o)| Output { name: format!("grad_{k}"), value: bwd_ref(&mut bwd_nodes, &mut bwd_map, o.value) })
        .collect();
    let backward =
        GraphFunction::new(format!("{}_backward", g.name()), bwd_inputs, bwd_nodes, bwd_outputs, c.library().clone())?;
    Ok(Split { forward, backward, saved_inputs })
}

/// Looks a function up in the open trace's library, then the runtime.
fn resolve(rt: &Runtime, name: &str) -> Result<Arc<GraphFunction>> {
    context::current_trace()
        .and_then(|t| t.borrow().library.get(name).cloned())
        .or_else(|| rt.function(name))
        .ok_or_else(|| Error::MissingFunction(name.to_string()))
}

fn operand_spec(o: &Operand) -> (InputKind, TensorSpec) {
    match o {
        Operand::Tensor(t) => (InputKind::Tensor, TensorSpec { dtype: t.dtype(), shape: t.shape() }),
        Operand::Variable(v) => (InputKind::Variable, v.spec()),
    }
}

/// Per-branch gradient functions of a `cond`. Each takes every cond operand
/// after the predicate plus the upstream gradients, and returns one gradient
/// per float operand (zeros for operands the branch does not read).
pub(crate) fn cond_vjps(
    then_name: &str,
    else_name: &str,
    num_args: usize,
    operands: &[Operand],
    dys: &[Tensor],
) -> Result<(Arc<GraphFunction>, Arc<GraphFunction>)> {
    let rt = Runtime::current();
    let then_g = resolve(&rt, then_name)?;
    let else_g = resolve(&rt, else_name)?;
    let kinds: Vec<(InputKind, TensorSpec)> = operands
        .iter()
        .map(operand_spec)
        .chain(dys.iter().map(|d| (InputKind::Tensor, TensorSpec { dtype: d.dtype(), shape: d.shape() })))
        .collect();
    let key = format!("cond_vjp|{then_name}|{else_name}|{num_args}|{kinds:?}");
    if let Some(v) = rt.0.derived.lock().unwrap().get(&key) {
        return Ok((Arc::clone(&v[0]), Arc::clone(&v[1])));
    }
    let then_caps = then_g.inputs().len().saturating_sub(num_args);
    let branch_ops = |then: bool, all: &[Operand]| -> Vec<Operand> {
        let caps = if then { num_args..num_args + then_caps } else { num_args + then_caps..operands.len() };
        all[..num_args].iter().chain(&all[caps]).cloned().collect()
    };
    let mut built = Vec::with_capacity(2);
    for (then, branch) in [(true, &then_g), (false, &else_g)] {
        let mut st = TraceState::new(&rt.unique_name(&format!("{}_vjp", branch.name())));
        let mut dys_and_ops: Vec<Operand> = operands.to_vec();
        dys_and_ops.extend(dys.iter().map(Operand::from));
        let syms = mirror_inputs(&mut st, &kinds, &dys_and_ops)?;
        let (sym_ops, sym_dys) = syms.split_at(operands.len());
        let (grads, mut st) = run_in_trace(st, |_| {
            let tape = GradientTape::new();
            let sources: Vec<Operand> = sym_ops.iter().filter(|o| o.dtype().is_float()).cloned().collect();
            for s in &sources {
                tape.watch(s.clone())?;
            }
            let outs = ops::call_function(branch, &branch_ops(then, sym_ops))?;
            tape.end()?;
            let (targets, seeds): (Vec<Tensor>, Vec<Tensor>) = outs
                .into_iter()
                .filter(|o| o.dtype().is_float())
                .zip(sym_dys.iter().map(|d| d.as_tensor().expect("dys are tensors").clone()))
                .unzip();
            tape.gradient_with(&targets, &seeds, &sources)
        })?;
        st.library.entry(branch.name().to_string()).or_insert_with(|| Arc::clone(branch));
        let (f, captures) = st.finalize(&grads)?;
        if !captures.is_empty() {
            return Err(Error::Staging(format!("gradient of `{}` captured external values", branch.name())));
        }
        let f = Arc::new(optimize(&f));
        rt.register_function(Arc::clone(&f));
        rt.metrics().record_gradient_functions(1);
        built.push(f);
    }
    rt.0.derived.lock().unwrap().insert(key, built.clone());
    Ok((Arc::clone(&built[0]), Arc::clone(&built[1])))
}
