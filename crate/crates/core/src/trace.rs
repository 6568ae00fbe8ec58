//! State of one open trace: the graph under construction plus the external
//! values it captured.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::context;
use crate::device::DeviceName;
use crate::dispatch::{placement, Operand};
use crate::error::{Error, Result};
use crate::graph::{GraphFunction, Input, InputKind, Node, Output, ValueRef};
use crate::registry::{AttrKind, AttrValue, Attrs, InferContext, OpDef, OperandSpec, TensorSpec};
use crate::runtime::Runtime;
use crate::tensor::{next_id, SymbolicRef, Tensor, TraceRef, ValueId};
use crate::variable::Variable;

static NEXT_TRACE: AtomicU64 = AtomicU64::new(1);

pub(crate) struct TraceNode {
    pub op: String,
    pub inputs: Vec<TraceRef>,
    pub attrs: Attrs,
    pub device: Option<DeviceName>,
    pub outputs: Vec<TensorSpec>,
}

pub(crate) struct TraceState {
    pub id: u64,
    pub name: String,
    /// Concrete tensors with ids at or above this were created during the
    /// trace and are embedded as constants instead of captured.
    first_value: ValueId,
    pub inputs: Vec<Input>,
    /// External values bound to capture placeholders, in capture order.
    pub captures: Vec<Operand>,
    bound: HashMap<ValueId, TraceRef>,
    pub nodes: Vec<TraceNode>,
    pub library: BTreeMap<String, Arc<GraphFunction>>,
    pub created_variables: Vec<Variable>,
}

impl TraceState {
    pub fn new(name: &str) -> TraceState {
        TraceState {
            id: NEXT_TRACE.fetch_add(1, Ordering::Relaxed),
            name: name.to_string(),
            first_value: next_id(),
            inputs: Vec::new(),
            captures: Vec::new(),
            bound: HashMap::new(),
            nodes: Vec::new(),
            library: BTreeMap::new(),
            created_variables: Vec::new(),
        }
    }

    fn sym(&self, value: TraceRef) -> SymbolicRef {
        SymbolicRef { trace: self.id, value }
    }

    /// Declares a tensor argument placeholder.
    pub fn add_input(&mut self, spec: TensorSpec) -> Tensor {
        let idx = self.inputs.len() as u32;
        let t = Tensor::symbolic(
            spec.dtype,
            spec.shape.clone(),
            self.sym(TraceRef::Input(idx)),
            context::current_device().unwrap_or_else(DeviceName::default_cpu),
        );
        self.inputs.push(Input { name: format!("arg_{idx}"), kind: InputKind::Tensor, spec });
        t
    }

    /// Declares a variable argument placeholder bound to `v` for this trace.
    pub fn add_variable_input(&mut self, v: &Variable) {
        let idx = self.inputs.len() as u32;
        self.inputs.push(Input { name: format!("arg_{idx}"), kind: InputKind::Variable, spec: v.spec() });
        self.bound.insert(v.id(), TraceRef::Input(idx));
    }

    fn operand_spec(o: &Operand) -> OperandSpec {
        match o {
            Operand::Tensor(t) => OperandSpec::Tensor(TensorSpec { dtype: t.dtype(), shape: t.shape() }),
            Operand::Variable(v) => OperandSpec::Variable(v.spec()),
        }
    }

    /// Reference for `o` inside this trace, capturing or embedding it first
    /// if it comes from outside.
    pub fn operand_ref(&mut self, o: &Operand) -> Result<TraceRef> {
        if let Operand::Tensor(t) = o {
            if let Some(sym) = t.symbolic_ref() {
                if sym.trace == self.id {
                    return Ok(sym.value);
                }
            }
        }
        if let Some(r) = self.bound.get(&o.id()) {
            return Ok(*r);
        }
        let r = match o {
            Operand::Tensor(t) if !t.is_symbolic() && t.id() >= self.first_value => {
                let host = t.to_host()?;
                let spec = TensorSpec::new(host.dtype(), &host.shape);
                let mut attrs = Attrs::new();
                attrs.insert("value".into(), AttrValue::Tensor(host));
                let idx = self.nodes.len() as u32;
                self.nodes.push(TraceNode {
                    op: "constant".into(),
                    inputs: Vec::new(),
                    attrs,
                    device: None,
                    outputs: vec![spec],
                });
                TraceRef::Node(idx, 0)
            }
            _ => {
                let idx = self.inputs.len() as u32;
                let kind = match o {
                    Operand::Tensor(_) => InputKind::Tensor,
                    Operand::Variable(_) => InputKind::Variable,
                };
                self.inputs.push(Input {
                    name: format!("capture_{}", self.captures.len()),
                    kind,
                    spec: Self::operand_spec(o).spec().clone(),
                });
                self.captures.push(o.clone());
                TraceRef::Input(idx)
            }
        };
        self.bound.insert(o.id(), r);
        Ok(r)
    }

    fn resolve(&self, rt: &Runtime, name: &str) -> Option<Arc<GraphFunction>> {
        self.library.get(name).cloned().or_else(|| rt.function(name))
    }

    /// Appends a node for `def` and returns its symbolic outputs.
    pub fn add_node(
        &mut self,
        rt: &Runtime,
        def: &OpDef,
        inputs: &[Operand],
        attrs: Attrs,
        device: Option<DeviceName>,
    ) -> Result<Vec<Tensor>> {
        let refs = inputs.iter().map(|o| self.operand_ref(o)).collect::<Result<Vec<_>>>()?;
        let specs: Vec<OperandSpec> = inputs.iter().map(Self::operand_spec).collect();
        for spec in def.attrs.iter().filter(|s| s.kind == AttrKind::Func) {
            if let Some(AttrValue::Func(name)) = attrs.get(&spec.name) {
                if !self.library.contains_key(name) {
                    let f = rt.function(name).ok_or_else(|| Error::MissingFunction(name.clone()))?;
                    self.library.insert(name.clone(), f);
                }
            }
        }
        let out_specs = {
            let resolve = |n: &str| self.resolve(rt, n);
            let cx = InferContext { rt, op: &def.name, inputs: &specs, attrs: &attrs, resolve: &resolve };
            (def.infer)(&cx)?
        };
        let out_device = placement(&def.name, inputs, device.as_ref());
        let idx = self.nodes.len() as u32;
        let outputs = out_specs
            .iter()
            .enumerate()
            .map(|(k, s)| {
                Tensor::symbolic(s.dtype, s.shape.clone(), self.sym(TraceRef::Node(idx, k as u16)), out_device.clone())
            })
            .collect();
        self.nodes.push(TraceNode { op: def.name.clone(), inputs: refs, attrs, device, outputs: out_specs });
        Ok(outputs)
    }

    /// Closes the trace into a graph function whose outputs are `outputs`.
    pub fn finalize(mut self, outputs: &[Tensor]) -> Result<(GraphFunction, Vec<Operand>)> {
        let out_refs =
            outputs.iter().map(|t| self.operand_ref(&Operand::Tensor(t.clone()))).collect::<Result<Vec<_>>>()?;
        let n_in = self.inputs.len() as u32;
        let flat = |r: TraceRef| match r {
            TraceRef::Input(i) => ValueRef { node: i, output: 0 },
            TraceRef::Node(j, k) => ValueRef { node: n_in + j, output: k },
        };
        let nodes = self
            .nodes
            .into_iter()
            .enumerate()
            .map(|(j, n)| Node {
                id: n_in + j as u32,
                op: n.op,
                inputs: n.inputs.into_iter().map(flat).collect(),
                attrs: n.attrs,
                device: n.device,
                outputs: n.outputs,
            })
            .collect();
        let outputs = out_refs
            .into_iter()
            .enumerate()
            .map(|(i, r)| Output { name: format!("output_{i}"), value: flat(r) })
            .collect();
        let g = GraphFunction::new(self.name, self.inputs, nodes, outputs, self.library)?;
        Ok((g, self.captures))
    }
}

/// Runs `body` with `state` as the open trace and hands the state back.
pub(crate) fn run_in_trace<R>(
    state: TraceState,
    body: impl FnOnce(&Rc<RefCell<TraceState>>) -> Result<R>,
) -> Result<(R, TraceState)> {
    let state = Rc::new(RefCell::new(state));
    let result = {
        let _frame = context::push_trace(Rc::clone(&state));
        body(&state)
    };
    let r = result?;
    let state = Rc::try_unwrap(state)
        .map_err(|_| Error::Staging("trace state still referenced after tracing".into()))?
        .into_inner();
    Ok((r, state))
}

/// Traces `f` on placeholders of `specs` into a registered graph function.
/// Returns the function and the external values it captured, which callers
/// pass after the declared arguments.
pub(crate) fn trace_function(
    base: &str,
    specs: &[TensorSpec],
    f: impl FnOnce(&[Tensor]) -> Result<Vec<Tensor>>,
) -> Result<(Arc<GraphFunction>, Vec<Operand>)> {
    let rt = Runtime::current();
    let mut st = TraceState::new(&rt.unique_name(base));
    let args: Vec<Tensor> = specs.iter().map(|s| st.add_input(s.clone())).collect();
    let (outs, mut st) = run_in_trace(st, |_| f(&args))?;
    let created = std::mem::take(&mut st.created_variables);
    if let Some(outer) = context::enclosing_trace() {
        outer.borrow_mut().created_variables.extend(created);
    }
    let (g, captures) = st.finalize(&outs)?;
    let g = Arc::new(crate::graph::optimize(&g));
    rt.register_function(Arc::clone(&g));
    Ok((g, captures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::dispatch;
    use crate::runtime::RuntimeOptions;
    use crate::tensor::{DType, Shape};

    #[test]
    fn captures_dedupe_and_constants_embed() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let outside = Tensor::scalar_f32(2.0);
        let mut st = TraceState::new("f");
        let x = st.add_input(TensorSpec::new(DType::Float32, Shape::scalar()));
        let (out, st) = run_in_trace(st, |_| {
            let a = dispatch("mul", &[x.clone().into(), outside.clone().into()], Attrs::new())?;
            let b = dispatch("add", &[a[0].clone().into(), outside.clone().into()], Attrs::new())?;
            let fresh = Tensor::scalar_f32(5.0);
            dispatch("add", &[b[0].clone().into(), fresh.into()], Attrs::new())
        })
        .unwrap();
        assert_eq!(st.captures.len(), 1);
        assert_eq!(st.inputs.len(), 2);
        assert_eq!(st.inputs[1].name, "capture_0");
        let (g, captures) = st.finalize(&out).unwrap();
        assert_eq!(captures.len(), 1);
        assert_eq!(g.op_count("constant"), 1);
        assert_eq!(g.nodes().len(), 4);
    }
}
