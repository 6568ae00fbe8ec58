//! The single entry point for running an op. Depending on the calling
//! context it either executes the kernel now (eager) or appends a node to the
//! open trace (graph building). Both paths record onto interested tapes.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::context::{self, Snapshot};
use crate::device::{choose_device, ensure_on, DeviceName};
use crate::error::{Error, Result};
use crate::function_grad::{self, GradientPair};
use crate::registry::{AttrValue, Attrs, KernelContext, OpDef};
use crate::runtime::Runtime;
use crate::tape::{TapeEntry, TapeInner};
use crate::tensor::{DType, Tensor, ValueId};
use crate::trace::TraceState;
use crate::variable::Variable;

/// An op input: an immutable tensor or a variable passed by reference.
#[derive(Clone, Debug)]
pub enum Operand {
    Tensor(Tensor),
    Variable(Variable),
}

impl Operand {
    pub fn id(&self) -> ValueId {
        match self {
            Operand::Tensor(t) => t.id(),
            Operand::Variable(v) => v.id(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Operand::Tensor(t) => t.dtype(),
            Operand::Variable(v) => v.dtype(),
        }
    }

    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            Operand::Tensor(t) => Some(t),
            Operand::Variable(_) => None,
        }
    }

    pub fn as_variable(&self) -> Option<&Variable> {
        match self {
            Operand::Variable(v) => Some(v),
            Operand::Tensor(_) => None,
        }
    }
}

impl From<Tensor> for Operand {
    fn from(t: Tensor) -> Self {
        Operand::Tensor(t)
    }
}

impl From<&Tensor> for Operand {
    fn from(t: &Tensor) -> Self {
        Operand::Tensor(t.clone())
    }
}

impl From<Variable> for Operand {
    fn from(v: Variable) -> Self {
        Operand::Variable(v)
    }
}

impl From<&Variable> for Operand {
    fn from(v: &Variable) -> Self {
        Operand::Variable(v.clone())
    }
}

/// Ops that act on a variable's storage run where the variable lives.
pub(crate) fn is_variable_op(op: &str) -> bool {
    matches!(op, "read_variable" | "assign_variable" | "assign_add_variable")
}

fn is_assign(op: &str) -> bool {
    matches!(op, "assign_variable" | "assign_add_variable")
}

/// Runs or records `op` on `inputs`.
pub fn dispatch(op: &str, inputs: &[Operand], attrs: Attrs) -> Result<Vec<Tensor>> {
    let rt = Runtime::current();
    let def = Arc::clone(rt.registry().get(op).ok_or_else(|| Error::UnknownOp(op.to_string()))?);
    def.validate(inputs.len(), &attrs)?;
    let snap = context::snapshot();

    if !snap.tapes.is_empty() && !is_assign(op) {
        for v in inputs.iter().filter_map(Operand::as_variable) {
            for tape in &snap.tapes {
                tape.auto_watch(v.id());
            }
        }
    }
    let interested: Vec<Rc<TapeInner>> = if def.is_differentiable() {
        snap.tapes.iter().filter(|t| t.wants(inputs)).cloned().collect()
    } else {
        Vec::new()
    };

    match &snap.trace {
        Some(trace) => record(&rt, &def, inputs, attrs, trace, &interested, &snap),
        None => execute(&rt, &def, inputs, attrs, &interested, &snap),
    }
}

/// Forward variant of the called function when a tape needs its intermediates.
fn forward_pair(
    rt: &Runtime,
    def: &OpDef,
    inputs: &[Operand],
    attrs: &Attrs,
    interested: &[Rc<TapeInner>],
    resolve: impl Fn(&str) -> Option<Arc<crate::graph::GraphFunction>>,
) -> Result<Option<Arc<GradientPair>>> {
    if def.name != "call_function" || interested.is_empty() {
        return Ok(None);
    }
    let name = match attrs.get("f") {
        Some(AttrValue::Func(n)) => n.clone(),
        _ => return Err(Error::attr(&def.name, "missing attr `f`")),
    };
    let g = resolve(&name).ok_or(Error::MissingFunction(name))?;
    function_grad::pair_for(rt, &g, inputs).map(Some)
}

fn with_forward(attrs: &Attrs, pair: &GradientPair) -> Attrs {
    let mut attrs = attrs.clone();
    attrs.insert("f".into(), AttrValue::Func(pair.forward.name().to_string()));
    attrs
}

fn tape_record(
    interested: &[Rc<TapeInner>],
    def: &Arc<OpDef>,
    attrs: Attrs,
    inputs: &[Operand],
    outputs: &[Tensor],
    saved: Vec<Tensor>,
    pair: Option<Arc<GradientPair>>,
) {
    if interested.is_empty() {
        return;
    }
    let entry = Rc::new(TapeEntry {
        op: Arc::clone(def),
        attrs,
        inputs: inputs.to_vec(),
        outputs: outputs.to_vec(),
        saved,
        pair,
    });
    for tape in interested {
        tape.record(Rc::clone(&entry));
    }
}

fn execute(
    rt: &Runtime,
    def: &Arc<OpDef>,
    inputs: &[Operand],
    attrs: Attrs,
    interested: &[Rc<TapeInner>],
    snap: &Snapshot,
) -> Result<Vec<Tensor>> {
    if let Some(d) = &snap.device {
        if !rt.has_device(d) {
            return Err(Error::UnknownDevice(d.to_string()));
        }
    }
    if inputs.iter().any(|o| matches!(o, Operand::Tensor(t) if t.is_symbolic())) {
        return Err(Error::SymbolicTensor);
    }
    let device = placement(&def.name, inputs, snap.device.as_ref());
    let moved: Vec<Operand> = inputs
        .iter()
        .map(|o| match o {
            Operand::Tensor(t) => ensure_on(rt, t, &device).map(Operand::Tensor),
            Operand::Variable(v) => Ok(Operand::Variable(v.clone())),
        })
        .collect::<Result<_>>()?;
    rt.metrics().record_eager(&def.name);

    let pair = forward_pair(rt, def, inputs, &attrs, interested, |n| rt.function(n))?;
    let run_attrs = match &pair {
        Some(p) => with_forward(&attrs, p),
        None => attrs.clone(),
    };
    let mut outputs = run_kernel(rt, def, &run_attrs, &device, None, &moved)?;
    let saved = match &pair {
        Some(p) => outputs.split_off(p.num_outputs),
        None => Vec::new(),
    };
    tape_record(interested, def, attrs, inputs, &outputs, saved, pair);
    Ok(outputs)
}

pub(crate) fn placement(op: &str, inputs: &[Operand], scope: Option<&DeviceName>) -> DeviceName {
    if is_variable_op(op) {
        if let Some(Operand::Variable(v)) = inputs.first() {
            return v.device().clone();
        }
    }
    choose_device(scope, inputs.iter().filter_map(Operand::as_tensor).map(Tensor::device))
}

/// Invokes a kernel, adding the simulated accelerator latency.
pub(crate) fn run_kernel(
    rt: &Runtime,
    def: &OpDef,
    attrs: &Attrs,
    device: &DeviceName,
    library: Option<&crate::graph::LibraryScope<'_>>,
    inputs: &[Operand],
) -> Result<Vec<Tensor>> {
    let latency = rt.options().accel_latency;
    if !latency.is_zero() && Runtime::is_accel(device) {
        std::thread::sleep(latency);
    }
    let ctx = KernelContext { rt, op: &def.name, attrs, device, library };
    (def.kernel)(&ctx, inputs)
}

fn record(
    rt: &Runtime,
    def: &Arc<OpDef>,
    inputs: &[Operand],
    attrs: Attrs,
    trace: &Rc<RefCell<TraceState>>,
    interested: &[Rc<TapeInner>],
    snap: &Snapshot,
) -> Result<Vec<Tensor>> {
    let pair = forward_pair(rt, def, inputs, &attrs, interested, |n| {
        trace.borrow().library.get(n).cloned().or_else(|| rt.function(n))
    })?;
    let node_attrs = match &pair {
        Some(p) => with_forward(&attrs, p),
        None => attrs.clone(),
    };
    let mut outputs = trace.borrow_mut().add_node(rt, def, inputs, node_attrs, snap.device.clone())?;
    let saved = match &pair {
        Some(p) => outputs.split_off(p.num_outputs),
        None => Vec::new(),
    };
    tape_record(interested, def, attrs, inputs, &outputs, saved, pair);
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::AttrValue;
    use crate::runtime::RuntimeOptions;
    use crate::tensor::Shape;

    fn rt() -> Runtime {
        Runtime::new(RuntimeOptions::default())
    }

    #[test]
    fn eager_matmul_and_add() {
        let rt = rt();
        let _g = rt.enter();
        let a = Tensor::from_f32(vec![1.0, 0.0], [1, 2]).unwrap();
        let x = Tensor::from_f32(vec![2.0, -2.0], [2, 1]).unwrap();
        let y = dispatch("matmul", &[a.into(), x.into()], Attrs::new()).unwrap();
        assert_eq!(y[0].to_f64_vec().unwrap(), vec![2.0]);
        assert_eq!(y[0].concrete_shape(), Some(&Shape::from([1, 1])));
        let c =
            dispatch("add", &[Tensor::scalar_f32(1.0).into(), Tensor::scalar_f32(2.0).into()], Attrs::new()).unwrap();
        assert_eq!(c[0].to_scalar().unwrap(), 3.0);
    }

    #[test]
    fn dispatch_errors() {
        let rt = rt();
        let _g = rt.enter();
        let one = Operand::from(Tensor::scalar_f32(1.0));
        assert!(matches!(dispatch("nope", &[], Attrs::new()), Err(Error::UnknownOp(_))));
        assert!(matches!(dispatch("add", &[one.clone()], Attrs::new()), Err(Error::ArityMismatch { .. })));
        let mut bad = Attrs::new();
        bad.insert("axis".into(), AttrValue::Str("x".into()));
        assert!(matches!(dispatch("reduce_sum", &[one.clone()], bad), Err(Error::AttrMismatch { .. })));
        let int = Operand::from(Tensor::scalar_i32(1));
        assert!(matches!(dispatch("add", &[one, int], Attrs::new()), Err(Error::DTypeMismatch { .. })));
    }

    #[test]
    fn graph_mode_records_without_running() {
        let rt = rt();
        let _g = rt.enter();
        let state = Rc::new(RefCell::new(TraceState::new("t")));
        let x = state.borrow_mut().add_input(crate::registry::TensorSpec::new(DType::Float32, [1, 2]));
        let w = state.borrow_mut().add_input(crate::registry::TensorSpec::new(DType::Float32, [2, 1]));
        let before = rt.metrics().eager_dispatches();
        {
            let _frame = context::push_trace(Rc::clone(&state));
            let y = dispatch("matmul", &[x.into(), w.into()], Attrs::new()).unwrap();
            assert!(y[0].is_symbolic());
            assert!(matches!(y[0].to_host(), Err(Error::SymbolicTensor)));
        }
        assert_eq!(state.borrow().nodes.len(), 1);
        assert_eq!(rt.metrics().eager_dispatches(), before);
    }
}
