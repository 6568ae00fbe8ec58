//! Escapes from staged execution: host callbacks embeddable in graphs, and
//! a scope that pauses the open trace.

use std::cell::Cell;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use crate::context::{self, EscapeGuard};
use crate::device::DeviceName;
use crate::dispatch::{dispatch, Operand};
use crate::error::{Error, Result};
use crate::ops;
use crate::registry::{AttrValue, Attrs, TensorSpec};
use crate::runtime::Runtime;
use crate::tape::GradientTape;
use crate::tensor::Tensor;

type HostFn = dyn Fn(&[Tensor]) -> Result<Vec<Tensor>> + Send + Sync;

/// A host function registered with the runtime and referenced from graphs
/// by id.
pub struct HostCallback {
    id: i64,
    name: String,
    func: Box<HostFn>,
    signature: Vec<TensorSpec>,
}

impl HostCallback {
    pub fn id(&self) -> i64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Declared output types.
    pub fn signature(&self) -> &[TensorSpec] {
        &self.signature
    }
}

impl fmt::Debug for HostCallback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HostCallback")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("signature", &self.signature)
            .finish()
    }
}

/// Registers `func` with the current runtime. Registrations live as long as
/// the runtime, so graphs naming the id never dangle.
pub fn register_callback(
    name: &str,
    signature: Vec<TensorSpec>,
    func: impl Fn(&[Tensor]) -> Result<Vec<Tensor>> + Send + Sync + 'static,
) -> Arc<HostCallback> {
    let rt = Runtime::current();
    let cb =
        Arc::new(HostCallback { id: rt.next_callback_id(), name: name.to_string(), func: Box::new(func), signature });
    rt.0.callbacks.write().unwrap().insert(cb.id, Arc::clone(&cb));
    cb
}

/// Runs `cb` on `inputs` as a `host_call` op: immediately in eager mode,
/// as a stateful node inside a trace.
pub fn host_call(cb: &HostCallback, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut attrs = Attrs::new();
    attrs.insert("callback".into(), AttrValue::Int(cb.id));
    let operands: Vec<Operand> = inputs.iter().map(Operand::from).collect();
    dispatch("host_call", &operands, attrs)
}

pub(crate) fn lookup(rt: &Runtime, id: i64) -> Result<Arc<HostCallback>> {
    rt.0.callbacks
        .read()
        .unwrap()
        .get(&id)
        .cloned()
        .ok_or_else(|| Error::Callback(format!("no callback registered with id {id}")))
}

thread_local! {
    static HOLDS_SLOT: Cell<bool> = const { Cell::new(false) };
}

/// True while this thread runs a host callback. Graphs executed from a
/// callback then stay on this thread: a nested host call scheduled on
/// another worker would wait forever on the slot held here.
pub(crate) fn in_callback() -> bool {
    HOLDS_SLOT.with(Cell::get)
}

/// Runs `body` as host code: the runtime entered, a fresh eager context,
/// and the callback slot held when calls are serialized. A thread already
/// holding the slot re-enters without locking.
fn in_host_context<R>(rt: &Runtime, body: impl FnOnce() -> Result<R>) -> Result<R> {
    let nested = HOLDS_SLOT.with(Cell::get);
    let _slot = (rt.options().serialize_host_calls && !nested)
        .then(|| rt.0.host_slot.lock().unwrap_or_else(|e| e.into_inner()));
    HOLDS_SLOT.with(|h| h.set(true));
    let result = {
        let _rt = rt.enter();
        let _ctx = context::isolate();
        catch_unwind(AssertUnwindSafe(body))
    };
    HOLDS_SLOT.with(|h| h.set(nested));
    match result {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "callback panicked".into());
            Err(Error::Callback(msg))
        }
    }
}

fn call_checked(cb: &HostCallback, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let outputs = (cb.func)(inputs).map_err(|e| match e {
        Error::Callback(m) => Error::Callback(m),
        other => Error::Callback(format!("`{}`: {other}", cb.name)),
    })?;
    if outputs.len() != cb.signature.len() {
        return Err(Error::SignatureViolation(format!(
            "`{}` returned {} values, declared {}",
            cb.name,
            outputs.len(),
            cb.signature.len()
        )));
    }
    for (i, (t, spec)) in outputs.iter().zip(&cb.signature).enumerate() {
        let ok = t.dtype() == spec.dtype && t.concrete_shape().is_some_and(|s| spec.shape.admits(s));
        if !ok {
            return Err(Error::SignatureViolation(format!(
                "`{}` output {i} is {} {:?}, declared {} {:?}",
                cb.name,
                t.dtype(),
                t.shape().dims(),
                spec.dtype,
                spec.shape.dims()
            )));
        }
    }
    Ok(outputs)
}

/// Kernel body of `host_call`.
pub(crate) fn invoke(rt: &Runtime, id: i64, inputs: &[Tensor], device: &DeviceName) -> Result<Vec<Tensor>> {
    let cb = lookup(rt, id)?;
    let outputs = in_host_context(rt, || call_checked(&cb, inputs))?;
    outputs.iter().map(|t| t.rehome(device.clone())).collect()
}

/// Kernel body of `host_call_grad`: re-runs the callback under a fresh tape
/// and pulls `dys` back to its inputs. Non-float inputs get zeros.
pub(crate) fn invoke_vjp(
    rt: &Runtime,
    id: i64,
    xs: &[Tensor],
    dys: &[Tensor],
    device: &DeviceName,
) -> Result<Vec<Tensor>> {
    let cb = lookup(rt, id)?;
    let grads = in_host_context(rt, || {
        let tape = GradientTape::new();
        let xs: Vec<Tensor> = xs.iter().map(|x| x.rehome(x.device().clone())).collect::<Result<_>>()?;
        for x in xs.iter().filter(|x| x.dtype().is_float()) {
            tape.watch(x)?;
        }
        let ys = call_checked(&cb, &xs)?;
        tape.end()?;
        let pairs: Vec<(Tensor, Tensor)> =
            ys.into_iter().zip(dys.iter().cloned()).filter(|(y, _)| y.dtype().is_float()).collect();
        let (targets, seeds): (Vec<Tensor>, Vec<Tensor>) = pairs.into_iter().unzip();
        let sources: Vec<Operand> = xs.iter().filter(|x| x.dtype().is_float()).map(Operand::from).collect();
        let mut float_grads = tape.gradient_with(&targets, &seeds, &sources)?.into_iter();
        xs.iter()
            .map(|x| {
                if x.dtype().is_float() {
                    Ok(float_grads.next().expect("one gradient per source"))
                } else {
                    ops::zeros_like(x)
                }
            })
            .collect::<Result<Vec<_>>>()
    })?;
    grads.iter().map(|t| t.rehome(device.clone())).collect()
}

/// Pauses the open trace while alive: ops dispatched inside run eagerly and
/// produce concrete tensors. Outside a trace it changes nothing.
#[must_use = "the trace stays paused only while the guard lives"]
pub struct EscapeTrace {
    _guard: EscapeGuard,
}

pub fn escape_trace() -> EscapeTrace {
    EscapeTrace { _guard: context::push_escape() }
}
