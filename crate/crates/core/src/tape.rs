//! Reverse-mode differentiation by recording dispatched ops on tapes.
//!
//! Gradient functions are themselves op dispatches, so while one tape
//! computes a gradient, any still-active outer tape records that
//! computation and can differentiate it again.

use std::cell::{Cell, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::context;
use crate::dispatch::Operand;
use crate::error::{Error, Result};
use crate::function_grad::GradientPair;
use crate::ops;
use crate::registry::{Attrs, GradContext, OpDef};
use crate::tensor::{Tensor, ValueId};

/// One recorded op application.
pub(crate) struct TapeEntry {
    pub op: Arc<OpDef>,
    pub attrs: Attrs,
    pub inputs: Vec<Operand>,
    pub outputs: Vec<Tensor>,
    /// Extra forward values a staged call returned for its backward function.
    pub saved: Vec<Tensor>,
    pub pair: Option<Arc<GradientPair>>,
}

pub(crate) struct TapeInner {
    persistent: bool,
    /// Ids of watched values and of every output recorded so far.
    watched: RefCell<HashSet<ValueId>>,
    entries: RefCell<Vec<Rc<TapeEntry>>>,
    active: Cell<bool>,
    /// False while this tape computes its own gradient.
    recording: Cell<bool>,
    consumed: Cell<bool>,
}

impl TapeInner {
    pub fn auto_watch(&self, id: ValueId) {
        if self.recording.get() {
            self.watched.borrow_mut().insert(id);
        }
    }

    /// Whether an op on `inputs` must be recorded here.
    pub fn wants(&self, inputs: &[Operand]) -> bool {
        if !self.recording.get() {
            return false;
        }
        let watched = self.watched.borrow();
        inputs.iter().any(|o| watched.contains(&o.id()))
    }

    pub fn record(&self, entry: Rc<TapeEntry>) {
        if !self.recording.get() {
            return;
        }
        self.watched.borrow_mut().extend(entry.outputs.iter().map(Tensor::id));
        self.entries.borrow_mut().push(entry);
    }
}

/// Restores the recording flag when a gradient computation ends.
struct PauseRecording<'a>(&'a Cell<bool>, bool);

impl Drop for PauseRecording<'_> {
    fn drop(&mut self) {
        self.0.set(self.1);
    }
}

/// A tape recording ops on watched values while active. Tapes nest; only
/// the innermost active tape may end.
pub struct GradientTape {
    inner: Rc<TapeInner>,
}

impl Default for GradientTape {
    fn default() -> Self {
        GradientTape::new()
    }
}

impl fmt::Debug for GradientTape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradientTape")
            .field("persistent", &self.inner.persistent)
            .field("active", &self.inner.active.get())
            .field("entries", &self.inner.entries.borrow().len())
            .finish()
    }
}

impl GradientTape {
    /// Starts a tape that allows one gradient computation.
    pub fn new() -> GradientTape {
        GradientTape::start(false)
    }

    /// Starts a tape that allows any number of gradient computations.
    pub fn persistent() -> GradientTape {
        GradientTape::start(true)
    }

    fn start(persistent: bool) -> GradientTape {
        let inner = Rc::new(TapeInner {
            persistent,
            watched: RefCell::new(HashSet::new()),
            entries: RefCell::new(Vec::new()),
            active: Cell::new(true),
            recording: Cell::new(true),
            consumed: Cell::new(false),
        });
        context::push_tape(Rc::clone(&inner));
        GradientTape { inner }
    }

    pub fn is_active(&self) -> bool {
        self.inner.active.get()
    }

    /// Number of recorded op applications.
    pub fn len(&self) -> usize {
        self.inner.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of the recorded ops, in recording order.
    pub fn recorded_ops(&self) -> Vec<String> {
        self.inner.entries.borrow().iter().map(|e| e.op.name.clone()).collect()
    }

    /// Records later ops that consume `value` or anything derived from it.
    pub fn watch(&self, value: impl Into<Operand>) -> Result<()> {
        if !self.inner.active.get() {
            return Err(Error::InactiveTape);
        }
        self.inner.watched.borrow_mut().insert(value.into().id());
        Ok(())
    }

    /// Stops recording. Entries stay available for `gradient`.
    pub fn end(&self) -> Result<()> {
        if !self.inner.active.get() {
            return Err(Error::InactiveTape);
        }
        if !context::pop_tape(&self.inner) {
            return Err(Error::NonNestedEnd);
        }
        self.inner.active.set(false);
        self.inner.recording.set(false);
        Ok(())
    }

    /// d(target)/d(source) for each source. `target` must be a scalar.
    pub fn gradient(&self, target: &Tensor, sources: &[Operand]) -> Result<Vec<Tensor>> {
        if target.rank() != 0 {
            return Err(Error::NonScalarTarget(target.shape().dims().to_vec()));
        }
        let seed = ops::ones_like(target)?;
        self.gradient_with(std::slice::from_ref(target), &[seed], sources)
    }

    /// Vector-Jacobian product: pulls `seeds[i]` back from `targets[i]`,
    /// summed over targets. Unconnected sources get zeros.
    pub fn gradient_with(&self, targets: &[Tensor], seeds: &[Tensor], sources: &[Operand]) -> Result<Vec<Tensor>> {
        let inner = &self.inner;
        if inner.consumed.get() {
            return Err(Error::ConsumedTape);
        }
        if targets.len() != seeds.len() {
            return Err(Error::InputMismatch(format!("{} targets but {} seeds", targets.len(), seeds.len())));
        }
        {
            let watched = inner.watched.borrow();
            if sources.iter().any(|s| !s.dtype().is_float() || !watched.contains(&s.id())) {
                return Err(Error::UnwatchedSource);
            }
        }
        if !inner.persistent {
            inner.consumed.set(true);
        }
        let _pause = PauseRecording(&inner.recording, inner.recording.replace(false));
        let entries: Vec<Rc<TapeEntry>> = if inner.persistent {
            inner.entries.borrow().clone()
        } else {
            std::mem::take(&mut *inner.entries.borrow_mut())
        };

        let mut grads: HashMap<ValueId, Tensor> = HashMap::new();
        let accumulate = |grads: &mut HashMap<ValueId, Tensor>, id: ValueId, g: Tensor| -> Result<()> {
            let next = match grads.remove(&id) {
                Some(prev) => ops::add(&prev, &g)?,
                None => g,
            };
            grads.insert(id, next);
            Ok(())
        };
        for (t, s) in targets.iter().zip(seeds) {
            accumulate(&mut grads, t.id(), s.clone())?;
        }

        for entry in entries.iter().rev() {
            let upstream: Vec<Option<Tensor>> = entry.outputs.iter().map(|o| grads.get(&o.id()).cloned()).collect();
            if upstream.iter().all(Option::is_none) {
                continue;
            }
            let Some(gradient) = entry.op.gradient.as_ref() else { continue };
            let cx = GradContext {
                op: &entry.op.name,
                inputs: &entry.inputs,
                outputs: &entry.outputs,
                upstream: &upstream,
                attrs: &entry.attrs,
                saved: &entry.saved,
                pair: entry.pair.as_ref(),
            };
            let input_grads = gradient(&cx)?;
            for (input, g) in entry.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    if input.dtype().is_float() {
                        accumulate(&mut grads, input.id(), g)?;
                    }
                }
            }
        }

        sources
            .iter()
            .map(|s| match grads.get(&s.id()) {
                Some(g) => Ok(g.clone()),
                None => match s {
                    Operand::Tensor(t) => ops::zeros_like(t),
                    Operand::Variable(v) => ops::zeros(v.shape().dims(), v.dtype()),
                },
            })
            .collect()
    }
}

impl Drop for GradientTape {
    fn drop(&mut self) {
        if self.inner.active.get() {
            context::remove_tape(&self.inner);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{Runtime, RuntimeOptions};

    #[test]
    fn nesting_discipline() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let t1 = GradientTape::new();
        let t2 = GradientTape::new();
        assert_eq!(t1.end().unwrap_err(), Error::NonNestedEnd);
        t2.end().unwrap();
        t1.end().unwrap();
        assert_eq!(t1.watch(&Tensor::scalar_f32(1.0)).unwrap_err(), Error::InactiveTape);
        assert_eq!(context::active_tape_count(), 0);
    }

    #[test]
    fn dropped_tape_leaves_stack() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let outer = GradientTape::new();
        {
            let _inner = GradientTape::new();
            assert_eq!(context::active_tape_count(), 2);
        }
        assert_eq!(context::active_tape_count(), 1);
        outer.end().unwrap();
    }
}
