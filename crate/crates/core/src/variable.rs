//! Mutable, identity-bearing tensor storage.
//!
//! A [`Variable`] owns its buffer; the buffer lives exactly as long as some
//! strong handle does. Staged graphs hold [`WeakVariable`]s, so executing a
//! graph after the last handle is gone fails with `DeadVariable`.

use std::fmt;
use std::sync::{Arc, RwLock, Weak};

use crate::context;
use crate::device::DeviceName;
use crate::dispatch::{dispatch, Operand};
use crate::error::{Error, Result};
use crate::host::escape_trace;
use crate::registry::{Attrs, TensorSpec};
use crate::tensor::{next_id, DType, Shape, Tensor, ValueId};

pub(crate) struct VariableInner {
    id: ValueId,
    dtype: DType,
    shape: Shape,
    device: DeviceName,
    storage: RwLock<Tensor>,
}

#[derive(Clone)]
pub struct Variable(Arc<VariableInner>);

#[derive(Clone)]
pub struct WeakVariable {
    id: ValueId,
    inner: Weak<VariableInner>,
}

impl Variable {
    /// Creates a variable holding a copy of `initial`, which must be concrete.
    /// Inside a trace the creation is recorded for the state-creation check.
    pub fn new(initial: &Tensor) -> Result<Variable> {
        let (shape, _) = initial.shared_data().map_err(|_| {
            Error::Staging("variable initial value must be concrete; build it with Variable::new_with".into())
        })?;
        let stored = initial.rehome(initial.device().clone())?;
        let v = Variable(Arc::new(VariableInner {
            id: next_id(),
            dtype: initial.dtype(),
            shape: shape.clone(),
            device: initial.device().clone(),
            storage: RwLock::new(stored),
        }));
        if let Some(trace) = context::enclosing_trace() {
            trace.borrow_mut().created_variables.push(v.clone());
        }
        Ok(v)
    }

    /// Runs `init` outside any trace and wraps its result.
    pub fn new_with(init: impl FnOnce() -> Result<Tensor>) -> Result<Variable> {
        let initial = {
            let _eager = escape_trace();
            init()?
        };
        Variable::new(&initial)
    }

    pub fn id(&self) -> ValueId {
        self.0.id
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn shape(&self) -> &Shape {
        &self.0.shape
    }

    pub fn device(&self) -> &DeviceName {
        &self.0.device
    }

    pub fn spec(&self) -> TensorSpec {
        TensorSpec::new(self.0.dtype, &self.0.shape)
    }

    pub fn downgrade(&self) -> WeakVariable {
        WeakVariable { id: self.0.id, inner: Arc::downgrade(&self.0) }
    }

    pub fn ptr_eq(&self, other: &Variable) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Reads the current value (a `read_variable` dispatch, so it is
    /// recorded on tapes and staged inside traces).
    pub fn read(&self) -> Result<Tensor> {
        let mut out = dispatch("read_variable", &[Operand::Variable(self.clone())], Attrs::new())?;
        Ok(out.remove(0))
    }

    pub fn read_value(&self) -> Result<Tensor> {
        self.read()
    }

    pub fn assign(&self, value: &Tensor) -> Result<()> {
        dispatch("assign_variable", &[Operand::Variable(self.clone()), Operand::Tensor(value.clone())], Attrs::new())?;
        Ok(())
    }

    pub fn assign_add(&self, delta: &Tensor) -> Result<()> {
        dispatch(
            "assign_add_variable",
            &[Operand::Variable(self.clone()), Operand::Tensor(delta.clone())],
            Attrs::new(),
        )?;
        Ok(())
    }

    /// Snapshot of the storage without dispatching (no tape, no trace).
    pub(crate) fn snapshot(&self) -> Tensor {
        self.0.storage.read().unwrap().clone()
    }

    pub(crate) fn check_compatible(&self, value: &Tensor) -> Result<()> {
        if value.dtype() != self.0.dtype {
            return Err(Error::DTypeMismatch { expected: self.0.dtype, actual: value.dtype() });
        }
        match value.concrete_shape() {
            Some(s) if s == &self.0.shape => Ok(()),
            Some(s) => Err(Error::ShapeMismatch(format!(
                "variable has shape {:?}, value has shape {:?}",
                self.0.shape.dims(),
                s.dims()
            ))),
            None => Err(Error::SymbolicTensor),
        }
    }

    /// Replaces the storage. Value must already be checked.
    pub(crate) fn store(&self, value: Tensor) {
        *self.0.storage.write().unwrap() = value;
    }

    /// Read-modify-write under the storage lock.
    pub(crate) fn update(&self, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<()> {
        let mut guard = self.0.storage.write().unwrap();
        let next = f(&guard)?;
        *guard = next;
        Ok(())
    }
}

impl fmt::Debug for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Variable(id={}, dtype={}, shape={:?})", self.0.id.0, self.0.dtype, self.0.shape.dims())
    }
}

impl WeakVariable {
    pub fn id(&self) -> ValueId {
        self.id
    }

    pub fn upgrade(&self) -> Result<Variable> {
        self.inner.upgrade().map(Variable).ok_or(Error::DeadVariable(self.id.0))
    }
}

impl fmt::Debug for WeakVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WeakVariable(id={})", self.id.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{Runtime, RuntimeOptions};

    #[test]
    fn create_read_assign() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let v = Variable::new(&Tensor::scalar_f32(3.0)).unwrap();
        assert_eq!(v.read().unwrap().to_scalar().unwrap(), 3.0);
        v.assign(&Tensor::scalar_f32(5.0)).unwrap();
        assert_eq!(v.read().unwrap().to_scalar().unwrap(), 5.0);
        v.assign_add(&Tensor::scalar_f32(1.5)).unwrap();
        assert_eq!(v.read().unwrap().to_scalar().unwrap(), 6.5);
    }

    #[test]
    fn reads_are_immutable_snapshots() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let v = Variable::new(&Tensor::scalar_f32(1.0)).unwrap();
        let before = v.read().unwrap();
        v.assign(&Tensor::scalar_f32(2.0)).unwrap();
        assert_eq!(before.to_scalar().unwrap(), 1.0);
    }

    #[test]
    fn distinct_identities_and_storage() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let init = Tensor::scalar_f32(0.0);
        let a = Variable::new(&init).unwrap();
        let b = Variable::new(&init).unwrap();
        assert_ne!(a.id(), b.id());
        a.assign_add(&Tensor::scalar_f32(1.0)).unwrap();
        assert_eq!(b.read().unwrap().to_scalar().unwrap(), 0.0);
    }

    #[test]
    fn shape_and_dtype_checked_on_assign() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let v = Variable::new(&Tensor::from_f32(vec![1.0, 2.0], [2]).unwrap()).unwrap();
        assert!(matches!(v.assign(&Tensor::scalar_f32(1.0)), Err(Error::ShapeMismatch(_))));
        assert!(matches!(v.assign(&Tensor::from_f64(vec![1.0, 2.0], [2]).unwrap()), Err(Error::DTypeMismatch { .. })));
    }

    #[test]
    fn weak_handle_dies_with_variable() {
        let v = Variable::new(&Tensor::scalar_f32(1.0)).unwrap();
        let w = v.downgrade();
        assert!(w.upgrade().is_ok());
        drop(v);
        assert!(matches!(w.upgrade(), Err(Error::DeadVariable(_))));
    }
}
