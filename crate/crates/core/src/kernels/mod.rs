//! Built-in kernel table.

mod control;
mod math;
mod shape;
mod state;

use crate::dispatch::Operand;
use crate::error::{Error, Result};
use crate::registry::{InferContext, OpDef, TensorSpec};
use crate::tensor::{DType, Shape, Tensor};
use crate::variable::Variable;

pub(crate) use math::{Float, Pointwise};

pub(crate) fn builtin_ops() -> Vec<OpDef> {
    let mut ops = Vec::new();
    ops.extend(math::ops());
    ops.extend(shape::ops());
    ops.extend(state::ops());
    ops.extend(control::ops());
    ops
}

pub(crate) fn tensor_at<'a>(op: &str, inputs: &'a [Operand], i: usize) -> Result<&'a Tensor> {
    match &inputs[i] {
        Operand::Tensor(t) => Ok(t),
        Operand::Variable(_) => Err(Error::kernel(format!("`{op}` input {i} must be a tensor, got a variable"))),
    }
}

pub(crate) fn variable_at<'a>(op: &str, inputs: &'a [Operand], i: usize) -> Result<&'a Variable> {
    match &inputs[i] {
        Operand::Variable(v) => Ok(v),
        Operand::Tensor(_) => Err(Error::kernel(format!("`{op}` input {i} must be a variable"))),
    }
}

pub(crate) fn concrete_shape(t: &Tensor) -> Result<&Shape> {
    t.concrete_shape().ok_or_else(|| Error::SymbolicTensor)
}

fn same_dtype(a: DType, b: DType) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DTypeMismatch { expected: a, actual: b })
    }
}

fn require_float(op: &str, d: DType) -> Result<()> {
    if d.is_float() {
        Ok(())
    } else {
        Err(Error::kernel(format!("`{op}` requires a float tensor, got {d}")))
    }
}

fn require_numeric(op: &str, d: DType) -> Result<()> {
    if d == DType::Bool {
        Err(Error::kernel(format!("`{op}` is not defined for bool tensors")))
    } else {
        Ok(())
    }
}

/// Shape rule for ops whose single output has the type of input 0.
fn same_as_input(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    Ok(vec![cx.input(0).clone()])
}

/// Normalizes a possibly negative axis against `rank` (`extra` allows one
/// past the end, for insertion).
fn norm_axis(op: &str, axis: i64, rank: usize, extra: usize) -> Result<usize> {
    let bound = (rank + extra) as i64;
    let a = if axis < 0 { axis + bound } else { axis };
    if a < 0 || a >= bound {
        return Err(Error::kernel(format!("`{op}`: axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}
