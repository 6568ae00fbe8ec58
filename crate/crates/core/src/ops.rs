//! Typed wrappers over [`dispatch`]; every function works in both eager and
//! graph-building mode.

use std::sync::Arc;

use crate::dispatch::{dispatch, Operand};
use crate::error::{Error, Result};
use crate::graph::GraphFunction;
use crate::registry::{AttrValue, Attrs, TensorSpec};
use crate::runtime::Runtime;
use crate::tensor::{DType, HostTensor, PartialShape, Shape, Tensor};
use crate::trace::trace_function;

fn attrs<const N: usize>(pairs: [(&str, AttrValue); N]) -> Attrs {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn one(op: &str, inputs: &[Operand], attrs: Attrs) -> Result<Tensor> {
    let mut out = dispatch(op, inputs, attrs)?;
    match out.len() {
        0 => Err(Error::kernel(format!("`{op}` produced no outputs"))),
        _ => Ok(out.swap_remove(0)),
    }
}

fn unary(op: &str, x: &Tensor) -> Result<Tensor> {
    one(op, &[x.into()], Attrs::new())
}

fn binary(op: &str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    one(op, &[a.into(), b.into()], Attrs::new())
}

/// Embeds `value` as a `constant` op.
pub fn constant(value: HostTensor) -> Result<Tensor> {
    one("constant", &[], attrs([("value", AttrValue::Tensor(value))]))
}

pub fn identity(x: &Tensor) -> Result<Tensor> {
    unary("identity", x)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("div", a, b)
}

pub fn neg(x: &Tensor) -> Result<Tensor> {
    unary("neg", x)
}

pub fn exp(x: &Tensor) -> Result<Tensor> {
    unary("exp", x)
}

pub fn log(x: &Tensor) -> Result<Tensor> {
    unary("log", x)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    unary("sigmoid", x)
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    unary("softplus", x)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    unary("relu", x)
}

/// Elementwise `a > b` as a bool tensor.
pub fn greater(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("greater", a, b)
}

pub fn cast(x: &Tensor, dtype: DType) -> Result<Tensor> {
    one("cast", &[x.into()], attrs([("dtype", AttrValue::DType(dtype))]))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("matmul", a, b)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    unary("transpose", x)
}

fn reduce_attrs(axis: Option<i64>, keepdims: bool) -> Attrs {
    let mut a = Attrs::new();
    if let Some(axis) = axis {
        a.insert("axis".into(), AttrValue::Int(axis));
    }
    if keepdims {
        a.insert("keepdims".into(), AttrValue::Bool(true));
    }
    a
}

/// Sum over `axis`, or over all elements when `axis` is `None`.
pub fn reduce_sum(x: &Tensor, axis: Option<i64>, keepdims: bool) -> Result<Tensor> {
    one("reduce_sum", &[x.into()], reduce_attrs(axis, keepdims))
}

pub fn reduce_mean(x: &Tensor, axis: Option<i64>, keepdims: bool) -> Result<Tensor> {
    one("reduce_mean", &[x.into()], reduce_attrs(axis, keepdims))
}

/// Reshape to `shape`; at most one dimension may be left unknown.
pub fn reshape(x: &Tensor, shape: impl Into<PartialShape>) -> Result<Tensor> {
    one("reshape", &[x.into()], attrs([("shape", AttrValue::Shape(shape.into()))]))
}

pub fn reshape_like(x: &Tensor, like: &Tensor) -> Result<Tensor> {
    binary("reshape_like", x, like)
}

pub fn expand_dims(x: &Tensor, axis: i64) -> Result<Tensor> {
    one("expand_dims", &[x.into()], attrs([("axis", AttrValue::Int(axis))]))
}

pub fn broadcast_like(x: &Tensor, like: &Tensor) -> Result<Tensor> {
    binary("broadcast_like", x, like)
}

/// Sums `x` down to the shape of `like`, which must broadcast to `x`.
pub fn sum_to_like(x: &Tensor, like: &Tensor) -> Result<Tensor> {
    binary("sum_to_like", x, like)
}

/// Element count (or extent along `axis`) as a scalar of `x`'s dtype.
pub fn size(x: &Tensor, axis: Option<i64>) -> Result<Tensor> {
    let a = match axis {
        Some(axis) => attrs([("axis", AttrValue::Int(axis))]),
        None => Attrs::new(),
    };
    one("size", &[x.into()], a)
}

pub fn zeros(dims: &[usize], dtype: DType) -> Result<Tensor> {
    one("zeros", &[], attrs([("shape", AttrValue::Shape(Shape::new(dims).into())), ("dtype", AttrValue::DType(dtype))]))
}

pub fn zeros_like(x: &Tensor) -> Result<Tensor> {
    unary("zeros_like", x)
}

pub fn ones_like(x: &Tensor) -> Result<Tensor> {
    unary("ones_like", x)
}

pub fn eye(n: usize, dtype: DType) -> Result<Tensor> {
    one("eye", &[], attrs([("n", AttrValue::Int(n as i64)), ("dtype", AttrValue::DType(dtype))]))
}

/// Square matrix with `v` on the diagonal.
pub fn diag(v: &Tensor) -> Result<Tensor> {
    unary("diag", v)
}

pub fn random_normal(dims: &[usize], dtype: DType, mean: f64, stddev: f64) -> Result<Tensor> {
    one(
        "random_normal",
        &[],
        attrs([
            ("shape", AttrValue::Shape(Shape::new(dims).into())),
            ("dtype", AttrValue::DType(dtype)),
            ("mean", AttrValue::Float(mean)),
            ("stddev", AttrValue::Float(stddev)),
        ]),
    )
}

/// Zeroes each element with probability `rate` and rescales the rest.
pub fn dropout(x: &Tensor, rate: f64) -> Result<Tensor> {
    one("dropout", &[x.into()], attrs([("rate", AttrValue::Float(rate))]))
}

/// Executes `f` as a single `call_function` op.
pub fn call_function(f: &Arc<GraphFunction>, args: &[Operand]) -> Result<Vec<Tensor>> {
    let rt = Runtime::current();
    if rt.function(f.name()).is_none() {
        rt.register_function(Arc::clone(f));
    }
    dispatch("call_function", args, attrs([("f", AttrValue::Func(f.name().to_string()))]))
}

fn spec_of(t: &Tensor) -> TensorSpec {
    TensorSpec { dtype: t.dtype(), shape: t.shape() }
}

/// Runs `then_fn` or `else_fn` on `args` depending on the bool scalar
/// `pred`. Both branches are staged, so the choice can depend on values only
/// known at graph execution time.
pub fn cond(
    pred: &Tensor,
    then_fn: impl FnOnce(&[Tensor]) -> Result<Vec<Tensor>>,
    else_fn: impl FnOnce(&[Tensor]) -> Result<Vec<Tensor>>,
    args: &[Tensor],
) -> Result<Vec<Tensor>> {
    let specs: Vec<TensorSpec> = args.iter().map(spec_of).collect();
    let (then_g, then_caps) = trace_function("cond_then", &specs, then_fn)?;
    let (else_g, else_caps) = trace_function("cond_else", &specs, else_fn)?;
    let mut inputs: Vec<Operand> = vec![pred.into()];
    inputs.extend(args.iter().map(Operand::from));
    inputs.extend(then_caps);
    inputs.extend(else_caps);
    dispatch(
        "cond",
        &inputs,
        attrs([
            ("then_branch", AttrValue::Func(then_g.name().to_string())),
            ("else_branch", AttrValue::Func(else_g.name().to_string())),
            ("num_args", AttrValue::Int(args.len() as i64)),
        ]),
    )
}

/// Repeats `body` while `cond_fn` returns true. Loop variables keep the
/// dtypes and shapes of `loop_vars`.
pub fn while_loop(
    cond_fn: impl FnOnce(&[Tensor]) -> Result<Tensor>,
    body: impl FnOnce(&[Tensor]) -> Result<Vec<Tensor>>,
    loop_vars: &[Tensor],
) -> Result<Vec<Tensor>> {
    let specs: Vec<TensorSpec> = loop_vars.iter().map(spec_of).collect();
    let (cond_g, cond_caps) = trace_function("while_cond", &specs, |vars| cond_fn(vars).map(|c| vec![c]))?;
    let (body_g, body_caps) = trace_function("while_body", &specs, body)?;
    let mut inputs: Vec<Operand> = loop_vars.iter().map(Operand::from).collect();
    inputs.extend(cond_caps);
    inputs.extend(body_caps);
    dispatch(
        "while_loop",
        &inputs,
        attrs([
            ("cond", AttrValue::Func(cond_g.name().to_string())),
            ("body", AttrValue::Func(body_g.name().to_string())),
            ("num_loop_vars", AttrValue::Int(loop_vars.len() as i64)),
        ]),
    )
}
