//! Gradient functions of the built-in ops. Each is a composition of op
//! dispatches, so outer tapes can record and differentiate it again.

use crate::dispatch::{dispatch, Operand};
use crate::error::{Error, Result};
use crate::function_grad;
use crate::ops;
use crate::registry::{AttrLookup, AttrValue, Attrs, GradContext};
use crate::tensor::Tensor;

type Grads = Result<Vec<Option<Tensor>>>;

fn up(cx: &GradContext<'_>) -> Result<Tensor> {
    cx.upstream_or_zeros(0)
}

/// Sums `g` down to the shape of `like`, undoing broadcasting.
fn unbroadcast(g: Tensor, like: &Tensor) -> Result<Tensor> {
    let (gs, ls) = (g.shape(), like.shape());
    if gs.is_fully_defined() && gs == ls {
        return Ok(g);
    }
    ops::sum_to_like(&g, like)
}

pub(crate) fn identity(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(up(cx)?)])
}

pub(crate) fn add(cx: &GradContext<'_>) -> Grads {
    let g = up(cx)?;
    Ok(vec![Some(unbroadcast(g.clone(), cx.input(0)?)?), Some(unbroadcast(g, cx.input(1)?)?)])
}

pub(crate) fn sub(cx: &GradContext<'_>) -> Grads {
    let g = up(cx)?;
    Ok(vec![Some(unbroadcast(g.clone(), cx.input(0)?)?), Some(unbroadcast(ops::neg(&g)?, cx.input(1)?)?)])
}

pub(crate) fn mul(cx: &GradContext<'_>) -> Grads {
    let g = up(cx)?;
    let (a, b) = (cx.input(0)?, cx.input(1)?);
    Ok(vec![Some(unbroadcast(ops::mul(&g, b)?, a)?), Some(unbroadcast(ops::mul(&g, a)?, b)?)])
}

pub(crate) fn div(cx: &GradContext<'_>) -> Grads {
    let g = up(cx)?;
    let (a, b) = (cx.input(0)?, cx.input(1)?);
    let ga = ops::div(&g, b)?;
    let gb = ops::neg(&ops::mul(&ga, &ops::div(a, b)?)?)?;
    Ok(vec![Some(unbroadcast(ga, a)?), Some(unbroadcast(gb, b)?)])
}

pub(crate) fn neg(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(ops::neg(&up(cx)?)?)])
}

pub(crate) fn exp(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(ops::mul(&up(cx)?, &cx.outputs[0])?)])
}

pub(crate) fn log(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(ops::div(&up(cx)?, cx.input(0)?)?)])
}

pub(crate) fn sigmoid(cx: &GradContext<'_>) -> Grads {
    let s = &cx.outputs[0];
    let ds = ops::mul(s, &ops::sub(&ops::ones_like(s)?, s)?)?;
    Ok(vec![Some(ops::mul(&up(cx)?, &ds)?)])
}

pub(crate) fn softplus(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(ops::mul(&up(cx)?, &ops::sigmoid(cx.input(0)?)?)?)])
}

/// The derivative at exactly zero is taken as zero.
pub(crate) fn relu(cx: &GradContext<'_>) -> Grads {
    let x = cx.input(0)?;
    let positive = ops::cast(&ops::greater(x, &ops::zeros_like(x)?)?, x.dtype())?;
    Ok(vec![Some(ops::mul(&up(cx)?, &positive)?)])
}

pub(crate) fn cast(cx: &GradContext<'_>) -> Grads {
    let x = cx.input(0)?;
    if !x.dtype().is_float() {
        return Ok(vec![None]);
    }
    Ok(vec![Some(ops::cast(&up(cx)?, x.dtype())?)])
}

pub(crate) fn matmul(cx: &GradContext<'_>) -> Grads {
    let g = up(cx)?;
    let (a, b) = (cx.input(0)?, cx.input(1)?);
    Ok(vec![Some(ops::matmul(&g, &ops::transpose(b)?)?), Some(ops::matmul(&ops::transpose(a)?, &g)?)])
}

pub(crate) fn transpose(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(ops::transpose(&up(cx)?)?)])
}

/// Upstream gradient of a reduction, broadcast back over the input.
fn spread(cx: &GradContext<'_>) -> Result<Tensor> {
    let x = cx.input(0)?;
    let mut g = up(cx)?;
    if let Some(axis) = cx.attr_opt_int("axis")? {
        if !cx.attr_bool_or("keepdims", false)? {
            g = ops::expand_dims(&g, axis)?;
        }
    }
    ops::broadcast_like(&g, x)
}

pub(crate) fn reduce_sum(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(spread(cx)?)])
}

pub(crate) fn reduce_mean(cx: &GradContext<'_>) -> Grads {
    let count = ops::size(cx.input(0)?, cx.attr_opt_int("axis")?)?;
    Ok(vec![Some(ops::div(&spread(cx)?, &count)?)])
}

/// Shared by `reshape` and `expand_dims`.
pub(crate) fn reshape(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(ops::reshape_like(&up(cx)?, cx.input(0)?)?)])
}

pub(crate) fn reshape_like(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(ops::reshape_like(&up(cx)?, cx.input(0)?)?), None])
}

pub(crate) fn broadcast_like(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(ops::sum_to_like(&up(cx)?, cx.input(0)?)?), None])
}

pub(crate) fn sum_to_like(cx: &GradContext<'_>) -> Grads {
    Ok(vec![Some(ops::broadcast_like(&up(cx)?, cx.input(0)?)?), None])
}

pub(crate) fn dropout(cx: &GradContext<'_>) -> Grads {
    match &cx.upstream[0] {
        Some(g) => Ok(vec![Some(ops::mul(g, &cx.outputs[1])?)]),
        None => Ok(vec![None]),
    }
}

/// Runs the staged backward function built alongside the forward variant
/// that produced this entry.
pub(crate) fn call_function(cx: &GradContext<'_>) -> Grads {
    let pair = cx.pair.ok_or_else(|| Error::kernel("call_function was recorded without its gradient functions"))?;
    let mut args: Vec<Operand> = Vec::new();
    for &i in &pair.dy_outputs {
        args.push(cx.upstream_or_zeros(i)?.into());
    }
    args.extend(cx.saved.iter().map(Operand::from));
    args.extend(pair.saved_inputs.iter().map(|&i| cx.inputs[i].clone()));
    let grads = ops::call_function(&pair.backward, &args)?;
    let mut out = vec![None; cx.inputs.len()];
    for (&i, g) in pair.grad_inputs.iter().zip(grads) {
        out[i] = Some(g);
    }
    Ok(out)
}

/// A `cond` over per-branch gradient functions, selected by the same
/// predicate.
pub(crate) fn cond(cx: &GradContext<'_>) -> Grads {
    let dy_outputs: Vec<usize> = (0..cx.outputs.len()).filter(|&i| cx.outputs[i].dtype().is_float()).collect();
    let dys = dy_outputs.iter().map(|&i| cx.upstream_or_zeros(i)).collect::<Result<Vec<_>>>()?;
    let operands = &cx.inputs[1..];
    let num_args =
        usize::try_from(cx.attr_int("num_args")?).map_err(|_| Error::attr("cond", "num_args must be non-negative"))?;
    let (then_vjp, else_vjp) =
        function_grad::cond_vjps(cx.attr_func("then_branch")?, cx.attr_func("else_branch")?, num_args, operands, &dys)?;
    let mut args = vec![cx.inputs[0].clone()];
    args.extend(operands.iter().cloned());
    args.extend(dys.into_iter().map(Operand::Tensor));
    let mut attrs = Attrs::new();
    attrs.insert("then_branch".into(), AttrValue::Func(then_vjp.name().to_string()));
    attrs.insert("else_branch".into(), AttrValue::Func(else_vjp.name().to_string()));
    attrs.insert("num_args".into(), AttrValue::Int(args.len() as i64 - 1));
    let mut grads = dispatch("cond", &args, attrs)?.into_iter();
    let mut out = vec![None];
    for o in operands {
        out.push(if o.dtype().is_float() { grads.next() } else { None });
    }
    Ok(out)
}

/// Pulls upstream gradients back through the callback by re-running it
/// under a tape.
pub(crate) fn host_call(cx: &GradContext<'_>) -> Grads {
    let mut args = cx.inputs.to_vec();
    for i in 0..cx.outputs.len() {
        args.push(cx.upstream_or_zeros(i)?.into());
    }
    let mut attrs = Attrs::new();
    attrs.insert("callback".into(), AttrValue::Int(cx.attr_int("callback")?));
    attrs.insert("num_inputs".into(), AttrValue::Int(cx.inputs.len() as i64));
    let grads = dispatch("host_call_grad", &args, attrs)?;
    Ok(grads.into_iter().zip(cx.inputs).map(|(g, x)| x.dtype().is_float().then_some(g)).collect())
}
