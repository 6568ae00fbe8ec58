//! Higher-order kernels that run nested graph functions, and the host
//! callback bridge.

use std::sync::Arc;

use crate::dispatch::Operand;
use crate::error::{Error, Result};
use crate::gradients as grad;
use crate::graph::{self, GraphFunction, InputKind};
use crate::host;
use crate::registry::{Arity, AttrKind, AttrLookup, InferContext, KernelContext, OpDef, OperandSpec, TensorSpec};
use crate::tensor::{DType, PartialShape, Tensor};

use super::tensor_at;

/// Checks operands against a function's placeholders without concrete data.
fn check_specs(g: &GraphFunction, specs: &[OperandSpec]) -> Result<()> {
    if specs.len() != g.inputs().len() {
        return Err(Error::InputMismatch(format!(
            "`{}` takes {} inputs, got {}",
            g.name(),
            g.inputs().len(),
            specs.len()
        )));
    }
    for (input, spec) in g.inputs().iter().zip(specs) {
        if spec.is_variable() != (input.kind == InputKind::Variable) {
            return Err(Error::InputMismatch(format!("input `{}` expects a {:?}", input.name, input.kind)));
        }
        let s = spec.spec();
        let compatible = s.dtype == input.spec.dtype
            && s.shape.rank() == input.spec.shape.rank()
            && s.shape.dims().iter().zip(input.spec.shape.dims()).all(|(a, b)| a.is_none() || b.is_none() || a == b);
        if !compatible {
            return Err(Error::InputMismatch(format!(
                "input `{}` expects {} {:?}, got {} {:?}",
                input.name,
                input.spec.dtype,
                input.spec.shape.dims(),
                s.dtype,
                s.shape.dims()
            )));
        }
    }
    Ok(())
}

/// Least specific spec admitting both, dimension by dimension.
fn merge_specs(a: &TensorSpec, b: &TensorSpec) -> Result<TensorSpec> {
    if a.dtype != b.dtype {
        return Err(Error::DTypeMismatch { expected: a.dtype, actual: b.dtype });
    }
    if a.shape.rank() != b.shape.rank() {
        return Err(Error::ShapeMismatch(format!(
            "branch outputs have ranks {} and {}",
            a.shape.rank(),
            b.shape.rank()
        )));
    }
    let dims =
        a.shape.dims().iter().zip(b.shape.dims()).map(|(x, y)| if x == y { *x } else { None }).collect::<Vec<_>>();
    Ok(TensorSpec { dtype: a.dtype, shape: PartialShape::new(dims) })
}

fn bool_scalar(t: &Tensor, what: &str) -> Result<bool> {
    if t.dtype() != DType::Bool || t.rank() != 0 {
        return Err(Error::kernel(format!("{what} must be a bool scalar, got {} {:?}", t.dtype(), t.shape().dims())));
    }
    Ok(t.to_scalar()? != 0.0)
}

fn call_function(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let g = cx.resolve_function(cx.attr_func("f")?)?;
    graph::run(cx.rt, &g, inputs, cx.device, cx.library)
}

fn call_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let g = cx.resolve_function(cx.attr_func("f")?)?;
    check_specs(&g, cx.inputs)?;
    Ok(g.output_specs())
}

struct CondParts {
    then_g: Arc<GraphFunction>,
    else_g: Arc<GraphFunction>,
    num_args: usize,
    then_caps: usize,
}

fn cond_parts(
    op: &impl AttrLookup,
    n_inputs: usize,
    resolve: impl Fn(&str) -> Result<Arc<GraphFunction>>,
) -> Result<CondParts> {
    let then_g = resolve(op.attr_func("then_branch")?)?;
    let else_g = resolve(op.attr_func("else_branch")?)?;
    let num_args =
        usize::try_from(op.attr_int("num_args")?).map_err(|_| Error::attr("cond", "num_args must be non-negative"))?;
    let caps = |g: &GraphFunction| {
        g.inputs()
            .len()
            .checked_sub(num_args)
            .ok_or_else(|| Error::attr("cond", format!("branch `{}` takes fewer than num_args inputs", g.name())))
    };
    let then_caps = caps(&then_g)?;
    let else_caps = caps(&else_g)?;
    if n_inputs != 1 + num_args + then_caps + else_caps {
        return Err(Error::InputMismatch(format!(
            "cond expects {} inputs, got {n_inputs}",
            1 + num_args + then_caps + else_caps
        )));
    }
    Ok(CondParts { then_g, else_g, num_args, then_caps })
}

impl CondParts {
    /// Operands for the chosen branch: shared args, then its own captures.
    fn branch_operands<T: Clone>(&self, inputs: &[T], then: bool) -> Vec<T> {
        let args = &inputs[1..1 + self.num_args];
        let split = 1 + self.num_args + self.then_caps;
        let caps = if then { &inputs[1 + self.num_args..split] } else { &inputs[split..] };
        args.iter().chain(caps).cloned().collect()
    }
}

fn cond(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let parts = cond_parts(cx, inputs.len(), |n| cx.resolve_function(n))?;
    let pred = bool_scalar(tensor_at("cond", inputs, 0)?, "cond predicate")?;
    let g = if pred { &parts.then_g } else { &parts.else_g };
    graph::run(cx.rt, g, &parts.branch_operands(inputs, pred), cx.device, cx.library)
}

fn cond_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let parts = cond_parts(cx, cx.inputs.len(), |n| cx.resolve_function(n))?;
    let pred = cx.input(0);
    if pred.dtype != DType::Bool || pred.shape.rank() != 0 {
        return Err(Error::kernel("cond predicate must be a bool scalar"));
    }
    check_specs(&parts.then_g, &parts.branch_operands(cx.inputs, true))?;
    check_specs(&parts.else_g, &parts.branch_operands(cx.inputs, false))?;
    let (a, b) = (parts.then_g.output_specs(), parts.else_g.output_specs());
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("branches return {} and {} outputs", a.len(), b.len())));
    }
    a.iter().zip(&b).map(|(x, y)| merge_specs(x, y)).collect()
}

struct LoopParts {
    cond_g: Arc<GraphFunction>,
    body_g: Arc<GraphFunction>,
    n: usize,
    cond_caps: usize,
}

fn loop_parts(
    op: &impl AttrLookup,
    n_inputs: usize,
    resolve: impl Fn(&str) -> Result<Arc<GraphFunction>>,
) -> Result<LoopParts> {
    let cond_g = resolve(op.attr_func("cond")?)?;
    let body_g = resolve(op.attr_func("body")?)?;
    let n = body_g.outputs().len();
    if let Some(k) = op.attr_opt_int("num_loop_vars")? {
        if k != n as i64 {
            return Err(Error::attr("while_loop", format!("num_loop_vars is {k} but the body returns {n} values")));
        }
    }
    let caps = |g: &GraphFunction| {
        g.inputs()
            .len()
            .checked_sub(n)
            .ok_or_else(|| Error::attr("while_loop", format!("`{}` takes fewer inputs than loop variables", g.name())))
    };
    let cond_caps = caps(&cond_g)?;
    let body_caps = caps(&body_g)?;
    if n_inputs != n + cond_caps + body_caps {
        return Err(Error::InputMismatch(format!(
            "while_loop expects {} inputs, got {n_inputs}",
            n + cond_caps + body_caps
        )));
    }
    Ok(LoopParts { cond_g, body_g, n, cond_caps })
}

impl LoopParts {
    fn cond_operands<T: Clone>(&self, vars: &[T], inputs: &[T]) -> Vec<T> {
        vars.iter().chain(&inputs[self.n..self.n + self.cond_caps]).cloned().collect()
    }

    fn body_operands<T: Clone>(&self, vars: &[T], inputs: &[T]) -> Vec<T> {
        vars.iter().chain(&inputs[self.n + self.cond_caps..]).cloned().collect()
    }
}

fn while_loop(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let parts = loop_parts(cx, inputs.len(), |n| cx.resolve_function(n))?;
    let mut vars: Vec<Operand> = inputs[..parts.n].to_vec();
    loop {
        let c = graph::run(cx.rt, &parts.cond_g, &parts.cond_operands(&vars, inputs), cx.device, cx.library)?;
        let go = match c.as_slice() {
            [t] => bool_scalar(t, "while_loop condition")?,
            _ => return Err(Error::kernel("while_loop condition must return one value")),
        };
        if !go {
            break;
        }
        let next = graph::run(cx.rt, &parts.body_g, &parts.body_operands(&vars, inputs), cx.device, cx.library)?;
        vars = next.into_iter().map(Operand::Tensor).collect();
    }
    vars.into_iter()
        .map(|o| o.as_tensor().cloned().ok_or_else(|| Error::kernel("while_loop variables must be tensors")))
        .collect()
}

fn while_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let parts = loop_parts(cx, cx.inputs.len(), |n| cx.resolve_function(n))?;
    let vars = &cx.inputs[..parts.n];
    if vars.iter().any(OperandSpec::is_variable) {
        return Err(Error::kernel("while_loop variables must be tensors"));
    }
    check_specs(&parts.cond_g, &parts.cond_operands(vars, cx.inputs))?;
    check_specs(&parts.body_g, &parts.body_operands(vars, cx.inputs))?;
    match parts.cond_g.output_specs().as_slice() {
        [s] if s.dtype == DType::Bool && s.shape.rank() == 0 => {}
        _ => return Err(Error::kernel("while_loop condition must return one bool scalar")),
    }
    vars.iter().zip(parts.body_g.output_specs()).map(|(v, out)| merge_specs(v.spec(), &out)).collect()
}

fn callback_id(cx: &impl AttrLookup) -> Result<i64> {
    cx.attr_int("callback")
}

fn host_call(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let xs = (0..inputs.len()).map(|i| tensor_at("host_call", inputs, i).cloned()).collect::<Result<Vec<_>>>()?;
    host::invoke(cx.rt, callback_id(cx)?, &xs, cx.device)
}

fn host_call_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let cb = host::lookup(cx.rt, callback_id(cx)?)?;
    if cx.inputs.iter().any(OperandSpec::is_variable) {
        return Err(Error::kernel("host_call inputs must be tensors"));
    }
    Ok(cb.signature().to_vec())
}

fn grad_arity(cx: &impl AttrLookup, n_inputs: usize) -> Result<usize> {
    let n = usize::try_from(cx.attr_int("num_inputs")?)
        .map_err(|_| Error::attr("host_call_grad", "num_inputs must be non-negative"))?;
    if n > n_inputs {
        return Err(Error::attr("host_call_grad", "num_inputs exceeds the operand count"));
    }
    Ok(n)
}

/// Inputs are the callback's inputs followed by one upstream gradient per
/// callback output; outputs are one gradient per callback input.
fn host_call_grad(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let n = grad_arity(cx, inputs.len())?;
    let all = (0..inputs.len()).map(|i| tensor_at("host_call_grad", inputs, i).cloned()).collect::<Result<Vec<_>>>()?;
    host::invoke_vjp(cx.rt, callback_id(cx)?, &all[..n], &all[n..], cx.device)
}

fn host_call_grad_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let n = grad_arity(cx, cx.inputs.len())?;
    let cb = host::lookup(cx.rt, callback_id(cx)?)?;
    if cx.inputs.len() - n != cb.signature().len() {
        return Err(Error::InputMismatch(format!(
            "host_call_grad expects {} upstream gradients, got {}",
            cb.signature().len(),
            cx.inputs.len() - n
        )));
    }
    Ok(cx.inputs[..n].iter().map(|s| s.spec().clone()).collect())
}

pub(super) fn ops() -> Vec<OpDef> {
    vec![
        OpDef::new("call_function", Arity::AtLeast(0), Arity::AtLeast(0), call_function, call_infer)
            .attr("f", AttrKind::Func)
            .gradient(grad::call_function),
        OpDef::new("cond", Arity::AtLeast(1), Arity::AtLeast(0), cond, cond_infer)
            .attr("then_branch", AttrKind::Func)
            .attr("else_branch", AttrKind::Func)
            .attr("num_args", AttrKind::Int)
            .gradient(grad::cond),
        OpDef::new("while_loop", Arity::AtLeast(0), Arity::AtLeast(0), while_loop, while_infer)
            .attr("cond", AttrKind::Func)
            .attr("body", AttrKind::Func)
            .optional_attr("num_loop_vars", AttrKind::Int),
        OpDef::new("host_call", Arity::AtLeast(0), Arity::AtLeast(0), host_call, host_call_infer)
            .attr("callback", AttrKind::Int)
            .stateful()
            .gradient(grad::host_call),
        OpDef::new("host_call_grad", Arity::AtLeast(0), Arity::AtLeast(0), host_call_grad, host_call_grad_infer)
            .attr("callback", AttrKind::Int)
            .attr("num_inputs", AttrKind::Int)
            .stateful(),
    ]
}
