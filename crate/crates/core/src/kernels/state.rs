//! Variable access and random-number kernels.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dispatch::Operand;
use crate::error::{Error, Result};
use crate::gradients as grad;
use crate::registry::{Arity, AttrKind, AttrLookup, InferContext, KernelContext, OpDef, TensorSpec};
use crate::tensor::{DType, Data, Shape, Tensor};

use super::math::add_kernel;
use super::{concrete_shape, require_float, tensor_at, variable_at};

fn read_variable(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let v = variable_at("read_variable", inputs, 0)?;
    Ok(vec![v.snapshot().rehome(cx.device.clone())?])
}

fn variable_spec(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    if !cx.inputs[0].is_variable() {
        return Err(Error::kernel(format!("`{}` input 0 must be a variable", cx.op_name())));
    }
    Ok(vec![cx.input(0).clone()])
}

fn assign_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    variable_spec(cx)?;
    let (var, value) = (cx.input(0), cx.input(1));
    if var.dtype != value.dtype {
        return Err(Error::DTypeMismatch { expected: var.dtype, actual: value.dtype });
    }
    if value.shape.rank() != var.shape.rank()
        || var.shape.dims().iter().zip(value.shape.dims()).any(|(a, b)| matches!((a, b), (Some(a), Some(b)) if a != b))
    {
        return Err(Error::ShapeMismatch(format!(
            "variable has shape {:?}, value has shape {:?}",
            var.shape.dims(),
            value.shape.dims()
        )));
    }
    Ok(vec![])
}

fn assign_variable(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let v = variable_at("assign_variable", inputs, 0)?;
    let value = tensor_at("assign_variable", inputs, 1)?;
    v.check_compatible(value)?;
    v.store(value.rehome(cx.device.clone())?);
    Ok(vec![])
}

fn assign_add_variable(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let v = variable_at("assign_add_variable", inputs, 0)?;
    let delta = tensor_at("assign_add_variable", inputs, 1)?;
    v.check_compatible(delta)?;
    v.update(|cur| {
        let sum = add_kernel(cx, &[Operand::Tensor(cur.clone()), Operand::Tensor(delta.clone())])?;
        Ok(sum.into_iter().next().expect("add has one output"))
    })?;
    Ok(vec![])
}

fn random_dtype(cx: &impl AttrLookup) -> Result<DType> {
    match cx.attrs().get("dtype") {
        None => Ok(DType::Float32),
        Some(_) => {
            let d = cx.attr_dtype("dtype")?;
            require_float("random_normal", d)?;
            Ok(d)
        }
    }
}

fn float_or(cx: &impl AttrLookup, name: &str, default: f64) -> Result<f64> {
    match cx.attrs().get(name) {
        None => Ok(default),
        Some(_) => cx.attr_float(name),
    }
}

fn random_shape(cx: &impl AttrLookup) -> Result<Shape> {
    cx.attr_shape("shape")?.to_shape().ok_or_else(|| Error::attr(cx.op_name(), "shape must be fully defined"))
}

fn random_normal(cx: &KernelContext<'_>, _: &[Operand]) -> Result<Vec<Tensor>> {
    let shape = random_shape(cx)?;
    let dtype = random_dtype(cx)?;
    let mean = float_or(cx, "mean", 0.0)?;
    let stddev = float_or(cx, "stddev", 1.0)?;
    let n = shape.num_elements();
    let samples: Vec<f64> = {
        let mut rng = cx.runtime().rng();
        (0..n).map(|_| mean + stddev * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let data = match dtype {
        DType::Float32 => Data::F32(samples.iter().map(|&x| x as f32).collect()),
        _ => Data::F64(samples),
    };
    Ok(vec![cx.output(data, shape)])
}

fn dropout_rate(cx: &impl AttrLookup) -> Result<f64> {
    let rate = cx.attr_float("rate")?;
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::attr("dropout", format!("rate must be in [0, 1), got {rate}")));
    }
    Ok(rate)
}

/// Outputs `x * mask` and the mask, whose entries are 0 or `1 / (1 - rate)`.
fn dropout(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("dropout", inputs, 0)?;
    let shape = concrete_shape(x)?.clone();
    let keep = 1.0 - dropout_rate(cx)?;
    let mask: Vec<f64> = {
        let mut rng = cx.runtime().rng();
        (0..shape.num_elements()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect()
    };
    let (y, mask) = match x.data()? {
        Data::F32(v) => {
            let m: Vec<f32> = mask.iter().map(|&m| m as f32).collect();
            (Data::F32(v.iter().zip(&m).map(|(a, b)| a * b).collect()), Data::F32(m))
        }
        Data::F64(v) => (Data::F64(v.iter().zip(&mask).map(|(a, b)| a * b).collect()), Data::F64(mask)),
        _ => return Err(Error::kernel(format!("`dropout` requires a float tensor, got {}", x.dtype()))),
    };
    Ok(vec![cx.output(y, shape.clone()), cx.output(mask, shape)])
}

pub(super) fn ops() -> Vec<OpDef> {
    vec![
        OpDef::new("read_variable", Arity::Fixed(1), Arity::Fixed(1), read_variable, variable_spec)
            .stateful()
            .gradient(grad::identity),
        OpDef::new("assign_variable", Arity::Fixed(2), Arity::Fixed(0), assign_variable, assign_infer).stateful(),
        OpDef::new("assign_add_variable", Arity::Fixed(2), Arity::Fixed(0), assign_add_variable, assign_infer)
            .stateful(),
        OpDef::new("random_normal", Arity::Fixed(0), Arity::Fixed(1), random_normal, |cx| {
            Ok(vec![TensorSpec::new(random_dtype(cx)?, random_shape(cx)?)])
        })
        .attr("shape", AttrKind::Shape)
        .optional_attr("dtype", AttrKind::DType)
        .optional_attr("mean", AttrKind::Float)
        .optional_attr("stddev", AttrKind::Float)
        .stateful(),
        OpDef::new("dropout", Arity::Fixed(1), Arity::Fixed(2), dropout, |cx| {
            dropout_rate(cx)?;
            require_float("dropout", cx.input(0).dtype)?;
            Ok(vec![cx.input(0).clone(), cx.input(0).clone()])
        })
        .attr("rate", AttrKind::Float)
        .stateful()
        .gradient(grad::dropout),
    ]
}
