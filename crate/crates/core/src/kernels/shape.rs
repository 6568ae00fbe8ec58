//! Shape manipulation and tensor construction.

use std::sync::Arc;

use crate::dispatch::Operand;
use crate::error::{Error, Result};
use crate::gradients as grad;
use crate::registry::{Arity, AttrKind, AttrLookup, InferContext, KernelContext, OpDef, TensorSpec};
use crate::tensor::{broadcast_partial, broadcast_shapes, DType, Data, PartialShape, Shape, Tensor};

use super::math::broadcast_strides;
use super::{concrete_shape, norm_axis, require_numeric, same_as_input, tensor_at};

fn share(cx: &KernelContext<'_>, x: &Tensor, shape: Shape) -> Result<Tensor> {
    let (_, data) = x.shared_data()?;
    Ok(Tensor::concrete(shape, Arc::clone(data), cx.device.clone()))
}

/// Resolves at most one wildcard in `target` from the element count.
fn resolve_reshape(target: &PartialShape, count: usize) -> Result<Shape> {
    let known: usize = target.dims().iter().flatten().product();
    let wild = target.dims().iter().filter(|d| d.is_none()).count();
    let dims: Vec<usize> = match wild {
        0 => target.dims().iter().map(|d| d.unwrap()).collect(),
        1 if known > 0 && count % known == 0 => target.dims().iter().map(|d| d.unwrap_or(count / known)).collect(),
        _ => return Err(Error::ShapeMismatch(format!("cannot reshape {count} elements to {:?}", target.dims()))),
    };
    let shape = Shape::new(dims);
    if shape.num_elements() != count {
        return Err(Error::ShapeMismatch(format!("cannot reshape {count} elements to {:?}", shape.dims())));
    }
    Ok(shape)
}

fn reshape(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("reshape", inputs, 0)?;
    let shape = resolve_reshape(cx.attr_shape("shape")?, concrete_shape(x)?.num_elements())?;
    Ok(vec![share(cx, x, shape)?])
}

fn reshape_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let x = cx.input(0);
    let target = cx.attr_shape("shape")?;
    let shape = match x.shape.num_elements() {
        Some(n) => PartialShape::from(resolve_reshape(target, n)?),
        None => target.clone(),
    };
    Ok(vec![TensorSpec { dtype: x.dtype, shape }])
}

fn reshape_like(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("reshape_like", inputs, 0)?;
    let like = concrete_shape(tensor_at("reshape_like", inputs, 1)?)?;
    if like.num_elements() != concrete_shape(x)?.num_elements() {
        return Err(Error::ShapeMismatch(format!(
            "cannot reshape {:?} to {:?}",
            concrete_shape(x)?.dims(),
            like.dims()
        )));
    }
    Ok(vec![share(cx, x, like.clone())?])
}

fn like_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    Ok(vec![TensorSpec { dtype: cx.input(0).dtype, shape: cx.input(1).shape.clone() }])
}

fn expand_dims(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("expand_dims", inputs, 0)?;
    let s = concrete_shape(x)?;
    let axis = norm_axis("expand_dims", cx.attr_int("axis")?, s.rank(), 1)?;
    let mut dims = s.dims().to_vec();
    dims.insert(axis, 1);
    Ok(vec![share(cx, x, Shape::new(dims))?])
}

fn expand_dims_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let x = cx.input(0);
    let axis = norm_axis("expand_dims", cx.attr_int("axis")?, x.shape.rank(), 1)?;
    let mut dims = x.shape.dims().to_vec();
    dims.insert(axis, Some(1));
    Ok(vec![TensorSpec { dtype: x.dtype, shape: PartialShape::new(dims) }])
}

fn gather_broadcast<T: Copy>(v: &[T], from: &Shape, to: &Shape) -> Vec<T> {
    let strides = broadcast_strides(from, to);
    let n = to.num_elements();
    let mut out = Vec::with_capacity(n);
    let dims = to.dims();
    let mut idx = vec![0usize; dims.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(v[off]);
        for d in (0..dims.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < dims[d] {
                break;
            }
            off -= strides[d] * dims[d];
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_like(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("broadcast_like", inputs, 0)?;
    let from = concrete_shape(x)?;
    let to = concrete_shape(tensor_at("broadcast_like", inputs, 1)?)?;
    if &broadcast_shapes(from, to)? != to {
        return Err(Error::ShapeMismatch(format!("cannot broadcast {:?} to {:?}", from.dims(), to.dims())));
    }
    if from == to {
        return Ok(vec![share(cx, x, to.clone())?]);
    }
    let data = match x.data()? {
        Data::F32(v) => Data::F32(gather_broadcast(v, from, to)),
        Data::F64(v) => Data::F64(gather_broadcast(v, from, to)),
        Data::I32(v) => Data::I32(gather_broadcast(v, from, to)),
        Data::Bool(v) => Data::Bool(gather_broadcast(v, from, to)),
    };
    Ok(vec![cx.output(data, to.clone())])
}

fn broadcast_like_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let (x, like) = (cx.input(0), cx.input(1));
    broadcast_partial(&x.shape, &like.shape)?;
    Ok(vec![TensorSpec { dtype: x.dtype, shape: like.shape.clone() }])
}

/// Sums `v` (of shape `from`) down to `to`, where `to` broadcasts to `from`.
/// Accumulates in row-major order of `from`.
fn scatter_sum<T: Copy + Default>(v: &[T], from: &Shape, to: &Shape, add: impl Fn(T, T) -> T) -> Vec<T> {
    let strides = broadcast_strides(to, from);
    let mut out = vec![T::default(); to.num_elements()];
    let dims = from.dims();
    let mut idx = vec![0usize; dims.len()];
    let mut off = 0usize;
    for &e in v {
        out[off] = add(out[off], e);
        for d in (0..dims.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < dims[d] {
                break;
            }
            off -= strides[d] * dims[d];
            idx[d] = 0;
        }
    }
    out
}

fn sum_to_like(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("sum_to_like", inputs, 0)?;
    let from = concrete_shape(x)?;
    let to = concrete_shape(tensor_at("sum_to_like", inputs, 1)?)?;
    if &broadcast_shapes(from, to)? != from {
        return Err(Error::ShapeMismatch(format!("cannot sum {:?} down to {:?}", from.dims(), to.dims())));
    }
    if from == to {
        return Ok(vec![share(cx, x, to.clone())?]);
    }
    let data = match x.data()? {
        Data::F32(v) => Data::F32(scatter_sum(v, from, to, |a, b| a + b)),
        Data::F64(v) => Data::F64(scatter_sum(v, from, to, |a, b| a + b)),
        Data::I32(v) => Data::I32(scatter_sum(v, from, to, i32::wrapping_add)),
        Data::Bool(_) => return Err(Error::kernel("`sum_to_like` is not defined for bool tensors")),
    };
    Ok(vec![cx.output(data, to.clone())])
}

fn size(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("size", inputs, 0)?;
    let s = concrete_shape(x)?;
    let n = match cx.attr_opt_int("axis")? {
        None => s.num_elements(),
        Some(a) => s.dims()[norm_axis("size", a, s.rank(), 0)?],
    };
    let data = match x.dtype() {
        DType::Bool => return Err(Error::kernel("`size` is not defined for bool tensors")),
        d => Data::filled(d, 1, n as f64),
    };
    Ok(vec![cx.output(data, Shape::scalar())])
}

fn size_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    require_numeric("size", cx.input(0).dtype)?;
    if let Some(a) = cx.attr_opt_int("axis")? {
        norm_axis("size", a, cx.input(0).shape.rank(), 0)?;
    }
    Ok(vec![TensorSpec::new(cx.input(0).dtype, Shape::scalar())])
}

fn fill_like(cx: &KernelContext<'_>, inputs: &[Operand], value: f64) -> Result<Vec<Tensor>> {
    let x = tensor_at(cx.op_name(), inputs, 0)?;
    let s = concrete_shape(x)?;
    Ok(vec![cx.output(Data::filled(x.dtype(), s.num_elements(), value), s.clone())])
}

fn full_shape(cx: &impl AttrLookup) -> Result<Shape> {
    cx.attr_shape("shape")?.to_shape().ok_or_else(|| Error::attr(cx.op_name(), "shape must be fully defined"))
}

fn zeros(cx: &KernelContext<'_>, _: &[Operand]) -> Result<Vec<Tensor>> {
    let s = full_shape(cx)?;
    Ok(vec![cx.output(Data::zeros(cx.attr_dtype("dtype")?, s.num_elements()), s)])
}

fn eye(cx: &KernelContext<'_>, _: &[Operand]) -> Result<Vec<Tensor>> {
    let n = cx.attr_int("n")?;
    if n < 0 {
        return Err(Error::attr("eye", "n must be non-negative"));
    }
    let n = n as usize;
    let dtype = match cx.attrs.get("dtype") {
        Some(_) => cx.attr_dtype("dtype")?,
        None => DType::Float32,
    };
    let v: Vec<f64> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    let data = match dtype {
        DType::Float32 => Data::F32(v.iter().map(|&x| x as f32).collect()),
        DType::Float64 => Data::F64(v),
        DType::Int32 => Data::I32(v.iter().map(|&x| x as i32).collect()),
        DType::Bool => Data::Bool(v.iter().map(|&x| x != 0.0).collect()),
    };
    Ok(vec![cx.output(data, Shape::from([n, n]))])
}

fn eye_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let n = cx.attr_int("n")?;
    if n < 0 {
        return Err(Error::attr("eye", "n must be non-negative"));
    }
    let dtype = match cx.attrs.get("dtype") {
        Some(_) => cx.attr_dtype("dtype")?,
        None => DType::Float32,
    };
    Ok(vec![TensorSpec::new(dtype, [n as usize, n as usize])])
}

fn diag(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let v = tensor_at("diag", inputs, 0)?;
    let s = concrete_shape(v)?;
    if s.rank() != 1 {
        return Err(Error::ShapeMismatch(format!("diag needs a rank-1 tensor, got {:?}", s.dims())));
    }
    let n = s.dims()[0];
    fn build<T: Copy + Default>(v: &[T], n: usize) -> Vec<T> {
        let mut out = vec![T::default(); n * n];
        for (i, &x) in v.iter().enumerate() {
            out[i * n + i] = x;
        }
        out
    }
    let data = match v.data()? {
        Data::F32(x) => Data::F32(build(x, n)),
        Data::F64(x) => Data::F64(build(x, n)),
        Data::I32(x) => Data::I32(build(x, n)),
        Data::Bool(x) => Data::Bool(build(x, n)),
    };
    Ok(vec![cx.output(data, Shape::from([n, n]))])
}

fn diag_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let v = cx.input(0);
    if v.shape.rank() != 1 {
        return Err(Error::ShapeMismatch(format!("diag needs a rank-1 tensor, got {:?}", v.shape.dims())));
    }
    let n = v.shape.dims()[0];
    Ok(vec![TensorSpec { dtype: v.dtype, shape: PartialShape::new(vec![n, n]) }])
}

fn constant(cx: &KernelContext<'_>, _: &[Operand]) -> Result<Vec<Tensor>> {
    let h = cx.attr_tensor("value")?;
    Ok(vec![cx.output(h.data.clone(), h.shape.clone())])
}

fn constant_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let h = cx.attr_tensor("value")?;
    Ok(vec![TensorSpec::new(h.dtype(), &h.shape)])
}

pub(super) fn ops() -> Vec<OpDef> {
    vec![
        OpDef::new("constant", Arity::Fixed(0), Arity::Fixed(1), constant, constant_infer)
            .attr("value", AttrKind::Tensor),
        OpDef::new("reshape", Arity::Fixed(1), Arity::Fixed(1), reshape, reshape_infer)
            .attr("shape", AttrKind::Shape)
            .gradient(grad::reshape),
        OpDef::new("reshape_like", Arity::Fixed(2), Arity::Fixed(1), reshape_like, like_infer)
            .gradient(grad::reshape_like),
        OpDef::new("expand_dims", Arity::Fixed(1), Arity::Fixed(1), expand_dims, expand_dims_infer)
            .attr("axis", AttrKind::Int)
            .gradient(grad::reshape),
        OpDef::new("broadcast_like", Arity::Fixed(2), Arity::Fixed(1), broadcast_like, broadcast_like_infer)
            .gradient(grad::broadcast_like),
        OpDef::new("sum_to_like", Arity::Fixed(2), Arity::Fixed(1), sum_to_like, like_infer)
            .gradient(grad::sum_to_like),
        OpDef::new("size", Arity::Fixed(1), Arity::Fixed(1), size, size_infer).optional_attr("axis", AttrKind::Int),
        OpDef::new("zeros", Arity::Fixed(0), Arity::Fixed(1), zeros, |cx| {
            Ok(vec![TensorSpec::new(cx.attr_dtype("dtype")?, full_shape(cx)?)])
        })
        .attr("shape", AttrKind::Shape)
        .attr("dtype", AttrKind::DType),
        OpDef::new("zeros_like", Arity::Fixed(1), Arity::Fixed(1), |cx, i| fill_like(cx, i, 0.0), same_as_input),
        OpDef::new("ones_like", Arity::Fixed(1), Arity::Fixed(1), |cx, i| fill_like(cx, i, 1.0), same_as_input),
        OpDef::new("eye", Arity::Fixed(0), Arity::Fixed(1), eye, eye_infer)
            .attr("n", AttrKind::Int)
            .optional_attr("dtype", AttrKind::DType),
        OpDef::new("diag", Arity::Fixed(1), Arity::Fixed(1), diag, diag_infer),
    ]
}
