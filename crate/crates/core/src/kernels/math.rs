//! Elementwise arithmetic, matmul and reductions.

use crate::dispatch::Operand;
use crate::error::{Error, Result};
use crate::gradients as grad;
use crate::registry::{Arity, AttrKind, AttrLookup, InferContext, KernelContext, OpDef, TensorSpec};
use crate::tensor::{broadcast_partial, broadcast_shapes, DType, Data, PartialShape, Shape, Tensor};

use super::{concrete_shape, norm_axis, require_float, require_numeric, same_as_input, same_dtype, tensor_at};

/// Per-dimension strides of `s` laid out inside `out` (right-aligned), with
/// 0 where `s` is broadcast.
pub(crate) fn broadcast_strides(s: &Shape, out: &Shape) -> Vec<usize> {
    let offset = out.rank() - s.rank();
    let mut strides = vec![0; out.rank()];
    let mut acc = 1;
    for i in (0..s.rank()).rev() {
        let d = s.dims()[i];
        if d != 1 || out.dims()[i + offset] == 1 {
            strides[i + offset] = acc;
        }
        acc *= d;
    }
    strides
}

/// Visits every index of `out` in row-major order, passing the flat offsets
/// into the two broadcast operands.
fn for_each_pair(out: &Shape, sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = out.num_elements();
    if n == 0 {
        return;
    }
    let dims = out.dims();
    let rank = dims.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        f(ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < dims[d] {
                break;
            }
            ia -= sa[d] * dims[d];
            ib -= sb[d] * dims[d];
            idx[d] = 0;
        }
    }
}

/// True when `short`, minus leading unit axes, is a non-empty trailing
/// slice of `long`.
fn is_suffix(short: &Shape, long: &Shape) -> bool {
    let dims = short.dims();
    let dims = &dims[dims.iter().take_while(|&&d| d == 1).count()..];
    !dims.is_empty() && dims.iter().product::<usize>() > 0 && long.dims().ends_with(dims)
}

fn zip_broadcast<A: Copy, B: Copy, R>(
    a: &[A],
    sa: &Shape,
    b: &[B],
    sb: &Shape,
    f: impl Fn(A, B) -> R,
) -> Result<(Vec<R>, Shape)> {
    if sa == sb {
        return Ok((a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(), sa.clone()));
    }
    let out = broadcast_shapes(sa, sb)?;
    if b.len() == 1 && &out == sa {
        let y = b[0];
        return Ok((a.iter().map(|&x| f(x, y)).collect(), out));
    }
    if a.len() == 1 && &out == sb {
        let x = a[0];
        return Ok((b.iter().map(|&y| f(x, y)).collect(), out));
    }
    // One operand repeats along leading axes only, e.g. a bias row.
    if &out == sa && is_suffix(sb, sa) {
        let mut res = Vec::with_capacity(a.len());
        for chunk in a.chunks_exact(b.len()) {
            res.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        return Ok((res, out));
    }
    if &out == sb && is_suffix(sa, sb) {
        let mut res = Vec::with_capacity(b.len());
        for chunk in b.chunks_exact(a.len()) {
            res.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return Ok((res, out));
    }
    let stra = broadcast_strides(sa, &out);
    let strb = broadcast_strides(sb, &out);
    let mut res = Vec::with_capacity(out.num_elements());
    for_each_pair(&out, &stra, &strb, |i, j| res.push(f(a[i], b[j])));
    Ok((res, out))
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(cx: &KernelContext<'_>, inputs: &[Operand], op: Bin) -> Result<Vec<Tensor>> {
    let name = cx.op_name();
    let a = tensor_at(name, inputs, 0)?;
    let b = tensor_at(name, inputs, 1)?;
    same_dtype(a.dtype(), b.dtype())?;
    let (sa, sb) = (concrete_shape(a)?, concrete_shape(b)?);
    let (data, shape) = match (a.data()?, b.data()?) {
        (Data::F32(x), Data::F32(y)) => {
            let (v, s) = match op {
                Bin::Add => zip_broadcast(x, sa, y, sb, |p: f32, q: f32| p + q),
                Bin::Sub => zip_broadcast(x, sa, y, sb, |p: f32, q: f32| p - q),
                Bin::Mul => zip_broadcast(x, sa, y, sb, |p: f32, q: f32| p * q),
                Bin::Div => zip_broadcast(x, sa, y, sb, |p: f32, q: f32| p / q),
            }?;
            (Data::F32(v), s)
        }
        (Data::F64(x), Data::F64(y)) => {
            let (v, s) = match op {
                Bin::Add => zip_broadcast(x, sa, y, sb, |p: f64, q: f64| p + q),
                Bin::Sub => zip_broadcast(x, sa, y, sb, |p: f64, q: f64| p - q),
                Bin::Mul => zip_broadcast(x, sa, y, sb, |p: f64, q: f64| p * q),
                Bin::Div => zip_broadcast(x, sa, y, sb, |p: f64, q: f64| p / q),
            }?;
            (Data::F64(v), s)
        }
        (Data::I32(x), Data::I32(y)) => {
            let (v, s) = match op {
                Bin::Add => zip_broadcast(x, sa, y, sb, |p: i32, q: i32| Some(p.wrapping_add(q))),
                Bin::Sub => zip_broadcast(x, sa, y, sb, |p: i32, q: i32| Some(p.wrapping_sub(q))),
                Bin::Mul => zip_broadcast(x, sa, y, sb, |p: i32, q: i32| Some(p.wrapping_mul(q))),
                Bin::Div => zip_broadcast(x, sa, y, sb, |p: i32, q: i32| p.checked_div(q)),
            }?;
            let v =
                v.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| Error::kernel("integer division by zero"))?;
            (Data::I32(v), s)
        }
        _ => return Err(Error::kernel(format!("`{name}` is not defined for {} tensors", a.dtype()))),
    };
    Ok(vec![cx.output(data, shape)])
}

pub(super) fn add_kernel(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    binary(cx, inputs, Bin::Add)
}

fn binary_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let (a, b) = (cx.input(0), cx.input(1));
    same_dtype(a.dtype, b.dtype)?;
    require_numeric(cx.op_name(), a.dtype)?;
    Ok(vec![TensorSpec { dtype: a.dtype, shape: broadcast_partial(&a.shape, &b.shape)? }])
}

fn binary_def(name: &str, op: Bin) -> OpDef {
    OpDef::new(name, Arity::Fixed(2), Arity::Fixed(1), move |cx, i| binary(cx, i, op), binary_infer)
}

fn map_float(
    cx: &KernelContext<'_>,
    inputs: &[Operand],
    f32f: impl Fn(f32) -> f32,
    f64f: impl Fn(f64) -> f64,
) -> Result<Vec<Tensor>> {
    let x = tensor_at(cx.op_name(), inputs, 0)?;
    let data = match x.data()? {
        Data::F32(v) => Data::F32(v.iter().map(|&e| f32f(e)).collect()),
        Data::F64(v) => Data::F64(v.iter().map(|&e| f64f(e)).collect()),
        _ => return Err(Error::kernel(format!("`{}` requires a float tensor, got {}", cx.op_name(), x.dtype()))),
    };
    Ok(vec![cx.output(data, concrete_shape(x)?.clone())])
}

fn float_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    require_float(cx.op_name(), cx.input(0).dtype)?;
    same_as_input(cx)
}

fn numeric_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    require_numeric(cx.op_name(), cx.input(0).dtype)?;
    same_as_input(cx)
}

fn float_unary(name: &str, f32f: fn(f32) -> f32, f64f: fn(f64) -> f64) -> OpDef {
    OpDef::new(name, Arity::Fixed(1), Arity::Fixed(1), move |cx, i| map_float(cx, i, f32f, f64f), float_infer)
}

fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus32(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softplus64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Scalar form of the float elementwise kernels above, bit-identical to
/// them. Unary variants ignore the second operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Pointwise {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
}

pub(crate) trait Float: Copy {
    fn apply(p: Pointwise, a: Self, b: Self) -> Self;
}

impl Float for f32 {
    #[inline(always)]
    fn apply(p: Pointwise, a: f32, b: f32) -> f32 {
        match p {
            Pointwise::Add => a + b,
            Pointwise::Sub => a - b,
            Pointwise::Mul => a * b,
            Pointwise::Div => a / b,
            Pointwise::Neg => -a,
            Pointwise::Exp => a.exp(),
            Pointwise::Log => a.ln(),
            Pointwise::Sigmoid => sigmoid32(a),
            Pointwise::Softplus => softplus32(a),
            Pointwise::Relu => {
                if a > 0.0 {
                    a
                } else {
                    0.0
                }
            }
        }
    }
}

impl Float for f64 {
    #[inline(always)]
    fn apply(p: Pointwise, a: f64, b: f64) -> f64 {
        match p {
            Pointwise::Add => a + b,
            Pointwise::Sub => a - b,
            Pointwise::Mul => a * b,
            Pointwise::Div => a / b,
            Pointwise::Neg => -a,
            Pointwise::Exp => a.exp(),
            Pointwise::Log => a.ln(),
            Pointwise::Sigmoid => sigmoid64(a),
            Pointwise::Softplus => softplus64(a),
            Pointwise::Relu => {
                if a > 0.0 {
                    a
                } else {
                    0.0
                }
            }
        }
    }
}

impl Pointwise {
    pub(crate) fn is_binary(self) -> bool {
        matches!(self, Pointwise::Add | Pointwise::Sub | Pointwise::Mul | Pointwise::Div)
    }
}

fn neg(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("neg", inputs, 0)?;
    let data = match x.data()? {
        Data::F32(v) => Data::F32(v.iter().map(|e| -e).collect()),
        Data::F64(v) => Data::F64(v.iter().map(|e| -e).collect()),
        Data::I32(v) => Data::I32(v.iter().map(|e| e.wrapping_neg()).collect()),
        Data::Bool(_) => return Err(Error::kernel("`neg` is not defined for bool tensors")),
    };
    Ok(vec![cx.output(data, concrete_shape(x)?.clone())])
}

fn relu(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("relu", inputs, 0)?;
    let data = match x.data()? {
        Data::F32(v) => Data::F32(v.iter().map(|&e| if e > 0.0 { e } else { 0.0 }).collect()),
        Data::F64(v) => Data::F64(v.iter().map(|&e| if e > 0.0 { e } else { 0.0 }).collect()),
        Data::I32(v) => Data::I32(v.iter().map(|&e| e.max(0)).collect()),
        Data::Bool(_) => return Err(Error::kernel("`relu` is not defined for bool tensors")),
    };
    Ok(vec![cx.output(data, concrete_shape(x)?.clone())])
}

fn greater(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let a = tensor_at("greater", inputs, 0)?;
    let b = tensor_at("greater", inputs, 1)?;
    same_dtype(a.dtype(), b.dtype())?;
    let (sa, sb) = (concrete_shape(a)?, concrete_shape(b)?);
    let (v, s) = match (a.data()?, b.data()?) {
        (Data::F32(x), Data::F32(y)) => zip_broadcast(x, sa, y, sb, |p, q| p > q)?,
        (Data::F64(x), Data::F64(y)) => zip_broadcast(x, sa, y, sb, |p, q| p > q)?,
        (Data::I32(x), Data::I32(y)) => zip_broadcast(x, sa, y, sb, |p, q| p > q)?,
        _ => return Err(Error::kernel("`greater` is not defined for bool tensors")),
    };
    Ok(vec![cx.output(Data::Bool(v), s)])
}

fn greater_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let spec = binary_infer(cx)?.remove(0);
    Ok(vec![TensorSpec { dtype: DType::Bool, ..spec }])
}

pub(crate) fn cast_data(data: &Data, to: DType) -> Data {
    match (data, to) {
        (Data::F32(v), DType::Float32) => Data::F32(v.clone()),
        (Data::F64(v), DType::Float64) => Data::F64(v.clone()),
        (Data::I32(v), DType::Int32) => Data::I32(v.clone()),
        (Data::Bool(v), DType::Bool) => Data::Bool(v.clone()),
        (Data::F64(v), DType::Float32) => Data::F32(v.iter().map(|&x| x as f32).collect()),
        (Data::I32(v), DType::Float32) => Data::F32(v.iter().map(|&x| x as f32).collect()),
        (Data::Bool(v), DType::Float32) => Data::F32(v.iter().map(|&x| x as u8 as f32).collect()),
        (Data::F32(v), DType::Float64) => Data::F64(v.iter().map(|&x| x as f64).collect()),
        (Data::I32(v), DType::Float64) => Data::F64(v.iter().map(|&x| x as f64).collect()),
        (Data::Bool(v), DType::Float64) => Data::F64(v.iter().map(|&x| x as u8 as f64).collect()),
        (Data::F32(v), DType::Int32) => Data::I32(v.iter().map(|&x| x as i32).collect()),
        (Data::F64(v), DType::Int32) => Data::I32(v.iter().map(|&x| x as i32).collect()),
        (Data::Bool(v), DType::Int32) => Data::I32(v.iter().map(|&x| x as i32).collect()),
        (Data::F32(v), DType::Bool) => Data::Bool(v.iter().map(|&x| x != 0.0).collect()),
        (Data::F64(v), DType::Bool) => Data::Bool(v.iter().map(|&x| x != 0.0).collect()),
        (Data::I32(v), DType::Bool) => Data::Bool(v.iter().map(|&x| x != 0).collect()),
    }
}

fn cast(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("cast", inputs, 0)?;
    let to = cx.attr_dtype("dtype")?;
    if x.dtype() == to {
        return Ok(vec![x.rehome(cx.device.clone())?]);
    }
    Ok(vec![cx.output(cast_data(x.data()?, to), concrete_shape(x)?.clone())])
}

fn matmul(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let a = tensor_at("matmul", inputs, 0)?;
    let b = tensor_at("matmul", inputs, 1)?;
    same_dtype(a.dtype(), b.dtype())?;
    let (sa, sb) = (concrete_shape(a)?, concrete_shape(b)?);
    if sa.rank() != 2 || sb.rank() != 2 || sa.dims()[1] != sb.dims()[0] {
        return Err(Error::ShapeMismatch(format!("matmul of {:?} and {:?}", sa.dims(), sb.dims())));
    }
    let (m, k, n) = (sa.dims()[0], sa.dims()[1], sb.dims()[1]);
    // i-k-j order; each output element still accumulates over k ascending.
    fn mm<T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<Output = T>>(
        a: &[T],
        b: &[T],
        m: usize,
        k: usize,
        n: usize,
    ) -> Vec<T> {
        let mut out = vec![T::default(); m * n];
        if k == 0 || n == 0 {
            return out;
        }
        if n == 1 {
            for (o, arow) in out.iter_mut().zip(a.chunks_exact(k)) {
                *o = arow.iter().zip(b).fold(T::default(), |acc, (&x, &y)| acc + x * y);
            }
            return out;
        }
        for (row, arow) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        out
    }
    let data = match (a.data()?, b.data()?) {
        (Data::F32(x), Data::F32(y)) => Data::F32(mm(x, y, m, k, n)),
        (Data::F64(x), Data::F64(y)) => Data::F64(mm(x, y, m, k, n)),
        (Data::I32(x), Data::I32(y)) => {
            let mut out = vec![0i32; m * n];
            for i in 0..m {
                for p in 0..k {
                    for j in 0..n {
                        out[i * n + j] = out[i * n + j].wrapping_add(x[i * k + p].wrapping_mul(y[p * n + j]));
                    }
                }
            }
            Data::I32(out)
        }
        _ => return Err(Error::kernel("`matmul` is not defined for bool tensors")),
    };
    Ok(vec![cx.output(data, Shape::from([m, n]))])
}

fn matmul_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let (a, b) = (cx.input(0), cx.input(1));
    same_dtype(a.dtype, b.dtype)?;
    require_numeric("matmul", a.dtype)?;
    if a.shape.rank() != 2 || b.shape.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul needs rank-2 inputs, got {:?} and {:?}",
            a.shape.dims(),
            b.shape.dims()
        )));
    }
    if let (Some(x), Some(y)) = (a.shape.dims()[1], b.shape.dims()[0]) {
        if x != y {
            return Err(Error::ShapeMismatch(format!("matmul of {:?} and {:?}", a.shape.dims(), b.shape.dims())));
        }
    }
    Ok(vec![TensorSpec { dtype: a.dtype, shape: PartialShape::new(vec![a.shape.dims()[0], b.shape.dims()[1]]) }])
}

fn transpose(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    let x = tensor_at("transpose", inputs, 0)?;
    let s = concrete_shape(x)?;
    if s.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("transpose needs a rank-2 tensor, got {:?}", s.dims())));
    }
    let (r, c) = (s.dims()[0], s.dims()[1]);
    fn tr<T: Copy>(v: &[T], r: usize, c: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(v.len());
        for j in 0..c {
            for i in 0..r {
                out.push(v[i * c + j]);
            }
        }
        out
    }
    let data = match x.data()? {
        Data::F32(v) => Data::F32(tr(v, r, c)),
        Data::F64(v) => Data::F64(tr(v, r, c)),
        Data::I32(v) => Data::I32(tr(v, r, c)),
        Data::Bool(v) => Data::Bool(tr(v, r, c)),
    };
    Ok(vec![cx.output(data, Shape::from([c, r]))])
}

fn transpose_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let x = cx.input(0);
    if x.shape.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("transpose needs a rank-2 tensor, got {:?}", x.shape.dims())));
    }
    Ok(vec![TensorSpec { dtype: x.dtype, shape: PartialShape::new(vec![x.shape.dims()[1], x.shape.dims()[0]]) }])
}

/// (outer, axis extent, inner) split of `shape` around `axis`.
fn split_axis(shape: &Shape, axis: usize) -> (usize, usize, usize) {
    let d = shape.dims();
    (d[..axis].iter().product(), d[axis], d[axis + 1..].iter().product())
}

pub(crate) fn reduced_shape<T: Clone>(dims: &[T], axis: Option<usize>, keepdims: bool, one: T) -> Vec<T> {
    match (axis, keepdims) {
        (None, false) => Vec::new(),
        (None, true) => vec![one; dims.len()],
        (Some(a), false) => dims.iter().enumerate().filter(|(i, _)| *i != a).map(|(_, d)| d.clone()).collect(),
        (Some(a), true) => dims.iter().enumerate().map(|(i, d)| if i == a { one.clone() } else { d.clone() }).collect(),
    }
}

/// Left-to-right sums, so every execution path reduces in the same order.
fn sum_along<T: Copy + Default>(v: &[T], shape: &Shape, axis: Option<usize>, add: impl Fn(T, T) -> T) -> Vec<T> {
    match axis {
        None => vec![v.iter().fold(T::default(), |acc, &x| add(acc, x))],
        Some(a) => {
            let (outer, n, inner) = split_axis(shape, a);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = T::default();
                    for k in 0..n {
                        acc = add(acc, v[(o * n + k) * inner + i]);
                    }
                    out.push(acc);
                }
            }
            out
        }
    }
}

fn reduce(cx: &KernelContext<'_>, inputs: &[Operand], mean: bool) -> Result<Vec<Tensor>> {
    let name = cx.op_name();
    let x = tensor_at(name, inputs, 0)?;
    let shape = concrete_shape(x)?;
    let axis = cx.attr_opt_int("axis")?.map(|a| norm_axis(name, a, shape.rank(), 0)).transpose()?;
    let keepdims = cx.attr_bool_or("keepdims", false)?;
    let count = match axis {
        None => shape.num_elements(),
        Some(a) => shape.dims()[a],
    };
    let data = match x.data()? {
        Data::F32(v) => {
            let mut s = sum_along(v, shape, axis, |a, b| a + b);
            if mean {
                s.iter_mut().for_each(|e| *e /= count as f32);
            }
            Data::F32(s)
        }
        Data::F64(v) => {
            let mut s = sum_along(v, shape, axis, |a, b| a + b);
            if mean {
                s.iter_mut().for_each(|e| *e /= count as f64);
            }
            Data::F64(s)
        }
        Data::I32(v) => {
            let mut s = sum_along(v, shape, axis, i32::wrapping_add);
            if mean {
                if count == 0 {
                    return Err(Error::kernel("integer mean of an empty tensor"));
                }
                s.iter_mut().for_each(|e| *e /= count as i32);
            }
            Data::I32(s)
        }
        Data::Bool(_) => return Err(Error::kernel(format!("`{name}` is not defined for bool tensors"))),
    };
    let out = Shape::new(reduced_shape(shape.dims(), axis, keepdims, 1));
    Ok(vec![cx.output(data, out)])
}

fn reduce_infer(cx: &InferContext<'_>) -> Result<Vec<TensorSpec>> {
    let x = cx.input(0);
    require_numeric(cx.op_name(), x.dtype)?;
    let axis = cx.attr_opt_int("axis")?.map(|a| norm_axis(cx.op_name(), a, x.shape.rank(), 0)).transpose()?;
    let keepdims = cx.attr_bool_or("keepdims", false)?;
    Ok(vec![TensorSpec {
        dtype: x.dtype,
        shape: PartialShape::new(reduced_shape(x.shape.dims(), axis, keepdims, Some(1))),
    }])
}

fn reduce_def(name: &str, mean: bool) -> OpDef {
    OpDef::new(name, Arity::Fixed(1), Arity::Fixed(1), move |cx, i| reduce(cx, i, mean), reduce_infer)
        .optional_attr("axis", AttrKind::Int)
        .optional_attr("keepdims", AttrKind::Bool)
}

fn identity(cx: &KernelContext<'_>, inputs: &[Operand]) -> Result<Vec<Tensor>> {
    Ok(vec![tensor_at("identity", inputs, 0)?.rehome(cx.device.clone())?])
}

pub(super) fn ops() -> Vec<OpDef> {
    vec![
        OpDef::new("identity", Arity::Fixed(1), Arity::Fixed(1), identity, same_as_input).gradient(grad::identity),
        binary_def("add", Bin::Add).gradient(grad::add).with_pointwise(Pointwise::Add),
        binary_def("sub", Bin::Sub).gradient(grad::sub).with_pointwise(Pointwise::Sub),
        binary_def("mul", Bin::Mul).gradient(grad::mul).with_pointwise(Pointwise::Mul),
        binary_def("div", Bin::Div).gradient(grad::div).with_pointwise(Pointwise::Div),
        OpDef::new("neg", Arity::Fixed(1), Arity::Fixed(1), neg, numeric_infer)
            .gradient(grad::neg)
            .with_pointwise(Pointwise::Neg),
        float_unary("exp", f32::exp, f64::exp).gradient(grad::exp).with_pointwise(Pointwise::Exp),
        float_unary("log", f32::ln, f64::ln).gradient(grad::log).with_pointwise(Pointwise::Log),
        float_unary("sigmoid", sigmoid32, sigmoid64).gradient(grad::sigmoid).with_pointwise(Pointwise::Sigmoid),
        float_unary("softplus", softplus32, softplus64).gradient(grad::softplus).with_pointwise(Pointwise::Softplus),
        OpDef::new("relu", Arity::Fixed(1), Arity::Fixed(1), relu, numeric_infer)
            .gradient(grad::relu)
            .with_pointwise(Pointwise::Relu),
        OpDef::new("greater", Arity::Fixed(2), Arity::Fixed(1), greater, greater_infer),
        OpDef::new("cast", Arity::Fixed(1), Arity::Fixed(1), cast, |cx| {
            Ok(vec![TensorSpec { dtype: cx.attr_dtype("dtype")?, shape: cx.input(0).shape.clone() }])
        })
        .attr("dtype", AttrKind::DType)
        .gradient(grad::cast),
        OpDef::new("matmul", Arity::Fixed(2), Arity::Fixed(1), matmul, matmul_infer).gradient(grad::matmul),
        OpDef::new("transpose", Arity::Fixed(1), Arity::Fixed(1), transpose, transpose_infer).gradient(grad::transpose),
        reduce_def("reduce_sum", false).gradient(grad::reduce_sum),
        reduce_def("reduce_mean", true).gradient(grad::reduce_mean),
    ]
}
