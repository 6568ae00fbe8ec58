//! Dense tensor values, dtypes, shapes and broadcasting.
//!
//! A [`Tensor`] is an immutable handle. Concrete tensors own a row-major
//! buffer; symbolic tensors only name a value inside an open trace.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use smallvec::SmallVec;

use crate::device::DeviceName;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    Float32,
    Float64,
    Int32,
    Bool,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::Float32, DType::Float64, DType::Int32, DType::Bool];

    /// Width in bytes of one element in the serialized layout.
    pub fn width(self) -> usize {
        match self {
            DType::Float32 | DType::Int32 => 4,
            DType::Float64 => 8,
            DType::Bool => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::Float32 | DType::Float64)
    }

    pub fn code(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Float64 => 1,
            DType::Int32 => 2,
            DType::Bool => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        DType::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Float64 => "float64",
            DType::Int32 => "int32",
            DType::Bool => "bool",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fully known extents, stored inline up to rank 4.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct Shape(SmallVec<[usize; 4]>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(SmallVec::from_vec(dims.into()))
    }

    pub fn scalar() -> Self {
        Shape(SmallVec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.0.iter().product()
    }
}

impl From<Vec<usize>> for Shape {
    fn from(dims: Vec<usize>) -> Self {
        Shape(SmallVec::from_vec(dims))
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape(SmallVec::from_slice(dims))
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(dims: [usize; N]) -> Self {
        Shape(SmallVec::from_slice(&dims))
    }
}

/// Extents where some dims may be unknown (`None`), used for staged
/// placeholders that accept any extent along a dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PartialShape(Vec<Option<usize>>);

impl PartialShape {
    pub fn new(dims: impl Into<Vec<Option<usize>>>) -> Self {
        PartialShape(dims.into())
    }

    pub fn dims(&self) -> &[Option<usize>] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn is_fully_defined(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }

    pub fn to_shape(&self) -> Option<Shape> {
        self.0.iter().copied().collect::<Option<SmallVec<_>>>().map(Shape)
    }

    pub fn num_elements(&self) -> Option<usize> {
        self.to_shape().map(|s| s.num_elements())
    }

    /// True when `shape` is one of the shapes this pattern admits.
    pub fn admits(&self, shape: &Shape) -> bool {
        self.rank() == shape.rank() && self.0.iter().zip(shape.dims()).all(|(p, d)| p.is_none_or(|p| p == *d))
    }

    /// True when both describe the same extents and neither has wildcards.
    pub fn provably_equal(&self, other: &PartialShape) -> bool {
        self.is_fully_defined() && self == other
    }
}

impl From<&Shape> for PartialShape {
    fn from(s: &Shape) -> Self {
        PartialShape(s.0.iter().map(|&d| Some(d)).collect())
    }
}

impl From<Shape> for PartialShape {
    fn from(s: Shape) -> Self {
        PartialShape::from(&s)
    }
}

impl<const N: usize> From<[Option<usize>; N]> for PartialShape {
    fn from(dims: [Option<usize>; N]) -> Self {
        PartialShape(dims.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for PartialShape {
    fn from(dims: [usize; N]) -> Self {
        PartialShape(dims.iter().map(|&d| Some(d)).collect())
    }
}

/// Right-aligned broadcasting of two concrete shapes.
pub fn broadcast_shapes(a: &Shape, b: &Shape) -> Result<Shape> {
    let rank = a.rank().max(b.rank());
    let mut out: SmallVec<[usize; 4]> = smallvec::smallvec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a.dims(), rank, i).unwrap_or(1);
        let db = dim_from_right(b.dims(), rank, i).unwrap_or(1);
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::BroadcastIncompatible { a: PartialShape::from(a).0, b: PartialShape::from(b).0 });
        };
    }
    Ok(Shape(out))
}

/// Broadcasting over partially known shapes. An unknown dim paired with a
/// known dim greater than one resolves to the known dim.
pub fn broadcast_partial(a: &PartialShape, b: &PartialShape) -> Result<PartialShape> {
    let rank = a.rank().max(b.rank());
    let mut out = vec![None; rank];
    for i in 0..rank {
        let da = dim_from_right(a.dims(), rank, i).unwrap_or(Some(1));
        let db = dim_from_right(b.dims(), rank, i).unwrap_or(Some(1));
        out[i] = match (da, db) {
            (Some(x), Some(y)) if x == y || y == 1 => Some(x),
            (Some(1), Some(y)) => Some(y),
            (Some(_), Some(_)) => return Err(Error::BroadcastIncompatible { a: a.0.clone(), b: b.0.clone() }),
            (Some(x), None) | (None, Some(x)) if x > 1 => Some(x),
            _ => None,
        };
    }
    Ok(PartialShape(out))
}

fn dim_from_right<T: Copy>(dims: &[T], rank: usize, i: usize) -> Option<T> {
    let offset = rank - dims.len();
    if i < offset {
        None
    } else {
        Some(dims[i - offset])
    }
}

/// Typed row-major element storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    Bool(Vec<bool>),
}

impl Data {
    pub fn dtype(&self) -> DType {
        match self {
            Data::F32(_) => DType::Float32,
            Data::F64(_) => DType::Float64,
            Data::I32(_) => DType::Int32,
            Data::Bool(_) => DType::Bool,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::I32(v) => v.len(),
            Data::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, len: usize) -> Data {
        match dtype {
            DType::Float32 => Data::F32(vec![0.0; len]),
            DType::Float64 => Data::F64(vec![0.0; len]),
            DType::Int32 => Data::I32(vec![0; len]),
            DType::Bool => Data::Bool(vec![false; len]),
        }
    }

    pub fn filled(dtype: DType, len: usize, value: f64) -> Data {
        match dtype {
            DType::Float32 => Data::F32(vec![value as f32; len]),
            DType::Float64 => Data::F64(vec![value; len]),
            DType::Int32 => Data::I32(vec![value as i32; len]),
            DType::Bool => Data::Bool(vec![value != 0.0; len]),
        }
    }

    /// Lossy view of the elements as f64, for host-side inspection.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Data::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::F64(v) => v.clone(),
            Data::I32(v) => v.iter().map(|&x| x as f64).collect(),
            Data::Bool(v) => v.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Bitwise equality (NaN payloads and signed zeros distinguished).
    pub fn bit_eq(&self, other: &Data) -> bool {
        match (self, other) {
            (Data::F32(a), Data::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Data::F64(a), Data::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Data::I32(a), Data::I32(b)) => a == b,
            (Data::Bool(a), Data::Bool(b)) => a == b,
            _ => false,
        }
    }

    /// Little-endian raw bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Data::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Data::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Data::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Data::Bool(v) => v.iter().map(|&x| x as u8).collect(),
        }
    }

    pub fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Option<Data> {
        if bytes.len() % dtype.width() != 0 {
            return None;
        }
        Some(match dtype {
            DType::Float32 => {
                Data::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::Float64 => {
                Data::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::Int32 => {
                Data::I32(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::Bool => Data::Bool(bytes.iter().map(|&b| b != 0).collect()),
        })
    }
}

/// A host-side copy of a tensor's contents.
#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor {
    pub data: Data,
    pub shape: Shape,
}

impl HostTensor {
    pub fn new(data: Data, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.num_elements() {
            return Err(Error::LengthMismatch { expected: shape.num_elements(), actual: data.len() });
        }
        Ok(HostTensor { data, shape })
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn bit_eq(&self, other: &HostTensor) -> bool {
        self.shape == other.shape && self.data.bit_eq(&other.data)
    }
}

/// Identity shared by tensors and variables. Tapes and traces key on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueId(pub u64);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_id() -> ValueId {
    ValueId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

/// Reference to a value inside an open trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum TraceRef {
    Input(u32),
    Node(u32, u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct SymbolicRef {
    pub trace: u64,
    pub value: TraceRef,
}

#[derive(Debug)]
pub(crate) enum Payload {
    Concrete { shape: Shape, data: Arc<Data> },
    Symbolic { shape: PartialShape, sym: SymbolicRef },
}

#[derive(Debug)]
struct TensorInner {
    id: ValueId,
    dtype: DType,
    device: DeviceName,
    payload: Payload,
}

/// Immutable tensor handle bound to a device.
#[derive(Clone)]
pub struct Tensor(Arc<TensorInner>);

impl Tensor {
    pub(crate) fn concrete(shape: Shape, data: Arc<Data>, device: DeviceName) -> Tensor {
        debug_assert_eq!(shape.num_elements(), data.len());
        Tensor(Arc::new(TensorInner {
            id: next_id(),
            dtype: data.dtype(),
            device,
            payload: Payload::Concrete { shape, data },
        }))
    }

    pub(crate) fn from_parts(data: Data, shape: Shape, device: DeviceName) -> Tensor {
        Tensor::concrete(shape, Arc::new(data), device)
    }

    pub(crate) fn symbolic(dtype: DType, shape: PartialShape, sym: SymbolicRef, device: DeviceName) -> Tensor {
        Tensor(Arc::new(TensorInner { id: next_id(), dtype, device, payload: Payload::Symbolic { shape, sym } }))
    }

    /// Copies host data into a new tensor on the default device.
    pub fn from_host(host: HostTensor) -> Tensor {
        Tensor::from_parts(host.data, host.shape, DeviceName::default_cpu())
    }

    /// Builds a tensor from a flat numeric sequence, converting each value to
    /// `dtype`. Int32 targets reject non-integral or out-of-range values.
    pub fn from_values(values: &[f64], shape: impl Into<Shape>, dtype: DType) -> Result<Tensor> {
        let shape = shape.into();
        if values.len() != shape.num_elements() {
            return Err(Error::LengthMismatch { expected: shape.num_elements(), actual: values.len() });
        }
        let data = match dtype {
            DType::Float32 => Data::F32(values.iter().map(|&v| v as f32).collect()),
            DType::Float64 => Data::F64(values.to_vec()),
            DType::Int32 => Data::I32(
                values
                    .iter()
                    .map(|&v| {
                        if v.fract() != 0.0 || v < i32::MIN as f64 || v > i32::MAX as f64 || v.is_nan() {
                            Err(Error::NarrowingOverflow { value: v, dtype })
                        } else {
                            Ok(v as i32)
                        }
                    })
                    .collect::<Result<_>>()?,
            ),
            DType::Bool => Data::Bool(values.iter().map(|&v| v != 0.0).collect()),
        };
        Ok(Tensor::from_parts(data, shape, DeviceName::default_cpu()))
    }

    pub fn from_data(data: Data, shape: impl Into<Shape>) -> Result<Tensor> {
        Ok(Tensor::from_host(HostTensor::new(data, shape)?))
    }

    pub fn from_f32(values: Vec<f32>, shape: impl Into<Shape>) -> Result<Tensor> {
        Tensor::from_data(Data::F32(values), shape)
    }

    pub fn from_f64(values: Vec<f64>, shape: impl Into<Shape>) -> Result<Tensor> {
        Tensor::from_data(Data::F64(values), shape)
    }

    pub fn scalar_f32(v: f32) -> Tensor {
        Tensor::from_parts(Data::F32(vec![v]), Shape::scalar(), DeviceName::default_cpu())
    }

    pub fn scalar_f64(v: f64) -> Tensor {
        Tensor::from_parts(Data::F64(vec![v]), Shape::scalar(), DeviceName::default_cpu())
    }

    pub fn scalar_i32(v: i32) -> Tensor {
        Tensor::from_parts(Data::I32(vec![v]), Shape::scalar(), DeviceName::default_cpu())
    }

    pub fn scalar_bool(v: bool) -> Tensor {
        Tensor::from_parts(Data::Bool(vec![v]), Shape::scalar(), DeviceName::default_cpu())
    }

    pub fn id(&self) -> ValueId {
        self.0.id
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn device(&self) -> &DeviceName {
        &self.0.device
    }

    pub fn is_symbolic(&self) -> bool {
        matches!(self.0.payload, Payload::Symbolic { .. })
    }

    pub fn shape(&self) -> PartialShape {
        match &self.0.payload {
            Payload::Concrete { shape, .. } => PartialShape::from(shape),
            Payload::Symbolic { shape, .. } => shape.clone(),
        }
    }

    pub fn rank(&self) -> usize {
        match &self.0.payload {
            Payload::Concrete { shape, .. } => shape.rank(),
            Payload::Symbolic { shape, .. } => shape.rank(),
        }
    }

    pub fn concrete_shape(&self) -> Option<&Shape> {
        match &self.0.payload {
            Payload::Concrete { shape, .. } => Some(shape),
            Payload::Symbolic { .. } => None,
        }
    }

    pub(crate) fn data(&self) -> Result<&Data> {
        match &self.0.payload {
            Payload::Concrete { data, .. } => Ok(data),
            Payload::Symbolic { .. } => Err(Error::SymbolicTensor),
        }
    }

    pub(crate) fn shared_data(&self) -> Result<(&Shape, &Arc<Data>)> {
        match &self.0.payload {
            Payload::Concrete { shape, data } => Ok((shape, data)),
            Payload::Symbolic { .. } => Err(Error::SymbolicTensor),
        }
    }

    pub(crate) fn symbolic_ref(&self) -> Option<SymbolicRef> {
        match &self.0.payload {
            Payload::Symbolic { sym, .. } => Some(*sym),
            Payload::Concrete { .. } => None,
        }
    }

    /// Same payload under a fresh identity and possibly another device.
    pub(crate) fn rehome(&self, device: DeviceName) -> Result<Tensor> {
        let (shape, data) = self.shared_data()?;
        Ok(Tensor::concrete(shape.clone(), Arc::clone(data), device))
    }

    /// Fetches a row-major copy of the contents.
    pub fn to_host(&self) -> Result<HostTensor> {
        let (shape, data) = self.shared_data()?;
        Ok(HostTensor { data: (**data).clone(), shape: shape.clone() })
    }

    pub fn to_f64_vec(&self) -> Result<Vec<f64>> {
        Ok(self.data()?.to_f64_vec())
    }

    /// Value of a one-element tensor as f64.
    pub fn to_scalar(&self) -> Result<f64> {
        let data = self.data()?;
        if data.len() != 1 {
            return Err(Error::ShapeMismatch(format!("expected a single element, tensor holds {}", data.len())));
        }
        Ok(data.to_f64_vec()[0])
    }

    /// Payload equality, bit for bit, ignoring identity and device.
    pub fn bit_eq(&self, other: &Tensor) -> Result<bool> {
        let (sa, da) = self.shared_data()?;
        let (sb, db) = other.shared_data()?;
        Ok(sa == sb && da.bit_eq(db))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0.payload {
            Payload::Concrete { shape, data } => {
                write!(
                    f,
                    "Tensor({:?}, shape={:?}, dtype={}, device={})",
                    data,
                    shape.dims(),
                    self.0.dtype,
                    self.0.device
                )
            }
            Payload::Symbolic { shape, sym } => write!(
                f,
                "Tensor(<symbolic {:?} in trace {}>, shape={:?}, dtype={})",
                sym.value,
                sym.trace,
                shape.dims(),
                self.0.dtype
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn from_values_builds_column_vector() {
        let t = Tensor::from_values(&[2.0, -2.0], [2, 1], DType::Float32).unwrap();
        let host = t.to_host().unwrap();
        assert_eq!(host.shape, Shape::from([2, 1]));
        assert_eq!(host.data, Data::F32(vec![2.0, -2.0]));
        assert_eq!(t.device(), &DeviceName::default_cpu());
    }

    #[test]
    fn empty_tensor_has_no_elements() {
        let t = Tensor::from_values(&[], [0], DType::Float32).unwrap();
        assert_eq!(t.to_host().unwrap().data.len(), 0);
        assert_eq!(t.concrete_shape().unwrap().num_elements(), 0);
    }

    #[test]
    fn scalar_holds_one_element() {
        let t = Tensor::from_values(&[7.0], Shape::scalar(), DType::Int32).unwrap();
        assert_eq!(t.to_host().unwrap().data, Data::I32(vec![7]));
        assert!(t.concrete_shape().unwrap().is_scalar());
    }

    #[test]
    fn length_and_narrowing_errors() {
        assert_eq!(
            Tensor::from_values(&[1.0, 2.0], [3], DType::Float32).unwrap_err(),
            Error::LengthMismatch { expected: 3, actual: 2 }
        );
        assert!(matches!(Tensor::from_values(&[3e10], [1], DType::Int32), Err(Error::NarrowingOverflow { .. })));
        assert!(matches!(Tensor::from_values(&[0.5], [1], DType::Int32), Err(Error::NarrowingOverflow { .. })));
    }

    #[test]
    fn broadcasting_examples() {
        assert_eq!(broadcast_shapes(&[3, 1].into(), &[1, 4].into()).unwrap(), Shape::from([3, 4]));
        assert_eq!(broadcast_shapes(&[5].into(), &Shape::scalar()).unwrap(), Shape::from([5]));
        assert!(matches!(broadcast_shapes(&[2, 3].into(), &[4, 3].into()), Err(Error::BroadcastIncompatible { .. })));
    }

    #[test]
    fn partial_broadcast_resolves_wildcards() {
        let a = PartialShape::new(vec![None, Some(5)]);
        let b = PartialShape::from([5]);
        assert_eq!(broadcast_partial(&a, &b).unwrap(), PartialShape::new(vec![None, Some(5)]));
        let c = PartialShape::new(vec![Some(3), Some(1)]);
        assert_eq!(
            broadcast_partial(&c, &PartialShape::new(vec![None])).unwrap(),
            PartialShape::new(vec![Some(3), None])
        );
    }

    fn arb_data() -> impl Strategy<Value = (Data, Vec<usize>)> {
        let dims = prop::collection::vec(0usize..4, 0..4);
        dims.prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            let d = dims.clone();
            prop_oneof![
                prop::collection::vec(any::<f32>(), n).prop_map(Data::F32),
                prop::collection::vec(any::<f64>(), n).prop_map(Data::F64),
                prop::collection::vec(any::<i32>(), n).prop_map(Data::I32),
                prop::collection::vec(any::<bool>(), n).prop_map(Data::Bool),
            ]
            .prop_map(move |data| (data, d.clone()))
        })
    }

    proptest! {
        #[test]
        fn host_round_trip_is_bit_exact((data, dims) in arb_data()) {
            let t = Tensor::from_data(data.clone(), dims.clone()).unwrap();
            let host = t.to_host().unwrap();
            prop_assert!(host.data.bit_eq(&data));
            prop_assert_eq!(host.shape.dims(), &dims[..]);
            prop_assert_eq!(host.dtype(), data.dtype());
        }

        #[test]
        fn broadcast_commutes_with_scalar_identity(
            a in prop::collection::vec(1usize..4, 0..4),
            b in prop::collection::vec(1usize..4, 0..4),
        ) {
            let (a, b) = (Shape::new(a), Shape::new(b));
            let ab = broadcast_shapes(&a, &b);
            let ba = broadcast_shapes(&b, &a);
            prop_assert_eq!(ab.is_ok(), ba.is_ok());
            if let (Ok(x), Ok(y)) = (ab, ba) {
                prop_assert_eq!(x, y);
            }
            prop_assert_eq!(broadcast_shapes(&a, &Shape::scalar()).unwrap(), a);
        }
    }
}
