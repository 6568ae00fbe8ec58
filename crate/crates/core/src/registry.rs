//! Op schemas and the registry that both dispatch modes consult.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::device::DeviceName;
use crate::dispatch::Operand;
use crate::error::{Error, Result};
use crate::function_grad::GradientPair;
use crate::graph::{GraphFunction, LibraryScope};
use crate::runtime::Runtime;
use crate::tensor::{DType, Data, HostTensor, PartialShape, Shape, Tensor};

#[derive(Debug, Clone)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    DType(DType),
    Shape(PartialShape),
    /// Name of a graph function in the enclosing library.
    Func(String),
    /// Embedded constant value.
    Tensor(HostTensor),
}

impl PartialEq for AttrValue {
    fn eq(&self, other: &Self) -> bool {
        use AttrValue::*;
        match (self, other) {
            (Int(a), Int(b)) => a == b,
            (Float(a), Float(b)) => a.to_bits() == b.to_bits(),
            (Bool(a), Bool(b)) => a == b,
            (Str(a), Str(b)) | (Func(a), Func(b)) => a == b,
            (DType(a), DType(b)) => a == b,
            (Shape(a), Shape(b)) => a == b,
            (Tensor(a), Tensor(b)) => a.bit_eq(b),
            _ => false,
        }
    }
}

impl AttrValue {
    pub fn kind(&self) -> AttrKind {
        match self {
            AttrValue::Int(_) => AttrKind::Int,
            AttrValue::Float(_) => AttrKind::Float,
            AttrValue::Bool(_) => AttrKind::Bool,
            AttrValue::Str(_) => AttrKind::Str,
            AttrValue::DType(_) => AttrKind::DType,
            AttrValue::Shape(_) => AttrKind::Shape,
            AttrValue::Func(_) => AttrKind::Func,
            AttrValue::Tensor(_) => AttrKind::Tensor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttrKind {
    Int,
    Float,
    Bool,
    Str,
    DType,
    Shape,
    Func,
    Tensor,
}

/// Attribute map; ordered by name so encodings are canonical.
pub type Attrs = BTreeMap<String, AttrValue>;

#[derive(Debug, Clone)]
pub struct AttrSpec {
    pub name: String,
    pub kind: AttrKind,
    pub required: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    Fixed(usize),
    AtLeast(usize),
}

impl Arity {
    fn admits(self, n: usize) -> bool {
        match self {
            Arity::Fixed(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Fixed(k) => write!(f, "{k}"),
            Arity::AtLeast(k) => write!(f, "at least {k}"),
        }
    }
}

/// Static description of one operand as seen during shape inference.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorSpec {
    pub dtype: DType,
    pub shape: PartialShape,
}

impl TensorSpec {
    pub fn new(dtype: DType, shape: impl Into<PartialShape>) -> Self {
        TensorSpec { dtype, shape: shape.into() }
    }
}

#[derive(Debug, Clone)]
pub enum OperandSpec {
    Tensor(TensorSpec),
    Variable(TensorSpec),
}

impl OperandSpec {
    pub fn spec(&self) -> &TensorSpec {
        match self {
            OperandSpec::Tensor(s) | OperandSpec::Variable(s) => s,
        }
    }

    pub fn is_variable(&self) -> bool {
        matches!(self, OperandSpec::Variable(_))
    }
}

/// Attribute accessors shared by kernels, inference and gradients.
pub trait AttrLookup {
    fn attrs(&self) -> &Attrs;
    fn op_name(&self) -> &str;

    fn attr(&self, name: &str) -> Result<&AttrValue> {
        self.attrs().get(name).ok_or_else(|| Error::attr(self.op_name(), format!("missing attr `{name}`")))
    }

    fn attr_int(&self, name: &str) -> Result<i64> {
        match self.attr(name)? {
            AttrValue::Int(v) => Ok(*v),
            _ => Err(Error::attr(self.op_name(), format!("attr `{name}` is not an int"))),
        }
    }

    fn attr_opt_int(&self, name: &str) -> Result<Option<i64>> {
        match self.attrs().get(name) {
            None => Ok(None),
            Some(AttrValue::Int(v)) => Ok(Some(*v)),
            Some(_) => Err(Error::attr(self.op_name(), format!("attr `{name}` is not an int"))),
        }
    }

    fn attr_float(&self, name: &str) -> Result<f64> {
        match self.attr(name)? {
            AttrValue::Float(v) => Ok(*v),
            _ => Err(Error::attr(self.op_name(), format!("attr `{name}` is not a float"))),
        }
    }

    fn attr_bool_or(&self, name: &str, default: bool) -> Result<bool> {
        match self.attrs().get(name) {
            None => Ok(default),
            Some(AttrValue::Bool(v)) => Ok(*v),
            Some(_) => Err(Error::attr(self.op_name(), format!("attr `{name}` is not a bool"))),
        }
    }

    fn attr_dtype(&self, name: &str) -> Result<DType> {
        match self.attr(name)? {
            AttrValue::DType(v) => Ok(*v),
            _ => Err(Error::attr(self.op_name(), format!("attr `{name}` is not a dtype"))),
        }
    }

    fn attr_shape(&self, name: &str) -> Result<&PartialShape> {
        match self.attr(name)? {
            AttrValue::Shape(v) => Ok(v),
            _ => Err(Error::attr(self.op_name(), format!("attr `{name}` is not a shape"))),
        }
    }

    fn attr_func(&self, name: &str) -> Result<&str> {
        match self.attr(name)? {
            AttrValue::Func(v) => Ok(v),
            _ => Err(Error::attr(self.op_name(), format!("attr `{name}` is not a function name"))),
        }
    }

    fn attr_tensor(&self, name: &str) -> Result<&HostTensor> {
        match self.attr(name)? {
            AttrValue::Tensor(v) => Ok(v),
            _ => Err(Error::attr(self.op_name(), format!("attr `{name}` is not a tensor"))),
        }
    }
}

/// Everything a kernel may touch while it runs.
pub struct KernelContext<'a> {
    pub(crate) rt: &'a Runtime,
    pub(crate) op: &'a str,
    pub attrs: &'a Attrs,
    pub device: &'a DeviceName,
    pub(crate) library: Option<&'a LibraryScope<'a>>,
}

impl AttrLookup for KernelContext<'_> {
    fn attrs(&self) -> &Attrs {
        self.attrs
    }
    fn op_name(&self) -> &str {
        self.op
    }
}

impl KernelContext<'_> {
    pub fn output(&self, data: Data, shape: Shape) -> Tensor {
        Tensor::from_parts(data, shape, self.device.clone())
    }

    pub fn runtime(&self) -> &Runtime {
        self.rt
    }

    pub(crate) fn resolve_function(&self, name: &str) -> Result<Arc<GraphFunction>> {
        self.library
            .and_then(|l| l.resolve(name))
            .or_else(|| self.rt.function(name))
            .ok_or_else(|| Error::MissingFunction(name.to_string()))
    }
}

/// Inputs to static shape inference while recording a node.
pub struct InferContext<'a> {
    pub(crate) rt: &'a Runtime,
    pub(crate) op: &'a str,
    pub inputs: &'a [OperandSpec],
    pub attrs: &'a Attrs,
    pub(crate) resolve: &'a dyn Fn(&str) -> Option<Arc<GraphFunction>>,
}

impl AttrLookup for InferContext<'_> {
    fn attrs(&self) -> &Attrs {
        self.attrs
    }
    fn op_name(&self) -> &str {
        self.op
    }
}

impl InferContext<'_> {
    pub fn input(&self, i: usize) -> &TensorSpec {
        self.inputs[i].spec()
    }

    pub fn runtime(&self) -> &Runtime {
        self.rt
    }

    pub(crate) fn resolve_function(&self, name: &str) -> Result<Arc<GraphFunction>> {
        (self.resolve)(name).ok_or_else(|| Error::MissingFunction(name.to_string()))
    }
}

/// What a gradient function sees of one recorded op.
pub struct GradContext<'a> {
    pub(crate) op: &'a str,
    pub inputs: &'a [Operand],
    pub outputs: &'a [Tensor],
    pub upstream: &'a [Option<Tensor>],
    pub attrs: &'a Attrs,
    pub saved: &'a [Tensor],
    pub(crate) pair: Option<&'a Arc<GradientPair>>,
}

impl AttrLookup for GradContext<'_> {
    fn attrs(&self) -> &Attrs {
        self.attrs
    }
    fn op_name(&self) -> &str {
        self.op
    }
}

impl GradContext<'_> {
    /// Tensor value of input `i`; variables are not tensors here.
    pub fn input(&self, i: usize) -> Result<&Tensor> {
        match &self.inputs[i] {
            Operand::Tensor(t) => Ok(t),
            Operand::Variable(_) => Err(Error::kernel(format!("input {i} of `{}` is a variable", self.op))),
        }
    }

    /// Upstream gradient for output `i`, materializing zeros when absent.
    pub fn upstream_or_zeros(&self, i: usize) -> Result<Tensor> {
        match &self.upstream[i] {
            Some(g) => Ok(g.clone()),
            None => crate::ops::zeros_like(&self.outputs[i]),
        }
    }
}

pub type KernelFn = Arc<dyn Fn(&KernelContext<'_>, &[Operand]) -> Result<Vec<Tensor>> + Send + Sync>;
pub type InferFn = Arc<dyn Fn(&InferContext<'_>) -> Result<Vec<TensorSpec>> + Send + Sync>;
/// Maps upstream gradients to one gradient per input, by dispatching ops.
pub type GradientFn = Arc<dyn Fn(&GradContext<'_>) -> Result<Vec<Option<Tensor>>> + Send + Sync>;

/// Schema of a primitive op plus its kernel, shape rule and gradient.
#[derive(Clone)]
pub struct OpDef {
    pub name: String,
    pub inputs: Arity,
    pub outputs: Arity,
    pub attrs: Vec<AttrSpec>,
    pub stateful: bool,
    pub kernel: KernelFn,
    pub infer: InferFn,
    pub gradient: Option<GradientFn>,
    /// Set only by built-in float elementwise kernels; lets the executor
    /// run single-consumer chains of them over one reused buffer.
    pub(crate) pointwise: Option<crate::kernels::Pointwise>,
}

impl fmt::Debug for OpDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpDef")
            .field("name", &self.name)
            .field("inputs", &self.inputs)
            .field("outputs", &self.outputs)
            .field("attrs", &self.attrs)
            .field("stateful", &self.stateful)
            .field("differentiable", &self.gradient.is_some())
            .finish()
    }
}

impl OpDef {
    pub fn new(
        name: &str,
        inputs: Arity,
        outputs: Arity,
        kernel: impl Fn(&KernelContext<'_>, &[Operand]) -> Result<Vec<Tensor>> + Send + Sync + 'static,
        infer: impl Fn(&InferContext<'_>) -> Result<Vec<TensorSpec>> + Send + Sync + 'static,
    ) -> Self {
        OpDef {
            name: name.to_string(),
            inputs,
            outputs,
            attrs: Vec::new(),
            stateful: false,
            kernel: Arc::new(kernel),
            infer: Arc::new(infer),
            gradient: None,
            pointwise: None,
        }
    }

    pub(crate) fn with_pointwise(mut self, p: crate::kernels::Pointwise) -> Self {
        self.pointwise = Some(p);
        self
    }

    pub fn attr(mut self, name: &str, kind: AttrKind) -> Self {
        self.attrs.push(AttrSpec { name: name.to_string(), kind, required: true });
        self
    }

    pub fn optional_attr(mut self, name: &str, kind: AttrKind) -> Self {
        self.attrs.push(AttrSpec { name: name.to_string(), kind, required: false });
        self
    }

    pub fn stateful(mut self) -> Self {
        self.stateful = true;
        self
    }

    pub fn gradient(
        mut self,
        g: impl Fn(&GradContext<'_>) -> Result<Vec<Option<Tensor>>> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn is_differentiable(&self) -> bool {
        self.gradient.is_some()
    }

    /// Ops taking function-name attrs run nested graphs.
    pub fn is_higher_order(&self) -> bool {
        self.attrs.iter().any(|a| a.kind == AttrKind::Func)
    }

    pub(crate) fn validate(&self, n_inputs: usize, attrs: &Attrs) -> Result<()> {
        if !self.inputs.admits(n_inputs) {
            return Err(Error::ArityMismatch {
                op: self.name.clone(),
                expected: self.inputs.to_string(),
                actual: n_inputs,
            });
        }
        for spec in &self.attrs {
            match attrs.get(&spec.name) {
                None if spec.required => return Err(Error::attr(&self.name, format!("missing attr `{}`", spec.name))),
                Some(v) if v.kind() != spec.kind => {
                    return Err(Error::attr(
                        &self.name,
                        format!("attr `{}` expects {:?}, got {:?}", spec.name, spec.kind, v.kind()),
                    ))
                }
                _ => {}
            }
        }
        if let Some(extra) = attrs.keys().find(|k| !self.attrs.iter().any(|s| &s.name == *k)) {
            return Err(Error::attr(&self.name, format!("unexpected attr `{extra}`")));
        }
        Ok(())
    }
}

/// Name-indexed set of op definitions.
#[derive(Clone, Default)]
pub struct Registry {
    ops: Vec<Arc<OpDef>>,
    index: HashMap<String, usize>,
}

impl Registry {
    pub fn empty() -> Self {
        Registry::default()
    }

    /// Registry preloaded with the built-in kernel table.
    pub fn builtin() -> Self {
        let mut r = Registry::empty();
        for def in crate::kernels::builtin_ops() {
            r.register(def).expect("built-in op names are unique");
        }
        r
    }

    pub fn register(&mut self, def: OpDef) -> Result<()> {
        if self.index.contains_key(&def.name) {
            return Err(Error::DuplicateOp(def.name));
        }
        self.index.insert(def.name.clone(), self.ops.len());
        self.ops.push(Arc::new(def));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<OpDef>> {
        self.index.get(name).map(|&i| &self.ops[i])
    }

    pub fn ops(&self) -> &[Arc<OpDef>] {
        &self.ops
    }
}

/// Op definitions of the current runtime.
pub fn kernel_table() -> Vec<Arc<OpDef>> {
    Runtime::current().registry().ops().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::RuntimeOptions;

    fn noop_def(name: &str) -> OpDef {
        OpDef::new(name, Arity::Fixed(2), Arity::Fixed(1), |_, _| Ok(vec![]), |_| Ok(vec![]))
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut r = Registry::empty();
        r.register(noop_def("my_matmul")).unwrap();
        assert!(r.get("my_matmul").is_some());
        assert_eq!(r.register(noop_def("my_matmul")).unwrap_err(), Error::DuplicateOp("my_matmul".into()));
        let mut b = Registry::builtin();
        assert!(matches!(b.register(noop_def("matmul")), Err(Error::DuplicateOp(_))));
    }

    #[test]
    fn builtin_table_has_required_ops() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let table = kernel_table();
        let names: Vec<&str> = table.iter().map(|d| d.name.as_str()).collect();
        for required in [
            "constant",
            "identity",
            "add",
            "sub",
            "mul",
            "div",
            "neg",
            "exp",
            "log",
            "matmul",
            "relu",
            "softplus",
            "reduce_sum",
            "reduce_mean",
            "reshape",
            "eye",
            "random_normal",
            "dropout",
            "read_variable",
            "assign_variable",
            "assign_add_variable",
            "call_function",
            "host_call",
            "cond",
            "while_loop",
        ] {
            assert!(names.contains(&required), "missing {required}");
        }
        for stateful in
            ["read_variable", "assign_variable", "assign_add_variable", "random_normal", "dropout", "host_call"]
        {
            assert!(rt.registry().get(stateful).unwrap().stateful, "{stateful} must be stateful");
        }
        assert!(!rt.registry().get("matmul").unwrap().stateful);
    }

    #[test]
    fn validation_errors() {
        let r = Registry::builtin();
        let reshape = r.get("reshape").unwrap();
        assert!(matches!(reshape.validate(2, &Attrs::new()), Err(Error::ArityMismatch { .. })));
        assert!(matches!(reshape.validate(1, &Attrs::new()), Err(Error::AttrMismatch { .. })));
        let mut bad = Attrs::new();
        bad.insert("shape".into(), AttrValue::Int(3));
        assert!(matches!(reshape.validate(1, &bad), Err(Error::AttrMismatch { .. })));
        let mut good = Attrs::new();
        good.insert("shape".into(), AttrValue::Shape(PartialShape::from([3])));
        reshape.validate(1, &good).unwrap();
        good.insert("bogus".into(), AttrValue::Int(1));
        assert!(matches!(reshape.validate(1, &good), Err(Error::AttrMismatch { .. })));
    }
}
