//! Staged functions: host functions traced into graph functions and cached
//! by the abstract signature of their arguments.

use std::any::Any;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use crate::context;
use crate::device::DeviceName;
use crate::dispatch::Operand;
use crate::error::{Error, Result};
use crate::graph::{optimize, GraphFunction};
use crate::ops;
use crate::registry::TensorSpec;
use crate::runtime::Runtime;
use crate::tensor::{DType, Tensor, ValueId};
use crate::trace::{run_in_trace, TraceState};
use crate::variable::{Variable, WeakVariable};

/// One argument of a staged call. Tensors and variables become graph
/// inputs; every other kind specializes the trace by value.
#[derive(Clone)]
pub enum Arg {
    Tensor(Tensor),
    Variable(Variable),
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
    List(Vec<Arg>),
    None,
    /// A host object with no canonical encoding; rejected by key inference.
    Opaque(Arc<dyn Any + Send + Sync>),
}

impl Arg {
    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            Arg::Tensor(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_variable(&self) -> Option<&Variable> {
        match self {
            Arg::Variable(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Arg::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Arg::Float(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Arg::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Arg::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Debug for Arg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arg::Tensor(t) => write!(f, "Tensor({} {:?})", t.dtype(), t.shape().dims()),
            Arg::Variable(v) => write!(f, "{v:?}"),
            Arg::Int(i) => write!(f, "Int({i})"),
            Arg::Float(x) => write!(f, "Float({x})"),
            Arg::Bool(b) => write!(f, "Bool({b})"),
            Arg::Str(s) => write!(f, "Str({s:?})"),
            Arg::List(items) => f.debug_list().entries(items).finish(),
            Arg::None => write!(f, "None"),
            Arg::Opaque(_) => write!(f, "Opaque"),
        }
    }
}

impl From<Tensor> for Arg {
    fn from(t: Tensor) -> Self {
        Arg::Tensor(t)
    }
}

impl From<&Tensor> for Arg {
    fn from(t: &Tensor) -> Self {
        Arg::Tensor(t.clone())
    }
}

impl From<Variable> for Arg {
    fn from(v: Variable) -> Self {
        Arg::Variable(v)
    }
}

impl From<&Variable> for Arg {
    fn from(v: &Variable) -> Self {
        Arg::Variable(v.clone())
    }
}

impl From<i64> for Arg {
    fn from(i: i64) -> Self {
        Arg::Int(i)
    }
}

impl From<f64> for Arg {
    fn from(x: f64) -> Self {
        Arg::Float(x)
    }
}

impl From<bool> for Arg {
    fn from(b: bool) -> Self {
        Arg::Bool(b)
    }
}

impl From<&str> for Arg {
    fn from(s: &str) -> Self {
        Arg::Str(s.to_string())
    }
}

/// Encoding of one argument. Floats are keyed by bit pattern, so `0.0` and
/// `-0.0` are distinct and NaN equals itself.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ArgKey {
    Tensor { dtype: DType, shape: Vec<Option<usize>> },
    Variable { dtype: DType, shape: Vec<usize>, id: ValueId },
    Int(i64),
    Float(u64),
    Bool(bool),
    Str(String),
    List(Vec<ArgKey>),
    None,
}

/// Abstract signature of a call: what a trace may specialize on.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceKey {
    pub args: Vec<ArgKey>,
    pub device: Option<DeviceName>,
}

fn encode(arg: &Arg, top: usize, nested: bool) -> Result<ArgKey> {
    Ok(match arg {
        Arg::Tensor(_) | Arg::Variable(_) if nested => return Err(Error::UnencodableArgument(top)),
        Arg::Tensor(t) => ArgKey::Tensor { dtype: t.dtype(), shape: t.shape().dims().to_vec() },
        Arg::Variable(v) => ArgKey::Variable { dtype: v.dtype(), shape: v.shape().dims().to_vec(), id: v.id() },
        Arg::Int(i) => ArgKey::Int(*i),
        Arg::Float(x) => ArgKey::Float(x.to_bits()),
        Arg::Bool(b) => ArgKey::Bool(*b),
        Arg::Str(s) => ArgKey::Str(s.clone()),
        Arg::List(items) => ArgKey::List(items.iter().map(|a| encode(a, top, true)).collect::<Result<_>>()?),
        Arg::None => ArgKey::None,
        Arg::Opaque(_) => return Err(Error::UnencodableArgument(top)),
    })
}

/// Deterministic key of `args` under the current device scope. Tensor
/// payloads never enter the key.
pub fn infer_trace_key(args: &[Arg]) -> Result<TraceKey> {
    let args = args.iter().enumerate().map(|(i, a)| encode(a, i, false)).collect::<Result<_>>()?;
    Ok(TraceKey { args, device: context::current_device() })
}

enum Capture {
    Tensor(Tensor),
    /// Weak, so a staged function does not keep a variable alive.
    Variable(WeakVariable),
}

struct Concrete {
    graph: Arc<GraphFunction>,
    captures: Vec<Capture>,
}

/// Tracing bookkeeping, guarded by one lock so a key is traced at most once
/// and the state-creation check sees traces in order.
#[derive(Default)]
struct TraceBook {
    traced: bool,
    /// Strong handles to variables created by the first trace.
    variables: Vec<Variable>,
}

type Target = dyn Fn(&[Arg]) -> Result<Vec<Tensor>> + Send + Sync;

/// A host function staged on demand. Each distinct [`TraceKey`] gets its own
/// graph function; calls with an equal key reuse it without tracing.
pub struct PolymorphicFunction {
    name: String,
    target: Box<Target>,
    pinned: Option<Vec<TensorSpec>>,
    cache: RwLock<HashMap<TraceKey, Arc<Concrete>>>,
    book: Mutex<TraceBook>,
}

impl fmt::Debug for PolymorphicFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolymorphicFunction")
            .field("name", &self.name)
            .field("pinned", &self.pinned)
            .field("cache_size", &self.cache_size())
            .finish()
    }
}

/// Stages `f`. Nothing is traced until the first call.
pub fn stage(name: &str, f: impl Fn(&[Arg]) -> Result<Vec<Tensor>> + Send + Sync + 'static) -> PolymorphicFunction {
    PolymorphicFunction {
        name: name.to_string(),
        target: Box::new(f),
        pinned: None,
        cache: RwLock::new(HashMap::new()),
        book: Mutex::new(TraceBook::default()),
    }
}

/// Stages `f` for tensor arguments matching `signature`, whose unknown
/// extents make a single shape-polymorphic graph function.
pub fn stage_with_signature(
    name: &str,
    signature: Vec<TensorSpec>,
    f: impl Fn(&[Arg]) -> Result<Vec<Tensor>> + Send + Sync + 'static,
) -> PolymorphicFunction {
    PolymorphicFunction { pinned: Some(signature), ..stage(name, f) }
}

/// Errors raised by the traced function surface as staging failures.
fn staging_error(e: Error) -> Error {
    match e {
        Error::Staging(_) | Error::VariableCreation(_) | Error::SignatureMismatch(_) => e,
        other => Error::Staging(other.to_string()),
    }
}

impl PolymorphicFunction {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pinned_signature(&self) -> Option<&[TensorSpec]> {
        self.pinned.as_deref()
    }

    /// Number of cached graph functions.
    pub fn cache_size(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    /// Variables created by the first trace, kept alive by this function.
    pub fn created_variables(&self) -> Vec<Variable> {
        self.book.lock().unwrap().variables.clone()
    }

    /// Key a call with `args` would use.
    pub fn trace_key(&self, args: &[Arg]) -> Result<TraceKey> {
        match &self.pinned {
            None => infer_trace_key(args),
            Some(sig) => {
                check_pinned(sig, args)?;
                let args =
                    sig.iter().map(|s| ArgKey::Tensor { dtype: s.dtype, shape: s.shape.dims().to_vec() }).collect();
                Ok(TraceKey { args, device: None })
            }
        }
    }

    /// The graph function cached under `key`.
    pub fn get_concrete(&self, key: &TraceKey) -> Result<Arc<GraphFunction>> {
        self.cache.read().unwrap().get(key).map(|c| Arc::clone(&c.graph)).ok_or(Error::MissingConcreteFunction)
    }

    /// Every cached graph function, in no particular order.
    pub fn concrete_functions(&self) -> Vec<Arc<GraphFunction>> {
        self.cache.read().unwrap().values().map(|c| Arc::clone(&c.graph)).collect()
    }

    /// Calls the staged function, tracing first on a cache miss.
    pub fn call(&self, args: &[Arg]) -> Result<Vec<Tensor>> {
        let key = self.trace_key(args)?;
        let cached = self.cache.read().unwrap().get(&key).cloned();
        let concrete = match cached {
            Some(c) => c,
            None => self.trace_for(&key, args)?,
        };
        let rt = Runtime::current();
        if rt.function(concrete.graph.name()).is_none() {
            rt.register_function(Arc::clone(&concrete.graph));
        }
        let mut operands: Vec<Operand> = args
            .iter()
            .filter_map(|a| match a {
                Arg::Tensor(t) => Some(Operand::Tensor(t.clone())),
                Arg::Variable(v) => Some(Operand::Variable(v.clone())),
                _ => None,
            })
            .collect();
        for c in &concrete.captures {
            operands.push(match c {
                Capture::Tensor(t) => Operand::Tensor(t.clone()),
                Capture::Variable(w) => Operand::Variable(w.upgrade()?),
            });
        }
        ops::call_function(&concrete.graph, &operands)
    }

    fn trace_for(&self, key: &TraceKey, args: &[Arg]) -> Result<Arc<Concrete>> {
        let mut book = self.book.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(c) = self.cache.read().unwrap().get(key) {
            return Ok(Arc::clone(c));
        }
        let (mut concrete, created) = self.trace_once(args)?;
        if !created.is_empty() {
            if book.traced {
                return Err(Error::VariableCreation(format!(
                    "`{}` created {} variable(s) on a later trace",
                    self.name,
                    created.len()
                )));
            }
            // First trace initialized state; the second records the behavior.
            book.variables.extend(created);
            let (again, created_again) = self.trace_once(args)?;
            if !created_again.is_empty() {
                return Err(Error::VariableCreation(format!(
                    "`{}` created {} variable(s) while re-tracing",
                    self.name,
                    created_again.len()
                )));
            }
            concrete = again;
        }
        book.traced = true;
        let concrete = Arc::new(concrete);
        self.cache.write().unwrap().insert(key.clone(), Arc::clone(&concrete));
        Ok(concrete)
    }

    /// Traces the target once; returns the finalized function and the
    /// variables created while tracing.
    fn trace_once(&self, args: &[Arg]) -> Result<(Concrete, Vec<Variable>)> {
        let rt = Runtime::current();
        let start = Instant::now();
        let mut st = TraceState::new(&rt.unique_name(&self.name));
        let mut tensors = 0;
        let sym_args: Vec<Arg> = args
            .iter()
            .map(|a| match a {
                Arg::Tensor(t) => {
                    let spec = match &self.pinned {
                        Some(sig) => sig[tensors].clone(),
                        None => TensorSpec { dtype: t.dtype(), shape: t.shape() },
                    };
                    tensors += 1;
                    Arg::Tensor(st.add_input(spec))
                }
                Arg::Variable(v) => {
                    st.add_variable_input(v);
                    Arg::Variable(v.clone())
                }
                other => other.clone(),
            })
            .collect();
        let (outs, mut st) = run_in_trace(st, |_| (self.target)(&sym_args)).map_err(staging_error)?;
        let created = std::mem::take(&mut st.created_variables);
        if let Some(outer) = context::enclosing_trace() {
            outer.borrow_mut().created_variables.extend(created.iter().cloned());
        }
        let (g, captures) = st.finalize(&outs).map_err(staging_error)?;
        let graph = Arc::new(optimize(&g));
        rt.register_function(Arc::clone(&graph));
        rt.metrics().record_trace(start.elapsed());
        let captures = captures
            .into_iter()
            .map(|c| match c {
                Operand::Tensor(t) => Capture::Tensor(t),
                Operand::Variable(v) => Capture::Variable(v.downgrade()),
            })
            .collect();
        Ok((Concrete { graph, captures }, created))
    }
}

fn check_pinned(sig: &[TensorSpec], args: &[Arg]) -> Result<()> {
    if sig.len() != args.len() {
        return Err(Error::SignatureMismatch(format!("expected {} arguments, got {}", sig.len(), args.len())));
    }
    for (i, (spec, a)) in sig.iter().zip(args).enumerate() {
        let Arg::Tensor(t) = a else {
            return Err(Error::SignatureMismatch(format!("argument {i} must be a tensor")));
        };
        let shape = t.shape();
        let fits = t.dtype() == spec.dtype
            && shape.rank() == spec.shape.rank()
            && shape.dims().iter().zip(spec.shape.dims()).all(|(d, s)| s.is_none() || d.is_none() || d == s);
        if !fits {
            return Err(Error::SignatureMismatch(format!(
                "argument {i} is {} {:?}, signature wants {} {:?}",
                t.dtype(),
                shape.dims(),
                spec.dtype,
                spec.shape.dims()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::RuntimeOptions;
    use crate::tensor::PartialShape;

    #[test]
    fn keys_ignore_payload_and_see_plain_values() {
        let a = Tensor::from_f32(vec![1.0, 2.0], [2, 1]).unwrap();
        let b = Tensor::from_f32(vec![5.0, 6.0], [2, 1]).unwrap();
        assert_eq!(infer_trace_key(&[a.into()]).unwrap(), infer_trace_key(&[b.into()]).unwrap());
        assert_ne!(infer_trace_key(&[true.into()]).unwrap(), infer_trace_key(&[false.into()]).unwrap());
        let opaque = Arg::Opaque(Arc::new(3u8));
        assert_eq!(infer_trace_key(&[Arg::Int(1), opaque]).unwrap_err(), Error::UnencodableArgument(1));
    }

    #[test]
    fn cache_grows_per_shape() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let f = stage("double", |a| Ok(vec![ops::add(a[0].as_tensor().unwrap(), a[0].as_tensor().unwrap())?]));
        assert_eq!(f.cache_size(), 0);
        let x = |r, c| Tensor::from_f32(vec![1.0; r * c], [r, c]).unwrap();
        f.call(&[x(3, 5).into()]).unwrap();
        f.call(&[x(3, 5).into()]).unwrap();
        assert_eq!(f.cache_size(), 1);
        f.call(&[x(4, 5).into()]).unwrap();
        assert_eq!(f.cache_size(), 2);
        assert_eq!(rt.metrics().traces(), 2);
    }

    #[test]
    fn pinned_signature_admits_any_batch() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let sig = vec![TensorSpec::new(DType::Float32, PartialShape::new(vec![None, Some(5)]))];
        let f = stage_with_signature("batched", sig, |a| Ok(vec![ops::relu(a[0].as_tensor().unwrap())?]));
        for rows in [1, 3, 7] {
            let x = Tensor::from_f32(vec![-1.0; rows * 5], [rows, 5]).unwrap();
            assert_eq!(f.call(&[x.into()]).unwrap()[0].concrete_shape().unwrap().dims(), &[rows, 5]);
        }
        assert_eq!(f.cache_size(), 1);
        let bad = Tensor::from_f32(vec![0.0; 4], [1, 4]).unwrap();
        assert!(matches!(f.call(&[bad.into()]), Err(Error::SignatureMismatch(_))));
    }

    #[test]
    fn missing_concrete_before_first_call() {
        let f = stage("noop", |a| Ok(vec![a[0].as_tensor().unwrap().clone()]));
        let key = f.trace_key(&[Tensor::scalar_f32(1.0).into()]).unwrap();
        assert_eq!(f.get_concrete(&key).unwrap_err(), Error::MissingConcreteFunction);
    }
}
