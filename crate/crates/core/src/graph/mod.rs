//! Dataflow graph functions: the staged representation of a host function.

mod exec;
mod optimize;
mod serialize;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock};

use crate::context;
use crate::device::DeviceName;
use crate::dispatch::Operand;
use crate::error::{Error, Result};
use crate::function_grad::GradientPair;
use crate::registry::{AttrValue, Attrs, TensorSpec};
use crate::runtime::Runtime;
use crate::tensor::Tensor;

pub(crate) use exec::{run, ExecPlan};
pub use optimize::{constant_fold, optimize, prune};
pub use serialize::{deserialize, serialize, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputKind {
    Tensor,
    /// Bound to a live variable at call time.
    Variable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Input {
    pub name: String,
    pub kind: InputKind,
    pub spec: TensorSpec,
}

/// Output `output` of node `node`. Ids below the input count are
/// placeholders, which have exactly one output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueRef {
    pub node: u32,
    pub output: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: u32,
    pub op: String,
    pub inputs: Vec<ValueRef>,
    pub attrs: Attrs,
    /// Placement override; wins over the caller's scope.
    pub device: Option<DeviceName>,
    /// Inferred output types.
    pub outputs: Vec<TensorSpec>,
}

impl Node {
    pub fn func_attrs(&self) -> impl Iterator<Item = &str> {
        self.attrs.values().filter_map(|v| match v {
            AttrValue::Func(name) => Some(name.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub name: String,
    pub value: ValueRef,
}

pub type Library = BTreeMap<String, Arc<GraphFunction>>;

/// Function-name resolution: a graph's own library, then its callers'.
pub(crate) struct LibraryScope<'a> {
    pub lib: &'a Library,
    pub parent: Option<&'a LibraryScope<'a>>,
}

impl LibraryScope<'_> {
    pub fn resolve(&self, name: &str) -> Option<Arc<GraphFunction>> {
        self.lib.get(name).cloned().or_else(|| self.parent.and_then(|p| p.resolve(name)))
    }
}

/// Immutable dataflow graph with named inputs and outputs.
pub struct GraphFunction {
    name: String,
    inputs: Vec<Input>,
    nodes: Vec<Node>,
    outputs: Vec<Output>,
    library: Library,
    serializable: bool,
    pub(crate) plan: OnceLock<Arc<ExecPlan>>,
    stateful: OnceLock<bool>,
    pub(crate) gradient: Mutex<Option<Arc<GradientPair>>>,
}

impl GraphFunction {
    /// Validates topology and builds a finalized function.
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Input>,
        nodes: Vec<Node>,
        outputs: Vec<Output>,
        library: Library,
    ) -> Result<GraphFunction> {
        let name = name.into();
        let n_in = inputs.len() as u32;
        let corrupt = |m: String| Error::CorruptGraph(format!("{name}: {m}"));
        let output_count = |r: ValueRef, before: u32| -> Result<()> {
            if r.node < n_in {
                return if r.output == 0 {
                    Ok(())
                } else {
                    Err(corrupt(format!("placeholder {} has one output", r.node)))
                };
            }
            if r.node >= before {
                return Err(corrupt(format!("reference to node {} is not topologically earlier", r.node)));
            }
            let n = &nodes[(r.node - n_in) as usize];
            if (r.output as usize) < n.outputs.len() {
                Ok(())
            } else {
                Err(corrupt(format!("node {} has no output {}", r.node, r.output)))
            }
        };
        for (j, n) in nodes.iter().enumerate() {
            if n.id != n_in + j as u32 {
                return Err(corrupt(format!("node id {} out of sequence", n.id)));
            }
            for r in &n.inputs {
                output_count(*r, n.id)?;
            }
        }
        let end = n_in + nodes.len() as u32;
        for o in &outputs {
            output_count(o.value, end)?;
            if o.value.node < n_in && inputs[o.value.node as usize].kind == InputKind::Variable {
                return Err(corrupt(format!("output `{}` is a variable placeholder", o.name)));
            }
        }
        let serializable = !nodes.iter().any(|n| n.op == "host_call" || n.op == "host_call_grad")
            && library.values().all(|f| f.serializable);
        Ok(GraphFunction {
            name,
            inputs,
            nodes,
            outputs,
            library,
            serializable,
            plan: OnceLock::new(),
            stateful: OnceLock::new(),
            gradient: Mutex::new(None),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn inputs(&self) -> &[Input] {
        &self.inputs
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[Output] {
        &self.outputs
    }

    pub fn library(&self) -> &Library {
        &self.library
    }

    /// False if this function or anything in its library calls back into
    /// the host.
    pub fn is_serializable(&self) -> bool {
        self.serializable
    }

    pub fn node(&self, id: u32) -> Option<&Node> {
        id.checked_sub(self.inputs.len() as u32).and_then(|j| self.nodes.get(j as usize))
    }

    pub fn op_count(&self, op: &str) -> usize {
        self.nodes.iter().filter(|n| n.op == op).count()
    }

    pub fn value_spec(&self, r: ValueRef) -> &TensorSpec {
        match self.node(r.node) {
            Some(n) => &n.outputs[r.output as usize],
            None => &self.inputs[r.node as usize].spec,
        }
    }

    pub fn output_specs(&self) -> Vec<TensorSpec> {
        self.outputs.iter().map(|o| self.value_spec(o.value).clone()).collect()
    }

    /// Same graph under another name.
    pub(crate) fn renamed(&self, name: String) -> Result<GraphFunction> {
        GraphFunction::new(name, self.inputs.clone(), self.nodes.clone(), self.outputs.clone(), self.library.clone())
    }

    pub(crate) fn resolve_in(&self, rt: &Runtime, name: &str) -> Option<Arc<GraphFunction>> {
        self.library.get(name).cloned().or_else(|| rt.function(name))
    }

    /// Whether running the node may have effects beyond its outputs.
    pub(crate) fn node_is_stateful(&self, rt: &Runtime, n: &Node) -> bool {
        let Some(def) = rt.registry().get(&n.op) else { return true };
        if def.stateful {
            return true;
        }
        n.func_attrs().any(|f| match self.resolve_in(rt, f) {
            Some(g) => g.is_stateful(rt),
            None => true,
        })
    }

    /// Whether any node, transitively through called functions, is stateful.
    pub fn is_stateful(&self, rt: &Runtime) -> bool {
        *self.stateful.get_or_init(|| self.nodes.iter().any(|n| self.node_is_stateful(rt, n)))
    }

    /// Forward variant and backward function, once a tape has recorded a
    /// call to this function.
    pub fn gradient_functions(&self) -> Option<(Arc<GraphFunction>, Arc<GraphFunction>)> {
        self.gradient.lock().unwrap().as_ref().map(|p| (Arc::clone(&p.forward), Arc::clone(&p.backward)))
    }

    /// Executes the function on the current runtime. Tensor placeholders
    /// take tensors and variable placeholders take variables, in order.
    pub fn execute(&self, args: &[Operand]) -> Result<Vec<Tensor>> {
        let rt = Runtime::current();
        let device = context::current_device().unwrap_or_else(DeviceName::default_cpu);
        run(&rt, self, args, &device, None)
    }
}

impl PartialEq for GraphFunction {
    /// Structural equality, including nested libraries.
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.inputs == other.inputs
            && self.nodes == other.nodes
            && self.outputs == other.outputs
            && self.library.len() == other.library.len()
            && self.library.iter().zip(&other.library).all(|((a, fa), (b, fb))| a == b && **fa == **fb)
    }
}

impl fmt::Debug for GraphFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "function {} (", self.name)?;
        for (i, input) in self.inputs.iter().enumerate() {
            writeln!(f, "  %{i} {}: {:?} {} {:?}", input.name, input.kind, input.spec.dtype, input.spec.shape.dims())?;
        }
        writeln!(f, ") {{")?;
        for n in &self.nodes {
            let ins: Vec<String> = n.inputs.iter().map(|r| format!("%{}:{}", r.node, r.output)).collect();
            write!(f, "  %{} = {}({})", n.id, n.op, ins.join(", "))?;
            for (k, v) in &n.attrs {
                match v {
                    AttrValue::Tensor(t) => write!(f, " {k}=<{} {:?}>", t.dtype(), t.shape.dims())?,
                    other => write!(f, " {k}={other:?}")?,
                }
            }
            if let Some(d) = &n.device {
                write!(f, " @{d}")?;
            }
            writeln!(f)?;
        }
        let outs: Vec<String> =
            self.outputs.iter().map(|o| format!("{}=%{}:{}", o.name, o.value.node, o.value.output)).collect();
        writeln!(f, "  return {}", outs.join(", "))?;
        for g in self.library.values() {
            write!(f, "{g:?}")?;
        }
        writeln!(f, "}}")
    }
}
