//! Dataflow executor. Nodes become ready when their data inputs and their
//! resource predecessors have finished; ready nodes run on the runtime's
//! worker pool. Stateful nodes touching the same resource form a chain in
//! recorded order, so they never overlap or reorder. A chain of float
//! pointwise nodes, each the only consumer of the one before, reuses a
//! single buffer instead of allocating per node. A value is released as
//! soon as the last unit reading it has finished.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use smallvec::SmallVec;

use crate::device::{ensure_on, DeviceName};
use crate::dispatch::{placement, run_kernel, Operand};
use crate::error::{Error, Result};
use crate::kernels::{Float, Pointwise};
use crate::registry::{OpDef, Registry};
use crate::runtime::Runtime;
use crate::tensor::{Data, Tensor};

use super::{GraphFunction, InputKind, LibraryScope, ValueRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Resource {
    Variable(u32),
    /// RNG stream and host callbacks.
    Global,
}

fn uses_global(op: &str) -> bool {
    matches!(op, "random_normal" | "dropout" | "host_call" | "host_call_grad")
}

/// Pointwise node applied in place to the running value of its unit.
#[derive(Debug)]
struct TailStep {
    node: u32,
    op: Pointwise,
    /// Which input carries the running value; the other is the side operand.
    chain_pos: usize,
}

/// Scheduling unit: a head node plus a possibly empty chain of pointwise
/// nodes, each the sole consumer of the previous one's output.
#[derive(Debug)]
struct Unit {
    head: u32,
    tail: Vec<TailStep>,
}

/// Precomputed schedule of the live nodes, grouped into units.
#[derive(Debug)]
pub(crate) struct ExecPlan {
    units: Vec<Unit>,
    /// Topological order of `units` for inline execution. Head order is
    /// not enough: a tail may consume a side operand from a later unit.
    order: Vec<u32>,
    pred_count: Vec<usize>,
    succs: Vec<Vec<u32>>,
    roots: Vec<u32>,
    /// Op definitions of live nodes, valid for `registry` only.
    defs: Vec<Option<Arc<OpDef>>>,
    registry: *const Registry,
    /// Per node, how many other units read it; graph outputs never drop.
    readers: Vec<usize>,
    pinned: Vec<bool>,
    /// Per unit, the distinct nodes outside it that it reads.
    reads: Vec<Vec<u32>>,
}

// The registry pointer is compared, never dereferenced.
unsafe impl Send for ExecPlan {}
unsafe impl Sync for ExecPlan {}

impl ExecPlan {
    pub fn build(rt: &Runtime, g: &GraphFunction) -> ExecPlan {
        let n_in = g.inputs.len() as u32;
        let n = g.nodes.len();
        let stateful: Vec<bool> = g.nodes.iter().map(|node| g.node_is_stateful(rt, node)).collect();
        let node_of = |r: &ValueRef| (r.node >= n_in).then(|| (r.node - n_in) as usize);

        let mut live = vec![false; n];
        let mut stack: Vec<usize> =
            g.outputs.iter().filter_map(|o| node_of(&o.value)).chain((0..n).filter(|&j| stateful[j])).collect();
        while let Some(j) = stack.pop() {
            if std::mem::replace(&mut live[j], true) {
                continue;
            }
            stack.extend(g.nodes[j].inputs.iter().filter_map(node_of));
        }

        let mut preds: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut last: HashMap<Resource, u32> = HashMap::new();
        for j in (0..n).filter(|&j| live[j]) {
            let node = &g.nodes[j];
            preds[j].extend(node.inputs.iter().filter_map(node_of).map(|p| p as u32));
            if stateful[j] {
                let mut keys: Vec<Resource> = node
                    .inputs
                    .iter()
                    .filter(|r| r.node < n_in && g.inputs[r.node as usize].kind == InputKind::Variable)
                    .map(|r| Resource::Variable(r.node))
                    .collect();
                if uses_global(&node.op) || node.func_attrs().next().is_some() {
                    keys.push(Resource::Global);
                }
                for key in keys {
                    if let Some(p) = last.insert(key, j as u32) {
                        preds[j].push(p);
                    }
                }
            }
            preds[j].sort_unstable();
            preds[j].dedup();
        }

        // A node joins its producer's unit when it is that producer's only
        // consumer and both are pointwise on the same device.
        let pointwise: Vec<Option<Pointwise>> =
            g.nodes.iter().map(|node| rt.registry().get(&node.op).and_then(|d| d.pointwise)).collect();
        let mut uses = vec![0usize; n];
        for j in (0..n).filter(|&j| live[j]) {
            for p in g.nodes[j].inputs.iter().filter_map(node_of) {
                uses[p] += 1;
            }
        }
        for p in g.outputs.iter().filter_map(|o| node_of(&o.value)) {
            uses[p] += 2;
        }
        let mut units: Vec<Unit> = Vec::new();
        let mut unit_of = vec![u32::MAX; n];
        for j in (0..n).filter(|&j| live[j]) {
            let node = &g.nodes[j];
            let chain = pointwise[j].and_then(|op| {
                node.inputs.iter().enumerate().find_map(|(pos, r)| {
                    let p = node_of(r)?;
                    (r.output == 0 && uses[p] == 1 && pointwise[p].is_some() && g.nodes[p].device == node.device)
                        .then_some((op, pos, p))
                })
            });
            match chain {
                Some((op, chain_pos, p)) => {
                    let u = unit_of[p];
                    units[u as usize].tail.push(TailStep { node: j as u32, op, chain_pos });
                    unit_of[j] = u;
                }
                None => {
                    unit_of[j] = units.len() as u32;
                    units.push(Unit { head: j as u32, tail: Vec::new() });
                }
            }
        }

        let mut unit_preds: Vec<Vec<u32>> = vec![Vec::new(); units.len()];
        for (u, unit) in units.iter().enumerate() {
            let members = std::iter::once(unit.head).chain(unit.tail.iter().map(|t| t.node));
            let mut ps: Vec<u32> =
                members.flat_map(|j| preds[j as usize].iter().map(|&p| unit_of[p as usize])).collect();
            ps.sort_unstable();
            ps.dedup();
            ps.retain(|&p| p != u as u32);
            unit_preds[u] = ps;
        }
        let mut succs: Vec<Vec<u32>> = vec![Vec::new(); units.len()];
        for (u, ps) in unit_preds.iter().enumerate() {
            for &p in ps {
                succs[p as usize].push(u as u32);
            }
        }
        let roots: Vec<u32> = (0..units.len() as u32).filter(|&u| unit_preds[u as usize].is_empty()).collect();
        let pred_count: Vec<usize> = unit_preds.iter().map(Vec::len).collect();
        let mut pending = pred_count.clone();
        let mut order = Vec::with_capacity(units.len());
        let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<u32>> =
            roots.iter().map(|&u| std::cmp::Reverse(u)).collect();
        while let Some(std::cmp::Reverse(u)) = ready.pop() {
            order.push(u);
            for &v in &succs[u as usize] {
                pending[v as usize] -= 1;
                if pending[v as usize] == 0 {
                    ready.push(std::cmp::Reverse(v));
                }
            }
        }
        let mut reads: Vec<Vec<u32>> = vec![Vec::new(); units.len()];
        let mut readers = vec![0usize; n];
        for (u, unit) in units.iter().enumerate() {
            let members = std::iter::once(unit.head).chain(unit.tail.iter().map(|t| t.node));
            let mut ps: Vec<u32> = members
                .flat_map(|j| g.nodes[j as usize].inputs.iter().filter_map(node_of))
                .filter(|&p| unit_of[p] != u as u32)
                .map(|p| p as u32)
                .collect();
            ps.sort_unstable();
            ps.dedup();
            for &p in &ps {
                readers[p as usize] += 1;
            }
            reads[u] = ps;
        }
        let mut pinned = vec![false; n];
        for p in g.outputs.iter().filter_map(|o| node_of(&o.value)) {
            pinned[p] = true;
        }
        let defs = (0..n).map(|j| live[j].then(|| rt.registry().get(&g.nodes[j].op).cloned()).flatten()).collect();
        ExecPlan { units, order, pred_count, succs, roots, defs, registry: rt.registry(), readers, pinned, reads }
    }
}

fn check_args(g: &GraphFunction, args: &[Operand]) -> Result<()> {
    if args.len() != g.inputs.len() {
        return Err(Error::InputMismatch(format!("`{}` takes {} inputs, got {}", g.name, g.inputs.len(), args.len())));
    }
    for (input, arg) in g.inputs.iter().zip(args) {
        let (dtype, shape) = match (input.kind, arg) {
            (InputKind::Tensor, Operand::Tensor(t)) => {
                (t.dtype(), t.concrete_shape().ok_or_else(|| Error::SymbolicTensor)?.clone())
            }
            (InputKind::Variable, Operand::Variable(v)) => (v.dtype(), v.shape().clone()),
            (kind, _) => {
                return Err(Error::InputMismatch(format!("input `{}` expects a {kind:?}", input.name)));
            }
        };
        if dtype != input.spec.dtype || !input.spec.shape.admits(&shape) {
            return Err(Error::InputMismatch(format!(
                "input `{}` expects {} {:?}, got {} {:?}",
                input.name,
                input.spec.dtype,
                input.spec.shape.dims(),
                dtype,
                shape.dims()
            )));
        }
    }
    Ok(())
}

struct RunState<'a> {
    rt: &'a Runtime,
    g: &'a GraphFunction,
    plan: &'a ExecPlan,
    args: &'a [Operand],
    device: &'a DeviceName,
    scope: &'a LibraryScope<'a>,
    slots: Vec<Mutex<Option<Vec<Tensor>>>>,
    /// Readers of each node still to finish.
    readers: Vec<AtomicUsize>,
}

impl RunState<'_> {
    fn value(&self, r: ValueRef) -> Operand {
        let n_in = self.args.len() as u32;
        if r.node < n_in {
            self.args[r.node as usize].clone()
        } else {
            let slot = self.slots[(r.node - n_in) as usize].lock().unwrap();
            let outs = slot.as_ref().expect("scheduled after its inputs and released after its readers");
            Operand::Tensor(outs[r.output as usize].clone())
        }
    }

    fn set(&self, j: usize, outputs: Vec<Tensor>) {
        *self.slots[j].lock().unwrap() = Some(outputs);
    }

    fn release(&self, j: usize) {
        if !self.plan.pinned[j] {
            let old = self.slots[j].lock().unwrap().take();
            drop(old);
        }
    }

    fn def(&self, j: usize) -> Result<Arc<OpDef>> {
        let cached = std::ptr::eq(self.plan.registry, self.rt.registry()).then(|| self.plan.defs[j].clone()).flatten();
        match cached {
            Some(d) => Ok(d),
            None => {
                let op = &self.g.nodes[j].op;
                self.rt.registry().get(op).cloned().ok_or_else(|| Error::UnknownOp(op.clone()))
            }
        }
    }

    fn exec(&self, j: usize) -> Result<()> {
        let node = &self.g.nodes[j];
        let def = self.def(j)?;
        let mut operands: SmallVec<[Operand; 4]> = node.inputs.iter().map(|r| self.value(*r)).collect();
        let device = placement(&node.op, &operands, Some(node.device.as_ref().unwrap_or(self.device)));
        for o in operands.iter_mut() {
            if let Operand::Tensor(t) = o {
                if t.device() != &device {
                    *t = ensure_on(self.rt, t, &device)?;
                }
            }
        }
        let outputs = run_kernel(self.rt, &def, &node.attrs, &device, Some(self.scope), &operands)
            .map_err(|e| e.at_node(node.id))?;
        if outputs.len() != node.outputs.len() {
            return Err(Error::kernel(format!(
                "`{}` produced {} outputs, expected {}",
                node.op,
                outputs.len(),
                node.outputs.len()
            ))
            .at_node(node.id));
        }
        self.set(j, outputs);
        Ok(())
    }

    fn exec_unit(&self, u: usize) -> Result<()> {
        let unit = &self.plan.units[u];
        self.exec(unit.head as usize)?;
        if !unit.tail.is_empty() && !self.run_tail_in_place(unit) {
            unit.tail.iter().try_for_each(|t| self.exec(t.node as usize))?;
        }
        // Every member but the last has the next member as its only reader.
        if let Some(last) = unit.tail.last() {
            self.release(unit.head as usize);
            for t in &unit.tail {
                if t.node != last.node {
                    self.release(t.node as usize);
                }
            }
        }
        for &p in &self.plan.reads[u] {
            if self.readers[p as usize].fetch_sub(1, Ordering::AcqRel) == 1 {
                self.release(p as usize);
            }
        }
        Ok(())
    }

    /// Runs the tail over a single reused buffer when that matches node-by-node
    /// exactly: float data, no transfers, no simulated latency, and side
    /// operands that are scalars or already the running value's shape.
    fn run_tail_in_place(&self, unit: &Unit) -> bool {
        let head = self.slots[unit.head as usize].lock().unwrap().as_ref().expect("head ran")[0].clone();
        let device = head.device();
        if !self.rt.options().accel_latency.is_zero() && Runtime::is_accel(device) {
            return false;
        }
        let Some(shape) = head.concrete_shape() else { return false };
        let mut sides: Vec<Option<Tensor>> = Vec::with_capacity(unit.tail.len());
        for step in &unit.tail {
            let node = &self.g.nodes[step.node as usize];
            if node.device.as_ref().unwrap_or(self.device) != device {
                return false;
            }
            if !step.op.is_binary() {
                sides.push(None);
                continue;
            }
            let Operand::Tensor(side) = self.value(node.inputs[1 - step.chain_pos]) else { return false };
            let fits = side
                .concrete_shape()
                .is_some_and(|s| s == shape || (s.num_elements() == 1 && s.rank() <= shape.rank()));
            if !fits || side.dtype() != head.dtype() || side.device() != device {
                return false;
            }
            sides.push(Some(side));
        }
        let data = match head.data() {
            Ok(Data::F32(v)) => sweep_chain(v, &unit.tail, &sides, |d| match d {
                Data::F32(v) => v.as_slice(),
                _ => unreachable!("side dtype checked"),
            })
            .map(Data::F32),
            Ok(Data::F64(v)) => sweep_chain(v, &unit.tail, &sides, |d| match d {
                Data::F64(v) => v.as_slice(),
                _ => unreachable!("side dtype checked"),
            })
            .map(Data::F64),
            _ => None,
        };
        let Some(data) = data else { return false };
        let last = unit.tail.last().expect("non-empty tail").node as usize;
        self.set(last, vec![Tensor::from_parts(data, shape.clone(), device.clone())]);
        true
    }
}

/// Applies each step to the whole running buffer in turn, so every element
/// sees the same operation sequence as node-by-node execution.
fn sweep_chain<T: Float>(
    head: &[T],
    tail: &[TailStep],
    sides: &[Option<Tensor>],
    slice: impl Fn(&Data) -> &[T],
) -> Option<Vec<T>> {
    let mut acc = head.to_vec();
    for (step, side) in tail.iter().zip(sides) {
        let side = match side {
            Some(t) => Some(slice(t.data().ok()?)),
            None => None,
        };
        let pos = step.chain_pos;
        // One monomorphic loop per op keeps the match out of the inner loop.
        macro_rules! each {
            ($($v:ident),*) => {
                match step.op {
                    $(Pointwise::$v => sweep(&mut acc, side, pos, |a, b| T::apply(Pointwise::$v, a, b)),)*
                }
            };
        }
        each!(Add, Sub, Mul, Div, Neg, Exp, Log, Sigmoid, Softplus, Relu);
    }
    Some(acc)
}

#[inline(always)]
fn sweep<T: Copy>(acc: &mut [T], side: Option<&[T]>, chain_pos: usize, f: impl Fn(T, T) -> T) {
    match side {
        None => acc.iter_mut().for_each(|a| *a = f(*a, *a)),
        Some(&[b]) if chain_pos == 0 => acc.iter_mut().for_each(|a| *a = f(*a, b)),
        Some(&[b]) => acc.iter_mut().for_each(|a| *a = f(b, *a)),
        Some(bs) if chain_pos == 0 => acc.iter_mut().zip(bs).for_each(|(a, &b)| *a = f(*a, b)),
        Some(bs) => acc.iter_mut().zip(bs).for_each(|(a, &b)| *a = f(b, *a)),
    }
}

struct Shared<'a> {
    state: RunState<'a>,
    plan: &'a ExecPlan,
    pending: Vec<AtomicUsize>,
    failed: AtomicBool,
    error: Mutex<Option<Error>>,
}

impl<'a> Shared<'a> {
    fn work<'s>(&'s self, mut j: u32, scope: &rayon::Scope<'s>) {
        loop {
            if self.failed.load(Ordering::Acquire) {
                return;
            }
            if let Err(e) = self.state.exec_unit(j as usize) {
                self.error.lock().unwrap().get_or_insert(e);
                self.failed.store(true, Ordering::Release);
                return;
            }
            let mut next = None;
            for &s in &self.plan.succs[j as usize] {
                if self.pending[s as usize].fetch_sub(1, Ordering::AcqRel) == 1 {
                    match next {
                        None => next = Some(s),
                        Some(_) => scope.spawn(move |sc| self.work(s, sc)),
                    }
                }
            }
            match next {
                Some(s) => j = s,
                None => return,
            }
        }
    }
}

/// Runs `g` on concrete `args`, resolving nested function names through
/// `g`'s library and then `parent`.
pub(crate) fn run(
    rt: &Runtime,
    g: &GraphFunction,
    args: &[Operand],
    device: &DeviceName,
    parent: Option<&LibraryScope<'_>>,
) -> Result<Vec<Tensor>> {
    check_args(g, args)?;
    let plan = Arc::clone(g.plan.get_or_init(|| Arc::new(ExecPlan::build(rt, g))));
    let scope = LibraryScope { lib: &g.library, parent };
    let state = RunState {
        rt,
        g,
        plan: &plan,
        args,
        device,
        scope: &scope,
        slots: (0..g.nodes.len()).map(|_| Mutex::new(None)).collect(),
        readers: plan.readers.iter().map(|&c| AtomicUsize::new(c)).collect(),
    };

    let state = match rt.0.pool.as_ref().filter(|_| plan.units.len() > 1 && !crate::host::in_callback()) {
        None => {
            for &u in &plan.order {
                state.exec_unit(u as usize)?;
            }
            state
        }
        Some(pool) => {
            let shared = Shared {
                pending: plan.pred_count.iter().map(|&c| AtomicUsize::new(c)).collect(),
                state,
                plan: &plan,
                failed: AtomicBool::new(false),
                error: Mutex::new(None),
            };
            pool.in_place_scope(|s| {
                let shared = &shared;
                if let Some((&first, rest)) = plan.roots.split_first() {
                    for &r in rest {
                        s.spawn(move |sc| shared.work(r, sc));
                    }
                    shared.work(first, s);
                }
            });
            if let Some(e) = shared.error.into_inner().unwrap() {
                return Err(e);
            }
            shared.state
        }
    };

    g.outputs
        .iter()
        .map(|o| match state.value(o.value) {
            Operand::Tensor(t) => Ok(t),
            Operand::Variable(_) => Err(Error::InputMismatch(format!("output `{}` is a variable", o.name))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use crate::ops;
    use crate::runtime::{Runtime, RuntimeOptions};
    use crate::staging::{stage, Arg};
    use crate::tensor::{DType, Tensor};
    use crate::Result;

    fn arg(args: &[Arg], i: usize) -> Tensor {
        args[i].as_tensor().unwrap().clone()
    }

    fn mixed_chain(x: &Tensor, s: &Tensor, c: &Tensor) -> Result<Tensor> {
        let y = ops::exp(&ops::add(x, c)?)?;
        let y = ops::sub(c, &ops::mul(s, &y)?)?;
        let y = ops::softplus(&ops::sigmoid(&ops::relu(&y)?)?)?;
        let y = ops::log(&ops::add(&y, c)?)?;
        ops::neg(&ops::div(c, &y)?)
    }

    #[test]
    fn in_place_chain_is_bit_identical_to_eager() {
        for workers in [1, 3] {
            let rt = Runtime::new(RuntimeOptions { workers, ..RuntimeOptions::default() });
            let _g = rt.enter();
            for dtype in [DType::Float32, DType::Float64] {
                let x = Tensor::from_values(&[-2.0, -0.5, 0.0, 0.3, 1.7], [5], dtype).unwrap();
                let s = Tensor::from_values(&[0.1, -3.0, 2.5, 1.0, -0.2], [5], dtype).unwrap();
                let c = Tensor::from_values(&[1.25], [], dtype).unwrap();
                let f = stage("chain", |a| Ok(vec![mixed_chain(&arg(a, 0), &arg(a, 1), &arg(a, 2))?]));
                let staged = f.call(&[Arg::from(&x), Arg::from(&s), Arg::from(&c)]).unwrap().remove(0);
                let eager = mixed_chain(&x, &s, &c).unwrap();
                assert!(staged.bit_eq(&eager).unwrap(), "{dtype}: {staged:?} vs {eager:?}");
            }
        }
    }

    #[test]
    fn tail_may_wait_on_a_later_unit() {
        let rt = Runtime::new(RuntimeOptions { workers: 1, ..RuntimeOptions::default() });
        let _g = rt.enter();
        let f = stage("late_side", |a| {
            let b = ops::exp(&ops::exp(&arg(a, 0))?)?;
            let q = ops::exp(&arg(a, 1))?;
            Ok(vec![ops::add(&b, &q)?])
        });
        let x = Tensor::scalar_f64(0.0);
        let out = f.call(&[Arg::from(&x), Arg::from(&x)]).unwrap().remove(0);
        assert_eq!(out.to_scalar().unwrap(), std::f64::consts::E + 1.0);
    }

    #[test]
    fn broadcasting_side_falls_back_to_nodes() {
        let rt = Runtime::new(RuntimeOptions { workers: 1, ..RuntimeOptions::default() });
        let _g = rt.enter();
        let body = |x: &Tensor, s: &Tensor| ops::neg(&ops::add(&ops::exp(x)?, s)?);
        let f = stage("widen", move |a| Ok(vec![body(&arg(a, 0), &arg(a, 1))?]));
        let x = Tensor::from_f32(vec![0.0, 1.0, 2.0], [3]).unwrap();
        let s = Tensor::from_f32(vec![10.0, 20.0], [2, 1]).unwrap();
        let staged = f.call(&[Arg::from(&x), Arg::from(&s)]).unwrap().remove(0);
        assert_eq!(staged.shape().dims(), vec![Some(2), Some(3)]);
        assert!(staged.bit_eq(&body(&x, &s).unwrap()).unwrap());
    }
}
