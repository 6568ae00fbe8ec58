//! Object-graph checkpoints: state is saved along named edges from a root
//! and restored by walking the live graph and the saved graph in lockstep,
//! so values match by attribute path rather than by creation order.
//!
//! Save and restore require quiescence: no concurrent writes to the objects
//! being processed.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use crate::codec::{Reader, StringTable, Writer};
use crate::error::{Error, Result};
use crate::tensor::{DType, HostTensor, Shape, Tensor};
use crate::variable::Variable;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SCK1";
const CURSOR_CODE: u8 = 0xFE;
const BLOB_CODE: u8 = 0xFF;

/// A node of the object graph.
#[derive(Clone)]
pub enum Trackable {
    /// Holds named edges to other trackables; carries no state itself.
    Object(TrackedObject),
    Variable(Variable),
    Iterator(DatasetIterator),
    Blob(Blob),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Object = 0,
    Variable = 1,
    Iterator = 2,
    Blob = 3,
}

impl Kind {
    fn from_code(c: u8) -> Option<Kind> {
        [Kind::Object, Kind::Variable, Kind::Iterator, Kind::Blob].into_iter().find(|k| *k as u8 == c)
    }

    fn is_stateful(self) -> bool {
        self != Kind::Object
    }
}

impl Trackable {
    fn kind(&self) -> Kind {
        match self {
            Trackable::Object(_) => Kind::Object,
            Trackable::Variable(_) => Kind::Variable,
            Trackable::Iterator(_) => Kind::Iterator,
            Trackable::Blob(_) => Kind::Blob,
        }
    }

    /// Identity for revisit detection.
    fn identity(&self) -> (Kind, usize) {
        let addr = match self {
            Trackable::Object(o) => Arc::as_ptr(&o.0) as *const () as usize,
            Trackable::Variable(v) => v.id().0 as usize,
            Trackable::Iterator(i) => Arc::as_ptr(&i.0) as *const () as usize,
            Trackable::Blob(b) => Arc::as_ptr(&b.0) as *const () as usize,
        };
        (self.kind(), addr)
    }

    /// Outgoing edges, sorted by name.
    fn edges(&self) -> Vec<(String, Trackable)> {
        match self {
            Trackable::Object(o) => o.edges(),
            _ => Vec::new(),
        }
    }

    pub fn as_object(&self) -> Option<&TrackedObject> {
        match self {
            Trackable::Object(o) => Some(o),
            _ => None,
        }
    }

    pub fn as_variable(&self) -> Option<&Variable> {
        match self {
            Trackable::Variable(v) => Some(v),
            _ => None,
        }
    }
}

impl fmt::Debug for Trackable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Trackable::Object(o) => write!(f, "Object({:?})", o.0.read().unwrap().keys().collect::<Vec<_>>()),
            Trackable::Variable(v) => write!(f, "{v:?}"),
            Trackable::Iterator(i) => write!(f, "Iterator(position={})", i.position()),
            Trackable::Blob(b) => write!(f, "Blob({} bytes)", b.get().len()),
        }
    }
}

impl From<TrackedObject> for Trackable {
    fn from(o: TrackedObject) -> Self {
        Trackable::Object(o)
    }
}

impl From<&TrackedObject> for Trackable {
    fn from(o: &TrackedObject) -> Self {
        Trackable::Object(o.clone())
    }
}

impl From<Variable> for Trackable {
    fn from(v: Variable) -> Self {
        Trackable::Variable(v)
    }
}

impl From<&Variable> for Trackable {
    fn from(v: &Variable) -> Self {
        Trackable::Variable(v.clone())
    }
}

impl From<DatasetIterator> for Trackable {
    fn from(i: DatasetIterator) -> Self {
        Trackable::Iterator(i)
    }
}

impl From<Blob> for Trackable {
    fn from(b: Blob) -> Self {
        Trackable::Blob(b)
    }
}

/// Shared container of named edges. Edge names are unique per object;
/// setting an existing name replaces the edge.
#[derive(Clone, Default)]
pub struct TrackedObject(Arc<RwLock<BTreeMap<String, Trackable>>>);

impl TrackedObject {
    pub fn new() -> TrackedObject {
        TrackedObject::default()
    }

    pub fn set(&self, name: &str, child: impl Into<Trackable>) {
        self.0.write().unwrap().insert(name.to_string(), child.into());
    }

    pub fn get(&self, name: &str) -> Option<Trackable> {
        self.0.read().unwrap().get(name).cloned()
    }

    pub fn remove(&self, name: &str) -> Option<Trackable> {
        self.0.write().unwrap().remove(name)
    }

    pub fn variable(&self, name: &str) -> Option<Variable> {
        self.get(name).and_then(|t| t.as_variable().cloned())
    }

    pub fn object(&self, name: &str) -> Option<TrackedObject> {
        self.get(name).and_then(|t| t.as_object().cloned())
    }

    pub fn edges(&self) -> Vec<(String, Trackable)> {
        self.0.read().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

impl fmt::Debug for TrackedObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Trackable::Object(self.clone()).fmt(f)
    }
}

struct IteratorState {
    items: Vec<Tensor>,
    cursor: Mutex<u64>,
}

/// Iterator over an in-memory sequence whose position is checkpointed.
#[derive(Clone)]
pub struct DatasetIterator(Arc<IteratorState>);

impl DatasetIterator {
    pub fn new(items: Vec<Tensor>) -> DatasetIterator {
        DatasetIterator(Arc::new(IteratorState { items, cursor: Mutex::new(0) }))
    }

    pub fn position(&self) -> u64 {
        *self.0.cursor.lock().unwrap()
    }

    pub fn set_position(&self, p: u64) {
        *self.0.cursor.lock().unwrap() = p;
    }
}

impl Iterator for DatasetIterator {
    type Item = Tensor;

    fn next(&mut self) -> Option<Tensor> {
        let mut c = self.0.cursor.lock().unwrap();
        let item = self.0.items.get(*c as usize).cloned()?;
        *c += 1;
        Some(item)
    }
}

/// Opaque host bytes saved and restored verbatim.
#[derive(Clone, Default)]
pub struct Blob(Arc<RwLock<Vec<u8>>>);

impl Blob {
    pub fn new(bytes: Vec<u8>) -> Blob {
        Blob(Arc::new(RwLock::new(bytes)))
    }

    pub fn get(&self) -> Vec<u8> {
        self.0.read().unwrap().clone()
    }

    pub fn set(&self, bytes: Vec<u8>) {
        *self.0.write().unwrap() = bytes;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Tensor(HostTensor),
    Cursor(u64),
    Blob(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
struct SavedNode {
    kind: Kind,
    /// Sorted by name.
    edges: Vec<(String, usize)>,
    /// "/"-joined edge names of the first breadth-first path from the root.
    path: String,
    payload: Option<Payload>,
}

/// Serialized object graph plus the state of its stateful nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    nodes: Vec<SavedNode>,
}

impl Checkpoint {
    /// Snapshot of the graph reachable from `root`, nodes numbered in
    /// breadth-first order with edges taken by name.
    pub fn capture(root: &Trackable) -> Result<Checkpoint> {
        let mut index: HashMap<(Kind, usize), usize> = HashMap::new();
        let mut live: Vec<Trackable> = vec![root.clone()];
        let mut nodes = vec![SavedNode { kind: root.kind(), edges: Vec::new(), path: String::new(), payload: None }];
        index.insert(root.identity(), 0);
        let mut i = 0;
        while i < live.len() {
            let t = live[i].clone();
            let mut edges = Vec::new();
            for (name, child) in t.edges() {
                let target = match index.get(&child.identity()) {
                    Some(&j) => j,
                    None => {
                        let j = live.len();
                        index.insert(child.identity(), j);
                        let path = join(&nodes[i].path, &name);
                        nodes.push(SavedNode { kind: child.kind(), edges: Vec::new(), path, payload: None });
                        live.push(child);
                        j
                    }
                };
                edges.push((name, target));
            }
            nodes[i].edges = edges;
            nodes[i].payload = payload_of(&t)?;
            i += 1;
        }
        Ok(Checkpoint { nodes })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn payload_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.payload.is_some()).count()
    }

    /// Saved state keyed by path.
    pub fn payloads(&self) -> BTreeMap<String, Payload> {
        self.nodes.iter().filter_map(|n| n.payload.clone().map(|p| (n.path.clone(), p))).collect()
    }

    /// Removes the edge `name` leaving the node at `parent_path`, along with
    /// nodes that become unreachable.
    pub fn without_edge(&self, parent_path: &str, name: &str) -> Checkpoint {
        let mut nodes = self.nodes.clone();
        if let Some(p) = nodes.iter_mut().find(|n| n.path == parent_path) {
            p.edges.retain(|(e, _)| e != name);
        }
        let mut reach = vec![false; nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        reach[0] = true;
        while let Some(i) = queue.pop_front() {
            for &(_, j) in &nodes[i].edges {
                if !reach[j] {
                    reach[j] = true;
                    queue.push_back(j);
                }
            }
        }
        let mut remap = vec![usize::MAX; nodes.len()];
        let mut kept = Vec::new();
        for (i, n) in nodes.into_iter().enumerate() {
            if reach[i] {
                remap[i] = kept.len();
                kept.push(n);
            }
        }
        for n in &mut kept {
            for (_, j) in &mut n.edges {
                *j = remap[*j];
            }
        }
        Checkpoint { nodes: kept }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut strings = StringTable::new();
        let mut skeleton = Writer::default();
        skeleton.u32(self.nodes.len() as u32);
        for n in &self.nodes {
            skeleton.u8(n.kind as u8);
            skeleton.u32(n.edges.len() as u32);
            for (name, j) in &n.edges {
                skeleton.u32(strings.intern(name));
                skeleton.u32(*j as u32);
            }
        }
        let mut payload = Writer::default();
        payload.u32(self.payload_count() as u32);
        for n in self.nodes.iter().filter(|n| n.payload.is_some()) {
            payload.u32(strings.intern(&n.path));
            match n.payload.as_ref().expect("filtered") {
                Payload::Tensor(t) => payload.tensor(t),
                Payload::Cursor(c) => {
                    payload.u8(CURSOR_CODE);
                    payload.shape(&Shape::scalar());
                    payload.bytes(&c.to_le_bytes());
                }
                Payload::Blob(b) => {
                    payload.u8(BLOB_CODE);
                    payload.shape(&Shape::new([b.len()]));
                    payload.bytes(b);
                }
            }
        }
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.section(&strings.encode());
        w.section(&skeleton.buf);
        w.section(&payload.buf);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes, Error::Storage);
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Storage("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersionMismatch { expected: CHECKPOINT_VERSION, found: version });
        }
        let strings = StringTable::decode(&mut r.section()?)?;
        let mut sk = r.section()?;
        let n = sk.count()?;
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            let kind = Kind::from_code(sk.u8()?).ok_or_else(|| sk.err("unknown node kind"))?;
            let m = sk.count()?;
            let mut edges = Vec::with_capacity(m);
            for _ in 0..m {
                let name = sk.string(&strings)?.to_string();
                let j = sk.u32()? as usize;
                edges.push((name, j));
            }
            nodes.push(SavedNode { kind, edges, path: String::new(), payload: None });
        }
        if nodes.is_empty() || nodes.iter().any(|n| n.edges.iter().any(|(_, j)| *j >= nodes.len())) {
            return Err(Error::Storage("malformed skeleton".into()));
        }
        // Paths are recomputed from the skeleton, as at save time.
        let mut seen = vec![false; nodes.len()];
        seen[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(i) = queue.pop_front() {
            for (name, j) in nodes[i].edges.clone() {
                if !seen[j] {
                    seen[j] = true;
                    nodes[j].path = join(&nodes[i].path, &name);
                    queue.push_back(j);
                }
            }
        }
        let by_path: HashMap<String, usize> = nodes.iter().enumerate().map(|(i, n)| (n.path.clone(), i)).collect();
        let mut pr = r.section()?;
        for _ in 0..pr.count()? {
            let path = pr.string(&strings)?.to_string();
            let &i = by_path.get(&path).ok_or_else(|| pr.err("payload for unknown path"))?;
            let payload = match pr.u8()? {
                CURSOR_CODE => {
                    pr.shape()?;
                    Payload::Cursor(u64::from_le_bytes(pr.take(8)?.try_into().expect("8 bytes")))
                }
                BLOB_CODE => {
                    let shape = pr.shape()?;
                    Payload::Blob(pr.take(shape.num_elements())?.to_vec())
                }
                code => {
                    let dtype = DType::from_code(code).ok_or_else(|| pr.err("unknown dtype code"))?;
                    Payload::Tensor(pr.tensor_body(dtype)?)
                }
            };
            nodes[i].payload = Some(payload);
        }
        Ok(Checkpoint { nodes })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes())
            .map_err(|e| Error::Storage(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path.as_ref()).map_err(|e| Error::Storage(format!("{}: {e}", path.as_ref().display())))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn join(parent: &str, name: &str) -> String {
    if parent.is_empty() {
        name.to_string()
    } else {
        format!("{parent}/{name}")
    }
}

fn payload_of(t: &Trackable) -> Result<Option<Payload>> {
    Ok(match t {
        Trackable::Object(_) => None,
        Trackable::Variable(v) => Some(Payload::Tensor(v.snapshot().to_host()?)),
        Trackable::Iterator(i) => Some(Payload::Cursor(i.position())),
        Trackable::Blob(b) => Some(Payload::Blob(b.get())),
    })
}

/// Captures the graph under `root` and writes it to `path`.
pub fn save(root: &Trackable, path: impl AsRef<Path>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::capture(root)?;
    ckpt.write(path)?;
    Ok(ckpt)
}

/// Outcome of a restore. Paths name stateful nodes only; unmatched and
/// conflicting nodes keep their current values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchReport {
    pub matched: Vec<String>,
    pub unmatched_in_checkpoint: Vec<String>,
    pub unmatched_in_memory: Vec<String>,
    pub conflicts: Vec<Error>,
}

impl MatchReport {
    pub fn is_complete(&self) -> bool {
        self.unmatched_in_checkpoint.is_empty() && self.unmatched_in_memory.is_empty() && self.conflicts.is_empty()
    }
}

fn apply(t: &Trackable, payload: &Payload, path: &str) -> Result<()> {
    let conflict = |message: String| Error::DTypeOrShapeConflict { path: path.to_string(), message };
    match (t, payload) {
        (Trackable::Variable(v), Payload::Tensor(h)) => {
            let value = Tensor::from_host(h.clone()).rehome(v.device().clone())?;
            v.check_compatible(&value).map_err(|e| conflict(e.to_string()))?;
            v.store(value);
        }
        (Trackable::Iterator(i), Payload::Cursor(c)) => i.set_position(*c),
        (Trackable::Blob(b), Payload::Blob(bytes)) => b.set(bytes.clone()),
        _ => return Err(conflict("payload kind does not fit the object".into())),
    }
    Ok(())
}

/// Greedy restore: a synchronized breadth-first walk from both roots that
/// follows equal edge names in name order. The first pairing of a node
/// wins; later paths reaching an already paired node are not matched.
pub fn restore(root: &Trackable, ckpt: &Checkpoint) -> MatchReport {
    let mut report = MatchReport::default();
    let mut ckpt_seen = vec![false; ckpt.nodes.len()];
    let mut live_seen: HashSet<(Kind, usize)> = HashSet::new();
    let mut queue = VecDeque::from([(0usize, root.clone(), String::new())]);
    ckpt_seen[0] = true;
    live_seen.insert(root.identity());
    let mut live_paths: Vec<(String, Trackable)> = Vec::new();
    while let Some((i, t, path)) = queue.pop_front() {
        let saved = &ckpt.nodes[i];
        if saved.kind != t.kind() {
            report.conflicts.push(Error::DTypeOrShapeConflict {
                path: path.clone(),
                message: format!("saved {:?}, found {:?}", saved.kind, t.kind()),
            });
            continue;
        }
        if let Some(p) = &saved.payload {
            match apply(&t, p, &path) {
                Ok(()) => report.matched.push(path.clone()),
                Err(e) => report.conflicts.push(e),
            }
        }
        let live_edges: BTreeMap<String, Trackable> = t.edges().into_iter().collect();
        for (name, j) in &saved.edges {
            let Some(child) = live_edges.get(name) else { continue };
            if ckpt_seen[*j] || live_seen.contains(&child.identity()) {
                continue;
            }
            ckpt_seen[*j] = true;
            live_seen.insert(child.identity());
            queue.push_back((*j, child.clone(), join(&path, name)));
        }
        live_paths.push((path, t));
    }
    let handled: HashSet<&str> =
        report.matched.iter().chain(report.conflicts.iter().filter_map(conflict_path)).map(String::as_str).collect();
    report.unmatched_in_checkpoint = ckpt
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, n)| n.kind.is_stateful() && !ckpt_seen[*i])
        .map(|(_, n)| n.path.clone())
        .collect();
    report.unmatched_in_memory = live_stateful(root)
        .into_iter()
        .filter(|(p, t)| !live_seen.contains(&t.identity()) && !handled.contains(p.as_str()))
        .map(|(p, _)| p)
        .collect();
    report
}

fn conflict_path(e: &Error) -> Option<&String> {
    match e {
        Error::DTypeOrShapeConflict { path, .. } => Some(path),
        _ => None,
    }
}

/// Stateful nodes reachable from `root`, each at its first breadth-first
/// path.
fn live_stateful(root: &Trackable) -> Vec<(String, Trackable)> {
    let mut seen = HashSet::from([root.identity()]);
    let mut queue = VecDeque::from([(String::new(), root.clone())]);
    let mut out = Vec::new();
    while let Some((path, t)) = queue.pop_front() {
        for (name, child) in t.edges() {
            if seen.insert(child.identity()) {
                queue.push_back((join(&path, &name), child));
            }
        }
        if t.kind().is_stateful() {
            out.push((path, t));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{Runtime, RuntimeOptions};

    fn var(x: f32) -> Variable {
        Variable::new(&Tensor::scalar_f32(x)).unwrap()
    }

    #[test]
    fn empty_root_has_one_node() {
        let c = Checkpoint::capture(&TrackedObject::new().into()).unwrap();
        assert_eq!((c.node_count(), c.payload_count()), (1, 0));
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn cycles_terminate_and_round_trip() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let a = TrackedObject::new();
        let b = TrackedObject::new();
        a.set("b", &b);
        b.set("a", &a);
        b.set("w", var(2.0));
        let c = Checkpoint::capture(&a.clone().into()).unwrap();
        assert_eq!(c.node_count(), 3);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let report = restore(&a.into(), &back);
        assert_eq!(report.matched, vec!["b/w".to_string()]);
        assert!(report.is_complete());
    }

    #[test]
    fn shape_conflict_is_reported_and_skipped() {
        let rt = Runtime::new(RuntimeOptions::default());
        let _g = rt.enter();
        let saved = TrackedObject::new();
        saved.set("x", var(1.0));
        saved.set("y", var(2.0));
        let c = Checkpoint::capture(&saved.into()).unwrap();
        let live = TrackedObject::new();
        live.set("x", Variable::new(&Tensor::from_f32(vec![0.0, 0.0], [2]).unwrap()).unwrap());
        live.set("y", var(0.0));
        let report = restore(&live.clone().into(), &c);
        assert_eq!(report.matched, vec!["y".to_string()]);
        assert!(matches!(&report.conflicts[..], [Error::DTypeOrShapeConflict { path, .. }] if path == "x"));
        assert!(report.unmatched_in_memory.is_empty());
        assert_eq!(live.variable("y").unwrap().read().unwrap().to_scalar().unwrap(), 2.0);
    }
}
