//! `SGF1` graph-function container.
//!
//! ```text
//! "SGF1" u32:version function
//! function := section(strings) section(inputs) section(nodes) section(outputs) section(library)
//! strings  := u32:n (u32:len bytes)*            id 0 is ""
//! inputs   := u32:name u32:n (u32:name u8:dtype u16:rank i64*)*   dtype | 0x80 marks a variable
//! nodes    := u32:n (u32:op u32:k (u32:node u16:out)* u32:m (u32:key u8:tag value)* u32:device)*
//! outputs  := u32:n (u32:name u32:node u16:out)*
//! library  := u32:n section(function)*           sorted by name
//! ```
//!
//! Node output types are not stored; they are re-inferred on load.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::codec::{Reader, StringTable, Writer};
use crate::dispatch::is_variable_op;
use crate::error::{Error, Result};
use crate::registry::{AttrValue, Attrs, InferContext, OperandSpec, TensorSpec};
use crate::runtime::Runtime;

use super::{GraphFunction, Input, InputKind, Library, Node, Output, ValueRef};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SGF1";
const VARIABLE_FLAG: u8 = 0x80;

mod tag {
    pub const INT: u8 = 0;
    pub const FLOAT: u8 = 1;
    pub const BOOL: u8 = 2;
    pub const STR: u8 = 3;
    pub const DTYPE: u8 = 4;
    pub const SHAPE: u8 = 5;
    pub const FUNC: u8 = 6;
    pub const TENSOR: u8 = 7;
}

pub fn serialize(g: &GraphFunction) -> Result<Vec<u8>> {
    if !g.is_serializable() {
        return Err(Error::NotSerializable(g.name().to_string()));
    }
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.bytes(&encode_function(g));
    Ok(w.buf)
}

fn encode_attr(w: &mut Writer, strings: &mut StringTable, v: &AttrValue) {
    match v {
        AttrValue::Int(i) => {
            w.u8(tag::INT);
            w.i64(*i);
        }
        AttrValue::Float(f) => {
            w.u8(tag::FLOAT);
            w.f64(*f);
        }
        AttrValue::Bool(b) => {
            w.u8(tag::BOOL);
            w.u8(*b as u8);
        }
        AttrValue::Str(s) => {
            w.u8(tag::STR);
            w.u32(strings.intern(s));
        }
        AttrValue::DType(d) => {
            w.u8(tag::DTYPE);
            w.u8(d.code());
        }
        AttrValue::Shape(s) => {
            w.u8(tag::SHAPE);
            w.partial_shape(s);
        }
        AttrValue::Func(f) => {
            w.u8(tag::FUNC);
            w.u32(strings.intern(f));
        }
        AttrValue::Tensor(t) => {
            w.u8(tag::TENSOR);
            w.tensor(t);
        }
    }
}

fn encode_function(g: &GraphFunction) -> Vec<u8> {
    let mut strings = StringTable::new();

    let mut inputs = Writer::default();
    inputs.u32(strings.intern(&g.name));
    inputs.u32(g.inputs.len() as u32);
    for input in &g.inputs {
        inputs.u32(strings.intern(&input.name));
        let flag = if input.kind == InputKind::Variable { VARIABLE_FLAG } else { 0 };
        inputs.u8(input.spec.dtype.code() | flag);
        inputs.partial_shape(&input.spec.shape);
    }

    let mut nodes = Writer::default();
    nodes.u32(g.nodes.len() as u32);
    for n in &g.nodes {
        nodes.u32(strings.intern(&n.op));
        nodes.u32(n.inputs.len() as u32);
        for r in &n.inputs {
            nodes.u32(r.node);
            nodes.u16(r.output);
        }
        nodes.u32(n.attrs.len() as u32);
        for (k, v) in &n.attrs {
            nodes.u32(strings.intern(k));
            encode_attr(&mut nodes, &mut strings, v);
        }
        nodes.u32(n.device.as_ref().map_or(0, |d| strings.intern(&d.to_string())));
    }

    let mut outputs = Writer::default();
    outputs.u32(g.outputs.len() as u32);
    for o in &g.outputs {
        outputs.u32(strings.intern(&o.name));
        outputs.u32(o.value.node);
        outputs.u16(o.value.output);
    }

    let mut library = Writer::default();
    library.u32(g.library.len() as u32);
    for f in g.library.values() {
        library.section(&encode_function(f));
    }

    let mut w = Writer::default();
    w.section(&strings.encode());
    w.section(&inputs.buf);
    w.section(&nodes.buf);
    w.section(&outputs.buf);
    w.section(&library.buf);
    w.buf
}

/// Decodes a container produced by [`serialize`]. Ops must exist in the
/// current runtime's registry.
pub fn deserialize(bytes: &[u8]) -> Result<GraphFunction> {
    let mut r = Reader::new(bytes, Error::CorruptGraph);
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::CorruptGraph("missing SGF1 magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch { expected: FORMAT_VERSION, found: version });
    }
    let rt = Runtime::current();
    let g = decode_function(&rt, &mut r, &[])?;
    if !r.is_empty() {
        return Err(r.err("trailing bytes"));
    }
    Ok(g)
}

fn decode_attr(r: &mut Reader<'_>, strings: &[String]) -> Result<AttrValue> {
    Ok(match r.u8()? {
        tag::INT => AttrValue::Int(r.i64()?),
        tag::FLOAT => AttrValue::Float(r.f64()?),
        tag::BOOL => AttrValue::Bool(r.u8()? != 0),
        tag::STR => AttrValue::Str(r.string(strings)?.to_string()),
        tag::DTYPE => AttrValue::DType(r.dtype()?),
        tag::SHAPE => AttrValue::Shape(r.partial_shape()?),
        tag::FUNC => AttrValue::Func(r.string(strings)?.to_string()),
        tag::TENSOR => AttrValue::Tensor(r.tensor()?),
        _ => return Err(r.err("unknown attr tag")),
    })
}

fn decode_function(rt: &Runtime, r: &mut Reader<'_>, parents: &[&Library]) -> Result<GraphFunction> {
    let strings = StringTable::decode(&mut r.section()?)?;

    let mut sec = r.section()?;
    let name = sec.string(&strings)?.to_string();
    let n_inputs = sec.count()?;
    let mut inputs = Vec::with_capacity(n_inputs);
    for _ in 0..n_inputs {
        let input_name = sec.string(&strings)?.to_string();
        let code = sec.u8()?;
        let kind = if code & VARIABLE_FLAG != 0 { InputKind::Variable } else { InputKind::Tensor };
        let dtype = crate::tensor::DType::from_code(code & !VARIABLE_FLAG).ok_or_else(|| sec.err("unknown dtype"))?;
        let shape = sec.partial_shape()?;
        inputs.push(Input { name: input_name, kind, spec: TensorSpec { dtype, shape } });
    }

    let mut raw_nodes = Vec::new();
    let mut sec_nodes = r.section()?;
    for _ in 0..sec_nodes.count()? {
        let op = sec_nodes.string(&strings)?.to_string();
        let k = sec_nodes.count()?;
        let mut refs = Vec::with_capacity(k);
        for _ in 0..k {
            refs.push(ValueRef { node: sec_nodes.u32()?, output: sec_nodes.u16()? });
        }
        let m = sec_nodes.count()?;
        let mut attrs = Attrs::new();
        for _ in 0..m {
            let key = sec_nodes.string(&strings)?.to_string();
            let v = decode_attr(&mut sec_nodes, &strings)?;
            attrs.insert(key, v);
        }
        let device = match sec_nodes.string(&strings)? {
            "" => None,
            d => Some(d.parse().map_err(|_| sec_nodes.err("bad device name"))?),
        };
        raw_nodes.push((op, refs, attrs, device));
    }

    let mut sec_out = r.section()?;
    let mut outputs = Vec::new();
    for _ in 0..sec_out.count()? {
        let out_name = sec_out.string(&strings)?.to_string();
        outputs.push(Output { name: out_name, value: ValueRef { node: sec_out.u32()?, output: sec_out.u16()? } });
    }

    let mut library = BTreeMap::new();
    {
        let mut sec_lib = r.section()?;
        let count = sec_lib.count()?;
        let mut fns = Vec::with_capacity(count);
        for _ in 0..count {
            let mut body = sec_lib.section()?;
            // Library entries may call siblings decoded earlier; resolution
            // falls back to the runtime for the rest.
            let f = decode_function(rt, &mut body, parents)?;
            fns.push(f);
        }
        for f in fns {
            if library.insert(f.name.clone(), Arc::new(f)).is_some() {
                return Err(Error::CorruptGraph("duplicate library entry".into()));
            }
        }
    }

    let n_in = inputs.len() as u32;
    let mut nodes: Vec<Node> = Vec::with_capacity(raw_nodes.len());
    for (j, (op, refs, attrs, device)) in raw_nodes.into_iter().enumerate() {
        let id = n_in + j as u32;
        let def = rt.registry().get(&op).ok_or_else(|| Error::CorruptGraph(format!("unknown op `{op}`")))?;
        def.validate(refs.len(), &attrs).map_err(|e| Error::CorruptGraph(e.to_string()))?;
        let mut specs = Vec::with_capacity(refs.len());
        for r in &refs {
            let spec = if r.node < n_in {
                let input = &inputs[r.node as usize];
                match input.kind {
                    InputKind::Tensor => OperandSpec::Tensor(input.spec.clone()),
                    InputKind::Variable => OperandSpec::Variable(input.spec.clone()),
                }
            } else if r.node < id {
                let producer = &nodes[(r.node - n_in) as usize];
                let s = producer
                    .outputs
                    .get(r.output as usize)
                    .ok_or_else(|| Error::CorruptGraph(format!("node {} has no output {}", r.node, r.output)))?;
                OperandSpec::Tensor(s.clone())
            } else {
                return Err(Error::CorruptGraph(format!("node {id} references later node {}", r.node)));
            };
            specs.push(spec);
        }
        if is_variable_op(&op) && !specs.first().is_some_and(OperandSpec::is_variable) {
            return Err(Error::CorruptGraph(format!("node {id}: `{op}` needs a variable input")));
        }
        let resolve = |n: &str| {
            library
                .get(n)
                .cloned()
                .or_else(|| parents.iter().find_map(|l| l.get(n).cloned()))
                .or_else(|| rt.function(n))
        };
        let cx = InferContext { rt, op: &op, inputs: &specs, attrs: &attrs, resolve: &resolve };
        let out_specs = (def.infer)(&cx).map_err(|e| Error::CorruptGraph(format!("node {id}: {e}")))?;
        nodes.push(Node { id, op, inputs: refs, attrs, device, outputs: out_specs });
    }
    GraphFunction::new(name, inputs, nodes, outputs, library)
}
