use std::collections::BTreeMap;

use proptest::prelude::*;
use stageflow::graph::{
    constant_fold, deserialize, prune, serialize, GraphFunction, Input, InputKind, Node, Output, ValueRef,
};
use stageflow::{
    host_call, ops, register_callback, stage_with_signature, Arg, AttrValue, Attrs, DType, Operand, Runtime,
    RuntimeOptions, Shape, Tensor, TensorSpec,
};

fn spec(dtype: DType, dims: &[usize]) -> TensorSpec {
    TensorSpec::new(dtype, Shape::from(dims.to_vec()))
}

fn node(id: u32, op: &str, inputs: &[u32], attrs: Attrs, outputs: Vec<TensorSpec>) -> Node {
    Node { id, op: op.into(), inputs: inputs.iter().map(|&n| vref(n)).collect(), attrs, device: None, outputs }
}

fn vref(node: u32) -> ValueRef {
    ValueRef { node, output: 0 }
}

fn constant(id: u32, values: &[f64], dims: &[usize]) -> Node {
    let host = Tensor::from_values(values, dims, DType::Float64).unwrap().to_host().unwrap();
    node(id, "constant", &[], [("value".to_string(), AttrValue::Tensor(host))].into(), vec![spec(DType::Float64, dims)])
}

fn input(name: &str, dims: &[usize]) -> Input {
    Input { name: name.into(), kind: InputKind::Tensor, spec: spec(DType::Float64, dims) }
}

fn out(node: u32) -> Output {
    Output { name: format!("out{node}"), value: vref(node) }
}

fn graph(inputs: Vec<Input>, nodes: Vec<Node>, outputs: Vec<Output>) -> GraphFunction {
    GraphFunction::new("g", inputs, nodes, outputs, Default::default()).unwrap()
}

fn f64s(values: &[f64], dims: &[usize]) -> Operand {
    Operand::Tensor(Tensor::from_values(values, dims, DType::Float64).unwrap())
}

fn assert_bit_eq(a: &[Tensor], b: &[Tensor]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!(x.bit_eq(y).unwrap(), "{:?} vs {:?}", x.to_f64_vec(), y.to_f64_vec());
    }
}

fn op_counts(g: &GraphFunction) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for n in g.nodes() {
        *counts.entry(n.op.clone()).or_default() += 1;
    }
    counts
}

fn runtime() -> Runtime {
    Runtime::new(RuntimeOptions { workers: 1, ..RuntimeOptions::default() })
}

#[test]
fn prune_drops_unused_exp() {
    let rt = runtime();
    let _g = rt.enter();
    let s = spec(DType::Float64, &[3]);
    let g = graph(
        vec![input("x", &[3])],
        vec![node(1, "exp", &[0], Attrs::new(), vec![s.clone()]), node(2, "neg", &[0], Attrs::new(), vec![s])],
        vec![out(2)],
    );
    let pruned = prune(&g);
    assert_eq!(pruned.op_count("exp"), 0);
    assert_eq!(pruned.nodes().len(), 1);
    let x = [f64s(&[1.0, -2.0, 0.5], &[3])];
    assert_bit_eq(&g.execute(&x).unwrap(), &pruned.execute(&x).unwrap());
}

#[test]
fn stateful_nodes_survive_prune() {
    let rt = runtime();
    let _g = rt.enter();
    let scalar = spec(DType::Float64, &[]);
    let v = Input { name: "v".into(), kind: InputKind::Variable, spec: scalar.clone() };
    let draw: Attrs = [
        ("shape".to_string(), AttrValue::Shape(Shape::from([2usize]).into())),
        ("dtype".to_string(), AttrValue::DType(DType::Float64)),
    ]
    .into();
    let g = graph(
        vec![input("x", &[]), v],
        vec![
            node(2, "random_normal", &[], draw, vec![spec(DType::Float64, &[2])]),
            node(3, "read_variable", &[1], Attrs::new(), vec![scalar.clone()]),
            node(4, "assign_add_variable", &[1, 3], Attrs::new(), vec![]),
            node(5, "neg", &[0], Attrs::new(), vec![scalar]),
        ],
        vec![out(5)],
    );
    let pruned = prune(&g);
    assert_eq!(op_counts(&pruned), op_counts(&g));
}

#[test]
fn adding_two_constants_folds_to_one() {
    let rt = runtime();
    let _g = rt.enter();
    let g = graph(
        vec![],
        vec![
            constant(0, &[2.0], &[]),
            constant(1, &[3.0], &[]),
            node(2, "add", &[0, 1], Attrs::new(), vec![spec(DType::Float64, &[])]),
        ],
        vec![out(2)],
    );
    let folded = prune(&constant_fold(&g));
    assert_eq!(op_counts(&folded), BTreeMap::from([("constant".to_string(), 1)]));
    assert_eq!(folded.execute(&[]).unwrap()[0].to_scalar().unwrap(), 5.0);
}

#[test]
fn identity_times_diagonal_folds_bit_exactly() {
    let rt = runtime();
    let _g = rt.enter();
    let m = spec(DType::Float64, &[3, 3]);
    let eye: Attrs =
        [("n".to_string(), AttrValue::Int(3)), ("dtype".to_string(), AttrValue::DType(DType::Float64))].into();
    let g = graph(
        vec![input("x", &[3, 3])],
        vec![
            node(1, "eye", &[], eye, vec![m.clone()]),
            constant(2, &[0.1, 2.5, -7.25], &[3]),
            node(3, "diag", &[2], Attrs::new(), vec![m.clone()]),
            node(4, "matmul", &[1, 3], Attrs::new(), vec![m.clone()]),
            node(5, "add", &[4, 0], Attrs::new(), vec![m]),
        ],
        vec![out(5)],
    );
    let folded = prune(&constant_fold(&g));
    assert_eq!(op_counts(&folded), BTreeMap::from([("add".to_string(), 1), ("constant".to_string(), 1)]));
    let x = [f64s(&[0.3, -1.0, 2.0, 4.5, 0.0, 1e-3, -0.7, 8.0, 3.3], &[3, 3])];
    assert_bit_eq(&g.execute(&x).unwrap(), &folded.execute(&x).unwrap());
}

#[test]
fn thousand_node_chain_runs_and_round_trips() {
    let rt = runtime();
    let _g = rt.enter();
    let s = spec(DType::Float64, &[]);
    let mut nodes = vec![constant(1, &[1.0], &[])];
    let mut prev = 0;
    for i in 0..1000u32 {
        nodes.push(node(2 + i, "add", &[prev, 1], Attrs::new(), vec![s.clone()]));
        prev = 2 + i;
    }
    let g = graph(vec![input("x", &[])], nodes, vec![out(prev)]);
    assert_eq!(g.execute(&[f64s(&[0.5], &[])]).unwrap()[0].to_scalar().unwrap(), 1000.5);
    assert_eq!(prune(&g).nodes().len(), 1001);
    assert_eq!(deserialize(&serialize(&g).unwrap()).unwrap(), g);
}

#[test]
fn host_call_marks_graph_unserializable() {
    let rt = runtime();
    let _g = rt.enter();
    let cb = register_callback("twice", vec![spec(DType::Float64, &[])], |xs| Ok(vec![ops::add(&xs[0], &xs[0])?]));
    let f = stage_with_signature("escape", vec![spec(DType::Float64, &[])], move |a| {
        host_call(&cb, &[a[0].as_tensor().unwrap().clone()])
    });
    let x = Tensor::scalar_f64(1.5);
    assert_eq!(f.call(&[Arg::from(&x)]).unwrap()[0].to_scalar().unwrap(), 3.0);
    let g = f.get_concrete(&f.trace_key(&[Arg::from(&x)]).unwrap()).unwrap();
    assert!(!g.is_serializable());
    assert!(serialize(&g).is_err());
}

/// One random op: kind, then two picks into the values defined so far.
type Step = (u8, prop::sample::Index, prop::sample::Index, i8);

/// Stateless graph over two [2, 2] inputs in which every value is [2, 2].
fn build(steps: &[Step], extra_output: prop::sample::Index) -> GraphFunction {
    let m = spec(DType::Float64, &[2, 2]);
    let mut nodes = Vec::new();
    for (i, (kind, a, b, c)) in steps.iter().enumerate() {
        let id = 2 + i as u32;
        let (a, b) = (a.index(id as usize) as u32, b.index(id as usize) as u32);
        nodes.push(match kind % 8 {
            0 => constant(id, &[*c as f64 / 4.0, 1.0, -0.5, *c as f64], &[2, 2]),
            1 => node(id, "neg", &[a], Attrs::new(), vec![m.clone()]),
            2 => node(id, "sigmoid", &[a], Attrs::new(), vec![m.clone()]),
            3 => node(id, "add", &[a, b], Attrs::new(), vec![m.clone()]),
            4 => node(id, "sub", &[a, b], Attrs::new(), vec![m.clone()]),
            5 => node(id, "mul", &[a, b], Attrs::new(), vec![m.clone()]),
            6 => node(id, "matmul", &[a, b], Attrs::new(), vec![m.clone()]),
            _ => node(id, "transpose", &[a], Attrs::new(), vec![m.clone()]),
        });
    }
    let last = 1 + steps.len() as u32;
    let other = extra_output.index(last as usize + 1) as u32;
    graph(vec![input("a", &[2, 2]), input("b", &[2, 2])], nodes, vec![out(last), out(other)])
}

fn arb_graph() -> impl Strategy<Value = GraphFunction> {
    (prop::collection::vec(any::<Step>(), 1..30), any::<prop::sample::Index>()).prop_map(|(s, o)| build(&s, o))
}

fn arb_args() -> impl Strategy<Value = Vec<Operand>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2)
        .prop_map(|vs| vs.iter().map(|v| f64s(v, &[2, 2])).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimizing_preserves_outputs_bit_exactly(g in arb_graph(), args in arb_args()) {
        let rt = runtime();
        let _g = rt.enter();
        let want = g.execute(&args).unwrap();
        assert_bit_eq(&want, &prune(&constant_fold(&g)).execute(&args).unwrap());
        assert_bit_eq(&want, &constant_fold(&prune(&g)).execute(&args).unwrap());
        prop_assert!(prune(&g).nodes().len() <= g.nodes().len());
    }

    #[test]
    fn passes_are_idempotent_and_commute(g in arb_graph()) {
        let rt = runtime();
        let _g = rt.enter();
        let (p, f) = (prune(&g), constant_fold(&g));
        prop_assert_eq!(&prune(&p), &p);
        prop_assert_eq!(&constant_fold(&f), &f);
        let (pf, fp) = (prune(&f), constant_fold(&p));
        prop_assert_eq!(op_counts(&pf), op_counts(&fp));
        prop_assert_eq!(pf.nodes().len(), fp.nodes().len());
    }

    #[test]
    fn serialization_round_trips(g in arb_graph()) {
        let rt = runtime();
        let _g = rt.enter();
        for h in [&g, &prune(&constant_fold(&g))] {
            prop_assert_eq!(&deserialize(&serialize(h).unwrap()).unwrap(), h);
        }
    }
}
