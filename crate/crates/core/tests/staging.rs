use std::sync::{Arc, Mutex};

use stageflow::graph::{deserialize, serialize};
use stageflow::{
    escape_trace, ops, stage, Arg, DType, Error, GradientTape, Operand, Runtime, RuntimeOptions, Tensor, Variable,
};

fn rt() -> Runtime {
    Runtime::new(RuntimeOptions { workers: 1, ..RuntimeOptions::default() })
}

fn t(arg: &Arg) -> &Tensor {
    arg.as_tensor().expect("tensor argument")
}

#[test]
fn select_matches_eager() {
    let rt = rt();
    let _g = rt.enter();
    let select = |x: &Tensor| -> stageflow::Result<Tensor> {
        let row = Tensor::from_f32(vec![1.0, 0.0], [1, 2])?;
        ops::matmul(&row, x)
    };
    let x = Tensor::from_f32(vec![2.0, -2.0], [2, 1]).unwrap();
    let eager = select(&x).unwrap();
    let f = stage("select", move |a| Ok(vec![select(t(&a[0]))?]));
    let staged = f.call(&[x.into()]).unwrap().remove(0);
    assert_eq!(staged.to_f64_vec().unwrap(), vec![2.0]);
    assert!(staged.bit_eq(&eager).unwrap());
}

#[test]
fn boolean_argument_specializes() {
    let rt = rt();
    let _g = rt.enter();
    let lossy = stage("lossy_matmul", |a| {
        let mut out = ops::matmul(t(&a[0]), t(&a[1]))?;
        if a[2].as_bool().unwrap() {
            out = ops::dropout(&out, 0.2)?;
        }
        Ok(vec![out])
    });
    let w = ops::random_normal(&[3, 5], DType::Float32, 0.0, 1.0).unwrap();
    let x = ops::random_normal(&[5, 1], DType::Float32, 0.0, 1.0).unwrap();
    let args = |training: bool| vec![Arg::from(&w), Arg::from(&x), Arg::Bool(training)];
    lossy.call(&args(true)).unwrap();
    let exact = lossy.call(&args(false)).unwrap().remove(0);
    assert_eq!(lossy.cache_size(), 2);
    let with = lossy.get_concrete(&lossy.trace_key(&args(true)).unwrap()).unwrap();
    let without = lossy.get_concrete(&lossy.trace_key(&args(false)).unwrap()).unwrap();
    assert_eq!(with.op_count("dropout"), 1);
    assert_eq!(without.op_count("dropout"), 0);
    assert!(exact.bit_eq(&ops::matmul(&w, &x).unwrap()).unwrap());
    let traces = rt.metrics().traces();
    lossy.call(&args(false)).unwrap();
    lossy.call(&args(true)).unwrap();
    assert_eq!(rt.metrics().traces(), traces);
}

#[test]
fn host_randomness_is_frozen_at_trace_time() {
    let rt = rt();
    let _g = rt.enter();
    let seed = Arc::new(Mutex::new(7u64));
    let f = stage("add_noise", move |_| {
        let mut s = seed.lock().unwrap();
        *s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Ok(vec![Tensor::scalar_f64((*s >> 11) as f64 / (1u64 << 53) as f64)])
    });
    let a = f.call(&[]).unwrap().remove(0).to_scalar().unwrap();
    let b = f.call(&[]).unwrap().remove(0).to_scalar().unwrap();
    assert_eq!(a, b);
}

#[test]
fn closure_mutation_interleaves() {
    let rt = rt();
    let _g = rt.enter();
    let v = Variable::new(&Tensor::scalar_f32(0.0)).unwrap();
    let vc = v.clone();
    let mutate = stage("mutate", move |_| {
        vc.assign_add(&Tensor::scalar_f32(1.0))?;
        Ok(vec![vc.read_value()?])
    });
    let out = mutate.call(&[]).unwrap().remove(0);
    assert_eq!(out.to_scalar().unwrap(), 1.0);
    assert_eq!(v.read_value().unwrap().to_scalar().unwrap(), 1.0);
    v.assign_add(&Tensor::scalar_f32(1.0)).unwrap();
    assert_eq!(v.read_value().unwrap().to_scalar().unwrap(), 2.0);
    mutate.call(&[]).unwrap();
    assert_eq!(v.read_value().unwrap().to_scalar().unwrap(), 3.0);
}

#[test]
fn lazy_state_creation_traces_twice() {
    let rt = rt();
    let _g = rt.enter();
    let slot: Arc<Mutex<Option<Variable>>> = Arc::default();
    let s = Arc::clone(&slot);
    let f = stage("lazy", move |a| {
        let mut guard = s.lock().unwrap();
        if guard.is_none() {
            *guard = Some(Variable::new_with(|| Ok(Tensor::scalar_f32(2.0)))?);
        }
        let v = guard.as_ref().unwrap();
        Ok(vec![ops::mul(t(&a[0]), &v.read()?)?])
    });
    let y = f.call(&[Tensor::scalar_f32(4.0).into()]).unwrap().remove(0);
    assert_eq!(y.to_scalar().unwrap(), 8.0);
    assert_eq!(rt.metrics().traces(), 2);
    assert_eq!(f.created_variables().len(), 1);
    f.call(&[Tensor::scalar_f32(5.0).into()]).unwrap();
    assert_eq!(rt.metrics().traces(), 2);
}

#[test]
fn eager_state_creation_fails() {
    let rt = rt();
    let _g = rt.enter();
    let f = stage("greedy", |a| {
        let v = Variable::new_with(|| Ok(Tensor::scalar_f32(1.0)))?;
        Ok(vec![ops::add(t(&a[0]), &v.read()?)?])
    });
    assert!(matches!(f.call(&[Tensor::scalar_f32(1.0).into()]), Err(Error::VariableCreation(_))));
}

#[test]
fn nested_functions_compose() {
    let rt = rt();
    let _g = rt.enter();
    let inner = Arc::new(stage("inner", |a| Ok(vec![ops::relu(t(&a[0]))?])));
    let i2 = Arc::clone(&inner);
    let outer = stage("outer", move |a| i2.call(&[ops::matmul(t(&a[0]), t(&a[1]))?.into()]));
    let a = ops::eye(3, DType::Float32).unwrap();
    let b = ops::diag(&Tensor::from_f32(vec![-1.0, 1.0, 2.0], [3]).unwrap()).unwrap();
    let y = outer.call(&[Arg::from(&a), Arg::from(&b)]).unwrap().remove(0);
    assert_eq!(y.to_f64_vec().unwrap(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
    let g = outer.get_concrete(&outer.trace_key(&[Arg::from(&a), Arg::from(&b)]).unwrap()).unwrap();
    assert_eq!(g.op_count("call_function"), 1);
    assert_eq!(inner.cache_size(), 1);
    let back = deserialize(&serialize(&g).unwrap()).unwrap();
    assert_eq!(back, *g);
    let y2 = back.execute(&[Operand::from(&a), Operand::from(&b)]).unwrap().remove(0);
    assert!(y2.bit_eq(&y).unwrap());
}

#[test]
fn host_loops_unroll() {
    let rt = rt();
    let _g = rt.enter();
    let f = stage("unrolled", |a| {
        let mut x = t(&a[0]).clone();
        for _ in 0..5 {
            x = ops::add(&x, t(&a[1]))?;
        }
        Ok(vec![x])
    });
    let args = [Tensor::scalar_f32(0.0).into(), Tensor::scalar_f32(1.0).into()];
    assert_eq!(f.call(&args).unwrap()[0].to_scalar().unwrap(), 5.0);
    assert_eq!(f.get_concrete(&f.trace_key(&args).unwrap()).unwrap().op_count("add"), 5);
}

#[test]
fn concrete_only_use_is_a_staging_error() {
    let rt = rt();
    let _g = rt.enter();
    let f = stage("peek", |a| {
        let v = t(&a[0]).to_scalar()?;
        Ok(vec![Tensor::scalar_f32(v as f32)])
    });
    assert!(matches!(f.call(&[Tensor::scalar_f32(1.0).into()]), Err(Error::Staging(_))));
}

#[test]
fn escape_trace_runs_eagerly() {
    let rt = rt();
    let _g = rt.enter();
    let seen = Arc::new(Mutex::new(None));
    let s = Arc::clone(&seen);
    let f = stage("escape", move |a| {
        let c = {
            let _e = escape_trace();
            ops::constant(Tensor::scalar_f32(5.0).to_host()?)?
        };
        *s.lock().unwrap() = Some(c.is_symbolic());
        Ok(vec![ops::add(t(&a[0]), &c)?])
    });
    let y = f.call(&[Tensor::scalar_f32(1.0).into()]).unwrap().remove(0);
    assert_eq!(y.to_scalar().unwrap(), 6.0);
    assert_eq!(*seen.lock().unwrap(), Some(false));
}

#[test]
fn dead_captured_variable_fails() {
    let rt = rt();
    let _g = rt.enter();
    let v = Variable::new(&Tensor::scalar_f32(1.0)).unwrap();
    let w = v.downgrade();
    let f = stage("reader", move |_| Ok(vec![w.upgrade()?.read()?]));
    assert_eq!(f.call(&[]).unwrap()[0].to_scalar().unwrap(), 1.0);
    drop(v);
    assert!(matches!(f.call(&[]), Err(Error::DeadVariable(_))));
}

#[test]
fn retracing_is_deterministic() {
    let rt = rt();
    let _g = rt.enter();
    let c = Tensor::scalar_f32(2.0);
    let body = move |a: &[Arg]| Ok(vec![ops::mul(&ops::add(t(&a[0]), &c)?, &c)?]);
    let f1 = stage("det", body.clone());
    let f2 = stage("det", body);
    let x = [Tensor::scalar_f32(1.0).into()];
    f1.call(&x).unwrap();
    f2.call(&x).unwrap();
    let g1 = f1.get_concrete(&f1.trace_key(&x).unwrap()).unwrap();
    let g2 = f2.get_concrete(&f2.trace_key(&x).unwrap()).unwrap();
    let strip = |g: &stageflow::GraphFunction| serialize(g).unwrap().len();
    assert_eq!(strip(&g1), strip(&g2));
    assert_eq!(g1.nodes(), g2.nodes());
}

#[test]
fn staged_gradient_through_variables() {
    let rt = rt();
    let _g = rt.enter();
    let w = Variable::new(&Tensor::scalar_f64(3.0)).unwrap();
    let wc = w.clone();
    let f = stage("scale", move |a| Ok(vec![ops::mul(&ops::mul(t(&a[0]), &wc.read()?)?, &wc.read()?)?]));
    let x = Tensor::scalar_f64(2.0);
    let tape = GradientTape::new();
    tape.watch(&x).unwrap();
    let y = f.call(&[Arg::from(&x)]).unwrap().remove(0);
    tape.end().unwrap();
    let g = tape.gradient(&y, &[Operand::from(&x), Operand::from(&w)]).unwrap();
    assert_eq!(y.to_scalar().unwrap(), 18.0);
    assert_eq!(g[0].to_scalar().unwrap(), 9.0);
    assert_eq!(g[1].to_scalar().unwrap(), 12.0);
}
