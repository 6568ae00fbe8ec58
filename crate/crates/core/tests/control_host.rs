use stageflow::graph::serialize;
use stageflow::{
    host_call, ops, register_callback, stage, Arg, DType, Error, GradientTape, Operand, Runtime, RuntimeOptions, Shape,
    Tensor, TensorSpec,
};

fn rt() -> Runtime {
    Runtime::new(RuntimeOptions { workers: 1, ..RuntimeOptions::default() })
}

fn t(arg: &Arg) -> &Tensor {
    arg.as_tensor().expect("tensor argument")
}

fn scalar_f64() -> TensorSpec {
    TensorSpec::new(DType::Float64, Shape::scalar())
}

#[test]
fn cond_selects_at_run_time_and_differentiates() {
    let rt = rt();
    let _g = rt.enter();
    let f = stage("piecewise", |a| {
        let x = t(&a[0]);
        let pred = ops::greater(x, &ops::zeros_like(x)?)?;
        ops::cond(&pred, |v| Ok(vec![ops::mul(&v[0], &v[0])?]), |v| Ok(vec![ops::neg(&v[0])?]), &[x.clone()])
    });
    for (x, y, dy) in [(3.0, 9.0, 6.0), (-2.0, 2.0, -1.0)] {
        let x = Tensor::scalar_f64(x);
        let tape = GradientTape::new();
        tape.watch(&x).unwrap();
        let out = f.call(&[Arg::from(&x)]).unwrap().remove(0);
        tape.end().unwrap();
        assert_eq!(out.to_scalar().unwrap(), y);
        assert_eq!(tape.gradient(&out, &[Operand::from(&x)]).unwrap()[0].to_scalar().unwrap(), dy);
    }
    assert_eq!(f.cache_size(), 1);
}

#[test]
fn eager_cond_and_while() {
    let rt = rt();
    let _g = rt.enter();
    let x = Tensor::scalar_f64(1.0);
    let out = ops::while_loop(
        |v| ops::greater(&Tensor::scalar_f64(100.0), &v[0]),
        |v| Ok(vec![ops::add(&v[0], &v[0])?]),
        &[x],
    )
    .unwrap();
    assert_eq!(out[0].to_scalar().unwrap(), 128.0);
}

#[test]
fn staged_while_loop_runs_data_dependent_trip_count() {
    let rt = rt();
    let _g = rt.enter();
    let f = stage("doubling", |a| {
        let limit = t(&a[1]).clone();
        ops::while_loop(
            move |v| ops::greater(&limit, &v[0]),
            |v| Ok(vec![ops::add(&v[0], &v[0])?]),
            &[t(&a[0]).clone()],
        )
    });
    let run = |x: f64, lim: f64| {
        f.call(&[Tensor::scalar_f64(x).into(), Tensor::scalar_f64(lim).into()]).unwrap()[0].to_scalar().unwrap()
    };
    assert_eq!(run(1.0, 100.0), 128.0);
    assert_eq!(run(3.0, 10.0), 12.0);
    assert_eq!(f.cache_size(), 1);
}

fn fib(n: u64) -> f64 {
    if n < 2 {
        n as f64
    } else {
        fib(n - 1) + fib(n - 2)
    }
}

#[test]
fn host_call_runs_recursive_host_code() {
    let rt = rt();
    let _g = rt.enter();
    let cb =
        register_callback("fib", vec![scalar_f64()], |xs| Ok(vec![Tensor::scalar_f64(fib(xs[0].to_scalar()? as u64))]));
    let cb2 = cb.clone();
    let f = stage("with_fib", move |a| {
        let y = host_call(&cb2, &[ops::add(t(&a[0]), &Tensor::scalar_f64(1.0))?])?;
        Ok(vec![ops::mul(&y[0], &Tensor::scalar_f64(2.0))?])
    });
    let staged = f.call(&[Tensor::scalar_f64(9.0).into()]).unwrap()[0].to_scalar().unwrap();
    assert_eq!(staged, 2.0 * fib(10));
    let g = f.concrete_functions().remove(0);
    assert!(!g.is_serializable());
    assert!(matches!(serialize(&g), Err(Error::NotSerializable(_))));
    let eager = host_call(&cb, &[Tensor::scalar_f64(10.0)]).unwrap()[0].to_scalar().unwrap();
    assert_eq!(eager, fib(10));
}

#[test]
fn host_call_is_differentiable() {
    let rt = rt();
    let _g = rt.enter();
    let cb = register_callback("square", vec![scalar_f64()], |xs| Ok(vec![ops::mul(&xs[0], &xs[0])?]));
    let cb2 = cb.clone();
    let f = stage("square_staged", move |a| host_call(&cb2, &[t(&a[0]).clone()]));
    let x = Tensor::scalar_f64(3.0);
    for staged in [false, true] {
        let tape = GradientTape::new();
        tape.watch(&x).unwrap();
        let y = if staged {
            f.call(&[Arg::from(&x)]).unwrap().remove(0)
        } else {
            host_call(&cb, &[x.clone()]).unwrap().remove(0)
        };
        tape.end().unwrap();
        assert_eq!(y.to_scalar().unwrap(), 9.0);
        assert_eq!(tape.gradient(&y, &[Operand::from(&x)]).unwrap()[0].to_scalar().unwrap(), 6.0);
    }
}

#[test]
fn host_call_errors() {
    let rt = rt();
    let _g = rt.enter();
    let bad_sig = register_callback("bad", vec![scalar_f64()], |_| Ok(vec![Tensor::scalar_f32(1.0)]));
    assert!(matches!(host_call(&bad_sig, &[]), Err(Error::SignatureViolation(_))));
    let failing = register_callback("fails", vec![], |_| Err(Error::Callback("boom".into())));
    assert_eq!(host_call(&failing, &[]).unwrap_err(), Error::Callback("boom".into()));
    let panics = register_callback("panics", vec![], |_| panic!("host bug"));
    assert!(matches!(host_call(&panics, &[]), Err(Error::Callback(m)) if m.contains("host bug")));
}

#[test]
fn second_derivative_through_staged_function() {
    let rt = rt();
    let _g = rt.enter();
    let f = stage("sq", |a| Ok(vec![ops::mul(t(&a[0]), t(&a[0]))?]));
    let x = Tensor::scalar_f64(3.0);
    let t1 = GradientTape::new();
    let t2 = GradientTape::new();
    t1.watch(&x).unwrap();
    t2.watch(&x).unwrap();
    let y = f.call(&[Arg::from(&x)]).unwrap().remove(0);
    t2.end().unwrap();
    let dy = t2.gradient(&y, &[Operand::from(&x)]).unwrap().remove(0);
    t1.end().unwrap();
    let d2y = t1.gradient(&dy, &[Operand::from(&x)]).unwrap().remove(0);
    assert_eq!(dy.to_scalar().unwrap(), 6.0);
    assert_eq!(d2y.to_scalar().unwrap(), 2.0);
}
