use std::sync::Arc;

use proptest::prelude::*;
use stageflow::{
    current_device, device_scope, host_call, ops, register_callback, restore, save, stage, Arg, Checkpoint, DType,
    DeviceName, GradientTape, Runtime, RuntimeOptions, Shape, Tensor, TensorSpec, TrackedObject, Variable,
};

fn runtime() -> Runtime {
    Runtime::new(RuntimeOptions { accelerators: 1, workers: 1, ..RuntimeOptions::default() })
}

fn matrix(values: &[f64], dtype: DType) -> Tensor {
    Tensor::from_values(values, [2, 2], dtype).unwrap()
}

fn arb_matrix() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 4)
}

fn arb_dtype() -> impl Strategy<Value = DType> {
    prop_oneof![Just(DType::Float32), Just(DType::Float64)]
}

const UNARY: [&str; 7] = ["neg", "exp", "sigmoid", "softplus", "relu", "identity", "transpose"];
const BINARY: [&str; 6] = ["add", "sub", "mul", "div", "matmul", "greater"];

fn apply(op: &str, a: &Tensor, b: &Tensor) -> stageflow::Result<Tensor> {
    match op {
        "neg" => ops::neg(a),
        "exp" => ops::exp(a),
        "sigmoid" => ops::sigmoid(a),
        "softplus" => ops::softplus(a),
        "relu" => ops::relu(a),
        "identity" => ops::identity(a),
        "transpose" => ops::transpose(a),
        "add" => ops::add(a, b),
        "sub" => ops::sub(a, b),
        "mul" => ops::mul(a, b),
        "div" => ops::div(a, b),
        "matmul" => ops::matmul(a, b),
        "greater" => ops::greater(a, b),
        _ => unreachable!("{op}"),
    }
}

fn arb_op() -> impl Strategy<Value = &'static str> {
    prop::sample::select(UNARY.iter().chain(BINARY.iter()).copied().collect::<Vec<_>>())
}

/// f(x, y) as a fixed chain of ops over both arguments.
fn chain(ops_seq: &[&'static str], x: &Tensor, y: &Tensor) -> stageflow::Result<Tensor> {
    let mut acc = x.clone();
    for op in ops_seq {
        acc = match *op {
            "greater" => ops::add(&acc, y)?,
            op => apply(op, &acc, y)?,
        };
    }
    Ok(acc)
}

/// Smooth scalar function of one [2, 2] argument.
fn smooth(k: usize, x: &Tensor) -> stageflow::Result<Tensor> {
    let y = match k % 4 {
        0 => ops::mul(&ops::sigmoid(x)?, x)?,
        1 => ops::softplus(&ops::matmul(x, &ops::transpose(x)?)?)?,
        2 => ops::exp(&ops::neg(&ops::mul(x, x)?)?)?,
        _ => ops::div(x, &ops::add(&ops::exp(x)?, &ops::ones_like(x)?)?)?,
    };
    ops::reduce_sum(&y, None, false)
}

fn grad(x: &Tensor, f: impl FnOnce(&Tensor) -> stageflow::Result<Tensor>) -> Vec<f64> {
    let tape = GradientTape::new();
    tape.watch(x).unwrap();
    let y = f(x).unwrap();
    tape.end().unwrap();
    tape.gradient(&y, &[x.into()]).unwrap().remove(0).to_f64_vec().unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn single_op_matches_one_node_graph(op in arb_op(), a in arb_matrix(), b in arb_matrix(), dtype in arb_dtype()) {
        let rt = runtime();
        let _g = rt.enter();
        let (a, b) = (matrix(&a, dtype), matrix(&b, dtype));
        let eager = apply(op, &a, &b).unwrap();
        let f = stage("one_op", move |args| {
            Ok(vec![apply(op, args[0].as_tensor().unwrap(), args[1].as_tensor().unwrap())?])
        });
        let args = [Arg::from(&a), Arg::from(&b)];
        let staged = f.call(&args).unwrap().remove(0);
        prop_assert_eq!(f.get_concrete(&f.trace_key(&args).unwrap()).unwrap().nodes().len(), 1);
        prop_assert!(staged.bit_eq(&eager).unwrap());
        prop_assert!(apply(op, &a, &b).unwrap().bit_eq(&eager).unwrap(), "dispatch is not reproducible");
    }

    #[test]
    fn staged_chain_matches_eager(
        seq in prop::collection::vec(arb_op(), 1..12),
        x in arb_matrix(),
        y in arb_matrix(),
        dtype in arb_dtype(),
    ) {
        let rt = runtime();
        let _g = rt.enter();
        let (x, y) = (matrix(&x, dtype), matrix(&y, dtype));
        let eager = chain(&seq, &x, &y).unwrap();
        let s = seq.clone();
        let f = stage("chain", move |a| Ok(vec![chain(&s, a[0].as_tensor().unwrap(), a[1].as_tensor().unwrap())?]));
        prop_assert!(f.call(&[Arg::from(&x), Arg::from(&y)]).unwrap()[0].bit_eq(&eager).unwrap());
    }

    #[test]
    fn gradient_is_linear(j in 0usize..4, k in 0usize..4, x in arb_matrix()) {
        let rt = runtime();
        let _g = rt.enter();
        let x = matrix(&x, DType::Float64);
        let sum = grad(&x, |x| ops::add(&smooth(j, x)?, &smooth(k, x)?));
        let parts: Vec<f64> = grad(&x, |x| smooth(j, x)).iter().zip(grad(&x, |x| smooth(k, x))).map(|(a, b)| a + b).collect();
        prop_assert!(close(&sum, &parts, 1e-12), "{sum:?} vs {parts:?}");
    }

    #[test]
    fn staged_gradient_matches_unstaged(k in 0usize..4, x in arb_matrix()) {
        let rt = runtime();
        let _g = rt.enter();
        let x = matrix(&x, DType::Float64);
        let f = Arc::new(stage("smooth", move |a| Ok(vec![smooth(k, a[0].as_tensor().unwrap())?])));
        let staged = grad(&x, |x| Ok(f.call(&[Arg::from(x)])?.remove(0)));
        let eager = grad(&x, |x| smooth(k, x));
        prop_assert!(close(&staged, &eager, 1e-6), "{staged:?} vs {eager:?}");
    }

    #[test]
    fn host_call_is_transparent_in_eager_mode(k in 0usize..4, x in arb_matrix()) {
        let rt = runtime();
        let _g = rt.enter();
        let x = matrix(&x, DType::Float64);
        let cb = register_callback("smooth", vec![TensorSpec::new(DType::Float64, Shape::scalar())], move |xs| {
            Ok(vec![smooth(k, &xs[0])?])
        });
        let via_host = host_call(&cb, &[x.clone()]).unwrap().remove(0);
        prop_assert!(via_host.bit_eq(&smooth(k, &x).unwrap()).unwrap());
    }

    #[test]
    fn payloads_do_not_depend_on_placement(op in arb_op(), a in arb_matrix(), b in arb_matrix()) {
        let rt = runtime();
        let _g = rt.enter();
        let (a, b) = (matrix(&a, DType::Float32), matrix(&b, DType::Float32));
        let on_cpu = apply(op, &a, &b).unwrap();
        let (on_accel, a2, b2) = {
            let _s = device_scope(&DeviceName::accel(0)).unwrap();
            (apply(op, &a, &b).unwrap(), ops::identity(&a).unwrap(), ops::identity(&b).unwrap())
        };
        prop_assert!(on_accel.to_host().unwrap().bit_eq(&on_cpu.to_host().unwrap()));
        // Inputs already on the accelerator need no copies.
        let before = rt.metrics().transparent_copies();
        {
            let _s = device_scope(&DeviceName::accel(0)).unwrap();
            apply(op, &a2, &b2).unwrap();
        }
        prop_assert_eq!(rt.metrics().transparent_copies(), before);
    }

    #[test]
    fn scopes_restore_the_outer_device(path in prop::collection::vec(any::<bool>(), 0..6)) {
        let rt = runtime();
        let _g = rt.enter();
        let before = current_device();
        {
            let scopes: Vec<_> = path
                .iter()
                .map(|&accel| device_scope(&if accel { DeviceName::accel(0) } else { DeviceName::cpu(0) }).unwrap())
                .collect();
            scopes.into_iter().rev().for_each(drop);
        }
        prop_assert_eq!(current_device(), before);
        prop_assert_eq!(ops::neg(&Tensor::scalar_f32(1.0)).unwrap().device().clone(), DeviceName::cpu(0));
    }

    #[test]
    fn creation_order_does_not_change_matching(
        saved_order in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        restored_order in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let rt = runtime();
        let _g = rt.enter();
        let build = |order: &[usize], offset: f32| {
            let root = TrackedObject::new();
            let layer = TrackedObject::new();
            for &i in order {
                let v = Variable::new(&Tensor::scalar_f32(i as f32 + offset)).unwrap();
                if i % 2 == 0 { root.set(&format!("v{i}"), v) } else { layer.set(&format!("v{i}"), v) }
                if i == 2 { root.set("layer", &layer) }
            }
            root
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sck");
        save(&build(&saved_order, 0.0).into(), &path).unwrap();
        let ckpt = Checkpoint::read(&path).unwrap();
        let canonical = restore(&build(&[0, 1, 2, 3, 4], 10.0).into(), &ckpt);
        let fresh = build(&restored_order, 10.0);
        let report = restore(&fresh.clone().into(), &ckpt);
        prop_assert!(report.is_complete(), "{report:?}");
        prop_assert_eq!(&report, &canonical);
        prop_assert_eq!(fresh.variable("v4").unwrap().read().unwrap().to_scalar().unwrap(), 4.0);
        prop_assert_eq!(fresh.object("layer").unwrap().variable("v3").unwrap().read().unwrap().to_scalar().unwrap(), 3.0);
    }
}
