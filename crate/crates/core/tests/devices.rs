use stageflow::{
    device_scope, list_devices, ops, stage, Arg, DType, DeviceKind, DeviceName, Operand, Runtime, RuntimeOptions,
    Tensor,
};

fn rt(workers: usize) -> Runtime {
    Runtime::new(RuntimeOptions { accelerators: 1, workers, ..RuntimeOptions::default() })
}

#[test]
fn accel_scope_copies_cpu_inputs() {
    let rt = rt(1);
    let _g = rt.enter();
    assert_eq!(list_devices().len(), 2);
    let a = Tensor::scalar_f32(1.0);
    let b = Tensor::scalar_f32(2.0);
    let before = rt.metrics().transparent_copies();
    let c = {
        let _s = device_scope(&DeviceName::accel(0)).unwrap();
        ops::add(&a, &b).unwrap()
    };
    assert_eq!(c.to_scalar().unwrap(), 3.0);
    assert_eq!(c.device().kind(), DeviceKind::Accel);
    assert_eq!(rt.metrics().transparent_copies() - before, 2);
    let d = ops::add(&c, &c).unwrap();
    assert_eq!(d.device().kind(), DeviceKind::Accel);
    assert_eq!(rt.metrics().transparent_copies() - before, 2);
}

#[test]
fn node_override_beats_caller_scope() {
    let rt = rt(1);
    let _g = rt.enter();
    let f = stage("pinned", |a| {
        let x = a[0].as_tensor().unwrap();
        let on_cpu = {
            let _s = device_scope(&DeviceName::cpu(0))?;
            ops::exp(x)?
        };
        let anywhere = ops::neg(x)?;
        Ok(vec![on_cpu, anywhere])
    });
    let x = Tensor::scalar_f32(0.0);
    let out = {
        let _s = device_scope(&DeviceName::accel(0)).unwrap();
        f.call(&[Arg::from(&x)]).unwrap()
    };
    assert_eq!(out[0].device(), &DeviceName::cpu(0));
    assert_eq!(out[1].device(), &DeviceName::accel(0));
    assert_eq!(out[0].to_scalar().unwrap(), 1.0);
}

#[test]
fn executor_is_worker_count_invariant() {
    let build = || {
        stage("wide", |a| {
            let x = a[0].as_tensor().unwrap();
            let branches: Vec<Tensor> = (0..16)
                .map(|i| ops::matmul(&ops::mul(x, &Tensor::scalar_f64(i as f64 + 0.5))?, x))
                .collect::<stageflow::Result<_>>()?;
            let mut acc = branches[0].clone();
            for b in &branches[1..] {
                acc = ops::add(&acc, &ops::sigmoid(b)?)?;
            }
            Ok(vec![ops::reduce_sum(&acc, None, false)?])
        })
    };
    let values: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut results = Vec::new();
    for workers in [1, 4] {
        let rt = rt(workers);
        let _g = rt.enter();
        let x = Tensor::from_values(&values, [8, 8], DType::Float64).unwrap();
        let f = build();
        let g = f.call(&[Arg::from(&x)]).unwrap().remove(0);
        let direct = f.concrete_functions()[0].execute(&[Operand::from(&x)]).unwrap().remove(0);
        assert!(g.bit_eq(&direct).unwrap());
        results.push(g.to_host().unwrap());
    }
    assert!(results[0].bit_eq(&results[1]));
}
