use stageflow::{
    restore, save, Blob, Checkpoint, DatasetIterator, Error, Runtime, RuntimeOptions, Tensor, TrackedObject, Variable,
};

fn net(order_kernel_first: bool, seed: f32) -> TrackedObject {
    let root = TrackedObject::new();
    let out = TrackedObject::new();
    let kernel = || Variable::new(&Tensor::from_f32(vec![seed, seed + 1.0], [2, 1]).unwrap()).unwrap();
    let bias = || Variable::new(&Tensor::from_f32(vec![seed + 2.0], [1]).unwrap()).unwrap();
    if order_kernel_first {
        out.set("kernel", kernel());
        out.set("bias", bias());
        root.set("v", Variable::new(&Tensor::scalar_f32(seed + 3.0)).unwrap());
        root.set("out", &out);
    } else {
        root.set("out", &out);
        out.set("bias", bias());
        root.set("v", Variable::new(&Tensor::scalar_f32(seed + 3.0)).unwrap());
        out.set("kernel", kernel());
    }
    root
}

fn values(root: &TrackedObject) -> Vec<Vec<f64>> {
    let out = root.object("out").unwrap();
    [root.variable("v"), out.variable("kernel"), out.variable("bias")]
        .into_iter()
        .map(|v| v.unwrap().read().unwrap().to_f64_vec().unwrap())
        .collect()
}

#[test]
fn restores_by_edge_names_not_creation_order() {
    let rt = Runtime::new(RuntimeOptions::default());
    let _g = rt.enter();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.sck");
    let saved = net(true, 1.0);
    let ckpt = save(&saved.clone().into(), &path).unwrap();
    assert_eq!(ckpt.node_count(), 5);
    assert_eq!(ckpt.payload_count(), 3);
    let fresh = net(false, 10.0);
    let report = restore(&fresh.clone().into(), &Checkpoint::read(&path).unwrap());
    assert!(report.is_complete(), "{report:?}");
    assert_eq!(report.matched, vec!["v", "out/bias", "out/kernel"]);
    assert_eq!(values(&fresh), values(&saved));
}

#[test]
fn missing_edge_reports_one_unmatched_path() {
    let rt = Runtime::new(RuntimeOptions::default());
    let _g = rt.enter();
    let saved = net(true, 1.0);
    let ckpt = Checkpoint::capture(&saved.into()).unwrap().without_edge("out", "bias");
    let fresh = net(true, 10.0);
    let report = restore(&fresh.clone().into(), &ckpt);
    assert_eq!(report.unmatched_in_memory, vec!["out/bias"]);
    assert!(report.unmatched_in_checkpoint.is_empty());
    assert_eq!(report.matched.len(), 2);
    let v = values(&fresh);
    assert_eq!(v[0], vec![4.0]);
    assert_eq!(v[2], vec![12.0]);
}

#[test]
fn blobs_and_iterators_round_trip() {
    let rt = Runtime::new(RuntimeOptions::default());
    let _g = rt.enter();
    let bytes: Vec<u8> = (0..=255).collect();
    let root = TrackedObject::new();
    let mut it = DatasetIterator::new((0..5).map(|i| Tensor::scalar_f32(i as f32)).collect());
    it.next();
    it.next();
    root.set("blob", Blob::new(bytes.clone()));
    root.set("data", it.clone());
    let ckpt = Checkpoint::from_bytes(&Checkpoint::capture(&root.into()).unwrap().to_bytes()).unwrap();
    let other = TrackedObject::new();
    let blob = Blob::new(vec![]);
    let mut it2 = DatasetIterator::new((0..5).map(|i| Tensor::scalar_f32(i as f32)).collect());
    other.set("blob", blob.clone());
    other.set("data", it2.clone());
    assert!(restore(&other.into(), &ckpt).is_complete());
    assert_eq!(blob.get(), bytes);
    assert_eq!(it2.next().unwrap().to_scalar().unwrap(), 2.0);
}

#[test]
fn unrelated_objects_do_not_change_matching() {
    let rt = Runtime::new(RuntimeOptions::default());
    let _g = rt.enter();
    let ckpt = Checkpoint::capture(&net(true, 1.0).into()).unwrap();
    let plain = restore(&net(true, 5.0).into(), &ckpt);
    let extended = net(true, 5.0);
    extended.set("zzz_extra", Variable::new(&Tensor::scalar_f32(0.0)).unwrap());
    let report = restore(&extended.into(), &ckpt);
    assert_eq!(report.matched, plain.matched);
    assert_eq!(report.unmatched_in_memory, vec!["zzz_extra"]);
}

#[test]
fn unwritable_path_is_storage_error() {
    let rt = Runtime::new(RuntimeOptions::default());
    let _g = rt.enter();
    let root = TrackedObject::new();
    let err = save(&root.into(), "/nonexistent-dir/ckpt").unwrap_err();
    assert!(matches!(err, Error::Storage(_)));
}
