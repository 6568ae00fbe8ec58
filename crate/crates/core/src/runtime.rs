//! Process-level runtime: devices, op registry, function library, host
//! callbacks, RNG state, executor pool and counters.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, LazyLock, Mutex, MutexGuard, RwLock};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::device::{DeviceKind, DeviceName};
use crate::graph::GraphFunction;
use crate::host::HostCallback;
use crate::registry::Registry;

/// Startup options. Fixed for the lifetime of a [`Runtime`].
#[derive(Debug, Clone)]
pub struct RuntimeOptions {
    /// Number of simulated accelerators listed after the CPU.
    pub accelerators: u32,
    /// Executor worker threads; 0 selects the hardware parallelism.
    pub workers: usize,
    /// Extra latency added to every kernel launched on an accelerator.
    pub accel_latency: Duration,
    /// Seed of the runtime RNG used by random ops.
    pub seed: u64,
    /// Run host callbacks one at a time.
    pub serialize_host_calls: bool,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        RuntimeOptions {
            accelerators: 0,
            workers: 0,
            accel_latency: Duration::ZERO,
            seed: 0,
            serialize_host_calls: true,
        }
    }
}

/// Counters observable by tests and benchmarks.
#[derive(Debug, Default)]
pub struct Metrics {
    copies: AtomicU64,
    traces: AtomicU64,
    gradient_functions: AtomicU64,
    trace_nanos: AtomicU64,
    eager_dispatches: AtomicU64,
    eager_by_op: Mutex<HashMap<String, u64>>,
    track_ops: std::sync::atomic::AtomicBool,
}

impl Metrics {
    pub(crate) fn record_copy(&self) {
        self.copies.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_trace(&self, elapsed: Duration) {
        self.traces.fetch_add(1, Ordering::Relaxed);
        self.trace_nanos.fetch_add(elapsed.as_nanos() as u64, Ordering::Relaxed);
    }

    pub(crate) fn record_gradient_functions(&self, n: u64) {
        self.gradient_functions.fetch_add(n, Ordering::Relaxed);
    }

    pub(crate) fn record_eager(&self, op: &str) {
        self.eager_dispatches.fetch_add(1, Ordering::Relaxed);
        if self.track_ops.load(Ordering::Relaxed) {
            *self.eager_by_op.lock().unwrap().entry(op.to_string()).or_default() += 1;
        }
    }

    /// Transfers inserted by the runtime because an input lived elsewhere.
    pub fn transparent_copies(&self) -> u64 {
        self.copies.load(Ordering::Relaxed)
    }

    /// Host-function traces performed by staged functions.
    pub fn traces(&self) -> u64 {
        self.traces.load(Ordering::Relaxed)
    }

    /// Forward/backward graph functions built for staged gradients.
    pub fn gradient_functions(&self) -> u64 {
        self.gradient_functions.load(Ordering::Relaxed)
    }

    pub fn trace_time(&self) -> Duration {
        Duration::from_nanos(self.trace_nanos.load(Ordering::Relaxed))
    }

    pub fn eager_dispatches(&self) -> u64 {
        self.eager_dispatches.load(Ordering::Relaxed)
    }

    /// Enables the per-op eager histogram (off by default; it takes a lock).
    pub fn track_ops(&self, on: bool) {
        self.track_ops.store(on, Ordering::Relaxed);
    }

    pub fn eager_by_op(&self) -> HashMap<String, u64> {
        self.eager_by_op.lock().unwrap().clone()
    }

    pub fn reset_eager_by_op(&self) {
        self.eager_by_op.lock().unwrap().clear();
    }
}

pub(crate) struct RuntimeInner {
    pub options: RuntimeOptions,
    pub devices: Vec<DeviceName>,
    pub registry: Arc<Registry>,
    pub functions: RwLock<HashMap<String, Arc<GraphFunction>>>,
    pub callbacks: RwLock<HashMap<i64, Arc<HostCallback>>>,
    pub host_slot: Mutex<()>,
    pub rng: Mutex<ChaCha8Rng>,
    pub pool: Option<rayon::ThreadPool>,
    pub workers: usize,
    pub metrics: Metrics,
    names: Mutex<HashMap<String, u64>>,
    /// Derived gradient functions keyed by what they were built from.
    pub derived: Mutex<HashMap<String, Vec<Arc<GraphFunction>>>>,
    next_callback: AtomicU64,
}

/// Shared handle to a runtime instance.
#[derive(Clone)]
pub struct Runtime(pub(crate) Arc<RuntimeInner>);

static DEFAULT: LazyLock<Runtime> = LazyLock::new(|| Runtime::new(RuntimeOptions::default()));

thread_local! {
    static ENTERED: RefCell<Vec<Runtime>> = const { RefCell::new(Vec::new()) };
}

impl Runtime {
    pub fn new(options: RuntimeOptions) -> Runtime {
        Runtime::with_registry(options, Registry::builtin())
    }

    pub fn with_registry(options: RuntimeOptions, registry: Registry) -> Runtime {
        let mut devices = vec![DeviceName::cpu(0)];
        devices.extend((0..options.accelerators).map(DeviceName::accel));
        let workers = if options.workers == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            options.workers
        };
        let pool = (workers > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .thread_name(|i| format!("stageflow-exec-{i}"))
                .build()
                .expect("failed to start executor pool")
        });
        let rng = ChaCha8Rng::seed_from_u64(options.seed);
        Runtime(Arc::new(RuntimeInner {
            options,
            devices,
            registry: Arc::new(registry),
            functions: RwLock::new(HashMap::new()),
            callbacks: RwLock::new(HashMap::new()),
            host_slot: Mutex::new(()),
            rng: Mutex::new(rng),
            pool,
            workers,
            metrics: Metrics::default(),
            names: Mutex::new(HashMap::new()),
            derived: Mutex::new(HashMap::new()),
            next_callback: AtomicU64::new(1),
        }))
    }

    /// The innermost runtime entered on this thread, else the process default.
    pub fn current() -> Runtime {
        ENTERED.with(|e| e.borrow().last().cloned()).unwrap_or_else(|| DEFAULT.clone())
    }

    /// Makes this runtime current on the calling thread until the guard drops.
    pub fn enter(&self) -> RuntimeGuard {
        ENTERED.with(|e| e.borrow_mut().push(self.clone()));
        RuntimeGuard { _not_send: std::marker::PhantomData }
    }

    pub fn options(&self) -> &RuntimeOptions {
        &self.0.options
    }

    pub fn devices(&self) -> &[DeviceName] {
        &self.0.devices
    }

    pub fn has_device(&self, d: &DeviceName) -> bool {
        self.0.devices.contains(d)
    }

    pub fn workers(&self) -> usize {
        self.0.workers
    }

    pub fn metrics(&self) -> &Metrics {
        &self.0.metrics
    }

    pub fn registry(&self) -> &Registry {
        &self.0.registry
    }

    /// Restarts the random stream used by random ops.
    pub fn reseed(&self, seed: u64) {
        *self.0.rng.lock().unwrap() = ChaCha8Rng::seed_from_u64(seed);
    }

    pub(crate) fn rng(&self) -> MutexGuard<'_, ChaCha8Rng> {
        self.0.rng.lock().unwrap()
    }

    /// `{base}_{n}` with `n` counting per base, so names depend only on the
    /// sequence of requests made to this runtime.
    pub(crate) fn unique_name(&self, base: &str) -> String {
        let mut names = self.0.names.lock().unwrap();
        let n = names.entry(base.to_string()).or_insert(0);
        let name = format!("{base}_{n}");
        *n += 1;
        name
    }

    pub(crate) fn next_callback_id(&self) -> i64 {
        self.0.next_callback.fetch_add(1, Ordering::Relaxed) as i64
    }

    /// Adds a function to the runtime-wide library so eager calls can name it.
    pub fn register_function(&self, f: Arc<GraphFunction>) {
        self.0.functions.write().unwrap().insert(f.name().to_string(), f);
    }

    pub fn function(&self, name: &str) -> Option<Arc<GraphFunction>> {
        self.0.functions.read().unwrap().get(name).cloned()
    }

    pub(crate) fn is_accel(d: &DeviceName) -> bool {
        d.kind() == DeviceKind::Accel
    }
}

/// Leaves the runtime entered by [`Runtime::enter`].
#[must_use = "the runtime stays current only while the guard lives"]
pub struct RuntimeGuard {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Drop for RuntimeGuard {
    fn drop(&mut self) {
        ENTERED.with(|e| {
            e.borrow_mut().pop();
        });
    }
}
