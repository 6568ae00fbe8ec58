//! Device names, placement scopes and tensor copies.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, LazyLock};

use crate::context;
use crate::error::{Error, Result};
use crate::runtime::Runtime;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeviceKind {
    Cpu,
    /// Simulated accelerator: CPU kernels, distinct placement.
    Accel,
}

impl DeviceKind {
    fn as_str(self) -> &'static str {
        match self {
            DeviceKind::Cpu => "CPU",
            DeviceKind::Accel => "ACCEL",
        }
    }
}

/// `/job:J/task:T/device:KIND:I`
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceName {
    job: Arc<str>,
    task: u32,
    kind: DeviceKind,
    index: u32,
}

static LOCAL_JOB: LazyLock<Arc<str>> = LazyLock::new(|| Arc::from("local"));
static DEFAULT_CPU: LazyLock<DeviceName> = LazyLock::new(|| DeviceName::cpu(0));

impl DeviceName {
    pub fn new(job: &str, task: u32, kind: DeviceKind, index: u32) -> Self {
        let job = if job == "local" { Arc::clone(&LOCAL_JOB) } else { Arc::from(job) };
        DeviceName { job, task, kind, index }
    }

    pub fn cpu(index: u32) -> Self {
        DeviceName { job: Arc::clone(&LOCAL_JOB), task: 0, kind: DeviceKind::Cpu, index }
    }

    pub fn accel(index: u32) -> Self {
        DeviceName { job: Arc::clone(&LOCAL_JOB), task: 0, kind: DeviceKind::Accel, index }
    }

    pub fn default_cpu() -> Self {
        DEFAULT_CPU.clone()
    }

    pub fn job(&self) -> &str {
        &self.job
    }

    pub fn task(&self) -> u32 {
        self.task
    }

    pub fn kind(&self) -> DeviceKind {
        self.kind
    }

    pub fn index(&self) -> u32 {
        self.index
    }
}

impl fmt::Display for DeviceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/job:{}/task:{}/device:{}:{}", self.job, self.task, self.kind.as_str(), self.index)
    }
}

impl FromStr for DeviceName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnknownDevice(s.to_string());
        let rest = s.strip_prefix("/job:").ok_or_else(bad)?;
        let (job, rest) = rest.split_once("/task:").ok_or_else(bad)?;
        let (task, rest) = rest.split_once("/device:").ok_or_else(bad)?;
        let (kind, index) = rest.split_once(':').ok_or_else(bad)?;
        if job.is_empty() || job.contains('/') {
            return Err(bad());
        }
        let kind = match kind {
            "CPU" => DeviceKind::Cpu,
            "ACCEL" => DeviceKind::Accel,
            _ => return Err(bad()),
        };
        let task = parse_index(task).ok_or_else(bad)?;
        let index = parse_index(index).ok_or_else(bad)?;
        Ok(DeviceName::new(job, task, kind, index))
    }
}

// Canonical decimal only, so render(parse(s)) == s.
fn parse_index(s: &str) -> Option<u32> {
    if s.is_empty() || (s.len() > 1 && s.starts_with('0')) || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

/// Devices known to the current runtime, CPU first.
pub fn list_devices() -> Vec<DeviceName> {
    Runtime::current().devices().to_vec()
}

/// Guard returned by [`device_scope`]; restores the previous scope on drop.
#[must_use = "the scope ends when the guard is dropped"]
pub struct DeviceScope {
    depth: usize,
}

impl Drop for DeviceScope {
    fn drop(&mut self) {
        context::pop_device(self.depth);
    }
}

/// Places ops dispatched while the guard lives on `name`. Scopes nest and the
/// innermost wins.
pub fn device_scope(name: &DeviceName) -> Result<DeviceScope> {
    let rt = Runtime::current();
    if !rt.has_device(name) {
        return Err(Error::UnknownDevice(name.to_string()));
    }
    Ok(DeviceScope { depth: context::push_device(name.clone()) })
}

impl Tensor {
    /// Copies the tensor to `dst`. Copying to the current device returns the
    /// same handle.
    pub fn copy_to(&self, dst: &DeviceName) -> Result<Tensor> {
        let rt = Runtime::current();
        if !rt.has_device(dst) {
            return Err(Error::UnknownDevice(dst.to_string()));
        }
        if self.device() == dst {
            return Ok(self.clone());
        }
        self.rehome(dst.clone())
    }
}

/// Chooses where an op runs: the innermost scope, else the first tensor
/// input's device, else the default CPU.
pub(crate) fn choose_device<'a>(
    scope: Option<&'a DeviceName>,
    mut input_devices: impl Iterator<Item = &'a DeviceName>,
) -> DeviceName {
    scope.or_else(|| input_devices.next()).cloned().unwrap_or_else(DeviceName::default_cpu)
}

/// Moves `t` to `device` if it lives elsewhere, counting the transfer.
pub(crate) fn ensure_on(rt: &Runtime, t: &Tensor, device: &DeviceName) -> Result<Tensor> {
    if t.device() == device || t.is_symbolic() {
        return Ok(t.clone());
    }
    rt.metrics().record_copy();
    t.rehome(device.clone())
}

/// Placement decision plus inputs moved onto the chosen device.
pub fn resolve_placement(inputs: &[Tensor]) -> Result<(DeviceName, Vec<Tensor>)> {
    let rt = Runtime::current();
    let scope = context::current_device();
    if let Some(d) = &scope {
        if !rt.has_device(d) {
            return Err(Error::UnknownDevice(d.to_string()));
        }
    }
    let device = choose_device(scope.as_ref(), inputs.iter().map(|t| t.device()));
    let moved = inputs.iter().map(|t| ensure_on(&rt, t, &device)).collect::<Result<_>>()?;
    Ok((device, moved))
}
