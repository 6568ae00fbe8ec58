//! Imperative tensor runtime with a tracing JIT that stages host functions
//! into cached dataflow graph functions.

pub mod checkpoint;
mod codec;
mod context;
mod device;
mod dispatch;
mod error;
mod function_grad;
mod gradients;
pub mod graph;
mod host;
mod kernels;
pub mod ops;
mod registry;
mod runtime;
pub mod staging;
mod tape;
mod tensor;
mod trace;
mod variable;

pub use checkpoint::{
    restore, save, Blob, Checkpoint, DatasetIterator, MatchReport, Payload, Trackable, TrackedObject,
};
pub use context::{active_tape_count, current_device, mode, Mode};
pub use device::{device_scope, list_devices, resolve_placement, DeviceKind, DeviceName, DeviceScope};
pub use dispatch::{dispatch, Operand};
pub use error::{Error, Result};
pub use graph::GraphFunction;
pub use host::{escape_trace, host_call, register_callback, EscapeTrace, HostCallback};
pub use registry::{
    kernel_table, Arity, AttrKind, AttrLookup, AttrSpec, AttrValue, Attrs, GradContext, InferContext, KernelContext,
    OpDef, OperandSpec, Registry, TensorSpec,
};
pub use runtime::{Metrics, Runtime, RuntimeGuard, RuntimeOptions};
pub use staging::{infer_trace_key, stage, stage_with_signature, Arg, ArgKey, PolymorphicFunction, TraceKey};
pub use tape::GradientTape;
pub use tensor::{broadcast_partial, broadcast_shapes, DType, Data, HostTensor, PartialShape, Shape, Tensor, ValueId};
pub use variable::{Variable, WeakVariable};
