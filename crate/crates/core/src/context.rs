//! Per-thread execution context: eager vs graph-building mode, the active
//! tape stack and the device scope stack.

use std::cell::RefCell;
use std::rc::Rc;

use crate::device::DeviceName;
use crate::tape::TapeInner;
use crate::trace::TraceState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eager,
    GraphBuilding,
}

enum Frame {
    Trace { state: Rc<RefCell<TraceState>>, saved_tapes: Vec<Rc<TapeInner>>, saved_devices: Vec<DeviceName> },
    Escape,
}

#[derive(Default)]
struct ContextState {
    frames: Vec<Frame>,
    tapes: Vec<Rc<TapeInner>>,
    devices: Vec<DeviceName>,
}

thread_local! {
    static CONTEXT: RefCell<ContextState> = RefCell::new(ContextState::default());
}

/// What dispatch needs to know about the calling context.
pub(crate) struct Snapshot {
    pub trace: Option<Rc<RefCell<TraceState>>>,
    pub tapes: Vec<Rc<TapeInner>>,
    pub device: Option<DeviceName>,
}

pub(crate) fn snapshot() -> Snapshot {
    CONTEXT.with(|c| {
        let c = c.borrow();
        let trace = match c.frames.last() {
            Some(Frame::Trace { state, .. }) => Some(Rc::clone(state)),
            _ => None,
        };
        Snapshot { trace, tapes: c.tapes.clone(), device: c.devices.last().cloned() }
    })
}

pub fn mode() -> Mode {
    if current_trace().is_some() {
        Mode::GraphBuilding
    } else {
        Mode::Eager
    }
}

pub(crate) fn current_trace() -> Option<Rc<RefCell<TraceState>>> {
    CONTEXT.with(|c| match c.borrow().frames.last() {
        Some(Frame::Trace { state, .. }) => Some(Rc::clone(state)),
        _ => None,
    })
}

/// Nearest enclosing trace, looking through escape scopes.
pub(crate) fn enclosing_trace() -> Option<Rc<RefCell<TraceState>>> {
    CONTEXT.with(|c| {
        c.borrow().frames.iter().rev().find_map(|f| match f {
            Frame::Trace { state, .. } => Some(Rc::clone(state)),
            Frame::Escape => None,
        })
    })
}

pub(crate) struct TraceFrameGuard {
    depth: usize,
}

/// Opens a graph-building frame. Tapes and device scopes of the enclosing
/// context are hidden until the frame closes.
pub(crate) fn push_trace(state: Rc<RefCell<TraceState>>) -> TraceFrameGuard {
    CONTEXT.with(|c| {
        let mut c = c.borrow_mut();
        let saved_tapes = std::mem::take(&mut c.tapes);
        let saved_devices = std::mem::take(&mut c.devices);
        c.frames.push(Frame::Trace { state, saved_tapes, saved_devices });
        TraceFrameGuard { depth: c.frames.len() }
    })
}

impl Drop for TraceFrameGuard {
    fn drop(&mut self) {
        CONTEXT.with(|c| {
            let mut c = c.borrow_mut();
            while c.frames.len() >= self.depth {
                match c.frames.pop() {
                    Some(Frame::Trace { saved_tapes, saved_devices, .. }) => {
                        c.tapes = saved_tapes;
                        c.devices = saved_devices;
                    }
                    Some(Frame::Escape) => {}
                    None => break,
                }
            }
        });
    }
}

pub(crate) struct EscapeGuard {
    depth: usize,
}

pub(crate) fn push_escape() -> EscapeGuard {
    CONTEXT.with(|c| {
        let mut c = c.borrow_mut();
        c.frames.push(Frame::Escape);
        EscapeGuard { depth: c.frames.len() }
    })
}

impl Drop for EscapeGuard {
    fn drop(&mut self) {
        CONTEXT.with(|c| {
            let mut c = c.borrow_mut();
            if c.frames.len() == self.depth {
                c.frames.pop();
            }
        });
    }
}

/// Fresh eager context for code run on executor threads (host callbacks).
pub(crate) struct IsolatedGuard {
    saved: Option<ContextState>,
}

pub(crate) fn isolate() -> IsolatedGuard {
    CONTEXT.with(|c| IsolatedGuard { saved: Some(std::mem::take(&mut *c.borrow_mut())) })
}

impl Drop for IsolatedGuard {
    fn drop(&mut self) {
        if let Some(saved) = self.saved.take() {
            CONTEXT.with(|c| *c.borrow_mut() = saved);
        }
    }
}

pub(crate) fn push_tape(tape: Rc<TapeInner>) {
    CONTEXT.with(|c| c.borrow_mut().tapes.push(tape));
}

/// Pops `tape` if it is the innermost active tape.
pub(crate) fn pop_tape(tape: &Rc<TapeInner>) -> bool {
    CONTEXT.with(|c| {
        let mut c = c.borrow_mut();
        match c.tapes.last() {
            Some(top) if Rc::ptr_eq(top, tape) => {
                c.tapes.pop();
                true
            }
            _ => false,
        }
    })
}

pub fn active_tape_count() -> usize {
    CONTEXT.with(|c| c.borrow().tapes.len())
}

pub(crate) fn push_device(d: DeviceName) -> usize {
    CONTEXT.with(|c| {
        let mut c = c.borrow_mut();
        c.devices.push(d);
        c.devices.len()
    })
}

pub(crate) fn pop_device(depth: usize) {
    CONTEXT.with(|c| {
        let mut c = c.borrow_mut();
        if c.devices.len() >= depth {
            c.devices.truncate(depth - 1);
        }
    });
}

/// Innermost device scope, if any.
pub fn current_device() -> Option<DeviceName> {
    CONTEXT.with(|c| c.borrow().devices.last().cloned())
}

/// Removes `tape` from the active stack wherever it sits.
pub(crate) fn remove_tape(tape: &Rc<TapeInner>) {
    CONTEXT.with(|c| {
        let mut c = c.borrow_mut();
        if let Some(pos) = c.tapes.iter().rposition(|t| Rc::ptr_eq(t, tape)) {
            c.tapes.remove(pos);
        }
    });
}
