//! Crash injection shared by every device of an array.
//!
//! The injector counts durable mutations (writes and trims). Once armed with
//! a budget of `k` operations, the `k+1`-th mutation and everything after it
//! fail with [`DeviceError::Crashed`] until the injector is disarmed, which
//! models a power cut between two device operations.

use parking_lot::Mutex;

use crate::czdev::DeviceError;

#[derive(Debug, Default)]
struct State {
    budget: Option<u64>,
    crashed: bool,
    mutations: u64,
}

#[derive(Debug, Default)]
pub struct FaultInjector {
    state: Mutex<State>,
}

impl FaultInjector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allow `ops` more mutations, then crash.
    pub fn arm(&self, ops: u64) {
        let mut s = self.state.lock();
        s.budget = Some(ops);
        s.crashed = false;
    }

    /// Clears any pending or latched crash.
    pub fn disarm(&self) {
        let mut s = self.state.lock();
        s.budget = None;
        s.crashed = false;
    }

    pub fn crashed(&self) -> bool {
        self.state.lock().crashed
    }

    /// Total mutations admitted since creation or the last [`reset_count`](Self::reset_count).
    pub fn mutations(&self) -> u64 {
        self.state.lock().mutations
    }

    pub fn reset_count(&self) {
        self.state.lock().mutations = 0;
    }

    /// Called by a device before it mutates durable state.
    pub fn admit(&self) -> Result<(), DeviceError> {
        let mut s = self.state.lock();
        if s.crashed {
            return Err(DeviceError::Crashed);
        }
        if let Some(budget) = s.budget.as_mut() {
            if *budget == 0 {
                s.crashed = true;
                return Err(DeviceError::Crashed);
            }
            *budget -= 1;
        }
        s.mutations += 1;
        Ok(())
    }
}
