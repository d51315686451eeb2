use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};

/// Counting semaphore per endpoint, capping in-flight requests.
#[derive(Debug)]
pub struct Limiter {
    max_inflight: usize,
    slots: Mutex<HashMap<String, Arc<Slot>>>,
}

#[derive(Debug, Default)]
struct Slot {
    state: Mutex<SlotState>,
    freed: Condvar,
}

#[derive(Debug, Default)]
struct SlotState {
    inflight: usize,
    peak: usize,
}

pub struct Permit {
    slot: Arc<Slot>,
}

impl Drop for Permit {
    fn drop(&mut self) {
        let mut state = self.slot.state.lock().expect("limiter lock");
        state.inflight -= 1;
        self.slot.freed.notify_one();
    }
}

impl Limiter {
    pub fn new(max_inflight: usize) -> Self {
        Limiter { max_inflight: max_inflight.max(1), slots: Mutex::new(HashMap::new()) }
    }

    fn slot(&self, endpoint: &str) -> Arc<Slot> {
        self.slots.lock().expect("limiter lock").entry(endpoint.to_string()).or_default().clone()
    }

    /// Blocks until a request slot for `endpoint` is free.
    pub fn acquire(&self, endpoint: &str) -> Permit {
        let slot = self.slot(endpoint);
        {
            let mut state = slot.state.lock().expect("limiter lock");
            while state.inflight >= self.max_inflight {
                state = slot.freed.wait(state).expect("limiter lock");
            }
            state.inflight += 1;
            state.peak = state.peak.max(state.inflight);
        }
        Permit { slot }
    }

    /// Highest number of simultaneous requests seen for `endpoint`.
    pub fn peak(&self, endpoint: &str) -> usize {
        self.slot(endpoint).state.lock().expect("limiter lock").peak
    }
}
