use serde::{Deserialize, Serialize};

/// One logical step of a ring schedule, in program order.
///
/// `transfer` numbers the remote chunks `1..R`; `block` numbers compute
/// blocks `0..R`, where block 0 is the local chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SendIssued { transfer: usize },
    RecvIssued { transfer: usize },
    Synced { transfer: usize },
    Compute { block: usize },
    Merge { block: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timeline {
    pub events: Vec<Event>,
}

impl Timeline {
    pub(crate) fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn sends(&self) -> usize {
        self.count(|e| matches!(e, Event::SendIssued { .. }))
    }

    pub fn recvs(&self) -> usize {
        self.count(|e| matches!(e, Event::RecvIssued { .. }))
    }

    pub fn syncs(&self) -> usize {
        self.count(|e| matches!(e, Event::Synced { .. }))
    }

    pub fn computes(&self) -> usize {
        self.count(|e| matches!(e, Event::Compute { .. }))
    }

    pub fn merges(&self) -> usize {
        self.count(|e| matches!(e, Event::Merge { .. }))
    }

    fn count(&self, f: impl Fn(&Event) -> bool) -> usize {
        self.events.iter().filter(|e| f(e)).count()
    }

    /// Position of the first event matching `e`.
    pub fn position(&self, e: Event) -> Option<usize> {
        self.events.iter().position(|x| *x == e)
    }
}
