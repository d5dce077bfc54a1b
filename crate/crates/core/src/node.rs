//! Event-in/actions-out interface between protocol nodes and the network
//! layer.
//!
//! Replicas and clients implement [`NodeLogic`]: one inbound event at a time,
//! a batch of outbound actions in return, no internal clocks or threads.
//! Timers are named by deterministic ids; cancellation is lazy (a node
//! ignores fires for timers it no longer has armed), so the driving layer
//! only ever schedules.

use crate::crypto::Digest32;
use crate::messages::{ClientId, Message};
use crate::params::{ReplicaId, Seq, View};

/// Address of a protocol participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeAddr {
    Replica(ReplicaId),
    Client(ClientId),
}

impl std::fmt::Display for NodeAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeAddr::Replica(r) => write!(f, "{r}"),
            NodeAddr::Client(c) => write!(f, "c{c}"),
        }
    }
}

/// Deterministic timer names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerId {
    /// Primary: propose leftover pending requests.
    Batch,
    /// C-collector: fall back to the linear path for a slot.
    FastPathTimeout { seq: Seq, view: View },
    /// Staggered fast commit-proof broadcast (collector index > 0).
    CommitProofStagger { seq: Seq, view: View },
    /// Staggered slow commit-proof broadcast.
    SlowProofStagger { seq: Seq, view: View },
    /// Staggered execute-proof/ack broadcast.
    ExecProofStagger { seq: Seq },
    /// View-change watchdog.
    ViewChange,
    /// State-transfer retry.
    StateSync,
    /// Client: retry an unacknowledged request.
    ClientRetry { timestamp: u64 },
}

/// One inbound stimulus.
#[derive(Debug, Clone)]
pub enum Event {
    /// Delivered network message. Channels are authenticated: `from` is
    /// trustworthy, message contents are not.
    Deliver { from: NodeAddr, msg: Message },
    TimerFired { id: TimerId },
    /// Client workload hook: issue one operation.
    Submit { op: Vec<u8> },
}

/// Things a node can observe for the trace and its oracles; they never
/// affect other nodes.
#[derive(Debug, Clone)]
pub enum Observation {
    Committed {
        seq: Seq,
        view: View,
        block_hash: Digest32,
        content_hash: Digest32,
        fast: bool,
        log_len: usize,
    },
    Executed {
        seq: Seq,
        digest: Digest32,
        /// (client, timestamp) pairs applied (not deduplicated away).
        applied: Vec<(ClientId, u64)>,
        log_len: usize,
    },
    LsAdvanced { ls: Seq, log_len: usize },
    ViewEntered { view: View },
    NewViewSlot {
        view: View,
        seq: Seq,
        outcome: SlotOutcomeKind,
        content_hash: Option<Digest32>,
    },
    EquivocationObserved { seq: Seq, view: View },
    /// Two verifying commit certificates disagreed on a slot's hash; with at
    /// most f Byzantine signers this must never fire.
    ConflictingCommitProof { seq: Seq },
    StateTransferInstalled { seq: Seq },
    /// Client side: a request completed with a verified value.
    RequestCompleted {
        client: ClientId,
        timestamp: u64,
        seq: Seq,
        value: Vec<u8>,
        /// Messages this client received while the request was in flight.
        deliveries: u64,
        /// Completed by the single execute-ack (true) or the f+1 path.
        single_message: bool,
    },
    /// Client side: retry budget exhausted.
    RequestAbandoned { client: ClientId, timestamp: u64 },
}

/// How a slot was resolved while accepting a new view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotOutcomeKind {
    Decide,
    Adopt,
    Noop,
}

/// One outbound effect.
#[derive(Debug, Clone)]
pub enum Action {
    Send { to: NodeAddr, msg: Message },
    SetTimer { id: TimerId, delay: u64 },
    CancelTimer { id: TimerId },
    Observe(Observation),
}

/// A deterministic protocol participant.
pub trait NodeLogic {
    fn on_event(&mut self, now: u64, event: Event) -> Vec<Action>;
}

/// Small builder so handlers can push effects without threading vectors.
#[derive(Default)]
pub struct ActionSink {
    actions: Vec<Action>,
}

impl ActionSink {
    pub fn new() -> Self {
        ActionSink { actions: Vec::new() }
    }

    pub fn send(&mut self, to: NodeAddr, msg: Message) {
        self.actions.push(Action::Send { to, msg });
    }

    pub fn set_timer(&mut self, id: TimerId, delay: u64) {
        self.actions.push(Action::SetTimer { id, delay });
    }

    pub fn cancel_timer(&mut self, id: TimerId) {
        self.actions.push(Action::CancelTimer { id });
    }

    pub fn observe(&mut self, obs: Observation) {
        self.actions.push(Action::Observe(obs));
    }

    pub fn finish(self) -> Vec<Action> {
        self.actions
    }
}
