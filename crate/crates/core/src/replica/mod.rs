//! The replica state machine: fast path, linear-PBFT fallback, execution and
//! single-message acknowledgement, checkpointing/garbage collection, the
//! dual-mode view change and snapshot-based state transfer.
//!
//! A replica is a deterministic event loop: one inbound message or timer at a
//! time, a list of outbound actions in return. All collections iterate in key
//! order and every timer has a named deadline, so a cluster of replicas
//! driven from a seeded scheduler replays bit-identically.
//!
//! Collector duties rotate per `(seq, view)`. The primary additionally serves
//! as the last, most-staggered collector for both commit and execution
//! aggregation, which keeps a single silent collector from ever stalling a
//! slot while leaving the common case at one active collector per group.

mod safety;

pub use safety::{choose_safe_value, BlockPool, DecideCert, SafeValue};

use crate::crypto::{
    commit_statement, CombinedSig, Digest32, SchemeSet, SigShare, SignerId, ThresholdScheme,
};
use crate::kvstore::{ExecRequest, KvOp, ServiceState};
use crate::messages::{
    complaint_statement, preprepare_signing_digest, retry_ack_digest, validate_well_formed,
    ClientId, ClientRequest, Complaint, DecisionBlock, FmEntry, LmEntry, Message, ProtocolMessage,
    SlotEntryPair, StableProof, SyncMessage, ViewChange, NULL_CLIENT,
};
use crate::node::{
    Action, ActionSink, Event, NodeAddr, NodeLogic, Observation, SlotOutcomeKind, TimerId,
};
use crate::params::{
    collectors_of, primary_of, ClusterParams, CollectorKind, PathKind, ReplicaId, Seq, View,
};
use log::{debug, trace};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

/// Which rungs of the protocol ladder are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolVariant {
    /// Baseline PBFT message pattern: all-to-all share exchange, every
    /// replica aggregates locally, no combined-signature broadcasts.
    AllToAll,
    /// Collector-based linear communication, slow path only.
    LinearPbft,
    /// Linear communication plus the single-round fast path.
    FastPath,
}

/// Timer durations in virtual microseconds.
#[derive(Debug, Clone, Copy)]
pub struct Timeouts {
    /// Primary flushes a sub-batch after this long with pending requests.
    pub batch: u64,
    /// Collector waits this long for the sigma threshold before falling back
    /// to the linear path.
    pub fast_path: u64,
    /// Activation spacing between collectors of one group.
    pub stagger_delta: u64,
    /// Initial view-change watchdog; doubles per consecutive failed view.
    pub view_change: u64,
    /// State-transfer retry interval.
    pub sync_retry: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            batch: 2_000,
            fast_path: 4_000,
            stagger_delta: 2_000,
            view_change: 200_000,
            sync_retry: 20_000,
        }
    }
}

/// Access-control rule: request allowed when the client matches (or `client`
/// is `None`) and its operation starts with `op_prefix`.
#[derive(Debug, Clone)]
pub struct AllowRule {
    pub client: Option<ClientId>,
    pub op_prefix: Vec<u8>,
}

/// Deliberate protocol breakages for oracle sensitivity tests. All false in
/// any real configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct TestingHooks {
    /// Accept pre-prepares from any view.
    pub skip_preprepare_view_check: bool,
    /// Commit a block the moment its pre-prepare is accepted, with no
    /// certificate. Breaks agreement under an equivocating primary, which is
    /// exactly what the trace oracle must catch.
    pub commit_without_certificate: bool,
}

#[derive(Debug, Clone)]
pub struct ReplicaConfig {
    pub id: ReplicaId,
    pub params: ClusterParams,
    pub variant: ProtocolVariant,
    /// Execution collectors + single client acknowledgement on; off means
    /// every replica acknowledges clients individually (f+1 path).
    pub exec_collector: bool,
    pub timeouts: Timeouts,
    /// Empty means allow everything.
    pub allowlist: Vec<AllowRule>,
    /// Fixed minimum batch size; `None` selects the adaptive heuristic.
    pub batch_target: Option<u64>,
    pub hooks: TestingHooks,
}

/// Adaptive batch sizing: exponential moving average of the pending-queue
/// length (alpha = 1/2, observed once per proposal attempt), divided by half
/// the number of blocks allowed in flight.
#[derive(Debug, Clone, Default)]
pub struct BatchSizer {
    avg_pending: f64,
}

impl BatchSizer {
    pub fn observe(&mut self, pending: usize) {
        self.avg_pending = 0.5 * self.avg_pending + 0.5 * pending as f64;
    }

    pub fn average(&self) -> f64 {
        self.avg_pending
    }

    pub fn batch(&self, params: &ClusterParams) -> u64 {
        compute_batch_size(self.avg_pending, params)
    }
}

/// `max(1, ceil(avg_pending / (active_window / 2)))`.
pub fn compute_batch_size(avg_pending: f64, params: &ClusterParams) -> u64 {
    let divisor = (params.active_window() / 2).max(1);
    let b = (avg_pending / divisor as f64).ceil();
    if b < 1.0 {
        1
    } else {
        b as u64
    }
}

/// Build the well-known genesis checkpoint certificate: `pi(d_0)` combined
/// from the first f+1 shares, handed to every replica at setup since no
/// signatures exist before startup.
pub fn genesis_proof(
    scheme: &dyn ThresholdScheme,
    schemes: &SchemeSet,
    params: &ClusterParams,
    genesis_digest: &Digest32,
) -> StableProof {
    let shares: Vec<SigShare> = (1..=params.pi_threshold)
        .map(|i| scheme.sign_share(&schemes.pi, i, genesis_digest))
        .collect();
    let cert = scheme.combine(&schemes.pi, &shares).expect("genesis shares combine");
    StableProof { seq: 0, digest: *genesis_digest, cert }
}

/// How a slot got committed.
#[derive(Debug, Clone)]
struct CommittedInfo {
    view: View,
    block_hash: Digest32,
    fast: bool,
    cert: DecideCert,
}

type SharePool = BTreeMap<View, BTreeMap<Digest32, BTreeMap<SignerId, SigShare>>>;

/// Per-sequence protocol state.
#[derive(Debug, Default)]
struct Slot {
    /// Accepted pre-prepare per view (highest view drives view-change fm).
    preprepares: BTreeMap<View, DecisionBlock>,
    /// Primary signature of the first accepted pre-prepare per view;
    /// conflicting signatures are equivocation evidence.
    preprepare_sigs: BTreeMap<View, (Digest32, SigShare)>,
    /// Views in which this replica sent its sign-share / included sigma.
    sign_shared: BTreeSet<View>,
    sigma_sent: BTreeSet<View>,
    /// Collector pools, grouped by digest to keep hostile shares apart.
    sigma_pool: SharePool,
    tau_pool: SharePool,
    commit_pool: SharePool,
    /// Accepted combined tau(h) per view (first prepare per view wins).
    prepares: BTreeMap<View, CombinedSig>,
    commit_shared: BTreeSet<View>,
    prepare_sent: BTreeSet<View>,
    slow_proof_sent: BTreeSet<View>,
    /// Built-but-staggered certificates.
    pending_sigma_proof: Option<(View, CombinedSig)>,
    pending_slow_proof: Option<(View, Digest32, CombinedSig)>,
    sigma_proof_seen: bool,
    slow_proof_seen: bool,
    fast_timer_armed: bool,
    committed: Option<CommittedInfo>,
    executed: bool,
    /// Commit certificate waiting for its block to arrive.
    pending_commit: Option<CommittedInfo>,
}

impl Slot {
    fn block_by_hash(&self, hash: &Digest32) -> Option<&DecisionBlock> {
        self.preprepares.values().find(|b| b.block_hash == *hash)
    }
}

/// Drop/validation counters, exposed for tests and metrics.
#[derive(Debug, Default, Clone)]
pub struct Counters {
    pub dropped_auth: u64,
    pub dropped_allowlist: u64,
    pub dropped_stale: u64,
    pub rejected_malformed: u64,
    pub invalid_shares: u64,
    pub ignored_out_of_window: u64,
    pub equivocations_observed: u64,
    pub view_changes_started: u64,
    pub new_views_processed: u64,
    pub state_transfers: u64,
}

pub struct Replica {
    cfg: ReplicaConfig,
    scheme: Arc<dyn ThresholdScheme>,
    schemes: SchemeSet,
    now: u64,

    view: View,
    ls: Seq,
    le: Seq,
    log: BTreeMap<Seq, Slot>,
    service: ServiceState,
    exec_digests: BTreeMap<Seq, Digest32>,

    // Execution/checkpoint share pools (E-collector duty), keyed by seq.
    exec_pool: BTreeMap<Seq, BTreeMap<Digest32, BTreeMap<SignerId, SigShare>>>,
    ckpt_pool: BTreeMap<Seq, BTreeMap<Digest32, BTreeMap<SignerId, SigShare>>>,
    exec_proof_seen: BTreeSet<Seq>,
    acks_sent: BTreeSet<Seq>,
    pi_certs: BTreeMap<Seq, StableProof>,
    stable_certs: BTreeMap<Seq, StableProof>,
    snapshots: BTreeMap<Seq, Vec<u8>>,

    // Primary state.
    pending: VecDeque<ClientRequest>,
    pending_keys: BTreeSet<(ClientId, u64)>,
    batcher: BatchSizer,
    next_seq: Seq,

    // View change state.
    vc_target: Option<View>,
    vc_backoff: u32,
    vc_collected: BTreeMap<View, BTreeMap<SignerId, ViewChange>>,
    complaints: BTreeMap<View, BTreeMap<SignerId, SigShare>>,
    new_view_processed: BTreeSet<View>,
    relayed_equivocations: BTreeSet<(Seq, View)>,
    stashed_preprepares: BTreeMap<(View, Seq), (DecisionBlock, SigShare)>,

    // Client-request watchdog inputs.
    forwarded: BTreeMap<(ClientId, u64), u64>,

    // State transfer.
    syncing: bool,

    // Timer deadlines; fires earlier than the recorded deadline are stale.
    armed: BTreeMap<TimerId, u64>,

    pub counters: Counters,
}

impl Replica {
    pub fn new(
        cfg: ReplicaConfig,
        scheme: Arc<dyn ThresholdScheme>,
        genesis: StableProof,
    ) -> Self {
        let schemes = SchemeSet::for_cluster(&cfg.params);
        let service = ServiceState::new(cfg.params.window);
        assert_eq!(
            genesis.digest,
            service.digest(),
            "genesis certificate must cover the empty state digest"
        );
        let mut exec_digests = BTreeMap::new();
        exec_digests.insert(0, genesis.digest);
        let mut stable_certs = BTreeMap::new();
        stable_certs.insert(0, genesis.clone());
        let mut pi_certs = BTreeMap::new();
        pi_certs.insert(0, genesis);
        Replica {
            schemes,
            scheme,
            now: 0,
            view: 0,
            ls: 0,
            le: 0,
            log: BTreeMap::new(),
            service,
            exec_digests,
            exec_pool: BTreeMap::new(),
            ckpt_pool: BTreeMap::new(),
            exec_proof_seen: BTreeSet::new(),
            acks_sent: BTreeSet::new(),
            pi_certs,
            stable_certs,
            snapshots: BTreeMap::new(),
            pending: VecDeque::new(),
            pending_keys: BTreeSet::new(),
            batcher: BatchSizer::default(),
            next_seq: 1,
            vc_target: None,
            vc_backoff: 0,
            vc_collected: BTreeMap::new(),
            complaints: BTreeMap::new(),
            new_view_processed: BTreeSet::new(),
            relayed_equivocations: BTreeSet::new(),
            stashed_preprepares: BTreeMap::new(),
            forwarded: BTreeMap::new(),
            syncing: false,
            armed: BTreeMap::new(),
            counters: Counters::default(),
            cfg,
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.cfg.id
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn last_stable(&self) -> Seq {
        self.ls
    }

    pub fn last_executed(&self) -> Seq {
        self.le
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }

    pub fn service_digest(&self) -> Digest32 {
        self.service.digest()
    }

    pub fn params(&self) -> &ClusterParams {
        &self.cfg.params
    }

    fn is_primary(&self) -> bool {
        primary_of(self.view, &self.cfg.params) == self.cfg.id
    }

    fn in_view_change(&self) -> bool {
        self.vc_target.map_or(false, |t| t > self.view)
    }

    fn all_replicas(&self) -> Vec<NodeAddr> {
        self.cfg.params.all_replicas().map(NodeAddr::Replica).collect()
    }

    fn broadcast(&self, sink: &mut ActionSink, msg: ProtocolMessage) {
        let m = Message::Protocol(msg);
        for addr in self.all_replicas() {
            sink.send(addr, m.clone());
        }
    }

    fn sign(&self, scheme: &crate::crypto::SchemeDescriptor, digest: &Digest32) -> SigShare {
        self.scheme.sign_share(scheme, self.cfg.id.0, digest)
    }

    // ------------------------------------------------------------------
    // Role computation
    // ------------------------------------------------------------------

    /// Destinations for sign-share messages at `(seq, view)`.
    fn sign_share_dests(&self, seq: Seq, view: View) -> Vec<NodeAddr> {
        match self.cfg.variant {
            ProtocolVariant::AllToAll => self.all_replicas(),
            ProtocolVariant::LinearPbft => {
                let a = collectors_of(seq, view, CollectorKind::Commit, PathKind::Linear, &self.cfg.params);
                a.c_collectors.iter().map(|r| NodeAddr::Replica(*r)).collect()
            }
            ProtocolVariant::FastPath => {
                let a = collectors_of(seq, view, CollectorKind::Commit, PathKind::Fast, &self.cfg.params);
                let mut dests: Vec<ReplicaId> = a.c_collectors.clone();
                let primary = primary_of(view, &self.cfg.params);
                if !dests.contains(&primary) {
                    dests.push(primary);
                }
                dests.into_iter().map(NodeAddr::Replica).collect()
            }
        }
    }

    /// Destinations for slow-path commit shares.
    fn commit_dests(&self, seq: Seq, view: View) -> Vec<NodeAddr> {
        match self.cfg.variant {
            ProtocolVariant::AllToAll => self.all_replicas(),
            _ => {
                let a = collectors_of(seq, view, CollectorKind::Commit, PathKind::Linear, &self.cfg.params);
                a.c_collectors.iter().map(|r| NodeAddr::Replica(*r)).collect()
            }
        }
    }

    /// Destinations for sign-state/checkpoint shares for a block committed in
    /// `block_view`.
    fn exec_dests(&self, seq: Seq, block_view: View) -> Vec<NodeAddr> {
        if self.cfg.variant == ProtocolVariant::AllToAll {
            return self.all_replicas();
        }
        let a = collectors_of(seq, block_view, CollectorKind::Execute, PathKind::Fast, &self.cfg.params);
        let mut dests: Vec<ReplicaId> = a.e_collectors.clone();
        let primary = primary_of(block_view, &self.cfg.params);
        if !dests.contains(&primary) {
            dests.push(primary);
        }
        dests.into_iter().map(NodeAddr::Replica).collect()
    }

    /// My activation rank among the commit collectors of `(seq, view)`:
    /// 0..=c for drawn collectors, c+1 for the primary fallback, `None` when
    /// not a collector. In the all-to-all variant everyone aggregates at
    /// rank 0.
    fn commit_collector_rank(&self, seq: Seq, view: View) -> Option<u64> {
        if self.cfg.variant == ProtocolVariant::AllToAll {
            return Some(0);
        }
        if self.cfg.variant == ProtocolVariant::LinearPbft {
            let a = collectors_of(seq, view, CollectorKind::Commit, PathKind::Linear, &self.cfg.params);
            return a.c_collectors.iter().position(|r| *r == self.cfg.id).map(|i| i as u64);
        }
        let a = collectors_of(seq, view, CollectorKind::Commit, PathKind::Fast, &self.cfg.params);
        if let Some(i) = a.c_collectors.iter().position(|r| *r == self.cfg.id) {
            return Some(i as u64);
        }
        if primary_of(view, &self.cfg.params) == self.cfg.id {
            return Some(self.cfg.params.c + 1);
        }
        None
    }

    /// My activation rank among the slow-path (linear) collectors.
    fn slow_collector_rank(&self, seq: Seq, view: View) -> Option<u64> {
        if self.cfg.variant == ProtocolVariant::AllToAll {
            return Some(0);
        }
        let a = collectors_of(seq, view, CollectorKind::Commit, PathKind::Linear, &self.cfg.params);
        a.c_collectors.iter().position(|r| *r == self.cfg.id).map(|i| i as u64)
    }

    /// My activation rank among the execution collectors.
    fn exec_collector_rank(&self, seq: Seq, block_view: View) -> Option<u64> {
        if self.cfg.variant == ProtocolVariant::AllToAll {
            return Some(0);
        }
        let a = collectors_of(seq, block_view, CollectorKind::Execute, PathKind::Fast, &self.cfg.params);
        if let Some(i) = a.e_collectors.iter().position(|r| *r == self.cfg.id) {
            return Some(i as u64);
        }
        if primary_of(block_view, &self.cfg.params) == self.cfg.id {
            return Some(self.cfg.params.c + 1);
        }
        None
    }

    // ------------------------------------------------------------------
    // Timers
    // ------------------------------------------------------------------

    fn arm(&mut self, sink: &mut ActionSink, id: TimerId, delay: u64) {
        self.armed.insert(id, self.now + delay);
        sink.set_timer(id, delay);
    }

    fn disarm(&mut self, sink: &mut ActionSink, id: TimerId) {
        if self.armed.remove(&id).is_some() {
            sink.cancel_timer(id);
        }
    }

    /// True when the fire is current (deadline reached and still armed).
    fn take_fire(&mut self, id: TimerId) -> bool {
        match self.armed.get(&id) {
            Some(deadline) if *deadline <= self.now => {
                self.armed.remove(&id);
                true
            }
            _ => false,
        }
    }

    // ------------------------------------------------------------------
    // Client requests and proposals
    // ------------------------------------------------------------------

    fn allowed(&self, req: &ClientRequest) -> bool {
        if req.is_null() {
            return true;
        }
        if self.cfg.allowlist.is_empty() {
            return true;
        }
        self.cfg.allowlist.iter().any(|rule| {
            rule.client.map_or(true, |c| c == req.client) && req.op.starts_with(&rule.op_prefix)
        })
    }

    fn verify_request(&self, req: &ClientRequest) -> bool {
        req.auth.digest == ClientRequest::signing_digest(req.client, req.timestamp, &req.op)
            && self.scheme.verify_share(&self.schemes.client_auth, &req.auth)
            && KvOp::decode(&req.op).is_ok()
    }

    fn on_client_request(&mut self, sink: &mut ActionSink, req: ClientRequest) {
        if !self.verify_request(&req) {
            self.counters.dropped_auth += 1;
            return;
        }
        if !self.allowed(&req) {
            self.counters.dropped_allowlist += 1;
            return;
        }
        if let Some(reply) = self.service.reply(req.client) {
            if reply.timestamp == req.timestamp {
                // Already executed: answer from the reply cache.
                let ack = self.retry_ack_for(req.client, reply);
                sink.send(NodeAddr::Client(req.client), Message::Sync(ack));
                return;
            }
            if reply.timestamp > req.timestamp {
                self.counters.dropped_stale += 1;
                return;
            }
        }
        if self.is_primary() {
            let key = (req.client, req.timestamp);
            if self.pending_keys.insert(key) {
                self.pending.push_back(req);
            }
            self.try_propose(sink, false);
        } else {
            // Forward to the primary and watch for progress; a censored
            // request must eventually force a view change.
            let primary = primary_of(self.view, &self.cfg.params);
            self.forwarded.entry((req.client, req.timestamp)).or_insert(self.now);
            sink.send(NodeAddr::Replica(primary), Message::Request(req));
        }
    }

    fn retry_ack_for(&self, client: ClientId, reply: &crate::kvstore::ReplyRecord) -> SyncMessage {
        let state_digest = self.exec_digests.get(&reply.seq).copied().unwrap_or(Digest32::ZERO);
        let digest = retry_ack_digest(reply.seq, reply.pos, client, reply.timestamp, &reply.output, &state_digest);
        SyncMessage::RetryAck {
            seq: reply.seq,
            pos: reply.pos,
            client,
            timestamp: reply.timestamp,
            output: reply.output.clone(),
            state_digest,
            view: self.view,
            sig: self.sign(&self.schemes.replica_auth, &digest),
        }
    }

    fn try_propose(&mut self, sink: &mut ActionSink, batch_timeout: bool) {
        if !self.is_primary() || self.in_view_change() {
            return;
        }
        loop {
            if self.pending.is_empty() {
                self.disarm(sink, TimerId::Batch);
                return;
            }
            let window_ok = self.next_seq <= self.ls + self.cfg.params.window
                && self.next_seq <= self.le + self.cfg.params.fast_window();
            let in_flight = self.next_seq.saturating_sub(1).saturating_sub(self.le);
            if !window_ok || in_flight >= self.cfg.params.active_window() {
                // Stalled on the window; execution progress restarts us.
                return;
            }
            self.batcher.observe(self.pending.len());
            let batch = self.cfg.batch_target.unwrap_or_else(|| self.batcher.batch(&self.cfg.params));
            if (self.pending.len() as u64) < batch && !batch_timeout {
                if !self.armed.contains_key(&TimerId::Batch) {
                    self.arm(sink, TimerId::Batch, self.cfg.timeouts.batch);
                }
                return;
            }
            let take = self.pending.len().min(512);
            let requests: Vec<ClientRequest> = self.pending.drain(..take).collect();
            for r in &requests {
                self.pending_keys.remove(&(r.client, r.timestamp));
            }
            let seq = self.next_seq;
            self.next_seq += 1;
            let block = DecisionBlock::new(seq, self.view, requests);
            let sig = self.sign(
                &self.schemes.replica_auth,
                &preprepare_signing_digest(seq, self.view, &block.block_hash),
            );
            trace!("{} proposes seq {} with {} requests", self.cfg.id, seq, block.requests.len());
            self.broadcast(sink, ProtocolMessage::PrePrepare { block, sig });
            // Loop: more pending may justify another block right away.
        }
    }

    // ------------------------------------------------------------------
    // Fast path
    // ------------------------------------------------------------------

    fn on_preprepare(&mut self, sink: &mut ActionSink, from: ReplicaId, block: DecisionBlock, sig: SigShare) {
        let seq = block.seq;
        let view = block.view;
        let expected_primary = primary_of(view, &self.cfg.params);
        if from != expected_primary
            || sig.signer != expected_primary.0
            || !self.scheme.verify_share(&self.schemes.replica_auth, &sig)
        {
            self.counters.dropped_auth += 1;
            return;
        }
        if !self.cfg.hooks.skip_preprepare_view_check {
            if view > self.view {
                // Stash briefly; drained when the view change completes.
                if view <= self.view + 2 && self.stashed_preprepares.len() < 4 * self.cfg.params.window as usize {
                    self.stashed_preprepares.insert((view, seq), (block, sig));
                }
                return;
            }
            if view < self.view || self.in_view_change() {
                self.counters.dropped_stale += 1;
                return;
            }
        }
        if seq <= self.ls || seq > self.ls + self.cfg.params.window {
            self.counters.ignored_out_of_window += 1;
            return;
        }
        for req in &block.requests {
            if !self.verify_request(req) || !self.allowed(req) {
                self.counters.dropped_auth += 1;
                return;
            }
        }

        let slot = self.log.entry(seq).or_default();
        if let Some((known_hash, known_sig)) = slot.preprepare_sigs.get(&view) {
            if *known_hash != block.block_hash {
                // Publicly verifiable contradiction from the primary.
                let evidence = Complaint::Equivocation {
                    seq,
                    view,
                    first_hash: *known_hash,
                    first_sig: known_sig.clone(),
                    second_hash: block.block_hash,
                    second_sig: sig,
                };
                self.counters.equivocations_observed += 1;
                sink.observe(Observation::EquivocationObserved { seq, view });
                self.broadcast(sink, ProtocolMessage::Complaint(evidence));
                self.start_view_change(sink, view + 1);
            }
            return; // duplicate or equivocation; never re-accept
        }
        slot.preprepare_sigs.insert(view, (block.block_hash, sig));
        slot.preprepares.insert(view, block.clone());

        if self.cfg.hooks.commit_without_certificate {
            let fake = CombinedSig {
                scheme: crate::crypto::SchemeTag::Sigma,
                digest: block.block_hash,
                evidence: Vec::new(),
            };
            self.commit_slot(sink, seq, view, block.block_hash, true, DecideCert::Fast(fake));
            return;
        }

        self.send_sign_share(sink, seq, view);
        self.maybe_arm_watchdog(sink);
    }

    fn send_sign_share(&mut self, sink: &mut ActionSink, seq: Seq, view: View) {
        let Some(slot) = self.log.get_mut(&seq) else { return };
        if slot.sign_shared.contains(&view) {
            return;
        }
        let Some(block) = slot.preprepares.get(&view) else { return };
        let hash = block.block_hash;
        slot.sign_shared.insert(view);
        let fast_ok = self.cfg.variant == ProtocolVariant::FastPath
            && seq >= self.le
            && seq <= self.le + self.cfg.params.fast_window();
        let sigma = if fast_ok {
            self.log.get_mut(&seq).unwrap().sigma_sent.insert(view);
            Some(self.sign(&self.schemes.sigma, &hash))
        } else {
            None
        };
        let tau = Some(self.sign(&self.schemes.tau, &hash));
        let msg = Message::Protocol(ProtocolMessage::SignShare { seq, view, sigma, tau });
        for dest in self.sign_share_dests(seq, view) {
            sink.send(dest, msg.clone());
        }
    }

    fn on_sign_share(
        &mut self,
        sink: &mut ActionSink,
        from: ReplicaId,
        seq: Seq,
        view: View,
        sigma: Option<SigShare>,
        tau: Option<SigShare>,
    ) {
        if view != self.view || self.in_view_change() {
            self.counters.dropped_stale += 1;
            return;
        }
        if seq <= self.ls || seq > self.ls + self.cfg.params.window {
            self.counters.ignored_out_of_window += 1;
            return;
        }
        let Some(rank) = self.commit_collector_rank(seq, view) else {
            return;
        };
        for (share, pool_kind) in [(sigma, SchemeTagKind::Sigma), (tau, SchemeTagKind::Tau)] {
            let Some(share) = share else { continue };
            if share.signer != from.0 {
                self.counters.invalid_shares += 1;
                continue;
            }
            let desc = match pool_kind {
                SchemeTagKind::Sigma => &self.schemes.sigma,
                SchemeTagKind::Tau => &self.schemes.tau,
            };
            if !self.scheme.verify_share(desc, &share) {
                self.counters.invalid_shares += 1;
                continue;
            }
            let slot = self.log.entry(seq).or_default();
            let pool = match pool_kind {
                SchemeTagKind::Sigma => &mut slot.sigma_pool,
                SchemeTagKind::Tau => &mut slot.tau_pool,
            };
            pool.entry(view)
                .or_default()
                .entry(share.digest)
                .or_default()
                .entry(share.signer)
                .or_insert(share);
        }
        self.check_commit_thresholds(sink, seq, view, rank);
    }

    fn check_commit_thresholds(&mut self, sink: &mut ActionSink, seq: Seq, view: View, rank: u64) {
        let params = self.cfg.params;
        let variant = self.cfg.variant;
        let stagger = self.cfg.timeouts.stagger_delta;
        let fast_timeout = self.cfg.timeouts.fast_path;

        let Some(slot) = self.log.get_mut(&seq) else { return };
        if slot.committed.is_some() {
            return;
        }

        // Sigma threshold: fast commit certificate.
        if variant == ProtocolVariant::FastPath && !slot.sigma_proof_seen && slot.pending_sigma_proof.is_none() {
            let group = slot
                .sigma_pool
                .get(&view)
                .and_then(|by_digest| {
                    by_digest.iter().find(|(_, signers)| signers.len() as u64 >= params.sigma_threshold)
                });
            if let Some((_, signers)) = group {
                let shares: Vec<SigShare> = signers.values().cloned().collect();
                if let Ok(proof) = self.scheme.combine(&self.schemes.sigma, &shares) {
                    let slot = self.log.get_mut(&seq).unwrap();
                    slot.pending_sigma_proof = Some((view, proof));
                    if rank == 0 {
                        self.emit_sigma_proof(sink, seq, view);
                    } else {
                        self.arm(sink, TimerId::CommitProofStagger { seq, view }, rank * stagger);
                    }
                    return;
                }
            }
        }

        // Tau threshold: either fall back after a timeout (fast-path
        // variant), or drive the prepare immediately (linear variant), or
        // act as a regular PBFT replica (all-to-all variant).
        let slot = self.log.get_mut(&seq).unwrap();
        let tau_ready = slot
            .tau_pool
            .get(&view)
            .map_or(false, |by_digest| {
                by_digest.values().any(|signers| signers.len() as u64 >= params.tau_threshold)
            });
        if !tau_ready || slot.prepare_sent.contains(&view) {
            return;
        }
        match variant {
            ProtocolVariant::FastPath => {
                if !slot.fast_timer_armed && !slot.sigma_proof_seen {
                    slot.fast_timer_armed = true;
                    self.arm(
                        sink,
                        TimerId::FastPathTimeout { seq, view },
                        fast_timeout + rank * stagger,
                    );
                }
            }
            ProtocolVariant::LinearPbft => {
                if rank == 0 {
                    self.emit_prepare(sink, seq, view);
                } else if !slot.fast_timer_armed {
                    slot.fast_timer_armed = true;
                    self.arm(sink, TimerId::FastPathTimeout { seq, view }, rank * stagger);
                }
            }
            ProtocolVariant::AllToAll => {
                // Local aggregation stands in for an accepted prepare.
                self.adopt_local_prepare(sink, seq, view);
            }
        }
    }

    fn combine_tau(&self, slot: &Slot, view: View) -> Option<CombinedSig> {
        let by_digest = slot.tau_pool.get(&view)?;
        let (_, signers) = by_digest
            .iter()
            .find(|(_, signers)| signers.len() as u64 >= self.cfg.params.tau_threshold)?;
        let shares: Vec<SigShare> = signers.values().cloned().collect();
        self.scheme.combine(&self.schemes.tau, &shares).ok()
    }

    fn emit_sigma_proof(&mut self, sink: &mut ActionSink, seq: Seq, view: View) {
        let Some(slot) = self.log.get_mut(&seq) else { return };
        if slot.sigma_proof_seen || slot.committed.is_some() {
            return;
        }
        let Some((v, proof)) = slot.pending_sigma_proof.clone() else { return };
        if v != view {
            return;
        }
        slot.sigma_proof_seen = true;
        self.broadcast(sink, ProtocolMessage::FullCommitProof { seq, view, proof });
    }

    fn emit_prepare(&mut self, sink: &mut ActionSink, seq: Seq, view: View) {
        let Some(slot) = self.log.get(&seq) else { return };
        if slot.committed.is_some() || slot.sigma_proof_seen || slot.prepare_sent.contains(&view) {
            return;
        }
        let Some(proof) = self.combine_tau(slot, view) else { return };
        let slot = self.log.get_mut(&seq).unwrap();
        slot.prepare_sent.insert(view);
        self.broadcast(sink, ProtocolMessage::Prepare { seq, view, proof });
    }

    /// All-to-all variant: treat a locally aggregated tau(h) as the accepted
    /// prepare and vote commit to everyone.
    fn adopt_local_prepare(&mut self, sink: &mut ActionSink, seq: Seq, view: View) {
        let Some(slot) = self.log.get(&seq) else { return };
        if slot.prepares.contains_key(&view) {
            return;
        }
        let Some(proof) = self.combine_tau(slot, view) else { return };
        let slot = self.log.get_mut(&seq).unwrap();
        slot.prepares.insert(view, proof.clone());
        slot.prepare_sent.insert(view);
        self.send_commit_share(sink, seq, view, proof.digest);
    }

    fn on_fast_path_timeout(&mut self, sink: &mut ActionSink, seq: Seq, view: View) {
        if view != self.view || self.in_view_change() {
            return;
        }
        let Some(slot) = self.log.get_mut(&seq) else { return };
        slot.fast_timer_armed = false;
        if slot.committed.is_some() || slot.sigma_proof_seen {
            return;
        }
        match self.cfg.variant {
            ProtocolVariant::AllToAll => {}
            _ => self.emit_prepare(sink, seq, view),
        }
    }

    // ------------------------------------------------------------------
    // Linear-PBFT slow path
    // ------------------------------------------------------------------

    fn on_prepare(&mut self, sink: &mut ActionSink, seq: Seq, view: View, proof: CombinedSig) {
        if view != self.view || self.in_view_change() {
            self.counters.dropped_stale += 1;
            return;
        }
        if seq <= self.ls || seq > self.ls + self.cfg.params.window {
            self.counters.ignored_out_of_window += 1;
            return;
        }
        if !self.scheme.verify_combined(&self.schemes.tau, &proof) {
            self.counters.invalid_shares += 1;
            return;
        }
        let slot = self.log.entry(seq).or_default();
        if slot.committed.is_some() || slot.prepares.contains_key(&view) {
            return; // already committed or first prepare already accepted
        }
        let hash = proof.digest;
        slot.prepares.insert(view, proof);
        self.send_commit_share(sink, seq, view, hash);
        // A prepare may complete a commit pool that was waiting for the hash.
        if let Some(rank) = self.slow_collector_rank(seq, view) {
            self.check_slow_threshold(sink, seq, view, rank);
        }
        self.maybe_arm_watchdog(sink);
    }

    fn send_commit_share(&mut self, sink: &mut ActionSink, seq: Seq, view: View, block_hash: Digest32) {
        let Some(slot) = self.log.get_mut(&seq) else { return };
        if !slot.commit_shared.insert(view) {
            return;
        }
        let stmt = commit_statement(seq, view, &block_hash);
        let share = self.sign(&self.schemes.tau, &stmt);
        let msg = Message::Protocol(ProtocolMessage::Commit { seq, view, share });
        for dest in self.commit_dests(seq, view) {
            sink.send(dest, msg.clone());
        }
    }

    fn on_commit_share(&mut self, sink: &mut ActionSink, from: ReplicaId, seq: Seq, view: View, share: SigShare) {
        if view != self.view || self.in_view_change() {
            self.counters.dropped_stale += 1;
            return;
        }
        if seq <= self.ls || seq > self.ls + self.cfg.params.window {
            self.counters.ignored_out_of_window += 1;
            return;
        }
        let Some(rank) = self.slow_collector_rank(seq, view) else { return };
        if share.signer != from.0 || !self.scheme.verify_share(&self.schemes.tau, &share) {
            self.counters.invalid_shares += 1;
            return;
        }
        let slot = self.log.entry(seq).or_default();
        slot.commit_pool
            .entry(view)
            .or_default()
            .entry(share.digest)
            .or_default()
            .entry(share.signer)
            .or_insert(share);
        self.check_slow_threshold(sink, seq, view, rank);
    }

    fn check_slow_threshold(&mut self, sink: &mut ActionSink, seq: Seq, view: View, rank: u64) {
        let params = self.cfg.params;
        let stagger = self.cfg.timeouts.stagger_delta;
        let Some(slot) = self.log.get_mut(&seq) else { return };
        if slot.committed.is_some() || slot.slow_proof_seen || slot.pending_slow_proof.is_some() {
            return;
        }
        // The commit statement is only nameable with the accepted prepare.
        let Some(prepare) = slot.prepares.get(&view) else { return };
        let block_hash = prepare.digest;
        let stmt = commit_statement(seq, view, &block_hash);
        let Some(signers) = slot.commit_pool.get(&view).and_then(|p| p.get(&stmt)) else {
            return;
        };
        if (signers.len() as u64) < params.tau_threshold {
            return;
        }
        let shares: Vec<SigShare> = signers.values().cloned().collect();
        let Ok(proof) = self.scheme.combine(&self.schemes.tau, &shares) else { return };

        if self.cfg.variant == ProtocolVariant::AllToAll {
            // Every replica aggregates locally; no proof broadcast.
            self.commit_slot(sink, seq, view, block_hash, false, DecideCert::Slow { view, proof });
            return;
        }
        let slot = self.log.get_mut(&seq).unwrap();
        slot.pending_slow_proof = Some((view, block_hash, proof));
        if rank == 0 {
            self.emit_slow_proof(sink, seq, view);
        } else {
            self.arm(sink, TimerId::SlowProofStagger { seq, view }, rank * stagger);
        }
    }

    fn emit_slow_proof(&mut self, sink: &mut ActionSink, seq: Seq, view: View) {
        let Some(slot) = self.log.get_mut(&seq) else { return };
        if slot.slow_proof_seen || slot.committed.is_some() || slot.slow_proof_sent.contains(&view) {
            return;
        }
        let Some((v, block_hash, proof)) = slot.pending_slow_proof.clone() else { return };
        if v != view {
            return;
        }
        slot.slow_proof_seen = true;
        slot.slow_proof_sent.insert(view);
        self.broadcast(sink, ProtocolMessage::FullCommitProofSlow { seq, view, block_hash, proof });
    }

    // ------------------------------------------------------------------
    // Commit triggers
    // ------------------------------------------------------------------

    fn on_commit_proof_fast(&mut self, sink: &mut ActionSink, from: ReplicaId, seq: Seq, view: View, proof: CombinedSig) {
        if !self.scheme.verify_combined(&self.schemes.sigma, &proof) {
            self.counters.invalid_shares += 1;
            return;
        }
        if seq <= self.ls {
            return;
        }
        if seq > self.ls + self.cfg.params.window {
            self.maybe_state_sync(sink, from);
            return;
        }
        let hash = proof.digest;
        {
            let slot = self.log.entry(seq).or_default();
            slot.sigma_proof_seen = true;
            slot.fast_timer_armed = false;
        }
        self.disarm(sink, TimerId::CommitProofStagger { seq, view });
        self.disarm(sink, TimerId::FastPathTimeout { seq, view });
        self.try_commit_with_cert(sink, from, seq, view, hash, true, DecideCert::Fast(proof));
    }

    fn on_commit_proof_slow(
        &mut self,
        sink: &mut ActionSink,
        from: ReplicaId,
        seq: Seq,
        view: View,
        block_hash: Digest32,
        proof: CombinedSig,
    ) {
        if !self.scheme.verify_combined(&self.schemes.tau, &proof)
            || proof.digest != commit_statement(seq, view, &block_hash)
        {
            self.counters.invalid_shares += 1;
            return;
        }
        if seq <= self.ls {
            return;
        }
        if seq > self.ls + self.cfg.params.window {
            self.maybe_state_sync(sink, from);
            return;
        }
        {
            let slot = self.log.entry(seq).or_default();
            slot.slow_proof_seen = true;
            slot.fast_timer_armed = false;
        }
        self.disarm(sink, TimerId::SlowProofStagger { seq, view });
        self.disarm(sink, TimerId::FastPathTimeout { seq, view });
        self.try_commit_with_cert(sink, from, seq, view, block_hash, false, DecideCert::Slow { view, proof });
    }

    fn try_commit_with_cert(
        &mut self,
        sink: &mut ActionSink,
        from: ReplicaId,
        seq: Seq,
        view: View,
        hash: Digest32,
        fast: bool,
        cert: DecideCert,
    ) {
        let slot = self.log.entry(seq).or_default();
        if let Some(existing) = &slot.committed {
            if existing.block_hash != hash {
                sink.observe(Observation::ConflictingCommitProof { seq });
            }
            return;
        }
        let have_block = slot.block_by_hash(&hash).is_some();
        if have_block {
            self.commit_slot(sink, seq, view, hash, fast, cert);
        } else {
            // Commit proofs may legitimately arrive before the block; fetch
            // it from the proof's sender by hash.
            slot.pending_commit = Some(CommittedInfo { view, block_hash: hash, fast, cert });
            sink.send(
                NodeAddr::Replica(from),
                Message::Sync(SyncMessage::BlockRequest { seq, view, block_hash: hash }),
            );
        }
    }

    fn commit_slot(
        &mut self,
        sink: &mut ActionSink,
        seq: Seq,
        view: View,
        hash: Digest32,
        fast: bool,
        cert: DecideCert,
    ) {
        let log_len = self.log.len();
        let slot = self.log.entry(seq).or_default();
        if let Some(existing) = &slot.committed {
            if existing.block_hash != hash {
                sink.observe(Observation::ConflictingCommitProof { seq });
            }
            return;
        }
        let Some(block) = slot.block_by_hash(&hash) else {
            return;
        };
        let content_hash = block.content_hash();
        let sigma_participated = slot.sigma_sent.contains(&view);
        slot.committed = Some(CommittedInfo { view, block_hash: hash, fast, cert });
        slot.pending_commit = None;
        sink.observe(Observation::Committed {
            seq,
            view,
            block_hash: hash,
            content_hash,
            fast,
            log_len,
        });
        // Fast-path garbage collection: committing fast at s proves 2f+c+1
        // honest replicas were inside their execution window, so s - WIN/4
        // is stable. Only applied when this replica itself met the window
        // rule (it contributed a sigma share), keeping ls <= le locally.
        if fast && sigma_participated {
            let stable = seq.saturating_sub(self.cfg.params.fast_window());
            self.gc_advance(sink, stable);
        }
        self.try_execute(sink);
        self.maybe_arm_watchdog(sink);
    }

    // ------------------------------------------------------------------
    // Execution and acknowledgement
    // ------------------------------------------------------------------

    fn try_execute(&mut self, sink: &mut ActionSink) {
        loop {
            let next = self.le + 1;
            let Some(slot) = self.log.get(&next) else { return };
            let Some(info) = slot.committed.clone() else { return };
            if slot.executed {
                return;
            }
            let Some(block) = slot.block_by_hash(&info.block_hash).cloned() else { return };

            let mut exec_reqs = Vec::with_capacity(block.requests.len());
            let mut applied = Vec::new();
            for req in &block.requests {
                let op = KvOp::decode(&req.op).unwrap_or(KvOp::Noop);
                if req.client != NULL_CLIENT {
                    let fresh = self
                        .service
                        .reply(req.client)
                        .map_or(true, |r| r.timestamp < req.timestamp);
                    if fresh {
                        applied.push((req.client, req.timestamp));
                    }
                }
                exec_reqs.push(ExecRequest {
                    client: req.client,
                    timestamp: req.timestamp,
                    request: req.encode(),
                    op,
                });
            }
            let outputs = self.service.execute_block(next, &exec_reqs);
            self.le = next;
            let digest = self.service.digest();
            self.exec_digests.insert(next, digest);
            self.log.get_mut(&next).unwrap().executed = true;
            for key in applied.iter() {
                self.forwarded.remove(key);
            }
            sink.observe(Observation::Executed {
                seq: next,
                digest,
                applied,
                log_len: self.log.len(),
            });
            self.progress_made(sink);

            if self.cfg.exec_collector {
                let share = self.sign(&self.schemes.pi, &digest);
                let msg = Message::Protocol(ProtocolMessage::SignState { seq: next, share });
                for dest in self.exec_dests(next, info.view) {
                    sink.send(dest, msg.clone());
                }
            } else {
                // No execution collectors: acknowledge clients directly;
                // they complete on f+1 matching replies.
                for req in &block.requests {
                    if req.is_null() {
                        continue;
                    }
                    if let Some(reply) = self.service.reply(req.client) {
                        if reply.timestamp == req.timestamp {
                            let ack = self.retry_ack_for(req.client, &reply.clone());
                            sink.send(NodeAddr::Client(req.client), Message::Sync(ack));
                        }
                    }
                }
            }
            let _ = outputs;

            if next % self.cfg.params.checkpoint_period == 0 {
                self.on_checkpoint_boundary(sink, next, info.view, digest);
            }
            // E-collector duty may have been waiting for our execution.
            self.check_exec_threshold(sink, next);
        }
    }

    fn on_checkpoint_boundary(&mut self, sink: &mut ActionSink, seq: Seq, block_view: View, digest: Digest32) {
        self.snapshots.insert(seq, self.service.snapshot());
        let keep_from = seq.saturating_sub(self.cfg.params.checkpoint_period);
        self.snapshots.retain(|s, _| *s >= keep_from);
        let share = self.sign(&self.schemes.pi, &digest);
        let msg = Message::Protocol(ProtocolMessage::CheckpointVote { seq, share });
        for dest in self.exec_dests(seq, block_view) {
            sink.send(dest, msg.clone());
        }
    }

    fn on_sign_state(&mut self, sink: &mut ActionSink, from: ReplicaId, seq: Seq, share: SigShare, checkpoint: bool) {
        if seq <= self.ls {
            return;
        }
        if share.signer != from.0 || !self.scheme.verify_share(&self.schemes.pi, &share) {
            self.counters.invalid_shares += 1;
            return;
        }
        let pool = if checkpoint { &mut self.ckpt_pool } else { &mut self.exec_pool };
        pool.entry(seq)
            .or_default()
            .entry(share.digest)
            .or_default()
            .entry(share.signer)
            .or_insert(share);
        if checkpoint {
            self.check_ckpt_threshold(sink, seq);
        } else {
            self.check_exec_threshold(sink, seq);
        }
    }

    fn check_exec_threshold(&mut self, sink: &mut ActionSink, seq: Seq) {
        if !self.cfg.exec_collector || self.exec_proof_seen.contains(&seq) || self.acks_sent.contains(&seq) {
            return;
        }
        if self.le < seq {
            return; // need our own execution (state and proofs) first
        }
        let Some(my_digest) = self.exec_digests.get(&seq).copied() else { return };
        let Some(info) = self.log.get(&seq).and_then(|s| s.committed.clone()) else { return };
        let Some(rank) = self.exec_collector_rank(seq, info.view) else { return };
        let ready = self
            .exec_pool
            .get(&seq)
            .and_then(|p| p.get(&my_digest))
            .map_or(false, |signers| signers.len() as u64 >= self.cfg.params.pi_threshold);
        if !ready {
            return;
        }
        if rank == 0 {
            self.emit_exec_proof(sink, seq);
        } else if !self.armed.contains_key(&TimerId::ExecProofStagger { seq }) {
            let delay = rank * self.cfg.timeouts.stagger_delta;
            self.arm(sink, TimerId::ExecProofStagger { seq }, delay);
        }
    }

    fn emit_exec_proof(&mut self, sink: &mut ActionSink, seq: Seq) {
        if self.exec_proof_seen.contains(&seq) || !self.acks_sent.insert(seq) {
            return;
        }
        let Some(my_digest) = self.exec_digests.get(&seq).copied() else { return };
        let Some(signers) = self.exec_pool.get(&seq).and_then(|p| p.get(&my_digest)) else { return };
        let shares: Vec<SigShare> = signers.values().cloned().collect();
        let Ok(proof) = self.scheme.combine(&self.schemes.pi, &shares) else { return };
        self.store_pi_cert(seq, proof.clone());
        self.broadcast(sink, ProtocolMessage::FullExecuteProof { seq, proof: proof.clone() });

        // One execute-ack per client request of the block.
        let Some(info) = self.log.get(&seq).and_then(|s| s.committed.clone()) else { return };
        let Some(block) = self.log.get(&seq).and_then(|s| s.block_by_hash(&info.block_hash)).cloned() else {
            return;
        };
        for (pos, req) in block.requests.iter().enumerate() {
            if req.is_null() {
                continue;
            }
            let Some((_, output)) = self.service.recorded_item(seq, pos as u32) else { continue };
            let Ok(merkle) = self.service.op_proof(seq, pos as u32) else { continue };
            let ack = ProtocolMessage::ExecuteAck {
                seq,
                pos: pos as u32,
                request: req.clone(),
                output: output.to_vec(),
                state_cert: proof.clone(),
                proof: merkle,
                view: self.view,
            };
            sink.send(NodeAddr::Client(req.client), Message::Protocol(ack));
        }
    }

    fn check_ckpt_threshold(&mut self, sink: &mut ActionSink, seq: Seq) {
        if self.le < seq {
            return;
        }
        let Some(my_digest) = self.exec_digests.get(&seq).copied() else { return };
        let ready = self
            .ckpt_pool
            .get(&seq)
            .and_then(|p| p.get(&my_digest))
            .map_or(false, |signers| signers.len() as u64 >= self.cfg.params.pi_threshold);
        if !ready {
            return;
        }
        let shares: Vec<SigShare> = self.ckpt_pool[&seq][&my_digest].values().cloned().collect();
        let Ok(proof) = self.scheme.combine(&self.schemes.pi, &shares) else { return };
        self.store_pi_cert(seq, proof.clone());
        if self.cfg.variant == ProtocolVariant::AllToAll {
            // Everyone aggregates its own stability certificate.
            self.stable_checkpoint(sink, seq);
            return;
        }
        let Some(info) = self.log.get(&seq).and_then(|s| s.committed.clone()) else { return };
        if self.exec_collector_rank(seq, info.view).is_some() && !self.exec_proof_seen.contains(&seq) {
            self.broadcast(sink, ProtocolMessage::FullExecuteProof { seq, proof });
        }
        self.stable_checkpoint(sink, seq);
    }

    fn store_pi_cert(&mut self, seq: Seq, proof: CombinedSig) {
        let entry = StableProof { seq, digest: proof.digest, cert: proof };
        self.pi_certs.entry(seq).or_insert_with(|| entry.clone());
        self.stable_certs.entry(seq).or_insert(entry);
    }

    fn on_execute_proof(&mut self, sink: &mut ActionSink, from: ReplicaId, seq: Seq, proof: CombinedSig) {
        if !self.scheme.verify_combined(&self.schemes.pi, &proof) {
            self.counters.invalid_shares += 1;
            return;
        }
        self.exec_proof_seen.insert(seq);
        self.disarm(sink, TimerId::ExecProofStagger { seq });
        self.store_pi_cert(seq, proof);
        if seq <= self.le {
            if seq % self.cfg.params.checkpoint_period == 0 {
                self.stable_checkpoint(sink, seq);
            }
        } else if seq > self.le + self.cfg.params.window {
            // The cluster certified execution far beyond us.
            self.maybe_state_sync(sink, from);
        }
    }

    /// A seq with a pi certificate and local execution is stable: advance ls
    /// and garbage-collect everything at or below it.
    fn stable_checkpoint(&mut self, sink: &mut ActionSink, seq: Seq) {
        if seq > self.le {
            return;
        }
        if let (Some(mine), Some(cert)) = (self.exec_digests.get(&seq), self.pi_certs.get(&seq)) {
            if *mine == cert.digest {
                self.gc_advance(sink, seq);
            }
        }
    }

    fn gc_advance(&mut self, sink: &mut ActionSink, stable: Seq) {
        if stable <= self.ls {
            return;
        }
        self.ls = stable;
        let ls = self.ls;
        self.log.retain(|s, _| *s > ls);
        self.exec_digests.retain(|s, _| *s >= ls);
        self.exec_pool.retain(|s, _| *s > ls);
        self.ckpt_pool.retain(|s, _| *s > ls);
        self.exec_proof_seen.retain(|s| *s > ls);
        self.acks_sent.retain(|s| *s > ls);
        self.pi_certs.retain(|s, _| *s >= ls);
        self.stable_certs.retain(|s, _| *s >= ls);
        sink.observe(Observation::LsAdvanced { ls, log_len: self.log.len() });
    }

    // ------------------------------------------------------------------
    // State transfer
    // ------------------------------------------------------------------

    fn maybe_state_sync(&mut self, sink: &mut ActionSink, peer: ReplicaId) {
        if self.syncing {
            return;
        }
        self.syncing = true;
        sink.send(
            NodeAddr::Replica(peer),
            Message::Sync(SyncMessage::SnapshotRequest { min_seq: self.le + 1 }),
        );
        self.arm(sink, TimerId::StateSync, self.cfg.timeouts.sync_retry);
    }

    fn on_snapshot_request(&mut self, sink: &mut ActionSink, from: ReplicaId, min_seq: Seq) {
        // Serve the newest boundary snapshot that has a certificate.
        let candidate = self
            .snapshots
            .iter()
            .rev()
            .find(|(seq, _)| **seq >= min_seq && self.pi_certs.contains_key(*seq));
        if let Some((seq, snapshot)) = candidate {
            let cert = &self.pi_certs[seq];
            sink.send(
                NodeAddr::Replica(from),
                Message::Sync(SyncMessage::SnapshotResponse {
                    seq: *seq,
                    digest: cert.digest,
                    cert: cert.cert.clone(),
                    snapshot: snapshot.clone(),
                }),
            );
        }
    }

    fn on_snapshot_response(
        &mut self,
        sink: &mut ActionSink,
        seq: Seq,
        digest: Digest32,
        cert: CombinedSig,
        snapshot: Vec<u8>,
    ) {
        if seq <= self.le {
            return; // stale or below our progress
        }
        if !self.scheme.verify_combined(&self.schemes.pi, &cert) || cert.digest != digest {
            self.counters.invalid_shares += 1;
            return;
        }
        let Ok(state) = ServiceState::from_snapshot(&snapshot) else {
            self.counters.rejected_malformed += 1;
            return;
        };
        if state.digest() != digest || state.last_seq() != seq {
            // Forged snapshot: contents do not reproduce the certified digest.
            self.counters.rejected_malformed += 1;
            return;
        }
        self.service = state;
        self.le = seq;
        self.exec_digests.clear();
        self.exec_digests.insert(seq, digest);
        self.store_pi_cert(seq, cert);
        self.syncing = false;
        self.disarm(sink, TimerId::StateSync);
        self.counters.state_transfers += 1;
        self.gc_advance(sink, seq);
        sink.observe(Observation::StateTransferInstalled { seq });
        self.try_execute(sink);
    }

    fn on_block_request(&mut self, sink: &mut ActionSink, from: ReplicaId, seq: Seq, block_hash: Digest32) {
        if let Some(block) = self.log.get(&seq).and_then(|s| s.block_by_hash(&block_hash)) {
            sink.send(
                NodeAddr::Replica(from),
                Message::Sync(SyncMessage::BlockResponse { block: block.clone() }),
            );
        }
    }

    fn on_block_response(&mut self, sink: &mut ActionSink, block: DecisionBlock) {
        let seq = block.seq;
        if seq <= self.ls || seq > self.ls + self.cfg.params.window {
            return;
        }
        for req in &block.requests {
            if !self.verify_request(req) {
                self.counters.dropped_auth += 1;
                return;
            }
        }
        let Some(slot) = self.log.get_mut(&seq) else { return };
        let Some(pending) = slot.pending_commit.clone() else { return };
        if block.block_hash != pending.block_hash {
            return;
        }
        slot.preprepares.entry(block.view).or_insert(block);
        self.commit_slot(sink, seq, pending.view, pending.block_hash, pending.fast, pending.cert);
    }

    // ------------------------------------------------------------------
    // View change
    // ------------------------------------------------------------------

    fn progress_made(&mut self, sink: &mut ActionSink) {
        self.vc_backoff = 0;
        self.disarm(sink, TimerId::ViewChange);
        self.maybe_arm_watchdog(sink);
    }

    fn work_pending(&self) -> bool {
        if !self.pending.is_empty() {
            return true;
        }
        if !self.forwarded.is_empty() {
            return true;
        }
        self.log
            .iter()
            .any(|(seq, slot)| *seq > self.le && (!slot.preprepares.is_empty() || slot.committed.is_some()))
    }

    fn maybe_arm_watchdog(&mut self, sink: &mut ActionSink) {
        let armed = self.armed.contains_key(&TimerId::ViewChange);
        if self.work_pending() {
            if !armed {
                let delay = self.cfg.timeouts.view_change.saturating_mul(1 << self.vc_backoff.min(16));
                self.arm(sink, TimerId::ViewChange, delay);
            }
        } else if armed {
            self.disarm(sink, TimerId::ViewChange);
        }
    }

    fn on_watchdog_fired(&mut self, sink: &mut ActionSink) {
        if !self.work_pending() {
            return;
        }
        let target = self.vc_target.unwrap_or(self.view).max(self.view) + 1;
        self.start_view_change(sink, target);
    }

    fn start_view_change(&mut self, sink: &mut ActionSink, target: View) {
        if target <= self.view || self.vc_target.map_or(false, |t| t >= target) {
            return;
        }
        debug!("{} starts view change toward {}", self.cfg.id, target);
        self.vc_target = Some(target);
        self.vc_backoff = self.vc_backoff.saturating_add(1);
        self.counters.view_changes_started += 1;

        // Timeout complaint: the f+1 join signal for everyone else.
        let vote = self.sign(&self.schemes.replica_auth, &complaint_statement(target));
        self.broadcast(sink, ProtocolMessage::Complaint(Complaint::Timeout { view: target, vote }));

        let vc = self.build_view_change(target);
        let primary = primary_of(target, &self.cfg.params);
        if primary == self.cfg.id {
            self.accept_view_change(sink, vc);
        } else {
            sink.send(NodeAddr::Replica(primary), Message::Protocol(ProtocolMessage::ViewChange(vc)));
        }
        // Watchdog for this attempt; doubles via vc_backoff when it fails.
        let delay = self.cfg.timeouts.view_change.saturating_mul(1 << self.vc_backoff.min(16));
        self.arm(sink, TimerId::ViewChange, delay);
    }

    /// Evidence for slots `(vc_ls, vc_ls + window]` as seen by this replica.
    pub fn build_view_change(&mut self, target: View) -> ViewChange {
        // Highest stable seq we can actually certify; the genesis proof
        // guarantees seq 0 always qualifies.
        let (vc_ls, stable) = self
            .stable_certs
            .range(..=self.ls)
            .next_back()
            .map(|(s, p)| (*s, p.clone()))
            .expect("genesis certificate always present");

        let mut entries = Vec::with_capacity(self.cfg.params.window as usize);
        let mut blocks: Vec<DecisionBlock> = Vec::new();
        let mut block_hashes: BTreeSet<Digest32> = BTreeSet::new();
        let mut include_block = |blocks: &mut Vec<DecisionBlock>, block: &DecisionBlock| {
            if block_hashes.insert(block.block_hash) {
                blocks.push(block.clone());
            }
        };

        for j in (vc_ls + 1)..=(vc_ls + self.cfg.params.window) {
            let Some(slot) = self.log.get(&j) else {
                entries.push(SlotEntryPair::empty());
                continue;
            };
            // lm: slow certificate, else highest accepted prepare.
            let lm = if let Some(info) = slot.committed.as_ref().filter(|i| !i.fast) {
                match &info.cert {
                    DecideCert::Slow { view, proof } => {
                        if let Some(b) = slot.block_by_hash(&info.block_hash) {
                            include_block(&mut blocks, b);
                        }
                        LmEntry::TauTau {
                            view: *view,
                            block_hash: info.block_hash,
                            proof: proof.clone(),
                        }
                    }
                    DecideCert::Fast(_) => LmEntry::NoCommit,
                }
            } else if let Some((view, proof)) = slot.prepares.iter().next_back() {
                if let Some(b) = slot.block_by_hash(&proof.digest) {
                    include_block(&mut blocks, b);
                }
                LmEntry::TauWithView { view: *view, proof: proof.clone() }
            } else {
                LmEntry::NoCommit
            };
            // fm: fast certificate, else own share for the highest accepted
            // pre-prepare.
            let fm = if let Some(info) = slot.committed.as_ref().filter(|i| i.fast) {
                match &info.cert {
                    DecideCert::Fast(proof) => {
                        if let Some(b) = slot.block_by_hash(&info.block_hash) {
                            include_block(&mut blocks, b);
                        }
                        FmEntry::Sigma { proof: proof.clone() }
                    }
                    DecideCert::Slow { .. } => FmEntry::NoPrePrepare,
                }
            } else if let Some((view, block)) = slot.preprepares.iter().next_back() {
                include_block(&mut blocks, block);
                FmEntry::SigmaShareWithView {
                    view: *view,
                    share: self.sign(&self.schemes.sigma, &block.block_hash),
                }
            } else {
                FmEntry::NoPrePrepare
            };
            entries.push(SlotEntryPair { lm, fm });
        }

        let mut vc = ViewChange {
            sender: self.cfg.id.0,
            new_view: target,
            ls: vc_ls,
            stable,
            entries,
            blocks,
            sig: self.sign(&self.schemes.replica_auth, &Digest32::ZERO),
        };
        vc.sig = self.sign(&self.schemes.replica_auth, &vc.signing_digest());
        vc
    }

    fn verify_view_change(&self, vc: &ViewChange) -> bool {
        // Structure was checked by validate_well_formed; verify crypto.
        if !self.scheme.verify_share(&self.schemes.replica_auth, &vc.sig) {
            return false;
        }
        if !self.scheme.verify_combined(&self.schemes.pi, &vc.stable.cert) {
            return false;
        }
        true
    }

    fn on_view_change(&mut self, sink: &mut ActionSink, from: ReplicaId, vc: ViewChange) {
        if vc.sender != from.0 || !self.verify_view_change(&vc) {
            self.counters.invalid_shares += 1;
            return;
        }
        let target = vc.new_view;
        if target <= self.view || primary_of(target, &self.cfg.params) != self.cfg.id {
            self.counters.dropped_stale += 1;
            return;
        }
        self.accept_view_change(sink, vc);
    }

    fn accept_view_change(&mut self, sink: &mut ActionSink, vc: ViewChange) {
        let target = vc.new_view;
        self.vc_collected.entry(target).or_default().insert(vc.sender, vc);
        let count = self.vc_collected[&target].len() as u64;
        // Join once f+1 replicas demonstrably want this view.
        if count >= self.cfg.params.f + 1 && self.vc_target.map_or(true, |t| t < target) {
            self.start_view_change(sink, target);
        }
        if count >= self.cfg.params.view_change_quorum() && !self.new_view_processed.contains(&target) {
            // Make sure our own evidence is part of the quorum we publish.
            if !self.vc_collected[&target].contains_key(&self.cfg.id.0) {
                let own = self.build_view_change(target);
                self.vc_collected.get_mut(&target).unwrap().insert(self.cfg.id.0, own);
            }
            let vcs: Vec<ViewChange> = self.vc_collected[&target]
                .values()
                .take(self.cfg.params.view_change_quorum() as usize)
                .cloned()
                .collect();
            // Extra resolution help: blocks from our own log backing any
            // hash the quorum references.
            let blocks = self.resolution_blocks(&vcs);
            let nv = ProtocolMessage::NewView { view: target, vcs: vcs.clone(), blocks: blocks.clone() };
            for addr in self.all_replicas() {
                if addr != NodeAddr::Replica(self.cfg.id) {
                    sink.send(addr, Message::Protocol(nv.clone()));
                }
            }
            self.process_new_view(sink, target, &vcs, &blocks);
        }
    }

    fn resolution_blocks(&self, vcs: &[ViewChange]) -> Vec<DecisionBlock> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for vc in vcs {
            for b in &vc.blocks {
                seen.insert(b.block_hash);
            }
        }
        for slot in self.log.values() {
            for block in slot.preprepares.values() {
                if seen.insert(block.block_hash) {
                    out.push(block.clone());
                }
            }
        }
        out
    }

    fn on_new_view(
        &mut self,
        sink: &mut ActionSink,
        from: ReplicaId,
        view: View,
        vcs: Vec<ViewChange>,
        blocks: Vec<DecisionBlock>,
    ) {
        if view <= self.view || self.new_view_processed.contains(&view) {
            self.counters.dropped_stale += 1;
            return;
        }
        if from != primary_of(view, &self.cfg.params) {
            self.counters.dropped_auth += 1;
            return;
        }
        for vc in &vcs {
            if !self.verify_view_change(vc) {
                // Primary suspected: move past it.
                self.counters.invalid_shares += 1;
                self.start_view_change(sink, view + 1);
                return;
            }
        }
        self.process_new_view(sink, view, &vcs, &blocks);
    }

    /// Resolve every slot of the new view. Returns the per-slot outcomes
    /// (exposed for tests through observations).
    fn process_new_view(
        &mut self,
        sink: &mut ActionSink,
        target: View,
        vcs: &[ViewChange],
        extra_blocks: &[DecisionBlock],
    ) -> Vec<(Seq, SafeValue)> {
        self.new_view_processed.insert(target);
        self.counters.new_views_processed += 1;

        // Highest certified stable seq across the quorum.
        let ls_star = vcs.iter().map(|vc| vc.ls).max().unwrap_or(0);

        let mut pool = BlockPool::new();
        for vc in vcs {
            for b in &vc.blocks {
                pool.add_block(b);
            }
        }
        for b in extra_blocks {
            pool.add_block(b);
        }
        for slot in self.log.values() {
            for b in slot.preprepares.values() {
                pool.add_block(b);
            }
        }

        let window = self.cfg.params.window;
        let mut outcomes = Vec::with_capacity(window as usize);
        for j in (ls_star + 1)..=(ls_star + window) {
            let entries: Vec<(SignerId, SlotEntryPair)> = vcs
                .iter()
                .map(|vc| {
                    let entry = if j > vc.ls && j <= vc.ls + window {
                        vc.entries[(j - vc.ls - 1) as usize].clone()
                    } else {
                        // Senders that reported a different range implicitly
                        // report no evidence for this slot.
                        SlotEntryPair::empty()
                    };
                    (vc.sender, entry)
                })
                .collect();
            let value = choose_safe_value(
                j,
                &entries,
                &pool,
                &self.cfg.params,
                self.scheme.as_ref(),
                &self.schemes,
            );
            outcomes.push((j, value));
        }

        // Enter the view before enacting so emitted messages carry it.
        self.view = target;
        if self.vc_target.map_or(false, |t| t <= target) {
            self.vc_target = None;
        }
        self.disarm(sink, TimerId::ViewChange);
        sink.observe(Observation::ViewEntered { view: target });
        self.complaints.retain(|t, _| *t > target);
        self.vc_collected.retain(|t, _| *t > target);
        if ls_star > self.ls {
            // The cluster certified state ahead of us; catch up first.
            if let Some(best) = vcs.iter().max_by_key(|vc| vc.ls) {
                let proof = best.stable.clone();
                self.pi_certs.entry(proof.seq).or_insert_with(|| proof.clone());
                self.stable_certs.entry(proof.seq).or_insert(proof);
            }
            self.gc_advance(sink, ls_star);
            if self.ls > self.le {
                self.maybe_state_sync(sink, primary_of(target, &self.cfg.params));
            }
        }

        // Agreement restarts only up to the highest slot with evidence;
        // everything above is untouched fresh space for the new primary.
        let h_max = outcomes
            .iter()
            .filter(|(_, v)| !v.is_noop())
            .map(|(j, _)| *j)
            .max()
            .unwrap_or(ls_star);
        for (j, value) in &outcomes {
            if *j > h_max {
                break;
            }
            sink.observe(Observation::NewViewSlot {
                view: target,
                seq: *j,
                outcome: match value {
                    SafeValue::Decide { .. } => SlotOutcomeKind::Decide,
                    SafeValue::Adopt { .. } => SlotOutcomeKind::Adopt,
                    SafeValue::Noop => SlotOutcomeKind::Noop,
                },
                content_hash: match value {
                    SafeValue::Adopt { requests } => Some(crate::crypto::sha256(
                        &DecisionBlock::requests_encoding(requests),
                    )),
                    _ => None,
                },
            });
            match value {
                SafeValue::Decide { block_hash, cert } => {
                    let (commit_view, fast) = match cert {
                        DecideCert::Fast(_) => {
                            // The certificate hides its view; recover it from
                            // the block when resolvable.
                            let v = self
                                .find_block_view(*j, block_hash, &pool, target)
                                .unwrap_or(target);
                            (v, true)
                        }
                        DecideCert::Slow { view, .. } => (*view, false),
                    };
                    if let Some(reqs) = self.resolve_requests(*j, commit_view, block_hash, &pool) {
                        let block = DecisionBlock::new(*j, commit_view, reqs);
                        let slot = self.log.entry(*j).or_default();
                        slot.preprepares.entry(commit_view).or_insert(block);
                        self.commit_slot(sink, *j, commit_view, *block_hash, fast, cert.clone());
                    } else {
                        let slot = self.log.entry(*j).or_default();
                        slot.pending_commit = Some(CommittedInfo {
                            view: commit_view,
                            block_hash: *block_hash,
                            fast,
                            cert: cert.clone(),
                        });
                        let primary = primary_of(target, &self.cfg.params);
                        sink.send(
                            NodeAddr::Replica(primary),
                            Message::Sync(SyncMessage::BlockRequest {
                                seq: *j,
                                view: commit_view,
                                block_hash: *block_hash,
                            }),
                        );
                    }
                }
                SafeValue::Adopt { requests } => {
                    self.adopt_slot(sink, *j, target, requests.clone());
                }
                SafeValue::Noop => {
                    let null = ClientRequest::null(self.scheme.as_ref(), &self.schemes.client_auth, *j);
                    self.adopt_slot(sink, *j, target, vec![null]);
                }
            }
        }

        // The new primary resumes proposing above the re-agreed range and
        // re-queues its own orphaned batches.
        if primary_of(target, &self.cfg.params) == self.cfg.id {
            self.next_seq = self.next_seq.max(h_max + 1).max(self.ls + 1);
            let orphaned: Vec<ClientRequest> = self
                .log
                .range(h_max + 1..)
                .flat_map(|(_, slot)| slot.preprepares.values())
                .flat_map(|b| b.requests.iter().cloned())
                .filter(|r| !r.is_null())
                .collect();
            for req in orphaned {
                let fresh = self
                    .service
                    .reply(req.client)
                    .map_or(true, |rec| rec.timestamp < req.timestamp);
                if fresh && self.pending_keys.insert((req.client, req.timestamp)) {
                    self.pending.push_back(req);
                }
            }
            self.try_propose(sink, false);
        }

        // Drain pre-prepares that raced ahead of the view change.
        let stashed: Vec<(DecisionBlock, SigShare)> = self
            .stashed_preprepares
            .range((target, 0)..=(target, Seq::MAX))
            .map(|(_, v)| v.clone())
            .collect();
        self.stashed_preprepares.retain(|(v, _), _| *v > target);
        for (block, sig) in stashed {
            let from = primary_of(block.view, &self.cfg.params);
            self.on_preprepare(sink, from, block, sig);
        }

        self.maybe_arm_watchdog(sink);
        outcomes
    }

    /// Search the pool for a view at which `hash` resolves for slot `j`.
    fn find_block_view(&self, j: Seq, hash: &Digest32, pool: &BlockPool, max_view: View) -> Option<View> {
        (0..=max_view).find(|v| pool_resolve(pool, j, *v, hash).is_some())
    }

    fn resolve_requests(
        &self,
        j: Seq,
        view: View,
        hash: &Digest32,
        pool: &BlockPool,
    ) -> Option<Vec<ClientRequest>> {
        if let Some(block) = self.log.get(&j).and_then(|s| s.block_by_hash(hash)) {
            return Some(block.requests.clone());
        }
        pool_resolve(pool, j, view, hash).map(|r| r.to_vec())
    }

    /// Accept an adopted (or null) batch as the pre-prepare of `(j, target)`
    /// and run the normal agreement for it.
    fn adopt_slot(&mut self, sink: &mut ActionSink, j: Seq, target: View, requests: Vec<ClientRequest>) {
        let slot = self.log.entry(j).or_default();
        if slot.committed.is_some() {
            return;
        }
        let block = DecisionBlock::new(j, target, requests);
        slot.preprepares.insert(target, block);
        self.send_sign_share(sink, j, target);
    }

    fn on_complaint(&mut self, sink: &mut ActionSink, complaint: Complaint) {
        match complaint {
            Complaint::Timeout { view, vote } => {
                if view <= self.view || !self.scheme.verify_share(&self.schemes.replica_auth, &vote) {
                    return;
                }
                self.complaints.entry(view).or_default().insert(vote.signer, vote);
                if self.complaints[&view].len() as u64 >= self.cfg.params.f + 1 {
                    // f+1 distinct replicas demand this view: join them.
                    self.start_view_change(sink, view);
                }
            }
            Complaint::Equivocation { seq, view, first_sig, second_sig, .. } => {
                if view < self.view {
                    return;
                }
                if !self.scheme.verify_share(&self.schemes.replica_auth, &first_sig)
                    || !self.scheme.verify_share(&self.schemes.replica_auth, &second_sig)
                {
                    self.counters.invalid_shares += 1;
                    return;
                }
                self.counters.equivocations_observed += 1;
                sink.observe(Observation::EquivocationObserved { seq, view });
                if self.relayed_equivocations.insert((seq, view)) {
                    self.broadcast(
                        sink,
                        ProtocolMessage::Complaint(Complaint::Equivocation {
                            seq,
                            view,
                            first_hash: first_sig.digest,
                            first_sig: first_sig.clone(),
                            second_hash: second_sig.digest,
                            second_sig: second_sig.clone(),
                        }),
                    );
                }
                self.start_view_change(sink, view + 1);
            }
            Complaint::VoteQuorum { view, votes } => {
                if view <= self.view {
                    return;
                }
                let mut valid = BTreeSet::new();
                for vote in &votes {
                    if vote.digest == complaint_statement(view)
                        && self.scheme.verify_share(&self.schemes.replica_auth, vote)
                    {
                        valid.insert(vote.signer);
                    }
                }
                if valid.len() as u64 >= self.cfg.params.f + 1 {
                    self.start_view_change(sink, view);
                }
            }
        }
    }
}

enum SchemeTagKind {
    Sigma,
    Tau,
}

fn pool_resolve<'a>(
    pool: &'a BlockPool,
    slot: Seq,
    view: View,
    hash: &Digest32,
) -> Option<&'a [ClientRequest]> {
    pool.resolve(slot, view, hash)
}

impl NodeLogic for Replica {
    fn on_event(&mut self, now: u64, event: Event) -> Vec<Action> {
        self.now = now;
        let mut sink = ActionSink::new();
        match event {
            Event::Deliver { from, msg } => self.dispatch(&mut sink, from, msg),
            Event::TimerFired { id } => {
                if self.take_fire(id) {
                    match id {
                        TimerId::Batch => self.try_propose(&mut sink, true),
                        TimerId::FastPathTimeout { seq, view } => {
                            self.on_fast_path_timeout(&mut sink, seq, view)
                        }
                        TimerId::CommitProofStagger { seq, view } => {
                            self.emit_sigma_proof(&mut sink, seq, view)
                        }
                        TimerId::SlowProofStagger { seq, view } => {
                            self.emit_slow_proof(&mut sink, seq, view)
                        }
                        TimerId::ExecProofStagger { seq } => self.emit_exec_proof(&mut sink, seq),
                        TimerId::ViewChange => self.on_watchdog_fired(&mut sink),
                        TimerId::StateSync => {
                            if self.syncing {
                                self.syncing = false;
                                let peer = primary_of(self.view, &self.cfg.params);
                                let peer = if peer == self.cfg.id {
                                    primary_of(self.view + 1, &self.cfg.params)
                                } else {
                                    peer
                                };
                                self.maybe_state_sync(&mut sink, peer);
                            }
                        }
                        TimerId::ClientRetry { .. } => {}
                    }
                }
            }
            Event::Submit { .. } => {}
        }
        sink.finish()
    }
}

impl Replica {
    fn dispatch(&mut self, sink: &mut ActionSink, from: NodeAddr, msg: Message) {
        match msg {
            Message::Request(req) => self.on_client_request(sink, req),
            Message::Protocol(p) => {
                if validate_well_formed(&p, &self.cfg.params).is_err() {
                    self.counters.rejected_malformed += 1;
                    return;
                }
                let NodeAddr::Replica(from) = from else {
                    self.counters.dropped_auth += 1;
                    return;
                };
                match p {
                    ProtocolMessage::PrePrepare { block, sig } => {
                        self.on_preprepare(sink, from, block, sig)
                    }
                    ProtocolMessage::SignShare { seq, view, sigma, tau } => {
                        self.on_sign_share(sink, from, seq, view, sigma, tau)
                    }
                    ProtocolMessage::FullCommitProof { seq, view, proof } => {
                        self.on_commit_proof_fast(sink, from, seq, view, proof)
                    }
                    ProtocolMessage::Prepare { seq, view, proof } => {
                        self.on_prepare(sink, seq, view, proof)
                    }
                    ProtocolMessage::Commit { seq, view, share } => {
                        self.on_commit_share(sink, from, seq, view, share)
                    }
                    ProtocolMessage::FullCommitProofSlow { seq, view, block_hash, proof } => {
                        self.on_commit_proof_slow(sink, from, seq, view, block_hash, proof)
                    }
                    ProtocolMessage::SignState { seq, share } => {
                        self.on_sign_state(sink, from, seq, share, false)
                    }
                    ProtocolMessage::FullExecuteProof { seq, proof } => {
                        self.on_execute_proof(sink, from, seq, proof)
                    }
                    ProtocolMessage::ExecuteAck { .. } => {
                        // Client-facing; replicas have no use for it.
                    }
                    ProtocolMessage::ViewChange(vc) => self.on_view_change(sink, from, vc),
                    ProtocolMessage::NewView { view, vcs, blocks } => {
                        self.on_new_view(sink, from, view, vcs, blocks)
                    }
                    ProtocolMessage::CheckpointVote { seq, share } => {
                        self.on_sign_state(sink, from, seq, share, true)
                    }
                    ProtocolMessage::Complaint(c) => self.on_complaint(sink, c),
                }
            }
            Message::Sync(s) => {
                let NodeAddr::Replica(from) = from else {
                    self.counters.dropped_auth += 1;
                    return;
                };
                match s {
                    SyncMessage::BlockRequest { seq, block_hash, .. } => {
                        self.on_block_request(sink, from, seq, block_hash)
                    }
                    SyncMessage::BlockResponse { block } => self.on_block_response(sink, block),
                    SyncMessage::SnapshotRequest { min_seq } => {
                        self.on_snapshot_request(sink, from, min_seq)
                    }
                    SyncMessage::SnapshotResponse { seq, digest, cert, snapshot } => {
                        self.on_snapshot_response(sink, seq, digest, cert, snapshot)
                    }
                    SyncMessage::RetryAck { .. } => {
                        // Client-facing.
                    }
                }
            }
        }
        self.maybe_arm_watchdog(sink);
    }
}
