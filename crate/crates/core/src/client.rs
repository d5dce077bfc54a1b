//! Client protocol: submit signed requests, verify the single-message
//! acknowledgement, fall back to the f+1 path on timeout.
//!
//! A session issues operations sequentially under a strictly monotone
//! timestamp. The common case completes on one execute-ack carrying a
//! `pi(d)` state certificate and a Merkle execution proof; if the timer
//! expires first the request is re-broadcast to all replicas and completion
//! then requires f+1 matching individually-signed replies.

use crate::crypto::{Digest32, SchemeSet, SigShare, ThresholdScheme};
use crate::kvstore::{verify_op_proof, MerkleProof};
use crate::messages::{
    retry_ack_digest, ClientId, ClientRequest, Message, ProtocolMessage, SyncMessage,
};
use crate::node::{Action, ActionSink, Event, NodeAddr, NodeLogic, Observation, TimerId};
use crate::params::{primary_of, ClusterParams, ReplicaId, Seq, View};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AckMode {
    /// Waiting for the single execute-ack.
    Single,
    /// Re-broadcast; waiting for f+1 matching signed replies.
    FPlusOne,
}

#[derive(Debug, Clone)]
struct InFlight {
    timestamp: u64,
    op: Vec<u8>,
    mode: AckMode,
    retries: u32,
    /// Matching f+1-path replies keyed by replica: (seq, output, digest).
    replies: BTreeMap<ReplicaId, (Seq, Vec<u8>, Digest32)>,
    /// Messages delivered to this client while the request was in flight.
    deliveries: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct ClientConfig {
    pub id: ClientId,
    pub params: ClusterParams,
    /// Initial retry timeout (about twice the expected end-to-end latency);
    /// doubles per retry.
    pub retry_timeout: u64,
    pub retry_budget: u32,
}

/// Result record for completed operations.
#[derive(Debug, Clone)]
pub struct Completion {
    pub seq: Seq,
    pub value: Vec<u8>,
    pub single_message: bool,
}

pub struct ClientSession {
    cfg: ClientConfig,
    scheme: Arc<dyn ThresholdScheme>,
    schemes: SchemeSet,
    now: u64,
    next_timestamp: u64,
    known_primary: Option<ReplicaId>,
    highest_view: View,
    queue: VecDeque<Vec<u8>>,
    in_flight: Option<InFlight>,
    completed: BTreeMap<u64, Completion>,
    abandoned: BTreeSet<u64>,
}

impl ClientSession {
    pub fn new(cfg: ClientConfig, scheme: Arc<dyn ThresholdScheme>) -> Self {
        let schemes = SchemeSet::for_cluster(&cfg.params);
        ClientSession {
            cfg,
            scheme,
            schemes,
            now: 0,
            next_timestamp: 0,
            known_primary: Some(ReplicaId(1)),
            highest_view: 0,
            queue: VecDeque::new(),
            in_flight: None,
            completed: BTreeMap::new(),
            abandoned: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> ClientId {
        self.cfg.id
    }

    pub fn completed(&self) -> &BTreeMap<u64, Completion> {
        &self.completed
    }

    pub fn outstanding(&self) -> usize {
        self.queue.len() + usize::from(self.in_flight.is_some())
    }

    fn submit(&mut self, sink: &mut ActionSink, op: Vec<u8>) {
        self.queue.push_back(op);
        if self.in_flight.is_none() {
            self.send_next(sink);
        }
    }

    fn send_next(&mut self, sink: &mut ActionSink) {
        let Some(op) = self.queue.pop_front() else { return };
        self.next_timestamp += 1;
        let timestamp = self.next_timestamp;
        self.in_flight = Some(InFlight {
            timestamp,
            op: op.clone(),
            mode: AckMode::Single,
            retries: 0,
            replies: BTreeMap::new(),
            deliveries: 0,
        });
        let req = self.request(timestamp, op);
        match self.known_primary {
            Some(primary) => sink.send(NodeAddr::Replica(primary), Message::Request(req)),
            None => {
                // Bootstrap: primary unknown, ask everyone.
                for id in self.cfg.params.all_replicas() {
                    sink.send(NodeAddr::Replica(id), Message::Request(req.clone()));
                }
            }
        }
        sink.set_timer(TimerId::ClientRetry { timestamp }, self.cfg.retry_timeout);
    }

    fn request(&self, timestamp: u64, op: Vec<u8>) -> ClientRequest {
        ClientRequest::signed(self.scheme.as_ref(), &self.schemes.client_auth, self.cfg.id, timestamp, op)
    }

    fn note_view(&mut self, view: View) {
        if view > self.highest_view {
            self.highest_view = view;
        }
        self.known_primary = Some(primary_of(self.highest_view, &self.cfg.params));
    }

    fn complete(
        &mut self,
        sink: &mut ActionSink,
        seq: Seq,
        value: Vec<u8>,
        single_message: bool,
    ) {
        let Some(flight) = self.in_flight.take() else { return };
        sink.cancel_timer(TimerId::ClientRetry { timestamp: flight.timestamp });
        sink.observe(Observation::RequestCompleted {
            client: self.cfg.id,
            timestamp: flight.timestamp,
            seq,
            value: value.clone(),
            deliveries: flight.deliveries,
            single_message,
        });
        self.completed.insert(flight.timestamp, Completion { seq, value, single_message });
        self.send_next(sink);
    }

    fn on_execute_ack(
        &mut self,
        sink: &mut ActionSink,
        seq: Seq,
        pos: u32,
        request: ClientRequest,
        output: Vec<u8>,
        state_cert: crate::crypto::CombinedSig,
        proof: MerkleProof,
        view: View,
    ) {
        self.note_view(view);
        let Some(flight) = self.in_flight.as_mut() else { return };
        if request.client != self.cfg.id || request.timestamp != flight.timestamp {
            return; // stale or misdirected; completions are idempotent
        }
        flight.deliveries += 1;
        // Accept only with a valid state certificate AND a Merkle proof that
        // this exact request executed at (seq, pos) with this output under
        // the certified digest.
        if !self.scheme.verify_combined(&self.schemes.pi, &state_cert) {
            return;
        }
        let digest = state_cert.digest;
        if !verify_op_proof(&digest, &request.encode(), &output, seq, pos, &proof) {
            return;
        }
        let value = output;
        self.complete(sink, seq, value, true);
    }

    fn on_retry_ack(
        &mut self,
        sink: &mut ActionSink,
        from: ReplicaId,
        seq: Seq,
        pos: u32,
        client: ClientId,
        timestamp: u64,
        output: Vec<u8>,
        state_digest: Digest32,
        view: View,
        sig: SigShare,
    ) {
        self.note_view(view);
        let Some(flight) = self.in_flight.as_mut() else { return };
        if client != self.cfg.id || timestamp != flight.timestamp {
            return;
        }
        flight.deliveries += 1;
        if sig.signer != from.0
            || sig.digest != retry_ack_digest(seq, pos, client, timestamp, &output, &state_digest)
            || !self.scheme.verify_share(&self.schemes.replica_auth, &sig)
        {
            return;
        }
        flight.replies.insert(from, (seq, output, state_digest));
        // f+1 matching (seq, output, digest) tuples complete the request.
        let need = (self.cfg.params.f + 1) as usize;
        let winner = {
            let mut counts: BTreeMap<&(Seq, Vec<u8>, Digest32), usize> = BTreeMap::new();
            for reply in flight.replies.values() {
                *counts.entry(reply).or_default() += 1;
            }
            counts
                .into_iter()
                .find(|(_, n)| *n >= need)
                .map(|(reply, _)| reply.clone())
        };
        if let Some((seq, output, _)) = winner {
            self.complete(sink, seq, output, false);
        }
    }

    fn on_retry_timer(&mut self, sink: &mut ActionSink, timestamp: u64) {
        let Some(flight) = self.in_flight.as_mut() else { return };
        if flight.timestamp != timestamp {
            return; // stale timer
        }
        if flight.retries >= self.cfg.retry_budget {
            let ts = flight.timestamp;
            self.in_flight = None;
            self.abandoned.insert(ts);
            sink.observe(Observation::RequestAbandoned { client: self.cfg.id, timestamp: ts });
            return;
        }
        flight.retries += 1;
        flight.mode = AckMode::FPlusOne;
        let retries = flight.retries;
        let op = flight.op.clone();
        let req = self.request(timestamp, op);
        // Resend to all replicas; completion now rides the f+1 path (a late
        // single-message ack is still accepted).
        for id in self.cfg.params.all_replicas() {
            sink.send(NodeAddr::Replica(id), Message::Request(req.clone()));
        }
        let delay = self.cfg.retry_timeout.saturating_mul(1 << retries.min(16));
        sink.set_timer(TimerId::ClientRetry { timestamp }, delay);
    }
}

impl NodeLogic for ClientSession {
    fn on_event(&mut self, now: u64, event: Event) -> Vec<Action> {
        self.now = now;
        let _ = self.now;
        let mut sink = ActionSink::new();
        match event {
            Event::Submit { op } => self.submit(&mut sink, op),
            Event::TimerFired { id: TimerId::ClientRetry { timestamp } } => {
                self.on_retry_timer(&mut sink, timestamp)
            }
            Event::TimerFired { .. } => {}
            Event::Deliver { from, msg } => match msg {
                Message::Protocol(ProtocolMessage::ExecuteAck {
                    seq,
                    pos,
                    request,
                    output,
                    state_cert,
                    proof,
                    view,
                }) => {
                    self.on_execute_ack(&mut sink, seq, pos, request, output, state_cert, proof, view);
                }
                Message::Sync(SyncMessage::RetryAck {
                    seq,
                    pos,
                    client,
                    timestamp,
                    output,
                    state_digest,
                    view,
                    sig,
                }) => {
                    let NodeAddr::Replica(from) = from else { return sink.finish() };
                    self.on_retry_ack(
                        &mut sink, from, seq, pos, client, timestamp, output, state_digest, view, sig,
                    );
                }
                _ => {}
            },
        }
        sink.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MockScheme;
    use crate::kvstore::{ExecRequest, KvOp, OpOutput, ServiceState};
    use crate::params::ClusterParams;

    fn setup() -> (ClientSession, Arc<MockScheme>, SchemeSet, ClusterParams) {
        let params = ClusterParams::derive(1, 0, 8).unwrap();
        let scheme = Arc::new(MockScheme::new(11));
        let schemes = SchemeSet::for_cluster(&params);
        let session = ClientSession::new(
            ClientConfig { id: 9, params, retry_timeout: 1000, retry_budget: 5 },
            scheme.clone(),
        );
        (session, scheme, schemes, params)
    }

    fn submitted_request(actions: &[Action]) -> ClientRequest {
        for a in actions {
            if let Action::Send { msg: Message::Request(r), .. } = a {
                return r.clone();
            }
        }
        panic!("no request sent");
    }

    /// Execute the request on a service and build an honest ack.
    fn honest_ack(
        scheme: &MockScheme,
        schemes: &SchemeSet,
        params: &ClusterParams,
        req: &ClientRequest,
    ) -> ProtocolMessage {
        let mut service = ServiceState::new(params.window);
        service.execute_block(
            1,
            &[ExecRequest {
                client: req.client,
                timestamp: req.timestamp,
                request: req.encode(),
                op: KvOp::decode(&req.op).unwrap(),
            }],
        );
        let digest = service.digest();
        let shares: Vec<_> =
            (1..=params.pi_threshold).map(|i| scheme.sign_share(&schemes.pi, i, &digest)).collect();
        let cert = scheme.combine(&schemes.pi, &shares).unwrap();
        let (_, output) = service.recorded_item(1, 0).unwrap();
        ProtocolMessage::ExecuteAck {
            seq: 1,
            pos: 0,
            request: req.clone(),
            output: output.to_vec(),
            state_cert: cert,
            proof: service.op_proof(1, 0).unwrap(),
            view: 0,
        }
    }

    #[test]
    fn timestamps_strictly_increase_and_go_to_primary() {
        let (mut session, ..) = setup();
        let a1 = session.on_event(0, Event::Submit { op: KvOp::Get { key: vec![1] }.encode() });
        let r1 = submitted_request(&a1);
        assert_eq!(r1.timestamp, 1);
        assert!(a1.iter().any(|a| matches!(
            a,
            Action::Send { to: NodeAddr::Replica(ReplicaId(1)), .. }
        )));
        // Second op queues until the first completes; drive completion.
        let (mut s2, scheme, schemes, params) = setup();
        let a = s2.on_event(0, Event::Submit { op: KvOp::Get { key: vec![1] }.encode() });
        let req = submitted_request(&a);
        let ack = honest_ack(&scheme, &schemes, &params, &req);
        s2.on_event(
            10,
            Event::Deliver { from: NodeAddr::Replica(ReplicaId(2)), msg: Message::Protocol(ack) },
        );
        let a2 = s2.on_event(11, Event::Submit { op: KvOp::Get { key: vec![2] }.encode() });
        assert_eq!(submitted_request(&a2).timestamp, 2);
    }

    #[test]
    fn bootstrap_without_primary_broadcasts() {
        let (mut session, ..) = setup();
        session.known_primary = None;
        let actions = session.on_event(0, Event::Submit { op: KvOp::Noop.encode() });
        let sends = actions
            .iter()
            .filter(|a| matches!(a, Action::Send { msg: Message::Request(_), .. }))
            .count();
        assert_eq!(sends, 4);
    }

    #[test]
    fn honest_single_ack_completes() {
        let (mut session, scheme, schemes, params) = setup();
        let actions = session.on_event(0, Event::Submit { op: KvOp::Put { key: vec![1], value: vec![2] }.encode() });
        let req = submitted_request(&actions);
        let ack = honest_ack(&scheme, &schemes, &params, &req);
        session.on_event(
            5,
            Event::Deliver { from: NodeAddr::Replica(ReplicaId(3)), msg: Message::Protocol(ack) },
        );
        let done = session.completed().get(&1).expect("completed");
        assert!(done.single_message);
        assert_eq!(done.seq, 1);
    }

    #[test]
    fn tampered_value_or_wrong_certificate_ignored() {
        let (mut session, scheme, schemes, params) = setup();
        let actions = session.on_event(0, Event::Submit { op: KvOp::Put { key: vec![1], value: vec![2] }.encode() });
        let req = submitted_request(&actions);

        // Tampered output: Merkle check fails.
        let ProtocolMessage::ExecuteAck { seq, pos, request, state_cert, proof, view, .. } =
            honest_ack(&scheme, &schemes, &params, &req)
        else {
            unreachable!()
        };
        let bad = ProtocolMessage::ExecuteAck {
            seq,
            pos,
            request: request.clone(),
            output: OpOutput::Value(b"forged".to_vec()).encode(),
            state_cert: state_cert.clone(),
            proof: proof.clone(),
            view,
        };
        session.on_event(
            5,
            Event::Deliver { from: NodeAddr::Replica(ReplicaId(3)), msg: Message::Protocol(bad) },
        );
        assert!(session.completed().is_empty());

        // Valid proof but certificate over a different digest: ignored.
        let other_digest = crate::crypto::sha256(b"unrelated");
        let shares: Vec<_> = (1..=params.pi_threshold)
            .map(|i| scheme.sign_share(&schemes.pi, i, &other_digest))
            .collect();
        let wrong_cert = scheme.combine(&schemes.pi, &shares).unwrap();
        let bad2 = ProtocolMessage::ExecuteAck {
            seq,
            pos,
            request,
            output: OpOutput::Ok.encode(),
            state_cert: wrong_cert,
            proof,
            view,
        };
        session.on_event(
            6,
            Event::Deliver { from: NodeAddr::Replica(ReplicaId(3)), msg: Message::Protocol(bad2) },
        );
        assert!(session.completed().is_empty());
    }

    #[test]
    fn timeout_switches_to_f_plus_1_path() {
        let (mut session, scheme, schemes, params) = setup();
        session.on_event(0, Event::Submit { op: KvOp::Put { key: vec![1], value: vec![9] }.encode() });
        let actions =
            session.on_event(1000, Event::TimerFired { id: TimerId::ClientRetry { timestamp: 1 } });
        // Rebroadcast to all n replicas.
        let sends = actions
            .iter()
            .filter(|a| matches!(a, Action::Send { msg: Message::Request(_), .. }))
            .count();
        assert_eq!(sends, 4);

        // f+1 = 2 matching signed replies complete the request.
        let d = crate::crypto::sha256(b"state");
        let output = OpOutput::Ok.encode();
        for replica in [2u64, 3] {
            let digest = retry_ack_digest(7, 0, 9, 1, &output, &d);
            let sig = scheme.sign_share(&schemes.replica_auth, replica, &digest);
            session.on_event(
                1100 + replica,
                Event::Deliver {
                    from: NodeAddr::Replica(ReplicaId(replica)),
                    msg: Message::Sync(SyncMessage::RetryAck {
                        seq: 7,
                        pos: 0,
                        client: 9,
                        timestamp: 1,
                        output: output.clone(),
                        state_digest: d,
                        view: 0,
                        sig,
                    }),
                },
            );
        }
        let done = session.completed().get(&1).expect("completed via f+1");
        assert!(!done.single_message);
        assert_eq!(done.seq, 7);
        let _ = params;
    }

    #[test]
    fn late_duplicate_ack_is_idempotent() {
        let (mut session, scheme, schemes, params) = setup();
        let actions = session.on_event(0, Event::Submit { op: KvOp::Put { key: vec![4], value: vec![2] }.encode() });
        let req = submitted_request(&actions);
        let ack = honest_ack(&scheme, &schemes, &params, &req);
        for t in [5, 6] {
            session.on_event(
                t,
                Event::Deliver {
                    from: NodeAddr::Replica(ReplicaId(2)),
                    msg: Message::Protocol(ack.clone()),
                },
            );
        }
        assert_eq!(session.completed().len(), 1);
    }

    #[test]
    fn retry_budget_exhaustion_abandons() {
        let (mut session, ..) = setup();
        session.on_event(0, Event::Submit { op: KvOp::Noop.encode() });
        let mut t = 1000;
        for _ in 0..=session.cfg.retry_budget {
            session.on_event(t, Event::TimerFired { id: TimerId::ClientRetry { timestamp: 1 } });
            t += 100_000;
        }
        assert!(session.in_flight.is_none());
        assert!(session.abandoned.contains(&1));
    }
}
