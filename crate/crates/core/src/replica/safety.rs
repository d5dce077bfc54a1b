//! Safe-value selection for the dual-mode view change.
//!
//! Given the evidence pairs `(lm, fm)` that a quorum of `2f+2c+1` view-change
//! messages reported for one slot, pick the one value a new primary may
//! propose there. Full certificates decide outright; otherwise the highest
//! slow-path prepare view `v*` competes with the highest fast view `v_hat`
//! for which some value has `f+c+1` sigma shares, ties going to the slow
//! path. With no usable evidence the slot is filled with the null operation.
//!
//! All evidence is cryptographically verified here, and every hash is tied
//! back to an actual request batch by re-hashing candidate blocks at the
//! claimed `(slot, view)`: a relabeled signature from a different view can
//! never inflate a view number.

use crate::crypto::{
    commit_statement, protocol_hash, CombinedSig, Digest32, SchemeSet, SignerId, ThresholdScheme,
};
use crate::messages::{ClientRequest, DecisionBlock, FmEntry, LmEntry, SlotEntryPair};
use crate::params::{ClusterParams, Seq, View};
use std::collections::BTreeMap;

/// Commit certificate carried by a decided slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecideCert {
    /// `sigma(h)` from a fast commit.
    Fast(CombinedSig),
    /// `tau(tau(h))` from a slow commit; `view` names the commit statement.
    Slow { view: View, proof: CombinedSig },
}

/// Outcome for one slot while accepting a new view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SafeValue {
    /// A commit certificate surfaced: the slot is already decided.
    Decide { block_hash: Digest32, cert: DecideCert },
    /// Re-propose this request batch in the new view.
    Adopt { requests: Vec<ClientRequest> },
    /// No value could have committed here; fill with the null operation.
    Noop,
}

impl SafeValue {
    pub fn is_noop(&self) -> bool {
        matches!(self, SafeValue::Noop)
    }
}

/// Candidate blocks for hash resolution, deduplicated by content.
#[derive(Default)]
pub struct BlockPool {
    batches: Vec<Vec<ClientRequest>>,
    seen: std::collections::BTreeSet<Digest32>,
}

impl BlockPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_block(&mut self, block: &DecisionBlock) {
        self.add_requests(&block.requests);
    }

    pub fn add_requests(&mut self, requests: &[ClientRequest]) {
        let key = crate::crypto::sha256(&DecisionBlock::requests_encoding(requests));
        if self.seen.insert(key) {
            self.batches.push(requests.to_vec());
        }
    }

    /// Find the batch whose hash at `(slot, view)` equals `h`, if known.
    pub fn resolve(&self, slot: Seq, view: View, h: &Digest32) -> Option<&[ClientRequest]> {
        self.batches
            .iter()
            .find(|reqs| {
                protocol_hash(slot, view, &DecisionBlock::requests_encoding(reqs)) == *h
            })
            .map(|v| v.as_slice())
    }
}

/// Compute the safe value for `slot` from one evidence pair per view-change
/// sender. Total: always returns one of the three outcomes.
pub fn choose_safe_value(
    slot: Seq,
    entries: &[(SignerId, SlotEntryPair)],
    blocks: &BlockPool,
    params: &ClusterParams,
    scheme: &dyn ThresholdScheme,
    schemes: &SchemeSet,
) -> SafeValue {
    // (a) Any full certificate decides the slot.
    let mut decide: Option<(Digest32, DecideCert)> = None;
    let mut consider = |hash: Digest32, cert: DecideCert| match &decide {
        Some((existing, _)) if *existing <= hash => {}
        _ => decide = Some((hash, cert)),
    };
    for (_, entry) in entries {
        if let LmEntry::TauTau { view, block_hash, proof } = &entry.lm {
            if scheme.verify_combined(&schemes.tau, proof)
                && proof.digest == commit_statement(slot, *view, block_hash)
            {
                consider(*block_hash, DecideCert::Slow { view: *view, proof: proof.clone() });
            }
        }
        if let FmEntry::Sigma { proof } = &entry.fm {
            if scheme.verify_combined(&schemes.sigma, proof) {
                consider(proof.digest, DecideCert::Fast(proof.clone()));
            }
        }
    }
    if let Some((block_hash, cert)) = decide {
        return SafeValue::Decide { block_hash, cert };
    }

    // (b) Highest view with an accepted prepare: v*.
    let mut v_star: i64 = -1;
    let mut req_star: Option<(Digest32, &[ClientRequest])> = None;
    for (_, entry) in entries {
        let LmEntry::TauWithView { view, proof } = &entry.lm else {
            continue;
        };
        if !scheme.verify_combined(&schemes.tau, proof) {
            continue;
        }
        // The signature alone cannot attest its view; only a batch that
        // re-hashes to this digest at the claimed view can.
        let Some(reqs) = blocks.resolve(slot, *view, &proof.digest) else {
            continue;
        };
        let v = *view as i64;
        let replace = match (v.cmp(&v_star), &req_star) {
            (std::cmp::Ordering::Greater, _) => true,
            (std::cmp::Ordering::Equal, Some((h, _))) => proof.digest < *h,
            (std::cmp::Ordering::Equal, None) => true,
            _ => false,
        };
        if replace {
            v_star = v;
            req_star = Some((proof.digest, reqs));
        }
    }

    // (c) Highest view with a fast value: group verified sigma shares by
    // batch content; a batch is fast-for-v when f+c+1 distinct senders
    // reported shares at views >= v, so its fast view is the (f+c+1)-th
    // largest reported view.
    let need = (params.f + params.c + 1) as usize;
    let mut groups: BTreeMap<Digest32, (Vec<i64>, &[ClientRequest])> = BTreeMap::new();
    for (sender, entry) in entries {
        let FmEntry::SigmaShareWithView { view, share } = &entry.fm else {
            continue;
        };
        if share.signer != *sender || !scheme.verify_share(&schemes.sigma, share) {
            continue;
        }
        let Some(reqs) = blocks.resolve(slot, *view, &share.digest) else {
            continue;
        };
        let content = crate::crypto::sha256(&DecisionBlock::requests_encoding(reqs));
        let slot_views = groups.entry(content).or_insert_with(|| (Vec::new(), reqs));
        slot_views.0.push(*view as i64);
    }
    let mut v_hat: i64 = -1;
    let mut req_hat: Option<&[ClientRequest]> = None;
    let mut hat_unique = true;
    for (_, (views, reqs)) in groups.iter_mut() {
        if views.len() < need {
            continue;
        }
        views.sort_unstable_by(|a, b| b.cmp(a));
        let candidate = views[need - 1];
        match candidate.cmp(&v_hat) {
            std::cmp::Ordering::Greater => {
                v_hat = candidate;
                req_hat = Some(reqs);
                hat_unique = true;
            }
            std::cmp::Ordering::Equal => hat_unique = false,
            std::cmp::Ordering::Less => {}
        }
    }
    if !hat_unique {
        v_hat = -1;
        req_hat = None;
    }

    // (d) Slow wins ties: committed slow proofs dominate fast speculation.
    if v_star >= v_hat && v_star > -1 {
        SafeValue::Adopt { requests: req_star.expect("resolved with v_star").1.to_vec() }
    } else if v_hat > v_star {
        SafeValue::Adopt { requests: req_hat.expect("resolved with v_hat").to_vec() }
    } else {
        SafeValue::Noop
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{MockScheme, SchemeDescriptor};
    use crate::kvstore::KvOp;
    use crate::params::ClusterParams;

    struct Fixture {
        params: ClusterParams,
        scheme: MockScheme,
        schemes: SchemeSet,
    }

    impl Fixture {
        fn new(f: u64, c: u64) -> Self {
            let params = ClusterParams::derive(f, c, 8).unwrap();
            let scheme = MockScheme::new(3);
            let schemes = SchemeSet::for_cluster(&params);
            Fixture { params, scheme, schemes }
        }

        fn batch(&self, tag: u8) -> Vec<ClientRequest> {
            vec![ClientRequest::signed(
                &self.scheme,
                &self.schemes.client_auth,
                7,
                tag as u64 + 1,
                KvOp::Put { key: vec![tag], value: vec![tag] }.encode(),
            )]
        }

        fn hash(&self, slot: Seq, view: View, reqs: &[ClientRequest]) -> Digest32 {
            protocol_hash(slot, view, &DecisionBlock::requests_encoding(reqs))
        }

        fn combined(&self, desc: &SchemeDescriptor, digest: &Digest32, k: u64) -> CombinedSig {
            let shares: Vec<_> =
                (1..=k).map(|i| self.scheme.sign_share(desc, i, digest)).collect();
            self.scheme.combine(desc, &shares).unwrap()
        }

        fn tau_of(&self, slot: Seq, view: View, reqs: &[ClientRequest]) -> CombinedSig {
            self.combined(&self.schemes.tau, &self.hash(slot, view, reqs), self.params.tau_threshold)
        }

        fn tau_tau_of(&self, slot: Seq, view: View, reqs: &[ClientRequest]) -> CombinedSig {
            let stmt = commit_statement(slot, view, &self.hash(slot, view, reqs));
            self.combined(&self.schemes.tau, &stmt, self.params.tau_threshold)
        }

        fn sigma_of(&self, slot: Seq, view: View, reqs: &[ClientRequest]) -> CombinedSig {
            self.combined(&self.schemes.sigma, &self.hash(slot, view, reqs), self.params.sigma_threshold)
        }

        fn fm_share(&self, sender: SignerId, slot: Seq, view: View, reqs: &[ClientRequest]) -> FmEntry {
            FmEntry::SigmaShareWithView {
                view,
                share: self.scheme.sign_share(&self.schemes.sigma, sender, &self.hash(slot, view, reqs)),
            }
        }

        fn choose(
            &self,
            slot: Seq,
            entries: &[(SignerId, SlotEntryPair)],
            pool: &BlockPool,
        ) -> SafeValue {
            choose_safe_value(slot, entries, pool, &self.params, &self.scheme, &self.schemes)
        }
    }

    fn empty(sender: SignerId) -> (SignerId, SlotEntryPair) {
        (sender, SlotEntryPair::empty())
    }

    #[test]
    fn no_evidence_is_noop() {
        let fx = Fixture::new(1, 0);
        let entries: Vec<_> = (1..=3).map(empty).collect();
        assert_eq!(fx.choose(1, &entries, &BlockPool::new()), SafeValue::Noop);
    }

    #[test]
    fn full_certificates_decide() {
        let fx = Fixture::new(1, 0);
        let a = fx.batch(1);
        let mut pool = BlockPool::new();
        pool.add_requests(&a);
        // Fast certificate.
        let sigma = fx.sigma_of(4, 0, &a);
        let mut entries: Vec<_> = (1..=3).map(empty).collect();
        entries[1].1.fm = FmEntry::Sigma { proof: sigma.clone() };
        match fx.choose(4, &entries, &pool) {
            SafeValue::Decide { block_hash, cert: DecideCert::Fast(_) } => {
                assert_eq!(block_hash, fx.hash(4, 0, &a));
            }
            other => panic!("expected fast decide, got {other:?}"),
        }
        // Slow certificate.
        let mut entries: Vec<_> = (1..=3).map(empty).collect();
        entries[0].1.lm = LmEntry::TauTau {
            view: 2,
            block_hash: fx.hash(4, 2, &a),
            proof: fx.tau_tau_of(4, 2, &a),
        };
        match fx.choose(4, &entries, &pool) {
            SafeValue::Decide { cert: DecideCert::Slow { view: 2, .. }, .. } => {}
            other => panic!("expected slow decide, got {other:?}"),
        }
        // A forged certificate (wrong digest) decides nothing.
        let mut entries: Vec<_> = (1..=3).map(empty).collect();
        let mut bogus = sigma;
        bogus.digest = crate::crypto::sha256(b"clearly not a block hash");
        entries[1].1.fm = FmEntry::Sigma { proof: bogus };
        assert_eq!(fx.choose(4, &entries, &pool), SafeValue::Noop);
    }

    #[test]
    fn slow_prepare_outranks_lower_fast_value() {
        // lm has tau(h) at view 5; fm has a fast value at view 3.
        let fx = Fixture::new(1, 0);
        let slow = fx.batch(1);
        let fast = fx.batch(2);
        let mut pool = BlockPool::new();
        pool.add_requests(&slow);
        pool.add_requests(&fast);
        let mut entries: Vec<_> = (1..=3).map(empty).collect();
        entries[0].1.lm = LmEntry::TauWithView { view: 5, proof: fx.tau_of(2, 5, &slow) };
        for (i, (sender, entry)) in entries.iter_mut().enumerate() {
            let _ = i;
            entry.fm = fx.fm_share(*sender, 2, 3, &fast);
        }
        assert_eq!(fx.choose(2, &entries, &pool), SafeValue::Adopt { requests: slow });
    }

    #[test]
    fn fast_quorum_without_slow_evidence_adopts() {
        // f+c+1 sigma shares at views >= 4, no prepares at all.
        let fx = Fixture::new(1, 0);
        let fast = fx.batch(9);
        let mut pool = BlockPool::new();
        pool.add_requests(&fast);
        let mut entries: Vec<_> = (1..=3).map(empty).collect();
        entries[0].1.fm = fx.fm_share(1, 3, 4, &fast);
        entries[1].1.fm = fx.fm_share(2, 3, 5, &fast);
        // Third sender reports nothing; two shares suffice (f+c+1 = 2).
        assert_eq!(fx.choose(3, &entries, &pool), SafeValue::Adopt { requests: fast });
    }

    #[test]
    fn tie_prefers_the_slow_path_value() {
        // v* == v_hat == 4 with different blocks: adopt the prepared one.
        let fx = Fixture::new(1, 0);
        let slow = fx.batch(1);
        let fast = fx.batch(2);
        let mut pool = BlockPool::new();
        pool.add_requests(&slow);
        pool.add_requests(&fast);
        let mut entries: Vec<_> = (1..=3).map(empty).collect();
        entries[0].1.lm = LmEntry::TauWithView { view: 4, proof: fx.tau_of(6, 4, &slow) };
        entries[0].1.fm = fx.fm_share(1, 6, 4, &fast);
        entries[1].1.fm = fx.fm_share(2, 6, 4, &fast);
        entries[2].1.fm = fx.fm_share(3, 6, 5, &fast);
        assert_eq!(fx.choose(6, &entries, &pool), SafeValue::Adopt { requests: slow });
    }

    #[test]
    fn ambiguous_fast_view_is_discarded() {
        // Two distinct batches both fast for the same v_hat: neither counts.
        let fx = Fixture::new(1, 1); // n=6, f+c+1 = 3, quorum 5
        let a = fx.batch(1);
        let b = fx.batch(2);
        let mut pool = BlockPool::new();
        pool.add_requests(&a);
        pool.add_requests(&b);
        let mut entries: Vec<_> = (1..=5).map(empty).collect();
        entries[0].1.fm = fx.fm_share(1, 2, 3, &a);
        entries[1].1.fm = fx.fm_share(2, 2, 3, &a);
        entries[2].1.fm = fx.fm_share(3, 2, 3, &a);
        entries[3].1.fm = fx.fm_share(4, 2, 3, &b);
        entries[4].1.fm = fx.fm_share(5, 2, 3, &b);
        // Batch a has 3 shares (= f+c+1) at view 3, batch b only 2: a wins
        // uniquely.
        assert_eq!(fx.choose(2, &entries, &pool), SafeValue::Adopt { requests: a.clone() });
        // Give b a third share at the same view: both fast for 3, ambiguity
        // voids v_hat and the slot becomes Noop.
        entries[2].1.fm = fx.fm_share(3, 2, 3, &b);
        entries[0].1.fm = fx.fm_share(1, 2, 3, &a);
        let mut six = entries.clone();
        six.push(empty(6));
        // Rebuild with 3 shares each (senders 1,2 for a; 3,4,5 for b gives
        // b 3 shares and a 2; craft exactly 3 vs 3 via six senders).
        six[0].1.fm = fx.fm_share(1, 2, 3, &a);
        six[1].1.fm = fx.fm_share(2, 2, 3, &a);
        six[2].1.fm = fx.fm_share(3, 2, 3, &a);
        six[3].1.fm = fx.fm_share(4, 2, 3, &b);
        six[4].1.fm = fx.fm_share(5, 2, 3, &b);
        six[5].1.fm = fx.fm_share(6, 2, 3, &b);
        assert_eq!(fx.choose(2, &six, &pool), SafeValue::Noop);
    }

    #[test]
    fn relabeled_view_does_not_inflate_v_star() {
        // Adversary takes a legitimate tau(h) from view 1 and claims view 5:
        // no batch re-hashes to h at view 5, so the claim is ignored.
        let fx = Fixture::new(1, 0);
        let slow = fx.batch(1);
        let fast = fx.batch(2);
        let mut pool = BlockPool::new();
        pool.add_requests(&slow);
        pool.add_requests(&fast);
        let mut entries: Vec<_> = (1..=3).map(empty).collect();
        entries[0].1.lm = LmEntry::TauWithView { view: 5, proof: fx.tau_of(2, 1, &slow) };
        entries[0].1.fm = fx.fm_share(1, 2, 2, &fast);
        entries[1].1.fm = fx.fm_share(2, 2, 2, &fast);
        // The forged v*=5 is discarded; the fast value at view 2 wins.
        assert_eq!(fx.choose(2, &entries, &pool), SafeValue::Adopt { requests: fast });
    }

    #[test]
    fn unverifiable_shares_are_ignored() {
        let fx = Fixture::new(1, 0);
        let fast = fx.batch(2);
        let mut pool = BlockPool::new();
        pool.add_requests(&fast);
        let mut entries: Vec<_> = (1..=3).map(empty).collect();
        // Share claimed by sender 1 but signed by 2: rejected.
        entries[0].1.fm = fx.fm_share(2, 2, 3, &fast);
        entries[1].1.fm = fx.fm_share(2, 2, 3, &fast);
        assert_eq!(fx.choose(2, &entries, &pool), SafeValue::Noop);
    }
}
