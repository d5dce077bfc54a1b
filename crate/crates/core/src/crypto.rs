//! Threshold signature contract and the deterministic mock scheme.
//!
//! The protocol needs three k-of-n schemes per cluster: `sigma` (3f+c+1),
//! `tau` (2f+c+1) and `pi` (f+1), plus single-signer authentication for
//! replicas (signed pre-prepares, view changes, complaints) and clients
//! (request authentication). All of them go through the [`ThresholdScheme`]
//! trait so a pairing-based implementation can slot in; the [`MockScheme`]
//! shipped here derives share tags as keyed hashes under per-signer secrets
//! and stores combined signatures as the canonical sorted list of the k
//! lowest-id valid `(signer, tag)` pairs.
//!
//! Mock combined signatures are therefore not constant size. Metrics account
//! them at [`CombinedSig::ACCOUNTED_SIZE`] = 33 bytes, the size of the
//! pairing-based signature they stand in for, so message-size measurements
//! stay honest. Because a mock combination depends on which share subset the
//! collector held (a real threshold signature does not), nested commit
//! signatures bind to [`commit_statement`], a digest derived from
//! `(seq, view, block hash)` that every replica computes identically.

use crate::params::ClusterParams;
use crate::wire::{CodecError, Reader, Writer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Signer identity: replica ids `1..=n` for replica schemes, client ids for
/// client authentication. Id 0 is reserved for the well-known null client.
pub type SignerId = u64;

/// 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest32(pub [u8; 32]);

impl Digest32 {
    pub const ZERO: Digest32 = Digest32([0u8; 32]);

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn short_hex(&self) -> String {
        self.0[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl std::fmt::Debug for Digest32 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Digest32({}..)", self.short_hex())
    }
}

pub fn sha256(data: &[u8]) -> Digest32 {
    let mut h = Sha256::new();
    h.update(data);
    Digest32(h.finalize().into())
}

/// Protocol hash `h = H(s || v || r)` over the canonical request encoding.
pub fn protocol_hash(seq: u64, view: u64, payload: &[u8]) -> Digest32 {
    let mut h = Sha256::new();
    h.update(b"sbft/block/v1");
    h.update(seq.to_le_bytes());
    h.update(view.to_le_bytes());
    h.update((payload.len() as u64).to_le_bytes());
    h.update(payload);
    Digest32(h.finalize().into())
}

/// Digest signed by slow-path commit shares for `(s, v, h)`. Stands for the
/// inner `tau(h)` bytes: a real threshold signature is unique given its
/// digest, so signing a statement derived from `(s, v, h)` is equivalent and
/// keeps commit shares from different collectors' combinations compatible.
pub fn commit_statement(seq: u64, view: u64, block_hash: &Digest32) -> Digest32 {
    let mut h = Sha256::new();
    h.update(b"sbft/commit-statement/v1");
    h.update(seq.to_le_bytes());
    h.update(view.to_le_bytes());
    h.update(block_hash.0);
    Digest32(h.finalize().into())
}

/// Role of a signature scheme instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SchemeTag {
    /// Fast-path commit shares, threshold 3f+c+1.
    Sigma,
    /// Linear-PBFT commit shares, threshold 2f+c+1.
    Tau,
    /// Execution/checkpoint shares, threshold f+1.
    Pi,
    /// Single-signer replica message authentication.
    ReplicaAuth,
    /// Single-signer client request authentication.
    ClientAuth,
}

impl SchemeTag {
    pub fn as_u8(self) -> u8 {
        match self {
            SchemeTag::Sigma => 0,
            SchemeTag::Tau => 1,
            SchemeTag::Pi => 2,
            SchemeTag::ReplicaAuth => 3,
            SchemeTag::ClientAuth => 4,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self, CodecError> {
        Ok(match v {
            0 => SchemeTag::Sigma,
            1 => SchemeTag::Tau,
            2 => SchemeTag::Pi,
            3 => SchemeTag::ReplicaAuth,
            4 => SchemeTag::ClientAuth,
            tag => return Err(CodecError::BadTag { what: "scheme tag", tag }),
        })
    }
}

/// One k-of-n scheme instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemeDescriptor {
    pub tag: SchemeTag,
    pub threshold: u64,
    /// Signer-id upper bound for replica schemes; 0 means unbounded (client
    /// authentication, where signer ids are client ids).
    pub total: u64,
}

impl SchemeDescriptor {
    fn signer_in_range(&self, signer: SignerId) -> bool {
        if self.total == 0 {
            true
        } else {
            signer >= 1 && signer <= self.total
        }
    }
}

/// The scheme instances of one cluster.
#[derive(Debug, Clone, Copy)]
pub struct SchemeSet {
    pub sigma: SchemeDescriptor,
    pub tau: SchemeDescriptor,
    pub pi: SchemeDescriptor,
    pub replica_auth: SchemeDescriptor,
    pub client_auth: SchemeDescriptor,
}

impl SchemeSet {
    pub fn for_cluster(params: &ClusterParams) -> Self {
        SchemeSet {
            sigma: SchemeDescriptor { tag: SchemeTag::Sigma, threshold: params.sigma_threshold, total: params.n },
            tau: SchemeDescriptor { tag: SchemeTag::Tau, threshold: params.tau_threshold, total: params.n },
            pi: SchemeDescriptor { tag: SchemeTag::Pi, threshold: params.pi_threshold, total: params.n },
            replica_auth: SchemeDescriptor { tag: SchemeTag::ReplicaAuth, threshold: 1, total: params.n },
            client_auth: SchemeDescriptor { tag: SchemeTag::ClientAuth, threshold: 1, total: 0 },
        }
    }

    pub fn descriptor(&self, tag: SchemeTag) -> &SchemeDescriptor {
        match tag {
            SchemeTag::Sigma => &self.sigma,
            SchemeTag::Tau => &self.tau,
            SchemeTag::Pi => &self.pi,
            SchemeTag::ReplicaAuth => &self.replica_auth,
            SchemeTag::ClientAuth => &self.client_auth,
        }
    }
}

/// A signature share on a digest by one signer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigShare {
    pub scheme: SchemeTag,
    pub signer: SignerId,
    pub digest: Digest32,
    pub tag: Vec<u8>,
}

impl SigShare {
    pub fn encode_into(&self, w: &mut Writer) {
        w.u8(self.scheme.as_u8());
        w.u64(self.signer);
        w.raw(&self.digest.0);
        w.bytes(&self.tag);
    }

    pub fn decode_from(r: &mut Reader) -> Result<Self, CodecError> {
        Ok(SigShare {
            scheme: SchemeTag::from_u8(r.u8()?)?,
            signer: r.u64()?,
            digest: Digest32(r.digest32()?),
            tag: r.bytes()?,
        })
    }
}

/// A combined k-of-n signature. Evidence is the canonical (sorted, k lowest
/// signer ids) list of valid share tags in the mock scheme; a pairing-based
/// scheme would carry 33 opaque bytes instead, which is what
/// [`CombinedSig::ACCOUNTED_SIZE`] charges in metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinedSig {
    pub scheme: SchemeTag,
    pub digest: Digest32,
    pub evidence: Vec<(SignerId, Vec<u8>)>,
}

impl CombinedSig {
    pub const ACCOUNTED_SIZE: usize = 33;

    pub fn signers(&self) -> impl Iterator<Item = SignerId> + '_ {
        self.evidence.iter().map(|(s, _)| *s)
    }

    pub fn encode_into(&self, w: &mut Writer) {
        w.u8(self.scheme.as_u8());
        w.raw(&self.digest.0);
        w.u32(self.evidence.len() as u32);
        for (signer, tag) in &self.evidence {
            w.u64(*signer);
            w.bytes(tag);
        }
    }

    pub fn decode_from(r: &mut Reader) -> Result<Self, CodecError> {
        let scheme = SchemeTag::from_u8(r.u8()?)?;
        let digest = Digest32(r.digest32()?);
        let count = r.seq_len("combined sig evidence", 12)?;
        let mut evidence = Vec::with_capacity(count);
        for _ in 0..count {
            let signer = r.u64()?;
            let tag = r.bytes()?;
            evidence.push((signer, tag));
        }
        Ok(CombinedSig { scheme, digest, evidence })
    }

    /// Canonical encoding of this signature, e.g. as input to nested signing.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode_into(&mut w);
        w.finish()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CryptoError {
    #[error("only {valid} valid shares of {needed} required")]
    InsufficientShares { valid: u64, needed: u64 },
    #[error("valid shares disagree on the signed digest")]
    MixedDigests,
}

/// The pluggable signing backend. `MockScheme` is the only implementation
/// shipped; the trait is the slot where a pairing-based scheme would go.
pub trait ThresholdScheme: Send + Sync {
    /// Produce signer's share on `digest`. Deterministic per (signer, digest).
    fn sign_share(&self, scheme: &SchemeDescriptor, signer: SignerId, digest: &Digest32) -> SigShare;

    /// True iff the share was produced by its claimed signer for this scheme
    /// and digest. Never panics on malformed bytes.
    fn verify_share(&self, scheme: &SchemeDescriptor, share: &SigShare) -> bool;

    /// Filter invalid shares, then combine k valid ones. The result is
    /// independent of share order and of extra shares beyond the threshold.
    fn combine(&self, scheme: &SchemeDescriptor, shares: &[SigShare]) -> Result<CombinedSig, CryptoError>;

    /// True iff this proves `threshold` distinct in-range signers signed the
    /// digest. Never panics on malformed input.
    fn verify_combined(&self, scheme: &SchemeDescriptor, sig: &CombinedSig) -> bool;
}

/// Deterministic keyed-hash scheme. Holds the full secret table (derived from
/// a master seed), which doubles as the mock's "public material": verifying a
/// keyed hash requires the key. Adversaries in tests only ever use the keys
/// of the replicas they control.
pub struct MockScheme {
    master_seed: [u8; 32],
}

impl MockScheme {
    pub fn new(master_seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"sbft/mock-master/v1");
        h.update(master_seed.to_le_bytes());
        MockScheme { master_seed: h.finalize().into() }
    }

    fn secret(&self, scheme: SchemeTag, signer: SignerId) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"sbft/mock-secret/v1");
        h.update(self.master_seed);
        h.update([scheme.as_u8()]);
        h.update(signer.to_le_bytes());
        h.finalize().into()
    }

    fn share_tag(&self, scheme: SchemeTag, signer: SignerId, digest: &Digest32) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(b"sbft/mock-share/v1");
        h.update(self.secret(scheme, signer));
        h.update([scheme.as_u8()]);
        h.update(signer.to_le_bytes());
        h.update(digest.0);
        h.finalize().to_vec()
    }
}

impl ThresholdScheme for MockScheme {
    fn sign_share(&self, scheme: &SchemeDescriptor, signer: SignerId, digest: &Digest32) -> SigShare {
        SigShare {
            scheme: scheme.tag,
            signer,
            digest: *digest,
            tag: self.share_tag(scheme.tag, signer, digest),
        }
    }

    fn verify_share(&self, scheme: &SchemeDescriptor, share: &SigShare) -> bool {
        share.scheme == scheme.tag
            && scheme.signer_in_range(share.signer)
            && share.tag == self.share_tag(scheme.tag, share.signer, &share.digest)
    }

    fn combine(&self, scheme: &SchemeDescriptor, shares: &[SigShare]) -> Result<CombinedSig, CryptoError> {
        let mut valid: Vec<&SigShare> = shares.iter().filter(|s| self.verify_share(scheme, s)).collect();
        let digest = match valid.first() {
            Some(s) => s.digest,
            None => {
                return Err(CryptoError::InsufficientShares { valid: 0, needed: scheme.threshold });
            }
        };
        if valid.iter().any(|s| s.digest != digest) {
            return Err(CryptoError::MixedDigests);
        }
        valid.sort_by_key(|s| s.signer);
        valid.dedup_by_key(|s| s.signer);
        if (valid.len() as u64) < scheme.threshold {
            return Err(CryptoError::InsufficientShares {
                valid: valid.len() as u64,
                needed: scheme.threshold,
            });
        }
        let evidence = valid
            .into_iter()
            .take(scheme.threshold as usize)
            .map(|s| (s.signer, s.tag.clone()))
            .collect();
        Ok(CombinedSig { scheme: scheme.tag, digest, evidence })
    }

    fn verify_combined(&self, scheme: &SchemeDescriptor, sig: &CombinedSig) -> bool {
        if sig.scheme != scheme.tag || (sig.evidence.len() as u64) < scheme.threshold {
            return false;
        }
        let mut seen = std::collections::BTreeSet::new();
        for (signer, tag) in &sig.evidence {
            if !scheme.signer_in_range(*signer) || !seen.insert(*signer) {
                return false;
            }
            if *tag != self.share_tag(scheme.tag, *signer, &sig.digest) {
                return false;
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (MockScheme, SchemeSet) {
        let params = ClusterParams::derive(1, 0, 256).unwrap();
        (MockScheme::new(42), SchemeSet::for_cluster(&params))
    }

    fn shares(scheme: &MockScheme, desc: &SchemeDescriptor, digest: &Digest32, ids: &[u64]) -> Vec<SigShare> {
        ids.iter().map(|i| scheme.sign_share(desc, *i, digest)).collect()
    }

    #[test]
    fn share_sign_verify() {
        let (scheme, set) = setup();
        let d = sha256(b"payload");
        let s1 = scheme.sign_share(&set.sigma, 1, &d);
        assert!(scheme.verify_share(&set.sigma, &s1));
        // Same digest, different signer: distinct valid share.
        let s2 = scheme.sign_share(&set.sigma, 2, &d);
        assert_ne!(s1.tag, s2.tag);
        assert!(scheme.verify_share(&set.sigma, &s2));
        // Presented against a different digest: invalid.
        let mut wrong = s1.clone();
        wrong.digest = sha256(b"other");
        assert!(!scheme.verify_share(&set.sigma, &wrong));
        // Flipped tag byte: invalid.
        let mut flipped = s1.clone();
        flipped.tag[0] ^= 1;
        assert!(!scheme.verify_share(&set.sigma, &flipped));
        // Signer outside 1..=n: invalid.
        let out = scheme.sign_share(&set.sigma, 99, &d);
        assert!(!scheme.verify_share(&set.sigma, &out));
    }

    #[test]
    fn combine_threshold_boundary() {
        let (scheme, set) = setup(); // sigma threshold 4
        let d = sha256(b"block");
        let ok = scheme.combine(&set.sigma, &shares(&scheme, &set.sigma, &d, &[1, 2, 3, 4])).unwrap();
        assert!(scheme.verify_combined(&set.sigma, &ok));
        assert_eq!(ok.digest, d);

        let short = scheme.combine(&set.sigma, &shares(&scheme, &set.sigma, &d, &[1, 2, 3]));
        assert_eq!(short.unwrap_err(), CryptoError::InsufficientShares { valid: 3, needed: 4 });
    }

    #[test]
    fn combine_filters_corrupt_shares() {
        let (scheme, set) = setup();
        let d = sha256(b"block");
        let mut pool = shares(&scheme, &set.sigma, &d, &[1, 2, 3, 4]);
        let mut bad = scheme.sign_share(&set.sigma, 2, &d);
        bad.tag[5] ^= 0xFF;
        let mut bad2 = scheme.sign_share(&set.sigma, 3, &d);
        bad2.tag.truncate(4);
        pool.push(bad);
        pool.push(bad2);
        let sig = scheme.combine(&set.sigma, &pool).unwrap();
        assert_eq!(sig.digest, d);
        assert!(scheme.verify_combined(&set.sigma, &sig));
    }

    #[test]
    fn combine_rejects_mixed_digests() {
        let (scheme, set) = setup();
        let a = sha256(b"a");
        let b = sha256(b"b");
        let mut pool = shares(&scheme, &set.tau, &a, &[1, 2]);
        pool.extend(shares(&scheme, &set.tau, &b, &[3, 4]));
        assert_eq!(scheme.combine(&set.tau, &pool).unwrap_err(), CryptoError::MixedDigests);
    }

    #[test]
    fn combine_is_order_and_surplus_independent() {
        let (scheme, set) = setup();
        let d = sha256(b"block");
        let fwd = scheme.combine(&set.tau, &shares(&scheme, &set.tau, &d, &[1, 2, 3])).unwrap();
        let rev = scheme.combine(&set.tau, &shares(&scheme, &set.tau, &d, &[3, 2, 1])).unwrap();
        assert_eq!(fwd, rev);
        // Duplicate signers only count once.
        let dup = scheme.combine(&set.tau, &shares(&scheme, &set.tau, &d, &[1, 1, 2, 2])).is_err();
        assert!(dup);
    }

    #[test]
    fn forged_evidence_rejected() {
        let (scheme, set) = setup();
        let d = sha256(b"block");
        // Adversary holds keys 1..=3 (k-1 for sigma): forge the fourth tag.
        let mut evidence: Vec<(SignerId, Vec<u8>)> = shares(&scheme, &set.sigma, &d, &[1, 2, 3])
            .into_iter()
            .map(|s| (s.signer, s.tag))
            .collect();
        evidence.push((4, sha256(b"not the real tag").0.to_vec()));
        let forged = CombinedSig { scheme: SchemeTag::Sigma, digest: d, evidence };
        assert!(!scheme.verify_combined(&set.sigma, &forged));
        // Duplicating an owned signer does not help either.
        let s1 = scheme.sign_share(&set.sigma, 1, &d);
        let dup = CombinedSig {
            scheme: SchemeTag::Sigma,
            digest: d,
            evidence: vec![(1, s1.tag.clone()), (1, s1.tag.clone()), (2, s1.tag.clone()), (3, s1.tag)],
        };
        assert!(!scheme.verify_combined(&set.sigma, &dup));
    }

    #[test]
    fn combined_digest_substitution_fails() {
        let (scheme, set) = setup();
        let d = sha256(b"block");
        let mut sig = scheme.combine(&set.pi, &shares(&scheme, &set.pi, &d, &[1, 2])).unwrap();
        sig.digest = sha256(b"innocent looking substitute");
        assert!(!scheme.verify_combined(&set.pi, &sig));
    }

    #[test]
    fn nested_signing_round_trips() {
        // tau_i over the byte encoding of a combined tau(h).
        let (scheme, set) = setup();
        let h = sha256(b"decision block hash");
        let inner = scheme.combine(&set.tau, &shares(&scheme, &set.tau, &h, &[1, 2, 3])).unwrap();
        let inner_digest = sha256(&inner.encode());
        let nested: Vec<SigShare> = [2, 3, 4]
            .iter()
            .map(|i| scheme.sign_share(&set.tau, *i, &inner_digest))
            .collect();
        let outer = scheme.combine(&set.tau, &nested).unwrap();
        assert!(scheme.verify_combined(&set.tau, &outer));
        assert_eq!(outer.digest, inner_digest);
    }

    #[test]
    fn protocol_hash_covers_header() {
        let r = b"requests";
        assert_eq!(protocol_hash(1, 0, r), protocol_hash(1, 0, r));
        assert_ne!(protocol_hash(1, 0, r), protocol_hash(1, 1, r));
        assert_ne!(protocol_hash(1, 0, r), protocol_hash(2, 0, r));
        // Empty payload still hashes the header.
        assert_ne!(protocol_hash(1, 0, &[]), protocol_hash(2, 0, &[]));
    }
}
