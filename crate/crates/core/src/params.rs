//! Cluster arithmetic and role assignment.
//!
//! A cluster tolerating `f` Byzantine and `c` crashed/slow replicas has
//! `n = 3f + 2c + 1` members and three signing thresholds: `sigma = 3f+c+1`
//! (fast-path commit), `tau = 2f+c+1` (linear-PBFT commit) and `pi = f+1`
//! (execution certificates). Collector groups rotate pseudo-randomly per
//! `(seq, view)` so the aggregation load spreads over all replicas.

use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Sequence number of a decision block. Slot numbering starts at 1; 0 is the
/// genesis checkpoint.
pub type Seq = u64;
/// View (epoch) number. Views start at 0.
pub type View = u64;

/// Replica identifier in `{1..n}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReplicaId(pub u64);

impl std::fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParamsError {
    #[error("window must be at least 4 and divisible by 4, got {0}")]
    BadWindow(u64),
}

/// Derived cluster constants. Constructed via [`ClusterParams::derive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterParams {
    /// Tolerated Byzantine replicas.
    pub f: u64,
    /// Tolerated crashed/slow replicas (fast path stays engaged up to `c`).
    pub c: u64,
    /// Total replicas, `3f + 2c + 1`.
    pub n: u64,
    /// Fast-path share threshold, `3f + c + 1`.
    pub sigma_threshold: u64,
    /// Linear-PBFT share threshold, `2f + c + 1`.
    pub tau_threshold: u64,
    /// Execution share threshold, `f + 1`.
    pub pi_threshold: u64,
    /// Maximum number of outstanding sequence numbers.
    pub window: u64,
    /// Periodic checkpoint interval, `window / 2`.
    pub checkpoint_period: u64,
}

impl ClusterParams {
    /// Derive all cluster constants from `(f, c, window)`.
    pub fn derive(f: u64, c: u64, window: u64) -> Result<Self, ParamsError> {
        if window < 4 || window % 4 != 0 {
            return Err(ParamsError::BadWindow(window));
        }
        let n = 3 * f + 2 * c + 1;
        Ok(ClusterParams {
            f,
            c,
            n,
            sigma_threshold: 3 * f + c + 1,
            tau_threshold: 2 * f + c + 1,
            pi_threshold: f + 1,
            window,
            checkpoint_period: window / 2,
        })
    }

    /// Number of collectors per group (`c + 1`).
    pub fn collectors_per_group(&self) -> u64 {
        self.c + 1
    }

    /// Quorum of view-change messages a new primary gathers, `2f + 2c + 1`.
    /// Equals `n - f`, so the view change never waits for slower replicas
    /// than the fastest `n - f`.
    pub fn view_change_quorum(&self) -> u64 {
        2 * self.f + 2 * self.c + 1
    }

    /// Ceiling on decision blocks the primary keeps in flight,
    /// `floor((n-1)/(c+1))`.
    pub fn active_window(&self) -> u64 {
        (self.n - 1) / (self.c + 1)
    }

    /// Fast-path participation bound: a replica joins the fast path for
    /// sequence `s` only while `s <= le + window/4`.
    pub fn fast_window(&self) -> u64 {
        self.window / 4
    }

    /// True if `id` is a valid member of this cluster.
    pub fn valid_replica(&self, id: ReplicaId) -> bool {
        id.0 >= 1 && id.0 <= self.n
    }

    /// All replica ids `1..=n`.
    pub fn all_replicas(&self) -> impl Iterator<Item = ReplicaId> {
        (1..=self.n).map(ReplicaId)
    }
}

/// Which share stream a collector group aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CollectorKind {
    /// C-collectors: sigma/tau shares toward commit certificates.
    Commit,
    /// E-collectors: pi shares toward execution certificates.
    Execute,
}

/// Collector selection flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathKind {
    /// Fast-path group: `c+1` non-primary replicas.
    Fast,
    /// Linear-PBFT group: same draw but the primary replaces the last slot,
    /// so the last collector to activate is always the primary.
    Linear,
}

/// Deterministic role assignment for one `(seq, view)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleAssignment {
    pub seq: Seq,
    pub view: View,
    pub primary: ReplicaId,
    pub c_collectors: Vec<ReplicaId>,
    pub e_collectors: Vec<ReplicaId>,
}

impl RoleAssignment {
    pub fn collectors(&self, kind: CollectorKind) -> &[ReplicaId] {
        match kind {
            CollectorKind::Commit => &self.c_collectors,
            CollectorKind::Execute => &self.e_collectors,
        }
    }
}

/// Primary of a view: round robin over `1..=n`.
pub fn primary_of(view: View, params: &ClusterParams) -> ReplicaId {
    ReplicaId((view % params.n) + 1)
}

/// Collector group for `(seq, view)`; pure function of its inputs, identical
/// on every replica. The group for the requested `kind` honors `path`; the
/// other group is always the fast draw.
pub fn collectors_of(
    seq: Seq,
    view: View,
    kind: CollectorKind,
    path: PathKind,
    params: &ClusterParams,
) -> RoleAssignment {
    let primary = primary_of(view, params);
    let commit_path = if kind == CollectorKind::Commit { path } else { PathKind::Fast };
    let execute_path = if kind == CollectorKind::Execute { path } else { PathKind::Fast };
    RoleAssignment {
        seq,
        view,
        primary,
        c_collectors: draw_group(seq, view, CollectorKind::Commit, commit_path, primary, params),
        e_collectors: draw_group(seq, view, CollectorKind::Execute, execute_path, primary, params),
    }
}

/// Seeded Fisher-Yates draw of `c+1` distinct non-primary ids. For the linear
/// path the primary replaces the last slot of the drawn group.
fn draw_group(
    seq: Seq,
    view: View,
    kind: CollectorKind,
    path: PathKind,
    primary: ReplicaId,
    params: &ClusterParams,
) -> Vec<ReplicaId> {
    let take = params.collectors_per_group() as usize;
    let mut pool: Vec<ReplicaId> =
        params.all_replicas().filter(|id| *id != primary).collect();
    if pool.is_empty() {
        // Degenerate n=1 cluster: the primary is the only candidate.
        pool.push(primary);
    }
    let mut rng = DetRng::for_assignment(seq, view, kind);
    let take = take.min(pool.len());
    for i in 0..take {
        let j = i + rng.below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    let mut group: Vec<ReplicaId> = pool.into_iter().take(take).collect();
    if path == PathKind::Linear {
        if let Some(last) = group.last_mut() {
            *last = primary;
        }
    }
    group
}

/// Small deterministic PRNG (splitmix64) seeded from a domain-separated
/// SHA-256 of the assignment key, so draws are stable across platforms and
/// independent of any external RNG crate's algorithm.
#[derive(Debug, Clone)]
pub struct DetRng {
    state: u64,
}

impl DetRng {
    pub fn new(seed: u64) -> Self {
        DetRng { state: seed }
    }

    fn for_assignment(seq: Seq, view: View, kind: CollectorKind) -> Self {
        let mut h = Sha256::new();
        h.update(b"sbft/collector-draw/v1");
        h.update(seq.to_le_bytes());
        h.update(view.to_le_bytes());
        h.update([match kind {
            CollectorKind::Commit => 0u8,
            CollectorKind::Execute => 1u8,
        }]);
        let d = h.finalize();
        DetRng::new(u64::from_le_bytes(d[0..8].try_into().unwrap()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform value in `[0, bound)` via rejection sampling; `bound` 0 or 1
    /// returns 0.
    pub fn below(&mut self, bound: u64) -> u64 {
        if bound <= 1 {
            return 0;
        }
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_small_cluster() {
        let p = ClusterParams::derive(1, 0, 256).unwrap();
        assert_eq!(p.n, 4);
        assert_eq!(p.sigma_threshold, 4);
        assert_eq!(p.tau_threshold, 3);
        assert_eq!(p.pi_threshold, 2);
        assert_eq!(p.checkpoint_period, 128);
    }

    #[test]
    fn derive_wan_scale_cluster() {
        let p = ClusterParams::derive(64, 8, 256).unwrap();
        assert_eq!(p.n, 209);
        assert_eq!(p.active_window(), 23);
    }

    #[test]
    fn derive_degenerate_single_replica() {
        let p = ClusterParams::derive(0, 0, 4).unwrap();
        assert_eq!(p.n, 1);
        assert_eq!(p.sigma_threshold, 1);
        assert_eq!(p.tau_threshold, 1);
        assert_eq!(p.pi_threshold, 1);
    }

    #[test]
    fn derive_rejects_bad_window() {
        assert!(ClusterParams::derive(1, 0, 5).is_err());
        assert!(ClusterParams::derive(1, 0, 0).is_err());
        assert!(ClusterParams::derive(1, 0, 2).is_err());
    }

    #[test]
    fn threshold_ordering_and_absence_margins() {
        for f in 0..6u64 {
            for c in 0..4u64 {
                let p = ClusterParams::derive(f, c, 256).unwrap();
                assert!(p.pi_threshold <= p.tau_threshold);
                assert!(p.tau_threshold <= p.sigma_threshold);
                assert!(p.sigma_threshold <= p.n);
                // Fast path tolerates exactly c absent replicas.
                assert_eq!(p.n - p.sigma_threshold, c);
                // Slow path tolerates f+c absentees.
                assert_eq!(p.n - p.tau_threshold, f + c);
                // Blocking waits never exceed the fastest n-f replicas:
                // tau, pi and the view-change quorum are all <= n-f. (The
                // sigma wait is timeout-guarded, not blocking.)
                assert!(p.tau_threshold <= p.n - p.f);
                assert!(p.pi_threshold <= p.n - p.f);
                assert_eq!(p.view_change_quorum(), p.n - p.f);
            }
        }
    }

    #[test]
    fn primary_round_robin() {
        let p = ClusterParams::derive(1, 0, 256).unwrap();
        assert_eq!(primary_of(0, &p), ReplicaId(1));
        assert_eq!(primary_of(5, &p), ReplicaId(2));
        let big = ClusterParams::derive(64, 8, 256).unwrap();
        assert_eq!(primary_of(208, &big), ReplicaId(209));
        // Cycles with period n.
        for v in 0..12 {
            assert_eq!(primary_of(v, &p), primary_of(v + p.n, &p));
        }
    }

    #[test]
    fn collectors_fast_excludes_primary() {
        let p = ClusterParams::derive(1, 0, 256).unwrap();
        let a = collectors_of(1, 0, CollectorKind::Commit, PathKind::Fast, &p);
        assert_eq!(a.c_collectors.len(), 1);
        assert_ne!(a.c_collectors[0], a.primary);
        assert_eq!(a.e_collectors.len(), 1);
        assert_ne!(a.e_collectors[0], a.primary);
    }

    #[test]
    fn collectors_linear_puts_primary_last() {
        let p = ClusterParams::derive(1, 0, 256).unwrap();
        let a = collectors_of(1, 0, CollectorKind::Commit, PathKind::Linear, &p);
        assert_eq!(a.c_collectors, vec![a.primary]);

        let p2 = ClusterParams::derive(2, 2, 256).unwrap();
        let lin = collectors_of(9, 3, CollectorKind::Commit, PathKind::Linear, &p2);
        assert_eq!(*lin.c_collectors.last().unwrap(), lin.primary);
        let mut uniq = lin.c_collectors.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), lin.c_collectors.len(), "collectors must be distinct");
    }

    #[test]
    fn collector_draw_is_pure() {
        let p = ClusterParams::derive(3, 2, 256).unwrap(); // n = 14
        let first = collectors_of(7, 2, CollectorKind::Execute, PathKind::Fast, &p);
        assert_eq!(first.e_collectors.len(), 3);
        for id in &first.e_collectors {
            assert_ne!(*id, first.primary);
        }
        for _ in 0..1000 {
            let again = collectors_of(7, 2, CollectorKind::Execute, PathKind::Fast, &p);
            assert_eq!(again, first);
        }
        // Different key, (almost surely) different draw and never the primary.
        let other = collectors_of(8, 2, CollectorKind::Execute, PathKind::Fast, &p);
        for id in &other.e_collectors {
            assert_ne!(*id, other.primary);
        }
    }

    #[test]
    fn draw_spreads_over_members() {
        // Every non-primary id shows up as a collector for some sequence.
        let p = ClusterParams::derive(1, 1, 256).unwrap(); // n = 6
        let mut seen = std::collections::BTreeSet::new();
        for s in 1..200u64 {
            let a = collectors_of(s, 0, CollectorKind::Commit, PathKind::Fast, &p);
            seen.extend(a.c_collectors.iter().map(|r| r.0));
        }
        assert_eq!(seen.len() as u64, p.n - 1);
    }
}
