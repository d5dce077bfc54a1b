//! Core of the SBFT replication engine.
//!
//! The protocol commits batches of client requests ("decision blocks") through
//! a single-round fast path (`3f+c+1` signature shares combined by rotating
//! C-collectors) with a linear-PBFT fallback (prepare / commit rounds driven
//! through collectors, the primary acting as the last fallback collector).
//! Execution results reach clients as a single acknowledgement carrying a
//! threshold state certificate and a Merkle execution proof.
//!
//! Everything here is deterministic and synchronous-callable: replicas and
//! clients are event-in/actions-out state machines with no clocks, threads or
//! sockets of their own, which is what lets the simulator in `sbft-simnet`
//! replay them byte-identically from a seed.

pub mod client;
pub mod crypto;
pub mod kvstore;
pub mod messages;
pub mod node;
pub mod params;
pub mod replica;
pub mod wire;

pub use params::{ClusterParams, CollectorKind, PathKind, ReplicaId, RoleAssignment};
