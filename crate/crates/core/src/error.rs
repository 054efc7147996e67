use thiserror::Error;

use crate::ids::{ClientId, VideoId};
use crate::kernel::SimTime;

/// Bug guards raised while a run executes. Any of these aborts the run.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled at {at} ms is before the clock ({clock} ms)")]
    PastEvent { at: SimTime, clock: SimTime },
    #[error("slot token released to the wrong link or twice")]
    ForeignToken,
    #[error("{client} still has children in the chain of {video}")]
    DanglingChild { video: VideoId, client: ClientId },
    #[error("{client} is not a member of the chain of {video}")]
    NotInChain { video: VideoId, client: ClientId },
    #[error("reparenting {child} under {new_parent} would break chain order or create a cycle")]
    CycleDetected { child: ClientId, new_parent: ClientId },
    #[error("{child} needs minute {minute} which {parent} no longer (or not yet) holds")]
    WindowUnderrun {
        child: ClientId,
        parent: ClientId,
        minute: u32,
    },
    #[error("{client} finished with an incomplete or duplicated minute ledger")]
    LedgerIncomplete { client: ClientId },
    #[error("{0} slot reservations were never released")]
    TokenLeak(u64),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("ledger inconsistent: {0}")]
    LedgerInconsistent(String),
    #[error("duplicate playback start for request {0}")]
    DuplicateStart(u32),
}
