//! Client-side state: sessions, upstream sources, parent selection among
//! LAC candidates, and the window rules that decide whether one client can
//! keep feeding another.

use rand::Rng;

use crate::ids::{ClientId, ProxyId, SessionId, VideoId};
use crate::kernel::{Link, SimTime, SlotToken, MS_PER_MINUTE};
use crate::proxy::{FeedKind, LacCandidate};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            x: rng.random(),
            y: rng.random(),
        }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// A stream fed by the proxy.
#[derive(Debug)]
pub struct ProxyFeed {
    pub pc: SlotToken,
    pub sp: SlotToken,
    pub kind: FeedKind,
    /// First chunk index delivered over this feed.
    pub first_chunk: u32,
}

impl ProxyFeed {
    /// Whether chunk `k` has to cross the server-proxy link.
    pub fn uses_server_link(&self, k: u32, count_miss_prefix: bool) -> bool {
        match self.kind {
            FeedKind::CachedPrefix { prefix_min } => k >= prefix_min,
            FeedKind::Relay {
                prefix_min,
                prefix_cached,
            } => !prefix_cached || count_miss_prefix || k >= prefix_min,
        }
    }

    /// Closed-form count of server-link chunks over `[first_chunk, end)`.
    pub fn server_chunks(&self, end: u32, count_miss_prefix: bool) -> u32 {
        let a = self.first_chunk;
        let b = end.max(a);
        match self.kind {
            FeedKind::Relay { prefix_cached, .. } if !prefix_cached || count_miss_prefix => b - a,
            FeedKind::CachedPrefix { prefix_min } | FeedKind::Relay { prefix_min, .. } => {
                b.saturating_sub(a.max(prefix_min))
            }
        }
    }
}

#[derive(Debug)]
pub enum Source {
    Proxy(ProxyFeed),
    /// Fed by another client; the token is a slot on that client's uplink.
    Client { parent: ClientId, token: SlotToken },
    /// Receives nothing: every chunk is in hand.
    Detached,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Admitted, first chunk not yet delivered.
    Connecting,
    Playing,
    /// Finished viewing, still forwarding its final window to children.
    RelayOnly,
}

#[derive(Debug)]
pub struct Session {
    /// Equal to the index of the request that opened it.
    pub id: SessionId,
    pub video: VideoId,
    pub duration_min: u32,
    pub prefix_min: u32,
    pub arrived_at: SimTime,
    /// Delivery time of chunk 0 under the current timeline.
    pub origin: SimTime,
    pub received: u32,
    /// Per-minute delivery counts; every entry ends at exactly one.
    pub ledger: Vec<u8>,
    pub epoch: u32,
    pub phase: Phase,
    pub source: Source,
    pub children: Vec<ClientId>,
    /// Candidates retained for failover.
    pub lac: Vec<LacCandidate>,
    /// False for sessions relayed from the server without a cached prefix;
    /// those never appear in the proxy's chain list.
    pub listed: bool,
}

impl Session {
    pub fn next_chunk_at(&self) -> SimTime {
        self.origin.plus(self.received as u64 * MS_PER_MINUTE)
    }

    pub fn end_at(&self) -> SimTime {
        self.origin.plus(self.duration_min as u64 * MS_PER_MINUTE)
    }

    /// Chunk indices currently held in the window buffer.
    pub fn window(&self) -> std::ops::Range<u32> {
        self.received.saturating_sub(self.prefix_min + 1)..self.received
    }

    pub fn holds(&self, k: u32) -> bool {
        self.window().contains(&k)
    }

    pub fn has_all_chunks(&self) -> bool {
        self.received >= self.duration_min
    }

    pub fn parent(&self) -> Option<ClientId> {
        match self.source {
            Source::Client { parent, .. } => Some(parent),
            _ => None,
        }
    }
}

pub struct ClientState {
    pub id: ClientId,
    pub proxy: ProxyId,
    pub position: Position,
    pub uplink: Link,
    pub session: Option<Session>,
}

/// Nearest candidate; ties go to the most recent arrival.
pub fn select_parent(lac: &[LacCandidate]) -> Option<ClientId> {
    lac.iter()
        .min_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then(b.arrived_at.cmp(&a.arrived_at))
        })
        .map(|c| c.client)
}

/// Drops `failed` from the retained candidates and picks again.
pub fn failover_parent(lac: &mut Vec<LacCandidate>, failed: ClientId) -> Option<ClientId> {
    lac.retain(|c| c.client != failed);
    select_parent(lac)
}

/// Whether `parent` can supply every chunk `child` still needs from its
/// window, given both timelines.
pub fn window_covers(
    parent: &Session,
    child_origin: SimTime,
    child_received: u32,
    prefix_min: u32,
) -> bool {
    if child_received >= parent.duration_min {
        return true;
    }
    if parent.has_all_chunks() && parent.phase == Phase::RelayOnly {
        // The window is frozen at the final W + 1 chunks.
        return child_received + prefix_min + 1 >= parent.duration_min;
    }
    if child_origin <= parent.origin {
        return false;
    }
    let lag = child_origin.ms() - parent.origin.ms();
    lag < (prefix_min as u64 + 1) * MS_PER_MINUTE
}

/// Arrival-gap rule for reattaching an orphan to its grandparent.
pub fn splice_gap_ok(grandparent_arrival: SimTime, child_arrival: SimTime, prefix_min: u32) -> bool {
    child_arrival >= grandparent_arrival
        && child_arrival.ms() - grandparent_arrival.ms() < prefix_min as u64 * MS_PER_MINUTE
}
