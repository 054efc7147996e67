//! Deterministic discrete-event kernel.
//!
//! The kernel owns the virtual clock and the ordered event queue, hands out
//! seeded random substreams, and models links as a uniform delay range plus a
//! fixed number of concurrent stream slots. Time is an integer number of
//! virtual milliseconds so event ordering never depends on float rounding.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::SimError;
use crate::ids::{ClientId, ProxyId, SessionId};

pub const MS_PER_MINUTE: u64 = 60_000;

/// Virtual milliseconds since simulation start.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_minutes(minutes: u64) -> Self {
        SimTime(minutes * MS_PER_MINUTE)
    }

    pub fn ms(self) -> u64 {
        self.0
    }

    /// Index of the virtual minute this instant falls in.
    pub fn minute(self) -> u64 {
        self.0 / MS_PER_MINUTE
    }

    pub fn plus(self, ms: u64) -> Self {
        SimTime(self.0 + ms)
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    RequestArrival,
    HandshakeMsg,
    OkStart,
    ChunkDelivery,
    StreamEnd,
    ClientDeparture,
    TerminationSignal,
    BandwidthTick,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::RequestArrival,
        EventKind::HandshakeMsg,
        EventKind::OkStart,
        EventKind::ChunkDelivery,
        EventKind::StreamEnd,
        EventKind::ClientDeparture,
        EventKind::TerminationSignal,
        EventKind::BandwidthTick,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::RequestArrival => "RequestArrival",
            EventKind::HandshakeMsg => "HandshakeMsg",
            EventKind::OkStart => "OkStart",
            EventKind::ChunkDelivery => "ChunkDelivery",
            EventKind::StreamEnd => "StreamEnd",
            EventKind::ClientDeparture => "ClientDeparture",
            EventKind::TerminationSignal => "TerminationSignal",
            EventKind::BandwidthTick => "BandwidthTick",
        }
    }
}

/// Where a termination signal is addressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Proxy(ProxyId),
    Client(ClientId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Payload {
    Request {
        index: u32,
    },
    /// Addressed to one client session. `epoch` invalidates events that were
    /// scheduled before the session's timeline was shifted.
    Session {
        client: ClientId,
        session: SessionId,
        epoch: u32,
    },
    Termination {
        from: ClientId,
        to: Endpoint,
    },
    Tick,
}

impl Payload {
    /// Stable 64-bit digest of the payload, used in trace lines.
    pub fn digest(&self) -> u64 {
        let mut h = FnvHasher::default();
        match *self {
            Payload::Request { index } => {
                h.write_u8(1);
                h.write_u32(index);
            }
            Payload::Session {
                client,
                session,
                epoch,
            } => {
                h.write_u8(2);
                h.write_u32(client.0);
                h.write_u32(session.0);
                h.write_u32(epoch);
            }
            Payload::Termination { from, to } => {
                h.write_u8(3);
                h.write_u32(from.0);
                match to {
                    Endpoint::Proxy(p) => {
                        h.write_u8(0);
                        h.write_u32(p.0);
                    }
                    Endpoint::Client(c) => {
                        h.write_u8(1);
                        h.write_u32(c.0);
                    }
                }
            }
            Payload::Tick => h.write_u8(4),
        }
        h.finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub fire_at: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: Payload,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert so the earliest (fire_at, seq) pops first.
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Ordered event queue with the virtual clock.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
    clock: SimTime,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn peek(&self) -> Option<&Event> {
        self.heap.peek()
    }

    /// Enqueues an event. Ties on `fire_at` dispatch in scheduling order.
    pub fn schedule(
        &mut self,
        fire_at: SimTime,
        kind: EventKind,
        payload: Payload,
    ) -> Result<u64, SimError> {
        if fire_at < self.clock {
            return Err(SimError::PastEvent {
                at: fire_at,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event {
            fire_at,
            seq,
            kind,
            payload,
        });
        Ok(seq)
    }

    /// Pops the next event if it fires at or before `t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<Event> {
        match self.heap.peek() {
            Some(e) if e.fire_at <= t_end => {
                let e = self.heap.pop()?;
                self.clock = e.fire_at;
                Some(e)
            }
            _ => None,
        }
    }
}

pub trait Handler {
    type Error;

    fn handle(&mut self, event: Event, queue: &mut EventQueue) -> Result<(), Self::Error>;
}

/// Dispatches every event with `fire_at <= t_end` in `(fire_at, seq)` order.
/// Returns the number of events dispatched.
pub fn run_until<H: Handler>(
    queue: &mut EventQueue,
    t_end: SimTime,
    handler: &mut H,
) -> Result<u64, H::Error> {
    let mut dispatched = 0;
    while let Some(event) = queue.pop_until(t_end) {
        handler.handle(event, queue)?;
        dispatched += 1;
    }
    Ok(dispatched)
}

/// Running digest over dispatched events plus an optional line buffer for
/// the tab-separated trace dump.
pub struct Trace {
    hasher: Sha256,
    lines: Option<Vec<String>>,
}

impl Trace {
    pub fn new(keep_lines: bool) -> Self {
        Self {
            hasher: Sha256::new(),
            lines: keep_lines.then(Vec::new),
        }
    }

    pub fn record(&mut self, e: &Event) {
        let digest = e.payload.digest();
        self.hasher.update(e.fire_at.0.to_le_bytes());
        self.hasher.update(e.seq.to_le_bytes());
        self.hasher.update([e.kind as u8]);
        self.hasher.update(digest.to_le_bytes());
        if let Some(lines) = self.lines.as_mut() {
            lines.push(format!(
                "{}\t{}\t{}\t{:016x}",
                e.fire_at.0,
                e.seq,
                e.kind.as_str(),
                digest
            ));
        }
    }

    pub fn lines(&self) -> Option<&[String]> {
        self.lines.as_deref()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

/// Independent random substreams. Each subsystem draws from its own stream so
/// extra draws in one never shift the others.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Substream {
    Workload = 1,
    Delays = 2,
    Placement = 3,
}

pub fn substream(seed: u64, stream: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkClass {
    ServerProxy,
    ProxyClient,
    ClientClient,
}

/// Inclusive delay range in milliseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayRange {
    pub lo: u64,
    pub hi: u64,
}

impl DelayRange {
    pub fn new(lo: u64, hi: u64) -> Self {
        assert!(lo <= hi, "delay range lo {lo} > hi {hi}");
        Self { lo, hi }
    }

    /// Uniform sample in `[lo, hi]` using exactly one 64-bit draw.
    pub fn sample<R: RngCore>(&self, rng: &mut R) -> u64 {
        let span = (self.hi - self.lo) as u128 + 1;
        let x = rng.next_u64() as u128;
        self.lo + ((x * span) >> 64) as u64
    }
}

/// Identifies one physical link instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LinkId {
    ServerProxy(ProxyId),
    ProxyClient(ProxyId),
    ClientUplink(ClientId),
}

/// Proof of one reserved stream slot. Not `Clone`: it can be released once.
#[derive(Debug, PartialEq, Eq)]
pub struct SlotToken {
    link: LinkId,
}

impl SlotToken {
    pub fn link(&self) -> LinkId {
        self.link
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Saturated;

/// Number of whole playback streams that fit in a link of `mbps` megabits per
/// second, given the data-unit scale and a playback rate in units per hour.
pub fn slots_for(mbps: f64, units_per_megabit: f64, playback_rate_per_hour: u32) -> u32 {
    let units_per_minute = mbps * units_per_megabit;
    let rate_per_minute = playback_rate_per_hour as f64 / 60.0;
    // Guard against 9.9999999 style results from the float product.
    ((units_per_minute / rate_per_minute) + 1e-9).floor().max(0.0) as u32
}

#[derive(Clone, Debug)]
pub struct Link {
    id: LinkId,
    class: LinkClass,
    delay: DelayRange,
    slots: u32,
    in_use: u32,
}

impl Link {
    pub fn new(id: LinkId, class: LinkClass, delay: DelayRange, slots: u32) -> Self {
        Self {
            id,
            class,
            delay,
            slots,
            in_use: 0,
        }
    }

    pub fn id(&self) -> LinkId {
        self.id
    }

    pub fn class(&self) -> LinkClass {
        self.class
    }

    pub fn slots(&self) -> u32 {
        self.slots
    }

    pub fn in_use(&self) -> u32 {
        self.in_use
    }

    pub fn has_free_slot(&self) -> bool {
        self.in_use < self.slots
    }

    pub fn sample_delay<R: RngCore>(&self, rng: &mut R) -> u64 {
        self.delay.sample(rng)
    }

    pub fn reserve_slot(&mut self) -> Result<SlotToken, Saturated> {
        if self.in_use + 1 > self.slots {
            return Err(Saturated);
        }
        self.in_use += 1;
        Ok(SlotToken { link: self.id })
    }

    pub fn release(&mut self, token: SlotToken) -> Result<(), SimError> {
        if token.link != self.id || self.in_use == 0 {
            return Err(SimError::ForeignToken);
        }
        self.in_use -= 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(i: u32) -> Payload {
        Payload::Request { index: i }
    }

    struct Recorder {
        seen: Vec<(u64, u64)>,
    }

    impl Handler for Recorder {
        type Error = SimError;
        fn handle(&mut self, e: Event, _q: &mut EventQueue) -> Result<(), SimError> {
            self.seen.push((e.fire_at.0, e.seq));
            Ok(())
        }
    }

    #[test]
    fn single_event_is_head() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(5), EventKind::RequestArrival, req(0)).unwrap();
        assert_eq!(q.peek().unwrap().fire_at, SimTime(5));
    }

    #[test]
    fn ties_dispatch_in_insertion_order() {
        let mut q = EventQueue::new();
        let a = q.schedule(SimTime(5), EventKind::RequestArrival, req(1)).unwrap();
        let b = q.schedule(SimTime(5), EventKind::RequestArrival, req(2)).unwrap();
        assert_eq!(q.pop_until(SimTime(10)).unwrap().seq, a);
        assert_eq!(q.pop_until(SimTime(10)).unwrap().seq, b);
    }

    #[test]
    fn past_event_is_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(4), EventKind::BandwidthTick, Payload::Tick).unwrap();
        q.pop_until(SimTime(4)).unwrap();
        let err = q
            .schedule(SimTime(3), EventKind::BandwidthTick, Payload::Tick)
            .unwrap_err();
        assert_eq!(
            err,
            SimError::PastEvent {
                at: SimTime(3),
                clock: SimTime(4)
            }
        );
    }

    #[test]
    fn run_until_is_inclusive_at_the_boundary() {
        let mut q = EventQueue::new();
        for t in 1..=3 {
            q.schedule(SimTime(t), EventKind::RequestArrival, req(t as u32))
                .unwrap();
        }
        let mut h = Recorder { seen: vec![] };
        assert_eq!(run_until(&mut q, SimTime(2), &mut h).unwrap(), 2);
        assert_eq!(q.clock(), SimTime(2));
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn run_until_on_empty_queue() {
        let mut q = EventQueue::new();
        let mut h = Recorder { seen: vec![] };
        assert_eq!(run_until(&mut q, SimTime(100), &mut h).unwrap(), 0);
        assert_eq!(q.clock(), SimTime::ZERO);
    }

    #[test]
    fn delay_samples_stay_in_range() {
        let mut rng = substream(7, Substream::Delays);
        let pc = DelayRange::new(120, 180);
        let cc = DelayRange::new(60, 90);
        for _ in 0..10_000 {
            let r = pc.sample(&mut rng);
            assert!((120..=180).contains(&r));
            let r = cc.sample(&mut rng);
            assert!((60..=90).contains(&r));
        }
        assert_eq!(DelayRange::new(100, 100).sample(&mut rng), 100);
    }

    #[test]
    fn delay_sample_consumes_one_draw() {
        let mut a = substream(3, Substream::Delays);
        let mut b = substream(3, Substream::Delays);
        DelayRange::new(480, 640).sample(&mut a);
        b.next_u64();
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn substreams_are_independent() {
        let mut w = substream(1, Substream::Workload);
        let mut d = substream(1, Substream::Delays);
        assert_ne!(w.next_u64(), d.next_u64());
    }

    #[test]
    fn slot_reservation() {
        let id = LinkId::ProxyClient(ProxyId(0));
        let mut link = Link::new(id, LinkClass::ProxyClient, DelayRange::new(1, 1), 2);
        let t1 = link.reserve_slot().unwrap();
        let t2 = link.reserve_slot().unwrap();
        assert_eq!(link.in_use(), 2);
        assert_eq!(link.reserve_slot(), Err(Saturated));
        link.release(t1).unwrap();
        link.release(t2).unwrap();
        assert_eq!(link.in_use(), 0);
    }

    #[test]
    fn foreign_token_is_refused() {
        let mut a = Link::new(
            LinkId::ProxyClient(ProxyId(0)),
            LinkClass::ProxyClient,
            DelayRange::new(1, 1),
            1,
        );
        let mut b = Link::new(
            LinkId::ProxyClient(ProxyId(1)),
            LinkClass::ProxyClient,
            DelayRange::new(1, 1),
            1,
        );
        let t = a.reserve_slot().unwrap();
        assert_eq!(b.release(t), Err(SimError::ForeignToken));
    }

    #[test]
    fn slot_conversion() {
        assert_eq!(slots_for(2.0, 50.0, 200), 30);
        assert_eq!(slots_for(0.256, 50.0, 200), 3);
        assert_eq!(slots_for(1.0, 10.0 / 3.0, 200), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dispatch_is_time_then_fifo(times in prop::collection::vec(0u64..50, 1..60)) {
                let mut q = EventQueue::new();
                for (i, t) in times.iter().enumerate() {
                    q.schedule(SimTime(*t), EventKind::BandwidthTick, Payload::Request { index: i as u32 }).unwrap();
                }
                let mut last: Option<(SimTime, u64)> = None;
                let mut n = 0;
                while let Some(e) = q.pop_until(SimTime(u64::MAX)) {
                    if let Some(prev) = last {
                        prop_assert!(prev < (e.fire_at, e.seq));
                    }
                    prop_assert_eq!(q.clock(), e.fire_at);
                    last = Some((e.fire_at, e.seq));
                    n += 1;
                }
                prop_assert_eq!(n, times.len());
            }

            #[test]
            fn delay_within_range(lo in 0u64..1000, span in 0u64..1000, seed: u64) {
                let r = DelayRange::new(lo, lo + span);
                let mut rng = substream(seed, Substream::Delays);
                for _ in 0..50 {
                    let d = r.sample(&mut rng);
                    prop_assert!(d >= lo && d <= lo + span);
                }
            }

            #[test]
            fn slots_never_exceeded(slots in 0u32..8, ops in prop::collection::vec(any::<bool>(), 0..64)) {
                let mut link = Link::new(
                    LinkId::ProxyClient(ProxyId(0)),
                    LinkClass::ProxyClient,
                    DelayRange::new(1, 1),
                    slots,
                );
                let mut held = Vec::new();
                for reserve in ops {
                    if reserve {
                        match link.reserve_slot() {
                            Ok(t) => held.push(t),
                            Err(Saturated) => prop_assert_eq!(link.in_use(), slots),
                        }
                    } else if let Some(t) = held.pop() {
                        link.release(t).unwrap();
                    }
                    prop_assert!(link.in_use() <= slots);
                    prop_assert_eq!(link.in_use() as usize, held.len());
                }
            }
        }
    }
}
