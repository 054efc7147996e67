//! Proxy-side admission: the streaming clients list (SCL), the prefix cache,
//! construction of the list of applicant clients (LAC), and miss handling
//! with popularity-driven eviction.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::SimError;
use crate::ids::{ClientId, ProxyId, VideoId};
use crate::kernel::{Link, SimTime, SlotToken, MS_PER_MINUTE};
use crate::workload::{prefix_minutes, PopularityTracker, Request, Video};

/// Upstream of a chain member as recorded in the SCL.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upstream {
    /// Served by the proxy, or a finished relay that no longer receives.
    Root,
    Client(ClientId),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainMember {
    pub client: ClientId,
    pub arrived_at: SimTime,
    pub parent: Upstream,
}

/// `<video id, prefix size, clients being streamed>`.
#[derive(Clone, Debug, PartialEq)]
pub struct SclEntry {
    pub video: VideoId,
    pub prefix_min: u32,
    pub is_streaming: bool,
    /// Ordered by arrival; same-millisecond arrivals keep dispatch order.
    pub chain: Vec<ChainMember>,
}

impl SclEntry {
    pub fn new(video: VideoId, prefix_min: u32) -> Self {
        Self {
            video,
            prefix_min,
            is_streaming: false,
            chain: Vec::new(),
        }
    }

    pub fn position(&self, c: ClientId) -> Option<usize> {
        self.chain.iter().position(|m| m.client == c)
    }

    pub fn member(&self, c: ClientId) -> Option<&ChainMember> {
        self.chain.iter().find(|m| m.client == c)
    }

    pub fn children_of(&self, c: ClientId) -> impl Iterator<Item = &ChainMember> {
        self.chain
            .iter()
            .filter(move |m| m.parent == Upstream::Client(c))
    }

    pub fn push(&mut self, member: ChainMember) -> Result<(), SimError> {
        if let Upstream::Client(p) = member.parent {
            if self.position(p).is_none() {
                return Err(SimError::NotInChain {
                    video: self.video,
                    client: p,
                });
            }
        }
        if let Some(last) = self.chain.last() {
            if last.arrived_at > member.arrived_at {
                return Err(SimError::InvariantViolation(format!(
                    "{} joined the chain of {} out of arrival order",
                    member.client, self.video
                )));
            }
        }
        self.chain.push(member);
        self.is_streaming = true;
        Ok(())
    }

    /// Structural audit: flag consistency, arrival order, and every parent
    /// appearing before its child (which rules out cycles).
    pub fn check(&self) -> Result<(), SimError> {
        if self.is_streaming == self.chain.is_empty() {
            return Err(SimError::InvariantViolation(format!(
                "IS-STREAMING flag of {} disagrees with its chain",
                self.video
            )));
        }
        for (i, m) in self.chain.iter().enumerate() {
            if i > 0 && self.chain[i - 1].arrived_at > m.arrived_at {
                return Err(SimError::InvariantViolation(format!(
                    "chain of {} is not ordered by arrival",
                    self.video
                )));
            }
            if let Upstream::Client(p) = m.parent {
                match self.position(p) {
                    Some(j) if j < i => {}
                    _ => {
                        return Err(SimError::CycleDetected {
                            child: m.client,
                            new_parent: p,
                        })
                    }
                }
            }
        }
        Ok(())
    }
}

/// Removes a member that has no children left in the chain.
pub fn scl_remove(entry: &mut SclEntry, c: ClientId) -> Result<(), SimError> {
    let idx = entry.position(c).ok_or(SimError::NotInChain {
        video: entry.video,
        client: c,
    })?;
    if entry.children_of(c).next().is_some() {
        return Err(SimError::DanglingChild {
            video: entry.video,
            client: c,
        });
    }
    entry.chain.remove(idx);
    entry.is_streaming = !entry.chain.is_empty();
    Ok(())
}

/// Points `child` at a new upstream. A client parent must precede the child.
pub fn scl_reparent(
    entry: &mut SclEntry,
    child: ClientId,
    new_parent: Upstream,
) -> Result<(), SimError> {
    let ci = entry.position(child).ok_or(SimError::NotInChain {
        video: entry.video,
        client: child,
    })?;
    if let Upstream::Client(p) = new_parent {
        let pi = entry.position(p).ok_or(SimError::NotInChain {
            video: entry.video,
            client: p,
        })?;
        if pi >= ci {
            return Err(SimError::CycleDetected {
                child,
                new_parent: p,
            });
        }
    }
    entry.chain[ci].parent = new_parent;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LacCandidate {
    pub client: ClientId,
    pub arrived_at: SimTime,
    pub distance: f64,
}

/// Candidate parents offered to a newcomer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lac {
    pub candidates: Vec<LacCandidate>,
}

impl Lac {
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }
}

/// Chain members that arrived at most `prefix_min` minutes before the
/// requester, keeping the `d_max` most recent.
pub fn build_lac(
    entry: &SclEntry,
    requester_arrival: SimTime,
    d_max: usize,
    distance: impl Fn(ClientId) -> f64,
) -> Lac {
    let threshold = entry.prefix_min as u64 * MS_PER_MINUTE;
    let eligible: Vec<&ChainMember> = entry
        .chain
        .iter()
        .filter(|m| {
            m.arrived_at <= requester_arrival
                && requester_arrival.ms() - m.arrived_at.ms() <= threshold
        })
        .collect();
    let skip = eligible.len().saturating_sub(d_max);
    Lac {
        candidates: eligible[skip..]
            .iter()
            .map(|m| LacCandidate {
                client: m.client,
                arrived_at: m.arrived_at,
                distance: distance(m.client),
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixCache {
    capacity_min: u32,
    used_min: u32,
    entries: BTreeMap<VideoId, u32>,
}

impl PrefixCache {
    pub fn new(capacity_min: u32) -> Self {
        Self {
            capacity_min,
            used_min: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> u32 {
        self.capacity_min
    }

    pub fn used(&self) -> u32 {
        self.used_min
    }

    pub fn free(&self) -> u32 {
        self.capacity_min - self.used_min
    }

    pub fn contains(&self, v: VideoId) -> bool {
        self.entries.contains_key(&v)
    }

    pub fn prefix(&self, v: VideoId) -> Option<u32> {
        self.entries.get(&v).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (VideoId, u32)> + '_ {
        self.entries.iter().map(|(v, w)| (*v, *w))
    }

    /// Caches a prefix if it fits; returns whether it was stored.
    pub fn insert(&mut self, v: VideoId, minutes: u32) -> bool {
        if self.contains(v) || minutes > self.free() {
            return false;
        }
        self.entries.insert(v, minutes);
        self.used_min += minutes;
        true
    }

    pub fn evict(&mut self, v: VideoId) -> Option<u32> {
        let w = self.entries.remove(&v)?;
        self.used_min -= w;
        Some(w)
    }

    pub fn check(&self) -> Result<(), SimError> {
        let sum: u32 = self.entries.values().sum();
        if sum != self.used_min || sum > self.capacity_min {
            return Err(SimError::InvariantViolation(format!(
                "prefix cache holds {sum} of {} minutes (ledger {})",
                self.capacity_min, self.used_min
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Insufficient;

/// Popularity order used for eviction: lower window share first, then the
/// catalog's colder rank.
fn coldness_key(tracker: &mut PopularityTracker, v: VideoId, now: SimTime) -> (f64, i64) {
    let share = tracker
        .share(v, now)
        .unwrap_or_else(|| tracker.x_of(v, now));
    (share, -(v.0 as i64))
}

/// Frees at least `need_min` minutes by evicting whole prefixes of videos
/// colder than `incoming`, coldest first, skipping `protect`. All-or-nothing:
/// the cache is untouched when not enough can be freed.
pub fn dynamic_buffer_allocation(
    cache: &mut PrefixCache,
    tracker: &mut PopularityTracker,
    need_min: u32,
    protect: &BTreeSet<VideoId>,
    incoming: VideoId,
    now: SimTime,
) -> Result<Vec<(VideoId, u32)>, Insufficient> {
    debug_assert!(need_min > 0);
    let bar = coldness_key(tracker, incoming, now);
    let mut candidates: Vec<((f64, i64), VideoId, u32)> = cache
        .entries()
        .filter(|(v, _)| !protect.contains(v) && *v != incoming)
        .map(|(v, w)| (coldness_key(tracker, v, now), v, w))
        .filter(|(k, _, _)| *k < bar)
        .collect();
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("shares are finite"));

    let mut freed = 0;
    let mut plan = Vec::new();
    for (_, v, w) in candidates {
        if freed >= need_min {
            break;
        }
        freed += w;
        plan.push((v, w));
    }
    if freed < need_min {
        return Err(Insufficient);
    }
    for (v, _) in &plan {
        cache.evict(*v);
    }
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    BufferExhausted,
    LinkSaturated,
}

/// Where the data of a proxy-fed stream comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedKind {
    /// First `prefix_min` minutes from the proxy cache, the rest from the CMS.
    CachedPrefix { prefix_min: u32 },
    /// Whole video relayed from the CMS. `prefix_cached` marks a miss whose
    /// prefix was stored while streaming.
    Relay {
        prefix_min: u32,
        prefix_cached: bool,
    },
}

/// Proxy-client and server-proxy slots held by a proxy-fed stream.
#[derive(Debug)]
pub struct StreamGrant {
    pub pc: SlotToken,
    pub sp: SlotToken,
    pub kind: FeedKind,
}

#[derive(Debug)]
pub enum AdmissionOutcome {
    NewStream(StreamGrant),
    Chained(Lac),
    MissFetched { grant: StreamGrant, cached: bool },
    Rejected(RejectReason),
}

#[derive(Clone, Copy, Debug)]
pub struct AdmissionPolicy {
    pub chaining: bool,
    pub d_max: usize,
    pub strict_buffer_reject: bool,
}

pub struct ProxyState {
    pub id: ProxyId,
    pub cache: PrefixCache,
    pub scl: BTreeMap<VideoId, SclEntry>,
    pub tracker: PopularityTracker,
    pub sp_link: Link,
    pub pc_link: Link,
    /// Re-run the SCL audit after every mutation.
    pub audit: bool,
}

impl ProxyState {
    pub fn new(
        id: ProxyId,
        cache: PrefixCache,
        tracker: PopularityTracker,
        sp_link: Link,
        pc_link: Link,
    ) -> Self {
        Self {
            id,
            cache,
            scl: BTreeMap::new(),
            tracker,
            sp_link,
            pc_link,
            audit: false,
        }
    }

    /// Places prefixes in catalog rank order while they fit, sized from the
    /// tracker's current estimate.
    pub fn prefill(&mut self, videos: &[Video], now: SimTime) {
        for v in videos {
            let w = prefix_minutes(self.tracker.x_of(v.id, now), v.duration_min);
            if !self.cache.insert(v.id, w) {
                break;
            }
            self.scl.insert(v.id, SclEntry::new(v.id, w));
        }
    }

    pub fn entry(&self, v: VideoId) -> Option<&SclEntry> {
        self.scl.get(&v)
    }

    fn audit_entry(&self, v: VideoId) -> Result<(), SimError> {
        if self.audit {
            if let Some(e) = self.scl.get(&v) {
                e.check()?;
            }
        }
        Ok(())
    }

    pub fn handle_request(
        &mut self,
        r: &Request,
        video: &Video,
        now: SimTime,
        policy: &AdmissionPolicy,
        distance: impl Fn(ClientId) -> f64,
    ) -> Result<AdmissionOutcome, SimError> {
        self.tracker.observe(r.video, r.arrived_at, now);
        if !self.cache.contains(r.video) {
            return self.fetch_and_cache_miss(r, video, now, policy);
        }
        if policy.chaining {
            if let Some(entry) = self.scl.get(&r.video).filter(|e| e.is_streaming) {
                let lac = build_lac(entry, r.arrived_at, policy.d_max, distance);
                if !lac.is_empty() {
                    return Ok(AdmissionOutcome::Chained(lac));
                }
            }
        }
        Ok(match self.admit_new_stream(r.client, r.video, r.arrived_at)? {
            Ok(grant) => AdmissionOutcome::NewStream(grant),
            Err(reason) => AdmissionOutcome::Rejected(reason),
        })
    }

    fn reserve_pair(&mut self) -> Option<(SlotToken, SlotToken)> {
        let pc = self.pc_link.reserve_slot().ok()?;
        match self.sp_link.reserve_slot() {
            Ok(sp) => Some((pc, sp)),
            Err(_) => {
                self.pc_link
                    .release(pc)
                    .expect("token was just issued by this link");
                None
            }
        }
    }

    /// Starts a proxy-fed stream of a cached video and appends the client to
    /// the chain as a root. Leaves no trace when a link is full.
    pub fn admit_new_stream(
        &mut self,
        client: ClientId,
        video: VideoId,
        arrived_at: SimTime,
    ) -> Result<Result<StreamGrant, RejectReason>, SimError> {
        let prefix_min = self
            .cache
            .prefix(video)
            .expect("new streams are only started for cached videos");
        let Some((pc, sp)) = self.reserve_pair() else {
            return Ok(Err(RejectReason::LinkSaturated));
        };
        self.scl
            .entry(video)
            .or_insert_with(|| SclEntry::new(video, prefix_min))
            .push(ChainMember {
                client,
                arrived_at,
                parent: Upstream::Root,
            })?;
        self.audit_entry(video)?;
        Ok(Ok(StreamGrant {
            pc,
            sp,
            kind: FeedKind::CachedPrefix { prefix_min },
        }))
    }

    pub fn fetch_and_cache_miss(
        &mut self,
        r: &Request,
        video: &Video,
        now: SimTime,
        policy: &AdmissionPolicy,
    ) -> Result<AdmissionOutcome, SimError> {
        let Some((pc, sp)) = self.reserve_pair() else {
            return Ok(AdmissionOutcome::Rejected(RejectReason::LinkSaturated));
        };
        let w = prefix_minutes(self.tracker.x_of(r.video, now), video.duration_min);
        let mut cached = self.cache.insert(r.video, w);
        if !cached {
            let protect: BTreeSet<VideoId> = self
                .scl
                .values()
                .filter(|e| e.is_streaming)
                .map(|e| e.video)
                .collect();
            let need = w - self.cache.free();
            match dynamic_buffer_allocation(
                &mut self.cache,
                &mut self.tracker,
                need,
                &protect,
                r.video,
                now,
            ) {
                Ok(evicted) => {
                    for (v, _) in evicted {
                        self.scl.remove(&v);
                    }
                    cached = self.cache.insert(r.video, w);
                    debug_assert!(cached);
                }
                Err(Insufficient) if policy.strict_buffer_reject => {
                    self.pc_link.release(pc)?;
                    self.sp_link.release(sp)?;
                    return Ok(AdmissionOutcome::Rejected(RejectReason::BufferExhausted));
                }
                Err(Insufficient) => {}
            }
        }
        if cached {
            let mut entry = SclEntry::new(r.video, w);
            entry.push(ChainMember {
                client: r.client,
                arrived_at: r.arrived_at,
                parent: Upstream::Root,
            })?;
            self.scl.insert(r.video, entry);
            self.audit_entry(r.video)?;
        }
        Ok(AdmissionOutcome::MissFetched {
            grant: StreamGrant {
                pc,
                sp,
                kind: FeedKind::Relay {
                    prefix_min: w,
                    prefix_cached: cached,
                },
            },
            cached,
        })
    }

    /// Records a chained admission in the SCL.
    pub fn join_chain(
        &mut self,
        video: VideoId,
        client: ClientId,
        arrived_at: SimTime,
        parent: ClientId,
    ) -> Result<(), SimError> {
        let entry = self.scl.get_mut(&video).ok_or(SimError::NotInChain {
            video,
            client: parent,
        })?;
        entry.push(ChainMember {
            client,
            arrived_at,
            parent: Upstream::Client(parent),
        })?;
        self.audit_entry(video)
    }

    pub fn remove_member(&mut self, video: VideoId, client: ClientId) -> Result<(), SimError> {
        let entry = self
            .scl
            .get_mut(&video)
            .ok_or(SimError::NotInChain { video, client })?;
        scl_remove(entry, client)?;
        self.audit_entry(video)
    }

    pub fn reparent(
        &mut self,
        video: VideoId,
        child: ClientId,
        new_parent: Upstream,
    ) -> Result<(), SimError> {
        let entry = self.scl.get_mut(&video).ok_or(SimError::NotInChain {
            video,
            client: child,
        })?;
        scl_reparent(entry, child, new_parent)?;
        self.audit_entry(video)
    }

    /// Full sweep: cache ledger, SCL structure, cache coverage of the SCL,
    /// and link occupancy.
    pub fn check(&self) -> Result<(), SimError> {
        self.cache.check()?;
        for e in self.scl.values() {
            e.check()?;
            if self.cache.prefix(e.video) != Some(e.prefix_min) {
                return Err(SimError::InvariantViolation(format!(
                    "{} has an SCL entry but no matching cached prefix at {}",
                    e.video, self.id
                )));
            }
        }
        for link in [&self.sp_link, &self.pc_link] {
            if link.in_use() > link.slots() {
                return Err(SimError::InvariantViolation(format!(
                    "{:?} over capacity",
                    link.id()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{DelayRange, LinkClass, LinkId};
    use crate::workload::{zipf_pmf, ClampBand};

    fn member(c: u32, min: u64, parent: Upstream) -> ChainMember {
        ChainMember {
            client: ClientId(c),
            arrived_at: SimTime::from_minutes(min),
            parent,
        }
    }

    fn entry_with(members: Vec<ChainMember>, w: u32) -> SclEntry {
        let mut e = SclEntry::new(VideoId(1), w);
        for m in members {
            e.push(m).unwrap();
        }
        e
    }

    /// Walks parent links from every member and checks each reaches ROOT
    /// without revisiting a node.
    fn all_reach_root(e: &SclEntry) -> bool {
        e.chain.iter().all(|start| {
            let mut seen = BTreeSet::new();
            let mut cur = start;
            loop {
                if !seen.insert(cur.client) {
                    return false;
                }
                match cur.parent {
                    Upstream::Root => return true,
                    Upstream::Client(p) => match e.member(p) {
                        Some(m) => cur = m,
                        None => return false,
                    },
                }
            }
        })
    }

    fn brute_force_lac(e: &SclEntry, at: SimTime) -> Vec<ClientId> {
        let mut out = Vec::new();
        for m in &e.chain {
            let age_ms = at.ms() as i64 - m.arrived_at.ms() as i64;
            if age_ms >= 0 && age_ms <= e.prefix_min as i64 * 60_000 {
                out.push(m.client);
            }
        }
        out
    }

    #[test]
    fn lac_respects_threshold() {
        // Members aged 30, 20 and 5 minutes at t=100, W=24.
        let e = entry_with(
            vec![
                member(1, 70, Upstream::Root),
                member(2, 80, Upstream::Client(ClientId(1))),
                member(3, 95, Upstream::Client(ClientId(2))),
            ],
            24,
        );
        let at = SimTime::from_minutes(100);
        let lac = build_lac(&e, at, 4, |_| 1.0);
        let got: Vec<ClientId> = lac.candidates.iter().map(|c| c.client).collect();
        assert_eq!(got, vec![ClientId(2), ClientId(3)]);
        assert_eq!(got, brute_force_lac(&e, at));
    }

    #[test]
    fn lac_empty_when_all_too_old() {
        let e = entry_with(vec![member(1, 0, Upstream::Root)], 24);
        assert!(build_lac(&e, SimTime::from_minutes(25), 4, |_| 0.0).is_empty());
        // The boundary itself is admissible.
        assert_eq!(build_lac(&e, SimTime::from_minutes(24), 4, |_| 0.0).len(), 1);
    }

    #[test]
    fn lac_truncates_to_most_recent() {
        let mut members = vec![member(0, 0, Upstream::Root)];
        for i in 1..10 {
            members.push(member(i, i as u64, Upstream::Client(ClientId(i - 1))));
        }
        let e = entry_with(members, 60);
        let lac = build_lac(&e, SimTime::from_minutes(10), 4, |c| c.0 as f64);
        let got: Vec<u32> = lac.candidates.iter().map(|c| c.client.0).collect();
        assert_eq!(got, vec![6, 7, 8, 9]);
        assert_eq!(lac.candidates[0].distance, 6.0);
    }

    #[test]
    fn remove_last_member_clears_flag() {
        let mut e = entry_with(vec![member(1, 0, Upstream::Root)], 24);
        assert!(e.is_streaming);
        scl_remove(&mut e, ClientId(1)).unwrap();
        assert!(!e.is_streaming);
        e.check().unwrap();
    }

    #[test]
    fn remove_mid_chain_after_splice() {
        let mut e = entry_with(
            vec![
                member(1, 0, Upstream::Root),
                member(2, 5, Upstream::Client(ClientId(1))),
                member(3, 10, Upstream::Client(ClientId(2))),
            ],
            24,
        );
        assert_eq!(
            scl_remove(&mut e, ClientId(2)),
            Err(SimError::DanglingChild {
                video: VideoId(1),
                client: ClientId(2)
            })
        );
        scl_reparent(&mut e, ClientId(3), Upstream::Client(ClientId(1))).unwrap();
        scl_remove(&mut e, ClientId(2)).unwrap();
        e.check().unwrap();
        assert!(all_reach_root(&e));
    }

    #[test]
    fn remove_non_member() {
        let mut e = entry_with(vec![member(1, 0, Upstream::Root)], 24);
        assert!(matches!(
            scl_remove(&mut e, ClientId(9)),
            Err(SimError::NotInChain { .. })
        ));
    }

    #[test]
    fn reparent_rules() {
        let mut e = entry_with(
            vec![
                member(1, 0, Upstream::Root),
                member(2, 1, Upstream::Client(ClientId(1))),
                member(3, 2, Upstream::Client(ClientId(2))),
                member(4, 3, Upstream::Client(ClientId(3))),
            ],
            24,
        );
        scl_reparent(&mut e, ClientId(4), Upstream::Client(ClientId(2))).unwrap();
        assert_eq!(e.member(ClientId(4)).unwrap().parent, Upstream::Client(ClientId(2)));
        assert_eq!(
            scl_reparent(&mut e, ClientId(2), Upstream::Client(ClientId(4))),
            Err(SimError::CycleDetected {
                child: ClientId(2),
                new_parent: ClientId(4)
            })
        );
    }

    #[test]
    fn splice_middle_of_five_keeps_rootedness() {
        let mut members = vec![member(1, 0, Upstream::Root)];
        for i in 2..=5 {
            members.push(member(i, i as u64, Upstream::Client(ClientId(i - 1))));
        }
        let mut e = entry_with(members, 30);
        scl_reparent(&mut e, ClientId(4), Upstream::Client(ClientId(2))).unwrap();
        scl_remove(&mut e, ClientId(3)).unwrap();
        assert!(all_reach_root(&e));
        e.check().unwrap();
    }

    fn tracker_for(n: usize) -> PopularityTracker {
        PopularityTracker::new(
            60,
            ClampBand {
                min: 0.05,
                max: 0.5,
            },
            zipf_pmf(n, 0.729),
        )
    }

    #[test]
    fn eviction_single_and_cumulative() {
        let now = SimTime::from_minutes(1);
        // Video 1 hot, 2..4 cold with decreasing prior.
        let mut cache = PrefixCache::new(100);
        cache.insert(VideoId(2), 30);
        cache.insert(VideoId(3), 25);
        cache.insert(VideoId(4), 30);
        let mut tr = tracker_for(5);
        for v in [1, 1, 1, 2, 2, 3] {
            tr.observe(VideoId(v), now, now);
        }
        // Coldest unprotected is 4 (no requests), 30 minutes.
        let mut c = cache.clone();
        let ev =
            dynamic_buffer_allocation(&mut c, &mut tr, 24, &BTreeSet::new(), VideoId(1), now)
                .unwrap();
        assert_eq!(ev, vec![(VideoId(4), 30)]);
        // 50 needs the two coldest: 4 then 3.
        let mut c = cache.clone();
        let ev =
            dynamic_buffer_allocation(&mut c, &mut tr, 50, &BTreeSet::new(), VideoId(1), now)
                .unwrap();
        assert_eq!(ev, vec![(VideoId(4), 30), (VideoId(3), 25)]);
        assert_eq!(c.used(), 30);
    }

    #[test]
    fn eviction_all_or_nothing() {
        let now = SimTime::from_minutes(1);
        let mut cache = PrefixCache::new(60);
        cache.insert(VideoId(2), 30);
        cache.insert(VideoId(3), 30);
        let before = cache.clone();
        let mut tr = tracker_for(4);
        tr.observe(VideoId(1), now, now);
        let protect: BTreeSet<VideoId> = [VideoId(2), VideoId(3)].into();
        assert_eq!(
            dynamic_buffer_allocation(&mut cache, &mut tr, 10, &protect, VideoId(1), now),
            Err(Insufficient)
        );
        assert_eq!(cache, before);
    }

    #[test]
    fn eviction_never_displaces_hotter_videos() {
        // The requested video is the coldest: nothing may be evicted for it.
        let now = SimTime::from_minutes(1);
        let mut cache = PrefixCache::new(60);
        cache.insert(VideoId(1), 30);
        cache.insert(VideoId(2), 30);
        let mut tr = tracker_for(3);
        for v in [1, 2, 3] {
            tr.observe(VideoId(v), now, now);
        }
        // Equal shares: rank breaks the tie and video 3 is coldest.
        assert_eq!(
            dynamic_buffer_allocation(&mut cache, &mut tr, 10, &BTreeSet::new(), VideoId(3), now),
            Err(Insufficient)
        );
    }

    fn proxy(cache_min: u32, pc: u32, sp: u32) -> ProxyState {
        let id = ProxyId(0);
        let mut p = ProxyState::new(
            id,
            PrefixCache::new(cache_min),
            tracker_for(10),
            Link::new(
                LinkId::ServerProxy(id),
                LinkClass::ServerProxy,
                DelayRange::new(480, 640),
                sp,
            ),
            Link::new(
                LinkId::ProxyClient(id),
                LinkClass::ProxyClient,
                DelayRange::new(120, 180),
                pc,
            ),
        );
        p.audit = true;
        p
    }

    fn video(id: u32, s: u32) -> Video {
        Video {
            id: VideoId(id),
            duration_min: s,
            playback_rate: 200,
            rank: id,
        }
    }

    fn request(c: u32, v: u32, min: u64) -> Request {
        Request {
            client: ClientId(c),
            proxy: ProxyId(0),
            video: VideoId(v),
            arrived_at: SimTime::from_minutes(min),
            leave_after_ms: None,
        }
    }

    const CHAINING: AdmissionPolicy = AdmissionPolicy {
        chaining: true,
        d_max: 4,
        strict_buffer_reject: false,
    };

    #[test]
    fn admission_script() {
        // Hand-traced five-request script on one proxy, W=24 for video 1:
        //   t=0  c1 v1 -> NewStream (no chain yet)
        //   t=10 c2 v1 -> Chained, LAC=[c1] (10 min gap)
        //   t=40 c3 v1 -> NewStream (c1 and c2 are 40 and 30 min old)
        //   t=41 c4 v2 -> MissFetched (v2 not cached), prefix cached
        //   t=42 c5 v2 -> Chained, LAC=[c4]
        let mut p = proxy(200, 10, 10);
        p.cache.insert(VideoId(1), 24);
        let v1 = video(1, 120);
        let v2 = video(2, 150);

        let o = p
            .handle_request(&request(1, 1, 0), &v1, SimTime::ZERO, &CHAINING, |_| 1.0)
            .unwrap();
        assert!(matches!(o, AdmissionOutcome::NewStream(_)));
        assert!(p.entry(VideoId(1)).unwrap().is_streaming);

        let now = SimTime::from_minutes(10);
        match p
            .handle_request(&request(2, 1, 10), &v1, now, &CHAINING, |_| 3.0)
            .unwrap()
        {
            AdmissionOutcome::Chained(lac) => {
                assert_eq!(lac.len(), 1);
                assert_eq!(lac.candidates[0].client, ClientId(1));
                p.join_chain(VideoId(1), ClientId(2), now, ClientId(1)).unwrap();
            }
            other => panic!("expected Chained, got {other:?}"),
        }

        let now = SimTime::from_minutes(40);
        let o = p
            .handle_request(&request(3, 1, 40), &v1, now, &CHAINING, |_| 1.0)
            .unwrap();
        assert!(matches!(o, AdmissionOutcome::NewStream(_)));

        let now = SimTime::from_minutes(41);
        let o = p
            .handle_request(&request(4, 2, 41), &v2, now, &CHAINING, |_| 1.0)
            .unwrap();
        assert!(matches!(o, AdmissionOutcome::MissFetched { cached: true, .. }));
        assert!(p.cache.contains(VideoId(2)));

        let now = SimTime::from_minutes(42);
        match p
            .handle_request(&request(5, 2, 42), &v2, now, &CHAINING, |_| 1.0)
            .unwrap()
        {
            AdmissionOutcome::Chained(lac) => assert_eq!(lac.candidates[0].client, ClientId(4)),
            other => panic!("expected Chained, got {other:?}"),
        }
        p.check().unwrap();
        assert_eq!(p.pc_link.in_use(), 3);
    }

    #[test]
    fn new_stream_saturated_is_atomic() {
        let mut p = proxy(200, 10, 0);
        p.cache.insert(VideoId(1), 24);
        let before_scl = p.scl.clone();
        let o = p
            .handle_request(&request(1, 1, 0), &video(1, 120), SimTime::ZERO, &CHAINING, |_| 1.0)
            .unwrap();
        assert!(matches!(
            o,
            AdmissionOutcome::Rejected(RejectReason::LinkSaturated)
        ));
        assert_eq!(p.scl, before_scl);
        assert_eq!(p.pc_link.in_use(), 0);
        assert_eq!(p.sp_link.in_use(), 0);
    }

    #[test]
    fn strict_mode_rejects_when_buffer_cannot_be_freed() {
        let strict = AdmissionPolicy {
            strict_buffer_reject: true,
            ..CHAINING
        };
        let mut p = proxy(10, 10, 10);
        // Cache full of a protected (streaming) video.
        p.cache.insert(VideoId(1), 10);
        p.admit_new_stream(ClientId(9), VideoId(1), SimTime::ZERO)
            .unwrap()
            .unwrap();
        let cache_before = p.cache.clone();
        let now = SimTime::from_minutes(1);
        let o = p
            .handle_request(&request(1, 2, 1), &video(2, 150), now, &strict, |_| 1.0)
            .unwrap();
        assert!(matches!(
            o,
            AdmissionOutcome::Rejected(RejectReason::BufferExhausted)
        ));
        assert_eq!(p.cache, cache_before);
        assert_eq!(p.pc_link.in_use(), 1);

        // Default mode serves the same request without caching.
        let mut p2 = proxy(10, 10, 10);
        p2.cache.insert(VideoId(1), 10);
        p2.admit_new_stream(ClientId(9), VideoId(1), SimTime::ZERO)
            .unwrap()
            .unwrap();
        let o = p2
            .handle_request(&request(1, 2, 1), &video(2, 150), now, &CHAINING, |_| 1.0)
            .unwrap();
        assert!(matches!(o, AdmissionOutcome::MissFetched { cached: false, .. }));
        assert!(p2.entry(VideoId(2)).is_none());
    }

    #[test]
    fn miss_evicts_colder_prefix() {
        // The request makes video 2 the hottest (x clamps to 0.5, W = 75).
        let mut p = proxy(100, 10, 10);
        p.cache.insert(VideoId(9), 80);
        p.scl.insert(VideoId(9), SclEntry::new(VideoId(9), 80));
        let now = SimTime::from_minutes(1);
        let o = p
            .handle_request(&request(1, 2, 1), &video(2, 150), now, &CHAINING, |_| 1.0)
            .unwrap();
        assert!(matches!(o, AdmissionOutcome::MissFetched { cached: true, .. }));
        assert!(!p.cache.contains(VideoId(9)));
        assert!(p.entry(VideoId(9)).is_none());
        p.check().unwrap();
    }

    #[test]
    fn baseline_never_chains() {
        let baseline = AdmissionPolicy {
            chaining: false,
            ..CHAINING
        };
        let mut p = proxy(200, 10, 10);
        p.cache.insert(VideoId(1), 24);
        let v1 = video(1, 120);
        for i in 0..5 {
            let o = p
                .handle_request(&request(i, 1, i as u64), &v1, SimTime::from_minutes(i as u64), &baseline, |_| 1.0)
                .unwrap();
            assert!(matches!(o, AdmissionOutcome::NewStream(_)));
        }
        assert!(p
            .entry(VideoId(1))
            .unwrap()
            .chain
            .iter()
            .all(|m| m.parent == Upstream::Root));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Clone, Debug)]
        enum Op {
            Join { gap_min: u64, parent: Option<usize> },
            Remove(usize),
            Reparent { child: usize, parent: Option<usize> },
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![
                (0u64..10, prop::option::of(0usize..16))
                    .prop_map(|(gap_min, parent)| Op::Join { gap_min, parent }),
                (0usize..16).prop_map(Op::Remove),
                (0usize..16, prop::option::of(0usize..16))
                    .prop_map(|(child, parent)| Op::Reparent { child, parent }),
            ]
        }

        proptest! {
            #[test]
            fn chain_stays_rooted(ops in prop::collection::vec(op(), 1..60)) {
                let mut e = SclEntry::new(VideoId(1), 30);
                let mut next_id = 0u32;
                let mut t = 0u64;
                for op in ops {
                    let n = e.chain.len();
                    match op {
                        Op::Join { gap_min, parent } => {
                            t += gap_min;
                            let parent = match parent {
                                Some(i) if n > 0 => Upstream::Client(e.chain[i % n].client),
                                _ => Upstream::Root,
                            };
                            e.push(member(next_id, t, parent)).unwrap();
                            next_id += 1;
                        }
                        Op::Remove(i) if n > 0 => {
                            let c = e.chain[i % n].client;
                            let has_children = e.children_of(c).next().is_some();
                            let r = scl_remove(&mut e, c);
                            prop_assert_eq!(r.is_err(), has_children);
                        }
                        Op::Reparent { child, parent } if n > 0 => {
                            let ci = child % n;
                            let c = e.chain[ci].client;
                            let target = match parent {
                                Some(p) => Upstream::Client(e.chain[p % n].client),
                                None => Upstream::Root,
                            };
                            let later = matches!(parent, Some(p) if p % n >= ci);
                            let r = scl_reparent(&mut e, c, target);
                            prop_assert_eq!(r.is_err(), later);
                        }
                        _ => {}
                    }
                    prop_assert!(e.check().is_ok());
                    prop_assert!(all_reach_root(&e));
                }
            }

            #[test]
            fn lac_matches_brute_force(
                gaps in prop::collection::vec(0u64..20, 1..20),
                w in 1u32..60,
                probe_gap in 0u64..80,
                d_max in 1usize..6,
            ) {
                let mut e = SclEntry::new(VideoId(1), w);
                let mut t = 0;
                for (i, g) in gaps.iter().enumerate() {
                    t += g;
                    e.push(member(i as u32, t, Upstream::Root)).unwrap();
                }
                let at = SimTime::from_minutes(t + probe_gap);
                let lac = build_lac(&e, at, d_max, |_| 0.0);
                let all = brute_force_lac(&e, at);
                let expect = &all[all.len().saturating_sub(d_max)..];
                let got: Vec<ClientId> = lac.candidates.iter().map(|c| c.client).collect();
                prop_assert_eq!(got.as_slice(), expect);
            }

            #[test]
            fn eviction_is_all_or_nothing(
                sizes in prop::collection::vec(1u32..40, 1..10),
                protected in prop::collection::vec(any::<bool>(), 10),
                need in 1u32..120,
            ) {
                let now = SimTime::from_minutes(1);
                let mut cache = PrefixCache::new(400);
                for (i, s) in sizes.iter().enumerate() {
                    cache.insert(VideoId(i as u32 + 2), *s);
                }
                let protect: BTreeSet<VideoId> = (0..sizes.len())
                    .filter(|i| protected[*i])
                    .map(|i| VideoId(i as u32 + 2))
                    .collect();
                let mut tr = tracker_for(12);
                tr.observe(VideoId(1), now, now);
                let before = cache.clone();
                match dynamic_buffer_allocation(&mut cache, &mut tr, need, &protect, VideoId(1), now) {
                    Ok(ev) => {
                        let freed: u32 = ev.iter().map(|(_, w)| w).sum();
                        prop_assert!(freed >= need);
                        prop_assert!(ev.iter().all(|(v, _)| !protect.contains(v)));
                        prop_assert_eq!(cache.used() + freed, before.used());
                    }
                    Err(Insufficient) => {
                        prop_assert_eq!(&cache, &before);
                        let evictable: u32 = before
                            .entries()
                            .filter(|(v, _)| !protect.contains(v))
                            .map(|(_, w)| w)
                            .sum();
                        prop_assert!(evictable < need);
                    }
                }
                prop_assert!(cache.check().is_ok());
            }
        }
    }
}
