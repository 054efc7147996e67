//! One simulation run: builds the world from a config, dispatches every event
//! through the protocol handlers, and closes the books at the end.

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::client::{
    failover_parent, select_parent, splice_gap_ok, window_covers, ClientState, Phase, Position,
    ProxyFeed, Session, Source,
};
use crate::config::{Mode, ScenarioConfig};
use crate::error::SimError;
use crate::ids::{ClientId, ProxyId, SessionId};
use crate::kernel::{
    run_until, slots_for, substream, DelayRange, Endpoint, Event, EventKind, EventQueue, Handler,
    Link, LinkClass, LinkId, Payload, SimTime, Substream, Trace, MS_PER_MINUTE,
};
use crate::metrics::{finalize, MetricsLedger, Outcome, Report, RunMeta};
use crate::proxy::{
    AdmissionOutcome, AdmissionPolicy, FeedKind, Lac, PrefixCache, ProxyState, StreamGrant,
    Upstream,
};
use crate::workload::{
    generate_requests, Catalog, ClampBand, PopularityTracker, Request, WorkloadParams,
};

/// Everything fixed before the first event: catalog, request list and client
/// positions.
#[derive(Clone, Debug)]
pub struct World {
    pub catalog: Catalog,
    pub requests: Vec<Request>,
    pub positions: Vec<Position>,
}

impl World {
    pub fn generate(cfg: &ScenarioConfig) -> Self {
        let mut place = substream(cfg.seed, Substream::Placement);
        let [lo, hi] = cfg.video_minutes;
        let catalog = Catalog::generate(
            cfg.catalog_size as usize,
            lo,
            hi,
            cfg.playback_rate,
            cfg.zipf_skew,
            &mut place,
        );
        let positions = (0..cfg.proxies * cfg.clients_per_proxy)
            .map(|_| Position::random(&mut place))
            .collect();
        let mut wl = substream(cfg.seed, Substream::Workload);
        let requests = generate_requests(
            &WorkloadParams {
                proxies: cfg.proxies,
                clients_per_proxy: cfg.clients_per_proxy,
                lambda_per_hour: cfg.lambda,
                duration: SimTime(cfg.duration_ms()),
                early_departure_prob: cfg.early_departure_prob,
            },
            &catalog,
            &mut wl,
        );
        Self {
            catalog,
            requests,
            positions,
        }
    }

    /// SHA-256 over the request list, equal for paired runs.
    pub fn request_digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.requests {
            h.update(r.client.0.to_le_bytes());
            h.update(r.proxy.0.to_le_bytes());
            h.update(r.video.0.to_le_bytes());
            h.update(r.arrived_at.0.to_le_bytes());
            h.update(r.leave_after_ms.map_or(u64::MAX, |v| v).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Per-request history, kept for inspection after the run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionRecord {
    pub outcome: Option<Outcome>,
    pub delay_ms: Option<u64>,
    /// Upstreams in the order they fed this session; `Root` is the proxy.
    pub upstreams: Vec<Upstream>,
    pub splices: u32,
    pub fallbacks: u32,
    /// Handshake time of each proxy fallback.
    pub fallback_delays_ms: Vec<u64>,
    pub stall_ms: u64,
    pub completed: bool,
    pub departed: bool,
    pub dropped: bool,
    pub ledger: Option<Vec<u8>>,
}

pub struct RunOutput {
    pub report: Report,
    pub records: Vec<SessionRecord>,
    pub trace_lines: Option<Vec<String>>,
}

struct Delays {
    rng: ChaCha8Rng,
    sp: DelayRange,
    pc: DelayRange,
    cc: DelayRange,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    policy: AdmissionPolicy,
    catalog: Catalog,
    requests: Vec<Request>,
    proxies: Vec<ProxyState>,
    clients: Vec<ClientState>,
    delays: Delays,
    metrics: MetricsLedger,
    records: Vec<SessionRecord>,
    trace: Trace,
    t_end: SimTime,
    cache_minutes: u32,
    peak_cache: u32,
    sp_audit: u64,
    verified: u64,
    dispatched_requests: u64,
    request_digest: String,
}

fn range([lo, hi]: [u64; 2]) -> DelayRange {
    DelayRange::new(lo, hi)
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, keep_trace: bool) -> Self {
        Self::with_world(cfg, World::generate(cfg), keep_trace)
    }

    pub fn with_world(cfg: &ScenarioConfig, world: World, keep_trace: bool) -> Self {
        let cache_minutes = cfg.cache_minutes(world.catalog.total_minutes());
        let rate = cfg.playback_rate;
        let band = ClampBand {
            min: cfg.x_min,
            max: cfg.x_max,
        };
        let t0 = SimTime::ZERO;
        let proxies = (0..cfg.proxies)
            .map(|p| {
                let id = ProxyId(p);
                let mut ps = ProxyState::new(
                    id,
                    PrefixCache::new(cache_minutes),
                    PopularityTracker::new(
                        cfg.window_minutes as u64,
                        band,
                        world.catalog.pmf().to_vec(),
                    ),
                    Link::new(
                        LinkId::ServerProxy(id),
                        LinkClass::ServerProxy,
                        range(cfg.delay_s_p),
                        slots_for(cfg.bw_s_p, cfg.units_per_megabit, rate),
                    ),
                    Link::new(
                        LinkId::ProxyClient(id),
                        LinkClass::ProxyClient,
                        range(cfg.delay_p_c),
                        slots_for(cfg.bw_p_c, cfg.units_per_megabit, rate),
                    ),
                );
                ps.audit = cfg.audit;
                if cfg.prefill_cache {
                    ps.prefill(world.catalog.videos(), t0);
                }
                ps
            })
            .collect();
        let cc_slots = slots_for(cfg.bw_c_c, cfg.units_per_megabit, rate);
        let clients = world
            .positions
            .iter()
            .enumerate()
            .map(|(i, pos)| {
                let id = ClientId(i as u32);
                ClientState {
                    id,
                    proxy: ProxyId(i as u32 / cfg.clients_per_proxy),
                    position: *pos,
                    uplink: Link::new(
                        LinkId::ClientUplink(id),
                        LinkClass::ClientClient,
                        range(cfg.delay_c_c),
                        cc_slots,
                    ),
                    session: None,
                }
            })
            .collect();
        let t_end = SimTime(cfg.duration_ms());
        let request_digest = world.request_digest();
        Self {
            policy: AdmissionPolicy {
                chaining: cfg.mode == Mode::Chaining,
                d_max: cfg.d_max as usize,
                strict_buffer_reject: cfg.strict_buffer_reject,
            },
            metrics: MetricsLedger::new(world.requests.len(), t_end),
            records: vec![SessionRecord::default(); world.requests.len()],
            catalog: world.catalog,
            requests: world.requests,
            proxies,
            clients,
            delays: Delays {
                rng: substream(cfg.seed, Substream::Delays),
                sp: range(cfg.delay_s_p),
                pc: range(cfg.delay_p_c),
                cc: range(cfg.delay_c_c),
            },
            trace: Trace::new(keep_trace),
            t_end,
            cache_minutes,
            peak_cache: 0,
            sp_audit: 0,
            verified: 0,
            dispatched_requests: 0,
            request_digest,
            cfg: cfg.clone(),
        }
    }

    pub fn run(mut self) -> Result<RunOutput, SimError> {
        let mut q = EventQueue::new();
        for (i, r) in self.requests.iter().enumerate() {
            q.schedule(
                r.arrived_at,
                EventKind::RequestArrival,
                Payload::Request { index: i as u32 },
            )?;
        }
        self.peak_cache = self.proxies.iter().map(|p| p.cache.used()).max().unwrap_or(0);
        let tick = self.tick_ms();
        if tick <= self.t_end.ms() {
            q.schedule(SimTime(tick), EventKind::BandwidthTick, Payload::Tick)?;
        }
        let events = run_until(&mut q, self.t_end, &mut self)?;
        self.teardown()?;
        let meta = RunMeta {
            mode: self.cfg.mode.as_str().to_string(),
            seed: self.cfg.seed,
            duration: self.t_end,
            requests_dispatched: self.dispatched_requests,
            sp_audit_rate_minutes: self.sp_audit,
            cache_minutes: self.cache_minutes,
            peak_cache_minutes: self.peak_cache,
            verified_ledgers: self.verified,
            events,
            request_digest: self.request_digest.clone(),
            trace_digest: self.trace.digest_hex(),
        };
        let report = finalize(&self.metrics, meta)?;
        Ok(RunOutput {
            report,
            records: self.records,
            trace_lines: self.trace.lines().map(|l| l.to_vec()),
        })
    }

    fn tick_ms(&self) -> u64 {
        self.cfg.tick_minutes as u64 * MS_PER_MINUTE
    }

    fn session(&self, c: ClientId) -> Option<&Session> {
        self.clients[c.index()].session.as_ref()
    }

    fn session_mut(&mut self, c: ClientId) -> &mut Session {
        self.clients[c.index()]
            .session
            .as_mut()
            .expect("caller checked the session exists")
    }

    fn proxy_of(&mut self, c: ClientId) -> &mut ProxyState {
        let p = self.clients[c.index()].proxy;
        &mut self.proxies[p.index()]
    }

    fn is_current(&self, c: ClientId, sid: SessionId, epoch: Option<u32>) -> bool {
        self.session(c)
            .is_some_and(|s| s.id == sid && epoch.is_none_or(|e| s.epoch == e))
    }

    fn session_payload(&self, c: ClientId) -> Payload {
        let s = self.session(c).expect("session exists");
        Payload::Session {
            client: c,
            session: s.id,
            epoch: s.epoch,
        }
    }

    fn signal(
        &mut self,
        q: &mut EventQueue,
        from: ClientId,
        to: Endpoint,
    ) -> Result<(), SimError> {
        let d = match to {
            Endpoint::Proxy(_) => self.delays.pc.sample(&mut self.delays.rng),
            Endpoint::Client(_) => self.delays.cc.sample(&mut self.delays.rng),
        };
        q.schedule(
            q.clock().plus(d),
            EventKind::TerminationSignal,
            Payload::Termination { from, to },
        )?;
        Ok(())
    }

    fn on_request(&mut self, index: u32, q: &mut EventQueue) -> Result<(), SimError> {
        self.dispatched_requests += 1;
        let now = q.clock();
        let r = self.requests[index as usize].clone();
        if self.session(r.client).is_some() {
            // The viewer switches videos: the old session departs first.
            self.metrics.chain.switch_departures += 1;
            self.depart(r.client, None, q)?;
        }
        let video = self.catalog.video(r.video).clone();
        let me = self.clients[r.client.index()].position;
        let clients = &self.clients;
        let outcome = self.proxies[r.proxy.index()].handle_request(
            &r,
            &video,
            now,
            &self.policy,
            |c| clients[c.index()].position.distance(&me),
        )?;
        let used = self.proxies[r.proxy.index()].cache.used();
        self.peak_cache = self.peak_cache.max(used);

        let served = match outcome {
            AdmissionOutcome::NewStream(grant) => {
                let d = self.delays.pc.sample(&mut self.delays.rng);
                self.start_proxy_session(index, grant, d, Outcome::NewStream, q)?;
                true
            }
            AdmissionOutcome::MissFetched { grant, cached } => {
                let d = self.delays.sp.sample(&mut self.delays.rng)
                    + self.delays.sp.sample(&mut self.delays.rng)
                    + self.delays.pc.sample(&mut self.delays.rng);
                let o = if cached {
                    Outcome::MissCached
                } else {
                    Outcome::MissUncached
                };
                self.start_proxy_session(index, grant, d, o, q)?;
                true
            }
            AdmissionOutcome::Chained(lac) => {
                if self.start_chained_session(index, lac, q)? {
                    true
                } else {
                    let grant = self.proxies[r.proxy.index()].admit_new_stream(
                        r.client,
                        r.video,
                        r.arrived_at,
                    )?;
                    match grant {
                        Ok(grant) => {
                            let d = self.delays.pc.sample(&mut self.delays.rng);
                            self.start_proxy_session(index, grant, d, Outcome::NewStream, q)?;
                            true
                        }
                        Err(_) => {
                            self.reject(index, Outcome::RejectedLink, now);
                            false
                        }
                    }
                }
            }
            AdmissionOutcome::Rejected(reason) => {
                let o = match reason {
                    crate::proxy::RejectReason::BufferExhausted => Outcome::RejectedBuffer,
                    crate::proxy::RejectReason::LinkSaturated => Outcome::RejectedLink,
                };
                self.reject(index, o, now);
                false
            }
        };
        if served {
            if let Some(ms) = r.leave_after_ms {
                let payload = self.session_payload(r.client);
                q.schedule(r.arrived_at.plus(ms), EventKind::ClientDeparture, payload)?;
            }
        }
        Ok(())
    }

    fn reject(&mut self, index: u32, o: Outcome, now: SimTime) {
        self.metrics.record_outcome(o, now);
        self.records[index as usize].outcome = Some(o);
    }

    fn admitted(
        &mut self,
        index: u32,
        o: Outcome,
        delay: u64,
        upstream: Upstream,
        now: SimTime,
    ) -> Result<(), SimError> {
        self.metrics.record_outcome(o, now);
        self.metrics.record_start(index, delay, now)?;
        let rec = &mut self.records[index as usize];
        rec.outcome = Some(o);
        rec.delay_ms = Some(delay);
        rec.upstreams.push(upstream);
        Ok(())
    }

    fn new_session(&self, index: u32, prefix_min: u32, origin: SimTime, source: Source) -> Session {
        let r = &self.requests[index as usize];
        let s = self.catalog.video(r.video).duration_min;
        let listed = !matches!(
            source,
            Source::Proxy(ProxyFeed {
                kind: FeedKind::Relay {
                    prefix_cached: false,
                    ..
                },
                ..
            })
        );
        Session {
            id: SessionId(index),
            video: r.video,
            duration_min: s,
            prefix_min,
            arrived_at: r.arrived_at,
            origin,
            received: 0,
            ledger: vec![0; s as usize],
            epoch: 0,
            phase: Phase::Connecting,
            source,
            children: Vec::new(),
            lac: Vec::new(),
            listed,
        }
    }

    fn start_proxy_session(
        &mut self,
        index: u32,
        grant: StreamGrant,
        delay: u64,
        o: Outcome,
        q: &mut EventQueue,
    ) -> Result<(), SimError> {
        let now = q.clock();
        let client = self.requests[index as usize].client;
        let prefix_min = match grant.kind {
            FeedKind::CachedPrefix { prefix_min } | FeedKind::Relay { prefix_min, .. } => {
                prefix_min
            }
        };
        let origin = now.plus(delay);
        let feed = ProxyFeed {
            pc: grant.pc,
            sp: grant.sp,
            kind: grant.kind,
            first_chunk: 0,
        };
        let session = self.new_session(index, prefix_min, origin, Source::Proxy(feed));
        self.clients[client.index()].session = Some(session);
        let payload = self.session_payload(client);
        q.schedule(origin, EventKind::ChunkDelivery, payload)?;
        self.admitted(index, o, delay, Upstream::Root, now)
    }

    /// Tries LAC candidates nearest first. Returns false when none can serve.
    fn start_chained_session(
        &mut self,
        index: u32,
        lac: Lac,
        q: &mut EventQueue,
    ) -> Result<bool, SimError> {
        let now = q.clock();
        let r = self.requests[index as usize].clone();
        let t_msg = self.delays.pc.sample(&mut self.delays.rng);
        let t_ok = self.delays.cc.sample(&mut self.delays.rng);
        let t_chunk = self.delays.cc.sample(&mut self.delays.rng);
        let planned = now.plus(t_msg + t_ok + t_chunk);
        let prefix_min = self.proxies[r.proxy.index()]
            .entry(r.video)
            .expect("chained admissions come from a live SCL entry")
            .prefix_min;

        let mut candidates = lac.candidates;
        let mut pick = select_parent(&candidates);
        while let Some(p) = pick {
            let origin = match self.session(p) {
                Some(ps) if ps.video == r.video && ps.phase != Phase::RelayOnly => {
                    let origin = planned.max(ps.origin.plus(1));
                    window_covers(ps, origin, 0, prefix_min).then_some(origin)
                }
                _ => None,
            };
            let token = match origin {
                Some(_) => self.clients[p.index()].uplink.reserve_slot().ok(),
                None => None,
            };
            let (Some(origin), Some(token)) = (origin, token) else {
                self.metrics.chain.failovers += 1;
                pick = failover_parent(&mut candidates, p);
                continue;
            };
            let mut session = self.new_session(
                index,
                prefix_min,
                origin,
                Source::Client { parent: p, token },
            );
            session.lac = candidates;
            self.clients[r.client.index()].session = Some(session);
            self.session_mut(p).children.push(r.client);
            self.proxies[r.proxy.index()].join_chain(r.video, r.client, r.arrived_at, p)?;
            let payload = self.session_payload(r.client);
            q.schedule(now.plus(t_msg), EventKind::HandshakeMsg, payload)?;
            q.schedule(now.plus(t_msg + t_ok), EventKind::OkStart, payload)?;
            q.schedule(origin, EventKind::ChunkDelivery, payload)?;
            self.admitted(
                index,
                Outcome::Chained,
                origin.ms() - now.ms(),
                Upstream::Client(p),
                now,
            )?;
            return Ok(true);
        }
        Ok(false)
    }

    fn on_chunk(&mut self, c: ClientId, q: &mut EventQueue) -> Result<(), SimError> {
        let now = q.clock();
        let count_miss = self.cfg.count_miss_prefix_sp;
        let s = self.session(c).expect("checked by dispatcher");
        let k = s.received;
        let video = s.video;
        match &s.source {
            Source::Proxy(feed) => {
                if feed.uses_server_link(k, count_miss) {
                    let rate = self.catalog.video(video).playback_rate;
                    self.metrics.record_sp(rate, now);
                }
            }
            Source::Client { parent, .. } => {
                let parent = *parent;
                let held = self
                    .session(parent)
                    .is_some_and(|ps| ps.video == video && ps.holds(k));
                if !held {
                    return Err(SimError::WindowUnderrun {
                        child: c,
                        parent,
                        minute: k,
                    });
                }
            }
            Source::Detached => {
                return Err(SimError::InvariantViolation(format!(
                    "{c} received a chunk with no upstream"
                )))
            }
        }
        let s = self.session_mut(c);
        s.ledger[k as usize] += 1;
        s.received += 1;
        s.phase = Phase::Playing;
        let (kind, at) = if s.has_all_chunks() {
            (EventKind::StreamEnd, s.end_at())
        } else {
            (EventKind::ChunkDelivery, s.next_chunk_at())
        };
        let payload = self.session_payload(c);
        q.schedule(at, kind, payload)?;
        Ok(())
    }

    /// Normal end of viewing.
    fn on_stream_end(&mut self, c: ClientId, q: &mut EventQueue) -> Result<(), SimError> {
        let s = self.session(c).expect("checked by dispatcher");
        if s.ledger.iter().any(|&n| n != 1) {
            return Err(SimError::LedgerIncomplete { client: c });
        }
        let (id, video, ledger) = (s.id, s.video, s.ledger.clone());
        self.verified += 1;
        self.metrics.chain.completed_streams += 1;
        let rec = &mut self.records[id.0 as usize];
        rec.completed = true;
        rec.ledger = Some(ledger);

        let old_parent = self.detach_upstream(c)?;
        if old_parent.is_some() {
            self.proxy_of(c).reparent(video, c, Upstream::Root)?;
        }
        if let Some(g) = old_parent {
            for child in self.session(c).expect("still active").children.clone() {
                self.try_splice(child, c, g)?;
            }
            self.retire_if_idle(g, q)?;
        }
        if self.session(c).expect("still active").children.is_empty() {
            self.terminate(c, q)?;
        } else {
            self.session_mut(c).phase = Phase::RelayOnly;
        }
        Ok(())
    }

    /// Releases whatever feeds `c` and returns the parent client, if any.
    fn detach_upstream(&mut self, c: ClientId) -> Result<Option<ClientId>, SimError> {
        let count_miss = self.cfg.count_miss_prefix_sp;
        let s = self.session_mut(c);
        let received = s.received;
        let video = s.video;
        match std::mem::replace(&mut s.source, Source::Detached) {
            Source::Proxy(feed) => {
                let rate = self.catalog.video(video).playback_rate as u64;
                self.sp_audit += feed.server_chunks(received, count_miss) as u64 * rate;
                let proxy = self.proxy_of(c);
                proxy.pc_link.release(feed.pc)?;
                proxy.sp_link.release(feed.sp)?;
                Ok(None)
            }
            Source::Client { parent, token } => {
                let pc = &mut self.clients[parent.index()];
                pc.uplink.release(token)?;
                if let Some(ps) = pc.session.as_mut() {
                    ps.children.retain(|&x| x != c);
                }
                Ok(Some(parent))
            }
            Source::Detached => Ok(None),
        }
    }

    /// Moves `child` from `from` to `to` when the arrival gap, the window and
    /// a free uplink slot all allow it.
    fn try_splice(&mut self, child: ClientId, from: ClientId, to: ClientId) -> Result<bool, SimError> {
        let cs = self.session(child).expect("children have sessions");
        let (arrived, origin, received, w, video) =
            (cs.arrived_at, cs.origin, cs.received, cs.prefix_min, cs.video);
        let eligible = self.session(to).is_some_and(|g| {
            g.video == video
                && splice_gap_ok(g.arrived_at, arrived, w)
                && window_covers(g, origin, received, w)
        });
        if !eligible {
            return Ok(false);
        }
        let Ok(token) = self.clients[to.index()].uplink.reserve_slot() else {
            return Ok(false);
        };
        let old = std::mem::replace(
            &mut self.session_mut(child).source,
            Source::Client { parent: to, token },
        );
        match old {
            Source::Client { parent, token } if parent == from => {
                self.clients[from.index()].uplink.release(token)?;
            }
            _ => {
                return Err(SimError::InvariantViolation(format!(
                    "{child} was not fed by {from}"
                )))
            }
        }
        self.session_mut(from).children.retain(|&x| x != child);
        self.session_mut(to).children.push(child);
        self.proxy_of(child)
            .reparent(video, child, Upstream::Client(to))?;
        self.metrics.chain.splices += 1;
        let id = self.session(child).expect("active").id;
        let rec = &mut self.records[id.0 as usize];
        rec.splices += 1;
        rec.upstreams.push(Upstream::Client(to));
        Ok(true)
    }

    /// Hands an orphan to the proxy. The first chunk waits for a fresh
    /// handshake, and the stall is pushed down the orphan's subtree.
    fn try_fallback(
        &mut self,
        child: ClientId,
        from: ClientId,
        q: &mut EventQueue,
    ) -> Result<bool, SimError> {
        let now = q.clock();
        let video = self.session(child).expect("active").video;
        let w = self.session(child).expect("active").prefix_min;
        let proxy = self.proxy_of(child);
        let Ok(pc) = proxy.pc_link.reserve_slot() else {
            return Ok(false);
        };
        let sp = match proxy.sp_link.reserve_slot() {
            Ok(sp) => sp,
            Err(_) => {
                proxy.pc_link.release(pc)?;
                return Ok(false);
            }
        };
        let kind = match proxy.cache.prefix(video) {
            Some(prefix_min) => FeedKind::CachedPrefix { prefix_min },
            None => FeedKind::Relay {
                prefix_min: w,
                prefix_cached: false,
            },
        };
        let received = self.session(child).expect("active").received;
        self.unlink_child(child, from)?;
        self.session_mut(child).source = Source::Proxy(ProxyFeed {
            pc,
            sp,
            kind,
            first_chunk: received,
        });
        self.proxy_of(child).reparent(video, child, Upstream::Root)?;

        let recovery = self.delays.pc.sample(&mut self.delays.rng)
            + self.delays.pc.sample(&mut self.delays.rng);
        let old_next = self.session(child).expect("active").next_chunk_at();
        let new_next = old_next.max(now.plus(recovery));
        let shift = new_next.ms() - old_next.ms();
        if shift > 0 {
            self.shift_subtree(child, shift, q)?;
        }
        self.metrics.chain.proxy_fallbacks += 1;
        self.metrics.chain.stall_ms += shift;
        let id = self.session(child).expect("active").id;
        let rec = &mut self.records[id.0 as usize];
        rec.fallbacks += 1;
        rec.fallback_delays_ms.push(recovery);
        rec.stall_ms += shift;
        rec.upstreams.push(Upstream::Root);
        Ok(true)
    }

    /// Cuts the feed from `from` to `child`, leaving the child detached.
    fn unlink_child(&mut self, child: ClientId, from: ClientId) -> Result<(), SimError> {
        match std::mem::replace(&mut self.session_mut(child).source, Source::Detached) {
            Source::Client { parent, token } if parent == from => {
                self.clients[from.index()].uplink.release(token)?;
            }
            _ => {
                return Err(SimError::InvariantViolation(format!(
                    "{child} was not fed by {from}"
                )))
            }
        }
        self.session_mut(from).children.retain(|&x| x != child);
        Ok(())
    }

    fn shift_subtree(&mut self, root: ClientId, delta: u64, q: &mut EventQueue) -> Result<(), SimError> {
        let mut stack = vec![root];
        while let Some(c) = stack.pop() {
            let s = self.session_mut(c);
            s.origin = s.origin.plus(delta);
            s.epoch += 1;
            let (kind, at) = if s.has_all_chunks() {
                (EventKind::StreamEnd, s.end_at())
            } else {
                (EventKind::ChunkDelivery, s.next_chunk_at())
            };
            stack.extend(s.children.iter().copied());
            let payload = self.session_payload(c);
            q.schedule(at, kind, payload)?;
        }
        Ok(())
    }

    /// Mid-stream departure. Each child is spliced to `c`'s parent (or to
    /// `inherited` when `c` itself was cut loose), else handed to the proxy,
    /// else dropped along with its own subtree.
    fn depart(
        &mut self,
        c: ClientId,
        inherited: Option<ClientId>,
        q: &mut EventQueue,
    ) -> Result<(), SimError> {
        let video = self.session(c).expect("departing client is active").video;
        let proxy_id = self.clients[c.index()].proxy;
        let own_parent = self.detach_upstream(c)?;
        let target = own_parent.or(inherited);
        if let Some(p) = own_parent {
            self.signal(q, c, Endpoint::Client(p))?;
        }

        for child in self.session(c).expect("active").children.clone() {
            self.signal(q, c, Endpoint::Client(child))?;
            if let Some(g) = target {
                if self.try_splice(child, c, g)? {
                    continue;
                }
            }
            if self.session(child).expect("active").has_all_chunks() {
                self.unlink_child(child, c)?;
                self.proxy_of(child).reparent(video, child, Upstream::Root)?;
                continue;
            }
            if self.try_fallback(child, c, q)? {
                continue;
            }
            self.unlink_child(child, c)?;
            self.proxy_of(child).reparent(video, child, Upstream::Root)?;
            self.metrics.chain.drops += 1;
            let id = self.session(child).expect("active").id;
            self.records[id.0 as usize].dropped = true;
            self.depart(child, target, q)?;
        }

        if self.session(c).expect("active").listed {
            self.proxies[proxy_id.index()].remove_member(video, c)?;
        }
        let s = self.clients[c.index()].session.take().expect("active");
        let rec = &mut self.records[s.id.0 as usize];
        rec.departed = true;
        rec.ledger = Some(s.ledger);
        self.signal(q, c, Endpoint::Proxy(proxy_id))?;
        if let Some(p) = own_parent {
            self.retire_if_idle(p, q)?;
        }
        Ok(())
    }

    fn retire_if_idle(&mut self, c: ClientId, q: &mut EventQueue) -> Result<(), SimError> {
        let idle = self
            .session(c)
            .is_some_and(|s| s.phase == Phase::RelayOnly && s.children.is_empty());
        if idle {
            self.terminate(c, q)?;
        }
        Ok(())
    }

    /// Ends a session that has no children and no upstream.
    fn terminate(&mut self, c: ClientId, q: &mut EventQueue) -> Result<(), SimError> {
        let proxy_id = self.clients[c.index()].proxy;
        let s = self.clients[c.index()].session.take().expect("active");
        if s.listed {
            self.proxies[proxy_id.index()].remove_member(s.video, c)?;
        }
        self.signal(q, c, Endpoint::Proxy(proxy_id))
    }

    fn on_departure(&mut self, c: ClientId, q: &mut EventQueue) -> Result<(), SimError> {
        let s = self.session(c).expect("checked by dispatcher");
        if s.phase == Phase::RelayOnly || s.has_all_chunks() {
            return Ok(());
        }
        self.metrics.chain.early_departures += 1;
        self.depart(c, None, q)
    }

    fn check_links(&self) -> Result<(), SimError> {
        for p in &self.proxies {
            p.check()?;
        }
        for c in &self.clients {
            if c.uplink.in_use() > c.uplink.slots() {
                return Err(SimError::InvariantViolation(format!(
                    "uplink of {} over capacity",
                    c.id
                )));
            }
        }
        Ok(())
    }

    fn check_cache_bounds(&self) -> Result<(), SimError> {
        for p in &self.proxies {
            p.cache.check()?;
        }
        Ok(())
    }

    /// Closes every open feed at the horizon and checks nothing leaked.
    fn teardown(&mut self) -> Result<(), SimError> {
        for i in 0..self.clients.len() {
            if self.clients[i].session.is_some() {
                self.detach_upstream(ClientId(i as u32))?;
            }
        }
        let leaked: u64 = self
            .proxies
            .iter()
            .map(|p| (p.pc_link.in_use() + p.sp_link.in_use()) as u64)
            .chain(self.clients.iter().map(|c| c.uplink.in_use() as u64))
            .sum();
        if leaked > 0 {
            return Err(SimError::TokenLeak(leaked));
        }
        Ok(())
    }
}

impl Handler for Simulation {
    type Error = SimError;

    fn handle(&mut self, event: Event, q: &mut EventQueue) -> Result<(), SimError> {
        self.trace.record(&event);
        match (event.kind, event.payload) {
            (EventKind::RequestArrival, Payload::Request { index }) => self.on_request(index, q)?,
            (EventKind::BandwidthTick, Payload::Tick) => {
                self.check_links()?;
                let next = q.clock().plus(self.tick_ms());
                if next <= self.t_end {
                    q.schedule(next, EventKind::BandwidthTick, Payload::Tick)?;
                }
            }
            (EventKind::TerminationSignal, Payload::Termination { .. }) => {
                self.metrics.chain.termination_signals += 1;
            }
            (
                kind,
                Payload::Session {
                    client,
                    session,
                    epoch,
                },
            ) => match kind {
                // Handshake markers only shape the trace and the start time.
                EventKind::HandshakeMsg | EventKind::OkStart => {}
                EventKind::ChunkDelivery if self.is_current(client, session, Some(epoch)) => {
                    self.on_chunk(client, q)?
                }
                EventKind::StreamEnd if self.is_current(client, session, Some(epoch)) => {
                    self.on_stream_end(client, q)?
                }
                EventKind::ClientDeparture if self.is_current(client, session, None) => {
                    self.on_departure(client, q)?
                }
                _ => {}
            },
            (kind, payload) => {
                return Err(SimError::InvariantViolation(format!(
                    "{} carried an unexpected payload {payload:?}",
                    kind.as_str()
                )))
            }
        }
        if self.cfg.audit {
            self.check_cache_bounds()?;
        }
        Ok(())
    }
}

/// Runs one scenario end to end.
pub fn simulate(cfg: &ScenarioConfig, keep_trace: bool) -> Result<RunOutput, SimError> {
    Simulation::new(cfg, keep_trace).run()
}
