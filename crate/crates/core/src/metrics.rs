//! Outcome, delay and server-link accounting, and the per-run report.

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::kernel::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    NewStream,
    Chained,
    MissCached,
    MissUncached,
    RejectedBuffer,
    RejectedLink,
}

impl Outcome {
    pub fn is_rejection(self) -> bool {
        matches!(self, Outcome::RejectedBuffer | Outcome::RejectedLink)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub new_stream: u64,
    pub chained: u64,
    pub miss_cached: u64,
    pub miss_uncached: u64,
    pub rejected_buffer: u64,
    pub rejected_link: u64,
}

impl OutcomeCounts {
    fn bump(&mut self, o: Outcome) {
        *match o {
            Outcome::NewStream => &mut self.new_stream,
            Outcome::Chained => &mut self.chained,
            Outcome::MissCached => &mut self.miss_cached,
            Outcome::MissUncached => &mut self.miss_uncached,
            Outcome::RejectedBuffer => &mut self.rejected_buffer,
            Outcome::RejectedLink => &mut self.rejected_link,
        } += 1;
    }

    pub fn total(&self) -> u64 {
        self.new_stream
            + self.chained
            + self.miss_cached
            + self.miss_uncached
            + self.rejected_buffer
            + self.rejected_link
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub splices: u64,
    pub proxy_fallbacks: u64,
    pub drops: u64,
    pub stall_ms: u64,
    pub failovers: u64,
    pub early_departures: u64,
    pub switch_departures: u64,
    pub termination_signals: u64,
    pub completed_streams: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub minute: u64,
    pub rejections: u64,
    pub cum_rejection_ratio: Option<f64>,
    pub avg_delay_ms: Option<f64>,
    pub sp_units: f64,
}

#[derive(Clone, Copy, Debug, Default)]
struct Bucket {
    requests: u64,
    rejections: u64,
    delay_sum: u64,
    delay_count: u64,
    sp_rate_minutes: u64,
}

/// Running totals for one simulation run.
#[derive(Clone, Debug)]
pub struct MetricsLedger {
    outcomes: OutcomeCounts,
    started: Vec<bool>,
    delay_sum_ms: u128,
    delay_count: u64,
    /// Server-link transfer in minutes of video times playback rate per
    /// hour; divide by 60 for units.
    sp_rate_minutes: u64,
    buckets: Vec<Bucket>,
    pub chain: ChainStats,
}

impl MetricsLedger {
    pub fn new(requests: usize, duration: SimTime) -> Self {
        Self {
            outcomes: OutcomeCounts::default(),
            started: vec![false; requests],
            delay_sum_ms: 0,
            delay_count: 0,
            sp_rate_minutes: 0,
            buckets: vec![Bucket::default(); duration.minute() as usize + 1],
            chain: ChainStats::default(),
        }
    }

    fn bucket(&mut self, now: SimTime) -> &mut Bucket {
        let i = (now.minute() as usize).min(self.buckets.len() - 1);
        &mut self.buckets[i]
    }

    pub fn record_outcome(&mut self, outcome: Outcome, now: SimTime) {
        self.outcomes.bump(outcome);
        let b = self.bucket(now);
        b.requests += 1;
        if outcome.is_rejection() {
            b.rejections += 1;
        }
    }

    /// Records the service delay of an admitted request; one per request.
    pub fn record_start(&mut self, request: u32, delay_ms: u64, now: SimTime) -> Result<(), SimError> {
        let slot = self
            .started
            .get_mut(request as usize)
            .ok_or(SimError::DuplicateStart(request))?;
        if *slot {
            return Err(SimError::DuplicateStart(request));
        }
        *slot = true;
        self.delay_sum_ms += delay_ms as u128;
        self.delay_count += 1;
        let b = self.bucket(now);
        b.delay_sum += delay_ms;
        b.delay_count += 1;
        Ok(())
    }

    /// One minute of video at `rate_per_hour` crossed the server-proxy link.
    pub fn record_sp(&mut self, rate_per_hour: u32, now: SimTime) {
        self.sp_rate_minutes += rate_per_hour as u64;
        self.bucket(now).sp_rate_minutes += rate_per_hour as u64;
    }

    pub fn outcomes(&self) -> OutcomeCounts {
        self.outcomes
    }

    pub fn sp_rate_minutes(&self) -> u64 {
        self.sp_rate_minutes
    }

    pub fn sp_units(&self) -> f64 {
        self.sp_rate_minutes as f64 / 60.0
    }

    pub fn requests(&self) -> u64 {
        self.outcomes.total()
    }

    pub fn rejected(&self) -> u64 {
        self.outcomes.rejected_buffer + self.outcomes.rejected_link
    }

    pub fn served(&self) -> u64 {
        self.requests() - self.rejected()
    }

    /// `None` when nothing was requested.
    pub fn rejection_ratio(&self) -> Option<f64> {
        let r = self.requests();
        (r > 0).then(|| self.rejected() as f64 / r as f64)
    }

    pub fn service_efficiency(&self) -> Option<f64> {
        let r = self.requests();
        (r > 0).then(|| self.served() as f64 / r as f64)
    }

    pub fn avg_delay_ms(&self) -> Option<f64> {
        (self.delay_count > 0).then(|| self.delay_sum_ms as f64 / self.delay_count as f64)
    }

    pub fn delay_count(&self) -> u64 {
        self.delay_count
    }

    pub fn series(&self) -> Vec<SeriesRow> {
        let mut cum_req = 0;
        let mut cum_rej = 0;
        self.buckets
            .iter()
            .enumerate()
            .map(|(m, b)| {
                cum_req += b.requests;
                cum_rej += b.rejections;
                SeriesRow {
                    minute: m as u64,
                    rejections: b.rejections,
                    cum_rejection_ratio: (cum_req > 0).then(|| cum_rej as f64 / cum_req as f64),
                    avg_delay_ms: (b.delay_count > 0)
                        .then(|| b.delay_sum as f64 / b.delay_count as f64),
                    sp_units: b.sp_rate_minutes as f64 / 60.0,
                }
            })
            .collect()
    }
}

/// Run-level facts gathered outside the ledger.
#[derive(Clone, Debug, Default)]
pub struct RunMeta {
    pub mode: String,
    pub seed: u64,
    pub duration: SimTime,
    pub requests_dispatched: u64,
    pub sp_audit_rate_minutes: u64,
    pub cache_minutes: u32,
    pub peak_cache_minutes: u32,
    pub verified_ledgers: u64,
    pub events: u64,
    pub request_digest: String,
    pub trace_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub seed: u64,
    pub duration_minutes: u64,
    pub requests: u64,
    pub served: u64,
    pub rejected: u64,
    pub service_efficiency: Option<f64>,
    pub rejection_ratio: Option<f64>,
    pub avg_delay_ms: Option<f64>,
    pub sp_units_total: f64,
    pub sp_units_per_minute: f64,
    pub sp_rate_minutes: u64,
    pub sp_audit_rate_minutes: u64,
    pub outcomes: OutcomeCounts,
    pub chain: ChainStats,
    pub cache_minutes: u32,
    pub peak_cache_minutes: u32,
    pub verified_ledgers: u64,
    pub events: u64,
    pub request_digest: String,
    pub trace_digest: String,
    #[serde(skip)]
    pub series: Vec<SeriesRow>,
}

/// Closes the ledger into a report, checking that every dispatched request
/// has exactly one outcome and every served one a start.
pub fn finalize(ledger: &MetricsLedger, meta: RunMeta) -> Result<Report, SimError> {
    let r = ledger.requests();
    if r != meta.requests_dispatched {
        return Err(SimError::LedgerInconsistent(format!(
            "{} outcomes for {} dispatched requests",
            r, meta.requests_dispatched
        )));
    }
    if ledger.served() + ledger.rejected() != r || ledger.delay_count() != ledger.served() {
        return Err(SimError::LedgerInconsistent(format!(
            "R={} Q={} N_rej={} starts={}",
            r,
            ledger.served(),
            ledger.rejected(),
            ledger.delay_count()
        )));
    }
    let minutes = meta.duration.minute().max(1);
    Ok(Report {
        mode: meta.mode,
        seed: meta.seed,
        duration_minutes: meta.duration.minute(),
        requests: r,
        served: ledger.served(),
        rejected: ledger.rejected(),
        service_efficiency: ledger.service_efficiency(),
        rejection_ratio: ledger.rejection_ratio(),
        avg_delay_ms: ledger.avg_delay_ms(),
        sp_units_total: ledger.sp_units(),
        sp_units_per_minute: ledger.sp_units() / minutes as f64,
        sp_rate_minutes: ledger.sp_rate_minutes(),
        sp_audit_rate_minutes: meta.sp_audit_rate_minutes,
        outcomes: ledger.outcomes(),
        chain: ledger.chain,
        cache_minutes: meta.cache_minutes,
        peak_cache_minutes: meta.peak_cache_minutes,
        verified_ledgers: meta.verified_ledgers,
        events: meta.events,
        request_digest: meta.request_digest,
        trace_digest: meta.trace_digest,
        series: ledger.series(),
    })
}

pub fn series_csv(rows: &[SeriesRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from("minute,rejections,cum_rejection_ratio,avg_delay_ms,sp_units\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4}\n",
            r.minute,
            r.rejections,
            opt(r.cum_rejection_ratio),
            opt(r.avg_delay_ms),
            r.sp_units
        ));
    }
    out
}
