//! Request process and popularity model.
//!
//! Arrivals are Poisson per proxy, video choice is Zipf-like over the catalog,
//! and each proxy keeps a sliding-window estimate of how often each video was
//! requested. That share, clamped into a band, sizes the cached prefix.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::ids::{ClientId, ProxyId, VideoId};
use crate::kernel::{SimTime, MS_PER_MINUTE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub id: VideoId,
    pub duration_min: u32,
    /// Data units per hour of playback.
    pub playback_rate: u32,
    pub rank: u32,
}

#[derive(Clone, Debug)]
pub struct Catalog {
    videos: Vec<Video>,
    pmf: Vec<f64>,
}

impl Catalog {
    /// Builds a catalog whose rank equals its id, with durations drawn
    /// uniformly from `[min_minutes, max_minutes]`.
    pub fn generate<R: Rng>(
        n: usize,
        min_minutes: u32,
        max_minutes: u32,
        playback_rate: u32,
        skew: f64,
        rng: &mut R,
    ) -> Self {
        let videos = (1..=n as u32)
            .map(|i| Video {
                id: VideoId(i),
                duration_min: rng.random_range(min_minutes..=max_minutes),
                playback_rate,
                rank: i,
            })
            .collect();
        Self {
            videos,
            pmf: zipf_pmf(n, skew),
        }
    }

    pub fn from_videos(videos: Vec<Video>, skew: f64) -> Self {
        let pmf = zipf_pmf(videos.len(), skew);
        Self { videos, pmf }
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn video(&self, id: VideoId) -> &Video {
        &self.videos[id.index()]
    }

    pub fn videos(&self) -> &[Video] {
        &self.videos
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn total_minutes(&self) -> u64 {
        self.videos.iter().map(|v| v.duration_min as u64).sum()
    }
}

/// Zipf-like probabilities `p_k ∝ 1 / k^skew` for ranks `1..=n`.
pub fn zipf_pmf(n: usize, skew: f64) -> Vec<f64> {
    assert!(n >= 1, "catalog must hold at least one video");
    let weights: Vec<f64> = (1..=n).map(|k| (k as f64).powf(-skew)).collect();
    let norm: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / norm).collect()
}

/// Inverse-CDF sampler over a probability vector.
#[derive(Clone, Debug)]
pub struct VideoPicker {
    cdf: Vec<f64>,
}

impl VideoPicker {
    pub fn new(pmf: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        Self { cdf }
    }

    pub fn pick<R: Rng>(&self, rng: &mut R) -> VideoId {
        let u: f64 = rng.random();
        let idx = self.cdf.partition_point(|&c| c <= u);
        VideoId(idx.min(self.cdf.len() - 1) as u32 + 1)
    }
}

/// Exponential inter-arrival time in minutes for `lambda` requests per hour.
pub fn next_arrival<R: Rng>(lambda_per_hour: f64, rng: &mut R) -> f64 {
    Exp::new(lambda_per_hour / 60.0)
        .expect("arrival rate must be positive")
        .sample(rng)
}

/// One client request, fixed before the run starts so that paired runs
/// replay the identical workload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub client: ClientId,
    pub proxy: ProxyId,
    pub video: VideoId,
    pub arrived_at: SimTime,
    /// Milliseconds after arrival at which the viewer abandons the video, if
    /// they abandon it at all.
    pub leave_after_ms: Option<u64>,
}

pub struct WorkloadParams {
    pub proxies: u32,
    pub clients_per_proxy: u32,
    pub lambda_per_hour: f64,
    pub duration: SimTime,
    pub early_departure_prob: f64,
}

/// Generates every proxy's Poisson request stream for the whole run, merged
/// in arrival order.
pub fn generate_requests<R: Rng>(
    params: &WorkloadParams,
    catalog: &Catalog,
    rng: &mut R,
) -> Vec<Request> {
    let picker = VideoPicker::new(catalog.pmf());
    let mut out = Vec::new();
    for p in 0..params.proxies {
        let mut t_min = 0.0;
        loop {
            t_min += next_arrival(params.lambda_per_hour, rng);
            let at = SimTime((t_min * MS_PER_MINUTE as f64).round() as u64);
            if at > params.duration {
                break;
            }
            let video = picker.pick(rng);
            let local = rng.random_range(0..params.clients_per_proxy);
            // Drawn for every request so the stream does not depend on the outcome.
            let leave: f64 = rng.random();
            let frac: f64 = rng.random();
            let s = catalog.video(video).duration_min as f64;
            let leave_after_ms = (leave < params.early_departure_prob)
                .then_some((frac * s * MS_PER_MINUTE as f64) as u64);
            out.push(Request {
                client: ClientId(p * params.clients_per_proxy + local),
                proxy: ProxyId(p),
                video,
                arrived_at: at,
                leave_after_ms,
            });
        }
    }
    out.sort_by_key(|r| (r.arrived_at, r.proxy));
    out
}

/// Clamp band for the popularity share so that `0 < x < 1` holds strictly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClampBand {
    pub min: f64,
    pub max: f64,
}

impl ClampBand {
    pub fn apply(&self, x: f64) -> f64 {
        x.clamp(self.min, self.max)
    }
}

/// Sliding-window request counter for one proxy.
#[derive(Clone, Debug)]
pub struct PopularityTracker {
    window_ms: u64,
    entries: VecDeque<(SimTime, VideoId)>,
    counts: Vec<u32>,
    band: ClampBand,
    prior: Vec<f64>,
}

impl PopularityTracker {
    /// `prior` is used while the window is empty.
    pub fn new(window_minutes: u64, band: ClampBand, prior: Vec<f64>) -> Self {
        Self {
            window_ms: window_minutes * MS_PER_MINUTE,
            entries: VecDeque::new(),
            counts: vec![0; prior.len()],
            band,
            prior,
        }
    }

    pub fn observe(&mut self, video: VideoId, arrived_at: SimTime, now: SimTime) {
        debug_assert!(arrived_at <= now);
        // Requests reach the tracker in arrival order.
        self.entries.push_back((arrived_at, video));
        self.counts[video.index()] += 1;
        self.prune(now);
    }

    fn prune(&mut self, now: SimTime) {
        let cutoff = now.ms().saturating_sub(self.window_ms);
        while let Some(&(t, v)) = self.entries.front() {
            if t.ms() >= cutoff {
                break;
            }
            self.entries.pop_front();
            self.counts[v.index()] -= 1;
        }
    }

    pub fn total(&mut self, now: SimTime) -> u32 {
        self.prune(now);
        self.entries.len() as u32
    }

    pub fn count(&mut self, video: VideoId, now: SimTime) -> u32 {
        self.prune(now);
        self.counts[video.index()]
    }

    /// Unclamped frequency share of `video`, or `None` when the window is empty.
    pub fn share(&mut self, video: VideoId, now: SimTime) -> Option<f64> {
        let total = self.total(now);
        (total > 0).then(|| self.counts[video.index()] as f64 / total as f64)
    }

    /// Popularity `x` of the video, clamped into the configured band.
    pub fn x_of(&mut self, video: VideoId, now: SimTime) -> f64 {
        let raw = self
            .share(video, now)
            .unwrap_or_else(|| self.prior[video.index()]);
        self.band.apply(raw)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = &(SimTime, VideoId)> {
        self.entries.iter()
    }
}

/// Prefix length in whole minutes: `floor(x * s)`, at least one minute and
/// strictly shorter than the video.
pub fn prefix_minutes(x: f64, s: u32) -> u32 {
    debug_assert!(x > 0.0 && x < 1.0 && s > 0);
    let w = (x * s as f64).floor() as u32;
    w.max(1).min(s.saturating_sub(1).max(1))
}
