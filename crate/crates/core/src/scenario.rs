//! Scenario execution and export: single runs, seed sweeps, and paired
//! chaining-versus-baseline comparison.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{Mode, ScenarioConfig};
use crate::error::SimError;
use crate::metrics::{series_csv, Report};
use crate::sim::{simulate, RunOutput};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Compare(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write(path: &Path, contents: &str) -> Result<(), ScenarioError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn summary_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Writes `summary.json`, `series.csv` and, when kept, `trace.tsv`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write(&dir.join("summary.json"), &summary_json(&out.report))?;
    write(&dir.join("series.csv"), &series_csv(&out.report.series))?;
    if let Some(lines) = &out.trace_lines {
        let mut t = String::from("fire_at_ms\tseq\tkind\tpayload\n");
        for l in lines {
            t.push_str(l);
            t.push('\n');
        }
        write(&dir.join("trace.tsv"), &t)?;
    }
    Ok(())
}

/// Runs `cfg` as given and writes its outputs into `out` if set.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    out: Option<&Path>,
    keep_trace: bool,
) -> Result<RunOutput, ScenarioError> {
    let result = simulate(cfg, keep_trace)?;
    if let Some(dir) = out {
        write_outputs(dir, &result)?;
    }
    Ok(result)
}

/// Same workload as `cfg`, served without chaining.
pub fn run_baseline(
    cfg: &ScenarioConfig,
    out: Option<&Path>,
    keep_trace: bool,
) -> Result<RunOutput, ScenarioError> {
    let cfg = ScenarioConfig {
        mode: Mode::Baseline,
        ..cfg.clone()
    };
    run_scenario(&cfg, out, keep_trace)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub requests: f64,
    pub rejected: f64,
    pub rejection_ratio: f64,
    pub avg_delay_ms: f64,
    pub sp_units_total: f64,
    pub chained: f64,
    pub splices: f64,
    pub proxy_fallbacks: f64,
    pub drops: f64,
}

const SWEEP_COLUMNS: [&str; 9] = [
    "requests",
    "rejected",
    "rejection_ratio",
    "avg_delay_ms",
    "sp_units_total",
    "chained",
    "splices",
    "proxy_fallbacks",
    "drops",
];

impl SweepRow {
    pub fn from_report(r: &Report) -> Self {
        Self {
            seed: r.seed,
            requests: r.requests as f64,
            rejected: r.rejected as f64,
            rejection_ratio: r.rejection_ratio.unwrap_or(0.0),
            avg_delay_ms: r.avg_delay_ms.unwrap_or(0.0),
            sp_units_total: r.sp_units_total,
            chained: r.outcomes.chained as f64,
            splices: r.chain.splices as f64,
            proxy_fallbacks: r.chain.proxy_fallbacks as f64,
            drops: r.chain.drops as f64,
        }
    }

    fn values(&self) -> [f64; 9] {
        [
            self.requests,
            self.rejected,
            self.rejection_ratio,
            self.avg_delay_ms,
            self.sp_units_total,
            self.chained,
            self.splices,
            self.proxy_fallbacks,
            self.drops,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub mode: Mode,
    /// Sorted by seed.
    pub rows: Vec<SweepRow>,
    pub mean: [f64; 9],
    /// Sample standard deviation; zero for a single seed.
    pub stddev: [f64; 9],
}

impl SweepTable {
    pub fn from_rows(mode: Mode, mut rows: Vec<SweepRow>) -> Self {
        rows.sort_by_key(|r| r.seed);
        let n = rows.len() as f64;
        let mut mean = [0.0; 9];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.values()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut stddev = [0.0; 9];
        if rows.len() > 1 {
            for r in &rows {
                for ((s, v), m) in stddev.iter_mut().zip(r.values()).zip(mean) {
                    *s += (v - m) * (v - m);
                }
            }
            stddev.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
        }
        Self {
            mode,
            rows,
            mean,
            stddev,
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        SWEEP_COLUMNS.iter().position(|c| *c == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("seed,{}\n", SWEEP_COLUMNS.join(","));
        let line = |label: String, vals: [f64; 9]| {
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            format!("{label},{}\n", cells.join(","))
        };
        for r in &self.rows {
            out.push_str(&line(r.seed.to_string(), r.values()));
        }
        out.push_str(&line("mean".into(), self.mean));
        out.push_str(&line("stddev".into(), self.stddev));
        out
    }
}

/// Runs `cfg` once per seed in parallel. With `out`, each run writes into
/// `out/<mode>/seed-<n>/` and the table goes to `out/<mode>/sweep.csv`.
pub fn sweep(
    cfg: &ScenarioConfig,
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<(SweepTable, Vec<Report>), ScenarioError> {
    let mode_dir: Option<PathBuf> = out.map(|o| o.join(cfg.mode.as_str()));
    let mut reports: Vec<Report> = seeds
        .par_iter()
        .map(|&seed| {
            let c = ScenarioConfig {
                seed,
                ..cfg.clone()
            };
            let dir = mode_dir.as_ref().map(|d| d.join(format!("seed-{seed}")));
            run_scenario(&c, dir.as_deref(), false).map(|o| o.report)
        })
        .collect::<Result<_, _>>()?;
    reports.sort_by_key(|r| r.seed);
    let table = SweepTable::from_rows(cfg.mode, reports.iter().map(SweepRow::from_report).collect());
    if let Some(d) = &mode_dir {
        write(&d.join("sweep.csv"), &table.to_csv())?;
    }
    Ok((table, reports))
}

/// One-sided sign test: probability of at least `wins` successes out of
/// `wins + losses` fair coin flips. Ties are discarded beforehand.
pub fn sign_test_p(wins: u64, losses: u64) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    // ln C(n, k) built up incrementally to stay finite for large n.
    let mut ln_c = 0.0f64;
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut p = 0.0;
    for k in 0..=n {
        if k > 0 {
            ln_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            p += (ln_c + ln_half_n).exp();
        }
    }
    p.min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricComparison {
    pub metric: String,
    pub chaining_mean: f64,
    pub baseline_mean: f64,
    pub mean_delta: f64,
    /// Seeds where chaining is strictly lower.
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    pub sign_test_p: f64,
}

impl MetricComparison {
    /// Chaining mean strictly lower and the sign test significant at `alpha`.
    pub fn chaining_dominates(&self, alpha: f64) -> bool {
        self.chaining_mean < self.baseline_mean && self.sign_test_p < alpha
    }
}

type Extract = fn(&Report) -> f64;

const COMPARED: [(&str, Extract); 3] = [
    ("rejection_ratio", |r| r.rejection_ratio.unwrap_or(0.0)),
    ("sp_units_total", |r| r.sp_units_total),
    ("avg_delay_ms", |r| r.avg_delay_ms.unwrap_or(0.0)),
];

/// Pairs reports by seed and compares each metric, lower being better.
pub fn paired_compare(
    chaining: &[Report],
    baseline: &[Report],
) -> Result<Vec<MetricComparison>, ScenarioError> {
    let mut pairs = Vec::new();
    for c in chaining {
        let b = baseline
            .iter()
            .find(|b| b.seed == c.seed)
            .ok_or_else(|| ScenarioError::Compare(format!("no baseline run for seed {}", c.seed)))?;
        if b.request_digest != c.request_digest {
            return Err(ScenarioError::Compare(format!(
                "seed {} pairs runs with different workloads",
                c.seed
            )));
        }
        pairs.push((c, b));
    }
    if pairs.is_empty() {
        return Err(ScenarioError::Compare("no paired seeds".into()));
    }
    pairs.sort_by_key(|(c, _)| c.seed);
    let n = pairs.len() as f64;
    Ok(COMPARED
        .iter()
        .map(|(name, f)| {
            let (mut wins, mut losses, mut ties) = (0, 0, 0);
            let (mut sc, mut sb) = (0.0, 0.0);
            for (c, b) in &pairs {
                let (x, y) = (f(c), f(b));
                sc += x;
                sb += y;
                match x.partial_cmp(&y) {
                    Some(std::cmp::Ordering::Less) => wins += 1,
                    Some(std::cmp::Ordering::Greater) => losses += 1,
                    _ => ties += 1,
                }
            }
            MetricComparison {
                metric: name.to_string(),
                chaining_mean: sc / n,
                baseline_mean: sb / n,
                mean_delta: (sc - sb) / n,
                wins,
                losses,
                ties,
                sign_test_p: sign_test_p(wins, losses),
            }
        })
        .collect())
}

fn read_reports(dir: &Path) -> Result<Vec<Report>, ScenarioError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let summary = path.join("summary.json");
        if !summary.is_file() {
            continue;
        }
        let text = fs::read_to_string(&summary).map_err(|e| io_err(&summary, e))?;
        out.push(serde_json::from_str(&text).map_err(|e| io_err(&summary, e))?);
    }
    Ok(out)
}

pub fn comparison_csv(rows: &[MetricComparison]) -> String {
    let mut out = String::from(
        "metric,chaining_mean,baseline_mean,mean_delta,wins,losses,ties,sign_test_p\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{},{},{},{:.6e}\n",
            r.metric,
            r.chaining_mean,
            r.baseline_mean,
            r.mean_delta,
            r.wins,
            r.losses,
            r.ties,
            r.sign_test_p
        ));
    }
    out
}

/// Reads `dir/chaining` and `dir/baseline` sweep outputs and writes
/// `dir/compare.csv`.
pub fn compare(dir: &Path) -> Result<Vec<MetricComparison>, ScenarioError> {
    let chaining = read_reports(&dir.join(Mode::Chaining.as_str()))?;
    let baseline = read_reports(&dir.join(Mode::Baseline.as_str()))?;
    let rows = paired_compare(&chaining, &baseline)?;
    write(&dir.join("compare.csv"), &comparison_csv(&rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Binomial, DiscreteCDF};

    #[test]
    fn sign_test_matches_binomial_tail() {
        for (w, l) in [(20, 0), (15, 5), (10, 10), (3, 17), (0, 0), (60, 40)] {
            let n = w + l;
            let expected = if n == 0 || w == 0 {
                1.0
            } else {
                Binomial::new(0.5, n).unwrap().sf(w - 1)
            };
            let got = sign_test_p(w, l);
            assert!((got - expected).abs() < 1e-9, "{w}/{l}: {got} vs {expected}");
        }
        // 20 of 20: 2^-20.
        assert!((sign_test_p(20, 0) - 2f64.powi(-20)).abs() < 1e-15);
    }

    fn row(seed: u64, v: f64) -> SweepRow {
        SweepRow {
            seed,
            requests: v,
            rejected: v,
            rejection_ratio: v,
            avg_delay_ms: v,
            sp_units_total: v,
            chained: v,
            splices: v,
            proxy_fallbacks: v,
            drops: v,
        }
    }

    #[test]
    fn single_seed_aggregate_is_the_run() {
        let t = SweepTable::from_rows(Mode::Chaining, vec![row(3, 7.5)]);
        assert_eq!(t.mean, [7.5; 9]);
        assert_eq!(t.stddev, [0.0; 9]);
    }

    #[test]
    fn aggregates_ignore_seed_order() {
        let a = SweepTable::from_rows(Mode::Chaining, vec![row(1, 1.0), row(2, 2.0), row(3, 6.0)]);
        let b = SweepTable::from_rows(Mode::Chaining, vec![row(3, 6.0), row(1, 1.0), row(2, 2.0)]);
        assert_eq!(a, b);
        assert_eq!(a.mean[0], 3.0);
        // Sample stddev of {1, 2, 6}.
        assert!((a.stddev[0] - 7f64.sqrt()).abs() < 1e-12);
        assert!(a.to_csv().contains("\nmean,3.000000,"));
    }
}
