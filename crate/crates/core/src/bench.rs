//! Scaling benchmark: wall time and probe-counted transient memory of one
//! attention forward+backward step versus sequence length.
//!
//! "Memory" is the instrumented element count from [`crate::probe`], not
//! OS RSS — deterministic and portable. Runs that would exceed the
//! configured element budget are recorded as explicit exceeded-budget
//! rows (with the closed-form estimate in the peak column) instead of
//! being attempted, mirroring how oversized quadratic runs simply do not
//! fit on real hardware.

use std::path::Path;
use std::time::Instant;

use crate::attention::{self, Mechanism, SeqNormAffine};
use crate::error::{Error, Result};
use crate::kernels;
use crate::probe::{self, ProbeSnapshot};
use crate::rng::Stream;
use crate::scalar::Element;
use crate::tensor::Graph;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub mechanisms: Vec<Mechanism>,
    pub seq_lens: Vec<usize>,
    /// Inner dimension D.
    pub dim: usize,
    /// Head count J.
    pub heads: usize,
    pub batch: usize,
    /// Timed repetitions per point (median is reported).
    pub reps: usize,
    /// Untimed warmup runs per point.
    pub warmups: usize,
    /// Skip runs whose estimated peak exceeds this many elements.
    pub element_budget: Option<usize>,
    pub seed: u64,
    /// Pin single-worker execution while timing.
    pub deterministic: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mechanisms: Mechanism::ALL.to_vec(),
            seq_lens: vec![256, 512, 1024, 2048, 4096],
            dim: 512,
            heads: 8,
            batch: 1,
            reps: 5,
            warmups: 2,
            element_budget: Some(1_000_000_000),
            seed: 0,
            deterministic: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::Config("reps must be at least 3".into()));
        }
        if self.mechanisms.is_empty() || self.seq_lens.is_empty() {
            return Err(Error::Config("nothing to benchmark".into()));
        }
        if self.seq_lens.iter().any(|&n| n == 0) {
            return Err(Error::Config("sequence lengths must be positive".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 || self.batch == 0 {
            return Err(Error::Config("dim must be positive and divisible by heads".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchStatus {
    Ok,
    ExceededBudget,
}

impl BenchStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchStatus::Ok => "ok",
            BenchStatus::ExceededBudget => "exceeded-budget",
        }
    }
}

impl std::str::FromStr for BenchStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(BenchStatus::Ok),
            "exceeded-budget" => Ok(BenchStatus::ExceededBudget),
            other => Err(Error::Config(format!("unknown bench status {other:?}"))),
        }
    }
}

/// One scaling measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub n: usize,
    pub d: usize,
    pub j: usize,
    pub batch: usize,
    pub reps: usize,
    pub median_seconds: f64,
    /// Probe-counted peak live elements during one forward+backward
    /// (closed-form estimate for exceeded-budget rows).
    pub peak_elements: usize,
    pub status: BenchStatus,
    /// Unix seconds; 0 in deterministic mode. Not part of the CSV.
    pub timestamp: u64,
    /// Peak of the mechanism-core term (score matrix / key-value
    /// product). Not part of the CSV.
    pub core_peak_elements: usize,
}

/// Closed-form upper bound on probe-counted peak elements for one
/// forward+backward, derived from the ops each mechanism performs
/// (node data plus gradient buffers).
pub fn estimate_peak_elements(
    mechanism: Mechanism,
    batch: usize,
    n: usize,
    d: usize,
    heads: usize,
) -> usize {
    let dh = d / heads;
    match mechanism {
        // scores + softmax (+ their gradients) dominate: 4 * B*J*N^2
        Mechanism::Vanilla => 4 * batch * heads * n * n + 32 * batch * n * d + 1024,
        // everything is O(N*D) except the (D/J)^2 key-value core
        Mechanism::SeqNormFree => {
            2 * batch * heads * dh * dh + 64 * batch * n * d + 32 * batch * d + 4096
        }
        Mechanism::SimA => {
            2 * batch * heads * dh * dh + 48 * batch * n * d + 32 * batch * d + 4096
        }
    }
}

/// Exact size of the mechanism-core intermediate the probe tags.
pub fn core_term_elements(mechanism: Mechanism, batch: usize, n: usize, d: usize, heads: usize) -> usize {
    match mechanism {
        Mechanism::Vanilla => batch * heads * n * n,
        Mechanism::SeqNormFree | Mechanism::SimA => batch * heads * (d / heads) * (d / heads),
    }
}

fn run_once<T: Element>(
    mechanism: Mechanism,
    batch: usize,
    n: usize,
    d: usize,
    heads: usize,
    seed: u64,
) -> Result<()> {
    let mut s = Stream::new(seed);
    let mut randn = |count: usize| -> Vec<T> {
        (0..count).map(|_| T::from_f64(s.gaussian()).unwrap()).collect()
    };
    let g: Graph<T> = Graph::new();
    let q = g.leaf(randn(batch * n * d), &[batch, n, d], true)?;
    let k = g.leaf(randn(batch * n * d), &[batch, n, d], true)?;
    let v = g.leaf(randn(batch * n * d), &[batch, n, d], true)?;
    let out = match mechanism {
        Mechanism::Vanilla => attention::vanilla_attention(&q, &k, &v, heads, None)?,
        Mechanism::SeqNormFree => {
            let affine = SeqNormAffine {
                gamma_q: g.leaf(vec![T::one(); d], &[d], true)?,
                beta_q: g.leaf(vec![T::zero(); d], &[d], true)?,
                gamma_k: g.leaf(vec![T::one(); d], &[d], true)?,
                beta_k: g.leaf(vec![T::zero(); d], &[d], true)?,
                gamma_v: g.leaf(vec![T::one(); d], &[d], true)?,
                beta_v: g.leaf(vec![T::zero(); d], &[d], true)?,
            };
            attention::seqnorm_attention(&q, &k, &v, &affine, heads, 1e-5, None)?
        }
        Mechanism::SimA => attention::sima_attention(&q, &k, &v, heads, 1e-5, None)?,
    };
    out.sum_all()?.backward()
}

/// One (mechanism, N) measurement: median wall time over `reps` timed
/// forward+backward steps after warmups, plus the probe snapshot.
fn bench_point<T: Element>(
    cfg: &BenchConfig,
    mechanism: Mechanism,
    n: usize,
) -> Result<(f64, ProbeSnapshot)> {
    let mut times = Vec::with_capacity(cfg.reps);
    let mut snapshot = ProbeSnapshot::default();
    for rep in 0..cfg.warmups + cfg.reps {
        let guard = probe::start();
        let t0 = Instant::now();
        run_once::<T>(mechanism, cfg.batch, n, cfg.dim, cfg.heads, cfg.seed)?;
        let elapsed = t0.elapsed().as_secs_f64();
        if rep >= cfg.warmups {
            times.push(elapsed);
            snapshot = guard.snapshot();
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((times[times.len() / 2], snapshot))
}

/// Runs the full grid at f32 (the training/benchmark precision).
pub fn bench_scaling(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let was_parallel = kernels::parallel_enabled();
    if cfg.deterministic {
        kernels::set_parallel(false);
    }
    let result = bench_scaling_inner::<f32>(cfg);
    kernels::set_parallel(was_parallel);
    result
}

fn bench_scaling_inner<T: Element>(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    let mut records = Vec::new();
    for &mechanism in &cfg.mechanisms {
        for &n in &cfg.seq_lens {
            let estimate = estimate_peak_elements(mechanism, cfg.batch, n, cfg.dim, cfg.heads);
            let timestamp = if cfg.deterministic {
                0
            } else {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            };
            if let Some(budget) = cfg.element_budget {
                if estimate > budget {
                    records.push(BenchRecord {
                        mechanism,
                        n,
                        d: cfg.dim,
                        j: cfg.heads,
                        batch: cfg.batch,
                        reps: cfg.reps,
                        median_seconds: 0.0,
                        peak_elements: estimate,
                        status: BenchStatus::ExceededBudget,
                        timestamp,
                        core_peak_elements: 0,
                    });
                    continue;
                }
            }
            let (median, snap) = bench_point::<T>(cfg, mechanism, n)?;
            records.push(BenchRecord {
                mechanism,
                n,
                d: cfg.dim,
                j: cfg.heads,
                batch: cfg.batch,
                reps: cfg.reps,
                median_seconds: median,
                peak_elements: snap.peak,
                status: BenchStatus::Ok,
                timestamp,
                core_peak_elements: snap.core_peak,
            });
        }
    }
    Ok(records)
}

/// Least-squares slope of log(time) against log(N) with its R².
/// Requires at least 4 distinct Ns spanning a 16x range among the
/// successfully measured rows.
pub fn fit_scaling_exponent(records: &[BenchRecord]) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.status == BenchStatus::Ok && r.median_seconds > 0.0)
        .map(|r| ((r.n as f64).ln(), r.median_seconds.ln()))
        .collect();
    let mut ns: Vec<usize> = records
        .iter()
        .filter(|r| r.status == BenchStatus::Ok)
        .map(|r| r.n)
        .collect();
    ns.sort_unstable();
    ns.dedup();
    if ns.len() < 4 {
        return Err(Error::InsufficientPoints(format!(
            "need >= 4 distinct sequence lengths, have {}",
            ns.len()
        )));
    }
    let (min, max) = (*ns.first().unwrap(), *ns.last().unwrap());
    if max < 16 * min {
        return Err(Error::InsufficientPoints(format!(
            "sequence lengths must span a 16x range, have {min}..{max}"
        )));
    }
    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - mean_y) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, r2))
}

pub const CSV_HEADER: &str = "mechanism,N,D,J,batch,reps,median_seconds,peak_elements,status";

pub fn emit_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:?},{},{}\n",
            r.mechanism,
            r.n,
            r.d,
            r.j,
            r.batch,
            r.reps,
            r.median_seconds,
            r.peak_elements,
            r.status.as_str()
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn parse_csv(path: &Path) -> Result<Vec<BenchRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Config(format!("bad bench CSV header: {other:?}")))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Config(format!("bench CSV line {} malformed", lineno + 2)));
        }
        let parse_int = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Config(format!("bad integer {s:?} on line {}", lineno + 2)))
        };
        records.push(BenchRecord {
            mechanism: f[0].parse()?,
            n: parse_int(f[1])?,
            d: parse_int(f[2])?,
            j: parse_int(f[3])?,
            batch: parse_int(f[4])?,
            reps: parse_int(f[5])?,
            median_seconds: f[6]
                .parse()
                .map_err(|_| Error::Config(format!("bad float {:?} on line {}", f[6], lineno + 2)))?,
            peak_elements: parse_int(f[7])?,
            status: f[8].parse()?,
            timestamp: 0,
            core_peak_elements: 0,
        });
    }
    Ok(records)
}

/// Writes the optional (N, seconds) companion file for external plotting.
pub fn emit_plot_pairs(records: &[BenchRecord], mechanism: Mechanism, path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records.iter().filter(|r| r.mechanism == mechanism && r.status == BenchStatus::Ok) {
        out.push_str(&format!("{} {:?}\n", r.n, r.median_seconds));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_records(f: impl Fn(usize) -> f64) -> Vec<BenchRecord> {
        [256usize, 512, 1024, 2048, 4096]
            .iter()
            .map(|&n| BenchRecord {
                mechanism: Mechanism::Vanilla,
                n,
                d: 512,
                j: 8,
                batch: 1,
                reps: 5,
                median_seconds: f(n),
                peak_elements: n,
                status: BenchStatus::Ok,
                timestamp: 0,
                core_peak_elements: 0,
            })
            .collect()
    }

    #[test]
    fn constructed_linear_times_give_slope_one() {
        let records = synthetic_records(|n| 3.5e-6 * n as f64);
        let (slope, r2) = fit_scaling_exponent(&records).unwrap();
        assert!((slope - 1.0).abs() <= 1e-12, "slope {slope}");
        assert!((r2 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn constructed_quadratic_times_give_slope_two() {
        let records = synthetic_records(|n| 1e-9 * (n * n) as f64);
        let (slope, _) = fit_scaling_exponent(&records).unwrap();
        assert!((slope - 2.0).abs() <= 1e-12, "slope {slope}");
    }

    #[test]
    fn fit_requires_enough_span() {
        let mut records = synthetic_records(|n| n as f64);
        records.truncate(3);
        assert!(matches!(fit_scaling_exponent(&records), Err(Error::InsufficientPoints(_))));

        let narrow: Vec<BenchRecord> = synthetic_records(|n| n as f64)
            .into_iter()
            .filter(|r| r.n <= 2048)
            .collect();
        assert!(matches!(fit_scaling_exponent(&narrow), Err(Error::InsufficientPoints(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        let mut records = synthetic_records(|n| 1e-6 * n as f64);
        records[4].status = BenchStatus::ExceededBudget;
        records[4].median_seconds = 0.0;
        emit_csv(&records, &path).unwrap();
        let back = parse_csv(&path).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.mechanism, b.mechanism);
            assert_eq!(a.n, b.n);
            assert_eq!(a.median_seconds, b.median_seconds);
            assert_eq!(a.peak_elements, b.peak_elements);
            assert_eq!(a.status, b.status);
        }
    }

    #[test]
    fn empty_record_list_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        emit_csv(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{CSV_HEADER}\n"));
        assert!(parse_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn budget_rows_are_emitted_without_running() {
        let cfg = BenchConfig {
            mechanisms: vec![Mechanism::Vanilla, Mechanism::SeqNormFree],
            seq_lens: vec![64, 512],
            dim: 64,
            heads: 8,
            batch: 1,
            reps: 3,
            warmups: 1,
            element_budget: Some(4_000_000),
            seed: 1,
            deterministic: true,
        };
        let records = bench_scaling(&cfg).unwrap();
        assert_eq!(records.len(), 4);
        // vanilla at N=512 needs ~4*8*512^2 = 8.4M elements > 4M
        let big_vanilla = records
            .iter()
            .find(|r| r.mechanism == Mechanism::Vanilla && r.n == 512)
            .unwrap();
        assert_eq!(big_vanilla.status, BenchStatus::ExceededBudget);
        // the linear mechanism fits everywhere
        assert!(records
            .iter()
            .filter(|r| r.mechanism == Mechanism::SeqNormFree)
            .all(|r| r.status == BenchStatus::Ok));
    }

    #[test]
    fn probe_counts_match_core_terms() {
        let cfg = BenchConfig {
            mechanisms: Mechanism::ALL.to_vec(),
            seq_lens: vec![64],
            dim: 64,
            heads: 8,
            batch: 1,
            reps: 3,
            warmups: 1,
            element_budget: None,
            seed: 2,
            deterministic: true,
        };
        let records = bench_scaling(&cfg).unwrap();
        for r in &records {
            let core = core_term_elements(r.mechanism, r.batch, r.n, r.d, r.j);
            assert_eq!(
                r.core_peak_elements, core,
                "{}: core term should be exact",
                r.mechanism
            );
            assert!(r.peak_elements >= core);
            let bound = estimate_peak_elements(r.mechanism, r.batch, r.n, r.d, r.j);
            assert!(
                r.peak_elements <= bound,
                "{}: measured {} exceeds closed-form bound {}",
                r.mechanism,
                r.peak_elements,
                bound
            );
        }
        // vanilla peak includes the J*N^2 score term
        let vanilla = records.iter().find(|r| r.mechanism == Mechanism::Vanilla).unwrap();
        assert!(vanilla.peak_elements >= 8 * 64 * 64);
    }
}
