//! Desk-scale experiments: estimator ranking fidelity, the stage-count and
//! uneven-split insights, and DAPPLE against GPipe.

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::estimate_latency;
use crate::model::{validate_phi, StageCostSequence};
use crate::simulator::{
    batch_latency, dapple_schedule, gpipe_schedule, injection_caps, optimize_phi, peak_activations, with_recompute,
    PhiStrategy, ScheduleKind,
};

#[derive(Debug, Clone, PartialEq)]
pub struct RankingConfig {
    pub pairs: u64,
    pub micro_batches: usize,
    pub phi: Vec<usize>,
    pub total_compute: f64,
    pub seed: u64,
    /// Share of each stage's time spent in the forward pass.
    pub fwd_fraction: f64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self { pairs: 100_000, micro_batches: 16, phi: vec![5, 3, 1], total_compute: 1.0, seed: 0, fwd_fraction: 1.0 / 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingReport {
    pub pairs_tested: u64,
    pub errors: u64,
    pub error_rate: f64,
    pub seed: u64,
}

impl RankingReport {
    pub fn to_table(&self) -> String {
        table(
            &["pairs_tested", "errors", "error_rate", "seed"],
            &[vec![self.pairs_tested.to_string(), self.errors.to_string(), format!("{:.6}", self.error_rate), self.seed.to_string()]],
        )
    }

    /// Appends one CSV row, writing the header first when `out` is empty.
    pub fn append_csv(&self, out: &mut std::fs::File) -> Result<()> {
        let io = |e: std::io::Error| Error::Invalid(format!("cannot write CSV log: {e}"));
        if out.metadata().map_err(io)?.len() == 0 {
            writeln!(out, "pairs_tested,errors,error_rate,seed").map_err(io)?;
        }
        writeln!(out, "{},{},{},{}", self.pairs_tested, self.errors, self.error_rate, self.seed).map_err(io)
    }
}

/// One sampled pipeline: compute stages only, no AllReduce.
fn random_split(rng: &mut ChaCha8Rng, stages: usize, total: f64, fwd_fraction: f64) -> StageCostSequence {
    let w: Vec<f64> = (0..stages).map(|_| Exp1.sample(rng)).collect();
    let sum: f64 = w.iter().sum();
    let c: Vec<f64> = w.iter().map(|x| total * x / sum).collect();
    let f: Vec<f64> = c.iter().map(|x| x * fwd_fraction).collect();
    let b: Vec<f64> = c.iter().map(|x| x * (1.0 - fwd_fraction)).collect();
    StageCostSequence::from_compute(&f, &b)
}

/// Latencies `(estimated, simulated)` of one sequence.
pub fn score_pair_member(seq: &StageCostSequence, m: usize, phi: &[usize]) -> Result<(f64, f64)> {
    let est = estimate_latency(seq, m).total;
    let tl = dapple_schedule(seq, m, phi)?;
    Ok((est, batch_latency(&tl, seq)))
}

/// The two sequences drawn for pair `index`.
pub fn ranking_pair(cfg: &RankingConfig, index: u64) -> (StageCostSequence, StageCostSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let s = cfg.phi.len();
    let a = random_split(&mut rng, s, cfg.total_compute, cfg.fwd_fraction);
    let b = random_split(&mut rng, s, cfg.total_compute, cfg.fwd_fraction);
    (a, b)
}

/// Counts pairs of random equal-total pipelines whose estimated ordering
/// contradicts the simulated one. Every pair draws from its own stream, so
/// the result does not depend on the worker count.
pub fn ranking_experiment(cfg: &RankingConfig) -> Result<RankingReport> {
    if cfg.pairs == 0 {
        return Err(Error::Invalid("pair count must be >= 1".into()));
    }
    if !(cfg.fwd_fraction > 0.0 && cfg.fwd_fraction < 1.0) || !(cfg.total_compute > 0.0) {
        return Err(Error::Invalid("need 0 < fwd_fraction < 1 and total_compute > 0".into()));
    }
    validate_phi(&cfg.phi, cfg.phi.len(), cfg.micro_batches)?;
    let errors = (0..cfg.pairs)
        .into_par_iter()
        .map(|k| {
            let (a, b) = ranking_pair(cfg, k);
            let (ae, aa) = score_pair_member(&a, cfg.micro_batches, &cfg.phi)?;
            let (be, ba) = score_pair_member(&b, cfg.micro_batches, &cfg.phi)?;
            Ok(u64::from((aa - ba) * (ae - be) < 0.0))
        })
        .try_reduce(|| 0, |x, y| Ok(x + y))?;
    Ok(RankingReport { pairs_tested: cfg.pairs, errors, error_rate: errors as f64 / cfg.pairs as f64, seed: cfg.seed })
}

fn even(stages: usize, total: f64, fwd_fraction: f64) -> StageCostSequence {
    let c = total / stages as f64;
    StageCostSequence::from_compute(&vec![c * fwd_fraction; stages], &vec![c * (1.0 - fwd_fraction); stages])
}

fn simulate_default(seq: &StageCostSequence, m: usize) -> Result<f64> {
    let choice = optimize_phi(seq, m, PhiStrategy::PresetA, &injection_caps(seq, m))?;
    Ok(choice.latency)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FewerStagesReport {
    pub total_compute: f64,
    pub m1: usize,
    pub m2: usize,
    /// 16 unreplicated stages, `m1` micro-batches.
    pub l1_simulated: f64,
    /// 2 stages, each replicated 8 times, `m2` micro-batches.
    pub l2_simulated: f64,
    pub l1_analytic: f64,
    pub l2_analytic: f64,
}

impl FewerStagesReport {
    pub fn to_table(&self) -> String {
        table(
            &["plan", "micro_batches", "simulated", "analytic"],
            &[
                vec!["16 stages".into(), self.m1.to_string(), fmt(self.l1_simulated), fmt(self.l1_analytic)],
                vec!["2 stages".into(), self.m2.to_string(), fmt(self.l2_simulated), fmt(self.l2_analytic)],
            ],
        )
    }
}

/// Compares a 16-stage straight pipeline fed `m` micro-batches with a
/// 2-stage pipeline fed `m / 8` larger ones on the same 16 devices.
pub fn insight_fewer_stages(total_compute: f64, m: usize) -> Result<FewerStagesReport> {
    if m == 0 || m % 8 != 0 {
        return Err(Error::Invalid(format!("micro batch count must be a positive multiple of 8, got {m}")));
    }
    let m2 = m / 8;
    let c = total_compute;
    let l1 = simulate_default(&even(16, c, 1.0 / 3.0), m)?;
    let l2 = simulate_default(&even(2, c, 1.0 / 3.0), m2)?;
    let half = m2 as f64 / 2.0;
    Ok(FewerStagesReport {
        total_compute: c,
        m1: m,
        m2,
        l1_simulated: l1,
        l2_simulated: l2,
        l1_analytic: c * (half + 15.0 / 16.0),
        l2_analytic: c * (half + 0.5),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnevenReport {
    pub micro_batches: usize,
    pub ratio: Vec<f64>,
    pub phi_uneven: Vec<usize>,
    pub phi_even: Vec<usize>,
    pub dapple_uneven: f64,
    pub dapple_even: f64,
    pub gpipe_uneven: f64,
    pub gpipe_even: f64,
    /// `C[s](m-1) <= C[s-1](m-1) <= C[s]·m` for every adjacent pair.
    pub condition_holds: bool,
}

impl UnevenReport {
    pub fn to_table(&self) -> String {
        table(
            &["schedule", "uneven", "even"],
            &[
                vec!["dapple".into(), fmt(self.dapple_uneven), fmt(self.dapple_even)],
                vec!["gpipe".into(), fmt(self.gpipe_uneven), fmt(self.gpipe_even)],
            ],
        )
    }
}

fn split_by(ratio: &[f64], total: f64) -> StageCostSequence {
    let sum: f64 = ratio.iter().sum();
    let c: Vec<f64> = ratio.iter().map(|r| total * r / sum).collect();
    let f: Vec<f64> = c.iter().map(|x| x / 3.0).collect();
    let b: Vec<f64> = c.iter().map(|x| 2.0 * x / 3.0).collect();
    StageCostSequence::from_compute(&f, &b)
}

/// Compares an `ratio` split (bottom stage first) against an even split of
/// the same total compute under both schedules, with φ searched per split.
pub fn insight_uneven_with(ratio: &[f64], m: usize) -> Result<UnevenReport> {
    if m < 2 {
        return Err(Error::Invalid("insight needs at least 2 micro-batches".into()));
    }
    if ratio.is_empty() || ratio.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::Invalid("ratios must be positive".into()));
    }
    let total: f64 = ratio.iter().sum();
    let uneven = split_by(ratio, total);
    let flat = split_by(&vec![1.0; ratio.len()], total);
    let search = |seq: &StageCostSequence| optimize_phi(seq, m, PhiStrategy::Search, &injection_caps(seq, m));
    let (pu, pe) = (search(&uneven)?, search(&flat)?);
    let gp = |seq: &StageCostSequence| -> Result<f64> { Ok(batch_latency(&gpipe_schedule(seq, m)?, seq)) };
    let mf = m as f64;
    let condition_holds = ratio.windows(2).all(|w| w[1] * (mf - 1.0) <= w[0] * (mf - 1.0) && w[0] * (mf - 1.0) <= w[1] * mf);
    Ok(UnevenReport {
        micro_batches: m,
        ratio: ratio.to_vec(),
        dapple_uneven: pu.latency,
        dapple_even: pe.latency,
        phi_uneven: pu.phi,
        phi_even: pe.phi,
        gpipe_uneven: gp(&uneven)?,
        gpipe_even: gp(&flat)?,
        condition_holds,
    })
}

/// [`insight_uneven_with`] for the 8:7:6 split.
pub fn insight_uneven(m: usize) -> Result<UnevenReport> {
    insight_uneven_with(&[8.0, 7.0, 6.0], m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleRow {
    pub schedule: ScheduleKind,
    pub micro_batches: usize,
    pub latency: f64,
    /// Samples per second.
    pub throughput: f64,
    pub peak_activations: Vec<usize>,
    /// Peak stashed activation bytes per stage.
    pub peak_bytes: Vec<u64>,
}

/// Simulates DAPPLE (φ from preset A) and GPipe for every entry of
/// `m_list`. With `recompute`, every backward replays its forward and a
/// stage only keeps the activations entering it.
pub fn gpipe_comparison(seq: &StageCostSequence, m_list: &[usize], micro_batch_size: u32, recompute: bool) -> Result<Vec<ScheduleRow>> {
    if m_list.is_empty() {
        return Err(Error::Invalid("need at least one micro batch count".into()));
    }
    let run_seq = if recompute { with_recompute(seq) } else { seq.clone() };
    let per_mb: Vec<u64> = (0..seq.len())
        .map(|x| match (recompute, x) {
            (false, _) => seq[x].activation_stash_bytes,
            (true, 0) => 0,
            (true, _) => seq[x - 1].activation_out_bytes,
        })
        .collect();
    let mut rows = Vec::with_capacity(2 * m_list.len());
    for &m in m_list {
        let phi = optimize_phi(&run_seq, m, PhiStrategy::PresetA, &injection_caps(&run_seq, m))?.expanded;
        for tl in [dapple_schedule(&run_seq, m, &phi)?, gpipe_schedule(&run_seq, m)?] {
            let latency = batch_latency(&tl, &run_seq);
            let peaks = peak_activations(&tl);
            rows.push(ScheduleRow {
                schedule: tl.schedule,
                micro_batches: m,
                latency,
                throughput: (m as f64 * f64::from(micro_batch_size)) / latency,
                peak_bytes: peaks.iter().zip(&per_mb).map(|(&p, &b)| p as u64 * b).collect(),
                peak_activations: peaks,
            });
        }
    }
    Ok(rows)
}

pub fn schedule_table(rows: &[ScheduleRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{:?}", r.schedule).to_lowercase(),
                r.micro_batches.to_string(),
                fmt(r.latency),
                format!("{:.3}", r.throughput),
                join(&r.peak_activations),
                join(&r.peak_bytes),
            ]
        })
        .collect();
    table(&["schedule", "M", "latency_s", "samples_per_s", "peak_activations", "peak_bytes"], &body)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

/// Left-aligned columns separated by two spaces.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        writeln!(out, "{}", parts.join("  ").trim_end()).unwrap();
    };
    line(header.to_vec());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}
