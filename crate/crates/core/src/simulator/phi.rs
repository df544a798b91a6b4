//! Choice of the initial injection vector φ.

use rayon::prelude::*;
use serde::Serialize;

use super::{batch_latency, dapple_schedule};
use crate::error::{Error, Result};
use crate::model::StageCostSequence;

/// Above this many candidate vectors the search switches from exhaustive
/// enumeration to coordinate descent.
const EXHAUSTIVE_LIMIT: u128 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PhiStrategy {
    /// `φ_i = min(S-i, D)`
    PresetA,
    /// `φ_i = min(2(S-i)-1, D)`
    PresetB,
    /// Best simulated latency among vectors bounded by preset B.
    Search,
}

impl std::str::FromStr for PhiStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "preset-a" => Ok(Self::PresetA),
            "b" | "preset-b" => Ok(Self::PresetB),
            "search" => Ok(Self::Search),
            other => Err(Error::Invalid(format!("unknown phi policy '{other}' (expected A, B or search)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhiChoice {
    /// One entry per compute stage.
    pub phi: Vec<usize>,
    /// φ over every entry of the stage sequence.
    pub expanded: Vec<usize>,
    pub latency: f64,
}

/// Spreads per-compute-stage injections over the full sequence: a
/// communication stage inherits the value of the compute stage below it.
pub fn expand_phi(seq: &StageCostSequence, compute_phi: &[usize]) -> Result<Vec<usize>> {
    if compute_phi.len() != seq.num_compute() {
        return Err(Error::InvalidPhi(format!(
            "expected {} per-stage entries, got {}",
            seq.num_compute(),
            compute_phi.len()
        )));
    }
    let mut out = Vec::with_capacity(seq.len());
    let mut k = 0;
    for c in seq.stages() {
        if c.is_compute() {
            out.push(compute_phi[k]);
            k += 1;
        } else {
            let below = *out.last().ok_or_else(|| Error::InvalidPhi("sequence starts with a communication stage".into()))?;
            out.push(below);
        }
    }
    Ok(out)
}

/// Per-compute-stage injection caps `D` when every stage can hold any
/// number of micro-batches.
pub fn injection_caps(seq: &StageCostSequence, micro_batches: usize) -> Vec<usize> {
    vec![micro_batches.max(1); seq.num_compute()]
}

fn preset(s: usize, caps: &[usize], m: usize, f: impl Fn(usize) -> usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(s);
    let mut prev = usize::MAX;
    for i in 0..s {
        let v = f(i).min(caps[i]).min(m).min(prev).max(1);
        out.push(v);
        prev = v;
    }
    if let Some(last) = out.last_mut() {
        *last = 1;
    }
    out
}

fn score(seq: &StageCostSequence, m: usize, phi: &[usize]) -> Result<(f64, Vec<usize>)> {
    let expanded = expand_phi(seq, phi)?;
    let tl = dapple_schedule(seq, m, &expanded)?;
    Ok((batch_latency(&tl, seq), expanded))
}

/// Orders candidates by latency, then total injections, then
/// lexicographically.
fn better(a: &PhiChoice, b: &PhiChoice) -> bool {
    let sa: usize = a.phi.iter().sum();
    let sb: usize = b.phi.iter().sum();
    a.latency.total_cmp(&b.latency).then(sa.cmp(&sb)).then(a.phi.cmp(&b.phi)).is_lt()
}

/// Picks φ for `seq` under `strategy`, with `caps[i]` the memory-feasible
/// injection limit `D` of compute stage `i`.
pub fn optimize_phi(seq: &StageCostSequence, micro_batches: usize, strategy: PhiStrategy, caps: &[usize]) -> Result<PhiChoice> {
    let s = seq.num_compute();
    if micro_batches == 0 {
        return Err(Error::Invalid("micro batch count must be >= 1".into()));
    }
    if caps.len() != s || caps.iter().any(|&d| d == 0) {
        return Err(Error::Invalid(format!("injection caps must be {s} values >= 1, got {caps:?}")));
    }
    let m = micro_batches;
    let a = preset(s, caps, m, |i| s - i);
    let b = preset(s, caps, m, |i| 2 * (s - i) - 1);
    let eval = |phi: Vec<usize>| -> Result<PhiChoice> {
        let (latency, expanded) = score(seq, m, &phi)?;
        Ok(PhiChoice { phi, expanded, latency })
    };
    match strategy {
        PhiStrategy::PresetA => eval(a),
        PhiStrategy::PresetB => eval(b),
        PhiStrategy::Search => {
            if count_bounded(&b) <= EXHAUSTIVE_LIMIT {
                let mut all = Vec::new();
                enumerate_bounded(&b, &mut vec![0; s], s, &mut all);
                let scored = all.into_par_iter().map(eval).collect::<Result<Vec<_>>>()?;
                Ok(scored.into_iter().reduce(|x, y| if better(&y, &x) { y } else { x }).expect("at least one candidate"))
            } else {
                descend(&b, [eval(a)?, eval(b.clone())?], eval)
            }
        }
    }
}

/// Number of non-increasing vectors `v` with `1 <= v[i] <= bound[i]` and a
/// final entry of 1.
fn count_bounded(bound: &[usize]) -> u128 {
    let s = bound.len();
    let top = bound.iter().copied().max().unwrap_or(1);
    // ways[v] = vectors for stages i.. whose entry at i equals v
    let mut ways = vec![0u128; top + 2];
    ways[1] = 1;
    for i in (0..s - 1).rev() {
        let mut next = vec![0u128; top + 2];
        let mut acc = 0u128;
        for v in 1..=top {
            acc = acc.saturating_add(ways[v]);
            if v <= bound[i] {
                next[v] = acc;
            }
        }
        ways = next;
    }
    ways.iter().fold(0u128, |a, &w| a.saturating_add(w))
}

fn enumerate_bounded(bound: &[usize], cur: &mut Vec<usize>, i: usize, out: &mut Vec<Vec<usize>>) {
    // fill from the top stage downwards
    if i == 0 {
        out.push(cur.clone());
        return;
    }
    let x = i - 1;
    let lo = if x + 1 < bound.len() { cur[x + 1] } else { 1 };
    let hi = if x + 1 == bound.len() { 1 } else { bound[x] };
    for v in lo..=hi {
        cur[x] = v;
        enumerate_bounded(bound, cur, x, out);
    }
}

fn descend<F>(bound: &[usize], seeds: [PhiChoice; 2], eval: F) -> Result<PhiChoice>
where
    F: Fn(Vec<usize>) -> Result<PhiChoice>,
{
    let [a, b] = seeds;
    let mut best = if better(&b, &a) { b } else { a };
    let s = bound.len();
    loop {
        let mut improved = false;
        for x in 0..s.saturating_sub(1) {
            let lo = best.phi[x + 1];
            let hi = if x == 0 { bound[0] } else { bound[x].min(best.phi[x - 1]) };
            for v in lo..=hi {
                if v == best.phi[x] {
                    continue;
                }
                let mut phi = best.phi.clone();
                phi[x] = v;
                let c = eval(phi)?;
                if better(&c, &best) {
                    best = c;
                    improved = true;
                }
            }
        }
        if !improved {
            return Ok(best);
        }
    }
}
