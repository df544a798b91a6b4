//! Exact block-level simulation of synchronous pipeline schedules.
//!
//! Every (micro-batch, stage) pair has one forward and one backward block.
//! A block starts as soon as all of its dependencies have finished; the
//! dependency sets encode the schedule (1F1B with initial injections `phi`,
//! or the all-forward-then-all-backward GPipe shape). Blocks are evaluated
//! in topological order of the dependency DAG, so each one is touched a
//! constant number of times.

mod export;
mod phi;

pub use export::{timeline_csv, timeline_svg, SvgOptions};
pub use phi::{expand_phi, injection_caps, optimize_phi, PhiChoice, PhiStrategy};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{validate_phi, StageCostSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Block {
    pub stage: usize,
    pub micro_batch: usize,
    pub kind: BlockKind,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Dapple,
    Gpipe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    /// Forward blocks stage-major, then backward blocks stage-major.
    blocks: Vec<Block>,
    pub schedule: ScheduleKind,
    /// Injection vector over the simulated stages (empty for GPipe).
    pub phi: Vec<usize>,
    pub micro_batches: usize,
    pub stages: usize,
}

impl Timeline {
    fn index(&self, i: usize, x: usize, kind: BlockKind) -> usize {
        node(i, x, kind, self.micro_batches, self.stages)
    }

    pub fn forward(&self, i: usize, x: usize) -> &Block {
        &self.blocks[self.index(i, x, BlockKind::Forward)]
    }

    pub fn backward(&self, i: usize, x: usize) -> &Block {
        &self.blocks[self.index(i, x, BlockKind::Backward)]
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Blocks of one stage sorted by start time.
    pub fn stage_blocks(&self, x: usize) -> Vec<Block> {
        let mut v: Vec<Block> = (0..self.micro_batches)
            .flat_map(|i| [*self.forward(i, x), *self.backward(i, x)])
            .collect();
        v.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        v
    }

    pub fn makespan(&self) -> f64 {
        self.blocks.iter().map(|b| b.end).fold(0.0, f64::max)
    }
}

fn node(i: usize, x: usize, kind: BlockKind, m: usize, s: usize) -> usize {
    let base = x * m + i;
    match kind {
        BlockKind::Forward => base,
        BlockKind::Backward => s * m + base,
    }
}

/// Evaluates start/end times over the DAG defined by `deps`.
fn run<D>(seq: &StageCostSequence, m: usize, deps: D) -> Result<Vec<Block>>
where
    D: Fn(usize, usize, BlockKind, &mut Vec<(usize, usize, BlockKind)>),
{
    let s = seq.len();
    let n = 2 * m * s;
    let mut meta = Vec::with_capacity(n);
    for kind in [BlockKind::Forward, BlockKind::Backward] {
        for x in 0..s {
            for i in 0..m {
                meta.push((i, x, kind));
            }
        }
    }
    let mut preds: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut succ_count = vec![0usize; n];
    let mut scratch = Vec::with_capacity(3);
    for &(i, x, kind) in &meta {
        scratch.clear();
        deps(i, x, kind, &mut scratch);
        let p: Vec<usize> = scratch.iter().map(|&(pi, px, pk)| node(pi, px, pk, m, s)).collect();
        for &q in &p {
            succ_count[q] += 1;
        }
        preds.push(p);
    }
    // CSR successor lists
    let mut offsets = vec![0usize; n + 1];
    for v in 0..n {
        offsets[v + 1] = offsets[v] + succ_count[v];
    }
    let mut fill = offsets.clone();
    let mut succ = vec![0usize; offsets[n]];
    let mut indegree = vec![0usize; n];
    for (v, p) in preds.iter().enumerate() {
        indegree[v] = p.len();
        for &q in p {
            succ[fill[q]] = v;
            fill[q] += 1;
        }
    }

    let mut end = vec![0.0f64; n];
    let mut start = vec![0.0f64; n];
    let mut ready: Vec<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut done = 0;
    while let Some(v) = ready.pop() {
        let (_, x, kind) = meta[v];
        let t0 = preds[v].iter().map(|&q| end[q]).fold(0.0, f64::max);
        let dur = match kind {
            BlockKind::Forward => seq[x].fwd,
            BlockKind::Backward => seq[x].bwd,
        };
        start[v] = t0;
        end[v] = t0 + dur;
        done += 1;
        for &w in &succ[offsets[v]..offsets[v + 1]] {
            indegree[w] -= 1;
            if indegree[w] == 0 {
                ready.push(w);
            }
        }
    }
    if done != n {
        return Err(Error::Internal(format!("schedule dependency cycle ({done} of {n} blocks resolved)")));
    }
    Ok(meta
        .into_iter()
        .enumerate()
        .map(|(v, (i, x, kind))| Block { stage: x, micro_batch: i, kind, start: start[v], end: end[v] })
        .collect())
}

/// 1F1B schedule: stage `x` injects `phi[x]` forwards, then strictly
/// alternates one backward and one forward.
pub fn dapple_schedule(seq: &StageCostSequence, micro_batches: usize, phi: &[usize]) -> Result<Timeline> {
    let (m, s) = (micro_batches, seq.len());
    check_inputs(seq, m)?;
    validate_phi(phi, s, m)?;
    let blocks = run(seq, m, |i, x, kind, out| match kind {
        BlockKind::Forward => {
            if i >= phi[x] {
                out.push((i - phi[x], x, BlockKind::Backward));
            }
            if i >= 1 {
                out.push((i - 1, x, BlockKind::Forward));
            }
            if x >= 1 {
                out.push((i, x - 1, BlockKind::Forward));
            }
        }
        BlockKind::Backward => {
            if i + phi[x] - 1 < m {
                out.push((i + phi[x] - 1, x, BlockKind::Forward));
            }
            if i >= 1 {
                out.push((i - 1, x, BlockKind::Backward));
            }
            if x + 1 < s {
                out.push((i, x + 1, BlockKind::Backward));
            }
        }
    })?;
    Ok(Timeline { blocks, schedule: ScheduleKind::Dapple, phi: phi.to_vec(), micro_batches: m, stages: s })
}

/// GPipe: every stage runs all forwards before any backward.
pub fn gpipe_schedule(seq: &StageCostSequence, micro_batches: usize) -> Result<Timeline> {
    let (m, s) = (micro_batches, seq.len());
    check_inputs(seq, m)?;
    let blocks = run(seq, m, |i, x, kind, out| match kind {
        BlockKind::Forward => {
            if i >= 1 {
                out.push((i - 1, x, BlockKind::Forward));
            }
            if x >= 1 {
                out.push((i, x - 1, BlockKind::Forward));
            }
        }
        BlockKind::Backward => {
            out.push((m - 1, x, BlockKind::Forward));
            if i >= 1 {
                out.push((i - 1, x, BlockKind::Backward));
            }
            if x + 1 < s {
                out.push((i, x + 1, BlockKind::Backward));
            }
        }
    })?;
    Ok(Timeline { blocks, schedule: ScheduleKind::Gpipe, phi: Vec::new(), micro_batches: m, stages: s })
}

pub fn simulate(seq: &StageCostSequence, micro_batches: usize, schedule: ScheduleKind, phi: &[usize]) -> Result<Timeline> {
    match schedule {
        ScheduleKind::Dapple => dapple_schedule(seq, micro_batches, phi),
        ScheduleKind::Gpipe => gpipe_schedule(seq, micro_batches),
    }
}

fn check_inputs(seq: &StageCostSequence, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Invalid("micro batch count must be >= 1".into()));
    }
    if seq.is_empty() {
        return Err(Error::Invalid("empty stage sequence".into()));
    }
    Ok(())
}

/// Batch latency: the last backward of every stage plus its AllReduce.
pub fn batch_latency(tl: &Timeline, seq: &StageCostSequence) -> f64 {
    (0..tl.stages)
        .map(|x| tl.backward(tl.micro_batches - 1, x).end + seq[x].allreduce_time)
        .fold(0.0, f64::max)
}

/// Maximum number of micro-batches whose activations are held at once on
/// each stage; an activation lives from its forward's end to its
/// backward's end.
pub fn peak_activations(tl: &Timeline) -> Vec<usize> {
    (0..tl.stages)
        .map(|x| {
            let mut events: Vec<(f64, i32)> = Vec::with_capacity(2 * tl.micro_batches);
            for i in 0..tl.micro_batches {
                events.push((tl.forward(i, x).end, 1));
                events.push((tl.backward(i, x).end, -1));
            }
            // releases at t sort before acquisitions at t
            events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut live = 0i32;
            let mut peak = 0i32;
            for (_, d) in events {
                live += d;
                peak = peak.max(live);
            }
            peak as usize
        })
        .collect()
}

/// Re-computation: each backward also replays the stage's forward.
pub fn with_recompute(seq: &StageCostSequence) -> StageCostSequence {
    StageCostSequence(
        seq.stages()
            .iter()
            .map(|c| {
                let mut c = c.clone();
                if c.is_compute() {
                    c.bwd += c.fwd;
                }
                c
            })
            .collect(),
    )
}
