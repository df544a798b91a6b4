//! Search over stage splits, replication factors and device placements.
//!
//! The main entry point is [`plan`], a memoized forward search: a state is
//! a planned prefix of the layer chain plus the per-server count of GPUs it
//! occupies, and the unplanned suffix is always closed off as one final
//! stage. Placements of new stages come from three policies (fresh-first,
//! append-first, scatter-first). [`brute_force_plan`] enumerates every
//! split and every device subset and is used as an oracle on small inputs.

use std::collections::BTreeMap;
use std::ops::Range;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{compute_acr, estimate_latency, stage_sequence};
use crate::model::{ClusterSpec, ModelProfile, PipelinePlan, Stage, StageCost, StageCostSequence};
use crate::simulator::{batch_latency, dapple_schedule, optimize_phi, PhiStrategy};

/// Bytes of device memory per parameter byte: fp32 weights, gradients and
/// two Adam moments.
pub const DEFAULT_OPTIMIZER_MULTIPLIER: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryModel {
    pub optimizer_multiplier: u64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        Self { optimizer_multiplier: DEFAULT_OPTIMIZER_MULTIPLIER }
    }
}

impl MemoryModel {
    /// Weights plus optimizer state plus `phi` stashed micro-batches fit in
    /// `capacity`.
    pub fn feasible(&self, stage: &StageCost, phi: usize, capacity: u64) -> bool {
        let need = u128::from(stage.param_bytes) * u128::from(self.optimizer_multiplier)
            + phi as u128 * u128::from(stage.activation_stash_bytes);
        need <= u128::from(capacity)
    }

    /// Largest feasible injection count `D`, capped at `micro_batches`;
    /// 0 when not even one micro-batch fits.
    pub fn injection_cap(&self, stage: &StageCost, capacity: u64, micro_batches: usize) -> usize {
        let fixed = u128::from(stage.param_bytes) * u128::from(self.optimizer_multiplier);
        let cap = u128::from(capacity);
        if fixed > cap {
            return 0;
        }
        let per = u128::from(stage.activation_stash_bytes);
        if per == 0 {
            return micro_batches;
        }
        ((cap - fixed) / per).min(micro_batches as u128) as usize
    }
}

/// [`MemoryModel::feasible`] with the default optimizer multiplier.
pub fn memory_feasible(stage: &StageCost, phi: usize, capacity: u64) -> bool {
    MemoryModel::default().feasible(stage, phi, capacity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum PlacementPolicy {
    FreshFirst,
    AppendFirst,
    ScatterFirst,
}

/// Which GPUs are taken. Policies always hand out the lowest free ids of a
/// server, so the used GPUs of every server form a prefix and the per-server
/// counts identify the state completely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceState {
    seps: Vec<usize>,
    offsets: Vec<usize>,
    used: Vec<usize>,
    history: Vec<Vec<usize>>,
}

impl DeviceState {
    pub fn new(cluster: &ClusterSpec) -> Self {
        Self { seps: cluster.seps.clone(), offsets: cluster.server_offsets(), used: vec![0; cluster.num_servers()], history: vec![] }
    }

    pub fn used(&self) -> &[usize] {
        &self.used
    }

    pub fn history(&self) -> &[Vec<usize>] {
        &self.history
    }

    pub fn free_on(&self, server: usize) -> usize {
        self.seps[server] - self.used[server]
    }

    pub fn free(&self) -> usize {
        (0..self.seps.len()).map(|s| self.free_on(s)).sum()
    }

    fn fresh(&self, s: usize) -> bool {
        self.used[s] == 0
    }

    fn partial(&self, s: usize) -> bool {
        self.used[s] > 0 && self.free_on(s) > 0
    }

    /// GPU ids for taking `counts[s]` more GPUs from every server `s`.
    pub fn ids_for(&self, counts: &[usize]) -> Vec<usize> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(s, &c)| {
                let first = self.offsets[s] + self.used[s];
                first..first + c
            })
            .collect()
    }

    /// All currently free GPUs.
    pub fn remaining(&self) -> Vec<usize> {
        let counts: Vec<usize> = (0..self.seps.len()).map(|s| self.free_on(s)).collect();
        self.ids_for(&counts)
    }

    pub fn allocate(&mut self, counts: &[usize]) -> Result<Vec<usize>> {
        for (s, &c) in counts.iter().enumerate() {
            if c > self.free_on(s) {
                return Err(Error::InsufficientGpus { requested: c, free: self.free_on(s) });
            }
        }
        let ids = self.ids_for(counts);
        for (u, &c) in self.used.iter_mut().zip(counts) {
            *u += c;
        }
        self.history.push(ids.clone());
        Ok(ids)
    }

    fn fill(&self, order: impl IntoIterator<Item = usize>, mut need: usize, counts: &mut [usize]) -> usize {
        for s in order {
            let take = need.min(self.free_on(s) - counts[s]);
            counts[s] += take;
            need -= take;
        }
        need
    }

    fn round_robin(&self, servers: &[usize], mut need: usize, counts: &mut [usize]) -> usize {
        while need > 0 {
            let mut progressed = false;
            for &s in servers {
                if need > 0 && counts[s] < self.free_on(s) {
                    counts[s] += 1;
                    need -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        need
    }

    /// Per-server counts chosen by `policy` for `m` new GPUs.
    pub fn policy_counts(&self, policy: PlacementPolicy, m: usize) -> Result<Vec<usize>> {
        let free = self.free();
        if m == 0 || m > free {
            return Err(Error::InsufficientGpus { requested: m, free });
        }
        let n = self.seps.len();
        // larger fresh servers first so a stage stays on one server when it can
        let mut fresh: Vec<usize> = (0..n).filter(|&s| self.fresh(s)).collect();
        fresh.sort_by_key(|&s| (std::cmp::Reverse(self.seps[s]), s));
        let partial: Vec<usize> = (0..n).filter(|&s| self.partial(s)).collect();
        let mut counts = vec![0; n];
        let left = match policy {
            PlacementPolicy::FreshFirst => {
                let left = self.fill(fresh.iter().copied(), m, &mut counts);
                self.fill(partial.iter().copied(), left, &mut counts)
            }
            PlacementPolicy::AppendFirst => {
                let left = self.fill(partial.iter().copied(), m, &mut counts);
                self.fill(fresh.iter().copied(), left, &mut counts)
            }
            PlacementPolicy::ScatterFirst => {
                let with_free: Vec<usize> = (0..n).filter(|&s| self.free_on(s) > 0).collect();
                let eligible = if partial.is_empty() { &with_free } else { &partial };
                let left = self.round_robin(eligible, m, &mut counts);
                self.round_robin(&with_free, left, &mut counts)
            }
        };
        debug_assert_eq!(left, 0);
        Ok(counts)
    }

    /// Deduplicated `(policy, counts)` candidates, in policy order.
    pub fn placements(&self, m: usize) -> Result<Vec<(PlacementPolicy, Vec<usize>)>> {
        let mut out: Vec<(PlacementPolicy, Vec<usize>)> = Vec::with_capacity(3);
        for p in [PlacementPolicy::FreshFirst, PlacementPolicy::AppendFirst, PlacementPolicy::ScatterFirst] {
            let c = self.policy_counts(p, m)?;
            if !out.iter().any(|(_, o)| *o == c) {
                out.push((p, c));
            }
        }
        Ok(out)
    }
}

/// Device sets for `m_prime` new GPUs under each placement policy.
pub fn enumerate_placements(state: &DeviceState, m_prime: usize) -> Result<Vec<Vec<usize>>> {
    Ok(state.placements(m_prime)?.into_iter().map(|(_, c)| state.ids_for(&c)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerOptions {
    pub phi_strategy: PhiStrategy,
    /// Candidates re-scored by the simulator.
    pub top_k: usize,
    /// Prefixes retained per memo state.
    pub beam_width: usize,
    pub memory: MemoryModel,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self { phi_strategy: PhiStrategy::Search, top_k: 8, beam_width: 4, memory: MemoryModel::default() }
    }
}

/// A planned prefix: layers `[0, j)` assigned to stages, the rest forming
/// the last stage on all remaining GPUs.
#[derive(Debug, Clone)]
pub struct PlanCandidate {
    pub stages: Vec<Stage>,
    pub state: DeviceState,
    pub next_layer: usize,
    /// Estimated latency with the suffix closed off on the remaining GPUs.
    pub latency: f64,
    pub pivot: usize,
    /// `F_Q + B_Q` of the pivot.
    pub pivot_busy: f64,
}

impl PlanCandidate {
    pub fn gpus_used(&self) -> usize {
        self.state.used().iter().sum()
    }
}

/// Latencies within a relative `1e-9` compare equal, so that rounding noise
/// does not override the structural tie-breaks.
fn latency_cmp(a: f64, b: f64) -> std::cmp::Ordering {
    if (a - b).abs() <= 1e-9 * a.abs().max(b.abs()) {
        std::cmp::Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

/// A complete plan scored by the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPlan {
    pub stages: Vec<Stage>,
    pub seq: StageCostSequence,
    pub est_latency: f64,
    pub pivot: usize,
}

impl ScoredPlan {
    fn splits(&self) -> impl Iterator<Item = usize> + '_ {
        self.stages.iter().map(|s| s.layer_hi)
    }

    /// Latency, then stage count, then split points, then devices.
    fn rank_cmp(&self, other: &Self) -> std::cmp::Ordering {
        latency_cmp(self.est_latency, other.est_latency)
            .then(self.stages.len().cmp(&other.stages.len()))
            .then_with(|| self.splits().cmp(other.splits()))
            .then_with(|| self.stages.iter().map(|s| &s.devices).cmp(other.stages.iter().map(|s| &s.devices)))
    }
}

struct Evaluator<'a> {
    profile: &'a ModelProfile,
    cluster: &'a ClusterSpec,
    micro_batches: usize,
    memory: MemoryModel,
}

impl Evaluator<'_> {
    fn stage_fits(&self, c: &StageCost) -> bool {
        self.memory.feasible(c, 1, self.cluster.per_gpu_memory)
    }

    /// `None` when some stage cannot hold even one micro-batch.
    fn score(&self, stages: Vec<Stage>) -> Result<Option<ScoredPlan>> {
        let seq = stage_sequence(&stages, self.profile, self.cluster)?;
        if !seq.stages().iter().filter(|c| c.is_compute()).all(|c| self.stage_fits(c)) {
            return Ok(None);
        }
        let est = estimate_latency(&seq, self.micro_batches);
        Ok(Some(ScoredPlan { stages, seq, est_latency: est.total, pivot: est.pivot }))
    }
}

/// Keeps the `k` best plans under [`ScoredPlan::rank_cmp`].
struct TopK {
    k: usize,
    items: Vec<ScoredPlan>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k: k.max(1), items: Vec::new() }
    }

    fn push(&mut self, p: ScoredPlan) {
        if self.items.len() == self.k && self.items.last().is_some_and(|w| p.rank_cmp(w).is_ge()) {
            return;
        }
        if self.items.iter().any(|q| q.stages == p.stages) {
            return;
        }
        let pos = self.items.partition_point(|q| q.rank_cmp(&p).is_le());
        self.items.insert(pos, p);
        self.items.truncate(self.k);
    }
}

fn check_inputs(profile: &ModelProfile, cluster: &ClusterSpec, micro_batches: usize) -> Result<()> {
    if micro_batches == 0 {
        return Err(Error::Invalid("micro batch count must be >= 1".into()));
    }
    if profile.num_layers() == 0 || cluster.num_gpus() == 0 {
        return Err(Error::Invalid("need at least one layer and one GPU".into()));
    }
    Ok(())
}

type MemoKey = (usize, Vec<usize>);

/// Full plans closing `cand` with a last stage `[j, N)` of every size and
/// policy placement.
fn completions(ev: &Evaluator, cand: &PlanCandidate, out: &mut Vec<ScoredPlan>) -> Result<()> {
    let n = ev.profile.num_layers();
    for r in 1..=cand.state.free() {
        for (_, counts) in cand.state.placements(r)? {
            let mut stages = cand.stages.clone();
            stages.push(Stage::new(cand.next_layer..n, cand.state.ids_for(&counts)));
            if let Some(p) = ev.score(stages)? {
                out.push(p);
            }
        }
    }
    Ok(())
}

/// Prefixes obtained by splitting one more stage `[j, j')` off `cand`.
fn extensions(ev: &Evaluator, cand: &PlanCandidate) -> Result<Vec<PlanCandidate>> {
    let n = ev.profile.num_layers();
    let j = cand.next_layer;
    let free = cand.state.free();
    let mut out = Vec::new();
    for j2 in j + 1..n {
        for m2 in 1..free {
            for (_, counts) in cand.state.placements(m2)? {
                let mut state = cand.state.clone();
                let ids = state.allocate(&counts)?;
                let new_stage = Stage::new(j..j2, ids);
                let mut stages = cand.stages.clone();
                stages.push(new_stage);
                // the new stage alone must fit in memory
                let cost = crate::model::aggregate_stage(ev.profile, j..j2, m2)?;
                if !ev.stage_fits(&cost) {
                    continue;
                }
                let mut closed = stages.clone();
                closed.push(Stage::new(j2..n, state.remaining()));
                let (latency, pivot, pivot_busy) = match ev.score(closed)? {
                    Some(p) => (p.est_latency, p.pivot, p.seq[p.pivot].busy()),
                    None => (f64::INFINITY, 0, 0.0),
                };
                out.push(PlanCandidate { stages, state, next_layer: j2, latency, pivot, pivot_busy });
            }
        }
    }
    Ok(out)
}

fn candidate_cmp(a: &PlanCandidate, b: &PlanCandidate) -> std::cmp::Ordering {
    latency_cmp(a.latency, b.latency)
        .then(a.stages.len().cmp(&b.stages.len()))
        .then_with(|| a.stages.iter().map(|s| (s.layer_hi, &s.devices)).cmp(b.stages.iter().map(|s| (s.layer_hi, &s.devices))))
}

/// Runs the memoized search and returns the best `top_k` plans by
/// estimated latency.
pub fn search(profile: &ModelProfile, cluster: &ClusterSpec, micro_batches: usize, opts: &PlannerOptions) -> Result<Vec<ScoredPlan>> {
    check_inputs(profile, cluster, micro_batches)?;
    let ev = Evaluator { profile, cluster, micro_batches, memory: opts.memory };
    let n = profile.num_layers();
    let beam = opts.beam_width.max(1);

    let root = PlanCandidate {
        stages: vec![],
        state: DeviceState::new(cluster),
        next_layer: 0,
        latency: 0.0,
        pivot: 0,
        pivot_busy: 0.0,
    };
    let mut memo: BTreeMap<MemoKey, Vec<PlanCandidate>> = BTreeMap::new();
    memo.insert((0, root.state.used().to_vec()), vec![root]);
    let mut best = TopK::new(opts.top_k);

    for j in 0..n {
        let keys: Vec<MemoKey> = memo.range((j, vec![])..(j + 1, vec![])).map(|(k, _)| k.clone()).collect();
        let layer: Vec<Vec<PlanCandidate>> = keys.iter().map(|k| memo.remove(k).expect("key present")).collect();
        let work: Vec<&PlanCandidate> = layer.iter().flatten().collect();
        let results = work
            .par_iter()
            .map(|cand| {
                let mut done = Vec::new();
                completions(&ev, cand, &mut done)?;
                Ok((done, extensions(&ev, cand)?))
            })
            .collect::<Result<Vec<_>>>()?;
        for (done, ext) in results {
            for p in done {
                best.push(p);
            }
            for c in ext {
                let slot = memo.entry((c.next_layer, c.state.used().to_vec())).or_default();
                let pos = slot.partition_point(|q| candidate_cmp(q, &c).is_le());
                if pos < beam {
                    slot.insert(pos, c);
                    slot.truncate(beam);
                }
            }
        }
    }
    if best.items.is_empty() {
        return Err(Error::Infeasible("no stage assignment fits in device memory".into()));
    }
    Ok(best.items)
}

/// Attaches φ, ACR and the simulated latency to a scored plan.
pub fn finalize(scored: &ScoredPlan, cluster: &ClusterSpec, micro_batches: usize, opts: &PlannerOptions) -> Result<PipelinePlan> {
    let caps: Vec<usize> = scored
        .seq
        .stages()
        .iter()
        .filter(|c| c.is_compute())
        .map(|c| opts.memory.injection_cap(c, cluster.per_gpu_memory, micro_batches).max(1))
        .collect();
    let choice = optimize_phi(&scored.seq, micro_batches, opts.phi_strategy, &caps)?;
    Ok(PipelinePlan {
        stages: scored.stages.clone(),
        phi: choice.phi,
        pivot: scored.pivot,
        micro_batches,
        est_latency: scored.est_latency,
        sim_latency: Some(choice.latency),
        acr: compute_acr(&scored.seq),
    })
}

/// Best `top_k` plans, each simulated, ordered by estimated latency.
pub fn plan_ranked(profile: &ModelProfile, cluster: &ClusterSpec, micro_batches: usize, opts: &PlannerOptions) -> Result<Vec<PipelinePlan>> {
    let top = search(profile, cluster, micro_batches, opts)?;
    top.par_iter().map(|s| finalize(s, cluster, micro_batches, opts)).collect()
}

/// The plan with the lowest estimated latency, with φ chosen by
/// `opts.phi_strategy` and the simulated latency filled in.
pub fn plan(profile: &ModelProfile, cluster: &ClusterSpec, micro_batches: usize, opts: &PlannerOptions) -> Result<PipelinePlan> {
    let top = search(profile, cluster, micro_batches, opts)?;
    finalize(&top[0], cluster, micro_batches, opts)
}

/// Simulated latency of a plan with its own φ.
pub fn simulate_plan(plan: &PipelinePlan, profile: &ModelProfile, cluster: &ClusterSpec) -> Result<f64> {
    let seq = crate::estimator::build_stage_sequence(plan, profile, cluster)?;
    let phi = crate::simulator::expand_phi(&seq, &plan.phi)?;
    let tl = dapple_schedule(&seq, plan.micro_batches, &phi)?;
    Ok(batch_latency(&tl, &seq))
}

#[derive(Debug, Clone, Copy)]
pub struct BruteForceLimits {
    pub max_layers: usize,
    pub max_gpus: usize,
}

impl Default for BruteForceLimits {
    fn default() -> Self {
        Self { max_layers: 8, max_gpus: 4 }
    }
}

fn compositions(n: usize) -> Vec<Vec<Range<usize>>> {
    // every subset of the n-1 inner cut points
    (0u32..1 << (n - 1))
        .map(|mask| {
            let mut out = Vec::new();
            let mut lo = 0;
            for cut in 1..n {
                if mask & (1 << (cut - 1)) != 0 {
                    out.push(lo..cut);
                    lo = cut;
                }
            }
            out.push(lo..n);
            out
        })
        .collect()
}

fn disjoint_sequences(k: usize, avail: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    // all non-empty submasks of avail
    let mut sub = avail;
    while sub != 0 {
        cur.push(sub);
        disjoint_sequences(k, avail & !sub, cur, out);
        cur.pop();
        sub = (sub - 1) & avail;
    }
}

fn mask_ids(mask: u32) -> Vec<usize> {
    (0..32).filter(|b| mask & (1 << b) != 0).collect()
}

/// Exhaustive search over every split vector and every sequence of
/// disjoint device subsets.
pub fn brute_force_plan(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    micro_batches: usize,
    limits: BruteForceLimits,
    opts: &PlannerOptions,
) -> Result<PipelinePlan> {
    check_inputs(profile, cluster, micro_batches)?;
    let (n, g) = (profile.num_layers(), cluster.num_gpus());
    if n > limits.max_layers || g > limits.max_gpus {
        return Err(Error::LimitsExceeded(format!(
            "brute force handles N <= {} and G <= {} (got N={n}, G={g})",
            limits.max_layers, limits.max_gpus
        )));
    }
    let ev = Evaluator { profile, cluster, micro_batches, memory: opts.memory };
    let all = (1u32 << g) - 1;
    let mut best = TopK::new(1);
    for split in compositions(n) {
        let mut seqs = Vec::new();
        disjoint_sequences(split.len(), all, &mut Vec::new(), &mut seqs);
        for masks in seqs {
            let stages = split.iter().zip(&masks).map(|(r, &m)| Stage::new(r.clone(), mask_ids(m))).collect();
            if let Some(p) = ev.score(stages)? {
                best.push(p);
            }
        }
    }
    let top = best.items.into_iter().next().ok_or_else(|| Error::Infeasible("no stage assignment fits in device memory".into()))?;
    finalize(&top, cluster, micro_batches, opts)
}

/// Exhaustive search restricted to placements the three policies can
/// produce, without memo pruning. Exponential; meant for small inputs.
pub fn policy_exhaustive_plan(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    micro_batches: usize,
    limits: BruteForceLimits,
    opts: &PlannerOptions,
) -> Result<PipelinePlan> {
    check_inputs(profile, cluster, micro_batches)?;
    let (n, g) = (profile.num_layers(), cluster.num_gpus());
    if n > limits.max_layers || g > limits.max_gpus {
        return Err(Error::LimitsExceeded(format!("N={n}, G={g} exceeds the exhaustive search limits")));
    }
    let ev = Evaluator { profile, cluster, micro_batches, memory: opts.memory };
    let mut best = TopK::new(1);
    let mut stack = vec![(Vec::<Stage>::new(), DeviceState::new(cluster), 0usize)];
    while let Some((stages, state, j)) = stack.pop() {
        let free = state.free();
        for r in 1..=free {
            for (_, counts) in state.placements(r)? {
                let mut full = stages.clone();
                full.push(Stage::new(j..n, state.ids_for(&counts)));
                if let Some(p) = ev.score(full)? {
                    best.push(p);
                }
                for j2 in j + 1..n {
                    if r < free {
                        let mut st = state.clone();
                        let ids = st.allocate(&counts)?;
                        let mut prefix = stages.clone();
                        prefix.push(Stage::new(j..j2, ids));
                        stack.push((prefix, st, j2));
                    }
                }
            }
        }
    }
    let top = best.items.into_iter().next().ok_or_else(|| Error::Infeasible("no stage assignment fits in device memory".into()))?;
    finalize(&top, cluster, micro_batches, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with(seps: Vec<usize>, used: Vec<usize>) -> DeviceState {
        let c = ClusterSpec::new(seps, 1e9, 1e9, 0.0, 0.0, u64::MAX).unwrap();
        let mut s = DeviceState::new(&c);
        s.allocate(&used).unwrap();
        s
    }

    #[test]
    fn fresh_first_takes_whole_server() {
        let s = state_with(vec![8, 8], vec![0, 0]);
        assert_eq!(s.ids_for(&s.policy_counts(PlacementPolicy::FreshFirst, 8).unwrap()), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn append_first_fills_used_server() {
        let s = state_with(vec![8, 8], vec![4, 0]);
        assert_eq!(s.ids_for(&s.policy_counts(PlacementPolicy::AppendFirst, 4).unwrap()), vec![4, 5, 6, 7]);
        assert_eq!(s.ids_for(&s.policy_counts(PlacementPolicy::FreshFirst, 4).unwrap()), vec![8, 9, 10, 11]);
    }

    #[test]
    fn scatter_first_spreads_over_fresh_servers() {
        let s = state_with(vec![8, 8], vec![0, 0]);
        assert_eq!(s.ids_for(&s.policy_counts(PlacementPolicy::ScatterFirst, 2).unwrap()), vec![0, 8]);
    }

    #[test]
    fn scatter_first_prefers_used_servers() {
        let s = state_with(vec![4, 4, 4], vec![2, 1, 0]);
        assert_eq!(s.ids_for(&s.policy_counts(PlacementPolicy::ScatterFirst, 4).unwrap()), vec![2, 3, 5, 6]);
        // spills into the fresh server once the used ones are full
        assert_eq!(s.policy_counts(PlacementPolicy::ScatterFirst, 7).unwrap(), vec![2, 3, 2]);
    }

    #[test]
    fn fresh_first_picks_a_server_that_fits() {
        let s = state_with(vec![1, 2], vec![0, 0]);
        assert_eq!(s.ids_for(&s.policy_counts(PlacementPolicy::FreshFirst, 2).unwrap()), vec![1, 2]);
        assert_eq!(s.ids_for(&s.policy_counts(PlacementPolicy::FreshFirst, 3).unwrap()), vec![0, 1, 2]);
    }

    #[test]
    fn placements_are_deduplicated() {
        let s = state_with(vec![4], vec![0]);
        assert_eq!(enumerate_placements(&s, 2).unwrap(), vec![vec![0, 1]]);
        let s = state_with(vec![8, 8], vec![4, 0]);
        assert_eq!(enumerate_placements(&s, 4).unwrap(), vec![vec![8, 9, 10, 11], vec![4, 5, 6, 7]]);
    }

    #[test]
    fn placement_beyond_free_is_an_error() {
        let s = state_with(vec![2, 2], vec![2, 1]);
        assert!(matches!(enumerate_placements(&s, 2), Err(Error::InsufficientGpus { requested: 2, free: 1 })));
        assert!(enumerate_placements(&s, 0).is_err());
    }

    #[test]
    fn memory_accounting_is_linear() {
        let mut c = StageCost::compute(1.0, 1.0);
        assert!(memory_feasible(&c, 3, 1));
        c.param_bytes = 10;
        c.activation_stash_bytes = 60;
        // 10*4 + 60 = 100
        assert!(memory_feasible(&c, 1, 100));
        assert!(!memory_feasible(&c, 2, 100));
        assert_eq!(MemoryModel::default().injection_cap(&c, 100, 8), 1);
        assert_eq!(MemoryModel::default().injection_cap(&c, 1000, 8), 8);
        c.param_bytes = 1000;
        assert!(!memory_feasible(&c, 1, 100));
        assert_eq!(MemoryModel::default().injection_cap(&c, 100, 8), 0);
    }

    fn flat(g: usize) -> ClusterSpec {
        ClusterSpec::new(vec![g], 1e10, 1e10, 0.0, 0.0, u64::MAX).unwrap()
    }

    #[test]
    fn single_layer_uses_one_stage_on_all_gpus() {
        let p = ModelProfile::uniform(1, 1.0, 2.0, 0, 0).unwrap();
        let plan = plan(&p, &flat(4), 8, &PlannerOptions::default()).unwrap();
        assert_eq!(plan.stages, vec![Stage::new(0..1, vec![0, 1, 2, 3])]);
    }

    #[test]
    fn uniform_zero_comm_prefers_data_parallel() {
        let p = ModelProfile::uniform(16, 1e-3, 2e-3, 0, 0).unwrap();
        let c = ClusterSpec::new(vec![8, 8], 1e11, 1e10, 0.0, 0.0, u64::MAX).unwrap();
        let plan = plan(&p, &c, 16, &PlannerOptions::default()).unwrap();
        assert_eq!(plan.num_stages(), 1);
        assert_eq!(plan.stages[0].replication(), 16);
        assert!((plan.est_latency - 16.0 * 3e-3).abs() < 1e-15);
        assert!((plan.sim_latency.unwrap() - plan.est_latency).abs() < 1e-15);
    }

    #[test]
    fn single_gpu_single_layer() {
        let p = ModelProfile::uniform(1, 1.0, 1.0, 0, 0).unwrap();
        let c = flat(1);
        let bf = brute_force_plan(&p, &c, 1, BruteForceLimits::default(), &PlannerOptions::default()).unwrap();
        assert_eq!(bf.stages, vec![Stage::new(0..1, vec![0])]);
        assert_eq!(bf.est_latency, 2.0);
    }

    #[test]
    fn brute_force_enforces_limits() {
        let p = ModelProfile::uniform(9, 1.0, 1.0, 0, 0).unwrap();
        assert!(matches!(
            brute_force_plan(&p, &flat(2), 2, BruteForceLimits::default(), &PlannerOptions::default()),
            Err(Error::LimitsExceeded(_))
        ));
    }

    #[test]
    fn symmetric_two_layer_matches_oracle() {
        let p = ModelProfile::uniform(2, 1.0, 2.0, 0, 0).unwrap();
        let c = flat(2);
        let opts = PlannerOptions::default();
        let dp = plan(&p, &c, 4, &opts).unwrap();
        let bf = brute_force_plan(&p, &c, 4, BruteForceLimits::default(), &opts).unwrap();
        assert_eq!(dp.est_latency, bf.est_latency);
    }

    #[test]
    fn infeasible_memory_is_reported() {
        let p = ModelProfile::uniform(2, 1.0, 2.0, 0, 1000).unwrap();
        let c = ClusterSpec::new(vec![2], 1e9, 1e9, 0.0, 0.0, 10).unwrap();
        assert!(matches!(plan(&p, &c, 4, &PlannerOptions::default()), Err(Error::Infeasible(_))));
    }

    #[test]
    fn simulate_plan_matches_finalize() {
        let p = ModelProfile::uniform(4, 1e-3, 2e-3, 1 << 20, 1 << 20).unwrap();
        let c = ClusterSpec::new(vec![2, 2], 1e10, 1e9, 1e-6, 1e-5, u64::MAX).unwrap();
        for pl in plan_ranked(&p, &c, 8, &PlannerOptions::default()).unwrap() {
            assert_eq!(Some(simulate_plan(&pl, &p, &c).unwrap()), pl.sim_latency);
        }
    }

    #[test]
    fn ranked_plans_are_sorted_and_distinct() {
        let p = ModelProfile::uniform(6, 1e-3, 2e-3, 1 << 22, 1 << 24).unwrap();
        let c = ClusterSpec::new(vec![2, 2], 1e10, 1e9, 1e-6, 1e-5, u64::MAX).unwrap();
        let ranked = plan_ranked(&p, &c, 8, &PlannerOptions::default()).unwrap();
        assert_eq!(ranked.len(), 8);
        for w in ranked.windows(2) {
            assert!(w[0].est_latency <= w[1].est_latency);
            assert_ne!(w[0].stages, w[1].stages);
        }
    }
}
