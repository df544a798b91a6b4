//! Closed-form batch-latency estimate: warmup, steady and ending phases
//! anchored at a pivot stage.

use serde::Serialize;

use crate::costmodel::{allreduce_time, splitconcat_time};
use crate::error::Result;
use crate::model::{aggregate_stage, ClusterSpec, ModelProfile, PipelinePlan, Stage, StageCost, StageCostSequence};

const TIE_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyBreakdown {
    pub warmup: f64,
    pub steady: f64,
    pub ending: f64,
    pub total: f64,
    pub pivot: usize,
}

/// Expands a plan into compute stages with a communication stage between
/// every adjacent pair.
pub fn build_stage_sequence(plan: &PipelinePlan, profile: &ModelProfile, cluster: &ClusterSpec) -> Result<StageCostSequence> {
    plan.validate(profile, cluster)?;
    stage_sequence(&plan.stages, profile, cluster)
}

/// Same as [`build_stage_sequence`] for a bare stage list, without the plan
/// level checks.
pub fn stage_sequence(stages: &[Stage], profile: &ModelProfile, cluster: &ClusterSpec) -> Result<StageCostSequence> {
    let mut seq = Vec::with_capacity(2 * stages.len().max(1) - 1);
    for (s, stage) in stages.iter().enumerate() {
        if s > 0 {
            let below = &stages[s - 1];
            let prev: &StageCost = seq.last().expect("compute stage precedes boundary");
            let bytes = prev.activation_out_bytes;
            let t = splitconcat_time(bytes, &below.devices, &stage.devices, cluster)?;
            seq.push(StageCost::communication(t, bytes));
        }
        let cost = aggregate_stage(profile, stage.layers(), stage.replication())?;
        let ar = allreduce_time(cost.param_bytes, &stage.devices, cluster)?;
        seq.push(cost.with_allreduce(ar));
    }
    Ok(StageCostSequence(seq))
}

/// Walks from the top stage down, moving the pivot to a lower stage `s`
/// whenever its bubble-free steady phase outlasts the current pivot's steady
/// phase plus the stages in between. Ties, up to rounding, keep the higher
/// stage.
pub fn select_pivot(seq: &StageCostSequence, micro_batches: usize) -> usize {
    let stages = seq.stages();
    assert!(!stages.is_empty(), "empty stage sequence");
    let steady = |s: usize| (micro_batches.saturating_sub(1)) as f64 * stages[s].busy();
    let mut q = stages.len() - 1;
    for s in (0..stages.len() - 1).rev() {
        let between: f64 = stages[s + 1..q].iter().map(StageCost::busy).sum();
        if steady(s) > (steady(q) + between) * (1.0 + TIE_REL) {
            q = s;
        }
    }
    q
}

/// `L = T_w + T_s + T_e` with the pivot chosen by [`select_pivot`].
pub fn estimate_latency(seq: &StageCostSequence, micro_batches: usize) -> LatencyBreakdown {
    let stages = seq.stages();
    let q = select_pivot(seq, micro_batches);
    let warmup: f64 = stages[..=q].iter().map(|c| c.fwd).sum();
    let steady = (micro_batches.saturating_sub(1)) as f64 * stages[q].busy();
    // Stages at or below the pivot drain after it; stages above it have
    // already finished their last backward.
    let ending = (0..stages.len())
        .map(|s| {
            let drain = if s > q {
                -stages[q..=s].iter().map(|c| c.bwd).sum::<f64>()
            } else {
                stages[s..=q].iter().map(|c| c.bwd).sum::<f64>()
            };
            stages[s].allreduce_time + drain
        })
        .fold(f64::NEG_INFINITY, f64::max);
    LatencyBreakdown { warmup, steady, ending, total: warmup + steady + ending, pivot: q }
}

/// Activation communication ratio: mean `F+B` of the communication stages
/// over mean `F+B` of the compute stages.
pub fn compute_acr(seq: &StageCostSequence) -> f64 {
    let (mut comm, mut n_comm, mut comp, mut n_comp) = (0.0, 0usize, 0.0, 0usize);
    for c in seq.stages() {
        if c.is_compute() {
            comp += c.busy();
            n_comp += 1;
        } else {
            comm += c.busy();
            n_comm += 1;
        }
    }
    if n_comm == 0 || n_comp == 0 || comp == 0.0 {
        return 0.0;
    }
    (comm / n_comm as f64) / (comp / n_comp as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(f: &[f64], b: &[f64]) -> StageCostSequence {
        StageCostSequence::from_compute(f, b)
    }

    #[test]
    fn uniform_keeps_top_pivot() {
        assert_eq!(select_pivot(&seq(&[1.0; 4], &[2.0; 4]), 7), 3);
    }

    #[test]
    fn heavy_bottom_stage_becomes_pivot() {
        // F+B = [9,3,3], M=4: 27 > 9 + 3
        assert_eq!(select_pivot(&seq(&[3.0, 1.0, 1.0], &[6.0, 2.0, 2.0]), 4), 0);
    }

    #[test]
    fn unbalanced_middle_stage_is_pivot() {
        assert_eq!(select_pivot(&seq(&[1.0, 3.0, 1.0], &[2.0, 6.0, 2.0]), 4), 1);
    }

    #[test]
    fn rounding_noise_does_not_move_pivot() {
        // 10e-3/10 and 6e-3/6 differ in the last bit
        let s = seq(&[10e-3 / 10.0, 0.0, 6e-3 / 6.0], &[20e-3 / 10.0, 0.0, 12e-3 / 6.0]);
        assert_eq!(select_pivot(&s, 16), 2);
    }

    #[test]
    fn low_pivot_can_undercut_serial_path() {
        // stages above a low pivot do not enter the ending phase
        let s = seq(&[8.0, 0.01, 4.8], &[3.3, 9.1, 0.01]);
        let l = estimate_latency(&s, 2);
        assert_eq!(l.pivot, 0);
        let serial: f64 = s.stages().iter().map(StageCost::busy).sum();
        assert!(l.total < serial);
        let tl = crate::simulator::dapple_schedule(&s, 2, &[2, 2, 1]).unwrap();
        assert!(crate::simulator::batch_latency(&tl, &s) >= serial);
    }

    #[test]
    fn single_block_pair() {
        let l = estimate_latency(&seq(&[1.5], &[2.5]), 1);
        assert_eq!(l.total, 4.0);
        assert_eq!(l.pivot, 0);
    }

    #[test]
    fn even_four_stage_pipeline() {
        let l = estimate_latency(&seq(&[1.0; 4], &[2.0; 4]), 7);
        assert_eq!((l.pivot, l.warmup, l.steady, l.ending, l.total), (3, 4.0, 18.0, 8.0, 30.0));
    }

    #[test]
    fn unbalanced_three_stage_pipeline() {
        let l = estimate_latency(&seq(&[1.0, 3.0, 1.0], &[2.0, 6.0, 2.0]), 4);
        assert_eq!((l.pivot, l.warmup, l.steady, l.ending, l.total), (1, 4.0, 27.0, 8.0, 39.0));
    }

    #[test]
    fn allreduce_on_bottom_stage_extends_ending() {
        let mut s = seq(&[1.0; 3], &[2.0; 3]);
        s.0[0].allreduce_time = 100.0;
        let l = estimate_latency(&s, 4);
        assert_eq!(l.ending, 106.0);
        let mut s = seq(&[1.0; 3], &[2.0; 3]);
        s.0[2].allreduce_time = 100.0;
        // the pivot itself drains its own last backward
        assert_eq!(estimate_latency(&s, 4).ending, 102.0);
    }

    #[test]
    fn acr_definition() {
        assert_eq!(compute_acr(&seq(&[1.0], &[2.0])), 0.0);
        let mut v = seq(&[0.25, 0.25], &[0.75, 0.75]).0;
        v.insert(1, StageCost::communication(0.05, 0));
        let s = StageCostSequence(v);
        assert!((compute_acr(&s) - 0.1).abs() < 1e-15);
        let doubled = StageCostSequence(
            s.stages().iter().map(|c| if c.is_compute() { c.clone() } else { StageCost::communication(0.1, 0) }).collect(),
        );
        assert!((compute_acr(&doubled) - 0.2).abs() < 1e-15);
    }

    fn cluster() -> ClusterSpec {
        ClusterSpec::new(vec![8, 8], 100e9, 10e9, 1e-6, 5e-6, u64::MAX).unwrap()
    }

    #[test]
    fn single_stage_sequence_has_no_boundaries() {
        let p = ModelProfile::uniform(4, 1.0, 2.0, 10, 10).unwrap();
        let plan = PipelinePlan::from_stages(vec![Stage::new(0..4, vec![0, 1])], 4);
        let s = build_stage_sequence(&plan, &p, &cluster()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].fwd, 2.0);
        assert!(s[0].allreduce_time > 0.0);
    }

    #[test]
    fn zero_activation_boundary_costs_latency_only() {
        let p = ModelProfile::uniform(4, 1.0, 2.0, 0, 0).unwrap();
        let plan = PipelinePlan::from_stages(vec![Stage::new(0..2, vec![0]), Stage::new(2..4, vec![1])], 4);
        let s = build_stage_sequence(&plan, &p, &cluster()).unwrap();
        assert_eq!(s.len(), 3);
        assert!(!s[1].is_compute());
        assert_eq!((s[1].fwd, s[1].bwd), (1e-6, 1e-6));
        assert_eq!(s[1].allreduce_time, 0.0);
    }

    #[test]
    fn cross_server_boundary_uses_inter_link() {
        let p = ModelProfile::uniform(4, 1.0, 2.0, 1_000_000, 0).unwrap();
        let plan = PipelinePlan::from_stages(
            vec![Stage::new(0..2, (0..8).collect()), Stage::new(2..4, (8..16).collect())],
            4,
        );
        let s = build_stage_sequence(&plan, &p, &cluster()).unwrap();
        let per_flow = 1e6 / 64.0;
        assert!((s[1].fwd - (per_flow / 10e9 + 5e-6)).abs() < 1e-18);
    }

    fn arb_seq() -> impl Strategy<Value = StageCostSequence> {
        prop::collection::vec((0.01f64..10.0, 0.01f64..10.0, 0.0f64..5.0), 1..8).prop_map(|v| {
            StageCostSequence(v.into_iter().map(|(f, b, ar)| StageCost::compute(f, b).with_allreduce(ar)).collect())
        })
    }

    proptest! {
        #[test]
        fn time_scaling_equivariance(s in arb_seq(), m in 1usize..32, k in prop::sample::select(vec![0.5, 2.0, 4.0, 0.25])) {
            // powers of two keep the arithmetic exact
            let a = estimate_latency(&s, m);
            let b = estimate_latency(&s.scaled(k), m);
            prop_assert_eq!(a.pivot, b.pivot);
            prop_assert_eq!(a.total * k, b.total);
            prop_assert_eq!(a.warmup * k, b.warmup);
            prop_assert_eq!(a.steady * k, b.steady);
            prop_assert_eq!(a.ending * k, b.ending);
        }

        #[test]
        fn breakdown_adds_up(s in arb_seq(), m in 1usize..32) {
            let l = estimate_latency(&s, m);
            prop_assert_eq!(l.total, l.warmup + l.steady + l.ending);
            prop_assert_eq!(l.steady, (m - 1) as f64 * s[l.pivot].busy());
        }

        #[test]
        fn latency_lower_bounds(s in arb_seq(), m in 1usize..32) {
            let zero_ar = StageCostSequence(s.stages().iter().map(|c| c.clone().with_allreduce(0.0)).collect());
            let l = estimate_latency(&zero_ar, m).total;
            let max_busy = zero_ar.stages().iter().map(StageCost::busy).fold(0.0, f64::max);
            let sum_all: f64 = zero_ar.stages().iter().map(StageCost::busy).sum();
            let tol = 1e-9 * l;
            prop_assert!(l + tol >= (m - 1) as f64 * max_busy);
            if select_pivot(&zero_ar, m) == zero_ar.len() - 1 {
                prop_assert!(l + tol >= sum_all);
            }
        }

        #[test]
        fn top_pivot_ending_is_total_backward(n in 1usize..8, f in 0.1f64..3.0, b in 0.1f64..3.0, m in 1usize..32) {
            let s = StageCostSequence::from_compute(&vec![f; n], &vec![b; n]);
            let l = estimate_latency(&s, m);
            prop_assert_eq!(l.pivot, n - 1);
            let expect: f64 = vec![b; n].iter().sum();
            prop_assert!((l.ending - expect).abs() <= 1e-12 * expect);
        }
    }
}
