//! Domain types: layer profiles, cluster topology, pipeline plans and the
//! per-stage cost records consumed by the estimator and the simulator.
//!
//! Times are kept in seconds (`f64`) and sizes in bytes (`u64`). The JSON
//! file formats use microseconds and GB/s, and are converted on load.

use std::io::Read;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const US_PER_S: f64 = 1e6;
const GB: f64 = 1e9;

/// Profiled costs of a single layer for one micro-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub index: usize,
    /// Forward time in seconds.
    pub fwd_time: f64,
    /// Backward time in seconds.
    pub bwd_time: f64,
    /// Size of the layer's output activation.
    pub activation_bytes: u64,
    pub param_bytes: u64,
}

/// A chain of layers as produced by the profiler.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelProfile {
    layers: Vec<LayerProfile>,
    profile_batch_size: u32,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    profile_batch_size: u32,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    fwd_time_us: f64,
    bwd_time_us: f64,
    activation_bytes: u64,
    param_bytes: u64,
}

impl ModelProfile {
    /// Builds a profile from `(fwd, bwd, activation_bytes, param_bytes)` rows.
    pub fn from_layers(
        rows: impl IntoIterator<Item = (f64, f64, u64, u64)>,
        profile_batch_size: u32,
    ) -> Result<Self> {
        let layers = rows
            .into_iter()
            .enumerate()
            .map(|(index, (fwd_time, bwd_time, activation_bytes, param_bytes))| LayerProfile {
                index,
                fwd_time,
                bwd_time,
                activation_bytes,
                param_bytes,
            })
            .collect();
        let profile = Self { layers, profile_batch_size };
        profile.validate()?;
        Ok(profile)
    }

    /// `n` identical layers.
    pub fn uniform(n: usize, fwd: f64, bwd: f64, activation_bytes: u64, param_bytes: u64) -> Result<Self> {
        Self::from_layers(std::iter::repeat_n((fwd, bwd, activation_bytes, param_bytes), n), 1)
    }

    pub fn layers(&self) -> &[LayerProfile] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn profile_batch_size(&self) -> u32 {
        self.profile_batch_size
    }

    pub fn total_fwd(&self) -> f64 {
        self.layers.iter().map(|l| l.fwd_time).sum()
    }

    pub fn total_bwd(&self) -> f64 {
        self.layers.iter().map(|l| l.bwd_time).sum()
    }

    /// Rescales times and activation sizes linearly from the profiled batch
    /// size to `micro_batch_size`. Parameter sizes do not depend on the batch.
    pub fn scaled_to_batch(&self, micro_batch_size: u32) -> Result<Self> {
        if micro_batch_size == 0 {
            return Err(Error::Invalid("micro batch size must be >= 1".into()));
        }
        let k = f64::from(micro_batch_size) / f64::from(self.profile_batch_size);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerProfile {
                fwd_time: l.fwd_time * k,
                bwd_time: l.bwd_time * k,
                activation_bytes: (l.activation_bytes as f64 * k).round() as u64,
                ..l.clone()
            })
            .collect();
        Ok(Self { layers, profile_batch_size: micro_batch_size })
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("profile must contain N >= 1 layers".into()));
        }
        if self.profile_batch_size == 0 {
            return Err(Error::Invalid("profile_batch_size must be >= 1".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.index != i {
                return Err(Error::Invalid(format!("layer indices must be contiguous from 0 (got {} at {i})", l.index)));
            }
            if !(l.fwd_time.is_finite() && l.fwd_time >= 0.0) {
                return Err(Error::Invalid(format!("layer {i}: fwd_time must be >= 0")));
            }
            if !(l.bwd_time.is_finite() && l.bwd_time >= 0.0) {
                return Err(Error::Invalid(format!("layer {i}: bwd_time must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ProfileFile {
            profile_batch_size: self.profile_batch_size,
            layers: self
                .layers
                .iter()
                .map(|l| LayerEntry {
                    fwd_time_us: l.fwd_time * US_PER_S,
                    bwd_time_us: l.bwd_time * US_PER_S,
                    activation_bytes: l.activation_bytes,
                    param_bytes: l.param_bytes,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("profile serializes")
    }
}

/// Parses and validates a profile JSON document.
pub fn load_profile<R: Read>(source: R) -> Result<ModelProfile> {
    let file: ProfileFile = serde_json::from_reader(source).map_err(|e| Error::parse("profile", e))?;
    let rows = file.layers.iter().map(|l| (l.fwd_time_us / US_PER_S, l.bwd_time_us / US_PER_S, l.activation_bytes, l.param_bytes));
    let profile = ModelProfile::from_layers(rows.collect::<Vec<_>>(), file.profile_batch_size)?;
    Ok(profile)
}

/// GPUs grouped into servers, plus the two link classes connecting them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    /// Per-server GPU counts, e.g. `[8, 8]`.
    pub seps: Vec<usize>,
    /// bytes/sec between GPUs of one server
    pub intra_bw: f64,
    /// bytes/sec between servers
    pub inter_bw: f64,
    pub intra_latency: f64,
    pub inter_latency: f64,
    pub per_gpu_memory: u64,
}

#[derive(Serialize, Deserialize)]
struct ClusterFile {
    seps: Vec<usize>,
    intra_bw_gbps: f64,
    inter_bw_gbps: f64,
    intra_latency_us: f64,
    inter_latency_us: f64,
    per_gpu_memory_gb: f64,
}

impl ClusterSpec {
    pub fn new(
        seps: Vec<usize>,
        intra_bw: f64,
        inter_bw: f64,
        intra_latency: f64,
        inter_latency: f64,
        per_gpu_memory: u64,
    ) -> Result<Self> {
        let spec = Self { seps, intra_bw, inter_bw, intra_latency, inter_latency, per_gpu_memory };
        spec.validate()?;
        Ok(spec)
    }

    /// `servers` machines with `per_server` GPUs each.
    pub fn homogeneous(servers: usize, per_server: usize, intra_bw: f64, inter_bw: f64) -> Result<Self> {
        Self::new(vec![per_server; servers], intra_bw, inter_bw, 0.0, 0.0, u64::MAX)
    }

    fn validate(&self) -> Result<()> {
        if self.seps.is_empty() || self.seps.iter().any(|&c| c == 0) {
            return Err(Error::Invalid("every server must hold >= 1 GPU".into()));
        }
        if !(self.intra_bw > 0.0 && self.inter_bw > 0.0) {
            return Err(Error::Invalid("bandwidths must be > 0".into()));
        }
        if !(self.intra_latency >= 0.0 && self.inter_latency >= 0.0) {
            return Err(Error::Invalid("latencies must be >= 0".into()));
        }
        Ok(())
    }

    /// Total GPU count `G`.
    pub fn num_gpus(&self) -> usize {
        self.seps.iter().sum()
    }

    pub fn num_servers(&self) -> usize {
        self.seps.len()
    }

    /// First global id on each server.
    pub fn server_offsets(&self) -> Vec<usize> {
        self.seps
            .iter()
            .scan(0, |acc, &c| {
                let start = *acc;
                *acc += c;
                Some(start)
            })
            .collect()
    }

    pub fn server_of(&self, gpu: usize) -> Option<usize> {
        let mut start = 0;
        for (server, &count) in self.seps.iter().enumerate() {
            if gpu < start + count {
                return Some(server);
            }
            start += count;
        }
        None
    }

    pub fn to_json(&self) -> String {
        let file = ClusterFile {
            seps: self.seps.clone(),
            intra_bw_gbps: self.intra_bw / GB,
            inter_bw_gbps: self.inter_bw / GB,
            intra_latency_us: self.intra_latency * US_PER_S,
            inter_latency_us: self.inter_latency * US_PER_S,
            per_gpu_memory_gb: self.per_gpu_memory as f64 / GB,
        };
        serde_json::to_string_pretty(&file).expect("cluster serializes")
    }
}

pub fn load_cluster<R: Read>(source: R) -> Result<ClusterSpec> {
    let f: ClusterFile = serde_json::from_reader(source).map_err(|e| Error::parse("cluster", e))?;
    if !(f.per_gpu_memory_gb > 0.0) {
        return Err(Error::Invalid("per_gpu_memory_gb must be > 0".into()));
    }
    ClusterSpec::new(
        f.seps,
        f.intra_bw_gbps * GB,
        f.inter_bw_gbps * GB,
        f.intra_latency_us / US_PER_S,
        f.inter_latency_us / US_PER_S,
        (f.per_gpu_memory_gb * GB).round() as u64,
    )
}

/// A contiguous layer range placed on a set of GPUs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub layer_lo: usize,
    pub layer_hi: usize,
    /// Sorted global GPU ids.
    pub devices: Vec<usize>,
}

impl Stage {
    pub fn new(layers: Range<usize>, mut devices: Vec<usize>) -> Self {
        devices.sort_unstable();
        Self { layer_lo: layers.start, layer_hi: layers.end, devices }
    }

    pub fn layers(&self) -> Range<usize> {
        self.layer_lo..self.layer_hi
    }

    pub fn replication(&self) -> usize {
        self.devices.len()
    }
}

/// A hybrid data/pipeline parallel plan for one global batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePlan {
    pub stages: Vec<Stage>,
    /// Initial injection count per compute stage, bottom stage first.
    pub phi: Vec<usize>,
    /// Pivot index into the expanded (compute + communication) sequence.
    pub pivot: usize,
    pub micro_batches: usize,
    pub est_latency: f64,
    pub sim_latency: Option<f64>,
    pub acr: f64,
}

impl PipelinePlan {
    /// An unscored plan; the estimator and simulator fill in the rest.
    pub fn from_stages(stages: Vec<Stage>, micro_batches: usize) -> Self {
        let s = stages.len();
        Self {
            stages,
            phi: (0..s).map(|i| (s - i).min(micro_batches.max(1))).collect(),
            pivot: 0,
            micro_batches,
            est_latency: 0.0,
            sim_latency: None,
            acr: 0.0,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Split points: the exclusive upper layer of every stage but the last.
    pub fn split_points(&self) -> Vec<usize> {
        self.stages.iter().take(self.stages.len().saturating_sub(1)).map(|s| s.layer_hi).collect()
    }

    pub fn validate(&self, profile: &ModelProfile, cluster: &ClusterSpec) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidPlan("plan has no stages".into()));
        }
        let mut next = 0;
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.layer_lo != next || stage.layer_lo >= stage.layer_hi {
                return Err(Error::InvalidPlan(format!("stage {s} layer range {:?} leaves a gap or is empty", stage.layers())));
            }
            next = stage.layer_hi;
            if stage.devices.is_empty() {
                return Err(Error::InvalidPlan(format!("stage {s} has no devices")));
            }
        }
        if next != profile.num_layers() {
            return Err(Error::InvalidPlan(format!("stages cover [0,{next}) but the model has {} layers", profile.num_layers())));
        }
        let g = cluster.num_gpus();
        let mut seen = vec![false; g];
        for (s, stage) in self.stages.iter().enumerate() {
            for &d in &stage.devices {
                if d >= g {
                    return Err(Error::UnknownDevice(d));
                }
                if std::mem::replace(&mut seen[d], true) {
                    return Err(Error::InvalidPlan(format!("gpu {d} assigned twice (stage {s})")));
                }
            }
        }
        if self.micro_batches == 0 {
            return Err(Error::InvalidPlan("micro batch count must be >= 1".into()));
        }
        validate_phi(&self.phi, self.stages.len(), self.micro_batches)
    }
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    stages: Vec<StageEntry>,
    phi: Vec<usize>,
    pivot: usize,
    est_latency_us: f64,
    sim_latency_us: Option<f64>,
    acr: f64,
}

#[derive(Serialize, Deserialize)]
struct StageEntry {
    /// Half-open `[lo, hi)`.
    layers: [usize; 2],
    gpus: Vec<usize>,
    replication: usize,
}

impl PipelinePlan {
    pub fn to_json(&self) -> String {
        let file = PlanFile {
            stages: self
                .stages
                .iter()
                .map(|s| StageEntry { layers: [s.layer_lo, s.layer_hi], gpus: s.devices.clone(), replication: s.replication() })
                .collect(),
            phi: self.phi.clone(),
            pivot: self.pivot,
            est_latency_us: self.est_latency * US_PER_S,
            sim_latency_us: self.sim_latency.map(|t| t * US_PER_S),
            acr: self.acr,
        };
        serde_json::to_string_pretty(&file).expect("plan serializes")
    }
}

/// Parses a plan document. The file does not record the micro-batch count,
/// so the caller supplies it.
pub fn load_plan<R: Read>(source: R, micro_batches: usize) -> Result<PipelinePlan> {
    let f: PlanFile = serde_json::from_reader(source).map_err(|e| Error::parse("plan", e))?;
    let mut stages = Vec::with_capacity(f.stages.len());
    for (i, s) in f.stages.into_iter().enumerate() {
        if s.replication != s.gpus.len() {
            return Err(Error::InvalidPlan(format!("stage {i}: replication {} but {} gpus", s.replication, s.gpus.len())));
        }
        stages.push(Stage::new(s.layers[0]..s.layers[1], s.gpus));
    }
    Ok(PipelinePlan {
        stages,
        phi: f.phi,
        pivot: f.pivot,
        micro_batches,
        est_latency: f.est_latency_us / US_PER_S,
        sim_latency: f.sim_latency_us.map(|t| t / US_PER_S),
        acr: f.acr,
    })
}

/// φ must be non-increasing in stage order, within `[1, M]`, and end at 1.
pub fn validate_phi(phi: &[usize], stages: usize, micro_batches: usize) -> Result<()> {
    if phi.len() != stages {
        return Err(Error::InvalidPhi(format!("expected {stages} entries, got {}", phi.len())));
    }
    if phi.iter().any(|&p| p == 0 || p > micro_batches) {
        return Err(Error::InvalidPhi(format!("entries must lie in [1, {micro_batches}]: {phi:?}")));
    }
    if phi.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidPhi(format!("must be non-increasing: {phi:?}")));
    }
    if phi.last() != Some(&1) {
        return Err(Error::InvalidPhi(format!("topmost stage must inject 1: {phi:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Compute,
    Communication,
}

/// Per-micro-batch cost of one entry of the expanded stage sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub kind: StageKind,
    pub fwd: f64,
    pub bwd: f64,
    pub param_bytes: u64,
    pub allreduce_time: f64,
    pub activation_out_bytes: u64,
    /// Activations held per replica between a micro-batch's forward and
    /// backward.
    pub activation_stash_bytes: u64,
}

impl StageCost {
    pub fn compute(fwd: f64, bwd: f64) -> Self {
        Self {
            kind: StageKind::Compute,
            fwd,
            bwd,
            param_bytes: 0,
            allreduce_time: 0.0,
            activation_out_bytes: 0,
            activation_stash_bytes: 0,
        }
    }

    pub fn communication(time: f64, bytes: u64) -> Self {
        Self {
            kind: StageKind::Communication,
            fwd: time,
            bwd: time,
            param_bytes: 0,
            allreduce_time: 0.0,
            activation_out_bytes: bytes,
            activation_stash_bytes: 0,
        }
    }

    pub fn with_allreduce(mut self, t: f64) -> Self {
        self.allreduce_time = t;
        self
    }

    pub fn is_compute(&self) -> bool {
        self.kind == StageKind::Compute
    }

    /// `F + B`
    pub fn busy(&self) -> f64 {
        self.fwd + self.bwd
    }
}

/// Sums a layer range and divides compute by `replication` (each replica
/// processes an even slice of the micro-batch).
pub fn aggregate_stage(profile: &ModelProfile, range: Range<usize>, replication: usize) -> Result<StageCost> {
    if range.start >= range.end || range.end > profile.num_layers() {
        return Err(Error::InvalidRange { lo: range.start, hi: range.end, n: profile.num_layers() });
    }
    if replication == 0 {
        return Err(Error::Invalid("replication must be >= 1".into()));
    }
    let layers = &profile.layers[range];
    let r = replication as f64;
    let fwd: f64 = layers.iter().map(|l| l.fwd_time).sum();
    let bwd: f64 = layers.iter().map(|l| l.bwd_time).sum();
    let stash: u64 = layers.iter().map(|l| l.activation_bytes).sum();
    Ok(StageCost {
        kind: StageKind::Compute,
        fwd: fwd / r,
        bwd: bwd / r,
        param_bytes: layers.iter().map(|l| l.param_bytes).sum(),
        allreduce_time: 0.0,
        activation_out_bytes: layers.last().map_or(0, |l| l.activation_bytes),
        activation_stash_bytes: stash.div_ceil(replication as u64),
    })
}

/// The expanded stage sequence: compute stages interleaved with the
/// communication stages between them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageCostSequence(pub Vec<StageCost>);

impl StageCostSequence {
    /// A pure-compute pipeline with no communication stages.
    pub fn from_compute(fwd: &[f64], bwd: &[f64]) -> Self {
        assert_eq!(fwd.len(), bwd.len(), "fwd/bwd length mismatch");
        Self(fwd.iter().zip(bwd).map(|(&f, &b)| StageCost::compute(f, b)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn stages(&self) -> &[StageCost] {
        &self.0
    }

    pub fn compute_indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, c)| c.is_compute()).map(|(i, _)| i).collect()
    }

    pub fn num_compute(&self) -> usize {
        self.0.iter().filter(|c| c.is_compute()).count()
    }

    /// Multiplies every time (F, B, AR) by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self(
            self.0
                .iter()
                .map(|c| StageCost { fwd: c.fwd * k, bwd: c.bwd * k, allreduce_time: c.allreduce_time * k, ..c.clone() })
                .collect(),
        )
    }
}

impl std::ops::Index<usize> for StageCostSequence {
    type Output = StageCost;

    fn index(&self, i: usize) -> &StageCost {
        &self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_layer() -> ModelProfile {
        ModelProfile::from_layers([(1.0, 2.0, 10, 100), (3.0, 6.0, 20, 300)], 1).unwrap()
    }

    #[test]
    fn loads_profile_in_microseconds() {
        let json = r#"{"profile_batch_size": 4, "layers": [
            {"fwd_time_us": 1000, "bwd_time_us": 2000, "activation_bytes": 5, "param_bytes": 7},
            {"fwd_time_us": 2000, "bwd_time_us": 4000, "activation_bytes": 6, "param_bytes": 8}]}"#;
        let p = load_profile(json.as_bytes()).unwrap();
        assert_eq!(p.num_layers(), 2);
        assert!((p.layers()[0].fwd_time - 1e-3).abs() < 1e-15);
        assert!((p.layers()[1].fwd_time - 2e-3).abs() < 1e-15);
        assert_eq!(p.layers()[1].param_bytes, 8);
        assert_eq!(p.profile_batch_size(), 4);
    }

    #[test]
    fn rejects_negative_backward() {
        let json = r#"{"profile_batch_size": 1, "layers": [
            {"fwd_time_us": 1, "bwd_time_us": -2, "activation_bytes": 0, "param_bytes": 0}]}"#;
        let err = load_profile(json.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("bwd_time"), "{err}");
    }

    #[test]
    fn rejects_empty_layer_list() {
        let err = load_profile(r#"{"profile_batch_size": 1, "layers": []}"#.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("N >= 1"), "{err}");
    }

    #[test]
    fn parse_error_carries_position() {
        let err = load_profile("{\n  \"profile_batch_size\": 1,\n  \"layers\": [oops]\n}".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn loads_cluster() {
        let json = r#"{"seps":[8,8],"intra_bw_gbps":100,"inter_bw_gbps":10,
            "intra_latency_us":1,"inter_latency_us":5,"per_gpu_memory_gb":16}"#;
        let c = load_cluster(json.as_bytes()).unwrap();
        assert_eq!(c.num_gpus(), 16);
        assert_eq!(c.intra_bw, 100e9);
        assert_eq!(c.inter_latency, 5e-6);
        assert_eq!(c.server_of(7), Some(0));
        assert_eq!(c.server_of(8), Some(1));
        assert_eq!(c.server_of(16), None);
        assert_eq!(c.server_offsets(), vec![0, 8]);
    }

    #[test]
    fn rejects_zero_bandwidth() {
        assert!(ClusterSpec::new(vec![2], 0.0, 1.0, 0.0, 0.0, 1).is_err());
        assert!(ClusterSpec::new(vec![2, 0], 1.0, 1.0, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn aggregate_sums_range() {
        let p = two_layer();
        let c = aggregate_stage(&p, 0..2, 1).unwrap();
        assert_eq!(c.fwd, 4.0);
        assert_eq!(c.bwd, 8.0);
        assert_eq!(c.param_bytes, 400);
        assert_eq!(c.activation_out_bytes, 20);
    }

    #[test]
    fn aggregate_replication_halves_compute_only() {
        let p = two_layer();
        let c = aggregate_stage(&p, 0..2, 2).unwrap();
        assert_eq!(c.fwd, 2.0);
        assert_eq!(c.bwd, 4.0);
        assert_eq!(c.param_bytes, 400);
    }

    #[test]
    fn aggregate_single_layer_is_identity() {
        let p = two_layer();
        let c = aggregate_stage(&p, 0..1, 1).unwrap();
        assert_eq!((c.fwd, c.bwd, c.param_bytes, c.activation_out_bytes), (1.0, 2.0, 100, 10));
    }

    #[test]
    fn aggregate_rejects_bad_ranges() {
        let p = two_layer();
        assert!(aggregate_stage(&p, 1..1, 1).is_err());
        assert!(aggregate_stage(&p, 0..3, 1).is_err());
        assert!(aggregate_stage(&p, 0..1, 0).is_err());
    }

    #[test]
    fn phi_validation() {
        assert!(validate_phi(&[5, 3, 1], 3, 16).is_ok());
        assert!(validate_phi(&[3, 5, 1], 3, 16).is_err());
        assert!(validate_phi(&[5, 3, 2], 3, 16).is_err());
        assert!(validate_phi(&[5, 3, 1], 3, 4).is_err());
        assert!(validate_phi(&[1, 1], 3, 4).is_err());
    }

    #[test]
    fn plan_validation_catches_gaps_and_overlaps() {
        let p = two_layer();
        let c = ClusterSpec::homogeneous(1, 2, 1.0, 1.0).unwrap();
        let ok = PipelinePlan::from_stages(vec![Stage::new(0..1, vec![0]), Stage::new(1..2, vec![1])], 4);
        ok.validate(&p, &c).unwrap();
        let gap = PipelinePlan::from_stages(vec![Stage::new(0..1, vec![0])], 4);
        assert!(gap.validate(&p, &c).is_err());
        let dup = PipelinePlan::from_stages(vec![Stage::new(0..1, vec![0]), Stage::new(1..2, vec![0])], 4);
        assert!(dup.validate(&p, &c).is_err());
        let unknown = PipelinePlan::from_stages(vec![Stage::new(0..2, vec![5])], 4);
        assert!(matches!(unknown.validate(&p, &c), Err(Error::UnknownDevice(5))));
    }

    fn arb_profile() -> impl Strategy<Value = ModelProfile> {
        arb_profile_min(1)
    }

    fn arb_profile_min(min_layers: usize) -> impl Strategy<Value = ModelProfile> {
        prop::collection::vec((0u32..10_000, 0u32..10_000, 0u64..1 << 30, 0u64..1 << 30), min_layers..12).prop_map(|rows| {
            ModelProfile::from_layers(
                rows.into_iter().map(|(f, b, a, p)| (f64::from(f) * 1e-6, f64::from(b) * 1e-6, a, p)),
                1,
            )
            .unwrap()
        })
    }

    #[test]
    fn plan_json_round_trips() {
        let mut plan = PipelinePlan::from_stages(vec![Stage::new(0..1, vec![1, 0]), Stage::new(1..2, vec![2])], 4);
        plan.phi = vec![2, 1];
        plan.pivot = 2;
        plan.est_latency = 0.25;
        plan.sim_latency = Some(0.5);
        plan.acr = 0.1;
        let json = plan.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["stages"][0]["layers"], serde_json::json!([0, 1]));
        assert_eq!(v["stages"][0]["gpus"], serde_json::json!([0, 1]));
        assert_eq!(v["stages"][0]["replication"], 2);
        assert_eq!(v["est_latency_us"], 250000.0);
        assert_eq!(load_plan(json.as_bytes(), 4).unwrap(), plan);
    }

    #[test]
    fn plan_replication_must_match_gpus() {
        let json = r#"{"stages":[{"layers":[0,1],"gpus":[0,1],"replication":3}],"phi":[1],"pivot":0,
            "est_latency_us":1,"sim_latency_us":null,"acr":0}"#;
        assert!(matches!(load_plan(json.as_bytes(), 2), Err(Error::InvalidPlan(_))));
    }

    proptest! {
        #[test]
        fn aggregate_is_additive(p in arb_profile_min(2), cut in 0usize..100, end in 0usize..100) {
            let n = p.num_layers();
            let c = 2 + end % (n - 1);
            let c = c.min(n);
            let b = 1 + cut % (c - 1);
            let whole = aggregate_stage(&p, 0..c, 1).unwrap();
            let lo = aggregate_stage(&p, 0..b, 1).unwrap();
            let hi = aggregate_stage(&p, b..c, 1).unwrap();
            prop_assert!((whole.fwd - (lo.fwd + hi.fwd)).abs() <= 1e-12 * whole.fwd.max(1.0));
            prop_assert!((whole.bwd - (lo.bwd + hi.bwd)).abs() <= 1e-12 * whole.bwd.max(1.0));
            prop_assert_eq!(whole.param_bytes, lo.param_bytes + hi.param_bytes);
            prop_assert_eq!(whole.activation_out_bytes, hi.activation_out_bytes);
        }

        #[test]
        fn replication_scales_exactly(p in arb_profile(), r in 1usize..16) {
            let n = p.num_layers();
            let one = aggregate_stage(&p, 0..n, 1).unwrap();
            let many = aggregate_stage(&p, 0..n, r).unwrap();
            prop_assert_eq!(many.fwd, one.fwd / r as f64);
            prop_assert_eq!(many.bwd, one.bwd / r as f64);
            prop_assert_eq!(many.param_bytes, one.param_bytes);
        }

        #[test]
        fn profile_json_round_trips(p in arb_profile()) {
            let back = load_profile(p.to_json().as_bytes()).unwrap();
            prop_assert_eq!(back.num_layers(), p.num_layers());
            for (a, b) in back.layers().iter().zip(p.layers()) {
                prop_assert!((a.fwd_time - b.fwd_time).abs() <= 1e-15);
                prop_assert!((a.bwd_time - b.bwd_time).abs() <= 1e-15);
                prop_assert_eq!(a.activation_bytes, b.activation_bytes);
                prop_assert_eq!(a.param_bytes, b.param_bytes);
            }
        }
    }
}
