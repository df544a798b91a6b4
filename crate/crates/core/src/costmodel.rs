//! Communication cost laws over a two-level (intra/inter server) topology.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ClusterSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    IntraServer,
    InterServer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkClass {
    pub kind: LinkKind,
    /// bytes/sec
    pub bandwidth: f64,
    /// seconds per transfer
    pub latency: f64,
}

impl LinkClass {
    pub fn transfer_time(&self, bytes: f64) -> f64 {
        bytes / self.bandwidth + self.latency
    }
}

impl ClusterSpec {
    pub fn link(&self, kind: LinkKind) -> LinkClass {
        match kind {
            LinkKind::IntraServer => LinkClass { kind, bandwidth: self.intra_bw, latency: self.intra_latency },
            LinkKind::InterServer => LinkClass { kind, bandwidth: self.inter_bw, latency: self.inter_latency },
        }
    }

    fn server_checked(&self, gpu: usize) -> Result<usize> {
        self.server_of(gpu).ok_or(Error::UnknownDevice(gpu))
    }
}

/// Ring AllReduce of `size` bytes among `devices`.
///
/// `2(r-1)/r * size / bw + 2(r-1) * latency`, where the link class is the
/// slowest one the ring has to cross.
pub fn allreduce_time(size: u64, devices: &[usize], cluster: &ClusterSpec) -> Result<f64> {
    if devices.is_empty() {
        return Err(Error::Invalid("allreduce over an empty device set".into()));
    }
    let first = cluster.server_checked(devices[0])?;
    let mut spans = false;
    for &d in &devices[1..] {
        spans |= cluster.server_checked(d)? != first;
    }
    let r = devices.len();
    if r == 1 {
        return Ok(0.0);
    }
    let link = cluster.link(if spans { LinkKind::InterServer } else { LinkKind::IntraServer });
    let steps = 2.0 * (r - 1) as f64;
    Ok(steps / r as f64 * size as f64 / link.bandwidth + steps * link.latency)
}

/// Split-Concat transfer of `size` activation bytes from the replicas in
/// `src` to the replicas in `dst`.
///
/// The payload is split evenly into `|src|·|dst|` streams that run
/// concurrently; streams between the same pair of GPUs are merged and the
/// transfer finishes with the slowest merged stream. A stream whose source
/// and destination are the same GPU costs nothing.
pub fn splitconcat_time(size: u64, src: &[usize], dst: &[usize], cluster: &ClusterSpec) -> Result<f64> {
    if src.is_empty() || dst.is_empty() {
        return Err(Error::Invalid("split-concat needs non-empty source and destination sets".into()));
    }
    let src_servers = src.iter().map(|&g| cluster.server_checked(g)).collect::<Result<Vec<_>>>()?;
    let dst_servers = dst.iter().map(|&g| cluster.server_checked(g)).collect::<Result<Vec<_>>>()?;
    let per_flow = size as f64 / (src.len() * dst.len()) as f64;
    let mut streams: BTreeMap<(usize, usize), (f64, LinkKind)> = BTreeMap::new();
    for (&s, &ss) in src.iter().zip(&src_servers) {
        for (&d, &ds) in dst.iter().zip(&dst_servers) {
            if s == d {
                continue;
            }
            let kind = if ss == ds { LinkKind::IntraServer } else { LinkKind::InterServer };
            streams.entry((s, d)).or_insert((0.0, kind)).0 += per_flow;
        }
    }
    Ok(streams
        .values()
        .map(|&(bytes, kind)| cluster.link(kind).transfer_time(bytes))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GIB: u64 = 1_000_000_000;

    fn cluster(seps: Vec<usize>, intra: f64, inter: f64, lat: f64) -> ClusterSpec {
        ClusterSpec::new(seps, intra, inter, lat, lat, u64::MAX).unwrap()
    }

    #[test]
    fn allreduce_singleton_is_free() {
        let c = cluster(vec![8, 8], 100e9, 10e9, 1e-5);
        assert_eq!(allreduce_time(GIB, &[0], &c).unwrap(), 0.0);
    }

    #[test]
    fn allreduce_ring_intra() {
        let c = cluster(vec![8, 8], 100e9, 10e9, 0.0);
        let t = allreduce_time(GIB, &[0, 1], &c).unwrap();
        assert!((t - 0.01).abs() < 1e-15, "{t}");
    }

    #[test]
    fn allreduce_across_servers_is_slower() {
        let c = cluster(vec![8, 8], 100e9, 10e9, 0.0);
        let intra = allreduce_time(GIB, &[0, 1], &c).unwrap();
        let inter = allreduce_time(GIB, &[0, 8], &c).unwrap();
        assert!(inter > intra);
    }

    #[test]
    fn allreduce_latency_term() {
        let c = cluster(vec![4], 1e9, 1e9, 1e-3);
        let t = allreduce_time(0, &[0, 1, 2, 3], &c).unwrap();
        assert!((t - 6e-3).abs() < 1e-15);
    }

    #[test]
    fn unknown_device_is_rejected() {
        let c = cluster(vec![2], 1e9, 1e9, 0.0);
        assert!(matches!(allreduce_time(1, &[0, 9], &c), Err(Error::UnknownDevice(9))));
        assert!(matches!(splitconcat_time(1, &[0], &[2], &c), Err(Error::UnknownDevice(2))));
    }

    #[test]
    fn splitconcat_zero_payload_same_devices() {
        let c = cluster(vec![2], 1e9, 1e9, 1e-3);
        assert_eq!(splitconcat_time(0, &[0, 1], &[0, 1], &c).unwrap(), 1e-3);
        assert_eq!(splitconcat_time(0, &[0], &[0], &c).unwrap(), 0.0);
    }

    #[test]
    fn splitconcat_single_flow() {
        let c = cluster(vec![1, 1], 100e9, 10e9, 0.0);
        let t = splitconcat_time(GIB, &[0], &[1], &c).unwrap();
        assert!((t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn splitconcat_even_split_bounded_by_slowest() {
        let c = cluster(vec![8, 8], 100e9, 10e9, 2e-6);
        let t = splitconcat_time(GIB, &[0], &[8, 9], &c).unwrap();
        assert!((t - (0.05 + 2e-6)).abs() < 1e-15, "{t}");
        // one intra and one inter stream: the inter one dominates
        let mixed = splitconcat_time(GIB, &[0], &[1, 8], &c).unwrap();
        assert_eq!(mixed, t);
    }

    #[test]
    fn zero_bytes_between_distinct_devices_costs_latency() {
        let c = cluster(vec![1, 1], 1e9, 1e9, 5e-6);
        assert_eq!(splitconcat_time(0, &[0], &[1], &c).unwrap(), 5e-6);
    }

    fn arb_set(g: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::btree_set(0..g, 1..=g).prop_map(|s| s.into_iter().collect())
    }

    proptest! {
        #[test]
        fn monotone_in_size_and_bandwidth(
            a in 0u64..1 << 34, b in 0u64..1 << 34,
            src in arb_set(8), dst in arb_set(8),
            bw in 1e8f64..1e11, k in 1.0f64..10.0,
        ) {
            let (lo, hi) = (a.min(b), a.max(b));
            let slow = cluster(vec![4, 4], bw * k, bw, 1e-6);
            let fast = cluster(vec![4, 4], bw * k * 2.0, bw * 2.0, 1e-6);
            prop_assert!(allreduce_time(lo, &src, &slow).unwrap() <= allreduce_time(hi, &src, &slow).unwrap());
            prop_assert!(splitconcat_time(lo, &src, &dst, &slow).unwrap() <= splitconcat_time(hi, &src, &dst, &slow).unwrap());
            prop_assert!(allreduce_time(hi, &src, &fast).unwrap() <= allreduce_time(hi, &src, &slow).unwrap());
            prop_assert!(splitconcat_time(hi, &src, &dst, &fast).unwrap() <= splitconcat_time(hi, &src, &dst, &slow).unwrap());
        }

        #[test]
        fn splitconcat_is_direction_agnostic(size in 0u64..1 << 34, src in arb_set(8), dst in arb_set(8)) {
            let c = cluster(vec![4, 4], 50e9, 5e9, 3e-6);
            prop_assert_eq!(splitconcat_time(size, &src, &dst, &c).unwrap(), splitconcat_time(size, &dst, &src, &c).unwrap());
        }

        #[test]
        fn singleton_allreduce_always_zero(size in any::<u64>(), d in 0usize..8) {
            let c = cluster(vec![4, 4], 50e9, 5e9, 3e-6);
            prop_assert_eq!(allreduce_time(size, &[d], &c).unwrap(), 0.0);
        }
    }
}
