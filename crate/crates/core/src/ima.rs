//! IMA relay selection.
//!
//! Per superframe, each WBAN tracks who decoded the beacon above threshold
//! (`R`), which sources contend (`S`), who decoded each source's RTS above
//! threshold (`N_i`) and who decoded a CTS (`M`). Relay candidates for a
//! source are `Q_i = R ∩ N_i`, pruned by beacon validity and by the gap
//! between a candidate's SNR to the coordinator and its SINR to the source.
//! Surviving candidates answer with a CTS after a waiting time that grows as
//! that gap shrinks; the source keeps the last two CTS and picks the relay
//! with the most residual energy.
//!
//! The event scheduling of the phases lives in [`crate::engine`]; this module
//! holds the state and the decision rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::channel::{self, PowerDbm};
use crate::error::{Error, Result};

/// Node address: WBAN index plus node index, where node 0 is the coordinator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub wban: u16,
    pub node: u16,
}

impl NodeId {
    pub const fn new(wban: u16, node: u16) -> Self {
        NodeId { wban, node }
    }

    pub const fn coordinator(wban: u16) -> Self {
        NodeId { wban, node: 0 }
    }

    pub fn is_coordinator(&self) -> bool {
        self.node == 0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}n{}", self.wban, self.node)
    }
}

/// Tunables of the relay-selection protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolParams {
    pub sinr_thr_db: f64,
    /// Candidates whose SNR/SINR gap exceeds this are dropped. `"inf"` disables the filter.
    #[serde(with = "crate::serde_inf")]
    pub diff_margin_db: f64,
    pub timer_constant_ms: f64,
    pub timer_rand_max_ms: f64,
    pub timer_epsilon_db: f64,
    pub cts_window_ms: f64,
    pub max_retries: u32,
    pub beacon_period_ms: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            // Receiver sensitivity (-84.7 dBm) over the noise floor (-102 dBm).
            sinr_thr_db: 17.3,
            diff_margin_db: 10.0,
            timer_constant_ms: 10.0,
            timer_rand_max_ms: 2.0,
            timer_epsilon_db: 0.1,
            cts_window_ms: 8.0,
            max_retries: 3,
            beacon_period_ms: 500.0,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("protocol.sinr_thr_db", self.sinr_thr_db),
            ("protocol.diff_margin_db", self.diff_margin_db),
            ("protocol.timer_constant_ms", self.timer_constant_ms),
            ("protocol.timer_rand_max_ms", self.timer_rand_max_ms),
            ("protocol.timer_epsilon_db", self.timer_epsilon_db),
            ("protocol.cts_window_ms", self.cts_window_ms),
            ("protocol.beacon_period_ms", self.beacon_period_ms),
        ];
        for (name, v) in positive {
            // diff_margin may be +inf; everything else must be finite.
            let ok = if name == "protocol.diff_margin_db" {
                v > 0.0
            } else {
                v.is_finite() && v > 0.0
            };
            if !ok {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.max_retries == 0 {
            return Err(Error::config("protocol.max_retries must be > 0"));
        }
        if self.cts_window_ms < self.timer_rand_max_ms {
            return Err(Error::config(
                "protocol.cts_window_ms must be >= protocol.timer_rand_max_ms",
            ));
        }
        Ok(())
    }
}

/// Outcome of evaluating a beacon or RTS reception against the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub sinr_db: f64,
    pub snr_db: f64,
    pub member: bool,
}

fn measure(
    rx_power: PowerDbm,
    interferers: &[PowerDbm],
    noise: PowerDbm,
    params: &ProtocolParams,
) -> Result<Measurement> {
    let sinr_db = channel::sinr_db(rx_power, interferers, noise)?;
    let snr_db = channel::snr_db(rx_power, noise)?;
    Ok(Measurement {
        sinr_db,
        snr_db,
        member: channel::meets_threshold(sinr_db, params.sinr_thr_db),
    })
}

/// Beacon phase: a node joins `R` iff the beacon SINR reaches the threshold.
pub fn on_beacon_received(
    beacon_rx_power: PowerDbm,
    interferers: &[PowerDbm],
    noise: PowerDbm,
    params: &ProtocolParams,
) -> Result<Measurement> {
    measure(beacon_rx_power, interferers, noise, params)
}

/// RTS phase: a node joins `N_i` iff the RTS SINR reaches the threshold.
pub fn on_rts_received(
    rts_rx_power: PowerDbm,
    interferers: &[PowerDbm],
    noise: PowerDbm,
    params: &ProtocolParams,
) -> Result<Measurement> {
    measure(rts_rx_power, interferers, noise, params)
}

/// `Q_i = R ∩ N_i`, never containing the source itself or a coordinator.
pub fn build_candidate_set(
    r: &BTreeSet<NodeId>,
    n_i: &BTreeSet<NodeId>,
    source: NodeId,
) -> BTreeSet<NodeId> {
    r.intersection(n_i)
        .filter(|&&n| n != source && !n.is_coordinator())
        .copied()
        .collect()
}

/// What a node knows about itself as a relay for one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayCandidateState {
    pub candidate: NodeId,
    pub snr_to_coordinator_db: f64,
    pub sinr_to_source_db: f64,
    pub diff_db: f64,
    pub residual_energy_mj: f64,
    pub beacon_rx_time_ms: f64,
    pub rts_rx_time_ms: f64,
}

impl RelayCandidateState {
    pub fn new(
        candidate: NodeId,
        snr_to_coordinator_db: f64,
        sinr_to_source_db: f64,
        residual_energy_mj: f64,
        beacon_rx_time_ms: f64,
        rts_rx_time_ms: f64,
    ) -> Self {
        RelayCandidateState {
            candidate,
            snr_to_coordinator_db,
            sinr_to_source_db,
            diff_db: (snr_to_coordinator_db - sinr_to_source_db).abs(),
            residual_energy_mj: residual_energy_mj.max(0.0),
            beacon_rx_time_ms,
            rts_rx_time_ms,
        }
    }
}

/// Beacon measurements pair with an RTS only when taken less than `T` earlier.
pub fn check_beacon_validity(state: &RelayCandidateState, params: &ProtocolParams) -> bool {
    // An RTS timestamp before the beacon cannot be paired either.
    channel::sample_is_valid(
        state.beacon_rx_time_ms,
        state.rts_rx_time_ms,
        params.beacon_period_ms,
    )
    .unwrap_or(false)
}

pub fn passes_diff_filter(diff_db: f64, params: &ProtocolParams) -> bool {
    diff_db <= params.diff_margin_db
}

/// Drops candidates whose SNR/SINR gap exceeds the margin.
pub fn filter_by_diff(
    candidates: Vec<RelayCandidateState>,
    params: &ProtocolParams,
) -> Vec<RelayCandidateState> {
    candidates
        .into_iter()
        .filter(|c| passes_diff_filter(c.diff_db, params))
        .collect()
}

/// CTS back-off: `min(window, rand + C / (diff + eps))`, in ms.
///
/// Better balanced candidates wait longer, so their CTS arrive last and stay
/// in the source's two-entry queue.
pub fn cts_wait_time(diff_db: f64, params: &ProtocolParams, rand_draw_ms: f64) -> Result<f64> {
    if diff_db.is_nan() || diff_db < 0.0 {
        return Err(Error::invalid(format!("diff must be >= 0, got {diff_db}")));
    }
    let t = rand_draw_ms + params.timer_constant_ms / (diff_db + params.timer_epsilon_db);
    Ok(t.min(params.cts_window_ms))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtsEntry {
    pub relay: NodeId,
    pub residual_energy_mj: f64,
    pub sinr_db: f64,
    pub rx_time_ms: f64,
}

/// The source's record of the last two distinct relays that answered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CtsQueue {
    entries: Vec<CtsEntry>,
}

impl CtsQueue {
    pub const CAPACITY: usize = 2;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[CtsEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == Self::CAPACITY
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends `entry`; a relay already queued moves to the back with fresh values.
    pub fn enqueue(&mut self, entry: CtsEntry) {
        self.entries.retain(|e| e.relay != entry.relay);
        self.entries.push(entry);
        while self.entries.len() > Self::CAPACITY {
            self.entries.remove(0);
        }
    }

    /// Relay with the most residual energy; ties go to higher SINR, then lower id.
    pub fn select_winner(&self) -> Option<NodeId> {
        self.entries
            .iter()
            .max_by(|a, b| {
                a.residual_energy_mj
                    .total_cmp(&b.residual_energy_mj)
                    .then(a.sinr_db.total_cmp(&b.sinr_db))
                    .then(b.relay.cmp(&a.relay))
            })
            .map(|e| e.relay)
    }
}

/// Free-function form of [`CtsQueue::enqueue`].
pub fn enqueue_cts(mut queue: CtsQueue, entry: CtsEntry) -> CtsQueue {
    queue.enqueue(entry);
    queue
}

pub fn select_winner(queue: &CtsQueue) -> Option<NodeId> {
    queue.select_winner()
}

/// Per-superframe candidate sets of one WBAN.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSets {
    pub r: BTreeSet<NodeId>,
    pub s: BTreeSet<NodeId>,
    pub n: BTreeMap<NodeId, BTreeSet<NodeId>>,
    pub m: BTreeSet<NodeId>,
}

impl CandidateSets {
    pub fn clear(&mut self) {
        self.r.clear();
        self.s.clear();
        self.n.clear();
        self.m.clear();
    }

    pub fn n_i(&self, source: NodeId) -> BTreeSet<NodeId> {
        self.n.get(&source).cloned().unwrap_or_default()
    }

    /// Always recomputed from `R` and `N_i`.
    pub fn q_i(&self, source: NodeId) -> BTreeSet<NodeId> {
        match self.n.get(&source) {
            Some(n_i) => build_candidate_set(&self.r, n_i, source),
            None => BTreeSet::new(),
        }
    }

    pub fn in_q_i(&self, source: NodeId, node: NodeId) -> bool {
        node != source
            && !node.is_coordinator()
            && self.r.contains(&node)
            && self.n.get(&source).is_some_and(|n| n.contains(&node))
    }
}

/// Beacon-side knowledge a sensor keeps for the current superframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeaconInfo {
    pub superframe: u64,
    pub rx_time_ms: f64,
    pub snr_db: f64,
    pub sinr_db: f64,
}

/// IMA bookkeeping for one WBAN.
#[derive(Debug, Clone, Default)]
pub struct ImaWban {
    pub superframe: u64,
    pub sets: CandidateSets,
    beacons: BTreeMap<NodeId, BeaconInfo>,
    rts: BTreeMap<(NodeId, NodeId), (f64, f64)>,
}

impl ImaWban {
    pub fn new() -> Self {
        Self::default()
    }

    /// Beacon emission starts a new superframe; every set is cleared.
    pub fn begin_superframe(&mut self, superframe: u64) {
        self.superframe = superframe;
        self.sets.clear();
        self.beacons.clear();
        self.rts.clear();
    }

    pub fn record_beacon(&mut self, node: NodeId, m: Measurement, rx_time_ms: f64) {
        self.beacons.insert(
            node,
            BeaconInfo {
                superframe: self.superframe,
                rx_time_ms,
                snr_db: m.snr_db,
                sinr_db: m.sinr_db,
            },
        );
        if m.member {
            self.sets.r.insert(node);
        }
    }

    pub fn beacon_info(&self, node: NodeId) -> Option<&BeaconInfo> {
        self.beacons.get(&node)
    }

    pub fn add_source(&mut self, source: NodeId) {
        self.sets.s.insert(source);
    }

    pub fn record_rts(&mut self, node: NodeId, source: NodeId, m: Measurement, rx_time_ms: f64) {
        if m.member && node != source {
            self.sets.n.entry(source).or_default().insert(node);
            self.rts.insert((source, node), (m.sinr_db, rx_time_ms));
        }
    }

    pub fn record_cts_decoded(&mut self, node: NodeId) {
        self.sets.m.insert(node);
    }

    /// Full eligibility state of `node` as a relay for `source`, if it is in `Q_i`.
    pub fn candidate_state(
        &self,
        node: NodeId,
        source: NodeId,
        residual_energy_mj: f64,
    ) -> Option<RelayCandidateState> {
        if !self.sets.in_q_i(source, node) {
            return None;
        }
        let beacon = self.beacons.get(&node)?;
        let &(sinr, rts_time) = self.rts.get(&(source, node))?;
        Some(RelayCandidateState::new(
            node,
            beacon.snr_db,
            sinr,
            residual_energy_mj,
            beacon.rx_time_ms,
            rts_time,
        ))
    }

    /// Candidate admitted to the CTS phase: in `Q_i`, beacon valid, gap within margin.
    pub fn eligible_candidate(
        &self,
        node: NodeId,
        source: NodeId,
        residual_energy_mj: f64,
        params: &ProtocolParams,
    ) -> Option<RelayCandidateState> {
        self.candidate_state(node, source, residual_energy_mj)
            .filter(|c| check_beacon_validity(c, params))
            .filter(|c| passes_diff_filter(c.diff_db, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(n: u16) -> NodeId {
        NodeId::new(0, n)
    }

    fn set(ns: &[u16]) -> BTreeSet<NodeId> {
        ns.iter().map(|&n| id(n)).collect()
    }

    const N0: PowerDbm = PowerDbm(-102.0);

    #[test]
    fn beacon_membership_threshold_is_inclusive() {
        let p = ProtocolParams::default();
        // With no interference SINR = rx - noise.
        assert!(
            on_beacon_received(PowerDbm(-77.0), &[], N0, &p)
                .unwrap()
                .member
        );
        assert!(
            on_beacon_received(PowerDbm(-84.7), &[], N0, &p)
                .unwrap()
                .member
        );
        assert!(
            !on_beacon_received(PowerDbm(-92.0), &[], N0, &p)
                .unwrap()
                .member
        );
    }

    #[test]
    fn rts_membership() {
        let p = ProtocolParams::default();
        assert!(
            on_rts_received(PowerDbm(-82.0), &[], N0, &p)
                .unwrap()
                .member
        );
        assert!(
            !on_rts_received(PowerDbm(-84.71), &[], N0, &p)
                .unwrap()
                .member
        );
    }

    #[test]
    fn node_can_join_several_n_i() {
        let p = ProtocolParams::default();
        let mut w = ImaWban::new();
        w.begin_superframe(1);
        let m1 = on_rts_received(PowerDbm(-60.0), &[], N0, &p).unwrap();
        let m2 = on_rts_received(PowerDbm(-70.0), &[], N0, &p).unwrap();
        w.record_rts(id(3), id(1), m1, 10.0);
        w.record_rts(id(3), id(2), m2, 20.0);
        assert!(w.sets.n_i(id(1)).contains(&id(3)));
        assert!(w.sets.n_i(id(2)).contains(&id(3)));
    }

    #[test]
    fn candidate_set_examples() {
        // a=1, b=2, c=3, d=4; source is 9
        assert_eq!(
            build_candidate_set(&set(&[1, 2, 3]), &set(&[2, 3, 4]), id(9)),
            set(&[2, 3])
        );
        assert_eq!(
            build_candidate_set(&set(&[]), &set(&[2, 3, 4]), id(9)),
            set(&[])
        );
        assert_eq!(build_candidate_set(&set(&[1]), &set(&[1]), id(1)), set(&[]));
        assert_eq!(
            build_candidate_set(&set(&[0, 2]), &set(&[0, 2]), id(1)),
            set(&[2])
        );
    }

    fn cand(diff: f64, beacon: f64, rts: f64) -> RelayCandidateState {
        RelayCandidateState::new(id(2), 40.0 + diff, 40.0, 100.0, beacon, rts)
    }

    #[test]
    fn beacon_validity_examples() {
        let p = ProtocolParams::default();
        assert!(check_beacon_validity(&cand(0.0, 0.0, 499.0), &p));
        assert!(!check_beacon_validity(&cand(0.0, 0.0, 500.0), &p));
        assert!(!check_beacon_validity(&cand(0.0, 0.0, 1200.0), &p));
        assert!(!check_beacon_validity(&cand(0.0, 10.0, 5.0), &p));
    }

    #[test]
    fn diff_is_absolute() {
        let a = RelayCandidateState::new(id(2), 30.0, 40.0, 1.0, 0.0, 1.0);
        let b = RelayCandidateState::new(id(2), 40.0, 30.0, 1.0, 0.0, 1.0);
        assert_eq!(a.diff_db, 10.0);
        assert_eq!(b.diff_db, 10.0);
    }

    #[test]
    fn diff_filter_examples() {
        let p = ProtocolParams::default();
        let kept = filter_by_diff(vec![cand(3.0, 0.0, 1.0), cand(12.0, 0.0, 1.0)], &p);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].diff_db, 3.0);

        assert!(filter_by_diff(vec![cand(11.0, 0.0, 1.0), cand(12.0, 0.0, 1.0)], &p).is_empty());

        let open = ProtocolParams {
            diff_margin_db: f64::INFINITY,
            ..p
        };
        assert_eq!(
            filter_by_diff(vec![cand(3.0, 0.0, 1.0), cand(120.0, 0.0, 1.0)], &open).len(),
            2
        );
    }

    #[test]
    fn wait_time_examples() {
        let p = ProtocolParams::default();
        assert!((cts_wait_time(4.9, &p, 1.0).unwrap() - 3.0).abs() < 1e-12);
        assert!((cts_wait_time(1e12, &p, 1.5).unwrap() - 1.5).abs() < 1e-9);
        assert_eq!(cts_wait_time(0.0, &p, 0.0).unwrap(), 8.0);
        assert!(cts_wait_time(-0.1, &p, 0.0).is_err());
    }

    fn entry(relay: u16, e: f64, s: f64, t: f64) -> CtsEntry {
        CtsEntry {
            relay: id(relay),
            residual_energy_mj: e,
            sinr_db: s,
            rx_time_ms: t,
        }
    }

    #[test]
    fn queue_keeps_last_two_distinct() {
        let q = enqueue_cts(CtsQueue::new(), entry(1, 100.0, 20.0, 1.0));
        assert_eq!(
            q.entries().iter().map(|e| e.relay).collect::<Vec<_>>(),
            vec![id(1)]
        );

        let q = enqueue_cts(q, entry(2, 100.0, 20.0, 2.0));
        let q = enqueue_cts(q, entry(3, 100.0, 20.0, 3.0));
        assert_eq!(
            q.entries().iter().map(|e| e.relay).collect::<Vec<_>>(),
            vec![id(2), id(3)]
        );

        let q = enqueue_cts(CtsQueue::new(), entry(1, 100.0, 20.0, 1.0));
        let q = enqueue_cts(q, entry(2, 100.0, 20.0, 2.0));
        let q = enqueue_cts(q, entry(1, 90.0, 21.0, 3.0));
        assert_eq!(
            q.entries().iter().map(|e| e.relay).collect::<Vec<_>>(),
            vec![id(2), id(1)]
        );
        assert_eq!(q.entries()[1].residual_energy_mj, 90.0);
    }

    #[test]
    fn winner_examples() {
        let mut q = CtsQueue::new();
        q.enqueue(entry(1, 120.0, 20.0, 1.0));
        q.enqueue(entry(2, 140.0, 20.0, 2.0));
        assert_eq!(q.select_winner(), Some(id(2)));

        let mut q = CtsQueue::new();
        q.enqueue(entry(1, 120.0, 20.0, 1.0));
        q.enqueue(entry(2, 120.0, 25.0, 2.0));
        assert_eq!(q.select_winner(), Some(id(2)));

        let mut q = CtsQueue::new();
        q.enqueue(entry(5, 120.0, 20.0, 1.0));
        q.enqueue(entry(4, 120.0, 20.0, 2.0));
        assert_eq!(q.select_winner(), Some(id(4)));

        assert_eq!(select_winner(&CtsQueue::new()), None);
    }

    #[test]
    fn eligibility_requires_r_and_n_i() {
        let p = ProtocolParams::default();
        let good = Measurement {
            sinr_db: 30.0,
            snr_db: 30.0,
            member: true,
        };
        let mut w = ImaWban::new();
        w.begin_superframe(0);
        // node 2 heard only the RTS
        w.record_rts(id(2), id(1), good, 5.0);
        assert!(w.eligible_candidate(id(2), id(1), 150.0, &p).is_none());
        // node 3 heard both
        w.record_beacon(id(3), good, 0.0);
        w.record_rts(id(3), id(1), good, 5.0);
        let c = w.eligible_candidate(id(3), id(1), 150.0, &p).unwrap();
        assert_eq!(c.diff_db, 0.0);
        assert_eq!(w.sets.q_i(id(1)), set(&[3]));

        w.begin_superframe(1);
        assert!(w.sets.r.is_empty() && w.sets.n.is_empty());
        assert!(w.eligible_candidate(id(3), id(1), 150.0, &p).is_none());
    }

    #[test]
    fn params_validation() {
        assert!(ProtocolParams::default().validate().is_ok());
        let p = ProtocolParams {
            cts_window_ms: 1.0,
            ..ProtocolParams::default()
        };
        assert!(p.validate().is_err());
        let p = ProtocolParams {
            diff_margin_db: f64::INFINITY,
            ..ProtocolParams::default()
        };
        assert!(p.validate().is_ok());
        let p = ProtocolParams {
            max_retries: 0,
            ..ProtocolParams::default()
        };
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn q_i_subset_of_both(
            r in proptest::collection::btree_set(0u16..10, 0..10),
            n in proptest::collection::btree_set(0u16..10, 0..10),
            src in 0u16..10,
        ) {
            let r: BTreeSet<_> = r.into_iter().map(id).collect();
            let n: BTreeSet<_> = n.into_iter().map(id).collect();
            let q = build_candidate_set(&r, &n, id(src));
            prop_assert!(q.is_subset(&r));
            prop_assert!(q.is_subset(&n));
            prop_assert!(!q.contains(&id(src)));
            prop_assert!(!q.contains(&NodeId::coordinator(0)));
        }

        #[test]
        fn queue_invariants(ops in proptest::collection::vec((1u16..5, 0.0f64..150.0), 0..20)) {
            let mut q = CtsQueue::new();
            for (k, (r, e)) in ops.into_iter().enumerate() {
                q.enqueue(entry(r, e, 20.0, k as f64));
                prop_assert!(q.len() <= 2);
                if q.len() == 2 {
                    prop_assert_ne!(q.entries()[0].relay, q.entries()[1].relay);
                    prop_assert!(q.entries()[0].rx_time_ms < q.entries()[1].rx_time_ms);
                }
            }
        }
    }
}
