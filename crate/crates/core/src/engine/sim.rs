//! The discrete-event run loop.
//!
//! One [`Simulator`] owns every node of every WBAN and a single shared
//! medium: each transmission adds its received power at every other node,
//! so concurrent frames from any WBAN interfere with each other.
//!
//! Per superframe the coordinator beacons; sensors with buffered packets
//! contend for an RTS once they decode it. In an IMA WBAN the RTS is a
//! broadcast and admitted relay candidates answer with timed CTS frames; the
//! source announces a winner and the packet travels source → relay →
//! coordinator. Other WBANs run a plain RTS/CTS/DATA/ACK exchange straight
//! with the coordinator.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::channel::{self, Position, PowerDbm};
use crate::energy::{self, Battery};
use crate::engine::event::{
    ms_to_ns, ns_to_ms, ns_to_s, s_to_ns, EventQueue, Nanos, PRIO_FIRST, PRIO_LAST,
};
use crate::engine::rng::{rng_stream, SimRng};
use crate::engine::scenario::{build_topology, draw_body_position, Scenario};
use crate::error::{Error, Result};
use crate::ima::{self, CtsEntry, CtsQueue, ImaWban, NodeId, RelayCandidateState};
use crate::mac::{
    self, Backoff, BackoffState, ChannelState, Destination, Frame, FrameKind, Payload,
};
use crate::metrics::{
    self, DeliveryCounter, EnergyLedger, MetricsReport, NodeSeries, RunMeta, SinrLog, TimeSeries,
    WbanSeries, WbanStats,
};

/// Extra wait granted on top of computed reply deadlines.
const GUARD_NS: Nanos = 1_000;
/// How long a selected relay waits for the source's DATA.
const RELAY_DATA_WAIT_MS: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxRecord {
    pub id: u64,
    pub frame: Frame,
    pub start_ns: Nanos,
    pub end_ns: Nanos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RxRecord {
    pub tx: u64,
    pub rx: NodeId,
    pub start_ns: Nanos,
    pub end_ns: Nanos,
    pub interferers: Vec<u64>,
    pub decoded: bool,
    pub aborted: bool,
    pub rx_power_dbm: f64,
    pub sinr_db: f64,
}

/// Eligibility of a CTS sender, captured when its CTS goes on air.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtsAudit {
    pub time_ns: Nanos,
    pub superframe: u64,
    pub source: NodeId,
    pub sender: NodeId,
    pub in_r: bool,
    pub in_n_i: bool,
    pub in_q_i: bool,
    pub beacon_valid: bool,
    pub diff_db: f64,
    pub passed_diff_filter: bool,
}

impl CtsAudit {
    pub fn ok(&self) -> bool {
        self.in_r && self.in_n_i && self.in_q_i && self.beacon_valid && self.passed_diff_filter
    }
}

/// Everything that happened on the medium, for replay checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub tx: Vec<TxRecord>,
    pub rx: Vec<RxRecord>,
    pub cts_audit: Vec<CtsAudit>,
    pub event_times: Vec<Nanos>,
    /// `(time, node, amount_mj)` for every non-zero battery drain.
    pub drains: Vec<(Nanos, NodeId, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimerKind {
    CtsWindowClose,
    CtsTimeout,
    AckTimeout,
    CandidateFire,
    WinnerDeadline,
    RelayDataDeadline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    MetricSample,
    Beacon {
        wban: usize,
    },
    Generate {
        node: usize,
    },
    Cca {
        node: usize,
        token: u64,
    },
    CsmaTxStart {
        node: usize,
        token: u64,
    },
    ImmediateTx {
        node: usize,
    },
    TxEnd {
        tx: u64,
    },
    Timer {
        node: usize,
        token: u64,
        kind: TimerKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SrcPhase {
    Rts,
    AwaitCts,
    Winner,
    Data,
    AwaitAck,
}

#[derive(Debug, Clone)]
struct SourceCtx {
    seq: u64,
    phase: SrcPhase,
    rts_attempts: u32,
    data_attempts: u32,
    next_hop: usize,
    queue: CtsQueue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CandPhase {
    Waiting,
    Contending,
    AwaitWinner,
}

#[derive(Debug, Clone)]
struct CandidateCtx {
    source: usize,
    rts_end: Nanos,
    phase: CandPhase,
    state: RelayCandidateState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RelayPhase {
    AwaitData,
    Forward,
    AwaitAck,
}

#[derive(Debug, Clone)]
struct RelayCtx {
    source: usize,
    phase: RelayPhase,
    packet: Option<(NodeId, u64)>,
    queued: bool,
    attempts: u32,
}

#[derive(Debug, Clone)]
enum Role {
    Idle,
    Source(SourceCtx),
    Candidate(CandidateCtx),
    Relay(RelayCtx),
}

#[derive(Debug, Clone)]
struct CsmaReq {
    frame: Frame,
    initial_backoff: bool,
    expires: Option<Nanos>,
}

#[derive(Debug, Clone)]
struct ActiveCsma {
    req: CsmaReq,
    backoff: BackoffState,
    in_flight: bool,
}

#[derive(Debug, Default)]
struct MacState {
    queue: VecDeque<CsmaReq>,
    active: Option<ActiveCsma>,
    immediate: VecDeque<Frame>,
    token: u64,
}

#[derive(Debug, Clone)]
struct Reception {
    tx: u64,
    start: Nanos,
    power_mw: f64,
    peak_interference_mw: f64,
    interferers: Vec<u64>,
}

#[derive(Debug)]
struct Node {
    id: NodeId,
    wban: usize,
    position: Position,
    random_position: bool,
    battery: Battery,
    ledger_fj: u64,
    alive: bool,
    tx: Option<(u64, Nanos)>,
    rx: Option<Reception>,
    mac: MacState,
    role: Role,
    timer_token: u64,
    pending: VecDeque<u64>,
    next_seq: u64,
    synced_superframe: Option<u64>,
    sampling_period: Nanos,
    backoff_rng: SimRng,
    timer_rng: SimRng,
    sinr_log: Vec<(f64, f64)>,
    residual_series: TimeSeries,
}

impl Node {
    fn is_coordinator(&self) -> bool {
        self.id.is_coordinator()
    }
}

#[derive(Debug)]
struct Transmission {
    id: u64,
    src: usize,
    frame: Frame,
    start: Nanos,
    via_csma: bool,
    rx_mw: Vec<f64>,
}

#[derive(Debug)]
struct WbanState {
    coordinator: usize,
    sensors: Vec<usize>,
    uses_ima: bool,
    ima: ImaWban,
    superframe: u64,
    superframe_start: Nanos,
    cap_end: Nanos,
    delivered: DeliveryCounter,
    stats: WbanStats,
    frames: [u64; 6],
    lifetime: TimeSeries,
    sop: TimeSeries,
    avgre: TimeSeries,
}

#[derive(Debug)]
struct Link {
    drawn_at: Option<Nanos>,
    shadow_db: f64,
    rng: SimRng,
}

/// A single deterministic run of one scenario.
pub struct Simulator {
    sc: Scenario,
    q: EventQueue<Event>,
    nodes: Vec<Node>,
    wbans: Vec<WbanState>,
    path_loss: Vec<f64>,
    links: Vec<Option<Link>>,
    shadowing: Option<Normal<f64>>,
    active: Vec<Transmission>,
    next_tx_id: u64,
    end: Nanos,
    last_idle_charge: Nanos,
    trace: Option<Trace>,
}

fn kind_index(k: FrameKind) -> usize {
    FrameKind::ALL
        .iter()
        .position(|&x| x == k)
        .expect("known kind")
}

impl Simulator {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let sc = scenario.clone();
        let placements = build_topology(&sc)?;
        let mut nodes = Vec::with_capacity(placements.len());
        let mut wbans: Vec<WbanState> = sc
            .wbans
            .iter()
            .enumerate()
            .map(|(w, cfg)| WbanState {
                coordinator: usize::MAX,
                sensors: Vec::new(),
                uses_ima: cfg.uses_ima,
                ima: ImaWban::new(),
                superframe: 0,
                superframe_start: 0,
                cap_end: 0,
                delivered: DeliveryCounter::new(),
                stats: WbanStats {
                    wban: w as u16,
                    uses_ima: cfg.uses_ima,
                    ..WbanStats::default()
                },
                frames: [0; 6],
                lifetime: TimeSeries::new("lifetime", "mJ"),
                sop: TimeSeries::new("sop", "packets"),
                avgre: TimeSeries::new("avgre", "mJ"),
            })
            .collect();
        for (i, p) in placements.into_iter().enumerate() {
            let w = p.id.wban as usize;
            let coordinator = p.id.is_coordinator();
            let period = if coordinator {
                0
            } else {
                s_to_ns(sc.wbans[w].sensors[p.id.node as usize - 1].sampling_period_s)
            };
            if coordinator {
                wbans[w].coordinator = i;
            } else {
                wbans[w].sensors.push(i);
            }
            nodes.push(Node {
                id: p.id,
                wban: w,
                position: p.position,
                random_position: p.random,
                battery: if coordinator {
                    Battery::unconstrained(sc.energy.initial_mj)
                } else {
                    Battery::new(sc.energy.initial_mj)
                },
                ledger_fj: 0,
                alive: true,
                tx: None,
                rx: None,
                mac: MacState::default(),
                role: Role::Idle,
                timer_token: 0,
                pending: VecDeque::new(),
                next_seq: 0,
                synced_superframe: None,
                sampling_period: period,
                backoff_rng: rng_stream(sc.seed, &format!("backoff/{}", p.id)),
                timer_rng: rng_stream(sc.seed, &format!("timer/{}", p.id)),
                sinr_log: Vec::new(),
                residual_series: TimeSeries::new("residual_energy", "mJ"),
            });
        }
        let n = nodes.len();
        let shadowing = if sc.channel.shadowing_sigma_db > 0.0 {
            Some(
                Normal::new(0.0, sc.channel.shadowing_sigma_db)
                    .map_err(|e| Error::config(format!("shadowing: {e}")))?,
            )
        } else {
            None
        };
        let mut sim = Simulator {
            end: s_to_ns(sc.duration_s),
            sc,
            q: EventQueue::new(),
            nodes,
            wbans,
            path_loss: vec![0.0; n * n],
            links: (0..n * n).map(|_| None).collect(),
            shadowing,
            active: Vec::new(),
            next_tx_id: 0,
            last_idle_charge: 0,
            trace: None,
        };
        for i in 0..n {
            sim.refresh_path_loss(i)?;
        }
        Ok(sim)
    }

    /// Records the medium trace during the run.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Trace::default());
        self
    }

    fn refresh_path_loss(&mut self, i: usize) -> Result<()> {
        let n = self.nodes.len();
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = self.nodes[i].position.distance(&self.nodes[j].position);
            let pl = channel::path_loss_db(d, &self.sc.channel)?;
            self.path_loss[i * n + j] = pl;
            self.path_loss[j * n + i] = pl;
        }
        Ok(())
    }

    fn now(&self) -> Nanos {
        self.q.now()
    }

    fn schedule(&mut self, at: Nanos, ev: Event) {
        self.q
            .schedule(at, ev)
            .expect("events are never scheduled in the past");
    }

    /// Shadowing on the undirected link `a`–`b`, redrawn once older than the coherence time.
    fn shadow_db(&mut self, a: usize, b: usize) -> f64 {
        let Some(dist) = self.shadowing else {
            return 0.0;
        };
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let n = self.nodes.len();
        let now = self.q.now();
        let coherence = ms_to_ns(self.sc.channel.coherence_time_ms);
        let seed = self.sc.seed;
        let (lo_id, hi_id) = (self.nodes[lo].id, self.nodes[hi].id);
        let link = self.links[lo * n + hi].get_or_insert_with(|| Link {
            drawn_at: None,
            shadow_db: 0.0,
            rng: rng_stream(seed, &format!("shadowing/{lo_id}/{hi_id}")),
        });
        let stale = match link.drawn_at {
            None => true,
            Some(t) => now - t >= coherence,
        };
        if stale {
            link.shadow_db = dist.sample(&mut link.rng);
            link.drawn_at = Some(now);
        }
        link.shadow_db
    }

    fn rx_power_dbm(&mut self, tx: usize, rx: usize) -> f64 {
        let n = self.nodes.len();
        self.sc.mac.tx_power_dbm.0 - self.path_loss[tx * n + rx] + self.shadow_db(tx, rx)
    }

    // ---------------------------------------------------------------- run

    pub fn run(mut self) -> Result<(MetricsReport, Option<Trace>)> {
        self.q.schedule_prio(0, PRIO_LAST, Event::MetricSample)?;
        let period = ms_to_ns(self.sc.protocol.beacon_period_ms);
        for w in 0..self.wbans.len() {
            let mut rng = rng_stream(self.sc.seed, &format!("beacon/w{w}"));
            let offset = rng.random_range(0..period);
            if offset < self.end {
                self.schedule(offset, Event::Beacon { wban: w });
            }
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].is_coordinator() {
                continue;
            }
            let id = self.nodes[i].id;
            let mut rng = rng_stream(self.sc.seed, &format!("traffic/{id}"));
            let phase = rng.random_range(0..self.nodes[i].sampling_period);
            if phase < self.end {
                self.schedule(phase, Event::Generate { node: i });
            }
        }

        while let Some(ev) = self.q.pop_next() {
            if ev.time > self.end {
                break;
            }
            if let Some(t) = self.trace.as_mut() {
                t.event_times.push(ev.time);
            }
            self.dispatch(ev.event)?;
        }
        Ok(self.finish())
    }

    fn dispatch(&mut self, ev: Event) -> Result<()> {
        match ev {
            Event::MetricSample => self.sample_metrics(),
            Event::Beacon { wban } => self.begin_superframe(wban),
            Event::Generate { node } => self.generate(node),
            Event::Cca { node, token } => self.on_cca(node, token),
            Event::CsmaTxStart { node, token } => self.on_csma_tx_start(node, token),
            Event::ImmediateTx { node } => self.on_immediate_tx(node),
            Event::TxEnd { tx } => self.on_tx_end(tx),
            Event::Timer { node, token, kind } => {
                if self.nodes[node].alive && self.nodes[node].timer_token == token {
                    self.on_timer(node, kind)
                } else {
                    Ok(())
                }
            }
        }
    }

    // ------------------------------------------------------------ metrics

    fn charge_idle(&mut self) -> Result<()> {
        let now = self.now();
        let dt = ns_to_s(now - self.last_idle_charge);
        self.last_idle_charge = now;
        if self.sc.energy.idle_power_mw == 0.0 || dt == 0.0 {
            return Ok(());
        }
        let amount = self.sc.energy.idle_power_mw * dt;
        for i in 0..self.nodes.len() {
            if self.nodes[i].alive && !self.nodes[i].is_coordinator() {
                self.drain(i, amount)?;
            }
        }
        Ok(())
    }

    fn sample_metrics(&mut self) -> Result<()> {
        self.charge_idle()?;
        let now = self.now();
        let t = ns_to_s(now);
        for node in &mut self.nodes {
            let r = node.battery.residual_mj();
            node.residual_series.push(t, r)?;
        }
        for w in 0..self.wbans.len() {
            let batteries: Vec<Battery> = self.wbans[w]
                .sensors
                .iter()
                .map(|&i| self.nodes[i].battery.clone())
                .collect();
            let life = energy::wban_lifetime(&batteries)?;
            let avg = life / batteries.len() as f64;
            let sop = self.wbans[w].delivered.sop() as f64;
            let ws = &mut self.wbans[w];
            ws.lifetime.push(t, life)?;
            ws.avgre.push(t, avg)?;
            ws.sop.push(t, sop)?;
        }
        if now < self.end {
            let next = (now + s_to_ns(self.sc.metric_sample_period_s)).min(self.end);
            self.q.schedule_prio(next, PRIO_LAST, Event::MetricSample)?;
        }
        Ok(())
    }

    fn finish(self) -> (MetricsReport, Option<Trace>) {
        let sc = &self.sc;
        let meta = RunMeta {
            seed: sc.seed,
            scenario_digest: sc.digest(),
            duration_s: sc.duration_s,
            metric_sample_period_s: sc.metric_sample_period_s,
            outage_thresholds_db: sc.outage_thresholds_db.clone(),
        };
        let mut report = MetricsReport {
            meta,
            residual_energy: Vec::new(),
            lifetime: Vec::new(),
            sop: Vec::new(),
            avgre: Vec::new(),
            sinr_log: Vec::new(),
            outage: Vec::new(),
            energy_ledger: Vec::new(),
            wban_stats: Vec::new(),
        };
        for node in self.nodes {
            report.residual_energy.push(NodeSeries {
                node: node.id,
                series: node.residual_series,
            });
            report.sinr_log.push(SinrLog {
                node: node.id,
                samples: node.sinr_log,
            });
            report.energy_ledger.push(EnergyLedger {
                node: node.id,
                initial_mj: node.battery.initial_mj(),
                final_mj: node.battery.residual_mj(),
                drained_mj: node.ledger_fj as f64 / 1e12,
                unconstrained: node.battery.is_unconstrained(),
            });
        }
        for (w, ws) in self.wbans.into_iter().enumerate() {
            let w = w as u16;
            let mut stats = ws.stats;
            stats.delivered = ws.delivered.sop();
            stats.frames_sent = FrameKind::ALL
                .iter()
                .zip(ws.frames)
                .map(|(k, c)| (k.name().to_string(), c))
                .collect();
            report.wban_stats.push(stats);
            report.lifetime.push(WbanSeries {
                wban: w,
                series: ws.lifetime,
            });
            report.sop.push(WbanSeries {
                wban: w,
                series: ws.sop,
            });
            report.avgre.push(WbanSeries {
                wban: w,
                series: ws.avgre,
            });
        }
        report.outage = metrics::outage_table(&report);
        (report, self.trace)
    }

    // ------------------------------------------------------------- energy

    fn drain(&mut self, i: usize, amount_mj: f64) -> Result<()> {
        let node = &mut self.nodes[i];
        if node.battery.is_unconstrained() || !node.alive {
            return Ok(());
        }
        let taken = node.battery.drain(amount_mj)?;
        node.ledger_fj += (taken * 1e12).round() as u64;
        if let Some(t) = self.trace.as_mut() {
            if taken > 0.0 {
                t.drains.push((self.q.now(), node.id, taken));
            }
        }
        if !node.battery.is_alive() {
            self.on_death(i);
        }
        Ok(())
    }

    fn on_death(&mut self, i: usize) {
        let node = &mut self.nodes[i];
        node.alive = false;
        node.rx = None;
        node.mac.queue.clear();
        node.mac.immediate.clear();
        if !node.mac.active.as_ref().is_some_and(|a| a.in_flight) {
            node.mac.active = None;
        }
        node.mac.token += 1;
        node.timer_token += 1;
        node.role = Role::Idle;
    }

    // ------------------------------------------------------------ traffic

    fn generate(&mut self, i: usize) -> Result<()> {
        if !self.nodes[i].alive {
            return Ok(());
        }
        let now = self.now();
        let node = &mut self.nodes[i];
        node.pending.push_back(node.next_seq);
        node.next_seq += 1;
        let next = now + node.sampling_period;
        self.wbans[node.wban].stats.generated += 1;
        if next < self.end {
            self.schedule(next, Event::Generate { node: i });
        }
        Ok(())
    }

    // ---------------------------------------------------------- superframe

    /// Beacon phase of a WBAN: clears the candidate sets, beacons, and opens
    /// the contention period in which sources run their RTS/CTS exchanges.
    fn begin_superframe(&mut self, w: usize) -> Result<()> {
        let now = self.now();
        if self.sc.mobility {
            self.redraw_positions(w)?;
        }
        let ws = &mut self.wbans[w];
        ws.superframe += 1;
        let superframe = ws.superframe;
        ws.stats.superframes += 1;
        if ws.uses_ima {
            ws.ima.begin_superframe(superframe);
        }
        let coordinator = ws.coordinator;
        let sensors = ws.sensors.clone();
        for s in sensors {
            if matches!(self.nodes[s].role, Role::Candidate(_)) {
                self.become_idle(s)?;
            }
        }
        let beacon = Frame::new(
            FrameKind::Beacon,
            self.nodes[coordinator].id,
            Destination::Broadcast,
            Payload::Beacon { superframe },
            &self.sc.mac,
        );
        let period = ms_to_ns(self.sc.protocol.beacon_period_ms);
        let air = beacon.airtime_ns(&self.sc.mac);
        let cap = (self.sc.mac.cap_fraction * period.saturating_sub(air) as f64) as Nanos;
        self.wbans[w].superframe_start = now;
        self.wbans[w].cap_end = now + air + cap;
        self.send_immediate(coordinator, beacon, now);
        if now + period < self.end {
            self.schedule(now + period, Event::Beacon { wban: w });
        }
        Ok(())
    }

    fn redraw_positions(&mut self, w: usize) -> Result<()> {
        let center = self.nodes[self.wbans[w].coordinator].position;
        let space = self.sc.space_m;
        for s in self.wbans[w].sensors.clone() {
            if !self.nodes[s].random_position {
                continue;
            }
            let id = self.nodes[s].id;
            let sf = self.wbans[w].superframe;
            let mut rng = rng_stream(self.sc.seed, &format!("mobility/{id}/{sf}"));
            self.nodes[s].position = draw_body_position(&mut rng, &center, &space);
            self.refresh_path_loss(s)?;
        }
        Ok(())
    }

    fn maybe_start_source(&mut self, i: usize) -> Result<()> {
        let node = &self.nodes[i];
        let ws = &self.wbans[node.wban];
        if !node.alive
            || node.is_coordinator()
            || !matches!(node.role, Role::Idle)
            || node.pending.is_empty()
            || node.synced_superframe != Some(ws.superframe)
            || self.now() >= ws.cap_end
        {
            return Ok(());
        }
        let seq = *node.pending.front().expect("pending");
        let coordinator = ws.coordinator;
        let uses_ima = ws.uses_ima;
        let cap_end = ws.cap_end;
        let id = node.id;
        if uses_ima {
            self.wbans[node.wban].ima.add_source(id);
        }
        self.set_role(
            i,
            Role::Source(SourceCtx {
                seq,
                phase: SrcPhase::Rts,
                rts_attempts: 0,
                data_attempts: 0,
                next_hop: coordinator,
                queue: CtsQueue::new(),
            }),
        );
        let dst = if uses_ima {
            Destination::Broadcast
        } else {
            Destination::Node(self.nodes[coordinator].id)
        };
        let rts = Frame::new(FrameKind::Rts, id, dst, Payload::Rts { seq }, &self.sc.mac);
        self.request_csma(i, rts, true, Some(cap_end));
        Ok(())
    }

    fn set_role(&mut self, i: usize, role: Role) {
        self.nodes[i].role = role;
        self.nodes[i].timer_token += 1;
    }

    fn become_idle(&mut self, i: usize) -> Result<()> {
        self.set_role(i, Role::Idle);
        self.purge_csma(i);
        self.maybe_start_source(i)
    }

    fn finish_source(&mut self, i: usize, delivered: bool) -> Result<()> {
        self.nodes[i].pending.pop_front();
        if !delivered {
            let w = self.nodes[i].wban;
            self.wbans[w].stats.dropped += 1;
        }
        self.become_idle(i)
    }

    fn set_timer(&mut self, i: usize, at: Nanos, kind: TimerKind) {
        let token = self.nodes[i].timer_token;
        self.schedule(
            at,
            Event::Timer {
                node: i,
                token,
                kind,
            },
        );
    }

    fn data_frame(&self, i: usize, to: usize, origin: NodeId, seq: u64) -> Frame {
        Frame::new(
            FrameKind::Data,
            self.nodes[i].id,
            Destination::Node(self.nodes[to].id),
            Payload::Data { origin, seq },
            &self.sc.mac,
        )
    }

    fn airtime(&self, kind: FrameKind) -> Nanos {
        self.sc.mac.airtime_ns(self.sc.mac.size_bits(kind))
    }

    /// Latest CCA instant for a CTS answering an RTS that ended at `rts_end`:
    /// the timer cap plus one slot of boundary alignment.
    fn cts_deadline(&self, rts_end: Nanos) -> Nanos {
        rts_end + ms_to_ns(self.sc.protocol.cts_window_ms) + self.sc.mac.slot_ns()
    }

    /// Span after an RTS during which the source accepts CTS frames.
    fn cts_collect_ns(&self) -> Nanos {
        self.cts_deadline(0) + self.sc.mac.turnaround_ns() + self.airtime(FrameKind::Cts) + GUARD_NS
    }

    fn ack_wait_ns(&self) -> Nanos {
        self.sc.mac.turnaround_ns() + self.airtime(FrameKind::Ack) + self.sc.mac.slot_ns()
    }

    // ---------------------------------------------------------------- MAC

    fn request_csma(
        &mut self,
        i: usize,
        frame: Frame,
        initial_backoff: bool,
        expires: Option<Nanos>,
    ) {
        self.nodes[i].mac.queue.push_back(CsmaReq {
            frame,
            initial_backoff,
            expires,
        });
        if self.nodes[i].mac.active.is_none() {
            self.start_next_csma(i);
        }
    }

    fn purge_csma(&mut self, i: usize) {
        let mac = &mut self.nodes[i].mac;
        mac.queue.clear();
        if !mac.active.as_ref().is_some_and(|a| a.in_flight) {
            mac.active = None;
            mac.token += 1;
        }
    }

    /// First backoff-slot boundary of node `i`'s superframe at or after `t`.
    fn slot_boundary(&self, i: usize, t: Nanos) -> Nanos {
        let base = self.wbans[self.nodes[i].wban].superframe_start;
        let slot = self.sc.mac.slot_ns();
        if t <= base {
            return base;
        }
        base + (t - base).div_ceil(slot) * slot
    }

    fn start_next_csma(&mut self, i: usize) {
        let now = self.slot_boundary(i, self.now());
        let slot = self.sc.mac.slot_ns();
        let node = &mut self.nodes[i];
        if !node.alive {
            return;
        }
        let Some(req) = node.mac.queue.pop_front() else {
            return;
        };
        let backoff = BackoffState::new(&self.sc.mac);
        let delay = if req.initial_backoff {
            node.backoff_rng.random_range(0..=backoff.max_draw()) as u64 * slot
        } else {
            0
        };
        node.mac.active = Some(ActiveCsma {
            req,
            backoff,
            in_flight: false,
        });
        node.mac.token += 1;
        let token = node.mac.token;
        self.schedule(now + delay, Event::Cca { node: i, token });
    }

    fn on_cca(&mut self, i: usize, token: u64) -> Result<()> {
        let now = self.now();
        let node = &self.nodes[i];
        if !node.alive || node.mac.token != token {
            return Ok(());
        }
        if let Some((_, tx_end)) = node.tx {
            let at = self.slot_boundary(i, tx_end);
            self.schedule(at, Event::Cca { node: i, token });
            return Ok(());
        }
        if !node.mac.immediate.is_empty() {
            // A reply is about to go out; let it have the radio first.
            let at = self.slot_boundary(i, now + self.sc.mac.turnaround_ns() + 1);
            self.schedule(at, Event::Cca { node: i, token });
            return Ok(());
        }
        let active = node.mac.active.as_ref().expect("active request");
        if active.req.expires.is_some_and(|e| now > e) {
            return self.csma_give_up(i);
        }
        let arriving: Vec<PowerDbm> = self
            .active
            .iter()
            .filter(|t| t.src != i)
            .map(|t| PowerDbm::from_mw(t.rx_mw[i]))
            .collect();
        match mac::carrier_sense(&arriving, self.sc.mac.cca_threshold_dbm) {
            ChannelState::Idle => {
                let at = now + self.sc.mac.turnaround_ns();
                self.schedule(at, Event::CsmaTxStart { node: i, token });
            }
            ChannelState::Busy => {
                let max_retries = self.sc.protocol.max_retries;
                let macp = self.sc.mac.clone();
                let node = &mut self.nodes[i];
                let active = node.mac.active.as_mut().expect("active request");
                active.backoff.on_busy(&macp);
                let draw = node.backoff_rng.random_range(0..=active.backoff.max_draw());
                match mac::backoff_delay(&active.backoff, draw, &macp, max_retries)? {
                    Backoff::Wait { ns } => self.schedule(now + ns, Event::Cca { node: i, token }),
                    Backoff::GiveUp => return self.csma_give_up(i),
                }
            }
        }
        Ok(())
    }

    fn csma_give_up(&mut self, i: usize) -> Result<()> {
        let active = self.nodes[i].mac.active.take().expect("active request");
        self.nodes[i].mac.token += 1;
        self.on_give_up(i, active.req.frame)?;
        if self.nodes[i].mac.active.is_none() {
            self.start_next_csma(i);
        }
        Ok(())
    }

    fn on_csma_tx_start(&mut self, i: usize, token: u64) -> Result<()> {
        let node = &mut self.nodes[i];
        if !node.alive || node.mac.token != token {
            return Ok(());
        }
        if let Some((_, tx_end)) = node.tx {
            // An immediate frame took the radio; sense again afterwards.
            let at = self.slot_boundary(i, tx_end);
            self.schedule(at, Event::Cca { node: i, token });
            return Ok(());
        }
        if !node.mac.immediate.is_empty() {
            let at = self.slot_boundary(i, self.q.now() + self.sc.mac.turnaround_ns() + 1);
            self.schedule(at, Event::Cca { node: i, token });
            return Ok(());
        }
        let node = &mut self.nodes[i];
        let active = node.mac.active.as_mut().expect("active request");
        active.in_flight = true;
        let frame = active.req.frame;
        self.start_tx(i, frame, true)
    }

    fn send_immediate(&mut self, i: usize, frame: Frame, at: Nanos) {
        self.nodes[i].mac.immediate.push_back(frame);
        self.schedule(at, Event::ImmediateTx { node: i });
    }

    fn on_immediate_tx(&mut self, i: usize) -> Result<()> {
        if !self.nodes[i].alive {
            return Ok(());
        }
        if let Some((_, tx_end)) = self.nodes[i].tx {
            self.schedule(tx_end, Event::ImmediateTx { node: i });
            return Ok(());
        }
        match self.nodes[i].mac.immediate.pop_front() {
            Some(frame) => self.start_tx(i, frame, false),
            None => Ok(()),
        }
    }

    // ------------------------------------------------------------- medium

    fn start_tx(&mut self, i: usize, frame: Frame, via_csma: bool) -> Result<()> {
        let now = self.now();
        let end = now + frame.airtime_ns(&self.sc.mac);
        if self.nodes[i].rx.is_some() {
            self.abort_reception(i)?;
        }
        let id = self.next_tx_id;
        self.next_tx_id += 1;

        let n = self.nodes.len();
        let mut rx_mw = vec![0.0; n];
        for (j, p) in rx_mw.iter_mut().enumerate() {
            if j != i {
                *p = channel::dbm_to_mw(self.rx_power_dbm(i, j));
            }
        }
        self.active.push(Transmission {
            id,
            src: i,
            frame,
            start: now,
            via_csma,
            rx_mw: rx_mw.clone(),
        });
        self.nodes[i].tx = Some((id, end));

        let w = self.nodes[i].wban;
        self.wbans[w].frames[kind_index(frame.kind)] += 1;
        match frame.kind {
            FrameKind::Rts => self.wbans[w].stats.rts_sent += 1,
            FrameKind::Cts => {
                self.wbans[w].stats.cts_sent += 1;
                if !self.nodes[i].is_coordinator() {
                    self.audit_cts(i, now)?;
                }
            }
            _ => {}
        }
        if let Some(t) = self.trace.as_mut() {
            t.tx.push(TxRecord {
                id,
                frame,
                start_ns: now,
                end_ns: end,
            });
        }

        let sens_dbm = self.sc.mac.sensitivity_dbm.0;
        for (j, &p) in rx_mw.iter().enumerate().take(n) {
            if j == i || !self.nodes[j].alive || self.nodes[j].tx.is_some() {
                continue;
            }
            let others: Vec<(u64, f64)> = self.active.iter().map(|t| (t.id, t.rx_mw[j])).collect();
            match self.nodes[j].rx.as_mut() {
                Some(rx) if rx.start == now && p > rx.power_mw => {
                    // Simultaneous preambles: lock onto the stronger one.
                    let interferers: Vec<u64> =
                        others.iter().filter(|o| o.0 != id).map(|o| o.0).collect();
                    let interference: f64 = others.iter().filter(|o| o.0 != id).map(|o| o.1).sum();
                    *rx = Reception {
                        tx: id,
                        start: now,
                        power_mw: p,
                        peak_interference_mw: interference,
                        interferers,
                    };
                }
                Some(rx) => {
                    rx.interferers.push(id);
                    let interference: f64 =
                        others.iter().filter(|o| o.0 != rx.tx).map(|o| o.1).sum();
                    rx.peak_interference_mw = rx.peak_interference_mw.max(interference);
                }
                None if channel::meets_threshold(channel::mw_to_dbm(p), sens_dbm) => {
                    let interferers: Vec<u64> =
                        others.iter().filter(|o| o.0 != id).map(|o| o.0).collect();
                    let interference: f64 = others.iter().filter(|o| o.0 != id).map(|o| o.1).sum();
                    self.nodes[j].rx = Some(Reception {
                        tx: id,
                        start: now,
                        power_mw: p,
                        peak_interference_mw: interference,
                        interferers,
                    });
                }
                None => {}
            }
        }

        self.q
            .schedule_prio(end, PRIO_FIRST, Event::TxEnd { tx: id })?;
        if !self.nodes[i].is_coordinator() {
            let cost = energy::tx_energy(&frame, &self.sc.mac, &self.sc.energy);
            self.drain(i, cost)?;
        }
        Ok(())
    }

    fn abort_reception(&mut self, j: usize) -> Result<()> {
        let Some(mut rx) = self.nodes[j].rx.take() else {
            return Ok(());
        };
        let now = self.now();
        // Frames that began this very instant never overlapped the aborted part.
        let active = &self.active;
        rx.interferers
            .retain(|id| active.iter().any(|t| t.id == *id && t.start < now));
        if let Some(t) = self.trace.as_mut() {
            t.rx.push(RxRecord {
                tx: rx.tx,
                rx: self.nodes[j].id,
                start_ns: rx.start,
                end_ns: now,
                interferers: rx.interferers,
                decoded: false,
                aborted: true,
                rx_power_dbm: channel::mw_to_dbm(rx.power_mw),
                sinr_db: f64::NAN,
            });
        }
        let addressed = self
            .active
            .iter()
            .find(|t| t.id == rx.tx)
            .is_some_and(|t| t.frame.addressed_to(self.nodes[j].id));
        if !self.nodes[j].is_coordinator() && addressed {
            let cost = energy::rx_energy_for(ns_to_s(now - rx.start), &self.sc.energy);
            self.drain(j, cost)?;
        }
        Ok(())
    }

    fn audit_cts(&mut self, i: usize, now: Nanos) -> Result<()> {
        let w = self.nodes[i].wban;
        if !self.wbans[w].uses_ima {
            return Ok(());
        }
        let Role::Candidate(c) = &self.nodes[i].role else {
            return Err(Error::Internal(format!(
                "{} sent a CTS without being a relay candidate",
                self.nodes[i].id
            )));
        };
        let source = self.nodes[c.source].id;
        let sender = self.nodes[i].id;
        let ws = &self.wbans[w];
        let sets = &ws.ima.sets;
        let residual = self.nodes[i].battery.residual_mj();
        let current = ws.ima.candidate_state(sender, source, residual);
        let (beacon_valid, diff_db) = match &current {
            Some(s) => (ima::check_beacon_validity(s, &self.sc.protocol), s.diff_db),
            None => (false, f64::NAN),
        };
        let audit = CtsAudit {
            time_ns: now,
            superframe: ws.superframe,
            source,
            sender,
            in_r: sets.r.contains(&sender),
            in_n_i: sets.n_i(source).contains(&sender),
            in_q_i: sets.q_i(source).contains(&sender),
            beacon_valid,
            diff_db,
            passed_diff_filter: ima::passes_diff_filter(diff_db, &self.sc.protocol),
        };
        let stats = &mut self.wbans[w].stats;
        stats.cts_audited += 1;
        if !audit.ok() {
            stats.cts_audit_violations += 1;
        }
        if let Some(t) = self.trace.as_mut() {
            t.cts_audit.push(audit);
        }
        Ok(())
    }

    fn on_tx_end(&mut self, tx: u64) -> Result<()> {
        let pos = self
            .active
            .iter()
            .position(|t| t.id == tx)
            .ok_or_else(|| Error::Internal(format!("unknown transmission {tx}")))?;
        let t = self.active.remove(pos);
        let src = t.src;
        self.nodes[src].tx = None;

        for j in 0..self.nodes.len() {
            if self.nodes[j].rx.as_ref().is_some_and(|r| r.tx == tx) {
                self.finish_reception(j, &t)?;
            }
        }

        if self.nodes[src].alive {
            if t.via_csma {
                self.nodes[src].mac.active = None;
            }
            self.on_sent(src, t.frame)?;
            if self.nodes[src].mac.active.is_none() {
                self.start_next_csma(src);
            }
        }
        Ok(())
    }

    fn finish_reception(&mut self, j: usize, t: &Transmission) -> Result<()> {
        let rx = self.nodes[j].rx.take().expect("locked reception");
        let now = self.now();
        let noise = self.sc.channel.noise_floor_dbm;
        let outcome = mac::resolve_reception(
            PowerDbm::from_mw(rx.power_mw),
            rx.peak_interference_mw,
            noise,
            self.sc.mac.sensitivity_dbm,
            self.sc.protocol.sinr_thr_db,
        );
        let rid = self.nodes[j].id;
        if let Some(tr) = self.trace.as_mut() {
            tr.rx.push(RxRecord {
                tx: t.id,
                rx: rid,
                start_ns: rx.start,
                end_ns: now,
                interferers: rx.interferers.clone(),
                decoded: outcome.decoded,
                aborted: false,
                rx_power_dbm: channel::mw_to_dbm(rx.power_mw),
                sinr_db: outcome.sinr_db,
            });
        }
        if t.frame.addressed_to(rid) {
            self.nodes[j].sinr_log.push((ns_to_s(now), outcome.sinr_db));
            if !outcome.decoded {
                self.wbans[self.nodes[j].wban].stats.receptions_lost += 1;
            }
        }
        // Frames for someone else are dropped after the address check.
        if !self.nodes[j].is_coordinator() && t.frame.addressed_to(rid) {
            let cost = energy::rx_energy(&t.frame, &self.sc.mac, &self.sc.energy);
            self.drain(j, cost)?;
        }
        if outcome.decoded && self.nodes[j].alive {
            let interference = if rx.peak_interference_mw > 0.0 {
                vec![PowerDbm::from_mw(rx.peak_interference_mw)]
            } else {
                Vec::new()
            };
            self.on_receive(
                j,
                t.src,
                t.frame,
                PowerDbm::from_mw(rx.power_mw),
                &interference,
            )?;
        }
        Ok(())
    }

    // ----------------------------------------------------------- protocol

    fn on_receive(
        &mut self,
        r: usize,
        from: usize,
        frame: Frame,
        power: PowerDbm,
        interference: &[PowerDbm],
    ) -> Result<()> {
        let rid = self.nodes[r].id;
        if frame.src.wban != rid.wban {
            return Ok(());
        }
        let w = self.nodes[r].wban;
        if frame.kind == FrameKind::Cts && self.wbans[w].uses_ima {
            self.wbans[w].ima.record_cts_decoded(rid);
        }
        if !frame.addressed_to(rid) {
            return Ok(());
        }
        if self.nodes[r].is_coordinator() {
            self.coordinator_receive(r, from, frame)
        } else {
            self.sensor_receive(r, from, frame, power, interference)
        }
    }

    fn coordinator_receive(&mut self, r: usize, from: usize, frame: Frame) -> Result<()> {
        let now = self.now();
        let w = self.nodes[r].wban;
        match (frame.kind, frame.payload) {
            (FrameKind::Rts, _) if frame.dst != Destination::Broadcast => {
                let cts = Frame::new(
                    FrameKind::Cts,
                    self.nodes[r].id,
                    Destination::Node(frame.src),
                    Payload::Cts {
                        residual_energy_mj: self.nodes[r].battery.residual_mj(),
                        sinr_db: f64::NAN,
                    },
                    &self.sc.mac,
                );
                let deadline = now + ms_to_ns(self.sc.protocol.cts_window_ms);
                let expires = deadline
                    .saturating_sub(self.airtime(FrameKind::Cts))
                    .max(now);
                self.request_csma(r, cts, false, Some(expires));
            }
            (FrameKind::Data, Payload::Data { origin, seq }) => {
                let ws = &mut self.wbans[w];
                if ws.delivered.record_delivery(origin, seq) {
                    if origin == frame.src {
                        ws.stats.delivered_direct += 1;
                    } else {
                        ws.stats.delivered_relayed += 1;
                    }
                } else {
                    ws.stats.duplicates += 1;
                }
                let ack = Frame::new(
                    FrameKind::Ack,
                    self.nodes[r].id,
                    Destination::Node(self.nodes[from].id),
                    Payload::Ack { origin, seq },
                    &self.sc.mac,
                );
                self.send_immediate(r, ack, now + self.sc.mac.turnaround_ns());
            }
            _ => {}
        }
        Ok(())
    }

    fn sensor_receive(
        &mut self,
        r: usize,
        from: usize,
        frame: Frame,
        power: PowerDbm,
        interference: &[PowerDbm],
    ) -> Result<()> {
        let now = self.now();
        let now_ms = ns_to_ms(now);
        let w = self.nodes[r].wban;
        let rid = self.nodes[r].id;
        let noise = self.sc.channel.noise_floor_dbm;
        match (frame.kind, frame.payload) {
            (FrameKind::Beacon, Payload::Beacon { superframe }) => {
                if superframe != self.wbans[w].superframe {
                    return Ok(());
                }
                self.nodes[r].synced_superframe = Some(superframe);
                if self.wbans[w].uses_ima {
                    let m = ima::on_beacon_received(power, interference, noise, &self.sc.protocol)?;
                    self.wbans[w].ima.record_beacon(rid, m, now_ms);
                }
                self.maybe_start_source(r)?;
            }
            (FrameKind::Rts, _) if self.wbans[w].uses_ima => {
                let m = ima::on_rts_received(power, interference, noise, &self.sc.protocol)?;
                self.wbans[w].ima.record_rts(rid, frame.src, m, now_ms);
                if !m.member || !matches!(self.nodes[r].role, Role::Idle) {
                    return Ok(());
                }
                let residual = self.nodes[r].battery.residual_mj();
                let Some(state) = self.wbans[w].ima.eligible_candidate(
                    rid,
                    frame.src,
                    residual,
                    &self.sc.protocol,
                ) else {
                    return Ok(());
                };
                self.wbans[w].stats.candidates_admitted += 1;
                let rand_max = self.sc.protocol.timer_rand_max_ms;
                let draw = self.nodes[r].timer_rng.random_range(0.0..=rand_max);
                let wait = ima::cts_wait_time(state.diff_db, &self.sc.protocol, draw)?;
                self.set_role(
                    r,
                    Role::Candidate(CandidateCtx {
                        source: from,
                        rts_end: now,
                        phase: CandPhase::Waiting,
                        state,
                    }),
                );
                self.set_timer(r, now + ms_to_ns(wait), TimerKind::CandidateFire);
            }
            (
                FrameKind::Cts,
                Payload::Cts {
                    residual_energy_mj,
                    sinr_db,
                },
            ) => {
                let uses_ima = self.wbans[w].uses_ima;
                let coordinator = self.wbans[w].coordinator;
                let Role::Source(src) = &mut self.nodes[r].role else {
                    return Ok(());
                };
                if src.phase != SrcPhase::AwaitCts {
                    return Ok(());
                }
                if uses_ima {
                    src.queue.enqueue(CtsEntry {
                        relay: frame.src,
                        residual_energy_mj,
                        sinr_db,
                        rx_time_ms: now_ms,
                    });
                } else if from == coordinator {
                    src.phase = SrcPhase::Data;
                    src.next_hop = coordinator;
                    let seq = src.seq;
                    self.nodes[r].timer_token += 1;
                    let data = self.data_frame(r, coordinator, rid, seq);
                    self.request_csma(r, data, false, None);
                }
            }
            (FrameKind::Winner, Payload::Winner { relay }) => {
                let Role::Candidate(c) = &self.nodes[r].role else {
                    return Ok(());
                };
                if c.source != from {
                    return Ok(());
                }
                if relay == Some(rid) && c.phase == CandPhase::AwaitWinner {
                    self.set_role(
                        r,
                        Role::Relay(RelayCtx {
                            source: from,
                            phase: RelayPhase::AwaitData,
                            packet: None,
                            queued: false,
                            attempts: 0,
                        }),
                    );
                    self.set_timer(
                        r,
                        now + ms_to_ns(RELAY_DATA_WAIT_MS),
                        TimerKind::RelayDataDeadline,
                    );
                } else {
                    self.become_idle(r)?;
                }
            }
            (FrameKind::Data, Payload::Data { origin, seq }) => {
                // DATA from a source we offered to relay for means we won,
                // even if its WINNER announcement was lost.
                let implicit = match &self.nodes[r].role {
                    Role::Candidate(c) => c.source == from && c.phase == CandPhase::AwaitWinner,
                    _ => false,
                };
                if implicit {
                    self.set_role(
                        r,
                        Role::Relay(RelayCtx {
                            source: from,
                            phase: RelayPhase::AwaitData,
                            packet: None,
                            queued: false,
                            attempts: 0,
                        }),
                    );
                }
                let Role::Relay(rel) = &mut self.nodes[r].role else {
                    return Ok(());
                };
                if rel.source != from {
                    return Ok(());
                }
                match rel.phase {
                    RelayPhase::AwaitData => {
                        rel.phase = RelayPhase::Forward;
                        rel.packet = Some((origin, seq));
                        self.nodes[r].timer_token += 1;
                    }
                    _ if rel.packet == Some((origin, seq)) => {}
                    _ => return Ok(()),
                }
                let ack = Frame::new(
                    FrameKind::Ack,
                    rid,
                    Destination::Node(frame.src),
                    Payload::Ack { origin, seq },
                    &self.sc.mac,
                );
                self.send_immediate(r, ack, now + self.sc.mac.turnaround_ns());
            }
            (FrameKind::Ack, Payload::Ack { origin, seq }) => match &self.nodes[r].role {
                Role::Source(src)
                    if src.phase == SrcPhase::AwaitAck
                        && src.next_hop == from
                        && origin == rid
                        && src.seq == seq =>
                {
                    self.finish_source(r, true)?;
                }
                Role::Relay(rel)
                    if rel.phase == RelayPhase::AwaitAck && rel.packet == Some((origin, seq)) =>
                {
                    self.become_idle(r)?;
                }
                _ => {}
            },
            _ => {}
        }
        Ok(())
    }

    fn on_sent(&mut self, i: usize, frame: Frame) -> Result<()> {
        let now = self.now();
        let w = self.nodes[i].wban;
        let uses_ima = self.wbans[w].uses_ima;
        let coordinator = self.wbans[w].coordinator;
        match (&mut self.nodes[i].role, frame.kind) {
            (Role::Source(src), FrameKind::Rts) if src.phase == SrcPhase::Rts => {
                src.phase = SrcPhase::AwaitCts;
                src.queue.clear();
                if uses_ima {
                    let at = now + self.cts_collect_ns();
                    self.set_timer(i, at, TimerKind::CtsWindowClose);
                } else {
                    let at = now + ms_to_ns(self.sc.protocol.cts_window_ms);
                    self.set_timer(i, at, TimerKind::CtsTimeout);
                }
            }
            (Role::Source(src), FrameKind::Winner) if src.phase == SrcPhase::Winner => {
                src.phase = SrcPhase::Data;
                let (hop, seq) = (src.next_hop, src.seq);
                let id = self.nodes[i].id;
                let data = self.data_frame(i, hop, id, seq);
                self.request_csma(i, data, false, None);
            }
            (Role::Source(src), FrameKind::Data) if src.phase == SrcPhase::Data => {
                src.phase = SrcPhase::AwaitAck;
                let at = now + self.ack_wait_ns();
                self.set_timer(i, at, TimerKind::AckTimeout);
            }
            (Role::Candidate(c), FrameKind::Cts) if c.phase == CandPhase::Contending => {
                c.phase = CandPhase::AwaitWinner;
                let at = c.rts_end
                    + self.cts_collect_ns()
                    + self.sc.mac.turnaround_ns()
                    + self.airtime(FrameKind::Winner)
                    + self.sc.mac.slot_ns();
                self.set_timer(i, at.max(now), TimerKind::WinnerDeadline);
            }
            (Role::Relay(rel), FrameKind::Ack)
                if rel.phase == RelayPhase::Forward && !rel.queued =>
            {
                rel.queued = true;
                let (origin, seq) = rel.packet.expect("relay holds a packet");
                let data = self.data_frame(i, coordinator, origin, seq);
                self.request_csma(i, data, false, None);
            }
            (Role::Relay(rel), FrameKind::Data) if rel.phase == RelayPhase::Forward => {
                rel.phase = RelayPhase::AwaitAck;
                let at = now + self.ack_wait_ns();
                self.set_timer(i, at, TimerKind::AckTimeout);
            }
            _ => {}
        }
        Ok(())
    }

    fn on_give_up(&mut self, i: usize, frame: Frame) -> Result<()> {
        let w = self.nodes[i].wban;
        match (&self.nodes[i].role, frame.kind) {
            (Role::Source(_), FrameKind::Rts | FrameKind::Data) => self.finish_source(i, false),
            (Role::Candidate(_), FrameKind::Cts) => self.become_idle(i),
            (Role::Relay(_), FrameKind::Data) => {
                self.wbans[w].stats.dropped += 1;
                self.become_idle(i)
            }
            _ => Ok(()),
        }
    }

    fn on_timer(&mut self, i: usize, kind: TimerKind) -> Result<()> {
        let now = self.now();
        let w = self.nodes[i].wban;
        let coordinator = self.wbans[w].coordinator;
        let max_retries = self.sc.protocol.max_retries;
        let id = self.nodes[i].id;
        let cts_offset = self.cts_deadline(0);
        match (kind, &mut self.nodes[i].role) {
            (TimerKind::CtsWindowClose, Role::Source(src)) if src.phase == SrcPhase::AwaitCts => {
                match src.queue.select_winner() {
                    Some(relay) => {
                        src.phase = SrcPhase::Winner;
                        let hop = self.wbans[w]
                            .sensors
                            .iter()
                            .copied()
                            .find(|&s| self.nodes[s].id == relay)
                            .ok_or_else(|| Error::Internal(format!("unknown relay {relay}")))?;
                        if let Role::Source(src) = &mut self.nodes[i].role {
                            src.next_hop = hop;
                        }
                        self.wbans[w].stats.winners_announced += 1;
                        let winner = Frame::new(
                            FrameKind::Winner,
                            id,
                            Destination::Broadcast,
                            Payload::Winner { relay: Some(relay) },
                            &self.sc.mac,
                        );
                        self.send_immediate(i, winner, now);
                    }
                    None => {
                        src.phase = SrcPhase::Data;
                        src.next_hop = coordinator;
                        let seq = src.seq;
                        self.wbans[w].stats.fallbacks += 1;
                        let data = self.data_frame(i, coordinator, id, seq);
                        self.request_csma(i, data, false, None);
                    }
                }
            }
            (TimerKind::CtsTimeout, Role::Source(src)) if src.phase == SrcPhase::AwaitCts => {
                src.rts_attempts += 1;
                if src.rts_attempts > max_retries {
                    return self.finish_source(i, false);
                }
                src.phase = SrcPhase::Rts;
                let seq = src.seq;
                let rts = Frame::new(
                    FrameKind::Rts,
                    id,
                    Destination::Node(self.nodes[coordinator].id),
                    Payload::Rts { seq },
                    &self.sc.mac,
                );
                let cap_end = self.wbans[w].cap_end;
                self.request_csma(i, rts, true, Some(cap_end.max(now)));
            }
            (TimerKind::AckTimeout, Role::Source(src)) if src.phase == SrcPhase::AwaitAck => {
                src.data_attempts += 1;
                if src.data_attempts > max_retries {
                    return self.finish_source(i, false);
                }
                src.phase = SrcPhase::Data;
                let (hop, seq) = (src.next_hop, src.seq);
                let data = self.data_frame(i, hop, id, seq);
                self.request_csma(i, data, true, None);
            }
            (TimerKind::AckTimeout, Role::Relay(rel)) if rel.phase == RelayPhase::AwaitAck => {
                rel.attempts += 1;
                if rel.attempts > max_retries {
                    self.wbans[w].stats.dropped += 1;
                    return self.become_idle(i);
                }
                rel.phase = RelayPhase::Forward;
                let (origin, seq) = rel.packet.expect("relay holds a packet");
                let data = self.data_frame(i, coordinator, origin, seq);
                self.request_csma(i, data, true, None);
            }
            (TimerKind::CandidateFire, Role::Candidate(c)) if c.phase == CandPhase::Waiting => {
                c.phase = CandPhase::Contending;
                let source = c.source;
                let expires = c.rts_end + cts_offset;
                let sinr = c.state.sinr_to_source_db;
                let cts = Frame::new(
                    FrameKind::Cts,
                    id,
                    Destination::Node(self.nodes[source].id),
                    Payload::Cts {
                        residual_energy_mj: self.nodes[i].battery.residual_mj(),
                        sinr_db: sinr,
                    },
                    &self.sc.mac,
                );
                self.request_csma(i, cts, false, Some(expires));
            }
            (TimerKind::WinnerDeadline, Role::Candidate(_))
            | (TimerKind::RelayDataDeadline, Role::Relay(_)) => {
                self.become_idle(i)?;
            }
            _ => {}
        }
        Ok(())
    }
}

/// Runs `scenario` to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<MetricsReport> {
    Ok(Simulator::new(scenario)?.run()?.0)
}

/// Runs `scenario` and also returns the medium trace.
pub fn run_scenario_traced(scenario: &Scenario) -> Result<(MetricsReport, Trace)> {
    let (report, trace) = Simulator::new(scenario)?.with_trace().run()?;
    Ok((report, trace.expect("tracing enabled")))
}
