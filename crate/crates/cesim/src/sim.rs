//! Deterministic discrete-event engine: integer-millisecond clock, event
//! queue, message links with latency, coupling-loss traces, traffic
//! generation, and the global event log and metrics.
//!
//! Every side effect flows through the event queue. Events are totally
//! ordered by `(time, seq)` where `seq` is assigned at scheduling time, so a
//! scenario and a seed determine the run completely: two runs produce
//! byte-identical event logs. The only randomness is the optional start
//! jitter of periodic traffic, drawn from a PRNG seeded by the scenario.
//!
//! One LTE subframe is one millisecond, which makes repetition airtime
//! exact: a transmission of `payload * reps` subframes adds that many
//! milliseconds to its Uu delivery delay.
//!
//! Control-plane signaling over Uu is subject to the link budget, with the
//! UE's declared capability governing the allowed repetitions. This mirrors
//! the procedure order: the capability must be declared first, then the
//! attach can reach the network from outside normal coverage. NAS messages
//! ride transparently through the serving eNB; the simulator routes them
//! UE-to-MME in one hop of `uu + s1` latency (plus Uu airtime).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    CellNode, CellResourceLedger, EnbEmit, HssNode, MmeEmit, MmeNode, PlmnRegistry, UeRadioProfile,
};
use crate::protocol::{
    AppMessage, AttachState, Imsi, NasMessage, ProtocolMessage, UeCapabilities, UeCategory, UeFsm,
};
use crate::radio::{CouplingLoss, LinkBudgetConfig};
use crate::scenario::{Scenario, ScriptedAction, VehicleSpec};
use crate::vehicle::{ConnectionManager, Modem, ProcedureRun, ServiceQos, TrafficPattern};

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    /// Bug guard: something tried to schedule an event before the current
    /// simulation time. Aborts the run.
    #[error("internal error: event scheduled in the past ({at} ms < now {now} ms)")]
    SchedulingInPast { at: u64, now: u64 },
}

// ---------------------------------------------------------------------------
// Event log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogCategory {
    Sim,
    Coverage,
    AtCommand,
    Protocol,
    Procedure,
    Service,
    Traffic,
    Radio,
}

impl fmt::Display for LogCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogCategory::Sim => write!(f, "sim"),
            LogCategory::Coverage => write!(f, "coverage"),
            LogCategory::AtCommand => write!(f, "at-command"),
            LogCategory::Protocol => write!(f, "protocol"),
            LogCategory::Procedure => write!(f, "procedure"),
            LogCategory::Service => write!(f, "service"),
            LogCategory::Traffic => write!(f, "traffic"),
            LogCategory::Radio => write!(f, "radio"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub time_ms: u64,
    pub node: String,
    pub category: LogCategory,
    pub detail: String,
}

/// Append-only, reproducible record of everything that happened. Identical
/// scenario and seed give an identical log, byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub records: Vec<LogRecord>,
}

fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EventLog {
    fn push(&mut self, time_ms: u64, node: &str, category: LogCategory, detail: String) {
        self.records.push(LogRecord {
            time_ms,
            node: node.to_string(),
            category,
            detail,
        });
    }

    /// Fixed-column CSV rendering: `time_ms,node,category,detail`, one
    /// record per entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_ms,node,category,detail\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.time_ms,
                csv_field(&r.node),
                csv_field(&r.category.to_string()),
                csv_field(&r.detail)
            ));
        }
        out
    }

    pub fn records_of(&self, category: LogCategory) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.category == category)
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceMetrics {
    /// Traffic occasions that found an attached UE and went on the air.
    pub attempted: u64,
    pub delivered: u64,
    /// Traffic occasions that found the UE detached; nothing went on the air.
    pub failed_detached: u64,
    /// delivered / attempted, or 0.0 when nothing was attempted.
    pub delivery_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    pub attaches: u64,
    pub attach_rejects: u64,
    pub detaches: u64,
    pub time_in_ce_ms: u64,
}

/// Aggregated counters of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Keyed `imsi/service`.
    pub services: BTreeMap<String, ServiceMetrics>,
    /// Keyed by cell name.
    pub cells: BTreeMap<String, CellResourceLedger>,
    /// Keyed by IMSI.
    pub vehicles: BTreeMap<String, VehicleMetrics>,
    /// Procedure outcome histogram, keyed `kind/result`.
    pub procedures: BTreeMap<String, u64>,
}

impl Metrics {
    pub fn service(&self, imsi: &str, service: &str) -> Option<&ServiceMetrics> {
        self.services.get(&format!("{imsi}/{service}"))
    }
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NodeRef {
    Vehicle(usize),
    Cell(usize),
    Mme(usize),
    Hss(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Uplink,
    Downlink,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Uplink => write!(f, "up"),
            Direction::Downlink => write!(f, "down"),
        }
    }
}

#[derive(Debug, Clone)]
enum EventKind {
    TraceSample {
        vehicle: usize,
        loss: CouplingLoss,
    },
    TrafficDue {
        vehicle: usize,
        service: usize,
        direction: Direction,
        payload_subframes: u32,
        /// Periodic traffic reschedules itself; triggered traffic does not.
        period_ms: Option<u64>,
    },
    MessageDelivery {
        from: NodeRef,
        to: NodeRef,
        msg: ProtocolMessage,
    },
    TimerFire {
        vehicle: usize,
        action: ScriptedAction,
    },
}

#[derive(Debug)]
struct SimEvent {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for SimEvent {}
impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

// ---------------------------------------------------------------------------
// Vehicle node
// ---------------------------------------------------------------------------

#[derive(Debug)]
struct VehicleNode {
    imsi: Imsi,
    modem: Modem,
    cm: ConnectionManager,
    serving_cell: usize,
    /// Millisecond at which `ce_active` last became true.
    ce_active_since: Option<u64>,
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// One simulation run over a validated scenario. Construct with
/// [`Simulation::new`] (or [`Simulation::with_seed`] to override the
/// scenario seed), then call [`Simulation::run`].
pub struct Simulation {
    duration_ms: u64,
    seed: u64,
    uu_ms: u64,
    s1_ms: u64,
    diameter_ms: u64,
    radio_cfg: LinkBudgetConfig,

    vehicles: Vec<VehicleNode>,
    vehicle_specs: Vec<VehicleSpec>,
    cells: Vec<CellNode>,
    mmes: Vec<MmeNode>,
    hsss: Vec<HssNode>,
    registry: PlmnRegistry,
    /// Serving MME index per cell.
    cell_mme: Vec<usize>,
    imsi_to_vehicle: BTreeMap<Imsi, usize>,

    now: u64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<SimEvent>>,
    log: EventLog,
    metrics: Metrics,
    rng: ChaCha8Rng,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Self {
        Self::with_seed(scenario, scenario.sim.seed)
    }

    pub fn with_seed(scenario: &Scenario, seed: u64) -> Self {
        let cells: Vec<CellNode> = scenario
            .cells
            .iter()
            .map(|c| {
                let plmn = &scenario.plmns[c.plmn];
                CellNode::new(
                    c.name.clone(),
                    plmn.plmn_id.clone(),
                    plmn.supports_ce_mode_a_high_category,
                )
            })
            .collect();
        let mmes: Vec<MmeNode> = scenario
            .mmes
            .iter()
            .map(|m| MmeNode::new(m.name.clone(), scenario.plmns[m.plmn].plmn_id.clone()))
            .collect();
        let mut hsss: Vec<HssNode> = scenario
            .hsss
            .iter()
            .map(|h| HssNode::new(h.name.clone()))
            .collect();
        // Each subscription lives in its home PLMN's HSS; records whose IMSI
        // matches no HSS-bearing PLMN are unreachable by construction.
        for sub in &scenario.subscriptions {
            if let Ok(hss) = scenario.registry.route_s6a(&sub.imsi) {
                hsss[hss].insert_subscription(sub.clone());
            }
        }

        let mut imsi_to_vehicle = BTreeMap::new();
        let mut metrics = Metrics::default();
        let vehicles: Vec<VehicleNode> = scenario
            .vehicles
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                imsi_to_vehicle.insert(v.imsi.clone(), idx);
                metrics.vehicles.insert(v.imsi.to_string(), VehicleMetrics::default());
                for svc in &v.services {
                    metrics
                        .services
                        .insert(format!("{}/{}", v.imsi, svc.name), ServiceMetrics::default());
                }
                Self::build_vehicle(scenario, v)
            })
            .collect();

        Simulation {
            duration_ms: scenario.sim.duration_ms,
            seed,
            uu_ms: scenario.sim.latencies.uu_ms,
            s1_ms: scenario.sim.latencies.s1_ms,
            diameter_ms: scenario.sim.latencies.diameter_ms,
            radio_cfg: scenario.radio.clone(),
            vehicles,
            vehicle_specs: scenario.vehicles.clone(),
            cells,
            mmes,
            hsss,
            registry: scenario.registry.clone(),
            cell_mme: scenario.cells.iter().map(|c| c.mme).collect(),
            imsi_to_vehicle,
            now: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            log: EventLog::default(),
            metrics,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn build_vehicle(scenario: &Scenario, spec: &VehicleSpec) -> VehicleNode {
        let serving_plmn = &scenario.plmns[scenario.cells[spec.home_cell].plmn];
        let network_supports_ce = serving_plmn.supports_ce_mode_a_high_category
            || spec.ue_category == UeCategory::CatM1;
        // High-category modems boot without the CE capability declared; the
        // connection manager turns it on dynamically. Cat-M1 modems carry it
        // always.
        let caps = UeCapabilities::new(
            spec.ue_category,
            spec.ue_category == UeCategory::CatM1,
            spec.restriction_supported,
        );
        let initial_loss = CouplingLoss::new(spec.trace[0].1).expect("validated trace");
        let mut cm = ConnectionManager::new(spec.dynamic_ce);
        for svc in &spec.services {
            cm.register_service(svc.clone())
                .expect("validated unique service names");
        }
        VehicleNode {
            imsi: spec.imsi.clone(),
            modem: Modem::new(
                UeFsm::new(spec.imsi.clone(), caps, network_supports_ce),
                initial_loss,
            ),
            cm,
            serving_cell: spec.home_cell,
            ce_active_since: None,
        }
    }

    // -- plumbing -----------------------------------------------------------

    fn schedule(&mut self, at: u64, kind: EventKind) -> Result<(), SimError> {
        if at < self.now {
            return Err(SimError::SchedulingInPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(SimEvent { time: at, seq, kind }));
        Ok(())
    }

    fn log(&mut self, node: &str, category: LogCategory, detail: String) {
        self.log.push(self.now, node, category, detail);
    }

    fn vehicle_name(&self, v: usize) -> String {
        self.vehicles[v].imsi.to_string()
    }

    /// The radio view of a vehicle for control-plane transmissions: its
    /// currently declared capability, the restriction it has received (a
    /// fresh attach assumes Enhanced Coverage is allowed until told
    /// otherwise), and the serving PLMN's support flag.
    fn profile_of(&self, v: usize) -> UeRadioProfile {
        let veh = &self.vehicles[v];
        UeRadioProfile {
            ce_capable: veh.modem.fsm.caps.ce_mode_a_supported,
            restricted: veh.modem.fsm.attach.ecr_received == Some(true),
            category: veh.modem.fsm.caps.ue_category,
            plmn_supports_ce_high_category: self.cells[veh.serving_cell]
                .supports_ce_high_category,
        }
    }

    /// Attach/CE bookkeeping around any mutation of a vehicle's modem state.
    fn sync_vehicle_metrics(&mut self, v: usize, before: (AttachState, bool)) {
        let after_state = self.vehicles[v].modem.attach_state();
        let after_ce = self.vehicles[v].modem.fsm.attach.ce_active;
        let now = self.now;
        let (before_state, before_ce) = before;
        let entry = self
            .metrics
            .vehicles
            .entry(self.vehicles[v].imsi.to_string())
            .or_default();
        if before_state == AttachState::Attached && after_state != AttachState::Attached {
            entry.detaches += 1;
        }
        if before_state != AttachState::Attached && after_state == AttachState::Attached {
            entry.attaches += 1;
        }
        if !before_ce && after_ce {
            self.vehicles[v].ce_active_since = Some(now);
        }
        if before_ce && !after_ce {
            if let Some(since) = self.vehicles[v].ce_active_since.take() {
                entry.time_in_ce_ms += now - since;
            }
        }
    }

    fn vehicle_state(&self, v: usize) -> (AttachState, bool) {
        (
            self.vehicles[v].modem.attach_state(),
            self.vehicles[v].modem.fsm.attach.ce_active,
        )
    }

    // -- message transport ----------------------------------------------------

    /// Evaluates one Uu transmission at the serving cell of `v`, charging
    /// the ledger, and returns the airtime in ms when delivered.
    fn uu_transmit(
        &mut self,
        v: usize,
        payload_subframes: u32,
        msg: &ProtocolMessage,
        direction: Direction,
    ) -> Option<u64> {
        let profile = self.profile_of(v);
        let loss = self.vehicles[v].modem.coupling_loss();
        let cell_idx = self.vehicles[v].serving_cell;
        let outcome = self.cells[cell_idx].transmit_with_profile(
            &profile,
            loss,
            payload_subframes,
            &self.radio_cfg,
        );
        let cell_name = self.cells[cell_idx].name.clone();
        let imsi = self.vehicle_name(v);
        self.log(
            &cell_name,
            LogCategory::Radio,
            format!(
                "control dir={direction} reps={} payload={payload_subframes} delivered={} cost={} ue={imsi} {msg}",
                outcome.reps_used,
                outcome.delivered,
                outcome.cost.subframes
            ),
        );
        if outcome.delivered {
            Some(outcome.cost.subframes)
        } else {
            self.log(
                &imsi,
                LogCategory::Protocol,
                format!("dropped (radio, dir={direction}) {msg}"),
            );
            None
        }
    }

    /// Routes a message leaving the modem of vehicle `v`: RRC to the serving
    /// cell, NAS transparently through to the MME. Both legs start with the
    /// Uu link and its repetition airtime.
    fn send_from_vehicle(&mut self, v: usize, msg: ProtocolMessage) -> Result<(), SimError> {
        let Some(airtime) = self.uu_transmit(v, 1, &msg, Direction::Uplink) else {
            return Ok(());
        };
        let cell = self.vehicles[v].serving_cell;
        let (to, latency) = match &msg {
            ProtocolMessage::Nas(_) => (
                NodeRef::Mme(self.cell_mme[cell]),
                self.uu_ms + airtime + self.s1_ms,
            ),
            _ => (NodeRef::Cell(cell), self.uu_ms + airtime),
        };
        self.schedule(
            self.now + latency,
            EventKind::MessageDelivery {
                from: NodeRef::Vehicle(v),
                to,
                msg,
            },
        )
    }

    /// Routes one eNB emission.
    fn send_from_cell(&mut self, c: usize, emit: EnbEmit) -> Result<(), SimError> {
        match emit {
            EnbEmit::ToUe(imsi, msg) => {
                let Some(&v) = self.imsi_to_vehicle.get(&imsi) else {
                    self.log(
                        &self.cells[c].name.clone(),
                        LogCategory::Protocol,
                        format!("dropped (no such UE {imsi}) {msg}"),
                    );
                    return Ok(());
                };
                let Some(airtime) = self.uu_transmit(v, 1, &msg, Direction::Downlink) else {
                    return Ok(());
                };
                self.schedule(
                    self.now + self.uu_ms + airtime,
                    EventKind::MessageDelivery {
                        from: NodeRef::Cell(c),
                        to: NodeRef::Vehicle(v),
                        msg,
                    },
                )
            }
            EnbEmit::ToMme(msg) => self.schedule(
                self.now + self.s1_ms,
                EventKind::MessageDelivery {
                    from: NodeRef::Cell(c),
                    to: NodeRef::Mme(self.cell_mme[c]),
                    msg,
                },
            ),
        }
    }

    /// Routes one MME emission. NAS toward a UE crosses S1 and then the Uu
    /// link of the UE's serving cell; the Uu leg is radio-evaluated at send
    /// time.
    fn send_from_mme(&mut self, m: usize, emit: MmeEmit) -> Result<(), SimError> {
        match emit {
            MmeEmit::ToUe(imsi, msg) => {
                let Some(&v) = self.imsi_to_vehicle.get(&imsi) else {
                    self.log(
                        &self.mmes[m].name.clone(),
                        LogCategory::Protocol,
                        format!("dropped (no such UE {imsi}) {msg}"),
                    );
                    return Ok(());
                };
                let Some(airtime) = self.uu_transmit(v, 1, &msg, Direction::Downlink) else {
                    return Ok(());
                };
                self.schedule(
                    self.now + self.s1_ms + self.uu_ms + airtime,
                    EventKind::MessageDelivery {
                        from: NodeRef::Mme(m),
                        to: NodeRef::Vehicle(v),
                        msg,
                    },
                )
            }
            MmeEmit::ToEnb(imsi, msg) => {
                let Some(&v) = self.imsi_to_vehicle.get(&imsi) else {
                    return Ok(());
                };
                let cell = self.vehicles[v].serving_cell;
                self.schedule(
                    self.now + self.s1_ms,
                    EventKind::MessageDelivery {
                        from: NodeRef::Mme(m),
                        to: NodeRef::Cell(cell),
                        msg,
                    },
                )
            }
            MmeEmit::ToHss(h, msg) => self.schedule(
                self.now + self.diameter_ms,
                EventKind::MessageDelivery {
                    from: NodeRef::Mme(m),
                    to: NodeRef::Hss(h),
                    msg,
                },
            ),
        }
    }

    // -- event handlers -------------------------------------------------------

    fn on_trace_sample(&mut self, v: usize, loss: CouplingLoss) -> Result<(), SimError> {
        let node = self.vehicle_name(v);
        let before = self.vehicle_state(v);
        let outcome = {
            let cfg = self.radio_cfg.clone();
            let veh = &mut self.vehicles[v];
            veh.modem.set_coupling_loss(loss);
            veh.cm.on_coverage_sample(&mut veh.modem, &cfg)
        };
        self.log(&node, LogCategory::AtCommand, outcome.poll.render());
        if let Some((from, to)) = outcome.transition {
            self.log(
                &node,
                LogCategory::Coverage,
                format!("transition {from} -> {to} loss={loss}"),
            );
        }
        self.sync_vehicle_metrics(v, before);
        if let Some(run) = outcome.procedure {
            self.apply_procedure_run(v, run)?;
        }

        // Sim start: a vehicle that no procedure has attached yet performs
        // its initial attach here, on its first sample.
        if self.now == 0 && self.vehicles[v].modem.attach_state() == AttachState::Detached {
            self.run_at_command(v, "AT+CGATT=1")?;
        }
        Ok(())
    }

    /// Logs and executes one externally driven AT command (initial attach,
    /// scripted attach/detach), routing whatever it put on the air.
    fn run_at_command(&mut self, v: usize, cmd: &str) -> Result<(), SimError> {
        let node = self.vehicle_name(v);
        let before = self.vehicle_state(v);
        let exchange = self.vehicles[v].modem.execute(cmd);
        self.log(&node, LogCategory::AtCommand, exchange.render());
        self.sync_vehicle_metrics(v, before);
        for msg in exchange.outbound {
            self.send_from_vehicle(v, msg)?;
        }
        Ok(())
    }

    /// Writes a procedure's step and result records, updates the outcome
    /// histogram, and routes the signaling the procedure generated.
    fn apply_procedure_run(&mut self, v: usize, run: ProcedureRun) -> Result<(), SimError> {
        let node = self.vehicle_name(v);
        let before_dummy = self.vehicle_state(v); // states already mutated inside the run
        let _ = before_dummy;
        self.log(&node, LogCategory::Procedure, format!("{} begin", run.kind));
        for step in &run.steps {
            self.log(
                &node,
                LogCategory::Procedure,
                format!(
                    "{} step {} {}: {} => {}",
                    run.kind, step.step, step.label, step.command, step.response
                ),
            );
            self.log(
                &node,
                LogCategory::AtCommand,
                format!("{} => {}", step.command, step.response),
            );
        }
        let outcome = match &run.result {
            Ok(result) => result.to_string(),
            Err(e) => e.to_string(),
        };
        self.log(
            &node,
            LogCategory::Procedure,
            format!(
                "{} result={outcome} commands=[{}]",
                run.kind,
                run.commands().join(", ")
            ),
        );
        *self
            .metrics
            .procedures
            .entry(run.outcome_label())
            .or_insert(0) += 1;
        for msg in run.outbound {
            self.send_from_vehicle(v, msg)?;
        }
        Ok(())
    }

    fn on_traffic_due(
        &mut self,
        v: usize,
        service: usize,
        direction: Direction,
        payload_subframes: u32,
        period_ms: Option<u64>,
    ) -> Result<(), SimError> {
        let node = self.vehicle_name(v);
        let svc = &self.vehicles[v].cm.services()[service];
        let svc_name = svc.name.clone();
        let active = svc.active;
        let key = format!("{node}/{svc_name}");

        if active {
            if self.vehicles[v].modem.attach_state() == AttachState::Attached {
                let loss = self.vehicles[v].modem.coupling_loss();
                let cell_idx = self.vehicles[v].serving_cell;
                let imsi = self.vehicles[v].imsi.clone();
                match self.cells[cell_idx].schedule_transmission(
                    &imsi,
                    loss,
                    payload_subframes,
                    &self.radio_cfg,
                ) {
                    Ok(outcome) => {
                        let cell_name = self.cells[cell_idx].name.clone();
                        let m = self.metrics.services.entry(key).or_default();
                        m.attempted += 1;
                        if outcome.delivered {
                            m.delivered += 1;
                        }
                        self.log(
                            &node,
                            LogCategory::Traffic,
                            format!(
                                "service={svc_name} dir={direction} payload={payload_subframes} reps={} delivered={} cost={} cell={cell_name}",
                                outcome.reps_used, outcome.delivered, outcome.cost.subframes
                            ),
                        );
                        if outcome.delivered {
                            let airtime = outcome.cost.subframes;
                            let (to, msg) = match direction {
                                Direction::Uplink => (
                                    NodeRef::Cell(cell_idx),
                                    ProtocolMessage::App(AppMessage::UplinkData {
                                        payload_subframes,
                                    }),
                                ),
                                Direction::Downlink => (
                                    NodeRef::Vehicle(v),
                                    ProtocolMessage::App(AppMessage::DownlinkData {
                                        payload_subframes,
                                    }),
                                ),
                            };
                            let from = match direction {
                                Direction::Uplink => NodeRef::Vehicle(v),
                                Direction::Downlink => NodeRef::Cell(cell_idx),
                            };
                            self.schedule(
                                self.now + self.uu_ms + airtime,
                                EventKind::MessageDelivery { from, to, msg },
                            )?;
                        }
                    }
                    Err(e) => {
                        // Attached at the UE but no scheduler context at the
                        // eNB: releases crossed a re-attach. Nothing on air.
                        self.metrics.services.entry(key).or_default().failed_detached += 1;
                        self.log(
                            &node,
                            LogCategory::Traffic,
                            format!(
                                "service={svc_name} dir={direction} payload={payload_subframes} skipped=no-context ({e})"
                            ),
                        );
                    }
                }
            } else {
                self.metrics.services.entry(key).or_default().failed_detached += 1;
                self.log(
                    &node,
                    LogCategory::Traffic,
                    format!(
                        "service={svc_name} dir={direction} payload={payload_subframes} skipped=detached"
                    ),
                );
            }
        } else {
            self.log(
                &node,
                LogCategory::Traffic,
                format!(
                    "service={svc_name} dir={direction} payload={payload_subframes} skipped=inactive"
                ),
            );
        }

        if let Some(period) = period_ms {
            let next = self.now + period;
            if next <= self.duration_ms {
                self.schedule(
                    next,
                    EventKind::TrafficDue {
                        vehicle: v,
                        service,
                        direction,
                        payload_subframes,
                        period_ms: Some(period),
                    },
                )?;
            }
        }
        Ok(())
    }

    fn on_scripted(&mut self, v: usize, action: ScriptedAction) -> Result<(), SimError> {
        let node = self.vehicle_name(v);
        match action {
            ScriptedAction::ActivateService { service } => {
                let before = self.vehicle_state(v);
                let result = {
                    let veh = &mut self.vehicles[v];
                    veh.cm.activate_service(&service, &mut veh.modem)
                };
                self.sync_vehicle_metrics(v, before);
                match result {
                    Ok(run) => {
                        self.log(&node, LogCategory::Service, format!("activated {service}"));
                        if let Some(run) = run {
                            self.apply_procedure_run(v, run)?;
                        }
                    }
                    Err(e) => self.log(&node, LogCategory::Service, format!("error {e}")),
                }
            }
            ScriptedAction::DeactivateService { service } => {
                let before = self.vehicle_state(v);
                let result = {
                    let veh = &mut self.vehicles[v];
                    veh.cm.deactivate_service(&service, &mut veh.modem)
                };
                self.sync_vehicle_metrics(v, before);
                match result {
                    Ok(run) => {
                        self.log(&node, LogCategory::Service, format!("deactivated {service}"));
                        if let Some(run) = run {
                            self.apply_procedure_run(v, run)?;
                        }
                    }
                    Err(e) => self.log(&node, LogCategory::Service, format!("error {e}")),
                }
            }
            ScriptedAction::TriggerService { service } => {
                if let Some(idx) = self.service_index(v, &service) {
                    let payload = self.vehicles[v].cm.services()[idx].payload_subframes();
                    self.schedule(
                        self.now,
                        EventKind::TrafficDue {
                            vehicle: v,
                            service: idx,
                            direction: Direction::Uplink,
                            payload_subframes: payload,
                            period_ms: None,
                        },
                    )?;
                }
            }
            ScriptedAction::Downlink {
                service,
                payload_subframes,
            } => {
                if let Some(idx) = self.service_index(v, &service) {
                    self.schedule(
                        self.now,
                        EventKind::TrafficDue {
                            vehicle: v,
                            service: idx,
                            direction: Direction::Downlink,
                            payload_subframes,
                            period_ms: None,
                        },
                    )?;
                }
            }
            ScriptedAction::Attach => self.run_at_command(v, "AT+CGATT=1")?,
            ScriptedAction::Detach => self.run_at_command(v, "AT+CGATT=0")?,
        }
        Ok(())
    }

    fn service_index(&self, v: usize, name: &str) -> Option<usize> {
        self.vehicles[v]
            .cm
            .services()
            .iter()
            .position(|s| s.name == name)
    }

    fn on_delivery(
        &mut self,
        from: NodeRef,
        to: NodeRef,
        msg: ProtocolMessage,
    ) -> Result<(), SimError> {
        match to {
            NodeRef::Vehicle(v) => self.deliver_to_vehicle(v, msg),
            NodeRef::Cell(c) => self.deliver_to_cell(from, c, msg),
            NodeRef::Mme(m) => self.deliver_to_mme(m, msg),
            NodeRef::Hss(h) => self.deliver_to_hss(from, h, msg),
        }
    }

    fn deliver_to_vehicle(&mut self, v: usize, msg: ProtocolMessage) -> Result<(), SimError> {
        let node = self.vehicle_name(v);
        if let ProtocolMessage::App(AppMessage::DownlinkData { payload_subframes }) = msg {
            self.log(
                &node,
                LogCategory::Traffic,
                format!("received dir=down payload={payload_subframes}"),
            );
            return Ok(());
        }

        self.log(&node, LogCategory::Protocol, format!("recv {msg}"));
        let before = self.vehicle_state(v);
        let out = self.vehicles[v].modem.fsm.handle_message(&msg);
        if let Some(violation) = &out.violation {
            self.log(&node, LogCategory::Protocol, format!("violation: {violation}"));
        }
        for note in &out.notes {
            self.log(&node, LogCategory::Protocol, note.clone());
        }
        if out.violation.is_none()
            && matches!(msg, ProtocolMessage::Nas(NasMessage::AttachReject { .. }))
            && before.0 == AttachState::Attaching
        {
            self.metrics
                .vehicles
                .entry(node.clone())
                .or_default()
                .attach_rejects += 1;
        }
        self.sync_vehicle_metrics(v, before);
        for emitted in out.emitted {
            self.send_from_vehicle(v, emitted)?;
        }
        Ok(())
    }

    fn deliver_to_cell(
        &mut self,
        from: NodeRef,
        c: usize,
        msg: ProtocolMessage,
    ) -> Result<(), SimError> {
        let cell_name = self.cells[c].name.clone();
        if let ProtocolMessage::App(AppMessage::UplinkData { payload_subframes }) = msg {
            let from_name = match from {
                NodeRef::Vehicle(v) => self.vehicle_name(v),
                _ => "?".to_string(),
            };
            self.log(
                &cell_name,
                LogCategory::Traffic,
                format!("received dir=up payload={payload_subframes} ue={from_name}"),
            );
            return Ok(());
        }

        self.log(&cell_name, LogCategory::Protocol, format!("recv {msg}"));
        let out = match from {
            NodeRef::Vehicle(v) => {
                let imsi = self.vehicles[v].imsi.clone();
                self.cells[c].handle_from_ue(&imsi, &msg)
            }
            _ => self.cells[c].handle_from_mme(&msg),
        };
        if let Some(violation) = &out.violation {
            self.log(
                &cell_name,
                LogCategory::Protocol,
                format!("violation: {violation}"),
            );
        }
        for note in &out.notes {
            self.log(&cell_name, LogCategory::Protocol, note.clone());
        }
        for emitted in out.emitted {
            self.send_from_cell(c, emitted)?;
        }
        Ok(())
    }

    fn deliver_to_mme(&mut self, m: usize, msg: ProtocolMessage) -> Result<(), SimError> {
        let name = self.mmes[m].name.clone();
        self.log(&name, LogCategory::Protocol, format!("recv {msg}"));
        let out = {
            let registry = self.registry.clone();
            self.mmes[m].handle(&registry, &msg)
        };
        if let Some(violation) = &out.violation {
            self.log(&name, LogCategory::Protocol, format!("violation: {violation}"));
        }
        for note in &out.notes {
            self.log(&name, LogCategory::Protocol, note.clone());
        }
        for emitted in out.emitted {
            self.send_from_mme(m, emitted)?;
        }
        Ok(())
    }

    fn deliver_to_hss(
        &mut self,
        from: NodeRef,
        h: usize,
        msg: ProtocolMessage,
    ) -> Result<(), SimError> {
        let name = self.hsss[h].name.clone();
        self.log(&name, LogCategory::Protocol, format!("recv {msg}"));
        let out = self.hsss[h].handle(&msg);
        if let Some(violation) = &out.violation {
            self.log(&name, LogCategory::Protocol, format!("violation: {violation}"));
        }
        let NodeRef::Mme(m) = from else {
            return Ok(());
        };
        for answer in out.emitted {
            self.schedule(
                self.now + self.diameter_ms,
                EventKind::MessageDelivery {
                    from: NodeRef::Hss(h),
                    to: NodeRef::Mme(m),
                    msg: answer,
                },
            )?;
        }
        Ok(())
    }

    // -- run ------------------------------------------------------------------

    fn schedule_initial_events(&mut self) -> Result<(), SimError> {
        for v in 0..self.vehicles.len() {
            let node = self.vehicle_name(v);
            for svc in self.vehicles[v].cm.services().to_vec() {
                self.log(
                    &node,
                    LogCategory::Service,
                    format!(
                        "registered name={} qos={} active={}",
                        svc.name,
                        match svc.qos {
                            ServiceQos::LowRate => "low_rate",
                            ServiceQos::HighRate => "high_rate",
                        },
                        svc.active
                    ),
                );
            }

            let trace = self.vehicle_specs[v].trace.clone();
            for (t, db) in trace {
                let loss = CouplingLoss::new(db).expect("validated trace");
                self.schedule(t, EventKind::TraceSample { vehicle: v, loss })?;
            }

            let services = self.vehicle_specs[v].services.clone();
            for (idx, svc) in services.iter().enumerate() {
                if let TrafficPattern::Periodic {
                    period_ms,
                    payload_subframes,
                    start_jitter_ms,
                } = svc.traffic
                {
                    let jitter = if start_jitter_ms > 0 {
                        self.rng.gen_range(0..=start_jitter_ms)
                    } else {
                        0
                    };
                    let first = period_ms + jitter;
                    if first <= self.duration_ms {
                        self.schedule(
                            first,
                            EventKind::TrafficDue {
                                vehicle: v,
                                service: idx,
                                direction: Direction::Uplink,
                                payload_subframes,
                                period_ms: Some(period_ms),
                            },
                        )?;
                    }
                }
            }

            let scripted = self.vehicle_specs[v].scripted.clone();
            for (t, action) in scripted {
                self.schedule(t, EventKind::TimerFire { vehicle: v, action })?;
            }
        }
        Ok(())
    }

    fn finalize_metrics(&mut self) {
        for v in 0..self.vehicles.len() {
            if self.vehicles[v].modem.fsm.attach.ce_active {
                if let Some(since) = self.vehicles[v].ce_active_since.take() {
                    let imsi = self.vehicles[v].imsi.to_string();
                    self.metrics.vehicles.entry(imsi).or_default().time_in_ce_ms +=
                        self.duration_ms - since;
                }
            }
        }
        for cell in &self.cells {
            self.metrics
                .cells
                .insert(cell.name.clone(), cell.ledger_report());
        }
        for m in self.metrics.services.values_mut() {
            m.delivery_ratio = if m.attempted == 0 {
                0.0
            } else {
                m.delivered as f64 / m.attempted as f64
            };
        }
    }

    /// Processes events in `(time, seq)` order until the end of the
    /// simulated horizon, returning the complete log and metrics.
    pub fn run(mut self) -> Result<(EventLog, Metrics), SimError> {
        self.log.push(
            0,
            "sim",
            LogCategory::Sim,
            format!("start duration_ms={} seed={}", self.duration_ms, self.seed),
        );

        self.schedule_initial_events()?;

        while let Some(Reverse(event)) = self.queue.pop() {
            if event.time > self.duration_ms {
                break;
            }
            debug_assert!(event.time >= self.now);
            self.now = event.time;
            self.process(event.kind)?;
        }

        self.now = self.duration_ms;
        self.finalize_metrics();
        self.log
            .push(self.duration_ms, "sim", LogCategory::Sim, "end".to_string());
        Ok((self.log, self.metrics))
    }

    fn process(&mut self, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::TraceSample { vehicle, loss } => self.on_trace_sample(vehicle, loss),
            EventKind::TrafficDue {
                vehicle,
                service,
                direction,
                payload_subframes,
                period_ms,
            } => self.on_traffic_due(vehicle, service, direction, payload_subframes, period_ms),
            EventKind::MessageDelivery { from, to, msg } => self.on_delivery(from, to, msg),
            EventKind::TimerFire { vehicle, action } => self.on_scripted(vehicle, action),
        }
    }
}

/// Validates nothing extra: runs a prepared scenario and returns its log and
/// metrics.
pub fn run_scenario(scenario: &Scenario) -> Result<(EventLog, Metrics), SimError> {
    Simulation::new(scenario).run()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
