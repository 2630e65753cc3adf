//! The TCU: a modem exposing a line-oriented AT-command API, and a
//! connection manager that drives the CE enable/disable procedures against a
//! service registry.
//!
//! The AT interface is a synchronous request/response boundary. Commands that
//! start network signaling (`AT+CGATT=1`, `AT+CGATT=0`) return `OK` as soon
//! as the modem has accepted them; the signaling itself travels through the
//! simulated network afterwards. `AT+CGATT=0` detaches the modem locally at
//! once, so a capability write can follow it in the same procedure run.

use crate::protocol::{AttachState, ProtocolMessage, UeCategory, UeFsm};
use crate::radio::{self, CouplingLoss, CoverageState, LinkBudgetConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

// ---------------------------------------------------------------------------
// Services
// ---------------------------------------------------------------------------

/// Binary QoS class: `HighRate` marks services with high requirements on
/// data rates and latency, which rule out CE mode A while active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceQos {
    LowRate,
    HighRate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficPattern {
    /// Uplink transmission every `period_ms`, optionally with a start-phase
    /// jitter drawn once per run from the scenario PRNG.
    Periodic {
        period_ms: u64,
        payload_subframes: u32,
        #[serde(default)]
        start_jitter_ms: u64,
    },
    /// Uplink transmission only when triggered by a scripted event.
    OnDemand { payload_subframes: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub name: String,
    pub qos: ServiceQos,
    pub traffic: TrafficPattern,
    #[serde(default = "default_active")]
    pub active: bool,
}

fn default_active() -> bool {
    true
}

impl ServiceDescriptor {
    pub fn payload_subframes(&self) -> u32 {
        match self.traffic {
            TrafficPattern::Periodic {
                payload_subframes, ..
            } => payload_subframes,
            TrafficPattern::OnDemand { payload_subframes } => payload_subframes,
        }
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VehicleError {
    #[error("service '{0}' is already registered")]
    DuplicateService(String),
    #[error("unknown service '{0}'")]
    UnknownService(String),
    #[error("procedure step {step} failed: {command} -> ERROR")]
    ProcedureFailed { step: usize, command: String },
}

// ---------------------------------------------------------------------------
// Modem
// ---------------------------------------------------------------------------

/// One AT exchange: the command line, the response lines (ending in `OK` or
/// `ERROR`), and any protocol messages the command put on the air.
#[derive(Debug, Clone, PartialEq)]
pub struct AtExchange {
    pub command: String,
    pub response: Vec<String>,
    pub outbound: Vec<ProtocolMessage>,
}

impl AtExchange {
    pub fn ok(&self) -> bool {
        self.response.last().map(String::as_str) == Some("OK")
    }

    /// `command => line / line` rendering for the event log.
    pub fn render(&self) -> String {
        format!("{} => {}", self.command, self.response.join(" / "))
    }
}

/// The vehicle modem: UE protocol engine plus the coupling-loss measurement
/// it reports over the AT interface.
#[derive(Debug, Clone)]
pub struct Modem {
    pub fsm: UeFsm,
    last_coupling_loss: CouplingLoss,
}

impl Modem {
    pub fn new(fsm: UeFsm, initial_loss: CouplingLoss) -> Self {
        Modem {
            fsm,
            last_coupling_loss: initial_loss,
        }
    }

    /// Updated by the radio environment at every trace sample.
    pub fn set_coupling_loss(&mut self, loss: CouplingLoss) {
        self.last_coupling_loss = loss;
    }

    pub fn coupling_loss(&self) -> CouplingLoss {
        self.last_coupling_loss
    }

    pub fn attach_state(&self) -> AttachState {
        self.fsm.attach.state
    }

    /// Executes one AT command line. Unknown or malformed commands, and
    /// commands not permitted in the current state, answer `ERROR`.
    pub fn execute(&mut self, line: &str) -> AtExchange {
        let cmd = line.trim();
        let (response, outbound) = match cmd {
            "AT+CGATT=1" => match self.fsm.command_attach() {
                Ok(outbound) => (vec!["OK".to_string()], outbound),
                Err(_) => (vec!["ERROR".to_string()], Vec::new()),
            },
            "AT+CGATT=0" => (vec!["OK".to_string()], self.fsm.command_detach()),
            "AT+CGATT?" => {
                let attached = u8::from(self.fsm.attach.state == AttachState::Attached);
                (
                    vec![format!("+CGATT: {attached}"), "OK".to_string()],
                    Vec::new(),
                )
            }
            "AT+VCECAP=1" | "AT+VCECAP=0" => {
                let enable = cmd.ends_with('1');
                // Capability changes require a detached modem, and a Cat-M1
                // modem cannot drop its mandatory CE mode A support.
                if self.fsm.attach.state != AttachState::Detached
                    || (!enable && self.fsm.caps.ue_category == UeCategory::CatM1)
                {
                    (vec!["ERROR".to_string()], Vec::new())
                } else {
                    self.fsm.caps.ce_mode_a_supported = enable;
                    (vec!["OK".to_string()], Vec::new())
                }
            }
            "AT+VCECAP?" => {
                let flag = u8::from(self.fsm.caps.ce_mode_a_supported);
                (
                    vec![format!("+VCECAP: {flag}"), "OK".to_string()],
                    Vec::new(),
                )
            }
            "AT+VCPL?" => (
                vec![
                    format!("+VCPL: {}", self.last_coupling_loss),
                    "OK".to_string(),
                ],
                Vec::new(),
            ),
            _ => (vec!["ERROR".to_string()], Vec::new()),
        };
        AtExchange {
            command: cmd.to_string(),
            response,
            outbound,
        }
    }
}

// ---------------------------------------------------------------------------
// Procedures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcedureKind {
    /// End-to-end procedure to enable the use of CE mode A.
    Enable,
    /// End-to-end procedure to disable the use of CE mode A.
    Disable,
    /// Restoration after returning to normal coverage: clears the CE
    /// capability so normal operation resumes. Same command sequence as
    /// `Disable`, but logged distinctly because its trigger is coverage, not
    /// a service notification.
    Restore,
}

impl std::fmt::Display for ProcedureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProcedureKind::Enable => write!(f, "enable"),
            ProcedureKind::Disable => write!(f, "disable"),
            ProcedureKind::Restore => write!(f, "restore"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcedureResult {
    Completed,
    /// The early exit that needs no modem commands at all.
    CompletedNoOp,
    /// An active high-rate service forbids CE mode A; zero commands issued.
    AbortedHighRateService,
    /// CE already declared and a session already up; zero commands issued.
    AbortedAlreadyEnabled,
}

impl std::fmt::Display for ProcedureResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProcedureResult::Completed => write!(f, "completed"),
            ProcedureResult::CompletedNoOp => write!(f, "completed-noop"),
            ProcedureResult::AbortedHighRateService => write!(f, "aborted-high-rate-service"),
            ProcedureResult::AbortedAlreadyEnabled => write!(f, "aborted-already-enabled"),
        }
    }
}

/// One issued modem command within a procedure, in issue order (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct ProcedureStep {
    pub step: usize,
    pub label: &'static str,
    pub command: String,
    pub response: String,
}

/// Complete record of one procedure invocation.
#[derive(Debug, PartialEq)]
pub struct ProcedureRun {
    pub kind: ProcedureKind,
    pub result: Result<ProcedureResult, VehicleError>,
    pub steps: Vec<ProcedureStep>,
    pub outbound: Vec<ProtocolMessage>,
}

impl ProcedureRun {
    pub fn commands(&self) -> Vec<&str> {
        self.steps.iter().map(|s| s.command.as_str()).collect()
    }

    /// Histogram key, e.g. `enable/completed` or `disable/failed-step-2`.
    pub fn outcome_label(&self) -> String {
        match &self.result {
            Ok(r) => format!("{}/{}", self.kind, r),
            Err(VehicleError::ProcedureFailed { step, .. }) => {
                format!("{}/failed-step-{step}", self.kind)
            }
            Err(other) => format!("{}/error({other})", self.kind),
        }
    }
}

// ---------------------------------------------------------------------------
// Connection manager
// ---------------------------------------------------------------------------

/// What one coverage sample did: the AT poll that read the loss, an optional
/// coverage transition, and an optional procedure it triggered.
#[derive(Debug)]
pub struct SampleOutcome {
    pub poll: AtExchange,
    pub transition: Option<(CoverageState, CoverageState)>,
    pub procedure: Option<ProcedureRun>,
}

/// The connection manager keeps track of whether the modem declares CE mode
/// A and whether any service in the vehicle needs high-rate data traffic,
/// and runs the enable/disable procedures accordingly.
#[derive(Debug, Clone)]
pub struct ConnectionManager {
    pub coverage: CoverageState,
    services: Vec<ServiceDescriptor>,
    pub modem_ce_flag_shadow: bool,
    /// Policy switch: when false the manager never declares CE (used for
    /// baseline comparisons).
    pub dynamic_ce: bool,
}

impl ConnectionManager {
    pub fn new(dynamic_ce: bool) -> Self {
        ConnectionManager {
            coverage: CoverageState::Normal,
            services: Vec::new(),
            modem_ce_flag_shadow: false,
            dynamic_ce,
        }
    }

    pub fn services(&self) -> &[ServiceDescriptor] {
        &self.services
    }

    pub fn register_service(&mut self, svc: ServiceDescriptor) -> Result<(), VehicleError> {
        if self.services.iter().any(|s| s.name == svc.name) {
            return Err(VehicleError::DuplicateService(svc.name));
        }
        self.services.push(svc);
        Ok(())
    }

    pub fn active_high_rate_service(&self) -> Option<&ServiceDescriptor> {
        self.services
            .iter()
            .find(|s| s.active && s.qos == ServiceQos::HighRate)
    }

    fn find_mut(&mut self, name: &str) -> Result<&mut ServiceDescriptor, VehicleError> {
        self.services
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| VehicleError::UnknownService(name.to_string()))
    }

    /// Activates a service. A high-rate service becoming active notifies the
    /// manager that high-rate traffic is needed, which runs the disable
    /// procedure.
    pub fn activate_service(
        &mut self,
        name: &str,
        modem: &mut Modem,
    ) -> Result<Option<ProcedureRun>, VehicleError> {
        let svc = self.find_mut(name)?;
        if svc.active {
            return Ok(None);
        }
        svc.active = true;
        if svc.qos == ServiceQos::HighRate {
            return Ok(Some(self.disable_ce(modem)));
        }
        Ok(None)
    }

    /// Deactivates a service. When the last active high-rate service goes
    /// away while the vehicle sits outside normal coverage, the enable
    /// procedure is re-evaluated.
    pub fn deactivate_service(
        &mut self,
        name: &str,
        modem: &mut Modem,
    ) -> Result<Option<ProcedureRun>, VehicleError> {
        let svc = self.find_mut(name)?;
        if !svc.active {
            return Ok(None);
        }
        let was_high_rate = svc.qos == ServiceQos::HighRate;
        svc.active = false;
        if was_high_rate
            && self.active_high_rate_service().is_none()
            && self.coverage == CoverageState::Extended
            && self.dynamic_ce
        {
            return Ok(Some(self.enable_ce(modem)));
        }
        Ok(None)
    }

    /// Feeds one coupling-loss sample: reads the measurement back through
    /// `AT+VCPL?`, updates the coverage state with hysteresis, and triggers
    /// the enable procedure on entering extended coverage or the restoration
    /// path on returning to normal coverage with CE still declared.
    pub fn on_coverage_sample(
        &mut self,
        modem: &mut Modem,
        cfg: &LinkBudgetConfig,
    ) -> SampleOutcome {
        let poll = modem.execute("AT+VCPL?");
        let reported = poll
            .response
            .first()
            .and_then(|line| line.strip_prefix("+VCPL: "))
            .and_then(|v| v.parse::<f64>().ok())
            .and_then(|v| CouplingLoss::new(v).ok())
            .unwrap_or_else(|| modem.coupling_loss());

        let prev = self.coverage;
        let next = radio::coverage_state(reported, prev, cfg);
        self.coverage = next;
        let transition = (prev != next).then_some((prev, next));

        let procedure = match (prev, next) {
            _ if !self.dynamic_ce => None,
            (CoverageState::Normal, CoverageState::Extended) => Some(self.enable_ce(modem)),
            (CoverageState::Extended, CoverageState::Normal) if self.modem_ce_flag_shadow => {
                Some(self.restore_normal(modem))
            }
            _ => None,
        };

        SampleOutcome {
            poll,
            transition,
            procedure,
        }
    }

    fn issue(
        &mut self,
        modem: &mut Modem,
        command: &str,
        label: &'static str,
        steps: &mut Vec<ProcedureStep>,
        outbound: &mut Vec<ProtocolMessage>,
    ) -> Result<(), VehicleError> {
        let exchange = modem.execute(command);
        let ok = exchange.ok();
        steps.push(ProcedureStep {
            step: steps.len() + 1,
            label,
            command: exchange.command.clone(),
            response: exchange.response.join(" / "),
        });
        outbound.extend(exchange.outbound);
        // The shadow flag tracks the modem capability after every issued
        // command, capability write or not.
        self.modem_ce_flag_shadow = modem.fsm.caps.ce_mode_a_supported;
        if ok {
            Ok(())
        } else {
            Err(VehicleError::ProcedureFailed {
                step: steps.len(),
                command: command.to_string(),
            })
        }
    }

    /// The end-to-end enable procedure. Aborts without touching the modem
    /// when an active high-rate service forbids CE, or when CE is already
    /// declared on a live session. Otherwise declares the capability and
    /// starts a new attach; a session that is already up is implicitly
    /// detached first.
    pub fn enable_ce(&mut self, modem: &mut Modem) -> ProcedureRun {
        let mut steps = Vec::new();
        let mut outbound = Vec::new();

        if self.active_high_rate_service().is_some() {
            return ProcedureRun {
                kind: ProcedureKind::Enable,
                result: Ok(ProcedureResult::AbortedHighRateService),
                steps,
                outbound,
            };
        }
        if modem.fsm.caps.ce_mode_a_supported && modem.attach_state() != AttachState::Detached {
            return ProcedureRun {
                kind: ProcedureKind::Enable,
                result: Ok(ProcedureResult::AbortedAlreadyEnabled),
                steps,
                outbound,
            };
        }

        let result = (|| {
            if modem.attach_state() != AttachState::Detached {
                self.issue(modem, "AT+CGATT=0", "implicit-detach", &mut steps, &mut outbound)?;
            }
            self.issue(
                modem,
                "AT+VCECAP=1",
                "declare-ce-capability",
                &mut steps,
                &mut outbound,
            )?;
            self.issue(modem, "AT+CGATT=1", "attach", &mut steps, &mut outbound)?;
            Ok(ProcedureResult::Completed)
        })();

        ProcedureRun {
            kind: ProcedureKind::Enable,
            result,
            steps,
            outbound,
        }
    }

    /// The end-to-end disable procedure: detach, clear the capability,
    /// re-attach. When the modem never declared CE there is nothing to do
    /// and high-rate traffic is already permitted.
    pub fn disable_ce(&mut self, modem: &mut Modem) -> ProcedureRun {
        self.run_teardown(modem, ProcedureKind::Disable)
    }

    /// Restoration on return to normal coverage; see [`ProcedureKind::Restore`].
    pub fn restore_normal(&mut self, modem: &mut Modem) -> ProcedureRun {
        self.run_teardown(modem, ProcedureKind::Restore)
    }

    fn run_teardown(&mut self, modem: &mut Modem, kind: ProcedureKind) -> ProcedureRun {
        let mut steps = Vec::new();
        let mut outbound = Vec::new();

        if !modem.fsm.caps.ce_mode_a_supported {
            self.modem_ce_flag_shadow = false;
            return ProcedureRun {
                kind,
                result: Ok(ProcedureResult::CompletedNoOp),
                steps,
                outbound,
            };
        }

        let result = (|| {
            self.issue(modem, "AT+CGATT=0", "detach", &mut steps, &mut outbound)?;
            self.issue(
                modem,
                "AT+VCECAP=0",
                "clear-ce-capability",
                &mut steps,
                &mut outbound,
            )?;
            self.issue(modem, "AT+CGATT=1", "attach", &mut steps, &mut outbound)?;
            Ok(ProcedureResult::Completed)
        })();

        ProcedureRun {
            kind,
            result,
            steps,
            outbound,
        }
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
