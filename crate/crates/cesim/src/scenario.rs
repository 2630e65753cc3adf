//! Scenario files: schema, validation and resolution.
//!
//! A scenario is a single JSON document with five sections: `sim` (horizon,
//! seed, link latencies), `radio` (the link budget), `plmns` (operator
//! networks with their cells, MME and optional HSS), `subscriptions`
//! (per-IMSI records including the Enhanced Coverage Restricted flag), and
//! `vehicles` (category, home cell, coupling-loss trace, services, scripted
//! events).
//!
//! [`ScenarioFile`] is the parsed document; [`ScenarioFile::build`] checks
//! every cross-reference and produces a resolved [`Scenario`] with node
//! indices in place, or a list of [`Diagnostic`]s naming section and field.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::network::{PlmnConfig, PlmnEntry, PlmnRegistry, SubscriptionRecord};
use crate::protocol::{Imsi, UeCategory};
use crate::radio::LinkBudgetConfig;
use crate::vehicle::{ServiceDescriptor, TrafficPattern};

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

/// One-way link latencies in milliseconds. The values are config defaults
/// with no claimed realism.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latencies {
    #[serde(default = "default_uu_ms")]
    pub uu_ms: u64,
    #[serde(default = "default_s1_ms")]
    pub s1_ms: u64,
    #[serde(default = "default_diameter_ms")]
    pub diameter_ms: u64,
}

fn default_uu_ms() -> u64 {
    10
}
fn default_s1_ms() -> u64 {
    5
}
fn default_diameter_ms() -> u64 {
    20
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies {
            uu_ms: default_uu_ms(),
            s1_ms: default_s1_ms(),
            diameter_ms: default_diameter_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSection {
    pub duration_ms: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub latencies: Latencies,
}

/// A scripted action against one vehicle at a fixed time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedAction {
    ActivateService { service: String },
    DeactivateService { service: String },
    /// One on-demand uplink transmission for the named service.
    TriggerService { service: String },
    /// One downlink transmission toward the vehicle for the named service.
    Downlink {
        service: String,
        payload_subframes: u32,
    },
    Attach,
    Detach,
}

impl fmt::Display for ScriptedAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScriptedAction::ActivateService { service } => write!(f, "activate_service {service}"),
            ScriptedAction::DeactivateService { service } => {
                write!(f, "deactivate_service {service}")
            }
            ScriptedAction::TriggerService { service } => write!(f, "trigger_service {service}"),
            ScriptedAction::Downlink {
                service,
                payload_subframes,
            } => write!(f, "downlink {service} payload={payload_subframes}"),
            ScriptedAction::Attach => write!(f, "attach"),
            ScriptedAction::Detach => write!(f, "detach"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedEvent {
    pub time_ms: u64,
    pub action: ScriptedAction,
}

/// One step of a piecewise-constant coupling-loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub start_ms: u64,
    pub loss_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleEntry {
    pub imsi: Imsi,
    pub ue_category: UeCategory,
    #[serde(default)]
    pub restriction_supported: bool,
    pub home_cell: String,
    pub coverage_trace: Vec<TracePoint>,
    #[serde(default)]
    pub services: Vec<ServiceDescriptor>,
    #[serde(default)]
    pub scripted_events: Vec<ScriptedEvent>,
    /// When false the connection manager never declares CE mode A; used for
    /// baseline comparisons.
    #[serde(default = "default_true")]
    pub dynamic_ce: bool,
}

fn default_true() -> bool {
    true
}

/// The parsed scenario document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub sim: SimSection,
    #[serde(default)]
    pub radio: LinkBudgetConfig,
    #[serde(default)]
    pub plmns: Vec<PlmnConfig>,
    #[serde(default)]
    pub subscriptions: Vec<SubscriptionRecord>,
    #[serde(default)]
    pub vehicles: Vec<VehicleEntry>,
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// One validation finding: the JSON-ish path of the offending field and a
/// message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

// ---------------------------------------------------------------------------
// Resolved scenario
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CellSpec {
    pub name: String,
    pub plmn: usize,
    pub mme: usize,
}

#[derive(Debug, Clone)]
pub struct MmeSpec {
    pub name: String,
    pub plmn: usize,
}

#[derive(Debug, Clone)]
pub struct HssSpec {
    pub name: String,
    pub plmn: usize,
}

#[derive(Debug, Clone)]
pub struct VehicleSpec {
    pub imsi: Imsi,
    pub ue_category: UeCategory,
    pub restriction_supported: bool,
    pub home_cell: usize,
    /// `(start_ms, loss_db)`, first entry at 0, strictly increasing.
    pub trace: Vec<(u64, f64)>,
    pub services: Vec<ServiceDescriptor>,
    pub scripted: Vec<(u64, ScriptedAction)>,
    pub dynamic_ce: bool,
}

/// A fully validated scenario with all references resolved to indices.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub sim: SimSection,
    pub radio: LinkBudgetConfig,
    pub plmns: Vec<PlmnConfig>,
    pub cells: Vec<CellSpec>,
    pub mmes: Vec<MmeSpec>,
    pub hsss: Vec<HssSpec>,
    pub subscriptions: Vec<SubscriptionRecord>,
    pub vehicles: Vec<VehicleSpec>,
    pub registry: PlmnRegistry,
}

// ---------------------------------------------------------------------------
// Parsing and validation
// ---------------------------------------------------------------------------

impl ScenarioFile {
    /// Parses a scenario document. A parse failure is a single fatal
    /// diagnostic.
    pub fn from_json(text: &str) -> Result<Self, Diagnostic> {
        serde_json::from_str(text)
            .map_err(|e| Diagnostic::new("(document)", format!("not a valid scenario: {e}")))
    }

    /// Validates and resolves the document. Returns the runnable scenario or
    /// every diagnostic found.
    pub fn build(&self) -> Result<Scenario, Vec<Diagnostic>> {
        let mut diags = Vec::new();

        if self.sim.duration_ms == 0 {
            diags.push(Diagnostic::new("sim.duration_ms", "must be greater than 0"));
        }
        if let Err(e) = self.radio.validate() {
            diags.push(Diagnostic::new("radio", e.to_string()));
        }

        // PLMNs and their nodes.
        let mut cells: Vec<CellSpec> = Vec::new();
        let mut mmes: Vec<MmeSpec> = Vec::new();
        let mut hsss: Vec<HssSpec> = Vec::new();
        let mut entries: Vec<PlmnEntry> = Vec::new();
        let mut node_names: Vec<String> = Vec::new();

        for (pi, plmn) in self.plmns.iter().enumerate() {
            let ppath = format!("plmns[{pi}]");
            if self.plmns[..pi]
                .iter()
                .any(|other| other.plmn_id == plmn.plmn_id)
            {
                diags.push(Diagnostic::new(
                    format!("{ppath}.plmn_id"),
                    format!("duplicate PLMN id {}", plmn.plmn_id),
                ));
            }
            if plmn.cells.is_empty() {
                diags.push(Diagnostic::new(
                    format!("{ppath}.cells"),
                    "a PLMN needs at least one cell",
                ));
            }

            let mme_idx = mmes.len();
            if node_names.contains(&plmn.mme) {
                diags.push(Diagnostic::new(
                    format!("{ppath}.mme"),
                    format!("node name '{}' is already in use", plmn.mme),
                ));
            }
            node_names.push(plmn.mme.clone());
            mmes.push(MmeSpec {
                name: plmn.mme.clone(),
                plmn: pi,
            });

            let hss_idx = plmn.hss.as_ref().map(|name| {
                if node_names.contains(name) {
                    diags.push(Diagnostic::new(
                        format!("{ppath}.hss"),
                        format!("node name '{name}' is already in use"),
                    ));
                }
                node_names.push(name.clone());
                hsss.push(HssSpec {
                    name: name.clone(),
                    plmn: pi,
                });
                hsss.len() - 1
            });

            for (ci, cell) in plmn.cells.iter().enumerate() {
                if node_names.contains(cell) {
                    diags.push(Diagnostic::new(
                        format!("{ppath}.cells[{ci}]"),
                        format!("cell '{cell}' already belongs to another PLMN or node"),
                    ));
                    continue;
                }
                node_names.push(cell.clone());
                cells.push(CellSpec {
                    name: cell.clone(),
                    plmn: pi,
                    mme: mme_idx,
                });
            }

            entries.push(PlmnEntry {
                plmn_id: plmn.plmn_id.clone(),
                supports_ce_mode_a_high_category: plmn.supports_ce_mode_a_high_category,
                mme: mme_idx,
                hss: hss_idx,
            });
        }

        // Subscriptions.
        for (si, sub) in self.subscriptions.iter().enumerate() {
            if self.subscriptions[..si].iter().any(|s| s.imsi == sub.imsi) {
                diags.push(Diagnostic::new(
                    format!("subscriptions[{si}].imsi"),
                    format!("duplicate subscription for {}", sub.imsi),
                ));
            }
        }

        // Vehicles.
        let mut vehicles = Vec::new();
        for (vi, v) in self.vehicles.iter().enumerate() {
            let vpath = format!("vehicles[{vi}]");
            if self.vehicles[..vi].iter().any(|o| o.imsi == v.imsi) {
                diags.push(Diagnostic::new(
                    format!("{vpath}.imsi"),
                    format!("duplicate vehicle IMSI {}", v.imsi),
                ));
            }

            let home_cell = cells.iter().position(|c| c.name == v.home_cell);
            if home_cell.is_none() {
                diags.push(Diagnostic::new(
                    format!("{vpath}.home_cell"),
                    format!("unknown cell '{}'", v.home_cell),
                ));
            }

            if v.coverage_trace.is_empty() {
                diags.push(Diagnostic::new(
                    format!("{vpath}.coverage_trace"),
                    "trace must have at least one entry",
                ));
            } else {
                if v.coverage_trace[0].start_ms != 0 {
                    diags.push(Diagnostic::new(
                        format!("{vpath}.coverage_trace[0].start_ms"),
                        "first trace entry must start at time 0",
                    ));
                }
                for (ti, w) in v.coverage_trace.windows(2).enumerate() {
                    if w[1].start_ms <= w[0].start_ms {
                        diags.push(Diagnostic::new(
                            format!("{vpath}.coverage_trace[{}].start_ms", ti + 1),
                            "trace start times must be strictly increasing",
                        ));
                    }
                }
                for (ti, p) in v.coverage_trace.iter().enumerate() {
                    if !p.loss_db.is_finite() || p.loss_db < 0.0 {
                        diags.push(Diagnostic::new(
                            format!("{vpath}.coverage_trace[{ti}].loss_db"),
                            "coupling loss must be finite and non-negative",
                        ));
                    }
                }
            }

            for (si, svc) in v.services.iter().enumerate() {
                let spath = format!("{vpath}.services[{si}]");
                if v.services[..si].iter().any(|o| o.name == svc.name) {
                    diags.push(Diagnostic::new(
                        format!("{spath}.name"),
                        format!("duplicate service name '{}'", svc.name),
                    ));
                }
                match svc.traffic {
                    TrafficPattern::Periodic {
                        period_ms,
                        payload_subframes,
                        ..
                    } => {
                        if period_ms == 0 {
                            diags.push(Diagnostic::new(
                                format!("{spath}.traffic.period_ms"),
                                "period must be greater than 0",
                            ));
                        }
                        if payload_subframes == 0 {
                            diags.push(Diagnostic::new(
                                format!("{spath}.traffic.payload_subframes"),
                                "payload must be at least one subframe",
                            ));
                        }
                    }
                    TrafficPattern::OnDemand { payload_subframes } => {
                        if payload_subframes == 0 {
                            diags.push(Diagnostic::new(
                                format!("{spath}.traffic.payload_subframes"),
                                "payload must be at least one subframe",
                            ));
                        }
                    }
                }
            }

            for (ei, ev) in v.scripted_events.iter().enumerate() {
                let epath = format!("{vpath}.scripted_events[{ei}]");
                let service = match &ev.action {
                    ScriptedAction::ActivateService { service }
                    | ScriptedAction::DeactivateService { service }
                    | ScriptedAction::TriggerService { service }
                    | ScriptedAction::Downlink { service, .. } => Some(service),
                    ScriptedAction::Attach | ScriptedAction::Detach => None,
                };
                if let Some(service) = service {
                    if !v.services.iter().any(|s| &s.name == service) {
                        diags.push(Diagnostic::new(
                            format!("{epath}.action"),
                            format!("vehicle {} has no service '{service}'", v.imsi),
                        ));
                    }
                }
                if let ScriptedAction::Downlink {
                    payload_subframes, ..
                } = ev.action
                {
                    if payload_subframes == 0 {
                        diags.push(Diagnostic::new(
                            format!("{epath}.action.payload_subframes"),
                            "payload must be at least one subframe",
                        ));
                    }
                }
            }

            if let Some(home_cell) = home_cell {
                vehicles.push(VehicleSpec {
                    imsi: v.imsi.clone(),
                    ue_category: v.ue_category,
                    restriction_supported: v.restriction_supported,
                    home_cell,
                    trace: v
                        .coverage_trace
                        .iter()
                        .map(|p| (p.start_ms, p.loss_db))
                        .collect(),
                    services: v.services.clone(),
                    scripted: v
                        .scripted_events
                        .iter()
                        .map(|e| (e.time_ms, e.action.clone()))
                        .collect(),
                    dynamic_ce: v.dynamic_ce,
                });
            }
        }

        if !diags.is_empty() {
            return Err(diags);
        }

        Ok(Scenario {
            sim: self.sim.clone(),
            radio: self.radio.clone(),
            plmns: self.plmns.clone(),
            cells,
            mmes,
            hsss,
            subscriptions: self.subscriptions.clone(),
            vehicles,
            registry: PlmnRegistry { entries },
        })
    }
}

/// Parses and validates in one step: the diagnostics list is empty iff the
/// scenario is runnable.
pub fn validate_json(text: &str) -> Vec<Diagnostic> {
    match ScenarioFile::from_json(text) {
        Err(fatal) => vec![fatal],
        Ok(file) => match file.build() {
            Ok(_) => Vec::new(),
            Err(diags) => diags,
        },
    }
}

// ---------------------------------------------------------------------------
// Bundled demo scenarios
// ---------------------------------------------------------------------------

/// Bundled demo scenarios, each a `(variant label, JSON document)` list.
pub mod demos {
    pub const GARAGE_PARKED: &str = include_str!("../scenarios/garage_parked.json");
    pub const GARAGE_PARKED_NO_CE: &str = include_str!("../scenarios/garage_parked_no_ce.json");
    pub const EMERGENCY: &str = include_str!("../scenarios/emergency.json");
    pub const ROAMING: &str = include_str!("../scenarios/roaming.json");
    pub const RESTRICTED: &str = include_str!("../scenarios/restricted.json");

    pub const NAMES: [&str; 4] = ["garage-parked", "emergency", "roaming", "restricted"];

    /// Returns the variants of a bundled demo. `garage-parked` has two: the
    /// dynamic-CE run and the no-CE baseline.
    pub fn by_name(name: &str) -> Option<Vec<(&'static str, &'static str)>> {
        match name {
            "garage-parked" => Some(vec![
                ("ce-dynamic", GARAGE_PARKED),
                ("ce-disabled", GARAGE_PARKED_NO_CE),
            ]),
            "emergency" => Some(vec![("default", EMERGENCY)]),
            "roaming" => Some(vec![("default", ROAMING)]),
            "restricted" => Some(vec![("default", RESTRICTED)]),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{
            "sim": {"duration_ms": 60000, "seed": 7},
            "plmns": [{"plmn_id": "26201", "cells": ["cell-a"], "mme": "mme-a", "hss": "hss-a"}],
            "subscriptions": [{"imsi": "262011234567890"}],
            "vehicles": [{
                "imsi": "262011234567890",
                "ue_category": "high_category",
                "restriction_supported": true,
                "home_cell": "cell-a",
                "coverage_trace": [{"start_ms": 0, "loss_db": 130.7}],
                "services": [{
                    "name": "battery-monitor",
                    "qos": "low_rate",
                    "traffic": {"periodic": {"period_ms": 10000, "payload_subframes": 1}}
                }]
            }]
        }"#
        .to_string()
    }

    #[test]
    fn well_formed_scenario_has_no_diagnostics() {
        assert_eq!(validate_json(&minimal()), Vec::new());
    }

    #[test]
    fn unparseable_document_is_a_single_fatal_diagnostic() {
        let diags = validate_json("{not json");
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].path, "(document)");
    }

    #[test]
    fn unknown_cell_reference_names_the_vehicle_field() {
        let text = minimal().replace("\"home_cell\": \"cell-a\"", "\"home_cell\": \"cell-x\"");
        let diags = validate_json(&text);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].path, "vehicles[0].home_cell");
        assert!(diags[0].message.contains("cell-x"));
    }

    #[test]
    fn repetition_set_missing_one_is_rejected() {
        let text = minimal().replace(
            "\"sim\":",
            "\"radio\": {\"repetition_set\": [2, 4, 8, 16, 32]}, \"sim\":",
        );
        let diags = validate_json(&text);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].path, "radio");
        assert!(diags[0].message.contains("contain 1"));
    }

    #[test]
    fn trace_must_start_at_zero_and_increase() {
        let text = minimal().replace(
            "[{\"start_ms\": 0, \"loss_db\": 130.7}]",
            "[{\"start_ms\": 5, \"loss_db\": 130.7}, {\"start_ms\": 5, \"loss_db\": 150.0}]",
        );
        let diags = validate_json(&text);
        assert!(diags
            .iter()
            .any(|d| d.path == "vehicles[0].coverage_trace[0].start_ms"));
        assert!(diags
            .iter()
            .any(|d| d.path == "vehicles[0].coverage_trace[1].start_ms"));
    }

    #[test]
    fn scripted_events_must_reference_declared_services() {
        let mut file = ScenarioFile::from_json(&minimal()).unwrap();
        file.vehicles[0].scripted_events.push(ScriptedEvent {
            time_ms: 1,
            action: ScriptedAction::TriggerService {
                service: "ghost".into(),
            },
        });
        let diags = file.build().unwrap_err();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].path, "vehicles[0].scripted_events[0].action");
        assert!(diags[0].message.contains("ghost"));
    }

    #[test]
    fn duplicate_vehicle_imsi_is_rejected() {
        let file = ScenarioFile::from_json(&minimal()).unwrap();
        let mut doubled = file.clone();
        doubled.vehicles.push(file.vehicles[0].clone());
        let diags = doubled.build().unwrap_err();
        assert!(diags.iter().any(|d| d.path == "vehicles[1].imsi"));
    }

    #[test]
    fn resolved_scenario_wires_cells_to_their_mme_and_hss() {
        let file = ScenarioFile::from_json(&minimal()).unwrap();
        let scenario = file.build().unwrap();
        assert_eq!(scenario.cells.len(), 1);
        assert_eq!(scenario.cells[0].mme, 0);
        assert_eq!(scenario.registry.entries[0].hss, Some(0));
        assert_eq!(
            scenario
                .registry
                .route_s6a(&Imsi::parse("262011234567890").unwrap())
                .unwrap(),
            0
        );
        assert_eq!(scenario.vehicles[0].home_cell, 0);
    }

    #[test]
    fn scenario_file_round_trips_through_json() {
        let file = ScenarioFile::from_json(&minimal()).unwrap();
        let text = serde_json::to_string_pretty(&file).unwrap();
        let again = ScenarioFile::from_json(&text).unwrap();
        assert_eq!(file, again);
    }
}
