//! Report emission: human-readable text, JSON, and CSV.
//!
//! All outputs are UTF-8; numbers use the `.` decimal separator and dB
//! values carry one decimal. The JSON report round-trips: parsing it back
//! yields the in-memory metrics unchanged.

use serde::{Deserialize, Serialize};

use crate::sim::Metrics;

/// One run's report: identification plus the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Scenario label (file stem or demo name/variant).
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub metrics: Metrics,
}

pub fn to_json(reports: &[RunReport]) -> String {
    if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0]).expect("report serializes")
    } else {
        serde_json::to_string_pretty(reports).expect("reports serialize")
    }
}

pub fn from_json_single(text: &str) -> Result<RunReport, serde_json::Error> {
    serde_json::from_str(text)
}

pub fn to_human(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "scenario {}  seed={} duration={} ms\n",
        report.scenario, report.seed, report.duration_ms
    ));

    if !report.metrics.services.is_empty() {
        out.push_str("\nservices (delivered/attempted, failed-detached, ratio):\n");
        for (key, m) in &report.metrics.services {
            out.push_str(&format!(
                "  {key}: {}/{} ({} detached) ratio={:.3}\n",
                m.delivered, m.attempted, m.failed_detached, m.delivery_ratio
            ));
        }
    }

    if !report.metrics.vehicles.is_empty() {
        out.push_str("\nvehicles (attaches, rejects, detaches, time-in-CE):\n");
        for (imsi, v) in &report.metrics.vehicles {
            out.push_str(&format!(
                "  {imsi}: attach={} reject={} detach={} ce={} ms\n",
                v.attaches, v.attach_rejects, v.detaches, v.time_in_ce_ms
            ));
        }
    }

    if !report.metrics.cells.is_empty() {
        out.push_str("\ncells (subframes used / of which CE, transmissions by reps):\n");
        for (cell, ledger) in &report.metrics.cells {
            let by_reps: Vec<String> = ledger
                .transmissions
                .iter()
                .map(|(reps, n)| format!("{reps}x{n}"))
                .collect();
            out.push_str(&format!(
                "  {cell}: {} / {} [{}]\n",
                ledger.subframes_used,
                ledger.subframes_used_ce,
                by_reps.join(" ")
            ));
        }
    }

    if !report.metrics.procedures.is_empty() {
        out.push_str("\nprocedures:\n");
        for (key, n) in &report.metrics.procedures {
            out.push_str(&format!("  {key}: {n}\n"));
        }
    }
    out
}

/// CSV report: one `service` row per service, one `cell` row per cell, one
/// `vehicle` row per vehicle, one `procedure` row per histogram entry.
pub fn to_csv(report: &RunReport) -> String {
    let mut out = String::from("kind,scenario,key,attempted,delivered,failed_detached,delivery_ratio,subframes_used,subframes_used_ce,attaches,attach_rejects,detaches,time_in_ce_ms,count\n");
    let s = &report.scenario;
    for (key, m) in &report.metrics.services {
        out.push_str(&format!(
            "service,{s},{key},{},{},{},{},,,,,,,\n",
            m.attempted, m.delivered, m.failed_detached, m.delivery_ratio
        ));
    }
    for (key, l) in &report.metrics.cells {
        out.push_str(&format!(
            "cell,{s},{key},,,,,{},{},,,,,\n",
            l.subframes_used, l.subframes_used_ce
        ));
    }
    for (key, v) in &report.metrics.vehicles {
        out.push_str(&format!(
            "vehicle,{s},{key},,,,,,,{},{},{},{},\n",
            v.attaches, v.attach_rejects, v.detaches, v.time_in_ce_ms
        ));
    }
    for (key, n) in &report.metrics.procedures {
        out.push_str(&format!("procedure,{s},{key},,,,,,,,,,,{n}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioFile;
    use crate::sim::run_scenario;

    fn sample_report() -> RunReport {
        let scenario = ScenarioFile::from_json(crate::scenario::demos::GARAGE_PARKED)
            .unwrap()
            .build()
            .unwrap();
        let (_, metrics) = run_scenario(&scenario).unwrap();
        RunReport {
            scenario: "garage-parked/ce-dynamic".into(),
            seed: scenario.sim.seed,
            duration_ms: scenario.sim.duration_ms,
            metrics,
        }
    }

    #[test]
    fn json_report_round_trips_to_equal_metrics() {
        let report = sample_report();
        let text = to_json(std::slice::from_ref(&report));
        let parsed = from_json_single(&text).unwrap();
        assert_eq!(parsed, report);
        assert_eq!(parsed.metrics, report.metrics);
    }

    #[test]
    fn json_report_contains_delivery_ratio_and_ledger_fields() {
        let report = sample_report();
        let text = to_json(std::slice::from_ref(&report));
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(value["metrics"]["services"]["262011000000001/battery-monitor"]
            ["delivery_ratio"]
            .is_number());
        assert!(value["metrics"]["cells"]["garage-cell"]["subframes_used"].is_number());
    }

    #[test]
    fn human_report_lists_every_section() {
        let report = sample_report();
        let text = to_human(&report);
        assert!(text.contains("services"));
        assert!(text.contains("cells"));
        assert!(text.contains("procedures"));
        assert!(text.contains("battery-monitor"));
    }

    #[test]
    fn csv_report_has_one_row_per_entry() {
        let report = sample_report();
        let text = to_csv(&report);
        let service_rows = text.lines().filter(|l| l.starts_with("service,")).count();
        assert_eq!(service_rows, report.metrics.services.len());
        let cell_rows = text.lines().filter(|l| l.starts_with("cell,")).count();
        assert_eq!(cell_rows, report.metrics.cells.len());
    }
}
