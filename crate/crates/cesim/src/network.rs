//! The mobile-network side: cells (eNBs) with a repetition-aware scheduler
//! and per-cell resource ledger, MMEs, HSSs with subscription stores, and
//! PLMN routing for roaming over S6a.
//!
//! Node state machines are event-driven and mutated only by the simulation
//! loop; each handler returns the messages it wants sent, tagged with an
//! abstract destination the simulator resolves against the topology.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    AttachRejectCause, DiameterMessage, Imsi, NasMessage, PlmnId, ProtocolMessage, RrcMessage,
    S1apMessage, SessionId, UeCapabilities, UeCategory, UlaResult,
};
use crate::radio::{
    self, CouplingLoss, LinkBudgetConfig, RadioError, RepetitionFactor, TransmissionOutcome,
};

// ---------------------------------------------------------------------------
// Configuration records
// ---------------------------------------------------------------------------

/// Per-IMSI subscription data held by the home HSS. The Enhanced Coverage
/// Restricted flag disallows CE for the subscriber when true. (Some
/// documents phrase the same datum as "Enhanced Coverage [Not] Allowed";
/// restricted here means not allowed.)
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionRecord {
    pub imsi: Imsi,
    #[serde(default)]
    pub enhanced_coverage_restricted: bool,
}

/// One operator network: its cells, its MME, and (for home networks) its
/// HSS. CE support for high-category UEs is a per-PLMN property.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlmnConfig {
    pub plmn_id: PlmnId,
    #[serde(default = "default_true")]
    pub supports_ce_mode_a_high_category: bool,
    pub cells: Vec<String>,
    pub mme: String,
    #[serde(default)]
    pub hss: Option<String>,
}

fn default_true() -> bool {
    true
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetworkError {
    #[error("cell {cell} has no UE context for {imsi}")]
    UnknownUeContext { cell: String, imsi: Imsi },
    #[error("no PLMN with an HSS matches IMSI {0}")]
    RoutingFailure(Imsi),
}

// ---------------------------------------------------------------------------
// Resource ledger
// ---------------------------------------------------------------------------

/// Running per-cell totals of consumed subframes. Failed transmissions are
/// charged too: the spectrum is occupied whether or not decoding succeeds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellResourceLedger {
    /// All subframes consumed.
    pub subframes_used: u64,
    /// Subframes consumed by transmissions with more than one repetition.
    pub subframes_used_ce: u64,
    /// Transmission counts by repetition factor.
    pub transmissions: BTreeMap<u32, u64>,
}

impl CellResourceLedger {
    pub fn record(&mut self, outcome: &TransmissionOutcome) {
        self.subframes_used += outcome.cost.subframes;
        if outcome.reps_used.get() > 1 {
            self.subframes_used_ce += outcome.cost.subframes;
        }
        *self.transmissions.entry(outcome.reps_used.get()).or_insert(0) += 1;
    }
}

// ---------------------------------------------------------------------------
// Repetition selection
// ---------------------------------------------------------------------------

/// The per-UE facts that drive repetition selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UeRadioProfile {
    pub ce_capable: bool,
    pub restricted: bool,
    pub category: UeCategory,
    pub plmn_supports_ce_high_category: bool,
}

impl UeRadioProfile {
    /// CE repetitions are allowed only for a CE-capable, unrestricted UE in
    /// a network that supports CE for its category (Cat-M1 support is
    /// baseline; the per-PLMN flag gates high-category UEs only).
    pub fn ce_allowed(&self) -> bool {
        self.ce_capable
            && !self.restricted
            && (self.plmn_supports_ce_high_category || self.category == UeCategory::CatM1)
    }
}

/// Minimal-sufficient repetition factor for the current loss sample:
/// idealized link adaptation. UEs that may not use CE get one repetition;
/// losses beyond the CE ceiling get the largest factor in the set (the
/// transmission will fail, but the air is occupied all the same).
pub fn select_repetitions(
    profile: &UeRadioProfile,
    loss: CouplingLoss,
    cfg: &LinkBudgetConfig,
) -> RepetitionFactor {
    if !profile.ce_allowed() {
        return cfg.repetition_factor(1).expect("validated set contains 1");
    }
    match radio::required_repetitions(loss.db() - cfg.normal_mcl_db, cfg) {
        Ok(reps) => reps,
        Err(RadioError::BeyondCeModeA { .. }) => cfg.max_repetitions(),
        Err(_) => cfg.repetition_factor(1).expect("validated set contains 1"),
    }
}

// ---------------------------------------------------------------------------
// eNB / cell
// ---------------------------------------------------------------------------

/// Per-UE state the eNB keeps: capabilities from the RRC exchange and the
/// restriction flag delivered over S1-AP.
#[derive(Debug, Clone)]
pub struct EnbUeContext {
    pub session: SessionId,
    pub caps: Option<UeCapabilities>,
    pub restricted: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnbEmit {
    ToUe(Imsi, ProtocolMessage),
    ToMme(ProtocolMessage),
}

#[derive(Debug, Default)]
pub struct EnbOutput {
    pub emitted: Vec<EnbEmit>,
    pub violation: Option<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CellNode {
    pub name: String,
    pub plmn: PlmnId,
    pub supports_ce_high_category: bool,
    pub ledger: CellResourceLedger,
    contexts: BTreeMap<Imsi, EnbUeContext>,
}

impl CellNode {
    pub fn new(name: String, plmn: PlmnId, supports_ce_high_category: bool) -> Self {
        CellNode {
            name,
            plmn,
            supports_ce_high_category,
            ledger: CellResourceLedger::default(),
            contexts: BTreeMap::new(),
        }
    }

    pub fn context(&self, imsi: &Imsi) -> Option<&EnbUeContext> {
        self.contexts.get(imsi)
    }

    /// Handles a message arriving over Uu from `ue_imsi`.
    pub fn handle_from_ue(&mut self, ue_imsi: &Imsi, msg: &ProtocolMessage) -> EnbOutput {
        let mut out = EnbOutput::default();
        match msg {
            ProtocolMessage::Rrc(RrcMessage::ConnectionRequest { imsi, session }) => {
                // First contact (or re-attach): a fresh context, and the
                // capabilities are always enquired anew.
                self.contexts.insert(
                    imsi.clone(),
                    EnbUeContext {
                        session: *session,
                        caps: None,
                        restricted: None,
                    },
                );
                out.emitted.push(EnbEmit::ToUe(
                    imsi.clone(),
                    ProtocolMessage::Rrc(RrcMessage::UeCapabilityEnquiry { session: *session }),
                ));
            }
            ProtocolMessage::Rrc(RrcMessage::UeCapabilityInformation { caps, session }) => {
                match self.contexts.get_mut(ue_imsi) {
                    Some(ctx) if ctx.session == *session => {
                        ctx.caps = Some(*caps);
                        out.emitted.push(EnbEmit::ToMme(ProtocolMessage::S1ap(
                            S1apMessage::InitialUeMessage {
                                imsi: ue_imsi.clone(),
                                caps: *caps,
                                session: *session,
                            },
                        )));
                    }
                    Some(ctx) => out.notes.push(format!(
                        "stale UECapabilityInformation session={session} ignored (current {})",
                        ctx.session
                    )),
                    None => {
                        out.violation =
                            Some(format!("no UE context for {ue_imsi}, message dropped"))
                    }
                }
            }
            other => {
                out.violation = Some(format!("unexpected Uu message at eNB: {other}"));
            }
        }
        out
    }

    /// Handles an S1-AP message from the MME.
    pub fn handle_from_mme(&mut self, msg: &ProtocolMessage) -> EnbOutput {
        let mut out = EnbOutput::default();
        match msg {
            ProtocolMessage::S1ap(S1apMessage::UeContextSetup {
                imsi,
                enhanced_coverage_restricted,
                session,
            }) => match self.contexts.get_mut(imsi) {
                Some(ctx) if ctx.session == *session => {
                    ctx.restricted = *enhanced_coverage_restricted;
                    out.notes.push(format!(
                        "restriction recorded for {imsi}: {:?}",
                        enhanced_coverage_restricted
                    ));
                }
                Some(_) | None => out
                    .notes
                    .push(format!("UEContextSetup for stale session {session} ignored")),
            },
            ProtocolMessage::S1ap(S1apMessage::UeContextRelease { imsi, session }) => {
                match self.contexts.get(imsi) {
                    Some(ctx) if ctx.session == *session => {
                        self.contexts.remove(imsi);
                        out.emitted.push(EnbEmit::ToUe(
                            imsi.clone(),
                            ProtocolMessage::Rrc(RrcMessage::ConnectionRelease {
                                session: *session,
                            }),
                        ));
                    }
                    _ => out
                        .notes
                        .push(format!("UEContextRelease for stale session {session} ignored")),
                }
            }
            other => {
                out.violation = Some(format!("unexpected S1-AP message at eNB: {other}"));
            }
        }
        out
    }

    /// Schedules one transmission for an attached UE using the stored
    /// context: one repetition when the UE is not CE-capable, when a
    /// restriction is recorded, or when this PLMN does not support CE for
    /// high-category UEs; otherwise the minimal sufficient factor for the
    /// current loss. The ledger is charged in all cases.
    pub fn schedule_transmission(
        &mut self,
        imsi: &Imsi,
        loss: CouplingLoss,
        payload_subframes: u32,
        cfg: &LinkBudgetConfig,
    ) -> Result<TransmissionOutcome, NetworkError> {
        let ctx = self
            .contexts
            .get(imsi)
            .ok_or_else(|| NetworkError::UnknownUeContext {
                cell: self.name.clone(),
                imsi: imsi.clone(),
            })?;
        let profile = UeRadioProfile {
            ce_capable: ctx.caps.map(|c| c.ce_mode_a_supported).unwrap_or(false),
            restricted: ctx.restricted.unwrap_or(false),
            category: ctx
                .caps
                .map(|c| c.ue_category)
                .unwrap_or(UeCategory::HighCategory),
            plmn_supports_ce_high_category: self.supports_ce_high_category,
        };
        Ok(self.transmit_with_profile(&profile, loss, payload_subframes, cfg))
    }

    /// Radio evaluation plus ledger charge for a known profile. Control
    /// plane signaling of UEs that have no scheduler context yet (the attach
    /// itself) goes through here with the UE's declared capabilities.
    pub fn transmit_with_profile(
        &mut self,
        profile: &UeRadioProfile,
        loss: CouplingLoss,
        payload_subframes: u32,
        cfg: &LinkBudgetConfig,
    ) -> TransmissionOutcome {
        let reps = select_repetitions(profile, loss, cfg);
        let outcome = radio::evaluate_transmission(loss, reps, payload_subframes, cfg)
            .expect("repetition factor comes from the config set");
        self.ledger.record(&outcome);
        outcome
    }

    /// Consistent snapshot of the resource ledger.
    pub fn ledger_report(&self) -> CellResourceLedger {
        self.ledger.clone()
    }
}

// ---------------------------------------------------------------------------
// MME
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MmeUeContext {
    pub session: SessionId,
    pub caps: Option<UeCapabilities>,
    pub attach_pending: bool,
    pub attached: bool,
    pub ecr_sent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MmeEmit {
    ToUe(Imsi, ProtocolMessage),
    /// S1-AP toward the eNB serving the given UE.
    ToEnb(Imsi, ProtocolMessage),
    /// Diameter toward the HSS node with the given registry index.
    ToHss(usize, ProtocolMessage),
}

#[derive(Debug, Default)]
pub struct MmeOutput {
    pub emitted: Vec<MmeEmit>,
    pub violation: Option<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct MmeNode {
    pub name: String,
    pub plmn: PlmnId,
    contexts: BTreeMap<Imsi, MmeUeContext>,
}

impl MmeNode {
    pub fn new(name: String, plmn: PlmnId) -> Self {
        MmeNode {
            name,
            plmn,
            contexts: BTreeMap::new(),
        }
    }

    pub fn context(&self, imsi: &Imsi) -> Option<&MmeUeContext> {
        self.contexts.get(imsi)
    }

    pub fn handle(&mut self, registry: &PlmnRegistry, msg: &ProtocolMessage) -> MmeOutput {
        let mut out = MmeOutput::default();
        match msg {
            ProtocolMessage::Nas(NasMessage::AttachRequest { imsi, session, .. }) => {
                let ctx = self.contexts.entry(imsi.clone()).or_insert(MmeUeContext {
                    session: *session,
                    caps: None,
                    attach_pending: false,
                    attached: false,
                    ecr_sent: None,
                });
                if *session < ctx.session {
                    out.notes
                        .push(format!("stale AttachRequest session={session} ignored"));
                    return out;
                }
                if ctx.attach_pending && ctx.session < *session {
                    // A newer attach supersedes one still waiting on the HSS.
                    out.emitted.push(MmeEmit::ToUe(
                        imsi.clone(),
                        ProtocolMessage::Nas(NasMessage::AttachReject {
                            cause: AttachRejectCause::Superseded,
                            session: ctx.session,
                        }),
                    ));
                }
                ctx.session = *session;
                ctx.attach_pending = true;
                ctx.attached = false;
                ctx.ecr_sent = None;
            }
            ProtocolMessage::S1ap(S1apMessage::InitialUeMessage { imsi, caps, session }) => {
                let ctx = self.contexts.entry(imsi.clone()).or_insert(MmeUeContext {
                    session: *session,
                    caps: None,
                    attach_pending: false,
                    attached: false,
                    ecr_sent: None,
                });
                if *session < ctx.session {
                    out.notes
                        .push(format!("stale InitialUEMessage session={session} ignored"));
                    return out;
                }
                ctx.session = *session;
                ctx.caps = Some(*caps);
                match registry.route_s6a(imsi) {
                    Ok(hss) => out.emitted.push(MmeEmit::ToHss(
                        hss,
                        ProtocolMessage::Diameter(DiameterMessage::UpdateLocationRequest {
                            imsi: imsi.clone(),
                            visited_plmn: self.plmn.clone(),
                            session: *session,
                        }),
                    )),
                    Err(err) => {
                        out.notes.push(err.to_string());
                        if ctx.attach_pending {
                            ctx.attach_pending = false;
                            out.emitted.push(MmeEmit::ToUe(
                                imsi.clone(),
                                ProtocolMessage::Nas(NasMessage::AttachReject {
                                    cause: AttachRejectCause::HssUnreachable,
                                    session: *session,
                                }),
                            ));
                        }
                    }
                }
            }
            ProtocolMessage::Diameter(DiameterMessage::UpdateLocationAnswer {
                imsi,
                result,
                session,
            }) => {
                let Some(ctx) = self.contexts.get_mut(imsi) else {
                    out.notes.push(format!("ULA for unknown context {imsi} ignored"));
                    return out;
                };
                if ctx.session != *session || !ctx.attach_pending {
                    out.notes
                        .push(format!("stale ULA session={session} ignored"));
                    return out;
                }
                ctx.attach_pending = false;
                match result {
                    UlaResult::Accepted {
                        enhanced_coverage_restricted,
                    } => {
                        ctx.attached = true;
                        // The parameter reaches the UE only if the UE
                        // declared support for the restriction mechanism,
                        // and the eNB only if it reached the UE.
                        let restriction_supported = ctx
                            .caps
                            .map(|c| c.restriction_supported)
                            .unwrap_or(false);
                        ctx.ecr_sent =
                            restriction_supported.then_some(*enhanced_coverage_restricted);
                        out.emitted.push(MmeEmit::ToUe(
                            imsi.clone(),
                            ProtocolMessage::Nas(NasMessage::AttachAccept {
                                enhanced_coverage_restricted: ctx.ecr_sent,
                                session: *session,
                            }),
                        ));
                        if ctx.ecr_sent.is_some() {
                            out.emitted.push(MmeEmit::ToEnb(
                                imsi.clone(),
                                ProtocolMessage::S1ap(S1apMessage::UeContextSetup {
                                    imsi: imsi.clone(),
                                    enhanced_coverage_restricted: ctx.ecr_sent,
                                    session: *session,
                                }),
                            ));
                        }
                    }
                    UlaResult::UnknownImsi => {
                        out.emitted.push(MmeEmit::ToUe(
                            imsi.clone(),
                            ProtocolMessage::Nas(NasMessage::AttachReject {
                                cause: AttachRejectCause::UnknownImsi,
                                session: *session,
                            }),
                        ));
                    }
                }
            }
            ProtocolMessage::Nas(NasMessage::DetachRequest { imsi, session }) => {
                match self.contexts.get_mut(imsi) {
                    None => {
                        // Nothing to tear down; detach is idempotent.
                        out.emitted.push(MmeEmit::ToUe(
                            imsi.clone(),
                            ProtocolMessage::Nas(NasMessage::DetachAccept { session: *session }),
                        ));
                    }
                    Some(ctx) if *session < ctx.session => {
                        out.notes
                            .push(format!("stale DetachRequest session={session}"));
                        out.emitted.push(MmeEmit::ToUe(
                            imsi.clone(),
                            ProtocolMessage::Nas(NasMessage::DetachAccept { session: *session }),
                        ));
                    }
                    Some(ctx) => {
                        if ctx.attach_pending {
                            ctx.attach_pending = false;
                            out.emitted.push(MmeEmit::ToUe(
                                imsi.clone(),
                                ProtocolMessage::Nas(NasMessage::AttachReject {
                                    cause: AttachRejectCause::Canceled,
                                    session: ctx.session,
                                }),
                            ));
                        }
                        out.emitted.push(MmeEmit::ToUe(
                            imsi.clone(),
                            ProtocolMessage::Nas(NasMessage::DetachAccept { session: *session }),
                        ));
                        out.emitted.push(MmeEmit::ToEnb(
                            imsi.clone(),
                            ProtocolMessage::S1ap(S1apMessage::UeContextRelease {
                                imsi: imsi.clone(),
                                session: *session,
                            }),
                        ));
                        self.contexts.remove(imsi);
                    }
                }
            }
            other => {
                out.violation = Some(format!("unexpected message at MME: {other}"));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// HSS
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct HssOutput {
    /// Answers, sent back to the requesting MME.
    pub emitted: Vec<ProtocolMessage>,
    pub violation: Option<String>,
}

#[derive(Debug, Clone)]
pub struct HssNode {
    pub name: String,
    subscriptions: BTreeMap<Imsi, bool>,
}

impl HssNode {
    pub fn new(name: String) -> Self {
        HssNode {
            name,
            subscriptions: BTreeMap::new(),
        }
    }

    pub fn insert_subscription(&mut self, record: SubscriptionRecord) {
        self.subscriptions
            .insert(record.imsi, record.enhanced_coverage_restricted);
    }

    pub fn handle(&mut self, msg: &ProtocolMessage) -> HssOutput {
        let mut out = HssOutput::default();
        match msg {
            ProtocolMessage::Diameter(DiameterMessage::UpdateLocationRequest {
                imsi,
                session,
                ..
            }) => {
                let result = match self.subscriptions.get(imsi) {
                    Some(&ecr) => UlaResult::Accepted {
                        enhanced_coverage_restricted: ecr,
                    },
                    None => UlaResult::UnknownImsi,
                };
                out.emitted.push(ProtocolMessage::Diameter(
                    DiameterMessage::UpdateLocationAnswer {
                        imsi: imsi.clone(),
                        result,
                        session: *session,
                    },
                ));
            }
            other => {
                out.violation = Some(format!("unexpected message at HSS: {other}"));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// PLMN registry and S6a routing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PlmnEntry {
    pub plmn_id: PlmnId,
    pub supports_ce_mode_a_high_category: bool,
    pub mme: usize,
    pub hss: Option<usize>,
}

/// The set of configured operator networks, with node indices resolved.
#[derive(Debug, Clone, Default)]
pub struct PlmnRegistry {
    pub entries: Vec<PlmnEntry>,
}

impl PlmnRegistry {
    /// Resolves the home HSS for an IMSI by matching the PLMN-id prefix
    /// (longest match wins when a 5-digit and a 6-digit id overlap). A
    /// same-PLMN lookup short-circuits to the local HSS through the same
    /// path; roaming lookups land on the home network's HSS.
    pub fn route_s6a(&self, imsi: &Imsi) -> Result<usize, NetworkError> {
        self.entries
            .iter()
            .filter(|e| e.plmn_id.is_home_of(imsi))
            .max_by_key(|e| e.plmn_id.as_str().len())
            .and_then(|e| e.hss)
            .ok_or_else(|| NetworkError::RoutingFailure(imsi.clone()))
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn imsi(s: &str) -> Imsi {
        Imsi::parse(s).unwrap()
    }

    fn caps(ce: bool, restriction: bool) -> UeCapabilities {
        UeCapabilities::new(UeCategory::HighCategory, ce, restriction)
    }

    fn cfg() -> LinkBudgetConfig {
        LinkBudgetConfig::default()
    }

    fn loss(db: f64) -> CouplingLoss {
        CouplingLoss::new(db).unwrap()
    }

    fn cell() -> CellNode {
        CellNode::new("cell-a".into(), PlmnId::parse("26201").unwrap(), true)
    }

    /// Walks a UE through ConnectionRequest and capability information so
    /// the cell holds a context.
    fn attach_context(cell: &mut CellNode, ue: &Imsi, ue_caps: UeCapabilities) {
        cell.handle_from_ue(
            ue,
            &ProtocolMessage::Rrc(RrcMessage::ConnectionRequest {
                imsi: ue.clone(),
                session: 1,
            }),
        );
        cell.handle_from_ue(
            ue,
            &ProtocolMessage::Rrc(RrcMessage::UeCapabilityInformation {
                caps: ue_caps,
                session: 1,
            }),
        );
    }

    #[test]
    fn scheduler_picks_32_reps_at_nine_db_excess() {
        // Independent route: smallest set member >= 2^(9/2) = 22.6 is 32.
        let mut c = cell();
        let ue = imsi("262011234567890");
        attach_context(&mut c, &ue, caps(true, true));
        let out = c
            .schedule_transmission(&ue, loss(cfg().normal_mcl_db + 9.0), 1, &cfg())
            .unwrap();
        assert_eq!(out.reps_used.get(), 32);
        assert!(out.delivered);
    }

    #[test]
    fn restricted_ue_is_never_scheduled_above_one_repetition() {
        let mut c = cell();
        let ue = imsi("262011234567890");
        attach_context(&mut c, &ue, caps(true, true));
        c.handle_from_mme(&ProtocolMessage::S1ap(S1apMessage::UeContextSetup {
            imsi: ue.clone(),
            enhanced_coverage_restricted: Some(true),
            session: 1,
        }));
        let out = c
            .schedule_transmission(&ue, loss(cfg().normal_mcl_db + 9.0), 1, &cfg())
            .unwrap();
        assert_eq!(out.reps_used.get(), 1);
        assert!(!out.delivered);
    }

    #[test]
    fn normal_coverage_needs_one_repetition() {
        let mut c = cell();
        let ue = imsi("262011234567890");
        attach_context(&mut c, &ue, caps(true, true));
        let out = c
            .schedule_transmission(&ue, loss(cfg().normal_mcl_db - 5.0), 1, &cfg())
            .unwrap();
        assert_eq!(out.reps_used.get(), 1);
        assert!(out.delivered);
    }

    #[test]
    fn beyond_ce_mode_a_charges_the_ledger_and_fails() {
        let mut c = cell();
        let ue = imsi("262011234567890");
        attach_context(&mut c, &ue, caps(true, true));
        let out = c
            .schedule_transmission(&ue, loss(cfg().normal_mcl_db + 11.0), 1, &cfg())
            .unwrap();
        assert_eq!(out.reps_used.get(), 32);
        assert!(!out.delivered);
        assert_eq!(c.ledger_report().subframes_used, 32);
    }

    #[test]
    fn unknown_context_is_an_error() {
        let mut c = cell();
        let err = c
            .schedule_transmission(&imsi("262011234567890"), loss(100.0), 1, &cfg())
            .unwrap_err();
        assert!(matches!(err, NetworkError::UnknownUeContext { .. }));
    }

    #[test]
    fn visited_network_without_ce_support_gates_high_category_ues() {
        let mut c = CellNode::new("cell-v".into(), PlmnId::parse("24008").unwrap(), false);
        let ue = imsi("262011234567890");
        attach_context(&mut c, &ue, caps(true, true));
        let out = c
            .schedule_transmission(&ue, loss(cfg().normal_mcl_db + 9.0), 1, &cfg())
            .unwrap();
        assert_eq!(out.reps_used.get(), 1);

        // Cat-M1 support is baseline, not gated by the per-PLMN flag.
        let m1 = imsi("240081234567890");
        attach_context(
            &mut c,
            &m1,
            UeCapabilities::new(UeCategory::CatM1, true, true),
        );
        let out = c
            .schedule_transmission(&m1, loss(cfg().normal_mcl_db + 9.0), 1, &cfg())
            .unwrap();
        assert_eq!(out.reps_used.get(), 32);
    }

    #[test]
    fn connection_request_is_always_answered_with_an_enquiry() {
        let mut c = cell();
        let ue = imsi("262011234567890");
        let out = c.handle_from_ue(
            &ue,
            &ProtocolMessage::Rrc(RrcMessage::ConnectionRequest {
                imsi: ue.clone(),
                session: 1,
            }),
        );
        assert_eq!(out.emitted.len(), 1);
        assert!(matches!(
            &out.emitted[0],
            EnbEmit::ToUe(_, ProtocolMessage::Rrc(RrcMessage::UeCapabilityEnquiry { .. }))
        ));
    }

    #[test]
    fn capability_information_is_forwarded_to_the_mme() {
        let mut c = cell();
        let ue = imsi("262011234567890");
        c.handle_from_ue(
            &ue,
            &ProtocolMessage::Rrc(RrcMessage::ConnectionRequest {
                imsi: ue.clone(),
                session: 1,
            }),
        );
        let out = c.handle_from_ue(
            &ue,
            &ProtocolMessage::Rrc(RrcMessage::UeCapabilityInformation {
                caps: caps(true, false),
                session: 1,
            }),
        );
        match &out.emitted[..] {
            [EnbEmit::ToMme(ProtocolMessage::S1ap(S1apMessage::InitialUeMessage {
                caps, ..
            }))] => {
                assert!(caps.ce_mode_a_supported);
            }
            other => panic!("unexpected emissions: {other:?}"),
        }
    }

    #[test]
    fn capability_information_from_unknown_ue_is_a_violation() {
        let mut c = cell();
        let out = c.handle_from_ue(
            &imsi("262011234567890"),
            &ProtocolMessage::Rrc(RrcMessage::UeCapabilityInformation {
                caps: caps(true, false),
                session: 1,
            }),
        );
        assert!(out.violation.is_some());
        assert!(out.emitted.is_empty());
    }

    #[test]
    fn ledger_sums_match_by_hand_arithmetic() {
        let mut c = cell();
        let profile = UeRadioProfile {
            ce_capable: true,
            restricted: false,
            category: UeCategory::HighCategory,
            plmn_supports_ce_high_category: true,
        };
        let no_ce = UeRadioProfile {
            ce_capable: false,
            ..profile
        };
        for _ in 0..10 {
            c.transmit_with_profile(&no_ce, loss(100.0), 2, &cfg());
        }
        c.transmit_with_profile(&profile, loss(cfg().normal_mcl_db + 9.9), 1, &cfg());
        let ledger = c.ledger_report();
        assert_eq!(ledger.subframes_used, 52);
        assert_eq!(ledger.subframes_used_ce, 32);
        assert_eq!(ledger.transmissions.get(&1), Some(&10));
        assert_eq!(ledger.transmissions.get(&32), Some(&1));
    }

    #[test]
    fn empty_cell_ledger_is_all_zeros() {
        let c = cell();
        let ledger = c.ledger_report();
        assert_eq!(ledger.subframes_used, 0);
        assert_eq!(ledger.subframes_used_ce, 0);
        assert!(ledger.transmissions.is_empty());
    }

    fn registry() -> PlmnRegistry {
        PlmnRegistry {
            entries: vec![
                PlmnEntry {
                    plmn_id: PlmnId::parse("26201").unwrap(),
                    supports_ce_mode_a_high_category: true,
                    mme: 0,
                    hss: Some(0),
                },
                PlmnEntry {
                    plmn_id: PlmnId::parse("24008").unwrap(),
                    supports_ce_mode_a_high_category: true,
                    mme: 1,
                    hss: Some(1),
                },
                PlmnEntry {
                    plmn_id: PlmnId::parse("240081").unwrap(),
                    supports_ce_mode_a_high_category: true,
                    mme: 2,
                    hss: Some(2),
                },
            ],
        }
    }

    #[test]
    fn s6a_routing_resolves_home_hss_by_imsi_prefix() {
        let r = registry();
        assert_eq!(r.route_s6a(&imsi("262011234567890")).unwrap(), 0);
        assert_eq!(r.route_s6a(&imsi("240089876543210")).unwrap(), 1);
        // Longest prefix wins for overlapping 5- and 6-digit ids.
        assert_eq!(r.route_s6a(&imsi("240081876543210")).unwrap(), 2);
        assert!(matches!(
            r.route_s6a(&imsi("999999876543210")),
            Err(NetworkError::RoutingFailure(_))
        ));
    }

    fn mme() -> MmeNode {
        MmeNode::new("mme-a".into(), PlmnId::parse("26201").unwrap())
    }

    fn attach_request(ue: &Imsi, c: UeCapabilities) -> ProtocolMessage {
        ProtocolMessage::Nas(NasMessage::AttachRequest {
            imsi: ue.clone(),
            caps: c,
            session: 1,
        })
    }

    fn initial_ue_message(ue: &Imsi, c: UeCapabilities) -> ProtocolMessage {
        ProtocolMessage::S1ap(S1apMessage::InitialUeMessage {
            imsi: ue.clone(),
            caps: c,
            session: 1,
        })
    }

    fn ula(ue: &Imsi, ecr: bool) -> ProtocolMessage {
        ProtocolMessage::Diameter(DiameterMessage::UpdateLocationAnswer {
            imsi: ue.clone(),
            result: UlaResult::Accepted {
                enhanced_coverage_restricted: ecr,
            },
            session: 1,
        })
    }

    #[test]
    fn restriction_reaches_ue_and_enb_when_supported() {
        let mut m = mme();
        let r = registry();
        let ue = imsi("262011234567890");
        m.handle(&r, &attach_request(&ue, caps(true, true)));
        let out = m.handle(&r, &initial_ue_message(&ue, caps(true, true)));
        assert!(matches!(&out.emitted[..], [MmeEmit::ToHss(0, _)]));

        let out = m.handle(&r, &ula(&ue, true));
        assert_eq!(out.emitted.len(), 2);
        match &out.emitted[0] {
            MmeEmit::ToUe(
                _,
                ProtocolMessage::Nas(NasMessage::AttachAccept {
                    enhanced_coverage_restricted,
                    ..
                }),
            ) => assert_eq!(*enhanced_coverage_restricted, Some(true)),
            other => panic!("unexpected: {other:?}"),
        }
        match &out.emitted[1] {
            MmeEmit::ToEnb(
                _,
                ProtocolMessage::S1ap(S1apMessage::UeContextSetup {
                    enhanced_coverage_restricted,
                    ..
                }),
            ) => assert_eq!(*enhanced_coverage_restricted, Some(true)),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn restriction_parameter_is_withheld_without_ue_support() {
        let mut m = mme();
        let r = registry();
        let ue = imsi("262011234567890");
        m.handle(&r, &attach_request(&ue, caps(true, false)));
        m.handle(&r, &initial_ue_message(&ue, caps(true, false)));
        let out = m.handle(&r, &ula(&ue, true));
        // Only the AttachAccept, with the parameter absent; no context setup.
        assert_eq!(out.emitted.len(), 1);
        match &out.emitted[0] {
            MmeEmit::ToUe(
                _,
                ProtocolMessage::Nas(NasMessage::AttachAccept {
                    enhanced_coverage_restricted,
                    ..
                }),
            ) => assert_eq!(*enhanced_coverage_restricted, None),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn unknown_imsi_surfaces_as_attach_reject() {
        let mut m = mme();
        let r = registry();
        let ue = imsi("262011234567890");
        m.handle(&r, &attach_request(&ue, caps(true, true)));
        m.handle(&r, &initial_ue_message(&ue, caps(true, true)));
        let out = m.handle(
            &r,
            &ProtocolMessage::Diameter(DiameterMessage::UpdateLocationAnswer {
                imsi: ue.clone(),
                result: UlaResult::UnknownImsi,
                session: 1,
            }),
        );
        assert!(matches!(
            &out.emitted[..],
            [MmeEmit::ToUe(
                _,
                ProtocolMessage::Nas(NasMessage::AttachReject {
                    cause: AttachRejectCause::UnknownImsi,
                    ..
                })
            )]
        ));
    }

    #[test]
    fn routing_failure_rejects_the_attach() {
        let mut m = mme();
        let r = PlmnRegistry::default();
        let ue = imsi("262011234567890");
        m.handle(&r, &attach_request(&ue, caps(true, true)));
        let out = m.handle(&r, &initial_ue_message(&ue, caps(true, true)));
        assert!(matches!(
            &out.emitted[..],
            [MmeEmit::ToUe(
                _,
                ProtocolMessage::Nas(NasMessage::AttachReject {
                    cause: AttachRejectCause::HssUnreachable,
                    ..
                })
            )]
        ));
    }

    #[test]
    fn detach_tears_down_context_and_releases_the_enb() {
        let mut m = mme();
        let r = registry();
        let ue = imsi("262011234567890");
        m.handle(&r, &attach_request(&ue, caps(true, true)));
        m.handle(&r, &initial_ue_message(&ue, caps(true, true)));
        m.handle(&r, &ula(&ue, false));
        let out = m.handle(
            &r,
            &ProtocolMessage::Nas(NasMessage::DetachRequest {
                imsi: ue.clone(),
                session: 1,
            }),
        );
        assert_eq!(out.emitted.len(), 2);
        assert!(matches!(
            &out.emitted[0],
            MmeEmit::ToUe(_, ProtocolMessage::Nas(NasMessage::DetachAccept { .. }))
        ));
        assert!(matches!(
            &out.emitted[1],
            MmeEmit::ToEnb(_, ProtocolMessage::S1ap(S1apMessage::UeContextRelease { .. }))
        ));
        assert!(m.context(&ue).is_none());
    }

    #[test]
    fn detach_mid_attach_cancels_the_pending_transaction() {
        let mut m = mme();
        let r = registry();
        let ue = imsi("262011234567890");
        m.handle(&r, &attach_request(&ue, caps(true, true)));
        m.handle(&r, &initial_ue_message(&ue, caps(true, true)));
        let out = m.handle(
            &r,
            &ProtocolMessage::Nas(NasMessage::DetachRequest {
                imsi: ue.clone(),
                session: 1,
            }),
        );
        // The pending attach is answered (reject) before the detach accept.
        assert!(matches!(
            &out.emitted[0],
            MmeEmit::ToUe(
                _,
                ProtocolMessage::Nas(NasMessage::AttachReject {
                    cause: AttachRejectCause::Canceled,
                    ..
                })
            )
        ));
        // A late ULA for the canceled session is ignored.
        let out = m.handle(&r, &ula(&ue, false));
        assert!(out.emitted.is_empty());
    }

    #[test]
    fn hss_answers_from_the_subscription_store() {
        let mut h = HssNode::new("hss-a".into());
        let allowed = imsi("262011111111111");
        let restricted = imsi("262012222222222");
        h.insert_subscription(SubscriptionRecord {
            imsi: allowed.clone(),
            enhanced_coverage_restricted: false,
        });
        h.insert_subscription(SubscriptionRecord {
            imsi: restricted.clone(),
            enhanced_coverage_restricted: true,
        });

        let ulr = |i: &Imsi| {
            ProtocolMessage::Diameter(DiameterMessage::UpdateLocationRequest {
                imsi: i.clone(),
                visited_plmn: PlmnId::parse("26201").unwrap(),
                session: 1,
            })
        };

        let expect_result = |out: HssOutput| match &out.emitted[..] {
            [ProtocolMessage::Diameter(DiameterMessage::UpdateLocationAnswer {
                result, ..
            })] => *result,
            other => panic!("unexpected: {other:?}"),
        };

        assert_eq!(
            expect_result(h.handle(&ulr(&allowed))),
            UlaResult::Accepted {
                enhanced_coverage_restricted: false
            }
        );
        assert_eq!(
            expect_result(h.handle(&ulr(&restricted))),
            UlaResult::Accepted {
                enhanced_coverage_restricted: true
            }
        );
        assert_eq!(
            expect_result(h.handle(&ulr(&imsi("262013333333333")))),
            UlaResult::UnknownImsi
        );
    }
}
