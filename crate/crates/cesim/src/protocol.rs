//! Message vocabulary and the UE-side attach state machine.
//!
//! The message set is a minimal abstraction of the real control-plane
//! protocols: RRC between UE and eNB, NAS between UE and MME, S1-AP between
//! eNB and MME, and Diameter/S6a between MME and HSS. Only the fields the
//! signaling flows actually touch are modeled; there is no ASN.1 or NAS
//! codec.
//!
//! Control messages carry a `session` counter assigned by the UE at each
//! attach attempt. It plays the role the UE-association identifiers play in
//! the real protocols: a node acts on a message only if it matches the
//! session it currently holds for that subscriber, so a stale answer from a
//! torn-down session cannot corrupt a newer one.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

// ---------------------------------------------------------------------------
// Identities
// ---------------------------------------------------------------------------

/// 15-digit subscriber identity. The leading MCC+MNC digits name the home
/// PLMN.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Imsi(String);

impl Imsi {
    pub fn parse(s: &str) -> Result<Self, ProtocolError> {
        if s.len() != 15 || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ProtocolError::InvalidImsi(s.to_string()));
        }
        Ok(Imsi(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Imsi {
    type Error = ProtocolError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Imsi::parse(&s)
    }
}

impl From<Imsi> for String {
    fn from(imsi: Imsi) -> String {
        imsi.0
    }
}

impl fmt::Display for Imsi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Public Land Mobile Network identity: 3 MCC digits followed by a 2- or
/// 3-digit MNC.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PlmnId(String);

impl PlmnId {
    pub fn parse(s: &str) -> Result<Self, ProtocolError> {
        if !(5..=6).contains(&s.len()) || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(ProtocolError::InvalidPlmnId(s.to_string()));
        }
        Ok(PlmnId(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// True when this PLMN is the home network of `imsi`, i.e. the PLMN id is
    /// a prefix of the IMSI digits.
    pub fn is_home_of(&self, imsi: &Imsi) -> bool {
        imsi.as_str().starts_with(&self.0)
    }
}

impl TryFrom<String> for PlmnId {
    type Error = ProtocolError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        PlmnId::parse(&s)
    }
}

impl From<PlmnId> for String {
    fn from(p: PlmnId) -> String {
        p.0
    }
}

impl fmt::Display for PlmnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

// ---------------------------------------------------------------------------
// Capabilities
// ---------------------------------------------------------------------------

/// LTE UE category, reduced to the distinction that matters here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UeCategory {
    /// Very low complexity UE for low data rates; CE mode A support is
    /// mandatory.
    CatM1,
    /// High-category UE capable of high data rates; CE mode A is optional.
    HighCategory,
}

impl fmt::Display for UeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UeCategory::CatM1 => write!(f, "cat_m1"),
            UeCategory::HighCategory => write!(f, "high_category"),
        }
    }
}

/// The modem's declared feature set, exchanged during attach.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UeCapabilities {
    /// Declared support for CE mode A.
    pub ce_mode_a_supported: bool,
    /// Declared support for restriction of use of Enhanced Coverage.
    pub restriction_supported: bool,
    pub ue_category: UeCategory,
}

impl UeCapabilities {
    /// Builds a capability set. Cat-M1 modems always declare CE mode A; the
    /// flag is forced on for them.
    pub fn new(ue_category: UeCategory, ce_mode_a_supported: bool, restriction_supported: bool) -> Self {
        let ce = ce_mode_a_supported || ue_category == UeCategory::CatM1;
        UeCapabilities {
            ce_mode_a_supported: ce,
            restriction_supported,
            ue_category,
        }
    }
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

/// UE attach-session counter; increments on every new attach attempt.
pub type SessionId = u32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RrcMessage {
    ConnectionRequest { imsi: Imsi, session: SessionId },
    UeCapabilityEnquiry { session: SessionId },
    UeCapabilityInformation { caps: UeCapabilities, session: SessionId },
    ConnectionRelease { session: SessionId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachRejectCause {
    UnknownImsi,
    HssUnreachable,
    Superseded,
    Canceled,
}

impl fmt::Display for AttachRejectCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttachRejectCause::UnknownImsi => write!(f, "unknown-imsi"),
            AttachRejectCause::HssUnreachable => write!(f, "hss-unreachable"),
            AttachRejectCause::Superseded => write!(f, "superseded"),
            AttachRejectCause::Canceled => write!(f, "canceled"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NasMessage {
    AttachRequest {
        imsi: Imsi,
        caps: UeCapabilities,
        session: SessionId,
    },
    AttachAccept {
        /// Present only when the attaching UE declared restriction support.
        enhanced_coverage_restricted: Option<bool>,
        session: SessionId,
    },
    AttachReject {
        cause: AttachRejectCause,
        session: SessionId,
    },
    DetachRequest {
        imsi: Imsi,
        session: SessionId,
    },
    DetachAccept {
        session: SessionId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum S1apMessage {
    InitialUeMessage {
        imsi: Imsi,
        caps: UeCapabilities,
        session: SessionId,
    },
    UeContextSetup {
        imsi: Imsi,
        /// Present only when the same value was sent to the UE.
        enhanced_coverage_restricted: Option<bool>,
        session: SessionId,
    },
    UeContextRelease {
        imsi: Imsi,
        session: SessionId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UlaResult {
    Accepted { enhanced_coverage_restricted: bool },
    UnknownImsi,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiameterMessage {
    UpdateLocationRequest {
        imsi: Imsi,
        visited_plmn: PlmnId,
        session: SessionId,
    },
    UpdateLocationAnswer {
        imsi: Imsi,
        result: UlaResult,
        session: SessionId,
    },
}

/// Opaque application payloads, measured in subframes only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppMessage {
    UplinkData { payload_subframes: u32 },
    DownlinkData { payload_subframes: u32 },
}

/// Everything that travels on a simulated link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolMessage {
    Rrc(RrcMessage),
    Nas(NasMessage),
    S1ap(S1apMessage),
    Diameter(DiameterMessage),
    App(AppMessage),
}

fn fmt_opt_bool(v: Option<bool>) -> &'static str {
    match v {
        Some(true) => "true",
        Some(false) => "false",
        None => "absent",
    }
}

impl fmt::Display for ProtocolMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProtocolMessage::Rrc(m) => match m {
                RrcMessage::ConnectionRequest { imsi, session } => {
                    write!(f, "RRC ConnectionRequest imsi={imsi} session={session}")
                }
                RrcMessage::UeCapabilityEnquiry { session } => {
                    write!(f, "RRC UECapabilityEnquiry session={session}")
                }
                RrcMessage::UeCapabilityInformation { caps, session } => write!(
                    f,
                    "RRC UECapabilityInformation ce-ModeA={} restriction-support={} category={} session={session}",
                    caps.ce_mode_a_supported, caps.restriction_supported, caps.ue_category
                ),
                RrcMessage::ConnectionRelease { session } => {
                    write!(f, "RRC ConnectionRelease session={session}")
                }
            },
            ProtocolMessage::Nas(m) => match m {
                NasMessage::AttachRequest { imsi, caps, session } => write!(
                    f,
                    "NAS AttachRequest imsi={imsi} ce-ModeA={} restriction-support={} session={session}",
                    caps.ce_mode_a_supported, caps.restriction_supported
                ),
                NasMessage::AttachAccept {
                    enhanced_coverage_restricted,
                    session,
                } => write!(
                    f,
                    "NAS AttachAccept ecr={} session={session}",
                    fmt_opt_bool(*enhanced_coverage_restricted)
                ),
                NasMessage::AttachReject { cause, session } => {
                    write!(f, "NAS AttachReject cause={cause} session={session}")
                }
                NasMessage::DetachRequest { imsi, session } => {
                    write!(f, "NAS DetachRequest imsi={imsi} session={session}")
                }
                NasMessage::DetachAccept { session } => {
                    write!(f, "NAS DetachAccept session={session}")
                }
            },
            ProtocolMessage::S1ap(m) => match m {
                S1apMessage::InitialUeMessage { imsi, caps, session } => write!(
                    f,
                    "S1AP InitialUEMessage imsi={imsi} ce-ModeA={} restriction-support={} session={session}",
                    caps.ce_mode_a_supported, caps.restriction_supported
                ),
                S1apMessage::UeContextSetup {
                    imsi,
                    enhanced_coverage_restricted,
                    session,
                } => write!(
                    f,
                    "S1AP UEContextSetup imsi={imsi} ecr={} session={session}",
                    fmt_opt_bool(*enhanced_coverage_restricted)
                ),
                S1apMessage::UeContextRelease { imsi, session } => {
                    write!(f, "S1AP UEContextRelease imsi={imsi} session={session}")
                }
            },
            ProtocolMessage::Diameter(m) => match m {
                DiameterMessage::UpdateLocationRequest {
                    imsi,
                    visited_plmn,
                    session,
                } => write!(
                    f,
                    "Diameter ULR imsi={imsi} visited-plmn={visited_plmn} session={session}"
                ),
                DiameterMessage::UpdateLocationAnswer { imsi, result, session } => match result {
                    UlaResult::Accepted {
                        enhanced_coverage_restricted,
                    } => write!(
                        f,
                        "Diameter ULA imsi={imsi} ecr={enhanced_coverage_restricted} session={session}"
                    ),
                    UlaResult::UnknownImsi => {
                        write!(f, "Diameter ULA imsi={imsi} error=unknown-imsi session={session}")
                    }
                },
            },
            ProtocolMessage::App(m) => match m {
                AppMessage::UplinkData { payload_subframes } => {
                    write!(f, "App UplinkData payload={payload_subframes}")
                }
                AppMessage::DownlinkData { payload_subframes } => {
                    write!(f, "App DownlinkData payload={payload_subframes}")
                }
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("invalid IMSI '{0}': must be exactly 15 digits")]
    InvalidImsi(String),
    #[error("invalid PLMN id '{0}': must be 5 or 6 digits")]
    InvalidPlmnId(String),
    #[error("command rejected: {0}")]
    CommandRejected(String),
}

// ---------------------------------------------------------------------------
// UE attach state machine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachState {
    Detached,
    Attaching,
    Attached,
}

impl fmt::Display for AttachState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttachState::Detached => write!(f, "Detached"),
            AttachState::Attaching => write!(f, "Attaching"),
            AttachState::Attached => write!(f, "Attached"),
        }
    }
}

/// Attach-related state of the modem.
///
/// `ce_active` is true only when the UE is attached, declared CE mode A, the
/// serving network supports CE for this UE, and the effective restriction is
/// false. The effective restriction is the received ECR value if present;
/// the UE assumes Enhanced Coverage is allowed unless explicitly restricted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UeAttachState {
    pub state: AttachState,
    pub ce_active: bool,
    pub ecr_received: Option<bool>,
}

impl UeAttachState {
    fn new() -> Self {
        UeAttachState {
            state: AttachState::Detached,
            ce_active: false,
            ecr_received: None,
        }
    }

    /// Effective restriction: the received value, or allowed when absent.
    pub fn effectively_restricted(&self) -> bool {
        self.ecr_received.unwrap_or(false)
    }
}

/// What one FSM step produced: messages to send, plus an optional protocol
/// violation to log (the offending message is dropped).
#[derive(Debug, Default)]
pub struct FsmOutput {
    pub emitted: Vec<ProtocolMessage>,
    pub violation: Option<String>,
    /// Noteworthy state changes, for the event log.
    pub notes: Vec<String>,
}

impl FsmOutput {
    fn violation(text: String) -> Self {
        FsmOutput {
            violation: Some(text),
            ..FsmOutput::default()
        }
    }
}

/// UE-side protocol engine: capability declaration, attach/detach signaling,
/// and the CE-active flag.
#[derive(Debug, Clone)]
pub struct UeFsm {
    imsi: Imsi,
    pub caps: UeCapabilities,
    pub attach: UeAttachState,
    /// Whether the serving network supports CE mode A for this UE (always
    /// true for Cat-M1; per-PLMN flag for high-category UEs).
    serving_network_supports_ce: bool,
    session: SessionId,
}

impl UeFsm {
    pub fn new(imsi: Imsi, caps: UeCapabilities, serving_network_supports_ce: bool) -> Self {
        UeFsm {
            imsi,
            caps,
            attach: UeAttachState::new(),
            serving_network_supports_ce,
            session: 0,
        }
    }

    pub fn imsi(&self) -> &Imsi {
        &self.imsi
    }

    /// Session of the current (or most recent) attach attempt.
    pub fn session(&self) -> SessionId {
        self.session
    }

    fn recompute_ce_active(&mut self) {
        self.attach.ce_active = self.attach.state == AttachState::Attached
            && self.caps.ce_mode_a_supported
            && self.serving_network_supports_ce
            && !self.attach.effectively_restricted();
    }

    /// Starts an attach. From `Detached` this opens a new session; from
    /// `Attached` an implicit local detach is performed first (refreshing
    /// capabilities requires a new attach). A second attach while one is
    /// already in progress is rejected.
    pub fn command_attach(&mut self) -> Result<Vec<ProtocolMessage>, ProtocolError> {
        match self.attach.state {
            AttachState::Attaching => Err(ProtocolError::CommandRejected(
                "attach already in progress".into(),
            )),
            AttachState::Detached => {
                self.session += 1;
                self.attach = UeAttachState {
                    state: AttachState::Attaching,
                    ce_active: false,
                    ecr_received: None,
                };
                Ok(vec![ProtocolMessage::Rrc(RrcMessage::ConnectionRequest {
                    imsi: self.imsi.clone(),
                    session: self.session,
                })])
            }
            AttachState::Attached => {
                let mut emitted = self.command_detach();
                emitted.extend(self.command_attach()?);
                Ok(emitted)
            }
        }
    }

    /// Detaches locally and notifies the network. The modem considers itself
    /// detached as soon as the command is issued; the `DetachAccept` that
    /// comes back later is a confirmation, not a trigger. Detaching while
    /// already detached is a no-op.
    pub fn command_detach(&mut self) -> Vec<ProtocolMessage> {
        match self.attach.state {
            AttachState::Detached => Vec::new(),
            AttachState::Attaching | AttachState::Attached => {
                let session = self.session;
                self.attach = UeAttachState::new();
                vec![ProtocolMessage::Nas(NasMessage::DetachRequest {
                    imsi: self.imsi.clone(),
                    session,
                })]
            }
        }
    }

    pub fn handle_message(&mut self, msg: &ProtocolMessage) -> FsmOutput {
        match msg {
            ProtocolMessage::Rrc(RrcMessage::UeCapabilityEnquiry { session }) => {
                if self.attach.state != AttachState::Attaching || *session != self.session {
                    return FsmOutput::violation(format!(
                        "UECapabilityEnquiry session={session} in state {} (current session {})",
                        self.attach.state, self.session
                    ));
                }
                FsmOutput {
                    emitted: vec![
                        ProtocolMessage::Rrc(RrcMessage::UeCapabilityInformation {
                            caps: self.caps,
                            session: *session,
                        }),
                        ProtocolMessage::Nas(NasMessage::AttachRequest {
                            imsi: self.imsi.clone(),
                            caps: self.caps,
                            session: *session,
                        }),
                    ],
                    ..FsmOutput::default()
                }
            }
            ProtocolMessage::Nas(NasMessage::AttachAccept {
                enhanced_coverage_restricted,
                session,
            }) => {
                if self.attach.state != AttachState::Attaching || *session != self.session {
                    return FsmOutput::violation(format!(
                        "AttachAccept session={session} in state {} (current session {}), message dropped",
                        self.attach.state, self.session
                    ));
                }
                self.attach.state = AttachState::Attached;
                self.attach.ecr_received = *enhanced_coverage_restricted;
                self.recompute_ce_active();
                FsmOutput {
                    notes: vec![format!(
                        "attached ecr={} ce_active={}",
                        fmt_opt_bool(self.attach.ecr_received),
                        self.attach.ce_active
                    )],
                    ..FsmOutput::default()
                }
            }
            ProtocolMessage::Nas(NasMessage::AttachReject { cause, session }) => {
                if self.attach.state != AttachState::Attaching || *session != self.session {
                    return FsmOutput::violation(format!(
                        "AttachReject session={session} in state {}, message dropped",
                        self.attach.state
                    ));
                }
                self.attach = UeAttachState::new();
                FsmOutput {
                    notes: vec![format!("attach rejected cause={cause}")],
                    ..FsmOutput::default()
                }
            }
            ProtocolMessage::Nas(NasMessage::DetachAccept { session }) => {
                if *session < self.session && self.attach.state != AttachState::Detached {
                    // Confirmation of an older session's detach; the newer
                    // attach must not be torn down by it.
                    return FsmOutput {
                        notes: vec![format!("detach of session {session} confirmed")],
                        ..FsmOutput::default()
                    };
                }
                let was = self.attach.state;
                self.attach = UeAttachState::new();
                FsmOutput {
                    notes: if was == AttachState::Detached {
                        vec!["detach confirmed".into()]
                    } else {
                        vec![format!("detached (was {was})")]
                    },
                    ..FsmOutput::default()
                }
            }
            ProtocolMessage::Rrc(RrcMessage::ConnectionRelease { session }) => FsmOutput {
                notes: vec![format!("connection released session={session}")],
                ..FsmOutput::default()
            },
            other => FsmOutput::violation(format!("unexpected message at UE: {other}")),
        }
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    fn imsi() -> Imsi {
        Imsi::parse("262011234567890").unwrap()
    }

    fn caps(ce: bool, restriction: bool) -> UeCapabilities {
        UeCapabilities::new(UeCategory::HighCategory, ce, restriction)
    }

    fn fsm(ce: bool) -> UeFsm {
        UeFsm::new(imsi(), caps(ce, true), true)
    }

    #[test]
    fn imsi_must_be_fifteen_digits() {
        assert!(Imsi::parse("262011234567890").is_ok());
        assert!(Imsi::parse("26201123456789").is_err());
        assert!(Imsi::parse("2620112345678901").is_err());
        assert!(Imsi::parse("26201123456789x").is_err());
    }

    #[test]
    fn plmn_prefix_identifies_home_network() {
        let plmn = PlmnId::parse("26201").unwrap();
        assert!(plmn.is_home_of(&imsi()));
        assert!(!PlmnId::parse("24008").unwrap().is_home_of(&imsi()));
        assert!(PlmnId::parse("2620").is_err());
    }

    #[test]
    fn cat_m1_always_declares_ce_mode_a() {
        let c = UeCapabilities::new(UeCategory::CatM1, false, false);
        assert!(c.ce_mode_a_supported);
    }

    #[test]
    fn attach_command_from_detached_emits_connection_request() {
        let mut ue = fsm(true);
        let emitted = ue.command_attach().unwrap();
        assert_eq!(ue.attach.state, AttachState::Attaching);
        assert!(matches!(
            emitted.as_slice(),
            [ProtocolMessage::Rrc(RrcMessage::ConnectionRequest { session: 1, .. })]
        ));
    }

    #[test]
    fn attach_while_attaching_is_rejected() {
        let mut ue = fsm(true);
        ue.command_attach().unwrap();
        assert!(matches!(
            ue.command_attach(),
            Err(ProtocolError::CommandRejected(_))
        ));
    }

    #[test]
    fn capability_enquiry_is_answered_with_information_then_attach_request() {
        let mut ue = fsm(true);
        ue.command_attach().unwrap();
        let out = ue.handle_message(&ProtocolMessage::Rrc(RrcMessage::UeCapabilityEnquiry {
            session: 1,
        }));
        assert!(out.violation.is_none());
        assert_eq!(out.emitted.len(), 2);
        assert!(matches!(
            &out.emitted[0],
            ProtocolMessage::Rrc(RrcMessage::UeCapabilityInformation { .. })
        ));
        assert!(matches!(
            &out.emitted[1],
            ProtocolMessage::Nas(NasMessage::AttachRequest { .. })
        ));
    }

    #[test]
    fn accept_without_restriction_activates_ce() {
        let mut ue = fsm(true);
        ue.command_attach().unwrap();
        let out = ue.handle_message(&ProtocolMessage::Nas(NasMessage::AttachAccept {
            enhanced_coverage_restricted: Some(false),
            session: 1,
        }));
        assert!(out.violation.is_none());
        assert_eq!(ue.attach.state, AttachState::Attached);
        assert!(ue.attach.ce_active);
    }

    #[test]
    fn restriction_overrides_declared_capability() {
        // Truth table of the ce_active invariant: restriction wins even when
        // the capability is declared.
        let mut ue = fsm(true);
        ue.command_attach().unwrap();
        ue.handle_message(&ProtocolMessage::Nas(NasMessage::AttachAccept {
            enhanced_coverage_restricted: Some(true),
            session: 1,
        }));
        assert_eq!(ue.attach.state, AttachState::Attached);
        assert!(!ue.attach.ce_active);
        assert_eq!(ue.attach.ecr_received, Some(true));
    }

    #[test]
    fn absent_ecr_means_allowed() {
        let mut ue = fsm(true);
        ue.command_attach().unwrap();
        ue.handle_message(&ProtocolMessage::Nas(NasMessage::AttachAccept {
            enhanced_coverage_restricted: None,
            session: 1,
        }));
        assert!(ue.attach.ce_active);
        assert!(!ue.attach.effectively_restricted());
    }

    #[test]
    fn ce_stays_inactive_without_network_support() {
        let mut ue = UeFsm::new(imsi(), caps(true, true), false);
        ue.command_attach().unwrap();
        ue.handle_message(&ProtocolMessage::Nas(NasMessage::AttachAccept {
            enhanced_coverage_restricted: None,
            session: 1,
        }));
        assert_eq!(ue.attach.state, AttachState::Attached);
        assert!(!ue.attach.ce_active);
    }

    #[test]
    fn ce_stays_inactive_without_declared_capability() {
        let mut ue = fsm(false);
        ue.command_attach().unwrap();
        ue.handle_message(&ProtocolMessage::Nas(NasMessage::AttachAccept {
            enhanced_coverage_restricted: None,
            session: 1,
        }));
        assert!(!ue.attach.ce_active);
    }

    #[test]
    fn detach_accept_from_attached_enters_detached() {
        let mut ue = fsm(true);
        ue.command_attach().unwrap();
        ue.handle_message(&ProtocolMessage::Nas(NasMessage::AttachAccept {
            enhanced_coverage_restricted: None,
            session: 1,
        }));
        assert_eq!(ue.attach.state, AttachState::Attached);
        let out = ue.handle_message(&ProtocolMessage::Nas(NasMessage::DetachAccept { session: 1 }));
        assert!(out.violation.is_none());
        assert_eq!(ue.attach.state, AttachState::Detached);
        assert!(!ue.attach.ce_active);
    }

    #[test]
    fn attach_accept_in_detached_is_a_violation_and_dropped() {
        let mut ue = fsm(true);
        let out = ue.handle_message(&ProtocolMessage::Nas(NasMessage::AttachAccept {
            enhanced_coverage_restricted: None,
            session: 1,
        }));
        assert!(out.violation.is_some());
        assert_eq!(ue.attach.state, AttachState::Detached);
    }

    #[test]
    fn stale_accept_from_a_previous_session_is_dropped() {
        let mut ue = fsm(true);
        ue.command_attach().unwrap(); // session 1
        ue.command_detach();
        ue.command_attach().unwrap(); // session 2
        let out = ue.handle_message(&ProtocolMessage::Nas(NasMessage::AttachAccept {
            enhanced_coverage_restricted: None,
            session: 1,
        }));
        assert!(out.violation.is_some());
        assert_eq!(ue.attach.state, AttachState::Attaching);
    }

    #[test]
    fn stale_detach_accept_does_not_tear_down_a_new_session() {
        let mut ue = fsm(true);
        ue.command_attach().unwrap(); // session 1
        ue.command_detach();
        ue.command_attach().unwrap(); // session 2
        let out = ue.handle_message(&ProtocolMessage::Nas(NasMessage::DetachAccept { session: 1 }));
        assert!(out.violation.is_none());
        assert_eq!(ue.attach.state, AttachState::Attaching);
    }

    #[test]
    fn attach_from_attached_performs_implicit_local_detach() {
        let mut ue = fsm(true);
        ue.command_attach().unwrap();
        ue.handle_message(&ProtocolMessage::Nas(NasMessage::AttachAccept {
            enhanced_coverage_restricted: None,
            session: 1,
        }));
        let emitted = ue.command_attach().unwrap();
        assert_eq!(emitted.len(), 2);
        assert!(matches!(
            &emitted[0],
            ProtocolMessage::Nas(NasMessage::DetachRequest { session: 1, .. })
        ));
        assert!(matches!(
            &emitted[1],
            ProtocolMessage::Rrc(RrcMessage::ConnectionRequest { session: 2, .. })
        ));
        assert_eq!(ue.attach.state, AttachState::Attaching);
    }

    #[test]
    fn fsm_is_deterministic() {
        let run = || {
            let mut ue = fsm(true);
            let mut trace = format!("{:?}", ue.command_attach());
            for msg in [
                ProtocolMessage::Rrc(RrcMessage::UeCapabilityEnquiry { session: 1 }),
                ProtocolMessage::Nas(NasMessage::AttachAccept {
                    enhanced_coverage_restricted: Some(false),
                    session: 1,
                }),
                ProtocolMessage::Nas(NasMessage::DetachAccept { session: 1 }),
            ] {
                let out = ue.handle_message(&msg);
                trace.push_str(&format!("{:?}{:?}", out.emitted, out.notes));
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
