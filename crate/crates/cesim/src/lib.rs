//! cesim — a deterministic discrete-event simulator of dynamic Coverage
//! Enhancement (CE mode A) for connected vehicles.
//!
//! The simulator models three sides of the system end to end:
//!
//! - the vehicle TCU: a modem with a line-oriented AT-command API and a
//!   connection manager running the CE enable/disable procedures against a
//!   service registry ([`vehicle`]);
//! - the radio link budget: repetition gain, link closure and subframe cost
//!   ([`radio`]);
//! - a simplified LTE core: eNBs with a repetition-aware scheduler, MMEs,
//!   HSSs holding the Enhanced Coverage Restricted subscription flag, and
//!   PLMN routing for roaming over S6a ([`network`], [`protocol`]).
//!
//! Scenarios are single JSON documents ([`scenario`]); runs produce a
//! reproducible event log and a metrics report ([`sim`], [`report`]). Same
//! scenario, same seed: byte-identical logs.

pub mod network;
pub mod protocol;
pub mod radio;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod vehicle;
