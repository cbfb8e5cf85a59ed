//! A federated learning runtime that schedules concurrent jobs across a
//! server and a set of client sites, moves every message over one framed
//! wire format, and bridges an unmodified guest FL application's
//! request/response protocol through its reliable messaging layer.

pub mod bridge;
pub mod cli;
pub mod config;
pub mod guestfl;
pub mod netsim;
pub mod reliable;
pub mod runtime;
pub mod store;
pub mod tracking;
pub mod wire;
