//! Distributed average tracking for networks of second-order agents.
//!
//! Each agent runs a local filter that tracks the network average of
//! time-varying reference signals using only neighbour broadcasts, plus a
//! tracking controller that drives the (possibly nonlinear) agent onto its
//! filter state.

pub mod dynamics;
pub mod graph;
pub mod ode;
pub mod signals;
pub mod sim;
pub mod scenario;
pub mod cli;
