//! Closed-loop driving decision stack.
//!
//! The pipeline couples four pieces inside a deterministic 2D traffic
//! simulator:
//!
//! 1. a reasoner proposes a discrete action template plus intensity-graded
//!    candidate sub-actions ([`reasoner`]),
//! 2. a learned action-conditioned world model rolls each candidate forward
//!    over a short horizon ([`wm`]),
//! 3. a safety scorer penalizes predicted near-collisions and lane excursions
//!    and picks the safest executable candidate ([`safety`]),
//! 4. a rule-based control backend turns the winner into per-step commands
//!    ([`control`]).
//!
//! [`harness`] orchestrates the loop, runs seeded point-goal benchmarks, and
//! aggregates route/safety/comfort metrics. [`sim`] provides the environment
//! and [`state`] the fixed-layout feature vector shared by every consumer.

pub mod config;
pub mod control;
pub mod geom;
pub mod harness;
pub mod reasoner;
pub mod safety;
pub mod sim;
pub mod state;
pub mod wm;
