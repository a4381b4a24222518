//! Decision-making pipeline for a single-lane unsignalized intersection.
//!
//! The crate covers the full loop: a kinematic traffic simulation with
//! IDM-controlled background vehicles, attention-based PPO experts for the
//! left/straight/right maneuvers, conversion of expert rollouts into
//! return-to-go token sequences, a small decoder-only transformer trained on
//! the mixed dataset, and closed-loop evaluation with success-rate reports.
//!
//! Everything is deterministic under a fixed seed: simulation, training and
//! evaluation all draw from explicitly seeded ChaCha streams, and file
//! artifacts round-trip byte-identically.

pub mod autodiff;
pub mod checkpoint;
pub mod geom;
pub mod kinematics;
pub mod optim;
pub mod params;
pub mod seeding;
pub mod expert;
pub mod sim;
pub mod trace;

pub use kinematics::MetaAction;
