//! Dual-mode racing motion planner.
//!
//! Two complementary receding-horizon planners under one command layer:
//!
//! - **fd** — fast-driving mode: samples laterally offset candidate paths,
//!   tracks each with a convex MPC, and tree-searches the path selection
//!   under point-obstacle clearance. Cheap enough for high-rate replanning.
//! - **sa** — shape-aware mode: full polytope-vs-polytope collision
//!   constraints certified by strong-duality multipliers, solved by
//!   alternating minimization between motion and dual variables.
//!
//! A scenario-aware switcher (rule engine, or a language-model endpoint with
//! experience retrieval) picks the active mode and a speed shift; a kinematic
//! simulation harness closes the loop and runs the overtaking and lap
//! studies. See the `book/` guide for a narrative walkthrough.

pub mod error;
pub mod fd;
pub mod geometry;
pub mod qp;
pub mod reference;
pub mod sa;
pub mod vehicle;

pub use error::{Error, Result};
