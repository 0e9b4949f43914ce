//! FSM-gated protocol planning and execution.
//!
//! A planner policy proposes protocol drafts and device code; a deterministic
//! finite-state controller decides what the planner may do next, every draft
//! is checked against a scientific rubric, every instruction is checked
//! against the hardware registry, and only approved instructions reach the
//! virtual lab.
//!
//! Module map:
//!
//! - [`registry`]: the hardware registry (devices, operations, parameter bounds, guards)
//! - [`grounding`]: working memory, context projection, symbol resolution, token counting
//! - [`memory`]: episodic trajectory and long-term knowledge store
//! - [`protocol`]: drafts, protocol code and parameter values
//! - [`fsm`]: signal vector, decision matrix, execution gate and the run engine
//! - [`planner`]: planner policies (scripted, fault-injecting, remote) and prompt rendering
//! - [`verifier`]: physical rule engine and scientific judges
//! - [`simulator`]: the virtual lab world
//! - [`trace`]: trace events and the post-run safety audit
//! - [`eval`]: task formats, metrics and the benchmark runner

pub mod eval;
pub mod fsm;
pub mod grounding;
pub mod memory;
pub mod planner;
pub mod protocol;
pub mod registry;
pub mod simulator;
pub mod trace;
pub mod verifier;

mod util;

pub use fsm::{DecisionMatrix, Engine, EngineConfig, FsmState, SignalVector, Verdict};
pub use grounding::{count_tokens, WorkingMemory};
pub use registry::HardwareRegistry;

/// Directory holding the bundled registry, fixtures, knowledge and task suite.
pub fn bundled_data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}
