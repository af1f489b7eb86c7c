//! Desk-scale continual-learning harness: generated tasks, synthetic
//! experts, greedy evaluation, the sequential merging scenario and
//! similarity-curve observations.

pub mod eval;
pub mod expert;
pub mod observe;
pub mod sequential;
pub mod tasks;
