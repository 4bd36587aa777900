//! Experiment orchestration for the `tsd` command-line tool: dataset
//! generation, training runs, mask-grid evaluation, reports and plots.

pub mod cli;
pub mod experiment;
pub mod plot;
pub mod report;
