//! Persistent artifact formats and run configuration.

pub mod architecture;
pub mod checkpoint;
pub mod config;
pub mod dot;
pub mod lasso;
pub mod matrix;
pub mod trace;

pub use architecture::{ArchitectureDocument, Provenance};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};
pub use config::{resolve, Resolved};
pub use dot::to_dot;
pub use lasso::{format_solution, parse_problem, read_problem, summary_line};
pub use matrix::{read_matrix, write_matrix};
pub use trace::{read_trace, TraceWriter};
