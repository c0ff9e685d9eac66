//! File formats, configuration and the experiment pipeline around
//! [`stkd_core`].

pub mod artifact;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod report;

pub use config::TrainConfig;
pub use io::Dataset;
pub use pipeline::{Prepared, Strategy};
pub use report::MetricsReport;

// Training allocates many short-lived activation buffers per step.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
