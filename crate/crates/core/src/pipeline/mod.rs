pub mod compose;
pub mod config;
pub mod fixture;
pub mod run;

pub use compose::{concat_garments, concat_masks, infuse_garment};
pub use config::{BackboneMode, GuidanceKind, JobConfig};
pub use fixture::write_fixture;
pub use run::{run_tryon, RunOptions, StageRecord, StageReport, STAGES};
