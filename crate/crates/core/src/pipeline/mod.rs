//! Orchestration: configuration, training, fusion, generation, metrics,
//! checkpoints, and run manifests.
//!
//! The submodules wire the numeric core to artifacts on disk:
//! - [`config`]: validated run configuration (JSON, unknown keys rejected)
//! - [`checkpoint`]: flat named-array archives for adapters and fused models
//! - [`train`]: the single-concept disentangled training loop
//! - [`generate`]: single- and multi-concept sampling drivers
//! - [`metrics`]: identity/alignment score arithmetic and embedding backends
//! - [`manifest`]: reproducibility records written next to every output

pub mod checkpoint;
pub mod config;
pub mod generate;
pub mod manifest;
pub mod metrics;
pub mod train;

pub use checkpoint::{AdapterCheckpoint, Archive, FusedCheckpoint, TrainedConcept};
pub use config::RunConfig;
pub use generate::{
    generate_multi, generate_single, map_to_image, off_mask_attention_mass, DescriptorField,
    MultiDiagnostics, MultiOptions, MultiOutput, SingleOutput, StepDiag, StepDump,
};
pub use manifest::RunManifest;
pub use metrics::{
    dino_multi_average, evaluate_image, f1_score, make_backend, EmbedBackend, MetricReport,
    StubEmbed,
};
pub use train::{
    evaluate_objective, items_from_dataset, train_single, TrainItem, TrainLogEntry, TrainOutput,
};
