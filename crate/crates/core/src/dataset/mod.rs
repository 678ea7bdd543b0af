//! The image database: NPZ ingestion, a fixed `[N,3,32,32]` u8 container,
//! and a content-addressed, versioned on-disk store.

mod container;
mod store;

pub use container::{decode_image, ContainerManifest, ImageContainer, ImportOptions, SplitNaming, SplitRange, DEFAULT_SPLITS, IMAGE_BYTES};
pub use store::{slug, DatasetRecord, DatasetStore, FingerprintRef, ImageRef, KnownPerformance, WriteStep};
