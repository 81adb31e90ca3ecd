//! Streaming construction of a compact 3D token map.
//!
//! Frames arrive as dense pointmaps with per-pixel semantic and geometric
//! features. Each frame is pooled into patch tokens ([`patching`]) and merged
//! into a [`memory::MemoryState`] that keeps exactly one token per occupied
//! region of space. The map can be fused and positionally embedded for a
//! downstream decoder ([`fusion`]), persisted ([`persistence`]) and
//! benchmarked against plain per-frame token concatenation ([`bench`]).

pub mod bench;
mod codec;
pub mod error;
pub mod frame_file;
pub mod fusion;
pub mod geom;
pub mod memory;
pub mod patching;
pub mod persistence;
pub mod scene;
pub mod spatial;

pub use error::{Error, Result};
pub use geom::{Aabb, Point3};
pub use memory::{MemoryState, MemoryToken, StepReport, ThresholdPolicy};
pub use patching::{FrameBundle, GeomPatchEncoder, PatchToken, PatchTokenSet};
pub use spatial::SpatialIndex;
pub use fusion::{ExportRecord, ExportStream, PosEmbedConfig, Projector};
pub use scene::{RenderOptions, SceneSpec};
