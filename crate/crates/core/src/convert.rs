//! Dataset converter stub. Not implemented.
//!
//! A converter for nuScenes-style or RELLIS-style data would have to produce a
//! scene directory (see FORMATS.md):
//!
//! - `scene.cfg` with `classes`, `empty_class`, extent, resolution and one
//!   `camera` and `sweep` line per sensor pose
//! - `gt.ogr` with the dataset's occupancy labels remapped to `classes`
//! - `sweep_NNN.lpc` per LiDAR sweep, sensor frame, intensity in any unit
//!   (normalized on load)
//! - `camera_C.fpy` per camera with per-pixel features from some backbone
//!
//! The synthetic scenes cover every pipeline stage without such data.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    NuScenes,
    Rellis,
}

/// Always fails.
pub fn convert_dataset(kind: DatasetKind, _input: &Path, _out: &Path) -> Result<()> {
    Err(Error::invalid(format!(
        "{kind:?} conversion is not implemented; write a scene directory as described in FORMATS.md"
    )))
}
