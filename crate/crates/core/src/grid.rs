//! Dense semantic occupancy grids, either per-class logits or class labels.

use std::io::{Read, Write};

use crate::binio;
use crate::error::{Error, Result};
use crate::gaussians::Vec3;
use crate::lidar::GridSpec;

#[derive(Debug, Clone, PartialEq)]
pub enum GridValues {
    /// `num_voxels * num_classes` values, class fastest.
    Logits(Vec<f64>),
    Labels(Vec<u16>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    spec: GridSpec,
    num_classes: usize,
    values: GridValues,
}

impl OccupancyGrid {
    pub fn from_logits(spec: GridSpec, num_classes: usize, logits: Vec<f64>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("grid needs at least one class"));
        }
        if logits.len() != spec.num_voxels() * num_classes {
            return Err(Error::invalid(format!(
                "logit buffer has {} values, grid needs {}",
                logits.len(),
                spec.num_voxels() * num_classes
            )));
        }
        Ok(OccupancyGrid {
            spec,
            num_classes,
            values: GridValues::Logits(logits),
        })
    }

    pub fn from_labels(spec: GridSpec, num_classes: usize, labels: Vec<u16>) -> Result<Self> {
        if num_classes == 0 || num_classes > u16::MAX as usize {
            return Err(Error::invalid(format!("unsupported class count {num_classes}")));
        }
        if labels.len() != spec.num_voxels() {
            return Err(Error::invalid(format!(
                "label buffer has {} values, grid has {} voxels",
                labels.len(),
                spec.num_voxels()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(OccupancyGrid {
            spec,
            num_classes,
            values: GridValues::Labels(labels),
        })
    }

    pub fn filled_labels(spec: GridSpec, num_classes: usize, label: u16) -> Result<Self> {
        OccupancyGrid::from_labels(spec, num_classes, vec![label; spec.num_voxels()])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &GridValues {
        &self.values
    }

    pub fn is_logits(&self) -> bool {
        matches!(self.values, GridValues::Logits(_))
    }

    pub fn logits(&self) -> Result<&[f64]> {
        match &self.values {
            GridValues::Logits(v) => Ok(v),
            GridValues::Labels(_) => Err(Error::invalid("expected a logit grid, got labels")),
        }
    }

    pub fn labels(&self) -> Result<&[u16]> {
        match &self.values {
            GridValues::Labels(v) => Ok(v),
            GridValues::Logits(_) => Err(Error::invalid("expected a label grid, got logits")),
        }
    }

    pub fn voxel_logits(&self, lin: usize) -> Result<&[f64]> {
        let c = self.num_classes;
        Ok(&self.logits()?[lin * c..(lin + 1) * c])
    }

    /// Labels of a label grid, or the per-voxel argmax of a logit grid
    /// (ties resolve to the lowest class index).
    pub fn to_labels(&self) -> Vec<u16> {
        match &self.values {
            GridValues::Labels(v) => v.clone(),
            GridValues::Logits(v) => v.chunks_exact(self.num_classes).map(|c| argmax(c) as u16).collect(),
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_magic(w, b"OGR1")?;
        let max = self.spec.extent_max();
        for v in self.spec.origin().iter().chain(max.iter()).chain(self.spec.voxel_size().iter()) {
            binio::write_f64(w, *v)?;
        }
        for c in self.spec.counts() {
            binio::write_u32(w, binio::to_u32(c, "grid count")?)?;
        }
        binio::write_u32(w, binio::to_u32(self.num_classes, "class count")?)?;
        match &self.values {
            GridValues::Logits(v) => {
                binio::write_u8(w, 0)?;
                for x in v {
                    binio::write_f32(w, *x as f32)?;
                }
            }
            GridValues::Labels(v) => {
                binio::write_u8(w, 1)?;
                for x in v {
                    binio::write_u16(w, *x)?;
                }
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, b"OGR1", "OGR1")?;
        let mut f = [0.0f64; 9];
        for v in f.iter_mut() {
            *v = binio::read_f64(r)?;
        }
        let counts = [
            binio::read_u32(r)? as usize,
            binio::read_u32(r)? as usize,
            binio::read_u32(r)? as usize,
        ];
        let num_classes = binio::read_u32(r)? as usize;
        let mode = binio::read_u8(r)?;
        let (min, max, res) = (
            Vec3::new(f[0], f[1], f[2]),
            Vec3::new(f[3], f[4], f[5]),
            Vec3::new(f[6], f[7], f[8]),
        );
        let spec = GridSpec::new(min, res, counts).map_err(|e| Error::format("OGR1", e.to_string()))?;
        for a in 0..3 {
            if ((max[a] - min[a]) - counts[a] as f64 * res[a]).abs() > 1e-9 {
                return Err(Error::format("OGR1", format!("extent span on axis {a} disagrees with counts")));
            }
        }
        let n = spec.num_voxels();
        let grid = match mode {
            0 => {
                let mut v = Vec::with_capacity(n * num_classes);
                for _ in 0..n * num_classes {
                    v.push(binio::read_f32(r)? as f64);
                }
                OccupancyGrid::from_logits(spec, num_classes, v)
            }
            1 => {
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    v.push(binio::read_u16(r)?);
                }
                OccupancyGrid::from_labels(spec, num_classes, v)
            }
            m => return Err(Error::format("OGR1", format!("unknown mode flag {m}"))),
        };
        grid.map_err(|e| Error::format("OGR1", e.to_string()))
    }

    /// One `x y z class` line per voxel whose label is not `empty_index`,
    /// at voxel centers.
    pub fn write_ascii<W: Write>(&self, w: &mut W, empty_index: usize) -> Result<()> {
        for (lin, label) in self.to_labels().iter().enumerate() {
            if *label as usize == empty_index {
                continue;
            }
            let c = self.spec.center(self.spec.unlinear(lin));
            writeln!(w, "{} {} {} {}", c.x, c.y, c.z, label)?;
        }
        Ok(())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
