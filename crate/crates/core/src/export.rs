//! ASCII PLY export with per-class colors.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::gaussians::SemanticGaussian;
use crate::grid::{argmax, OccupancyGrid};

const PALETTE: [[u8; 3]; 10] = [
    [200, 200, 200],
    [128, 64, 128],
    [0, 0, 230],
    [0, 175, 0],
    [255, 158, 0],
    [220, 20, 60],
    [75, 0, 75],
    [112, 180, 60],
    [255, 127, 80],
    [47, 79, 79],
];

pub fn class_color(class: usize) -> [u8; 3] {
    PALETTE[class % PALETTE.len()]
}

fn header<W: Write>(w: &mut W, count: usize, extra: &[&str]) -> Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {count}")?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property float {p}")?;
    }
    for p in ["red", "green", "blue"] {
        writeln!(w, "property uchar {p}")?;
    }
    for p in extra {
        writeln!(w, "property {p}")?;
    }
    writeln!(w, "end_header")?;
    Ok(())
}

/// One vertex per Gaussian at its mean, colored by its argmax class.
pub fn write_gaussians_ply<W: Write>(w: &mut W, gaussians: &[SemanticGaussian]) -> Result<()> {
    header(
        w,
        gaussians.len(),
        &["float opacity", "float scale_x", "float scale_y", "float scale_z", "int class"],
    )?;
    for g in gaussians {
        let (m, s) = (g.mean(), g.scale());
        let class = argmax(g.logits());
        let [r, gr, b] = class_color(class);
        writeln!(
            w,
            "{} {} {} {r} {gr} {b} {} {} {} {} {class}",
            m.x as f32,
            m.y as f32,
            m.z as f32,
            g.opacity() as f32,
            s.x as f32,
            s.y as f32,
            s.z as f32
        )?;
    }
    Ok(())
}

/// One vertex per non-empty voxel at its center.
pub fn write_grid_ply<W: Write>(w: &mut W, grid: &OccupancyGrid, empty_index: usize) -> Result<()> {
    let labels = grid.to_labels();
    let occupied: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] as usize != empty_index).collect();
    header(w, occupied.len(), &["int class"])?;
    let spec = grid.spec();
    for lin in occupied {
        let c = spec.center(spec.unlinear(lin));
        let class = labels[lin] as usize;
        let [r, g, b] = class_color(class);
        writeln!(w, "{} {} {} {r} {g} {b} {class}", c.x as f32, c.y as f32, c.z as f32)?;
    }
    Ok(())
}

/// Vertex positions of an ASCII PLY written by this module.
pub fn read_ply_positions<R: BufRead>(r: R) -> Result<Vec<[f64; 3]>> {
    let bad = |m: &str| Error::format("PLY", m.to_string());
    let mut lines = r.lines();
    let mut count = None;
    loop {
        let line = lines.next().ok_or_else(|| bad("missing end_header"))??;
        let line = line.trim();
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| bad("bad vertex count"))?);
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let mut out = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad("fewer vertices than declared"))??;
        let v: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|s| s.parse::<f64>().map_err(|_| bad("bad coordinate")))
            .collect::<Result<_>>()?;
        if v.len() != 3 {
            return Err(bad("vertex line has fewer than 3 fields"));
        }
        out.push([v[0], v[1], v[2]]);
    }
    Ok(out)
}
