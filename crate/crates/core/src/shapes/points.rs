use rand::Rng;
use serde::{Deserialize, Serialize};

use super::VoxelGrid;
use crate::error::{Error, Result};

pub const DEFAULT_POINTS: usize = 1024;

/// Occupancy supervision: points in the unit cube with binary labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSample {
    pub points: Vec<[f64; 3]>,
    pub occupancy: Vec<f64>,
}

impl PointSample {
    pub fn new(points: Vec<[f64; 3]>, occupancy: Vec<f64>) -> Result<Self> {
        if points.len() != occupancy.len() {
            return Err(Error::format(
                "point sample",
                format!("{} points but {} labels", points.len(), occupancy.len()),
            ));
        }
        if points.iter().flatten().any(|c| !(-0.5..=0.5).contains(c)) {
            return Err(Error::format(
                "point sample",
                "coordinate outside the unit cube",
            ));
        }
        if occupancy.iter().any(|&o| o != 0.0 && o != 1.0) {
            return Err(Error::format("point sample", "labels must be 0 or 1"));
        }
        Ok(PointSample { points, occupancy })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset by index, preserving the given order.
    pub fn select(&self, idx: &[usize]) -> PointSample {
        PointSample {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            occupancy: idx.iter().map(|&i| self.occupancy[i]).collect(),
        }
    }
}

fn surface_voxels(grid: &VoxelGrid) -> Vec<[usize; 3]> {
    let r = grid.res();
    let mut out = Vec::new();
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                if !grid.get(x, y, z) {
                    continue;
                }
                let on_surface = [(1isize, 0isize, 0isize), (0, 1, 0), (0, 0, 1)]
                    .iter()
                    .flat_map(|&(dx, dy, dz)| [(dx, dy, dz), (-dx, -dy, -dz)])
                    .any(|(dx, dy, dz)| {
                        let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                        let outside = |v: isize| v < 0 || v >= r as isize;
                        outside(nx)
                            || outside(ny)
                            || outside(nz)
                            || !grid.get(nx as usize, ny as usize, nz as usize)
                    });
                if on_surface {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Half the points jittered within two voxels of the surface, half uniform in
/// the cube; labels come from the containing voxel.
pub fn sample_points(grid: &VoxelGrid, n: usize, seed: u64) -> Result<PointSample> {
    if n == 0 {
        return Err(Error::contract("sample_points needs n >= 1"));
    }
    let mut rng = crate::seed::rng(seed, &[0x5A]);
    let surface = surface_voxels(grid);
    let voxel = 1.0 / grid.res() as f64;
    let hi = 0.5 - 1e-12;
    let n_near = if surface.is_empty() { 0 } else { n / 2 };

    let mut points = Vec::with_capacity(n);
    for _ in 0..n_near {
        let cell = surface[rng.random_range(0..surface.len())];
        let p = cell.map(|i| {
            let c = grid.center(i) + rng.random_range(-2.0..2.0) * voxel;
            c.clamp(-0.5, hi)
        });
        points.push(p);
    }
    while points.len() < n {
        points.push([0; 3].map(|_| rng.random_range(-0.5..hi)));
    }
    let occupancy = points
        .iter()
        .map(|&p| grid.label_at(p) as u8 as f64)
        .collect();
    Ok(PointSample { points, occupancy })
}
