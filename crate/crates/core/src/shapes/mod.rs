//! Procedural voxel shapes, single-view rendering, occupancy point sampling
//! and class-disjoint session construction.

mod io;
mod points;
mod render;
mod sessions;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use io::create_dir;
pub use io::{
    decode_pgm, decode_points_csv, decode_voxel_grid, encode_pgm, encode_points_csv,
    encode_voxel_grid, export_dataset, import_dataset, read_pgm, read_points_csv, read_voxel_grid,
    write_pgm, write_points_csv, write_voxel_grid, Manifest, ManifestInstance, ManifestSession,
};
pub use points::{sample_points, PointSample, DEFAULT_POINTS};
pub(crate) use render::quantize;
pub use render::{render_view, RenderedView};
pub use sessions::{build_sessions, plan_sessions, Instance, SessionDataset, Split};

/// The 13 procedural shape categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeClass {
    Sphere,
    Box,
    Cylinder,
    Torus,
    Cone,
    Pyramid,
    Ellipsoid,
    Tube,
    Cross,
    LBracket,
    RingStack,
    Capsule,
    Wedge,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 13] = [
        ShapeClass::Sphere,
        ShapeClass::Box,
        ShapeClass::Cylinder,
        ShapeClass::Torus,
        ShapeClass::Cone,
        ShapeClass::Pyramid,
        ShapeClass::Ellipsoid,
        ShapeClass::Tube,
        ShapeClass::Cross,
        ShapeClass::LBracket,
        ShapeClass::RingStack,
        ShapeClass::Capsule,
        ShapeClass::Wedge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Box => "box",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Torus => "torus",
            ShapeClass::Cone => "cone",
            ShapeClass::Pyramid => "pyramid",
            ShapeClass::Ellipsoid => "ellipsoid",
            ShapeClass::Tube => "tube",
            ShapeClass::Cross => "cross",
            ShapeClass::LBracket => "l-bracket",
            ShapeClass::RingStack => "ring-stack",
            ShapeClass::Capsule => "capsule",
            ShapeClass::Wedge => "wedge",
        }
    }

    pub fn index(self) -> usize {
        ShapeClass::ALL.iter().position(|&c| c == self).unwrap()
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config("class", format!("unknown shape class `{s}`")))
    }
}

/// Per-instance shape parameters. Ranges:
/// `scale ∈ [0.7, 1]`, `aspect ∈ [0.5, 1]`, `thickness ∈ [0.25, 0.5]`,
/// `yaw ∈ [0, π/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub scale: f64,
    pub aspect: f64,
    pub thickness: f64,
    pub yaw: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams {
            scale: 1.0,
            aspect: 1.0,
            thickness: 0.5,
            yaw: 0.0,
        }
    }
}

impl ShapeParams {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        ShapeParams {
            scale: rng.random_range(0.7..=1.0),
            aspect: rng.random_range(0.5..=1.0),
            thickness: rng.random_range(0.25..=0.5),
            yaw: rng.random_range(0.0..std::f64::consts::FRAC_PI_2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("scale", self.scale, 0.7, 1.0),
            ("aspect", self.aspect, 0.5, 1.0),
            ("thickness", self.thickness, 0.25, 0.5),
            ("yaw", self.yaw, 0.0, std::f64::consts::FRAC_PI_2),
        ];
        for (key, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::config(
                    format!("params.{key}"),
                    format!("{v} outside [{lo}, {hi}]"),
                ));
            }
        }
        Ok(())
    }
}

/// `res³` binary occupancy over the unit cube `[-0.5, 0.5]³`; voxel
/// `(x, y, z)` has its center at `-0.5 + (i + 0.5) / res` on each axis and
/// is stored at `x + res·(y + res·z)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    res: usize,
    occ: Vec<u8>,
}

impl VoxelGrid {
    pub fn new(res: usize, occ: Vec<u8>) -> Result<Self> {
        if res < 4 {
            return Err(Error::config(
                "data.res",
                format!("resolution {res} below 4"),
            ));
        }
        if occ.len() != res * res * res {
            return Err(Error::format(
                "voxel grid",
                format!("{} cells for res {res}", occ.len()),
            ));
        }
        if occ.iter().any(|&v| v > 1) {
            return Err(Error::format(
                "voxel grid",
                "occupancy values must be 0 or 1",
            ));
        }
        Ok(VoxelGrid { res, occ })
    }

    pub fn empty(res: usize) -> Result<Self> {
        VoxelGrid::new(res, vec![0; res * res * res])
    }

    pub fn full(res: usize) -> Result<Self> {
        VoxelGrid::new(res, vec![1; res * res * res])
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn cells(&self) -> &[u8] {
        &self.occ
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.res * (y + self.res * z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occ[self.index(x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.index(x, y, z);
        self.occ[i] = value as u8;
    }

    pub fn occupied_count(&self) -> usize {
        self.occ.iter().filter(|&&v| v != 0).count()
    }

    pub fn center(&self, i: usize) -> f64 {
        -0.5 + (i as f64 + 0.5) / self.res as f64
    }

    /// Voxel centers in storage order.
    pub fn centers(&self) -> Vec<[f64; 3]> {
        let r = self.res;
        let mut out = Vec::with_capacity(r * r * r);
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    out.push([self.center(x), self.center(y), self.center(z)]);
                }
            }
        }
        out
    }

    /// Cell containing `p` (the cell whose center is nearest), clamped to the grid.
    pub fn cell_of(&self, p: [f64; 3]) -> [usize; 3] {
        let r = self.res as f64;
        p.map(|c| ((c + 0.5) * r).floor().clamp(0.0, r - 1.0) as usize)
    }

    pub fn label_at(&self, p: [f64; 3]) -> bool {
        let [x, y, z] = self.cell_of(p);
        self.get(x, y, z)
    }

    pub fn is_degenerate(&self) -> bool {
        let n = self.occupied_count();
        n == 0 || n == self.occ.len()
    }
}

fn rotate_yaw(p: [f64; 3], yaw: f64) -> [f64; 3] {
    if yaw == 0.0 {
        return p;
    }
    let (s, c) = yaw.sin_cos();
    [c * p[0] - s * p[2], p[1], s * p[0] + c * p[2]]
}

fn torus(p: [f64; 3], major: f64, minor: f64) -> bool {
    let rho = (p[0] * p[0] + p[2] * p[2]).sqrt();
    (rho - major).powi(2) + p[1] * p[1] < minor * minor
}

/// Inside test for a class in its canonical frame; `h` is the half-extent.
fn inside(class: ShapeClass, params: &ShapeParams, p: [f64; 3]) -> bool {
    let h = 0.4 * params.scale;
    let a = params.aspect;
    let t = params.thickness;
    let [x, y, z] = p;
    let rho_y = (x * x + z * z).sqrt();
    match class {
        ShapeClass::Sphere => x * x + y * y + z * z < h * h,
        ShapeClass::Box => x.abs() < h && y.abs() < h * a && z.abs() < h,
        ShapeClass::Cylinder => rho_y < h * a && y.abs() < h,
        ShapeClass::Torus => {
            let minor = h * (0.3 + 0.8 * (t - 0.25));
            torus(p, h - minor, minor)
        }
        ShapeClass::Cone => y.abs() < h && rho_y < h * a * (h - y) / (2.0 * h),
        ShapeClass::Pyramid => y.abs() < h && x.abs().max(z.abs()) < (h - y) / 2.0,
        ShapeClass::Ellipsoid => {
            (x / h).powi(2) + (y / (h * a)).powi(2) + (z / (0.6 * h)).powi(2) < 1.0
        }
        ShapeClass::Tube => {
            let outer = h * (0.7 + 0.3 * a);
            let inner = outer * (1.0 - (0.3 + 0.6 * t));
            let rho_x = (y * y + z * z).sqrt();
            x.abs() < h && rho_x < outer && rho_x > inner
        }
        ShapeClass::Cross => {
            let w = h * (0.2 + 0.4 * t);
            let bar = |u: f64, v: f64, along: f64| u.abs() < w && v.abs() < w && along.abs() < h;
            bar(y, z, x) || bar(x, z, y) || bar(x, y, z)
        }
        ShapeClass::LBracket => {
            let w = h * (0.5 + 0.4 * (t - 0.25));
            let depth = h * a;
            let foot = x.abs() < h && y > -h && y < -h + w && z.abs() < depth;
            let post = x > -h && x < -h + w && y.abs() < h && z.abs() < depth;
            foot || post
        }
        ShapeClass::RingStack => {
            let minor = 0.3 * h;
            let major = h - minor;
            let shift = |dy: f64| [x, y - dy, z];
            torus(shift(h / 2.0), major, minor) || torus(shift(-h / 2.0), major, minor)
        }
        ShapeClass::Capsule => {
            let r = h * (0.3 + 0.3 * a);
            let seg = (h - r).max(0.0);
            let cy = y.clamp(-seg, seg);
            x * x + (y - cy).powi(2) + z * z < r * r
        }
        ShapeClass::Wedge => x.abs() < h && y.abs() < h && z.abs() < h * a && y < -x,
    }
}

/// Voxelizes one shape instance at `res`, sampling each voxel at its center.
/// Pure in `(class, params, res)`.
pub fn generate_shape(class: ShapeClass, params: &ShapeParams, res: usize) -> Result<VoxelGrid> {
    params.validate()?;
    let mut grid = VoxelGrid::empty(res)?;
    for z in 0..res {
        for y in 0..res {
            for x in 0..res {
                let p = [grid.center(x), grid.center(y), grid.center(z)];
                let q = rotate_yaw(p, -params.yaw);
                if inside(class, params, q) {
                    grid.set(x, y, z, true);
                }
            }
        }
    }
    if grid.is_degenerate() {
        return Err(Error::contract(format!(
            "{class} with {params:?} at res {res} is degenerate"
        )));
    }
    Ok(grid)
}

/// Draws parameters from `seed` and voxelizes.
pub fn generate_instance(
    class: ShapeClass,
    res: usize,
    seed: u64,
) -> Result<(ShapeParams, VoxelGrid)> {
    let mut rng = crate::seed::rng(seed, &[class.index() as u64]);
    let params = ShapeParams::random(&mut rng);
    let grid = generate_shape(class, &params, res)?;
    Ok((params, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_volume_matches_analytic() {
        let g = generate_shape(ShapeClass::Sphere, &ShapeParams::default(), 16).unwrap();
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * (0.4f64 * 16.0).powi(3);
        let n = g.occupied_count() as f64;
        assert!((n - analytic).abs() <= 0.1 * analytic, "{n} vs {analytic}");
    }

    #[test]
    fn full_extent_box_fills_interior() {
        let g = generate_shape(ShapeClass::Box, &ShapeParams::default(), 16).unwrap();
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let interior = [x, y, z].iter().all(|&i| (2..14).contains(&i));
                    assert_eq!(g.get(x, y, z), interior, "({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_non_degenerate() {
        for class in ShapeClass::ALL {
            for seed in 0..5 {
                let a = generate_instance(class, 16, seed).unwrap();
                let b = generate_instance(class, 16, seed).unwrap();
                assert_eq!(a, b);
                assert!(!a.1.is_degenerate());
            }
        }
    }

    #[test]
    fn extremes_of_parameter_ranges_stay_non_degenerate() {
        for class in ShapeClass::ALL {
            for scale in [0.7, 1.0] {
                for aspect in [0.5, 1.0] {
                    for thickness in [0.25, 0.5] {
                        let p = ShapeParams {
                            scale,
                            aspect,
                            thickness,
                            yaw: 0.7,
                        };
                        generate_shape(class, &p, 16).unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn max_extent_within_eighty_percent() {
        for class in ShapeClass::ALL {
            let g = generate_shape(class, &ShapeParams::default(), 16).unwrap();
            for z in 0..16 {
                for y in 0..16 {
                    for x in 0..16 {
                        if g.get(x, y, z) {
                            for c in [x, y, z] {
                                assert!(g.center(c).abs() < 0.4 + 1e-12, "{class}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_class_is_config_error() {
        assert!(matches!(
            "teapot".parse::<ShapeClass>(),
            Err(Error::Config { .. })
        ));
        assert_eq!(
            "l-bracket".parse::<ShapeClass>().unwrap(),
            ShapeClass::LBracket
        );
    }

    #[test]
    fn params_out_of_range_rejected() {
        let p = ShapeParams {
            scale: 2.0,
            ..Default::default()
        };
        assert!(matches!(
            generate_shape(ShapeClass::Sphere, &p, 16),
            Err(Error::Config { .. })
        ));
        assert!(matches!(VoxelGrid::empty(3), Err(Error::Config { .. })));
    }
}
