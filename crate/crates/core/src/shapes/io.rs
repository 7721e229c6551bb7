//! Dataset files: `VOXG` grids, binary PGM views, `x,y,z,occ` point CSVs and
//! a JSON manifest, one directory per session.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Instance, PointSample, RenderedView, SessionDataset, ShapeClass, ShapeParams, Split, VoxelGrid,
};
use crate::error::{Error, Result};

const VOXG_MAGIC: &[u8; 4] = b"VOXG";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// 8-byte header (`VOXG`, little-endian `u16` resolution, 2 reserved bytes)
/// followed by one byte per voxel in storage order.
pub fn encode_voxel_grid(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + grid.cells().len());
    out.extend_from_slice(VOXG_MAGIC);
    out.extend_from_slice(&(grid.res() as u16).to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(grid.cells());
    out
}

pub fn decode_voxel_grid(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < 8 || &bytes[..4] != VOXG_MAGIC {
        return Err(Error::format("voxel grid", "missing VOXG header"));
    }
    let res = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    VoxelGrid::new(res, bytes[8..].to_vec())
}

pub fn write_voxel_grid(path: &Path, grid: &VoxelGrid) -> Result<()> {
    write(path, &encode_voxel_grid(grid))
}

pub fn read_voxel_grid(path: &Path) -> Result<VoxelGrid> {
    decode_voxel_grid(&read(path)?)
}

/// Binary 8-bit PGM (`P5`). Values are rounded to the nearest level.
pub fn encode_pgm(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Returns `(width, height, pixels in [0, 1])`; accepts 8- and 16-bit data.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("pgm", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format(
            "pgm",
            format!("unsupported magic {}", fields[0]),
        ));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format("pgm", format!("bad number {s}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("pgm", format!("bad maxval {maxval}")));
    }
    let bpp = if maxval > 255 { 2 } else { 1 };
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() < w * h * bpp {
        return Err(Error::format("pgm", "truncated pixel data"));
    }
    let pixels = (0..w * h)
        .map(|i| {
            let v = if bpp == 1 {
                body[i] as f64
            } else {
                u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64
            };
            v / maxval as f64
        })
        .collect();
    Ok((w, h, pixels))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    write(path, &encode_pgm(width, height, pixels))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_pgm(&read(path)?)
}

pub fn encode_points_csv(sample: &PointSample) -> String {
    let mut out = String::from("x,y,z,occ\n");
    for (p, o) in sample.points.iter().zip(&sample.occupancy) {
        out.push_str(&format!("{},{},{},{}\n", p[0], p[1], p[2], *o as u8));
    }
    out
}

pub fn decode_points_csv(text: &str) -> Result<PointSample> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x,y,z,occ") {
        return Err(Error::format("points csv", "missing x,y,z,occ header"));
    }
    let mut points = Vec::new();
    let mut occupancy = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let vals = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("points csv", format!("line {}: {e}", n + 2)))?;
        if vals.len() != 4 {
            return Err(Error::format(
                "points csv",
                format!("line {}: expected 4 fields", n + 2),
            ));
        }
        points.push([vals[0], vals[1], vals[2]]);
        occupancy.push(vals[3]);
    }
    PointSample::new(points, occupancy)
}

pub fn write_points_csv(path: &Path, sample: &PointSample) -> Result<()> {
    write(path, encode_points_csv(sample).as_bytes())
}

pub fn read_points_csv(path: &Path) -> Result<PointSample> {
    let bytes = read(path)?;
    decode_points_csv(&String::from_utf8_lossy(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInstance {
    pub id: String,
    pub class: ShapeClass,
    pub split: Split,
    pub seed: u64,
    pub params: ShapeParams,
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSession {
    pub index: usize,
    pub classes: Vec<ShapeClass>,
    pub instances: Vec<ManifestInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub res: usize,
    pub image_size: usize,
    pub points_per_object: usize,
    pub sessions: Vec<ManifestSession>,
}

fn session_dir(root: &Path, index: usize) -> std::path::PathBuf {
    root.join(format!("session_{index}"))
}

pub fn export_dataset(root: &Path, sessions: &[SessionDataset], seed: u64) -> Result<Manifest> {
    create_dir(root)?;
    let first = sessions
        .iter()
        .flat_map(SessionDataset::instances)
        .next()
        .ok_or_else(|| Error::contract("cannot export an empty dataset"))?;
    let mut manifest = Manifest {
        seed,
        res: first.grid.res(),
        image_size: first.view.width,
        points_per_object: first.sample.len(),
        sessions: Vec::new(),
    };
    for s in sessions {
        let dir = session_dir(root, s.index);
        create_dir(&dir)?;
        let mut entries = Vec::new();
        for inst in s.instances() {
            write_voxel_grid(&dir.join(format!("{}.voxg", inst.id)), &inst.grid)?;
            write_pgm(
                &dir.join(format!("{}.pgm", inst.id)),
                inst.view.width,
                inst.view.height,
                &inst.view.pixels,
            )?;
            write_points_csv(&dir.join(format!("{}.csv", inst.id)), &inst.sample)?;
            entries.push(ManifestInstance {
                id: inst.id.clone(),
                class: inst.class,
                split: inst.split,
                seed: inst.seed,
                params: inst.params,
                azimuth: inst.view.azimuth,
                elevation: inst.view.elevation,
            });
        }
        manifest.sessions.push(ManifestSession {
            index: s.index,
            classes: s.classes.clone(),
            instances: entries,
        });
    }
    let path = root.join("manifest.json");
    write(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn import_dataset(root: &Path) -> Result<Vec<SessionDataset>> {
    let path = root.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read(&path)?)?;
    let mut out = Vec::new();
    for ms in manifest.sessions {
        let dir = session_dir(root, ms.index);
        let mut ds = SessionDataset {
            index: ms.index,
            classes: ms.classes,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for mi in ms.instances {
            let grid = read_voxel_grid(&dir.join(format!("{}.voxg", mi.id)))?;
            let (w, h, pixels) = read_pgm(&dir.join(format!("{}.pgm", mi.id)))?;
            let mut view = RenderedView::new(w, h, pixels)?;
            view.azimuth = mi.azimuth;
            view.elevation = mi.elevation;
            let sample = read_points_csv(&dir.join(format!("{}.csv", mi.id)))?;
            let inst = Instance {
                id: mi.id,
                class: mi.class,
                split: mi.split,
                seed: mi.seed,
                params: mi.params,
                grid,
                view,
                sample,
            };
            match inst.split {
                Split::Train => ds.train.push(inst),
                Split::Val => ds.val.push(inst),
                Split::Test => ds.test.push(inst),
            }
        }
        out.push(ds);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::shapes::build_sessions;

    #[test]
    fn voxg_header_layout() {
        let g = VoxelGrid::full(4).unwrap();
        let bytes = encode_voxel_grid(&g);
        assert_eq!(&bytes[..8], b"VOXG\x04\x00\x00\x00");
        assert_eq!(bytes.len(), 8 + 64);
        assert_eq!(decode_voxel_grid(&bytes).unwrap(), g);
        assert!(decode_voxel_grid(b"NOPE\x04\x00\x00\x00").is_err());
    }

    #[test]
    fn pgm_handles_comments_and_sixteen_bit() {
        let mut bytes = b"P5\n# comment\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xFF, 0xFF, 0x00, 0x00]);
        let (w, h, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(px, vec![1.0, 0.0]);
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = DataConfig {
            classes: vec![ShapeClass::Sphere, ShapeClass::Wedge],
            sessions: vec![1, 1],
            instances_per_class: 3,
            points_per_object: 32,
            ..DataConfig::default()
        };
        let sessions = build_sessions(&cfg, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(dir.path(), &sessions, 4).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(back, sessions);
    }
}
