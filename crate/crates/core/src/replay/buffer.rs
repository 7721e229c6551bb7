use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{regenerate_pseudo, Patch, Payload, ReplayEntry, ReplayStrategy};
use crate::error::{Error, Result};
use crate::shapes::{
    create_dir, read_pgm, read_points_csv, write_pgm, write_points_csv, PointSample, RenderedView,
    ShapeClass,
};

/// Fixed layout every entry in a buffer must share.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferSpec {
    pub strategy: ReplayStrategy,
    pub k: usize,
    pub width: usize,
    pub height: usize,
    /// Voxel resolution `R` of the occupancy payload.
    pub res: usize,
    pub objects_per_class: usize,
}

impl BufferSpec {
    /// Per-object budget `n_B = k·H·W + R³`.
    pub fn n_b(&self) -> u64 {
        (self.k * self.width * self.height + self.res.pow(3)) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferSize {
    pub n_b: u64,
    pub objects: usize,
    pub per_class: BTreeMap<ShapeClass, u64>,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplaySample {
    pub class: ShapeClass,
    pub image: RenderedView,
    pub sample: PointSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    spec: BufferSpec,
    entries: BTreeMap<ShapeClass, Vec<ReplayEntry>>,
    units: u64,
}

impl ReplayBuffer {
    pub fn new(spec: BufferSpec) -> Result<Self> {
        if spec.k == 0 {
            return Err(Error::config("replay.k_maps", "must be at least 1"));
        }
        if spec.objects_per_class == 0 {
            return Err(Error::config(
                "replay.objects_per_class",
                "must be at least 1",
            ));
        }
        Ok(ReplayBuffer {
            spec,
            entries: BTreeMap::new(),
            units: 0,
        })
    }

    pub fn spec(&self) -> &BufferSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> impl Iterator<Item = ShapeClass> + '_ {
        self.entries.keys().copied()
    }

    pub fn entries(&self, class: ShapeClass) -> &[ReplayEntry] {
        self.entries.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    fn entry_units(&self, e: &ReplayEntry) -> u64 {
        (e.k * e.width * e.height + self.spec.res.pow(3)) as u64
    }

    /// Stores `entry`. Fails without changing the buffer if the entry does
    /// not match the buffer layout or its class has no free slot.
    pub fn insert(&mut self, entry: ReplayEntry) -> Result<()> {
        let s = &self.spec;
        if entry.strategy != s.strategy
            || entry.k != s.k
            || (entry.width, entry.height) != (s.width, s.height)
        {
            return Err(Error::contract(format!(
                "entry ({:?}, k={}, {}x{}) does not match the buffer",
                entry.strategy, entry.k, entry.width, entry.height
            )));
        }
        if entry.stored_pixels() > s.k * s.width * s.height {
            return Err(Error::contract("entry holds more than k·H·W pixels"));
        }
        let used = self.entries(entry.class).len();
        if used >= s.objects_per_class {
            return Err(Error::Capacity {
                class: entry.class.to_string(),
                requested: s.n_b(),
                available: ((s.objects_per_class - used) as u64) * s.n_b(),
            });
        }
        self.units += self.entry_units(&entry);
        self.entries.entry(entry.class).or_default().push(entry);
        Ok(())
    }

    /// Accounting report kept by the running counter.
    pub fn size(&self) -> BufferSize {
        BufferSize {
            n_b: self.spec.n_b(),
            objects: self.len(),
            per_class: self
                .entries
                .iter()
                .map(|(c, v)| (*c, v.iter().map(|e| self.entry_units(e)).sum()))
                .collect(),
            total: self.units,
        }
    }

    /// Total units recomputed from the stored entries.
    pub fn recount(&self) -> u64 {
        self.entries
            .values()
            .flatten()
            .map(|e| self.entry_units(e))
            .sum()
    }

    /// Draws `n` samples with replacement: a class uniformly, then one of its
    /// entries uniformly, then (for multi-image strategies) one pseudo-image.
    pub fn replay(&self, n: usize, seed: u64) -> Result<Vec<ReplaySample>> {
        let classes: Vec<ShapeClass> = self
            .entries
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(c, _)| *c)
            .collect();
        if classes.is_empty() || n == 0 {
            return Ok(Vec::new());
        }
        let mut rng = crate::seed::rng(seed, &[0xB0F]);
        (0..n)
            .map(|_| {
                let class = classes[rng.random_range(0..classes.len())];
                let pool = &self.entries[&class];
                let entry = &pool[rng.random_range(0..pool.len())];
                let mut images = regenerate_pseudo(entry, self.spec.strategy)?;
                let pick = if images.len() > 1 {
                    rng.random_range(0..images.len())
                } else {
                    0
                };
                Ok(ReplaySample {
                    class,
                    image: images.swap_remove(pick),
                    sample: entry.sample.clone(),
                })
            })
            .collect()
    }

    /// One directory per entry holding PGM crops, the point CSV and a JSON
    /// sidecar, plus `buffer.json` listing them in order.
    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let mut names = Vec::new();
        for (class, list) in &self.entries {
            for (i, e) in list.iter().enumerate() {
                let name = format!("{}_{i:03}", class.name());
                let edir = dir.join(&name);
                create_dir(&edir)?;
                save_entry(&edir, e, self.entry_units(e))?;
                names.push(name);
            }
        }
        let index = BufferIndex {
            spec: self.spec,
            entries: names,
            total_units: self.units,
        };
        let path = dir.join("buffer.json");
        std::fs::write(&path, serde_json::to_string_pretty(&index)?)
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("buffer.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: BufferIndex = serde_json::from_str(&text)?;
        let mut buf = ReplayBuffer::new(index.spec)?;
        for name in &index.entries {
            buf.insert(load_entry(&dir.join(name), &index.spec)?)?;
        }
        if buf.units != index.total_units {
            return Err(Error::format(
                "replay buffer",
                "stored unit total does not match its entries",
            ));
        }
        Ok(buf)
    }
}

#[derive(Serialize, Deserialize)]
struct BufferIndex {
    spec: BufferSpec,
    entries: Vec<String>,
    total_units: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    class: ShapeClass,
    k: usize,
    bboxes: Vec<[usize; 4]>,
    n_b: u64,
    strategy: ReplayStrategy,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    downsample: Option<usize>,
    has_global: bool,
}

fn save_entry(dir: &Path, e: &ReplayEntry, n_b: u64) -> Result<()> {
    let (w, h) = (e.width, e.height);
    let mut downsample = None;
    let mut has_global = false;
    match &e.payload {
        Payload::Saliency { global, mask, .. } => {
            has_global = true;
            write_pgm(&dir.join("global.pgm"), w, h, global)?;
            let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            write_pgm(&dir.join("global_mask.pgm"), w, h, &m)?;
        }
        Payload::Patches { .. } => {}
        Payload::Downsampled { factor, pixels } => {
            downsample = Some(*factor);
            write_pgm(&dir.join("downsampled.pgm"), w / factor, h / factor, pixels)?;
        }
    }
    for (i, p) in e.patches().iter().enumerate() {
        write_pgm(
            &dir.join(format!("patch_{i}.pgm")),
            p.width(),
            p.height(),
            &p.pixels,
        )?;
    }
    write_points_csv(&dir.join("points.csv"), &e.sample)?;
    let sidecar = Sidecar {
        class: e.class,
        k: e.k,
        bboxes: e.patches().iter().map(|p| p.bbox).collect(),
        n_b,
        strategy: e.strategy,
        width: w,
        height: h,
        downsample,
        has_global,
    };
    let path = dir.join("entry.json");
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
}

fn load_entry(dir: &Path, spec: &BufferSpec) -> Result<ReplayEntry> {
    let path = dir.join("entry.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sc: Sidecar = serde_json::from_str(&text)?;
    if sc.n_b != spec.n_b() {
        return Err(Error::format(
            "replay entry",
            format!("n_b {} differs from the buffer's {}", sc.n_b, spec.n_b()),
        ));
    }
    let read_sized = |name: &str, w: usize, h: usize| -> Result<Vec<f64>> {
        let (pw, ph, px) = read_pgm(&dir.join(name))?;
        if (pw, ph) != (w, h) {
            return Err(Error::format(
                "replay entry",
                format!("{name} is {pw}x{ph}, expected {w}x{h}"),
            ));
        }
        Ok(px)
    };
    let patches = sc
        .bboxes
        .iter()
        .enumerate()
        .map(|(i, &bbox)| {
            let pixels = read_sized(
                &format!("patch_{i}.pgm"),
                bbox[2] - bbox[0],
                bbox[3] - bbox[1],
            )?;
            Ok(Patch { bbox, pixels })
        })
        .collect::<Result<Vec<_>>>()?;
    let payload = match (sc.has_global, sc.downsample) {
        (true, _) => Payload::Saliency {
            global: read_sized("global.pgm", sc.width, sc.height)?,
            mask: read_sized("global_mask.pgm", sc.width, sc.height)?
                .iter()
                .map(|&v| v > 0.5)
                .collect(),
            patches,
        },
        (false, Some(factor)) => Payload::Downsampled {
            factor,
            pixels: read_sized("downsampled.pgm", sc.width / factor, sc.height / factor)?,
        },
        (false, None) => Payload::Patches { patches },
    };
    Ok(ReplayEntry {
        class: sc.class,
        strategy: sc.strategy,
        k: sc.k,
        width: sc.width,
        height: sc.height,
        payload,
        sample: read_points_csv(&dir.join("points.csv"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::{capture_entry, CaptureOptions, SaliencyMap};
    use crate::shapes::{generate_shape, render_view, sample_points, ShapeParams};
    use proptest::prelude::*;

    fn spec(strategy: ReplayStrategy, per_class: usize) -> BufferSpec {
        BufferSpec {
            strategy,
            k: 4,
            width: 32,
            height: 32,
            res: 16,
            objects_per_class: per_class,
        }
    }

    fn entry(strategy: ReplayStrategy, class: ShapeClass, seed: u64) -> ReplayEntry {
        let g = generate_shape(class, &ShapeParams::default(), 16).unwrap();
        let v = render_view(&g, seed as f64 * 0.3, 0.2, 32, 32).unwrap();
        let maps = [0, 1, 2].map(|s| {
            let values = (0..1024)
                .map(|i| {
                    if (i % 32) / 8 == s + (seed as usize % 2) {
                        1.0
                    } else {
                        0.2
                    }
                })
                .collect();
            SaliencyMap::new(s, 32, 32, values).unwrap()
        });
        let sample = sample_points(&g, 32, seed).unwrap();
        capture_entry(
            strategy,
            class,
            &v,
            &maps,
            &sample,
            CaptureOptions {
                k: 4,
                tau: 0.5,
                seed,
            },
        )
        .unwrap()
    }

    #[test]
    fn n_b_and_totals() {
        let s = spec(ReplayStrategy::Exact, 10);
        assert_eq!(s.n_b(), 8192);
        let mut buf = ReplayBuffer::new(s).unwrap();
        assert_eq!(buf.size().total, 0);
        for i in 0..5 {
            let before = buf.size().total;
            buf.insert(entry(ReplayStrategy::Exact, ShapeClass::Sphere, i))
                .unwrap();
            assert_eq!(buf.size().total - before, 8192);
        }
        assert_eq!(buf.size().total, 40960);
        assert_eq!(buf.recount(), 40960);
    }

    #[test]
    fn capacity_error_leaves_buffer_unchanged() {
        let mut buf = ReplayBuffer::new(spec(ReplayStrategy::Compressed, 1)).unwrap();
        buf.insert(entry(ReplayStrategy::Compressed, ShapeClass::Box, 0))
            .unwrap();
        let before = buf.clone();
        match buf.insert(entry(ReplayStrategy::Compressed, ShapeClass::Box, 1)) {
            Err(Error::Capacity {
                class, requested, ..
            }) => {
                assert_eq!(class, "box");
                assert_eq!(requested, 8192);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(buf, before);
        assert!(buf
            .insert(entry(ReplayStrategy::Exact, ShapeClass::Cone, 0))
            .is_err());
        assert_eq!(buf, before);
    }

    #[test]
    fn replay_sampling() {
        let empty = ReplayBuffer::new(spec(ReplayStrategy::Compressed, 3)).unwrap();
        assert!(empty.replay(5, 0).unwrap().is_empty());
        let mut buf = empty.clone();
        let classes = [
            ShapeClass::Sphere,
            ShapeClass::Box,
            ShapeClass::Cone,
            ShapeClass::Torus,
        ];
        for (i, c) in classes.iter().enumerate() {
            // Uneven entry counts per class must not skew the class mix.
            for j in 0..=(i % 3) {
                buf.insert(entry(ReplayStrategy::Compressed, *c, j as u64))
                    .unwrap();
            }
        }
        assert!(buf.replay(0, 1).unwrap().is_empty());
        let a = buf.replay(50, 7).unwrap();
        assert_eq!(a, buf.replay(50, 7).unwrap());
        let draws = buf.replay(10_000, 3).unwrap();
        for c in classes {
            let f = draws.iter().filter(|d| d.class == c).count() as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.02, "{c}: {f}");
        }
    }

    #[test]
    fn save_load_round_trip_for_every_strategy() {
        for strategy in [
            ReplayStrategy::Exact,
            ReplayStrategy::ZeroPad,
            ReplayStrategy::CompAndInt,
            ReplayStrategy::RandomPatch,
            ReplayStrategy::Compressed,
        ] {
            let mut buf = ReplayBuffer::new(spec(strategy, 2)).unwrap();
            buf.insert(entry(strategy, ShapeClass::Sphere, 1)).unwrap();
            buf.insert(entry(strategy, ShapeClass::Wedge, 2)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            buf.save(dir.path()).unwrap();
            let back = ReplayBuffer::load(dir.path()).unwrap();
            assert_eq!(back, buf, "{strategy:?}");
            let sidecar: serde_json::Value = serde_json::from_str(
                &std::fs::read_to_string(dir.path().join("sphere_000/entry.json")).unwrap(),
            )
            .unwrap();
            assert_eq!(sidecar["n_b"], 8192);
            assert!(sidecar["bboxes"].is_array());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn accounting_matches_recount(ops in proptest::collection::vec((0usize..4, 0u64..3), 0..24), k in 1usize..6, res in 4usize..20) {
            let s = BufferSpec { strategy: ReplayStrategy::ZeroPad, k, width: 16, height: 16, res, objects_per_class: 3 };
            let mut buf = ReplayBuffer::new(s).unwrap();
            let sample = PointSample::new(vec![[0.0; 3]], vec![0.0]).unwrap();
            for (c, _) in ops {
                let e = ReplayEntry {
                    class: ShapeClass::ALL[c],
                    strategy: ReplayStrategy::ZeroPad,
                    k,
                    width: 16,
                    height: 16,
                    payload: Payload::Patches { patches: vec![] },
                    sample: sample.clone(),
                };
                let before = buf.size().total;
                match buf.insert(e) {
                    Ok(()) => prop_assert_eq!(buf.size().total, before + s.n_b()),
                    Err(_) => prop_assert_eq!(buf.size().total, before),
                }
                prop_assert_eq!(buf.recount(), buf.size().total);
                prop_assert_eq!(buf.size().total, s.n_b() * buf.len() as u64);
                prop_assert_eq!(buf.size().per_class.values().sum::<u64>(), buf.size().total);
            }
        }
    }
}
