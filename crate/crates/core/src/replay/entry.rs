use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{extract_local_patches, threshold_mask, Mask, Patch, ReplayStrategy, SaliencyMap};
use crate::error::{Error, Result};
use crate::shapes::{quantize, PointSample, RenderedView, ShapeClass};

/// Chebyshev radius of the interpolated band around placed pixels.
pub const BAND_RADIUS: usize = 2;
const BAND_TOLERANCE: f64 = 1e-12;
const BAND_MAX_SWEEPS: usize = 10_000;

/// What a replay entry keeps of its source image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    /// Full-size image masked by the union of the stage masks, plus crops.
    Saliency {
        global: Vec<f64>,
        mask: Vec<bool>,
        patches: Vec<Patch>,
    },
    Patches {
        patches: Vec<Patch>,
    },
    /// Box-downsampled image at 8-bit precision.
    Downsampled {
        factor: usize,
        pixels: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    pub class: ShapeClass,
    pub strategy: ReplayStrategy,
    pub k: usize,
    pub width: usize,
    pub height: usize,
    pub payload: Payload,
    pub sample: PointSample,
}

impl ReplayEntry {
    pub fn patches(&self) -> &[Patch] {
        match &self.payload {
            Payload::Saliency { patches, .. } | Payload::Patches { patches } => patches,
            Payload::Downsampled { .. } => &[],
        }
    }

    /// Pixels actually held by the entry; bounded by `k·H·W`.
    pub fn stored_pixels(&self) -> usize {
        let patches: usize = self.patches().iter().map(|p| p.pixels.len()).sum();
        match &self.payload {
            Payload::Saliency { global, .. } => global.len() + patches,
            Payload::Patches { .. } => patches,
            Payload::Downsampled { pixels, .. } => pixels.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptureOptions {
    pub k: usize,
    pub tau: f64,
    pub seed: u64,
}

fn downsample(pixels: &[f64], width: usize, height: usize, factor: usize) -> Result<Vec<f64>> {
    if factor == 0 || !width.is_multiple_of(factor) || !height.is_multiple_of(factor) {
        return Err(Error::contract(format!(
            "cannot downsample {width}x{height} by {factor}"
        )));
    }
    let (w, h) = (width / factor, height / factor);
    let area = (factor * factor) as f64;
    let mut out = Vec::with_capacity(w * h);
    for by in 0..h {
        for bx in 0..w {
            let mut acc = 0.0;
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    acc += pixels[y * width + x];
                }
            }
            out.push(quantize(acc / area));
        }
    }
    Ok(out)
}

/// Bilinear upsampling with pixel-centre alignment and edge clamping.
pub fn upsample_bilinear(
    pixels: &[f64],
    w: usize,
    h: usize,
    width: usize,
    height: usize,
) -> Vec<f64> {
    let sx = w as f64 / width as f64;
    let sy = h as f64 / height as f64;
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = pixels[y0 * w + x0] * (1.0 - tx) + pixels[y0 * w + x1] * tx;
            let bottom = pixels[y1 * w + x0] * (1.0 - tx) + pixels[y1 * w + x1] * tx;
            out.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
        }
    }
    out
}

/// Builds the entry `strategy` keeps for one training object. Exact and
/// zero-pad entries take their crops from the deepest stage's mask.
pub fn capture_entry(
    strategy: ReplayStrategy,
    class: ShapeClass,
    view: &RenderedView,
    maps: &[SaliencyMap; 3],
    sample: &PointSample,
    opts: CaptureOptions,
) -> Result<ReplayEntry> {
    if opts.k == 0 {
        return Err(Error::config("replay.k_maps", "must be at least 1"));
    }
    let (width, height) = (view.width, view.height);
    let masks: Vec<Mask> = maps.iter().map(|m| threshold_mask(m, opts.tau)).collect();
    let union = masks[0].union(&masks[1]).union(&masks[2]);
    let max_patches = opts.k - 1;
    let payload = match strategy {
        ReplayStrategy::Exact => Payload::Saliency {
            global: view
                .pixels
                .iter()
                .zip(&union.bits)
                .map(|(&p, &m)| if m { p } else { 0.0 })
                .collect(),
            mask: union.bits.clone(),
            patches: extract_local_patches(view, &masks[2], &maps[2], max_patches)?,
        },
        ReplayStrategy::ZeroPad => Payload::Patches {
            patches: extract_local_patches(view, &masks[2], &maps[2], max_patches)?,
        },
        ReplayStrategy::RandomPatch => {
            let mut rng = crate::seed::rng(opts.seed, &[0x9A7C]);
            let (pw, ph) = ((width / 2).max(1), (height / 2).max(1));
            let patches = (0..max_patches)
                .map(|_| {
                    let x0 = rng.random_range(0..=width - pw);
                    let y0 = rng.random_range(0..=height - ph);
                    Patch::crop(view, [x0, y0, x0 + pw, y0 + ph])
                })
                .collect::<Result<Vec<_>>>()?;
            Payload::Patches { patches }
        }
        ReplayStrategy::CompAndInt => {
            let masked: Vec<f64> = view
                .pixels
                .iter()
                .zip(&union.bits)
                .map(|(&p, &m)| if m { p } else { 0.0 })
                .collect();
            Payload::Downsampled {
                factor: 2,
                pixels: downsample(&masked, width, height, 2)?,
            }
        }
        ReplayStrategy::Compressed => Payload::Downsampled {
            factor: 4,
            pixels: downsample(&view.pixels, width, height, 4)?,
        },
    };
    Ok(ReplayEntry {
        class,
        strategy,
        k: opts.k,
        width,
        height,
        payload,
        sample: sample.clone(),
    })
}

fn place(canvas: &mut [Option<f64>], width: usize, patch: &Patch) {
    let [x0, y0, x1, _] = patch.bbox;
    for (r, row) in patch.pixels.chunks(x1 - x0).enumerate() {
        let start = (y0 + r) * width + x0;
        for (dst, &v) in canvas[start..start + row.len()].iter_mut().zip(row) {
            *dst = Some(v);
        }
    }
}

/// Fills the unplaced pixels: the mean of the placed values everywhere,
/// except a band around placed regions that is relaxed by repeated 3×3
/// neighbour averaging until it stops changing.
pub fn blend_canvas(canvas: &[Option<f64>], width: usize, height: usize) -> Vec<f64> {
    let placed: Vec<f64> = canvas.iter().flatten().copied().collect();
    let fill = if placed.is_empty() {
        0.0
    } else {
        placed.iter().sum::<f64>() / placed.len() as f64
    };
    let mut out: Vec<f64> = canvas.iter().map(|v| v.unwrap_or(fill)).collect();
    let r = BAND_RADIUS as isize;
    let band: Vec<usize> = (0..width * height)
        .filter(|&i| {
            if canvas[i].is_some() {
                return false;
            }
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx >= 0
                        && ny >= 0
                        && (nx as usize) < width
                        && (ny as usize) < height
                        && canvas[ny as usize * width + nx as usize].is_some()
                })
            })
        })
        .collect();
    for _ in 0..BAND_MAX_SWEEPS {
        let mut next = out.clone();
        let mut change: f64 = 0.0;
        for &i in &band {
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            let mut acc = 0.0;
            let mut n = 0;
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if (dx, dy) != (0, 0)
                        && nx >= 0
                        && ny >= 0
                        && (nx as usize) < width
                        && (ny as usize) < height
                    {
                        acc += out[ny as usize * width + nx as usize];
                        n += 1;
                    }
                }
            }
            let v = acc / n as f64;
            change = change.max((v - out[i]).abs());
            next[i] = v;
        }
        out = next;
        if change < BAND_TOLERANCE {
            break;
        }
    }
    out
}

/// Pseudo-images for `entry`. Zero-pad yields one image per stored crop;
/// every other strategy yields one image.
pub fn regenerate_pseudo(
    entry: &ReplayEntry,
    strategy: ReplayStrategy,
) -> Result<Vec<RenderedView>> {
    let (w, h) = (entry.width, entry.height);
    let mismatch = || {
        Error::contract(format!(
            "{strategy:?} cannot regenerate a {:?} entry",
            entry.strategy
        ))
    };
    if strategy != entry.strategy {
        return Err(mismatch());
    }
    let images = match (&entry.payload, strategy) {
        (
            Payload::Saliency {
                global,
                mask,
                patches,
            },
            ReplayStrategy::Exact,
        ) => {
            let mut canvas: Vec<Option<f64>> = global
                .iter()
                .zip(mask)
                .map(|(&p, &m)| if m { Some(p) } else { None })
                .collect();
            for p in patches {
                place(&mut canvas, w, p);
            }
            vec![blend_canvas(&canvas, w, h)]
        }
        (Payload::Patches { patches }, ReplayStrategy::RandomPatch) => {
            let mut canvas = vec![None; w * h];
            for p in patches {
                place(&mut canvas, w, p);
            }
            vec![blend_canvas(&canvas, w, h)]
        }
        (Payload::Patches { patches }, ReplayStrategy::ZeroPad) => {
            if patches.is_empty() {
                vec![vec![0.0; w * h]]
            } else {
                patches
                    .iter()
                    .map(|p| {
                        let mut canvas = vec![None; w * h];
                        place(&mut canvas, w, p);
                        canvas.into_iter().map(|v| v.unwrap_or(0.0)).collect()
                    })
                    .collect()
            }
        }
        (
            Payload::Downsampled { factor, pixels },
            ReplayStrategy::CompAndInt | ReplayStrategy::Compressed,
        ) => {
            vec![upsample_bilinear(pixels, w / factor, h / factor, w, h)]
        }
        _ => return Err(mismatch()),
    };
    images
        .into_iter()
        .map(|px| RenderedView::new(w, h, px))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{generate_shape, render_view, sample_points, ShapeParams};

    const ALL: [ReplayStrategy; 5] = [
        ReplayStrategy::Exact,
        ReplayStrategy::ZeroPad,
        ReplayStrategy::CompAndInt,
        ReplayStrategy::RandomPatch,
        ReplayStrategy::Compressed,
    ];

    fn fixture() -> (RenderedView, [SaliencyMap; 3], PointSample) {
        let g = generate_shape(ShapeClass::Torus, &ShapeParams::default(), 16).unwrap();
        let v = render_view(&g, 0.5, 0.3, 32, 32).unwrap();
        let maps = [0, 1, 2].map(|s| {
            let values = (0..1024)
                .map(|i| {
                    let (x, y) = ((i % 32) as f64, (i / 32) as f64);
                    let d = ((x - 10.0 - 4.0 * s as f64).powi(2) + (y - 16.0).powi(2)).sqrt();
                    (1.0 - d / 24.0).max(0.0)
                })
                .collect();
            SaliencyMap::new(s, 32, 32, values).unwrap()
        });
        (v, maps, sample_points(&g, 64, 1).unwrap())
    }

    fn manual(payload: Payload, strategy: ReplayStrategy, w: usize, h: usize) -> ReplayEntry {
        ReplayEntry {
            class: ShapeClass::Sphere,
            strategy,
            k: 4,
            width: w,
            height: h,
            payload,
            sample: PointSample::new(vec![[0.0; 3]], vec![1.0]).unwrap(),
        }
    }

    #[test]
    fn exact_full_frame_patch_is_bit_identical() {
        let (v, _, _) = fixture();
        let patch = Patch::crop(&v, [0, 0, 32, 32]).unwrap();
        let e = manual(
            Payload::Saliency {
                global: vec![0.0; 1024],
                mask: vec![false; 1024],
                patches: vec![patch],
            },
            ReplayStrategy::Exact,
            32,
            32,
        );
        let out = regenerate_pseudo(&e, ReplayStrategy::Exact).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0]
            .pixels
            .iter()
            .zip(&v.pixels)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn exact_left_half_on_constant_image_converges_to_constant() {
        let v = RenderedView::new(16, 8, vec![0.8; 128]).unwrap();
        let patch = Patch::crop(&v, [0, 0, 8, 8]).unwrap();
        let e = manual(
            Payload::Saliency {
                global: vec![0.0; 128],
                mask: vec![false; 128],
                patches: vec![patch],
            },
            ReplayStrategy::Exact,
            16,
            8,
        );
        let out = &regenerate_pseudo(&e, ReplayStrategy::Exact).unwrap()[0];
        for y in 0..8 {
            for x in 0..16 {
                let p = out.at(x, y);
                if x < 8 {
                    assert_eq!(p, 0.8);
                } else {
                    assert!((p - 0.8).abs() < 1e-12, "({x},{y}) = {p}");
                }
            }
        }
    }

    #[test]
    fn band_relaxes_towards_neighbour_average() {
        // A single placed 1.0 among empties: fill is 1.0, so everything is 1.
        let mut canvas = vec![None; 25];
        canvas[12] = Some(1.0);
        assert!(blend_canvas(&canvas, 5, 5)
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
        // Placed 0 and 1 columns: the band between them is interpolated.
        let mut canvas = vec![None; 7];
        canvas[0] = Some(0.0);
        canvas[6] = Some(1.0);
        let out = blend_canvas(&canvas, 7, 1);
        assert!(out.windows(2).all(|p| p[1] >= p[0] - 1e-12), "{out:?}");
    }

    #[test]
    fn zero_pad_examples() {
        let e = manual(
            Payload::Patches { patches: vec![] },
            ReplayStrategy::ZeroPad,
            16,
            16,
        );
        let out = regenerate_pseudo(&e, ReplayStrategy::ZeroPad).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].is_blank());
        let (v, maps, s) = fixture();
        let opts = CaptureOptions {
            k: 4,
            tau: 0.5,
            seed: 3,
        };
        let e = capture_entry(
            ReplayStrategy::ZeroPad,
            ShapeClass::Torus,
            &v,
            &maps,
            &s,
            opts,
        )
        .unwrap();
        let out = regenerate_pseudo(&e, ReplayStrategy::ZeroPad).unwrap();
        assert_eq!(out.len(), e.patches().len().max(1));
    }

    #[test]
    fn every_strategy_is_deterministic_and_within_budget() {
        let (v, maps, s) = fixture();
        for strategy in ALL {
            let opts = CaptureOptions {
                k: 4,
                tau: 0.5,
                seed: 11,
            };
            let a = capture_entry(strategy, ShapeClass::Torus, &v, &maps, &s, opts).unwrap();
            let b = capture_entry(strategy, ShapeClass::Torus, &v, &maps, &s, opts).unwrap();
            assert_eq!(a, b);
            assert!(a.stored_pixels() <= 4 * 32 * 32);
            let ra = regenerate_pseudo(&a, strategy).unwrap();
            assert_eq!(ra, regenerate_pseudo(&b, strategy).unwrap());
            for img in &ra {
                assert_eq!((img.width, img.height), (32, 32));
            }
            let other = ALL.iter().find(|&&o| o != strategy).unwrap();
            assert!(matches!(
                regenerate_pseudo(&a, *other),
                Err(Error::Contract(_))
            ));
        }
    }

    #[test]
    fn exact_keeps_patch_pixels() {
        let (v, maps, s) = fixture();
        let opts = CaptureOptions {
            k: 4,
            tau: 0.5,
            seed: 0,
        };
        let e = capture_entry(
            ReplayStrategy::Exact,
            ShapeClass::Torus,
            &v,
            &maps,
            &s,
            opts,
        )
        .unwrap();
        assert!(!e.patches().is_empty());
        let out = &regenerate_pseudo(&e, ReplayStrategy::Exact).unwrap()[0];
        for p in e.patches() {
            let [x0, y0, x1, y1] = p.bbox;
            for y in y0..y1 {
                for x in x0..x1 {
                    assert_eq!(out.at(x, y).to_bits(), v.at(x, y).to_bits());
                }
            }
        }
    }

    #[test]
    fn bilinear_round_trip_of_constant() {
        let up = upsample_bilinear(&[0.4; 16], 4, 4, 16, 16);
        assert!(up.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let down = downsample(&vec![0.4; 256], 16, 16, 4).unwrap();
        assert_eq!(down, vec![quantize(0.4); 16]);
    }
}
