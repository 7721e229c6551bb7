use serde::{Deserialize, Serialize};

use super::VoxelGrid;
use crate::error::{Error, Result};

/// Half-width of the orthographic image plane in world units.
const VIEW_HALF_EXTENT: f64 = 0.75;
/// Rays start this far from the origin, outside the cube's bounding sphere.
const CAMERA_DISTANCE: f64 = 1.0;

/// Grayscale `height × width` view, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub azimuth: f64,
    pub elevation: f64,
}

impl RenderedView {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::format(
                "image",
                format!("{} pixels for {width}x{height}", pixels.len()),
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::format("image", "pixel outside [0, 1]"));
        }
        Ok(RenderedView {
            width,
            height,
            pixels,
            azimuth: 0.0,
            elevation: 0.0,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        RenderedView {
            width,
            height,
            pixels: vec![0.0; width * height],
            azimuth: 0.0,
            elevation: 0.0,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn is_blank(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0.0)
    }
}

/// Rounds to the nearest 8-bit level so images survive PGM export exactly.
pub(crate) fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Orthographic depth-shaded silhouette. The camera sits on the direction
/// `(cos e · sin a, sin e, cos e · cos a)` looking at the origin; nearer hits
/// are brighter, background is 0.
pub fn render_view(
    grid: &VoxelGrid,
    azimuth: f64,
    elevation: f64,
    width: usize,
    height: usize,
) -> Result<RenderedView> {
    if width < 16 || height < 16 {
        return Err(Error::config(
            "data.image_size",
            format!("{width}x{height} below 16x16"),
        ));
    }
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    let cam = [ce * sa, se, ce * ca];
    let right = [ca, 0.0, -sa];
    let up = cross(cam, right);
    let dir = cam.map(|c| -c);

    let res = grid.res() as f64;
    let step = 0.25 / res;
    let max_t = 2.0 * CAMERA_DISTANCE;
    let n_steps = (max_t / step).ceil() as usize;
    // Depth range over which shading varies: the cube's bounding sphere.
    let near = CAMERA_DISTANCE - 0.75f64.sqrt();
    let span = 2.0 * 0.75f64.sqrt();

    let mut pixels = vec![0.0; width * height];
    for py in 0..height {
        let v = (1.0 - 2.0 * (py as f64 + 0.5) / height as f64) * VIEW_HALF_EXTENT;
        for px in 0..width {
            let u = (2.0 * (px as f64 + 0.5) / width as f64 - 1.0) * VIEW_HALF_EXTENT;
            let origin = [0, 1, 2].map(|i| u * right[i] + v * up[i] + CAMERA_DISTANCE * cam[i]);
            for s in 0..n_steps {
                let t = s as f64 * step;
                let p = [0, 1, 2].map(|i| origin[i] + t * dir[i]);
                if p.iter().any(|c| c.abs() >= 0.5) {
                    continue;
                }
                if grid.label_at(p) {
                    let shade = 1.0 - 0.6 * ((t - near) / span).clamp(0.0, 1.0);
                    pixels[py * width + px] = quantize(shade);
                    break;
                }
            }
        }
    }
    Ok(RenderedView {
        width,
        height,
        pixels,
        azimuth,
        elevation,
    })
}
