use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::SaliencyMap;
use crate::error::{Error, Result};
use crate::shapes::RenderedView;

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }
}

pub fn threshold_mask(map: &SaliencyMap, tau: f64) -> Mask {
    Mask {
        width: map.width,
        height: map.height,
        bits: map.values.iter().map(|&v| v >= tau).collect(),
    }
}

/// Image crop with its bounding box `[x0, y0, x1, y1]` (end-exclusive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub bbox: [usize; 4],
    pub pixels: Vec<f64>,
}

impl Patch {
    pub fn width(&self) -> usize {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> usize {
        self.bbox[3] - self.bbox[1]
    }

    pub fn crop(image: &RenderedView, bbox: [usize; 4]) -> Result<Patch> {
        let [x0, y0, x1, y1] = bbox;
        if x0 >= x1 || y0 >= y1 || x1 > image.width || y1 > image.height {
            return Err(Error::contract(format!(
                "bounding box {bbox:?} outside a {}x{} image",
                image.width, image.height
            )));
        }
        let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            pixels.extend_from_slice(&image.pixels[y * image.width + x0..y * image.width + x1]);
        }
        Ok(Patch { bbox, pixels })
    }
}

/// 4-connected components of `mask`, each as its pixel indices in scan order.
pub fn connected_components(mask: &Mask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || label[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.bits[j] && !label[j] {
                    label[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Crops the bounding boxes of the mask's components, ranked by summed
/// saliency (ties keep scan order), keeping at most `max_patches`.
pub fn extract_local_patches(
    image: &RenderedView,
    mask: &Mask,
    saliency: &SaliencyMap,
    max_patches: usize,
) -> Result<Vec<Patch>> {
    if (mask.width, mask.height) != (image.width, image.height)
        || (saliency.width, saliency.height) != (image.width, image.height)
    {
        return Err(Error::Dimension {
            op: "extract_local_patches",
            left: vec![image.height, image.width],
            right: vec![mask.height, mask.width],
        });
    }
    let w = image.width;
    let mut comps: Vec<(f64, Vec<usize>)> = connected_components(mask)
        .into_iter()
        .map(|c| (c.iter().map(|&i| saliency.values[i]).sum(), c))
        .collect();
    comps.sort_by(|a, b| b.0.total_cmp(&a.0));
    comps
        .into_iter()
        .take(max_patches)
        .map(|(_, c)| {
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for &i in &c {
                let (x, y) = (i % w, i / w);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
            Patch::crop(image, [x0, y0, x1, y1])
        })
        .collect()
}
