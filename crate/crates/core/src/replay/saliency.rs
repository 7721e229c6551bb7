use serde::{Deserialize, Serialize};

use super::SaliencyMode;
use crate::autodiff::{matmul, softmax, Tensor};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::shapes::RenderedView;

/// Per-pixel importance for one encoder stage, max-normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub layer: usize,
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(layer: usize, width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::format(
                "saliency map",
                format!("{} values for {width}x{height}", values.len()),
            ));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format("saliency map", "value outside [0, 1]"));
        }
        Ok(SaliencyMap {
            layer,
            width,
            height,
            values,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Softmax attention over the spatial positions of a `[C, h, w]` feature map
/// against a global vector of length `C`. Dot mode scores `⟨l_i, g⟩`;
/// additive mode scores `Σ_c relu(l_ic + g_c)`.
pub fn attention_from_features(
    features: &Tensor,
    global: &[f64],
    mode: SaliencyMode,
) -> Result<Vec<f64>> {
    let (c, h, w) = match features.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::Dimension {
                op: "attention",
                left: s.to_vec(),
                right: vec![global.len()],
            })
        }
    };
    if global.len() != c || h * w == 0 {
        return Err(Error::Dimension {
            op: "attention",
            left: features.shape().to_vec(),
            right: vec![global.len()],
        });
    }
    let plane = h * w;
    let data = features.data();
    let scores: Vec<f64> = (0..plane)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let l = data[ch * plane + i];
                    match mode {
                        SaliencyMode::Dot => l * global[ch],
                        SaliencyMode::Additive => (l + global[ch]).max(0.0),
                    }
                })
                .sum()
        })
        .collect();
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            op: "attention",
            index: i,
        });
    }
    Ok(softmax(&scores))
}

/// Nearest-neighbour upsampling of an `h × w` grid to `height × width`,
/// followed by division by the maximum (an all-zero grid stays zero).
pub fn upsample_normalized(
    values: &[f64],
    w: usize,
    h: usize,
    width: usize,
    height: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = (y * h / height).min(h - 1);
        for x in 0..width {
            let sx = (x * w / width).min(w - 1);
            out.push(values[sy * w + sx]);
        }
    }
    let max = out.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut out {
            *v /= max;
        }
    }
    out
}

/// Saliency for each of the encoder's three stages. The image feature is
/// projected onto each stage's channel space to form the global vector.
pub fn compute_saliency(
    view: &RenderedView,
    model: &ModelParams,
    mode: SaliencyMode,
) -> Result<[SaliencyMap; 3]> {
    let (feature, maps) = model.encode_view(view)?;
    let mut out = Vec::with_capacity(3);
    for (s, map) in maps.iter().enumerate() {
        let proj = &model.encoder.attn_proj[s];
        let global = matmul(&feature, proj.data(), 1, feature.len(), proj.shape()[1]);
        let attention = attention_from_features(map, &global, mode)?;
        let (h, w) = (map.shape()[1], map.shape()[2]);
        let values = upsample_normalized(&attention, w, h, view.width, view.height);
        out.push(SaliencyMap::new(s, view.width, view.height, values)?);
    }
    Ok(out.try_into().expect("three stages"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::shapes::{render_view, VoxelGrid};

    #[test]
    fn constant_features_give_uniform_attention() {
        let f = Tensor::full(&[3, 4, 4], 0.7);
        for mode in [SaliencyMode::Dot, SaliencyMode::Additive] {
            let a = attention_from_features(&f, &[0.1, -0.3, 2.0], mode).unwrap();
            assert!(a.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        }
    }

    #[test]
    fn dominant_position_takes_the_attention() {
        let mut f = Tensor::zeros(&[2, 3, 3]);
        f.data_mut()[4] = 5.0;
        f.data_mut()[9 + 4] = 5.0;
        let a = attention_from_features(&f, &[1.0, 1.0], SaliencyMode::Dot).unwrap();
        assert!(a[4] >= 0.9, "{a:?}");
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upsampling_is_nearest_and_max_normalized() {
        let v = upsample_normalized(&[0.1, 0.2, 0.3, 0.4], 2, 2, 4, 4);
        assert_eq!(v[0], 0.25);
        assert_eq!(v[3], 0.5);
        assert_eq!(v[15], 1.0);
        assert_eq!(upsample_normalized(&[0.0; 4], 2, 2, 4, 4), vec![0.0; 16]);
    }

    #[test]
    fn model_saliency_has_image_shape() {
        let m = ModelParams::init(&ModelConfig::default(), 32, 1).unwrap();
        let v = render_view(&VoxelGrid::full(8).unwrap(), 0.4, 0.3, 32, 32).unwrap();
        for mode in [SaliencyMode::Dot, SaliencyMode::Additive] {
            let maps = compute_saliency(&v, &m, mode).unwrap();
            for (s, map) in maps.iter().enumerate() {
                assert_eq!(map.layer, s);
                assert_eq!(map.values.len(), 32 * 32);
                assert!(map.values.contains(&1.0));
            }
        }
    }
}
