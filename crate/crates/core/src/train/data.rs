use std::ops::Range;

use semloc_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::features::FeatureSet;

/// Per-run coordinate standardization: subtract the source centroid and
/// divide by one isotropic scale, the RMS per-axis spread of the source.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordNormalizer {
    pub center: [f64; 3],
    pub scale: f64,
}

impl CoordNormalizer {
    pub fn identity() -> Self {
        Self { center: [0.0; 3], scale: 1.0 }
    }

    pub fn fit(coords: &[[f64; 3]]) -> Result<Self> {
        if coords.is_empty() {
            return Err(invalid("cannot fit a coordinate normalizer on zero samples"));
        }
        let n = coords.len() as f64;
        let mut center = [0.0; 3];
        for c in coords {
            for a in 0..3 {
                center[a] += c[a] / n;
            }
        }
        let ms = coords
            .iter()
            .map(|c| (0..3).map(|a| (c[a] - center[a]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / (3.0 * n);
        let scale = if ms > 0.0 { ms.sqrt() } else { 1.0 };
        Ok(Self { center, scale })
    }

    pub fn normalize(&self, c: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (c[a] - self.center[a]) / self.scale)
    }

    pub fn denormalize(&self, z: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| z[a] * self.scale + self.center[a])
    }
}

/// Borrowed view of the samples of one scene range.
#[derive(Clone, Debug)]
pub struct SampleView<'a> {
    pub features: &'a FeatureSet,
    /// Indices into `features`, in storage order.
    pub indices: Vec<usize>,
    /// Scene id of each entry of `indices`.
    pub scene_ids: Vec<usize>,
    pub scenes: Range<usize>,
    pub input_shape: [usize; 3],
}

/// Network input shape `[C, H, W]` of one fingerprint.
pub fn input_shape(fs: &FeatureSet) -> Result<[usize; 3]> {
    match fs.manifest.sample_shape.as_slice() {
        &[h, w] => Ok([1, h, w]),
        &[c, h, w] => Ok([c, h, w]),
        s => Err(invalid(format!("unsupported fingerprint shape {s:?}"))),
    }
}

impl<'a> SampleView<'a> {
    pub fn new(features: &'a FeatureSet, scenes: Range<usize>) -> Result<Self> {
        let ids = features.manifest.source.scene_ids();
        let indices: Vec<usize> = (0..features.len()).filter(|&i| scenes.contains(&ids[i])).collect();
        Ok(Self {
            features,
            scene_ids: indices.iter().map(|&i| ids[i]).collect(),
            indices,
            scenes,
            input_shape: input_shape(features)?,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Inputs of the given positions (into `indices`) as a `[B, C, H, W]` tensor.
    pub fn inputs(&self, positions: &[usize]) -> Tensor {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(positions.len() * n);
        for &p in positions {
            let i = self.indices[p];
            data.extend(self.features.data[i * n..(i + 1) * n].iter().map(|&v| f64::from(v)));
        }
        let [c, h, w] = self.input_shape;
        Tensor::new(vec![positions.len(), c, h, w], data).expect("shape and data agree")
    }

    pub fn all_inputs(&self) -> Tensor {
        self.inputs(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn coord(&self, p: usize) -> [f64; 3] {
        let i = self.indices[p];
        let c = &self.features.coords[i * 3..i * 3 + 3];
        [c[0].into(), c[1].into(), c[2].into()]
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|p| self.coord(p)).collect()
    }

    pub fn label(&self, p: usize) -> usize {
        usize::from(self.features.labels[self.indices[p]])
    }

    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|p| self.label(p)).collect()
    }

    /// Scene id of every given position.
    pub fn scene_of(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.scene_ids[p]).collect()
    }
}
