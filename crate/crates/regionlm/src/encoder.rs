//! Frozen toy vision encoder.
//!
//! Stands in for a pretrained patch encoder: the image is cut into square
//! patches, each patch is flattened, and a fixed random linear map (seeded,
//! never trained) projects it to the feature dimension. Depth maps are
//! min-max normalized and replicated to three channels first, so both
//! modalities share one weight matrix.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// Feature pathway tag carried through connectors and refiners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }
}

/// Patch-feature grid, `(grid_h, grid_w, dim)`.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub modality: Modality,
    pub values: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Patch edge length in pixels; image dims must be divisible by it.
    pub patch: usize,
    /// Output feature dimension per patch.
    pub dim: usize,
    /// Seed for the fixed random projection.
    pub seed: u64,
}

/// Frozen patch encoder. The projection weight is generated once from the
/// seed and never updated by training.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    /// `(patch * patch * 3, dim)` projection.
    pub weight: Array2<f64>,
}

impl VisionEncoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        let in_dim = cfg.patch * cfg.patch * 3;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let dist = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("finite std");
        let weight = Array2::from_shape_fn((in_dim, cfg.dim), |_| dist.sample(&mut rng));
        VisionEncoder { cfg, weight }
    }

    fn encode_patches(&self, planes: &Array3<f64>, modality: Modality) -> Result<FeatureGrid, ModelError> {
        let (h, w, c) = planes.dim();
        let p = self.cfg.patch;
        if c != 3 {
            return Err(ModelError::Shape(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(ModelError::Shape(format!(
                "image dims ({h}, {w}) not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let mut out = Array3::zeros((gh, gw, self.cfg.dim));
        let mut flat = Array2::zeros((1, p * p * 3));
        for gy in 0..gh {
            for gx in 0..gw {
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..3 {
                            flat[(0, k)] = planes[(gy * p + dy, gx * p + dx, ch)];
                            k += 1;
                        }
                    }
                }
                let projected = flat.dot(&self.weight);
                out.slice_mut(ndarray::s![gy, gx, ..]).assign(&projected.row(0));
            }
        }
        Ok(FeatureGrid { modality, values: out })
    }

    /// Encodes an RGB image with values in `[0, 1]`.
    pub fn encode_rgb(&self, image: &Array3<f64>) -> Result<FeatureGrid, ModelError> {
        self.encode_patches(image, Modality::Rgb)
    }

    /// Encodes a metric depth map by min-max normalizing to `[0, 1]` and
    /// replicating to three channels. A constant map normalizes to all
    /// zeros.
    pub fn encode_depth(&self, depth: &Array2<f64>) -> Result<FeatureGrid, ModelError> {
        let (h, w) = depth.dim();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in depth.iter() {
            if !v.is_finite() {
                return Err(ModelError::NonFiniteInput(format!("depth value {v}")));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        let mut planes = Array3::zeros((h, w, 3));
        if range > 0.0 {
            for y in 0..h {
                for x in 0..w {
                    let v = (depth[(y, x)] - lo) / range;
                    for c in 0..3 {
                        planes[(y, x, c)] = v;
                    }
                }
            }
        }
        self.encode_patches(&planes, Modality::Depth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> VisionEncoder {
        VisionEncoder::new(EncoderConfig { patch: 2, dim: 5, seed: 9 })
    }

    #[test]
    fn grid_shape_follows_patching() {
        let img = Array3::from_elem((4, 6, 3), 0.3);
        let grid = enc().encode_rgb(&img).unwrap();
        assert_eq!(grid.values.dim(), (2, 3, 5));
        assert_eq!(grid.modality, Modality::Rgb);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let img = Array3::from_elem((5, 4, 3), 0.3);
        assert!(matches!(enc().encode_rgb(&img), Err(ModelError::Shape(_))));
    }

    #[test]
    fn same_seed_same_features() {
        let img = Array3::from_shape_fn((4, 4, 3), |(y, x, c)| (y + x + c) as f64 / 10.0);
        let a = enc().encode_rgb(&img).unwrap();
        let b = enc().encode_rgb(&img).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn constant_depth_encodes_zero_plane() {
        let e = enc();
        let depth = Array2::from_elem((4, 4), 2.5);
        let grid = e.encode_depth(&depth).unwrap();
        let zero_grid = e.encode_rgb(&Array3::zeros((4, 4, 3))).unwrap();
        assert_eq!(grid.values, zero_grid.values);
        assert_eq!(grid.modality, Modality::Depth);
    }

    #[test]
    fn depth_normalization_is_scale_invariant() {
        let d1 = Array2::from_shape_fn((4, 4), |(y, x)| 1.0 + (y * 4 + x) as f64);
        let d2 = d1.mapv(|v| v * 3.0 + 10.0);
        let e = enc();
        let g1 = e.encode_depth(&d1).unwrap();
        let g2 = e.encode_depth(&d2).unwrap();
        for (a, b) in g1.values.iter().zip(g2.values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_depth_rejected() {
        let mut depth = Array2::from_elem((4, 4), 1.0);
        depth[(0, 0)] = f64::NAN;
        assert!(matches!(enc().encode_depth(&depth), Err(ModelError::NonFiniteInput(_))));
    }
}
