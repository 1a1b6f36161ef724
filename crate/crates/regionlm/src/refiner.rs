//! Mask refiners: transpose-convolution stacks that upsample connector
//! tokens back toward mask resolution, plus mask pooling.
//!
//! Every layer uses kernel 4, stride 2, padding 1, doubling each spatial
//! side. ReLU sits between layers but not after the last. Pooling averages
//! refined cells selected by a nearest-neighbor resampled region mask.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::connector::TokenEmbeddings;
use crate::data::RegionMask;
use crate::encoder::{FeatureGrid, Modality};
use crate::ModelError;

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;

/// One embedding summarizing a region under one modality.
#[derive(Debug, Clone)]
pub struct RegionEmbedding {
    pub modality: Modality,
    pub values: Array1<f64>,
}

/// Single transpose-convolution layer. Weight layout `(c_in, c_out, ky, kx)`.
#[derive(Debug, Clone)]
pub struct ConvT2d {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvTGrads {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvT2d {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha20Rng) -> Self {
        let dist = Normal::new(0.0, 1.0 / ((c_in * KERNEL * KERNEL) as f64).sqrt())
            .expect("finite std");
        ConvT2d {
            weight: Array4::from_shape_fn((c_in, c_out, KERNEL, KERNEL), |_| dist.sample(rng)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().0
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().1
    }

    /// Upsamples `(h, w, c_in)` to `(2h, 2w, c_out)`.
    pub fn forward(&self, input: &Array3<f64>) -> Result<Array3<f64>, ModelError> {
        let (h, w, c_in) = input.dim();
        if c_in != self.c_in() {
            return Err(ModelError::Shape(format!(
                "input has {c_in} channels, layer expects {}",
                self.c_in()
            )));
        }
        if h == 0 || w == 0 {
            return Err(ModelError::Shape("empty spatial grid".into()));
        }
        let c_out = self.c_out();
        let (oh, ow) = (h * STRIDE, w * STRIDE);
        // one gemm for all cells, then scatter into the upsampled grid
        let flat = input
            .to_shape((h * w, c_in))
            .expect("contiguous row-major input")
            .to_owned();
        let wf = self
            .weight
            .view()
            .into_shape_with_order((c_in, c_out * KERNEL * KERNEL))
            .expect("contiguous weight");
        let cols = flat.dot(&wf);
        let mut out = Array3::zeros((oh, ow, c_out));
        for y in 0..oh {
            for x in 0..ow {
                for o in 0..c_out {
                    out[(y, x, o)] = self.bias[o];
                }
            }
        }
        for i in 0..h {
            for j in 0..w {
                let row = i * w + j;
                for ky in 0..KERNEL {
                    let y = (i * STRIDE + ky).wrapping_sub(PADDING);
                    if y >= oh {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let x = (j * STRIDE + kx).wrapping_sub(PADDING);
                        if x >= ow {
                            continue;
                        }
                        for o in 0..c_out {
                            out[(y, x, o)] += cols[(row, o * KERNEL * KERNEL + ky * KERNEL + kx)];
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(
        &self,
        input: &Array3<f64>,
        d_out: &Array3<f64>,
        grads: &mut ConvTGrads,
    ) -> Result<Array3<f64>, ModelError> {
        let (h, w, c_in) = input.dim();
        let c_out = self.c_out();
        let (oh, ow) = (h * STRIDE, w * STRIDE);
        if d_out.dim() != (oh, ow, c_out) {
            return Err(ModelError::Shape(format!(
                "output gradient shape {:?} does not match ({oh}, {ow}, {c_out})",
                d_out.dim()
            )));
        }
        let mut d_cols = Array2::zeros((h * w, c_out * KERNEL * KERNEL));
        for i in 0..h {
            for j in 0..w {
                let row = i * w + j;
                for ky in 0..KERNEL {
                    let y = (i * STRIDE + ky).wrapping_sub(PADDING);
                    if y >= oh {
                        continue;
                    }
                    for kx in 0..KERNEL {
                        let x = (j * STRIDE + kx).wrapping_sub(PADDING);
                        if x >= ow {
                            continue;
                        }
                        for o in 0..c_out {
                            d_cols[(row, o * KERNEL * KERNEL + ky * KERNEL + kx)] = d_out[(y, x, o)];
                        }
                    }
                }
            }
        }
        let flat = input
            .to_shape((h * w, c_in))
            .expect("contiguous row-major input")
            .to_owned();
        let wf = self
            .weight
            .view()
            .into_shape_with_order((c_in, c_out * KERNEL * KERNEL))
            .expect("contiguous weight");
        let d_wf = flat.t().dot(&d_cols);
        grads.weight += &d_wf
            .into_shape_with_order((c_in, c_out, KERNEL, KERNEL))
            .expect("gradient reshape");
        grads.bias += &d_out.sum_axis(Axis(0)).sum_axis(Axis(0));
        let d_flat = d_cols.dot(&wf.t());
        Ok(d_flat
            .into_shape_with_order((h, w, c_in))
            .expect("gradient reshape"))
    }
}

/// Transpose-convolution stack for one modality.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub modality: Modality,
    pub layers: Vec<ConvT2d>,
}

/// Forward activations saved for the backward pass.
#[derive(Debug, Clone)]
pub struct RefineCache {
    /// Input to each convolution layer.
    inputs: Vec<Array3<f64>>,
    /// Pre-activation output of each layer except the last.
    preacts: Vec<Array3<f64>>,
    grid_shape: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct RefinerGrads {
    pub layers: Vec<ConvTGrads>,
}

impl RefinerGrads {
    pub fn zeros_like(r: &Refiner) -> Self {
        RefinerGrads {
            layers: r
                .layers
                .iter()
                .map(|l| ConvTGrads {
                    weight: Array4::zeros(l.weight.dim()),
                    bias: Array1::zeros(l.bias.dim()),
                })
                .collect(),
        }
    }
}

impl Refiner {
    /// Builds `n_layers` uniform-width layers; each doubles both sides.
    pub fn new(modality: Modality, dim: usize, n_layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Refiner {
            modality,
            layers: (0..n_layers).map(|_| ConvT2d::new(dim, dim, &mut rng)).collect(),
        }
    }

    pub fn upsample_factor(&self) -> usize {
        1 << self.layers.len()
    }

    /// Upsamples a token grid by `2^layers` per side.
    pub fn refine(&self, tokens: &TokenEmbeddings) -> Result<(FeatureGrid, RefineCache), ModelError> {
        if tokens.modality != self.modality {
            return Err(ModelError::ModalityMismatch(format!(
                "{} tokens fed to {} refiner",
                tokens.modality.as_str(),
                self.modality.as_str()
            )));
        }
        let (gh, gw) = tokens.grid_shape;
        if gh == 0 || gw == 0 || gh * gw != tokens.values.nrows() {
            return Err(ModelError::Shape(format!(
                "token grid {:?} inconsistent with {} rows",
                tokens.grid_shape,
                tokens.values.nrows()
            )));
        }
        if self.layers.is_empty() {
            return Err(ModelError::Shape("refiner has no layers".into()));
        }
        let mut x = tokens
            .values
            .to_shape((gh, gw, tokens.values.ncols()))
            .expect("contiguous row-major tokens")
            .to_owned();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len().saturating_sub(1));
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(x.clone());
            let z = layer.forward(&x)?;
            if i < last {
                preacts.push(z.clone());
                x = z.mapv(|v| v.max(0.0));
            } else {
                x = z;
            }
        }
        let cache = RefineCache { inputs, preacts, grid_shape: (gh, gw) };
        Ok((FeatureGrid { modality: self.modality, values: x }, cache))
    }

    /// Propagates a refined-grid gradient back to token space.
    pub fn backward(
        &self,
        cache: &RefineCache,
        d_refined: &Array3<f64>,
        grads: &mut RefinerGrads,
    ) -> Result<Array2<f64>, ModelError> {
        let mut d = d_refined.clone();
        for i in (0..self.layers.len()).rev() {
            let d_in = self.layers[i].backward(&cache.inputs[i], &d, &mut grads.layers[i])?;
            d = if i > 0 {
                let relu_gate = cache.preacts[i - 1].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                d_in * relu_gate
            } else {
                d_in
            };
        }
        let (gh, gw) = cache.grid_shape;
        let c = d.dim().2;
        Ok(d
            .into_shape_with_order((gh * gw, c))
            .expect("contiguous gradient"))
    }
}

/// Nearest-neighbor resampling of a dense mask to a target grid resolution.
/// Cell `(gy, gx)` samples the source at the center of its footprint.
pub fn resample_nearest(mask: &Array2<u8>, gh: usize, gw: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((gh, gw), |(gy, gx)| {
        let sy = ((gy as f64 + 0.5) * h as f64 / gh as f64).floor() as usize;
        let sx = ((gx as f64 + 0.5) * w as f64 / gw as f64).floor() as usize;
        mask[(sy.min(h - 1), sx.min(w - 1))]
    })
}

/// Cells selected during pooling, for the backward pass.
#[derive(Debug, Clone)]
pub struct PoolCache {
    pub cells: Vec<(usize, usize)>,
}

/// Averages refined-grid cells under the resampled mask.
pub fn mask_pool(
    refined: &FeatureGrid,
    mask: &RegionMask,
) -> Result<(RegionEmbedding, PoolCache), ModelError> {
    let dense = mask
        .decode()
        .map_err(|e| ModelError::Shape(format!("mask decode failed: {e}")))?;
    mask_pool_dense(refined, &dense)
}

/// [`mask_pool`] over an already decoded mask.
pub fn mask_pool_dense(
    refined: &FeatureGrid,
    dense: &Array2<u8>,
) -> Result<(RegionEmbedding, PoolCache), ModelError> {
    let (gh, gw, dim) = refined.values.dim();
    if gh == 0 || gw == 0 {
        return Err(ModelError::Shape("empty refined grid".into()));
    }
    let resampled = resample_nearest(dense, gh, gw);
    let cells: Vec<(usize, usize)> = (0..gh)
        .flat_map(|y| (0..gw).map(move |x| (y, x)))
        .filter(|&(y, x)| resampled[(y, x)] != 0)
        .collect();
    if cells.is_empty() {
        return Err(ModelError::EmptyRegion { h: gh, w: gw });
    }
    let mut sum = Array1::zeros(dim);
    for &(y, x) in &cells {
        sum += &refined.values.slice(ndarray::s![y, x, ..]);
    }
    let n = cells.len() as f64;
    Ok((
        RegionEmbedding { modality: refined.modality, values: sum / n },
        PoolCache { cells },
    ))
}

/// Scatters a region-embedding gradient back onto the refined grid.
pub fn mask_pool_backward(cache: &PoolCache, d_emb: &Array1<f64>, d_refined: &mut Array3<f64>) {
    let n = cache.cells.len() as f64;
    let share = d_emb / n;
    for &(y, x) in &cache.cells {
        let mut cell = d_refined.slice_mut(ndarray::s![y, x, ..]);
        cell += &share;
    }
}
