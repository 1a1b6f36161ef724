//! Modality connectors: pixel shuffle plus a trainable linear projection.
//!
//! Pixel shuffle trades spatial extent for channel depth. For factor `r`,
//! `output[i][j][(di * r + dj) * dim + c] = input[i * r + di][j * r + dj][c]`,
//! shrinking an `(h, w, dim)` grid to `(h / r, w / r, dim * r * r)`. The
//! connector then flattens the shuffled grid row-major and projects each cell
//! to the language-model width.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{FeatureGrid, Modality};
use crate::ModelError;

/// Language-model-ready token grid produced by a connector.
#[derive(Debug, Clone)]
pub struct TokenEmbeddings {
    pub modality: Modality,
    /// `(grid_h * grid_w, lm_dim)`, rows in row-major grid order.
    pub values: Array2<f64>,
    pub grid_shape: (usize, usize),
}

impl TokenEmbeddings {
    pub fn count(&self) -> usize {
        self.values.nrows()
    }
}

fn check_factor(grid: &FeatureGrid, r: usize) -> Result<(usize, usize, usize), ModelError> {
    let (h, w, dim) = grid.values.dim();
    if r == 0 {
        return Err(ModelError::Shape("shuffle factor must be positive".into()));
    }
    if h == 0 || w == 0 || h % r != 0 || w % r != 0 {
        return Err(ModelError::IndivisibleFactor { h, w, r });
    }
    Ok((h, w, dim))
}

/// Space-to-depth rearrangement by factor `r`.
pub fn pixel_shuffle(grid: &FeatureGrid, r: usize) -> Result<FeatureGrid, ModelError> {
    let (h, w, dim) = check_factor(grid, r)?;
    let (oh, ow) = (h / r, w / r);
    let mut out = Array3::zeros((oh, ow, dim * r * r));
    for i in 0..oh {
        for j in 0..ow {
            for di in 0..r {
                for dj in 0..r {
                    for c in 0..dim {
                        out[(i, j, (di * r + dj) * dim + c)] = grid.values[(i * r + di, j * r + dj, c)];
                    }
                }
            }
        }
    }
    Ok(FeatureGrid { modality: grid.modality, values: out })
}

/// Depth-to-space inverse of [`pixel_shuffle`] with the same factor.
pub fn pixel_unshuffle(grid: &FeatureGrid, r: usize) -> Result<FeatureGrid, ModelError> {
    let (h, w, packed) = grid.values.dim();
    if r == 0 {
        return Err(ModelError::Shape("shuffle factor must be positive".into()));
    }
    if packed % (r * r) != 0 {
        return Err(ModelError::IndivisibleChannels { channels: packed, divisor: r * r });
    }
    let dim = packed / (r * r);
    let mut out = Array3::zeros((h * r, w * r, dim));
    for i in 0..h {
        for j in 0..w {
            for di in 0..r {
                for dj in 0..r {
                    for c in 0..dim {
                        out[(i * r + di, j * r + dj, c)] = grid.values[(i, j, (di * r + dj) * dim + c)];
                    }
                }
            }
        }
    }
    Ok(FeatureGrid { modality: grid.modality, values: out })
}

/// Trainable projection from shuffled encoder features to LM tokens. One
/// connector exists per modality and refuses grids from the other pathway.
#[derive(Debug, Clone)]
pub struct Connector {
    pub modality: Modality,
    pub r: usize,
    /// `(encoder_dim * r * r, lm_dim)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Saved forward activations needed by [`Connector::backward`].
#[derive(Debug, Clone)]
pub struct ConnectCache {
    /// Shuffled grid flattened row-major, `(cells, encoder_dim * r * r)`.
    flat: Array2<f64>,
    grid_shape: (usize, usize),
}

/// Parameter gradients mirroring [`Connector`].
#[derive(Debug, Clone)]
pub struct ConnectorGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConnectorGrads {
    pub fn zeros_like(c: &Connector) -> Self {
        ConnectorGrads {
            weight: Array2::zeros(c.weight.dim()),
            bias: Array1::zeros(c.bias.dim()),
        }
    }
}

impl Connector {
    pub fn new(modality: Modality, encoder_dim: usize, r: usize, lm_dim: usize, seed: u64) -> Self {
        let in_dim = encoder_dim * r * r;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).expect("finite std");
        Connector {
            modality,
            r,
            weight: Array2::from_shape_fn((in_dim, lm_dim), |_| dist.sample(&mut rng)),
            bias: Array1::zeros(lm_dim),
        }
    }

    /// Shuffles, flattens, and projects a feature grid into LM tokens.
    pub fn connect(&self, grid: &FeatureGrid) -> Result<(TokenEmbeddings, ConnectCache), ModelError> {
        if grid.modality != self.modality {
            return Err(ModelError::ModalityMismatch(format!(
                "{} grid fed to {} connector",
                grid.modality.as_str(),
                self.modality.as_str()
            )));
        }
        let shuffled = pixel_shuffle(grid, self.r)?;
        let (sh, sw, packed) = shuffled.values.dim();
        if packed != self.weight.nrows() {
            return Err(ModelError::Shape(format!(
                "shuffled channel count {packed} does not match connector input {}",
                self.weight.nrows()
            )));
        }
        let flat = shuffled
            .values
            .into_shape_with_order((sh * sw, packed))
            .expect("contiguous row-major grid");
        let values = flat.dot(&self.weight) + &self.bias;
        let tokens = TokenEmbeddings {
            modality: self.modality,
            values,
            grid_shape: (sh, sw),
        };
        let cache = ConnectCache { flat, grid_shape: (sh, sw) };
        Ok((tokens, cache))
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input feature grid.
    pub fn backward(
        &self,
        cache: &ConnectCache,
        d_tokens: &Array2<f64>,
        grads: &mut ConnectorGrads,
    ) -> Result<FeatureGrid, ModelError> {
        if d_tokens.dim() != (cache.flat.nrows(), self.weight.ncols()) {
            return Err(ModelError::Shape(format!(
                "token gradient shape {:?} does not match ({}, {})",
                d_tokens.dim(),
                cache.flat.nrows(),
                self.weight.ncols()
            )));
        }
        grads.weight += &cache.flat.t().dot(d_tokens);
        grads.bias += &d_tokens.sum_axis(ndarray::Axis(0));
        let d_flat = d_tokens.dot(&self.weight.t());
        let (sh, sw) = cache.grid_shape;
        let packed = self.weight.nrows();
        let d_shuffled = FeatureGrid {
            modality: self.modality,
            values: d_flat
                .into_shape_with_order((sh, sw, packed))
                .expect("contiguous row-major gradient"),
        };
        pixel_unshuffle(&d_shuffled, self.r)
    }
}
