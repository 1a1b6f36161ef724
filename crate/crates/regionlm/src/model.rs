//! Full model composition: encoder, connectors, refiners, pooling, sequence
//! assembly, and the decoder, with gradient routing between them.
//!
//! Parameters are organized into six named groups (`vision_encoder`,
//! `rgb_connector`, `depth_connector`, `rgb_refiner`, `depth_refiner`,
//! `lm`). The encoder group carries no gradients and can never be updated;
//! the rest are toggled per curriculum stage. Image tokens entering the
//! sequence always come from the RGB connector; the depth pathway
//! contributes region embeddings only.

use ndarray::{Array2, Array3, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::connector::{ConnectCache, Connector, ConnectorGrads, TokenEmbeddings};
use crate::data::ConversationSample;
use crate::encoder::{EncoderConfig, FeatureGrid, Modality, VisionEncoder};
use crate::lm::{self, Lm, LmCache, LmConfig, LmGrads};
use crate::refiner::{
    mask_pool_dense, mask_pool_backward, PoolCache, Refiner, RefinerGrads, RegionEmbedding, KERNEL,
};
use crate::seq::{self, AssemblyPlan, EmbeddingSequence, Provenance};
use crate::ModelError;

/// The six parameter groups, in registry order.
pub const GROUPS: [&str; 6] = [
    "vision_encoder",
    "rgb_connector",
    "depth_connector",
    "rgb_refiner",
    "depth_refiner",
    "lm",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Pixel-shuffle factor shared by both connectors.
    pub connector_r: usize,
    /// Transpose-convolution layers per refiner; each doubles both sides.
    pub refiner_layers: usize,
    pub lm: LmConfig,
    /// Base seed for connector/refiner initialization.
    pub seed: u64,
}

/// Upper bound on total parameter count; keeps hostile or mistyped configs
/// from requesting arbitrarily large allocations before construction.
pub const MAX_PARAMS: u128 = 1 << 24;

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.encoder.patch == 0 || self.encoder.dim == 0 {
            return Err(ModelError::Shape("encoder patch/dim must be positive".into()));
        }
        if self.connector_r == 0 {
            return Err(ModelError::Shape("connector factor must be positive".into()));
        }
        if self.refiner_layers == 0 {
            return Err(ModelError::Shape("refiner needs at least one layer".into()));
        }
        self.lm.validate()?;
        let total = self.param_budget();
        if total > MAX_PARAMS {
            return Err(ModelError::Shape(format!(
                "configuration implies {total} parameters, budget is {MAX_PARAMS}"
            )));
        }
        Ok(())
    }

    /// Closed-form total parameter count, in u128 so hostile values cannot
    /// overflow before the budget check rejects them.
    fn param_budget(&self) -> u128 {
        let patch = self.encoder.patch as u128;
        let dim = self.encoder.dim as u128;
        let r = self.connector_r as u128;
        let layers = self.refiner_layers as u128;
        let d = self.lm.lm_dim as u128;
        let vocab = self.lm.vocab_size as u128;
        let seq = self.lm.max_seq as u128;
        let nl = self.lm.n_layers as u128;
        let ffn = d * self.lm.ffn_mult as u128;
        let encoder = patch * patch * 3 * dim;
        let connector = dim * r * r * d + d;
        let refiner = layers * (d * d * (KERNEL * KERNEL) as u128 + d);
        let block = 4 * d + 4 * (d * d + d) + d * ffn + ffn + ffn * d + d;
        let head = if self.lm.tie_head { 0 } else { vocab * d };
        encoder + 2 * connector + 2 * refiner + vocab * d + seq * d + nl * block + 2 * d + head
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: VisionEncoder,
    pub rgb_connector: Connector,
    pub depth_connector: Connector,
    pub rgb_refiner: Refiner,
    pub depth_refiner: Refiner,
    pub lm: Lm,
    /// Stage history recorded into checkpoints.
    pub provenance: Vec<String>,
}

/// Gradients for every trainable group.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub rgb_connector: ConnectorGrads,
    pub depth_connector: ConnectorGrads,
    pub rgb_refiner: RefinerGrads,
    pub depth_refiner: RefinerGrads,
    pub lm: LmGrads,
}

impl ModelGrads {
    pub fn zeros_like(m: &Model) -> Self {
        ModelGrads {
            rgb_connector: ConnectorGrads::zeros_like(&m.rgb_connector),
            depth_connector: ConnectorGrads::zeros_like(&m.depth_connector),
            rgb_refiner: RefinerGrads::zeros_like(&m.rgb_refiner),
            depth_refiner: RefinerGrads::zeros_like(&m.depth_refiner),
            lm: LmGrads::zeros_like(&m.lm),
        }
    }

    pub fn zero(&mut self) {
        for view in self.group_views_mut("rgb_connector").unwrap() {
            fill_zero(view);
        }
        for view in self.group_views_mut("depth_connector").unwrap() {
            fill_zero(view);
        }
        for view in self.group_views_mut("rgb_refiner").unwrap() {
            fill_zero(view);
        }
        for view in self.group_views_mut("depth_refiner").unwrap() {
            fill_zero(view);
        }
        for view in self.group_views_mut("lm").unwrap() {
            fill_zero(view);
        }
    }

    /// Gradient views for a group, ordered like the model's registry.
    /// `vision_encoder` has no gradients and returns `None`.
    pub fn group_views_mut(&mut self, group: &str) -> Option<Vec<ArrayViewMutD<'_, f64>>> {
        match group {
            "rgb_connector" => Some(vec![
                self.rgb_connector.weight.view_mut().into_dyn(),
                self.rgb_connector.bias.view_mut().into_dyn(),
            ]),
            "depth_connector" => Some(vec![
                self.depth_connector.weight.view_mut().into_dyn(),
                self.depth_connector.bias.view_mut().into_dyn(),
            ]),
            "rgb_refiner" => Some(
                self.rgb_refiner
                    .layers
                    .iter_mut()
                    .flat_map(|l| {
                        [l.weight.view_mut().into_dyn(), l.bias.view_mut().into_dyn()]
                    })
                    .collect(),
            ),
            "depth_refiner" => Some(
                self.depth_refiner
                    .layers
                    .iter_mut()
                    .flat_map(|l| {
                        [l.weight.view_mut().into_dyn(), l.bias.view_mut().into_dyn()]
                    })
                    .collect(),
            ),
            "lm" => Some(lm_grad_views(&mut self.lm)),
            _ => None,
        }
    }
}

fn fill_zero(mut v: ArrayViewMutD<f64>) {
    v.fill(0.0);
}

fn lm_grad_views(g: &mut LmGrads) -> Vec<ArrayViewMutD<'_, f64>> {
    let mut out = vec![g.tok_emb.view_mut().into_dyn(), g.pos_emb.view_mut().into_dyn()];
    for b in g.blocks.iter_mut() {
        out.push(b.ln1_gain.view_mut().into_dyn());
        out.push(b.ln1_bias.view_mut().into_dyn());
        out.push(b.wq.view_mut().into_dyn());
        out.push(b.wk.view_mut().into_dyn());
        out.push(b.wv.view_mut().into_dyn());
        out.push(b.wo.view_mut().into_dyn());
        out.push(b.bq.view_mut().into_dyn());
        out.push(b.bk.view_mut().into_dyn());
        out.push(b.bv.view_mut().into_dyn());
        out.push(b.bo.view_mut().into_dyn());
        out.push(b.ln2_gain.view_mut().into_dyn());
        out.push(b.ln2_bias.view_mut().into_dyn());
        out.push(b.w1.view_mut().into_dyn());
        out.push(b.b1.view_mut().into_dyn());
        out.push(b.w2.view_mut().into_dyn());
        out.push(b.b2.view_mut().into_dyn());
    }
    out.push(g.lnf_gain.view_mut().into_dyn());
    out.push(g.lnf_bias.view_mut().into_dyn());
    if let Some(h) = g.head.as_mut() {
        out.push(h.view_mut().into_dyn());
    }
    out
}

/// Cached per-sample inputs that do not depend on trainable parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub plan: AssemblyPlan,
    pub rgb_grid: Option<FeatureGrid>,
    pub depth_grid: Option<FeatureGrid>,
    /// Decoded dense masks, in binding order.
    pub masks: Vec<ndarray::Array2<u8>>,
}

/// Everything the backward pass needs from one forward run.
pub struct SampleCache {
    seq: EmbeddingSequence,
    rgb_connect: Option<ConnectCache>,
    depth_connect: Option<ConnectCache>,
    rgb_refine: Option<crate::refiner::RefineCache>,
    depth_refine: Option<crate::refiner::RefineCache>,
    rgb_refined_dim: (usize, usize, usize),
    depth_refined_dim: (usize, usize, usize),
    rgb_pools: Vec<PoolCache>,
    depth_pools: Vec<PoolCache>,
    n_vis: usize,
    lm_cache: LmCache,
    logits: Array2<f64>,
}

impl SampleCache {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn sequence(&self) -> &EmbeddingSequence {
        &self.seq
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let encoder = VisionEncoder::new(cfg.encoder.clone());
        let lm_dim = cfg.lm.lm_dim;
        let rgb_connector = Connector::new(
            Modality::Rgb,
            cfg.encoder.dim,
            cfg.connector_r,
            lm_dim,
            cfg.seed.wrapping_add(1),
        );
        let depth_connector = Connector::new(
            Modality::Depth,
            cfg.encoder.dim,
            cfg.connector_r,
            lm_dim,
            cfg.seed.wrapping_add(2),
        );
        let rgb_refiner = Refiner::new(Modality::Rgb, lm_dim, cfg.refiner_layers, cfg.seed.wrapping_add(3));
        let depth_refiner =
            Refiner::new(Modality::Depth, lm_dim, cfg.refiner_layers, cfg.seed.wrapping_add(4));
        let lm = Lm::new(cfg.lm.clone())?;
        Ok(Model {
            cfg,
            encoder,
            rgb_connector,
            depth_connector,
            rgb_refiner,
            depth_refiner,
            lm,
            provenance: Vec::new(),
        })
    }

    /// Runs the frozen encoder and token planning once per sample; the
    /// result is reusable across training steps.
    pub fn prepare(&self, sample: &ConversationSample) -> Result<Prepared, ModelError> {
        let plan = seq::plan_conversation(&sample.turns, sample.masks.len())?;
        self.prepare_with_plan(sample, plan)
    }

    /// [`Model::prepare`] for a generation prompt (gold assistant turn
    /// stripped, trailing `<|assistant|>` marker appended).
    pub fn prepare_prompt(&self, sample: &ConversationSample) -> Result<Prepared, ModelError> {
        let turns = prompt_turns(sample)?;
        let plan = seq::plan_prompt(turns, sample.masks.len())?;
        self.prepare_with_plan(sample, plan)
    }

    fn prepare_with_plan(
        &self,
        sample: &ConversationSample,
        plan: AssemblyPlan,
    ) -> Result<Prepared, ModelError> {
        let needs_rgb = plan.has_image || plan.n_masks > 0;
        let rgb_grid = if needs_rgb {
            Some(self.encoder.encode_rgb(&sample.image)?)
        } else {
            None
        };
        let depth_grid = if plan.n_masks > 0 {
            let depth = sample
                .depth
                .as_ref()
                .ok_or_else(|| ModelError::Shape("region masks require a depth input".into()))?;
            Some(self.encoder.encode_depth(depth)?)
        } else {
            None
        };
        let masks = sample
            .masks
            .iter()
            .map(|m| {
                m.decode()
                    .map_err(|e| ModelError::Shape(format!("mask decode failed: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Prepared { plan, rgb_grid, depth_grid, masks })
    }

    /// Forward pass over a prepared sample, through to logits.
    pub fn forward_prepared(&self, prep: &Prepared) -> Result<SampleCache, ModelError> {
        let mut rgb_connect = None;
        let mut depth_connect = None;
        let mut rgb_refine = None;
        let mut depth_refine = None;
        let mut rgb_refined_dim = (0, 0, 0);
        let mut depth_refined_dim = (0, 0, 0);
        let mut rgb_pools = Vec::new();
        let mut depth_pools = Vec::new();
        let mut regions: Vec<(RegionEmbedding, RegionEmbedding)> = Vec::new();
        let mut image_tokens: Option<TokenEmbeddings> = None;
        if let Some(grid) = &prep.rgb_grid {
            let (tokens, cache) = self.rgb_connector.connect(grid)?;
            rgb_connect = Some(cache);
            if prep.plan.n_masks > 0 {
                let (refined, rcache) = self.rgb_refiner.refine(&tokens)?;
                rgb_refined_dim = refined.values.dim();
                let depth_grid = prep
                    .depth_grid
                    .as_ref()
                    .ok_or_else(|| ModelError::Shape("depth grid missing for region sample".into()))?;
                let (d_tokens, d_cache) = self.depth_connector.connect(depth_grid)?;
                depth_connect = Some(d_cache);
                let (d_refined, dr_cache) = self.depth_refiner.refine(&d_tokens)?;
                depth_refined_dim = d_refined.values.dim();
                for dense in &prep.masks {
                    let (rgb_emb, rgb_pool) = mask_pool_dense(&refined, dense)?;
                    let (depth_emb, depth_pool) = mask_pool_dense(&d_refined, dense)?;
                    rgb_pools.push(rgb_pool);
                    depth_pools.push(depth_pool);
                    regions.push((rgb_emb, depth_emb));
                }
                rgb_refine = Some(rcache);
                depth_refine = Some(dr_cache);
            }
            if prep.plan.has_image {
                image_tokens = Some(tokens);
            }
        }
        let seq = seq::assemble(
            &prep.plan,
            image_tokens.as_ref(),
            &regions,
            &self.lm.tok_emb.view(),
        )?;
        let n_vis = image_tokens.as_ref().map_or(0, TokenEmbeddings::count);
        let (logits, lm_cache) = self.lm.forward(&seq.embeddings)?;
        Ok(SampleCache {
            seq,
            rgb_connect,
            depth_connect,
            rgb_refine,
            depth_refine,
            rgb_refined_dim,
            depth_refined_dim,
            rgb_pools,
            depth_pools,
            n_vis,
            lm_cache,
            logits,
        })
    }

    /// Summed cross-entropy and masked-position count for one prepared
    /// sample, with gradients accumulated into `grads`.
    pub fn loss_and_grads(
        &self,
        prep: &Prepared,
        grads: &mut ModelGrads,
    ) -> Result<(f64, usize), ModelError> {
        let cache = self.forward_prepared(prep)?;
        let (loss_sum, count) =
            lm::cross_entropy_sum(&cache.logits, &cache.seq.targets, &cache.seq.loss_mask)?;
        let d_logits =
            lm::cross_entropy_backward_sum(&cache.logits, &cache.seq.targets, &cache.seq.loss_mask)?;
        self.backward(&cache, &d_logits, grads)?;
        Ok((loss_sum, count))
    }

    /// Routes a logits gradient back through the decoder, the substitution
    /// points, the refiners, and the connectors.
    pub fn backward(
        &self,
        cache: &SampleCache,
        d_logits: &Array2<f64>,
        grads: &mut ModelGrads,
    ) -> Result<(), ModelError> {
        let d_emb = self.lm.backward(&cache.lm_cache, d_logits, &mut grads.lm)?;
        let lm_dim = self.cfg.lm.lm_dim;
        let n_masks = cache.rgb_pools.len();
        let mut d_image_tokens = Array2::zeros((cache.n_vis, lm_dim));
        let mut d_region_rgb = vec![ndarray::Array1::zeros(lm_dim); n_masks];
        let mut d_region_depth = vec![ndarray::Array1::zeros(lm_dim); n_masks];
        let mut img_row = 0usize;
        for (i, prov) in cache.seq.provenance.iter().enumerate() {
            match *prov {
                Provenance::Text => {
                    let id = cache.seq.token_ids[i].expect("text positions carry ids") as usize;
                    let mut row = grads.lm.tok_emb.row_mut(id);
                    row += &d_emb.row(i);
                }
                Provenance::ImageToken => {
                    d_image_tokens.row_mut(img_row).assign(&d_emb.row(i));
                    img_row += 1;
                }
                Provenance::RegionRgb(k) => d_region_rgb[k] += &d_emb.row(i),
                Provenance::RegionDepth(k) => d_region_depth[k] += &d_emb.row(i),
            }
        }
        // rgb pathway: refined-grid gradient from pooling, token gradient
        // from the refiner plus the image block
        let mut d_rgb_tokens: Option<Array2<f64>> = None;
        if n_masks > 0 {
            let mut d_refined = Array3::zeros(cache.rgb_refined_dim);
            for k in 0..n_masks {
                mask_pool_backward(&cache.rgb_pools[k], &d_region_rgb[k], &mut d_refined);
            }
            let rcache = cache.rgb_refine.as_ref().expect("refine cache for region sample");
            let d_tokens = self.rgb_refiner.backward(rcache, &d_refined, &mut grads.rgb_refiner)?;
            d_rgb_tokens = Some(d_tokens);
            let mut d_depth_refined = Array3::zeros(cache.depth_refined_dim);
            for k in 0..n_masks {
                mask_pool_backward(&cache.depth_pools[k], &d_region_depth[k], &mut d_depth_refined);
            }
            let dcache = cache.depth_refine.as_ref().expect("refine cache for region sample");
            let d_depth_tokens =
                self.depth_refiner
                    .backward(dcache, &d_depth_refined, &mut grads.depth_refiner)?;
            let dconnect = cache.depth_connect.as_ref().expect("connect cache for region sample");
            self.depth_connector
                .backward(dconnect, &d_depth_tokens, &mut grads.depth_connector)?;
        }
        if cache.n_vis > 0 {
            d_rgb_tokens = Some(match d_rgb_tokens {
                Some(t) => t + &d_image_tokens,
                None => d_image_tokens,
            });
        }
        if let Some(d_tokens) = d_rgb_tokens {
            let rconnect = cache.rgb_connect.as_ref().expect("connect cache when rgb ran");
            // encoder is frozen: the grid gradient stops here
            self.rgb_connector
                .backward(rconnect, &d_tokens, &mut grads.rgb_connector)?;
        }
        Ok(())
    }

    /// Greedy answer for a sample's final user question.
    pub fn generate_answer(
        &self,
        sample: &ConversationSample,
        max_new: usize,
    ) -> Result<String, ModelError> {
        let prep = self.prepare_prompt(sample)?;
        let cache_input = self.forward_prompt_embeddings(&prep)?;
        let ids = self.lm.generate(&cache_input, max_new)?;
        Ok(seq::detokenize(&ids))
    }

    /// Assembled prompt embeddings (pre-position) for generation.
    pub fn forward_prompt_embeddings(&self, prep: &Prepared) -> Result<Array2<f64>, ModelError> {
        let cache = self.forward_prepared(prep)?;
        Ok(cache.seq.embeddings)
    }

    /// Hex SHA-256 over the little-endian bytes of every parameter in a
    /// group, in registry order.
    pub fn fingerprint(&self, group: &str) -> Result<String, ModelError> {
        let views = self
            .group_views(group)
            .ok_or_else(|| ModelError::Shape(format!("unknown parameter group {group}")))?;
        let mut hasher = Sha256::new();
        for view in views {
            for &v in view.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex(&hasher.finalize()))
    }

    pub fn fingerprints(&self) -> std::collections::BTreeMap<String, String> {
        GROUPS
            .iter()
            .map(|g| ((*g).to_string(), self.fingerprint(g).expect("known group")))
            .collect()
    }

    /// Read-only parameter views for a group, in registry order.
    pub fn group_views(&self, group: &str) -> Option<Vec<ArrayViewD<'_, f64>>> {
        match group {
            "vision_encoder" => Some(vec![self.encoder.weight.view().into_dyn()]),
            "rgb_connector" => Some(vec![
                self.rgb_connector.weight.view().into_dyn(),
                self.rgb_connector.bias.view().into_dyn(),
            ]),
            "depth_connector" => Some(vec![
                self.depth_connector.weight.view().into_dyn(),
                self.depth_connector.bias.view().into_dyn(),
            ]),
            "rgb_refiner" => Some(
                self.rgb_refiner
                    .layers
                    .iter()
                    .flat_map(|l| [l.weight.view().into_dyn(), l.bias.view().into_dyn()])
                    .collect(),
            ),
            "depth_refiner" => Some(
                self.depth_refiner
                    .layers
                    .iter()
                    .flat_map(|l| [l.weight.view().into_dyn(), l.bias.view().into_dyn()])
                    .collect(),
            ),
            "lm" => {
                let l = &self.lm;
                let mut out = vec![l.tok_emb.view().into_dyn(), l.pos_emb.view().into_dyn()];
                for b in &l.blocks {
                    out.push(b.ln1.gain.view().into_dyn());
                    out.push(b.ln1.bias.view().into_dyn());
                    out.push(b.wq.view().into_dyn());
                    out.push(b.wk.view().into_dyn());
                    out.push(b.wv.view().into_dyn());
                    out.push(b.wo.view().into_dyn());
                    out.push(b.bq.view().into_dyn());
                    out.push(b.bk.view().into_dyn());
                    out.push(b.bv.view().into_dyn());
                    out.push(b.bo.view().into_dyn());
                    out.push(b.ln2.gain.view().into_dyn());
                    out.push(b.ln2.bias.view().into_dyn());
                    out.push(b.w1.view().into_dyn());
                    out.push(b.b1.view().into_dyn());
                    out.push(b.w2.view().into_dyn());
                    out.push(b.b2.view().into_dyn());
                }
                out.push(l.lnf.gain.view().into_dyn());
                out.push(l.lnf.bias.view().into_dyn());
                if let Some(h) = &l.head {
                    out.push(h.view().into_dyn());
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// Mutable parameter views for a group, in registry order.
    pub fn group_views_mut(&mut self, group: &str) -> Option<Vec<ArrayViewMutD<'_, f64>>> {
        match group {
            "vision_encoder" => Some(vec![self.encoder.weight.view_mut().into_dyn()]),
            "rgb_connector" => Some(vec![
                self.rgb_connector.weight.view_mut().into_dyn(),
                self.rgb_connector.bias.view_mut().into_dyn(),
            ]),
            "depth_connector" => Some(vec![
                self.depth_connector.weight.view_mut().into_dyn(),
                self.depth_connector.bias.view_mut().into_dyn(),
            ]),
            "rgb_refiner" => Some(
                self.rgb_refiner
                    .layers
                    .iter_mut()
                    .flat_map(|l| [l.weight.view_mut().into_dyn(), l.bias.view_mut().into_dyn()])
                    .collect(),
            ),
            "depth_refiner" => Some(
                self.depth_refiner
                    .layers
                    .iter_mut()
                    .flat_map(|l| [l.weight.view_mut().into_dyn(), l.bias.view_mut().into_dyn()])
                    .collect(),
            ),
            "lm" => {
                let l = &mut self.lm;
                let mut out = vec![l.tok_emb.view_mut().into_dyn(), l.pos_emb.view_mut().into_dyn()];
                for b in l.blocks.iter_mut() {
                    out.push(b.ln1.gain.view_mut().into_dyn());
                    out.push(b.ln1.bias.view_mut().into_dyn());
                    out.push(b.wq.view_mut().into_dyn());
                    out.push(b.wk.view_mut().into_dyn());
                    out.push(b.wv.view_mut().into_dyn());
                    out.push(b.wo.view_mut().into_dyn());
                    out.push(b.bq.view_mut().into_dyn());
                    out.push(b.bk.view_mut().into_dyn());
                    out.push(b.bv.view_mut().into_dyn());
                    out.push(b.bo.view_mut().into_dyn());
                    out.push(b.ln2.gain.view_mut().into_dyn());
                    out.push(b.ln2.bias.view_mut().into_dyn());
                    out.push(b.w1.view_mut().into_dyn());
                    out.push(b.b1.view_mut().into_dyn());
                    out.push(b.w2.view_mut().into_dyn());
                    out.push(b.b2.view_mut().into_dyn());
                }
                out.push(l.lnf.gain.view_mut().into_dyn());
                out.push(l.lnf.bias.view_mut().into_dyn());
                if let Some(h) = l.head.as_mut() {
                    out.push(h.view_mut().into_dyn());
                }
                Some(out)
            }
            _ => None,
        }
    }

    /// `(group, name, shape)` for every parameter, in registry order.
    pub fn param_manifest(&self) -> Vec<(String, String, Vec<usize>)> {
        let mut out = Vec::new();
        for group in GROUPS {
            let names = self.param_names(group);
            let views = self.group_views(group).expect("known group");
            debug_assert_eq!(names.len(), views.len());
            for (name, view) in names.into_iter().zip(views) {
                out.push((group.to_string(), name, view.shape().to_vec()));
            }
        }
        out
    }

    fn param_names(&self, group: &str) -> Vec<String> {
        match group {
            "vision_encoder" => vec!["weight".into()],
            "rgb_connector" | "depth_connector" => vec!["weight".into(), "bias".into()],
            "rgb_refiner" | "depth_refiner" => {
                let n = self.cfg.refiner_layers;
                (0..n)
                    .flat_map(|i| [format!("layers.{i}.weight"), format!("layers.{i}.bias")])
                    .collect()
            }
            "lm" => {
                let mut out = vec!["tok_emb".to_string(), "pos_emb".to_string()];
                for i in 0..self.cfg.lm.n_layers {
                    for f in [
                        "ln1.gain", "ln1.bias", "wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo",
                        "ln2.gain", "ln2.bias", "w1", "b1", "w2", "b2",
                    ] {
                        out.push(format!("blocks.{i}.{f}"));
                    }
                }
                out.push("lnf.gain".into());
                out.push("lnf.bias".into());
                if !self.cfg.lm.tie_head {
                    out.push("head".into());
                }
                out
            }
            _ => Vec::new(),
        }
    }
}

fn prompt_turns(sample: &ConversationSample) -> Result<&[crate::data::Turn], ModelError> {
    let turns = &sample.turns;
    match turns.last() {
        Some(t) if t.role == crate::data::Role::Assistant => Ok(&turns[..turns.len() - 1]),
        Some(_) => Ok(turns),
        None => Err(ModelError::RoleOrder("conversation has no turns".into())),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{central_difference, GradCheckStats, FD_STEP};
    use crate::data::{generate_toy_dataset, QuestionType, SynthConfig, ALL_CATEGORIES};
    use std::collections::BTreeSet;

    pub(crate) fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { patch: 8, dim: 12, seed: 21 },
            connector_r: 2,
            refiner_layers: 2,
            lm: LmConfig {
                lm_dim: 16,
                n_layers: 2,
                n_heads: 2,
                ffn_mult: 2,
                vocab_size: seq::VOCAB_SIZE,
                max_seq: 256,
                seed: 22,
                tie_head: true,
            },
            seed: 23,
        }
    }

    fn sample_set(n: usize) -> Vec<crate::data::ConversationSample> {
        let cats: BTreeSet<QuestionType> = ALL_CATEGORIES.iter().copied().collect();
        generate_toy_dataset(41, n, &cats, &SynthConfig::default()).unwrap()
    }

    #[test]
    fn param_budget_matches_construction() {
        for tie in [true, false] {
            let mut cfg = tiny_model_config();
            cfg.lm.tie_head = tie;
            let model = Model::new(cfg.clone()).unwrap();
            let built: usize = GROUPS
                .iter()
                .map(|g| {
                    model.group_views(g).unwrap().iter().map(|v| v.len()).sum::<usize>()
                })
                .sum();
            assert_eq!(cfg.param_budget(), built as u128, "tie_head={tie}");
        }
    }

    #[test]
    fn oversized_configs_are_rejected() {
        let mut cfg = tiny_model_config();
        cfg.lm.max_seq = usize::MAX / 2;
        let err = Model::new(cfg).unwrap_err();
        assert!(err.to_string().contains("budget"), "{err}");
    }

    #[test]
    fn forward_produces_finite_loss() {
        let model = Model::new(tiny_model_config()).unwrap();
        for sample in sample_set(4) {
            let prep = model.prepare(&sample).unwrap();
            let cache = model.forward_prepared(&prep).unwrap();
            let l = lm::loss(cache.logits(), &cache.sequence().targets, &cache.sequence().loss_mask)
                .unwrap();
            assert!(l.is_finite() && l > 0.0);
        }
    }

    #[test]
    fn fingerprints_are_stable_and_distinct() {
        let m1 = Model::new(tiny_model_config()).unwrap();
        let m2 = Model::new(tiny_model_config()).unwrap();
        for g in GROUPS {
            assert_eq!(m1.fingerprint(g).unwrap(), m2.fingerprint(g).unwrap());
        }
        let mut m3 = Model::new(tiny_model_config()).unwrap();
        m3.rgb_connector.weight[(0, 0)] += 1e-9;
        assert_ne!(
            m1.fingerprint("rgb_connector").unwrap(),
            m3.fingerprint("rgb_connector").unwrap()
        );
        assert_eq!(m1.fingerprint("lm").unwrap(), m3.fingerprint("lm").unwrap());
    }

    #[test]
    fn manifest_covers_all_views() {
        let m = Model::new(tiny_model_config()).unwrap();
        let manifest = m.param_manifest();
        let total_from_views: usize = GROUPS
            .iter()
            .flat_map(|g| m.group_views(g).unwrap())
            .map(|v| v.len())
            .sum();
        let total_from_manifest: usize =
            manifest.iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
        assert_eq!(total_from_views, total_from_manifest);
        // six groups present
        let groups: BTreeSet<&str> = manifest.iter().map(|(g, _, _)| g.as_str()).collect();
        assert_eq!(groups.len(), 6);
    }

    #[test]
    fn generation_is_deterministic() {
        let model = Model::new(tiny_model_config()).unwrap();
        let sample = &sample_set(1)[0];
        let a = model.generate_answer(sample, 8).unwrap();
        let b = model.generate_answer(sample, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let model = Model::new(tiny_model_config()).unwrap();
        let sample = &sample_set(2)[1];
        let prep = model.prepare(sample).unwrap();
        let mut grads = ModelGrads::zeros_like(&model);
        model.loss_and_grads(&prep, &mut grads).unwrap();
        let eval = |m: &Model| {
            let cache = m.forward_prepared(&prep).unwrap();
            lm::cross_entropy_sum(cache.logits(), &cache.seq.targets, &cache.seq.loss_mask)
                .unwrap()
                .0
        };
        let mut stats = GradCheckStats::default();
        let mut model = model;
        // a few slots from every trainable tensor family
        let probes: Vec<(&str, usize, usize)> = vec![
            ("rgb_connector", 0, 0),
            ("rgb_connector", 0, 17),
            ("rgb_connector", 1, 3),
            ("depth_connector", 0, 5),
            ("depth_connector", 1, 1),
            ("rgb_refiner", 0, 40),
            ("rgb_refiner", 1, 2),
            ("rgb_refiner", 2, 11),
            ("depth_refiner", 0, 8),
            ("depth_refiner", 3, 0),
            ("lm", 0, 500),
            ("lm", 1, 40),
            ("lm", 4, 33),
            ("lm", 14, 20),
            ("lm", 34, 6),
        ];
        for (group, tensor_idx, flat_idx) in probes {
            let analytic = {
                let gviews = grads.group_views_mut(group).unwrap();
                *gviews[tensor_idx].as_slice().unwrap().get(flat_idx).unwrap()
            };
            let orig = {
                let mut views = model.group_views_mut(group).unwrap();
                let slice = views[tensor_idx].as_slice_mut().unwrap();
                let v = slice[flat_idx];
                slice[flat_idx] = v + FD_STEP;
                v
            };
            let fp = eval(&model);
            {
                let mut views = model.group_views_mut(group).unwrap();
                views[tensor_idx].as_slice_mut().unwrap()[flat_idx] = orig - FD_STEP;
            }
            let fm = eval(&model);
            {
                let mut views = model.group_views_mut(group).unwrap();
                views[tensor_idx].as_slice_mut().unwrap()[flat_idx] = orig;
            }
            stats.record(analytic, central_difference(fp, fm, FD_STEP));
        }
        assert!(
            stats.ok(),
            "worst rel err {} (analytic {} vs numeric {})",
            stats.max_rel_err,
            stats.worst_analytic,
            stats.worst_numeric
        );
    }

    #[test]
    fn text_only_sample_skips_vision_path() {
        let model = Model::new(tiny_model_config()).unwrap();
        let sample = crate::data::ConversationSample {
            sample_id: "text-only".into(),
            image: ndarray::Array3::from_elem((32, 32, 3), 0.2),
            depth: None,
            masks: vec![],
            turns: vec![
                crate::data::Turn { role: crate::data::Role::User, text: "hello?".into() },
                crate::data::Turn { role: crate::data::Role::Assistant, text: "hi.".into() },
            ],
            category: None,
        };
        sample.validate().unwrap();
        let prep = model.prepare(&sample).unwrap();
        assert!(prep.rgb_grid.is_none());
        let mut grads = ModelGrads::zeros_like(&model);
        let (l, n) = model.loss_and_grads(&prep, &mut grads).unwrap();
        assert!(l.is_finite() && n > 0);
        let conn_grad: f64 = grads.rgb_connector.weight.iter().map(|v| v.abs()).sum();
        assert_eq!(conn_grad, 0.0);
    }
}
