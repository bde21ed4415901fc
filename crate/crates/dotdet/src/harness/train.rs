//! The training loop, combined objective, and analytic gradients.
//!
//! Per batch the order is fixed: adaptive augmentation, feature
//! extraction, stabilizer EMA updates, context EMA updates, then the loss
//! with every EMA reference frozen. Gradients flow through the raw
//! embeddings and pooled contexts only — references are constants — and
//! parameters move by plain SGD. Runs are bit-reproducible from
//! `(dataset, config)`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, derive_params, apply_augmentation, AugGains, NoiseSeed};
use crate::context::{expand_box, roi_pool_weights, BBox, ContextState, PoolWeights};
use crate::error::{Error, Result};
use crate::harness::model::{extract_full, FeatureExtraction, ModelParams, PredictOptions};
use crate::rng;
use crate::scenegen::{Annotation, DatasetItem};
use crate::stabilize::{Embedding, EmbeddingGroup, StabilizerState};
use crate::stats::{local_stats, EmaScalarPair, ImageBuffer};

/// Which boxes feed contextual refinement during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrBoxSource {
    /// Teacher forcing: ground-truth boxes.
    GroundTruth,
    /// Cells currently scoring above the prediction threshold.
    Predicted,
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weights of the cluster / stack / context consistency terms, each
    /// in `[0.1, 1.0]`.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Component toggles: adaptive augmentation, embedding stabilization,
    /// contextual refinement.
    pub use_aa: bool,
    pub use_es: bool,
    pub use_cr: bool,
    /// EMA smoothing shared by every reference, in `[0.01, 0.1]`.
    pub rho: f64,
    /// Spatial grouping threshold in pixels, in `[20, 100]`.
    pub delta: f64,
    /// Context box expansion factor, in `[0.1, 0.5]`.
    pub gamma: f64,
    /// Cluster-vs-global balance inside the clustering loss, `[0.5, 2.0]`.
    pub lambda: f64,
    pub gains: AugGains,
    pub embed_dim: usize,
    pub patch: usize,
    /// Context pooling grid; the context embedding has
    /// `embed_dim * roi_grid^2` components.
    pub roi_grid: usize,
    pub cr_boxes: CrBoxSource,
    pub predict: PredictOptions,
    pub seed: u64,
    /// Skip the published hyperparameter intervals (still requires basic
    /// sanity such as positive rates).
    #[serde(default)]
    pub allow_unsafe_ranges: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            learning_rate: 2.0,
            lambda1: 0.2,
            lambda2: 0.2,
            lambda3: 0.2,
            use_aa: false,
            use_es: false,
            use_cr: false,
            rho: 0.05,
            delta: 24.0,
            gamma: 0.3,
            lambda: 1.0,
            gains: AugGains::default(),
            embed_dim: 16,
            patch: 8,
            roi_grid: 2,
            cr_boxes: CrBoxSource::GroundTruth,
            predict: PredictOptions::default(),
            seed: 0,
            allow_unsafe_ranges: false,
        }
    }
}

impl TrainConfig {
    pub fn context_dim(&self) -> usize {
        self.embed_dim * self.roi_grid * self.roi_grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.embed_dim == 0 || self.roi_grid == 0 {
            return Err(Error::Config("embed_dim and roi_grid must be positive".into()));
        }
        if self.patch < 2 {
            return Err(Error::Config("patch must be at least 2 pixels".into()));
        }
        if !self.allow_unsafe_ranges {
            for (name, v) in [
                ("lambda1", self.lambda1),
                ("lambda2", self.lambda2),
                ("lambda3", self.lambda3),
            ] {
                if !(0.1..=1.0).contains(&v) {
                    return Err(Error::Config(format!("{name} {v} outside [0.1, 1.0]")));
                }
            }
        }
        // The state constructors check rho/delta/gamma/lambda/gains.
        TrainerState::new(self).map(|_| ())
    }

    /// Stable hex fingerprint of the full configuration.
    pub fn fingerprint(&self) -> String {
        let encoded = serde_json::to_vec(self).expect("config serializes");
        format!("{:016x}", rng::fnv1a64(&encoded))
    }
}

/// The three EMA state bundles owned by a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub aug: EmaScalarPair,
    pub stab: StabilizerState,
    pub ctx: ContextState,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        if cfg.allow_unsafe_ranges {
            Ok(Self {
                aug: EmaScalarPair::new_lenient(cfg.rho)?,
                stab: StabilizerState::new_lenient(cfg.rho, cfg.lambda, cfg.delta)?,
                ctx: ContextState::new_lenient(cfg.rho, cfg.gamma)?,
            })
        } else {
            AugGains::new(cfg.gains.k1, cfg.gains.k2, cfg.gains.k3)?;
            Ok(Self {
                aug: EmaScalarPair::new(cfg.rho)?,
                stab: StabilizerState::new(cfg.rho, cfg.lambda, cfg.delta)?,
                ctx: ContextState::new(cfg.rho, cfg.gamma)?,
            })
        }
    }
}

/// The six loss terms plus their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Classification term; identically zero for the single-class task
    /// but kept in the breakdown so the objective reads in full.
    pub cls: f64,
    pub bbox: f64,
    pub obj: f64,
    pub cluster: f64,
    pub stack: f64,
    pub context: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finalize(mut self, cfg: &TrainConfig) -> Self {
        self.total = self.cls
            + self.bbox
            + self.obj
            + cfg.lambda1 * self.cluster
            + cfg.lambda2 * self.stack
            + cfg.lambda3 * self.context;
        self
    }
}

/// Gradient accumulator shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub proj: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub obj_w: Vec<f64>,
    pub obj_b: f64,
    pub merged_w: Vec<f64>,
    pub merged_b: f64,
    pub off_w: Vec<f64>,
    pub off_b: [f64; 2],
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            proj: vec![0.0; params.proj.len()],
            proj_bias: vec![0.0; params.proj_bias.len()],
            obj_w: vec![0.0; params.obj_w.len()],
            obj_b: 0.0,
            merged_w: vec![0.0; params.merged_w.len()],
            merged_b: 0.0,
            off_w: vec![0.0; params.off_w.len()],
            off_b: [0.0, 0.0],
        }
    }
}

/// One SGD step: `theta -= lr * grad`.
pub fn apply_sgd(params: &mut ModelParams, grads: &Gradients, lr: f64) {
    let step = |p: &mut [f64], g: &[f64]| {
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= lr * gv;
        }
    };
    step(&mut params.proj, &grads.proj);
    step(&mut params.proj_bias, &grads.proj_bias);
    step(&mut params.obj_w, &grads.obj_w);
    params.obj_b -= lr * grads.obj_b;
    step(&mut params.merged_w, &grads.merged_w);
    params.merged_b -= lr * grads.merged_b;
    step(&mut params.off_w, &grads.off_w);
    params.off_b[0] -= lr * grads.off_b[0];
    params.off_b[1] -= lr * grads.off_b[1];
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable binary cross-entropy on a logit.
fn bce(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Per-image precomputation shared by state updates and the loss.
struct ImagePrep {
    extraction: FeatureExtraction,
    /// Positive cells: `(cell index, target offset in patch units)`.
    positives: Vec<(usize, (f64, f64))>,
    /// Embeddings at positive cells (the stabilizer's inputs) and their
    /// single-link groups under the configured delta.
    es_embeddings: Vec<Embedding>,
    es_groups: Vec<EmbeddingGroup>,
    /// Cell index behind each entry of `es_embeddings`.
    es_cells: Vec<usize>,
}

fn prepare(
    params: &ModelParams,
    images: &[&ImageBuffer],
    annotations: &[&[Annotation]],
    cfg: &TrainConfig,
) -> Result<Vec<ImagePrep>> {
    if images.len() != annotations.len() {
        return Err(Error::Dimension(format!(
            "{} images vs {} annotation sets",
            images.len(),
            annotations.len()
        )));
    }
    images
        .iter()
        .zip(annotations)
        .map(|(image, anns)| {
            let extraction = extract_full(image, params)?;
            let (grid_w, grid_h) = (extraction.fmap.grid_w(), extraction.fmap.grid_h());
            let s = cfg.patch as f64;
            // At most one object per cell once centers are separated by
            // more than the cell diagonal; later annotations overwrite.
            let mut targets: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
            for a in *anns {
                let px = (a.center.0 / s).floor() as usize;
                let py = (a.center.1 / s).floor() as usize;
                if px >= grid_w || py >= grid_h {
                    continue; // center in a trailing strip not tiled by patches
                }
                let cell = py * grid_w + px;
                let cell_cx = px as f64 * s + s / 2.0;
                let cell_cy = py as f64 * s + s / 2.0;
                targets.insert(
                    cell,
                    ((a.center.0 - cell_cx) / s, (a.center.1 - cell_cy) / s),
                );
            }
            let positives: Vec<(usize, (f64, f64))> = targets.into_iter().collect();
            let (es_embeddings, es_cells, es_groups) = if cfg.use_es {
                let embs: Vec<Embedding> = positives
                    .iter()
                    .map(|&(cell, _)| extraction.embeddings[cell].clone())
                    .collect();
                let cells: Vec<usize> = positives.iter().map(|&(cell, _)| cell).collect();
                let groups = crate::stabilize::group_embeddings(&embs, cfg.delta)?;
                (embs, cells, groups)
            } else {
                (Vec::new(), Vec::new(), Vec::new())
            };
            Ok(ImagePrep {
                extraction,
                positives,
                es_embeddings,
                es_groups,
                es_cells,
            })
        })
        .collect()
}

/// Expanded context boxes for one image under the configured source.
fn context_boxes(
    prep: &ImagePrep,
    anns: &[Annotation],
    image: &ImageBuffer,
    params: &ModelParams,
    state: &TrainerState,
    cfg: &TrainConfig,
) -> Result<Vec<BBox>> {
    let raw: Vec<BBox> = match cfg.cr_boxes {
        CrBoxSource::GroundTruth => anns.iter().map(|a| a.bbox).collect(),
        CrBoxSource::Predicted => {
            let reference = state.ctx.reference.as_deref();
            let r = cfg.predict.box_radius;
            prep.extraction
                .embeddings
                .iter()
                .filter(|emb| {
                    let logit = match reference {
                        Some(reference) => {
                            let mut merged = emb.vector.clone();
                            merged.extend_from_slice(reference);
                            params.merged_logit(&merged)
                        }
                        None => params.objectness_logit(&emb.vector),
                    };
                    sigmoid(logit) >= cfg.predict.threshold
                })
                .map(|emb| BBox::new(emb.center.0 - r, emb.center.1 - r, 2.0 * r, 2.0 * r))
                .collect::<Result<_>>()?
        }
    };
    raw.iter()
        .filter_map(|b| {
            match expand_box(b, state.ctx.gamma, image.width() as f64, image.height() as f64) {
                Ok(e) => Some(Ok(e)),
                // A candidate fully outside the frame carries no context.
                Err(Error::Argument(_)) => None,
                Err(e) => Some(Err(e)),
            }
        })
        .collect()
}

/// Combined objective on a batch with frozen EMA states: the detection
/// terms plus the weighted consistency terms, and analytic gradients for
/// every parameter block. The EMA references must already be advanced for
/// this iteration; they are treated as constants here.
pub fn loss_and_grads(
    params: &ModelParams,
    images: &[&ImageBuffer],
    annotations: &[&[Annotation]],
    cr_boxes: &[Vec<BBox>],
    state: &TrainerState,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let preps = prepare(params, images, annotations, cfg)?;
    loss_core(params, &preps, cr_boxes, state, cfg)
}

fn loss_core(
    params: &ModelParams,
    preps: &[ImagePrep],
    cr_boxes: &[Vec<BBox>],
    state: &TrainerState,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    params.validate()?;
    if cfg.use_cr && cr_boxes.len() != preps.len() {
        return Err(Error::Dimension(format!(
            "{} context box sets for {} images",
            cr_boxes.len(),
            preps.len()
        )));
    }
    let n_images = preps.len() as f64;
    let d = params.embed_dim;
    let mut grads = Gradients::zeros_like(params);
    let mut breakdown = LossBreakdown::default();

    let total_pos: usize = preps.iter().map(|p| p.positives.len()).sum();
    let total_groups: usize = preps.iter().map(|p| p.es_groups.len()).sum();

    let use_merged = cfg.use_cr && state.ctx.initialized();
    let reference = state.ctx.reference.as_deref();

    // Pooled context embeddings are linear in the feature map; keep the
    // weights so the consistency gradient can be pushed back into cells.
    let mut ctx_embeddings: Vec<Vec<f64>> = Vec::new();
    let mut ctx_sources: Vec<(usize, PoolWeights)> = Vec::new();
    if cfg.use_cr {
        for (i, prep) in preps.iter().enumerate() {
            for bbox in &cr_boxes[i] {
                let weights = roi_pool_weights(&prep.extraction.fmap, bbox, cfg.roi_grid)?;
                ctx_embeddings.push(crate::context::apply_weights(
                    &prep.extraction.fmap,
                    &weights,
                ));
                ctx_sources.push((i, weights));
            }
        }
    }

    // Gradient w.r.t. every cell embedding, accumulated across terms.
    let mut de: Vec<Vec<f64>> = preps
        .iter()
        .map(|p| vec![0.0; p.extraction.embeddings.len() * d])
        .collect();

    for (i, prep) in preps.iter().enumerate() {
        let n_cells = prep.extraction.embeddings.len() as f64;
        let mut is_positive = vec![false; prep.extraction.embeddings.len()];
        for &(cell, _) in &prep.positives {
            is_positive[cell] = true;
        }

        // Objectness: BCE against cell occupancy, per-image mean,
        // averaged over the batch.
        for (cell, emb) in prep.extraction.embeddings.iter().enumerate() {
            let y = if is_positive[cell] { 1.0 } else { 0.0 };
            let (logit, head_is_merged) = if use_merged {
                let mut merged = emb.vector.clone();
                merged.extend_from_slice(reference.unwrap());
                (params.merged_logit(&merged), true)
            } else {
                (params.objectness_logit(&emb.vector), false)
            };
            breakdown.obj += bce(logit, y) / (n_cells * n_images);
            let g = (sigmoid(logit) - y) / (n_cells * n_images);
            let de_cell = &mut de[i][cell * d..(cell + 1) * d];
            if head_is_merged {
                grads.merged_b += g;
                for k in 0..d {
                    grads.merged_w[k] += g * emb.vector[k];
                    de_cell[k] += g * params.merged_w[k];
                }
                let reference = reference.unwrap();
                for (k, r) in reference.iter().enumerate() {
                    grads.merged_w[d + k] += g * r;
                }
            } else {
                grads.obj_b += g;
                for k in 0..d {
                    grads.obj_w[k] += g * emb.vector[k];
                    de_cell[k] += g * params.obj_w[k];
                }
            }
        }

        // Offset regression on positive cells, mean squared error over
        // all positives of the batch.
        if total_pos > 0 {
            let scale = 1.0 / total_pos as f64;
            for &(cell, (tx, ty)) in &prep.positives {
                let emb = &prep.extraction.embeddings[cell];
                let (ox, oy) = params.offset(&emb.vector);
                let (ex, ey) = (ox - tx, oy - ty);
                breakdown.bbox += (ex * ex + ey * ey) * scale;
                let de_cell = &mut de[i][cell * d..(cell + 1) * d];
                for (row, err) in [(0, ex), (1, ey)] {
                    let g = 2.0 * err * scale;
                    grads.off_b[row] += g;
                    for k in 0..d {
                        grads.off_w[row * d + k] += g * emb.vector[k];
                        de_cell[k] += g * params.off_w[row * d + k];
                    }
                }
            }
        }

        // Consistency terms over the stabilizer embeddings. Both losses
        // normalize by the group count of one call, so rescale to the
        // batch-wide group count.
        if cfg.use_es && !prep.es_groups.is_empty() {
            let j_i = prep.es_groups.len() as f64;
            let j_total = total_groups as f64;
            let portion = j_i / j_total;
            let (lc, gc) = state.stab.cluster_loss(&prep.es_groups, &prep.es_embeddings)?;
            let (ls, gs) = state.stab.stack_loss(&prep.es_groups, &prep.es_embeddings)?;
            breakdown.cluster += lc * portion;
            breakdown.stack += ls * portion;
            for (slot, &cell) in prep.es_cells.iter().enumerate() {
                let de_cell = &mut de[i][cell * d..(cell + 1) * d];
                for k in 0..d {
                    de_cell[k] += cfg.lambda1 * portion * gc[slot][k]
                        + cfg.lambda2 * portion * gs[slot][k];
                }
            }
        }
    }

    // Context consistency across all boxes of the batch.
    if cfg.use_cr && !ctx_embeddings.is_empty() {
        let (lx, gx) = state.ctx.context_loss(&ctx_embeddings)?;
        breakdown.context = lx;
        let c = d; // feature map channels equal the embedding dimension
        for ((image_idx, weights), grad) in ctx_sources.iter().zip(&gx) {
            for (b, cells) in weights.bins.iter().enumerate() {
                for &(cell, w) in cells {
                    let de_cell = &mut de[*image_idx][cell * d..(cell + 1) * d];
                    for k in 0..c {
                        de_cell[k] += cfg.lambda3 * w * grad[b * c + k];
                    }
                }
            }
        }
    }

    // Push accumulated embedding gradients through the shared projection.
    for (prep, de_img) in preps.iter().zip(&de) {
        for (cell, descriptor) in prep.extraction.descriptors.iter().enumerate() {
            let de_cell = &de_img[cell * d..(cell + 1) * d];
            for k in 0..d {
                let g = de_cell[k];
                if g == 0.0 {
                    continue;
                }
                grads.proj_bias[k] += g;
                let row = &mut grads.proj[k * descriptor.len()..(k + 1) * descriptor.len()];
                for (rv, dv) in row.iter_mut().zip(descriptor) {
                    *rv += g * dv;
                }
            }
        }
    }

    Ok((breakdown.finalize(cfg), grads))
}

/// Per-epoch record written to the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub wall_ms: u64,
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub state: TrainerState,
    pub log: Vec<EpochLog>,
}

/// Trains on the dataset: seeded shuffling, optional augmentation, EMA
/// updates, the combined objective, plain SGD. Deterministic in
/// `(items, cfg)`.
pub fn train(items: &[DatasetItem], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut params = ModelParams::init(
        cfg.embed_dim,
        cfg.context_dim(),
        cfg.patch,
        rng::child_seed(cfg.seed, 0x1417),
    )?;
    let mut state = TrainerState::new(cfg)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng::child_seed(cfg.seed, 0x5487));
    let aug_root = rng::child_seed(cfg.seed, 0xa061);

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut batches = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&DatasetItem> = chunk.iter().map(|&i| &items[i]).collect();
            let seed = NoiseSeed(rng::mix2(
                aug_root,
                ((epoch as u64) << 32) | batch_idx as u64,
            ));
            let breakdown = train_step(&mut params, &mut state, &batch, seed, cfg)?;
            epoch_loss.cls += breakdown.cls;
            epoch_loss.bbox += breakdown.bbox;
            epoch_loss.obj += breakdown.obj;
            epoch_loss.cluster += breakdown.cluster;
            epoch_loss.stack += breakdown.stack;
            epoch_loss.context += breakdown.context;
            epoch_loss.total += breakdown.total;
            batches += 1.0;
        }
        for v in [
            &mut epoch_loss.cls,
            &mut epoch_loss.bbox,
            &mut epoch_loss.obj,
            &mut epoch_loss.cluster,
            &mut epoch_loss.stack,
            &mut epoch_loss.context,
            &mut epoch_loss.total,
        ] {
            *v /= batches;
        }
        log.push(EpochLog {
            epoch,
            loss: epoch_loss,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok(TrainOutcome { params, state, log })
}

fn train_step(
    params: &mut ModelParams,
    state: &mut TrainerState,
    batch: &[&DatasetItem],
    seed: NoiseSeed,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    // Adaptive augmentation first: it changes the pixels every later
    // stage sees, and advances the statistics reference once per batch.
    let augmented: Option<Vec<ImageBuffer>> = if cfg.use_aa {
        let originals: Vec<ImageBuffer> = batch.iter().map(|it| it.image.clone()).collect();
        Some(augment_batch(&originals, &mut state.aug, &cfg.gains, seed)?)
    } else {
        None
    };
    let images: Vec<&ImageBuffer> = match &augmented {
        Some(v) => v.iter().collect(),
        None => batch.iter().map(|it| &it.image).collect(),
    };
    let annotations: Vec<&[Annotation]> = batch.iter().map(|it| it.annotations.as_slice()).collect();

    let preps = prepare(params, &images, &annotations, cfg)?;

    // Stabilizer EMA updates: per-image cluster and stack means, one
    // global update over all of this iteration's embeddings.
    if cfg.use_es {
        for prep in &preps {
            state
                .stab
                .update_cluster_means(&prep.es_groups, &prep.es_embeddings);
            state.stab.update_stacks(&prep.es_groups, &prep.es_embeddings);
        }
        let all: Vec<Embedding> = preps
            .iter()
            .flat_map(|p| p.es_embeddings.iter().cloned())
            .collect();
        state.stab.update_global_mean(&all);
    }

    // Context EMA update over pooled expanded boxes.
    let mut cr_boxes: Vec<Vec<BBox>> = Vec::new();
    if cfg.use_cr {
        let mut pooled: Vec<Vec<f64>> = Vec::new();
        for (i, prep) in preps.iter().enumerate() {
            let boxes = context_boxes(prep, annotations[i], images[i], params, state, cfg)?;
            for bbox in &boxes {
                let weights = roi_pool_weights(&prep.extraction.fmap, bbox, cfg.roi_grid)?;
                pooled.push(crate::context::apply_weights(&prep.extraction.fmap, &weights));
            }
            cr_boxes.push(boxes);
        }
        state.ctx.update_reference(&pooled)?;
    }

    let (breakdown, grads) = loss_core(params, &preps, &cr_boxes, state, cfg)?;
    apply_sgd(params, &grads, cfg.learning_rate);
    Ok(breakdown)
}

/// The image a trained model should look at during evaluation.
///
/// With adaptive augmentation enabled the same statistics correction that
/// shaped training is applied against the frozen reference — a per-image
/// gain toward the dataset's reference brightness and contrast, with the
/// noise term disabled so evaluation stays deterministic. Without it (or
/// before the reference exists) the image passes through unchanged.
pub fn eval_view(image: &ImageBuffer, state: &TrainerState, cfg: &TrainConfig) -> ImageBuffer {
    if cfg.use_aa && state.aug.initialized {
        let local = local_stats(image, image.full_region()).expect("full region is valid");
        let mut aug_params =
            derive_params(local, &state.aug, &cfg.gains).expect("state is initialized");
        aug_params.eta = 0.0;
        apply_augmentation(image, &aug_params, NoiseSeed(0))
    } else {
        image.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneSpec};

    fn tiny_scene(seed: u64) -> DatasetItem {
        let spec = SceneSpec {
            width: 64,
            height: 64,
            n_objects: 6,
            object_radius: 3.0,
            radius_jitter: 0.3,
            min_separation: 12.0,
            illumination: 0.05,
            illumination_dir: 0.7,
            texture_amp: 0.04,
            texture_scale: 16.0,
            distractors: 2,
            background_level: 0.5,
            object_contrast: 0.3,
            contrast_jitter: 0.1,
            apron_strength: 0.3,
            sensor_noise: 0.01,
            seed,
        };
        let (image, annotations) = generate_scene(&spec).unwrap();
        DatasetItem {
            image,
            annotations,
            tier: crate::scenegen::Tier::BrightFlat,
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            learning_rate: 0.5,
            embed_dim: 6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_catches_out_of_range() {
        let mut cfg = small_cfg();
        cfg.lambda1 = 2.0;
        assert!(cfg.validate().is_err());
        cfg.allow_unsafe_ranges = true;
        assert!(cfg.validate().is_ok());

        let mut cfg = small_cfg();
        cfg.rho = 0.5;
        assert!(cfg.validate().is_err());
        cfg.allow_unsafe_ranges = true;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn zero_weights_reduce_to_detection_terms() {
        let item = tiny_scene(11);
        let mut cfg = small_cfg();
        cfg.use_es = true;
        cfg.use_cr = true;
        cfg.allow_unsafe_ranges = true;
        cfg.lambda1 = 0.0;
        cfg.lambda2 = 0.0;
        cfg.lambda3 = 0.0;
        let params = ModelParams::init(cfg.embed_dim, cfg.context_dim(), cfg.patch, 5).unwrap();
        let mut state = TrainerState::new(&cfg).unwrap();

        // Seed the states so every loss term is defined.
        let images = [&item.image];
        let anns = [item.annotations.as_slice()];
        let preps = prepare(&params, &images, &anns, &cfg).unwrap();
        for prep in &preps {
            state.stab.update_cluster_means(&prep.es_groups, &prep.es_embeddings);
            state.stab.update_stacks(&prep.es_groups, &prep.es_embeddings);
            state.stab.update_global_mean(&prep.es_embeddings);
        }
        let boxes =
            context_boxes(&preps[0], &item.annotations, &item.image, &params, &state, &cfg)
                .unwrap();
        let pooled: Vec<Vec<f64>> = boxes
            .iter()
            .map(|b| {
                let w = roi_pool_weights(&preps[0].extraction.fmap, b, cfg.roi_grid).unwrap();
                crate::context::apply_weights(&preps[0].extraction.fmap, &w)
            })
            .collect();
        state.ctx.update_reference(&pooled).unwrap();

        let (breakdown, _) =
            loss_and_grads(&params, &images, &anns, &[boxes], &state, &cfg).unwrap();
        let detection_only = breakdown.cls + breakdown.bbox + breakdown.obj;
        assert!((breakdown.total - detection_only).abs() < 1e-15);
    }

    #[test]
    fn breakdown_total_is_additive() {
        let item = tiny_scene(13);
        let mut cfg = small_cfg();
        cfg.use_es = true;
        cfg.use_cr = true;
        let outcome = train(std::slice::from_ref(&item), &cfg).unwrap();
        for entry in &outcome.log {
            let l = entry.loss;
            let sum = l.cls
                + l.bbox
                + l.obj
                + cfg.lambda1 * l.cluster
                + cfg.lambda2 * l.stack
                + cfg.lambda3 * l.context;
            assert!((l.total - sum).abs() < 1e-12, "epoch {}", entry.epoch);
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let items = vec![tiny_scene(1), tiny_scene(2), tiny_scene(3)];
        let mut cfg = small_cfg();
        cfg.use_aa = true;
        cfg.use_es = true;
        cfg.use_cr = true;
        let a = train(&items, &cfg).unwrap();
        let b = train(&items, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn seed_changes_outcome() {
        let items = vec![tiny_scene(1), tiny_scene(2)];
        let cfg = small_cfg();
        let a = train(&items, &cfg).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.seed = 1;
        let b = train(&items, &cfg2).unwrap();
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn loss_descends_on_repeated_epochs() {
        let item = tiny_scene(17);
        let mut cfg = small_cfg();
        cfg.epochs = 3;
        cfg.batch_size = 1;
        cfg.learning_rate = 0.2;
        let outcome = train(std::slice::from_ref(&item), &cfg).unwrap();
        let first = outcome.log.first().unwrap().loss.total;
        let last = outcome.log.last().unwrap().loss.total;
        assert!(
            last <= first + 1e-9,
            "loss rose from {first} to {last} on identical epochs"
        );
    }

    #[test]
    fn disabling_a_component_matches_a_run_without_it() {
        // A config that never had ES and one with ES toggled off must
        // produce identical bits; same for the other components.
        let items = vec![tiny_scene(5), tiny_scene(6)];
        let base = small_cfg();
        let trained_base = train(&items, &base).unwrap();

        for flag in ["aa", "es", "cr"] {
            let mut cfg = base.clone();
            match flag {
                "aa" => cfg.use_aa = false,
                "es" => cfg.use_es = false,
                _ => cfg.use_cr = false,
            }
            let again = train(&items, &cfg).unwrap();
            assert_eq!(trained_base.params, again.params, "toggle {flag}");
        }
    }

    #[test]
    fn es_toggle_adds_exactly_its_terms_at_first_iteration() {
        let items = vec![tiny_scene(21)];
        let mut off = small_cfg();
        off.epochs = 1;
        off.batch_size = 1;
        let mut on = off.clone();
        on.use_es = true;

        let log_off = train(&items, &off).unwrap().log;
        let log_on = train(&items, &on).unwrap().log;
        let (a, b) = (log_off[0].loss, log_on[0].loss);
        // Detection terms identical at iteration one (same initial
        // parameters, augmentation untouched).
        assert_eq!(a.obj, b.obj);
        assert_eq!(a.bbox, b.bbox);
        let expect = b.obj + b.bbox + on.lambda1 * b.cluster + on.lambda2 * b.stack;
        assert!((b.total - expect).abs() < 1e-12);
    }

    #[test]
    fn eval_view_normalizes_gain_when_aa_enabled() {
        let mut cfg = small_cfg();
        cfg.use_aa = true;
        let mut state = TrainerState::new(&cfg).unwrap();
        state.aug.update(crate::stats::ScalarStats {
            mean: 0.5,
            std: 0.1,
        });
        let dark = ImageBuffer::filled(16, 16, 0.25).unwrap();
        let view = eval_view(&dark, &state, &cfg);
        let s = local_stats(&view, view.full_region()).unwrap();
        assert!(s.mean > 0.3, "gain should brighten toward the reference");

        cfg.use_aa = false;
        let untouched = eval_view(&dark, &state, &cfg);
        assert_eq!(untouched, dark);
    }
}
