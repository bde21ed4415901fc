//! Patch descriptors, the projection model, and inference.

use serde::{Deserialize, Serialize};

use crate::context::{BBox, ContextState, FeatureMap};
use crate::error::{Error, Result};
use crate::rng;
use crate::stabilize::Embedding;
use crate::stats::ImageBuffer;

/// Components of the fixed per-patch descriptor: mean, std, min, max,
/// center-surround difference, and four oriented gradient magnitudes.
pub const DESCRIPTOR_DIM: usize = 9;

/// Gradient components are small relative to the intensity statistics;
/// a fixed gain keeps all descriptor channels on a comparable scale.
const GRADIENT_GAIN: f64 = 4.0;

/// Learnable parameters: one projection from descriptors to embeddings
/// plus linear heads for objectness, center offsets, and merged scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Projection matrix, `embed_dim x DESCRIPTOR_DIM`, row-major.
    pub proj: Vec<f64>,
    pub proj_bias: Vec<f64>,
    /// Objectness head on a cell embedding.
    pub obj_w: Vec<f64>,
    pub obj_b: f64,
    /// Scorer on the merged object+context embedding,
    /// `embed_dim + context_dim` weights.
    pub merged_w: Vec<f64>,
    pub merged_b: f64,
    /// Offset head: two rows of `embed_dim`, predicting the sub-cell
    /// center shift in patch units.
    pub off_w: Vec<f64>,
    pub off_b: [f64; 2],
    pub embed_dim: usize,
    pub context_dim: usize,
    /// Patch side in pixels; cells tile the image at this stride.
    pub patch: usize,
}

impl ModelParams {
    /// Random small-weight initialization, deterministic in the seed.
    pub fn init(embed_dim: usize, context_dim: usize, patch: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || patch == 0 {
            return Err(Error::Argument(
                "embed_dim and patch must be positive".into(),
            ));
        }
        let mut counter = 0u64;
        let mut draw = |scale: f64| {
            let v = scale * rng::normal(seed, counter);
            counter += 1;
            v
        };
        let proj = (0..embed_dim * DESCRIPTOR_DIM)
            .map(|_| draw(0.3))
            .collect();
        let proj_bias = (0..embed_dim).map(|_| draw(0.05)).collect();
        let obj_w = (0..embed_dim).map(|_| draw(0.1)).collect();
        let obj_b = draw(0.05);
        let merged_w = (0..embed_dim + context_dim).map(|_| draw(0.1)).collect();
        let merged_b = draw(0.05);
        let off_w = (0..2 * embed_dim).map(|_| draw(0.05)).collect();
        let off_b = [draw(0.02), draw(0.02)];
        Ok(Self {
            proj,
            proj_bias,
            obj_w,
            obj_b,
            merged_w,
            merged_b,
            off_w,
            off_b,
            embed_dim,
            context_dim,
            patch,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        let checks = [
            ("proj", self.proj.len(), d * DESCRIPTOR_DIM),
            ("proj_bias", self.proj_bias.len(), d),
            ("obj_w", self.obj_w.len(), d),
            ("merged_w", self.merged_w.len(), d + self.context_dim),
            ("off_w", self.off_w.len(), 2 * d),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Dimension(format!("{name}: {got} != {want}")));
            }
        }
        let all = self
            .proj
            .iter()
            .chain(&self.proj_bias)
            .chain(&self.obj_w)
            .chain(&self.merged_w)
            .chain(&self.off_w);
        if !all.clone().all(|v| v.is_finite())
            || !self.obj_b.is_finite()
            || !self.merged_b.is_finite()
        {
            return Err(Error::Argument("non-finite model parameter".into()));
        }
        Ok(())
    }

    /// Projects one descriptor into embedding space.
    pub fn project(&self, descriptor: &[f64]) -> Vec<f64> {
        let mut e = self.proj_bias.clone();
        for (d, row) in e.iter_mut().zip(self.proj.chunks_exact(DESCRIPTOR_DIM)) {
            for (w, x) in row.iter().zip(descriptor) {
                *d += w * x;
            }
        }
        e
    }

    pub fn objectness_logit(&self, embedding: &[f64]) -> f64 {
        dot(&self.obj_w, embedding) + self.obj_b
    }

    /// Logit of the merged scorer on `[embedding ; context reference]`.
    pub fn merged_logit(&self, merged: &[f64]) -> f64 {
        dot(&self.merged_w, merged) + self.merged_b
    }

    /// Predicted center offset in patch units.
    pub fn offset(&self, embedding: &[f64]) -> (f64, f64) {
        let d = self.embed_dim;
        (
            dot(&self.off_w[..d], embedding) + self.off_b[0],
            dot(&self.off_w[d..], embedding) + self.off_b[1],
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fixed descriptor of the `patch x patch` square at `(px, py)` cells.
///
/// Layout: mean, population std, min, max, center-minus-surround mean
/// difference, then mean absolute differences along the horizontal,
/// vertical, and both diagonal directions (gain-scaled).
pub fn patch_descriptor(
    image: &ImageBuffer,
    px: usize,
    py: usize,
    patch: usize,
) -> [f64; DESCRIPTOR_DIM] {
    let s = patch;
    let x0 = px * s;
    let y0 = py * s;
    let n = (s * s) as f64;

    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            let v = image.get(x, y);
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
    }
    let mean = sum / n;

    let mut sq = 0.0;
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            let d = image.get(x, y) - mean;
            sq += d * d;
        }
    }
    let std = (sq / n).sqrt();

    // Center quarter vs the surrounding ring of the patch.
    let q = (s / 2).max(1);
    let c0 = (s - q) / 2;
    let mut center_sum = 0.0;
    let mut center_n = 0.0;
    for y in y0 + c0..y0 + c0 + q {
        for x in x0 + c0..x0 + c0 + q {
            center_sum += image.get(x, y);
            center_n += 1.0;
        }
    }
    let ring_n = n - center_n;
    let center_surround = if ring_n > 0.0 {
        center_sum / center_n - (sum - center_sum) / ring_n
    } else {
        0.0
    };

    let (mut gh, mut gv, mut gd1, mut gd2) = (0.0, 0.0, 0.0, 0.0);
    let (mut nh, mut nv, mut nd) = (0.0f64, 0.0f64, 0.0f64);
    for y in y0..y0 + s {
        for x in x0..x0 + s {
            let v = image.get(x, y);
            if x + 1 < x0 + s {
                gh += (image.get(x + 1, y) - v).abs();
                nh += 1.0;
            }
            if y + 1 < y0 + s {
                gv += (image.get(x, y + 1) - v).abs();
                nv += 1.0;
            }
            if x + 1 < x0 + s && y + 1 < y0 + s {
                gd1 += (image.get(x + 1, y + 1) - v).abs();
                nd += 1.0;
            }
            if x >= x0 + 1 && y + 1 < y0 + s {
                gd2 += (image.get(x - 1, y + 1) - v).abs();
            }
        }
    }
    let nh = nh.max(1.0);
    let nv = nv.max(1.0);
    let nd = nd.max(1.0);
    [
        mean,
        std,
        min,
        max,
        center_surround,
        GRADIENT_GAIN * gh / nh,
        GRADIENT_GAIN * gv / nv,
        GRADIENT_GAIN * gd1 / nd,
        GRADIENT_GAIN * gd2 / nd,
    ]
}

/// Feature extraction output with the raw descriptors retained, so the
/// trainer can push embedding gradients back through the projection.
pub(crate) struct FeatureExtraction {
    pub fmap: FeatureMap,
    pub embeddings: Vec<Embedding>,
    pub descriptors: Vec<[f64; DESCRIPTOR_DIM]>,
}

pub(crate) fn extract_full(image: &ImageBuffer, params: &ModelParams) -> Result<FeatureExtraction> {
    let s = params.patch;
    let grid_w = image.width() / s;
    let grid_h = image.height() / s;
    if grid_w == 0 || grid_h == 0 {
        return Err(Error::Argument(format!(
            "{}x{} image is smaller than one {s}x{s} patch",
            image.width(),
            image.height()
        )));
    }
    let d = params.embed_dim;
    let mut data = vec![0.0; d * grid_w * grid_h];
    let mut embeddings = Vec::with_capacity(grid_w * grid_h);
    let mut descriptors = Vec::with_capacity(grid_w * grid_h);
    let half = s as f64 / 2.0;
    for py in 0..grid_h {
        for px in 0..grid_w {
            let descriptor = patch_descriptor(image, px, py, s);
            let e = params.project(&descriptor);
            let idx = py * grid_w + px;
            data[idx * d..(idx + 1) * d].copy_from_slice(&e);
            embeddings.push(Embedding::new(
                e,
                (px as f64 * s as f64 + half, py as f64 * s as f64 + half),
            ));
            descriptors.push(descriptor);
        }
    }
    let fmap = FeatureMap::new(d, grid_w, grid_h, s, data)?;
    Ok(FeatureExtraction {
        fmap,
        embeddings,
        descriptors,
    })
}

/// Tiles the image into non-overlapping patches, projects each descriptor,
/// and returns the cell-grid feature map together with the same vectors as
/// center-tagged embeddings. Trailing pixels that do not fill a whole
/// patch are dropped.
pub fn extract_features(
    image: &ImageBuffer,
    params: &ModelParams,
) -> Result<(FeatureMap, Vec<Embedding>)> {
    let extraction = extract_full(image, params)?;
    Ok((extraction.fmap, extraction.embeddings))
}

/// A scored point detection with its fixed-size box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: (f64, f64),
    pub bbox: BBox,
    pub confidence: f64,
}

/// Inference knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Minimum sigmoid score to emit a candidate.
    pub threshold: f64,
    /// Radius of the local-maximum suppression in pixels.
    pub nms_radius: f64,
    /// Half-side of the emitted square boxes.
    pub box_radius: f64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            nms_radius: 6.0,
            box_radius: 3.0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Scores every cell, adds the predicted sub-cell offset to the cell
/// center, thresholds, and keeps local maxima within `nms_radius`.
///
/// With an initialized context state the score comes from the merged
/// scorer on `[cell embedding ; context reference]`; otherwise from the
/// plain objectness head.
pub fn predict(
    image: &ImageBuffer,
    params: &ModelParams,
    context: Option<&ContextState>,
    options: &PredictOptions,
) -> Result<Vec<Detection>> {
    let (_, embeddings) = extract_features(image, params)?;
    let merged_ref = context.and_then(|c| c.reference.as_deref());

    let mut candidates: Vec<(f64, usize, (f64, f64))> = Vec::new();
    for (idx, emb) in embeddings.iter().enumerate() {
        let logit = match merged_ref {
            Some(reference) => {
                let mut merged = emb.vector.clone();
                merged.extend_from_slice(reference);
                params.merged_logit(&merged)
            }
            None => params.objectness_logit(&emb.vector),
        };
        let score = sigmoid(logit);
        if score < options.threshold {
            continue;
        }
        let (ox, oy) = params.offset(&emb.vector);
        let s = params.patch as f64;
        let cx = (emb.center.0 + s * ox).clamp(0.0, image.width() as f64 - 1e-9);
        let cy = (emb.center.1 + s * oy).clamp(0.0, image.height() as f64 - 1e-9);
        candidates.push((score, idx, (cx, cy)));
    }

    // Highest score first; cell index breaks ties deterministically.
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let r_sq = options.nms_radius * options.nms_radius;
    let mut detections: Vec<Detection> = Vec::new();
    for (score, _, (cx, cy)) in candidates {
        let suppressed = detections.iter().any(|d| {
            let (dx, dy) = (d.center.0 - cx, d.center.1 - cy);
            dx * dx + dy * dy < r_sq
        });
        if suppressed {
            continue;
        }
        detections.push(Detection {
            center: (cx, cy),
            bbox: BBox::new(
                cx - options.box_radius,
                cy - options.box_radius,
                2.0 * options.box_radius,
                2.0 * options.box_radius,
            )?,
            confidence: score,
        });
    }
    Ok(detections)
}
