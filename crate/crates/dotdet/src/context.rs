//! Contextual refinement: expanded-box ROI pooling, an EMA context
//! reference, the contextual consistency loss, and object+context merging.
//!
//! Context is read from a margin around each candidate box: the box grows
//! by a factor `gamma` on every side, the grown box is pooled from the
//! feature map on a fixed grid, and the pooled vectors feed an EMA
//! reference. The consistency loss pulls each pooled context toward that
//! reference (which is a constant under differentiation), and the merged
//! representation appends the shared reference to an object embedding —
//! every box in an iteration receives the same context suffix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box with top-left corner `(x, y)` and positive
/// extents `(w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Argument(format!(
                "box extents must be positive, got w={w} h={h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// Grows a box by `gamma` of its extent on every side,
/// `(x - gamma*w, y - gamma*h, w + 2*gamma*w, h + 2*gamma*h)`,
/// then intersects the result with the image rectangle so pooling never
/// addresses pixels outside the raster.
pub fn expand_box(bbox: &BBox, gamma: f64, image_w: f64, image_h: f64) -> Result<BBox> {
    if gamma < 0.0 {
        return Err(Error::Argument(format!("gamma {gamma} must be >= 0")));
    }
    let x0 = bbox.x - gamma * bbox.w;
    let y0 = bbox.y - gamma * bbox.h;
    let x1 = x0 + bbox.w + 2.0 * gamma * bbox.w;
    let y1 = y0 + bbox.h + 2.0 * gamma * bbox.h;
    let cx0 = x0.max(0.0);
    let cy0 = y0.max(0.0);
    let cx1 = x1.min(image_w);
    let cy1 = y1.min(image_h);
    if !(cx0 < cx1 && cy0 < cy1) {
        return Err(Error::Argument(format!(
            "expanded box ({x0},{y0})..({x1},{y1}) lies outside the {image_w}x{image_h} image"
        )));
    }
    BBox::new(cx0, cy0, cx1 - cx0, cy1 - cy0)
}

/// Grid of `channels`-dimensional cells with a fixed pixel stride.
///
/// Cell `(ix, iy)` covers the pixel square
/// `[ix*stride, (ix+1)*stride) x [iy*stride, (iy+1)*stride)`.
/// Storage is row-major over cells, channels contiguous per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    grid_w: usize,
    grid_h: usize,
    stride: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        channels: usize,
        grid_w: usize,
        grid_h: usize,
        stride: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if channels == 0 || grid_w == 0 || grid_h == 0 || stride == 0 {
            return Err(Error::Argument(
                "feature map dimensions and stride must be positive".into(),
            ));
        }
        if data.len() != channels * grid_w * grid_h {
            return Err(Error::Dimension(format!(
                "expected {} values, got {}",
                channels * grid_w * grid_h,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Argument("feature map contains non-finite values".into()));
        }
        Ok(Self {
            channels,
            grid_w,
            grid_h,
            stride,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Flat cell index for `(ix, iy)`.
    pub fn cell_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.grid_w + ix
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Pixel footprint `(width, height)` covered by the grid.
    pub fn pixel_extent(&self) -> (f64, f64) {
        (
            (self.grid_w * self.stride) as f64,
            (self.grid_h * self.stride) as f64,
        )
    }
}

/// Sparse linear pooling weights: for every output bin, the contributing
/// cell indices and their weights. The pooled bin vector is the weighted
/// sum of cell vectors, which makes pooling exactly linear in the map and
/// lets callers push gradients back through it.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolWeights {
    pub bins: Vec<Vec<(usize, f64)>>,
}

/// Average-pools a box from the feature map on a `grid x grid` layout.
///
/// The box is mapped to feature coordinates by the stride and split into
/// `grid x grid` bins, columns outer. A bin averages the cells whose
/// centers fall inside it; a bin too small to contain any cell center is
/// bilinearly sampled at its center instead. A box smaller than one pixel
/// falls back to a single bilinear sample at its center, replicated into
/// every bin. Output dimension is `channels * grid^2`.
pub fn roi_pool(fmap: &FeatureMap, bbox: &BBox, grid: usize) -> Result<Vec<f64>> {
    Ok(apply_weights(fmap, &roi_pool_weights(fmap, bbox, grid)?))
}

/// The geometry half of [`roi_pool`]: bin weights only, value-independent.
pub fn roi_pool_weights(fmap: &FeatureMap, bbox: &BBox, grid: usize) -> Result<PoolWeights> {
    if grid == 0 {
        return Err(Error::Argument("pooling grid must be positive".into()));
    }
    let (ext_w, ext_h) = fmap.pixel_extent();
    let x0 = bbox.x.max(0.0);
    let y0 = bbox.y.max(0.0);
    let x1 = (bbox.x + bbox.w).min(ext_w);
    let y1 = (bbox.y + bbox.h).min(ext_h);
    if !(x0 < x1 && y0 < y1) {
        return Err(Error::Bounds(format!(
            "box {bbox:?} does not intersect the {ext_w}x{ext_h} feature footprint"
        )));
    }

    let stride = fmap.stride as f64;
    // Feature-space box.
    let (fx0, fy0, fx1, fy1) = (x0 / stride, y0 / stride, x1 / stride, y1 / stride);

    // Sub-pixel box: one sample at the center feeds every bin.
    if (x1 - x0) < 1.0 && (y1 - y0) < 1.0 {
        let sample = bilinear_weights(fmap, (fx0 + fx1) / 2.0, (fy0 + fy1) / 2.0);
        return Ok(PoolWeights {
            bins: vec![sample; grid * grid],
        });
    }

    let bin_w = (fx1 - fx0) / grid as f64;
    let bin_h = (fy1 - fy0) / grid as f64;
    let sub_cell = bin_w < 1.0 || bin_h < 1.0;
    let mut bins = Vec::with_capacity(grid * grid);
    for gx in 0..grid {
        for gy in 0..grid {
            let bx0 = fx0 + gx as f64 * bin_w;
            let bx1 = bx0 + bin_w;
            let by0 = fy0 + gy as f64 * bin_h;
            let by1 = by0 + bin_h;
            if sub_cell {
                bins.push(bilinear_weights(
                    fmap,
                    (bx0 + bx1) / 2.0,
                    (by0 + by1) / 2.0,
                ));
                continue;
            }
            // Cells overlapping the bin with positive area.
            let ix0 = bx0.floor().max(0.0) as usize;
            let iy0 = by0.floor().max(0.0) as usize;
            let ix1 = (bx1.ceil() as isize).min(fmap.grid_w as isize).max(0) as usize;
            let iy1 = (by1.ceil() as isize).min(fmap.grid_h as isize).max(0) as usize;
            let mut cells = Vec::with_capacity((ix1.saturating_sub(ix0)) * (iy1.saturating_sub(iy0)));
            for iy in iy0..iy1 {
                for ix in ix0..ix1 {
                    let overlaps = (ix as f64) < bx1
                        && (ix as f64 + 1.0) > bx0
                        && (iy as f64) < by1
                        && (iy as f64 + 1.0) > by0;
                    if overlaps {
                        cells.push((fmap.cell_index(ix, iy), 0.0));
                    }
                }
            }
            if cells.is_empty() {
                bins.push(bilinear_weights(
                    fmap,
                    (bx0 + bx1) / 2.0,
                    (by0 + by1) / 2.0,
                ));
            } else {
                let w = 1.0 / cells.len() as f64;
                for c in &mut cells {
                    c.1 = w;
                }
                bins.push(cells);
            }
        }
    }
    Ok(PoolWeights { bins })
}

/// Materializes pooled values from precomputed weights.
pub fn apply_weights(fmap: &FeatureMap, weights: &PoolWeights) -> Vec<f64> {
    let c = fmap.channels;
    let mut out = vec![0.0; weights.bins.len() * c];
    for (b, cells) in weights.bins.iter().enumerate() {
        let slot = &mut out[b * c..(b + 1) * c];
        for &(cell, w) in cells {
            for (o, v) in slot.iter_mut().zip(fmap.cell(cell)) {
                *o += w * v;
            }
        }
    }
    out
}

/// Bilinear interpolation weights over the four cells around feature-space
/// point `(u, v)`; cell centers sit at half-integer coordinates.
fn bilinear_weights(fmap: &FeatureMap, u: f64, v: f64) -> Vec<(usize, f64)> {
    let fx = (u - 0.5).clamp(0.0, (fmap.grid_w - 1) as f64);
    let fy = (v - 0.5).clamp(0.0, (fmap.grid_h - 1) as f64);
    let ix0 = fx.floor() as usize;
    let iy0 = fy.floor() as usize;
    let ix1 = (ix0 + 1).min(fmap.grid_w - 1);
    let iy1 = (iy0 + 1).min(fmap.grid_h - 1);
    let tx = fx - ix0 as f64;
    let ty = fy - iy0 as f64;
    let mut cells = vec![
        (fmap.cell_index(ix0, iy0), (1.0 - tx) * (1.0 - ty)),
        (fmap.cell_index(ix1, iy0), tx * (1.0 - ty)),
        (fmap.cell_index(ix0, iy1), (1.0 - tx) * ty),
        (fmap.cell_index(ix1, iy1), tx * ty),
    ];
    cells.retain(|&(_, w)| w != 0.0);
    cells
}

/// EMA reference over pooled context embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    /// Smoothed reference context, `None` until first touched.
    pub reference: Option<Vec<f64>>,
    /// EMA smoothing factor, in `[0.01, 0.1]`.
    pub rho: f64,
    /// Box expansion factor, in `[0.1, 0.5]`.
    pub gamma: f64,
}

impl ContextState {
    pub fn new(rho: f64, gamma: f64) -> Result<Self> {
        for (name, v, lo, hi) in [("rho", rho, 0.01, 0.1), ("gamma", gamma, 0.1, 0.5)] {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Argument(format!("{name} {v} outside [{lo}, {hi}]")));
            }
        }
        Self::new_lenient(rho, gamma)
    }

    /// Range-unchecked variant for explicitly-requested experiments.
    pub fn new_lenient(rho: f64, gamma: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Argument(format!("rho {rho} outside (0, 1]")));
        }
        if gamma < 0.0 {
            return Err(Error::Argument(format!("gamma {gamma} must be >= 0")));
        }
        Ok(Self {
            reference: None,
            rho,
            gamma,
        })
    }

    pub fn initialized(&self) -> bool {
        self.reference.is_some()
    }

    /// EMA step toward the mean of this iteration's context embeddings;
    /// seeds the reference on first touch, no-op on an empty list.
    pub fn update_reference(&mut self, context_embeddings: &[Vec<f64>]) -> Result<()> {
        let Some(first) = context_embeddings.first() else {
            return Ok(());
        };
        let dim = first.len();
        if let Some(bad) = context_embeddings.iter().find(|e| e.len() != dim) {
            return Err(Error::Dimension(format!(
                "context embedding of dim {} in a batch of dim {dim}",
                bad.len()
            )));
        }
        let mut mean = vec![0.0; dim];
        for e in context_embeddings {
            for (m, v) in mean.iter_mut().zip(e) {
                *m += v;
            }
        }
        let n = context_embeddings.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        match &mut self.reference {
            None => self.reference = Some(mean),
            Some(r) => {
                if r.len() != dim {
                    return Err(Error::Dimension(format!(
                        "reference dim {} vs embedding dim {dim}",
                        r.len()
                    )));
                }
                for (p, o) in r.iter_mut().zip(&mean) {
                    *p += self.rho * (o - *p);
                }
            }
        }
        Ok(())
    }

    /// Contextual consistency loss, mean squared distance to the
    /// reference, plus its gradient `(2/N)(E_i - ref)` per embedding. The
    /// reference is a constant under the gradient.
    pub fn context_loss(&self, context_embeddings: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let reference = self
            .reference
            .as_ref()
            .ok_or_else(|| Error::State("context reference not initialized".into()))?;
        if context_embeddings.is_empty() {
            return Ok((0.0, Vec::new()));
        }
        let n = context_embeddings.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(context_embeddings.len());
        for e in context_embeddings {
            if e.len() != reference.len() {
                return Err(Error::Dimension(format!(
                    "context embedding dim {} vs reference dim {}",
                    e.len(),
                    reference.len()
                )));
            }
            let mut grad = vec![0.0; e.len()];
            for ((g, ev), rv) in grad.iter_mut().zip(e).zip(reference) {
                let d = ev - rv;
                loss += d * d;
                *g = 2.0 * d / n;
            }
            grads.push(grad);
        }
        Ok((loss / n, grads))
    }

    /// Appends the shared EMA reference to an object embedding. The prefix
    /// is the object embedding unchanged; the suffix is identical for
    /// every box of the iteration.
    pub fn merge_embeddings(&self, object_emb: &[f64]) -> Result<Vec<f64>> {
        let reference = self
            .reference
            .as_ref()
            .ok_or_else(|| Error::State("context reference not initialized".into()))?;
        let mut merged = Vec::with_capacity(object_emb.len() + reference.len());
        merged.extend_from_slice(object_emb);
        merged.extend_from_slice(reference);
        Ok(merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap_const(c: usize, w: usize, h: usize, stride: usize, value: f64) -> FeatureMap {
        FeatureMap::new(c, w, h, stride, vec![value; c * w * h]).unwrap()
    }

    #[test]
    fn expand_box_examples() {
        let b = BBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        let e = expand_box(&b, 0.5, 1000.0, 1000.0).unwrap();
        assert_eq!((e.x, e.y, e.w, e.h), (0.0, 0.0, 40.0, 40.0));

        let same = expand_box(&b, 0.0, 1000.0, 1000.0).unwrap();
        assert_eq!(same, b);

        let b2 = BBox::new(2.0, 2.0, 8.0, 8.0).unwrap();
        let e2 = expand_box(&b2, 0.25, 10.0, 10.0).unwrap();
        assert_eq!((e2.x, e2.y, e2.w, e2.h), (0.0, 0.0, 10.0, 10.0));
    }

    #[test]
    fn expand_box_area_before_clamp() {
        let b = BBox::new(100.0, 100.0, 12.0, 7.0).unwrap();
        for gamma in [0.1, 0.3, 0.5] {
            let e = expand_box(&b, gamma, 10_000.0, 10_000.0).unwrap();
            let expect = (1.0 + 2.0 * gamma).powi(2) * b.area();
            assert!((e.area() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn expand_box_outside_image_errors() {
        let b = BBox::new(200.0, 200.0, 5.0, 5.0).unwrap();
        assert!(matches!(
            expand_box(&b, 0.2, 100.0, 100.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn roi_pool_constant_map() {
        let f = fmap_const(3, 8, 8, 4, 0.7);
        let b = BBox::new(3.0, 5.0, 17.0, 11.0).unwrap();
        for grid in [1, 2, 3] {
            let out = roi_pool(&f, &b, grid).unwrap();
            assert_eq!(out.len(), 3 * grid * grid);
            assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn roi_pool_cell_exact_average() {
        // 1x1 grid over a box exactly covering cells (1..3, 0..2) of a
        // map with distinct values: plain average of the four cells.
        let mut data = vec![0.0; 16];
        for iy in 0..4 {
            for ix in 0..4 {
                data[iy * 4 + ix] = (iy * 4 + ix) as f64;
            }
        }
        let f = FeatureMap::new(1, 4, 4, 2, data).unwrap();
        let b = BBox::new(2.0, 0.0, 4.0, 4.0).unwrap();
        let out = roi_pool(&f, &b, 1).unwrap();
        let expect = (1.0 + 2.0 + 5.0 + 6.0) / 4.0;
        assert!((out[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn roi_pool_left_right_split() {
        // Left half 0, right half 1; grid 2 over the full map splits by
        // column: bins are column-major (0, 0, 1, 1).
        let mut data = vec![0.0; 16];
        for iy in 0..4 {
            for ix in 0..4 {
                data[iy * 4 + ix] = if ix < 2 { 0.0 } else { 1.0 };
            }
        }
        let f = FeatureMap::new(1, 4, 4, 1, data).unwrap();
        let b = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let out = roi_pool(&f, &b, 2).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn roi_pool_subcell_uses_bilinear() {
        // Bin narrower than one cell: bilinear sample at the bin center,
        // here 3/8 of the way between the two cell values.
        let f = FeatureMap::new(1, 2, 1, 4, vec![0.0, 1.0]).unwrap();
        let b = BBox::new(2.0, 0.0, 3.0, 4.0).unwrap();
        let out = roi_pool(&f, &b, 1).unwrap();
        assert!((out[0] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn roi_pool_straddling_bin_averages_overlapped_cells() {
        // A one-cell-wide bin centered on the boundary overlaps both
        // cells and averages them without area weighting.
        let f = FeatureMap::new(1, 2, 1, 4, vec![0.0, 1.0]).unwrap();
        let b = BBox::new(2.0, 0.0, 4.0, 4.0).unwrap();
        let out = roi_pool(&f, &b, 1).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn roi_pool_subpixel_box_single_sample() {
        let f = FeatureMap::new(1, 2, 2, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = BBox::new(2.0, 2.0, 0.5, 0.5).unwrap();
        let out = roi_pool(&f, &b, 2).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.windows(2).all(|w| w[0] == w[1]), "all bins share one sample");
    }

    #[test]
    fn roi_pool_outside_footprint_errors() {
        let f = fmap_const(1, 2, 2, 4, 0.0);
        let b = BBox::new(100.0, 0.0, 4.0, 4.0).unwrap();
        assert!(matches!(roi_pool(&f, &b, 1), Err(Error::Bounds(_))));
    }

    #[test]
    fn roi_pool_is_linear_in_the_map() {
        let data_f: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let data_g: Vec<f64> = (0..32).map(|i| (i as f64 * 0.91).cos()).collect();
        let f = FeatureMap::new(2, 4, 4, 3, data_f.clone()).unwrap();
        let g = FeatureMap::new(2, 4, 4, 3, data_g.clone()).unwrap();
        let (a, bcoef) = (1.7, -0.4);
        let combo: Vec<f64> = data_f
            .iter()
            .zip(&data_g)
            .map(|(x, y)| a * x + bcoef * y)
            .collect();
        let fg = FeatureMap::new(2, 4, 4, 3, combo).unwrap();
        let b = BBox::new(1.0, 2.0, 9.0, 7.0).unwrap();
        let pf = roi_pool(&f, &b, 2).unwrap();
        let pg = roi_pool(&g, &b, 2).unwrap();
        let pfg = roi_pool(&fg, &b, 2).unwrap();
        for i in 0..pfg.len() {
            assert!((pfg[i] - (a * pf[i] + bcoef * pg[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn context_reference_updates() {
        let mut s = ContextState::new(0.1, 0.3).unwrap();
        assert!(!s.initialized());
        // Empty list: no-op, still uninitialized.
        s.update_reference(&[]).unwrap();
        assert!(!s.initialized());
        // First touch seeds with the mean.
        s.update_reference(&[vec![0.0, 0.0]]).unwrap();
        assert_eq!(s.reference.as_deref(), Some(&[0.0, 0.0][..]));
        // Then the EMA law applies.
        s.update_reference(&[vec![1.0, 1.0]]).unwrap();
        let r = s.reference.as_ref().unwrap();
        assert!((r[0] - 0.1).abs() < 1e-12 && (r[1] - 0.1).abs() < 1e-12);
        // Fixed point.
        let before = s.clone();
        let held = s.reference.clone().unwrap();
        s.update_reference(&[held]).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn context_reference_rejects_dimension_mismatch() {
        let mut s = ContextState::new(0.1, 0.3).unwrap();
        s.update_reference(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            s.update_reference(&[vec![1.0]]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            s.update_reference(&[vec![0.0, 0.0], vec![0.0]]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn context_loss_examples() {
        let mut s = ContextState::new(0.1, 0.3).unwrap();
        s.reference = Some(vec![0.0]);
        // Embeddings {+1, -1} around a zero reference: loss 1.
        let (loss, grads) = s.context_loss(&[vec![1.0], vec![-1.0]]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
        assert!((grads[0][0] - 1.0).abs() < 1e-12);
        assert!((grads[1][0] + 1.0).abs() < 1e-12);
        // Single embedding at distance d: loss d^2.
        let d = 0.35;
        let (loss, _) = s.context_loss(&[vec![d]]).unwrap();
        assert!((loss - d * d).abs() < 1e-12);
        // All at the reference: zero.
        let (loss, _) = s.context_loss(&[vec![0.0], vec![0.0]]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn context_loss_requires_initialization() {
        let s = ContextState::new(0.1, 0.3).unwrap();
        assert!(matches!(
            s.context_loss(&[vec![1.0]]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn merge_examples() {
        let mut s = ContextState::new(0.1, 0.3).unwrap();
        assert!(matches!(
            s.merge_embeddings(&[1.0]),
            Err(Error::State(_))
        ));
        s.reference = Some(vec![0.5, 0.6, 0.7, 0.8]);
        let object = [1.0, 2.0, 3.0, 4.0];
        let merged = s.merge_embeddings(&object).unwrap();
        assert_eq!(merged.len(), 8);
        assert_eq!(&merged[..4], &object);
        assert_eq!(&merged[4..], &[0.5, 0.6, 0.7, 0.8]);

        // Two different boxes share one context suffix.
        let other = s.merge_embeddings(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(&merged[4..], &other[4..]);
    }

    #[test]
    fn state_validates_ranges() {
        assert!(ContextState::new(0.2, 0.3).is_err());
        assert!(ContextState::new(0.05, 0.6).is_err());
        assert!(ContextState::new_lenient(0.5, 0.8).is_ok());
    }
}
