//! Matching, AP/mAP, precision/recall/F1, k-fold splitting, and the
//! component-ablation runner.
//!
//! Detections are matched to ground truth by center distance: at tiny
//! object scale boxes are near-degenerate and the natural visualization
//! is a dot per detection, so a pixel tolerance is the meaningful
//! criterion. Matching is greedy in descending confidence, one ground
//! truth per detection. There is a single class, so mAP is the AP at one
//! tolerance, computed with all-point interpolation over the ranked
//! precision-recall curve.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{
    eval_view, predict, Detection, ModelParams, PredictOptions, TrainConfig, TrainerState,
};
use crate::rng;
use crate::scenegen::{Annotation, DatasetItem};

/// Outcome of matching one detection list against one annotation list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Matched `(prediction index, ground-truth index, center distance)`.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Prediction indices in matching order: descending confidence, original
/// index breaking ties.
fn confidence_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

/// Assigns each prediction (visited in `order`) the nearest still-unmatched
/// ground truth within `tol`, if any.
fn greedy_assign(
    preds: &[Detection],
    order: &[usize],
    gts: &[Annotation],
    tol: f64,
) -> Vec<Option<(usize, f64)>> {
    let mut taken = vec![false; gts.len()];
    let mut assignment = vec![None; preds.len()];
    for &p in order {
        let (cx, cy) = preds[p].center;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let (dx, dy) = (cx - gt.center.0, cy - gt.center.1);
            let dist = (dx * dx + dy * dy).sqrt();
            if dist < tol && best.map_or(true, |(_, d)| dist < d) {
                best = Some((g, dist));
            }
        }
        if let Some((g, dist)) = best {
            taken[g] = true;
            assignment[p] = Some((g, dist));
        }
    }
    assignment
}

/// Greedy center-distance matching in descending confidence order.
pub fn match_detections(
    preds: &[Detection],
    gts: &[Annotation],
    tol: f64,
) -> Result<MatchResult> {
    if tol <= 0.0 {
        return Err(Error::Argument(format!("tolerance {tol} must be > 0")));
    }
    let order = confidence_order(preds);
    let assignment = greedy_assign(preds, &order, gts, tol);
    let mut pairs = Vec::new();
    for &p in &order {
        if let Some((g, dist)) = assignment[p] {
            pairs.push((p, g, dist));
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        true_positives: tp,
        false_positives: preds.len() - tp,
        false_negatives: gts.len() - tp,
        pairs,
    })
}

/// Precision, recall, and F1 from match counts, with the usual
/// zero-denominator conventions.
pub fn prf1(m: &MatchResult) -> (f64, f64, f64) {
    let tp = m.true_positives as f64;
    let precision = if m.true_positives + m.false_positives > 0 {
        tp / (tp + m.false_positives as f64)
    } else {
        0.0
    };
    let recall = if m.true_positives + m.false_negatives > 0 {
        tp / (tp + m.false_negatives as f64)
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Ranked true-positive flags over one or more images, in global
/// descending-confidence order, plus the total ground-truth count.
fn ranked_flags(
    groups: &[(&[Detection], &[Annotation])],
    tol: f64,
) -> Result<(Vec<bool>, usize)> {
    if tol <= 0.0 {
        return Err(Error::Argument(format!("tolerance {tol} must be > 0")));
    }
    let total_gts: usize = groups.iter().map(|(_, g)| g.len()).sum();
    if total_gts == 0 {
        return Err(Error::Undefined(
            "average precision with zero ground truths".into(),
        ));
    }
    // Per image the greedy assignment of a prefix equals the prefix of
    // the full assignment, so one pass labels every rank.
    let mut entries: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (i, (preds, gts)) in groups.iter().enumerate() {
        let order = confidence_order(preds);
        let assignment = greedy_assign(preds, &order, gts, tol);
        for (p, a) in assignment.iter().enumerate() {
            entries.push((preds[p].confidence, i, p, a.is_some()));
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    Ok((entries.into_iter().map(|e| e.3).collect(), total_gts))
}

fn ap_from_flags(flags: &[bool], total_gts: usize) -> f64 {
    let n = flags.len();
    if n == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(n);
    let mut recalls = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / total_gts as f64);
    }
    // Precision envelope: best precision at or beyond each rank.
    let mut envelope = precisions.clone();
    for k in (0..n - 1).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..n {
        ap += (recalls[k] - prev_recall) * envelope[k];
        prev_recall = recalls[k];
    }
    ap
}

/// All-point interpolated average precision of one detection list.
/// Zero ground truths are undefined, not zero.
pub fn average_precision(preds: &[Detection], gts: &[Annotation], tol: f64) -> Result<f64> {
    let (flags, total) = ranked_flags(&[(preds, gts)], tol)?;
    Ok(ap_from_flags(&flags, total))
}

/// Single-class AP over a whole test set: detections rank globally,
/// matching stays within each image.
pub fn dataset_average_precision(
    groups: &[(&[Detection], &[Annotation])],
    tol: f64,
) -> Result<f64> {
    let (flags, total) = ranked_flags(groups, tol)?;
    Ok(ap_from_flags(&flags, total))
}

/// Ranked `(recall, precision)` points of the pooled PR curve.
pub fn pr_points(
    groups: &[(&[Detection], &[Annotation])],
    tol: f64,
) -> Result<Vec<(f64, f64)>> {
    let (flags, total) = ranked_flags(groups, tol)?;
    let mut points = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / total as f64, tp as f64 / (k + 1) as f64));
    }
    Ok(points)
}

/// Seeded shuffle followed by a contiguous partition into `k` folds.
/// Returns `(train ids, test ids)` per fold; test sizes differ by at most
/// one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::Argument(format!("k = {k} must be at least 2")));
    }
    if k > n {
        return Err(Error::Argument(format!("k = {k} exceeds {n} items")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng::child_seed(seed, 0xf01d));
    ids.shuffle(&mut shuffle_rng);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0usize;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let test: Vec<usize> = ids[start..start + size].to_vec();
        let train: Vec<usize> = ids[..start]
            .iter()
            .chain(&ids[start + size..])
            .copied()
            .collect();
        folds.push((train, test));
        start += size;
    }
    Ok(folds)
}

/// Evaluation knobs shared by single runs and the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Center-distance tolerance for a match, in pixels.
    pub match_tol: f64,
    /// Low threshold used to collect ranked candidates for the PR curve.
    pub candidate_threshold: f64,
    /// Operating threshold for the reported precision/recall/F1.
    pub operating_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            match_tol: 6.0,
            candidate_threshold: 0.12,
            operating_threshold: 0.5,
        }
    }
}

/// Aggregate metrics of one model over one item set, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Runs the trained model over every item and computes dataset AP plus
/// operating-point precision/recall/F1.
pub fn evaluate_model(
    items: &[&DatasetItem],
    params: &ModelParams,
    state: &TrainerState,
    cfg: &TrainConfig,
    eval: &EvalOptions,
) -> Result<EvalMetrics> {
    let options = PredictOptions {
        threshold: eval.candidate_threshold,
        ..cfg.predict
    };
    let mut all_preds: Vec<Vec<Detection>> = Vec::with_capacity(items.len());
    for item in items {
        let view = eval_view(&item.image, state, cfg);
        let context = if cfg.use_cr { Some(&state.ctx) } else { None };
        all_preds.push(predict(&view, params, context, &options)?);
    }
    let groups: Vec<(&[Detection], &[Annotation])> = all_preds
        .iter()
        .zip(items)
        .map(|(p, it)| (p.as_slice(), it.annotations.as_slice()))
        .collect();
    let map = dataset_average_precision(&groups, eval.match_tol)?;

    let (mut tp, mut fp, mut fn_total) = (0usize, 0usize, 0usize);
    for (preds, gts) in &groups {
        let operating: Vec<Detection> = preds
            .iter()
            .filter(|d| d.confidence >= eval.operating_threshold)
            .cloned()
            .collect();
        let m = match_detections(&operating, gts, eval.match_tol)?;
        tp += m.true_positives;
        fp += m.false_positives;
        fn_total += m.false_negatives;
    }
    let counts = MatchResult {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_total,
        pairs: Vec::new(),
    };
    let (precision, recall, f1) = prf1(&counts);
    Ok(EvalMetrics {
        map,
        precision,
        recall,
        f1,
    })
}

/// Metrics of one `(seed, fold)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub seed: u64,
    pub fold: usize,
    pub metrics: EvalMetrics,
}

/// Cross-validated metrics for one configuration row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub config_fingerprint: String,
    pub per_fold: Vec<FoldMetrics>,
}

impl MetricsReport {
    /// Mean and population standard deviation over the fold cells, as
    /// fractions.
    pub fn mean_std(&self, pick: fn(&EvalMetrics) -> f64) -> (f64, f64) {
        let values: Vec<f64> = self.per_fold.iter().map(|f| pick(&f.metrics)).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    pub fn mean_map(&self) -> f64 {
        self.mean_std(|m| m.map).0
    }
}

/// One row of the component grid: which of the three mechanisms are on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub label: String,
    pub aa: bool,
    pub es: bool,
    pub cr: bool,
}

/// The full eight-row grid in presentation order.
pub fn component_grid() -> Vec<ComponentSet> {
    let row = |label: &str, aa, es, cr| ComponentSet {
        label: label.to_string(),
        aa,
        es,
        cr,
    };
    vec![
        row("baseline", false, false, false),
        row("+aa", true, false, false),
        row("+es", false, true, false),
        row("+cr", false, false, true),
        row("+aa+es", true, true, false),
        row("+aa+cr", true, false, true),
        row("+es+cr", false, true, true),
        row("+all", true, true, true),
    ]
}

/// A grid row that either produced metrics or failed with a recorded
/// error; other rows keep running.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub outcome: std::result::Result<MetricsReport, String>,
}

/// Runs k-fold cross-validation for every component subset and every
/// training seed. Folds come from the base seed and are shared across
/// rows; training seeds perturb initialization, shuffling, and noise.
/// Cells run in parallel and merge in fixed order.
pub fn ablation_run(
    items: &[DatasetItem],
    base: &TrainConfig,
    grid: &[ComponentSet],
    k: usize,
    seeds: &[u64],
    eval: &EvalOptions,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("empty grid or seed list".into()));
    }
    let folds = kfold_split(items.len(), k, base.seed)?;

    struct Cell {
        row: usize,
        seed: u64,
        fold: usize,
    }
    let mut cells = Vec::new();
    for (row, _) in grid.iter().enumerate() {
        for &seed in seeds {
            for fold in 0..k {
                cells.push(Cell { row, seed, fold });
            }
        }
    }

    let results: Vec<(usize, std::result::Result<FoldMetrics, String>)> = cells
        .par_iter()
        .map(|cell| {
            let set = &grid[cell.row];
            let mut cfg = base.clone();
            cfg.use_aa = set.aa;
            cfg.use_es = set.es;
            cfg.use_cr = set.cr;
            cfg.seed = cell.seed;
            let (train_ids, test_ids) = &folds[cell.fold];
            let outcome = run_cell(items, train_ids, test_ids, &cfg, eval).map(|metrics| {
                FoldMetrics {
                    seed: cell.seed,
                    fold: cell.fold,
                    metrics,
                }
            });
            (cell.row, outcome.map_err(|e| e.to_string()))
        })
        .collect();

    let mut rows = Vec::with_capacity(grid.len());
    for (row, set) in grid.iter().enumerate() {
        let mut per_fold = Vec::new();
        let mut error: Option<String> = None;
        for (r, outcome) in &results {
            if *r != row {
                continue;
            }
            match outcome {
                Ok(m) => per_fold.push(*m),
                Err(e) => error = Some(e.clone()),
            }
        }
        let outcome = match error {
            Some(e) => Err(e),
            None => {
                per_fold.sort_by_key(|f| (f.seed, f.fold));
                let mut cfg = base.clone();
                cfg.use_aa = set.aa;
                cfg.use_es = set.es;
                cfg.use_cr = set.cr;
                Ok(MetricsReport {
                    label: set.label.clone(),
                    config_fingerprint: cfg.fingerprint(),
                    per_fold,
                })
            }
        };
        rows.push(AblationRow {
            label: set.label.clone(),
            outcome,
        });
    }
    Ok(rows)
}

fn run_cell(
    items: &[DatasetItem],
    train_ids: &[usize],
    test_ids: &[usize],
    cfg: &TrainConfig,
    eval: &EvalOptions,
) -> Result<EvalMetrics> {
    let train_items: Vec<DatasetItem> = train_ids.iter().map(|&i| items[i].clone()).collect();
    let outcome = crate::harness::train(&train_items, cfg)?;
    let test_items: Vec<&DatasetItem> = test_ids.iter().map(|&i| &items[i]).collect();
    evaluate_model(&test_items, &outcome.params, &outcome.state, cfg, eval)
}

// ---------------------------------------------------------------------------
// Reporting: CSV, text table, SVG
// ---------------------------------------------------------------------------

fn pct(v: f64) -> f64 {
    100.0 * v
}

/// Mean and std of a metric over the fold cells, in percent, formatted
/// to one decimal each.
fn agg_cell(report: &MetricsReport, pick: fn(&EvalMetrics) -> f64) -> String {
    let (mean, std) = report.mean_std(pick);
    format!("{:.1}\u{b1}{:.1}", pct(mean), pct(std))
}

/// Serializes ablation rows as CSV: a header, one row per
/// `(config, seed, fold)`, and one aggregate row per config.
pub fn metrics_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,seed,fold,map,precision,recall,f1\n");
    for row in rows {
        match &row.outcome {
            Ok(report) => {
                for f in &report.per_fold {
                    out.push_str(&format!(
                        "{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
                        row.label,
                        f.seed,
                        f.fold,
                        pct(f.metrics.map),
                        pct(f.metrics.precision),
                        pct(f.metrics.recall),
                        pct(f.metrics.f1),
                    ));
                }
                out.push_str(&format!(
                    "{},aggregate,,{},{},{},{}\n",
                    row.label,
                    agg_cell(report, |m| m.map),
                    agg_cell(report, |m| m.precision),
                    agg_cell(report, |m| m.recall),
                    agg_cell(report, |m| m.f1),
                ));
            }
            Err(e) => {
                out.push_str(&format!(
                    "{},error,,{},,,\n",
                    row.label,
                    e.replace(',', ";")
                ));
            }
        }
    }
    out
}

/// Renders the grid as an aligned text table in presentation order.
pub fn metrics_table(rows: &[AblationRow]) -> String {
    let pretty = |label: &str| -> String {
        match label {
            "baseline" => "Baseline".to_string(),
            "+all" => "+ All".to_string(),
            other => other.replace('+', " + ").trim().to_string().to_uppercase(),
        }
    };
    let mut lines = vec![format!(
        "{:<14} {:>12} {:>14} {:>12} {:>12}",
        "Model", "mAP (%)", "Precision (%)", "Recall (%)", "F1 (%)"
    )];
    for row in rows {
        match &row.outcome {
            Ok(report) => lines.push(format!(
                "{:<14} {:>12} {:>14} {:>12} {:>12}",
                pretty(&row.label),
                agg_cell(report, |m| m.map),
                agg_cell(report, |m| m.precision),
                agg_cell(report, |m| m.recall),
                agg_cell(report, |m| m.f1),
            )),
            Err(e) => lines.push(format!("{:<14} failed: {e}", pretty(&row.label))),
        }
    }
    lines.join("\n") + "\n"
}

/// Static SVG of a pooled precision-recall curve.
pub fn pr_curve_svg(points: &[(f64, f64)]) -> String {
    let (w, h, m) = (480.0, 360.0, 40.0);
    let x = |recall: f64| m + recall * (w - 2.0 * m);
    let y = |precision: f64| h - m - precision * (h - 2.0 * m);
    let mut path = String::new();
    for (i, &(r, p)) in points.iter().enumerate() {
        path.push_str(&format!(
            "{}{:.2},{:.2} ",
            if i == 0 { "M" } else { "L" },
            x(r),
            y(p)
        ));
    }
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{m}\" y1=\"{ybase}\" x2=\"{xmax}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<text x=\"{xmid}\" y=\"{h2}\" text-anchor=\"middle\" font-size=\"12\">recall</text>\n",
            "<text x=\"12\" y=\"{ymid}\" font-size=\"12\" ",
            "transform=\"rotate(-90 12 {ymid})\" text-anchor=\"middle\">precision</text>\n",
            "<path d=\"{path}\" fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\"/>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = m,
        ybase = h - m,
        xmax = w - m,
        xmid = w / 2.0,
        h2 = h - 12.0,
        ymid = h / 2.0,
        path = path.trim_end(),
    )
}

/// Static SVG bar chart of mean mAP per grid row with std whiskers.
pub fn ablation_bars_svg(rows: &[AblationRow]) -> String {
    let valid: Vec<(&str, f64, f64)> = rows
        .iter()
        .filter_map(|r| {
            r.outcome.as_ref().ok().map(|rep| {
                let (mean, std) = rep.mean_std(|m| m.map);
                (r.label.as_str(), pct(mean), pct(std))
            })
        })
        .collect();
    let (w, h, m) = (560.0, 360.0, 48.0);
    let n = valid.len().max(1) as f64;
    let band = (w - 2.0 * m) / n;
    let top = valid
        .iter()
        .map(|&(_, mean, std)| mean + std)
        .fold(1.0f64, f64::max)
        * 1.1;
    let y = |v: f64| h - m - (v / top) * (h - 2.0 * m);
    let mut body = String::new();
    for (i, &(label, mean, std)) in valid.iter().enumerate() {
        let cx = m + band * (i as f64 + 0.5);
        let bw = band * 0.6;
        body.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4a8fd1\"/>\n",
            cx - bw / 2.0,
            y(mean),
            bw,
            (h - m) - y(mean)
        ));
        body.push_str(&format!(
            "<line x1=\"{cx:.2}\" y1=\"{:.2}\" x2=\"{cx:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            y(mean + std),
            y((mean - std).max(0.0))
        ));
        body.push_str(&format!(
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{label}</text>\n",
            h - m + 14.0
        ));
        body.push_str(&format!(
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{mean:.1}</text>\n",
            y(mean) - 4.0
        ));
    }
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{m}\" y1=\"{ybase}\" x2=\"{xmax}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<text x=\"{xmid}\" y=\"16\" text-anchor=\"middle\" font-size=\"12\">",
            "mean mAP (%) by component subset</text>\n",
            "{body}",
            "</svg>\n"
        ),
        w = w,
        h = h,
        m = m,
        ybase = h - m,
        xmax = w - m,
        xmid = w / 2.0,
        body = body,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::BBox;

    fn det(cx: f64, cy: f64, conf: f64) -> Detection {
        Detection {
            center: (cx, cy),
            bbox: BBox::new(cx - 3.0, cy - 3.0, 6.0, 6.0).unwrap(),
            confidence: conf,
        }
    }

    fn gt(cx: f64, cy: f64, id: usize) -> Annotation {
        Annotation {
            center: (cx, cy),
            bbox: BBox::new(cx - 3.0, cy - 3.0, 6.0, 6.0).unwrap(),
            id,
        }
    }

    #[test]
    fn matching_examples() {
        // Distance 1 under tolerance 2.
        let m = match_detections(&[det(5.0, 5.0, 0.9)], &[gt(5.0, 6.0, 0)], 2.0).unwrap();
        assert_eq!(
            (m.true_positives, m.false_positives, m.false_negatives),
            (1, 0, 0)
        );

        // Two predictions near one ground truth: one TP, one FP.
        let m = match_detections(
            &[det(5.0, 5.0, 0.9), det(5.5, 5.0, 0.8)],
            &[gt(5.0, 5.5, 0)],
            3.0,
        )
        .unwrap();
        assert_eq!(
            (m.true_positives, m.false_positives, m.false_negatives),
            (1, 1, 0)
        );

        // No predictions at all.
        let m = match_detections(&[], &[gt(1.0, 1.0, 0), gt(9.0, 9.0, 1)], 2.0).unwrap();
        assert_eq!(m.false_negatives, 2);
    }

    #[test]
    fn matching_invariants() {
        let preds = vec![det(0.0, 0.0, 0.5), det(10.0, 0.0, 0.9), det(10.5, 0.0, 0.8)];
        let gts = vec![gt(0.5, 0.0, 0), gt(10.2, 0.0, 1)];
        let m = match_detections(&preds, &gts, 2.0).unwrap();
        assert_eq!(m.true_positives, m.pairs.len());
        assert_eq!(m.true_positives + m.false_negatives, gts.len());
        let mut seen = std::collections::BTreeSet::new();
        for &(_, g, _) in &m.pairs {
            assert!(seen.insert(g), "ground truth matched twice");
        }
    }

    #[test]
    fn matching_rejects_bad_tolerance() {
        assert!(match_detections(&[], &[], 0.0).is_err());
    }

    #[test]
    fn prf1_examples() {
        let m = MatchResult {
            true_positives: 3,
            false_positives: 2,
            false_negatives: 1,
            pairs: Vec::new(),
        };
        let (p, r, f1) = prf1(&m);
        assert!((p - 0.6).abs() < 1e-12);
        assert!((r - 0.75).abs() < 1e-12);
        assert!((f1 - 0.666_666_666_666_666_6).abs() < 1e-9);

        // P == R implies F1 == P.
        let m = MatchResult {
            true_positives: 2,
            false_positives: 2,
            false_negatives: 2,
            pairs: Vec::new(),
        };
        let (p, _, f1) = prf1(&m);
        assert!((f1 - p).abs() < 1e-12);

        // All-zero convention.
        let m = MatchResult {
            true_positives: 0,
            false_positives: 0,
            false_negatives: 0,
            pairs: Vec::new(),
        };
        assert_eq!(prf1(&m), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ap_examples() {
        // Single correct prediction.
        let ap = average_precision(&[det(5.0, 5.0, 0.9)], &[gt(5.0, 5.0, 0)], 2.0).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);

        // FP ranked above a TP with one ground truth: AP = 0.5.
        let ap = average_precision(
            &[det(50.0, 50.0, 0.9), det(5.0, 5.0, 0.8)],
            &[gt(5.0, 5.0, 0)],
            2.0,
        )
        .unwrap();
        assert!((ap - 0.5).abs() < 1e-12);

        // Zero ground truths are undefined.
        assert!(matches!(
            average_precision(&[det(1.0, 1.0, 0.5)], &[], 2.0),
            Err(Error::Undefined(_))
        ));

        // No predictions but some ground truths: zero recall, AP 0.
        let ap = average_precision(&[], &[gt(1.0, 1.0, 0)], 2.0).unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts: Vec<Annotation> = (0..5).map(|i| gt(10.0 * i as f64, 0.0, i)).collect();
        let preds: Vec<Detection> = gts
            .iter()
            .map(|g| det(g.center.0, g.center.1 + 0.5, 0.9))
            .collect();
        let ap = average_precision(&preds, &gts, 2.0).unwrap();
        assert_eq!(ap, 1.0);
        let m = match_detections(&preds, &gts, 2.0).unwrap();
        let (p, r, f1) = prf1(&m);
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn raising_a_tp_confidence_never_lowers_ap() {
        let gts = vec![gt(0.0, 0.0, 0), gt(20.0, 0.0, 1), gt(40.0, 0.0, 2)];
        let mut preds = vec![
            det(0.5, 0.0, 0.3),
            det(60.0, 0.0, 0.8),
            det(20.0, 0.5, 0.5),
            det(80.0, 0.0, 0.4),
        ];
        let before = average_precision(&preds, &gts, 2.0).unwrap();
        preds[0].confidence = 0.95; // a true positive climbs the ranking
        let after = average_precision(&preds, &gts, 2.0).unwrap();
        assert!(after >= before - 1e-12, "{after} < {before}");
    }

    #[test]
    fn kfold_examples() {
        let folds = kfold_split(10, 5, 7).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<usize> = Vec::new();
        for (train, test) in &folds {
            assert_eq!(test.len(), 2);
            assert_eq!(train.len(), 8);
            all.extend(test);
        }
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        // Same seed, same folds; different seed, different folds.
        assert_eq!(folds, kfold_split(10, 5, 7).unwrap());
        assert_ne!(folds, kfold_split(10, 5, 8).unwrap());

        // Uneven split sizes differ by at most one.
        let folds = kfold_split(11, 3, 1).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|(_, t)| t.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 11);
        assert!(sizes.iter().all(|&s| s == 3 || s == 4));

        assert!(kfold_split(4, 1, 0).is_err());
        assert!(kfold_split(4, 5, 0).is_err());
    }

    #[test]
    fn csv_shape_and_determinism() {
        let report = MetricsReport {
            label: "baseline".into(),
            config_fingerprint: "abc".into(),
            per_fold: vec![
                FoldMetrics {
                    seed: 0,
                    fold: 0,
                    metrics: EvalMetrics {
                        map: 0.615,
                        precision: 0.593,
                        recall: 0.621,
                        f1: 0.607,
                    },
                },
                FoldMetrics {
                    seed: 0,
                    fold: 1,
                    metrics: EvalMetrics {
                        map: 0.631,
                        precision: 0.601,
                        recall: 0.633,
                        f1: 0.617,
                    },
                },
            ],
        };
        let rows = vec![AblationRow {
            label: "baseline".into(),
            outcome: Ok(report),
        }];
        let csv = metrics_csv(&rows);
        assert_eq!(csv, metrics_csv(&rows));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4, "header + 2 folds + aggregate");
        assert!(lines[0].starts_with("config,seed,fold"));
        assert!(lines[3].contains("aggregate"));
        assert!(lines[3].contains('\u{b1}'));

        let table = metrics_table(&rows);
        assert!(table.contains("Baseline"));
    }

    #[test]
    fn svg_outputs_are_valid_shaped() {
        let points = vec![(0.0, 1.0), (0.5, 0.9), (1.0, 0.7)];
        let svg = pr_curve_svg(&points);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<path"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
