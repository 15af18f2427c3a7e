//! Instance-segmentation and detection metrics.
//!
//! AP follows the usual benchmark recipe: per class, predictions from all
//! scenes are ranked by score and greedily matched to the unmatched ground
//! truth of highest IoU at or above the threshold; the area under the
//! precision/recall curve uses all-point interpolation. Class APs are
//! averaged over classes that have ground truth, then over thresholds.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geom::{mask_iou, Aabb};
use crate::pipeline::Prediction;
use crate::supervision::GroundTruth;

/// `0.50, 0.55, ..., 0.95`.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Mask IoU between a prediction and ground-truth instance `j`.
pub fn mask_iou_fn(p: &Prediction, gt: &GroundTruth, j: usize) -> Result<f64> {
    mask_iou(&p.mask, &gt.masks[j])
}

/// Box IoU between a prediction and ground-truth instance `j`.
pub fn box_iou_fn(p: &Prediction, gt: &GroundTruth, j: usize) -> Result<f64> {
    Ok(Aabb::from_array(p.bbox).iou(&Aabb::from_array(gt.boxes[j])))
}

/// AP averaged over classes and thresholds, with the per-class values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub mean: f64,
    /// Mean over classes at each threshold.
    pub per_threshold: Vec<f64>,
    /// `(class, AP averaged over thresholds)` for every class with ground truth.
    pub per_class: Vec<(usize, f64)>,
}

/// Area under the precision/recall curve of one ranked list, where
/// `hits[i]` says whether the `i`-th prediction is a true positive.
pub fn ap_from_hits(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // precision envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Ranked true-positive flags of class `class` at one threshold.
fn class_hits<F>(
    preds: &[Vec<Prediction>],
    gts: &[GroundTruth],
    class: usize,
    threshold: f64,
    iou_fn: &F,
) -> Result<(Vec<bool>, usize)>
where
    F: Fn(&Prediction, &GroundTruth, usize) -> Result<f64>,
{
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (s, scene) in preds.iter().enumerate() {
        for (i, p) in scene.iter().enumerate() {
            if p.class == class {
                ranked.push((s, i));
            }
        }
    }
    ranked.sort_by(|a, b| preds[b.0][b.1].score.total_cmp(&preds[a.0][a.1].score).then(a.cmp(b)));
    let num_gt = gts.iter().map(|g| g.classes.iter().filter(|&&c| c == class).count()).sum();
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for (s, i) in ranked {
        let p = &preds[s][i];
        let gt = &gts[s];
        let mut best: Option<(usize, f64)> = None;
        for j in 0..gt.len() {
            if used[s][j] || gt.classes[j] != class {
                continue;
            }
            let iou = iou_fn(p, gt, j)?;
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, _)) => {
                used[s][j] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    Ok((hits, num_gt))
}

/// Mean AP over classes with ground truth and over `thresholds`.
pub fn average_precision<F>(
    preds: &[Vec<Prediction>],
    gts: &[GroundTruth],
    iou_fn: F,
    thresholds: &[f64],
) -> Result<ApResult>
where
    F: Fn(&Prediction, &GroundTruth, usize) -> Result<f64>,
{
    check_len(gts.len(), preds.len())?;
    if thresholds.is_empty() {
        return Err(Error::invalid("no IoU thresholds"));
    }
    let classes: BTreeSet<usize> = gts.iter().flat_map(|g| g.classes.iter().copied()).collect();
    if classes.is_empty() {
        return Err(Error::NoInstances);
    }
    let mut table = vec![vec![0.0; thresholds.len()]; classes.len()];
    for (ci, &c) in classes.iter().enumerate() {
        for (ti, &t) in thresholds.iter().enumerate() {
            let (hits, num_gt) = class_hits(preds, gts, c, t, &iou_fn)?;
            table[ci][ti] = ap_from_hits(&hits, num_gt);
        }
    }
    let nc = classes.len() as f64;
    let nt = thresholds.len() as f64;
    let per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|t| table.iter().map(|row| row[t]).sum::<f64>() / nc)
        .collect();
    let per_class = classes
        .iter()
        .zip(&table)
        .map(|(&c, row)| (c, row.iter().sum::<f64>() / nt))
        .collect();
    Ok(ApResult {
        mean: per_threshold.iter().sum::<f64>() / nt,
        per_threshold,
        per_class,
    })
}

/// Coverage, weighted coverage, and precision / recall at IoU 0.5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub mcov: f64,
    pub mwcov: f64,
    pub mprec50: f64,
    pub mrec50: f64,
}

/// Coverage metrics over binarized masks. Coverage is class-agnostic;
/// precision and recall count same-class matches at IoU >= 0.5 and are
/// averaged over classes with ground truth.
pub fn coverage_metrics(preds: &[Vec<Prediction>], gts: &[GroundTruth]) -> Result<Coverage> {
    check_len(gts.len(), preds.len())?;
    let total_gt: usize = gts.iter().map(GroundTruth::len).sum();
    if total_gt == 0 {
        return Err(Error::NoInstances);
    }
    let (mut cov, mut wcov, mut weight) = (0.0, 0.0, 0.0);
    for (scene_preds, gt) in preds.iter().zip(gts) {
        for m in &gt.masks {
            let mut best: f64 = 0.0;
            for p in scene_preds {
                best = best.max(mask_iou(&p.mask, m)?);
            }
            let size = m.iter().filter(|&&v| v).count() as f64;
            cov += best;
            wcov += best * size;
            weight += size;
        }
    }
    let classes: BTreeSet<usize> = gts.iter().flat_map(|g| g.classes.iter().copied()).collect();
    let (mut prec_sum, mut rec_sum) = (0.0, 0.0);
    for &c in &classes {
        let (mut tp_pred, mut n_pred, mut tp_gt, mut n_gt) = (0usize, 0usize, 0usize, 0usize);
        for (scene_preds, gt) in preds.iter().zip(gts) {
            let gt_idx: Vec<usize> = (0..gt.len()).filter(|&j| gt.classes[j] == c).collect();
            let class_preds: Vec<&Prediction> = scene_preds.iter().filter(|p| p.class == c).collect();
            n_pred += class_preds.len();
            n_gt += gt_idx.len();
            let mut gt_hit = vec![false; gt_idx.len()];
            for p in &class_preds {
                let mut hit = false;
                for (g, &j) in gt_idx.iter().enumerate() {
                    if mask_iou(&p.mask, &gt.masks[j])? >= 0.5 {
                        hit = true;
                        gt_hit[g] = true;
                    }
                }
                tp_pred += hit as usize;
            }
            tp_gt += gt_hit.iter().filter(|&&h| h).count();
        }
        if n_pred > 0 {
            prec_sum += tp_pred as f64 / n_pred as f64;
        }
        rec_sum += tp_gt as f64 / n_gt as f64;
    }
    let nc = classes.len() as f64;
    Ok(Coverage {
        mcov: cov / total_gt as f64,
        mwcov: if weight > 0.0 { wcov / weight } else { 0.0 },
        mprec50: prec_sum / nc,
        mrec50: rec_sum / nc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub num_gt: usize,
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub box_ap50: f64,
    pub box_ap25: f64,
    pub mcov: f64,
    pub mwcov: f64,
    pub mprec50: f64,
    pub mrec50: f64,
    pub per_class: Vec<ClassReport>,
}

impl EvalReport {
    /// Per-class table as CSV with a header row.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,num_gt,ap,ap50,ap25\n");
        for c in &self.per_class {
            out.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", c.class, c.num_gt, c.ap, c.ap50, c.ap25));
        }
        out
    }
}

/// Every metric over a set of scenes.
pub fn evaluate(preds: &[Vec<Prediction>], gts: &[GroundTruth]) -> Result<EvalReport> {
    let ap = average_precision(preds, gts, mask_iou_fn, &ap_thresholds())?;
    let ap50 = average_precision(preds, gts, mask_iou_fn, &[0.5])?;
    let ap25 = average_precision(preds, gts, mask_iou_fn, &[0.25])?;
    let box50 = average_precision(preds, gts, box_iou_fn, &[0.5])?;
    let box25 = average_precision(preds, gts, box_iou_fn, &[0.25])?;
    let cov = coverage_metrics(preds, gts)?;
    let per_class = ap
        .per_class
        .iter()
        .zip(&ap50.per_class)
        .zip(&ap25.per_class)
        .map(|((&(class, a), &(_, a50)), &(_, a25))| ClassReport {
            class,
            num_gt: gts.iter().map(|g| g.classes.iter().filter(|&&c| c == class).count()).sum(),
            ap: a,
            ap50: a50,
            ap25: a25,
        })
        .collect();
    Ok(EvalReport {
        ap: ap.mean,
        ap50: ap50.mean,
        ap25: ap25.mean,
        box_ap50: box50.mean,
        box_ap25: box25.mean,
        mcov: cov.mcov,
        mwcov: cov.mwcov,
        mprec50: cov.mprec50,
        mrec50: cov.mrec50,
        per_class,
    })
}
