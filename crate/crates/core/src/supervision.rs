//! Matching, losses and their analytic gradients.
//!
//! Every loss primitive returns its value together with the gradient with
//! respect to its prediction argument, so the pipeline can chain them
//! through the network by hand.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geom::{mask_iou, Aabb, Scene};
use crate::nn::{sigmoid, softmax, softplus};

/// Floor applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma_mask: f64,
    pub lambda_box: f64,
    pub lambda_mask: f64,
    pub lambda_ms: f64,
    /// Class-loss weight of candidates left unmatched (targeted at no-object).
    pub no_object_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma_mask: 5.0,
            lambda_box: 1.0,
            lambda_mask: 5.0,
            lambda_ms: 1.0,
            no_object_weight: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gamma_mask,
            self.lambda_box,
            self.lambda_mask,
            self.lambda_ms,
            self.no_object_weight,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// loss primitives

/// Dice loss and its gradient with respect to the soft prediction.
pub fn dice_loss_grad(pred: &[f64], gt: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_len(pred.len(), gt.len())?;
    let (mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let g = g as u8 as f64;
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    let denom = sum_p + sum_g;
    if denom <= 0.0 {
        return Ok((0.0, vec![0.0; pred.len()]));
    }
    let value = 1.0 - 2.0 * inter / denom;
    let grad = gt
        .iter()
        .map(|&g| -2.0 * (g as u8 as f64) / denom + 2.0 * inter / (denom * denom))
        .collect();
    Ok((value, grad))
}

/// Mean binary cross-entropy computed from logits, with the gradient with
/// respect to the logits.
pub fn bce_with_logits(logits: &[f64], gt: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_len(logits.len(), gt.len())?;
    let n = logits.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &g) in logits.iter().zip(gt) {
        let t = g as u8 as f64;
        value += softplus(z) - t * z;
        grad.push((sigmoid(z) - t) / n);
    }
    Ok((value / n, grad))
}

/// Binary cross-entropy of probabilities, clamped away from 0 and 1.
pub fn bce(pred: &[f64], gt: &[bool]) -> Result<f64> {
    check_len(pred.len(), gt.len())?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            if g {
                -p.max(LOG_EPS).ln()
            } else {
                -(1.0 - p).max(LOG_EPS).ln()
            }
        })
        .sum::<f64>()
        / n)
}

/// Softmax cross-entropy of one logit row.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    let mut probs = softmax(logits);
    let value = -probs[target].max(LOG_EPS).ln();
    probs[target] -= 1.0;
    Ok((value, probs))
}

/// Mean absolute difference over the six box coordinates.
pub fn box_l1(pred: &[f64; 6], gt: &[f64; 6]) -> (f64, [f64; 6]) {
    let mut value = 0.0;
    let mut grad = [0.0; 6];
    for c in 0..6 {
        let d = pred[c] - gt[c];
        value += d.abs();
        grad[c] = if d > 0.0 {
            1.0 / 6.0
        } else if d < 0.0 {
            -1.0 / 6.0
        } else {
            0.0
        };
    }
    (value / 6.0, grad)
}

/// Generalized IoU of `pred` against `gt` and its gradient with respect to
/// `pred`. At coinciding faces the gradient uses the branch where neither
/// the intersection nor the hull moves with the predicted face.
pub fn giou_grad(pred: &[f64; 6], gt: &[f64; 6]) -> (f64, [f64; 6]) {
    let a = Aabb::from_array(*pred);
    let b = Aabb::from_array(*gt);
    let giou = a.giou(&b);

    let mut ext_a = [0.0; 3];
    let mut w = [0.0; 3];
    let mut h = [0.0; 3];
    for d in 0..3 {
        ext_a[d] = (pred[3 + d] - pred[d]).max(0.0);
        w[d] = (pred[3 + d].min(gt[3 + d]) - pred[d].max(gt[d])).max(0.0);
        h[d] = pred[3 + d].max(gt[3 + d]) - pred[d].min(gt[d]);
    }
    let inter: f64 = w.iter().product();
    let vol_a: f64 = ext_a.iter().product();
    let union = vol_a + b.volume() - inter;
    let hull: f64 = h.iter().product();
    if union <= 0.0 || hull <= 0.0 {
        return (giou, [0.0; 6]);
    }
    let d_inter = (union + inter) / (union * union) - 1.0 / hull;
    let d_vol = -inter / (union * union) + 1.0 / hull;
    let d_hull = -union / (hull * hull);

    let others = |v: &[f64; 3], d: usize| -> f64 { (0..3).filter(|&e| e != d).map(|e| v[e]).product() };
    let mut grad = [0.0; 6];
    for d in 0..3 {
        let (lo, hi) = (d, 3 + d);
        let vol_side = others(&ext_a, d);
        grad[hi] += d_vol * vol_side;
        grad[lo] -= d_vol * vol_side;
        if w[d] > 0.0 {
            let inter_side = others(&w, d);
            if pred[hi] < gt[hi] {
                grad[hi] += d_inter * inter_side;
            }
            if pred[lo] > gt[lo] {
                grad[lo] -= d_inter * inter_side;
            }
        }
        let hull_side = others(&h, d);
        if pred[hi] > gt[hi] {
            grad[hi] += d_hull * hull_side;
        }
        if pred[lo] < gt[lo] {
            grad[lo] -= d_hull * hull_side;
        }
    }
    (giou, grad)
}

/// `L1 + (1 - gIoU)` and its gradient.
pub fn box_loss(pred: &[f64; 6], gt: &[f64; 6]) -> (f64, [f64; 6]) {
    let (l1, g1) = box_l1(pred, gt);
    let (giou, gg) = giou_grad(pred, gt);
    let mut grad = [0.0; 6];
    for c in 0..6 {
        grad[c] = g1[c] - gg[c];
    }
    (l1 + 1.0 - giou, grad)
}

/// Squared error between a quality logit's sigmoid and the realized IoU;
/// gradient is with respect to the logit.
pub fn mask_score_loss(quality_logit: f64, target_iou: f64) -> (f64, f64) {
    let q = sigmoid(quality_logit);
    let diff = q - target_iou;
    (diff * diff, 2.0 * diff * q * (1.0 - q))
}

// ---------------------------------------------------------------------------
// matching

/// `γ_mask · dice(m̂, m) - log p(class)`.
pub fn matching_cost(
    pred_mask: &[f64],
    class_probs: &[f64],
    gt_mask: &[bool],
    gt_class: usize,
    gamma_mask: f64,
) -> Result<f64> {
    let (dice, _) = dice_loss_grad(pred_mask, gt_mask)?;
    let p = *class_probs.get(gt_class).ok_or(Error::IndexOutOfRange {
        index: gt_class,
        len: class_probs.len(),
    })?;
    Ok(gamma_mask * dice - p.max(LOG_EPS).ln())
}

/// Candidate-to-ground-truth pairs of a one-to-many assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    /// `(candidate, gt)` sorted by candidate.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub duplication: usize,
}

impl Assignment {
    pub fn total_cost(&self, cost: ArrayView2<f64>) -> f64 {
        self.pairs.iter().map(|&(k, j)| cost[[k, j]]).sum()
    }

    pub fn matched_gt(&self, candidate: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == candidate).map(|p| p.1)
    }
}

/// Minimum-cost assignment of rows to distinct columns for `rows <= cols`
/// (shortest augmenting paths with potentials).
fn hungarian_rows(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Rectangular minimum-cost assignment. Returns `(row, col)` pairs,
/// `min(rows, cols)` of them.
pub fn linear_assignment(cost: ArrayView2<f64>) -> Result<Vec<(usize, usize)>> {
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("cost matrix"));
    }
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Ok(Vec::new());
    }
    let mut pairs = if n <= m {
        hungarian_rows(&cost.to_owned())
            .into_iter()
            .enumerate()
            .collect::<Vec<_>>()
    } else {
        hungarian_rows(&cost.t().to_owned())
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    };
    pairs.sort_unstable();
    Ok(pairs)
}

/// Matches candidates to ground truths where every ground truth may take up
/// to `s` candidates: the cost columns are repeated `s` times and solved as
/// one rectangular assignment.
pub fn one_to_many_match(cost: ArrayView2<f64>, s: usize) -> Result<Assignment> {
    let (k, j) = cost.dim();
    if k == 0 || j == 0 {
        return Err(Error::invalid("cost matrix needs at least one row and column"));
    }
    if s == 0 {
        return Err(Error::invalid("duplication factor must be at least 1"));
    }
    let expanded = Array2::from_shape_fn((k, j * s), |(r, c)| cost[[r, c / s]]);
    let pairs: Vec<(usize, usize)> = linear_assignment(expanded.view())?
        .into_iter()
        .map(|(r, c)| (r, c / s))
        .collect();
    let mut matched = vec![false; k];
    for &(r, _) in &pairs {
        matched[r] = true;
    }
    Ok(Assignment {
        pairs,
        unmatched: (0..k).filter(|&r| !matched[r]).collect(),
        duplication: s,
    })
}

// ---------------------------------------------------------------------------
// instance loss

/// Ground-truth instances of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub masks: Vec<Vec<bool>>,
    pub classes: Vec<usize>,
    pub boxes: Vec<[f64; 6]>,
}

impl GroundTruth {
    pub fn from_scene(scene: &Scene) -> Self {
        let j = scene.num_instances();
        GroundTruth {
            masks: (0..j).map(|i| scene.instance_mask(i)).collect(),
            classes: scene.instance_classes().into_iter().map(|c| c as usize).collect(),
            boxes: scene.instance_boxes().iter().map(Aabb::to_array).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Candidate outputs entering the instance loss.
#[derive(Clone, Copy, Debug)]
pub struct CandidateOutputs<'a> {
    /// `K x (C + 1)`, last column no-object.
    pub class_logits: ArrayView2<'a, f64>,
    /// `K x N` pre-sigmoid mask logits.
    pub mask_logits: ArrayView2<'a, f64>,
    pub boxes: &'a [[f64; 6]],
    pub quality_logits: ArrayView1<'a, f64>,
}

/// Matching cost between every candidate and every ground truth.
pub fn cost_matrix(out: &CandidateOutputs, gt: &GroundTruth, weights: &LossWeights) -> Result<Array2<f64>> {
    let k = out.class_logits.nrows();
    let mut cost = Array2::zeros((k, gt.len()));
    for c in 0..k {
        let probs = softmax(&out.class_logits.row(c).to_vec());
        let mask: Vec<f64> = out.mask_logits.row(c).iter().map(|&z| sigmoid(z)).collect();
        for (j, (m, &cls)) in gt.masks.iter().zip(&gt.classes).enumerate() {
            cost[[c, j]] = matching_cost(&mask, &probs, m, cls, weights.gamma_mask)?;
        }
    }
    Ok(cost)
}

/// Instance loss terms and gradients with respect to the candidate outputs.
#[derive(Clone, Debug)]
pub struct InstanceLoss {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub ms: f64,
    pub d_class_logits: Array2<f64>,
    /// Non-zero only on matched rows.
    pub d_mask_logits: Array2<f64>,
    pub d_boxes: Vec<[f64; 6]>,
    pub d_quality_logits: Array1<f64>,
}

/// `L_cls + λ_box L_box + λ_mask L_mask + λ_ms L_MS` over one assignment.
pub fn instance_loss(
    assignment: &Assignment,
    out: &CandidateOutputs,
    gt: &GroundTruth,
    weights: &LossWeights,
) -> Result<InstanceLoss> {
    let (k, classes) = out.class_logits.dim();
    let n = out.mask_logits.ncols();
    check_len(k, out.mask_logits.nrows())?;
    check_len(k, out.boxes.len())?;
    check_len(k, out.quality_logits.len())?;
    let no_object = classes - 1;

    let mut target = vec![no_object; k];
    let mut class_w = vec![weights.no_object_weight; k];
    for &(c, j) in &assignment.pairs {
        if c >= k || j >= gt.len() {
            return Err(Error::invalid(format!("assignment pair ({c}, {j}) out of range")));
        }
        if gt.classes[j] >= no_object {
            return Err(Error::invalid(format!("gt class {} has no logit", gt.classes[j])));
        }
        target[c] = gt.classes[j];
        class_w[c] = 1.0;
    }
    let w_sum: f64 = class_w.iter().sum();
    let mut d_class_logits = Array2::zeros((k, classes));
    let mut cls = 0.0;
    if w_sum > 0.0 {
        for c in 0..k {
            let (ce, g) = cross_entropy(&out.class_logits.row(c).to_vec(), target[c])?;
            cls += class_w[c] * ce / w_sum;
            for (dst, gv) in d_class_logits.row_mut(c).iter_mut().zip(g) {
                *dst = class_w[c] * gv / w_sum;
            }
        }
    }

    let mut d_mask_logits = Array2::zeros((k, n));
    let mut d_boxes = vec![[0.0; 6]; k];
    let mut d_quality_logits = Array1::zeros(k);
    let (mut mask, mut bbox, mut ms) = (0.0, 0.0, 0.0);
    let pairs = assignment.pairs.len();
    if pairs > 0 {
        let scale = 1.0 / pairs as f64;
        for &(c, j) in &assignment.pairs {
            let gt_mask = &gt.masks[j];
            check_len(n, gt_mask.len())?;
            let logits = out.mask_logits.row(c).to_vec();
            let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let (dice, d_dice) = dice_loss_grad(&probs, gt_mask)?;
            let (bce_v, d_bce) = bce_with_logits(&logits, gt_mask)?;
            mask += (dice + bce_v) * scale;
            for (i, dst) in d_mask_logits.row_mut(c).iter_mut().enumerate() {
                let dz_dice = d_dice[i] * probs[i] * (1.0 - probs[i]);
                *dst = weights.lambda_mask * scale * (dz_dice + d_bce[i]);
            }

            let (b, db) = box_loss(&out.boxes[c], &gt.boxes[j]);
            bbox += b * scale;
            for e in 0..6 {
                d_boxes[c][e] = weights.lambda_box * scale * db[e];
            }

            let binary: Vec<bool> = logits.iter().map(|&z| sigmoid(z) > crate::geom::BINARIZE_THRESHOLD).collect();
            let iou = mask_iou(&binary, gt_mask)?;
            let (m, dm) = mask_score_loss(out.quality_logits[c], iou);
            ms += m * scale;
            d_quality_logits[c] = weights.lambda_ms * scale * dm;
        }
    }
    let total = cls + weights.lambda_box * bbox + weights.lambda_mask * mask + weights.lambda_ms * ms;
    Ok(InstanceLoss {
        total,
        cls,
        bbox,
        mask,
        ms,
        d_class_logits,
        d_mask_logits,
        d_boxes,
        d_quality_logits,
    })
}

/// Point-level loss terms and gradients.
#[derive(Clone, Debug)]
pub struct PointwiseLoss {
    pub total: f64,
    pub semantic: f64,
    pub bbox: f64,
    pub d_semantic_logits: Array2<f64>,
    pub d_boxes: Vec<[f64; 6]>,
}

/// Mean semantic cross-entropy plus mean `L1 + (1 - gIoU)` between each
/// instance point's box and its instance's ground-truth box.
pub fn pointwise_loss(semantic_logits: ArrayView2<f64>, point_boxes: &[[f64; 6]], scene: &Scene) -> Result<PointwiseLoss> {
    let n = scene.len();
    check_len(n, semantic_logits.nrows())?;
    check_len(n, point_boxes.len())?;
    let mut d_semantic_logits = Array2::zeros(semantic_logits.dim());
    let mut semantic = 0.0;
    for i in 0..n {
        let (ce, g) = cross_entropy(&semantic_logits.row(i).to_vec(), scene.semantic[i] as usize)?;
        semantic += ce / n as f64;
        for (dst, gv) in d_semantic_logits.row_mut(i).iter_mut().zip(g) {
            *dst = gv / n as f64;
        }
    }
    let gt_boxes: Vec<[f64; 6]> = scene.instance_boxes().iter().map(Aabb::to_array).collect();
    let inst_points = scene.instance.iter().filter(|&&i| i >= 0).count();
    let mut d_boxes = vec![[0.0; 6]; n];
    let mut bbox = 0.0;
    if inst_points > 0 {
        let scale = 1.0 / inst_points as f64;
        for i in 0..n {
            let inst = scene.instance[i];
            if inst < 0 {
                continue;
            }
            let (b, db) = box_loss(&point_boxes[i], &gt_boxes[inst as usize]);
            bbox += b * scale;
            for e in 0..6 {
                d_boxes[i][e] = db[e] * scale;
            }
        }
    }
    Ok(PointwiseLoss {
        total: semantic + bbox,
        semantic,
        bbox,
        d_semantic_logits,
        d_boxes,
    })
}

/// Loss values of one training step plus the flattened parameter gradient.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub inst: f64,
    pub cls: f64,
    pub bbox: f64,
    pub mask: f64,
    pub ms: f64,
    pub semantic: f64,
    pub point_box: f64,
    #[serde(skip)]
    pub gradient: Vec<f64>,
}

impl LossReport {
    /// Recomputes the instance loss from its components.
    pub fn weighted_inst(&self, w: &LossWeights) -> f64 {
        self.cls + w.lambda_box * self.bbox + w.lambda_mask * self.mask + w.lambda_ms * self.ms
    }
}

// ---------------------------------------------------------------------------
// gradient checking

/// Largest `|a - f| / max(1, |a|, |f|)` between the analytic gradient
/// returned by `loss` and central differences with step `eps`.
pub fn fd_gradient_check<F>(loss: F, params: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (value, analytic) = loss(params)?;
    if !value.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("analytic loss or gradient"));
    }
    check_len(params.len(), analytic.len())?;
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let (plus, _) = loss(&x)?;
        x[i] = orig - eps;
        let (minus, _) = loss(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("perturbed loss"));
        }
        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
    }
    Ok(worst)
}
