//! End-to-end pipeline: point encoder, pointwise predictor, candidate
//! sampling and aggregation, mask decoding, post-processing and training.

mod infer;
mod model;
mod step;
mod train;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::aggregator::decode_boxes;
use crate::error::{check_len, Error, Result};
use crate::geom::{dist2, mask_iou, voxelize, Point3, Scene, SoftMask, BINARIZE_THRESHOLD};
use crate::nn::{softmax, MlpTrace};
use crate::sampling::{SampleBudget, DEFAULT_TAU};
use crate::supervision::LossWeights;

pub use infer::{infer, infer_raw, infer_timed, postprocess, InferenceOutput, Prediction, StageTimings};
pub use model::{ModelConfig, ModelParams, ENCODER_INPUT_DIM, MODEL_MAGIC, MODEL_VERSION};
pub use step::{loss_and_grad, SceneCache};
pub use train::{train, train_from, validate, EpochLog, OptimizerConfig, TrainConfig, TrainLog};

/// Neighbors used for the encoder's local statistics.
pub const ENCODER_NEIGHBORS: usize = 16;

/// Where voxel features are expanded back to points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expansion {
    /// Expand right after voxelization; the network runs per point.
    Early,
    /// Run the encoder and pointwise heads per voxel, expand afterwards.
    #[default]
    Late,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tau: f64,
    /// Inference chunk schedule.
    pub chunks: SampleBudget,
    /// Candidates sampled at once during training.
    pub k_train: usize,
    pub nms_threshold: f64,
    pub binarize_threshold: f64,
    pub background_classes: Vec<u32>,
    /// `None` disables voxelization.
    pub voxel_size: Option<f64>,
    pub expansion: Expansion,
    pub superpoint_align: bool,
    /// Ground-truth duplication `S` in one-to-many matching.
    pub duplication: usize,
    pub loss: LossWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tau: DEFAULT_TAU,
            chunks: SampleBudget::default(),
            k_train: 256,
            nms_threshold: 0.2,
            binarize_threshold: BINARIZE_THRESHOLD,
            background_classes: vec![0],
            voxel_size: Some(0.02),
            expansion: Expansion::Late,
            superpoint_align: true,
            duplication: 4,
            loss: LossWeights::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings sized for scenes of a few thousand points: fewer
    /// candidates, no voxelization and no superpoint snapping.
    pub fn desk() -> Self {
        PipelineConfig {
            chunks: SampleBudget::proportional(96).expect("static budget"),
            k_train: 64,
            voxel_size: None,
            superpoint_align: false,
            ..PipelineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("nms_threshold", self.nms_threshold),
            ("binarize_threshold", self.binarize_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        SampleBudget::new(self.chunks.chunk_sizes.clone())?;
        if self.k_train == 0 || self.duplication == 0 {
            return Err(Error::invalid("k_train and duplication must be positive"));
        }
        if let Some(v) = self.voxel_size {
            if !(v > 0.0) {
                return Err(Error::invalid("voxel size must be positive"));
            }
        }
        self.loss.validate()
    }

    pub fn is_background(&self, class: usize) -> bool {
        self.background_classes.iter().any(|&c| c as usize == class)
    }
}

/// Per-point encoder input: position, color, and the mean offset, position
/// spread, mean color and color spread of the 16 nearest neighbors (the
/// point itself included).
pub fn encoder_inputs(scene: &Scene) -> Array2<f64> {
    let n = scene.len();
    let k = ENCODER_NEIGHBORS.min(n);
    let mut out = Array2::zeros((n, ENCODER_INPUT_DIM));
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let p = scene.positions[i];
        order.clear();
        order.extend(scene.positions.iter().enumerate().map(|(j, q)| (dist2(&p, q), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        let nbrs = &order[..k];
        let mut row = out.row_mut(i);
        let c = scene.colors[i];
        for d in 0..3 {
            row[d] = p[d];
            row[3 + d] = c[d];
        }
        for d in 0..3 {
            let (mut sp, mut sp2, mut sc, mut sc2) = (0.0, 0.0, 0.0, 0.0);
            for &(_, j) in nbrs {
                let off = scene.positions[j][d] - p[d];
                let col = scene.colors[j][d];
                sp += off;
                sp2 += off * off;
                sc += col;
                sc2 += col * col;
            }
            let kf = k as f64;
            let mp = sp / kf;
            let mc = sc / kf;
            row[6 + d] = mp;
            row[9 + d] = (sp2 / kf - mp * mp).max(0.0).sqrt();
            row[12 + d] = mc;
            row[15 + d] = (sc2 / kf - mc * mc).max(0.0).sqrt();
        }
    }
    out
}

/// Rows the network runs on and the row each point reads from.
#[derive(Clone, Debug)]
pub struct EncoderRows {
    pub inputs: Array2<f64>,
    pub row_of_point: Vec<usize>,
}

impl EncoderRows {
    /// Builds the rows for `scene` under the voxel and expansion settings.
    /// With voxels, a voxel's row is the mean of its points' inputs; early
    /// expansion copies that row back to every member point.
    pub fn build(scene: &Scene, config: &PipelineConfig) -> Result<Self> {
        let per_point = encoder_inputs(scene);
        let Some(size) = config.voxel_size else {
            return Ok(EncoderRows {
                inputs: per_point,
                row_of_point: (0..scene.len()).collect(),
            });
        };
        let map = voxelize(&scene.positions, size)?;
        let mut voxel_inputs = Array2::zeros((map.num_voxels, per_point.ncols()));
        for (v, members) in map.members().iter().enumerate() {
            let mut row = voxel_inputs.row_mut(v);
            for &i in members {
                row += &per_point.row(i);
            }
            row /= members.len() as f64;
        }
        Ok(match config.expansion {
            Expansion::Late => EncoderRows {
                inputs: voxel_inputs,
                row_of_point: map.point_to_voxel,
            },
            Expansion::Early => EncoderRows {
                inputs: crate::geom::devoxelize_late(voxel_inputs.view(), &map)?,
                row_of_point: (0..scene.len()).collect(),
            },
        })
    }

    pub fn expand(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        rows.select(Axis(0), &self.row_of_point)
    }

    /// Transpose of [`EncoderRows::expand`].
    pub fn collapse(&self, points: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.inputs.nrows(), points.ncols()));
        for (i, &r) in self.row_of_point.iter().enumerate() {
            let mut dst = out.row_mut(r);
            dst += &points.row(i);
        }
        out
    }
}

/// Point features `N x D` for a scene.
pub fn encode(scene: &Scene, params: &ModelParams, config: &PipelineConfig) -> Result<Array2<f64>> {
    if scene.is_empty() {
        return Err(Error::invalid("scene has no points"));
    }
    let rows = EncoderRows::build(scene, config)?;
    let features = params.encoder.forward(rows.inputs.view());
    Ok(rows.expand(features.view()))
}

/// Pointwise predictor outputs.
#[derive(Clone, Debug)]
pub struct PointwiseOutput {
    pub semantic_logits: Array2<f64>,
    pub box_raw: Array2<f64>,
    pub boxes: Vec<[f64; 6]>,
    pub mask_features: Array2<f64>,
}

impl PointwiseOutput {
    /// Sum of softmax probabilities over the background classes.
    pub fn background_prob(&self, config: &PipelineConfig) -> Vec<f64> {
        self.semantic_logits
            .rows()
            .into_iter()
            .map(|r| {
                let p = softmax(&r.to_vec());
                p.iter()
                    .enumerate()
                    .filter(|(c, _)| config.is_background(*c))
                    .map(|(_, v)| v)
                    .sum::<f64>()
                    .clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// Semantic logits, point boxes (anchored at each point) and mask features.
pub fn pointwise_predict(params: &ModelParams, features: ArrayView2<f64>, positions: &[Point3]) -> Result<PointwiseOutput> {
    check_len(features.nrows(), positions.len())?;
    let box_raw = params.point_box.forward(features);
    Ok(PointwiseOutput {
        semantic_logits: params.semantic.forward(features),
        boxes: decode_boxes(box_raw.view(), positions),
        box_raw,
        mask_features: params.mask_features.forward(features),
    })
}

/// Encoder and pointwise heads evaluated on encoder rows, expanded to points.
pub(crate) struct PointStage {
    pub encoder_trace: MlpTrace,
    pub features: Array2<f64>,
    pub pointwise: PointwiseOutput,
}

pub(crate) fn point_stage(scene: &Scene, rows: &EncoderRows, params: &ModelParams) -> Result<PointStage> {
    check_len(scene.len(), rows.row_of_point.len())?;
    let encoder_trace = params.encoder.forward_trace(rows.inputs.view());
    let f_rows = encoder_trace.output();
    let row_semantic = params.semantic.forward(f_rows.view());
    let row_box_raw = params.point_box.forward(f_rows.view());
    let row_mask = params.mask_features.forward(f_rows.view());
    let features = rows.expand(f_rows.view());
    let box_raw = rows.expand(row_box_raw.view());
    let pointwise = PointwiseOutput {
        semantic_logits: rows.expand(row_semantic.view()),
        boxes: decode_boxes(box_raw.view(), &scene.positions),
        box_raw,
        mask_features: rows.expand(row_mask.view()),
    };
    Ok(PointStage {
        encoder_trace,
        features,
        pointwise,
    })
}

/// Greedy mask NMS: highest score first (lower index on ties); a mask is
/// dropped when its IoU with any kept mask exceeds `iou_threshold`.
pub fn nms(masks: &[Vec<bool>], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    check_len(masks.len(), scores.len())?;
    let mut order: Vec<usize> = (0..masks.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut keep = true;
        for &k in &kept {
            if mask_iou(&masks[i], &masks[k])? > iou_threshold {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Snaps a soft mask to whole superpoints: a superpoint is in when the mean
/// mask value over its points exceeds 0.5. Without superpoints the mask is
/// binarized pointwise.
pub fn superpoint_align(mask: &SoftMask, superpoints: Option<&[u32]>) -> Result<Vec<bool>> {
    let Some(sp) = superpoints else {
        return Ok(mask.binarize());
    };
    check_len(mask.len(), sp.len())?;
    let count = sp.iter().map(|&s| s as usize + 1).max().unwrap_or(0);
    let mut sum = vec![0.0; count];
    let mut n = vec![0usize; count];
    for (&v, &s) in mask.0.iter().zip(sp) {
        sum[s as usize] += v;
        n[s as usize] += 1;
    }
    Ok(sp
        .iter()
        .map(|&s| sum[s as usize] / n[s as usize] as f64 > BINARIZE_THRESHOLD)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nms_examples() {
        let a = vec![true, true, false, false];
        assert_eq!(nms(&[a.clone(), a.clone()], &[0.9, 0.8], 0.2).unwrap(), vec![0]);
        // IoU 1/10 between the two masks
        let x: Vec<bool> = (0..10).map(|i| i < 1 || (2..6).contains(&i)).collect();
        let y: Vec<bool> = (0..10).map(|i| i < 1 || (6..10).contains(&i) || i == 1).collect();
        assert!((mask_iou(&x, &y).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(nms(&[x, y], &[0.9, 0.8], 0.2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn nms_chain() {
        // A~B and B~C at IoU 1/2, A and C disjoint
        let a = vec![true, true, false, false];
        let b = vec![false, true, true, false];
        let c = vec![false, false, true, true];
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let a2 = vec![true, true, true, false, false, false];
        let b2 = vec![false, true, true, true, true, false];
        let c2 = vec![false, false, false, true, true, true];
        assert_eq!(mask_iou(&a2, &c2).unwrap(), 0.0);
        assert!(mask_iou(&a2, &b2).unwrap() > 0.2 && mask_iou(&b2, &c2).unwrap() > 0.2);
        assert_eq!(nms(&[a2, b2, c2], &[0.9, 0.8, 0.7], 0.2).unwrap(), vec![0, 2]);
        assert_eq!(nms(&[a, b, c], &[0.9, 0.8, 0.7], 0.2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let a = vec![true, false];
        assert_eq!(nms(&[a.clone(), a], &[0.5, 0.5], 0.2).unwrap(), vec![0]);
    }

    #[test]
    fn superpoint_examples() {
        let sp = [0, 0, 1, 1];
        let m = SoftMask(vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(superpoint_align(&m, Some(&sp)).unwrap(), vec![true, true, false, false]);
        let m = SoftMask(vec![0.6, 0.2, 0.2, 0.6]);
        assert_eq!(superpoint_align(&m, Some(&sp)).unwrap(), vec![false; 4]);
        let m = SoftMask(vec![0.9, 0.3, 0.1, 0.3]);
        assert_eq!(superpoint_align(&m, Some(&sp)).unwrap(), vec![true, true, false, false]);
        let m = SoftMask(vec![0.9, 0.3]);
        assert_eq!(superpoint_align(&m, None).unwrap(), vec![true, false]);
    }

    #[test]
    fn encoder_inputs_duplicate_points_match() {
        let mut pos: Vec<Point3> = (0..30).map(|i| [(i % 5) as f64 * 0.1, (i / 5) as f64 * 0.1, 0.0]).collect();
        pos.push(pos[7]);
        let n = pos.len();
        let mut colors = vec![[0.2, 0.4, 0.6]; n];
        colors[3] = [0.9, 0.1, 0.1];
        let scene = Scene::new(pos, colors, vec![0; n], vec![-1; n], None, 2).unwrap();
        let x = encoder_inputs(&scene);
        assert_eq!(x.row(7), x.row(n - 1));
    }
}
