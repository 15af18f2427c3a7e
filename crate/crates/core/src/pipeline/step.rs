//! One training step: forward pass, matching, losses and the full backward
//! pass down to the encoder weights.

use ndarray::{Array1, Array2, ArrayView1};

use super::{point_stage, EncoderRows, ModelParams, PipelineConfig};
use crate::aggregator::{decode_boxes_backward, pa_stack_forward, pa_stack_backward, HeadGrads};
use crate::dynconv::{decoder_input, dyn_conv_backward, dyn_conv_logits, geo_feature, rel_pos, split_input_grad};
use crate::error::{check_len, Result};
use crate::geom::{Point3, Scene};
use crate::sampling::{ia_fps_train, OccupancyState};
use crate::supervision::{
    cost_matrix, instance_loss, one_to_many_match, pointwise_loss, CandidateOutputs, GroundTruth, LossReport,
};

/// Per-scene data that does not depend on the parameters.
#[derive(Clone, Debug)]
pub struct SceneCache {
    pub rows: EncoderRows,
    pub gt: GroundTruth,
    /// Ground-truth background indicator used to gate training samples.
    pub background: Vec<f64>,
}

impl SceneCache {
    pub fn new(scene: &Scene, config: &PipelineConfig) -> Result<Self> {
        scene.validate()?;
        Ok(SceneCache {
            rows: EncoderRows::build(scene, config)?,
            gt: GroundTruth::from_scene(scene),
            background: scene
                .semantic
                .iter()
                .map(|&c| if config.is_background(c as usize) { 1.0 } else { 0.0 })
                .collect(),
        })
    }
}

/// Decoder input for one candidate.
pub(crate) fn candidate_input(
    f_mask: &Array2<f64>,
    point_boxes: &[[f64; 6]],
    positions: &[Point3],
    anchor: &Point3,
    candidate_box: &[f64; 6],
    geo_cue: bool,
) -> Result<Array2<f64>> {
    let pos = rel_pos(positions, anchor);
    let geo = geo_cue.then(|| geo_feature(point_boxes, candidate_box));
    decoder_input(f_mask.view(), pos.view(), geo.as_ref().map(|g| g.view()))
}

/// Total loss of one scene and its gradient with respect to every
/// parameter. The report's `gradient` holds the same gradient flattened.
pub fn loss_and_grad(
    params: &ModelParams,
    scene: &Scene,
    cache: &SceneCache,
    config: &PipelineConfig,
) -> Result<(LossReport, ModelParams)> {
    let n = scene.len();
    check_len(n, cache.background.len())?;
    let layout = params.config.layout()?;
    let geo_cue = params.config.geo_cue;
    let mask_width = params.config.mask_dim;

    let stage = point_stage(scene, &cache.rows, params)?;
    let pw = &stage.pointwise;
    let point_loss = pointwise_loss(pw.semantic_logits.view(), &pw.boxes, scene)?;

    let mut grads = params.zeros_like();
    let mut d_point_boxes = point_loss.d_boxes.clone();
    let mut d_mask_features: Array2<f64> = Array2::zeros(pw.mask_features.dim());
    let mut d_features: Array2<f64> = Array2::zeros(stage.features.dim());
    let mut report = LossReport {
        semantic: point_loss.semantic,
        point_box: point_loss.bbox,
        ..LossReport::default()
    };

    if !cache.gt.is_empty() {
        let state = OccupancyState::new(cache.background.clone(), config.tau)?;
        let cands = ia_fps_train(&state, &scene.positions, config.k_train, None)?;
        let stages = vec![cands.clone(); params.blocks.len()];
        let (e, pa_trace) = pa_stack_forward(&params.blocks, stage.features.view(), &scene.positions, &stages)?;
        let anchors: Vec<Point3> = cands.iter().map(|&i| scene.positions[i]).collect();
        let heads = params.heads.forward(e.view(), &anchors)?;

        let mask_logits = candidate_masks(
            params,
            &pw.mask_features,
            &pw.boxes,
            &scene.positions,
            &anchors,
            &heads.boxes,
            &heads.kernels,
        )?;

        let out = CandidateOutputs {
            class_logits: heads.class_logits.view(),
            mask_logits: mask_logits.view(),
            boxes: &heads.boxes,
            quality_logits: heads.quality_logits.view(),
        };
        let cost = cost_matrix(&out, &cache.gt, &config.loss)?;
        let assignment = one_to_many_match(cost.view(), config.duplication)?;
        let inst = instance_loss(&assignment, &out, &cache.gt, &config.loss)?;
        report.inst = inst.total;
        report.cls = inst.cls;
        report.bbox = inst.bbox;
        report.mask = inst.mask;
        report.ms = inst.ms;

        let mut hg = HeadGrads {
            class_logits: inst.d_class_logits,
            boxes: inst.d_boxes,
            kernels: Array2::zeros(heads.kernels.dim()),
            quality_logits: inst.d_quality_logits,
        };
        for &(c, _) in &assignment.pairs {
            let input = candidate_input(&pw.mask_features, &pw.boxes, &scene.positions, &anchors[c], &heads.boxes[c], geo_cue)?;
            let w = heads.kernels.row(c).to_vec();
            let (d_input, d_w) = dyn_conv_backward(input.view(), &w, &layout, inst.d_mask_logits.row(c))?;
            hg.kernels.row_mut(c).assign(&ArrayView1::from(&d_w[..]));
            let (d_mask, d_geo) = split_input_grad(&d_input, mask_width);
            d_mask_features += &d_mask;
            if let Some(d_geo) = d_geo {
                let bk = heads.boxes[c];
                for (i, pb) in pw.boxes.iter().enumerate() {
                    for ch in 0..6 {
                        let diff = pb[ch] - bk[ch];
                        let g = d_geo[[i, ch]] * sign(diff);
                        d_point_boxes[i][ch] += g;
                        hg.boxes[c][ch] -= g;
                    }
                }
            }
        }
        let d_e = params.heads.backward(e.view(), &heads, &hg, &mut grads.heads);
        d_features += &pa_stack_backward(&params.blocks, &pa_trace, d_e.view(), &mut grads.blocks);
    }
    report.total = report.inst + point_loss.total;

    // pointwise heads and encoder, on encoder rows
    let rows = &cache.rows;
    let f_rows = stage.encoder_trace.output();
    let d_box_raw = decode_boxes_backward(pw.box_raw.view(), &d_point_boxes);
    let d_row_sem = rows.collapse(point_loss.d_semantic_logits.view());
    let d_row_box = rows.collapse(d_box_raw.view());
    let d_row_mask = rows.collapse(d_mask_features.view());
    let mut d_f_rows = rows.collapse(d_features.view());
    d_f_rows += &params.semantic.backward(f_rows.view(), d_row_sem.view(), &mut grads.semantic);
    d_f_rows += &params.point_box.backward(f_rows.view(), d_row_box.view(), &mut grads.point_box);
    d_f_rows += &params.mask_features.backward(f_rows.view(), d_row_mask.view(), &mut grads.mask_features);
    params.encoder.backward(&stage.encoder_trace, d_f_rows.view(), &mut grads.encoder);

    report.gradient = grads.flatten();
    Ok((report, grads))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mask logits `K x N` of the given candidates; used by tests comparing
/// expansion modes and by inference.
pub(crate) fn candidate_masks(
    params: &ModelParams,
    f_mask: &Array2<f64>,
    point_boxes: &[[f64; 6]],
    positions: &[Point3],
    anchors: &[Point3],
    boxes: &[[f64; 6]],
    kernels: &Array2<f64>,
) -> Result<Array2<f64>> {
    use rayon::prelude::*;
    let layout = params.config.layout()?;
    let geo_cue = params.config.geo_cue;
    let rows: Vec<Array1<f64>> = (0..anchors.len())
        .into_par_iter()
        .map(|c| {
            let input = candidate_input(f_mask, point_boxes, positions, &anchors[c], &boxes[c], geo_cue)?;
            dyn_conv_logits(input.view(), &kernels.row(c).to_vec(), &layout)
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((anchors.len(), positions.len()));
    for (c, r) in rows.into_iter().enumerate() {
        out.row_mut(c).assign(&r);
    }
    Ok(out)
}
