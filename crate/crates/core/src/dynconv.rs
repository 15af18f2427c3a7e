//! Box-aware dynamic convolution.
//!
//! Each candidate carries a flat kernel vector that is sliced into a tiny
//! pointwise network. The network runs over every point on the
//! concatenation of mask features, the offset to the candidate, and the
//! absolute difference between the point's predicted box and the
//! candidate's box.
//!
//! Flat kernel layout: layer after layer, each as its row-major
//! `c_l x c_{l+1}` weight matrix followed by its bias. The last layer has no
//! bias.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geom::{Point3, SoftMask};
use crate::nn::sigmoid;

/// Width of the relative-position block.
pub const POS_CHANNELS: usize = 3;
/// Width of the geometric (box difference) block.
pub const GEO_CHANNELS: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelLayout {
    pub dims: Vec<usize>,
}

impl KernelLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("kernel layout needs at least two dimensions"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("kernel layout dimensions must be positive"));
        }
        if dims.last() != Some(&1) {
            return Err(Error::invalid(format!(
                "kernel layout must end in a single output channel, got {dims:?}"
            )));
        }
        Ok(KernelLayout { dims })
    }

    /// Layout `(H + 3 [+ 6], hidden.., 1)` for mask-feature width `h`.
    pub fn for_mask_width(h: usize, hidden: &[usize], geo_cue: bool) -> Result<Self> {
        let mut dims = vec![h + POS_CHANNELS + if geo_cue { GEO_CHANNELS } else { 0 }];
        dims.extend_from_slice(hidden);
        dims.push(1);
        KernelLayout::new(dims)
    }

    pub fn input_width(&self) -> usize {
        self.dims[0]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn has_bias(&self, layer: usize) -> bool {
        layer + 1 < self.num_layers()
    }

    pub fn param_count(&self) -> usize {
        self.dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| w[0] * w[1] + if self.has_bias(l) { w[1] } else { 0 })
            .sum()
    }

    /// Views of every layer's weight matrix and optional bias inside `w`.
    pub fn slice<'a>(&self, w: &'a [f64]) -> Result<Vec<(ArrayView2<'a, f64>, Option<ArrayView1<'a, f64>>)>> {
        check_len(self.param_count(), w.len())?;
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.num_layers());
        for (l, d) in self.dims.windows(2).enumerate() {
            let n = d[0] * d[1];
            let weight = ArrayView2::from_shape((d[0], d[1]), &w[offset..offset + n])
                .expect("slice length matches the layer shape");
            offset += n;
            let bias = if self.has_bias(l) {
                let b = ArrayView1::from(&w[offset..offset + d[1]]);
                offset += d[1];
                Some(b)
            } else {
                None
            };
            out.push((weight, bias));
        }
        Ok(out)
    }

    /// Inverse of [`KernelLayout::slice`].
    pub fn flatten(&self, layers: &[(ArrayView2<f64>, Option<ArrayView1<f64>>)]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in layers {
            out.extend(w.iter());
            if let Some(b) = b {
                out.extend(b.iter());
            }
        }
        out
    }
}

/// Parameter count of a layout given by its dimensions.
pub fn layout_param_count(dims: &[usize]) -> Result<usize> {
    KernelLayout::new(dims.to_vec()).map(|l| l.param_count())
}

/// `|box_i - box_k|` per point and coordinate.
pub fn geo_feature(point_boxes: &[[f64; 6]], candidate_box: &[f64; 6]) -> Array2<f64> {
    let mut out = Array2::zeros((point_boxes.len(), GEO_CHANNELS));
    for (i, b) in point_boxes.iter().enumerate() {
        for c in 0..GEO_CHANNELS {
            out[[i, c]] = (b[c] - candidate_box[c]).abs();
        }
    }
    out
}

/// `p_i - p_k` per point.
pub fn rel_pos(positions: &[Point3], candidate: &Point3) -> Array2<f64> {
    let mut out = Array2::zeros((positions.len(), POS_CHANNELS));
    for (i, p) in positions.iter().enumerate() {
        for d in 0..3 {
            out[[i, d]] = p[d] - candidate[d];
        }
    }
    out
}

/// Concatenates the decoder input blocks; `geo` is skipped when absent.
pub fn decoder_input(
    f_mask: ArrayView2<f64>,
    f_pos: ArrayView2<f64>,
    f_geo: Option<ArrayView2<f64>>,
) -> Result<Array2<f64>> {
    let n = f_mask.nrows();
    check_len(n, f_pos.nrows())?;
    let mut blocks = vec![f_mask, f_pos];
    if let Some(g) = f_geo {
        check_len(n, g.nrows())?;
        blocks.push(g);
    }
    concatenate(Axis(1), &blocks).map_err(|e| Error::invalid(e.to_string()))
}

fn forward_layers(input: ArrayView2<f64>, w: &[f64], layout: &KernelLayout) -> Result<Vec<Array2<f64>>> {
    check_len(layout.input_width(), input.ncols())?;
    let layers = layout.slice(w)?;
    let mut acts = vec![input.to_owned()];
    for (l, (weight, bias)) in layers.iter().enumerate() {
        let mut h = acts[l].dot(weight);
        if let Some(b) = bias {
            h += b;
        }
        if l + 1 < layers.len() {
            h.mapv_inplace(|v| v.max(0.0));
        }
        acts.push(h);
    }
    Ok(acts)
}

/// Pre-sigmoid mask logits for one candidate.
pub fn dyn_conv_logits(input: ArrayView2<f64>, w: &[f64], layout: &KernelLayout) -> Result<Array1<f64>> {
    let acts = forward_layers(input, w, layout)?;
    Ok(acts
        .into_iter()
        .last()
        .expect("at least one layer")
        .index_axis_move(Axis(1), 0))
}

/// Decodes one candidate's soft mask.
pub fn dyn_conv_forward(
    f_mask: ArrayView2<f64>,
    f_pos: ArrayView2<f64>,
    f_geo: Option<ArrayView2<f64>>,
    w: &[f64],
    layout: &KernelLayout,
) -> Result<SoftMask> {
    let input = decoder_input(f_mask, f_pos, f_geo)?;
    let logits = dyn_conv_logits(input.view(), w, layout)?;
    Ok(SoftMask(logits.iter().map(|&z| sigmoid(z)).collect()))
}

/// Backward pass through the pointwise network given `dL/dlogit` per
/// point. Returns `(dL/dinput, dL/dw)`.
pub fn dyn_conv_backward(
    input: ArrayView2<f64>,
    w: &[f64],
    layout: &KernelLayout,
    d_logits: ArrayView1<f64>,
) -> Result<(Array2<f64>, Vec<f64>)> {
    check_len(input.nrows(), d_logits.len())?;
    let acts = forward_layers(input, w, layout)?;
    let layers = layout.slice(w)?;
    let mut d = d_logits.to_owned().insert_axis(Axis(1));
    let mut grads: Vec<(Array2<f64>, Option<Array1<f64>>)> = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        if l + 1 < layers.len() {
            ndarray::Zip::from(&mut d).and(&acts[l + 1]).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        let (weight, bias) = &layers[l];
        let dw = acts[l].t().dot(&d);
        let db = bias.as_ref().map(|_| d.sum_axis(Axis(0)));
        grads.push((dw, db));
        d = d.dot(&weight.t());
    }
    grads.reverse();
    let views: Vec<_> = grads.iter().map(|(w, b)| (w.view(), b.as_ref().map(|b| b.view()))).collect();
    Ok((d, layout.flatten(&views)))
}

/// Splits a decoder-input gradient into its mask, position and geo blocks.
pub fn split_input_grad(d_input: &Array2<f64>, mask_width: usize) -> (ArrayView2<'_, f64>, Option<ArrayView2<'_, f64>>) {
    let d_mask = d_input.slice(s![.., ..mask_width]);
    let geo_start = mask_width + POS_CHANNELS;
    let d_geo = (d_input.ncols() > geo_start).then(|| d_input.slice(s![.., geo_start..]));
    (d_mask, d_geo)
}
