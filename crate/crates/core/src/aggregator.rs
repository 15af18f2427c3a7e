//! Point aggregation: ball query, the local aggregation layer with its
//! residual connection, stacked blocks, and the linear candidate heads.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::dynconv::KernelLayout;
use crate::error::{check_len, Error, Result};
use crate::geom::{dist2, Aabb, Point3};
use crate::nn::{sigmoid, softplus, Dense, Mlp, MlpTrace};

/// Default radii of the two stacked blocks, in meters.
pub const DEFAULT_RADII: [f64; 2] = [0.2, 0.4];
/// Default neighbor count per ball query.
pub const DEFAULT_NEIGHBORS: usize = 32;

/// One point-aggregation block: ball query settings and the shared map
/// `(D + 3) -> D -> D -> D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaBlock {
    pub radius: f64,
    pub neighbors: usize,
    pub mlp: Mlp,
}

impl PaBlock {
    pub fn init<R: Rng + ?Sized>(radius: f64, neighbors: usize, dim: usize, rng: &mut R) -> Self {
        PaBlock {
            radius,
            neighbors,
            mlp: Mlp::init(&[dim + 3, dim, dim, dim], false, rng),
        }
    }

    pub fn zeros(radius: f64, neighbors: usize, dim: usize) -> Self {
        PaBlock {
            radius,
            neighbors,
            mlp: Mlp::zeros(&[dim + 3, dim, dim, dim], false),
        }
    }

    pub fn dim(&self) -> usize {
        self.mlp.layers.last().map_or(0, Dense::outputs)
    }

    fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::invalid(format!("radius must be positive, got {}", self.radius)));
        }
        if self.neighbors == 0 {
            return Err(Error::invalid("neighbor count must be at least 1"));
        }
        Ok(())
    }
}

/// Up to `q` points within `r` of each center, nearest first (ties by
/// index). Short lists are padded with their first entry; a center with no
/// neighbor in range gets `q` copies of its own index.
pub fn ball_query(positions: &[Point3], centers: &[usize], r: f64, q: usize) -> Result<Vec<Vec<usize>>> {
    if !(r > 0.0) || q == 0 {
        return Err(Error::invalid("ball query needs r > 0 and q >= 1"));
    }
    let r2 = r * r;
    centers
        .iter()
        .map(|&c| {
            let center = positions.get(c).ok_or(Error::IndexOutOfRange {
                index: c,
                len: positions.len(),
            })?;
            let mut hits: Vec<(f64, usize)> = positions
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let d = dist2(p, center);
                    (d <= r2).then_some((d, i))
                })
                .collect();
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            hits.truncate(q);
            let mut out: Vec<usize> = hits.into_iter().map(|(_, i)| i).collect();
            let pad = out.first().copied().unwrap_or(c);
            out.resize(q, pad);
            Ok(out)
        })
        .collect()
}

/// Saved state of one batched aggregation, consumed by [`aggregate_backward`].
pub struct AggregateTrace {
    centers: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    mlp: MlpTrace,
    argmax: Array2<usize>,
    num_points: usize,
}

/// Local aggregation for every center:
/// `e_k = f_k + max_q MLP([f_q ; (p_q - p_k) / r])`.
///
/// `features` and `positions` describe the searched point set; `centers`
/// and `neighbors` index into it.
pub fn aggregate(
    block: &PaBlock,
    features: ArrayView2<f64>,
    positions: &[Point3],
    centers: &[usize],
    neighbors: &[Vec<usize>],
) -> Result<(Array2<f64>, AggregateTrace)> {
    block.validate()?;
    let (n, d) = features.dim();
    check_len(n, positions.len())?;
    check_len(centers.len(), neighbors.len())?;
    check_len(d + 3, block.mlp.layers[0].inputs())?;
    let q = block.neighbors;
    let k = centers.len();
    let mut input = Array2::zeros((k * q, d + 3));
    for (slot, (&c, nbrs)) in centers.iter().zip(neighbors).enumerate() {
        check_len(q, nbrs.len())?;
        if c >= n {
            return Err(Error::IndexOutOfRange { index: c, len: n });
        }
        for (j, &nb) in nbrs.iter().enumerate() {
            if nb >= n {
                return Err(Error::IndexOutOfRange { index: nb, len: n });
            }
            let mut row = input.row_mut(slot * q + j);
            row.slice_mut(s![..d]).assign(&features.row(nb));
            for a in 0..3 {
                row[d + a] = (positions[nb][a] - positions[c][a]) / block.radius;
            }
        }
    }
    let trace = block.mlp.forward_trace(input.view());
    let mapped = trace.output();
    let out_dim = mapped.ncols();
    check_len(d, out_dim)?;
    let mut out = Array2::zeros((k, d));
    let mut argmax = Array2::zeros((k, d));
    for slot in 0..k {
        let group = mapped.slice(s![slot * q..(slot + 1) * q, ..]);
        for ch in 0..d {
            let mut best = 0;
            for j in 1..q {
                if group[[j, ch]] > group[[best, ch]] {
                    best = j;
                }
            }
            out[[slot, ch]] = features[[centers[slot], ch]] + group[[best, ch]];
            argmax[[slot, ch]] = best;
        }
    }
    Ok((
        out,
        AggregateTrace {
            centers: centers.to_vec(),
            neighbors: neighbors.to_vec(),
            mlp: trace,
            argmax,
            num_points: n,
        },
    ))
}

/// Backward pass of [`aggregate`]. Accumulates into `grad` and returns the
/// gradient with respect to the searched point features.
pub fn aggregate_backward(
    block: &PaBlock,
    trace: &AggregateTrace,
    d_out: ArrayView2<f64>,
    grad: &mut Mlp,
) -> Array2<f64> {
    let (k, d) = d_out.dim();
    let q = block.neighbors;
    let mut d_mapped = Array2::zeros((k * q, d));
    let mut d_features = Array2::zeros((trace.num_points, d));
    for slot in 0..k {
        for ch in 0..d {
            let g = d_out[[slot, ch]];
            d_mapped[[slot * q + trace.argmax[[slot, ch]], ch]] += g;
            d_features[[trace.centers[slot], ch]] += g;
        }
    }
    let d_input = block.mlp.backward(&trace.mlp, d_mapped.view(), grad);
    for (slot, nbrs) in trace.neighbors.iter().enumerate() {
        for (j, &nb) in nbrs.iter().enumerate() {
            let src = d_input.slice(s![slot * q + j, ..d]);
            let mut dst = d_features.row_mut(nb);
            dst += &src;
        }
    }
    d_features
}

/// Single-candidate form of [`aggregate`].
pub fn local_aggregate(
    block: &PaBlock,
    features: ArrayView2<f64>,
    positions: &[Point3],
    center: usize,
    neighbors: &[usize],
) -> Result<Array1<f64>> {
    let (out, _) = aggregate(block, features, positions, &[center], &[neighbors.to_vec()])?;
    Ok(out.row(0).to_owned())
}

struct StageTrace {
    /// Scene indices of the searched set.
    support: Vec<usize>,
    agg: AggregateTrace,
}

/// Saved state of [`pa_stack_forward`].
pub struct PaStackTrace {
    stages: Vec<StageTrace>,
    num_points: usize,
}

/// Runs the stacked blocks. `stages[s]` holds scene indices of the centers
/// of block `s`; block 0 searches the whole scene, block `s > 0` searches
/// the centers of block `s - 1`, so `stages[s]` must be a subset of
/// `stages[s - 1]`.
pub fn pa_stack_forward(
    blocks: &[PaBlock],
    features: ArrayView2<f64>,
    positions: &[Point3],
    stages: &[Vec<usize>],
) -> Result<(Array2<f64>, PaStackTrace)> {
    if blocks.is_empty() || blocks.len() != stages.len() {
        return Err(Error::invalid(format!(
            "{} blocks for {} sampling stages",
            blocks.len(),
            stages.len()
        )));
    }
    let n = positions.len();
    check_len(n, features.nrows())?;
    let mut support: Vec<usize> = (0..n).collect();
    let mut current = features.to_owned();
    let mut traces = Vec::with_capacity(blocks.len());
    for (block, stage) in blocks.iter().zip(stages) {
        if stage.is_empty() {
            return Err(Error::invalid("empty sampling stage"));
        }
        let mut local_of = vec![usize::MAX; n];
        for (local, &g) in support.iter().enumerate() {
            local_of[g] = local;
        }
        let centers = stage
            .iter()
            .map(|&g| match local_of.get(g) {
                Some(&l) if l != usize::MAX => Ok(l),
                _ => Err(Error::invalid(format!(
                    "stage index {g} is not among the previous stage's points"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let support_pos: Vec<Point3> = support.iter().map(|&g| positions[g]).collect();
        let nbrs = ball_query(&support_pos, &centers, block.radius, block.neighbors)?;
        let (out, agg) = aggregate(block, current.view(), &support_pos, &centers, &nbrs)?;
        traces.push(StageTrace { support, agg });
        support = stage.clone();
        current = out;
    }
    Ok((
        current,
        PaStackTrace {
            stages: traces,
            num_points: n,
        },
    ))
}

pub fn pa_stack(
    blocks: &[PaBlock],
    features: ArrayView2<f64>,
    positions: &[Point3],
    stages: &[Vec<usize>],
) -> Result<Array2<f64>> {
    pa_stack_forward(blocks, features, positions, stages).map(|(e, _)| e)
}

/// Backward pass of [`pa_stack_forward`]; returns the gradient with respect
/// to the scene features.
pub fn pa_stack_backward(
    blocks: &[PaBlock],
    trace: &PaStackTrace,
    d_out: ArrayView2<f64>,
    grads: &mut [PaBlock],
) -> Array2<f64> {
    let mut d = d_out.to_owned();
    for (s, stage) in trace.stages.iter().enumerate().rev() {
        d = aggregate_backward(&blocks[s], &stage.agg, d.view(), &mut grads[s].mlp);
        debug_assert_eq!(d.nrows(), stage.support.len());
    }
    debug_assert_eq!(d.nrows(), trace.num_points);
    d
}

/// Decodes raw box outputs `(center offset, extent logits)` into
/// `(x1, y1, z1, x2, y2, z2)` rows. The center is `anchor + offset`; the
/// extent is `softplus(logit)` so `min <= max` always holds.
pub fn decode_boxes(raw: ArrayView2<f64>, anchors: &[Point3]) -> Vec<[f64; 6]> {
    raw.rows()
        .into_iter()
        .zip(anchors)
        .map(|(r, a)| {
            let mut b = [0.0; 6];
            for d in 0..3 {
                let center = a[d] + r[d];
                let half = 0.5 * softplus(r[3 + d]);
                b[d] = center - half;
                b[3 + d] = center + half;
            }
            b
        })
        .collect()
}

/// Gradient of the raw box outputs given gradients of the decoded corners.
pub fn decode_boxes_backward(raw: ArrayView2<f64>, d_boxes: &[[f64; 6]]) -> Array2<f64> {
    let mut out = Array2::zeros(raw.dim());
    for (i, g) in d_boxes.iter().enumerate() {
        for d in 0..3 {
            out[[i, d]] = g[d] + g[3 + d];
            out[[i, 3 + d]] = 0.5 * (g[3 + d] - g[d]) * sigmoid(raw[[i, 3 + d]]);
        }
    }
    out
}

/// Linear candidate heads: class logits (with a trailing no-object slot),
/// boxes, dynamic-convolution kernels and a mask-quality score.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub class: Dense,
    pub bbox: Dense,
    pub kernel: Dense,
    pub quality: Dense,
}

/// Candidate predictions produced by [`Heads::forward`].
#[derive(Clone, Debug)]
pub struct HeadOutput {
    /// `K x (C + 1)`; the last column is the no-object class.
    pub class_logits: Array2<f64>,
    pub box_raw: Array2<f64>,
    pub boxes: Vec<[f64; 6]>,
    pub kernels: Array2<f64>,
    pub quality_logits: Array1<f64>,
}

impl HeadOutput {
    pub fn quality(&self, k: usize) -> f64 {
        sigmoid(self.quality_logits[k])
    }

    pub fn aabb(&self, k: usize) -> Aabb {
        Aabb::from_array(self.boxes[k])
    }
}

/// Gradients flowing into the head outputs.
pub struct HeadGrads {
    pub class_logits: Array2<f64>,
    pub boxes: Vec<[f64; 6]>,
    pub kernels: Array2<f64>,
    pub quality_logits: Array1<f64>,
}

impl HeadGrads {
    pub fn zeros(out: &HeadOutput) -> Self {
        HeadGrads {
            class_logits: Array2::zeros(out.class_logits.dim()),
            boxes: vec![[0.0; 6]; out.boxes.len()],
            kernels: Array2::zeros(out.kernels.dim()),
            quality_logits: Array1::zeros(out.quality_logits.len()),
        }
    }
}

impl Heads {
    pub fn init<R: Rng + ?Sized>(dim: usize, num_classes: usize, layout: &KernelLayout, rng: &mut R) -> Self {
        let mut kernel = Dense::init(dim, layout.param_count(), rng);
        // Start every candidate near a standard fan-in initialised decoder.
        kernel.weight.mapv_inplace(|w| w * 0.1);
        let mut offset = 0;
        for (l, w) in layout.dims.windows(2).enumerate() {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let count = w[0] * w[1] + if l + 2 < layout.dims.len() { w[1] } else { 0 };
            for v in kernel.bias.slice_mut(s![offset..offset + count]).iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
            offset += count;
        }
        Heads {
            class: Dense::init(dim, num_classes + 1, rng),
            bbox: Dense::init(dim, 6, rng),
            kernel,
            quality: Dense::init(dim, 1, rng),
        }
    }

    pub fn zeros(dim: usize, num_classes: usize, layout: &KernelLayout) -> Self {
        Heads {
            class: Dense::zeros(dim, num_classes + 1),
            bbox: Dense::zeros(dim, 6),
            kernel: Dense::zeros(dim, layout.param_count()),
            quality: Dense::zeros(dim, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Heads {
            class: self.class.zeros_like(),
            bbox: self.bbox.zeros_like(),
            kernel: self.kernel.zeros_like(),
            quality: self.quality.zeros_like(),
        }
    }

    /// `anchors` are the candidate positions the box centers are relative to.
    pub fn forward(&self, e: ArrayView2<f64>, anchors: &[Point3]) -> Result<HeadOutput> {
        check_len(e.nrows(), anchors.len())?;
        let box_raw = self.bbox.forward(e);
        let boxes = decode_boxes(box_raw.view(), anchors);
        Ok(HeadOutput {
            class_logits: self.class.forward(e),
            box_raw,
            boxes,
            kernels: self.kernel.forward(e),
            quality_logits: self.quality.forward(e).index_axis_move(Axis(1), 0),
        })
    }

    pub fn backward(&self, e: ArrayView2<f64>, out: &HeadOutput, g: &HeadGrads, grad: &mut Heads) -> Array2<f64> {
        let mut d_e = self.class.backward(e, g.class_logits.view(), &mut grad.class);
        let d_raw = decode_boxes_backward(out.box_raw.view(), &g.boxes);
        d_e += &self.bbox.backward(e, d_raw.view(), &mut grad.bbox);
        d_e += &self.kernel.backward(e, g.kernels.view(), &mut grad.kernel);
        let dq = g.quality_logits.clone().insert_axis(Axis(1));
        d_e += &self.quality.backward(e, dq.view(), &mut grad.quality);
        d_e
    }
}
