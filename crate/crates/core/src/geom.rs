//! Geometric primitives: scenes, axis-aligned boxes, masks and voxel maps.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{check_len, Error, Result};

pub type Point3 = [f64; 3];

/// Threshold used everywhere a soft mask is turned into a binary one.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// A labelled point cloud.
///
/// `instance` uses `-1` for points that belong to no instance; instance ids
/// are dense in `0..num_instances()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub positions: Vec<Point3>,
    pub colors: Vec<Point3>,
    pub semantic: Vec<u32>,
    pub instance: Vec<i32>,
    pub superpoints: Option<Vec<u32>>,
    pub num_classes: usize,
}

impl Scene {
    pub fn new(
        positions: Vec<Point3>,
        colors: Vec<Point3>,
        semantic: Vec<u32>,
        instance: Vec<i32>,
        superpoints: Option<Vec<u32>>,
        num_classes: usize,
    ) -> Result<Self> {
        let scene = Scene {
            positions,
            colors,
            semantic,
            instance,
            superpoints,
            num_classes,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::invalid("scene has no points"));
        }
        check_len(n, self.colors.len())?;
        check_len(n, self.semantic.len())?;
        check_len(n, self.instance.len())?;
        if let Some(sp) = &self.superpoints {
            check_len(n, sp.len())?;
        }
        if self.positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("positions"));
        }
        if let Some(&c) = self.semantic.iter().find(|&&c| c as usize >= self.num_classes) {
            return Err(Error::invalid(format!(
                "semantic label {c} outside 0..{}",
                self.num_classes
            )));
        }
        let j = self.num_instances();
        let mut class_of: Vec<Option<u32>> = vec![None; j];
        for (&inst, &sem) in self.instance.iter().zip(&self.semantic) {
            if inst < -1 {
                return Err(Error::invalid(format!("instance id {inst} below -1")));
            }
            if inst >= 0 {
                let slot = &mut class_of[inst as usize];
                match slot {
                    None => *slot = Some(sem),
                    Some(c) if *c != sem => {
                        return Err(Error::invalid(format!(
                            "instance {inst} mixes semantic classes {c} and {sem}"
                        )))
                    }
                    _ => {}
                }
            }
        }
        if let Some(missing) = class_of.iter().position(Option::is_none) {
            return Err(Error::invalid(format!("instance id {missing} owns no points")));
        }
        Ok(())
    }

    /// Number of ground-truth instances `J` (one past the largest id).
    pub fn num_instances(&self) -> usize {
        self.instance
            .iter()
            .copied()
            .max()
            .map_or(0, |m| (m + 1).max(0) as usize)
    }

    pub fn instance_mask(&self, id: usize) -> Vec<bool> {
        self.instance.iter().map(|&i| i == id as i32).collect()
    }

    /// Semantic class of every instance, indexed by instance id.
    pub fn instance_classes(&self) -> Vec<u32> {
        let mut classes = vec![0; self.num_instances()];
        for (&inst, &sem) in self.instance.iter().zip(&self.semantic) {
            if inst >= 0 {
                classes[inst as usize] = sem;
            }
        }
        classes
    }

    /// Ground-truth box of every instance, indexed by instance id.
    pub fn instance_boxes(&self) -> Vec<Aabb> {
        let j = self.num_instances();
        let mut boxes: Vec<Option<Aabb>> = vec![None; j];
        for (&inst, p) in self.instance.iter().zip(&self.positions) {
            if inst >= 0 {
                let slot = &mut boxes[inst as usize];
                *slot = Some(match slot {
                    None => Aabb::new(*p, *p),
                    Some(b) => b.expanded_to(p),
                });
            }
        }
        boxes
            .into_iter()
            .map(|b| b.expect("validated scene: every instance owns a point"))
            .collect()
    }
}

/// Axis-aligned box stored as min and max corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Self {
        Aabb { min, max }
    }

    /// `(x1, y1, z1, x2, y2, z2)`.
    pub fn from_array(v: [f64; 6]) -> Self {
        Aabb {
            min: [v[0], v[1], v[2]],
            max: [v[3], v[4], v[5]],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2],
        ]
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|d| self.min[d] <= self.max[d])
    }

    pub fn extent(&self) -> Point3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> Point3 {
        [0, 1, 2].map(|d| 0.5 * (self.min[d] + self.max[d]))
    }

    pub fn volume(&self) -> f64 {
        self.extent().iter().map(|e| e.max(0.0)).product()
    }

    fn expanded_to(&self, p: &Point3) -> Self {
        let mut b = *self;
        for d in 0..3 {
            b.min[d] = b.min[d].min(p[d]);
            b.max[d] = b.max[d].max(p[d]);
        }
        b
    }

    fn intersection_volume(&self, other: &Aabb) -> f64 {
        (0..3)
            .map(|d| (self.max[d].min(other.max[d]) - self.min[d].max(other.min[d])).max(0.0))
            .product()
    }

    fn hull(&self, other: &Aabb) -> Aabb {
        let mut h = *self;
        for d in 0..3 {
            h.min[d] = h.min[d].min(other.min[d]);
            h.max[d] = h.max[d].max(other.max[d]);
        }
        h
    }

    /// Volume IoU. Two zero-volume boxes have IoU 1 when identical, 0 otherwise.
    pub fn iou(&self, other: &Aabb) -> f64 {
        let inter = self.intersection_volume(other);
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            return if self == other { 1.0 } else { 0.0 };
        }
        inter / union
    }

    /// Generalized IoU: IoU minus the fraction of the enclosing hull not
    /// covered by the union.
    pub fn giou(&self, other: &Aabb) -> f64 {
        let inter = self.intersection_volume(other);
        let union = self.volume() + other.volume() - inter;
        let hull = self.hull(other).volume();
        let iou = if union <= 0.0 {
            if self == other {
                1.0
            } else {
                0.0
            }
        } else {
            inter / union
        };
        if hull <= 0.0 {
            return iou;
        }
        iou - (hull - union) / hull
    }
}

/// Box enclosing the positions selected by `mask`.
pub fn aabb_from_mask(scene: &Scene, mask: &[bool]) -> Result<Aabb> {
    check_len(scene.len(), mask.len())?;
    aabb_of(
        scene
            .positions
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(p, _)| p),
    )
}

pub(crate) fn aabb_of<'a>(mut points: impl Iterator<Item = &'a Point3>) -> Result<Aabb> {
    let first = points.next().ok_or(Error::EmptyInstance)?;
    Ok(points.fold(Aabb::new(*first, *first), |b, p| b.expanded_to(p)))
}

pub fn aabb_giou(a: &Aabb, b: &Aabb) -> f64 {
    a.giou(b)
}

/// Soft per-point mask with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask(pub Vec<f64>);

impl SoftMask {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("soft mask value outside [0, 1]"));
        }
        Ok(SoftMask(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn binarize(&self) -> Vec<bool> {
        self.0.iter().map(|&v| v > BINARIZE_THRESHOLD).collect()
    }
}

/// `|a ∩ b| / |a ∪ b|`, 1 when both masks are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// `1 - 2 Σ p g / (Σ p + Σ g)`, 0 when both sums vanish.
pub fn dice_loss(pred: &[f64], gt: &[bool]) -> Result<f64> {
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
        return Ok(0.0);
    }
    Ok(1.0 - 2.0 * inter / denom)
}

/// Point to voxel assignment on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMap {
    pub voxel_size: f64,
    pub point_to_voxel: Vec<usize>,
    pub num_voxels: usize,
}

impl VoxelMap {
    /// Member points of each voxel, in point order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_voxels];
        for (i, &v) in self.point_to_voxel.iter().enumerate() {
            out[v].push(i);
        }
        out
    }
}

/// Assigns each point to the cell `floor(p / voxel_size)`. Voxel ids follow
/// the lexicographic `(x, y, z)` order of the occupied cells.
pub fn voxelize(positions: &[Point3], voxel_size: f64) -> Result<VoxelMap> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::invalid(format!("voxel size must be positive, got {voxel_size}")));
    }
    let mut cells = Vec::with_capacity(positions.len());
    for p in positions {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("positions"));
        }
        cells.push(p.map(|v| (v / voxel_size).floor() as i64));
    }
    let mut ids: BTreeMap<[i64; 3], usize> = cells.iter().map(|&c| (c, 0)).collect();
    for (rank, id) in ids.values_mut().enumerate() {
        *id = rank;
    }
    Ok(VoxelMap {
        voxel_size,
        point_to_voxel: cells.iter().map(|c| ids[c]).collect(),
        num_voxels: ids.len(),
    })
}

/// Expands per-voxel feature rows back to points.
pub fn devoxelize_late(voxel_features: ArrayView2<f64>, map: &VoxelMap) -> Result<Array2<f64>> {
    check_len(map.num_voxels, voxel_features.nrows())?;
    let d = voxel_features.ncols();
    let mut out = Array2::zeros((map.point_to_voxel.len(), d));
    for (i, &v) in map.point_to_voxel.iter().enumerate() {
        if v >= map.num_voxels {
            return Err(Error::IndexOutOfRange {
                index: v,
                len: map.num_voxels,
            });
        }
        out.row_mut(i).assign(&voxel_features.row(v));
    }
    Ok(out)
}

pub(crate) fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}
