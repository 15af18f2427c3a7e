//! Synthetic indoor scenes: a floor and two walls (class 0) with objects of
//! classes `1..C` sampled on their surfaces.
//!
//! Three scenario kinds stress different failure modes:
//!
//! * `Uniform`: well separated objects.
//! * `Packed`: two or three same-class objects placed side by side with a
//!   gap below twice the noise level.
//! * `Loose`: one object built from two or three disjoint blobs that share
//!   an instance id.

pub mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{voxelize, Point3, Scene};

pub use io::{read_predictions, read_scene, write_predictions, write_scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    Uniform,
    Packed,
    Loose,
}

/// Scenario probabilities; must sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMix {
    pub packed: f64,
    pub loose: f64,
    pub uniform: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        ScenarioMix {
            packed: 0.3,
            loose: 0.2,
            uniform: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_scenes: usize,
    pub points_per_scene: usize,
    /// Classes including background.
    pub num_classes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub mix: ScenarioMix,
    /// Gaussian position noise in meters.
    pub noise_sigma: f64,
    /// Side of the square floor in meters.
    pub room_size: f64,
    /// Cell size of the voxel superpoints.
    pub superpoint_voxel: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_scenes: 10,
            points_per_scene: 2048,
            num_classes: 5,
            min_instances: 2,
            max_instances: 8,
            mix: ScenarioMix::default(),
            noise_sigma: 0.01,
            room_size: 3.0,
            superpoint_voxel: 0.1,
            seed: 0,
        }
    }
}

const BACKGROUND_FRACTION: f64 = 0.3;
const MIN_INSTANCE_POINTS: usize = 32;
const WALL_HEIGHT: f64 = 1.0;
const MIN_GAP: f64 = 0.1;
const PLACEMENT_TRIES: usize = 200;
const SCENE_TRIES: usize = 10;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.mix;
        let weights = [m.packed, m.loose, m.uniform];
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("scenario weights must be non-negative and sum to 1"));
        }
        if self.num_scenes == 0 || self.min_instances == 0 || self.min_instances > self.max_instances {
            return Err(Error::invalid("need positive scene count and 0 < min_instances <= max_instances"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need background plus at least one object class"));
        }
        let bg = (BACKGROUND_FRACTION * self.points_per_scene as f64).round() as usize;
        if self.points_per_scene < bg + self.max_instances * MIN_INSTANCE_POINTS {
            return Err(Error::invalid(format!(
                "{} points cannot hold {} instances",
                self.points_per_scene, self.max_instances
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.room_size >= 1.0) || !(self.superpoint_voxel > 0.0) {
            return Err(Error::invalid("bad noise, room size or superpoint voxel"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Cuboid { half: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

impl Shape {
    fn half_footprint(&self) -> [f64; 2] {
        match *self {
            Shape::Cuboid { half } => [half[0], half[1]],
            Shape::Cylinder { radius, .. } | Shape::Sphere { radius } => [radius, radius],
        }
    }

    fn area(&self) -> f64 {
        use std::f64::consts::PI;
        match *self {
            Shape::Cuboid { half: [a, b, c] } => 4.0 * a * b + 8.0 * c * (a + b),
            Shape::Cylinder { radius, height } => 2.0 * PI * radius * height + PI * radius * radius,
            Shape::Sphere { radius } => 4.0 * PI * radius * radius,
        }
    }

    /// Uniform point on the visible surface of the shape standing on the
    /// floor at `(x, y)`.
    fn sample<R: Rng>(&self, x: f64, y: f64, rng: &mut R) -> Point3 {
        use std::f64::consts::PI;
        match *self {
            Shape::Cuboid { half: [a, b, c] } => {
                let top = 4.0 * a * b;
                let sx = 4.0 * b * c;
                let sy = 4.0 * a * c;
                let u = rng.random::<f64>() * (top + 2.0 * sx + 2.0 * sy);
                let (s, t) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                if u < top {
                    [x + s * a, y + t * b, 2.0 * c]
                } else if u < top + 2.0 * sx {
                    let side = if u < top + sx { -1.0 } else { 1.0 };
                    [x + side * a, y + s * b, c + t * c]
                } else {
                    let side = if u < top + 2.0 * sx + sy { -1.0 } else { 1.0 };
                    [x + s * a, y + side * b, c + t * c]
                }
            }
            Shape::Cylinder { radius, height } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                let theta = rng.random_range(0.0..2.0 * PI);
                if rng.random::<f64>() * (side + cap) < side {
                    [
                        x + radius * theta.cos(),
                        y + radius * theta.sin(),
                        rng.random_range(0.0..height),
                    ]
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    [x + r * theta.cos(), y + r * theta.sin(), height]
                }
            }
            Shape::Sphere { radius } => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let theta = rng.random_range(0.0..2.0 * PI);
                let rho = (1.0 - z * z).sqrt();
                [
                    x + radius * rho * theta.cos(),
                    y + radius * rho * theta.sin(),
                    radius + radius * z,
                ]
            }
        }
    }
}

fn class_shape<R: Rng>(class: usize, rng: &mut R) -> Shape {
    match (class - 1) % 4 {
        0 => Shape::Cuboid {
            half: [
                rng.random_range(0.12..0.2),
                rng.random_range(0.12..0.2),
                rng.random_range(0.12..0.2),
            ],
        },
        1 => Shape::Cylinder {
            radius: rng.random_range(0.1..0.16),
            height: rng.random_range(0.35..0.6),
        },
        2 => Shape::Sphere {
            radius: rng.random_range(0.12..0.2),
        },
        _ => Shape::Cuboid {
            half: [
                rng.random_range(0.25..0.35),
                rng.random_range(0.18..0.25),
                rng.random_range(0.04..0.07),
            ],
        },
    }
}

fn class_color(class: usize) -> Point3 {
    const PALETTE: [Point3; 8] = [
        [0.85, 0.2, 0.2],
        [0.2, 0.7, 0.25],
        [0.2, 0.3, 0.85],
        [0.85, 0.75, 0.2],
        [0.7, 0.3, 0.8],
        [0.2, 0.75, 0.8],
        [0.9, 0.5, 0.15],
        [0.5, 0.5, 0.2],
    ];
    PALETTE[(class - 1) % PALETTE.len()]
}

#[derive(Clone, Debug)]
struct Blob {
    shape: Shape,
    x: f64,
    y: f64,
}

impl Blob {
    fn footprint(&self) -> [f64; 4] {
        let [hx, hy] = self.shape.half_footprint();
        [self.x - hx, self.y - hy, self.x + hx, self.y + hy]
    }
}

#[derive(Clone, Debug)]
struct Object {
    class: usize,
    blobs: Vec<Blob>,
    color: Point3,
}

fn gap_between(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let dx = (b[0] - a[2]).max(a[0] - b[2]).max(0.0);
    let dy = (b[1] - a[3]).max(a[1] - b[3]).max(0.0);
    if dx == 0.0 && dy == 0.0 {
        // overlapping footprints
        -1.0
    } else {
        dx.max(dy)
    }
}

struct Layout<'a> {
    config: &'a GenConfig,
    placed: Vec<[f64; 4]>,
}

impl Layout<'_> {
    fn fits(&self, fp: &[f64; 4]) -> bool {
        let w = self.config.room_size;
        if fp[0] < 0.1 || fp[1] < 0.1 || fp[2] > w - 0.05 || fp[3] > w - 0.05 {
            return false;
        }
        self.placed.iter().all(|q| gap_between(fp, q) >= MIN_GAP)
    }

    /// Random position for a single blob, or `None` after bounded retries.
    fn place<R: Rng>(&mut self, shape: Shape, rng: &mut R) -> Option<Blob> {
        let w = self.config.room_size;
        for _ in 0..PLACEMENT_TRIES {
            let blob = Blob {
                shape,
                x: rng.random_range(0.1..w),
                y: rng.random_range(0.1..w),
            };
            if self.fits(&blob.footprint()) {
                self.placed.push(blob.footprint());
                return Some(blob);
            }
        }
        None
    }

    /// Places `shapes` in a row along x, each `gap()` apart from the last.
    fn place_row<R: Rng>(
        &mut self,
        shapes: &[Shape],
        rng: &mut R,
        mut gap: impl FnMut(&mut R) -> f64,
    ) -> Option<Vec<Blob>> {
        let w = self.config.room_size;
        'attempt: for _ in 0..PLACEMENT_TRIES {
            let mut blobs: Vec<Blob> = Vec::with_capacity(shapes.len());
            let y = rng.random_range(0.1..w);
            let mut x_edge = rng.random_range(0.1..w);
            for shape in shapes {
                let [hx, _] = shape.half_footprint();
                let x = if blobs.is_empty() { x_edge + hx } else { x_edge + gap(rng) + hx };
                let blob = Blob { shape: *shape, x, y };
                x_edge = blob.footprint()[2];
                blobs.push(blob);
            }
            let union = blobs.iter().map(Blob::footprint).fold([f64::MAX, f64::MAX, f64::MIN, f64::MIN], |a, b| {
                [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
            });
            if !self.fits(&union) {
                continue 'attempt;
            }
            self.placed.push(union);
            return Some(blobs);
        }
        None
    }
}

fn jitter_color<R: Rng>(base: Point3, amount: f64, rng: &mut R) -> Point3 {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn pick_scenario<R: Rng>(mix: &ScenarioMix, rng: &mut R) -> Scenario {
    let u: f64 = rng.random();
    if u < mix.packed {
        Scenario::Packed
    } else if u < mix.packed + mix.loose {
        Scenario::Loose
    } else {
        Scenario::Uniform
    }
}

fn layout_objects<R: Rng>(config: &GenConfig, scenario: Scenario, rng: &mut R) -> Option<Vec<Object>> {
    let j = rng.random_range(config.min_instances..=config.max_instances);
    let object_classes = config.num_classes - 1;
    let mut layout = Layout {
        config,
        placed: Vec::new(),
    };
    let mut objects = Vec::with_capacity(j);
    let sigma = config.noise_sigma;
    let make = |class: usize, blobs: Vec<Blob>, rng: &mut R| Object {
        class,
        blobs,
        color: jitter_color(class_color(class), 0.08, rng),
    };
    match scenario {
        Scenario::Packed => {
            let class = rng.random_range(1..=object_classes);
            let count = rng.random_range(2..=3usize).min(j.max(2));
            let shapes: Vec<Shape> = (0..count).map(|_| class_shape(class, rng)).collect();
            let blobs = layout.place_row(&shapes, rng, |r| r.random_range(0.0..(2.0 * sigma).max(1e-6)))?;
            for b in blobs {
                objects.push(make(class, vec![b], rng));
            }
        }
        Scenario::Loose => {
            let class = rng.random_range(1..=object_classes);
            let count = rng.random_range(2..=3usize);
            let shapes: Vec<Shape> = (0..count).map(|_| class_shape(class, rng)).collect();
            let blobs = layout.place_row(&shapes, rng, |r| r.random_range(0.05..0.1))?;
            objects.push(make(class, blobs, rng));
        }
        Scenario::Uniform => {}
    }
    while objects.len() < j {
        let class = rng.random_range(1..=object_classes);
        let shape = class_shape(class, rng);
        let blob = layout.place(shape, rng)?;
        objects.push(make(class, vec![blob], rng));
    }
    Some(objects)
}

/// Splits `total` proportionally to `weights` (largest remainder), giving
/// every entry at least `floor`.
fn allocate(total: usize, weights: &[f64], floor: usize) -> Vec<usize> {
    let spare = total - floor * weights.len();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * spare as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| floor + e.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        out[i] += 1;
        rest -= 1;
    }
    out
}

fn render<R: Rng>(config: &GenConfig, objects: &[Object], rng: &mut R) -> Result<Scene> {
    let n = config.points_per_scene;
    let w = config.room_size;
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;
    let color_noise = Normal::new(0.0, 0.03).expect("valid constant");
    let noisy = |p: Point3, rng: &mut R| -> Point3 {
        if config.noise_sigma > 0.0 {
            p.map(|v| v + noise.sample(rng))
        } else {
            p
        }
    };
    let shade = |c: Point3, rng: &mut R| -> Point3 { c.map(|v| (v + color_noise.sample(rng)).clamp(0.0, 1.0)) };

    let mut positions = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    let mut semantic = Vec::with_capacity(n);
    let mut instance = Vec::with_capacity(n);

    let bg = (BACKGROUND_FRACTION * n as f64).round() as usize;
    let floor_area = w * w;
    let wall_area = w * WALL_HEIGHT;
    let footprints: Vec<[f64; 4]> = objects.iter().flat_map(|o| o.blobs.iter().map(Blob::footprint)).collect();
    for _ in 0..bg {
        let u = rng.random::<f64>() * (floor_area + 2.0 * wall_area);
        let (p, c) = if u < floor_area {
            let mut p = [rng.random_range(0.0..w), rng.random_range(0.0..w), 0.0];
            for _ in 0..PLACEMENT_TRIES {
                if !footprints.iter().any(|f| p[0] >= f[0] && p[0] <= f[2] && p[1] >= f[1] && p[1] <= f[3]) {
                    break;
                }
                p = [rng.random_range(0.0..w), rng.random_range(0.0..w), 0.0];
            }
            (p, [0.5, 0.45, 0.4])
        } else if u < floor_area + wall_area {
            ([0.0, rng.random_range(0.0..w), rng.random_range(0.0..WALL_HEIGHT)], [0.75, 0.75, 0.72])
        } else {
            ([rng.random_range(0.0..w), 0.0, rng.random_range(0.0..WALL_HEIGHT)], [0.75, 0.75, 0.72])
        };
        positions.push(noisy(p, rng));
        colors.push(shade(c, rng));
        semantic.push(0);
        instance.push(-1);
    }

    let areas: Vec<f64> = objects
        .iter()
        .map(|o| o.blobs.iter().map(|b| b.shape.area()).sum())
        .collect();
    let counts = allocate(n - bg, &areas, MIN_INSTANCE_POINTS);
    for (id, (obj, &count)) in objects.iter().zip(&counts).enumerate() {
        let blob_areas: Vec<f64> = obj.blobs.iter().map(|b| b.shape.area()).collect();
        let per_blob = allocate(count, &blob_areas, 1);
        for (blob, &m) in obj.blobs.iter().zip(&per_blob) {
            for _ in 0..m {
                let p = blob.shape.sample(blob.x, blob.y, rng);
                positions.push(noisy(p, rng));
                colors.push(shade(obj.color, rng));
                semantic.push(obj.class as u32);
                instance.push(id as i32);
            }
        }
    }
    let superpoints = voxelize(&positions, config.superpoint_voxel)?
        .point_to_voxel
        .into_iter()
        .map(|v| v as u32)
        .collect();
    Scene::new(positions, colors, semantic, instance, Some(superpoints), config.num_classes)
}

/// Checks the structural promise of the scenario on a generated scene.
fn check_scenario(scene: &Scene, scenario: Scenario, objects: &[Object]) -> Result<()> {
    match scenario {
        Scenario::Uniform => Ok(()),
        Scenario::Packed => {
            let boxes = scene.instance_boxes();
            let classes = scene.instance_classes();
            for a in 0..boxes.len() {
                for b in a + 1..boxes.len() {
                    if classes[a] != classes[b] {
                        continue;
                    }
                    let ca = boxes[a].center();
                    let cb = boxes[b].center();
                    let dist = crate::geom::dist2(&ca, &cb).sqrt();
                    let ext = |x: &crate::geom::Aabb| x.extent().into_iter().fold(0.0, f64::max);
                    if dist < ext(&boxes[a]) + ext(&boxes[b]) {
                        return Ok(());
                    }
                }
            }
            Err(Error::invalid("packed scene has no close same-class pair"))
        }
        Scenario::Loose => {
            if objects.iter().any(|o| o.blobs.len() >= 2) {
                Ok(())
            } else {
                Err(Error::invalid("loose scene has no multi-blob instance"))
            }
        }
    }
}

/// One scene from its own seed, or `None` when placement keeps failing.
pub fn generate_one(config: &GenConfig, seed: u64) -> Result<Option<(Scenario, Scene)>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenario = pick_scenario(&config.mix, &mut rng);
    for _ in 0..SCENE_TRIES {
        if let Some(objects) = layout_objects(config, scenario, &mut rng) {
            let scene = render(config, &objects, &mut rng)?;
            check_scenario(&scene, scenario, &objects)?;
            return Ok(Some((scenario, scene)));
        }
    }
    log::warn!("skipping scene with seed {seed}: no feasible {scenario:?} layout");
    Ok(None)
}

/// Scenes with their scenario tags; scene `i` uses seed `config.seed + i`.
pub fn generate_labeled(config: &GenConfig) -> Result<Vec<(Scenario, Scene)>> {
    config.validate()?;
    let out = (0..config.num_scenes)
        .into_par_iter()
        .map(|i| generate_one(config, config.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().flatten().collect())
}

pub fn generate(config: &GenConfig) -> Result<Vec<Scene>> {
    Ok(generate_labeled(config)?.into_iter().map(|(_, s)| s).collect())
}
