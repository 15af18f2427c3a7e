//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints one PASS/FAIL line; exits non-zero if any fails.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isbnet::aggregator::{aggregate, aggregate_backward, ball_query, decode_boxes, PaBlock};
use isbnet::dynconv::{
    decoder_input, dyn_conv_backward, dyn_conv_logits, geo_feature, layout_param_count, rel_pos, KernelLayout,
};
use isbnet::eval::{ap_thresholds, average_precision, evaluate, mask_iou_fn};
use isbnet::geom::mask_iou;
use isbnet::nn::{sigmoid, Dense, Mlp};
use isbnet::pipeline::{
    infer_raw, loss_and_grad, nms, pointwise_predict, encode, train, Expansion, ModelConfig, ModelParams,
    PipelineConfig, Prediction, SceneCache, TrainConfig,
};
use isbnet::sampling::{default_seed, fps, ia_fps_infer, ia_fps_train, instance_recall, OccupancyState, SampleBudget};
use isbnet::scenegen::{generate, GenConfig};
use isbnet::supervision::{
    bce_with_logits, box_l1, cross_entropy, dice_loss_grad, fd_gradient_check, giou_grad, mask_score_loss,
    one_to_many_match, GroundTruth,
};
use isbnet::{Point3, Scene};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: isbnet::Error) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. kernel parameter counts

fn kernel_counts() -> Outcome {
    let rows: [(&[usize], usize); 5] = [
        (&[41, 1], 41),
        (&[25, 8, 1], 216),
        (&[41, 16, 1], 688),
        (&[41, 32, 1], 1376),
        (&[41, 16, 16, 1], 960),
    ];
    for (dims, want) in rows {
        let got = layout_param_count(dims).map_err(err)?;
        ensure(got == want, || format!("{dims:?}: {got} != {want}"))?;
    }
    Ok("5/5 layouts exact".into())
}

// ---------------------------------------------------------------------------
// 2. sampling recall

fn gt_background(scene: &Scene, cfg: &PipelineConfig) -> Vec<f64> {
    scene.semantic.iter().map(|&c| cfg.is_background(c as usize) as u8 as f64).collect()
}

fn sampling_recall() -> Outcome {
    let scenes = generate(&GenConfig {
        num_scenes: 50,
        seed: 500,
        ..GenConfig::default()
    })
    .map_err(err)?;
    let cfg = PipelineConfig::default();
    let budgets = [32usize, 64, 128];
    let mut summary = Vec::new();
    for &b in &budgets {
        let (mut r_fps, mut r_ia) = (0.0, 0.0);
        for (si, s) in scenes.iter().enumerate() {
            let seed = default_seed(&s.positions, None).expect("non-empty scene");
            let plain = fps(&s.positions, b, seed, None).map_err(err)?;
            r_fps += instance_recall(&plain, s).map_err(err)?;

            let state = OccupancyState::new(gt_background(s, &cfg), cfg.tau).map_err(err)?;
            let ia = ia_fps_train(&state, &s.positions, b, None).map_err(err)?;
            r_ia += instance_recall(&ia, s).map_err(err)?;

            // oracle masks: every sampled point claims its whole instance
            let mut state = OccupancyState::new(gt_background(s, &cfg), cfg.tau).map_err(err)?;
            let schedule = SampleBudget::new(vec![1; b]).map_err(err)?;
            let oracle = ia_fps_infer(&mut state, &s.positions, &schedule, None, |chunk| {
                Ok(chunk
                    .iter()
                    .map(|&i| {
                        let id = s.instance[i];
                        s.instance.iter().map(|&x| (id >= 0 && x == id) as u8 as f64).collect()
                    })
                    .collect())
            })
            .map_err(err)?;
            if b >= s.num_instances() {
                let r = instance_recall(&oracle, s).map_err(err)?;
                ensure(r == 1.0, || format!("scene {si}, budget {b}: oracle-mask recall {r}"))?;
            }
        }
        let n = scenes.len() as f64;
        let (r_fps, r_ia) = (r_fps / n, r_ia / n);
        ensure(r_ia >= r_fps, || format!("budget {b}: IA-FPS {r_ia:.4} < FPS {r_fps:.4}"))?;
        summary.push(format!("{b}: fps {r_fps:.3} ia {r_ia:.3}"));
    }
    Ok(summary.join(", ") + "; oracle-mask recall 1.0")
}

// ---------------------------------------------------------------------------
// 3. gradient checks

const FD_EPS: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
const TRIALS: usize = 20;

/// Runs `TRIALS` accepted trials of `make`; a trial is rejected (redrawn)
/// when `make` returns `None` because the draw sits too close to a kink.
fn fd_trials<F, L>(name: &str, mut make: F) -> Result<(String, f64), String>
where
    F: FnMut(&mut ChaCha8Rng) -> Option<(Vec<f64>, L)>,
    L: Fn(&[f64]) -> isbnet::Result<(f64, Vec<f64>)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < TRIALS {
        attempts += 1;
        if attempts > 20 * TRIALS {
            return Err(format!("{name}: only {accepted} non-degenerate trials"));
        }
        let Some((x, loss)) = make(&mut rng) else { continue };
        let e = fd_gradient_check(&loss, &x, FD_EPS).map_err(err)?;
        worst = worst.max(e);
        accepted += 1;
    }
    ensure(worst <= FD_TOL, || format!("{name}: max relative error {worst:e}"))?;
    Ok((format!("{name} {worst:.1e}"), worst))
}

fn bools(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut v: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    v[0] = true;
    v
}

/// Two random boxes with every face pair separated by at least `gap`.
fn box_pair(rng: &mut ChaCha8Rng, gap: f64) -> Option<([f64; 6], [f64; 6])> {
    let mut a = [0.0; 6];
    let mut b = [0.0; 6];
    for d in 0..3 {
        let lo: f64 = rng.random_range(-1.0..0.5);
        a[d] = lo;
        a[d + 3] = lo + rng.random_range(0.2..1.5);
        let lo: f64 = rng.random_range(-1.0..0.5);
        b[d] = lo;
        b[d + 3] = lo + rng.random_range(0.2..1.5);
    }
    let coords = [a[0], a[1], a[2], a[3], a[4], a[5], b[0], b[1], b[2], b[3], b[4], b[5]];
    for d in 0..3 {
        for (x, y) in [(d, d + 6), (d + 3, d + 9), (d, d + 9), (d + 3, d + 6)] {
            if (coords[x] - coords[y]).abs() < gap {
                return None;
            }
        }
    }
    Some((a, b))
}

fn primitive_gradients() -> Result<Vec<(String, f64)>, String> {
    let mut out = Vec::new();
    out.push(fd_trials("dice", |rng| {
        let n = rng.random_range(3..30);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let gt = bools(rng, n);
        Some((x, move |p: &[f64]| dice_loss_grad(p, &gt)))
    })?);
    out.push(fd_trials("bce", |rng| {
        let n = rng.random_range(3..30);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let gt = bools(rng, n);
        Some((x, move |p: &[f64]| bce_with_logits(p, &gt)))
    })?);
    out.push(fd_trials("ce", |rng| {
        let c = rng.random_range(2..8);
        let x: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t = rng.random_range(0..c);
        Some((x, move |p: &[f64]| cross_entropy(p, t)))
    })?);
    out.push(fd_trials("l1", |rng| {
        let (a, b) = box_pair(rng, 1e-3)?;
        Some((a.to_vec(), move |p: &[f64]| {
            let (v, g) = box_l1(&p.try_into().unwrap(), &b);
            Ok((v, g.to_vec()))
        }))
    })?);
    out.push(fd_trials("giou", |rng| {
        let (a, b) = box_pair(rng, 1e-3)?;
        Some((a.to_vec(), move |p: &[f64]| {
            let (v, g) = giou_grad(&p.try_into().unwrap(), &b);
            Ok((1.0 - v, g.iter().map(|x| -x).collect()))
        }))
    })?);
    out.push(fd_trials("mask-score", |rng| {
        let x = vec![rng.random_range(-4.0..4.0)];
        let t: f64 = rng.random_range(0.0..1.0);
        Some((x, move |p: &[f64]| {
            let (v, g) = mask_score_loss(p[0], t);
            Ok((v, vec![g]))
        }))
    })?);
    Ok(out)
}

fn mlp_params(m: &Mlp) -> Vec<f64> {
    m.layers.iter().flat_map(|l| l.params().copied().collect::<Vec<_>>()).collect()
}

fn set_mlp(m: &mut Mlp, v: &[f64]) -> usize {
    let mut it = v.iter();
    for l in &mut m.layers {
        for p in l.params_mut() {
            *p = *it.next().unwrap();
        }
    }
    v.len() - it.len()
}

/// Fixed data of one composite trial: point features go through a point
/// aggregation block, a dense kernel head, and the dynamic convolution.
struct Composite {
    positions: Vec<Point3>,
    centers: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
    f_mask: Array2<f64>,
    point_boxes: Vec<[f64; 6]>,
    cand_boxes: Vec<[f64; 6]>,
    gt: Vec<Vec<bool>>,
    block: PaBlock,
    head: Dense,
    layout: KernelLayout,
    dim: usize,
}

impl Composite {
    fn draw(rng: &mut ChaCha8Rng) -> (Composite, Vec<f64>) {
        let n = rng.random_range(24..=64);
        let dim = 6;
        let h = 4;
        let positions: Vec<Point3> = (0..n)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let centers = fps(&positions, 4, 0, None).unwrap();
        let block = PaBlock::init(0.4, 8, dim, rng);
        let neighbors = ball_query(&positions, &centers, block.radius, block.neighbors).unwrap();
        let layout = KernelLayout::for_mask_width(h, &[8], true).unwrap();
        let head = Dense::init(dim, layout.param_count(), rng);
        let rand_box = |rng: &mut ChaCha8Rng| {
            let mut b = [0.0; 6];
            for d in 0..3 {
                b[d] = rng.random_range(-0.5..0.5);
                b[d + 3] = b[d] + rng.random_range(0.1..1.0);
            }
            b
        };
        let point_boxes = (0..n).map(|_| rand_box(rng)).collect();
        let cand_boxes = (0..centers.len()).map(|_| rand_box(rng)).collect();
        let f_mask = Array2::from_shape_fn((n, h), |_| rng.random_range(-1.0..1.0));
        let gt = (0..centers.len()).map(|_| bools(rng, n)).collect();
        let features: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = mlp_params(&block.mlp);
        x.extend(head.params());
        x.extend(features);
        (
            Composite {
                positions,
                centers,
                neighbors,
                f_mask,
                point_boxes,
                cand_boxes,
                gt,
                block,
                head,
                layout,
                dim,
            },
            x,
        )
    }

    /// `sum_k dice(sigmoid(z_k), m_k) + bce(z_k, m_k)` and its gradient with
    /// respect to `[block params, head params, point features]`.
    fn loss(&self, x: &[f64]) -> isbnet::Result<(f64, Vec<f64>)> {
        let n = self.positions.len();
        let mut block = self.block.clone();
        let used = set_mlp(&mut block.mlp, x);
        let mut head = self.head.clone();
        let mut it = x[used..].iter();
        for p in head.params_mut() {
            *p = *it.next().unwrap();
        }
        let feat_start = used + head.num_params();
        let features = Array2::from_shape_vec((n, self.dim), x[feat_start..].to_vec()).unwrap();

        let (e, trace) = aggregate(&block, features.view(), &self.positions, &self.centers, &self.neighbors)?;
        let kernels = head.forward(e.view());
        let mut total = 0.0;
        let mut d_kernels = Array2::zeros(kernels.dim());
        for (k, &c) in self.centers.iter().enumerate() {
            let geo = geo_feature(&self.point_boxes, &self.cand_boxes[k]);
            let pos = rel_pos(&self.positions, &self.positions[c]);
            let input = decoder_input(self.f_mask.view(), pos.view(), Some(geo.view()))?;
            let w = kernels.row(k).to_vec();
            let z = dyn_conv_logits(input.view(), &w, &self.layout)?.to_vec();
            let probs: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            let (dice, d_probs) = dice_loss_grad(&probs, &self.gt[k])?;
            let (bce, d_z_bce) = bce_with_logits(&z, &self.gt[k])?;
            total += dice + bce;
            let d_z: Array1<f64> = (0..n).map(|i| d_probs[i] * probs[i] * (1.0 - probs[i]) + d_z_bce[i]).collect();
            let (_, d_w) = dyn_conv_backward(input.view(), &w, &self.layout, d_z.view())?;
            d_kernels.row_mut(k).assign(&Array1::from(d_w));
        }
        let mut g_head = head.zeros_like();
        let d_e = head.backward(e.view(), d_kernels.view(), &mut g_head);
        let mut g_mlp = block.mlp.zeros_like();
        let d_features = aggregate_backward(&block, &trace, d_e.view(), &mut g_mlp);
        let mut grad = mlp_params(&g_mlp);
        grad.extend(g_head.params());
        grad.extend(d_features.iter());
        Ok((total, grad))
    }

    /// True when every coordinate's one-sided differences agree, i.e. no
    /// ReLU or max-pool switch lies within the FD step.
    fn smooth_at(&self, x: &[f64]) -> bool {
        let Ok((f0, _)) = self.loss(x) else { return false };
        let mut v = x.to_vec();
        for i in 0..v.len() {
            let orig = v[i];
            v[i] = orig + FD_EPS;
            let fp = self.loss(&v).map(|r| r.0).unwrap_or(f64::NAN);
            v[i] = orig - FD_EPS;
            let fm = self.loss(&v).map(|r| r.0).unwrap_or(f64::NAN);
            v[i] = orig;
            let (fwd, bwd) = ((fp - f0) / FD_EPS, (f0 - fm) / FD_EPS);
            if !((fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()).max(1e-2)) {
                return false;
            }
        }
        true
    }
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut parts: Vec<String> = primitive_gradients()?.into_iter().map(|p| p.0).collect();
    let mut rejected = 0;
    let (label, _) = fd_trials("composite", |rng| {
        let (c, x) = Composite::draw(rng);
        if !c.smooth_at(&x) {
            rejected += 1;
            return None;
        }
        Some((x, move |p: &[f64]| c.loss(p)))
    })?;
    parts.push(format!("{label} ({rejected} kinked draws skipped)"));
    Ok(format!("{} in {:.1}s", parts.join(", "), start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 4. matching against exhaustive search

/// Minimum total cost over all assignments of `min(K, J*S)` candidates to
/// ground truths, each ground truth taking at most `s`.
fn brute_force_min(cost: &Array2<f64>, s: usize) -> f64 {
    let (k, j) = cost.dim();
    let want = k.min(j * s);
    let mut best = f64::INFINITY;
    let mut choice = vec![0usize; k]; // 0 = unmatched, g + 1 = ground truth g
    loop {
        let mut load = vec![0usize; j];
        let mut pairs = 0;
        let mut total = 0.0;
        let mut ok = true;
        for (c, &g) in choice.iter().enumerate() {
            if g > 0 {
                load[g - 1] += 1;
                pairs += 1;
                total += cost[[c, g - 1]];
                ok &= load[g - 1] <= s;
            }
        }
        if ok && pairs == want {
            best = best.min(total);
        }
        // odometer increment in base j + 1
        let mut pos = 0;
        loop {
            if pos == k {
                return best;
            }
            choice[pos] += 1;
            if choice[pos] <= j {
                break;
            }
            choice[pos] = 0;
            pos += 1;
        }
    }
}

fn matching_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for case in 0..200 {
        let k = rng.random_range(1..=6);
        let j = rng.random_range(1..=2);
        let s = rng.random_range(1..=3);
        let cost = Array2::from_shape_fn((k, j), |_| rng.random_range(0..20) as f64);
        let a = one_to_many_match(cost.view(), s).map_err(err)?;
        let mut load = vec![0; j];
        for &(_, g) in &a.pairs {
            load[g] += 1;
        }
        ensure(a.pairs.len() == k.min(j * s) && load.iter().all(|&l| l <= s), || {
            format!("case {case}: invalid assignment {:?}", a.pairs)
        })?;
        let got = a.total_cost(cost.view());
        let want = brute_force_min(&cost, s);
        ensure(got == want, || format!("case {case}: cost {got} vs optimum {want}"))?;
    }
    Ok("200/200 optimal".into())
}

// ---------------------------------------------------------------------------
// 5. AP against a brute-force precision/recall computation

fn oracle_ap(preds: &[Vec<Prediction>], gts: &[GroundTruth], thresholds: &[f64]) -> f64 {
    let mut classes: Vec<usize> = gts.iter().flat_map(|g| g.classes.clone()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut sum = 0.0;
    for &t in thresholds {
        for &c in &classes {
            // every prediction of class c with its scene, best score first
            let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
            for (s, ps) in preds.iter().enumerate() {
                for (i, p) in ps.iter().enumerate() {
                    if p.class == c {
                        ranked.push((p.score, s, i));
                    }
                }
            }
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let total_gt = gts.iter().flat_map(|g| &g.classes).filter(|&&x| x == c).count();
            let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut tp_flags = Vec::new();
            for &(_, s, i) in &ranked {
                let mask = &preds[s][i].mask;
                let mut best = (-1.0, usize::MAX);
                for (g, gm) in gts[s].masks.iter().enumerate() {
                    if gts[s].classes[g] != c || taken[s][g] {
                        continue;
                    }
                    let inter = mask.iter().zip(gm).filter(|(a, b)| **a && **b).count() as f64;
                    let union = mask.iter().zip(gm).filter(|(a, b)| **a || **b).count() as f64;
                    let iou = if union > 0.0 { inter / union } else { 0.0 };
                    if iou >= t && iou > best.0 {
                        best = (iou, g);
                    }
                }
                let hit = best.1 != usize::MAX;
                if hit {
                    taken[s][best.1] = true;
                }
                tp_flags.push(hit);
            }
            // area under the interpolated curve: each true positive adds
            // 1/total_gt of recall at the best precision reachable from there
            let mut ap = 0.0;
            for r in 0..tp_flags.len() {
                if !tp_flags[r] {
                    continue;
                }
                let mut best_prec: f64 = 0.0;
                for cut in r..tp_flags.len() {
                    let tp = tp_flags[..=cut].iter().filter(|&&h| h).count();
                    best_prec = best_prec.max(tp as f64 / (cut + 1) as f64);
                }
                ap += best_prec / total_gt as f64;
            }
            sum += ap;
        }
    }
    sum / (thresholds.len() * classes.len()) as f64
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<Prediction>>, Vec<GroundTruth>) {
    let n = 8;
    let scenes = rng.random_range(1..=3);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for s in 0..scenes {
        let j = if s == 0 { rng.random_range(1..=3) } else { rng.random_range(0..=3) };
        let masks: Vec<Vec<bool>> = (0..j)
            .map(|_| {
                let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
                m[rng.random_range(0..n)] = true;
                m
            })
            .collect();
        gts.push(GroundTruth {
            classes: (0..j).map(|_| rng.random_range(1..=2)).collect(),
            boxes: vec![[0.0; 6]; j],
            masks,
        });
        let k = rng.random_range(0..=4);
        preds.push(
            (0..k)
                .map(|_| Prediction {
                    class: rng.random_range(1..=2),
                    score: rng.random_range(0.0..1.0),
                    bbox: [0.0; 6],
                    mask: (0..n).map(|_| rng.random_bool(0.5)).collect(),
                })
                .collect(),
        );
    }
    (preds, gts)
}

fn ap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let ts = ap_thresholds();
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let (preds, gts) = random_case(&mut rng);
        for thr in [&ts[..], &[0.5][..], &[0.25][..]] {
            let got = average_precision(&preds, &gts, mask_iou_fn, thr).map_err(err)?.mean;
            let want = oracle_ap(&preds, &gts, thr);
            worst = worst.max((got - want).abs());
            ensure((got - want).abs() <= 1e-12, || format!("case {case}: {got} vs oracle {want}"))?;
        }
    }
    // perfect predictions
    let (_, gts) = random_case(&mut rng);
    let perfect: Vec<Vec<Prediction>> = gts
        .iter()
        .map(|g| {
            g.masks
                .iter()
                .zip(&g.classes)
                .map(|(m, &c)| Prediction {
                    class: c,
                    score: 1.0,
                    bbox: [0.0; 6],
                    mask: m.clone(),
                })
                .collect()
        })
        .collect();
    let r = evaluate(&perfect, &gts).map_err(err)?;
    ensure(r.ap == 1.0 && r.ap50 == 1.0 && r.ap25 == 1.0, || {
        format!("perfect predictions: AP {} AP50 {} AP25 {}", r.ap, r.ap50, r.ap25)
    })?;
    Ok(format!("50 cases, max deviation {worst:.1e}; perfect = 1.0"))
}

// ---------------------------------------------------------------------------
// 6. early vs late feature expansion

fn expansion_equivalence() -> Outcome {
    let scenes = generate(&GenConfig {
        num_scenes: 10,
        points_per_scene: 1024,
        seed: 600,
        ..GenConfig::default()
    })
    .map_err(err)?;
    let params = ModelParams::init(ModelConfig::new(5, true), 6).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (i, s) in scenes.iter().enumerate() {
        let run = |expansion| {
            let cfg = PipelineConfig {
                voxel_size: Some(0.05),
                expansion,
                ..PipelineConfig::desk()
            };
            infer_raw(s, &params, &cfg)
        };
        let early = run(Expansion::Early).map_err(err)?;
        let late = run(Expansion::Late).map_err(err)?;
        ensure(!early.candidates.is_empty(), || format!("scene {i}: no candidates"))?;
        ensure(early.candidates == late.candidates, || format!("scene {i}: candidates differ"))?;
        let d = (&early.mask_logits - &late.mask_logits).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        worst = worst.max(d);
        ensure(d <= 1e-12, || format!("scene {i}: mask logits differ by {d:e}"))?;
    }
    Ok(format!("10 scenes, max logit difference {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 7. desk-scale training and the geometric-cue ablation

const TIME_LIMIT_SECS: f64 = 30.0 * 60.0;
const ABLATION_SEEDS: u64 = 5;

fn desk_sets() -> isbnet::Result<(Vec<Scene>, Vec<Scene>)> {
    let base = GenConfig {
        points_per_scene: 1024,
        ..GenConfig::default()
    };
    let train_set = generate(&GenConfig {
        num_scenes: 150,
        seed: 1000,
        ..base.clone()
    })?;
    let val_set = generate(&GenConfig {
        num_scenes: 30,
        seed: 9000,
        ..base
    })?;
    Ok((train_set, val_set))
}

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 4,
        eval_every: 5,
        keep_best: true,
        time_limit_secs: Some(TIME_LIMIT_SECS),
        seed,
        ..TrainConfig::default()
    }
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let (train_set, val_set) = desk_sets().map_err(err)?;
    let pipeline = PipelineConfig::desk();
    let mut ap = [Vec::new(), Vec::new()]; // [geo on, geo off]
    let mut headline = None;
    for seed in 0..ABLATION_SEEDS {
        for (slot, geo) in [true, false].into_iter().enumerate() {
            let (_, log) = train(ModelConfig::new(5, geo), &train_set, &val_set, &pipeline, &desk_train_config(seed))
                .map_err(err)?;
            let last = log.epochs.last().and_then(|e| e.val_ap).unwrap_or(0.0);
            ap[slot].push(last);
            if seed == 0 && geo {
                let elapsed = start.elapsed().as_secs_f64();
                let best = log.best_val_ap50.unwrap_or(0.0);
                ensure(elapsed <= TIME_LIMIT_SECS, || format!("training took {elapsed:.0}s"))?;
                ensure(best >= 0.60, || format!("val AP50 {best:.3} < 0.60 after {elapsed:.0}s"))?;
                headline = Some(format!("val AP50 {best:.3} in {elapsed:.0}s"));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (on, off) = (mean(&ap[0]), mean(&ap[1]));
    let detail = format!("geo {on:.3} vs no-geo {off:.3} over seeds {:?} / {:?}", ap[0], ap[1]);
    ensure(on >= off, || format!("{}; ablation direction fails: {detail}", headline.clone().unwrap_or_default()))?;
    Ok(format!("{}; {detail}", headline.unwrap_or_default()))
}

// ---------------------------------------------------------------------------
// 8. invariants

fn invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);

    // FPS: deterministic, budgets are prefixes, ties go to the lower index
    let pts: Vec<Point3> = (0..200)
        .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
        .collect();
    let long = fps(&pts, 64, 3, None).map_err(err)?;
    ensure(long == fps(&pts, 64, 3, None).map_err(err)?, || "fps not deterministic".into())?;
    for b in [1, 5, 17, 63] {
        ensure(fps(&pts, b, 3, None).map_err(err)?[..] == long[..b], || format!("budget {b} not a prefix"))?;
    }
    let sym = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
    ensure(fps(&sym, 2, 0, None).map_err(err)? == vec![0, 1], || "tie not broken toward lower index".into())?;

    // residual identity: an all-zero block passes center features through
    let feats = Array2::from_shape_fn((pts.len(), 8), |_| rng.random_range(-1.0..1.0));
    let centers = &long[..16];
    let block = PaBlock::zeros(0.2, 8, 8);
    let nbrs = ball_query(&pts, centers, 0.2, 8).map_err(err)?;
    let (e, _) = aggregate(&block, feats.view(), &pts, centers, &nbrs).map_err(err)?;
    for (k, &c) in centers.iter().enumerate() {
        ensure(e.row(k) == feats.row(c), || format!("residual identity broken at center {c}"))?;
    }

    // local offsets scaled by the radius stay in [-1, 1]
    for (k, &c) in centers.iter().enumerate() {
        for &q in &nbrs[k] {
            for d in 0..3 {
                let v = (pts[q][d] - pts[c][d]) / 0.2;
                ensure((-1.0..=1.0).contains(&v), || format!("local offset {v} outside [-1, 1]"))?;
            }
        }
    }

    // NMS at 0.2: survivors pairwise <= 0.2, each suppressed mask overlaps
    // a higher-scored survivor by more than 0.2, and IoU exactly 0.2 survives
    for _ in 0..50 {
        let m = rng.random_range(1..12);
        let masks: Vec<Vec<bool>> = (0..m).map(|_| (0..10).map(|_| rng.random_bool(0.4)).collect()).collect();
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let kept = nms(&masks, &scores, 0.2).map_err(err)?;
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                ensure(mask_iou(&masks[i], &masks[j]).unwrap() <= 0.2, || "kept masks overlap".into())?;
            }
        }
        for i in (0..m).filter(|i| !kept.contains(i)) {
            let covered = kept
                .iter()
                .any(|&k| scores[k] >= scores[i] && mask_iou(&masks[i], &masks[k]).unwrap() > 0.2);
            ensure(covered, || format!("mask {i} suppressed without cause"))?;
        }
    }
    let a = vec![true, true, true, false, false];
    let b = vec![false, false, true, true, true];
    let c = vec![true, false, false, false, false];
    // a/c: IoU 1/3 > 0.2; a/b: 1/5 = 0.2 exactly
    ensure(nms(&[a.clone(), b.clone()], &[0.9, 0.8], 0.2).map_err(err)? == vec![0, 1], || {
        "IoU at the threshold was suppressed".into()
    })?;
    ensure(nms(&[a, c], &[0.9, 0.8], 0.2).map_err(err)? == vec![0], || "IoU above the threshold kept".into())?;

    // boxes decode with min <= max for any raw output
    let raw = Array2::from_shape_fn((500, 6), |_| rng.random_range(-60.0..60.0));
    let anchors: Vec<Point3> = (0..500).map(|i| pts[i % pts.len()]).collect();
    ensure(decode_boxes(raw.view(), &anchors).iter().all(|b| (0..3).all(|d| b[d] <= b[d + 3])), || {
        "decoded box with min > max".into()
    })?;

    // loss decomposition on a real training step
    let scene = &generate(&GenConfig {
        num_scenes: 1,
        points_per_scene: 512,
        seed: 8,
        ..GenConfig::default()
    })
    .map_err(err)?[0];
    let cfg = PipelineConfig::desk();
    let params = ModelParams::init(ModelConfig::new(5, true), 1).map_err(err)?;
    let f = encode(scene, &params, &cfg).map_err(err)?;
    let pw = pointwise_predict(&params, f.view(), &scene.positions).map_err(err)?;
    ensure(pw.boxes.iter().all(|b| (0..3).all(|d| b[d] <= b[d + 3])), || "point box with min > max".into())?;
    let cache = SceneCache::new(scene, &cfg).map_err(err)?;
    let (r, _) = loss_and_grad(&params, scene, &cache, &cfg).map_err(err)?;
    let recomposed = r.weighted_inst(&cfg.loss);
    ensure((r.inst - recomposed).abs() <= 1e-12 * r.inst.abs().max(1.0), || {
        format!("instance loss {} != weighted sum {recomposed}", r.inst)
    })?;
    ensure((r.total - r.inst - r.semantic - r.point_box).abs() <= 1e-12 * r.total.abs().max(1.0), || {
        "total loss is not the sum of its parts".into()
    })?;
    Ok("fps, residual, local offsets, nms, boxes, loss decomposition".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("kernel parameter counts", kernel_counts),
        ("sampling recall", sampling_recall),
        ("gradient checks", gradient_checks),
        ("matching oracle", matching_oracle),
        ("AP oracle", ap_oracle),
        ("early/late expansion", expansion_equivalence),
        ("desk-scale training + geo ablation", end_to_end),
        ("invariants", invariants),
    ];
    // `cargo test -- <filter>` style selection by criterion number
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {id}. {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {id}. {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
