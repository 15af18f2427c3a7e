//! Farthest-point sampling and the instance-aware variant that skips probable
//! background and points already claimed by decoded instance masks.

use crate::error::{check_len, Error, Result};
use crate::geom::{dist2, Point3, Scene};

/// Default foreground threshold `τ`.
pub const DEFAULT_TAU: f64 = 0.5;

/// Chunk schedule `κ_1..κ_T` used at inference.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SampleBudget {
    pub chunk_sizes: Vec<usize>,
}

impl Default for SampleBudget {
    fn default() -> Self {
        SampleBudget {
            chunk_sizes: vec![192, 128, 64],
        }
    }
}

impl SampleBudget {
    pub fn new(chunk_sizes: Vec<usize>) -> Result<Self> {
        if chunk_sizes.is_empty() || chunk_sizes.contains(&0) {
            return Err(Error::invalid("chunk sizes must be non-empty and positive"));
        }
        Ok(SampleBudget { chunk_sizes })
    }

    pub fn total(&self) -> usize {
        self.chunk_sizes.iter().sum()
    }

    /// Splits `total` in the 3:2:1 proportion of the default schedule.
    pub fn proportional(total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::invalid("total budget must be positive"));
        }
        if total < 3 {
            return SampleBudget::new(vec![total]);
        }
        let first = total / 2;
        let second = total / 3;
        SampleBudget::new(vec![first, second, total - first - second])
    }
}

/// Per-point occupancy: background probability and the strongest claim of
/// any decoded candidate mask so far.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyState {
    background: Vec<f64>,
    claimed: Vec<f64>,
    num_claims: usize,
    tau: f64,
}

impl OccupancyState {
    pub fn new(background: Vec<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1), got {tau}")));
        }
        if background.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("background probability outside [0, 1]"));
        }
        let n = background.len();
        Ok(OccupancyState {
            background,
            claimed: vec![0.0; n],
            num_claims: 0,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.background.len()
    }

    pub fn is_empty(&self) -> bool {
        self.background.is_empty()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_claims(&self) -> usize {
        self.num_claims
    }

    pub fn background(&self) -> &[f64] {
        &self.background
    }

    /// Registers one decoded candidate mask.
    pub fn claim(&mut self, mask: &[f64]) -> Result<()> {
        check_len(self.len(), mask.len())?;
        if mask.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("mask probability outside [0, 1]"));
        }
        for (c, &m) in self.claimed.iter_mut().zip(mask) {
            *c = c.max(m);
        }
        self.num_claims += 1;
        Ok(())
    }

    pub fn is_foreground(&self, i: usize) -> bool {
        1.0 - self.background[i] > self.tau
    }

    pub fn is_unclaimed(&self, i: usize) -> bool {
        1.0 - self.claimed[i] > self.tau
    }

    /// `min_k (1 - m_k) > τ` over the background term and every claim.
    pub fn is_available(&self, i: usize) -> bool {
        self.is_foreground(i) && self.is_unclaimed(i)
    }

    pub fn foreground(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_foreground(i)).collect()
    }
}

/// Index of the allowed point nearest to the centroid of allowed points.
pub fn default_seed(positions: &[Point3], filter: Option<&[bool]>) -> Option<usize> {
    let allowed = |i: usize| filter.is_none_or(|f| f[i]);
    let mut centroid = [0.0; 3];
    let mut count = 0usize;
    for (i, p) in positions.iter().enumerate() {
        if allowed(i) {
            for d in 0..3 {
                centroid[d] += p[d];
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let centroid = centroid.map(|c| c / count as f64);
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in positions.iter().enumerate() {
        if !allowed(i) {
            continue;
        }
        let d = dist2(p, &centroid);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Incremental max-min sampler. Selected points and points outside the
/// current filter are never returned; ties go to the lowest index.
struct FarthestSampler<'a> {
    positions: &'a [Point3],
    min_dist: Vec<f64>,
    selected: Vec<bool>,
    order: Vec<usize>,
}

impl<'a> FarthestSampler<'a> {
    fn new(positions: &'a [Point3]) -> Self {
        FarthestSampler {
            positions,
            min_dist: vec![f64::INFINITY; positions.len()],
            selected: vec![false; positions.len()],
            order: Vec::new(),
        }
    }

    fn select(&mut self, i: usize) {
        self.selected[i] = true;
        self.order.push(i);
        let c = self.positions[i];
        for (d, p) in self.min_dist.iter_mut().zip(self.positions) {
            let nd = dist2(p, &c);
            if nd < *d {
                *d = nd;
            }
        }
    }

    /// Farthest unselected point passing `allowed`.
    fn next(&self, allowed: impl Fn(usize) -> bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &d) in self.min_dist.iter().enumerate() {
            if self.selected[i] || !allowed(i) {
                continue;
            }
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Greedy max-min sampling of `budget` points among those allowed by
/// `filter`, starting at `seed`.
pub fn fps(
    positions: &[Point3],
    budget: usize,
    seed: usize,
    filter: Option<&[bool]>,
) -> Result<Vec<usize>> {
    let n = positions.len();
    if let Some(f) = filter {
        check_len(n, f.len())?;
    }
    if seed >= n {
        return Err(Error::IndexOutOfRange { index: seed, len: n });
    }
    let allowed = |i: usize| filter.is_none_or(|f| f[i]);
    if !allowed(seed) {
        return Err(Error::SeedFiltered(seed));
    }
    let available = (0..n).filter(|&i| allowed(i)).count();
    if budget == 0 || budget > available {
        return Err(Error::BudgetTooLarge {
            requested: budget,
            available,
        });
    }
    let mut sampler = FarthestSampler::new(positions);
    sampler.select(seed);
    while sampler.order.len() < budget {
        let next = sampler.next(allowed).expect("budget checked against allowed count");
        sampler.select(next);
    }
    Ok(sampler.order)
}

/// Training-time sampling: up to `k` points from the predicted foreground
/// in one shot. Returns the whole foreground when it has fewer than `k`
/// points.
pub fn ia_fps_train(
    state: &OccupancyState,
    positions: &[Point3],
    k: usize,
    seed: Option<usize>,
) -> Result<Vec<usize>> {
    check_len(state.len(), positions.len())?;
    let fg = state.foreground();
    let count = fg.iter().filter(|&&f| f).count();
    if count == 0 {
        return Err(Error::NoForeground);
    }
    let seed = match seed {
        Some(s) => s,
        None => default_seed(positions, Some(&fg)).expect("foreground is non-empty"),
    };
    fps(positions, k.min(count), seed, Some(&fg))
}

/// Inference-time sampling in chunks. After each chunk `mask_provider`
/// receives the chunk's indices and returns one mask per index; those
/// masks shrink the pool for later chunks.
///
/// When the pool empties inside a chunk, the remaining slots are filled from
/// points not claimed by any mask, ignoring the background test; when that
/// also runs dry sampling stops early.
pub fn ia_fps_infer<F>(
    state: &mut OccupancyState,
    positions: &[Point3],
    budget: &SampleBudget,
    seed: Option<usize>,
    mut mask_provider: F,
) -> Result<Vec<usize>>
where
    F: FnMut(&[usize]) -> Result<Vec<Vec<f64>>>,
{
    check_len(state.len(), positions.len())?;
    let fg = state.foreground();
    if !fg.iter().any(|&f| f) {
        return Err(Error::NoForeground);
    }
    let seed = match seed {
        Some(s) if s < positions.len() && state.is_available(s) => s,
        Some(s) => return Err(Error::SeedFiltered(s)),
        None => default_seed(positions, Some(&fg)).expect("foreground is non-empty"),
    };

    let mut sampler = FarthestSampler::new(positions);
    let mut exhausted = false;
    for &kappa in &budget.chunk_sizes {
        let start = sampler.order.len();
        while sampler.order.len() - start < kappa {
            let next = if sampler.order.is_empty() {
                Some(seed)
            } else {
                sampler
                    .next(|i| state.is_available(i))
                    .or_else(|| sampler.next(|i| state.is_unclaimed(i)))
            };
            match next {
                Some(i) => sampler.select(i),
                None => {
                    exhausted = true;
                    break;
                }
            }
        }
        let chunk = &sampler.order[start..];
        if !chunk.is_empty() {
            let masks = mask_provider(chunk)?;
            check_len(chunk.len(), masks.len())?;
            for m in &masks {
                state.claim(m)?;
            }
        }
        if exhausted {
            break;
        }
    }
    Ok(sampler.order)
}

/// Fraction of ground-truth instances hit by at least one candidate.
pub fn instance_recall(candidates: &[usize], scene: &Scene) -> Result<f64> {
    let j = scene.num_instances();
    if j == 0 {
        return Err(Error::NoInstances);
    }
    let mut hit = vec![false; j];
    for &c in candidates {
        let inst = *scene.instance.get(c).ok_or(Error::IndexOutOfRange {
            index: c,
            len: scene.len(),
        })?;
        if inst >= 0 {
            hit[inst as usize] = true;
        }
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / j as f64)
}
