//! Channel-wise feature grouping: medoid clustering of feature maps.
//!
//! Centers start as a random spread-out subset of the maps: each new center
//! is drawn with probability proportional to its squared distance from the
//! nearest center so far. Each round assigns every
//! map to its nearest center, then replaces each group's center with the map
//! closest to the group's mean map. Rounds stop once the center set repeats
//! or `max_iters` is hit. Several random starts are run and the one with the
//! smallest total within-group distance wins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean squared elementwise difference between two equally sized maps.
pub fn cfg_distance(a: &[f32], center: &[f32]) -> Result<f32> {
    if a.len() != center.len() {
        return Err(Error::dim(
            "cfg_distance",
            format!("{} vs {} elements", a.len(), center.len()),
        ));
    }
    if a.is_empty() {
        return Err(Error::dim("cfg_distance", "empty map"));
    }
    Ok(sq_dist(a, center) / a.len() as f32)
}

/// Sum of squared differences, accumulated in eight lanes so it vectorizes.
#[inline]
fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (x, y) in ca.zip(cb) {
        let x: &[f32; 8] = x.try_into().expect("chunk of 8");
        let y: &[f32; 8] = y.try_into().expect("chunk of 8");
        for i in 0..8 {
            let d = x[i] - y[i];
            lanes[i] += d * d;
        }
    }
    lanes.iter().sum::<f32>() + tail
}

/// Group assignment of the channels of one map set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrouping {
    /// Zero-based group of every channel.
    pub ids: Vec<usize>,
    /// Channel index of every group's medoid.
    pub medoids: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Rounds run by the winning restart.
    pub iterations_used: usize,
    /// Sum over channels of the distance to their medoid.
    pub total_distance: f64,
    /// Converged total of every restart, in run order.
    pub restart_totals: Vec<f64>,
}

impl FeatureGrouping {
    pub fn num_groups(&self) -> usize {
        self.medoids.len()
    }

    /// Every channel alone in its own group.
    pub fn singletons(channels: usize) -> Self {
        Self {
            ids: (0..channels).collect(),
            medoids: (0..channels).collect(),
            sizes: vec![1; channels],
            iterations_used: 0,
            total_distance: 0.0,
            restart_totals: Vec::new(),
        }
    }

    /// All channels in one group; the medoid is channel 0.
    pub fn single_group(channels: usize) -> Self {
        Self {
            ids: vec![0; channels],
            medoids: vec![0],
            sizes: vec![channels],
            iterations_used: 0,
            total_distance: 0.0,
            restart_totals: Vec::new(),
        }
    }

    /// Channel indices belonging to group `l`.
    pub fn members(&self, l: usize) -> impl Iterator<Item = usize> + '_ {
        self.ids
            .iter()
            .enumerate()
            .filter(move |(_, &g)| g == l)
            .map(|(j, _)| j)
    }
}

/// View of a `C×H×W` tensor as `C` flat maps.
pub(crate) struct Maps<'a> {
    data: &'a [f32],
    hw: usize,
    count: usize,
}

impl<'a> Maps<'a> {
    pub fn new(a: &'a Tensor) -> Result<Self> {
        match *a.shape() {
            [c, h, w] if h * w > 0 => Ok(Self {
                data: a.data(),
                hw: h * w,
                count: c,
            }),
            ref s => Err(Error::dim("cfg_group", format!("expected C×H×W maps, got {s:?}"))),
        }
    }

    #[inline]
    pub fn get(&self, j: usize) -> &'a [f32] {
        &self.data[j * self.hw..(j + 1) * self.hw]
    }
}

/// Clusters the channels of `a: N_c×H_a×W_a` into `groups` groups.
pub fn cfg_group(
    a: &Tensor,
    groups: usize,
    restarts: usize,
    max_iters: usize,
    seed: u64,
) -> Result<FeatureGrouping> {
    let maps = Maps::new(a)?;
    if groups == 0 || maps.count < groups {
        return Err(Error::InvalidArgument(format!(
            "cannot form {groups} groups from {} channels",
            maps.count
        )));
    }
    if restarts == 0 || max_iters == 0 {
        return Err(Error::InvalidArgument("restarts and max_iters must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<FeatureGrouping> = None;
    let mut totals = Vec::with_capacity(restarts);
    let mut seen: Vec<Vec<usize>> = Vec::new();
    for _ in 0..restarts {
        // Redraw a start that repeats an earlier one, a bounded number of times.
        let mut init = spread_init(&maps, groups, &mut rng);
        for _ in 0..16 {
            let mut key = init.clone();
            key.sort_unstable();
            if !seen.contains(&key) {
                seen.push(key);
                break;
            }
            init = spread_init(&maps, groups, &mut rng);
        }
        let run = lloyd(&maps, init, max_iters);
        totals.push(run.total_distance);
        if best.as_ref().is_none_or(|b| run.total_distance < b.total_distance) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    best.restart_totals = totals;
    Ok(best)
}

/// Distance-weighted random seeding. Maps identical to a chosen center have
/// weight zero, so duplicates are only picked once nothing else is left.
fn spread_init(maps: &Maps<'_>, groups: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let first = rng.gen_range(0..maps.count);
    let mut init = vec![first];
    let mut near: Vec<f32> = (0..maps.count).map(|j| sq_dist(maps.get(j), maps.get(first))).collect();
    while init.len() < groups {
        let total: f64 = near.iter().map(|&d| f64::from(d)).sum();
        let next = if total > 0.0 {
            let mut t = rng.gen::<f64>() * total;
            let mut pick = 0;
            for (j, &d) in near.iter().enumerate().filter(|(_, &d)| d > 0.0) {
                pick = j;
                if t < f64::from(d) {
                    break;
                }
                t -= f64::from(d);
            }
            pick
        } else {
            let free: Vec<usize> = (0..maps.count).filter(|j| !init.contains(j)).collect();
            free[rng.gen_range(0..free.len())]
        };
        init.push(next);
        for (j, n) in near.iter_mut().enumerate() {
            *n = n.min(sq_dist(maps.get(j), maps.get(next)));
        }
    }
    init
}

fn lloyd(maps: &Maps<'_>, mut medoids: Vec<usize>, max_iters: usize) -> FeatureGrouping {
    let groups = medoids.len();
    let mut iterations = 0;
    let mut ids = assign(maps, &medoids);
    while iterations < max_iters {
        iterations += 1;
        let next = update_medoids(maps, &ids, &medoids);
        let stable = next == medoids;
        medoids = next;
        ids = assign(maps, &medoids);
        if stable {
            break;
        }
    }
    let mut sizes = vec![0usize; groups];
    for &l in &ids {
        sizes[l] += 1;
    }
    // Each medoid keeps itself, so no group can be empty.
    debug_assert!(sizes.iter().all(|&s| s > 0));
    let total_distance = ids
        .iter()
        .enumerate()
        .map(|(j, &l)| (sq_dist(maps.get(j), maps.get(medoids[l])) / maps.hw as f32) as f64)
        .sum();
    FeatureGrouping {
        ids,
        medoids,
        sizes,
        iterations_used: iterations,
        total_distance,
        restart_totals: Vec::new(),
    }
}

/// Nearest-medoid assignment. A medoid always stays in its own group; other
/// ties go to the lowest group index.
fn assign(maps: &Maps<'_>, medoids: &[usize]) -> Vec<usize> {
    (0..maps.count)
        .map(|j| {
            if let Some(own) = medoids.iter().position(|&m| m == j) {
                return own;
            }
            let aj = maps.get(j);
            let mut best = (0, f32::INFINITY);
            for (l, &m) in medoids.iter().enumerate() {
                let d = sq_dist(aj, maps.get(m));
                if d < best.1 {
                    best = (l, d);
                }
            }
            best.0
        })
        .collect()
}

/// For each group in ascending order, the map nearest to the group mean,
/// skipping maps already chosen as a medoid in this round.
fn update_medoids(maps: &Maps<'_>, ids: &[usize], current: &[usize]) -> Vec<usize> {
    let groups = current.len();
    let hw = maps.hw;
    let mut means = vec![0.0f32; groups * hw];
    let mut sizes = vec![0usize; groups];
    for (j, &l) in ids.iter().enumerate() {
        sizes[l] += 1;
        means[l * hw..(l + 1) * hw]
            .iter_mut()
            .zip(maps.get(j))
            .for_each(|(m, v)| *m += v);
    }
    let mut taken = vec![false; maps.count];
    let mut next = Vec::with_capacity(groups);
    for l in 0..groups {
        if sizes[l] == 0 {
            next.push(current[l]);
            taken[current[l]] = true;
            continue;
        }
        let inv = 1.0 / sizes[l] as f32;
        let mean: Vec<f32> = means[l * hw..(l + 1) * hw].iter().map(|v| v * inv).collect();
        let mut best = (usize::MAX, f32::INFINITY);
        for (j, _) in taken.iter().enumerate().filter(|(_, &t)| !t) {
            let d = sq_dist(maps.get(j), &mean);
            // Prefer the current medoid on exact ties so the set can settle.
            if d < best.1 || (d == best.1 && j == current[l]) {
                best = (j, d);
            }
        }
        taken[best.0] = true;
        next.push(best.0);
    }
    next
}
