//! Confidence-weighted constrained k-means.
//!
//! Hard must-links are closed into chunklets that move as a unit. Soft
//! must-links and cannot-links add `lambda * confidence` to the objective
//! whenever they are violated:
//!
//! ```text
//! J = sum_i |x_i - c(a_i)|² + lambda * (sum of violated link confidences)
//! ```
//!
//! Optimization alternates an ICM sweep over chunklets with a centroid
//! update, so `J` never increases.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{ClusterModel, ConstraintSet, HardLink};
use crate::unionfind::DisjointSet;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k: usize,
    pub lambda: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Independent restarts; the lowest objective wins.
    pub n_init: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k: 150,
            lambda: 1.0,
            max_iters: 100,
            seed: 0,
            n_init: 1,
        }
    }
}

/// Transitive closure of hard links over `n` points, ordered by smallest
/// member.
pub fn build_chunklets(n: usize, hard_links: &[(usize, usize)]) -> Result<Vec<Vec<usize>>> {
    let mut ds = DisjointSet::new(n);
    for &(a, b) in hard_links {
        if a >= n || b >= n {
            return Err(Error::arg(format!("link ({a}, {b}) references a point outside 0..{n}")));
        }
        ds.union(a, b);
    }
    Ok(ds.groups())
}

/// Links translated from patch ids to matrix rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IndexedConstraints {
    pub hard: Vec<(usize, usize)>,
    pub soft: Vec<(usize, usize, f64)>,
    pub cannot: Vec<(usize, usize, f64)>,
}

impl IndexedConstraints {
    /// Links whose endpoints are not both present in `patch_ids` are dropped.
    pub fn from_set(set: &ConstraintSet, patch_ids: &[u64]) -> Self {
        let index: HashMap<u64, usize> = patch_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let pair = |a: u64, b: u64| Some((*index.get(&a)?, *index.get(&b)?));
        Self {
            hard: set
                .hard_links
                .iter()
                .filter_map(|&HardLink { a, b, .. }| pair(a, b))
                .collect(),
            soft: set
                .soft_links
                .iter()
                .filter_map(|l| pair(l.a, l.b).map(|(i, j)| (i, j, l.confidence)))
                .collect(),
            cannot: set
                .cannot_links
                .iter()
                .filter_map(|l| pair(l.a, l.b).map(|(i, j)| (i, j, l.confidence)))
                .collect(),
        }
    }

    pub fn unconstrained() -> Self {
        Self::default()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mass-weighted k-means++ on weighted points (`n x dim` row-major).
///
/// Returns the indices of the chosen points.
pub fn kmeans_pp(points: &[f64], weights: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = weights.len();
    let pick = |w: &[f64], rng: &mut dyn rand::RngCore| -> usize {
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return w.iter().position(|&x| x > 0.0).unwrap_or(0);
        }
        let mut r = rng.random::<f64>() * total;
        for (i, &x) in w.iter().enumerate() {
            if x <= 0.0 {
                continue;
            }
            if r < x {
                return i;
            }
            r -= x;
        }
        w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    };
    let mut chosen = vec![pick(weights, rng)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| {
            sq_dist(
                &points[i * dim..(i + 1) * dim],
                &points[chosen[0] * dim..(chosen[0] + 1) * dim],
            )
        })
        .collect();
    while chosen.len() < k {
        let w: Vec<f64> = d2.iter().zip(weights).map(|(d, m)| d * m).collect();
        let next = if w.iter().sum::<f64>() > 0.0 {
            pick(&w, rng)
        } else {
            // every point coincides with a chosen one; take an unchosen index
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        let c = &points[next * dim..(next + 1) * dim];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(&points[i * dim..(i + 1) * dim], c));
        }
    }
    chosen
}

/// Chunklet summary used by the sweep.
struct Units {
    members: Vec<Vec<usize>>,
    means: Vec<f64>,
    mass: Vec<f64>,
    /// Soft must-link weight per neighboring unit.
    must: Vec<Vec<(usize, f64)>>,
    cannot: Vec<Vec<(usize, f64)>>,
    must_total: Vec<f64>,
    /// Violated-forever weight: cannot-links inside one chunklet.
    internal_cannot: f64,
}

impl Units {
    fn new(x: &[f64], dim: usize, chunklets: Vec<Vec<usize>>, cons: &IndexedConstraints) -> Self {
        let n = x.len() / dim;
        let mut unit_of = vec![0usize; n];
        for (u, m) in chunklets.iter().enumerate() {
            for &i in m {
                unit_of[i] = u;
            }
        }
        let nu = chunklets.len();
        let mut means = vec![0.0; nu * dim];
        let mut mass = vec![0.0; nu];
        for (u, m) in chunklets.iter().enumerate() {
            let mean = &mut means[u * dim..(u + 1) * dim];
            for &i in m {
                for (acc, v) in mean.iter_mut().zip(&x[i * dim..(i + 1) * dim]) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m.len() as f64);
            mass[u] = m.len() as f64;
        }
        let gather = |links: &[(usize, usize, f64)]| -> (Vec<Vec<(usize, f64)>>, f64) {
            let mut maps: Vec<HashMap<usize, f64>> = vec![HashMap::new(); nu];
            let mut internal = 0.0;
            for &(i, j, w) in links {
                let (ui, uj) = (unit_of[i], unit_of[j]);
                if ui == uj {
                    internal += w;
                    continue;
                }
                *maps[ui].entry(uj).or_insert(0.0) += w;
                *maps[uj].entry(ui).or_insert(0.0) += w;
            }
            let lists = maps
                .into_iter()
                .map(|m| {
                    let mut v: Vec<(usize, f64)> = m.into_iter().collect();
                    v.sort_by_key(|&(u, _)| u);
                    v
                })
                .collect();
            (lists, internal)
        };
        let (must, _) = gather(&cons.soft);
        let (cannot, internal_cannot) = gather(&cons.cannot);
        let must_total = must.iter().map(|l| l.iter().map(|&(_, w)| w).sum()).collect();
        Self {
            members: chunklets,
            means,
            mass,
            must,
            cannot,
            must_total,
            internal_cannot,
        }
    }

    fn len(&self) -> usize {
        self.mass.len()
    }

    fn mean(&self, u: usize, dim: usize) -> &[f64] {
        &self.means[u * dim..(u + 1) * dim]
    }

    /// Total violated weight, each link counted once.
    fn violated(&self, unit_assign: &[u32]) -> f64 {
        let mut total = self.internal_cannot;
        for u in 0..self.len() {
            for &(v, w) in &self.must[u] {
                if v > u && unit_assign[v] != unit_assign[u] {
                    total += w;
                }
            }
            for &(v, w) in &self.cannot[u] {
                if v > u && unit_assign[v] == unit_assign[u] {
                    total += w;
                }
            }
        }
        total
    }
}

fn centroids_from(x: &[f64], dim: usize, assign: &[u32], k: usize, previous: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        counts[a as usize] += 1;
        for (s, v) in sums[a as usize * dim..(a as usize + 1) * dim]
            .iter_mut()
            .zip(&x[i * dim..(i + 1) * dim])
        {
            *s += v;
        }
    }
    for c in 0..k {
        let row = &mut sums[c * dim..(c + 1) * dim];
        if counts[c] == 0 {
            row.copy_from_slice(&previous[c * dim..(c + 1) * dim]);
        } else {
            row.iter_mut().for_each(|v| *v /= counts[c] as f64);
        }
    }
    sums
}

fn sse(x: &[f64], dim: usize, assign: &[u32], centroids: &[f64]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            sq_dist(
                &x[i * dim..(i + 1) * dim],
                &centroids[a as usize * dim..(a as usize + 1) * dim],
            )
        })
        .sum()
}

fn nearest(p: &[f64], centroids: &[f64], dim: usize) -> u32 {
    let mut best = (f64::INFINITY, 0u32);
    for (c, row) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, row);
        if d < best.0 {
            best = (d, c as u32);
        }
    }
    best.1
}

fn check_input(x: &[f64], dim: usize, k: usize) -> Result<usize> {
    if dim == 0 || x.len() % dim != 0 {
        return Err(Error::arg("embedding matrix shape mismatch"));
    }
    if k < 2 {
        return Err(Error::arg("k must be at least 2"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite embedding value".into()));
    }
    Ok(x.len() / dim)
}

/// Objective of an arbitrary assignment with centroids at cluster means.
pub fn objective_of(x: &[f64], dim: usize, assign: &[u32], k: usize, cons: &IndexedConstraints, lambda: f64) -> f64 {
    let centroids = centroids_from(x, dim, assign, k, &vec![0.0; k * dim]);
    let mut penalty = 0.0;
    for &(i, j, w) in &cons.soft {
        if assign[i] != assign[j] {
            penalty += w;
        }
    }
    for &(i, j, w) in &cons.cannot {
        if assign[i] == assign[j] {
            penalty += w;
        }
    }
    sse(x, dim, assign, &centroids) + lambda * penalty
}

/// Penalized constrained k-means.
///
/// Chunklets are seeded with mass-weighted k-means++, assigned to their
/// nearest seed, and then refined by alternating ICM sweeps (in a seeded
/// random order, a chunklet moves only for a strict improvement and never
/// empties its cluster) with centroid updates until a sweep changes nothing
/// or `max_iters` sweeps have run.
pub fn pcc_kmeans(x: &[f64], dim: usize, cons: &IndexedConstraints, cfg: &ClusterConfig) -> Result<ClusterModel> {
    let n = check_input(x, dim, cfg.k)?;
    let chunklets = build_chunklets(n, &cons.hard)?;
    if chunklets.len() < cfg.k {
        return Err(Error::Infeasible(format!(
            "{} chunklets cannot fill {} clusters",
            chunklets.len(),
            cfg.k
        )));
    }
    let units = Units::new(x, dim, chunklets, cons);
    let mut best: Option<ClusterModel> = None;
    for run in 0..cfg.n_init.max(1) {
        let seed = cfg.seed.wrapping_add((run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let model = pcc_single(x, dim, &units, cfg, seed);
        if best.as_ref().is_none_or(|b| model.objective < b.objective) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one run"))
}

fn pcc_single(x: &[f64], dim: usize, units: &Units, cfg: &ClusterConfig, seed: u64) -> ClusterModel {
    let k = cfg.k;
    let nu = units.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = kmeans_pp(&units.means, &units.mass, dim, k, &mut rng);
    let mut centroids: Vec<f64> = seeds.iter().flat_map(|&u| units.mean(u, dim).to_vec()).collect();

    let mut unit_assign: Vec<u32> = (0..nu).map(|u| nearest(units.mean(u, dim), &centroids, dim)).collect();
    // seeds own their cluster so none starts empty
    for (c, &u) in seeds.iter().enumerate() {
        unit_assign[u] = c as u32;
    }
    let expand = |ua: &[u32]| -> Vec<u32> {
        let mut a = vec![0u32; x.len() / dim];
        for (u, m) in units.members.iter().enumerate() {
            for &i in m {
                a[i] = ua[u];
            }
        }
        a
    };
    let mut assign = expand(&unit_assign);
    centroids = centroids_from(x, dim, &assign, k, &centroids);
    let objective =
        |assign: &[u32], ua: &[u32], cents: &[f64]| sse(x, dim, assign, cents) + cfg.lambda * units.violated(ua);
    let mut trace = vec![objective(&assign, &unit_assign, &centroids)];

    let mut sizes = vec![0usize; k];
    for &a in &unit_assign {
        sizes[a as usize] += 1;
    }
    let mut order: Vec<usize> = (0..nu).collect();
    let mut iterations = 0;
    let mut cost = vec![0.0; k];
    for _ in 0..cfg.max_iters {
        iterations += 1;
        order.shuffle(&mut rng);
        let mut changed = false;
        for &u in &order {
            let cur = unit_assign[u] as usize;
            if sizes[cur] == 1 {
                continue;
            }
            let mean = units.mean(u, dim);
            let m = units.mass[u];
            for (c, slot) in cost.iter_mut().enumerate() {
                *slot = m * sq_dist(mean, &centroids[c * dim..(c + 1) * dim]);
            }
            if cfg.lambda != 0.0 {
                let base = cfg.lambda * units.must_total[u];
                cost.iter_mut().for_each(|v| *v += base);
                for &(v, w) in &units.must[u] {
                    cost[unit_assign[v] as usize] -= cfg.lambda * w;
                }
                for &(v, w) in &units.cannot[u] {
                    cost[unit_assign[v] as usize] += cfg.lambda * w;
                }
            }
            // move only on a strict improvement; ties among targets go low
            let tol = 1e-12 * cost[cur].abs().max(1.0);
            let mut target = cur;
            let mut best = cost[cur] - tol;
            for (c, &v) in cost.iter().enumerate() {
                if c != cur && v < best {
                    best = v;
                    target = c;
                }
            }
            if target != cur {
                sizes[cur] -= 1;
                sizes[target] += 1;
                unit_assign[u] = target as u32;
                changed = true;
            }
        }
        assign = expand(&unit_assign);
        centroids = centroids_from(x, dim, &assign, k, &centroids);
        trace.push(objective(&assign, &unit_assign, &centroids));
        if !changed {
            break;
        }
    }

    ClusterModel {
        k,
        dim,
        centroids,
        assignments: assign,
        chunklets: units.members.clone(),
        objective: *trace.last().expect("trace"),
        iterations_run: iterations,
        objective_trace: trace,
    }
}

/// Plain Lloyd iterations from the same seeding as [`pcc_kmeans`]
/// (unconstrained, `n_init = 1`). Ties go to the lowest cluster index.
pub fn lloyd_kmeans(x: &[f64], dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<ClusterModel> {
    let n = check_input(x, dim, k)?;
    if n < k {
        return Err(Error::Infeasible(format!("{n} points cannot fill {k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = kmeans_pp(x, &vec![1.0; n], dim, k, &mut rng);
    let mut centroids: Vec<f64> = seeds.iter().flat_map(|&i| x[i * dim..(i + 1) * dim].to_vec()).collect();
    let mut assign: Vec<u32> = (0..n)
        .map(|i| nearest(&x[i * dim..(i + 1) * dim], &centroids, dim))
        .collect();
    for (c, &i) in seeds.iter().enumerate() {
        assign[i] = c as u32;
    }
    centroids = centroids_from(x, dim, &assign, k, &centroids);
    let mut trace = vec![sse(x, dim, &assign, &centroids)];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let next: Vec<u32> = (0..n)
            .map(|i| nearest(&x[i * dim..(i + 1) * dim], &centroids, dim))
            .collect();
        let changed = next != assign;
        assign = next;
        centroids = centroids_from(x, dim, &assign, k, &centroids);
        trace.push(sse(x, dim, &assign, &centroids));
        if !changed {
            break;
        }
    }
    Ok(ClusterModel {
        k,
        dim,
        centroids,
        assignments: assign,
        chunklets: (0..n).map(|i| vec![i]).collect(),
        objective: *trace.last().expect("trace"),
        iterations_run: iterations,
        objective_trace: trace,
    })
}

/// Nearest-centroid assignment without constraints; ties go to the lowest
/// index.
pub fn assign_holdout(x: &[f64], model: &ClusterModel) -> Result<Vec<u32>> {
    if model.dim == 0 || x.len() % model.dim != 0 {
        return Err(Error::arg(format!("rows do not have width {}", model.dim)));
    }
    Ok(x.chunks_exact(model.dim)
        .map(|p| nearest(p, &model.centroids, model.dim))
        .collect())
}

/// Every hard link ends inside one cluster.
pub fn hard_links_satisfied(assign: &[u32], hard: &[(usize, usize)]) -> bool {
    hard.iter().all(|&(a, b)| assign[a] == assign[b])
}
