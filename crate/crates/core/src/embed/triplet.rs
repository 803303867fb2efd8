//! Triplet sampling and metric-model training.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::MetricModel;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Member lists per cluster id.
pub fn cluster_members(assignments: &[u32]) -> Vec<Vec<usize>> {
    let k = assignments.iter().map(|&a| a as usize + 1).max().unwrap_or(0);
    let mut members = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        members[a as usize].push(i);
    }
    members
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Draws `per_cluster` triplets for each cluster with at least two members.
///
/// Anchors are drawn without replacement when the cluster is large enough.
/// When `embed` is given, the negative is the closest semi-hard candidate
/// among the batch's anchors and positives (`d(a,p) < d(a,n) < d(a,p) +
/// margin`); otherwise, or when none qualifies, it is drawn uniformly from
/// the other clusters.
pub fn sample_triplets<R: Rng + ?Sized>(
    assignments: &[u32],
    per_cluster: usize,
    margin: f64,
    embed: Option<&dyn Fn(usize) -> Vec<f64>>,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if per_cluster == 0 {
        return Err(Error::arg("per_cluster must be positive"));
    }
    let members = cluster_members(assignments);
    let eligible: Vec<usize> = (0..members.len()).filter(|&c| members[c].len() >= 2).collect();
    if eligible.len() < 2 {
        return Err(Error::Sampling(format!(
            "triplets need two clusters with at least two members, found {}",
            eligible.len()
        )));
    }

    let mut pairs = Vec::with_capacity(per_cluster * eligible.len());
    for &c in &eligible {
        let m = &members[c];
        let anchors: Vec<usize> = if m.len() >= per_cluster {
            m.choose_multiple(rng, per_cluster).copied().collect()
        } else {
            (0..per_cluster).map(|_| *m.choose(rng).expect("non-empty")).collect()
        };
        for a in anchors {
            let offset = rng.random_range(0..m.len() - 1);
            let pos_idx = m.iter().position(|&x| x == a).expect("anchor is a member");
            let p = m[if offset >= pos_idx { offset + 1 } else { offset }];
            pairs.push((a, p));
        }
    }

    let negatives_uniform = |a: usize, rng: &mut R| -> usize {
        let label = assignments[a];
        let others = assignments.len() - members[label as usize].len();
        let mut pick = rng.random_range(0..others);
        for (c, m) in members.iter().enumerate() {
            if c as u32 == label {
                continue;
            }
            if pick < m.len() {
                return m[pick];
            }
            pick -= m.len();
        }
        unreachable!("another cluster has members")
    };

    let mut batch: Vec<usize> = pairs.iter().flat_map(|&(a, p)| [a, p]).collect();
    batch.sort_unstable();
    batch.dedup();
    let projected: Option<Vec<Vec<f64>>> = embed.map(|f| batch.iter().map(|&i| f(i)).collect());

    let mut out = Vec::with_capacity(pairs.len());
    for (a, p) in pairs {
        let mut negative = None;
        if let Some(proj) = &projected {
            let fa = &proj[batch.binary_search(&a).expect("in batch")];
            let fp = &proj[batch.binary_search(&p).expect("in batch")];
            let dap = sq_dist(fa, fp);
            let mut best: Option<(f64, usize)> = None;
            for (bi, &cand) in batch.iter().enumerate() {
                if assignments[cand] == assignments[a] {
                    continue;
                }
                let dan = sq_dist(fa, &proj[bi]);
                if dan > dap && dan < dap + margin && best.is_none_or(|(d, _)| dan < d) {
                    best = Some((dan, cand));
                }
            }
            negative = best.map(|(_, c)| c);
        }
        let n = match negative {
            Some(n) => n,
            None => negatives_uniform(a, rng),
        };
        out.push(Triplet {
            anchor: a,
            positive: p,
            negative: n,
        });
    }
    Ok(out)
}

/// One-hidden-layer variant: `f(x) = W2 tanh(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TanhModel {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub margin: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl TanhModel {
    /// Small random first layer, near-identity readout of the first units.
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim < 2 {
            return Err(Error::arg("tanh model needs positive widths and out_dim >= 2"));
        }
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            in_dim,
            hidden,
            out_dim,
            w1: (0..hidden * in_dim).map(|_| rng.random_range(-s1..s1)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..out_dim * hidden).map(|_| rng.random_range(-s2..s2)).collect(),
            b2: vec![0.0; out_dim],
            margin: 0.2,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
        })
    }

    fn hidden_of(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .chunks_exact(self.in_dim)
            .zip(&self.b1)
            .map(|(row, b)| (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b).tanh())
            .collect()
    }

    fn readout(&self, h: &[f64]) -> Vec<f64> {
        self.w2
            .chunks_exact(self.hidden)
            .zip(&self.b2)
            .map(|(row, b)| row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.readout(&self.hidden_of(x))
    }
}

/// Any trainable embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Embedder {
    Affine(MetricModel),
    Tanh(TanhModel),
}

impl Embedder {
    pub fn in_dim(&self) -> usize {
        match self {
            Embedder::Affine(m) => m.in_dim,
            Embedder::Tanh(m) => m.in_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Embedder::Affine(m) => m.out_dim,
            Embedder::Tanh(m) => m.out_dim,
        }
    }

    pub fn margin(&self) -> f64 {
        match self {
            Embedder::Affine(m) => m.margin,
            Embedder::Tanh(m) => m.margin,
        }
    }

    fn rates(&self) -> (f64, f64) {
        match self {
            Embedder::Affine(m) => (m.learning_rate, m.weight_decay),
            Embedder::Tanh(m) => (m.learning_rate, m.weight_decay),
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Embedder::Affine(m) => m.project(x),
            Embedder::Tanh(m) => m.project(x),
        }
    }

    pub fn project_rows(&self, rows: &[f64]) -> Vec<f64> {
        match self {
            Embedder::Affine(m) => m.project_rows(rows),
            Embedder::Tanh(m) => rows.chunks_exact(m.in_dim).flat_map(|x| m.project(x)).collect(),
        }
    }

    /// Parameters flattened: `W, b` or `W1, b1, W2, b2`.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Embedder::Affine(m) => [m.weights.as_slice(), &m.bias].concat(),
            Embedder::Tanh(m) => [m.w1.as_slice(), &m.b1, &m.w2, &m.b2].concat(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut it = p.iter().copied();
        let mut fill = |dst: &mut Vec<f64>| dst.iter_mut().for_each(|d| *d = it.next().expect("parameter count"));
        match self {
            Embedder::Affine(m) => {
                fill(&mut m.weights);
                fill(&mut m.bias);
            }
            Embedder::Tanh(m) => {
                fill(&mut m.w1);
                fill(&mut m.b1);
                fill(&mut m.w2);
                fill(&mut m.b2);
            }
        }
    }

    /// 1 for decayed parameters (weights), 0 for biases, in `params` order.
    fn decay_mask(&self) -> Vec<f64> {
        match self {
            Embedder::Affine(m) => [vec![1.0; m.weights.len()], vec![0.0; m.bias.len()]].concat(),
            Embedder::Tanh(m) => [
                vec![1.0; m.w1.len()],
                vec![0.0; m.b1.len()],
                vec![1.0; m.w2.len()],
                vec![0.0; m.b2.len()],
            ]
            .concat(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

/// Mean hinge loss of a batch and its gradient in `params` order.
///
/// The gradient includes the weight-decay term `wd * W`, so it is the exact
/// gradient of `loss + wd/2 * |W|²` (see [`triplet_objective`]).
pub fn triplet_loss_and_grad(model: &Embedder, features: &[f64], batch: &[Triplet]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::arg("empty triplet batch"));
    }
    let d = model.in_dim();
    let row = |i: usize| -> Result<&[f64]> {
        let r = features
            .get(i * d..(i + 1) * d)
            .ok_or_else(|| Error::arg(format!("triplet index {i} out of range")))?;
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature in row {i}")));
        }
        Ok(r)
    };
    let margin = model.margin();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params().len()];

    match model {
        Embedder::Affine(m) => {
            let (wlen, o) = (m.weights.len(), m.out_dim);
            for t in batch {
                let (a, p, n) = (row(t.anchor)?, row(t.positive)?, row(t.negative)?);
                let u: Vec<f64> = a.iter().zip(p).map(|(x, y)| x - y).collect();
                let v: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
                let mut wu = vec![0.0; o];
                let mut wv = vec![0.0; o];
                for (k, wrow) in m.weights.chunks_exact(d).enumerate() {
                    wu[k] = wrow.iter().zip(&u).map(|(w, x)| w * x).sum();
                    wv[k] = wrow.iter().zip(&v).map(|(w, x)| w * x).sum();
                }
                let l = wu.iter().map(|x| x * x).sum::<f64>() - wv.iter().map(|x| x * x).sum::<f64>() + margin;
                if l <= 0.0 {
                    continue;
                }
                loss += l * scale;
                for k in 0..o {
                    let (gu, gv) = (2.0 * wu[k] * scale, 2.0 * wv[k] * scale);
                    let g = &mut grad[k * d..(k + 1) * d];
                    for j in 0..d {
                        g[j] += gu * u[j] - gv * v[j];
                    }
                }
            }
            for (g, w) in grad[..wlen].iter_mut().zip(&m.weights) {
                *g += m.weight_decay * w;
            }
        }
        Embedder::Tanh(m) => {
            let (h, o) = (m.hidden, m.out_dim);
            let (o_w1, o_b1, o_w2, o_b2) = (0, h * d, h * d + h, h * d + h + o * h);
            for t in batch {
                let xs = [row(t.anchor)?, row(t.positive)?, row(t.negative)?];
                let hs: Vec<Vec<f64>> = xs.iter().map(|x| m.hidden_of(x)).collect();
                let fs: Vec<Vec<f64>> = hs.iter().map(|hh| m.readout(hh)).collect();
                let dap: f64 = sq_dist(&fs[0], &fs[1]);
                let dan: f64 = sq_dist(&fs[0], &fs[2]);
                let l = dap - dan + margin;
                if l <= 0.0 {
                    continue;
                }
                loss += l * scale;
                // dL/df for anchor, positive, negative
                let gf: [Vec<f64>; 3] = [
                    (0..o).map(|k| 2.0 * (fs[2][k] - fs[1][k]) * scale).collect(),
                    (0..o).map(|k| -2.0 * (fs[0][k] - fs[1][k]) * scale).collect(),
                    (0..o).map(|k| 2.0 * (fs[0][k] - fs[2][k]) * scale).collect(),
                ];
                for s in 0..3 {
                    let mut gh = vec![0.0; h];
                    for k in 0..o {
                        grad[o_b2 + k] += gf[s][k];
                        for j in 0..h {
                            grad[o_w2 + k * h + j] += gf[s][k] * hs[s][j];
                            gh[j] += m.w2[k * h + j] * gf[s][k];
                        }
                    }
                    for j in 0..h {
                        let gz = gh[j] * (1.0 - hs[s][j] * hs[s][j]);
                        grad[o_b1 + j] += gz;
                        for i in 0..d {
                            grad[o_w1 + j * d + i] += gz * xs[s][i];
                        }
                    }
                }
            }
            for (g, w) in grad[o_w1..o_b1].iter_mut().zip(&m.w1) {
                *g += m.weight_decay * w;
            }
            for (g, w) in grad[o_w2..o_b2].iter_mut().zip(&m.w2) {
                *g += m.weight_decay * w;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean hinge loss plus `wd/2 * |W|²`: the function whose gradient
/// [`triplet_loss_and_grad`] returns.
pub fn triplet_objective(model: &Embedder, features: &[f64], batch: &[Triplet]) -> f64 {
    let d = model.in_dim();
    let f = |i: usize| model.project(&features[i * d..(i + 1) * d]);
    let mean = batch
        .iter()
        .map(|t| {
            let (a, p, n) = (f(t.anchor), f(t.positive), f(t.negative));
            (sq_dist(&a, &p) - sq_dist(&a, &n) + model.margin()).max(0.0)
        })
        .sum::<f64>()
        / batch.len() as f64;
    let (_, wd) = model.rates();
    let decay: f64 = model
        .params()
        .iter()
        .zip(model.decay_mask())
        .map(|(w, m)| m * w * w)
        .sum();
    mean + 0.5 * wd * decay
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub per_cluster: usize,
    /// Batches per epoch; by default enough to cover every patch once.
    pub batches_per_epoch: Option<usize>,
    pub semi_hard: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            per_cluster: 4,
            batches_per_epoch: None,
            semi_hard: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
    pub active_fraction: f64,
}

/// One epoch of minibatch SGD: `theta <- theta - lr * grad` where the
/// weight gradient already carries `wd * W`.
pub fn train_epoch<R: Rng + ?Sized>(
    model: &mut Embedder,
    features: &[f64],
    assignments: &[u32],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<EpochStats> {
    let d = model.in_dim();
    if features.len() != assignments.len() * d {
        return Err(Error::arg("features and assignments disagree in length"));
    }
    let eligible = cluster_members(assignments).iter().filter(|m| m.len() >= 2).count();
    let batch_size = (cfg.per_cluster * eligible).max(1);
    let batches = cfg
        .batches_per_epoch
        .unwrap_or_else(|| assignments.len().div_ceil(batch_size))
        .max(1);
    let (lr, _) = model.rates();
    let mut total = 0.0;
    let mut active = 0usize;
    let mut seen = 0usize;
    for _ in 0..batches {
        let snapshot = model.clone();
        let project = |i: usize| snapshot.project(&features[i * d..(i + 1) * d]);
        let embed: Option<&dyn Fn(usize) -> Vec<f64>> = if cfg.semi_hard { Some(&project) } else { None };
        let mut batch = sample_triplets(assignments, cfg.per_cluster, model.margin(), embed, rng)?;
        batch.shuffle(rng);
        let (loss, grad) = triplet_loss_and_grad(model, features, &batch)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        active += batch
            .iter()
            .filter(|t| {
                let (a, p, n) = (project(t.anchor), project(t.positive), project(t.negative));
                sq_dist(&a, &p) - sq_dist(&a, &n) + model.margin() > 0.0
            })
            .count();
        seen += batch.len();
        total += loss;
        let params: Vec<f64> = model.params().iter().zip(&grad).map(|(p, g)| p - lr * g).collect();
        model.set_params(&params);
    }
    Ok(EpochStats {
        mean_loss: total / batches as f64,
        batches,
        active_fraction: active as f64 / seen.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_clusters_of_five() {
        let labels = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ts = sample_triplets(&labels, 4, 0.2, None, &mut rng).unwrap();
        assert_eq!(ts.len(), 8);
        for t in ts {
            assert_ne!(t.anchor, t.positive);
            assert_eq!(labels[t.anchor], labels[t.positive]);
            assert_ne!(labels[t.anchor], labels[t.negative]);
        }
    }

    #[test]
    fn single_cluster_cannot_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            sample_triplets(&[0, 0, 0], 4, 0.2, None, &mut rng),
            Err(Error::Sampling(_))
        ));
        // one real cluster plus a singleton
        assert!(sample_triplets(&[0, 0, 1], 4, 0.2, None, &mut rng).is_err());
    }

    #[test]
    fn collapsed_model_loss_equals_margin() {
        let mut m = MetricModel::identity(3, 2).unwrap();
        m.weights.iter_mut().for_each(|w| *w = 0.0);
        let model = Embedder::Affine(m);
        let feats = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let batch = [Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        let (loss, _) = triplet_loss_and_grad(&model, &feats, &batch).unwrap();
        assert!((loss - 0.2).abs() < 1e-15);
    }

    #[test]
    fn satisfied_triplet_is_inactive() {
        let mut m = MetricModel::identity(2, 2).unwrap();
        m.weight_decay = 0.0;
        let model = Embedder::Affine(m);
        let feats = [0.0, 0.0, 0.0, 0.0, 5.0, 0.0];
        let batch = [Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        let (loss, grad) = triplet_loss_and_grad(&model, &feats, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_feature_rejected() {
        let model = Embedder::Affine(MetricModel::identity(2, 2).unwrap());
        let feats = [0.0, f64::NAN, 1.0, 0.0, 2.0, 0.0];
        let batch = [Triplet {
            anchor: 0,
            positive: 1,
            negative: 2,
        }];
        assert!(matches!(
            triplet_loss_and_grad(&model, &feats, &batch),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn tanh_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = TanhModel::new(4, 5, 3, &mut rng).unwrap();
        m.margin = 5.0;
        m.weight_decay = 0.01;
        let model = Embedder::Tanh(m);
        let feats: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let batch: Vec<Triplet> = (0..4)
            .map(|i| Triplet {
                anchor: i,
                positive: (i + 1) % 6,
                negative: (i + 3) % 6,
            })
            .collect();
        let (_, grad) = triplet_loss_and_grad(&model, &feats, &batch).unwrap();
        let p0 = model.params();
        let h = 1e-6;
        for i in 0..p0.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            let mut p = p0.clone();
            p[i] += h;
            plus.set_params(&p);
            p[i] -= 2.0 * h;
            minus.set_params(&p);
            let fd = (triplet_objective(&plus, &feats, &batch) - triplet_objective(&minus, &feats, &batch)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-4 * fd.abs().max(grad[i].abs()).max(1e-3),
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
    }
}
