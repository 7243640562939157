//! Latent-space geometry: interpolation, traversal, arithmetic, exact
//! earth mover's distance, word mover's distance and interpolation
//! smoothness.

use rand::Rng;
use serde::Serialize;

use crate::nn::standard_normal_vec;
use crate::tensor::Tensor;
use crate::text::Vocab;
use crate::vae::VaeModel;
use crate::{Error, Result};

/// Largest bag accepted by [`emd`].
pub const MAX_BAG_POINTS: usize = 32;
const EXHAUSTIVE_LIMIT: usize = 8;
const WEIGHT_SUM_TOL: f64 = 1e-9;

fn same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::data(format!("latent dimensions differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Interpolation times from 0 to 1 inclusive. When `1/step` is (nearly) an
/// integer `k`, the times are exactly `i/k`.
pub fn interpolation_times(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::config("step", "must lie in (0, 1]"));
    }
    let k = (1.0 / step).round();
    if ((k * step) - 1.0).abs() < 1e-9 {
        let k = k as usize;
        return Ok((0..=k).map(|i| i as f64 / k as f64).collect());
    }
    let mut ts: Vec<f64> = (0..).map(|i| i as f64 * step).take_while(|&t| t < 1.0).collect();
    ts.push(1.0);
    Ok(ts)
}

/// `z_t = z1 (1 − t) + z2 t` at every interpolation time.
pub fn interpolate(z1: &[f64], z2: &[f64], step: f64) -> Result<Vec<(f64, Vec<f64>)>> {
    same_dim(z1, z2)?;
    Ok(interpolation_times(step)?.into_iter().map(|t| (t, z1.iter().zip(z2).map(|(a, b)| a * (1.0 - t) + b * t).collect())).collect())
}

/// `count` points drawn uniformly from the ball of `radius` around `z`:
/// Gaussian direction, radius `radius · u^{1/d}`.
pub fn traverse(z: &[f64], radius: f64, count: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::config("radius", "must be a finite non-negative number"));
    }
    if z.is_empty() {
        return Err(Error::data("empty latent"));
    }
    let d = z.len() as f64;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let dir = standard_normal_vec(rng, z.len());
        let n = norm(&dir);
        let u: f64 = rng.random();
        let mut r = if n > 0.0 { radius * u.powf(1.0 / d) / n } else { 0.0 };
        loop {
            let p: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + r * b).collect();
            let actual = distance(&p, z);
            if actual <= radius {
                out.push(p);
                break;
            }
            r *= radius / actual * (1.0 - 4.0 * f64::EPSILON);
        }
    }
    Ok(out)
}

/// `za − zb + zc`.
pub fn latent_arithmetic(za: &[f64], zb: &[f64], zc: &[f64]) -> Result<Vec<f64>> {
    same_dim(za, zb)?;
    same_dim(za, zc)?;
    Ok(za.iter().zip(zb).zip(zc).map(|((a, b), c)| a - b + c).collect())
}

/// Weighted point set; weights are non-negative and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBag {
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl EmbeddingBag {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::data("empty embedding bag"));
        }
        if points.len() != weights.len() {
            return Err(Error::data(format!("{} points but {} weights", points.len(), weights.len())));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::data("bag points have differing dimensions"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::data("bag weights must be finite and non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::data(format!("bag weights sum to {sum}, expected 1")));
        }
        Ok(EmbeddingBag { points, weights })
    }

    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let w = 1.0 / points.len().max(1) as f64;
        let n = points.len();
        Self::new(points, vec![w; n])
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Exact optimal transport cost between two bags under the Euclidean
/// ground metric.
pub fn emd(a: &EmbeddingBag, b: &EmbeddingBag) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::data(format!("bag dimensions differ: {} vs {}", a.dim(), b.dim())));
    }
    if a.len() > MAX_BAG_POINTS || b.len() > MAX_BAG_POINTS {
        return Err(Error::data(format!("bags are limited to {MAX_BAG_POINTS} points")));
    }
    let (sa, sb): (f64, f64) = (a.weights.iter().sum(), b.weights.iter().sum());
    if (sa - sb).abs() > WEIGHT_SUM_TOL {
        return Err(Error::data(format!("bag weights sum to {sa} and {sb}")));
    }
    let cost: Vec<Vec<f64>> = a.points.iter().map(|p| b.points.iter().map(|q| distance(p, q)).collect()).collect();
    let uniform = |w: &[f64]| w.iter().all(|&x| x == w[0]);
    if a.len() == b.len() && a.len() <= EXHAUSTIVE_LIMIT && uniform(&a.weights) && uniform(&b.weights) {
        Ok(best_assignment(&cost) / a.len() as f64)
    } else {
        Ok(min_cost_transport(&cost, &a.weights, &b.weights))
    }
}

/// Minimum total cost over all permutations (depth-first with pruning).
fn best_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(row: usize, cost: &[Vec<f64>], used: &mut [bool], acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        if row == cost.len() {
            *best = acc;
            return;
        }
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                go(row + 1, cost, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, cost, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

/// Successive shortest augmenting paths on the bipartite transport network.
/// Each augmentation exhausts a supply, a demand or a reverse residual arc,
/// so the loop terminates; the final plan is optimal because every path is
/// shortest with respect to the current residual costs.
fn min_cost_transport(cost: &[Vec<f64>], supply: &[f64], demand: &[f64]) -> f64 {
    let (n, m) = (supply.len(), demand.len());
    let mut supply = supply.to_vec();
    let mut demand = demand.to_vec();
    let mut flow = vec![vec![0.0; m]; n];
    let eps = 1e-15;
    loop {
        if supply.iter().all(|&s| s <= eps) || demand.iter().all(|&d| d <= eps) {
            break;
        }
        // Bellman-Ford over sources 0..n and sinks n..n+m.
        let mut dist = vec![f64::INFINITY; n + m];
        let mut pred = vec![usize::MAX; n + m];
        for i in 0..n {
            if supply[i] > eps {
                dist[i] = 0.0;
            }
        }
        for _ in 0..n + m {
            let mut changed = false;
            for i in 0..n {
                if dist[i].is_finite() {
                    for j in 0..m {
                        let d = dist[i] + cost[i][j];
                        if d < dist[n + j] - 1e-15 {
                            dist[n + j] = d;
                            pred[n + j] = i;
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..m {
                if dist[n + j].is_finite() {
                    for i in 0..n {
                        if flow[i][j] > eps {
                            let d = dist[n + j] - cost[i][j];
                            if d < dist[i] - 1e-15 {
                                dist[i] = d;
                                pred[i] = n + j;
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let Some(sink) =
            (0..m).filter(|&j| demand[j] > eps && dist[n + j].is_finite()).min_by(|&x, &y| dist[n + x].total_cmp(&dist[n + y]))
        else {
            break;
        };
        // Walk back to the originating source, recording the bottleneck.
        let mut amount = demand[sink];
        let mut node = n + sink;
        let mut path = Vec::new();
        loop {
            let p = pred[node];
            if node >= n {
                path.push((p, node - n, 1.0));
            } else {
                path.push((node, p - n, -1.0));
                amount = amount.min(flow[node][p - n]);
            }
            node = p;
            if node < n && pred[node] == usize::MAX {
                break;
            }
        }
        amount = amount.min(supply[node]);
        for &(i, j, dir) in &path {
            flow[i][j] += dir * amount;
            if flow[i][j] < 0.0 {
                flow[i][j] = 0.0;
            }
        }
        supply[node] -= amount;
        demand[sink] -= amount;
    }
    flow.iter().zip(cost).map(|(f, c)| f.iter().zip(c).map(|(x, y)| x * y).sum::<f64>()).sum()
}

/// Normalised bag of word embeddings for a token sequence; specials are
/// dropped and repeated tokens accumulate weight.
pub fn sentence_bag(ids: &[usize], table: &Tensor) -> Result<EmbeddingBag> {
    let content = Vocab::content_ids(ids);
    if content.is_empty() {
        return Err(Error::data("sentence is empty after removing special tokens"));
    }
    let rows = table.shape()[0];
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &id in &content {
        if id >= rows {
            return Err(Error::data(format!("token id {id} outside embedding table of {rows} rows")));
        }
        match counts.iter_mut().find(|(t, _)| *t == id) {
            Some((_, c)) => *c += 1,
            None => counts.push((id, 1)),
        }
    }
    let total = content.len() as f64;
    let points = counts.iter().map(|&(id, _)| table.row(id).to_vec()).collect();
    let weights = counts.iter().map(|&(_, c)| c as f64 / total).collect();
    EmbeddingBag::new(points, weights)
}

/// Word mover's distance between two token sequences.
pub fn wmd_sentence(s1: &[usize], s2: &[usize], table: &Tensor) -> Result<f64> {
    emd(&sentence_bag(s1, table)?, &sentence_bag(s2, table)?)
}

/// `δ(s_0, s_T) / Σ_t δ(s_t, s_{t+1})` with `δ` the word mover's distance;
/// 1 when every step has zero distance.
pub fn interpolation_smoothness(path: &[Vec<usize>], table: &Tensor) -> Result<f64> {
    if path.len() < 2 {
        return Err(Error::data("an interpolation path needs at least two sentences"));
    }
    let bags = path.iter().map(|s| sentence_bag(s, table)).collect::<Result<Vec<_>>>()?;
    let mut actual = 0.0;
    for pair in bags.windows(2) {
        if pair[0] != pair[1] {
            actual += emd(&pair[0], &pair[1])?;
        }
    }
    if actual == 0.0 {
        return Ok(1.0);
    }
    Ok(emd(&bags[0], &bags[bags.len() - 1])? / actual)
}

/// One line of a path report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRecord {
    pub t: f64,
    pub latent_norm: f64,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathReport {
    pub records: Vec<PathRecord>,
    pub smoothness: f64,
}

impl PathReport {
    /// JSON lines: one record per point, then `{"IS": ...}`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({ "IS": self.smoothness }))?);
        out.push('\n');
        Ok(out)
    }
}

/// Decode every latent on the path and score the decoded sentences.
pub fn decode_path(model: &VaeModel, path: &[(f64, Vec<f64>)]) -> Result<PathReport> {
    let mut records = Vec::with_capacity(path.len());
    let mut ids = Vec::with_capacity(path.len());
    for (t, z) in path {
        let generated = model.generate(z, model.config().max_len)?;
        records.push(PathRecord { t: *t, latent_norm: norm(z), sentence: model.vocab().decode(&generated) });
        ids.push(generated);
    }
    let smoothness = interpolation_smoothness(&ids, model.token_embeddings())?;
    Ok(PathReport { records, smoothness })
}

/// Encode both sentences, interpolate their latents and decode the path.
pub fn interpolation_report(model: &VaeModel, source: &str, target: &str, step: f64) -> Result<PathReport> {
    let z1 = model.latent_of(source)?;
    let z2 = model.latent_of(target)?;
    decode_path(model, &interpolate(&z1, &z2, step)?)
}
