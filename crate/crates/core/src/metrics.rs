//! Disentanglement metrics over paired (representation, factor) records.
//!
//! Mutual information is estimated from joint histograms after
//! equal-frequency binning of each representation dimension. Per-factor and
//! per-dimension work can run on a rayon pool sized by `LATENTLAB_THREADS`;
//! results are collected in index order, so they do not depend on the
//! thread count.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn::seeded_rng;
use crate::{Error, Result};

pub const THREADS_ENV: &str = "LATENTLAB_THREADS";

#[derive(Debug, Clone, PartialEq)]
pub struct FactorDataset {
    reps: Vec<Vec<f64>>,
    factors: Vec<Vec<usize>>,
    cardinalities: Vec<usize>,
}

impl FactorDataset {
    /// Cardinalities default to `max + 1` per factor column.
    pub fn new(reps: Vec<Vec<f64>>, factors: Vec<Vec<usize>>, cardinalities: Option<Vec<usize>>) -> Result<Self> {
        if reps.is_empty() {
            return Err(Error::data("empty factor dataset"));
        }
        if reps.len() != factors.len() {
            return Err(Error::data(format!("{} representations but {} factor rows", reps.len(), factors.len())));
        }
        let d = reps[0].len();
        let f = factors[0].len();
        if d == 0 || f == 0 {
            return Err(Error::data("representations and factor rows must be non-empty"));
        }
        if let Some(i) = reps.iter().position(|r| r.len() != d) {
            return Err(Error::data(format!("representation {i} has {} entries, expected {d}", reps[i].len())));
        }
        if let Some(i) = factors.iter().position(|r| r.len() != f) {
            return Err(Error::data(format!("factor row {i} has {} entries, expected {f}", factors[i].len())));
        }
        if reps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::data("representations must be finite"));
        }
        let observed: Vec<usize> = (0..f).map(|k| factors.iter().map(|r| r[k]).max().unwrap_or(0) + 1).collect();
        let cardinalities = match cardinalities {
            Some(c) => {
                if c.len() != f {
                    return Err(Error::data(format!("{} cardinalities for {f} factors", c.len())));
                }
                if let Some(k) = (0..f).find(|&k| observed[k] > c[k]) {
                    return Err(Error::data(format!("factor {k} has value {} outside cardinality {}", observed[k] - 1, c[k])));
                }
                c
            }
            None => observed,
        };
        Ok(FactorDataset { reps, factors, cardinalities })
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn num_dims(&self) -> usize {
        self.reps[0].len()
    }

    pub fn num_factors(&self) -> usize {
        self.factors[0].len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn representations(&self) -> &[Vec<f64>] {
        &self.reps
    }

    pub fn factors(&self) -> &[Vec<usize>] {
        &self.factors
    }

    pub fn dim_column(&self, i: usize) -> Vec<f64> {
        self.reps.iter().map(|r| r[i]).collect()
    }

    pub fn factor_column(&self, k: usize) -> Vec<usize> {
        self.factors.iter().map(|r| r[k]).collect()
    }

    /// TSV with a header naming representation columns `z*` and factor
    /// columns `f*`, in any order.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| Error::data("empty TSV"))?.split('\t').collect();
        let zcols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with('z')).collect();
        let fcols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with('f')).collect();
        if zcols.is_empty() || fcols.is_empty() || zcols.len() + fcols.len() != header.len() {
            return Err(Error::data("TSV header must consist of z* representation and f* factor columns"));
        }
        let mut reps = Vec::new();
        let mut factors = Vec::new();
        for (n, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != header.len() {
                return Err(Error::data(format!("TSV row {} has {} cells, header has {}", n + 2, cells.len(), header.len())));
            }
            let bad = |c: &str| Error::data(format!("TSV row {}: cannot parse `{c}`", n + 2));
            reps.push(zcols.iter().map(|&i| cells[i].trim().parse::<f64>().map_err(|_| bad(cells[i]))).collect::<Result<_>>()?);
            factors.push(fcols.iter().map(|&i| cells[i].trim().parse::<usize>().map_err(|_| bad(cells[i]))).collect::<Result<_>>()?);
        }
        Self::new(reps, factors, None)
    }

    /// JSON lines `{"representation": [...], "factors": [...]}`.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            representation: Vec<f64>,
            factors: Vec<usize>,
        }
        let mut reps = Vec::new();
        let mut factors = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Row = serde_json::from_str(line).map_err(|e| Error::data(format!("line {}: {e}", n + 1)))?;
            reps.push(row.representation);
            factors.push(row.factors);
        }
        Self::new(reps, factors, None)
    }

    pub fn to_tsv(&self) -> String {
        let mut out: Vec<String> = (0..self.num_dims()).map(|i| format!("z{i}")).collect();
        out.extend((0..self.num_factors()).map(|k| format!("f{k}")));
        let mut text = out.join("\t") + "\n";
        for (r, f) in self.reps.iter().zip(&self.factors) {
            let cells: Vec<String> = r.iter().map(|v| format!("{v}")).chain(f.iter().map(|v| v.to_string())).collect();
            text.push_str(&cells.join("\t"));
            text.push('\n');
        }
        text
    }
}

/// Average (0-based) ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Equal-frequency binning into `bins` bins; equal values share a bin.
pub fn discretize(values: &[f64], bins: usize) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::data("cannot discretise an empty column"));
    }
    if bins == 0 {
        return Err(Error::config("bins", "must be positive"));
    }
    let n = values.len() as f64;
    Ok(average_ranks(values).into_iter().map(|r| ((r * bins as f64 / n) as usize).min(bins - 1)).collect())
}

fn counts(x: &[usize]) -> BTreeMap<usize, usize> {
    let mut c = BTreeMap::new();
    for &v in x {
        *c.entry(v).or_insert(0) += 1;
    }
    c
}

/// Plug-in entropy in nats.
pub fn entropy(x: &[usize]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::data("entropy of an empty column"));
    }
    let n = x.len() as f64;
    Ok(-counts(x).values().map(|&c| c as f64 / n).map(|p| p * p.ln()).sum::<f64>())
}

/// Plug-in mutual information in nats from the joint histogram.
pub fn mutual_information(x: &[usize], y: &[usize]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::data("mutual information of empty columns"));
    }
    if x.len() != y.len() {
        return Err(Error::data(format!("columns of length {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let (cx, cy) = (counts(x), counts(y));
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *joint.entry((a, b)).or_insert(0) += 1;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(a, b), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (cx[&a] as f64 * cy[&b] as f64)).ln()
        })
        .sum();
    Ok(mi.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub bins: usize,
    pub trials: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub lasso_alpha: f64,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { bins: 20, trials: 500, batch_size: 64, train_fraction: 0.8, lasso_alpha: 0.01, seed: 0 }
    }
}

/// `mi[i][k] = I(z_i; v_k)`.
pub fn mi_matrix(data: &FactorDataset, bins: usize) -> Result<Vec<Vec<f64>>> {
    let factors: Vec<Vec<usize>> = (0..data.num_factors()).map(|k| data.factor_column(k)).collect();
    (0..data.num_dims())
        .into_par_iter()
        .map(|i| {
            let z = discretize(&data.dim_column(i), bins)?;
            factors.iter().map(|v| mutual_information(&z, v)).collect()
        })
        .collect()
}

/// Mutual information gap averaged over factors.
pub fn mig(data: &FactorDataset, bins: usize) -> Result<f64> {
    if data.num_dims() < 2 {
        return Err(Error::data("MIG needs at least two representation dimensions"));
    }
    let mi = mi_matrix(data, bins)?;
    let mut total = 0.0;
    for k in 0..data.num_factors() {
        let h = entropy(&data.factor_column(k))?;
        if h <= 0.0 {
            return Err(Error::data(format!("factor {k} is constant; its entropy is zero")));
        }
        let mut col: Vec<f64> = mi.iter().map(|row| row[k]).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        total += (col[0] - col[1]) / h;
    }
    Ok(total / data.num_factors() as f64)
}

/// Mean over dimensions of `1 − δ_i`, with
/// `δ_i = Σ_{k≠k*} m_ik² / (θ_i² (F − 1))` and `θ_i = max_k m_ik`.
pub fn modularity(data: &FactorDataset, bins: usize) -> Result<f64> {
    let f = data.num_factors();
    if f < 2 {
        return Err(Error::data("modularity needs at least two factors"));
    }
    Ok(modularity_from_mi(&mi_matrix(data, bins)?))
}

pub fn modularity_from_mi(mi: &[Vec<f64>]) -> f64 {
    let scores: Vec<f64> = mi
        .iter()
        .map(|row| {
            let (best, theta) = row.iter().enumerate().fold((0, 0.0), |acc, (k, &m)| if m > acc.1 { (k, m) } else { acc });
            if theta <= 0.0 {
                return 0.0;
            }
            let dev: f64 = row.iter().enumerate().filter(|&(k, _)| k != best).map(|(_, m)| m * m).sum();
            1.0 - dev / (theta * theta * (row.len() - 1) as f64)
        })
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn standardized(data: &FactorDataset) -> Result<Vec<Vec<f64>>> {
    let n = data.len() as f64;
    let d = data.num_dims();
    let mut out = data.reps.clone();
    for i in 0..d {
        let mean = data.reps.iter().map(|r| r[i]).sum::<f64>() / n;
        let var = data.reps.iter().map(|r| (r[i] - mean) * (r[i] - mean)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::data(format!("representation dimension {i} has zero standard deviation")));
        }
        let std = var.sqrt();
        for row in &mut out {
            row[i] = (row[i] - mean) / std;
        }
    }
    Ok(out)
}

/// Majority-vote error of predicting which factor was held fixed from the
/// dimension of least normalised variance.
pub fn z_min_var_error(data: &FactorDataset, config: &MetricsConfig) -> Result<f64> {
    if config.trials < 2 || config.batch_size < 2 {
        return Err(Error::config("trials", "trials and batch_size must both be at least 2"));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(Error::config("train_fraction", "must lie in (0, 1)"));
    }
    let reps = standardized(data)?;
    let f = data.num_factors();
    let d = data.num_dims();
    // rows grouped by (factor, value)
    let groups: Vec<BTreeMap<usize, Vec<usize>>> = (0..f)
        .map(|k| {
            let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (row, fs) in data.factors.iter().enumerate() {
                g.entry(fs[k]).or_default().push(row);
            }
            g
        })
        .collect();
    for (k, g) in groups.iter().enumerate() {
        if let Some((v, rows)) = g.iter().find(|(_, rows)| rows.len() < 2) {
            return Err(Error::data(format!("factor {k} value {v} has only {} example(s)", rows.len())));
        }
    }
    let mut rng = seeded_rng(config.seed);
    let mut votes = Vec::with_capacity(config.trials);
    for _ in 0..config.trials {
        let k = rng.random_range(0..f);
        let values: Vec<&Vec<usize>> = groups[k].values().collect();
        let rows = values[rng.random_range(0..values.len())];
        let batch: Vec<usize> = (0..config.batch_size).map(|_| rows[rng.random_range(0..rows.len())]).collect();
        let m = batch.len() as f64;
        let mut best = (0, f64::INFINITY);
        #[allow(clippy::needless_range_loop)]
        for i in 0..d {
            let mean = batch.iter().map(|&r| reps[r][i]).sum::<f64>() / m;
            let var = batch.iter().map(|&r| (reps[r][i] - mean) * (reps[r][i] - mean)).sum::<f64>() / (m - 1.0);
            if var < best.1 {
                best = (i, var);
            }
        }
        votes.push((best.0, k));
    }
    let n_train = ((config.trials as f64 * config.train_fraction).round() as usize).clamp(1, config.trials - 1);
    let (train, test) = votes.split_at(n_train);
    let mut table = vec![vec![0usize; f]; d];
    for &(i, k) in train {
        table[i][k] += 1;
    }
    let fallback = {
        let mut totals = vec![0usize; f];
        for &(_, k) in train {
            totals[k] += 1;
        }
        argmax_usize(&totals)
    };
    let predict: Vec<usize> = table.iter().map(|row| if row.iter().all(|&c| c == 0) { fallback } else { argmax_usize(row) }).collect();
    let wrong = test.iter().filter(|&&(i, k)| predict[i] != k).count();
    Ok(wrong as f64 / test.len() as f64)
}

fn argmax_usize(v: &[usize]) -> usize {
    v.iter().enumerate().fold((0, 0), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc }).0
}

/// Coordinate-descent lasso on already standardised features:
/// `min (1/2n)‖y − Xw − b‖² + α‖w‖₁`. Returns `(w, b)`.
pub fn lasso(x: &[Vec<f64>], y: &[f64], alpha: f64) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::data("lasso needs matching, non-empty design and targets"));
    }
    let n = x.len() as f64;
    let d = x[0].len();
    let xmean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let ymean = y.iter().sum::<f64>() / n;
    let xc: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&xmean).map(|(a, m)| a - m).collect()).collect();
    let sq: Vec<f64> = (0..d).map(|j| xc.iter().map(|r| r[j] * r[j]).sum::<f64>() / n).collect();
    let mut resid: Vec<f64> = y.iter().map(|v| v - ymean).collect();
    let mut w = vec![0.0; d];
    for _ in 0..2000 {
        let mut max_change: f64 = 0.0;
        for j in 0..d {
            if sq[j] == 0.0 {
                continue;
            }
            let rho = xc.iter().zip(&resid).map(|(r, e)| r[j] * e).sum::<f64>() / n + sq[j] * w[j];
            let new = soft_threshold(rho, alpha) / sq[j];
            let delta = new - w[j];
            if delta != 0.0 {
                for (r, e) in xc.iter().zip(resid.iter_mut()) {
                    *e -= delta * r[j];
                }
                w[j] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        if max_change < 1e-10 {
            break;
        }
    }
    let b = ymean - w.iter().zip(&xmean).map(|(a, m)| a * m).sum::<f64>();
    Ok((w, b))
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Entropy of a distribution with logarithm base `base`.
fn entropy_base(p: &[f64], base: usize) -> f64 {
    if base < 2 {
        return 0.0;
    }
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / (base as f64).ln()
}

/// Disentanglement `D_i = 1 − H_F(P_i·)` of one importance row.
pub fn disentanglement_of_row(row: &[f64]) -> f64 {
    let s: f64 = row.iter().sum();
    if s <= 0.0 {
        return 0.0;
    }
    let p: Vec<f64> = row.iter().map(|v| v / s).collect();
    1.0 - entropy_base(&p, row.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DciScores {
    #[serde(rename = "D")]
    pub disentanglement: f64,
    #[serde(rename = "C")]
    pub completeness: Vec<f64>,
    /// Held-out normalised squared error per factor (lower is better).
    #[serde(rename = "I")]
    pub informativeness: Vec<f64>,
    #[serde(skip)]
    pub importance: Vec<Vec<f64>>,
}

/// D and C from an importance matrix `P[d][F]`.
pub fn dci_from_importance(p: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    let total: f64 = p.iter().flatten().sum();
    if !(total > 0.0) || p.iter().flatten().any(|v| !(*v >= 0.0)) {
        return Err(Error::data("importance matrix is degenerate (all zero or negative entries)"));
    }
    let d = p.len();
    let f = p[0].len();
    let dis: f64 = p.iter().map(|row| row.iter().sum::<f64>() / total * disentanglement_of_row(row)).sum();
    let comp = (0..f)
        .map(|k| {
            let col: Vec<f64> = p.iter().map(|row| row[k]).collect();
            let s: f64 = col.iter().sum();
            if s <= 0.0 {
                return 0.0;
            }
            let q: Vec<f64> = col.iter().map(|v| v / s).collect();
            1.0 - entropy_base(&q, d)
        })
        .collect();
    Ok((dis, comp))
}

/// DCI with lasso probes: importance of dimension `i` for factor `k` is the
/// summed absolute weight over one-vs-rest regressions of each factor value;
/// informativeness is the held-out squared error of a scalar regression of
/// the factor value, divided by the held-out variance.
pub fn dci(data: &FactorDataset, config: &MetricsConfig) -> Result<DciScores> {
    let f = data.num_factors();
    if f < 2 {
        return Err(Error::data("DCI needs at least two factors"));
    }
    if data.num_dims() < 2 {
        return Err(Error::data("DCI needs at least two representation dimensions"));
    }
    let x = standardized(data)?;
    let d = data.num_dims();
    let n = data.len();
    let n_train = ((n as f64 * config.train_fraction).round() as usize).clamp(1, n - 1);
    let per_factor: Vec<(Vec<f64>, f64)> = (0..f)
        .into_par_iter()
        .map(|k| {
            let col = data.factor_column(k);
            let mut imp = vec![0.0; d];
            for v in 0..data.cardinalities[k] {
                let y: Vec<f64> = col.iter().map(|&c| if c == v { 1.0 } else { 0.0 }).collect();
                let (w, _) = lasso(&x, &y, config.lasso_alpha)?;
                for (a, b) in imp.iter_mut().zip(w) {
                    *a += b.abs();
                }
            }
            let y: Vec<f64> = col.iter().map(|&c| c as f64).collect();
            let (w, b) = lasso(&x[..n_train], &y[..n_train], config.lasso_alpha)?;
            let test = &y[n_train..];
            let mean = test.iter().sum::<f64>() / test.len() as f64;
            let var = test.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / test.len() as f64;
            let err = x[n_train..]
                .iter()
                .zip(test)
                .map(|(r, t)| {
                    let pred = b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                    (pred - t) * (pred - t)
                })
                .sum::<f64>()
                / test.len() as f64;
            Ok((imp, if var > 0.0 { err / var } else { 0.0 }))
        })
        .collect::<Result<_>>()?;
    let importance: Vec<Vec<f64>> = (0..d).map(|i| per_factor.iter().map(|(imp, _)| imp[i]).collect()).collect();
    let (disentanglement, completeness) = dci_from_importance(&importance)?;
    Ok(DciScores { disentanglement, completeness, informativeness: per_factor.iter().map(|p| p.1).collect(), importance })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mig: f64,
    pub modularity: f64,
    pub z_min_var_error: f64,
    pub dci: DciScores,
    pub config: MetricsConfig,
}

/// Thread count from `LATENTLAB_THREADS`, defaulting to 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(THREADS_ENV, "must be a positive integer")),
        },
    }
}

/// Every metric family on `data`, using `threads` workers.
pub fn evaluate(data: &FactorDataset, config: &MetricsConfig, threads: usize) -> Result<MetricsReport> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().map_err(|e| Error::config("threads", e.to_string()))?;
    pool.install(|| {
        let mi = mi_matrix(data, config.bins)?;
        let mig = mig(data, config.bins)?;
        let modularity = if data.num_factors() >= 2 { modularity_from_mi(&mi) } else { 1.0 };
        Ok(MetricsReport {
            mig,
            modularity,
            z_min_var_error: z_min_var_error(data, config)?,
            dci: dci(data, config)?,
            config: config.clone(),
        })
    })
}

/// Every factor combination repeated, with representation `factor + noise`
/// per factor dimension; the oracle dataset for the metric suite.
pub fn copy_of_factors(cardinalities: &[usize], n: usize, noise: f64, seed: u64) -> Result<FactorDataset> {
    let mut rng = seeded_rng(seed);
    let mut factors = Vec::with_capacity(n);
    let mut reps = Vec::with_capacity(n);
    for _ in 0..n {
        let f: Vec<usize> = cardinalities.iter().map(|&c| rng.random_range(0..c)).collect();
        let noise_vals = crate::nn::standard_normal_vec(&mut rng, f.len());
        reps.push(f.iter().zip(noise_vals).map(|(&v, e)| v as f64 + noise * e).collect());
        factors.push(f);
    }
    FactorDataset::new(reps, factors, Some(cardinalities.to_vec()))
}
