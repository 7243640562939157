//! Invertible flow bridging an external embedding space and the VAE latent
//! space.
//!
//! Each block applies ActNorm (`y = exp(log_scale) ⊙ x + bias`), an affine
//! coupling (`y_a = exp(log s) ⊙ x_a + t` with `(log s, t) = m(x_b)`, where
//! `a` is the first half of the coordinates and `b` the second) and a fixed
//! permutation. Every piece has a closed-form inverse.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::nn::{linear, normal_tensor, seeded_rng, Bound, Optimizer, OptimizerKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::vae::VaeModel;
use crate::{Error, Result};

const CHECKPOINT_KIND: &str = "flow";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub dim: usize,
    pub depth: usize,
    /// Hidden width of the coupling perceptron; 0 means `dim`.
    pub hidden: usize,
    /// Dropout on the coupling hidden layer while training.
    pub dropout: f64,
    /// `y_a = x_a + t` instead of the affine map.
    pub additive: bool,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { dim: 12, depth: 4, hidden: 0, dropout: 0.0, additive: false, seed: 0 }
    }
}

impl FlowConfig {
    /// 20 blocks at latent width 768 with dropout 0.5.
    pub fn full_scale() -> Self {
        FlowConfig { dim: 768, depth: 20, dropout: 0.5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("dim", "must be positive"));
        }
        if self.depth > 0 && !self.dim.is_multiple_of(2) {
            return Err(Error::config("dim", "coupling layers need an even dimension"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            self.dim
        } else {
            self.hidden
        }
    }
}

/// `y_a = exp(log s) ⊙ x_a + t`, returning `(y_a, Σ log s)`.
pub fn affine_coupling(xa: &[f64], log_s: &[f64], t: &[f64]) -> (Vec<f64>, f64) {
    let y = xa.iter().zip(log_s).zip(t).map(|((x, l), t)| l.exp() * x + t).collect();
    (y, log_s.iter().sum())
}

/// `x_a = (y_a − t) / exp(log s)`.
pub fn affine_coupling_inverse(ya: &[f64], log_s: &[f64], t: &[f64]) -> Vec<f64> {
    ya.iter().zip(log_s).zip(t).map(|((y, l), t)| (y - t) / l.exp()).collect()
}

/// Embedding repeated three times.
pub fn triple_embed(w: &[f64]) -> Vec<f64> {
    w.iter().chain(w).chain(w).copied().collect()
}

/// Mean of the three thirds of `v`.
pub fn untriple(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() || !v.len().is_multiple_of(3) {
        return Err(Error::data(format!("cannot split a vector of length {} into thirds", v.len())));
    }
    let n = v.len() / 3;
    // written relative to the first third so identical thirds come back exactly
    Ok((0..n).map(|i| v[i] + ((v[n + i] - v[i]) + (v[2 * n + i] - v[i])) / 3.0).collect())
}

/// `½ Σ_d (z_d − μ_d)² / Σ_d`.
pub fn forward_defmod_loss(z: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    if z.len() != mu.len() || z.len() != var.len() {
        return Err(Error::data("forward loss operands differ in dimension"));
    }
    if let Some(v) = var.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::data(format!("variance entry {v} is not positive")));
    }
    Ok(0.5 * z.iter().zip(mu).zip(var).map(|((z, m), v)| (z - m) * (z - m) / v).sum::<f64>())
}

/// Mean squared error.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::data(format!("mse operands of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

fn matvec(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, m) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let mut out = b.data().to_vec();
    for i in 0..k {
        for j in 0..m {
            out[j] += x[i] * wd[i * m + j];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    config: FlowConfig,
    params: ParamStore,
    perms: Vec<Vec<usize>>,
    initialized: bool,
}

impl FlowStack {
    /// Identity ActNorm, random first coupling layer, zero last coupling
    /// layer (so every block starts as a permutation).
    pub fn new(config: FlowConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(config.seed);
        let (d, h) = (config.dim, config.dim / 2);
        let hidden = config.hidden_width();
        let out = if config.additive { h } else { 2 * h };
        let mut params = ParamStore::new();
        let mut perms = Vec::with_capacity(config.depth);
        for b in 0..config.depth {
            params.insert(format!("b{b}.an.log_scale"), Tensor::zeros(&[d]));
            params.insert(format!("b{b}.an.bias"), Tensor::zeros(&[d]));
            params.insert(format!("b{b}.m1.w"), normal_tensor(&mut rng, &[h, hidden], 1.0 / (h as f64).sqrt()));
            params.insert(format!("b{b}.m1.b"), Tensor::zeros(&[hidden]));
            params.insert(format!("b{b}.m2.w"), Tensor::zeros(&[hidden, out]));
            params.insert(format!("b{b}.m2.b"), Tensor::zeros(&[out]));
            let mut p: Vec<usize> = (0..d).collect();
            p.shuffle(&mut rng);
            perms.push(p);
        }
        Ok(FlowStack { config, params, perms, initialized: false })
    }

    /// Every parameter drawn from `N(0, std²)`; for property checks.
    pub fn with_random_params(config: FlowConfig, std: f64, seed: u64) -> Result<Self> {
        let mut stack = Self::new(config)?;
        let mut rng = seeded_rng(seed);
        let names: Vec<String> = stack.params.names().cloned().collect();
        for name in names {
            let t = stack.params.get_mut(&name)?;
            let fresh = normal_tensor(&mut rng, t.shape(), std);
            *t = fresh;
        }
        stack.initialized = true;
        Ok(stack)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn permutation(&self, block: usize) -> &[usize] {
        &self.perms[block]
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    fn p(&self, name: String) -> &Tensor {
        self.params.get(&name).expect("flow parameter exists")
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.dim {
            return Err(Error::data(format!("vector of dimension {} for flow of dimension {}", x.len(), self.config.dim)));
        }
        Ok(())
    }

    /// `(log s, t)` of block `b` as a function of the conditioning half.
    fn coupling_params(&self, b: usize, xb: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.config.dim / 2;
        let hidden: Vec<f64> = matvec(xb, self.p(format!("b{b}.m1.w")), self.p(format!("b{b}.m1.b"))).into_iter().map(f64::tanh).collect();
        let out = matvec(&hidden, self.p(format!("b{b}.m2.w")), self.p(format!("b{b}.m2.b")));
        if self.config.additive {
            (vec![0.0; h], out)
        } else {
            (out[..h].to_vec(), out[h..].to_vec())
        }
    }

    fn actnorm_row(&self, b: usize, x: &[f64]) -> (Vec<f64>, f64) {
        let ls = self.p(format!("b{b}.an.log_scale")).data();
        let bias = self.p(format!("b{b}.an.bias")).data();
        let y = x.iter().zip(ls).zip(bias).map(|((x, l), b)| l.exp() * x + b).collect();
        (y, ls.iter().sum())
    }

    /// One block applied to one row: output and log-determinant.
    pub fn block_forward(&self, b: usize, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x)?;
        let h = self.config.dim / 2;
        let (y, ld_an) = self.actnorm_row(b, x);
        let (log_s, t) = self.coupling_params(b, &y[h..]);
        let (ya, ld_c) = if self.config.additive {
            (y[..h].iter().zip(&t).map(|(x, t)| x + t).collect(), 0.0)
        } else {
            affine_coupling(&y[..h], &log_s, &t)
        };
        let y: Vec<f64> = ya.iter().chain(&y[h..]).copied().collect();
        let out = self.perms[b].iter().map(|&i| y[i]).collect();
        Ok((out, ld_an + ld_c))
    }

    pub fn block_inverse(&self, b: usize, y: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(y)?;
        let h = self.config.dim / 2;
        let mut u = vec![0.0; self.config.dim];
        for (k, &i) in self.perms[b].iter().enumerate() {
            u[i] = y[k];
        }
        let (log_s, t) = self.coupling_params(b, &u[h..]);
        let xa = if self.config.additive {
            u[..h].iter().zip(&t).map(|(y, t)| y - t).collect()
        } else {
            affine_coupling_inverse(&u[..h], &log_s, &t)
        };
        u[..h].copy_from_slice(&xa);
        let ls = self.p(format!("b{b}.an.log_scale")).data();
        let bias = self.p(format!("b{b}.an.bias")).data();
        Ok(u.iter().zip(ls).zip(bias).map(|((y, l), b)| (y - b) / l.exp()).collect())
    }

    /// `T(x)` and `log |det J_T(x)|`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, lds) = self.forward_with_block_logdets(x)?;
        Ok((z, lds.iter().sum()))
    }

    pub fn forward_with_block_logdets(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(x)?;
        let mut z = x.to_vec();
        let mut lds = Vec::with_capacity(self.depth());
        for b in 0..self.depth() {
            let (y, ld) = self.block_forward(b, &z)?;
            z = y;
            lds.push(ld);
        }
        Ok((z, lds))
    }

    /// `T⁻¹(z)`.
    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let mut x = z.to_vec();
        for b in (0..self.depth()).rev() {
            x = self.block_inverse(b, &x)?;
        }
        Ok(x)
    }

    /// Data-dependent ActNorm initialisation, block by block: each block's
    /// ActNorm maps the batch (as it arrives at that block) to zero mean and
    /// unit population variance per dimension.
    pub fn actnorm_init(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if batch.len() < 2 {
            return Err(Error::data("ActNorm initialisation needs at least two rows"));
        }
        for row in batch {
            self.check_dim(row)?;
        }
        let n = batch.len() as f64;
        let mut rows = batch.to_vec();
        for b in 0..self.depth() {
            let mut ls = vec![0.0; self.dim()];
            let mut bias = vec![0.0; self.dim()];
            for d in 0..self.dim() {
                let mean = rows.iter().map(|r| r[d]).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r[d] - mean) * (r[d] - mean)).sum::<f64>() / n;
                if !(var > 0.0) {
                    return Err(Error::data(format!("dimension {d} has zero variance at block {b}")));
                }
                let std = var.sqrt();
                ls[d] = -std.ln();
                bias[d] = -mean / std;
            }
            *self.params.get_mut(&format!("b{b}.an.log_scale"))? = Tensor::vector(&ls);
            *self.params.get_mut(&format!("b{b}.an.bias"))? = Tensor::vector(&bias);
            rows = rows.iter().map(|r| self.block_forward(b, r).map(|o| o.0)).collect::<Result<_>>()?;
        }
        self.initialized = true;
        Ok(())
    }

    /// Mean over rows of `½‖T(x)‖² − log|det J_T(x)|`.
    pub fn nll_loss(&self, batch: &[Vec<f64>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let mut acc = 0.0;
        for x in batch {
            let (z, ld) = self.forward(x)?;
            acc += 0.5 * z.iter().map(|v| v * v).sum::<f64>() - ld;
        }
        Ok(acc / batch.len() as f64)
    }

    // ---- graph versions for training ---------------------------------------

    fn permutation_matrix(&self, b: usize) -> Tensor {
        let d = self.dim();
        let mut m = Tensor::zeros(&[d, d]);
        for (k, &i) in self.perms[b].iter().enumerate() {
            m.data_mut()[i * d + k] = 1.0;
        }
        m
    }

    fn coupling_graph(
        &self,
        tape: &mut Tape,
        p: &Bound,
        b: usize,
        xb: Var,
        dropout: &mut Option<&mut dyn rand::RngCore>,
    ) -> Result<(Option<Var>, Var)> {
        let h = self.dim() / 2;
        let hid = linear(tape, p, &format!("b{b}.m1"), xb)?;
        let mut hid = tape.tanh(hid);
        if let Some(rng) = dropout.as_deref_mut() {
            let keep = 1.0 - self.config.dropout;
            let shape = tape.shape(hid).to_vec();
            let n: usize = shape.iter().product();
            let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
            let mask = tape.constant(Tensor::new(&shape, mask)?);
            hid = tape.mul(hid, mask)?;
        }
        let out = linear(tape, p, &format!("b{b}.m2"), hid)?;
        if self.config.additive {
            Ok((None, out))
        } else {
            let log_s = tape.narrow(out, 1, 0, h)?;
            let t = tape.narrow(out, 1, h, h)?;
            Ok((Some(log_s), t))
        }
    }

    /// `T(x)` for `x[N, dim]` plus per-row log-determinants `[N]`.
    pub(crate) fn forward_graph(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        mut dropout: Option<&mut dyn rand::RngCore>,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(x)[0];
        let h = self.dim() / 2;
        let mut z = x;
        let mut logdet = tape.constant(Tensor::zeros(&[n, 1]));
        for b in 0..self.depth() {
            let ls = p.get(&format!("b{b}.an.log_scale"));
            let scale = tape.exp(ls);
            let y = tape.mul(z, scale)?;
            let y = tape.add(y, p.get(&format!("b{b}.an.bias")))?;
            let an_ld = tape.sum(ls);
            logdet = tape.add(logdet, an_ld)?;
            let ya = tape.narrow(y, 1, 0, h)?;
            let yb = tape.narrow(y, 1, h, h)?;
            let (log_s, t) = self.coupling_graph(tape, p, b, yb, &mut dropout)?;
            let ya = match log_s {
                Some(ls) => {
                    let s = tape.exp(ls);
                    let m = tape.mul(ya, s)?;
                    let row_ld = tape.sum_axis(ls, 1)?;
                    let row_ld = tape.reshape(row_ld, &[n, 1])?;
                    logdet = tape.add(logdet, row_ld)?;
                    tape.add(m, t)?
                }
                None => tape.add(ya, t)?,
            };
            let y = tape.concat(&[ya, yb], 1)?;
            let perm = tape.constant(self.permutation_matrix(b));
            z = tape.matmul(y, perm)?;
        }
        Ok((z, tape.reshape(logdet, &[n])?))
    }

    /// `T⁻¹(z)` for `z[N, dim]`.
    pub(crate) fn inverse_graph(&self, tape: &mut Tape, p: &Bound, z: Var, mut dropout: Option<&mut dyn rand::RngCore>) -> Result<Var> {
        let h = self.dim() / 2;
        let mut x = z;
        for b in (0..self.depth()).rev() {
            let mut inv = self.permutation_matrix(b);
            let d = self.dim();
            // transpose of a permutation matrix is its inverse
            let data = inv.data().to_vec();
            for i in 0..d {
                for j in 0..d {
                    inv.data_mut()[j * d + i] = data[i * d + j];
                }
            }
            let inv = tape.constant(inv);
            let u = tape.matmul(x, inv)?;
            let ua = tape.narrow(u, 1, 0, h)?;
            let ub = tape.narrow(u, 1, h, h)?;
            let (log_s, t) = self.coupling_graph(tape, p, b, ub, &mut dropout)?;
            let diff = tape.sub(ua, t)?;
            let xa = match log_s {
                Some(ls) => {
                    let s = tape.exp(ls);
                    tape.div(diff, s)?
                }
                None => diff,
            };
            let u = tape.concat(&[xa, ub], 1)?;
            let u = tape.sub(u, p.get(&format!("b{b}.an.bias")))?;
            let s = tape.exp(p.get(&format!("b{b}.an.log_scale")));
            x = tape.div(u, s)?;
        }
        Ok(x)
    }

    // ---- persistence --------------------------------------------------------

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, json!({ "permutations": self.perms, "initialized": self.initialized }), &self.params)
    }

    /// Restores parameters exactly; ActNorm is never re-initialised on load.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: FlowConfig = ck.config()?;
        let template = Self::new(config)?;
        let params = ck.params_like(&template.params)?;
        let perms: Vec<Vec<usize>> = ck.meta("permutations")?;
        let initialized: bool = ck.meta("initialized")?;
        if perms.len() != template.depth() {
            return Err(Error::Checkpoint(format!("{} permutations for depth {}", perms.len(), template.depth())));
        }
        for (b, p) in perms.iter().enumerate() {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..template.dim()).collect::<Vec<_>>() {
                return Err(Error::Checkpoint(format!("permutation of block {b} is not a bijection")));
            }
        }
        Ok(FlowStack { config: template.config, params, perms, initialized })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Embedding → latent, Mahalanobis loss against the definition posterior.
    #[default]
    Forward,
    /// Latent → embedding, mean squared error against the tripled embedding.
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnTrainConfig {
    pub direction: Direction,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for InnTrainConfig {
    fn default() -> Self {
        InnTrainConfig { direction: Direction::Forward, epochs: 100, learning_rate: 1e-3, optimizer: OptimizerKind::Adam, seed: 0 }
    }
}

/// Training pair after the frozen VAE has been applied to the definition.
#[derive(Debug, Clone, PartialEq)]
pub struct DefmodTarget {
    /// Tripled word embedding.
    pub input: Vec<f64>,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// One record of the embedding pairs file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPair {
    pub word: String,
    pub embedding: Vec<f64>,
    pub definition: String,
}

pub fn parse_pairs_jsonl(text: &str) -> Result<Vec<EmbeddingPair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(format!("pairs line {}: {e}", i + 1))))
        .collect()
}

/// Encode every definition with the frozen VAE (posterior mean and
/// variance) and triple every embedding.
pub fn defmod_targets(vae: &VaeModel, pairs: &[EmbeddingPair]) -> Result<Vec<DefmodTarget>> {
    pairs
        .iter()
        .map(|p| {
            let post = vae.encode_text(&p.definition)?;
            let input = triple_embed(&p.embedding);
            if input.len() != post.dim() {
                return Err(Error::data(format!(
                    "embedding of `{}` has {} entries; tripled it must match latent_dim {}",
                    p.word,
                    p.embedding.len(),
                    post.dim()
                )));
            }
            Ok(DefmodTarget { input, var: post.log_var.iter().map(|v| v.exp()).collect(), mu: post.mu })
        })
        .collect()
}

/// Mean per-pair loss of `stack` in the given direction.
pub fn defmod_loss(stack: &FlowStack, targets: &[DefmodTarget], direction: Direction) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    let mut acc = 0.0;
    for t in targets {
        acc += match direction {
            Direction::Forward => forward_defmod_loss(&stack.forward(&t.input)?.0, &t.mu, &t.var)?,
            Direction::Reverse => mse(&stack.inverse(&t.mu)?, &t.input)?,
        };
    }
    Ok(acc / targets.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnEpoch {
    pub epoch: usize,
    /// Loss before this epoch's update.
    pub loss: f64,
}

/// Full-batch training of `stack` on the precomputed targets. The VAE is not
/// involved here at all, so its parameters cannot change.
pub fn train_inn(stack: &mut FlowStack, targets: &[DefmodTarget], config: &InnTrainConfig) -> Result<Vec<InnEpoch>> {
    if targets.is_empty() {
        return Err(Error::data("no training pairs"));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::config("learning_rate", "must be positive"));
    }
    let inputs: Vec<Vec<f64>> = targets.iter().map(|t| t.input.clone()).collect();
    for row in &inputs {
        stack.check_dim(row)?;
    }
    if !stack.initialized && stack.depth() > 0 {
        stack.actnorm_init(&inputs)?;
    }
    let n = targets.len();
    let x = Tensor::from_rows(&inputs)?;
    let mu = Tensor::from_rows(&targets.iter().map(|t| t.mu.clone()).collect::<Vec<_>>())?;
    let inv_var = Tensor::from_rows(&targets.iter().map(|t| t.var.iter().map(|v| 1.0 / v).collect()).collect::<Vec<_>>())?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut rng = seeded_rng(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let p = stack.params.bind(&mut tape, |_| true);
        let dropout: Option<&mut dyn rand::RngCore> = if stack.config.dropout > 0.0 { Some(&mut rng) } else { None };
        let loss = match config.direction {
            Direction::Forward => {
                let xv = tape.constant(x.clone());
                let (z, _) = stack.forward_graph(&mut tape, &p, xv, dropout)?;
                let m = tape.constant(mu.clone());
                let d = tape.sub(z, m)?;
                let d = tape.square(d);
                let w = tape.constant(inv_var.clone());
                let d = tape.mul(d, w)?;
                let s = tape.sum(d);
                tape.scale(s, 0.5 / n as f64)
            }
            Direction::Reverse => {
                let m = tape.constant(mu.clone());
                let back = stack.inverse_graph(&mut tape, &p, m, dropout)?;
                let xv = tape.constant(x.clone());
                let d = tape.sub(back, xv)?;
                let d = tape.square(d);
                tape.mean(d)
            }
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::numeric(format!("flow loss became {value} at epoch {epoch}")));
        }
        history.push(InnEpoch { epoch, loss: value });
        tape.backward(loss)?;
        let grads = p.gradients(&tape);
        opt.step(&mut stack.params, &grads)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::standard_normal_vec;

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn coupling_hand_example() {
        let (ya, ld) = affine_coupling(&[1.0, 2.0], &[0.0, 2f64.ln()], &[3.0, 0.0]);
        assert_eq!(ya, vec![4.0, 4.0]);
        assert_eq!(ld, 2f64.ln());
        assert_eq!(affine_coupling_inverse(&ya, &[0.0, 2f64.ln()], &[3.0, 0.0]), vec![1.0, 2.0]);
        assert_eq!(affine_coupling(&[1.5, -2.0], &[0.0, 0.0], &[0.0, 0.0]), (vec![1.5, -2.0], 0.0));
    }

    #[test]
    fn depth_zero_is_identity() {
        let s = FlowStack::new(FlowConfig { dim: 3, depth: 0, ..FlowConfig::default() }).unwrap();
        assert_eq!(s.forward(&[1.0, 2.0, 3.0]).unwrap(), (vec![1.0, 2.0, 3.0], 0.0));
        assert_eq!(s.nll_loss(&[vec![0.0; 3]]).unwrap(), 0.0);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(FlowStack::new(FlowConfig { dim: 5, depth: 1, ..FlowConfig::default() }).is_err());
    }

    #[test]
    fn roundtrip_random_stack() {
        let s = FlowStack::with_random_params(FlowConfig { dim: 16, depth: 8, ..FlowConfig::default() }, 0.3, 1).unwrap();
        let mut rng = seeded_rng(2);
        for _ in 0..20 {
            let x = standard_normal_vec(&mut rng, 16);
            let (z, _) = s.forward(&x).unwrap();
            assert!(max_err(&s.inverse(&z).unwrap(), &x) <= 1e-9);
            let back = s.forward(&s.inverse(&x).unwrap()).unwrap().0;
            assert!(max_err(&back, &x) <= 1e-9);
        }
    }

    #[test]
    fn total_logdet_is_block_sum() {
        let s = FlowStack::with_random_params(FlowConfig { dim: 6, depth: 3, ..FlowConfig::default() }, 0.3, 4).unwrap();
        let x = [0.1, -0.4, 0.9, 0.3, -1.2, 0.5];
        let (_, total) = s.forward(&x).unwrap();
        let (_, blocks) = s.forward_with_block_logdets(&x).unwrap();
        assert_eq!(total, blocks.iter().sum::<f64>());
    }

    #[test]
    fn actnorm_init_standardises() {
        let mut s = FlowStack::new(FlowConfig { dim: 4, depth: 2, ..FlowConfig::default() }).unwrap();
        let mut rng = seeded_rng(3);
        let batch: Vec<Vec<f64>> =
            (0..50).map(|_| standard_normal_vec(&mut rng, 4).iter().enumerate().map(|(i, v)| 3.0 * v + i as f64).collect()).collect();
        s.actnorm_init(&batch).unwrap();
        for d in 0..4 {
            let ys: Vec<f64> = batch.iter().map(|r| s.actnorm_row(0, r).0[d]).collect();
            let mean = ys.iter().sum::<f64>() / 50.0;
            let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / 50.0;
            assert!(mean.abs() <= 1e-9 && (var - 1.0).abs() <= 1e-9);
        }
        let flat = vec![vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 5.0, 6.0, 7.0]];
        let err = s.actnorm_init(&flat).unwrap_err().to_string();
        assert!(err.contains("dimension 0"), "{err}");
    }

    #[test]
    fn graph_matches_row_evaluation() {
        let s = FlowStack::with_random_params(FlowConfig { dim: 6, depth: 3, ..FlowConfig::default() }, 0.3, 5).unwrap();
        let rows = vec![vec![0.2, -0.1, 0.5, 1.0, -0.7, 0.3], vec![-1.0, 0.4, 0.0, 0.2, 0.9, -0.5]];
        let mut tape = Tape::new();
        let p = s.params.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let (z, ld) = s.forward_graph(&mut tape, &p, x, None).unwrap();
        let back = s.inverse_graph(&mut tape, &p, z, None).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let (zr, ldr) = s.forward(r).unwrap();
            assert!(max_err(tape.value(z).row(i), &zr) < 1e-12);
            assert!((tape.value(ld).data()[i] - ldr).abs() < 1e-12);
            assert!(max_err(tape.value(back).row(i), r) < 1e-12);
        }
    }

    #[test]
    fn nll_examples() {
        // Scaling ActNorm by 2 in one dimension at x = 0.
        let mut s = FlowStack::new(FlowConfig { dim: 2, depth: 1, ..FlowConfig::default() }).unwrap();
        *s.params.get_mut("b0.an.log_scale").unwrap() = Tensor::vector(&[2f64.ln(), 0.0]);
        assert!((s.nll_loss(&[vec![0.0, 0.0]]).unwrap() + 2f64.ln()).abs() < 1e-15);
        let id = FlowStack::new(FlowConfig { dim: 4, depth: 0, ..FlowConfig::default() }).unwrap();
        let mut rng = seeded_rng(8);
        let batch: Vec<Vec<f64>> = (0..20_000).map(|_| standard_normal_vec(&mut rng, 4)).collect();
        let loss = id.nll_loss(&batch).unwrap();
        // Var(½‖x‖²) = d/2 for standard normal x
        let se = (4.0f64 / 2.0).sqrt() / (20_000f64).sqrt();
        assert!((loss - 2.0).abs() <= 3.0 * se, "{loss}");
    }

    #[test]
    fn defmod_loss_examples() {
        assert_eq!(forward_defmod_loss(&[2.0], &[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(forward_defmod_loss(&[2.0], &[1.0], &[0.5]).unwrap(), 1.0);
        assert_eq!(forward_defmod_loss(&[1.0, 2.0], &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!(forward_defmod_loss(&[1.0], &[1.0], &[0.0]).is_err());
        assert_eq!(mse(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn tripling() {
        assert_eq!(triple_embed(&vec![0.5; 256]).len(), 768);
        let a = [0.1, -2.0, 3.3];
        assert_eq!(untriple(&triple_embed(&a)).unwrap(), a.to_vec());
        assert_eq!(untriple(&[0.0, 3.0, 6.0]).unwrap(), vec![3.0]);
        assert!(untriple(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let s = FlowStack::with_random_params(FlowConfig { dim: 4, depth: 2, ..FlowConfig::default() }, 0.2, 9).unwrap();
        let back = FlowStack::from_checkpoint(&Checkpoint::from_json(&s.to_checkpoint().unwrap().to_json().unwrap()).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn training_reduces_forward_loss() {
        let mut rng = seeded_rng(10);
        let targets: Vec<DefmodTarget> = (0..30)
            .map(|_| {
                let w = standard_normal_vec(&mut rng, 2);
                let mu: Vec<f64> = triple_embed(&w).iter().map(|v| 0.5 * v + 1.0).collect();
                DefmodTarget { input: triple_embed(&w), mu, var: vec![0.5; 6] }
            })
            .collect();
        let mut s = FlowStack::new(FlowConfig { dim: 6, depth: 2, ..FlowConfig::default() }).unwrap();
        let cfg = InnTrainConfig { epochs: 50, learning_rate: 0.01, ..InnTrainConfig::default() };
        let h = train_inn(&mut s, &targets, &cfg).unwrap();
        assert!(h.last().unwrap().loss < h[0].loss);
        assert!(s.is_initialized());
    }
}
