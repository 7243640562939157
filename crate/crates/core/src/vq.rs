//! Vector quantisation with a straight-through estimator.
//!
//! The objective attached to a quantised code `z_k` for encoder output `e`:
//! a codebook term `‖sg[e] − z_k‖²` that only moves the code, and a
//! commitment term `β_c ‖e − sg[z_k]‖²` that only moves the encoder. Both
//! are averaged over rows.

use serde::{Deserialize, Serialize};

use crate::nn::{normal_tensor, seeded_rng, Optimizer, OptimizerKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Tensor,
    commitment: f64,
}

impl Codebook {
    /// Seeded standard-normal entries scaled by 0.1.
    pub fn new(size: usize, dim: usize, commitment: f64, seed: u64) -> Result<Self> {
        let entries = normal_tensor(&mut seeded_rng(seed), &[size.max(1), dim.max(1)], 0.1);
        Self::from_entries(entries, commitment)
    }

    pub fn from_entries(entries: Tensor, commitment: f64) -> Result<Self> {
        if entries.shape().len() != 2 || entries.shape()[0] < 2 {
            return Err(Error::data(format!("codebook needs shape [K >= 2, D], got {:?}", entries.shape())));
        }
        if !entries.is_finite() {
            return Err(Error::data("codebook entries must be finite"));
        }
        if !(commitment >= 0.0) {
            return Err(Error::config("commitment", "must be non-negative"));
        }
        Ok(Codebook { entries, commitment })
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn commitment(&self) -> f64 {
        self.commitment
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn code(&self, k: usize) -> &[f64] {
        self.entries.row(k)
    }

    /// Index of the closest code in Euclidean distance; lowest index wins ties.
    pub fn nearest_code(&self, e: &[f64]) -> Result<usize> {
        if e.len() != self.dim() {
            return Err(Error::data(format!("vector of dimension {} for codebook of dimension {}", e.len(), self.dim())));
        }
        Ok(nearest_row(self.entries.data(), self.dim(), e))
    }

    pub fn quantize(&self, e: &[f64]) -> Result<(Vec<f64>, usize)> {
        let k = self.nearest_code(e)?;
        Ok((self.code(k).to_vec(), k))
    }
}

fn nearest_row(table: &[f64], dim: usize, e: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, row) in table.chunks(dim).enumerate() {
        let d: f64 = row.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Quantise each row of `e[N, D]` against `codebook[K, D]`. The result has
/// the selected codes as its value and passes gradients straight to `e`;
/// the codebook receives nothing through this path.
pub fn quantize_on_tape(tape: &mut Tape, e: Var, codebook: Var) -> Result<(Var, Vec<usize>)> {
    let (es, cs) = (tape.shape(e).to_vec(), tape.shape(codebook).to_vec());
    if es.len() != 2 || cs.len() != 2 || es[1] != cs[1] {
        return Err(Error::data(format!("quantize: encodings {es:?} vs codebook {cs:?}")));
    }
    let dim = es[1];
    let table = tape.value(codebook).data().to_vec();
    let indices: Vec<usize> = tape.value(e).data().chunks(dim).map(|row| nearest_row(&table, dim, row)).collect();
    let sg_book = tape.stop_gradient(codebook);
    let codes = tape.embedding(sg_book, &indices)?;
    Ok((tape.straight_through(e, codes)?, indices))
}

/// `(codebook term, commitment term)` for rows of `e` assigned to `indices`.
pub fn vq_loss_on_tape(tape: &mut Tape, e: Var, codebook: Var, indices: &[usize], commitment: f64) -> Result<(Var, Var)> {
    let rows = tape.shape(e)[0] as f64;
    let codes = tape.embedding(codebook, indices)?;
    let sg_e = tape.stop_gradient(e);
    let sg_codes = tape.stop_gradient(codes);

    let d = tape.sub(sg_e, codes)?;
    let d = tape.square(d);
    let d = tape.sum(d);
    let book = tape.scale(d, 1.0 / rows);

    let c = tape.sub(e, sg_codes)?;
    let c = tape.square(c);
    let c = tape.sum(c);
    let commit = tape.scale(c, commitment / rows);
    Ok((book, commit))
}

/// Values of both objective terms for a single vector.
pub fn vq_loss(e: &[f64], codebook: &Codebook) -> Result<(f64, f64)> {
    let k = codebook.nearest_code(e)?;
    let sq: f64 = e.iter().zip(codebook.code(k)).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sq, codebook.commitment * sq))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VqTrainConfig {
    pub codebook_size: usize,
    pub commitment: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    /// Train the affine encoder/decoder pair around the bottleneck; when
    /// false both stay at the identity and only the codebook learns.
    pub train_autoencoder: bool,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig {
            codebook_size: 8,
            commitment: 0.25,
            learning_rate: 0.1,
            epochs: 200,
            optimizer: OptimizerKind::Sgd,
            train_autoencoder: true,
            seed: 0,
        }
    }
}

/// Affine encoder -> codebook -> affine decoder on real vectors.
#[derive(Debug, Clone)]
pub struct VqAutoencoder {
    pub params: ParamStore,
    pub codebook: Codebook,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VqEpoch {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub codes_used: usize,
}

impl VqAutoencoder {
    pub fn new(dim: usize, config: &VqTrainConfig) -> Result<Self> {
        let codebook = Codebook::new(config.codebook_size, dim, config.commitment, config.seed)?;
        let mut params = ParamStore::new();
        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        params.insert("enc.w", eye.clone());
        params.insert("enc.b", Tensor::zeros(&[dim]));
        params.insert("dec.w", eye);
        params.insert("dec.b", Tensor::zeros(&[dim]));
        params.insert("codebook", codebook.entries.clone());
        Ok(VqAutoencoder { params, codebook })
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.params.get("enc.w")?;
        let b = self.params.get("enc.b")?;
        let d = b.numel();
        Ok((0..d).map(|j| b.data()[j] + (0..d).map(|i| x[i] * w.data()[i * d + j]).sum::<f64>()).collect())
    }

    /// Full-batch training; returns per-epoch statistics.
    pub fn train(&mut self, data: &[Vec<f64>], config: &VqTrainConfig) -> Result<Vec<VqEpoch>> {
        let dim = self.codebook.dim();
        if data.is_empty() || data.iter().any(|r| r.len() != dim) {
            return Err(Error::data(format!("training data must be non-empty rows of dimension {dim}")));
        }
        let x = Tensor::from_rows(data)?;
        let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
        let mut history = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, |n| n == "codebook" || config.train_autoencoder);
            let xv = tape.constant(x.clone());
            let e = crate::nn::linear(&mut tape, &p, "enc", xv)?;
            let (zq, idx) = quantize_on_tape(&mut tape, e, p.get("codebook"))?;
            let y = crate::nn::linear(&mut tape, &p, "dec", zq)?;
            let r = tape.sub(y, xv)?;
            let r = tape.square(r);
            let r = tape.sum(r);
            let recon = tape.scale(r, 1.0 / data.len() as f64);
            let (book, commit) = vq_loss_on_tape(&mut tape, e, p.get("codebook"), &idx, self.codebook.commitment)?;
            let total = tape.add(recon, book)?;
            let total = tape.add(total, commit)?;
            let value = tape.value(total).item();
            if !value.is_finite() {
                return Err(Error::numeric(format!("VQ loss became {value}")));
            }
            let mut used = idx.clone();
            used.sort_unstable();
            used.dedup();
            history.push(VqEpoch {
                reconstruction: tape.value(recon).item(),
                codebook: tape.value(book).item(),
                commitment: tape.value(commit).item(),
                codes_used: used.len(),
            });
            tape.backward(total)?;
            opt.step(&mut self.params, &p.gradients(&tape))?;
            self.codebook = Codebook::from_entries(self.params.get("codebook")?.clone(), self.codebook.commitment)?;
        }
        Ok(history)
    }
}
