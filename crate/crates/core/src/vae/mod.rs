//! Sentence VAE with latent memory injection.
//!
//! A small transformer encoder mean-pools token states into a diagonal
//! Gaussian posterior. A sample `z` is projected by a single affine map into
//! one key/value vector per decoder layer and head; each decoder
//! self-attention layer prepends that slot to its keys and values, so every
//! position can attend to the latent. Training minimises
//! `CE + β · max(λ, KL)` with a cyclical β schedule.

mod model;
mod train;

pub use model::{DecodeOutput, LossParts, MemoryBank, VaeModel};
pub use train::{continue_training, train_vae, EpochStats, TrainReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{standard_normal_vec, OptimizerKind};
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Bottleneck {
    #[default]
    Gaussian,
    /// Deterministic encoder output snapped to a learned codebook.
    Vq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    /// Filled in from the vocabulary when a model is built.
    pub vocab_size: usize,
    pub min_count: usize,
    pub beta_cycles: usize,
    pub ramp_fraction: f64,
    /// Constant β instead of the cyclical schedule.
    pub fixed_beta: Option<f64>,
    pub kl_threshold: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub freeze_decoder_hidden: bool,
    /// With `freeze_decoder_hidden`, decoder embeddings and output head are
    /// tuned only for this many leading epochs.
    pub embed_tune_epochs: usize,
    /// Separate key and value projections instead of one shared vector.
    pub separate_kv: bool,
    pub bottleneck: Bottleneck,
    pub codebook_size: usize,
    pub commitment: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 32,
            embed_dim: 32,
            n_layers: 2,
            n_heads: 2,
            head_dim: 16,
            ff_dim: 64,
            max_len: 16,
            vocab_size: 0,
            min_count: 1,
            beta_cycles: 4,
            ramp_fraction: 0.5,
            fixed_beta: None,
            kl_threshold: 1.0,
            learning_rate: 5e-4,
            optimizer: OptimizerKind::Adam,
            epochs: 30,
            batch_size: 0,
            freeze_decoder_hidden: false,
            embed_tune_epochs: 1,
            separate_kv: false,
            bottleneck: Bottleneck::Gaussian,
            codebook_size: 16,
            commitment: 0.25,
            seed: 0,
        }
    }
}

impl VaeConfig {
    /// Large configuration: latent 768, 32 layers of 32 heads
    /// with head dimension 128.
    pub fn full_scale() -> Self {
        VaeConfig {
            latent_dim: 768,
            embed_dim: 4096,
            n_layers: 32,
            n_heads: 32,
            head_dim: 128,
            ff_dim: 11008,
            max_len: 64,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("ff_dim", self.ff_dim),
            ("beta_cycles", self.beta_cycles),
            ("min_count", self.min_count),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.embed_dim != self.n_heads * self.head_dim {
            return Err(Error::config("embed_dim", "must equal n_heads * head_dim"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len", "must be at least 2 (BOS and EOS)"));
        }
        if !(self.kl_threshold >= 0.0) {
            return Err(Error::config("kl_threshold", "must be non-negative"));
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err(Error::config("ramp_fraction", "must lie in (0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if let Some(b) = self.fixed_beta {
            if !(b >= 0.0) {
                return Err(Error::config("fixed_beta", "must be non-negative"));
            }
        }
        if self.bottleneck == Bottleneck::Vq && self.codebook_size < 2 {
            return Err(Error::config("codebook_size", "must be at least 2"));
        }
        Ok(())
    }

    pub fn kv_slots(&self) -> usize {
        if self.separate_kv {
            2
        } else {
            1
        }
    }

    /// Output width of the memory projection.
    pub fn memory_width(&self) -> usize {
        self.n_layers * self.kv_slots() * self.n_heads * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    /// Clamps `log_var` into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::data(format!("mu has {} entries, log_var {}", mu.len(), log_var.len())));
        }
        if mu.iter().any(|v| !v.is_finite()) || log_var.iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("posterior has non-finite entries"));
        }
        let log_var = log_var.into_iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect();
        Ok(GaussianPosterior { mu, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `z = μ + σ ⊙ ε` with `ε ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(posterior: &GaussianPosterior, rng: &mut impl Rng) -> Vec<f64> {
    let eps = standard_normal_vec(rng, posterior.dim());
    posterior.mu.iter().zip(&posterior.log_var).zip(eps).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect()
}

/// `KL(q || N(0, I)) = Σ ½(μ² + σ² − 1 − log σ²)`.
pub fn kl_diag_gaussian(posterior: &GaussianPosterior) -> f64 {
    posterior.mu.iter().zip(&posterior.log_var).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum()
}

/// Cyclical KL weight: within each of `cycles` periods β rises linearly
/// from 0 over the first `ramp_fraction` of the period and then stays at 1.
/// Steps past the end are clamped to the last step.
pub fn beta_schedule(step: usize, total_steps: usize, cycles: usize, ramp_fraction: f64) -> Result<f64> {
    if cycles == 0 {
        return Err(Error::config("beta_cycles", "must be at least 1"));
    }
    if !(ramp_fraction > 0.0 && ramp_fraction <= 1.0) {
        return Err(Error::config("ramp_fraction", "must lie in (0, 1]"));
    }
    if total_steps == 0 {
        return Err(Error::config("total_steps", "must be positive"));
    }
    let step = step.min(total_steps - 1) as f64;
    let period = total_steps as f64 / cycles as f64;
    let phase = (step % period) / period;
    Ok((phase / ramp_fraction).min(1.0))
}

/// The KL contribution to the objective: `β · max(λ, KL)`.
pub fn thresholded_kl(kl: f64, beta: f64, threshold: f64) -> f64 {
    beta * kl.max(threshold)
}

/// [`thresholded_kl`] on the tape; no gradient reaches `kl` below the
/// threshold.
pub fn thresholded_kl_graph(tape: &mut Tape, kl: Var, beta: f64, threshold: f64) -> Var {
    let floored = tape.floor_at(kl, threshold);
    tape.scale(floored, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_rng;

    #[test]
    fn kl_closed_forms() {
        let p = GaussianPosterior::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(kl_diag_gaussian(&p), 0.0);
        let p = GaussianPosterior::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_diag_gaussian(&p) - 0.5).abs() < 1e-15);
        let p = GaussianPosterior::new(vec![0.0], vec![4.0f64.ln()]).unwrap();
        let expected = 0.5 * (4.0 - 1.0 - 4.0f64.ln());
        assert!((kl_diag_gaussian(&p) - expected).abs() < 1e-15);
        assert!((expected - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_q[log q(z) - log p(z)] estimated by sampling
        let p = GaussianPosterior::new(vec![0.0], vec![4.0f64.ln()]).unwrap();
        let mut rng = seeded_rng(11);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = reparameterize(&p, &mut rng)[0];
            let log_q = -0.5 * (z * z / 4.0) - 0.5 * 4.0f64.ln();
            let log_p = -0.5 * z * z;
            acc += log_q - log_p;
        }
        assert!((acc / n as f64 - kl_diag_gaussian(&p)).abs() < 0.01);
    }

    #[test]
    fn schedule_points() {
        // 4 cycles over 400 steps: period 100
        assert_eq!(beta_schedule(0, 400, 4, 0.5).unwrap(), 0.0);
        assert_eq!(beta_schedule(25, 400, 4, 0.5).unwrap(), 0.5);
        assert_eq!(beta_schedule(75, 400, 4, 0.5).unwrap(), 1.0);
        assert_eq!(beta_schedule(200, 400, 4, 0.5).unwrap(), 0.0);
        assert_eq!(beta_schedule(10_000, 400, 4, 0.5).unwrap(), beta_schedule(399, 400, 4, 0.5).unwrap());
        assert!(beta_schedule(0, 400, 0, 0.5).is_err());
        assert!(beta_schedule(0, 400, 1, 0.0).is_err());
    }

    #[test]
    fn threshold_term() {
        assert_eq!(thresholded_kl(0.3, 1.0, 1.0), 1.0);
        assert_eq!(thresholded_kl(2.5, 0.5, 1.0), 1.25);
    }

    #[test]
    fn reparameterize_at_clamp_floor() {
        let p = GaussianPosterior::new(vec![3.0; 8], vec![-1e9; 8]).unwrap();
        assert!(p.log_var.iter().all(|&v| v == LOG_VAR_MIN));
        let mut rng = seeded_rng(5);
        let z = reparameterize(&p, &mut rng);
        let mut rng = seeded_rng(5);
        let eps = standard_normal_vec(&mut rng, 8);
        for (zi, e) in z.iter().zip(eps) {
            assert!((zi - 3.0).abs() <= (-10.0f64).exp() * e.abs() + 1e-15);
        }
    }

    #[test]
    fn reparameterize_mean() {
        let p = GaussianPosterior::new(vec![1.5, -2.0], vec![0.0, 1.0]).unwrap();
        let mut rng = seeded_rng(3);
        let n = 100_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let z = reparameterize(&p, &mut rng);
            acc[0] += z[0];
            acc[1] += z[1];
        }
        for (i, a) in acc.iter().enumerate() {
            let sigma = (0.5 * p.log_var[i]).exp();
            assert!((a / n as f64 - p.mu[i]).abs() <= 3.0 * sigma / (n as f64).sqrt());
        }
        let mut r1 = seeded_rng(9);
        let mut r2 = seeded_rng(9);
        assert_eq!(reparameterize(&p, &mut r1), reparameterize(&p, &mut r2));
    }

    #[test]
    fn config_validation() {
        assert!(VaeConfig::default().validate().is_ok());
        let bad = VaeConfig { embed_dim: 30, ..VaeConfig::default() };
        assert!(bad.validate().is_err());
        let bad = VaeConfig { kl_threshold: -1.0, ..VaeConfig::default() };
        assert!(bad.validate().is_err());
        assert!(VaeConfig::full_scale().validate().is_ok());
        assert_eq!(VaeConfig::full_scale().memory_width(), 128 * 32 * 32);
    }
}
