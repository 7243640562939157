use rand::seq::SliceRandom;
use serde::Serialize;

use super::{beta_schedule, VaeConfig, VaeModel};
use crate::nn::{seeded_rng, standard_normal_vec, Optimizer};
use crate::tensor::{Tape, Tensor};
use crate::text::{Corpus, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// β used on the last step of the epoch.
    pub beta: f64,
    /// Means over the epoch's batches.
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// Largest absolute gradient seen on any frozen parameter.
    pub frozen_grad_max: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: VaeModel,
    pub history: Vec<EpochStats>,
}

/// Builds the vocabulary from `corpus` and trains a fresh model.
pub fn train_vae(corpus: &Corpus, config: &VaeConfig) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::data("cannot train on an empty corpus"));
    }
    let vocab = Vocab::build(&corpus.sentences, config.min_count)?;
    let model = VaeModel::new(config.clone(), vocab)?;
    continue_training(model, corpus)
}

/// Trains `model` further on `corpus` using the model's own config.
pub fn continue_training(mut model: VaeModel, corpus: &Corpus) -> Result<TrainReport> {
    let config = model.config().clone();
    let data = corpus.encode(model.vocab());
    if data.is_empty() {
        return Err(Error::data("cannot train on an empty corpus"));
    }
    let batch_size = if config.batch_size == 0 { data.len() } else { config.batch_size.min(data.len()) };
    let per_epoch = data.len().div_ceil(batch_size);
    let total_steps = (per_epoch * config.epochs).max(1);
    let mut rng = seeded_rng(config.seed.wrapping_add(1));
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let trainable = |name: &str| {
            if !config.freeze_decoder_hidden {
                return true;
            }
            if VaeModel::is_decoder_hidden(name) {
                return false;
            }
            !VaeModel::is_decoder_io(name) || epoch < config.embed_tune_epochs
        };
        let mut sums = [0.0; 5];
        let mut frozen_grad_max: f64 = 0.0;
        let mut beta = 0.0;
        for chunk in order.chunks(batch_size) {
            beta = match config.fixed_beta {
                Some(b) => b,
                None => beta_schedule(step, total_steps, config.beta_cycles, config.ramp_fraction)?,
            };
            let batch: Vec<&[usize]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let noise = Tensor::new(&[batch.len(), config.latent_dim], standard_normal_vec(&mut rng, batch.len() * config.latent_dim))?;
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, trainable);
            let vars = model.loss_graph(&mut tape, &bound, &batch, beta, config.kl_threshold, &noise)?;
            let parts = VaeModel::loss_parts(&tape, &vars);
            if !parts.total.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {epoch}, step {step} (reconstruction {}, kl {})",
                    parts.reconstruction, parts.kl
                )));
            }
            tape.backward(vars.total)?;
            for name in model.params().names().filter(|n| !trainable(n)) {
                if let Some(g) = tape.grad(bound.get(name)) {
                    frozen_grad_max = g.iter().fold(frozen_grad_max, |m, v| m.max(v.abs()));
                }
            }
            let grads = bound.gradients(&tape);
            if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::numeric(format!("non-finite gradient for `{name}` at epoch {epoch}, step {step}")));
            }
            opt.step(model.params_mut(), &grads)?;
            for (s, v) in sums.iter_mut().zip([parts.total, parts.reconstruction, parts.kl, parts.codebook, parts.commitment]) {
                *s += v;
            }
            step += 1;
        }
        let n = per_epoch as f64;
        history.push(EpochStats {
            epoch,
            beta,
            total: sums[0] / n,
            reconstruction: sums[1] / n,
            kl: sums[2] / n,
            codebook: sums[3] / n,
            commitment: sums[4] / n,
            frozen_grad_max,
        });
    }
    Ok(TrainReport { model, history })
}
