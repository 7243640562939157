//! Two-premise inference in latent space: a perceptron maps
//! `concat(z_p1, z_p2)` to a conclusion latent that the VAE decoder turns
//! into text.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::nn::{init_linear, linear, seeded_rng, standard_normal_vec, Optimizer, OptimizerKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::vae::VaeModel;
use crate::{Error, Result};

const CHECKPOINT_KIND: &str = "inference";

/// Premise, premise, conclusion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub premise1: String,
    pub premise2: String,
    pub conclusion: String,
}

impl Triple {
    pub fn new(p1: impl Into<String>, p2: impl Into<String>, c: impl Into<String>) -> Self {
        Triple { premise1: p1.into(), premise2: p2.into(), conclusion: c.into() }
    }
}

/// `premise1<TAB>premise2<TAB>conclusion` per line.
pub fn parse_triples_tsv(text: &str) -> Result<Vec<Triple>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cells: Vec<&str> = l.split('\t').collect();
            if cells.len() != 3 {
                return Err(Error::data(format!("triples line {} has {} fields, expected 3", i + 1, cells.len())));
            }
            Ok(Triple::new(cells[0].trim(), cells[1].trim(), cells[2].trim()))
        })
        .collect()
}

/// Parameters of the VAE that inference training may change.
pub fn is_tunable_vae_param(name: &str) -> bool {
    name.starts_with("lat.mu.") || name.starts_with("lat.logvar.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceHead {
    latent_dim: usize,
    params: ParamStore,
}

impl InferenceHead {
    /// `2L → 2L → 2L → L` with tanh; the output layer starts at zero.
    pub fn new(latent_dim: usize, seed: u64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::config("latent_dim", "must be positive"));
        }
        let mut rng = seeded_rng(seed);
        let w = 2 * latent_dim;
        let mut params = ParamStore::new();
        init_linear(&mut params, &mut rng, "inf.l1", w, w);
        init_linear(&mut params, &mut rng, "inf.l2", w, w);
        params.insert("inf.l3.w", Tensor::zeros(&[w, latent_dim]));
        params.insert("inf.l3.b", Tensor::zeros(&[latent_dim]));
        Ok(InferenceHead { latent_dim, params })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn graph(&self, tape: &mut Tape, p: &crate::nn::Bound, z1: Var, z2: Var) -> Result<Var> {
        let x = tape.concat(&[z1, z2], 1)?;
        let h = linear(tape, p, "inf.l1", x)?;
        let h = tape.tanh(h);
        let h = linear(tape, p, "inf.l2", h)?;
        let h = tape.tanh(h);
        linear(tape, p, "inf.l3", h)
    }

    /// `z_c = head(concat(z_p1, z_p2))`.
    pub fn infer(&self, z1: &[f64], z2: &[f64]) -> Result<Vec<f64>> {
        if z1.len() != self.latent_dim || z2.len() != self.latent_dim {
            return Err(Error::data(format!(
                "premise latents of dimension {} and {} for a head of dimension {}",
                z1.len(),
                z2.len(),
                self.latent_dim
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let a = tape.constant(Tensor::new(&[1, self.latent_dim], z1.to_vec())?);
        let b = tape.constant(Tensor::new(&[1, self.latent_dim], z2.to_vec())?);
        let out = self.graph(&mut tape, &p, a, b)?;
        Ok(tape.value(out).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &serde_json::json!({ "latent_dim": self.latent_dim }), serde_json::Value::Null, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        #[derive(Deserialize)]
        struct Cfg {
            latent_dim: usize,
        }
        let cfg: Cfg = ck.config()?;
        let template = Self::new(cfg.latent_dim, 0)?;
        Ok(InferenceHead { latent_dim: cfg.latent_dim, params: ck.params_like(&template.params)? })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { epochs: 50, learning_rate: 1e-3, optimizer: OptimizerKind::Adam, batch_size: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceEpoch {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub latent: f64,
}

/// Trains the head together with the VAE's posterior projections. The
/// objective is teacher-forced conclusion cross-entropy from the inferred
/// latent plus the squared error to the (stop-gradient) conclusion mean.
/// Premise latents are reparameterised samples.
pub fn train_inference(
    model: &mut VaeModel,
    head: &mut InferenceHead,
    triples: &[Triple],
    config: &InferenceConfig,
) -> Result<Vec<InferenceEpoch>> {
    if triples.is_empty() {
        return Err(Error::data("no training triples"));
    }
    if head.latent_dim != model.latent_dim() {
        return Err(Error::data(format!("head of dimension {} for a model of latent_dim {}", head.latent_dim, model.latent_dim())));
    }
    let vocab = model.vocab().clone();
    let enc: Vec<[Vec<usize>; 3]> =
        triples.iter().map(|t| [vocab.encode(&t.premise1), vocab.encode(&t.premise2), vocab.encode(&t.conclusion)]).collect();
    let l = model.latent_dim();
    let batch_size = if config.batch_size == 0 { enc.len() } else { config.batch_size.min(enc.len()) };
    let mut rng = seeded_rng(config.seed);
    let mut vae_opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut head_opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut sums = [0.0; 3];
        let mut batches = 0;
        for chunk in enc.chunks(batch_size) {
            let n = chunk.len();
            let mut tape = Tape::new();
            let vp = model.params().bind(&mut tape, is_tunable_vae_param);
            let hp = head.params.bind(&mut tape, |_| true);
            let mut premise = |tape: &mut Tape, idx: usize| -> Result<Var> {
                let seqs: Vec<&[usize]> = chunk.iter().map(|t| t[idx].as_slice()).collect();
                let (mu, lv) = model.encode_graph(tape, &vp, &seqs)?;
                let half = tape.scale(lv, 0.5);
                let std = tape.exp(half);
                let eps = tape.constant(Tensor::new(&[n, l], standard_normal_vec(&mut rng, n * l))?);
                let spread = tape.mul(std, eps)?;
                Ok(tape.add(mu, spread)?)
            };
            let z1 = premise(&mut tape, 0)?;
            let z2 = premise(&mut tape, 1)?;
            let zc = head.graph(&mut tape, &hp, z1, z2)?;
            let conclusions: Vec<&[usize]> = chunk.iter().map(|t| t[2].as_slice()).collect();
            let (mu_c, _) = model.encode_graph(&mut tape, &vp, &conclusions)?;
            let target = tape.stop_gradient(mu_c);
            let diff = tape.sub(zc, target)?;
            let sq = tape.square(diff);
            let latent = tape.mean(sq);
            let memory = model.memory_graph(&mut tape, &vp, zc)?;
            let ce = model.reconstruction_graph(&mut tape, &vp, &conclusions, &memory)?;
            let total = tape.add(ce, latent)?;
            let value = tape.value(total).item();
            if !value.is_finite() {
                return Err(Error::numeric(format!("inference loss became {value} at epoch {epoch}")));
            }
            sums[0] += value;
            sums[1] += tape.value(ce).item();
            sums[2] += tape.value(latent).item();
            batches += 1;
            tape.backward(total)?;
            let vg = vp.gradients(&tape);
            let hg = hp.gradients(&tape);
            vae_opt.step(model.params_mut(), &vg)?;
            head_opt.step(&mut head.params, &hg)?;
        }
        let b = batches as f64;
        history.push(InferenceEpoch { epoch, total: sums[0] / b, reconstruction: sums[1] / b, latent: sums[2] / b });
    }
    Ok(history)
}

/// Conclusion latent from the premises' posterior means.
pub fn infer_from_text(model: &VaeModel, head: &InferenceHead, p1: &str, p2: &str) -> Result<Vec<f64>> {
    head.infer(&model.latent_of(p1)?, &model.latent_of(p2)?)
}

/// Greedy conclusion text.
pub fn generate_conclusion(model: &VaeModel, head: &InferenceHead, p1: &str, p2: &str) -> Result<String> {
    model.generate_text(&infer_from_text(model, head, p1, p2)?)
}

/// Mean over triples of `‖z_c − μ_conclusion‖² / L`.
pub fn latent_mse(model: &VaeModel, head: &InferenceHead, triples: &[Triple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::data("no triples"));
    }
    let mut acc = 0.0;
    for t in triples {
        let zc = infer_from_text(model, head, &t.premise1, &t.premise2)?;
        let mu = model.latent_of(&t.conclusion)?;
        acc += zc.iter().zip(&mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / mu.len() as f64;
    }
    Ok(acc / triples.len() as f64)
}

/// Exponentiated token-averaged cross-entropy of the gold conclusions under
/// the inferred latents. Accumulated in bits so that uniform predictions over
/// a power-of-two vocabulary come out exact.
pub fn perplexity(model: &VaeModel, head: &InferenceHead, triples: &[Triple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::data("perplexity of an empty set"));
    }
    let mut bits = 0.0;
    let mut tokens = 0usize;
    for t in triples {
        let zc = infer_from_text(model, head, &t.premise1, &t.premise2)?;
        let ids = model.vocab().encode(&t.conclusion);
        let bank = model.memory_project(&zc)?;
        let out = model.decode_teacher_forced(&ids[..ids.len() - 1], &bank)?;
        let v = out.logits.shape()[1];
        for (row, &target) in out.logits.data().chunks(v).zip(&ids[1..]) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            bits += z.log2() - (row[target] - m) * std::f64::consts::LOG2_E;
            tokens += 1;
        }
    }
    Ok((bits / tokens as f64).exp2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocab;
    use crate::vae::VaeConfig;

    fn model() -> VaeModel {
        let vocab = Vocab::build(&["a b c d e f g h i j k l"], 1).unwrap();
        let cfg =
            VaeConfig { latent_dim: 4, embed_dim: 8, n_heads: 2, head_dim: 4, ff_dim: 8, n_layers: 1, max_len: 8, ..VaeConfig::default() };
        VaeModel::new(cfg, vocab).unwrap()
    }

    #[test]
    fn zero_head_outputs_zero() {
        let h = InferenceHead::new(4, 1).unwrap();
        let z = h.infer(&[1.0, 2.0, 3.0, 4.0], &[-1.0, 0.5, 0.0, 2.0]).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        assert!(h.infer(&[1.0], &[1.0; 4]).is_err());
    }

    #[test]
    fn uniform_logits_give_vocab_perplexity() {
        let mut m = model();
        assert_eq!(m.vocab().len(), 16);
        for name in ["dec.head.w", "dec.head.b"] {
            let t = m.params_mut().get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let h = InferenceHead::new(4, 0).unwrap();
        let triples = vec![Triple::new("a b", "c", "d e f"), Triple::new("g", "h i", "j")];
        assert_eq!(perplexity(&m, &h, &triples).unwrap(), 16.0);
    }

    #[test]
    fn training_touches_only_tunable_parameters() {
        let mut m = model();
        let before = m.clone();
        let mut h = InferenceHead::new(4, 2).unwrap();
        let triples = vec![Triple::new("a b", "c", "a b"), Triple::new("d", "e f", "d")];
        let cfg = InferenceConfig { epochs: 3, learning_rate: 0.01, ..InferenceConfig::default() };
        let hist = train_inference(&mut m, &mut h, &triples, &cfg).unwrap();
        assert_eq!(hist.len(), 3);
        for (name, t) in before.params().iter() {
            let after = m.params().get(name).unwrap();
            if is_tunable_vae_param(name) {
                assert_ne!(t, after, "{name} did not train");
            } else {
                assert_eq!(t, after, "{name} changed");
            }
        }
    }

    #[test]
    fn perplexity_matches_reconstruction_loss() {
        let m = model();
        let h = InferenceHead::new(4, 0).unwrap();
        let t = Triple::new("a", "b", "c d e");
        let ids = m.vocab().encode("c d e");
        let ce = m.reconstruction_loss_from(&ids, &[0.0; 4]).unwrap();
        let ppl = perplexity(&m, &h, &[t]).unwrap();
        assert!((ppl.ln() - ce).abs() < 1e-12, "{ppl} {ce}");
    }

    #[test]
    fn triples_tsv() {
        let t = parse_triples_tsv("a b\tc\td\n\ne\tf\tg h\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1], Triple::new("e", "f", "g h"));
        assert!(parse_triples_tsv("a\tb\n").is_err());
    }
}
