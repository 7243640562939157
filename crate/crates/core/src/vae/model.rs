use std::path::Path;

use rand::Rng;
use serde_json::json;

use super::{Bottleneck, GaussianPosterior, VaeConfig, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::checkpoint::Checkpoint;
use crate::nn::{init_linear, linear, normal_tensor, seeded_rng, standard_normal_vec, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{Vocab, BOS, EOS, PAD};
use crate::vq::{quantize_on_tape, vq_loss_on_tape, Codebook};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
pub(crate) const CHECKPOINT_KIND: &str = "vae";

/// Per decoder layer and head, one key and one value vector: shape
/// `(layers, heads, 2, head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    layers: usize,
    heads: usize,
    head_dim: usize,
    data: Vec<f64>,
}

impl MemoryBank {
    pub fn shape(&self) -> [usize; 4] {
        [self.layers, self.heads, 2, self.head_dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn offset(&self, layer: usize, head: usize, slot: usize) -> usize {
        ((layer * self.heads + head) * 2 + slot) * self.head_dim
    }

    pub fn key(&self, layer: usize, head: usize) -> &[f64] {
        let o = self.offset(layer, head, 0);
        &self.data[o..o + self.head_dim]
    }

    pub fn value(&self, layer: usize, head: usize) -> &[f64] {
        let o = self.offset(layer, head, 1);
        &self.data[o..o + self.head_dim]
    }
}

/// Teacher-forced decoder output for one sequence.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// `[positions, vocab]`.
    pub logits: Tensor,
    /// One `[heads, positions, keys]` attention matrix per layer.
    pub attention: Vec<Tensor>,
}

/// Loss components as plain values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    /// Raw (unthresholded) KL, or 0 for the VQ bottleneck.
    pub kl: f64,
    pub codebook: f64,
    pub commitment: f64,
}

pub(crate) struct LossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Option<Var>,
    pub vq: Option<(Var, Var)>,
}

/// Padded batch of token sequences.
struct Padded {
    ids: Vec<usize>,
    lens: Vec<usize>,
    width: usize,
}

fn pad(seqs: &[&[usize]]) -> Padded {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(seqs.len() * width);
    for s in seqs {
        ids.extend_from_slice(s);
        ids.extend(std::iter::repeat_n(PAD, width - s.len()));
    }
    Padded { ids, lens: seqs.iter().map(|s| s.len()).collect(), width }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    config: VaeConfig,
    vocab: Vocab,
    params: ParamStore,
}

impl VaeModel {
    /// Fresh model; `config.vocab_size` is taken from `vocab`.
    pub fn new(mut config: VaeConfig, vocab: Vocab) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let params = Self::init_params(&config)?;
        Ok(VaeModel { config, vocab, params })
    }

    fn init_params(c: &VaeConfig) -> Result<ParamStore> {
        let mut rng = seeded_rng(c.seed);
        let mut p = ParamStore::new();
        let (e, v) = (c.embed_dim, c.vocab_size);
        for side in ["enc", "dec"] {
            p.insert(format!("{side}.tok"), normal_tensor(&mut rng, &[v, e], 0.1));
            p.insert(format!("{side}.pos"), normal_tensor(&mut rng, &[c.max_len, e], 0.1));
            for l in 0..c.n_layers {
                let pre = format!("{side}.l{l}");
                for ln in ["ln1", "ln2"] {
                    p.insert(format!("{pre}.{ln}.g"), Tensor::full(&[e], 1.0));
                    p.insert(format!("{pre}.{ln}.b"), Tensor::zeros(&[e]));
                }
                for proj in ["q", "k", "v", "o"] {
                    init_linear(&mut p, &mut rng, &format!("{pre}.attn.{proj}"), e, e);
                }
                init_linear(&mut p, &mut rng, &format!("{pre}.ff1"), e, c.ff_dim);
                init_linear(&mut p, &mut rng, &format!("{pre}.ff2"), c.ff_dim, e);
            }
            p.insert(format!("{side}.ln_f.g"), Tensor::full(&[e], 1.0));
            p.insert(format!("{side}.ln_f.b"), Tensor::zeros(&[e]));
        }
        init_linear(&mut p, &mut rng, "lat.mu", e, c.latent_dim);
        init_linear(&mut p, &mut rng, "lat.logvar", e, c.latent_dim);
        init_linear(&mut p, &mut rng, "mem", c.latent_dim, c.memory_width());
        init_linear(&mut p, &mut rng, "dec.head", e, v);
        if c.bottleneck == Bottleneck::Vq {
            let book = Codebook::new(c.codebook_size, c.latent_dim, c.commitment, rng.random())?;
            p.insert("vq.codebook", book.entries().clone());
        }
        Ok(p)
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Parameters inside the decoder's transformer layers.
    pub fn is_decoder_hidden(name: &str) -> bool {
        name.starts_with("dec.l")
    }

    /// Decoder input embeddings, final norm and output head.
    pub fn is_decoder_io(name: &str) -> bool {
        name.starts_with("dec.") && !Self::is_decoder_hidden(name)
    }

    /// Input embedding table of the encoder (used as the word embedder for
    /// mover distances).
    pub fn token_embeddings(&self) -> &Tensor {
        self.params.get("enc.tok").expect("encoder embedding exists")
    }

    pub(crate) fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape, |_| false)
    }

    fn check_len(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::data("empty token sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::data(format!("sequence of {} tokens exceeds max_len {}", ids.len(), self.config.max_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::data(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    // ---- graph builders ---------------------------------------------------

    fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.mul(n, p.get(&format!("{prefix}.g")))?;
        Ok(tape.add(g, p.get(&format!("{prefix}.b")))?)
    }

    fn embed(&self, tape: &mut Tape, p: &Bound, side: &str, batch: &Padded) -> Result<Var> {
        let (b, t, e) = (batch.lens.len(), batch.width, self.config.embed_dim);
        let tok = tape.embedding(p.get(&format!("{side}.tok")), &batch.ids)?;
        let tok = tape.reshape(tok, &[b, t, e])?;
        let pos = tape.narrow(p.get(&format!("{side}.pos")), 0, 0, t)?;
        Ok(tape.add(tok, pos)?)
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, b: usize, t: usize) -> Result<Var> {
        let (h, d) = (self.config.n_heads, self.config.head_dim);
        let x = tape.reshape(x, &[b, t, h, d])?;
        Ok(tape.permute(x, &[0, 2, 1, 3])?)
    }

    /// Self-attention over `x[B, T, E]`; `memory` holds `[B, H, 1, D]` key
    /// and value slots prepended to the sequence keys.
    fn attention(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var, mask: &Tensor, memory: Option<(Var, Var)>) -> Result<(Var, Var)> {
        let (b, t) = (tape.shape(x)[0], tape.shape(x)[1]);
        let q = linear(tape, p, &format!("{prefix}.q"), x)?;
        let k = linear(tape, p, &format!("{prefix}.k"), x)?;
        let v = linear(tape, p, &format!("{prefix}.v"), x)?;
        let q = self.split_heads(tape, q, b, t)?;
        let mut k = self.split_heads(tape, k, b, t)?;
        let mut v = self.split_heads(tape, v, b, t)?;
        if let Some((mk, mv)) = memory {
            k = tape.concat(&[mk, k], 2)?;
            v = tape.concat(&[mv, v], 2)?;
        }
        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.config.head_dim as f64).sqrt());
        let mask = tape.constant(mask.clone());
        let scores = tape.add(scores, mask)?;
        let weights = tape.softmax(scores);
        let out = tape.bmm(weights, v)?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        let out = tape.reshape(out, &[b, t, self.config.embed_dim])?;
        Ok((linear(tape, p, &format!("{prefix}.o"), out)?, weights))
    }

    fn block(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var, mask: &Tensor, memory: Option<(Var, Var)>) -> Result<(Var, Var)> {
        let h = Self::layer_norm(tape, p, &format!("{prefix}.ln1"), x)?;
        let (a, weights) = self.attention(tape, p, &format!("{prefix}.attn"), h, mask, memory)?;
        let x = tape.add(x, a)?;
        let h = Self::layer_norm(tape, p, &format!("{prefix}.ln2"), x)?;
        let f = linear(tape, p, &format!("{prefix}.ff1"), h)?;
        let f = tape.tanh(f);
        let f = linear(tape, p, &format!("{prefix}.ff2"), f)?;
        Ok((tape.add(x, f)?, weights))
    }

    /// Additive attention mask `[B, H, T, slots + T]`: memory slots are
    /// always visible, padding keys never, and with `causal` a query sees
    /// only keys at or before its own position.
    fn mask(&self, lens: &[usize], width: usize, slots: usize, causal: bool) -> Tensor {
        let h = self.config.n_heads;
        let s = slots + width;
        let mut data = Vec::with_capacity(lens.len() * h * width * s);
        for &len in lens {
            for _ in 0..h {
                for i in 0..width {
                    for key in 0..s {
                        let visible = key < slots || {
                            let j = key - slots;
                            j < len && (!causal || j <= i)
                        };
                        data.push(if visible { 0.0 } else { f64::NEG_INFINITY });
                    }
                }
            }
        }
        Tensor::new(&[lens.len(), h, width, s], data).expect("mask shape")
    }

    /// Posterior parameters `(mu, log_var)`, each `[B, latent]`.
    pub(crate) fn encode_graph(&self, tape: &mut Tape, p: &Bound, seqs: &[&[usize]]) -> Result<(Var, Var)> {
        for s in seqs {
            self.check_len(s)?;
        }
        let batch = pad(seqs);
        let (b, t, e) = (seqs.len(), batch.width, self.config.embed_dim);
        let mut x = self.embed(tape, p, "enc", &batch)?;
        let mask = self.mask(&batch.lens, t, 0, false);
        for l in 0..self.config.n_layers {
            x = self.block(tape, p, &format!("enc.l{l}"), x, &mask, None)?.0;
        }
        let x = Self::layer_norm(tape, p, "enc.ln_f", x)?;
        let mut pool = Vec::with_capacity(b * t * e);
        for &len in &batch.lens {
            for pos in 0..t {
                let w = if pos < len { 1.0 / len as f64 } else { 0.0 };
                pool.extend(std::iter::repeat_n(w, e));
            }
        }
        let pool = tape.constant(Tensor::new(&[b, t, e], pool)?);
        let pooled = tape.mul(x, pool)?;
        let pooled = tape.sum_axis(pooled, 1)?;
        let mu = linear(tape, p, "lat.mu", pooled)?;
        let lv = linear(tape, p, "lat.logvar", pooled)?;
        let lv = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok((mu, lv))
    }

    /// Per layer, the `[B, H, 1, D]` key and value slots projected from `z[B, latent]`.
    pub(crate) fn memory_graph(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Vec<(Var, Var)>> {
        let c = &self.config;
        let b = tape.shape(z)[0];
        let kv = c.kv_slots();
        let m = linear(tape, p, "mem", z)?;
        let m = tape.reshape(m, &[b, c.n_layers, kv, c.n_heads, c.head_dim])?;
        let mut out = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let layer = tape.narrow(m, 1, l, 1)?;
            let key = tape.narrow(layer, 2, 0, 1)?;
            let key = tape.reshape(key, &[b, c.n_heads, 1, c.head_dim])?;
            let value = if kv == 2 {
                let v = tape.narrow(layer, 2, 1, 1)?;
                tape.reshape(v, &[b, c.n_heads, 1, c.head_dim])?
            } else {
                key
            };
            out.push((key, value));
        }
        Ok(out)
    }

    /// Logits `[B, T, V]` and per-layer attention weights.
    pub(crate) fn decoder_graph(
        &self,
        tape: &mut Tape,
        p: &Bound,
        inputs: &[&[usize]],
        memory: Option<&[(Var, Var)]>,
    ) -> Result<(Var, Vec<Var>)> {
        for s in inputs {
            self.check_len(s)?;
        }
        let batch = pad(inputs);
        let slots = usize::from(memory.is_some());
        let mask = self.mask(&batch.lens, batch.width, slots, true);
        let mut x = self.embed(tape, p, "dec", &batch)?;
        let mut attention = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let mem = memory.map(|m| m[l]);
            let (y, w) = self.block(tape, p, &format!("dec.l{l}"), x, &mask, mem)?;
            x = y;
            attention.push(w);
        }
        let x = Self::layer_norm(tape, p, "dec.ln_f", x)?;
        Ok((linear(tape, p, "dec.head", x)?, attention))
    }

    /// Mean token cross-entropy of teacher-forced next-token prediction for
    /// full `[BOS .. EOS]` sequences.
    pub(crate) fn reconstruction_graph(&self, tape: &mut Tape, p: &Bound, seqs: &[&[usize]], memory: &[(Var, Var)]) -> Result<Var> {
        let mut inputs = Vec::with_capacity(seqs.len());
        let width = seqs.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0);
        let mut targets = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            if s.len() < 2 {
                return Err(Error::data("sequence needs at least BOS and EOS"));
            }
            inputs.push(&s[..s.len() - 1]);
            targets.extend(s[1..].iter().map(|&t| Some(t)));
            targets.extend(std::iter::repeat_n(None, width - (s.len() - 1)));
        }
        let (logits, _) = self.decoder_graph(tape, p, &inputs, Some(memory))?;
        Ok(tape.cross_entropy(logits, &targets)?)
    }

    /// The full objective on a batch. `noise` is the `[B, latent]`
    /// reparameterisation noise (ignored by the VQ bottleneck).
    pub(crate) fn loss_graph(
        &self,
        tape: &mut Tape,
        p: &Bound,
        seqs: &[&[usize]],
        beta: f64,
        threshold: f64,
        noise: &Tensor,
    ) -> Result<LossVars> {
        let (mu, lv) = self.encode_graph(tape, p, seqs)?;
        match self.config.bottleneck {
            Bottleneck::Gaussian => {
                let half = tape.scale(lv, 0.5);
                let std = tape.exp(half);
                let eps = tape.constant(noise.clone());
                let spread = tape.mul(std, eps)?;
                let z = tape.add(mu, spread)?;

                let mu2 = tape.square(mu);
                let var = tape.exp(lv);
                let k = tape.add(mu2, var)?;
                let k = tape.sub(k, lv)?;
                let k = tape.add_scalar(k, -1.0);
                let k = tape.sum(k);
                let kl = tape.scale(k, 0.5 / seqs.len() as f64);

                let memory = self.memory_graph(tape, p, z)?;
                let ce = self.reconstruction_graph(tape, p, seqs, &memory)?;
                let weighted = super::thresholded_kl_graph(tape, kl, beta, threshold);
                let total = tape.add(ce, weighted)?;
                Ok(LossVars { total, reconstruction: ce, kl: Some(kl), vq: None })
            }
            Bottleneck::Vq => {
                let book = p.get("vq.codebook");
                let (zq, idx) = quantize_on_tape(tape, mu, book)?;
                let (cb, commit) = vq_loss_on_tape(tape, mu, book, &idx, self.config.commitment)?;
                let memory = self.memory_graph(tape, p, zq)?;
                let ce = self.reconstruction_graph(tape, p, seqs, &memory)?;
                let total = tape.add(ce, cb)?;
                let total = tape.add(total, commit)?;
                Ok(LossVars { total, reconstruction: ce, kl: None, vq: Some((cb, commit)) })
            }
        }
    }

    pub(crate) fn loss_parts(tape: &Tape, vars: &LossVars) -> LossParts {
        let (codebook, commitment) = vars.vq.map_or((0.0, 0.0), |(a, b)| (tape.value(a).item(), tape.value(b).item()));
        LossParts {
            total: tape.value(vars.total).item(),
            reconstruction: tape.value(vars.reconstruction).item(),
            kl: vars.kl.map_or(0.0, |k| tape.value(k).item()),
            codebook,
            commitment,
        }
    }

    // ---- public evaluation API ----------------------------------------------

    /// Posterior for one token sequence (no sampling).
    pub fn encode(&self, ids: &[usize]) -> Result<GaussianPosterior> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let (mu, lv) = self.encode_graph(&mut tape, &p, &[ids])?;
        GaussianPosterior::new(tape.value(mu).data().to_vec(), tape.value(lv).data().to_vec())
    }

    pub fn encode_text(&self, text: &str) -> Result<GaussianPosterior> {
        self.encode(&self.vocab.encode(text))
    }

    /// [`Self::latent_of`] after clipping the token sequence to `max_len`
    /// (keeping the closing EOS).
    pub fn latent_of_clipped(&self, text: &str) -> Result<Vec<f64>> {
        let mut ids = self.vocab.encode(text);
        if ids.len() > self.config.max_len {
            ids.truncate(self.config.max_len - 1);
            ids.push(EOS);
        }
        self.latent_of_ids(&ids)
    }

    /// Deterministic latent of a sentence: the posterior mean, or its
    /// nearest code for the VQ bottleneck.
    pub fn latent_of(&self, text: &str) -> Result<Vec<f64>> {
        self.latent_of_ids(&self.vocab.encode(text))
    }

    fn latent_of_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mu = self.encode(ids)?.mu;
        match self.config.bottleneck {
            Bottleneck::Gaussian => Ok(mu),
            Bottleneck::Vq => {
                let book = Codebook::from_entries(self.params.get("vq.codebook")?.clone(), self.config.commitment)?;
                Ok(book.quantize(&mu)?.0)
            }
        }
    }

    /// Noisy latent sample `μ + σ ⊙ ε`.
    pub fn sample_latent(&self, text: &str, rng: &mut impl Rng) -> Result<Vec<f64>> {
        Ok(super::reparameterize(&self.encode_text(text)?, rng))
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.latent_dim {
            return Err(Error::data(format!("latent of dimension {} for model with latent_dim {}", z.len(), self.config.latent_dim)));
        }
        Ok(())
    }

    pub fn memory_project(&self, z: &[f64]) -> Result<MemoryBank> {
        self.check_latent(z)?;
        let c = &self.config;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let zv = tape.constant(Tensor::new(&[1, c.latent_dim], z.to_vec())?);
        let slots = self.memory_graph(&mut tape, &p, zv)?;
        let mut data = Vec::with_capacity(c.n_layers * c.n_heads * 2 * c.head_dim);
        for (k, v) in slots {
            let (k, v) = (tape.value(k).data(), tape.value(v).data());
            for h in 0..c.n_heads {
                data.extend_from_slice(&k[h * c.head_dim..(h + 1) * c.head_dim]);
                data.extend_from_slice(&v[h * c.head_dim..(h + 1) * c.head_dim]);
            }
        }
        Ok(MemoryBank { layers: c.n_layers, heads: c.n_heads, head_dim: c.head_dim, data })
    }

    fn bank_vars(&self, tape: &mut Tape, bank: &MemoryBank) -> Result<Vec<(Var, Var)>> {
        let c = &self.config;
        if bank.shape() != [c.n_layers, c.n_heads, 2, c.head_dim] {
            return Err(Error::data(format!("memory bank of shape {:?} does not match the model", bank.shape())));
        }
        let mut out = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let mut keys = Vec::with_capacity(c.n_heads * c.head_dim);
            let mut values = Vec::with_capacity(c.n_heads * c.head_dim);
            for h in 0..c.n_heads {
                keys.extend_from_slice(bank.key(l, h));
                values.extend_from_slice(bank.value(l, h));
            }
            let k = tape.constant(Tensor::new(&[1, c.n_heads, 1, c.head_dim], keys)?);
            let v = tape.constant(Tensor::new(&[1, c.n_heads, 1, c.head_dim], values)?);
            out.push((k, v));
        }
        Ok(out)
    }

    fn decode_with(&self, ids: &[usize], bank: Option<&MemoryBank>) -> Result<DecodeOutput> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let memory = bank.map(|b| self.bank_vars(&mut tape, b)).transpose()?;
        let (logits, attn) = self.decoder_graph(&mut tape, &p, &[ids], memory.as_deref())?;
        let v = self.config.vocab_size;
        let logits = tape.value(logits).reshaped(&[ids.len(), v])?;
        let attention = attn
            .into_iter()
            .map(|w| {
                let s = tape.shape(w);
                tape.value(w).reshaped(&s[1..])
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(DecodeOutput { logits, attention })
    }

    /// Next-token logits at every position of `ids` with the memory bank
    /// injected into every layer.
    pub fn decode_teacher_forced(&self, ids: &[usize], memory: &MemoryBank) -> Result<DecodeOutput> {
        self.decode_with(ids, Some(memory))
    }

    /// The same decoder with no memory slot at all.
    pub fn decode_unconditioned(&self, ids: &[usize]) -> Result<DecodeOutput> {
        self.decode_with(ids, None)
    }

    /// Greedy decoding from BOS until EOS or `max_len` generated tokens.
    /// The returned ids exclude BOS and include EOS when it was produced.
    pub fn generate(&self, z: &[f64], max_len: usize) -> Result<Vec<usize>> {
        let bank = self.memory_project(z)?;
        let limit = max_len.min(self.config.max_len);
        let mut ids = vec![BOS];
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let memory = self.bank_vars(&mut tape, &bank)?;
        let v = self.config.vocab_size;
        for _ in 0..limit {
            let (logits, _) = self.decoder_graph(&mut tape, &p, &[&ids], Some(&memory))?;
            let data = tape.value(logits).data();
            let last = &data[data.len() - v..];
            let next = last.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best }).0;
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(ids[1..].to_vec())
    }

    pub fn generate_text(&self, z: &[f64]) -> Result<String> {
        let ids = self.generate(z, self.config.max_len)?;
        Ok(self.vocab.decode(&ids))
    }

    /// Encode (deterministic latent) and greedily decode.
    pub fn reconstruct(&self, text: &str) -> Result<String> {
        self.generate_text(&self.latent_of(text)?)
    }

    /// Objective values on a batch of `[BOS .. EOS]` sequences, drawing
    /// reparameterisation noise from `rng`.
    pub fn loss(&self, batch: &[Vec<usize>], beta: f64, threshold: f64, rng: &mut impl Rng) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::data("empty batch"));
        }
        let refs: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
        let noise = Tensor::new(&[batch.len(), self.config.latent_dim], standard_normal_vec(rng, batch.len() * self.config.latent_dim))?;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let vars = self.loss_graph(&mut tape, &p, &refs, beta, threshold, &noise)?;
        Ok(Self::loss_parts(&tape, &vars))
    }

    /// Gradient of the objective with respect to one named parameter,
    /// together with a closure-friendly evaluator for finite differences.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with_param(
        &self,
        tape: &mut Tape,
        name: &str,
        value: Var,
        batch: &[Vec<usize>],
        beta: f64,
        threshold: f64,
        noise: &Tensor,
    ) -> Result<Var> {
        let mut p = self.bind_frozen(tape);
        p.set(name, value);
        let refs: Vec<&[usize]> = batch.iter().map(Vec::as_slice).collect();
        Ok(self.loss_graph(tape, &p, &refs, beta, threshold, noise)?.total)
    }

    /// Mean token cross-entropy of `seq` decoded from latent `z`.
    pub fn reconstruction_loss_from(&self, seq: &[usize], z: &[f64]) -> Result<f64> {
        self.check_latent(z)?;
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let zv = tape.constant(Tensor::new(&[1, z.len()], z.to_vec())?);
        let memory = self.memory_graph(&mut tape, &p, zv)?;
        let ce = self.reconstruction_graph(&mut tape, &p, &[seq], &memory)?;
        Ok(tape.value(ce).item())
    }

    // ---- persistence --------------------------------------------------------

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, json!({ "vocab": self.vocab }), &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: VaeConfig = ck.config()?;
        let vocab: Vocab = ck.meta("vocab")?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Checkpoint(format!("vocabulary has {} tokens but config says {}", vocab.len(), config.vocab_size)));
        }
        config.validate()?;
        let template = Self::init_params(&config)?;
        let params = ck.params_like(&template)?;
        Ok(VaeModel { config, vocab, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
