//! Acceptance suite. Runs every criterion in sequence (timing budgets are
//! measured on an otherwise idle process), prints one line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use latentlab::eval::reconstruction_report;
use latentlab::flow::{self, Direction, FlowConfig, FlowStack, InnTrainConfig};
use latentlab::geometry::{emd, interpolation_smoothness, EmbeddingBag};
use latentlab::inference::{self, InferenceConfig, InferenceHead, Triple};
use latentlab::metrics::{self, copy_of_factors, FactorDataset, MetricsConfig};
use latentlab::nn::{seeded_rng, standard_normal_vec, OptimizerKind};
use latentlab::tensor::{numeric_gradient, Tape, Tensor, Var};
use latentlab::text::{generate_synthetic_corpus, Corpus, GrammarSpec, Vocab};
use latentlab::vae::{self, beta_schedule, train_vae, VaeConfig, VaeModel};
use latentlab::vq::{quantize_on_tape, vq_loss, Codebook, VqAutoencoder, VqTrainConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
type Criterion = (&'static str, fn() -> Check);

const AUTODIFF_REL_TOL: f64 = 1e-6;
const VAE_GRAD_REL_TOL: f64 = 1e-4;
const AUTODIFF_BUDGET: Duration = Duration::from_secs(30);
const FLOW_ROUNDTRIP_TOL: f64 = 1e-9;
const FLOW_LOGDET_TOL: f64 = 1e-5;
const FLOW_BUDGET: Duration = Duration::from_secs(60);
const KL_THRESHOLD: f64 = 1.0;
const RECON_BLEU_MIN: f64 = 0.95;
const RECON_BUDGET: Duration = Duration::from_secs(300);
const MEMORY_LOGIT_DELTA: f64 = 1e-6;
const EMD_TOL: f64 = 1e-9;
const IS_COLLINEAR_TOL: f64 = 1e-9;
const MIG_MIN: f64 = 0.9;
const MODULARITY_MIN: f64 = 0.9;
const ZMINVAR_MAX: f64 = 0.02;
const DCI_D_MIN: f64 = 0.9;
const MIG_INDEPENDENT_MAX: f64 = 0.05;
const ZMINVAR_INDEPENDENT_MIN: f64 = 0.6;
const METRICS_BUDGET: Duration = Duration::from_secs(120);
const VQ_CLUSTER_TOL: f64 = 0.1;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn corpus(sizes: &[usize], seed: u64) -> Corpus {
    generate_synthetic_corpus(&GrammarSpec::with_sizes(sizes).unwrap(), seed).unwrap()
}

fn small_vae_config(latent: usize) -> VaeConfig {
    VaeConfig { latent_dim: latent, embed_dim: 16, n_layers: 1, n_heads: 2, head_dim: 8, ff_dim: 32, max_len: 10, ..VaeConfig::default() }
}

// ---- 1 ---------------------------------------------------------------------

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, standard_normal_vec(rng, n)).unwrap()
}

fn composite_graph(kind: usize, w: Tensor, g: Tensor, targets: Vec<Option<usize>>) -> impl Fn(&mut Tape, Var) -> latentlab::Result<Var> {
    move |t: &mut Tape, x: Var| {
        let wv = t.constant(w.clone());
        let gv = t.constant(g.clone());
        let h = t.matmul(x, wv)?;
        let out = match kind % 3 {
            0 => {
                let n = t.layer_norm(h, 1e-5);
                let n = t.mul(n, gv)?;
                t.cross_entropy(n, &targets)?
            }
            1 => {
                let s = t.softmax(h);
                let s = t.mul(s, gv)?;
                let a = t.tanh(h);
                let z = t.add(s, a)?;
                let z = t.layer_norm(z, 1e-5);
                t.cross_entropy(z, &targets)?
            }
            _ => {
                let s = t.softmax(h);
                let ht = t.transpose(h)?;
                let gram = t.matmul(s, ht)?;
                let gram = t.layer_norm(gram, 1e-5);
                let sq = t.square(gram);
                let r = t.mean(sq);
                let ce = t.cross_entropy(h, &targets)?;
                t.add(r, ce)?
            }
        };
        Ok(out)
    }
}

fn eval_scalar<F>(f: &F, x: Tensor) -> latentlab::Result<f64>
where
    F: Fn(&mut Tape, Var) -> latentlab::Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item())
}

/// Richardson-extrapolated central differences, `O(h⁴)` truncation.
fn richardson_gradient<F>(f: &F, x: &Tensor, h: f64) -> latentlab::Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> latentlab::Result<Var>,
{
    let central = |i: usize, h: f64| -> latentlab::Result<f64> {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        let step = p.data()[i] - m.data()[i];
        Ok((eval_scalar(f, p)? - eval_scalar(f, m)?) / step)
    };
    (0..x.numel()).map(|i| Ok((4.0 * central(i, h / 2.0)? - central(i, h)?) / 3.0)).collect()
}

/// `‖g_ad − g_fd‖∞ / ‖g_fd‖∞` for the scalar graph `f` at `x`.
fn normwise_gap<F>(f: F, x: &Tensor) -> latentlab::Result<f64>
where
    F: Fn(&mut Tape, Var) -> latentlab::Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    let numeric = richardson_gradient(&f, x, 1e-3)?;
    let scale = numeric.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-12);
    Ok(analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale)
}

fn criterion_autodiff() -> Check {
    let start = Instant::now();
    let mut rng = seeded_rng(101);
    let mut worst: f64 = 0.0;
    for trial in 0..25 {
        let n = rng.random_range(2..=8);
        let k = rng.random_range(2..=8);
        let m = rng.random_range(2..=8);
        let x = random_tensor(&mut rng, &[n, k]);
        let w = random_tensor(&mut rng, &[k, m]);
        let g = random_tensor(&mut rng, &[m]);
        let targets: Vec<Option<usize>> = (0..n).map(|i| if i == 0 && n > 2 { None } else { Some(rng.random_range(0..m)) }).collect();
        let rel = normwise_gap(composite_graph(trial, w, g, targets), &x).map_err(err)?;
        worst = worst.max(rel);
    }
    ensure(worst <= AUTODIFF_REL_TOL, || format!("composite graphs: max relative error {worst:.3e}"))?;

    let c = corpus(&[4, 3, 2], 3);
    let vocab = Vocab::build(&c.sentences, 1).map_err(err)?;
    let model = VaeModel::new(VaeConfig { max_len: 8, ..small_vae_config(6) }, vocab.clone()).map_err(err)?;
    let batch: Vec<Vec<usize>> = c.sentences[..3].iter().map(|s| vocab.encode(s)).collect();
    let noise = random_tensor(&mut rng, &[3, 6]);
    let mut vae_worst: f64 = 0.0;
    for name in ["lat.mu.w", "lat.logvar.b", "mem.w", "dec.l0.attn.q.w", "enc.l0.ff1.w", "dec.head.b"] {
        let value = model.params().get(name).map_err(err)?.clone();
        let f = |t: &mut Tape, v: Var| model.loss_with_param(t, name, v, &batch, 0.7, 0.0, &noise);
        vae_worst = vae_worst.max(normwise_gap(f, &value).map_err(err)?);
    }
    ensure(vae_worst <= VAE_GRAD_REL_TOL, || format!("VAE loss: max relative error {vae_worst:.3e}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < AUTODIFF_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("graphs max rel {worst:.2e}, VAE max rel {vae_worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

// ---- 2 ---------------------------------------------------------------------

fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = a[r][col] / p;
            let (top, bottom) = a.split_at_mut(r);
            for (x, y) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                *x -= f * y;
            }
        }
    }
    acc
}

fn criterion_flow() -> Check {
    let start = Instant::now();
    let mut rng = seeded_rng(202);
    let mut worst_rt: f64 = 0.0;
    let mut worst_ld: f64 = 0.0;
    let mut jacobians = 0;
    for s in 0..100u64 {
        let dim = if s % 4 == 0 { 2 * rng.random_range(1..=3) } else { 2 * rng.random_range(1..=32) };
        let depth = rng.random_range(1..=20);
        let cfg = FlowConfig { dim, depth, seed: s, ..FlowConfig::default() };
        let stack = FlowStack::with_random_params(cfg, 0.1, 1000 + s).map_err(err)?;
        for _ in 0..3 {
            let x = standard_normal_vec(&mut rng, dim);
            let (z, logdet) = stack.forward(&x).map_err(err)?;
            let back = stack.inverse(&z).map_err(err)?;
            worst_rt = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(worst_rt, f64::max);
            if dim <= 6 {
                let h = 1e-6;
                let mut jac = vec![vec![0.0; dim]; dim];
                for j in 0..dim {
                    let mut xp = x.clone();
                    xp[j] += h;
                    let mut xm = x.clone();
                    xm[j] -= h;
                    let (zp, _) = stack.forward(&xp).map_err(err)?;
                    let (zm, _) = stack.forward(&xm).map_err(err)?;
                    for i in 0..dim {
                        jac[i][j] = (zp[i] - zm[i]) / (xp[j] - xm[j]);
                    }
                }
                worst_ld = worst_ld.max((log_abs_det(jac) - logdet).abs());
                jacobians += 1;
            }
        }
    }
    ensure(worst_rt <= FLOW_ROUNDTRIP_TOL, || format!("roundtrip error {worst_rt:.3e}"))?;
    ensure(worst_ld <= FLOW_LOGDET_TOL, || format!("logdet error {worst_ld:.3e}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < FLOW_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("roundtrip {worst_rt:.2e}, logdet {worst_ld:.2e} over {jacobians} Jacobians, {:.1}s", elapsed.as_secs_f64()))
}

// ---- 3 ---------------------------------------------------------------------

fn criterion_elbo() -> Check {
    let mut checked = 0;
    for (total, cycles, ramp) in [(400, 4, 0.5), (1000, 5, 0.5), (40, 1, 0.25), (100, 2, 0.5), (120, 3, 0.25)] {
        let period = total / cycles;
        let ramp_end = (period as f64 * ramp) as usize;
        for c in 0..cycles {
            let s = c * period;
            let b0 = beta_schedule(s, total, cycles, ramp).map_err(err)?;
            ensure(b0 == 0.0, || format!("β({s}) = {b0} at a cycle start ({total},{cycles},{ramp})"))?;
            for step in s + ramp_end..s + period {
                let b = beta_schedule(step, total, cycles, ramp).map_err(err)?;
                ensure(b == 1.0, || format!("β({step}) = {b} after the ramp ({total},{cycles},{ramp})"))?;
            }
            for step in s + 1..s + ramp_end {
                let b = beta_schedule(step, total, cycles, ramp).map_err(err)?;
                ensure(b > 0.0 && b < 1.0, || format!("β({step}) = {b} inside the ramp"))?;
            }
            checked += 1;
        }
    }
    let mut rng = seeded_rng(303);
    for _ in 0..200 {
        let kl: f64 = rng.random_range(0.0..KL_THRESHOLD);
        let beta: f64 = rng.random_range(0.0..=1.0);
        let mut tape = Tape::new();
        let k = tape.param(Tensor::scalar(kl));
        let ce = tape.param(Tensor::scalar(2.5));
        let w = vae::thresholded_kl_graph(&mut tape, k, beta, KL_THRESHOLD);
        let total = tape.add(ce, w).map_err(err)?;
        ensure(tape.value(total).item() == 2.5 + beta * KL_THRESHOLD, || "thresholded value".into())?;
        tape.backward(total).map_err(err)?;
        let g = tape.grad(k).map_or(0.0, |g| g[0]);
        ensure(g == 0.0, || format!("∂total/∂KL = {g} at KL = {kl}"))?;
        let above = KL_THRESHOLD + rng.random_range(0.01..2.0);
        let mut tape = Tape::new();
        let k = tape.param(Tensor::scalar(above));
        let w = vae::thresholded_kl_graph(&mut tape, k, beta, KL_THRESHOLD);
        tape.backward(w).map_err(err)?;
        let g = tape.grad(k).map_or(0.0, |g| g[0]);
        ensure(g == beta, || format!("∂total/∂KL = {g} ≠ β above the threshold"))?;
    }
    Ok(format!("{checked} cycles exact; zero KL gradient on 200 sub-threshold draws"))
}

// ---- 4 ---------------------------------------------------------------------

fn reconstruction_config() -> VaeConfig {
    VaeConfig {
        latent_dim: 32,
        embed_dim: 32,
        n_layers: 2,
        n_heads: 2,
        head_dim: 16,
        ff_dim: 64,
        max_len: 12,
        epochs: 100,
        batch_size: 10,
        learning_rate: 0.003,
        fixed_beta: Some(0.0),
        seed: 4,
        ..VaeConfig::default()
    }
}

fn criterion_reconstruction() -> Check {
    let c = corpus(&[5, 5, 2], 4);
    ensure(c.len() == 50, || format!("corpus of {}", c.len()))?;
    let start = Instant::now();
    let report = train_vae(&c, &reconstruction_config()).map_err(err)?;
    let eval = reconstruction_report(&report.model, &c.sentences).map_err(err)?;
    let elapsed = start.elapsed();
    ensure(eval.bleu >= RECON_BLEU_MIN, || format!("BLEU {:.4} after {elapsed:?}", eval.bleu))?;
    ensure(elapsed < RECON_BUDGET, || format!("took {elapsed:?}"))?;

    let cyc = VaeConfig { fixed_beta: None, kl_threshold: KL_THRESHOLD, ..reconstruction_config() };
    let cyclic = train_vae(&c, &cyc).map_err(err)?;
    let last = cyclic.history.last().ok_or("empty history")?;
    ensure(last.kl > 0.0, || format!("final raw KL {}", last.kl))?;
    Ok(format!(
        "BLEU {:.4} in {:.1}s; cyclical β final KL {:.4}, BLEU {:.4}",
        eval.bleu,
        elapsed.as_secs_f64(),
        last.kl,
        reconstruction_report(&cyclic.model, &c.sentences).map_err(err)?.bleu
    ))
}

// ---- 5 ---------------------------------------------------------------------

fn criterion_memory() -> Check {
    let c = corpus(&[4, 3, 2], 5);
    let vocab = Vocab::build(&c.sentences, 1).map_err(err)?;
    let model = VaeModel::new(small_vae_config(8), vocab.clone()).map_err(err)?;
    let mut rng = seeded_rng(505);
    let mut min_delta = f64::INFINITY;
    let mut min_grad = f64::INFINITY;
    for i in 0..20 {
        let z1 = standard_normal_vec(&mut rng, 8);
        let z2 = standard_normal_vec(&mut rng, 8);
        ensure(z1 != z2, || "identical draw".into())?;
        let ids = vocab.encode(&c.sentences[i % c.len()]);
        let input = &ids[..ids.len() - 1];
        let a = model.decode_teacher_forced(input, &model.memory_project(&z1).map_err(err)?).map_err(err)?;
        let b = model.decode_teacher_forced(input, &model.memory_project(&z2).map_err(err)?).map_err(err)?;
        let delta = a.logits.data().iter().zip(b.logits.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        min_delta = min_delta.min(delta);
        let h = 1e-5;
        let mut g: f64 = 0.0;
        for d in 0..8 {
            let mut zp = z1.clone();
            zp[d] += h;
            let mut zm = z1.clone();
            zm[d] -= h;
            let fd = (model.reconstruction_loss_from(&ids, &zp).map_err(err)? - model.reconstruction_loss_from(&ids, &zm).map_err(err)?)
                / (zp[d] - zm[d]);
            g = g.max(fd.abs());
        }
        min_grad = min_grad.min(g);
    }
    ensure(min_delta > MEMORY_LOGIT_DELTA, || format!("smallest logit difference {min_delta:.3e}"))?;
    ensure(min_grad > 0.0, || "zero latent gradient".into())?;
    Ok(format!("min max|Δlogit| {min_delta:.3e}, min max|∂L/∂z| {min_grad:.3e}"))
}

// ---- 6 ---------------------------------------------------------------------

fn random_bag(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingBag {
    let n = rng.random_range(1..=4);
    let points = (0..n).map(|_| standard_normal_vec(rng, dim)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    EmbeddingBag::new(points, raw.iter().map(|w| w / s).collect()).unwrap()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum cost over every vertex of the transportation polytope: each
/// choice of `n + m − 1` cells that forms a spanning tree determines one
/// basic plan by peeling leaves.
fn brute_force_transport(a: &EmbeddingBag, b: &EmbeddingBag) -> f64 {
    let (n, m) = (a.len(), b.len());
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let k = n + m - 1;
    let mut best = f64::INFINITY;
    let mut choose = vec![0usize; k];
    fn next(choose: &mut [usize], total: usize) -> bool {
        let k = choose.len();
        for i in (0..k).rev() {
            if choose[i] < total - k + i {
                choose[i] += 1;
                for j in i + 1..k {
                    choose[j] = choose[j - 1] + 1;
                }
                return true;
            }
        }
        false
    }
    for (i, c) in choose.iter_mut().enumerate() {
        *c = i;
    }
    loop {
        let mut supply = a.weights().to_vec();
        let mut demand = b.weights().to_vec();
        let mut open: Vec<(usize, usize)> = choose.iter().map(|&c| cells[c]).collect();
        let mut cost = 0.0;
        let mut ok = true;
        while !open.is_empty() {
            let leaf = (0..n)
                .find_map(|r| {
                    let idx: Vec<usize> = open.iter().enumerate().filter(|(_, c)| c.0 == r).map(|(x, _)| x).collect();
                    (idx.len() == 1).then(|| (idx[0], true))
                })
                .or_else(|| {
                    (0..m).find_map(|col| {
                        let idx: Vec<usize> = open.iter().enumerate().filter(|(_, c)| c.1 == col).map(|(x, _)| x).collect();
                        (idx.len() == 1).then(|| (idx[0], false))
                    })
                });
            let Some((idx, row_leaf)) = leaf else {
                ok = false;
                break;
            };
            let (i, j) = open.remove(idx);
            let x = if row_leaf { supply[i] } else { demand[j] };
            if x < -1e-12 {
                ok = false;
                break;
            }
            supply[i] -= x;
            demand[j] -= x;
            cost += x * euclid(&a.points()[i], &b.points()[j]);
        }
        if ok && supply.iter().chain(&demand).all(|r| r.abs() < 1e-12) {
            best = best.min(cost);
        }
        if !next(&mut choose, cells.len()) {
            break;
        }
    }
    best
}

fn criterion_emd() -> Check {
    let mut rng = seeded_rng(606);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let dim = rng.random_range(1..=3);
        let a = random_bag(&mut rng, dim);
        let b = random_bag(&mut rng, dim);
        let got = emd(&a, &b).map_err(err)?;
        let want = brute_force_transport(&a, &b);
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= EMD_TOL, || format!("solver vs enumeration {worst:.3e}"))?;
    for _ in 0..100 {
        let dim = rng.random_range(1..=3);
        let (a, b, c) = (random_bag(&mut rng, dim), random_bag(&mut rng, dim), random_bag(&mut rng, dim));
        let (ab, ba) = (emd(&a, &b).map_err(err)?, emd(&b, &a).map_err(err)?);
        ensure((ab - ba).abs() <= EMD_TOL, || format!("asymmetric {ab} vs {ba}"))?;
        let aa = emd(&a, &a).map_err(err)?;
        ensure(aa.abs() <= EMD_TOL, || format!("d(a,a) = {aa}"))?;
        let (bc, ac) = (emd(&b, &c).map_err(err)?, emd(&a, &c).map_err(err)?);
        ensure(ac <= ab + bc + EMD_TOL, || format!("triangle violated: {ac} > {ab} + {bc}"))?;
    }
    Ok(format!("200 pairs within {worst:.2e} of enumeration; axioms on 100 triples"))
}

// ---- 7 ---------------------------------------------------------------------

fn criterion_is() -> Check {
    let mut rng = seeded_rng(707);
    let dim = 3;
    for trial in 0..50 {
        // ids 4.. are content tokens
        let rows = 16;
        let table = random_tensor(&mut rng, &[rows, dim]);
        let s1: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(4..rows)).collect();
        let s2: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(4..rows)).collect();
        let v = interpolation_smoothness(&[s1, s2], &table).map_err(err)?;
        ensure(v == 1.0, || format!("two-point path {trial}: {v}"))?;

        let count = rng.random_range(3..=10);
        let origin = standard_normal_vec(&mut rng, dim);
        let dir = standard_normal_vec(&mut rng, dim);
        let mut data = vec![0.0; 4 * dim];
        for i in 0..count {
            data.extend(origin.iter().zip(&dir).map(|(o, d)| o + i as f64 * d));
        }
        let line = Tensor::new(&[4 + count, dim], data.clone()).unwrap();
        let path: Vec<Vec<usize>> = (0..count).map(|i| vec![4 + i]).collect();
        let v = interpolation_smoothness(&path, &line).map_err(err)?;
        ensure((v - 1.0).abs() <= IS_COLLINEAR_TOL, || format!("collinear path {trial}: {v}"))?;

        let offset = standard_normal_vec(&mut rng, dim);
        let mid = count / 2;
        let mut bent = data;
        for d in 0..dim {
            bent[(4 + mid) * dim + d] += offset[d];
        }
        let bent = Tensor::new(&[4 + count, dim], bent).unwrap();
        let v = interpolation_smoothness(&path, &bent).map_err(err)?;
        ensure(v < 1.0, || format!("detour path {trial}: {v}"))?;
    }
    Ok("50 two-point, collinear and detour paths".into())
}

// ---- 8 ---------------------------------------------------------------------

fn criterion_metrics() -> Check {
    let start = Instant::now();
    let cfg = MetricsConfig::default();
    let copy = copy_of_factors(&[5, 4, 3], 5000, 0.05, 808).map_err(err)?;
    let r = metrics::evaluate(&copy, &cfg, 1).map_err(err)?;
    ensure(r.mig >= MIG_MIN, || format!("copy MIG {:.4}", r.mig))?;
    ensure(r.modularity >= MODULARITY_MIN, || format!("copy modularity {:.4}", r.modularity))?;
    ensure(r.z_min_var_error <= ZMINVAR_MAX, || format!("copy z-min-var error {:.4}", r.z_min_var_error))?;
    ensure(r.dci.disentanglement >= DCI_D_MIN, || format!("copy DCI D {:.4}", r.dci.disentanglement))?;

    let mut rng = seeded_rng(809);
    let factors: Vec<Vec<usize>> =
        (0..5000).map(|_| vec![rng.random_range(0..5), rng.random_range(0..4), rng.random_range(0..3)]).collect();
    let reps: Vec<Vec<f64>> = (0..5000).map(|_| standard_normal_vec(&mut rng, 3)).collect();
    let indep = FactorDataset::new(reps, factors, Some(vec![5, 4, 3])).map_err(err)?;
    let mig = metrics::mig(&indep, cfg.bins).map_err(err)?;
    let zmv = metrics::z_min_var_error(&indep, &cfg).map_err(err)?;
    ensure(mig <= MIG_INDEPENDENT_MAX, || format!("independent MIG {mig:.4}"))?;
    ensure(zmv >= ZMINVAR_INDEPENDENT_MIN, || format!("independent z-min-var error {zmv:.4}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < METRICS_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "copy: MIG {:.3} mod {:.3} zmv {:.3} D {:.3}; independent: MIG {mig:.4} zmv {zmv:.3}; {:.1}s",
        r.mig,
        r.modularity,
        r.z_min_var_error,
        r.dci.disentanglement,
        elapsed.as_secs_f64()
    ))
}

// ---- 9 ---------------------------------------------------------------------

fn criterion_vq() -> Check {
    let mut rng = seeded_rng(909);
    for _ in 0..20 {
        let dim = rng.random_range(1..=5);
        let size = rng.random_range(2..=6);
        let book = random_tensor(&mut rng, &[size, dim]);
        let e = random_tensor(&mut rng, &[1, dim]);
        let w = standard_normal_vec(&mut rng, dim);
        let downstream = |t: &mut Tape, z: Var| -> latentlab::Result<Var> {
            let wv = t.constant(Tensor::vector(&w));
            let s = t.tanh(z);
            let s = t.mul(s, wv)?;
            Ok(t.sum(s))
        };
        let mut tape = Tape::new();
        let ev = tape.param(e.clone());
        let cv = tape.constant(book.clone());
        let (zq, idx) = quantize_on_tape(&mut tape, ev, cv).map_err(err)?;
        let loss = downstream(&mut tape, zq).map_err(err)?;
        tape.backward(loss).map_err(err)?;
        let through = tape.grad(ev).ok_or("no gradient reached e")?.to_vec();
        let code = Tensor::new(&[1, dim], book.row(idx[0]).to_vec()).unwrap();
        let mut direct = Tape::new();
        let zv = direct.param(code.clone());
        let l = downstream(&mut direct, zv).map_err(err)?;
        direct.backward(l).map_err(err)?;
        ensure(direct.grad(zv).unwrap() == through.as_slice(), || "straight-through gradient is not the identity".into())?;
        let fd = numeric_gradient(downstream, &code, 1e-6).map_err(err)?;
        let gap = fd.iter().zip(&through).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(gap <= 1e-8, || format!("finite differences disagree by {gap:.3e}"))?;

        let cb = Codebook::from_entries(book.clone(), 0.25).map_err(err)?;
        let k = rng.random_range(0..size);
        let (l_cb, l_commit) = vq_loss(cb.code(k), &cb).map_err(err)?;
        ensure(l_cb == 0.0 && l_commit == 0.0, || format!("losses at a code: {l_cb}, {l_commit}"))?;
    }

    let means = [[2.0, 1.0], [-1.5, -2.0]];
    let data: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            let m = means[i % 2];
            let e = standard_normal_vec(&mut rng, 2);
            vec![m[0] + 0.1 * e[0], m[1] + 0.1 * e[1]]
        })
        .collect();
    let emp: Vec<Vec<f64>> = (0..2)
        .map(|c| {
            let pts: Vec<&Vec<f64>> = data.iter().skip(c).step_by(2).collect();
            (0..2).map(|d| pts.iter().map(|p| p[d]).sum::<f64>() / pts.len() as f64).collect()
        })
        .collect();
    let cfg = VqTrainConfig {
        codebook_size: 4,
        epochs: 300,
        train_autoencoder: false,
        optimizer: OptimizerKind::Sgd,
        ..VqTrainConfig::default()
    };
    let mut ae = VqAutoencoder::new(2, &cfg).map_err(err)?;
    ae.train(&data, &cfg).map_err(err)?;
    let mut dists = Vec::new();
    for m in &emp {
        let d = (0..ae.codebook.size()).map(|k| euclid(ae.codebook.code(k), m)).fold(f64::INFINITY, f64::min);
        dists.push(d);
    }
    ensure(dists.iter().all(|d| *d <= VQ_CLUSTER_TOL), || format!("code-to-mean distances {dists:?}"))?;
    Ok(format!("straight-through exact on 20 cases; cluster distances {:.2e}, {:.2e}", dists[0], dists[1]))
}

// ---- 10 --------------------------------------------------------------------

fn defmod_fixture() -> Result<(VaeModel, Vec<flow::DefmodTarget>), String> {
    let defs = corpus(&[5, 5, 4], 10);
    let cfg = VaeConfig { epochs: 5, batch_size: 20, learning_rate: 0.003, seed: 10, ..small_vae_config(12) };
    let vae = train_vae(&defs, &cfg).map_err(err)?.model;
    let mut rng = seeded_rng(1010);
    let pairs: Vec<flow::EmbeddingPair> = defs
        .sentences
        .iter()
        .enumerate()
        .map(|(i, d)| flow::EmbeddingPair { word: format!("w{i}"), embedding: standard_normal_vec(&mut rng, 4), definition: d.clone() })
        .collect();
    let targets = flow::defmod_targets(&vae, &pairs).map_err(err)?;
    Ok((vae, targets))
}

fn criterion_defmod() -> Check {
    let (vae, targets) = defmod_fixture()?;
    ensure(targets.len() == 100, || format!("{} pairs", targets.len()))?;
    let frozen = vae.clone();
    let flow_cfg = FlowConfig { dim: 12, depth: 8, seed: 11, ..FlowConfig::default() };

    let mut fwd = FlowStack::new(flow_cfg.clone()).map_err(err)?;
    let cfg = InnTrainConfig { direction: Direction::Forward, epochs: 100, learning_rate: 1e-3, ..InnTrainConfig::default() };
    let hist = flow::train_inn(&mut fwd, &targets, &cfg).map_err(err)?;
    let mut losses: Vec<f64> = hist.iter().map(|h| h.loss).collect();
    losses.push(flow::defmod_loss(&fwd, &targets, Direction::Forward).map_err(err)?);
    let bad = losses.windows(2).position(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Less));
    ensure(bad.is_none(), || format!("forward loss rose at epoch {}: {:?}", bad.unwrap() + 1, &losses[bad.unwrap()..bad.unwrap() + 2]))?;

    let mut rev = FlowStack::new(flow_cfg).map_err(err)?;
    let cfg = InnTrainConfig { direction: Direction::Reverse, epochs: 200, learning_rate: 1e-2, ..InnTrainConfig::default() };
    let hist = flow::train_inn(&mut rev, &targets, &cfg).map_err(err)?;
    let init = hist[0].loss;
    let fin = flow::defmod_loss(&rev, &targets, Direction::Reverse).map_err(err)?;
    ensure(fin <= 0.5 * init, || format!("reverse MSE {init:.4} -> {fin:.4}"))?;

    ensure(vae == frozen, || "VAE parameters changed".into())?;
    let mut rng = seeded_rng(1011);
    for _ in 0..100 {
        let len = rng.random_range(1..10);
        let w = standard_normal_vec(&mut rng, len);
        let back = flow::untriple(&flow::triple_embed(&w)).map_err(err)?;
        ensure(back == w, || "triple/untriple roundtrip is not exact".into())?;
    }
    Ok(format!(
        "forward {:.3} -> {:.3} strictly decreasing over {} epochs; reverse MSE {init:.4} -> {fin:.4}",
        losses[0],
        losses[losses.len() - 1],
        losses.len() - 1
    ))
}

// ---- 11 --------------------------------------------------------------------

fn criterion_inference() -> Check {
    let c = corpus(&[5, 5, 4], 11);
    let cfg = VaeConfig { epochs: 10, batch_size: 20, learning_rate: 0.003, seed: 11, ..small_vae_config(8) };
    let mut model = train_vae(&c, &cfg).map_err(err)?.model;
    let mut rng = seeded_rng(1111);
    let triple = |rng: &mut ChaCha8Rng| {
        let p1 = c.sentences[rng.random_range(0..c.len())].clone();
        let p2 = c.sentences[rng.random_range(0..c.len())].clone();
        Triple::new(p1.clone(), p2, p1)
    };
    let train: Vec<Triple> = (0..200).map(|_| triple(&mut rng)).collect();
    let held_out: Vec<Triple> = (0..50).map(|_| triple(&mut rng)).collect();
    let mut head = InferenceHead::new(8, 12).map_err(err)?;
    let before_model = model.clone();
    let before = inference::latent_mse(&model, &head, &held_out).map_err(err)?;
    let icfg = InferenceConfig { epochs: 60, learning_rate: 3e-3, batch_size: 20, seed: 13, ..InferenceConfig::default() };
    inference::train_inference(&mut model, &mut head, &train, &icfg).map_err(err)?;
    let after = inference::latent_mse(&model, &head, &held_out).map_err(err)?;
    ensure(after <= 0.5 * before, || format!("held-out latent MSE {before:.4} -> {after:.4}"))?;
    let mut tuned = 0;
    for (name, t) in before_model.params().iter() {
        let now = model.params().get(name).map_err(err)?;
        if inference::is_tunable_vae_param(name) {
            tuned += usize::from(now != t);
        } else {
            ensure(now == t, || format!("frozen parameter {name} changed"))?;
        }
    }

    let vocab = Vocab::build(&["a b c d e f g h i j k l"], 1).map_err(err)?;
    ensure(vocab.len() == 16, || format!("vocab of {}", vocab.len()))?;
    let mut uniform = VaeModel::new(small_vae_config(8), vocab).map_err(err)?;
    for name in ["dec.head.w", "dec.head.b"] {
        let t = uniform.params_mut().get_mut(name).map_err(err)?;
        *t = Tensor::zeros(t.shape());
    }
    let triples = vec![Triple::new("a b", "c", "d e f"), Triple::new("g h", "i", "j k l a"), Triple::new("b", "b", "c")];
    let ppl = inference::perplexity(&uniform, &InferenceHead::new(8, 0).map_err(err)?, &triples).map_err(err)?;
    ensure(ppl == 16.0, || format!("uniform perplexity {ppl}"))?;
    Ok(format!("held-out latent MSE {before:.4} -> {after:.4}; {tuned} tunable tensors moved, rest bitwise equal; perplexity {ppl}"))
}

// ---- 12 --------------------------------------------------------------------

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            continue;
        }
        out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
    }
    out
}

fn criterion_determinism() -> Check {
    let root = tempfile::tempdir().map_err(err)?;
    let r = root.path();
    let p = |s: &str| r.join(s).to_string_lossy().into_owned();
    let config = r#"{"seed": 5, "vae": {"latent_dim": 12, "embed_dim": 16, "n_heads": 2, "head_dim": 8, "ff_dim": 32,
        "n_layers": 1, "max_len": 10, "epochs": 3, "batch_size": 8},
        "inn": {"epochs": 5}, "inference": {"epochs": 3}, "metrics": {"trials": 50},
        "geometry": {"count": 4}}"#;
    std::fs::write(r.join("run.json"), config).map_err(err)?;
    let fixed = ["latentlab", "gen-corpus", "--slots", "4,3,2", "--seed", "7", "-o"];
    let code = latentlab::cli::run(fixed.iter().map(|s| s.to_string()).chain([p("data")]));
    ensure(code == 0, || format!("gen-corpus exit {code}"))?;
    let sentences: Vec<String> = std::fs::read_to_string(r.join("data/corpus.txt")).map_err(err)?.lines().map(str::to_string).collect();
    let code =
        latentlab::cli::run(["latentlab", "train-vae", "--config", &p("run.json"), "--corpus", &p("data/corpus.txt"), "-o", &p("model")]);
    ensure(code == 0, || format!("train-vae exit {code}"))?;

    let mut rng = seeded_rng(1212);
    let pairs: String = sentences
        .iter()
        .take(12)
        .enumerate()
        .map(|(i, s)| {
            serde_json::json!({"word": format!("w{i}"), "embedding": standard_normal_vec(&mut rng, 4), "definition": s}).to_string() + "\n"
        })
        .collect();
    std::fs::write(r.join("pairs.jsonl"), pairs).map_err(err)?;
    let triples: String = (0..10).map(|i| format!("{}\t{}\t{}\n", sentences[i], sentences[i + 1], sentences[i])).collect();
    std::fs::write(r.join("triples.tsv"), triples).map_err(err)?;
    std::fs::write(r.join("path.txt"), sentences[..4].join("\n")).map_err(err)?;
    let sim: String = (0..6).map(|i| format!("{}\t{}\t{}\n", sentences[i], sentences[i + 6], i)).collect();
    std::fs::write(r.join("sim.tsv"), sim).map_err(err)?;
    std::fs::write(r.join("latents.jsonl"), "{\"z\": [0.1,0.2,0.3,0.4,0.5,0.6,-0.1,-0.2,-0.3,-0.4,-0.5,-0.6]}\n").map_err(err)?;
    let reps = copy_of_factors(&[3, 2], 200, 0.1, 3).map_err(err)?;
    std::fs::write(r.join("reps.tsv"), reps.to_tsv()).map_err(err)?;
    let code = latentlab::cli::run([
        "latentlab",
        "train-inn",
        "--config",
        &p("run.json"),
        "--vae",
        &p("model/vae.json"),
        "--pairs",
        &p("pairs.jsonl"),
        "-o",
        &p("flow"),
    ]);
    ensure(code == 0, || format!("train-inn exit {code}"))?;

    let ckpt = p("model/vae.json");
    let cfgp = p("run.json");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gen-corpus", vec!["--slots".into(), "3,3".into()]),
        ("train-vae", vec!["--corpus".into(), p("data/corpus.txt")]),
        ("train-inn", vec!["--vae".into(), ckpt.clone(), "--pairs".into(), p("pairs.jsonl"), "--direction".into(), "reverse".into()]),
        ("train-inference", vec!["--vae".into(), ckpt.clone(), "--triples".into(), p("triples.tsv")]),
        ("encode", vec!["--ckpt".into(), ckpt.clone(), "--input".into(), p("data/corpus.txt")]),
        ("decode", vec!["--ckpt".into(), ckpt.clone(), "--latents".into(), p("latents.jsonl")]),
        ("reconstruct", vec!["--ckpt".into(), ckpt.clone(), "--input".into(), p("data/corpus.txt")]),
        (
            "interpolate",
            vec!["--ckpt".into(), ckpt.clone(), "--source".into(), sentences[0].clone(), "--target".into(), sentences[1].clone()],
        ),
        ("traverse", vec!["--ckpt".into(), ckpt.clone(), "--source".into(), sentences[2].clone(), "--radius".into(), "2".into()]),
        (
            "arith",
            vec![
                "--ckpt".into(),
                ckpt.clone(),
                "--a".into(),
                sentences[0].clone(),
                "--b".into(),
                sentences[1].clone(),
                "--c".into(),
                sentences[2].clone(),
            ],
        ),
        ("is-metric", vec!["--ckpt".into(), ckpt.clone(), "--path".into(), p("path.txt")]),
        ("defmod", vec!["--vae".into(), ckpt.clone(), "--flow".into(), p("flow/flow.json"), "--pairs".into(), p("pairs.jsonl")]),
        ("metrics", vec!["--input".into(), p("reps.tsv")]),
        (
            "eval",
            vec![
                "--ckpt".into(),
                ckpt.clone(),
                "--input".into(),
                p("data/corpus.txt"),
                "--similarity".into(),
                p("sim.tsv"),
                "--per-sentence".into(),
            ],
        ),
    ];
    let inputs_before: Vec<BTreeMap<PathBuf, Vec<u8>>> = ["", "data", "model", "flow"].iter().map(|d| snapshot(&r.join(d))).collect();
    let mut files = 0;
    for (name, args) in &commands {
        let mut outs = Vec::new();
        for run in 0..2 {
            let out = p(&format!("{name}-{run}"));
            let argv: Vec<String> =
                ["latentlab", name, "--config", &cfgp, "-o", &out].iter().map(|s| s.to_string()).chain(args.iter().cloned()).collect();
            let code = latentlab::cli::run(argv);
            ensure(code == 0, || format!("{name} exit {code}"))?;
            outs.push(snapshot(Path::new(&out)));
        }
        ensure(outs[0].len() > 1, || format!("{name} wrote only {:?}", outs[0].keys().collect::<Vec<_>>()))?;
        ensure(outs[0] == outs[1], || format!("{name} outputs differ between runs"))?;
        files += outs[0].len();
    }
    let inputs_after: Vec<BTreeMap<PathBuf, Vec<u8>>> = ["data", "model", "flow"].iter().map(|d| snapshot(&r.join(d))).collect();
    ensure(inputs_before[1..] == inputs_after[..], || "a subcommand modified its inputs".into())?;
    Ok(format!("{} subcommands, {files} files byte-identical across reruns", commands.len()))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("autodiff soundness", criterion_autodiff),
        ("flow bijectivity", criterion_flow),
        ("ELBO mechanics", criterion_elbo),
        ("desk-scale reconstruction", criterion_reconstruction),
        ("memory injection efficacy", criterion_memory),
        ("EMD/WMD exactness", criterion_emd),
        ("IS metric", criterion_is),
        ("disentanglement oracles", criterion_metrics),
        ("VQ contract", criterion_vq),
        ("defmod pipeline", criterion_defmod),
        ("inference mapper", criterion_inference),
        ("determinism", criterion_determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        match check() {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
