//! Spontaneous activations: one input-independent vector α per linear site,
//! so a sparsified site computes `W·mask(x) + W·α`. Since `W·α` does not
//! depend on the input it can be folded into a stored bias.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::SCHEMA_VERSION;
use crate::error::{Error, Result};
use crate::model::{run, trace, Adam, LinearSite, MaskCounts, Model, ModelVars, RunControls, SiteEdit, SiteHook, SiteKind};
use crate::sparsify::{calibration_batch, SparsityProfile, MIN_CALIBRATION_TOKENS};
use crate::tensor::{kl_row, matmul_nt, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    KlDistill,
    ResidualMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamState {
    Unfolded,
    Folded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub heldout_kl: f64,
    pub best_heldout_kl: f64,
}

/// Per-site squared-error statistics of the closed-form bias, all in f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStat {
    pub layer: usize,
    pub site: SiteKind,
    pub tokens: usize,
    /// Mean `‖e‖²` of the per-token output residual `e = W·x − W·mask(x)`.
    pub loss_zero: f64,
    /// Mean `‖e − b⋆‖²`.
    pub loss_opt: f64,
    /// `‖b⋆‖²`.
    pub bias_sq_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SponMeta {
    pub steps: usize,
    pub seed: u64,
    pub kl_direction: String,
    pub lr: Option<f32>,
    pub batch: Option<usize>,
    pub block: Option<usize>,
    /// Held-out KL with α = 0.
    pub baseline_kl: Option<f64>,
    /// Held-out KL of the returned α (the best checkpoint).
    pub final_kl: Option<f64>,
    pub calib_kl_before: Option<f64>,
    pub calib_kl_after: Option<f64>,
    pub history: Vec<Checkpoint>,
    pub residual_stats: Vec<ResidualStat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpontaneousParams {
    pub method: Method,
    pub state: ParamState,
    /// α per site, each of length `d_in(site)`.
    pub alphas: BTreeMap<LinearSite, Tensor>,
    pub metadata: SponMeta,
}

#[derive(Serialize, Deserialize)]
struct SiteEntry {
    layer: usize,
    site: SiteKind,
    alpha: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    schema_version: u32,
    method: Method,
    state: ParamState,
    sites: Vec<SiteEntry>,
    metadata: SponMeta,
}

impl Serialize for SpontaneousParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsFile {
            schema_version: SCHEMA_VERSION,
            method: self.method,
            state: self.state,
            sites: self
                .alphas
                .iter()
                .map(|(site, a)| SiteEntry { layer: site.layer, site: site.kind, alpha: a.to_vec() })
                .collect(),
            metadata: self.metadata.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SpontaneousParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let f = ParamsFile::deserialize(d)?;
        let mut alphas = BTreeMap::new();
        for e in f.sites {
            let n = e.alpha.len();
            let t = Tensor::new(vec![n], e.alpha).map_err(D::Error::custom)?;
            alphas.insert(LinearSite::new(e.layer, e.site), t);
        }
        Ok(Self { method: f.method, state: f.state, alphas, metadata: f.metadata })
    }
}

impl SpontaneousParams {
    /// α = 0 at every site.
    pub fn zeros(model: &Model, sites: &BTreeSet<LinearSite>, method: Method) -> Result<Self> {
        let mut alphas = BTreeMap::new();
        for &s in sites {
            model.config.check_site(s)?;
            alphas.insert(s, Tensor::zeros(&[model.config.site_dims(s.kind).1]));
        }
        Ok(Self { method, state: ParamState::Unfolded, alphas, metadata: SponMeta::default() })
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.state == ParamState::Folded && !self.alphas.is_empty() {
            return Err(Error::InvalidArgument("folded parameters must not carry α vectors".into()));
        }
        for (site, a) in &self.alphas {
            model.config.check_site(*site)?;
            let d_in = model.config.site_dims(site.kind).1;
            if a.shape() != [d_in] {
                return Err(Error::shape("spontaneous", format!("α for {site} has shape {:?}, expected [{d_in}]", a.shape())));
            }
        }
        Ok(())
    }
}

/// Forward with each profiled site masked and each α applied.
pub fn spon_forward(
    model: &Model,
    ids: &[u32],
    batch: usize,
    profile: &SparsityProfile,
    params: &SpontaneousParams,
) -> Result<Tensor> {
    Ok(spon_run(model, ids, batch, profile, params)?.0)
}

pub fn spon_run(
    model: &Model,
    ids: &[u32],
    batch: usize,
    profile: &SparsityProfile,
    params: &SpontaneousParams,
) -> Result<(Tensor, MaskCounts)> {
    profile.validate(model)?;
    params.validate(model)?;
    let controls = RunControls { thresholds: Some(&profile.thresholds), alphas: Some(&params.alphas) };
    let out = run(model, ids, batch, controls, None)?;
    Ok((out.logits, out.counts))
}

/// Writes `W·α` into each site's bias (adding to any bias already there).
/// Sites whose α is exactly zero are left untouched.
pub fn fold(model: &Model, params: &SpontaneousParams) -> Result<(Model, SpontaneousParams)> {
    if params.state == ParamState::Folded {
        return Err(Error::AlreadyFolded);
    }
    params.validate(model)?;
    let mut out = model.clone();
    for (site, alpha) in &params.alphas {
        if alpha.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let w = model.site_weight(*site)?;
        let d_out = model.config.site_dims(site.kind).0;
        let b = matmul_nt(&alpha.reshape(&[1, alpha.len()])?, w)?.reshape(&[d_out])?;
        let b = match out.weights.biases.get(site) {
            Some(prev) => crate::tensor::add(prev, &b)?,
            None => b,
        };
        out.weights.biases.insert(*site, b);
    }
    let folded = SpontaneousParams {
        method: params.method,
        state: ParamState::Folded,
        alphas: BTreeMap::new(),
        metadata: params.metadata.clone(),
    };
    Ok((out, folded))
}

/// Mean over rows of `KL(softmax(p) ‖ softmax(q))`, in f64.
pub fn kl_divergence(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    if p_logits.shape() != q_logits.shape() || p_logits.shape().is_empty() {
        return Err(Error::shape("kl_divergence", format!("{:?} vs {:?}", p_logits.shape(), q_logits.shape())));
    }
    let (rows, v) = p_logits.as_rows();
    if rows == 0 {
        return Err(Error::InsufficientData("no rows to compare".into()));
    }
    Ok(kl_sum(p_logits, q_logits, v) / rows as f64)
}

fn kl_sum(p_logits: &Tensor, q_logits: &Tensor, v: usize) -> f64 {
    let (mut p, mut q) = (vec![0f64; v], vec![0f64; v]);
    p_logits
        .data()
        .chunks_exact(v)
        .zip(q_logits.data().chunks_exact(v))
        .map(|(a, b)| kl_row(a, b, &mut p, &mut q))
        .sum()
}

/// Dense-model logits over fixed blocks of a token stream, reused to score
/// any number of student variants.
pub struct TeacherSet {
    block: usize,
    batches: Vec<(Vec<u32>, usize, Tensor)>,
    rows: usize,
}

impl TeacherSet {
    /// Non-overlapping full blocks of `block` tokens (clamped to the context).
    pub fn new(dense: &Model, tokens: &[u32], block: usize) -> Result<Self> {
        let block = block.min(dense.config.context_len).max(1);
        let n_blocks = tokens.len() / block;
        if n_blocks == 0 {
            return Err(Error::InsufficientData(format!("need at least {block} tokens, got {}", tokens.len())));
        }
        let mut batches = Vec::new();
        for chunk in tokens[..n_blocks * block].chunks(16 * block) {
            let n = chunk.len() / block;
            let logits = run(dense, chunk, n, RunControls::default(), None)?.logits;
            let v = dense.config.vocab_size;
            batches.push((chunk.to_vec(), n, logits.reshape(&[n * block, v])?));
        }
        Ok(Self { block, batches, rows: n_blocks * block })
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn tokens(&self) -> usize {
        self.rows
    }

    /// Mean token KL(dense ‖ model under `controls`).
    pub fn mean_kl(&self, model: &Model, controls: RunControls<'_>) -> Result<f64> {
        let v = model.config.vocab_size;
        let mut total = 0.0;
        for (ids, n, teacher) in &self.batches {
            let student = run(model, ids, *n, controls, None)?.logits;
            total += kl_sum(teacher, &student, v);
        }
        Ok(total / self.rows as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillHyper {
    pub lr: f32,
    pub steps: usize,
    pub batch: usize,
    /// Clamped to the model's context length.
    pub block: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DistillHyper {
    fn default() -> Self {
        Self { lr: 1e-5, steps: 200, batch: 8, block: 128, eval_every: 50, seed: 0 }
    }
}

fn check_sites(model: &Model, profile: &SparsityProfile, sites: &BTreeSet<LinearSite>) -> Result<()> {
    if sites.is_empty() {
        return Err(Error::InvalidArgument("no injection sites".into()));
    }
    profile.validate(model)?;
    for s in sites {
        model.config.check_site(*s)?;
        if !profile.thresholds.contains_key(s) {
            return Err(Error::InvalidArgument(format!("{s} is not sparsified by the profile")));
        }
    }
    Ok(())
}

fn controls<'a>(profile: &'a SparsityProfile, params: &'a SpontaneousParams) -> RunControls<'a> {
    RunControls { thresholds: Some(&profile.thresholds), alphas: Some(&params.alphas) }
}

fn alpha_norms(alphas: &BTreeMap<LinearSite, Tensor>) -> String {
    alphas
        .iter()
        .map(|(s, a)| format!("{s}: |α|={:.3e}", a.data().iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains α at `sites` (all model weights frozen, masks constant) to
/// minimise mean token KL(dense ‖ sparse+α) on `calib_tokens`.
///
/// Held-out KL on `heldout_tokens` is measured at step 0 and every
/// `eval_every` steps; the α with the lowest held-out KL is returned.
pub fn calibrate_kl_distill(
    dense: &Model,
    calib_tokens: &[u32],
    heldout_tokens: &[u32],
    profile: &SparsityProfile,
    sites: &BTreeSet<LinearSite>,
    hyper: &DistillHyper,
) -> Result<SpontaneousParams> {
    check_sites(dense, profile, sites)?;
    if calib_tokens.len() < MIN_CALIBRATION_TOKENS {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least {MIN_CALIBRATION_TOKENS} tokens, got {}",
            calib_tokens.len()
        )));
    }
    if hyper.batch == 0 || hyper.eval_every == 0 || !(hyper.lr > 0.0) {
        return Err(Error::InvalidArgument("batch and eval_every must be >= 1 and lr > 0".into()));
    }
    let block = hyper.block.min(dense.config.context_len).max(1);
    let heldout = TeacherSet::new(dense, heldout_tokens, block)?;
    let calib = TeacherSet::new(dense, calib_tokens, block)?;

    let mut params = SpontaneousParams::zeros(dense, sites, Method::KlDistill)?;
    let baseline = heldout.mean_kl(dense, controls(profile, &params))?;
    let calib_before = calib.mean_kl(dense, controls(profile, &params))?;
    let mut best = (baseline, params.alphas.clone());
    let mut history = vec![Checkpoint { step: 0, heldout_kl: baseline, best_heldout_kl: baseline }];

    let mut starts: Vec<usize> = (0..=calib_tokens.len() - block).step_by(block).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    starts.shuffle(&mut rng);
    let mut cursor = 0;
    let mut opt = Adam::new(hyper.lr);
    let v = dense.config.vocab_size;
    for step in 1..=hyper.steps {
        let diverged = |what: &str, alphas: &BTreeMap<LinearSite, Tensor>| {
            Error::Diverged(format!("{what} at step {step}; lr {:e}; {}", hyper.lr, alpha_norms(alphas)))
        };
        let mut ids = Vec::with_capacity(hyper.batch * block);
        for _ in 0..hyper.batch.min(starts.len()) {
            if cursor == starts.len() {
                starts.shuffle(&mut rng);
                cursor = 0;
            }
            let s = starts[cursor];
            ids.extend_from_slice(&calib_tokens[s..s + block]);
            cursor += 1;
        }
        let n = ids.len() / block;
        let teacher = run(dense, &ids, n, RunControls::default(), None)?.logits.reshape(&[n * block, v])?;

        let mut tape = Tape::new();
        let vars = ModelVars::constants(&mut tape, dense);
        let mut alpha_vars = BTreeMap::new();
        for (s, a) in &params.alphas {
            alpha_vars.insert(*s, tape.param(a.reshape(&[1, a.len()])?));
        }
        let traced = trace(&mut tape, &vars, &dense.config, &ids, n, Some(&profile.thresholds), &alpha_vars, None)
            .map_err(|e| if e.is_numeric() { diverged("non-finite forward", &params.alphas) } else { e })?;
        let loss = tape.kl_div(&teacher, traced.logits).map_err(|_| diverged("non-finite KL", &params.alphas))?;
        if !tape.value(loss).item()?.is_finite() {
            return Err(diverged("non-finite KL", &params.alphas));
        }
        let grads = tape.backward(loss)?;
        let gs: Vec<Tensor> = params
            .alphas
            .iter()
            .map(|(s, a)| grads.get(alpha_vars[s])?.reshape(&[a.len()]))
            .collect::<Result<_>>()?;
        let grad_refs: Vec<&Tensor> = gs.iter().collect();
        opt.step(params.alphas.values_mut().collect(), &grad_refs)
            .map_err(|e| if e.is_numeric() { diverged("non-finite α update", &params.alphas) } else { e })?;

        if step % hyper.eval_every == 0 || step == hyper.steps {
            let kl = heldout
                .mean_kl(dense, controls(profile, &params))
                .map_err(|e| if e.is_numeric() { diverged("non-finite held-out forward", &params.alphas) } else { e })?;
            if !kl.is_finite() {
                return Err(diverged("non-finite held-out KL", &params.alphas));
            }
            if kl < best.0 {
                best = (kl, params.alphas.clone());
            }
            history.push(Checkpoint { step, heldout_kl: kl, best_heldout_kl: best.0 });
        }
    }
    params.alphas = best.1;
    let calib_after = calib.mean_kl(dense, controls(profile, &params))?;
    params.metadata = SponMeta {
        steps: hyper.steps,
        seed: hyper.seed,
        kl_direction: "kl(dense || sparse)".into(),
        lr: Some(hyper.lr),
        batch: Some(hyper.batch),
        block: Some(block),
        baseline_kl: Some(baseline),
        final_kl: Some(best.0),
        calib_kl_before: Some(calib_before),
        calib_kl_after: Some(calib_after),
        history,
        residual_stats: Vec::new(),
    };
    Ok(params)
}

/// Per-token output residuals `e_t = W·(x_t − mask(x_t))` of one site, f64.
#[derive(Clone, Debug)]
pub struct Residuals {
    e: Vec<f64>,
    tokens: usize,
    d_out: usize,
}

impl Residuals {
    /// `w` is `[d_out, d_in]`, `x` is `[tokens, d_in]`.
    pub fn new(w: &Tensor, x: &Tensor, tau: f32) -> Result<Self> {
        let (tokens, d_in) = x.as_rows();
        if w.shape().len() != 2 || w.shape()[1] != d_in {
            return Err(Error::shape("residuals", format!("weight {:?} vs input {:?}", w.shape(), x.shape())));
        }
        if tokens == 0 {
            return Err(Error::InsufficientData("site saw no tokens".into()));
        }
        let d_out = w.shape()[0];
        let mut e = vec![0f64; tokens * d_out];
        for t in 0..tokens {
            let row = x.row(t);
            let out = &mut e[t * d_out..(t + 1) * d_out];
            for (j, &xj) in row.iter().enumerate() {
                if xj.abs() > tau || xj == 0.0 {
                    continue;
                }
                let xj = f64::from(xj);
                for (o, acc) in out.iter_mut().enumerate() {
                    *acc += f64::from(w.data()[o * d_in + j]) * xj;
                }
            }
        }
        Ok(Self { e, tokens, d_out })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// `Ē`, the mean residual; the squared-error optimal constant bias.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0f64; self.d_out];
        for row in self.e.chunks_exact(self.d_out) {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.tokens as f64);
        m
    }

    /// `L(b) = mean_t ‖e_t − b‖²`.
    pub fn loss(&self, b: &[f64]) -> Result<f64> {
        if b.len() != self.d_out {
            return Err(Error::shape("residuals", format!("bias of {} values, expected {}", b.len(), self.d_out)));
        }
        let total: f64 = self
            .e
            .chunks_exact(self.d_out)
            .map(|row| row.iter().zip(b).map(|(e, b)| (e - b).powi(2)).sum::<f64>())
            .sum();
        Ok(total / self.tokens as f64)
    }
}

struct ResidualMeanHook<'a> {
    model: &'a Model,
    profile: &'a SparsityProfile,
    sites: &'a BTreeSet<LinearSite>,
    alphas: BTreeMap<LinearSite, Tensor>,
    stats: Vec<ResidualStat>,
}

impl SiteHook for ResidualMeanHook<'_> {
    fn on_site_input(&mut self, site: LinearSite, x: &Tensor) -> Result<SiteEdit> {
        if !self.sites.contains(&site) {
            return Ok(SiteEdit::default());
        }
        let tau = self.profile.thresholds[&site];
        let (tokens, d_in) = x.as_rows();
        if tokens == 0 {
            return Err(Error::InsufficientData(format!("{site} saw no tokens")));
        }
        let mut mean = vec![0f64; d_in];
        for t in 0..tokens {
            for (m, &v) in mean.iter_mut().zip(x.row(t)) {
                if v.abs() <= tau {
                    *m += f64::from(v);
                }
            }
        }
        let alpha: Vec<f32> = mean.iter().map(|m| (m / tokens as f64) as f32).collect();
        let alpha = Tensor::checked("residual_mean", vec![d_in], alpha)?;
        let w = self.model.site_weight(site)?;
        let res = Residuals::new(w, x, tau)?;
        let b_star = res.mean();
        self.stats.push(ResidualStat {
            layer: site.layer,
            site: site.kind,
            tokens,
            loss_zero: res.loss(&vec![0.0; b_star.len()])?,
            loss_opt: res.loss(&b_star)?,
            bias_sq_norm: b_star.iter().map(|v| v * v).sum(),
        });
        let bias = matmul_nt(&alpha.reshape(&[1, d_in])?, w)?;
        self.alphas.insert(site, alpha);
        Ok(SiteEdit { threshold: None, bias: Some(bias) })
    }
}

/// Closed-form calibration: at each site, α is the mean masked-away input
/// `mean_t (x_t − mask(x_t))`, so `W·α = b⋆ = E[W·x − W·mask(x)]`.
///
/// Sites are fitted in execution order in one pass over the calibration
/// set; each sees inputs already corrected by the sites before it.
pub fn calibrate_residual_mean(
    model: &Model,
    calib_tokens: &[u32],
    profile: &SparsityProfile,
    sites: &BTreeSet<LinearSite>,
    seed: u64,
) -> Result<SpontaneousParams> {
    check_sites(model, profile, sites)?;
    let (ids, n_seq) = calibration_batch(model, calib_tokens)?;
    let mut hook = ResidualMeanHook { model, profile, sites, alphas: BTreeMap::new(), stats: Vec::new() };
    run(model, &ids, n_seq, profile.controls(), Some(&mut hook))?;
    Ok(SpontaneousParams {
        method: Method::ResidualMean,
        state: ParamState::Unfolded,
        alphas: hook.alphas,
        metadata: SponMeta {
            steps: 0,
            seed,
            kl_direction: String::new(),
            residual_stats: hook.stats,
            ..SponMeta::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};
    use crate::sparsify::{calibrate_thresholds, sparse_forward};
    use rand::{Rng, SeedableRng};

    fn tiny() -> Model {
        let c = ModelConfig { vocab_size: 64, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, context_len: 16, seed: 2, ..Default::default() };
        Model::init(&c).unwrap()
    }

    /// Larger weights than the init, so sparsification visibly moves the logits.
    fn sharp() -> Model {
        let mut m = tiny();
        for t in m.param_tensors_mut() {
            if t.shape().len() == 2 {
                *t = crate::tensor::scale(t, 25.0).unwrap();
            }
        }
        m
    }

    fn tokens(n: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..64)).collect()
    }

    fn downs(m: &Model) -> BTreeSet<LinearSite> {
        (0..m.config.n_layers).map(|l| LinearSite::new(l, SiteKind::DownProj)).collect()
    }

    fn random_alphas(m: &Model, sites: &BTreeSet<LinearSite>, seed: u64) -> SpontaneousParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SpontaneousParams::zeros(m, sites, Method::KlDistill).unwrap();
        for a in p.alphas.values_mut() {
            *a = Tensor::randn(a.shape(), 0.5, &mut rng);
        }
        p
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::matrix(1, 2, vec![40.0, -40.0]).unwrap();
        let q = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-9);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-9);
        assert!(kl_divergence(&p, &Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn zero_alpha_matches_sparse_forward() {
        let m = tiny();
        let sites = downs(&m);
        let profile = calibrate_thresholds(&m, &tokens(2048, 0), &m.config.all_sites().into_iter().collect(), 0.5, 0).unwrap();
        let p = SpontaneousParams::zeros(&m, &sites, Method::KlDistill).unwrap();
        let ids = tokens(32, 1);
        let a = spon_forward(&m, &ids, 2, &profile, &p).unwrap();
        assert!(a.bit_eq(&sparse_forward(&m, &ids, 2, &profile).unwrap()));
    }

    #[test]
    fn unit_alpha_adds_weight_column() {
        let m = tiny();
        let site = LinearSite::new(1, SiteKind::DownProj);
        let profile = SparsityProfile { thresholds: BTreeMap::from([(site, 0.0)]), ..SparsityProfile::empty() };
        let mut p = SpontaneousParams::zeros(&m, &BTreeSet::from([site]), Method::KlDistill).unwrap();
        let mut e1 = vec![0.0; 32];
        e1[1] = 1.0;
        p.alphas.insert(site, Tensor::vector(e1).unwrap());
        // oracle: the same shift as a bias equal to column 1 of W
        let w = m.site_weight(site).unwrap();
        let col: Vec<f32> = (0..16).map(|o| w.data()[o * 32 + 1]).collect();
        let mut with_bias = m.clone();
        with_bias.weights.biases.insert(site, Tensor::vector(col).unwrap());
        let ids = tokens(24, 3);
        let a = spon_forward(&m, &ids, 2, &profile, &p).unwrap();
        let b = forward(&with_bias, &ids, 2).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
        assert!(a.max_abs_diff(&forward(&m, &ids, 2).unwrap()).unwrap() > 1e-4);
    }

    #[test]
    fn fold_equivalence_and_bookkeeping() {
        let m = tiny();
        let sites: BTreeSet<_> = m.config.all_sites().into_iter().collect();
        let profile = calibrate_thresholds(&m, &tokens(2048, 4), &sites, 0.5, 0).unwrap();
        let p = random_alphas(&m, &sites, 5);
        let (folded, fp) = fold(&m, &p).unwrap();
        assert_eq!(fp.state, ParamState::Folded);
        assert!(fp.alphas.is_empty());
        let ids = tokens(64, 6);
        let a = spon_forward(&m, &ids, 4, &profile, &p).unwrap();
        let b = sparse_forward(&folded, &ids, 4, &profile).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
        let added: usize = sites.iter().map(|s| m.config.site_dims(s.kind).0).sum();
        assert_eq!(folded.parameter_count() - m.parameter_count(), added);
        assert!(matches!(fold(&folded, &fp), Err(Error::AlreadyFolded)));
        // folded params run as plain sparse
        assert!(spon_forward(&folded, &ids, 4, &profile, &fp).unwrap().bit_eq(&b));
    }

    #[test]
    fn zero_alpha_fold_is_identity() {
        let m = tiny();
        let p = SpontaneousParams::zeros(&m, &downs(&m), Method::KlDistill).unwrap();
        let (folded, _) = fold(&m, &p).unwrap();
        assert_eq!(folded, m);
    }

    #[test]
    fn one_dimensional_hand_example() {
        // W = [2], x ∈ {1, 3}, τ = 1 masks x = 1 only: residuals {2, 0}
        let w = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let x = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let r = Residuals::new(&w, &x, 1.0).unwrap();
        assert_eq!(r.mean(), vec![1.0]);
        assert_eq!(r.loss(&[0.0]).unwrap(), 2.0);
        assert_eq!(r.loss(&[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn residual_mean_zero_sparsity_gives_zero_alpha() {
        let m = tiny();
        let sites = downs(&m);
        let profile = SparsityProfile { thresholds: sites.iter().map(|s| (*s, 0.0)).collect(), ..SparsityProfile::empty() };
        let p = calibrate_residual_mean(&m, &tokens(2048, 7), &profile, &sites, 0).unwrap();
        assert!(p.alphas.values().all(|a| a.data().iter().all(|&v| v == 0.0)));
        assert!(p.metadata.residual_stats.iter().all(|s| s.loss_zero == 0.0));
    }

    #[test]
    fn residual_mean_reduces_site_error() {
        let m = tiny();
        let all: BTreeSet<_> = m.config.all_sites().into_iter().collect();
        let calib = tokens(2048, 8);
        let profile = calibrate_thresholds(&m, &calib, &all, 0.5, 0).unwrap();
        let p = calibrate_residual_mean(&m, &calib, &profile, &all, 0).unwrap();
        assert_eq!(p.metadata.residual_stats.len(), 14);
        for s in &p.metadata.residual_stats {
            let expect = s.loss_zero - s.bias_sq_norm;
            assert!((s.loss_opt - expect).abs() <= 1e-5 * s.loss_zero.max(1e-30), "{s:?}");
            assert!(s.loss_opt <= s.loss_zero);
        }
        assert!(calibrate_residual_mean(&m, &calib[..500], &profile, &all, 0).is_err());
        let unprofiled = SparsityProfile::empty();
        assert!(calibrate_residual_mean(&m, &calib, &unprofiled, &all, 0).is_err());
    }

    #[test]
    fn distill_zero_steps_and_zero_sparsity() {
        let m = tiny();
        let sites = downs(&m);
        let calib = tokens(2048, 9);
        let held = tokens(256, 10);
        let hyper = DistillHyper { steps: 0, block: 16, ..Default::default() };
        let profile = calibrate_thresholds(&m, &calib, &sites, 0.5, 0).unwrap();
        let p = calibrate_kl_distill(&m, &calib, &held, &profile, &sites, &hyper).unwrap();
        assert!(p.alphas.values().all(|a| a.data().iter().all(|&v| v == 0.0)));
        assert_eq!(p.metadata.final_kl, p.metadata.baseline_kl);
        assert!(p.metadata.baseline_kl.unwrap() > 0.0);

        let zero = SparsityProfile { thresholds: sites.iter().map(|s| (*s, 0.0)).collect(), ..SparsityProfile::empty() };
        let hyper = DistillHyper { steps: 3, block: 16, eval_every: 1, ..Default::default() };
        let p = calibrate_kl_distill(&m, &calib, &held, &zero, &sites, &hyper).unwrap();
        assert_eq!(p.metadata.baseline_kl, Some(0.0));
        assert!(p.alphas.values().all(|a| a.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn distill_improves_and_is_deterministic() {
        let m = sharp();
        let sites = downs(&m);
        let calib = tokens(2048, 11);
        let held = tokens(512, 12);
        let profile = calibrate_thresholds(&m, &calib, &m.config.all_sites().into_iter().collect(), 0.5, 0).unwrap();
        let hyper = DistillHyper { steps: 20, block: 16, lr: 1e-2, eval_every: 5, ..Default::default() };
        let a = calibrate_kl_distill(&m, &calib, &held, &profile, &sites, &hyper).unwrap();
        let meta = &a.metadata;
        assert!(meta.final_kl.unwrap() < meta.baseline_kl.unwrap(), "{meta:?}");
        assert_eq!(meta.history.len(), 5);
        for w in meta.history.windows(2) {
            assert!(w[1].best_heldout_kl <= w[0].best_heldout_kl);
        }
        let b = calibrate_kl_distill(&m, &calib, &held, &profile, &sites, &hyper).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn distill_divergence_reports_diagnostics() {
        let m = sharp();
        let sites = downs(&m);
        let calib = tokens(2048, 13);
        let profile = calibrate_thresholds(&m, &calib, &sites, 0.5, 0).unwrap();
        let hyper = DistillHyper { steps: 30, block: 16, lr: 1e38, eval_every: 1, ..Default::default() };
        match calibrate_kl_distill(&m, &calib, &tokens(256, 14), &profile, &sites, &hyper) {
            Err(Error::Diverged(msg)) => assert!(msg.contains("step"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn params_json_round_trip() {
        let m = tiny();
        let p = random_alphas(&m, &downs(&m), 15);
        let text = crate::artifact::to_json(&p).unwrap();
        let back: SpontaneousParams = crate::artifact::from_json(&text).unwrap();
        assert_eq!(back, p);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["method"], "kl_distill");
        assert_eq!(v["sites"][0]["alpha"].as_array().unwrap().len(), 32);
    }
}
