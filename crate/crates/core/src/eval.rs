//! Perplexity, divergence from the dense model, hidden-state shift, and the
//! injection-site ablations.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{fingerprint, fingerprint_json, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::model::{block_nll, io, nll_sum, run, LinearSite, MaskCounts, Model, ModelConfig, RunControls, SiteKind};
use crate::sparsify::{measure_sparsity, SparsityProfile};
use crate::spontaneous::{calibrate_kl_distill, DistillHyper, SpontaneousParams};
use crate::tensor::{kl_row, Tensor};

/// How a model is run.
#[derive(Clone, Copy, Debug)]
pub enum Variant<'a> {
    Dense,
    Sparse(&'a SparsityProfile),
    Spon(&'a SparsityProfile, &'a SpontaneousParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dense,
    Sparse,
    Spon,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Dense => "dense",
            Mode::Sparse => "sparse",
            Mode::Spon => "spon",
        })
    }
}

impl<'a> Variant<'a> {
    pub fn mode(&self) -> Mode {
        match self {
            Variant::Dense => Mode::Dense,
            Variant::Sparse(_) => Mode::Sparse,
            Variant::Spon(..) => Mode::Spon,
        }
    }

    pub fn controls(&self) -> RunControls<'a> {
        match *self {
            Variant::Dense => RunControls::default(),
            Variant::Sparse(p) => p.controls(),
            Variant::Spon(p, s) => RunControls { thresholds: Some(&p.thresholds), alphas: Some(&s.alphas) },
        }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        match self {
            Variant::Dense => Ok(()),
            Variant::Sparse(p) => p.validate(model),
            Variant::Spon(p, s) => {
                p.validate(model)?;
                s.validate(model)
            }
        }
    }
}

/// `exp` of the mean next-token NLL over non-overlapping blocks.
pub fn perplexity(model: &Model, variant: Variant<'_>, tokens: &[u32], block: usize) -> Result<f64> {
    variant.validate(model)?;
    Ok(block_nll(model, variant.controls(), tokens, block)?.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprShift {
    /// Mean per-token L2 distance between the two hidden states.
    pub mean_l2: f64,
    /// `‖mean(dense) − mean(other)‖`.
    pub centroid_shift: f64,
    /// Total variance of `other` over total variance of `dense`.
    pub variance_ratio: f64,
}

/// Final residual-stream states for a fixed prompt set.
#[derive(Clone, Debug)]
pub struct HiddenCapture {
    pub prompts_id: String,
    /// `[prompts·len, d_model]`
    pub hidden: Tensor,
}

/// `n` windows of `len` tokens spread evenly over `tokens`.
pub fn prompt_set(tokens: &[u32], n: usize, len: usize) -> Result<Vec<Vec<u32>>> {
    if n == 0 || len == 0 || tokens.len() < len {
        return Err(Error::InsufficientData(format!("cannot cut {n} prompts of {len} tokens from {}", tokens.len())));
    }
    let span = tokens.len() - len;
    Ok((0..n)
        .map(|i| {
            let s = if n == 1 { 0 } else { i * span / (n - 1) };
            tokens[s..s + len].to_vec()
        })
        .collect())
}

pub fn capture_hidden(model: &Model, variant: Variant<'_>, prompts: &[Vec<u32>]) -> Result<HiddenCapture> {
    variant.validate(model)?;
    let len = prompts.first().map(Vec::len).unwrap_or(0);
    if len == 0 || prompts.iter().any(|p| p.len() != len) {
        return Err(Error::InvalidArgument("prompts must be non-empty and of equal length".into()));
    }
    let ids: Vec<u32> = prompts.concat();
    let bytes: Vec<u8> = ids.iter().flat_map(|t| t.to_le_bytes()).chain((len as u32).to_le_bytes()).collect();
    let mut rows = Vec::with_capacity(ids.len() * model.config.d_model);
    for chunk in ids.chunks(16 * len) {
        let out = run(model, chunk, chunk.len() / len, variant.controls(), None)?;
        rows.extend_from_slice(out.hidden.data());
    }
    Ok(HiddenCapture { prompts_id: fingerprint(&bytes), hidden: Tensor::matrix(ids.len(), model.config.d_model, rows)? })
}

fn column_stats(x: &Tensor) -> (Vec<f64>, f64) {
    let (n, d) = x.as_rows();
    let mut mean = vec![0f64; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += f64::from(*v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = 0.0;
    for i in 0..n {
        var += x.row(i).iter().zip(&mean).map(|(v, m)| (f64::from(*v) - m).powi(2)).sum::<f64>();
    }
    (mean, var / n as f64)
}

/// Compares two captures of the same prompts. Two identical captures give
/// zero distances and a variance ratio of exactly 1.
pub fn repr_shift(dense: &HiddenCapture, other: &HiddenCapture) -> Result<ReprShift> {
    if dense.prompts_id != other.prompts_id || dense.hidden.shape() != other.hidden.shape() {
        return Err(Error::InvalidArgument("captures come from different prompts".into()));
    }
    let (a, b) = (&dense.hidden, &other.hidden);
    let (n, _) = a.as_rows();
    if n == 0 {
        return Err(Error::InsufficientData("empty capture".into()));
    }
    let mean_l2 = (0..n)
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n as f64;
    let (ma, va) = column_stats(a);
    let (mb, vb) = column_stats(b);
    let centroid_shift = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let variance_ratio = if va == vb { 1.0 } else if va == 0.0 { f64::INFINITY } else { vb / va };
    Ok(ReprShift { mean_l2, centroid_shift, variance_ratio })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Variance along each component.
    pub explained_variance: [f64; 2],
    /// `[n, 2]` projections.
    pub coords: Vec<[f64; 2]>,
}

/// Top two principal components by power iteration with deflation. A
/// component with no remaining variance comes back as the zero vector.
pub fn pca2(points: &Tensor, seed: u64) -> Result<Pca2> {
    if points.shape().len() != 2 {
        return Err(Error::shape("pca2", format!("expected [n, d], got {:?}", points.shape())));
    }
    let (n, d) = points.as_rows();
    if n < 3 {
        return Err(Error::InsufficientData(format!("pca2 needs at least 3 points, got {n}")));
    }
    let (mean, total_var) = column_stats(points);
    let mut cov = vec![0f64; d * d];
    for i in 0..n {
        let c: Vec<f64> = points.row(i).iter().zip(&mean).map(|(v, m)| f64::from(*v) - m).collect();
        for r in 0..d {
            for (k, ck) in c.iter().enumerate() {
                cov[r * d + k] += c[r] * ck;
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= n as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let apply = |cov: &[f64], v: &[f64]| -> Vec<f64> {
        (0..d).map(|r| cov[r * d..(r + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let floor = 1e-12 * total_var.max(f64::MIN_POSITIVE);
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0; 2];
    for k in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w = apply(&cov, &v);
            let nw = norm(&w);
            if nw <= floor {
                lambda = 0.0;
                break;
            }
            let next: Vec<f64> = w.iter().map(|x| x / nw).collect();
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            lambda = nw;
            if delta < 1e-13 {
                break;
            }
        }
        if lambda <= floor {
            break;
        }
        // sign convention: largest-magnitude entry positive
        let pivot = v.iter().copied().fold(0.0, |acc: f64, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let rq: f64 = apply(&cov, &v).iter().zip(&v).map(|(a, b)| a * b).sum();
        for r in 0..d {
            for c in 0..d {
                cov[r * d + c] -= rq * v[r] * v[c];
            }
        }
        explained[k] = rq.max(0.0);
        components[k] = v;
    }
    let coords = (0..n)
        .map(|i| {
            let c: Vec<f64> = points.row(i).iter().zip(&mean).map(|(v, m)| f64::from(*v) - m).collect();
            [0, 1].map(|k| components[k].iter().zip(&c).map(|(a, b)| a * b).sum())
        })
        .collect();
    Ok(Pca2 { mean, components, explained_variance: explained, coords })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fingerprints {
    pub model: String,
    pub dense: String,
    pub profile: Option<String>,
    pub params: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub perplexity: f64,
    pub mean_nll: f64,
    /// Mean token KL(dense ‖ this model).
    pub kl_vs_dense: f64,
    /// Overall masked fraction of sparsified site inputs (0 when dense).
    pub sparsity: f64,
    pub target_sparsity: f64,
    pub repr_shift: ReprShift,
    pub tokens: usize,
    pub block: usize,
    pub fingerprints: Fingerprints,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "mode={} ppl={:.6} kl={:.6} sparsity={:.4}",
            self.mode, self.perplexity, self.kl_vs_dense, self.sparsity
        )
    }
}

/// Number of prompts and their length for the representation-shift capture.
pub const REPR_PROMPTS: usize = 50;
pub const REPR_PROMPT_LEN: usize = 64;

/// Full evaluation of `model` run as `variant` on `tokens`, against the
/// dense reference `dense` (usually the same weights without biases).
pub fn evaluate(dense: &Model, model: &Model, variant: Variant<'_>, tokens: &[u32], block: usize) -> Result<EvalReport> {
    if dense.config != model.config {
        return Err(Error::InvalidArgument("dense reference has a different config".into()));
    }
    variant.validate(model)?;
    if tokens.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 tokens, got {}", tokens.len())));
    }
    let block = block.min(model.config.context_len).max(1);
    let controls = variant.controls();
    let v = model.config.vocab_size;
    let predicted = tokens.len() - 1;
    let full = predicted / block;
    let (mut nll, mut kl) = (0.0, 0.0);
    let mut counts = MaskCounts::default();
    let (mut p, mut q) = (vec![0f64; v], vec![0f64; v]);
    let mut score = |ids: &[u32], targets: &[u32], n: usize| -> Result<()> {
        let out = run(model, ids, n, controls, None)?;
        let reference = run(dense, ids, n, RunControls::default(), None)?.logits;
        nll += nll_sum(&out.logits, targets)?;
        kl += reference
            .data()
            .chunks_exact(v)
            .zip(out.logits.data().chunks_exact(v))
            .map(|(a, b)| kl_row(a, b, &mut p, &mut q))
            .sum::<f64>();
        counts.merge(&out.counts);
        Ok(())
    };
    // same batching as block_nll, so mean_nll matches it exactly
    let mut start = 0;
    while start < full {
        let n = 16.min(full - start);
        let ids = &tokens[start * block..(start + n) * block];
        let targets = &tokens[start * block + 1..(start + n) * block + 1];
        score(ids, targets, n)?;
        start += n;
    }
    let tail = predicted - full * block;
    if tail > 0 {
        let s = full * block;
        score(&tokens[s..s + tail], &tokens[s + 1..], 1)?;
    }
    let mean_nll = nll / predicted as f64;

    let len = REPR_PROMPT_LEN.min(model.config.context_len).min(tokens.len());
    let prompts = prompt_set(tokens, REPR_PROMPTS, len)?;
    let shift = repr_shift(
        &capture_hidden(dense, Variant::Dense, &prompts)?,
        &capture_hidden(model, variant, &prompts)?,
    )?;

    let (profile, params) = match variant {
        Variant::Dense => (None, None),
        Variant::Sparse(p) => (Some(p), None),
        Variant::Spon(p, s) => (Some(p), Some(s)),
    };
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        mode: variant.mode(),
        perplexity: mean_nll.exp(),
        mean_nll,
        kl_vs_dense: kl / predicted as f64,
        sparsity: measure_sparsity(&counts).overall,
        target_sparsity: profile.map_or(0.0, |p| p.target_sparsity),
        repr_shift: shift,
        tokens: tokens.len(),
        block,
        fingerprints: Fingerprints {
            model: fingerprint(&io::to_bytes(model)?),
            dense: fingerprint(&io::to_bytes(dense)?),
            profile: profile.map(fingerprint_json).transpose()?,
            params: params.map(fingerprint_json).transpose()?,
        },
    })
}

/// A named group of injection sites.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSet {
    pub label: String,
    pub sites: BTreeSet<LinearSite>,
}

impl SiteSet {
    /// `kinds` at every layer.
    pub fn across_layers(label: &str, config: &ModelConfig, kinds: &[SiteKind]) -> Self {
        let sites = (0..config.n_layers).flat_map(|l| kinds.iter().map(move |&k| LinearSite::new(l, k))).collect();
        Self { label: label.to_string(), sites }
    }
}

/// Labels of the five candidate injection placements.
pub const CANDIDATE_SITE_SETS: [&str; 5] = ["k_v", "up_gate", "q_down", "o_down", "down"];

/// The five candidate placements, then all sites, attention-only and MLP-only.
pub fn default_site_sets(config: &ModelConfig) -> Vec<SiteSet> {
    use SiteKind::*;
    let set = |label, kinds: &[SiteKind]| SiteSet::across_layers(label, config, kinds);
    vec![
        set("k_v", &[KProj, VProj]),
        set("up_gate", &[UpProj, GateProj]),
        set("q_down", &[QProj, DownProj]),
        set("o_down", &[OProj, DownProj]),
        set("down", &[DownProj]),
        set("all", &SiteKind::ALL),
        set("attention", &[QProj, KProj, VProj, OProj]),
        set("mlp", &[GateProj, UpProj, DownProj]),
    ]
}

/// Shared inputs of every ablation run.
#[derive(Clone, Copy, Debug)]
pub struct AblationSetup<'a> {
    pub dense: &'a Model,
    pub calib_tokens: &'a [u32],
    /// Held-out tokens for distillation checkpointing.
    pub monitor_tokens: &'a [u32],
    pub eval_tokens: &'a [u32],
    pub profile: &'a SparsityProfile,
    pub hyper: &'a DistillHyper,
    pub eval_block: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub label: String,
    pub layer: Option<usize>,
    pub sites: Vec<LinearSite>,
    pub distill_kl: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub schema_version: u32,
    pub kind: String,
    pub target_sparsity: f64,
    pub seed: u64,
    pub entries: Vec<AblationEntry>,
}

impl AblationResult {
    /// 1-based rank of `label` by perplexity among `labels`.
    pub fn rank_among(&self, label: &str, labels: &[&str]) -> Option<usize> {
        let mut pool: Vec<&AblationEntry> = self.entries.iter().filter(|e| labels.contains(&e.label.as_str())).collect();
        pool.sort_by(|a, b| a.report.perplexity.total_cmp(&b.report.perplexity));
        pool.iter().position(|e| e.label == label).map(|i| i + 1)
    }
}

fn ablation_entry(setup: &AblationSetup<'_>, label: String, layer: Option<usize>, sites: &BTreeSet<LinearSite>) -> Result<AblationEntry> {
    if sites.is_empty() {
        return Err(Error::InvalidArgument(format!("site set {label:?} is empty")));
    }
    let params = calibrate_kl_distill(setup.dense, setup.calib_tokens, setup.monitor_tokens, setup.profile, sites, setup.hyper)?;
    let report = evaluate(setup.dense, setup.dense, Variant::Spon(setup.profile, &params), setup.eval_tokens, setup.eval_block)?;
    Ok(AblationEntry {
        label,
        layer,
        sites: sites.iter().copied().collect(),
        distill_kl: params.metadata.final_kl.unwrap_or(f64::NAN),
        report,
    })
}

/// Distils α for each site set under the same budget and seed and
/// evaluates the result.
pub fn ablate_sites(setup: &AblationSetup<'_>, sets: &[SiteSet]) -> Result<AblationResult> {
    let entries = sets
        .iter()
        .map(|s| ablation_entry(setup, s.label.clone(), None, &s.sites))
        .collect::<Result<_>>()?;
    Ok(AblationResult {
        schema_version: SCHEMA_VERSION,
        kind: "sites".into(),
        target_sparsity: setup.profile.target_sparsity,
        seed: setup.hyper.seed,
        entries,
    })
}

/// α on a single layer's down projection, one layer at a time.
pub fn ablate_layers(setup: &AblationSetup<'_>) -> Result<AblationResult> {
    let entries = (0..setup.dense.config.n_layers)
        .map(|l| {
            let site = BTreeSet::from([LinearSite::new(l, SiteKind::DownProj)]);
            ablation_entry(setup, format!("layer_{l}"), Some(l), &site)
        })
        .collect::<Result<_>>()?;
    Ok(AblationResult {
        schema_version: SCHEMA_VERSION,
        kind: "layers".into(),
        target_sparsity: setup.profile.target_sparsity,
        seed: setup.hyper.seed,
        entries,
    })
}

/// Header of [`ablation_csv`].
pub const ABLATION_CSV_COLUMNS: [&str; 11] = [
    "kind",
    "label",
    "layer",
    "sites",
    "target_sparsity",
    "sparsity",
    "perplexity",
    "mean_nll",
    "kl_vs_dense",
    "mean_l2",
    "distill_kl",
];

/// One row per entry; `layer` is `all` for sets spanning every layer and
/// `sites` lists the distinct site kinds joined by `+`.
pub fn ablation_csv(result: &AblationResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(ABLATION_CSV_COLUMNS).map_err(csv_err)?;
    for e in &result.entries {
        let kinds: BTreeSet<SiteKind> = e.sites.iter().map(|s| s.kind).collect();
        let kinds: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
        let r = &e.report;
        w.write_record([
            result.kind.clone(),
            e.label.clone(),
            e.layer.map_or("all".to_string(), |l| l.to_string()),
            kinds.join("+"),
            r.target_sparsity.to_string(),
            r.sparsity.to_string(),
            r.perplexity.to_string(),
            r.mean_nll.to_string(),
            r.kl_vs_dense.to_string(),
            r.repr_shift.mean_l2.to_string(),
            e.distill_kl.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Header of [`pca_csv`].
pub const PCA_CSV_COLUMNS: [&str; 5] = ["mode", "prompt", "position", "pc1", "pc2"];

/// Rows of `coords` labelled by mode, in the order the captures were stacked.
pub fn pca_csv(labels: &[Mode], prompt_len: usize, pca: &Pca2) -> Result<String> {
    let per_mode = pca.coords.len() / labels.len().max(1);
    if per_mode * labels.len() != pca.coords.len() || prompt_len == 0 || !per_mode.is_multiple_of(prompt_len) {
        return Err(Error::shape("pca_csv", format!("{} points for {} modes", pca.coords.len(), labels.len())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(PCA_CSV_COLUMNS).map_err(csv_err)?;
    for (i, c) in pca.coords.iter().enumerate() {
        let mode = labels[i / per_mode];
        let j = i % per_mode;
        w.write_record([
            mode.to_string(),
            (j / prompt_len).to_string(),
            (j % prompt_len).to_string(),
            c[0].to_string(),
            c[1].to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
