use std::collections::{BTreeMap, BTreeSet};

use super::{LinearSite, Model, ModelConfig, SiteKind};
use crate::error::{Error, Result};
use crate::tensor::{softmax_row_f64, Tape, Tensor, Var};

/// Tape handles for every model tensor.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<[Var; 9]>,
    pub final_norm: Var,
    pub unembed: Var,
    pub biases: BTreeMap<LinearSite, Var>,
}

impl ModelVars {
    /// All tensors as constants (inference, or training something else).
    pub fn constants(tape: &mut Tape, model: &Model) -> Self {
        Self::build(tape, model, false)
    }

    /// Trainable tensors registered as parameters, biases as constants.
    pub fn params(tape: &mut Tape, model: &Model) -> Self {
        Self::build(tape, model, true)
    }

    fn build(tape: &mut Tape, model: &Model, trainable: bool) -> Self {
        let w = &model.weights;
        let mut leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let tok_emb = leaf(&w.tok_emb);
        let pos_emb = leaf(&w.pos_emb);
        let layers = w
            .layers
            .iter()
            .map(|l| {
                [
                    leaf(&l.attn_norm),
                    leaf(&l.q_proj),
                    leaf(&l.k_proj),
                    leaf(&l.v_proj),
                    leaf(&l.o_proj),
                    leaf(&l.mlp_norm),
                    leaf(&l.gate_proj),
                    leaf(&l.up_proj),
                    leaf(&l.down_proj),
                ]
            })
            .collect();
        let final_norm = leaf(&w.final_norm);
        let unembed = leaf(&w.unembed);
        let biases = w.biases.iter().map(|(s, b)| (*s, tape.constant(b.clone()))).collect();
        Self { tok_emb, pos_emb, layers, final_norm, unembed, biases }
    }

    /// Trainable handles in the same order as [`Model::param_tensors_mut`].
    pub fn param_list(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }

    fn site(&self, site: LinearSite) -> Var {
        let idx = match site.kind {
            SiteKind::QProj => 1,
            SiteKind::KProj => 2,
            SiteKind::VProj => 3,
            SiteKind::OProj => 4,
            SiteKind::GateProj => 6,
            SiteKind::UpProj => 7,
            SiteKind::DownProj => 8,
        };
        self.layers[site.layer][idx]
    }
}

/// Observes (and optionally edits) each linear site's input during a forward
/// pass. Sites are visited in execution order.
pub trait SiteHook {
    fn on_site_input(&mut self, _site: LinearSite, _input: &Tensor) -> Result<SiteEdit> {
        Ok(SiteEdit::default())
    }

    /// Residual stream after the last block, before the final norm.
    fn on_final_hidden(&mut self, _hidden: &Tensor) {}
}

/// Per-site overrides returned by a [`SiteHook`].
#[derive(Clone, Debug, Default)]
pub struct SiteEdit {
    /// Masking threshold to use instead of the run's configured one.
    pub threshold: Option<f32>,
    /// Extra bias added to the site output, after any stored bias.
    pub bias: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SiteCount {
    pub masked: u64,
    pub total: u64,
}

/// Exact masked/total entry counts per sparsified site.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskCounts {
    pub sites: BTreeMap<LinearSite, SiteCount>,
}

impl MaskCounts {
    fn record(&mut self, site: LinearSite, masked: usize, total: usize) {
        let c = self.sites.entry(site).or_default();
        c.masked += masked as u64;
        c.total += total as u64;
    }

    pub fn merge(&mut self, other: &MaskCounts) {
        for (site, c) in &other.sites {
            let e = self.sites.entry(*site).or_default();
            e.masked += c.masked;
            e.total += c.total;
        }
    }
}

/// What a forward pass does beyond the dense computation.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunControls<'a> {
    /// Per-site magnitude thresholds; sites absent from the map are dense.
    pub thresholds: Option<&'a BTreeMap<LinearSite, f32>>,
    /// Per-site spontaneous activation vectors, each of length `d_in`.
    pub alphas: Option<&'a BTreeMap<LinearSite, Tensor>>,
}

pub struct Traced {
    /// `[batch·seq, vocab]`
    pub logits: Var,
    /// `[batch·seq, d_model]`
    pub hidden: Var,
    pub counts: MaskCounts,
}

pub struct RunOutput {
    /// `[batch, seq, vocab]`
    pub logits: Tensor,
    /// `[batch·seq, d_model]`, final residual stream before the last norm.
    pub hidden: Tensor,
    pub counts: MaskCounts,
}

/// Inputs captured at the requested sites plus the final residual stream.
#[derive(Clone, Debug)]
pub struct HookCapture {
    /// Pre-matmul inputs, `[batch·seq, d_in(site)]`.
    pub inputs: BTreeMap<LinearSite, Tensor>,
    pub final_hidden: Tensor,
}

fn check_tokens(config: &ModelConfig, ids: &[u32], batch: usize) -> Result<usize> {
    if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
        return Err(Error::InvalidArgument(format!("{} token ids cannot form {batch} equal sequences", ids.len())));
    }
    let seq = ids.len() / batch;
    if seq > config.context_len {
        return Err(Error::SequenceTooLong { len: seq, max: config.context_len });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange { id, vocab: config.vocab_size });
    }
    Ok(seq)
}

struct SiteRunner<'a, 'h> {
    vars: &'a ModelVars,
    thresholds: Option<&'a BTreeMap<LinearSite, f32>>,
    alphas: &'a BTreeMap<LinearSite, Var>,
    hook: Option<&'h mut dyn SiteHook>,
    counts: MaskCounts,
}

impl SiteRunner<'_, '_> {
    /// `y = W·mask(x) + W·α + b (+ hook bias)`, each term present only when
    /// configured.
    fn linear(&mut self, tape: &mut Tape, site: LinearSite, x: Var) -> Result<Var> {
        let edit = match self.hook.as_deref_mut() {
            Some(h) => h.on_site_input(site, tape.value(x))?,
            None => SiteEdit::default(),
        };
        let tau = edit.threshold.or_else(|| self.thresholds.and_then(|t| t.get(&site).copied()));
        let input = match tau {
            Some(tau) => {
                let total = tape.value(x).len();
                let (masked, n) = tape.mask(x, tau)?;
                self.counts.record(site, n, total);
                masked
            }
            None => x,
        };
        let w = self.vars.site(site);
        let mut y = tape.matmul_nt(input, w)?;
        if let Some(&alpha) = self.alphas.get(&site) {
            let shift = tape.matmul_nt(alpha, w)?;
            y = tape.add_row(y, shift)?;
        }
        if let Some(&b) = self.vars.biases.get(&site) {
            y = tape.add_row(y, b)?;
        }
        if let Some(extra) = edit.bias {
            let b = tape.constant(extra);
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }
}

/// Records a forward pass on `tape`. `alphas` must hold `[1, d_in]` handles.
#[allow(clippy::too_many_arguments)]
pub fn trace(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    ids: &[u32],
    batch: usize,
    thresholds: Option<&BTreeMap<LinearSite, f32>>,
    alphas: &BTreeMap<LinearSite, Var>,
    hook: Option<&mut dyn SiteHook>,
) -> Result<Traced> {
    let seq = check_tokens(config, ids, batch)?;
    for site in alphas.keys().chain(thresholds.into_iter().flat_map(|t| t.keys())) {
        config.check_site(*site)?;
    }
    let positions: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
    let tok = tape.embedding(vars.tok_emb, ids)?;
    let pos = tape.embedding(vars.pos_emb, &positions)?;
    let mut h = tape.add(tok, pos)?;
    let mut sites = SiteRunner { vars, thresholds, alphas, hook, counts: MaskCounts::default() };
    let eps = config.rms_eps;
    for (layer, lv) in vars.layers.iter().enumerate() {
        let site = |kind| LinearSite::new(layer, kind);
        let x = tape.rms_norm(h, lv[0], eps)?;
        let q = sites.linear(tape, site(SiteKind::QProj), x)?;
        let k = sites.linear(tape, site(SiteKind::KProj), x)?;
        let v = sites.linear(tape, site(SiteKind::VProj), x)?;
        let a = tape.causal_attention(q, k, v, batch, seq, config.n_heads)?;
        let o = sites.linear(tape, site(SiteKind::OProj), a)?;
        h = tape.add(h, o)?;
        let x = tape.rms_norm(h, lv[5], eps)?;
        let gate = sites.linear(tape, site(SiteKind::GateProj), x)?;
        let up = sites.linear(tape, site(SiteKind::UpProj), x)?;
        let act = tape.silu(gate)?;
        let m = tape.mul(act, up)?;
        let down = sites.linear(tape, site(SiteKind::DownProj), m)?;
        h = tape.add(h, down)?;
    }
    if let Some(hook) = sites.hook.as_deref_mut() {
        hook.on_final_hidden(tape.value(h));
    }
    let x = tape.rms_norm(h, vars.final_norm, eps)?;
    let logits = tape.matmul_nt(x, vars.unembed)?;
    Ok(Traced { logits, hidden: h, counts: sites.counts })
}

/// Runs the model without gradients.
pub fn run(
    model: &Model,
    ids: &[u32],
    batch: usize,
    controls: RunControls<'_>,
    hook: Option<&mut dyn SiteHook>,
) -> Result<RunOutput> {
    let mut tape = Tape::new();
    let vars = ModelVars::constants(&mut tape, model);
    let mut alpha_vars = BTreeMap::new();
    for (site, alpha) in controls.alphas.into_iter().flatten() {
        let d_in = model.config.site_dims(site.kind).1;
        if alpha.len() != d_in {
            return Err(Error::shape("spontaneous", format!("alpha for {site} has {} values, expected {d_in}", alpha.len())));
        }
        alpha_vars.insert(*site, tape.constant(alpha.reshape(&[1, d_in])?));
    }
    let traced = trace(&mut tape, &vars, &model.config, ids, batch, controls.thresholds, &alpha_vars, hook)?;
    let seq = ids.len() / batch;
    let logits = tape.value(traced.logits).reshape(&[batch, seq, model.config.vocab_size])?;
    Ok(RunOutput { logits, hidden: tape.value(traced.hidden).clone(), counts: traced.counts })
}

/// Dense logits `[batch, seq, vocab]` for `ids` laid out as `batch` rows.
pub fn forward(model: &Model, ids: &[u32], batch: usize) -> Result<Tensor> {
    Ok(run(model, ids, batch, RunControls::default(), None)?.logits)
}

struct Capture<'a> {
    sites: &'a BTreeSet<LinearSite>,
    inputs: BTreeMap<LinearSite, Tensor>,
    hidden: Option<Tensor>,
}

impl SiteHook for Capture<'_> {
    fn on_site_input(&mut self, site: LinearSite, input: &Tensor) -> Result<SiteEdit> {
        if self.sites.contains(&site) {
            self.inputs.insert(site, input.clone());
        }
        Ok(SiteEdit::default())
    }

    fn on_final_hidden(&mut self, hidden: &Tensor) {
        self.hidden = Some(hidden.clone());
    }
}

/// Dense forward that also records the inputs of `sites`.
pub fn forward_hooked(
    model: &Model,
    ids: &[u32],
    batch: usize,
    sites: &BTreeSet<LinearSite>,
) -> Result<(Tensor, HookCapture)> {
    for s in sites {
        model.config.check_site(*s)?;
    }
    let mut cap = Capture { sites, inputs: BTreeMap::new(), hidden: None };
    let out = run(model, ids, batch, RunControls::default(), Some(&mut cap))?;
    let final_hidden = cap.hidden.unwrap_or(out.hidden);
    Ok((out.logits, HookCapture { inputs: cap.inputs, final_hidden }))
}

/// Sum of next-token negative log-likelihoods over the rows of `logits`
/// (any shape ending in the vocabulary axis), in f64.
pub fn nll_sum(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let (rows, vocab) = logits.as_rows();
    if rows != targets.len() {
        return Err(Error::shape("nll", format!("{rows} rows vs {} targets", targets.len())));
    }
    let mut buf = vec![0f64; vocab];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let t = t as usize;
        if t >= vocab {
            return Err(Error::TokenOutOfRange { id: t as u32, vocab });
        }
        let (log_z, max) = softmax_row_f64(row, &mut buf);
        total += log_z + max - f64::from(row[t]);
    }
    Ok(total)
}

/// Mean next-token NLL over non-overlapping blocks of `tokens`: block `i`
/// feeds `tokens[i·block ..]` (at most `block` ids) and predicts the ids one
/// step later. The final block may be shorter. Full blocks are batched.
pub fn block_nll(model: &Model, controls: RunControls<'_>, tokens: &[u32], block: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 tokens, got {}", tokens.len())));
    }
    let block = block.min(model.config.context_len).max(1);
    let predicted = tokens.len() - 1;
    let full = predicted / block;
    const BATCH: usize = 16;
    let mut total = 0.0;
    let mut start = 0;
    while start < full {
        let n = BATCH.min(full - start);
        let mut ids = Vec::with_capacity(n * block);
        let mut targets = Vec::with_capacity(n * block);
        for b in start..start + n {
            ids.extend_from_slice(&tokens[b * block..(b + 1) * block]);
            targets.extend_from_slice(&tokens[b * block + 1..(b + 1) * block + 1]);
        }
        let out = run(model, &ids, n, controls, None)?;
        total += nll_sum(&out.logits, &targets)?;
        start += n;
    }
    let tail = predicted - full * block;
    if tail > 0 {
        let s = full * block;
        let out = run(model, &tokens[s..s + tail], 1, controls, None)?;
        total += nll_sum(&out.logits, &tokens[s + 1..])?;
    }
    Ok(total / predicted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul_nt, rms_norm};

    fn tiny() -> Model {
        let c = ModelConfig { vocab_size: 32, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 24, context_len: 8, seed: 3, ..Default::default() };
        Model::init(&c).unwrap()
    }

    #[test]
    fn logits_shape_contract() {
        let m = Model::init(&ModelConfig::default()).unwrap();
        let l = forward(&m, &[65], 1).unwrap();
        assert_eq!(l.shape(), &[1, 1, 256]);
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let m = tiny();
        assert!(matches!(forward(&m, &[40], 1), Err(Error::TokenOutOfRange { id: 40, .. })));
        assert!(matches!(forward(&m, &[1; 9], 1), Err(Error::SequenceTooLong { len: 9, max: 8 })));
        assert!(forward(&m, &[1; 5], 2).is_err());
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let m = tiny();
        let a = [1u32, 2, 3, 4, 5, 6];
        let b = [7u32, 8, 9, 10, 11, 12];
        let ab: Vec<u32> = a.iter().chain(&b).copied().collect();
        let ba: Vec<u32> = b.iter().chain(&a).copied().collect();
        let lab = forward(&m, &ab, 2).unwrap();
        let lba = forward(&m, &ba, 2).unwrap();
        let half = lab.len() / 2;
        assert_eq!(&lab.data()[..half], &lba.data()[half..]);
        assert_eq!(&lab.data()[half..], &lba.data()[..half]);
    }

    #[test]
    fn future_tokens_do_not_affect_past_logits() {
        let m = tiny();
        let base = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let l0 = forward(&m, &base, 1).unwrap();
        for t in 0..base.len() {
            let mut changed = base;
            changed[t] = (changed[t] + 7) % 32;
            let l1 = forward(&m, &changed, 1).unwrap();
            let v = 32;
            assert_eq!(&l0.data()[..t * v], &l1.data()[..t * v], "position {t}");
            assert_ne!(&l0.data()[t * v..], &l1.data()[t * v..]);
        }
    }

    #[test]
    fn hooked_forward_matches_and_captures() {
        let m = tiny();
        let ids = [1u32, 2, 3, 4, 5, 6, 7, 8];
        let dense = forward(&m, &ids, 2).unwrap();
        let (l, cap) = forward_hooked(&m, &ids, 2, &BTreeSet::new()).unwrap();
        assert!(l.bit_eq(&dense));
        assert!(cap.inputs.is_empty());
        let sites: BTreeSet<_> = (0..2).map(|l| LinearSite::new(l, SiteKind::DownProj)).collect();
        let (l, cap) = forward_hooked(&m, &ids, 2, &sites).unwrap();
        assert!(l.bit_eq(&dense));
        assert_eq!(cap.inputs.len(), 2);
        for t in cap.inputs.values() {
            assert_eq!(t.shape(), &[8, 24]);
        }
    }

    #[test]
    fn q_proj_capture_equals_recomputed_norm_input() {
        let m = tiny();
        let ids = [5u32, 6, 7];
        let site = LinearSite::new(0, SiteKind::QProj);
        let (_, cap) = forward_hooked(&m, &ids, 1, &BTreeSet::from([site])).unwrap();
        let w = &m.weights;
        let mut h = Vec::new();
        for (p, &id) in ids.iter().enumerate() {
            h.extend(w.tok_emb.row(id as usize).iter().zip(w.pos_emb.row(p)).map(|(a, b)| a + b));
        }
        let h = Tensor::matrix(3, 16, h).unwrap();
        let x = rms_norm(&h, &w.layers[0].attn_norm, m.config.rms_eps).unwrap();
        assert!(cap.inputs[&site].bit_eq(&x));
        // and feeding it through q_proj is what the model does
        assert_eq!(matmul_nt(&x, &w.layers[0].q_proj).unwrap().shape(), &[3, 16]);
    }

    #[test]
    fn zero_thresholds_leave_logits_unchanged() {
        let m = tiny();
        let ids = [1u32, 2, 3, 4];
        let th: BTreeMap<_, _> = m.config.all_sites().into_iter().map(|s| (s, 0.0)).collect();
        let out = run(&m, &ids, 1, RunControls { thresholds: Some(&th), alphas: None }, None).unwrap();
        assert!(out.logits.bit_eq(&forward(&m, &ids, 1).unwrap()));
        assert_eq!(out.counts.sites.len(), 14);
        assert!(out.counts.sites.values().all(|c| c.masked == 0));
    }

    #[test]
    fn block_nll_of_short_input() {
        let m = tiny();
        assert!(block_nll(&m, RunControls::default(), &[1], 8).is_err());
        let v = block_nll(&m, RunControls::default(), &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11], 4).unwrap();
        // near-uniform logits at init
        assert!((v - 32f64.ln()).abs() < 0.1, "{v}");
    }
}
