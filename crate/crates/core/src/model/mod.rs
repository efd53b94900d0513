//! Byte-level decoder-only transformer.
//!
//! Llama-style blocks: RMSNorm pre-norm, causal multi-head attention, SwiGLU
//! MLP, learned absolute position embeddings. Each block has seven named
//! linear maps ([`SiteKind`]); those are the places where inputs can be
//! sparsified and where spontaneous activations or biases can be attached.

mod forward;
pub mod io;
mod train;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use forward::{
    block_nll, forward, forward_hooked, nll_sum, run, trace, HookCapture, MaskCounts, ModelVars, RunControls,
    RunOutput, SiteEdit, SiteHook, Traced,
};
pub use io::{load_model, read_manifest, save_model, ManifestEntry, ModelFileHeader};
pub use train::{split_corpus, train_dense, Adam, TrainHyper, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub rms_eps: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 256, d_model: 64, n_layers: 4, n_heads: 4, d_ff: 128, context_len: 64, rms_eps: 1e-5, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("context_len", self.context_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.rms_eps > 0.0 && self.rms_eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("rms_eps must be > 0, got {}", self.rms_eps)));
        }
        Ok(())
    }

    /// `(d_out, d_in)` of a site's weight matrix.
    pub fn site_dims(&self, kind: SiteKind) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match kind {
            SiteKind::QProj | SiteKind::KProj | SiteKind::VProj | SiteKind::OProj => (d, d),
            SiteKind::GateProj | SiteKind::UpProj => (f, d),
            SiteKind::DownProj => (d, f),
        }
    }

    pub fn all_sites(&self) -> Vec<LinearSite> {
        (0..self.n_layers).flat_map(|l| SiteKind::ALL.iter().map(move |&k| LinearSite::new(l, k))).collect()
    }

    pub fn check_site(&self, site: LinearSite) -> Result<()> {
        if site.layer >= self.n_layers {
            return Err(Error::InvalidArgument(format!("{site} out of range for {} layers", self.n_layers)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
}

impl SiteKind {
    /// Execution order within a block.
    pub const ALL: [SiteKind; 7] = [
        SiteKind::QProj,
        SiteKind::KProj,
        SiteKind::VProj,
        SiteKind::OProj,
        SiteKind::GateProj,
        SiteKind::UpProj,
        SiteKind::DownProj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::QProj => "q_proj",
            SiteKind::KProj => "k_proj",
            SiteKind::VProj => "v_proj",
            SiteKind::OProj => "o_proj",
            SiteKind::GateProj => "gate_proj",
            SiteKind::UpProj => "up_proj",
            SiteKind::DownProj => "down_proj",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, SiteKind::QProj | SiteKind::KProj | SiteKind::VProj | SiteKind::OProj)
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SiteKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown site kind {s:?}")))
    }
}

/// One linear map in one block. Orders by layer, then execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinearSite {
    pub layer: usize,
    #[serde(rename = "site")]
    pub kind: SiteKind,
}

impl LinearSite {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for LinearSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub o_proj: Tensor,
    pub mlp_norm: Tensor,
    pub gate_proj: Tensor,
    pub up_proj: Tensor,
    pub down_proj: Tensor,
}

impl LayerWeights {
    pub fn site(&self, kind: SiteKind) -> &Tensor {
        match kind {
            SiteKind::QProj => &self.q_proj,
            SiteKind::KProj => &self.k_proj,
            SiteKind::VProj => &self.v_proj,
            SiteKind::OProj => &self.o_proj,
            SiteKind::GateProj => &self.gate_proj,
            SiteKind::UpProj => &self.up_proj,
            SiteKind::DownProj => &self.down_proj,
        }
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.attn_norm,
            &mut self.q_proj,
            &mut self.k_proj,
            &mut self.v_proj,
            &mut self.o_proj,
            &mut self.mlp_norm,
            &mut self.gate_proj,
            &mut self.up_proj,
            &mut self.down_proj,
        ]
    }
}

/// All model parameters. Linear weights are row-major `[d_out, d_in]`.
/// `biases` holds only the sites that carry one; a missing entry means no
/// bias add at all, which is what a freshly initialised model has.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub unembed: Tensor,
    pub biases: BTreeMap<LinearSite, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

const LAYER_NAMES: [&str; 9] = [
    "attn_norm",
    "q_proj.weight",
    "k_proj.weight",
    "v_proj.weight",
    "o_proj.weight",
    "mlp_norm",
    "gate_proj.weight",
    "up_proj.weight",
    "down_proj.weight",
];

impl Model {
    /// Seeded Gaussian initialisation (std 0.02, residual-output projections
    /// scaled down by `sqrt(2 · n_layers)`), unit norm gains, no biases.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let std = 0.02;
        let out_std = std / ((2 * config.n_layers) as f32).sqrt();
        let tok_emb = Tensor::randn(&[v, d], std, &mut rng);
        let pos_emb = Tensor::randn(&[config.context_len, d], std, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Tensor::full(&[d], 1.0),
                q_proj: Tensor::randn(&[d, d], std, &mut rng),
                k_proj: Tensor::randn(&[d, d], std, &mut rng),
                v_proj: Tensor::randn(&[d, d], std, &mut rng),
                o_proj: Tensor::randn(&[d, d], out_std, &mut rng),
                mlp_norm: Tensor::full(&[d], 1.0),
                gate_proj: Tensor::randn(&[f, d], std, &mut rng),
                up_proj: Tensor::randn(&[f, d], std, &mut rng),
                down_proj: Tensor::randn(&[d, f], out_std, &mut rng),
            })
            .collect();
        let weights = ModelWeights {
            tok_emb,
            pos_emb,
            layers,
            final_norm: Tensor::full(&[d], 1.0),
            unembed: Tensor::randn(&[v, d], std, &mut rng),
            biases: BTreeMap::new(),
        };
        Ok(Self { config: config.clone(), weights })
    }

    pub fn site_weight(&self, site: LinearSite) -> Result<&Tensor> {
        self.config.check_site(site)?;
        Ok(self.weights.layers[site.layer].site(site.kind))
    }

    /// Trainable tensors (everything except biases) in canonical order.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let w = &mut self.weights;
        let mut out = vec![&mut w.tok_emb, &mut w.pos_emb];
        for layer in &mut w.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut w.final_norm);
        out.push(&mut w.unembed);
        out
    }

    /// Every stored tensor with its file name: trainable tensors in canonical
    /// order, then biases in site order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let w = &self.weights;
        let mut out = vec![("tok_emb".to_string(), &w.tok_emb), ("pos_emb".to_string(), &w.pos_emb)];
        for (i, l) in w.layers.iter().enumerate() {
            let ts = [
                &l.attn_norm,
                &l.q_proj,
                &l.k_proj,
                &l.v_proj,
                &l.o_proj,
                &l.mlp_norm,
                &l.gate_proj,
                &l.up_proj,
                &l.down_proj,
            ];
            out.extend(LAYER_NAMES.iter().zip(ts).map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        out.push(("final_norm".to_string(), &w.final_norm));
        out.push(("unembed".to_string(), &w.unembed));
        out.extend(w.biases.iter().map(|(s, t)| (bias_name(*s), t)));
        out
    }

    /// Rebuilds a model from named tensors, checking every shape against
    /// the config.
    pub fn from_named(config: ModelConfig, mut named: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let template = Model::init(&ModelConfig { seed: 0, ..config.clone() })?;
        let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = named.remove(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };
        let tw = &template.weights;
        let tok_emb = take("tok_emb", &tw.tok_emb)?;
        let pos_emb = take("pos_emb", &tw.pos_emb)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for (i, tl) in tw.layers.iter().enumerate() {
            let mut get = |n: &str, like: &Tensor| take(&format!("layers.{i}.{n}"), like);
            layers.push(LayerWeights {
                attn_norm: get("attn_norm", &tl.attn_norm)?,
                q_proj: get("q_proj.weight", &tl.q_proj)?,
                k_proj: get("k_proj.weight", &tl.k_proj)?,
                v_proj: get("v_proj.weight", &tl.v_proj)?,
                o_proj: get("o_proj.weight", &tl.o_proj)?,
                mlp_norm: get("mlp_norm", &tl.mlp_norm)?,
                gate_proj: get("gate_proj.weight", &tl.gate_proj)?,
                up_proj: get("up_proj.weight", &tl.up_proj)?,
                down_proj: get("down_proj.weight", &tl.down_proj)?,
            });
        }
        let final_norm = take("final_norm", &tw.final_norm)?;
        let unembed = take("unembed", &tw.unembed)?;
        let mut biases = BTreeMap::new();
        for site in config.all_sites() {
            if let Some(b) = named.remove(&bias_name(site)) {
                let d_out = config.site_dims(site.kind).0;
                if b.shape() != [d_out] {
                    return Err(Error::Format(format!("bias {site} has shape {:?}, expected [{d_out}]", b.shape())));
                }
                biases.insert(site, b);
            }
        }
        if let Some(name) = named.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Ok(Self { config, weights: ModelWeights { tok_emb, pos_emb, layers, final_norm, unembed, biases } })
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn bias_name(site: LinearSite) -> String {
    format!("{site}.bias")
}
