use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{block_nll, trace, Model, ModelConfig, ModelVars, RunControls};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Plain Adam without weight decay or schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!("{} params vs {} grads", params.len(), grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.to_vec();
            for (j, (w, &gj)) in data.iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            *p = Tensor::checked("adam", p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub block: usize,
    /// Fraction of the corpus (taken from the end) held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 3e-4, epochs: 5, batch: 16, block: 64, holdout_fraction: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    /// Held-out loss after each epoch.
    pub heldout_losses: Vec<f64>,
    /// Mean training loss over each epoch's steps.
    pub train_losses: Vec<f64>,
}

/// Splits a byte corpus into (train, held-out) token ids; the held-out part
/// is the trailing `holdout_fraction`.
pub fn split_corpus(corpus: &[u8], holdout_fraction: f64) -> Result<(Vec<u32>, Vec<u32>)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::InvalidArgument(format!("holdout fraction {holdout_fraction} not in [0, 1)")));
    }
    let cut = ((corpus.len() as f64) * (1.0 - holdout_fraction)).floor() as usize;
    let ids = |b: &[u8]| b.iter().map(|&x| u32::from(x)).collect::<Vec<_>>();
    Ok((ids(&corpus[..cut]), ids(&corpus[cut..])))
}

/// Trains a freshly initialised model on next-byte prediction. The corpus
/// is cut into non-overlapping windows of `block + 1` bytes, shuffled each
/// epoch with a generator seeded from `config.seed`.
pub fn train_dense(corpus: &[u8], config: &ModelConfig, hyper: &TrainHyper) -> Result<(Model, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty corpus".into()));
    }
    std::str::from_utf8(corpus).map_err(|e| Error::InvalidArgument(format!("corpus is not UTF-8: {e}")))?;
    if hyper.block == 0 || hyper.block > config.context_len {
        return Err(Error::InvalidArgument(format!(
            "block {} must be in 1..={}",
            hyper.block, config.context_len
        )));
    }
    if hyper.batch == 0 {
        return Err(Error::InvalidArgument("batch must be >= 1".into()));
    }
    let (train, heldout) = split_corpus(corpus, hyper.holdout_fraction)?;
    if train.len() < hyper.block + 1 {
        return Err(Error::InsufficientData(format!(
            "training split has {} bytes, shorter than block {} + 1",
            train.len(),
            hyper.block
        )));
    }
    if heldout.len() < 2 {
        return Err(Error::InsufficientData("held-out split needs at least 2 bytes".into()));
    }
    let mut model = Model::init(config)?;
    let eval = |m: &Model| block_nll(m, RunControls::default(), &heldout, hyper.block);
    let initial = eval(&model)?;
    let mut report = TrainReport {
        steps: 0,
        initial_heldout_loss: initial,
        final_heldout_loss: initial,
        heldout_losses: Vec::new(),
        train_losses: Vec::new(),
    };
    let window = hyper.block + 1;
    let mut starts: Vec<usize> = (0..=train.len() - window).step_by(hyper.block).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut opt = Adam::new(hyper.lr);
    let no_alphas = BTreeMap::new();
    for _ in 0..hyper.epochs {
        starts.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for chunk in starts.chunks(hyper.batch) {
            let mut ids = Vec::with_capacity(chunk.len() * hyper.block);
            let mut targets = Vec::with_capacity(chunk.len() * hyper.block);
            for &s in chunk {
                ids.extend_from_slice(&train[s..s + hyper.block]);
                targets.extend_from_slice(&train[s + 1..s + window]);
            }
            let mut tape = Tape::new();
            let vars = ModelVars::params(&mut tape, &model);
            let traced = trace(&mut tape, &vars, &model.config, &ids, chunk.len(), None, &no_alphas, None)?;
            let loss = tape.cross_entropy(traced.logits, &targets)?;
            epoch_loss += f64::from(tape.value(loss).item()?);
            epoch_steps += 1;
            let grads = tape.backward(loss)?;
            let gs = vars.param_list().into_iter().map(|v| grads.get(v)).collect::<Result<Vec<_>>>()?;
            opt.step(model.param_tensors_mut(), &gs)?;
            report.steps += 1;
        }
        report.train_losses.push(epoch_loss / epoch_steps.max(1) as f64);
        let h = eval(&model)?;
        report.heldout_losses.push(h);
        report.final_heldout_loss = h;
    }
    Ok((model, report))
}
