//! Magnitude-threshold input sparsification.
//!
//! A site's input entry survives when `|x| > τ`; entries with `|x| <= τ` are
//! replaced by exactly `0.0`. Thresholds are calibrated per site as the
//! empirical `target`-quantile of `|x|`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::artifact::{fingerprint, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::model::{run, LinearSite, MaskCounts, Model, RunControls, SiteEdit, SiteHook, SiteKind};
use crate::tensor::Tensor;

/// Fewest calibration tokens accepted by the calibrators.
pub const MIN_CALIBRATION_TOKENS: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMeta {
    pub num_tokens: usize,
    pub corpus_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityProfile {
    pub target_sparsity: f64,
    pub thresholds: BTreeMap<LinearSite, f32>,
    pub metadata: CalibrationMeta,
}

#[derive(Serialize, Deserialize)]
struct ThresholdEntry {
    layer: usize,
    site: SiteKind,
    tau: f32,
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    schema_version: u32,
    target: f64,
    thresholds: Vec<ThresholdEntry>,
    metadata: CalibrationMeta,
}

impl Serialize for SparsityProfile {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ProfileFile {
            schema_version: SCHEMA_VERSION,
            target: self.target_sparsity,
            thresholds: self
                .thresholds
                .iter()
                .map(|(site, &tau)| ThresholdEntry { layer: site.layer, site: site.kind, tau })
                .collect(),
            metadata: self.metadata.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SparsityProfile {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = ProfileFile::deserialize(d)?;
        Ok(Self {
            target_sparsity: f.target,
            thresholds: f.thresholds.into_iter().map(|e| (LinearSite::new(e.layer, e.site), e.tau)).collect(),
            metadata: f.metadata,
        })
    }
}

impl SparsityProfile {
    /// A profile that sparsifies nothing.
    pub fn empty() -> Self {
        Self {
            target_sparsity: 0.0,
            thresholds: BTreeMap::new(),
            metadata: CalibrationMeta { num_tokens: 0, corpus_id: String::new(), seed: 0 },
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return Err(Error::InvalidArgument(format!("target sparsity {} not in [0, 1)", self.target_sparsity)));
        }
        for (site, tau) in &self.thresholds {
            model.config.check_site(*site)?;
            if !(tau.is_finite() && *tau >= 0.0) {
                return Err(Error::InvalidArgument(format!("threshold for {site} is {tau}")));
            }
        }
        Ok(())
    }

    pub fn controls(&self) -> RunControls<'_> {
        RunControls { thresholds: Some(&self.thresholds), alphas: None }
    }
}

/// `x_i` where `|x_i| > τ`, otherwise `0.0`.
pub fn apply_mask(x: &Tensor, tau: f32) -> Result<Tensor> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("mask threshold must be >= 0, got {tau}")));
    }
    let data = x.data().iter().map(|&v| if v.abs() > tau { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Smallest `τ` among the pooled magnitudes such that at least
/// `ceil(target · n)` entries satisfy `|x| <= τ`. Returns 0 for target 0.
pub fn quantile_threshold(values: &[f32], target: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::InsufficientData("no values to calibrate from".into()));
    }
    if !(0.0..1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("target sparsity {target} not in [0, 1)")));
    }
    let n = values.len();
    let exact = target * n as f64;
    // guard against 0.6 * 1000 = 600.0000000000001 style rounding
    let k = if (exact - exact.round()).abs() < 1e-9 { exact.round() } else { exact.ceil() } as usize;
    if k == 0 {
        return Ok(0.0);
    }
    let mut mags: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    let (_, kth, _) = mags.select_nth_unstable_by(k - 1, f32::total_cmp);
    Ok(*kth)
}

/// Lays calibration tokens out as full `context_len` sequences.
pub(crate) fn calibration_batch(model: &Model, tokens: &[u32]) -> Result<(Vec<u32>, usize)> {
    let ctx = model.config.context_len;
    let n_seq = tokens.len() / ctx;
    let used = n_seq * ctx;
    if used < MIN_CALIBRATION_TOKENS {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least {MIN_CALIBRATION_TOKENS} tokens in whole {ctx}-token sequences, got {used}"
        )));
    }
    Ok((tokens[..used].to_vec(), n_seq))
}

struct ThresholdCalibrator<'a> {
    sites: &'a BTreeSet<LinearSite>,
    target: f64,
    thresholds: BTreeMap<LinearSite, f32>,
}

impl SiteHook for ThresholdCalibrator<'_> {
    fn on_site_input(&mut self, site: LinearSite, input: &Tensor) -> Result<SiteEdit> {
        if !self.sites.contains(&site) {
            return Ok(SiteEdit::default());
        }
        let tau = quantile_threshold(input.data(), self.target)?;
        self.thresholds.insert(site, tau);
        Ok(SiteEdit { threshold: Some(tau), bias: None })
    }
}

/// Calibrates one threshold per site from the pooled input magnitudes seen
/// on `calib_tokens`.
///
/// Sites are calibrated in execution order within a single pass, each seeing
/// the inputs produced by the already-sparsified sites before it, so running
/// the resulting profile on the calibration set reproduces the target at
/// every site.
pub fn calibrate_thresholds(
    model: &Model,
    calib_tokens: &[u32],
    sites: &BTreeSet<LinearSite>,
    target_sparsity: f64,
    seed: u64,
) -> Result<SparsityProfile> {
    if sites.is_empty() {
        return Err(Error::InvalidArgument("no sites to sparsify".into()));
    }
    if !(0.0..1.0).contains(&target_sparsity) {
        return Err(Error::InvalidArgument(format!("target sparsity {target_sparsity} not in [0, 1)")));
    }
    for s in sites {
        model.config.check_site(*s)?;
    }
    let (ids, n_seq) = calibration_batch(model, calib_tokens)?;
    let mut hook = ThresholdCalibrator { sites, target: target_sparsity, thresholds: BTreeMap::new() };
    run(model, &ids, n_seq, RunControls::default(), Some(&mut hook))?;
    let bytes: Vec<u8> = ids.iter().flat_map(|t| t.to_le_bytes()).collect();
    Ok(SparsityProfile {
        target_sparsity,
        thresholds: hook.thresholds,
        metadata: CalibrationMeta { num_tokens: ids.len(), corpus_id: fingerprint(&bytes), seed },
    })
}

/// Logits of the model with every profiled site's input masked.
pub fn sparse_forward(model: &Model, ids: &[u32], batch: usize, profile: &SparsityProfile) -> Result<Tensor> {
    Ok(sparse_run(model, ids, batch, profile)?.0)
}

/// [`sparse_forward`] that also returns the exact mask counts.
pub fn sparse_run(model: &Model, ids: &[u32], batch: usize, profile: &SparsityProfile) -> Result<(Tensor, MaskCounts)> {
    profile.validate(model)?;
    let out = run(model, ids, batch, profile.controls(), None)?;
    Ok((out.logits, out.counts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteSparsity {
    pub layer: usize,
    pub site: SiteKind,
    pub masked: u64,
    pub total: u64,
    pub fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub overall: f64,
    pub masked: u64,
    pub total: u64,
    pub per_site: Vec<SiteSparsity>,
}

impl SparsityReport {
    pub fn site(&self, site: LinearSite) -> Option<&SiteSparsity> {
        self.per_site.iter().find(|s| s.layer == site.layer && s.site == site.kind)
    }
}

/// Masked fraction per site and over all sparsified entries.
pub fn measure_sparsity(counts: &MaskCounts) -> SparsityReport {
    let frac = |m: u64, t: u64| if t == 0 { 0.0 } else { m as f64 / t as f64 };
    let per_site: Vec<SiteSparsity> = counts
        .sites
        .iter()
        .map(|(s, c)| SiteSparsity {
            layer: s.layer,
            site: s.kind,
            masked: c.masked,
            total: c.total,
            fraction: frac(c.masked, c.total),
        })
        .collect();
    let masked = per_site.iter().map(|s| s.masked).sum();
    let total = per_site.iter().map(|s| s.total).sum();
    SparsityReport { overall: frac(masked, total), masked, total, per_site }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Model {
        let c = ModelConfig { vocab_size: 64, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, context_len: 16, seed: 1, ..Default::default() };
        Model::init(&c).unwrap()
    }

    fn tokens(n: usize, seed: u64) -> Vec<u32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..64)).collect()
    }

    #[test]
    fn mask_examples() {
        let x = Tensor::vector(vec![0.2, -0.6, 0.05]).unwrap();
        assert_eq!(apply_mask(&x, 0.1).unwrap().data(), &[0.2, -0.6, 0.0]);
        let y = Tensor::vector(vec![0.0, -1.5, 2.0]).unwrap();
        assert_eq!(apply_mask(&y, 0.0).unwrap().data(), y.data());
        assert!(apply_mask(&y, -1.0).is_err());
    }

    #[test]
    fn quantile_hand_example_masks_two_of_four() {
        let v = [0.1f32, 0.5, 0.3, 0.05];
        let tau = quantile_threshold(&v, 0.5).unwrap();
        assert_eq!(tau, 0.1);
        let masked = v.iter().filter(|x| x.abs() <= tau).count();
        assert_eq!(masked, 2);
        assert_eq!(quantile_threshold(&v, 0.0).unwrap(), 0.0);
        assert!(quantile_threshold(&[], 0.5).is_err());
        assert!(quantile_threshold(&v, 1.0).is_err());
    }

    #[test]
    fn uniform_magnitudes_give_median_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f32> = (0..20_000).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let tau = quantile_threshold(&v, 0.5).unwrap();
        assert!((tau - 0.5).abs() < 0.02, "{tau}");
        // τ at the median masks half of a fresh sample
        let fresh: Vec<f32> = (0..20_000).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let x = Tensor::vector(fresh).unwrap();
        let masked = apply_mask(&x, tau).unwrap().data().iter().filter(|v| **v == 0.0).count();
        assert!((masked as f64 / 20_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn calibration_preconditions() {
        let m = tiny();
        let sites: BTreeSet<_> = m.config.all_sites().into_iter().collect();
        assert!(matches!(
            calibrate_thresholds(&m, &tokens(512, 0), &sites, 0.5, 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(calibrate_thresholds(&m, &tokens(2048, 0), &BTreeSet::new(), 0.5, 0).is_err());
    }

    #[test]
    fn target_zero_gives_zero_thresholds() {
        let m = tiny();
        let sites: BTreeSet<_> = m.config.all_sites().into_iter().collect();
        let p = calibrate_thresholds(&m, &tokens(2048, 1), &sites, 0.0, 0).unwrap();
        assert!(p.thresholds.values().all(|&t| t == 0.0));
        let ids = tokens(32, 2);
        assert!(sparse_forward(&m, &ids, 2, &p).unwrap().bit_eq(&forward(&m, &ids, 2).unwrap()));
    }

    #[test]
    fn calibrated_profile_hits_target_on_calibration_set() {
        let m = tiny();
        let sites: BTreeSet<_> = m.config.all_sites().into_iter().collect();
        let calib = tokens(2048, 3);
        for target in [0.25, 0.5, 0.6] {
            let p = calibrate_thresholds(&m, &calib, &sites, target, 0).unwrap();
            let (_, counts) = sparse_run(&m, &calib, 2048 / 16, &p).unwrap();
            let r = measure_sparsity(&counts);
            assert_eq!(r.per_site.len(), 14);
            for s in &r.per_site {
                assert!((s.fraction - target).abs() <= 0.01, "{s:?}");
            }
        }
    }

    #[test]
    fn extreme_thresholds() {
        let m = tiny();
        let ids = tokens(32, 4);
        let zero = SparsityProfile {
            thresholds: m.config.all_sites().into_iter().map(|s| (s, 0.0)).collect(),
            ..SparsityProfile::empty()
        };
        let (_, c) = sparse_run(&m, &ids, 2, &zero).unwrap();
        assert_eq!(measure_sparsity(&c).overall, 0.0);
        let all = SparsityProfile {
            thresholds: m.config.all_sites().into_iter().map(|s| (s, f32::MAX)).collect(),
            ..SparsityProfile::empty()
        };
        let (_, c) = sparse_run(&m, &ids, 2, &all).unwrap();
        assert_eq!(measure_sparsity(&c).overall, 1.0);
    }

    #[test]
    fn empty_profile_is_dense() {
        let m = tiny();
        let ids = tokens(48, 5);
        let (l, c) = sparse_run(&m, &ids, 3, &SparsityProfile::empty()).unwrap();
        assert!(l.bit_eq(&forward(&m, &ids, 3).unwrap()));
        assert_eq!(measure_sparsity(&c).total, 0);
    }

    #[test]
    fn profile_json_layout() {
        let p = SparsityProfile {
            target_sparsity: 0.5,
            thresholds: BTreeMap::from([(LinearSite::new(1, SiteKind::DownProj), 0.25)]),
            metadata: CalibrationMeta { num_tokens: 4096, corpus_id: "crc32:00000000".into(), seed: 7 },
        };
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["target"], 0.5);
        assert_eq!(v["thresholds"][0]["site"], "down_proj");
        assert_eq!(v["thresholds"][0]["tau"], 0.25);
        assert_eq!(v["schema_version"], 1);
        let back: SparsityProfile = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn prop_mask_idempotent_and_monotone(
            xs in proptest::collection::vec(-4f32..4f32, 1..64), t1 in 0f32..3f32, dt in 0f32..2f32
        ) {
            let x = Tensor::vector(xs).unwrap();
            let once = apply_mask(&x, t1).unwrap();
            let twice = apply_mask(&once, t1).unwrap();
            prop_assert!(once.bit_eq(&twice));
            let tighter = apply_mask(&x, t1 + dt).unwrap();
            for (a, b) in once.data().iter().zip(tighter.data()) {
                // support(mask(x, τ2)) ⊆ support(mask(x, τ1))
                prop_assert!(*b == 0.0 || *a != 0.0);
                prop_assert!(*b == 0.0 || b == a);
            }
        }

        #[test]
        fn prop_quantile_achieves_at_least_target(
            xs in proptest::collection::vec(-10f32..10f32, 1..200), target in 0f64..0.99
        ) {
            let tau = quantile_threshold(&xs, target).unwrap();
            let masked = xs.iter().filter(|v| v.abs() <= tau).count() as f64;
            prop_assert!(masked >= (target * xs.len() as f64).floor());
            // distinct magnitudes: strictly below τ is fewer than the target count
            let below = xs.iter().filter(|v| v.abs() < tau).count() as f64;
            prop_assert!(below < (target * xs.len() as f64).ceil().max(1.0));
        }
    }
}
