use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spon_core::data::SplitSpec;
use spon_core::model::TrainHyper;
use spon_core::spontaneous::DistillHyper;
use spon_core::{LinearSite, ModelConfig, SiteKind};

use crate::CliError;

/// Experiment record read from `--config`. Every field is optional; command
/// flags override whatever is set here.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub dense: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub model_config: ModelConfig,
    pub train: TrainHyper,
    pub splits: SplitSpec,
    pub target_sparsity: Option<f64>,
    /// Sites whose inputs are sparsified.
    pub sparsify_sites: Option<Vec<String>>,
    pub method: Option<String>,
    /// Sites that receive spontaneous neurons.
    pub sites: Option<Vec<String>>,
    pub distill: DistillHyper,
    pub eval_block: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("bad config {}: {e}", path.display())))
    }
}

/// Flag value, else config value, else an error naming both.
pub fn pick<T: Clone>(flag: Option<T>, config: &Option<T>, what: &str) -> Result<T, CliError> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| CliError::Input(format!("missing {what}: pass --{what} or set it in the config file")))
}

pub fn existing(path: PathBuf, what: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Input(format!("{what} not found: {}", path.display())))
    }
}

/// Flag, then config, then `SPON_SEED`.
pub fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var("SPON_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Input(format!("SPON_SEED is not an integer: {v:?}"))),
        Err(_) => Err(CliError::Input("no seed: pass --seed, set \"seed\" in the config or export SPON_SEED".into())),
    }
}

/// Parses site selectors:
/// `all`, `attention`, `mlp`, a kind such as `down_proj` (every layer), or a
/// single site written `layers.<i>.<kind>`.
pub fn parse_sites(specs: &[String], config: &ModelConfig) -> Result<BTreeSet<LinearSite>, CliError> {
    let mut out = BTreeSet::new();
    let every = |kinds: &[SiteKind]| -> Vec<LinearSite> {
        (0..config.n_layers).flat_map(|l| kinds.iter().map(move |&k| LinearSite::new(l, k))).collect()
    };
    for raw in specs.iter().flat_map(|s| s.split(',')).map(str::trim).filter(|s| !s.is_empty()) {
        let sites = match raw {
            "all" => every(&SiteKind::ALL),
            "attention" => every(&[SiteKind::QProj, SiteKind::KProj, SiteKind::VProj, SiteKind::OProj]),
            "mlp" => every(&[SiteKind::GateProj, SiteKind::UpProj, SiteKind::DownProj]),
            _ => match raw.strip_prefix("layers.").and_then(|r| r.split_once('.')) {
                Some((layer, kind)) => {
                    let layer: usize =
                        layer.parse().map_err(|_| CliError::Input(format!("bad layer in site {raw:?}")))?;
                    if layer >= config.n_layers {
                        return Err(CliError::Input(format!("site {raw:?} is beyond {} layers", config.n_layers)));
                    }
                    vec![LinearSite::new(layer, kind.parse().map_err(|e| CliError::Input(format!("{e}")))?)]
                }
                None => every(&[raw.parse().map_err(|e| CliError::Input(format!("{e}")))?]),
            },
        };
        out.extend(sites);
    }
    if out.is_empty() {
        return Err(CliError::Input("empty site selection".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_selectors() {
        let c = ModelConfig::default();
        assert_eq!(parse_sites(&["all".into()], &c).unwrap().len(), 28);
        assert_eq!(parse_sites(&["down_proj".into()], &c).unwrap().len(), 4);
        let one = parse_sites(&["layers.2.k_proj".into()], &c).unwrap();
        assert_eq!(one.into_iter().collect::<Vec<_>>(), vec![LinearSite::new(2, SiteKind::KProj)]);
        assert_eq!(parse_sites(&["k_proj,v_proj".into()], &c).unwrap().len(), 8);
        assert!(parse_sites(&["layers.9.k_proj".into()], &c).is_err());
        assert!(parse_sites(&["mlp_in".into()], &c).is_err());
        assert!(parse_sites(&[], &c).is_err());
    }

    #[test]
    fn config_is_partial_and_strict() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "model_config": {"d_model": 32}}"#).unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.model_config.d_model, 32);
        assert_eq!(c.model_config.n_layers, 4);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
    }
}
