//! How a byte corpus is divided between training, calibration and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::split_corpus;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Calibration tokens, taken from the start of the training split.
    pub calib_tokens: usize,
    /// Distillation checkpoint tokens, taken right after the calibration ones.
    pub monitor_tokens: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { calib_tokens: 16384, monitor_tokens: 4096 }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<u32>,
    pub heldout: Vec<u32>,
    pub calib: Vec<u32>,
    pub monitor: Vec<u32>,
}

impl Splits {
    /// The trailing `holdout_fraction` of the corpus is the evaluation split.
    pub fn new(corpus: &[u8], holdout_fraction: f64, spec: &SplitSpec) -> Result<Self> {
        let (train, heldout) = split_corpus(corpus, holdout_fraction)?;
        let need = spec.calib_tokens + spec.monitor_tokens;
        if train.len() < need {
            return Err(Error::InsufficientData(format!(
                "training split has {} tokens, calibration needs {need}",
                train.len()
            )));
        }
        let calib = train[..spec.calib_tokens].to_vec();
        let monitor = train[spec.calib_tokens..need].to_vec();
        Ok(Self { train, heldout, calib, monitor })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_slices() {
        let corpus: Vec<u8> = (0..1000u32).map(|i| (i % 251) as u8).collect();
        let s = Splits::new(&corpus, 0.1, &SplitSpec { calib_tokens: 500, monitor_tokens: 100 }).unwrap();
        assert_eq!(s.heldout.len(), 100);
        assert_eq!(s.calib[..], s.train[..500]);
        assert_eq!(s.monitor[..], s.train[500..600]);
        assert!(Splits::new(&corpus, 0.1, &SplitSpec { calib_tokens: 900, monitor_tokens: 100 }).is_err());
    }
}
