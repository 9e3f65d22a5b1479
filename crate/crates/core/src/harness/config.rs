//! Experiment configuration: one JSON document describing the phantom,
//! acquisition, noise and reconstruction method.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bloch::{geometric_grid, SequenceSpec};
use crate::dictlearn::{BcsConfig, BcsQmriConfig};
use crate::error::{config, Result};
use crate::integrated::LmConfig;
use crate::mrf::BlipConfig;
use crate::params::AdmissibleBox;
use crate::surrogate::{NnConfig, TrainConfig};
use crate::varreg::{PdhgConfig, TwoStepConfig, WeightField};
use crate::Grid;

use super::phantom::PhantomSpec;

/// `n` geometrically spaced values from `lo` to `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricRange {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GeometricRange {
    pub fn values(&self) -> Vec<f64> {
        geometric_grid(self.lo, self.hi, self.n)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo > 0.0 && self.hi >= self.lo && self.hi.is_finite()) || self.n == 0 {
            return Err(config(format!("{what} grid needs 0 < lo <= hi and n >= 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DictionaryGrids {
    pub t1: GeometricRange,
    pub t2: GeometricRange,
}

impl Default for DictionaryGrids {
    fn default() -> Self {
        DictionaryGrids {
            t1: GeometricRange { lo: 0.1, hi: 4.5, n: 40 },
            t2: GeometricRange { lo: 0.01, hi: 2.0, n: 40 },
        }
    }
}

/// Two-step parameters: stage-1 TV weight plus the solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoStepParams {
    /// Uniform TV weight of the per-frame reconstructions.
    pub tv_weight: f64,
    pub pdhg: PdhgConfig,
    pub gn_steps: usize,
    pub backtracks: usize,
}

impl Default for TwoStepParams {
    fn default() -> Self {
        let d = TwoStepConfig::default();
        TwoStepParams { tv_weight: 1e-2, pdhg: d.pdhg, gn_steps: d.gn_steps, backtracks: d.backtracks }
    }
}

impl TwoStepParams {
    pub fn solver(&self) -> TwoStepConfig {
        TwoStepConfig { pdhg: self.pdhg, gn_steps: self.gn_steps, backtracks: self.backtracks }
    }

    pub fn weights(&self, grid: Grid) -> Result<WeightField> {
        WeightField::uniform(grid, self.tv_weight, 1.0)
    }
}

/// Learning-informed parameters: how to obtain the network and how to
/// reconstruct with it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NnParams {
    /// Trained network to load; otherwise one is trained on the experiment
    /// dictionary with `train`.
    pub net_file: Option<PathBuf>,
    pub train: TrainConfig,
    pub recon: NnConfig,
}


/// Reconstruction method; `name` selects the variant in JSON, the other
/// keys are that method's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Method {
    Mrf,
    Blip(BlipConfig),
    /// Starts from the MRF map. A missing `sigma` takes the experiment's
    /// noise level.
    Lm(LmConfig),
    #[serde(rename = "twostep")]
    TwoStep(TwoStepParams),
    /// Per-frame blind compressed sensing followed by dictionary matching.
    Bcs(BcsConfig),
    /// Parameter-map dictionary learning from the MRF map.
    BcsQmri(BcsQmriConfig),
    /// Surrogate-based reconstruction from the MRF map.
    Nn(NnParams),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Mrf => "mrf",
            Method::Blip(_) => "blip",
            Method::Lm(_) => "lm",
            Method::TwoStep(_) => "twostep",
            Method::Bcs(_) => "bcs",
            Method::BcsQmri(_) => "bcs-qmri",
            Method::Nn(_) => "nn",
        }
    }

    /// Default parameters for a method name.
    pub fn from_name(name: &str) -> Result<Method> {
        Ok(match name {
            "mrf" => Method::Mrf,
            "blip" => Method::Blip(BlipConfig::default()),
            "lm" => Method::Lm(LmConfig::default()),
            "twostep" => Method::TwoStep(TwoStepParams::default()),
            "bcs" => Method::Bcs(BcsConfig::default()),
            "bcs-qmri" => Method::BcsQmri(BcsQmriConfig::default()),
            "nn" => Method::Nn(NnParams::default()),
            _ => return Err(config(format!("unknown method '{name}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    /// Raw parameter map replacing the ellipse phantom.
    pub phantom_file: Option<PathBuf>,
    pub frames: usize,
    /// Defaults to the built-in MRF schedule with `frames` readouts.
    pub sequence: Option<SequenceSpec>,
    /// Cartesian undersampling factor; 1 samples everything.
    pub factor: usize,
    /// Draw fresh k-space rows for every frame.
    pub complementary: bool,
    /// Noise std per real component of each k-space sample.
    pub sigma: f64,
    pub seed: u64,
    pub admissible_box: AdmissibleBox,
    pub dictionary: DictionaryGrids,
    pub method: Method,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            phantom: PhantomSpec::desk(64),
            phantom_file: None,
            frames: 40,
            sequence: None,
            factor: 8,
            complementary: true,
            sigma: 0.005,
            seed: 7,
            admissible_box: AdmissibleBox::default(),
            dictionary: DictionaryGrids::default(),
            method: Method::Mrf,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config(format!("bad experiment config: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(path.display()))
    }

    /// Canonical encoding: compact JSON with fields in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::canonical_json`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn sequence(&self) -> SequenceSpec {
        self.sequence.clone().unwrap_or_else(|| SequenceSpec::default_mrf(self.frames))
    }

    /// Checks everything that can be checked without running: shapes,
    /// referenced files and the method's own parameter rules.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: crate::Error| config(e.to_string());
        if self.frames == 0 {
            return Err(config("frames must be positive"));
        }
        let seq = self.sequence();
        seq.validate().map_err(wrap)?;
        if seq.frames() != self.frames {
            return Err(config(format!("sequence has {} readouts, config asks for {} frames", seq.frames(), self.frames)));
        }
        self.admissible_box.validate().map_err(wrap)?;
        match &self.phantom_file {
            Some(p) => {
                if !crate::rawio::header_path(p).exists() {
                    return Err(config(format!("phantom file {} does not exist", p.display())));
                }
            }
            None => self.phantom.validate(&self.admissible_box).map_err(wrap)?,
        }
        if self.factor == 0 {
            return Err(config("undersampling factor must be at least 1"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(config(format!("noise level must be finite and nonnegative, got {}", self.sigma)));
        }
        self.dictionary.t1.validate("T1")?;
        self.dictionary.t2.validate("T2")?;
        match &self.method {
            Method::Mrf => {}
            Method::Blip(b) => {
                if !(b.mu > 0.0 && b.mu < 2.0) {
                    return Err(config(format!("BLIP step size must lie in (0, 2), got {}", b.mu)));
                }
            }
            Method::Lm(c) => c.validate().map_err(wrap)?,
            Method::TwoStep(t) => {
                if !(t.tv_weight >= crate::varreg::pdhg::MIN_WEIGHT) || !t.tv_weight.is_finite() {
                    return Err(config(format!("TV weight must be finite and at least 1e-8, got {}", t.tv_weight)));
                }
                if t.pdhg.iters == 0 || t.pdhg.check_every == 0 {
                    return Err(config("PDHG needs positive iteration counts"));
                }
            }
            Method::Bcs(c) => c.validate().map_err(wrap)?,
            Method::BcsQmri(c) => c.validate().map_err(wrap)?,
            Method::Nn(n) => {
                n.recon.validate().map_err(wrap)?;
                match &n.net_file {
                    Some(p) if !crate::rawio::header_path(p).exists() => {
                        return Err(config(format!("network file {} does not exist", p.display())));
                    }
                    Some(_) => {}
                    None => n.train.validate().map_err(wrap)?,
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let c = ExperimentConfig::from_json(r#"{"method": {"name": "blip", "steps": 3}}"#).unwrap();
        assert_eq!(c.method, Method::Blip(BlipConfig { steps: 3, mu: 1.0 }));
        assert_eq!(c.frames, 40);
        assert_eq!(c.factor, 8);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_keeps_hash() {
        for name in ["mrf", "blip", "lm", "twostep", "bcs", "bcs-qmri", "nn"] {
            let c = ExperimentConfig { method: Method::from_name(name).unwrap(), ..Default::default() };
            let back = ExperimentConfig::from_json(&c.canonical_json()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
            assert_eq!(back.method.name(), name);
        }
    }

    proptest::proptest! {
        #[test]
        fn hash_survives_a_json_round_trip(sigma in 0.0f64..1.0, lo in 1e-3f64..0.5, frames in 1usize..64) {
            let mut c = ExperimentConfig { sigma, frames, ..Default::default() };
            c.dictionary.t1.lo = lo;
            c.sequence = Some(SequenceSpec::default_mrf(frames));
            let back = ExperimentConfig::from_json(&serde_json::to_string_pretty(&c).unwrap()).unwrap();
            proptest::prop_assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 8, ..Default::default() };
        let c = ExperimentConfig { sigma: 0.0051, ..Default::default() };
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let bad = [
            ExperimentConfig { frames: 0, ..Default::default() },
            ExperimentConfig { factor: 0, ..Default::default() },
            ExperimentConfig { sigma: -1.0, ..Default::default() },
            ExperimentConfig { method: Method::Blip(BlipConfig { steps: 1, mu: 2.5 }), ..Default::default() },
            ExperimentConfig { phantom_file: Some("/nonexistent/map".into()), ..Default::default() },
            ExperimentConfig { sequence: Some(SequenceSpec::default_mrf(10)), ..Default::default() },
        ];
        for c in bad {
            let e = c.validate().unwrap_err();
            assert_eq!(e.exit_code(), 2, "{e}");
        }
        assert!(ExperimentConfig::from_json(r#"{"frmes": 3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"method": {"name": "nope"}}"#).is_err());
    }
}
