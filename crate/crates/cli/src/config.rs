//! Experiment configuration files (TOML).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hiercurric::curriculum::Regime;
use hiercurric::dataprep::SynthSpec;
use hiercurric::model::ModelSpec;
use hiercurric::transfer::ProbeConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub taxonomy: Option<TaxonomySection>,
    pub data: DataSection,
    pub model: ModelSection,
    pub regimes: Vec<Regime>,
    #[serde(default)]
    pub transfer: Option<TransferSection>,
    #[serde(default)]
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomySection {
    pub synsets: PathBuf,
    pub marks: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Generated data; the last `holdout_per_sub` samples of every
    /// subordinate category become the validation set.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub holdout_per_sub: Option<usize>,
    #[serde(default)]
    pub train_manifest: Option<PathBuf>,
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    #[serde(default)]
    pub input: Option<[usize; 3]>,
    #[serde(default)]
    pub init_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub probe: ProbeConfig,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Relative paths in the file are relative to the file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(t) = &mut self.taxonomy {
            fix(&mut t.synsets);
            fix(&mut t.marks);
        }
        for p in [&mut self.data.train_manifest, &mut self.data.val_manifest].into_iter().flatten() {
            fix(p);
        }
        if let Some(m) = self.transfer.as_mut().and_then(|t| t.manifest.as_mut()) {
            fix(m);
        }
        if let Some(o) = &mut self.output {
            fix(&mut o.directory);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::config(m.to_string()));
        match (&self.data.synth, &self.data.train_manifest, &self.data.val_manifest) {
            (Some(s), None, None) => {
                s.validate().map_err(CliError::from)?;
                let hold = self.data.holdout_per_sub.unwrap_or(0);
                if hold == 0 || hold >= s.samples_per_sub {
                    return bad("data.holdout_per_sub must be at least 1 and below synth.samples_per_sub");
                }
                if self.taxonomy.is_some() {
                    return bad("synthetic data brings its own taxonomy; drop the [taxonomy] section");
                }
            }
            (None, Some(_), Some(_)) => {
                if self.taxonomy.is_none() {
                    return bad("manifest data needs a [taxonomy] section");
                }
                if self.data.holdout_per_sub.is_some() {
                    return bad("data.holdout_per_sub only applies to synthetic data");
                }
            }
            _ => return bad("data needs either `synth` or both `train_manifest` and `val_manifest`"),
        }
        match (&self.model.name, &self.model.spec) {
            (Some(n), None) if ModelSpec::by_name(n, 1).is_some() => {}
            (Some(n), None) => return bad(&format!("unknown model name `{n}` (expected desk or alexnet)")),
            (None, Some(s)) => s.validate().map_err(CliError::from)?,
            _ => return bad("model needs exactly one of `name` and `spec`"),
        }
        if self.regimes.is_empty() {
            return bad("at least one [[regimes]] entry is required");
        }
        let mut kinds = BTreeSet::new();
        for r in &self.regimes {
            r.validate().map_err(CliError::from)?;
            if !kinds.insert(r.kind) {
                return bad(&format!("regime `{}` listed twice", r.kind.name()));
            }
        }
        if let Some(t) = &self.transfer {
            if t.synth.is_some() == t.manifest.is_some() {
                return bad("transfer needs exactly one of `synth` and `manifest`");
            }
        }
        Ok(())
    }

    /// Layer stack with the configured input and init overrides applied.
    pub fn model_spec(&self) -> ModelSpec {
        let mut spec = match (&self.model.name, &self.model.spec) {
            (_, Some(s)) => s.clone(),
            (Some(n), None) => ModelSpec::by_name(n, 1).expect("validated"),
            (None, None) => unreachable!("validated"),
        };
        if let Some(input) = self.model.input {
            spec.input = input;
        }
        if let Some(std) = self.model.init_std {
            spec.init_std = std;
        }
        spec
    }

    /// Replace every seed in the experiment with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(s) = &mut self.data.synth {
            s.seed = seed;
        }
        for r in &mut self.regimes {
            if let Some(a) = &mut r.phase_a {
                a.seed = seed;
            }
            r.phase_b.seed = seed;
        }
        if let Some(t) = &mut self.transfer {
            t.probe.seed = seed;
            if let Some(s) = &mut t.synth {
                s.seed = seed;
            }
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}
