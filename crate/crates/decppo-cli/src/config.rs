//! Declarative experiment configuration: one TOML file describing the
//! environment, the training setup, output layout, diagnostics, and an
//! optional sweep grid. CLI flags override config keys; the
//! `DECPPO_OUT_ROOT` environment variable supplies the default output
//! root when neither a flag nor the config names one.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use decppo::decmdp::{coop_chain_env, random_dec_mdp_with_discount, TabularDecMdp};
use decppo::train::TrainConfig;

use crate::CliError;

/// Environment source: a serialized Dec-MDP file or a named generator.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub file: Option<PathBuf>,
    /// "random" or "chain".
    pub generator: Option<String>,
    pub agents: Option<usize>,
    pub states: Option<usize>,
    pub actions: Option<usize>,
    pub length: Option<usize>,
    pub seed: Option<u64>,
    pub gamma: Option<f64>,
    pub shared: Option<bool>,
}

impl EnvSection {
    pub fn resolve(&self) -> Result<TabularDecMdp, CliError> {
        self.resolve_with_agents(None)
    }

    /// Resolve with the agent count overridden (sweep cells on the
    /// team-size axis).
    pub fn resolve_with_agents(&self, agents: Option<usize>) -> Result<TabularDecMdp, CliError> {
        match (&self.file, &self.generator) {
            (Some(path), None) => {
                if agents.is_some() {
                    return Err(CliError::usage(
                        "a team-size sweep needs a generator environment, not a file",
                    ));
                }
                TabularDecMdp::load(path).map_err(CliError::from)
            }
            (None, Some(name)) => {
                let n = agents
                    .or(self.agents)
                    .ok_or_else(|| CliError::usage("env.agents is required"))?;
                let shared = self.shared.unwrap_or(true);
                match name.as_str() {
                    "random" => {
                        let states = self
                            .states
                            .ok_or_else(|| CliError::usage("env.states is required"))?;
                        let actions = self
                            .actions
                            .ok_or_else(|| CliError::usage("env.actions is required"))?;
                        let seed = self
                            .seed
                            .ok_or_else(|| CliError::usage("env.seed is required (explicit seeds only)"))?;
                        let gamma = self.gamma.unwrap_or(0.9);
                        random_dec_mdp_with_discount(n, states, actions, shared, seed, gamma)
                            .map_err(CliError::from)
                    }
                    "chain" => {
                        let length = self
                            .length
                            .ok_or_else(|| CliError::usage("env.length is required"))?;
                        coop_chain_env(n, length, shared).map_err(CliError::from)
                    }
                    other => Err(CliError::usage(format!("unknown generator '{other}'"))),
                }
            }
            (Some(_), Some(_)) => Err(CliError::usage(
                "env section sets both file and generator; pick one",
            )),
            (None, None) => Err(CliError::usage(
                "env section needs either file or generator",
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Write every policy iterate to `policies.ron` so reports can be
    /// recomputed later.
    pub keep_policies: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: None,
            keep_policies: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Histogram bins over the TV range [0, 1].
    pub bins: usize,
    /// Audit every realized update with the decentralized bound when
    /// the environment is in the exact regime.
    pub recompute_slack: bool,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            bins: 20,
            recompute_slack: true,
        }
    }
}

/// Grid axes for `decppo sweep`. Empty axes fall back to the value in
/// `[train]`, producing a single cell on that axis.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub eps: Vec<f64>,
    pub include_no_clip: bool,
    pub epochs: Vec<usize>,
    pub agents: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Warm-start checkpoint written by an earlier run; overrides
    /// `[train] init`.
    #[serde(default)]
    pub initial_policy: Option<PathBuf>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::usage(format!("config serialization failed: {e}")))
    }

    /// Short hash of the semantic configuration (environment, training,
    /// diagnostics, sweep grid), embedded in output metadata. Output
    /// paths are excluded so relocated runs stay byte-identical.
    pub fn hash(&self) -> Result<String, CliError> {
        #[derive(Serialize)]
        struct Semantic<'a> {
            env: &'a EnvSection,
            train: &'a TrainConfig,
            diagnostics: &'a DiagnosticsSection,
            sweep: &'a Option<SweepSection>,
        }
        let text = toml::to_string(&Semantic {
            env: &self.env,
            train: &self.train,
            diagnostics: &self.diagnostics,
            sweep: &self.sweep,
        })
        .map_err(|e| CliError::usage(format!("config serialization failed: {e}")))?;
        let digest = Sha256::digest(text.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Output directory precedence: `--out-dir` flag, then `[output] dir`,
/// then `$DECPPO_OUT_ROOT/<config stem>`, then `./runs/<config stem>`.
pub fn resolve_out_dir(
    flag: Option<PathBuf>,
    cfg: &ExperimentConfig,
    config_path: &Path,
) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    if let Some(dir) = &cfg.output.dir {
        return dir.clone();
    }
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    match std::env::var_os("DECPPO_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(stem),
        None => PathBuf::from("runs").join(stem),
    }
}
