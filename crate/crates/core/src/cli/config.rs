use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Schema;
use crate::error::{Error, Result};
use crate::inference::BootstrapOptions;
use crate::pipeline::{AteSpec, DistributionSpec, PipelineSpec};
use crate::simulation::DgpSpec;
use crate::study::{StudySpec, StudyTarget};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "SELCF_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(flatten)]
    pub schema: Schema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    /// Label of the comparison group.
    pub group1: String,
    /// Label of the base group.
    pub group0: String,
    #[serde(default = "default_decompose_taus")]
    pub taus: Vec<f64>,
    /// Outcome grid; 99 percentiles of pooled trimmed `Y` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_grid: Option<Vec<f64>>,
    /// Also bootstrap the decomposition with the `[bootstrap]` settings.
    #[serde(default)]
    pub bootstrap: bool,
}

fn default_decompose_taus() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimGroup {
    pub label: String,
    pub n: usize,
    pub dgp: DgpSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub groups: Vec<SimGroup>,
    /// Run a Monte Carlo study instead of writing a dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCheckConfig {
    pub dgp: DgpSpec,
    pub n: usize,
    pub x_points: Vec<Vec<f64>>,
    pub v_points: Vec<f64>,
    #[serde(default)]
    pub taus: Vec<f64>,
    /// Population draws for the projection oracle.
    #[serde(default = "default_oracle_draws")]
    pub draws: usize,
    /// Largest acceptable absolute error; the command fails above it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

fn default_oracle_draws() -> usize {
    2_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    pub pipeline: PipelineSpec,
    pub bootstrap: BootstrapOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decompose: Option<DecomposeConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_check: Option<OracleCheckConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("selcf-out"),
            data: None,
            pipeline: PipelineSpec::default(),
            bootstrap: BootstrapOptions::default(),
            decompose: None,
            simulate: None,
            oracle_check: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a relative `data.path` is taken relative to it.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(d), Some(dir)) = (cfg.data.as_mut(), path.parent()) {
            if d.path.is_relative() {
                d.path = dir.join(&d.path);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Output directory, after the environment override.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(d) if !d.is_empty() => PathBuf::from(d),
            _ => self.output_dir.clone(),
        }
    }

    /// A config exercising every command, printed by `--print-defaults`.
    pub fn example() -> RunConfig {
        let mut shifted = DgpSpec::gaussian(0.5);
        shifted.gamma0 = 1.0;
        let ate = AteSpec {
            treated: vec![1.0],
            control: vec![0.0],
            naive: true,
        };
        RunConfig {
            seed: 42,
            output_dir: PathBuf::from("selcf-out"),
            data: Some(DataConfig {
                path: PathBuf::from("data/simulated.csv"),
                schema: Schema {
                    group: Some("group".into()),
                    ..Schema::new(&["x1", "z1"], &["x1"])
                },
            }),
            pipeline: PipelineSpec {
                asf: vec![vec![-1.0], vec![0.0], vec![1.0]],
                ate: Some(ate.clone()),
                distribution: Some(DistributionSpec {
                    x: vec![vec![0.0]],
                    y: None,
                    taus: vec![0.25, 0.5, 0.75],
                }),
                ..Default::default()
            },
            bootstrap: BootstrapOptions::default(),
            decompose: Some(DecomposeConfig {
                group1: "b".into(),
                group0: "a".into(),
                taus: default_decompose_taus(),
                y_grid: None,
                bootstrap: false,
            }),
            simulate: Some(SimulateConfig {
                groups: vec![
                    SimGroup {
                        label: "a".into(),
                        n: 2000,
                        dgp: DgpSpec::gaussian(0.5),
                    },
                    SimGroup {
                        label: "b".into(),
                        n: 2000,
                        dgp: shifted,
                    },
                ],
                study: None,
            }),
            oracle_check: Some(OracleCheckConfig {
                dgp: DgpSpec::gaussian(0.5),
                n: 5000,
                x_points: vec![vec![-1.0], vec![0.0], vec![1.0]],
                v_points: vec![0.25, 0.5, 0.75],
                taus: vec![0.25, 0.5, 0.75],
                draws: default_oracle_draws(),
                tolerance: None,
            }),
        }
    }

    /// Study settings used when `[simulate.study]` is present but sparse.
    pub fn example_study() -> StudySpec {
        StudySpec {
            dgp: DgpSpec::gaussian(0.5),
            n: 2000,
            reps: 200,
            seed: 1,
            pipeline: PipelineSpec {
                ate: Some(AteSpec {
                    treated: vec![1.0],
                    control: vec![0.0],
                    naive: true,
                }),
                ..Default::default()
            },
            bootstrap: Some(BootstrapOptions::default()),
            targets: vec![StudyTarget {
                name: "ate[x1_1=1,x1_0=0]".into(),
                truth: 1.0,
            }],
            band: None,
        }
    }
}
