//! Experiment description files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vmcr_core::data::{load_dataset, resize_normalize, synth_dataset, DomainConfig, Sample};
use vmcr_core::trainer::TrainConfig;

/// One imaging domain: either rendered synthetically or read from disk.
///
/// A `path` must contain `train/` and may contain `val/` and `test/`, each in
/// the `<stem>.png` + `<stem>_av.png` layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub synthetic: Option<DomainConfig>,
    pub path: Option<PathBuf>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub source: DomainSpec,
    pub target: DomainSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

/// Train, validation and test splits of one domain.
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let spec: Self = toml::from_str(&text).map_err(|e| {
            vmcr_core::Error::Config(format!("{}: {}", path.display(), e.to_string().trim_end()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut spec = spec;
        for d in [&mut spec.source, &mut spec.target] {
            if let Some(p) = &d.path {
                if p.is_relative() {
                    d.path = Some(base.join(p));
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (role, d) in [("source", &self.source), ("target", &self.target)] {
            match (&d.synthetic, &d.path) {
                (Some(c), None) => {
                    c.validate()?;
                    if d.train == 0 {
                        bail!(vmcr_core::Error::Config(format!("{role}.train must be > 0 for synthetic data")));
                    }
                }
                (None, Some(_)) => {}
                _ => bail!(vmcr_core::Error::Config(format!(
                    "{role}: set exactly one of `synthetic` or `path`"
                ))),
            }
        }
        self.train.validate()?;
        Ok(())
    }
}

/// Seed for one synthetic split, mixing the run seed, the domain's own seed,
/// the domain role and the split.
fn split_seed(run_seed: u64, domain_seed: u64, role: u64, split: u64) -> u64 {
    let mut x = run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(domain_seed.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(role << 8 | split);
    x ^= x >> 31;
    x.wrapping_mul(0x94D0_49BB_1331_11EB)
}

fn load_split(dir: &Path, size: usize) -> Result<Vec<Sample>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    load_dataset(dir)?
        .iter()
        .map(|s| resize_normalize(s, size).map_err(Into::into))
        .collect()
}

impl DomainSpec {
    /// Materialises all splits at `size x size`.
    pub fn splits(&self, run_seed: u64, role: u64, size: usize) -> Result<Splits> {
        if let Some(cfg) = &self.synthetic {
            let gen = |n: usize, split: u64| -> Result<Vec<Sample>> {
                Ok(synth_dataset(cfg, n, size, split_seed(run_seed, cfg.seed, role, split))?)
            };
            return Ok(Splits {
                train: gen(self.train, 0)?,
                val: gen(self.val, 1)?,
                test: gen(self.test, 2)?,
            });
        }
        let root = self.path.as_ref().expect("validated");
        let train = load_split(&root.join("train"), size)?;
        if train.is_empty() {
            bail!(vmcr_core::Error::Data(format!("{}: no training samples", root.join("train").display())));
        }
        Ok(Splits {
            train,
            val: load_split(&root.join("val"), size)?,
            test: load_split(&root.join("test"), size)?,
        })
    }
}
