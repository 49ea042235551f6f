//! Run configuration: TOML file, then command-line overrides, over defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gae_core::gae::GaeConfig;
use gae_core::metrics::EvalConfig;
use gae_core::toylab::ToyConfig;
use gae_core::verify::VerifyConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_SEED: u64 = 2026;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; fans out to every seeded section.
    pub seed: u64,
    pub out: PathBuf,
    pub inputs: Inputs,
    pub toy: ToyConfig,
    pub gae: GaeConfig,
    pub adapt: AdaptOptions,
    pub diagnose: DiagnoseOptions,
    pub eval: EvalOptions,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: DEFAULT_SEED,
            out: PathBuf::from("gae-out"),
            inputs: Inputs::default(),
            toy: ToyConfig::default(),
            gae: GaeConfig::default(),
            adapt: AdaptOptions::default(),
            diagnose: DiagnoseOptions::default(),
            eval: EvalOptions::default(),
            verify: VerifyConfig::default(),
        };
        cfg.apply_seed(DEFAULT_SEED);
        cfg
    }
}

/// Input files. Activations and checkpoints use the library's binary formats.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub dictionary: Option<PathBuf>,
    /// OOD activations for `adapt` and `eval`.
    pub activations: Option<PathBuf>,
    /// ID activations or second moment.
    pub id: Option<PathBuf>,
    /// OOD activations or second moment for `diagnose`.
    pub ood: Option<PathBuf>,
    pub head: Option<PathBuf>,
    /// One target token index per line; defaults to the head's argmax on the true activations.
    pub targets: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptOptions {
    /// Shift norms below `threshold * ||M_id||_F` are reported as no significant shift.
    pub shift_threshold: f64,
}

impl Default for AdaptOptions {
    fn default() -> Self {
        Self { shift_threshold: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseOptions {
    pub rank: usize,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self { rank: GaeConfig::default().rank }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub budgets: Vec<usize>,
    pub m_star: usize,
    pub exclusion_threshold: f64,
    /// Evaluation items drawn from the batch (all rows when larger).
    pub n_items: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        let metrics = EvalConfig::default();
        Self {
            budgets: metrics.budgets,
            m_star: metrics.m_star,
            exclusion_threshold: metrics.exclusion_threshold,
            n_items: 1000,
            seed: DEFAULT_SEED,
        }
    }
}

impl EvalOptions {
    pub fn metrics(&self) -> EvalConfig {
        EvalConfig {
            budgets: self.budgets.clone(),
            m_star: self.m_star,
            exclusion_threshold: self.exclusion_threshold,
        }
    }
}

/// Values given on the command line; `None` leaves the file or default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub severities: Option<Vec<f64>>,
    pub rank: Option<usize>,
    pub lambda_geom: Option<f64>,
    pub lambda_pres: Option<f64>,
    pub alpha: Option<f64>,
    pub n_fit: Option<usize>,
    pub budgets: Option<Vec<usize>>,
    pub m_star: Option<usize>,
    pub trials: Option<usize>,
    pub inputs: Inputs,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        let explicit_seed = raw.get("seed").is_some();
        let mut cfg: RunConfig = raw.try_into().context("config does not match the schema")?;
        if explicit_seed {
            // A top-level seed fans out unless a section pins its own.
            let sections = Self::seeded_sections_in(text)?;
            let master = cfg.seed;
            let pinned = cfg.clone();
            cfg.apply_seed(master);
            if sections.toy {
                cfg.toy.seed = pinned.toy.seed;
            }
            if sections.gae {
                cfg.gae.seed = pinned.gae.seed;
            }
            if sections.eval {
                cfg.eval.seed = pinned.eval.seed;
            }
            if sections.verify {
                cfg.verify.seed = pinned.verify.seed;
            }
        }
        Ok(cfg)
    }

    fn seeded_sections_in(text: &str) -> Result<SeededSections> {
        let raw: toml::Value = toml::from_str(text)?;
        let has = |section: &str| raw.get(section).and_then(|s| s.get("seed")).is_some();
        Ok(SeededSections {
            toy: has("toy"),
            gae: has("gae"),
            eval: has("eval"),
            verify: has("verify"),
        })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("invalid config {}", p.display()))
            }
        }
    }

    fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.toy.seed = seed;
        self.gae.seed = seed;
        self.eval.seed = seed;
        self.verify.seed = seed;
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.apply_seed(seed);
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(s) = &o.severities {
            self.toy.sweep.severities = s.clone();
        }
        let gaes = [&mut self.gae, &mut self.toy.sweep.gae];
        for g in gaes {
            if let Some(r) = o.rank {
                g.rank = r;
            }
            if let Some(v) = o.lambda_geom {
                g.lambda_geom = v;
            }
            if let Some(v) = o.lambda_pres {
                g.lambda_pres = v;
            }
            if let Some(v) = o.alpha {
                g.alpha = v;
            }
            if let Some(v) = o.n_fit {
                g.n_fit = v;
            }
        }
        if let Some(r) = o.rank {
            self.toy.sweep.rank = Some(r);
            self.diagnose.rank = r;
        }
        if let Some(b) = &o.budgets {
            self.eval.budgets = b.clone();
        }
        if let Some(m) = o.m_star {
            self.eval.m_star = m;
        }
        if let Some(t) = o.trials {
            self.verify.trials = t;
        }
        let i = &o.inputs;
        for (dst, src) in [
            (&mut self.inputs.dictionary, &i.dictionary),
            (&mut self.inputs.activations, &i.activations),
            (&mut self.inputs.id, &i.id),
            (&mut self.inputs.ood, &i.ood),
            (&mut self.inputs.head, &i.head),
            (&mut self.inputs.targets, &i.targets),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gae.validate().context("[gae]")?;
        self.toy.sweep.gae.validate().context("[toy.sweep.gae]")?;
        let sev = &self.toy.sweep.severities;
        if sev.is_empty() {
            bail!("at least one severity is required");
        }
        if sev.iter().any(|s| !(0.0..=1.0).contains(s)) {
            bail!("severities must lie in [0, 1]");
        }
        if sev.windows(2).any(|w| !(w[0] < w[1])) {
            bail!("severities must be strictly ascending");
        }
        if self.diagnose.rank == 0 {
            bail!("diagnose rank must be at least 1");
        }
        if self.eval.budgets.contains(&0) || self.eval.m_star == 0 {
            bail!("budgets and m* must be positive");
        }
        if self.eval.n_items == 0 {
            bail!("eval n_items must be at least 1");
        }
        if !(self.adapt.shift_threshold >= 0.0) {
            bail!("shift_threshold must be >= 0");
        }
        if self.verify.trials == 0 {
            bail!("verify trials must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON encoding of the resolved config,
    /// output directory excluded.
    pub fn digest(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let json = serde_json::to_vec(&canonical)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }
}

struct SeededSections {
    toy: bool,
    gae: bool,
    eval: bool,
    verify: bool,
}
