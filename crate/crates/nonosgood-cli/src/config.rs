//! Flat `key = value` run configuration.
//!
//! Keys not owned by [`RunConfig`] itself are forwarded to the verify suite's
//! [`SuiteConfig`], so every threshold and sample size is settable from a file.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nonosgood::moc::build_auxiliary;
use nonosgood::{Modulus, ModulusPair};
use nonosgood::verify::SuiteConfig;

/// How `ω̃` is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxMode {
    /// `ω̃` given explicitly by `omega_tilde`.
    Catalog,
    /// `ω̃` built from `ω` by the auxiliary-modulus construction.
    Auxiliary,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Modulus specs as understood by `Modulus::parse`.
    pub omega: String,
    pub omega_tilde: String,
    /// Directory that relative `table("…")` paths resolve against.
    pub base_dir: PathBuf,
    pub aux: AuxMode,
    pub out: PathBuf,
    pub level_cap: usize,
    /// Frame side in pixels.
    pub grid: usize,
    pub suite: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            omega: "catalog(a=2, eps=1)".into(),
            omega_tilde: "catalog(a=2, eps=0.5)".into(),
            base_dir: PathBuf::from("."),
            aux: AuxMode::Catalog,
            out: PathBuf::from("out"),
            level_cap: nonosgood::fixpoint::DEFAULT_LEVEL_CAP,
            grid: 256,
            suite: SuiteConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "omega" | "modulus" => self.omega = v.to_string(),
            "omega_tilde" => self.omega_tilde = v.to_string(),
            "aux" => {
                self.aux = match v {
                    "catalog" => AuxMode::Catalog,
                    "auxiliary" => AuxMode::Auxiliary,
                    _ => bail!("aux: expected `catalog` or `auxiliary`, got `{v}`"),
                }
            }
            "out" => self.out = PathBuf::from(v),
            "level_cap" => self.level_cap = v.parse().with_context(|| format!("level_cap: `{v}`"))?,
            "grid" => self.grid = v.parse().with_context(|| format!("grid: `{v}`"))?,
            k => self.suite.set(k, v).map_err(|e| anyhow!(e))?,
        }
        Ok(())
    }

    /// Applies a file of `key = value` lines; `#` starts a comment.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if let Some(dir) = path.parent() {
            self.base_dir = dir.to_path_buf();
        }
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), i + 1))?;
            self.set(k, v).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.suite;
        if s.dim < 2 {
            bail!("dim must be at least 2");
        }
        if s.n_max == 0 || self.grid == 0 || self.level_cap == 0 {
            bail!("n_max, grid and level_cap must be positive");
        }
        Ok(())
    }

    pub fn pair(&self) -> Result<ModulusPair> {
        let omega = Modulus::parse(&self.omega, &self.base_dir)?;
        // An Osgood ω admits no construction; report that before any pair check.
        omega.omega_int(0.0)?;
        let omega_tilde = match self.aux {
            AuxMode::Catalog => Modulus::parse(&self.omega_tilde, &self.base_dir)?,
            AuxMode::Auxiliary => build_auxiliary(&omega, self.suite.aux_depth)?,
        };
        Ok(ModulusPair::new(omega, omega_tilde)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_reach_the_suite() {
        let mut c = RunConfig::default();
        c.set("depth", "2").unwrap();
        c.set("grid", "64").unwrap();
        c.set("aux", "auxiliary").unwrap();
        assert_eq!(c.suite.depth, 2);
        assert_eq!(c.grid, 64);
        assert_eq!(c.aux, AuxMode::Auxiliary);
        assert!(c.set("bogus", "1").is_err());
    }

    #[test]
    fn modulus_specs_and_pairs() {
        let mut c = RunConfig::default();
        assert!(c.pair().is_ok());
        c.set("modulus", "linear(slope=1)").unwrap();
        assert!(c.pair().is_err());
        c.set("omega", "catalog(a=2)").unwrap();
        assert!(c.pair().is_err());
    }
}
