use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use odpart::assignment::CostModel;
use odpart::experiment::{ExperimentConfig, ResolutionChoice, Strategy};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinFiles {
    pub label: String,
    pub fit: PathBuf,
    pub val: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speeds: Option<PathBuf>,
}

/// Key-value run configuration, read from TOML or JSON. Relative paths are
/// resolved against the directory of the file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    /// Fixed Louvain resolution; absent means a full sweep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `bpr` or `length`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fw_max_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gls_max_outer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gls_rel_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjust_max_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjust_tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip_adjustment: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bins: Vec<BinFiles>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(n) = cfg.network.as_mut() {
            rebase(n);
        }
        for b in &mut cfg.bins {
            rebase(&mut b.fit);
            rebase(&mut b.val);
            if let Some(s) = b.speeds.as_mut() {
                rebase(s);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        parse_cost(self.cost.as_deref().unwrap_or("bpr"))
    }

    /// Experiment settings; the seed comes from the command line when given.
    pub fn experiment(&self, seed: Option<u64>) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::default().with_cost(self.cost_model()?);
        if let Some(s) = self.strategy {
            c.strategy = s;
        }
        if let Some(r) = self.resolution {
            c.resolution = ResolutionChoice::Fixed(r);
        }
        if let Some(k) = self.k {
            c.k = k;
        }
        c.seed = seed.or(self.seed).unwrap_or(0);
        if let Some(v) = self.gap {
            c.adjustment.assignment.gap_threshold = v;
        }
        if let Some(v) = self.fw_max_iterations {
            c.adjustment.assignment.max_iterations = v;
        }
        if let Some(v) = self.gls_max_outer {
            c.gls.max_outer = v;
        }
        if let Some(v) = self.gls_rel_tol {
            c.gls.rel_tol = v;
        }
        if let Some(v) = self.ridge_scale {
            c.gls.ridge_scale = v;
        }
        if let Some(v) = self.adjust_max_iterations {
            c.adjustment.max_iterations = v;
        }
        if let Some(v) = self.adjust_tolerance {
            c.adjustment.tolerance = v;
        }
        if let Some(v) = self.prior_weight {
            c.adjustment.prior_weight = v;
        }
        if let Some(v) = self.flow_weight {
            c.adjustment.flow_weight = v;
        }
        if let Some(v) = self.skip_adjustment {
            c.skip_adjustment = v;
        }
        let a = &c.adjustment.assignment;
        if !(a.gap_threshold > 0.0) || a.max_iterations == 0 {
            bail!("assignment gap must be positive and the iteration cap at least 1");
        }
        if !(c.gls.rel_tol > 0.0) || !(c.gls.ridge_scale > 0.0) || c.gls.max_outer == 0 {
            bail!("GLS tolerance, ridge scale and iteration cap must be positive");
        }
        Ok(c)
    }
}

pub fn parse_cost(s: &str) -> Result<CostModel> {
    match s.to_ascii_lowercase().as_str() {
        "bpr" => Ok(CostModel::Bpr),
        "length" => Ok(CostModel::Length),
        other => bail!("unknown cost model {other:?} (expected bpr or length)"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(
            &t,
            "network = \"net\"\nstrategy = \"combined\"\nk = 2\ncost = \"length\"\n[[bins]]\nlabel = \"AM\"\nfit = \"f.csv\"\nval = \"v.csv\"\n",
        )
        .unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(
            &j,
            r#"{"network":"net","strategy":"combined","k":2,"cost":"length","bins":[{"label":"AM","fit":"f.csv","val":"v.csv"}]}"#,
        )
        .unwrap();
        let a = FileConfig::load(&t).unwrap();
        let b = FileConfig::load(&j).unwrap();
        assert_eq!(a.to_toml().unwrap(), b.to_toml().unwrap());
        assert_eq!(a.network.unwrap(), dir.path().join("net"));
        let e = b.experiment(Some(9)).unwrap();
        assert_eq!((e.strategy, e.k, e.seed), (Strategy::Combined, 2, 9));
        assert_eq!(e.adjustment.assignment.cost, CostModel::Length);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "strategey = \"internal\"\n").unwrap();
        assert!(FileConfig::load(&t).is_err());
    }
}
