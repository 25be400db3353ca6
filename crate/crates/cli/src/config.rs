//! Run configuration: TOML file, `STX_` environment overrides, validation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use shape_transfer::metrics::{DistanceMode, Spacing};
use shape_transfer::nets::ArchConfig;
use shape_transfer::phantom::PhantomSpec;
use shape_transfer::train::TrainConfig;

pub const ENV_PREFIX: &str = "STX_";
pub const RESOLVED_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Labeled source-domain manifest (file or directory).
    pub source: Option<PathBuf>,
    /// Target-domain manifest used for training; its masks are never read.
    pub target: Option<PathBuf>,
    /// Labeled target-domain manifest for evaluation only.
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Voxel size along (slice, row, column).
    pub spacing: [f64; 3],
    /// Average 2-D per-slice distances instead of pooling 3-D boundaries.
    pub per_slice: bool,
    pub distance_unit: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { spacing: [1.0; 3], per_slice: false, distance_unit: "px".into() }
    }
}

impl EvalConfig {
    pub fn spacing(&self) -> Spacing {
        Spacing { slice: self.spacing[0], row: self.spacing[1], col: self.spacing[2] }
    }

    pub fn mode(&self) -> DistanceMode {
        if self.per_slice {
            DistanceMode::PerSlice
        } else {
            DistanceMode::Stacked
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Master seeds; every seed gets its own phantom data and initialization.
    pub seeds: Vec<u64>,
    pub source_patients: u32,
    pub source_slices: u32,
    pub target_patients: u32,
    pub target_slices: u32,
    pub eval_patients: u32,
    pub eval_slices: u32,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            source_patients: 10,
            source_slices: 10,
            target_patients: 10,
            target_slices: 10,
            eval_patients: 10,
            eval_slices: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub phantom: PhantomSpec,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub evaluate: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
            phantom: PhantomSpec::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
            evaluate: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `STX_SECTION__KEY=value` pairs onto a TOML table.
pub fn apply_overrides<I>(table: &mut toml::Table, vars: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_ascii_lowercase).collect();
        if path.iter().any(String::is_empty) {
            bail!("malformed override variable {key}");
        }
        let (last, parents) = path.split_last().expect("non-empty path");
        let mut node = &mut *table;
        for p in parents {
            let entry = node.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = match entry {
                toml::Value::Table(t) => t,
                _ => bail!("{key}: `{p}` is not a section"),
            };
        }
        node.insert(last.clone(), parse_value(&raw));
    }
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or the defaults), then applies environment overrides.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env<I>(path: Option<&Path>, vars: I) -> anyhow::Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, vars)?;
        let origin = path.map_or_else(|| "defaults".to_string(), |p| p.display().to_string());
        toml::Value::Table(table).try_into().with_context(|| format!("invalid configuration ({origin})"))
    }

    /// Every validation failure, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .phantom
            .problems()
            .into_iter()
            .chain(self.arch.problems())
            .chain(self.train.problems())
            .chain(self.evaluate.spacing().validate().err())
            .map(|e| e.to_string())
            .collect();
        if self.ablation.seeds.is_empty() {
            out.push("invalid ablation.seeds: at least one seed is required".into());
        }
        for (name, v) in [
            ("ablation.source_patients", self.ablation.source_patients),
            ("ablation.source_slices", self.ablation.source_slices),
            ("ablation.target_patients", self.ablation.target_patients),
            ("ablation.target_slices", self.ablation.target_slices),
            ("ablation.eval_patients", self.ablation.eval_patients),
            ("ablation.eval_slices", self.ablation.eval_slices),
        ] {
            if v == 0 {
                out.push(format!("invalid {name}: must be at least 1"));
            }
        }
        out
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("configuration has {} problem(s):\n  {}", problems.len(), problems.join("\n  "))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let p = dir.join(RESOLVED_FILE);
        std::fs::write(&p, self.to_toml()).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlamda_cyc = 3.0\n").unwrap();
        let err = format!("{:#}", RunConfig::load_with_env(Some(&p), vec![]).unwrap_err());
        assert!(err.contains("lamda_cyc"), "{err}");
    }

    #[test]
    fn environment_overrides_nested_keys() {
        let c = RunConfig::load_with_env(
            None,
            env(&[
                ("STX_TRAIN__WEIGHTS__LAMBDA_SHAPE", "0.5"),
                ("STX_TRAIN__EPOCHS", "7"),
                ("STX_OUT_DIR", "/tmp/x"),
                ("HOME", "/root"),
            ]),
        )
        .unwrap();
        assert_eq!(c.train.weights.lambda_shape, 0.5);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.out_dir, PathBuf::from("/tmp/x"));
        assert!(RunConfig::load_with_env(None, env(&[("STX_TRAIN__TYPO", "1")])).is_err());
    }

    #[test]
    fn all_problems_are_listed() {
        let mut c = RunConfig::default();
        c.train.batch_size = 0;
        c.arch.image_size = 63;
        c.phantom.scar_intensity = 4.0;
        assert_eq!(c.problems().len(), 3);
    }
}
