//! Run configuration: a TOML document with every default filled in,
//! environment overrides, and a content hash.

use std::path::{Path, PathBuf};

use inrgan::data::{load_folder, make_synthetic, ImageDataset, ShapeKind, SyntheticShapeSpec};
use inrgan::gan::{DiscriminatorSpec, TrainConfig};
use inrgan::hypernet::GeneratorConfig;
use inrgan::inr::ArchConfig;
use inrgan::metrics::{LatentSpace, ProjectionConfig};
use inrgan::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variables with this prefix override config keys; nested
/// keys are joined with `__`, e.g. `INRGAN_TRAIN__TOTAL_STEPS=10`.
pub const ENV_PREFIX: &str = "INRGAN_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Image folder to train on; the synthetic corpus when absent.
    pub folder: Option<PathBuf>,
    /// Number of synthetic images.
    pub count: usize,
    pub hflip: bool,
    pub synthetic: SyntheticShapeSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            folder: None,
            count: 5000,
            hflip: true,
            synthetic: SyntheticShapeSpec {
                kind: ShapeKind::Blob,
                ..SyntheticShapeSpec::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub fid_samples: usize,
    pub extractor_seed: u64,
    pub kpl_train: usize,
    pub kpl_test: usize,
    pub kpl_space: LatentSpace,
    pub projection: ProjectionConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            fid_samples: 1024,
            extractor_seed: 0,
            kpl_train: 1000,
            kpl_test: 256,
            kpl_space: LatentSpace::W,
            projection: ProjectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; data, initialization and latent streams derive from it.
    pub seed: u64,
    pub arch: ArchConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            arch: ArchConfig::reference(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorSpec::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse TOML text, apply `(key, value)` environment overrides, then
    /// resolve and validate.
    pub fn from_toml(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, Error> {
        let mut doc: toml::Table = toml::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("config: {}", one_line(&e.to_string()))))?;
        for (k, v) in env {
            if let Some(path) = k.strip_prefix(ENV_PREFIX) {
                set_path(&mut doc, path, &v)?;
            }
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| {
                Error::InvalidArgument(format!("config: {}", one_line(&e.to_string())))
            })?;
        cfg.resolved()
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, std::env::vars())
    }

    /// Copy the root seed into each subsystem and check cross-section
    /// consistency.
    pub fn resolved(mut self) -> Result<Self, Error> {
        self.train.seed = self.seed;
        self.data.synthetic.seed = self.seed;
        let arch = self.arch.build()?;
        let r = arch.resolution();
        let others = [
            ("train.resolution", self.train.resolution),
            ("discriminator.resolution", self.discriminator.resolution),
            ("data.synthetic.resolution", self.data.synthetic.resolution),
        ];
        for (name, v) in others {
            if v != r {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {v} but the decoder renders {r}x{r}"
                )));
            }
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 characters.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config is representable as JSON");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn dataset(&self) -> Result<ImageDataset, Error> {
        match &self.data.folder {
            Some(dir) => load_folder(dir, self.train.resolution, self.data.hflip),
            None => make_synthetic(&self.data.synthetic, self.data.count, self.data.hflip),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn set_path(doc: &mut toml::Table, path: &str, raw: &str) -> Result<(), Error> {
    let keys: Vec<String> = path.split("__").map(|k| k.to_ascii_lowercase()).collect();
    if keys.iter().any(String::is_empty) {
        return Err(Error::InvalidArgument(format!(
            "malformed override {ENV_PREFIX}{path}"
        )));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::InvalidArgument(format!("override {ENV_PREFIX}{path}: {k} is not a table"))
        })?;
    }
    table.insert(keys[keys.len() - 1].clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml("", no_env()).unwrap();
        assert_eq!(c, RunConfig::default().resolved().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 1", no_env()).is_err());
        assert!(RunConfig::from_toml("[train]\nlr = 1.0", no_env()).is_err());
    }

    #[test]
    fn dump_round_trips_hash() {
        let c = RunConfig::from_toml("seed = 7\n[train]\ntotal_steps = 12\nlr_g = 3e-5", no_env())
            .unwrap();
        let again = RunConfig::from_toml(&c.to_toml(), no_env()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
        assert_ne!(c.hash(), RunConfig::default().resolved().unwrap().hash());
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.data.synthetic.seed, 7);
        // the dump names every default
        for key in [
            "lr_shared_inr",
            "r1_gamma",
            "fourier_n_f",
            "head_init_scale",
            "stem_channels",
            "kpl_train",
        ] {
            assert!(c.to_toml().contains(key), "{key}");
        }
    }

    #[test]
    fn env_overrides() {
        let env = vec![
            ("INRGAN_TRAIN__TOTAL_STEPS".to_string(), "9".to_string()),
            ("INRGAN_SEED".to_string(), "4".to_string()),
            ("INRGAN_METRICS__KPL_SPACE".to_string(), "z".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let c = RunConfig::from_toml("", env).unwrap();
        assert_eq!(c.train.total_steps, 9);
        assert_eq!(c.seed, 4);
        assert_eq!(c.metrics.kpl_space, LatentSpace::Z);
        let bad = vec![("INRGAN_TRAIN__NOPE".to_string(), "1".to_string())];
        assert!(RunConfig::from_toml("", bad).is_err());
    }

    #[test]
    fn resolution_mismatch_is_a_config_error() {
        let e = RunConfig::from_toml("[train]\nresolution = 64", no_env()).unwrap_err();
        assert!(matches!(e, Error::InvalidArgument(_)));
    }
}
