//! Pipeline configuration: one TOML file with sections per stage, plus
//! `--set section.key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use hirec_core::eval::Arm;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub embed: EmbedConfig,
    pub taxonomy: TaxonomyConfig,
    pub miner: MinerConfig,
    pub retrieval: RetrievalConfig,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: Paths::default(),
            data: DataConfig::default(),
            embed: EmbedConfig::default(),
            taxonomy: TaxonomyConfig::default(),
            miner: MinerConfig::default(),
            retrieval: RetrievalConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Interaction log (required when `data.source = "movielens"`).
    pub data: Option<PathBuf>,
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// "movielens" reads `paths.data`; "synth" generates a planted corpus.
    pub source: String,
    pub min_seq_len: usize,
    pub train_frac: f64,
    pub n_future: usize,
    pub min_item_interactions: usize,
    pub min_user_interactions: usize,
    pub synth: SynthSection,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "movielens".into(),
            min_seq_len: 5,
            train_frac: 0.8,
            n_future: 10,
            min_item_interactions: 5,
            min_user_interactions: 5,
            synth: SynthSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub levels: usize,
    pub branching: usize,
    pub items_per_leaf: usize,
    pub users: usize,
    pub interests_per_user: usize,
    pub seq_len: usize,
    pub noise_frac: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            levels: 2,
            branching: 4,
            items_per_leaf: 50,
            users: 400,
            interests_per_user: 3,
            seq_len: 60,
            noise_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub dim: usize,
    pub window: usize,
    pub iters: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            window: 5,
            iters: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TaxonomyConfig {
    pub k: usize,
    pub c: usize,
    pub kmeans_iters: usize,
}

impl Default for TaxonomyConfig {
    fn default() -> Self {
        Self {
            k: 4,
            c: 250,
            kmeans_iters: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MinerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn: usize,
    pub beam_size: usize,
    pub prefix_aug: f64,
    pub min_leaf_hits: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn: 128,
            beam_size: 2,
            prefix_aug: 0.3,
            min_leaf_hits: 2,
            epochs: 10,
            batch: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub d_emb: usize,
    pub negatives_per_positive: usize,
    pub max_positives_per_category: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_baseline: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            d_emb: 64,
            negatives_per_positive: 5,
            max_positives_per_category: 10,
            epochs: 5,
            batch: 64,
            lr: 1e-3,
            train_baseline: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub m: Vec<usize>,
    pub arms: Vec<Arm>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            m: vec![20, 50],
            arms: vec![
                Arm::Full,
                Arm::WholeLibrary,
                Arm::UnifiedSequence,
                Arm::BaselineUnified,
            ],
        }
    }
}

impl PipelineConfig {
    /// Loads the TOML file, applies `--set section.key=value` overrides,
    /// and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut table: toml::Table = text
            .parse()
            .with_context(|| format!("parsing config {}", path.display()))?;
        for setting in overrides {
            apply_override(&mut table, setting)?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| anyhow!("config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| -> Result<()> {
            if v == 0 {
                bail!("{name} must be >= 1");
            }
            Ok(())
        };
        if !(0.0..1.0).contains(&self.data.train_frac) || self.data.train_frac == 0.0 {
            bail!("data.train_frac must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.data.synth.noise_frac) {
            bail!("data.synth.noise_frac must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.miner.prefix_aug) {
            bail!("miner.prefix_aug must lie in [0, 1]");
        }
        match self.data.source.as_str() {
            "movielens" | "synth" => {}
            other => bail!("data.source must be \"movielens\" or \"synth\", got {other:?}"),
        }
        positive("data.min_seq_len", self.data.min_seq_len)?;
        positive("data.n_future", self.data.n_future)?;
        positive("data.synth.levels", self.data.synth.levels)?;
        positive("data.synth.branching", self.data.synth.branching)?;
        positive("data.synth.items_per_leaf", self.data.synth.items_per_leaf)?;
        positive("data.synth.users", self.data.synth.users)?;
        positive(
            "data.synth.interests_per_user",
            self.data.synth.interests_per_user,
        )?;
        positive("data.synth.seq_len", self.data.synth.seq_len)?;
        if self.embed.dim < 2 {
            bail!("embed.dim must be >= 2");
        }
        positive("embed.window", self.embed.window)?;
        positive("embed.iters", self.embed.iters)?;
        if self.taxonomy.k < 2 {
            bail!("taxonomy.k must be >= 2");
        }
        positive("taxonomy.c", self.taxonomy.c)?;
        positive("taxonomy.kmeans_iters", self.taxonomy.kmeans_iters)?;
        positive("miner.d_model", self.miner.d_model)?;
        positive("miner.heads", self.miner.heads)?;
        if self.miner.d_model % self.miner.heads != 0 {
            bail!("miner.d_model must be divisible by miner.heads");
        }
        if self.miner.d_model % 2 != 0 {
            bail!("miner.d_model must be even");
        }
        positive("miner.enc_layers", self.miner.enc_layers)?;
        positive("miner.dec_layers", self.miner.dec_layers)?;
        positive("miner.ffn", self.miner.ffn)?;
        positive("miner.beam_size", self.miner.beam_size)?;
        positive("miner.min_leaf_hits", self.miner.min_leaf_hits)?;
        positive("miner.epochs", self.miner.epochs)?;
        positive("miner.batch", self.miner.batch)?;
        positive("retrieval.d_emb", self.retrieval.d_emb)?;
        positive(
            "retrieval.negatives_per_positive",
            self.retrieval.negatives_per_positive,
        )?;
        positive(
            "retrieval.max_positives_per_category",
            self.retrieval.max_positives_per_category,
        )?;
        positive("retrieval.epochs", self.retrieval.epochs)?;
        positive("retrieval.batch", self.retrieval.batch)?;
        if self.eval.m.is_empty() {
            bail!("eval.m must list at least one cutoff");
        }
        for &m in &self.eval.m {
            positive("eval.m entries", m)?;
        }
        if self.eval.arms.is_empty() {
            bail!("eval.arms must list at least one arm");
        }
        if self.eval.arms.contains(&Arm::BaselineUnified) && !self.retrieval.train_baseline {
            bail!("eval.arms includes baseline-unified but retrieval.train_baseline is false");
        }
        if self.data.source == "movielens" {
            match &self.paths.data {
                None => bail!("paths.data is required when data.source = \"movielens\""),
                Some(p) if !p.exists() => {
                    bail!("paths.data {} does not exist", p.display())
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Work dir after the `HIREC_WORK_DIR` environment override.
    pub fn effective_work_dir(&self) -> PathBuf {
        match std::env::var_os("HIREC_WORK_DIR") {
            Some(dir) => PathBuf::from(dir),
            None => self.paths.work_dir.clone(),
        }
    }

    /// Canonical TOML text of one section, for manifest hashing.
    pub fn section_toml(&self, section: &str) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| anyhow!("serialize config: {e}"))?;
        let table = value.as_table().expect("config is a table");
        let section_value = match section {
            "seed" => toml::Value::Integer(self.seed as i64),
            name => table
                .get(name)
                .cloned()
                .ok_or_else(|| anyhow!("no config section {name}"))?,
        };
        Ok(toml::to_string(&SectionWrap {
            section: section_value,
        })?)
    }
}

#[derive(Serialize)]
struct SectionWrap {
    section: toml::Value,
}

/// Applies one `section.key=value` override to the raw TOML table.
fn apply_override(table: &mut toml::Table, setting: &str) -> Result<()> {
    let (path, raw_value) = setting
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects section.key=value, got {setting:?}"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.is_empty() || keys.iter().any(|k| k.is_empty()) {
        bail!("--set path {path:?} is empty or malformed");
    }
    // Parse the value as a TOML literal; fall back to a plain string.
    let parsed: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw_value.trim().to_string()),
    };
    let mut current = table;
    for key in &keys[..keys.len() - 1] {
        current = current
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("--set path {path:?} crosses a non-table value"))?;
    }
    current.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("hirec.toml");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            "seed = 7\n[data]\nsource = \"synth\"\n",
        );
        let cfg = PipelineConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.taxonomy.k, 4);
        assert_eq!(cfg.taxonomy.c, 250);
        assert_eq!(cfg.eval.m, vec![20, 50]);
    }

    #[test]
    fn overrides_apply_with_type_inference() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[data]\nsource = \"synth\"\n");
        let cfg = PipelineConfig::load(
            &path,
            &[
                "miner.beam_size=6".to_string(),
                "data.train_frac=0.7".to_string(),
                "eval.m=[10]".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.miner.beam_size, 6);
        assert_eq!(cfg.data.train_frac, 0.7);
        assert_eq!(cfg.eval.m, vec![10]);
    }

    #[test]
    fn validation_names_field_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[data]\nsource = \"synth\"\n[taxonomy]\nk = 1\n");
        let err = PipelineConfig::load(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("taxonomy.k"), "{err}");

        let path = write_config(dir.path(), "[data]\nsource = \"movielens\"\n");
        let err = PipelineConfig::load(&path, &[]).unwrap_err().to_string();
        assert!(err.contains("paths.data"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(dir.path(), "[data]\nsource = \"synth\"\nbogus = 1\n");
        assert!(PipelineConfig::load(&path, &[]).is_err());
    }

    #[test]
    fn section_toml_is_stable() {
        let cfg = PipelineConfig::default();
        let a = cfg.section_toml("taxonomy").unwrap();
        let b = cfg.section_toml("taxonomy").unwrap();
        assert_eq!(a, b);
        assert!(a.contains("k = 4"));
    }
}
