//! Deterministic dataset generation and loading.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! config.json        canonical JSON of the DatasetConfig
//! manifest.jsonl     header line, then one SampleRecord per line
//! images/NNNNNN.pgm  one binary PGM per sample
//! ```

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{compose_sample, render_text, synth_pattern, ComposeParams, GrayImage, PatternSpec};
use crate::rng::{fnv1a64, splitmix64};
use crate::{Alphabet, Error, Result, SplitMix64};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Self {
            width: 160,
            height: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub wordlist: Vec<String>,
    pub n_samples: usize,
    pub split_fraction: f64,
    #[serde(default)]
    pub canvas: Canvas,
    /// Empty means clean samples (pattern id "none").
    #[serde(default)]
    pub patterns: Vec<PatternSpec>,
    #[serde(default)]
    pub compose: ComposeParams,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        if self.wordlist.is_empty() {
            return Err(Error::Config("empty wordlist".into()));
        }
        let cap = super::font::capacity(self.canvas.width, self.canvas.height);
        for w in &self.wordlist {
            Alphabet.validate(w)?;
            if w.is_empty() || w.chars().count() > cap {
                return Err(Error::Config(format!(
                    "label {w:?} must have 1..={cap} characters for this canvas"
                )));
            }
        }
        for p in &self.patterns {
            p.validate()?;
        }
        self.compose.validate()
    }

    /// Sorted-key compact JSON.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }

    /// FNV-1a 64 over [`Self::canonical_json`].
    pub fn hash(&self) -> Result<u64> {
        Ok(fnv1a64(self.canonical_json()?.as_bytes()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub label: String,
    #[serde(with = "pattern_id_format")]
    pub pattern_id: Option<u32>,
    pub split: Split,
    pub image_path: String,
}

mod pattern_id_format {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<u32>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(id) => s.serialize_u32(*id),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u32>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(id) => Ok(Some(id)),
            Raw::Name(s) if s == "none" => Ok(None),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("bad pattern_id {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub config_hash: String,
    pub schema_version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<SampleRecord>,
}

/// Everything that is random about one sample, drawn in a fixed order from
/// `SplitMix64(splitmix64(seed ^ i))`: label, split, pattern choice, pattern
/// phase offset (x then y), noise seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    pub id: u64,
    pub label: String,
    pub split: Split,
    /// Index into `DatasetConfig::patterns`, with the per-sample phase applied.
    pub pattern: Option<(usize, PatternSpec)>,
    pub noise_seed: u64,
}

impl SamplePlan {
    pub fn image_path(&self) -> String {
        format!("images/{:06}.pgm", self.id)
    }

    pub fn text_image(&self, cfg: &DatasetConfig) -> Result<GrayImage> {
        render_text(&self.label, cfg.canvas.width, cfg.canvas.height)
    }

    pub fn pattern_image(&self, cfg: &DatasetConfig) -> Result<GrayImage> {
        match &self.pattern {
            Some((_, spec)) => synth_pattern(spec, cfg.canvas.width, cfg.canvas.height),
            None => Ok(GrayImage::white(cfg.canvas.width, cfg.canvas.height)),
        }
    }

    /// The photographed sample, composited with `compose`.
    pub fn render_with(&self, cfg: &DatasetConfig, compose: &ComposeParams) -> Result<GrayImage> {
        compose_sample(
            &self.text_image(cfg)?,
            &self.pattern_image(cfg)?,
            compose,
            self.noise_seed,
        )
    }

    pub fn render(&self, cfg: &DatasetConfig) -> Result<GrayImage> {
        self.render_with(cfg, &cfg.compose)
    }

    pub fn record(&self) -> SampleRecord {
        SampleRecord {
            id: self.id,
            label: self.label.clone(),
            pattern_id: self.pattern.as_ref().map(|(_, s)| s.id()),
            split: self.split,
            image_path: self.image_path(),
        }
    }
}

pub fn sample_plan(cfg: &DatasetConfig, i: u64) -> SamplePlan {
    let mut rng = SplitMix64::new(splitmix64(cfg.seed ^ i));
    let label = cfg.wordlist[rng.below(cfg.wordlist.len())].clone();
    let split = if rng.next_f64() < cfg.split_fraction {
        Split::Train
    } else {
        Split::Eval
    };
    let pattern = if cfg.patterns.is_empty() {
        None
    } else {
        let idx = rng.below(cfg.patterns.len());
        let spec = &cfg.patterns[idx];
        let dx = rng.below(spec.period) as i64;
        let dy = rng.below(spec.period) as i64;
        let shifted = spec.clone().with_phase(spec.phase.0 + dx, spec.phase.1 + dy);
        Some((idx, shifted))
    };
    SamplePlan {
        id: i,
        label,
        split,
        pattern,
        noise_seed: rng.next_u64(),
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::storage(path, e))?;
    f.write_all(bytes).map_err(|e| Error::storage(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::storage(path, e))
}

/// Writes a manifest (header plus records) as JSON lines.
pub(crate) fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{}", serde_json::to_string(&manifest.header)?).unwrap();
    for r in &manifest.records {
        writeln!(out, "{}", serde_json::to_string(r)?).unwrap();
    }
    write_file(&dir.join(MANIFEST_FILE), out.as_bytes())
}

/// Renders every sample of `config` into `out_dir` and returns the manifest.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    create_dir(&out_dir.join("images"))?;
    let header = ManifestHeader {
        config_hash: format!("{:016x}", config.hash()?),
        schema_version: SCHEMA_VERSION,
    };
    let mut records = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples as u64 {
        let plan = sample_plan(config, i);
        let img = plan.render(config)?;
        img.write_pgm(&out_dir.join(plan.image_path()))?;
        records.push(plan.record());
    }
    write_file(
        &out_dir.join(CONFIG_FILE),
        config.canonical_json()?.as_bytes(),
    )?;
    let manifest = Manifest { header, records };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let f = std::fs::File::open(&path).map_err(|e| Error::storage(&path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?
        .map_err(|e| Error::storage(&path, e))?;
    let header: ManifestHeader = serde_json::from_str(&first)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "manifest schema {} (expected {SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::storage(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(Manifest { header, records })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: u64,
    pub label: String,
    pub image: GrayImage,
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<LabeledImage>,
    pub eval: Vec<LabeledImage>,
}

impl LoadedDataset {
    pub fn all(&self) -> impl Iterator<Item = &LabeledImage> {
        self.train.iter().chain(&self.eval)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads a dataset directory into memory, partitioned by split.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest = read_manifest(dir)?;
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for r in &manifest.records {
        let image = GrayImage::read_pgm(&dir.join(&r.image_path))?;
        let item = LabeledImage {
            id: r.id,
            label: r.label.clone(),
            image,
        };
        match r.split {
            Split::Train => train.push(item),
            Split::Eval => eval.push(item),
        }
    }
    Ok(LoadedDataset {
        root: dir.to_path_buf(),
        manifest,
        train,
        eval,
    })
}
