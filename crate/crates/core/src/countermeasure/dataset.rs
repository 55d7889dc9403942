//! Countermeasure copy of a dataset: same labels, patterns and noise, with
//! the shader printed under every sample.

use std::path::Path;

use super::{apply_countermeasure, shader_for_text, ShaderParams};
use crate::imagegen::{
    create_dir, sample_plan, write_file, write_manifest, DatasetConfig, GrayImage, Manifest,
    ManifestHeader, SamplePlan, CONFIG_FILE, SCHEMA_VERSION,
};
use crate::rng::{derive_seed, Fnv1a64};
use crate::Result;

pub const SHADER_FILE: &str = "shader.json";

/// Clean text and shader layer of one planned sample. Each sample gets its
/// own shader seed, derived from `shader.seed` and the sample id.
pub fn sample_shader(
    plan: &SamplePlan,
    cfg: &DatasetConfig,
    shader: &ShaderParams,
) -> Result<(GrayImage, GrayImage)> {
    let text = plan.text_image(cfg)?;
    let params = ShaderParams {
        seed: derive_seed(shader.seed, plan.id),
        ..shader.clone()
    };
    let layer = shader_for_text(&text, &params)?;
    Ok((text, layer))
}

/// The countermeasure version of one planned sample.
pub fn render_countermeasure(
    plan: &SamplePlan,
    cfg: &DatasetConfig,
    shader: &ShaderParams,
) -> Result<GrayImage> {
    let (text, layer) = sample_shader(plan, cfg, shader)?;
    apply_countermeasure(&text, &plan.pattern_image(cfg)?, &layer, &cfg.compose, plan.noise_seed)
}

/// Writes the countermeasure dataset for `config` into `out_dir`, using the
/// usual layout plus `shader.json`. The manifest hash covers both configs.
pub fn countermeasure_dataset(
    config: &DatasetConfig,
    shader: &ShaderParams,
    out_dir: &Path,
) -> Result<Manifest> {
    config.validate()?;
    shader.validate()?;
    create_dir(&out_dir.join("images"))?;
    let config_json = config.canonical_json()?;
    let shader_json = serde_json::to_string(&serde_json::to_value(shader)?)?;
    let mut h = Fnv1a64::default();
    h.write(config_json.as_bytes());
    h.write(shader_json.as_bytes());
    let header = ManifestHeader {
        config_hash: format!("{:016x}", h.finish()),
        schema_version: SCHEMA_VERSION,
    };
    let mut records = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples as u64 {
        let plan = sample_plan(config, i);
        render_countermeasure(&plan, config, shader)?.write_pgm(&out_dir.join(plan.image_path()))?;
        records.push(plan.record());
    }
    write_file(&out_dir.join(CONFIG_FILE), config_json.as_bytes())?;
    write_file(&out_dir.join(SHADER_FILE), shader_json.as_bytes())?;
    let manifest = Manifest { header, records };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}
