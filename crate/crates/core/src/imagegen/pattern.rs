//! Parametric security patterns.

use serde::{Deserialize, Serialize};

use super::font::{glyph_cell, glyph_count};
use super::GrayImage;
use crate::rng::splitmix64;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    DiagonalHatch,
    Crosshatch,
    TiledGlyph,
}

impl PatternKind {
    /// Conventional pattern number: 1 hatch, 2 crosshatch, 3 tiled glyph.
    pub fn default_id(self) -> u32 {
        match self {
            PatternKind::DiagonalHatch => 1,
            PatternKind::Crosshatch => 2,
            PatternKind::TiledGlyph => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    /// Identifier recorded in manifests; defaults to the kind's number.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
    pub kind: PatternKind,
    pub period: usize,
    pub stroke: usize,
    pub ink: f64,
    #[serde(default)]
    pub phase: (i64, i64),
    #[serde(default)]
    pub seed: u64,
}

impl PatternSpec {
    pub fn new(kind: PatternKind, period: usize, stroke: usize, ink: f64) -> Self {
        Self {
            id: None,
            kind,
            period,
            stroke,
            ink,
            phase: (0, 0),
            seed: 0,
        }
    }

    pub fn id(&self) -> u32 {
        self.id.unwrap_or_else(|| self.kind.default_id())
    }

    pub fn with_phase(mut self, dx: i64, dy: i64) -> Self {
        self.phase = (dx, dy);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.stroke && self.stroke < self.period) {
            return Err(Error::Config(format!(
                "pattern needs 0 < stroke < period, got stroke {} period {}",
                self.stroke, self.period
            )));
        }
        if !(0.0..=1.0).contains(&self.ink) {
            return Err(Error::Config(format!("pattern ink {} outside [0, 1]", self.ink)));
        }
        Ok(())
    }

    /// Glyph tiled by the tiled-glyph kind.
    pub fn glyph(&self) -> usize {
        (splitmix64(self.seed) % glyph_count() as u64) as usize
    }

    fn is_ink(&self, x: usize, y: usize) -> bool {
        let p = self.period as i64;
        let u = x as i64 + self.phase.0;
        let v = y as i64 + self.phase.1;
        let s = self.stroke as i64;
        match self.kind {
            PatternKind::DiagonalHatch => (u + v).rem_euclid(p) < s,
            PatternKind::Crosshatch => (u + v).rem_euclid(p) < s || (u - v).rem_euclid(p) < s,
            PatternKind::TiledGlyph => {
                // Glyph drawn at scale `stroke` in the top-left of each tile.
                let tx = u.rem_euclid(p) as usize / self.stroke;
                let ty = v.rem_euclid(p) as usize / self.stroke;
                glyph_cell(self.glyph(), tx, ty)
            }
        }
    }
}

/// The three stock patterns: hatch, crosshatch and tiled glyph.
pub fn standard_patterns() -> Vec<PatternSpec> {
    vec![
        PatternSpec::new(PatternKind::DiagonalHatch, 8, 2, 1.0),
        PatternSpec::new(PatternKind::Crosshatch, 8, 2, 1.0),
        PatternSpec {
            seed: 7,
            ..PatternSpec::new(PatternKind::TiledGlyph, 9, 1, 1.0)
        },
    ]
}

/// Renders a pattern: ink pixels carry `1 - ink`, the rest `1`.
pub fn synth_pattern(spec: &PatternSpec, w: usize, h: usize) -> Result<GrayImage> {
    spec.validate()?;
    let ink_value = (1.0 - spec.ink) as f32;
    Ok(GrayImage::from_fn(w, h, |x, y| {
        if spec.is_ink(x, y) {
            ink_value
        } else {
            1.0
        }
    }))
}
