//! Content-aware shader: find the written content, then fill the blank
//! paper around it with randomly placed black blocks at the same ink density
//! as the strokes, so that strokes stop standing out from their background.

mod dataset;

pub use dataset::{countermeasure_dataset, render_countermeasure, sample_shader, SHADER_FILE};

use serde::{Deserialize, Serialize};

use crate::imagegen::{compose_sample, ComposeParams, GrayImage};
use crate::{Error, Result, SplitMix64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShaderParams {
    pub ink_threshold: f64,
    pub dilation_radius: usize,
    pub block: usize,
    /// `None` matches the ink density measured inside the dilated strokes.
    pub target_density: Option<f64>,
    /// Misalignment `(dx, dy)` between shader and page, in pixels.
    pub jitter: (i64, i64),
    pub seed: u64,
}

impl Default for ShaderParams {
    fn default() -> Self {
        Self {
            ink_threshold: 0.5,
            dilation_radius: 2,
            block: 4,
            target_density: None,
            jitter: (0, 0),
            seed: 0,
        }
    }
}

impl ShaderParams {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 {
            return Err(Error::Config("shader block must be at least 1 pixel".into()));
        }
        if let Some(d) = self.target_density {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("target density {d} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Square dilation with the given radius.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        // Separable: rows then columns.
        let mut rows = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if self.bits[y * w + x] {
                    let lo = x.saturating_sub(radius);
                    let hi = (x + radius).min(w - 1);
                    rows[y * w + lo..=y * w + hi].fill(true);
                }
            }
        }
        let mut out = Self::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                if rows[y * w + x] {
                    let lo = y.saturating_sub(radius);
                    let hi = (y + radius).min(h - 1);
                    for yy in lo..=hi {
                        out.bits[yy * w + x] = true;
                    }
                }
            }
        }
        out
    }
}

/// Pixels darker than the ink threshold, dilated by the configured radius.
pub fn content_mask(text: &GrayImage, p: &ShaderParams) -> BinaryMask {
    let raw = BinaryMask {
        width: text.width(),
        height: text.height(),
        bits: text
            .pixels()
            .iter()
            .map(|&v| (v as f64) < p.ink_threshold)
            .collect(),
    };
    raw.dilate(p.dilation_radius)
}

/// Ink fraction of `image` inside and outside `mask`; a side with no pixels
/// reports 0.
pub fn masked_densities(image: &GrayImage, mask: &BinaryMask, threshold: f64) -> Result<(f64, f64)> {
    if image.width() != mask.width || image.height() != mask.height {
        return Err(Error::Shape(format!(
            "mask {}x{} for image {}x{}",
            mask.width,
            mask.height,
            image.width(),
            image.height()
        )));
    }
    let (mut ink_in, mut n_in, mut ink_out, mut n_out) = (0usize, 0usize, 0usize, 0usize);
    for (&v, &m) in image.pixels().iter().zip(&mask.bits) {
        let ink = usize::from((v as f64) < threshold);
        if m {
            ink_in += ink;
            n_in += 1;
        } else {
            ink_out += ink;
            n_out += 1;
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    Ok((frac(ink_in, n_in), frac(ink_out, n_out)))
}

/// Ink density of the strokes inside their own dilated mask, the default
/// shader target.
pub fn stroke_density(text: &GrayImage, p: &ShaderParams) -> f64 {
    let mask = content_mask(text, p);
    masked_densities(text, &mask, p.ink_threshold)
        .expect("mask built from the same image")
        .0
}

/// Shader layer for `mask`: black `block × block` cells on a lattice of
/// pitch `block`, clipped so that no ink lands inside the mask. Cells are
/// visited in a seeded random order and stamped until the stamped area
/// reaches `target × (pixels outside the mask)`. The finished layer is then
/// shifted by `p.jitter`, with white filling the uncovered border.
pub fn generate_shader(mask: &BinaryMask, p: &ShaderParams, target: f64) -> Result<GrayImage> {
    p.validate()?;
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!("target density {target} outside [0, 1]")));
    }
    let (w, h, b) = (mask.width, mask.height, p.block);
    let mut base = GrayImage::white(w, h);
    let outside = w * h - mask.count();
    let goal = (target * outside as f64).round() as usize;

    let (cx, cy) = (w.div_ceil(b), h.div_ceil(b));
    let mut cells: Vec<(usize, usize)> = (0..cy).flat_map(|j| (0..cx).map(move |i| (i, j))).collect();
    SplitMix64::new(p.seed).shuffle(&mut cells);
    let mut stamped = 0usize;
    for (i, j) in cells {
        if stamped >= goal {
            break;
        }
        for y in j * b..((j + 1) * b).min(h) {
            for x in i * b..((i + 1) * b).min(w) {
                if !mask.get(x, y) {
                    base.set(x, y, 0.0);
                    stamped += 1;
                }
            }
        }
    }

    let (dx, dy) = p.jitter;
    if (dx, dy) == (0, 0) {
        return Ok(base);
    }
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
            1.0
        } else {
            base.get(sx as usize, sy as usize)
        }
    }))
}

/// Mask, target density and shader for a clean text image in one step.
pub fn shader_for_text(text: &GrayImage, p: &ShaderParams) -> Result<GrayImage> {
    let mask = content_mask(text, p);
    let target = match p.target_density {
        Some(t) => t,
        None => masked_densities(text, &mask, p.ink_threshold)?.0,
    };
    generate_shader(&mask, p, target)
}

/// Prints the shader with the text (darkest wins) and photographs the
/// result through the envelope like any other sample.
pub fn apply_countermeasure(
    text: &GrayImage,
    pattern: &GrayImage,
    shader: &GrayImage,
    p: &ComposeParams,
    seed: u64,
) -> Result<GrayImage> {
    let printed = text.darkest(shader)?;
    compose_sample(&printed, pattern, p, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagegen::{render_text, synth_pattern, PatternSpec, PatternKind};
    use proptest::prelude::*;

    #[test]
    fn white_image_has_empty_mask() {
        let m = content_mask(&GrayImage::white(20, 10), &ShaderParams::default());
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn single_pixel_dilates_to_square() {
        let mut img = GrayImage::white(9, 9);
        img.set(4, 4, 0.0);
        let p = ShaderParams { dilation_radius: 1, ..Default::default() };
        let m = content_mask(&img, &p);
        assert_eq!(m.count(), 9);
        for y in 3..=5 {
            for x in 3..=5 {
                assert!(m.get(x, y));
            }
        }
        let mut corner = GrayImage::white(9, 9);
        corner.set(0, 0, 0.0);
        assert_eq!(content_mask(&corner, &p).count(), 4);
    }

    #[test]
    fn full_mask_gives_white_shader() {
        let s = generate_shader(&BinaryMask::full(32, 16), &ShaderParams::default(), 0.5).unwrap();
        assert!(s.pixels().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn empty_mask_density() {
        let p = ShaderParams { seed: 3, ..Default::default() };
        let s = generate_shader(&BinaryMask::empty(160, 32), &p, 0.3).unwrap();
        let d = s.ink_fraction(0.5);
        assert!((d - 0.3).abs() / 0.3 < 0.1, "{d}");
    }

    #[test]
    fn jitter_is_a_translation() {
        let mask = BinaryMask::empty(40, 24);
        let p0 = ShaderParams { seed: 9, ..Default::default() };
        let s0 = generate_shader(&mask, &p0, 0.4).unwrap();
        for jitter in [(2, 0), (0, -3), (4, 4), (-1, 2)] {
            let pj = ShaderParams { jitter, ..p0.clone() };
            let sj = generate_shader(&mask, &pj, 0.4).unwrap();
            for y in 0..24i64 {
                for x in 0..40i64 {
                    let (sx, sy) = (x - jitter.0, y - jitter.1);
                    if (0..40).contains(&sx) && (0..24).contains(&sy) {
                        assert_eq!(sj.get(x as usize, y as usize), s0.get(sx as usize, sy as usize));
                    }
                }
            }
        }
    }

    #[test]
    fn shader_avoids_unjittered_mask_and_is_deterministic() {
        let text = render_text("MAIL42", 160, 32).unwrap();
        let p = ShaderParams { seed: 5, ..Default::default() };
        let mask = content_mask(&text, &p);
        let s = shader_for_text(&text, &p).unwrap();
        for (v, m) in s.pixels().iter().zip(mask.bits()) {
            if *m {
                assert_eq!(*v, 1.0);
            }
        }
        assert_eq!(s, shader_for_text(&text, &p).unwrap());
        let q = ShaderParams { seed: 6, ..p };
        assert_ne!(s, shader_for_text(&text, &q).unwrap());
    }

    #[test]
    fn countermeasure_only_darkens() {
        let text = render_text("BOSTON", 160, 32).unwrap();
        let pattern = synth_pattern(&PatternSpec::new(PatternKind::DiagonalHatch, 8, 2, 1.0), 160, 32).unwrap();
        let c = ComposeParams::default();
        let plain = compose_sample(&text, &pattern, &c, 17).unwrap();
        let white = GrayImage::white(160, 32);
        assert_eq!(apply_countermeasure(&text, &pattern, &white, &c, 17).unwrap(), plain);
        let shader = shader_for_text(&text, &ShaderParams::default()).unwrap();
        let shaded = apply_countermeasure(&text, &pattern, &shader, &c, 17).unwrap();
        for (a, b) in shaded.pixels().iter().zip(plain.pixels()) {
            assert!(a <= b);
        }
    }

    fn check_density(word: &str, seed: u64) -> (f64, f64) {
        let text = render_text(word, 160, 32).unwrap();
        let p = ShaderParams { seed, ..Default::default() };
        let mask = content_mask(&text, &p);
        let shader = shader_for_text(&text, &p).unwrap();
        let layer = text.darkest(&shader).unwrap();
        masked_densities(&layer, &mask, p.ink_threshold).unwrap()
    }

    #[test]
    fn density_matches_on_bundled_words() {
        for (i, w) in crate::lexicon::domain_wordlist().iter().enumerate() {
            let (din, dout) = check_density(w, i as u64);
            assert!((din - dout).abs() / din < 0.10, "{w}: in {din} out {dout}");
        }
    }

    proptest! {
        #[test]
        fn mask_covers_raw_ink(word in "[A-Z0-9]{1,6}", r in 0usize..4) {
            let text = render_text(&word, 160, 32).unwrap();
            let p = ShaderParams { dilation_radius: r, ..Default::default() };
            let m = content_mask(&text, &p);
            for (v, b) in text.pixels().iter().zip(m.bits()) {
                if (*v as f64) < p.ink_threshold {
                    prop_assert!(*b);
                }
            }
        }

        #[test]
        fn density_matches_on_random_words(word in "[A-Z0-9]{1,6}", seed in any::<u64>()) {
            let (din, dout) = check_density(&word, seed);
            prop_assert!((din - dout).abs() / din < 0.10, "in {} out {}", din, dout);
        }
    }
}
