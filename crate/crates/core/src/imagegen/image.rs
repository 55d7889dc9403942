use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::shape_err;
use crate::{Error, Result};

/// Luminance raster in `[0, 1]`, row-major. `0` is full ink, `1` is white
/// paper.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(shape_err!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            ));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn white(width: usize, height: usize) -> Self {
        Self::filled(width, height, 1.0)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn same_dims(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_dims(&self, other: &GrayImage) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(shape_err!(
                "image {}x{} vs {}x{}",
                self.width,
                self.height,
                other.width,
                other.height
            ))
        }
    }

    /// Pointwise minimum: the darker ink wins.
    pub fn darkest(&self, other: &GrayImage) -> Result<GrayImage> {
        self.check_dims(other)?;
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| a.min(*b))
            .collect();
        Ok(GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        })
    }

    /// Pixels quantised to 8 bits, exactly as they are written to PGM.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p as f64 * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height {
            return Err(shape_err!("{} bytes for {width}x{height}", bytes.len()));
        }
        let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn decode_pgm(data: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(data);
        let mut tokens = Vec::with_capacity(4);
        while tokens.len() < 4 {
            let mut line = String::new();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::Format(e.to_string()))?;
            if n == 0 {
                return Err(Error::Format("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_owned));
        }
        if tokens.len() != 4 {
            return Err(Error::Format("PGM header tokens split across data".into()));
        }
        if tokens[0] != "P5" {
            return Err(Error::Format(format!("bad magic {:?}", tokens[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported maxval {maxval}")));
        }
        let mut bytes = Vec::with_capacity(width * height);
        reader
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Format(e.to_string()))?;
        if bytes.len() != width * height {
            return Err(Error::Format(format!(
                "expected {} pixel bytes, found {}",
                width * height,
                bytes.len()
            )));
        }
        Self::from_bytes(width, height, &bytes)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::storage(path, e))?;
        f.write_all(&self.encode_pgm())
            .map_err(|e| Error::storage(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::storage(path, e))?;
        Self::decode_pgm(&data)
    }

    /// Fraction of pixels darker than `threshold`.
    pub fn ink_fraction(&self, threshold: f32) -> f64 {
        let ink = self.pixels.iter().filter(|&&p| p < threshold).count();
        ink as f64 / self.pixels.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(GrayImage::new(1, 1, vec![1.5]).is_err());
        assert!(GrayImage::new(2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn pgm_header_layout() {
        let img = GrayImage::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(img.encode_pgm(), b"P5\n2 1\n255\n\x00\xff".to_vec());
    }

    #[test]
    fn pgm_with_comment() {
        let data = b"P5\n# made by hand\n2 1\n255\n\x10\x20";
        let img = GrayImage::decode_pgm(data).unwrap();
        assert_eq!(img.to_bytes(), vec![0x10, 0x20]);
    }

    #[test]
    fn truncated_pgm_is_an_error() {
        assert!(matches!(
            GrayImage::decode_pgm(b"P5\n4 4\n255\n\x00"),
            Err(Error::Format(_))
        ));
        assert!(GrayImage::decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    proptest! {
        #[test]
        fn pgm_round_trip_is_exact_after_quantisation(
            w in 1usize..12, h in 1usize..12, seed in any::<u64>()
        ) {
            let mut rng = crate::SplitMix64::new(seed);
            let img = GrayImage::from_fn(w, h, |_, _| rng.next_f64() as f32);
            let back = GrayImage::decode_pgm(&img.encode_pgm()).unwrap();
            prop_assert_eq!(back.to_bytes(), img.to_bytes());
            let again = GrayImage::decode_pgm(&back.encode_pgm()).unwrap();
            prop_assert_eq!(again, back);
        }
    }
}
