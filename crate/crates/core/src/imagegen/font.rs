//! Embedded 5×7 bitmap font and the word renderer.

use super::GrayImage;
use crate::{Alphabet, Error, Result};

pub const GLYPH_WIDTH: usize = 5;
pub const GLYPH_HEIGHT: usize = 7;
/// Glyph width plus the one-column gap, in font cells.
pub const GLYPH_ADVANCE: usize = GLYPH_WIDTH + 1;

/// Rows top to bottom; bit 4 is the leftmost column.
#[rustfmt::skip]
const GLYPHS: [[u8; GLYPH_HEIGHT]; 36] = [
    [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11], // A
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E], // B
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E], // C
    [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C], // D
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F], // E
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10], // F
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F], // G
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11], // H
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E], // I
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C], // J
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11], // K
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F], // L
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11], // M
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11], // N
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // O
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10], // P
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D], // Q
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11], // R
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E], // S
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04], // T
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E], // U
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04], // V
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A], // W
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11], // X
    [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04], // Y
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F], // Z
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E], // 0
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E], // 1
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F], // 2
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E], // 3
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02], // 4
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E], // 5
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E], // 6
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08], // 7
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E], // 8
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C], // 9
];

/// Whether font cell (`col`, `row`) of the glyph at alphabet index `glyph`
/// is inked.
#[inline]
pub fn glyph_cell(glyph: usize, col: usize, row: usize) -> bool {
    col < GLYPH_WIDTH && row < GLYPH_HEIGHT && GLYPHS[glyph][row] & (0x10 >> col) != 0
}

pub fn glyph_count() -> usize {
    GLYPHS.len()
}

/// Integer glyph scale for a canvas height.
pub fn scale_for_height(canvas_h: usize) -> usize {
    canvas_h / GLYPH_HEIGHT
}

/// Largest label length that fits a canvas.
pub fn capacity(canvas_w: usize, canvas_h: usize) -> usize {
    let scale = scale_for_height(canvas_h);
    if scale == 0 {
        return 0;
    }
    let margin = (canvas_h - GLYPH_HEIGHT * scale) / 2;
    // n glyphs occupy n·advance·scale − gap·scale columns after the margin.
    (canvas_w.saturating_sub(margin) + scale) / (GLYPH_ADVANCE * scale)
}

/// Draws `label` left-aligned and vertically centred on a white canvas.
///
/// The glyph scale is `canvas_h / 7`; the left margin equals the top margin.
pub fn render_text(label: &str, canvas_w: usize, canvas_h: usize) -> Result<GrayImage> {
    let alphabet = Alphabet;
    let glyphs = label
        .chars()
        .map(|c| alphabet.index_of(c))
        .collect::<Result<Vec<_>>>()?;
    let mut img = GrayImage::white(canvas_w, canvas_h);
    if glyphs.is_empty() {
        return Ok(img);
    }
    if glyphs.len() > capacity(canvas_w, canvas_h) {
        return Err(Error::Capacity {
            len: glyphs.len(),
            width: canvas_w,
            height: canvas_h,
        });
    }
    let scale = scale_for_height(canvas_h);
    let margin = (canvas_h - GLYPH_HEIGHT * scale) / 2;
    for (i, &g) in glyphs.iter().enumerate() {
        let x0 = margin + i * GLYPH_ADVANCE * scale;
        for row in 0..GLYPH_HEIGHT {
            for col in 0..GLYPH_WIDTH {
                if !glyph_cell(g, col, row) {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.set(x0 + col * scale + dx, margin + row * scale + dy, 0.0);
                    }
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ink_cells(glyph: usize) -> usize {
        (0..GLYPH_HEIGHT)
            .map(|r| (0..GLYPH_WIDTH).filter(|&c| glyph_cell(glyph, c, r)).count())
            .sum()
    }

    fn ink_bbox(img: &GrayImage) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..img.height() {
            for x in 0..img.width() {
                if img.get(x, y) < 0.5 {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bb
    }

    #[test]
    fn glyphs_are_distinct() {
        for a in 0..glyph_count() {
            for b in a + 1..glyph_count() {
                assert_ne!(GLYPHS[a], GLYPHS[b], "glyphs {a} and {b} collide");
            }
        }
    }

    #[test]
    fn empty_label_is_blank() {
        let img = render_text("", 160, 32).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn single_glyph_ink_count() {
        // Raw "A" table: 3+2+2+2+5+2+2 cells.
        assert_eq!(ink_cells(0), 18);
        let img = render_text("A", 160, 32).unwrap();
        let ink = img.pixels().iter().filter(|&&p| p == 0.0).count();
        assert_eq!(ink, 18 * 4 * 4);
    }

    #[test]
    fn two_glyph_bbox_width() {
        let img = render_text("AB", 160, 32).unwrap();
        let (x0, y0, x1, y1) = ink_bbox(&img).unwrap();
        // 2 glyphs × 6 cells × scale 4 − one trailing gap of 4 px.
        assert_eq!(x1 - x0 + 1, 2 * GLYPH_ADVANCE * 4 - 4);
        assert_eq!(y1 - y0 + 1, 28);
        assert_eq!((x0, y0), (2, 2));
    }

    #[test]
    fn capacity_of_default_canvas() {
        assert_eq!(capacity(160, 32), 6);
        assert!(render_text("ABCDEF", 160, 32).is_ok());
        assert!(matches!(
            render_text("ABCDEFG", 160, 32),
            Err(Error::Capacity { len: 7, .. })
        ));
    }

    #[test]
    fn alphabet_error() {
        assert!(matches!(render_text("a", 160, 32), Err(Error::Alphabet('a'))));
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            render_text("Q7", 160, 32).unwrap(),
            render_text("Q7", 160, 32).unwrap()
        );
    }
}
