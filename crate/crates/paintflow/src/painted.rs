//! Painted text: rendering strings onto raster canvases and reading them back.
//!
//! Text is stamped into a fixed glyph grid, left to right, top to bottom.
//! Line breaks prefer word boundaries: when the word after a space does not
//! fit on the current line but would fit on a fresh one, the space becomes a
//! line break (consuming exactly one source character). Words longer than a
//! line break mid-word. Decoding template-matches each grid cell against the
//! font and inverts the layout by collapsing a background run that ends at a
//! row boundary (with more text after it) back into the single space that
//! produced it.

use crate::error::{Error, Result};
use crate::font::GlyphFont;
use crate::image::PixelImage;

#[derive(Debug, Clone, PartialEq)]
pub struct CanvasSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub margin: usize,
    pub background_value: f32,
    pub foreground_value: f32,
}

impl CanvasSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(Error::Config("canvas dimensions must be positive".into()));
        }
        if self.background_value == self.foreground_value {
            return Err(Error::Config("background and foreground values must differ".into()));
        }
        Ok(())
    }
}

impl Default for CanvasSpec {
    fn default() -> Self {
        CanvasSpec {
            width: 64,
            height: 64,
            channels: 3,
            margin: 2,
            background_value: -1.0,
            foreground_value: 1.0,
        }
    }
}

/// One stamped cell: which character landed on which grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphBox {
    pub ch: char,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaintedText {
    pub image: PixelImage,
    pub source_text: String,
    pub truncated: bool,
    pub glyph_boxes: Vec<GlyphBox>,
}

/// Glyph grid capacity of a canvas: (columns, rows).
pub fn capacity(spec: &CanvasSpec, font: &GlyphFont) -> Result<(usize, usize)> {
    spec.validate()?;
    let avail_w = spec.width.saturating_sub(2 * spec.margin);
    let avail_h = spec.height.saturating_sub(2 * spec.margin);
    let cols = avail_w / (font.cell_w() + font.h_spacing());
    let rows = avail_h / (font.cell_h() + font.v_spacing());
    if cols == 0 || rows == 0 {
        return Err(Error::ZeroCapacity(format!(
            "{}x{} canvas with margin {} cannot fit a {}x{} glyph cell",
            spec.width,
            spec.height,
            spec.margin,
            font.cell_w(),
            font.cell_h()
        )));
    }
    Ok((cols, rows))
}

/// Render a string to a canvas. Every character must be in the font's charset.
pub fn rasterize(text: &str, spec: &CanvasSpec, font: &GlyphFont) -> Result<PaintedText> {
    let (cols, rows) = capacity(spec, font)?;
    let chars: Vec<char> = text.chars().collect();
    for (index, &ch) in chars.iter().enumerate() {
        if !font.supports(ch) {
            return Err(Error::UnsupportedChar { ch, index });
        }
    }

    let mut image = PixelImage::filled(spec.height, spec.width, spec.channels, spec.background_value);
    let mut glyph_boxes = Vec::new();
    let mut row = 0usize;
    let mut col = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        if row >= rows {
            break;
        }
        let ch = chars[i];
        if ch == ' ' && col > 0 {
            let word_len = word_len_at(&chars, i + 1);
            let remaining_after_space = cols - col - 1;
            if word_len > 0 && word_len > remaining_after_space && word_len <= cols {
                // Break the line here instead of stamping this space.
                row += 1;
                col = 0;
                i += 1;
                continue;
            }
        }
        stamp(&mut image, spec, font, ch, row, col);
        glyph_boxes.push(GlyphBox { ch, row, col });
        col += 1;
        if col == cols {
            col = 0;
            row += 1;
        }
        i += 1;
    }

    Ok(PaintedText {
        image,
        source_text: text.to_string(),
        truncated: i < chars.len(),
        glyph_boxes,
    })
}

fn word_len_at(chars: &[char], start: usize) -> usize {
    chars[start..].iter().take_while(|&&c| c != ' ').count()
}

fn stamp(image: &mut PixelImage, spec: &CanvasSpec, font: &GlyphFont, ch: char, row: usize, col: usize) {
    let bits = font.bitmap(ch).expect("charset checked before stamping");
    let y0 = spec.margin + row * (font.cell_h() + font.v_spacing());
    let x0 = spec.margin + col * (font.cell_w() + font.h_spacing());
    for gy in 0..font.cell_h() {
        for gx in 0..font.cell_w() {
            if bits[gy * font.cell_w() + gx] == 1 {
                image.set_all_channels(y0 + gy, x0 + gx, spec.foreground_value);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedText {
    pub text: String,
    /// Per returned character: margin between the best and second-best
    /// template distance of its cell (mean over the run for a collapsed space).
    pub per_char_confidence: Vec<f32>,
}

/// Read a canvas back into a string by template-matching every grid cell.
pub fn decode(image: &PixelImage, spec: &CanvasSpec, font: &GlyphFont) -> Result<DecodedText> {
    if image.height() != spec.height || image.width() != spec.width || image.channels() != spec.channels {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}x{}", spec.height, spec.width, spec.channels),
            actual: format!("{}x{}x{}", image.height(), image.width(), image.channels()),
        });
    }
    let (cols, rows) = capacity(spec, font)?;

    let mut cells: Vec<(char, f32)> = Vec::with_capacity(cols * rows);
    for row in 0..rows {
        for col in 0..cols {
            cells.push(match_cell(image, spec, font, row, col));
        }
    }

    // Strip trailing background cells.
    let last_glyph = match cells.iter().rposition(|&(ch, _)| ch != ' ') {
        Some(idx) => idx,
        None => return Ok(DecodedText { text: String::new(), per_char_confidence: Vec::new() }),
    };

    // Collapse every space run that ends exactly at a row boundary (and is
    // followed by more text) into the single space the line break consumed.
    let mut text = String::new();
    let mut confidence = Vec::new();
    let mut i = 0usize;
    while i <= last_glyph {
        let (ch, margin) = cells[i];
        if ch != ' ' {
            text.push(ch);
            confidence.push(margin);
            i += 1;
            continue;
        }
        let run_start = i;
        while i <= last_glyph && cells[i].0 == ' ' {
            i += 1;
        }
        let run_end = i - 1; // inclusive; i now points at a glyph (run cannot be trailing)
        let run_margins = &cells[run_start..=run_end];
        let mean_margin = run_margins.iter().map(|&(_, m)| m).sum::<f32>() / run_margins.len() as f32;
        if (run_end + 1).is_multiple_of(cols) {
            text.push(' ');
            confidence.push(mean_margin);
        } else {
            for &(_, m) in run_margins {
                text.push(' ');
                confidence.push(m);
            }
        }
    }

    Ok(DecodedText { text, per_char_confidence: confidence })
}

/// Best-matching character for one cell plus the best/second-best margin.
/// Ties resolve to the earliest charset entry.
fn match_cell(image: &PixelImage, spec: &CanvasSpec, font: &GlyphFont, row: usize, col: usize) -> (char, f32) {
    let y0 = spec.margin + row * (font.cell_h() + font.v_spacing());
    let x0 = spec.margin + col * (font.cell_w() + font.h_spacing());
    let n = (font.cell_w() * font.cell_h() * spec.channels) as f32;

    let mut best_char = ' ';
    let mut best = f32::INFINITY;
    let mut second = f32::INFINITY;
    for &ch in font.charset() {
        let bits = font.bitmap(ch).expect("charset entries always have bitmaps");
        let mut acc = 0.0f32;
        for gy in 0..font.cell_h() {
            for gx in 0..font.cell_w() {
                let template = if bits[gy * font.cell_w() + gx] == 1 {
                    spec.foreground_value
                } else {
                    spec.background_value
                };
                for c in 0..spec.channels {
                    let d = image.get(y0 + gy, x0 + gx, c) - template;
                    acc += d * d;
                }
            }
        }
        let dist = acc / n;
        if dist < best {
            second = best;
            best = dist;
            best_char = ch;
        } else if dist < second {
            second = dist;
        }
    }
    let margin = if second.is_finite() { second - best } else { f32::INFINITY };
    (best_char, margin)
}

/// Character error rate of a predicted canvas against reference text:
/// Levenshtein(decode(predicted), reference) / max(1, len(reference)),
/// clamped into [0, 1].
pub fn glyph_error_rate(
    predicted: &PixelImage,
    reference_text: &str,
    spec: &CanvasSpec,
    font: &GlyphFont,
) -> Result<f32> {
    let decoded = decode(predicted, spec, font)?;
    let dist = levenshtein(&decoded.text, reference_text);
    let denom = reference_text.chars().count().max(1);
    Ok((dist as f32 / denom as f32).min(1.0))
}

/// Classic O(nm) edit distance over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (CanvasSpec, GlyphFont) {
        (CanvasSpec::default(), GlyphFont::embedded())
    }

    #[test]
    fn capacity_matches_formula_on_default_canvas() {
        let (spec, font) = setup();
        // (64 - 4) / (5 + 1) = 10, (64 - 4) / (7 + 1) = 7
        assert_eq!(capacity(&spec, &font).unwrap(), (10, 7));
    }

    #[test]
    fn capacity_matches_formula_on_large_canvas() {
        let (_, font) = setup();
        let spec = CanvasSpec { width: 512, height: 512, margin: 8, ..CanvasSpec::default() };
        // (512 - 16) / 6 = 82, (512 - 16) / 8 = 62
        assert_eq!(capacity(&spec, &font).unwrap(), (82, 62));
    }

    #[test]
    fn capacity_zero_is_an_error() {
        let (_, font) = setup();
        let spec = CanvasSpec { width: 8, height: 8, margin: 4, ..CanvasSpec::default() };
        let err = capacity(&spec, &font).unwrap_err();
        assert_eq!(err.class(), "zero-capacity");
    }

    #[test]
    fn empty_string_rasterizes_to_background() {
        let (spec, font) = setup();
        let painted = rasterize("", &spec, &font).unwrap();
        assert!(!painted.truncated);
        assert!(painted.glyph_boxes.is_empty());
        assert!(painted.image.data().iter().all(|&v| v == spec.background_value));
        assert_eq!(decode(&painted.image, &spec, &font).unwrap().text, "");
    }

    #[test]
    fn round_trip_simple_caption() {
        let (spec, font) = setup();
        let painted = rasterize("red circle", &spec, &font).unwrap();
        assert!(!painted.truncated);
        let decoded = decode(&painted.image, &spec, &font).unwrap();
        assert_eq!(decoded.text, "red circle");
        assert!(decoded.per_char_confidence.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn round_trip_with_word_wrap() {
        let (spec, font) = setup();
        for s in [
            "small yellow triangle bottom",
            "large red circle center",
            "a bb ccc dddd eeeee ffffff",
            "ab c",
            "abcdefghij klmnop",
            "abcdefghijklmnopqrstuvwxyz 0123456789",
            "one two three four five six",
        ] {
            let painted = rasterize(s, &spec, &font).unwrap();
            assert!(!painted.truncated, "{s:?} should fit");
            assert_eq!(decode(&painted.image, &spec, &font).unwrap().text, s, "round trip of {s:?}");
        }
    }

    #[test]
    fn unsupported_char_reports_char_and_index() {
        let (spec, font) = setup();
        match rasterize("ab?cd", &spec, &font) {
            Err(Error::UnsupportedChar { ch, index }) => {
                assert_eq!(ch, '?');
                assert_eq!(index, 2);
            }
            other => panic!("expected UnsupportedChar, got {other:?}"),
        }
    }

    #[test]
    fn truncation_drops_overflow_and_sets_flag() {
        let (spec, font) = setup();
        // Capacity is 70; a 100-char single word fills all 70 cells.
        let long: String = std::iter::repeat_n('x', 100).collect();
        let painted = rasterize(&long, &spec, &font).unwrap();
        assert!(painted.truncated);
        assert_eq!(painted.glyph_boxes.len(), 70);
    }

    #[test]
    fn in_capacity_string_is_not_truncated() {
        let (spec, font) = setup();
        let s: String = std::iter::repeat_n('y', 70).collect();
        let painted = rasterize(&s, &spec, &font).unwrap();
        assert!(!painted.truncated);
        assert_eq!(decode(&painted.image, &spec, &font).unwrap().text, s);
    }

    #[test]
    fn decode_rejects_wrong_dimensions() {
        let (spec, font) = setup();
        let img = PixelImage::filled(32, 64, 3, spec.background_value);
        assert!(decode(&img, &spec, &font).is_err());
    }

    #[test]
    fn decode_survives_flipped_pixels_with_reduced_confidence() {
        let (spec, font) = setup();
        let painted = rasterize("cat", &spec, &font).unwrap();
        let clean = decode(&painted.image, &spec, &font).unwrap();

        // Flip 10% of the foreground pixels of the stamped area to background.
        let mut noisy = painted.image.clone();
        let fg_positions: Vec<usize> = noisy
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == spec.foreground_value)
            .map(|(i, _)| i)
            .collect();
        let n_flip = fg_positions.len() / 10;
        for &pos in fg_positions.iter().step_by(10).take(n_flip) {
            noisy.data_mut()[pos] = spec.background_value;
        }
        let noisy_decoded = decode(&noisy, &spec, &font).unwrap();
        assert_eq!(noisy_decoded.text, "cat");
        let clean_mean: f32 = clean.per_char_confidence.iter().sum::<f32>() / 3.0;
        let noisy_mean: f32 = noisy_decoded.per_char_confidence.iter().sum::<f32>() / 3.0;
        assert!(noisy_mean < clean_mean, "noise must reduce confidence");
    }

    #[test]
    fn locality_single_char_substitution_touches_one_cell() {
        let (spec, font) = setup();
        let a = rasterize("red circle", &spec, &font).unwrap();
        let b = rasterize("red circls", &spec, &font).unwrap();
        // Same word lengths, so no reflow: diff confined to one glyph cell.
        let boxes_a = &a.glyph_boxes;
        let boxes_b = &b.glyph_boxes;
        assert_eq!(boxes_a.len(), boxes_b.len());
        let changed: Vec<usize> = (0..boxes_a.len()).filter(|&i| boxes_a[i] != boxes_b[i]).collect();
        assert_eq!(changed.len(), 1);
        let cell = boxes_a[changed[0]];
        let y0 = spec.margin + cell.row * (font.cell_h() + font.v_spacing());
        let x0 = spec.margin + cell.col * (font.cell_w() + font.h_spacing());
        for y in 0..spec.height {
            for x in 0..spec.width {
                let inside = y >= y0 && y < y0 + font.cell_h() && x >= x0 && x < x0 + font.cell_w();
                if !inside {
                    for c in 0..spec.channels {
                        assert_eq!(a.image.get(y, x, c), b.image.get(y, x, c), "pixel ({y},{x}) changed outside the cell");
                    }
                }
            }
        }
    }

    #[test]
    fn truncation_monotonicity_without_reflow() {
        let (spec, font) = setup();
        let a = rasterize("red circle", &spec, &font).unwrap();
        let b = rasterize("red circle top", &spec, &font).unwrap();
        assert_eq!(&b.glyph_boxes[..a.glyph_boxes.len()], &a.glyph_boxes[..]);
    }

    #[test]
    fn glyph_error_rate_examples() {
        let (spec, font) = setup();
        let reference = "red circle";
        let exact = rasterize(reference, &spec, &font).unwrap();
        assert_eq!(glyph_error_rate(&exact.image, reference, &spec, &font).unwrap(), 0.0);

        let blank = PixelImage::filled(spec.height, spec.width, spec.channels, spec.background_value);
        assert_eq!(glyph_error_rate(&blank, "abcd", &spec, &font).unwrap(), 1.0);

        let typo = rasterize("red circls", &spec, &font).unwrap();
        let rate = glyph_error_rate(&typo.image, reference, &spec, &font).unwrap();
        assert!((rate - 0.1).abs() < 1e-6, "one substitution over ten chars, got {rate}");
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("", ""), 0);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("red circle", "red circls"), 1);
    }

    #[test]
    fn rasterize_is_deterministic() {
        let (spec, font) = setup();
        let a = rasterize("blue square top", &spec, &font).unwrap();
        let b = rasterize("blue square top", &spec, &font).unwrap();
        assert_eq!(a, b);
    }
}
