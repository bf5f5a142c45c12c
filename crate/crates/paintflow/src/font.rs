//! Fixed-cell bitmap font used to paint text onto canvases.
//!
//! The default font is a 5x7 monospaced binary bitmap covering a-z, 0-9,
//! space, hyphen and period, embedded as data so canvases are bit-identical
//! across platforms. Fonts can also be loaded from a plain-text table with
//! one line per glyph: `<char> <cell_w*cell_h bits as 0/1 string>` (row-major).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphFont {
    cell_w: usize,
    cell_h: usize,
    h_spacing: usize,
    v_spacing: usize,
    charset: Vec<char>,
    bitmaps: BTreeMap<char, Vec<u8>>,
}

impl GlyphFont {
    pub fn new(
        cell_w: usize,
        cell_h: usize,
        h_spacing: usize,
        v_spacing: usize,
        glyphs: Vec<(char, Vec<u8>)>,
    ) -> Result<Self> {
        if cell_w == 0 || cell_h == 0 {
            return Err(Error::Config("font cell dimensions must be positive".into()));
        }
        let mut charset = Vec::with_capacity(glyphs.len());
        let mut bitmaps = BTreeMap::new();
        for (ch, bits) in glyphs {
            if bits.len() != cell_w * cell_h {
                return Err(Error::Config(format!(
                    "glyph {ch:?} has {} bits, expected {}",
                    bits.len(),
                    cell_w * cell_h
                )));
            }
            if bits.iter().any(|&b| b > 1) {
                return Err(Error::Config(format!("glyph {ch:?} has non-binary bits")));
            }
            if bitmaps.insert(ch, bits).is_some() {
                return Err(Error::Config(format!("duplicate glyph {ch:?}")));
            }
            charset.push(ch);
        }
        for required in ('a'..='z').chain('0'..='9').chain([' ']) {
            if !bitmaps.contains_key(&required) {
                return Err(Error::Config(format!("charset is missing required {required:?}")));
            }
        }
        Ok(GlyphFont { cell_w, cell_h, h_spacing, v_spacing, charset, bitmaps })
    }

    /// The embedded 5x7 font with 1px spacing in both axes.
    pub fn embedded() -> GlyphFont {
        let glyphs = EMBEDDED_GLYPHS
            .iter()
            .map(|&(ch, rows)| {
                let bits = rows
                    .iter()
                    .flat_map(|row| row.bytes().map(|b| (b == b'#') as u8))
                    .collect::<Vec<u8>>();
                (ch, bits)
            })
            .collect();
        GlyphFont::new(5, 7, 1, 1, glyphs).expect("embedded font is well-formed")
    }

    pub fn cell_w(&self) -> usize {
        self.cell_w
    }

    pub fn cell_h(&self) -> usize {
        self.cell_h
    }

    pub fn h_spacing(&self) -> usize {
        self.h_spacing
    }

    pub fn v_spacing(&self) -> usize {
        self.v_spacing
    }

    pub fn charset(&self) -> &[char] {
        &self.charset
    }

    pub fn supports(&self, ch: char) -> bool {
        self.bitmaps.contains_key(&ch)
    }

    /// Row-major 0/1 bitmap for a supported character.
    pub fn bitmap(&self, ch: char) -> Option<&[u8]> {
        self.bitmaps.get(&ch).map(|v| v.as_slice())
    }

    /// Serialize to the glyph-table text format. A leading `#` comment line
    /// records cell size and spacing so the file is self-describing.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# cell {}x{} spacing {} {}",
            self.cell_w, self.cell_h, self.h_spacing, self.v_spacing
        );
        for &ch in &self.charset {
            let bits: String = self.bitmaps[&ch].iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
            let _ = writeln!(out, "{ch} {bits}");
        }
        out
    }

    /// Parse the glyph-table format. Dimensions come from the header comment
    /// when present, otherwise from the `dims` fallback.
    pub fn parse_table(text: &str, dims: Option<(usize, usize, usize, usize)>) -> Result<GlyphFont> {
        let mut cell = dims;
        let mut glyphs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(parsed) = parse_header(rest) {
                    cell = Some(parsed);
                }
                continue;
            }
            let mut chars = line.chars();
            let ch = chars
                .next()
                .ok_or_else(|| Error::CorruptData(format!("font line {}: empty", lineno + 1)))?;
            match chars.next() {
                Some(' ') => {}
                _ => {
                    return Err(Error::CorruptData(format!(
                        "font line {}: expected `<char> <bits>`",
                        lineno + 1
                    )))
                }
            }
            let bits_str: String = chars.collect();
            let bits: Vec<u8> = bits_str
                .trim_end()
                .bytes()
                .map(|b| match b {
                    b'0' => Ok(0),
                    b'1' => Ok(1),
                    other => Err(Error::CorruptData(format!(
                        "font line {}: invalid bit {:?}",
                        lineno + 1,
                        other as char
                    ))),
                })
                .collect::<Result<_>>()?;
            glyphs.push((ch, bits));
        }
        let (cw, ch_, hs, vs) = cell.ok_or_else(|| {
            Error::CorruptData("font table has no header and no dimensions were supplied".into())
        })?;
        GlyphFont::new(cw, ch_, hs, vs, glyphs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_table()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GlyphFont> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_table(&text, None)
    }
}

fn parse_header(rest: &str) -> Option<(usize, usize, usize, usize)> {
    // "# cell 5x7 spacing 1 1"
    let tokens: Vec<&str> = rest.split_whitespace().collect();
    if tokens.len() == 5 && tokens[0] == "cell" && tokens[2] == "spacing" {
        let (w, h) = tokens[1].split_once('x')?;
        Some((
            w.parse().ok()?,
            h.parse().ok()?,
            tokens[3].parse().ok()?,
            tokens[4].parse().ok()?,
        ))
    } else {
        None
    }
}

type GlyphRows = [&'static str; 7];

const EMBEDDED_GLYPHS: &[(char, GlyphRows)] = &[
    (' ', [".....", ".....", ".....", ".....", ".....", ".....", "....."]),
    ('a', [".....", ".....", ".###.", "....#", ".####", "#...#", ".####"]),
    ('b', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "####."]),
    ('c', [".....", ".....", ".####", "#....", "#....", "#....", ".####"]),
    ('d', ["....#", "....#", ".####", "#...#", "#...#", "#...#", ".####"]),
    ('e', [".....", ".....", ".###.", "#...#", "#####", "#....", ".###."]),
    ('f', ["..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."]),
    ('g', [".....", ".####", "#...#", "#...#", ".####", "....#", ".###."]),
    ('h', ["#....", "#....", "####.", "#...#", "#...#", "#...#", "#...#"]),
    ('i', ["..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."]),
    ('j', ["...#.", ".....", "..##.", "...#.", "...#.", "#..#.", ".##.."]),
    ('k', ["#....", "#....", "#..#.", "#.#..", "##...", "#.#..", "#..#."]),
    ('l', [".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('m', [".....", ".....", "##.#.", "#.#.#", "#.#.#", "#.#.#", "#.#.#"]),
    ('n', [".....", ".....", "####.", "#...#", "#...#", "#...#", "#...#"]),
    ('o', [".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."]),
    ('p', [".....", "####.", "#...#", "#...#", "####.", "#....", "#...."]),
    ('q', [".....", ".####", "#...#", "#...#", ".####", "....#", "....#"]),
    ('r', [".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."]),
    ('s', [".....", ".....", ".####", "#....", ".###.", "....#", "####."]),
    ('t', [".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."]),
    ('u', [".....", ".....", "#...#", "#...#", "#...#", "#...#", ".####"]),
    ('v', [".....", ".....", "#...#", "#...#", "#...#", ".#.#.", "..#.."]),
    ('w', [".....", ".....", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."]),
    ('x', [".....", ".....", "#...#", ".#.#.", "..#..", ".#.#.", "#...#"]),
    ('y', [".....", "#...#", "#...#", ".####", "....#", "#...#", ".###."]),
    ('z', [".....", ".....", "#####", "...#.", "..#..", ".#...", "#####"]),
    ('0', [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."]),
    ('1', ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('6', ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
    ('-', [".....", ".....", ".....", ".###.", ".....", ".....", "....."]),
    ('.', [".....", ".....", ".....", ".....", ".....", ".##..", ".##.."]),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_font_has_distinct_glyphs() {
        let font = GlyphFont::embedded();
        assert_eq!(font.charset().len(), 39);
        let charset = font.charset().to_vec();
        for (i, &a) in charset.iter().enumerate() {
            for &b in charset.iter().skip(i + 1) {
                assert_ne!(font.bitmap(a), font.bitmap(b), "glyphs {a:?} and {b:?} collide");
            }
        }
    }

    #[test]
    fn embedded_covers_required_charset() {
        let font = GlyphFont::embedded();
        for ch in ('a'..='z').chain('0'..='9').chain([' ', '-', '.']) {
            assert!(font.supports(ch), "missing {ch:?}");
        }
        assert_eq!(font.cell_w(), 5);
        assert_eq!(font.cell_h(), 7);
    }

    #[test]
    fn table_round_trip() {
        let font = GlyphFont::embedded();
        let text = font.to_table();
        let back = GlyphFont::parse_table(&text, None).unwrap();
        assert_eq!(font, back);
    }

    #[test]
    fn space_glyph_line_parses() {
        // The space glyph's table line starts with a literal space.
        let text = GlyphFont::embedded().to_table();
        let line = text.lines().find(|l| l.starts_with("  0")).unwrap();
        assert_eq!(line.len(), 2 + 35);
    }

    #[test]
    fn rejects_missing_required_char() {
        let glyphs = vec![('a', vec![0u8; 35])];
        assert!(GlyphFont::new(5, 7, 1, 1, glyphs).is_err());
    }
}
