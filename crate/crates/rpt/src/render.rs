//! Label-map previews as binary PPM (P6) images.
//!
//! Colors come from a fixed palette file checked into the repository and
//! embedded at build time; a different palette can be supplied at runtime.
//! Ignore pixels render black.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, RptError};
use crate::tensor::{LabelMap, IGNORE_LABEL};

/// Contents of the checked-in default palette.
pub const DEFAULT_PALETTE_TEXT: &str = include_str!("../data/palette.txt");

/// Number of entries the default palette carries.
pub const PALETTE_SIZE: usize = 19;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

impl Palette {
    /// Parses "r g b" lines; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Palette> {
        let mut colors = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(RptError::Format(format!(
                    "palette line {}: expected 3 components, got {}",
                    lineno + 1,
                    parts.len()
                )));
            }
            let mut rgb = [0u8; 3];
            for (i, p) in parts.iter().enumerate() {
                rgb[i] = p.parse::<u8>().map_err(|_| {
                    RptError::Format(format!("palette line {}: bad component {p}", lineno + 1))
                })?;
            }
            colors.push(rgb);
        }
        if colors.is_empty() {
            return Err(RptError::Format("palette has no entries".into()));
        }
        Ok(Palette { colors })
    }

    pub fn default_checked_in() -> Palette {
        let p = Palette::parse(DEFAULT_PALETTE_TEXT).expect("embedded palette must parse");
        assert_eq!(p.colors.len(), PALETTE_SIZE, "embedded palette entry count");
        p
    }
}

/// Renders a label map to raw P6 bytes.
pub fn render_labels(labels: &LabelMap, palette: &Palette) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.data.len() * 3 + 32);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", labels.width, labels.height).as_bytes());
    for &v in &labels.data {
        if v == IGNORE_LABEL {
            out.extend_from_slice(&[0, 0, 0]);
        } else if (v as usize) < palette.colors.len() {
            out.extend_from_slice(&palette.colors[v as usize]);
        } else {
            return Err(RptError::Invalid(format!(
                "label {v} has no palette entry (palette holds {})",
                palette.colors.len()
            )));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, labels: &LabelMap, palette: &Palette) -> Result<()> {
    let bytes = render_labels(labels, palette)?;
    let file = File::create(path).map_err(|e| RptError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| RptError::io(path, e))?;
    w.flush().map_err(|e| RptError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_palette_has_19_entries() {
        let p = Palette::default_checked_in();
        assert_eq!(p.colors.len(), 19);
        assert_eq!(p.colors[0], [128, 64, 128]);
        assert_eq!(p.colors[18], [119, 11, 32]);
    }

    #[test]
    fn ppm_bytes_are_exactly_header_plus_pixels() {
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, IGNORE_LABEL]).unwrap();
        let p = Palette::default_checked_in();
        let bytes = render_labels(&labels, &p).unwrap();
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 6 * 3);
        // Ignore pixel renders black.
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 0, 0]);
        // First pixel takes palette entry 0.
        assert_eq!(&bytes[header.len()..header.len() + 3], &[128, 64, 128]);
    }

    #[test]
    fn out_of_palette_label_is_rejected() {
        let labels = LabelMap::new(1, 1, vec![19]).unwrap();
        let p = Palette::default_checked_in();
        assert!(render_labels(&labels, &p).is_err());
    }

    #[test]
    fn palette_parser_rejects_garbage() {
        assert!(Palette::parse("1 2\n").is_err());
        assert!(Palette::parse("256 0 0\n").is_err());
        assert!(Palette::parse("# only comments\n").is_err());
        let p = Palette::parse("# c\n1 2 3\n\n4 5 6 # inline\n").unwrap();
        assert_eq!(p.colors, vec![[1, 2, 3], [4, 5, 6]]);
    }
}
