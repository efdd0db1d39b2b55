//! Slide preprocessing: Otsu tissue segmentation and a non-overlapping
//! patch grid over plain raster images.

use std::path::Path;

use num_bigint::BigInt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TilingError {
    #[error("degenerate histogram: fewer than two occupied gray levels")]
    Degenerate,
    #[error("histogram must have 256 bins, got {0}")]
    HistogramSize(usize),
    #[error("image error: {0}")]
    Image(String),
    #[error("invalid tiling configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, TilingError> {
        if pixels.len() != width * height {
            return Err(TilingError::Image(format!("{} pixels for {width}x{height}", pixels.len())));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let pixels = (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        GrayImage { width, height, pixels }
    }

    /// Decodes PNG or PNM and converts to luma.
    pub fn open(path: &Path) -> Result<Self, TilingError> {
        let img = image::open(path).map_err(|e| TilingError::Image(format!("{}: {e}", path.display())))?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        Ok(GrayImage { width: w as usize, height: h as usize, pixels: luma.into_raw() })
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &p in &self.pixels {
            h[p as usize] += 1;
        }
        h
    }
}

/// Level t maximizing the between-class variance of `{<= t}` vs `{> t}`,
/// lowest t on ties. Comparisons are exact: with `N0` pixels and gray-level
/// sum `S0` at or below t, the variance is proportional to
/// `(N S0 - N0 S)^2 / (N0 N1)`, compared by cross-multiplication in big
/// integers.
pub fn otsu_threshold(hist: &[u64]) -> Result<u8, TilingError> {
    if hist.len() != 256 {
        return Err(TilingError::HistogramSize(hist.len()));
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(TilingError::Degenerate);
    }
    let n: u128 = hist.iter().map(|&c| c as u128).sum();
    let s: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (n_big, s_big) = (BigInt::from(n), BigInt::from(s));
    let mut best: Option<(u8, BigInt, BigInt)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for t in 0..255usize {
        n0 += hist[t] as u128;
        s0 += t as u128 * hist[t] as u128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let x = &n_big * BigInt::from(s0) - BigInt::from(n0) * &s_big;
        let num = &x * &x;
        let den = BigInt::from(n0) * BigInt::from(n1);
        let better = match &best {
            None => true,
            Some((_, bn, bd)) => &num * bd > bn * &den,
        };
        if better {
            best = Some((t as u8, num, den));
        }
    }
    best.map(|(t, _, _)| t).ok_or(TilingError::Degenerate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Foreground is at or below the threshold (tissue darker than glass).
    Dark,
    Light,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    /// Patch edge at the target resolution.
    pub patch_size: usize,
    pub target_mpp: f64,
    pub min_foreground: f64,
    pub polarity: Polarity,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig { patch_size: 256, target_mpp: 0.5, min_foreground: 0.1, polarity: Polarity::Dark }
    }
}

impl TilingConfig {
    /// Patch edge in native pixels for a slide scanned at `mpp`.
    pub fn native_patch_size(&self, mpp: f64) -> Result<usize, TilingError> {
        if !(mpp > 0.0 && mpp.is_finite()) {
            return Err(TilingError::InvalidConfig(format!("mpp must be positive, got {mpp}")));
        }
        let size = (self.patch_size as f64 * self.target_mpp / mpp).round();
        if size < 1.0 {
            return Err(TilingError::InvalidConfig("patch size rounds to zero pixels".into()));
        }
        Ok(size as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchCoord {
    pub row: usize,
    pub col: usize,
    pub foreground_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub slide_id: String,
    pub mpp: f64,
    /// Patch edge in native pixels.
    pub patch_size: usize,
    pub threshold: u8,
    pub coords: Vec<PatchCoord>,
    /// Set when the image cannot hold a single patch.
    pub too_small: bool,
}

/// Tiles the image on a grid anchored at the origin, dropping partial edge
/// tiles and tiles whose foreground fraction is below the minimum.
pub fn extract_patches(
    image: &GrayImage,
    slide_id: &str,
    mpp: f64,
    cfg: &TilingConfig,
) -> Result<PatchManifest, TilingError> {
    if !(0.0..=1.0).contains(&cfg.min_foreground) {
        return Err(TilingError::InvalidConfig("min_foreground outside [0, 1]".into()));
    }
    let size = cfg.native_patch_size(mpp)?;
    let threshold = otsu_threshold(&image.histogram())?;
    let mut manifest = PatchManifest {
        slide_id: slide_id.to_string(),
        mpp,
        patch_size: size,
        threshold,
        coords: Vec::new(),
        too_small: image.width < size || image.height < size,
    };
    let is_fg = |p: u8| match cfg.polarity {
        Polarity::Dark => p <= threshold,
        Polarity::Light => p > threshold,
    };
    let area = (size * size) as f64;
    for gr in 0..image.height / size {
        for gc in 0..image.width / size {
            let (r0, c0) = (gr * size, gc * size);
            let mut fg = 0usize;
            for r in r0..r0 + size {
                let row = &image.pixels[r * image.width + c0..r * image.width + c0 + size];
                fg += row.iter().filter(|&&p| is_fg(p)).count();
            }
            let fraction = fg as f64 / area;
            if fraction >= cfg.min_foreground {
                manifest.coords.push(PatchCoord { row: r0, col: c0, foreground_fraction: fraction });
            }
        }
    }
    Ok(manifest)
}

pub const MANIFEST_HEADER: &str = "slide_id\trow\tcol\tforeground_fraction";

pub fn manifest_tsv(manifests: &[PatchManifest]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for m in manifests {
        for c in &m.coords {
            out.push_str(&format!("{}\t{}\t{}\t{:.6}\n", m.slide_id, c.row, c.col, c.foreground_fraction));
        }
    }
    out
}

/// Parses manifest rows into `(slide_id, coord)` pairs; `#` comment lines
/// are skipped.
pub fn read_manifest_tsv(text: &str) -> Result<Vec<(String, PatchCoord)>, TilingError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        _ => return Err(TilingError::Manifest { line: 1, reason: "missing header".into() }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = |reason: &str| TilingError::Manifest { line: i + 1, reason: reason.into() };
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            Ok((
                cols[0].to_string(),
                PatchCoord {
                    row: cols[1].parse().map_err(|_| bad("bad row"))?,
                    col: cols[2].parse().map_err(|_| bad("bad col"))?,
                    foreground_fraction: cols[3].parse().map_err(|_| bad("bad fraction"))?,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(pairs: &[(usize, u64)]) -> Vec<u64> {
        let mut h = vec![0u64; 256];
        for &(i, c) in pairs {
            h[i] = c;
        }
        h
    }

    #[test]
    fn two_level_image_lowest_maximizer() {
        assert_eq!(otsu_threshold(&hist(&[(0, 40), (255, 60)])).unwrap(), 0);
    }

    #[test]
    fn constant_image_is_degenerate() {
        assert_eq!(otsu_threshold(&hist(&[(17, 100)])), Err(TilingError::Degenerate));
        assert_eq!(otsu_threshold(&[1, 2]), Err(TilingError::HistogramSize(2)));
    }

    #[test]
    fn scaling_invariance() {
        let h = hist(&[(10, 5), (50, 9), (51, 2), (200, 7), (230, 1)]);
        let scaled: Vec<u64> = h.iter().map(|c| c * 13).collect();
        assert_eq!(otsu_threshold(&h).unwrap(), otsu_threshold(&scaled).unwrap());
    }

    #[test]
    fn grid_counts() {
        let cfg = TilingConfig::default();
        let checker = |w, h| GrayImage::from_fn(w, h, |r, c| if (r + c) % 2 == 0 { 10 } else { 30 });
        let m = extract_patches(&checker(512, 512), "s", 0.5, &cfg).unwrap();
        assert_eq!(m.coords.len(), 4);
        let m = extract_patches(&checker(600, 600), "s", 0.5, &cfg).unwrap();
        assert_eq!(m.coords.len(), 4);
        let m = extract_patches(&checker(100, 300), "s", 0.5, &cfg).unwrap();
        assert!(m.too_small && m.coords.is_empty());
        assert_eq!(cfg.native_patch_size(0.25).unwrap(), 512);
    }

    #[test]
    fn half_background_slide() {
        // Left half tissue (dark), right half glass (bright).
        let img = GrayImage::from_fn(1024, 512, |r, c| if c < 512 { 60 + (r % 7) as u8 } else { 240 });
        let m = extract_patches(&img, "s", 0.5, &TilingConfig::default()).unwrap();
        let cols: Vec<usize> = m.coords.iter().map(|c| c.col).collect();
        assert_eq!(cols, vec![0, 256, 0, 256]);
        let text = manifest_tsv(&[m.clone()]);
        let back = read_manifest_tsv(&text).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[1].1.col, 256);
    }
}
