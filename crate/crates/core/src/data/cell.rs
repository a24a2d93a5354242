use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Category, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Background,
    Cytoplasm,
    Nucleus,
    /// Labelled but belongs to neither mask.
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorRule {
    pub color: [u8; 3],
    pub region: Region,
}

/// Maps segmentation-image colors to regions. Grayscale segmentations are
/// read as RGB with equal components.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelColorMap {
    pub rules: Vec<ColorRule>,
}

impl Default for LabelColorMap {
    /// Black background, red cytoplasm, blue nucleus. Check this against the
    /// segmentation files of the dataset at hand before use.
    fn default() -> Self {
        LabelColorMap {
            rules: vec![
                ColorRule {
                    color: [0, 0, 0],
                    region: Region::Background,
                },
                ColorRule {
                    color: [255, 0, 0],
                    region: Region::Cytoplasm,
                },
                ColorRule {
                    color: [0, 0, 255],
                    region: Region::Nucleus,
                },
            ],
        }
    }
}

impl LabelColorMap {
    pub fn region(&self, color: [u8; 3]) -> Option<Region> {
        self.rules.iter().find(|r| r.color == color).map(|r| r.region)
    }

    pub fn color_of(&self, region: Region) -> Option<[u8; 3]> {
        self.rules.iter().find(|r| r.region == region).map(|r| r.color)
    }
}

/// Binary `{0,1}` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Mask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, on: bool) {
        self.data[r * self.width + c] = u8::from(on);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }
}

/// One decoded cell with binary nucleus and cytoplasm masks. The cytoplasm
/// mask excludes nucleus pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub rgb: RgbImage,
    pub nucleus: Mask,
    pub cytoplasm: Mask,
    pub class_label: u8,
    pub category: Category,
    pub patient_id: String,
}

impl CellRecord {
    pub fn height(&self) -> usize {
        self.rgb.height() as usize
    }

    pub fn width(&self) -> usize {
        self.rgb.width() as usize
    }

    /// Checks the record invariants: matching sizes, binary disjoint masks,
    /// non-empty nucleus.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for m in [&self.nucleus, &self.cytoplasm] {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "mask {}x{} vs image {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
            if m.data().iter().any(|&v| v > 1) {
                return Err(Error::Shape("mask is not binary".into()));
            }
        }
        if self
            .nucleus
            .data()
            .iter()
            .zip(self.cytoplasm.data())
            .any(|(&n, &c)| n == 1 && c == 1)
        {
            return Err(Error::Shape("nucleus and cytoplasm masks overlap".into()));
        }
        if self.nucleus.count() == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(())
    }
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Builds a record from an already loaded image pair.
pub fn decode_images(
    rgb: RgbImage,
    seg: &RgbImage,
    entry: &ManifestEntry,
    colors: &LabelColorMap,
    source: &Path,
) -> Result<CellRecord> {
    if rgb.dimensions() != seg.dimensions() {
        return Err(Error::DimensionMismatch {
            path: source.to_path_buf(),
            image_h: rgb.height(),
            image_w: rgb.width(),
            seg_h: seg.height(),
            seg_w: seg.width(),
        });
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut nucleus = Mask::zeros(h, w);
    let mut cytoplasm = Mask::zeros(h, w);
    for (x, y, px) in seg.enumerate_pixels() {
        let region = colors.region(px.0).ok_or(Error::UnmappedColor {
            path: source.to_path_buf(),
            color: px.0,
        })?;
        match region {
            Region::Nucleus => nucleus.set(y as usize, x as usize, true),
            Region::Cytoplasm => cytoplasm.set(y as usize, x as usize, true),
            Region::Background | Region::Other => {}
        }
    }
    if nucleus.count() == 0 {
        return Err(Error::EmptyNucleus(source.to_path_buf()));
    }
    Ok(CellRecord {
        rgb,
        nucleus,
        cytoplasm,
        class_label: entry.class_label,
        category: entry.category(),
        patient_id: entry.patient_id.clone(),
    })
}

/// Loads and decodes manifest entry `index`.
pub fn decode_cell(manifest: &DatasetManifest, index: usize, colors: &LabelColorMap) -> Result<CellRecord> {
    let image_path = manifest.image_path(index);
    let seg_path = manifest.segmentation_path(index);
    let rgb = open_rgb(&image_path)?;
    let seg = open_rgb(&seg_path)?;
    decode_images(rgb, &seg, &manifest.entries[index], colors, &seg_path)
}

/// Decodes every entry in parallel. Output order follows the manifest and the
/// reported error, if any, is the one for the earliest failing entry.
pub fn decode_all(manifest: &DatasetManifest, colors: &LabelColorMap) -> Result<Vec<CellRecord>> {
    let results: Vec<Result<CellRecord>> = (0..manifest.len())
        .into_par_iter()
        .map(|i| decode_cell(manifest, i, colors))
        .collect();
    results.into_iter().collect()
}

/// Arithmetic mean of the foreground coordinates, rounded half-up per axis.
pub fn nucleus_centroid(mask: &Mask) -> Result<(i64, i64)> {
    let (mut n, mut sr, mut sc) = (0u64, 0u64, 0u64);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) != 0 {
                n += 1;
                sr += r as u64;
                sc += c as u64;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    // floor(s / n + 1/2) in exact integer arithmetic
    let round = |s: u64| ((2 * s + n) / (2 * n)) as i64;
    Ok((round(sr), round(sc)))
}

pub fn source_path(manifest: &DatasetManifest, index: usize) -> PathBuf {
    manifest.image_path(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn entry(class_label: u8) -> ManifestEntry {
        ManifestEntry {
            image: "a.png".into(),
            segmentation: "a-d.png".into(),
            class_label,
            patient_id: "p".into(),
        }
    }

    fn seg_with_block(size: u32, block: &[(u32, u32)], colors: &LabelColorMap) -> RgbImage {
        let bg = colors.color_of(Region::Background).unwrap();
        let nuc = colors.color_of(Region::Nucleus).unwrap();
        let mut seg = RgbImage::from_pixel(size, size, Rgb(bg));
        for &(r, c) in block {
            seg.put_pixel(c, r, Rgb(nuc));
        }
        seg
    }

    #[test]
    fn two_by_two_nucleus_block() {
        let colors = LabelColorMap::default();
        let seg = seg_with_block(10, &[(4, 4), (4, 5), (5, 4), (5, 5)], &colors);
        let rgb = RgbImage::new(10, 10);
        let cell = decode_images(rgb, &seg, &entry(4), &colors, Path::new("x")).unwrap();
        let direct = (0..10)
            .flat_map(|r| (0..10).map(move |c| (r, c)))
            .filter(|&(r, c)| cell.nucleus.get(r, c) == 1)
            .count();
        assert_eq!(direct, 4);
        assert_eq!(cell.category, Category::Abnormal);
        cell.validate().unwrap();
    }

    #[test]
    fn all_background_is_empty_nucleus() {
        let colors = LabelColorMap::default();
        let seg = seg_with_block(6, &[], &colors);
        let err = decode_images(RgbImage::new(6, 6), &seg, &entry(1), &colors, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::EmptyNucleus(_)));
    }

    #[test]
    fn unmapped_color_and_dimension_mismatch() {
        let colors = LabelColorMap::default();
        let mut seg = seg_with_block(6, &[(1, 1)], &colors);
        seg.put_pixel(0, 0, Rgb([1, 2, 3]));
        let err = decode_images(RgbImage::new(6, 6), &seg, &entry(1), &colors, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::UnmappedColor { color: [1, 2, 3], .. }));
        let seg = seg_with_block(6, &[(1, 1)], &colors);
        let err = decode_images(RgbImage::new(5, 6), &seg, &entry(1), &colors, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn centroid_examples() {
        let mut m = Mask::zeros(10, 10);
        m.set(7, 3, true);
        assert_eq!(nucleus_centroid(&m).unwrap(), (7, 3));
        let mut m = Mask::zeros(3, 3);
        m.set(0, 0, true);
        m.set(0, 2, true);
        assert_eq!(nucleus_centroid(&m).unwrap(), (0, 1));
        // Mean 0.5 rounds up.
        let mut m = Mask::zeros(3, 3);
        m.set(0, 0, true);
        m.set(1, 1, true);
        assert_eq!(nucleus_centroid(&m).unwrap(), (1, 1));
        assert!(nucleus_centroid(&Mask::zeros(4, 4)).is_err());
    }

    fn oracle_centroid(mask: &Mask) -> (i64, i64) {
        let pts: Vec<(f64, f64)> = (0..mask.height())
            .flat_map(|r| (0..mask.width()).map(move |c| (r, c)))
            .filter(|&(r, c)| mask.get(r, c) == 1)
            .map(|(r, c)| (r as f64, c as f64))
            .collect();
        let n = pts.len() as f64;
        let mr = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let mc = pts.iter().map(|p| p.1).sum::<f64>() / n;
        ((mr + 0.5).floor() as i64, (mc + 0.5).floor() as i64)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn centroid_matches_coordinate_mean(bits in proptest::collection::vec(any::<bool>(), 32 * 32)) {
            prop_assume!(bits.iter().any(|&b| b));
            let m = Mask::from_fn(32, 32, |r, c| bits[r * 32 + c]);
            prop_assert_eq!(nucleus_centroid(&m).unwrap(), oracle_centroid(&m));
        }
    }
}
