//! Synthetic "cells" for desk-scale testing.
//!
//! Each cell is a cytoplasm ellipse holding a nucleus ellipse. The label is a
//! pure function of the nucleus / cytoplasm area ratio measured on the
//! rendered masks, plus an optional weight on nucleus darkness. In the RGB
//! rendering the nucleus is only faintly darker than the cytoplasm and every
//! pixel carries Gaussian noise, so the morphology is much easier to read
//! from the mask channels than from the appearance channels.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cell::{LabelColorMap, Region};
use super::manifest::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_cells: usize,
    pub image_size: usize,
    /// 2 (labels 1 and 4, one normal and one abnormal) or 3..=7 (labels 1..=n).
    pub n_classes: usize,
    /// Ascending score cut points, `n_classes - 1` of them. The score is
    /// `area_ratio + darkness_weight * darkness`.
    pub thresholds: Vec<f64>,
    pub darkness_weight: f64,
    /// Scores are drawn at least this far from every threshold.
    pub margin: f64,
    pub ratio_range: (f64, f64),
    pub darkness_range: (f64, f64),
    pub noise_std: f64,
    pub max_cells_per_patient: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_cells: 1000,
            image_size: 64,
            n_classes: 2,
            thresholds: vec![0.3],
            darkness_weight: 0.0,
            margin: 0.04,
            ratio_range: (0.1, 0.6),
            darkness_range: (0.0, 0.08),
            noise_std: 0.12,
            max_cells_per_patient: 3,
            seed: 1,
        }
    }
}

/// Ground truth recorded next to the generated files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub index: usize,
    pub area_ratio: f64,
    pub darkness: f64,
    pub class_label: u8,
}

impl SynthSpec {
    pub fn labels(&self) -> Vec<u8> {
        match self.n_classes {
            2 => vec![1, 4],
            n => (1..=n as u8).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if !(2..=7).contains(&self.n_classes) {
            return fail("n_classes must be in 2..=7");
        }
        if self.thresholds.len() != self.n_classes - 1 {
            return fail("need n_classes - 1 thresholds");
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return fail("thresholds must be ascending");
        }
        if self.image_size < 24 {
            return fail("image_size must be at least 24");
        }
        if self.max_cells_per_patient == 0 {
            return fail("max_cells_per_patient must be positive");
        }
        let (lo, hi) = self.ratio_range;
        if !(0.0 < lo && lo < hi) {
            return fail("ratio_range must satisfy 0 < lo < hi");
        }
        Ok(())
    }

    /// Class label implied by a measured ratio and darkness.
    pub fn classify(&self, area_ratio: f64, darkness: f64) -> u8 {
        let score = area_ratio + self.darkness_weight * darkness;
        let bin = self.thresholds.iter().filter(|&&t| score >= t).count();
        self.labels()[bin]
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let (dy, dx) = (r - self.cy, c - self.cx);
        let (s, co) = self.angle.sin_cos();
        let u = dx * co + dy * s;
        let v = -dx * s + dy * co;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

struct Rendered {
    rgb: RgbImage,
    seg: RgbImage,
    area_ratio: f64,
    darkness: f64,
}

fn render(spec: &SynthSpec, index: usize, colors: &LabelColorMap) -> Result<Rendered> {
    let mut r = rng::stream(spec.seed, &[rng::TAG_SYNTH, index as u64]);
    let n = spec.image_size;
    let size = n as f64;
    let center = (size - 1.0) / 2.0;

    // Pick a class bin, then a target ratio inside it away from the cut points.
    let (lo, hi) = spec.ratio_range;
    let mut edges = vec![lo];
    edges.extend(spec.thresholds.iter().copied());
    edges.push(hi);
    let bin = r.random_range(0..spec.n_classes);
    let darkness = r.random_range(spec.darkness_range.0..=spec.darkness_range.1);
    let shift = spec.darkness_weight * darkness;
    let b_lo = (edges[bin] + if bin > 0 { spec.margin } else { 0.0 } - shift).max(lo * 0.5);
    let b_hi = (edges[bin + 1] - if bin + 1 < spec.n_classes { spec.margin } else { 0.0 } - shift).max(b_lo + 1e-3);
    let target = r.random_range(b_lo..b_hi);

    let max_axis = size * 0.28;
    let a = r.random_range(max_axis * 0.6..max_axis);
    let cyto = Ellipse {
        cy: center + r.random_range(-1.5..1.5),
        cx: center + r.random_range(-1.5..1.5),
        a,
        b: a * r.random_range(0.7..1.0),
        angle: r.random_range(0.0..PI),
    };
    let total = PI * cyto.a * cyto.b;
    let nuc_area = total * target / (1.0 + target);
    let ecc = r.random_range(0.75..1.0);
    let na = (nuc_area / (PI * ecc)).sqrt();
    let room = (cyto.b - na).max(0.0) * 0.3;
    let nuc = Ellipse {
        cy: cyto.cy + r.random_range(-room..=room),
        cx: cyto.cx + r.random_range(-room..=room),
        a: na,
        b: na * ecc,
        angle: r.random_range(0.0..PI),
    };

    let illum = r.random_range(0.92..1.0);
    let background = [0.88 * illum, 0.86 * illum, 0.90 * illum];
    let cyto_rgb = [
        r.random_range(0.55..0.75) * illum,
        r.random_range(0.45..0.60) * illum,
        r.random_range(0.60..0.75) * illum,
    ];
    let nuc_rgb = cyto_rgb.map(|v| v * (1.0 - darkness));
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let col = |region: Region| {
        colors
            .color_of(region)
            .ok_or_else(|| Error::Config(format!("label color map has no {region:?} color")))
    };
    let (bg_col, cy_col, nu_col) = (col(Region::Background)?, col(Region::Cytoplasm)?, col(Region::Nucleus)?);
    let mut rgb = RgbImage::new(n as u32, n as u32);
    let mut seg = RgbImage::new(n as u32, n as u32);
    let (mut n_nuc, mut n_cyto) = (0usize, 0usize);
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64, x as f64);
            let (base, label) = if nuc.contains(fy, fx) {
                n_nuc += 1;
                (nuc_rgb, nu_col)
            } else if cyto.contains(fy, fx) {
                n_cyto += 1;
                (cyto_rgb, cy_col)
            } else {
                (background, bg_col)
            };
            let px = base.map(|v| ((v + noise.sample(&mut r)).clamp(0.0, 1.0) * 255.0).round() as u8);
            rgb.put_pixel(x as u32, y as u32, Rgb(px));
            seg.put_pixel(x as u32, y as u32, Rgb(label));
        }
    }
    if n_nuc == 0 || n_cyto == 0 {
        return Err(Error::Config(format!(
            "cell {index}: degenerate rendering, enlarge image_size"
        )));
    }
    Ok(Rendered {
        rgb,
        seg,
        area_ratio: n_nuc as f64 / n_cyto as f64,
        darkness,
    })
}

/// Writes images, segmentations, `manifest.csv` and `truth.json` to `out_dir`.
pub fn generate_synthetic(
    spec: &SynthSpec,
    colors: &LabelColorMap,
    out_dir: &Path,
) -> Result<(DatasetManifest, Vec<SynthTruth>)> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut pr = rng::stream(spec.seed, &[rng::TAG_SYNTH, u64::MAX]);
    let mut entries = Vec::with_capacity(spec.n_cells);
    let mut truth = Vec::with_capacity(spec.n_cells);
    let (mut patient, mut left) = (0usize, 0usize);
    for i in 0..spec.n_cells {
        if left == 0 {
            patient += 1;
            left = pr.random_range(1..=spec.max_cells_per_patient);
        }
        left -= 1;
        let cell = render(spec, i, colors)?;
        let class_label = spec.classify(cell.area_ratio, cell.darkness);
        let image = PathBuf::from(format!("images/cell_{i:05}.png"));
        let segmentation = PathBuf::from(format!("images/cell_{i:05}_seg.png"));
        for (rel, img) in [(&image, &cell.rgb), (&segmentation, &cell.seg)] {
            let path = out_dir.join(rel);
            img.save(&path).map_err(|source| Error::Image { path, source })?;
        }
        entries.push(ManifestEntry {
            image,
            segmentation,
            class_label,
            patient_id: format!("patient-{patient:04}"),
        });
        truth.push(SynthTruth {
            index: i,
            area_ratio: cell.area_ratio,
            darkness: cell.darkness,
            class_label,
        });
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    let truth_path = out_dir.join("truth.json");
    let text = serde_json::to_string_pretty(&truth).expect("truth serializes");
    std::fs::write(&truth_path, text).map_err(|e| Error::io(&truth_path, e))?;
    Ok((manifest, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{decode_all, load_manifest};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            n_cells: 100,
            image_size: 40,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn hundred_cells_two_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = generate_synthetic(&small(1), &LabelColorMap::default(), dir.path()).unwrap();
        assert_eq!(m.len(), 100);
        let labels: std::collections::BTreeSet<u8> = m.entries.iter().map(|e| e.class_label).collect();
        assert_eq!(labels, [1u8, 4].into());
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SynthSpec {
            n_cells: 12,
            ..small(1)
        };
        generate_synthetic(&spec, &LabelColorMap::default(), a.path()).unwrap();
        generate_synthetic(&spec, &LabelColorMap::default(), b.path()).unwrap();
        for rel in [
            "manifest.csv",
            "truth.json",
            "images/cell_00000.png",
            "images/cell_00011_seg.png",
        ] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn labels_follow_ratio_recomputed_from_mask_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(3);
        generate_synthetic(&spec, &LabelColorMap::default(), dir.path()).unwrap();
        let manifest = load_manifest(&dir.path().join("manifest.csv")).unwrap();
        let cells = decode_all(&manifest, &LabelColorMap::default()).unwrap();
        for (cell, entry) in cells.iter().zip(&manifest.entries) {
            let ratio = cell.nucleus.count() as f64 / cell.cytoplasm.count() as f64;
            let expect = if ratio >= 0.3 { 4 } else { 1 };
            assert_eq!(entry.class_label, expect, "ratio {ratio}");
            cell.validate().unwrap();
        }
    }
}
