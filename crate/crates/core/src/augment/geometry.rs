use image::RgbImage;
use rand::Rng;

use super::{Interp, N_CHANNELS};
use crate::data::{CellRecord, Mask};
use crate::nn::Tensor;

/// `(cos, sin)` of an angle in degrees, exact at multiples of 90.
fn cos_sin(degrees: f64) -> (f64, f64) {
    let quarter = degrees / 90.0;
    if (quarter - quarter.round()).abs() < 1e-12 {
        match (quarter.round() as i64).rem_euclid(4) {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = degrees.to_radians();
        (r.cos(), r.sin())
    }
}

/// Maps an output pixel of a rotation by `degrees` (counter-clockwise on
/// screen, about the image center) to its source coordinates `(row, col)`.
struct InverseMap {
    cos: f64,
    sin: f64,
    cy: f64,
    cx: f64,
}

impl InverseMap {
    fn new(degrees: f64, height: usize, width: usize) -> Self {
        let (cos, sin) = cos_sin(degrees);
        InverseMap {
            cos,
            sin,
            cy: (height as f64 - 1.0) / 2.0,
            cx: (width as f64 - 1.0) / 2.0,
        }
    }

    fn source(&self, r: usize, c: usize) -> (f64, f64) {
        let dy = r as f64 - self.cy;
        let dx = c as f64 - self.cx;
        let sy = self.cy + self.sin * dx + self.cos * dy;
        let sx = self.cx + self.cos * dx - self.sin * dy;
        (sy, sx)
    }

    /// Forward map of a source point, used when the rotated nucleus leaves the
    /// frame and its centroid has to be rotated analytically.
    fn forward(&self, r: f64, c: f64) -> (f64, f64) {
        let dy = r - self.cy;
        let dx = c - self.cx;
        let y = self.cy - self.sin * dx + self.cos * dy;
        let x = self.cx + self.cos * dx + self.sin * dy;
        (y, x)
    }
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

fn in_bounds(r: i64, c: i64, h: usize, w: usize) -> bool {
    r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w
}

fn rotate_mask(mask: &Mask, map: &InverseMap) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    Mask::from_fn(h, w, |r, c| {
        let (sy, sx) = map.source(r, c);
        let (sr, sc) = (round_half_up(sy), round_half_up(sx));
        in_bounds(sr, sc, h, w) && mask.get(sr as usize, sc as usize) == 1
    })
}

fn rotate_rgb(img: &RgbImage, map: &InverseMap, interp: Interp) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = |r: i64, c: i64| -> [f64; 3] {
        if in_bounds(r, c, h, w) {
            let p = img.get_pixel(c as u32, r as u32).0;
            [p[0] as f64, p[1] as f64, p[2] as f64]
        } else {
            [0.0; 3]
        }
    };
    RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let (sy, sx) = map.source(r as usize, c as usize);
        let v = match interp {
            Interp::Nearest => px(round_half_up(sy), round_half_up(sx)),
            Interp::Bilinear => {
                let (y0, x0) = (sy.floor(), sx.floor());
                let (fy, fx) = (sy - y0, sx - x0);
                let (y0, x0) = (y0 as i64, x0 as i64);
                let (a, b, cc, d) = (px(y0, x0), px(y0, x0 + 1), px(y0 + 1, x0), px(y0 + 1, x0 + 1));
                std::array::from_fn(|k| {
                    (1.0 - fy) * ((1.0 - fx) * a[k] + fx * b[k]) + fy * ((1.0 - fx) * cc[k] + fx * d[k])
                })
            }
        };
        image::Rgb(v.map(|x| round_half_up(x).clamp(0, 255) as u8))
    })
}

/// Rotates the whole cell about the image center, zero filling pixels whose
/// source lies outside the image. Masks always use nearest interpolation.
pub fn rotate_cell(cell: &CellRecord, degrees: f64, interp: Interp) -> CellRecord {
    if degrees == 0.0 {
        return cell.clone();
    }
    let map = InverseMap::new(degrees, cell.height(), cell.width());
    CellRecord {
        rgb: rotate_rgb(&cell.rgb, &map, interp),
        nucleus: rotate_mask(&cell.nucleus, &map),
        cytoplasm: rotate_mask(&cell.cytoplasm, &map),
        class_label: cell.class_label,
        category: cell.category,
        patient_id: cell.patient_id.clone(),
    }
}

/// Where a source pixel lands after `rotate_cell(.., degrees, ..)`, rounded
/// half-up.
pub fn rotate_point(point: (i64, i64), degrees: f64, height: usize, width: usize) -> (i64, i64) {
    let map = InverseMap::new(degrees, height, width);
    let (y, x) = map.forward(point.0 as f64, point.1 as f64);
    (round_half_up(y), round_half_up(x))
}

/// Offset drawn uniformly from the integer square `[-d, d]^2`.
pub fn jitter_offset(d: usize, rng: &mut impl Rng) -> (i64, i64) {
    let d = d as i64;
    let dr = rng.random_range(-d..=d);
    let dc = rng.random_range(-d..=d);
    (dr, dc)
}

pub fn jitter_center(centroid: (i64, i64), d: usize, rng: &mut impl Rng) -> (i64, i64) {
    let (dr, dc) = jitter_offset(d, rng);
    (centroid.0 + dr, centroid.1 + dc)
}

/// An `m x m` window cut from a cell; pixels outside the image are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub m: usize,
    /// `m * m * 3`, row-major, channel-last.
    pub rgb: Vec<u8>,
    pub nucleus: Vec<u8>,
    pub cytoplasm: Vec<u8>,
}

/// Window `[center - m/2, center - m/2 + m)` on both axes.
pub fn extract_patch(cell: &CellRecord, center: (i64, i64), m: usize) -> Patch {
    let (h, w) = (cell.height(), cell.width());
    let (r0, c0) = (center.0 - (m / 2) as i64, center.1 - (m / 2) as i64);
    let mut patch = Patch {
        m,
        rgb: vec![0; m * m * 3],
        nucleus: vec![0; m * m],
        cytoplasm: vec![0; m * m],
    };
    for i in 0..m {
        let r = r0 + i as i64;
        for j in 0..m {
            let c = c0 + j as i64;
            if !in_bounds(r, c, h, w) {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            let k = i * m + j;
            patch.rgb[3 * k..3 * k + 3].copy_from_slice(&cell.rgb.get_pixel(c as u32, r as u32).0);
            patch.nucleus[k] = cell.nucleus.get(r, c);
            patch.cytoplasm[k] = cell.cytoplasm.get(r, c);
        }
    }
    patch
}

/// Upsamples a patch to `out_size x out_size x 5` by nearest neighbour
/// (source index `floor(i * m / out_size)`), RGB scaled to `[0, 1]`, channel
/// order R, G, B, nucleus, cytoplasm.
pub fn assemble_sample(patch: &Patch, out_size: usize) -> Tensor {
    let m = patch.m;
    let src: Vec<usize> = (0..out_size).map(|i| i * m / out_size).collect();
    let mut data = Vec::with_capacity(out_size * out_size * N_CHANNELS);
    for &si in &src {
        for &sj in &src {
            let k = si * m + sj;
            let p = &patch.rgb[3 * k..3 * k + 3];
            data.extend_from_slice(&[
                p[0] as f32 / 255.0,
                p[1] as f32 / 255.0,
                p[2] as f32 / 255.0,
                patch.nucleus[k] as f32,
                patch.cytoplasm[k] as f32,
            ]);
        }
    }
    Tensor::from_vec(&[out_size, out_size, N_CHANNELS], data).expect("length matches shape")
}
