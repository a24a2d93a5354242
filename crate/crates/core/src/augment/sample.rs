use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::geometry::{assemble_sample, extract_patch, jitter_offset, rotate_cell, rotate_point};
use super::{AugmentConfig, AugmentPlan, N_CHANNELS};
use crate::data::{nucleus_centroid, Category, CellRecord};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Index of the source cell in the record list.
    pub cell: usize,
    pub patient_id: String,
    pub rotation_deg: f64,
    /// Shift `(dr, dc)` of the window center from the nucleus centroid.
    pub translation: (i64, i64),
}

/// An `out_size x out_size x 5` tensor with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tensor: Tensor,
    pub class_label: u8,
    pub category: Category,
    pub provenance: Provenance,
}

/// Lazy description of one augmented sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleKey {
    pub cell: usize,
    /// Class key the plan was looked up with.
    pub group: u8,
    pub rotation_index: u32,
    pub translation_index: u32,
    pub rotation_deg: f64,
}

impl SampleKey {
    /// Jitter of this key, drawn from its own stream.
    pub fn offset(&self, cfg: &AugmentConfig) -> (i64, i64) {
        let mut r = rng::stream(
            cfg.seed,
            &[
                rng::TAG_JITTER,
                self.cell as u64,
                self.rotation_index as u64,
                self.translation_index as u64,
            ],
        );
        jitter_offset(cfg.max_translation, &mut r)
    }

    pub fn provenance(&self, records: &[CellRecord], cfg: &AugmentConfig) -> Provenance {
        Provenance {
            cell: self.cell,
            patient_id: records[self.cell].patient_id.clone(),
            rotation_deg: self.rotation_deg,
            translation: self.offset(cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingSet {
    pub keys: Vec<SampleKey>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn counts_by_group(&self) -> BTreeMap<u8, usize> {
        let mut out = BTreeMap::new();
        for k in &self.keys {
            *out.entry(k.group).or_insert(0) += 1;
        }
        out
    }

    pub fn provenance(&self, records: &[CellRecord], cfg: &AugmentConfig) -> Vec<Provenance> {
        self.keys.iter().map(|k| k.provenance(records, cfg)).collect()
    }
}

/// Enumerates the augmented samples of `cells` (indices into `records`):
/// per cell, `N_r` rotations at the plan's angle step, each with `N_t`
/// translations, plus the plan's top-up samples. `group_of` gives the class
/// key used to look up the plan.
pub fn build_training_set(
    records: &[CellRecord],
    cells: &[usize],
    group_of: impl Fn(&CellRecord) -> u8,
    plan: &AugmentPlan,
    cfg: &AugmentConfig,
) -> Result<TrainingSet> {
    cfg.validate()?;
    if cells.is_empty() {
        return Err(Error::EmptyInput("training cells"));
    }
    let mut position: BTreeMap<u8, usize> = BTreeMap::new();
    let mut keys = Vec::new();
    for &cell in cells {
        let record = records
            .get(cell)
            .ok_or_else(|| Error::Config(format!("cell index {cell} out of range ({} records)", records.len())))?;
        let group = group_of(record);
        let p = plan.get(group)?;
        let pos = position.entry(group).or_insert(0);
        for r in 0..p.rotations {
            for t in 0..p.translations {
                keys.push(SampleKey {
                    cell,
                    group,
                    rotation_index: r as u32,
                    translation_index: t as u32,
                    rotation_deg: p.angle(r),
                });
            }
        }
        if *pos < p.source_count && p.has_extra(*pos) {
            let r = *pos % p.rotations;
            keys.push(SampleKey {
                cell,
                group,
                rotation_index: r as u32,
                translation_index: p.translations as u32,
                rotation_deg: p.angle(r),
            });
        }
        *pos += 1;
    }
    Ok(TrainingSet { keys })
}

/// Sample of `records[cell]` rotated by `degrees`, window centered at the
/// rotated nucleus centroid plus `offset`.
pub fn sample_at(
    records: &[CellRecord],
    cell: usize,
    degrees: f64,
    offset: (i64, i64),
    cfg: &AugmentConfig,
) -> Result<Sample> {
    let record = &records[cell];
    let rotated = rotate_cell(record, degrees, cfg.rotation_interp);
    let centroid = match nucleus_centroid(&rotated.nucleus) {
        Ok(c) => c,
        Err(_) => rotate_point(
            nucleus_centroid(&record.nucleus)?,
            degrees,
            record.height(),
            record.width(),
        ),
    };
    let center = (centroid.0 + offset.0, centroid.1 + offset.1);
    let patch = extract_patch(&rotated, center, cfg.patch_size);
    Ok(Sample {
        tensor: assemble_sample(&patch, cfg.out_size),
        class_label: record.class_label,
        category: record.category,
        provenance: Provenance {
            cell,
            patient_id: record.patient_id.clone(),
            rotation_deg: degrees,
            translation: offset,
        },
    })
}

pub fn make_sample(records: &[CellRecord], key: &SampleKey, cfg: &AugmentConfig) -> Result<Sample> {
    sample_at(records, key.cell, key.rotation_deg, key.offset(cfg), cfg)
}

/// Unrotated sample centered exactly on the nucleus centroid.
pub fn identity_sample(records: &[CellRecord], cell: usize, cfg: &AugmentConfig) -> Result<Sample> {
    sample_at(records, cell, 0.0, (0, 0), cfg)
}

fn hwc(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("expected an H x W x C tensor, got {s:?}"))),
    }
}

/// `crop x crop` window at `(oy, ox)`, optionally mirrored left-right, keeping
/// the first `channels` channels.
pub fn crop_view(t: &Tensor, oy: usize, ox: usize, crop: usize, mirror: bool, channels: usize) -> Result<Tensor> {
    let (h, w, c) = hwc(t)?;
    if oy + crop > h || ox + crop > w || crop == 0 {
        return Err(Error::Shape(format!(
            "crop {crop} at ({oy}, {ox}) does not fit in {h}x{w}"
        )));
    }
    if channels == 0 || channels > c {
        return Err(Error::Shape(format!("cannot keep {channels} of {c} channels")));
    }
    let src = t.data();
    let mut out = Vec::with_capacity(crop * crop * channels);
    for i in 0..crop {
        let row = (oy + i) * w;
        for j in 0..crop {
            let col = if mirror { ox + crop - 1 - j } else { ox + j };
            let base = (row + col) * c;
            out.extend_from_slice(&src[base..base + channels]);
        }
    }
    Tensor::from_vec(&[crop, crop, channels], out)
}

/// Random crop position (uniform over all valid offsets) and a left-right
/// mirror with probability 1/2, applied identically to every channel.
pub fn train_view(t: &Tensor, crop: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (h, w, c) = hwc(t)?;
    if crop > h || crop > w {
        return Err(Error::Config(format!("crop {crop} exceeds sample size {h}x{w}")));
    }
    let oy = rng.random_range(0..=h - crop);
    let ox = rng.random_range(0..=w - crop);
    let mirror = rng.random_bool(0.5);
    crop_view(t, oy, ox, crop, mirror, c)
}

/// Keeps the first `channels` channels of an `H x W x C` tensor.
pub fn select_channels(t: &Tensor, channels: usize) -> Result<Tensor> {
    let (h, w, c) = hwc(t)?;
    if channels == 0 || channels > c {
        return Err(Error::Shape(format!("cannot keep {channels} of {c} channels")));
    }
    let data = t
        .data()
        .chunks(c)
        .flat_map(|px| px[..channels].iter().copied())
        .collect();
    Tensor::from_vec(&[h, w, channels], data)
}

/// Subtracts per-channel means in place. `means` always holds five values; a
/// three-channel view uses the first three.
pub fn normalize(view: &mut Tensor, means: &[f32]) -> Result<()> {
    if means.len() != N_CHANNELS {
        return Err(Error::Config(format!(
            "expected {N_CHANNELS} channel means, got {}",
            means.len()
        )));
    }
    let c = *view
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("empty tensor shape".into()))?;
    if c > N_CHANNELS {
        return Err(Error::Shape(format!("{c} channels, at most {N_CHANNELS} supported")));
    }
    for px in view.data_mut().chunks_mut(c) {
        for (v, m) in px.iter_mut().zip(means) {
            *v -= m;
        }
    }
    Ok(())
}

/// Per-channel means over the identity samples of `cells`.
pub fn channel_means(records: &[CellRecord], cells: &[usize], cfg: &AugmentConfig) -> Result<[f32; N_CHANNELS]> {
    if cells.is_empty() {
        return Err(Error::EmptyInput("cells for channel means"));
    }
    let sums = cells
        .par_iter()
        .map(|&cell| {
            let s = identity_sample(records, cell, cfg)?;
            let mut acc = [0f64; N_CHANNELS];
            for px in s.tensor.data().chunks(N_CHANNELS) {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a += v as f64;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = [0f64; N_CHANNELS];
    for s in &sums {
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    let n = (cells.len() * cfg.out_size * cfg.out_size) as f64;
    Ok(total.map(|t| (t / n) as f32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializedEntry {
    pub file: String,
    pub class_label: u8,
    pub category: Category,
    pub provenance: Provenance,
}

/// Sidecar index written next to materialized samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializedIndex {
    /// Tensor shape of every file, `[out_size, out_size, 5]`, channel-last.
    pub shape: Vec<usize>,
    pub dtype: String,
    pub samples: Vec<MaterializedEntry>,
}

/// Writes every sample of `set` as little-endian f32 (`sample_NNNNNN.f32`)
/// plus `index.json`.
pub fn materialize(
    records: &[CellRecord],
    set: &TrainingSet,
    cfg: &AugmentConfig,
    dir: &Path,
) -> Result<MaterializedIndex> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = set
        .keys
        .par_iter()
        .enumerate()
        .map(|(i, key)| {
            let s = make_sample(records, key, cfg)?;
            let file = format!("sample_{i:06}.f32");
            let path = dir.join(&file);
            let bytes: Vec<u8> = s.tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            Ok(MaterializedEntry {
                file,
                class_label: s.class_label,
                category: s.category,
                provenance: s.provenance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = MaterializedIndex {
        shape: vec![cfg.out_size, cfg.out_size, N_CHANNELS],
        dtype: "f32le".into(),
        samples,
    };
    let path = dir.join("index.json");
    let json = serde_json::to_vec_pretty(&index).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{plan_augmentation, ClassPlan, Interp};
    use crate::data::Mask;
    use image::{Rgb, RgbImage};
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell(size: usize, class_label: u8, patient: &str, seed: u64) -> CellRecord {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let rgb = RgbImage::from_fn(size as u32, size as u32, |_, _| {
            Rgb([r.random(), r.random(), r.random()])
        });
        let mid = size as f64 / 2.0;
        let nucleus = Mask::from_fn(size, size, |y, x| {
            (y as f64 - mid).hypot(x as f64 - mid) < size as f64 / 8.0
        });
        let cytoplasm = Mask::from_fn(size, size, |y, x| {
            nucleus.get(y, x) == 0 && (y as f64 - mid).hypot(x as f64 - mid) < size as f64 / 3.0
        });
        CellRecord {
            rgb,
            nucleus,
            cytoplasm,
            class_label,
            category: Category::of_class(class_label),
            patient_id: patient.into(),
        }
    }

    fn small_cfg() -> AugmentConfig {
        AugmentConfig {
            patch_size: 16,
            max_translation: 3,
            target_per_class: 12,
            out_size: 32,
            seed: 5,
            rotation_interp: Interp::Bilinear,
        }
    }

    #[test]
    fn one_cell_enumerates_rotations_and_translations() {
        let records = vec![cell(24, 1, "a", 1)];
        let plan = AugmentPlan {
            target_per_class: 12,
            classes: BTreeMap::from([(
                1,
                ClassPlan {
                    source_count: 1,
                    rotations: 4,
                    translations: 3,
                    angle_step: 90.0,
                    extra: 0,
                },
            )]),
        };
        let set = build_training_set(&records, &[0], |c| c.class_label, &plan, &small_cfg()).unwrap();
        assert_eq!(set.len(), 12);
        let mut angles: Vec<f64> = set.keys.iter().map(|k| k.rotation_deg).collect();
        angles.dedup();
        assert_eq!(angles, vec![0.0, 90.0, 180.0, 270.0]);
    }

    fn reference_records() -> Vec<CellRecord> {
        let counts = [74usize, 70, 98, 182, 146, 197, 150];
        let mut out = Vec::new();
        for (i, &n) in counts.iter().enumerate() {
            for j in 0..n {
                out.push(cell(8, i as u8 + 1, &format!("p{i}-{j}"), 0));
            }
        }
        out
    }

    #[test]
    fn full_dataset_counts_are_balanced() {
        let records = reference_records();
        let counts: BTreeMap<u8, usize> = records.iter().fold(BTreeMap::new(), |mut m, r| {
            *m.entry(r.class_label).or_insert(0) += 1;
            m
        });
        let cfg = AugmentConfig::default();
        let plan = plan_augmentation(&counts, &cfg).unwrap();
        let cells: Vec<usize> = (0..records.len()).collect();
        let set = build_training_set(&records, &cells, |c| c.class_label, &plan, &cfg).unwrap();
        for (class, n) in set.counts_by_group() {
            assert_eq!(n, plan.classes[&class].expected());
            assert_eq!(
                n,
                counts[&class] * plan.classes[&class].multiplier() + plan.classes[&class].extra
            );
            assert!((n as f64 - 12000.0).abs() <= 600.0, "class {class}: {n}");
        }
    }

    #[test]
    fn provenance_is_reproducible() {
        let records: Vec<_> = (0..3).map(|i| cell(24, 1 + i as u8, "p", i)).collect();
        let counts = BTreeMap::from([(1, 1), (2, 1), (3, 1)]);
        let cfg = small_cfg();
        let plan = plan_augmentation(&counts, &cfg).unwrap();
        let cells = [0, 1, 2];
        let a = build_training_set(&records, &cells, |c| c.class_label, &plan, &cfg).unwrap();
        let b = build_training_set(&records, &cells, |c| c.class_label, &plan, &cfg).unwrap();
        assert_eq!(a.provenance(&records, &cfg), b.provenance(&records, &cfg));
        let s1 = make_sample(&records, &a.keys[5], &cfg).unwrap();
        let s2 = make_sample(&records, &b.keys[5], &cfg).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.provenance, a.keys[5].provenance(&records, &cfg));
    }

    #[test]
    fn identity_view_is_reachable() {
        let records = vec![cell(40, 4, "p", 2)];
        let cfg = small_cfg();
        let id = identity_sample(&records, 0, &cfg).unwrap();
        let centroid = nucleus_centroid(&records[0].nucleus).unwrap();
        let patch = extract_patch(&records[0], centroid, cfg.patch_size);
        assert_eq!(id.tensor, assemble_sample(&patch, cfg.out_size));
        assert_eq!(id, sample_at(&records, 0, 0.0, (0, 0), &cfg).unwrap());
    }

    #[test]
    fn mask_channels_are_binary_and_rgb_in_unit_range() {
        let records = vec![cell(40, 4, "p", 3)];
        let cfg = small_cfg();
        for deg in [0.0, 33.0, 90.0, 211.5] {
            let s = sample_at(&records, 0, deg, (2, -3), &cfg).unwrap();
            for px in s.tensor.data().chunks(N_CHANNELS) {
                assert!(px[..3].iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(px[3] == 0.0 || px[3] == 1.0);
                assert!(px[4] == 0.0 || px[4] == 1.0);
            }
        }
    }

    fn position_tensor(size: usize) -> Tensor {
        let mut data = Vec::new();
        for i in 0..size {
            for j in 0..size {
                data.extend_from_slice(&[i as f32, j as f32, 0.5, ((i + j) % 2) as f32, 1.0]);
            }
        }
        Tensor::from_vec(&[size, size, N_CHANNELS], data).unwrap()
    }

    #[test]
    fn full_size_crop_only_mirrors() {
        let t = position_tensor(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [false; 2];
        for _ in 0..50 {
            let v = train_view(&t, 8, &mut rng).unwrap();
            let first_col = v.data()[1];
            assert!(first_col == 0.0 || first_col == 7.0);
            seen[(first_col == 7.0) as usize] = true;
            assert_eq!(v.data()[0], 0.0);
        }
        assert_eq!(seen, [true, true]);
    }

    #[test]
    fn crop_offsets_cover_all_positions() {
        let t = position_tensor(256);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = [false; 30];
        let mut cols = [false; 30];
        for _ in 0..2000 {
            let v = train_view(&t, 227, &mut rng).unwrap();
            let d = v.data();
            let oy = d[0] as usize;
            let first = d[1] as usize;
            let last = d[(226) * N_CHANNELS + 1] as usize;
            let ox = first.min(last);
            rows[oy] = true;
            cols[ox] = true;
            assert!(d.chunks(N_CHANNELS).all(|px| px[3] == 0.0 || px[3] == 1.0));
        }
        assert!(rows.iter().all(|&x| x) && cols.iter().all(|&x| x));
        assert!(train_view(&t, 257, &mut rng).is_err());
    }

    #[test]
    fn normalize_cases() {
        let mut t = position_tensor(4);
        let orig = t.clone();
        normalize(&mut t, &[0.0; 5]).unwrap();
        assert_eq!(t, orig);
        normalize(&mut t, &[0.0, 0.0, 0.5, 0.0, 1.0]).unwrap();
        assert!(t.data().chunks(5).all(|px| px[2] == 0.0 && px[4] == 0.0));
        assert!(normalize(&mut t, &[0.0; 3]).is_err());
    }

    #[test]
    fn normalizing_by_own_mean_centres_channels() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..6 * 6 * 5).map(|_| r.random()).collect();
        let mut t = Tensor::from_vec(&[6, 6, 5], data).unwrap();
        let mut means = [0f32; 5];
        for px in t.data().chunks(5) {
            for k in 0..5 {
                means[k] += px[k] / 36.0;
            }
        }
        normalize(&mut t, &means).unwrap();
        for k in 0..5 {
            let m: f64 = t.data().chunks(5).map(|px| px[k] as f64).sum::<f64>() / 36.0;
            assert!(m.abs() < 1e-6, "channel {k}: {m}");
        }
    }

    #[test]
    fn materialized_files_match_samples() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![cell(24, 2, "p", 6)];
        let cfg = small_cfg();
        let plan = plan_augmentation(
            &BTreeMap::from([(2, 1)]),
            &AugmentConfig {
                target_per_class: 2,
                ..cfg.clone()
            },
        )
        .unwrap();
        let set = build_training_set(&records, &[0], |c| c.class_label, &plan, &cfg).unwrap();
        let index = materialize(&records, &set, &cfg, dir.path()).unwrap();
        assert_eq!(index.samples.len(), 2);
        let bytes = std::fs::read(dir.path().join(&index.samples[1].file)).unwrap();
        let floats: Vec<f32> = bytes
            .chunks(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(floats, make_sample(&records, &set.keys[1], &cfg).unwrap().tensor.data());
        assert!(dir.path().join("index.json").exists());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn three_channel_view_is_a_prefix(seed in 0u64..1000, deg in 0.0f64..360.0, oy in 0usize..6, ox in 0usize..6, mirror: bool) {
            let records = vec![cell(30, 5, "p", seed)];
            let cfg = small_cfg();
            let s = sample_at(&records, 0, deg, (1, -1), &cfg).unwrap();
            let five = crop_view(&s.tensor, oy, ox, 26, mirror, 5).unwrap();
            let three = crop_view(&s.tensor, oy, ox, 26, mirror, 3).unwrap();
            prop_assert_eq!(&three, &select_channels(&five, 3).unwrap());
            for (a, b) in three.data().chunks(3).zip(five.data().chunks(5)) {
                prop_assert_eq!(a, &b[..3]);
            }
        }
    }
}
