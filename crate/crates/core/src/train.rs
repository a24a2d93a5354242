//! Mini-batch SGD with momentum, weight decay and a step learning-rate
//! schedule.
//!
//! An epoch is one pass over the augmented training keys in a seeded random
//! order. Each sample is built from its key, randomly cropped and mirrored,
//! reduced to the configured channels and mean-subtracted. Validation
//! accuracy uses the center crop of each validation cell's unshifted view.

use std::fmt::Write as _;
use std::fs;
use std::ops::{Add, Mul, Sub};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{
    crop_view, identity_sample, make_sample, normalize, train_view, AugmentConfig, TrainingSet, N_CHANNELS,
};
use crate::data::{CellRecord, Task};
use crate::error::{Error, Result};
use crate::nn::{loss_softmax_xent, Checkpoint, Network, Tensor};
use crate::rng;

pub const TRAIN_PRESETS: &[&str] = &["alexnet-t", "googlenet-t", "resnet-t", "densenet-t", "cellnet-s"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs between learning-rate drops.
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Side of the square training crop.
    pub crop: usize,
    pub seed: u64,
    /// Micro-batches per SGD step; a step still averages over `batch_size`
    /// samples. 1 disables accumulation.
    pub accumulate: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset("cellnet-s").expect("cellnet-s preset exists")
    }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let base = |batch_size, base_lr, weight_decay, crop| TrainConfig {
            epochs: 30,
            batch_size,
            base_lr,
            lr_decay_factor: 10.0,
            lr_decay_every: 10,
            momentum: 0.9,
            weight_decay,
            crop,
            seed: 0,
            accumulate: 1,
        };
        Some(match name {
            "alexnet-t" => base(256, 0.01, 0.0005, 227),
            "googlenet-t" => base(32, 0.005, 0.0002, 224),
            "resnet-t" => base(20, 0.01, 0.0002, 224),
            "densenet-t" => base(12, 0.01, 0.0002, 224),
            "cellnet-s" => base(32, 0.02, 0.0005, 56),
            _ => return None,
        })
    }

    pub fn validate(&self, sample_size: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train.{m}")));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.accumulate == 0 || self.accumulate > self.batch_size {
            return fail(format!("accumulate must be in 1..=batch_size, got {}", self.accumulate));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be >= 0, got {}", self.base_lr));
        }
        if !self.lr_decay_factor.is_finite() || self.lr_decay_factor <= 0.0 || self.lr_decay_every == 0 {
            return fail("lr_decay_factor and lr_decay_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.crop == 0 || self.crop > sample_size {
            return fail(format!("crop {} must be in 1..={sample_size}", self.crop));
        }
        Ok(())
    }
}

/// `base_lr / decay_factor ^ floor(epoch / decay_every)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.base_lr / cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// One SGD update: `v <- momentum * v - lr * (g + weight_decay * w)`, then
/// `w <- w + v`.
pub fn sgd_step<T>(w: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: T, weight_decay: T) -> Result<()>
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Mul<Output = T>,
{
    if w.len() != g.len() || w.len() != v.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} weights, {} gradients, {} velocities",
            w.len(),
            g.len(),
            v.len()
        )));
    }
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = momentum * *vi - lr * (gi + weight_decay * *wi);
        *wi = *wi + *vi;
    }
    Ok(())
}

/// Momentum buffers, one per parameter, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<(String, Tensor)>,
}

impl Sgd {
    pub fn new(net: &Network) -> Self {
        Sgd {
            velocity: net
                .params()
                .into_iter()
                .map(|(n, p)| (n, Tensor::zeros(p.value.shape())))
                .collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        let mut result = Ok(());
        let mut i = 0;
        let velocity = &mut self.velocity;
        net.visit_params_mut(|name, p| {
            if result.is_err() {
                return;
            }
            match velocity.get_mut(i) {
                Some((vn, v)) if vn == name => {
                    result = sgd_step(
                        p.value.data_mut(),
                        p.grad.data(),
                        v.data_mut(),
                        lr as f32,
                        momentum as f32,
                        weight_decay as f32,
                    );
                }
                _ => {
                    result = Err(Error::Shape(format!(
                        "optimizer state does not match parameter `{name}`"
                    )))
                }
            }
            i += 1;
        });
        result
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when there are no validation cells.
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            let val = e.val_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.lr, e.train_loss, e.train_acc, val);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Everything the loop needs besides the network and its configuration.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub records: &'a [CellRecord],
    pub train: &'a TrainingSet,
    pub val_cells: &'a [usize],
    pub augment: &'a AugmentConfig,
    pub task: Task,
    /// 3 (RGB) or 5 (RGB plus masks).
    pub channels: usize,
    /// Five per-channel means from the training cells.
    pub means: [f32; N_CHANNELS],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the highest validation accuracy (the
    /// latest such epoch on ties; the last epoch without validation data).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub last: Checkpoint,
    pub history: History,
}

const EVAL_CHUNK: usize = 64;

fn stack(views: Vec<Tensor>) -> Result<Tensor> {
    let shape = views.first().ok_or(Error::EmptyInput("batch"))?.shape().to_vec();
    let mut data = Vec::with_capacity(views.len() * views[0].len());
    for v in &views {
        data.extend_from_slice(v.data());
    }
    let mut full = vec![views.len()];
    full.extend(shape);
    Tensor::from_vec(&full, data)
}

/// Center crop of the unshifted, unrotated view, normalized.
pub fn center_view(data: &TrainData<'_>, cell: usize, crop: usize) -> Result<Tensor> {
    let s = identity_sample(data.records, cell, data.augment)?;
    let off = (data.augment.out_size - crop) / 2;
    let mut v = crop_view(&s.tensor, off, off, crop, false, data.channels)?;
    normalize(&mut v, &data.means)?;
    Ok(v)
}

/// Argmax with ties to the lowest index.
pub fn argmax<T: PartialOrd>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `views` whose argmax logit equals the label.
fn accuracy(net: &Network, views: &[Tensor], labels: &[usize]) -> Result<f64> {
    let correct = views
        .par_chunks(EVAL_CHUNK)
        .zip(labels.par_chunks(EVAL_CHUNK))
        .map(|(vs, ls)| {
            let logits = net.infer(&stack(vs.to_vec())?)?;
            let n = net.n_classes();
            Ok(logits
                .data()
                .chunks(n)
                .zip(ls)
                .filter(|(row, &l)| argmax(row) == l)
                .count())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / views.len() as f64)
}

fn snapshot(net: &Network, sgd: &Sgd, data: &TrainData<'_>, epoch: usize, val_acc: Option<f64>) -> Checkpoint {
    let mut ckpt = Checkpoint::from_network(net);
    ckpt.velocity = sgd.velocity.clone();
    ckpt.norm_means = Some(data.means.to_vec());
    ckpt.metadata = serde_json::json!({
        "epoch": epoch,
        "val_acc": val_acc,
        "task": data.task.to_string(),
        "channels": data.channels,
    });
    ckpt
}

/// Runs `cfg.epochs` epochs of SGD on `net`, whose parameters must already be
/// initialized.
pub fn train(net: &mut Network, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(data.augment.out_size)?;
    if data.train.is_empty() {
        return Err(Error::EmptyInput("training stream"));
    }
    let input = net.spec().input;
    if input.channels != data.channels || input.height != cfg.crop || input.width != cfg.crop {
        return Err(Error::Config(format!(
            "network input {}x{}x{} does not match crop {} with {} channels",
            input.height, input.width, input.channels, cfg.crop, data.channels
        )));
    }
    if net.n_classes() != data.task.n_classes() {
        return Err(Error::Config(format!(
            "network has {} outputs but task {} needs {}",
            net.n_classes(),
            data.task,
            data.task.n_classes()
        )));
    }

    let val_views = data
        .val_cells
        .par_iter()
        .map(|&c| center_view(data, c, cfg.crop))
        .collect::<Result<Vec<_>>>()?;
    let val_labels: Vec<usize> = data
        .val_cells
        .iter()
        .map(|&c| data.task.target(data.records[c].class_label))
        .collect();

    let mut sgd = Sgd::new(net);
    let mut history = History::default();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let micro = cfg.batch_size.div_ceil(cfg.accumulate);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::TAG_SHUFFLE, epoch as u64]));

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            net.zero_grad();
            for chunk in batch.chunks(micro) {
                let views = chunk
                    .par_iter()
                    .map(|&i| {
                        let key = &data.train.keys[i];
                        let s = make_sample(data.records, key, data.augment)?;
                        let mut r = rng::stream(cfg.seed, &[rng::TAG_VIEW, epoch as u64, i as u64]);
                        let v = train_view(&s.tensor, cfg.crop, &mut r)?;
                        let mut v = crop_view(&v, 0, 0, cfg.crop, false, data.channels)?;
                        normalize(&mut v, &data.means)?;
                        Ok(v)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let labels: Vec<usize> = chunk
                    .iter()
                    .map(|&i| data.task.target(data.records[data.train.keys[i].cell].class_label))
                    .collect();
                let logits = net.forward(&stack(views)?)?;
                let (loss, mut grad) = loss_softmax_xent(&logits, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss is {loss} at epoch {epoch}, batch {b} (lr {lr})"
                    )));
                }
                let scale = chunk.len() as f32 / batch.len() as f32;
                if scale != 1.0 {
                    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
                }
                net.backward(&grad)?;
                loss_sum += loss * chunk.len() as f64;
                let n = net.n_classes();
                correct += logits
                    .data()
                    .chunks(n)
                    .zip(&labels)
                    .filter(|(row, &l)| argmax(row) == l)
                    .count();
            }
            sgd.step(net, lr, cfg.momentum, cfg.weight_decay)?;
        }
        let total = data.train.len() as f64;
        let val_acc = if val_views.is_empty() {
            None
        } else {
            Some(accuracy(net, &val_views, &val_labels)?)
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / total,
            train_acc: correct as f64 / total,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: lr {lr} loss {:.4} train_acc {:.4} val_acc {}",
            record.train_loss,
            record.train_acc,
            val_acc.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        history.epochs.push(record);
        let score = val_acc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score >= *s) {
            best = Some((score, epoch, snapshot(net, &sgd, data, epoch, val_acc)));
        }
    }
    let last_epoch = cfg.epochs - 1;
    let last = snapshot(net, &sgd, data, last_epoch, history.last().and_then(|e| e.val_acc));
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{build_training_set, channel_means, plan_augmentation};
    use crate::data::{decode_all, generate_synthetic, LabelColorMap, SynthSpec};
    use crate::nn::{init_with_source, presets, InitPolicy};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn cfg(base_lr: f64) -> TrainConfig {
        TrainConfig {
            base_lr,
            ..TrainConfig::preset("alexnet-t").unwrap()
        }
    }

    #[test]
    fn schedule_drops_tenfold_every_ten_epochs() {
        let c = cfg(0.01);
        assert_eq!(lr_at(&c, 0), 0.01);
        assert_eq!(lr_at(&c, 9), 0.01);
        assert!((lr_at(&c, 10) - 0.001).abs() < 1e-15);
        assert!((lr_at(&c, 29) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn presets_match_reference_recipes() {
        let table = [
            ("alexnet-t", 256, 0.01, 0.0005, 227),
            ("googlenet-t", 32, 0.005, 0.0002, 224),
            ("resnet-t", 20, 0.01, 0.0002, 224),
            ("densenet-t", 12, 0.01, 0.0002, 224),
        ];
        for (name, batch, lr, wd, crop) in table {
            let p = TrainConfig::preset(name).unwrap();
            assert_eq!(
                (p.batch_size, p.base_lr, p.weight_decay, p.crop),
                (batch, lr, wd, crop),
                "{name}"
            );
            assert_eq!(
                (p.epochs, p.momentum, p.lr_decay_factor, p.lr_decay_every),
                (30, 0.9, 10.0, 10)
            );
        }
        assert!(TrainConfig::preset("vgg").is_none());
        for name in TRAIN_PRESETS {
            TrainConfig::preset(name).unwrap().validate(256).unwrap();
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = TrainConfig::default();
        ok.validate(64).unwrap();
        assert!(TrainConfig { crop: 65, ..ok.clone() }.validate(64).is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..ok.clone()
        }
        .validate(64)
        .is_err());
        assert!(TrainConfig {
            accumulate: 0,
            ..ok.clone()
        }
        .validate(64)
        .is_err());
        assert!(TrainConfig {
            momentum: 1.0,
            ..ok.clone()
        }
        .validate(64)
        .is_err());
        assert!(TrainConfig {
            base_lr: f64::NAN,
            ..ok
        }
        .validate(64)
        .is_err());
    }

    #[test]
    fn zero_gradient_without_decay_leaves_weights() {
        let mut w = vec![0.3f32, -1.0, 2.0];
        let mut v = vec![0.0f32; 3];
        sgd_step(&mut w, &[0.0; 3], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(w, vec![0.3, -1.0, 2.0]);
        assert!(sgd_step(&mut w, &[0.0; 2], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut w = vec![1.0f64, 2.0];
        let mut v = vec![0.0f64; 2];
        sgd_step(&mut w, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(w, vec![1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_form() {
        let (w0, g, lr, mu) = (0.7f64, 0.25f64, 0.01f64, 0.9f64);
        let mut w = [w0];
        let mut v = [0.0];
        sgd_step(&mut w, &[g], &mut v, lr, mu, 0.0).unwrap();
        sgd_step(&mut w, &[g], &mut v, lr, mu, 0.0).unwrap();
        assert!((w[0] - (w0 - lr * g * (1.0 + (1.0 + mu)))).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn schedule_has_one_value_per_decay_window(epochs in 1usize..80, every in 1usize..15) {
            let c = TrainConfig { epochs, lr_decay_every: every, ..cfg(0.01) };
            let distinct: BTreeSet<u64> = (0..epochs).map(|e| lr_at(&c, e).to_bits()).collect();
            prop_assert!(distinct.len() == epochs.div_ceil(every));
            for e in 1..epochs {
                prop_assert!(lr_at(&c, e) <= lr_at(&c, e - 1));
            }
        }

        #[test]
        fn weight_decay_alone_shrinks_weights(seed: u64, wd in 1e-4f64..1e-2, lr in 1e-3f64..0.1, heavy: bool) {
            // With momentum the decay is only monotone while overdamped,
            // lr * wd < (1 - sqrt(0.9))^2 ~ 2.6e-3.
            let momentum = if heavy { 0.9 } else { 0.0 };
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut w: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
            let mut v = vec![0.0; 16];
            let norm = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>();
            for _ in 0..30 {
                let before = norm(&w);
                sgd_step(&mut w, &[0.0; 16], &mut v, lr, momentum, wd).unwrap();
                prop_assert!(norm(&w) < before);
            }
        }
    }

    struct Fixture {
        _dir: tempfile::TempDir,
        records: Vec<CellRecord>,
        set: TrainingSet,
        val: Vec<usize>,
        augment: AugmentConfig,
        means: [f32; N_CHANNELS],
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_cells: 40,
            image_size: 32,
            ..Default::default()
        };
        let (manifest, _) = generate_synthetic(&spec, &LabelColorMap::default(), dir.path()).unwrap();
        let records = decode_all(&manifest, &LabelColorMap::default()).unwrap();
        let augment = AugmentConfig {
            patch_size: 32,
            max_translation: 2,
            target_per_class: 30,
            out_size: 32,
            seed: 3,
            ..Default::default()
        };
        let train_cells: Vec<usize> = (0..30).collect();
        let mut counts = BTreeMap::new();
        for &c in &train_cells {
            *counts
                .entry(Task::TwoClass.target(records[c].class_label) as u8)
                .or_insert(0) += 1;
        }
        let plan = plan_augmentation(&counts, &augment).unwrap();
        let set = build_training_set(
            &records,
            &train_cells,
            |r| Task::TwoClass.target(r.class_label) as u8,
            &plan,
            &augment,
        )
        .unwrap();
        let means = channel_means(&records, &train_cells, &augment).unwrap();
        Fixture {
            _dir: dir,
            records,
            set,
            val: (30..40).collect(),
            augment,
            means,
        }
    }

    fn small_cfg(epochs: usize, base_lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            base_lr,
            crop: 28,
            seed: 4,
            ..Default::default()
        }
    }

    fn network(channels: usize) -> Network {
        let mut net = Network::build(&presets::cellnet_s(28, channels, 2)).unwrap();
        let policy = InitPolicy {
            gaussian_std: 0.1,
            ..Default::default()
        };
        init_with_source(&mut net, &policy, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        net
    }

    fn data(f: &Fixture) -> TrainData<'_> {
        TrainData {
            records: &f.records,
            train: &f.set,
            val_cells: &f.val,
            augment: &f.augment,
            task: Task::TwoClass,
            channels: 5,
            means: f.means,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let f = fixture();
        let mut net = network(5);
        let before = net.export_params();
        let out = train(&mut net, &data(&f), &small_cfg(1, 0.0)).unwrap();
        assert_eq!(net.export_params(), before);
        assert_eq!(out.history.epochs.len(), 1);
        assert!(out.history.epochs[0].val_acc.is_some());
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let f = fixture();
        let run = || {
            let mut net = network(5);
            let out = train(&mut net, &data(&f), &small_cfg(3, 0.02)).unwrap();
            (out.history.to_csv(), out.last.to_bytes(), out.best.to_bytes())
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.0.lines().next().unwrap(), "epoch,lr,train_loss,train_acc,val_acc");
        assert_eq!(a.0.lines().count(), 4);
    }

    #[test]
    fn accumulation_matches_full_batch() {
        let f = fixture();
        let mut a = network(5);
        let mut b = network(5);
        train(&mut a, &data(&f), &small_cfg(1, 0.02)).unwrap();
        let cfg = TrainConfig {
            accumulate: 4,
            ..small_cfg(1, 0.02)
        };
        train(&mut b, &data(&f), &cfg).unwrap();
        for ((n, x), (_, y)) in a.export_params().iter().zip(b.export_params()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() <= 1e-5 * (1.0 + p.abs()), "{n}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn mismatched_network_is_rejected() {
        let f = fixture();
        let mut net = network(3);
        assert!(matches!(
            train(&mut net, &data(&f), &small_cfg(1, 0.01)),
            Err(Error::Config(_))
        ));
        let empty = TrainingSet::default();
        let d = TrainData {
            train: &empty,
            ..data(&f)
        };
        assert!(matches!(
            train(&mut network(5), &d, &small_cfg(1, 0.01)),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    #[cfg_attr(debug_assertions, should_panic(expected = "non-finite value"))]
    fn diverging_loss_aborts() {
        let f = fixture();
        let mut net = network(5);
        let err = train(&mut net, &data(&f), &small_cfg(2, 1e12)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn full_batch_loss_decreases_on_separable_toy() {
        let spec = crate::nn::NetworkSpec::from_json(
            r#"{"input":{"height":2,"width":2,"channels":3},
                "layers":[{"name":"fc1","kind":"fc","out_dim":8},{"name":"r","kind":"relu"},
                          {"name":"out","kind":"softmax_output","n_classes":2}]}"#,
        )
        .unwrap();
        let mut net = Network::build(&spec).unwrap();
        let policy = InitPolicy {
            gaussian_std: 0.3,
            ..Default::default()
        };
        init_with_source(&mut net, &policy, None, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let n = 16;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data: Vec<f32> = labels
            .iter()
            .flat_map(|&l| {
                let shift = if l == 1 { 1.0 } else { -1.0 };
                (0..12)
                    .map(|_| shift + r.random_range(-0.3f32..0.3))
                    .collect::<Vec<_>>()
            })
            .collect();
        let x = Tensor::from_vec(&[n, 2, 2, 3], data).unwrap();
        let mut sgd = Sgd::new(&net);
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            net.zero_grad();
            let logits = net.forward(&x).unwrap();
            let (loss, grad) = loss_softmax_xent(&logits, &labels).unwrap();
            assert!(loss < prev, "{loss} !< {prev}");
            prev = loss;
            net.backward(&grad).unwrap();
            sgd.step(&mut net, 0.05, 0.0, 0.0).unwrap();
        }
    }
}
