//! Weight initialization: from scratch, or transfer-style where the first
//! convolution and the last few fully connected layers are drawn fresh and
//! everything else is copied from a checkpoint.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::layers::Layer;
use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Scratch,
    Transfer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitPolicy {
    pub mode: InitMode,
    pub checkpoint: Option<PathBuf>,
    /// How many trailing fully connected layers (the task head included) are re-drawn.
    pub random_fc_layers: usize,
    pub gaussian_std: f32,
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy {
            mode: InitMode::Scratch,
            checkpoint: None,
            random_fc_layers: 1,
            gaussian_std: 0.01,
        }
    }
}

/// Names of the layers that a transfer initialization draws at random.
pub fn random_init_layers(net: &Network, random_fc_layers: usize) -> BTreeSet<String> {
    let layers = net.all_layers();
    let mut set = BTreeSet::new();
    if let Some(first) = layers.iter().find(|l| matches!(l, Layer::Conv2d(_))) {
        set.insert(first.name().to_string());
    }
    let fcs: Vec<&&Layer> = layers.iter().filter(|l| matches!(l, Layer::Fc(_))).collect();
    for l in fcs.iter().rev().take(random_fc_layers) {
        set.insert(l.name().to_string());
    }
    set
}

fn layer_of(param: &str) -> &str {
    param.rsplit_once('.').map_or(param, |(layer, _)| layer)
}

pub fn init_weights(net: &mut Network, policy: &InitPolicy, rng: &mut impl Rng) -> Result<()> {
    match policy.mode {
        InitMode::Scratch => init_with_source(net, policy, None, rng),
        InitMode::Transfer => {
            let path = policy
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("transfer init needs `checkpoint`".into()))?;
            let ckpt = Checkpoint::load(path)?;
            init_with_source(net, policy, Some(&ckpt.params), rng)
        }
    }
}

/// As [`init_weights`], with the transfer source given directly. `None` means
/// every layer is drawn at random.
pub fn init_with_source(
    net: &mut Network,
    policy: &InitPolicy,
    source: Option<&[(String, Tensor)]>,
    rng: &mut impl Rng,
) -> Result<()> {
    if !(policy.gaussian_std.is_finite() && policy.gaussian_std >= 0.0) {
        return Err(Error::Config(format!(
            "gaussian_std must be >= 0, got {}",
            policy.gaussian_std
        )));
    }
    let normal = Normal::new(0.0f32, policy.gaussian_std).map_err(|e| Error::Config(e.to_string()))?;
    let fresh = random_init_layers(net, policy.random_fc_layers);
    // Validate before touching anything so a failure leaves the network as it was.
    if let Some(src) = source {
        for (name, p) in net.params() {
            if fresh.contains(layer_of(&name)) {
                continue;
            }
            match src.iter().find(|(n, _)| *n == name) {
                None => {
                    return Err(Error::Checkpoint(format!(
                        "layer `{}` is not in the checkpoint (missing `{name}`)",
                        layer_of(&name)
                    )))
                }
                Some((_, t)) if t.shape() != p.value.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "layer `{}`: checkpoint `{name}` has shape {:?}, network expects {:?}",
                        layer_of(&name),
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
    }
    net.visit_params_mut(|name, p| {
        p.grad.fill(0.0);
        let random = source.is_none() || fresh.contains(layer_of(name));
        if random {
            if name.ends_with(".bias") {
                p.value.fill(0.0);
            } else {
                p.value.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
            }
        } else if let Some((_, t)) = source.and_then(|s| s.iter().find(|(n, _)| n == name)) {
            p.value = t.clone();
        }
    });
    Ok(())
}
