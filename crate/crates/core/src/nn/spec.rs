//! Declarative network description, stored as JSON.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Fc {
        out_dim: usize,
    },
    /// Runs every branch on the same input and stacks the outputs along channels.
    Concat {
        branches: Vec<Vec<LayerSpec>>,
    },
    GlobalAvgPool,
    /// Task head: a fully connected layer producing `n_classes` logits.
    SoftmaxOutput {
        n_classes: usize,
    },
    /// Reserved keyword; not implemented.
    BatchNorm,
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Maxpool { .. } => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Concat { .. } => "concat",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::SoftmaxOutput { .. } => "softmax_output",
            LayerKind::BatchNorm => "batch_norm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
}

/// Activation shape between layers, excluding the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Spatial { h, w, c } => h * w * c,
            ActShape::Flat(n) => n,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { h, w, c } => vec![h, w, c],
            ActShape::Flat(n) => vec![n],
        }
    }
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn diag(layer: &LayerSpec, msg: impl std::fmt::Display) -> Error {
    Error::Shape(format!("layer `{}` ({}): {msg}", layer.name, layer.kind.label()))
}

/// Output shape of a single layer applied to `input`.
pub(crate) fn infer_layer(layer: &LayerSpec, input: ActShape) -> Result<ActShape> {
    match (&layer.kind, input) {
        (
            &LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                pad,
            },
            ActShape::Spatial { h, w, .. },
        ) => {
            if out_channels == 0 {
                return Err(diag(layer, "out_channels must be positive"));
            }
            let (oh, ow) = conv_out(h, kernel, stride, pad)
                .zip(conv_out(w, kernel, stride, pad))
                .ok_or_else(|| {
                    diag(
                        layer,
                        format!("kernel {kernel} / stride {stride} / pad {pad} does not fit input {h}x{w}"),
                    )
                })?;
            Ok(ActShape::Spatial {
                h: oh,
                w: ow,
                c: out_channels,
            })
        }
        (&LayerKind::Maxpool { kernel, stride }, ActShape::Spatial { h, w, c }) => {
            let (oh, ow) = conv_out(h, kernel, stride, 0)
                .zip(conv_out(w, kernel, stride, 0))
                .ok_or_else(|| {
                    diag(
                        layer,
                        format!("window {kernel} / stride {stride} does not fit input {h}x{w}"),
                    )
                })?;
            Ok(ActShape::Spatial { h: oh, w: ow, c })
        }
        (LayerKind::Conv2d { .. } | LayerKind::Maxpool { .. }, ActShape::Flat(n)) => Err(diag(
            layer,
            format!("needs a spatial input but receives a flat vector of {n}"),
        )),
        (LayerKind::Relu, s) => Ok(s),
        (&LayerKind::Fc { out_dim }, _) => {
            if out_dim == 0 {
                return Err(diag(layer, "out_dim must be positive"));
            }
            Ok(ActShape::Flat(out_dim))
        }
        (&LayerKind::SoftmaxOutput { n_classes }, _) => {
            if n_classes == 0 {
                return Err(diag(layer, "n_classes must be positive"));
            }
            Ok(ActShape::Flat(n_classes))
        }
        (LayerKind::GlobalAvgPool, ActShape::Spatial { c, .. }) => Ok(ActShape::Flat(c)),
        (LayerKind::GlobalAvgPool, ActShape::Flat(_)) => Err(diag(layer, "needs a spatial input")),
        (LayerKind::Concat { branches }, s) => {
            let ActShape::Spatial { h, w, .. } = s else {
                return Err(diag(layer, "needs a spatial input"));
            };
            if branches.is_empty() {
                return Err(diag(layer, "has no branches"));
            }
            let mut channels = 0;
            for (i, branch) in branches.iter().enumerate() {
                match infer_chain(branch, s)? {
                    ActShape::Spatial { h: bh, w: bw, c } if bh == h && bw == w => channels += c,
                    other => {
                        return Err(diag(
                            layer,
                            format!("branch {i} yields {:?}, expected spatial {h}x{w}", other.dims()),
                        ))
                    }
                }
            }
            Ok(ActShape::Spatial { h, w, c: channels })
        }
        (LayerKind::BatchNorm, _) => Err(diag(layer, "batch_norm is reserved but not supported")),
    }
}

pub(crate) fn infer_chain(layers: &[LayerSpec], mut shape: ActShape) -> Result<ActShape> {
    for layer in layers {
        shape = infer_layer(layer, shape)?;
    }
    Ok(shape)
}

fn collect_names<'a>(layers: &'a [LayerSpec], seen: &mut BTreeSet<&'a str>) -> Result<()> {
    for layer in layers {
        if layer.name.is_empty() {
            return Err(Error::Shape(format!("unnamed {} layer", layer.kind.label())));
        }
        if !seen.insert(&layer.name) {
            return Err(Error::Shape(format!("duplicate layer name `{}`", layer.name)));
        }
        if let LayerKind::Concat { branches } = &layer.kind {
            for b in branches {
                collect_names(b, seen)?;
            }
        }
    }
    Ok(())
}

fn contains_head(layers: &[LayerSpec]) -> bool {
    layers.iter().any(|l| match &l.kind {
        LayerKind::SoftmaxOutput { .. } => true,
        LayerKind::Concat { branches } => branches.iter().any(|b| contains_head(b)),
        _ => false,
    })
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("network spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network spec serializes")
    }

    /// Checks the shape chain and the structural rules, returning the number of classes.
    pub fn validate(&self) -> Result<usize> {
        let InputSpec {
            height,
            width,
            channels,
        } = self.input;
        if !(channels == 3 || channels == 5) {
            return Err(Error::Shape(format!("input channels must be 3 or 5, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape("input height and width must be positive".into()));
        }
        let (last, body) = self
            .layers
            .split_last()
            .ok_or_else(|| Error::Shape("network has no layers".into()))?;
        collect_names(&self.layers, &mut BTreeSet::new())?;
        let n_classes = match last.kind {
            LayerKind::SoftmaxOutput { n_classes } if n_classes == 2 || n_classes == 7 => n_classes,
            LayerKind::SoftmaxOutput { n_classes } => {
                return Err(diag(last, format!("output width must be 2 or 7, got {n_classes}")))
            }
            _ => return Err(diag(last, "final layer must be softmax_output")),
        };
        if contains_head(body) {
            return Err(Error::Shape("softmax_output may only appear as the final layer".into()));
        }
        let out = infer_chain(
            &self.layers,
            ActShape::Spatial {
                h: height,
                w: width,
                c: channels,
            },
        )?;
        debug_assert_eq!(out, ActShape::Flat(n_classes));
        Ok(n_classes)
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.layers.last()?.kind {
            LayerKind::SoftmaxOutput { n_classes } => Some(n_classes),
            _ => None,
        }
    }
}
