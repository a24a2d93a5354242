//! Shipped architectures.
//!
//! `cellnet-s` is a small scratch network sized for CPU training;
//! `cellnet-i` adds one inception-style block that concatenates 1x1, 3x3 and
//! 5x5 branches.

use super::spec::{InputSpec, LayerKind, LayerSpec, NetworkSpec};

pub const PRESET_NAMES: &[&str] = &["cellnet-s", "cellnet-i"];

fn l(name: &str, kind: LayerKind) -> LayerSpec {
    LayerSpec {
        name: name.to_string(),
        kind,
    }
}

fn conv(name: &str, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> LayerSpec {
    l(
        name,
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            pad,
        },
    )
}

fn relu(name: &str) -> LayerSpec {
    l(name, LayerKind::Relu)
}

fn input(size: usize, channels: usize) -> InputSpec {
    InputSpec {
        height: size,
        width: size,
        channels,
    }
}

pub fn cellnet_s(size: usize, channels: usize, n_classes: usize) -> NetworkSpec {
    NetworkSpec {
        input: input(size, channels),
        layers: vec![
            conv("conv1", 12, 5, 2, 2),
            relu("relu1"),
            conv("conv2", 16, 3, 1, 1),
            relu("relu2"),
            l("pool2", LayerKind::Maxpool { kernel: 2, stride: 2 }),
            conv("conv3", 24, 3, 1, 1),
            relu("relu3"),
            l("gap", LayerKind::GlobalAvgPool),
            l("fc4", LayerKind::Fc { out_dim: 32 }),
            relu("relu4"),
            l("out", LayerKind::SoftmaxOutput { n_classes }),
        ],
    }
}

pub fn cellnet_i(size: usize, channels: usize, n_classes: usize) -> NetworkSpec {
    NetworkSpec {
        input: input(size, channels),
        layers: vec![
            conv("conv1", 16, 5, 2, 2),
            relu("relu1"),
            l("pool1", LayerKind::Maxpool { kernel: 2, stride: 2 }),
            l(
                "inception",
                LayerKind::Concat {
                    branches: vec![
                        vec![conv("inc_1x1", 8, 1, 1, 0)],
                        vec![
                            conv("inc_3x3_reduce", 8, 1, 1, 0),
                            relu("inc_3x3_relu"),
                            conv("inc_3x3", 16, 3, 1, 1),
                        ],
                        vec![conv("inc_5x5", 8, 5, 1, 2)],
                    ],
                },
            ),
            relu("relu2"),
            l("gap", LayerKind::GlobalAvgPool),
            l("fc3", LayerKind::Fc { out_dim: 32 }),
            relu("relu3"),
            l("out", LayerKind::SoftmaxOutput { n_classes }),
        ],
    }
}

pub fn by_name(name: &str, size: usize, channels: usize, n_classes: usize) -> Option<NetworkSpec> {
    match name {
        "cellnet-s" => Some(cellnet_s(size, channels, n_classes)),
        "cellnet-i" => Some(cellnet_i(size, channels, n_classes)),
        _ => None,
    }
}
