use super::layers::{build_chain, chain_backward, chain_forward, Cache, Layer, Param};
use super::spec::{ActShape, NetworkSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A built network: layers with parameters, plus the caches of the last
/// training-mode forward pass.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    n_classes: usize,
    layers: Vec<Layer>,
    caches: Option<Vec<Cache>>,
}

impl Network {
    /// Allocates zeroed parameters for a validated spec.
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        let n_classes = spec.validate()?;
        let input = ActShape::Spatial {
            h: spec.input.height,
            w: spec.input.width,
            c: spec.input.channels,
        };
        Ok(Network {
            spec: spec.clone(),
            n_classes,
            layers: build_chain(&spec.layers, input)?,
            caches: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_channels(&self) -> usize {
        self.spec.input.channels
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        let i = self.spec.input;
        match *batch.shape() {
            [b, h, w, c] if b > 0 && h == i.height && w == i.width && c == i.channels => Ok(()),
            ref s => Err(Error::Shape(format!(
                "network expects B x {} x {} x {} input, got {s:?}",
                i.height, i.width, i.channels
            ))),
        }
    }

    /// Training-mode forward pass; keeps activations for [`Network::backward`].
    pub fn forward(&mut self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        let (logits, caches) = chain_forward(&self.layers, batch, true)?;
        self.caches = Some(caches);
        Ok(logits)
    }

    /// Inference without caching; safe to call on a shared network.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        Ok(chain_forward(&self.layers, batch, false)?.0)
    }

    /// Accumulates parameter gradients for the last forward pass and returns
    /// the gradient with respect to the input batch.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let caches = self.caches.take().ok_or_else(|| {
            Error::BackwardWithoutForward(self.layers.last().map(|l| l.name().to_string()).unwrap_or_default())
        })?;
        chain_backward(&mut self.layers, caches, grad_logits)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(|_, p| p.grad.fill(0.0));
    }

    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.visit_params(&mut |name, p| out.push((name, p)));
        }
        out
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Param)) {
        for layer in &mut self.layers {
            layer.visit_params_mut(&mut |name, p| f(&name, p));
        }
    }

    pub fn export_params(&self) -> Vec<(String, Tensor)> {
        self.params().into_iter().map(|(n, p)| (n, p.value.clone())).collect()
    }

    /// Copies parameter values by name. Every parameter must be present with
    /// a matching shape.
    pub fn import_params(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        let mut err = None;
        self.visit_params_mut(|name, p| {
            if err.is_some() {
                return;
            }
            match params.iter().find(|(n, _)| n == name) {
                None => err = Some(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some((_, t)) if t.shape() != p.value.shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, network expects {:?}",
                        t.shape(),
                        p.value.shape()
                    )))
                }
                Some((_, t)) => p.value = t.clone(),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Every layer in depth-first order, concat branches included.
    pub fn all_layers(&self) -> Vec<&Layer> {
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.visit_layers(&mut |l| out.push(l));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::presets;

    #[test]
    fn output_shape_has_one_row_per_sample() {
        let spec = presets::cellnet_s(32, 5, 7);
        let net = Network::build(&spec).unwrap();
        let y = net.infer(&Tensor::zeros(&[3, 32, 32, 5])).unwrap();
        assert_eq!(y.shape(), &[3, 7]);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = Network::build(&presets::cellnet_s(32, 5, 2)).unwrap();
        assert!(net.infer(&Tensor::zeros(&[1, 32, 32, 3])).is_err());
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = Network::build(&presets::cellnet_s(32, 3, 2)).unwrap();
        assert!(matches!(
            net.backward(&Tensor::zeros(&[1, 2])),
            Err(Error::BackwardWithoutForward(_))
        ));
    }
}
