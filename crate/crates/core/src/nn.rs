//! Tanh multilayer perceptrons with a linear output layer.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Layer widths, input first. Hidden layers use `tanh`, the last layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MlpSpec {
    dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::validation(format!(
                "an MLP needs at least two widths, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::validation(format!("zero layer width in {dims:?}")));
        }
        Ok(MlpSpec { dims })
    }

    /// `2 -> 128 -> 128 -> 128 -> 1`
    pub fn encoder() -> Self {
        MlpSpec {
            dims: vec![2, 128, 128, 128, 1],
        }
    }

    /// `1 -> 128 -> 128 -> 2`
    pub fn decoder() -> Self {
        MlpSpec {
            dims: vec![1, 128, 128, 2],
        }
    }

    /// `1 -> 64 -> 64 -> 1`
    pub fn latent() -> Self {
        MlpSpec {
            dims: vec![1, 64, 64, 1],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.dims.clone()).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl MlpParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let layers = spec
            .dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let weight: Vec<f32> = (0..fan_out * fan_in).map(|_| dist.sample(rng)).collect();
                let bias: Vec<f32> = (0..fan_out).map(|_| dist.sample(rng)).collect();
                Layer {
                    weight: Tensor::matrix(fan_out, fan_in, weight).expect("sized above"),
                    bias: Tensor::vector(bias),
                }
            })
            .collect();
        MlpParams {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .dims
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(&[w[1], w[0]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        MlpParams {
            spec: spec.clone(),
            layers,
        }
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        if layers.len() != spec.num_layers() {
            return Err(Error::validation(format!(
                "spec {:?} needs {} layers, got {}",
                spec.dims,
                spec.num_layers(),
                layers.len()
            )));
        }
        for (k, (layer, w)) in layers.iter().zip(spec.dims.windows(2)).enumerate() {
            if layer.weight.shape() != [w[1], w[0]] || layer.bias.shape() != [w[1]] {
                return Err(Error::validation(format!(
                    "layer {k}: weight {:?} / bias {:?} do not match widths {} -> {}",
                    layer.weight.shape(),
                    layer.bias.shape(),
                    w[0],
                    w[1]
                )));
            }
            if !layer.weight.all_finite() || !layer.bias.all_finite() {
                return Err(Error::validation(format!("layer {k}: non-finite entries")));
            }
        }
        Ok(MlpParams { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in a fixed order: `W_0, b_0, W_1, b_1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// Records the parameters as trainable leaves.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        self.record(tape, true)
    }

    /// Records the parameters as constants.
    pub fn register_frozen(&self, tape: &mut Tape) -> MlpVars {
        self.record(tape, false)
    }

    fn record(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        MlpVars { layers }
    }

    /// Double-precision forward pass on the stored `f32` weights.
    pub fn forward_f64(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.spec.input_dim(), "input width");
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = affine_f64(layer, &h);
            if k < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = z;
        }
        h
    }

    /// Output and its derivative with respect to a scalar input, in `f64`.
    pub fn forward_with_derivative_f64(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(self.spec.input_dim(), 1, "derivative needs a scalar input");
        let mut h = vec![x];
        let mut dh = vec![1.0];
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = affine_f64(layer, &h);
            let w = layer.weight.data();
            let n = h.len();
            let mut dz: Vec<f64> = (0..z.len())
                .map(|i| {
                    w[i * n..(i + 1) * n]
                        .iter()
                        .zip(&dh)
                        .map(|(&wij, &d)| wij as f64 * d)
                        .sum()
                })
                .collect();
            if k < last {
                for (v, d) in z.iter_mut().zip(dz.iter_mut()) {
                    *v = v.tanh();
                    *d *= 1.0 - *v * *v;
                }
            }
            h = z;
            dh = dz;
        }
        (h, dh)
    }
}

fn affine_f64(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    layer
        .weight
        .data()
        .chunks_exact(n)
        .zip(layer.bias.data())
        .map(|(row, &b)| {
            row.iter()
                .zip(x)
                .fold(b as f64, |acc, (&w, &xi)| acc + w as f64 * xi)
        })
        .collect()
}

/// Parameter handles of one network on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    /// Handles in the same order as [`MlpParams::tensors`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Batched forward pass; `x` is `[in]` or `[B, in]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        mlp_forward(tape, self, x)
    }
}

/// Alternating affine/`tanh` layers with a linear head.
pub fn mlp_forward(tape: &mut Tape, net: &MlpVars, x: Var) -> Result<Var> {
    let mut h = x;
    let last = net.layers.len() - 1;
    for (k, &(w, b)) in net.layers.iter().enumerate() {
        h = tape.affine(w, h, Some(b))?;
        if k < last {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

/// Decodes `phi` (`[B, 1]`) and returns `(D(phi), dD/dphi)`, both `[B, out]`.
///
/// The derivative is recorded on the tape, so losses built from it are
/// differentiable with respect to the decoder weights.
pub fn decoder_jacobian(tape: &mut Tape, decoder: &MlpVars, phi: Var) -> Result<(Var, Var)> {
    let decoded = decoder.forward(tape, phi)?;
    let jac = tape.forward_tangent(phi, decoded, 1.0)?;
    Ok((decoded, jac))
}

/// Encoder, decoder and latent vector field trained together.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentModel {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub latent: MlpParams,
}

impl LatentModel {
    pub fn validate_shapes(&self) -> Result<()> {
        let check = |name: &str, net: &MlpParams, input: usize, output: usize| {
            if net.spec().input_dim() != input || net.spec().output_dim() != output {
                return Err(Error::validation(format!(
                    "{name} must map R^{input} -> R^{output}, got dims {:?}",
                    net.spec().dims()
                )));
            }
            Ok(())
        };
        check("encoder", &self.encoder, 2, 1)?;
        check("decoder", &self.decoder, 1, 2)?;
        check("latent field", &self.latent, 1, 1)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.encoder
            .tensors()
            .chain(self.decoder.tensors())
            .chain(self.latent.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.encoder
            .tensors_mut()
            .chain(self.decoder.tensors_mut())
            .chain(self.latent.tensors_mut())
    }
}
