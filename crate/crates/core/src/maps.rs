//! Double-precision views of encoders, decoders and latent fields.
//!
//! Evaluation and the oracle checks work against these traits so that trained
//! networks and closed-form charts are interchangeable.

use crate::dynamics::CoveringChart;
use crate::nn::MlpParams;

pub trait Encoder {
    fn encode(&self, x: [f64; 2]) -> f64;
}

pub trait Decoder {
    fn decode(&self, phi: f64) -> [f64; 2];
    /// `dD/dφ`
    fn jacobian(&self, phi: f64) -> [f64; 2];
}

pub trait LatentField {
    fn rate(&self, phi: f64) -> f64;
}

impl<F: Fn([f64; 2]) -> f64> Encoder for F {
    fn encode(&self, x: [f64; 2]) -> f64 {
        self(x)
    }
}

impl<F: Fn(f64) -> f64> LatentField for F {
    fn rate(&self, phi: f64) -> f64 {
        self(phi)
    }
}

/// Decoder from a map and its derivative.
pub struct FnDecoder<F, J> {
    pub map: F,
    pub derivative: J,
}

impl<F, J> Decoder for FnDecoder<F, J>
where
    F: Fn(f64) -> [f64; 2],
    J: Fn(f64) -> [f64; 2],
{
    fn decode(&self, phi: f64) -> [f64; 2] {
        (self.map)(phi)
    }

    fn jacobian(&self, phi: f64) -> [f64; 2] {
        (self.derivative)(phi)
    }
}

impl Encoder for CoveringChart {
    fn encode(&self, x: [f64; 2]) -> f64 {
        self.section(x)
    }
}

impl Decoder for CoveringChart {
    fn decode(&self, phi: f64) -> [f64; 2] {
        self.cover(phi)
    }

    fn jacobian(&self, phi: f64) -> [f64; 2] {
        self.cover_derivative(phi)
    }
}

/// `φ ↦ sin 2φ`, the exact lift of the circle system.
#[derive(Clone, Copy, Debug, Default)]
pub struct SinTwoPhi;

impl LatentField for SinTwoPhi {
    fn rate(&self, phi: f64) -> f64 {
        (2.0 * phi).sin()
    }
}

/// Trained networks seen as maps; shapes are checked by the model loader.
impl Encoder for MlpParams {
    fn encode(&self, x: [f64; 2]) -> f64 {
        self.forward_f64(&x)[0]
    }
}

impl Decoder for MlpParams {
    fn decode(&self, phi: f64) -> [f64; 2] {
        let y = self.forward_f64(&[phi]);
        [y[0], y[1]]
    }

    fn jacobian(&self, phi: f64) -> [f64; 2] {
        let (_, d) = self.forward_with_derivative_f64(phi);
        [d[0], d[1]]
    }
}

impl LatentField for MlpParams {
    fn rate(&self, phi: f64) -> f64 {
        self.forward_f64(&[phi])[0]
    }
}

pub fn round_trip_error(enc: &impl Encoder, dec: &impl Decoder, x: [f64; 2]) -> f64 {
    let y = dec.decode(enc.encode(x));
    (y[0] - x[0]).hypot(y[1] - x[1])
}
