//! The circle system, its covering lift and fixed-step integrators.
//!
//! Everything here is `f64` except the data-generation Euler step, which is
//! generic so that the dataset can run its recurrence in `f32`.

use std::f64::consts::TAU;

use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// `f(x) = (-2 x₁ x₂², 2 x₁² x₂)`, tangent to every circle about the origin.
#[derive(Clone, Copy, Debug, Default)]
pub struct AmbientField;

impl AmbientField {
    pub fn eval(&self, x: [f64; 2]) -> [f64; 2] {
        ambient_field(x)
    }
}

pub fn ambient_field(x: [f64; 2]) -> [f64; 2] {
    let [x1, x2] = x;
    [-2.0 * x1 * x2 * x2, 2.0 * x1 * x1 * x2]
}

/// `θ̇ = sin 2θ`: the ambient field written in the angle coordinate.
pub fn restricted_field(theta: f64) -> f64 {
    (2.0 * theta).sin()
}

/// One explicit Euler step of `θ̇ = sin 2θ`.
pub fn euler_step<F: Float>(theta: F, dt: F) -> F {
    let two = F::one() + F::one();
    theta + dt * (two * theta).sin()
}

/// State types the fixed-step integrators can advance.
pub trait OdeState: Copy {
    /// `self + scale * k`
    fn add_scaled(self, k: Self, scale: f64) -> Self;
    fn is_finite(&self) -> bool;
}

impl OdeState for f64 {
    fn add_scaled(self, k: Self, scale: f64) -> Self {
        self + scale * k
    }

    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

impl<const N: usize> OdeState for [f64; N] {
    fn add_scaled(self, k: Self, scale: f64) -> Self {
        let mut out = self;
        for (o, ki) in out.iter_mut().zip(k) {
            *o += scale * ki;
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Classical fourth-order Runge–Kutta step.
pub fn rk4_step<S: OdeState>(field: impl Fn(S) -> S, state: S, dt: f64) -> Result<S> {
    let k1 = field(state);
    let k2 = field(state.add_scaled(k1, 0.5 * dt));
    let k3 = field(state.add_scaled(k2, 0.5 * dt));
    let k4 = field(state.add_scaled(k3, dt));
    let incr = k1.add_scaled(k2, 2.0).add_scaled(k3, 2.0).add_scaled(k4, 1.0);
    let next = state.add_scaled(incr, dt / 6.0);
    for k in [k1, k2, k3, k4, next] {
        if !k.is_finite() {
            return Err(Error::non_finite("rk4 step"));
        }
    }
    Ok(next)
}

/// RK4 step of a field evaluated on the tape; differentiable in `phi` and in
/// whatever parameters `field` reads.
pub fn rk4_step_on_tape<F>(tape: &mut Tape, mut field: F, phi: Var, dt: f32) -> Result<Var>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let k1 = field(tape, phi)?;
    let s = tape.scale(k1, 0.5 * dt)?;
    let p2 = tape.add(phi, s)?;
    let k2 = field(tape, p2)?;
    let s = tape.scale(k2, 0.5 * dt)?;
    let p3 = tape.add(phi, s)?;
    let k3 = field(tape, p3)?;
    let s = tape.scale(k3, dt)?;
    let p4 = tape.add(phi, s)?;
    let k4 = field(tape, p4)?;

    let k2x2 = tape.scale(k2, 2.0)?;
    let k3x2 = tape.scale(k3, 2.0)?;
    let a = tape.add(k1, k2x2)?;
    let b = tape.add(k3x2, k4)?;
    let incr = tape.add(a, b)?;
    let incr = tape.scale(incr, dt / 6.0)?;
    tape.add(phi, incr)
}

/// High-accuracy time-`t` map: `ceil(|t| * substeps_per_unit_time)` RK4 steps
/// of equal length. Negative `t` integrates backward.
pub fn reference_flow<S: OdeState>(
    field: impl Fn(S) -> S,
    x0: S,
    t: f64,
    substeps_per_unit_time: usize,
) -> Result<S> {
    if substeps_per_unit_time == 0 {
        return Err(Error::validation("reference flow needs at least one substep per unit time"));
    }
    if !t.is_finite() {
        return Err(Error::non_finite("reference flow horizon"));
    }
    let steps = (t.abs() * substeps_per_unit_time as f64).ceil() as usize;
    if steps == 0 {
        return Ok(x0);
    }
    let h = t / steps as f64;
    let mut x = x0;
    for _ in 0..steps {
        x = rk4_step(&field, x, h)?;
    }
    Ok(x)
}

/// The covering map `φ ↦ (cos φ, sin φ)` together with the section that sends
/// a point to its angle in `(cut, cut + 2π]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoveringChart {
    pub cut: f64,
}

impl Default for CoveringChart {
    fn default() -> Self {
        CoveringChart { cut: 0.0 }
    }
}

impl CoveringChart {
    pub fn new(cut: f64) -> Self {
        CoveringChart { cut }
    }

    pub fn cover(&self, phi: f64) -> [f64; 2] {
        [phi.cos(), phi.sin()]
    }

    /// Derivative of [`cover`](Self::cover).
    pub fn cover_derivative(&self, phi: f64) -> [f64; 2] {
        [-phi.sin(), phi.cos()]
    }

    pub fn section(&self, x: [f64; 2]) -> f64 {
        let angle = x[1].atan2(x[0]);
        let mut offset = (angle - self.cut).rem_euclid(TAU);
        if offset == 0.0 {
            offset = TAU;
        }
        self.cut + offset
    }

    /// The unique field upstairs that the cover maps onto `ambient`:
    /// `⟨f(D(φ)), D'(φ)⟩ / |D'(φ)|²`.
    pub fn lifted_field(&self, ambient: impl Fn([f64; 2]) -> [f64; 2], phi: f64) -> f64 {
        let v = ambient(self.cover(phi));
        let d = self.cover_derivative(phi);
        (v[0] * d[0] + v[1] * d[1]) / (d[0] * d[0] + d[1] * d[1])
    }
}

/// Lift of the circle system through `chart`.
pub fn lifted_field(chart: &CoveringChart, phi: f64) -> f64 {
    chart.lifted_field(ambient_field, phi)
}

/// Angle wrapped into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    std::f64::consts::PI - (std::f64::consts::PI - theta).rem_euclid(TAU)
}
