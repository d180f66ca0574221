//! Independent double-precision reimplementation of the networks and losses,
//! used as a finite-difference oracle for the tape gradients.

#![allow(dead_code)]

use latentdyn::autodiff::{Tape, Tensor, Var};
use latentdyn::dataset::TrajectoryDataset;
use latentdyn::loss::{loss_conj, loss_lat1, loss_rec, LossWeights, ModelVars};
use latentdyn::nn::{LatentModel, MlpParams, MlpSpec};
use latentdyn::par::Execution;
use latentdyn::train::{init_model, step_gradient};

/// Dense tanh MLP in f64 with a linear last layer; weights row-major `[out][in]`.
#[derive(Clone, Debug)]
pub struct Net {
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl Net {
    pub fn from_params(p: &MlpParams) -> Self {
        let layers = p
            .layers()
            .iter()
            .map(|l| {
                let cols = l.weight.shape()[1];
                let w = l.weight.data().chunks(cols).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
                let b = l.bias.data().iter().map(|&v| v as f64).collect();
                (w, b)
            })
            .collect();
        Net { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() * w[0].len() + b.len()).sum()
    }

    /// Mutable access to the `i`-th parameter in `W_0, b_0, W_1, ...` order.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for (w, b) in &mut self.layers {
            let n = w.len() * w[0].len();
            if i < n {
                let cols = w[0].len();
                return &mut w[i / cols][i % cols];
            }
            i -= n;
            if i < b.len() {
                return &mut b[i];
            }
            i -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let mut z: Vec<f64> = w.iter().zip(b).map(|(row, bi)| row.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>() + bi).collect();
            if k < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            a = z;
        }
        a
    }

    /// Output and its derivative for a scalar input, by the chain rule.
    pub fn forward_dx(&self, x: f64) -> (Vec<f64>, Vec<f64>) {
        let mut a = vec![x];
        let mut da = vec![1.0];
        let last = self.layers.len() - 1;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(w.len());
            let mut dz = Vec::with_capacity(w.len());
            for (row, bi) in w.iter().zip(b) {
                z.push(row.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>() + bi);
                dz.push(row.iter().zip(&da).map(|(p, q)| p * q).sum::<f64>());
            }
            if k < last {
                for (v, d) in z.iter_mut().zip(dz.iter_mut()) {
                    let t = v.tanh();
                    *d *= 1.0 - t * t;
                    *v = t;
                }
            }
            a = z;
            da = dz;
        }
        (a, da)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub enc: Net,
    pub dec: Net,
    pub lat: Net,
}

impl Model {
    pub fn from_latent_model(m: &LatentModel) -> Self {
        Model {
            enc: Net::from_params(&m.encoder),
            dec: Net::from_params(&m.decoder),
            lat: Net::from_params(&m.latent),
        }
    }

    pub fn num_params(&self) -> usize {
        self.enc.num_params() + self.dec.num_params() + self.lat.num_params()
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let (ne, nd) = (self.enc.num_params(), self.dec.num_params());
        if i < ne {
            self.enc.param_mut(i)
        } else if i < ne + nd {
            self.dec.param_mut(i - ne)
        } else {
            self.lat.param_mut(i - ne - nd)
        }
    }

    pub fn rec(&self, xs: &[[f64; 2]]) -> f64 {
        xs.iter()
            .map(|x| {
                let y = self.dec.forward(&self.enc.forward(x));
                (y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2)
            })
            .sum::<f64>()
            / xs.len() as f64
    }

    pub fn conj(&self, xs: &[[f64; 2]]) -> f64 {
        xs.iter()
            .map(|x| {
                let phi = self.enc.forward(x)[0];
                let (y, j) = self.dec.forward_dx(phi);
                let r = self.lat.forward(&[phi])[0];
                let f = [-2.0 * y[0] * y[1] * y[1], 2.0 * y[0] * y[0] * y[1]];
                (j[0] * r - f[0]).powi(2) + (j[1] * r - f[1]).powi(2)
            })
            .sum::<f64>()
            / xs.len() as f64
    }

    pub fn lat1(&self, pairs: &[([f64; 2], [f64; 2])], dt: f64) -> f64 {
        let h = |p: f64| self.lat.forward(&[p])[0];
        pairs
            .iter()
            .map(|(a, b)| {
                let p = self.enc.forward(a)[0];
                let k1 = h(p);
                let k2 = h(p + 0.5 * dt * k1);
                let k3 = h(p + 0.5 * dt * k2);
                let k4 = h(p + dt * k3);
                let pred = p + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                (pred - self.enc.forward(b)[0]).powi(2)
            })
            .sum::<f64>()
            / pairs.len() as f64
    }

    /// Central-difference gradient of `loss` over all parameters.
    pub fn fd_gradient(&self, h: f64, loss: impl Fn(&Model) -> f64) -> Vec<f64> {
        (0..self.num_params())
            .map(|i| {
                let mut plus = self.clone();
                *plus.param_mut(i) += h;
                let mut minus = self.clone();
                *minus.param_mut(i) -= h;
                (loss(&plus) - loss(&minus)) / (2.0 * h)
            })
            .collect()
    }
}

/// Worst componentwise relative error, with components far below the
/// gradient's scale compared against that scale instead.
pub fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / w.abs().max(1e-2 * scale).max(1e-12))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Rec,
    Conj,
    Lat1,
}

fn batch(tape: &mut Tape, xs: &[[f32; 2]]) -> Var {
    let flat: Vec<f32> = xs.iter().flatten().copied().collect();
    tape.constant(Tensor::matrix(xs.len(), 2, flat).unwrap())
}

/// Tape gradient of one loss part, flattened in parameter order.
pub fn tape_gradient(m: &LatentModel, part: Part, xs: &[[f32; 2]], pairs: &[([f32; 2], [f32; 2])], dt: f32) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(m, &mut tape);
    let root = match part {
        Part::Rec => {
            let x = batch(&mut tape, xs);
            loss_rec(&mut tape, &vars, x).unwrap()
        }
        Part::Conj => {
            let x = batch(&mut tape, xs);
            loss_conj(&mut tape, &vars, x).unwrap()
        }
        Part::Lat1 => {
            let a: Vec<[f32; 2]> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<[f32; 2]> = pairs.iter().map(|p| p.1).collect();
            let (a, b) = (batch(&mut tape, &a), batch(&mut tape, &b));
            loss_lat1(&mut tape, &vars, a, b, dt).unwrap()
        }
    };
    let grads = tape.backward(root).unwrap();
    vars.vars().flat_map(|v| grads.wrt(v).data().iter().map(|&g| g as f64).collect::<Vec<_>>()).collect()
}

pub fn widen(p: [f32; 2]) -> [f64; 2] {
    [p[0] as f64, p[1] as f64]
}

pub const FD_STEP: f64 = 1e-5;

type LossFn<'a> = Box<dyn Fn(&Model) -> f64 + 'a>;

/// Miniature encoder, decoder and field used by the gradient checks.
pub fn tiny_model(seed: u64) -> LatentModel {
    init_model(
        seed,
        &MlpSpec::new(vec![2, 4, 4, 1]).unwrap(),
        &MlpSpec::new(vec![1, 4, 4, 2]).unwrap(),
        &MlpSpec::new(vec![1, 4, 1]).unwrap(),
    )
}

/// Relative gradient errors for `[rec, conj, lat1, total]` against the f64
/// oracle. The total goes through the chunked training step.
pub fn gradient_errors(seed: u64) -> [f64; 4] {
    let m = tiny_model(seed);
    let oracle = Model::from_latent_model(&m);
    let ds = TrajectoryDataset::generate(3, 5, 0.04, seed).unwrap();
    let dt = ds.meta().dt;
    let xs: Vec<[f32; 2]> = ds.points().to_vec();
    let pairs: Vec<_> = (0..ds.num_pairs()).map(|p| ds.pair(p)).collect();
    let xs64: Vec<[f64; 2]> = xs.iter().map(|&p| widen(p)).collect();
    let pairs64: Vec<_> = pairs.iter().map(|&(a, b)| (widen(a), widen(b))).collect();

    let mut out = [0.0; 4];
    let parts: [(Part, LossFn); 3] = [
        (Part::Rec, Box::new(|o: &Model| o.rec(&xs64))),
        (Part::Conj, Box::new(|o: &Model| o.conj(&xs64))),
        (Part::Lat1, Box::new(|o: &Model| o.lat1(&pairs64, dt))),
    ];
    for (i, (part, loss)) in parts.into_iter().enumerate() {
        let got = tape_gradient(&m, part, &xs, &pairs, dt as f32);
        out[i] = relative_error(&got, &oracle.fd_gradient(FD_STEP, loss));
    }

    let weights = LossWeights { rec: 5.0, conj: 2.0, lat1: 0.8 };
    let pts: Vec<usize> = (0..ds.num_points()).collect();
    let prs: Vec<usize> = (0..ds.num_pairs()).collect();
    // Chunks of 4 rows exercise the cross-chunk reduction.
    let step = step_gradient(&m, &ds, &weights, Some(&pts), Some(&pts), Some(&prs), 4, Execution::Sequential).unwrap();
    let got: Vec<f64> = step.grads.iter().flat_map(|t| t.data().iter().map(|&g| g as f64)).collect();
    let want = oracle.fd_gradient(FD_STEP, |o| 5.0 * o.rec(&xs64) + 2.0 * o.conj(&xs64) + 0.8 * o.lat1(&pairs64, dt));
    out[3] = relative_error(&got, &want);
    out
}
