//! Reconstruction pretraining followed by annealed dynamics training.
//!
//! Every epoch is a full shuffled pass over each active stream: the
//! reconstruction and conjugacy losses draw independent shuffles of the point
//! stream, the one-step loss draws from the pair stream. A step combines the
//! k-th batch of every active stream. Batches are cut into fixed-size chunks,
//! each chunk is differentiated on its own tape, and chunk gradients are summed
//! in a fixed (rec, conj, lat1) order so the result does not depend on how many
//! threads ran the chunks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dataset::{minibatches, Stream, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::loss::{conj_sum, lat1_sum, rec_sum, LossWeights, ModelVars};
use crate::nn::{LatentModel, MlpParams, MlpSpec};
use crate::optim::{AdamW, OptimState};
use crate::par::{map_ordered, Execution};
use crate::seeds::{rng_for, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub w_rec: f32,
    pub w_conj: f32,
    pub w_lat1: f32,
    pub lr: f32,
}

impl Phase {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            rec: self.w_rec,
            conj: self.w_conj,
            lat1: self.w_lat1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        let phase = |epochs, w_rec, w_conj, w_lat1, lr| Phase {
            epochs,
            w_rec,
            w_conj,
            w_lat1,
            lr,
        };
        PhaseSchedule {
            phases: vec![
                phase(500, 15.0, 0.0, 0.0, 2e-3),
                phase(250, 10.0, 0.5, 0.2, 1.5e-3),
                phase(250, 7.0, 1.0, 0.5, 1e-3),
                phase(250, 5.0, 2.0, 0.8, 1e-3),
            ],
        }
    }
}

impl PhaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::validation("schedule has no phases"));
        }
        for (k, p) in self.phases.iter().enumerate() {
            p.weights()
                .validate()
                .map_err(|e| Error::validation(format!("phase {}: {e}", k + 1)))?;
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(Error::validation(format!("phase {}: lr must be > 0", k + 1)));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub schedule: PhaseSchedule,
    pub batch_size: usize,
    /// Rows per tape; fixes the summation order of gradients.
    pub chunk_size: usize,
    pub optimizer: AdamW,
    pub execution: Execution,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            schedule: PhaseSchedule::default(),
            batch_size: 4096,
            chunk_size: 256,
            optimizer: AdamW::default(),
            execution: Execution::default(),
        }
    }
}

/// Mean loss parts over the steps of one epoch. Parts whose weight is zero in
/// the current phase are not evaluated and are recorded as NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub phase: usize,
    pub epoch: usize,
    pub l_rec: f64,
    pub l_conj: f64,
    pub l_lat1: f64,
    pub total: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "phase,epoch,l_rec,l_conj,l_lat1,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.phase, self.epoch, self.l_rec, self.l_conj, self.l_lat1, self.total
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// 1-based phase index; 0 means "initialization".
    pub phase: usize,
    /// Epochs completed across all phases.
    pub epoch: usize,
    pub model: LatentModel,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// One snapshot per phase, in order; the last one is the final model.
    pub checkpoints: Vec<Snapshot>,
    pub log: Vec<LossRecord>,
}

impl TrainOutcome {
    pub fn final_model(&self) -> &LatentModel {
        &self.checkpoints.last().expect("at least one checkpoint").model
    }
}

/// Training stopped on an error; `last_good` holds the parameters from before
/// the failing step.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub last_good: Snapshot,
    pub checkpoints: Vec<Snapshot>,
    pub log: Vec<LossRecord>,
}

/// Initial parameters from per-network streams of the master seed.
pub fn init_model(seed: u64, encoder: &MlpSpec, decoder: &MlpSpec, latent: &MlpSpec) -> LatentModel {
    LatentModel {
        encoder: MlpParams::init(encoder, &mut rng_for(seed, Purpose::InitEncoder)),
        decoder: MlpParams::init(decoder, &mut rng_for(seed, Purpose::InitDecoder)),
        latent: MlpParams::init(latent, &mut rng_for(seed, Purpose::InitLatent)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Part {
    Rec,
    Conj,
    Lat1,
}

struct Job<'a> {
    part: Part,
    indices: &'a [usize],
    /// Multiplies the chunk's sum: weight / batch length.
    scale: f32,
}

/// Gradient of one training step and the unweighted batch-mean loss parts.
#[derive(Debug)]
pub struct StepResult {
    pub grads: Vec<Tensor>,
    pub parts: [Option<f64>; 3],
}

/// Evaluates and differentiates `Σ w_i L_i` over the given batches.
#[allow(clippy::too_many_arguments)]
pub fn step_gradient(
    model: &LatentModel,
    ds: &TrajectoryDataset,
    weights: &LossWeights,
    rec: Option<&[usize]>,
    conj: Option<&[usize]>,
    lat1: Option<&[usize]>,
    chunk_size: usize,
    exec: Execution,
) -> Result<StepResult> {
    if chunk_size == 0 {
        return Err(Error::validation("chunk size must be at least 1"));
    }
    let dt = ds.meta().dt as f32;
    let mut jobs = Vec::new();
    for (part, batch, w) in [
        (Part::Rec, rec, weights.rec),
        (Part::Conj, conj, weights.conj),
        (Part::Lat1, lat1, weights.lat1),
    ] {
        let Some(batch) = batch else { continue };
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let scale = w / batch.len() as f32;
        jobs.extend(batch.chunks(chunk_size).map(|indices| Job { part, indices, scale }));
    }

    let results = map_ordered(exec, &jobs, |job| run_job(model, ds, job, dt));

    let mut grads: Vec<Tensor> = model.tensors().map(|t| Tensor::zeros(t.shape())).collect();
    let mut sums = [None::<f64>; 3];
    for (job, result) in jobs.iter().zip(results) {
        let (chunk_grads, sum) = result?;
        for (acc, g) in grads.iter_mut().zip(&chunk_grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        let slot = &mut sums[job.part as usize];
        *slot = Some(slot.unwrap_or(0.0) + sum as f64);
    }
    let lens = [rec, conj, lat1].map(|b| b.map_or(1, <[usize]>::len));
    let mut parts = [None; 3];
    for k in 0..3 {
        parts[k] = sums[k].map(|s| s / lens[k] as f64);
    }
    Ok(StepResult { grads, parts })
}

fn run_job(model: &LatentModel, ds: &TrajectoryDataset, job: &Job, dt: f32) -> Result<(Vec<Tensor>, f32)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(model, &mut tape);
    let b = job.indices.len();
    let sum = match job.part {
        Part::Rec | Part::Conj => {
            let x = tape.constant(Tensor::matrix(b, 2, ds.gather_points(job.indices))?);
            if job.part == Part::Rec {
                rec_sum(&mut tape, &vars, x)?
            } else {
                conj_sum(&mut tape, &vars, x)?
            }
        }
        Part::Lat1 => {
            let (now, next) = ds.gather_pairs(job.indices);
            let x_now = tape.constant(Tensor::matrix(b, 2, now)?);
            let x_next = tape.constant(Tensor::matrix(b, 2, next)?);
            lat1_sum(&mut tape, &vars, x_now, x_next, dt)?
        }
    };
    let root = tape.scale(sum, job.scale)?;
    let mut g = tape.backward(root)?;
    let grads = vars.vars().map(|v| g.take(v)).collect();
    Ok((grads, tape.value(sum).item()))
}

/// Runs every phase of `settings.schedule`; optimizer moments restart at each
/// phase boundary.
pub fn train(
    settings: &TrainSettings,
    ds: &TrajectoryDataset,
    initial: LatentModel,
    shuffle_seed: u64,
    mut on_epoch: impl FnMut(&LossRecord),
) -> std::result::Result<TrainOutcome, Box<TrainAbort>> {
    let mut rng = rng_for(shuffle_seed, Purpose::Shuffle);
    let mut model = initial;
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();
    let mut epochs_done = 0usize;

    let abort = |error: Error, model: &LatentModel, phase, epoch, checkpoints: Vec<Snapshot>, log| {
        Box::new(TrainAbort {
            error,
            last_good: Snapshot {
                phase,
                epoch,
                model: model.clone(),
            },
            checkpoints,
            log,
        })
    };
    if let Err(e) = settings.schedule.validate().and_then(|_| model.validate_shapes()) {
        return Err(abort(e, &model, 0, 0, checkpoints, log));
    }

    for (pi, phase) in settings.schedule.phases.iter().enumerate() {
        let phase_no = pi + 1;
        let weights = phase.weights();
        let mut state = OptimState::new(model.tensors());
        for _ in 0..phase.epochs {
            match run_epoch(settings, ds, &mut model, &mut state, &weights, phase.lr, &mut rng) {
                Ok(means) => {
                    epochs_done += 1;
                    let record = LossRecord {
                        phase: phase_no,
                        epoch: epochs_done,
                        l_rec: means[0],
                        l_conj: means[1],
                        l_lat1: means[2],
                        total: [weights.rec, weights.conj, weights.lat1]
                            .iter()
                            .zip(means)
                            .filter(|(&w, _)| w > 0.0)
                            .map(|(&w, m)| w as f64 * m)
                            .sum(),
                    };
                    on_epoch(&record);
                    log.push(record);
                }
                Err(e) => return Err(abort(e, &model, phase_no, epochs_done, checkpoints, log)),
            }
        }
        checkpoints.push(Snapshot {
            phase: phase_no,
            epoch: epochs_done,
            model: model.clone(),
        });
    }
    Ok(TrainOutcome { checkpoints, log })
}

fn run_epoch<R: Rng>(
    settings: &TrainSettings,
    ds: &TrajectoryDataset,
    model: &mut LatentModel,
    state: &mut OptimState,
    weights: &LossWeights,
    lr: f32,
    rng: &mut R,
) -> Result<[f64; 3]> {
    let bs = settings.batch_size;
    let rec = if weights.rec > 0.0 {
        Some(minibatches(ds, bs, Stream::Points, rng)?)
    } else {
        None
    };
    let conj = if weights.conj > 0.0 {
        Some(minibatches(ds, bs, Stream::Points, rng)?)
    } else {
        None
    };
    let lat1 = if weights.lat1 > 0.0 {
        Some(minibatches(ds, bs, Stream::Pairs, rng)?)
    } else {
        None
    };
    let steps = [&rec, &conj, &lat1]
        .iter()
        .filter_map(|b| b.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    let pick = |batches: &Option<Vec<Vec<usize>>>, s: usize| {
        batches.as_ref().map(|b| b[s % b.len()].clone())
    };

    let mut sums = [0.0f64; 3];
    for s in 0..steps {
        let (r, c, l) = (pick(&rec, s), pick(&conj, s), pick(&lat1, s));
        let result = step_gradient(
            model,
            ds,
            weights,
            r.as_deref(),
            c.as_deref(),
            l.as_deref(),
            settings.chunk_size,
            settings.execution,
        )?;
        settings
            .optimizer
            .step(model.tensors_mut(), &result.grads, state, lr)?;
        for (acc, p) in sums.iter_mut().zip(result.parts) {
            *acc += p.unwrap_or(0.0);
        }
    }
    let mut means = [f64::NAN; 3];
    for (k, active) in [rec.is_some(), conj.is_some(), lat1.is_some()].into_iter().enumerate() {
        if active && steps > 0 {
            means[k] = sums[k] / steps as f64;
        }
    }
    Ok(means)
}
