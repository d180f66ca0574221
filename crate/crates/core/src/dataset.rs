//! Circle trajectories sampled by forward Euler, their persistence and batching.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::euler_step;
use crate::error::{Error, Result};
use crate::seeds::{rng_for, Purpose};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Named reference angles used throughout the reports.
pub const TAGS: [(char, f64); 8] = [
    ('A', 0.0),
    ('B', PI / 6.0),
    ('C', PI / 5.0),
    ('D', FRAC_PI_4),
    ('E', 3.0 * FRAC_PI_4),
    ('F', PI),
    ('G', 5.0 * FRAC_PI_4),
    ('H', 4.0 * PI / 3.0),
];

pub fn tag_angle(tag: char) -> Option<f64> {
    TAGS.iter().find(|(t, _)| *t == tag).map(|&(_, a)| a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub dt: f64,
    pub seed: u64,
    pub format_version: u32,
}

/// `N` trajectories of `T` states each; `thetas[i * T + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    meta: DatasetMeta,
    thetas: Vec<f32>,
    points: Vec<[f32; 2]>,
}

/// Which sample stream a batch is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    /// Every state `X[i, t]`.
    Points,
    /// Every one-step pair `(X[i, t], X[i, t + 1])`.
    Pairs,
}

impl TrajectoryDataset {
    /// Uniform initial angles in `[0, 2π)` followed by the `f32` Euler recurrence.
    pub fn generate(n: usize, t: usize, dt: f64, seed: u64) -> Result<Self> {
        check_sizes(n, t, dt)?;
        let mut rng = rng_for(seed, Purpose::Data);
        let initial: Vec<f32> = (0..n)
            .map(|_| rng.gen_range(0.0..std::f32::consts::TAU))
            .collect();
        Self::from_initial_angles(&initial, t, dt, seed)
    }

    /// Same recurrence from caller-supplied initial angles.
    pub fn from_initial_angles(initial: &[f32], t: usize, dt: f64, seed: u64) -> Result<Self> {
        check_sizes(initial.len(), t, dt)?;
        let dt32 = dt as f32;
        let mut thetas = Vec::with_capacity(initial.len() * t);
        for &theta0 in initial {
            let mut theta = theta0;
            thetas.push(theta);
            for _ in 1..t {
                theta = euler_step(theta, dt32);
                thetas.push(theta);
            }
        }
        let points = thetas.iter().map(|&th| embed(th)).collect();
        Ok(TrajectoryDataset {
            meta: DatasetMeta {
                n: initial.len(),
                t,
                dt,
                seed,
                format_version: DATASET_FORMAT_VERSION,
            },
            thetas,
            points,
        })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn thetas(&self) -> &[f32] {
        &self.thetas
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    pub fn theta(&self, traj: usize, t: usize) -> f32 {
        self.thetas[traj * self.meta.t + t]
    }

    pub fn point(&self, traj: usize, t: usize) -> [f32; 2] {
        self.points[traj * self.meta.t + t]
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.meta.n * (self.meta.t - 1)
    }

    pub fn stream_len(&self, stream: Stream) -> usize {
        match stream {
            Stream::Points => self.num_points(),
            Stream::Pairs => self.num_pairs(),
        }
    }

    /// The pair with flat index `p`.
    pub fn pair(&self, p: usize) -> ([f32; 2], [f32; 2]) {
        let per = self.meta.t - 1;
        let (i, t) = (p / per, p % per);
        (self.point(i, t), self.point(i, t + 1))
    }

    /// Row-major `[B, 2]` coordinates of the given point indices.
    pub fn gather_points(&self, indices: &[usize]) -> Vec<f32> {
        indices.iter().flat_map(|&k| self.points[k]).collect()
    }

    /// Row-major `[B, 2]` coordinates of `(x_t, x_{t+1})` for the given pair indices.
    pub fn gather_pairs(&self, indices: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let mut now = Vec::with_capacity(indices.len() * 2);
        let mut next = Vec::with_capacity(indices.len() * 2);
        for &p in indices {
            let (a, b) = self.pair(p);
            now.extend(a);
            next.extend(b);
        }
        (now, next)
    }

    /// Writes `path` as CSV and a JSON sidecar next to it (same stem, `.json`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        writer
            .write_record(["traj", "t", "theta", "x1", "x2"])
            .map_err(|e| csv_io(path, e))?;
        for i in 0..self.meta.n {
            for t in 0..self.meta.t {
                let [x1, x2] = self.point(i, t);
                writer
                    .write_record([
                        i.to_string(),
                        t.to_string(),
                        self.theta(i, t).to_string(),
                        x1.to_string(),
                        x2.to_string(),
                    ])
                    .map_err(|e| csv_io(path, e))?;
            }
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        let meta_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta_path = sidecar_path(path);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            serde_json::from_str(&meta_text).map_err(|e| Error::parse(&meta_path, e.to_string()))?;
        if meta.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::validation(format!(
                "{}: format_version {} (expected {DATASET_FORMAT_VERSION})",
                meta_path.display(),
                meta.format_version
            )));
        }
        check_sizes(meta.n, meta.t, meta.dt)?;

        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_io(path, e))?;
        let headers = reader.headers().map_err(|e| csv_parse(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["traj", "t", "theta", "x1", "x2"] {
            return Err(Error::parse(path, format!("line 1: unexpected header {headers:?}")));
        }

        let expected = meta.n * meta.t;
        let mut thetas = Vec::with_capacity(expected);
        let mut points = Vec::with_capacity(expected);
        let mut last_good = 1u64;
        for record in reader.records() {
            let record = record.map_err(|e| csv_parse(path, e))?;
            let line = record.position().map_or(last_good + 1, |p| p.line());
            let fail = |msg: String| {
                Error::parse(path, format!("line {line}: {msg} (last good line {last_good})"))
            };
            if record.len() != 5 {
                return Err(fail(format!("expected 5 fields, found {}", record.len())));
            }
            let row = thetas.len();
            if row >= expected {
                return Err(fail(format!("more than {expected} rows for N={} T={}", meta.n, meta.t)));
            }
            let traj: usize = record[0].parse().map_err(|_| fail(format!("bad traj {:?}", &record[0])))?;
            let t: usize = record[1].parse().map_err(|_| fail(format!("bad t {:?}", &record[1])))?;
            if (traj, t) != (row / meta.t, row % meta.t) {
                return Err(fail(format!(
                    "row ({traj}, {t}) out of order, expected ({}, {})",
                    row / meta.t,
                    row % meta.t
                )));
            }
            let mut vals = [0f32; 3];
            for (k, v) in vals.iter_mut().enumerate() {
                let field = &record[2 + k];
                *v = field
                    .parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| fail(format!("bad number {field:?}")))?;
            }
            let [theta, x1, x2] = vals;
            let norm2 = (x1 as f64).powi(2) + (x2 as f64).powi(2);
            if (norm2.sqrt() - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!(
                    "{} line {line}: point ({x1}, {x2}) is not on the unit circle (|x|² = {norm2})",
                    path.display()
                )));
            }
            thetas.push(theta);
            points.push([x1, x2]);
            last_good = line;
        }
        if thetas.len() != expected {
            return Err(Error::parse(
                path,
                format!(
                    "unexpected end of data: {} of {expected} rows (last good line {last_good})",
                    thetas.len()
                ),
            ));
        }
        Ok(TrajectoryDataset {
            meta,
            thetas,
            points,
        })
    }
}

fn embed(theta: f32) -> [f32; 2] {
    let th = theta as f64;
    [th.cos() as f32, th.sin() as f32]
}

fn check_sizes(n: usize, t: usize, dt: f64) -> Result<()> {
    if n < 1 || t < 2 {
        return Err(Error::validation(format!(
            "dataset needs N >= 1 and T >= 2, got N={n} T={t}"
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::validation(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

fn csv_parse(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match line {
        Some(line) => Error::parse(path, format!("line {line}: {e}")),
        None => Error::parse(path, e.to_string()),
    }
}

/// Shuffles the stream and cuts it into batches; the short remainder batch is kept.
pub fn minibatches<R: Rng + ?Sized>(
    ds: &TrajectoryDataset,
    batch_size: usize,
    stream: Stream,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.stream_len(stream)).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
