//! Evaluation tables for a frozen model, computed in double precision.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::TAGS;
use crate::dynamics::{euler_step, rk4_step, wrap_angle};
use crate::error::{Error, Result};
use crate::maps::{Decoder, Encoder, LatentField};

/// Divisor magnitude below which the pulled-back field is flagged.
pub const DERIVATIVE_FLOOR: f64 = 1e-8;

/// Points sampled per refinement level.
const REFINE_SAMPLES: usize = 33;

/// A column-labelled float64 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(&self.columns).map_err(|e| csv_err(path, e))?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    pub refine_tol: f64,
    pub lp_p: f64,
    /// Rollout and time-series length.
    pub steps: usize,
    pub dt: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k: 720,
            refine_tol: 1e-7,
            lp_p: 2.0,
            steps: 96,
            dt: 0.04,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.k < 16 {
            return Err(Error::validation(format!("eval grid K = {} must be at least 16", self.k)));
        }
        if !(self.refine_tol > 0.0 && self.refine_tol.is_finite()) {
            return Err(Error::validation("refine_tol must be positive"));
        }
        if !(self.lp_p > 0.0 && self.lp_p.is_finite()) {
            return Err(Error::validation("lp_p must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::validation("rollout needs at least one step"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::validation("dt must be positive"));
        }
        Ok(())
    }
}

fn grid(k: usize) -> impl Iterator<Item = f64> {
    (0..k).map(move |i| TAU * i as f64 / k as f64)
}

fn on_circle(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

fn angle_of(x: [f64; 2]) -> f64 {
    x[1].atan2(x[0])
}

/// `(theta, phi)` on the uniform grid of `k` angles in `[0, 2π)`.
pub fn encoder_curve(enc: &impl Encoder, k: usize) -> Table {
    let mut t = Table::new(&["theta", "phi"]);
    for theta in grid(k) {
        t.push(vec![theta, enc.encode(on_circle(theta))]);
    }
    t
}

/// Latent window: the encoder image padded by 5% on each side.
pub fn latent_range(curve: &Table) -> (f64, f64) {
    let phi = curve.column("phi").unwrap_or_default();
    let finite = phi.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return (-1.0, 1.0);
    }
    let pad = 0.05 * (hi - lo).max(f64::EPSILON);
    (lo - pad, hi + pad)
}

fn linspace(lo: f64, hi: f64, k: usize) -> impl Iterator<Item = f64> {
    let step = if k > 1 { (hi - lo) / (k - 1) as f64 } else { 0.0 };
    (0..k).map(move |i| lo + step * i as f64)
}

pub fn latent_vf(h: &impl LatentField, range: (f64, f64), k: usize) -> Table {
    let mut t = Table::new(&["phi", "h"]);
    for phi in linspace(range.0, range.1, k) {
        t.push(vec![phi, h.rate(phi)]);
    }
    t
}

/// Columns `theta,true_vf,pulled_vf,dphi_dtheta,flag`. Where the encoder
/// derivative is below [`DERIVATIVE_FLOOR`] the pulled value is NaN and the
/// flag is 1.
pub fn pullback_field(enc: &impl Encoder, h: &impl LatentField, k: usize) -> Table {
    let thetas: Vec<f64> = grid(k).collect();
    let phis: Vec<f64> = thetas.iter().map(|&th| enc.encode(on_circle(th))).collect();
    let spacing = TAU / k as f64;
    let mut t = Table::new(&["theta", "true_vf", "pulled_vf", "dphi_dtheta", "flag"]);
    for i in 0..k {
        let next = phis[(i + 1) % k];
        let prev = phis[(i + k - 1) % k];
        let d = (next - prev) / (2.0 * spacing);
        let (pulled, flag) = if d.abs() < DERIVATIVE_FLOOR || !d.is_finite() {
            (f64::NAN, 1.0)
        } else {
            (h.rate(phis[i]) / d, 0.0)
        };
        t.push(vec![thetas[i], (2.0 * thetas[i]).sin(), pulled, d, flag]);
    }
    t
}

/// Columns `phi,x1,x2,radius,angle`; the angle is NaN where `D(φ) = 0`.
pub fn decoder_image(dec: &impl Decoder, range: (f64, f64), k: usize) -> Table {
    let mut t = Table::new(&["phi", "x1", "x2", "radius", "angle"]);
    for phi in linspace(range.0, range.1, k) {
        let x = dec.decode(phi);
        let radius = x[0].hypot(x[1]);
        let angle = if radius > 0.0 { angle_of(x) } else { f64::NAN };
        t.push(vec![phi, x[0], x[1], radius, angle]);
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Columns `t,phi,x1,x2,theta_roll`.
    pub table: Table,
    /// The latent state became non-finite and the table stops early.
    pub truncated: bool,
}

/// Latent RK4 rollout from `E(x0)`, decoded at every step.
pub fn rollout(
    enc: &impl Encoder,
    dec: &impl Decoder,
    h: &impl LatentField,
    x0: [f64; 2],
    steps: usize,
    dt: f64,
) -> Rollout {
    let mut table = Table::new(&["t", "phi", "x1", "x2", "theta_roll"]);
    let mut phi = enc.encode(x0);
    let mut truncated = !phi.is_finite();
    for n in 0..=steps {
        if truncated {
            break;
        }
        let x = dec.decode(phi);
        if !(x[0].is_finite() && x[1].is_finite()) {
            truncated = true;
            break;
        }
        table.push(vec![n as f64 * dt, phi, x[0], x[1], angle_of(x)]);
        if n < steps {
            match rk4_step(|p: f64| h.rate(p), phi, dt) {
                Ok(next) => phi = next,
                Err(_) => truncated = true,
            }
        }
    }
    Rollout { table, truncated }
}

/// Columns `t,theta_true,theta_decoded,theta_rollout`, all in `(−π, π]`.
/// The true path is the Euler recurrence of the data generator run in double
/// precision; rollout entries past a truncation are NaN.
pub fn timeseries(
    theta0: f64,
    enc: &impl Encoder,
    dec: &impl Decoder,
    h: &impl LatentField,
    steps: usize,
    dt: f64,
) -> Table {
    let roll = rollout(enc, dec, h, on_circle(theta0), steps, dt);
    let rolled = roll.table.column("theta_roll").unwrap_or_default();
    let mut t = Table::new(&["t", "theta_true", "theta_decoded", "theta_rollout"]);
    let mut theta = theta0;
    for n in 0..=steps {
        let decoded = angle_of(dec.decode(enc.encode(on_circle(theta))));
        let r = rolled.get(n).copied().unwrap_or(f64::NAN);
        t.push(vec![n as f64 * dt, wrap_angle(theta), wrap_angle(decoded), wrap_angle(r)]);
        theta = euler_step(theta, dt);
    }
    t
}

fn roundtrip_at(enc: &impl Encoder, dec: &impl Decoder, theta: f64) -> f64 {
    let x = on_circle(theta);
    let y = dec.decode(enc.encode(x));
    let e = (y[0] - x[0]).hypot(y[1] - x[1]);
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundtripProfile {
    /// Columns `theta,err`: the coarse grid merged with every refinement
    /// sample, sorted by angle.
    pub table: Table,
    pub max_err: f64,
    pub argmax_theta: f64,
    /// Running maximum after the coarse pass and after each refinement level.
    pub history: Vec<f64>,
}

/// Round-trip error on a coarse grid, then refined around the three worst
/// nodes and around the largest jump of the encoder curve by repeatedly
/// shrinking a window threefold around its worst sample.
pub fn roundtrip_profile(enc: &impl Encoder, dec: &impl Decoder, k: usize, tol: f64) -> RoundtripProfile {
    let spacing = TAU / k as f64;
    let mut samples: Vec<(f64, f64)> = grid(k).map(|th| (th, roundtrip_at(enc, dec, th))).collect();
    let phis: Vec<f64> = grid(k).map(|th| enc.encode(on_circle(th))).collect();

    let mut best = samples
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |a, s| if s.1 > a.1 { s } else { a });
    let mut history = vec![best.1];

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| samples[j].1.total_cmp(&samples[i].1).then(i.cmp(&j)));
    let mut centres: Vec<f64> = order.iter().take(3).map(|&i| samples[i].0).collect();
    let jump = (0..k)
        .map(|i| (i, (phis[(i + 1) % k] - phis[i]).abs()))
        .filter(|(_, d)| d.is_finite())
        .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
    if jump.1 >= 0.0 {
        centres.push(samples[jump.0].0 + 0.5 * spacing);
    }

    for centre in centres {
        let mut c = centre;
        let mut half = spacing;
        loop {
            let lo = c - half;
            let step = 2.0 * half / (REFINE_SAMPLES - 1) as f64;
            let mut local = (c, f64::NEG_INFINITY);
            for i in 0..REFINE_SAMPLES {
                let th = (lo + step * i as f64).rem_euclid(TAU);
                let e = roundtrip_at(enc, dec, th);
                samples.push((th, e));
                if e > local.1 {
                    local = (th, e);
                }
            }
            if local.1 > best.1 {
                best = local;
            }
            history.push(best.1);
            if step <= tol {
                break;
            }
            c = local.0;
            half /= 3.0;
        }
    }

    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    samples.dedup_by(|a, b| a.0 == b.0);
    let mut table = Table::new(&["theta", "err"]);
    for (th, e) in samples {
        table.push(vec![th, e]);
    }
    RoundtripProfile {
        table,
        max_err: best.1,
        argmax_theta: best.0,
        history,
    }
}

/// Mean of `err^p` over `k` uniform nodes: the periodic trapezoid rule for the
/// normalized integral over the circle.
pub fn lp_error(enc: &impl Encoder, dec: &impl Decoder, p: f64, k: usize) -> f64 {
    grid(k).map(|th| roundtrip_at(enc, dec, th).powf(p)).sum::<f64>() / k as f64
}

/// `‖D(E(x))‖` at each tag.
pub fn tag_radii(enc: &impl Encoder, dec: &impl Decoder) -> BTreeMap<String, f64> {
    TAGS.iter()
        .map(|&(tag, a)| {
            let y = dec.decode(enc.encode(on_circle(a)));
            (tag.to_string(), y[0].hypot(y[1]))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub max_roundtrip_err: f64,
    pub argmax_theta: f64,
    pub l2_error: f64,
    pub tag_radii: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub checkpoint: String,
    pub seed: Option<u64>,
    pub settings: EvalSettings,
    pub lp_error: f64,
    pub truncated_rollouts: Vec<String>,
    pub flagged_pullback_nodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalBundle {
    /// Keyed by file stem, e.g. `phi_of_theta` or `rollout_B`.
    pub tables: BTreeMap<String, Table>,
    pub summary: Summary,
    pub meta: EvalMeta,
}

pub fn evaluate(
    enc: &impl Encoder,
    dec: &impl Decoder,
    h: &impl LatentField,
    settings: &EvalSettings,
    checkpoint: &str,
    seed: Option<u64>,
) -> Result<EvalBundle> {
    settings.validate()?;
    let k = settings.k;
    let mut tables = BTreeMap::new();

    let curve = encoder_curve(enc, k);
    let range = latent_range(&curve);
    tables.insert("latent_vf".to_string(), latent_vf(h, range, k));
    tables.insert("decoder_image".to_string(), decoder_image(dec, range, k));
    let pullback = pullback_field(enc, h, k);
    let flagged = pullback
        .column("flag")
        .unwrap_or_default()
        .iter()
        .filter(|&&f| f != 0.0)
        .count();
    tables.insert("pullback".to_string(), pullback);
    tables.insert("phi_of_theta".to_string(), curve);

    let mut truncated_rollouts = Vec::new();
    for &(tag, angle) in TAGS.iter() {
        let roll = rollout(enc, dec, h, on_circle(angle), settings.steps, settings.dt);
        if roll.truncated {
            truncated_rollouts.push(tag.to_string());
        }
        tables.insert(format!("rollout_{tag}"), roll.table);
        tables.insert(
            format!("timeseries_{tag}"),
            timeseries(angle, enc, dec, h, settings.steps, settings.dt),
        );
    }

    let profile = roundtrip_profile(enc, dec, k, settings.refine_tol);
    tables.insert("roundtrip".to_string(), profile.table);
    let l2_error = lp_error(enc, dec, 2.0, k);
    let summary = Summary {
        max_roundtrip_err: profile.max_err,
        argmax_theta: profile.argmax_theta,
        l2_error,
        tag_radii: tag_radii(enc, dec),
    };
    let meta = EvalMeta {
        checkpoint: checkpoint.to_string(),
        seed,
        settings: settings.clone(),
        lp_error: lp_error(enc, dec, settings.lp_p, k),
        truncated_rollouts,
        flagged_pullback_nodes: flagged,
    };
    Ok(EvalBundle { tables, summary, meta })
}

impl EvalBundle {
    /// One CSV per table plus `summary.json` and `eval_meta.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, table) in &self.tables {
            table.write_csv(&dir.join(format!("{name}.csv")))?;
        }
        write_json(&dir.join("summary.json"), &self.summary)?;
        write_json(&dir.join("eval_meta.json"), &self.meta)
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Whether `theta` is at angular distance at least `margin` from angle 0.
pub fn away_from_cut(theta: f64, margin: f64) -> bool {
    let d = theta.rem_euclid(TAU);
    d.min(TAU - d) >= margin
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{reference_flow, CoveringChart};
    use crate::maps::{FnDecoder, SinTwoPhi};
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn chart() -> CoveringChart {
        CoveringChart::default()
    }

    #[test]
    fn chart_encoder_curve_is_identity() {
        let t = encoder_curve(&chart(), 720);
        assert_eq!(t.len(), 720);
        for r in &t.rows[1..] {
            assert!((r[1] - r[0]).abs() < 1e-12);
        }
        assert!((t.rows[0][1] - TAU).abs() < 1e-12);
    }

    #[test]
    fn chart_pullback_matches_sin_two_theta() {
        let t = pullback_field(&chart(), &SinTwoPhi, 720);
        for r in &t.rows {
            if away_from_cut(r[0], 0.05) {
                assert!((r[2] - r[1]).abs() <= 1e-4, "{r:?}");
            }
        }
    }

    /// Warped chart `φ = θ + 0.3 sin θ` with the matching pushed-forward field.
    fn warped_pair() -> (impl Encoder, impl LatentField) {
        let enc = |x: [f64; 2]| {
            let th = x[1].atan2(x[0]).rem_euclid(TAU);
            th + 0.3 * th.sin()
        };
        let h = |phi: f64| {
            let mut th = phi;
            for _ in 0..50 {
                th -= (th + 0.3 * th.sin() - phi) / (1.0 + 0.3 * th.cos());
            }
            (1.0 + 0.3 * th.cos()) * (2.0 * th).sin()
        };
        (enc, h)
    }

    #[test]
    fn pullback_converges_at_second_order() {
        let (enc, h) = warped_pair();
        let err = |k| {
            let t = pullback_field(&enc, &h, k);
            t.rows
                .iter()
                .filter(|r| away_from_cut(r[0], 0.2))
                .map(|r| (r[2] - r[1]).abs())
                .fold(0.0, f64::max)
        };
        let (a, b, c) = (err(180), err(360), err(720));
        assert!(a / b > 3.5 && b / c > 3.5, "{a} {b} {c}");
        assert!(c < 1e-3);
    }

    #[test]
    fn zero_field_pulls_back_to_zero() {
        let t = pullback_field(&chart(), &|_: f64| 0.0, 64);
        for r in &t.rows {
            assert_eq!(r[4], 0.0);
            assert_eq!(r[2], 0.0);
        }
    }

    #[test]
    fn flat_encoder_is_flagged() {
        let t = pullback_field(&|_: [f64; 2]| 1.0, &SinTwoPhi, 64);
        assert!(t.rows.iter().all(|r| r[4] == 1.0 && r[2].is_nan()));
    }

    #[test]
    fn chart_decoder_image() {
        let t = decoder_image(&chart(), (0.0, TAU), 100);
        for r in &t.rows {
            assert!((r[3] - 1.0).abs() < 1e-12);
            assert!((r[4].rem_euclid(TAU) - r[0].rem_euclid(TAU)).abs() < 1e-9
                || (r[4].rem_euclid(TAU) - r[0].rem_euclid(TAU)).abs() > TAU - 1e-9);
        }
        let zero = FnDecoder {
            map: |_: f64| [0.0, 0.0],
            derivative: |_: f64| [0.0, 0.0],
        };
        let t = decoder_image(&zero, (0.0, 1.0), 5);
        assert!(t.rows.iter().all(|r| r[3] == 0.0 && r[4].is_nan()));
    }

    #[test]
    fn rollout_at_stable_point_is_constant() {
        let r = rollout(&chart(), &chart(), &SinTwoPhi, [0.0, 1.0], 96, 0.04);
        assert!(!r.truncated);
        assert_eq!(r.table.len(), 97);
        for row in &r.table.rows {
            assert!((row[4] - FRAC_PI_2).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_rollout_matches_reference_flow() {
        let r = rollout(&chart(), &chart(), &SinTwoPhi, on_circle(FRAC_PI_4), 96, 0.04);
        for row in &r.table.rows {
            let exact = reference_flow(|th: f64| (2.0 * th).sin(), FRAC_PI_4, row[0], 10_000).unwrap();
            assert!((row[4] - exact).abs() <= 1e-3);
        }
    }

    #[test]
    fn non_finite_rollout_is_truncated() {
        let h = |phi: f64| if phi > 1.0 { f64::NAN } else { 10.0 };
        let r = rollout(&|_: [f64; 2]| 0.0, &chart(), &h, [1.0, 0.0], 50, 0.04);
        assert!(r.truncated);
        assert!(r.table.len() < 51 && !r.table.is_empty());
    }

    #[test]
    fn timeseries_tags() {
        let f = timeseries(PI, &chart(), &chart(), &SinTwoPhi, 96, 0.04);
        for r in &f.rows {
            for v in &r[1..] {
                assert!((v - PI).abs() < 1e-9, "{r:?}");
            }
        }
        assert!((wrap_angle(1.5 * PI) + FRAC_PI_2).abs() < 1e-15);
        let b = timeseries(PI / 6.0, &chart(), &chart(), &SinTwoPhi, 96, 0.04);
        for r in &b.rows {
            assert!((r[1] - r[2]).abs() <= 2e-2 && (r[1] - r[3]).abs() <= 2e-2, "{r:?}");
        }
    }

    #[test]
    fn chart_roundtrip_is_exact() {
        let p = roundtrip_profile(&chart(), &chart(), 720, 1e-7);
        assert!(p.max_err <= 1e-9);
    }

    #[test]
    fn refinement_finds_narrow_spike_monotonically() {
        // Decoder defect narrower than the grid spacing, peaked between nodes.
        let enc = |x: [f64; 2]| x[1].atan2(x[0]);
        let dec = FnDecoder {
            map: |phi: f64| {
                let bump = (-((phi - 1.0001) / 2e-3).powi(2)).exp();
                [phi.cos() * (1.0 - 2.0 * bump), phi.sin() * (1.0 - 2.0 * bump)]
            },
            derivative: |_: f64| [0.0, 0.0],
        };
        let p = roundtrip_profile(&enc, &dec, 720, 1e-7);
        assert!(p.history.windows(2).all(|w| w[1] >= w[0]));
        assert!(p.max_err > 1.99, "{}", p.max_err);
        assert!((p.argmax_theta - 1.0001).abs() < 1e-6);
        let coarse = roundtrip_profile(&enc, &dec, 720, 1.0);
        assert!(coarse.max_err < p.max_err);
    }

    #[test]
    fn lp_error_examples() {
        assert!(lp_error(&chart(), &chart(), 2.0, 4096) <= 1e-8);
        let shrink = FnDecoder {
            map: |phi: f64| [0.5 * phi.cos(), 0.5 * phi.sin()],
            derivative: |_: f64| [0.0, 0.0],
        };
        for p in [1.0, 2.0, 3.0] {
            assert!((lp_error(&chart(), &shrink, p, 64) - 0.5f64.powf(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn bundle_schemas() {
        let b = evaluate(&chart(), &chart(), &SinTwoPhi, &EvalSettings::default(), "oracle", None).unwrap();
        let schema = |name: &str| b.tables[name].columns.join(",");
        assert_eq!(schema("phi_of_theta"), "theta,phi");
        assert_eq!(schema("latent_vf"), "phi,h");
        assert_eq!(schema("decoder_image"), "phi,x1,x2,radius,angle");
        assert_eq!(schema("pullback"), "theta,true_vf,pulled_vf,dphi_dtheta,flag");
        assert_eq!(schema("rollout_A"), "t,phi,x1,x2,theta_roll");
        assert_eq!(schema("timeseries_H"), "t,theta_true,theta_decoded,theta_rollout");
        assert_eq!(schema("roundtrip"), "theta,err");
        assert_eq!(b.tables.len(), 5 + 16);
        for r in &b.tables["phi_of_theta"].rows {
            assert!((0.0..TAU).contains(&r[0]));
        }
        for t in (0..8).map(|i| &b.tables[&format!("timeseries_{}", TAGS[i].0)]) {
            for r in &t.rows {
                assert!(r[1..].iter().all(|v| *v > -PI && *v <= PI));
            }
        }
        for v in b.summary.tag_radii.values() {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        b.write(dir.path()).unwrap();
        let s: Summary = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(s, b.summary);
        let head = fs::read_to_string(dir.path().join("pullback.csv")).unwrap();
        assert!(head.starts_with("theta,true_vf,pulled_vf,dphi_dtheta,flag\n"));
    }
}
