//! Numerical instances of the chart and covering-space conjugacy statements
//! and of the antipodal round-trip lower bound, all in double precision.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ambient_field, lifted_field, reference_flow, restricted_field, CoveringChart, OdeState};
use crate::error::{Error, Result};
use crate::par::{map_ordered, Execution};
use crate::seeds::{rng_for, Purpose};

/// Open angular interval `(a, b)` with `b − a < 2π`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChartInterval {
    pub a: f64,
    pub b: f64,
}

impl ChartInterval {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b && b - a < TAU) {
            return Err(Error::validation(format!("({a}, {b}) is not a chart interval")));
        }
        Ok(ChartInterval { a, b })
    }

    /// Chart whose cut sits in the middle of the complementary arc, so the
    /// section is continuous on the closure.
    pub fn chart(&self) -> CoveringChart {
        CoveringChart::new(self.b + 0.5 * (TAU - (self.b - self.a)) - TAU)
    }

    pub fn contains(&self, theta: f64) -> bool {
        theta > self.a && theta < self.b
    }

    /// Whether some lift of `chart`'s cut lies in the closure.
    pub fn meets_cut(&self, chart: &CoveringChart) -> bool {
        let first = self.a + (chart.cut - self.a).rem_euclid(TAU);
        first <= self.b
    }

    /// `samples` midpoints of an even partition.
    fn samples(&self, samples: usize) -> impl Iterator<Item = f64> + '_ {
        let w = (self.b - self.a) / samples as f64;
        (0..samples).map(move |i| self.a + w * (i as f64 + 0.5))
    }
}

fn on_circle(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Worst chart defect over `samples` points of the interval: the round trip
/// `D(E(x)) − x`, and for consecutive samples the decoded midpoint of their
/// encodings against the true midpoint. The second term is what detects a
/// section that is discontinuous inside the interval.
pub fn check_chart_identity(chart: &CoveringChart, interval: &ChartInterval, samples: usize) -> Result<f64> {
    if samples == 0 {
        return Err(Error::validation("chart identity needs at least one sample"));
    }
    let thetas: Vec<f64> = interval.samples(samples).collect();
    let phis: Vec<f64> = thetas.iter().map(|&th| chart.section(on_circle(th))).collect();
    let mut worst: f64 = 0.0;
    for (&th, &phi) in thetas.iter().zip(&phis) {
        worst = worst.max(dist(chart.cover(phi), on_circle(th)));
    }
    for i in 1..samples {
        let mid_phi = 0.5 * (phis[i - 1] + phis[i]);
        let mid_theta = 0.5 * (thetas[i - 1] + thetas[i]);
        worst = worst.max(dist(chart.cover(mid_phi), on_circle(mid_theta)));
    }
    Ok(worst)
}

/// Exact time-`t` samples of an autonomous flow on a sorted, non-negative
/// grid, marching from one sample to the next with the reference step size.
fn march<S: OdeState>(field: impl Fn(S) -> S + Copy, x0: S, times: &[f64], substeps: usize) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(times.len());
    let (mut x, mut t) = (x0, 0.0);
    for &target in times {
        x = reference_flow(field, x, target - t, substeps)?;
        t = target;
        out.push(x);
    }
    Ok(out)
}

/// Sup over `times` of `‖D(Φ_g^t(E(x0))) − Φ_f^t(x0)‖`, with the downstairs
/// flow taken in the plane and the upstairs flow on the lift.
fn flow_defect(chart: &CoveringChart, theta0: f64, times: &[f64], substeps: usize) -> Result<f64> {
    let x0 = on_circle(theta0);
    let phi0 = chart.section(x0);
    let g = |phi: f64| lifted_field(chart, phi);
    let (neg, pos): (Vec<f64>, Vec<f64>) = times.iter().partition(|&&t| t < 0.0);
    let mut worst: f64 = 0.0;
    for (ts, sign) in [(pos, 1.0), (neg, -1.0)] {
        let mut mags: Vec<f64> = ts.iter().map(|t| t.abs()).collect();
        mags.sort_by(f64::total_cmp);
        let up = march(move |p: f64| sign * g(p), phi0, &mags, substeps)?;
        let down = march(
            move |x: [f64; 2]| {
                let v = ambient_field(x);
                [sign * v[0], sign * v[1]]
            },
            x0,
            &mags,
            substeps,
        )?;
        for (p, x) in up.into_iter().zip(down) {
            worst = worst.max(dist(chart.cover(p), x));
        }
    }
    Ok(worst)
}

fn uniform_times(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

/// Base angles avoiding angle 0: midpoints of `count` equal arcs.
pub fn base_grid(count: usize) -> Vec<f64> {
    (0..count).map(|i| TAU * (i as f64 + 0.5) / count as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitWindow {
    pub start: f64,
    pub end: f64,
}

/// Connected window of times in `[−horizon, horizon]` around 0 during which
/// the angle flow from `theta0` stays in the closure of `interval`, with the
/// exits located by bisection.
pub fn exit_window(interval: &ChartInterval, theta0: f64, horizon: f64, substeps: usize) -> Result<ExitWindow> {
    let inside = |t: f64| -> Result<bool> {
        let th = reference_flow(restricted_field, theta0, t, substeps)?;
        Ok(th >= interval.a && th <= interval.b)
    };
    let edge = |sign: f64| -> Result<f64> {
        if inside(sign * horizon)? {
            return Ok(sign * horizon);
        }
        // The angle flow is monotone, so the inside set is an interval.
        let (mut lo, mut hi) = (0.0, horizon);
        while hi - lo > 1e-12 {
            let mid = 0.5 * (lo + hi);
            if inside(sign * mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(sign * lo)
    };
    Ok(ExitWindow {
        start: edge(-1.0)?,
        end: edge(1.0)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmallTimeResult {
    pub windows: Vec<ExitWindow>,
    pub sup_defect: f64,
}

/// Chart conjugacy over each base angle's exit window.
pub fn check_small_time_conjugacy(
    interval: &ChartInterval,
    thetas: &[f64],
    horizon: f64,
    time_samples: usize,
    substeps: usize,
    exec: Execution,
) -> Result<SmallTimeResult> {
    if !(horizon > 0.0) {
        return Err(Error::validation("small-time horizon must be positive"));
    }
    if let Some(th) = thetas.iter().find(|&&th| !interval.contains(th)) {
        return Err(Error::validation(format!("base angle {th} outside the chart interval")));
    }
    let chart = interval.chart();
    let per_point = map_ordered(exec, thetas, |&th| -> Result<(ExitWindow, f64)> {
        let w = exit_window(interval, th, horizon, substeps)?;
        let times = uniform_times(w.start, w.end, time_samples);
        Ok((w, flow_defect(&chart, th, &times, substeps)?))
    });
    let mut windows = Vec::with_capacity(thetas.len());
    let mut sup_defect: f64 = 0.0;
    for r in per_point {
        let (w, d) = r?;
        windows.push(w);
        sup_defect = sup_defect.max(d);
    }
    Ok(SmallTimeResult { windows, sup_defect })
}

/// Global-lift conjugacy over `[−horizon, horizon]` with no exit window.
pub fn check_large_time_conjugacy(
    thetas: &[f64],
    horizon: f64,
    time_samples: usize,
    substeps: usize,
    exec: Execution,
) -> Result<f64> {
    let chart = CoveringChart::default();
    if thetas.iter().any(|&th| th.rem_euclid(TAU) == 0.0) {
        return Err(Error::validation("base grid must avoid the cut angle"));
    }
    let times = uniform_times(-horizon, horizon, time_samples);
    let per_point = map_ordered(exec, thetas, |&th| flow_defect(&chart, th, &times, substeps));
    per_point.into_iter().try_fold(0.0f64, |acc, d| Ok(acc.max(d?)))
}

/// Iterated time-`dt` maps: `D(Gⁿ(E(x)))` against `Fⁿ(x)` for `n ≤ iterations`,
/// with `F` the planar flow map and `G` the flow map of the lift through a
/// chart cut just below `basepoint`.
pub fn check_discrete_conjugacy(
    thetas: &[f64],
    iterations: usize,
    dt: f64,
    substeps: usize,
    basepoint: f64,
    exec: Execution,
) -> Result<f64> {
    if iterations == 0 {
        return Err(Error::validation("discrete conjugacy needs at least one iteration"));
    }
    let chart = CoveringChart::new(basepoint - 1e-9);
    let per_point = map_ordered(exec, thetas, |&th| -> Result<f64> {
        let mut x = on_circle(th);
        let mut phi = chart.section(x);
        let mut worst = dist(chart.cover(phi), x);
        for _ in 0..iterations {
            phi = reference_flow(|p: f64| lifted_field(&chart, p), phi, dt, substeps)?;
            x = reference_flow(ambient_field, x, dt, substeps)?;
            worst = worst.max(dist(chart.cover(phi), x));
        }
        Ok(worst)
    });
    per_point.into_iter().try_fold(0.0f64, |acc, d| Ok(acc.max(d?)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
    ExpectedFail,
}

/// Antipodal witness for the round-trip lower bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundWitness {
    pub z: Vec<f64>,
    pub neg_z: Vec<f64>,
    /// `‖E(z) − E(−z)‖`.
    pub residual: f64,
    /// `‖D(E(z)) − D(E(−z))‖`.
    pub decoded_gap: f64,
    pub err_z: f64,
    pub err_neg_z: f64,
    pub bound: f64,
    pub status: Status,
}

impl BoundWitness {
    pub fn max_err(&self) -> f64 {
        self.err_z.max(self.err_neg_z)
    }

    /// `err(z) + err(−z) ≥ ‖z − (−z)‖ − ‖D(E(z)) − D(E(−z))‖`, the triangle
    /// inequality behind the bound.
    pub fn triangle_holds(&self) -> bool {
        self.err_z + self.err_neg_z >= 2.0 * self.bound - self.decoded_gap - 1e-12
    }
}

fn dist3(p: [f64; 3], q: [f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn neg3(p: [f64; 3]) -> [f64; 3] {
    [-p[0], -p[1], -p[2]]
}

fn witness(z: [f64; 3], enc_gap: f64, dec_at: impl Fn([f64; 3]) -> [f64; 3], searched: bool) -> BoundWitness {
    const BOUND: f64 = 1.0;
    let (pz, pn) = (dec_at(z), dec_at(neg3(z)));
    let err_z = dist3(pz, z);
    let err_neg_z = dist3(pn, neg3(z));
    let certified = err_z.max(err_neg_z) >= BOUND * (1.0 - 1e-3);
    let status = match (searched, certified) {
        (false, _) => Status::Inconclusive,
        (true, true) => Status::Pass,
        (true, false) => Status::Fail,
    };
    BoundWitness {
        z: z.to_vec(),
        neg_z: neg3(z).to_vec(),
        residual: enc_gap,
        decoded_gap: dist3(pz, pn),
        err_z,
        err_neg_z,
        bound: BOUND,
        status,
    }
}

/// One-dimensional latent: bisect the odd map `g(s) = E(γ(s)) − E(γ(s + π))`
/// along the great circle `γ(s) = cos s·u + sin s·v` (orthonormal `u`, `v`).
pub fn borsuk_ulam_circle(
    enc: impl Fn([f64; 3]) -> f64,
    dec: impl Fn(f64) -> [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
) -> BoundWitness {
    let gamma = |s: f64| {
        let (c, sn) = (s.cos(), s.sin());
        [c * u[0] + sn * v[0], c * u[1] + sn * v[1], c * u[2] + sn * v[2]]
    };
    let g = |s: f64| enc(gamma(s)) - enc(neg3(gamma(s)));
    let (mut lo, mut hi) = (0.0, PI);
    let (mut glo, ghi) = (g(lo), g(hi));
    let mut s = lo;
    let searched = glo.is_finite() && ghi.is_finite();
    if searched && glo != 0.0 {
        s = hi;
        if ghi != 0.0 {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let gm = g(mid);
                s = mid;
                if gm == 0.0 || hi - lo < 1e-15 {
                    break;
                }
                if (gm > 0.0) == (glo > 0.0) {
                    lo = mid;
                    glo = gm;
                } else {
                    hi = mid;
                }
            }
        }
    }
    let z = gamma(s);
    let residual = g(s).abs();
    witness(z, residual, |y| dec(enc(y)), searched && residual <= 1e-6)
}

/// Two-dimensional latent on the whole sphere: damped Newton on the odd map
/// `E(y) − E(−y)` in tangent coordinates from seeded random starts. Zeros
/// exist but are not guaranteed to be found; failure is inconclusive.
pub fn borsuk_ulam_sphere(
    enc: impl Fn([f64; 3]) -> [f64; 2],
    dec: impl Fn([f64; 2]) -> [f64; 3],
    starts: usize,
    seed: u64,
) -> BoundWitness {
    let g = |y: [f64; 3]| {
        let (p, q) = (enc(y), enc(neg3(y)));
        [p[0] - q[0], p[1] - q[1]]
    };
    let norm2 = |v: [f64; 2]| v[0].hypot(v[1]);
    let mut rng = rng_for(seed, Purpose::Data);
    let mut best = ([0.0, 0.0, 1.0], f64::INFINITY);
    for _ in 0..starts.max(1) {
        let mut y = random_unit(&mut rng);
        let mut r = norm2(g(y));
        for _ in 0..100 {
            if !(r > 1e-12) {
                break;
            }
            let (t1, t2) = tangent_frame(y);
            let h = 1e-7;
            let g0 = g(y);
            let col = |t: [f64; 3]| {
                let gp = g(normalize([y[0] + h * t[0], y[1] + h * t[1], y[2] + h * t[2]]));
                [(gp[0] - g0[0]) / h, (gp[1] - g0[1]) / h]
            };
            let (c1, c2) = (col(t1), col(t2));
            let det = c1[0] * c2[1] - c2[0] * c1[1];
            if det.abs() < 1e-300 || !det.is_finite() {
                break;
            }
            let a = -(c2[1] * g0[0] - c2[0] * g0[1]) / det;
            let b = -(-c1[1] * g0[0] + c1[0] * g0[1]) / det;
            let mut step = 1.0;
            let mut improved = false;
            while step > 1e-6 {
                let cand = normalize([
                    y[0] + step * (a * t1[0] + b * t2[0]),
                    y[1] + step * (a * t1[1] + b * t2[1]),
                    y[2] + step * (a * t1[2] + b * t2[2]),
                ]);
                let rc = norm2(g(cand));
                if rc < r {
                    y = cand;
                    r = rc;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if r < best.1 {
            best = (y, r);
        }
    }
    let (z, residual) = best;
    witness(z, residual, |y| dec(enc(y)), residual <= 1e-4)
}

fn normalize(p: [f64; 3]) -> [f64; 3] {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    [p[0] / n, p[1] / n, p[2] / n]
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let p: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        if n2 > 1e-6 && n2 <= 1.0 {
            return normalize(p);
        }
    }
}

fn tangent_frame(y: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let a = if y[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let d = a[0] * y[0] + a[1] * y[1] + a[2] * y[2];
    let t1 = normalize([a[0] - d * y[0], a[1] - d * y[1], a[2] - d * y[2]]);
    let t2 = [
        y[1] * t1[2] - y[2] * t1[1],
        y[2] * t1[0] - y[0] * t1[2],
        y[0] * t1[1] - y[1] * t1[0],
    ];
    (t1, t2)
}

/// Observed ratio of sup defects at `substeps` and `4 × substeps`.
pub fn refinement_ratio(coarse: f64, fine: f64) -> f64 {
    if fine > 0.0 {
        coarse / fine
    } else if coarse > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

/// One row of the theory report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sup_defect: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bound: Option<f64>,
    pub tolerance: f64,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detail: Option<String>,
}

impl CheckResult {
    /// Pass when `defect ≤ tolerance`.
    pub fn defect(name: &str, defect: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            sup_defect: Some(defect),
            bound: None,
            tolerance,
            status: if defect <= tolerance { Status::Pass } else { Status::Fail },
            detail: None,
        }
    }

    /// Pass when `value ≥ tolerance`.
    pub fn lower_bound(name: &str, value: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            sup_defect: None,
            bound: Some(value),
            tolerance,
            status: if value >= tolerance { Status::Pass } else { Status::Fail },
            detail: None,
        }
    }

    pub fn with_status(mut self, status: Status) -> Self {
        self.status = status;
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}
