//! Exponential decay fits and cluster bootstrap intervals.
//!
//! The model is `y = a * exp(-b x) + c` with `a >= 0`, `b >= 0` and
//! `0 <= c <= 1`, fitted by weighted least squares with a projected
//! Levenberg-Marquardt iteration started from several decay rates.

use std::thread;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

pub const MODEL_FORM: &str = "a*exp(-b*x)+c";
pub const B_STARTS: [f64; 4] = [0.5, 2.0, 8.0, 32.0];
pub const MAX_ITERATIONS: usize = 500;
pub const REL_TOLERANCE: f64 = 1e-10;
pub const MIN_REPLICATES: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least 4 distinct x values, got {0}")]
    TooFewPoints(usize),
    #[error("weights and points differ in length ({0} vs {1})")]
    WeightLength(usize, usize),
    #[error("non-finite or negative input")]
    BadInput,
    #[error("bootstrap needs at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("bootstrap needs at least {MIN_REPLICATES} replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("confidence level must lie in (0, 1), got {0}")]
    Level(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Params {
    pub fn eval(&self, x: f64) -> f64 {
        self.a * (-self.b * x).exp() + self.c
    }

    fn project(self) -> Self {
        Self {
            a: self.a.max(0.0),
            b: self.b.max(0.0),
            c: self.c.clamp(0.0, 1.0),
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitCi {
    pub level: f64,
    pub replicates: usize,
    pub a: Interval,
    pub b: Interval,
    pub c: Interval,
    /// Per distinct x: interval of the fitted curve value.
    pub points: Vec<(f64, Interval)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub model_form: String,
    pub params: Params,
    /// `sqrt(sum w (y - f)^2)`.
    pub residual_norm: f64,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci: Option<FitCi>,
}

/// Weighted sum of squared residuals.
pub fn objective(points: &[(f64, f64)], weights: &[f64], p: &Params) -> f64 {
    points
        .iter()
        .zip(weights)
        .map(|(&(x, y), &w)| w * (y - p.eval(x)).powi(2))
        .sum()
}

/// Solve a 3x3 system by Gaussian elimination with partial pivoting.
fn solve3(mut m: [[f64; 3]; 3], mut v: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        v.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            v[row] -= f * v[col];
        }
    }
    let mut out = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| m[row][k] * out[k]).sum();
        out[row] = (v[row] - s) / m[row][row];
    }
    Some(out)
}

/// Weighted linear fit of `(a, c)` for fixed `b`, projected onto the box.
fn linear_start(points: &[(f64, f64)], weights: &[f64], b: f64) -> Params {
    let (mut sw, mut se, mut sy, mut see, mut sey) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&(x, y), &w) in points.iter().zip(weights) {
        let e = (-b * x).exp();
        sw += w;
        se += w * e;
        sy += w * y;
        see += w * e * e;
        sey += w * e * y;
    }
    let det = sw * see - se * se;
    let (a, c) = if det.abs() > 1e-12 * sw * see.max(1e-300) {
        ((sw * sey - se * sy) / det, (see * sy - se * sey) / det)
    } else {
        (0.0, sy / sw)
    };
    Params { a, b, c }.project()
}

/// Projected Levenberg-Marquardt from `start`. Every accepted step lowers
/// the objective; `trace` receives the objective after each iteration.
fn levenberg_marquardt(
    points: &[(f64, f64)],
    weights: &[f64],
    start: Params,
    trace: &mut dyn FnMut(f64),
) -> (Params, f64, usize) {
    let mut p = start.project();
    let mut s = objective(points, weights, &p);
    let mut lambda = 1e-3;
    let mut iters = 0;
    while iters < MAX_ITERATIONS {
        iters += 1;
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&(x, y), &w) in points.iter().zip(weights) {
            let e = (-p.b * x).exp();
            let j = [e, -p.a * x * e, 1.0];
            let r = y - p.eval(x);
            for u in 0..3 {
                jtr[u] += w * j[u] * r;
                for v in 0..3 {
                    jtj[u][v] += w * j[u] * j[v];
                }
            }
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut m = jtj;
            for (u, row) in m.iter_mut().enumerate() {
                row[u] += lambda * jtj[u][u].max(1e-12);
            }
            let Some(d) = solve3(m, jtr) else {
                lambda *= 10.0;
                continue;
            };
            let cur = p.as_array();
            let cand = Params {
                a: cur[0] + d[0],
                b: cur[1] + d[1],
                c: cur[2] + d[2],
            }
            .project();
            let s_new = objective(points, weights, &cand);
            if s_new.is_finite() && s_new < s {
                let rel = (s - s_new) / s.max(f64::MIN_POSITIVE);
                p = cand;
                s = s_new;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                trace(s);
                if rel < REL_TOLERANCE || s == 0.0 {
                    return (p, s, iters);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            trace(s);
            break;
        }
    }
    (p, s, iters)
}

fn validate(points: &[(f64, f64)], weights: &[f64]) -> Result<(), FitError> {
    if points.len() != weights.len() {
        return Err(FitError::WeightLength(points.len(), weights.len()));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(FitError::BadInput);
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 4 {
        return Err(FitError::TooFewPoints(xs.len()));
    }
    Ok(())
}

/// Fit `a exp(-b x) + c` by weighted least squares.
pub fn fit_exponential(points: &[(f64, f64)], weights: &[f64]) -> Result<DecayFit, FitError> {
    fit_traced(points, weights, &mut |_| {})
}

/// As [`fit_exponential`], reporting the objective after every iteration
/// of every start.
pub fn fit_traced(points: &[(f64, f64)], weights: &[f64], trace: &mut dyn FnMut(f64)) -> Result<DecayFit, FitError> {
    validate(points, weights)?;
    let y0 = points[0].1;
    if points.iter().all(|p| p.1 == y0) {
        let params = Params { a: 0.0, b: 0.0, c: y0 }.project();
        return Ok(DecayFit {
            model_form: MODEL_FORM.into(),
            residual_norm: objective(points, weights, &params).sqrt(),
            params,
            iterations: 0,
            note: Some("constant data: a = 0, decay rate unidentifiable".into()),
            ci: None,
        });
    }
    let mut best: Option<(Params, f64, usize)> = None;
    for b in B_STARTS {
        let start = linear_start(points, weights, b);
        let run = levenberg_marquardt(points, weights, start, trace);
        if best.is_none_or(|(_, s, _)| run.1 < s) {
            best = Some(run);
        }
    }
    let (params, s, iterations) = best.expect("at least one start");
    Ok(DecayFit {
        model_form: MODEL_FORM.into(),
        params,
        residual_norm: s.sqrt(),
        iterations,
        note: None,
        ci: None,
    })
}

/// Collapse raw observations to one weighted point per distinct x.
pub fn bucket_points(obs: impl IntoIterator<Item = (f64, f64)>) -> (Vec<(f64, f64)>, Vec<f64>) {
    let mut sums: Vec<(f64, f64, f64)> = Vec::new();
    for (x, y) in obs {
        match sums.iter_mut().find(|s| s.0 == x) {
            Some(s) => {
                s.1 += y;
                s.2 += 1.0;
            }
            None => sums.push((x, y, 1.0)),
        }
    }
    sums.sort_by(|l, r| l.0.total_cmp(&r.0));
    sums.iter().map(|&(x, sy, n)| ((x, sy / n), n)).unzip()
}

/// Percentile interval from the order statistics of `samples`.
pub fn percentile_interval(samples: &mut [f64], level: f64) -> Interval {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let alpha = (1.0 - level) / 2.0;
    // The nudge keeps levels like 0.9 from landing one rank off through
    // rounding in `1 - level`.
    let lo = ((alpha * n as f64 + 1e-9).floor() as usize).min(n - 1);
    let hi = (((1.0 - alpha) * n as f64 - 1e-9).ceil() as usize).saturating_sub(1).min(n - 1);
    Interval {
        lo: samples[lo],
        hi: samples[hi.max(lo)],
    }
}

/// Cluster bootstrap: resample whole clusters with replacement `replicates`
/// times, evaluate `statistic` on each resample, and return one percentile
/// interval per statistic component. Replicates run in parallel but each
/// draws from its own derived seed, so results do not depend on scheduling.
/// Replicates where the statistic fails are skipped.
pub fn bootstrap_ci<C, F>(clusters: &[C], statistic: F, replicates: usize, level: f64, seed: u64) -> Result<Vec<Interval>, FitError>
where
    C: Sync,
    F: Fn(&[&C]) -> Option<Vec<f64>> + Sync,
{
    if clusters.len() < 2 {
        return Err(FitError::TooFewClusters(clusters.len()));
    }
    if replicates < MIN_REPLICATES {
        return Err(FitError::TooFewReplicates(replicates));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(FitError::Level(level));
    }
    let one = |r: usize| -> Option<Vec<f64>> {
        let mut rng = seed::rng(seed::derive(seed, &[r as u64]));
        let pick: Vec<&C> = (0..clusters.len())
            .map(|_| &clusters[rng.gen_range(0..clusters.len())])
            .collect();
        statistic(&pick)
    };
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(replicates);
    let chunk = replicates.div_ceil(workers);
    let results: Vec<Option<Vec<f64>>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let one = &one;
                scope.spawn(move || (w * chunk..((w + 1) * chunk).min(replicates)).map(one).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("bootstrap worker panicked"))
            .collect()
    });
    let ok: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let Some(width) = ok.first().map(Vec::len) else {
        return Err(FitError::BadInput);
    };
    Ok((0..width)
        .map(|i| {
            let mut col: Vec<f64> = ok.iter().map(|v| v[i]).collect();
            percentile_interval(&mut col, level)
        })
        .collect())
}

/// Fit pooled observations and attach cluster-bootstrap intervals for the
/// parameters and the fitted curve at each distinct x. Each cluster holds
/// every `(x, y)` observation of one target function.
pub fn fit_with_ci(clusters: &[Vec<(f64, f64)>], replicates: usize, level: f64, seed: u64) -> Result<DecayFit, FitError> {
    let (points, weights) = bucket_points(clusters.iter().flatten().copied());
    let mut fit = fit_exponential(&points, &weights)?;
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let stat = |pick: &[&Vec<(f64, f64)>]| {
        let (pts, w) = bucket_points(pick.iter().flat_map(|c| c.iter().copied()));
        let f = fit_exponential(&pts, &w).ok()?;
        let mut v = vec![f.params.a, f.params.b, f.params.c];
        v.extend(xs.iter().map(|&x| f.params.eval(x)));
        Some(v)
    };
    let iv = bootstrap_ci(clusters, stat, replicates, level, seed)?;
    // Widen to the point estimate so each interval brackets it.
    let hull = |i: Interval, v: f64| Interval {
        lo: i.lo.min(v),
        hi: i.hi.max(v),
    };
    let p = fit.params;
    fit.ci = Some(FitCi {
        level,
        replicates,
        a: hull(iv[0], p.a),
        b: hull(iv[1], p.b),
        c: hull(iv[2], p.c),
        points: xs.iter().zip(&iv[3..]).map(|(&x, &i)| (x, hull(i, p.eval(x)))).collect(),
    });
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn grid() -> Vec<f64> {
        (0..10).map(|i| i as f64 / 10.0).collect()
    }

    #[test]
    fn noiseless_recovery() {
        let truth = Params { a: 0.8, b: 3.0, c: 0.05 };
        let pts: Vec<_> = grid().into_iter().map(|x| (x, truth.eval(x))).collect();
        let f = fit_exponential(&pts, &[1.0; 10]).unwrap();
        assert!((f.params.a - 0.8).abs() < 1e-6, "{f:?}");
        assert!((f.params.b - 3.0).abs() < 1e-6, "{f:?}");
        assert!((f.params.c - 0.05).abs() < 1e-6, "{f:?}");
    }

    #[test]
    fn constant_data() {
        let pts: Vec<_> = grid().into_iter().map(|x| (x, 0.4)).collect();
        let f = fit_exponential(&pts, &[1.0; 10]).unwrap();
        assert_eq!((f.params.a, f.params.c), (0.0, 0.4));
        assert!(f.note.is_some());
    }

    #[test]
    fn sharp_decay_gives_large_rate() {
        // Full function always right, one removed line of six drops to ~0.24.
        let pts = vec![(0.0, 1.0), (1.0 / 6.0, 0.2386), (2.0 / 6.0, 0.06), (0.5, 0.01), (4.0 / 6.0, 0.0)];
        let f = fit_exponential(&pts, &[1.0; 5]).unwrap();
        assert!(f.params.b > 5.0, "{f:?}");
    }

    #[test]
    fn objective_never_increases() {
        let truth = Params { a: 0.6, b: 5.0, c: 0.1 };
        let mut rng = seed::rng(3);
        let noise = Normal::new(0.0, 0.02).unwrap();
        let pts: Vec<_> = grid().into_iter().map(|x| (x, truth.eval(x) + noise.sample(&mut rng))).collect();
        let w = [1.0; 10];
        for b in B_STARTS {
            let start = linear_start(&pts, &w, b);
            let mut last = objective(&pts, &w, &start);
            levenberg_marquardt(&pts, &w, start, &mut |s| {
                assert!(s <= last, "{s} > {last}");
                last = s;
            });
        }
    }

    #[test]
    fn rejects_too_few_x() {
        let pts = vec![(0.0, 1.0), (0.1, 0.5), (0.1, 0.4), (0.2, 0.3)];
        assert_eq!(fit_exponential(&pts, &[1.0; 4]).unwrap_err(), FitError::TooFewPoints(3));
    }

    #[test]
    fn bootstrap_contract() {
        let constant: Vec<f64> = vec![0.3; 50];
        let mean = |pick: &[&f64]| Some(vec![pick.iter().copied().sum::<f64>() / pick.len() as f64]);
        let iv = bootstrap_ci(&constant, mean, 200, 0.95, 1).unwrap();
        assert!(iv[0].width().abs() < 1e-12);
        assert_eq!(
            bootstrap_ci(&[1.0], mean, 200, 0.95, 1).unwrap_err(),
            FitError::TooFewClusters(1)
        );
        assert_eq!(
            bootstrap_ci(&constant, mean, 50, 0.95, 1).unwrap_err(),
            FitError::TooFewReplicates(50)
        );
    }

    #[test]
    fn bootstrap_bernoulli_width_matches_normal_approximation() {
        let mut rng = seed::rng(11);
        let data: Vec<f64> = (0..1000).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mean = |pick: &[&f64]| Some(vec![pick.iter().copied().sum::<f64>() / pick.len() as f64]);
        let a = bootstrap_ci(&data, mean, 1000, 0.95, 5).unwrap();
        let b = bootstrap_ci(&data, mean, 1000, 0.95, 5).unwrap();
        assert_eq!(a, b);
        let expect = 2.0 * 1.96 * (0.25f64 / 1000.0).sqrt();
        assert!((a[0].width() - expect).abs() < 0.2 * expect, "{} vs {expect}", a[0].width());
    }

    #[test]
    fn order_statistic_endpoints() {
        let mut s: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let iv = percentile_interval(&mut s, 0.9);
        assert_eq!((iv.lo, iv.hi), (5.0, 94.0));
    }

    #[test]
    fn fit_ci_brackets_estimates() {
        let truth = Params { a: 0.8, b: 3.0, c: 0.05 };
        let mut rng = seed::rng(9);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let clusters: Vec<Vec<(f64, f64)>> = (0..20)
            .map(|_| grid().into_iter().map(|x| (x, truth.eval(x) + noise.sample(&mut rng))).collect())
            .collect();
        let f = fit_with_ci(&clusters, 100, 0.95, 2).unwrap();
        let ci = f.ci.as_ref().unwrap();
        assert!(ci.a.contains(f.params.a) && ci.b.contains(f.params.b) && ci.c.contains(f.params.c));
        assert_eq!(ci.points.len(), 10);
    }
}
