//! Small divisors over the parameter box: Rüssmann index and amount of the
//! frequency map, exhaustive screening of the four divisor families,
//! excluded-measure estimates and the sublevel-set bounds behind them.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ConditionFamily, Error, Result};
use crate::genfun::modes_within;
use crate::homological::{divisor_threshold, lattice_distance};
use crate::model::{FrequencyMap, ParamBox};

/// A frequency map `ξ ↦ ω(ξ)` with derivatives.
pub trait FrequencySource: Sync {
    fn dim(&self) -> usize;
    fn omega(&self, xi: &[f64]) -> Vec<f64>;
    /// `∂^α ω_a(ξ)`; central differences with one Richardson step by default.
    fn derivative(&self, a: usize, alpha: &[u32], xi: &[f64]) -> f64 {
        fd_derivative(&|x: &[f64]| self.omega(x)[a], alpha, xi, 1e-4)
    }
}

impl FrequencySource for FrequencyMap {
    fn dim(&self) -> usize {
        self.n()
    }

    fn omega(&self, xi: &[f64]) -> Vec<f64> {
        FrequencyMap::omega(self, xi)
    }

    fn derivative(&self, a: usize, alpha: &[u32], xi: &[f64]) -> f64 {
        self.omega_derivative(a, alpha, xi)
    }
}

/// A frequency map given by a closure; derivatives by finite differences.
pub struct FnFrequency<F: Fn(&[f64]) -> Vec<f64> + Sync> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> FrequencySource for FnFrequency<F> {
    fn dim(&self) -> usize {
        self.n
    }

    fn omega(&self, xi: &[f64]) -> Vec<f64> {
        (self.f)(xi)
    }
}

fn central(f: &dyn Fn(&[f64]) -> f64, alpha: &[u32], xi: &[f64], h: f64) -> f64 {
    let Some(a) = alpha.iter().position(|&p| p > 0) else {
        return f(xi);
    };
    let mut lower = alpha.to_vec();
    lower[a] -= 1;
    let mut plus = xi.to_vec();
    let mut minus = xi.to_vec();
    plus[a] += h;
    minus[a] -= h;
    (central(f, &lower, &plus, h) - central(f, &lower, &minus, h)) / (2.0 * h)
}

/// Mixed partial derivative by nested central differences, Richardson
/// extrapolated once.
pub fn fd_derivative(f: &dyn Fn(&[f64]) -> f64, alpha: &[u32], xi: &[f64], h: f64) -> f64 {
    let coarse = central(f, alpha, xi, h);
    let fine = central(f, alpha, xi, h / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// Multi-indices with `|α| = order` in `n` variables.
fn multi_indices(n: usize, order: u32) -> Vec<Vec<u32>> {
    if n == 0 {
        return if order == 0 { vec![vec![]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in (0..=order).rev() {
        for rest in multi_indices(n - 1, order - first) {
            let mut e = vec![first];
            e.extend(rest);
            out.push(e);
        }
    }
    out
}

/// Grid of `points` per dimension over the box, including the faces.
pub fn box_grid(domain: &ParamBox, points: usize) -> Vec<Vec<f64>> {
    let n = domain.dim();
    let total = points.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|a| {
                    let c = idx % points;
                    idx /= points;
                    let s = if points > 1 { c as f64 / (points - 1) as f64 } else { 0.5 };
                    domain.lo[a] + s * (domain.hi[a] - domain.lo[a])
                })
                .collect()
        })
        .collect()
}

/// Rüssmann index `n̄` and amount `β` of a frequency map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RuessmannData {
    pub nbar: u32,
    pub beta_amount: f64,
    pub grid: Vec<Vec<f64>>,
    /// `max_{v ≤ n̄} |Dᵛ⟨k, ω⟩| / |k|₁` at each grid point, minimized over probes.
    pub amounts: Vec<f64>,
}

const RANK_TOL: f64 = 1e-8;
const BETA_SAFETY: f64 = 0.05;

fn derivative_matrix(src: &dyn FrequencySource, xi: &[f64], nbar: u32) -> DMatrix<f64> {
    let n = src.dim();
    let cols: Vec<Vec<u32>> = (0..=nbar).flat_map(|v| multi_indices(n, v)).collect();
    DMatrix::from_fn(n, cols.len(), |a, c| src.derivative(a, &cols[c], xi))
}

fn rank(m: &DMatrix<f64>) -> usize {
    m.clone().svd(false, false).singular_values.iter().filter(|&&s| s > RANK_TOL).count()
}

/// Probe vectors: `±e_a` and random `k` with `|k|₁ ≤ 20`.
pub fn probe_vectors(n: usize, count: usize, seed: u64) -> Vec<Vec<i32>> {
    let mut out = Vec::new();
    for a in 0..n {
        for s in [1, -1] {
            let mut k = vec![0; n];
            k[a] = s;
            out.push(k);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < 2 * n + count {
        let k: Vec<i32> = (0..n).map(|_| rng.gen_range(-20..=20)).collect();
        let abs: i32 = k.iter().map(|v| v.abs()).sum();
        if abs > 0 && abs <= 20 {
            out.push(k);
        }
    }
    out
}

/// Smallest `n̄ ≤ nbar_max` such that `{∂^α ω(ξ) : |α| ≤ n̄}` spans `ℝⁿ` at
/// every grid point, and the amount `β`.
pub fn russmann_index_amount(src: &dyn FrequencySource, domain: &ParamBox, nbar_max: u32, points: usize) -> Result<RuessmannData> {
    let n = src.dim();
    let grid = box_grid(domain, points);
    let ranks_at = |nbar: u32| -> Vec<usize> { grid.par_iter().map(|xi| rank(&derivative_matrix(src, xi, nbar))).collect() };
    let mut found = None;
    for nbar in 0..=nbar_max {
        if ranks_at(nbar).iter().all(|&r| r == n) {
            found = Some(nbar);
            break;
        }
    }
    let Some(nbar) = found else {
        let ranks = ranks_at(nbar_max);
        let worst = ranks.iter().enumerate().min_by_key(|(_, r)| **r).map(|(i, _)| grid[i].clone()).unwrap_or_default();
        return Err(Error::RankConditionUnmet { nbar_max: nbar_max as usize, worst_xi: worst });
    };
    let probes = probe_vectors(n, 50, 0);
    let orders: Vec<Vec<Vec<u32>>> = (0..=nbar).map(|v| multi_indices(n, v)).collect();
    let amounts: Vec<f64> = grid
        .par_iter()
        .map(|xi| {
            probes
                .iter()
                .map(|k| {
                    let kabs: i32 = k.iter().map(|v| v.abs()).sum();
                    let best = orders
                        .iter()
                        .flatten()
                        .map(|alpha| (0..n).map(|a| k[a] as f64 * src.derivative(a, alpha, xi)).sum::<f64>().abs())
                        .fold(0.0, f64::max);
                    best / kabs as f64
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let beta = (1.0 - BETA_SAFETY) * amounts.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(RuessmannData { nbar, beta_amount: beta, grid, amounts })
}

/// Ranges and thresholds of a divisor screen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenParams {
    pub t: f64,
    pub gamma: f64,
    pub tau: f64,
    pub k_max: u32,
    /// `|l| ≤ |k|·K̂` for the first family.
    pub k_hat: f64,
    /// `|l| ≤ |k|·K̂′` for the families involving elliptic angles.
    pub k_hat_prime: f64,
}

impl ScreenParams {
    /// Windows from the frequency bound: `K̂ = |ω| + cε + 1` and
    /// `K̂′ = K̂ + 3 max |B⁰|`.
    pub fn with_windows(t: f64, gamma: f64, tau: f64, k_max: u32, sup_omega: f64, drift: f64, max_b: f64) -> Self {
        let k_hat = sup_omega + drift + 1.0;
        ScreenParams { t, gamma, tau, k_max, k_hat, k_hat_prime: k_hat + 3.0 * max_b }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub k: Vec<i32>,
    pub l: i64,
    pub i: Option<usize>,
    pub j: Option<usize>,
    pub condition: ConditionFamily,
    pub margin: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResonanceReport {
    pub xi: Vec<f64>,
    pub violations: Vec<Violation>,
    pub passed: bool,
    pub margins_recorded: usize,
    pub min_margin: f64,
}

/// Angle combinations of the families 2–4: `(family, i, j, shift)`, both signs.
pub fn angle_combinations(theta: &[f64]) -> Vec<(ConditionFamily, Option<usize>, Option<usize>, f64)> {
    let m = theta.len();
    let mut out = Vec::new();
    for j in 0..m {
        for s in [1.0, -1.0] {
            out.push((2, None, Some(j), s * theta[j]));
        }
    }
    for i in 0..m {
        for j in i..m {
            for s in [1.0, -1.0] {
                out.push((3, Some(i), Some(j), s * (theta[i] + theta[j])));
            }
        }
    }
    for i in 0..m {
        for j in i + 1..m {
            for s in [1.0, -1.0] {
                out.push((4, Some(i), Some(j), s * (theta[i] - theta[j])));
            }
        }
    }
    out
}

fn window(k: &[i32], hat: f64) -> i64 {
    let kabs: i32 = k.iter().map(|v| v.abs()).sum();
    (kabs as f64 * hat).floor() as i64
}

/// Checks `|⟨k, tω⟩ + σ − 2πl| ≥ tγ/|k|^τ` for every `k` with
/// `|k|₁ ≤ k_max`, every `l` in the window and every angle combination `σ`
/// (`σ = 0` for the first family, which skips `k = 0`).
pub fn screen_small_divisors(omega: &[f64], theta: &[f64], xi: &[f64], p: &ScreenParams) -> ResonanceReport {
    let combos = angle_combinations(theta);
    let mut violations = Vec::new();
    let mut count = 0;
    let mut min_margin = f64::INFINITY;
    for k in modes_within(omega.len(), p.k_max) {
        let phi = p.t * k.iter().zip(omega).map(|(&k, w)| k as f64 * w).sum::<f64>();
        let thr = divisor_threshold(p.t, p.gamma, p.tau, &k);
        let zero = k.iter().all(|&v| v == 0);
        let mut record = |family, i, j, shift: f64, l: i64| {
            let margin = (phi + shift - std::f64::consts::TAU * l as f64).abs() - thr;
            count += 1;
            min_margin = min_margin.min(margin);
            if margin < 0.0 {
                violations.push(Violation { k: k.clone(), l, i, j, condition: family, margin });
            }
        };
        if !zero {
            let w = window(&k, p.k_hat);
            for l in -w..=w {
                record(1, None, None, 0.0, l);
            }
        }
        let w = window(&k, p.k_hat_prime);
        for l in -w..=w {
            for &(family, i, j, shift) in &combos {
                record(family, i, j, shift, l);
            }
        }
    }
    ResonanceReport { xi: xi.to_vec(), passed: violations.is_empty(), violations, margins_recorded: count, min_margin }
}

/// Which families are violated at one parameter, using the nearest lattice
/// point instead of a window scan.
pub fn violated_families(omega: &[f64], theta: &[f64], t: f64, gamma: f64, tau: f64, k_max: u32) -> [bool; 4] {
    let combos = angle_combinations(theta);
    let mut out = [false; 4];
    for k in modes_within(omega.len(), k_max) {
        let phi = t * k.iter().zip(omega).map(|(&k, w)| k as f64 * w).sum::<f64>();
        let thr = divisor_threshold(t, gamma, tau, &k);
        if k.iter().any(|&v| v != 0) && lattice_distance(phi).0 < thr {
            out[0] = true;
        }
        for &(family, _, _, shift) in &combos {
            if lattice_distance(phi + shift).0 < thr {
                out[family as usize - 1] = true;
            }
        }
    }
    out
}

/// 95% Wilson score interval for `x` successes out of `n`.
pub fn wilson_interval(x: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let nf = n as f64;
    let p = x as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let center = (p + z * z / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Settings of an excluded-measure estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureParams {
    pub t: f64,
    pub tau: f64,
    pub k_max: u32,
    /// Cells per dimension.
    pub grid_res: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub gamma: f64,
    /// `|V|` times the fraction of excluded cell centres.
    pub measure: f64,
    /// Same, per family (a cell may count in several).
    pub breakdown: [f64; 4],
    pub mc_measure: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    #[serde(skip)]
    pub excluded_cells: Vec<bool>,
}

/// Cell centres of a uniform grid with `res` cells per dimension.
pub fn cell_centres(domain: &ParamBox, res: usize) -> Vec<Vec<f64>> {
    let n = domain.dim();
    (0..res.pow(n as u32))
        .map(|mut idx| {
            (0..n)
                .map(|a| {
                    let c = idx % res;
                    idx /= res;
                    domain.lo[a] + (c as f64 + 0.5) / res as f64 * (domain.hi[a] - domain.lo[a])
                })
                .collect()
        })
        .collect()
}

/// Measure of the parameters in `V` removed by the divisor conditions at
/// threshold `γ`. The thresholds `γ_v` of later steps are smaller, so the
/// step-0 conditions already contain the union over the schedule.
pub fn excluded_measure(freq: &dyn FrequencySource, domain: &ParamBox, theta: &[f64], gamma: f64, p: &MeasureParams) -> Result<MeasureEstimate> {
    if p.grid_res < 64 {
        return Err(Error::GridTooCoarse { points: p.grid_res, required: 64 });
    }
    let cells = cell_centres(domain, p.grid_res);
    let flags: Vec<[bool; 4]> = cells
        .par_iter()
        .map(|xi| violated_families(&freq.omega(xi), theta, p.t, gamma, p.tau, p.k_max))
        .collect();
    let vol = domain.volume();
    let total = cells.len() as f64;
    let excluded_cells: Vec<bool> = flags.iter().map(|f| f.iter().any(|&b| b)).collect();
    let count = excluded_cells.iter().filter(|&&b| b).count();
    let mut breakdown = [0.0; 4];
    for f in &flags {
        for (b, &v) in breakdown.iter_mut().zip(f) {
            if v {
                *b += vol / total;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let samples: Vec<Vec<f64>> = (0..p.mc_samples).map(|_| domain.sample(&mut rng)).collect();
    let hits = samples
        .par_iter()
        .filter(|xi| violated_families(&freq.omega(xi), theta, p.t, gamma, p.tau, p.k_max).iter().any(|&b| b))
        .count();
    let (lo, hi) = wilson_interval(hits, p.mc_samples);
    Ok(MeasureEstimate {
        gamma,
        measure: vol * count as f64 / total,
        breakdown,
        mc_measure: if p.mc_samples > 0 { vol * hits as f64 / p.mc_samples as f64 } else { 0.0 },
        ci_low: vol * lo,
        ci_high: vol * hi,
        excluded_cells,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// One row of a measure sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasureRow {
    pub gamma: f64,
    pub excluded_measure: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Log-log slope over the rows so far.
    pub slope_running: Option<f64>,
}

/// Excluded measure over a ladder of `γ` values.
pub fn measure_sweep(
    freq: &dyn FrequencySource,
    domain: &ParamBox,
    theta: &[f64],
    gammas: &[f64],
    p: &MeasureParams,
) -> Result<(Vec<MeasureRow>, Vec<MeasureEstimate>)> {
    let mut rows = Vec::new();
    let mut estimates = Vec::new();
    for &g in gammas {
        let est = excluded_measure(freq, domain, theta, g, p)?;
        estimates.push(est);
        let xs: Vec<f64> = estimates.iter().map(|e| e.gamma).collect();
        let ys: Vec<f64> = estimates.iter().map(|e| e.measure).collect();
        let last = estimates.last().expect("just pushed");
        rows.push(MeasureRow {
            gamma: g,
            excluded_measure: last.measure,
            ci_low: last.ci_low,
            ci_high: last.ci_high,
            slope_running: log_log_slope(&xs, &ys),
        });
    }
    Ok((rows, estimates))
}

pub fn measure_csv(rows: &[MeasureRow]) -> String {
    let mut out = String::from("gamma,excluded_measure,ci_low,ci_high,slope_running\n");
    for r in rows {
        let slope = r.slope_running.map(|s| format!("{s:.6}")).unwrap_or_default();
        out.push_str(&format!("{:e},{:e},{:e},{:e},{}\n", r.gamma, r.excluded_measure, r.ci_low, r.ci_high, slope));
    }
    out
}

/// Result of a sublevel-set measurement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SublevelResult {
    pub measure: f64,
    /// `2 (m! h / d)^{1/m}`.
    pub bound: f64,
    pub holds: bool,
}

const SUBLEVEL_SAMPLES: usize = 20_000;
/// Accuracy of the located crossings.
pub const SUBLEVEL_TOL: f64 = 1e-8;

fn bisect(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let mut fa = f(a);
    while b - a > 1e-13 {
        let mid = 0.5 * (a + b);
        let fm = f(mid);
        if (fm > 0.0) == (fa > 0.0) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// Measure of `{x ∈ [a, b] : |g(x)| < h}` after checking `|g^{(m)}| ≥ d` on a
/// fine grid. Crossings of `g = ±h` are located on a sample grid and refined
/// by bisection.
pub fn sublevel_measure(
    g: &dyn Fn(f64) -> f64,
    gm: &dyn Fn(f64) -> f64,
    interval: (f64, f64),
    h: f64,
    m_order: u32,
    d_floor: f64,
) -> Result<SublevelResult> {
    let (a, b) = interval;
    if !(b > a) || !(h > 0.0) || !(d_floor > 0.0) || m_order == 0 {
        return Err(Error::InvalidInput("sublevel measure needs a < b, h > 0, d > 0, m ≥ 1".into()));
    }
    let step = (b - a) / SUBLEVEL_SAMPLES as f64;
    let xs: Vec<f64> = (0..=SUBLEVEL_SAMPLES).map(|i| a + i as f64 * step).collect();
    for &x in &xs {
        let v = gm(x).abs();
        if v < d_floor * (1.0 - 1e-12) {
            return Err(Error::DerivativeFloorViolated { x, value: v, floor: d_floor });
        }
    }
    let mut cuts = vec![a, b];
    for target in [h, -h] {
        let f = |x: f64| g(x) - target;
        for w in xs.windows(2) {
            let (f0, f1) = (f(w[0]), f(w[1]));
            if f0 == 0.0 {
                cuts.push(w[0]);
            } else if (f0 > 0.0) != (f1 > 0.0) {
                cuts.push(bisect(&f, w[0], w[1]));
            }
        }
    }
    cuts.sort_by(|x, y| x.total_cmp(y));
    let measure: f64 = cuts.windows(2).filter(|w| g(0.5 * (w[0] + w[1])).abs() < h).map(|w| w[1] - w[0]).sum();
    let fact: f64 = (1..=m_order).map(|v| v as f64).product();
    let bound = 2.0 * (fact * h / d_floor).powf(1.0 / m_order as f64);
    Ok(SublevelResult { measure, bound, holds: measure <= bound + SUBLEVEL_TOL })
}

/// Fraction of a parameter grid where the 1×1 matrix
/// `M(ξ) = ⟨k, tω(ξ)⟩ − 2πl − θ + P(ξ)` has `|M⁻¹| > |k̃|^τ / (tα)`, with
/// `|k̃| = |k|₁ + |l|`.
#[allow(clippy::too_many_arguments)]
pub fn lemma52_matrix_screen(
    freq: &dyn FrequencySource,
    grid: &[Vec<f64>],
    k: &[i32],
    l: i64,
    theta: f64,
    perturbation: &(dyn Fn(&[f64]) -> f64 + Sync),
    alpha: f64,
    tau: f64,
    t: f64,
) -> Result<f64> {
    if grid.len() < 1000 {
        return Err(Error::GridTooCoarse { points: grid.len(), required: 1000 });
    }
    let ktil = k.iter().map(|v| v.abs() as f64).sum::<f64>() + l.abs() as f64;
    let thr = t * alpha / ktil.powf(tau);
    let bad = grid
        .par_iter()
        .filter(|xi| {
            let w = freq.omega(xi);
            let mval = t * k.iter().zip(&w).map(|(&k, w)| k as f64 * w).sum::<f64>() - std::f64::consts::TAU * l as f64 - theta + perturbation(xi);
            mval.abs() < thr
        })
        .count();
    Ok(bad as f64 / grid.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multi_index_counts() {
        assert_eq!(multi_indices(2, 2).len(), 3);
        assert_eq!(multi_indices(1, 3), vec![vec![3]]);
    }

    #[test]
    fn wilson_contains_the_estimate() {
        let (lo, hi) = wilson_interval(30, 100);
        assert!(lo < 0.3 && 0.3 < hi);
        assert_eq!(wilson_interval(0, 10).0, 0.0);
    }

    #[test]
    fn slope_of_a_power_law() {
        let x = [1.0, 2.0, 4.0];
        let y = [3.0, 12.0, 48.0];
        assert!((log_log_slope(&x, &y).unwrap() - 2.0).abs() < 1e-12);
    }
}
