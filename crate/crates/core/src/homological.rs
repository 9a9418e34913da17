//! Linearized conjugacy equations of one KAM step.
//!
//! The weight-≤2 part `tR` of the perturbation is split into components
//! `R000, R100, R010, R001, R011, R020, R002` (angle-dependent scalars,
//! vectors and matrices). Quadratic components follow the conventions
//! `⟨F011 u, v̂⟩ = Σ F011_ij v̂_i u_j` and `½⟨F020 u, u⟩`, so the field
//! coefficient of `u_i u_j` is `F020_ij` for `i < j` and `½F020_ii` on the
//! diagonal.
//!
//! Every equation is diagonal in the Fourier index `k`, so it is solved mode
//! by mode with the rotation factor `ζ = e^{i⟨k, tω⟩}`. The k = 0 parts that
//! cannot be removed go into the correction `N̂` of the normal form.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ConditionFamily, Error, Result};
use crate::fourier::{unit, FourierField, Mode};

pub type Coeffs = BTreeMap<Vec<i32>, Complex64>;

/// Weight-≤2 components of a generating function.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub n: usize,
    pub m: usize,
    pub k_max: u32,
    pub c000: Coeffs,
    pub c100: Vec<Coeffs>,
    pub c010: Vec<Coeffs>,
    pub c001: Vec<Coeffs>,
    /// `c011[i][j]`: coefficient of `v̂_i u_j`.
    pub c011: Vec<Vec<Coeffs>>,
    /// Symmetric; both halves stored.
    pub c020: Vec<Vec<Coeffs>>,
    pub c002: Vec<Vec<Coeffs>>,
}

fn mat(m: usize) -> Vec<Vec<Coeffs>> {
    vec![vec![Coeffs::new(); m]; m]
}

impl Components {
    pub fn zero(n: usize, m: usize, k_max: u32) -> Self {
        Components {
            n,
            m,
            k_max,
            c000: Coeffs::new(),
            c100: vec![Coeffs::new(); n],
            c010: vec![Coeffs::new(); m],
            c001: vec![Coeffs::new(); m],
            c011: mat(m),
            c020: mat(m),
            c002: mat(m),
        }
    }

    /// Reads the weight-≤2 part of a field; higher weights are ignored.
    pub fn from_field(f: &FourierField) -> Self {
        let (n, m) = (f.n, f.m);
        let z = |len| vec![0u32; len];
        let mut c = Components::zero(n, m, f.k_max);
        c.c000 = f.component(&z(n), &z(m), &z(m));
        for a in 0..n {
            c.c100[a] = f.component(&unit(n, a, 1), &z(m), &z(m));
        }
        for j in 0..m {
            c.c010[j] = f.component(&z(n), &unit(m, j, 1), &z(m));
            c.c001[j] = f.component(&z(n), &z(m), &unit(m, j, 1));
        }
        for i in 0..m {
            for j in 0..m {
                c.c011[i][j] = f.component(&z(n), &unit(m, j, 1), &unit(m, i, 1));
                if i <= j {
                    let (mut uu, mut vv) = if i == j {
                        (f.component(&z(n), &unit(m, i, 2), &z(m)), f.component(&z(n), &z(m), &unit(m, i, 2)))
                    } else {
                        let e = pair(m, i, j);
                        (f.component(&z(n), &e, &z(m)), f.component(&z(n), &z(m), &e))
                    };
                    if i == j {
                        uu.values_mut().for_each(|v| *v *= 2.0);
                        vv.values_mut().for_each(|v| *v *= 2.0);
                    }
                    c.c020[i][j] = uu.clone();
                    c.c020[j][i] = uu;
                    c.c002[i][j] = vv.clone();
                    c.c002[j][i] = vv;
                }
            }
        }
        c
    }

    pub fn to_field(&self) -> FourierField {
        let (n, m) = (self.n, self.m);
        let z = |len| vec![0u32; len];
        let mut f = FourierField::zero(n, m, self.k_max);
        let mut put = |coeffs: &Coeffs, l: Vec<u32>, i: Vec<u32>, j: Vec<u32>, scale: f64| {
            for (k, c) in coeffs {
                f.add_term(Mode::new(k.clone(), l.clone(), i.clone(), j.clone()), c * scale);
            }
        };
        put(&self.c000, z(n), z(m), z(m), 1.0);
        for a in 0..n {
            put(&self.c100[a], unit(n, a, 1), z(m), z(m), 1.0);
        }
        for j in 0..m {
            put(&self.c010[j], z(n), unit(m, j, 1), z(m), 1.0);
            put(&self.c001[j], z(n), z(m), unit(m, j, 1), 1.0);
        }
        for i in 0..m {
            for j in 0..m {
                put(&self.c011[i][j], z(n), unit(m, j, 1), unit(m, i, 1), 1.0);
            }
            put(&self.c020[i][i], z(n), unit(m, i, 2), z(m), 0.5);
            put(&self.c002[i][i], z(n), z(m), unit(m, i, 2), 0.5);
            for j in i + 1..m {
                put(&self.c020[i][j], z(n), pair(m, i, j), z(m), 1.0);
                put(&self.c002[i][j], z(n), z(m), pair(m, i, j), 1.0);
            }
        }
        f
    }

    fn all(&self) -> Vec<&Coeffs> {
        let mut v = vec![&self.c000];
        v.extend(self.c100.iter());
        v.extend(self.c010.iter());
        v.extend(self.c001.iter());
        for mats in [&self.c011, &self.c020, &self.c002] {
            for row in mats.iter() {
                v.extend(row.iter());
            }
        }
        v
    }

    /// Largest coefficient difference over all components.
    pub fn max_abs_diff(&self, other: &Components) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.all().into_iter().zip(other.all()) {
            for (k, c) in a {
                worst = worst.max((c - b.get(k).copied().unwrap_or_default()).norm());
            }
            for (k, c) in b {
                if !a.contains_key(k) {
                    worst = worst.max(c.norm());
                }
            }
        }
        worst
    }

    /// Every Fourier index that appears in some component.
    pub fn modes(&self) -> Vec<Vec<i32>> {
        let mut ks: Vec<Vec<i32>> = self.all().into_iter().flat_map(|c| c.keys().cloned()).collect();
        ks.sort();
        ks.dedup();
        ks
    }
}

fn pair(m: usize, i: usize, j: usize) -> Vec<u32> {
    let mut e = vec![0; m];
    e[i] += 1;
    e[j] += 1;
    e
}

fn get(c: &Coeffs, k: &[i32]) -> Complex64 {
    c.get(k).copied().unwrap_or_default()
}

fn put(c: &mut Coeffs, k: &[i32], v: Complex64) {
    if v != Complex64::default() {
        c.insert(k.to_vec(), v);
    }
}

/// Frequencies, angles and tolerances fixed during one step.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeContext {
    pub t: f64,
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    /// Current normal-form coefficients; normalized data have
    /// `a = sec θ`, `b = c = tan θ`.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub gamma: f64,
    pub tau: f64,
}

impl ModeContext {
    pub fn normalized(t: f64, omega: Vec<f64>, theta: Vec<f64>, gamma: f64, tau: f64) -> Self {
        let a = theta.iter().map(|th| 1.0 / th.cos()).collect();
        let b: Vec<f64> = theta.iter().map(|th| th.tan()).collect();
        ModeContext { t, omega, c: b.clone(), b, theta, a, gamma, tau }
    }

    pub fn phase(&self, k: &[i32]) -> f64 {
        self.t * k.iter().zip(&self.omega).map(|(&k, w)| k as f64 * w).sum::<f64>()
    }

    pub fn zeta(&self, k: &[i32]) -> Complex64 {
        Complex64::from_polar(1.0, self.phase(k))
    }

    pub fn threshold(&self, k: &[i32]) -> f64 {
        divisor_threshold(self.t, self.gamma, self.tau, k)
    }
}

/// `tγ / |k|^τ`, and `tγ` at `k = 0`.
pub fn divisor_threshold(t: f64, gamma: f64, tau: f64, k: &[i32]) -> f64 {
    let kabs: i32 = k.iter().map(|v| v.abs()).sum();
    t * gamma / (kabs.max(1) as f64).powf(tau)
}

/// One small divisor used in a solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisorRecord {
    pub k: Vec<i32>,
    pub family: ConditionFamily,
    pub i: Option<usize>,
    pub j: Option<usize>,
    /// Distance of the combination to `2πℤ`.
    pub divisor: f64,
    pub threshold: f64,
}

impl DivisorRecord {
    pub fn margin(&self) -> f64 {
        self.divisor - self.threshold
    }
}

/// Distance of `x` to `2πℤ` and the nearest lattice index.
pub fn lattice_distance(x: f64) -> (f64, i64) {
    let l = (x / TAU).round();
    ((x - l * TAU).abs(), l as i64)
}

/// Checks `|φ + shift − 2πl| ≥ threshold` for both signs of `shift` and
/// records the worse one.
fn check(
    ctx: &ModeContext,
    k: &[i32],
    family: ConditionFamily,
    shift: f64,
    i: Option<usize>,
    j: Option<usize>,
    log: &mut Vec<DivisorRecord>,
) -> Result<()> {
    let phi = ctx.phase(k);
    let (d1, l1) = lattice_distance(phi - shift);
    let (d2, l2) = lattice_distance(phi + shift);
    let (d, l) = if d1 <= d2 { (d1, l1) } else { (d2, l2) };
    let rec = DivisorRecord { k: k.to_vec(), family, i, j, divisor: d, threshold: ctx.threshold(k) };
    let margin = rec.margin();
    log.push(rec);
    if margin < 0.0 {
        return Err(Error::DivisorViolation { k: k.to_vec(), l, i, j, condition: family, margin });
    }
    Ok(())
}

/// Solution of the linearized equations.
#[derive(Clone, Debug)]
pub struct HomologicalSolution {
    pub f: Components,
    /// Corrections of the normal form, already divided by `t`:
    /// `N̂ = ⟨tω̂, ŷ⟩ + t⟨Âu, v̂⟩ + ½t⟨B̂u,u⟩ + ½t⟨Ĉv̂,v̂⟩`.
    pub omega_hat: Vec<f64>,
    pub a_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub c_hat: Vec<f64>,
    pub divisor_log: Vec<DivisorRecord>,
}

impl HomologicalSolution {
    pub fn min_margin(&self) -> f64 {
        self.divisor_log.iter().map(|r| r.margin()).fold(f64::INFINITY, f64::min)
    }
}

/// Scalar equations `F(x + tω) − F(x) = tR − [tR]`. Returns `F` and `[tR]`.
pub fn solve_scalar_modes(r: &Coeffs, ctx: &ModeContext, log: &mut Vec<DivisorRecord>) -> Result<(Coeffs, f64)> {
    let mut f = Coeffs::new();
    let mut mean = 0.0;
    for (k, &c) in r {
        if k.iter().all(|&v| v == 0) {
            mean = c.re;
            continue;
        }
        check(ctx, k, 1, 0.0, None, None, log)?;
        put(&mut f, k, c / (ctx.zeta(k) - 1.0));
    }
    Ok((f, mean))
}

/// The 2×2 block of the linear equations in `(F010_j, F001_j)`.
pub fn uv_matrix(a: f64, b: f64, c: f64, zeta: Complex64) -> [[Complex64; 2]; 2] {
    [[a * zeta - 1.0, Complex64::new(-b, 0.0)], [c * zeta, zeta - a]]
}

/// Linear terms in `u, v̂`, solved with the 2×2 block per mode (also k = 0).
pub fn solve_uv_modes(
    r010: &[Coeffs],
    r001: &[Coeffs],
    ctx: &ModeContext,
    log: &mut Vec<DivisorRecord>,
) -> Result<(Vec<Coeffs>, Vec<Coeffs>)> {
    let m = r010.len();
    let mut f010 = vec![Coeffs::new(); m];
    let mut f001 = vec![Coeffs::new(); m];
    for j in 0..m {
        let mut ks: Vec<&Vec<i32>> = r010[j].keys().chain(r001[j].keys()).collect();
        ks.sort();
        ks.dedup();
        for k in ks {
            check(ctx, k, 2, ctx.theta[j], None, Some(j), log)?;
            let mtx = uv_matrix(ctx.a[j], ctx.b[j], ctx.c[j], ctx.zeta(k));
            let det = mtx[0][0] * mtx[1][1] - mtx[0][1] * mtx[1][0];
            if det.norm() < 1e-300 {
                return Err(Error::SingularJacobian { context: "linear normal-mode block" });
            }
            let (r1, r2) = (get(&r010[j], k), get(&r001[j], k));
            put(&mut f010[j], k, (mtx[1][1] * r1 - mtx[0][1] * r2) / det);
            put(&mut f001[j], k, (mtx[0][0] * r2 - mtx[1][0] * r1) / det);
        }
    }
    Ok((f010, f001))
}

fn solve_dense(a: DMatrix<Complex64>, b: DVector<Complex64>) -> Result<DVector<Complex64>> {
    a.lu().solve(&b).ok_or(Error::SingularJacobian { context: "quadratic normal-mode block" })
}

/// Quadratic terms. Diagonal k = 0 parts become `Â, B̂, Ĉ` (returned times `t`).
#[allow(clippy::type_complexity)]
pub fn solve_quadratic_modes(
    r011: &[Vec<Coeffs>],
    r020: &[Vec<Coeffs>],
    r002: &[Vec<Coeffs>],
    ctx: &ModeContext,
    log: &mut Vec<DivisorRecord>,
) -> Result<(Vec<Vec<Coeffs>>, Vec<Vec<Coeffs>>, Vec<Vec<Coeffs>>, [Vec<f64>; 3])> {
    let m = r011.len();
    let (a, b, c) = (&ctx.a, &ctx.b, &ctx.c);
    let mut f011 = mat(m);
    let mut f020 = mat(m);
    let mut f002 = mat(m);
    let mut means = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
    for i in 0..m {
        for j in i..m {
            let mut ks: Vec<&Vec<i32>> = r011[i][j]
                .keys()
                .chain(r011[j][i].keys())
                .chain(r020[i][j].keys())
                .chain(r002[i][j].keys())
                .collect();
            ks.sort();
            ks.dedup();
            for k in ks {
                let z = ctx.zeta(k);
                let zero_k = k.iter().all(|&v| v == 0);
                if i == j {
                    if zero_k {
                        means[0][i] = get(&r011[i][i], k).re;
                        means[1][i] = get(&r020[i][i], k).re;
                        means[2][i] = get(&r002[i][i], k).re;
                        continue;
                    }
                    check(ctx, k, 1, 0.0, Some(i), Some(i), log)?;
                    check(ctx, k, 3, 2.0 * ctx.theta[i], Some(i), Some(i), log)?;
                    let (ai, bi, ci) = (a[i], b[i], c[i]);
                    // Unknowns (X, Y, Z) = (F011_ii, F020_ii, F002_ii).
                    let mtx = DMatrix::from_row_slice(
                        3,
                        3,
                        &[
                            ai * (z - 1.0),
                            z * ai * ci,
                            Complex64::new(-ai * bi, 0.0),
                            Complex64::new(-2.0 * bi, 0.0),
                            z * ai * ai - 1.0,
                            Complex64::new(-bi * bi, 0.0),
                            2.0 * z * ci,
                            z * ci * ci,
                            z - ai * ai,
                        ],
                    );
                    let rhs = DVector::from_vec(vec![get(&r011[i][i], k), get(&r020[i][i], k), get(&r002[i][i], k)]);
                    let x = solve_dense(mtx, rhs)?;
                    put(&mut f011[i][i], k, x[0]);
                    put(&mut f020[i][i], k, x[1]);
                    put(&mut f002[i][i], k, x[2]);
                } else {
                    check(ctx, k, 3, ctx.theta[i] + ctx.theta[j], Some(i), Some(j), log)?;
                    check(ctx, k, 4, ctx.theta[i] - ctx.theta[j], Some(i), Some(j), log)?;
                    let o = Complex64::default;
                    let r = |v: f64| Complex64::new(v, 0.0);
                    // Unknowns (X1, X2, Y, Z) = (F011_ij, F011_ji, F020_ij, F002_ij).
                    let mtx = DMatrix::from_row_slice(
                        4,
                        4,
                        &[
                            z * a[j] - a[i],
                            o(),
                            z * c[i] * a[j],
                            r(-a[i] * b[j]),
                            o(),
                            z * a[i] - a[j],
                            z * c[j] * a[i],
                            r(-a[j] * b[i]),
                            r(-b[i]),
                            r(-b[j]),
                            z * a[i] * a[j] - 1.0,
                            r(-b[i] * b[j]),
                            z * c[j],
                            z * c[i],
                            z * c[i] * c[j],
                            z - a[i] * a[j],
                        ],
                    );
                    let rhs = DVector::from_vec(vec![
                        get(&r011[i][j], k),
                        get(&r011[j][i], k),
                        get(&r020[i][j], k),
                        get(&r002[i][j], k),
                    ]);
                    let x = solve_dense(mtx, rhs)?;
                    put(&mut f011[i][j], k, x[0]);
                    put(&mut f011[j][i], k, x[1]);
                    put(&mut f020[i][j], k, x[2]);
                    put(&mut f020[j][i], k, x[2]);
                    put(&mut f002[i][j], k, x[3]);
                    put(&mut f002[j][i], k, x[3]);
                }
            }
        }
    }
    Ok((f011, f020, f002, means))
}

/// Solves all linearized equations for the weight-≤2 part `tr` of `tP`.
pub fn solve_homological(tr: &Components, ctx: &ModeContext) -> Result<HomologicalSolution> {
    let (n, m) = (tr.n, tr.m);
    let mut log = Vec::new();
    let mut f = Components::zero(n, m, tr.k_max);
    f.c000 = solve_scalar_modes(&tr.c000, ctx, &mut log)?.0;
    let mut omega_hat = vec![0.0; n];
    for a in 0..n {
        let (fa, mean) = solve_scalar_modes(&tr.c100[a], ctx, &mut log)?;
        f.c100[a] = fa;
        omega_hat[a] = mean / ctx.t;
    }
    let (f010, f001) = solve_uv_modes(&tr.c010, &tr.c001, ctx, &mut log)?;
    f.c010 = f010;
    f.c001 = f001;
    let (f011, f020, f002, means) = solve_quadratic_modes(&tr.c011, &tr.c020, &tr.c002, ctx, &mut log)?;
    f.c011 = f011;
    f.c020 = f020;
    f.c002 = f002;
    let scale = |v: &Vec<f64>| v.iter().map(|x| x / ctx.t).collect::<Vec<f64>>();
    Ok(HomologicalSolution {
        f,
        omega_hat,
        a_hat: scale(&means[0]),
        b_hat: scale(&means[1]),
        c_hat: scale(&means[2]),
        divisor_log: log,
    })
}

/// The linearized operator `L F`, written on whole components with
/// diagonal `A, B, C`. Used to check solutions of [`solve_homological`].
pub fn apply_l_operator(f: &Components, ctx: &ModeContext) -> Components {
    let (n, m) = (f.n, f.m);
    let shift = |c: &Coeffs| -> Coeffs { c.iter().map(|(k, v)| (k.clone(), v * ctx.zeta(k))).collect() };
    let lin = |terms: Vec<(Complex64, &Coeffs)>| -> Coeffs {
        let mut out = Coeffs::new();
        for (s, c) in terms {
            for (k, v) in c {
                *out.entry(k.clone()).or_default() += s * v;
            }
        }
        out.retain(|_, v| *v != Complex64::default());
        out
    };
    let r = |v: f64| Complex64::new(v, 0.0);
    let (a, b, c) = (&ctx.a, &ctx.b, &ctx.c);
    let mut out = Components::zero(n, m, f.k_max);
    let s000 = shift(&f.c000);
    out.c000 = lin(vec![(r(1.0), &s000), (r(-1.0), &f.c000)]);
    for d in 0..n {
        let s = shift(&f.c100[d]);
        out.c100[d] = lin(vec![(r(1.0), &s), (r(-1.0), &f.c100[d])]);
    }
    for j in 0..m {
        let s010 = shift(&f.c010[j]);
        let s001 = shift(&f.c001[j]);
        out.c010[j] = lin(vec![(r(a[j]), &s010), (r(-1.0), &f.c010[j]), (r(-b[j]), &f.c001[j])]);
        out.c001[j] = lin(vec![(r(c[j]), &s010), (r(1.0), &s001), (r(-a[j]), &f.c001[j])]);
    }
    let s011: Vec<Vec<Coeffs>> = f.c011.iter().map(|row| row.iter().map(shift).collect()).collect();
    let s020: Vec<Vec<Coeffs>> = f.c020.iter().map(|row| row.iter().map(shift).collect()).collect();
    let s002: Vec<Vec<Coeffs>> = f.c002.iter().map(|row| row.iter().map(shift).collect()).collect();
    for i in 0..m {
        for j in 0..m {
            out.c011[i][j] = lin(vec![
                (r(a[j]), &s011[i][j]),
                (r(-a[i]), &f.c011[i][j]),
                (r(c[i] * a[j]), &s020[i][j]),
                (r(-a[i] * b[j]), &f.c002[i][j]),
            ]);
            out.c020[i][j] = lin(vec![
                (r(a[i] * a[j]), &s020[i][j]),
                (r(-1.0), &f.c020[i][j]),
                (r(-b[i] * b[j]), &f.c002[i][j]),
                (r(-b[i]), &f.c011[i][j]),
                (r(-b[j]), &f.c011[j][i]),
            ]);
            out.c002[i][j] = lin(vec![
                (r(c[i] * c[j]), &s020[i][j]),
                (r(1.0), &s002[i][j]),
                (r(-a[i] * a[j]), &f.c002[i][j]),
                (r(c[j]), &s011[i][j]),
                (r(c[i]), &s011[j][i]),
            ]);
        }
    }
    out
}

/// Right-hand side the solution must reproduce: `tR` minus the parts moved
/// into the normal form.
pub fn homological_rhs(tr: &Components, sol: &HomologicalSolution, t: f64) -> Components {
    let mut rhs = tr.clone();
    let zero = vec![0; tr.n];
    rhs.c000.remove(&zero);
    for a in 0..tr.n {
        rhs.c100[a].remove(&zero);
    }
    for j in 0..tr.m {
        let sub = |c: &mut Coeffs, v: f64| {
            let e = c.entry(zero.clone()).or_default();
            *e -= t * v;
            if e.norm() < 1e-300 {
                c.remove(&zero);
            }
        };
        sub(&mut rhs.c011[j][j], sol.a_hat[j]);
        sub(&mut rhs.c020[j][j], sol.b_hat[j]);
        sub(&mut rhs.c002[j][j], sol.c_hat[j]);
    }
    rhs
}

/// Normalizing data of one normal mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationPair {
    pub lambda: f64,
    pub beta: f64,
}

/// `(a⁺, b⁺, c⁺)` after conjugating the `(u, v̂)` block `(a, b, c)` by
/// `diag`-type change `u = u₊/λ − βv₊`, `v = λv₊`.
pub fn normalized_block(a: f64, b: f64, c: f64, lambda: f64, beta: f64) -> (f64, f64, f64) {
    let (m11, m12, m21, m22) = (a - b * c / a, c / a, -b / a, 1.0 / a);
    // T = [[1/λ, −β], [0, λ]], M₊ = T⁻¹ M T.
    let (t11, t12, t22) = (1.0 / lambda, -beta, lambda);
    let mt12 = m11 * t12 + m12 * t22;
    let mt22 = m21 * t12 + m22 * t22;
    let mt21 = m21 * t11;
    let p12 = lambda * mt12 + beta * mt22;
    let p21 = mt21 / lambda;
    let p22 = mt22 / lambda;
    let ap = 1.0 / p22;
    (ap, -p21 * ap, p12 * ap)
}

/// Finds `(λ, β)` with `b⁺ = c⁺` and `a⁺² − b⁺² = 1` by Newton's method
/// from `(1, 0)`. Returns the pair and the new angle.
pub fn normalize_mode(a: f64, b: f64, c: f64) -> Result<(NormalizationPair, f64)> {
    let resid = |l: f64, be: f64| {
        let (ap, bp, cp) = normalized_block(a, b, c, l, be);
        [bp - cp, ap * ap - bp * bp - 1.0]
    };
    let (mut l, mut be) = (1.0, 0.0);
    let mut r = resid(l, be);
    for _ in 0..60 {
        let norm = r[0].abs().max(r[1].abs());
        if norm <= 1e-15 {
            break;
        }
        let h = 1e-7;
        let rl = resid(l + h, be);
        let rb = resid(l, be + h);
        let j = [[(rl[0] - r[0]) / h, (rb[0] - r[0]) / h], [(rl[1] - r[1]) / h, (rb[1] - r[1]) / h]];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-300 || !det.is_finite() {
            return Err(Error::NormalizationDiverged { residual: norm });
        }
        let dl = (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        let db = (j[0][0] * r[1] - j[1][0] * r[0]) / det;
        let (nl, nb) = (l - dl, be - db);
        let nr = resid(nl, nb);
        if nr[0].abs().max(nr[1].abs()) >= norm && norm < 1e-13 {
            break;
        }
        l = nl;
        be = nb;
        r = nr;
    }
    let norm = r[0].abs().max(r[1].abs());
    if !(norm <= 1e-12) || !(l > 0.0) {
        return Err(Error::NormalizationDiverged { residual: norm });
    }
    let (_, bp, _) = normalized_block(a, b, c, l, be);
    Ok((NormalizationPair { lambda: l, beta: be }, bp.atan()))
}

/// Generating function `Σ (λ_j − 1) u_j v̂_j + ½ λ_j β_j v̂_j²` of the
/// normalizing change of variables.
pub fn normalization_generator(n: usize, m: usize, k_max: u32, pairs: &[NormalizationPair]) -> FourierField {
    let mut g = FourierField::zero(n, m, k_max);
    let zn = vec![0; n];
    for (j, p) in pairs.iter().enumerate() {
        g.add_cos(zn.clone(), vec![0; n], unit(m, j, 1), unit(m, j, 1), p.lambda - 1.0);
        g.add_cos(zn.clone(), vec![0; n], vec![0; m], unit(m, j, 2), 0.5 * p.lambda * p.beta);
    }
    g.pruned(0.0)
}

/// `tN = t⟨ω, ŷ⟩ + Σ (a_j − 1) u_j v̂_j + ½ b_j u_j² + ½ c_j v̂_j²`.
pub fn normal_form_field(t: f64, omega: &[f64], a: &[f64], b: &[f64], c: &[f64], k_max: u32) -> FourierField {
    let (n, m) = (omega.len(), a.len());
    let mut f = FourierField::zero(n, m, k_max);
    for (d, w) in omega.iter().enumerate() {
        f.add_cos(vec![0; n], unit(n, d, 1), vec![0; m], vec![0; m], t * w);
    }
    for j in 0..m {
        crate::model::quad_terms(&mut f, n, m, j, a[j] - 1.0, b[j], c[j]);
    }
    f.pruned(0.0)
}

/// Normal form with `a = sec θ`, `b = c = tan θ`.
pub fn normal_form_from_angles(t: f64, omega: &[f64], theta: &[f64], k_max: u32) -> FourierField {
    let a: Vec<f64> = theta.iter().map(|th| 1.0 / th.cos()).collect();
    let b: Vec<f64> = theta.iter().map(|th| th.tan()).collect();
    normal_form_field(t, omega, &a, &b, &b, k_max)
}

/// `Q = tP̄ − tP̃`: what the composition added to the untouched high-order
/// part, where `tP̄ = S' − tN̄` is the perturbation after the correction.
pub fn remainder_q(conjugated: &FourierField, normal_bar: &FourierField, p_tilde: &FourierField) -> FourierField {
    crate::kamflow::strip(conjugated.sub(normal_bar).sub(p_tilde))
}

/// Integral form of the second-order Taylor remainder of `f` along the
/// segment `z → z + dz`, by 8-node Gauss–Legendre quadrature:
/// returns `(f(z+dz) − f(z) − ⟨∇f(z), dz⟩, ∫₀¹ (1−s)⟨D²f(z+s·dz)dz, dz⟩ ds)`.
pub fn taylor_remainder_check(f: &FourierField, z: &[f64], dz: &[f64]) -> (f64, f64) {
    use crate::sympmap::{field_derivatives, gauss_legendre_tableau};
    let zp: Vec<f64> = z.iter().zip(dz).map(|(a, b)| a + b).collect();
    let (f0, g0, _) = field_derivatives(f, z, false);
    let (f1, _, _) = field_derivatives(f, &zp, false);
    let direct = f1 - f0 - g0.iter().zip(dz).map(|(g, d)| g * d).sum::<f64>();
    let tab = gauss_legendre_tableau(8);
    let mut quad = 0.0;
    for (s, w) in tab.c.iter().zip(&tab.b) {
        let zs: Vec<f64> = z.iter().zip(dz).map(|(a, b)| a + s * b).collect();
        let (_, _, h) = field_derivatives(f, &zs, true);
        let d = nalgebra::DVector::from_column_slice(dz);
        quad += w * (1.0 - s) * (d.transpose() * &h * &d)[(0, 0)];
    }
    (direct, quad)
}

/// One KAM step: solve the linearized equations for the weight-≤2 part of
/// `tP`, conjugate, normalize the elliptic blocks, and re-measure the new
/// perturbation on the shrunken domain.
pub fn kam_step(state: &crate::kamflow::KamState) -> Result<crate::kamflow::KamState> {
    use crate::genfun::{conjugate, Projection};
    use crate::kamflow::{schedule_gamma, schedule_rho, strip, StepRecord, StepTransform};
    let t = state.t;
    let (n, m) = (state.n(), state.m());
    let cfg = &state.config;
    let ctx = ModeContext::normalized(t, state.omega.clone(), state.theta.clone(), state.gamma, state.constants.tau);
    let s = state.generating_field();
    let (r_part, p_tilde) = state.perturbation.truncate_order2();
    let sol = solve_homological(&Components::from_field(&r_part), &ctx)?;
    // In the convention of `genfun` the change solving `L F = tR − N̂` is
    // generated by `−F`.
    let f = sol.f.to_field().scale(-1.0).pruned(0.0);
    let proj = Projection { k_max: state.k_max, degree: cfg.degree };
    let c1 = conjugate(&s, &f, proj)?;
    let s1 = c1.field.pruned(DROP_TOL_PASS);
    let omega_bar: Vec<f64> = state.omega.iter().zip(&sol.omega_hat).map(|(w, h)| w + h).collect();
    let a_bar: Vec<f64> = (0..m).map(|j| ctx.a[j] + t * sol.a_hat[j]).collect();
    let b_bar: Vec<f64> = (0..m).map(|j| ctx.b[j] + t * sol.b_hat[j]).collect();
    let c_bar: Vec<f64> = (0..m).map(|j| ctx.c[j] + t * sol.c_hat[j]).collect();
    let n_bar = normal_form_field(t, &omega_bar, &a_bar, &b_bar, &c_bar, state.k_max);
    let q = remainder_q(&s1, &n_bar, &p_tilde);
    let mut pairs = Vec::with_capacity(m);
    let mut theta = Vec::with_capacity(m);
    for j in 0..m {
        let (p, th) = normalize_mode(a_bar[j], b_bar[j], c_bar[j])?;
        pairs.push(p);
        theta.push(th);
    }
    let g = normalization_generator(n, m, state.k_max, &pairs);
    let (s2, defect2) = if g.is_empty() {
        (s1, 0.0)
    } else {
        let c2 = conjugate(&s1, &g, proj)?;
        (c2.field, c2.gradient_defect)
    };
    let perturbation = strip(s2.sub(&normal_form_from_angles(t, &omega_bar, &theta, state.k_max)));

    let v = state.v;
    let eta = (state.eps / cfg.kappa).cbrt().min(cfg.eta_cap);
    let s_next = state.s - 5.0 * state.rho;
    if !(s_next > 0.0) {
        return Err(Error::InvalidInput(format!("analyticity width exhausted at step {v}")));
    }
    let r_next = state.r * eta;
    if !(r_next > 0.0) {
        return Err(Error::DivisionGuard("action radius collapsed to zero"));
    }
    let eps_raw = perturbation.weighted_norm(s_next, r_next)? / t;
    let eps_next = eps_raw * state.eps_unit;
    let q_norm = q.weighted_norm(s_next, r_next)? / t * state.eps_unit;
    if !eps_next.is_finite() || eps_next >= state.eps {
        return Err(Error::NormDidNotContract { eps: state.eps, eps_next });
    }
    let mut trace = state.trace.clone();
    trace.push(StepRecord {
        v,
        s_v: state.s,
        r_v: state.r,
        rho_v: state.rho,
        gamma_v: state.gamma,
        eps_v: state.eps,
        eta_v: eta,
        eps_next,
        min_divisor_margin: sol.min_margin(),
        omega: state.omega.clone(),
        theta: state.theta.clone(),
        q_norm,
        gradient_defect: c1.gradient_defect.max(defect2),
    });
    let mut composed_psi = state.composed_psi.clone();
    composed_psi.push(StepTransform { f, g });
    let [_, rho0, _, gamma0] = state.initial;
    Ok(crate::kamflow::KamState {
        v: v + 1,
        s: s_next,
        r: r_next,
        rho: schedule_rho(rho0, v + 1),
        gamma: schedule_gamma(gamma0, state.constants.nbar, state.constants.l_order, v + 1),
        eps: eps_next,
        eps_raw,
        omega: omega_bar,
        theta,
        perturbation,
        composed_psi,
        trace,
        ..state.clone()
    })
}

const DROP_TOL_PASS: f64 = crate::fourier::DROP_TOL;
