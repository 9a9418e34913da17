//! The symplectic twist map defined implicitly by a generating Hamiltonian,
//! the implicit-midpoint difference scheme, an order-8 Gauss–Legendre
//! reference flow, and exact Jacobians.

use std::f64::consts::TAU;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::FourierField;
use crate::model::{GeneratingHamiltonian, SchemeModel};

pub const NEWTON_TOL: f64 = 1e-13;
pub const NEWTON_MAX_ITER: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, u: Vec<f64>, y: Vec<f64>, v: Vec<f64>) -> Self {
        PhasePoint { x, u, y, v }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn m(&self) -> usize {
        self.u.len()
    }

    /// Coordinates in the order `(x, u, y, v)`.
    pub fn to_vec(&self) -> Vec<f64> {
        [&self.x[..], &self.u[..], &self.y[..], &self.v[..]].concat()
    }

    pub fn from_slice(z: &[f64], n: usize, m: usize) -> Self {
        PhasePoint {
            x: z[..n].to_vec(),
            u: z[n..n + m].to_vec(),
            y: z[n + m..2 * n + m].to_vec(),
            v: z[2 * n + m..].to_vec(),
        }
    }

    /// Angles reduced into `[0, 2π)`.
    pub fn reduced(mut self) -> Self {
        self.x.iter_mut().for_each(|x| *x = x.rem_euclid(TAU));
        self
    }

    /// Max-norm distance with angle differences taken modulo `2π`.
    pub fn distance(&self, other: &PhasePoint) -> f64 {
        let mut d: f64 = 0.0;
        for (a, b) in self.x.iter().zip(&other.x) {
            let r = (a - b).rem_euclid(TAU);
            d = d.max(r.min(TAU - r));
        }
        for (a, b) in self.u.iter().chain(&self.y).chain(&self.v).zip(other.u.iter().chain(&other.y).chain(&other.v)) {
            d = d.max((a - b).abs());
        }
        d
    }

    fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|c| c.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitSolveReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Value, gradient and Hessian of a field at a point, in the variable order
/// `(x, u, y, v)` where the field's `ŷ`/`v̂` slots play the role of `y`/`v`.
pub fn field_derivatives(field: &FourierField, z: &[f64], with_hessian: bool) -> (f64, Vec<f64>, DMatrix<f64>) {
    let (n, m) = (field.n, field.m);
    let d = 2 * (n + m);
    let mut val = 0.0;
    let mut grad = vec![0.0; d];
    let mut hess = DMatrix::zeros(if with_hessian { d } else { 0 }, if with_hessian { d } else { 0 });
    let x = &z[..n];
    // Action slot a ∈ 0..n+2m maps to coordinate index n + a: (u, y, v).
    let w = &z[n..];
    let na = n + 2 * m;
    for (mode, &c) in field.iter() {
        let phase: f64 = mode.k.iter().zip(x).map(|(&k, &x)| k as f64 * x).sum();
        let e = c * Complex64::from_polar(1.0, phase);
        let exps: Vec<u32> = mode.i.iter().chain(&mode.l).chain(&mode.j).copied().collect();
        let mono = |d1: Option<usize>, d2: Option<usize>| -> f64 {
            let mut p = 1.0;
            for a in 0..na {
                let r = d1.map_or(0, |q| (q == a) as u32) + d2.map_or(0, |q| (q == a) as u32);
                let ea = exps[a];
                if r > ea {
                    return 0.0;
                }
                let mut f = 1.0;
                for q in 0..r {
                    f *= (ea - q) as f64;
                }
                p *= f * w[a].powi((ea - r) as i32);
            }
            p
        };
        let m0 = mono(None, None);
        val += (e * m0).re;
        let dm: Vec<f64> = (0..na).map(|a| mono(Some(a), None)).collect();
        let ik: Vec<Complex64> = mode.k.iter().map(|&k| Complex64::new(0.0, k as f64)).collect();
        for a in 0..n {
            grad[a] += (e * ik[a] * m0).re;
        }
        for a in 0..na {
            grad[n + a] += (e * dm[a]).re;
        }
        if with_hessian {
            for a in 0..n {
                for b in 0..n {
                    hess[(a, b)] += (e * ik[a] * ik[b] * m0).re;
                }
                for b in 0..na {
                    let v = (e * ik[a] * dm[b]).re;
                    hess[(a, n + b)] += v;
                    hess[(n + b, a)] += v;
                }
            }
            for a in 0..na {
                for b in 0..na {
                    hess[(n + a, n + b)] += (e * mono(Some(a), Some(b))).re;
                }
            }
        }
    }
    (val, grad, hess)
}

/// Map defined implicitly by a generating function `S(x, u, ŷ, v̂)`:
/// `x̂ = x + ∂_ŷS`, `û = u + ∂_v̂S`, `y = ŷ + ∂_xS`, `v = v̂ + ∂_uS`.
#[derive(Clone, Debug)]
pub struct GeneratingMap {
    pub field: FourierField,
}

impl GeneratingMap {
    pub fn new(field: FourierField) -> Self {
        GeneratingMap { field }
    }

    pub fn from_hamiltonian(h: &GeneratingHamiltonian) -> Self {
        GeneratingMap { field: h.generating_field() }
    }

    fn dims(&self) -> (usize, usize) {
        (self.field.n, self.field.m)
    }

    /// Applies the map without reducing angles.
    pub fn apply_lifted(&self, z: &PhasePoint) -> Result<(PhasePoint, ImplicitSolveReport)> {
        if !z.is_finite() {
            return Err(Error::NonFinite("phase point"));
        }
        let (n, m) = self.dims();
        let k = n + m;
        let mut zz = z.to_vec();
        // Unknowns q̂ = (ŷ, v̂), initial guess (y, v).
        let q: Vec<f64> = zz[k..].to_vec();
        let mut report = ImplicitSolveReport { iterations: 0, residual: f64::INFINITY, converged: false };
        for it in 0..=NEWTON_MAX_ITER {
            let (_, g, h) = field_derivatives(&self.field, &zz, true);
            let res: Vec<f64> = (0..k).map(|a| zz[k + a] + g[a] - q[a]).collect();
            let rn = res.iter().fold(0.0f64, |m, r| m.max(r.abs()));
            report.iterations = it;
            report.residual = rn;
            if !rn.is_finite() {
                return Err(Error::NonFinite("twist map residual"));
            }
            if rn <= NEWTON_TOL {
                report.converged = true;
                break;
            }
            if it == NEWTON_MAX_ITER {
                return Err(Error::NewtonDiverged { context: "twist map", iterations: it, residual: rn });
            }
            let jac = DMatrix::from_fn(k, k, |a, b| (a == b) as u8 as f64 + h[(a, k + b)]);
            let step = jac
                .lu()
                .solve(&DVector::from_vec(res))
                .ok_or(Error::SingularJacobian { context: "twist map" })?;
            for a in 0..k {
                zz[k + a] -= step[a];
            }
        }
        let (_, g, _) = field_derivatives(&self.field, &zz, false);
        let mut out = zz.clone();
        for a in 0..k {
            out[a] = zz[a] + g[k + a];
        }
        Ok((PhasePoint::from_slice(&out, n, m), report))
    }

    pub fn apply(&self, z: &PhasePoint) -> Result<(PhasePoint, ImplicitSolveReport)> {
        self.apply_lifted(z).map(|(p, r)| (p.reduced(), r))
    }

    /// Inverse map: recovers `(x, u)` from `x̂ = x + ∂_ŷS(x, u, ŷ, v̂)` by Newton.
    pub fn apply_inverse(&self, zhat: &PhasePoint) -> Result<(PhasePoint, ImplicitSolveReport)> {
        let (n, m) = self.dims();
        let k = n + m;
        let target = zhat.to_vec();
        let mut zz = target.clone();
        let mut report = ImplicitSolveReport { iterations: 0, residual: f64::INFINITY, converged: false };
        for it in 0..=NEWTON_MAX_ITER {
            let (_, g, h) = field_derivatives(&self.field, &zz, true);
            let res: Vec<f64> = (0..k).map(|a| zz[a] + g[k + a] - target[a]).collect();
            let rn = res.iter().fold(0.0f64, |m, r| m.max(r.abs()));
            report.iterations = it;
            report.residual = rn;
            if rn <= NEWTON_TOL {
                report.converged = true;
                break;
            }
            if it == NEWTON_MAX_ITER || !rn.is_finite() {
                return Err(Error::NewtonDiverged { context: "inverse twist map", iterations: it, residual: rn });
            }
            let jac = DMatrix::from_fn(k, k, |a, b| (a == b) as u8 as f64 + h[(k + a, b)]);
            let step = jac
                .lu()
                .solve(&DVector::from_vec(res))
                .ok_or(Error::SingularJacobian { context: "inverse twist map" })?;
            for a in 0..k {
                zz[a] -= step[a];
            }
        }
        let (_, g, _) = field_derivatives(&self.field, &zz, false);
        let mut out = zz.clone();
        for a in 0..k {
            out[k + a] = zz[k + a] + g[a];
        }
        Ok((PhasePoint::from_slice(&out, n, m), report))
    }

    /// Largest violation of the four implicit relations for a claimed image.
    pub fn relation_residual(&self, z: &PhasePoint, zhat: &PhasePoint) -> f64 {
        let (n, m) = self.dims();
        let k = n + m;
        let (zv, hv) = (z.to_vec(), zhat.to_vec());
        let mixed: Vec<f64> = zv[..k].iter().chain(&hv[k..]).copied().collect();
        let (_, g, _) = field_derivatives(&self.field, &mixed, false);
        let mut r: f64 = 0.0;
        for a in 0..k {
            r = r.max((hv[a] - zv[a] - g[k + a]).abs());
            r = r.max((zv[k + a] - hv[k + a] - g[a]).abs());
        }
        r
    }

    /// Exact Jacobian through the implicit function theorem, columns and rows
    /// ordered `(x, u, y, v)`.
    pub fn jacobian(&self, z: &PhasePoint) -> Result<DMatrix<f64>> {
        let (n, m) = self.dims();
        let k = n + m;
        let (zhat, _) = self.apply_lifted(z)?;
        let (zv, hv) = (z.to_vec(), zhat.to_vec());
        let mixed: Vec<f64> = zv[..k].iter().chain(&hv[k..]).copied().collect();
        let (_, _, h) = field_derivatives(&self.field, &mixed, true);
        let s_pp = h.view((0, 0), (k, k)).into_owned();
        let s_pq = h.view((0, k), (k, k)).into_owned();
        let s_qp = h.view((k, 0), (k, k)).into_owned();
        let s_qq = h.view((k, k), (k, k)).into_owned();
        let eye = DMatrix::<f64>::identity(k, k);
        let inv = (&eye + &s_pq).try_inverse().ok_or(Error::SingularJacobian { context: "twist map jacobian" })?;
        // dq̂ = inv (dq − S_pp dp); dp̂ = dp + S_qp dp + S_qq dq̂.
        let dqhat_dp = -&inv * &s_pp;
        let dqhat_dq = inv.clone();
        let dphat_dp = &eye + &s_qp + &s_qq * &dqhat_dp;
        let dphat_dq = &s_qq * &dqhat_dq;
        let mut j = DMatrix::zeros(2 * k, 2 * k);
        j.view_mut((0, 0), (k, k)).copy_from(&dphat_dp);
        j.view_mut((0, k), (k, k)).copy_from(&dphat_dq);
        j.view_mut((k, 0), (k, k)).copy_from(&dqhat_dp);
        j.view_mut((k, k), (k, k)).copy_from(&dqhat_dq);
        Ok(j)
    }
}

/// Twist map of a generating Hamiltonian.
pub fn apply_twist_map(h: &GeneratingHamiltonian, z: &PhasePoint) -> Result<(PhasePoint, ImplicitSolveReport)> {
    GeneratingMap::from_hamiltonian(h).apply(z)
}

/// Standard symplectic form for the ordering `(x, u, y, v)`.
pub fn symplectic_form(n: usize, m: usize) -> DMatrix<f64> {
    let k = n + m;
    let mut j = DMatrix::zeros(2 * k, 2 * k);
    for a in 0..k {
        j[(a, k + a)] = 1.0;
        j[(k + a, a)] = -1.0;
    }
    j
}

/// `‖Jᵀ𝕁J − 𝕁‖∞` (max entry).
pub fn symplecticity_defect(jac: &DMatrix<f64>, n: usize, m: usize) -> f64 {
    let om = symplectic_form(n, m);
    (jac.transpose() * &om * jac - om).amax()
}

/// Hamiltonian vector field `ẋ = H_y, u̇ = H_v, ẏ = −H_x, v̇ = −H_u`.
#[derive(Clone, Debug)]
pub struct HamiltonianFlow {
    pub field: FourierField,
}

impl HamiltonianFlow {
    pub fn new(field: FourierField) -> Self {
        HamiltonianFlow { field }
    }

    pub fn from_scheme(model: &SchemeModel) -> Self {
        HamiltonianFlow { field: model.hamiltonian_field() }
    }

    fn k(&self) -> usize {
        self.field.n + self.field.m
    }

    pub fn vector_field(&self, z: &[f64]) -> Vec<f64> {
        let k = self.k();
        let (_, g, _) = field_derivatives(&self.field, z, false);
        let mut f = vec![0.0; 2 * k];
        for a in 0..k {
            f[a] = g[k + a];
            f[k + a] = -g[a];
        }
        f
    }

    /// `Df = 𝕁⁻¹ D²H` for the ordering above.
    pub fn vector_field_jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let k = self.k();
        let (_, _, h) = field_derivatives(&self.field, z, true);
        let mut df = DMatrix::zeros(2 * k, 2 * k);
        for a in 0..k {
            for b in 0..2 * k {
                df[(a, b)] = h[(k + a, b)];
                df[(k + a, b)] = -h[(a, b)];
            }
        }
        df
    }

    /// One implicit-midpoint step `ẑ = z + t f((z + ẑ)/2)` (angles unreduced).
    pub fn midpoint_step(&self, z: &[f64], t: f64) -> Result<(Vec<f64>, ImplicitSolveReport)> {
        let d = z.len();
        let mut zh: Vec<f64> = z.to_vec();
        let f0 = self.vector_field(z);
        zh.iter_mut().zip(&f0).for_each(|(a, f)| *a += t * f);
        let mut report = ImplicitSolveReport { iterations: 0, residual: f64::INFINITY, converged: false };
        for it in 0..=NEWTON_MAX_ITER {
            let mid: Vec<f64> = z.iter().zip(&zh).map(|(a, b)| 0.5 * (a + b)).collect();
            let f = self.vector_field(&mid);
            let res: Vec<f64> = (0..d).map(|a| zh[a] - z[a] - t * f[a]).collect();
            let rn = res.iter().fold(0.0f64, |m, r| m.max(r.abs()));
            report.iterations = it;
            report.residual = rn;
            if rn <= NEWTON_TOL {
                report.converged = true;
                break;
            }
            if it == NEWTON_MAX_ITER || !rn.is_finite() {
                return Err(Error::NewtonDiverged { context: "implicit midpoint", iterations: it, residual: rn });
            }
            let jac = DMatrix::<f64>::identity(d, d) - self.vector_field_jacobian(&mid) * (0.5 * t);
            let step = jac
                .lu()
                .solve(&DVector::from_vec(res))
                .ok_or(Error::SingularJacobian { context: "implicit midpoint" })?;
            zh.iter_mut().zip(step.iter()).for_each(|(a, s)| *a -= s);
        }
        Ok((zh, report))
    }

    /// Jacobian of the midpoint step: `(I − t/2·Df)⁻¹(I + t/2·Df)` at the midpoint.
    pub fn midpoint_jacobian(&self, z: &[f64], t: f64) -> Result<DMatrix<f64>> {
        let (zh, _) = self.midpoint_step(z, t)?;
        let mid: Vec<f64> = z.iter().zip(&zh).map(|(a, b)| 0.5 * (a + b)).collect();
        let d = z.len();
        let df = self.vector_field_jacobian(&mid) * (0.5 * t);
        let eye = DMatrix::<f64>::identity(d, d);
        let lhs = (&eye - &df).try_inverse().ok_or(Error::SingularJacobian { context: "midpoint jacobian" })?;
        Ok(lhs * (eye + df))
    }

    /// Reference flow over time `t` with `substeps` Gauss–Legendre steps.
    pub fn reference_flow(&self, z: &[f64], t: f64, substeps: usize) -> Result<Vec<f64>> {
        let tab = gauss_legendre_tableau(4);
        let h = t / substeps as f64;
        let mut zc = z.to_vec();
        for _ in 0..substeps {
            zc = self.gauss_step(&zc, h, &tab)?;
        }
        Ok(zc)
    }

    fn gauss_step(&self, z: &[f64], h: f64, tab: &ButcherTableau) -> Result<Vec<f64>> {
        let s = tab.c.len();
        let d = z.len();
        let f0 = self.vector_field(z);
        let mut k: Vec<Vec<f64>> = vec![f0; s];
        for it in 0..200 {
            let mut delta: f64 = 0.0;
            let mut next = Vec::with_capacity(s);
            for i in 0..s {
                let zi: Vec<f64> = (0..d).map(|c| z[c] + h * (0..s).map(|j| tab.a[i][j] * k[j][c]).sum::<f64>()).collect();
                let ki = self.vector_field(&zi);
                delta = delta.max(ki.iter().zip(&k[i]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())));
                next.push(ki);
            }
            k = next;
            if delta <= 1e-15 * (1.0 + k.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))) {
                break;
            }
            if it == 199 {
                return Err(Error::NewtonDiverged { context: "Gauss-Legendre stages", iterations: it, residual: delta });
            }
        }
        Ok((0..d).map(|c| z[c] + h * (0..s).map(|j| tab.b[j] * k[j][c]).sum::<f64>()).collect())
    }
}

/// Apply the implicit-midpoint scheme for `H_ε` over one step `t`.
pub fn apply_scheme(model: &SchemeModel, z: &PhasePoint, t: f64) -> Result<(PhasePoint, ImplicitSolveReport)> {
    let flow = HamiltonianFlow::from_scheme(model);
    let (n, m) = (model.n(), model.m());
    let (zh, rep) = flow.midpoint_step(&z.to_vec(), t)?;
    Ok((PhasePoint::from_slice(&zh, n, m).reduced(), rep))
}

#[derive(Clone, Debug)]
pub struct ButcherTableau {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Gauss–Legendre collocation tableau with `s` stages (order `2s`).
pub fn gauss_legendre_tableau(s: usize) -> ButcherTableau {
    // Roots of the Legendre polynomial P_s by Newton from Chebyshev guesses.
    let legendre = |x: f64| -> (f64, f64) {
        let (mut p0, mut p1) = (1.0, x);
        for k in 2..=s {
            let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
            p0 = p1;
            p1 = p2;
        }
        let dp = s as f64 * (x * p1 - p0) / (x * x - 1.0);
        (p1, dp)
    };
    let mut c: Vec<f64> = (0..s)
        .map(|i| {
            let mut x = -(std::f64::consts::PI * (i as f64 + 0.75) / (s as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, dp) = legendre(x);
                let dx = p / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            0.5 * (x + 1.0)
        })
        .collect();
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Weights from the closed form; stage integrals of the Lagrange basis by
    // the same rule scaled to [0, c_i], which is exact for degree s - 1.
    let b: Vec<f64> = c
        .iter()
        .map(|&ci| {
            let x = 2.0 * ci - 1.0;
            let (_, dp) = legendre(x);
            1.0 / ((1.0 - x * x) * dp * dp)
        })
        .collect();
    let lagrange = |j: usize, tau: f64| -> f64 {
        c.iter().enumerate().filter(|(m, _)| *m != j).map(|(_, &cm)| (tau - cm) / (c[j] - cm)).product()
    };
    let a = (0..s)
        .map(|i| (0..s).map(|j| c[i] * (0..s).map(|q| b[q] * lagrange(j, c[i] * c[q])).sum::<f64>()).collect())
        .collect();
    ButcherTableau { a, b, c }
}

/// Iterates a map, recording reduced points and lifted angles.
pub fn orbit(
    step: impl Fn(&PhasePoint) -> Result<(PhasePoint, ImplicitSolveReport)>,
    z0: &PhasePoint,
    steps: usize,
) -> Result<(Vec<PhasePoint>, Vec<Vec<f64>>)> {
    let mut pts = vec![z0.clone().reduced()];
    let mut lifted = vec![z0.x.clone()];
    let mut cur = z0.clone();
    for _ in 0..steps {
        let (next, _) = step(&cur)?;
        let lift: Vec<f64> = lifted.last().unwrap().iter().zip(next.x.iter().zip(&cur.x)).map(|(l, (a, b))| l + (a - b)).collect();
        cur = next.clone().reduced();
        pts.push(cur.clone());
        lifted.push(lift);
    }
    Ok((pts, lifted))
}

/// Orbit dump with header `step,x…,u…,y…,v…,lifted_x…`.
pub fn write_orbit_csv(w: &mut impl Write, pts: &[PhasePoint], lifted: &[Vec<f64>]) -> Result<()> {
    let Some(first) = pts.first() else { return Ok(()) };
    let (n, m) = (first.n(), first.m());
    let mut head = vec!["step".to_string()];
    head.extend((0..n).map(|a| format!("x{a}")));
    head.extend((0..m).map(|a| format!("u{a}")));
    head.extend((0..n).map(|a| format!("y{a}")));
    head.extend((0..m).map(|a| format!("v{a}")));
    head.extend((0..n).map(|a| format!("lifted_x{a}")));
    writeln!(w, "{}", head.join(","))?;
    for (s, (p, l)) in pts.iter().zip(lifted).enumerate() {
        let vals: Vec<String> = p.to_vec().iter().chain(l).map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "{s},{}", vals.join(","))?;
    }
    Ok(())
}
