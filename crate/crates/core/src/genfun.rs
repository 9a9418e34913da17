//! Generating functions of composed maps.
//!
//! A near-identity symplectic map is stored through a mixed-variable
//! generating function `G(p, q₊)` with `p = (x, u)`, `q = (y, v)`:
//! `p₊ = p + ∂_qG(p, q₊)`, `q = q₊ + ∂_pG(p, q₊)`. Conjugating the map of a
//! generating function `S` by such a change of variables is done pointwise
//! on an angle grid, with the action variables carried as jets; the
//! gradients of the new generating function are then projected back onto a
//! [`FourierField`].

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fourier::{FourierField, Mode, Var};
use crate::jet::{self, Jet, JetSpace, TaylorEvaluator};
use crate::sympmap::{field_derivatives, NEWTON_MAX_ITER};

/// Grid and truncation parameters for projecting onto fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub k_max: u32,
    pub degree: u32,
}

impl Projection {
    /// Points per angle dimension.
    pub fn points(&self) -> usize {
        2 * self.k_max as usize + 2
    }
}

/// Gradient fields of a generating function, ordered `x, u, ŷ, v̂`.
struct Gradient {
    x: Vec<FourierField>,
    u: Vec<FourierField>,
    y: Vec<FourierField>,
    v: Vec<FourierField>,
}

impl Gradient {
    fn of(f: &FourierField) -> Self {
        Gradient {
            x: (0..f.n).map(|a| f.derivative(Var::X(a))).collect(),
            u: (0..f.m).map(|a| f.derivative(Var::U(a))).collect(),
            y: (0..f.n).map(|a| f.derivative(Var::Y(a))).collect(),
            v: (0..f.m).map(|a| f.derivative(Var::V(a))).collect(),
        }
    }
}

/// Jet-valued phase point `(x, u, y, v)`.
#[derive(Clone, Debug)]
struct JetPoint {
    x: Vec<Jet>,
    u: Vec<Jet>,
    y: Vec<Jet>,
    v: Vec<Jet>,
}

impl JetPoint {
    fn diff(&self, other: &JetPoint) -> f64 {
        let all = |p: &JetPoint| p.x.iter().chain(&p.u).chain(&p.y).chain(&p.v).cloned().collect::<Vec<_>>();
        all(self).iter().zip(all(other).iter()).map(|(a, b)| jet::max_abs(&jet::sub(a, b))).fold(0.0, f64::max)
    }
}

/// Evaluates `(∂_x, ∂_u, ∂_ŷ, ∂_v̂)` of a generating function at `(p, q)`.
fn eval_gradient(sp: &JetSpace, k_max: u32, base: &[f64], g: &Gradient, p: (&[Jet], &[Jet]), q: (&[Jet], &[Jet])) -> JetPoint {
    let mut ev = TaylorEvaluator::with_base(sp, k_max, base, p.0, p.1, q.0, q.1);
    JetPoint {
        x: g.x.iter().map(|f| ev.eval(f)).collect(),
        u: g.u.iter().map(|f| ev.eval(f)).collect(),
        y: g.y.iter().map(|f| ev.eval(f)).collect(),
        v: g.v.iter().map(|f| ev.eval(f)).collect(),
    }
}

fn add_all(a: &[Jet], b: &[Jet]) -> Vec<Jet> {
    a.iter().zip(b).map(|(x, y)| jet::add(x, y)).collect()
}

fn sub_all(a: &[Jet], b: &[Jet]) -> Vec<Jet> {
    a.iter().zip(b).map(|(x, y)| jet::sub(x, y)).collect()
}

/// Angle grid of a projection.
pub fn angle_grid(n: usize, points: usize) -> Vec<Vec<f64>> {
    let h = std::f64::consts::TAU / points as f64;
    let total = points.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|_| {
                    let c = idx % points;
                    idx /= points;
                    c as f64 * h
                })
                .collect()
        })
        .collect()
}

/// Projects grid samples of jets onto a field: jet monomial `(l, i, j)` at
/// angle `x` becomes the mode `(k, l, i, j)`.
pub fn project_samples(sp: &JetSpace, grid: &[Vec<f64>], samples: &[Jet], k_max: u32, max_weight: u32) -> FourierField {
    let (n, m) = (sp.n, sp.m);
    let points = grid.len();
    let mut out = FourierField::zero(n, m, k_max);
    let ks = modes_within(n, k_max);
    // Grid angles are 2πg/N; phases come from an exact table of N-th roots
    // of unity, indexed by k·g mod N, to avoid large arguments.
    let per_dim = (points as f64).powf(1.0 / n as f64).round() as i64;
    let h = std::f64::consts::TAU / per_dim as f64;
    let roots: Vec<Complex64> = (0..per_dim).map(|r| Complex64::from_polar(1.0, -(r as f64) * h)).collect();
    let index: Vec<Vec<i64>> = grid.iter().map(|x| x.iter().map(|&v| (v / h).round() as i64).collect()).collect();
    for k in &ks {
        let phases: Vec<Complex64> = index
            .iter()
            .map(|g| roots[(k.iter().zip(g).map(|(&k, &g)| k as i64 * g).sum::<i64>()).rem_euclid(per_dim) as usize])
            .collect();
        for idx in 0..sp.len() {
            if sp.weight(idx) > max_weight {
                continue;
            }
            let mut c = Complex64::default();
            for (s, ph) in samples.iter().zip(&phases) {
                c += ph * s[idx];
            }
            c /= points as f64;
            let (l, i, j) = sp.split(idx);
            out.set_term(Mode::new(k.clone(), l, i, j), c);
        }
    }
    out.symmetrized()
}

/// All `k ∈ ℤⁿ` with `|k|₁ ≤ k_max`, in lexicographic order.
pub fn modes_within(n: usize, k_max: u32) -> Vec<Vec<i32>> {
    let km = k_max as i32;
    let mut out = vec![vec![]];
    for _ in 0..n {
        let mut next = Vec::new();
        for k in &out {
            let used: i32 = k.iter().map(|v: &i32| v.abs()).sum();
            for c in -(km - used)..=(km - used) {
                let mut e = k.clone();
                e.push(c);
                next.push(e);
            }
        }
        out = next;
    }
    out
}

/// Gradient samples of a generating function on the angle grid.
pub struct GradientSamples {
    pub grid: Vec<Vec<f64>>,
    pub x: Vec<Vec<Jet>>,
    pub u: Vec<Vec<Jet>>,
    pub y: Vec<Vec<Jet>>,
    pub v: Vec<Vec<Jet>>,
}

/// Rebuilds a generating function (up to a constant) from its gradient
/// samples, and reports the largest mismatch between the rebuilt function's
/// gradient and the samples on the resolved weights.
pub fn reconstruct(sp: &JetSpace, samples: &GradientSamples, proj: Projection) -> (FourierField, f64) {
    let (n, m, d) = (sp.n, sp.m, proj.degree);
    let col = |data: &Vec<Vec<Jet>>, a: usize| -> Vec<Jet> { data.iter().map(|p| p[a].clone()).collect() };
    let gx: Vec<FourierField> = (0..n).map(|a| project_samples(sp, &samples.grid, &col(&samples.x, a), proj.k_max, d)).collect();
    let gu: Vec<FourierField> = (0..m).map(|a| project_samples(sp, &samples.grid, &col(&samples.u, a), proj.k_max, d - 1)).collect();
    let gy: Vec<FourierField> = (0..n).map(|a| project_samples(sp, &samples.grid, &col(&samples.y, a), proj.k_max, d - 2)).collect();
    let gv: Vec<FourierField> = (0..m).map(|a| project_samples(sp, &samples.grid, &col(&samples.v, a), proj.k_max, d - 1)).collect();
    let mut s = FourierField::zero(n, m, proj.k_max);
    let ks = modes_within(n, proj.k_max);
    for idx in 0..sp.len() {
        let (l, i, j) = sp.split(idx);
        for k in &ks {
            let lower = |e: &[u32], a: usize| {
                let mut e = e.to_vec();
                e[a] -= 1;
                e
            };
            let c = if let Some(a) = l.iter().position(|&p| p > 0) {
                gy[a].get(&Mode::new(k.clone(), lower(&l, a), i.clone(), j.clone())) / l[a] as f64
            } else if let Some(a) = i.iter().position(|&p| p > 0) {
                gu[a].get(&Mode::new(k.clone(), l.clone(), lower(&i, a), j.clone())) / i[a] as f64
            } else if let Some(a) = j.iter().position(|&p| p > 0) {
                gv[a].get(&Mode::new(k.clone(), l.clone(), i.clone(), lower(&j, a))) / j[a] as f64
            } else if let Some(a) = k.iter().position(|&p| p != 0) {
                gx[a].get(&Mode::new(k.clone(), l.clone(), i.clone(), j.clone())) / Complex64::new(0.0, k[a] as f64)
            } else {
                Complex64::default()
            };
            if c != Complex64::default() {
                s.set_term(Mode::new(k.clone(), l.clone(), i.clone(), j.clone()), c);
            }
        }
    }
    let s = s.symmetrized();
    let mut defect: f64 = 0.0;
    let resolved = |f: &FourierField, w: u32| f.filter(|m| m.weight() <= w);
    for a in 0..n {
        defect = defect.max(resolved(&s.derivative(Var::X(a)), d).max_abs_diff(&gx[a]));
        defect = defect.max(resolved(&s.derivative(Var::Y(a)), d - 2).max_abs_diff(&gy[a]));
    }
    for a in 0..m {
        defect = defect.max(resolved(&s.derivative(Var::U(a)), d - 1).max_abs_diff(&gu[a]));
        defect = defect.max(resolved(&s.derivative(Var::V(a)), d - 1).max_abs_diff(&gv[a]));
    }
    (s, defect)
}

/// Result of a conjugation.
#[derive(Clone, Debug)]
pub struct Conjugated {
    pub field: FourierField,
    /// Mismatch between the rebuilt generating function and its sampled
    /// gradient (a symplecticity check of the composition).
    pub gradient_defect: f64,
    pub max_iterations: usize,
}

const PICARD_MAX: usize = 200;

/// Generating function of `Ψ⁻¹ ∘ F_S ∘ Ψ` where `Ψ` is generated by `g`.
pub fn conjugate(s: &FourierField, g: &FourierField, proj: Projection) -> Result<Conjugated> {
    let (n, m) = (s.n, s.m);
    let sp = JetSpace::new(n, m, proj.degree);
    let gs = Gradient::of(s);
    let gg = Gradient::of(g);
    let kev = s.k_max.max(g.k_max);
    let grid = angle_grid(n, proj.points());
    let results: Vec<Result<(JetPoint, usize)>> = grid
        .par_iter()
        .map(|x0| {
            // Angles are carried as offsets from the grid point `x0`.
            let xp: Vec<Jet> = vec![sp.zero(); n];
            let up: Vec<Jet> = (0..m).map(|a| sp.variable(n + a, 0.0)).collect();
            let yhp: Vec<Jet> = (0..n).map(|a| sp.variable(a, 0.0)).collect();
            let vhp: Vec<Jet> = (0..m).map(|a| sp.variable(n + m + a, 0.0)).collect();
            // Unknowns: p = (x, u), q̂ = (ŷ, v̂), p̂ = (x̂, û), q₊ = (y₊, v₊).
            let mut p = (xp.clone(), up.clone());
            let mut qh = (yhp.clone(), vhp.clone());
            let ds = eval_gradient(&sp, kev, x0, &gs, (&p.0, &p.1), (&qh.0, &qh.1));
            let mut ph = (add_all(&p.0, &ds.y), add_all(&p.1, &ds.v));
            let mut qp = (yhp.clone(), vhp.clone());
            let mut last = f64::INFINITY;
            for it in 0..PICARD_MAX {
                let dg = eval_gradient(&sp, kev, x0, &gg, (&p.0, &p.1), (&qp.0, &qp.1));
                let p_new = (sub_all(&xp, &dg.y), sub_all(&up, &dg.v));
                let dgh = eval_gradient(&sp, kev, x0, &gg, (&ph.0, &ph.1), (&yhp, &vhp));
                let qh_new = (add_all(&yhp, &dgh.x), add_all(&vhp, &dgh.u));
                let ds = eval_gradient(&sp, kev, x0, &gs, (&p_new.0, &p_new.1), (&qh_new.0, &qh_new.1));
                let ph_new = (add_all(&p_new.0, &ds.y), add_all(&p_new.1, &ds.v));
                let q = (add_all(&qh_new.0, &ds.x), add_all(&qh_new.1, &ds.u));
                let dg2 = eval_gradient(&sp, kev, x0, &gg, (&p_new.0, &p_new.1), (&qp.0, &qp.1));
                let qp_new = (sub_all(&q.0, &dg2.x), sub_all(&q.1, &dg2.u));
                let before = JetPoint { x: p.0.clone(), u: p.1.clone(), y: qp.0.clone(), v: qp.1.clone() };
                let after = JetPoint { x: p_new.0.clone(), u: p_new.1.clone(), y: qp_new.0.clone(), v: qp_new.1.clone() };
                let hat_before = JetPoint { x: ph.0.clone(), u: ph.1.clone(), y: qh.0.clone(), v: qh.1.clone() };
                let hat_after = JetPoint { x: ph_new.0.clone(), u: ph_new.1.clone(), y: qh_new.0.clone(), v: qh_new.1.clone() };
                let change = before.diff(&after).max(hat_before.diff(&hat_after));
                p = p_new;
                qh = qh_new;
                ph = ph_new;
                qp = qp_new;
                // Stop at round-off: either tiny, or no longer decreasing once small.
                if change <= 1e-17 || (change <= 1e-13 && change >= last) {
                    let dgh = eval_gradient(&sp, kev, x0, &gg, (&ph.0, &ph.1), (&yhp, &vhp));
                    let php = (add_all(&ph.0, &dgh.y), add_all(&ph.1, &dgh.v));
                    return Ok((
                        JetPoint {
                            x: sub_all(&qp.0, &yhp),
                            u: sub_all(&qp.1, &vhp),
                            y: sub_all(&php.0, &xp),
                            v: sub_all(&php.1, &up),
                        },
                        it + 1,
                    ));
                }
                last = change;
            }
            Err(Error::NewtonDiverged { context: "conjugation fixed point", iterations: PICARD_MAX, residual: last })
        })
        .collect();
    let mut max_iterations = 0;
    let mut samples = GradientSamples { grid: grid.clone(), x: vec![], u: vec![], y: vec![], v: vec![] };
    for r in results {
        let (jp, it) = r?;
        max_iterations = max_iterations.max(it);
        samples.x.push(jp.x);
        samples.u.push(jp.u);
        samples.y.push(jp.y);
        samples.v.push(jp.v);
    }
    let (field, gradient_defect) = reconstruct(&sp, &samples, proj);
    Ok(Conjugated { field, gradient_defect, max_iterations })
}

/// Maps a point from new to old coordinates through the change of
/// variables generated by `g`: solves `p₊ = p + ∂_qG(p, q₊)` for `p` by
/// Newton's method, then `q = q₊ + ∂_pG(p, q₊)`. Points are `(x, u, y, v)`.
pub fn apply_change(g: &FourierField, new: &[f64]) -> Result<Vec<f64>> {
    let k = g.n + g.m;
    if g.is_empty() {
        return Ok(new.to_vec());
    }
    let mut z = new.to_vec();
    for it in 0..=NEWTON_MAX_ITER {
        let (_, grad, h) = field_derivatives(g, &z, true);
        let res: Vec<f64> = (0..k).map(|a| z[a] + grad[k + a] - new[a]).collect();
        let rn = res.iter().fold(0.0f64, |m, r| m.max(r.abs()));
        if !rn.is_finite() {
            return Err(Error::NonFinite("change of variables"));
        }
        if rn <= 1e-15 * (1.0 + new[..k].iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            break;
        }
        if it == NEWTON_MAX_ITER {
            return Err(Error::NewtonDiverged { context: "change of variables", iterations: it, residual: rn });
        }
        let jac = DMatrix::from_fn(k, k, |a, b| (a == b) as u8 as f64 + h[(k + a, b)]);
        let step = jac.lu().solve(&DVector::from_vec(res)).ok_or(Error::SingularJacobian { context: "change of variables" })?;
        for a in 0..k {
            z[a] -= step[a];
        }
    }
    let (_, grad, _) = field_derivatives(g, &z, false);
    for a in 0..k {
        z[k + a] = new[k + a] + grad[a];
    }
    Ok(z)
}

fn scale_all(a: &[Jet], c: f64) -> Vec<Jet> {
    a.iter().map(|x| x.iter().map(|v| v * c).collect()).collect()
}

fn midpoint(a: &[Jet], b: &[Jet]) -> Vec<Jet> {
    scale_all(&add_all(a, b), 0.5)
}

/// Generating function of one implicit-midpoint step of length `t` for the
/// Hamiltonian `h` (in local actions), with the returned gradient defect of
/// the reconstruction.
pub fn midpoint_generating_field(h: &FourierField, t: f64, proj: Projection) -> Result<(FourierField, f64)> {
    let (n, m) = (h.n, h.m);
    let sp = JetSpace::new(n, m, proj.degree);
    let gh = Gradient::of(h);
    let grid = angle_grid(n, proj.points());
    let results: Vec<Result<JetPoint>> = grid
        .par_iter()
        .map(|x0| {
            let xp: Vec<Jet> = vec![sp.zero(); n];
            let up: Vec<Jet> = (0..m).map(|a| sp.variable(n + a, 0.0)).collect();
            let yh: Vec<Jet> = (0..n).map(|a| sp.variable(a, 0.0)).collect();
            let vh: Vec<Jet> = (0..m).map(|a| sp.variable(n + m + a, 0.0)).collect();
            // Unknowns q = (y, v) and p̂ = (x̂, û) of `ẑ = z + t 𝕁∇H((z + ẑ)/2)`.
            let (mut y, mut v) = (yh.clone(), vh.clone());
            let (mut xh, mut uh) = (xp.clone(), up.clone());
            let mut last = f64::INFINITY;
            for _ in 0..PICARD_MAX {
                let d = eval_gradient(
                    &sp,
                    h.k_max,
                    x0,
                    &gh,
                    (&midpoint(&xp, &xh), &midpoint(&up, &uh)),
                    (&midpoint(&y, &yh), &midpoint(&v, &vh)),
                );
                let next = JetPoint {
                    x: add_all(&xp, &scale_all(&d.y, t)),
                    u: add_all(&up, &scale_all(&d.v, t)),
                    y: add_all(&yh, &scale_all(&d.x, t)),
                    v: add_all(&vh, &scale_all(&d.u, t)),
                };
                let before = JetPoint { x: xh.clone(), u: uh.clone(), y: y.clone(), v: v.clone() };
                let change = before.diff(&next);
                (xh, uh, y, v) = (next.x, next.u, next.y, next.v);
                if change <= 1e-17 || (change <= 1e-13 && change >= last) {
                    return Ok(JetPoint { x: sub_all(&y, &yh), u: sub_all(&v, &vh), y: sub_all(&xh, &xp), v: sub_all(&uh, &up) });
                }
                last = change;
            }
            Err(Error::NewtonDiverged { context: "midpoint generating function", iterations: PICARD_MAX, residual: last })
        })
        .collect();
    let mut samples = GradientSamples { grid: grid.clone(), x: vec![], u: vec![], y: vec![], v: vec![] };
    for r in results {
        let jp = r?;
        samples.x.push(jp.x);
        samples.u.push(jp.u);
        samples.y.push(jp.y);
        samples.v.push(jp.v);
    }
    Ok(reconstruct(&sp, &samples, proj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fourier::unit;

    fn twist(n: usize, m: usize, t: f64, omega: &[f64]) -> FourierField {
        let mut s = FourierField::zero(n, m, 8);
        for a in 0..n {
            s.add_cos(vec![0; n], unit(n, a, 1), vec![0; m], vec![0; m], t * omega[a]);
        }
        s
    }

    #[test]
    fn identity_conjugation_reproduces_the_field() {
        let mut s = twist(1, 1, 0.1, &[0.6]);
        s.add_cos(vec![1], vec![0], vec![0], vec![0], 1e-3);
        s.add_cos(vec![2], vec![1], vec![1], vec![0], 2e-3);
        s.add_cos(vec![0], vec![0], vec![1], vec![1], 0.05);
        let g = FourierField::zero(1, 1, 8);
        let out = conjugate(&s, &g, Projection { k_max: 8, degree: 4 }).unwrap();
        assert!(out.field.max_abs_diff(&s) < 1e-15, "{}", out.field.max_abs_diff(&s));
        assert!(out.gradient_defect < 1e-15);
    }

    #[test]
    fn grid_projection_round_trip() {
        let sp = JetSpace::new(1, 1, 4);
        let mut f = FourierField::zero(1, 1, 6);
        f.add_cos(vec![1], vec![1], vec![1], vec![0], 0.7);
        f.add_sin(vec![3], vec![0], vec![0], vec![2], -0.4);
        f.add_cos(vec![0], vec![0], vec![2], vec![2], 0.25);
        let proj = Projection { k_max: 6, degree: 4 };
        let grid = angle_grid(1, proj.points());
        let samples: Vec<Jet> = grid
            .iter()
            .map(|x| {
                let xs = vec![sp.constant(x[0])];
                let mut ev = jet::FieldEvaluator::new(&sp, 6, &xs, &[sp.variable(1, 0.0)], &[sp.variable(0, 0.0)], &[sp.variable(2, 0.0)]);
                ev.eval(&f)
            })
            .collect();
        let back = project_samples(&sp, &grid, &samples, 6, 4).pruned(1e-15);
        assert!(back.max_abs_diff(&f) < 1e-10);
    }

    #[test]
    fn mode_enumeration_counts() {
        assert_eq!(modes_within(1, 3).len(), 7);
        assert_eq!(modes_within(2, 2).len(), 13);
    }
}
