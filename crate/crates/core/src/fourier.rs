//! Truncated Fourier fields on the n-torus with polynomial grading in the
//! actions `(ŷ, u, v̂)`.
//!
//! A [`FourierField`] stores terms `c · e^{i⟨k,x⟩} ŷ^l u^i v̂^j` with `k ∈ ℤⁿ`
//! and multi-indices `l ∈ ℕⁿ`, `i, j ∈ ℕᵐ`. Real fields keep both `k` and `-k`
//! with conjugate coefficients.

use std::collections::BTreeMap;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients smaller than this are dropped after arithmetic passes.
pub const DROP_TOL: f64 = 1e-16;

/// Index of one term of a [`FourierField`].
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mode {
    pub k: Vec<i32>,
    pub l: Vec<u32>,
    pub i: Vec<u32>,
    pub j: Vec<u32>,
}

impl Mode {
    pub fn new(k: Vec<i32>, l: Vec<u32>, i: Vec<u32>, j: Vec<u32>) -> Self {
        Mode { k, l, i, j }
    }

    /// Mode with no action dependence.
    pub fn angle(k: Vec<i32>, n: usize, m: usize) -> Self {
        debug_assert_eq!(k.len(), n);
        Mode { k, l: vec![0; n], i: vec![0; m], j: vec![0; m] }
    }

    /// Graded degree `2|l| + |i| + |j|`.
    pub fn weight(&self) -> u32 {
        2 * self.l.iter().sum::<u32>() + self.i.iter().sum::<u32>() + self.j.iter().sum::<u32>()
    }

    /// `|k|₁`.
    pub fn k_abs(&self) -> u32 {
        self.k.iter().map(|k| k.unsigned_abs()).sum()
    }

    pub fn negated_k(&self) -> Mode {
        Mode { k: self.k.iter().map(|k| -k).collect(), ..self.clone() }
    }

    fn same_actions(&self, other: &Mode) -> bool {
        self.l == other.l && self.i == other.i && self.j == other.j
    }
}

/// Which variable a derivative is taken with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    X(usize),
    Y(usize),
    U(usize),
    V(usize),
}

/// One record of the coefficient-table JSON format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRecord {
    pub k: Vec<i32>,
    pub l: Vec<u32>,
    pub i: Vec<u32>,
    pub j: Vec<u32>,
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierField {
    pub n: usize,
    pub m: usize,
    pub k_max: u32,
    coeffs: BTreeMap<Mode, Complex64>,
}

/// Parameters of the weighted coefficient norm.
///
/// `nbar` is carried for bookkeeping only: fields are always evaluated at a
/// fixed parameter sample, so no ξ-derivatives enter the norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedNorms {
    pub s: f64,
    pub r: f64,
    pub nbar: usize,
}

impl WeightedNorms {
    pub fn of(&self, field: &FourierField) -> Result<f64> {
        field.weighted_norm(self.s, self.r)
    }
}

impl FourierField {
    pub fn zero(n: usize, m: usize, k_max: u32) -> Self {
        FourierField { n, m, k_max, coeffs: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Mode, &Complex64)> {
        self.coeffs.iter()
    }

    pub fn get(&self, mode: &Mode) -> Complex64 {
        self.coeffs.get(mode).copied().unwrap_or_default()
    }

    fn check_mode(&self, mode: &Mode) {
        assert!(
            mode.k.len() == self.n && mode.l.len() == self.n && mode.i.len() == self.m && mode.j.len() == self.m,
            "mode {mode:?} does not match field dimensions n = {}, m = {}",
            self.n,
            self.m
        );
    }

    /// Adds `c` to the coefficient of `mode`. Modes beyond `k_max` are ignored.
    pub fn add_term(&mut self, mode: Mode, c: Complex64) {
        self.check_mode(&mode);
        if mode.k_abs() > self.k_max {
            return;
        }
        *self.coeffs.entry(mode).or_default() += c;
    }

    pub fn set_term(&mut self, mode: Mode, c: Complex64) {
        self.check_mode(&mode);
        if mode.k_abs() > self.k_max {
            return;
        }
        self.coeffs.insert(mode, c);
    }

    /// Adds the real term `amp · cos(⟨k,x⟩) · ŷ^l u^i v̂^j`.
    pub fn add_cos(&mut self, k: Vec<i32>, l: Vec<u32>, i: Vec<u32>, j: Vec<u32>, amp: f64) {
        let mode = Mode::new(k, l, i, j);
        if mode.k.iter().all(|&k| k == 0) {
            self.add_term(mode, Complex64::new(amp, 0.0));
        } else {
            let neg = mode.negated_k();
            self.add_term(mode, Complex64::new(0.5 * amp, 0.0));
            self.add_term(neg, Complex64::new(0.5 * amp, 0.0));
        }
    }

    /// Adds the real term `amp · sin(⟨k,x⟩) · ŷ^l u^i v̂^j`.
    pub fn add_sin(&mut self, k: Vec<i32>, l: Vec<u32>, i: Vec<u32>, j: Vec<u32>, amp: f64) {
        let mode = Mode::new(k, l, i, j);
        if mode.k.iter().all(|&k| k == 0) {
            return;
        }
        let neg = mode.negated_k();
        self.add_term(mode, Complex64::new(0.0, -0.5 * amp));
        self.add_term(neg, Complex64::new(0.0, 0.5 * amp));
    }

    pub fn scale(&self, f: f64) -> FourierField {
        self.map_coeffs(|_, c| c * f)
    }

    pub fn map_coeffs(&self, mut f: impl FnMut(&Mode, Complex64) -> Complex64) -> FourierField {
        let coeffs = self.coeffs.iter().map(|(m, &c)| (m.clone(), f(m, c))).collect();
        FourierField { coeffs, ..self.shell() }
    }

    fn shell(&self) -> FourierField {
        FourierField::zero(self.n, self.m, self.k_max)
    }

    pub fn add(&self, other: &FourierField) -> FourierField {
        assert_eq!((self.n, self.m), (other.n, other.m));
        let mut out = self.clone();
        out.k_max = self.k_max.max(other.k_max);
        for (mode, &c) in &other.coeffs {
            *out.coeffs.entry(mode.clone()).or_default() += c;
        }
        out
    }

    pub fn sub(&self, other: &FourierField) -> FourierField {
        self.add(&other.scale(-1.0))
    }

    /// Drops coefficients with modulus at most `tol`.
    pub fn prune(&mut self, tol: f64) {
        self.coeffs.retain(|_, c| c.norm() > tol);
    }

    pub fn pruned(mut self, tol: f64) -> FourierField {
        self.prune(tol);
        self
    }

    /// Keeps only terms with `|k|₁ ≤ k_max`.
    pub fn with_k_max(&self, k_max: u32) -> FourierField {
        let mut out = self.filter(|m| m.k_abs() <= k_max);
        out.k_max = k_max;
        out
    }

    pub fn filter(&self, mut keep: impl FnMut(&Mode) -> bool) -> FourierField {
        let coeffs = self.coeffs.iter().filter(|(m, _)| keep(m)).map(|(m, &c)| (m.clone(), c)).collect();
        FourierField { coeffs, ..self.shell() }
    }

    /// Keeps terms of graded degree at most `degree`.
    pub fn cap_degree(&self, degree: u32) -> FourierField {
        self.filter(|m| m.weight() <= degree)
    }

    pub fn max_weight(&self) -> u32 {
        self.coeffs.keys().map(Mode::weight).max().unwrap_or(0)
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Largest coefficient difference to `other` (over the union of modes).
    pub fn max_abs_diff(&self, other: &FourierField) -> f64 {
        self.sub(other).max_abs_coeff()
    }

    /// Maximal violation of `c(-k) = conj(c(k))`.
    pub fn reality_defect(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|(m, c)| (self.get(&m.negated_k()) - c.conj()).norm())
            .fold(0.0, f64::max)
    }

    /// Replaces every coefficient pair by its conjugate-symmetric average.
    pub fn symmetrized(&self) -> FourierField {
        let mut out = self.shell();
        for (m, c) in &self.coeffs {
            let partner = self.get(&m.negated_k());
            out.coeffs.insert(m.clone(), 0.5 * (c + partner.conj()));
            out.coeffs.entry(m.negated_k()).or_insert(0.5 * (c.conj() + partner));
        }
        out
    }

    /// Complex value of the field at a real phase point.
    pub fn eval_complex(&self, x: &[f64], u: &[f64], y: &[f64], v: &[f64]) -> Complex64 {
        let mut acc = Complex64::default();
        for (mode, c) in &self.coeffs {
            let phase: f64 = mode.k.iter().zip(x).map(|(&k, &x)| k as f64 * x).sum();
            let mut mono = 1.0;
            for (&p, &b) in mode.l.iter().zip(y) {
                mono *= b.powi(p as i32);
            }
            for (&p, &b) in mode.i.iter().zip(u) {
                mono *= b.powi(p as i32);
            }
            for (&p, &b) in mode.j.iter().zip(v) {
                mono *= b.powi(p as i32);
            }
            acc += c * Complex64::from_polar(mono, phase);
        }
        acc
    }

    /// Real value at `(x, u, ŷ, v̂)`.
    pub fn eval(&self, x: &[f64], u: &[f64], y: &[f64], v: &[f64]) -> f64 {
        self.eval_complex(x, u, y, v).re
    }

    pub fn derivative(&self, var: Var) -> FourierField {
        let mut out = self.shell();
        for (mode, &c) in &self.coeffs {
            match var {
                Var::X(a) => {
                    if mode.k[a] != 0 {
                        out.coeffs.insert(mode.clone(), c * Complex64::new(0.0, mode.k[a] as f64));
                    }
                }
                Var::Y(a) => lower(&mode.l, a).into_iter().for_each(|(p, l)| {
                    out.coeffs.insert(Mode { l, ..mode.clone() }, c * p as f64);
                }),
                Var::U(a) => lower(&mode.i, a).into_iter().for_each(|(p, i)| {
                    out.coeffs.insert(Mode { i, ..mode.clone() }, c * p as f64);
                }),
                Var::V(a) => lower(&mode.j, a).into_iter().for_each(|(p, j)| {
                    out.coeffs.insert(Mode { j, ..mode.clone() }, c * p as f64);
                }),
            }
        }
        out
    }

    /// The field composed with `x ↦ x + delta`.
    pub fn shift_angle(&self, delta: &[f64]) -> FourierField {
        assert_eq!(delta.len(), self.n);
        self.map_coeffs(|m, c| {
            let phase: f64 = m.k.iter().zip(delta).map(|(&k, &d)| k as f64 * d).sum();
            c * Complex64::from_polar(1.0, phase)
        })
    }

    /// Splits the field into the part of graded degree `≤ 2` (returned first)
    /// and the remainder.
    pub fn truncate_order2(&self) -> (FourierField, FourierField) {
        (self.filter(|m| m.weight() <= 2), self.filter(|m| m.weight() > 2))
    }

    /// `‖·‖_{s,r}`: Σ_k e^{s|k|} Σ_{l,i,j} |c| r^{2|l|+|i|+|j|}.
    pub fn coefficient_norm(&self, s: f64, r: f64) -> f64 {
        self.coeffs
            .iter()
            .map(|(m, c)| c.norm() * (s * m.k_abs() as f64).exp() * r.powi(m.weight() as i32))
            .sum()
    }

    /// Weighted norm of the Hamiltonian vector field of the field on `D(s, r)`.
    pub fn weighted_norm(&self, s: f64, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::DivisionGuard("weighted norm needs r > 0"));
        }
        if s < 0.0 {
            return Err(Error::InvalidInput(format!("weighted norm needs s >= 0, got {s}")));
        }
        let part = |var: Var| self.derivative(var).coefficient_norm(s, r);
        let dx: f64 = (0..self.n).map(|a| part(Var::X(a))).sum();
        let dy = (0..self.n).map(|a| part(Var::Y(a))).fold(0.0, f64::max);
        let du = (0..self.m).map(|a| part(Var::U(a)).powi(2)).sum::<f64>().sqrt();
        let dv = (0..self.m).map(|a| part(Var::V(a)).powi(2)).sum::<f64>().sqrt();
        Ok(dy + dv / r + dx / (r * r) + du / r)
    }

    /// Re-expands a field given in the global action `y` around `y = xi`,
    /// i.e. returns `G(x, u, xi + ŷ, v̂)` as a polynomial in the local `ŷ`.
    pub fn recenter_actions(&self, xi: &[f64]) -> FourierField {
        assert_eq!(xi.len(), self.n);
        let mut out = self.shell();
        for (mode, &c) in &self.coeffs {
            // Expand Π_a (xi_a + ŷ_a)^{l_a}.
            let mut parts: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 1.0)];
            for (a, &la) in mode.l.iter().enumerate() {
                let mut next = Vec::new();
                for (exps, w) in &parts {
                    for p in 0..=la {
                        let mut e = exps.clone();
                        e.push(p);
                        next.push((e, w * binomial(la, p) * xi[a].powi((la - p) as i32)));
                    }
                }
                parts = next;
            }
            for (l, w) in parts {
                if w != 0.0 {
                    *out.coeffs.entry(Mode { l, ..mode.clone() }).or_default() += c * w;
                }
            }
        }
        out
    }

    pub fn to_records(&self) -> Vec<CoefficientRecord> {
        self.coeffs
            .iter()
            .map(|(m, c)| CoefficientRecord {
                k: m.k.clone(),
                l: m.l.clone(),
                i: m.i.clone(),
                j: m.j.clone(),
                re: c.re,
                im: c.im,
            })
            .collect()
    }

    pub fn from_records(n: usize, m: usize, k_max: u32, records: &[CoefficientRecord]) -> Result<FourierField> {
        let mut out = FourierField::zero(n, m, k_max);
        for r in records {
            if r.k.len() != n || r.l.len() != n || r.i.len() != m || r.j.len() != m {
                return Err(Error::InvalidInput(format!(
                    "coefficient record {:?} does not match n = {n}, m = {m}",
                    (&r.k, &r.l, &r.i, &r.j)
                )));
            }
            if !(r.re.is_finite() && r.im.is_finite()) {
                return Err(Error::NonFinite("coefficient record"));
            }
            out.add_term(Mode::new(r.k.clone(), r.l.clone(), r.i.clone(), r.j.clone()), Complex64::new(r.re, r.im));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_records())?)
    }

    pub fn from_json(n: usize, m: usize, k_max: u32, text: &str) -> Result<FourierField> {
        let records: Vec<CoefficientRecord> = serde_json::from_str(text)?;
        FourierField::from_records(n, m, k_max, &records)
    }

    /// Coefficients of the terms sharing the action monomial `(l, i, j)`,
    /// keyed by `k`.
    pub fn component(&self, l: &[u32], i: &[u32], j: &[u32]) -> BTreeMap<Vec<i32>, Complex64> {
        let probe = Mode::new(vec![0; self.n], l.to_vec(), i.to_vec(), j.to_vec());
        self.coeffs
            .iter()
            .filter(|(m, _)| m.same_actions(&probe))
            .map(|(m, &c)| (m.k.clone(), c))
            .collect()
    }
}

fn lower(exps: &[u32], a: usize) -> Option<(u32, Vec<u32>)> {
    if exps[a] == 0 {
        return None;
    }
    let mut e = exps.to_vec();
    e[a] -= 1;
    Some((exps[a], e))
}

pub(crate) fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Unit vector exponent helper: `e_a` of length `len` scaled by `p`.
pub fn unit(len: usize, a: usize, p: u32) -> Vec<u32> {
    let mut e = vec![0; len];
    e[a] = p;
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cos_x(eps: f64) -> FourierField {
        let mut f = FourierField::zero(1, 1, 32);
        f.add_cos(vec![1], vec![0], vec![0], vec![0], eps);
        f
    }

    pub(crate) fn random_field(rng: &mut ChaCha8Rng, n: usize, m: usize, k_max: u32) -> FourierField {
        let mut f = FourierField::zero(n, m, k_max);
        for _ in 0..12 {
            let k: Vec<i32> = (0..n).map(|_| rng.gen_range(-3..=3)).collect();
            let l: Vec<u32> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            let i: Vec<u32> = (0..m).map(|_| rng.gen_range(0..=2)).collect();
            let j: Vec<u32> = (0..m).map(|_| rng.gen_range(0..=1)).collect();
            f.add_cos(k.clone(), l.clone(), i.clone(), j.clone(), rng.gen_range(-1.0..1.0));
            f.add_sin(k, l, i, j, rng.gen_range(-1.0..1.0));
        }
        f
    }

    #[test]
    fn zero_field_has_zero_norm() {
        assert_eq!(FourierField::zero(2, 1, 8).weighted_norm(1.0, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn cos_x_norm_matches_two_mode_sum() {
        let (eps, s, r) = (1e-3, 0.7, 0.3);
        let norm = cos_x(eps).weighted_norm(s, r).unwrap();
        let expected = eps * s.exp() / (r * r);
        assert!((norm - expected).abs() <= 1e-15 * expected);
    }

    #[test]
    fn zero_radius_is_rejected() {
        assert!(matches!(cos_x(1.0).weighted_norm(1.0, 0.0), Err(Error::DivisionGuard(_))));
    }

    #[test]
    fn norm_is_monotone_in_strip_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let f = random_field(&mut rng, 2, 1, 8);
            let s = rng.gen_range(0.0..2.0);
            assert!(f.weighted_norm(s / 2.0, 0.4).unwrap() <= f.weighted_norm(s, 0.4).unwrap());
        }
    }

    #[test]
    fn norm_is_subadditive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = random_field(&mut rng, 1, 2, 8);
            let q = random_field(&mut rng, 1, 2, 8);
            let lhs = p.add(&q).weighted_norm(0.5, 0.3).unwrap();
            let rhs = p.weighted_norm(0.5, 0.3).unwrap() + q.weighted_norm(0.5, 0.3).unwrap();
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn evaluation_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(&mut rng, 2, 1, 8);
        assert!(f.reality_defect() < 1e-15);
        for _ in 0..64 {
            let x = [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)];
            let y: [f64; 2] = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
            let (u, v): ([f64; 1], [f64; 1]) = ([rng.gen_range(-0.5..0.5)], [rng.gen_range(-0.5..0.5)]);
            // Direct summation over the real trigonometric form.
            let mut direct = 0.0;
            for (m, c) in f.iter() {
                let ph: f64 = m.k.iter().zip(&x).map(|(&k, &x)| k as f64 * x).sum();
                let mono = y[0].powi(m.l[0] as i32)
                    * y[1].powi(m.l[1] as i32)
                    * u[0].powi(m.i[0] as i32)
                    * v[0].powi(m.j[0] as i32);
                direct += (c.re * ph.cos() - c.im * ph.sin()) * mono;
            }
            let val = f.eval_complex(&x, &u, &y, &v);
            assert!((val.re - direct).abs() < 1e-12);
            assert!(val.im.abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_examples() {
        let mut y2 = FourierField::zero(1, 1, 8);
        y2.add_cos(vec![1], vec![2], vec![0], vec![0], 1.0);
        let (r, rest) = y2.truncate_order2();
        assert!(r.is_empty());
        assert_eq!(rest, y2);

        let mut cu = FourierField::zero(1, 1, 8);
        cu.add_cos(vec![1], vec![0], vec![1], vec![0], 1.0);
        let (r, rest) = cu.truncate_order2();
        assert_eq!(r, cu);
        assert!(rest.is_empty());
    }

    #[test]
    fn truncation_splits_coefficientwise_and_is_a_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_field(&mut rng, 1, 2, 8);
        let (r, rest) = f.truncate_order2();
        assert_eq!(r.add(&rest).pruned(0.0), f.clone().pruned(0.0));
        assert_eq!(r.truncate_order2().0, r);
    }

    #[test]
    fn shift_by_half_period_negates_cos() {
        let f = cos_x(1.0);
        let g = f.shift_angle(&[std::f64::consts::PI]);
        assert!(g.add(&f).max_abs_coeff() < 1e-15);
        assert_eq!(f.shift_angle(&[0.0]), f);
    }

    #[test]
    fn shift_round_trip_and_norm_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let f = random_field(&mut rng, 2, 1, 8);
            let d = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let back = f.shift_angle(&d).shift_angle(&[-d[0], -d[1]]);
            assert!(back.max_abs_diff(&f) < 1e-14);
            let (a, b) = (f.weighted_norm(0.8, 0.5).unwrap(), f.shift_angle(&d).weighted_norm(0.8, 0.5).unwrap());
            assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }

    #[test]
    fn recentering_matches_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = FourierField::zero(2, 1, 8);
        f.add_cos(vec![1, 0], vec![2, 1], vec![1], vec![0], 0.7);
        f.add_sin(vec![0, 1], vec![0, 3], vec![0], vec![1], -0.3);
        let xi = [0.4, -0.2];
        let g = f.recenter_actions(&xi);
        for _ in 0..10 {
            let x = [rng.gen_range(0.0..6.0), rng.gen_range(0.0..6.0)];
            let y = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
            let yg = [xi[0] + y[0], xi[1] + y[1]];
            let (u, v) = ([0.2], [-0.1]);
            assert!((g.eval(&x, &u, &y, &v) - f.eval(&x, &u, &yg, &v)).abs() < 1e-14);
        }
    }

    #[test]
    fn json_records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_field(&mut rng, 1, 1, 8);
        let text = f.to_json().unwrap();
        assert_eq!(FourierField::from_json(1, 1, 8, &text).unwrap(), f);
        assert!(FourierField::from_json(2, 1, 8, &text).is_err());
    }
}
