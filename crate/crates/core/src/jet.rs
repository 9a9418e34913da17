//! Truncated weighted power series in the local action variables.
//!
//! Variables are ordered `(ŷ₁..ŷₙ, u₁..uₘ, v̂₁..v̂ₘ)` with weights `(2, 1, 1)`;
//! a [`JetSpace`] keeps every monomial of weighted degree `≤ degree`. Products
//! drop everything above that degree, which makes composition of truncated
//! generating functions exact up to the grading cap.

use std::collections::HashMap;

use num_complex::Complex64;

use crate::fourier::{FourierField, Mode};

#[derive(Clone, Debug)]
pub struct JetSpace {
    pub n: usize,
    pub m: usize,
    pub degree: u32,
    monos: Vec<Vec<u32>>,
    weights: Vec<u32>,
    index: HashMap<Vec<u32>, usize>,
    // (a, b, a*b) for every pair whose product survives truncation.
    table: Vec<(u32, u32, u32)>,
}

/// Real jet: coefficient vector over the monomials of a [`JetSpace`].
pub type Jet = Vec<f64>;
/// Complex jet.
pub type CJet = Vec<Complex64>;

impl JetSpace {
    pub fn new(n: usize, m: usize, degree: u32) -> Self {
        let nv = n + 2 * m;
        let var_w: Vec<u32> = (0..nv).map(|v| if v < n { 2 } else { 1 }).collect();
        let mut monos = vec![vec![0u32; nv]];
        // Grow by one variable at a time, keeping the weighted degree bounded.
        for v in 0..nv {
            let mut next = Vec::new();
            for mono in &monos {
                let w: u32 = mono.iter().zip(&var_w).map(|(e, w)| e * w).sum();
                let mut e = mono.clone();
                let mut wt = w;
                loop {
                    next.push(e.clone());
                    wt += var_w[v];
                    if wt > degree {
                        break;
                    }
                    e[v] += 1;
                }
            }
            monos = next;
        }
        monos.sort_by_key(|e| (e.iter().zip(&var_w).map(|(e, w)| e * w).sum::<u32>(), std::cmp::Reverse(e.clone())));
        let weights: Vec<u32> = monos.iter().map(|e| e.iter().zip(&var_w).map(|(e, w)| e * w).sum()).collect();
        let index: HashMap<Vec<u32>, usize> = monos.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let mut table = Vec::new();
        for (a, ea) in monos.iter().enumerate() {
            for (b, eb) in monos.iter().enumerate() {
                if weights[a] + weights[b] <= degree {
                    let prod: Vec<u32> = ea.iter().zip(eb).map(|(x, y)| x + y).collect();
                    table.push((a as u32, b as u32, index[&prod] as u32));
                }
            }
        }
        JetSpace { n, m, degree, monos, weights, index, table }
    }

    pub fn len(&self) -> usize {
        self.monos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monos.is_empty()
    }

    pub fn monomials(&self) -> &[Vec<u32>] {
        &self.monos
    }

    pub fn weight(&self, idx: usize) -> u32 {
        self.weights[idx]
    }

    pub fn index_of(&self, exps: &[u32]) -> Option<usize> {
        self.index.get(exps).copied()
    }

    /// Splits an exponent vector into the `(l, i, j)` multi-indices.
    pub fn split(&self, idx: usize) -> (Vec<u32>, Vec<u32>, Vec<u32>) {
        let e = &self.monos[idx];
        (e[..self.n].to_vec(), e[self.n..self.n + self.m].to_vec(), e[self.n + self.m..].to_vec())
    }

    pub fn join(&self, l: &[u32], i: &[u32], j: &[u32]) -> Option<usize> {
        let mut e = Vec::with_capacity(self.n + 2 * self.m);
        e.extend_from_slice(l);
        e.extend_from_slice(i);
        e.extend_from_slice(j);
        self.index_of(&e)
    }

    pub fn zero(&self) -> Jet {
        vec![0.0; self.len()]
    }

    pub fn constant(&self, c: f64) -> Jet {
        let mut j = self.zero();
        j[0] = c;
        j
    }

    /// The jet of the variable with position `var` in `(ŷ, u, v̂)` order,
    /// shifted by `c`.
    pub fn variable(&self, var: usize, c: f64) -> Jet {
        let mut e = vec![0; self.n + 2 * self.m];
        e[var] = 1;
        let mut j = self.constant(c);
        if let Some(idx) = self.index_of(&e) {
            j[idx] = 1.0;
        }
        j
    }

    pub fn mul(&self, a: &[f64], b: &[f64]) -> Jet {
        let mut out = self.zero();
        for &(x, y, z) in &self.table {
            out[z as usize] += a[x as usize] * b[y as usize];
        }
        out
    }

    pub fn cmul(&self, a: &[Complex64], b: &[Complex64]) -> CJet {
        let mut out = vec![Complex64::default(); self.len()];
        for &(x, y, z) in &self.table {
            out[z as usize] += a[x as usize] * b[y as usize];
        }
        out
    }

    /// `exp(i·(c + δ))` for a real jet with constant part `c`.
    pub fn exp_i(&self, x: &[f64]) -> CJet {
        let base = Complex64::from_polar(1.0, x[0]);
        let mut delta: CJet = x.iter().map(|&v| Complex64::new(0.0, v)).collect();
        delta[0] = Complex64::default();
        let mut out = vec![Complex64::default(); self.len()];
        out[0] = Complex64::new(1.0, 0.0);
        let mut term = out.clone();
        // δ has no constant part, so its (degree+1)-th power vanishes.
        for p in 1..=self.degree {
            term = self.cmul(&term, &delta);
            let inv = 1.0 / p as f64;
            term.iter_mut().for_each(|c| *c *= inv);
            for (o, t) in out.iter_mut().zip(&term) {
                *o += t;
            }
        }
        out.iter_mut().for_each(|c| *c *= base);
        out
    }

    /// `a^p` by repeated multiplication.
    pub fn powi(&self, a: &[f64], p: u32) -> Jet {
        let mut out = self.constant(1.0);
        for _ in 0..p {
            out = self.mul(&out, a);
        }
        out
    }
}

pub fn add(a: &[f64], b: &[f64]) -> Jet {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Jet {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Evaluates several fields at one jet-valued phase point, sharing the
/// angle factors and action monomials between them.
pub struct FieldEvaluator<'a> {
    space: &'a JetSpace,
    k_max: i32,
    // Per angle dimension: e^{i k x_a} for k in -k_max..=k_max.
    powers: Vec<Vec<CJet>>,
    angle_cache: HashMap<Vec<i32>, CJet>,
    mono_cache: HashMap<(Vec<u32>, Vec<u32>, Vec<u32>), Jet>,
    y: Vec<Jet>,
    u: Vec<Jet>,
    v: Vec<Jet>,
}

impl<'a> FieldEvaluator<'a> {
    pub fn new(space: &'a JetSpace, k_max: u32, x: &[Jet], u: &[Jet], y: &[Jet], v: &[Jet]) -> Self {
        let k_max = k_max as i32;
        let powers = x
            .iter()
            .map(|xa| {
                let e = space.exp_i(xa);
                let einv: CJet = e.iter().map(|c| c.conj()).collect();
                let mut pos = vec![space.constant(1.0).iter().map(|&c| Complex64::new(c, 0.0)).collect::<CJet>()];
                let mut neg = pos.clone();
                for p in 1..=k_max as usize {
                    pos.push(space.cmul(&pos[p - 1], &e));
                    neg.push(space.cmul(&neg[p - 1], &einv));
                }
                // Index k + k_max.
                neg.into_iter().skip(1).rev().chain(pos).collect()
            })
            .collect();
        FieldEvaluator {
            space,
            k_max,
            powers,
            angle_cache: HashMap::new(),
            mono_cache: HashMap::new(),
            y: y.to_vec(),
            u: u.to_vec(),
            v: v.to_vec(),
        }
    }

    fn angle(&mut self, k: &[i32]) -> CJet {
        if let Some(a) = self.angle_cache.get(k) {
            return a.clone();
        }
        let mut out: Option<CJet> = None;
        for (a, &ka) in k.iter().enumerate() {
            if ka == 0 {
                continue;
            }
            let f = &self.powers[a][(ka + self.k_max) as usize];
            out = Some(match out {
                None => f.clone(),
                Some(acc) => self.space.cmul(&acc, f),
            });
        }
        let out = out.unwrap_or_else(|| {
            let mut one = vec![Complex64::default(); self.space.len()];
            one[0] = Complex64::new(1.0, 0.0);
            one
        });
        self.angle_cache.insert(k.to_vec(), out.clone());
        out
    }

    fn monomial(&mut self, mode: &Mode) -> Jet {
        let key = (mode.l.clone(), mode.i.clone(), mode.j.clone());
        if let Some(m) = self.mono_cache.get(&key) {
            return m.clone();
        }
        let sp = self.space;
        let mut acc = sp.constant(1.0);
        for (vars, exps) in [(&self.y, &mode.l), (&self.u, &mode.i), (&self.v, &mode.j)] {
            for (b, &p) in vars.iter().zip(exps.iter()) {
                if p > 0 {
                    acc = sp.mul(&acc, &sp.powi(b, p));
                }
            }
        }
        self.mono_cache.insert(key, acc.clone());
        acc
    }

    /// Real part of the field evaluated at the point.
    pub fn eval(&mut self, field: &FourierField) -> Jet {
        assert!(field.k_max as i32 <= self.k_max, "field k_max exceeds evaluator range");
        let len = self.space.len();
        let mut out = vec![0.0; len];
        let mut current_k: Option<Vec<i32>> = None;
        let mut acc = vec![Complex64::default(); len];
        // Modes are sorted by k first, so terms sharing an angle factor are adjacent.
        let flush = |this: &mut Self, k: &Option<Vec<i32>>, acc: &mut CJet, out: &mut Jet| {
            if let Some(k) = k {
                let ang = this.angle(k);
                let prod = this.space.cmul(acc, &ang);
                for (o, p) in out.iter_mut().zip(&prod) {
                    *o += p.re;
                }
                acc.iter_mut().for_each(|c| *c = Complex64::default());
            }
        };
        for (mode, &c) in field.iter() {
            if current_k.as_deref() != Some(&mode.k[..]) {
                flush(self, &current_k, &mut acc, &mut out);
                current_k = Some(mode.k.clone());
            }
            let mono = self.monomial(mode);
            for (a, mv) in acc.iter_mut().zip(&mono) {
                *a += c * mv;
            }
        }
        flush(self, &current_k, &mut acc, &mut out);
        out
    }
}

/// Evaluates fields at a jet-valued point by Taylor expansion in the angles
/// around the real base point `x₀ = x[·][0]`.
///
/// Each mode then costs a handful of scalar operations; the jet products
/// `δx^α · ŷ^l u^i v̂^j` are shared between all fields evaluated at the point.
pub struct TaylorEvaluator<'a> {
    space: &'a JetSpace,
    x0: Vec<f64>,
    // e^{i k x0_a} for k in -k_max..=k_max, per dimension.
    base: Vec<Vec<Complex64>>,
    k_max: i32,
    alphas: Vec<Vec<u32>>,
    dx_pow: Vec<Jet>,
    y: Vec<Jet>,
    u: Vec<Jet>,
    v: Vec<Jet>,
    mono_cache: HashMap<(Vec<u32>, Vec<u32>, Vec<u32>), Jet>,
    prod_cache: HashMap<(usize, Vec<u32>, Vec<u32>, Vec<u32>), Jet>,
}

impl<'a> TaylorEvaluator<'a> {
    pub fn new(space: &'a JetSpace, k_max: u32, x: &[Jet], u: &[Jet], y: &[Jet], v: &[Jet]) -> Self {
        Self::with_base(space, k_max, &vec![0.0; x.len()], x, u, y, v)
    }

    /// Evaluation at angles `base + x`, keeping the offsets `x` separate so
    /// that small angle increments do not lose precision against `base`.
    pub fn with_base(space: &'a JetSpace, k_max: u32, base: &[f64], x: &[Jet], u: &[Jet], y: &[Jet], v: &[Jet]) -> Self {
        let n = x.len();
        let k = k_max as i32;
        let x0: Vec<f64> = x.iter().map(|j| j[0]).collect();
        let base = x0
            .iter()
            .zip(base)
            .map(|(&xa, &ba)| {
                (-k..=k)
                    .map(|kk| Complex64::from_polar(1.0, kk as f64 * ba) * Complex64::from_polar(1.0, kk as f64 * xa))
                    .collect()
            })
            .collect();
        let dx: Vec<Jet> = x
            .iter()
            .map(|j| {
                let mut d = j.clone();
                d[0] = 0.0;
                d
            })
            .collect();
        // Multi-indices with |α| ≤ degree, each with its jet δx^α.
        let mut alphas: Vec<Vec<u32>> = vec![vec![0; n]];
        let mut dx_pow = vec![space.constant(1.0)];
        let mut frontier = vec![0usize];
        for _ in 0..space.degree {
            let mut next = Vec::new();
            for &idx in &frontier {
                let last = alphas[idx].iter().rposition(|&p| p > 0).unwrap_or(0);
                for a in last..n {
                    let mut al = alphas[idx].clone();
                    al[a] += 1;
                    let jet = space.mul(&dx_pow[idx], &dx[a]);
                    alphas.push(al);
                    dx_pow.push(jet);
                    next.push(alphas.len() - 1);
                }
            }
            frontier = next;
        }
        TaylorEvaluator {
            space,
            x0,
            base,
            k_max: k,
            alphas,
            dx_pow,
            y: y.to_vec(),
            u: u.to_vec(),
            v: v.to_vec(),
            mono_cache: HashMap::new(),
            prod_cache: HashMap::new(),
        }
    }

    fn monomial(&mut self, l: &[u32], i: &[u32], j: &[u32]) -> Jet {
        let key = (l.to_vec(), i.to_vec(), j.to_vec());
        if let Some(m) = self.mono_cache.get(&key) {
            return m.clone();
        }
        let sp = self.space;
        let mut acc = sp.constant(1.0);
        for (vars, exps) in [(&self.y, l), (&self.u, i), (&self.v, j)] {
            for (b, &p) in vars.iter().zip(exps.iter()) {
                if p > 0 {
                    acc = sp.mul(&acc, &sp.powi(b, p));
                }
            }
        }
        self.mono_cache.insert(key, acc.clone());
        acc
    }

    /// Real part of the field at the point.
    pub fn eval(&mut self, field: &FourierField) -> Jet {
        assert!(field.k_max as i32 <= self.k_max, "field k_max exceeds evaluator range");
        let na = self.alphas.len();
        let n = self.x0.len();
        // Scalar tables T[(l,i,j)][α] = Σ_k c (ik)^α e^{ikx₀} / α!.
        let mut tables: HashMap<(Vec<u32>, Vec<u32>, Vec<u32>), Vec<f64>> = HashMap::new();
        let mut factors = vec![Complex64::default(); na];
        for (mode, &c) in field.iter() {
            let mut b = c;
            for a in 0..n {
                b *= self.base[a][(mode.k[a] + self.k_max) as usize];
            }
            for (slot, al) in factors.iter_mut().zip(&self.alphas) {
                let mut f = b;
                for a in 0..n {
                    let p = al[a];
                    if p > 0 {
                        let ik = Complex64::new(0.0, mode.k[a] as f64);
                        f *= ik.powu(p) / factorial(p);
                    }
                }
                *slot = f;
            }
            let entry = tables
                .entry((mode.l.clone(), mode.i.clone(), mode.j.clone()))
                .or_insert_with(|| vec![0.0; na]);
            for (e, f) in entry.iter_mut().zip(&factors) {
                *e += f.re;
            }
        }
        let mut out = self.space.zero();
        for ((l, i, j), coefs) in tables {
            for (ai, &cf) in coefs.iter().enumerate() {
                if cf == 0.0 {
                    continue;
                }
                let key = (ai, l.clone(), i.clone(), j.clone());
                if !self.prod_cache.contains_key(&key) {
                    let mono = self.monomial(&l, &i, &j);
                    let prod = if ai == 0 { mono } else { self.space.mul(&self.dx_pow[ai], &mono) };
                    self.prod_cache.insert(key.clone(), prod);
                }
                for (o, p) in out.iter_mut().zip(&self.prod_cache[&key]) {
                    *o += cf * p;
                }
            }
        }
        out
    }
}

fn factorial(p: u32) -> f64 {
    (1..=p).map(|v| v as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_count_for_unit_dimensions() {
        // ŷ^a u^b v^c with 2a + b + c <= 4.
        assert_eq!(JetSpace::new(1, 1, 4).len(), 22);
        assert_eq!(JetSpace::new(1, 0, 4).len(), 3);
    }

    #[test]
    fn products_truncate_by_weight() {
        let sp = JetSpace::new(1, 1, 4);
        let y = sp.variable(0, 0.0);
        let u = sp.variable(1, 0.0);
        let y2 = sp.mul(&y, &y);
        assert_eq!(y2[sp.index_of(&[2, 0, 0]).unwrap()], 1.0);
        assert!(sp.mul(&y2, &u).iter().all(|&c| c == 0.0));
    }

    #[test]
    fn exp_i_matches_taylor_series() {
        let sp = JetSpace::new(0, 1, 4);
        let x = sp.variable(0, 0.3);
        let e = sp.exp_i(&x);
        // d^p/du^p e^{i(0.3+u)} / p! = i^p e^{0.3 i} / p!
        let mut fact = 1.0;
        for p in 0..=4u32 {
            if p > 0 {
                fact *= p as f64;
            }
            let idx = sp.index_of(&[p, 0]).unwrap();
            let want = Complex64::i().powu(p) * Complex64::from_polar(1.0, 0.3) / fact;
            assert!((e[idx] - want).norm() < 1e-15);
        }
    }

    #[test]
    fn evaluator_matches_pointwise_evaluation() {
        let sp = JetSpace::new(1, 1, 4);
        let mut f = FourierField::zero(1, 1, 6);
        f.add_cos(vec![1], vec![1], vec![1], vec![0], 0.7);
        f.add_sin(vec![2], vec![0], vec![0], vec![2], -0.4);
        f.add_cos(vec![0], vec![2], vec![0], vec![0], 0.5);
        let (x0, y0, u0, v0) = (0.4, 0.1, -0.2, 0.3);
        let x = vec![sp.constant(x0)];
        let y = vec![sp.variable(0, y0)];
        let u = vec![sp.variable(1, u0)];
        let v = vec![sp.variable(2, v0)];
        let mut ev = FieldEvaluator::new(&sp, 6, &x, &u, &y, &v);
        let jet = ev.eval(&f);
        assert!((jet[0] - f.eval(&[x0], &[u0], &[y0], &[v0])).abs() < 1e-14);
        // Linear coefficient in u is ∂_u f.
        let du = f.derivative(crate::fourier::Var::U(0)).eval(&[x0], &[u0], &[y0], &[v0]);
        assert!((jet[sp.index_of(&[0, 1, 0]).unwrap()] - du).abs() < 1e-14);
    }

    #[test]
    fn taylor_evaluator_matches_direct_evaluator() {
        let sp = JetSpace::new(2, 1, 4);
        let mut f = FourierField::zero(2, 1, 5);
        f.add_cos(vec![1, -2], vec![1, 0], vec![1], vec![0], 0.7);
        f.add_sin(vec![2, 1], vec![0, 0], vec![0], vec![2], -0.4);
        f.add_cos(vec![0, 3], vec![0, 1], vec![0], vec![1], 0.5);
        let x = vec![sp.variable(3, 0.4), sp.variable(0, 1.3)];
        let x = vec![jet_shift(&sp, &x[0], 0.3), x[1].clone()];
        let y = vec![sp.variable(0, 0.1), sp.variable(1, -0.2)];
        let u = vec![sp.variable(2, 0.05)];
        let v = vec![sp.variable(3, 0.2)];
        let a = FieldEvaluator::new(&sp, 5, &x, &u, &y, &v).eval(&f);
        let b = TaylorEvaluator::new(&sp, 5, &x, &u, &y, &v).eval(&f);
        assert!(max_abs(&sub(&a, &b)) < 1e-13, "{:?}", sub(&a, &b));
    }

    fn jet_shift(sp: &JetSpace, a: &[f64], c: f64) -> Jet {
        add(a, &sp.mul(&sp.variable(2, 0.0), &sp.constant(c)))
    }
}
