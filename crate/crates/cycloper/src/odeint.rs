//! The ε-scaled companion system εY′ = A(z)Y: adaptive transfer integration with
//! scalar rescaling, constant-coefficient exact transfers, and the Wronskian
//! automorphy matrices M₁, M₂, E(z).

use crate::error::{Error, Result};
use crate::ndiff::{NDifferential, PlanePath, SheetAssignment};
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::Serialize;

pub type CMat = DMatrix<C64>;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

pub fn eps_of(n: usize, t: f64) -> f64 {
    t.powf(-1.0 / n as f64)
}

/// A(z) for the ε-scaled system.
pub fn companion_matrix(w: &NDifferential, z: C64) -> CMat {
    let n = w.n();
    let mut a = CMat::zeros(n, n);
    for k in 0..n - 1 {
        a[(k, k + 1)] = ONE;
    }
    a[(n - 1, 0)] = -w.eval(z);
    a
}

/// z ↦ A(z) together with ε = t^{−1/n}.
pub struct CompanionSystem<'a> {
    pub w: &'a NDifferential,
    pub t: f64,
    pub eps: f64,
}

pub fn companion_system(w: &NDifferential, t: f64) -> Result<CompanionSystem<'_>> {
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("t = {t} must be positive")));
    }
    Ok(CompanionSystem { w, t, eps: eps_of(w.n(), t) })
}

impl CompanionSystem<'_> {
    pub fn a(&self, z: C64) -> CMat {
        companion_matrix(self.w, z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferOptions {
    pub rtol: f64,
    pub atol: f64,
    /// step cap is `cap·ε/max|μ|`
    pub cap: f64,
    pub h_min: f64,
    pub max_steps: usize,
    pub err_budget: f64,
}

impl Default for TransferOptions {
    fn default() -> Self {
        TransferOptions { rtol: 1e-11, atol: 1e-14, cap: 0.5, h_min: 1e-13, max_steps: 5_000_000, err_budget: 1e-4 }
    }
}

impl TransferOptions {
    fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.cap > 0.0 && self.h_min > 0.0 && self.err_budget > 0.0) {
            return Err(Error::Precondition("step control parameters must be positive".into()));
        }
        Ok(())
    }
}

/// True transfer is e^r·mhat.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferResult {
    pub mhat: CMat,
    pub r: f64,
    pub steps: usize,
    pub err: f64,
}

#[derive(Serialize)]
struct TransferJson {
    mhat: Vec<Vec<[f64; 2]>>,
    r: f64,
    steps: usize,
    err: f64,
}

pub fn mat_to_json(m: &CMat) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect()
}

impl TransferResult {
    pub fn matrix(&self) -> CMat {
        &self.mhat * C64::new(self.r.exp(), 0.0)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(TransferJson { mhat: mat_to_json(&self.mhat), r: self.r, steps: self.steps, err: self.err })
            .expect("serializable")
    }

    /// log |det| of the true transfer.
    pub fn log_abs_det(&self) -> f64 {
        self.mhat.determinant().norm().ln() + self.r * self.mhat.nrows() as f64
    }
}

// Dormand–Prince 5(4)
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const BS: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Row-major n×m state.
struct State {
    n: usize,
    m: usize,
    y: Vec<C64>,
}

// out = coef·A(z)·y, A companion with ω value `om`
fn apply(n: usize, m: usize, om: C64, coef: C64, y: &[C64], out: &mut [C64]) {
    for k in 0..n - 1 {
        for j in 0..m {
            out[k * m + j] = coef * y[(k + 1) * m + j];
        }
    }
    for j in 0..m {
        out[(n - 1) * m + j] = -coef * om * y[j];
    }
}

fn max_abs(y: &[C64]) -> f64 {
    y.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Integrates an n×m state along `path`. Returns (state, r, steps, err) with true state e^r·state.
pub fn integrate_state(
    w: &NDifferential,
    t: f64,
    path: &PlanePath,
    y0: &CMat,
    opts: &TransferOptions,
) -> Result<TransferResult> {
    path.check_clearance(w)?;
    integrate_state_unchecked(w, t, path, y0, opts)
}

/// As `integrate_state` but allows the path to touch zeros (the system is regular there).
pub(crate) fn integrate_state_unchecked(
    w: &NDifferential,
    t: f64,
    path: &PlanePath,
    y0: &CMat,
    opts: &TransferOptions,
) -> Result<TransferResult> {
    opts.validate()?;
    let sys = companion_system(w, t)?;
    let n = w.n();
    if y0.nrows() != n {
        return Err(Error::Precondition("state has the wrong number of rows".into()));
    }
    let m = y0.ncols();
    let mut st = State { n, m, y: (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| y0[(i, j)]).collect() };
    let mut r = 0.0;
    let s0 = max_abs(&st.y);
    if s0 > 0.0 && !(1.0 / 16.0..=16.0).contains(&s0) {
        st.y.iter_mut().for_each(|v| *v /= s0);
        r += s0.ln();
    }
    let mut steps = 0usize;
    let mut err = 0.0;
    let nf = n as f64;
    let mut k: Vec<Vec<C64>> = vec![vec![ZERO; n * m]; 7];
    let mut tmp = vec![ZERO; n * m];
    for seg in path.vertices().windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = (b - a).norm();
        let u = (b - a) / len;
        let coef = u / sys.eps;
        let mut s = 0.0;
        let cap_at = |z: C64| opts.cap * sys.eps / w.eval(z).norm().powf(1.0 / nf).max(1e-300);
        let mut h = cap_at(a).min(len);
        while s < len {
            let z = a + u * s;
            h = h.min(cap_at(z)).min(len - s);
            let last = h >= len - s;
            // stages
            for i in 0..7 {
                for q in 0..n * m {
                    let mut acc = st.y[q];
                    for jj in 0..i {
                        if A[i][jj] != 0.0 {
                            acc += k[jj][q] * (h * A[i][jj]);
                        }
                    }
                    tmp[q] = acc;
                }
                let zi = a + u * (s + C[i] * h);
                let om = w.eval(zi);
                apply(n, m, om, coef, &tmp, &mut k[i]);
            }
            let scale = max_abs(&st.y);
            let mut e = 0.0f64;
            for q in 0..n * m {
                let mut d = ZERO;
                for i in 0..7 {
                    d += k[i][q] * (h * (B[i] - BS[i]));
                }
                e = e.max(d.norm());
            }
            let sc = opts.atol + opts.rtol * scale;
            let ratio = e / sc;
            if ratio <= 1.0 {
                for q in 0..n * m {
                    let mut d = ZERO;
                    for i in 0..7 {
                        if B[i] != 0.0 {
                            d += k[i][q] * (h * B[i]);
                        }
                    }
                    st.y[q] += d;
                }
                s = if last { len } else { s + h };
                steps += 1;
                err += e / scale.max(1e-300);
                if err > opts.err_budget {
                    return Err(Error::ToleranceFailure(err));
                }
                if steps > opts.max_steps {
                    return Err(Error::StepUnderflow(s));
                }
                let mx = max_abs(&st.y);
                if mx > 0.0 && !(1.0 / 16.0..=16.0).contains(&mx) {
                    st.y.iter_mut().for_each(|v| *v /= mx);
                    r += mx.ln();
                }
                let fac = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
                h *= fac;
            } else {
                h *= (0.9 * ratio.powf(-0.2)).clamp(0.1, 0.9);
                if h < opts.h_min {
                    return Err(Error::StepUnderflow(s));
                }
            }
        }
    }
    let mut mhat = CMat::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            mhat[(i, j)] = st.y[i * st.m + j];
        }
    }
    debug_assert_eq!(st.n, n);
    Ok(TransferResult { mhat, r, steps, err })
}

/// Transfer of εY′ = A(z)Y along the path: Y(end) = e^r·mhat·Y(start).
pub fn integrate_transfer(w: &NDifferential, t: f64, path: &PlanePath, opts: &TransferOptions) -> Result<TransferResult> {
    integrate_state(w, t, path, &CMat::identity(w.n(), w.n()), opts)
}

/// exp(A·Δz/ε) for constant ω ≡ c.
pub fn exact_constant_transfer(c: C64, n: usize, t: f64, dz: C64) -> CMat {
    let eps = eps_of(n, t);
    let s = dz / eps;
    if c.norm() == 0.0 {
        // nilpotent: Σ (sA)^k / k!
        let mut out = CMat::identity(n, n);
        for i in 0..n {
            let mut f = ONE;
            for j in i + 1..n {
                f = f * s / (j - i) as f64;
                out[(i, j)] = f;
            }
        }
        return out;
    }
    let l = c.ln();
    let mus = crate::ndiff::roots_from_log(n, l);
    let v = CMat::from_fn(n, n, |k, i| mus[i].powu(k as u32));
    let d = CMat::from_diagonal(&nalgebra::DVector::from_iterator(n, mus.iter().map(|m| (m * s).exp())));
    let vinv = v.clone().try_inverse().expect("Vandermonde of distinct roots");
    v * d * vinv
}

/// Value and derivatives f, f′, f″, … of a scalar function at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct JetSpec {
    derivs: Vec<C64>,
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl JetSpec {
    pub fn from_derivs(derivs: Vec<C64>) -> Self {
        JetSpec { derivs }
    }
    pub fn from_taylor(coeffs: &[C64]) -> Self {
        JetSpec { derivs: coeffs.iter().enumerate().map(|(k, c)| c * factorial(k)).collect() }
    }
    pub fn constant(c: C64, order: usize) -> Self {
        let mut d = vec![ZERO; order + 1];
        d[0] = c;
        JetSpec { derivs: d }
    }
    /// The identity function z ↦ z at z.
    pub fn identity(z: C64, order: usize) -> Self {
        let mut d = vec![ZERO; order + 1];
        d[0] = z;
        if order > 0 {
            d[1] = ONE;
        }
        JetSpec { derivs: d }
    }
    pub fn order(&self) -> usize {
        self.derivs.len() - 1
    }
    pub fn deriv(&self, k: usize) -> C64 {
        self.derivs.get(k).copied().unwrap_or(ZERO)
    }
    pub fn derivs(&self) -> &[C64] {
        &self.derivs
    }
    fn taylor(&self) -> Vec<C64> {
        self.derivs.iter().enumerate().map(|(k, d)| d / factorial(k)).collect()
    }
}

fn series_mul(a: &[C64], b: &[C64], len: usize) -> Vec<C64> {
    (0..len)
        .map(|k| (0..=k).map(|i| a.get(i).copied().unwrap_or(ZERO) * b.get(k - i).copied().unwrap_or(ZERO)).sum())
        .collect()
}

fn series_deriv(a: &[C64]) -> Vec<C64> {
    a.iter().enumerate().skip(1).map(|(k, c)| c * k as f64).collect()
}

/// Taylor series of f^α where f has Taylor series `f` and log f(0) = `log0`.
fn series_pow(f: &[C64], alpha: f64, log0: C64, len: usize) -> Vec<C64> {
    let mut p = vec![ZERO; len];
    p[0] = (log0 * alpha).exp();
    for k in 1..len {
        let mut acc = ZERO;
        for j in 1..=k {
            let fj = f.get(j).copied().unwrap_or(ZERO);
            acc += fj * p[k - j] * (alpha * j as f64 - (k - j) as f64);
        }
        p[k] = acc / (f[0] * k as f64);
    }
    p
}

fn require_order(j: &JetSpec, need: usize) -> Result<()> {
    if j.order() < need {
        return Err(Error::Precondition(format!("jet order {} below required {need}", j.order())));
    }
    Ok(())
}

/// W(g·f) = W(f)·M₁(g), rows of W indexed by functions, columns by derivative order.
pub fn m1_matrix(g: &JetSpec, n: usize) -> Result<CMat> {
    require_order(g, n - 1)?;
    Ok(CMat::from_fn(n, n, |k, j| if k <= j { g.deriv(j - k) * binom(j, k) } else { ZERO }))
}

/// W(f∘h) = W(f)(h)·M₂(h′); entries are partial Bell polynomials in h′, h″, ….
pub fn m2_matrix(hprime: &JetSpec, n: usize) -> Result<CMat> {
    require_order(hprime, n.saturating_sub(2))?;
    // x_i = h^{(i)} = hprime^{(i-1)}
    let x = |i: usize| hprime.deriv(i - 1);
    let mut bell = vec![vec![ZERO; n]; n];
    bell[0][0] = ONE;
    for j in 1..n {
        for k in 1..=j {
            let mut acc = ZERO;
            for i in 1..=j - k + 1 {
                acc += x(i) * bell[j - i][k - 1] * binom(j - 1, i - 1);
            }
            bell[j][k] = acc;
        }
    }
    Ok(CMat::from_fn(n, n, |k, j| bell[j][k]))
}

/// M = M₂(h′)·M₁(g) from the recurrence M_{i,j} = M′_{i,j−1} + M_{i−1,j−1}·h′, M₀₀ = g.
pub fn composed_automorphy(g: &JetSpec, hprime: &JetSpec, n: usize) -> Result<CMat> {
    require_order(g, n - 1)?;
    require_order(hprime, n.saturating_sub(2))?;
    let len = n;
    let hp = hprime.taylor();
    // entries as Taylor series
    let mut m: Vec<Vec<Vec<C64>>> = vec![vec![vec![ZERO; len]; n]; n];
    m[0][0] = g.taylor()[..len.min(g.order() + 1)].to_vec();
    m[0][0].resize(len, ZERO);
    for j in 1..n {
        for i in 0..=j {
            let mut e = series_deriv(&m[i][j - 1]);
            e.resize(len, ZERO);
            if i > 0 {
                let p = series_mul(&m[i - 1][j - 1], &hp, len);
                for q in 0..len {
                    e[q] += p[q];
                }
            }
            m[i][j] = e;
        }
    }
    Ok(CMat::from_fn(n, n, |i, j| m[i][j][0]))
}

/// Jets of ω^{(1−n)/(2n)} and ω^{1/n} at z on the branch with log ω(z) = l.
pub fn e_jets(w: &NDifferential, z: C64, l: C64) -> (JetSpec, JetSpec) {
    let n = w.n();
    let tay = w.taylor(z, n);
    let nf = n as f64;
    let g = series_pow(&tay, (1.0 - nf) / (2.0 * nf), l, n);
    let h = series_pow(&tay, 1.0 / nf, l, n);
    (JetSpec::from_taylor(&g), JetSpec::from_taylor(&h))
}

/// E(z) = M₁(ω^{(1−n)/(2n)})·M₂(ω^{1/n}) with log ω(z) = l.
pub fn e_correction_log(w: &NDifferential, z: C64, l: C64) -> Result<CMat> {
    let v = w.eval(z);
    if v.norm() <= 1e-12 * w.coeff_scale() {
        return Err(Error::ZeroOfDifferential);
    }
    let (g, h) = e_jets(w, z, l);
    let n = w.n();
    Ok(m1_matrix(&g, n)? * m2_matrix(&h, n)?)
}

/// E(z) on the branch carried by `sheets` (based or ending at z).
pub fn e_correction(w: &NDifferential, z: C64, sheets: &SheetAssignment) -> Result<CMat> {
    let l = sheets
        .log_near(z)
        .ok_or_else(|| Error::Precondition("sheet assignment does not reach z".into()))?;
    e_correction_log(w, z, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::unit_root;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn rel(a: &CMat, b: &CMat) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn companion_shape() {
        let w = NDifferential::plane(2, vec![c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let a = companion_system(&w, 3.0).unwrap().a(c(2.0, 0.0));
        assert_eq!(a, CMat::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(-2.0, 0.0), c(0.0, 0.0)]));
        let w3 = NDifferential::plane(3, vec![c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let a = companion_matrix(&w3, c(0.3, 0.7));
        assert_eq!(a.trace(), c(0.0, 0.0));
        let nz = a.iter().filter(|v| v.norm() != 0.0).count();
        assert_eq!(nz, 3);
        assert!(companion_system(&w3, 0.0).is_err());
    }

    #[test]
    fn constant_transfer_matches_exact() {
        let cst = c(0.7, -0.4);
        let w = NDifferential::plane(3, vec![cst]).unwrap();
        let p = PlanePath::new(vec![c(0.0, 0.0), c(1.0, 0.5), c(0.2, 1.3)], 0.1).unwrap();
        let t = 50.0;
        let res = integrate_transfer(&w, t, &p, &TransferOptions::default()).unwrap();
        let ex = exact_constant_transfer(cst, 3, t, p.end() - p.start());
        assert!(rel(&res.matrix(), &ex) < 1e-8);
        assert!(res.log_abs_det().abs() < 1e-8);
        let mx = res.mhat.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!((1.0 / 16.0..=16.0).contains(&mx));
    }

    #[test]
    fn zero_length_is_identity() {
        let w = NDifferential::plane(2, vec![c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let p = PlanePath::new(vec![c(1.0, 0.0)], 0.1).unwrap();
        let res = integrate_transfer(&w, 10.0, &p, &TransferOptions::default()).unwrap();
        assert_eq!(res.mhat, CMat::identity(2, 2));
        assert_eq!(res.r, 0.0);
    }

    #[test]
    fn reverse_composes_to_identity() {
        let w = NDifferential::plane(2, vec![c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let p = PlanePath::new(vec![c(1.0, 0.0), c(2.0, 1.0), c(3.0, -0.5)], 0.2).unwrap();
        let o = TransferOptions::default();
        let f = integrate_transfer(&w, 20.0, &p, &o).unwrap();
        let b = integrate_transfer(&w, 20.0, &p.reversed(), &o).unwrap();
        let prod = b.matrix() * f.matrix();
        assert!(rel(&prod, &CMat::identity(2, 2)) < 1e-7);
    }

    #[test]
    fn split_and_tolerance_invariance() {
        let w = NDifferential::plane(3, vec![c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let p1 = PlanePath::new(vec![c(0.0, 0.0), c(0.5, 0.5)], 0.2).unwrap();
        let p2 = PlanePath::new(vec![c(0.5, 0.5), c(-0.2, 0.6)], 0.2).unwrap();
        let o = TransferOptions::default();
        let t = 30.0;
        let whole = integrate_transfer(&w, t, &p1.concat(&p2).unwrap(), &o).unwrap().matrix();
        let a = integrate_transfer(&w, t, &p1, &o).unwrap().matrix();
        let b = integrate_transfer(&w, t, &p2, &o).unwrap().matrix();
        assert!(rel(&(b * a), &whole) < 1e-7);
        let o2 = TransferOptions { rtol: o.rtol * 0.5, ..o };
        let half = integrate_transfer(&w, t, &p1.concat(&p2).unwrap(), &o2).unwrap().matrix();
        assert!(rel(&half, &whole) < 1e-7);
    }

    #[test]
    fn json_shape() {
        let w = NDifferential::plane(2, vec![c(1.0, 0.0)]).unwrap();
        let p = PlanePath::segment(c(0.0, 0.0), c(1.0, 0.0), 0.1).unwrap();
        let v = integrate_transfer(&w, 1.0, &p, &TransferOptions::default()).unwrap().to_json_value();
        for k in ["mhat", "r", "steps", "err"] {
            assert!(v.get(k).is_some());
        }
        assert_eq!(v["mhat"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn exact_transfer_cases() {
        assert!(rel(&exact_constant_transfer(c(2.0, 1.0), 3, 7.0, c(0.0, 0.0)), &CMat::identity(3, 3)) < 1e-14);
        let m = exact_constant_transfer(c(1.0, 0.0), 2, 1.0, c(0.8, 0.0));
        let ev = nalgebra::linalg::Schur::new(m).eigenvalues().unwrap();
        for target in [c(0.0, 0.8).exp(), c(0.0, -0.8).exp()] {
            assert!(ev.iter().any(|e| (e - target).norm() < 1e-12));
        }
        for cst in [c(0.0, 0.0), c(-0.3, 0.9)] {
            let a = exact_constant_transfer(cst, 4, 3.0, c(0.2, 0.1));
            let b = exact_constant_transfer(cst, 4, 3.0, c(-0.5, 0.4));
            let ab = exact_constant_transfer(cst, 4, 3.0, c(-0.3, 0.5));
            assert!(rel(&(a * b), &ab) < 1e-12);
        }
    }

    #[test]
    fn printed_n3_wronskian_matrices() {
        let g = JetSpec::from_derivs(vec![c(1.5, 0.2), c(-0.7, 0.1), c(0.4, 0.9)]);
        let m1 = m1_matrix(&g, 3).unwrap();
        let (g0, g1, g2) = (g.deriv(0), g.deriv(1), g.deriv(2));
        let z = c(0.0, 0.0);
        let want = CMat::from_row_slice(3, 3, &[g0, g1, g2, z, g0, g1 * 2.0, z, z, g0]);
        assert!(rel(&m1, &want) < 1e-15);
        let h = JetSpec::from_derivs(vec![c(0.3, -1.1), c(0.6, 0.25)]);
        let m2 = m2_matrix(&h, 3).unwrap();
        let (h1, h2) = (h.deriv(0), h.deriv(1));
        let one = c(1.0, 0.0);
        let want = CMat::from_row_slice(3, 3, &[one, z, z, z, h1, h2, z, z, h1 * h1]);
        assert!(rel(&m2, &want) < 1e-15);
        assert_eq!(m1_matrix(&JetSpec::constant(one, 3), 4).unwrap(), CMat::identity(4, 4));
        assert_eq!(m2_matrix(&JetSpec::constant(one, 3), 4).unwrap(), CMat::identity(4, 4));
        assert!(m1_matrix(&JetSpec::constant(one, 1), 3).is_err());
    }

    #[test]
    fn e_correction_trivial_and_det() {
        let w = NDifferential::plane(3, vec![c(1.0, 0.0)]).unwrap();
        let s = SheetAssignment::principal(&w, c(0.4, 0.2)).unwrap();
        assert!(rel(&e_correction(&w, c(0.4, 0.2), &s).unwrap(), &CMat::identity(3, 3)) < 1e-15);
        for n in 2..=4 {
            let w = NDifferential::plane(n, vec![c(-1.0, 0.3), c(0.2, 0.0), c(0.5, -0.4), c(1.0, 0.0)]).unwrap();
            for k in 0..5 {
                let z = unit_root(5, k) * 1.7;
                let e = e_correction_log(&w, z, w.eval(z).ln()).unwrap();
                assert!((e.determinant() - 1.0).norm() < 1e-10, "n={n}");
            }
            let z0 = w.zeros()[0];
            assert_eq!(e_correction_log(&w, z0, c(0.0, 0.0)), Err(Error::ZeroOfDifferential));
        }
    }

    // Wronskian rows: function index, columns: derivative order.
    fn poly_taylor(p: &[C64], z: C64, len: usize) -> Vec<C64> {
        let w = NDifferential::plane(2, p.to_vec()).ok();
        match w {
            Some(w) => w.taylor(z, len - 1),
            None => {
                let mut v = vec![C64::new(0.0, 0.0); len];
                v[0] = p[0];
                v
            }
        }
    }

    fn compose_series(f: &[C64], h: &[C64], len: usize) -> Vec<C64> {
        // f about h(z), h series about z with h[0] the shift already removed
        let mut out = vec![C64::new(0.0, 0.0); len];
        let mut pw = vec![C64::new(0.0, 0.0); len];
        pw[0] = C64::new(1.0, 0.0);
        for fk in f.iter().take(len) {
            for q in 0..len {
                out[q] += fk * pw[q];
            }
            pw = series_mul(&pw, h, len);
        }
        out
    }

    prop_compose! {
        fn cplx()(re in -1.0f64..1.0, im in -1.0f64..1.0) -> C64 { C64::new(re, im) }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn prop_2_4_recurrence(n in 2usize..5, gs in proptest::collection::vec(cplx(), 6),
                               hs in proptest::collection::vec(cplx(), 6),
                               fs in proptest::collection::vec(cplx(), 24), z in cplx()) {
            let mut gc = gs.clone();
            gc[0] += 2.0;
            let mut hc = hs.clone();
            hc[1] += 1.5;
            let g = JetSpec::from_taylor(&poly_taylor(&gc, z, n));
            let hser = poly_taylor(&hc, z, n + 1);
            let hp = JetSpec::from_taylor(&series_deriv(&hser)[..n]);
            let m = composed_automorphy(&g, &hp, n).unwrap();
            let prod = m2_matrix(&hp, n).unwrap() * m1_matrix(&g, n).unwrap();
            prop_assert!((&m - &prod).norm() <= 1e-10 * prod.norm());
            prop_assert_eq!(m[(0, 0)], g.deriv(0));
            for i in 0..n { for j in 0..i { prop_assert_eq!(m[(i, j)], C64::new(0.0, 0.0)); } }
            // W(g·(f∘h)) = W(f)(h)·M on random polynomials f_i
            let hz = hser[0];
            let mut hshift = hser.clone();
            hshift[0] = C64::new(0.0, 0.0);
            let mut lhs = CMat::zeros(n, n);
            let mut wf = CMat::zeros(n, n);
            for i in 0..n {
                let fi = &fs[i * 6..i * 6 + 6];
                let f_at_h = poly_taylor(fi, hz, n);
                let comp = compose_series(&f_at_h, &hshift, n);
                let gt = poly_taylor(&gc, z, n);
                let prodser = series_mul(&gt, &comp, n);
                for j in 0..n {
                    lhs[(i, j)] = prodser[j] * factorial(j);
                    wf[(i, j)] = f_at_h[j] * factorial(j);
                }
            }
            let rhs = wf * &m;
            prop_assert!((&lhs - &rhs).norm() <= 1e-9 * (1.0 + rhs.norm()));
        }
    }
}
