//! WKB frames, dominant-term factors Eₜ(γ), Stokes factors at zeros, and the
//! asymptotic checks built on them (transfer residuals, growth rates).

use crate::error::{Error, Result};
use crate::ndiff::{self, continue_roots, mu0_from_log, roots_from_log, unit_root, NDifferential, PlanePath, SheetAssignment};
use crate::odeint::{self, CMat, TransferOptions};
use crate::stokesgeo::{CrossingEvent, PathDecomposition, Source, StokesGraph};
use rayon::prelude::*;
use num_complex::Complex64 as C64;
use serde::Serialize;
use std::f64::consts::PI;

pub const TOL_FIT: f64 = 1e-3;
pub const DEFAULT_LADDER: [f64; 4] = [1e2, 1e3, 1e4, 1e5];

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

pub fn kappa(n: usize, t: f64) -> f64 {
    t.powf(1.0 / n as f64)
}

/// P₀ diagonalizes the companion coefficient: A·P₀ = P₀·B₀.
#[derive(Debug, Clone, PartialEq)]
pub struct WkbFrame {
    pub z: C64,
    pub p0: CMat,
    pub b0: Vec<C64>,
    pub amplitude: C64,
    pub log: C64,
}

impl WkbFrame {
    pub fn from_log(n: usize, z: C64, l: C64) -> Self {
        let mus = roots_from_log(n, l);
        let p0 = CMat::from_fn(n, n, |k, i| mus[i].powu(k as u32));
        let amplitude = (l * ((1.0 - n as f64) / (2.0 * n as f64))).exp();
        WkbFrame { z, p0, b0: mus, amplitude, log: l }
    }

    /// a·P₀, columns ordered by sheet label.
    pub fn matrix(&self) -> CMat {
        &self.p0 * self.amplitude
    }

    pub fn inverse(&self) -> CMat {
        self.matrix().try_inverse().expect("Vandermonde of distinct roots is invertible")
    }
}

pub fn frame(w: &NDifferential, z: C64, sheets: &SheetAssignment) -> Result<WkbFrame> {
    if w.eval(z).norm() <= 1e-14 * w.coeff_scale() {
        return Err(Error::ZeroOfDifferential);
    }
    let l = sheets
        .log_near(z)
        .ok_or_else(|| Error::Precondition("sheet assignment does not reach z".into()))?;
    Ok(WkbFrame::from_log(w.n(), z, l))
}

/// A matrix stored as e^r·m to keep entries representable.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaled {
    pub m: CMat,
    pub r: f64,
}

impl Scaled {
    pub fn new(m: CMat, r: f64) -> Self {
        let mut s = Scaled { m, r };
        s.normalize();
        s
    }
    pub fn identity(n: usize) -> Self {
        Scaled { m: CMat::identity(n, n), r: 0.0 }
    }
    pub fn diag_exp(ex: &[C64]) -> Self {
        let r = ex.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max);
        let n = ex.len();
        let mut m = CMat::zeros(n, n);
        for (i, e) in ex.iter().enumerate() {
            m[(i, i)] = (e - r).exp();
        }
        Scaled { m, r }
    }
    fn normalize(&mut self) {
        let mx = self.m.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if mx > 0.0 && mx.is_finite() {
            self.m /= C64::new(mx, 0.0);
            self.r += mx.ln();
        }
    }
    pub fn mul(&self, o: &Scaled) -> Scaled {
        Scaled::new(&self.m * &o.m, self.r + o.r)
    }
    pub fn left(&self, a: &CMat) -> Scaled {
        Scaled::new(a * &self.m, self.r)
    }
    pub fn right(&self, a: &CMat) -> Scaled {
        Scaled::new(&self.m * a, self.r)
    }
    /// log of the Frobenius norm.
    pub fn log_norm(&self) -> f64 {
        self.r + self.m.norm().ln()
    }
    pub fn to_matrix(&self) -> CMat {
        &self.m * C64::new(self.r.exp(), 0.0)
    }
}

/// ‖a − b‖_F / ‖b‖_F for scaled matrices.
pub fn relative_distance(a: &Scaled, b: &Scaled) -> f64 {
    let s = (a.r - b.r).exp();
    (&a.m * C64::new(s, 0.0) - &b.m).norm() / b.m.norm()
}

/// diag(exp(t^{1/n} ∫_γ μᵢ)) for a single segment, held as exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct EFactor {
    pub exponents: Vec<C64>,
}

impl EFactor {
    pub fn identity(n: usize) -> Self {
        EFactor { exponents: vec![ZERO; n] }
    }
    pub fn scaled(&self) -> Scaled {
        Scaled::diag_exp(&self.exponents)
    }
    /// (unit-scale diagonal, scalar exponent)
    pub fn unit_and_scale(&self) -> (Vec<C64>, f64) {
        let s = self.scaled();
        ((0..self.exponents.len()).map(|i| s.m[(i, i)]).collect(), s.r)
    }
    pub fn then(&self, next: &EFactor) -> EFactor {
        EFactor { exponents: self.exponents.iter().zip(&next.exponents).map(|(a, b)| a + b).collect() }
    }
    pub fn log_det(&self) -> C64 {
        self.exponents.iter().sum()
    }
}

pub fn e_factor(w: &NDifferential, segment: &PlanePath, t: f64, sheets: &SheetAssignment) -> Result<EFactor> {
    let n = w.n();
    let z0 = ndiff::natural_coord(w, segment, sheets, 0)?;
    let k = kappa(n, t);
    Ok(EFactor { exponents: (0..n).map(|i| unit_root(n, i) * z0 * k).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticReport {
    pub ladder: Vec<f64>,
    pub values: Vec<f64>,
    pub extrapolated: f64,
    pub monotone_tail: bool,
}

/// Least-squares fit of c₀ + c₁·x on the given points, returning c₀.
pub fn linear_intercept(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let den = m * sxx - sx * sx;
    if den.abs() < 1e-300 {
        return (sy / m, 0.0);
    }
    let c1 = (m * sxy - sx * sy) / den;
    ((sy - c1 * sx) / m, c1)
}

pub(crate) fn check_ladder(ladder: &[f64]) -> Result<()> {
    if ladder.len() < 4 {
        return Err(Error::LadderTooShort(ladder.len()));
    }
    if ladder.windows(2).any(|w| !(w[1] > w[0])) || ladder[0] <= 0.0 {
        return Err(Error::Precondition("ladder must be positive and strictly increasing".into()));
    }
    Ok(())
}

impl AsymptoticReport {
    /// Extrapolates in ε = t^{−1/n} from the top three rungs.
    pub fn new(n: usize, ladder: Vec<f64>, values: Vec<f64>) -> Self {
        let k = ladder.len().min(3);
        let xs: Vec<f64> = ladder[ladder.len() - k..].iter().map(|t| t.powf(-1.0 / n as f64)).collect();
        let (c0, _) = linear_intercept(&xs, &values[values.len() - k..]);
        let dev: Vec<f64> = values[values.len() - k..].iter().map(|v| (v - c0).abs()).collect();
        let monotone_tail = dev.windows(2).all(|w| w[1] <= w[0]);
        AsymptoticReport { ladder, values, extrapolated: c0, monotone_tail }
    }

    pub fn decreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] < w[0])
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,value\n");
        for (t, v) in self.ladder.iter().zip(&self.values) {
            s.push_str(&format!("{t:e},{v:.12e}\n"));
        }
        s
    }
}

/// Fitted Stokes constant for a ray: crossing it counterclockwise (left) applies
/// I + a·w·E_ij with (i, j) the ray's pair and w the ray's phase weight.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StokesFactor {
    pub ray: usize,
    pub zero: Option<usize>,
    pub pair: (usize, usize),
    pub a: [f64; 2],
    pub residual: f64,
    pub t: f64,
}

impl StokesFactor {
    pub fn a(&self) -> C64 {
        C64::new(self.a[0], self.a[1])
    }
}

/// Local geometry of the recessive sectors at a simple zero, in labels continued
/// counterclockwise in the angle θ.
#[derive(Debug, Clone)]
pub struct ZeroLocal {
    pub zero: usize,
    pub z0: C64,
    pub rho: f64,
    /// log ω′(z₀) on the chosen branch
    pub log_dw: C64,
    /// centre angles of the recessive intervals (continued, increasing)
    pub mids: Vec<f64>,
    /// recessive sheet of each interval
    pub sheets: Vec<usize>,
    deflated: Vec<C64>,
}

fn eval_poly(c: &[C64], z: C64) -> C64 {
    c.iter().rev().fold(ZERO, |acc, &x| acc * z + x)
}

impl ZeroLocal {
    pub fn new(w: &NDifferential, zero: usize, count: usize) -> Result<Self> {
        let n = w.n();
        let z0 = *w.zeros().get(zero).ok_or_else(|| Error::Precondition(format!("no zero {zero}")))?;
        let sep = w
            .zeros()
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != zero)
            .map(|(_, z)| (z - z0).norm())
            .fold(f64::INFINITY, f64::min);
        let rho = if sep.is_finite() { 0.5 * sep } else { 2.0 };
        let deflated = w.deflate(z0);
        let log_dw = eval_poly(&deflated, z0).ln();
        let nf = n as f64;
        let c = (log_dw.im - PI) / nf;
        // bottom ties sit at θ = π + (2πm − n·c)/(n+1); interval centres half a step later
        let step = 2.0 * PI / (nf + 1.0);
        let first = PI - nf * c / (nf + 1.0) + 0.5 * step;
        let first = first.rem_euclid(step);
        let mids: Vec<f64> = (0..count).map(|k| first + step * k as f64).collect();
        let mut out = ZeroLocal { zero, z0, rho, log_dw, mids: vec![], sheets: vec![], deflated };
        let sheets = mids
            .iter()
            .map(|&th| {
                let l = out.log_at(w, th, rho);
                let zi = ndiff::zero_integral(w, z0, z0 + C64::from_polar(rho, th), l);
                (0..n)
                    .min_by(|&a, &b| (unit_root(n, a) * zi).re.partial_cmp(&(unit_root(n, b) * zi).re).unwrap())
                    .unwrap()
            })
            .collect();
        out.mids = mids;
        out.sheets = sheets;
        Ok(out)
    }

    /// Continued log ω at z₀ + r·e^{iθ}.
    pub fn log_at(&self, w: &NDifferential, th: f64, r: f64) -> C64 {
        let z = self.z0 + C64::from_polar(r, th);
        let g0 = eval_poly(&self.deflated, self.z0);
        let _ = w;
        self.log_dw + C64::new(r.ln(), th) + (eval_poly(&self.deflated, z) / g0).ln()
    }

    /// Bottom tie between interval k and k+1.
    pub fn bottom_tie(&self, k: usize, n: usize) -> f64 {
        self.mids[0] + 2.0 * PI / (n as f64 + 1.0) * (k as f64 + 0.5)
    }
}

/// State at the zero of the solution recessive on interval k, normalized by its WKB data.
fn recessive_at_zero(w: &NDifferential, loc: &ZeroLocal, k: usize, t: f64, opts: &TransferOptions) -> Result<Vec<C64>> {
    let n = w.n();
    let th = loc.mids[k];
    let s = loc.sheets[k];
    let p = loc.z0 + C64::from_polar(loc.rho, th);
    let l = loc.log_at(w, th, loc.rho);
    let fr = WkbFrame::from_log(n, p, l);
    let col = fr.matrix().column(s).into_owned();
    let y0 = CMat::from_column_slice(n, 1, col.as_slice());
    let phi = unit_root(n, s) * ndiff::zero_integral(w, loc.z0, p, l) * kappa(n, t);
    let path = PlanePath::segment(p, loc.z0, 1e-12)?;
    let res = odeint::integrate_state_unchecked(w, t, &path, &y0, opts)?;
    let sc = C64::new(0.0, phi.im).exp() * (res.r + phi.re).exp();
    Ok((0..n).map(|i| res.mhat[(i, 0)] * sc).collect())
}

/// Stokes data of one zero at one t: for every transition the diagonal defect |α − 1|
/// and the coefficients c_m of u_{k+n} = α·u_k + Σ c_m u_{k+m}.
#[derive(Debug, Clone)]
pub struct ZeroRelations {
    pub t: f64,
    pub alphas: Vec<C64>,
    pub coeffs: Vec<Vec<C64>>,
}

pub fn zero_relations(w: &NDifferential, loc: &ZeroLocal, t: f64, opts: &TransferOptions) -> Result<ZeroRelations> {
    let n = w.n();
    let turns = n + 1;
    if loc.mids.len() < turns + n {
        return Err(Error::Precondition("not enough intervals for a full turn".into()));
    }
    let us: Vec<Vec<C64>> = (0..turns + n).map(|k| recessive_at_zero(w, loc, k, t, opts)).collect::<Result<_>>()?;
    let mut alphas = Vec::new();
    let mut coeffs = Vec::new();
    for k in 0..turns {
        let v = CMat::from_fn(n, n, |i, m| us[k + m][i]);
        let rhs = nalgebra::DVector::from_iterator(n, us[k + n].iter().copied());
        let x = v.lu().solve(&rhs).ok_or_else(|| Error::NonUnipotentConnection(f64::INFINITY))?;
        alphas.push(x[0]);
        coeffs.push((1..n).map(|m| x[m]).collect());
    }
    Ok(ZeroRelations { t, alphas, coeffs })
}

fn extrapolate_c(n: usize, ladder: &[f64], vals: &[C64]) -> C64 {
    let k = ladder.len().min(3);
    let xs: Vec<f64> = ladder[ladder.len() - k..].iter().map(|t| t.powf(-1.0 / n as f64)).collect();
    let tail = &vals[vals.len() - k..];
    let re: Vec<f64> = tail.iter().map(|v| v.re).collect();
    let im: Vec<f64> = tail.iter().map(|v| v.im).collect();
    C64::new(linear_intercept(&xs, &re).0, linear_intercept(&xs, &im).0)
}

/// For each primary ray at the zero: (ray, transition k, offset m).
fn assign_rays(w: &NDifferential, graph: &StokesGraph, loc: &ZeroLocal) -> Result<Vec<(usize, usize, usize)>> {
    let n = w.n();
    let turns = n + 1;
    let step = 2.0 * PI / turns as f64;
    let b0 = loc.bottom_tie(0, n);
    let slack = 0.1 * PI / turns as f64;
    let mut out = Vec::new();
    let mut used = vec![vec![false; n]; turns];
    for ri in graph.primary_at(loc.zero) {
        let ray = &graph.rays[ri];
        let th = b0 - slack + (ray.direction.arg() - b0 + slack).rem_euclid(2.0 * PI);
        let k = (((th - b0 + slack) / step).floor() as usize).min(turns - 1);
        let p = ray.vertices[1];
        let l_an = loc.log_at(w, th, (p - loc.z0).norm());
        let d = ((ray.logs[1].im - l_an.im) / (2.0 * PI)).round() as i64;
        let lab = |r: usize| (r as i64 + d).rem_euclid(n as i64) as usize;
        let (i, j) = (lab(ray.pair.0), lab(ray.pair.1));
        let m = (1..n)
            .find(|&m| (loc.sheets[k], loc.sheets[k + m]) == (i, j))
            .ok_or_else(|| Error::FactorMismatch(format!("ray {ri} pair ({i},{j}) not in window {k}")))?;
        if used[k][m] {
            return Err(Error::FactorMismatch(format!("window {k} offset {m} has two rays")));
        }
        used[k][m] = true;
        out.push((ri, k, m));
    }
    if out.len() != turns * (n - 1) {
        return Err(Error::FactorMismatch(format!("zero {} has {} rays, expected {}", loc.zero, out.len(), turns * (n - 1))));
    }
    Ok(out)
}

/// Stokes constants of every primary ray at a zero, extrapolated over the ladder.
pub fn fit_stokes_factors(w: &NDifferential, graph: &StokesGraph, zero: usize, ladder: &[f64]) -> Result<Vec<StokesFactor>> {
    check_ladder(ladder)?;
    let n = w.n();
    let loc = ZeroLocal::new(w, zero, 2 * n + 1)?;
    let slots = assign_rays(w, graph, &loc)?;
    let opts = TransferOptions::default();
    let rels: Vec<ZeroRelations> = ladder.par_iter().map(|&t| zero_relations(w, &loc, t, &opts)).collect::<Result<_>>()?;
    let alpha_inf: Vec<C64> = (0..=n)
        .map(|k| extrapolate_c(n, ladder, &rels.iter().map(|r| r.alphas[k]).collect::<Vec<_>>()))
        .collect();
    let defect = alpha_inf.iter().map(|a| (a - ONE).norm()).fold(0.0, f64::max);
    if defect > TOL_FIT {
        return Err(Error::NonUnipotentConnection(defect));
    }
    let mut out: Vec<StokesFactor> = slots
        .into_iter()
        .map(|(ray, k, m)| {
            let vals: Vec<C64> = rels.iter().map(|r| -r.coeffs[k][m - 1]).collect();
            let a = extrapolate_c(n, ladder, &vals);
            StokesFactor {
                ray,
                zero: Some(zero),
                pair: graph.rays[ray].pair,
                a: [a.re, a.im],
                residual: (alpha_inf[k] - ONE).norm(),
                t: *ladder.last().unwrap(),
            }
        })
        .collect();
    out.sort_by_key(|f| f.ray);
    Ok(out)
}

/// Constant of a single primary ray.
pub fn fit_stokes_factor(w: &NDifferential, graph: &StokesGraph, ray: usize, ladder: &[f64]) -> Result<StokesFactor> {
    let zero = match graph.rays.get(ray).map(|r| r.origin) {
        Some(Source::Zero(k)) => k,
        Some(_) => return Err(Error::Precondition("secondary constants derive from their parents".into())),
        None => return Err(Error::Precondition(format!("no ray {ray}"))),
    };
    fit_stokes_factors(w, graph, zero, ladder)?
        .into_iter()
        .find(|f| f.ray == ray)
        .ok_or_else(|| Error::FactorMismatch(format!("ray {ray} unassigned")))
}

/// ∫(μᵢ − μⱼ) along a ray from its source to a point q on segment `seg`.
pub fn ray_phase_at(w: &NDifferential, graph: &StokesGraph, ray: usize, seg: usize, q: C64) -> C64 {
    let r = &graph.rays[ray];
    let n = w.n();
    let v = r.vertices[seg];
    let (i, j) = r.pair;
    let f = |s: f64| {
        let z = v + (q - v) * s;
        let m0 = mu0_from_log(n, r.log_at(w, seg, z));
        (unit_root(n, i) - unit_root(n, j)) * m0 * (q - v)
    };
    let (val, _) = crate::quad::integrate(f, 0.0, 1.0, 1e-13, 1e-15);
    r.phase[seg] + val
}

/// Matrix slot (path labels) and phase weight of a crossing's unipotent: entry (j, i)
/// weighted by exp(κ∫(μⱼ − μᵢ)) from the ray's source.
fn event_slot(w: &NDifferential, graph: &StokesGraph, ev: &CrossingEvent, path_log: C64, k: f64) -> ((usize, usize), C64) {
    let n = w.n();
    let shift = ((path_log.im - ev.ray_log.im) / (2.0 * PI)).round() as i64;
    let lab = |r: usize| (r as i64 - shift).rem_euclid(n as i64) as usize;
    let wgt = (-ray_phase_at(w, graph, ev.ray, ev.ray_seg, ev.point) * k).exp();
    ((lab(ev.pair.1), lab(ev.pair.0)), wgt)
}

/// Predicted normalized transfer E(γ_last)·A_last·…·A_1·E(γ_1) along a decomposed path.
pub fn predicted_transfer(
    w: &NDifferential,
    graph: &StokesGraph,
    decomp: &PathDecomposition,
    factors: &[StokesFactor],
    t: f64,
    start: &SheetAssignment,
) -> Result<Scaled> {
    let n = w.n();
    let k = kappa(n, t);
    if decomp.segments.len() != decomp.events.len() + 1 {
        return Err(Error::FactorMismatch("segments and events out of step".into()));
    }
    let mut cur = start.clone();
    let mut acc = Scaled::identity(n);
    for (si, seg) in decomp.segments.iter().enumerate() {
        if !seg.is_point() {
            acc = e_factor(w, seg, t, &cur)?.scaled().mul(&acc);
            cur = continue_roots(w, seg, &cur)?.at_end();
        }
        let Some(ev) = decomp.events.get(si) else { break };
        let f = factors
            .iter()
            .find(|f| f.ray == ev.ray)
            .ok_or_else(|| Error::FactorMismatch(format!("no constant for ray {}", ev.ray)))?;
        if f.pair != ev.pair {
            return Err(Error::FactorMismatch(format!("ray {} pair {:?} vs {:?}", ev.ray, f.pair, ev.pair)));
        }
        let (slot, wgt) = event_slot(w, graph, ev, cur.end_log(), k);
        let mut a = CMat::identity(n, n);
        a[slot] = f.a() * wgt * f64::from(ev.side);
        acc = acc.left(&a);
    }
    Ok(acc)
}

/// Sorted zeros whose primary rays the path crosses.
fn zeros_crossed(graph: &StokesGraph, decomp: &PathDecomposition) -> Result<Vec<usize>> {
    let mut zs = Vec::new();
    for ev in &decomp.events {
        match graph.rays[ev.ray].origin {
            Source::Zero(z) => zs.push(z),
            Source::Crossing(_) => {
                return Err(Error::FactorMismatch(format!("path crosses secondary ray {}", ev.ray)));
            }
        }
    }
    zs.sort_unstable();
    zs.dedup();
    Ok(zs)
}

/// All constants needed along a path, fitted over the ladder.
pub fn factors_for_path(w: &NDifferential, graph: &StokesGraph, decomp: &PathDecomposition, ladder: &[f64]) -> Result<Vec<StokesFactor>> {
    let mut out = Vec::new();
    for z in zeros_crossed(graph, decomp)? {
        out.extend(fit_stokes_factors(w, graph, z, ladder)?);
    }
    Ok(out)
}

/// Normalized transfer F_end⁻¹·T·F_start as a scaled matrix.
pub fn normalized_transfer(w: &NDifferential, path: &PlanePath, t: f64, start: &SheetAssignment, opts: &TransferOptions) -> Result<Scaled> {
    let end = continue_roots(w, path, start)?.at_end();
    let fs = frame(w, path.start(), start)?.matrix();
    let fe = frame(w, path.end(), &end)?.inverse();
    let tr = odeint::integrate_transfer(w, t, path, opts)?;
    Ok(Scaled::new(fe * &tr.mhat * fs, tr.r))
}

/// ‖ρ·M⁻¹ − I‖_F for scaled matrices.
pub fn identity_residual(rho: &Scaled, m: &Scaled) -> Result<f64> {
    let inv = m.m.clone().try_inverse().ok_or_else(|| Error::Precondition("predicted product is singular".into()))?;
    let n = m.m.nrows();
    let prod = &rho.m * inv * C64::new((rho.r - m.r).exp(), 0.0);
    Ok((prod - CMat::identity(n, n)).norm())
}

/// ‖ρ_t·M_t⁻¹ − I‖ for the normalized numerical transfer ρ_t and the predicted product M_t.
pub fn theorem1_residual_with(
    w: &NDifferential,
    path: &PlanePath,
    graph: &StokesGraph,
    ladder: &[f64],
    factors: &[StokesFactor],
) -> Result<AsymptoticReport> {
    check_ladder(ladder)?;
    let decomp = crate::stokesgeo::decompose_path(path, graph)?;
    let start = SheetAssignment::principal(w, path.start())?;
    let opts = TransferOptions::default();
    let values: Vec<f64> = ladder
        .par_iter()
        .map(|&t| {
            let rho = normalized_transfer(w, path, t, &start, &opts)?;
            let m = predicted_transfer(w, graph, &decomp, factors, t, &start)?;
            identity_residual(&rho, &m)
        })
        .collect::<Result<_>>()?;
    Ok(AsymptoticReport::new(w.n(), ladder.to_vec(), values))
}

pub fn theorem1_residual(w: &NDifferential, path: &PlanePath, graph: &StokesGraph, ladder: &[f64]) -> Result<AsymptoticReport> {
    check_ladder(ladder)?;
    let decomp = crate::stokesgeo::decompose_path(path, graph)?;
    let factors = factors_for_path(w, graph, &decomp, ladder)?;
    theorem1_residual_with(w, path, graph, ladder, &factors)
}

/// Hook around the source zero of a primary ray: radially in just clockwise of the ray,
/// counterclockwise along a small arc across it, and out just clockwise of the next ray.
pub fn ray_hook(graph: &StokesGraph, ray: usize, inner: f64, outer: f64, delta: f64) -> Result<PlanePath> {
    let r = graph.rays.get(ray).ok_or_else(|| Error::Precondition(format!("no ray {ray}")))?;
    let Source::Zero(zi) = r.origin else {
        return Err(Error::Precondition("hooks start at primary rays".into()));
    };
    let z0 = r.source;
    let th = r.direction.arg();
    let gap = graph
        .primary_at(zi)
        .iter()
        .map(|&q| (graph.rays[q].direction.arg() - th).rem_euclid(2.0 * PI))
        .filter(|&d| d > 1e-6)
        .fold(2.0 * PI, f64::min);
    let (a0, a1) = (th - delta, th + gap - delta);
    let pieces = (48.0 * gap / PI).ceil() as usize;
    let mut v = vec![z0 + C64::from_polar(outer, a0)];
    v.extend(PlanePath::arc(z0, inner, a0, a1, pieces, 0.5 * inner)?.vertices().iter().copied());
    v.push(z0 + C64::from_polar(outer, a1));
    PlanePath::new(v, 0.5 * inner)
}

/// Stokes constant of an isolated primary ray read off the numerical transfer along a hook,
/// with halved step cap and tighter tolerance.
pub fn brute_force_factor(
    w: &NDifferential,
    graph: &StokesGraph,
    ray: usize,
    ladder: &[f64],
    (inner, outer, delta): (f64, f64, f64),
) -> Result<StokesFactor> {
    check_ladder(ladder)?;
    let n = w.n();
    let path = ray_hook(graph, ray, inner, outer, delta)?;
    let decomp = crate::stokesgeo::decompose_path(&path, graph)?;
    if decomp.events.len() != 1 || decomp.events[0].ray != ray {
        return Err(Error::Precondition(format!("hook of ray {ray} crosses {} rays", decomp.events.len())));
    }
    let ev = &decomp.events[0];
    let start = SheetAssignment::principal(w, path.start())?;
    let mid = continue_roots(w, &decomp.segments[0], &start)?.at_end();
    let opts = TransferOptions { rtol: 1e-12, cap: 0.25, ..TransferOptions::default() };
    let fits: Vec<(C64, f64)> = ladder
        .par_iter()
        .map(|&t| {
            let k = kappa(n, t);
            let rho = normalized_transfer(w, &path, t, &start, &opts)?;
            let e1 = e_factor(w, &decomp.segments[0], t, &start)?;
            let e2 = e_factor(w, &decomp.segments[1], t, &mid)?;
            let conn = CMat::from_fn(n, n, |p, q| rho.m[(p, q)] * (rho.r - e2.exponents[p] - e1.exponents[q]).exp());
            let (slot, wgt) = event_slot(w, graph, ev, mid.end_log(), k);
            let a = conn[slot] / (wgt * f64::from(ev.side));
            let mut model = CMat::identity(n, n);
            model[slot] = conn[slot];
            Ok((a, (conn - model).norm()))
        })
        .collect::<Result<_>>()?;
    let a = extrapolate_c(n, ladder, &fits.iter().map(|f| f.0).collect::<Vec<_>>());
    let residual = fits.last().map(|f| f.1).unwrap_or(0.0);
    if residual > TOL_FIT {
        return Err(Error::NonUnipotentConnection(residual));
    }
    Ok(StokesFactor {
        ray,
        zero: match graph.rays[ray].origin {
            Source::Zero(z) => Some(z),
            Source::Crossing(_) => None,
        },
        pair: ev.pair,
        a: [a.re, a.im],
        residual,
        t: *ladder.last().unwrap(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    pub measured: f64,
    pub predicted: f64,
    pub ladder: Vec<f64>,
    pub log_norms: Vec<f64>,
    pub sheets: Vec<usize>,
}

/// Slope of log‖ρ_t‖ against t^{1/n} and the dominant-sheet prediction Re Σ ∫_{γᵢ} μ_{αᵢ}.
pub fn growth_exponent(w: &NDifferential, path: &PlanePath, graph: &StokesGraph, ladder: &[f64]) -> Result<GrowthReport> {
    check_ladder(ladder)?;
    let n = w.n();
    let decomp = crate::stokesgeo::decompose_path(path, graph)?;
    let start = SheetAssignment::principal(w, path.start())?;
    let mut cur = start.clone();
    let mut predicted = 0.0;
    let mut sheets = Vec::new();
    for (si, seg) in decomp.segments.iter().enumerate() {
        if seg.is_point() {
            continue;
        }
        let e = e_factor(w, seg, 1.0, &cur)?;
        let mut re: Vec<(f64, usize)> = e.exponents.iter().enumerate().map(|(j, x)| (x.re, j)).collect();
        re.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let margin = re[0].0 - re[1].0;
        if margin < 1e-6 * ndiff::flat_length(w, seg) {
            return Err(Error::DominanceTie { segment: si, margin });
        }
        predicted += re[0].0;
        sheets.push(re[0].1);
        cur = continue_roots(w, seg, &cur)?.at_end();
    }
    let opts = TransferOptions::default();
    let log_norms: Vec<f64> = ladder
        .par_iter()
        .map(|&t| normalized_transfer(w, path, t, &start, &opts).map(|r| r.log_norm()))
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = ladder.iter().map(|&t| kappa(n, t)).collect();
    let (_, measured) = linear_intercept(&xs, &log_norms);
    Ok(GrowthReport { measured, predicted, ladder: ladder.to_vec(), log_norms, sheets })
}

fn binom(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Values and derivatives up to order `order` of the model asymptotic basis of y⁽ⁿ⁾ = ζᵏy,
/// y_i ≈ ζ^{k(1−n)/(2n)}·exp(λⁱ n ζ^{(n+k)/n}/(n+k)), with arg ζ taken inside the sector.
fn model_jets(zeta: C64, n: usize, k: usize, sector: (f64, f64), order: usize) -> Result<Vec<Vec<C64>>> {
    let (th0, th1) = sector;
    let (nf, kf) = (n as f64, k as f64);
    let width = th1 - th0;
    if width >= nf * PI / (nf + kf) {
        return Err(Error::SectorTooWide(width));
    }
    if zeta.norm() < 1e-8 {
        return Err(Error::Precondition("ζ too close to the zero".into()));
    }
    let centre = 0.5 * (th0 + th1);
    let arg = zeta.arg() + 2.0 * PI * ((centre - zeta.arg()) / (2.0 * PI)).round();
    let lz = C64::new(zeta.norm().ln(), arg);
    let pw = |p: f64| (lz * p).exp();
    let amp = kf * (1.0 - nf) / (2.0 * nf);
    let b = (nf + kf) / nf;
    let out = (0..n)
        .map(|i| {
            let c = unit_root(n, i) * nf / (nf + kf);
            // g = (log y)′ and its derivatives
            let g: Vec<C64> = (0..order)
                .map(|j| {
                    let fall = (0..=j).fold(1.0, |acc, q| acc * (b - q as f64));
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    let fact = (1..=j).fold(1.0, |acc, q| acc * q as f64);
                    pw(-(j as f64 + 1.0)) * (amp * sign * fact) + c * fall * pw(b - 1.0 - j as f64)
                })
                .collect();
            let mut y = vec![(lz * amp + c * pw(b)).exp()];
            for m in 0..order {
                let next = (0..=m).map(|j| g[j] * y[m - j] * binom(m, j)).sum();
                y.push(next);
            }
            y
        })
        .collect();
    Ok(out)
}

/// The n model basis values at ζ with derivatives 0..n−1.
pub fn model_zero_basis(zeta: C64, n: usize, k: usize, sector: (f64, f64)) -> Result<Vec<Vec<C64>>> {
    let mut v = model_jets(zeta, n, k, sector, n - 1)?;
    v.iter_mut().for_each(|y| y.truncate(n));
    Ok(v)
}

/// Scaling taking a model solution Y*(ζ) of y⁽ⁿ⁾ = −ζy to a solution of the ε-scaled system
/// near a zero: Z(ζ, t) = prefactor·diag·Y*(argscale·ζ).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroRescaling {
    pub prefactor: f64,
    pub diag: Vec<f64>,
    pub argscale: f64,
}

pub fn zero_rescaling(n: usize, t: f64) -> ZeroRescaling {
    let nf = n as f64;
    ZeroRescaling {
        prefactor: t.powf((nf - 1.0) / (2.0 * nf * (nf + 1.0))),
        diag: (0..n).map(|m| t.powf(-(m as f64) / (nf * (nf + 1.0)))).collect(),
        argscale: t.powf(1.0 / (nf + 1.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stokesgeo::build_graph;

    const LAD: [f64; 4] = DEFAULT_LADDER;

    fn airy() -> NDifferential {
        NDifferential::plane(2, vec![ZERO, ONE]).unwrap()
    }

    #[test]
    fn report_extrapolates_linear_in_eps() {
        let lad = vec![1e2, 1e3, 1e4, 1e5];
        let vals: Vec<f64> = lad.iter().map(|t: &f64| 0.25 + 3.0 * t.powf(-0.5)).collect();
        let r = AsymptoticReport::new(2, lad, vals);
        assert!((r.extrapolated - 0.25).abs() < 1e-12);
        assert!(r.decreasing() && r.monotone_tail);
        assert!(r.to_csv().starts_with("t,value\n"));
    }

    #[test]
    fn e_factor_is_additive() {
        let w = NDifferential::plane(3, vec![-ONE, ZERO, ZERO, ONE]).unwrap();
        let a = PlanePath::segment(C64::new(2.0, 0.3), C64::new(1.5, 1.4), 1e-3).unwrap();
        let b = PlanePath::segment(C64::new(1.5, 1.4), C64::new(0.2, 1.9), 1e-3).unwrap();
        let s0 = SheetAssignment::principal(&w, a.start()).unwrap();
        let s1 = continue_roots(&w, &a, &s0).unwrap().at_end();
        let whole = e_factor(&w, &a.concat(&b).unwrap(), 10.0, &s0).unwrap();
        let parts = e_factor(&w, &a, 10.0, &s0).unwrap().then(&e_factor(&w, &b, 10.0, &s1).unwrap());
        for (x, y) in whole.exponents.iter().zip(&parts.exponents) {
            assert!((x - y).norm() < 1e-9 * (1.0 + x.norm()));
        }
    }

    #[test]
    fn airy_relations_are_unipotent() {
        let w = airy();
        let loc = ZeroLocal::new(&w, 0, 5).unwrap();
        let r = zero_relations(&w, &loc, 1e3, &TransferOptions::default()).unwrap();
        for (a, c) in r.alphas.iter().zip(&r.coeffs) {
            assert!((a - ONE).norm() < 1e-9);
            assert!((c[0] + C64::i()).norm() < 1e-9);
        }
    }

    #[test]
    fn airy_constants_share_the_symmetric_value() {
        let w = airy();
        let g = build_graph(&w, 4.0, 0).unwrap();
        let f = fit_stokes_factors(&w, &g, 0, &LAD).unwrap();
        assert_eq!(f.len(), 3);
        for x in &f {
            assert!((x.a() - C64::i()).norm() < 1e-8, "{x:?}");
            assert!(x.residual < TOL_FIT);
        }
    }

    #[test]
    fn cubic_model_constants_have_unit_modulus() {
        let w = NDifferential::plane(3, vec![ZERO, ONE]).unwrap();
        let g = build_graph(&w, 4.0, 0).unwrap();
        let f = fit_stokes_factors(&w, &g, 0, &LAD).unwrap();
        assert_eq!(f.len(), 8);
        for x in &f {
            let a = x.a();
            assert!((a.norm() - 1.0).abs() < 1e-8);
            assert!((a.powi(6) - ONE).norm() < 1e-7);
        }
    }

    #[test]
    fn short_ladder_is_rejected() {
        let w = airy();
        let g = build_graph(&w, 4.0, 0).unwrap();
        let p = PlanePath::segment(C64::new(1.0, 0.5), C64::new(2.0, 1.0), 1e-3).unwrap();
        assert!(matches!(theorem1_residual(&w, &p, &g, &[1e2, 1e3, 1e4]), Err(Error::LadderTooShort(3))));
    }

    #[test]
    fn small_loop_closes_and_hook_converges() {
        let w = airy();
        let g = build_graph(&w, 4.0, 0).unwrap();
        let lp = PlanePath::arc(ZERO, 0.05, 0.3, 0.3 + 2.0 * PI, 64, 1e-3).unwrap();
        let r = theorem1_residual(&w, &lp, &g, &LAD).unwrap();
        assert!(r.values.iter().all(|v| *v < 1e-8), "{r:?}");
        let hook = ray_hook(&g, 0, 0.05, 0.5, 1.5e-3).unwrap();
        let r = theorem1_residual(&w, &hook, &g, &LAD).unwrap();
        assert!(r.decreasing() && *r.values.last().unwrap() < 1e-2, "{r:?}");
    }

    #[test]
    fn no_events_gives_single_e_factor() {
        let w = airy();
        let g = build_graph(&w, 4.0, 0).unwrap();
        let p = PlanePath::segment(C64::new(1.0, 0.5), C64::new(2.0, 1.0), 1e-3).unwrap();
        let d = crate::stokesgeo::decompose_path(&p, &g).unwrap();
        assert!(d.events.is_empty());
        let s0 = SheetAssignment::principal(&w, p.start()).unwrap();
        let m = predicted_transfer(&w, &g, &d, &[], 50.0, &s0).unwrap();
        let e = e_factor(&w, &p, 50.0, &s0).unwrap().scaled();
        assert!(relative_distance(&m, &e) < 1e-14);
    }

    #[test]
    fn growth_on_constant_differential() {
        let w = NDifferential::plane(2, vec![ONE]).unwrap();
        let g = build_graph(&w, 4.0, 0).unwrap();
        let up = PlanePath::segment(ZERO, C64::new(0.0, 0.5), 1e-3).unwrap();
        let r = growth_exponent(&w, &up, &g, &LAD).unwrap();
        assert!((r.predicted - 0.5).abs() < 1e-12);
        assert!((r.measured - 0.5).abs() < 1e-6);
        let flat = PlanePath::segment(ZERO, C64::new(0.5, 0.0), 1e-3).unwrap();
        assert!(matches!(growth_exponent(&w, &flat, &g, &LAD), Err(Error::DominanceTie { .. })));
    }

    #[test]
    fn model_basis_airy_exponent_and_sector_contract() {
        let z = C64::new(3.0, 0.4);
        let v = model_zero_basis(z, 2, 1, (-0.5, 0.5)).unwrap();
        let want = z.powf(-0.25) * (z.powf(1.5) * (2.0 / 3.0)).exp();
        assert!((v[0][0] - want).norm() < 1e-12 * want.norm());
        assert!(matches!(model_zero_basis(z, 2, 1, (0.0, 2.0 * PI / 3.0)), Err(Error::SectorTooWide(_))));
    }

    #[test]
    fn model_basis_nearly_solves_model_equation() {
        for (n, k) in [(2usize, 1usize), (3, 1), (3, 2)] {
            let mut prev = f64::INFINITY;
            for r in [4.0, 8.0, 16.0] {
                let z = C64::from_polar(r, 0.1);
                let j = model_jets(z, n, k, (-0.2, 0.3), n).unwrap();
                let worst = j.iter().map(|y| ((y[n] - z.powi(k as i32) * y[0]) / (z.powi(k as i32) * y[0])).norm()).fold(0.0, f64::max);
                assert!(worst < prev);
                prev = worst;
            }
            assert!(prev < 1e-2);
        }
    }

    #[test]
    fn zero_rescaling_exponents_and_system() {
        let z = zero_rescaling(2, 2.0);
        assert!((z.prefactor - 2f64.powf(1.0 / 12.0)).abs() < 1e-15);
        assert!((z.diag[1] - 2f64.powf(-1.0 / 6.0)).abs() < 1e-15);
        assert!((z.argscale - 2f64.powf(1.0 / 3.0)).abs() < 1e-15);
        let one = zero_rescaling(3, 1.0);
        assert!(one.prefactor == 1.0 && one.argscale == 1.0 && one.diag.iter().all(|d| *d == 1.0));
        for n in [2usize, 3] {
            let t = 300.0;
            let sc = zero_rescaling(n, t);
            let model = NDifferential::plane(n, vec![ZERO, ONE]).unwrap();
            let zeta = C64::new(0.4, 0.25);
            let p = PlanePath::segment(ZERO, zeta * sc.argscale, 1e-12).unwrap();
            let y = odeint::integrate_state_unchecked(&model, 1.0, &p, &CMat::identity(n, n), &TransferOptions::default()).unwrap().matrix();
            let d = CMat::from_diagonal(&nalgebra::DVector::from_iterator(n, sc.diag.iter().map(|x| C64::new(*x * sc.prefactor, 0.0))));
            let zmat = &d * &y;
            let dz = &d * odeint::companion_matrix(&model, zeta * sc.argscale) * &y * C64::new(sc.argscale, 0.0);
            let eps = t.powf(-1.0 / n as f64);
            let res = dz * C64::new(eps, 0.0) - odeint::companion_matrix(&model, zeta) * &zmat;
            assert!(res.norm() < 1e-8 * zmat.norm());
        }
    }
}
