//! The n-differential ω, its zeros, branch-tracked n-th roots μⁿ = −ω along paths,
//! natural coordinates and the flat |ω|^{1/n} metric.

use crate::error::{Error, Result};
use crate::quad;
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const TOL_SEP: f64 = 1e-6;
pub const TOL_QUAD: f64 = 1e-10;
const MAX_SUBDIVISIONS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    Plane,
    Torus { p1: C64, p2: C64 },
}

/// ω(z) = Σ coeffs[k] zᵏ together with the order n of the differential.
#[derive(Debug, Clone, PartialEq)]
pub struct NDifferential {
    n: usize,
    coeffs: Vec<C64>,
    mode: Mode,
    zeros: Vec<C64>,
}

#[derive(Serialize, Deserialize)]
struct NDiffJson {
    n: usize,
    coeffs: Vec<[f64; 2]>,
    #[serde(default = "plane_mode")]
    mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    periods: Option<Vec<[f64; 2]>>,
}

fn plane_mode() -> String {
    "plane".into()
}

pub fn unit_root(n: usize, k: usize) -> C64 {
    C64::from_polar(1.0, 2.0 * PI * (k % n) as f64 / n as f64)
}

impl NDifferential {
    /// Polynomial differential on the plane; zeros are computed and certified simple.
    pub fn plane(n: usize, coeffs: Vec<C64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidDifferential(format!("order n = {n} < 2")));
        }
        let mut coeffs = coeffs;
        while coeffs.len() > 1 && coeffs.last().map_or(false, |c| c.norm() == 0.0) {
            coeffs.pop();
        }
        if coeffs.is_empty() || coeffs.iter().all(|c| c.norm() == 0.0) {
            return Err(Error::InvalidDifferential("ω is identically zero".into()));
        }
        let mut w = NDifferential { n, coeffs, mode: Mode::Plane, zeros: vec![] };
        w.zeros = w.find_zeros()?;
        Ok(w)
    }

    /// Constant differential on a torus with translation periods p₁, p₂.
    pub fn torus(n: usize, c: C64, p1: C64, p2: C64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidDifferential(format!("order n = {n} < 2")));
        }
        if c.norm() == 0.0 {
            return Err(Error::InvalidDifferential("torus mode needs a nonzero constant".into()));
        }
        if (p1.conj() * p2).im.abs() < 1e-12 {
            return Err(Error::InvalidDifferential("periods are not independent".into()));
        }
        Ok(NDifferential { n, coeffs: vec![c], mode: Mode::Torus { p1, p2 }, zeros: vec![] })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }
    pub fn mode(&self) -> Mode {
        self.mode
    }
    pub fn zeros(&self) -> &[C64] {
        &self.zeros
    }
    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }
    pub fn is_constant(&self) -> bool {
        self.coeffs.len() == 1
    }
    pub fn coeff_scale(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn eval(&self, z: C64) -> C64 {
        self.coeffs.iter().rev().fold(C64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }

    /// Taylor coefficients c_k of ω about z for k = 0..=order (ω(z+h) = Σ c_k hᵏ).
    pub fn taylor(&self, z: C64, order: usize) -> Vec<C64> {
        let mut t = self.coeffs.clone();
        let d = t.len();
        let mut out = Vec::with_capacity(order + 1);
        for k in 0..=order {
            if k >= d {
                out.push(C64::new(0.0, 0.0));
                continue;
            }
            // synthetic division by (x - z) repeatedly
            let mut acc = C64::new(0.0, 0.0);
            for j in (k..d).rev() {
                acc = acc * z + t[j];
                t[j] = acc;
            }
            out.push(t[k]);
        }
        out
    }

    /// ω and its first `order` derivatives at z.
    pub fn derivs(&self, z: C64, order: usize) -> Vec<C64> {
        let mut f = 1.0;
        self.taylor(z, order)
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                if k > 0 {
                    f *= k as f64;
                }
                c * f
            })
            .collect()
    }

    /// Coefficients of ω(z)/(z − z0), assuming z0 is a zero.
    pub fn deflate(&self, z0: C64) -> Vec<C64> {
        let d = self.coeffs.len();
        let mut q = vec![C64::new(0.0, 0.0); d.saturating_sub(1)];
        let mut acc = C64::new(0.0, 0.0);
        for j in (1..d).rev() {
            acc = acc * z0 + self.coeffs[j];
            q[j - 1] = acc;
        }
        q
    }

    /// All roots of the polynomial, polished and certified simple.
    pub fn find_zeros(&self) -> Result<Vec<C64>> {
        if let Mode::Torus { .. } = self.mode {
            return Err(Error::Precondition("find_zeros needs plane mode".into()));
        }
        let d = self.degree();
        if d == 0 {
            return Ok(vec![]);
        }
        let lead = self.coeffs[d];
        let mut comp = DMatrix::<C64>::zeros(d, d);
        for i in 1..d {
            comp[(i, i - 1)] = C64::new(1.0, 0.0);
        }
        for i in 0..d {
            comp[(i, d - 1)] = -self.coeffs[i] / lead;
        }
        let eig = nalgebra::linalg::Schur::new(comp)
            .eigenvalues()
            .ok_or_else(|| Error::InvalidDifferential("companion eigenvalues failed".into()))?;
        let mut roots: Vec<C64> = eig.iter().copied().collect();
        for r in roots.iter_mut() {
            for _ in 0..100 {
                let dv = self.derivs(*r, 1);
                if dv[1].norm() == 0.0 {
                    break;
                }
                let step = dv[0] / dv[1];
                *r -= step;
                if step.norm() <= 1e-16 * (1.0 + r.norm()) {
                    break;
                }
            }
        }
        let tol_simple = 1e-8 * self.coeff_scale();
        for r in &roots {
            if self.derivs(*r, 1)[1].norm() <= tol_simple {
                return Err(Error::NonSimpleZero { re: r.re, im: r.im });
            }
        }
        for i in 0..roots.len() {
            for j in 0..i {
                if (roots[i] - roots[j]).norm() <= TOL_SEP {
                    return Err(Error::NonSimpleZero { re: roots[i].re, im: roots[i].im });
                }
            }
        }
        roots.sort_by(|a, b| {
            let ka = (a.arg(), a.norm());
            let kb = (b.arg(), b.norm());
            ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
        });
        for r in roots.iter_mut() {
            // clean signed zeros for deterministic output
            if r.re.abs() < 1e-15 {
                r.re = 0.0;
            }
            if r.im.abs() < 1e-15 {
                r.im = 0.0;
            }
        }
        Ok(roots)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let (mode, periods) = match self.mode {
            Mode::Plane => ("plane".to_string(), None),
            Mode::Torus { p1, p2 } => ("torus".to_string(), Some(vec![[p1.re, p1.im], [p2.re, p2.im]])),
        };
        serde_json::to_value(NDiffJson {
            n: self.n,
            coeffs: self.coeffs.iter().map(|c| [c.re, c.im]).collect(),
            mode,
            periods,
        })
        .expect("serializable")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let j: NDiffJson =
            serde_json::from_str(s).map_err(|e| Error::InvalidDifferential(e.to_string()))?;
        Self::from_json(j)
    }

    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        let j: NDiffJson = serde_json::from_value(v.clone())
            .map_err(|e| Error::InvalidDifferential(e.to_string()))?;
        Self::from_json(j)
    }

    fn from_json(j: NDiffJson) -> Result<Self> {
        let coeffs: Vec<C64> = j.coeffs.iter().map(|c| C64::new(c[0], c[1])).collect();
        match j.mode.as_str() {
            "plane" => Self::plane(j.n, coeffs),
            "torus" => {
                let p = j
                    .periods
                    .filter(|p| p.len() == 2)
                    .ok_or_else(|| Error::InvalidDifferential("torus mode needs two periods".into()))?;
                if coeffs.len() != 1 {
                    return Err(Error::InvalidDifferential("torus mode requires constant ω".into()));
                }
                Self::torus(j.n, coeffs[0], C64::new(p[0][0], p[0][1]), C64::new(p[1][0], p[1][1]))
            }
            m => Err(Error::InvalidDifferential(format!("unknown mode {m:?}"))),
        }
    }
}

/// Polyline in the plane with a required clearance from the zeros of ω.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanePath {
    vertices: Vec<C64>,
    r_min: f64,
}

impl PlanePath {
    pub fn new(vertices: Vec<C64>, r_min: f64) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::InvalidPath("no vertices".into()));
        }
        if !(r_min > 0.0) {
            return Err(Error::InvalidPath(format!("r_min = {r_min} must be positive")));
        }
        for w in vertices.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidPath("repeated vertex".into()));
            }
        }
        if vertices.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::InvalidPath("non-finite vertex".into()));
        }
        Ok(PlanePath { vertices, r_min })
    }

    pub fn segment(a: C64, b: C64, r_min: f64) -> Result<Self> {
        Self::new(vec![a, b], r_min)
    }

    /// Counter-clockwise circular arc from angle th0 to th1 (radians), polygonised.
    pub fn arc(center: C64, radius: f64, th0: f64, th1: f64, pieces: usize, r_min: f64) -> Result<Self> {
        let m = pieces.max(1);
        let v = (0..=m)
            .map(|k| center + C64::from_polar(radius, th0 + (th1 - th0) * k as f64 / m as f64))
            .collect();
        Self::new(v, r_min)
    }

    pub fn vertices(&self) -> &[C64] {
        &self.vertices
    }
    pub fn r_min(&self) -> f64 {
        self.r_min
    }
    pub fn start(&self) -> C64 {
        self.vertices[0]
    }
    pub fn end(&self) -> C64 {
        *self.vertices.last().unwrap()
    }
    pub fn is_point(&self) -> bool {
        self.vertices.len() == 1
    }
    pub fn length(&self) -> f64 {
        self.vertices.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    pub fn reversed(&self) -> Self {
        let mut v = self.vertices.clone();
        v.reverse();
        PlanePath { vertices: v, r_min: self.r_min }
    }

    /// Concatenation; the end of self must coincide with the start of other.
    pub fn concat(&self, other: &PlanePath) -> Result<Self> {
        if (self.end() - other.start()).norm() > 1e-12 * (1.0 + self.end().norm()) {
            return Err(Error::InvalidPath("concatenated paths do not meet".into()));
        }
        let mut v = self.vertices.clone();
        v.extend_from_slice(&other.vertices[1..]);
        Ok(PlanePath { vertices: v, r_min: self.r_min.min(other.r_min) })
    }

    /// Inserts `k` extra points evenly on each segment.
    pub fn refined(&self, k: usize) -> Self {
        let mut v = vec![self.start()];
        for w in self.vertices.windows(2) {
            for j in 1..=k + 1 {
                v.push(w[0] + (w[1] - w[0]) * (j as f64 / (k + 1) as f64));
            }
        }
        PlanePath { vertices: v, r_min: self.r_min }
    }

    /// Smallest distance from the polyline to any zero of ω.
    pub fn clearance(&self, w: &NDifferential) -> f64 {
        let mut d = f64::INFINITY;
        for &z0 in w.zeros() {
            if self.is_point() {
                d = d.min((self.start() - z0).norm());
            }
            for s in self.vertices.windows(2) {
                d = d.min(point_segment_distance(z0, s[0], s[1]));
            }
        }
        d
    }

    pub fn check_clearance(&self, w: &NDifferential) -> Result<()> {
        let c = self.clearance(w);
        if c < self.r_min {
            return Err(Error::InvalidPath(format!(
                "path comes within {c:.3e} of a zero (r_min = {:.3e})",
                self.r_min
            )));
        }
        Ok(())
    }
}

pub fn point_segment_distance(p: C64, a: C64, b: C64) -> f64 {
    let d = b - a;
    let l2 = d.norm_sqr();
    if l2 == 0.0 {
        return (p - a).norm();
    }
    let s = (((p - a) * d.conj()).re / l2).clamp(0.0, 1.0);
    (p - (a + d * s)).norm()
}

/// n-th roots of −ω tracked along a path. Only μ₀ is stored, as the continued
/// logarithm L of ω with μ₀ = exp((L − iπ)/n); the other sheets are μᵢ = λⁱμ₀.
#[derive(Debug, Clone, PartialEq)]
pub struct SheetAssignment {
    n: usize,
    points: Vec<C64>,
    logs: Vec<C64>,
}

impl SheetAssignment {
    /// Base root from the principal logarithm of ω(z).
    pub fn principal(w: &NDifferential, z: C64) -> Result<Self> {
        let v = w.eval(z);
        if v.norm() == 0.0 {
            return Err(Error::ZeroOfDifferential);
        }
        Ok(SheetAssignment { n: w.n(), points: vec![z], logs: vec![v.ln()] })
    }

    /// Base root chosen by the caller; must satisfy μ₀ⁿ = −ω(z).
    pub fn with_root(w: &NDifferential, z: C64, mu0: C64) -> Result<Self> {
        let v = w.eval(z);
        if v.norm() == 0.0 {
            return Err(Error::ZeroOfDifferential);
        }
        if (mu0.powu(w.n() as u32) + v).norm() > 1e-8 * v.norm() {
            return Err(Error::Precondition("μ₀ is not an n-th root of −ω".into()));
        }
        let n = w.n() as f64;
        let mut l = mu0.ln() * n + C64::new(0.0, PI);
        // keep Im L near arg ω for readability; any 2πn shift is the same branch
        let k = ((l.im - v.arg()) / (2.0 * PI * n)).round();
        l.im -= 2.0 * PI * n * k;
        Ok(SheetAssignment { n: w.n(), points: vec![z], logs: vec![l] })
    }

    pub(crate) fn from_log(n: usize, z: C64, log: C64) -> Self {
        SheetAssignment { n, points: vec![z], logs: vec![log] }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn base(&self) -> C64 {
        self.points[0]
    }
    pub fn points(&self) -> &[C64] {
        &self.points
    }
    pub fn logs(&self) -> &[C64] {
        &self.logs
    }
    pub fn base_log(&self) -> C64 {
        self.logs[0]
    }
    pub fn end(&self) -> C64 {
        *self.points.last().unwrap()
    }
    pub fn end_log(&self) -> C64 {
        *self.logs.last().unwrap()
    }

    /// Sheet values μᵢ at recorded point k.
    pub fn mus_at(&self, k: usize) -> Vec<C64> {
        roots_from_log(self.n, self.logs[k])
    }
    pub fn base_roots(&self) -> Vec<C64> {
        self.mus_at(0)
    }
    pub fn end_roots(&self) -> Vec<C64> {
        self.mus_at(self.points.len() - 1)
    }

    /// Single-point assignment at the end of the record.
    pub fn at_end(&self) -> Self {
        SheetAssignment::from_log(self.n, self.end(), self.end_log())
    }

    pub fn log_near(&self, z: C64) -> Option<C64> {
        let tol = 1e-12 * (1.0 + z.norm());
        if (self.end() - z).norm() <= tol {
            Some(self.end_log())
        } else if (self.base() - z).norm() <= tol {
            Some(self.base_log())
        } else {
            None
        }
    }
}

pub fn roots_from_log(n: usize, l: C64) -> Vec<C64> {
    let mu0 = ((l - C64::new(0.0, PI)) / n as f64).exp();
    (0..n).map(|i| unit_root(n, i) * mu0).collect()
}

pub fn mu0_from_log(n: usize, l: C64) -> C64 {
    ((l - C64::new(0.0, PI)) / n as f64).exp()
}

/// Piece of a path on which ω(z)/ω(a) stays away from the negative axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Piece {
    pub a: C64,
    pub b: C64,
    pub la: C64,
}

impl Piece {
    pub fn log_at(&self, w: &NDifferential, z: C64) -> C64 {
        let r = w.eval(z) / w.eval(self.a);
        self.la + r.ln()
    }
}

fn step_ok(w: &NDifferential, n: usize, a: C64, b: C64, la: C64) -> Option<C64> {
    let wa = w.eval(a);
    let wb = w.eval(b);
    if wb.norm() == 0.0 {
        return None;
    }
    let dl = (wb / wa).ln();
    if dl.norm() > 0.5 {
        return None;
    }
    // root continuity against the local gap
    let gap = 2.0 * (PI / n as f64).sin();
    let m0 = mu0_from_log(n, la);
    let m1 = mu0_from_log(n, la + dl);
    if (m1 - m0).norm() >= 0.5 * gap * m0.norm().min(m1.norm()) {
        return None;
    }
    let mut acc = C64::new(0.0, 0.0);
    let mut prev = wa;
    for k in 1..=8 {
        let z = a + (b - a) * (k as f64 / 8.0);
        let v = w.eval(z);
        if v.norm() == 0.0 {
            return None;
        }
        let r = v / wa;
        if r.arg().abs() > 0.5 * PI {
            return None;
        }
        acc += (v / prev).ln();
        prev = v;
    }
    if (acc - dl).norm() > 1e-9 {
        return None;
    }
    Some(la + dl)
}

pub(crate) fn pieces_from(w: &NDifferential, path: &PlanePath, l0: C64) -> Result<Vec<Piece>> {
    if w.is_constant() {
        return Ok(path
            .vertices()
            .windows(2)
            .map(|s| Piece { a: s[0], b: s[1], la: l0 })
            .collect());
    }
    let n = w.n();
    let mut out = Vec::new();
    let mut l = l0;
    let mut count = 0usize;
    for s in path.vertices().windows(2) {
        let (mut a, end) = (s[0], s[1]);
        let mut b = end;
        while a != end {
            match step_ok(w, n, a, b, l) {
                Some(lb) => {
                    out.push(Piece { a, b, la: l });
                    a = b;
                    l = lb;
                    b = end;
                }
                None => {
                    b = a + (b - a) * 0.5;
                    count += 1;
                    if count > MAX_SUBDIVISIONS || (b - a).norm() < 1e-14 * (1.0 + a.norm()) {
                        return Err(Error::BranchTrackingFailure(count));
                    }
                }
            }
        }
    }
    Ok(out)
}

fn start_log(w: &NDifferential, path: &PlanePath, sheets: &SheetAssignment) -> Result<C64> {
    if sheets.n() != w.n() {
        return Err(Error::Precondition("sheet assignment has the wrong order".into()));
    }
    sheets
        .log_near(path.start())
        .ok_or_else(|| Error::Precondition("sheet assignment is not based at the path start".into()))
}

/// Continues the branch held in `sheets` (at its base or end point) along `path`.
pub fn continue_roots(w: &NDifferential, path: &PlanePath, sheets: &SheetAssignment) -> Result<SheetAssignment> {
    path.check_clearance(w)?;
    let l0 = start_log(w, path, sheets)?;
    let pieces = pieces_from(w, path, l0)?;
    let mut out = SheetAssignment::from_log(w.n(), path.start(), l0);
    for p in &pieces {
        let lb = if w.is_constant() { p.la } else { p.log_at(w, p.b) };
        out.points.push(p.b);
        out.logs.push(lb);
    }
    Ok(out)
}

/// ∫ μ₀ dz along pieces; other sheets are λⁱ times this.
pub(crate) fn mu0_integral(w: &NDifferential, pieces: &[Piece]) -> C64 {
    let n = w.n();
    let mut total = C64::new(0.0, 0.0);
    for p in pieces {
        let d = p.b - p.a;
        if w.is_constant() {
            total += mu0_from_log(n, p.la) * d;
            continue;
        }
        let wa = w.eval(p.a);
        let m0 = mu0_from_log(n, p.la);
        let (v, _) = quad::integrate(
            |s| {
                let r = w.eval(p.a + d * s) / wa;
                m0 * (r.ln() / n as f64).exp()
            },
            0.0,
            1.0,
            1e-13,
            1e-15,
        );
        total += v * d;
    }
    total
}

/// ζ = ∫_path μ_sheet dz with the branch continued from `sheets`.
pub fn natural_coord(w: &NDifferential, path: &PlanePath, sheets: &SheetAssignment, sheet: usize) -> Result<C64> {
    if sheet >= w.n() {
        return Err(Error::Precondition(format!("sheet {sheet} out of range")));
    }
    path.check_clearance(w)?;
    let l0 = start_log(w, path, sheets)?;
    let pieces = pieces_from(w, path, l0)?;
    Ok(unit_root(w.n(), sheet) * mu0_integral(w, &pieces))
}

/// ∫_{z0}^{z} μ₀ along the straight segment from a simple zero z0, where μ₀ at z is
/// given by the log L_z. Uses s = uⁿ to remove the endpoint singularity.
pub fn zero_integral(w: &NDifferential, z0: C64, z: C64, l_z: C64) -> C64 {
    let n = w.n();
    let d = z - z0;
    if d.norm() == 0.0 {
        return C64::new(0.0, 0.0);
    }
    let g = w.deflate(z0);
    let geval = |x: C64| g.iter().rev().fold(C64::new(0.0, 0.0), |acc, &c| acc * x + c);
    let gz = geval(z);
    let m0z = mu0_from_log(n, l_z);
    // continuous log of g(z(s))/g(z) on nodes s_j = j/16
    const M: usize = 16;
    let mut node_logs = [C64::new(0.0, 0.0); M + 1];
    let mut prev = gz;
    for j in (0..M).rev() {
        let v = geval(z0 + d * (j as f64 / M as f64));
        node_logs[j] = node_logs[j + 1] + (v / prev).ln();
        prev = v;
    }
    let log_g = |s: f64| -> C64 {
        let j = ((s * M as f64).round() as usize).min(M);
        let v = geval(z0 + d * s);
        let gj = geval(z0 + d * (j as f64 / M as f64));
        node_logs[j] + (v / gj).ln()
    };
    let nf = n as f64;
    let (v, _) = quad::integrate(
        |u| {
            if u == 0.0 {
                return C64::new(0.0, 0.0);
            }
            let s = u.powi(n as i32);
            // μ₀(z(s)) = μ₀(z)·(s·g(z(s))/g(z))^{1/n}
            let m = m0z * u * (log_g(s) / nf).exp();
            m * nf * u.powi(n as i32 - 1)
        },
        0.0,
        1.0,
        1e-13,
        1e-15,
    );
    v * d
}

/// ∫ |ω|^{1/n} |dz|.
pub fn flat_length(w: &NDifferential, path: &PlanePath) -> f64 {
    let n = w.n() as f64;
    let mut total = 0.0;
    for s in path.vertices().windows(2) {
        let (a, d) = (s[0], s[1] - s[0]);
        let (v, _) = quad::integrate(
            |x| C64::new(w.eval(a + d * x).norm().powf(1.0 / n), 0.0),
            0.0,
            1.0,
            1e-13,
            1e-15,
        );
        total += v.re * d.norm();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn zeros_of_cubic() {
        let w = NDifferential::plane(3, vec![c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let z = w.zeros();
        assert_eq!(z.len(), 3);
        for k in 0..3 {
            let r = unit_root(3, k);
            assert!(z.iter().any(|x| (x - r).norm() < 1e-12));
        }
    }

    #[test]
    fn linear_and_double() {
        let w = NDifferential::plane(2, vec![c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        assert_eq!(w.zeros(), &[c(0.0, 0.0)]);
        let e = NDifferential::plane(2, vec![c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]);
        assert!(matches!(e, Err(Error::NonSimpleZero { .. })));
        let k = NDifferential::plane(2, vec![c(-1.0, 0.0)]).unwrap();
        assert!(k.zeros().is_empty());
    }

    #[test]
    fn json_roundtrip() {
        let w = NDifferential::plane(3, vec![c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let s = w.to_json_value().to_string();
        assert_eq!(NDifferential::from_json_str(&s).unwrap(), w);
        let t = NDifferential::torus(2, c(1.0, 0.0), c(1.0, 0.0), c(0.0, 1.0)).unwrap();
        let s = t.to_json_value().to_string();
        assert!(s.contains("\"torus\""));
        assert_eq!(NDifferential::from_json_str(&s).unwrap(), t);
        assert!(NDifferential::from_json_str(r#"{"n":2,"coeffs":[[0,0],[1,0]],"mode":"torus"}"#).is_err());
    }

    #[test]
    fn constant_sheets() {
        let w = NDifferential::plane(2, vec![c(-1.0, 0.0)]).unwrap();
        let s = SheetAssignment::principal(&w, c(0.0, 0.0)).unwrap();
        let p = PlanePath::new(vec![c(0.0, 0.0), c(1.0, 2.0), c(-3.0, 0.5)], 0.1).unwrap();
        let s = continue_roots(&w, &p, &s).unwrap();
        for k in 0..s.points().len() {
            let m = s.mus_at(k);
            assert!((m[0] - 1.0).norm() < 1e-14 && (m[1] + 1.0).norm() < 1e-14);
        }
        assert!((natural_coord(&w, &PlanePath::segment(c(0.0, 0.0), c(1.0, 0.0), 0.1).unwrap(), &s, 0).unwrap() - 1.0).norm() < 1e-14);
    }

    #[test]
    fn loop_swaps_sheets() {
        let w = NDifferential::plane(2, vec![c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let p = PlanePath::arc(c(0.0, 0.0), 1.0, 0.0, 2.0 * PI, 64, 0.5).unwrap();
        let s = SheetAssignment::principal(&w, c(1.0, 0.0)).unwrap();
        let s = continue_roots(&w, &p, &s).unwrap();
        let (a, b) = (s.base_roots(), s.end_roots());
        assert!((a[0] - b[1]).norm() < 1e-12 && (a[1] - b[0]).norm() < 1e-12);
    }

    #[test]
    fn semicircle_n3() {
        let w = NDifferential::plane(3, vec![c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let p = PlanePath::arc(c(0.0, 0.0), 1.0, 0.0, PI, 40, 0.5).unwrap();
        let s = SheetAssignment::principal(&w, c(1.0, 0.0)).unwrap();
        let s = continue_roots(&w, &p, &s).unwrap();
        let r = s.end_roots()[0] / s.base_roots()[0];
        assert!((r - C64::from_polar(1.0, PI / 3.0)).norm() < 1e-12);
    }

    #[test]
    fn natural_coord_sqrt() {
        let w = NDifferential::plane(2, vec![c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let p = PlanePath::segment(c(1.0, 0.0), c(4.0, 0.0), 0.5).unwrap();
        let s = SheetAssignment::principal(&w, c(1.0, 0.0)).unwrap();
        let z = natural_coord(&w, &p, &s, 0).unwrap();
        assert!((z.norm() - 14.0 / 3.0).abs() < 1e-10);
        assert!((flat_length(&w, &p) - 14.0 / 3.0).abs() < 1e-10);
        let e = PlanePath::new(vec![c(1.0, 0.0)], 0.5).unwrap();
        assert_eq!(natural_coord(&w, &e, &s, 0).unwrap(), c(0.0, 0.0));
    }

    #[test]
    fn zero_integral_matches_closed_form() {
        for n in 2..=4usize {
            let w = NDifferential::plane(n, vec![c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
            let z0 = c(1.0, 0.0);
            let z = c(1.3, 0.4);
            let s = SheetAssignment::principal(&w, z).unwrap();
            let a = zero_integral(&w, z0, z, s.base_log());
            // compare with a path integral from a point near z0 plus a small local term
            let eps = 1e-3;
            let zn = z0 + (z - z0) * eps;
            let p = PlanePath::segment(z, zn, 1e-6).unwrap();
            let back = natural_coord(&w, &p, &s, 0).unwrap();
            let sn = continue_roots(&w, &p, &s).unwrap();
            let local = zero_integral(&w, z0, zn, sn.end_log());
            assert!((a + back - local).norm() < 1e-11, "n={n}");
            assert!(local.norm() < 1e-3);
        }
    }

    #[test]
    fn flat_length_constant() {
        let w = NDifferential::plane(3, vec![c(1.0, 0.0)]).unwrap();
        let p = PlanePath::new(vec![c(0.0, 0.0), c(3.0, 4.0), c(3.0, 0.0)], 0.1).unwrap();
        assert!((flat_length(&w, &p) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn clearance_checked() {
        let w = NDifferential::plane(2, vec![c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let p = PlanePath::segment(c(-1.0, 0.05), c(1.0, 0.05), 0.1).unwrap();
        assert!(matches!(p.check_clearance(&w), Err(Error::InvalidPath(_))));
    }

    fn cubic() -> NDifferential {
        NDifferential::plane(3, vec![c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap()
    }

    prop_compose! {
        fn far_point()(r in 1.6f64..4.0, th in 0.0f64..std::f64::consts::TAU) -> C64 { C64::from_polar(r, th) }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn vieta_along_paths(a in far_point(), b in far_point(), m in far_point()) {
            let w = cubic();
            let p = PlanePath::new(vec![a, m, b], 0.05);
            prop_assume!(p.is_ok());
            let p = p.unwrap();
            prop_assume!(p.check_clearance(&w).is_ok());
            let s = continue_roots(&w, &p, &SheetAssignment::principal(&w, a).unwrap()).unwrap();
            for (k, z) in s.points().iter().enumerate() {
                let mu = s.mus_at(k);
                let om = w.eval(*z);
                let sum: C64 = mu.iter().sum();
                let prod: C64 = mu.iter().product();
                prop_assert!(sum.norm() <= 1e-10 * om.norm().powf(1.0 / 3.0) * 3.0);
                prop_assert!((prod + om).norm() <= 1e-10 * om.norm());
                for m in &mu {
                    prop_assert!((m.powu(3) + om).norm() <= 1e-10 * om.norm());
                }
            }
        }

        #[test]
        fn additivity_and_reversal(a in far_point(), b in far_point(), m in far_point()) {
            let w = cubic();
            let p1 = PlanePath::new(vec![a, m], 0.05);
            let p2 = PlanePath::new(vec![m, b], 0.05);
            prop_assume!(p1.is_ok() && p2.is_ok());
            let (p1, p2) = (p1.unwrap(), p2.unwrap());
            prop_assume!(p1.check_clearance(&w).is_ok() && p2.check_clearance(&w).is_ok());
            let s = SheetAssignment::principal(&w, a).unwrap();
            let full = natural_coord(&w, &p1.concat(&p2).unwrap(), &s, 1).unwrap();
            let z1 = natural_coord(&w, &p1, &s, 1).unwrap();
            let sm = continue_roots(&w, &p1, &s).unwrap();
            let z2 = natural_coord(&w, &p2, &sm, 1).unwrap();
            prop_assert!((full - z1 - z2).norm() < 1e-10 * (1.0 + full.norm()));
            let sb = continue_roots(&w, &p2, &sm).unwrap();
            let rev = natural_coord(&w, &p1.concat(&p2).unwrap().reversed(), &sb, 1).unwrap();
            prop_assert!((rev + full).norm() < 1e-10 * (1.0 + full.norm()));
        }

        #[test]
        fn flat_length_refinement(a in far_point(), b in far_point(), m in far_point(), k in 1usize..5) {
            let w = cubic();
            let p = PlanePath::new(vec![a, m, b], 0.05);
            prop_assume!(p.is_ok());
            let p = p.unwrap();
            let l0 = flat_length(&w, &p);
            let l1 = flat_length(&w, &p.refined(k));
            prop_assert!((l0 - l1).abs() <= 1e-8 * l0.max(1e-300));
        }
    }
}
