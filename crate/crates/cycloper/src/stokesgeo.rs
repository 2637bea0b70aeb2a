//! Stokes graph of ω: rays Re ∫(μᵢ − μⱼ) = 0 from zeros, their crossings, the
//! secondary rays born there, and decomposition of paths by ray crossings.

use crate::error::{Error, Result};
use crate::ndiff::{self, mu0_from_log, unit_root, NDifferential, PlanePath};
use crate::quad;
use num_complex::Complex64 as C64;
use serde::Serialize;
use std::collections::BTreeMap;
use std::f64::consts::PI;

pub const TOL_RAY: f64 = 1e-6;
pub const TOL_TANGENT: f64 = 1e-6;

/// Directions θ ∈ [0, 2π) in the model coordinate where Re((λⁱ − λʲ)ζ^{(n+k)/n}) = 0,
/// each with its unordered sheet pairs.
pub fn local_ray_directions(n: usize, k: usize) -> Vec<(f64, Vec<(usize, usize)>)> {
    let mut out: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    let nk = (n + k) as f64;
    // θ(n+k)/n + π(i+j)/n ≡ 0 mod π
    let count = 2 * (n + k);
    for m in 0..count as i64 * 2 {
        for i in 0..n {
            for j in i + 1..n {
                let s = (i + j) as i64;
                let num = m * n as i64 - s;
                let th = PI * num as f64 / nk;
                if th < -1e-12 || th >= 2.0 * PI - 1e-12 {
                    continue;
                }
                let th = th.max(0.0);
                match out.iter_mut().find(|(a, _)| (a - th).abs() < 1e-9) {
                    Some((_, v)) => {
                        if !v.contains(&(i, j)) {
                            v.push((i, j));
                        }
                    }
                    None => out.push((th, vec![(i, j)])),
                }
            }
        }
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (_, v) in out.iter_mut() {
        v.sort();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Escaped,
    HitCrossing,
    HitZero,
    StepLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Source {
    Zero(usize),
    Crossing(usize),
}

/// A traced ray. Sheet labels refer to the branch stored in `logs`; Re ∫(μᵢ − μⱼ)
/// increases to the left of the direction of travel.
#[derive(Debug, Clone, PartialEq)]
pub struct StokesRay {
    pub source: C64,
    pub origin: Source,
    pub pair: (usize, usize),
    pub direction: C64,
    pub vertices: Vec<C64>,
    /// continued log ω at each vertex (vertex 0 of a primary ray repeats vertex 1)
    pub logs: Vec<C64>,
    /// ∫_source (μᵢ − μⱼ) at each vertex
    pub phase: Vec<C64>,
    pub generation: usize,
    pub termination: Termination,
}

impl StokesRay {
    pub fn arclength(&self) -> f64 {
        self.vertices.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// log ω at a point q on segment `seg` (between vertices seg, seg+1).
    pub fn log_at(&self, w: &NDifferential, seg: usize, q: C64) -> C64 {
        let v = self.vertices[seg + 1];
        self.logs[seg + 1] + (w.eval(q) / w.eval(v)).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    pub tol_ray: f64,
    /// chord sag allowed per step
    pub sag: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl TraceOptions {
    pub fn for_radius(r: f64) -> Self {
        TraceOptions { tol_ray: TOL_RAY, sag: 0.5 * TOL_RAY, h_max: r / 50.0, max_steps: 200_000 }
    }
    pub fn halved(&self) -> Self {
        TraceOptions { sag: self.sag * 0.5, h_max: self.h_max * 0.5, ..*self }
    }
}

pub fn default_radius(w: &NDifferential) -> f64 {
    2.0 + 3.0 * w.zeros().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn lam_diff(n: usize, i: usize, j: usize) -> C64 {
    unit_root(n, i) - unit_root(n, j)
}

// ∫_a^b μ₀ dz on a short straight step, with log ω(a) = la
fn step_integral(w: &NDifferential, a: C64, b: C64, la: C64) -> (C64, C64) {
    let n = w.n();
    let wa = w.eval(a);
    let m0 = mu0_from_log(n, la);
    let d = b - a;
    let (v, _) = quad::integrate(|s| m0 * ((w.eval(a + d * s) / wa).ln() / n as f64).exp(), 0.0, 1.0, 1e-13, 1e-16);
    (v * d, la + (w.eval(b) / wa).ln())
}

fn nearest_zero_dist(w: &NDifferential, z: C64, skip: Option<usize>) -> (f64, Option<usize>) {
    let mut best = (f64::INFINITY, None);
    for (k, z0) in w.zeros().iter().enumerate() {
        if Some(k) == skip {
            continue;
        }
        let d = (z - z0).norm();
        if d < best.0 {
            best = (d, Some(k));
        }
    }
    best
}

struct Tracer<'a> {
    w: &'a NDifferential,
    n: usize,
    r: f64,
    opts: TraceOptions,
    dl: C64,
    zero_stop: f64,
}

impl Tracer<'_> {
    // Continues the ray from its first point(s) until a termination condition.
    fn run(&self, ray: &mut StokesRay, mut tangent: C64, source_zero: Option<usize>) -> Result<()> {
        let w = self.w;
        let mut h = (self.opts.h_max * 0.01).max(1e-6);
        let mut steps = 0usize;
        loop {
            let z = *ray.vertices.last().unwrap();
            let l = *ray.logs.last().unwrap();
            let ph = *ray.phase.last().unwrap();
            if z.norm() >= self.r {
                ray.termination = Termination::Escaped;
                return Ok(());
            }
            let (dz, kz) = nearest_zero_dist(w, z, None);
            if kz.is_some() && kz != source_zero && dz < self.zero_stop {
                ray.termination = Termination::HitZero;
                return Ok(());
            }
            if kz.is_some() && kz == source_zero && dz < self.zero_stop && ray.vertices.len() > 3 {
                ray.termination = Termination::HitZero;
                return Ok(());
            }
            steps += 1;
            if steps > self.opts.max_steps {
                ray.termination = Termination::StepLimit;
                return Ok(());
            }
            let h_cap = self.opts.h_max.min(0.1 * dz.max(1e-12));
            h = h.min(h_cap);
            let mut attempts = 0;
            loop {
                attempts += 1;
                if attempts > 60 || h < 1e-13 {
                    return Err(Error::TraceDivergence(steps));
                }
                match self.step(z, l, ph, tangent, h)? {
                    Some((zn, ln, phn, tn)) => {
                        // chord sag from turning angle
                        let turn = (tn / tangent).arg().abs();
                        let sag = h * turn / 8.0;
                        if sag > self.opts.sag && h > 1e-9 {
                            h *= 0.5;
                            continue;
                        }
                        ray.vertices.push(zn);
                        ray.logs.push(ln);
                        ray.phase.push(phn);
                        tangent = tn;
                        let grow = if sag > 0.0 { (0.9 * (self.opts.sag / sag).sqrt()).min(2.0) } else { 2.0 };
                        h = (h * grow.max(0.5)).min(h_cap.max(h));
                        break;
                    }
                    None => h *= 0.5,
                }
            }
        }
    }

    fn tangent_at(&self, l: C64, prev: C64) -> C64 {
        let g = self.dl * mu0_from_log(self.n, l);
        let t = C64::new(0.0, 1.0) * g.conj() / g.norm();
        if (t * prev.conj()).re >= 0.0 {
            t
        } else {
            -t
        }
    }

    // One predictor–corrector step; None asks for a smaller step.
    fn step(&self, z: C64, l: C64, ph: C64, tangent: C64, h: f64) -> Result<Option<(C64, C64, C64, C64)>> {
        let w = self.w;
        let t0 = self.tangent_at(l, tangent);
        // midpoint predictor
        let zm = z + t0 * (0.5 * h);
        let lm = l + (w.eval(zm) / w.eval(z)).ln();
        let tm = self.tangent_at(lm, t0);
        let mut zn = z + tm * h;
        for _ in 0..30 {
            let (iz, ln) = step_integral(w, z, zn, l);
            let phn = ph + self.dl * iz;
            let g = self.dl * mu0_from_log(self.n, ln);
            let gn = g.norm();
            if gn == 0.0 || !phn.re.is_finite() {
                return Ok(None);
            }
            let resid = phn.re;
            if resid.abs() <= 1e-3 * self.opts.tol_ray * h.max(1e-3) {
                let tn = self.tangent_at(ln, tm);
                if (tn * t0.conj()).re < 0.5 {
                    return Ok(None);
                }
                return Ok(Some((zn, ln, phn, tn)));
            }
            // move along the normal where d Re Φ / ds = |g|
            let nrm = g.conj() / gn;
            let ds = -resid / gn;
            if ds.abs() > 0.5 * h {
                return Ok(None);
            }
            zn += nrm * ds;
        }
        Ok(None)
    }
}

fn zero_scale(w: &NDifferential, k: usize) -> f64 {
    let z0 = w.zeros()[k];
    w.zeros()
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != k)
        .map(|(_, z)| (z - z0).norm())
        .fold(1.0, f64::min)
}

/// Candidate z-plane directions of primary rays at zero `k`, with the pair they carry
/// under the principal branch at the start point.
fn primary_seeds(w: &NDifferential, k: usize) -> Vec<(f64, (usize, usize))> {
    let n = w.n();
    let z0 = w.zeros()[k];
    let dw = w.derivs(z0, 1)[1];
    let a = ((-dw).ln() / n as f64).exp();
    let rho = 1e-4 * zero_scale(w, k);
    let mut out = Vec::new();
    for m in 0..2 * (n + 1) {
        let th = ((PI * m as f64 - n as f64 * a.arg()) / (n + 1) as f64).rem_euclid(2.0 * PI);
        let p = z0 + C64::from_polar(rho, th);
        let l = w.eval(p).ln();
        let zi = ndiff::zero_integral(w, z0, p, l);
        // for n ≥ 4 several pairs can share a direction
        for i in 0..n {
            for j in i + 1..n {
                let v = lam_diff(n, i, j) * zi;
                if v.re.abs() / v.norm() < 1e-2 {
                    out.push((th, (i, j)));
                }
            }
        }
    }
    out.sort_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).unwrap());
    out
}

fn primary_ray(w: &NDifferential, k: usize, th: f64, pair: (usize, usize), r: f64, opts: &TraceOptions) -> Result<StokesRay> {
    let n = w.n();
    let z0 = w.zeros()[k];
    let rho = 1e-4 * zero_scale(w, k);
    let l_ref = w.eval(z0 + C64::from_polar(rho, th)).ln();
    let p_ref = z0 + C64::from_polar(rho, th);
    let mut th = th;
    let (mut i, mut j) = pair;
    let mut p = p_ref;
    let mut l = l_ref;
    let mut zi = C64::new(0.0, 0.0);
    for _ in 0..20 {
        p = z0 + C64::from_polar(rho, th);
        l = l_ref + (w.eval(p) / w.eval(p_ref)).ln();
        zi = ndiff::zero_integral(w, z0, p, l);
        let f = (lam_diff(n, i, j) * zi).re;
        let df = (lam_diff(n, i, j) * mu0_from_log(n, l) * C64::new(0.0, 1.0) * (p - z0)).re;
        if df == 0.0 {
            break;
        }
        let d = f / df;
        th -= d;
        if d.abs() < 1e-15 {
            break;
        }
    }
    let mut g = lam_diff(n, i, j) * mu0_from_log(n, l);
    let outward = (p - z0) / rho;
    let mut tangent = C64::new(0.0, -1.0) * g.conj() / g.norm();
    if (tangent * outward.conj()).re < 0.0 {
        std::mem::swap(&mut i, &mut j);
        g = -g;
        tangent = C64::new(0.0, -1.0) * g.conj() / g.norm();
    }
    let dl = lam_diff(n, i, j);
    let mut ray = StokesRay {
        source: z0,
        origin: Source::Zero(k),
        pair: (i, j),
        direction: C64::from_polar(1.0, th),
        vertices: vec![z0, p],
        logs: vec![l, l],
        phase: vec![C64::new(0.0, 0.0), dl * zi],
        generation: 0,
        termination: Termination::Escaped,
    };
    let tracer = Tracer { w, n, r, opts: *opts, dl, zero_stop: rho };
    tracer.run(&mut ray, tangent, Some(k))?;
    Ok(ray)
}

/// Traces the primary ray leaving the zero `source` closest to `direction`.
pub fn trace_ray(w: &NDifferential, source: C64, pair: (usize, usize), direction: C64, r: f64) -> Result<StokesRay> {
    let k = w
        .zeros()
        .iter()
        .position(|z| (z - source).norm() < 1e-9 * (1.0 + z.norm()))
        .ok_or_else(|| Error::Precondition("ray source is not a zero of ω".into()))?;
    let seeds = primary_seeds(w, k);
    let th0 = direction.arg().rem_euclid(2.0 * PI);
    let ang = |t: f64| {
        let d = (t - th0).rem_euclid(2.0 * PI);
        d.min(2.0 * PI - d)
    };
    let best = seeds.iter().map(|s| ang(s.0)).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::Precondition("no ray directions at this zero".into()));
    }
    let (th, p) = seeds
        .iter()
        .copied()
        .filter(|s| ang(s.0) < best + 1e-9)
        .find(|s| (s.1 .0 == pair.0 && s.1 .1 == pair.1) || (s.1 .0 == pair.1 && s.1 .1 == pair.0))
        .ok_or_else(|| Error::Precondition(format!("pair {pair:?} does not define a ray near the requested direction")))?;
    primary_ray(w, k, th, p, r, &TraceOptions::for_radius(r))
}

/// Traces one orientation of a secondary ray from a crossing with log ω = lq.
fn secondary_ray(
    w: &NDifferential,
    q: C64,
    lq: C64,
    pair: (usize, usize),
    orient: f64,
    crossing: usize,
    generation: usize,
    r: f64,
    opts: &TraceOptions,
) -> Result<StokesRay> {
    let n = w.n();
    let (mut i, mut j) = pair;
    let mut g = lam_diff(n, i, j) * mu0_from_log(n, lq);
    let want = C64::new(0.0, orient) * g.conj() / g.norm();
    let mut tangent = C64::new(0.0, -1.0) * g.conj() / g.norm();
    if (tangent * want.conj()).re < 0.0 {
        std::mem::swap(&mut i, &mut j);
        g = -g;
        tangent = C64::new(0.0, -1.0) * g.conj() / g.norm();
    }
    let dl = lam_diff(n, i, j);
    let mut ray = StokesRay {
        source: q,
        origin: Source::Crossing(crossing),
        pair: (i, j),
        direction: tangent,
        vertices: vec![q],
        logs: vec![lq],
        phase: vec![C64::new(0.0, 0.0)],
        generation,
        termination: Termination::Escaped,
    };
    let zero_stop = 1e-4 * w.zeros().iter().enumerate().map(|(k, _)| zero_scale(w, k)).fold(1.0, f64::min);
    let tracer = Tracer { w, n, r, opts: *opts, dl, zero_stop };
    tracer.run(&mut ray, tangent, None)?;
    Ok(ray)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crossing {
    pub point: C64,
    /// ray indices with the segment index hit on each
    pub rays: (usize, usize),
    pub segs: (usize, usize),
    /// log ω at the point, on the first ray's branch
    pub log: C64,
    /// sheet shift: label s of the second ray is label s + shift of the first
    pub shift: usize,
}

#[derive(Debug, Clone)]
pub struct StokesGraph {
    pub w: NDifferential,
    pub rays: Vec<StokesRay>,
    pub crossings: Vec<Crossing>,
    pub radius: f64,
    pub truncated: bool,
    pub max_generations: usize,
}

pub const MAX_RAYS: usize = 2000;
/// ray pairs meeting at a smaller angle are treated as running along each other
const OVERLAP_SIN: f64 = 1e-2;

fn seg_intersection(p0: C64, p1: C64, q0: C64, q1: C64) -> Option<(f64, f64)> {
    let r = p1 - p0;
    let d = q1 - q0;
    let cross = |a: C64, b: C64| a.re * b.im - a.im * b.re;
    let den = cross(r, d);
    let e = q0 - p0;
    if den.abs() <= 1e-14 * r.norm() * d.norm() {
        // collinear overlap is reported at the overlap start
        let rl = r.norm_sqr();
        if rl == 0.0 || cross(e, r).abs() > 1e-12 * r.norm() * (1.0 + p0.norm()) {
            return None;
        }
        let t0 = (e * r.conj()).re / rl;
        let t1 = ((q1 - p0) * r.conj()).re / rl;
        let lo = t0.min(t1).max(0.0);
        let hi = t0.max(t1).min(1.0);
        if lo > hi {
            return None;
        }
        let u = if d.norm_sqr() > 0.0 { ((p0 + r * lo - q0) * d.conj()).re / d.norm_sqr() } else { 0.0 };
        return Some((lo, u.clamp(0.0, 1.0)));
    }
    let s = cross(e, d) / den;
    let u = cross(e, r) / den;
    if (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&u) {
        Some((s, u))
    } else {
        None
    }
}

type Grid = BTreeMap<(i64, i64), Vec<usize>>;

fn cell_range(a: C64, b: C64, cell: f64) -> (i64, i64, i64, i64) {
    let f = |x: f64| (x / cell).floor() as i64;
    (f(a.re.min(b.re)), f(a.re.max(b.re)), f(a.im.min(b.im)), f(a.im.max(b.im)))
}

fn build_grid(v: &[C64], cell: f64) -> Grid {
    let mut g = Grid::new();
    for (k, s) in v.windows(2).enumerate() {
        let (x0, x1, y0, y1) = cell_range(s[0], s[1], cell);
        for x in x0..=x1 {
            for y in y0..=y1 {
                g.entry((x, y)).or_default().push(k);
            }
        }
    }
    g
}

/// Intersections of two polylines: (point, seg on a, param on a, seg on b).
fn polyline_hits(a: &[C64], b: &[C64], grid_b: &Grid, cell: f64) -> Vec<(C64, usize, f64, usize)> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, s) in a.windows(2).enumerate() {
        let (x0, x1, y0, y1) = cell_range(s[0], s[1], cell);
        for x in x0..=x1 {
            for y in y0..=y1 {
                if let Some(list) = grid_b.get(&(x, y)) {
                    for &j in list {
                        if !seen.insert((i, j)) {
                            continue;
                        }
                        if let Some((ps, _)) = seg_intersection(s[0], s[1], b[j], b[j + 1]) {
                            out.push((s[0] + (s[1] - s[0]) * ps, i, ps, j));
                        }
                    }
                }
            }
        }
    }
    out.sort_by(|x, y| (x.1, x.2).partial_cmp(&(y.1, y.2)).unwrap());
    out
}

fn sheet_shift(n: usize, la: C64, lb: C64) -> usize {
    let d = ((lb - la).im / (2.0 * PI)).round() as i64;
    d.rem_euclid(n as i64) as usize
}

/// Shared sheet decomposition (α, β, δ) of two pairs in common labels.
fn alpha_delta(p: (usize, usize), q: (usize, usize)) -> Option<(usize, usize)> {
    let a = [p.0, p.1];
    let b = [q.0, q.1];
    let shared: Vec<usize> = a.iter().copied().filter(|x| b.contains(x)).collect();
    if shared.len() != 1 {
        return None;
    }
    let s = shared[0];
    let alpha = if p.0 == s { p.1 } else { p.0 };
    let delta = if q.0 == s { q.1 } else { q.0 };
    Some((alpha, delta))
}

pub fn build_graph(w: &NDifferential, r: f64, max_generations: usize) -> Result<StokesGraph> {
    build_graph_with(w, r, max_generations, &TraceOptions::for_radius(r))
}

pub fn build_graph_with(w: &NDifferential, r: f64, max_generations: usize, opts: &TraceOptions) -> Result<StokesGraph> {
    use rayon::prelude::*;
    if !(r > 0.0) {
        return Err(Error::Precondition("escape radius must be positive".into()));
    }
    let n = w.n();
    let mut graph = StokesGraph {
        w: w.clone(),
        rays: vec![],
        crossings: vec![],
        radius: r,
        truncated: false,
        max_generations,
    };
    if w.zeros().is_empty() {
        return Ok(graph);
    }
    let seeds: Vec<(usize, f64, (usize, usize))> = (0..w.zeros().len())
        .flat_map(|k| primary_seeds(w, k).into_iter().map(move |(th, p)| (k, th, p)))
        .collect();
    let traced: Vec<Result<StokesRay>> = seeds.par_iter().map(|&(k, th, p)| primary_ray(w, k, th, p, r, opts)).collect();
    for t in traced {
        graph.rays.push(t?);
    }
    let tol_cross = 1e-6 * r;
    let cell = r / 64.0;
    let mut seeded: Vec<(C64, C64)> = Vec::new();
    let mut checked = 0usize; // rays [0, checked) already intersected pairwise
    loop {
        let total = graph.rays.len();
        if checked == total {
            break;
        }
        let grids: Vec<Grid> = graph.rays.iter().map(|ray| build_grid(&ray.vertices, cell)).collect();
        let pairs: Vec<(usize, usize)> =
            (0..total).flat_map(|b| (0..b).map(move |a| (a, b))).filter(|&(_, b)| b >= checked).collect();
        let found: Vec<Vec<Crossing>> = pairs
            .par_iter()
            .map(|&(a, b)| {
                let (ra, rb) = (&graph.rays[a], &graph.rays[b]);
                let mut out: Vec<Crossing> = Vec::new();
                for (q, sa, _, sb) in polyline_hits(&ra.vertices, &rb.vertices, &grids[b], cell) {
                    if (q - ra.source).norm() < 2.0 * tol_cross || (q - rb.source).norm() < 2.0 * tol_cross {
                        continue;
                    }
                    let da = ra.vertices[sa + 1] - ra.vertices[sa];
                    let db = rb.vertices[sb + 1] - rb.vertices[sb];
                    if ((da.conj() * db).im / (da.norm() * db.norm())).abs() < OVERLAP_SIN {
                        // overlapping level sets, not a transversal crossing
                        continue;
                    }
                    if out.iter().any(|c| (c.point - q).norm() < tol_cross) {
                        continue;
                    }
                    let la = ra.log_at(w, sa, q);
                    let lb = rb.log_at(w, sb, q);
                    out.push(Crossing { point: q, rays: (a, b), segs: (sa, sb), log: la, shift: sheet_shift(n, la, lb) });
                }
                out
            })
            .collect();
        checked = total;
        let mut new_seeds: Vec<(C64, C64, (usize, usize), f64, usize, usize)> = Vec::new();
        for c in found.into_iter().flatten() {
            let (ra, rb) = (&graph.rays[c.rays.0], &graph.rays[c.rays.1]);
            let pb = ((rb.pair.0 + c.shift) % n, (rb.pair.1 + c.shift) % n);
            let idx = graph.crossings.len();
            if let Some(ad) = alpha_delta(ra.pair, pb) {
                let gen = ra.generation.max(rb.generation) + 1;
                let g = lam_diff(n, ad.0, ad.1) * mu0_from_log(n, c.log);
                // three rays through one point would otherwise seed the same ray twice
                let dup = seeded.iter().any(|(p, h): &(C64, C64)| {
                    (p - c.point).norm() < tol_cross && ((h - g).norm() < 1e-9 * g.norm() || (h + g).norm() < 1e-9 * g.norm())
                });
                if dup {
                    // already seeded
                } else if gen > max_generations || graph.rays.len() + new_seeds.len() + 2 > MAX_RAYS {
                    graph.truncated = true;
                } else {
                    seeded.push((c.point, g));
                    new_seeds.push((c.point, c.log, ad, 1.0, idx, gen));
                    new_seeds.push((c.point, c.log, ad, -1.0, idx, gen));
                }
            }
            graph.crossings.push(c);
        }
        let traced: Vec<Result<StokesRay>> = new_seeds
            .par_iter()
            .map(|&(q, lq, ad, o, idx, gen)| secondary_ray(w, q, lq, ad, o, idx, gen, r, opts))
            .collect();
        for t in traced {
            graph.rays.push(t?);
        }
    }
    Ok(graph)
}

impl StokesGraph {
    pub fn primary_at(&self, k: usize) -> Vec<usize> {
        (0..self.rays.len()).filter(|&i| self.rays[i].origin == Source::Zero(k)).collect()
    }

    pub fn primary_count(&self) -> usize {
        self.rays.iter().filter(|r| r.generation == 0).count()
    }

    pub fn secondary_count(&self) -> usize {
        self.rays.len() - self.primary_count()
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let pt = |z: C64| [z.re, z.im];
        let rays: Vec<serde_json::Value> = self
            .rays
            .iter()
            .map(|r| {
                serde_json::json!({
                    "source": pt(r.source),
                    "origin": r.origin,
                    "pair": [r.pair.0, r.pair.1],
                    "generation": r.generation,
                    "termination": r.termination,
                    "vertices": r.vertices.iter().map(|&z| pt(z)).collect::<Vec<_>>(),
                })
            })
            .collect();
        let crossings: Vec<serde_json::Value> = self
            .crossings
            .iter()
            .map(|c| serde_json::json!({"point": pt(c.point), "rays": [c.rays.0, c.rays.1]}))
            .collect();
        serde_json::json!({
            "differential": self.w.to_json_value(),
            "radius": self.radius,
            "zeros": self.w.zeros().iter().map(|&z| pt(z)).collect::<Vec<_>>(),
            "rays": rays,
            "crossings": crossings,
            "truncated": self.truncated,
        })
    }
}

impl StokesGraph {
    pub fn to_svg(&self) -> String {
        use std::fmt::Write;
        let mut pts: Vec<C64> = self.w.zeros().to_vec();
        for r in &self.rays {
            pts.extend_from_slice(&r.vertices);
        }
        if pts.is_empty() {
            pts = vec![C64::new(-1.0, -1.0), C64::new(1.0, 1.0)];
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &pts {
            x0 = x0.min(p.re);
            x1 = x1.max(p.re);
            y0 = y0.min(p.im);
            y1 = y1.max(p.im);
        }
        let span = (x1 - x0).max(y1 - y0).max(1e-9);
        let pad = 0.1 * span;
        let (x0, x1, y0, y1) = (x0 - pad, x1 + pad, y0 - pad, y1 + pad);
        let stroke = span / 400.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.6} {:.6} {:.6} {:.6}" width="800" height="{:.0}">"#,
            x0,
            -y1,
            x1 - x0,
            y1 - y0,
            800.0 * (y1 - y0) / (x1 - x0)
        );
        for r in &self.rays {
            let mut d = String::new();
            for (k, v) in r.vertices.iter().enumerate() {
                let _ = write!(d, "{}{:.6},{:.6}", if k == 0 { "M" } else { " L" }, v.re, -v.im);
            }
            let dash = if r.generation == 0 { String::new() } else { format!(r#" stroke-dasharray="{:.6} {:.6}""#, 4.0 * stroke, 3.0 * stroke) };
            let _ = writeln!(
                s,
                r#"<path d="{d}" fill="none" stroke="black" stroke-width="{stroke:.6}"{dash} data-pair="{},{}"/>"#,
                r.pair.0, r.pair.1
            );
        }
        for c in &self.crossings {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.6}" cy="{:.6}" r="{:.6}" fill="none" stroke="blue" stroke-width="{stroke:.6}"/>"#,
                c.point.re,
                -c.point.im,
                3.0 * stroke
            );
        }
        for z in self.w.zeros() {
            let _ = writeln!(s, r#"<circle cx="{:.6}" cy="{:.6}" r="{:.6}" fill="red"/>"#, z.re, -z.im, 4.0 * stroke);
        }
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossingEvent {
    /// arclength along the path
    pub s: f64,
    pub point: C64,
    pub ray: usize,
    pub ray_seg: usize,
    /// ordered pair in the ray's labels
    pub pair: (usize, usize),
    /// log ω at the point on the ray's branch
    pub ray_log: C64,
    /// +1 when the path crosses from the right of the ray to its left
    pub side: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathDecomposition {
    pub segments: Vec<PlanePath>,
    pub events: Vec<CrossingEvent>,
    pub warnings: Vec<String>,
}

pub fn decompose_path(path: &PlanePath, graph: &StokesGraph) -> Result<PathDecomposition> {
    path.check_clearance(&graph.w)?;
    let cell = graph.radius / 64.0;
    let v = path.vertices();
    let mut cum = vec![0.0];
    for s in v.windows(2) {
        cum.push(cum.last().unwrap() + (s[1] - s[0]).norm());
    }
    let mut events = Vec::new();
    for (ri, ray) in graph.rays.iter().enumerate() {
        let grid = build_grid(&ray.vertices, cell);
        for (q, ps, par, rs) in polyline_hits(v, &ray.vertices, &grid, cell) {
            let pd = v[ps + 1] - v[ps];
            let rd = ray.vertices[rs + 1] - ray.vertices[rs];
            let sin = (pd.conj() * rd).im / (pd.norm() * rd.norm());
            if sin.abs() < TOL_TANGENT {
                return Err(Error::TangentialCrossing { re: q.re, im: q.im });
            }
            let s = cum[ps] + par * pd.norm();
            if events.iter().any(|e: &CrossingEvent| e.ray == ri && (e.s - s).abs() < 1e-12 * (1.0 + s)) {
                continue;
            }
            events.push(CrossingEvent {
                s,
                point: q,
                ray: ri,
                ray_seg: rs,
                pair: ray.pair,
                ray_log: ray.log_at(&graph.w, rs, q),
                // ray direction rd; left normal i·rd; path goes left when Im(conj(rd)·pd) > 0
                side: if sin < 0.0 { 1 } else { -1 },
            });
        }
    }
    events.sort_by(|a, b| (a.s, a.ray).partial_cmp(&(b.s, b.ray)).unwrap());
    let tol_cross = 1e-6 * graph.radius;
    let mut warnings = Vec::new();
    // a secondary ray running along a primary one contributes a single event
    let dir = |e: &CrossingEvent| {
        let r = &graph.rays[e.ray];
        r.vertices[e.ray_seg + 1] - r.vertices[e.ray_seg]
    };
    let mut keep = vec![true; events.len()];
    for a in 0..events.len() {
        for b in a + 1..events.len() {
            if events[b].s - events[a].s > tol_cross {
                break;
            }
            let (da, db) = (dir(&events[a]), dir(&events[b]));
            if ((da.conj() * db).im / (da.norm() * db.norm())).abs() < OVERLAP_SIN {
                let ga = graph.rays[events[a].ray].generation;
                let gb = graph.rays[events[b].ray].generation;
                let drop = if gb >= ga { b } else { a };
                if keep[drop] {
                    warnings.push(format!("OverlappingRays: dropped event on ray {}", events[drop].ray));
                }
                keep[drop] = false;
            }
        }
    }
    let mut k = 0;
    events.retain(|_| {
        k += 1;
        keep[k - 1]
    });
    for e in events.windows(2) {
        if e[1].s - e[0].s < tol_cross {
            warnings.push(format!("NearDoubleCrossing at s = {:.9} (rays {} and {})", e[0].s, e[0].ray, e[1].ray));
        }
    }
    let mut segments = Vec::new();
    let mut cur = vec![v[0]];
    let mut vi = 1;
    for e in &events {
        while vi < v.len() && cum[vi] < e.s {
            cur.push(v[vi]);
            vi += 1;
        }
        if *cur.last().unwrap() != e.point {
            cur.push(e.point);
        }
        segments.push(PlanePath::new(std::mem::take(&mut cur), path.r_min())?);
        cur.push(e.point);
    }
    while vi < v.len() {
        if *cur.last().unwrap() != v[vi] {
            cur.push(v[vi]);
        }
        vi += 1;
    }
    segments.push(PlanePath::new(cur, path.r_min())?);
    Ok(PathDecomposition { segments, events, warnings })
}

impl PathDecomposition {
    pub fn events_csv(&self) -> String {
        let mut s = String::from("index,s,re,im,ray,pair_i,pair_j,side\n");
        for (k, e) in self.events.iter().enumerate() {
            s.push_str(&format!(
                "{k},{:.12},{:.12},{:.12},{},{},{},{}\n",
                e.s, e.point.re, e.point.im, e.ray, e.pair.0, e.pair.1, e.side
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }
    fn airy() -> NDifferential {
        NDifferential::plane(2, vec![c(0.0, 0.0), c(1.0, 0.0)]).unwrap()
    }
    fn cubic3() -> NDifferential {
        NDifferential::plane(3, vec![c(-1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap()
    }

    #[test]
    fn model_directions() {
        let d: Vec<f64> = local_ray_directions(2, 0).iter().map(|x| x.0).collect();
        assert_eq!(d.len(), 2);
        assert!((d[0] - PI / 2.0).abs() < 1e-12 && (d[1] - 1.5 * PI).abs() < 1e-12);
        let d: Vec<f64> = local_ray_directions(2, 1).iter().map(|x| x.0).collect();
        assert_eq!(d.len(), 3);
        for (a, b) in d.iter().zip([PI / 3.0, PI, 5.0 * PI / 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(local_ray_directions(3, 1).len(), 8);
    }

    #[test]
    fn airy_rays_are_straight() {
        let w = airy();
        let g = build_graph(&w, 4.0, 2).unwrap();
        assert_eq!(g.primary_count(), 3);
        assert_eq!(g.crossings.len(), 0);
        assert_eq!(g.secondary_count(), 0);
        for r in &g.rays {
            let th = r.direction.arg().rem_euclid(2.0 * PI);
            let k = (th / (2.0 * PI / 3.0)).round();
            assert!((th - k * 2.0 * PI / 3.0).abs() < 1e-6, "{th}");
            let u = C64::from_polar(1.0, k * 2.0 * PI / 3.0);
            for v in &r.vertices {
                assert!((v * u.conj()).im.abs() < 1e-6);
            }
            assert_eq!(r.termination, Termination::Escaped);
        }
    }

    #[test]
    fn level_set_residual() {
        let w = cubic3();
        let g = build_graph(&w, 6.0, 0).unwrap();
        for r in &g.rays {
            let mut len = 0.0;
            for (k, p) in r.phase.iter().enumerate() {
                if k > 0 {
                    len += (r.vertices[k] - r.vertices[k - 1]).norm();
                }
                assert!(p.re.abs() <= TOL_RAY * len.max(1e-12) + 1e-12);
            }
        }
    }

    #[test]
    fn cubic_graph() {
        let w = cubic3();
        let g = build_graph(&w, 6.0, 1).unwrap();
        assert_eq!(g.primary_count(), 24);
        for k in 0..3 {
            assert_eq!(g.primary_at(k).len(), local_ray_directions(3, 1).len());
        }
        for r in g.rays.iter().filter(|r| r.generation == 0) {
            assert!(matches!(r.termination, Termination::Escaped | Termination::HitCrossing | Termination::HitZero));
        }
        eprintln!("crossings {} secondary {} truncated {}", g.crossings.len(), g.secondary_count(), g.truncated);
    }

    #[test]
    fn constant_and_bad_source() {
        let w = NDifferential::plane(2, vec![c(1.0, 0.0)]).unwrap();
        let g = build_graph(&w, 3.0, 1).unwrap();
        assert!(g.rays.is_empty() && g.crossings.is_empty());
        assert!(trace_ray(&w, c(0.0, 0.0), (0, 1), c(1.0, 0.0), 3.0).is_err());
        assert!(trace_ray(&airy(), c(0.5, 0.0), (0, 1), c(1.0, 0.0), 3.0).is_err());
        assert!(trace_ray(&airy(), c(0.0, 0.0), (0, 1), c(1.0, 0.0), 3.0).is_ok());
    }

    #[test]
    fn airy_decomposition() {
        let w = airy();
        let g = build_graph(&w, 4.0, 1).unwrap();
        let p = PlanePath::arc(c(0.0, 0.0), 2.0, 0.3, 0.3 + 2.0 * PI, 96, 0.5).unwrap();
        let d = decompose_path(&p, &g).unwrap();
        assert_eq!(d.events.len(), 3);
        assert_eq!(d.segments.len(), 4);
        let inside = PlanePath::segment(c(1.0, 0.5), c(1.0, 1.5), 0.5).unwrap();
        let d = decompose_path(&inside, &g).unwrap();
        assert_eq!((d.segments.len(), d.events.len()), (1, 0));
        let one = PlanePath::segment(c(1.0, 0.5), c(1.0, -0.5), 0.5).unwrap();
        let d = decompose_path(&one, &g).unwrap();
        assert_eq!((d.segments.len(), d.events.len()), (2, 1));
        assert_eq!(d.events[0].pair, g.rays[d.events[0].ray].pair);
        let back = decompose_path(&one.reversed(), &g).unwrap();
        assert_eq!(back.events[0].side, -d.events[0].side);
        let tangent = PlanePath::segment(c(1.0, 0.0), c(3.0, 0.0), 0.5).unwrap();
        assert!(matches!(decompose_path(&tangent, &g), Err(Error::TangentialCrossing { .. })));
    }

    fn dist_to_polyline(p: C64, v: &[C64]) -> f64 {
        v.windows(2).map(|s| ndiff::point_segment_distance(p, s[0], s[1])).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn halving_step_invariance() {
        let w = cubic3();
        let r = 4.0;
        let o = TraceOptions::for_radius(r);
        let a = build_graph_with(&w, r, 0, &o).unwrap();
        let b = build_graph_with(&w, r, 0, &o.halved()).unwrap();
        assert_eq!(a.rays.len(), b.rays.len());
        for (x, y) in a.rays.iter().zip(&b.rays) {
            assert_eq!(x.pair, y.pair);
            // compare inside the common radius
            let lim = r * 0.98;
            let h1 = x.vertices.iter().filter(|p| p.norm() < lim).map(|p| dist_to_polyline(*p, &y.vertices)).fold(0.0, f64::max);
            let h2 = y.vertices.iter().filter(|p| p.norm() < lim).map(|p| dist_to_polyline(*p, &x.vertices)).fold(0.0, f64::max);
            assert!(h1.max(h2) <= 2.0 * TOL_RAY, "{}", h1.max(h2));
        }
    }

    #[test]
    fn two_well_primary_count() {
        let w = NDifferential::plane(2, vec![c(-1.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]).unwrap();
        let g = build_graph(&w, 8.0, 2).unwrap();
        assert_eq!(g.primary_count(), 6);
        assert_eq!(g.crossings.len(), 0);
        assert!(!g.truncated);
    }

    #[test]
    fn reversal_reverses_events() {
        let w = cubic3();
        let g = build_graph(&w, 6.0, 1).unwrap();
        let p = PlanePath::new(vec![c(2.0, 0.3), c(0.1, 1.9), c(-2.1, 0.2), c(-0.3, -2.0)], 0.1).unwrap();
        let d = decompose_path(&p, &g).unwrap();
        let e = decompose_path(&p.reversed(), &g).unwrap();
        assert!(!d.events.is_empty());
        assert_eq!(d.events.len(), e.events.len());
        assert_eq!(d.segments.len(), d.events.len() + 1);
        let total = p.length();
        for (x, y) in d.events.iter().zip(e.events.iter().rev()) {
            // coincident events from overlapping rays may tie in either order
            assert!((x.s - (total - y.s)).abs() < 1e-9);
            let m = e.events.iter().find(|z| z.ray == x.ray && (z.point - x.point).norm() < 1e-12).unwrap();
            assert_eq!(x.side, -m.side);
        }
        let mut joined = d.segments[0].clone();
        for s in &d.segments[1..] {
            joined = joined.concat(s).unwrap();
        }
        assert!((joined.length() - p.length()).abs() < 1e-12);
    }
}
