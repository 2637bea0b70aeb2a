use crate::error::{Error, Result};
use crate::ndiff::{continue_roots, NDifferential, PlanePath, SheetAssignment};
use crate::odeint::{self, CMat, TransferOptions};
use crate::stokesgeo::{self, StokesGraph};
use crate::wkb::{self, AsymptoticReport, StokesFactor};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

/// Determinant-one Hermitian positive-definite matrix stored as e^{log_scale}·h.
#[derive(Debug, Clone, PartialEq)]
pub struct SymPoint {
    pub h: CMat,
    pub log_scale: f64,
}

impl SymPoint {
    /// H = GG* for G = e^{r}·g with |det G| = 1 known a priori.
    pub fn from_unimodular(g: &CMat, r: f64) -> Result<Self> {
        let h = g * g.adjoint();
        let h = (&h + h.adjoint()) * C64::new(0.5, 0.0);
        let mx = h.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if !(mx > 0.0 && mx.is_finite()) {
            return Err(Error::Precondition("degenerate map value".into()));
        }
        let h = h / C64::new(mx, 0.0);
        let ev = h.clone().symmetric_eigenvalues();
        let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        // trust the numerical determinant when h is well conditioned
        let log_scale = if lo > 1e-10 * hi {
            -ev.iter().map(|v| v.ln()).sum::<f64>() / h.nrows() as f64
        } else {
            2.0 * r + mx.ln()
        };
        Ok(SymPoint { h, log_scale })
    }

    /// H = GG* rescaled to determinant one.
    pub fn from_g(g: &CMat) -> Result<Self> {
        let det = g.determinant().norm();
        if !(det > 0.0 && det.is_finite()) {
            return Err(Error::Precondition("map value is singular".into()));
        }
        SymPoint::from_unimodular(g, -det.ln() / g.nrows() as f64)
    }

    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn to_matrix(&self) -> CMat {
        &self.h * C64::new(self.log_scale.exp(), 0.0)
    }

    pub fn log_det(&self) -> f64 {
        self.h.determinant().re.ln() + self.n() as f64 * self.log_scale
    }
}

/// sqrt(Σ log² μᵢ) over the eigenvalues μᵢ of H₁⁻¹H₂.
pub fn sym_distance(h1: &SymPoint, h2: &SymPoint) -> f64 {
    let l = h1.h.clone().cholesky().expect("positive definite").l();
    let li = l.try_inverse().expect("invertible factor");
    let m = &li * &h2.h * li.adjoint();
    let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let shift = h2.log_scale - h1.log_scale;
    m.symmetric_eigenvalues().iter().map(|&mu| (mu.ln() + shift).powi(2)).sum::<f64>().sqrt()
}

/// Zero-avoiding polyline from a to b: the straight segment, or a two-leg detour.
pub fn route(w: &NDifferential, a: C64, b: C64) -> Result<PlanePath> {
    let scale = 1.0 + w.zeros().iter().map(|z| z.norm()).fold(0.0, f64::max);
    let r_min = 1e-3 * scale;
    let direct = PlanePath::segment(a, b, r_min)?;
    if direct.check_clearance(w).is_ok() {
        return Ok(direct);
    }
    let d = b - a;
    let perp = C64::new(-d.im, d.re) / d.norm().max(1e-300);
    for k in 1..=8 {
        for s in [1.0, -1.0] {
            let m = (a + b) * 0.5 + perp * (s * 0.1 * k as f64 * d.norm().max(r_min));
            let p = PlanePath::new(vec![a, m, b], r_min)?;
            if p.check_clearance(w).is_ok() {
                return Ok(p);
            }
        }
    }
    Err(Error::RoutingFailure)
}

/// Epₜ(z) = H for G = Tᵀ·E(z)⁻¹, T the ε-scaled transfer from the basepoint along a zero-avoiding route.
pub fn ep_t(w: &NDifferential, z: C64, t: f64, basepoint: C64, opts: &TransferOptions) -> Result<SymPoint> {
    for p in [z, basepoint] {
        if w.eval(p).norm() <= 1e-12 * w.coeff_scale() {
            return Err(Error::ZeroOfDifferential);
        }
    }
    let s0 = SheetAssignment::principal(w, basepoint)?;
    let (tr, r, sz) = if z == basepoint {
        (CMat::identity(w.n(), w.n()), 0.0, s0)
    } else {
        let path = route(w, basepoint, z)?;
        let tr = odeint::integrate_transfer(w, t, &path, opts)?;
        (tr.mhat.clone(), tr.r, continue_roots(w, &path, &s0)?.at_end())
    };
    let e = odeint::e_correction(w, z, &sz)?;
    let einv = e.try_inverse().ok_or_else(|| Error::Precondition("E(z) singular".into()))?;
    // det T = det E = 1
    SymPoint::from_unimodular(&(tr.transpose() * einv), r)
}

fn top_log_sv(m: &CMat, r: f64) -> f64 {
    r + m.clone().singular_values().max().ln()
}

/// Log singular values (descending) of G_x⁻¹G_y = E(x)·T_{xy}ᵀ·E(y)⁻¹. The extreme values come
/// from forward and backward transfers so that neither is lost to cancellation.
pub fn pair_log_singular_values(w: &NDifferential, x: C64, y: C64, t: f64, sx: &SheetAssignment, opts: &TransferOptions) -> Result<Vec<f64>> {
    let n = w.n();
    if x == y {
        return Ok(vec![0.0; n]);
    }
    let fwd = route(w, x, y)?;
    let sy = continue_roots(w, &fwd, sx)?.at_end();
    let ex = odeint::e_correction(w, x, sx)?;
    let ey = odeint::e_correction(w, y, &sy)?;
    let inv = |m: &CMat| m.clone().try_inverse().ok_or_else(|| Error::Precondition("E(z) singular".into()));
    let txy = odeint::integrate_transfer(w, t, &fwd, opts)?;
    let tyx = odeint::integrate_transfer(w, t, &fwd.reversed(), opts)?;
    let g = &ex * txy.mhat.transpose() * inv(&ey)?;
    let gi = &ey * tyx.mhat.transpose() * inv(&ex)?;
    let top = top_log_sv(&g, txy.r);
    let bottom = -top_log_sv(&gi, tyx.r);
    let mut out = vec![0.0; n];
    out[0] = top;
    out[n - 1] = bottom;
    if n == 3 {
        out[1] = -(top + bottom);
    } else if n > 3 {
        let sv = g.clone().singular_values();
        let mut s: Vec<f64> = sv.iter().map(|v| v.ln() + txy.r).collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mid: f64 = -(top + bottom) / (n - 2) as f64;
        let raw: f64 = s[1..n - 1].iter().sum::<f64>() / (n - 2) as f64;
        for i in 1..n - 1 {
            out[i] = s[i] - raw + mid;
        }
    }
    Ok(out)
}

/// d(Epₜ(x), Epₜ(y)) in the sym_distance normalization, independent of the basepoint.
pub fn pair_distance(w: &NDifferential, x: C64, y: C64, t: f64, sx: &SheetAssignment, opts: &TransferOptions) -> Result<f64> {
    let l = pair_log_singular_values(w, x, y, t, sx, opts)?;
    Ok(2.0 * l.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Point of the flat {x ∈ ℝⁿ : Σxᵢ = 0}.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApartmentVector(pub Vec<f64>);

impl ApartmentVector {
    pub fn zero(n: usize) -> Self {
        ApartmentVector(vec![0.0; n])
    }
    pub fn add(&self, o: &ApartmentVector) -> Self {
        ApartmentVector(self.0.iter().zip(&o.0).map(|(a, b)| a + b).collect())
    }
    pub fn sub(&self, o: &ApartmentVector) -> Self {
        ApartmentVector(self.0.iter().zip(&o.0).map(|(a, b)| a - b).collect())
    }
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Re of the per-sheet integrals of μ along a path, labels continued from `sheets`.
fn displacement(w: &NDifferential, path: &PlanePath, sheets: &SheetAssignment) -> Result<ApartmentVector> {
    if path.is_point() {
        return Ok(ApartmentVector::zero(w.n()));
    }
    let e = wkb::e_factor(w, path, 1.0, sheets)?;
    Ok(ApartmentVector(e.exponents.iter().map(|x| x.re).collect()))
}

/// (Re ζ₁(z), …, Re ζₙ(z)) with ζᵢ the natural coordinates from the basepoint.
pub fn apartment_coords(w: &NDifferential, z: C64, basepoint: C64, sheets: &SheetAssignment) -> Result<ApartmentVector> {
    if z == basepoint {
        return Ok(ApartmentVector::zero(w.n()));
    }
    displacement(w, &route(w, basepoint, z)?, sheets)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RescaledReport {
    pub report: AsymptoticReport,
    /// flat prediction |x_apartment(y) − x_apartment(x)|; omitted across sectors
    pub predicted: Option<f64>,
    pub cross_sector: bool,
}

/// d(Epₜ(x), Epₜ(y)) / (2t^{1/n}) over the ladder.
pub fn rescaled_distance_with(
    w: &NDifferential,
    graph: &StokesGraph,
    x: C64,
    y: C64,
    basepoint: C64,
    ladder: &[f64],
) -> Result<RescaledReport> {
    wkb::check_ladder(ladder)?;
    let n = w.n();
    let s0 = SheetAssignment::principal(w, basepoint)?;
    let sx = if x == basepoint { s0 } else { continue_roots(w, &route(w, basepoint, x)?, &s0)?.at_end() };
    let (cross_sector, predicted) = if x == y {
        (false, Some(0.0))
    } else {
        let p = route(w, x, y)?;
        let cross = !stokesgeo::decompose_path(&p, graph)?.events.is_empty();
        (cross, if cross { None } else { Some(displacement(w, &p, &sx)?.norm()) })
    };
    let opts = TransferOptions::default();
    let values: Vec<f64> = ladder
        .par_iter()
        .map(|&t| pair_distance(w, x, y, t, &sx, &opts).map(|d| d / (2.0 * wkb::kappa(n, t))))
        .collect::<Result<_>>()?;
    Ok(RescaledReport { report: AsymptoticReport::new(n, ladder.to_vec(), values), predicted, cross_sector })
}

pub fn rescaled_distance(w: &NDifferential, x: C64, y: C64, basepoint: C64, ladder: &[f64]) -> Result<RescaledReport> {
    let graph = stokesgeo::build_graph(w, stokesgeo::default_radius(w), 0)?;
    rescaled_distance_with(w, &graph, x, y, basepoint, ladder)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainLink {
    pub ray: usize,
    pub pair: (usize, usize),
    pub base: stokesgeo::Source,
    pub side: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConePoint {
    pub chain: Vec<ChainLink>,
    pub vector: ApartmentVector,
}

impl ConePoint {
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }
}

/// Ordered crossing labels and the summed apartment displacement of a path.
pub fn cone_point(w: &NDifferential, path: &PlanePath, graph: &StokesGraph, factors: &[StokesFactor]) -> Result<ConePoint> {
    let d = stokesgeo::decompose_path(path, graph)?;
    let mut chain = Vec::with_capacity(d.events.len());
    for ev in &d.events {
        if !factors.iter().any(|f| f.ray == ev.ray && f.pair == ev.pair) {
            return Err(Error::FactorMismatch(format!("no constant for ray {}", ev.ray)));
        }
        chain.push(ChainLink { ray: ev.ray, pair: ev.pair, base: graph.rays[ev.ray].origin, side: ev.side });
    }
    let mut cur = SheetAssignment::principal(w, path.start())?;
    let mut vector = ApartmentVector::zero(w.n());
    for seg in &d.segments {
        if seg.is_point() {
            continue;
        }
        vector = vector.add(&displacement(w, seg, &cur)?);
        cur = continue_roots(w, seg, &cur)?.at_end();
    }
    Ok(ConePoint { chain, vector })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub i: usize,
    pub j: usize,
    pub theta_i: f64,
    pub theta_j: f64,
    pub adjacent: bool,
    pub antipodal: bool,
    pub values: Vec<f64>,
    pub extrapolated: f64,
    /// apartment distance along the connecting route
    pub flat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeTable {
    pub zero: usize,
    pub r: f64,
    pub ladder: Vec<f64>,
    pub rows: Vec<ProbeRow>,
    /// every antipodal pair has a separated image
    pub distinct: bool,
}

impl ProbeTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i,j,theta_i,theta_j,adjacent,antipodal,extrapolated,flat\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.12e},{:.12e},{},{},{:.12e},{:.12e}\n",
                r.i, r.j, r.theta_i, r.theta_j, r.adjacent, r.antipodal, r.extrapolated, r.flat
            ));
        }
        s
    }
}

/// Pairwise rescaled distances between mid-sector samples at radius r around a zero.
pub fn injectivity_probe(w: &NDifferential, zero: usize, r: f64, ladder: &[f64]) -> Result<ProbeTable> {
    let n = w.n();
    if n == 2 {
        return Err(Error::UnsupportedOrder(n));
    }
    wkb::check_ladder(ladder)?;
    let z0 = *w.zeros().get(zero).ok_or_else(|| Error::Precondition(format!("no zero {zero}")))?;
    let graph = stokesgeo::build_graph(w, stokesgeo::default_radius(w), 0)?;
    let mut dirs: Vec<f64> = graph.primary_at(zero).iter().map(|&q| graph.rays[q].direction.arg()).collect();
    dirs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dirs.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    let m = dirs.len();
    let tau = 2.0 * std::f64::consts::PI;
    let mids: Vec<f64> = (0..m)
        .map(|i| {
            let next = if i + 1 < m { dirs[i + 1] } else { dirs[0] + tau };
            0.5 * (dirs[i] + next)
        })
        .collect();
    let pts: Vec<C64> = mids.iter().map(|&th| z0 + C64::from_polar(r, th)).collect();
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let opts = TransferOptions::default();
    let rows: Vec<ProbeRow> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let si = SheetAssignment::principal(w, pts[i])?;
            let values: Vec<f64> = ladder
                .iter()
                .map(|&t| pair_distance(w, pts[i], pts[j], t, &si, &opts).map(|d| d / (2.0 * wkb::kappa(n, t))))
                .collect::<Result<_>>()?;
            let flat = displacement(w, &route(w, pts[i], pts[j])?, &si)?.norm();
            let gap = (j - i).min(m - (j - i));
            let extrapolated = AsymptoticReport::new(n, ladder.to_vec(), values.clone()).extrapolated;
            Ok(ProbeRow {
                i,
                j,
                theta_i: mids[i],
                theta_j: mids[j],
                adjacent: gap == 1,
                antipodal: 2 * gap == m,
                values,
                extrapolated,
                flat,
            })
        })
        .collect::<Result<_>>()?;
    let floor = 1e-3 * rows.iter().map(|r| r.extrapolated).fold(0.0, f64::max);
    let distinct = rows.iter().filter(|r| r.antipodal).all(|r| r.extrapolated > floor);
    Ok(ProbeTable { zero, r, ladder: ladder.to_vec(), rows, distinct })
}
