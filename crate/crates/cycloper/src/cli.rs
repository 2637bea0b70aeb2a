use crate::conemap;
use crate::error::Error;
use crate::ndiff::{NDifferential, PlanePath};
use crate::stokesgeo::{self, StokesGraph};
use crate::wkb::{self, DEFAULT_LADDER};
use clap::{Args, Parser, Subcommand};
use num_complex::Complex64 as C64;
use serde::Deserialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRUNCATED: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;
pub const EXIT_UNSUPPORTED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "cycloper", version, about = "Stokes graphs, WKB transfer checks and flat-limit distances")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace the Stokes graph; writes graph.json and graph.svg
    StokesGraph(Common),
    /// Residual ladder, Stokes constants and growth along a path; writes verify.json
    Verify(Common),
    /// Flat-limit distances and apartment coordinates; writes distances.csv and apartments.json
    Conemap {
        #[command(flatten)]
        common: Common,
        /// also run the injectivity probe around the configured zero
        #[arg(long)]
        injectivity: bool,
    },
    /// Fit Stokes constants at the zeros; writes stokes.json and stokes.csv
    FitStokes(Common),
    /// Growth exponent along a path; writes growth.json
    Growth(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// comma-separated t values
    #[arg(long, value_delimiter = ',')]
    pub ladder: Option<Vec<f64>>,
    #[arg(long, value_name = "R")]
    pub radius: Option<f64>,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_bound")]
    pub residual: f64,
    #[serde(default = "default_bound")]
    pub growth: f64,
    #[serde(default = "default_monodromy")]
    pub monodromy: f64,
}

fn default_bound() -> f64 {
    1e-2
}
fn default_monodromy() -> f64 {
    1e-6
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { residual: default_bound(), growth: default_bound(), monodromy: default_monodromy() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectivitySpec {
    #[serde(default)]
    pub zero: usize,
    pub r: f64,
}

/// Experiment configuration read from JSON.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// inline differential object, or a path to a JSON file holding one
    pub differential: Value,
    #[serde(default)]
    pub ladder: Option<Vec<f64>>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_generations")]
    pub max_generations: usize,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub path: Option<Vec<[f64; 2]>>,
    #[serde(default = "default_rmin")]
    pub r_min: f64,
    #[serde(default)]
    pub pairs: Vec<[[f64; 2]; 2]>,
    #[serde(default)]
    pub basepoint: Option<[f64; 2]>,
    #[serde(default)]
    pub hook: Option<HookSpec>,
    #[serde(default)]
    pub injectivity: Option<InjectivitySpec>,
    #[serde(default)]
    pub zeros: Option<Vec<usize>>,
}

fn default_generations() -> usize {
    1
}
fn default_rmin() -> f64 {
    1e-3
}

/// Path that leaves a primary ray just clockwise of it, circles its zero and returns
/// just clockwise of the next ray.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookSpec {
    pub ray: usize,
    #[serde(default = "default_inner")]
    pub inner: f64,
    #[serde(default = "default_outer")]
    pub outer: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_inner() -> f64 {
    0.05
}
fn default_outer() -> f64 {
    0.5
}
fn default_delta() -> f64 {
    1.5e-3
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, msg: msg.into() }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidDifferential(_) | Error::NonSimpleZero { .. } | Error::LadderTooShort(_) => EXIT_CONFIG,
        Error::GenerationOverflow(_) => EXIT_TRUNCATED,
        Error::UnsupportedOrder(_) => EXIT_UNSUPPORTED,
        _ => EXIT_PRECONDITION,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError { code: exit_code(&e), msg: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Validated inputs shared by all subcommands.
pub struct Setup {
    pub cfg: ExperimentConfig,
    pub w: NDifferential,
    pub ladder: Vec<f64>,
    pub radius: f64,
    pub out: PathBuf,
}

fn c(p: [f64; 2]) -> C64 {
    C64::new(p[0], p[1])
}

pub fn load(common: &Common) -> CliResult<Setup> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", common.config.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::config(format!("config: {e}")))?;
    let dval = match &cfg.differential {
        Value::String(p) => {
            let base = common.config.parent().unwrap_or(Path::new("."));
            let f = base.join(p);
            let s = std::fs::read_to_string(&f).map_err(|e| CliError::config(format!("cannot read {}: {e}", f.display())))?;
            serde_json::from_str(&s).map_err(|e| CliError::config(format!("differential: {e}")))?
        }
        v => v.clone(),
    };
    let w = NDifferential::from_json_value(&dval).map_err(|e| CliError::config(e.to_string()))?;
    let ladder = common.ladder.clone().or_else(|| cfg.ladder.clone()).unwrap_or_else(|| DEFAULT_LADDER.to_vec());
    if ladder.is_empty() || ladder[0] <= 0.0 || ladder.windows(2).any(|p| p[1] <= p[0]) {
        return Err(CliError::config("ladder must be positive and strictly increasing"));
    }
    let t = &cfg.tolerances;
    if !(t.residual > 0.0 && t.growth > 0.0 && t.monodromy > 0.0 && cfg.r_min > 0.0) {
        return Err(CliError::config("tolerances must be positive"));
    }
    let radius = common.radius.or(cfg.radius).unwrap_or_else(|| stokesgeo::default_radius(&w));
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(CliError::config("radius must be positive"));
    }
    Ok(Setup { cfg, w, ladder, radius, out: common.out.clone() })
}

impl Setup {
    fn path(&self, g: &StokesGraph) -> CliResult<PlanePath> {
        if let Some(h) = &self.cfg.hook {
            if self.cfg.path.is_some() {
                return Err(CliError::config("give either path or hook, not both"));
            }
            return wkb::ray_hook(g, h.ray, h.inner, h.outer, h.delta).map_err(|e| CliError::config(e.to_string()));
        }
        let v = self.cfg.path.as_ref().ok_or_else(|| CliError::config("config needs a path or hook"))?;
        if v.len() < 2 {
            return Err(CliError::config("path needs at least two vertices"));
        }
        PlanePath::new(v.iter().map(|p| c(*p)).collect(), self.cfg.r_min).map_err(|e| CliError::config(e.to_string()))
    }

    fn graph(&self) -> CliResult<StokesGraph> {
        Ok(stokesgeo::build_graph(&self.w, self.radius, self.cfg.max_generations)?)
    }

    fn write(&self, name: &str, body: &str) -> CliResult<()> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", self.out.display())))?;
        let f = self.out.join(name);
        std::fs::write(&f, body).map_err(|e| CliError::config(format!("cannot write {}: {e}", f.display())))
    }

    fn write_json(&self, name: &str, v: &Value) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(v).expect("serializable");
        s.push('\n');
        self.write(name, &s)
    }
}

fn e12(v: f64) -> String {
    format!("{v:.12e}")
}

pub fn cmd_stokes_graph(s: &Setup) -> CliResult<i32> {
    let g = s.graph()?;
    let counts = json!({
        "rays": g.primary_count(),
        "crossings": g.crossings.len(),
        "secondary": g.secondary_count(),
    });
    let mut j = g.to_json_value();
    j["counts"] = counts.clone();
    s.write_json("graph.json", &j)?;
    s.write("graph.svg", &g.to_svg())?;
    println!("rays: {} crossings: {} secondary: {}", counts["rays"], counts["crossings"], counts["secondary"]);
    if g.truncated {
        eprintln!("{}", Error::GenerationOverflow(g.max_generations));
        return Ok(EXIT_TRUNCATED);
    }
    Ok(EXIT_OK)
}

pub fn cmd_verify(s: &Setup) -> CliResult<i32> {
    let g = s.graph()?;
    let path = s.path(&g)?;
    let w = &s.w;
    let decomp = stokesgeo::decompose_path(&path, &g)?;
    s.write("events.csv", &decomp.events_csv())?;
    let factors = wkb::factors_for_path(w, &g, &decomp, &s.ladder)?;
    let residual = wkb::theorem1_residual_with(w, &path, &g, &s.ladder, &factors)?;
    s.write("residual.csv", &residual.to_csv())?;
    let growth = wkb::growth_exponent(w, &path, &g, &s.ladder)?;
    let closed = (path.start() - path.end()).norm() < 1e-12;
    let monodromy: Vec<f64> = if closed {
        let opts = crate::odeint::TransferOptions::default();
        s.ladder
            .iter()
            .map(|&t| {
                let m = crate::odeint::integrate_transfer(w, t, &path, &opts)?.matrix();
                Ok((m - crate::odeint::CMat::identity(w.n(), w.n())).norm())
            })
            .collect::<crate::Result<_>>()?
    } else {
        vec![]
    };
    let tol = &s.cfg.tolerances;
    let final_res = *residual.values.last().unwrap_or(&f64::INFINITY);
    let gap = (growth.measured - growth.predicted).abs();
    let ok = residual.monotone_tail
        && final_res < tol.residual
        && gap < tol.growth
        && monodromy.iter().all(|m| *m < tol.monodromy);
    let j = json!({
        "differential": w.to_json_value(),
        "ladder": s.ladder,
        "events": decomp.events.len(),
        "warnings": decomp.warnings,
        "factors": factors,
        "residual": residual.to_json_value(),
        "growth": {"measured": growth.measured, "predicted": growth.predicted, "difference": gap, "sheets": growth.sheets},
        "monodromy": monodromy,
        "pass": ok,
    });
    s.write_json("verify.json", &j)?;
    println!("final residual {} growth gap {} pass {ok}", e12(final_res), e12(gap));
    Ok(if ok { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub fn cmd_fit_stokes(s: &Setup) -> CliResult<i32> {
    let g = stokesgeo::build_graph(&s.w, s.radius, 0)?;
    let zeros = s.cfg.zeros.clone().unwrap_or_else(|| (0..s.w.zeros().len()).collect());
    let mut all = Vec::new();
    for z in zeros {
        all.extend(wkb::fit_stokes_factors(&s.w, &g, z, &s.ladder)?);
    }
    let mut csv = String::from("ray,zero,pair_i,pair_j,a_re,a_im,residual,t\n");
    for f in &all {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            f.ray,
            f.zero.map_or(String::new(), |z| z.to_string()),
            f.pair.0,
            f.pair.1,
            e12(f.a[0]),
            e12(f.a[1]),
            e12(f.residual),
            e12(f.t)
        ));
    }
    s.write("stokes.csv", &csv)?;
    s.write_json("stokes.json", &json!({ "ladder": s.ladder, "factors": all }))?;
    println!("fitted {} constants", all.len());
    Ok(EXIT_OK)
}

pub fn cmd_growth(s: &Setup) -> CliResult<i32> {
    let g = s.graph()?;
    let path = s.path(&g)?;
    let r = wkb::growth_exponent(&s.w, &path, &g, &s.ladder)?;
    let mut csv = String::from("t,log_norm\n");
    for (t, v) in r.ladder.iter().zip(&r.log_norms) {
        csv.push_str(&format!("{},{}\n", e12(*t), e12(*v)));
    }
    s.write("growth.csv", &csv)?;
    s.write_json("growth.json", &serde_json::to_value(&r).expect("serializable"))?;
    println!("measured {} predicted {}", e12(r.measured), e12(r.predicted));
    Ok(if (r.measured - r.predicted).abs() < s.cfg.tolerances.growth { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub fn cmd_conemap(s: &Setup, injectivity: bool) -> CliResult<i32> {
    let w = &s.w;
    if injectivity && w.n() == 2 {
        return Err(Error::UnsupportedOrder(2).into());
    }
    let g = stokesgeo::build_graph(w, s.radius, 0)?;
    let base = s.cfg.basepoint.map(c).or_else(|| s.cfg.pairs.first().map(|p| c(p[0])));
    let mut csv = String::from("x_re,x_im,y_re,y_im,measured,predicted,rel_err,cross_sector\n");
    let mut points: Vec<[f64; 2]> = Vec::new();
    for p in &s.cfg.pairs {
        let (x, y) = (c(p[0]), c(p[1]));
        let r = conemap::rescaled_distance_with(w, &g, x, y, base.unwrap_or(x), &s.ladder)?;
        let m = r.report.extrapolated;
        let (pred, rel) = match r.predicted {
            Some(v) if v > 0.0 => (e12(v), e12((m - v).abs() / v)),
            Some(v) => (e12(v), e12(m.abs())),
            None => (String::new(), String::new()),
        };
        csv.push_str(&format!("{},{},{},{},{},{pred},{rel},{}\n", e12(x.re), e12(x.im), e12(y.re), e12(y.im), e12(m), r.cross_sector));
        for q in [p[0], p[1]] {
            if !points.contains(&q) {
                points.push(q);
            }
        }
    }
    s.write("distances.csv", &csv)?;
    let mut aps = Vec::new();
    if let Some(b) = base {
        let sheets = crate::ndiff::SheetAssignment::principal(w, b)?;
        for q in &points {
            let v = conemap::apartment_coords(w, c(*q), b, &sheets)?;
            aps.push(json!({ "point": q, "vector": v.0 }));
        }
    }
    let bp = base.map(|b| vec![b.re, b.im]);
    s.write_json("apartments.json", &json!({ "basepoint": bp, "points": aps }))?;
    if injectivity {
        let spec = s.cfg.injectivity.clone().unwrap_or(InjectivitySpec { zero: 0, r: 0.5 });
        let t = conemap::injectivity_probe(w, spec.zero, spec.r, &s.ladder)?;
        s.write("injectivity.csv", &t.to_csv())?;
        s.write_json("injectivity.json", &serde_json::to_value(&t).expect("serializable"))?;
        println!("injectivity: antipodal images distinct = {}", t.distinct);
    }
    println!("{} pairs, {} points", s.cfg.pairs.len(), points.len());
    Ok(EXIT_OK)
}

fn dispatch(cli: &Cli) -> CliResult<i32> {
    let (common, needs_path) = match &cli.cmd {
        Command::StokesGraph(c) | Command::FitStokes(c) => (c, false),
        Command::Verify(c) | Command::Growth(c) => (c, true),
        Command::Conemap { common, .. } => (common, false),
    };
    let s = load(common)?;
    if !matches!(cli.cmd, Command::StokesGraph(_)) && s.ladder.len() < 4 {
        return Err(Error::LadderTooShort(s.ladder.len()).into());
    }
    if common.dry_run {
        if needs_path {
            let g = s.graph()?;
            s.path(&g)?.check_clearance(&s.w)?;
        }
        println!("config ok");
        return Ok(EXIT_OK);
    }
    match &cli.cmd {
        Command::StokesGraph(_) => cmd_stokes_graph(&s),
        Command::Verify(_) => cmd_verify(&s),
        Command::Conemap { injectivity, .. } => cmd_conemap(&s, *injectivity),
        Command::FitStokes(_) => cmd_fit_stokes(&s),
        Command::Growth(_) => cmd_growth(&s),
    }
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    }
}
