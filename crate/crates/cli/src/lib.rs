//! Batch runner behind the `hdu` binary.
//!
//! A plan names a command, a base scenario, an optional grid over `n`, `p`
//! and the weak-IV regime, and command options. Every grid point writes its
//! own directory; a `manifest.json` at the top records the effective plan so
//! the run can be replayed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hdu_core::apps::{self, GluingOptions};
use hdu_core::bounds::{self, AuditFamily, AuditOptions, AuditReport, DeltaOptions};
use hdu_core::gauss::{self, CurveOptions, CurvePoint};
use hdu_core::hoeffding::Form;
use hdu_core::kernels;
use hdu_core::marginals::IndexedSample;
use hdu_core::scenario::{Design, ScenarioConfig, ScenarioKind};
use hdu_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Simulate,
    Bounds,
    Audit,
    Mmd,
    Jive2,
    Plm,
    Glue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub n: Option<Vec<usize>>,
    #[serde(default)]
    pub p: Option<Vec<usize>>,
    #[serde(default)]
    pub regime: Option<Vec<String>>,
}

fn schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub command: Command,
    pub config: ScenarioConfig,
    #[serde(default)]
    pub grid: Option<Grid>,
    #[serde(default)]
    pub options: serde_json::Value,
    #[serde(default)]
    pub format: Format,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// `q` as a number or the string `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QSpec {
    Num(f64),
    Named(String),
}

impl QSpec {
    fn value(&self) -> Result<f64> {
        match self {
            QSpec::Num(v) => Ok(*v),
            QSpec::Named(s) if s == "inf" || s == "infinity" => Ok(f64::INFINITY),
            QSpec::Named(s) => Err(Error::Config(format!("q must be a number or \"inf\", got {s:?}"))),
        }
    }
}

impl Default for QSpec {
    fn default() -> Self {
        QSpec::Num(4.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateOptions {
    pub reps: usize,
    pub gaussian_draws: usize,
    pub grid: usize,
    pub rects: usize,
    pub with_bound: bool,
    pub q: QSpec,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        let c = CurveOptions::default();
        SimulateOptions {
            reps: c.reps,
            gaussian_draws: c.gaussian_draws,
            grid: c.grid,
            rects: c.rects,
            with_bound: false,
            q: QSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsOptions {
    pub q: QSpec,
    pub outer: usize,
    pub mc_budget: usize,
    /// Defaults to the scenario's own form.
    pub form: Option<Form>,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        let d = DeltaOptions::default();
        BoundsOptions { q: QSpec::default(), outer: d.outer, mc_budget: d.mc_budget, form: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    Max,
    Rosenthal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditCliOptions {
    pub kind: AuditKind,
    pub r: usize,
    pub q: f64,
    pub reps: usize,
    pub nonneg: bool,
    pub scale: f64,
}

impl Default for AuditCliOptions {
    fn default() -> Self {
        AuditCliOptions { kind: AuditKind::Max, r: 2, q: 4.0, reps: AuditOptions::default().reps, nonneg: false, scale: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmdOptions {
    pub rep: u64,
    pub permutations: usize,
    pub alpha: f64,
}

impl Default for MmdOptions {
    fn default() -> Self {
        MmdOptions { rep: 0, permutations: 499, alpha: 0.05 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorOptions {
    pub rep: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlueCliOptions {
    pub reps: usize,
    pub outer: usize,
    pub inner: usize,
    pub gaussian_draws: usize,
    pub grid: usize,
    pub rects: usize,
    pub offset: f64,
}

impl Default for GlueCliOptions {
    fn default() -> Self {
        let g = GluingOptions::default();
        GlueCliOptions {
            reps: g.reps,
            outer: g.outer,
            inner: g.inner,
            gaussian_draws: g.gaussian_draws,
            grid: g.grid,
            rects: g.rects,
            offset: g.offset,
        }
    }
}

fn options<T: DeserializeOwned + Default>(v: &serde_json::Value) -> Result<T> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("invalid options: {e}")))
}

fn required_kind(c: Command) -> Option<ScenarioKind> {
    match c {
        Command::Mmd => Some(ScenarioKind::TwoSample),
        Command::Jive2 => Some(ScenarioKind::WeakIv),
        Command::Plm => Some(ScenarioKind::Plm),
        Command::Glue => Some(ScenarioKind::SepExchangeable),
        _ => None,
    }
}

/// One grid point.
#[derive(Debug, Clone)]
pub struct Point {
    pub label: String,
    pub config: ScenarioConfig,
}

impl ExperimentPlan {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid plan: {e}")))
    }

    /// Cartesian product of the grid lists; the base config alone when no
    /// grid is given, nothing when a list is empty.
    pub fn points(&self) -> Result<Vec<Point>> {
        let g = self.grid.clone().unwrap_or_default();
        let ns = g.n.unwrap_or_else(|| vec![self.config.n]);
        let ps = g.p.unwrap_or_else(|| vec![self.config.p]);
        let regimes: Vec<Option<String>> = match g.regime {
            Some(r) => r.into_iter().map(Some).collect(),
            None => vec![None],
        };
        let mut out = Vec::new();
        for &n in &ns {
            for &p in &ps {
                for r in &regimes {
                    let mut c = self.config.clone();
                    c.n = n;
                    c.p = p;
                    let mut label = format!("n{n}_p{p}");
                    if let Some(r) = r {
                        let obj = match &mut c.params {
                            serde_json::Value::Object(m) => m,
                            v => {
                                *v = serde_json::Value::Object(Default::default());
                                v.as_object_mut().expect("object")
                            }
                        };
                        obj.insert("regime".into(), serde_json::Value::String(r.clone()));
                        label.push('_');
                        label.push_str(r);
                    }
                    out.push(Point { label, config: c });
                }
            }
        }
        Ok(out)
    }

    /// Checks everything that can be checked without computing.
    pub fn validate(&self) -> Result<Vec<Point>> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match self.command {
            Command::Simulate => {
                options::<SimulateOptions>(&self.options)?.q.value()?;
            }
            Command::Bounds => {
                options::<BoundsOptions>(&self.options)?.q.value()?;
            }
            Command::Audit => {
                let a: AuditCliOptions = options(&self.options)?;
                if !(1..=2).contains(&a.r) {
                    return Err(Error::Unsupported(format!("audits support r = 1 or 2, got {}", a.r)));
                }
            }
            Command::Mmd => {
                options::<MmdOptions>(&self.options)?;
            }
            Command::Jive2 | Command::Plm => {
                options::<EstimatorOptions>(&self.options)?;
            }
            Command::Glue => {
                options::<GlueCliOptions>(&self.options)?;
            }
        }
        if let Some(k) = required_kind(self.command) {
            if self.config.scenario_kind != k {
                return Err(Error::Config(format!(
                    "command {:?} needs a {} scenario, got {}",
                    self.command,
                    k.name(),
                    self.config.scenario_kind.name()
                )));
            }
        }
        let pts = self.points()?;
        for p in &pts {
            p.config.validate().map_err(|e| Error::Config(format!("grid point {}: {e}", p.label)))?;
        }
        Ok(pts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointRecord {
    pub label: String,
    pub files: Vec<String>,
    pub status: String,
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_secs: f64,
    pub plan: ExperimentPlan,
    pub points: Vec<PointRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)?;
        serde_json::from_str(&s).map_err(|e| Error::Config(format!("invalid manifest {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub manifest: Manifest,
}

fn severity(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_NUMERICAL
    }
}

pub fn exit_code(e: &Error) -> i32 {
    severity(e)
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

#[derive(Serialize)]
struct AuditRow {
    inequality_id: bounds::Inequality,
    n: usize,
    p: usize,
    q: f64,
    r: usize,
    lhs: f64,
    lhs_se: f64,
    rhs: f64,
    rhs_se: f64,
    ratio: f64,
}

impl From<&AuditReport> for AuditRow {
    fn from(a: &AuditReport) -> Self {
        AuditRow {
            inequality_id: a.inequality_id,
            n: a.n,
            p: a.p,
            q: a.q,
            r: a.r,
            lhs: a.lhs,
            lhs_se: a.lhs_se,
            rhs: a.rhs,
            rhs_se: a.rhs_se,
            ratio: a.ratio,
        }
    }
}

fn ext(f: Format) -> &'static str {
    match f {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

/// Distance of `W` to its Gaussian analogue for one configuration, with the
/// composite bound when requested. Shared by the CLI and direct callers.
pub fn curve_point(config: &ScenarioConfig, o: &SimulateOptions) -> Result<CurvePoint> {
    let opts = CurveOptions { reps: o.reps, gaussian_draws: o.gaussian_draws, grid: o.grid, rects: o.rects };
    let (d, oracle, sigma) = gauss::distance_point(config, &opts)?;
    let bound_composite = if o.with_bound {
        let form = config.build()?.form;
        let dopts = DeltaOptions { q: o.q.value()?, seed: config.seed, ..DeltaOptions::default() };
        bounds::delta_report(&oracle, &sigma, form, &dopts)?.composite_bound
    } else {
        f64::NAN
    };
    Ok(CurvePoint {
        n: config.n,
        p: config.p,
        regime: gauss::curve_label(config),
        distance: d.value,
        se: d.se,
        bound_composite,
    })
}

fn two_sample_data(sample: &IndexedSample, n1: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let xs = (0..n1).map(|i| sample.x(i).to_vec()).collect();
    let ys = (n1..sample.n()).map(|i| sample.x(i).to_vec()).collect();
    (xs, ys)
}

/// Run one grid point, writing into `dir`. Returns the written file names.
pub fn run_point(command: Command, raw_options: &serde_json::Value, format: Format, config: &ScenarioConfig, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut out = |name: &str| {
        files.push(name.to_string());
        dir.join(name)
    };
    match command {
        Command::Simulate => {
            let o: SimulateOptions = options(raw_options)?;
            let pt = curve_point(config, &o)?;
            let path = out(&format!("distance_curve.{}", ext(format)));
            match format {
                Format::Csv => gauss::write_curve_csv(&[pt], create(&path)?)?,
                Format::Json => write_json(&path, &pt)?,
            }
        }
        Command::Bounds => {
            let o: BoundsOptions = options(raw_options)?;
            let sc = config.build()?;
            let oracle = sc.oracle()?;
            let form = o.form.unwrap_or(sc.form);
            let sigma: Vec<f64> = (0..sc.p()).map(|j| oracle.variance(j, form).map(f64::sqrt)).collect::<Result<_>>()?;
            let dopts = DeltaOptions { q: o.q.value()?, outer: o.outer, mc_budget: o.mc_budget, seed: config.seed, ..DeltaOptions::default() };
            let rep = bounds::delta_report(&oracle, &sigma, form, &dopts)?;
            let path = out(&format!("delta_report.{}", ext(format)));
            match format {
                Format::Csv => rep.write_csv(create(&path)?)?,
                Format::Json => write_json(&path, &rep)?,
            }
        }
        Command::Audit => {
            let o: AuditCliOptions = options(raw_options)?;
            let sc = config.build()?;
            let fam = match o.r {
                1 => AuditFamily::centered_linear(sc.marginals.clone(), config.p)?,
                2 => AuditFamily::centered_product(sc.marginals.clone(), config.p)?,
                r => return Err(Error::Unsupported(format!("audits support r = 1 or 2, got {r}"))),
            };
            let fam = if o.scale != 1.0 { fam.scaled(o.scale) } else { fam };
            let aopts = AuditOptions { reps: o.reps, seed: config.seed };
            let reports = match o.kind {
                AuditKind::Max if o.nonneg => vec![bounds::audit_max_inequality(&fam.squared()?, o.q, true, &aopts)?],
                AuditKind::Max => vec![bounds::audit_max_inequality(&fam, o.q, false, &aopts)?],
                AuditKind::Rosenthal => bounds::audit_rosenthal(&fam, &aopts)?,
            };
            let path = out(&format!("audit_report.{}", ext(format)));
            match format {
                Format::Csv => {
                    let mut wr = csv::Writer::from_writer(create(&path)?);
                    for r in &reports {
                        wr.serialize(AuditRow::from(r))?;
                    }
                    wr.flush()?;
                }
                Format::Json => write_json(&path, &reports)?,
            }
        }
        Command::Mmd => {
            let o: MmdOptions = options(raw_options)?;
            let sc = config.build()?;
            let Design::TwoSample { n1, bandwidths, .. } = sc.design.as_ref() else {
                return Err(Error::Config("mmd needs a two_sample scenario".into()));
            };
            let (xs, ys) = two_sample_data(&sc.sample(o.rep), *n1);
            let mut grid = bandwidths.clone();
            grid.sort_by(|a, b| a.total_cmp(b));
            let res = apps::mmd_adaptive_test(&xs, &ys, &grid, o.permutations, o.alpha, config.seed)?;
            let path = out(&format!("mmd_result.{}", ext(format)));
            match format {
                Format::Csv => res.write_csv(create(&path)?)?,
                Format::Json => write_json(&path, &res)?,
            }
        }
        Command::Jive2 | Command::Plm => {
            let o: EstimatorOptions = options(raw_options)?;
            let sc = config.build()?;
            let sample = sc.sample(o.rep);
            let res = if command == Command::Jive2 {
                apps::jive2(&apps::iv_blocks(&sc, &sample)?)?
            } else {
                apps::plm(&apps::plm_blocks(&sc, &sample)?)?
            };
            let path = out(&format!("estimator_result.{}", ext(format)));
            match format {
                Format::Csv => res.write_csv(create(&path)?)?,
                Format::Json => write_json(&path, &res)?,
            }
        }
        Command::Glue => {
            let o: GlueCliOptions = options(raw_options)?;
            let g = GluingOptions {
                reps: o.reps,
                outer: o.outer,
                inner: o.inner,
                gaussian_draws: o.gaussian_draws,
                grid: o.grid,
                rects: o.rects,
                offset: o.offset,
            };
            let rep = apps::sep_exchangeable_pipeline(config, &g)?;
            write_json(&out("gluing_report.json"), &rep)?;
        }
    }
    Ok(files)
}

const MOMENT_TRIALS: usize = 2000;

/// Non-fatal findings about a point's kernels.
fn point_warnings(config: &ScenarioConfig) -> Vec<String> {
    let Ok(sc) = config.build() else {
        return Vec::new();
    };
    match kernels::check_fourth_moments(&sc.kernels, &sc.marginals, MOMENT_TRIALS, config.seed) {
        Ok(c) if !c.finite => vec![format!(
            "kernel {} has a non-finite empirical fourth moment over {} draws; bounds assume L4 kernels",
            c.worst, c.trials
        )],
        _ => Vec::new(),
    }
}

/// Execute a validated plan into `out_dir`. Point failures are recorded and
/// the grid continues; the exit code is the most severe failure seen.
pub fn run(plan: &ExperimentPlan, out_dir: &Path, threads: usize) -> Result<RunOutcome> {
    let start = Instant::now();
    let points = plan.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(points.len());
    let mut exit = EXIT_OK;
    for pt in &points {
        let dir = out_dir.join(&pt.label);
        let warnings = point_warnings(&pt.config);
        match run_point(plan.command, &plan.options, plan.format, &pt.config, &dir) {
            Ok(files) => records.push(PointRecord {
                label: pt.label.clone(),
                files: files.iter().map(|f| format!("{}/{}", pt.label, f)).collect(),
                status: "ok".into(),
                error: None,
                warnings,
            }),
            Err(e) => {
                exit = exit.max(severity(&e));
                let status = if severity(&e) == EXIT_VALIDATION { "validation_error" } else { "numerical_error" };
                write_json(&dir.join("error.json"), &serde_json::json!({ "status": status, "error": e.to_string() }))?;
                records.push(PointRecord {
                    label: pt.label.clone(),
                    files: vec![format!("{}/error.json", pt.label)],
                    status: status.into(),
                    error: Some(e.to_string()),
                    warnings,
                });
            }
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        tool: "hdu".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: plan.config.seed,
        threads,
        wall_time_secs: start.elapsed().as_secs_f64(),
        plan: plan.clone(),
        points: records,
    };
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(RunOutcome { exit_code: exit, manifest })
}
