//! Configuration, presets and result files for the `simulate` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spinport_core::algebra::DenseVector;
use spinport_core::engines::gauss::{covariance_kernel, CovarianceState};
use spinport_core::engines::Engine;
use spinport_core::metrics::{self, FitResult, HusimiGrid};
use spinport_core::model::{khz_to_rad, rad_to_khz, EnsembleLabel, EnsembleSpec, SystemSpec};
use spinport_core::protocol::{self, ProtocolConfig, ProtocolResult, TmsMode, WitnessModel};
use spinport_core::states::{InputStateSpec, Twist};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(#[from] spinport_core::error::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// Process exit code: 2 for configuration problems, 3 for failures
    /// during the run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) | CliError::Io { .. } => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    WitnessScan,
    Teleport,
    ScalingSweep,
    EngineCompare,
    OutcomeGrid,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::WitnessScan, Preset::Teleport, Preset::ScalingSweep, Preset::EngineCompare, Preset::OutcomeGrid];

    pub fn name(self) -> &'static str {
        match self {
            Preset::WitnessScan => "witness-scan",
            Preset::Teleport => "teleport",
            Preset::ScalingSweep => "scaling-sweep",
            Preset::EngineCompare => "engine-compare",
            Preset::OutcomeGrid => "outcome-grid",
        }
    }

    pub fn parse(s: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown preset `{s}` (expected one of {})", Self::ALL.map(|p| p.name()).join(", "))))
    }
}

/// One ensemble in kHz units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n: usize,
    /// Dressed-state Rabi frequency, kHz (the code multiplies by 2π).
    pub omega_khz: f64,
    pub g_khz: f64,
    pub orientation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub a: EnsembleConfig,
    pub b: EnsembleConfig,
    pub c: EnsembleConfig,
    pub delta_m_khz: f64,
    pub n_max: usize,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::from_spec(&SystemSpec::reference(70))
    }
}

impl SystemConfig {
    pub fn from_spec(sys: &SystemSpec) -> Self {
        let e = |x: &EnsembleSpec| EnsembleConfig { n: x.n, omega_khz: rad_to_khz(x.omega), g_khz: rad_to_khz(x.g), orientation: x.orientation };
        SystemConfig { a: e(&sys.ensembles[0]), b: e(&sys.ensembles[1]), c: e(&sys.ensembles[2]), delta_m_khz: rad_to_khz(sys.delta_m), n_max: sys.n_max }
    }

    pub fn to_spec(&self) -> SystemSpec {
        let e = |label, x: &EnsembleConfig| EnsembleSpec { label, n: x.n, omega: khz_to_rad(x.omega_khz), g: khz_to_rad(x.g_khz), orientation: x.orientation };
        SystemSpec {
            ensembles: [e(EnsembleLabel::A, &self.a), e(EnsembleLabel::B, &self.b), e(EnsembleLabel::C, &self.c)],
            delta_m: khz_to_rad(self.delta_m_khz),
            n_max: self.n_max,
        }
    }

    pub fn set_n_ions(&mut self, n: usize) {
        self.a.n = n;
        self.b.n = n;
        self.c.n = n;
    }
}

/// Grid of the witness presets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub r_max: f64,
    pub step: f64,
    /// Also run the full spin–phonon model (slow at large N̄).
    pub full_model: bool,
    pub include_spectator: bool,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig { r_max: 1.6, step: 0.05, full_model: true, include_spectator: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { n_values: (1..=7).map(|k| 10 * k).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<Preset>,
    pub out: Option<PathBuf>,
    /// Overrides `protocol.seed` when set.
    pub seed: Option<u64>,
    /// Overrides `protocol.engine` when set.
    pub engine: Option<Engine>,
    pub system: SystemConfig,
    pub protocol: ProtocolConfig,
    pub scan: ScanConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            out: None,
            seed: None,
            engine: None,
            system: SystemConfig::default(),
            protocol: ProtocolConfig::default(),
            scan: ScanConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Folds the top-level `seed`/`engine` into the protocol section and
    /// checks everything that can be checked before running.
    pub fn resolve(mut self) -> CliResult<Self> {
        if let Some(s) = self.seed {
            self.protocol.seed = s;
        }
        if let Some(e) = self.engine {
            self.protocol.engine = e;
        }
        self.seed = Some(self.protocol.seed);
        self.engine = Some(self.protocol.engine);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.system.to_spec().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.protocol.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.protocol.input.validate(self.system.c.n).map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.scan.step > 0.0 && self.scan.r_max > self.scan.step && self.scan.r_max.is_finite()) {
            return Err(CliError::Config(format!("scan needs 0 < step < r_max, got step {} and r_max {}", self.scan.step, self.scan.r_max)));
        }
        if self.sweep.n_values.is_empty() || self.sweep.n_values.contains(&0) {
            return Err(CliError::Config("sweep.n_values must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of this configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Reads a JSON config; an empty file gives the defaults.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    if text.trim().is_empty() {
        return Ok(ExperimentConfig::default());
    }
    serde_json::from_str(text).map_err(|e| CliError::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub engine: Option<Engine>,
    pub n_ions: Option<usize>,
    pub input: Option<String>,
    pub kc: Option<usize>,
    pub r: Option<f64>,
}

pub fn parse_engine(s: &str) -> CliResult<Engine> {
    match s {
        "ed" => Ok(Engine::Ed),
        "gauss" => Ok(Engine::Gauss),
        "dtwa" => Ok(Engine::Dtwa),
        _ => Err(CliError::Config(format!("unknown engine `{s}` (expected ed, gauss or dtwa)"))),
    }
}

impl Overrides {
    pub fn apply(&self, mut cfg: ExperimentConfig) -> CliResult<ExperimentConfig> {
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(e) = self.engine {
            cfg.engine = Some(e);
        }
        if let Some(n) = self.n_ions {
            cfg.system.set_n_ions(n);
        }
        if let Some(kind) = &self.input {
            cfg.protocol.input = match kind.as_str() {
                "sc" => InputStateSpec::sc(),
                "pdsc" => InputStateSpec::Pdsc { phi_c: 6f64.to_radians() },
                "ss" => InputStateSpec::Ss { twist: Twist::TargetDb(-4.15) },
                "dicke" => InputStateSpec::Dicke { k_c: self.kc.unwrap_or(1) },
                other => return Err(CliError::Config(format!("unknown input `{other}` (expected sc, pdsc, ss or dicke)"))),
            };
        } else if let Some(k) = self.kc {
            match &mut cfg.protocol.input {
                InputStateSpec::Dicke { k_c } => *k_c = k,
                _ => return Err(CliError::Config("--kc needs a Dicke input".into())),
            }
        }
        if let Some(r) = self.r {
            cfg.protocol.tms = TmsMode::FixedR { r };
        }
        cfg.resolve()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: Preset,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub files: Vec<FileEntry>,
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Collects written files for the manifest.
struct Writer {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Writer {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Writer { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.push(FileEntry { path: name.to_string(), bytes: bytes.len() as u64, sha256: hex(&Sha256::digest(bytes)) });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).expect("serializable");
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn csv(&mut self, name: &str, table: &Table) -> CliResult<()> {
        self.write(name, table.render().as_bytes())
    }
}

/// CSV with a fixed header; floats are written in shortest round-trip form.
pub struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Table { header: header.to_vec(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.header.len(), "row width");
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

fn f(x: f64) -> String {
    format!("{x:?}")
}

fn opt(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

fn husimi_table(grid: &HusimiGrid) -> Table {
    let mut t = Table::new(&["theta", "phi", "q"]);
    for (i, &th) in grid.theta.iter().enumerate() {
        for (j, &ph) in grid.phi.iter().enumerate() {
            t.row(vec![f(th), f(ph), f(grid.at(i, j))]);
        }
    }
    t
}

/// Writes the Husimi-Q of `state` on an `n_theta × n_phi` grid as
/// `theta,phi,q` CSV and returns the grid.
pub fn emit_husimi(state: &DenseVector, n_theta: usize, n_phi: usize, path: &Path) -> CliResult<HusimiGrid> {
    let grid = metrics::husimi_q(state, n_theta, n_phi)?;
    fs::write(path, husimi_table(&grid).render()).map_err(io_err(path))?;
    Ok(grid)
}

#[derive(Serialize)]
struct WitnessSummary {
    s_min_esm: f64,
    v_s_min_esm: f64,
    s_min_full_model: Option<f64>,
    v_s_min_full_model: Option<f64>,
    max_abs_difference: Option<f64>,
}

fn grid_min(grid: &[f64], v: &[f64]) -> (f64, f64) {
    grid.iter().zip(v).fold((f64::NAN, f64::INFINITY), |a, (&s, &x)| if x < a.1 { (s, x) } else { a })
}

fn witness_scan(cfg: &ExperimentConfig, w: &mut Writer, compare: bool) -> CliResult<()> {
    let sys = cfg.system.to_spec();
    let grid = protocol::r_grid(cfg.scan.r_max, cfg.scan.step);
    let esm = protocol::witness_scan(&sys, &grid, WitnessModel::Esm)?;
    let fm = if cfg.scan.full_model {
        Some(protocol::witness_scan(&sys, &grid, WitnessModel::Fm { include_spectator: cfg.scan.include_spectator })?)
    } else {
        None
    };
    let mut header = vec!["r", "v_s_esm", "v_s_fm"];
    let mut gauss = None;
    let mut dtwa = None;
    if compare {
        let p = protocol::tms_params(&sys);
        let k = covariance_kernel(&p)?;
        gauss = Some(grid.iter().map(|&s| Ok(CovarianceState::vacuum().evolve(&k, p.time_for(s))?.to_xp().witness())).collect::<CliResult<Vec<f64>>>()?);
        dtwa = Some(protocol::dtwa_witness(&sys, &grid, cfg.protocol.n_traj, cfg.protocol.seed, cfg.scan.include_spectator)?);
        header.extend(["v_s_gauss", "v_s_dtwa", "v_s_dtwa_stderr"]);
    }
    let mut t = Table::new(&header);
    for (i, &s) in grid.iter().enumerate() {
        let mut row = vec![f(s), f(esm[i]), opt(fm.as_ref().map(|v| v[i]))];
        if let (Some(g), Some(d)) = (&gauss, &dtwa) {
            row.extend([f(g[i]), f(d.v_s[i]), f(d.v_s_stderr[i])]);
        }
        t.row(row);
    }
    w.csv(if compare { "engine_compare.csv" } else { "witness_scan.csv" }, &t)?;
    let (s_e, v_e) = grid_min(&grid, &esm);
    let fm_min = fm.as_ref().map(|v| grid_min(&grid, v));
    let summary = WitnessSummary {
        s_min_esm: s_e,
        v_s_min_esm: v_e,
        s_min_full_model: fm_min.map(|m| m.0),
        v_s_min_full_model: fm_min.map(|m| m.1),
        max_abs_difference: fm.as_ref().map(|v| v.iter().zip(&esm).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)),
    };
    w.json("summary.json", &summary)
}

fn outcome_table(res: &ProtocolResult) -> Table {
    let mut t = Table::new(&["k_a", "k_c", "m_a", "m_c", "beta_z", "beta_y", "probability", "fidelity"]);
    for r in &res.records {
        t.row(vec![r.k_a.to_string(), r.k_c.to_string(), f(r.m_a), f(r.m_c), f(r.beta_z), f(r.beta_y), f(r.probability), f(r.fidelity)]);
    }
    t
}

fn teleport(cfg: &ExperimentConfig, w: &mut Writer, grid_only: bool) -> CliResult<()> {
    let sys = cfg.system.to_spec();
    let mut pc = cfg.protocol.clone();
    if grid_only {
        pc.outcomes = protocol::OutcomeMode::EnumerateAll;
    }
    let res = protocol::run_protocol(&sys, &pc)?;
    w.csv(if grid_only { "outcome_grid.csv" } else { "outcomes.csv" }, &outcome_table(&res))?;
    if !grid_only {
        let mut t = Table::new(&["r", "v_s"]);
        for &(s, v) in &res.witness_trace {
            t.row(vec![f(s), f(v)]);
        }
        w.csv("witness_trace.csv", &t)?;
        if let Some(d) = &res.diagnostics {
            if let Some(g) = &d.husimi_in {
                w.csv("husimi_input.csv", &husimi_table(g))?;
            }
            if let Some(g) = &d.husimi_out {
                w.csv("husimi_output.csv", &husimi_table(g))?;
            }
        }
    }
    // records go to the CSV; the summary keeps the scalar results
    let mut summary = res.clone();
    summary.records.clear();
    if let Some(d) = summary.diagnostics.as_mut() {
        d.husimi_in = None;
        d.husimi_out = None;
    }
    w.json("summary.json", &summary)
}

#[derive(Serialize)]
struct SweepSummary {
    input: InputStateSpec,
    points: Vec<(usize, f64)>,
    fit: Option<FitResult>,
    fit_error: Option<String>,
}

fn scaling_sweep(cfg: &ExperimentConfig, w: &mut Writer) -> CliResult<()> {
    let base = cfg.system.to_spec();
    let res = protocol::scaling_sweep(&base, &cfg.sweep.n_values, &cfg.protocol)?;
    let mut t = Table::new(&["n", "average_fidelity", "most_probable_fidelity", "s_tms", "v_s_at_tms"]);
    for (n, r) in &res {
        t.row(vec![n.to_string(), f(r.average_fidelity), opt(r.most_probable.as_ref().map(|m| m.fidelity)), f(r.s_tms), opt(r.v_s_at_tms)]);
    }
    w.csv("scaling_sweep.csv", &t)?;
    let points: Vec<(usize, f64)> = res.iter().map(|(n, r)| (*n, r.average_fidelity)).collect();
    let fit = metrics::scaling_fit(&points.iter().map(|&(n, x)| (n as f64, x)).collect::<Vec<_>>());
    let summary = SweepSummary { input: cfg.protocol.input.clone(), points, fit_error: fit.as_ref().err().map(|e| e.to_string()), fit: fit.ok() };
    w.json("fit.json", &summary)
}

/// Runs `preset`, writing tables, the resolved config and `manifest.json`
/// into `out`.
pub fn run_preset(preset: Preset, cfg: &ExperimentConfig, out: &Path) -> CliResult<RunManifest> {
    let started = now();
    let mut w = Writer::new(out)?;
    w.json("config.json", cfg)?;
    match preset {
        Preset::WitnessScan => witness_scan(cfg, &mut w, false)?,
        Preset::EngineCompare => witness_scan(cfg, &mut w, true)?,
        Preset::Teleport => teleport(cfg, &mut w, false)?,
        Preset::OutcomeGrid => teleport(cfg, &mut w, true)?,
        Preset::ScalingSweep => scaling_sweep(cfg, &mut w)?,
    }
    let manifest = RunManifest {
        preset,
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.protocol.seed,
        started_unix: started,
        finished_unix: now(),
        files: w.files.clone(),
    };
    let path = out.join("manifest.json");
    let mut s = serde_json::to_string_pretty(&manifest).expect("serializable");
    s.push('\n');
    fs::write(&path, s).map_err(io_err(&path))?;
    Ok(manifest)
}
