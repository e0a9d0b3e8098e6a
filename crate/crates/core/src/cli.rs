//! Batch command-line front end.
//!
//! A run reads one JSON [`RunConfig`], performs one command and writes CSV/JSON artifacts
//! to an output directory. Every artifact starts with `#` header lines carrying the crate
//! version, the SHA-256 of the canonical config, quadrature settings and tolerances; the
//! timestamp is the last header line so that bodies of repeated runs compare equal.
//!
//! Exit statuses: `0` success, `1` invalid input, `2` numerical failure (quadrature guard
//! or tolerance breach). Failures also print an error JSON naming the offending field.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mie::oracle_suite;
use crate::plasmon::{almost_sure_statistic, localization_scan, plasmon_field, probe_cloud, PlasmonMode};
use crate::potentials::{assemble_all, PolarRule};
use crate::scatter::{sweep, sweep_csv, SweepConfig};
use crate::specfun::{cnorm3, Vec3};
use crate::spectral::{calderon_residual, field_spectrum, np_spectrum, CalderonKind, SpectralOperator};
use crate::surface::{ShCoeffs, SurfaceGrid, SurfaceSpec, TangentField};

/// Command-line arguments.
#[derive(Debug, Parser)]
#[command(name = "mnp", version, about = "NP/MNP spectra, plasmon localization and scattering sweeps")]
pub struct Args {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config's `output`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the command's default acceptance tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Worker threads.
    #[arg(long, env = "MNP_THREADS")]
    pub threads: Option<usize>,
    /// Seed for randomized checks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print build and quadrature provenance and exit.
    #[arg(long)]
    pub provenance: bool,
}

/// Available commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Spectrum,
    Calderon,
    Plasmon,
    Decay,
    Scatter,
    MieCheck,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Calderon => "calderon",
            Command::Plasmon => "plasmon",
            Command::Decay => "decay",
            Command::Scatter => "scatter",
            Command::MieCheck => "mie-check",
        }
    }

    fn default_tol(self) -> f64 {
        match self {
            Command::Spectrum => 1e-8,
            Command::Calderon => 1e-5,
            Command::Plasmon => 1e-3,
            Command::Decay => 0.05,
            Command::Scatter => 1e-12,
            Command::MieCheck => 1e-6,
        }
    }
}

/// A run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub surface: SurfaceSpec,
    #[serde(rename = "L")]
    pub l: usize,
    /// Command-specific parameters.
    #[serde(default)]
    pub params: Value,
    #[serde(default)]
    pub output: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalderonParams {
    #[serde(default = "ten")]
    samples: usize,
    #[serde(default = "default_decay")]
    decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlasmonParams {
    #[serde(default = "one")]
    omega: f64,
    #[serde(default = "ten")]
    modes: usize,
    points: Vec<Vec3>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecayParams {
    #[serde(default = "one")]
    omega: f64,
    #[serde(default = "fifty")]
    n_points: usize,
    #[serde(default = "half")]
    distance: f64,
    #[serde(default = "half")]
    kappa: f64,
    /// `σ` grid relative to the ℓ² norm of the sequence.
    #[serde(default = "default_sigma")]
    sigma_rel: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MieParams {
    #[serde(default = "five")]
    n_max: usize,
    #[serde(default = "one")]
    k: f64,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn ten() -> usize {
    10
}
fn five() -> usize {
    5
}
fn fifty() -> usize {
    50
}
fn default_decay() -> f64 {
    2.0
}
fn default_sigma() -> Vec<f64> {
    vec![1.0, 0.5]
}

/// Extract the field name from a serde error message.
fn serde_field(msg: &str) -> String {
    for key in ["missing field `", "unknown field `", "unknown variant `"] {
        if let Some(i) = msg.find(key) {
            let rest = &msg[i + key.len()..];
            if let Some(j) = rest.find('`') {
                return if key.starts_with("unknown variant") {
                    "command".to_string()
                } else {
                    rest[..j].to_string()
                };
            }
        }
    }
    "config".to_string()
}

fn parse_json<T: for<'de> Deserialize<'de>>(v: Value, prefix: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| {
        let msg = e.to_string();
        let field = serde_field(&msg);
        let field = if prefix.is_empty() { field } else { format!("{prefix}.{field}") };
        Error::InvalidInput { field, reason: msg }
    })
}

/// Parse and validate a configuration from JSON text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::InvalidInput {
        field: "config".into(),
        reason: e.to_string(),
    })?;
    let cfg: RunConfig = parse_json(v, "")?;
    if cfg.l == 0 || cfg.l > 40 {
        return Err(Error::invalid("L", "must lie in 1..=40"));
    }
    if cfg.surface.l_quad < cfg.l || cfg.surface.l_quad > 96 {
        return Err(Error::invalid("surface.L_quad", "must lie in L..=96"));
    }
    if cfg.surface.radius.is_empty() {
        return Err(Error::invalid("surface.radius", "must list at least one coefficient"));
    }
    Ok(cfg)
}

/// SHA-256 of the canonical config serialization, as lowercase hex.
pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).unwrap_or_default();
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Settings recorded in every artifact header.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub l: usize,
    pub l_quad: usize,
    pub scheme: String,
    pub tol: f64,
    pub seed: u64,
}

/// Build metadata, quadrature settings and tolerances as `#` header lines (without the
/// timestamp).
pub fn report_version_and_provenance(p: &Provenance) -> String {
    format!(
        "# mnp {}\n# command={} config_sha256={}\n# L={} L_quad={} scheme={} tol={:e} seed={}\n",
        p.version, p.command, p.config_sha256, p.l, p.l_quad, p.scheme, p.tol, p.seed
    )
}

fn timestamp_line() -> String {
    let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("# generated_unix={t}\n")
}

fn write_artifact(dir: &Path, name: &str, header: &str, body: &str) -> Result<()> {
    std::fs::write(dir.join(name), format!("{header}{}{body}", timestamp_line()))?;
    Ok(())
}

fn write_report(dir: &Path, name: &str, prov: &Provenance, report: Value) -> Result<()> {
    let v = json!({ "provenance": prov, "report": report });
    std::fs::write(dir.join(name), serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

/// Outcome of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Execute a configuration, writing artifacts into `out`.
pub fn run(cfg: &RunConfig, out: &Path, tol: Option<f64>, seed: u64) -> Result<RunOutcome> {
    let grid = cfg.surface.build()?;
    let tol = tol.unwrap_or_else(|| cfg.command.default_tol());
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let prov = Provenance {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: cfg.command.name().to_string(),
        config_sha256: config_hash(cfg),
        l: cfg.l,
        l_quad: cfg.surface.l_quad,
        scheme: PolarRule::for_grid(&grid, cfg.l).scheme_id(),
        tol,
        seed,
    };
    std::fs::create_dir_all(out)?;
    let header = report_version_and_provenance(&prov);
    let base = cfg.command.name();
    let csv = format!("{base}.csv");
    let js = format!("{base}.json");
    let params = if cfg.params.is_null() { json!({}) } else { cfg.params.clone() };
    let (summary, failure) = match cfg.command {
        Command::Spectrum => {
            let ops = assemble_all(&grid, cfg.l)?;
            let k = np_spectrum(&ops)?;
            let mc = field_spectrum(&ops, SpectralOperator::MCurl)?;
            let mg = field_spectrum(&ops, SpectralOperator::MstarGrad)?;
            let mut body = String::from("operator,j,lambda\n");
            for (name, set) in [("Kstar", &k), ("M_curl", &mc), ("Mstar_grad", &mg)] {
                for (j, l) in set.eigenvalues.iter().enumerate() {
                    body.push_str(&format!("{name},{j},{l:.15e}\n"));
                }
            }
            write_artifact(out, &csv, &header, &body)?;
            let cl = k.clusters(tol);
            let top = k.eigenvalues.first().copied().unwrap_or(f64::NAN);
            write_report(
                out,
                &js,
                &prov,
                json!({ "kstar_top": top, "kstar_second_cluster": k.eigenvalues.get(1), "n_clusters": cl.iter().max().map(|c| c + 1),
                        "non_hermiticity": k.non_hermiticity }),
            )?;
            (format!("spectrum: {} K* eigenvalues, top {top:.12}", k.len()), None)
        }
        Command::Calderon => {
            let p: CalderonParams = parse_json(params, "params")?;
            if p.samples == 0 {
                return Err(Error::invalid("params.samples", "must be positive"));
            }
            let ops = assemble_all(&grid, cfg.l)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut body = String::from("sample,kind,residual\n");
            let mut worst: f64 = 0.0;
            for s in 0..p.samples {
                let c = ShCoeffs::random(cfg.l, &mut rng, p.decay, true);
                let g = ShCoeffs::random(cfg.l, &mut rng, p.decay, true);
                let rc = calderon_residual(CalderonKind::Curl, &TangentField::curl(c), &ops, &grid)?;
                let rg = calderon_residual(CalderonKind::Grad, &TangentField::gradient(g), &ops, &grid)?;
                worst = worst.max(rc).max(rg);
                body.push_str(&format!("{s},curl,{rc:.6e}\n{s},grad,{rg:.6e}\n"));
            }
            write_artifact(out, &csv, &header, &body)?;
            write_report(out, &js, &prov, json!({ "max_residual": worst, "pass": worst <= tol }))?;
            let fail = (worst > tol).then(|| format!("Calderon residual {worst:.3e} exceeds tolerance {tol:.1e}"));
            (format!("calderon: max residual {worst:.3e}"), fail)
        }
        Command::Plasmon => {
            let p: PlasmonParams = parse_json(params, "params")?;
            let modes = build_modes(&grid, cfg.l, p.omega, p.modes)?;
            let mut body = String::from("mode,lambda,tau,point,x,y,z,abs_e,abs_h\n");
            for (j, m) in modes.iter().enumerate() {
                for (i, x) in p.points.iter().enumerate() {
                    let (e, h) = plasmon_field(m, x, Some(&grid))?;
                    body.push_str(&format!(
                        "{j},{:.15e},{:.15e},{i},{},{},{},{:.15e},{:.15e}\n",
                        m.lambda,
                        m.tau,
                        x[0],
                        x[1],
                        x[2],
                        cnorm3(&e),
                        cnorm3(&h)
                    ));
                }
            }
            write_artifact(out, &csv, &header, &body)?;
            write_report(out, &js, &prov, json!({ "modes": modes.len(), "points": p.points.len() }))?;
            (format!("plasmon: {} modes at {} points", modes.len(), p.points.len()), None)
        }
        Command::Decay => {
            let p: DecayParams = parse_json(params, "params")?;
            let modes = build_modes(&grid, cfg.l, p.omega, usize::MAX)?;
            let pts = probe_cloud(&grid, p.n_points, p.distance)?;
            let rep = localization_scan(&modes, &pts, p.distance * 0.99, Some(&grid))?;
            let c = &rep.e_norms;
            let n = c.len();
            let l2 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sig: Vec<f64> = p.sigma_rel.iter().map(|s| s * l2).collect();
            let ns: Vec<usize> = [n / 4, n / 2, n].into_iter().filter(|&v| v > 0).collect();
            let stat = almost_sure_statistic(c, p.kappa, &sig, &ns, tol)?;
            write_artifact(out, &csv, &header, &rep.to_csv())?;
            write_report(
                out,
                &js,
                &prov,
                json!({ "partial_sums": rep.partial_sums, "last_quartile_growth": rep.last_quartile_growth,
                        "plateau": rep.plateau, "statistic": stat }),
            )?;
            let fail = (!rep.plateau).then(|| format!("partial sums grow by {:.3e} over the last quartile", rep.last_quartile_growth));
            (
                format!("decay: plateau {} (growth {:.2e}), statistic verdict {}", rep.plateau, rep.last_quartile_growth, stat.verdict),
                fail,
            )
        }
        Command::Scatter => {
            let p: SweepConfig = parse_json(params, "params")?;
            let rows = sweep(&grid, cfg.l, &p)?;
            write_artifact(out, &csv, &header, &sweep_csv(&rows))?;
            write_report(out, &js, &prov, json!({ "rows": rows.len() }))?;
            (format!("scatter: {} sweep points", rows.len()), None)
        }
        Command::MieCheck => {
            let p: MieParams = parse_json(params, "params")?;
            let rows = oracle_suite(&grid, p.n_max, p.k, tol)?;
            let mut body = String::from("l,op,side,max_rel_err,pass\n");
            for r in &rows {
                body.push_str(&format!(
                    "{},{:?},{},{:.6e},{}\n",
                    r.l,
                    r.op,
                    if r.exterior { "exterior" } else { "interior" },
                    r.max_rel_err,
                    r.pass
                ));
            }
            write_artifact(out, &csv, &header, &body)?;
            let passed = rows.iter().filter(|r| r.pass).count();
            let msg = format!("{passed}/{} exact-formula oracles pass ≤ {tol:e}", rows.len());
            write_report(out, &js, &prov, json!({ "rows": rows, "summary": msg }))?;
            let fail = (passed < rows.len()).then(|| msg.clone());
            (msg, fail)
        }
    };
    let files = vec![out.join(&csv), out.join(&js)];
    if let Some(f) = failure {
        return Err(Error::Numerical(f));
    }
    Ok(RunOutcome { files, summary })
}

fn build_modes(grid: &SurfaceGrid, l: usize, omega: f64, count: usize) -> Result<Vec<PlasmonMode>> {
    if !(omega > 0.0) {
        return Err(Error::invalid("params.omega", "must be positive"));
    }
    let ops = assemble_all(grid, l)?;
    let set = field_spectrum(&ops, SpectralOperator::MCurl)?;
    (0..set.len().min(count)).map(|j| PlasmonMode::from_spectrum(&set, j, omega)).collect()
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Machine-readable error description.
pub fn error_json(e: &Error) -> Value {
    let field = match e {
        Error::InvalidInput { field, .. } => Some(field.clone()),
        Error::Json(err) => Some(serde_field(&err.to_string())),
        _ => None,
    };
    json!({
        "error": e.to_string(),
        "field": field,
        "exit_code": exit_code(e),
    })
}

/// Entry point used by the binary; returns the process exit status.
pub fn main_with_args(args: Args) -> i32 {
    if let Some(n) = args.threads {
        if n == 0 {
            let e = Error::invalid("threads", "must be positive");
            eprintln!("{}", error_json(&e));
            return 1;
        }
        // A global pool can only be installed once per process; later calls are ignored.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = (|| -> Result<RunOutcome> {
        let path = args.config.as_ref().ok_or_else(|| Error::invalid("config", "--config PATH is required"))?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::invalid("config", e.to_string()))?;
        let cfg = parse_config(&text)?;
        if args.provenance {
            let grid = cfg.surface.build()?;
            let prov = Provenance {
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: cfg.command.name().to_string(),
                config_sha256: config_hash(&cfg),
                l: cfg.l,
                l_quad: cfg.surface.l_quad,
                scheme: PolarRule::for_grid(&grid, cfg.l).scheme_id(),
                tol: args.tol.unwrap_or_else(|| cfg.command.default_tol()),
                seed: args.seed,
            };
            return Ok(RunOutcome {
                files: Vec::new(),
                summary: report_version_and_provenance(&prov),
            });
        }
        let out = args
            .out
            .clone()
            .or_else(|| cfg.output.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        run(&cfg, &out, args.tol, args.seed)
    })();
    match result {
        Ok(o) => {
            println!("{}", o.summary.trim_end());
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_cfg(command: &str, extra: &str) -> String {
        format!(r#"{{"command":"{command}","surface":{{"radius":[[0,0,3.5449077018110318,0]],"L_quad":14}},"L":6{extra}}}"#)
    }

    #[test]
    fn missing_field_is_named() {
        let e = parse_config(r#"{"command":"spectrum","surface":{"radius":[[0,0,3.5,0]],"L_quad":8}}"#).unwrap_err();
        assert_eq!(exit_code(&e), 1);
        assert_eq!(error_json(&e)["field"], "L");
        let e = parse_config(&sphere_cfg("spectra", "")).unwrap_err();
        assert_eq!(error_json(&e)["field"], "command");
    }

    #[test]
    fn spectrum_run_is_reproducible() {
        let cfg = parse_config(&sphere_cfg("spectrum", "")).unwrap();
        let dir = std::env::temp_dir().join(format!("mnp-cli-{}", std::process::id()));
        let a = dir.join("a");
        let b = dir.join("b");
        run(&cfg, &a, Some(1e-7), 1).unwrap();
        run(&cfg, &b, Some(1e-7), 1).unwrap();
        let strip = |p: PathBuf| -> String {
            std::fs::read_to_string(p)
                .unwrap()
                .lines()
                .filter(|l| !l.starts_with("# generated_unix"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let ta = strip(a.join("spectrum.csv"));
        assert_eq!(ta, strip(b.join("spectrum.csv")));
        assert!(ta.contains("L_quad=14") && ta.contains("scheme=rotated-polar-gl") && ta.contains("tol=1e-7"));
        let first = ta.lines().find(|l| l.starts_with("Kstar,0,")).unwrap();
        let v: f64 = first.split(',').nth(2).unwrap().parse().unwrap();
        assert!((v - 0.5).abs() < 1e-8);
        std::fs::remove_dir_all(&dir).ok();
    }
}
