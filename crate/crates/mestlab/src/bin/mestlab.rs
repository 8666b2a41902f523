//! `mestlab` command-line interface.
//!
//! Exit codes: 0 success, 2 validation/input error, 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mestlab::design::{self, AssumptionThresholds, DesignMatrix, DesignSpec};
use mestlab::errors::{parse_error_model, ErrorModel};
use mestlab::harness::{self, ExperimentConfig, KsConfig};
use mestlab::io;
use mestlab::loo;
use mestlab::loss::parse_loss;
use mestlab::sensitivity;
use mestlab::solver::{self, SolverOptions};
use mestlab::MestError;

#[derive(Parser)]
#[command(name = "mestlab", version, about = "Regression M-estimation in the moderate p/n regime")]
struct Cli {
    /// Cap the rayon thread pool (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an M-estimator and write fit.json.
    Fit(FitArgs),
    /// Leave-one-predictor-out analysis.
    Loo(LooArgs),
    /// SOPI sensitivity moments per coordinate.
    Sensitivity(SensArgs),
    /// Design generation and assumption checking.
    Design {
        #[command(subcommand)]
        command: DesignCommand,
    },
    /// Confidence-interval coverage experiment.
    Coverage(ConfigArgs),
    /// Small-sample vs asymptotic-regime KS comparison.
    Ks(ConfigArgs),
    /// Delete-1 jackknife variance of one coordinate.
    Jackknife(JackknifeArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    response: PathBuf,
    #[arg(long, default_value = "huber(k=1.345, eps=0.05, delta=0.1)")]
    loss: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LooArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    response: PathBuf,
    #[arg(long, default_value = "huber(k=1.345, eps=0.05, delta=0.1)")]
    loss: String,
    /// Coordinates of interest, 1-based (`all` or e.g. `1,2,3`).
    #[arg(long, default_value = "all")]
    coords: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SensArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long, default_value = "huber(k=1.345, eps=0.05, delta=0.1)")]
    loss: String,
    #[arg(long, default_value = "gaussian(1.0)")]
    errors: String,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates of interest, 1-based.
    #[arg(long, default_value = "all")]
    coords: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum DesignCommand {
    /// Generate a design matrix CSV.
    Gen(DesignGenArgs),
    /// Run the assumption diagnostics on a design.
    Check(DesignCheckArgs),
}

#[derive(Args)]
struct DesignGenArgs {
    /// Family: iid(gaussian), iid(t(2)), elliptical(gaussian),
    /// matrix_normal, partial_hadamard, anova(2,4,9), fixed(path).
    #[arg(long)]
    family: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = false)]
    intercept: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DesignCheckArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long, default_value = "huber(k=1.345, eps=0.05, delta=0.1)")]
    loss: String,
    #[arg(long, default_value = "gaussian(1.0)")]
    errors: String,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates of interest, 1-based.
    #[arg(long, default_value = "all")]
    coords: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Plain key=value config file (see README for the grammar).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct JackknifeArgs {
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    response: PathBuf,
    #[arg(long, default_value = "huber(k=1.345, eps=0.05, delta=0.1)")]
    loss: String,
    /// 1-based coordinate.
    #[arg(long)]
    coord: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .is_err()
        {
            eprintln!("mestlab: could not configure {t} threads");
            return ExitCode::from(2);
        }
    }
    let start = Instant::now();
    match run(cli.command, start) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mestlab: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &MestError) -> u8 {
    match e {
        MestError::RankDeficient(_)
        | MestError::NoConvergence { .. }
        | MestError::FactorizationFailure(_)
        | MestError::TooManyFailures { .. } => 3,
        _ => 2,
    }
}

/// Parse `all` or a 1-based comma list into 0-based indices.
fn parse_coords(text: &str, p: usize, has_intercept: bool) -> Result<Vec<usize>, MestError> {
    let text = text.trim();
    if text == "all" {
        return Ok((usize::from(has_intercept)..p).collect());
    }
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let j: usize = part
            .parse()
            .map_err(|_| MestError::InvalidArgument(format!("bad coordinate {part:?}")))?;
        if j < 1 || j > p {
            return Err(MestError::InvalidArgument(format!(
                "coordinate {j} out of range 1..={p}"
            )));
        }
        out.push(j - 1);
    }
    if out.is_empty() {
        return Err(MestError::InvalidArgument("empty coordinate list".into()));
    }
    Ok(out)
}

fn load_design(path: &Path, coords: &str) -> Result<DesignMatrix, MestError> {
    let m = io::read_matrix(path)?;
    let has_intercept = (0..m.nrows()).all(|i| m[(i, 0)] == 1.0) && m.ncols() > 1;
    let jn = parse_coords(coords, m.ncols(), has_intercept)?;
    let anova = design::detect_anova(&m);
    let mut d = DesignMatrix::new(m, has_intercept, Some(jn))?;
    if let Some(group_sizes) = anova {
        d = d.with_family(design::FamilyTag::Anova { group_sizes });
    }
    Ok(d)
}

fn write_manifest(
    out: &Path,
    subcommand: &str,
    config: BTreeMap<String, String>,
    outputs: &[&[u8]],
    start: Instant,
) -> Result<(), MestError> {
    let manifest = io::Manifest {
        tool: "mestlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: subcommand.into(),
        config,
        content_hash: io::content_hash(outputs),
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    io::write_json(out, &manifest)
}

fn read_kv_config(path: &Path) -> Result<BTreeMap<String, String>, MestError> {
    let text = std::fs::read_to_string(path).map_err(|e| MestError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| MestError::Parse {
            path: path.display().to_string(),
            message: format!("line {}: expected key = value", lineno + 1),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn kv<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Option<&'a str> {
    map.get(key).map(String::as_str)
}

fn kv_parse<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, MestError> {
    match kv(map, key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| MestError::InvalidArgument(format!("bad value for {key}: {v:?}"))),
    }
}

fn run(command: Command, start: Instant) -> Result<(), MestError> {
    match command {
        Command::Fit(a) => {
            let d = load_design(&a.design, "all")?;
            let y = io::read_vector(&a.response)?;
            let loss = parse_loss(&a.loss)?;
            let fit = solver::fit(&d, &y, &loss, &SolverOptions::default())?;
            io::write_json(&a.out, &io::fit_json(&fit, &loss))?;
            let body = std::fs::read(&a.out).map_err(|e| MestError::Io {
                path: a.out.display().to_string(),
                source: e,
            })?;
            let config = BTreeMap::from([
                ("design".to_string(), a.design.display().to_string()),
                ("response".to_string(), a.response.display().to_string()),
                ("loss".to_string(), a.loss.clone()),
            ]);
            write_manifest(
                &a.out.with_extension("manifest.json"),
                "fit",
                config,
                &[&body],
                start,
            )
        }
        Command::Loo(a) => {
            let d = load_design(&a.design, &a.coords)?;
            let y = io::read_vector(&a.response)?;
            let loss = parse_loss(&a.loss)?;
            let opts = SolverOptions::default();
            let fit = solver::fit(&d, &y, &loss, &opts)?;
            let bounds = loo::deterministic_bounds(&d, &y, &loss, &opts)?;
            let dc = loo::delta_c(&d, &y, &loss, &opts)?;
            let mut csv = String::from(
                "j,bj,beta_j,Nj,xij,delta_c_contrib,bound_i_pass,bound_ii_pass,bound_iii_pass,bound_iv_pass\n",
            );
            for (idx, &j) in d.jn().iter().enumerate() {
                let l = loo::fit_loo(&d, &y, &loss, j, &opts)?;
                let contrib = dc.per_j_h0[idx].1.max(dc.per_j_h1_max[idx].1);
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    j + 1,
                    l.bj,
                    fit.beta[j],
                    l.nj,
                    l.xij,
                    contrib,
                    bounds.norm_bound.pass,
                    bounds.bj_bound.pass,
                    bounds.approx_bound.pass,
                    bounds.residual_bound.pass,
                ));
            }
            std::fs::write(&a.out, &csv).map_err(|e| MestError::Io {
                path: a.out.display().to_string(),
                source: e,
            })?;
            let config = BTreeMap::from([
                ("design".to_string(), a.design.display().to_string()),
                ("response".to_string(), a.response.display().to_string()),
                ("loss".to_string(), a.loss.clone()),
                ("coords".to_string(), a.coords.clone()),
            ]);
            write_manifest(
                &a.out.with_extension("manifest.json"),
                "loo",
                config,
                &[csv.as_bytes()],
                start,
            )
        }
        Command::Sensitivity(a) => {
            let d = load_design(&a.design, &a.coords)?;
            let loss = parse_loss(&a.loss)?;
            let model = parse_error_model(&a.errors)?;
            let mut csv = String::from(
                "j,kappa0,kappa1,kappa2,Mj,var_hat,sopi_bound,se_kappa0,se_kappa1,se_kappa2,se_Mj\n",
            );
            for &j in d.jn() {
                let est = sensitivity::sopi_moments(&d, &loss, &model, j, a.reps, a.seed)?;
                let bound = match (model.c1, model.c2) {
                    (Some(c1), Some(c2)) if est.var_betaj > 0.0 => sensitivity::sopi_bound(
                        est.kappa0,
                        est.kappa1,
                        est.kappa2,
                        c1,
                        c2,
                        est.var_betaj,
                    )?,
                    _ => f64::NAN,
                };
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    j + 1,
                    est.kappa0,
                    est.kappa1,
                    est.kappa2,
                    est.mj,
                    est.var_betaj,
                    bound,
                    est.kappa0_se,
                    est.kappa1_se,
                    est.kappa2_se,
                    est.mj_se,
                ));
            }
            std::fs::write(&a.out, &csv).map_err(|e| MestError::Io {
                path: a.out.display().to_string(),
                source: e,
            })?;
            let config = BTreeMap::from([
                ("design".to_string(), a.design.display().to_string()),
                ("loss".to_string(), a.loss.clone()),
                ("errors".to_string(), a.errors.clone()),
                ("reps".to_string(), a.reps.to_string()),
                ("seed".to_string(), a.seed.to_string()),
                ("coords".to_string(), a.coords.clone()),
            ]);
            write_manifest(
                &a.out.with_extension("manifest.json"),
                "sensitivity",
                config,
                &[csv.as_bytes()],
                start,
            )
        }
        Command::Design { command } => match command {
            DesignCommand::Gen(a) => {
                let family = design::parse_family(&a.family)?;
                let d = design::generate(&DesignSpec {
                    family,
                    n: a.n,
                    p: a.p,
                    include_intercept: a.intercept,
                    seed: a.seed,
                })?;
                io::write_matrix(&a.out, d.matrix())?;
                let body = std::fs::read(&a.out).map_err(|e| MestError::Io {
                    path: a.out.display().to_string(),
                    source: e,
                })?;
                let config = BTreeMap::from([
                    ("family".to_string(), a.family.clone()),
                    ("n".to_string(), a.n.to_string()),
                    ("p".to_string(), a.p.to_string()),
                    ("intercept".to_string(), a.intercept.to_string()),
                    ("seed".to_string(), a.seed.to_string()),
                ]);
                write_manifest(
                    &a.out.with_extension("manifest.json"),
                    "design gen",
                    config,
                    &[&body],
                    start,
                )
            }
            DesignCommand::Check(a) => {
                let d = load_design(&a.design, &a.coords)?;
                let loss = parse_loss(&a.loss)?;
                let model = parse_error_model(&a.errors)?;
                let report = design::check_assumptions(
                    &d,
                    &loss,
                    &model,
                    a.reps,
                    a.seed,
                    &AssumptionThresholds::default(),
                )?;
                io::write_json(&a.out, &report)?;
                let body = std::fs::read(&a.out).map_err(|e| MestError::Io {
                    path: a.out.display().to_string(),
                    source: e,
                })?;
                let config = BTreeMap::from([
                    ("design".to_string(), a.design.display().to_string()),
                    ("loss".to_string(), a.loss.clone()),
                    ("errors".to_string(), a.errors.clone()),
                    ("reps".to_string(), a.reps.to_string()),
                    ("seed".to_string(), a.seed.to_string()),
                    ("coords".to_string(), a.coords.clone()),
                ]);
                write_manifest(
                    &a.out.with_extension("manifest.json"),
                    "design check",
                    config,
                    &[&body],
                    start,
                )
            }
        },
        Command::Coverage(a) => {
            let map = read_kv_config(&a.config)?;
            let config = coverage_config(&map)?;
            let report = harness::run_coverage(&config)?;
            std::fs::create_dir_all(&a.out).map_err(|e| MestError::Io {
                path: a.out.display().to_string(),
                source: e,
            })?;
            let rows = harness::coverage_csv(&report, &config);
            let summary = harness::coverage_summary_csv(&report, &config);
            std::fs::write(a.out.join("coverage.csv"), &rows).map_err(|e| MestError::Io {
                path: a.out.join("coverage.csv").display().to_string(),
                source: e,
            })?;
            std::fs::write(a.out.join("summary.csv"), &summary).map_err(|e| MestError::Io {
                path: a.out.join("summary.csv").display().to_string(),
                source: e,
            })?;
            write_manifest(
                &a.out.join("manifest.json"),
                "coverage",
                map,
                &[rows.as_bytes(), summary.as_bytes()],
                start,
            )
        }
        Command::Ks(a) => {
            let map = read_kv_config(&a.config)?;
            let config = ks_config(&map)?;
            let report = harness::run_ks_comparison(&config)?;
            std::fs::create_dir_all(&a.out).map_err(|e| MestError::Io {
                path: a.out.display().to_string(),
                source: e,
            })?;
            let mut stat_csv = String::from("ks1,ks2,sup1,sup2\n");
            stat_csv.push_str(&format!(
                "{},{},{},{}\n",
                report.ks1, report.ks2, report.sup1, report.sup2
            ));
            let mut sample_csv = String::from("rep,beta_small,beta_p_fixed,beta_ratio_fixed\n");
            for i in 0..report.samples[0].len() {
                sample_csv.push_str(&format!(
                    "{},{},{},{}\n",
                    i, report.samples[0][i], report.samples[1][i], report.samples[2][i]
                ));
            }
            std::fs::write(a.out.join("ks.csv"), &stat_csv).map_err(|e| MestError::Io {
                path: a.out.join("ks.csv").display().to_string(),
                source: e,
            })?;
            std::fs::write(a.out.join("samples.csv"), &sample_csv).map_err(|e| MestError::Io {
                path: a.out.join("samples.csv").display().to_string(),
                source: e,
            })?;
            write_manifest(
                &a.out.join("manifest.json"),
                "ks",
                map,
                &[stat_csv.as_bytes(), sample_csv.as_bytes()],
                start,
            )
        }
        Command::Jackknife(a) => {
            let d = load_design(&a.design, "all")?;
            let y = io::read_vector(&a.response)?;
            let loss = parse_loss(&a.loss)?;
            if a.coord < 1 || a.coord > d.p() {
                return Err(MestError::InvalidArgument(format!(
                    "coordinate {} out of range 1..={}",
                    a.coord,
                    d.p()
                )));
            }
            let var =
                harness::jackknife_variance(&d, &y, &loss, a.coord - 1, &SolverOptions::default())?;
            let payload = BTreeMap::from([
                ("coord".to_string(), a.coord.to_string()),
                ("variance".to_string(), format!("{var}")),
            ]);
            io::write_json(&a.out, &payload)?;
            let body = std::fs::read(&a.out).map_err(|e| MestError::Io {
                path: a.out.display().to_string(),
                source: e,
            })?;
            let config = BTreeMap::from([
                ("design".to_string(), a.design.display().to_string()),
                ("response".to_string(), a.response.display().to_string()),
                ("loss".to_string(), a.loss.clone()),
                ("coord".to_string(), a.coord.to_string()),
            ]);
            write_manifest(
                &a.out.with_extension("manifest.json"),
                "jackknife",
                config,
                &[&body],
                start,
            )
        }
    }
}

fn coverage_config(map: &BTreeMap<String, String>) -> Result<ExperimentConfig, MestError> {
    let family = design::parse_family(kv(map, "family").unwrap_or("iid(gaussian)"))?;
    let loss = parse_loss(kv(map, "loss").unwrap_or("huber(k=1.345, eps=0.05, delta=0.1)"))?;
    let error_model: ErrorModel = parse_error_model(kv(map, "errors").unwrap_or("gaussian(1.0)"))?;
    let n_list: Result<Vec<usize>, _> = kv(map, "n_list")
        .unwrap_or("400")
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect();
    let n_list = n_list.map_err(|_| MestError::InvalidArgument("bad n_list".into()))?;
    let coords_text = kv(map, "coords").unwrap_or("1");
    let coords: Result<Vec<usize>, _> = coords_text
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect();
    let coords = coords
        .map_err(|_| MestError::InvalidArgument(format!("bad coords {coords_text:?}")))?
        .iter()
        .map(|&c| {
            if c >= 1 {
                Ok(c - 1)
            } else {
                Err(MestError::InvalidArgument("coords are 1-based".into()))
            }
        })
        .collect::<Result<Vec<usize>, _>>()?;
    let config = ExperimentConfig {
        family,
        include_intercept: kv_parse(map, "intercept", false)?,
        error_model,
        loss,
        n_list,
        kappa: kv_parse(map, "kappa", 0.5)?,
        outer_reps: kv_parse(map, "outer_reps", 50)?,
        inner_reps: kv_parse(map, "inner_reps", 300)?,
        coords,
        alpha: kv_parse(map, "alpha", 0.05)?,
        bonferroni: kv_parse(map, "bonferroni", false)?,
        master_seed: kv_parse(map, "seed", 0u64)?,
    };
    config.validate()?;
    Ok(config)
}

fn ks_config(map: &BTreeMap<String, String>) -> Result<KsConfig, MestError> {
    Ok(KsConfig {
        family: design::parse_family(kv(map, "family").unwrap_or("iid(gaussian)"))?,
        loss: parse_loss(kv(map, "loss").unwrap_or("huber(k=1.345, eps=0.05, delta=0.1)"))?,
        error_model: parse_error_model(kv(map, "errors").unwrap_or("gaussian(1.0)"))?,
        n0: kv_parse(map, "n0", 50)?,
        n: kv_parse(map, "n", 500)?,
        kappa: kv_parse(map, "kappa", 0.5)?,
        k_reps: kv_parse(map, "k_reps", 100)?,
        master_seed: kv_parse(map, "seed", 0u64)?,
    })
}
