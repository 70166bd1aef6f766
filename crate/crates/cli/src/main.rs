//! `ddip` command-line interface.
//!
//! Exit codes: 0 success, 1 run failure, 2 configuration or usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddip::analysis::{depth_of_field, power_spectrum, streak_energy_beyond, DofParams};
use ddip::config::SeparationConfig;
use ddip::gradcheck::run_gradcheck;
use ddip::imaging::{export_display, load_raw, save_raw, ImagePlane};
use ddip::phantom::{generate, PhantomBundle, PhantomSpec};
use ddip::tensor::OpKind;
use ddip::train::{run_separation, run_uncertainty, RunOptions, UncertaintyPlan};
use ddip::Error;

#[derive(Parser)]
#[command(name = "ddip", version, about = "Separate crosstalk-contaminated image pairs with a double deep image prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Separate one image pair.
    Separate {
        #[command(flatten)]
        run: RunArgs,
        /// Phantom directory whose ground truth scores the result.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Generate a synthetic phantom with ground truth.
    Phantom {
        /// JSON phantom spec; defaults are used for anything not given.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Power spectrum of an image and the energy in an oriented band.
    Spectrum {
        image: PathBuf,
        /// Band direction in degrees, [0, 180).
        #[arg(long, default_value_t = 0.0)]
        direction: f64,
        #[arg(long, default_value_t = 2)]
        half_width: usize,
        /// Ignore bins closer than this to DC.
        #[arg(long, default_value_t = 0.0)]
        min_radius: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Repeat separations over seeds and exclusion weights; report std maps.
    Uncertainty {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 20)]
        runs: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.04,0.1,0.2,0.4")]
        gammas: Vec<f64>,
        /// Use the base seed for every run (the std maps must then be zero).
        #[arg(long)]
        identical_seeds: bool,
        /// Worker threads (0: one per core).
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Finite-difference check of every backward rule and the composed loss.
    Gradcheck {
        /// Deliberately break one operation's backward rule (negative control).
        #[arg(long, value_parser = parse_op)]
        corrupt: Option<OpKind>,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Depth of field for a transverse resolution and photon energy.
    Dof {
        #[arg(long)]
        delta_t_nm: f64,
        #[arg(long, conflicts_with = "wavelength_nm")]
        energy_kev: Option<f64>,
        #[arg(long)]
        wavelength_nm: Option<f64>,
    },
}

#[derive(Args)]
struct OutArgs {
    /// Output directory for all artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input1: Option<PathBuf>,
    #[arg(long)]
    input2: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    filter_mode: Option<String>,
    #[arg(long)]
    lowpass_slice: Option<u8>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<String>,
    /// Channel schedule, e.g. `8,8,8,8`.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    skip_channels: Option<usize>,
    /// Any other setting as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    out: OutArgs,
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).ok_or_else(|| format!("unknown operation `{s}`"))
}

/// Failure classified by exit code.
enum Failure {
    Config(String),
    Run(String),
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Run(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Separate { run, truth } => cmd_separate(run, truth),
        Command::Phantom { spec, seed, size, out } => cmd_phantom(spec, seed, size, out),
        Command::Spectrum { image, direction, half_width, min_radius, out } => {
            cmd_spectrum(&image, direction, half_width, min_radius, out)
        }
        Command::Uncertainty { run, runs, gammas, identical_seeds, threads, truth } => {
            cmd_uncertainty(run, UncertaintyPlan { n_runs: runs, gammas, identical_seeds, threads }, truth)
        }
        Command::Gradcheck { corrupt, json } => cmd_gradcheck(corrupt, json),
        Command::Dof { delta_t_nm, energy_kev, wavelength_nm } => cmd_dof(delta_t_nm, energy_kev, wavelength_nm),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Create `dir`, refusing to reuse a non-empty one unless `force` is set.
fn prepare_out(out: &OutArgs) -> CmdResult {
    let dir = &out.out;
    let occupied = dir.exists() && (dir.is_file() || fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(true));
    if occupied {
        if !out.force {
            return Err(Failure::Config(format!(
                "output directory {} already exists; pass --force to replace it",
                dir.display()
            )));
        }
        let removed = if dir.is_file() { fs::remove_file(dir) } else { fs::remove_dir_all(dir) };
        removed.map_err(|e| Failure::Run(format!("{}: {e}", dir.display())))?;
    }
    fs::create_dir_all(dir).map_err(|e| Failure::Run(format!("{}: {e}", dir.display())))
}

fn absolute(p: &Path) -> Result<PathBuf, Failure> {
    fs::canonicalize(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))
}

/// Config file, then flags, then a recorded seed and absolute input paths.
fn build_config(run: &RunArgs) -> Result<SeparationConfig, Failure> {
    let mut cfg = match &run.config {
        Some(p) => SeparationConfig::from_file(p)?,
        None => SeparationConfig::default(),
    };
    let mut set = |k: &str, v: Option<String>| -> CmdResult {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
        Ok(())
    };
    set("input1", run.input1.as_ref().map(|p| p.display().to_string()))?;
    set("input2", run.input2.as_ref().map(|p| p.display().to_string()))?;
    set("gamma_excl", run.gamma.map(|v| v.to_string()))?;
    set("epochs", run.epochs.map(|v| v.to_string()))?;
    set("filter_mode", run.filter_mode.clone())?;
    set("lowpass_slice", run.lowpass_slice.map(|v| v.to_string()))?;
    set("learning_rate", run.lr.map(|v| v.to_string()))?;
    set("seed", run.seed.map(|v| v.to_string()))?;
    set("precision", run.precision.clone())?;
    set("channels", run.channels.clone())?;
    set("depth", run.depth.map(|v| v.to_string()))?;
    set("skip_channels", run.skip_channels.map(|v| v.to_string()))?;
    for kv in &run.set {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| Failure::Config(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    for slot in [&mut cfg.input1, &mut cfg.input2] {
        match slot {
            Some(p) => *p = absolute(p)?,
            None => return Err(Failure::Config("both input1 and input2 are required".into())),
        }
    }
    let seed = cfg.ensure_seed();
    log::info!("run seed {seed}");
    Ok(cfg)
}

fn load_inputs(cfg: &SeparationConfig) -> Result<(ImagePlane, ImagePlane), Failure> {
    let load = |p: &Option<PathBuf>| load_raw(p.as_deref().expect("inputs checked")).map_err(Failure::config);
    Ok((load(&cfg.input1)?, load(&cfg.input2)?))
}

const PHANTOM_SPEC_FILE: &str = "spec.json";

fn load_truth(dir: &Path) -> Result<PhantomBundle, Failure> {
    let path = dir.join(PHANTOM_SPEC_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let spec: PhantomSpec =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(generate(&spec)?)
}

fn cmd_separate(run: RunArgs, truth: Option<PathBuf>) -> CmdResult {
    let cfg = build_config(&run)?;
    let (i1, i2) = load_inputs(&cfg)?;
    let truth = truth.as_deref().map(load_truth).transpose()?;
    prepare_out(&run.out)?;
    let opts = RunOptions { out_dir: Some(run.out.out.clone()), truth };
    let outcome = run_separation(&cfg, &i1, &i2, &opts).map_err(|e| Failure::Run(e.to_string()))?;
    let r = &outcome.report;
    println!("alpha1 = {:.6}", r.alpha1);
    println!("alpha2 = {:.6}", r.alpha2);
    if let Some(last) = r.losses.last() {
        println!("final loss = {:.6} (data {:.6})", last.total, last.data_term);
    }
    if let Some(m) = &r.metrics {
        println!("ncc1 = {:.4}, ncc2 = {:.4} (input baseline {:.4})", m.ncc1, m.ncc2, m.ncc2_input_baseline);
    }
    println!("report: {}", run.out.out.join(ddip::train::REPORT_FILE).display());
    Ok(())
}

fn cmd_phantom(spec_path: Option<PathBuf>, seed: Option<u64>, size: Option<usize>, out: OutArgs) -> CmdResult {
    let mut spec = match &spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<PhantomSpec>(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => PhantomSpec { seed: rand_seed(), ..PhantomSpec::default() },
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = size {
        spec.size = n;
    }
    let bundle = generate(&spec)?;
    prepare_out(&out)?;
    let dir = &out.out;
    for (name, img) in [
        ("y1_true", &bundle.y1_true),
        ("y2_true", &bundle.y2_true),
        ("i1_obs", &bundle.i1_obs),
        ("i2_obs", &bundle.i2_obs),
    ] {
        save_raw(img, &dir.join(format!("{name}.f32")))?;
        export_display(img, &dir.join(format!("{name}.pgm")))?;
    }
    let spec_json = serde_json::to_string_pretty(&spec).map_err(|e| Failure::Run(e.to_string()))?;
    let spec_file = dir.join(PHANTOM_SPEC_FILE);
    fs::write(&spec_file, spec_json).map_err(|e| Failure::Run(format!("{}: {e}", spec_file.display())))?;
    println!("phantom seed {} written to {}", spec.seed, dir.display());
    Ok(())
}

fn rand_seed() -> u64 {
    let mut cfg = SeparationConfig::default();
    cfg.ensure_seed()
}

fn cmd_spectrum(image: &Path, direction: f64, half_width: usize, min_radius: f64, out: OutArgs) -> CmdResult {
    let img = load_raw(image).map_err(Failure::config)?;
    let spec = power_spectrum(&img)?;
    let fraction = streak_energy_beyond(&spec, direction, half_width, min_radius)?;
    prepare_out(&out)?;
    let dir = &out.out;
    let values = ImagePlane::new(spec.height, spec.width, spec.values.clone(), "power_spectrum")?;
    save_raw(&values, &dir.join("spectrum.f32"))?;
    export_display(&spec.log_image(), &dir.join("spectrum_log.pgm"))?;
    let csv = format!(
        "image,direction_deg,half_width_bins,min_radius_bins,streak_fraction,raw_energy\n{},{},{},{},{},{}\n",
        image.display(),
        direction,
        half_width,
        min_radius,
        fraction,
        spec.raw_energy
    );
    let csv_path = dir.join("streak.csv");
    fs::write(&csv_path, csv).map_err(|e| Failure::Run(format!("{}: {e}", csv_path.display())))?;
    println!("streak fraction = {fraction:.6}");
    Ok(())
}

fn cmd_uncertainty(run: RunArgs, plan: UncertaintyPlan, truth: Option<PathBuf>) -> CmdResult {
    let cfg = build_config(&run)?;
    let (i1, i2) = load_inputs(&cfg)?;
    let truth = truth.as_deref().map(load_truth).transpose()?;
    prepare_out(&run.out)?;
    let opts = RunOptions { out_dir: Some(run.out.out.clone()), truth };
    let report = run_uncertainty(&cfg, &i1, &i2, &plan, &opts)?;
    print!("{}", report.mean_std_csv());
    let failed: usize = report.per_gamma.iter().map(|g| g.failures.len()).sum();
    if failed > 0 {
        return Err(Failure::Run(format!("{failed} run(s) failed; see uncertainty.json")));
    }
    Ok(())
}

fn cmd_gradcheck(corrupt: Option<OpKind>, json: Option<PathBuf>) -> CmdResult {
    let report = run_gradcheck(corrupt)?;
    print!("{}", report.table());
    if let Some(p) = json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::Run(e.to_string()))?;
        fs::write(&p, text).map_err(|e| Failure::Run(format!("{}: {e}", p.display())))?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
        Err(Failure::Run(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn cmd_dof(delta_t_nm: f64, energy_kev: Option<f64>, wavelength_nm: Option<f64>) -> CmdResult {
    let params = match (energy_kev, wavelength_nm) {
        (Some(e), None) => DofParams::from_energy_kev(delta_t_nm, e)?,
        (None, Some(l)) => DofParams { delta_t_nm, wavelength_nm: l },
        _ => return Err(Failure::Config("give exactly one of --energy-kev and --wavelength-nm".into())),
    };
    println!("z_dof = {:.4} um", depth_of_field(params)?);
    Ok(())
}
