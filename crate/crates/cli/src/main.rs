//! `usbeam`: simulate channel data, beamform it, and measure image quality.
//!
//! Every failure prints one line `error: code=<CODE> msg=<text>` on stderr
//! and exits with a code specific to `<CODE>`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_like::Timing;
use usbeam::classic_bf::RfImage;
use usbeam::config::{ExperimentConfig, Method, RegionPair, PRESETS};
use usbeam::imaging::{bmode, envelope};
use usbeam::io::{self, MetricsRow};
use usbeam::metrics::lateral_profile;
use usbeam::pipeline::{self, Beamformed};

#[derive(Parser)]
#[command(name = "usbeam", version, about = "Ultrasound beamforming by regularized inversion and classical baselines")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file (TOML) or a preset name.
    #[arg(long)]
    config: String,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate raw channel data; writes raw.usrf and phantom.toml.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: the configured one).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Beamform a raw cube; writes <method>.usim, <method>.pgm and sidecars.
    Beamform {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        method: Option<Method>,
        /// Raw cube (default: <out>/raw.usrf).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CNR, SNR and resolution gain of an image, as CSV.
    Metrics {
        /// Image file written by `beamform`.
        image: PathBuf,
        /// DAS image used as the resolution reference.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// TOML file with `speckle` and `target` regions.
        #[arg(long, conflicts_with = "config")]
        regions: Option<PathBuf>,
        /// Take the regions from an experiment configuration instead.
        #[arg(long)]
        config: Option<String>,
        /// CSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lateral profile in dB at one depth, as CSV.
    Profile {
        image: PathBuf,
        /// Depth in meters.
        #[arg(long)]
        depth: f64,
        /// Number of depth samples averaged around `depth`.
        #[arg(long, default_value_t = 15)]
        average: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Beamform with several methods and tabulate metrics and timings.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated methods (default: the configured list, else all).
        #[arg(long, value_delimiter = ',')]
        method: Vec<Method>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a preset configuration.
    Preset { name: String },
}

/// Failure with its stable code.
struct Failure {
    code: &'static str,
    msg: String,
}

impl Failure {
    fn new(code: &'static str, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }

    fn exit_code(&self) -> u8 {
        match self.code {
            "USAGE" => 2,
            "BAD_CONFIG" => 3,
            "IO" => 4,
            "BAD_FORMAT" => 5,
            "DIMENSION_MISMATCH" => 6,
            "INVALID_PARAMETER" => 7,
            "DEGENERATE" => 8,
            "NOT_POSITIVE_DEFINITE" => 9,
            "OUT_OF_RANGE" => 10,
            "BAD_STATE" => 11,
            "NOT_CONVERGED" => 12,
            "MISSING_REFERENCE" => 13,
            _ => 1,
        }
    }
}

impl From<usbeam::Error> for Failure {
    fn from(e: usbeam::Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = self.msg.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error: code={} msg={}", self.code, msg)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            let f = Failure::new("USAGE", first);
            eprintln!("{f}");
            return ExitCode::from(f.exit_code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::new("USAGE", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::new("USAGE", e.to_string()))?;
    }
    match cli.cmd {
        Command::Simulate { cfg, out } => simulate(&cfg, out),
        Command::Beamform { cfg, method, input, out } => beamform(&cfg, method, input, out),
        Command::Metrics {
            image,
            reference,
            regions,
            config,
            out,
        } => metrics(&image, reference.as_deref(), regions.as_deref(), config.as_deref(), out.as_deref()),
        Command::Profile { image, depth, average, out } => profile(&image, depth, average, out.as_deref()),
        Command::Compare { cfg, method, input, out } => compare(&cfg, &method, input, out),
        Command::Preset { name } => {
            print!("{}", ExperimentConfig::preset(&name)?.to_toml()?);
            Ok(())
        }
    }
}

fn load_config(spec: &str) -> Result<ExperimentConfig, Failure> {
    let path = Path::new(spec);
    if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Failure::new("IO", format!("{}: {e}", path.display())))?;
        return Ok(ExperimentConfig::from_toml(&text)?);
    }
    if PRESETS.contains(&spec) {
        return Ok(ExperimentConfig::preset(spec)?);
    }
    Err(Failure::new(
        "BAD_CONFIG",
        format!("{spec} is neither a readable file nor a preset ({})", PRESETS.join(", ")),
    ))
}

fn config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<PathBuf, Failure> {
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir).map_err(|e| Failure::new("IO", format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    io::write_atomic(path, bytes).map_err(|e| Failure::new(e.code(), format!("{}: {e}", path.display())))
}

fn simulate(args: &ConfigArgs, out: Option<PathBuf>) -> Outcome {
    let cfg = config(args)?;
    cfg.validate()?;
    let dir = out_dir(&cfg, out)?;
    let sim = pipeline::simulate(&cfg)?;
    write(&dir.join("raw.usrf"), &io::encode_cube(&sim.cube))?;
    write(&dir.join("phantom.toml"), sim.phantom.to_toml()?.as_bytes())?;
    let (k, m, n) = sim.cube.data.dim();
    println!("M={m} N={n} K={k}");
    Ok(())
}

fn read_raw(cfg: &ExperimentConfig, dir: &Path, input: Option<PathBuf>) -> Result<usbeam::acquisition::RawDataCube, Failure> {
    let path = input.unwrap_or_else(|| dir.join("raw.usrf"));
    io::read_cube(&path).map_err(|e| Failure::new(e.code(), format!("{}: {e}", path.display())))
        .and_then(|cube| {
            pipeline::check_cube(cfg, &cube)?;
            Ok(cube)
        })
}

mod serde_like {
    /// Wall time and solver status of one beamforming run, kept out of the
    /// image files so those stay reproducible.
    pub struct Timing<'a> {
        pub method: &'a str,
        pub wall_time_s: f64,
        pub emissions_used: usize,
        pub nonconverged_depths: &'a [usize],
    }

    impl Timing<'_> {
        pub fn to_toml(&self) -> String {
            format!(
                "method = \"{}\"\nwall_time_s = {}\nemissions_used = {}\nnonconverged_depths = {:?}\n",
                self.method, self.wall_time_s, self.emissions_used, self.nonconverged_depths
            )
        }
    }
}

fn save_image(cfg: &ExperimentConfig, dir: &Path, method: Method, b: &Beamformed) -> Outcome {
    let stem = method.name();
    write(&dir.join(format!("{stem}.usim")), &io::encode_image(&b.image)?)?;
    match bmode(&b.image, cfg.imaging.dynamic_range_db) {
        Ok(img) => {
            write(&dir.join(format!("{stem}.pgm")), &img.to_pgm())?;
            write(&dir.join(format!("{stem}.pgm.toml")), img.sidecar_toml()?.as_bytes())?;
        }
        Err(usbeam::Error::Degenerate(msg)) => log::warn!("{stem}: no B-mode written ({msg})"),
        Err(e) => return Err(e.into()),
    }
    let timing = Timing {
        method: stem,
        wall_time_s: b.wall_time.as_secs_f64(),
        emissions_used: b.image.provenance.emissions_used,
        nonconverged_depths: &b.nonconverged_depths,
    };
    write(&dir.join(format!("{stem}.timing.toml")), timing.to_toml().as_bytes())
}

fn nonconverged(method: Method, b: &Beamformed) -> Outcome {
    if b.nonconverged_depths.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            "NOT_CONVERGED",
            format!(
                "{method}: solver hit max_iters at {} of {} depths; image written anyway",
                b.nonconverged_depths.len(),
                b.image.num_samples()
            ),
        ))
    }
}

fn beamform(args: &ConfigArgs, method: Option<Method>, input: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let mut cfg = config(args)?;
    if let Some(m) = method {
        cfg.method = m;
    }
    cfg.validate()?;
    let dir = out_dir(&cfg, out)?;
    let raw = read_raw(&cfg, &dir, input)?;
    let b = pipeline::beamform(&cfg, cfg.method, &raw)?;
    save_image(&cfg, &dir, cfg.method, &b)?;
    println!(
        "{} {}x{} emissions_used={} wall_time_s={:.3}",
        cfg.method,
        b.image.num_lines(),
        b.image.num_samples(),
        b.image.provenance.emissions_used,
        b.wall_time.as_secs_f64()
    );
    nonconverged(cfg.method, &b)
}

fn read_image(path: &Path) -> Result<RfImage, Failure> {
    io::read_image(path).map_err(|e| Failure::new(e.code(), format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => write(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn metrics(image: &Path, reference: Option<&Path>, regions: Option<&Path>, config: Option<&str>, out: Option<&Path>) -> Outcome {
    let reference = reference.ok_or_else(|| Failure::new("MISSING_REFERENCE", "resolution gain needs --reference <DAS image>"))?;
    let pair: RegionPair = match (regions, config) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::new("IO", format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Failure::new("BAD_CONFIG", format!("{}: {}", p.display(), e.message())))?
        }
        (None, Some(c)) => load_config(c)?
            .evaluation
            .regions
            .ok_or_else(|| Failure::new("BAD_CONFIG", "configuration defines no evaluation regions"))?,
        (None, None) => return Err(Failure::new("USAGE", "metrics needs --regions or --config")),
    };
    let img = read_image(image)?;
    let reference = read_image(reference)?;
    let env = envelope(&img)?;
    let row = MetricsRow {
        method: img.provenance.method.clone(),
        cnr: Some(usbeam::metrics::cnr(&env, &pair.speckle, &pair.target)?),
        snr: Some(usbeam::metrics::snr(&env, &pair.speckle)?),
        rg: Some(usbeam::metrics::resolution_gain(&envelope(&reference)?, &env)?),
        emissions_used: img.provenance.emissions_used,
        wall_time_s: None,
    };
    emit(out, &io::metrics_csv(&[row]))
}

fn profile(image: &Path, depth: f64, average: usize, out: Option<&Path>) -> Outcome {
    if average == 0 {
        return Err(Failure::new("USAGE", "--average must be at least 1"));
    }
    let env = envelope(&read_image(image)?)?;
    let p = lateral_profile(&env, depth, average)?;
    emit(out, &io::profile_csv(&p))
}

fn compare(args: &ConfigArgs, methods: &[Method], input: Option<PathBuf>, out: Option<PathBuf>) -> Outcome {
    let cfg = config(args)?;
    let dir = out_dir(&cfg, out)?;
    let methods = if methods.is_empty() {
        cfg.evaluation.compare.clone()
    } else {
        methods.to_vec()
    };
    cfg.validate()?;
    for &m in &methods {
        cfg.validate_method(m)?;
    }
    let raw = read_raw(&cfg, &dir, input)?;
    let results = pipeline::compare(&cfg, &raw, &methods)?;
    let mut rows = Vec::new();
    let mut first_failure = None;
    for (b, row) in &results {
        let m: Method = row.method.parse()?;
        save_image(&cfg, &dir, m, b)?;
        if first_failure.is_none() {
            first_failure = nonconverged(m, b).err();
        }
        rows.push(row.clone());
    }
    write(&dir.join("metrics.csv"), io::metrics_csv(&rows).as_bytes())?;
    write(&dir.join("compare.csv"), io::compare_csv(&rows).as_bytes())?;
    print!("{}", io::compare_csv(&rows));
    first_failure.map_or(Ok(()), Err)
}
