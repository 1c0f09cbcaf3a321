//! Argument handling and dispatch for the `specden` executable.
//!
//! Every subcommand accepts `--config <file>` with flat `key = value` lines; a flag given
//! on the command line overrides the same key from the file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use specden_core::config::{parse_kv, ConfigError, KvReader};
use specden_core::datagen::{
    build_manifest, parse_snr_grid, read_manifest, render_manifest, write_manifest, DatagenError, ManifestSpec, Split,
};
use specden_core::dsp::{read_wav, DspError, SAMPLE_RATE};
use specden_core::metrics::{emit_tables, evaluate_checkpoint, render_spectrogram_image, MetricReport, MetricsError};
use specden_core::model::{ModelConfig, ModelError, ModelKind};
use specden_core::trainer::{
    enhance_file, enhance_waveform, features, train, Checkpoint, TrainConfig, TrainData, TrainError,
};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        usage(e)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "specden",
    version,
    about = "Spectrogram-domain speech enhancement",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    /// Worker threads; 1 gives fully sequential execution.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a mixture manifest and render its noisy/clean audio.
    Mix(MixArgs),
    /// Train a model on rendered mixtures.
    Train(TrainArgs),
    /// Enhance one 16 kHz mono WAV file.
    Enhance(EnhanceArgs),
    /// Score a checkpoint on a rendered test manifest.
    Evaluate(EvaluateArgs),
    /// Combine evaluation reports into one table.
    Report(ReportArgs),
}

fn snr_grid_arg(s: &str) -> std::result::Result<String, String> {
    parse_snr_grid(s).map(|_| s.to_string()).map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
pub struct MixArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of clean speech WAVs.
    #[arg(long)]
    pub speech: Option<PathBuf>,
    /// Directory of noise WAVs.
    #[arg(long)]
    pub noise: Option<PathBuf>,
    /// Directory of room impulse responses.
    #[arg(long)]
    pub rir: Option<PathBuf>,
    /// Total mixture duration in hours.
    #[arg(long)]
    pub hours: Option<f64>,
    #[arg(long)]
    pub split: Option<Split>,
    /// `start:stop:step` (inclusive) or a comma list, in dB.
    #[arg(long, value_parser = snr_grid_arg)]
    pub snr_grid: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mixture length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training manifest; audio is read from its directory.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Validation manifest.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Frequency bins per chunk.
    #[arg(long)]
    pub height: Option<usize>,
    /// Frames per chunk.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub validations_per_epoch: Option<usize>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model label in tables; defaults to the variant name.
    #[arg(long)]
    pub tag: Option<String>,
    /// Test-set label; defaults to the manifest's directory name.
    #[arg(long)]
    pub test_set: Option<String>,
    /// Spectrogram images (noisy, enhanced, clean) for this many utterances.
    #[arg(long, default_value_t = 1)]
    pub images: usize,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation output directories or report JSON files.
    #[arg(long = "in", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Table CSV path; the aligned text table goes next to it as `.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Structured stderr logging: timestamp, level, then `event=... key=value` fields.
pub fn init_logging(level: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(level)
        .format(|buf, rec| writeln!(buf, "{} {:<5} {}", buf.timestamp_millis(), rec.level(), rec.args()))
        .try_init();
}

/// Config-file keys overlaid with the flags that were given. Returns the map and the
/// directory relative file paths resolve against.
fn merged(config: Option<&Path>, flags: Vec<(&str, Option<String>)>) -> Result<(BTreeMap<String, String>, PathBuf)> {
    let (mut map, base) = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("--config {}: {e}", p.display())))?;
            let map = parse_kv(&text).map_err(|e| usage(format!("--config {}: {e}", p.display())))?;
            (map, p.parent().unwrap_or(Path::new(".")).to_path_buf())
        }
        None => (BTreeMap::new(), PathBuf::from(".")),
    };
    for (k, v) in flags {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    }
    Ok((map, base))
}

fn abs(p: &Option<PathBuf>) -> Result<Option<String>> {
    p.as_ref()
        .map(|p| std::path::absolute(p).map(|a| a.display().to_string()))
        .transpose()
        .map_err(CliError::Io)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

/// Mix-spec keys from the config file and flags.
pub fn mix_spec(a: &MixArgs) -> Result<ManifestSpec> {
    let (map, base) = merged(
        a.config.as_deref(),
        vec![
            ("speech_dir", abs(&a.speech)?),
            ("noise_dir", abs(&a.noise)?),
            ("rir_dir", abs(&a.rir)?),
            ("target_hours", s(&a.hours)),
            ("split", s(&a.split)),
            ("snr_grid", a.snr_grid.clone()),
            ("seed", s(&a.seed)),
            ("duration_s", s(&a.duration)),
        ],
    )?;
    for (key, flag) in [
        ("speech_dir", "--speech"),
        ("noise_dir", "--noise"),
        ("target_hours", "--hours"),
    ] {
        if !map.contains_key(key) {
            return Err(usage(format!("missing {flag} (or `{key}` in --config)")));
        }
    }
    ManifestSpec::from_map(&map, &base).map_err(usage)
}

const TRAIN_KEYS: [&str; 17] = [
    "manifest",
    "val",
    "model",
    "depth",
    "base_channels",
    "height",
    "width",
    "max_epochs",
    "patience_validations",
    "warmup_batches",
    "peak_lr",
    "batch_size",
    "validations_per_epoch",
    "kl_weight",
    "max_steps",
    "seed",
    "dilation_schedule",
];

/// Resolved inputs of a training run.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub manifest: PathBuf,
    pub val: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn train_plan(a: &TrainArgs) -> Result<TrainPlan> {
    let (map, base) = merged(
        a.config.as_deref(),
        vec![
            ("manifest", abs(&a.manifest)?),
            ("val", abs(&a.val)?),
            ("model", a.model.map(|m| m.name().to_lowercase())),
            ("depth", s(&a.depth)),
            ("base_channels", s(&a.base_channels)),
            ("height", s(&a.height)),
            ("width", s(&a.width)),
            ("max_epochs", s(&a.epochs)),
            ("patience_validations", s(&a.patience)),
            ("warmup_batches", s(&a.warmup)),
            ("peak_lr", s(&a.lr)),
            ("batch_size", s(&a.batch_size)),
            ("validations_per_epoch", s(&a.validations_per_epoch)),
            ("kl_weight", s(&a.kl_weight)),
            ("max_steps", s(&a.max_steps)),
            ("seed", s(&a.seed)),
        ],
    )?;
    let r = KvReader::new(&map);
    r.deny_unknown(&TRAIN_KEYS)?;
    let path = |k: &str| -> Result<PathBuf> {
        r.raw(k)
            .map(|v| base.join(v))
            .ok_or_else(|| usage(format!("missing --{k} (or `{k}` in --config)")))
    };
    let kind: ModelKind = r.get("model")?.unwrap_or(ModelKind::Dvunet);
    let mut model = ModelConfig::new(
        kind,
        r.get("depth")?.unwrap_or(5),
        r.get("base_channels")?.unwrap_or(16),
    )
    .with_input(r.get("height")?.unwrap_or(512), r.get("width")?.unwrap_or(512));
    if let Some(d) = r.raw("dilation_schedule") {
        // comma list of per-block dilations
        let ds: std::result::Result<Vec<usize>, _> = d.split(',').map(|x| x.trim().parse()).collect();
        let ds = ds.map_err(|_| usage(format!("invalid dilation_schedule `{d}`")))?;
        model.dilation_schedule = ds.into_iter().map(|v| (v, v)).collect();
    }
    let mut t = TrainConfig::default();
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = r.get(stringify!($field))? {
                t.$field = v;
            }
        };
    }
    set!(max_epochs);
    set!(patience_validations);
    set!(warmup_batches);
    set!(peak_lr);
    set!(batch_size);
    set!(validations_per_epoch);
    set!(kl_weight);
    set!(seed);
    t.max_steps = r.get("max_steps")?;
    model.kl_weight = t.kl_weight;
    model.validate().map_err(usage)?;
    t.validate().map_err(usage)?;
    Ok(TrainPlan {
        manifest: path("manifest")?,
        val: path("val")?,
        model,
        train: t,
    })
}

fn audio_dir(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn run_mix(a: &MixArgs) -> Result<()> {
    let spec = mix_spec(a)?;
    let records = build_manifest(&spec)?;
    info!(
        "event=manifest_built records={} split={} seed={}",
        records.len(),
        spec.split,
        spec.seed
    );
    let rendered = render_manifest(&records, &a.out)?;
    let path = a.out.join("manifest.jsonl");
    write_manifest(&path, &rendered)?;
    info!("event=mix_done records={} manifest={}", rendered.len(), path.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let plan = train_plan(a)?;
    let train_recs = read_manifest(&plan.manifest)?;
    let val_recs = read_manifest(&plan.val)?;
    let (ta, va) = (audio_dir(&plan.manifest), audio_dir(&plan.val));
    let out = train(
        &TrainData {
            records: &train_recs,
            audio_dir: &ta,
        },
        &TrainData {
            records: &val_recs,
            audio_dir: &va,
        },
        &plan.model,
        &plan.train,
        &a.out,
    )?;
    info!(
        "event=train_done steps={} epochs={} early_stop={} best_val={} best={}",
        out.steps,
        out.epochs,
        out.stopped_early,
        out.checkpoint.best_val.map_or("none".into(), |v| format!("{v:.6}")),
        out.best_path.display()
    );
    Ok(())
}

fn run_enhance(a: &EnhanceArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let r = enhance_file(&ck, &a.input, &a.out)?;
    info!(
        "event=enhance_done chunks={} samples={} limiter_gain={:.6} out={}",
        r.chunks.len(),
        r.waveform.len(),
        r.limiter_gain,
        a.out.display()
    );
    Ok(())
}

fn test_set_name(manifest: &Path) -> String {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("test");
    if stem == "manifest" {
        if let Some(d) = manifest.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return d.to_string();
        }
    }
    stem.to_string()
}

fn run_evaluate(a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let records = read_manifest(&a.manifest)?;
    let dir = audio_dir(&a.manifest);
    let set = a.test_set.clone().unwrap_or_else(|| test_set_name(&a.manifest));
    let report = evaluate_checkpoint(&ck, a.tag.as_deref(), &set, &records, &dir)?;
    report.save(&a.out)?;
    if a.images > 0 {
        let model = ck.model()?;
        for rec in records.iter().take(a.images) {
            let noisy = read_wav(&rec.noisy_file(&dir), SAMPLE_RATE)?;
            let clean = read_wav(&rec.clean_file(&dir), SAMPLE_RATE)?;
            let e = enhance_waveform(&model, &ck.normalizer, &noisy)?;
            let spectra = a.out.join("spectra");
            render_spectrogram_image(&e.noisy, &spectra.join(format!("{}_noisy.png", rec.mixture_id)))?;
            render_spectrogram_image(&e.enhanced, &spectra.join(format!("{}_enhanced.png", rec.mixture_id)))?;
            render_spectrogram_image(
                &features(&clean)?,
                &spectra.join(format!("{}_clean.png", rec.mixture_id)),
            )?;
        }
    }
    let m = report.mean;
    info!(
        "event=evaluate_done model={} test_set={} rows={} si_sdr_in={:.3} si_sdr_out={:.3} stoi_in={:.4} stoi_out={:.4}",
        report.model,
        report.test_set,
        report.rows.len(),
        m.si_sdr_in,
        m.si_sdr_out,
        m.stoi_in,
        m.stoi_out
    );
    Ok(())
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| MetricReport::load(p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let text = emit_tables(&reports, &a.out)?;
    print!("{text}");
    info!("event=report_done reports={} out={}", reports.len(), a.out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Mix(a) => run_mix(a),
        Command::Train(a) => run_train(a),
        Command::Enhance(a) => run_enhance(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Report(a) => run_report(a),
    }
}

/// Run the parsed command, inside a dedicated worker pool when `--threads` is set.
pub fn run(cli: &Cli) -> Result<()> {
    match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n as usize)
                .build()
                .map_err(|e| usage(format!("--threads: {e}")))?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}
