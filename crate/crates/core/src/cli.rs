//! `catnus` command-line front end.
//!
//! Every subcommand takes `--out`, `--config`, `--seed`, `--threads`,
//! `--verbose` and `--format`. The effective configuration is built from
//! built-in defaults, overlaid with the JSON config file, overlaid with
//! explicit flags. Each run writes `manifest.json` next to its outputs with
//! the effective configuration and SHA-256 digests of every input and output.
//!
//! Exit codes: 0 on success, 1 on usage errors (missing or unknown
//! subcommand, malformed or out-of-range values), 2 on data errors (unknown
//! flag, missing input, unreadable or schema-violating files).

use std::ffi::OsString;
use std::fs;
use std::io::ErrorKind as IoErrorKind;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::coordunet::{
    decode_checkpoint, encode_checkpoint, infer, train, FeatureGrid, LrSchedule, NetworkConfig, Sample,
    TrainConfig, NUM_CLASSES,
};
use crate::error::Error;
use crate::irsignal::{
    default_ti_list, synthesize_ti, ti_range, AcquisitionParams, Polarity, DEFAULT_TR, FGATIR_TI, MPRAGE_TI,
};
use crate::metrics::{metrics_report, GroupMapping};
use crate::phantom::{acquire, make_phantom, PhantomSpec};
use crate::postprocess::{nucleus_refine, thalamus_filter, DEFAULT_MIN_FRAGMENT_SIZE, DEFAULT_MIN_THALAMUS_SIZE};
use crate::preprocess::{
    apply_bias_correction, estimate_bias, harmonize_bias, wm_mask_from_mprage, wm_normalize, FcmConfig,
    DEFAULT_SIGMA,
};
use crate::qmapfit::{fit_volume_threaded, FitConfig};
use crate::volume::{decode, encode, AnyVolume, Format, LabelSchema, LabelVolume, ScalarVolume};

#[derive(Parser, Debug)]
#[command(name = "catnus", version, about = "Thalamic nuclei pipeline: qMRI fitting, segmentation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a digital phantom and its simulated MPRAGE/FGATIR pair.
    Phantom(PhantomArgs),
    /// Joint bias harmonization and white-matter mean normalization.
    Preprocess(PreprocessArgs),
    /// Voxelwise T1/PD fit from an MPRAGE/FGATIR pair.
    Fit(FitArgs),
    /// Synthesize inversion-recovery images over a sweep of TIs.
    Synth(SynthArgs),
    /// Train the segmentation network.
    Train(TrainArgs),
    /// Segment an image with a trained network.
    Segment(SegmentArgs),
    /// Remove small thalamus components and reassign small nucleus fragments.
    Postprocess(PostprocessArgs),
    /// Per-class and per-group TPR report against a reference segmentation.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory, created when missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// JSON configuration file; explicit flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for stochastic components (phantom default 0, train default 1234).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for stages with internal parallelism.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Print the effective configuration to stderr before running.
    #[arg(long)]
    verbose: bool,
    /// Container for written volumes.
    #[arg(long, value_enum, default_value_t = OutFormat::Native)]
    format: OutFormat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutFormat {
    Native,
    Nifti,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Format {
        match f {
            OutFormat::Native => Format::Native,
            OutFormat::Nifti => Format::Nifti,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolarityArg {
    Signed,
    Magnitude,
}

impl From<PolarityArg> for Polarity {
    fn from(p: PolarityArg) -> Polarity {
        match p {
            PolarityArg::Signed => Polarity::Signed,
            PolarityArg::Magnitude => Polarity::Magnitude,
        }
    }
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[command(flatten)]
    common: Common,
    /// Phantom geometry and tissue JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long)]
    noise: Option<f64>,
    /// Repetition time, ms.
    #[arg(long)]
    tr: Option<f64>,
    /// MPRAGE inversion time, ms.
    #[arg(long)]
    ti_mprage: Option<f64>,
    /// FGATIR inversion time, ms.
    #[arg(long)]
    ti_fgatir: Option<f64>,
    /// Whether the simulated FGATIR is stored signed or as a magnitude image.
    #[arg(long, value_enum)]
    fgatir_polarity: Option<PolarityArg>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mprage: PathBuf,
    #[arg(long)]
    fgatir: PathBuf,
    /// Brain mask (nonzero inside).
    #[arg(long)]
    mask: PathBuf,
    /// Gaussian width of the bias-field smoother, voxels.
    #[arg(long)]
    sigma: Option<f64>,
    /// Number of fuzzy c-means clusters.
    #[arg(long)]
    fcm_clusters: Option<usize>,
    /// Fuzzy c-means fuzzifier.
    #[arg(long)]
    fcm_m: Option<f64>,
    #[arg(long)]
    fcm_max_iterations: Option<usize>,
    #[arg(long)]
    fcm_tolerance: Option<f64>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    mprage: PathBuf,
    #[arg(long)]
    fgatir: PathBuf,
    /// Voxels outside this mask are skipped.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    tr: Option<f64>,
    #[arg(long)]
    ti_mprage: Option<f64>,
    #[arg(long)]
    ti_fgatir: Option<f64>,
    /// Whether the FGATIR input is signed or a magnitude image.
    #[arg(long, value_enum)]
    fgatir_polarity: Option<PolarityArg>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    t1: PathBuf,
    #[arg(long)]
    pd: PathBuf,
    #[arg(long)]
    tr: Option<f64>,
    /// Explicit inversion times, comma separated, ms.
    #[arg(long, value_delimiter = ',', conflicts_with = "ti_range")]
    ti: Option<Vec<f64>>,
    /// Inclusive sweep `START,STOP,STEP`, ms.
    #[arg(long, value_parser = parse_range)]
    ti_range: Option<[f64; 3]>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training image; repeat once per subject.
    #[arg(long = "image", required = true)]
    images: Vec<PathBuf>,
    /// Label volume matching each `--image`, in the same order.
    #[arg(long = "labels", required = true)]
    labels: Vec<PathBuf>,
    #[arg(long = "val-image")]
    val_images: Vec<PathBuf>,
    #[arg(long = "val-labels")]
    val_labels: Vec<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Training crop, `N` or `NX,NY,NZ`.
    #[arg(long, value_parser = parse_dims)]
    crop: Option<[usize; 3]>,
    /// Disable augmentation (center crops only).
    #[arg(long)]
    no_augment: bool,
    /// Keep the learning rate constant.
    #[arg(long)]
    constant_lr: bool,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Inference crop, `N` or `NX,NY,NZ`; defaults to each dim rounded down
    /// to a multiple of 16, at most 96.
    #[arg(long, value_parser = parse_dims)]
    crop: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
struct PostprocessArgs {
    #[command(flatten)]
    common: Common,
    /// Segmentation to clean.
    #[arg(long)]
    seg: PathBuf,
    /// Directory holding `probs_00` .. `probs_13` from `segment`.
    #[arg(long)]
    probs: PathBuf,
    #[arg(long)]
    min_thalamus_size: Option<usize>,
    #[arg(long)]
    min_fragment_size: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Nucleus-to-group mapping JSON; defaults to the seven major groups.
    #[arg(long)]
    groups: Option<PathBuf>,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err("expected N or NX,NY,NZ".into()),
    }
}

fn parse_range(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err("expected START,STOP,STEP".into()),
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn describe(e: &Error) -> String {
    match e {
        Error::Io { path, source } if source.kind() == IoErrorKind::NotFound => {
            format!("missing input: {}", path.display())
        }
        other => other.to_string(),
    }
}

/// Parse `args` (including the program name) and run the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::UnknownArgument | ErrorKind::MissingRequiredArgument => 2,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {}", describe(&e));
            2
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Postprocess(a) => cmd_postprocess(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn load_config<T: DeserializeOwned + Default>(common: &Common) -> CliResult<T> {
    if common.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let Some(path) = &common.config else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Data(Error::Schema(format!("config {}: {e}", path.display()))))
}

fn announce<T: Serialize>(common: &Common, command: &str, cfg: &T) {
    if common.verbose {
        let text = serde_json::to_string_pretty(cfg).unwrap_or_default();
        eprintln!("catnus {command}: effective configuration\n{text}");
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads inputs and remembers their digests for the manifest.
#[derive(Default)]
struct Inputs(Vec<(String, String)>);

impl Inputs {
    fn bytes(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.0.push((name, sha256_hex(&bytes)));
        Ok(bytes)
    }

    fn scalar(&mut self, path: &Path) -> CliResult<ScalarVolume> {
        Ok(decode(&self.bytes(path)?).and_then(AnyVolume::into_scalar).map_err(|e| in_file(path, e))?)
    }

    fn label(&mut self, path: &Path) -> CliResult<LabelVolume> {
        Ok(decode(&self.bytes(path)?).and_then(AnyVolume::into_label).map_err(|e| in_file(path, e))?)
    }
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Writes outputs into one directory and records their digests.
struct Outputs {
    dir: PathBuf,
    format: Format,
    files: Vec<(String, String)>,
}

impl Outputs {
    fn create(common: &Common) -> CliResult<Self> {
        fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
        Ok(Outputs {
            dir: common.out.clone(),
            format: common.format.into(),
            files: Vec::new(),
        })
    }

    fn bytes(&mut self, name: String, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push((name, sha256_hex(bytes)));
        Ok(())
    }

    fn volume(&mut self, stem: &str, v: impl Into<AnyVolume>) -> CliResult<()> {
        let name = format!("{stem}.{}", self.format.extension());
        let bytes = encode(&v.into(), self.format, None)?;
        self.bytes(name, &bytes)
    }

    fn finish<T: Serialize>(
        self,
        command: &str,
        common: &Common,
        cfg: &T,
        inputs: Inputs,
        summary: Value,
    ) -> CliResult<()> {
        let entries = |v: &[(String, String)]| -> Value {
            v.iter().map(|(n, h)| json!({ "file": n, "sha256": h })).collect()
        };
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": common.seed,
            "config": serde_json::to_value(cfg).map_err(Error::from)?,
            "inputs": entries(&inputs.0),
            "outputs": entries(&self.files),
            "summary": summary,
        });
        let mut text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PhantomConfig {
    spec: PhantomSpec,
    seed: u64,
    noise_sigma: f64,
    tr: f64,
    ti_mprage: f64,
    ti_fgatir: f64,
    fgatir_polarity: Polarity,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            spec: PhantomSpec::default(),
            seed: 0,
            noise_sigma: 0.0,
            tr: DEFAULT_TR,
            ti_mprage: MPRAGE_TI,
            ti_fgatir: FGATIR_TI,
            fgatir_polarity: Polarity::Magnitude,
        }
    }
}

fn cmd_phantom(a: PhantomArgs) -> CliResult<()> {
    let mut cfg: PhantomConfig = load_config(&a.common)?;
    let mut inputs = Inputs::default();
    if let Some(path) = &a.spec {
        let text = String::from_utf8(inputs.bytes(path)?)
            .map_err(|_| Error::Schema(format!("{}: not UTF-8", path.display())))?;
        cfg.spec = PhantomSpec::from_json(&text).map_err(|e| in_file(path, e))?;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.noise {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.tr {
        cfg.tr = v;
    }
    if let Some(v) = a.ti_mprage {
        cfg.ti_mprage = v;
    }
    if let Some(v) = a.ti_fgatir {
        cfg.ti_fgatir = v;
    }
    if let Some(p) = a.fgatir_polarity {
        cfg.fgatir_polarity = p.into();
    }
    announce(&a.common, "phantom", &cfg);
    cfg.spec.validate().map_err(usage)?;
    let acq_m = AcquisitionParams::new(cfg.tr, cfg.ti_mprage).map_err(usage)?;
    let acq_f = AcquisitionParams::new(cfg.tr, cfg.ti_fgatir).map_err(usage)?;
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(usage(format!("noise sigma must be finite and nonnegative, got {}", cfg.noise_sigma)));
    }

    let ph = make_phantom(&cfg.spec, cfg.seed)?;
    let mprage = acquire(&ph, acq_m, cfg.noise_sigma, Polarity::Magnitude, cfg.seed.wrapping_add(1))?;
    let fgatir = acquire(&ph, acq_f, cfg.noise_sigma, cfg.fgatir_polarity, cfg.seed.wrapping_add(2))?;

    let mut out = Outputs::create(&a.common)?;
    out.volume("t1", ph.t1)?;
    out.volume("pd", ph.pd)?;
    out.volume("labels", ph.labels)?;
    out.volume("brain_mask", ph.brain_mask)?;
    out.volume("mprage", mprage)?;
    out.volume("fgatir", fgatir)?;
    out.finish("phantom", &a.common, &cfg, inputs, Value::Null)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PreprocessConfig {
    sigma: f64,
    fcm: FcmConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            sigma: DEFAULT_SIGMA,
            fcm: FcmConfig::default(),
        }
    }
}

fn cmd_preprocess(a: PreprocessArgs) -> CliResult<()> {
    let mut cfg: PreprocessConfig = load_config(&a.common)?;
    if let Some(v) = a.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = a.fcm_clusters {
        cfg.fcm.n_clusters = v;
    }
    if let Some(v) = a.fcm_m {
        cfg.fcm.m = v;
    }
    if let Some(v) = a.fcm_max_iterations {
        cfg.fcm.max_iterations = v;
    }
    if let Some(v) = a.fcm_tolerance {
        cfg.fcm.tolerance = v;
    }
    announce(&a.common, "preprocess", &cfg);
    if !(cfg.sigma > 0.0 && cfg.sigma.is_finite()) {
        return Err(usage(format!("sigma must be positive, got {}", cfg.sigma)));
    }
    if cfg.fcm.n_clusters < 2 || !(cfg.fcm.m > 1.0) || !(cfg.fcm.tolerance > 0.0) {
        return Err(usage("fcm needs at least 2 clusters, m > 1 and a positive tolerance"));
    }

    let mut inputs = Inputs::default();
    let mprage = inputs.scalar(&a.mprage)?;
    let fgatir = inputs.scalar(&a.fgatir)?;
    let mask = inputs.label(&a.mask)?;

    let b_m = estimate_bias(&mprage, Some(&mask), cfg.sigma).map_err(|e| in_file(&a.mprage, e))?;
    let b_f = estimate_bias(&fgatir, Some(&mask), cfg.sigma).map_err(|e| in_file(&a.fgatir, e))?;
    let b = harmonize_bias(&b_m, &b_f)?;
    let (m_corr, f_corr) = apply_bias_correction(&mprage, &fgatir, &b)?;
    let wm = wm_mask_from_mprage(&m_corr, &mask, &cfg.fcm)?;
    let (m_norm, f_norm, mu) = wm_normalize(&m_corr, &f_corr, &wm)?;

    let mut out = Outputs::create(&a.common)?;
    out.volume("mprage_norm", m_norm)?;
    out.volume("fgatir_norm", f_norm)?;
    out.volume("bias", b.into_volume())?;
    out.volume("wm_mask", wm)?;
    out.finish("preprocess", &a.common, &cfg, inputs, json!({ "wm_mean": mu }))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitCommandConfig {
    fit: FitConfig,
    tr: f64,
    ti_mprage: f64,
    ti_fgatir: f64,
    fgatir_polarity: Polarity,
}

impl Default for FitCommandConfig {
    fn default() -> Self {
        FitCommandConfig {
            fit: FitConfig::default(),
            tr: DEFAULT_TR,
            ti_mprage: MPRAGE_TI,
            ti_fgatir: FGATIR_TI,
            fgatir_polarity: Polarity::Magnitude,
        }
    }
}

fn cmd_fit(a: FitArgs) -> CliResult<()> {
    let mut cfg: FitCommandConfig = load_config(&a.common)?;
    if let Some(v) = a.tr {
        cfg.tr = v;
    }
    if let Some(v) = a.ti_mprage {
        cfg.ti_mprage = v;
    }
    if let Some(v) = a.ti_fgatir {
        cfg.ti_fgatir = v;
    }
    if let Some(p) = a.fgatir_polarity {
        cfg.fgatir_polarity = p.into();
    }
    announce(&a.common, "fit", &cfg);
    cfg.fit.validate().map_err(usage)?;
    AcquisitionParams::new(cfg.tr, cfg.ti_mprage).map_err(usage)?;
    AcquisitionParams::new(cfg.tr, cfg.ti_fgatir).map_err(usage)?;

    let mut inputs = Inputs::default();
    let mprage = inputs.scalar(&a.mprage)?;
    let fgatir = inputs.scalar(&a.fgatir)?;
    let mask = a.mask.as_deref().map(|p| inputs.label(p)).transpose()?;
    let maps = fit_volume_threaded(
        &mprage,
        &fgatir,
        cfg.fgatir_polarity,
        mask.as_ref(),
        cfg.tr,
        cfg.ti_mprage,
        cfg.ti_fgatir,
        &cfg.fit,
        a.common.threads,
    )?;

    let status = maps.status_labels();
    let mut counts = [0usize; 4];
    for &c in status.data() {
        counts[c as usize] += 1;
    }
    let mut out = Outputs::create(&a.common)?;
    out.volume("t1", maps.t1_map)?;
    out.volume("pd", maps.pd_map)?;
    out.volume("status", status)?;
    let summary = json!({
        "skipped_background": counts[0],
        "converged": counts[1],
        "clipped_at_bound": counts[2],
        "non_identifiable": counts[3],
    });
    out.finish("fit", &a.common, &cfg, inputs, summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthConfig {
    tr: f64,
    ti: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tr: DEFAULT_TR,
            ti: default_ti_list(),
        }
    }
}

fn ti_stem(ti: f64) -> String {
    if ti.fract() == 0.0 {
        format!("ti_{:04}", ti as u64)
    } else {
        format!("ti_{}", ti.to_string().replace('.', "p"))
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let mut cfg: SynthConfig = load_config(&a.common)?;
    if let Some(v) = a.tr {
        cfg.tr = v;
    }
    if let Some(list) = a.ti {
        cfg.ti = list;
    }
    if let Some([start, stop, step]) = a.ti_range {
        if !(step > 0.0 && start <= stop) {
            return Err(usage("--ti-range needs START <= STOP and STEP > 0"));
        }
        cfg.ti = ti_range(start, stop, step);
    }
    announce(&a.common, "synth", &cfg);
    if cfg.ti.is_empty() {
        return Err(usage("empty TI list"));
    }
    for &ti in &cfg.ti {
        AcquisitionParams::new(cfg.tr, ti).map_err(usage)?;
    }

    let mut inputs = Inputs::default();
    let t1 = inputs.scalar(&a.t1)?;
    let pd = inputs.scalar(&a.pd)?;
    t1.same_dims(&pd)?;

    let mut out = Outputs::create(&a.common)?;
    for &ti in &cfg.ti {
        out.volume(&ti_stem(ti), synthesize_ti(&t1, &pd, cfg.tr, ti))?;
    }
    let count = cfg.ti.len();
    out.finish("synth", &a.common, &cfg, inputs, json!({ "volumes": count }))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainCommandConfig {
    network: NetworkConfig,
    train: TrainConfig,
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg: TrainCommandConfig = load_config(&a.common)?;
    if let Some(s) = a.common.seed {
        cfg.network.seed = s;
    }
    if let Some(v) = a.base_channels {
        cfg.network.base_channels = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(c) = a.crop {
        cfg.train.crop_dims = c;
        if let Some(aug) = cfg.train.augmentation.as_mut() {
            aug.crop_dims = c;
        }
    }
    if a.no_augment {
        cfg.train.augmentation = None;
    }
    if a.constant_lr {
        cfg.train.schedule = LrSchedule::Constant;
    }
    announce(&a.common, "train", &cfg);
    cfg.network.validate().map_err(usage)?;
    cfg.train.validate().map_err(usage)?;
    if a.images.len() != a.labels.len() {
        return Err(usage(format!(
            "{} --image but {} --labels; they must pair up",
            a.images.len(),
            a.labels.len()
        )));
    }
    if a.val_images.len() != a.val_labels.len() {
        return Err(usage("--val-image and --val-labels must pair up"));
    }

    let mut inputs = Inputs::default();
    let mut load = |images: &[PathBuf], labels: &[PathBuf]| -> CliResult<Vec<Sample>> {
        images
            .iter()
            .zip(labels)
            .map(|(i, l)| {
                Ok(Sample {
                    image: inputs.scalar(i)?,
                    labels: inputs.label(l)?,
                })
            })
            .collect()
    };
    let dataset = load(&a.images, &a.labels)?;
    let validation = load(&a.val_images, &a.val_labels)?;

    let outcome = train(&dataset, &validation, &cfg.network, &cfg.train)?;
    let history = json!({
        "loss": outcome.loss_history,
        "validation_loss": outcome.validation_history,
        "learning_rate": outcome.learning_rates,
        "step_loss": outcome.step_losses,
        "stopped_early": outcome.stopped_early,
    });
    let mut out = Outputs::create(&a.common)?;
    out.bytes("model.ctnp".into(), &encode_checkpoint(&outcome.net)?)?;
    let mut text = serde_json::to_string_pretty(&history).map_err(Error::from)?;
    text.push('\n');
    out.bytes("history.json".into(), text.as_bytes())?;
    let summary = json!({
        "epochs_run": outcome.loss_history.len(),
        "final_loss": outcome.loss_history.last(),
        "parameters": outcome.net.parameter_count(),
    });
    out.finish("train", &a.common, &cfg, inputs, summary)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SegmentConfig {
    crop: Option<[usize; 3]>,
}

fn default_crop(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|d| (d / 16 * 16).min(96))
}

fn cmd_segment(a: SegmentArgs) -> CliResult<()> {
    let mut cfg: SegmentConfig = load_config(&a.common)?;
    if a.crop.is_some() {
        cfg.crop = a.crop;
    }
    let mut inputs = Inputs::default();
    let net = decode_checkpoint(&inputs.bytes(&a.model)?).map_err(|e| in_file(&a.model, e))?;
    let image = inputs.scalar(&a.image)?;
    let crop = cfg.crop.unwrap_or_else(|| default_crop(image.dims()));
    cfg.crop = Some(crop);
    announce(&a.common, "segment", &cfg);
    if crop.iter().zip(image.dims()).any(|(&c, d)| c > d || c % 16 != 0 || c < 32) {
        return Err(usage(format!(
            "crop {crop:?} must be multiples of 16, at least 32 and within the image dims {:?}",
            image.dims()
        )));
    }

    let inference = infer(&net, &image, crop)?;
    let mut out = Outputs::create(&a.common)?;
    for c in 0..inference.probabilities.channels() {
        out.volume(&format!("probs_{c:02}"), inference.probability_volume(c, &image))?;
    }
    out.volume("labels", inference.labels)?;
    out.finish("segment", &a.common, &cfg, inputs, Value::Null)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PostprocessConfig {
    min_thalamus_size: usize,
    min_fragment_size: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            min_thalamus_size: DEFAULT_MIN_THALAMUS_SIZE,
            min_fragment_size: DEFAULT_MIN_FRAGMENT_SIZE,
        }
    }
}

fn probability_file(dir: &Path, class: usize) -> PathBuf {
    let native = dir.join(format!("probs_{class:02}.ctnv"));
    if native.exists() {
        return native;
    }
    let nifti = dir.join(format!("probs_{class:02}.nii"));
    if nifti.exists() {
        nifti
    } else {
        native
    }
}

fn cmd_postprocess(a: PostprocessArgs) -> CliResult<()> {
    let mut cfg: PostprocessConfig = load_config(&a.common)?;
    if let Some(v) = a.min_thalamus_size {
        cfg.min_thalamus_size = v;
    }
    if let Some(v) = a.min_fragment_size {
        cfg.min_fragment_size = v;
    }
    announce(&a.common, "postprocess", &cfg);

    let mut inputs = Inputs::default();
    let seg = inputs.label(&a.seg)?;
    let [nx, ny, nz] = seg.dims();
    let mut probs = FeatureGrid::zeros([1, NUM_CLASSES, nz, ny, nx]);
    for c in 0..NUM_CLASSES {
        let p = inputs.scalar(&probability_file(&a.probs, c))?;
        seg.same_dims(&p)?;
        probs.channel_mut(0, c).copy_from_slice(p.data());
    }

    let filtered = thalamus_filter(&seg, cfg.min_thalamus_size)?;
    let refined = nucleus_refine(&filtered, &probs, cfg.min_fragment_size)?;
    let changed = seg.data().iter().zip(refined.data()).filter(|(a, b)| a != b).count();
    let mut out = Outputs::create(&a.common)?;
    out.volume("labels_pp", refined)?;
    out.finish("postprocess", &a.common, &cfg, inputs, json!({ "voxels_changed": changed }))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    groups: Option<PathBuf>,
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let mut cfg: EvalConfig = load_config(&a.common)?;
    if a.groups.is_some() {
        cfg.groups = a.groups;
    }
    announce(&a.common, "eval", &cfg);

    let schema = LabelSchema::default();
    let mut inputs = Inputs::default();
    let pred = inputs.label(&a.pred)?;
    let gt = inputs.label(&a.gt)?;
    let mapping = match &cfg.groups {
        Some(p) => {
            let text = String::from_utf8(inputs.bytes(p)?)
                .map_err(|_| Error::Schema(format!("{}: not UTF-8", p.display())))?;
            GroupMapping::from_json(&text, &schema).map_err(|e| in_file(p, e))?
        }
        None => GroupMapping::default(),
    };
    let report = metrics_report(&pred, &gt, &schema, &mapping)?;
    let mut out = Outputs::create(&a.common)?;
    out.bytes("report.csv".into(), report.as_bytes())?;
    out.finish("eval", &a.common, &cfg, inputs, Value::Null)?;
    print!("{report}");
    Ok(())
}
