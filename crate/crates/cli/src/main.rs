//! `xexplain` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use xexplain::ablation::{AblationMode, MASKED_MANIFEST};
use xexplain::superpixel_match::SegmentCache;
use xexplain::*;

#[derive(Parser)]
#[command(name = "xexplain", version, about = "Case-based explanations for image classifiers")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and store the latent of every image in a dataset manifest.
    BuildIndex(BuildIndexArgs),
    /// Explain one image and render the result.
    Explain(ExplainArgs),
    /// Inclusion/occlusion ablation over a dataset.
    Ablate(AblateArgs),
    /// Write copies of the indexed images with their salient regions occluded.
    MaskDataset(MaskDatasetArgs),
    /// Draw an existing explanation record.
    Render(RenderArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// ONNX graph exposing `conv_features`, `latent` and `logits`.
    #[arg(long)]
    model: PathBuf,
    /// Manifest JSON; defaults to `manifest.json` next to the model.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<ModelBundle> {
        let manifest = self
            .manifest
            .clone()
            .unwrap_or_else(|| self.model.with_file_name("manifest.json"));
        load_model(&self.model, manifest)
    }
}

#[derive(Args)]
struct BuildIndexArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset manifest: JSON array of {image_path, label, split}.
    #[arg(long)]
    dataset: PathBuf,
    /// Index file to write (metadata goes to `<out>.meta.json`).
    #[arg(long)]
    out: PathBuf,
    /// Leave unreadable images out instead of failing.
    #[arg(long)]
    skip_unreadable: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Latent,
    Superpixel,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Saliency {
    Cam,
    Fam,
    Random,
    Lime,
    Logit,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, value_enum, default_value = "latent")]
    method: Method,
    /// Latent saliency threshold, a number >= 1 or `inf`.
    #[arg(long, default_value = "5")]
    alpha: RelativeThreshold,
    /// Superpixel saliency threshold, a number >= 1 or `inf`.
    #[arg(long, default_value = "inf")]
    beta: RelativeThreshold,
    #[arg(long, default_value_t = index::DEFAULT_POOL)]
    pool: usize,
    #[arg(long, default_value_t = latent_match::DEFAULT_K_FEATURES)]
    k_features: usize,
    #[arg(long, default_value_t = superpixels::DEFAULT_SEGMENTS)]
    segments: usize,
    /// cam|fam|random for latent (default cam), lime|logit for superpixel
    /// (default lime).
    #[arg(long, value_enum)]
    saliency: Option<Saliency>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Only write the JSON record.
    #[arg(long)]
    no_render: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Include,
    Occlude,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Comma-separated: cam, fam, random, logit, lime.
    #[arg(long, value_delimiter = ',', default_value = "cam,fam,random,logit,lime")]
    methods: Vec<AblationMethod>,
    /// Comma-separated superpixel counts.
    #[arg(long, value_delimiter = ',', default_value = "30")]
    segments: Vec<usize>,
    #[arg(long, value_enum, default_value = "include")]
    mode: Mode,
    #[arg(long, default_value_t = 500)]
    n_images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MaskKind {
    Latent,
    Superpixel,
    Full,
}

#[derive(Args)]
struct MaskDatasetArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, value_enum, default_value = "superpixel")]
    method: MaskKind,
    /// Map used with `--method latent`.
    #[arg(long, value_enum, default_value = "cam")]
    saliency: Saliency,
    /// Threshold for `--method latent`.
    #[arg(long, default_value = "5")]
    alpha: RelativeThreshold,
    /// Threshold for `--method superpixel`.
    #[arg(long, default_value = "inf")]
    beta: RelativeThreshold,
    #[arg(long, default_value_t = superpixels::DEFAULT_SEGMENTS)]
    segments: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// An `.explanation.json` record.
    #[arg(long)]
    record: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Output file stem; defaults to the test image's stem.
    #[arg(long)]
    stem: Option<String>,
}

/// Process exit status per failure class.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Parameter(_) => 2,
        Error::Contract(_) | Error::Decomposition { .. } | Error::Backend(_) => 3,
        Error::NoMatch(_) => 5,
        _ => 4,
    }
}

fn usage(msg: String) -> Error {
    Error::Parameter(msg)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn map_kind(s: Saliency) -> Option<MapKind> {
    match s {
        Saliency::Cam => Some(MapKind::Cam),
        Saliency::Fam => Some(MapKind::Fam),
        Saliency::Random => Some(MapKind::Random),
        _ => None,
    }
}

fn build_index_cmd(a: &BuildIndexArgs) -> Result<()> {
    let bundle = a.model.load()?;
    let entries = read_dataset_manifest(&a.dataset)?;
    let mode = if a.skip_unreadable {
        OnUnreadable::Skip
    } else {
        OnUnreadable::Abort
    };
    let index = build_index(&bundle, &entries, mode)?;
    index.save(&a.out)?;
    info!("indexed {} of {} images", index.count(), entries.len());
    println!("{}", a.out.display());
    Ok(())
}

fn explain_cmd(a: &ExplainArgs) -> Result<()> {
    let bundle = a.model.load()?;
    let index = LatentIndex::load(&a.index)?;
    let image = bundle.load_image(&a.image)?;
    let record = match a.method {
        Method::Latent => {
            let saliency = a.saliency.unwrap_or(Saliency::Cam);
            let method = map_kind(saliency)
                .ok_or_else(|| usage("latent explanations take --saliency cam, fam or random".into()))?;
            let config = LatentConfig {
                alpha: a.alpha,
                pool: a.pool,
                k_features: a.k_features,
                method,
                seed: a.seed,
                ..LatentConfig::default()
            };
            let cache = ConvCache::default();
            explain_latent(&bundle, &index, &image, &config, Some(&cache))?
        }
        Method::Superpixel => {
            let test_saliency = match a.saliency.unwrap_or(Saliency::Lime) {
                Saliency::Lime => TestSaliency::Lime,
                Saliency::Logit => TestSaliency::Logit,
                _ => return Err(usage("superpixel explanations take --saliency lime or logit".into())),
            };
            let config = SuperpixelConfig {
                beta: a.beta,
                pool: a.pool,
                k_features: a.k_features,
                segments: a.segments,
                test_saliency,
                seed: a.seed,
                ..SuperpixelConfig::default()
            };
            let cache = SegmentCache::from_env()?;
            explain_superpixel(&bundle, &index, &image, &config, cache.as_ref())?
        }
    };
    for w in &record.warnings {
        log::warn!("{w}");
    }
    std::fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    let stem = stem_of(&a.image);
    let json = a.out.join(format!("{stem}.explanation.json"));
    record.save(&json)?;
    println!("{}", json.display());
    if !a.no_render {
        let files = render_explanation(&bundle, &record, &a.out, &stem)?;
        println!("{}", files.overlay.display());
        println!("{}", files.composite.display());
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let bundle = a.model.load()?;
    let dataset = read_dataset_manifest(&a.dataset)?;
    let config = AblationConfig {
        methods: a.methods.clone(),
        segment_counts: a.segments.clone(),
        mode: match a.mode {
            Mode::Include => AblationMode::Include,
            Mode::Occlude => AblationMode::Occlude,
        },
        n_images: a.n_images,
        seed: a.seed,
        lime: LimeConfig::default(),
    };
    let result = run_ablation(&bundle, &dataset, &config)?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let p = a.out.join(name);
        std::fs::write(&p, text).map_err(|source| Error::Io { path: p.clone(), source })?;
        Ok(p)
    };
    std::fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    let mode = config.mode.name();
    println!("{}", write(&format!("ablation_{mode}.csv"), result.to_csv())?.display());
    println!("{}", write(&format!("ablation_{mode}_summary.csv"), result.summary_csv())?.display());
    if !result.failures.is_empty() {
        log::warn!("{} images failed and were left out", result.failures.len());
    }
    Ok(())
}

fn mask_dataset_cmd(a: &MaskDatasetArgs) -> Result<()> {
    let bundle = a.model.load()?;
    let index = LatentIndex::load(&a.index)?;
    let (method, threshold) = match a.method {
        MaskKind::Latent => {
            let kind = map_kind(a.saliency)
                .ok_or_else(|| usage("latent masking takes --saliency cam, fam or random".into()))?;
            (MaskMethod::Latent(kind), a.alpha)
        }
        MaskKind::Superpixel => (MaskMethod::Superpixel { segments: a.segments }, a.beta),
        MaskKind::Full => (MaskMethod::Full, a.beta),
    };
    let entries = generate_masked_dataset(&bundle, &index, method, threshold, &a.out, a.seed)?;
    info!("wrote {} masked images", entries.len());
    println!("{}", a.out.join(MASKED_MANIFEST).display());
    Ok(())
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let bundle = a.model.load()?;
    let record = ExplanationRecord::load(&a.record)?;
    let stem = a
        .stem
        .clone()
        .unwrap_or_else(|| stem_of(Path::new(&record.test_image_path)));
    let files = render_explanation(&bundle, &record, &a.out, &stem)?;
    println!("{}", files.overlay.display());
    for n in &files.neighbors {
        println!("{}", n.display());
    }
    println!("{}", files.composite.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BuildIndex(a) => build_index_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::MaskDataset(a) => mask_dataset_cmd(a),
        Command::Render(a) => render_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
