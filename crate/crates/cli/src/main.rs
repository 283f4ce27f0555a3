//! `brainseg`: phantom generation, training, segmentation, evaluation and
//! kernel inspection for the multi-scale patch CNN.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brainseg_core::phantom::{DEFAULT_EXTENTS, DEFAULT_NOISE_SIGMA, DEFAULT_SPACING};
use brainseg_core::{
    aggregate, default_config, dump_kernels, evaluate, generate_context_phantom, generate_phantom, load_model,
    read_labels, read_mask, read_volume, save_model, scale_intensities, segment, train, write_labels, write_volume,
    Error, LabeledImage, Model, NetworkConfig, Result,
};
use clap::{Parser, Subcommand, ValueEnum};

use config::TrainFile;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "brainseg", version, about = "Multi-scale patch CNN for voxel-wise tissue segmentation")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FileFormat {
    Vhdr,
    Nii,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic image, label and mask triplets.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of classes, background included.
        #[arg(long, default_value_t = 9)]
        classes: usize,
        /// Extents as X,Y,Z.
        #[arg(long, value_delimiter = ',')]
        extents: Option<Vec<usize>>,
        /// Voxel spacing in mm as X,Y,Z.
        #[arg(long, value_delimiter = ',')]
        spacing: Option<Vec<f32>>,
        /// Standard deviation of the additive Gaussian noise.
        #[arg(long, default_value_t = DEFAULT_NOISE_SIGMA)]
        noise: f32,
        /// Number of phantoms; phantom `i` uses seed `seed + i`.
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, value_enum, default_value = "vhdr")]
        format: FileFormat,
        /// Four-class phantom whose outer band and core share one intensity.
        #[arg(long)]
        context: bool,
    },
    /// Train a network from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[training] seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `[training] threads`.
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides `[output] dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label every masked voxel of an image.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write one probability volume per class.
        #[arg(long)]
        probs: bool,
        #[arg(long, default_value_t = 512)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Compare predicted label maps with references.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long = "ref", num_args = 1.., required = true)]
        reference: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
        /// Class count, background included; inferred from the labels by default.
        #[arg(long)]
        classes: Option<usize>,
        /// Also write a run manifest here.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write one conv layer's kernels as a PGM grid and as text.
    DumpKernels {
        #[arg(long)]
        model: PathBuf,
        /// Patch size identifying the branch.
        #[arg(long)]
        branch: usize,
        /// Conv layer, counting from 1.
        #[arg(long, default_value_t = 1)]
        layer: usize,
        /// Writes `PREFIX.pgm`, `PREFIX.txt` and `PREFIX.manifest`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn triple<T: Copy>(flag: &str, v: Option<Vec<T>>, default: [T; 3]) -> Result<[T; 3]> {
    match v.as_deref() {
        None => Ok(default),
        Some(&[x, y, z]) => Ok([x, y, z]),
        Some(other) => Err(Error::Usage(format!("--{flag} needs 3 comma-separated values, got {}", other.len()))),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[allow(clippy::too_many_arguments)]
fn cmd_phantom(
    out: &Path,
    seed: u64,
    classes: usize,
    extents: Option<Vec<usize>>,
    spacing: Option<Vec<f32>>,
    noise: f32,
    count: u64,
    format: FileFormat,
    context: bool,
) -> Result<()> {
    let extents = triple("extents", extents, DEFAULT_EXTENTS)?;
    let spacing = triple("spacing", spacing, DEFAULT_SPACING)?;
    let ext = match format {
        FileFormat::Vhdr => "vhdr",
        FileFormat::Nii => "nii",
    };
    create_dir(out)?;
    let mut manifest = Manifest::new("phantom");
    manifest
        .setting("seed", seed)
        .setting("classes", if context { 4 } else { classes })
        .setting("extents", format!("{extents:?}"))
        .setting("spacing", format!("{spacing:?}"))
        .setting("noise", noise)
        .setting("count", count)
        .setting("format", ext)
        .setting("context", context);
    for i in 0..count {
        let s = seed + i;
        let p = if context {
            generate_context_phantom(extents, spacing, noise, s)?
        } else {
            generate_phantom(extents, spacing, classes, noise, s)?
        };
        let stem = if count == 1 { "phantom".to_string() } else { format!("phantom{i}") };
        for path in p.write(out, &stem, ext)? {
            log::info!("wrote {}", path.display());
            manifest.output(&path);
        }
    }
    manifest.write(&out.join("phantom.manifest"))
}

fn load_triplet(t: &config::Triplet, classes: Option<usize>) -> Result<LabeledImage> {
    let volume = read_volume(&t.image)?;
    let labels = read_labels(&t.labels, classes)?;
    let mask = read_mask(&t.mask)?;
    brainseg_core::validate_geometry(&volume, &mask, Some(&labels))?;
    let scaled = scale_intensities(&volume, &mask)?;
    LabeledImage::new(scaled.volume, labels, mask)
}

fn network_config(file: &TrainFile, classes: usize) -> Result<NetworkConfig> {
    let mut cfg = default_config(classes)?;
    if let Some(b) = &file.branches {
        cfg = cfg.with_branches(b)?;
    }
    if !file.custom_branches.is_empty() {
        cfg.branches = file.custom_branches.clone();
    }
    cfg.seed = file.training.seed;
    cfg.dropout_keep = file.training.dropout_keep;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(config: &Path, seed: Option<u64>, threads: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::Io {
        path: config.to_path_buf(),
        source: e,
    })?;
    let base = config.parent().unwrap_or(Path::new("."));
    let mut file = TrainFile::parse(&text, base).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    if let Some(s) = seed {
        file.training.seed = s;
    }
    if let Some(t) = threads {
        file.training.threads = t;
    }
    if out.is_some() {
        file.output_dir = out;
    }
    file.training.validate()?;
    let out = file
        .output_dir
        .clone()
        .ok_or_else(|| Error::Usage("no output directory: pass --out or set [output] dir".into()))?;

    let mut images = Vec::new();
    for t in &file.train {
        images.push(load_triplet(t, file.classes)?);
    }
    let classes = file
        .classes
        .unwrap_or_else(|| images.iter().map(|i| i.labels.num_classes()).max().unwrap_or(2));
    let mut validation = Vec::new();
    for t in &file.validate {
        validation.push(load_triplet(t, Some(classes))?);
    }
    let mut net = network_config(&file, classes)?;
    net.plane = images[0].volume.plane;
    let mut model = Model::<f32>::new(net)?;
    log::info!("training {} parameters on {} images", model.num_params(), images.len());

    let mut manifest = Manifest::new("train");
    manifest.setting("classes", classes).setting("parameters", model.num_params());
    for t in file.train.iter().chain(&file.validate) {
        manifest.input(&t.image)?.input(&t.labels)?.input(&t.mask)?;
    }
    let history = train(&mut model, &images, &file.training, &validation)?;

    create_dir(&out)?;
    let ckpt = out.join("model.ckpt");
    save_model(&model, &ckpt)?;
    let hist = out.join("history.csv");
    std::fs::write(&hist, history.to_csv()).map_err(|e| Error::Io {
        path: hist.clone(),
        source: e,
    })?;
    manifest.output(&ckpt).output(&hist);
    // The echo pins the class count so a rerun from it reads labels the same way.
    file.classes = Some(classes);
    let echo = format!("{}\n{}", manifest.render("# "), file.to_text());
    let path = out.join("manifest.cfg");
    std::fs::write(&path, echo).map_err(|e| Error::Io { path, source: e })
}

#[allow(clippy::too_many_arguments)]
fn cmd_segment(
    model_path: &Path,
    image: &Path,
    mask_path: &Path,
    out: &Path,
    probs: bool,
    batch: usize,
    threads: usize,
) -> Result<()> {
    let model = load_model::<f32>(model_path, None)?;
    let volume = read_volume(image)?;
    let mask = read_mask(mask_path)?;
    brainseg_core::validate_geometry(&volume, &mask, None)?;
    let scaled = scale_intensities(&volume, &mask)?;
    let seg = segment(&scaled.volume, &mask, &model, batch, threads, probs)?;
    let mut manifest = Manifest::new("segment");
    manifest.setting("batch", batch).setting("threads", threads).setting("probs", probs);
    manifest.input(model_path)?.input(image)?.input(mask_path)?;
    write_labels(&seg.labels, out)?;
    manifest.output(out);
    if let Some(p) = &seg.probabilities {
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("labels");
        let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("vhdr");
        let dir = out.parent().unwrap_or(Path::new(""));
        for (c, v) in p.iter().enumerate() {
            let path = dir.join(format!("{stem}_prob{c}.{ext}"));
            write_volume(v, &path)?;
            manifest.output(&path);
        }
    }
    manifest.write(&with_suffix(out, ".manifest"))
}

fn cmd_evaluate(
    pred: &[PathBuf],
    reference: &[PathBuf],
    format: ReportFormat,
    classes: Option<usize>,
    manifest_path: Option<&Path>,
) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::Usage(format!(
            "{} predictions but {} references",
            pred.len(),
            reference.len()
        )));
    }
    let mut reports = Vec::new();
    for (p, r) in pred.iter().zip(reference) {
        reports.push(evaluate(&read_labels(p, classes)?, &read_labels(r, classes)?)?);
    }
    let text = match (format, reports.as_slice()) {
        (ReportFormat::Table, [one]) => one.to_table(),
        (ReportFormat::Csv, [one]) => one.to_csv(),
        (ReportFormat::Table, many) => aggregate(many).to_table(),
        (ReportFormat::Csv, many) => aggregate(many).to_csv(),
    };
    print!("{text}");
    if let Some(path) = manifest_path {
        let mut m = Manifest::new("evaluate");
        if let Some(n) = classes {
            m.setting("classes", n);
        }
        for p in pred.iter().chain(reference) {
            m.input(p)?;
        }
        m.write(path)?;
    }
    Ok(())
}

fn cmd_dump_kernels(model_path: &Path, branch: usize, layer: usize, out: &Path) -> Result<()> {
    let model = load_model::<f32>(model_path, None)?;
    let image = with_suffix(out, ".pgm");
    let text = with_suffix(out, ".txt");
    let grid = dump_kernels(&model, branch, layer, &image, &text)?;
    log::info!("{} kernels in a {}×{} image", grid.tiles, grid.width, grid.height);
    let mut m = Manifest::new("dump-kernels");
    m.setting("branch", branch).setting("layer", layer).input(model_path)?;
    m.output(&image).output(&text);
    m.write(&with_suffix(out, ".manifest"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            out,
            seed,
            classes,
            extents,
            spacing,
            noise,
            count,
            format,
            context,
        } => cmd_phantom(&out, seed, classes, extents, spacing, noise, count, format, context),
        Command::Train {
            config,
            seed,
            threads,
            out,
        } => cmd_train(&config, seed, threads, out),
        Command::Segment {
            model,
            image,
            mask,
            out,
            probs,
            batch,
            threads,
        } => cmd_segment(&model, &image, &mask, &out, probs, batch, threads),
        Command::Evaluate {
            pred,
            reference,
            format,
            classes,
            manifest,
        } => cmd_evaluate(&pred, &reference, format, classes, manifest.as_deref()),
        Command::DumpKernels {
            model,
            branch,
            layer,
            out,
        } => cmd_dump_kernels(&model, branch, layer, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
