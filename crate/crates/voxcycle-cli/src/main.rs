//! `voxcycle`: train, run, and inspect the 3D CycleGAN volume translator.
//!
//! Exit codes: 0 success, 2 usage/configuration error, 3 numeric failure.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use voxcycle::augment::augment_dataset;
use voxcycle::gradcheck;
use voxcycle::net::{LayerKind, LayerSpec, NetPadding, NetworkSpec};
use voxcycle::nifti::{read_nifti_file, write_nifti_file};
use voxcycle::tensor::{Activation, Dtype};
use voxcycle::train::{
    peek_precision, train, translate_volume, Checkpoint, Direction, Precision, TrainConfig,
    TrainError,
};
use voxcycle::volume::{Volume, DEFAULT_CROP_TARGET, DEFAULT_PERCENTILE};

#[derive(Parser)]
#[command(
    name = "voxcycle",
    version,
    about = "3D CycleGAN engine for unpaired T1 <-> fMRI volume translation"
)]
struct Cli {
    /// Seed for every randomized behavior of the subcommand
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Force single-threaded execution (results are bitwise identical either way)
    #[arg(long, global = true)]
    deterministic: bool,
    /// Cap the worker thread count (VOXCYCLE_THREADS does the same)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the four-network CycleGAN from a config file and/or flags
    Train(TrainArgs),
    /// Apply a trained generator to one volume or a directory of volumes
    Translate(TranslateArgs),
    /// Materialize rotation augmentation of a volume directory
    Augment(AugmentArgs),
    /// Crop to the working grid and normalize intensities
    Preprocess(PreprocessArgs),
    /// Print NIfTI header fields and intensity statistics
    Inspect(InspectArgs),
    /// Receptive field of a preset or custom convolution stack
    Rf(RfArgs),
    /// Run the double-precision finite-difference gradient suite
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file; flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Domain A volume directory
    #[arg(long)]
    data_a: Option<PathBuf>,
    /// Domain B volume directory
    #[arg(long)]
    data_b: Option<PathBuf>,
    /// Output directory for checkpoints and the metrics log
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_cycle: Option<f64>,
    #[arg(long)]
    pool_size: Option<usize>,
    /// Resume from a checkpoint file
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Resume even when the checkpoint was written under a different config
    #[arg(long)]
    force: bool,
    /// Validate the config, print all four layer tables and a full-size
    /// memory estimate, then exit without allocating training state
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input volume (.nii/.nii.gz) or a directory of volumes
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file (single input) or directory
    #[arg(long)]
    out: PathBuf,
    /// a2b or b2a
    #[arg(long)]
    direction: String,
}

#[derive(Args)]
struct AugmentArgs {
    /// Directory of input volumes
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Rotations per volume; the output also keeps each original
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Stddev of the per-axis rotation angles, degrees
    #[arg(long, default_value_t = 10.0)]
    sigma: f64,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Crop target as X,Y,Z (default 152,180,120)
    #[arg(long)]
    target: Option<String>,
    /// Crop offset as X,Y,Z (default: centered)
    #[arg(long)]
    offset: Option<String>,
    /// Skip intensity normalization
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct RfArgs {
    /// generator | discriminator
    #[arg(long)]
    preset: Option<String>,
    /// Custom stack as kernel×stride pairs, e.g. "4x2,4x2,4x2,4x1,4x1"
    #[arg(long)]
    layers: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Maximum accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    voxcycle::exec::configure_threads_from_env("VOXCYCLE_THREADS");
    if let Some(n) = cli.threads {
        voxcycle::exec::configure_threads(n);
    }
    if cli.deterministic {
        voxcycle::exec::set_sequential(true);
    }
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            classify_exit(&err)
        }
    };
    std::process::exit(code);
}

fn classify_exit(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(train_err) = cause.downcast_ref::<TrainError>() {
            return match train_err {
                TrainError::NonFinite { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<NumericFailure>().is_some() {
            return 3;
        }
    }
    2
}

/// Marker for numeric (exit 3) failures outside the trainer.
#[derive(Debug)]
struct NumericFailure(String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args, cli.seed, cli.deterministic),
        Command::Translate(args) => cmd_translate(args),
        Command::Augment(args) => cmd_augment(args, cli.seed),
        Command::Preprocess(args) => cmd_preprocess(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Rf(args) => cmd_rf(args),
        Command::Gradcheck(args) => cmd_gradcheck(args, cli.seed),
    }
}

fn cmd_train(args: TrainArgs, seed: u64, deterministic: bool) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => TrainConfig::new(PathBuf::new(), PathBuf::new(), PathBuf::from("voxcycle-out")),
    };
    if let Some(a) = args.data_a {
        cfg.data_a = a;
    }
    if let Some(b) = args.data_b {
        cfg.data_b = b;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        cfg.base_lr = lr;
    }
    if let Some(lc) = args.lambda_cycle {
        cfg.lambda_cycle = lc;
    }
    if let Some(ps) = args.pool_size {
        cfg.pool_capacity = ps;
    }
    if args.resume.is_some() {
        cfg.resume = args.resume;
    }
    if args.force {
        cfg.force_resume = true;
    }
    if seed != 0 {
        cfg.seed = seed;
    }
    if deterministic {
        cfg.deterministic = true;
    }

    if args.dry_run {
        return dry_run(&cfg);
    }
    let ckpt = train(&cfg)?;
    println!("training complete; final checkpoint: {}", ckpt.display());
    Ok(())
}

fn dry_run(cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    let gen = NetworkSpec::generator();
    let disc = NetworkSpec::discriminator();
    println!("configuration valid; seed {}", cfg.seed);
    println!();
    for (name, spec) in [
        ("G_A2B", &gen),
        ("G_B2A", &gen),
        ("D_A", &disc),
        ("D_B", &disc),
    ] {
        println!("==== {name} ====");
        print!("{}", spec.render_table());
        println!();
    }

    let dims = [
        DEFAULT_CROP_TARGET.2,
        DEFAULT_CROP_TARGET.1,
        DEFAULT_CROP_TARGET.0,
    ];
    let bytes = match cfg.precision {
        Precision::Single => 4usize,
        Precision::Double => 8,
    };
    let activations: usize = gen
        .shape_trace(dims)?
        .iter()
        .map(|(shape, _)| shape.iter().product::<usize>())
        .sum();
    let d_activations: usize = disc
        .shape_trace(dims)?
        .iter()
        .map(|(shape, _)| shape.iter().product::<usize>())
        .sum();
    let params = 2 * gen.parameter_count() + 2 * disc.parameter_count();
    // params + gradients + two Adam moments; caches keep roughly layer
    // inputs plus outputs (factor 2) for four generator passes and two
    // discriminator passes per step
    let state = params * bytes * 4;
    let caches = (4 * activations + 2 * d_activations) * 2 * bytes;
    let pools = 2 * cfg.pool_capacity * dims.iter().product::<usize>() * 4;
    println!(
        "full-size ({}x{}x{}) training memory estimate:",
        DEFAULT_CROP_TARGET.0, DEFAULT_CROP_TARGET.1, DEFAULT_CROP_TARGET.2
    );
    println!(
        "  parameters ({} scalars x 4 networks incl. grads + Adam): {:.2} GB",
        params,
        state as f64 / 1e9
    );
    println!("  forward caches: {:.2} GB", caches as f64 / 1e9);
    println!("  image pools ({} volumes): {:.2} GB", 2 * cfg.pool_capacity, pools as f64 / 1e9);
    println!(
        "  total: {:.2} GB",
        (state + caches + pools) as f64 / 1e9
    );
    println!(
        "forward-only translation needs about {:.2} GB of activations.",
        (2 * activations * bytes) as f64 / 1e9
    );
    Ok(())
}

fn nifti_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".nii") || name.ends_with(".nii.gz")
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn volume_stem(path: &Path) -> (String, &'static str) {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    match name.strip_suffix(".nii.gz") {
        Some(stem) => (stem.to_string(), ".nii.gz"),
        None => (
            name.strip_suffix(".nii").unwrap_or(name).to_string(),
            ".nii",
        ),
    }
}

fn cmd_translate(args: TranslateArgs) -> Result<()> {
    let direction: Direction = args.direction.parse().map_err(|e: String| anyhow!(e))?;
    let precision = peek_precision(&args.checkpoint)?;
    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        nifti_paths(&args.input)?
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        bail!("no .nii/.nii.gz volumes under {}", args.input.display());
    }
    let out_is_dir = args.input.is_dir();
    if out_is_dir {
        std::fs::create_dir_all(&args.out)?;
    }

    let translate_all = |paths: &[PathBuf], translate_one: &dyn Fn(&Volume) -> Result<Volume>| -> Result<()> {
        for path in paths {
            let (_, vol) = read_nifti_file(path)?;
            let out_vol = translate_one(&vol)
                .with_context(|| format!("translating {}", path.display()))?;
            if !out_vol.data.all_finite() {
                return Err(NumericFailure(format!(
                    "non-finite voxels translating {}",
                    path.display()
                ))
                .into());
            }
            let target = if out_is_dir {
                let (stem, ext) = volume_stem(path);
                args.out.join(format!("{stem}_{}{ext}", args.direction))
            } else {
                args.out.clone()
            };
            write_nifti_file(&out_vol, &target)?;
            println!("{} -> {}", path.display(), target.display());
        }
        Ok(())
    };

    match precision {
        Dtype::F32 => {
            let ckpt = Checkpoint::<f32>::load(&args.checkpoint)?;
            translate_all(&inputs, &|v| Ok(translate_volume(&ckpt, v, direction)?))
        }
        Dtype::F64 => {
            let ckpt = Checkpoint::<f64>::load(&args.checkpoint)?;
            translate_all(&inputs, &|v| Ok(translate_volume(&ckpt, v, direction)?))
        }
    }
}

fn cmd_augment(args: AugmentArgs, seed: u64) -> Result<()> {
    let paths = nifti_paths(&args.input)?;
    if paths.is_empty() {
        bail!("no .nii/.nii.gz volumes under {}", args.input.display());
    }
    std::fs::create_dir_all(&args.out)?;
    let mut volumes = Vec::with_capacity(paths.len());
    for path in &paths {
        volumes.push(read_nifti_file(path)?.1);
    }
    let augmented = augment_dataset(&volumes, args.n, args.sigma, seed)?;
    let per = args.n + 1;
    let mut written = 0usize;
    for (i, vol) in augmented.iter().enumerate() {
        let (stem, ext) = volume_stem(&paths[i / per]);
        let path = args.out.join(format!("{stem}_rot{:02}{ext}", i % per));
        write_nifti_file(vol, &path)?;
        written += 1;
    }
    println!(
        "wrote {written} volumes ({} originals x {} each) to {}",
        paths.len(),
        per,
        args.out.display()
    );
    Ok(())
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("expected X,Y,Z integers, got {s:?}"))?;
    if parts.len() != 3 {
        bail!("expected exactly three comma-separated values, got {s:?}");
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let (_, vol) = read_nifti_file(&args.input)?;
    let target = match &args.target {
        Some(t) => parse_triple(t)?,
        None => DEFAULT_CROP_TARGET,
    };
    let offset = match &args.offset {
        Some(o) => Some(parse_triple(o)?),
        None => None,
    };
    let cropped = vol.crop(target, offset)?;
    let result = if args.no_normalize {
        cropped
    } else {
        cropped.normalize_intensity(DEFAULT_PERCENTILE)?
    };
    write_nifti_file(&result, &args.out)?;
    let (nx, ny, nz) = result.dims_xyz();
    println!(
        "wrote {} ({nx}x{ny}x{nz}{})",
        args.out.display(),
        if args.no_normalize {
            ""
        } else {
            ", intensities in [-1, 1]"
        }
    );
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let (header, vol) = read_nifti_file(&args.input)?;
    let (nx, ny, nz) = header.dims_xyz();
    println!("file:        {}", args.input.display());
    println!("dims:        {nx} x {ny} x {nz}  (dim[0] = {})", header.dim[0]);
    let vs = header.voxel_size();
    println!("voxel size:  {} x {} x {} mm", vs.0, vs.1, vs.2);
    println!(
        "datatype:    code {} ({}), bitpix {}",
        header.datatype,
        match header.datatype {
            4 => "int16",
            16 => "float32",
            _ => "other",
        },
        header.bitpix
    );
    println!("vox_offset:  {}", header.vox_offset);
    println!(
        "scaling:     slope {} intercept {}",
        header.scl_slope, header.scl_inter
    );
    println!(
        "byte order:  {}",
        if header.little_endian { "little-endian" } else { "big-endian" }
    );
    let data = vol.data.data();
    let (mut lo, mut hi, mut sum, mut nonzero) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64, 0usize);
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v as f64;
        nonzero += (v != 0.0) as usize;
    }
    println!(
        "intensity:   min {lo}, max {hi}, mean {:.4}, nonzero {nonzero}/{}",
        sum / data.len() as f64,
        data.len()
    );
    Ok(())
}

fn parse_layer_list(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(',')
        .map(|pair| {
            let (k, st) = pair
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| anyhow!("expected KERNELxSTRIDE pairs, got {pair:?}"))?;
            Ok(LayerSpec {
                kind: LayerKind::Conv,
                filters: 1,
                kernel: k.trim().parse().context("bad kernel")?,
                stride: st.trim().parse().context("bad stride")?,
                activation: Activation::None,
                normalized: false,
            })
        })
        .collect()
}

fn cmd_rf(args: RfArgs) -> Result<()> {
    let spec = match (&args.preset, &args.layers) {
        (Some(name), None) => match name.as_str() {
            "discriminator" => NetworkSpec::discriminator(),
            "generator" => NetworkSpec::generator(),
            other => bail!("unknown preset {other:?}; use generator or discriminator"),
        },
        (None, Some(layers)) => NetworkSpec {
            name: "custom".into(),
            input_channels: 1,
            padding: NetPadding::Zero,
            layers: parse_layer_list(layers)?,
        },
        _ => bail!("pass exactly one of --preset or --layers"),
    };
    let rf = spec.receptive_field()?;
    println!(
        "receptive field: {rf} x {rf} x {rf} (recurrence r <- (r-1)*stride + kernel)"
    );
    if args.preset.as_deref() == Some("discriminator") {
        println!(
            "warning: this architecture is often quoted as a 51 x 51 x 51 PatchGAN; \
             the recurrence over its layers gives {rf}, and the two do not agree. \
             The recurrence value is reported."
        );
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs, seed: u64) -> Result<()> {
    let started = std::time::Instant::now();
    let reports = gradcheck::run_full_suite(seed);
    for r in &reports {
        println!(
            "{:<44} max rel err {:.3e}  ({} probes)",
            r.name, r.max_rel_err, r.probes
        );
    }
    let max = gradcheck::max_error(&reports);
    println!(
        "max relative error {max:.3e} over {} checks in {:.1}s",
        reports.len(),
        started.elapsed().as_secs_f64()
    );
    if max >= args.tolerance {
        return Err(NumericFailure(format!(
            "gradient check failed: {max:.3e} >= tolerance {:.1e}",
            args.tolerance
        ))
        .into());
    }
    println!("all gradients within tolerance {:.1e}", args.tolerance);
    Ok(())
}
