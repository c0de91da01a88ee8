//! `saabseg` command-line tool: phantom generation, training, prediction,
//! evaluation, unit-count sweeps and bundle inspection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use saabseg::bundle::{load_bundle, save_bundle};
use saabseg::cascade::CascadeConfig;
use saabseg::crf::CrfConfig;
use saabseg::data::pgm::{write_overlay, write_pgm_labels};
use saabseg::data::raw::write_raw;
use saabseg::data::{default_split_counts, load_image, write_phantom_set, DatasetManifest, Split};
use saabseg::metrics::{report_params, Pooling, FOREGROUND};
use saabseg::pipeline::{cascade_with_units, evaluate_records, predict, sweep_units, train_pipeline, TrainConfig};
use saabseg::Error;

#[derive(Parser)]
#[command(name = "saabseg", version, about = "Successive subspace learning segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model bundle on the train split of a manifest.
    Train(TrainArgs),
    /// Segment one image.
    Predict(PredictArgs),
    /// Report foreground Dice on one split.
    Eval(EvalArgs),
    /// Write a synthetic phantom dataset and its manifest.
    PhantomGen(PhantomArgs),
    /// Validation Dice across cascade depths and split seeds.
    Sweep(SweepArgs),
    /// Print parameter counts, kept channels and channel entropies.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Number of SSL units.
    #[arg(long)]
    units: Option<usize>,
    /// Kernels per unit, comma separated.
    #[arg(long, value_delimiter = ',')]
    kernels: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.8)]
    keep_ratio: f64,
    /// Boosting rounds.
    #[arg(long, default_value_t = 100)]
    rounds: usize,
    /// Maximum tree depth.
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Store a CRF configuration that leaves predictions unrefined.
    #[arg(long)]
    no_crf: bool,
    /// Keep every channel.
    #[arg(long)]
    no_featsel: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Refined label map (PGM).
    #[arg(long)]
    out_labels: PathBuf,
    /// Class probabilities as an H×W×4 raw tensor.
    #[arg(long)]
    out_probs: Option<PathBuf>,
    /// Colour overlay of the labels on the image (PPM).
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Average within each subject first, then across subjects.
    #[arg(long)]
    per_subject: bool,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4,5")]
    units: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    bundle: PathBuf,
}

fn train_config(args: &ModelArgs) -> saabseg::Result<TrainConfig> {
    let base = TrainConfig::default();
    let cascade = match (&args.kernels, args.units) {
        (Some(k), Some(u)) if k.len() != u => {
            return Err(Error::InvalidArgument(format!(
                "--kernels lists {} units but --units is {u}",
                k.len()
            )))
        }
        (Some(k), _) => CascadeConfig {
            kernels_per_unit: k.clone(),
            ..base.cascade.clone()
        },
        (None, Some(u)) => cascade_with_units(&base.cascade, u),
        (None, None) => base.cascade.clone(),
    };
    let config = TrainConfig {
        cascade,
        feature_selection: !args.no_featsel,
        keep_ratio: args.keep_ratio,
        gbdt: saabseg::gbdt::GbdtConfig {
            num_rounds: args.rounds,
            max_depth: args.depth,
            ..base.gbdt.clone()
        },
        crf: if args.no_crf { CrfConfig::disabled() } else { base.crf.clone() },
        seed: args.seed,
        ..base
    };
    config.cascade.validate()?;
    config.gbdt.validate()?;
    Ok(config)
}

fn train(args: &TrainArgs) -> saabseg::Result<()> {
    let manifest = DatasetManifest::read(&args.manifest)?;
    let config = train_config(&args.model)?;
    let (bundle, summary) = train_pipeline(&manifest, &config)?;
    save_bundle(&bundle, &args.out)?;
    let params = report_params(&bundle);
    eprintln!(
        "trained on {} slices, {} pixels; final log-loss {:.5}; cascade parameters {}; kept channels {}/{}",
        summary.slices,
        summary.sampled_pixels,
        summary.losses.last().copied().unwrap_or(f64::NAN),
        params.cascade,
        params.kept_channels,
        params.total_channels
    );
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn predict_cmd(args: &PredictArgs) -> saabseg::Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let image = load_image(&args.image)?;
    let out = predict(&bundle, &image)?;
    write_pgm_labels(&args.out_labels, &out.labels)?;
    if let Some(path) = &args.out_probs {
        write_raw(path, &out.probs)?;
    }
    if let Some(path) = &args.overlay {
        write_overlay(path, &out.image, &out.labels)?;
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> saabseg::Result<()> {
    let bundle = load_bundle(&args.bundle)?;
    let manifest = DatasetManifest::read(&args.manifest)?;
    let pooling = if args.per_subject { Pooling::Subject } else { Pooling::Slice };
    let records = manifest.split(args.split);
    let eval = evaluate_records(&bundle, &records, pooling)?;
    print!("{}", eval.report.to_tsv());
    eprintln!("average Dice before CRF: {:.4}", eval.raw_report.average);
    Ok(())
}

fn phantom_gen(args: &PhantomArgs) -> saabseg::Result<()> {
    std::fs::create_dir_all(&args.out_dir)?;
    let counts = default_split_counts(args.count);
    let manifest = write_phantom_set(&args.out_dir, args.count, args.seed, args.noise, counts)?;
    eprintln!(
        "wrote {} slices ({} train / {} val / {} test) to {}",
        manifest.records.len(),
        counts.0,
        counts.1,
        counts.2,
        args.out_dir.display()
    );
    Ok(())
}

fn sweep(args: &SweepArgs) -> saabseg::Result<()> {
    let manifest = DatasetManifest::read(&args.manifest)?;
    let base = TrainConfig {
        seed: args.seed,
        ..TrainConfig::default()
    };
    let rows = sweep_units(&manifest, &args.units, &base, args.seeds)?;
    println!("units\tmean_dice\tstd\tper_seed");
    for row in rows {
        let per_seed: Vec<String> = row.per_seed.iter().map(|v| format!("{v:.4}")).collect();
        println!("{}\t{:.4}\t{:.4}\t{}", row.units, row.mean, row.std, per_seed.join(","));
    }
    Ok(())
}

fn inspect(path: &Path) -> saabseg::Result<()> {
    let bundle = load_bundle(path)?;
    let mut out = String::new();
    writeln!(out, "format_version\t{}", bundle.format_version()).unwrap();
    writeln!(out, "seed\t{}", bundle.seed).unwrap();
    writeln!(out, "kernels\t{:?}", bundle.cascade.config.kernels_per_unit).unwrap();
    out.push('\n');
    out.push_str(&report_params(&bundle).to_tsv());
    out.push('\n');
    let sel = &bundle.selection;
    let kept: Vec<String> = sel
        .entropies
        .iter()
        .zip(&sel.keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| format!("u{}c{}", e.unit_index + 1, e.channel_index))
        .collect();
    writeln!(out, "kept\t{}", kept.join(",")).unwrap();
    out.push('\n');
    let names: Vec<String> = std::iter::once("BG")
        .chain(FOREGROUND)
        .map(|n| format!("H_{n}"))
        .collect();
    writeln!(out, "unit\tchannel\tkept\t{}\ttotal", names.join("\t")).unwrap();
    for (e, k) in sel.entropies.iter().zip(&sel.keep) {
        let per: Vec<String> = e.per_class_entropy.iter().map(|v| format!("{v:.4}")).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.4}",
            e.unit_index + 1,
            e.channel_index,
            u8::from(*k),
            per.join("\t"),
            e.total
        )
        .unwrap();
    }
    print!("{out}");
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::InvalidArgument(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval(a),
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Sweep(a) => sweep(a),
        Command::Inspect(a) => inspect(&a.bundle),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_root_cause() {
        let staged = |e: Error| Error::Stage {
            stage: "gbdt",
            source: Box::new(e),
        };
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), 2);
        assert_eq!(exit_code(&staged(Error::Numeric("x".into()))), 4);
        assert_eq!(exit_code(&staged(staged(Error::InvalidArgument("x".into())))), 2);
        assert_eq!(exit_code(&Error::Truncated("x")), 3);
        assert_eq!(exit_code(&Error::Consistency("x".into())), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 3);
    }
}
