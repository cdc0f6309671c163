use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refsep::eval::edge_histogram_report;
use refsep::history::History;
use refsep::pipeline::{
    evaluate, extract_examples, regen_examples, timing_report, train_depth_stage, train_extract_stage,
    train_regen_stage, Ablation, EvalReport, Pipeline, PipelineConfig,
};
use refsep::synth::{generate_sample, load_dataset, read_stack, synth_dataset, MixtureSample, SynthConfig};
use refsep::depth::DepthNet;
use refsep::Result;

type Real = f32;

#[derive(Parser)]
#[command(name = "refsep", version, about = "Multi-view reflection removal")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for reports, loss curves and images.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    /// Replace edge regeneration with two-cluster k-means.
    #[arg(long, global = true)]
    no_regen: bool,
    /// Train the edge generator without critics.
    #[arg(long, global = true)]
    no_discriminators: bool,
    /// Zero the reflection-masked image input of the extractor.
    #[arg(long, global = true)]
    no_i_mr: bool,
    /// Zero the background-edge input of the extractor.
    #[arg(long, global = true)]
    no_i_mb: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset into the dataset directory.
    Synth {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the edge depth network.
    TrainDepth,
    /// Train the edge regeneration WGAN (needs a depth checkpoint).
    TrainRegen,
    /// Train the background extractor on ground-truth edge masks.
    TrainExtract,
    /// Run the trained pipeline on one directory of five views.
    Infer {
        /// Directory holding view_0.png … view_4.png.
        #[arg(long)]
        input: PathBuf,
        /// Also write depth, labels and edge maps.
        #[arg(long)]
        intermediates: bool,
    },
    /// Score the held-out samples and write the edge histogram.
    Eval {
        #[arg(long, default_value_t = 32)]
        bins: usize,
    },
    /// Train any missing variant checkpoints and compare all variants.
    Ablate,
    /// Time each stage.
    Timing {
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Time one synthetic square image of this size instead of the held-out set.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.out_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(d) = &c.dataset_dir {
        cfg.dataset_dir = d.clone();
    }
    if let Some(d) = &c.checkpoint_dir {
        cfg.checkpoint_dir = d.clone();
    }
    let a = &mut cfg.ablation;
    a.no_regen |= c.no_regen;
    a.no_discriminators |= c.no_discriminators;
    a.no_i_mr |= c.no_i_mr;
    a.no_i_mb |= c.no_i_mb;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| refsep::Error::io(dir, e))
}

fn save_losses(cfg: &PipelineConfig, name: &str, history: &History) -> Result<()> {
    let dir = cfg.output_dir.join("losses");
    create_dir(&dir)?;
    let path = dir.join(format!("{name}.csv"));
    history.save_csv(&path)?;
    eprintln!("losses -> {}", path.display());
    Ok(())
}

fn training_set(cfg: &PipelineConfig) -> Result<Vec<MixtureSample<Real>>> {
    let mut data = load_dataset(&cfg.dataset_dir)?;
    let keep = cfg.split(&data)?.0.len();
    data.truncate(keep);
    Ok(data)
}

fn held_out(cfg: &PipelineConfig) -> Result<(usize, Vec<MixtureSample<Real>>)> {
    let mut data = load_dataset(&cfg.dataset_dir)?;
    let first = cfg.split(&data)?.0.len();
    Ok((first, data.split_off(first)))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn train_depth(cfg: &PipelineConfig) -> Result<()> {
    let data = training_set(cfg)?;
    eprintln!("training depth net on {} samples", data.len());
    let (model, history) = train_depth_stage(cfg, &data)?;
    create_dir(&cfg.checkpoint_dir)?;
    model.save(&cfg.depth_checkpoint())?;
    save_losses(cfg, "depth", &history)?;
    eprintln!("checkpoint -> {}", cfg.depth_checkpoint().display());
    Ok(())
}

fn train_regen(cfg: &PipelineConfig) -> Result<()> {
    if cfg.ablation.no_regen {
        return Err(refsep::Error::Config("edge regeneration is disabled for this variant".into()));
    }
    let data = training_set(cfg)?;
    let mut depth: DepthNet<Real> = DepthNet::load(&cfg.depth_checkpoint())?;
    let examples = regen_examples(cfg, &mut depth, &data)?;
    eprintln!("training edge regeneration on {} samples", examples.len());
    let (model, history) = train_regen_stage(cfg, &examples)?;
    model.save(&cfg.regen_checkpoint())?;
    save_losses(cfg, &file_stem(&cfg.regen_checkpoint()), &history)?;
    eprintln!("checkpoint -> {}", cfg.regen_checkpoint().display());
    Ok(())
}

fn train_extract(cfg: &PipelineConfig) -> Result<()> {
    let data = training_set(cfg)?;
    let examples = extract_examples(cfg, &data)?;
    eprintln!("training background extractor on {} samples", examples.len());
    let (model, history) = train_extract_stage(cfg, &examples)?;
    create_dir(&cfg.checkpoint_dir)?;
    model.save(&cfg.extractor_checkpoint())?;
    save_losses(cfg, &file_stem(&cfg.extractor_checkpoint()), &history)?;
    eprintln!("checkpoint -> {}", cfg.extractor_checkpoint().display());
    Ok(())
}

fn eval_variant(cfg: &PipelineConfig, samples: &(usize, Vec<MixtureSample<Real>>)) -> Result<EvalReport> {
    let mut pipeline = Pipeline::<Real>::load(cfg.clone())?;
    evaluate(&mut pipeline, &samples.1, samples.0)
}

fn eval(cfg: &PipelineConfig, bins: usize) -> Result<()> {
    let held = held_out(cfg)?;
    let mut report = eval_variant(cfg, &held)?;
    let mixtures: Vec<_> = held.1.iter().map(|s| s.reference().clone()).collect();
    let backgrounds: Vec<_> = held.1.iter().map(|s| s.weighted_background()).collect();
    let hist = edge_histogram_report(&mixtures, &backgrounds, cfg.sigma, bins)?;
    hist.save(&cfg.output_dir, "histogram")?;
    report.histogram = Some(hist);
    let stem = format!("eval-{}", cfg.ablation.tag());
    report.save(&cfg.output_dir, &stem)?;
    print!("{}", report.summary());
    Ok(())
}

fn ablate(cfg: &PipelineConfig) -> Result<()> {
    if !cfg.depth_checkpoint().exists() {
        train_depth(cfg)?;
    }
    let held = held_out(cfg)?;
    let mut rows = Vec::new();
    for ablation in Ablation::table() {
        let variant = PipelineConfig { ablation, ..cfg.clone() };
        if !ablation.no_regen && !variant.regen_checkpoint().exists() {
            train_regen(&variant)?;
        }
        if !variant.extractor_checkpoint().exists() {
            train_extract(&variant)?;
        }
        let report = eval_variant(&variant, &held)?;
        report.save(&cfg.output_dir, &format!("eval-{}", ablation.tag()))?;
        eprintln!("{:<18} {:.3} dB", report.variant, report.mean_output_psnr);
        rows.push(report);
    }
    let mut csv = String::from("variant,mean_input_psnr_db,mean_output_psnr_db,gain_db\n");
    let mut summary = String::new();
    for r in &rows {
        let gain = r.mean_output_psnr - r.mean_input_psnr;
        csv.push_str(&format!("{},{:.4},{:.4},{:.4}\n", r.variant, r.mean_input_psnr, r.mean_output_psnr, gain));
        summary.push_str(&format!("{:<18} {:>8.3} dB  ({:+.3})\n", r.variant, r.mean_output_psnr, gain));
    }
    let full = rows[0].mean_output_psnr;
    for r in &rows[1..] {
        let verdict = if full > r.mean_output_psnr { "above" } else { "not above" };
        summary.push_str(&format!("full is {verdict} {}\n", r.variant));
    }
    create_dir(&cfg.output_dir)?;
    let write = |name: &str, text: &str| {
        let p = cfg.output_dir.join(name);
        std::fs::write(&p, text).map_err(|e| refsep::Error::io(&p, e))
    };
    write("ablation.csv", &csv)?;
    write("ablation.txt", &summary)?;
    print!("{summary}");
    Ok(())
}

fn timing(cfg: &PipelineConfig, repeats: usize, size: Option<usize>) -> Result<()> {
    let mut pipeline = Pipeline::<Real>::load(cfg.clone())?;
    let stacks = match size {
        Some(n) => {
            let synth = SynthConfig {
                height: n,
                width: n,
                ..cfg.synth.clone()
            };
            vec![generate_sample::<Real>(&synth, cfg.seed)?.stack]
        }
        None => held_out(cfg)?.1.into_iter().map(|s| s.stack).collect(),
    };
    let report = timing_report(&mut pipeline, &stacks, repeats)?;
    report.save(&cfg.output_dir)?;
    print!("{}", report.summary());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config(&cli.common)?;
    match cli.command {
        Command::Synth { count } => {
            let synth = SynthConfig {
                count: count.unwrap_or(cfg.synth.count),
                ..cfg.synth.clone()
            };
            synth_dataset(&synth, cfg.seed, &cfg.dataset_dir)?;
            eprintln!("{} samples -> {}", synth.count, cfg.dataset_dir.display());
        }
        Command::TrainDepth => train_depth(&cfg)?,
        Command::TrainRegen => train_regen(&cfg)?,
        Command::TrainExtract => train_extract(&cfg)?,
        Command::Infer { input, intermediates } => {
            let stack = read_stack::<Real>(&input)?;
            let mut pipeline = Pipeline::<Real>::load(cfg.clone())?;
            let out = pipeline.run(&stack)?;
            out.save(&cfg.output_dir, intermediates)?;
            eprintln!("outputs -> {}", cfg.output_dir.display());
        }
        Command::Eval { bins } => eval(&cfg, bins)?,
        Command::Ablate => ablate(&cfg)?,
        Command::Timing { repeats, size } => timing(&cfg, repeats, size)?,
        Command::ShowConfig => {
            use std::io::Write;
            let _ = write!(std::io::stdout(), "{}", cfg.to_kv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
