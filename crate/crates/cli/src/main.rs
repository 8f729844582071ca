//! `hdccl`: generate synthetic change-captioning data, train the model,
//! verify gradients, evaluate captions, run ablation presets, and export
//! vote-map / attention heatmaps.
//!
//! Exit codes: 0 success, 1 runtime or data errors, 2 usage errors.

use clap::{Args, Parser, Subcommand};
use hdccl_core::error::Error as CoreError;
use hdccl_core::evalkit::{self, MetricReport};
use hdccl_core::model::{self, Ablation, PairInput};
use hdccl_core::scenegen::{self, GenConfig};
use hdccl_core::trainer::{self, TrainConfig};
use hdccl_core::pgm;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hdccl", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene-pair dataset (JSONL).
    GenData(GenDataArgs),
    /// Train a model from a JSON config file.
    Train(TrainArgs),
    /// Verify analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Evaluate a checkpoint: BLEU-4, ROUGE-L, change detection, object stats.
    Eval(EvalArgs),
    /// Train a named ablation variant of a base config.
    Ablate(AblateArgs),
    /// Export vote-map, mask, and cross-attention heatmaps as ASCII PGM.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs to generate.
    #[arg(long)]
    pairs: u64,
    /// Master seed (HDCCL_SEED overrides).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    max_shift: i64,
    #[arg(long, default_value_t = 2)]
    changes: usize,
    #[arg(long, default_value_t = 0.4)]
    min_overlap: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config mirroring the training configuration fields.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Component to verify (or "all").
    #[arg(long)]
    component: String,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to evaluate on (defaults to the checkpoint's dataset).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which split to score: train, val, test, or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Where to write the metric report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Variant: no-mask, random-mask, random-direction-window,
    /// no-direction-window, no-hcm-occ, or none.
    #[arg(long)]
    variant: String,
    /// Base JSON config.
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory (default: config out_dir + variant).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Index of the pair to visualize.
    #[arg(long, default_value_t = 0)]
    pair: usize,
    /// Output directory for the PGM files.
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::GradCheck(args) => grad_check(args),
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => ablate(args),
        Command::Heatmap(args) => heatmap(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage = err
                .downcast_ref::<CoreError>()
                .map(|e| matches!(e, CoreError::Usage(_)))
                .unwrap_or(false);
            if usage {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn seed_override(seed: u64) -> u64 {
    match std::env::var("HDCCL_SEED") {
        Ok(text) => text.parse().unwrap_or(seed),
        Err(_) => seed,
    }
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let seed = seed_override(args.seed);
    let config = GenConfig {
        height: args.height,
        width: args.width,
        max_shift: args.max_shift,
        num_changes: args.changes,
        min_overlap_fraction: args.min_overlap,
        ..GenConfig::default()
    };
    let mut records = Vec::with_capacity(args.pairs as usize);
    for i in 0..args.pairs {
        records.push(scenegen::generate_pair(
            seed.wrapping_add(i.wrapping_mul(0x9e37_79b9)),
            &config,
        )?);
    }
    scenegen::write_dataset(&records, &args.out)?;
    println!("wrote {} pairs to {}", records.len(), args.out.display());
    Ok(())
}

fn load_config(path: &PathBuf) -> anyhow::Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let config: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
    Ok(config)
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(dir) = args.out_dir {
        config.out_dir = dir.display().to_string();
    }
    config.seed = seed_override(config.seed);
    let summary = trainer::train(&config)?;
    let first = summary.reports.first().expect("at least one step");
    let last = summary.reports.last().expect("at least one step");
    println!(
        "trained {} steps: total {:.4} -> {:.4} (l_cap {:.4} -> {:.4})",
        summary.reports.len(),
        first.total,
        last.total,
        first.l_cap,
        last.l_cap
    );
    println!("checkpoint: {}", summary.checkpoint_dir.display());
    println!("loss log:   {}", summary.log_path.display());
    Ok(())
}

fn grad_check(args: GradCheckArgs) -> anyhow::Result<()> {
    let components: Vec<&str> = if args.component == "all" {
        trainer::GRAD_CHECK_COMPONENTS.to_vec()
    } else {
        vec![args.component.as_str()]
    };
    let mut worst: f64 = 0.0;
    for component in components {
        let report = trainer::grad_check(component, args.epsilon, args.seed, args.instances)?;
        println!(
            "{:<20} instances {:>3}  max rel err {:.3e}",
            report.component, report.instances, report.max_rel_err
        );
        for (block, err) in &report.blocks {
            println!("    {block:<24} {err:.3e}");
        }
        worst = worst.max(report.max_rel_err);
    }
    if worst > 1e-4 {
        anyhow::bail!("gradient verification failed: max relative error {worst:.3e} > 1e-4");
    }
    println!("all gradients match finite differences (<= 1e-4)");
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let (model, mut config) = trainer::load_model(&args.checkpoint)?;
    if let Some(data) = &args.data {
        config.dataset = data.display().to_string();
    }
    let data = trainer::load_and_render::<f32>(&config)?;
    let indices: Vec<usize> = match args.split.as_str() {
        "train" => data.split.train.clone(),
        "val" => data.split.val.clone(),
        "test" => data.split.test.clone(),
        "all" => (0..data.records.len()).collect(),
        other => {
            return Err(CoreError::Usage(format!(
                "unknown split `{other}` (expected train, val, test, or all)"
            ))
            .into())
        }
    };
    if indices.is_empty() {
        return Err(CoreError::Config(format!(
            "split `{}` selects no pairs",
            args.split
        ))
        .into());
    }

    let mut hypotheses = Vec::with_capacity(indices.len());
    let mut references = Vec::with_capacity(indices.len());
    let mut first_refs = Vec::with_capacity(indices.len());
    let mut records = Vec::with_capacity(indices.len());
    for &i in &indices {
        let record = &data.records[i];
        let input = PairInput {
            record,
            raw_bef: &data.raw[i].0,
            raw_aft: &data.raw[i].1,
        };
        hypotheses.push(model::generate_caption(&model, &input, config.ablation)?);
        references.push(record.captions_forward.clone());
        first_refs.push(record.captions_forward[0].clone());
        records.push(record.clone());
    }

    let report = MetricReport {
        bleu4: evalkit::bleu4(&hypotheses, &references)?,
        rouge_l: evalkit::rouge_l(&hypotheses, &references)?,
        change_detection_acc: evalkit::change_detection_acc(&hypotheses, &records)?,
        object_stats: evalkit::object_change_stats(
            &hypotheses,
            &first_refs,
            &evalkit::object_lexicon(),
            &evalkit::verb_lexicon(),
        )?,
    };

    println!("pairs evaluated: {}", indices.len());
    println!("BLEU-4:               {:.4}", report.bleu4);
    println!("ROUGE-L:              {:.4}", report.rouge_l);
    println!("change detection acc: {:.4}", report.change_detection_acc);
    println!("object               pred-a pred-d pred-desc corr-a corr-d co-ment accuracy");
    for (name, s) in &report.object_stats {
        let acc = s
            .accuracy
            .map(|a| format!("{:.1}%", a * 100.0))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "{name:<20} {:>6} {:>6} {:>9} {:>6} {:>6} {:>7} {acc:>8}",
            s.pred_a, s.pred_d, s.pred_desc, s.corr_a, s.corr_d, s.co_mentioned
        );
    }
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)
            .map_err(|e| CoreError::io(out.display().to_string(), e))?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> anyhow::Result<()> {
    let variant = Ablation::parse(&args.variant)?;
    let mut config = load_config(&args.config)?;
    config.ablation = variant;
    config.out_dir = match args.out_dir {
        Some(dir) => dir.display().to_string(),
        None => format!("{}-{}", config.out_dir, args.variant),
    };
    config.seed = seed_override(config.seed);
    let summary = trainer::train(&config)?;
    let last = summary.reports.last().expect("at least one step");
    println!(
        "ablation `{}` trained {} steps, final total {:.4}",
        args.variant,
        summary.reports.len(),
        last.total
    );
    println!("checkpoint: {}", summary.checkpoint_dir.display());
    Ok(())
}

fn heatmap(args: HeatmapArgs) -> anyhow::Result<()> {
    let (model, mut config) = trainer::load_model(&args.checkpoint)?;
    config.dataset = args.data.display().to_string();
    let data = trainer::load_and_render::<f32>(&config)?;
    let record = data.records.get(args.pair).ok_or_else(|| {
        CoreError::Config(format!(
            "pair index {} out of range ({} pairs)",
            args.pair,
            data.records.len()
        ))
    })?;
    let input = PairInput {
        record,
        raw_bef: &data.raw[args.pair].0,
        raw_aft: &data.raw[args.pair].1,
    };
    let (tape, pf) = model::run_frozen(&model, &input, config.ablation)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CoreError::io(args.out_dir.display().to_string(), e))?;

    let grid = (record.before.height, record.before.width);
    let radius = pf
        .vote
        .vote_map
        .keys()
        .map(|&(dy, dx)| dy.abs().max(dx.abs()))
        .max()
        .unwrap_or(0);
    let vote_img = pgm::vote_map_image(&pf.vote.vote_map, radius);
    pgm::write_pgm(&vote_img, args.out_dir.join("vote_map.pgm"))?;

    let vote_json: Vec<serde_json::Value> = pf
        .vote
        .vote_map
        .iter()
        .map(|(&(dy, dx), &score)| serde_json::json!({"dy": dy, "dx": dx, "score": score}))
        .collect();
    let debug = serde_json::json!({
        "dominant_shift": {"dy": pf.vote.dominant_shift.0, "dx": pf.vote.dominant_shift.1},
        "planted_shift": {"dy": record.shift.0, "dx": record.shift.1},
        "votes": vote_json,
    });
    let json_path = args.out_dir.join("vote_map.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&debug)?)
        .map_err(|e| CoreError::io(json_path.display().to_string(), e))?;

    let mask_image = |mask: &[u8]| {
        ndarray::Array2::from_shape_fn(grid, |(r, c)| f64::from(mask[r * grid.1 + c]))
    };
    pgm::write_pgm(&mask_image(&pf.vote.mask_bef), args.out_dir.join("mask_bef.pgm"))?;
    pgm::write_pgm(&mask_image(&pf.vote.mask_aft), args.out_dir.join("mask_aft.pgm"))?;

    // Cross-attention of the common-region alignment, averaged over
    // queries and reshaped onto the key image's grid.
    let z_bef = tape.value(pf.repr_fwd.z_src).clone();
    let z_aft = tape.value(pf.repr_fwd.z_tgt).clone();
    let over_keys = |weights: ndarray::Array2<f64>| {
        let mean = weights.sum_axis(ndarray::Axis(0)) / weights.nrows() as f64;
        ndarray::Array2::from_shape_fn(grid, |(r, c)| mean[r * grid.1 + c])
    };
    let attn_to_bef = model::mhca_attention(&model.params, &z_aft, &z_bef, model.config.heads);
    let attn_to_aft = model::mhca_attention(&model.params, &z_bef, &z_aft, model.config.heads);
    pgm::write_pgm(&over_keys(attn_to_bef), args.out_dir.join("cross_attn_bef.pgm"))?;
    pgm::write_pgm(&over_keys(attn_to_aft), args.out_dir.join("cross_attn_aft.pgm"))?;

    println!(
        "dominant shift ({}, {}), planted ({}, {}); heatmaps in {}",
        pf.vote.dominant_shift.0,
        pf.vote.dominant_shift.1,
        record.shift.0,
        record.shift.1,
        args.out_dir.display()
    );
    Ok(())
}
