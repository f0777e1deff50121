//! Command-line driver for the toy vision-language pipeline.
//!
//! Exit codes: 0 success, 1 verification/training failure, 2 usage or
//! configuration error. All machine output is JSON or JSON-lines.

mod config;
mod img_io;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use config::RunConfig;
use img_io::{decode_image, resolve_image};
use tinyvlm_core::checkpoint::{load_train_state, save_train_state};
use tinyvlm_core::data::{gen_toy_dataset, load_dialogues, DialogueRecord};
use tinyvlm_core::filter::image::{image_generation_score, qa_final_score};
use tinyvlm_core::filter::{filter_caption, CaptionSignals, FilterThresholds};
use tinyvlm_core::model::Model;
use tinyvlm_core::scorer::{default_unigram_lm, HashScorer, MatchScorer, SimilarityScorer};
use tinyvlm_core::train::{
    run_gradcheck, run_gradcheck_corrupted, sample_latent_count_for_step, simulate_dialogue,
    train_step, AdamState, ForwardOptions, StageConfig, StepRecord,
};

#[derive(Parser)]
#[command(name = "tinyvlm", about = "Desk-scale vision-language fusion testbed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    Stage1,
    #[value(name = "1.5")]
    Stage1_5,
    #[value(name = "2")]
    Stage2,
    #[value(name = "memorize")]
    Memorize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the latent token count used during the check.
        #[arg(long)]
        latent_count: Option<usize>,
    },
    /// Train one stage on generated toy data.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Override the stage's step count (the full schedule horizon).
        #[arg(long)]
        steps: Option<usize>,
        /// Stop after this many steps and checkpoint, keeping the schedule
        /// horizon at --steps; a later --resume continues the same run.
        #[arg(long)]
        halt_after: Option<usize>,
        /// Output directory for metrics.jsonl and checkpoint.bin.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a previous checkpoint.bin.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the generated dataset size.
        #[arg(long)]
        dataset_size: Option<usize>,
    },
    /// Run multi-turn dialogues through the full pipeline and report
    /// per-turn argmax tokens and latent-refresh norms.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON-lines dialogue file; image refs are paths or toy:<seed>:<i>.
        #[arg(long)]
        dialogues: PathBuf,
        #[arg(long)]
        latent_count: Option<usize>,
        /// Reduce global vision tokens to this count by interpolation.
        #[arg(long)]
        global_tokens: Option<usize>,
        #[arg(long, value_enum, default_value = "on")]
        interaction: Toggle,
        /// Load model weights from a checkpoint instead of seed init.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream caption records through the quality filters.
    Filter {
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON-lines records {id, text, image_path?, qa?}.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        alnum_min: Option<f64>,
        #[arg(long)]
        char_rep_len: Option<usize>,
        #[arg(long)]
        char_rep_max: Option<f64>,
        #[arg(long)]
        word_rep_len: Option<usize>,
        #[arg(long)]
        word_rep_max: Option<f64>,
        #[arg(long)]
        special_min: Option<f64>,
        #[arg(long)]
        special_max: Option<f64>,
        #[arg(long)]
        flagged_max: Option<f64>,
        #[arg(long)]
        perplexity_max: Option<f64>,
        #[arg(long)]
        itm_min: Option<f64>,
        #[arg(long)]
        clip_sim_min: Option<f64>,
    },
    /// Composite quality score for one generated image.
    ScoreImage {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        description: String,
        /// Encoder crop size used in the round-trip terms.
        #[arg(long, default_value_t = 32)]
        crop_size: usize,
    },
    /// Mean statement-image similarity for a QA pair.
    ScoreQa {
        #[arg(long)]
        image: PathBuf,
        /// Declarative statement; repeat the flag for several.
        #[arg(long = "statement", required = true)]
        statements: Vec<String>,
    },
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    };
    std::process::ExitCode::from(code)
}

fn run(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Gradcheck { config, latent_count } => cmd_gradcheck(config.as_deref(), latent_count),
        Command::Train { config, stage, steps, halt_after, out, resume, dataset_size } => {
            cmd_train(config.as_deref(), stage, steps, halt_after, &out, resume.as_deref(), dataset_size)
        }
        Command::Simulate { config, dialogues, latent_count, global_tokens, interaction, checkpoint, out } => {
            cmd_simulate(
                config.as_deref(),
                &dialogues,
                latent_count,
                global_tokens,
                interaction,
                checkpoint.as_deref(),
                out.as_deref(),
            )
        }
        Command::Filter {
            config,
            input,
            output,
            alnum_min,
            char_rep_len,
            char_rep_max,
            word_rep_len,
            word_rep_max,
            special_min,
            special_max,
            flagged_max,
            perplexity_max,
            itm_min,
            clip_sim_min,
        } => {
            let mut th = RunConfig::load(config.as_deref())?.thresholds;
            macro_rules! apply {
                ($($field:ident),*) => { $( if let Some(v) = $field { th.$field = v; } )* };
            }
            apply!(
                alnum_min, char_rep_len, char_rep_max, word_rep_len, word_rep_max, special_min,
                special_max, flagged_max, perplexity_max, itm_min, clip_sim_min
            );
            cmd_filter(&input, output.as_deref(), &th)
        }
        Command::ScoreImage { image, description, crop_size } => {
            let img = decode_image(&image)?;
            let score = image_generation_score(&img, crop_size, &HashScorer::default(), &description)?;
            println!("{}", serde_json::to_string(&score)?);
            Ok(0)
        }
        Command::ScoreQa { image, statements } => {
            let img = decode_image(&image)?;
            let score = qa_final_score(&statements, &img, &HashScorer::default())?;
            println!("{}", json!({ "final_score": score, "statements": statements.len() }));
            Ok(0)
        }
    }
}

fn cmd_gradcheck(config: Option<&Path>, latent_count: Option<usize>) -> anyhow::Result<u8> {
    let cfg = RunConfig::load(config)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let gen = StageConfig::stage1().gen_options(cfg.model.encoder.input_side);
    let sample = &gen_toy_dataset(cfg.seed, 1, &gen)?[0];
    let opts = &cfg.gradcheck;
    let latents = latent_count.unwrap_or(opts.latent_count);
    let report = match &opts.corrupt_group {
        None => run_gradcheck(&mut model, sample, opts.eps, opts.subsample_per_group, latents)?,
        Some(group) => run_gradcheck_corrupted(
            &mut model,
            sample,
            opts.eps,
            opts.subsample_per_group,
            latents,
            group,
        )?,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.pass() { 0 } else { 1 })
}

fn stage_config(cfg: &RunConfig, stage: StageArg) -> StageConfig {
    match stage {
        StageArg::Stage1 => cfg.stages.stage1.clone(),
        StageArg::Stage1_5 => cfg.stages.stage1_5.clone(),
        StageArg::Stage2 => cfg.stages.stage2.clone(),
        StageArg::Memorize => StageConfig::memorization(),
    }
}

fn cmd_train(
    config: Option<&Path>,
    stage_arg: StageArg,
    steps: Option<usize>,
    halt_after: Option<usize>,
    out: &Path,
    resume: Option<&Path>,
    dataset_size: Option<usize>,
) -> anyhow::Result<u8> {
    let cfg = RunConfig::load(config)?;
    let mut stage = stage_config(&cfg, stage_arg);
    if let Some(s) = steps {
        stage.steps = s;
    }
    stage.validate()?;
    std::fs::create_dir_all(out)?;

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut adam = AdamState::new(&model);
    let mut start_step = 0usize;
    if let Some(ckpt) = resume {
        let (step, _) = load_train_state(ckpt, &mut model, &mut adam)?;
        start_step = step;
    }

    let data = gen_toy_dataset(
        cfg.seed,
        dataset_size.unwrap_or(cfg.dataset_size),
        &stage.gen_options(cfg.model.encoder.input_side),
    )?;

    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(if start_step > 0 {
        File::options().append(true).create(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    });

    let total = stage.steps;
    let end = halt_after.map_or(total, |h| h.min(total));
    for step in start_step..end {
        let batch: Vec<_> = (0..stage.batch_size)
            .map(|i| data[(step * stage.batch_size + i) % data.len()].clone())
            .collect();
        let latent_count = match stage.fixed_latent_count {
            Some(c) => c,
            None => sample_latent_count_for_step(cfg.seed, step, &cfg.model.decoder.latent_count_set)?,
        };
        let bundle = match train_step(&mut model, &batch, &stage, &mut adam, step, total, latent_count) {
            Ok(b) => b,
            Err(tinyvlm_core::Error::NonFinite(what)) => {
                eprintln!("training aborted at step {step}: non-finite loss in {what}");
                return Ok(1);
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(metrics, "{}", serde_json::to_string(&StepRecord::new(step, &bundle))?)?;
    }
    metrics.flush()?;

    let ckpt_path = out.join("checkpoint.bin");
    save_train_state(&ckpt_path, &model, &adam, end, json!({ "stage": stage.name.to_string() }))?;
    println!(
        "{}",
        json!({ "stage": stage.name.to_string(), "steps": end, "schedule_steps": total, "checkpoint": ckpt_path, "metrics": metrics_path })
    );
    Ok(0)
}

fn cmd_simulate(
    config: Option<&Path>,
    dialogues: &Path,
    latent_count: Option<usize>,
    global_tokens: Option<usize>,
    interaction: Toggle,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<u8> {
    let cfg = RunConfig::load(config)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    if let Some(ckpt) = checkpoint {
        tinyvlm_core::checkpoint::load_model(ckpt, &mut model)?;
    }
    let records: Vec<DialogueRecord> = load_dialogues(BufReader::new(
        File::open(dialogues).with_context(|| format!("opening {}", dialogues.display()))?,
    ))?;

    let latent = latent_count.unwrap_or(cfg.gradcheck.latent_count);
    let mut opts = ForwardOptions::with_latents(latent);
    opts.global_token_count = global_tokens;
    if matches!(interaction, Toggle::Off) {
        opts.interaction_layers = Some(Vec::new());
    }

    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for (i, rec) in records.iter().enumerate() {
        let image = resolve_image(&rec.image, cfg.model.encoder.input_side)?;
        let report = simulate_dialogue(&model, &image, &rec.turns, &opts)?;
        let line = json!({ "record": i, "report": report });
        writeln!(sink, "{line}")?;
    }
    sink.flush()?;
    Ok(0)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterRecord {
    id: Value,
    text: String,
    #[serde(default)]
    image_path: Option<String>,
    #[serde(default)]
    qa: Option<Vec<String>>,
}

#[derive(Debug, Serialize)]
struct FilterOutput {
    id: Value,
    decision: &'static str,
    reasons: Vec<tinyvlm_core::filter::RejectReason>,
    metrics: std::collections::BTreeMap<String, f64>,
}

fn cmd_filter(input: &Path, output: Option<&Path>, thresholds: &FilterThresholds) -> anyhow::Result<u8> {
    let reader = BufReader::new(
        File::open(input).with_context(|| format!("opening {}", input.display()))?,
    );
    let mut sink: Box<dyn Write> = match output {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let lm = default_unigram_lm();
    let scorer = HashScorer::default();
    let mut kept = 0usize;
    let mut rejected = 0usize;
    let mut reason_counts: std::collections::BTreeMap<String, usize> = Default::default();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FilterRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                writeln!(sink, "{}", json!({ "id": null, "error": format!("line {}: {e}", lineno + 1) }))?;
                continue;
            }
        };
        let mut signals = CaptionSignals::default();
        let mut qa_score = None;
        if let Some(path) = &rec.image_path {
            let image = decode_image(Path::new(path))?;
            signals.itm_score = Some(scorer.match_score(&rec.text, &image));
            signals.clip_similarity = Some(scorer.similarity(&rec.text, &image));
            if let Some(qa) = &rec.qa {
                if !qa.is_empty() {
                    qa_score = Some(qa_final_score(qa, &image, &scorer)?);
                }
            }
        }
        let mut decision = match filter_caption(&rec.text, &signals, thresholds, &lm) {
            Ok(d) => d,
            Err(e) => {
                writeln!(sink, "{}", json!({ "id": rec.id, "error": e.to_string() }))?;
                continue;
            }
        };
        if let Some(q) = qa_score {
            decision.metrics.insert("qa_final_score".into(), q);
        }
        if decision.keep {
            kept += 1;
        } else {
            rejected += 1;
            for r in &decision.reasons {
                *reason_counts
                    .entry(serde_json::to_value(r)?.as_str().unwrap_or("?").to_string())
                    .or_default() += 1;
            }
        }
        let out_rec = FilterOutput {
            id: rec.id,
            decision: if decision.keep { "keep" } else { "reject" },
            reasons: decision.reasons,
            metrics: decision.metrics,
        };
        writeln!(sink, "{}", serde_json::to_string(&out_rec)?)?;
    }
    sink.flush()?;
    let summary = json!({ "kept": kept, "rejected": rejected, "reject_reasons": reason_counts });
    if output.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(0)
}
