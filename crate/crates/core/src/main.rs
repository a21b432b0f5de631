use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use pm2::dataset::Dataset;
use pm2::error::{Error, Result};
use pm2::gradcheck::{self, Which};
use pm2::heads::{argmax, zero_shot_probs, HeadDims, HeadMode};
use pm2::prompts::{encode_fixed_prompts, EncoderConfig, PromptAsset, PromptChoice, TextFeature, ToyTextEncoder, BACH_CLASSES};
use pm2::sopool::SoPoolConfig;
use pm2::storage::{
    read_dataset, read_manifest, read_text_features, summary_from_run, synth_generate, text_features_to_pm2f,
    write_pm2f, write_results, write_synth, SavedModel, SynthSpec,
};
use pm2::trainer::{
    class_means, evaluate_top1, run_protocol, sample_few_shot, train_episode, EpisodeRecord, ProtocolConfig,
    ProtocolData, RowSpec, SummaryTable, TextSource, TrainConfig, DEFAULT_LR_GRID, DEFAULT_WD_GRID,
};

#[derive(Parser)]
#[command(name = "pm2", version, about = "Few-shot classification heads over frozen image/text features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct TrainArgs {
    /// Total optimizer steps.
    #[arg(long, default_value_t = 12800)]
    iters: usize,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    /// Weight of the text cross-entropy term.
    #[arg(long, default_value_t = 1.0)]
    text_weight: f64,
    /// Width of the projected visual tokens.
    #[arg(long, default_value_t = 96)]
    reduced_dim: usize,
    /// Newton-Schulz iterations.
    #[arg(long, default_value_t = 3)]
    ns_iters: usize,
    /// Start the shared classifier from mean text features.
    #[arg(long)]
    init_head_from_text: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

impl TrainArgs {
    fn config(&self, mode: HeadMode, seed: u64, lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            base_lr: lr,
            weight_decay: wd,
            warmup_iters: self.warmup,
            total_iters: self.iters,
            batch_size: self.batch_size,
            text_loss_weight: self.text_weight,
            head_mode: mode,
            sopool: SoPoolConfig {
                ns_iterations: self.ns_iters,
                reduced_dim: self.reduced_dim,
                ..SoPoolConfig::default()
            },
            seed,
            init_head_from_text: self.init_head_from_text,
            loss_log_every: self.log_every,
            ..TrainConfig::default()
        }
    }
}

#[derive(clap::Args, Clone)]
struct TextArgs {
    /// Comma-separated class names; defaults to the manifest next to the
    /// training file, then the BACH names for 4 classes.
    #[arg(long, value_delimiter = ',')]
    classnames: Option<Vec<String>>,
    /// Prompt asset JSON (class -> key -> strings); defaults to the bundled BACH captions.
    #[arg(long)]
    prompt_asset: Option<PathBuf>,
    /// Seed of the frozen toy text encoder.
    #[arg(long, default_value_t = EncoderConfig::default().seed)]
    encoder_seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/val feature set from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode prompts with the toy text encoder into a text PM2F file.
    Prompts {
        /// classname | vanilla | hand_crafted | an asset key such as gpt0.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        d_cls: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        text: TextArgs,
    },
    /// Train one few-shot episode and save the head.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Precomputed text features (PM2F with n_tokens = 0).
        #[arg(long, conflicts_with_all = ["coop", "prompt"])]
        text: Option<PathBuf>,
        /// Learn this many CoOp context vectors.
        #[arg(long, conflicts_with = "prompt")]
        coop: Option<usize>,
        /// Encode a fixed prompt scheme with the toy encoder.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long, default_value = "cls+so")]
        head_mode: HeadMode,
        #[arg(long, default_value_t = 16)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        wd: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        args: TrainArgs,
        #[command(flatten)]
        names: TextArgs,
    },
    /// Top-1 accuracy of a saved head.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Zero-shot accuracy from cosine similarity to per-class text features.
    Zeroshot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        text: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        temperature: f64,
    },
    /// Shots x seeds protocol over one or more table rows.
    Protocol {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Optional held-out set to report on (selection still uses --val).
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        shots: Vec<usize>,
        /// Number of seeds (0, 1, ... plus --seed-base).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
        /// Select lr and weight decay on --val from the grids.
        #[arg(long)]
        sweep: bool,
        #[arg(long, value_delimiter = ',')]
        lr_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        wd_grid: Option<Vec<f64>>,
        /// Used when not sweeping.
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 0.0)]
        wd: f64,
        #[arg(long, value_delimiter = ',', default_value = "cls+so")]
        head_modes: Vec<HeadMode>,
        /// Text-prompt rows: none, classname, vanilla, hand_crafted, gpt0, gpt1, coop4, ...
        #[arg(long, value_delimiter = ',', default_value = "none")]
        prompts: Vec<String>,
        /// Extra rows from precomputed text features, as NAME=PATH.
        #[arg(long = "text")]
        text_files: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        args: TrainArgs,
        #[command(flatten)]
        names: TextArgs,
    },
    /// Finite-difference check of a backward pass.
    Gradcheck {
        #[arg(long)]
        which: Which,
        /// Number of random coordinates.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Rebuild the summary table of a protocol run from its episode records.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
    },
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("PM2_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("PM2_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

fn classnames(args: &TextArgs, train_path: Option<&Path>, classes: usize) -> Result<Vec<String>> {
    let names = if let Some(n) = &args.classnames {
        n.clone()
    } else if let Some(m) = train_path
        .and_then(Path::parent)
        .map(|d| d.join("manifest.json"))
        .filter(|p| p.exists())
    {
        read_manifest(&m)?.classnames
    } else if classes == BACH_CLASSES.len() {
        BACH_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..classes).map(|c| format!("class{c}")).collect()
    };
    if names.len() != classes {
        return Err(Error::Config(format!("{} class names for {classes} classes", names.len())));
    }
    Ok(names)
}

fn prompt_asset(args: &TextArgs) -> Result<PromptAsset> {
    match &args.prompt_asset {
        Some(p) => PromptAsset::load(p),
        None => Ok(PromptAsset::bach_default()),
    }
}

fn encoder(args: &TextArgs, d_cls: usize) -> Result<ToyTextEncoder> {
    ToyTextEncoder::new(EncoderConfig {
        d_cls,
        seed: args.encoder_seed,
        ..EncoderConfig::default()
    })
}

fn load_text_file(path: &Path, data: &Dataset) -> Result<Vec<TextFeature>> {
    let (classes, feats) = read_text_features(path)?;
    if classes != data.classes() {
        return Err(Error::Validation(format!(
            "{} has {classes} classes, image features have {}",
            path.display(),
            data.classes()
        )));
    }
    Ok(feats)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { spec, out, seed } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io { path: spec.clone(), source: e })?;
            let mut spec: SynthSpec = serde_json::from_str(&text)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let manifest = write_synth(&out, &synth_generate(&spec)?)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
        Command::Prompts { prompt, d_cls, out, text } => {
            let asset = prompt_asset(&text)?;
            let spec = match PromptChoice::parse(&prompt, &asset)? {
                PromptChoice::Fixed(spec) => spec,
                _ => return Err(Error::Config(format!("`{prompt}` is not a fixed text prompt"))),
            };
            let names = match &text.classnames {
                Some(n) => n.clone(),
                None => BACH_CLASSES.iter().map(|s| s.to_string()).collect(),
            };
            let feats = encode_fixed_prompts(&spec, &names, &encoder(&text, d_cls)?)?;
            let (h, r) = text_features_to_pm2f(&feats, names.len())?;
            write_pm2f(&out, &h, &r)?;
            println!("wrote {} text features to {}", feats.len(), out.display());
        }
        Command::Train {
            train,
            val,
            text,
            coop,
            prompt,
            head_mode,
            shots,
            seed,
            lr,
            wd,
            out,
            args,
            names,
        } => {
            let start = Instant::now();
            let train_set = read_dataset(&train)?;
            let val_set = read_dataset(&val)?;
            let cfg = args.config(head_mode, seed, lr, wd);
            let classnames = classnames(&names, Some(&train), train_set.classes())?;
            let enc = encoder(&names, train_set.d_cls())?;
            let fixed: Vec<TextFeature>;
            let (source, label) = if let Some(path) = &text {
                fixed = load_text_file(path, &train_set)?;
                (TextSource::Fixed(&fixed), "file".to_string())
            } else if let Some(m) = coop {
                (
                    TextSource::Coop {
                        encoder: &enc,
                        classnames: &classnames,
                        context_len: m,
                    },
                    format!("coop{m}"),
                )
            } else if let Some(p) = &prompt {
                match PromptChoice::parse(p, &prompt_asset(&names)?)? {
                    PromptChoice::None => (TextSource::None, "none".to_string()),
                    PromptChoice::Fixed(spec) => {
                        fixed = encode_fixed_prompts(&spec, &classnames, &enc)?;
                        (TextSource::Fixed(&fixed), spec.label())
                    }
                    PromptChoice::Coop(m) => (
                        TextSource::Coop {
                            encoder: &enc,
                            classnames: &classnames,
                            context_len: m,
                        },
                        format!("coop{m}"),
                    ),
                }
            } else {
                (TextSource::None, "none".to_string())
            };
            let episode = sample_few_shot(&train_set.labels(), train_set.classes(), shots, seed)?;
            let trained = train_episode(&train_set, source, &episode, &cfg)?;
            let accuracy = evaluate_top1(&trained.params, &val_set, head_mode, &cfg.sopool)?;
            create_dir(&out)?;
            let dims = HeadDims {
                classes: train_set.classes(),
                d_cls: train_set.d_cls(),
                d_tok: train_set.d_tok(),
                reduced_dim: cfg.sopool.reduced_dim,
            };
            SavedModel::new(trained.params, trained.context, dims, cfg.clone(), classnames.clone()).save(&out.join("params.bin"))?;
            let record = EpisodeRecord {
                modal: if source.is_none() { "uni modal" } else { "multi modal" }.into(),
                text_prompt: label,
                method: head_mode.table_label().into(),
                head_mode,
                shots,
                seed,
                lr,
                weight_decay: wd,
                accuracy,
                evaluated_on: "val".into(),
                selection_accuracy: accuracy,
                train_accuracy: trained.train_accuracy,
                grid: Vec::new(),
                loss_history: trained.loss_history,
                support: episode.indices,
                wallclock_secs: start.elapsed().as_secs_f64(),
            };
            write_json(&out.join("result.json"), &record)?;
            println!("val top-1 {:.4} ({} samples)", accuracy, val_set.len());
        }
        Command::Eval { model, data } => {
            let m = SavedModel::load(&model)?;
            let data = read_dataset(&data)?;
            let acc = evaluate_top1(&m.params, &data, m.meta.head_mode, &m.meta.train_config.sopool)?;
            println!("{}", serde_json::json!({ "accuracy": acc, "samples": data.len() }));
        }
        Command::Zeroshot { data, text, temperature } => {
            let data = read_dataset(&data)?;
            let feats = load_text_file(&text, &data)?;
            let protos = class_means(&feats, data.classes())?;
            let mut hits = 0;
            for s in data.samples() {
                if argmax(&zero_shot_probs(&s.cls, &protos, temperature)?) == s.label {
                    hits += 1;
                }
            }
            if data.is_empty() {
                return Err(Error::Validation("no samples to score".into()));
            }
            let acc = hits as f64 / data.len() as f64;
            println!("{}", serde_json::json!({ "accuracy": acc, "samples": data.len(), "temperature": temperature }));
        }
        Command::Protocol {
            train,
            val,
            test,
            shots,
            seeds,
            seed_base,
            sweep,
            lr_grid,
            wd_grid,
            lr,
            wd,
            head_modes,
            prompts,
            text_files,
            out,
            args,
            names,
        } => {
            let train_set = read_dataset(&train)?;
            let val_set = read_dataset(&val)?;
            let test_set = test.as_deref().map(read_dataset).transpose()?;
            let classnames = classnames(&names, Some(&train), train_set.classes())?;
            let enc = encoder(&names, train_set.d_cls())?;
            let asset = prompt_asset(&names)?;

            // resolve every prompt to owned features before borrowing them into rows
            enum Resolved {
                None,
                Fixed(Vec<TextFeature>),
                Coop(usize),
            }
            let mut resolved: Vec<(String, Resolved)> = Vec::new();
            for p in &prompts {
                let r = match PromptChoice::parse(p, &asset)? {
                    PromptChoice::None => Resolved::None,
                    PromptChoice::Fixed(spec) => Resolved::Fixed(encode_fixed_prompts(&spec, &classnames, &enc)?),
                    PromptChoice::Coop(m) => Resolved::Coop(m),
                };
                resolved.push((p.clone(), r));
            }
            for spec in &text_files {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("--text expects NAME=PATH, got `{spec}`")))?;
                resolved.push((name.to_string(), Resolved::Fixed(load_text_file(Path::new(path), &train_set)?)));
            }
            let mut rows = Vec::new();
            for (label, r) in &resolved {
                let text = match r {
                    Resolved::None => TextSource::None,
                    Resolved::Fixed(f) => TextSource::Fixed(f),
                    Resolved::Coop(m) => TextSource::Coop {
                        encoder: &enc,
                        classnames: &classnames,
                        context_len: *m,
                    },
                };
                for &mode in &head_modes {
                    rows.push(RowSpec {
                        prompt: label.clone(),
                        text,
                        head_mode: mode,
                    });
                }
            }
            let pcfg = ProtocolConfig {
                shots,
                seeds: (0..seeds).map(|s| seed_base + s).collect(),
                sweep,
                lr_grid: lr_grid.unwrap_or_else(|| DEFAULT_LR_GRID.to_vec()),
                wd_grid: wd_grid.unwrap_or_else(|| DEFAULT_WD_GRID.to_vec()),
                threads: threads_from_env()?,
            };
            let base = args.config(HeadMode::ClsPlusSo, seed_base, lr, wd);
            let data = ProtocolData {
                train: &train_set,
                val: &val_set,
                test: test_set.as_ref(),
            };
            let report = run_protocol(data, &rows, &pcfg, &base)?;
            write_results(&out, &report)?;
            write_json(
                &out.join("config.json"),
                &serde_json::json!({ "protocol": pcfg, "train": base, "prompts": prompts, "text_files": text_files }),
            )?;
            print!("{}", report.table.to_csv());
        }
        Command::Gradcheck { which, trials, seed, tol } => {
            let r = gradcheck::run(which, trials, seed)?;
            let ok = r.passes(tol);
            println!(
                "{} {which}: {} coordinates, max relative error {:.3e}",
                if ok { "PASS" } else { "FAIL" },
                r.coordinates,
                r.max_rel_err
            );
            if !ok {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { run, format } => {
            let table: SummaryTable = summary_from_run(&run)?;
            match format {
                ReportFormat::Csv => print!("{}", table.to_csv()),
                ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&table)?),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
