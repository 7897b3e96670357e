use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use switchtok::corpus::{read_dataset, Dataset, Task, TaskDatasets};
use switchtok::decoding::{cascade, decode_file, Converter, DecodeConfig, ModelConverter, PassCounter};
use switchtok::harness::experiment::{bench_decode, prepare_data, train_kind};
use switchtok::harness::report::{render_report, DecodeMode, EvalReport, ReportFormat, RowModel};
use switchtok::harness::{load_checkpoint, save_checkpoint, Checkpoint, ExperimentConfig, ModelKind};
use switchtok::metrics::{corpus_filler_f1, exact_match_rate, score_corpus, EvalUnit};
use switchtok::tokenizer::Vocabulary;
use switchtok::{Error, Result, SwitchSetting};

#[derive(Parser)]
#[command(name = "switchtok", version, about = "Joint disfluency deletion and punctuation restoration with switching tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate task datasets and the vocabulary.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: <out_dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pairs per task (default: largest ladder size).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train one model from a generated data directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Directory written by gen-data (default: <out_dir>/data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode one source per line.
    Decode {
        /// A joint checkpoint, or dedicated checkpoints (two for cascades).
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Score hypotheses against references.
    Evaluate {
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        hypotheses: PathBuf,
        #[arg(long, value_enum, default_value_t = UnitArg::Word)]
        unit: UnitArg,
        /// Comma-separated filler words for the deletion F1.
        #[arg(long)]
        fillers: Option<String>,
    },
    /// Time joint against cascaded decoding.
    Bench {
        /// Joint checkpoint.
        #[arg(long)]
        joint: PathBuf,
        /// Optional dedicated checkpoints, disfluency first.
        #[arg(long, num_args = 2)]
        dedicated: Option<Vec<PathBuf>>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 200)]
        sentences: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the whole pipeline and write the report.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated dataset sizes.
        #[arg(long, value_delimiter = ',')]
        ladder: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Render a report.json as markdown or CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Markdown)]
        format: FormatArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Joint,
    DedicatedDisf,
    DedicatedPunc,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Joint => ModelKind::Joint,
            KindArg::DedicatedDisf => ModelKind::DedicatedDisf,
            KindArg::DedicatedPunc => ModelKind::DedicatedPunc,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    /// Dedicated model, no switches.
    Single,
    #[value(name = "on-off")]
    OnOff,
    #[value(name = "off-on")]
    OffOn,
    #[value(name = "off-off")]
    OffOff,
    #[value(name = "on-on")]
    OnOn,
    CascadeFwd,
    CascadeRev,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitArg {
    Word,
    Char,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_data_dir(dir: &Path) -> Result<(Vocabulary, TaskDatasets, TaskDatasets)> {
    let read = |task: Task, split: &str| read_dataset(&dir.join(format!("{task}.{split}.jsonl")));
    let sets = |split: &str| -> Result<TaskDatasets> {
        Ok(TaskDatasets {
            disf: read(Task::Disf, split)?,
            punc: read(Task::Punc, split)?,
            same: read(Task::Same, split)?,
            joint_test: Dataset::new(Task::Joint, switchtok::Split::Test, Vec::new()),
        })
    };
    Ok((Vocabulary::load(&dir.join("vocab.txt"))?, sets("train")?, sets("valid")?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, size } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("data"));
            let data = prepare_data(&cfg)?;
            data.write(&out, size.unwrap_or(data.max_size))?;
            println!("wrote datasets and vocabulary ({} entries) to {}", data.vocab.size(), out.display());
        }
        Command::Train {
            config,
            kind,
            data,
            out,
            epochs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            let dir = data.unwrap_or_else(|| cfg.out_dir.join("data"));
            let (vocab, train_sets, valid) = load_data_dir(&dir)?;
            let kind = ModelKind::from(kind);
            let outcome = train_kind(&cfg, &vocab, kind, &train_sets, &valid)?;
            let ck = Checkpoint {
                kind,
                experiment: Some(cfg.resolved()),
                vocab,
                model: outcome.model.clone(),
                optimizer: None,
            };
            save_checkpoint(&ck, &out)?;
            write_file(&out.with_extension("trace.jsonl"), &outcome.trace_jsonl())?;
            println!(
                "trained {kind}: best validation loss {:.4} at epoch {}; saved {}",
                outcome.best_valid_loss,
                outcome.best_epoch,
                out.display()
            );
        }
        Command::Decode {
            checkpoints,
            mode,
            input,
            output,
            beam,
            workers,
        } => {
            let cks = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
            let mut dc = cks[0]
                .experiment
                .as_ref()
                .map(|e| e.decode)
                .unwrap_or_default();
            if let Some(b) = beam {
                dc.beam_size = b;
            }
            let passes = PassCounter::new();
            let sidecar = output.with_extension("timing.json");
            fn make<'a>(ck: &'a Checkpoint, dc: DecodeConfig, s: Option<SwitchSetting>, p: &'a PassCounter) -> ModelConverter<'a> {
                let s = if ck.kind.uses_switches() { s } else { None };
                ModelConverter::new(&ck.model, &ck.vocab, dc.with_switch(s), p)
            }
            let conv = |ck, s| make(ck, dc, s, &passes);
            let find = |k: ModelKind| {
                cks.iter()
                    .find(|c| c.kind == k)
                    .ok_or_else(|| Error::Config(format!("mode needs a {k} checkpoint")))
            };
            let timing = match mode {
                ModeArg::CascadeFwd | ModeArg::CascadeRev => {
                    let (d, p) = if cks.len() == 1 {
                        let j = find(ModelKind::Joint)?;
                        (conv(j, Some(SwitchSetting::DISF)), conv(j, Some(SwitchSetting::PUNC)))
                    } else {
                        (conv(find(ModelKind::DedicatedDisf)?, None), conv(find(ModelKind::DedicatedPunc)?, None))
                    };
                    let f = |s: &str| {
                        if mode == ModeArg::CascadeFwd {
                            cascade(&d, &p, s)
                        } else {
                            cascade(&p, &d, s)
                        }
                    };
                    decode_file(&f, &passes, &input, &output, &sidecar, workers)?
                }
                _ => {
                    let switch = match mode {
                        ModeArg::OnOff => Some(SwitchSetting::DISF),
                        ModeArg::OffOn => Some(SwitchSetting::PUNC),
                        ModeArg::OffOff => Some(SwitchSetting::SAME),
                        ModeArg::OnOn => Some(SwitchSetting::JOINT),
                        _ => None,
                    };
                    if switch.is_some() != cks[0].kind.uses_switches() {
                        return Err(Error::Config(format!("mode does not fit a {} checkpoint", cks[0].kind)));
                    }
                    let c: &dyn Converter = &conv(&cks[0], switch);
                    decode_file(c, &passes, &input, &output, &sidecar, workers)?
                }
            };
            println!("{}", serde_json::to_string(&timing)?);
        }
        Command::Evaluate {
            sources,
            references,
            hypotheses,
            unit,
            fillers,
        } => {
            let (s, r, h) = (read_lines(&sources)?, read_lines(&references)?, read_lines(&hypotheses)?);
            let unit = match unit {
                UnitArg::Word => EvalUnit::Word,
                UnitArg::Char => EvalUnit::Char,
            };
            let scores = score_corpus(unit, &s, &r, &h)?;
            let mut record = serde_json::json!({
                "unit": unit.as_str(),
                "sentences": s.len(),
                "bleu": scores.bleu,
                "meteor": scores.meteor,
                "gleu": scores.gleu,
                "exact_match": exact_match_rate(&r, &h)?,
            });
            if let Some(f) = fillers {
                let fillers: Vec<&str> = f.split(',').map(str::trim).filter(|x| !x.is_empty()).collect();
                let (p, rc, f1) = corpus_filler_f1(&s, &r, &h, &fillers)?;
                record["filler_precision"] = p.into();
                record["filler_recall"] = rc.into();
                record["filler_f1"] = f1.into();
            }
            println!("{}", serde_json::to_string_pretty(&record)?);
        }
        Command::Bench {
            joint,
            dedicated,
            input,
            sentences,
            repeats,
            workers,
        } => {
            let j = load_checkpoint(&joint)?;
            let ded = dedicated
                .map(|ps| ps.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>())
                .transpose()?;
            let dc = j.experiment.as_ref().map(|e| e.decode).unwrap_or_default();
            let sources: Vec<String> = read_lines(&input)?.into_iter().take(sentences).collect();
            let (c1, c2, c3) = (PassCounter::new(), PassCounter::new(), PassCounter::new());
            let on_on = ModelConverter::new(&j.model, &j.vocab, dc.with_switch(Some(SwitchSetting::JOINT)), &c1);
            let jd = ModelConverter::new(&j.model, &j.vocab, dc.with_switch(Some(SwitchSetting::DISF)), &c2);
            let jp = ModelConverter::new(&j.model, &j.vocab, dc.with_switch(Some(SwitchSetting::PUNC)), &c2);
            let joint_fwd = |s: &str| cascade(&jd, &jp, s);
            let mut entries: Vec<(RowModel, DecodeMode, &dyn Converter, &PassCounter)> = vec![
                (RowModel::Joint, DecodeMode::OnOn, &on_on, &c1),
                (RowModel::Joint, DecodeMode::CascadeFwd, &joint_fwd, &c2),
            ];
            let pair = ded.as_ref().map(|d| {
                (
                    ModelConverter::new(&d[0].model, &d[0].vocab, dc.with_switch(None), &c3),
                    ModelConverter::new(&d[1].model, &d[1].vocab, dc.with_switch(None), &c3),
                )
            });
            let pair_fwd = pair.as_ref().map(|(d, p)| move |s: &str| cascade(d, p, s));
            if let Some(f) = &pair_fwd {
                entries.push((RowModel::DedicatedPair, DecodeMode::CascadeFwd, f, &c3));
            }
            let records = bench_decode(&entries, &sources, repeats.max(3), workers, 0)?;
            println!("{}", serde_json::to_string_pretty(&records)?);
        }
        Command::Experiment {
            config,
            out,
            seed,
            ladder,
            epochs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if seed.is_some() {
                cfg.seed = seed;
            }
            if let Some(l) = ladder {
                cfg.ladder = l;
            }
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            let report = switchtok::harness::run_experiment(&cfg)?;
            print!("{}", render_report(&report, ReportFormat::Markdown)?);
        }
        Command::Report { input, format } => {
            let text = fs::read_to_string(&input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: input.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            let format = match format {
                FormatArg::Markdown => ReportFormat::Markdown,
                FormatArg::Csv => ReportFormat::Csv,
            };
            print!("{}", render_report(&report, format)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
