use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{save_checkpoint, Checkpoint, ModelKind};
use super::config::ExperimentConfig;
use super::report::{
    render_csv, render_markdown, BenchRecord, DecodeMode, EvalReport, ReportRow, RowDiagnostics, RowModel, TrainSummary,
};
use crate::corpus::{build_task_datasets, generate_variants, write_dataset, Dataset, ParallelPair, Split, Task, TaskDatasets, TaskSizes, VariantSet};
use crate::decoding::{cascade, convert_all, Converter, DecodeConfig, ModelConverter, PassCounter};
use crate::error::{Error, Result};
use crate::metrics::{corpus_filler_f1, exact_match_rate, score_corpus};
use crate::model::{Model, SwitchSetting};
use crate::tokenizer::{build_vocab, Vocabulary};
use crate::training::{train, TrainMode, TrainOutcome};

/// Generated corpus split into training pool, validation and test blocks.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub vocab: Vocabulary,
    /// `[disf block of max size][punc block of max size]`.
    pub train_pool: Vec<VariantSet>,
    pub max_size: usize,
    pub valid: TaskDatasets,
    pub test: Vec<VariantSet>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let cfg = cfg.resolved();
    let n = cfg.max_size();
    let v = cfg.valid_size;
    let all = generate_variants(&cfg.corpus, 2 * n + 2 * v + cfg.test_size)?;
    let (train_pool, rest) = all.split_at(2 * n);
    let (valid_vs, test) = rest.split_at(2 * v);
    let valid = build_task_datasets(valid_vs, TaskSizes { disf: v, punc: v, joint: 0 }, Split::Valid)?;
    let full = build_task_datasets(train_pool, TaskSizes { disf: n, punc: n, joint: 0 }, Split::Train)?;
    let vocab = build_vocab([&full.disf, &full.punc, &valid.disf, &valid.punc])?;
    Ok(ExperimentData {
        vocab,
        train_pool: train_pool.to_vec(),
        max_size: n,
        valid,
        test: test.to_vec(),
    })
}

impl ExperimentData {
    /// Training sets with `size` pairs per task; smaller sizes are prefixes
    /// of larger ones.
    pub fn train_sets(&self, size: usize) -> Result<TaskDatasets> {
        if size > self.max_size {
            return Err(Error::Size(format!("size {size} exceeds generated {}", self.max_size)));
        }
        let n = self.max_size;
        let picked: Vec<VariantSet> = self.train_pool[..size]
            .iter()
            .chain(&self.train_pool[n..n + size])
            .cloned()
            .collect();
        build_task_datasets(&picked, TaskSizes { disf: size, punc: size, joint: 0 }, Split::Train)
    }

    /// Test-set datasets sharing one list of spoken sources.
    pub fn test_sets(&self) -> [Dataset; 4] {
        let mk = |task: Task, f: fn(&VariantSet) -> &String| {
            Dataset::new(
                task,
                Split::Test,
                self.test.iter().map(|v| ParallelPair::new(&v.spoken, f(v), task)).collect(),
            )
        };
        [
            mk(Task::Disf, |v| &v.disf_target),
            mk(Task::Punc, |v| &v.punc_target),
            mk(Task::Same, |v| &v.spoken),
            mk(Task::Joint, |v| &v.joint_target),
        ]
    }

    /// Writes `{task}.{split}.jsonl` files and `vocab.txt` under `dir`.
    pub fn write(&self, dir: &Path, size: usize) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let train = self.train_sets(size)?;
        for ds in [&train.disf, &train.punc, &train.same, &self.valid.disf, &self.valid.punc, &self.valid.same] {
            let task = ds.task.expect("single-task dataset");
            write_dataset(ds, &dir.join(format!("{task}.{}.jsonl", ds.split.as_str())))?;
        }
        for ds in &self.test_sets() {
            let task = ds.task.expect("single-task dataset");
            write_dataset(ds, &dir.join(format!("{task}.test.jsonl")))?;
        }
        self.vocab.save(&dir.join("vocab.txt"))
    }
}

/// Peak resident set size of this process in KiB, where available.
pub fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

/// Trains one model kind on `sets`.
pub fn train_kind(cfg: &ExperimentConfig, vocab: &Vocabulary, kind: ModelKind, train_sets: &TaskDatasets, valid: &TaskDatasets) -> Result<TrainOutcome> {
    let cfg = cfg.resolved();
    let mut tc = cfg.train.clone();
    tc.seed = tc.seed.wrapping_add(kind as u64);
    match kind {
        ModelKind::Joint => train(
            &cfg.model,
            &tc,
            vocab,
            &[&train_sets.disf, &train_sets.punc, &train_sets.same],
            &[&valid.disf, &valid.punc, &valid.same],
            TrainMode::Joint,
        ),
        ModelKind::DedicatedDisf => train(&cfg.model, &tc, vocab, &[&train_sets.disf], &[&valid.disf], TrainMode::Baseline),
        ModelKind::DedicatedPunc => train(&cfg.model, &tc, vocab, &[&train_sets.punc], &[&valid.punc], TrainMode::Baseline),
    }
}

struct RowSpec<'a> {
    model: RowModel,
    mode: DecodeMode,
    params: usize,
    references: &'a [String],
    filler_f1: bool,
}

struct Evaluator<'a> {
    cfg: &'a ExperimentConfig,
    size: usize,
    sources: Vec<String>,
    hyp_dir: PathBuf,
    report: &'a mut EvalReport,
}

impl Evaluator<'_> {
    fn run(&mut self, spec: RowSpec<'_>, conv: Option<(&dyn Converter, &PassCounter)>) -> Result<()> {
        let started = Instant::now();
        let (hyps, passes, unfinished) = match conv {
            Some((c, counter)) => {
                counter.reset();
                match convert_all(c, &self.sources, self.cfg.workers) {
                    Ok(h) => (h, counter.get(), counter.unfinished()),
                    Err(e) => {
                        self.fail(spec.model, spec.mode, e.to_string());
                        return Ok(());
                    }
                }
            }
            None => (self.sources.clone(), 0, 0),
        };
        let seconds = started.elapsed().as_secs_f64();
        let name = format!("{}.{}.txt", spec.model, spec.mode.as_str().replace('/', "-"));
        let path = self.hyp_dir.join(name);
        fs::write(&path, hyps.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
        let unit = self.cfg.granularity;
        let scores = score_corpus(unit, &self.sources, spec.references, &hyps)?;
        let filler_f1 = if spec.filler_f1 {
            Some(corpus_filler_f1(&self.sources, spec.references, &hyps, &self.cfg.corpus.filler_inventory)?.2)
        } else {
            None
        };
        self.report.rows.push(ReportRow {
            model_kind: spec.model,
            decode_mode: spec.mode,
            dataset_size: self.size,
            bleu: Some(scores.bleu),
            meteor: Some(scores.meteor),
            gleu: Some(scores.gleu),
            exact_match: Some(exact_match_rate(spec.references, &hyps)?),
            wallclock_s: Some(seconds),
            passes: Some(passes),
            params: Some(spec.params),
        });
        self.report.diagnostics.push(RowDiagnostics {
            model_kind: spec.model,
            decode_mode: spec.mode,
            dataset_size: self.size,
            filler_f1,
            unfinished,
            error: None,
        });
        log::info!("size {} {} {}: gleu {:.4} ({seconds:.1}s)", self.size, spec.model, spec.mode, scores.gleu);
        Ok(())
    }

    fn fail(&mut self, model: RowModel, mode: DecodeMode, error: String) {
        log::warn!("size {} {model} {mode} failed: {error}", self.size);
        self.report.rows.push(ReportRow::failed(model, mode, self.size));
        self.report.diagnostics.push(RowDiagnostics {
            model_kind: model,
            decode_mode: mode,
            dataset_size: self.size,
            filler_f1: None,
            unfinished: 0,
            error: Some(error),
        });
    }
}

/// The eleven rows evaluated for each dataset size, in report order.
pub const ROWS: [(RowModel, DecodeMode); 11] = [
    (RowModel::DedicatedDisf, DecodeMode::Single),
    (RowModel::DedicatedPunc, DecodeMode::Single),
    (RowModel::Joint, DecodeMode::OnOff),
    (RowModel::Joint, DecodeMode::OffOn),
    (RowModel::Joint, DecodeMode::OffOff),
    (RowModel::DedicatedPair, DecodeMode::CascadeFwd),
    (RowModel::DedicatedPair, DecodeMode::CascadeRev),
    (RowModel::Joint, DecodeMode::CascadeFwd),
    (RowModel::Joint, DecodeMode::CascadeRev),
    (RowModel::Joint, DecodeMode::OnOn),
    (RowModel::Identity, DecodeMode::None),
];

/// Timed repeated decoding of `sources` with each entry; the reported time
/// is the median over `repeats` runs, with entries interleaved per run.
pub fn bench_decode(
    entries: &[(RowModel, DecodeMode, &dyn Converter, &PassCounter)],
    sources: &[String],
    repeats: usize,
    workers: usize,
    size: usize,
) -> Result<Vec<BenchRecord>> {
    let warm: Vec<String> = sources.iter().take(8).cloned().collect();
    for (_, _, c, _) in entries {
        convert_all(*c, &warm, workers)?;
    }
    let mut runs = vec![Vec::new(); entries.len()];
    let mut passes = vec![None; entries.len()];
    for _ in 0..repeats.max(1) {
        for (i, (_, _, c, counter)) in entries.iter().enumerate() {
            counter.reset();
            let t = Instant::now();
            convert_all(*c, sources, workers)?;
            runs[i].push(t.elapsed().as_secs_f64());
            let p = counter.get();
            if passes[i].is_some_and(|q| q != p) {
                return Err(Error::Numeric(format!("pass count changed between runs ({p})")));
            }
            passes[i] = Some(p);
        }
    }
    Ok(entries
        .iter()
        .zip(runs)
        .zip(passes)
        .map(|(((model, mode, _, _), runs), passes)| {
            let median = median(&runs);
            BenchRecord {
                dataset_size: size,
                model_kind: *model,
                decode_mode: *mode,
                sentences: sources.len(),
                runs_s: runs,
                median_s: median,
                mean_per_sentence_s: median / sources.len().max(1) as f64,
                passes: passes.unwrap_or(0),
            }
        })
        .collect())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the whole pipeline and writes `report.{csv,md,json}` (plus
/// `report.notime.csv` without timings) under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(&out.join("config.resolved.toml"), &cfg.to_toml())?;
    let data = prepare_data(&cfg)?;
    data.vocab.save(&out.join("vocab.txt"))?;
    let [disf_test, punc_test, same_test, joint_test] = data.test_sets();
    let refs = |d: &Dataset| d.pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>();
    let (disf_refs, punc_refs, same_refs, joint_refs) = (refs(&disf_test), refs(&punc_test), refs(&same_test), refs(&joint_test));
    let sources: Vec<String> = data.test.iter().map(|v| v.spoken.clone()).collect();

    let mut report = EvalReport {
        granularity: cfg.granularity,
        ..EvalReport::default()
    };
    for &size in &cfg.ladder {
        let dir = out.join(format!("size_{size}"));
        let hyp_dir = dir.join("hyp");
        fs::create_dir_all(&hyp_dir).map_err(|e| Error::io(&hyp_dir, e))?;
        let sets = data.train_sets(size)?;
        let mut models: Vec<(ModelKind, Option<Model<f32>>)> = Vec::new();
        for kind in [ModelKind::DedicatedDisf, ModelKind::DedicatedPunc, ModelKind::Joint] {
            log::info!("size {size}: training {kind}");
            let started = Instant::now();
            let result = train_kind(&cfg, &data.vocab, kind, &sets, &data.valid);
            let seconds = started.elapsed().as_secs_f64();
            match result {
                Ok(o) => {
                    write(&dir.join(format!("{kind}.trace.jsonl")), &o.trace_jsonl())?;
                    let ck = Checkpoint {
                        kind,
                        experiment: Some(cfg.clone()),
                        vocab: data.vocab.clone(),
                        model: o.model.clone(),
                        optimizer: None,
                    };
                    save_checkpoint(&ck, &dir.join(format!("{kind}.ckpt")))?;
                    report.training.push(TrainSummary {
                        dataset_size: size,
                        model_kind: kind.to_string(),
                        epochs: o.trace.len() / 2,
                        best_epoch: o.best_epoch,
                        best_valid_loss: o.best_valid_loss,
                        seconds,
                        error: None,
                    });
                    models.push((kind, Some(o.model)));
                }
                Err(e) => {
                    log::warn!("size {size}: training {kind} failed: {e}");
                    report.training.push(TrainSummary {
                        dataset_size: size,
                        model_kind: kind.to_string(),
                        epochs: 0,
                        best_epoch: 0,
                        best_valid_loss: f64::NAN,
                        seconds,
                        error: Some(e.to_string()),
                    });
                    models.push((kind, None));
                }
            }
        }
        let get = |k: ModelKind| models.iter().find(|m| m.0 == k).and_then(|m| m.1.as_ref());
        let (ded_disf, ded_punc, joint) = (get(ModelKind::DedicatedDisf), get(ModelKind::DedicatedPunc), get(ModelKind::Joint));

        let counter = PassCounter::new();
        let dc = cfg.decode;
        let vocab = &data.vocab;
        let counter_ref = &counter;
        fn make<'a>(m: &'a Model<f32>, v: &'a Vocabulary, dc: DecodeConfig, c: &'a PassCounter) -> ModelConverter<'a> {
            ModelConverter::new(m, v, dc, c)
        }
        let conv = |m, s: Option<SwitchSetting>| make(m, vocab, dc.with_switch(s), counter_ref);
        let mut ev = Evaluator {
            cfg: &cfg,
            size,
            sources: sources.clone(),
            hyp_dir,
            report: &mut report,
        };
        for (model, mode) in ROWS {
            let refs: &[String] = match mode {
                DecodeMode::OnOff => &disf_refs,
                DecodeMode::OffOn => &punc_refs,
                DecodeMode::OffOff => &same_refs,
                DecodeMode::Single if model == RowModel::DedicatedDisf => &disf_refs,
                DecodeMode::Single => &punc_refs,
                _ => &joint_refs,
            };
            let filler_f1 = !matches!(mode, DecodeMode::OffOn | DecodeMode::OffOff) && model != RowModel::DedicatedPunc;
            let params = |ms: &[Option<&Model<f32>>]| ms.iter().flatten().map(|m| m.num_params()).sum::<usize>();
            let missing = || "model failed to train".to_string();
            let spec = |params: usize| RowSpec {
                model,
                mode,
                params,
                references: refs,
                filler_f1,
            };
            match (model, mode) {
                (RowModel::Identity, _) => ev.run(spec(0), None)?,
                (RowModel::DedicatedDisf, _) => match ded_disf {
                    Some(m) => ev.run(spec(params(&[Some(m)])), Some((&conv(m, None), &counter)))?,
                    None => ev.fail(model, mode, missing()),
                },
                (RowModel::DedicatedPunc, _) => match ded_punc {
                    Some(m) => ev.run(spec(params(&[Some(m)])), Some((&conv(m, None), &counter)))?,
                    None => ev.fail(model, mode, missing()),
                },
                (RowModel::DedicatedPair, _) => match (ded_disf, ded_punc) {
                    (Some(d), Some(p)) => {
                        let (cd, cp) = (conv(d, None), conv(p, None));
                        let f = |s: &str| {
                            if mode == DecodeMode::CascadeFwd {
                                cascade(&cd, &cp, s)
                            } else {
                                cascade(&cp, &cd, s)
                            }
                        };
                        ev.run(spec(params(&[Some(d), Some(p)])), Some((&f, &counter)))?
                    }
                    _ => ev.fail(model, mode, missing()),
                },
                (RowModel::Joint, _) => match joint {
                    Some(j) => {
                        let p = params(&[Some(j)]);
                        match mode {
                            DecodeMode::CascadeFwd | DecodeMode::CascadeRev => {
                                let (cd, cp) = (conv(j, Some(SwitchSetting::DISF)), conv(j, Some(SwitchSetting::PUNC)));
                                let f = |s: &str| {
                                    if mode == DecodeMode::CascadeFwd {
                                        cascade(&cd, &cp, s)
                                    } else {
                                        cascade(&cp, &cd, s)
                                    }
                                };
                                ev.run(spec(p), Some((&f, &counter)))?
                            }
                            _ => {
                                let s = match mode {
                                    DecodeMode::OnOff => SwitchSetting::DISF,
                                    DecodeMode::OffOn => SwitchSetting::PUNC,
                                    DecodeMode::OffOff => SwitchSetting::SAME,
                                    _ => SwitchSetting::JOINT,
                                };
                                ev.run(spec(p), Some((&conv(j, Some(s)), &counter)))?
                            }
                        }
                    }
                    None => ev.fail(model, mode, missing()),
                },
            }
        }

        if let Some(j) = joint {
            let bench_src: Vec<String> = sources.iter().take(cfg.bench_sentences).cloned().collect();
            let (c_joint, c_fwd, c_pair) = (PassCounter::new(), PassCounter::new(), PassCounter::new());
            let on_on = ModelConverter::new(j, &data.vocab, dc.with_switch(Some(SwitchSetting::JOINT)), &c_joint);
            let jd = ModelConverter::new(j, &data.vocab, dc.with_switch(Some(SwitchSetting::DISF)), &c_fwd);
            let jp = ModelConverter::new(j, &data.vocab, dc.with_switch(Some(SwitchSetting::PUNC)), &c_fwd);
            let joint_fwd = |s: &str| cascade(&jd, &jp, s);
            let mut entries: Vec<(RowModel, DecodeMode, &dyn Converter, &PassCounter)> = vec![
                (RowModel::Joint, DecodeMode::OnOn, &on_on, &c_joint),
                (RowModel::Joint, DecodeMode::CascadeFwd, &joint_fwd, &c_fwd),
            ];
            let pair = ded_disf.zip(ded_punc).map(|(d, p)| {
                (
                    ModelConverter::new(d, &data.vocab, dc.with_switch(None), &c_pair),
                    ModelConverter::new(p, &data.vocab, dc.with_switch(None), &c_pair),
                )
            });
            let pair_fwd = pair.as_ref().map(|(d, p)| move |s: &str| cascade(d, p, s));
            if let Some(f) = &pair_fwd {
                entries.push((RowModel::DedicatedPair, DecodeMode::CascadeFwd, f, &c_pair));
            }
            report.bench.extend(bench_decode(&entries, &bench_src, cfg.bench_repeats, cfg.workers, size)?);
        }
        report.peak_rss_kb = peak_rss_kb();
        write_report_files(&out, &report)?;
    }
    Ok(report)
}

fn write_report_files(out: &Path, report: &EvalReport) -> Result<()> {
    write(&out.join("report.csv"), &render_csv(report, true)?)?;
    write(&out.join("report.notime.csv"), &render_csv(report, false)?)?;
    write(&out.join("report.md"), &render_markdown(report))?;
    write(&out.join("report.json"), &(serde_json::to_string_pretty(report)? + "\n"))
}
