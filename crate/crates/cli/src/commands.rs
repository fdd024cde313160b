use std::path::{Path, PathBuf};

use tuberel_core::checkpoint::Checkpoint;
use tuberel_core::config::RunConfig;
use tuberel_core::dataset::Dataset;
use tuberel_core::encoding::Variant;
use tuberel_core::eval::{evaluate, video_results, MetricReport};
use tuberel_core::features::{ExternalFeatures, ExternalStore};
use tuberel_core::io;
use tuberel_core::model::stack_grad_check;
use tuberel_core::pipeline::{self, ablate_k, ablate_variant, ablation_table, run_pipeline, ABLATION_K};
use tuberel_core::search::{resolve_query, search, QueryExample};
use tuberel_core::stage1::{propose_dataset, InteractionProposal};
use tuberel_core::stage2::{detect_dataset, ScoredTriplet};
use tuberel_core::synth::{generate, make_suite, ScenarioSpec, SuiteKind};
use tuberel_core::Error;

use crate::args::{Cli, Command, Common, SuiteData};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Which training stage `--epochs`, `--lr` and `--batch` apply to.
#[derive(Clone, Copy, PartialEq)]
enum Scope {
    Stage1,
    Stage2,
    Both,
}

fn apply_overrides(cfg: &mut RunConfig, c: &Common, scope: Scope) -> Result<()> {
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = c.d {
        cfg.model.embed_dim = d;
    }
    if let Some(k) = c.k {
        cfg.model.primitives = k;
    }
    if let Some(v) = &c.variant {
        cfg.model.variant = v.parse::<Variant>()?;
    }
    if let Some(m) = c.m {
        cfg.stage1.window = m;
    }
    if let Some(n) = c.n {
        cfg.stage2.n_sample = n;
    }
    let s1 = matches!(scope, Scope::Stage1 | Scope::Both);
    let s2 = matches!(scope, Scope::Stage2 | Scope::Both);
    if let Some(e) = c.epochs {
        if s1 {
            cfg.stage1.epochs = e;
        }
        if s2 {
            cfg.stage2.epochs = e;
        }
    }
    if let Some(lr) = c.lr {
        if s1 {
            cfg.stage1.lr = lr;
        }
        if s2 {
            cfg.stage2.lr = lr;
        }
    }
    if let Some(b) = c.batch {
        if s1 {
            cfg.stage1.batch = b;
        }
        if s2 {
            cfg.stage2.batch = b;
        }
    }
    cfg.validate()?;
    Ok(())
}

/// Defaults, or `--config`, with flag overrides.
fn fresh_config(c: &Common, scope: Scope) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, c, scope)?;
    Ok(cfg)
}

/// The checkpoint's stored configuration (or `--config`) with flag
/// overrides; model shape overrides must agree with the checkpoint.
fn config_from_checkpoint(ckpt: &Checkpoint, c: &Common, scope: Scope) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => ckpt.config.clone(),
    };
    apply_overrides(&mut cfg, c, scope)?;
    ckpt.check_model_config(&cfg.model)?;
    Ok(cfg)
}

fn require_out(c: &Common) -> Result<&Path> {
    c.out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required for this subcommand".into()))
}

/// Reads external feature files; directories contribute their `.json`
/// files in name order.
fn load_externals(paths: &[PathBuf]) -> Result<ExternalStore> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let rd = std::fs::read_dir(p).map_err(|e| io_error(p, e))?;
            let mut inner = Vec::new();
            for entry in rd {
                let path = entry.map_err(|e| io_error(p, e))?.path();
                if path.extension().is_some_and(|x| x == "json") {
                    inner.push(path);
                }
            }
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    let mut store = ExternalStore::new();
    for f in files {
        let e: ExternalFeatures = io::read_json(&f)?;
        e.validate()?;
        store.entry(e.video_id.clone()).or_default().push(e);
    }
    Ok(store)
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(Dataset::load(path)?)
}

/// `model.json` -> `model.loss.csv`.
fn loss_csv_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn write_loss_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    Ok(io::write_atomic(path, s.as_bytes())?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(io::write_atomic(path, text.as_bytes())?)
}

pub fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Gen { suite, scenario } => gen(c, &suite, scenario.as_deref()),
        Command::TrainStage1 { train, externals } => train_stage1(c, &train, &externals),
        Command::Propose { data, stage1, externals } => propose(c, &data, &stage1, &externals),
        Command::TrainStage2 {
            train,
            proposals,
            stage1,
            freeze_trunk,
            externals,
        } => train_stage2(c, &train, proposals.as_deref(), &stage1, freeze_trunk, &externals),
        Command::Detect {
            data,
            proposals,
            stage2,
            top_p,
            externals,
        } => detect(c, &data, &proposals, &stage2, top_p, &externals),
        Command::Eval { data, detections, csv } => eval(c, &data, &detections, csv.as_deref()),
        Command::Search {
            data,
            proposals,
            model,
            query,
            primitives,
            top,
            externals,
        } => run_search(c, &data, &proposals, &model, query.as_deref(), primitives, top, &externals),
        Command::Gradcheck { configs } => gradcheck(c, configs),
        Command::AblateK { data, ks } => ablate(c, &data, Some(ks.unwrap_or_else(|| ABLATION_K.to_vec()))),
        Command::AblateVariant { data } => ablate(c, &data, None),
        Command::DurationReport { data, detections } => duration_report(c, &data, detections.as_deref()),
    }
}

fn gen(c: &Common, suite: &str, scenario: Option<&Path>) -> Result<()> {
    let out = require_out(c)?;
    if let Some(p) = scenario {
        let mut spec: ScenarioSpec = io::read_json(p)?;
        if let Some(s) = c.seed {
            spec.seed = s;
        }
        let d = generate(&spec)?;
        let path = out.join(format!("{}_{}.json", spec.name, spec.split));
        d.save(&path)?;
        println!("{}", path.display());
        return Ok(());
    }
    let kinds: Vec<SuiteKind> = if suite == "all" {
        SuiteKind::ALL.to_vec()
    } else {
        vec![suite.parse()?]
    };
    let seed = c.seed.unwrap_or(0);
    for k in kinds {
        let s = make_suite(k, seed)?;
        for d in [&s.train, &s.test] {
            let path = out.join(format!("{}_{}.json", d.name, d.split));
            d.save(&path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn train_stage1(c: &Common, train: &Path, externals: &[PathBuf]) -> Result<()> {
    let out = require_out(c)?;
    let cfg = fresh_config(c, Scope::Stage1)?;
    let data = load_dataset(train)?;
    let ext = load_externals(externals)?;
    let model = pipeline::run_stage1(&data, &cfg, &ext)?;
    Checkpoint::stage1(&model, &cfg, &data).save(out)?;
    write_loss_csv(&loss_csv_path(out), &model.meta.loss_curve)?;
    println!(
        "stage1: {} epochs, final loss {}",
        model.meta.epochs_run,
        model.meta.final_loss.map_or("-".into(), |l| format!("{l:.6}"))
    );
    Ok(())
}

fn propose(c: &Common, data: &Path, stage1: &Path, externals: &[PathBuf]) -> Result<()> {
    let out = require_out(c)?;
    let ckpt = Checkpoint::load(stage1)?;
    let cfg = config_from_checkpoint(&ckpt, c, Scope::Stage1)?;
    let model = ckpt.to_stage1()?;
    let d = load_dataset(data)?;
    ckpt.check_labels(&d)?;
    let props = propose_dataset(&d, &model, &cfg.stage1, &load_externals(externals)?)?;
    io::write_jsonl(out, &props)?;
    println!("{} proposals over {} videos", props.len(), d.videos.len());
    Ok(())
}

fn train_stage2(
    c: &Common,
    train: &Path,
    proposals: Option<&Path>,
    stage1: &Path,
    freeze_trunk: bool,
    externals: &[PathBuf],
) -> Result<()> {
    let out = require_out(c)?;
    let ckpt = Checkpoint::load(stage1)?;
    let mut cfg = config_from_checkpoint(&ckpt, c, Scope::Stage2)?;
    cfg.stage2.freeze_trunk |= freeze_trunk;
    let s1 = ckpt.to_stage1()?;
    let d = load_dataset(train)?;
    ckpt.check_labels(&d)?;
    let props: Vec<InteractionProposal> = match proposals {
        Some(p) => io::read_jsonl(p)?,
        None => Vec::new(),
    };
    let model = pipeline::run_stage2(&d, &props, &s1, &cfg, &load_externals(externals)?)?;
    Checkpoint::stage2(&model, &cfg, &d).save(out)?;
    write_loss_csv(&loss_csv_path(out), &model.model.meta.loss_curve)?;
    println!(
        "stage2: {} epochs, final loss {}",
        model.model.meta.epochs_run,
        model.model.meta.final_loss.map_or("-".into(), |l| format!("{l:.6}"))
    );
    Ok(())
}

fn detect(
    c: &Common,
    data: &Path,
    proposals: &Path,
    stage2: &Path,
    top_p: Option<usize>,
    externals: &[PathBuf],
) -> Result<()> {
    let out = require_out(c)?;
    let ckpt = Checkpoint::load(stage2)?;
    let mut cfg = config_from_checkpoint(&ckpt, c, Scope::Stage2)?;
    if let Some(p) = top_p {
        cfg.stage2.top_p = p;
        cfg.validate()?;
    }
    let mut model = ckpt.to_stage2()?;
    if let Some(n) = c.n {
        model.n_sample = n;
    }
    let d = load_dataset(data)?;
    ckpt.check_labels(&d)?;
    let props: Vec<InteractionProposal> = io::read_jsonl(proposals)?;
    let dets = detect_dataset(&d, &props, &model, cfg.stage2.top_p, &load_externals(externals)?)?;
    io::write_jsonl(out, &dets)?;
    println!("{} triplets", dets.len());
    Ok(())
}

fn eval(c: &Common, data: &Path, detections: &Path, csv: Option<&Path>) -> Result<()> {
    let cfg = fresh_config(c, Scope::Both)?;
    let d = load_dataset(data)?;
    let dets: Vec<ScoredTriplet> = io::read_jsonl(detections)?;
    let report = evaluate(&video_results(&d, &dets)?, &cfg.eval);
    emit_report(c, &report, csv)
}

fn emit_report(c: &Common, report: &MetricReport, csv: Option<&Path>) -> Result<()> {
    if let Some(out) = &c.out {
        io::write_json(out, report)?;
    }
    if let Some(p) = csv {
        write_text(p, &report.duration_csv())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_search(
    c: &Common,
    data: &Path,
    proposals: &Path,
    model: &Path,
    query: Option<&Path>,
    primitives: Option<Vec<usize>>,
    top: usize,
    externals: &[PathBuf],
) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let m = ckpt.to_pair_model()?;
    let d = load_dataset(data)?;
    ckpt.check_labels(&d)?;
    let n = c.n.or(ckpt.n_sample).unwrap_or(ckpt.config.stage2.n_sample);
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let q = match (query, primitives) {
        (Some(p), _) => {
            let ex: Vec<QueryExample> = io::read_json(p)?;
            resolve_query(&ex, &m)?
        }
        (None, Some(ps)) if !ps.is_empty() => ps,
        _ => return Err(CliError::Usage("give --query or --primitives".into())),
    };
    let props: Vec<InteractionProposal> = io::read_jsonl(proposals)?;
    let hits = search(&q, &props, &d, &m, n, top, &load_externals(externals)?)?;
    if let Some(out) = &c.out {
        io::write_jsonl(out, &hits)?;
    }
    println!("query primitives {q:?}");
    for h in &hits {
        println!(
            "{:>3} {} ({}, {}) [{}, {}) {:.6}",
            h.rank, h.video_id, h.subject_id, h.object_id, h.span.start, h.span.end, h.score
        );
    }
    Ok(())
}

fn gradcheck(c: &Common, configs: u64) -> Result<()> {
    if configs == 0 {
        return Err(CliError::Usage("--configs must be positive".into()));
    }
    let seed = c.seed.unwrap_or(0);
    let mut cases = Vec::new();
    let mut worst = 0.0f64;
    for v in Variant::ALL {
        for multi in [false, true] {
            let mut w = 0.0f64;
            for i in 0..configs {
                let case = stack_grad_check(v, multi, seed.wrapping_mul(1_000_003).wrapping_add(i))?;
                w = w.max(case.max_rel_error);
                cases.push(case);
            }
            println!("{:<9} {:<7} max rel error {w:.3e}", v.name(), if multi { "softmax" } else { "sigmoid" });
            worst = worst.max(w);
        }
    }
    if let Some(out) = &c.out {
        io::write_json(out, &cases)?;
    }
    if worst >= 1e-4 {
        return Err(Error::Numeric(format!("gradient check failed: max relative error {worst:.3e}")).into());
    }
    Ok(())
}

fn suite_data(c: &Common, s: &SuiteData, default: SuiteKind) -> Result<(Dataset, Dataset)> {
    match (&s.train, &s.test, &s.suite) {
        (Some(a), Some(b), None) => Ok((load_dataset(a)?, load_dataset(b)?)),
        (None, None, suite) => {
            let kind = match suite {
                Some(name) => name.parse()?,
                None => default,
            };
            let suite = make_suite(kind, s.data_seed.or(c.seed).unwrap_or(0))?;
            Ok((suite.train, suite.test))
        }
        _ => Err(CliError::Usage("give either --suite or both --train and --test".into())),
    }
}

fn ablate(c: &Common, data: &SuiteData, ks: Option<Vec<usize>>) -> Result<()> {
    let cfg = fresh_config(c, Scope::Both)?;
    let (train, test) = suite_data(c, data, SuiteKind::Compositional)?;
    let (rows, stem) = match ks {
        Some(ks) => (ablate_k(&train, &test, &cfg, &ks)?, "ablate_k"),
        None => (ablate_variant(&train, &test, &cfg)?, "ablate_variant"),
    };
    let table = ablation_table(&rows);
    if let Some(out) = &c.out {
        io::write_json(&out.join(format!("{stem}.json")), &rows)?;
        write_text(&out.join(format!("{stem}.txt")), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn duration_report(c: &Common, data: &SuiteData, detections: Option<&Path>) -> Result<()> {
    let cfg = fresh_config(c, Scope::Both)?;
    let report = match detections {
        Some(p) => {
            let test = load_dataset(data.test.as_deref().expect("clap enforces --test"))?;
            let dets: Vec<ScoredTriplet> = io::read_jsonl(p)?;
            evaluate(&video_results(&test, &dets)?, &cfg.eval)
        }
        None => {
            let (train, test) = suite_data(c, data, SuiteKind::Duration)?;
            run_pipeline(&train, &test, &cfg, &ExternalStore::new())?.report
        }
    };
    if let Some(out) = &c.out {
        io::write_json(&out.join("report.json"), &report)?;
        write_text(&out.join("duration.csv"), &report.duration_csv())?;
    }
    print!("{}", report.duration_csv());
    Ok(())
}
