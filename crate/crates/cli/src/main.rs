//! `ss3d`: synthetic data, training, segmentation, evaluation and
//! inspection on top of `ss3d-core`.

mod config;
mod error;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ss3d_core::metrics::{evaluate_pair, wilcoxon_signed_rank, EvalOptions, MetricsReport};
use ss3d_core::network::{build_model, count_parameters, load_checkpoint, read_checkpoint, write_checkpoint};
use ss3d_core::paths::{enumerate_paths, verify_paths, Dims};
use ss3d_core::pipeline::io::FileFormat;
use ss3d_core::pipeline::{
    model_class_table, read_labels, read_volume, segment_hippocampus, segment_volume, write_labels, ClassTable,
    SegmentConfig,
};
use ss3d_core::training::{gen_synthetic, read_dataset, write_dataset, LogRecord, SyntheticSpec, Trainer};
use ss3d_core::{BottleneckKind, LabelMap, ModelConfig};

use crate::config::{load_train_file, TrainFile};
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "ss3d", version, about = "Volumetric selective-scan segmentation")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic volume/label pairs, a class table and a manifest.
    GenSynth(GenSynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Segment a volume with a trained checkpoint.
    Segment(SegmentArgs),
    /// Per-class DSC, VS and ASSD, optionally with a paired comparison.
    Evaluate(EvaluateArgs),
    /// Enumerate and verify the 48 traversal paths of a grid.
    Paths(PathsArgs),
    /// Describe a checkpoint or a model configuration.
    Info(InfoArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full generator spec as JSON; replaces --count/--size/--classes.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint and log directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the latest epoch checkpoint in --out.
    #[arg(long)]
    resume: bool,
    /// Overrides the training seed (also the model initialisation seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override, e.g. `train.epochs=3` or `model.drop_path=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 16)]
    stride: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Model grid `D,H,W` after axis permutation.
    #[arg(long, value_parser = parse_dims)]
    target_dims: Option<Dims>,
    /// Second-stage checkpoint run on one patch around the hippocampus.
    #[arg(long)]
    hippocampus: Option<PathBuf>,
    /// Defaults to `<output stem>_hippocampus.<ext>`.
    #[arg(long)]
    hippocampus_output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted label maps, paired in order with --truth.
    #[arg(long, num_args = 1.., required = true)]
    pred: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    truth: Vec<PathBuf>,
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
    /// Summary JSON; defaults to the CSV path with a `.json` extension.
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// A second model's predictions for the same cases.
    #[arg(long, num_args = 1..)]
    pred_b: Vec<PathBuf>,
    /// Wilcoxon signed-rank test of per-case means, --pred against --pred-b.
    #[arg(long)]
    paired_summary: bool,
    #[arg(long)]
    include_background: bool,
    /// Voxel spacing `z,y,x` in mm.
    #[arg(long, value_parser = parse_spacing, default_value = "1,1,1")]
    spacing: [f64; 3],
    #[arg(long, default_value = "data")]
    dataset: String,
}

#[derive(Args)]
struct PathsArgs {
    #[arg(long, value_parser = parse_dims)]
    dims: Dims,
    #[arg(long)]
    verify: bool,
    /// CSV of every path: `path,t,z,y,x`.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long, conflicts_with = "config")]
    model: Option<PathBuf>,
    /// Model configuration JSON (`full` and `desk` name the presets).
    #[arg(long)]
    config: Option<String>,
    /// Also count the model with the other bottleneck kind.
    #[arg(long)]
    compare_bottlenecks: bool,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("bad component {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    <[T; 3]>::try_from(parts).map_err(|_| format!("expected three comma-separated values, got {s:?}"))
}

fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let d: Dims = parse_list(s)?;
    if d.contains(&0) {
        return Err("dimensions must be positive".into());
    }
    Ok(d)
}

fn parse_spacing(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: [f64; 3] = parse_list(s)?;
    if v.iter().any(|x| !(*x > 0.0)) {
        return Err("spacing must be positive".into());
    }
    Ok(v)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let verbose = cli.verbose;
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a, verbose),
        Command::Segment(a) => segment(a, verbose),
        Command::Evaluate(a) => evaluate(a),
        Command::Paths(a) => paths(a),
        Command::Info(a) => info(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_slice(&fs::read(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => SyntheticSpec::nested(a.size, a.classes, a.count),
    };
    spec.validate()?;
    let samples = gen_synthetic(&spec, a.seed)?;
    write_dataset(&a.out, &samples, &spec.class_table())?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

const LOG_FILE: &str = "train_log.jsonl";

fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let epoch = name.strip_prefix("epoch_").and_then(|r| r.strip_suffix(".ckpt")).and_then(|n| n.parse().ok());
        if let Some(e) = epoch {
            if best.as_ref().map_or(true, |(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn train(a: TrainArgs, verbose: bool) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let TrainFile { model: mut model_cfg, train: mut train_cfg, n_classes_set } =
        load_train_file(a.config.as_deref(), &a.overrides)?;
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }
    if !n_classes_set {
        model_cfg.n_classes = dataset.classes.len();
    }
    model_cfg.validate()?;
    train_cfg.validate()?;
    fs::create_dir_all(&a.out)?;

    let resume_from = if a.resume { latest_checkpoint(&a.out)? } else { None };
    let (model, ckpt) = match &resume_from {
        Some(p) => {
            let ckpt = read_checkpoint(p)?;
            (ckpt.to_model()?, Some(ckpt))
        }
        None => (build_model::<f32>(&model_cfg, train_cfg.seed)?, None),
    };
    let mut trainer = Trainer::new(&model, &dataset, train_cfg)?;
    let log_path = a.out.join(LOG_FILE);
    let mut kept = Vec::new();
    if let Some(ckpt) = &ckpt {
        trainer.restore(ckpt)?;
        if let Ok(text) = fs::read_to_string(&log_path) {
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r: LogRecord = serde_json::from_str(line).map_err(ss3d_core::Error::from)?;
                if r.step < trainer.step {
                    kept.push(line.to_string());
                }
            }
        }
        if verbose {
            eprintln!("resuming at epoch {}, step {}", trainer.epochs_done, trainer.step);
        }
    }
    fs::write(
        a.out.join("config.json"),
        serde_json::to_vec_pretty(&json!({"model": model.config, "train": trainer.config}))
            .map_err(ss3d_core::Error::from)?,
    )?;
    let mut log = BufWriter::new(File::create(&log_path)?);
    for line in &kept {
        writeln!(log, "{line}")?;
    }
    log.flush()?;
    trainer.run(
        |r| {
            writeln!(log, "{}", serde_json::to_string(r)?)?;
            log.flush()?;
            if verbose {
                eprintln!("step {} epoch {} scan {} loss {:.6} lr {:.3e}", r.step, r.epoch, r.scan_id, r.loss, r.lr);
            }
            Ok(())
        },
        |t| {
            let path = epoch_checkpoint(&a.out, t.epochs_done);
            write_checkpoint(&t.checkpoint()?, &path)?;
            if verbose {
                eprintln!("saved {}", path.display());
            }
            Ok(())
        },
    )?;
    println!("trained {} epochs, {} optimizer steps", trainer.epochs_done, trainer.step);
    Ok(())
}

fn same_format(input: &Path, output: &Path) -> Result<()> {
    let (i, o) = (FileFormat::from_path(input)?, FileFormat::from_path(output)?);
    if i != o {
        return Err(CliError::Usage(format!(
            "output {} must use the input's format ({:?})",
            output.display(),
            i
        )));
    }
    Ok(())
}

fn hippocampus_path(output: &Path) -> PathBuf {
    let name = output.file_name().and_then(|n| n.to_str()).unwrap_or("segmentation");
    let (stem, ext) = match name.split_once('.') {
        Some((s, e)) => (s, format!(".{e}")),
        None => (name, String::new()),
    };
    output.with_file_name(format!("{stem}_hippocampus{ext}"))
}

fn segment(a: SegmentArgs, verbose: bool) -> Result<()> {
    same_format(&a.input, &a.output)?;
    if a.stride == 0 {
        return Err(CliError::Usage("stride must be positive".into()));
    }
    let model = load_checkpoint(&a.model)?;
    let classes = model_class_table(&model)?;
    let volume = read_volume(&a.input)?;
    let cfg = SegmentConfig { stride: a.stride, threads: a.threads.max(1), target_dims: a.target_dims, ..Default::default() };
    let seg = segment_volume(&model, &volume, &classes, &cfg)?;
    write_labels(&a.output, &seg.labels)?;
    if verbose {
        eprintln!("segmented {} patches", seg.n_patches);
    }
    println!("wrote {} ({} patches)", a.output.display(), seg.n_patches);
    if let Some(h) = &a.hippocampus {
        let out = a.hippocampus_output.clone().unwrap_or_else(|| hippocampus_path(&a.output));
        same_format(&a.input, &out)?;
        let stage2 = load_checkpoint(h)?;
        let table2 = model_class_table(&stage2)?;
        let cfg2 = SegmentConfig { target_dims: None, ..cfg };
        let hippo = segment_hippocampus(&stage2, &volume, &seg.labels, &table2, &cfg2)?;
        write_labels(&out, &hippo)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn case_name(p: &Path) -> String {
    p.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string()
}

fn evaluate_set(preds: &[PathBuf], truths: &[LabelMap], opts: EvalOptions, classes: &ClassTable) -> Result<Vec<MetricsReport>> {
    preds
        .iter()
        .zip(truths)
        .map(|(p, t)| Ok(evaluate_pair(&read_labels(p, classes)?, t, opts)?))
        .collect()
}

fn write_reports(path: &Path, cases: &[String], reports: &[MetricsReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if reports.len() == 1 {
        reports[0].write_csv(&mut w)?;
    } else {
        writeln!(w, "case,index,label_id,name,dsc,vs,assd")?;
        for (case, r) in cases.iter().zip(reports) {
            for c in &r.classes {
                let assd = c.assd.map(|v| v.to_string()).unwrap_or_default();
                writeln!(w, "{},{},{},{},{},{},{}", case, c.index, c.label_id, c.name.replace(',', ";"), c.dsc, c.vs, assd)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some((m, var.sqrt()))
}

fn summary(reports: &[MetricsReport]) -> serde_json::Value {
    let col = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(f).collect() };
    let entry = |v: Vec<f64>| match mean_std(&v) {
        Some((m, s)) => json!({"mean": m, "std": s, "n": v.len()}),
        None => json!({"mean": null, "std": null, "n": 0}),
    };
    json!({
        "dsc": entry(col(&|r| Some(r.mean_dsc))),
        "vs": entry(col(&|r| Some(r.mean_vs))),
        "assd": entry(col(&|r| r.mean_assd)),
    })
}

fn table_cell(v: &serde_json::Value) -> String {
    match (v["mean"].as_f64(), v["std"].as_f64()) {
        (Some(m), Some(s)) => format!("{m:.5}±{s:.3}"),
        _ => String::new(),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.pred.len() != a.truth.len() {
        return Err(CliError::Usage(format!("{} predictions for {} ground truths", a.pred.len(), a.truth.len())));
    }
    if !a.pred_b.is_empty() && a.pred_b.len() != a.pred.len() {
        return Err(CliError::Usage("--pred-b needs one file per --pred".into()));
    }
    if a.paired_summary && a.pred_b.is_empty() {
        return Err(CliError::Usage("--paired-summary needs --pred-b".into()));
    }
    let classes = ClassTable::read(&a.classes)?;
    let opts = EvalOptions { include_background: a.include_background, spacing: a.spacing };
    let truths = a.truth.iter().map(|t| read_labels(t, &classes)).collect::<ss3d_core::Result<Vec<_>>>()?;
    let cases: Vec<String> = a.pred.iter().map(|p| case_name(p)).collect();
    let reports = evaluate_set(&a.pred, &truths, opts, &classes)?;
    write_reports(&a.out_csv, &cases, &reports)?;

    let mut out = json!({
        "cases": cases.iter().zip(&reports).map(|(c, r)| json!({"case": c, "report": r})).collect::<Vec<_>>(),
        "summary": summary(&reports),
    });
    println!("dataset,model,DSC,VS,ASSD");
    let s = &out["summary"];
    println!("{},pred,{},{},{}", a.dataset, table_cell(&s["dsc"]), table_cell(&s["vs"]), table_cell(&s["assd"]));
    if !a.pred_b.is_empty() {
        let reports_b = evaluate_set(&a.pred_b, &truths, opts, &classes)?;
        let sb = summary(&reports_b);
        println!("{},pred_b,{},{},{}", a.dataset, table_cell(&sb["dsc"]), table_cell(&sb["vs"]), table_cell(&sb["assd"]));
        out["summary_b"] = sb;
        if a.paired_summary {
            let mut paired = serde_json::Map::new();
            let metrics: [(&str, fn(&MetricsReport) -> Option<f64>); 3] =
                [("dsc", |r| Some(r.mean_dsc)), ("vs", |r| Some(r.mean_vs)), ("assd", |r| r.mean_assd)];
            for (name, f) in metrics {
                let (x, y): (Vec<f64>, Vec<f64>) =
                    reports.iter().zip(&reports_b).filter_map(|(ra, rb)| Some((f(ra)?, f(rb)?))).unzip();
                let value = match wilcoxon_signed_rank(&x, &y) {
                    Ok(w) => {
                        println!("wilcoxon {name}: p = {:.6} (n = {})", w.p_two_sided, w.n_effective);
                        serde_json::to_value(w).map_err(ss3d_core::Error::from)?
                    }
                    Err(e) => json!({"error": e.to_string()}),
                };
                paired.insert(name.into(), value);
            }
            out["paired"] = serde_json::Value::Object(paired);
        }
    }
    let json_path = a.out_json.clone().unwrap_or_else(|| a.out_csv.with_extension("json"));
    fs::write(&json_path, serde_json::to_vec_pretty(&out).map_err(ss3d_core::Error::from)?)?;
    Ok(())
}

fn paths(a: PathsArgs) -> Result<()> {
    if a.verify || a.dump.is_none() {
        let r = verify_paths(a.dims)?;
        println!("dims: {},{},{}", r.dims[0], r.dims[1], r.dims[2]);
        println!("paths: {}", r.n_paths);
        println!("bijective: {}", r.bijective);
        println!("continuous: {}", r.continuous);
        println!("distinct_count: {}", r.distinct_count);
    }
    if let Some(p) = &a.dump {
        let mut w = BufWriter::new(File::create(p)?);
        writeln!(w, "path,t,z,y,x")?;
        for (i, path) in enumerate_paths(a.dims)?.iter().enumerate() {
            for t in 0..path.len() {
                let [z, y, x] = path.coord(t);
                writeln!(w, "{i},{t},{z},{y},{x}")?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn model_config_arg(s: &str) -> Result<ModelConfig> {
    let cfg = match s {
        "full" => ModelConfig::full(),
        "desk" => ModelConfig::desk(),
        path => serde_json::from_slice(&fs::read(path)?).map_err(|e| CliError::Usage(format!("{path}: {e}")))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn kind_name(k: BottleneckKind) -> &'static str {
    match k {
        BottleneckKind::Vss3d => "vss3d",
        BottleneckKind::TriOriented => "tri_oriented",
    }
}

fn info(a: InfoArgs) -> Result<()> {
    let (cfg, count, orientations, classes) = match (&a.model, &a.config) {
        (Some(p), _) => {
            let model = load_checkpoint(p)?;
            let classes = model_class_table(&model)?;
            (model.config.clone(), count_parameters(&model), model.orientations(), Some(classes))
        }
        (None, Some(c)) => {
            let cfg = model_config_arg(c)?;
            let model = build_model::<f32>(&cfg, 0)?;
            (cfg, count_parameters(&model), model.orientations(), None)
        }
        (None, None) => return Err(CliError::Usage("info needs --model or --config".into())),
    };
    println!("config: {}", serde_json::to_string(&cfg).map_err(ss3d_core::Error::from)?);
    println!("bottleneck: {}", kind_name(cfg.bottleneck_kind));
    println!("parameters: {count}");
    let orient: Vec<String> = orientations.iter().map(|o| o.map_or("-".into(), |g| g.to_string())).collect();
    println!("orientations: {}", orient.join(","));
    if let Some(t) = classes {
        println!("classes: {}", t.entries().iter().map(|e| format!("{}={}", e.index, e.label_id)).collect::<Vec<_>>().join(","));
    }
    if a.compare_bottlenecks {
        let other = match cfg.bottleneck_kind {
            BottleneckKind::Vss3d => BottleneckKind::TriOriented,
            BottleneckKind::TriOriented => BottleneckKind::Vss3d,
        };
        let other_cfg = ModelConfig { bottleneck_kind: other, ..cfg.clone() };
        let other_count = count_parameters(&build_model::<f32>(&other_cfg, 0)?);
        let (v, t) = match cfg.bottleneck_kind {
            BottleneckKind::Vss3d => (count, other_count),
            BottleneckKind::TriOriented => (other_count, count),
        };
        println!("parameters_{}: {other_count}", kind_name(other));
        println!("vss3d_vs_tri_oriented_reduction: {:.4}", 1.0 - v as f64 / t as f64);
    }
    Ok(())
}
