//! Subcommand implementations. Each `cmd_*` writes its artifacts plus a
//! `<command>.json` result file into the output directory and returns a
//! human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use packetlm::codec::PacketCodec;
use packetlm::datasets::{
    self, file_sha256, load_csv, make_split, synth_generate, synth_schema, write_records_csv, DatasetManifest, LabeledRecord, RejectedRow,
    SourceDigest, SplitMode, SplitSpec, SynthConfig, CicidsColumn,
};
use packetlm::metrics::{confusion, Aggregate, MetricsReport};
use packetlm::model::{predict_label, ModelConfig, ModelSize};
use packetlm::trainer::{append_log, Checkpoint, TrainLogRecord};
use packetlm::{train_with, PacketSchema, TrainConfig, TrainOptions};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_report, Aggregation};
use crate::config::{load_config, parse_seeds, pick, pick_path, require};
use crate::error::{io_error, CliError, CliResult};

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn load_schema(path: &Path) -> CliResult<PacketSchema> {
    PacketSchema::load(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::from(e).context(path.display()))
}

/// Records from one or more CSV files. `source_row` values of later files
/// are offset by the row counts of earlier ones so they stay unique.
struct Loaded {
    records: Vec<LabeledRecord>,
    rejects: Vec<RejectedRow>,
    sources: Vec<SourceDigest>,
}

fn load_inputs(inputs: &[PathBuf], schema: &PacketSchema) -> CliResult<Loaded> {
    if inputs.is_empty() {
        return Err(CliError::Usage("at least one input CSV is required".into()));
    }
    let mut out = Loaded {
        records: Vec::new(),
        rejects: Vec::new(),
        sources: Vec::new(),
    };
    let mut offset = 0;
    for path in inputs {
        if !path.exists() {
            return Err(CliError::Data(format!("input file {} does not exist", path.display())));
        }
        let report = load_csv(path, schema)?;
        let max_row = report.records.iter().map(|r| r.source_row + 1).chain(report.rejects.iter().map(|r| r.source_row + 1)).max().unwrap_or(0);
        out.records.extend(report.records.into_iter().map(|mut r| {
            r.source_row += offset;
            r
        }));
        out.rejects.extend(report.rejects.into_iter().map(|mut r| {
            r.source_row += offset;
            r
        }));
        out.sources.push(SourceDigest {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        });
        offset += max_row.max(report.total_rows);
    }
    Ok(out)
}

fn write_rejects(path: &Path, rejects: &[RejectedRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut emit = || -> Result<(), csv::Error> {
        w.write_record(["source_row", "column", "reason", "detail"])?;
        for r in rejects {
            w.write_record([r.source_row.to_string(), r.column.clone(), r.reason.clone(), r.detail.clone()])?;
        }
        w.flush()?;
        Ok(())
    };
    emit().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- model/training settings

/// Architecture and optimizer settings shared by `train` and `oneshot`.
#[derive(Args, Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default)]
pub struct ModelArgs {
    /// Named size: base, small or middle.
    #[arg(long)]
    pub model: Option<String>,
    /// Overrides the size's layer count.
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub emb_size: Option<usize>,
    /// SwiGLU hidden width as a multiple of emb_size (default 8/3).
    #[arg(long)]
    pub mlp_ratio: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Peak learning rate (default depends on the size).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Default: 5% of all steps.
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    /// Default: lr / 10.
    #[arg(long)]
    pub min_lr: Option<f64>,
}

impl ModelArgs {
    pub fn merged(self, file: ModelArgs) -> ModelArgs {
        ModelArgs {
            model: pick(self.model, file.model),
            n_layers: pick(self.n_layers, file.n_layers),
            n_heads: pick(self.n_heads, file.n_heads),
            emb_size: pick(self.emb_size, file.emb_size),
            mlp_ratio: pick(self.mlp_ratio, file.mlp_ratio),
            epochs: pick(self.epochs, file.epochs),
            lr: pick(self.lr, file.lr),
            batch_size: pick(self.batch_size, file.batch_size),
            warmup_steps: pick(self.warmup_steps, file.warmup_steps),
            min_lr: pick(self.min_lr, file.min_lr),
        }
    }

    /// Builds and validates the training config for `schema`. The size
    /// supplies layers, heads and width; L, V and M come from the schema.
    pub fn train_config(&self, schema: &PacketSchema, seed: u64) -> CliResult<TrainConfig> {
        let size: ModelSize = self.model.as_deref().unwrap_or("base").parse().map_err(CliError::Usage)?;
        let (l, h, d, _) = size.dims();
        let mut model = ModelConfig::for_schema(schema, self.n_layers.unwrap_or(l), self.n_heads.unwrap_or(h), self.emb_size.unwrap_or(d));
        if let Some(r) = self.mlp_ratio {
            model.mlp_ratio = r;
        }
        model.validate()?;
        let mut cfg = TrainConfig::standard(model, self.lr.unwrap_or(size.default_lr()));
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.warmup_steps = self.warmup_steps;
        cfg.min_lr = self.min_lr;
        cfg.seed = seed;
        cfg.validate(0)?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------- split

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct SplitArgs {
    /// TOML config file.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Input CSV (repeatable).
    #[arg(long = "input")]
    pub inputs: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// cicids2017:0.001, cicids2017:0.0005, cicids2017:0.0002,
    /// cicids2017:one-shot, car-hacking, ratio or one-shot.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub name: Option<String>,
    /// For `ratio`: minority train count = round(ratio * majority_train).
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub majority: Option<String>,
    #[arg(long)]
    pub majority_train: Option<usize>,
    #[arg(long)]
    pub majority_test: Option<usize>,
    #[arg(long)]
    pub minority_test: Option<usize>,
    /// Full split mode as a TOML table (config file only).
    #[arg(skip)]
    pub split: Option<SplitMode>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitResult {
    pub train_csv: String,
    pub test_csv: String,
    pub manifest: String,
    pub manifest_digest: String,
    pub train_rows: usize,
    pub test_rows: usize,
    pub rejected_rows: usize,
}

fn custom_mode(kind: &str, a: &SplitArgs) -> CliResult<SplitMode> {
    let majority = require(a.majority.clone(), "majority")?;
    let majority_train = require(a.majority_train, "majority_train")?;
    let majority_test = require(a.majority_test, "majority_test")?;
    let minority_test = require(a.minority_test, "minority_test")?;
    Ok(match kind {
        "ratio" => SplitMode::Ratio {
            ratio: require(a.ratio, "ratio")?,
            majority,
            majority_train,
            majority_test,
            minority_test,
        },
        _ => SplitMode::OneShot {
            majority,
            majority_train,
            majority_test,
            minority_test,
        },
    })
}

fn split_spec(a: &SplitArgs, seed: u64) -> CliResult<SplitSpec> {
    let mut spec = match (a.preset.as_deref(), &a.split) {
        (Some(p), _) if p.starts_with("cicids2017:") => {
            let col: CicidsColumn = p["cicids2017:".len()..].parse().map_err(|e: String| CliError::Usage(e))?;
            SplitSpec::cicids2017(col, seed)
        }
        (Some("car-hacking"), _) => SplitSpec::car_hacking(seed),
        (Some(kind @ ("ratio" | "one-shot")), _) => SplitSpec {
            name: kind.to_string(),
            seed,
            mode: custom_mode(kind, a)?,
        },
        (Some(other), _) => return Err(CliError::Usage(format!("unknown split preset {other:?}"))),
        (None, Some(mode)) => SplitSpec {
            name: "custom".into(),
            seed,
            mode: mode.clone(),
        },
        (None, None) => return Err(CliError::Usage("a split preset (--preset) or a [split] table in the config is required".into())),
    };
    if let Some(n) = &a.name {
        spec.name = n.clone();
    }
    Ok(spec)
}

pub fn cmd_split(flags: SplitArgs) -> CliResult<String> {
    let (file, base): (SplitArgs, _) = load_config(flags.config.as_deref(), "split")?;
    let a = SplitArgs {
        config: None,
        schema: pick_path(flags.schema, file.schema, &base),
        inputs: flags.inputs.or_else(|| file.inputs.map(|v| v.into_iter().map(|p| crate::config::rebase(&base, p)).collect())),
        out_dir: pick_path(flags.out_dir, file.out_dir, &base),
        preset: pick(flags.preset, file.preset),
        seed: pick(flags.seed, file.seed),
        name: pick(flags.name, file.name),
        ratio: pick(flags.ratio, file.ratio),
        majority: pick(flags.majority, file.majority),
        majority_train: pick(flags.majority_train, file.majority_train),
        majority_test: pick(flags.majority_test, file.majority_test),
        minority_test: pick(flags.minority_test, file.minority_test),
        split: file.split,
    };
    let schema_path = require(a.schema.clone(), "schema")?;
    let out_dir = require(a.out_dir.clone(), "out_dir")?;
    let seed = a.seed.unwrap_or(0);
    let spec = split_spec(&a, seed)?;
    let schema = load_schema(&schema_path)?;
    let loaded = load_inputs(a.inputs.as_deref().unwrap_or_default(), &schema)?;

    let (train, test, mut manifest) = make_split(&loaded.records, &spec, &schema.label_names)?;
    manifest.sources = loaded.sources;
    create_dir(&out_dir)?;
    let train_csv = out_dir.join("train.csv");
    let test_csv = out_dir.join("test.csv");
    let manifest_path = out_dir.join("manifest.toml");
    write_records_csv(&train_csv, &train, &schema)?;
    write_records_csv(&test_csv, &test, &schema)?;
    manifest.save(&manifest_path)?;
    if !loaded.rejects.is_empty() {
        write_rejects(&out_dir.join("rejects.csv"), &loaded.rejects)?;
    }
    let result = SplitResult {
        train_csv: train_csv.display().to_string(),
        test_csv: test_csv.display().to_string(),
        manifest: manifest_path.display().to_string(),
        manifest_digest: manifest.digest(),
        train_rows: train.len(),
        test_rows: test.len(),
        rejected_rows: loaded.rejects.len(),
    };
    write_json(&out_dir.join("split.json"), &result)?;

    let mut s = format!("split {:?} (seed {seed}): {} train / {} test rows\n", spec.name, result.train_rows, result.test_rows);
    for c in &manifest.classes {
        let _ = writeln!(s, "  {:<28} train {:>7}  test {:>7}", c.name, c.train, c.test);
    }
    if result.rejected_rows > 0 {
        let _ = writeln!(s, "  {} rows rejected (see rejects.csv)", result.rejected_rows);
    }
    let _ = writeln!(s, "manifest {} (sha256 {})", result.manifest, result.manifest_digest);
    Ok(s)
}

// ---------------------------------------------------------------- train

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Schema TOML (taken from the checkpoint when resuming).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Training CSV.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint; its configuration is reused.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this many optimizer steps in total.
    #[arg(long)]
    pub stop_after_step: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainResult {
    pub checkpoint: String,
    pub checkpoint_digest: String,
    pub log: String,
    pub steps: u64,
    pub train_rows: usize,
    pub parameters: usize,
    pub first_epoch_nll: Option<f64>,
    pub last_epoch_nll: Option<f64>,
    pub config: TrainConfig,
}

pub fn cmd_train(flags: TrainArgs) -> CliResult<String> {
    let (file, base): (TrainArgs, _) = load_config(flags.config.as_deref(), "train")?;
    let schema_path = pick_path(flags.schema, file.schema, &base);
    let train_path = require(pick_path(flags.train, file.train, &base), "train")?;
    let out_dir = require(pick_path(flags.out_dir, file.out_dir, &base), "out_dir")?;
    let seed = pick(flags.seed, file.seed).unwrap_or(0);
    let resume_path = pick_path(flags.resume, file.resume, &base);
    let stop_after_step = pick(flags.stop_after_step, file.stop_after_step);
    let margs = flags.model.merged(file.model);

    let resume = resume_path.as_deref().map(load_checkpoint).transpose()?;
    let (schema, cfg) = match &resume {
        Some(c) => (c.schema.clone(), c.train.clone()),
        None => {
            let schema = load_schema(&require(schema_path, "schema")?)?;
            let cfg = margs.train_config(&schema, seed)?;
            (schema, cfg)
        }
    };

    let loaded = load_inputs(std::slice::from_ref(&train_path), &schema)?;
    if loaded.records.is_empty() {
        return Err(CliError::Data(format!("{} has no usable rows", train_path.display())));
    }
    let codec = PacketCodec::new(schema.clone());
    let data = datasets::encode_records(&codec, &loaded.records)?;
    cfg.validate(data.len())?;

    create_dir(&out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    if resume.is_none() && log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| io_error(&log_path, e))?;
    }
    let mut log_err = None;
    let opts = TrainOptions {
        resume,
        stop_after_step,
        on_epoch: Some(Box::new(|rec: &TrainLogRecord, _| {
            if let Err(e) = append_log(&log_path, std::slice::from_ref(rec)) {
                log_err.get_or_insert(e);
            }
        })),
    };
    let outcome = train_with(&data, &schema, &cfg, opts)?;
    if let Some(e) = log_err {
        return Err(io_error(&log_path, e));
    }
    let ckpt_path = out_dir.join("model.ckpt");
    outcome.checkpoint.save(&ckpt_path)?;

    let full_log = packetlm::trainer::read_log(&log_path).unwrap_or_default();
    let result = TrainResult {
        checkpoint: ckpt_path.display().to_string(),
        checkpoint_digest: outcome.checkpoint.digest(),
        log: log_path.display().to_string(),
        steps: outcome.checkpoint.step,
        train_rows: data.len(),
        parameters: outcome.checkpoint.params.parameter_count(),
        first_epoch_nll: full_log.first().map(|r| r.nll),
        last_epoch_nll: full_log.last().map(|r| r.nll),
        config: cfg.clone(),
    };
    write_json(&out_dir.join("train.json"), &result)?;

    let m = &cfg.model;
    let mut s = format!(
        "trained {} layers x {} heads, d={} ({} parameters) on {} packets: {} steps, lr {}\n",
        m.n_layers, m.n_heads, m.emb_size, result.parameters, result.train_rows, result.steps, cfg.base_lr
    );
    for r in &outcome.log {
        let _ = writeln!(s, "  epoch {:>3}  nll {:.6}  lr {:.3e}", r.epoch, r.nll, r.lr);
    }
    let _ = writeln!(s, "checkpoint {} (sha256 {})", result.checkpoint, result.checkpoint_digest);
    Ok(s)
}

// ---------------------------------------------------------------- eval

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test CSV.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub checkpoint_digest: String,
    pub test_csv: String,
    pub predictions: String,
    pub report: MetricsReport,
}

/// Predicted class ids and label distributions for `records`.
pub fn predict_records(ckpt: &Checkpoint, records: &[LabeledRecord]) -> CliResult<Vec<(usize, Vec<f32>)>> {
    let codec = PacketCodec::new(ckpt.schema.clone());
    records
        .iter()
        .map(|r| {
            let tp = codec.encode(&r.fields, r.label)?;
            let p = predict_label(&tp, &ckpt.params, &ckpt.model, &codec.vocab)?;
            Ok((p.class, p.probs))
        })
        .collect()
}

fn write_predictions(path: &Path, schema: &PacketSchema, records: &[LabeledRecord], preds: &[(usize, Vec<f32>)]) -> CliResult<()> {
    let wrap = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    let mut header = vec!["source_row".to_string(), "truth".into(), "prediction".into(), "truth_id".into(), "prediction_id".into()];
    header.extend(schema.label_names.iter().map(|n| format!("p_{n}")));
    w.write_record(&header).map_err(wrap)?;
    for (r, (class, probs)) in records.iter().zip(preds) {
        let mut row = vec![
            r.source_row.to_string(),
            schema.label_names[r.label].clone(),
            schema.label_names[*class].clone(),
            r.label.to_string(),
            class.to_string(),
        ];
        row.extend(probs.iter().map(|p| p.to_string()));
        w.write_record(&row).map_err(wrap)?;
    }
    w.flush().map_err(|e| io_error(path, e))
}

/// Loads a checkpoint and scores it on the rows of a CSV.
pub fn evaluate(ckpt: &Checkpoint, test: &[LabeledRecord]) -> CliResult<(MetricsReport, Vec<(usize, Vec<f32>)>)> {
    let preds = predict_records(ckpt, test)?;
    let truths: Vec<usize> = test.iter().map(|r| r.label).collect();
    let classes: Vec<usize> = preds.iter().map(|p| p.0).collect();
    let cm = confusion(&truths, &classes, ckpt.schema.class_count())?;
    Ok((MetricsReport::from_confusion(&cm, &ckpt.schema.label_names), preds))
}

pub fn cmd_eval(flags: EvalArgs) -> CliResult<String> {
    let (file, base): (EvalArgs, _) = load_config(flags.config.as_deref(), "eval")?;
    let ckpt_path = require(pick_path(flags.checkpoint, file.checkpoint, &base), "checkpoint")?;
    let test_path = require(pick_path(flags.test, file.test, &base), "test")?;
    let out_dir = require(pick_path(flags.out_dir, file.out_dir, &base), "out_dir")?;

    let ckpt = load_checkpoint(&ckpt_path)?;
    let loaded = load_inputs(std::slice::from_ref(&test_path), &ckpt.schema)?;
    if loaded.records.is_empty() {
        return Err(CliError::Data(format!("{} has no usable rows", test_path.display())));
    }
    let (report, preds) = evaluate(&ckpt, &loaded.records)?;

    create_dir(&out_dir)?;
    let pred_path = out_dir.join("predictions.csv");
    write_predictions(&pred_path, &ckpt.schema, &loaded.records, &preds)?;
    let text = report.to_text();
    write_text(&out_dir.join("metrics.txt"), &text)?;
    let result = EvalResult {
        checkpoint_digest: ckpt.digest(),
        test_csv: test_path.display().to_string(),
        predictions: pred_path.display().to_string(),
        report,
    };
    write_json(&out_dir.join("eval.json"), &result)?;
    let mut s = format!("evaluated {} packets from {}\n", result.report.samples, result.test_csv);
    s.push_str(&text);
    if !loaded.rejects.is_empty() {
        let _ = writeln!(s, "{} rows rejected", loaded.rejects.len());
    }
    Ok(s)
}

// ---------------------------------------------------------------- oneshot

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct OneshotArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Input CSV (repeatable).
    #[arg(long = "input")]
    pub inputs: Option<Vec<PathBuf>>,
    /// Use N generated synthetic packets instead of CSV input.
    #[arg(long)]
    pub synth_n: Option<usize>,
    #[arg(long)]
    pub synth_seed: Option<u64>,
    /// Seed list: `1..10`, `1,2,3` or a single seed.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub majority: Option<String>,
    #[arg(long)]
    pub majority_train: Option<usize>,
    #[arg(long)]
    pub majority_test: Option<usize>,
    #[arg(long)]
    pub minority_test: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub manifest_digest: String,
    pub final_train_nll: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub weighted: Aggregate,
    pub unweighted: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneshotReport {
    pub seeds: Vec<SeedRow>,
    pub mean: MeanRow,
}

fn mean_aggregate(rows: &[Aggregate]) -> Aggregate {
    let n = rows.len() as f64;
    Aggregate {
        precision: rows.iter().map(|a| a.precision).sum::<f64>() / n,
        recall: rows.iter().map(|a| a.recall).sum::<f64>() / n,
        f1: rows.iter().map(|a| a.f1).sum::<f64>() / n,
    }
}

impl OneshotReport {
    pub fn new(seeds: Vec<SeedRow>) -> Self {
        let w: Vec<Aggregate> = seeds.iter().map(|r| r.report.weighted).collect();
        let u: Vec<Aggregate> = seeds.iter().map(|r| r.report.unweighted).collect();
        let mean = MeanRow {
            weighted: mean_aggregate(&w),
            unweighted: mean_aggregate(&u),
        };
        Self { seeds, mean }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("seed   weighted P/R/F1           unweighted P/R/F1\n");
        let row = |s: &mut String, tag: &str, w: &Aggregate, u: &Aggregate| {
            let _ = writeln!(
                s,
                "{tag:<6} {:.4} {:.4} {:.4}    {:.4} {:.4} {:.4}",
                w.precision, w.recall, w.f1, u.precision, u.recall, u.f1
            );
        };
        for r in &self.seeds {
            row(&mut s, &r.seed.to_string(), &r.report.weighted, &r.report.unweighted);
        }
        row(&mut s, "mean", &self.mean.weighted, &self.mean.unweighted);
        s
    }
}

pub fn cmd_oneshot(flags: OneshotArgs) -> CliResult<String> {
    let (file, base): (OneshotArgs, _) = load_config(flags.config.as_deref(), "oneshot")?;
    let schema_path = pick_path(flags.schema, file.schema, &base);
    let inputs = flags.inputs.or_else(|| file.inputs.map(|v| v.into_iter().map(|p| crate::config::rebase(&base, p)).collect()));
    let synth_n = pick(flags.synth_n, file.synth_n);
    let synth_seed = pick(flags.synth_seed, file.synth_seed).unwrap_or(0);
    let seeds = parse_seeds(&pick(flags.seeds, file.seeds).unwrap_or_else(|| "1..10".into()))?;
    let majority = pick(flags.majority, file.majority);
    let majority_train = require(pick(flags.majority_train, file.majority_train), "majority_train")?;
    let majority_test = require(pick(flags.majority_test, file.majority_test), "majority_test")?;
    let minority_test = require(pick(flags.minority_test, file.minority_test), "minority_test")?;
    let out_dir = require(pick_path(flags.out_dir, file.out_dir, &base), "out_dir")?;
    let margs = flags.model.merged(file.model);

    let (schema, records) = match (synth_n, inputs) {
        (Some(n), None) => (synth_schema(), synth_generate(&SynthConfig::balanced(n, synth_seed))?),
        (None, Some(inputs)) => {
            let schema = load_schema(&require(schema_path, "schema")?)?;
            let loaded = load_inputs(&inputs, &schema)?;
            (schema, loaded.records)
        }
        (Some(_), Some(_)) => return Err(CliError::Usage("give either --synth-n or --input, not both".into())),
        (None, None) => return Err(CliError::Usage("no data: give --input (with --schema) or --synth-n".into())),
    };
    let majority = majority.unwrap_or_else(|| schema.label_names[0].clone());
    // Validate once before spending time on any seed.
    margs.train_config(&schema, 0)?;
    let codec = PacketCodec::new(schema.clone());

    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let ctx = format!("seed {seed}");
        let spec = SplitSpec {
            name: format!("one-shot-{seed}"),
            seed,
            mode: SplitMode::OneShot {
                majority: majority.clone(),
                majority_train,
                majority_test,
                minority_test,
            },
        };
        let (train, test, manifest) = make_split(&records, &spec, &schema.label_names).map_err(|e| CliError::from(e).context(&ctx))?;
        let data = datasets::encode_records(&codec, &train).map_err(|e| CliError::from(e).context(&ctx))?;
        let cfg = margs.train_config(&schema, seed)?;
        let outcome = train_with(&data, &schema, &cfg, TrainOptions::default()).map_err(|e| CliError::from(e).context(&ctx))?;
        let (report, _) = evaluate(&outcome.checkpoint, &test).map_err(|e| e.context(&ctx))?;
        rows.push(SeedRow {
            seed,
            manifest_digest: manifest.digest(),
            final_train_nll: outcome.log.last().map_or(f64::NAN, |r| r.nll),
            report,
        });
    }
    let report = OneshotReport::new(rows);
    create_dir(&out_dir)?;
    write_json(&out_dir.join("oneshot.json"), &report)?;
    let text = report.to_text();
    write_text(&out_dir.join("oneshot.txt"), &text)?;
    Ok(format!("one-shot protocol over {} seeds\n{text}", seeds.len()))
}

// ---------------------------------------------------------------- predict

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct PredictArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated raw field values in schema order.
    #[arg(long)]
    pub values: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictResult {
    pub checkpoint_digest: String,
    pub values: Vec<String>,
    pub class: String,
    pub class_id: usize,
    pub probabilities: Vec<(String, f32)>,
}

fn split_values(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).collect()
}

pub fn cmd_predict(flags: PredictArgs) -> CliResult<String> {
    let (file, base): (PredictArgs, _) = load_config(flags.config.as_deref(), "predict")?;
    let ckpt_path = require(pick_path(flags.checkpoint, file.checkpoint, &base), "checkpoint")?;
    let values = split_values(&require(pick(flags.values, file.values), "values")?);
    let out_dir = pick_path(flags.out_dir, file.out_dir, &base);

    let ckpt = load_checkpoint(&ckpt_path)?;
    let codec = PacketCodec::new(ckpt.schema.clone());
    let tp = codec.encode_unlabeled(&values)?;
    let p = predict_label(&tp, &ckpt.params, &ckpt.model, &codec.vocab)?;
    let names = &ckpt.schema.label_names;
    let result = PredictResult {
        checkpoint_digest: ckpt.digest(),
        values,
        class: names[p.class].clone(),
        class_id: p.class,
        probabilities: names.iter().cloned().zip(p.probs.iter().copied()).collect(),
    };
    if let Some(dir) = out_dir {
        create_dir(&dir)?;
        write_json(&dir.join("predict.json"), &result)?;
    }
    let mut s = format!("{}\n", result.class);
    for (n, p) in &result.probabilities {
        let _ = writeln!(s, "  {n:<28} {p:.6}");
    }
    Ok(s)
}

// ---------------------------------------------------------------- attention

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct AttentionArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated raw field values; the label slot is left unfilled.
    #[arg(long)]
    pub values: Option<String>,
    /// CSV to take the packet from (with its label) instead of --values.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// 0-based index among the CSV's accepted rows.
    #[arg(long)]
    pub row: Option<usize>,
    /// per-head, mean-heads or mean-all.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Also write attention.svg.
    #[arg(long)]
    #[serde(default)]
    pub svg: Option<bool>,
}

pub fn cmd_attention(flags: AttentionArgs) -> CliResult<String> {
    let (file, base): (AttentionArgs, _) = load_config(flags.config.as_deref(), "attention")?;
    let ckpt_path = require(pick_path(flags.checkpoint, file.checkpoint, &base), "checkpoint")?;
    let values = pick(flags.values, file.values);
    let input = pick_path(flags.input, file.input, &base);
    let row = pick(flags.row, file.row).unwrap_or(0);
    let mode: Aggregation = pick(flags.mode, file.mode).unwrap_or_else(|| "mean-all".into()).parse().map_err(CliError::Usage)?;
    let out_dir = require(pick_path(flags.out_dir, file.out_dir, &base), "out_dir")?;
    let svg = pick(flags.svg, file.svg).unwrap_or(false);

    let ckpt = load_checkpoint(&ckpt_path)?;
    let codec = PacketCodec::new(ckpt.schema.clone());
    let (tp, source) = match (values, input) {
        (Some(v), None) => (codec.encode_unlabeled(&split_values(&v))?, format!("values:{v}")),
        (None, Some(path)) => {
            let loaded = load_inputs(std::slice::from_ref(&path), &ckpt.schema)?;
            let rec = loaded
                .records
                .get(row)
                .ok_or_else(|| CliError::Data(format!("{} has only {} usable rows", path.display(), loaded.records.len())))?;
            (codec.encode(&rec.fields, rec.label)?, format!("{}#source_row={}", path.display(), rec.source_row))
        }
        _ => return Err(CliError::Usage("give exactly one of --values or --input".into())),
    };
    let params = ckpt.params.cast::<f64>();
    let report = attention_report(&codec, &params, &ckpt.model, &tp, mode, &ckpt.digest(), &source)?;
    create_dir(&out_dir)?;
    write_json(&out_dir.join("attention.json"), &report)?;
    let text = report.to_text();
    write_text(&out_dir.join("attention.txt"), &text)?;
    if svg {
        write_text(&out_dir.join("attention.svg"), &report.to_svg())?;
    }
    Ok(text)
}

// ---------------------------------------------------------------- synth

#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(default)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Number of packets.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Minority/benign ratio; balanced when absent.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthResult {
    pub csv: String,
    pub schema: String,
    pub csv_sha256: String,
    pub config: SynthConfig,
    pub class_counts: Vec<(String, usize)>,
}

pub fn cmd_synth(flags: SynthArgs) -> CliResult<String> {
    let (file, base): (SynthArgs, _) = load_config(flags.config.as_deref(), "synth")?;
    let n = require(pick(flags.n, file.n), "n")?;
    let seed = pick(flags.seed, file.seed).unwrap_or(0);
    let out_dir = require(pick_path(flags.out_dir, file.out_dir, &base), "out_dir")?;
    let cfg = match pick(flags.ratio, file.ratio) {
        Some(r) => SynthConfig::imbalanced(n, seed, r),
        None => SynthConfig::balanced(n, seed),
    };
    let records = synth_generate(&cfg)?;
    let schema = synth_schema();
    create_dir(&out_dir)?;
    let csv_path = out_dir.join("synth.csv");
    let schema_path = out_dir.join("schema.toml");
    write_records_csv(&csv_path, &records, &schema)?;
    schema.save(&schema_path)?;
    let mut counts = vec![0usize; schema.class_count()];
    for r in &records {
        counts[r.label] += 1;
    }
    let result = SynthResult {
        csv: csv_path.display().to_string(),
        schema: schema_path.display().to_string(),
        csv_sha256: file_sha256(&csv_path)?,
        config: cfg,
        class_counts: schema.label_names.iter().cloned().zip(counts).collect(),
    };
    write_json(&out_dir.join("synth.json"), &result)?;
    let mut s = format!("wrote {} synthetic packets to {}\n", n, result.csv);
    for (c, k) in &result.class_counts {
        let _ = writeln!(s, "  {c:<10} {k}");
    }
    Ok(s)
}

/// Reads a split manifest written by `split`.
pub fn read_manifest(path: &Path) -> CliResult<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(DatasetManifest::from_toml_str(&text)?)
}
