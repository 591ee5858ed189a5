use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use serde::Serialize;
use serde_json::{json, Value};

use qenet::codec::{encode_decode_traced, CodecConfig, DECODER_TEMPLATE_ENV, ENCODER_TEMPLATE_ENV};
use qenet::dataset::{build_index, discover_clips, load_clip_dir, read_split_list, save_clip_dir, DatasetIndex, Layout, Split};
use qenet::metrics::{evaluate, load_external_rows, merge_reports, DecodedOutputs, DirOutputs, EvalReport, Method, OutputSource};
use qenet::pipeline::{enhance_clip, enhance_clip_single};
use qenet::training::{epoch_path, latest_path, Checkpoint, LossBreakdown, Stage, TrainConfig, Trainer};
use qenet::{exec, QenetError, Result, Variant};

use crate::args::{EncodeArgs, EnhanceArgs, EvalArgs, Format, PrepareArgs, ReportArgs, Switch, TrainArgs};
use crate::config::{process_env, RunConfig};
use crate::logging;

pub const DATA_ROOT_ENV: &str = "QENET_DATA_ROOT";
pub const CHECKPOINT_DIR_ENV: &str = "QENET_CHECKPOINT_DIR";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> QenetError + '_ {
    move |source| QenetError::Io { path: path.to_path_buf(), source }
}

fn ffmpeg_version() -> String {
    Process::new("ffmpeg")
        .arg("-version")
        .output()
        .ok()
        .and_then(|o| String::from_utf8_lossy(&o.stdout).lines().next().map(str::to_string))
        .unwrap_or_else(|| "unavailable".into())
}

/// The resolved configuration and tool versions, as written beside a run's outputs.
#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    qenet_version: &'static str,
    tools: Value,
    config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    extra: Option<Value>,
}

fn record(command: &str, config: &RunConfig, tools: Value, extra: Option<Value>, path: &Path) -> Result<()> {
    let rec = RunRecord { command, qenet_version: env!("CARGO_PKG_VERSION"), tools, config, extra };
    logging::event("config", json!({ "command": command, "config": &config.values, "provenance": &config.provenance }));
    qenet::io::write_atomic(path, serde_json::to_string_pretty(&rec)?.as_bytes())
}

fn flags_config(args: &impl Serialize) -> Result<RunConfig> {
    let mut rc = RunConfig::from_defaults(args)?;
    for v in rc.provenance.values_mut() {
        *v = crate::config::Source::Flag;
    }
    Ok(rc)
}

fn record_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    file.with_file_name(name)
}

/// Builds outputs in a sibling staging directory and moves the listed
/// entries (relative paths) into `out` only once `fill` has succeeded.
fn staged(out: &Path, entries: &[String], fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io(&parent))?;
    let stage = tempfile::Builder::new().prefix(".qenet-staging-").tempdir_in(&parent).map_err(io(&parent))?;
    fill(stage.path())?;
    for rel in entries {
        let (src, dst) = (stage.path().join(rel), out.join(rel));
        if let Some(p) = dst.parent() {
            fs::create_dir_all(p).map_err(io(p))?;
        }
        if dst.is_dir() {
            fs::remove_dir_all(&dst).map_err(io(&dst))?;
        }
        fs::rename(&src, &dst).map_err(io(&dst))?;
    }
    Ok(())
}

fn with_run_record(clips: &[String]) -> Vec<String> {
    let mut v = clips.to_vec();
    v.push("run.json".into());
    v
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => qenet::io::write_atomic(p, text.as_bytes()),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()).map_err(io(Path::new("<stdout>")))
        }
    }
}

pub fn prepare(args: &PrepareArgs) -> Result<()> {
    let rc = flags_config(args)?;
    let mut layout = Layout::new(&args.root);
    if let Some(d) = &args.decoded_root {
        layout = layout.with_decoded_root(d);
    }
    let split = Split::infer(&args.split_list);
    let ids = read_split_list(&args.split_list)?;
    let index = build_index(&layout, args.qp, split, Some(&ids))?;
    let split_name = match split {
        Split::Train => "train",
        Split::Eval => "eval",
    };
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(format!("index-qp{}-{split_name}.json", args.qp)));
    index.save(&out)?;
    for s in &index.skipped {
        logging::warn("clip_skipped", &format!("{}: {}", s.id, s.reason));
    }
    logging::event("prepared", json!({ "manifest": out, "split": split_name, "clips": index.len(), "skipped": index.skipped.len() }));
    record("prepare", &rc, json!({}), None, &record_beside(&out))
}

pub fn encode(args: &EncodeArgs) -> Result<()> {
    let defaults = CodecConfig::with_defaults(args.qp, args.loop_filters == Switch::On);
    let mut rc = RunConfig::from_defaults(&defaults)?;
    if let Some(f) = &args.config {
        rc.merge_file(f)?;
    }
    rc.merge_env("encoder_template", ENCODER_TEMPLATE_ENV, &process_env)?;
    rc.merge_env("decoder_template", DECODER_TEMPLATE_ENV, &process_env)?;
    rc.set_flag("qp", args.qp)?;
    rc.set_flag("loop_filters", args.loop_filters == Switch::On)?;
    let codec: CodecConfig = rc.resolve()?;
    codec.validate()?;

    let clips = discover_clips(&args.input)?;
    if clips.is_empty() {
        return Err(QenetError::Dataset(format!("no clips under {}", args.input.display())));
    }
    let qp_dir = args.out.join(format!("qp{}", args.qp));
    staged(&qp_dir, &with_run_record(&clips), |stage| {
        let runs = exec::map_slice(&clips, |id| -> Result<Vec<String>> {
            let frames = load_clip_dir(&args.input.join(id), Variant::Original)?;
            let run = encode_decode_traced(&frames, &codec)?;
            save_clip_dir(&stage.join(id), &run.frames)?;
            logging::event("encoded", json!({ "clip": id, "frames": run.frames.len() }));
            Ok(run.encoder_command)
        });
        let mut first_command = None;
        for r in runs {
            let cmd = r?;
            first_command.get_or_insert(cmd);
        }
        let extra = json!({ "clips": clips.len(), "example_encoder_command": first_command });
        record("encode", &rc, json!({ "ffmpeg": ffmpeg_version() }), Some(extra), &stage.join("run.json"))
    })
}

fn mean_loss(losses: &[LossBreakdown]) -> LossBreakdown {
    let n = losses.len().max(1) as f64;
    let l_e = losses.iter().map(|l| l.l_e).sum::<f64>() / n;
    let l_w = losses.iter().map(|l| l.l_w).sum::<f64>() / n;
    LossBreakdown::new(l_e, l_w)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut rc = RunConfig::from_defaults(&TrainConfig::default())?;
    if let Some(f) = &args.config {
        rc.merge_file(f)?;
    }
    rc.merge_env("data_root", DATA_ROOT_ENV, &process_env)?;
    rc.merge_env("checkpoint_dir", CHECKPOINT_DIR_ENV, &process_env)?;
    rc.set_flag("qp", args.qp)?;
    rc.set_flag("stage", Stage::from(args.stage))?;
    let config: TrainConfig = rc.resolve()?;
    config.validate()?;

    let index = match (&config.index, &config.data_root) {
        (Some(path), _) => DatasetIndex::load(path)?,
        (None, Some(root)) => build_index(&Layout::new(root), config.qp, Split::Train, None)?,
        (None, None) => return Err(QenetError::InvalidArgument(format!("set `index` or `data_root` in the config, or {DATA_ROOT_ENV}"))),
    };
    if index.qp != config.qp {
        return Err(QenetError::InvalidArgument(format!("index is for QP {}, training QP {}", index.qp, config.qp)));
    }
    if index.is_empty() {
        return Err(QenetError::Dataset("training index has no clips".into()));
    }
    let mut trainer = match &args.resume {
        Some(path) => Trainer::from_checkpoint(config.clone(), Checkpoint::load(path)?)?,
        None if config.stage == Stage::Mf => {
            return Err(QenetError::InvalidArgument(
                "the mf stage starts from trained single-frame weights; pass --resume with an sf checkpoint".into(),
            ))
        }
        None => Trainer::new(config.clone())?,
    };

    let dir = config.checkpoint_dir.clone();
    let extra = json!({ "resume": args.resume, "clips": index.len(), "start_epoch": trainer.epoch });
    record("train", &rc, json!({}), Some(extra), &dir.join(format!("run-{}-qp{}.json", config.stage, config.qp)))?;

    let mut log_step = |r: &qenet::training::StepRecord| {
        if let Ok(Value::Object(fields)) = serde_json::to_value(r) {
            logging::event("step", Value::Object(fields));
        }
    };
    while trainer.epoch < config.epochs {
        let losses = trainer.run_epoch(&index, &mut log_step)?;
        let mean = mean_loss(&losses);
        let ck = trainer.checkpoint();
        let path = epoch_path(&dir, config.stage, config.qp, trainer.epoch);
        ck.save(&path)?;
        ck.save(&latest_path(&dir, config.stage, config.qp))?;
        logging::event(
            "epoch",
            json!({ "epoch": trainer.epoch, "steps": losses.len(), "l_e": mean.l_e, "l_w": mean.l_w, "l": mean.l, "checkpoint": path }),
        );
    }
    Ok(())
}

pub fn enhance(args: &EnhanceArgs) -> Result<()> {
    let rc = flags_config(args)?;
    let models = Checkpoint::load(&args.checkpoint)?.models;
    let clips = discover_clips(&args.input)?;
    if clips.is_empty() {
        return Err(QenetError::Dataset(format!("no clips under {}", args.input.display())));
    }
    staged(&args.out, &with_run_record(&clips), |stage| {
        for id in &clips {
            let decoded = load_clip_dir(&args.input.join(id), Variant::Decoded)?;
            let out = if args.single_frame { enhance_clip_single(&decoded, &models.sf)? } else { enhance_clip(&decoded, &models)? };
            save_clip_dir(&stage.join(id), &out)?;
            logging::event("enhanced", json!({ "clip": id, "frames": out.len() }));
        }
        let extra = json!({ "clips": clips.len(), "model": models.config });
        record("enhance", &rc, json!({}), Some(extra), &stage.join("run.json"))
    })
}

fn parse_outputs(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, dir)) if !label.is_empty() => (label.to_string(), PathBuf::from(dir)),
        _ => {
            let dir = PathBuf::from(spec);
            let label = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| spec.to_string());
            (label, dir)
        }
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let rc = flags_config(args)?;
    let index = DatasetIndex::load(&args.index)?;
    let decoded = DecodedOutputs(&index);
    let dirs: Vec<(String, DirOutputs)> = args
        .outputs
        .iter()
        .map(|s| {
            let (label, dir) = parse_outputs(s);
            (label, DirOutputs::new(dir))
        })
        .collect();
    let mut methods = Vec::new();
    if !args.no_decoded {
        methods.push(Method::new(args.decoded_label.clone(), &decoded as &dyn OutputSource));
    }
    methods.extend(dirs.iter().map(|(label, src)| Method::new(label.clone(), src as &dyn OutputSource)));
    if methods.is_empty() {
        return Err(QenetError::InvalidArgument("nothing to evaluate".into()));
    }
    let mut report = evaluate(&index, &methods, args.ssim.into())?;
    if let Some(p) = &args.baseline_rows {
        report = report.with_external(load_external_rows(p)?);
    }
    report.provenance.insert("index".into(), args.index.display().to_string());
    for (label, src) in &dirs {
        report.provenance.insert(format!("outputs.{label}"), src.root.display().to_string());
    }
    for m in &report.missing {
        logging::warn("missing_output", &format!("{} has no output for {}", m.method, m.clip));
    }
    let text = match args.format {
        Format::Json => report.to_json()?,
        Format::Markdown => report.to_markdown(),
    };
    emit(args.out.as_deref(), &text)?;
    if let Some(out) = &args.out {
        record("eval", &rc, json!({}), None, &record_beside(out))?;
    }
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let rc = flags_config(args)?;
    let reports = args.reports.iter().map(|p| EvalReport::load(p)).collect::<Result<Vec<_>>>()?;
    let merged = merge_reports(&reports, args.baseline.as_deref())?;
    for w in &merged.warnings {
        logging::warn("report_warning", w);
    }
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&merged)?,
        Format::Markdown => {
            let mut s = merged.table.to_markdown(args.baseline.as_deref());
            s.push_str(&format!("\nClips per report: {}\n", merged.clip_count));
            for w in &merged.warnings {
                s.push_str(&format!("\nWarning: {w}\n"));
            }
            s
        }
    };
    emit(args.out.as_deref(), &text)?;
    if let Some(out) = &args.out {
        record("report", &rc, json!({}), None, &record_beside(out))?;
    }
    Ok(())
}
