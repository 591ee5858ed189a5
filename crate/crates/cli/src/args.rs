use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qenet::metrics::SsimKind;
use qenet::training::Stage;

#[derive(Debug, Parser)]
#[command(name = "qenet", version, about = "Quality enhancement for HEVC-decoded video clips")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Index a dataset split into a JSON manifest.
    Prepare(PrepareArgs),
    /// Compress clips with the external HEVC encoder and store the decoded frames.
    Encode(EncodeArgs),
    /// Train one stage of the enhancement models.
    Train(TrainArgs),
    /// Enhance decoded clips with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Score enhanced outputs against the originals.
    Eval(EvalArgs),
    /// Merge evaluation reports into one comparison table.
    Report(ReportArgs),
}

fn training_qp(s: &str) -> Result<u8, String> {
    match s {
        "32" => Ok(32),
        "37" => Ok(37),
        _ => Err(format!("{s} is not a trained QP (32 or 37)")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageArg {
    Sf,
    Mf,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Sf => Stage::Sf,
            StageArg::Mf => Stage::Mf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Markdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimArg {
    Ssim,
    MsSsim,
}

impl From<SsimArg> for SsimKind {
    fn from(s: SsimArg) -> Self {
        match s {
            SsimArg::Ssim => SsimKind::Ssim,
            SsimArg::MsSsim => SsimKind::MsSsim,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PrepareArgs {
    /// Root of the original clips (`<root>/<clip>/frame_<t>.png`).
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=51))]
    pub qp: u8,
    /// One clip id per line; a file name containing `test` or `eval` marks the eval split.
    #[arg(long)]
    pub split_list: PathBuf,
    /// Decoded tree (`<dir>/qp<N>/<clip>`); defaults to `<root>_decoded`.
    #[arg(long)]
    pub decoded_root: Option<PathBuf>,
    /// Manifest path; defaults to `index-qp<N>-<split>.json` in the working directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    #[arg(long, value_parser = training_qp)]
    pub qp: u8,
    #[arg(long, value_enum)]
    pub loop_filters: Switch,
    /// Original clips.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Decoded root; frames go to `<out>/qp<N>/<clip>/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat TOML with `encoder_template` / `decoder_template`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_parser = training_qp)]
    pub qp: u8,
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Flat TOML overriding training defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to resume (same stage and QP) or to initialize from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EnhanceArgs {
    /// Decoded clips (`<in>/<clip>/frame_<t>.png`).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Enhance every frame independently with the single-frame network.
    #[arg(long)]
    pub single_frame: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Method outputs as `LABEL=DIR` or `DIR` (labelled by its name); repeatable.
    #[arg(long)]
    pub outputs: Vec<String>,
    /// JSON list of `{method, qp, psnr_db, ssim}` rows to include as-is.
    #[arg(long)]
    pub baseline_rows: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long, value_enum, default_value = "ssim")]
    pub ssim: SsimArg,
    /// Label of the row scoring the index's decoded frames.
    #[arg(long, default_value = "HEVC")]
    pub decoded_label: String,
    /// Leave out the decoded-frames row.
    #[arg(long)]
    pub no_decoded: bool,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Evaluation report JSON files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Method column the deltas are taken against.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
