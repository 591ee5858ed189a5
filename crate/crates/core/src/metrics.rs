//! PSNR/SSIM and the evaluation protocol.
//!
//! Each eval clip is scored on a single frame (temporal index
//! [`EVAL_FRAME`]) against its original; corpus means and per-clip detail
//! go into a versioned [`EvalReport`]. Metrics pool all three RGB channels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{frame_file, DatasetIndex};
use crate::error::{io_err, shape_err, QenetError, Result};
use crate::exec;
use crate::frame::{Frame, Variant};
use crate::tensor::Tensor;

/// The third frame of each clip, counted from one.
pub const EVAL_FRAME: usize = 2;
pub const SCHEMA_VERSION: u32 = 1;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Mean squared error pooled over channels and pixels.
pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.ensure_same_shape(b, "mse")?;
    if a.is_empty() {
        return Err(shape_err!("mse of empty frames"));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(s / a.len() as f64)
}

/// PSNR in dB for unit dynamic range; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    psnr_tensor(&a.pixels, &b.pixels)
}

pub fn psnr_tensor(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimKind {
    #[default]
    Ssim,
    MsSsim,
}

impl std::str::FromStr for SsimKind {
    type Err = QenetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssim" => Ok(SsimKind::Ssim),
            "ms-ssim" => Ok(SsimKind::MsSsim),
            other => Err(QenetError::InvalidArgument(format!("unknown ssim kind {other:?}"))),
        }
    }
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = g.iter().enumerate().map(|(k, gk)| gk * x[y * w + x0 + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = g.iter().enumerate().map(|(k, gk)| gk * rows[(y0 + k) * ow + x0]).sum();
        }
    }
    out
}

/// Mean luminance·structure map and mean contrast·structure map of one plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let g = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len() as f64;
    let (mut full, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let contrast = (2.0 * cov + c2) / (va + vb + c2);
        full += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * contrast;
        cs += contrast;
    }
    (full / n, cs / n)
}

fn planes(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    (0..t.c).map(|c| t.plane(c).iter().map(|v| *v as f64).collect()).collect()
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5), averaged over channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    ssim_tensor(&a.pixels, &b.pixels)
}

pub fn ssim_tensor(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(shape_err!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}", a.h, a.w));
    }
    let (pa, pb) = (planes(a), planes(b));
    let s: f64 = pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, a.h, a.w).0).sum();
    Ok(s / a.c as f64)
}

fn downsample2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            let i = 2 * y * w + 2 * xx;
            out[y * ow + xx] = (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) / 4.0;
        }
    }
    (out, oh, ow)
}

/// Five-scale MS-SSIM with the standard exponents and 2×2 mean pooling.
/// Negative contrast terms are clipped to zero before exponentiation.
pub fn ms_ssim_tensor(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.ensure_same_shape(b, "ms-ssim")?;
    let min = SSIM_WINDOW << (MS_SSIM_WEIGHTS.len() - 1);
    if a.h < min || a.w < min {
        return Err(shape_err!("ms-ssim needs at least {min}x{min}, got {}x{}", a.h, a.w));
    }
    let mut total = 0.0;
    for (pa, pb) in planes(a).into_iter().zip(planes(b)) {
        let (mut x, mut y, mut h, mut w) = (pa, pb, a.h, a.w);
        let mut score = 1.0;
        for (level, weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (full, cs) = ssim_plane(&x, &y, h, w);
            let term = if level + 1 == MS_SSIM_WEIGHTS.len() { full } else { cs };
            score *= term.max(0.0).powf(*weight);
            (x, _, _) = downsample2(&x, h, w);
            (y, h, w) = downsample2(&y, h, w);
        }
        total += score;
    }
    Ok(total / a.c as f64)
}

pub fn structural(kind: SsimKind, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    match kind {
        SsimKind::Ssim => ssim_tensor(a, b),
        SsimKind::MsSsim => ms_ssim_tensor(a, b),
    }
}

/// Where a method's enhanced frames come from.
pub trait OutputSource: Sync {
    /// `Ok(None)` when the method produced nothing for this frame.
    fn frame(&self, clip: &str, t: usize) -> Result<Option<Frame>>;
}

/// `<root>/<clip>/frame_<t>.png`, the layout `enhance` writes.
#[derive(Debug, Clone)]
pub struct DirOutputs {
    pub root: PathBuf,
}

impl DirOutputs {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirOutputs { root: root.into() }
    }
}

impl OutputSource for DirOutputs {
    fn frame(&self, clip: &str, t: usize) -> Result<Option<Frame>> {
        let path = self.root.join(clip).join(frame_file(t));
        if !path.is_file() {
            return Ok(None);
        }
        Frame::load_png(&path, t, Variant::Enhanced).map(Some)
    }
}

/// The index's own decoded frames: the unenhanced codec baseline.
pub struct DecodedOutputs<'a>(pub &'a DatasetIndex);

impl OutputSource for DecodedOutputs<'_> {
    fn frame(&self, clip: &str, t: usize) -> Result<Option<Frame>> {
        let entry = self.0.entry(clip)?;
        match entry.decoded.get(t) {
            Some(p) if p.is_file() => Frame::load_png(p, t, Variant::Decoded).map(Some),
            _ => Ok(None),
        }
    }
}

/// In-memory outputs keyed by clip id.
#[derive(Debug, Clone, Default)]
pub struct MemoryOutputs(pub BTreeMap<String, Vec<Frame>>);

impl OutputSource for MemoryOutputs {
    fn frame(&self, clip: &str, t: usize) -> Result<Option<Frame>> {
        Ok(self.0.get(clip).and_then(|f| f.get(t)).cloned())
    }
}

pub struct Method<'a> {
    pub label: String,
    pub source: &'a dyn OutputSource,
}

impl<'a> Method<'a> {
    pub fn new(label: impl Into<String>, source: &'a dyn OutputSource) -> Self {
        Method { label: label.into(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowSource {
    Measured,
    /// Supplied from outside, e.g. published numbers.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub qp: u8,
    /// Mean over clips with finite PSNR; `None` if there were none.
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    #[serde(default)]
    pub clips: usize,
    /// Clips whose output equalled the original exactly.
    #[serde(default)]
    pub infinite_psnr: usize,
    pub source: RowSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip: String,
    pub method: String,
    /// `None` means the frames were identical.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingOutput {
    pub clip: String,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub ssim_kind: SsimKind,
    pub qp: u8,
    /// Zero-based temporal index that was scored.
    pub eval_frame: usize,
    pub clip_count: usize,
    pub rows: Vec<ReportRow>,
    pub clips: Vec<ClipScore>,
    pub missing: Vec<MissingOutput>,
    /// Free-form provenance, e.g. the codec command line.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

/// A published or otherwise external row, as read from a baseline-rows file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRow {
    pub method: String,
    pub qp: u8,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl From<ExternalRow> for ReportRow {
    fn from(r: ExternalRow) -> Self {
        ReportRow {
            method: r.method,
            qp: r.qp,
            psnr_db: Some(r.psnr_db),
            ssim: Some(r.ssim),
            clips: 0,
            infinite_psnr: 0,
            source: RowSource::External,
        }
    }
}

pub fn load_external_rows(path: &Path) -> Result<Vec<ExternalRow>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn summarize(method: &str, qp: u8, scores: &[ClipScore]) -> ReportRow {
    let mine: Vec<&ClipScore> = scores.iter().filter(|s| s.method == method).collect();
    ReportRow {
        method: method.to_string(),
        qp,
        psnr_db: mean(mine.iter().filter_map(|s| s.psnr_db)),
        ssim: mean(mine.iter().map(|s| s.ssim)),
        clips: mine.len(),
        infinite_psnr: mine.iter().filter(|s| s.psnr_db.is_none()).count(),
        source: RowSource::Measured,
    }
}

/// Scores every method on frame [`EVAL_FRAME`] of every clip in `index`.
/// Clips a method has no output for are listed as missing and left out of its means.
pub fn evaluate(index: &DatasetIndex, methods: &[Method], kind: SsimKind) -> Result<EvalReport> {
    let per_clip = exec::map_slice(&index.entries, |entry| -> Result<(Vec<ClipScore>, Vec<MissingOutput>)> {
        let path =
            entry.original.get(EVAL_FRAME).ok_or_else(|| QenetError::Dataset(format!("clip {} has no frame {EVAL_FRAME}", entry.id)))?;
        let original = Frame::load_png(path, EVAL_FRAME, Variant::Original)?;
        let (mut scores, mut missing) = (Vec::new(), Vec::new());
        for m in methods {
            match m.source.frame(&entry.id, EVAL_FRAME)? {
                None => missing.push(MissingOutput { clip: entry.id.clone(), method: m.label.clone() }),
                Some(out) => {
                    let p = psnr(&out, &original)?;
                    scores.push(ClipScore {
                        clip: entry.id.clone(),
                        method: m.label.clone(),
                        psnr_db: p.is_finite().then_some(p),
                        ssim: structural(kind, &out.pixels, &original.pixels)?,
                    });
                }
            }
        }
        Ok((scores, missing))
    });
    let (mut clips, mut missing) = (Vec::new(), Vec::new());
    for r in per_clip {
        let (s, m) = r?;
        clips.extend(s);
        missing.extend(m);
    }
    let rows = methods.iter().map(|m| summarize(&m.label, index.qp, &clips)).collect();
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        ssim_kind: kind,
        qp: index.qp,
        eval_frame: EVAL_FRAME,
        clip_count: index.entries.len(),
        rows,
        clips,
        missing,
        provenance: BTreeMap::new(),
    })
}

impl EvalReport {
    pub fn with_external(mut self, rows: Vec<ExternalRow>) -> Self {
        self.rows.extend(rows.into_iter().map(ReportRow::from));
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let version = v.get("schema_version").and_then(|x| x.as_u64());
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(QenetError::InvalidArgument(format!("eval report schema version {version:?}, expected {SCHEMA_VERSION}")));
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = ComparisonTable::from_rows(&self.rows).to_markdown(None);
        if !self.missing.is_empty() {
            out.push_str("\nMissing outputs:\n\n");
            for m in &self.missing {
                let _ = writeln!(out, "- {} / {}", m.method, m.clip);
            }
        }
        out
    }
}

/// Methods as columns, QPs as rows; cells are `(PSNR dB, SSIM)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub methods: Vec<String>,
    pub qps: Vec<u8>,
    /// `cells[(qp, method)]`.
    pub cells: BTreeMap<(u8, String), (Option<f64>, Option<f64>)>,
}

/// Differences against a baseline column at the same QP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub method: String,
    pub qp: u8,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
}

fn cell(p: Option<f64>, s: Option<f64>) -> String {
    let f = |v: Option<f64>, d: usize| v.map_or("n/a".to_string(), |v| format!("{v:.d$}"));
    format!("({}, {})", f(p, 2), f(s, 3))
}

impl ComparisonTable {
    /// Column order follows first appearance; duplicate `(method, qp)` keep the first row.
    pub fn from_rows(rows: &[ReportRow]) -> Self {
        let mut methods = Vec::new();
        let mut qps = BTreeSet::new();
        let mut cells = BTreeMap::new();
        for r in rows {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
            qps.insert(r.qp);
            cells.entry((r.qp, r.method.clone())).or_insert((r.psnr_db, r.ssim));
        }
        ComparisonTable { methods, qps: qps.into_iter().collect(), cells }
    }

    pub fn deltas(&self, baseline: &str) -> Result<Vec<Delta>> {
        if !self.methods.iter().any(|m| m == baseline) {
            return Err(QenetError::InvalidArgument(format!("baseline column {baseline:?} not in table")));
        }
        let sub = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
        let mut out = Vec::new();
        for &qp in &self.qps {
            let Some(&(bp, bs)) = self.cells.get(&(qp, baseline.to_string())) else { continue };
            for m in self.methods.iter().filter(|m| *m != baseline) {
                if let Some(&(p, s)) = self.cells.get(&(qp, m.clone())) {
                    out.push(Delta { method: m.clone(), qp, psnr_db: sub(p, bp), ssim: sub(s, bs) });
                }
            }
        }
        Ok(out)
    }

    pub fn to_markdown(&self, baseline: Option<&str>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| QP | {} |", self.methods.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.methods.len()));
        for &qp in &self.qps {
            let row: Vec<String> =
                self.methods.iter().map(|m| self.cells.get(&(qp, m.clone())).map_or("".into(), |(p, s)| cell(*p, *s))).collect();
            let _ = writeln!(out, "| {qp} | {} |", row.join(" | "));
        }
        if let Some(Ok(deltas)) = baseline.map(|b| self.deltas(b)) {
            if !deltas.is_empty() {
                let _ = writeln!(out, "\nDifference vs {} (dB, SSIM):\n", baseline.unwrap_or_default());
                let _ = writeln!(out, "| QP | method | ΔPSNR | ΔSSIM |\n|---|---|---|---|");
                for d in deltas {
                    let f = |v: Option<f64>, d: usize| v.map_or("n/a".to_string(), |v| format!("{v:+.d$}"));
                    let _ = writeln!(out, "| {} | {} | {} | {} |", d.qp, d.method, f(d.psnr_db, 2), f(d.ssim, 4));
                }
            }
        }
        out
    }
}

/// The union of several reports, checked for a common schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedReport {
    pub schema_version: u32,
    pub clip_count: usize,
    pub table: ComparisonTable,
    pub deltas: Vec<Delta>,
    pub warnings: Vec<String>,
}

pub fn merge_reports(reports: &[EvalReport], baseline: Option<&str>) -> Result<MergedReport> {
    let first = reports.first().ok_or_else(|| QenetError::InvalidArgument("no reports to merge".into()))?;
    let mut warnings = Vec::new();
    for r in reports {
        if r.schema_version != SCHEMA_VERSION {
            return Err(QenetError::InvalidArgument(format!("report schema version {} differs from {SCHEMA_VERSION}", r.schema_version)));
        }
        if r.ssim_kind != first.ssim_kind {
            warnings.push(format!("reports mix {:?} and {:?}", first.ssim_kind, r.ssim_kind));
        }
    }
    let counts: BTreeSet<usize> = reports.iter().map(|r| r.clip_count).collect();
    let clip_count = *counts.first().expect("at least one report");
    if counts.len() > 1 {
        warnings.push(format!("reports disagree on clip count {counts:?}; using {clip_count}"));
    }
    let rows: Vec<ReportRow> = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let table = ComparisonTable::from_rows(&rows);
    let deltas = match baseline {
        Some(b) if table.methods.len() > 1 => table.deltas(b)?,
        _ => Vec::new(),
    };
    Ok(MergedReport { schema_version: SCHEMA_VERSION, clip_count, table, deltas, warnings })
}
