//! External HEVC encode/decode round trips.
//!
//! Frames are converted to 8-bit YUV 4:2:0 (BT.601, limited range, chroma
//! as 2×2 box averages, restored bilinearly) and exchanged with the codec
//! as YUV4MPEG2 files.
//! The encoder and decoder are external programs described by command
//! templates; the defaults drive `ffmpeg` with `libx265` at constant QP, an
//! IPPP structure with a single I frame, and no frame-type QP offsets.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::Command;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, shape_err, QenetError, Result};
use crate::frame::{Frame, Variant};
use crate::tensor::Tensor;

pub const ENCODER_TEMPLATE_ENV: &str = "QENET_ENCODER_TEMPLATE";
pub const DECODER_TEMPLATE_ENV: &str = "QENET_DECODER_TEMPLATE";

pub const DEFAULT_ENCODER_TEMPLATE: &str = "ffmpeg -hide_banner -loglevel error -y -i {input} -c:v libx265 \
     -x265-params log-level=error:qp={qp}:keyint=-1:min-keyint=1:scenecut=0:bframes=0:ipratio=1:pbratio=1:frame-threads=1:pools=1:{lf_flags} \
     -f hevc {output}";

/// `showinfo` logs one line per decoded frame including its picture type.
pub const DEFAULT_DECODER_TEMPLATE: &str =
    "ffmpeg -hide_banner -loglevel info -y -i {input} -vf showinfo -f yuv4mpegpipe -pix_fmt yuv420p {output}";

const ENCODER_PLACEHOLDERS: [&str; 4] = ["{input}", "{output}", "{qp}", "{lf_flags}"];
const DECODER_PLACEHOLDERS: [&str; 2] = ["{input}", "{output}"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub qp: u8,
    /// Deblocking and SAO.
    pub loop_filters: bool,
    pub encoder_template: String,
    pub decoder_template: String,
}

impl CodecConfig {
    /// The built-in templates, ignoring the environment.
    pub fn with_defaults(qp: u8, loop_filters: bool) -> Self {
        CodecConfig {
            qp,
            loop_filters,
            encoder_template: DEFAULT_ENCODER_TEMPLATE.to_string(),
            decoder_template: DEFAULT_DECODER_TEMPLATE.to_string(),
        }
    }

    /// Default templates, overridden by the template environment variables when set.
    pub fn new(qp: u8, loop_filters: bool) -> Self {
        let env =
            |key: &str, default: &str| std::env::var(key).ok().filter(|s| !s.trim().is_empty()).unwrap_or_else(|| default.to_string());
        CodecConfig {
            qp,
            loop_filters,
            encoder_template: env(ENCODER_TEMPLATE_ENV, DEFAULT_ENCODER_TEMPLATE),
            decoder_template: env(DECODER_TEMPLATE_ENV, DEFAULT_DECODER_TEMPLATE),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.qp > 51 {
            return Err(QenetError::InvalidArgument(format!("qp {} outside [0, 51]", self.qp)));
        }
        check_template("encoder", &self.encoder_template, &ENCODER_PLACEHOLDERS)?;
        check_template("decoder", &self.decoder_template, &DECODER_PLACEHOLDERS)
    }

    pub fn lf_flags(&self) -> &'static str {
        if self.loop_filters {
            "deblock=true:sao=true"
        } else {
            "deblock=false:sao=false"
        }
    }

    /// The encoder argv for the given files.
    pub fn encoder_command(&self, input: &Path, output: &Path) -> Result<Vec<String>> {
        self.validate()?;
        let qp = self.qp.to_string();
        Ok(substitute(
            &self.encoder_template,
            &[
                ("{input}", &input.to_string_lossy()),
                ("{output}", &output.to_string_lossy()),
                ("{qp}", &qp),
                ("{lf_flags}", self.lf_flags()),
            ],
        ))
    }

    pub fn decoder_command(&self, input: &Path, output: &Path) -> Result<Vec<String>> {
        self.validate()?;
        Ok(substitute(&self.decoder_template, &[("{input}", &input.to_string_lossy()), ("{output}", &output.to_string_lossy())]))
    }
}

fn check_template(what: &str, template: &str, required: &[&str]) -> Result<()> {
    let missing: Vec<&str> = required.iter().copied().filter(|p| !template.contains(p)).collect();
    if !missing.is_empty() {
        return Err(QenetError::InvalidArgument(format!("{what} template lacks {}", missing.join(", "))));
    }
    if template.split_whitespace().next().is_none() {
        return Err(QenetError::InvalidArgument(format!("{what} template is empty")));
    }
    Ok(())
}

/// Splits on whitespace first, then substitutes, so values with spaces stay single arguments.
fn substitute(template: &str, pairs: &[(&str, &str)]) -> Vec<String> {
    template.split_whitespace().map(|tok| pairs.iter().fold(tok.to_string(), |acc, (k, v)| acc.replace(k, v))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PictureType {
    I,
    P,
    B,
}

impl FromStr for PictureType {
    type Err = QenetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" => Ok(PictureType::I),
            "P" => Ok(PictureType::P),
            "B" => Ok(PictureType::B),
            other => Err(QenetError::Gop(format!("unknown picture type {other:?}"))),
        }
    }
}

impl fmt::Display for PictureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// True iff the sequence is `I, P, P, ...`.
pub fn verify_gop(types: &[PictureType]) -> Result<bool> {
    match types.split_first() {
        None => Err(QenetError::Gop("no picture types to verify".into())),
        Some((first, rest)) => Ok(*first == PictureType::I && rest.iter().all(|t| *t == PictureType::P)),
    }
}

/// Picture types from `showinfo` filter output (`... type:P ...` per frame).
pub fn parse_showinfo(log: &str) -> Result<Vec<PictureType>> {
    let types = log
        .lines()
        .filter(|l| l.contains("showinfo") && l.contains(" n:"))
        .map(|l| {
            let tok = l.split_whitespace().find_map(|t| t.strip_prefix("type:"));
            tok.ok_or_else(|| QenetError::Gop(format!("no picture type in {l:?}")))?.parse()
        })
        .collect::<Result<Vec<_>>>()?;
    if types.is_empty() {
        return Err(QenetError::Gop("decoder log holds no per-frame picture types".into()));
    }
    Ok(types)
}

/// 8-bit YUV 4:2:0 planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Yuv420 {
    pub width: usize,
    pub height: usize,
    pub y: Vec<u8>,
    pub u: Vec<u8>,
    pub v: Vec<u8>,
}

const KR: f32 = 0.299;
const KB: f32 = 0.114;
const KG: f32 = 1.0 - KR - KB;

fn q8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// BT.601 limited-range conversion; chroma is the mean of each 2×2 block.
pub fn rgb_to_yuv420(rgb: &Tensor<f32>) -> Result<Yuv420> {
    let (h, w) = (rgb.h, rgb.w);
    if rgb.c != 3 || h % 2 != 0 || w % 2 != 0 || h == 0 {
        return Err(shape_err!("4:2:0 conversion needs even-sized RGB, got {:?}", rgb.shape()));
    }
    let (r, g, b) = (rgb.plane(0), rgb.plane(1), rgb.plane(2));
    let mut y = vec![0u8; h * w];
    let mut pb = vec![0f32; h * w];
    let mut pr = vec![0f32; h * w];
    for i in 0..h * w {
        let luma = KR * r[i] + KG * g[i] + KB * b[i];
        y[i] = q8(16.0 + 219.0 * luma);
        pb[i] = (b[i] - luma) / (2.0 * (1.0 - KB));
        pr[i] = (r[i] - luma) / (2.0 * (1.0 - KR));
    }
    let (ch, cw) = (h / 2, w / 2);
    let mut u = vec![0u8; ch * cw];
    let mut v = vec![0u8; ch * cw];
    for cy in 0..ch {
        for cx in 0..cw {
            let taps = [(2 * cy) * w + 2 * cx, (2 * cy) * w + 2 * cx + 1, (2 * cy + 1) * w + 2 * cx, (2 * cy + 1) * w + 2 * cx + 1];
            let mb = taps.iter().map(|&i| pb[i]).sum::<f32>() / 4.0;
            let mr = taps.iter().map(|&i| pr[i]).sum::<f32>() / 4.0;
            u[cy * cw + cx] = q8(128.0 + 224.0 * mb);
            v[cy * cw + cx] = q8(128.0 + 224.0 * mr);
        }
    }
    Ok(Yuv420 { width: w, height: h, y, u, v })
}

/// Bilinear sample of a centre-sited chroma plane at full-resolution pixel `(y, x)`.
fn chroma_at(plane: &[u8], ch: usize, cw: usize, y: usize, x: usize) -> f32 {
    let pos = |i: usize, n: usize| -> (usize, usize, f32) {
        let p = ((i as f32 - 0.5) / 2.0).clamp(0.0, (n - 1) as f32);
        let i0 = p.floor() as usize;
        (i0, (i0 + 1).min(n - 1), p - i0 as f32)
    };
    let (y0, y1, ay) = pos(y, ch);
    let (x0, x1, ax) = pos(x, cw);
    let v = |yy: usize, xx: usize| plane[yy * cw + xx] as f32;
    (1.0 - ay) * ((1.0 - ax) * v(y0, x0) + ax * v(y0, x1)) + ay * ((1.0 - ax) * v(y1, x0) + ax * v(y1, x1))
}

/// Inverse of [`rgb_to_yuv420`] with bilinear chroma upsampling, quantized
/// to 8-bit RGB levels.
pub fn yuv420_to_rgb(yuv: &Yuv420) -> Tensor<f32> {
    let (h, w) = (yuv.height, yuv.width);
    let (ch, cw) = (h / 2, w / 2);
    let mut out = Tensor::zeros(3, h, w);
    for yy in 0..h {
        for xx in 0..w {
            let i = yy * w + xx;
            let luma = (yuv.y[i] as f32 - 16.0) / 219.0;
            let pb = (chroma_at(&yuv.u, ch, cw, yy, xx) - 128.0) / 224.0;
            let pr = (chroma_at(&yuv.v, ch, cw, yy, xx) - 128.0) / 224.0;
            let r = luma + 2.0 * (1.0 - KR) * pr;
            let b = luma + 2.0 * (1.0 - KB) * pb;
            let g = (luma - KR * r - KB * b) / KG;
            for (c, val) in [r, g, b].into_iter().enumerate() {
                out.data[c * h * w + i] = (val.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    out
}

pub fn write_y4m(path: &Path, frames: &[Yuv420]) -> Result<()> {
    let first = frames.first().ok_or_else(|| QenetError::InvalidArgument("no frames to write".into()))?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let io = io_err(path);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "YUV4MPEG2 W{} H{} F25:1 Ip A1:1 C420jpeg", first.width, first.height)?;
        for f in frames {
            w.write_all(b"FRAME\n")?;
            w.write_all(&f.y)?;
            w.write_all(&f.u)?;
            w.write_all(&f.v)?;
        }
        w.flush()
    })();
    res.map_err(io)
}

pub fn read_y4m(path: &Path) -> Result<Vec<Yuv420>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let bad = |m: String| QenetError::Codec { message: format!("{}: {m}", path.display()), output: String::new() };
    let mut header = String::new();
    r.read_line(&mut header).map_err(io_err(path))?;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some("YUV4MPEG2") {
        return Err(bad("not a YUV4MPEG2 stream".into()));
    }
    let (mut width, mut height) = (0usize, 0usize);
    for tok in tokens {
        let (key, val) = tok.split_at(1);
        match key {
            "W" => width = val.parse().map_err(|_| bad(format!("bad width {val}")))?,
            "H" => height = val.parse().map_err(|_| bad(format!("bad height {val}")))?,
            "C" if !val.starts_with("420") => return Err(bad(format!("unsupported chroma format {val}"))),
            _ => {}
        }
    }
    if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
        return Err(bad(format!("unsupported dimensions {width}x{height}")));
    }
    let (luma, chroma) = (width * height, (width / 2) * (height / 2));
    let mut frames = Vec::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(io_err(path))? == 0 {
            break;
        }
        if !line.starts_with("FRAME") {
            return Err(bad(format!("expected FRAME marker, got {:?}", line.trim_end())));
        }
        let mut buf = vec![0u8; luma + 2 * chroma];
        r.read_exact(&mut buf).map_err(io_err(path))?;
        let v = buf.split_off(luma + chroma);
        let u = buf.split_off(luma);
        frames.push(Yuv420 { width, height, y: buf, u, v });
    }
    Ok(frames)
}

fn run(argv: &[String]) -> Result<String> {
    let (program, args) = argv.split_first().expect("templates are validated non-empty");
    let out = Command::new(program)
        .args(args)
        .output()
        .map_err(|e| QenetError::Codec { message: format!("could not start {program:?}: {e}"), output: String::new() })?;
    let mut text = String::from_utf8_lossy(&out.stdout).into_owned();
    text.push_str(&String::from_utf8_lossy(&out.stderr));
    if !out.status.success() {
        return Err(QenetError::Codec { message: format!("{program} exited with {}", out.status), output: text });
    }
    Ok(text)
}

/// Decoded frames together with what was run to make them.
#[derive(Debug, Clone)]
pub struct CodecRun {
    pub frames: Vec<Frame>,
    pub picture_types: Vec<PictureType>,
    pub encoder_command: Vec<String>,
    pub decoder_command: Vec<String>,
}

/// Encodes `frames` as one IPPP sequence and decodes it back.
pub fn encode_decode_traced(frames: &[Frame], cfg: &CodecConfig) -> Result<CodecRun> {
    cfg.validate()?;
    let first = frames.first().ok_or_else(|| QenetError::InvalidArgument("no frames to encode".into()))?;
    let (h, w) = first.dims();
    if frames.iter().any(|f| f.dims() != (h, w)) {
        return Err(shape_err!("frames of differing sizes in one clip"));
    }
    let (eh, ew) = (h.next_multiple_of(2), w.next_multiple_of(2));
    let yuv = frames.iter().map(|f| rgb_to_yuv420(&f.pixels.pad_replicate(eh, ew))).collect::<Result<Vec<_>>>()?;

    let dir = tempfile::tempdir().map_err(io_err(std::env::temp_dir()))?;
    let (src, bitstream, decoded) = (dir.path().join("in.y4m"), dir.path().join("out.hevc"), dir.path().join("dec.y4m"));
    write_y4m(&src, &yuv)?;
    let encoder_command = cfg.encoder_command(&src, &bitstream)?;
    run(&encoder_command)?;
    let decoder_command = cfg.decoder_command(&bitstream, &decoded)?;
    let log = run(&decoder_command)?;
    let picture_types = parse_showinfo(&log)?;
    if !verify_gop(&picture_types)? {
        let types: Vec<String> = picture_types.iter().map(|t| t.to_string()).collect();
        return Err(QenetError::Gop(format!("decoded stream has picture types {}", types.join(""))));
    }
    let planes = read_y4m(&decoded)?;
    if planes.len() != frames.len() {
        return Err(QenetError::Codec { message: format!("{} frames in, {} decoded", frames.len(), planes.len()), output: log });
    }
    let mut out = Vec::with_capacity(frames.len());
    for (f, p) in frames.iter().zip(&planes) {
        if (p.height, p.width) != (eh, ew) {
            return Err(shape_err!("decoded {}x{}, expected {eh}x{ew}", p.height, p.width));
        }
        let pixels = yuv420_to_rgb(p).crop(0, 0, h, w)?;
        out.push(Frame::new(pixels, f.index, Variant::Decoded));
    }
    Ok(CodecRun { frames: out, picture_types, encoder_command, decoder_command })
}

pub fn encode_decode(frames: &[Frame], cfg: &CodecConfig) -> Result<Vec<Frame>> {
    Ok(encode_decode_traced(frames, cfg)?.frames)
}
