//! Fixed-QP encoding and decoding through external H.264/H.265 tools.
//!
//! Commands come from templates with the placeholders `{bin}` (the codec
//! binary), `{ffmpeg}`, `{in}`, `{out}`, `{decoded}`, `{qp}` and `{preset}`.
//! Templates are split on whitespace before substitution, so paths with
//! spaces stay single arguments. Every job works in its own directory under
//! the run directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use thiserror::Error;

use crate::video::{read_y4m, write_y4m, Layout, VideoClip, VideoError};

pub const DEFAULT_QPS: [u8; 5] = [30, 35, 40, 45, 50];
pub const DEFAULT_PRESET: &str = "medium";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{tool} not found: set {env_var} or put `{tool}` on PATH")]
    MissingTool { tool: &'static str, env_var: &'static str },
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("invalid template {template:?}: {reason}")]
    Template { template: String, reason: String },
    #[error("{program} exited with {status}: {stderr}")]
    ToolFailed {
        program: String,
        status: String,
        stderr: String,
    },
    #[error("decoded geometry {found:?} differs from input {expected:?}")]
    Geometry {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("qp {qp}: {source}")]
    Job {
        qp: u8,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Video(#[from] VideoError),
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Codec {
    H264,
    H265,
}

impl Codec {
    pub fn tool(self) -> &'static str {
        match self {
            Self::H264 => "x264",
            Self::H265 => "x265",
        }
    }

    pub fn env_var(self) -> &'static str {
        match self {
            Self::H264 => "VCM_X264_PATH",
            Self::H265 => "VCM_X265_PATH",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Self::H264 => "264",
            Self::H265 => "265",
        }
    }
}

impl FromStr for Codec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "h264" => Ok(Self::H264),
            "h265" => Ok(Self::H265),
            _ => Err(HarnessError::InvalidJob(format!("unknown codec {s:?}"))),
        }
    }
}

impl fmt::Display for Codec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::H264 => "h264",
            Self::H265 => "h265",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Templates {
    pub h264: String,
    pub h265: String,
    pub decode: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            h264: "{bin} --qp {qp} --preset {preset} -o {out} {in}".into(),
            h265: "{bin} --qp {qp} --preset {preset} --input {in} --output {out}".into(),
            decode: "{bin} -i {out} -pix_fmt yuv420p -f yuv4mpegpipe {decoded}".into(),
        }
    }
}

impl Templates {
    /// Encoding through ffmpeg's libx264/libx265 instead of the standalone
    /// encoders; same fixed-QP and preset semantics.
    pub fn ffmpeg() -> Self {
        Self {
            h264: "{ffmpeg} -y -loglevel error -i {in} -c:v libx264 -qp {qp} -preset {preset} -f h264 {out}".into(),
            h265: "{ffmpeg} -y -loglevel error -i {in} -c:v libx265 -x265-params qp={qp}:log-level=error -preset {preset} -f hevc {out}".into(),
            ..Self::default()
        }
    }

    pub fn encoder(&self, codec: Codec) -> &str {
        match codec {
            Codec::H264 => &self.h264,
            Codec::H265 => &self.h265,
        }
    }

    /// Checks that every template names a program and uses only known
    /// placeholders.
    pub fn validate(&self) -> Result<(), HarnessError> {
        for t in [&self.h264, &self.h265, &self.decode] {
            let bad = |reason: String| HarnessError::Template {
                template: t.clone(),
                reason,
            };
            if t.split_whitespace().next().is_none() {
                return Err(bad("empty".into()));
            }
            let mut rest = t.as_str();
            while let Some(open) = rest.find('{') {
                let close = rest[open..].find('}').ok_or_else(|| bad("unclosed placeholder".into()))?;
                let name = &rest[open + 1..open + close];
                if !["bin", "ffmpeg", "in", "out", "decoded", "qp", "preset"].contains(&name) {
                    return Err(bad(format!("unknown placeholder {{{name}}}")));
                }
                rest = &rest[open + close + 1..];
            }
        }
        Ok(())
    }
}

/// Substitutes placeholders token by token.
fn expand(template: &str, vars: &[(&str, String)]) -> Vec<String> {
    template
        .split_whitespace()
        .map(|tok| {
            let mut s = tok.to_string();
            for (k, v) in vars {
                s = s.replace(&format!("{{{k}}}"), v);
            }
            s
        })
        .collect()
}

/// Resolved tool paths; `None` where the tool was not found.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tools {
    pub x264: Option<PathBuf>,
    pub x265: Option<PathBuf>,
    pub ffmpeg: Option<PathBuf>,
}

impl Tools {
    /// `VCM_X264_PATH`, `VCM_X265_PATH` and `VCM_FFMPEG_PATH`, each falling
    /// back to a PATH lookup.
    pub fn discover() -> Self {
        let find = |var: &str, name: &str| match std::env::var_os(var) {
            Some(p) if !p.is_empty() => Some(PathBuf::from(p)),
            _ => which::which(name).ok(),
        };
        Self {
            x264: find("VCM_X264_PATH", "x264"),
            x265: find("VCM_X265_PATH", "x265"),
            ffmpeg: find("VCM_FFMPEG_PATH", "ffmpeg"),
        }
    }

    pub fn encoder(&self, codec: Codec) -> Option<&Path> {
        match codec {
            Codec::H264 => self.x264.as_deref(),
            Codec::H265 => self.x265.as_deref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodeJob {
    /// Input clip (Y4M, 4:2:0).
    pub input: PathBuf,
    pub codec: Codec,
    pub qp: u8,
    pub preset: String,
    /// Bitstream path; the decoded clip is written next to it.
    pub output: PathBuf,
}

impl EncodeJob {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.qp > 51 {
            return Err(HarnessError::InvalidJob(format!("qp {} outside [0, 51]", self.qp)));
        }
        if self.preset.trim().is_empty() {
            return Err(HarnessError::InvalidJob("empty preset".into()));
        }
        Ok(())
    }

    fn decoded_path(&self) -> PathBuf {
        self.output.with_extension("dec.y4m")
    }
}

#[derive(Clone, Debug)]
pub struct EncodeResult {
    pub bits: u64,
    pub bpp: f64,
    /// Decoded luma.
    pub decoded: VideoClip,
    pub wall_ms: f64,
    pub bitstream: PathBuf,
}

pub fn bpp(bits: u64, width: usize, height: usize, frames: usize) -> f64 {
    bits as f64 / (width * height * frames) as f64
}

#[derive(Clone, Debug)]
pub struct Harness {
    pub tools: Tools,
    pub templates: Templates,
    pub run_dir: PathBuf,
    pub workers: usize,
    pub preset: String,
    /// Keep decoded clips and written inputs after each job.
    pub keep: bool,
    next_id: std::sync::Arc<AtomicUsize>,
}

impl Harness {
    pub fn new(tools: Tools, templates: Templates, run_dir: &Path) -> Result<Self, HarnessError> {
        templates.validate()?;
        fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
        Ok(Self {
            tools,
            templates,
            run_dir: run_dir.to_path_buf(),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            preset: DEFAULT_PRESET.into(),
            keep: false,
            next_id: Default::default(),
        })
    }

    /// Fails with the variable to set when a tool the templates need for
    /// `codec` is missing.
    pub fn check_tools(&self, codec: Codec) -> Result<(), HarnessError> {
        let needs = |t: &str, p: &str| t.split_whitespace().any(|tok| tok.contains(p));
        let enc = self.templates.encoder(codec);
        if needs(enc, "{bin}") && self.tools.encoder(codec).is_none() {
            return Err(HarnessError::MissingTool {
                tool: codec.tool(),
                env_var: codec.env_var(),
            });
        }
        if (needs(enc, "{ffmpeg}") || needs(&self.templates.decode, "{bin}") || needs(&self.templates.decode, "{ffmpeg}"))
            && self.tools.ffmpeg.is_none()
        {
            return Err(HarnessError::MissingTool {
                tool: "ffmpeg",
                env_var: "VCM_FFMPEG_PATH",
            });
        }
        Ok(())
    }

    fn run(&self, argv: &[String]) -> Result<(), HarnessError> {
        let (program, args) = argv.split_first().expect("validated template");
        let out = Command::new(program).args(args).output().map_err(|e| io_err(Path::new(program), e))?;
        if !out.status.success() {
            return Err(HarnessError::ToolFailed {
                program: program.clone(),
                status: out.status.to_string(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        Ok(())
    }

    /// Encodes, measures the bitstream, decodes and returns the luma.
    pub fn encode_decode(&self, job: &EncodeJob) -> Result<EncodeResult, HarnessError> {
        job.validate()?;
        self.check_tools(job.codec)?;
        let input = read_y4m(&job.input)?;
        let start = Instant::now();
        let path_str = |p: &Path| p.display().to_string();
        let ffmpeg = self.tools.ffmpeg.as_deref().map(path_str).unwrap_or_default();
        let encoder = self.tools.encoder(job.codec).map(path_str).unwrap_or_default();
        let (inp, out, dec) = (path_str(&job.input), path_str(&job.output), path_str(&job.decoded_path()));
        let qp = job.qp.to_string();
        let vars = |bin: &str| -> Vec<(&str, String)> {
            vec![
                ("bin", bin.to_string()),
                ("ffmpeg", ffmpeg.clone()),
                ("in", inp.clone()),
                ("out", out.clone()),
                ("decoded", dec.clone()),
                ("qp", qp.clone()),
                ("preset", job.preset.clone()),
            ]
        };
        self.run(&expand(self.templates.encoder(job.codec), &vars(&encoder)))?;
        let bytes = fs::metadata(&job.output).map_err(|e| io_err(&job.output, e))?.len();
        self.run(&expand(&self.templates.decode, &vars(&ffmpeg)))?;
        let decoded = read_y4m(&job.decoded_path())?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let dims = |c: &VideoClip| (c.num_frames(), c.height(), c.width());
        if dims(&decoded) != dims(&input) {
            return Err(HarnessError::Geometry {
                expected: dims(&input),
                found: dims(&decoded),
            });
        }
        if !self.keep {
            let p = job.decoded_path();
            fs::remove_file(&p).map_err(|e| io_err(&p, e))?;
        }
        let bits = bytes * 8;
        Ok(EncodeResult {
            bits,
            bpp: bpp(bits, input.width(), input.height(), input.num_frames()),
            decoded: decoded.to_luma(),
            wall_ms,
            bitstream: job.output.clone(),
        })
    }

    /// Runs jobs on at most `workers` threads; results keep input order.
    pub fn run_jobs(&self, jobs: &[EncodeJob]) -> Vec<Result<EncodeResult, HarnessError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<EncodeResult, HarnessError>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..self.workers.max(1).min(jobs.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    let r = self.encode_decode(&jobs[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every job ran"))
            .collect()
    }

    /// Writes a luma or 4:2:0 clip as a Y4M input in a fresh directory and
    /// returns its path. Luma clips get neutral chroma.
    pub fn stage_clip(&self, clip: &VideoClip, name: &str) -> Result<PathBuf, HarnessError> {
        let dir = self.run_dir.join("inputs");
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let path = dir.join(format!("{name}.y4m"));
        let clip = match clip.layout() {
            Layout::Luma => clip.with_neutral_chroma()?,
            _ => clip.clone(),
        };
        write_y4m(&clip, &path)?;
        Ok(path)
    }

    /// A job writing into `run_dir/job_<n>_qp<qp>/`, `n` unique per harness.
    pub fn job(&self, input: &Path, codec: Codec, qp: u8) -> Result<EncodeJob, HarnessError> {
        let n = self.next_id.fetch_add(1, Ordering::Relaxed);
        let dir = self.run_dir.join(format!("job_{n}_qp{qp}"));
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(EncodeJob {
            input: input.to_path_buf(),
            codec,
            qp,
            preset: self.preset.clone(),
            output: dir.join(format!("stream.{}", codec.extension())),
        })
    }

    /// One result per qp, in qp order. The first failing job (in qp order)
    /// is returned with its qp.
    pub fn run_grid(&self, clip: &VideoClip, codec: Codec, qps: &[u8]) -> Result<Vec<EncodeResult>, HarnessError> {
        if qps.is_empty() {
            return Ok(Vec::new());
        }
        self.check_tools(codec)?;
        let n = self.next_id.load(Ordering::Relaxed);
        let input = self.stage_clip(clip, &format!("grid_{n}"))?;
        let jobs = qps
            .iter()
            .map(|&qp| self.job(&input, codec, qp))
            .collect::<Result<Vec<_>, _>>()?;
        let results = self.run_jobs(&jobs);
        if !self.keep {
            fs::remove_file(&input).map_err(|e| io_err(&input, e))?;
        }
        results
            .into_iter()
            .zip(qps)
            .map(|(r, &qp)| {
                r.map_err(|e| HarnessError::Job {
                    qp,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

/// `codec,qp,bits,bpp,wall_ms,bitstream_path`.
pub fn write_results_csv(path: &Path, rows: &[(Codec, u8, &EncodeResult)]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e.into()))?;
    let mut write = || -> Result<(), csv::Error> {
        w.write_record(["codec", "qp", "bits", "bpp", "wall_ms", "bitstream_path"])?;
        for (codec, qp, r) in rows {
            w.write_record([
                codec.to_string(),
                qp.to_string(),
                r.bits.to_string(),
                r.bpp.to_string(),
                format!("{:.3}", r.wall_ms),
                r.bitstream.display().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| io_err(path, e.into()))
}
