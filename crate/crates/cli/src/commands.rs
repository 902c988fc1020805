use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use vcm_core::analyzer::{pretrain, Analyzer};
use vcm_core::evaluation::{
    bd_rate, measure_curves, measure_real, measure_virtual, read_ra_points, write_report, BdRow, Metrics, PointStats,
    RACurve,
};
use vcm_core::harness::{Codec, Harness, DEFAULT_QPS};
use vcm_core::training::{self, TrainMode, TrainState};
use vcm_core::video::dataset::{export_dataset, load_dataset};
use vcm_core::video::{synth_dataset, LabeledClip, Split};

use crate::config::{parse_list, RunConfig};
use crate::error::CliError;

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn load_clips(cfg: &RunConfig, key: &str) -> Result<Vec<LabeledClip>, CliError> {
    let path = cfg.existing_path(key)?;
    let clips = load_dataset(&path)?;
    if clips.is_empty() {
        return Err(CliError::usage(format!("{key}: {} lists no clips", path.display())));
    }
    Ok(clips)
}

pub fn synth(out: &Path, count: usize, seed: u64, split: Split) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let manifest = export_dataset(out, &synth_dataset(seed, count, split))?;
    println!("wrote {count} clips and {}", manifest.display());
    println!("manifest sha256 {}", file_sha256(&manifest)?);
    Ok(())
}

pub fn pretrain_analyzer(cfg: &RunConfig) -> Result<(), CliError> {
    let pc = cfg.pretrain_config()?;
    let out = cfg.require_path("analyzer.out")?;
    let train = load_clips(cfg, "analyzer.data")?;
    let val = load_clips(cfg, "analyzer.val_data")?;
    let (analyzer, log) = pretrain(&train, &val, &pc, |step, loss, val| {
        if let Some(acc) = val {
            println!("step {step} loss {loss:.4} val_top1 {acc:.4}");
        }
    })?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    analyzer.save(&out)?;
    let (_, acc) = log.validation.last().copied().unwrap_or_default();
    println!(
        "pretrained {} steps, val_top1 {acc:.4}, checksum {}, saved {}",
        log.losses.len(),
        analyzer.checksum(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let tc = cfg.train_config()?;
    let codec = cfg.codec_config()?;
    let out = cfg.require_path("train.out")?;
    let log_every = cfg.parse::<u64>("train.log_every")?.unwrap_or(10).max(1);
    let data = load_clips(cfg, "train.data")?;
    let mut state = match cfg.path("train.resume") {
        Some(_) => {
            let s = TrainState::load(&cfg.existing_path("train.resume")?)?;
            println!("resuming at step {} of {}", s.step(), s.config().steps);
            s
        }
        None => {
            let analyzer = Analyzer::load(&cfg.existing_path("train.analyzer")?)?;
            TrainState::with_codec(tc, codec, analyzer, &data)?
        }
    };
    let steps = state.config().steps;
    println!(
        "training {} for {steps} steps: alpha {} lambda {} lr {} f_q [{}, {}] batch {} seed {}",
        state.config().mode,
        state.config().alpha,
        state.config().lambda,
        state.config().lr,
        state.config().fq_min,
        state.config().fq_max,
        state.config().batch_size,
        state.config().seed
    );
    training::run(&mut state, &data, steps, Some(&out), |r| {
        if r.step % log_every == 0 || r.step == steps {
            println!(
                "step {} f_q {:.2} L {:.5} L_D {:.6} L_R {:.5} L_Acc {:.5}",
                r.step, r.f_q, r.total, r.distortion, r.rate, r.accuracy
            );
        }
    })?;
    println!("train_log sha256 {}", file_sha256(&out.join("train_log.csv"))?);
    println!(
        "preprocessor checksum {}, analyzer checksum {}",
        state.preprocessor().checksum(),
        state.analyzer().checksum()
    );
    println!("saved {}", out.join("final.vcmp").display());
    Ok(())
}

/// Codec argument of `eval`: a real codec or the virtual one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalCodec {
    Virtual,
    Real(Codec),
}

impl std::str::FromStr for EvalCodec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "virtual" => Ok(Self::Virtual),
            other => other.parse().map(Self::Real).map_err(|_| format!("expected h264, h265 or virtual, got {other:?}")),
        }
    }
}

impl std::fmt::Display for EvalCodec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Virtual => f.write_str("virtual"),
            Self::Real(c) => c.fmt(f),
        }
    }
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub codec: Option<EvalCodec>,
    pub qps: Option<Vec<u32>>,
    pub out: Option<PathBuf>,
}

fn print_points(method: &str, stats: &[PointStats]) {
    for s in stats {
        let m = &s.metrics;
        println!(
            "{method} qp {} bpp {:.5} top1 {:.4} top2 {:.4} mean_class {:.4}",
            s.qp, s.bpp, m.top1, m.top2, m.mean_class
        );
    }
}

pub fn eval(cfg: &RunConfig, args: EvalArgs) -> Result<(), CliError> {
    let codec = match args.codec {
        Some(c) => c,
        None => cfg.get("eval.codec").unwrap_or("virtual").parse().map_err(CliError::Usage)?,
    };
    let qps: Vec<u32> = match (args.qps, cfg.get("eval.qps")) {
        (Some(q), _) => q,
        (None, Some(s)) => parse_list(s).map_err(|e| CliError::usage(format!("eval.qps: {e}")))?,
        (None, None) => DEFAULT_QPS.iter().map(|&q| q as u32).collect(),
    };
    if qps.len() < 4 {
        return Err(CliError::usage("at least 4 qps are needed for a BD-Rate"));
    }
    let out = match args.out {
        Some(p) => p,
        None => cfg.require_path("eval.out")?,
    };
    let harness = match codec {
        EvalCodec::Virtual => {
            if let Some(&q) = qps.iter().find(|&&q| !(4..=63).contains(&q)) {
                return Err(CliError::usage(format!("virtual f_q {q} outside [4, 63]")));
            }
            None
        }
        EvalCodec::Real(c) => {
            if let Some(&q) = qps.iter().find(|&&q| q > 51) {
                return Err(CliError::usage(format!("qp {q} outside [0, 51]")));
            }
            let run_dir = cfg.path("harness.run_dir").unwrap_or_else(|| out.join("harness"));
            let mut h = Harness::new(cfg.tools(), cfg.templates()?, &run_dir)?;
            h.check_tools(c)?;
            if let Some(p) = cfg.get("harness.preset") {
                h.preset = p.to_string();
            }
            if let Some(w) = cfg.parse::<usize>("harness.workers")? {
                h.workers = w.max(1);
            }
            if let Some(k) = cfg.parse::<bool>("harness.keep")? {
                h.keep = k;
            }
            Some((h, c))
        }
    };

    let checkpoint = match args.checkpoint {
        Some(p) if p.exists() => p,
        Some(p) => return Err(CliError::usage(format!("--checkpoint: {} does not exist", p.display()))),
        None => cfg.existing_path("eval.checkpoint")?,
    };
    let state = TrainState::load(&checkpoint)?;
    let analyzer = state.analyzer();
    // a fine-tuned checkpoint is compared against the analyzer it started from
    let anchor_key = match (cfg.path("eval.anchor_analyzer"), state.config().mode) {
        (Some(_), _) => Some("eval.anchor_analyzer"),
        (None, TrainMode::FinetuneAnalyzer) => Some("train.analyzer"),
        (None, TrainMode::Preprocessor) => None,
    };
    let anchor_analyzer = match anchor_key {
        Some(key) => Analyzer::load(&cfg.existing_path(key)?)?,
        None => analyzer.clone(),
    };
    let (method, pre) = match state.config().mode {
        TrainMode::Preprocessor => ("preprocessed", Some(state.preprocessor())),
        TrainMode::FinetuneAnalyzer => ("finetuned", None),
    };
    let mut clips = load_clips(cfg, "eval.data")?;
    if let Some(n) = cfg.parse::<usize>("eval.clips")? {
        clips.truncate(n.max(1));
    }
    println!(
        "evaluating {} ({method}) on {} clips, codec {codec}, qps {qps:?}",
        checkpoint.display(),
        clips.len()
    );

    let (anchor, test) = match &harness {
        None => {
            let base = cfg.codec_config()?;
            (
                measure_virtual(&clips, None, &anchor_analyzer, &base, &qps)?,
                measure_virtual(&clips, pre, analyzer, &base, &qps)?,
            )
        }
        Some((h, c)) => {
            let qps: Vec<u8> = qps.iter().map(|&q| q as u8).collect();
            (
                measure_real(h, *c, &clips, None, &anchor_analyzer, &qps, "anchor")?,
                measure_real(h, *c, &clips, pre, analyzer, &qps, method)?,
            )
        }
    };
    print_points("anchor", &anchor);
    print_points(method, &test);

    let codec_name = codec.to_string();
    let anchor_curves = measure_curves("anchor", &codec_name, &anchor)?;
    let test_curves = measure_curves(method, &codec_name, &test)?;
    let mut rows = Vec::new();
    for (a, t) in anchor_curves.iter().zip(&test_curves) {
        let pct = bd_rate(a, t).unwrap_or_else(|e| {
            log::warn!("{}: no BD-Rate: {e}", a.metric);
            f64::NAN
        });
        println!("BD-Rate {codec_name} {} {method} vs anchor: {pct:.2}%", a.metric);
        rows.push(BdRow {
            codec: codec_name.clone(),
            metric: a.metric.clone(),
            anchor: "anchor".into(),
            test: method.into(),
            bdrate_pct: pct,
        });
    }
    let curves: Vec<RACurve> = anchor_curves.into_iter().chain(test_curves).collect();
    write_report(&out, &curves, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub struct BdArgs {
    pub anchor: PathBuf,
    pub test: PathBuf,
    pub metric: String,
    pub codec: Option<String>,
    pub anchor_method: Option<String>,
    pub test_method: Option<String>,
}

fn select(path: &Path, curves: Vec<RACurve>, args: &BdArgs, method: Option<&str>) -> Result<RACurve, CliError> {
    if !Metrics::NAMES.contains(&args.metric.as_str()) {
        return Err(CliError::usage(format!("unknown metric {:?}", args.metric)));
    }
    let mut hits: Vec<RACurve> = curves
        .into_iter()
        .filter(|c| c.metric == args.metric)
        .filter(|c| args.codec.as_deref().is_none_or(|x| c.codec == x))
        .filter(|c| method.is_none_or(|m| c.method == m))
        .collect();
    match hits.len() {
        1 => Ok(hits.pop().expect("one curve")),
        0 => Err(CliError::usage(format!("{}: no {} curve matches", path.display(), args.metric))),
        _ => Err(CliError::usage(format!(
            "{}: several curves match ({}); choose one with --codec or --anchor-method/--test-method",
            path.display(),
            hits.iter().map(|c| format!("{}/{}", c.method, c.codec)).collect::<Vec<_>>().join(", ")
        ))),
    }
}

/// Two decimals, without a negative sign on values that round to zero.
pub fn format_pct(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

pub fn bdrate(args: &BdArgs) -> Result<(), CliError> {
    let anchor = select(&args.anchor, read_ra_points(&args.anchor)?, args, args.anchor_method.as_deref())?;
    let test = select(&args.test, read_ra_points(&args.test)?, args, args.test_method.as_deref())?;
    println!("{}", format_pct(bd_rate(&anchor, &test)?));
    Ok(())
}
