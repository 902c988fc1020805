//! INI run configuration with sections `[analyzer]`, `[train]`, `[codec]`,
//! `[harness]` and `[eval]`. Relative paths in a file resolve against the
//! file's directory; relative paths given as `--section.key` overrides
//! resolve against the working directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use vcm_core::analyzer::PretrainConfig;
use vcm_core::codec::VirtualCodecConfig;
use vcm_core::harness::{Templates, Tools};
use vcm_core::training::TrainConfig;

use crate::error::CliError;

const SCHEMA: &[(&str, &[&str])] = &[
    (
        "analyzer",
        &[
            "data",
            "val_data",
            "out",
            "seed",
            "lr",
            "batch_size",
            "max_steps",
            "target_accuracy",
            "min_accuracy",
            "eval_every",
        ],
    ),
    (
        "train",
        &[
            "data",
            "analyzer",
            "out",
            "resume",
            "log_every",
            "mode",
            "alpha",
            "lambda",
            "lr",
            "entropy_lr",
            "fq_min",
            "fq_max",
            "steps",
            "batch_size",
            "seed",
            "checkpoint_every",
            "guard_window",
            "guard_factor",
            "entropy_init_clips",
            "entropy_init_steps",
            "entropy_init_lr",
        ],
    ),
    ("codec", &["transform_block", "pred_block", "search_range"]),
    (
        "harness",
        &[
            "x264",
            "x265",
            "ffmpeg",
            "encoders",
            "h264_template",
            "h265_template",
            "decode_template",
            "preset",
            "workers",
            "keep",
            "run_dir",
        ],
    ),
    ("eval", &["data", "checkpoint", "anchor_analyzer", "out", "codec", "qps", "clips"]),
];

const PATH_KEYS: &[&str] = &[
    "analyzer.data",
    "analyzer.val_data",
    "analyzer.out",
    "train.data",
    "train.analyzer",
    "train.out",
    "train.resume",
    "harness.x264",
    "harness.x265",
    "harness.ffmpeg",
    "harness.run_dir",
    "eval.data",
    "eval.checkpoint",
    "eval.anchor_analyzer",
    "eval.out",
];

fn known(key: &str) -> bool {
    key.split_once('.')
        .is_some_and(|(s, k)| SCHEMA.iter().any(|(sec, keys)| *sec == s && keys.contains(&k)))
}

/// Flat `section.key -> value` map with paths already resolved.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let ini = Ini::load_from_file(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(CliError::usage(format!("{}: key {k:?} outside any section", path.display())));
                }
                continue;
            };
            if !SCHEMA.iter().any(|(s, _)| *s == section) {
                return Err(CliError::usage(format!("{}: unknown section [{section}]", path.display())));
            }
            for (k, v) in props.iter() {
                let key = format!("{section}.{k}");
                cfg.insert(&key, v, base)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            }
        }
        Ok(cfg)
    }

    fn insert(&mut self, key: &str, value: &str, base: &Path) -> Result<(), String> {
        if !known(key) {
            return Err(format!("unknown key {key}"));
        }
        let value = value.trim();
        let value = if PATH_KEYS.contains(&key) && !value.is_empty() {
            base.join(value).display().to_string()
        } else {
            value.to_string()
        };
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    /// Applies a `--section.key value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        self.insert(key, value, Path::new("")).map_err(CliError::usage)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        debug_assert!(known(key), "{key}");
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse().map_err(|e| CliError::usage(format!("{key} = {v:?}: {e}"))))
            .transpose()
    }

    fn set_field<T: FromStr>(&self, key: &str, field: &mut T) -> Result<(), CliError>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.parse(key)? {
            *field = v;
        }
        Ok(())
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path(key).ok_or_else(|| CliError::usage(format!("missing required key {key}")))
    }

    /// A required path that must already exist.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf, CliError> {
        let p = self.require_path(key)?;
        if !p.exists() {
            return Err(CliError::usage(format!("{key}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig, CliError> {
        let mut c = PretrainConfig::default();
        self.set_field("analyzer.seed", &mut c.seed)?;
        self.set_field("analyzer.lr", &mut c.lr)?;
        self.set_field("analyzer.batch_size", &mut c.batch_size)?;
        self.set_field("analyzer.max_steps", &mut c.max_steps)?;
        self.set_field("analyzer.target_accuracy", &mut c.target_accuracy)?;
        self.set_field("analyzer.min_accuracy", &mut c.min_accuracy)?;
        self.set_field("analyzer.eval_every", &mut c.eval_every)?;
        if c.batch_size == 0 || c.max_steps == 0 || c.eval_every == 0 || !(c.lr > 0.0) {
            return Err(CliError::usage("analyzer: batch_size, max_steps, eval_every and lr must be positive"));
        }
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut c = TrainConfig::default();
        self.set_field("train.mode", &mut c.mode)?;
        self.set_field("train.alpha", &mut c.alpha)?;
        self.set_field("train.lambda", &mut c.lambda)?;
        self.set_field("train.lr", &mut c.lr)?;
        self.set_field("train.entropy_lr", &mut c.entropy_lr)?;
        self.set_field("train.fq_min", &mut c.fq_min)?;
        self.set_field("train.fq_max", &mut c.fq_max)?;
        self.set_field("train.steps", &mut c.steps)?;
        self.set_field("train.batch_size", &mut c.batch_size)?;
        self.set_field("train.seed", &mut c.seed)?;
        self.set_field("train.checkpoint_every", &mut c.checkpoint_every)?;
        self.set_field("train.guard_window", &mut c.guard_window)?;
        self.set_field("train.guard_factor", &mut c.guard_factor)?;
        self.set_field("train.entropy_init_clips", &mut c.entropy_init_clips)?;
        self.set_field("train.entropy_init_steps", &mut c.entropy_init_steps)?;
        self.set_field("train.entropy_init_lr", &mut c.entropy_init_lr)?;
        c.validate()?;
        Ok(c)
    }

    pub fn codec_config(&self) -> Result<VirtualCodecConfig, CliError> {
        let mut c = VirtualCodecConfig::default();
        self.set_field("codec.transform_block", &mut c.transform_block)?;
        self.set_field("codec.pred_block", &mut c.pred_block)?;
        self.set_field("codec.search_range", &mut c.search_range)?;
        c.validate().map_err(|e| CliError::usage(format!("[codec]: {e}")))?;
        Ok(c)
    }

    /// Tools from the environment, overridden by `[harness]` paths.
    pub fn tools(&self) -> Tools {
        let mut t = Tools::discover();
        for (key, slot) in [("harness.x264", &mut t.x264), ("harness.x265", &mut t.x265), ("harness.ffmpeg", &mut t.ffmpeg)] {
            if let Some(p) = self.path(key) {
                *slot = Some(p);
            }
        }
        t
    }

    /// `encoders = native` (default) runs x264/x265; `encoders = ffmpeg`
    /// encodes through ffmpeg's libx264/libx265 with the same qp and preset.
    /// Individual templates override either set.
    pub fn templates(&self) -> Result<Templates, CliError> {
        let mut t = match self.get("harness.encoders").unwrap_or("native") {
            "native" => Templates::default(),
            "ffmpeg" => Templates::ffmpeg(),
            other => return Err(CliError::usage(format!("harness.encoders: expected native or ffmpeg, got {other:?}"))),
        };
        for (key, slot) in [
            ("harness.h264_template", &mut t.h264),
            ("harness.h265_template", &mut t.h265),
            ("harness.decode_template", &mut t.decode),
        ] {
            if let Some(v) = self.get(key) {
                *slot = v.to_string();
            }
        }
        t.validate()?;
        Ok(t)
    }
}

/// Parses `30,35,40` (or whitespace-separated) into integers.
pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad list entry {t:?}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.ini");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn resolves_paths_against_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "[train]\ndata = clips/manifest.csv\nlr = 0.001\n");
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.path("train.data").unwrap(), dir.path().join("clips/manifest.csv"));
        assert_eq!(c.train_config().unwrap().lr, 0.001);
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        let dir = tempfile::tempdir().unwrap();
        let e = RunConfig::load(&write(dir.path(), "[train]\nlearning_rate = 1\n")).unwrap_err();
        assert!(e.to_string().contains("train.learning_rate"), "{e}");
        assert!(RunConfig::load(&write(dir.path(), "[model]\nx = 1\n")).is_err());
        assert!(RunConfig::load(&write(dir.path(), "x = 1\n")).is_err());
        let mut c = RunConfig::default();
        assert!(c.set("eval.qp", "30").is_err());
        assert!(c.set("eval.qps", "30").is_ok());
    }

    #[test]
    fn typed_values_are_checked() {
        let mut c = RunConfig::default();
        c.set("train.steps", "many").unwrap();
        assert!(c.train_config().unwrap_err().to_string().contains("train.steps"));
        let mut c = RunConfig::default();
        c.set("train.mode", "finetune-analyzer-baseline").unwrap();
        assert_eq!(c.train_config().unwrap().mode, vcm_core::training::TrainMode::FinetuneAnalyzer);
        assert_eq!(parse_list::<u8>("30, 35,40").unwrap(), vec![30, 35, 40]);
        assert!(parse_list::<u8>("30,x").is_err());
    }
}
