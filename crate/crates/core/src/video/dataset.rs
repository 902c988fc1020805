//! Dataset manifests: CSV with header `clip_path,label`, one row per clip.
//! Relative clip paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use super::{read_y4m, write_y4m, LabeledClip, VideoError};

fn manifest_err(path: &Path, e: csv::Error) -> VideoError {
    VideoError::Manifest(format!("{}: {e}", path.display()))
}

/// Reads `(clip_path, label)` rows; paths are resolved against the manifest directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, usize)>, VideoError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| manifest_err(path, e))?;
    let headers = reader.headers().map_err(|e| manifest_err(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "clip_path" || &headers[1] != "label" {
        return Err(VideoError::Manifest(format!(
            "{}: expected header clip_path,label",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| manifest_err(path, e))?;
        let label = record[1]
            .trim()
            .parse::<usize>()
            .map_err(|_| VideoError::Manifest(format!("bad label {:?}", &record[1])))?;
        rows.push((base.join(record[0].trim()), label));
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[(PathBuf, usize)]) -> Result<(), VideoError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| manifest_err(path, e))?;
    let write = |w: &mut csv::Writer<std::fs::File>, a: &str, b: &str| {
        w.write_record([a, b]).map_err(|e| manifest_err(path, e))
    };
    write(&mut writer, "clip_path", "label")?;
    for (clip, label) in rows {
        write(&mut writer, &clip.to_string_lossy(), &label.to_string())?;
    }
    writer.flush().map_err(|e| VideoError::io(path, e))
}

/// Writes each clip as `clip_NNNNN.y4m` under `dir` plus `manifest.csv`.
/// Returns the manifest path.
pub fn export_dataset(dir: &Path, clips: &[LabeledClip]) -> Result<PathBuf, VideoError> {
    std::fs::create_dir_all(dir).map_err(|e| VideoError::io(dir, e))?;
    let mut rows = Vec::with_capacity(clips.len());
    for (i, c) in clips.iter().enumerate() {
        let name = format!("clip_{i:05}.y4m");
        write_y4m(&c.clip, &dir.join(&name))?;
        rows.push((PathBuf::from(name), c.label));
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

/// Loads every clip of a manifest as luma-only labeled clips.
pub fn load_dataset(manifest: &Path) -> Result<Vec<LabeledClip>, VideoError> {
    read_manifest(manifest)?
        .into_iter()
        .map(|(p, label)| {
            Ok(LabeledClip {
                clip: read_y4m(&p)?.to_luma(),
                label,
            })
        })
        .collect()
}
