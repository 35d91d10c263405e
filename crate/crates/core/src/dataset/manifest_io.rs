use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Label, LabelSource, Sample, Split};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["id", "image_ref", "split", "true_label", "assigned_label"];
const SOURCE_COLUMN: &str = "label_source";

/// Fields that do not fit the CSV rows. Stored next to the CSV as
/// `<stem>.meta.json`.
#[derive(Serialize, Deserialize)]
struct ManifestMeta {
    class_names: [String; 2],
    source_root: PathBuf,
    created_at: DateTime<Utc>,
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn label_cell(label: Option<Label>) -> &'static str {
    match label {
        None => "",
        Some(Label::Zero) => "0",
        Some(Label::One) => "1",
    }
}

fn parse_label(cell: &str, line: usize, column: &str) -> Result<Option<Label>> {
    match cell {
        "" => Ok(None),
        "0" => Ok(Some(Label::Zero)),
        "1" => Ok(Some(Label::One)),
        other => Err(Error::Parse {
            line,
            message: format!("invalid {column} `{other}` (expected 0, 1 or empty)"),
        }),
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let with_source = manifest.samples().iter().any(|s| s.label_source.is_some());

    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header: Vec<&str> = MANIFEST_HEADER.to_vec();
    if with_source {
        header.push(SOURCE_COLUMN);
    }
    writer.write_record(&header).expect("in-memory write");

    for s in manifest.samples() {
        let image_ref = s
            .image_ref
            .strip_prefix(&manifest.source_root)
            .unwrap_or(&s.image_ref);
        let image_ref = image_ref.to_string_lossy();
        let source = s.label_source.as_ref().map(ToString::to_string).unwrap_or_default();
        let mut row = vec![
            s.id.as_str(),
            image_ref.as_ref(),
            s.split.as_str(),
            label_cell(s.true_label),
            label_cell(s.assigned_label),
        ];
        if with_source {
            row.push(&source);
        }
        writer.write_record(&row).expect("in-memory write");
    }
    let bytes = writer.into_inner().expect("in-memory flush");
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;

    let meta = ManifestMeta {
        class_names: manifest.class_names.clone(),
        source_root: manifest.source_root.clone(),
        created_at: manifest.created_at,
    };
    let meta_file = meta_path(path);
    let json = serde_json::to_vec_pretty(&meta).map_err(|e| Error::json("manifest meta", e))?;
    fs::write(&meta_file, json).map_err(|e| Error::io(&meta_file, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let meta = match fs::read(meta_path(path)) {
        Ok(bytes) => Some(
            serde_json::from_slice::<ManifestMeta>(&bytes)
                .map_err(|e| Error::json(meta_path(path).display().to_string(), e))?,
        ),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(Error::io(meta_path(path), e)),
    };
    let meta = meta.unwrap_or_else(|| ManifestMeta {
        class_names: ["class_0".into(), "class_1".into()],
        source_root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        created_at: DateTime::<Utc>::UNIX_EPOCH,
    });

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(data.as_slice());
    let mut records = reader.records();

    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(csv_parse_error(e)),
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let with_source = match header.iter().collect::<Vec<_>>().as_slice() {
        h if h == MANIFEST_HEADER => false,
        [rest @ .., last] if rest == MANIFEST_HEADER && *last == SOURCE_COLUMN => true,
        _ => {
            return Err(Error::Parse {
                line: 1,
                message: format!("header must be `{}`", MANIFEST_HEADER.join(",")),
            })
        }
    };

    let mut samples = Vec::new();
    for record in records {
        let record = record.map_err(csv_parse_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let split: Split = record[2]
            .parse()
            .map_err(|message| Error::Parse { line, message })?;
        if record[0].is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty id".into(),
            });
        }
        let image_ref = Path::new(&record[1]);
        let label_source = if with_source && !record[5].is_empty() {
            Some(
                record[5]
                    .parse::<LabelSource>()
                    .map_err(|message| Error::Parse { line, message })?,
            )
        } else {
            None
        };
        samples.push(Sample {
            id: record[0].to_string(),
            image_ref: meta.source_root.join(image_ref),
            split,
            true_label: parse_label(&record[3], line, "true_label")?,
            assigned_label: parse_label(&record[4], line, "assigned_label")?,
            label_source,
        });
    }
    DatasetManifest::new(samples, meta.class_names, meta.source_root, meta.created_at)
}

fn csv_parse_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}
