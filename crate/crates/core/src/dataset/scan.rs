use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{load_manifest, DatasetManifest, Label, Sample, Split};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Name of the manifest looked up under a `flat` root.
pub const FLAT_MANIFEST_NAME: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `root/<split>/<class_name>/<file>`
    SplitDirs,
    /// Arbitrary file layout described by `root/manifest.csv`.
    Flat,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn class_dirs(split_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(split_dir).map_err(|e| Error::io(split_dir, e))? {
        let entry = entry.map_err(|e| Error::io(split_dir, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn scan_directory(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Structure(format!(
            "dataset root {} does not exist or is not a directory",
            root.display()
        )));
    }
    match layout {
        Layout::Flat => {
            let path = root.join(FLAT_MANIFEST_NAME);
            if !path.is_file() {
                return Err(Error::Structure(format!(
                    "flat layout requires {}",
                    path.display()
                )));
            }
            load_manifest(&path)
        }
        Layout::SplitDirs => scan_split_dirs(root),
    }
}

fn scan_split_dirs(root: &Path) -> Result<DatasetManifest> {
    let mut class_names: Option<[String; 2]> = None;
    let mut samples = Vec::new();

    for split in Split::ALL {
        let split_dir = root.join(split.as_str());
        if !split_dir.is_dir() {
            return Err(Error::Structure(format!(
                "missing split directory {}",
                split_dir.display()
            )));
        }
        let dirs = class_dirs(&split_dir)?;
        if dirs.len() != 2 {
            return Err(Error::ClassCount {
                dir: split_dir,
                found: dirs.len(),
            });
        }
        let names = [0, 1].map(|i| {
            dirs[i]
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        match &class_names {
            None => class_names = Some(names),
            Some(expected) if *expected != names => {
                return Err(Error::Structure(format!(
                    "class directories under {} are {:?}, expected {:?}",
                    split_dir.display(),
                    names,
                    expected
                )))
            }
            Some(_) => {}
        }

        for (class_index, dir) in dirs.iter().enumerate() {
            let label = Label::try_from(class_index as u8).expect("two classes");
            for entry in WalkDir::new(dir).sort_by_file_name() {
                let entry = entry.map_err(|e| {
                    let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.clone());
                    Error::io(path, e.into())
                })?;
                if entry.file_type().is_file() && is_image(entry.path()) {
                    let path = entry.path().to_path_buf();
                    samples.push(
                        Sample::new(relative_id(root, &path), path, split).with_true_label(label),
                    );
                }
            }
        }
    }

    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    DatasetManifest::new(
        samples,
        class_names.expect("at least one split scanned"),
        root.to_path_buf(),
        Utc::now(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::save_manifest;

    fn touch_png(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::new(4, 4).save(path).unwrap();
    }

    fn build_tree(root: &Path, per_class: usize) {
        for split in Split::ALL {
            for class in ["class_0", "class_1"] {
                for i in 0..per_class {
                    touch_png(&root.join(split.as_str()).join(class).join(format!("{i}.png")));
                }
            }
        }
    }

    #[test]
    fn scans_twelve_images() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), 2);
        fs::write(dir.path().join("train/class_0/notes.txt"), "x").unwrap();
        let m = scan_directory(dir.path(), Layout::SplitDirs).unwrap();
        assert_eq!(m.len(), 12);
        let counts = m.split_counts();
        assert_eq!((counts.train, counts.validation, counts.test), (4, 4, 4));
        let s = m.get("validation/class_1/0.png").unwrap();
        assert_eq!(s.true_label, Some(Label::One));
        assert_eq!(s.split, Split::Validation);
        assert_eq!(m.class_names, ["class_0".to_string(), "class_1".to_string()]);
    }

    #[test]
    fn three_classes_is_class_count_error() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), 1);
        touch_png(&dir.path().join("train/class_2/0.png"));
        assert!(matches!(
            scan_directory(dir.path(), Layout::SplitDirs),
            Err(Error::ClassCount { found: 3, .. })
        ));
    }

    #[test]
    fn missing_split_is_structure_error() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), 1);
        fs::remove_dir_all(dir.path().join("test")).unwrap();
        assert!(matches!(
            scan_directory(dir.path(), Layout::SplitDirs),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn no_images_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        for split in Split::ALL {
            for class in ["a", "b"] {
                fs::create_dir_all(dir.path().join(split.as_str()).join(class)).unwrap();
            }
        }
        assert!(matches!(
            scan_directory(dir.path(), Layout::SplitDirs),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn repeated_scans_save_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), 3);
        let out = tempfile::tempdir().unwrap();
        let a = out.path().join("a.csv");
        let b = out.path().join("b.csv");
        save_manifest(&scan_directory(dir.path(), Layout::SplitDirs).unwrap(), &a).unwrap();
        save_manifest(&scan_directory(dir.path(), Layout::SplitDirs).unwrap(), &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn flat_layout_reads_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            scan_directory(dir.path(), Layout::Flat),
            Err(Error::Structure(_))
        ));
        fs::write(
            dir.path().join(FLAT_MANIFEST_NAME),
            "id,image_ref,split,true_label,assigned_label\na.png,a.png,train,0,\n",
        )
        .unwrap();
        assert_eq!(scan_directory(dir.path(), Layout::Flat).unwrap().len(), 1);
    }

    #[test]
    fn splits_never_share_ids() {
        let dir = tempfile::tempdir().unwrap();
        build_tree(dir.path(), 2);
        let m = scan_directory(dir.path(), Layout::SplitDirs).unwrap();
        for a in Split::ALL {
            for b in Split::ALL {
                if a != b {
                    assert!(m.split(a).all(|s| m.split(b).all(|t| t.id != s.id)));
                }
            }
        }
    }
}
