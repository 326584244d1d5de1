//! CSV manifests (`image,mask,fold`) with a `classes.txt` sidecar listing
//! one class name per line, background first. Paths in the CSV are
//! relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::image_io::{read_image, read_mask, write_image, write_mask};
use super::SegmentationSample;
use crate::error::{DataError, Error, Result};

pub const CLASSES_FILE: &str = "classes.txt";
const HEADER: [&str; 3] = ["image", "mask", "fold"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the row paths are relative to.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub class_names: Vec<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => DataError::MalformedRow {
            row: 0,
            reason: format!("{other:?}"),
        }
        .into(),
    }
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_folds(&self) -> usize {
        self.rows.iter().map(|r| r.fold + 1).max().unwrap_or(0)
    }

    /// Loads and validates a manifest: header, row syntax, file existence,
    /// contiguous folds and the class list.
    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let classes_path = root.join(CLASSES_FILE);
        if !classes_path.is_file() {
            return Err(DataError::MissingClasses(classes_path).into());
        }
        let class_names: Vec<String> = fs::read_to_string(&classes_path)
            .map_err(io_err(&classes_path))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if class_names.len() < 2 || class_names.len() > 256 {
            return Err(Error::Config(format!(
                "{} must list between 2 and 256 classes, found {}",
                classes_path.display(),
                class_names.len()
            )));
        }

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_path(path)
            .map_err(|e| csv_err(path, e))?;
        let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
        if header.iter().map(str::trim).ne(HEADER) {
            return Err(DataError::BadHeader(header.iter().collect::<Vec<_>>().join(",")).into());
        }

        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| DataError::MalformedRow {
                row,
                reason: e.to_string(),
            })?;
            if rec.len() != 3 {
                return Err(DataError::MalformedRow {
                    row,
                    reason: format!("expected 3 fields, found {}", rec.len()),
                }
                .into());
            }
            let fold = rec[2].trim().parse::<usize>().map_err(|e| DataError::MalformedRow {
                row,
                reason: format!("fold {:?}: {e}", &rec[2]),
            })?;
            let r = ManifestRow {
                image: PathBuf::from(rec[0].trim()),
                mask: PathBuf::from(rec[1].trim()),
                fold,
            };
            for p in [&r.image, &r.mask] {
                if !root.join(p).is_file() {
                    return Err(DataError::MissingFile {
                        row,
                        path: root.join(p),
                    }
                    .into());
                }
            }
            rows.push(r);
        }

        let folds: BTreeSet<usize> = rows.iter().map(|r| r.fold).collect();
        if folds.iter().copied().ne(0..folds.len()) {
            return Err(DataError::NonContiguousFolds(folds.into_iter().collect()).into());
        }
        Ok(Self {
            root,
            rows,
            class_names,
        })
    }

    /// Writes the CSV to `path` and the class list beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let classes = dir.join(CLASSES_FILE);
        fs::write(&classes, self.class_names.join("\n") + "\n").map_err(io_err(&classes))?;
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(HEADER).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.image.to_string_lossy().as_ref(),
                r.mask.to_string_lossy().as_ref(),
                &r.fold.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(io_err(path))
    }

    /// Reads row `index` (0-based) with its label range checked.
    pub fn read_sample(&self, index: usize) -> Result<SegmentationSample> {
        let r = &self.rows[index];
        let row = index + 1;
        let image_path = self.root.join(&r.image);
        let mask_path = self.root.join(&r.mask);
        let image = read_image(&image_path)?;
        let mask = read_mask(&mask_path)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        if (mask.height(), mask.width()) != (h, w) {
            return Err(DataError::SizeMismatch {
                path: mask_path,
                expected: (h, w),
                got: (mask.height(), mask.width()),
            }
            .into());
        }
        if let Some(&value) = mask.data().iter().find(|&&v| v as usize >= self.num_classes()) {
            return Err(DataError::LabelOutOfRange {
                row,
                value,
                num_classes: self.num_classes(),
            }
            .into());
        }
        let id = r
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| row.to_string());
        SegmentationSample::new(id, image, mask, r.fold)
    }

    pub fn read_rows(&self, indices: &[usize]) -> Result<Vec<SegmentationSample>> {
        indices.iter().map(|&i| self.read_sample(i)).collect()
    }

    /// Row indices of the training rows (fold ≠ `test_fold`) and the test
    /// rows (fold = `test_fold`).
    pub fn split(&self, test_fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.rows.len()).partition(|&i| self.rows[i].fold != test_fold)
    }
}

/// Writes samples as `images/<id>.png` and `masks/<id>.png` under `dir`
/// plus `manifest.csv` and the class list.
pub fn write_dataset(dir: &Path, samples: &[SegmentationSample], class_names: &[String]) -> Result<DatasetManifest> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask = PathBuf::from("masks").join(format!("{}.png", s.id));
        write_image(&dir.join(&image), &s.image)?;
        write_mask(&dir.join(&mask), &s.mask)?;
        rows.push(ManifestRow {
            image,
            mask,
            fold: s.fold,
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        rows,
        class_names: class_names.to_vec(),
    };
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
