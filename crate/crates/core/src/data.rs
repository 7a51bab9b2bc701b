//! Labelled dataset directories and the deterministic train/validation/test
//! split.

use std::borrow::Cow;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{decode_image, resize_bilinear};
use crate::model::{NEGATIVE, POSITIVE};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "png"];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: usize,
    pub source_path: PathBuf,
}

/// A labelled example whose pixels may be produced on demand.
pub trait Sample {
    fn label(&self) -> usize;
    fn pixels(&self) -> Result<Cow<'_, Tensor>>;
}

impl Sample for LabeledImage {
    fn label(&self) -> usize {
        self.label
    }

    fn pixels(&self) -> Result<Cow<'_, Tensor>> {
        Ok(Cow::Borrowed(&self.pixels))
    }
}

/// A file on disk, decoded and resized every time it is read. Lets corpora
/// far larger than memory be trained on one batch at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: usize,
    pub resize_to: (usize, usize),
}

impl DatasetEntry {
    pub fn load(&self) -> Result<LabeledImage> {
        Ok(LabeledImage {
            pixels: read_image(&self.path, self.resize_to)?,
            label: self.label,
            source_path: self.path.clone(),
        })
    }
}

impl Sample for DatasetEntry {
    fn label(&self) -> usize {
        self.label
    }

    fn pixels(&self) -> Result<Cow<'_, Tensor>> {
        read_image(&self.path, self.resize_to).map(Cow::Owned)
    }
}

/// Decodes an image file and resizes it to `(height, width)`.
pub fn read_image(path: &Path, (h, w): (usize, usize)) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    resize_bilinear(&decode_image(&bytes)?, h, w)
}

pub fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && has_image_extension(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Lists `<root>/pos` (label 1) then `<root>/neg` (label 0) without
/// decoding anything.
pub fn scan_dataset_dir(root: &Path, resize_to: (usize, usize)) -> Result<Vec<DatasetEntry>> {
    let mut entries = Vec::new();
    for (sub, label) in [("pos", POSITIVE), ("neg", NEGATIVE)] {
        let dir = root.join(sub);
        if !dir.is_dir() {
            return Err(Error::Layout(format!("missing subdirectory {}", dir.display())));
        }
        entries.extend(list_images(&dir)?.into_iter().map(|path| DatasetEntry { path, label, resize_to }));
    }
    Ok(entries)
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub images: Vec<LabeledImage>,
    pub skipped: Skipped,
}

/// Decodes every image under `<root>/pos` and `<root>/neg`. Undecodable
/// files are skipped with a warning on stderr.
pub fn load_dataset_dir(root: &Path, resize_to: (usize, usize)) -> Result<LoadedDataset> {
    let mut out = LoadedDataset::default();
    for entry in scan_dataset_dir(root, resize_to)? {
        match entry.load() {
            Ok(img) => out.images.push(img),
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", entry.path.display());
                out.skipped.push((entry.path, e.to_string()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
}

/// `(train, validation, test)` sizes for `n` items: `floor(0.6n)`,
/// `floor(0.2n)`, and the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 3 / 5;
    let validation = n / 5;
    (train, validation, n - train - validation)
}

/// Seeded Fisher-Yates shuffle followed by contiguous 0.6 / 0.2 / 0.2
/// slicing. Not stratified by class.
pub fn split_dataset<T>(items: Vec<T>, seed: u64) -> Result<DatasetSplit<T>> {
    let n = items.len();
    if n < 5 {
        return Err(Error::Argument(format!("need at least 5 items to split, got {n}")));
    }
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut shuffled = order.into_iter().map(|i| slots[i].take().expect("permutation"));
    let (n_train, n_val, n_test) = split_sizes(n);
    let train = shuffled.by_ref().take(n_train).collect();
    let validation = shuffled.by_ref().take(n_val).collect();
    let test: Vec<T> = shuffled.collect();
    debug_assert_eq!(test.len(), n_test);
    Ok(DatasetSplit { train, validation, test, seed })
}

/// Files that could not be decoded, with the reason.
pub type Skipped = Vec<(PathBuf, String)>;

/// Lists a training corpus without keeping any pixels resident. A root
/// containing `train/`, `val/` and `test/` (each with `pos/` and `neg/`) is
/// used as already split; a root with `pos/` and `neg/` is split with
/// [`split_dataset`]. Every file is decoded once up front so that
/// undecodable ones are skipped (with a warning) before training starts.
pub fn scan_split_dir(root: &Path, resize_to: (usize, usize), seed: u64) -> Result<(DatasetSplit<DatasetEntry>, Skipped)> {
    let mut skipped = Vec::new();
    let mut scan = |dir: &Path| -> Result<Vec<DatasetEntry>> {
        let mut kept = Vec::new();
        for entry in scan_dataset_dir(dir, resize_to)? {
            match entry.pixels() {
                Ok(_) => kept.push(entry),
                Err(e) => {
                    eprintln!("warning: skipping {}: {e}", entry.path.display());
                    skipped.push((entry.path, e.to_string()));
                }
            }
        }
        Ok(kept)
    };
    let split = if root.join("train").is_dir() {
        let mut part = |name: &str| -> Result<Vec<DatasetEntry>> {
            let dir = root.join(name);
            if !dir.is_dir() {
                return Err(Error::Layout(format!("missing subdirectory {}", dir.display())));
            }
            scan(&dir)
        };
        let train = part("train")?;
        let validation = part("val")?;
        let test = part("test")?;
        DatasetSplit { train, validation, test, seed }
    } else {
        split_dataset(scan(root)?, seed)?
    };
    Ok((split, skipped))
}

/// [`scan_split_dir`] with every image decoded into memory.
pub fn load_split_dir(root: &Path, resize_to: (usize, usize), seed: u64) -> Result<(DatasetSplit<LabeledImage>, Skipped)> {
    let (split, skipped) = scan_split_dir(root, resize_to, seed)?;
    let load = |entries: Vec<DatasetEntry>| entries.iter().map(DatasetEntry::load).collect::<Result<Vec<_>>>();
    let split = DatasetSplit {
        train: load(split.train)?,
        validation: load(split.validation)?,
        test: load(split.test)?,
        seed,
    };
    Ok((split, skipped))
}
