//! Dataset directories in the MVTec layout:
//!
//! ```text
//! root/train/good/*
//! root/test/good/*
//! root/test/<class>/*
//! ```
//!
//! Sample identifiers are the path relative to `root` without the file
//! extension, e.g. `test/crack/003`.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dra_core::protocols::{DatasetCatalog, ImageProvider};
use dra_core::{DraError, ImageTensor};

use crate::error::{io_err, Error, Result};
use crate::imageio;

const GOOD: &str = "good";

#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub catalog: DatasetCatalog,
    pub paths: BTreeMap<String, PathBuf>,
    pub warnings: Vec<String>,
}

impl Ingested {
    pub fn provider(&self, size: Option<usize>) -> FileProvider {
        FileProvider::new(self.paths.clone(), size)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = e.map_err(io_err(dir))?.path();
        let hidden = p.file_name().and_then(|n| n.to_str()).is_none_or(|n| n.starts_with('.'));
        if !hidden {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Readable image files directly inside `dir`, as `(id, path)` pairs.
fn scan(root_dir: &str, class: &str, dir: &Path, seen: &mut BTreeMap<String, PathBuf>, warnings: &mut Vec<String>) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for p in sorted_entries(dir)? {
        if !p.is_file() {
            continue;
        }
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let id = format!("{root_dir}/{class}/{stem}");
        if let Err(e) = imageio::probe_dimensions(&p) {
            warnings.push(format!("skipping unreadable image {}: {e}", p.display()));
            continue;
        }
        if seen.contains_key(&id) {
            warnings.push(format!("skipping {}: identifier `{id}` is already taken", p.display()));
            continue;
        }
        seen.insert(id.clone(), p);
        ids.push(id);
    }
    Ok(ids)
}

/// Builds a catalog from a dataset directory. Unreadable files and empty
/// anomaly classes are skipped with a warning.
pub fn ingest_directory(root: &Path) -> Result<Ingested> {
    let train_good = root.join("train").join(GOOD);
    if !train_good.is_dir() {
        return Err(Error::Layout(format!("{} is missing", train_good.display())));
    }
    let mut paths = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut catalog = DatasetCatalog {
        name: name_of(root),
        ..DatasetCatalog::default()
    };
    catalog.normal_train = scan("train", GOOD, &train_good, &mut paths, &mut warnings)?;
    let test = root.join("test");
    if test.is_dir() {
        for dir in sorted_entries(&test)? {
            if !dir.is_dir() {
                continue;
            }
            let class = name_of(&dir);
            let ids = scan("test", &class, &dir, &mut paths, &mut warnings)?;
            if class == GOOD {
                catalog.normal_test = ids;
            } else if ids.is_empty() {
                warnings.push(format!("anomaly class `{class}` has no readable images and is omitted"));
            } else {
                catalog.anomalies.insert(class, ids);
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    catalog.validate()?;
    Ok(Ingested {
        catalog,
        paths,
        warnings,
    })
}

/// Loads images from disk on demand and keeps the decoded tensors.
pub struct FileProvider {
    paths: BTreeMap<String, PathBuf>,
    size: Option<usize>,
    cache: RefCell<BTreeMap<String, ImageTensor>>,
}

impl FileProvider {
    pub fn new(paths: BTreeMap<String, PathBuf>, size: Option<usize>) -> Self {
        Self {
            paths,
            size,
            cache: RefCell::new(BTreeMap::new()),
        }
    }
}

impl ImageProvider for FileProvider {
    fn load(&self, id: &str) -> dra_core::Result<ImageTensor> {
        if let Some(t) = self.cache.borrow().get(id) {
            return Ok(t.clone());
        }
        let path = self
            .paths
            .get(id)
            .ok_or_else(|| DraError::Data(format!("no file for sample `{id}`")))?;
        let t = imageio::load_image(path, self.size).map_err(|e| DraError::Data(e.to_string()))?;
        self.cache.borrow_mut().insert(id.to_string(), t.clone());
        Ok(t)
    }
}
