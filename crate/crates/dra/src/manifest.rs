//! Catalog export and import as a CSV manifest with columns
//! `id,path,role,class`. Roles are `train_normal`, `test_normal` and
//! `anomaly`; relative paths resolve against the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dra_core::protocols::DatasetCatalog;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Ingested;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    TrainNormal,
    TestNormal,
    Anomaly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub path: String,
    pub role: Role,
    pub class: String,
}

pub fn manifest_rows(catalog: &DatasetCatalog, paths: &BTreeMap<String, PathBuf>, base: &Path) -> Vec<ManifestRow> {
    let path_of = |id: &str| {
        paths
            .get(id)
            .map(|p| p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/"))
            .unwrap_or_default()
    };
    let mut rows = Vec::new();
    for (ids, role) in [(&catalog.normal_train, Role::TrainNormal), (&catalog.normal_test, Role::TestNormal)] {
        rows.extend(ids.iter().map(|id| ManifestRow {
            id: id.clone(),
            path: path_of(id),
            role,
            class: "good".into(),
        }));
    }
    for (class, ids) in &catalog.anomalies {
        rows.extend(ids.iter().map(|id| ManifestRow {
            id: id.clone(),
            path: path_of(id),
            role: Role::Anomaly,
            class: class.clone(),
        }));
    }
    rows
}

pub fn write_manifest(catalog: &DatasetCatalog, paths: &BTreeMap<String, PathBuf>, out: &Path) -> Result<()> {
    let base = out.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_path(out)?;
    for row in manifest_rows(catalog, paths, base) {
        w.serialize(row)?;
    }
    w.flush().map_err(crate::error::io_err(out))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Ingested> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut catalog = DatasetCatalog {
        name: base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        ..DatasetCatalog::default()
    };
    let mut paths = BTreeMap::new();
    let mut r = csv::Reader::from_path(path)?;
    for row in r.deserialize() {
        let row: ManifestRow = row?;
        match row.role {
            Role::TrainNormal => catalog.normal_train.push(row.id.clone()),
            Role::TestNormal => catalog.normal_test.push(row.id.clone()),
            Role::Anomaly => catalog.anomalies.entry(row.class).or_default().push(row.id.clone()),
        }
        if paths.insert(row.id.clone(), base.join(&row.path)).is_some() {
            return Err(Error::Layout(format!("duplicate id `{}` in {}", row.id, path.display())));
        }
    }
    catalog.validate()?;
    Ok(Ingested {
        catalog,
        paths,
        warnings: Vec::new(),
    })
}
