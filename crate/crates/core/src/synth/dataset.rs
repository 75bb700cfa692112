use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Benchmark, Provenance, SamplePair};
use crate::adtf::{read_field, write_field};
use crate::error::{Error, Result};
use crate::operators::TreatmentContext;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub dir: String,
    pub fields: Vec<String>,
    pub treatment: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u64,
    pub classes: usize,
    pub tumor_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<Benchmark>,
    pub pairs: Vec<PairEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn fold_of(index: usize, folds: usize) -> usize {
    index % folds
}

/// `(train, held_out)` sample indices for `fold`.
pub fn split_folds(n: usize, folds: usize, fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| fold_of(i, folds) != fold)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Header {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Writes `manifest.json` and one `pair_{i:04}` directory per pair.
pub fn write_dataset(
    pairs: &[SamplePair],
    dir: &Path,
    tumor_class: usize,
    benchmark: Option<&Benchmark>,
) -> Result<DatasetManifest> {
    let classes = pairs.first().map_or(0, |p| p.baseline.num_classes());
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        p.validate()?;
        if p.baseline.num_classes() != classes {
            return Err(Error::ShapeMismatch(format!("pair {i} has {} classes", p.baseline.num_classes())));
        }
        let name = format!("pair_{i:04}");
        let pd = dir.join(&name);
        fs::create_dir_all(&pd).map_err(|e| Error::io(&pd, e))?;
        write_field(&pd.join("t0.adtf"), &p.baseline)?;
        write_field(&pd.join("t1.adtf"), &p.target)?;
        write_json(&pd.join("treatment.json"), &p.treatment)?;
        entries.push(PairEntry {
            dir: name,
            fields: vec!["t0.adtf".into(), "t1.adtf".into()],
            treatment: "treatment.json".into(),
            provenance: p.provenance.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        classes,
        tumor_class,
        benchmark: benchmark.cloned(),
        pairs: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = read_json(&mpath)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            path: mpath,
            found: manifest.version,
        });
    }
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for e in &manifest.pairs {
        let pd = dir.join(&e.dir);
        if e.fields.len() != 2 {
            return Err(Error::Header {
                path: mpath.clone(),
                msg: format!("{} lists {} fields, expected 2", e.dir, e.fields.len()),
            });
        }
        let baseline = read_field(&pd.join(&e.fields[0]))?;
        let target = read_field(&pd.join(&e.fields[1]))?;
        let treatment: TreatmentContext = read_json(&pd.join(&e.treatment))?;
        let pair = SamplePair {
            baseline,
            target,
            treatment,
            provenance: e.provenance.clone(),
        };
        pair.validate()?;
        if pair.baseline.num_classes() != manifest.classes {
            return Err(Error::ShapeMismatch(format!("{} does not have {} classes", e.dir, manifest.classes)));
        }
        pairs.push(pair);
    }
    Ok(Dataset { manifest, pairs })
}
