//! Paired CT/CBCT collections: one aligned CT per id and one CBCT per
//! (quality tier, id). Built from phantoms or read from a JSON manifest
//! listing volume files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{load_volume, save_volume};
use crate::phantom::TierSamples;
use crate::volume::{downscale2, normalize, Domain, PairedSample, Volume};

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    ids: Vec<String>,
    qualities: Vec<u32>,
    cts: BTreeMap<String, Volume>,
    cbcts: BTreeMap<(u32, String), Volume>,
}

impl Dataset {
    pub fn from_tiers(tiers: Vec<TierSamples>) -> Result<Self> {
        let mut ds = Dataset::default();
        for t in tiers {
            for s in t.samples {
                ds.insert(s)?;
            }
        }
        ds.finish()
    }

    pub fn from_samples(samples: Vec<PairedSample>) -> Result<Self> {
        let mut ds = Dataset::default();
        for s in samples {
            ds.insert(s)?;
        }
        ds.finish()
    }

    fn insert(&mut self, s: PairedSample) -> Result<()> {
        match self.cts.get(&s.id) {
            Some(ct) if ct != &s.ct => {
                return Err(Error::Format(format!("sample {} has different CTs across tiers", s.id)));
            }
            Some(_) => {}
            None => {
                self.cts.insert(s.id.clone(), s.ct);
            }
        }
        if self.cbcts.insert((s.quality, s.id.clone()), s.cbct).is_some() {
            return Err(Error::Format(format!("duplicate sample {} at quality {}", s.id, s.quality)));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<Self> {
        self.ids = self.cts.keys().cloned().collect();
        self.qualities = self.cbcts.keys().map(|(q, _)| *q).collect();
        self.qualities.dedup();
        if self.ids.is_empty() {
            return Err(Error::Parameter("dataset is empty".into()));
        }
        for q in &self.qualities {
            for id in &self.ids {
                if !self.cbcts.contains_key(&(*q, id.clone())) {
                    return Err(Error::Format(format!("quality {q} is missing sample {id}")));
                }
            }
        }
        Ok(self)
    }

    /// Sample ids in sorted order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Quality labels in ascending order.
    pub fn qualities(&self) -> &[u32] {
        &self.qualities
    }

    pub fn ct(&self, id: &str) -> Result<&Volume> {
        self.cts
            .get(id)
            .ok_or_else(|| Error::Parameter(format!("unknown sample id {id}")))
    }

    pub fn cbct(&self, quality: u32, id: &str) -> Result<&Volume> {
        self.cbcts
            .get(&(quality, id.to_string()))
            .ok_or_else(|| Error::Parameter(format!("no sample {id} at quality {quality}")))
    }

    pub fn paired(&self, quality: u32, id: &str) -> Result<PairedSample> {
        PairedSample::new(id, self.ct(id)?.clone(), self.cbct(quality, id)?.clone(), quality)
    }
}

/// On-disk listing of paired volumes; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub ids: Vec<String>,
    #[serde(default)]
    pub tiers: Vec<u32>,
    pub samples: Vec<ManifestEntry>,
    /// Free-form record of how the volumes were produced (seeds, config).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub quality: u32,
    pub ct: PathBuf,
    pub cbct: PathBuf,
}

/// Preprocessing applied to volumes read from a manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// HU window used for volumes stored in HU.
    pub window: (f64, f64),
    /// Halve every dimension after normalization.
    pub downscale: bool,
}

fn prepare(v: Volume, opts: &LoadOptions) -> Result<Volume> {
    let v = match v.domain() {
        Domain::Hu => normalize(&v, opts.window)?,
        Domain::Normalized => v,
    };
    if opts.downscale {
        downscale2(&v)
    } else {
        Ok(v)
    }
}

pub fn load_dataset(manifest_path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = manifest_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut ct_cache: BTreeMap<PathBuf, Volume> = BTreeMap::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let ct_path = base.join(&e.ct);
        let ct = match ct_cache.get(&ct_path) {
            Some(v) => v.clone(),
            None => {
                let v = prepare(load_volume(&ct_path)?, opts)?;
                ct_cache.insert(ct_path, v.clone());
                v
            }
        };
        let cbct = prepare(load_volume(base.join(&e.cbct))?, opts)?;
        samples.push(PairedSample::new(e.id.clone(), ct, cbct, e.quality)?);
    }
    Dataset::from_samples(samples)
}

pub const MANIFEST_FILE: &str = "dataset.json";

/// Writes every volume under `dir` and returns the manifest path.
/// Layout: `<id>/ct.nii.gz`, `<id>/cbct_<quality>.nii.gz`, `dataset.json`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>, generator: Option<serde_json::Value>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut entries = Vec::new();
    for id in ds.ids() {
        let sdir = dir.join(id);
        std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        save_volume(ds.ct(id)?, sdir.join("ct.nii.gz"))?;
        for &q in ds.qualities() {
            let name = format!("cbct_{q}.nii.gz");
            save_volume(ds.cbct(q, id)?, sdir.join(&name))?;
            entries.push(ManifestEntry {
                id: id.clone(),
                quality: q,
                ct: PathBuf::from(id).join("ct.nii.gz"),
                cbct: PathBuf::from(id).join(name),
            });
        }
    }
    let manifest = DatasetManifest {
        ids: ds.ids().to_vec(),
        tiers: ds.qualities().to_vec(),
        samples: entries,
        generator,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    crate::train::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_dataset, default_tiers, PhantomConfig};

    fn tiny() -> Dataset {
        let tiers: Vec<_> = default_tiers().into_iter().filter(|t| t.label == 32 || t.label == 256).collect();
        Dataset::from_tiers(build_dataset(3, &PhantomConfig::default(), &tiers).unwrap()).unwrap()
    }

    #[test]
    fn indexes_ids_and_qualities() {
        let ds = tiny();
        assert_eq!(ds.ids(), ["phantom_000", "phantom_001", "phantom_002"]);
        assert_eq!(ds.qualities(), [32, 256]);
        assert!(ds.cbct(64, "phantom_000").is_err());
        assert_eq!(ds.paired(32, "phantom_001").unwrap().quality, 32);
    }

    #[test]
    fn save_and_load_round_trip() {
        let ds = tiny();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path(), None).unwrap();
        let opts = LoadOptions {
            window: crate::volume::DEFAULT_HU_WINDOW,
            downscale: false,
        };
        let back = load_dataset(&manifest, &opts).unwrap();
        assert_eq!(back.ids(), ds.ids());
        for id in ds.ids() {
            assert_eq!(back.ct(id).unwrap().data(), ds.ct(id).unwrap().data());
            assert_eq!(back.cbct(256, id).unwrap().data(), ds.cbct(256, id).unwrap().data());
        }
        let half = load_dataset(&manifest, &LoadOptions { downscale: true, ..opts }).unwrap();
        assert_eq!(half.ct("phantom_000").unwrap().dims(), [16, 16, 16]);
    }

    #[test]
    fn incomplete_tiers_are_rejected() {
        let ds = tiny();
        let mut samples = vec![ds.paired(32, "phantom_000").unwrap(), ds.paired(32, "phantom_001").unwrap()];
        samples.push(ds.paired(256, "phantom_000").unwrap());
        assert!(matches!(Dataset::from_samples(samples), Err(Error::Format(_))));
    }
}
