//! Feature store: a manifest of labeled clips plus their in-memory feature
//! matrices, mirrored on disk as `store.toml`, `manifest.csv`, and one
//! `DFTR` file per clip.

use crate::data::feature_io::{load_feature_file, write_feature_file};
use crate::error::{config_err, data_err, Error, Result};
use crate::numerics::Tensor;
use crate::threads::map_ordered;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const META_FILE: &str = "store.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => data_err(format!("unknown split '{other}' (expected train or test)")),
        }
    }
}

/// One labeled clip in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub scene_label: usize,
    pub domain_label: usize,
    pub split: Split,
    pub feature_path: String,
}

/// Declared tensor and label cardinalities of a store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDims {
    pub time_frames: usize,
    pub mel_bands: usize,
    pub channels: usize,
    pub scene_classes: usize,
    pub domain_classes: usize,
}

/// Echo of the synthetic-generator inputs, written next to the manifest so
/// runs are reproducible and tests can consult the imposed gain curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEcho {
    pub scenes: usize,
    pub domains: usize,
    pub clips_per_cell: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub gain_strength: f64,
    /// Per-domain multiplicative band gain, `domain_gains[d][f]`.
    pub domain_gains: Vec<Vec<f64>>,
}

/// Marker recorded when a store was produced by band-wise adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEcho {
    pub source_domain: usize,
    pub per_device: bool,
    pub transductive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub dims: StoreDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorEcho>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptation: Option<AdaptationEcho>,
}

/// Manifest plus loaded features. Read-only after construction; adaptation
/// produces a transformed copy.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    meta: StoreMeta,
    records: Vec<ClipRecord>,
    features: Vec<Tensor<f32>>,
}

impl FeatureStore {
    pub fn from_parts(
        meta: StoreMeta,
        records: Vec<ClipRecord>,
        features: Vec<Tensor<f32>>,
    ) -> Result<Self> {
        let store = FeatureStore {
            meta,
            records,
            features,
        };
        store.validate()?;
        Ok(store)
    }

    fn validate(&self) -> Result<()> {
        if self.records.len() != self.features.len() {
            return data_err(format!(
                "manifest has {} records but {} feature matrices",
                self.records.len(),
                self.features.len()
            ));
        }
        if self.meta.dims.channels != 1 {
            return config_err(format!(
                "only single-channel features are supported, got {}",
                self.meta.dims.channels
            ));
        }
        let mut seen = std::collections::HashSet::new();
        let expected = [self.meta.dims.time_frames, self.meta.dims.mel_bands];
        for (record, feature) in self.records.iter().zip(&self.features) {
            if !seen.insert(record.clip_id.as_str()) {
                return data_err(format!("duplicate clip_id '{}'", record.clip_id));
            }
            if record.scene_label >= self.meta.dims.scene_classes {
                return data_err(format!(
                    "clip '{}' scene label {} out of range for {} classes",
                    record.clip_id, record.scene_label, self.meta.dims.scene_classes
                ));
            }
            if record.domain_label >= self.meta.dims.domain_classes {
                return data_err(format!(
                    "clip '{}' domain label {} out of range for {} domains",
                    record.clip_id, record.domain_label, self.meta.dims.domain_classes
                ));
            }
            if feature.shape() != expected {
                return data_err(format!(
                    "clip '{}' has extents {:?}, store declares {:?}",
                    record.clip_id,
                    feature.shape(),
                    expected
                ));
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn dims(&self) -> &StoreDims {
        &self.meta.dims
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.records
    }

    pub fn feature(&self, index: usize) -> &Tensor<f32> {
        &self.features[index]
    }

    /// Clip indices for one (domain predicate, split) selection, in manifest
    /// order.
    pub fn select(&self, domain: impl Fn(usize) -> bool, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split && domain(r.domain_label))
            .map(|(i, _)| i)
            .collect()
    }

    /// A copy with one feature matrix replaced (used by adaptation).
    pub fn with_features(&self, features: Vec<Tensor<f32>>) -> Result<Self> {
        Self::from_parts(self.meta.clone(), self.records.clone(), features)
    }

    /// Annotate the metadata with an adaptation marker.
    pub fn with_adaptation_echo(mut self, echo: AdaptationEcho) -> Self {
        self.meta.adaptation = Some(echo);
        self
    }

    pub fn save(&self, dir: &Path, overwrite: bool) -> Result<()> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() && !overwrite {
            return data_err(format!(
                "output directory {} already holds a store (pass the overwrite flag to replace it)",
                dir.display()
            ));
        }
        std::fs::create_dir_all(dir)?;
        let meta_text = toml::to_string_pretty(&self.meta)
            .map_err(|e| Error::Data(format!("cannot serialize store metadata: {e}")))?;
        std::fs::write(dir.join(META_FILE), meta_text)?;

        let mut writer = csv::Writer::from_path(&manifest_path)
            .map_err(|e| Error::Data(format!("cannot write manifest: {e}")))?;
        for record in &self.records {
            writer
                .serialize(record)
                .map_err(|e| Error::Data(format!("cannot write manifest row: {e}")))?;
        }
        writer
            .flush()
            .map_err(|e| Error::Data(format!("cannot flush manifest: {e}")))?;

        for (record, feature) in self.records.iter().zip(&self.features) {
            write_feature_file(&dir.join(&record.feature_path), feature)?;
        }
        Ok(())
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta_text = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
        let meta: StoreMeta = toml::from_str(&meta_text)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;

        let manifest_path = dir.join(MANIFEST_FILE);
        let mut reader = csv::Reader::from_path(&manifest_path)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
        let mut records = Vec::new();
        for row in reader.deserialize::<ClipRecord>() {
            records.push(row.map_err(|e| {
                Error::Data(format!("{}: malformed row: {e}", manifest_path.display()))
            })?);
        }

        let paths: Vec<PathBuf> = records.iter().map(|r| dir.join(&r.feature_path)).collect();
        let features = map_ordered(&paths, |p| load_feature_file(p))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(meta, records, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_store() -> FeatureStore {
        let dims = StoreDims {
            time_frames: 2,
            mel_bands: 3,
            channels: 1,
            scene_classes: 2,
            domain_classes: 2,
        };
        let records = vec![
            ClipRecord {
                clip_id: "a".into(),
                scene_label: 0,
                domain_label: 0,
                split: Split::Train,
                feature_path: "features/a.dftr".into(),
            },
            ClipRecord {
                clip_id: "b".into(),
                scene_label: 1,
                domain_label: 1,
                split: Split::Test,
                feature_path: "features/b.dftr".into(),
            },
        ];
        let features = vec![
            Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap(),
            Tensor::new(vec![2, 3], vec![2.0; 6]).unwrap(),
        ];
        FeatureStore::from_parts(
            StoreMeta {
                dims,
                generator: None,
                adaptation: None,
            },
            records,
            features,
        )
        .unwrap()
    }

    #[test]
    fn save_open_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let store = toy_store();
        store.save(dir.path(), false).unwrap();
        let loaded = FeatureStore::open(dir.path()).unwrap();
        assert_eq!(loaded.records(), store.records());
        assert_eq!(loaded.dims(), store.dims());
        for i in 0..store.len() {
            assert_eq!(loaded.feature(i).data(), store.feature(i).data());
        }
    }

    #[test]
    fn save_refuses_to_clobber_without_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let store = toy_store();
        store.save(dir.path(), false).unwrap();
        let err = store.save(dir.path(), false).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        store.save(dir.path(), true).unwrap();
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let mut store = toy_store();
        store.records[0].scene_label = 9;
        let err =
            FeatureStore::from_parts(store.meta.clone(), store.records.clone(), store.features)
                .unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("scene label"));
    }

    #[test]
    fn duplicate_clip_ids_are_rejected() {
        let store = toy_store();
        let mut records = store.records().to_vec();
        records[1].clip_id = "a".into();
        let err = FeatureStore::from_parts(
            store.meta().clone(),
            records,
            vec![store.feature(0).clone(), store.feature(1).clone()],
        )
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn select_filters_by_domain_and_split() {
        let store = toy_store();
        assert_eq!(store.select(|d| d == 0, Split::Train), vec![0]);
        assert_eq!(store.select(|d| d != 0, Split::Test), vec![1]);
        assert!(store.select(|d| d != 0, Split::Train).is_empty());
    }
}
