//! Multi-subject datasets: manifest-driven loading, leave-one-subject-out
//! splits and a synthetic covariate-shift generator.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub mod format;
mod synthetic;

pub use synthetic::{generate_synthetic, ClassTone, DomainTruth, GroundTruth, SyntheticConfig};

pub const MANIFEST_VERSION: u32 = 1;
pub const DROWSY: usize = 0;
pub const ALERT: usize = 1;

pub fn default_class_names() -> Vec<String> {
    vec!["drowsy".into(), "alert".into()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct EegSample {
    /// `[C, T]`.
    pub signal: Tensor,
    pub label: usize,
    pub subject: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub file: PathBuf,
    pub labels: PathBuf,
    pub sample_count: usize,
    /// SHA-256 of the signal file, hex encoded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub channels: usize,
    pub timesteps: usize,
    pub sample_rate_hz: f64,
    #[serde(default = "default_class_names")]
    pub class_names: Vec<String>,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.channels == 0 || self.timesteps == 0 {
            return Err(Error::Format("channels and timesteps must be positive".into()));
        }
        if self.class_names.len() != 2 {
            return Err(Error::Format(format!(
                "binary task expects 2 class names, got {}",
                self.class_names.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Format(format!("duplicate subject id '{}'", s.id)));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("manifest: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub timesteps: usize,
    pub sample_rate_hz: f64,
    pub class_names: Vec<String>,
    /// Grouped by subject, subjects in manifest (or generation) order.
    pub samples: Vec<EegSample>,
}

impl Dataset {
    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.subject.as_str()))
            .map(|s| s.subject.clone())
            .collect()
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Loads every subject listed in the manifest. Any mismatch aborts the whole
/// load; no partial dataset is returned.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = DatasetManifest::parse(&text)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let (c, t) = (manifest.channels, manifest.timesteps);
    let mut samples = Vec::new();
    for entry in &manifest.subjects {
        let sig_path = root.join(&entry.file);
        let bytes = format::read_file(&sig_path)?;
        if let Some(want) = &entry.checksum {
            let got = format::sha256_hex(&bytes);
            if !got.eq_ignore_ascii_case(want) {
                return Err(Error::Ingestion {
                    file: sig_path,
                    offset: 0,
                    reason: format!("checksum {got} does not match manifest {want}"),
                });
            }
        }
        let values = format::decode_signals(&sig_path, &bytes, entry.sample_count, c, t)?;
        let lab_path = root.join(&entry.labels);
        let labels = format::decode_labels(&lab_path, &format::read_file(&lab_path)?, entry.sample_count)?;
        for (chunk, label) in values.chunks_exact(c * t).zip(labels) {
            let signal = Tensor::new(vec![c, t], chunk.iter().map(|&v| v as f64).collect())?;
            samples.push(EegSample {
                signal,
                label,
                subject: entry.id.clone(),
            });
        }
    }
    Ok(Dataset {
        channels: c,
        timesteps: t,
        sample_rate_hz: manifest.sample_rate_hz,
        class_names: manifest.class_names,
        samples,
    })
}

/// Writes one signal and one label file per subject plus `manifest.toml`
/// into `dir`; returns the manifest path. Values are stored as `f32`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, t) = (dataset.channels, dataset.timesteps);
    let mut subjects = Vec::new();
    for id in dataset.subjects() {
        let own: Vec<&EegSample> = dataset.samples.iter().filter(|s| s.subject == id).collect();
        let mut values = Vec::with_capacity(own.len() * c * t);
        for s in &own {
            if s.signal.shape() != [c, t] {
                return Err(Error::Dimension(format!(
                    "sample of '{id}' has shape {:?}, dataset is [{c}, {t}]",
                    s.signal.shape()
                )));
            }
            values.extend(s.signal.data().iter().map(|&v| v as f32));
        }
        let bytes = format::encode_signals(own.len(), c, t, &values);
        let file = PathBuf::from(format!("{id}.eeg"));
        let labels = PathBuf::from(format!("{id}.labels"));
        let label_bytes: Vec<u8> = own.iter().map(|s| s.label as u8).collect();
        let sig_path = dir.join(&file);
        fs::write(&sig_path, &bytes).map_err(|e| Error::io(&sig_path, e))?;
        let lab_path = dir.join(&labels);
        fs::write(&lab_path, &label_bytes).map_err(|e| Error::io(&lab_path, e))?;
        subjects.push(SubjectEntry {
            id,
            file,
            labels,
            sample_count: own.len(),
            checksum: Some(format::sha256_hex(&bytes)),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        channels: c,
        timesteps: t,
        sample_rate_hz: dataset.sample_rate_hz,
        class_names: dataset.class_names.clone(),
        subjects,
    };
    let path = dir.join("manifest.toml");
    fs::write(&path, manifest.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct LosoFold<'a> {
    pub held_out: String,
    pub train: Vec<&'a EegSample>,
    pub test: Vec<&'a EegSample>,
}

/// One fold per subject, ordered by subject id.
pub fn split_loso(samples: &[EegSample]) -> Result<Vec<LosoFold<'_>>> {
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.subject.as_str()).collect();
    if ids.len() < 2 {
        return Err(Error::Split(format!(
            "leave-one-subject-out needs at least 2 subjects, found {}",
            ids.len()
        )));
    }
    Ok(ids
        .into_iter()
        .map(|id| {
            let (test, train) = samples.iter().partition(|s| s.subject == id);
            LosoFold {
                held_out: id.to_string(),
                train,
                test,
            }
        })
        .collect())
}
