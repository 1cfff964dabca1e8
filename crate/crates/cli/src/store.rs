//! Dataset, sidecar and result persistence.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kseg::io::{load_cvol, save_cvol, CvolData, CvolMeta, Stamp};
use kseg::kspace::Timepoint;
use kseg::phantom::{Exam, Lesion};
use kseg::{Error, Result};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Provenance record written next to CSV and JSON artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub kind: String,
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

pub fn write_sidecar(artifact: &Path, stamp: &Stamp, kind: &str) -> Result<()> {
    let meta = Sidecar {
        stamp: stamp.clone(),
        kind: kind.to_string(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&sidecar_path(artifact), json + "\n")
}

pub fn read_sidecar(artifact: &Path) -> Result<Sidecar> {
    let path = sidecar_path(artifact);
    let bytes = read_file(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_index: usize,
    pub lesion_voxels: usize,
    pub lesions: Vec<Lesion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub shape: (usize, usize, usize),
    pub patients: Vec<PatientEntry>,
}

const MANIFEST: &str = "manifest.json";

fn volume_path(dir: &Path, patient: usize, part: &str) -> PathBuf {
    dir.join(format!("patient_{patient:03}_{part}.cvol"))
}

pub fn save_dataset(dir: &Path, exams: &[Exam], stamp: &Stamp) -> Result<()> {
    ensure_dir(dir)?;
    let mut patients = Vec::new();
    for e in exams {
        let meta = |timepoint: Option<Timepoint>, tag: &str| CvolMeta {
            patient_index: Some(e.patient_index),
            domain_tag: Some(tag.to_string()),
            timepoint,
            stamp: Some(stamp.clone()),
        };
        let tag = e.pre.domain().as_str();
        save_cvol(&volume_path(dir, e.patient_index, "pre"), &CvolData::Complex(e.pre.clone()), &meta(None, tag))?;
        save_cvol(
            &volume_path(dir, e.patient_index, "post1"),
            &CvolData::Complex(e.post1.clone()),
            &meta(Some(Timepoint::Post1), tag),
        )?;
        save_cvol(
            &volume_path(dir, e.patient_index, "post2"),
            &CvolData::Complex(e.post2.clone()),
            &meta(Some(Timepoint::Post2), tag),
        )?;
        save_cvol(
            &volume_path(dir, e.patient_index, "mask"),
            &CvolData::Mask {
                dims: e.shape(),
                data: e.lesion_mask.clone(),
            },
            &meta(None, "mask"),
        )?;
        patients.push(PatientEntry {
            patient_index: e.patient_index,
            lesion_voxels: e.lesion_voxels(),
            lesions: e.lesions.clone(),
        });
    }
    let manifest = Manifest {
        stamp: stamp.clone(),
        shape: exams.first().map(|e| e.shape()).unwrap_or_default(),
        patients,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join(MANIFEST), json + "\n")
}

pub fn load_manifest(dir: &Path, stamp: &Stamp) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::io(
            &path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found; run `kseg phantom` first"),
        ));
    }
    let manifest: Manifest =
        serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    stamp.check(&manifest.stamp, "the dataset")?;
    Ok(manifest)
}

fn load_complex(path: &Path, stamp: &Stamp) -> Result<kseg::kspace::ComplexVolume> {
    let (data, meta) = load_cvol(path)?;
    if let Some(s) = &meta.stamp {
        stamp.check(s, &path.display().to_string())?;
    }
    match data {
        CvolData::Complex(v) => Ok(v),
        CvolData::Mask { .. } => Err(Error::Format(format!("{}: expected a complex volume", path.display()))),
    }
}

pub fn load_exam(dir: &Path, entry: &PatientEntry, stamp: &Stamp) -> Result<Exam> {
    let p = entry.patient_index;
    let mask_path = volume_path(dir, p, "mask");
    let lesion_mask = match load_cvol(&mask_path)?.0 {
        CvolData::Mask { data, .. } => data,
        CvolData::Complex(_) => return Err(Error::Format(format!("{}: expected a mask", mask_path.display()))),
    };
    let exam = Exam {
        patient_index: p,
        pre: load_complex(&volume_path(dir, p, "pre"), stamp)?,
        post1: load_complex(&volume_path(dir, p, "post1"), stamp)?,
        post2: load_complex(&volume_path(dir, p, "post2"), stamp)?,
        lesion_mask,
        lesions: entry.lesions.clone(),
    };
    if exam.lesion_mask.len() != exam.pre.len() {
        return Err(Error::Format(format!("patient {p}: mask and volume sizes differ")));
    }
    Ok(exam)
}

pub fn load_dataset(dir: &Path, stamp: &Stamp) -> Result<Vec<Exam>> {
    let manifest = load_manifest(dir, stamp)?;
    manifest.patients.iter().map(|p| load_exam(dir, p, stamp)).collect()
}
