//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/labels.csv                      one row per eye, left before right
//! <dir>/images/<patient>_<laterality>_<source|target>.png
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Camera;
use crate::synthdata::{
    make_paired_dataset, CameraProfile, GeneratorConfig, ImageTensor, LabelSet, Laterality, PairedDataset,
    PairedSample, PatientRecord, Split,
};

pub const LABELS_HEADER: &str = "patient_id,who_cvd_log,age,sbp,tc,bmi,gender,smoking,diabetes,split";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_patients: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub source_profile: CameraProfile,
    pub target_profile: CameraProfile,
    pub n_train: usize,
    pub n_validation: usize,
}

/// Settings of `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_patients: usize,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub source_profile: CameraProfile,
    pub target_profile: CameraProfile,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_patients: 640,
            seed: 0,
            generator: GeneratorConfig::default(),
            source_profile: CameraProfile::tabletop(),
            target_profile: CameraProfile::portable(),
        }
    }
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<PairedDataset> {
        make_paired_dataset(
            self.n_patients,
            &self.source_profile,
            &self.target_profile,
            self.seed,
            &self.generator,
        )
    }
}

pub fn image_path(dir: &Path, patient_id: u64, side: Laterality, camera: Camera) -> PathBuf {
    dir.join("images")
        .join(format!("{patient_id}_{}_{}.png", side.as_str(), camera.as_str()))
}

fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let s = img.size() as u32;
    image::save_buffer(path, &img.to_rgb8(), s, s, image::ColorType::Rgb8)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn read_png(path: &Path, size: usize) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::Data(format!(
            "{} is {}x{}, expected {size}x{size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    ImageTensor::from_rgb8(size, img.as_raw())
}

/// The labels table; rows are grouped by patient, left eye first.
pub fn labels_csv(data: &PairedDataset) -> String {
    let mut out = String::from(LABELS_HEADER);
    out.push('\n');
    for (r, split) in data.records.iter().zip(&data.splits) {
        let reg = r.labels.regression();
        let cls = r.labels.classes();
        for _ in Laterality::BOTH {
            write!(out, "{}", r.patient_id).expect("string write");
            for v in reg {
                write!(out, ",{v}").expect("string write");
            }
            for c in cls {
                write!(out, ",{}", u8::from(c)).expect("string write");
            }
            writeln!(out, ",{}", split.as_str()).expect("string write");
        }
    }
    out
}

/// Writes the dataset; rewriting the same dataset produces identical files.
pub fn write_dataset(dir: &Path, data: &PairedDataset, spec: &DatasetSpec) -> Result<Manifest> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for p in &data.pairs {
        write_png(&image_path(dir, p.patient_id, p.laterality, Camera::Source), &p.source_image)?;
        write_png(&image_path(dir, p.patient_id, p.laterality, Camera::Target), &p.target_image)?;
    }
    let labels = dir.join("labels.csv");
    std::fs::write(&labels, labels_csv(data)).map_err(|e| Error::io(&labels, e))?;
    let n_train = data.splits.iter().filter(|s| **s == Split::Train).count();
    let manifest = Manifest {
        n_patients: data.records.len(),
        seed: spec.seed,
        generator: spec.generator.clone(),
        source_profile: spec.source_profile.clone(),
        target_profile: spec.target_profile.clone(),
        n_train,
        n_validation: data.records.len() - n_train,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn parse_labels(text: &str) -> Result<Vec<(u64, LabelSet, Split)>> {
    let bad = |line: usize, m: &str| Error::Data(format!("labels.csv line {line}: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some(LABELS_HEADER) {
        return Err(Error::Data(format!("labels.csv must start with '{LABELS_HEADER}'")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(n, "expected 10 fields"));
        }
        let id: u64 = f[0].parse().map_err(|_| bad(n, "bad patient id"))?;
        let mut reg = [0f32; 5];
        for k in 0..5 {
            reg[k] = f[1 + k].parse().map_err(|_| bad(n, "bad regression value"))?;
        }
        let mut cls = [false; 3];
        for k in 0..3 {
            cls[k] = match f[6 + k] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(n, "binary labels must be 0 or 1")),
            };
        }
        let labels = LabelSet::from_parts(reg, cls).map_err(|e| bad(n, &e.to_string()))?;
        let split = Split::parse(f[9]).map_err(|_| bad(n, "bad split"))?;
        rows.push((id, labels, split));
    }
    Ok(rows)
}

/// Loads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(PairedDataset, Manifest)> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
    };
    let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)
        .map_err(|e| Error::Data(format!("bad manifest.json: {e}")))?;
    let rows = parse_labels(&read("labels.csv")?)?;
    if rows.len() != 2 * manifest.n_patients {
        return Err(Error::Data(format!(
            "labels.csv has {} rows, expected {}",
            rows.len(),
            2 * manifest.n_patients
        )));
    }
    let size = manifest.generator.image_size;
    let mut records = Vec::with_capacity(manifest.n_patients);
    let mut splits = Vec::with_capacity(manifest.n_patients);
    let mut pairs = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(2) {
        let (id, labels, split) = chunk[0];
        if chunk[1] != chunk[0] {
            return Err(Error::Data(format!("patient {id}: the two eye rows disagree")));
        }
        let mut source = Vec::with_capacity(2);
        for side in Laterality::BOTH {
            let s = read_png(&image_path(dir, id, side, Camera::Source), size)?;
            let t = read_png(&image_path(dir, id, side, Camera::Target), size)?;
            source.push(s.clone());
            pairs.push(PairedSample {
                patient_id: id,
                laterality: side,
                source_image: s,
                target_image: t,
            });
        }
        let right = source.pop().expect("two eyes");
        let left = source.pop().expect("two eyes");
        records.push(PatientRecord {
            patient_id: id,
            left,
            right,
            labels,
            latents: None,
        });
        splits.push(split);
    }
    Ok((PairedDataset { records, pairs, splits }, manifest))
}
