//! The synthetic pre-train / adapt / evaluate benchmark grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use ndarray::Array2;

use crate::adaptor::{
    cache_pairs, pair_consistency, train_adaptor_cached, AdaptConfig, AdaptLoss, Adaptor, AdaptorVariant, CachedPair,
};
use crate::augment::AugmentConfig;
use crate::backbone::{Backbone, VitConfig};
use crate::clfa::{evaluate_tasks, pretrain, BranchVariant, PretrainConfig, TaskWeights};
use crate::error::{Error, Result};
use crate::metrics::{mk_mmd, Camera, FeatureBatch, FeatureMeta};
use crate::optim::LrSchedule;
use crate::seed::derive_seed;
use crate::synthdata::{
    make_paired_dataset, CameraProfile, GeneratorConfig, PairedDataset, PairedSample, Split, CLASSIFICATION_TASKS,
    REGRESSION_TASKS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub n_patients: usize,
    pub generator: GeneratorConfig,
    pub source_profile: CameraProfile,
    pub target_profile: CameraProfile,
    pub model: VitConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_patients: 640,
            generator: GeneratorConfig::default(),
            source_profile: CameraProfile::tabletop(),
            target_profile: CameraProfile::portable(),
            model: VitConfig {
                image_size: 64,
                patch_size: 8,
                embed_dim: 32,
                depth: 2,
                heads: 2,
                mlp_ratio: 2,
            },
            pretrain: PretrainConfig {
                learning_rate: 1e-3,
                epochs: 30,
                schedule: LrSchedule::Cosine,
                weights: TaskWeights::reweighted(),
                augment: AugmentConfig::disabled(),
                ..PretrainConfig::default()
            },
            adapt: AdaptConfig {
                learning_rate: 3e-3,
                schedule: LrSchedule::Cosine,
                ..AdaptConfig::default()
            },
            seeds: vec![0, 1, 2],
            data_seed: 2024,
        }
    }
}

/// One (pre-training branch, adaptor variant, adaptation loss) combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub model_variant: BranchVariant,
    pub adaptor_variant: AdaptorVariant,
    pub loss_variant: AdaptLoss,
}

impl Cell {
    pub fn new(model_variant: BranchVariant, adaptor_variant: AdaptorVariant, loss_variant: AdaptLoss) -> Self {
        Self {
            model_variant,
            adaptor_variant,
            loss_variant,
        }
    }

    pub fn key(&self) -> String {
        format!(
            "{}/{}/{}",
            self.model_variant.as_str(),
            self.adaptor_variant.as_str(),
            self.loss_variant.as_str()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub seed: u64,
    pub cell: String,
    pub r2_who_cvd: Option<f64>,
    pub consistency_pre: f64,
    pub consistency_post: f64,
}

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub results: Vec<CellResult>,
    /// Per cell: median consistency before and after adaptation.
    pub medians: BTreeMap<String, (f64, f64)>,
}

impl BenchmarkReport {
    pub fn median_post(&self, cell: &Cell) -> Option<f64> {
        self.medians.get(&cell.key()).map(|m| m.1)
    }

    pub fn median_pre(&self, cell: &Cell) -> Option<f64> {
        self.medians.get(&cell.key()).map(|m| m.0)
    }
}

/// Runs every cell for every seed. Each seed renders its own dataset, and
/// pre-trains each required branch variant once.
pub fn run_benchmark(config: &BenchmarkConfig, cells: &[Cell], mut log: impl FnMut(&str)) -> Result<BenchmarkReport> {
    if cells.is_empty() || config.seeds.is_empty() {
        return Err(Error::Config("benchmark needs at least one cell and one seed".into()));
    }
    let mut results = Vec::new();
    for &seed in &config.seeds {
        let data = make_paired_dataset(
            config.n_patients,
            &config.source_profile,
            &config.target_profile,
            derive_seed(&[config.data_seed, seed]),
            &config.generator,
        )?;
        let train = data.records_in(Split::Train);
        let val = data.records_in(Split::Validation);
        let train_pairs = data.pairs_in(Split::Train);
        let val_pairs = data.pairs_in(Split::Validation);

        let mut variants: Vec<BranchVariant> = cells.iter().map(|c| c.model_variant).collect();
        variants.sort_by_key(|v| v.as_str());
        variants.dedup();
        for variant in variants {
            let pcfg = PretrainConfig {
                variant,
                seed,
                ..config.pretrain.clone()
            };
            let outcome = pretrain(&train, &val, &config.model, &pcfg)?;
            let backbone = outcome.state.model.backbone;
            let r2_cvd = evaluate_tasks(&backbone, &val)?.r2[0];
            let train_cache = cache_pairs(&backbone, &train_pairs)?;
            let val_cache = cache_pairs(&backbone, &val_pairs)?;
            let pre = pair_consistency(&backbone, None, &val_cache)?;
            log(&format!("seed {seed} {}: r2_cvd {:?} consistency_pre {pre:.4}", variant.as_str(), r2_cvd));

            for cell in cells.iter().filter(|c| c.model_variant == variant) {
                let acfg = AdaptConfig {
                    variant: cell.adaptor_variant,
                    loss_variant: cell.loss_variant,
                    seed,
                    ..config.adapt.clone()
                };
                let adapted = train_adaptor_cached(&backbone, &train_cache, &val_cache, &acfg)?;
                let post = pair_consistency(&backbone, Some(&adapted.adaptor), &val_cache)?;
                log(&format!("seed {seed} {}: consistency_post {post:.4}", cell.key()));
                results.push(CellResult {
                    seed,
                    cell: cell.key(),
                    r2_who_cvd: r2_cvd,
                    consistency_pre: pre,
                    consistency_post: post,
                });
            }
        }
    }
    let mut medians = BTreeMap::new();
    for cell in cells {
        let key = cell.key();
        let rows: Vec<&CellResult> = results.iter().filter(|r| r.cell == key).collect();
        let pre: Vec<f64> = rows.iter().map(|r| r.consistency_pre).collect();
        let post: Vec<f64> = rows.iter().map(|r| r.consistency_post).collect();
        if let (Some(a), Some(b)) = (median(&pre), median(&post)) {
            medians.insert(key, (a, b));
        }
    }
    Ok(BenchmarkReport { results, medians })
}

/// The cells used by the directional-trend checks.
pub fn trend_cells() -> Vec<Cell> {
    vec![
        Cell::new(BranchVariant::SupervisedOnly, AdaptorVariant::SaPlusMlp, AdaptLoss::Cvd),
        Cell::new(BranchVariant::Clfa, AdaptorVariant::SaPlusMlp, AdaptLoss::Cvd),
        Cell::new(BranchVariant::Clfa, AdaptorVariant::MlpOnly, AdaptLoss::Cvd),
        Cell::new(BranchVariant::Clfa, AdaptorVariant::SaOnly, AdaptLoss::Cvd),
    ]
}

/// MK-MMD between pre-adaptation feature sets: `t` and `m` are the
/// validation pairs under the source and target camera, `ustar` is a
/// same-sized sample of training-split source images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub t_m: f64,
    pub ustar_m: f64,
    pub ustar_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub model_variant: String,
    pub adaptor_variant: String,
    pub loss_variant: String,
    pub r2: BTreeMap<String, Option<f64>>,
    pub accuracy: BTreeMap<String, Option<f64>>,
    pub consistency_r2_pre: f64,
    pub consistency_r2_post: f64,
    pub mkmmd: MmdReport,
}

impl EvalEntry {
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.model_variant, self.adaptor_variant, self.loss_variant)
    }
}

fn cls_rows(cache: &[CachedPair<f32>], source: bool) -> Array2<f64> {
    let d = cache.first().map_or(0, |p| p.z_s.len());
    let mut out = Array2::zeros((cache.len(), d));
    for (mut row, p) in out.rows_mut().into_iter().zip(cache) {
        let z = if source { p.z_s.view() } else { p.target_tokens.cls_token() };
        row.assign(&z.mapv(f64::from));
    }
    out
}

/// Validation-split metrics of one backbone, optionally with an adaptor on
/// the target path. Without an adaptor the post-adaptation consistency is
/// the pre-adaptation one.
pub fn evaluate_model(
    data: &PairedDataset,
    backbone: &Backbone<f32>,
    model_variant: BranchVariant,
    adaptor: Option<(&Adaptor<f32>, AdaptLoss)>,
) -> Result<EvalEntry> {
    let val_pairs = data.pairs_in(Split::Validation);
    let train_pairs = data.pairs_in(Split::Train);
    if val_pairs.len() < 2 || train_pairs.len() < 2 {
        return Err(Error::Data("evaluation needs at least two pairs in each split".into()));
    }
    let scores = evaluate_tasks(backbone, &data.records_in(Split::Validation))?;
    let val = cache_pairs(backbone, &val_pairs)?;
    let ustar = cache_pairs(backbone, &train_pairs[..val_pairs.len().min(train_pairs.len())])?;
    let pre = pair_consistency(backbone, None, &val)?;
    let post = match adaptor {
        Some((a, _)) => pair_consistency(backbone, Some(a), &val)?,
        None => pre,
    };
    let (t, m, u) = (cls_rows(&val, true), cls_rows(&val, false), cls_rows(&ustar, true));
    Ok(EvalEntry {
        model_variant: model_variant.as_str().to_string(),
        adaptor_variant: adaptor.map_or("none", |(a, _)| a.variant.as_str()).to_string(),
        loss_variant: adaptor.map_or("none", |(_, l)| l.as_str()).to_string(),
        r2: REGRESSION_TASKS.iter().zip(scores.r2).map(|(k, v)| (k.to_string(), v)).collect(),
        accuracy: CLASSIFICATION_TASKS
            .iter()
            .zip(scores.accuracy)
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        consistency_r2_pre: pre,
        consistency_r2_post: post,
        mkmmd: MmdReport {
            t_m: mk_mmd(t.view(), m.view(), None)?,
            ustar_m: mk_mmd(u.view(), m.view(), None)?,
            ustar_t: mk_mmd(u.view(), t.view(), None)?,
        },
    })
}

/// Class-token features of each pair under both cameras; target rows pass
/// through the adaptor when one is given.
pub fn export_features(
    backbone: &Backbone<f32>,
    adaptor: Option<&Adaptor<f32>>,
    pairs: &[&PairedSample],
) -> Result<FeatureBatch> {
    let d = backbone.embed_dim();
    let mut rows = Array2::zeros((2 * pairs.len(), d));
    let mut meta = Vec::with_capacity(2 * pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let source = backbone.extract_features(&p.source_image)?;
        let target = backbone.extract_features(&p.target_image)?;
        let zt = match adaptor {
            Some(a) => a.adapt(&target)?,
            None => target.cls_token().to_owned(),
        };
        rows.row_mut(2 * i).assign(&source.cls_token().mapv(f64::from));
        rows.row_mut(2 * i + 1).assign(&zt.mapv(f64::from));
        for camera in [Camera::Source, Camera::Target] {
            meta.push(FeatureMeta {
                patient_id: p.patient_id,
                laterality: p.laterality,
                camera,
            });
        }
    }
    FeatureBatch::new(rows, meta)
}
