//! Finite-difference checks shared by the gradient tests and the acceptance
//! runner.
//!
//! The 64-bit gradients are compared with 64-bit differences. The 32-bit
//! gradients are compared with differences of the same point evaluated in
//! 64-bit, which keeps the reference free of single-precision cancellation.

use camadapt::adaptor::{adaptor_objective, cache_pairs, AdaptLoss, Adaptor, AdaptorInit, AdaptorVariant, CachedPair};
use camadapt::backbone::{Backbone, Predictions, TokenSet};
use camadapt::clfa::{objective, BranchVariant, EyePair, PretrainModel, TaskWeights, TeacherChoice};
use camadapt::nn::{Mlp2, Parameters, Real};
use camadapt::synthdata::{ImageTensor, LabelSet, Laterality, PairedSample};
use rand::Rng;

use super::{finite_difference_errors, worst};

/// Worst `(tensor, relative error)` at each precision.
#[derive(Clone, Debug)]
pub struct GradErrors {
    pub at_f64: (String, f64),
    pub at_f32: (String, f64),
}

impl GradErrors {
    pub fn check(&self) -> Result<(), String> {
        if self.at_f64.1 <= TOL_F64 && self.at_f32.1 <= TOL_F32 {
            Ok(())
        } else {
            Err(format!(
                "f64 worst {} {:e}, f32 worst {} {:e}",
                self.at_f64.0, self.at_f64.1, self.at_f32.0, self.at_f32.1
            ))
        }
    }
}

pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;
pub const STEP: f64 = 1e-6;
pub const FLOOR: f64 = 1e-8;

/// Moves every parameter off its structured initial value (zero biases,
/// unit norms) so the check runs at a generic point.
pub fn jitter<T: Real, P: Parameters<T>>(p: &mut P, seed: u64) {
    let mut rng = super::rng(seed);
    let flat: Vec<T> = p
        .flatten()
        .iter()
        .map(|v| *v + T::lit(rng.gen_range(-0.05..0.05)))
        .collect();
    p.assign_flat(&flat);
}

pub struct Batch {
    images: Vec<(ImageTensor, ImageTensor)>,
    labels: Vec<LabelSet>,
}

impl Batch {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = super::rng(seed);
        let size = super::smallest_model().image_size;
        let images = (0..n)
            .map(|_| (super::random_image(size, &mut rng), super::random_image(size, &mut rng)))
            .collect();
        let labels = (0..n).map(|_| super::random_labels(&mut rng)).collect();
        Self { images, labels }
    }

    pub fn pairs(&self) -> Vec<EyePair<'_>> {
        self.images
            .iter()
            .zip(&self.labels)
            .map(|((l, r), labels)| EyePair { left: l, right: r, labels })
            .collect()
    }
}

pub fn pretrain_model(variant: BranchVariant, seed: u64) -> PretrainModel<f64> {
    let backbone = Backbone::init(&super::smallest_model(), seed).unwrap();
    let predictor = (variant == BranchVariant::Simsiam).then(|| {
        let d = backbone.embed_dim();
        Mlp2::random(d, d, (1.0 / d as f64).sqrt(), &mut super::rng(seed + 1))
    });
    let mut model = PretrainModel { backbone, predictor };
    jitter(&mut model, seed + 2);
    model
}

pub fn weights() -> TaskWeights {
    TaskWeights {
        w_rgs: [1.0, 0.5, 0.25, 0.75, 1.5],
        w_cls: [0.5, 1.0, 2.0],
        lambda: 0.7,
    }
}

pub fn cast_teachers(t: &[TeacherChoice<f32>]) -> Vec<TeacherChoice<f64>> {
    t.iter()
        .map(|c| TeacherChoice {
            student: c.student,
            target: c.target.mapv(|v| v as f64),
        })
        .collect()
}

/// The simsiam branch stops the gradient at both targets, so its backbone
/// gradient is not the derivative of the live objective. Only the predictor,
/// which the targets do not depend on, is compared there.
pub fn compared(variant: BranchVariant, errors: Vec<(String, f64)>) -> Vec<(String, f64)> {
    match variant {
        BranchVariant::Simsiam => errors.into_iter().filter(|(n, _)| n.starts_with("predictor")).collect(),
        _ => errors,
    }
}

/// Worst per-tensor errors of the pre-training objective gradient.
pub fn pretrain_gradient(variant: BranchVariant, seed: u64) -> GradErrors {
    let batch = Batch::new(2, seed);
    let pairs = batch.pairs();
    let w = weights();
    let model = pretrain_model(variant, seed);
    let fd_against = |teachers: Option<Vec<TeacherChoice<f64>>>| {
        let (pairs, w) = (&pairs, &w);
        move |m: &PretrainModel<f64>| objective(m, pairs, w, variant, teachers.as_deref(), None).unwrap().total
    };

    let mut g64 = model.zeros_like();
    let obj = objective(&model, &pairs, &w, variant, None, Some(&mut g64)).unwrap();
    let teachers = (variant == BranchVariant::Clfa).then_some(obj.teachers.clone());
    let errors = compared(variant, finite_difference_errors(&model, &g64, STEP, FLOOR, fd_against(teachers)));
    let at_f64 = worst(&errors);

    let model32 = model.cast::<f32>();
    let mut g32 = model32.zeros_like();
    let obj32 = objective(&model32, &pairs, &w, variant, None, Some(&mut g32)).unwrap();
    let point = model32.cast::<f64>();
    let teachers = (variant == BranchVariant::Clfa).then(|| cast_teachers(&obj32.teachers));
    let errors = compared(variant, finite_difference_errors(&point, &g32.cast::<f64>(), STEP, FLOOR, fd_against(teachers)));
    GradErrors {
        at_f64,
        at_f32: worst(&errors),
    }
}

pub fn cached_batch(backbone: &Backbone<f64>, n: usize, seed: u64) -> Vec<CachedPair<f64>> {
    let mut rng = super::rng(seed);
    let size = backbone.config.image_size;
    let samples: Vec<PairedSample> = (0..n as u64)
        .map(|id| PairedSample {
            patient_id: id,
            laterality: if id % 2 == 0 { Laterality::Left } else { Laterality::Right },
            source_image: super::random_image(size, &mut rng),
            target_image: super::random_image(size, &mut rng),
        })
        .collect();
    cache_pairs(backbone, &samples.iter().collect::<Vec<_>>()).unwrap()
}

pub fn cast_pair<A: Real, B: Real>(p: &CachedPair<A>) -> CachedPair<B> {
    let cast_pred = |q: &Predictions<A>| Predictions::from_slice(&q.to_array().iter().map(|v| B::lit(v.as_f64())).collect::<Vec<_>>());
    CachedPair {
        patient_id: p.patient_id,
        laterality: p.laterality,
        z_s: p.z_s.mapv(|v| B::lit(v.as_f64())),
        pred_s: cast_pred(&p.pred_s),
        pred_t_plain: cast_pred(&p.pred_t_plain),
        target_tokens: TokenSet::from_matrix(p.target_tokens.matrix().mapv(|v| B::lit(v.as_f64()))).unwrap(),
    }
}

/// Worst per-tensor errors of an adaptation loss gradient.
pub fn adaptor_gradient(loss: AdaptLoss, variant: AdaptorVariant, seed: u64) -> GradErrors {
    let mut backbone = Backbone::init(&super::smallest_model(), seed).unwrap();
    jitter(&mut backbone, seed + 1);
    let cached = cached_batch(&backbone, 4, seed + 2);
    let batch: Vec<&CachedPair<f64>> = cached.iter().collect();
    let mut adaptor = Adaptor::<f64>::for_backbone(&backbone, variant, AdaptorInit::Random, seed + 3).unwrap();
    jitter(&mut adaptor, seed + 4);

    let mut g64 = adaptor.zeros_like();
    adaptor_objective(&backbone, &adaptor, &batch, loss, Some(&mut g64)).unwrap();
    let f = |a: &Adaptor<f64>| adaptor_objective(&backbone, a, &batch, loss, None).unwrap();
    let at_f64 = worst(&finite_difference_errors(&adaptor, &g64, STEP, FLOOR, f));

    let backbone32 = backbone.cast::<f32>();
    let cached32: Vec<CachedPair<f32>> = cached.iter().map(cast_pair).collect();
    let batch32: Vec<&CachedPair<f32>> = cached32.iter().collect();
    let adaptor32 = adaptor.cast::<f32>();
    let mut g32 = adaptor32.zeros_like();
    adaptor_objective(&backbone32, &adaptor32, &batch32, loss, Some(&mut g32)).unwrap();

    // reference at the f32 point, evaluated in f64 from the same rounded inputs
    let backbone_r = backbone32.cast::<f64>();
    let cached_r: Vec<CachedPair<f64>> = cached32.iter().map(cast_pair).collect();
    let batch_r: Vec<&CachedPair<f64>> = cached_r.iter().collect();
    let f = |a: &Adaptor<f64>| adaptor_objective(&backbone_r, a, &batch_r, loss, None).unwrap();
    let at_f32 = worst(&finite_difference_errors(&adaptor32.cast::<f64>(), &g32.cast::<f64>(), STEP, FLOOR, f));
    GradErrors { at_f64, at_f32 }
}
