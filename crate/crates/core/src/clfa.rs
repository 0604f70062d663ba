//! Cross-laterality feature alignment pre-training.
//!
//! Each patient contributes a weighted multi-task supervised loss for both
//! eyes. The alignment branch compares the two eyes' supervised losses: the
//! eye with the smaller loss becomes the teacher, its feature is treated as a
//! constant, and the other eye's feature is pulled towards it with a
//! mean-squared error. A symmetric negative-cosine branch with a predictor
//! head is available as the contrastive ablation.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::backbone::{Backbone, Predictions, VitConfig, NUM_CLASSES, NUM_REGRESSION};
use crate::error::{Error, Result};
use crate::metrics::{r2, MetricRecord};
use crate::nn::{scoped, Mlp2, Parameters, Real};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::seed::{derive_seed, AUGMENT, INIT, PREDICTOR, SHUFFLE};
use crate::synthdata::{ImageTensor, LabelSet, Laterality, PatientRecord, CLASSIFICATION_TASKS, REGRESSION_TASKS};

/// Per-task weights of the supervised loss and the weight `lambda` of the
/// alignment branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskWeights {
    pub w_rgs: [f64; NUM_REGRESSION],
    pub w_cls: [f64; NUM_CLASSES],
    pub lambda: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self::uniform()
    }
}

impl TaskWeights {
    /// Every task and the alignment branch weighted 1.
    pub fn uniform() -> Self {
        Self {
            w_rgs: [1.0; NUM_REGRESSION],
            w_cls: [1.0; NUM_CLASSES],
            lambda: 1.0,
        }
    }

    /// WHO-CVD regression only.
    pub fn cvd_only() -> Self {
        Self {
            w_rgs: [1.0, 0.0, 0.0, 0.0, 0.0],
            w_cls: [0.0; NUM_CLASSES],
            lambda: 1.0,
        }
    }

    /// SBP, TC and BMI dropped, WHO-CVD up-weighted.
    pub fn reweighted() -> Self {
        Self {
            w_rgs: [4.0, 1.0, 0.0, 0.0, 0.0],
            w_cls: [1.0; NUM_CLASSES],
            lambda: 1.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(Self::cvd_only()),
            "weight1" => Ok(Self::uniform()),
            "weight2" => Ok(Self::reweighted()),
            other => Err(Error::Config(format!(
                "unknown weight preset '{other}' (expected baseline, weight1 or weight2)"
            ))),
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        let all = self.w_rgs.iter().chain(self.w_cls.iter()).chain(std::iter::once(&self.lambda));
        let mut any_positive = false;
        for &w in all {
            if !w.is_finite() || w < 0.0 {
                return Err(format!("task weights must be finite and non-negative, got {w}"));
            }
            any_positive |= w > 0.0;
        }
        if !any_positive {
            return Err("at least one task weight must be positive".into());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(Error::Config)
    }
}

/// Supervised loss of one eye with its unweighted per-task terms and the
/// gradient of the weighted total with respect to the predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedLoss<T> {
    pub total: T,
    pub regression: [T; NUM_REGRESSION],
    pub classification: [T; NUM_CLASSES],
    pub grad: Predictions<T>,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `BCE(y, sigmoid(logit))`, evaluated stably from the logit.
pub fn bce_with_logit<T: Real>(logit: T, target: bool) -> T {
    let y = if target { T::one() } else { T::zero() };
    logit.max(T::zero()) - logit * y + (T::one() + (-logit.abs()).exp()).ln()
}

/// Weighted sum of squared errors over the regression heads and binary
/// cross-entropies over the sigmoid of the classification logits.
pub fn supervised_loss<T: Real>(
    pred: &Predictions<T>,
    labels: &LabelSet,
    weights: &TaskWeights,
) -> Result<SupervisedLoss<T>> {
    weights.check().map_err(Error::Argument)?;
    if !pred.is_finite() {
        return Err(Error::Numeric("non-finite prediction".into()));
    }
    let targets = labels.regression();
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite regression label".into()));
    }
    let mut out = SupervisedLoss {
        total: T::zero(),
        regression: [T::zero(); NUM_REGRESSION],
        classification: [T::zero(); NUM_CLASSES],
        grad: Predictions::zeros(),
    };
    for k in 0..NUM_REGRESSION {
        let w = T::lit(weights.w_rgs[k]);
        let diff = pred.regression[k] - T::lit(targets[k] as f64);
        out.regression[k] = diff * diff;
        out.total += w * out.regression[k];
        out.grad.regression[k] = T::lit(2.0) * w * diff;
    }
    for (k, &target) in labels.classes().iter().enumerate() {
        let w = T::lit(weights.w_cls[k]);
        let logit = pred.class_logits[k];
        out.classification[k] = bce_with_logit(logit, target);
        out.total += w * out.classification[k];
        let y = if target { T::one() } else { T::zero() };
        out.grad.class_logits[k] = w * (sigmoid(logit) - y);
    }
    Ok(out)
}

/// Alignment term of one patient. Exactly one of the two gradients is
/// non-zero: the teacher's gradient is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentLoss<T> {
    pub value: T,
    pub student: Laterality,
    pub grad_left: Array1<T>,
    pub grad_right: Array1<T>,
}

/// Mean squared error of `student` against a constant target, and its
/// gradient with respect to `student`.
pub fn mse_to_constant<T: Real>(student: ArrayView1<T>, target: ArrayView1<T>) -> (T, Array1<T>) {
    let d = T::lit(student.len() as f64);
    let diff = &student - &target;
    let value = diff.iter().map(|&v| v * v).sum::<T>() / d;
    let grad = diff.mapv(|v| T::lit(2.0) * v / d);
    (value, grad)
}

/// The eye whose supervised loss is not smaller is the student; on a tie
/// the left eye is the student and the right eye the teacher.
pub fn select_student<T: Real>(l_sup_left: T, l_sup_right: T) -> Laterality {
    if l_sup_left >= l_sup_right {
        Laterality::Left
    } else {
        Laterality::Right
    }
}

pub fn alignment_pair_loss<T: Real>(
    z_left: ArrayView1<T>,
    z_right: ArrayView1<T>,
    l_sup_left: T,
    l_sup_right: T,
) -> Result<AlignmentLoss<T>> {
    if z_left.len() != z_right.len() {
        return Err(Error::Argument(format!(
            "feature lengths differ: {} vs {}",
            z_left.len(),
            z_right.len()
        )));
    }
    if !(l_sup_left.is_finite() && l_sup_right.is_finite()) {
        return Err(Error::Numeric("non-finite supervised loss".into()));
    }
    let student = select_student(l_sup_left, l_sup_right);
    let zeros = Array1::zeros(z_left.len());
    Ok(match student {
        Laterality::Left => {
            let (value, grad) = mse_to_constant(z_left, z_right);
            AlignmentLoss {
                value,
                student,
                grad_left: grad,
                grad_right: zeros,
            }
        }
        Laterality::Right => {
            let (value, grad) = mse_to_constant(z_right, z_left);
            AlignmentLoss {
                value,
                student,
                grad_left: zeros,
                grad_right: grad,
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSiamLoss<T> {
    pub value: T,
    pub grad_left: Array1<T>,
    pub grad_right: Array1<T>,
    pub predictor_grad: Mlp2<T>,
}

const COSINE_EPS: f64 = 1e-12;

/// `cos(p, t)` and its gradient with respect to `p`, `t` held constant.
fn cosine_and_grad<T: Real>(p: ArrayView1<T>, t: ArrayView1<T>) -> (T, Array1<T>) {
    let eps = T::lit(COSINE_EPS);
    let np = p.dot(&p).sqrt().max(eps);
    let nt = t.dot(&t).sqrt().max(eps);
    let cos = p.dot(&t) / (np * nt);
    let grad = Array1::from_iter(p.iter().zip(t.iter()).map(|(&pi, &ti)| ti / (np * nt) - cos * pi / (np * np)));
    (cos, grad)
}

/// `-(cos(h(z_l), sg(z_r)) + cos(h(z_r), sg(z_l))) / 2`.
pub fn simsiam_alignment_loss<T: Real>(
    z_left: ArrayView1<T>,
    z_right: ArrayView1<T>,
    predictor: &Mlp2<T>,
) -> Result<SimSiamLoss<T>> {
    let d = z_left.len();
    if z_right.len() != d || predictor.fc1.input_dim() != d || predictor.fc2.output_dim() != d {
        return Err(Error::Argument(format!(
            "predictor maps {} -> {}, features have lengths {} and {}",
            predictor.fc1.input_dim(),
            predictor.fc2.output_dim(),
            d,
            z_right.len()
        )));
    }
    let mut input = Array2::zeros((2, d));
    input.row_mut(0).assign(&z_left);
    input.row_mut(1).assign(&z_right);
    let (projected, cache) = predictor.forward_traced(input.view());
    let (cos_l, g_l) = cosine_and_grad(projected.row(0), z_right);
    let (cos_r, g_r) = cosine_and_grad(projected.row(1), z_left);
    let half = T::lit(0.5);
    let mut d_proj = Array2::zeros((2, d));
    d_proj.row_mut(0).assign(&g_l.mapv(|v| -half * v));
    d_proj.row_mut(1).assign(&g_r.mapv(|v| -half * v));
    let mut predictor_grad = Mlp2::zeros(d, predictor.fc1.output_dim());
    let d_input = predictor.backward(&cache, d_proj.view(), &mut predictor_grad);
    Ok(SimSiamLoss {
        value: -half * (cos_l + cos_r),
        grad_left: d_input.row(0).to_owned(),
        grad_right: d_input.row(1).to_owned(),
        predictor_grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchVariant {
    SupervisedOnly,
    Clfa,
    Simsiam,
}

impl BranchVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BranchVariant::SupervisedOnly => "supervised_only",
            BranchVariant::Clfa => "clfa",
            BranchVariant::Simsiam => "simsiam",
        }
    }
}

/// Trainable state of pre-training: the backbone and, for the contrastive
/// branch, its predictor head.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainModel<T> {
    pub backbone: Backbone<T>,
    pub predictor: Option<Mlp2<T>>,
}

impl<T: Real> PretrainModel<T> {
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }

    pub fn cast<U: Real>(&self) -> PretrainModel<U> {
        let mut out = PretrainModel {
            backbone: Backbone::<U>::zeros(&self.backbone.config).expect("validated config"),
            predictor: self
                .predictor
                .as_ref()
                .map(|p| Mlp2::zeros(p.fc1.input_dim(), p.fc1.output_dim())),
        };
        crate::nn::cast_into(self, &mut out);
        out
    }
}

impl<T: Real> Parameters<T> for PretrainModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.backbone.visit(prefix, f);
        self.predictor.visit(&scoped(prefix, "predictor"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.backbone.visit_mut(prefix, f);
        self.predictor.visit_mut(&scoped(prefix, "predictor"), f);
    }
}

/// Both eyes of one patient with their shared labels.
#[derive(Clone, Copy, Debug)]
pub struct EyePair<'a> {
    pub left: &'a ImageTensor,
    pub right: &'a ImageTensor,
    pub labels: &'a LabelSet,
}

impl<'a> From<&'a PatientRecord> for EyePair<'a> {
    fn from(r: &'a PatientRecord) -> Self {
        Self {
            left: &r.left,
            right: &r.right,
            labels: &r.labels,
        }
    }
}

/// The student eye of one patient and the constant feature it is pulled to.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherChoice<T> {
    pub student: Laterality,
    pub target: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Objective<T> {
    /// Batch mean of `l_left + l_right + lambda * l_align`.
    pub total: T,
    /// Batch mean of `l_left + l_right`.
    pub supervised: T,
    /// Batch mean of the (unweighted) alignment term.
    pub alignment: T,
    pub teachers: Vec<TeacherChoice<T>>,
}

fn token_grad<T: Real>(rows: usize, dz: &Array1<T>) -> Array2<T> {
    let mut d = Array2::zeros((rows, dz.len()));
    d.row_mut(0).assign(dz);
    d
}

/// Evaluates the pre-training objective on a batch and, when `grad` is
/// given, accumulates its gradient.
///
/// With `fixed_teachers` the student side and teacher feature of every
/// patient are taken from the list instead of being re-selected; this is
/// the objective whose ordinary derivative equals the stop-gradient
/// derivative at the point the teachers were recorded.
pub fn objective<T: Real>(
    model: &PretrainModel<T>,
    batch: &[EyePair<'_>],
    weights: &TaskWeights,
    variant: BranchVariant,
    fixed_teachers: Option<&[TeacherChoice<T>]>,
    mut grad: Option<&mut PretrainModel<T>>,
) -> Result<Objective<T>> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    if let Some(t) = fixed_teachers {
        if t.len() != batch.len() {
            return Err(Error::Argument("one teacher choice per patient required".into()));
        }
    }
    let backbone = &model.backbone;
    let predictor = match (variant, &model.predictor) {
        (BranchVariant::Simsiam, None) => {
            return Err(Error::Config("the simsiam branch needs a predictor head".into()))
        }
        (BranchVariant::Simsiam, Some(p)) => Some(p),
        _ => None,
    };
    let scale = T::one() / T::lit(batch.len() as f64);
    let lambda = T::lit(weights.lambda);
    let tokens = backbone.config.num_tokens();

    let mut out = Objective {
        total: T::zero(),
        supervised: T::zero(),
        alignment: T::zero(),
        teachers: Vec::with_capacity(batch.len()),
    };
    for (i, pair) in batch.iter().enumerate() {
        let (tok_l, trace_l) = backbone.extract_features_traced(pair.left)?;
        let (tok_r, trace_r) = backbone.extract_features_traced(pair.right)?;
        let (z_l, z_r) = (tok_l.cls_token(), tok_r.cls_token());
        let sup_l = supervised_loss(&backbone.predict(&tok_l)?, pair.labels, weights)?;
        let sup_r = supervised_loss(&backbone.predict(&tok_r)?, pair.labels, weights)?;

        let d = z_l.len();
        let (align, mut g_l, mut g_r) = match variant {
            BranchVariant::SupervisedOnly => (T::zero(), Array1::zeros(d), Array1::zeros(d)),
            BranchVariant::Clfa => {
                let choice = match fixed_teachers {
                    Some(t) => t[i].clone(),
                    None => {
                        let student = select_student(sup_l.total, sup_r.total);
                        let target = match student {
                            Laterality::Left => z_r.to_owned(),
                            Laterality::Right => z_l.to_owned(),
                        };
                        TeacherChoice { student, target }
                    }
                };
                let zeros = Array1::zeros(d);
                let (value, g_l, g_r) = match choice.student {
                    Laterality::Left => {
                        let (v, g) = mse_to_constant(z_l, choice.target.view());
                        (v, g, zeros)
                    }
                    Laterality::Right => {
                        let (v, g) = mse_to_constant(z_r, choice.target.view());
                        (v, zeros, g)
                    }
                };
                out.teachers.push(choice);
                (value, g_l, g_r)
            }
            BranchVariant::Simsiam => {
                let loss = simsiam_alignment_loss(z_l, z_r, predictor.expect("checked above"))?;
                if let Some(g) = grad.as_deref_mut() {
                    let pg = g.predictor.as_mut().expect("gradient mirrors model");
                    let w = lambda * scale;
                    let mut scaled = loss.predictor_grad.clone();
                    scaled.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x *= w));
                    let flat: Vec<T> = pg.flatten().iter().zip(scaled.flatten()).map(|(a, b)| *a + b).collect();
                    pg.assign_flat(&flat);
                }
                (loss.value, loss.grad_left, loss.grad_right)
            }
        };

        let item = sup_l.total + sup_r.total + lambda * align;
        if !item.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective for batch element {i}")));
        }
        out.total += item * scale;
        out.supervised += (sup_l.total + sup_r.total) * scale;
        out.alignment += align * scale;

        if let Some(g) = grad.as_deref_mut() {
            let w = lambda * scale;
            g_l.mapv_inplace(|v| v * w);
            g_r.mapv_inplace(|v| v * w);
            let dz_l = backbone.backward_predict(z_l, &sup_l.grad.scaled(scale), &mut g.backbone) + &g_l;
            let dz_r = backbone.backward_predict(z_r, &sup_r.grad.scaled(scale), &mut g.backbone) + &g_r;
            backbone.backward_features(&trace_l, token_grad(tokens, &dz_l).view(), &mut g.backbone);
            backbone.backward_features(&trace_r, token_grad(tokens, &dz_r).view(), &mut g.backbone);
        }
    }
    Ok(out)
}

/// Batch mean of `l_sup_left + l_sup_right + lambda * l_align`.
pub fn total_loss<T: Real>(
    batch: &[EyePair<'_>],
    model: &PretrainModel<T>,
    weights: &TaskWeights,
    variant: BranchVariant,
) -> Result<T> {
    objective(model, batch, weights, variant, None, None).map(|o| o.total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
    pub augment: AugmentConfig,
    pub variant: BranchVariant,
    pub weights: TaskWeights,
    /// Hidden width of the contrastive predictor head; 0 means `D`.
    pub predictor_hidden: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 30,
            optimizer: AdamConfig::default(),
            schedule: LrSchedule::Constant,
            augment: AugmentConfig::default(),
            variant: BranchVariant::Clfa,
            weights: TaskWeights::uniform(),
            predictor_hidden: 0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.optimizer.validate()?;
        self.augment.validate()?;
        self.weights.validate()
    }
}

/// Everything needed to continue pre-training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub model: PretrainModel<f32>,
    pub optimizer: Adam<f32>,
    pub epochs_done: usize,
}

impl PretrainState {
    pub fn new(model_config: &VitConfig, config: &PretrainConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::init(model_config, derive_seed(&[config.seed, INIT]))?;
        let predictor = (config.variant == BranchVariant::Simsiam).then(|| {
            let d = model_config.embed_dim;
            let hidden = if config.predictor_hidden == 0 { d } else { config.predictor_hidden };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, PREDICTOR]));
            Mlp2::random(d, hidden, (1.0 / d as f64).sqrt(), &mut rng)
        });
        let model = PretrainModel { backbone, predictor };
        let optimizer = Adam::new(config.optimizer.clone(), model.num_params());
        Ok(Self {
            model,
            optimizer,
            epochs_done: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub state: PretrainState,
    pub history: Vec<MetricRecord>,
}

/// Validation R² of the regression heads (`None` when undefined) and
/// accuracy of the classification heads, both eyes counted as samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskScores {
    pub r2: [Option<f64>; NUM_REGRESSION],
    pub accuracy: [Option<f64>; NUM_CLASSES],
}

pub fn evaluate_tasks<T: Real>(backbone: &Backbone<T>, records: &[&PatientRecord]) -> Result<TaskScores> {
    let mut truth = vec![Vec::new(); NUM_REGRESSION];
    let mut preds = vec![Vec::new(); NUM_REGRESSION];
    let mut correct = [0usize; NUM_CLASSES];
    let mut total = 0usize;
    for r in records {
        for side in Laterality::BOTH {
            let p = backbone.forward(r.image(side))?;
            let y = r.labels.regression();
            for k in 0..NUM_REGRESSION {
                truth[k].push(y[k] as f64);
                preds[k].push(p.regression[k].as_f64());
            }
            for (k, &c) in r.labels.classes().iter().enumerate() {
                if (p.class_logits[k] > T::zero()) == c {
                    correct[k] += 1;
                }
            }
            total += 1;
        }
    }
    let r2s: Vec<Option<f64>> = (0..NUM_REGRESSION).map(|k| r2(&truth[k], &preds[k]).ok()).collect();
    Ok(TaskScores {
        r2: [r2s[0], r2s[1], r2s[2], r2s[3], r2s[4]],
        accuracy: correct.map(|c| (total > 0).then(|| c as f64 / total as f64)),
    })
}

fn push_scores(history: &mut Vec<MetricRecord>, epoch: usize, scores: &TaskScores) {
    for (k, v) in scores.r2.iter().enumerate() {
        if let Some(v) = v {
            history.push(MetricRecord::new(epoch, "validation", &format!("r2_{}", REGRESSION_TASKS[k]), *v));
        }
    }
    for (k, v) in scores.accuracy.iter().enumerate() {
        if let Some(v) = v {
            history.push(MetricRecord::new(epoch, "validation", &format!("acc_{}", CLASSIFICATION_TASKS[k]), *v));
        }
    }
}

/// Runs pre-training from a fresh initialization.
pub fn pretrain(
    train: &[&PatientRecord],
    validation: &[&PatientRecord],
    model_config: &VitConfig,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    let state = PretrainState::new(model_config, config)?;
    resume(state, train, validation, config)
}

/// Continues pre-training from `state` up to `config.epochs` epochs.
///
/// Shuffling and augmentation depend only on `(seed, epoch, patient, eye)`,
/// so resuming reproduces an uninterrupted run.
pub fn resume(
    mut state: PretrainState,
    train: &[&PatientRecord],
    validation: &[&PatientRecord],
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("pre-training needs at least one training patient".into()));
    }
    if (config.variant == BranchVariant::Simsiam) != state.model.predictor.is_some() {
        return Err(Error::Config("checkpoint branch variant does not match the configuration".into()));
    }
    let mut history = Vec::new();
    let mut grad = state.model.zeros_like();
    for epoch in state.epochs_done..config.epochs {
        let lr = config.schedule.rate(config.learning_rate, epoch, config.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, SHUFFLE, epoch as u64])));

        let (mut sum_total, mut sum_sup, mut sum_align) = (0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<(ImageTensor, ImageTensor)> = chunk
                .iter()
                .map(|&i| {
                    let r = train[i];
                    let aug = |side: Laterality| {
                        let s = derive_seed(&[config.seed, AUGMENT, epoch as u64, r.patient_id, side as u64]);
                        augment(r.image(side), &config.augment, s)
                    };
                    (aug(Laterality::Left), aug(Laterality::Right))
                })
                .collect();
            let batch: Vec<EyePair<'_>> = chunk
                .iter()
                .zip(&images)
                .map(|(&i, (l, r))| EyePair {
                    left: l,
                    right: r,
                    labels: &train[i].labels,
                })
                .collect();

            grad.fill_zero();
            let obj = match objective(&state.model, &batch, &config.weights, config.variant, None, Some(&mut grad)) {
                Ok(o) => o,
                Err(Error::Numeric(_)) => {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            let total = obj.total.as_f64();
            if !total.is_finite() || grad.flatten().iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    loss: total,
                });
            }
            let n = chunk.len() as f64;
            sum_total += total * n;
            sum_sup += obj.supervised.as_f64() * n;
            sum_align += obj.alignment.as_f64() * n;
            state.optimizer.update(&mut state.model, &grad, lr);
        }
        state.epochs_done = epoch + 1;

        let e = epoch + 1;
        let n = train.len() as f64;
        history.push(MetricRecord::new(e, "train", "loss_total", sum_total / n));
        history.push(MetricRecord::new(e, "train", "loss_supervised", sum_sup / n));
        history.push(MetricRecord::new(e, "train", "loss_alignment", sum_align / n));
        if !validation.is_empty() {
            push_scores(&mut history, e, &evaluate_tasks(&state.model.backbone, validation)?);
        }
    }
    Ok(PretrainOutcome { state, history })
}
