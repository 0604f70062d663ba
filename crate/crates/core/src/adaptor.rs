//! Self-attention camera adaptor.
//!
//! A transformer block plus a two-layer projector maps the frozen backbone's
//! target-camera tokens to a feature that the backbone's own prediction
//! heads consume in place of the classification token. Training uses paired
//! source/target images of the same eye; every source-side quantity is a
//! constant, so gradients only ever reach the adaptor.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Predictions, TokenSet};
use crate::error::{Error, Result};
use crate::metrics::{consistency_r2, mk_mmd_paired, KernelBank, MetricRecord};
use crate::nn::{scoped, Block, BlockCache, Mlp2, Mlp2Cache, Parameters, Real};
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::seed::{derive_seed, INIT, SHUFFLE};
use crate::synthdata::{ImageTensor, Laterality, PairedSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorVariant {
    /// Projector on the classification token only.
    MlpOnly,
    /// Block only; its classification token is the output.
    SaOnly,
    /// Block followed by the projector.
    SaPlusMlp,
}

impl AdaptorVariant {
    pub const ALL: [AdaptorVariant; 3] = [AdaptorVariant::MlpOnly, AdaptorVariant::SaOnly, AdaptorVariant::SaPlusMlp];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptorVariant::MlpOnly => "mlp_only",
            AdaptorVariant::SaOnly => "sa_only",
            AdaptorVariant::SaPlusMlp => "sa_plus_mlp",
        }
    }

    fn has_block(self) -> bool {
        self != AdaptorVariant::MlpOnly
    }

    fn has_projector(self) -> bool {
        self != AdaptorVariant::SaOnly
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorInit {
    /// Zeroed output layers of both sublayers and an identity projector, so
    /// the untrained adaptor returns the classification token unchanged.
    Passthrough,
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adaptor<T> {
    pub variant: AdaptorVariant,
    pub block: Option<Block<T>>,
    pub projector: Option<Mlp2<T>>,
}

#[derive(Clone, Debug)]
pub struct AdaptTrace<T> {
    rows: usize,
    block: Option<BlockCache<T>>,
    projector: Option<Mlp2Cache<T>>,
}

impl<T: Real> Adaptor<T> {
    /// `dim`, `heads` and `mlp_hidden` follow the backbone's blocks; the
    /// projector's hidden width is `2 * dim`.
    pub fn new(
        variant: AdaptorVariant,
        init: AdaptorInit,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::Argument(format!("{heads} heads do not divide dimension {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = variant.has_block().then(|| {
            let mut b = Block::random(dim, heads, mlp_hidden, &mut rng);
            if init == AdaptorInit::Passthrough {
                b.proj.fill_zero();
                b.fc2.fill_zero();
            }
            b
        });
        let projector = variant.has_projector().then(|| match init {
            AdaptorInit::Passthrough => Mlp2::identity(dim),
            AdaptorInit::Random => Mlp2::random(dim, 2 * dim, (1.0 / dim as f64).sqrt(), &mut rng),
        });
        Ok(Self {
            variant,
            block,
            projector,
        })
    }

    pub fn for_backbone<B: Real>(backbone: &Backbone<B>, variant: AdaptorVariant, init: AdaptorInit, seed: u64) -> Result<Self> {
        let c = &backbone.config;
        Self::new(variant, init, c.embed_dim, c.heads, c.mlp_hidden(), seed)
    }

    pub fn dim(&self) -> usize {
        match (&self.block, &self.projector) {
            (Some(b), _) => b.dim(),
            (None, Some(p)) => p.fc1.input_dim(),
            (None, None) => unreachable!("every variant has a block or a projector"),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.fill_zero();
        g
    }

    pub fn cast<U: Real>(&self) -> Adaptor<U> {
        let mut out = Adaptor {
            variant: self.variant,
            block: self.block.as_ref().map(|b| Block::zeros(b.dim(), b.heads, b.fc1.output_dim())),
            projector: self
                .projector
                .as_ref()
                .map(|p| Mlp2::zeros(p.fc1.input_dim(), p.fc1.output_dim())),
        };
        crate::nn::cast_into(self, &mut out);
        out
    }

    pub fn adapt(&self, tokens: &TokenSet<T>) -> Result<Array1<T>> {
        self.adapt_traced(tokens).map(|(z, _)| z)
    }

    pub fn adapt_traced(&self, tokens: &TokenSet<T>) -> Result<(Array1<T>, AdaptTrace<T>)> {
        if tokens.dim() != self.dim() {
            return Err(Error::Argument(format!(
                "tokens have dimension {}, adaptor expects {}",
                tokens.dim(),
                self.dim()
            )));
        }
        let rows = tokens.matrix().nrows();
        let (cls, block) = match &self.block {
            Some(b) => {
                let (out, cache) = b.forward_traced(tokens.matrix());
                (out.row(0).to_owned(), Some(cache))
            }
            None => (tokens.cls_token().to_owned(), None),
        };
        let (z, projector) = match &self.projector {
            Some(p) => {
                let (out, cache) = p.forward_traced(cls.view().insert_axis(ndarray::Axis(0)));
                (out.row(0).to_owned(), Some(cache))
            }
            None => (cls, None),
        };
        Ok((z, AdaptTrace { rows, block, projector }))
    }

    /// Accumulates the gradient of a loss whose derivative with respect to
    /// the adapted feature is `dz`.
    pub fn backward(&self, trace: &AdaptTrace<T>, dz: ArrayView1<T>, grad: &mut Adaptor<T>) {
        let mut d_cls = dz.to_owned();
        if let (Some(p), Some(cache)) = (&self.projector, &trace.projector) {
            let g = grad.projector.as_mut().expect("gradient mirrors adaptor");
            d_cls = p.backward(cache, dz.insert_axis(ndarray::Axis(0)), g).row(0).to_owned();
        }
        if let (Some(b), Some(cache)) = (&self.block, &trace.block) {
            let mut dy = Array2::zeros((trace.rows, d_cls.len()));
            dy.row_mut(0).assign(&d_cls);
            b.backward(cache, dy.view(), grad.block.as_mut().expect("gradient mirrors adaptor"));
        }
    }
}

impl<T: Real> Parameters<T> for Adaptor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.block.visit(&scoped(prefix, "block"), f);
        self.projector.visit(&scoped(prefix, "projector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.block.visit_mut(&scoped(prefix, "block"), f);
        self.projector.visit_mut(&scoped(prefix, "projector"), f);
    }
}

/// Target-camera predictions: the frozen heads applied to the adapted
/// feature.
pub fn predict_target<T: Real>(backbone: &Backbone<T>, adaptor: &Adaptor<T>, img: &ImageTensor) -> Result<Predictions<T>> {
    let tokens = backbone.extract_features(img)?;
    backbone.predict_from(adaptor.adapt(&tokens)?.view())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptLoss {
    Cvd,
    Feature,
    Mkmmd,
    CvdPlusFeature,
}

impl AdaptLoss {
    pub const ALL: [AdaptLoss; 4] = [AdaptLoss::Cvd, AdaptLoss::Feature, AdaptLoss::Mkmmd, AdaptLoss::CvdPlusFeature];

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptLoss::Cvd => "cvd",
            AdaptLoss::Feature => "feature",
            AdaptLoss::Mkmmd => "mkmmd",
            AdaptLoss::CvdPlusFeature => "cvd_plus_feature",
        }
    }
}

/// Value of an adaptation loss with its gradients with respect to the
/// target-path predictions and the adapted features.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptLossValue<T> {
    pub value: T,
    pub d_pred_t: Vec<Predictions<T>>,
    pub d_z_a: Array2<T>,
}

/// `pred_s`, `z_s` come from the source camera through the frozen backbone
/// and are constants; `pred_t`, `z_a` come from the adaptor. Rows of `z_s`
/// and `z_a` are paired. The MMD kernel bank defaults to the median
/// heuristic on `z_s` alone.
pub fn adaptation_loss<T: Real>(
    loss: AdaptLoss,
    pred_s: &[Predictions<T>],
    pred_t: &[Predictions<T>],
    z_s: ArrayView2<T>,
    z_a: ArrayView2<T>,
    kernels: Option<&KernelBank>,
) -> Result<AdaptLossValue<T>> {
    let n = pred_s.len();
    if n == 0 || pred_t.len() != n || z_s.nrows() != n || z_a.nrows() != n {
        return Err(Error::Argument(format!(
            "adaptation loss needs equally many source and target entries, got {} / {} / {} / {}",
            n,
            pred_t.len(),
            z_s.nrows(),
            z_a.nrows()
        )));
    }
    if z_s.ncols() != z_a.ncols() {
        return Err(Error::Argument("source and adapted feature dimensions differ".into()));
    }
    if pred_s.iter().chain(pred_t).any(|p| !p.is_finite()) || z_s.iter().chain(z_a.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite adaptation input".into()));
    }
    let mut out = AdaptLossValue {
        value: T::zero(),
        d_pred_t: vec![Predictions::zeros(); n],
        d_z_a: Array2::zeros(z_a.raw_dim()),
    };
    let nt = T::lit(n as f64);
    let two = T::lit(2.0);

    let cvd = |out: &mut AdaptLossValue<T>| {
        for i in 0..n {
            let diff = pred_t[i].who_cvd() - pred_s[i].who_cvd();
            out.value += diff * diff / nt;
            out.d_pred_t[i].regression[0] += two * diff / nt;
        }
    };
    let feature = |out: &mut AdaptLossValue<T>| {
        let count = T::lit((n * z_a.ncols()) as f64);
        let diff = &z_a - &z_s;
        out.value += diff.iter().map(|&v| v * v).sum::<T>() / count;
        out.d_z_a.scaled_add(two / count, &diff);
    };

    match loss {
        AdaptLoss::Cvd => cvd(&mut out),
        AdaptLoss::Feature => feature(&mut out),
        AdaptLoss::CvdPlusFeature => {
            cvd(&mut out);
            feature(&mut out);
        }
        AdaptLoss::Mkmmd => {
            if n < 2 {
                return Err(Error::Argument("the MMD loss needs a batch of at least two pairs".into()));
            }
            let za = z_a.mapv(|v| v.as_f64());
            let zs = z_s.mapv(|v| v.as_f64());
            let heuristic;
            let bank = match kernels {
                Some(k) => k,
                None => {
                    heuristic = KernelBank::median_heuristic(&[zs.view()]);
                    &heuristic
                }
            };
            let (value, grad) = mk_mmd_paired(za.view(), zs.view(), bank)?;
            out.value = T::lit(value);
            out.d_z_a = grad.mapv(T::lit);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub loss_variant: AdaptLoss,
    pub variant: AdaptorVariant,
    pub init: AdaptorInit,
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-2,
            epochs: 30,
            loss_variant: AdaptLoss::Cvd,
            variant: AdaptorVariant::SaPlusMlp,
            init: AdaptorInit::Passthrough,
            optimizer: AdamConfig::default(),
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.loss_variant == AdaptLoss::Mkmmd && self.batch_size < 2 {
            return Err(Error::Config("the mkmmd loss needs batch_size >= 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.optimizer.validate()
    }
}

/// Frozen-backbone quantities of one source/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedPair<T> {
    pub patient_id: u64,
    pub laterality: Laterality,
    pub z_s: Array1<T>,
    pub pred_s: Predictions<T>,
    pub pred_t_plain: Predictions<T>,
    pub target_tokens: TokenSet<T>,
}

pub fn cache_pairs<T: Real>(backbone: &Backbone<T>, pairs: &[&PairedSample]) -> Result<Vec<CachedPair<T>>> {
    pairs
        .iter()
        .map(|p| {
            let source = backbone.extract_features(&p.source_image)?;
            let target = backbone.extract_features(&p.target_image)?;
            Ok(CachedPair {
                patient_id: p.patient_id,
                laterality: p.laterality,
                z_s: source.cls_token().to_owned(),
                pred_s: backbone.predict(&source)?,
                pred_t_plain: backbone.predict(&target)?,
                target_tokens: target,
            })
        })
        .collect()
}

fn stack<T: Real>(rows: &[ArrayView1<T>]) -> Array2<T> {
    let mut out = Array2::zeros((rows.len(), rows.first().map_or(0, |r| r.len())));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    out
}

/// Adaptation loss of `adaptor` on a batch, accumulating into `grad` when
/// given. Nothing here can reach the backbone's parameters: the backbone is
/// borrowed immutably and only its head input gradient is used.
pub fn adaptor_objective<T: Real>(
    backbone: &Backbone<T>,
    adaptor: &Adaptor<T>,
    batch: &[&CachedPair<T>],
    loss: AdaptLoss,
    grad: Option<&mut Adaptor<T>>,
) -> Result<T> {
    let mut z_a = Vec::with_capacity(batch.len());
    let mut traces = Vec::with_capacity(batch.len());
    let mut pred_t = Vec::with_capacity(batch.len());
    for p in batch {
        let (z, trace) = adaptor.adapt_traced(&p.target_tokens)?;
        pred_t.push(backbone.predict_from(z.view())?);
        z_a.push(z);
        traces.push(trace);
    }
    let pred_s: Vec<Predictions<T>> = batch.iter().map(|p| p.pred_s.clone()).collect();
    let z_s = stack(&batch.iter().map(|p| p.z_s.view()).collect::<Vec<_>>());
    let z_a_mat = stack(&z_a.iter().map(|z| z.view()).collect::<Vec<_>>());
    let value = adaptation_loss(loss, &pred_s, &pred_t, z_s.view(), z_a_mat.view(), None)?;
    if let Some(g) = grad {
        for (i, trace) in traces.iter().enumerate() {
            let dz = &value.d_z_a.row(i) + &backbone.head_input_grad(&value.d_pred_t[i]);
            adaptor.backward(trace, dz.view(), g);
        }
    }
    Ok(value.value)
}

/// Consistency R² of the WHO-CVD prediction between cameras, with the
/// adaptor on the target path when given.
pub fn pair_consistency<T: Real>(
    backbone: &Backbone<T>,
    adaptor: Option<&Adaptor<T>>,
    pairs: &[CachedPair<T>],
) -> Result<f64> {
    let source: Vec<f64> = pairs.iter().map(|p| p.pred_s.who_cvd().as_f64()).collect();
    let target = target_cvd(backbone, adaptor, pairs)?;
    consistency_r2(&source, &target)
}

pub fn target_cvd<T: Real>(backbone: &Backbone<T>, adaptor: Option<&Adaptor<T>>, pairs: &[CachedPair<T>]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|p| match adaptor {
            Some(a) => Ok(backbone.predict_from(a.adapt(&p.target_tokens)?.view())?.who_cvd().as_f64()),
            None => Ok(p.pred_t_plain.who_cvd().as_f64()),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    pub adaptor: Adaptor<f32>,
    pub history: Vec<MetricRecord>,
}

/// Trains an adaptor against a frozen backbone.
pub fn train_adaptor(
    backbone: &Backbone<f32>,
    train: &[&PairedSample],
    validation: &[&PairedSample],
    config: &AdaptConfig,
) -> Result<AdaptOutcome> {
    if train.is_empty() {
        return Err(Error::Data("adaptor training needs at least one pair".into()));
    }
    config.validate()?;
    let train = cache_pairs(backbone, train)?;
    let validation = cache_pairs(backbone, validation)?;
    train_adaptor_cached(backbone, &train, &validation, config)
}

/// [`train_adaptor`] on pre-computed backbone outputs.
pub fn train_adaptor_cached(
    backbone: &Backbone<f32>,
    train: &[CachedPair<f32>],
    validation: &[CachedPair<f32>],
    config: &AdaptConfig,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("adaptor training needs at least one pair".into()));
    }
    let mut adaptor = Adaptor::for_backbone(backbone, config.variant, config.init, derive_seed(&[config.seed, INIT]))?;
    let mut optimizer = Adam::<f32>::new(config.optimizer.clone(), adaptor.num_params());
    let mut grad = adaptor.zeros_like();
    let mut history = Vec::new();

    let validate = validation.len() >= 2;
    if validate {
        if let Ok(pre) = pair_consistency(backbone, None, validation) {
            history.push(MetricRecord::new(0, "validation", "consistency_r2_pre", pre));
        }
        if let Ok(post) = pair_consistency(backbone, Some(&adaptor), validation) {
            history.push(MetricRecord::new(0, "validation", "consistency_r2_post", post));
        }
    }

    for epoch in 0..config.epochs {
        let lr = config.schedule.rate(config.learning_rate, epoch, config.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, SHUFFLE, epoch as u64])));
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        // a trailing singleton joins the previous batch so set-level losses stay defined
        if batches.len() > 1 && batches.last().map_or(false, |b| b.len() == 1) {
            batches.pop();
            let k = batches.len() - 1;
            let start = k * config.batch_size;
            batches[k] = &order[start..];
        }
        let mut sum = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let batch: Vec<&CachedPair<f32>> = idx.iter().map(|&i| &train[i]).collect();
            grad.fill_zero();
            let value = match adaptor_objective(backbone, &adaptor, &batch, config.loss_variant, Some(&mut grad)) {
                Ok(v) => v as f64,
                Err(Error::Numeric(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            if !value.is_finite() || grad.flatten().iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    loss: value,
                });
            }
            sum += value * idx.len() as f64;
            optimizer.update(&mut adaptor, &grad, lr);
        }
        let e = epoch + 1;
        history.push(MetricRecord::new(
            e,
            "train",
            &format!("loss_{}", config.loss_variant.as_str()),
            sum / train.len() as f64,
        ));
        if validate {
            if let Ok(post) = pair_consistency(backbone, Some(&adaptor), validation) {
                history.push(MetricRecord::new(e, "validation", "consistency_r2_post", post));
            }
        }
    }
    Ok(AdaptOutcome { adaptor, history })
}
