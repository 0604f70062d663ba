//! Small vision transformer: feature extractor `g` (patch embedding,
//! transformer blocks, final norm) and eight linear prediction heads `p`
//! acting on the classification token.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal_array, scoped, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Parameters, Real};
use crate::synthdata::ImageTensor;

pub const NUM_REGRESSION: usize = 5;
pub const NUM_CLASSES: usize = 3;
pub const NUM_HEADS_OUT: usize = NUM_REGRESSION + NUM_CLASSES;

const EMBED_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Backbone output: the classification token (row 0) followed by `N` patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet<T> {
    tokens: Array2<T>,
}

impl<T: Real> TokenSet<T> {
    pub fn from_matrix(tokens: Array2<T>) -> Result<Self> {
        if tokens.nrows() < 1 {
            return Err(Error::Argument("token set needs a classification token".into()));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite token value".into()));
        }
        Ok(Self { tokens })
    }

    pub fn cls_token(&self) -> ArrayView1<'_, T> {
        self.tokens.row(0)
    }

    pub fn patch_tokens(&self) -> ArrayView2<'_, T> {
        self.tokens.slice(s![1.., ..])
    }

    pub fn matrix(&self) -> ArrayView2<'_, T> {
        self.tokens.view()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn num_patches(&self) -> usize {
        self.tokens.nrows() - 1
    }
}

/// Regression outputs in the order `who_cvd_log, age, sbp, tc, bmi` and
/// pre-sigmoid logits in the order `gender, smoking, diabetes`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Predictions<T> {
    pub regression: [T; NUM_REGRESSION],
    pub class_logits: [T; NUM_CLASSES],
}

impl<T: Real> Predictions<T> {
    pub fn zeros() -> Self {
        Self {
            regression: [T::zero(); NUM_REGRESSION],
            class_logits: [T::zero(); NUM_CLASSES],
        }
    }

    pub fn from_slice(v: &[T]) -> Self {
        let mut p = Self::zeros();
        p.regression.copy_from_slice(&v[..NUM_REGRESSION]);
        p.class_logits.copy_from_slice(&v[NUM_REGRESSION..NUM_HEADS_OUT]);
        p
    }

    pub fn to_array(&self) -> Array1<T> {
        self.regression.iter().chain(self.class_logits.iter()).copied().collect()
    }

    pub fn who_cvd(&self) -> T {
        self.regression[0]
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            regression: self.regression.map(|v| v * s),
            class_logits: self.class_logits.map(|v| v * s),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.regression.iter().chain(self.class_logits.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub config: VitConfig,
    pub patch_embed: Linear<T>,
    pub cls_token: Array1<T>,
    pub pos_embed: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
    /// Column `k` is prediction head `k`.
    pub heads: Linear<T>,
}

/// Activations kept by [`Backbone::extract_features_traced`].
#[derive(Clone, Debug)]
pub struct FeatureTrace<T> {
    patches: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    norm: LayerNormCache<T>,
}

impl<T: Real> Backbone<T> {
    /// All-zero parameters with the layout implied by `config`.
    pub fn zeros(config: &VitConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        Ok(Self {
            config: config.clone(),
            patch_embed: Linear::zeros(config.patch_dim(), d),
            cls_token: Array1::zeros(d),
            pos_embed: Array2::zeros((config.num_tokens(), d)),
            blocks: (0..config.depth)
                .map(|_| Block::zeros(d, config.heads, config.mlp_hidden()))
                .collect(),
            norm: LayerNorm::zeros(d),
            heads: Linear::zeros(d, NUM_HEADS_OUT),
        })
    }

    /// Fan-in scaled normal weights, Normal(0, 0.02) class and position
    /// embeddings, zero biases, unit LayerNorm gains.
    pub fn init(config: &VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let patch_embed = Linear::fan_in(config.patch_dim(), d, &mut rng);
        let cls_token = normal_array::<T, _>((1, d), EMBED_STD, &mut rng).row(0).to_owned();
        let pos_embed = normal_array((config.num_tokens(), d), EMBED_STD, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| Block::random(d, config.heads, config.mlp_hidden(), &mut rng))
            .collect();
        let heads = Linear::fan_in(d, NUM_HEADS_OUT, &mut rng);
        Ok(Self {
            config: config.clone(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::new(d),
            heads,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        let mut out = Backbone::<U>::zeros(&self.config).expect("validated config");
        crate::nn::cast_into(self, &mut out);
        out
    }

    /// Rows are non-overlapping patches in raster order; each row lists its
    /// pixels in raster order with the three channels innermost.
    pub fn patchify(&self, img: &ImageTensor) -> Result<Array2<T>> {
        let cfg = &self.config;
        if img.size() != cfg.image_size {
            return Err(Error::Argument(format!(
                "image is {}x{}, backbone expects {}x{}",
                img.size(),
                img.size(),
                cfg.image_size,
                cfg.image_size
            )));
        }
        let px = img.pixels();
        let p = cfg.patch_size;
        let grid = cfg.grid();
        let mut out = Array2::zeros((cfg.num_patches(), cfg.patch_dim()));
        for gy in 0..grid {
            for gx in 0..grid {
                let mut row = out.row_mut(gy * grid + gx);
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..3 {
                            row[k] = T::lit(px[[gy * p + dy, gx * p + dx, c]] as f64);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn extract_features(&self, img: &ImageTensor) -> Result<TokenSet<T>> {
        self.extract_features_traced(img).map(|(t, _)| t)
    }

    pub fn extract_features_traced(&self, img: &ImageTensor) -> Result<(TokenSet<T>, FeatureTrace<T>)> {
        let patches = self.patchify(img)?;
        let d = self.embed_dim();
        let embedded = self.patch_embed.forward(patches.view());
        let mut h = Array2::zeros((self.config.num_tokens(), d));
        h.row_mut(0).assign(&self.cls_token);
        h.slice_mut(s![1.., ..]).assign(&embedded);
        h += &self.pos_embed;

        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_traced(h.view());
            caches.push(cache);
            h = next;
        }
        let (tokens, norm) = self.norm.forward_traced(h.view());
        let trace = FeatureTrace {
            patches,
            blocks: caches,
            norm,
        };
        Ok((TokenSet::from_matrix(tokens)?, trace))
    }

    /// Backpropagates `dL/dtokens` through the feature extractor,
    /// accumulating into `grad`.
    pub fn backward_features(&self, trace: &FeatureTrace<T>, d_tokens: ArrayView2<T>, grad: &mut Backbone<T>) {
        let mut dh = self.norm.backward(&trace.norm, d_tokens, &mut grad.norm);
        for ((block, cache), g) in self.blocks.iter().zip(&trace.blocks).zip(grad.blocks.iter_mut()).rev() {
            dh = block.backward(cache, dh.view(), g);
        }
        grad.pos_embed += &dh;
        grad.cls_token += &dh.row(0);
        self.patch_embed
            .backward(trace.patches.view(), dh.slice(s![1.., ..]), &mut grad.patch_embed);
    }

    /// Applies the prediction heads to the classification token.
    pub fn predict(&self, feature: &TokenSet<T>) -> Result<Predictions<T>> {
        self.predict_from(feature.cls_token())
    }

    /// Applies the prediction heads to an arbitrary `D`-vector.
    pub fn predict_from(&self, z: ArrayView1<T>) -> Result<Predictions<T>> {
        if z.len() != self.embed_dim() {
            return Err(Error::Argument(format!(
                "feature has length {}, heads expect {}",
                z.len(),
                self.embed_dim()
            )));
        }
        let out = self.heads.forward(z.insert_axis(Axis(0)));
        Ok(Predictions::from_slice(out.as_slice().expect("row vector")))
    }

    /// Accumulates head gradients and returns `dL/dz`.
    pub fn backward_predict(&self, z: ArrayView1<T>, d_pred: &Predictions<T>, grad: &mut Backbone<T>) -> Array1<T> {
        let dy = d_pred.to_array().insert_axis(Axis(0));
        self.heads
            .backward(z.insert_axis(Axis(0)), dy.view(), &mut grad.heads)
            .row(0)
            .to_owned()
    }

    /// `dL/dz` through the frozen heads.
    pub fn head_input_grad(&self, d_pred: &Predictions<T>) -> Array1<T> {
        let dy = d_pred.to_array().insert_axis(Axis(0));
        self.heads.input_grad(dy.view()).row(0).to_owned()
    }

    pub fn forward(&self, img: &ImageTensor) -> Result<Predictions<T>> {
        self.predict(&self.extract_features(img)?)
    }
}

impl<T: Real> Parameters<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        self.patch_embed.visit(&scoped(prefix, "patch_embed"), f);
        self.cls_token.visit(&scoped(prefix, "cls_token"), f);
        self.pos_embed.visit(&scoped(prefix, "pos_embed"), f);
        self.blocks.visit(&scoped(prefix, "blocks"), f);
        self.norm.visit(&scoped(prefix, "norm"), f);
        self.heads.visit(&scoped(prefix, "heads"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.patch_embed.visit_mut(&scoped(prefix, "patch_embed"), f);
        self.cls_token.visit_mut(&scoped(prefix, "cls_token"), f);
        self.pos_embed.visit_mut(&scoped(prefix, "pos_embed"), f);
        self.blocks.visit_mut(&scoped(prefix, "blocks"), f);
        self.norm.visit_mut(&scoped(prefix, "norm"), f);
        self.heads.visit_mut(&scoped(prefix, "heads"), f);
    }
}
