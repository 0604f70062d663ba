//! R², cross-camera consistency, multi-kernel MMD and linear-probe AUC.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::Laterality;

/// One line of a JSON-lines metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub task: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(epoch: usize, split: &str, task: &str, value: f64) -> Self {
        Self {
            epoch,
            split: split.to_string(),
            task: task.to_string(),
            value,
        }
    }
}

pub fn history_to_jsonl(history: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&serde_json::to_string(r).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

/// Coefficient of determination; negative when worse than the mean.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Argument(format!(
            "r2 needs equal lengths, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.len() < 2 {
        return Err(Error::Argument("r2 needs at least two samples".into()));
    }
    let mean = y_true.iter().sum::<f64>() / y_true.len() as f64;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Data("r2 is undefined for a constant target".into()));
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// `r2` with the source-camera predictions as the pseudo target.
pub fn consistency_r2(pred_source: &[f64], pred_target: &[f64]) -> Result<f64> {
    if pred_source.len() != pred_target.len() {
        return Err(Error::Argument(format!(
            "misaligned prediction lists: {} source vs {} target",
            pred_source.len(),
            pred_target.len()
        )));
    }
    r2(pred_source, pred_target)
}

/// Gaussian kernels `exp(-d² / (2σ²))` mixed with non-negative weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub bandwidths: Vec<f64>,
    pub weights: Vec<f64>,
}

pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KernelBank {
    pub fn new(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let bank = Self { bandwidths, weights };
        bank.validate()?;
        Ok(bank)
    }

    pub fn single(bandwidth: f64) -> Result<Self> {
        Self::new(vec![bandwidth], vec![1.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidths.is_empty() || self.bandwidths.len() != self.weights.len() {
            return Err(Error::Argument("kernel bank needs matching, non-empty bandwidths and weights".into()));
        }
        if self.bandwidths.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Argument("kernel bandwidths must be positive".into()));
        }
        if self.weights.iter().any(|&w| !(w.is_finite() && w >= 0.0)) {
            return Err(Error::Argument("kernel weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("kernel weights must sum to 1, got {total}")));
        }
        Ok(())
    }

    /// Median pairwise distance of the pooled rows times
    /// [`DEFAULT_MULTIPLIERS`], uniformly weighted. Falls back to unit scale
    /// when every point coincides.
    pub fn median_heuristic(sets: &[ArrayView2<f64>]) -> Self {
        let rows: Vec<_> = sets.iter().flat_map(|s| s.rows()).collect();
        let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                dists.push(sq_dist(rows[i], rows[j]).sqrt());
            }
        }
        dists.sort_by(f64::total_cmp);
        let mut median = match dists.len() {
            0 => 1.0,
            n if n % 2 == 1 => dists[n / 2],
            n => 0.5 * (dists[n / 2 - 1] + dists[n / 2]),
        };
        if !(median.is_finite() && median > 0.0) {
            median = 1.0;
        }
        let m = DEFAULT_MULTIPLIERS.len();
        Self {
            bandwidths: DEFAULT_MULTIPLIERS.iter().map(|k| k * median).collect(),
            weights: vec![1.0 / m as f64; m],
        }
    }

    /// Kernel value for a squared distance.
    pub fn eval(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| w * (-d2 / (2.0 * s * s)).exp())
            .sum()
    }

    /// `d k / d (d²)` for a squared distance.
    fn deval(&self, d2: f64) -> f64 {
        self.bandwidths
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| {
                let c = 1.0 / (2.0 * s * s);
                -w * c * (-d2 * c).exp()
            })
            .sum()
    }
}

fn check_sets(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
    if x.nrows() < 2 || y.nrows() < 2 {
        return Err(Error::Argument(format!(
            "MMD needs at least two rows per set, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Argument(format!("feature dims differ: {} vs {}", x.ncols(), y.ncols())));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature".into()));
    }
    Ok(())
}

fn within_mean(x: ArrayView2<f64>, k: &KernelBank) -> f64 {
    let n = x.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += k.eval(sq_dist(x.row(i), x.row(j)));
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

/// Unbiased estimate of the squared MMD under `kernels`, or the
/// median-heuristic bank of the pooled sets when `kernels` is `None`.
///
/// The arguments are put into a canonical order first, so swapping them
/// gives a bit-identical result.
pub fn mk_mmd<'a>(x: ArrayView2<'a, f64>, y: ArrayView2<'a, f64>, kernels: Option<&KernelBank>) -> Result<f64> {
    check_sets(x, y)?;
    let (x, y) = if canonical_le(x, y) { (x, y) } else { (y, x) };
    let heuristic;
    let k = match kernels {
        Some(k) => {
            k.validate()?;
            k
        }
        None => {
            heuristic = KernelBank::median_heuristic(&[x, y]);
            &heuristic
        }
    };
    let mut cross = 0.0;
    for a in x.rows() {
        for b in y.rows() {
            cross += k.eval(sq_dist(a, b));
        }
    }
    cross /= (x.nrows() * y.nrows()) as f64;
    Ok(within_mean(x, k) + within_mean(y, k) - 2.0 * cross)
}

fn canonical_le(x: ArrayView2<f64>, y: ArrayView2<f64>) -> bool {
    match x.nrows().cmp(&y.nrows()) {
        std::cmp::Ordering::Less => return true,
        std::cmp::Ordering::Greater => return false,
        std::cmp::Ordering::Equal => {}
    }
    for (a, b) in x.iter().zip(y.iter()) {
        match a.total_cmp(b) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    true
}

/// Paired-sample unbiased MMD² over rows `(x_i, y_i)`:
/// `1/(n(n-1)) Σ_{i≠j} k(x_i,x_j) + k(y_i,y_j) − k(x_i,y_j) − k(x_j,y_i)`,
/// with its gradient with respect to `x`. It is exactly zero when `x == y`.
pub fn mk_mmd_paired(x: ArrayView2<f64>, y: ArrayView2<f64>, kernels: &KernelBank) -> Result<(f64, Array2<f64>)> {
    check_sets(x, y)?;
    if x.nrows() != y.nrows() {
        return Err(Error::Argument("paired MMD needs equally many rows".into()));
    }
    let n = x.nrows();
    let norm = 1.0 / (n * (n - 1)) as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros(x.raw_dim());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dxx = sq_dist(x.row(i), x.row(j));
            let dyy = sq_dist(y.row(i), y.row(j));
            let dxy = sq_dist(x.row(i), y.row(j));
            let dyx = sq_dist(x.row(j), y.row(i));
            value += kernels.eval(dxx) + kernels.eval(dyy) - kernels.eval(dxy) - kernels.eval(dyx);
            // d/dx_i of k(x_i,x_j) over ordered pairs (i,j) and (j,i) gives 2x;
            // the cross terms touch x_i once through (i,j) and once through (j,i).
            let gxx = 2.0 * kernels.deval(dxx) * norm;
            let gxy = kernels.deval(dxy) * norm;
            let gyx = kernels.deval(dyx) * norm;
            for c in 0..x.ncols() {
                grad[[i, c]] += gxx * 2.0 * (x[[i, c]] - x[[j, c]]);
                grad[[i, c]] -= gxy * 2.0 * (x[[i, c]] - y[[j, c]]);
                grad[[j, c]] -= gyx * 2.0 * (x[[j, c]] - y[[i, c]]);
            }
        }
    }
    Ok((value * norm, grad))
}

/// Which camera a feature row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Camera {
    Source,
    Target,
}

impl Camera {
    pub fn as_str(self) -> &'static str {
        match self {
            Camera::Source => "source",
            Camera::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Camera::Source),
            "target" => Ok(Camera::Target),
            other => Err(Error::Data(format!("unknown camera '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMeta {
    pub patient_id: u64,
    pub laterality: Laterality,
    pub camera: Camera,
}

/// Feature rows with per-row provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    rows: Array2<f64>,
    meta: Vec<FeatureMeta>,
}

impl FeatureBatch {
    pub fn new(rows: Array2<f64>, meta: Vec<FeatureMeta>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::Argument("feature batch needs at least one non-empty row".into()));
        }
        if rows.nrows() != meta.len() {
            return Err(Error::Argument(format!("{} rows but {} meta entries", rows.nrows(), meta.len())));
        }
        Ok(Self { rows, meta })
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn meta(&self) -> &[FeatureMeta] {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn select(&self, keep: impl Fn(&FeatureMeta) -> bool) -> Option<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.meta[i])).collect();
        if idx.is_empty() {
            return None;
        }
        Some(Self {
            rows: self.rows.select(Axis(0), &idx),
            meta: idx.iter().map(|&i| self.meta[i]).collect(),
        })
    }

    /// CSV with a `# d=<D> n=<n>` comment line, then a header
    /// `patient_id,laterality,camera,f0,...`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# d={} n={}\npatient_id,laterality,camera", self.dim(), self.len());
        for k in 0..self.dim() {
            out.push_str(&format!(",f{k}"));
        }
        out.push('\n');
        for (m, row) in self.meta.iter().zip(self.rows.rows()) {
            out.push_str(&format!("{},{},{}", m.patient_id, m.laterality.as_str(), m.camera.as_str()));
            for v in row {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Data(format!("feature CSV: {msg}"));
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let (d, n) = parse_dims(first).ok_or_else(|| bad(format!("bad header line '{first}'")))?;
        let header = lines.next().ok_or_else(|| bad("missing column header".into()))?;
        if header.split(',').count() != 3 + d {
            return Err(bad(format!("expected {} columns", 3 + d)));
        }
        let mut rows = Array2::zeros((n, d));
        let mut meta = Vec::with_capacity(n);
        for (i, line) in lines.enumerate() {
            if i >= n {
                return Err(bad(format!("more than {n} rows")));
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 + d {
                return Err(bad(format!("row {i} has {} fields", fields.len())));
            }
            let patient_id = fields[0].parse().map_err(|_| bad(format!("row {i}: bad patient id")))?;
            let laterality = Laterality::parse(fields[1]).map_err(|_| bad(format!("row {i}: bad laterality")))?;
            let camera = Camera::parse(fields[2])?;
            for k in 0..d {
                rows[[i, k]] = fields[3 + k].parse().map_err(|_| bad(format!("row {i}: bad value")))?;
            }
            meta.push(FeatureMeta {
                patient_id,
                laterality,
                camera,
            });
        }
        if meta.len() != n {
            return Err(bad(format!("expected {n} rows, found {}", meta.len())));
        }
        Self::new(rows, meta)
    }
}

fn parse_dims(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix("# ")?;
    let mut d = None;
    let mut n = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("d=") {
            d = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("n=") {
            n = v.parse().ok();
        }
    }
    Some((d?, n?))
}

/// What the linear probe predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    Laterality,
    Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Fraction of patients used for training the probe.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.1,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.learning_rate > 0.0) || !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(
                "probe needs steps >= 1, learning_rate > 0 and train_fraction in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// ROC-AUC by the Mann-Whitney statistic, ties counted as one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument("scores and labels differ in length".into()));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    let mut wins = 0.0;
    for p in &pos {
        for q in &neg {
            wins += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trains a logistic-regression probe on a patient-level split of
/// `features` and returns its ROC-AUC on the held-out patients.
pub fn linear_probe_auc(features: &FeatureBatch, target: ProbeTarget, config: &ProbeConfig) -> Result<f64> {
    config.validate()?;
    let labels: Vec<bool> = features
        .meta
        .iter()
        .map(|m| match target {
            ProbeTarget::Laterality => m.laterality == Laterality::Right,
            ProbeTarget::Camera => m.camera == Camera::Target,
        })
        .collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::Data("probe target has a single class".into()));
    }

    let mut patients: Vec<u64> = features.meta.iter().map(|m| m.patient_id).collect();
    patients.sort_unstable();
    patients.dedup();
    if patients.len() < 2 {
        return Err(Error::Data("probe needs at least two patients".into()));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_train = ((patients.len() as f64 * config.train_fraction).round() as usize).clamp(1, patients.len() - 1);
    let train_ids: std::collections::HashSet<u64> = patients[..n_train].iter().copied().collect();
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..features.len()).partition(|&i| train_ids.contains(&features.meta[i].patient_id));

    let x_train = features.rows.select(Axis(0), &train);
    let x_test = features.rows.select(Axis(0), &test);
    let y_train: Array1<f64> = train.iter().map(|&i| if labels[i] { 1.0 } else { 0.0 }).collect();
    let y_test: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
    if y_train.iter().all(|&v| v == y_train[0]) {
        return Err(Error::Data("probe training split has a single class".into()));
    }

    let mean = x_train.mean_axis(Axis(0)).expect("non-empty");
    let std = x_train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let standardize = |x: &Array2<f64>| (x - &mean) / &std;
    let xs = standardize(&x_train);
    let xt = standardize(&x_test);

    let n = xs.nrows() as f64;
    let mut w = Array1::<f64>::zeros(xs.ncols());
    let mut b = 0.0;
    for _ in 0..config.steps {
        let residual = (xs.dot(&w) + b).mapv(sigmoid) - &y_train;
        let gw = xs.t().dot(&residual) / n;
        let gb = residual.sum() / n;
        w.scaled_add(-config.learning_rate, &gw);
        b -= config.learning_rate * gb;
    }
    let scores = (xt.dot(&w) + b).to_vec();
    roc_auc(&scores, &y_test)
}
