//! Tied-covariance Gaussian discriminant (LDA).
//!
//! One mean per class and a single covariance shared by all classes, fit by
//! maximum likelihood. Class priors are uniform, so prediction is the class
//! with the smallest squared Mahalanobis distance. Distances go through the
//! Cholesky factor `L` of `Σ + εI`: `d² = ‖L⁻¹(x − μ)‖²`.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use thiserror::Error;

pub const MODEL_MAGIC: &[u8; 4] = b"CLDA";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LdaError {
    #[error("cannot fit on an empty dataset")]
    Empty,
    #[error("degenerate fit: every record belongs to class {0} and there is no prior model")]
    DegenerateFit(usize),
    #[error("class {0} is absent from the model")]
    AbsentClass(usize),
    #[error("model has no present class")]
    NoClasses,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {num_labels} labels")]
    LabelOutOfRange { label: usize, num_labels: usize },
    #[error("shrinkage must be positive, got {0}")]
    BadShrinkage(f64),
    #[error("covariance plus shrinkage is not positive definite")]
    NotPositiveDefinite,
    #[error("timestamp must be at least 1")]
    BadTimestamp,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Format(String),
}

/// How the ridge `ε` added to the covariance is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Shrinkage {
    /// `1e-6 · trace(Σ) / dim`, floored at `1e-10`.
    #[default]
    Auto,
    Fixed(f64),
}

impl Shrinkage {
    pub fn resolve(self, covariance: &DMatrix<f64>) -> Result<f64, LdaError> {
        match self {
            Shrinkage::Auto => {
                let dim = covariance.nrows().max(1) as f64;
                Ok((1e-6 * covariance.trace() / dim).max(1e-10))
            }
            Shrinkage::Fixed(eps) if eps > 0.0 && eps.is_finite() => Ok(eps),
            Shrinkage::Fixed(eps) => Err(LdaError::BadShrinkage(eps)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LdaModel {
    means: Vec<DVector<f64>>,
    covariance: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    /// `L⁻¹ μ_c`, cached for batch prediction.
    whitened_means: Vec<DVector<f64>>,
    shrinkage_eps: f64,
    timestamp: u64,
    class_present: Vec<bool>,
}

impl PartialEq for LdaModel {
    fn eq(&self, other: &Self) -> bool {
        self.means == other.means
            && self.covariance == other.covariance
            && self.shrinkage_eps == other.shrinkage_eps
            && self.timestamp == other.timestamp
            && self.class_present == other.class_present
    }
}

impl LdaModel {
    /// Assemble a model from parameters, factorizing `covariance + eps·I`.
    pub fn from_parts(
        means: Vec<DVector<f64>>,
        covariance: DMatrix<f64>,
        shrinkage_eps: f64,
        timestamp: u64,
        class_present: Vec<bool>,
    ) -> Result<Self, LdaError> {
        let dim = covariance.nrows();
        if covariance.ncols() != dim {
            return Err(LdaError::Shape("covariance is not square".into()));
        }
        if means.len() != class_present.len() {
            return Err(LdaError::Shape(format!(
                "{} means for {} class flags",
                means.len(),
                class_present.len()
            )));
        }
        if let Some(m) = means.iter().find(|m| m.len() != dim) {
            return Err(LdaError::Shape(format!(
                "mean of length {} for covariance of size {dim}",
                m.len()
            )));
        }
        if !(shrinkage_eps > 0.0 && shrinkage_eps.is_finite()) {
            return Err(LdaError::BadShrinkage(shrinkage_eps));
        }
        if timestamp == 0 {
            return Err(LdaError::BadTimestamp);
        }
        let mut ridge = covariance.clone();
        for i in 0..dim {
            ridge[(i, i)] += shrinkage_eps;
        }
        let factor = Cholesky::new(ridge).ok_or(LdaError::NotPositiveDefinite)?;
        let whitened_means = means
            .iter()
            .map(|m| {
                factor
                    .l_dirty()
                    .solve_lower_triangular(m)
                    .expect("non-singular factor")
            })
            .collect();
        Ok(Self {
            means,
            covariance,
            factor,
            whitened_means,
            shrinkage_eps,
            timestamp,
            class_present,
        })
    }

    /// Maximum-likelihood fit: class means and the pooled covariance divided by
    /// the total record count. Classes without records are flagged absent and
    /// get a zero mean. A single present class is only accepted when the caller
    /// has a `prior` model to inherit the other classes from.
    pub fn fit<P: AsRef<[f64]> + Sync>(
        points: &[P],
        labels: &[usize],
        num_labels: usize,
        shrinkage: Shrinkage,
        prior: Option<&LdaModel>,
    ) -> Result<Self, LdaError> {
        if points.is_empty() {
            return Err(LdaError::Empty);
        }
        if points.len() != labels.len() {
            return Err(LdaError::Shape(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        let dim = points[0].as_ref().len();
        if let Some(p) = points.iter().find(|p| p.as_ref().len() != dim) {
            return Err(LdaError::Shape(format!(
                "point of length {} among points of length {dim}",
                p.as_ref().len()
            )));
        }
        let mut sums = vec![DVector::<f64>::zeros(dim); num_labels];
        let mut counts = vec![0usize; num_labels];
        for (p, &label) in points.iter().zip(labels) {
            if label >= num_labels {
                return Err(LdaError::LabelOutOfRange { label, num_labels });
            }
            counts[label] += 1;
            for (s, x) in sums[label].iter_mut().zip(p.as_ref()) {
                *s += x;
            }
        }
        let class_present: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
        let present = class_present.iter().filter(|&&p| p).count();
        if present == 1 && prior.is_none() {
            let only = class_present.iter().position(|&p| p).expect("one present");
            return Err(LdaError::DegenerateFit(only));
        }
        let means: Vec<DVector<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { s })
            .collect();

        // Σ = XᵀX / n over the class-centered rows, accumulated in fixed-size
        // chunks and summed in chunk order.
        const CHUNK: usize = 2048;
        let n = points.len();
        let partials: Vec<DMatrix<f64>> = points
            .par_chunks(CHUNK)
            .zip(labels.par_chunks(CHUNK))
            .map(|(pts, labs)| {
                let centered = DMatrix::from_fn(pts.len(), dim, |i, j| {
                    pts[i].as_ref()[j] - means[labs[i]][j]
                });
                centered.tr_mul(&centered)
            })
            .collect();
        let mut covariance = DMatrix::zeros(dim, dim);
        for part in &partials {
            covariance += part;
        }
        covariance /= n as f64;
        symmetrize(&mut covariance);
        let eps = shrinkage.resolve(&covariance)?;
        Self::from_parts(means, covariance, eps, 1, class_present)
    }

    pub fn num_labels(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower Cholesky factor of `Σ + εI`.
    pub fn precision_factor(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn shrinkage_eps(&self) -> f64 {
        self.shrinkage_eps
    }

    pub fn timestamp(&self) -> u64 {
        self.timestamp
    }

    pub fn class_present(&self) -> &[bool] {
        &self.class_present
    }

    /// Stored scalars: one covariance regardless of the number of classes.
    pub fn parameter_count(&self) -> usize {
        self.num_labels() * self.dim() + self.dim() * self.dim()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), LdaError> {
        if x.len() != self.dim() {
            return Err(LdaError::Shape(format!(
                "input of length {} for model of dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Squared Mahalanobis distance from `x` to the mean of `class`.
    pub fn mahalanobis(&self, x: &[f64], class: usize) -> Result<f64, LdaError> {
        self.check_dim(x)?;
        if !self.class_present.get(class).copied().unwrap_or(false) {
            return Err(LdaError::AbsentClass(class));
        }
        let diff = DVector::from_column_slice(x) - &self.means[class];
        let z = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("non-singular factor");
        Ok(z.norm_squared())
    }

    /// Distances to every class mean; absent classes get `None`.
    pub fn distances(&self, x: &[f64]) -> Result<Vec<Option<f64>>, LdaError> {
        self.check_dim(x)?;
        let z = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&DVector::from_column_slice(x))
            .expect("non-singular factor");
        Ok(self
            .whitened_means
            .iter()
            .zip(&self.class_present)
            .map(|(m, &present)| present.then(|| (&z - m).norm_squared()))
            .collect())
    }

    /// Nearest present class in Mahalanobis distance; ties to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize, LdaError> {
        let mut best: Option<(usize, f64)> = None;
        for (c, d) in self.distances(x)?.into_iter().enumerate() {
            if let Some(d) = d {
                if best.is_none_or(|(_, b)| d < b) {
                    best = Some((c, d));
                }
            }
        }
        best.map(|(c, _)| c).ok_or(LdaError::NoClasses)
    }

    /// `softmax(-d/2)` over present classes; absent classes get probability 0.
    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>, LdaError> {
        let dists = self.distances(x)?;
        let min = dists
            .iter()
            .flatten()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if !min.is_finite() {
            return Err(LdaError::NoClasses);
        }
        let weights: Vec<f64> = dists
            .iter()
            .map(|d| d.map_or(0.0, |d| (-0.5 * (d - min)).exp()))
            .collect();
        let total: f64 = weights.iter().sum();
        Ok(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn predict_batch<P: AsRef<[f64]> + Sync>(
        &self,
        points: &[P],
    ) -> Result<Vec<usize>, LdaError> {
        points
            .par_iter()
            .map(|p| self.predict(p.as_ref()))
            .collect()
    }

    pub fn posterior_batch<P: AsRef<[f64]> + Sync>(
        &self,
        points: &[P],
    ) -> Result<Vec<Vec<f64>>, LdaError> {
        points
            .par_iter()
            .map(|p| self.posterior(p.as_ref()))
            .collect()
    }

    /// Running average of successive fits: weight `(t-1)/t` on `prev` and
    /// `1/t` on `new_fit`. A class present in only one input takes that input's
    /// mean. The result carries timestamp `t + 1`.
    pub fn moving_average_update(
        prev: &LdaModel,
        new_fit: &LdaModel,
        t: u64,
    ) -> Result<LdaModel, LdaError> {
        if t == 0 {
            return Err(LdaError::BadTimestamp);
        }
        if prev.dim() != new_fit.dim() || prev.num_labels() != new_fit.num_labels() {
            return Err(LdaError::Shape(format!(
                "cannot average a {}x{} model with a {}x{} model",
                prev.num_labels(),
                prev.dim(),
                new_fit.num_labels(),
                new_fit.dim()
            )));
        }
        let w = 1.0 / t as f64;
        let mut means = Vec::with_capacity(prev.num_labels());
        let mut present = Vec::with_capacity(prev.num_labels());
        for c in 0..prev.num_labels() {
            let (a, b) = (prev.class_present[c], new_fit.class_present[c]);
            means.push(match (a, b) {
                (true, true) => blend_vector(&prev.means[c], &new_fit.means[c], w),
                (true, false) => prev.means[c].clone(),
                _ => new_fit.means[c].clone(),
            });
            present.push(a || b);
        }
        let mut covariance = prev
            .covariance
            .zip_map(&new_fit.covariance, |a, b| blend(a, b, w));
        symmetrize(&mut covariance);
        let eps = blend(prev.shrinkage_eps, new_fit.shrinkage_eps, w);
        LdaModel::from_parts(means, covariance, eps, t + 1, present)
    }

    pub fn encode(&self) -> Vec<u8> {
        let (y, p) = (self.num_labels(), self.dim());
        let mut buf = Vec::with_capacity(32 + y + 8 * (y * p + p * p));
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(y as u32).to_le_bytes());
        buf.extend_from_slice(&(p as u32).to_le_bytes());
        buf.extend(self.class_present.iter().map(|&b| b as u8));
        for m in &self.means {
            for v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        // row-major
        for i in 0..p {
            for j in 0..p {
                buf.extend_from_slice(&self.covariance[(i, j)].to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.shrinkage_eps.to_le_bytes());
        buf.extend_from_slice(&self.timestamp.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LdaError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], LdaError> {
            let out = bytes.get(pos..pos + n).ok_or_else(|| {
                LdaError::Format(format!("unexpected end of file at byte {}", bytes.len()))
            })?;
            pos += n;
            Ok(out)
        };
        if take(4)? != MODEL_MAGIC {
            return Err(LdaError::Format(
                "bad magic bytes: expected \"CLDA\"".into(),
            ));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_at(take(4)?);
        if version != MODEL_VERSION {
            return Err(LdaError::Format(format!("unsupported version {version}")));
        }
        let y = u32_at(take(4)?) as usize;
        let p = u32_at(take(4)?) as usize;
        let class_present = take(y)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(LdaError::Format(format!("class flag {b}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut means = Vec::with_capacity(y);
        for _ in 0..y {
            let raw = take(8 * p)?;
            means.push(DVector::from_iterator(p, raw.chunks_exact(8).map(f64_at)));
        }
        let raw = take(8 * p * p)?;
        let covariance = DMatrix::from_row_iterator(p, p, raw.chunks_exact(8).map(f64_at));
        let eps = f64_at(take(8)?);
        let timestamp = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        if pos != bytes.len() {
            return Err(LdaError::Format(format!("trailing bytes after byte {pos}")));
        }
        Self::from_parts(means, covariance, eps, timestamp, class_present)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LdaError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LdaError> {
        Self::decode(&fs::read(path)?)
    }
}

/// `(1 - w)·a + w·b`, exact at `w = 1` and when `a == b`.
fn blend(a: f64, b: f64, w: f64) -> f64 {
    if w == 1.0 {
        b
    } else {
        a + w * (b - a)
    }
}

fn blend_vector(a: &DVector<f64>, b: &DVector<f64>, w: f64) -> DVector<f64> {
    a.zip_map(b, |x, y| blend(x, y, w))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
