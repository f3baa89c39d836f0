//! Trainable parameter containers and their forward/backward passes.
//!
//! The pipeline is `raw features → FeatureAdapter → VisionClassifier` for
//! prediction, with a `ProjectionHead` branch into the text-embedding space
//! used only during training. `AlignMap` is the bias-free linear map used by
//! the proxy-matching objective.

mod snapshot;

pub use snapshot::{parameter_distance, DistanceGroup, ModelSnapshot, SnapshotError};

use serde::{Deserialize, Serialize};

use crate::ndcore::{norm, Matrix, NdError, NdResult, DEGENERATE_NORM};
use crate::rng::{gaussian, TesRng};
use crate::Scalar;

/// Trainable parameter groups, in snapshot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Adapter,
    Classifier,
    Head,
    Align,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::Adapter, Self::Classifier, Self::Head, Self::Align];

    pub fn name(self) -> &'static str {
        match self {
            Self::Adapter => "adapter",
            Self::Classifier => "classifier",
            Self::Head => "head",
            Self::Align => "align",
        }
    }
}

/// Linear classifier `W` (d × C), one proxy column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionClassifier<T> {
    pub weights: Matrix<T>,
}

impl<T: Scalar> VisionClassifier<T> {
    pub fn new(weights: Matrix<T>) -> NdResult<Self> {
        if !weights.is_finite() {
            return Err(NdError::NonFinite { op: "VisionClassifier::new", index: 0 });
        }
        Ok(Self { weights })
    }

    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self { weights: Matrix::zeros(dim, classes) }
    }

    pub fn gaussian(dim: usize, classes: usize, std: T, rng: &mut TesRng) -> Self {
        Self { weights: Matrix::from_fn(dim, classes, |_, _| gaussian::<T>(rng) * std) }
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    /// `X · W`, no temperature.
    pub fn logits(&self, x: &Matrix<T>) -> NdResult<Matrix<T>> {
        x.matmul(&self.weights)
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: &Matrix<T>) -> NdResult<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|r| crate::ndcore::argmax(logits.row(r))).collect())
    }
}

pub fn classifier_logits<T: Scalar>(x: &Matrix<T>, clf: &VisionClassifier<T>) -> NdResult<Matrix<T>> {
    clf.logits(x)
}

/// Affine stand-in for a fine-tunable backbone: `X_raw · A + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAdapter<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> FeatureAdapter<T> {
    pub fn identity(dim: usize) -> Self {
        Self { weights: Matrix::identity(dim), bias: vec![T::zero(); dim] }
    }

    pub fn new(weights: Matrix<T>, bias: Vec<T>) -> NdResult<Self> {
        if bias.len() != weights.cols() {
            return Err(NdError::Shape { op: "FeatureAdapter::new", left: weights.shape(), right: (1, bias.len()) });
        }
        Ok(Self { weights, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, x_raw: &Matrix<T>) -> NdResult<Matrix<T>> {
        x_raw.matmul(&self.weights)?.add_row_vector(&self.bias)
    }

    /// Parameter gradient (flat: weights then bias) given `dL/d output`.
    pub fn backward(&self, x_raw: &Matrix<T>, d_out: &Matrix<T>) -> NdResult<Vec<T>> {
        let dw = x_raw.t_matmul(d_out)?;
        let mut flat = dw.into_vec();
        flat.extend(d_out.sum_rows());
        Ok(flat)
    }

    pub fn num_params(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }
}

pub fn adapt<T: Scalar>(x_raw: &Matrix<T>, adapter: &FeatureAdapter<T>) -> NdResult<Matrix<T>> {
    adapter.forward(x_raw)
}

/// Two-layer ReLU MLP followed by unit normalization, mapping vision
/// features into the text-embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// Intermediate values retained by [`ProjectionHead::forward_cached`].
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    pre_hidden: Matrix<T>,
    hidden: Matrix<T>,
    row_norms: Vec<T>,
    pub output: Matrix<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    /// He-initialised weights, small positive first-layer bias, zero output bias.
    pub fn init(dim: usize, hidden: usize, out: usize, rng: &mut TesRng) -> Self {
        let s1 = T::of((2.0 / dim as f64).sqrt());
        let s2 = T::of((2.0 / hidden as f64).sqrt());
        Self {
            w1: Matrix::from_fn(dim, hidden, |_, _| gaussian::<T>(rng) * s1),
            b1: vec![T::of(0.01); hidden],
            w2: Matrix::from_fn(hidden, out, |_, _| gaussian::<T>(rng) * s2),
            b2: vec![T::zero(); out],
        }
    }

    pub fn new(w1: Matrix<T>, b1: Vec<T>, w2: Matrix<T>, b2: Vec<T>) -> NdResult<Self> {
        if b1.len() != w1.cols() || w2.rows() != w1.cols() || b2.len() != w2.cols() {
            return Err(NdError::Shape { op: "ProjectionHead::new", left: w1.shape(), right: w2.shape() });
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.rows() * self.w1.cols() + self.b1.len() + self.w2.rows() * self.w2.cols() + self.b2.len()
    }

    pub fn forward(&self, x: &Matrix<T>) -> NdResult<Matrix<T>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &Matrix<T>) -> NdResult<HeadCache<T>> {
        let pre_hidden = x.matmul(&self.w1)?.add_row_vector(&self.b1)?;
        let hidden = pre_hidden.map(|v| v.max(T::zero()));
        let mut output = hidden.matmul(&self.w2)?.add_row_vector(&self.b2)?;
        let mut row_norms = Vec::with_capacity(output.rows());
        for r in 0..output.rows() {
            let n = norm(output.row(r));
            if !(n.as_f64() > DEGENERATE_NORM) {
                return Err(NdError::DegenerateRow { index: r, norm: n.as_f64() });
            }
            for v in output.row_mut(r) {
                *v /= n;
            }
            row_norms.push(n);
        }
        Ok(HeadCache { pre_hidden, hidden, row_norms, output })
    }

    /// Back-propagates `dL/d output` (unit-normalized rows). Returns the flat
    /// parameter gradient (w1, b1, w2, b2) and `dL/d x`.
    pub fn backward(&self, x: &Matrix<T>, cache: &HeadCache<T>, d_out: &Matrix<T>) -> NdResult<(Vec<T>, Matrix<T>)> {
        // through y = u / |u|: du = (dy - y (y·dy)) / |u|
        let mut d_raw = d_out.clone();
        for r in 0..d_raw.rows() {
            let y = cache.output.row(r);
            let proj = crate::ndcore::dot(y, d_out.row(r));
            let n = cache.row_norms[r];
            for (dv, &yv) in d_raw.row_mut(r).iter_mut().zip(y) {
                *dv = (*dv - yv * proj) / n;
            }
        }
        let dw2 = cache.hidden.t_matmul(&d_raw)?;
        let db2 = d_raw.sum_rows();
        let mut d_hidden = d_raw.matmul_t(&self.w2)?;
        for (dh, &pre) in d_hidden.as_mut_slice().iter_mut().zip(cache.pre_hidden.as_slice()) {
            if pre <= T::zero() {
                *dh = T::zero();
            }
        }
        let dw1 = x.t_matmul(&d_hidden)?;
        let db1 = d_hidden.sum_rows();
        let dx = d_hidden.matmul_t(&self.w1)?;
        let mut flat = dw1.into_vec();
        flat.extend(db1);
        flat.extend(dw2.into_vec());
        flat.extend(db2);
        Ok((flat, dx))
    }
}

pub fn project<T: Scalar>(x: &Matrix<T>, head: &ProjectionHead<T>) -> NdResult<Matrix<T>> {
    head.forward(x)
}

/// Bias-free linear map `h(w) = M w` from vision to text space (M is d_z × d).
#[derive(Debug, Clone, PartialEq)]
pub struct AlignMap<T> {
    pub weights: Matrix<T>,
}

impl<T: Scalar> AlignMap<T> {
    /// Truncated identity: ones on the leading diagonal.
    pub fn truncated_identity(text_dim: usize, dim: usize) -> Self {
        Self { weights: Matrix::from_fn(text_dim, dim, |r, c| if r == c { T::one() } else { T::zero() }) }
    }

    /// `M · W` (d_z × C).
    pub fn apply(&self, w: &Matrix<T>) -> NdResult<Matrix<T>> {
        self.weights.matmul(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub raw_dim: usize,
    pub dim: usize,
    pub classes: usize,
    pub hidden_dim: usize,
    pub text_dim: usize,
}

/// How the classifier is initialised before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassifierInit<T> {
    Zeros,
    Gaussian { std: T },
}

/// All trainable parameters of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub adapter: FeatureAdapter<T>,
    pub classifier: VisionClassifier<T>,
    pub head: ProjectionHead<T>,
    pub align: AlignMap<T>,
}

impl<T: Scalar> ModelState<T> {
    /// Identity adapter (`raw_dim` must equal `dim`), freshly initialised head.
    pub fn init(dims: ModelDims, classifier: ClassifierInit<T>, rng: &mut TesRng) -> NdResult<Self> {
        if dims.raw_dim != dims.dim {
            return Err(NdError::Parameter(format!(
                "identity adapter needs raw_dim == dim, got {} and {}",
                dims.raw_dim, dims.dim
            )));
        }
        let classifier = match classifier {
            ClassifierInit::Zeros => VisionClassifier::zeros(dims.dim, dims.classes),
            ClassifierInit::Gaussian { std } => VisionClassifier::gaussian(dims.dim, dims.classes, std, rng),
        };
        Ok(Self {
            adapter: FeatureAdapter::identity(dims.dim),
            classifier,
            head: ProjectionHead::init(dims.dim, dims.hidden_dim, dims.text_dim, rng),
            align: AlignMap::truncated_identity(dims.text_dim, dims.dim),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            raw_dim: self.adapter.input_dim(),
            dim: self.adapter.output_dim(),
            classes: self.classifier.num_classes(),
            hidden_dim: self.head.hidden_dim(),
            text_dim: self.head.output_dim(),
        }
    }

    /// Flat copy of one group's parameters.
    pub fn params(&self, group: ParamGroup) -> Vec<T> {
        match group {
            ParamGroup::Adapter => {
                let mut v = self.adapter.weights.as_slice().to_vec();
                v.extend_from_slice(&self.adapter.bias);
                v
            }
            ParamGroup::Classifier => self.classifier.weights.as_slice().to_vec(),
            ParamGroup::Head => {
                let h = &self.head;
                let mut v = h.w1.as_slice().to_vec();
                v.extend_from_slice(&h.b1);
                v.extend_from_slice(h.w2.as_slice());
                v.extend_from_slice(&h.b2);
                v
            }
            ParamGroup::Align => self.align.weights.as_slice().to_vec(),
        }
    }

    pub fn num_params(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Adapter => self.adapter.num_params(),
            ParamGroup::Classifier => self.classifier.weights.as_slice().len(),
            ParamGroup::Head => self.head.num_params(),
            ParamGroup::Align => self.align.weights.as_slice().len(),
        }
    }

    /// Overwrites one group from a flat vector laid out as in [`Self::params`].
    pub fn set_params(&mut self, group: ParamGroup, flat: &[T]) -> NdResult<()> {
        let expected = self.num_params(group);
        if flat.len() != expected {
            return Err(NdError::Shape { op: "set_params", left: (expected, 1), right: (flat.len(), 1) });
        }
        let mut rest = flat;
        let mut take = |dst: &mut [T]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        match group {
            ParamGroup::Adapter => {
                take(self.adapter.weights.as_mut_slice());
                take(&mut self.adapter.bias);
            }
            ParamGroup::Classifier => take(self.classifier.weights.as_mut_slice()),
            ParamGroup::Head => {
                take(self.head.w1.as_mut_slice());
                take(&mut self.head.b1);
                take(self.head.w2.as_mut_slice());
                take(&mut self.head.b2);
            }
            ParamGroup::Align => take(self.align.weights.as_mut_slice()),
        }
        Ok(())
    }

    /// Inference path: adapter then classifier. The projection head is not used.
    pub fn predict(&self, x_raw: &Matrix<T>) -> NdResult<Vec<usize>> {
        self.classifier.predict(&self.adapter.forward(x_raw)?)
    }
}
