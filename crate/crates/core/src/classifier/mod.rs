//! Patch classifier: input -> 4096 ReLU -> 4096 ReLU -> 2-way softmax, with
//! inverted dropout on both hidden layers during training.

mod checkpoint;
mod train;

use std::fmt::Debug;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, ScalarOperand, Zip};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{ConcatFeature, EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::seeds;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use train::{
    train, EarlyStopping, EpochAugmenter, LabeledFeatures, StopDecision, StopReason, TrainConfig, TrainHistory,
    CONVERGED_LOSS,
};

pub const HIDDEN_UNITS: usize = 4096;
pub const OUTPUTS: usize = 2;

/// Scalar type the network runs in: `f32` for training, `f64` for gradient checks.
pub trait Real: ndarray::LinalgScalar + Float + ScalarOperand + Send + Sync + Debug + 'static {
    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<F: Real = f32> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
    pub w3: Array2<F>,
    pub b3: Array1<F>,
}

impl<F: Real> ClassifierParams<F> {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        ClassifierParams {
            w1: Array2::zeros((input_dim, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((hidden, OUTPUTS)),
            b3: Array1::zeros(OUTPUTS),
        }
    }

    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        for (layer, w) in [&mut p.w1, &mut p.w2, &mut p.w3].into_iter().enumerate() {
            let mut rng = seeds::rng(seed, &[seeds::TAG_INIT, layer as u64]);
            let scale = 1.0 / (w.nrows() as f64).sqrt();
            w.mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                F::of(z * scale)
            });
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn slices(&self) -> [&[F]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [F]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn num_parameters(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

/// Classifier for `m_count` concatenated 512-d embeddings with 4096-unit hidden layers.
pub fn init_classifier(m_count: usize, seed: u64) -> Result<ClassifierParams<f32>> {
    init_classifier_with_hidden(m_count, HIDDEN_UNITS, seed)
}

pub fn init_classifier_with_hidden(m_count: usize, hidden: usize, seed: u64) -> Result<ClassifierParams<f32>> {
    if !(1..=3).contains(&m_count) {
        return Err(Error::invalid(format!("m_count must be 1, 2 or 3, got {m_count}")));
    }
    if hidden == 0 {
        return Err(Error::invalid("hidden layer width must be positive"));
    }
    Ok(ClassifierParams::init(EMBEDDING_DIM * m_count, hidden, seed))
}

/// Activations kept for backpropagation. `gate*` holds the derivative of the
/// (ReLU, dropout) pair: the dropout scale where the unit fired, else zero.
pub struct ForwardCache<F: Real> {
    pub x: Array2<F>,
    pub h1: Array2<F>,
    pub gate1: Array2<F>,
    pub h2: Array2<F>,
    pub gate2: Array2<F>,
    pub logits: Array2<F>,
    pub probs: Array2<F>,
}

fn dense<F: Real>(x: &ArrayView2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut z = Array2::zeros((x.nrows(), w.ncols()));
    general_mat_mul(F::one(), x, w, F::zero(), &mut z);
    for mut row in z.rows_mut() {
        row.zip_mut_with(b, |a, &c| *a = *a + c);
    }
    z
}

fn relu_dropout<F: Real>(z: Array2<F>, mode: Mode, dropout: f64, rng: &mut impl Rng) -> (Array2<F>, Array2<F>) {
    let keep = 1.0 - dropout;
    let scale = F::of(1.0 / keep);
    let mut gate = Array2::zeros(z.raw_dim());
    match mode {
        Mode::Train if dropout > 0.0 => {
            for (g, &v) in gate.iter_mut().zip(z.iter()) {
                let kept = rng.random::<f64>() < keep;
                if kept && v > F::zero() {
                    *g = scale;
                }
            }
        }
        _ => Zip::from(&mut gate).and(&z).for_each(|g, &v| {
            if v > F::zero() {
                *g = F::one();
            }
        }),
    }
    let h = z * &gate;
    (h, gate)
}

fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Batched forward pass. `rng` supplies dropout noise in train mode.
pub fn forward_batch<F: Real>(
    params: &ClassifierParams<F>,
    x: ArrayView2<F>,
    mode: Mode,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<ForwardCache<F>> {
    if x.ncols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} features", params.input_dim()),
            actual: x.ncols().to_string(),
        });
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::invalid(format!("dropout rate {dropout} outside [0, 1)")));
    }
    let (h1, gate1) = relu_dropout(dense(&x, &params.w1, &params.b1), mode, dropout, rng);
    let (h2, gate2) = relu_dropout(dense(&h1.view(), &params.w2, &params.b2), mode, dropout, rng);
    let logits = dense(&h2.view(), &params.w3, &params.b3);
    let probs = softmax_rows(&logits);
    Ok(ForwardCache {
        x: x.to_owned(),
        h1,
        gate1,
        h2,
        gate2,
        logits,
        probs,
    })
}

/// Single-feature forward pass returning `[p_good, p_bad]`.
pub fn forward(
    params: &ClassifierParams<f32>,
    feature: &ConcatFeature,
    mode: Mode,
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<([f64; 2], ForwardCache<f32>)> {
    let x = ArrayView2::from_shape((1, feature.values().len()), feature.values())
        .map_err(|e| Error::invalid(e.to_string()))?;
    let cache = forward_batch(params, x, mode, dropout, rng)?;
    let p = [f64::from(cache.probs[[0, 0]]), f64::from(cache.probs[[0, 1]])];
    Ok((p, cache))
}

/// Mean softmax cross-entropy of the batch, computed from logits.
pub fn cross_entropy<F: Real>(cache: &ForwardCache<F>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    cache
        .logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            lse - row[y].as_f64()
        })
        .sum::<f64>()
        / n
}

/// Gradient of [`cross_entropy`] with respect to every parameter, written into `grads`.
pub fn backward_into<F: Real>(
    params: &ClassifierParams<F>,
    cache: &ForwardCache<F>,
    labels: &[usize],
    grads: &mut ClassifierParams<F>,
) {
    let n = F::of(labels.len() as f64);
    let mut dz3 = cache.probs.clone();
    for (mut row, &y) in dz3.rows_mut().into_iter().zip(labels) {
        row[y] = row[y] - F::one();
        row.mapv_inplace(|v| v / n);
    }
    general_mat_mul(F::one(), &cache.h2.t(), &dz3, F::zero(), &mut grads.w3);
    grads.b3.assign(&dz3.sum_axis(Axis(0)));

    let mut dz2 = Array2::zeros(cache.h2.raw_dim());
    general_mat_mul(F::one(), &dz3, &params.w3.t(), F::zero(), &mut dz2);
    dz2.zip_mut_with(&cache.gate2, |a, &g| *a = *a * g);
    general_mat_mul(F::one(), &cache.h1.t(), &dz2, F::zero(), &mut grads.w2);
    grads.b2.assign(&dz2.sum_axis(Axis(0)));

    let mut dz1 = Array2::zeros(cache.h1.raw_dim());
    general_mat_mul(F::one(), &dz2, &params.w2.t(), F::zero(), &mut dz1);
    dz1.zip_mut_with(&cache.gate1, |a, &g| *a = *a * g);
    general_mat_mul(F::one(), &cache.x.t(), &dz1, F::zero(), &mut grads.w1);
    grads.b1.assign(&dz1.sum_axis(Axis(0)));
}

pub fn backward<F: Real>(
    params: &ClassifierParams<F>,
    cache: &ForwardCache<F>,
    labels: &[usize],
) -> ClassifierParams<F> {
    let mut grads = ClassifierParams::zeros(params.input_dim(), params.hidden());
    backward_into(params, cache, labels, &mut grads);
    grads
}

/// Class from `[p_good, p_bad]`: 1 (bad) unless good is strictly more likely.
pub fn decide(probs: [f64; 2]) -> u8 {
    u8::from(probs[1] >= probs[0])
}

pub fn predict_patch(params: &ClassifierParams<f32>, feature: &ConcatFeature) -> Result<u8> {
    let mut rng = seeds::rng(0, &[]);
    let (p, _) = forward(params, feature, Mode::Eval, 0.0, &mut rng)?;
    Ok(decide(p))
}

/// Eval-mode probabilities for many rows, computed in fixed-size chunks.
pub fn predict_proba<F: Real>(params: &ClassifierParams<F>, x: ArrayView2<F>) -> Result<Vec<[f64; 2]>> {
    let mut rng = seeds::rng(0, &[]);
    let mut out = Vec::with_capacity(x.nrows());
    for chunk in x.axis_chunks_iter(Axis(0), 256) {
        let cache = forward_batch(params, chunk, Mode::Eval, 0.0, &mut rng)?;
        out.extend(cache.probs.rows().into_iter().map(|r| [r[0].as_f64(), r[1].as_f64()]));
    }
    Ok(out)
}

pub fn predict_labels<F: Real>(params: &ClassifierParams<F>, x: ArrayView2<F>) -> Result<Vec<u8>> {
    Ok(predict_proba(params, x)?.into_iter().map(decide).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{concat_features, FeatureVector, PatchRef};
    use crate::pyramid::Magnification;
    use ndarray::Array;

    fn feature(seed: u64) -> ConcatFeature {
        let mut rng = seeds::rng(seed, &[]);
        let v = (0..EMBEDDING_DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        concat_features(&[FeatureVector::new(v, Magnification::X20, PatchRef::new("s", (0, 0))).unwrap()]).unwrap()
    }

    #[test]
    fn init_shapes_follow_scale_count() {
        let p1 = init_classifier_with_hidden(1, 64, 0).unwrap();
        assert_eq!(p1.w1.dim(), (512, 64));
        let p3 = init_classifier_with_hidden(3, 64, 0).unwrap();
        assert_eq!(p3.w1.dim(), (1536, 64));
        assert_eq!(p3.w3.dim(), (64, 2));
        assert_eq!(p3.b3.len(), 2);
        assert!(init_classifier(4, 0).is_err());
        assert!(init_classifier_with_hidden(1, 0, 0).is_err());
    }

    #[test]
    fn full_size_init_is_paper_shape_and_deterministic() {
        let a = init_classifier(1, 42).unwrap();
        assert_eq!(a.w1.dim(), (512, HIDDEN_UNITS));
        assert_eq!(a.w2.dim(), (HIDDEN_UNITS, HIDDEN_UNITS));
        assert_eq!(a.w3.dim(), (HIDDEN_UNITS, 2));
        assert!(a.b1.iter().all(|&b| b == 0.0));
        let b = init_classifier(1, 42).unwrap();
        assert_eq!(a, b);
        let std = (a.w2.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>() / a.w2.len() as f64).sqrt();
        assert!((std - 1.0 / 64.0).abs() < 1e-3, "{std}");
    }

    #[test]
    fn eval_probabilities_sum_to_one() {
        let p = init_classifier_with_hidden(1, 32, 3).unwrap();
        let mut rng = seeds::rng(0, &[]);
        for s in 0..20 {
            let (probs, _) = forward(&p, &feature(s), Mode::Eval, 0.5, &mut rng).unwrap();
            assert!((probs[0] + probs[1] - 1.0).abs() < 1e-6);
        }
        // In f64 the normalization holds to 1e-9.
        let p64 = ClassifierParams::<f64>::init(512, 32, 3);
        let x = Array::from_shape_fn((5, 512), |(i, j)| ((i * 7 + j) % 11) as f64 / 5.0 - 1.0);
        let cache = forward_batch(&p64, x.view(), Mode::Eval, 0.5, &mut rng).unwrap();
        for row in cache.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_network_is_a_tie_decided_bad() {
        let p = ClassifierParams::<f32>::zeros(512, 16);
        let mut rng = seeds::rng(0, &[]);
        let (probs, _) = forward(&p, &feature(1), Mode::Eval, 0.0, &mut rng).unwrap();
        assert_eq!(probs, [0.5, 0.5]);
        assert_eq!(predict_patch(&p, &feature(1)).unwrap(), 1);
    }

    #[test]
    fn decision_rule() {
        assert_eq!(decide([0.9, 0.1]), 0);
        assert_eq!(decide([0.1, 0.9]), 1);
        assert_eq!(decide([0.5, 0.5]), 1);
    }

    #[test]
    fn dimension_mismatch() {
        let p = init_classifier_with_hidden(2, 8, 0).unwrap();
        assert!(matches!(
            predict_patch(&p, &feature(0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn inverted_dropout_preserves_expected_activation() {
        let p = ClassifierParams::<f64>::init(512, 64, 9);
        let x = Array::from_shape_fn((1, 512), |(_, j)| ((j * 13) % 17) as f64 / 8.0 - 1.0);
        let mut rng = seeds::rng(5, &[]);
        let eval = forward_batch(&p, x.view(), Mode::Eval, 0.5, &mut rng).unwrap();
        let draws = 10_000;
        // Statistic: total first-layer activation. The layer's input is never
        // dropped, so its expectation under inverted dropout is exactly the
        // eval-mode value.
        let target: f64 = eval.h1.sum();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let c = forward_batch(&p, x.view(), Mode::Train, 0.5, &mut rng).unwrap();
            let t = c.h1.sum();
            sum += t;
            sum_sq += t * t;
        }
        let n = f64::from(draws);
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) / n).sqrt();
        assert!((mean - target).abs() <= 3.0 * se, "{mean} vs {target} (se {se})");
    }
}
