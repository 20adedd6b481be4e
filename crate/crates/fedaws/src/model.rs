//! The instance embedder and the scorer.
//!
//! An instance is a sparse feature vector. Embedding it runs a linear lookup
//! into a token table, averages the looked-up rows, pushes the average
//! through a small ReLU MLP, and normalizes the output onto the unit sphere.
//! Scoring takes the inner product of that embedding with every row of the
//! class-embedding matrix, so logits always live in `[-1, 1]`.
//!
//! [`backward`] carries the exact gradient of a linear functional of the
//! embedding back to every parameter, including the Jacobian of the final
//! normalization; [`finite_difference_gradient`] is the independent oracle
//! the test suites compare it against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{self, Matrix, RngState};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("feature index {index} out of vocabulary range {vocab}")]
    VocabOutOfRange { index: usize, vocab: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("sparse instance is invalid: {0}")]
    InvalidInstance(&'static str),
    #[error(transparent)]
    Math(#[from] math::MathError),
}

/// A sparse feature vector: strictly increasing indices with matching weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseInstance {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseInstance {
    pub fn new(indices: Vec<usize>, weights: Vec<f64>) -> Result<Self, ModelError> {
        if indices.is_empty() {
            return Err(ModelError::InvalidInstance("no features"));
        }
        if indices.len() != weights.len() {
            return Err(ModelError::InvalidInstance("index/weight length mismatch"));
        }
        if !indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(ModelError::InvalidInstance("indices not strictly increasing"));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(ModelError::InvalidInstance("non-finite weight"));
        }
        Ok(Self { indices, weights })
    }

    /// Dense vector expressed as a sparse instance over the full vocabulary.
    pub fn dense(values: &[f64]) -> Result<Self, ModelError> {
        Self::new((0..values.len()).collect(), values.to_vec())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn max_index(&self) -> usize {
        *self.indices.last().expect("non-empty by construction")
    }
}

/// One dense layer: `z = weight . input + bias`, weight stored out x in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameters of the instance embedder: token table plus MLP layers.
///
/// ReLU is applied after every layer except the last; with no layers at all
/// the embedder reduces to the normalized token average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderParams {
    token_table: Matrix,
    layers: Vec<Layer>,
}

impl EmbedderParams {
    /// Seeded init: every weight uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
    pub fn init(vocab: usize, token_dim: usize, hidden: &[usize], rng: &mut RngState) -> Self {
        let mut token_table = Matrix::zeros(vocab, token_dim);
        let bound = 1.0 / (token_dim as f64).sqrt();
        for v in token_table.values_mut() {
            *v = rng.uniform(-bound, bound);
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = token_dim;
        for &out in hidden {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut weight = Matrix::zeros(out, fan_in);
            for v in weight.values_mut() {
                *v = rng.uniform(-bound, bound);
            }
            let bias = (0..out).map(|_| rng.uniform(-bound, bound)).collect();
            layers.push(Layer { weight, bias });
            fan_in = out;
        }
        Self { token_table, layers }
    }

    /// All-zero parameters with the same shapes as `self`; gradient container.
    pub fn zeros_like(&self) -> Self {
        Self {
            token_table: Matrix::zeros(self.token_table.rows(), self.token_table.cols()),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.token_table.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.token_table.cols()
    }

    /// Dimension of the produced embedding.
    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.token_dim(), |l| l.weight.rows())
    }

    pub fn token_table(&self) -> &Matrix {
        &self.token_table
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.token_table.values().len()
            + self
                .layers
                .iter()
                .map(|l| l.weight.values().len() + l.bias.len())
                .sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.token_table.is_finite()
            && self
                .layers
                .iter()
                .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// `self += coeff * other` over every parameter; shapes must match.
    pub fn add_scaled(&mut self, other: &Self, coeff: f64) -> Result<(), ModelError> {
        self.token_table.add_scaled(&other.token_table, coeff)?;
        if self.layers.len() != other.layers.len() {
            return Err(ModelError::ShapeMismatch {
                expected: self.layers.len(),
                got: other.layers.len(),
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, coeff)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += coeff * y;
            }
        }
        Ok(())
    }

    /// Weighted sum of parameter sets; all shapes must agree and at least one
    /// term must be present.
    pub fn weighted_sum(terms: &[(f64, &Self)]) -> Result<Self, ModelError> {
        let (_, first) = terms.first().ok_or(ModelError::ShapeMismatch { expected: 1, got: 0 })?;
        let mut out = first.zeros_like();
        for &(w, p) in terms {
            out.add_scaled(p, w)?;
        }
        Ok(out)
    }

    /// Flatten every parameter into one vector: token table first, then each
    /// layer's weight and bias. Order is the contract shared with
    /// [`Self::from_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend_from_slice(self.token_table.values());
        for l in &self.layers {
            flat.extend_from_slice(l.weight.values());
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    /// Rebuild parameters from a flat vector, taking shapes from `template`.
    pub fn from_flat(template: &Self, flat: &[f64]) -> Result<Self, ModelError> {
        if flat.len() != template.param_count() {
            return Err(ModelError::ShapeMismatch {
                expected: template.param_count(),
                got: flat.len(),
            });
        }
        let mut out = template.zeros_like();
        let mut pos = 0;
        let n = out.token_table.values().len();
        out.token_table.values_mut().copy_from_slice(&flat[pos..pos + n]);
        pos += n;
        for l in &mut out.layers {
            let n = l.weight.values().len();
            l.weight.values_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        Ok(out)
    }
}

/// The class-embedding matrix: one unit-norm row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbeddingMatrix {
    matrix: Matrix,
}

impl ClassEmbeddingMatrix {
    /// Validates that every row is unit-norm to within the shared tolerance.
    pub fn from_matrix(matrix: Matrix) -> Result<Self, ModelError> {
        for c in 0..matrix.rows() {
            let n = math::norm(matrix.row(c));
            if (n - 1.0).abs() > math::UNIT_TOLERANCE {
                return Err(ModelError::Math(math::MathError::NotNormalized { norm: n }));
            }
        }
        Ok(Self { matrix })
    }

    /// Rows drawn uniformly on the unit sphere (Gaussian then normalized).
    pub fn random_unit(classes: usize, dim: usize, rng: &mut RngState) -> Self {
        let mut matrix = Matrix::zeros(classes, dim);
        for c in 0..classes {
            let row = math::normalize(&rng.normal_vec(dim)).expect("Gaussian draw has nonzero norm");
            matrix.row_mut(c).copy_from_slice(&row);
        }
        Self { matrix }
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, c: usize) -> &[f64] {
        self.matrix.row(c)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    /// Replace row `c` with an already-unit vector, copied verbatim.
    /// Validates the norm to the shared tolerance but does not rescale, so a
    /// client's returned embedding lands in the matrix bit-exactly.
    pub fn replace_row_unit(&mut self, c: usize, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.dim() {
            return Err(ModelError::ShapeMismatch { expected: self.dim(), got: values.len() });
        }
        let n = math::norm(values);
        if (n - 1.0).abs() > math::UNIT_TOLERANCE {
            return Err(ModelError::Math(math::MathError::NotNormalized { norm: n }));
        }
        self.matrix.row_mut(c).copy_from_slice(values);
        Ok(())
    }

    /// Replace row `c`; the stored row is re-normalized.
    pub fn set_row(&mut self, c: usize, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.dim() {
            return Err(ModelError::ShapeMismatch { expected: self.dim(), got: values.len() });
        }
        let row = math::normalize(values)?;
        self.matrix.row_mut(c).copy_from_slice(&row);
        Ok(())
    }

    /// `W -= step * grad` followed by row re-normalization.
    pub fn apply_gradient_step(&mut self, grad: &Matrix, step: f64) -> Result<(), ModelError> {
        if step != 0.0 {
            self.matrix.add_scaled(grad, -step)?;
        }
        self.renormalize_rows()?;
        Ok(())
    }

    pub fn renormalize_rows(&mut self) -> Result<(), ModelError> {
        for c in 0..self.matrix.rows() {
            let row = math::normalize(self.matrix.row(c))?;
            self.matrix.row_mut(c).copy_from_slice(&row);
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.is_finite()
    }
}

/// Intermediate values of one forward pass, kept for the backward pass and
/// for kink-distance guards in the gradient tests.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    /// Weighted token average entering the MLP.
    pub averaged: Vec<f64>,
    /// Pre-activation of every layer, in order.
    pub preactivations: Vec<Vec<f64>>,
    /// MLP output before normalization.
    pub prenorm: Vec<f64>,
    /// Final unit-norm embedding.
    pub embedding: Vec<f64>,
}

impl EmbedTrace {
    /// Smallest |pre-activation| over all ReLU inputs; finite-difference
    /// checks skip points where this is close to the kink.
    pub fn min_relu_margin(&self) -> f64 {
        let relu_layers = self.preactivations.len().saturating_sub(1);
        self.preactivations[..relu_layers]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }
}

/// Embed an instance to a unit vector.
pub fn embed(params: &EmbedderParams, x: &SparseInstance) -> Result<Vec<f64>, ModelError> {
    Ok(embed_with_trace(params, x)?.embedding)
}

/// Embed and keep every intermediate value.
pub fn embed_with_trace(
    params: &EmbedderParams,
    x: &SparseInstance,
) -> Result<EmbedTrace, ModelError> {
    let averaged = averaged_lookup(params, x)?;
    let mut activation = averaged.clone();
    let mut preactivations = Vec::with_capacity(params.layers.len());
    let last = params.layers.len().saturating_sub(1);
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = layer.bias.clone();
        for (out, row) in z.iter_mut().zip(0..layer.weight.rows()) {
            *out += math::dot(layer.weight.row(row), &activation)?;
        }
        preactivations.push(z.clone());
        activation = if i < last { z.iter().map(|&v| v.max(0.0)).collect() } else { z };
    }
    let prenorm = activation;
    let embedding = math::normalize(&prenorm)?;
    Ok(EmbedTrace { averaged, preactivations, prenorm, embedding })
}

fn averaged_lookup(params: &EmbedderParams, x: &SparseInstance) -> Result<Vec<f64>, ModelError> {
    let vocab = params.vocab();
    let mut avg = vec![0.0; params.token_dim()];
    let count = x.indices().len() as f64;
    for (&idx, &w) in x.indices().iter().zip(x.weights()) {
        if idx >= vocab {
            return Err(ModelError::VocabOutOfRange { index: idx, vocab });
        }
        for (a, t) in avg.iter_mut().zip(params.token_table.row(idx)) {
            *a += w * t / count;
        }
    }
    Ok(avg)
}

/// Logits `s_c = w_c . g` for a unit embedding against every class row.
pub fn score(class_embeddings: &ClassEmbeddingMatrix, g: &[f64]) -> Result<Vec<f64>, ModelError> {
    if g.len() != class_embeddings.dim() {
        return Err(ModelError::ShapeMismatch { expected: class_embeddings.dim(), got: g.len() });
    }
    (0..class_embeddings.num_classes())
        .map(|c| math::dot(class_embeddings.row(c), g).map_err(ModelError::from))
        .collect()
}

/// Gradient of `upstream . embed(params, x)` with respect to every parameter.
///
/// Differentiates through the normalization exactly: with `v` the MLP output
/// and `y = v/|v|`, the pullback of `u` is `(u - y (y.u)) / |v|`. ReLU takes
/// subgradient 0 at the kink.
pub fn backward(
    params: &EmbedderParams,
    x: &SparseInstance,
    upstream: &[f64],
) -> Result<EmbedderParams, ModelError> {
    if upstream.len() != params.output_dim() {
        return Err(ModelError::ShapeMismatch {
            expected: params.output_dim(),
            got: upstream.len(),
        });
    }
    let trace = embed_with_trace(params, x)?;
    let mut grad = params.zeros_like();

    // Through the normalization.
    let n = math::norm(&trace.prenorm);
    let proj = math::dot(&trace.embedding, upstream)?;
    let mut delta: Vec<f64> = upstream
        .iter()
        .zip(&trace.embedding)
        .map(|(u, y)| (u - y * proj) / n)
        .collect();

    // Through the MLP, last layer to first.
    let last = params.layers.len().saturating_sub(1);
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        if i < last {
            // delta arrived through a ReLU applied to this layer's output.
            for (d, z) in delta.iter_mut().zip(&trace.preactivations[i]) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        // Input to layer i is the averaged lookup for the first layer, else
        // ReLU of the previous layer's pre-activation.
        let input_vec: Vec<f64> = if i == 0 {
            trace.averaged.clone()
        } else {
            trace.preactivations[i - 1].iter().map(|&z| z.max(0.0)).collect()
        };
        let g_layer = &mut grad.layers[i];
        for (r, &d) in delta.iter().enumerate() {
            g_layer.bias[r] += d;
            for (c, &inp) in input_vec.iter().enumerate() {
                let cur = g_layer.weight.get(r, c);
                g_layer.weight.set(r, c, cur + d * inp);
            }
        }
        // Propagate to the layer input.
        let mut prev = vec![0.0; layer.weight.cols()];
        for (r, &d) in delta.iter().enumerate() {
            for (c, p) in prev.iter_mut().enumerate() {
                *p += layer.weight.get(r, c) * d;
            }
        }
        delta = prev;
    }

    // Through the averaged lookup into the token table.
    let count = x.indices().len() as f64;
    for (&idx, &w) in x.indices().iter().zip(x.weights()) {
        let row = grad.token_table.row_mut(idx);
        for (g, d) in row.iter_mut().zip(&delta) {
            *g += w * d / count;
        }
    }
    Ok(grad)
}

/// Central-difference gradient estimate of `f` at `point`:
/// `(f(p + h e_i) - f(p - h e_i)) / 2h` per coordinate.
///
/// This is the independent oracle every analytic gradient in the crate is
/// tested against; it never shares code with the analytic paths.
pub fn finite_difference_gradient(
    f: impl Fn(&[f64]) -> f64,
    point: &[f64],
    h: f64,
) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut grad = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let plus = f(&probe);
        probe[i] = point[i] - h;
        let minus = f(&probe);
        probe[i] = point[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Relative error between an analytic and a numerical gradient entry.
pub fn gradient_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_embedder(dim: usize, rows: Vec<Vec<f64>>) -> EmbedderParams {
        let mut rng = RngState::new(0);
        let mut p = EmbedderParams::init(rows.len(), dim, &[], &mut rng);
        for (i, r) in rows.iter().enumerate() {
            p.token_table.row_mut(i).copy_from_slice(r);
        }
        p
    }

    #[test]
    fn embed_single_token_reduces_to_normalize() {
        let params = identity_embedder(2, vec![vec![3.0, 4.0]]);
        let x = SparseInstance::new(vec![0], vec![1.0]).unwrap();
        let g = embed(&params, &x).unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15);
        assert!((g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn embed_two_tokens_averages() {
        let params = identity_embedder(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let x = SparseInstance::new(vec![0, 1], vec![1.0, 1.0]).unwrap();
        let g = embed(&params, &x).unwrap();
        // normalize((r1 + r2) / 2)
        let expected = math::normalize(&[0.5, 0.5]).unwrap();
        for (a, b) in g.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn embed_matches_independent_forward_oracle() {
        // Straightforward re-implementation with nested loops and no shared code.
        fn oracle(params: &EmbedderParams, x: &SparseInstance) -> Vec<f64> {
            let mut avg = vec![0.0; params.token_dim()];
            for (k, &idx) in x.indices().iter().enumerate() {
                for j in 0..params.token_dim() {
                    avg[j] += x.weights()[k] * params.token_table().get(idx, j)
                        / x.indices().len() as f64;
                }
            }
            let mut act = avg;
            for (i, layer) in params.layers().iter().enumerate() {
                let mut z = vec![0.0; layer.weight.rows()];
                for r in 0..layer.weight.rows() {
                    let mut s = layer.bias[r];
                    for c in 0..layer.weight.cols() {
                        s += layer.weight.get(r, c) * act[c];
                    }
                    z[r] = s;
                }
                if i + 1 < params.layers().len() {
                    for v in z.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                act = z;
            }
            let n = act.iter().map(|v| v * v).sum::<f64>().sqrt();
            act.iter().map(|v| v / n).collect()
        }

        let mut rng = RngState::new(21);
        for _ in 0..20 {
            let params = EmbedderParams::init(12, 6, &[7, 5], &mut rng);
            let x = SparseInstance::new(vec![1, 4, 9], vec![0.3, -1.2, 2.0]).unwrap();
            let got = embed(&params, &x).unwrap();
            let want = oracle(&params, &x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn embed_output_unit_norm() {
        let mut rng = RngState::new(8);
        for _ in 0..50 {
            let params = EmbedderParams::init(20, 8, &[10, 4], &mut rng);
            let idx: Vec<usize> = vec![0, 3, 17];
            let w = rng.normal_vec(3);
            let x = SparseInstance::new(idx, w).unwrap();
            let g = embed(&params, &x).unwrap();
            assert!((math::norm(&g) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let mut rng = RngState::new(0);
        let params = EmbedderParams::init(4, 3, &[], &mut rng);
        let x = SparseInstance::new(vec![4], vec![1.0]).unwrap();
        assert!(matches!(
            embed(&params, &x),
            Err(ModelError::VocabOutOfRange { index: 4, vocab: 4 })
        ));
    }

    #[test]
    fn linear_embedder_is_scale_invariant() {
        let mut rng = RngState::new(13);
        let params = EmbedderParams::init(10, 5, &[], &mut rng);
        let x = SparseInstance::new(vec![2, 5, 7], vec![0.5, 1.5, -0.7]).unwrap();
        let scaled = SparseInstance::new(
            x.indices().to_vec(),
            x.weights().iter().map(|w| w * 3.25).collect(),
        )
        .unwrap();
        let a = embed(&params, &x).unwrap();
        let b = embed(&params, &scaled).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn score_identity_rows() {
        let m = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let w = ClassEmbeddingMatrix::from_matrix(m).unwrap();
        let s = score(&w, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(s, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn score_matches_row_dot_oracle_and_stays_bounded() {
        let mut rng = RngState::new(31);
        let w = ClassEmbeddingMatrix::random_unit(8, 16, &mut rng);
        let g = math::normalize(&rng.normal_vec(16)).unwrap();
        let s = score(&w, &g).unwrap();
        for (c, &sc) in s.iter().enumerate() {
            let mut expected = 0.0;
            for j in 0..16 {
                expected += w.row(c)[j] * g[j];
            }
            assert!((sc - expected).abs() < 1e-10);
            assert!(sc.abs() <= 1.0 + 1e-9);
        }
        // A row scored against itself gives 1.
        let s_self = score(&w, &w.row(3).to_vec()).unwrap();
        assert!((s_self[3] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradient() {
        let mut rng = RngState::new(5);
        let params = EmbedderParams::init(6, 4, &[5, 3], &mut rng);
        let x = SparseInstance::new(vec![0, 2], vec![1.0, -2.0]).unwrap();
        let grad = backward(&params, &x, &[0.0; 3]).unwrap();
        assert!(grad.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_hand_derivation_1d() {
        // One token, one weight t, no MLP: g = t/|t| = sign(t), so the loss
        // u*g is locally constant in t and the exact gradient is zero; the
        // normalization Jacobian must produce exactly that.
        let params = identity_embedder(1, vec![vec![2.0]]);
        let x = SparseInstance::new(vec![0], vec![1.0]).unwrap();
        let grad = backward(&params, &x, &[0.7]).unwrap();
        assert!(grad.to_flat()[0].abs() < 1e-15);

        // Two-dimensional single token (t1, t2) = (2, 1), upstream u = (1, 0):
        // d/dt of t1/|t| is (t2^2, -t1 t2)/|t|^3 = (1, -2)/5^1.5.
        let params = identity_embedder(2, vec![vec![2.0, 1.0]]);
        let x = SparseInstance::new(vec![0], vec![1.0]).unwrap();
        let grad = backward(&params, &x, &[1.0, 0.0]).unwrap();
        let flat = grad.to_flat();
        let denom = 5.0_f64.powf(1.5);
        assert!((flat[0] - 1.0 / denom).abs() < 1e-12);
        assert!((flat[1] - (-2.0 / denom)).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngState::new(77);
        let mut checked = 0;
        while checked < 20 {
            let params = EmbedderParams::init(8, 5, &[6, 4], &mut rng);
            let x = SparseInstance::new(vec![1, 3, 6], vec![0.8, -0.4, 1.3]).unwrap();
            let upstream = rng.normal_vec(4);
            let trace = embed_with_trace(&params, &x).unwrap();
            if trace.min_relu_margin() < 1e-3 {
                continue; // too close to a ReLU kink for central differences
            }
            let analytic = backward(&params, &x, &upstream).unwrap().to_flat();
            let flat = params.to_flat();
            let numeric = finite_difference_gradient(
                |p| {
                    let probe = EmbedderParams::from_flat(&params, p).unwrap();
                    let g = embed(&probe, &x).unwrap();
                    math::dot(&g, &upstream).unwrap()
                },
                &flat,
                1e-5,
            );
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(
                    gradient_relative_error(*a, *n) <= 1e-4,
                    "analytic {a} vs numeric {n}"
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn finite_difference_on_simple_functions() {
        let g = finite_difference_gradient(|p| p[0] * p[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_difference_gradient(|p| 5.0 * p[0], &[1.23], 1e-5);
        assert!((g[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = RngState::new(2);
        let params = EmbedderParams::init(5, 4, &[3, 2], &mut rng);
        let flat = params.to_flat();
        assert_eq!(flat.len(), params.param_count());
        let rebuilt = EmbedderParams::from_flat(&params, &flat).unwrap();
        assert_eq!(params, rebuilt);
    }

    #[test]
    fn sparse_instance_validation() {
        assert!(SparseInstance::new(vec![], vec![]).is_err());
        assert!(SparseInstance::new(vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseInstance::new(vec![1, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseInstance::new(vec![0], vec![f64::NAN]).is_err());
        assert!(SparseInstance::new(vec![0, 9], vec![1.0, -1.0]).is_ok());
    }

    #[test]
    fn class_matrix_enforces_unit_rows() {
        let bad = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(ClassEmbeddingMatrix::from_matrix(bad).is_err());
        let mut rng = RngState::new(9);
        let w = ClassEmbeddingMatrix::random_unit(7, 5, &mut rng);
        for c in 0..7 {
            assert!((math::norm(w.row(c)) - 1.0).abs() < 1e-12);
        }
    }
}
