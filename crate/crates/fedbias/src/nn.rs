//! Dense feed-forward network engine.
//!
//! The model is a stack of fully connected layers with rectifier
//! activations on hidden layers and a single sigmoid output unit. It is
//! the unit that gets shared, aggregated, checkpointed, and scaled, so
//! everything here is a pure function: same inputs, bitwise-same outputs.
//!
//! Parameter layout is fixed for flattening and checkpoints: layer by
//! layer, weight matrix in row-major order (one row per output unit),
//! then the bias vector.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{seeded_rng, STREAM_INIT};
use crate::scalar::Scalar;

/// Dense feed-forward model: rectifier hidden layers, sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<S = f64> {
    layer_dims: Vec<usize>,
    /// Per layer, row-major `(dims[l+1] x dims[l])`.
    weights: Vec<Vec<S>>,
    /// Per layer, length `dims[l+1]`.
    biases: Vec<Vec<S>>,
}

/// Loss gradients, shape-congruent with an [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<S = f64> {
    pub(crate) weights: Vec<Vec<S>>,
    pub(crate) biases: Vec<Vec<S>>,
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::invalid("layer_dims needs at least input and output"));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid("layer widths must be >= 1"));
    }
    if *layer_dims.last().unwrap() != 1 {
        return Err(Error::invalid("output layer width must be 1"));
    }
    Ok(())
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// ln(1 + e^z) without overflow.
fn softplus<S: Scalar>(z: S) -> S {
    if z > S::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl<S: Scalar> MlpModel<S> {
    /// Fresh model with weights drawn uniformly from
    /// `(-1/sqrt(fan_in), 1/sqrt(fan_in))` and zero biases.
    /// Identical `(layer_dims, seed)` give a bitwise-identical model.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = seeded_rng(seed, STREAM_INIT, 0, 0);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for l in 0..layer_dims.len() - 1 {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut w = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in * fan_out {
                w.push(S::from_f64_lossy(rng.gen_range(-bound..bound)));
            }
            weights.push(w);
            biases.push(vec![S::zero(); fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    /// Builds a model from explicit parameters, validating shapes and
    /// finiteness.
    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Vec<S>>,
        biases: Vec<Vec<S>>,
    ) -> Result<Self> {
        validate_dims(&layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::invalid("wrong number of layers"));
        }
        for l in 0..layers {
            if weights[l].len() != layer_dims[l] * layer_dims[l + 1] {
                return Err(Error::invalid(format!("weight shape mismatch at layer {l}")));
            }
            if biases[l].len() != layer_dims[l + 1] {
                return Err(Error::invalid(format!("bias shape mismatch at layer {l}")));
            }
        }
        let model = Self {
            layer_dims,
            weights,
            biases,
        };
        model.check_finite()?;
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub(crate) fn layer_weights(&self, layer: usize) -> &[S] {
        &self.weights[layer]
    }

    pub(crate) fn layer_weights_mut(&mut self, layer: usize) -> &mut [S] {
        &mut self.weights[layer]
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self
            .weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|p| p.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(Error::numeric("model parameters contain NaN or Inf"))
        }
    }

    fn check_input(&self, x: &[S]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input length {} does not match model input dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid output (logit) for one example.
    pub fn score(&self, x: &[S]) -> Result<S> {
        self.check_input(x)?;
        let mut acts = Vec::new();
        Ok(self.score_with_scratch(x, &mut acts))
    }

    /// Output probability in (0, 1) for one example.
    pub fn forward(&self, x: &[S]) -> Result<S> {
        Ok(sigmoid(self.score(x)?))
    }

    /// Probabilities for every row; the batched form of [`forward`].
    ///
    /// [`forward`]: MlpModel::forward
    pub fn forward_batch(&self, x: &Matrix<S>) -> Result<Vec<S>> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch width {} does not match model input dim {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut acts = Vec::new();
        Ok(x.iter_rows()
            .map(|row| sigmoid(self.score_with_scratch(row, &mut acts)))
            .collect())
    }

    /// Forward pass that records activations per layer in `acts`
    /// (`acts[l]` is the activation entering weight layer `l`, `acts[0]`
    /// excluded: the input itself is the caller's slice). Returns the
    /// output logit.
    fn score_with_scratch(&self, x: &[S], acts: &mut Vec<Vec<S>>) -> S {
        let layers = self.weights.len();
        acts.resize(layers - 1, Vec::new());
        let mut logit = S::zero();
        for l in 0..layers {
            let (in_dim, out_dim) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.weights[l];
            if l < layers - 1 {
                let (before, after) = acts.split_at_mut(l);
                let in_act: &[S] = if l == 0 { x } else { &before[l - 1] };
                let out = &mut after[0];
                out.clear();
                out.reserve(out_dim);
                for r in 0..out_dim {
                    let mut z = self.biases[l][r];
                    let row = &w[r * in_dim..(r + 1) * in_dim];
                    for (wv, xv) in row.iter().zip(in_act) {
                        z = z + *wv * *xv;
                    }
                    out.push(if z > S::zero() { z } else { S::zero() });
                }
            } else {
                let in_act: &[S] = if l == 0 { x } else { &acts[l - 1] };
                let mut z = self.biases[l][0];
                for (wv, xv) in w.iter().zip(in_act) {
                    z = z + *wv * *xv;
                }
                logit = z;
            }
        }
        logit
    }

    /// Mean binary cross-entropy over the batch and its exact parameter
    /// gradients. With `sample_weights`, both become the weighted mean
    /// (weights normalized by their sum); the unweighted call is the
    /// all-ones weighting, computed through the identical code path.
    pub fn loss_and_gradients(
        &self,
        x: &Matrix<S>,
        y: &[u8],
        sample_weights: Option<&[S]>,
    ) -> Result<(S, GradientSet<S>)> {
        if x.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if x.rows() != y.len() {
            return Err(Error::invalid("features and labels disagree on batch size"));
        }
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "batch width {} does not match model input dim {}",
                x.cols(),
                self.input_dim()
            )));
        }
        if let Some(w) = sample_weights {
            if w.len() != y.len() {
                return Err(Error::invalid("sample_weights length mismatch"));
            }
            if w.iter().any(|v| !(*v > S::zero()) || !v.is_finite()) {
                return Err(Error::invalid("sample_weights must be positive and finite"));
            }
        }

        let layers = self.weights.len();
        let mut grads = GradientSet::zeros_like(self);
        let mut acts: Vec<Vec<S>> = Vec::new();
        let mut delta: Vec<S> = Vec::new();
        let mut delta_prev: Vec<S> = Vec::new();
        let mut loss_sum = S::zero();
        let mut weight_sum = S::zero();

        for i in 0..x.rows() {
            let xi = x.row(i);
            let w_i = sample_weights.map_or_else(S::one, |w| w[i]);
            let target = if y[i] > 0 { S::one() } else { S::zero() };

            let z = self.score_with_scratch(xi, &mut acts);
            let p = sigmoid(z);
            loss_sum += w_i * (softplus(z) - target * z);
            weight_sum += w_i;

            // Output delta: d(w_i * loss_i) / d z_out.
            delta.clear();
            delta.push((p - target) * w_i);
            for l in (0..layers).rev() {
                let (in_dim, out_dim) = (self.layer_dims[l], self.layer_dims[l + 1]);
                let in_act: &[S] = if l == 0 { xi } else { &acts[l - 1] };
                let gw = &mut grads.weights[l];
                for r in 0..out_dim {
                    let d = delta[r];
                    let row = &mut gw[r * in_dim..(r + 1) * in_dim];
                    for (g, a) in row.iter_mut().zip(in_act) {
                        *g = *g + d * *a;
                    }
                    grads.biases[l][r] += d;
                }
                if l > 0 {
                    // Delta for the previous layer, masked by its rectifier.
                    let w = &self.weights[l];
                    delta_prev.clear();
                    delta_prev.resize(in_dim, S::zero());
                    for (r, d) in delta.iter().enumerate() {
                        let row = &w[r * in_dim..(r + 1) * in_dim];
                        for (pv, wv) in delta_prev.iter_mut().zip(row) {
                            *pv = *pv + *wv * *d;
                        }
                    }
                    for (pv, a) in delta_prev.iter_mut().zip(in_act) {
                        if !(*a > S::zero()) {
                            *pv = S::zero();
                        }
                    }
                    std::mem::swap(&mut delta, &mut delta_prev);
                }
            }
        }

        let loss = loss_sum / weight_sum;
        if !loss.is_finite() {
            return Err(Error::numeric("non-finite training loss"));
        }
        for v in grads.weights.iter_mut().chain(grads.biases.iter_mut()) {
            for g in v.iter_mut() {
                *g /= weight_sum;
            }
        }
        Ok((loss, grads))
    }

    /// Exact gradient of the pre-sigmoid score with respect to the input.
    pub fn input_gradient(&self, x: &[S]) -> Result<Vec<S>> {
        self.check_input(x)?;
        let layers = self.weights.len();
        let mut acts: Vec<Vec<S>> = Vec::new();
        let _ = self.score_with_scratch(x, &mut acts);

        // Walk deltas back from the single output unit to the input.
        let mut delta: Vec<S> = vec![S::one()];
        for l in (1..layers).rev() {
            let prev_dim = self.layer_dims[l];
            let w = &self.weights[l];
            let mut prev = vec![S::zero(); prev_dim];
            for (r, d) in delta.iter().enumerate() {
                let row = &w[r * prev_dim..(r + 1) * prev_dim];
                for (pv, wv) in prev.iter_mut().zip(row) {
                    *pv = *pv + *wv * *d;
                }
            }
            for (pv, a) in prev.iter_mut().zip(&acts[l - 1]) {
                if !(*a > S::zero()) {
                    *pv = S::zero();
                }
            }
            delta = prev;
        }
        let in_dim = self.layer_dims[0];
        let w0 = &self.weights[0];
        let mut grad = vec![S::zero(); in_dim];
        for (r, d) in delta.iter().enumerate() {
            let row = &w0[r * in_dim..(r + 1) * in_dim];
            for (gv, wv) in grad.iter_mut().zip(row) {
                *gv = *gv + *wv * *d;
            }
        }
        Ok(grad)
    }

    /// One gradient-descent update `p <- p - lr * g`; returns the updated
    /// copy.
    pub fn sgd_step(&self, grads: &GradientSet<S>, lr: S) -> Result<MlpModel<S>> {
        if grads.weights.len() != self.weights.len()
            || grads
                .weights
                .iter()
                .zip(&self.weights)
                .any(|(g, w)| g.len() != w.len())
            || grads
                .biases
                .iter()
                .zip(&self.biases)
                .any(|(g, b)| g.len() != b.len())
        {
            return Err(Error::invalid("gradient shape does not match model"));
        }
        let mut out = self.clone();
        for (pv, gv) in out.weights.iter_mut().zip(&grads.weights) {
            for (p, g) in pv.iter_mut().zip(gv) {
                *p = *p - lr * *g;
            }
        }
        for (pv, gv) in out.biases.iter_mut().zip(&grads.biases) {
            for (p, g) in pv.iter_mut().zip(gv) {
                *p = *p - lr * *g;
            }
        }
        Ok(out)
    }

    /// Parameters as one vector, layer by layer, weights (row-major) then
    /// biases.
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    /// Inverse of [`flatten`]; `unflatten(dims, m.flatten()) == m` exactly.
    ///
    /// [`flatten`]: MlpModel::flatten
    pub fn unflatten(layer_dims: &[usize], params: &[S]) -> Result<Self> {
        validate_dims(layer_dims)?;
        let expected: usize = layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if params.len() != expected {
            return Err(Error::invalid(format!(
                "expected {} parameters for dims {:?}, got {}",
                expected,
                layer_dims,
                params.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut offset = 0;
        for l in 0..layer_dims.len() - 1 {
            let wlen = layer_dims[l] * layer_dims[l + 1];
            weights.push(params[offset..offset + wlen].to_vec());
            offset += wlen;
            let blen = layer_dims[l + 1];
            biases.push(params[offset..offset + blen].to_vec());
            offset += blen;
        }
        Self::from_parts(layer_dims.to_vec(), weights, biases)
    }

    /// Writes the checkpoint: a `dims=...` header line, then the flattened
    /// parameters as little-endian 64-bit floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.check_finite()?;
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let dims: Vec<String> = self.layer_dims.iter().map(ToString::to_string).collect();
        writeln!(w, "dims={}", dims.join(","))?;
        for p in self.flatten() {
            w.write_all(&p.as_f64().to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::not_found(format!("checkpoint {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        let mut r = BufReader::new(file);
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)
                .map_err(|_| Error::invalid("checkpoint missing header line"))?;
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > 4096 {
                return Err(Error::invalid("checkpoint header too long"));
            }
        }
        let header = String::from_utf8(header)
            .map_err(|_| Error::invalid("checkpoint header is not utf-8"))?;
        let dims_str = header
            .strip_prefix("dims=")
            .ok_or_else(|| Error::invalid("checkpoint header must start with dims="))?;
        let layer_dims: Vec<usize> = dims_str
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::invalid("bad dims in checkpoint header"))?;
        validate_dims(&layer_dims)?;
        let expected: usize = layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != expected * 8 {
            return Err(Error::invalid(format!(
                "checkpoint payload is {} bytes, expected {}",
                raw.len(),
                expected * 8
            )));
        }
        let params: Vec<S> = raw
            .chunks_exact(8)
            .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Self::unflatten(&layer_dims, &params)
    }
}

impl<S: Scalar> GradientSet<S> {
    pub fn zeros_like(model: &MlpModel<S>) -> Self {
        Self {
            weights: model.weights.iter().map(|w| vec![S::zero(); w.len()]).collect(),
            biases: model.biases.iter().map(|b| vec![S::zero(); b.len()]).collect(),
        }
    }

    /// Adds `mu * (a - b)` parameter-wise; the proximal-term gradient.
    pub fn add_scaled_diff(&mut self, a: &MlpModel<S>, b: &MlpModel<S>, mu: S) {
        for l in 0..self.weights.len() {
            for (g, (pa, pb)) in self.weights[l]
                .iter_mut()
                .zip(a.weights[l].iter().zip(&b.weights[l]))
            {
                *g = *g + mu * (*pa - *pb);
            }
            for (g, (pa, pb)) in self.biases[l]
                .iter_mut()
                .zip(a.biases[l].iter().zip(&b.biases[l]))
            {
                *g = *g + mu * (*pa - *pb);
            }
        }
    }

    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use rand::Rng;

    fn random_model(dims: &[usize], seed: u64) -> MlpModel<f64> {
        MlpModel::init(dims, seed).unwrap()
    }

    fn random_batch(dim: usize, n: usize, seed: u64) -> (Matrix<f64>, Vec<u8>) {
        let mut rng = seeded_rng(seed, 99, 0, 0);
        let data: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        (Matrix::new(n, dim, data).unwrap(), y)
    }

    /// Central finite differences over the flattened parameter vector;
    /// the independent oracle for the analytic gradients.
    fn numerical_gradient(model: &MlpModel<f64>, x: &Matrix<f64>, y: &[u8], eps: f64) -> Vec<f64> {
        let dims = model.layer_dims().to_vec();
        let theta = model.flatten();
        let mut grad = vec![0.0; theta.len()];
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += eps;
            let mut minus = theta.clone();
            minus[i] -= eps;
            let lp = MlpModel::unflatten(&dims, &plus)
                .unwrap()
                .loss_and_gradients(x, y, None)
                .unwrap()
                .0;
            let lm = MlpModel::unflatten(&dims, &minus)
                .unwrap()
                .loss_and_gradients(x, y, None)
                .unwrap()
                .0;
            grad[i] = (lp - lm) / (2.0 * eps);
        }
        grad
    }

    /// |a - n| relative to max(|a|, |n|), floored at 1e-3 so dead-unit
    /// zero gradients compare absolutely against finite-difference noise.
    pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
    }

    /// Smallest |hidden pre-activation| over the batch. Central
    /// differences are invalid across a rectifier kink, so draws whose
    /// margin is below the perturbation reach get skipped.
    fn kink_margin(model: &MlpModel<f64>, x: &Matrix<f64>) -> f64 {
        let in_dim = model.layer_dims[0];
        let hidden = model.layer_dims[1];
        let w0 = &model.weights[0];
        let mut margin = f64::INFINITY;
        for row in x.iter_rows() {
            for r in 0..hidden {
                let mut z = model.biases[0][r];
                for (w, v) in w0[r * in_dim..(r + 1) * in_dim].iter().zip(row) {
                    z += w * v;
                }
                margin = margin.min(z.abs());
            }
        }
        margin
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let a = random_model(&[2, 2, 1], 7);
        let b = random_model(&[2, 2, 1], 7);
        assert_eq!(a, b);
        assert!(a.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        let c = random_model(&[2, 2, 1], 8);
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(MlpModel::<f64>::init(&[4], 0).is_err());
        assert!(MlpModel::<f64>::init(&[4, 0, 1], 0).is_err());
        assert!(MlpModel::<f64>::init(&[4, 3, 2], 0).is_err());
    }

    #[test]
    fn param_count_matches_shape_arithmetic() {
        let m = random_model(&[54, 32, 1], 0);
        assert_eq!(m.num_params(), 54 * 32 + 32 + 32 + 1);
        assert_eq!(m.num_params(), 1793);
        // First layer holds 54*32 weights + 32 biases.
        assert_eq!(m.weights[0].len() + m.biases[0].len(), 1760);
        assert_eq!(m.flatten().len(), 1793);
    }

    #[test]
    fn forward_of_zero_model_is_half() {
        let dims = vec![3, 4, 1];
        let zero = MlpModel::from_parts(
            dims.clone(),
            vec![vec![0.0; 12], vec![0.0; 4]],
            vec![vec![0.0; 4], vec![0.0; 1]],
        )
        .unwrap();
        assert_eq!(zero.forward(&[0.3, -1.0, 2.0]).unwrap(), 0.5);
    }

    #[test]
    fn forward_composes_through_identity_hidden_unit() {
        // Hidden unit 0 passes x0 through (weight 1), output reads it with
        // weight w; for positive x0 the score is w * x0.
        let w = 1.7_f64;
        let model: MlpModel<f64> = MlpModel::from_parts(
            vec![1, 2, 1],
            vec![vec![1.0, 0.0], vec![w, 0.0]],
            vec![vec![0.0, 0.0], vec![0.0]],
        )
        .unwrap();
        let x = 0.8;
        let got = model.forward(&[x]).unwrap();
        assert!((got - 1.0 / (1.0 + (-w * x).exp())).abs() < 1e-15);
    }

    #[test]
    fn forward_stays_in_open_unit_interval() {
        let m = random_model(&[5, 8, 1], 3);
        let (x, _) = random_batch(5, 50, 4);
        for p in m.forward_batch(&x).unwrap() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let m = random_model(&[4, 2, 1], 0);
        assert!(matches!(
            m.forward(&[1.0, 2.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(m.input_gradient(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_closed_form_single_example() {
        // Zero model predicts exactly 0.5; the BCE against label 1 is ln 2.
        let zero = MlpModel::from_parts(
            vec![2, 2, 1],
            vec![vec![0.0; 4], vec![0.0; 2]],
            vec![vec![0.0; 2], vec![0.0]],
        )
        .unwrap();
        let x = Matrix::new(1, 2, vec![0.4, -0.2]).unwrap();
        let (loss, _) = zero.loss_and_gradients(&x, &[1], None).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn unit_weights_match_unweighted_bitwise() {
        let m = random_model(&[4, 3, 1], 11);
        let (x, y) = random_batch(4, 17, 12);
        let ones = vec![1.0; y.len()];
        let (l0, g0) = m.loss_and_gradients(&x, &y, None).unwrap();
        let (l1, g1) = m.loss_and_gradients(&x, &y, Some(&ones)).unwrap();
        assert_eq!(l0.to_bits(), l1.to_bits());
        assert_eq!(g0, g1);
    }

    #[test]
    fn loss_rejects_empty_batch_and_bad_weights() {
        let m = random_model(&[2, 2, 1], 0);
        let empty = Matrix::new(0, 2, vec![]).unwrap();
        assert!(m.loss_and_gradients(&empty, &[], None).is_err());
        let x = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(m.loss_and_gradients(&x, &[1], Some(&[0.0])).is_err());
        assert!(m.loss_and_gradients(&x, &[1], Some(&[-1.0])).is_err());
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut worst = 0.0f64;
        let mut kept = 0;
        let mut draw = 0;
        while kept < 100 {
            draw += 1;
            let m = random_model(&[6, 4, 1], 1000 + draw);
            let (x, y) = random_batch(6, 8, 2000 + draw);
            if kink_margin(&m, &x) < 5e-3 {
                continue;
            }
            kept += 1;
            let (_, g) = m.loss_and_gradients(&x, &y, None).unwrap();
            let ga = g.flatten();
            let gn = numerical_gradient(&m, &x, &y, 1e-4);
            for (a, n) in ga.iter().zip(&gn) {
                worst = worst.max(rel_err(*a, *n));
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn weighted_gradients_match_finite_differences() {
        let m = random_model(&[5, 3, 1], 42);
        let (x, y) = random_batch(5, 6, 43);
        let mut rng = seeded_rng(44, 99, 0, 0);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..3.0)).collect();
        let (_, g) = m.loss_and_gradients(&x, &y, Some(&w)).unwrap();
        let ga = g.flatten();

        let dims = m.layer_dims().to_vec();
        let theta = m.flatten();
        let eps = 1e-4;
        for i in (0..theta.len()).step_by(3) {
            let mut plus = theta.clone();
            plus[i] += eps;
            let mut minus = theta.clone();
            minus[i] -= eps;
            let lp = MlpModel::unflatten(&dims, &plus)
                .unwrap()
                .loss_and_gradients(&x, &y, Some(&w))
                .unwrap()
                .0;
            let lm = MlpModel::unflatten(&dims, &minus)
                .unwrap()
                .loss_and_gradients(&x, &y, Some(&w))
                .unwrap()
                .0;
            let n = (lp - lm) / (2.0 * eps);
            assert!(rel_err(ga[i], n) <= 1e-4);
        }
    }

    #[test]
    fn input_gradient_is_linear_weight_in_linear_regime() {
        // One hidden unit per input, pass-through weights, biases large
        // enough to keep every rectifier active: score = sum(w_out) * x + c,
        // so d score / d x_i = w1[i] * w2[i].
        let model: MlpModel<f64> = MlpModel::from_parts(
            vec![2, 2, 1],
            vec![vec![1.0, 0.0, 0.0, 1.0], vec![2.0, 3.0]],
            vec![vec![10.0, 10.0], vec![0.0]],
        )
        .unwrap();
        let g = model.input_gradient(&[0.1, -0.2]).unwrap();
        assert_eq!(g.len(), 2);
        assert!((g[0] - 2.0).abs() < 1e-15);
        assert!((g[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = random_model(&[6, 4, 1], 5);
        let mut rng = seeded_rng(6, 99, 0, 0);
        let mut kept = 0;
        while kept < 20 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let xm = Matrix::new(1, 6, x.clone()).unwrap();
            if kink_margin(&m, &xm) < 5e-3 {
                continue;
            }
            kept += 1;
            let ga = m.input_gradient(&x).unwrap();
            let eps = 1e-4;
            for i in 0..6 {
                let mut plus = x.clone();
                plus[i] += eps;
                let mut minus = x.clone();
                minus[i] -= eps;
                let n = (m.score(&plus).unwrap() - m.score(&minus).unwrap()) / (2.0 * eps);
                assert!(
                    rel_err(ga[i], n) <= 1e-4,
                    "feature {i}: analytic {} numeric {n}",
                    ga[i]
                );
            }
        }
    }

    #[test]
    fn sgd_step_identities() {
        let m = random_model(&[3, 2, 1], 9);
        let zero = GradientSet::zeros_like(&m);
        assert_eq!(m.sgd_step(&zero, 0.5).unwrap(), m);

        // lr=1 with the parameters themselves as gradients zeroes the model.
        let self_grad = GradientSet {
            weights: m.weights.clone(),
            biases: m.biases.clone(),
        };
        let zeroed = m.sgd_step(&self_grad, 1.0).unwrap();
        assert!(zeroed.flatten().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn two_half_steps_equal_one_double_step() {
        let m = random_model(&[3, 2, 1], 10);
        let (x, y) = random_batch(3, 4, 11);
        let (_, g) = m.loss_and_gradients(&x, &y, None).unwrap();
        let twice = m
            .sgd_step(&g, 0.05)
            .unwrap()
            .sgd_step(&g, 0.05)
            .unwrap();
        let once = m.sgd_step(&g, 0.10).unwrap();
        for (a, b) in twice.flatten().iter().zip(once.flatten()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn small_step_does_not_increase_batch_loss() {
        for draw in 0..50 {
            let m = random_model(&[6, 4, 1], 300 + draw);
            let (x, y) = random_batch(6, 16, 400 + draw);
            let (before, g) = m.loss_and_gradients(&x, &y, None).unwrap();
            let stepped = m.sgd_step(&g, 1e-3).unwrap();
            let (after, _) = stepped.loss_and_gradients(&x, &y, None).unwrap();
            assert!(after <= before + 1e-12, "loss rose: {before} -> {after}");
        }
    }

    #[test]
    fn flatten_roundtrip_and_length() {
        let m = random_model(&[7, 5, 1], 13);
        let flat = m.flatten();
        assert_eq!(flat.len(), 7 * 5 + 5 + 5 + 1);
        let back = MlpModel::unflatten(&[7, 5, 1], &flat).unwrap();
        assert_eq!(back, m);
        assert!(MlpModel::<f64>::unflatten(&[7, 5, 1], &flat[1..]).is_err());

        let other = random_model(&[7, 5, 1], 14);
        assert_ne!(other.flatten(), flat);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = random_model(&[4, 3, 1], 21);
        m.save(&path).unwrap();
        let back: MlpModel<f64> = MlpModel::load(&path).unwrap();
        assert_eq!(back, m);
        let missing: Result<MlpModel<f64>> = MlpModel::load(&dir.path().join("nope.ckpt"));
        assert!(matches!(missing, Err(Error::NotFound(_))));
    }

    #[test]
    fn generic_core_runs_in_f32() {
        let m: MlpModel<f32> = MlpModel::init(&[3, 2, 1], 7).unwrap();
        let p = m.forward(&[0.1f32, 0.2, 0.3]).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let flat = m.flatten();
        assert_eq!(MlpModel::unflatten(&[3, 2, 1], &flat).unwrap(), m);
    }
}
