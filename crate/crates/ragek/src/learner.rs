//! From-scratch multilayer perceptron with softmax cross-entropy, flat
//! parameter views, and SGD/Adam optimizers.
//!
//! Parameters live in one flat 64-bit vector so sparsifiers and the
//! parameter server can treat the model as a plain length-`d` vector. The
//! flat layout is layer-major: each layer's weight matrix row-major
//! (fan_out rows of fan_in weights), then its bias.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vectors::GradientVector;

/// Architecture: input size, hidden sizes, output size. Hidden layers use
/// ReLU; the output goes through softmax cross-entropy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
}

impl ModelSpec {
    /// ```
    /// use ragek::learner::ModelSpec;
    ///
    /// let spec = ModelSpec::new(vec![784, 50, 10])?;
    /// assert_eq!(spec.param_count(), 39_760); // 784*50 + 50 + 50*10 + 10
    /// # Ok::<(), ragek::error::Error>(())
    /// ```
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::parameter(
                "model spec needs at least two positive layer sizes",
            ));
        }
        Ok(ModelSpec { layer_sizes })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total parameter count: Σ (fan_in·fan_out + fan_out) over layers.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// (weight_offset, bias_offset, fan_in, fan_out) per layer.
    fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            out.push((offset, offset + fan_in * fan_out, fan_in, fan_out));
            offset += fan_in * fan_out + fan_out;
        }
        out
    }
}

/// A model: spec plus flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    spec: ModelSpec,
    theta: GradientVector,
}

/// One labeled batch, features flattened row-major.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub input_dim: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

impl ModelState {
    /// Glorot-uniform initialization, ±√(6/(fan_in+fan_out)) per layer,
    /// drawn from the caller's seeded generator.
    pub fn init(spec: ModelSpec, rng: &mut impl Rng) -> Self {
        let d = spec.param_count();
        let mut theta = vec![0.0; d];
        for (w_off, b_off, fan_in, fan_out) in spec.layout() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in theta[w_off..b_off + fan_out].iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        ModelState {
            spec,
            theta: GradientVector::new(theta).unwrap(),
        }
    }

    pub fn from_theta(spec: ModelSpec, theta: GradientVector) -> Result<Self> {
        if theta.dim() != spec.param_count() {
            return Err(Error::structural(format!(
                "theta has {} entries, spec wants {}",
                theta.dim(),
                spec.param_count()
            )));
        }
        Ok(ModelState { spec, theta })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn theta(&self) -> &GradientVector {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: GradientVector) -> Result<()> {
        if theta.dim() != self.theta.dim() {
            return Err(Error::structural("theta dimension mismatch"));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.theta.dim()
    }

    /// Class logits for one sample.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let theta = self.theta.values();
        let layout = self.spec.layout();
        let num_layers = layout.len();
        let mut activations = Vec::with_capacity(num_layers + 1);
        activations.push(x.to_vec());
        for (l, &(w_off, b_off, fan_in, fan_out)) in layout.iter().enumerate() {
            let input = activations.last().unwrap().clone();
            let mut z = vec![0.0; fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &theta[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                let mut acc = theta[b_off + o];
                for (w, a) in row.iter().zip(&input) {
                    acc += w * a;
                }
                *zo = acc;
            }
            if l + 1 < num_layers {
                for v in &mut z {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            activations.push(z);
        }
        activations
    }

    /// Checkpoint: magic "RGKM", u32 LE version, u32 LE layer count, layer
    /// sizes as u32 LE, then the flat vector as f64 LE.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"RGKM")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.spec.layer_sizes.len() as u32).to_le_bytes())?;
        for &s in &self.spec.layer_sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for &v in self.theta.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"RGKM" {
            return Err(Error::Format {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != 1 {
            return Err(Error::Format {
                offset: 4,
                message: "unsupported checkpoint version".into(),
            });
        }
        r.read_exact(&mut u32buf)?;
        let n_sizes = u32::from_le_bytes(u32buf) as usize;
        let mut sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            r.read_exact(&mut u32buf)?;
            sizes.push(u32::from_le_bytes(u32buf) as usize);
        }
        let spec = ModelSpec::new(sizes)?;
        let mut theta = Vec::with_capacity(spec.param_count());
        let mut f64buf = [0u8; 8];
        for _ in 0..spec.param_count() {
            r.read_exact(&mut f64buf)?;
            theta.push(f64::from_le_bytes(f64buf));
        }
        ModelState::from_theta(spec, GradientVector::new(theta)?)
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Mean softmax cross-entropy over the batch and its exact gradient with
/// respect to the flat parameter vector, by reverse-mode differentiation.
pub fn loss_and_gradient(m: &ModelState, batch: &Batch) -> Result<(f64, GradientVector)> {
    if batch.input_dim != m.spec.input_dim() {
        return Err(Error::structural(format!(
            "batch feature dim {} does not match model input {}",
            batch.input_dim,
            m.spec.input_dim()
        )));
    }
    if batch.is_empty() {
        return Err(Error::parameter("empty batch"));
    }
    let classes = m.spec.num_classes();
    for &y in &batch.labels {
        if y >= classes {
            return Err(Error::structural(format!("label {y} out of range")));
        }
    }

    let theta = m.theta.values();
    let layout = m.spec.layout();
    let num_layers = layout.len();
    let n = batch.len() as f64;
    let mut grad = vec![0.0; m.dim()];
    let mut total_loss = 0.0;

    for s in 0..batch.len() {
        let activations = m.forward(batch.sample(s));
        let mut probs = activations[num_layers].clone();
        softmax_in_place(&mut probs);
        let y = batch.labels[s];
        let p = probs[y].max(f64::MIN_POSITIVE);
        total_loss -= p.ln();
        if !total_loss.is_finite() {
            return Err(Error::Numerical("non-finite loss".into()));
        }

        // delta starts as dL/dz at the output, then propagates backwards.
        let mut delta = probs;
        delta[y] -= 1.0;
        for l in (0..num_layers).rev() {
            let (w_off, b_off, fan_in, fan_out) = layout[l];
            let input = &activations[l];
            for o in 0..fan_out {
                let d = delta[o];
                grad[b_off + o] += d;
                let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    let row = &theta[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                // ReLU gate: activations[l] is the post-ReLU output, zero
                // exactly where the unit was inactive.
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    for g in &mut grad {
        *g /= n;
    }
    Ok((total_loss / n, GradientVector::new(grad)?))
}

/// Argmax accuracy and mean cross-entropy over a dataset.
pub fn evaluate(m: &ModelState, batch: &Batch) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::parameter("empty dataset"));
    }
    let num_layers = m.spec.num_layers();
    let mut correct = 0usize;
    let mut loss = 0.0;
    for s in 0..batch.len() {
        let activations = m.forward(batch.sample(s));
        let mut probs = activations[num_layers].clone();
        softmax_in_place(&mut probs);
        let y = batch.labels[s];
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == y {
            correct += 1;
        }
    }
    Ok((correct as f64 / batch.len() as f64, loss / batch.len() as f64))
}

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        eta: f64,
    },
    Adam {
        eta: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn adam_defaults(eta: f64) -> Self {
        OptimizerKind::Adam {
            eta,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer settings plus moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd { .. } => 0,
            OptimizerKind::Adam { .. } => dim,
        };
        OptimizerState {
            kind,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Drops accumulated moments, keeping the settings.
    pub fn reset(&mut self) {
        for v in &mut self.first_moment {
            *v = 0.0;
        }
        for v in &mut self.second_moment {
            *v = 0.0;
        }
        self.step = 0;
    }
}

/// One optimizer step on the flat parameter vector.
pub fn apply_update(m: &mut ModelState, o: &mut OptimizerState, g: &GradientVector) -> Result<()> {
    if g.dim() != m.dim() {
        return Err(Error::structural("gradient dimension mismatch"));
    }
    if g.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    o.step += 1;
    let mut theta = m.theta.clone().into_values();
    match o.kind {
        OptimizerKind::Sgd { eta } => {
            for (t, gv) in theta.iter_mut().zip(g.values()) {
                *t -= eta * gv;
            }
        }
        OptimizerKind::Adam {
            eta,
            beta1,
            beta2,
            epsilon,
        } => {
            let bc1 = 1.0 - beta1.powi(o.step as i32);
            let bc2 = 1.0 - beta2.powi(o.step as i32);
            for i in 0..theta.len() {
                let gv = g.values()[i];
                o.first_moment[i] = beta1 * o.first_moment[i] + (1.0 - beta1) * gv;
                o.second_moment[i] = beta2 * o.second_moment[i] + (1.0 - beta2) * gv * gv;
                let m_hat = o.first_moment[i] / bc1;
                let v_hat = o.second_moment[i] / bc2;
                theta[i] -= eta * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
    m.theta = GradientVector::new(theta)?;
    Ok(())
}
