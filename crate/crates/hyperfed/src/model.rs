//! Feature extractor with manual backpropagation, the fixed hyperspherical
//! classifier head, and both loss functions.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, norm, orthonormal_rows, Matrix, Rng};

/// Guard used whenever a feature is projected onto the unit sphere:
/// z_tilde = z / max(||z||, NORM_EPS).
pub const NORM_EPS: f64 = 1e-12;

/// Plain MLP: ReLU on every layer except the last. Layer i maps
/// dims[i] -> dims[i+1] with weights[i] of shape dims[i+1] x dims[i].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpExtractor {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl MlpExtractor {
    /// He-initialized extractor. `dims` runs input -> hidden... -> feature.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Parameter(
                "extractor needs at least input and feature dims".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Parameter("zero-width layer".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for i in 0..dims.len() - 1 {
            let fan_in = dims[i];
            let scale = (2.0 / fan_in as f64).sqrt();
            let mut w = Matrix::gaussian(dims[i + 1], dims[i], rng);
            w.scale(scale);
            weights.push(w);
            biases.push(vec![0.0; dims[i + 1]]);
        }
        Ok(MlpExtractor {
            dims: dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn num_layers(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Trainable,
    FixedRandom,
    FixedOrthonormal,
    FixedTammes,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weights: Matrix,
    pub fixed: bool,
    pub normalize_features: bool,
    pub temperature: f64,
}

impl ClassifierHead {
    /// Fixed orthonormal head on the unit hypersphere; requires c <= l.
    pub fn orthonormal(c: usize, l: usize, rng: &mut Rng) -> Result<Self> {
        let weights = orthonormal_rows(c, l, rng)?;
        Ok(ClassifierHead {
            weights,
            fixed: true,
            normalize_features: true,
            temperature: 1.0,
        })
    }

    /// Fixed head with He-initialized random rows (no orthogonality).
    pub fn fixed_random(c: usize, l: usize, rng: &mut Rng) -> Result<Self> {
        let mut weights = Matrix::gaussian(c, l, rng);
        weights.scale((2.0 / l as f64).sqrt());
        Ok(ClassifierHead {
            weights,
            fixed: true,
            normalize_features: true,
            temperature: 1.0,
        })
    }

    /// Conventional trainable linear head, no feature normalization.
    pub fn trainable(c: usize, l: usize, rng: &mut Rng) -> Result<Self> {
        let mut weights = Matrix::gaussian(c, l, rng);
        weights.scale((2.0 / l as f64).sqrt());
        Ok(ClassifierHead {
            weights,
            fixed: false,
            normalize_features: false,
            temperature: 1.0,
        })
    }

    /// Fixed unit-norm head optimized for pairwise separation on the
    /// sphere: gradient descent (momentum 0.9, lr 0.1) on each row's
    /// largest pairwise cosine, rows renormalized every step.
    pub fn tammes(c: usize, l: usize, rng: &mut Rng) -> Result<Self> {
        Self::tammes_with_steps(c, l, 10_000, rng)
    }

    pub fn tammes_with_steps(c: usize, l: usize, steps: usize, rng: &mut Rng) -> Result<Self> {
        if c < 2 {
            return Err(Error::Parameter("tammes head needs at least 2 classes".into()));
        }
        let mut w = Matrix::gaussian(c, l, rng);
        for i in 0..c {
            let n = norm(w.row(i)).max(NORM_EPS);
            for v in w.row_mut(i) {
                *v /= n;
            }
        }
        let lr = 0.1;
        let momentum = 0.9;
        let mut velocity = vec![0.0; c * l];
        for _ in 0..steps {
            let mut grad = vec![0.0; c * l];
            for i in 0..c {
                // Push each row away from its nearest neighbour on the
                // sphere: descend on max_{j != i} cos(w_i, w_j).
                let mut best = (usize::MAX, f64::NEG_INFINITY);
                for j in 0..c {
                    if j == i {
                        continue;
                    }
                    let cij = dot(w.row(i), w.row(j));
                    if cij > best.1 {
                        best = (j, cij);
                    }
                }
                let (j, cij) = best;
                // d cos(w_i, w_j) / d w_i for unit rows: w_j - cos * w_i.
                for t in 0..l {
                    grad[i * l + t] += w.get(j, t) - cij * w.get(i, t);
                }
            }
            for (v, g) in velocity.iter_mut().zip(&grad) {
                *v = momentum * *v + g;
            }
            for i in 0..c {
                for t in 0..l {
                    let val = w.get(i, t) - lr * velocity[i * l + t];
                    w.set(i, t, val);
                }
                let n = norm(w.row(i)).max(NORM_EPS);
                for v in w.row_mut(i) {
                    *v /= n;
                }
            }
        }
        Ok(ClassifierHead {
            weights: w,
            fixed: true,
            normalize_features: true,
            temperature: 1.0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// activations[0] is the input; activations[i+1] is the output of
    /// layer i after its nonlinearity (the last layer has none).
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub feature: Vec<f64>,
    /// Guarded norm max(||z||, NORM_EPS).
    pub feature_norm: f64,
    /// Unit-sphere feature when normalization is on, else the raw feature.
    pub head_input: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn forward(model: &MlpExtractor, head: &ClassifierHead, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != model.input_dim() {
        return Err(Error::Shape {
            op: "forward",
            detail: format!("input len {} vs dim {}", x.len(), model.input_dim()),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward input"));
    }
    let mut activations = vec![x.to_vec()];
    let mut pre_activations = Vec::new();
    for layer in 0..model.num_layers() {
        let w = &model.weights[layer];
        let b = &model.biases[layer];
        let prev = activations.last().unwrap();
        let mut pre: Vec<f64> = (0..w.rows()).map(|i| dot(w.row(i), prev) + b[i]).collect();
        pre_activations.push(pre.clone());
        if layer + 1 < model.num_layers() {
            for v in &mut pre {
                *v = v.max(0.0);
            }
        }
        activations.push(pre);
    }
    let feature = activations.last().unwrap().clone();
    let feature_norm = norm(&feature).max(NORM_EPS);
    let head_input = if head.normalize_features {
        feature.iter().map(|v| v / feature_norm).collect()
    } else {
        feature.clone()
    };
    let logits: Vec<f64> = (0..head.num_classes())
        .map(|i| head.temperature * dot(head.weights.row(i), &head_input))
        .collect();
    Ok(ForwardTrace {
        activations,
        pre_activations,
        feature,
        feature_norm,
        head_input,
        logits,
    })
}

/// (1/C) * sum_i (o_i - 1{i == y})^2
pub fn loss_mse(logits: &[f64], y: usize) -> f64 {
    let c = logits.len();
    let mut acc = 0.0;
    for (i, &o) in logits.iter().enumerate() {
        let t = if i == y { 1.0 } else { 0.0 };
        acc += (o - t) * (o - t);
    }
    acc / c as f64
}

/// -log softmax(tau * logits)_y with max subtraction.
pub fn loss_ce(logits: &[f64], y: usize, tau: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|&o| tau * o).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = scaled.iter().map(|&s| (s - max).exp()).sum::<f64>().ln() + max;
    log_sum - scaled[y]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Ce,
}

/// Loss of a trace's logits under the training convention: the head's
/// temperature is already folded into the logits by `forward`, so CE is
/// evaluated at tau = 1 here.
pub fn trace_loss(trace: &ForwardTrace, y: usize, loss: LossKind) -> f64 {
    match loss {
        LossKind::Mse => loss_mse(&trace.logits, y),
        LossKind::Ce => loss_ce(&trace.logits, y, 1.0),
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// Present only when the head is trainable.
    pub head: Option<Matrix>,
}

pub fn backward(
    model: &MlpExtractor,
    head: &ClassifierHead,
    trace: &ForwardTrace,
    y: usize,
    loss: LossKind,
) -> Gradients {
    let c = head.num_classes();
    // dL/d logits.
    let mut g_logits = vec![0.0; c];
    match loss {
        LossKind::Mse => {
            for i in 0..c {
                let t = if i == y { 1.0 } else { 0.0 };
                g_logits[i] = 2.0 / c as f64 * (trace.logits[i] - t);
            }
        }
        LossKind::Ce => {
            let max = trace.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = trace.logits.iter().map(|&o| (o - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for i in 0..c {
                g_logits[i] = exps[i] / sum - if i == y { 1.0 } else { 0.0 };
            }
        }
    }
    let l = head.feature_dim();
    // logits = tau * W * v.
    let head_grad = if head.fixed {
        None
    } else {
        let mut g = Matrix::zeros(c, l);
        for i in 0..c {
            let gi = head.temperature * g_logits[i];
            for t in 0..l {
                g.set(i, t, gi * trace.head_input[t]);
            }
        }
        Some(g)
    };
    // dL/dv where v is the head input.
    let mut g_v = vec![0.0; l];
    for i in 0..c {
        let gi = head.temperature * g_logits[i];
        for t in 0..l {
            g_v[t] += gi * head.weights.get(i, t);
        }
    }
    // Through normalization: dz~/dz = (I - z~ z~^T) / m with guarded m.
    let mut g_feat = if head.normalize_features {
        let m = trace.feature_norm;
        let proj = dot(&trace.head_input, &g_v);
        trace
            .head_input
            .iter()
            .zip(&g_v)
            .map(|(&zt, &gv)| (gv - proj * zt) / m)
            .collect()
    } else {
        g_v
    };
    // Back through the MLP layers.
    let n_layers = model.num_layers();
    let mut w_grads: Vec<Matrix> = Vec::with_capacity(n_layers);
    let mut b_grads: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    for layer in (0..n_layers).rev() {
        if layer + 1 < n_layers {
            // ReLU derivative on this layer's pre-activation.
            for (g, &pre) in g_feat.iter_mut().zip(&trace.pre_activations[layer]) {
                if pre <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let input = &trace.activations[layer];
        let w = &model.weights[layer];
        let mut gw = Matrix::zeros(w.rows(), w.cols());
        for i in 0..w.rows() {
            let gi = g_feat[i];
            for j in 0..w.cols() {
                gw.set(i, j, gi * input[j]);
            }
        }
        let gb = g_feat.clone();
        let mut g_prev = vec![0.0; w.cols()];
        for i in 0..w.rows() {
            let gi = g_feat[i];
            for j in 0..w.cols() {
                g_prev[j] += gi * w.get(i, j);
            }
        }
        w_grads.push(gw);
        b_grads.push(gb);
        g_feat = g_prev;
    }
    w_grads.reverse();
    b_grads.reverse();
    Gradients {
        weights: w_grads,
        biases: b_grads,
        head: head_grad,
    }
}

/// A full model: extractor plus head, with a flat parameter view used by
/// the federated engine. Fixed head weights never appear in the flat view.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub extractor: MlpExtractor,
    pub head: ClassifierHead,
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for (w, b) in self.extractor.weights.iter().zip(&self.extractor.biases) {
            n += w.data().len() + b.len();
        }
        if !self.head.fixed {
            n += self.head.weights.data().len();
        }
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.extractor.weights.iter().zip(&self.extractor.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        if !self.head.fixed {
            out.extend_from_slice(self.head.weights.data());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape {
                op: "unflatten",
                detail: format!("{} values for {} params", flat.len(), self.param_count()),
            });
        }
        let mut cursor = 0;
        for (w, b) in self
            .extractor
            .weights
            .iter_mut()
            .zip(&mut self.extractor.biases)
        {
            let n = w.data().len();
            w.data_mut().copy_from_slice(&flat[cursor..cursor + n]);
            cursor += n;
            let blen = b.len();
            b.copy_from_slice(&flat[cursor..cursor + blen]);
            cursor += blen;
        }
        if !self.head.fixed {
            let n = self.head.weights.data().len();
            self.head
                .weights
                .data_mut()
                .copy_from_slice(&flat[cursor..cursor + n]);
        }
        Ok(())
    }

    pub fn flatten_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        if !self.head.fixed {
            out.extend_from_slice(
                grads
                    .head
                    .as_ref()
                    .expect("trainable head must have a gradient")
                    .data(),
            );
        }
        out
    }
}

/// v <- momentum * v + g + weight_decay * p; p <- p - lr * v.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut [f64],
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.len());
    for i in 0..params.len() {
        state[i] = momentum * state[i] + grads[i] + weight_decay * params[i];
        params[i] -= lr * state[i];
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Schedule {
    Cosine,
    MultiStep { milestones: Vec<usize>, gamma: f64 },
}

pub fn lr_schedule(schedule: &Schedule, round: usize, total: usize, base_lr: f64) -> f64 {
    match schedule {
        Schedule::Cosine => {
            let t = round as f64 / total.max(1) as f64;
            base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
        }
        Schedule::MultiStep { milestones, gamma } => {
            let passed = milestones.iter().filter(|&&m| round >= m).count();
            base_lr * gamma.powi(passed as i32)
        }
    }
}

/// Argmax with ties broken by the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HFCK";
const CHECKPOINT_VERSION: u32 = 1;

fn write_f64s(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Versioned binary checkpoint: magic, version, layer dims, extractor
/// weights and biases, then the head (dims, flags, temperature, weights).
pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    (|| -> std::io::Result<()> {
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(model.extractor.dims.len() as u32).to_le_bytes())?;
        for &d in &model.extractor.dims {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        for (w, b) in model.extractor.weights.iter().zip(&model.extractor.biases) {
            write_f64s(&mut f, w.data())?;
            write_f64s(&mut f, b)?;
        }
        f.write_all(&(model.head.num_classes() as u32).to_le_bytes())?;
        f.write_all(&(model.head.feature_dim() as u32).to_le_bytes())?;
        f.write_all(&[model.head.fixed as u8, model.head.normalize_features as u8])?;
        f.write_all(&model.head.temperature.to_le_bytes())?;
        write_f64s(&mut f, model.head.weights.data())?;
        f.flush()
    })()
    .map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut f).map_err(io_err)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n_dims = read_u32(&mut f).map_err(io_err)? as usize;
    if n_dims < 2 || n_dims > 64 {
        return Err(Error::Checkpoint(format!("implausible layer count {n_dims}")));
    }
    let mut dims = Vec::with_capacity(n_dims);
    for _ in 0..n_dims {
        dims.push(read_u32(&mut f).map_err(io_err)? as usize);
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for i in 0..n_dims - 1 {
        let data = read_f64s(&mut f, dims[i + 1] * dims[i]).map_err(io_err)?;
        weights.push(Matrix::from_vec(dims[i + 1], dims[i], data)?);
        biases.push(read_f64s(&mut f, dims[i + 1]).map_err(io_err)?);
    }
    let c = read_u32(&mut f).map_err(io_err)? as usize;
    let l = read_u32(&mut f).map_err(io_err)? as usize;
    if l != dims[n_dims - 1] {
        return Err(Error::Checkpoint(format!(
            "head dim {l} does not match feature dim {}",
            dims[n_dims - 1]
        )));
    }
    let mut flags = [0u8; 2];
    f.read_exact(&mut flags).map_err(io_err)?;
    let mut tau_bytes = [0u8; 8];
    f.read_exact(&mut tau_bytes).map_err(io_err)?;
    let head_data = read_f64s(&mut f, c * l).map_err(io_err)?;
    Ok(ModelParams {
        extractor: MlpExtractor { dims, weights, biases },
        head: ClassifierHead {
            weights: Matrix::from_vec(c, l, head_data)?,
            fixed: flags[0] != 0,
            normalize_features: flags[1] != 0,
            temperature: f64::from_le_bytes(tau_bytes),
        },
    })
}

/// Test-only helper: an extractor with explicitly given weights.
pub fn extractor_from_parts(
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
) -> Result<MlpExtractor> {
    if weights.len() != dims.len() - 1 || biases.len() != weights.len() {
        return Err(Error::Parameter("inconsistent layer parts".into()));
    }
    for i in 0..weights.len() {
        if weights[i].rows() != dims[i + 1] || weights[i].cols() != dims[i] {
            return Err(Error::Shape {
                op: "extractor_from_parts",
                detail: format!("layer {i}"),
            });
        }
        if biases[i].len() != dims[i + 1] {
            return Err(Error::Shape {
                op: "extractor_from_parts",
                detail: format!("bias {i}"),
            });
        }
    }
    Ok(MlpExtractor { dims, weights, biases })
}

/// Normalized feature of one input under the epsilon guard.
pub fn normalized_feature(model: &MlpExtractor, x: &[f64]) -> Result<Vec<f64>> {
    let head = ClassifierHead {
        weights: Matrix::zeros(1, model.feature_dim()),
        fixed: true,
        normalize_features: true,
        temperature: 1.0,
    };
    Ok(forward(model, &head, x)?.head_input)
}

pub fn gaussian_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[allow(dead_code)]
fn _use_matmul_reexport() {
    // matmul is re-exported for tests through numerics; nothing here.
    let _ = matmul;
}
