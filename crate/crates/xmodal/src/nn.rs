//! Multi-layer perceptrons with an explicit reverse-mode gradient contract.
//!
//! Encoders expose every layer's activation through [`ForwardTrace`], so a
//! caller can read both the penultimate feature and the final embedding, and
//! [`forward_from_layer`] runs only the tail of a network, which is how a
//! student feature is injected into a frozen teacher head.

use crate::error::{Result, XmodalError};
use crate::numcore::{Matrix, RandomStream};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    Identity,
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// input -> hidden... -> output widths; affine layer count = len - 1
    pub layer_sizes: Vec<usize>,
    /// activation after each affine layer except the last
    pub hidden: Vec<Activation>,
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        hidden: Activation,
        final_activation: FinalActivation,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(XmodalError::config("MlpSpec needs at least one affine layer"));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(XmodalError::config("layer sizes must be positive"));
        }
        let n_affine = layer_sizes.len() - 1;
        Ok(MlpSpec {
            layer_sizes,
            hidden: vec![hidden; n_affine - 1],
            final_activation,
        })
    }

    pub fn n_affine(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Width of the activation entering affine layer `l`.
    pub fn width_at(&self, l: usize) -> usize {
        self.layer_sizes[l]
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// weights[k] has shape layer_sizes[k] x layer_sizes[k+1]
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    /// Scaled Gaussian init, std = 1/sqrt(fan_in); biases zero.
    pub fn init(spec: &MlpSpec, stream: &mut RandomStream) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..spec.n_affine() {
            let (fan_in, fan_out) = (spec.layer_sizes[k], spec.layer_sizes[k + 1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let mut w = Matrix::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                *v = std * stream.next_gaussian();
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        MlpParams { weights, biases }
    }

    pub fn zeros_like(spec: &MlpSpec) -> Self {
        let weights = (0..spec.n_affine())
            .map(|k| Matrix::zeros(spec.layer_sizes[k], spec.layer_sizes[k + 1]))
            .collect();
        let biases = (0..spec.n_affine())
            .map(|k| vec![0.0; spec.layer_sizes[k + 1]])
            .collect();
        MlpParams { weights, biases }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub start_layer: usize,
    pub input: Matrix,
    /// pre-activations for affine layers start_layer..n_affine
    pub pre: Vec<Matrix>,
    /// post-activations, same indexing as `pre`
    pub act: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.act.last().unwrap_or(&self.input)
    }

    /// Activation after absolute affine layer `k`.
    pub fn activation_after(&self, k: usize) -> &Matrix {
        &self.act[k - self.start_layer]
    }
}

#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub d_weights: Vec<Matrix>,
    pub d_biases: Vec<Vec<f64>>,
    pub d_input: Matrix,
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut z = x.matmul(w)?;
    for i in 0..z.rows() {
        for (v, &bj) in z.row_mut(i).iter_mut().zip(b) {
            *v += bj;
        }
    }
    Ok(z)
}

pub fn forward(spec: &MlpSpec, params: &MlpParams, x: &Matrix) -> Result<ForwardTrace> {
    forward_from_layer(spec, params, 0, x)
}

/// Run affine layers `l..` only; with `l == 0` this is the full forward pass.
pub fn forward_from_layer(
    spec: &MlpSpec,
    params: &MlpParams,
    l: usize,
    x: &Matrix,
) -> Result<ForwardTrace> {
    let n = spec.n_affine();
    if l >= n {
        return Err(XmodalError::config(format!(
            "layer index {l} out of range for {n} affine layers"
        )));
    }
    if x.cols() != spec.width_at(l) {
        return Err(XmodalError::shape(format!(
            "input width {} does not match layer {} width {}",
            x.cols(),
            l,
            spec.width_at(l)
        )));
    }
    let mut pre = Vec::with_capacity(n - l);
    let mut act = Vec::with_capacity(n - l);
    let mut a = x.clone();
    for k in l..n {
        let z = affine(&a, &params.weights[k], &params.biases[k])?;
        let out = if k + 1 < n {
            match spec.hidden[k] {
                Activation::Identity => z.clone(),
                Activation::Tanh => z.map(f64::tanh),
                Activation::Relu => z.map(|v| v.max(0.0)),
            }
        } else {
            match spec.final_activation {
                FinalActivation::Identity => z.clone(),
                FinalActivation::Softmax => z.softmax_rows(),
                FinalActivation::Sigmoid => z.map(|v| 1.0 / (1.0 + (-v).exp())),
            }
        };
        pre.push(z);
        act.push(out.clone());
        a = out;
    }
    Ok(ForwardTrace {
        start_layer: l,
        input: x.clone(),
        pre,
        act,
    })
}

pub fn backward(
    spec: &MlpSpec,
    params: &MlpParams,
    trace: &ForwardTrace,
    grad_out: &Matrix,
) -> Result<MlpGradients> {
    backward_with_injections(spec, params, trace, grad_out, &[])
}

/// Reverse-mode pass for the cached forward. `extra` holds additional
/// gradients arriving at intermediate activations: `(k, g)` adds `g` to the
/// gradient of the activation AFTER absolute affine layer `k`. This is how an
/// encoder receives gradient at its penultimate feature as well as its output.
pub fn backward_with_injections(
    spec: &MlpSpec,
    params: &MlpParams,
    trace: &ForwardTrace,
    grad_out: &Matrix,
    extra: &[(usize, &Matrix)],
) -> Result<MlpGradients> {
    let n = spec.n_affine();
    let start = trace.start_layer;
    let out = trace.output();
    if grad_out.rows() != out.rows() || grad_out.cols() != out.cols() {
        return Err(XmodalError::shape("grad_out shape mismatch".to_string()));
    }
    let mut d_weights: Vec<Matrix> = (0..n)
        .map(|k| Matrix::zeros(spec.layer_sizes[k], spec.layer_sizes[k + 1]))
        .collect();
    let mut d_biases: Vec<Vec<f64>> = (0..n).map(|k| vec![0.0; spec.layer_sizes[k + 1]]).collect();

    // g = gradient w.r.t. the activation after affine layer k
    let mut g = grad_out.clone();
    for (idx, extra_g) in extra {
        if *idx == n - 1 {
            g.add_assign(extra_g)?;
        }
    }
    for k in (start..n).rev() {
        let a = &trace.act[k - start];
        let z = &trace.pre[k - start];
        // gradient w.r.t. the pre-activation
        let dz = if k + 1 < n {
            match spec.hidden[k] {
                Activation::Identity => g.clone(),
                Activation::Tanh => g.hadamard(&a.map(|v| 1.0 - v * v))?,
                Activation::Relu => g.hadamard(&z.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?,
            }
        } else {
            match spec.final_activation {
                FinalActivation::Identity => g.clone(),
                FinalActivation::Sigmoid => g.hadamard(&a.map(|v| v * (1.0 - v)))?,
                FinalActivation::Softmax => {
                    let mut dz = Matrix::zeros(g.rows(), g.cols());
                    for i in 0..g.rows() {
                        let p = a.row(i);
                        let gr = g.row(i);
                        let dot: f64 = p.iter().zip(gr).map(|(&pj, &gj)| pj * gj).sum();
                        for j in 0..g.cols() {
                            dz.set(i, j, p[j] * (gr[j] - dot));
                        }
                    }
                    dz
                }
            }
        };
        let a_prev = if k == start {
            &trace.input
        } else {
            &trace.act[k - 1 - start]
        };
        d_weights[k] = a_prev.transpose().matmul(&dz)?;
        for i in 0..dz.rows() {
            for (bj, &v) in d_biases[k].iter_mut().zip(dz.row(i)) {
                *bj += v;
            }
        }
        g = dz.matmul(&params.weights[k].transpose())?;
        if k > start {
            for (idx, extra_g) in extra {
                if *idx == k - 1 {
                    g.add_assign(extra_g)?;
                }
            }
        }
    }
    Ok(MlpGradients {
        d_weights,
        d_biases,
        d_input: g,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    m_w: Vec<Matrix>,
    v_w: Vec<Matrix>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(spec: &MlpSpec, cfg: AdamConfig) -> Self {
        let zeros = MlpParams::zeros_like(spec);
        AdamState {
            cfg,
            step: 0,
            m_w: zeros.weights.clone(),
            v_w: zeros.weights,
            m_b: zeros.biases.clone(),
            v_b: zeros.biases,
        }
    }
}

fn adam_update(m: &mut f64, v: &mut f64, g: f64, p: &mut f64, cfg: &AdamConfig, t: u64) {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / (1.0 - cfg.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - cfg.beta2.powi(t as i32));
    *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
}

/// One Adam step with bias correction. `grads.d_input` is ignored.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &MlpGradients) {
    state.step += 1;
    let t = state.step;
    let cfg = state.cfg;
    for k in 0..params.weights.len() {
        let (mw, vw) = (&mut state.m_w[k], &mut state.v_w[k]);
        for ((p, g), (m, v)) in params.weights[k]
            .data_mut()
            .iter_mut()
            .zip(grads.d_weights[k].data())
            .zip(mw.data_mut().iter_mut().zip(vw.data_mut().iter_mut()))
        {
            adam_update(m, v, *g, p, &cfg, t);
        }
        for ((p, g), (m, v)) in params.biases[k]
            .iter_mut()
            .zip(&grads.d_biases[k])
            .zip(state.m_b[k].iter_mut().zip(state.v_b[k].iter_mut()))
        {
            adam_update(m, v, *g, p, &cfg, t);
        }
    }
}

/// Spec plus parameters; the unit a ModelBundle is assembled from.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, stream: &mut RandomStream) -> Self {
        let params = MlpParams::init(&spec, stream);
        Mlp { spec, params }
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        forward(&self.spec, &self.params, x)
    }

    pub fn forward_from(&self, l: usize, x: &Matrix) -> Result<ForwardTrace> {
        forward_from_layer(&self.spec, &self.params, l, x)
    }
}

// ---- checkpoint serialization (hex-float, bit-exact round trip) ----

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    spec: MlpSpec,
    weights: Vec<Vec<String>>,
    biases: Vec<Vec<String>>,
}

fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn hex_to_f64(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| XmodalError::Other(format!("bad hex float '{s}': {e}")))
}

pub fn checkpoint_to_json(mlp: &Mlp) -> String {
    let ckpt = Checkpoint {
        spec: mlp.spec.clone(),
        weights: mlp
            .params
            .weights
            .iter()
            .map(|w| w.data().iter().map(|&v| f64_to_hex(v)).collect())
            .collect(),
        biases: mlp
            .params
            .biases
            .iter()
            .map(|b| b.iter().map(|&v| f64_to_hex(v)).collect())
            .collect(),
    };
    serde_json::to_string_pretty(&ckpt).expect("checkpoint serialization")
}

pub fn checkpoint_from_json(json: &str) -> Result<Mlp> {
    let ckpt: Checkpoint =
        serde_json::from_str(json).map_err(|e| XmodalError::Other(format!("checkpoint: {e}")))?;
    let spec = ckpt.spec;
    let mut weights = Vec::new();
    for (k, hexes) in ckpt.weights.iter().enumerate() {
        let data: Result<Vec<f64>> = hexes.iter().map(|h| hex_to_f64(h)).collect();
        weights.push(Matrix::from_vec(
            spec.layer_sizes[k],
            spec.layer_sizes[k + 1],
            data?,
        )?);
    }
    let mut biases = Vec::new();
    for hexes in &ckpt.biases {
        let b: Result<Vec<f64>> = hexes.iter().map(|h| hex_to_f64(h)).collect();
        biases.push(b?);
    }
    Ok(Mlp {
        spec,
        params: MlpParams { weights, biases },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_221() -> MlpSpec {
        MlpSpec::new(vec![2, 2, 1], Activation::Tanh, FinalActivation::Identity).unwrap()
    }

    #[test]
    fn identity_single_layer() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Identity, FinalActivation::Identity).unwrap();
        let params = MlpParams {
            weights: vec![Matrix::identity(2)],
            biases: vec![vec![0.0, 0.0]],
        };
        let x = Matrix::from_rows(&[vec![0.5, -1.5]]).unwrap();
        let trace = forward(&spec, &params, &x).unwrap();
        assert_eq!(trace.output(), &x);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu, FinalActivation::Identity).unwrap();
        let params = MlpParams::zeros_like(&spec);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let trace = forward(&spec, &params, &x).unwrap();
        assert!(trace.output().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_tanh_hand_oracle() {
        // W1 = [[0.5, -0.25], [0.1, 0.3]], b1 = [0.1, -0.2], W2 = [[1.0], [2.0]], b2 = [0.05]
        let spec = spec_221();
        let params = MlpParams {
            weights: vec![
                Matrix::from_rows(&[vec![0.5, -0.25], vec![0.1, 0.3]]).unwrap(),
                Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            ],
            biases: vec![vec![0.1, -0.2], vec![0.05]],
        };
        let x = Matrix::from_rows(&[vec![0.3, -0.7]]).unwrap();
        // scalar-by-scalar oracle
        let z1: f64 = 0.3 * 0.5 + (-0.7) * 0.1 + 0.1;
        let z2: f64 = 0.3 * (-0.25) + (-0.7) * 0.3 - 0.2;
        let (a1, a2) = (z1.tanh(), z2.tanh());
        let expected = a1 * 1.0 + a2 * 2.0 + 0.05;
        let trace = forward(&spec, &params, &x).unwrap();
        assert!((trace.output().get(0, 0) - expected).abs() < 1e-12);
        // trace exposes the hidden activation
        assert!((trace.activation_after(0).get(0, 0) - a1).abs() < 1e-12);
    }

    #[test]
    fn backward_zero_cotangent() {
        let spec = spec_221();
        let mut stream = RandomStream::new(3);
        let params = MlpParams::init(&spec, &mut stream);
        let x = Matrix::from_rows(&[vec![0.2, 0.4]]).unwrap();
        let trace = forward(&spec, &params, &x).unwrap();
        let grads = backward(&spec, &params, &trace, &Matrix::zeros(1, 1)).unwrap();
        assert!(grads.d_weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
        assert!(grads.d_input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_linear_case() {
        // identity single layer: input gradient == grad_out * W^T
        let spec = MlpSpec::new(vec![2, 3], Activation::Identity, FinalActivation::Identity).unwrap();
        let mut stream = RandomStream::new(8);
        let params = MlpParams::init(&spec, &mut stream);
        let x = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let trace = forward(&spec, &params, &x).unwrap();
        let g = Matrix::from_rows(&[vec![0.5, -2.0, 1.0]]).unwrap();
        let grads = backward(&spec, &params, &trace, &g).unwrap();
        let expected = g.matmul(&params.weights[0].transpose()).unwrap();
        for (a, b) in grads.d_input.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_from_layer_zero_matches_forward() {
        let spec = spec_221();
        let mut stream = RandomStream::new(17);
        let params = MlpParams::init(&spec, &mut stream);
        let x = Matrix::from_rows(&[vec![0.1, 0.9], vec![-0.5, 0.2]]).unwrap();
        let full = forward(&spec, &params, &x).unwrap();
        let from0 = forward_from_layer(&spec, &params, 0, &x).unwrap();
        assert_eq!(full.output(), from0.output());
    }

    #[test]
    fn self_injection_matches_full_forward() {
        let spec = MlpSpec::new(vec![3, 5, 4, 2], Activation::Tanh, FinalActivation::Softmax).unwrap();
        let mut stream = RandomStream::new(23);
        let params = MlpParams::init(&spec, &mut stream);
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 0.8]]).unwrap();
        let full = forward(&spec, &params, &x).unwrap();
        let f = full.activation_after(0).clone();
        let tail = forward_from_layer(&spec, &params, 1, &f).unwrap();
        assert_eq!(full.output(), tail.output());
    }

    #[test]
    fn adam_zero_gradient_no_change() {
        let spec = spec_221();
        let mut stream = RandomStream::new(5);
        let mut params = MlpParams::init(&spec, &mut stream);
        let before = params.clone();
        let grads = MlpGradients {
            d_weights: MlpParams::zeros_like(&spec).weights,
            d_biases: MlpParams::zeros_like(&spec).biases,
            d_input: Matrix::zeros(1, 2),
        };
        let mut state = AdamState::new(&spec, AdamConfig::default());
        adam_step(&mut state, &mut params, &grads);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_hand_recursion_scalar() {
        // single 1x1 weight, three steps with gradients 1.0, -0.5, 2.0
        let spec = MlpSpec::new(vec![1, 1], Activation::Identity, FinalActivation::Identity).unwrap();
        let mut params = MlpParams {
            weights: vec![Matrix::from_vec(1, 1, vec![0.3]).unwrap()],
            biases: vec![vec![0.0]],
        };
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(&spec, cfg);
        let gs = [1.0, -0.5, 2.0];
        // closed-form recursion computed alongside
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.3f64);
        for (t, &g) in gs.iter().enumerate() {
            let grads = MlpGradients {
                d_weights: vec![Matrix::from_vec(1, 1, vec![g]).unwrap()],
                d_biases: vec![vec![0.0]],
                d_input: Matrix::zeros(1, 1),
            };
            adam_step(&mut state, &mut params, &grads);
            let t = (t + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            assert!((params.weights[0].get(0, 0) - p).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_constant_gradient_magnitude_approaches_lr() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Identity, FinalActivation::Identity).unwrap();
        let mut params = MlpParams {
            weights: vec![Matrix::from_vec(1, 1, vec![0.0]).unwrap()],
            biases: vec![vec![0.0]],
        };
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(&spec, cfg);
        let mut prev = 0.0;
        for step in 0..200 {
            let grads = MlpGradients {
                d_weights: vec![Matrix::from_vec(1, 1, vec![3.0]).unwrap()],
                d_biases: vec![vec![0.0]],
                d_input: Matrix::zeros(1, 1),
            };
            adam_step(&mut state, &mut params, &grads);
            let cur = params.weights[0].get(0, 0);
            if step > 50 {
                assert!(((prev - cur).abs() - cfg.lr).abs() < 1e-4);
            }
            prev = cur;
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let spec = MlpSpec::new(vec![4, 3, 2], Activation::Tanh, FinalActivation::Softmax).unwrap();
        let mut stream = RandomStream::new(99);
        let mlp = Mlp::new(spec, &mut stream);
        let json = checkpoint_to_json(&mlp);
        let back = checkpoint_from_json(&json).unwrap();
        assert_eq!(mlp, back);
    }
}
