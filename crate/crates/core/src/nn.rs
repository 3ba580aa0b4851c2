//! Multilayer perceptrons with ReLU hidden layers, reverse-mode gradients and Adam.
//!
//! Parameters of a network live in one flat vector. Layer `l` maps
//! `sizes[l]` inputs to `sizes[l + 1]` outputs and stores its weight matrix
//! row-major (`out x in`) followed by its bias vector. Optimizers and target
//! tracking therefore work on plain slices.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("network needs at least one layer")]
    NoLayers,
    #[error("soft-update rate {0} outside [0, 1]")]
    InvalidTau(f64),
    #[error("architectures differ")]
    ArchitectureMismatch,
}

/// Output nonlinearity applied after the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Squash {
    Identity,
    Tanh,
}

impl Squash {
    pub fn label(self) -> &'static str {
        match self {
            Squash::Identity => "identity",
            Squash::Tanh => "tanh",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Squash::Identity),
            "tanh" => Some(Squash::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    squash: Squash,
    params: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero network.
    pub fn zeros(sizes: &[usize], squash: Squash) -> Result<Self, NnError> {
        if sizes.len() < 2 {
            return Err(NnError::NoLayers);
        }
        Ok(Mlp { sizes: sizes.to_vec(), squash, params: vec![0.0; param_count(sizes)] })
    }

    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// weights and biases; the last layer is additionally scaled by `final_scale`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], squash: Squash, final_scale: f64, rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(sizes, squash)?;
        let last = net.num_layers() - 1;
        let mut offset = 0;
        for l in 0..net.num_layers() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / libm::sqrt(n_in as f64);
            let scale = if l == last { final_scale } else { 1.0 };
            for p in &mut net.params[offset..offset + n_in * n_out + n_out] {
                *p = scale * rng.random_range(-bound..=bound);
            }
            offset += n_in * n_out + n_out;
        }
        Ok(net)
    }

    pub fn from_parts(sizes: &[usize], squash: Squash, params: Vec<f64>) -> Result<Self, NnError> {
        let net = Self::zeros(sizes, squash)?;
        if params.len() != net.params.len() {
            return Err(NnError::ShapeMismatch { expected: net.params.len(), got: params.len() });
        }
        Ok(Mlp { params, ..net })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn squash(&self) -> Squash {
        self.squash
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, l: usize) -> usize {
        param_count(&self.sizes[..=l])
    }

    /// Weight matrix (row-major, `out x in`) and bias of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = self.layer_offset(l);
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.params[off..off + n_in * n_out];
        let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b)
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let off = self.layer_offset(l);
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let (w, rest) = self.params[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
        (w, rest)
    }

    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes && self.squash == other.squash
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut tape = Tape::default();
        self.forward_tape(x, &mut tape)?;
        Ok(tape.output().to_vec())
    }

    /// Forward pass that records every layer's activation for [`Mlp::backward`].
    pub fn forward_tape(&self, x: &[f64], tape: &mut Tape) -> Result<(), NnError> {
        if x.len() != self.in_dim() {
            return Err(NnError::ShapeMismatch { expected: self.in_dim(), got: x.len() });
        }
        let layers = self.num_layers();
        tape.acts.resize_with(layers + 1, Vec::new);
        tape.acts[0].clear();
        tape.acts[0].extend_from_slice(x);
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.params[off..off + n_in * n_out + n_out].split_at(n_in * n_out);
            let (head, tail) = tape.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            out.clear();
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(input) {
                    z += wi * xi;
                }
                let y = if l + 1 < layers {
                    z.max(0.0)
                } else {
                    match self.squash {
                        Squash::Identity => z,
                        Squash::Tanh => libm::tanh(z),
                    }
                };
                out.push(y);
            }
            off += n_in * n_out + n_out;
        }
        Ok(())
    }

    /// Reverse pass for the tape of the last forward call.
    ///
    /// Accumulates `d(output . upstream)/d(params)` into `grads` when given and
    /// returns the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], mut grads: Option<&mut [f64]>) -> Result<Vec<f64>, NnError> {
        if upstream.len() != self.out_dim() {
            return Err(NnError::ShapeMismatch { expected: self.out_dim(), got: upstream.len() });
        }
        if let Some(g) = grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(NnError::ShapeMismatch { expected: self.params.len(), got: g.len() });
            }
        }
        let layers = self.num_layers();
        let out = tape.output();
        let mut delta: Vec<f64> = match self.squash {
            Squash::Identity => upstream.to_vec(),
            Squash::Tanh => upstream.iter().zip(out).map(|(u, y)| u * (1.0 - y * y)).collect(),
        };
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.layer_offset(l);
            let input = &tape.acts[l];
            if let Some(g) = grads.as_deref_mut() {
                let (gw, gb) = g[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (gwi, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                        *gwi += d * xi;
                    }
                }
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            if l > 0 {
                // ReLU gate of the layer below
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// Gradient of `output . upstream` with respect to every parameter.
pub fn mlp_gradient(net: &Mlp, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>, NnError> {
    let mut tape = Tape::default();
    net.forward_tape(x, &mut tape)?;
    let mut g = vec![0.0; net.num_params()];
    net.backward(&tape, upstream, Some(&mut g))?;
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One bias-corrected descent step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch { expected: self.m.len(), got: grads.len().min(params.len()) });
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
        Ok(())
    }
}

/// `target <- (1 - tau) target + tau online`, elementwise.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<(), NnError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(NnError::InvalidTau(tau));
    }
    if !target.same_architecture(online) {
        return Err(NnError::ArchitectureMismatch);
    }
    if tau == 1.0 {
        target.params.copy_from_slice(&online.params);
        return Ok(());
    }
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        *t = (1.0 - tau) * *t + tau * o;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::rng::stream;
    use proptest::prelude::*;

    /// Network shapes used by the agents: actor/perturbation 4 -> 1, critic 5 -> 1,
    /// at full (2x64) and desk (2x32) width.
    const SHAPES: [(&[usize], Squash); 4] = [
        (&[4, 64, 64, 1], Squash::Tanh),
        (&[5, 64, 64, 1], Squash::Identity),
        (&[4, 32, 32, 1], Squash::Tanh),
        (&[5, 32, 32, 1], Squash::Identity),
    ];

    fn scalar_out(net: &Mlp, x: &[f64], up: &[f64]) -> f64 {
        net.forward(x).unwrap().iter().zip(up).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 8, 2], Squash::Identity).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut net = Mlp::zeros(&[3, 3], Squash::Identity).unwrap();
        let (w, _) = net.layer_mut(0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        assert_eq!(net.forward(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn forward_matches_hand_composition() {
        let mut rng = stream(11);
        let net = Mlp::init(&[2, 3, 1], Squash::Tanh, 1.0, &mut rng).unwrap();
        let x = [0.3, -0.7];
        let (w0, b0) = net.layer(0);
        let (w1, b1) = net.layer(1);
        let h: Vec<f64> = (0..3).map(|o| (w0[o * 2] * x[0] + w0[o * 2 + 1] * x[1] + b0[o]).max(0.0)).collect();
        let y = libm::tanh(w1[0] * h[0] + w1[1] * h[1] + w1[2] * h[2] + b1[0]);
        assert!((net.forward(&x).unwrap()[0] - y).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let net = Mlp::zeros(&[4, 2, 1], Squash::Identity).unwrap();
        assert_eq!(net.forward(&[1.0; 3]), Err(NnError::ShapeMismatch { expected: 4, got: 3 }));
        assert!(mlp_gradient(&net, &[1.0; 4], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = stream(12);
        let net = Mlp::init(&[4, 16, 16, 1], Squash::Tanh, 1.0, &mut rng).unwrap();
        let g = mlp_gradient(&net, &[0.1, 0.2, -0.3, 0.4], &[0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rng = stream(13);
        let net = Mlp::init(&[3, 2], Squash::Identity, 1.0, &mut rng).unwrap();
        let x = [1.5, -2.0, 0.25];
        let up = [0.7, -1.1];
        let g = mlp_gradient(&net, &x, &up).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g[o * 3 + i], up[o] * x[i]);
            }
            assert_eq!(g[6 + o], up[o]);
        }
    }

    /// Central differences with h = 1e-5 against the analytic gradient.
    fn finite_difference_error(sizes: &[usize], squash: Squash, seed: u64) -> f64 {
        let mut rng = stream(seed);
        let net = Mlp::init(sizes, squash, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = mlp_gradient(&net, &x, &up).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..net.num_params() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (scalar_out(&plus, &x, &up) - scalar_out(&minus, &x, &up)) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_on_small_nets() {
        for (sizes, squash) in [(&[3usize, 5, 4, 2][..], Squash::Tanh), (&[2, 7, 1][..], Squash::Identity)] {
            for seed in 0..3 {
                let err = finite_difference_error(sizes, squash, seed);
                assert!(err < 1e-4, "{sizes:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_agent_shapes() {
        for (sizes, squash) in SHAPES {
            let err = finite_difference_error(sizes, squash, 21);
            assert!(err < 1e-4, "{sizes:?}: {err}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut opt = Adam::new(AdamConfig::default(), 3);
        opt.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut p = vec![0.0, 0.0];
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut opt = Adam::new(cfg, 2);
        opt.step(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-8);
        assert!((p[1] - 0.01).abs() < 1e-8);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        // f(x, y) = (x - 1)^2 + 10 (y + 2)^2
        let f = |p: &[f64]| (p[0] - 1.0).powi(2) + 10.0 * (p[1] + 2.0).powi(2);
        let mut p = vec![4.0, 3.0];
        let start = f(&p);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, 2);
        let mut last = start;
        let mut steps_down = 0;
        for _ in 0..200 {
            let g = [2.0 * (p[0] - 1.0), 20.0 * (p[1] + 2.0)];
            opt.step(&mut p, &g).unwrap();
            let now = f(&p);
            if now < last {
                steps_down += 1;
            }
            last = now;
        }
        assert!(last < 1e-3 * start, "{last} vs {start}");
        assert!(steps_down > 150);
    }

    #[test]
    fn soft_update_extremes() {
        let mut rng = stream(14);
        let online = Mlp::init(&[2, 4, 1], Squash::Identity, 1.0, &mut rng).unwrap();
        let orig = Mlp::init(&[2, 4, 1], Squash::Identity, 1.0, &mut rng).unwrap();
        let mut t = orig.clone();
        soft_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, orig);
        soft_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);
        assert_eq!(soft_update(&mut t, &online, 1.5), Err(NnError::InvalidTau(1.5)));
        let other = Mlp::zeros(&[2, 3, 1], Squash::Identity).unwrap();
        assert_eq!(soft_update(&mut t, &other, 0.5), Err(NnError::ArchitectureMismatch));
    }

    #[test]
    fn soft_update_decays_geometrically() {
        let mut rng = stream(15);
        let online = Mlp::init(&[2, 4, 1], Squash::Identity, 1.0, &mut rng).unwrap();
        let mut t = Mlp::init(&[2, 4, 1], Squash::Identity, 1.0, &mut rng).unwrap();
        let gap0 = t.params().iter().zip(online.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for _ in 0..1000 {
            soft_update(&mut t, &online, 0.005).unwrap();
        }
        let gap = t.params().iter().zip(online.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 0.995f64.powi(1000) * gap0 * (1.0 + 1e-9), "{gap} {gap0}");
    }

    #[test]
    fn final_layer_scale_shrinks_output() {
        let mut rng = stream(16);
        let net = Mlp::init(&[4, 64, 64, 1], Squash::Tanh, 0.01, &mut rng).unwrap();
        let y = net.forward(&[0.5, -0.5, 0.2, 0.9]).unwrap()[0];
        assert!(y.abs() < 0.05, "{y}");
    }

    proptest! {
        #[test]
        fn forward_is_deterministic(seed in any::<u64>(), x in proptest::collection::vec(-2.0f64..2.0, 5)) {
            let net = Mlp::init(&[5, 8, 8, 1], Squash::Identity, 1.0, &mut stream(seed)).unwrap();
            prop_assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        }
    }
}
