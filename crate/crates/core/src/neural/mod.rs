//! Small tanh MLP with exact reverse-mode gradients for parameters and inputs,
//! a forward-over-reverse mixed gradient, Adam, and JSON persistence.
//!
//! Parameters live in one flat buffer; layer `l` stores its weight matrix
//! (`out × in`, row-major) followed by its bias.

mod adam;
mod audit;

pub use adam::{AdamState, ParamAverage};
pub use audit::{audit_grad_input, audit_grad_params, audit_mixed_grad, rel_err, AuditReport, AUDIT_FLOOR};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// `exp(z)`: strictly positive scalar output.
    Exp,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    head: Head,
    params: Vec<f64>,
}

/// Per-layer activations from one forward pass.
struct Trace {
    /// `acts[0]` is the input, `acts[l]` the output of layer `l` (post-tanh for
    /// hidden layers, the pre-head logit for the last).
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn zeros(widths: &[usize], head: Head) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Input(format!("invalid layer widths {widths:?}")));
        }
        if head == Head::Exp && *widths.last().unwrap() != 1 {
            return Err(Error::Input("exponential head needs a scalar output".into()));
        }
        let n = widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum();
        Ok(Self {
            widths: widths.to_vec(),
            head,
            params: vec![0.0; n],
        })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier<R: Rng + ?Sized>(widths: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths, head)?;
        let mut off = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], head: Head, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(widths, head)?;
        if params.len() != net.params.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_scalar(&self) -> Result<()> {
        if self.output_dim() != 1 {
            return Err(Error::Usage(format!(
                "input gradient of log-output needs a scalar head (output width {})",
                self.output_dim()
            )));
        }
        Ok(())
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offsets of (weights, bias) for layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.widths[..l + 1]
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum();
        (off, off + self.widths[l] * self.widths[l + 1])
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(x.to_vec());
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            let w = &self.params[wo..wo + n_in * n_out];
            let b = &self.params[bo..bo + n_out];
            let prev = &acts[l];
            let last = l + 1 == self.n_layers();
            let out: Vec<f64> = (0..n_out)
                .map(|i| {
                    let row = &w[i * n_in..(i + 1) * n_in];
                    let u = b[i] + row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
                    if last {
                        u
                    } else {
                        u.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        Trace { acts }
    }

    fn apply_head(&self, z: &[f64]) -> Vec<f64> {
        match self.head {
            Head::Exp => z.iter().map(|v| v.exp()).collect(),
            Head::Identity => z.to_vec(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let tr = self.trace(x);
        Ok(self.apply_head(tr.acts.last().unwrap()))
    }

    /// Pre-head output `z`.
    pub fn logit(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).acts.pop().unwrap())
    }

    /// Reverse pass from a cotangent on the logit. Returns the input cotangent
    /// and, when `grad` is given, accumulates parameter gradients into it.
    fn backward(&self, tr: &Trace, dz: &[f64], mut grad: Option<&mut [f64]>) -> Vec<f64> {
        let mut delta = dz.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            let prev = &tr.acts[l];
            if let Some(g) = grad.as_deref_mut() {
                for i in 0..n_out {
                    let d = delta[i];
                    if d != 0.0 {
                        let gw = &mut g[wo + i * n_in..wo + (i + 1) * n_in];
                        for (gv, a) in gw.iter_mut().zip(prev) {
                            *gv += d * a;
                        }
                    }
                    g[bo + i] += d;
                }
            }
            let w = &self.params[wo..wo + n_in * n_out];
            let mut back = vec![0.0; n_in];
            for i in 0..n_out {
                let d = delta[i];
                if d == 0.0 {
                    continue;
                }
                for (b, wv) in back.iter_mut().zip(&w[i * n_in..(i + 1) * n_in]) {
                    *b += d * wv;
                }
            }
            if l > 0 {
                for (b, a) in back.iter_mut().zip(prev) {
                    *b *= 1.0 - a * a;
                }
            }
            delta = back;
        }
        delta
    }

    fn head_cotangent(&self, z: &[f64], dout: &[f64]) -> Vec<f64> {
        match self.head {
            Head::Exp => z.iter().zip(dout).map(|(z, d)| d * z.exp()).collect(),
            Head::Identity => dout.to_vec(),
        }
    }

    /// `∂⟨dout, f(x)⟩/∂θ` with `f` the head output.
    pub fn grad_params(&self, x: &[f64], dout: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.n_params()];
        self.accumulate_grad_params(x, dout, &mut g)?;
        Ok(g)
    }

    /// As [`Mlp::grad_params`] but adds into `grad`; returns the head output.
    pub fn accumulate_grad_params(&self, x: &[f64], dout: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if dout.len() != self.output_dim() || grad.len() != self.n_params() {
            return Err(Error::Input("gradient buffer shapes do not match the network".into()));
        }
        let tr = self.trace(x);
        let z = tr.acts.last().unwrap();
        let dz = self.head_cotangent(z, dout);
        self.backward(&tr, &dz, Some(grad));
        Ok(self.apply_head(z))
    }

    /// `∂⟨dout, f(x)⟩/∂x` (vector-Jacobian product through the head).
    pub fn vjp_input(&self, x: &[f64], dout: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if dout.len() != self.output_dim() {
            return Err(Error::Input("output cotangent has the wrong length".into()));
        }
        let tr = self.trace(x);
        let dz = self.head_cotangent(tr.acts.last().unwrap(), dout);
        Ok(self.backward(&tr, &dz, None))
    }

    /// `∇_x log f(x)` for a scalar network. With the exponential head this is
    /// the logit gradient; with the identity head it is `∇f/f`.
    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_scalar()?;
        self.check_input(x)?;
        let tr = self.trace(x);
        let z = tr.acts.last().unwrap()[0];
        let g = self.backward(&tr, &[1.0], None);
        Ok(match self.head {
            Head::Exp => g,
            Head::Identity => g.into_iter().map(|v| v / z).collect(),
        })
    }

    /// Logit `z(x)` together with `∇_x z(x)` for a scalar network.
    pub fn logit_and_grad_input(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_scalar()?;
        self.check_input(x)?;
        let tr = self.trace(x);
        let z = tr.acts.last().unwrap()[0];
        Ok((z, self.backward(&tr, &[1.0], None)))
    }

    /// For a scalar network, returns the directional derivative
    /// `J = vᵀ∇_x z(x)` and adds `c·∂J/∂θ` into `grad`.
    ///
    /// Forward-mode tangents along `v` are pushed through the net, then the
    /// primal/tangent pair is reversed.
    pub fn accumulate_mixed_grad(&self, x: &[f64], v: &[f64], c: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_scalar()?;
        self.check_input(x)?;
        if v.len() != x.len() || grad.len() != self.n_params() {
            return Err(Error::Input("direction or gradient buffer has the wrong length".into()));
        }
        let nl = self.n_layers();
        let tr = self.trace(x);
        // tangents ȧ_l and pre-activation tangents u̇_l
        let mut tangents: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);
        tangents.push(v.to_vec());
        let mut udots: Vec<Vec<f64>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (wo, _) = self.layer_offsets(l);
            let w = &self.params[wo..wo + n_in * n_out];
            let prev = &tangents[l];
            let udot: Vec<f64> = (0..n_out)
                .map(|i| w[i * n_in..(i + 1) * n_in].iter().zip(prev).map(|(a, b)| a * b).sum())
                .collect();
            let adot = if l + 1 == nl {
                udot.clone()
            } else {
                udot.iter()
                    .zip(&tr.acts[l + 1])
                    .map(|(ud, a)| (1.0 - a * a) * ud)
                    .collect()
            };
            udots.push(udot);
            tangents.push(adot);
        }
        let j = tangents[nl][0];
        // adjoints of (u_l, u̇_l), starting at the output
        let mut ubar = vec![0.0];
        let mut udbar = vec![c];
        for l in (0..nl).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            let a_prev = &tr.acts[l];
            let ad_prev = &tangents[l];
            for i in 0..n_out {
                let (ub, udb) = (ubar[i], udbar[i]);
                let gw = &mut grad[wo + i * n_in..wo + (i + 1) * n_in];
                for k in 0..n_in {
                    gw[k] += ub * a_prev[k] + udb * ad_prev[k];
                }
                grad[bo + i] += ub;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[wo..wo + n_in * n_out];
            let mut abar = vec![0.0; n_in];
            let mut adbar = vec![0.0; n_in];
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                for k in 0..n_in {
                    abar[k] += ubar[i] * row[k];
                    adbar[k] += udbar[i] * row[k];
                }
            }
            // a = tanh(u), ȧ = (1 - a²) u̇
            let a = &tr.acts[l];
            let ud = &udots[l - 1];
            ubar = (0..n_in)
                .map(|k| {
                    let s = 1.0 - a[k] * a[k];
                    s * abar[k] - 2.0 * a[k] * s * ud[k] * adbar[k]
                })
                .collect();
            udbar = (0..n_in).map(|k| (1.0 - a[k] * a[k]) * adbar[k]).collect();
        }
        Ok(j)
    }

    pub fn to_doc(&self) -> MlpDoc {
        let layers = (0..self.n_layers())
            .map(|l| {
                let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
                let (wo, bo) = self.layer_offsets(l);
                LayerDoc {
                    weights: (0..n_out)
                        .map(|i| self.params[wo + i * n_in..wo + (i + 1) * n_in].to_vec())
                        .collect(),
                    bias: self.params[bo..bo + n_out].to_vec(),
                }
            })
            .collect();
        MlpDoc {
            widths: self.widths.clone(),
            activation: "tanh".into(),
            head: self.head,
            layers,
        }
    }

    pub fn from_doc(doc: &MlpDoc) -> Result<Self> {
        if doc.activation != "tanh" {
            return Err(Error::Input(format!("unsupported activation {:?}", doc.activation)));
        }
        let mut net = Self::zeros(&doc.widths, doc.head)?;
        if doc.layers.len() != net.n_layers() {
            return Err(Error::Input("layer count does not match widths".into()));
        }
        let mut params = Vec::with_capacity(net.n_params());
        for (l, layer) in doc.layers.iter().enumerate() {
            let (n_in, n_out) = (doc.widths[l], doc.widths[l + 1]);
            if layer.weights.len() != n_out
                || layer.weights.iter().any(|r| r.len() != n_in)
                || layer.bias.len() != n_out
            {
                return Err(Error::Input(format!("layer {l} has the wrong shape")));
            }
            for row in &layer.weights {
                params.extend_from_slice(row);
            }
            params.extend_from_slice(&layer.bias);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Input("network parameters must be finite".into()));
        }
        net.params = params;
        Ok(net)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDoc {
    pub widths: Vec<usize>,
    pub activation: String,
    pub head: Head,
    pub layers: Vec<LayerDoc>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng_from_seed;

    #[test]
    fn parameter_count() {
        let net = Mlp::zeros(&[5, 64, 64, 1], Head::Exp).unwrap();
        assert_eq!(net.n_params(), 6 * 64 + 65 * 64 + 65);
        assert!(Mlp::zeros(&[3, 4, 2], Head::Exp).is_err());
    }

    #[test]
    fn zero_positive_net_outputs_one() {
        let net = Mlp::zeros(&[3, 8, 1], Head::Exp).unwrap();
        assert_eq!(net.forward(&[1.0, -4.0, 9.0]).unwrap(), vec![1.0]);
        assert_eq!(net.grad_input(&[1.0, -4.0, 9.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut params = vec![0.0; 3 * 3 + 3];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let net = Mlp::from_params(&[3, 3], Head::Identity, params).unwrap();
        assert_eq!(net.forward(&[0.5, -2.0, 3.0]).unwrap(), vec![0.5, -2.0, 3.0]);
        assert!(matches!(net.grad_input(&[0.0; 3]), Err(Error::Usage(_))));
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let net = Mlp::xavier(&[4, 16, 16, 1], Head::Exp, &mut rng_from_seed(1)).unwrap();
        let x = [0.3, -0.1, 2.0, 0.0];
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn grad_params_linearity() {
        let net = Mlp::xavier(&[2, 6, 3], Head::Identity, &mut rng_from_seed(4)).unwrap();
        let x = [0.7, -0.2];
        let g1 = net.grad_params(&x, &[0.5, -1.0, 2.0]).unwrap();
        let g2 = net.grad_params(&x, &[1.0, -2.0, 4.0]).unwrap();
        assert!(g1.iter().zip(&g2).all(|(a, b)| 2.0 * a == *b));
        assert!(net.grad_params(&x, &[0.0; 3]).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn positivity_on_large_inputs() {
        let mut rng = rng_from_seed(8);
        let net = Mlp::xavier(&[2, 64, 64, 1], Head::Exp, &mut rng).unwrap();
        for i in 0..200 {
            let a = i as f64 * 0.1;
            let x = [100.0 * a.cos(), 100.0 * a.sin()];
            let h = net.forward(&x).unwrap()[0];
            assert!(h > 0.0 && h.is_finite());
        }
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let net = Mlp::xavier(&[3, 5, 1], Head::Exp, &mut rng_from_seed(2)).unwrap();
        let s = serde_json::to_string(&net.to_doc()).unwrap();
        let back = Mlp::from_doc(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(net, back);
        let x = [0.1, 0.2, 0.3];
        assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
    }
}
