use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Exponential moving average of parameters, bias-corrected like Adam's
/// first moment so early reads are not pulled toward zero.
#[derive(Debug, Clone)]
pub struct ParamAverage {
    decay: f64,
    step: u64,
    acc: Vec<f64>,
}

impl ParamAverage {
    pub fn new(n_params: usize, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Input(format!("averaging decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self { decay, step: 0, acc: vec![0.0; n_params] })
    }

    pub fn update(&mut self, params: &[f64]) {
        self.step += 1;
        for (a, p) in self.acc.iter_mut().zip(params) {
            *a = self.decay * *a + (1.0 - self.decay) * p;
        }
    }

    /// Current average; `None` before the first update.
    pub fn averaged(&self) -> Option<Vec<f64>> {
        if self.step == 0 {
            return None;
        }
        let bc = 1.0 - self.decay.powf(self.step as f64);
        Some(self.acc.iter().map(|a| a / bc).collect())
    }
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update. Nothing is modified if any gradient entry
    /// is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Input(format!(
                "adam state holds {} moments but got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {g} at parameter {i} (step {})",
                self.step + 1
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}


#[cfg(test)]
mod avg_tests {
    use super::*;

    #[test]
    fn average_of_constant_is_constant() {
        let mut a = ParamAverage::new(2, 0.99).unwrap();
        assert!(a.averaged().is_none());
        for _ in 0..5 {
            a.update(&[1.5, -2.0]);
        }
        let v = a.averaged().unwrap();
        assert!((v[0] - 1.5).abs() < 1e-12 && (v[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_decay_tracks_latest() {
        let mut a = ParamAverage::new(1, 0.0).unwrap();
        a.update(&[1.0]);
        a.update(&[3.0]);
        assert_eq!(a.averaged().unwrap(), vec![3.0]);
        assert!(ParamAverage::new(1, 1.0).is_err());
    }
}
