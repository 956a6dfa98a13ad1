use serde::Serialize;

use super::Mlp;
use crate::error::Result;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const AUDIT_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, AUDIT_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(AUDIT_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

impl AuditReport {
    fn record(&mut self, analytic: f64, fd: f64) {
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(rel_err(analytic, fd));
    }
}

fn empty() -> AuditReport {
    AuditReport {
        checked: 0,
        max_rel_err: 0.0,
    }
}

/// Central differences of `⟨dout, f(x)⟩` in every parameter.
pub fn audit_grad_params(net: &Mlp, x: &[f64], dout: &[f64], h: f64) -> Result<AuditReport> {
    let g = net.grad_params(x, dout)?;
    let mut probe = net.clone();
    let mut rep = empty();
    let f = |n: &Mlp| -> Result<f64> {
        Ok(n.forward(x)?.iter().zip(dout).map(|(a, b)| a * b).sum())
    };
    for i in 0..net.n_params() {
        let p0 = net.params()[i];
        probe.params_mut()[i] = p0 + h;
        let fp = f(&probe)?;
        probe.params_mut()[i] = p0 - h;
        let fm = f(&probe)?;
        probe.params_mut()[i] = p0;
        rep.record(g[i], (fp - fm) / (2.0 * h));
    }
    Ok(rep)
}

/// Central differences of `log f(x)` in every input coordinate.
pub fn audit_grad_input(net: &Mlp, x: &[f64], h: f64) -> Result<AuditReport> {
    let g = net.grad_input(x)?;
    let mut rep = empty();
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = net.forward(&xp)?[0].ln();
        xp[i] = x[i] - h;
        let fm = net.forward(&xp)?[0].ln();
        xp[i] = x[i];
        rep.record(g[i], (fp - fm) / (2.0 * h));
    }
    Ok(rep)
}

/// Central differences in parameters of `vᵀ∇_x z(x)`.
pub fn audit_mixed_grad(net: &Mlp, x: &[f64], v: &[f64], h: f64) -> Result<AuditReport> {
    let mut g = vec![0.0; net.n_params()];
    net.accumulate_mixed_grad(x, v, 1.0, &mut g)?;
    let dir = |n: &Mlp| -> Result<f64> {
        let (_, gx) = n.logit_and_grad_input(x)?;
        Ok(gx.iter().zip(v).map(|(a, b)| a * b).sum())
    };
    let mut probe = net.clone();
    let mut rep = empty();
    for i in 0..net.n_params() {
        let p0 = net.params()[i];
        probe.params_mut()[i] = p0 + h;
        let fp = dir(&probe)?;
        probe.params_mut()[i] = p0 - h;
        let fm = dir(&probe)?;
        probe.params_mut()[i] = p0;
        rep.record(g[i], (fp - fm) / (2.0 * h));
    }
    Ok(rep)
}
