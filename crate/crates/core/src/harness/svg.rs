//! 2D scatter of samples over contour lines of the target density.

use std::fmt::Write;

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::guidance::Provenance;
use crate::rewards::TiltedDistribution;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;
const GRID: usize = 80;
const MAX_POINTS: usize = 2000;
/// Contours at these fractions of the peak density on the grid.
const LEVELS: [f64; 5] = [0.05, 0.2, 0.4, 0.6, 0.8];

struct Frame {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let w = SIZE - 2.0 * MARGIN;
        (
            MARGIN + (x - self.lo[0]) / (self.hi[0] - self.lo[0]) * w,
            SIZE - MARGIN - (y - self.lo[1]) / (self.hi[1] - self.lo[1]) * w,
        )
    }

    fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let f = |k: usize, a: usize| self.lo[k] + (self.hi[k] - self.lo[k]) * a as f64 / (GRID - 1) as f64;
        (f(0, i), f(1, j))
    }
}

fn frame(samples: &[DVector<f64>]) -> Frame {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for k in 0..2 {
        let mut v: Vec<f64> = samples.iter().map(|x| x[k]).filter(|v| v.is_finite()).collect();
        v.sort_by(|a, b| a.total_cmp(b));
        if v.is_empty() {
            lo[k] = -1.0;
            hi[k] = 1.0;
            continue;
        }
        // trim the extreme 0.1% so a few outliers do not squash the plot
        let cut = v.len() / 1000;
        lo[k] = v[cut];
        hi[k] = v[v.len() - 1 - cut];
        let pad = 0.1 * (hi[k] - lo[k]).max(1e-6);
        lo[k] -= pad;
        hi[k] += pad;
    }
    Frame { lo, hi }
}

/// Marching-squares segments of `{f = level}` on the grid.
fn contour_segments(f: &[Vec<f64>], level: f64) -> Vec<[(f64, f64); 2]> {
    let mut segs = Vec::new();
    let lerp = |a: f64, b: f64| if (b - a).abs() < 1e-300 { 0.5 } else { (level - a) / (b - a) };
    for i in 0..GRID - 1 {
        for j in 0..GRID - 1 {
            let c = [f[i][j], f[i + 1][j], f[i + 1][j + 1], f[i][j + 1]];
            let corners = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
            let mut pts = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (c[e], c[(e + 1) % 4]);
                if (a >= level) != (b >= level) {
                    let s = lerp(a, b);
                    let (p, q) = (corners[e], corners[(e + 1) % 4]);
                    pts.push((i as f64 + p.0 + s * (q.0 - p.0), j as f64 + p.1 + s * (q.1 - p.1)));
                }
            }
            if pts.len() >= 2 {
                segs.push([pts[0], pts[1]]);
            }
            if pts.len() == 4 {
                segs.push([pts[2], pts[3]]);
            }
        }
    }
    segs
}

/// SVG document with the provenance in a leading comment.
pub fn scatter_over_density(samples: &[DVector<f64>], target: &TiltedDistribution, prov: &Provenance) -> Result<String> {
    if target.dim() != 2 {
        return Err(Error::Unsupported("scatter plots are 2D only".into()));
    }
    for x in samples {
        check_dim(2, x.len())?;
    }
    let fr = frame(samples);
    let mut dens = vec![vec![0.0; GRID]; GRID];
    let mut peak: f64 = 0.0;
    for (i, row) in dens.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (x, y) = fr.at(i, j);
            *v = target.log_density(&DVector::from_vec(vec![x, y]))?.exp();
            peak = peak.max(*v);
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, "<!-- config_hash={} seed={} -->", prov.config_hash, prov.seed);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let cell = |g: (f64, f64)| {
        let x = fr.lo[0] + (fr.hi[0] - fr.lo[0]) * g.0 / (GRID - 1) as f64;
        let y = fr.lo[1] + (fr.hi[1] - fr.lo[1]) * g.1 / (GRID - 1) as f64;
        fr.px(x, y)
    };
    if peak > 0.0 {
        let _ = writeln!(s, r##"<g stroke="#1f4e9c" stroke-width="1" fill="none">"##);
        for lv in LEVELS {
            for [a, b] in contour_segments(&dens, lv * peak) {
                let (p, q) = (cell(a), cell(b));
                let _ = writeln!(s, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#, p.0, p.1, q.0, q.1);
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let stride = samples.len().div_ceil(MAX_POINTS).max(1);
    let _ = writeln!(s, r##"<g fill="#d0452b" fill-opacity="0.45">"##);
    for x in samples.iter().step_by(stride) {
        if x[0] < fr.lo[0] || x[0] > fr.hi[0] || x[1] < fr.lo[1] || x[1] > fr.hi[1] {
            continue;
        }
        let (px, py) = fr.px(x[0], x[1]);
        let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.6"/>"#);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{w}" height="{w}" fill="none" stroke="black"/>"#,
        w = SIZE - 2.0 * MARGIN
    );
    let _ = writeln!(s, "</svg>");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::GaussianMixture;
    use crate::rewards::{tilt_gm, Reward};
    use nalgebra::DMatrix;

    #[test]
    fn contours_of_a_cone_are_closed_rings() {
        let f: Vec<Vec<f64>> = (0..GRID)
            .map(|i| (0..GRID).map(|j| -((i as f64 - 40.0).powi(2) + (j as f64 - 40.0).powi(2)).sqrt()).collect())
            .collect();
        let segs = contour_segments(&f, -10.0);
        // every crossing point of a closed curve is shared by two segments
        let total: f64 = segs.iter().map(|[a, b]| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).sum();
        assert!((total - 2.0 * std::f64::consts::PI * 10.0).abs() < 1.0, "{total}");
    }

    #[test]
    fn renders_2d_only() {
        let gm = GaussianMixture::new(vec![1.0], vec![DVector::zeros(2)], vec![DMatrix::identity(2, 2)]).unwrap();
        let q = tilt_gm(&gm, &Reward::linear(DVector::from_vec(vec![1.0, 0.0]), 1.0).unwrap()).unwrap();
        let xs: Vec<DVector<f64>> = (0..50).map(|i| DVector::from_vec(vec![(i as f64 / 10.0).sin(), i as f64 / 25.0 - 1.0])).collect();
        let prov = Provenance {
            config_hash: "h".into(),
            seed: 1,
        };
        let doc = scatter_over_density(&xs, &q, &prov).unwrap();
        assert!(doc.contains("<!-- config_hash=h seed=1 -->"));
        assert_eq!(doc.matches("<circle").count(), 50);
        assert!(doc.contains("<line"));
        let gm1 = GaussianMixture::from_1d(&[(1.0, 0.0, 1.0)]).unwrap();
        let q1 = tilt_gm(&gm1, &Reward::linear(DVector::from_element(1, 1.0), 1.0).unwrap()).unwrap();
        assert!(scatter_over_density(&[], &q1, &prov).is_err());
    }
}
