//! Per-pixel time-to-collision from the local scale rate of a flow field.
//!
//! A first-order (affine) model is fitted to the flow in a square window
//! around every pixel. Half its divergence is the scale rate `s` per frame and
//! the time to collision is `1 / s` frames for an approaching surface.

use serde::{Deserialize, Serialize};

use crate::diffcore::Field2D;
use crate::error::{Error, Result};
use crate::types::{FlowField, Image, Mask};

/// Scale rates at or below this value (per frame) are flagged invalid.
pub const MIN_SCALE_RATE: f64 = 1e-4;

/// Upper end of the log10 TTC range covered by [`ttc_colormap`].
pub const COLORMAP_MAX_LOG10: f64 = 3.0;

/// Neutral color for pixels without a valid TTC.
pub const INVALID_GRAY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TtcMap {
    /// TTC in frames; 0 where invalid.
    ttc: Field2D,
    valid: Vec<bool>,
}

impl TtcMap {
    /// Builds a map; invalid pixels must hold 0 and valid ones a positive value.
    pub fn new(ttc: Field2D, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != ttc.len() {
            return Err(Error::ShapeMismatch {
                op: "TtcMap::new",
                expected: format!("{} validity flags", ttc.len()),
                found: valid.len().to_string(),
            });
        }
        for (&t, &ok) in ttc.data().iter().zip(&valid) {
            if ok && !(t > 0.0) {
                return Err(Error::invalid(format!("valid TTC entries must be positive, got {t}")));
            }
            if !ok && t != 0.0 {
                return Err(Error::invalid("invalid TTC entries must hold 0"));
            }
        }
        Ok(Self { ttc, valid })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.ttc.shape()
    }

    pub fn ttc(&self) -> &Field2D {
        &self.ttc
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, y: usize, x: usize) -> Option<f64> {
        let i = y * self.ttc.width() + x;
        self.valid[i].then(|| self.ttc.data()[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Every valid TTC multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid(format!("TTC scale must be positive, got {c}")));
        }
        Ok(Self {
            ttc: self.ttc.map(|t| t * c),
            valid: self.valid.clone(),
        })
    }
}

/// Least-squares slopes of `f` over the window `[y0, y1) x [x0, x1)`.
/// On a full rectangular grid the x and y regressors are orthogonal after
/// centering, so each slope is an independent 1D regression.
fn window_slopes(f: &Field2D, (y0, y1): (usize, usize), (x0, x1): (usize, usize)) -> (f64, f64) {
    let cx = (x0 + x1 - 1) as f64 / 2.0;
    let cy = (y0 + y1 - 1) as f64 / 2.0;
    let (mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let val = f.get(y, x);
            sx += dx * val;
            sy += dy * val;
            sxx += dx * dx;
            syy += dy * dy;
        }
    }
    (sx / sxx, sy / syy)
}

/// Fits a local affine flow model in an odd `window` (clipped at the borders)
/// and converts the scale rate to a TTC in frames.
pub fn ttc_from_flow(flow: &FlowField, window: usize) -> Result<TtcMap> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid(format!("TTC window must be odd and at least 3, got {window}")));
    }
    let (h, w) = flow.shape();
    if window > h || window > w {
        return Err(Error::invalid(format!("TTC window {window} exceeds the {h}x{w} flow")));
    }
    let r = window / 2;
    let mut ttc = Field2D::zeros(h, w);
    let mut valid = vec![false; h * w];
    for y in 0..h {
        let ys = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let xs = (x.saturating_sub(r), (x + r + 1).min(w));
            let (du_dx, _) = window_slopes(&flow.u, ys, xs);
            let (_, dv_dy) = window_slopes(&flow.v, ys, xs);
            let s = 0.5 * (du_dx + dv_dy);
            if s > MIN_SCALE_RATE {
                ttc.set(y, x, 1.0 / s);
                valid[y * w + x] = true;
            }
        }
    }
    Ok(TtcMap { ttc, valid })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtcError {
    /// Mean of `|T_a - T_o| / T_o` over jointly valid pixels.
    pub mean_relative_error: f64,
    pub jointly_valid: usize,
    /// Fraction of considered pixels whose validity differs between the maps.
    pub validity_churn: f64,
}

/// Relative TTC error over every pixel.
pub fn ttc_error(attacked: &TtcMap, original: &TtcMap) -> Result<TtcError> {
    ttc_error_masked(attacked, original, None)
}

/// Relative TTC error restricted to `mask` when given.
pub fn ttc_error_masked(attacked: &TtcMap, original: &TtcMap, mask: Option<&Mask>) -> Result<TtcError> {
    if attacked.shape() != original.shape() || mask.is_some_and(|m| m.shape() != original.shape()) {
        return Err(Error::ShapeMismatch {
            op: "ttc_error",
            expected: format!("{:?}", original.shape()),
            found: format!("{:?}", attacked.shape()),
        });
    }
    let (mut sum, mut joint, mut churn, mut considered) = (0.0, 0usize, 0usize, 0usize);
    for i in 0..original.valid.len() {
        if mask.is_some_and(|m| !m.bits()[i]) {
            continue;
        }
        considered += 1;
        let (va, vo) = (attacked.valid[i], original.valid[i]);
        if va != vo {
            churn += 1;
        }
        if va && vo {
            let (ta, to) = (attacked.ttc.data()[i], original.ttc.data()[i]);
            sum += (ta - to).abs() / to;
            joint += 1;
        }
    }
    if joint == 0 {
        return Err(Error::invalid(format!(
            "ttc_error: no jointly valid pixels among {considered} considered"
        )));
    }
    Ok(TtcError {
        mean_relative_error: sum / joint as f64,
        jointly_valid: joint,
        validity_churn: churn as f64 / considered as f64,
    })
}

/// Ramp coordinate in `[0, 1]`; 1 is the hottest (shortest TTC).
pub fn ttc_heat(ttc: f64) -> f64 {
    1.0 - (ttc.max(1.0).log10() / COLORMAP_MAX_LOG10).clamp(0.0, 1.0)
}

/// Cold-to-hot ramp: blue, cyan, green, yellow, red.
fn ramp(c: f64) -> [f64; 3] {
    let s = 4.0 * c;
    [(s - 2.0).clamp(0.0, 1.0), s.min(4.0 - s).clamp(0.0, 1.0), (2.0 - s).clamp(0.0, 1.0)]
}

/// Log-scaled color coding: short TTC is red, long TTC blue, invalid gray.
pub fn ttc_colormap(map: &TtcMap) -> Image {
    let (h, w) = map.shape();
    let colors: Vec<[f64; 3]> = (0..h * w)
        .map(|i| {
            if map.valid[i] {
                ramp(ttc_heat(map.ttc.data()[i]))
            } else {
                [INVALID_GRAY; 3]
            }
        })
        .collect();
    Image::from_channels_unchecked([0, 1, 2].map(|c| Field2D::from_fn(h, w, |y, x| colors[y * w + x][c])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expansion(k: f64, n: usize) -> FlowField {
        let c = (n as f64 - 1.0) / 2.0;
        FlowField::from_fn(n, n, |y, x| (k * (x as f64 - c), k * (y as f64 - c)))
    }

    #[test]
    fn expansion_gives_reciprocal_rate() {
        for window in [3, 5, 7] {
            let map = ttc_from_flow(&expansion(0.1, 24), window).unwrap();
            for y in 0..24 {
                for x in 0..24 {
                    let t = map.get(y, x).unwrap();
                    assert!((t - 10.0).abs() < 1e-9, "{t}");
                }
            }
        }
    }

    #[test]
    fn translation_and_contraction_are_invalid() {
        let t = FlowField::from_fn(12, 12, |_, _| (2.0, -1.0));
        assert_eq!(ttc_from_flow(&t, 3).unwrap().valid_count(), 0);
        assert_eq!(ttc_from_flow(&expansion(-0.1, 12), 5).unwrap().valid_count(), 0);
    }

    #[test]
    fn rejects_bad_windows() {
        let f = FlowField::zeros(6, 6);
        assert!(ttc_from_flow(&f, 4).is_err());
        assert!(ttc_from_flow(&f, 1).is_err());
        assert!(ttc_from_flow(&f, 7).is_err());
    }

    #[test]
    fn error_identities() {
        let t = ttc_from_flow(&expansion(0.1, 16), 3).unwrap();
        let e = ttc_error(&t, &t).unwrap();
        assert_eq!(e.mean_relative_error, 0.0);
        assert_eq!(e.validity_churn, 0.0);
        let e = ttc_error(&t.scaled(2.0).unwrap(), &t).unwrap();
        assert_eq!(e.mean_relative_error, 1.0);
    }

    #[test]
    fn error_is_scale_invariant() {
        let a = ttc_from_flow(&expansion(0.1, 16), 3).unwrap();
        let b = ttc_from_flow(&expansion(0.07, 16), 3).unwrap();
        let e1 = ttc_error(&a, &b).unwrap().mean_relative_error;
        let e2 = ttc_error(&a.scaled(3.5).unwrap(), &b.scaled(3.5).unwrap())
            .unwrap()
            .mean_relative_error;
        assert!((e1 - e2).abs() < 1e-12);
    }

    #[test]
    fn no_joint_validity_is_an_error() {
        let a = ttc_from_flow(&expansion(0.1, 8), 3).unwrap();
        let b = ttc_from_flow(&FlowField::zeros(8, 8), 3).unwrap();
        let err = ttc_error(&a, &b).unwrap_err().to_string();
        assert!(err.contains("jointly valid"));
    }

    #[test]
    fn churn_counts_validity_flips() {
        let a = ttc_from_flow(&expansion(0.1, 8), 3).unwrap();
        let mut flags = a.valid().to_vec();
        let mut ttc = a.ttc().clone();
        flags[0] = false;
        ttc.set(0, 0, 0.0);
        let b = TtcMap::new(ttc, flags).unwrap();
        let e = ttc_error(&b, &a).unwrap();
        assert!((e.validity_churn - 1.0 / 64.0).abs() < 1e-15);
        assert_eq!(e.jointly_valid, 63);
    }

    #[test]
    fn colormap_conventions() {
        let t = ttc_from_flow(&expansion(0.1, 8), 3).unwrap();
        let img = ttc_colormap(&t);
        let first = [img.get(0, 0, 0), img.get(0, 0, 1), img.get(0, 0, 2)];
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!([img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2)], first);
            }
        }
        let none = ttc_from_flow(&FlowField::zeros(8, 8), 3).unwrap();
        let img = ttc_colormap(&none);
        assert_eq!([img.get(3, 3, 0), img.get(3, 3, 1), img.get(3, 3, 2)], [0.5; 3]);
        let mut last = f64::INFINITY;
        for t in [1.5, 3.0, 10.0, 50.0, 400.0] {
            let h = ttc_heat(t);
            assert!(h < last);
            last = h;
        }
        assert_eq!(ramp(1.0), [1.0, 0.0, 0.0]);
        assert_eq!(ramp(0.0), [0.0, 0.0, 1.0]);
    }
}
