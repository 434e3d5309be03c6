//! Attack detection scores and detection-versus-impact curves.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig};
use crate::diffcore::{Field2D, Kernel};
use crate::error::{Error, Result};
use crate::flowmodel::{estimate_flow, FlowModelParams};
use crate::metrics::epe_masked;
use crate::scenegen::SceneInstance;
use crate::ttc::{ttc_error_masked, ttc_from_flow};
use crate::types::{FlowField, Image, LabelMap};

/// Attack magnitudes (mean absolute perturbation) swept by default.
pub const DEFAULT_MAGNITUDES: [f64; 8] = [0.2e-3, 0.4e-3, 1.2e-3, 2e-3, 3.2e-3, 4e-3, 6e-3, 8e-3];

/// Window of the affine fit used for TTC impact.
pub const TTC_WINDOW: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMethod {
    Warping,
    Gaussian,
    Median,
}

impl DefenseMethod {
    pub const ALL: [DefenseMethod; 3] = [DefenseMethod::Warping, DefenseMethod::Gaussian, DefenseMethod::Median];
}

impl std::fmt::Display for DefenseMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DefenseMethod::Warping => "warping",
            DefenseMethod::Gaussian => "gaussian",
            DefenseMethod::Median => "median",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub method: DefenseMethod,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingKernel {
    Gaussian3x3,
    Median3x3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downstream {
    /// Relative TTC error on the target pixels.
    TtcError,
    /// EPE between attacked and clean flow on the target pixels.
    TargetEpe,
}

fn check_same_shape(a: (usize, usize), b: (usize, usize), op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{a:?}"),
            found: format!("{b:?}"),
        });
    }
    Ok(())
}

/// Backward warp: `out(y, x) = I2(y + v, x + u)`, bilinear and border-clamped.
pub fn warp_image(i2: &Image, flow: &FlowField) -> Result<Image> {
    check_same_shape(i2.shape(), flow.shape(), "warp_image")?;
    Ok(i2.map_channels(|c| c.warp(&flow.u, &flow.v)))
}

/// Mean absolute difference between `I1` and the warped `I2` over all pixel-channels.
pub fn warping_error(i1: &Image, i2: &Image, flow: &FlowField) -> Result<DetectionScore> {
    warping_error_cropped(i1, i2, flow, 0)
}

/// [`warping_error`] ignoring a border of `margin` pixels.
pub fn warping_error_cropped(i1: &Image, i2: &Image, flow: &FlowField, margin: usize) -> Result<DetectionScore> {
    check_same_shape(i1.shape(), i2.shape(), "warping_error")?;
    let warped = warp_image(i2, flow)?;
    let (h, w) = i1.shape();
    if 2 * margin >= h || 2 * margin >= w {
        return Err(Error::invalid(format!("crop margin {margin} leaves no pixels of a {h}x{w} image")));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..3 {
        for y in margin..h - margin {
            for x in margin..w - margin {
                sum += (warped.get(y, x, c) - i1.get(y, x, c)).abs();
                n += 1;
            }
        }
    }
    Ok(DetectionScore {
        method: DefenseMethod::Warping,
        value: sum / n as f64,
    })
}

fn median3x3(f: &Field2D) -> Field2D {
    let (h, w) = f.shape();
    Field2D::from_fn(h, w, |y, x| {
        let mut win = [0.0; 9];
        let mut k = 0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                win[k] = f.get(yy, xx);
                k += 1;
            }
        }
        win.sort_by(f64::total_cmp);
        win[4]
    })
}

pub fn smooth_image(image: &Image, kernel: SmoothingKernel) -> Image {
    match kernel {
        SmoothingKernel::Gaussian3x3 => {
            let k = Kernel::gaussian3();
            image.map_channels(|c| c.convolve(&k))
        }
        SmoothingKernel::Median3x3 => image.map_channels(median3x3),
    }
}

/// Mean per-pixel L1 distance between the two flow fields.
pub fn mean_l1_flow_distance(a: &FlowField, b: &FlowField) -> Result<f64> {
    check_same_shape(a.shape(), b.shape(), "flow distance")?;
    let s: f64 = a
        .u
        .data()
        .iter()
        .zip(b.u.data())
        .chain(a.v.data().iter().zip(b.v.data()))
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(s / a.u.len() as f64)
}

/// Flow change caused by smoothing the (possibly attacked) first image.
pub fn smoothing_defense(
    i1_attacked: &Image,
    i2: &Image,
    params: &FlowModelParams,
    kernel: SmoothingKernel,
) -> Result<DetectionScore> {
    let v = estimate_flow(i1_attacked, i2, params)?;
    let vk = estimate_flow(&smooth_image(i1_attacked, kernel), i2, params)?;
    Ok(DetectionScore {
        method: match kernel {
            SmoothingKernel::Gaussian3x3 => DefenseMethod::Gaussian,
            SmoothingKernel::Median3x3 => DefenseMethod::Median,
        },
        value: mean_l1_flow_distance(&v, &vk)?,
    })
}

/// Detection score of `method` for an attacked first image. The warping score
/// uses the flow estimated from the attacked image.
pub fn detection_score(
    method: DefenseMethod,
    i1_attacked: &Image,
    i2: &Image,
    attacked_flow: &FlowField,
    params: &FlowModelParams,
) -> Result<DetectionScore> {
    match method {
        DefenseMethod::Warping => warping_error(i1_attacked, i2, attacked_flow),
        DefenseMethod::Gaussian => smoothing_defense(i1_attacked, i2, params, SmoothingKernel::Gaussian3x3),
        DefenseMethod::Median => smoothing_defense(i1_attacked, i2, params, SmoothingKernel::Median3x3),
    }
}

/// Downstream damage of an attacked flow on the target pixels.
pub fn downstream_impact(
    kind: Downstream,
    attacked: &FlowField,
    original: &FlowField,
    target: &crate::types::Mask,
) -> Result<f64> {
    match kind {
        Downstream::TargetEpe => epe_masked(attacked, original, target),
        Downstream::TtcError => {
            let ta = ttc_from_flow(attacked, TTC_WINDOW)?;
            let to = ttc_from_flow(original, TTC_WINDOW)?;
            Ok(ttc_error_masked(&ta, &to, Some(target))?.mean_relative_error)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: DefenseMethod,
    pub alpha: f64,
    pub magnitude: f64,
    pub detection_score: f64,
    pub impact: f64,
}

/// Scores for a single attacked scene at one magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneDetection {
    /// One score per requested method, in request order.
    pub scores: Vec<f64>,
    /// One impact per requested downstream measure, in request order.
    pub impacts: Vec<f64>,
}

/// Scores an already perturbed first image. `original_flow` is the clean
/// estimate; passing the clean image yields zero impact.
pub fn assess_perturbed(
    i1_attacked: &Image,
    i2: &Image,
    original_flow: &FlowField,
    target: &crate::types::Mask,
    methods: &[DefenseMethod],
    downstreams: &[Downstream],
    params: &FlowModelParams,
) -> Result<SceneDetection> {
    let attacked = estimate_flow(i1_attacked, i2, params)?;
    let scores = methods
        .iter()
        .map(|&m| Ok(detection_score(m, i1_attacked, i2, &attacked, params)?.value))
        .collect::<Result<Vec<_>>>()?;
    let impacts = downstreams
        .iter()
        .map(|&d| {
            if attacked == *original_flow {
                Ok(0.0)
            } else {
                downstream_impact(d, &attacked, original_flow, target)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneDetection { scores, impacts })
}

/// Runs the attack at `magnitude` (0 means the clean input) and scores it with
/// every requested method and downstream measure.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_scene(
    i1: &Image,
    i2: &Image,
    labels: &LabelMap,
    template: &AttackConfig,
    magnitude: f64,
    methods: &[DefenseMethod],
    downstreams: &[Downstream],
    params: &FlowModelParams,
) -> Result<SceneDetection> {
    let original = estimate_flow(i1, i2, params)?;
    let target = crate::attack::build_masks(labels, template)?.target;
    let image = if magnitude == 0.0 {
        i1.clone()
    } else {
        let cfg = AttackConfig {
            budget: magnitude,
            ..template.clone()
        };
        run_attack(i1, i2, labels, &cfg, params)?.perturbed_image
    };
    assess_perturbed(&image, i2, &original, &target, methods, downstreams, params)
}

/// Suite-mean (detection score, impact) per magnitude, in input order, for one
/// attack template. The attack is run once per scene and magnitude and shared
/// by all methods.
pub fn detection_impact_curves(
    scenes: &[SceneInstance],
    template: &AttackConfig,
    magnitudes: &[f64],
    methods: &[DefenseMethod],
    downstream: Downstream,
    params: &FlowModelParams,
) -> Result<Vec<CurvePoint>> {
    if scenes.is_empty() {
        return Err(Error::invalid("detection curve needs at least one scene"));
    }
    if magnitudes.iter().any(|&m| !(m >= 0.0 && m.is_finite())) || magnitudes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("magnitudes must be non-negative and strictly ascending"));
    }
    let jobs: Vec<(usize, usize)> = (0..magnitudes.len())
        .flat_map(|m| (0..scenes.len()).map(move |s| (m, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(m, s)| {
            let sc = &scenes[s];
            evaluate_scene(&sc.i1, &sc.i2, &sc.labels, template, magnitudes[m], methods, &[downstream], params)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    for (mi, &magnitude) in magnitudes.iter().enumerate() {
        let chunk = &results[mi * scenes.len()..(mi + 1) * scenes.len()];
        let impact = chunk.iter().map(|r| r.impacts[0]).sum::<f64>() / scenes.len() as f64;
        for (k, &method) in methods.iter().enumerate() {
            let score = chunk.iter().map(|r| r.scores[k]).sum::<f64>() / scenes.len() as f64;
            points.push(CurvePoint {
                method,
                alpha: template.alpha,
                magnitude,
                detection_score: score,
                impact,
            });
        }
    }
    Ok(points)
}

/// Single-method convenience wrapper around [`detection_impact_curves`].
pub fn detection_impact_curve(
    scenes: &[SceneInstance],
    template: &AttackConfig,
    magnitudes: &[f64],
    method: DefenseMethod,
    downstream: Downstream,
    params: &FlowModelParams,
) -> Result<Vec<CurvePoint>> {
    detection_impact_curves(scenes, template, magnitudes, &[method], downstream, params)
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("method,alpha,magnitude,detection_score,impact\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e}\n",
            p.method, p.alpha, p.magnitude, p.detection_score, p.impact
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::periodic_texture;

    fn textured(n: usize, seed: u64) -> Image {
        let t = periodic_texture(n, n, seed);
        Image::new([t.clone(), t.map(|x| 1.0 - x), t.map(|x| 0.5 * x + 0.25)]).unwrap()
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let img = textured(16, 1);
        assert_eq!(warp_image(&img, &FlowField::zeros(16, 16)).unwrap(), img);
        assert_eq!(warping_error(&img, &img, &FlowField::zeros(16, 16)).unwrap().value, 0.0);
    }

    #[test]
    fn integer_warp_shifts_columns() {
        let img = textured(16, 2);
        let out = warp_image(&img, &FlowField::from_fn(16, 16, |_, _| (1.0, 0.0))).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..15 {
                    assert_eq!(out.get(y, x, c), img.get(y, x + 1, c));
                }
            }
        }
    }

    #[test]
    fn half_pixel_warp_on_ramp_is_exact() {
        let ramp = Image::gray(Field2D::from_fn(8, 8, |_, x| x as f64 / 10.0)).unwrap();
        let out = warp_image(&ramp, &FlowField::from_fn(8, 8, |_, _| (0.5, 0.0))).unwrap();
        for x in 0..7 {
            assert!((out.get(3, x, 0) - (x as f64 + 0.5) / 10.0).abs() < 1e-15);
        }
    }

    #[test]
    fn median_ignores_piecewise_constant_images() {
        let img = Image::gray(Field2D::from_fn(16, 16, |y, _| if y < 8 { 0.2 } else { 0.7 })).unwrap();
        assert_eq!(smooth_image(&img, SmoothingKernel::Median3x3), img);
        let s = smoothing_defense(&img, &img, &FlowModelParams::default(), SmoothingKernel::Median3x3).unwrap();
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn median_removes_isolated_spike() {
        let mut f = Field2D::filled(5, 5, 0.3);
        f.set(2, 2, 0.9);
        assert_eq!(median3x3(&f), Field2D::filled(5, 5, 0.3));
    }

    #[test]
    fn curve_rejects_unsorted_magnitudes() {
        let scenes: Vec<SceneInstance> = vec![];
        assert!(detection_impact_curve(
            &scenes,
            &AttackConfig::default(),
            &[1e-3],
            DefenseMethod::Warping,
            Downstream::TargetEpe,
            &FlowModelParams::default()
        )
        .is_err());
    }
}
