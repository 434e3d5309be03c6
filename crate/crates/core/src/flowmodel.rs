//! Differentiable coarse-to-fine Horn-Schunck optical flow.
//!
//! Every step is built from [`Tape`] primitives, so the estimated flow can be
//! differentiated with respect to the first image. The second image enters as
//! a constant.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Field2D, Kernel, Node, OpKind, Tape};
use crate::error::{Error, Result};
use crate::types::{FlowField, Image};

/// Smallest accepted input side length.
pub const MIN_IMAGE_SIDE: usize = 8;
/// Smallest side length allowed at the coarsest pyramid level.
pub const MIN_LEVEL_SIDE: usize = 4;
/// Factor applied to [0, 1] intensities before they enter the energy, so the
/// smoothness weight is expressed against a `[0, 100]` range. With raw unit
/// intensities, `Ix^2 + Iy^2` is tiny next to the default weight and the flow
/// is over-smoothed.
pub const INTENSITY_SCALE: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowModelParams {
    /// Weight of the flow-gradient penalty.
    pub smoothness_weight: f64,
    pub pyramid_levels: usize,
    pub jacobi_iters_per_level: usize,
    pub warps_per_level: usize,
    /// Downscaling factor between consecutive levels.
    pub pyramid_scale: f64,
}

impl Default for FlowModelParams {
    fn default() -> Self {
        Self {
            smoothness_weight: 0.1,
            pyramid_levels: 3,
            jacobi_iters_per_level: 20,
            warps_per_level: 1,
            pyramid_scale: 0.5,
        }
    }
}

impl FlowModelParams {
    /// Checks the parameters against an image size and returns the pyramid
    /// level shapes, finest first.
    pub fn level_shapes(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        if !(self.smoothness_weight > 0.0 && self.smoothness_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "smoothness_weight must be positive, got {}",
                self.smoothness_weight
            )));
        }
        if self.pyramid_levels == 0 || self.jacobi_iters_per_level == 0 || self.warps_per_level == 0 {
            return Err(Error::invalid(
                "pyramid_levels, jacobi_iters_per_level and warps_per_level must be at least 1",
            ));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::invalid(format!(
                "pyramid_scale must lie in (0, 1), got {}",
                self.pyramid_scale
            )));
        }
        let mut shapes = vec![(height, width)];
        for _ in 1..self.pyramid_levels {
            let (h, w) = *shapes.last().unwrap();
            shapes.push((self.shrink(h), self.shrink(w)));
        }
        let &(h, w) = shapes.last().unwrap();
        if h < MIN_LEVEL_SIDE || w < MIN_LEVEL_SIDE {
            return Err(Error::invalid(format!(
                "coarsest pyramid level is {h}x{w} for a {height}x{width} image; need at least {MIN_LEVEL_SIDE}x{MIN_LEVEL_SIDE}"
            )));
        }
        Ok(shapes)
    }

    fn halving(&self) -> bool {
        self.pyramid_scale == 0.5
    }

    fn shrink(&self, n: usize) -> usize {
        if self.halving() {
            (n + 1) / 2
        } else {
            ((n as f64 * self.pyramid_scale).round() as usize).max(1)
        }
    }
}

/// Flow components recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FlowNodes {
    pub u: Node,
    pub v: Node,
}

impl FlowNodes {
    pub fn to_field(&self, tape: &Tape) -> FlowField {
        FlowField {
            u: tape.value(self.u).clone(),
            v: tape.value(self.v).clone(),
        }
    }
}

/// Registers the channels of `image` as differentiable leaves.
pub fn register_image(tape: &mut Tape, image: &Image) -> [Node; 3] {
    [0, 1, 2].map(|c| tape.leaf(image.channel(c).clone()))
}

fn check_inputs(i1: &Image, i2: &Image) -> Result<()> {
    if i1.shape() != i2.shape() {
        return Err(Error::ShapeMismatch {
            op: "estimate_flow",
            expected: format!("{:?}", i1.shape()),
            found: format!("{:?}", i2.shape()),
        });
    }
    let (h, w) = i1.shape();
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(Error::invalid(format!(
            "images must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {h}x{w}"
        )));
    }
    for img in [i1, i2] {
        if img.channels().iter().any(|c| !c.all_finite()) {
            return Err(Error::NonFinite("input image contains NaN or infinity".into()));
        }
    }
    Ok(())
}

/// Estimates the flow from `i1` to `i2` without keeping the tape.
pub fn estimate_flow(i1: &Image, i2: &Image, params: &FlowModelParams) -> Result<FlowField> {
    let mut tape = Tape::new();
    let leaves = [0, 1, 2].map(|c| tape.constant(i1.channel(c).clone()));
    let flow = estimate_flow_on_tape(&mut tape, &leaves, i1.shape(), i2, params)?;
    Ok(flow.to_field(&tape))
}

/// Records the full estimator on `tape`, reading the first image from
/// `i1_channels` (usually the leaves from [`register_image`]).
pub fn estimate_flow_on_tape(
    tape: &mut Tape,
    i1_channels: &[Node; 3],
    shape: (usize, usize),
    i2: &Image,
    params: &FlowModelParams,
) -> Result<FlowNodes> {
    let i1_values = Image::from_channels_unchecked(i1_channels.map(|n| tape.value(n).clone()));
    if i1_values.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "estimate_flow",
            expected: format!("{shape:?}"),
            found: format!("{:?}", i1_values.shape()),
        });
    }
    check_inputs(&i1_values, i2)?;
    let shapes = params.level_shapes(shape.0, shape.1)?;

    let ops = Ops::new(params);

    let sum = tape.add(i1_channels[0], i1_channels[1])?;
    let sum = tape.add(sum, i1_channels[2])?;
    let gray1 = tape.scale(sum, INTENSITY_SCALE / 3.0)?;
    let gray2 = tape.constant(i2.grayscale().map(|x| x * INTENSITY_SCALE));

    let pyr1 = ops.pyramid(tape, gray1, &shapes)?;
    let pyr2 = ops.pyramid(tape, gray2, &shapes)?;

    let coarsest = shapes.len() - 1;
    let (hc, wc) = shapes[coarsest];
    let mut u = tape.constant(Field2D::zeros(hc, wc));
    let mut v = tape.constant(Field2D::zeros(hc, wc));

    for level in (0..shapes.len()).rev() {
        if level != coarsest {
            (u, v) = ops.upsample_flow(tape, u, v, shapes[level + 1], shapes[level])?;
        }
        for _ in 0..params.warps_per_level {
            (u, v) = ops.refine(tape, pyr1[level], pyr2[level], u, v, shapes[level])?;
        }
    }
    Ok(FlowNodes { u, v })
}

struct Ops<'a> {
    params: &'a FlowModelParams,
    blur: Arc<Kernel>,
    dx: Arc<Kernel>,
    dy: Arc<Kernel>,
    average: Arc<Kernel>,
}

impl<'a> Ops<'a> {
    fn new(params: &'a FlowModelParams) -> Self {
        Self {
            params,
            blur: Arc::new(Kernel::gaussian5()),
            dx: Arc::new(Kernel::central_dx()),
            dy: Arc::new(Kernel::central_dy()),
            average: Arc::new(Kernel::horn_schunck_average()),
        }
    }

    fn pyramid(&self, tape: &mut Tape, base: Node, shapes: &[(usize, usize)]) -> Result<Vec<Node>> {
        let mut levels = vec![base];
        for &(h, w) in &shapes[1..] {
            let blurred = tape.conv(*levels.last().unwrap(), self.blur.clone())?;
            let next = if self.params.halving() {
                tape.record(OpKind::Downsample2, &[blurred])?
            } else {
                tape.record(OpKind::Resize { height: h, width: w }, &[blurred])?
            };
            levels.push(next);
        }
        Ok(levels)
    }

    fn upsample_flow(
        &self,
        tape: &mut Tape,
        u: Node,
        v: Node,
        (hc, wc): (usize, usize),
        (hf, wf): (usize, usize),
    ) -> Result<(Node, Node)> {
        let (kind, fy, fx) = if self.params.halving() {
            (OpKind::Upsample2 { height: hf, width: wf }, 2.0, 2.0)
        } else {
            let ratio = |f: usize, c: usize| if c > 1 { (f - 1) as f64 / (c - 1) as f64 } else { 1.0 };
            (OpKind::Resize { height: hf, width: wf }, ratio(hf, hc), ratio(wf, wc))
        };
        let uu = tape.record(kind.clone(), &[u])?;
        let vu = tape.record(kind, &[v])?;
        Ok((tape.scale(uu, fx)?, tape.scale(vu, fy)?))
    }

    /// One warp of one level: linearize the brightness constancy around the
    /// current flow and run the unrolled Jacobi iterations.
    fn refine(
        &self,
        tape: &mut Tape,
        i1: Node,
        i2: Node,
        u0: Node,
        v0: Node,
        (h, w): (usize, usize),
    ) -> Result<(Node, Node)> {
        let i2w = tape.warp(i2, u0, v0)?;

        let i1x = tape.conv(i1, self.dx.clone())?;
        let i2x = tape.conv(i2w, self.dx.clone())?;
        let ix = tape.add(i1x, i2x)?;
        let ix = tape.scale(ix, 0.5)?;
        let i1y = tape.conv(i1, self.dy.clone())?;
        let i2y = tape.conv(i2w, self.dy.clone())?;
        let iy = tape.add(i1y, i2y)?;
        let iy = tape.scale(iy, 0.5)?;
        let it = tape.sub(i2w, i1)?;

        // data residual for a total flow (u, v): ix*u + iy*v + b
        let ixu = tape.mul(ix, u0)?;
        let iyv = tape.mul(iy, v0)?;
        let b = tape.sub(it, ixu)?;
        let b = tape.sub(b, iyv)?;

        let ix2 = tape.square(ix)?;
        let iy2 = tape.square(iy)?;
        let g2 = tape.add(ix2, iy2)?;
        let lam = tape.constant(Field2D::filled(h, w, self.params.smoothness_weight));
        let denom = tape.add(g2, lam)?;
        let inv = tape.reciprocal(denom)?;

        let (mut u, mut v) = (u0, v0);
        for _ in 0..self.params.jacobi_iters_per_level {
            let ub = tape.conv(u, self.average.clone())?;
            let vb = tape.conv(v, self.average.clone())?;
            let r = tape.mul(ix, ub)?;
            let r2 = tape.mul(iy, vb)?;
            let r = tape.add(r, r2)?;
            let r = tape.add(r, b)?;
            let r = tape.mul(r, inv)?;
            let du = tape.mul(ix, r)?;
            let dv = tape.mul(iy, r)?;
            u = tape.sub(ub, du)?;
            v = tape.sub(vb, dv)?;
        }
        Ok((u, v))
    }
}

/// Deterministic family of estimator variants; the first entry is `seed`.
///
/// Variants scale the smoothness weight by 0.5 or 2, move the pyramid depth by
/// one level, and halve or double the Jacobi iterations.
pub fn model_family(seed: &FlowModelParams, count: usize) -> Result<Vec<FlowModelParams>> {
    if count == 0 {
        return Err(Error::invalid("model family needs at least one member"));
    }
    const LAMBDA: [f64; 3] = [1.0, 0.5, 2.0];
    const LEVELS: [isize; 3] = [0, -1, 1];
    const ITERS: [f64; 3] = [1.0, 2.0, 0.5];

    // Order: seed, single-field changes interleaved across fields, then
    // pairs, then triples.
    let mut combos: Vec<(usize, usize, usize)> = vec![
        (0, 0, 0),
        (1, 0, 0),
        (0, 1, 0),
        (0, 0, 1),
        (2, 0, 0),
        (0, 2, 0),
        (0, 0, 2),
    ];
    for changed in 2..=3 {
        for l in 0..3 {
            for p in 0..3 {
                for i in 0..3 {
                    if [l, p, i].iter().filter(|&&k| k != 0).count() == changed {
                        combos.push((l, p, i));
                    }
                }
            }
        }
    }

    let mut family: Vec<FlowModelParams> = Vec::with_capacity(count);
    for (l, p, i) in combos {
        if family.len() == count {
            break;
        }
        let levels = seed.pyramid_levels as isize + LEVELS[p];
        let iters = (seed.jacobi_iters_per_level as f64 * ITERS[i]).round() as usize;
        if levels < 1 || iters < 1 {
            continue;
        }
        let candidate = FlowModelParams {
            smoothness_weight: seed.smoothness_weight * LAMBDA[l],
            pyramid_levels: levels as usize,
            jacobi_iters_per_level: iters,
            ..seed.clone()
        };
        if !family.contains(&candidate) {
            family.push(candidate);
        }
    }
    if family.len() < count {
        return Err(Error::invalid(format!(
            "model family supports at most {} distinct members from this seed, requested {count}",
            family.len()
        )));
    }
    Ok(family)
}
