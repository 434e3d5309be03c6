//! End-point error over pixel subsets, per-category reports and perturbation norms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Category, FlowField, Image, LabelMap, Mask};

fn check_flow_shapes(a: &FlowField, b: &FlowField, shape: (usize, usize), op: &'static str) -> Result<()> {
    if a.shape() != b.shape() || a.shape() != shape {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{shape:?}"),
            found: format!("{:?} and {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Mean Euclidean distance between two flows over the set pixels of `mask`.
pub fn epe_masked(a: &FlowField, b: &FlowField, mask: &Mask) -> Result<f64> {
    check_flow_shapes(a, b, mask.shape(), "epe_masked")?;
    if mask.count() == 0 {
        return Err(Error::invalid("epe_masked: empty mask"));
    }
    let total: f64 = mask
        .bits()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| {
            let du = a.u.data()[i] - b.u.data()[i];
            let dv = a.v.data()[i] - b.v.data()[i];
            du.hypot(dv)
        })
        .sum();
    Ok(total / mask.count() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub category: Category,
    pub pixel_count: usize,
    /// `None` when the category is absent from the scene.
    pub mean_epe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub target: Category,
    /// One entry per labeled (non-void) category.
    pub categories: Vec<CategoryStat>,
    pub on_target_epe: Option<f64>,
    /// Pixel-weighted mean EPE over every non-target, non-void pixel.
    pub off_target_epe: Option<f64>,
    /// Unweighted mean of the per-category EPEs of present non-target categories.
    pub off_target_category_mean: Option<f64>,
}

impl CategoryReport {
    pub fn stat(&self, c: Category) -> Option<&CategoryStat> {
        self.categories.iter().find(|s| s.category == c)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        let mut out = String::from("category,pixel_count,mean_epe\n");
        for s in &self.categories {
            writeln!(out, "{},{},{}", s.category, s.pixel_count, fmt(s.mean_epe)).unwrap();
        }
        let off_count: usize = self
            .categories
            .iter()
            .filter(|s| s.category != self.target)
            .map(|s| s.pixel_count)
            .sum();
        let on_count = self.stat(self.target).map_or(0, |s| s.pixel_count);
        writeln!(out, "on_target,{on_count},{}", fmt(self.on_target_epe)).unwrap();
        writeln!(out, "off_target,{off_count},{}", fmt(self.off_target_epe)).unwrap();
        writeln!(
            out,
            "off_target_category_mean,{off_count},{}",
            fmt(self.off_target_category_mean)
        )
        .unwrap();
        out
    }
}

/// Per-category EPE between an attacked and an original flow. Void pixels are
/// excluded everywhere.
pub fn per_category_report(
    attacked: &FlowField,
    original: &FlowField,
    labels: &LabelMap,
    target: Category,
) -> Result<CategoryReport> {
    check_flow_shapes(attacked, original, labels.shape(), "per_category_report")?;
    let categories: Vec<CategoryStat> = Category::LABELED
        .iter()
        .map(|&c| {
            let mask = labels.mask_of(c);
            let mean_epe = if mask.count() > 0 {
                Some(epe_masked(attacked, original, &mask)?)
            } else {
                None
            };
            Ok(CategoryStat {
                category: c,
                pixel_count: mask.count(),
                mean_epe,
            })
        })
        .collect::<Result<_>>()?;

    let on_target_epe = categories
        .iter()
        .find(|s| s.category == target)
        .and_then(|s| s.mean_epe);
    let off: Vec<&CategoryStat> = categories
        .iter()
        .filter(|s| s.category != target && s.pixel_count > 0)
        .collect();
    let off_pixels: usize = off.iter().map(|s| s.pixel_count).sum();
    let off_target_epe = (off_pixels > 0).then(|| {
        off.iter()
            .map(|s| s.mean_epe.unwrap() * s.pixel_count as f64)
            .sum::<f64>()
            / off_pixels as f64
    });
    let off_target_category_mean = (!off.is_empty())
        .then(|| off.iter().map(|s| s.mean_epe.unwrap()).sum::<f64>() / off.len() as f64);

    Ok(CategoryReport {
        target,
        categories,
        on_target_epe,
        off_target_epe,
        off_target_category_mean,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationNorms {
    /// Mean `|delta|` over the pixel-channels inside the mask.
    pub mean_abs_in_mask: f64,
    pub max_abs: f64,
    /// Largest `|delta|` outside the mask; zero for a confined perturbation.
    pub out_of_mask_max: f64,
}

pub fn perturbation_norms(perturbed: &Image, original: &Image, mask: &Mask) -> Result<PerturbationNorms> {
    if perturbed.shape() != original.shape() || perturbed.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "perturbation_norms",
            expected: format!("{:?}", mask.shape()),
            found: format!("{:?} and {:?}", perturbed.shape(), original.shape()),
        });
    }
    let (mut sum_in, mut max_abs, mut max_out) = (0.0, 0.0f64, 0.0f64);
    for c in 0..3 {
        let (p, o) = (perturbed.channel(c).data(), original.channel(c).data());
        for (i, &inside) in mask.bits().iter().enumerate() {
            let d = (p[i] - o[i]).abs();
            max_abs = max_abs.max(d);
            if inside {
                sum_in += d;
            } else {
                max_out = max_out.max(d);
            }
        }
    }
    let n = 3 * mask.count();
    Ok(PerturbationNorms {
        mean_abs_in_mask: if n > 0 { sum_in / n as f64 } else { 0.0 },
        max_abs,
        out_of_mask_max: max_out,
    })
}
