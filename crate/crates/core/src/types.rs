//! Images, flow fields, masks and semantic label maps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::Field2D;
use crate::error::{Error, Result};

/// Three-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: [Field2D; 3],
}

impl Image {
    pub fn new(channels: [Field2D; 3]) -> Result<Self> {
        let shape = channels[0].shape();
        if channels.iter().any(|c| c.shape() != shape) {
            return Err(Error::invalid("image channels differ in shape"));
        }
        for c in &channels {
            if let Some(v) = c.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!(
                    "image intensity {v} outside [0, 1]"
                )));
            }
        }
        Ok(Self { channels })
    }

    /// Image with the same intensity field in all three channels.
    pub fn gray(field: Field2D) -> Result<Self> {
        Self::new([field.clone(), field.clone(), field])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        Self::new([0, 1, 2].map(|c| Field2D::from_fn(height, width, |y, x| f(y, x, c))))
    }

    /// Builds an image without the `[0, 1]` range check; used for intermediate
    /// renders that are clamped later.
    pub(crate) fn from_channels_unchecked(channels: [Field2D; 3]) -> Self {
        Self { channels }
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].shape()
    }

    pub fn channel(&self, c: usize) -> &Field2D {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[Field2D; 3] {
        &self.channels
    }

    pub fn into_channels(self) -> [Field2D; 3] {
        self.channels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.channels[c].get(y, x)
    }

    /// Mean of the three channels.
    pub fn grayscale(&self) -> Field2D {
        let [r, g, b] = &self.channels;
        Field2D::from_fn(self.height(), self.width(), |y, x| {
            (r.get(y, x) + g.get(y, x) + b.get(y, x)) / 3.0
        })
    }

    pub fn map_channels(&self, f: impl Fn(&Field2D) -> Field2D) -> Self {
        Self {
            channels: [f(&self.channels[0]), f(&self.channels[1]), f(&self.channels[2])],
        }
    }
}

/// Per-pixel displacement `(u, v)` in pixels per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Field2D,
    pub v: Field2D,
}

impl FlowField {
    pub fn new(u: Field2D, v: Field2D) -> Result<Self> {
        if u.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "FlowField::new",
                expected: format!("{:?}", u.shape()),
                found: format!("{:?}", v.shape()),
            });
        }
        Ok(Self { u, v })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            u: Field2D::zeros(height, width),
            v: Field2D::zeros(height, width),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut v = Vec::with_capacity(height * width);
        let u = Field2D::from_fn(height, width, |y, x| {
            let (a, b) = f(y, x);
            v.push(b);
            a
        });
        Self {
            u,
            v: Field2D::new(height, width, v).expect("from_fn: same shape as u"),
        }
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.u.shape()
    }

    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        (self.u.get(y, x), self.v.get(y, x))
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u
            .data()
            .iter()
            .zip(self.v.data())
            .fold(0.0, |m, (u, v)| m.max(u.hypot(*v)))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            u: self.u.map(|x| c * x),
            v: self.v.map(|x| c * x),
        }
    }
}

/// Boolean pixel mask with a cached count of set pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    count: usize,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "Mask::new",
                expected: format!("{} pixels", height * width),
                found: format!("{} pixels", bits.len()),
            });
        }
        let count = bits.iter().filter(|&&b| b).count();
        Ok(Self {
            height,
            width,
            bits,
            count,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, bits).unwrap()
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| true)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn complement(&self) -> Self {
        Self::new(self.height, self.width, self.bits.iter().map(|b| !b).collect()).unwrap()
    }

    pub fn intersect(&self, other: &Mask) -> Self {
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Self::new(self.height, self.width, bits).unwrap()
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !(*a && *b))
    }
}

/// Semantic categories used by label maps.
///
/// The numeric id is what label PNGs store:
///
/// | id | category     |
/// |----|--------------|
/// | 0  | void         |
/// | 1  | construction |
/// | 2  | flat         |
/// | 3  | human        |
/// | 4  | nature       |
/// | 5  | object       |
/// | 6  | vehicle      |
/// | 7  | sky          |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Void,
    Construction,
    Flat,
    Human,
    Nature,
    Object,
    Vehicle,
    Sky,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Void,
        Category::Construction,
        Category::Flat,
        Category::Human,
        Category::Nature,
        Category::Object,
        Category::Vehicle,
        Category::Sky,
    ];

    /// Every category except `void`.
    pub const LABELED: [Category; 7] = [
        Category::Construction,
        Category::Flat,
        Category::Human,
        Category::Nature,
        Category::Object,
        Category::Vehicle,
        Category::Sky,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Void => "void",
            Category::Construction => "construction",
            Category::Flat => "flat",
            Category::Human => "human",
            Category::Nature => "nature",
            Category::Object => "object",
            Category::Vehicle => "vehicle",
            Category::Sky => "sky",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown category `{s}`")))
    }
}

/// Per-pixel semantic category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<Category>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<Category>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "LabelMap::new",
                expected: format!("{} labels", height * width),
                found: format!("{} labels", labels.len()),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, c: Category) -> Self {
        Self::new(height, width, vec![c; height * width]).unwrap()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> Category {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: Category) {
        self.labels[y * self.width + x] = c;
    }

    pub fn labels(&self) -> &[Category] {
        &self.labels
    }

    pub fn mask_of(&self, c: Category) -> Mask {
        let bits = self.labels.iter().map(|&l| l == c).collect();
        Mask::new(self.height, self.width, bits).unwrap()
    }

    pub fn count(&self, c: Category) -> usize {
        self.labels.iter().filter(|&&l| l == c).count()
    }
}
