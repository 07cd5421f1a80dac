//! Bounding-box prompts: derivation from masks, manual-prompt simulation,
//! augmentation by random shifting, and the bounded localization offset.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;
use crate::volume::{BinaryMask, Dims};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error("augmentation count must be at least 1")]
    ZeroAugmentations,
    #[error("perturb ratio {0} outside [0, 0.5]")]
    RatioRange(f64),
    #[error("box {0:?} is not ordered or lies outside dims {1:?}")]
    InvalidBox([usize; 6], [usize; 3]),
    #[error("latent vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("offset bound r must be positive")]
    NonPositiveBound,
    #[error("latent vector has a non-finite entry at {0}")]
    NonFinite(usize),
}

/// Axis-aligned box with inclusive voxel coordinates `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[usize; 6]", into = "[usize; 6]")]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl TryFrom<[usize; 6]> for BoundingBox {
    type Error = PromptError;
    fn try_from(a: [usize; 6]) -> Result<Self, PromptError> {
        let b = BoundingBox {
            min: [a[0], a[1], a[2]],
            max: [a[3], a[4], a[5]],
        };
        if (0..3).any(|i| b.min[i] > b.max[i]) {
            return Err(PromptError::InvalidBox(a, [0; 3]));
        }
        Ok(b)
    }
}

impl From<BoundingBox> for [usize; 6] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

impl BoundingBox {
    pub fn new(min: [usize; 3], max: [usize; 3]) -> Result<Self, PromptError> {
        BoundingBox::try_from([min[0], min[1], min[2], max[0], max[1], max[2]])
    }

    /// Box covering every voxel of `dims`.
    pub fn full(dims: Dims) -> Self {
        Self {
            min: [0, 0, 0],
            max: [dims.depth - 1, dims.height - 1, dims.width - 1],
        }
    }

    pub fn to_array(&self) -> [usize; 6] {
        [
            self.min[0], self.min[1], self.min[2], self.max[0], self.max[1], self.max[2],
        ]
    }

    pub fn extent(&self, axis: usize) -> usize {
        self.max[axis] - self.min[axis] + 1
    }

    /// In-plane (y, x) area of one slice of the box.
    pub fn plane_area(&self) -> usize {
        self.extent(1) * self.extent(2)
    }

    pub fn fits(&self, dims: Dims) -> bool {
        let d = dims.as_array();
        (0..3).all(|i| self.min[i] <= self.max[i] && self.max[i] < d[i])
    }

    pub fn validate(&self, dims: Dims) -> Result<(), PromptError> {
        if self.fits(dims) {
            Ok(())
        } else {
            Err(PromptError::InvalidBox(self.to_array(), dims.as_array()))
        }
    }

    #[inline]
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        (self.min[0]..=self.max[0]).contains(&z)
            && (self.min[1]..=self.max[1]).contains(&y)
            && (self.min[2]..=self.max[2]).contains(&x)
    }

    /// The same in-plane box restricted to slice `z`.
    pub fn at_slice(&self, z: usize) -> Self {
        Self {
            min: [z, self.min[1], self.min[2]],
            max: [z, self.max[1], self.max[2]],
        }
    }

    /// The in-plane rectangle used as a 2D prompt.
    pub fn plane_box(&self) -> Box2 {
        Box2 {
            y0: self.min[1],
            x0: self.min[2],
            y1: self.max[1],
            x1: self.max[2],
        }
    }

    /// Linear indices of all voxels inside the box, in index order.
    pub fn indices(&self, dims: Dims) -> impl Iterator<Item = usize> + '_ {
        let b = *self;
        (b.min[0]..=b.max[0]).flat_map(move |z| {
            (b.min[1]..=b.max[1]).flat_map(move |y| {
                let row = dims.index(z, y, 0);
                (b.min[2]..=b.max[2]).map(move |x| row + x)
            })
        })
    }
}

/// 2D slice prompt `[y0, x0, y1, x1]`, inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Box2 {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl From<[usize; 4]> for Box2 {
    fn from(a: [usize; 4]) -> Self {
        Box2 {
            y0: a[0],
            x0: a[1],
            y1: a[2],
            x1: a[3],
        }
    }
}

impl From<Box2> for [usize; 4] {
    fn from(b: Box2) -> Self {
        [b.y0, b.x0, b.y1, b.x1]
    }
}

impl Box2 {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0 + 1) * (self.x1 - self.x0 + 1)
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.y0 <= self.y1 && self.x0 <= self.x1 && self.y1 < height && self.x1 < width
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..=self.y1).contains(&y) && (self.x0..=self.x1).contains(&x)
    }

    /// Lifts the rectangle onto slice `z`.
    pub fn at_slice(&self, z: usize) -> BoundingBox {
        BoundingBox {
            min: [z, self.y0, self.x0],
            max: [z, self.y1, self.x1],
        }
    }
}

/// Tight box over the foreground of `mask`, grown by `extension` voxels on
/// both sides of each axis and clamped to the grid.
pub fn bbox_from_mask(mask: &BinaryMask, extension: [usize; 3]) -> Result<BoundingBox, PromptError> {
    let dims = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        any = true;
        let (z, y, x) = dims.coords(i);
        for (axis, c) in [z, y, x].into_iter().enumerate() {
            lo[axis] = lo[axis].min(c);
            hi[axis] = hi[axis].max(c);
        }
    }
    if !any {
        return Err(PromptError::EmptyMask);
    }
    let limits = dims.as_array();
    let mut min = [0; 3];
    let mut max = [0; 3];
    for axis in 0..3 {
        min[axis] = lo[axis].saturating_sub(extension[axis]);
        max[axis] = (hi[axis] + extension[axis]).min(limits[axis] - 1);
    }
    Ok(BoundingBox { min, max })
}

/// How augmentation displaces a box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    /// Each in-plane corner coordinate moves independently.
    #[default]
    Corner,
    /// The whole box moves by one (dy, dx).
    Translate,
}

/// Length the perturb ratio is relative to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftBasis {
    #[default]
    Image,
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAugConfig {
    pub n: usize,
    pub ratio: f64,
    pub seed: u64,
    pub mode: ShiftMode,
    pub basis: ShiftBasis,
}

impl Default for PromptAugConfig {
    fn default() -> Self {
        Self {
            n: 3,
            ratio: 0.01,
            seed: 0,
            mode: ShiftMode::Corner,
            basis: ShiftBasis::Image,
        }
    }
}

impl PromptAugConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        if self.n == 0 {
            return Err(PromptError::ZeroAugmentations);
        }
        if !(0.0..=0.5).contains(&self.ratio) {
            return Err(PromptError::RatioRange(self.ratio));
        }
        Ok(())
    }

    /// Largest displacement allowed along in-plane axis `axis` (1 = y, 2 = x).
    pub fn shift_bound(&self, bbox: &BoundingBox, dims: Dims, axis: usize) -> i64 {
        let len = match self.basis {
            ShiftBasis::Image => dims.as_array()[axis],
            ShiftBasis::Box => bbox.extent(axis),
        };
        (self.ratio * len as f64).floor() as i64
    }
}

fn place(a: i64, b: i64, limit: usize) -> (usize, usize) {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let top = limit as i64 - 1;
    (lo.clamp(0, top) as usize, hi.clamp(0, top) as usize)
}

/// Applies in-plane displacements `[dy0, dx0, dy1, dx1]`, re-orders inverted
/// corners and clamps to the grid. The z range is left untouched.
fn displace(bbox: &BoundingBox, shifts: [i64; 4], dims: Dims) -> BoundingBox {
    let (y0, y1) = place(
        bbox.min[1] as i64 + shifts[0],
        bbox.max[1] as i64 + shifts[2],
        dims.height,
    );
    let (x0, x1) = place(
        bbox.min[2] as i64 + shifts[1],
        bbox.max[2] as i64 + shifts[3],
        dims.width,
    );
    BoundingBox {
        min: [bbox.min[0], y0, x0],
        max: [bbox.max[0], y1, x1],
    }
}

fn draw(rng: &mut impl Rng, bound: i64) -> i64 {
    if bound == 0 {
        0
    } else {
        rng.gen_range(-bound..=bound)
    }
}

/// Simulates an imprecise manually drawn box: every in-plane corner
/// coordinate moves by a uniform integer in `[-max_shift, max_shift]`.
pub fn simulate_manual_prompt(bbox: &BoundingBox, max_shift: usize, seed: u64, dims: Dims) -> BoundingBox {
    let mut rng = stream(seed, 0);
    let b = max_shift as i64;
    let shifts = [
        draw(&mut rng, b),
        draw(&mut rng, b),
        draw(&mut rng, b),
        draw(&mut rng, b),
    ];
    displace(bbox, shifts, dims)
}

/// Generates `cfg.n` randomly shifted copies of `bbox`. Box `i` depends only
/// on `(cfg.seed, bbox, i)`.
pub fn augment_prompts(bbox: &BoundingBox, cfg: &PromptAugConfig, dims: Dims) -> Result<Vec<BoundingBox>, PromptError> {
    cfg.validate()?;
    bbox.validate(dims)?;
    let by = cfg.shift_bound(bbox, dims, 1);
    let bx = cfg.shift_bound(bbox, dims, 2);
    let out = (0..cfg.n)
        .map(|i| {
            let mut rng = stream(cfg.seed, i as u64);
            let shifts = match cfg.mode {
                ShiftMode::Corner => [
                    draw(&mut rng, by),
                    draw(&mut rng, bx),
                    draw(&mut rng, by),
                    draw(&mut rng, bx),
                ],
                ShiftMode::Translate => {
                    let dy = draw(&mut rng, by);
                    let dx = draw(&mut rng, bx);
                    [dy, dx, dy, dx]
                }
            };
            displace(bbox, shifts, dims)
        })
        .collect();
    Ok(out)
}

/// Finite real vector in a localization network's latent coordinate space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector<T: Scalar>(Vec<T>);

impl<T: Scalar> LatentVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, PromptError> {
        match values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(PromptError::NonFinite(i)),
            None => Ok(Self(values)),
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

/// Bounded offset `r * tanh(support - query)`, elementwise. Results saturate
/// at the largest representable magnitude below `r`, so every component stays
/// strictly inside `(-r, r)`.
pub fn relative_offset<T: Scalar>(
    support: &LatentVector<T>,
    query: &LatentVector<T>,
    r: T,
) -> Result<Vec<T>, PromptError> {
    if support.0.len() != query.0.len() {
        return Err(PromptError::LengthMismatch(support.0.len(), query.0.len()));
    }
    if !(r > T::zero()) || !r.is_finite() {
        return Err(PromptError::NonPositiveBound);
    }
    let cap = r * (T::one() - T::epsilon());
    Ok(support
        .0
        .iter()
        .zip(&query.0)
        .map(|(&s, &q)| {
            let v = r * (s - q).tanh();
            v.max(-cap).min(cap)
        })
        .collect())
}
