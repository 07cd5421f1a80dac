//! Uncertainty rectification.
//!
//! The domain is split into certain target `M_t`, certain background `M_b` and
//! the uncertain set `M_unc`. Intensity-based rectification keeps `M_t` and
//! adds uncertain voxels whose intensity lies between a lower bound derived
//! from the mean target/background intensities and `alpha_h * I_t`. The set
//! algebra baselines treat uncertain voxels as false positives, false
//! negatives, or both.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::BoundingBox;
use crate::volume::{BinaryMask, Volume, VolumeError};
use crate::Scalar;

pub use crate::uncertainty::ThresholdMode;

#[derive(Debug, Error, PartialEq)]
pub enum RectifyError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("no certain target voxels in the domain")]
    NoCertainTarget,
    #[error("alpha_h must be positive, got {0}")]
    Alpha(f64),
    #[error("fixed threshold fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("rectification region does not fit the grid")]
    Region,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RectifyMode {
    /// Intensity-based rectification.
    #[default]
    Ur,
    /// Remove uncertain voxels.
    Fpc,
    /// Add uncertain voxels.
    Fnc,
    /// Flip uncertain voxels.
    Fpnc,
}

impl RectifyMode {
    pub const ALL: [RectifyMode; 4] = [RectifyMode::Ur, RectifyMode::Fpc, RectifyMode::Fnc, RectifyMode::Fpnc];

    pub fn as_str(&self) -> &'static str {
        match self {
            RectifyMode::Ur => "ur",
            RectifyMode::Fpc => "fpc",
            RectifyMode::Fnc => "fnc",
            RectifyMode::Fpnc => "fpnc",
        }
    }
}

impl std::str::FromStr for RectifyMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ur" => Ok(RectifyMode::Ur),
            "fpc" => Ok(RectifyMode::Fpc),
            "fnc" => Ok(RectifyMode::Fnc),
            "fpnc" => Ok(RectifyMode::Fpnc),
            other => Err(format!("unknown rectification mode {other:?}")),
        }
    }
}

/// Lower intensity bound for admitting uncertain voxels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LowerBoundMode {
    /// `(I_t - I_b) / 2`
    #[default]
    HalfGap,
    /// `(I_t + I_b) / 2`
    Mean,
}

impl LowerBoundMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LowerBoundMode::HalfGap => "half-gap",
            LowerBoundMode::Mean => "mean",
        }
    }

    pub fn bound<T: Scalar>(&self, i_t: T, i_b: T) -> T {
        let two = T::lit(2.0);
        match self {
            LowerBoundMode::HalfGap => (i_t - i_b) / two,
            LowerBoundMode::Mean => (i_t + i_b) / two,
        }
    }
}

impl std::str::FromStr for LowerBoundMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "half-gap" => Ok(LowerBoundMode::HalfGap),
            "mean" => Ok(LowerBoundMode::Mean),
            other => Err(format!("unknown lower bound mode {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectifyConfig {
    pub alpha_h: f64,
    pub mode: RectifyMode,
    pub threshold_mode: ThresholdMode,
    pub fixed_fraction: f64,
    pub lower_bound: LowerBoundMode,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            alpha_h: 1.1,
            mode: RectifyMode::Ur,
            threshold_mode: ThresholdMode::ClassSpecific,
            fixed_fraction: 0.5,
            lower_bound: LowerBoundMode::HalfGap,
        }
    }
}

impl RectifyConfig {
    pub fn validate(&self) -> Result<(), RectifyError> {
        if !(self.alpha_h > 0.0 && self.alpha_h.is_finite()) {
            return Err(RectifyError::Alpha(self.alpha_h));
        }
        if !(0.0..=1.0).contains(&self.fixed_fraction) {
            return Err(RectifyError::Fraction(self.fixed_fraction));
        }
        Ok(())
    }
}

/// Disjoint `M_t`, `M_b`, `M_unc` covering the domain exactly. Voxels outside
/// the domain are zero in all three.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    pub target: BinaryMask,
    pub background: BinaryMask,
    pub uncertain: BinaryMask,
}

fn check_region(region: &BoundingBox, mask: &BinaryMask) -> Result<(), RectifyError> {
    if region.fits(mask.dims()) {
        Ok(())
    } else {
        Err(RectifyError::Region)
    }
}

pub fn partition_regions(ens: &BinaryMask, unc: &BinaryMask) -> Result<RegionPartition, RectifyError> {
    partition_regions_in(ens, unc, &BoundingBox::full(ens.dims()))
}

pub fn partition_regions_in(
    ens: &BinaryMask,
    unc: &BinaryMask,
    region: &BoundingBox,
) -> Result<RegionPartition, RectifyError> {
    ens.check_same_dims(unc.grid())?;
    check_region(region, ens)?;
    let dims = ens.dims();
    let mut t = vec![0u8; dims.len()];
    let mut b = vec![0u8; dims.len()];
    let mut u = vec![0u8; dims.len()];
    for i in region.indices(dims) {
        match (unc.is_set(i), ens.is_set(i)) {
            (true, _) => u[i] = 1,
            (false, true) => t[i] = 1,
            (false, false) => b[i] = 1,
        }
    }
    let s = ens.spacing();
    Ok(RegionPartition {
        target: BinaryMask::new(dims, s, t)?,
        background: BinaryMask::new(dims, s, b)?,
        uncertain: BinaryMask::new(dims, s, u)?,
    })
}

fn masked_mean<T: Scalar>(image: &Volume<T>, indices: impl Iterator<Item = usize>) -> Option<T> {
    let data = image.data();
    let (sum, n) = indices.fold((T::zero(), 0usize), |(s, n), i| (s + data[i], n + 1));
    (n > 0).then(|| sum / T::from_usize_lossy(n))
}

/// Mean intensity over `M_t` and `M_b`.
///
/// Fails with [`RectifyError::NoCertainTarget`] when `M_t` is empty. An empty
/// `M_b` falls back to every domain voxel outside the ensemble mask, and then
/// to the whole domain.
pub fn mean_intensities<T: Scalar>(
    image: &Volume<T>,
    part: &RegionPartition,
    ens: &BinaryMask,
    region: &BoundingBox,
) -> Result<(T, T), RectifyError> {
    image.check_same_dims(part.target.grid())?;
    image.check_same_dims(ens.grid())?;
    let dims = image.dims();
    let all = 0..dims.len();
    let i_t = masked_mean(image, all.clone().filter(|&i| part.target.is_set(i)))
        .ok_or(RectifyError::NoCertainTarget)?;
    let i_b = masked_mean(image, all.filter(|&i| part.background.is_set(i)))
        .or_else(|| masked_mean(image, region.indices(dims).filter(|&i| !ens.is_set(i))))
        .or_else(|| masked_mean(image, region.indices(dims)))
        .unwrap_or(i_t);
    Ok((i_t, i_b))
}

/// Intensity-based rectification over the whole grid.
pub fn rectify_ur<T: Scalar>(
    image: &Volume<T>,
    ens: &BinaryMask,
    unc: &BinaryMask,
    cfg: &RectifyConfig,
) -> Result<BinaryMask, RectifyError> {
    rectify_ur_in(image, ens, unc, cfg, &BoundingBox::full(ens.dims()))
}

/// Intensity-based rectification restricted to `region`; voxels outside keep
/// their ensemble label. With no certain target the ensemble mask is returned.
pub fn rectify_ur_in<T: Scalar>(
    image: &Volume<T>,
    ens: &BinaryMask,
    unc: &BinaryMask,
    cfg: &RectifyConfig,
    region: &BoundingBox,
) -> Result<BinaryMask, RectifyError> {
    cfg.validate()?;
    image.check_same_dims(ens.grid())?;
    let part = partition_regions_in(ens, unc, region)?;
    let (i_t, i_b) = match mean_intensities(image, &part, ens, region) {
        Ok(v) => v,
        Err(RectifyError::NoCertainTarget) => return Ok(ens.clone()),
        Err(e) => return Err(e),
    };
    let lower = cfg.lower_bound.bound(i_t, i_b);
    let upper = T::lit(cfg.alpha_h) * i_t;
    let x = image.data();
    let mut out = ens.data().to_vec();
    for i in region.indices(ens.dims()) {
        out[i] = if part.uncertain.is_set(i) {
            u8::from(lower < x[i] && x[i] < upper)
        } else {
            part.target.data()[i]
        };
    }
    Ok(BinaryMask::new(ens.dims(), ens.spacing(), out)?)
}

fn combine(ens: &BinaryMask, unc: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask, RectifyError> {
    ens.check_same_dims(unc.grid())?;
    let bits = ens
        .data()
        .iter()
        .zip(unc.data())
        .map(|(&e, &u)| f(e == 1, u == 1));
    Ok(BinaryMask::from_bools(ens.dims(), ens.spacing(), bits)?)
}

/// Removes uncertain voxels from the ensemble mask.
pub fn rectify_fp(ens: &BinaryMask, unc: &BinaryMask) -> Result<BinaryMask, RectifyError> {
    combine(ens, unc, |e, u| e && !u)
}

/// Adds uncertain voxels to the ensemble mask.
pub fn rectify_fn(ens: &BinaryMask, unc: &BinaryMask) -> Result<BinaryMask, RectifyError> {
    combine(ens, unc, |e, u| e || u)
}

/// Flips uncertain voxels.
pub fn rectify_fpnc(ens: &BinaryMask, unc: &BinaryMask) -> Result<BinaryMask, RectifyError> {
    combine(ens, unc, |e, u| e ^ u)
}

/// Dispatches on `cfg.mode`.
pub fn rectify<T: Scalar>(
    image: &Volume<T>,
    ens: &BinaryMask,
    unc: &BinaryMask,
    cfg: &RectifyConfig,
    region: &BoundingBox,
) -> Result<BinaryMask, RectifyError> {
    match cfg.mode {
        RectifyMode::Ur => rectify_ur_in(image, ens, unc, cfg, region),
        RectifyMode::Fpc => rectify_fp(ens, unc),
        RectifyMode::Fnc => rectify_fn(ens, unc),
        RectifyMode::Fpnc => rectify_fpnc(ens, unc),
    }
}
