//! Ensembling of prompt-conditioned predictions, predictive entropy, the
//! area-adaptive uncertainty threshold and the high-uncertainty mask.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::BoundingBox;
use crate::volume::{BinaryMask, ProbMap, UncertaintyMap, VolumeError};
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("cannot ensemble an empty list of predictions")]
    NoPredictions,
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("binarization threshold {0} outside (0, 1)")]
    Tau(f64),
    #[error("box area S_b must be positive")]
    ZeroBoxArea,
    #[error("threshold region is empty or outside the grid")]
    EmptyRegion,
    #[error("fixed threshold fraction {0} outside [0, 1]")]
    Fraction(f64),
}

/// Elementwise mean of `n` probability maps.
pub fn ensemble<T: Scalar>(preds: &[ProbMap<T>]) -> Result<ProbMap<T>, UncertaintyError> {
    let first = preds.first().ok_or(UncertaintyError::NoPredictions)?;
    for p in &preds[1..] {
        first.check_same_dims(p.grid())?;
    }
    let n = T::from_usize_lossy(preds.len());
    let mut sum = vec![T::zero(); first.dims().len()];
    let mut same = vec![true; first.dims().len()];
    for p in preds {
        for (((s, eq), &v), &f) in sum.iter_mut().zip(same.iter_mut()).zip(p.data()).zip(first.data()) {
            *s = *s + v;
            *eq &= v == f;
        }
    }
    // Voxels where all predictions agree keep that value exactly.
    let data = sum
        .into_iter()
        .zip(same)
        .zip(first.data())
        .map(|((s, eq), &f)| if eq { f } else { (s / n).max(T::zero()).min(T::one()) })
        .collect();
    Ok(ProbMap::new(first.dims(), first.spacing(), data)?)
}

/// `p >= tau`, voxelwise. A probability exactly at `tau` counts as foreground.
pub fn binarize<T: Scalar>(p: &ProbMap<T>, tau: T) -> Result<BinaryMask, UncertaintyError> {
    if !(tau > T::zero() && tau < T::one()) {
        return Err(UncertaintyError::Tau(tau.to_f64_lossy()));
    }
    Ok(BinaryMask::from_bools(
        p.dims(),
        p.spacing(),
        p.data().iter().map(|&v| v >= tau),
    )?)
}

/// Two-class entropy in nats, with `0 ln 0 = 0`.
pub fn binary_entropy<T: Scalar>(p: T) -> T {
    let zero = T::zero();
    let one = T::one();
    if p <= zero || p >= one {
        return zero;
    }
    let h = -(p * p.ln()) - (one - p) * (-p).ln_1p();
    h.max(zero).min(T::lit(std::f64::consts::LN_2))
}

pub fn entropy_map<T: Scalar>(p: &ProbMap<T>) -> UncertaintyMap<T> {
    let data = p.data().iter().map(|&v| binary_entropy(v)).collect();
    UncertaintyMap::new(p.dims(), p.spacing(), data).expect("entropy is finite and non-negative")
}

/// Min and max of `u` over the voxels of `region`.
pub fn value_range<T: Scalar>(u: &UncertaintyMap<T>, region: &BoundingBox) -> Result<(T, T), UncertaintyError> {
    if !region.fits(u.dims()) {
        return Err(UncertaintyError::EmptyRegion);
    }
    let data = u.data();
    let mut it = region.indices(u.dims()).map(|i| data[i]);
    let first = it.next().ok_or(UncertaintyError::EmptyRegion)?;
    Ok(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
}

/// Places the threshold inside `[min, max]` at fraction
/// `(S_y + S_b) / (2 S_b)`, clamped to the range.
pub fn threshold_from_range<T: Scalar>(min: T, max: T, s_y: usize, s_b: usize) -> Result<T, UncertaintyError> {
    if s_b == 0 {
        return Err(UncertaintyError::ZeroBoxArea);
    }
    if s_y >= s_b {
        return Ok(max);
    }
    let range = max - min;
    // Multiply before dividing: for dyadic inputs the product is exact, which
    // keeps the threshold equivariant under power-of-two rescaling of u.
    let num = T::from_usize_lossy(s_y + s_b) * range;
    let t = min + num / T::from_usize_lossy(2 * s_b);
    Ok(t.max(min).min(max))
}

/// Class-specific threshold over the voxels of `region`, where `s_y` is the
/// segmented area and `s_b` the box area.
pub fn class_threshold<T: Scalar>(
    u: &UncertaintyMap<T>,
    region: &BoundingBox,
    s_y: usize,
    s_b: usize,
) -> Result<T, UncertaintyError> {
    if s_b == 0 {
        return Err(UncertaintyError::ZeroBoxArea);
    }
    let (lo, hi) = value_range(u, region)?;
    threshold_from_range(lo, hi, s_y, s_b)
}

/// Threshold at a fixed position `fraction` within `[min, max]` of the region.
pub fn fixed_threshold<T: Scalar>(u: &UncertaintyMap<T>, region: &BoundingBox, fraction: f64) -> Result<T, UncertaintyError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(UncertaintyError::Fraction(fraction));
    }
    let (lo, hi) = value_range(u, region)?;
    Ok((lo + T::lit(fraction) * (hi - lo)).max(lo).min(hi))
}

/// `u > t`, strictly, over the whole grid.
pub fn uncertainty_mask<T: Scalar>(u: &UncertaintyMap<T>, t: T) -> BinaryMask {
    BinaryMask::from_bools(u.dims(), u.spacing(), u.data().iter().map(|&v| v > t))
        .expect("shape preserved")
}

/// `u > t` inside `region`, zero elsewhere.
pub fn uncertainty_mask_in<T: Scalar>(u: &UncertaintyMap<T>, t: T, region: &BoundingBox) -> BinaryMask {
    let dims = u.dims();
    let mut data = vec![0u8; dims.len()];
    for i in region.indices(dims) {
        data[i] = u8::from(u.data()[i] > t);
    }
    BinaryMask::new(dims, u.spacing(), data).expect("shape preserved")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    #[default]
    ClassSpecific,
    Fixed,
}

impl ThresholdMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ThresholdMode::ClassSpecific => "class_specific",
            ThresholdMode::Fixed => "fixed",
        }
    }
}

impl std::str::FromStr for ThresholdMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "class_specific" | "class-specific" => Ok(ThresholdMode::ClassSpecific),
            "fixed" => Ok(ThresholdMode::Fixed),
            other => Err(format!("unknown threshold mode {other:?}")),
        }
    }
}

/// Ensemble output for one slice (or volume) and its threshold statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult<T: Scalar> {
    pub prob: ProbMap<T>,
    pub mask: BinaryMask,
    pub unc: UncertaintyMap<T>,
    pub unc_mask: BinaryMask,
    /// Segmented voxels inside the region.
    pub s_y: usize,
    /// Region area.
    pub s_b: usize,
    pub t_unc: T,
    pub u_min: T,
    pub u_max: T,
}

/// Runs ensemble, binarization at 0.5, entropy, thresholding and masking with
/// all statistics taken over `region`.
pub fn analyze<T: Scalar>(
    preds: &[ProbMap<T>],
    region: &BoundingBox,
    mode: ThresholdMode,
    fixed_fraction: f64,
) -> Result<EnsembleResult<T>, UncertaintyError> {
    let prob = ensemble(preds)?;
    let mask = binarize(&prob, T::lit(0.5))?;
    let unc = entropy_map(&prob);
    let (u_min, u_max) = value_range(&unc, region)?;
    let s_b = region.indices(unc.dims()).count();
    let s_y = region.indices(unc.dims()).filter(|&i| mask.is_set(i)).count();
    let t_unc = match mode {
        ThresholdMode::ClassSpecific => threshold_from_range(u_min, u_max, s_y, s_b)?,
        ThresholdMode::Fixed => fixed_threshold(&unc, region, fixed_fraction)?,
    };
    let unc_mask = uncertainty_mask_in(&unc, t_unc, region);
    Ok(EnsembleResult {
        prob,
        mask,
        unc,
        unc_mask,
        s_y,
        s_b,
        t_unc,
        u_min,
        u_max,
    })
}
