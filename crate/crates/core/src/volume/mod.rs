//! Volume and mask data model.
//!
//! Every grid stores its voxels in a flat vector using the linear order
//! `(z * h + y) * w + x`. A single 2D slice is a grid with depth 1, so the
//! per-slice code paths reuse the same types as the volumetric ones.

mod uvol;

use std::ops::Deref;

use thiserror::Error;

use crate::Scalar;

pub use uvol::{decode_uvol, encode_uvol, read_uvol, write_uvol, UvolError, UvolGrid, UvolWrite};

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("dimensions must be positive, got {0:?}")]
    ZeroDim([usize; 3]),
    #[error("spacing must be positive and finite, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("data length {actual} does not match dims product {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite intensity at index {0}")]
    NonFinite(usize),
    #[error("mask value {value} at index {index} is not 0 or 1")]
    NonBinary { index: usize, value: u8 },
    #[error("probability {value} at index {index} outside [0, 1]")]
    ProbabilityRange { index: usize, value: f64 },
    #[error("uncertainty {value} at index {index} is negative or non-finite")]
    UncertaintyRange { index: usize, value: f64 },
    #[error("slice index {z} out of range for depth {depth}")]
    SliceOutOfRange { z: usize, depth: usize },
    #[error("grid dims {left:?} do not match {right:?}")]
    DimsMismatch { left: Dims, right: Dims },
    #[error("normalization window requires lo < hi, got ({lo}, {hi})")]
    EmptyWindow { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(depth: usize, height: usize, width: usize) -> Result<Self, VolumeError> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(VolumeError::ZeroDim([depth, height, width]));
        }
        Ok(Self { depth, height, width })
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        debug_assert!(z < self.depth && y < self.height && x < self.width);
        (z * self.height + y) * self.width + x
    }

    /// Inverse of [`Dims::index`].
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.width;
        let y = (index / self.width) % self.height;
        let z = index / self.plane_len();
        (z, y, x)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    /// Dims of one slice of this grid.
    pub fn plane(&self) -> Dims {
        Dims { depth: 1, ..*self }
    }
}

/// Voxel size in millimetres along (z, y, x).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing {
    pub z: f64,
    pub y: f64,
    pub x: f64,
}

impl Spacing {
    pub fn new(z: f64, y: f64, x: f64) -> Result<Self, VolumeError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(z) && ok(y) && ok(x)) {
            return Err(VolumeError::BadSpacing([z, y, x]));
        }
        Ok(Self { z, y, x })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.z, self.y, self.x]
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self { z: 1.0, y: 1.0, x: 1.0 }
    }
}

/// Shape-checked storage shared by all grid kinds. Value-level invariants are
/// enforced by the typed wrappers.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<V> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<V>,
}

impl<V: Copy> Grid<V> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<V>) -> Result<Self, VolumeError> {
        if data.len() != dims.len() {
            return Err(VolumeError::LengthMismatch {
                expected: dims.len(),
                actual: data.len(),
            });
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: V) -> Self {
        Self {
            dims,
            spacing,
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn into_data(self) -> Vec<V> {
        self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> V {
        self.data[self.dims.index(z, y, x)]
    }

    pub fn check_same_dims<W>(&self, other: &Grid<W>) -> Result<(), VolumeError> {
        if self.dims != other.dims {
            return Err(VolumeError::DimsMismatch {
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }

    /// The `h x w` plane at depth `z`, as a depth-1 grid.
    pub fn slice(&self, z: usize) -> Result<Self, VolumeError> {
        if z >= self.dims.depth {
            return Err(VolumeError::SliceOutOfRange {
                z,
                depth: self.dims.depth,
            });
        }
        let n = self.dims.plane_len();
        Ok(Self {
            dims: self.dims.plane(),
            spacing: self.spacing,
            data: self.data[z * n..(z + 1) * n].to_vec(),
        })
    }

    /// Copy of `self` with plane `z` replaced by `plane`.
    pub fn with_slice(&self, z: usize, plane: &Self) -> Result<Self, VolumeError> {
        if z >= self.dims.depth {
            return Err(VolumeError::SliceOutOfRange {
                z,
                depth: self.dims.depth,
            });
        }
        if plane.dims != self.dims.plane() {
            return Err(VolumeError::DimsMismatch {
                left: self.dims.plane(),
                right: plane.dims,
            });
        }
        let n = self.dims.plane_len();
        let mut out = self.clone();
        out.data[z * n..(z + 1) * n].copy_from_slice(&plane.data);
        Ok(out)
    }

    /// Stacks depth-1 planes back into a volume.
    pub fn stack(planes: &[Self]) -> Result<Self, VolumeError> {
        let first = planes.first().ok_or(VolumeError::ZeroDim([0, 0, 0]))?;
        let plane_dims = first.dims;
        let mut data = Vec::with_capacity(plane_dims.plane_len() * planes.len());
        for p in planes {
            if p.dims != plane_dims || p.dims.depth != 1 {
                return Err(VolumeError::DimsMismatch {
                    left: plane_dims,
                    right: p.dims,
                });
            }
            data.extend_from_slice(&p.data);
        }
        let dims = Dims::new(planes.len(), plane_dims.height, plane_dims.width)?;
        Ok(Self {
            dims,
            spacing: first.spacing,
            data,
        })
    }
}

macro_rules! typed_grid {
    ($(#[$meta:meta])* $name:ident<$t:ident>, $validate:path) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<$t: Scalar>(Grid<$t>);

        impl<$t: Scalar> $name<$t> {
            pub fn new(dims: Dims, spacing: Spacing, data: Vec<$t>) -> Result<Self, VolumeError> {
                Self::from_grid(Grid::new(dims, spacing, data)?)
            }

            pub fn from_grid(grid: Grid<$t>) -> Result<Self, VolumeError> {
                $validate(grid.data())?;
                Ok(Self(grid))
            }

            pub fn grid(&self) -> &Grid<$t> {
                &self.0
            }

            pub fn into_grid(self) -> Grid<$t> {
                self.0
            }

            pub fn slice(&self, z: usize) -> Result<Self, VolumeError> {
                self.0.slice(z).map(Self)
            }

            pub fn with_slice(&self, z: usize, plane: &Self) -> Result<Self, VolumeError> {
                self.0.with_slice(z, &plane.0).map(Self)
            }

            pub fn stack(planes: &[Self]) -> Result<Self, VolumeError> {
                let grids: Vec<Grid<$t>> = planes.iter().map(|p| p.0.clone()).collect();
                Grid::stack(&grids).map(Self)
            }

            /// Converts the scalar type.
            pub fn cast<U: Scalar>(&self) -> $name<U> {
                let data = self
                    .0
                    .data
                    .iter()
                    .map(|v| U::lit(v.to_f64_lossy()))
                    .collect();
                $name(Grid {
                    dims: self.0.dims,
                    spacing: self.0.spacing,
                    data,
                })
            }
        }

        impl<$t: Scalar> Deref for $name<$t> {
            type Target = Grid<$t>;
            fn deref(&self) -> &Grid<$t> {
                &self.0
            }
        }
    };
}

fn validate_finite<T: Scalar>(data: &[T]) -> Result<(), VolumeError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(VolumeError::NonFinite(i)),
        None => Ok(()),
    }
}

fn validate_probability<T: Scalar>(data: &[T]) -> Result<(), VolumeError> {
    for (index, &v) in data.iter().enumerate() {
        if !(v >= T::zero() && v <= T::one()) {
            return Err(VolumeError::ProbabilityRange {
                index,
                value: v.to_f64_lossy(),
            });
        }
    }
    Ok(())
}

fn validate_uncertainty<T: Scalar>(data: &[T]) -> Result<(), VolumeError> {
    for (index, &v) in data.iter().enumerate() {
        if !(v >= T::zero() && v.is_finite()) {
            return Err(VolumeError::UncertaintyRange {
                index,
                value: v.to_f64_lossy(),
            });
        }
    }
    Ok(())
}

typed_grid!(
    /// Scalar intensity volume (CT numbers before normalization, `[0, 1]` after).
    Volume<T>,
    validate_finite
);
typed_grid!(
    /// Per-voxel foreground probability in `[0, 1]`.
    ProbMap<T>,
    validate_probability
);
typed_grid!(
    /// Per-voxel non-negative uncertainty (binary entropy in nats).
    UncertaintyMap<T>,
    validate_uncertainty
);

/// Per-voxel {0, 1} mask.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask(Grid<u8>);

impl BinaryMask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self, VolumeError> {
        Self::from_grid(Grid::new(dims, spacing, data)?)
    }

    pub fn from_grid(grid: Grid<u8>) -> Result<Self, VolumeError> {
        if let Some(index) = grid.data.iter().position(|&v| v > 1) {
            return Err(VolumeError::NonBinary {
                index,
                value: grid.data[index],
            });
        }
        Ok(Self(grid))
    }

    pub fn from_bools(dims: Dims, spacing: Spacing, bits: impl IntoIterator<Item = bool>) -> Result<Self, VolumeError> {
        let data: Vec<u8> = bits.into_iter().map(u8::from).collect();
        Self::new(dims, spacing, data)
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self(Grid::filled(dims, spacing, 0))
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<u8> {
        self.0
    }

    #[inline]
    pub fn is_set(&self, index: usize) -> bool {
        self.0.data[index] == 1
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.0.data.iter().all(|&v| v == 0)
    }

    pub fn slice(&self, z: usize) -> Result<Self, VolumeError> {
        self.0.slice(z).map(Self)
    }

    pub fn with_slice(&self, z: usize, plane: &Self) -> Result<Self, VolumeError> {
        self.0.with_slice(z, &plane.0).map(Self)
    }

    pub fn stack(planes: &[Self]) -> Result<Self, VolumeError> {
        let grids: Vec<Grid<u8>> = planes.iter().map(|p| p.0.clone()).collect();
        Grid::stack(&grids).map(Self)
    }
}

impl Deref for BinaryMask {
    type Target = Grid<u8>;
    fn deref(&self) -> &Grid<u8> {
        &self.0
    }
}

/// Clips intensities to `[lo, hi]` and maps them linearly onto `[0, 1]`.
pub fn normalize_intensity<T: Scalar>(v: &Volume<T>, lo: T, hi: T) -> Result<Volume<T>, VolumeError> {
    if !(lo < hi) {
        return Err(VolumeError::EmptyWindow {
            lo: lo.to_f64_lossy(),
            hi: hi.to_f64_lossy(),
        });
    }
    let span = hi - lo;
    let data = v
        .data()
        .iter()
        .map(|&x| {
            let c = x.max(lo).min(hi);
            ((c - lo) / span).max(T::zero()).min(T::one())
        })
        .collect();
    Volume::new(v.dims(), v.spacing(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], data: Vec<f64>) -> Volume<f64> {
        Volume::new(
            Dims::new(dims[0], dims[1], dims[2]).unwrap(),
            Spacing::default(),
            data,
        )
        .unwrap()
    }

    #[test]
    fn normalize_window_endpoints_and_clipping() {
        let v = vol([1, 1, 4], vec![-500.0, 250.0, -700.0, 1000.0]);
        let n = normalize_intensity(&v, -500.0, 1000.0).unwrap();
        assert_eq!(n.data(), &[0.0, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_empty_window() {
        let v = vol([1, 1, 1], vec![0.0]);
        assert!(matches!(
            normalize_intensity(&v, 1.0, 1.0),
            Err(VolumeError::EmptyWindow { .. })
        ));
    }

    #[test]
    fn normalize_unit_window_is_identity_on_unit_range() {
        let v = vol([1, 2, 2], vec![0.0, 0.25, 0.5, 1.0]);
        assert_eq!(normalize_intensity(&v, 0.0, 1.0).unwrap(), v);
    }

    #[test]
    fn invariants_enforced() {
        let d = Dims::new(1, 1, 2).unwrap();
        assert!(Volume::new(d, Spacing::default(), vec![0.0, f64::NAN]).is_err());
        assert!(ProbMap::new(d, Spacing::default(), vec![0.0, 1.5]).is_err());
        assert!(UncertaintyMap::new(d, Spacing::default(), vec![0.0, -0.1]).is_err());
        assert!(BinaryMask::new(d, Spacing::default(), vec![0, 2]).is_err());
        assert!(BinaryMask::new(d, Spacing::default(), vec![0]).is_err());
        assert!(Dims::new(0, 1, 1).is_err());
        assert!(Spacing::new(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn linear_index_convention() {
        let d = Dims::new(2, 3, 4).unwrap();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let v = vol([2, 3, 4], data);
        assert_eq!(v.get(1, 2, 3), ((1 * 3 + 2) * 4 + 3) as f64);
        for i in 0..d.len() {
            let (z, y, x) = d.coords(i);
            assert_eq!(d.index(z, y, x), i);
        }
    }

    #[test]
    fn slice_bounds_and_reassembly() {
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let v = vol([2, 3, 4], data);
        assert!(matches!(
            v.slice(2),
            Err(VolumeError::SliceOutOfRange { z: 2, depth: 2 })
        ));
        let planes: Vec<_> = (0..2).map(|z| v.slice(z).unwrap()).collect();
        assert_eq!(planes[1].get(0, 0, 0), 12.0);
        assert_eq!(Volume::stack(&planes).unwrap(), v);

        let single = vol([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(single.slice(0).unwrap(), single);
    }

    #[test]
    fn with_slice_writes_back() {
        let v = vol([2, 1, 2], vec![0.0; 4]);
        let p = vol([1, 1, 2], vec![7.0, 8.0]);
        let w = v.with_slice(1, &p).unwrap();
        assert_eq!(w.data(), &[0.0, 0.0, 7.0, 8.0]);
        assert!(v.with_slice(0, &v).is_err());
    }
}
