//! Synthetic CT-like dataset: dark ellipsoidal organs on a bright textured
//! background, with matching ground-truth masks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{Case, Dataset};
use crate::rng::{derive_seed, hash_label, stream, Purpose};
use crate::volume::{BinaryMask, Dims, Spacing, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("phantom needs at least one case and one organ")]
    Empty,
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("could not place {organs} organs in a {size:?} volume")]
    Placement { organs: usize, size: [usize; 3] },
}

/// Intensities are on the normalized [0, 1] scale and stored as
/// `window.0 + v * (window.1 - window.0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub cases: usize,
    pub organs: usize,
    pub size: [usize; 3],
    pub spacing: [f64; 3],
    /// Semi-axis range in voxels.
    pub semi_axis: (f64, f64),
    /// Minimum gap between organ surfaces, measured on the bounding spheres.
    pub gap: f64,
    pub background: f64,
    /// Organ `i` has mean `background - contrast * (1 + i / organs)`.
    pub contrast: f64,
    /// Amplitude of the smooth background pattern.
    pub texture: f64,
    /// Standard deviation of voxel noise.
    pub noise: f64,
    pub window: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            cases: 10,
            organs: 4,
            size: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            semi_axis: (5.0, 9.0),
            gap: 8.0,
            background: 0.6,
            contrast: 0.15,
            texture: 0.04,
            noise: 0.01,
            window: (-500.0, 1000.0),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.cases == 0 || self.organs == 0 {
            return Err(PhantomError::Empty);
        }
        let (lo, hi) = self.semi_axis;
        if !(lo > 0.0 && lo <= hi) {
            return Err(PhantomError::Spec(format!("semi-axis range ({lo}, {hi})")));
        }
        if self.size.iter().any(|&s| (s as f64) < 2.0 * hi + 2.0) {
            return Err(PhantomError::Spec(format!("size {:?} too small for semi-axis {hi}", self.size)));
        }
        if !(self.noise >= 0.0 && self.texture >= 0.0 && self.contrast > 0.0 && self.gap >= 0.0) {
            return Err(PhantomError::Spec("noise, texture and gap must be non-negative, contrast positive".into()));
        }
        if !(self.window.0 < self.window.1) {
            return Err(PhantomError::Spec("empty intensity window".into()));
        }
        Ok(())
    }

    pub fn organ_mean(&self, i: usize) -> f64 {
        self.background - self.contrast * (1.0 + i as f64 / self.organs as f64)
    }

    pub fn organ_name(i: usize) -> String {
        format!("organ{}", i + 1)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn radius(&self) -> f64 {
        self.axes.iter().cloned().fold(0.0, f64::max)
    }
}

fn place(spec: &PhantomSpec, seed: u64) -> Result<Vec<Ellipsoid>, PhantomError> {
    const ATTEMPTS: u64 = 10_000;
    let (lo, hi) = spec.semi_axis;
    let mut placed: Vec<Ellipsoid> = Vec::with_capacity(spec.organs);
    for attempt in 0..ATTEMPTS {
        if placed.len() == spec.organs {
            break;
        }
        let mut rng = stream(seed, attempt);
        let axes = [
            rng.gen_range(lo..=hi),
            rng.gen_range(lo..=hi),
            rng.gen_range(lo..=hi),
        ];
        let mut center = [0.0; 3];
        for a in 0..3 {
            let margin = axes[a] + 1.0;
            center[a] = rng.gen_range(margin..=spec.size[a] as f64 - 1.0 - margin);
        }
        let e = Ellipsoid { center, axes };
        let clear = placed.iter().all(|o| {
            let d = (0..3).map(|a| (o.center[a] - center[a]).powi(2)).sum::<f64>().sqrt();
            d >= o.radius() + e.radius() + spec.gap
        });
        if clear {
            placed.push(e);
        }
    }
    if placed.len() < spec.organs {
        return Err(PhantomError::Placement {
            organs: spec.organs,
            size: spec.size,
        });
    }
    Ok(placed)
}

fn gen_case(spec: &PhantomSpec, id: &str, seed: u64) -> Result<Case, PhantomError> {
    let dims = Dims::new(spec.size[0], spec.size[1], spec.size[2]).map_err(|e| PhantomError::Spec(e.to_string()))?;
    let [sz, sy, sx] = spec.spacing;
    let spacing = Spacing::new(sz, sy, sx).map_err(|e| PhantomError::Spec(e.to_string()))?;
    let case_seed = derive_seed(seed, &[hash_label(id), Purpose::Phantom as u64]);
    let organs = place(spec, derive_seed(case_seed, &[0]))?;

    let mut rng = stream(case_seed, 1);
    let phase: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let freq = [0.31, 0.27, 0.35];
    let noise = Normal::new(0.0, spec.noise).map_err(|e| PhantomError::Spec(e.to_string()))?;
    let mut noise_rng = stream(case_seed, 2);

    let mut labels = vec![0usize; dims.len()];
    let mut values = vec![0.0f32; dims.len()];
    let (wlo, whi) = spec.window;
    for (i, v) in values.iter_mut().enumerate() {
        let (z, y, x) = dims.coords(i);
        let p = [z as f64, y as f64, x as f64];
        let label = organs.iter().position(|e| e.contains(p)).map_or(0, |k| k + 1);
        labels[i] = label;
        let base = if label == 0 {
            let t: f64 = (0..3)
                .map(|a| (freq[a] * p[a] + std::f64::consts::TAU * phase[a]).sin())
                .product();
            spec.background + spec.texture * t
        } else {
            spec.organ_mean(label - 1)
        };
        let n: f64 = if spec.noise > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
        *v = (wlo + (base + n) * (whi - wlo)) as f32;
    }
    let image = Volume::new(dims, spacing, values).map_err(|e| PhantomError::Spec(e.to_string()))?;
    let gt = (0..spec.organs)
        .map(|k| {
            let mask = BinaryMask::from_bools(dims, spacing, labels.iter().map(|&l| l == k + 1))
                .expect("dims match");
            (PhantomSpec::organ_name(k), mask)
        })
        .collect::<BTreeMap<_, _>>();
    Ok(Case {
        id: id.to_string(),
        image,
        gt,
        boxes: None,
    })
}

/// Generates `spec.cases` cases named `case00`, `case01`, ...; output depends
/// only on `(spec, seed)`.
pub fn gen_phantom(spec: &PhantomSpec, seed: u64) -> Result<Dataset, PhantomError> {
    spec.validate()?;
    let cases = (0..spec.cases)
        .map(|c| gen_case(spec, &format!("case{c:02}"), seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { cases })
}
