//! Deterministic prompt-sensitive stand-in for a promptable segmenter.
//!
//! The output degrades the ground truth according to how far the prompt is
//! from the tight ground-truth box: the mask is translated toward the prompt
//! center, cut to the prompt, dilated (loose prompts) or eroded (tight
//! prompts) by an amount proportional to the misalignment, and rendered as a
//! probability ramp across its boundary. Seeded label flips perturb the
//! boundary band.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SegmentError, SegmentRequest, SegmentResponse, Segmenter};
use crate::prompt::Box2;
use crate::rng::stream;
use crate::volume::BinaryMask;

pub const P_BACKGROUND: f32 = 0.05;
pub const P_CORE: f32 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Distance (pixels) over which probability ramps from 0.5 to the core value.
    pub ramp_width: f64,
    /// Boundary displacement in pixels per unit misalignment.
    pub morph_gain: f64,
    pub max_morph: usize,
    /// Fraction of the prompt-to-truth center offset the mask follows.
    pub shift_gain: f64,
    /// Flip probability for pixels within 1.5 px of the boundary.
    pub flip_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            ramp_width: 4.0,
            morph_gain: 3.0,
            max_morph: 4,
            shift_gain: 0.5,
            flip_prob: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn noiseless() -> Self {
        Self {
            flip_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Mean absolute corner displacement between `prompt` and `truth`, in units
/// of the mean side length of `truth`.
pub fn misalignment(prompt: Box2, truth: Box2) -> f64 {
    let d = |a: usize, b: usize| (a as f64 - b as f64).abs();
    let sum = d(prompt.y0, truth.y0) + d(prompt.x0, truth.x0) + d(prompt.y1, truth.y1) + d(prompt.x1, truth.x1);
    let side = ((truth.y1 - truth.y0 + 1) + (truth.x1 - truth.x0 + 1)) as f64 / 2.0;
    sum / (4.0 * side)
}

fn tight_box(mask: &[bool], h: usize, w: usize) -> Option<Box2> {
    let mut b: Option<Box2> = None;
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            b = Some(match b {
                None => Box2 { y0: y, x0: x, y1: y, x1: x },
                Some(b) => Box2 {
                    y0: b.y0.min(y),
                    x0: b.x0.min(x),
                    y1: b.y1.max(y),
                    x1: b.x1.max(x),
                },
            });
        }
    }
    b
}

const FAR: u32 = u32::MAX / 2;

/// Chessboard distance from every pixel to the nearest set pixel (two-pass).
fn chessboard_distance(mask: &[bool], h: usize, w: usize) -> Vec<u32> {
    let mut d: Vec<u32> = mask.iter().map(|&m| if m { 0 } else { FAR }).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut v = d[i];
            if x > 0 {
                v = v.min(d[i - 1] + 1);
            }
            if y > 0 {
                v = v.min(d[i - w] + 1);
                if x > 0 {
                    v = v.min(d[i - w - 1] + 1);
                }
                if x + 1 < w {
                    v = v.min(d[i - w + 1] + 1);
                }
            }
            d[i] = v;
        }
    }
    for y in (0..h).rev() {
        for x in (0..w).rev() {
            let i = y * w + x;
            let mut v = d[i];
            if x + 1 < w {
                v = v.min(d[i + 1] + 1);
            }
            if y + 1 < h {
                v = v.min(d[i + w] + 1);
                if x + 1 < w {
                    v = v.min(d[i + w + 1] + 1);
                }
                if x > 0 {
                    v = v.min(d[i + w - 1] + 1);
                }
            }
            d[i] = v;
        }
    }
    d
}

/// Degraded binary mask before rendering.
fn degrade(gt: &[bool], h: usize, w: usize, prompt: Box2, cfg: &SyntheticConfig) -> Vec<bool> {
    let Some(truth) = tight_box(gt, h, w) else {
        return vec![false; h * w];
    };
    let center = |a: usize, b: usize| (a + b) as f64 / 2.0;
    let ty = (cfg.shift_gain * (center(prompt.y0, prompt.y1) - center(truth.y0, truth.y1))).round() as i64;
    let tx = (cfg.shift_gain * (center(prompt.x0, prompt.x1) - center(truth.x0, truth.x1))).round() as i64;

    let mut base = vec![false; h * w];
    for y in prompt.y0..=prompt.y1 {
        for x in prompt.x0..=prompt.x1 {
            let (sy, sx) = (y as i64 - ty, x as i64 - tx);
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                base[y * w + x] = gt[sy as usize * w + sx as usize];
            }
        }
    }

    let m = misalignment(prompt, truth);
    let k = ((cfg.morph_gain * m).round() as usize).min(cfg.max_morph) as u32;
    if k == 0 {
        return base;
    }
    if prompt.area() >= truth.area() {
        let dist = chessboard_distance(&base, h, w);
        (0..h * w)
            .map(|i| dist[i] <= k && prompt.contains(i / w, i % w))
            .collect()
    } else {
        let outside: Vec<bool> = base.iter().map(|&b| !b).collect();
        let dist = chessboard_distance(&outside, h, w);
        (0..h * w).map(|i| base[i] && dist[i] > k).collect()
    }
}

/// Renders the degraded mask for `req.prompt` as a probability map.
pub fn synthetic_segment(
    req: &SegmentRequest,
    gt: &BinaryMask,
    seed: u64,
    cfg: &SyntheticConfig,
) -> Result<SegmentResponse, SegmentError> {
    let dims = gt.dims();
    if dims.depth != 1 || dims.height != req.height || dims.width != req.width {
        return Err(SegmentError::InvalidRequest(format!(
            "ground truth {}x{}x{} does not match {}x{} slice",
            dims.depth, dims.height, dims.width, req.height, req.width
        )));
    }
    if !req.prompt.fits(req.height, req.width) {
        return Err(SegmentError::InvalidRequest("prompt outside slice".into()));
    }
    let (h, w) = (req.height, req.width);
    let truth: Vec<bool> = gt.data().iter().map(|&v| v == 1).collect();
    let mask = degrade(&truth, h, w, req.prompt, cfg);

    let to_fg = chessboard_distance(&mask, h, w);
    let outside: Vec<bool> = mask.iter().map(|&b| !b).collect();
    let to_bg = chessboard_distance(&outside, h, w);

    let mut rng = stream(seed, 0);
    let prob = (0..h * w)
        .map(|i| {
            let d = if mask[i] {
                to_bg[i] as f64 - 0.5
            } else {
                -(to_fg[i] as f64 - 0.5)
            };
            let p = (0.5 + 0.45 * d / cfg.ramp_width).clamp(P_BACKGROUND as f64, P_CORE as f64) as f32;
            // One draw per pixel keeps the noise pattern independent of the mask.
            let flip = rng.gen::<f64>() < cfg.flip_prob && d.abs() <= 1.5;
            if flip {
                1.0 - p
            } else {
                p
            }
        })
        .collect();
    Ok(SegmentResponse {
        id: req.id,
        height: h,
        width: w,
        prob,
    })
}

/// Synthetic backend bound to one ground-truth slice.
pub struct SyntheticSegmenter {
    gt: BinaryMask,
    seed: u64,
    cfg: SyntheticConfig,
}

impl SyntheticSegmenter {
    pub fn new(gt: BinaryMask, seed: u64, cfg: SyntheticConfig) -> Self {
        Self { gt, seed, cfg }
    }
}

impl Segmenter for SyntheticSegmenter {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn segment_unchecked(&self, req: &SegmentRequest) -> Result<SegmentResponse, SegmentError> {
        synthetic_segment(req, &self.gt, self.seed, &self.cfg)
    }
}
