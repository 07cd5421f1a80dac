//! Reference implementations written independently of the library code.

use std::collections::HashSet;

/// Natural log by binary argument reduction and the atanh series; does not
/// call the platform `ln`.
pub fn ln_series(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite());
    let mut m = x;
    let mut e = 0i32;
    while m > std::f64::consts::SQRT_2 {
        m /= 2.0;
        e += 1;
    }
    while m < std::f64::consts::FRAC_1_SQRT_2 {
        m *= 2.0;
        e -= 1;
    }
    let s = (m - 1.0) / (m + 1.0);
    let s2 = s * s;
    let mut term = s;
    let mut sum = 0.0;
    let mut k = 0;
    while k < 200 {
        let add = term / (2 * k + 1) as f64;
        sum += add;
        if add.abs() < 1e-20 {
            break;
        }
        term *= s2;
        k += 1;
    }
    f64::from(e) * std::f64::consts::LN_2 + 2.0 * sum
}

/// `-p ln p - (1-p) ln(1-p)` with `0 ln 0 = 0`.
pub fn entropy(p: f64) -> f64 {
    let term = |v: f64| if v <= 0.0 { 0.0 } else { -v * ln_series(v) };
    term(p) + term(1.0 - p)
}

pub fn tanh(d: f64) -> f64 {
    if d.abs() > 20.0 {
        return d.signum();
    }
    let e = (2.0 * d).exp();
    (e - 1.0) / (e + 1.0)
}

/// Threshold placed at `(s_y + s_b) / (2 s_b)` of the sorted value range.
pub fn class_threshold(values: &[f64], s_y: usize, s_b: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let (lo, hi) = (v[0], v[v.len() - 1]);
    if s_y >= s_b {
        return hi;
    }
    lo + (hi - lo) * (s_y + s_b) as f64 / (2.0 * s_b as f64)
}

pub fn dsc(g: &[u8], s: &[u8]) -> f64 {
    let a: HashSet<usize> = g.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect();
    let b: HashSet<usize> = s.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// A 2D rectification fixture: rows of intensities and labels plus the
/// inclusive region `[y0, x0, y1, x1]`.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub image: Vec<Vec<f64>>,
    pub ens: Vec<Vec<bool>>,
    pub unc: Vec<Vec<bool>>,
    pub region: [usize; 4],
    pub alpha_h: f64,
    pub mean_lower: bool,
}

impl Fixture {
    pub fn height(&self) -> usize {
        self.image.len()
    }

    pub fn width(&self) -> usize {
        self.image[0].len()
    }
}

/// Intensity rectification written as the textbook double loop:
/// `y_r = M_t`, then every uncertain pixel with `lower < x < alpha * I_t`
/// is set. Pixels outside the region keep their ensemble label.
pub fn rectify_ur(f: &Fixture) -> Vec<Vec<bool>> {
    let (h, w) = (f.height(), f.width());
    let [y0, x0, y1, x1] = f.region;
    let inside = |i: usize, j: usize| i >= y0 && i <= y1 && j >= x0 && j <= x1;

    let mut t_sum = 0.0;
    let mut t_n = 0usize;
    let mut b_sum = 0.0;
    let mut b_n = 0usize;
    for i in 0..h {
        for j in 0..w {
            if !inside(i, j) || f.unc[i][j] {
                continue;
            }
            if f.ens[i][j] {
                t_sum += f.image[i][j];
                t_n += 1;
            } else {
                b_sum += f.image[i][j];
                b_n += 1;
            }
        }
    }
    if t_n == 0 {
        return f.ens.clone();
    }
    let i_t = t_sum / t_n as f64;
    let i_b = if b_n > 0 {
        b_sum / b_n as f64
    } else {
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..h {
            for j in 0..w {
                if inside(i, j) && !f.ens[i][j] {
                    s += f.image[i][j];
                    n += 1;
                }
            }
        }
        if n == 0 {
            for i in 0..h {
                for j in 0..w {
                    if inside(i, j) {
                        s += f.image[i][j];
                        n += 1;
                    }
                }
            }
        }
        s / n as f64
    };
    let lower = if f.mean_lower { (i_t + i_b) / 2.0 } else { (i_t - i_b) / 2.0 };
    let upper = f.alpha_h * i_t;

    let mut out = f.ens.clone();
    for i in 0..h {
        for j in 0..w {
            if !inside(i, j) {
                continue;
            }
            out[i][j] = if f.unc[i][j] {
                lower < f.image[i][j] && f.image[i][j] < upper
            } else {
                f.ens[i][j]
            };
        }
    }
    out
}
