//! Property checks shared by the property-test target and the acceptance
//! runner. Each entry runs `cases` generated inputs and reports the first
//! counterexample.

use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::Rng;

use super::oracle::Fixture;
use ursam_core::eval::dsc;
use ursam_core::prompt::{augment_prompts, relative_offset, BoundingBox, Box2, LatentVector, PromptAugConfig, ShiftBasis, ShiftMode};
use ursam_core::rectify::{
    partition_regions_in, rectify_fn, rectify_fp, rectify_fpnc, rectify_ur_in, LowerBoundMode, RectifyConfig,
};
use ursam_core::segmenter::{synthetic_segment, SegmentRequest, SyntheticConfig};
use ursam_core::uncertainty::{
    analyze, binary_entropy, class_threshold, ensemble, entropy_map, threshold_from_range, uncertainty_mask,
    uncertainty_mask_in, ThresholdMode,
};
use ursam_core::volume::{decode_uvol, encode_uvol, normalize_intensity, BinaryMask, Dims, Grid, Spacing};
use ursam_core::{ProbMap, UncertaintyMap, Volume};

pub type Property = (&'static str, fn(u32) -> Result<(), String>);

/// Every property with its name.
pub const ALL: &[Property] = &[
    ("uvol_round_trip", uvol_round_trip),
    ("normalize_idempotent_monotone", normalize_idempotent_monotone),
    ("linear_index_convention", linear_index_convention),
    ("augmented_boxes_valid_and_bounded", augmented_boxes_valid_and_bounded),
    ("relative_offset_bounded_odd", relative_offset_bounded_odd),
    ("synthetic_backend_deterministic", synthetic_backend_deterministic),
    ("entropy_symmetric", entropy_symmetric),
    ("entropy_zero_iff_unanimous", entropy_zero_iff_unanimous),
    ("threshold_monotone_in_segmented_area", threshold_monotone_in_segmented_area),
    ("unc_mask_monotone_in_threshold", unc_mask_monotone_in_threshold),
    ("identical_votes_give_empty_unc_mask", identical_votes_give_empty_unc_mask),
    ("ur_keeps_target_drops_background", ur_keeps_target_drops_background),
    ("fp_ensemble_fn_nested", fp_ensemble_fn_nested),
    ("fpnc_involution", fpnc_involution),
    ("ur_invariant_under_affine_uncertainty", ur_invariant_under_affine_uncertainty),
    ("partition_exact", partition_exact),
    ("dsc_symmetric_bounded", dsc_symmetric_bounded),
    ("dsc_permutation_invariant", dsc_permutation_invariant),
];

fn run<S: Strategy>(cases: u32, strategy: S, check: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, check).map_err(|e| e.to_string())
}

fn dims_strategy(max_d: usize, max_hw: usize) -> impl Strategy<Value = Dims> {
    (1..=max_d, 1..=max_hw, 1..=max_hw).prop_map(|(d, h, w)| Dims::new(d, h, w).unwrap())
}

fn spacing_strategy() -> impl Strategy<Value = Spacing> {
    (0.1f64..5.0, 0.1f64..5.0, 0.1f64..5.0).prop_map(|(z, y, x)| Spacing::new(z, y, x).unwrap())
}

fn mask_pair() -> impl Strategy<Value = (Dims, Vec<u8>, Vec<u8>)> {
    dims_strategy(3, 8).prop_flat_map(|d| (Just(d), vec(0u8..=1, d.len()), vec(0u8..=1, d.len())))
}

fn mask(d: Dims, bits: Vec<u8>) -> BinaryMask {
    BinaryMask::new(d, Spacing::default(), bits).unwrap()
}

fn region_in(h: usize, w: usize) -> impl Strategy<Value = [usize; 4]> {
    (0..h, 0..h, 0..w, 0..w).prop_map(|(a, b, c, e)| [a.min(b), c.min(e), a.max(b), c.max(e)])
}

/// Rectification fixture up to 16x16 with intensities on an eighths grid so
/// that ties with the bounds occur.
pub fn fixture_strategy() -> impl Strategy<Value = Fixture> {
    (1usize..=16, 1usize..=16).prop_flat_map(|(h, w)| {
        (
            vec(0u8..=8, h * w),
            vec(any::<bool>(), h * w),
            vec(any::<bool>(), h * w),
            region_in(h, w),
            prop_oneof![Just(1.0), Just(1.1), Just(1.25), 0.5f64..2.5],
            any::<bool>(),
        )
            .prop_map(move |(img, ens, unc, region, alpha_h, mean_lower)| Fixture {
                image: img.chunks(w).map(|r| r.iter().map(|&v| f64::from(v) / 8.0).collect()).collect(),
                ens: ens.chunks(w).map(<[bool]>::to_vec).collect(),
                unc: unc.chunks(w).map(<[bool]>::to_vec).collect(),
                region,
                alpha_h,
                mean_lower,
            })
    })
}

/// Fixture drawn from `rng`. `kind` selects a degenerate family:
/// 0 empty certain target, 1 empty uncertainty, 2 vacuous bounds,
/// 3 empty certain background, anything else unconstrained.
pub fn random_fixture(rng: &mut impl Rng, kind: usize) -> Fixture {
    let h = rng.gen_range(1..=16);
    let w = rng.gen_range(1..=16);
    let mut f = Fixture {
        image: (0..h).map(|_| (0..w).map(|_| f64::from(rng.gen_range(0u8..=8)) / 8.0).collect()).collect(),
        ens: (0..h).map(|_| (0..w).map(|_| rng.gen()).collect()).collect(),
        unc: (0..h).map(|_| (0..w).map(|_| rng.gen_bool(0.4)).collect()).collect(),
        region: {
            let (a, b) = (rng.gen_range(0..h), rng.gen_range(0..h));
            let (c, d) = (rng.gen_range(0..w), rng.gen_range(0..w));
            [a.min(b), c.min(d), a.max(b), c.max(d)]
        },
        alpha_h: [1.0, 1.1, 1.25, rng.gen_range(0.5..2.5)][rng.gen_range(0..4)],
        mean_lower: rng.gen(),
    };
    match kind {
        0 => {
            for i in 0..h {
                for j in 0..w {
                    if f.ens[i][j] {
                        f.unc[i][j] = true;
                    }
                }
            }
        }
        1 => f.unc.iter_mut().for_each(|r| r.fill(false)),
        2 => {
            f.alpha_h = 1e6;
            f.mean_lower = false;
            for i in 0..h {
                for j in 0..w {
                    if f.ens[i][j] && !f.unc[i][j] {
                        f.image[i][j] = f.image[i][j].max(0.125);
                    }
                }
            }
        }
        3 => {
            for i in 0..h {
                for j in 0..w {
                    if !f.ens[i][j] {
                        f.unc[i][j] = true;
                    }
                }
            }
        }
        _ => {}
    }
    f
}

/// Library inputs for a fixture.
pub fn fixture_inputs(f: &Fixture) -> (Volume<f64>, BinaryMask, BinaryMask, BoundingBox, RectifyConfig) {
    let (h, w) = (f.height(), f.width());
    let d = Dims::new(1, h, w).unwrap();
    let s = Spacing::default();
    let image = Volume::new(d, s, f.image.concat()).unwrap();
    let ens = BinaryMask::from_bools(d, s, f.ens.concat()).unwrap();
    let unc = BinaryMask::from_bools(d, s, f.unc.concat()).unwrap();
    let [y0, x0, y1, x1] = f.region;
    let region = BoundingBox::new([0, y0, x0], [0, y1, x1]).unwrap();
    let cfg = RectifyConfig {
        alpha_h: f.alpha_h,
        lower_bound: if f.mean_lower {
            LowerBoundMode::Mean
        } else {
            LowerBoundMode::HalfGap
        },
        ..RectifyConfig::default()
    };
    (image, ens, unc, region, cfg)
}

pub fn uvol_round_trip(cases: u32) -> Result<(), String> {
    let s = dims_strategy(3, 6).prop_flat_map(|d| {
        (
            Just(d),
            spacing_strategy(),
            vec(-1e6f32..1e6, d.len()),
            vec(0f32..=1.0, d.len()),
            vec(0f32..10.0, d.len()),
            vec(0u8..=1, d.len()),
        )
    });
    run(cases, s, |(d, sp, v, p, u, m)| {
        let vol = Volume::new(d, sp, v).unwrap();
        let bytes = encode_uvol(&vol).unwrap();
        let back = decode_uvol(&bytes).unwrap().into_volume::<f32>().unwrap();
        prop_assert_eq!(&back, &vol);
        prop_assert_eq!(encode_uvol(&back).unwrap(), bytes);

        let pm = ProbMap::new(d, sp, p).unwrap();
        let bytes = encode_uvol(&pm).unwrap();
        prop_assert_eq!(encode_uvol(&decode_uvol(&bytes).unwrap().into_prob_map::<f32>().unwrap()).unwrap(), bytes);

        let um = UncertaintyMap::new(d, sp, u).unwrap();
        let bytes = encode_uvol(&um).unwrap();
        prop_assert_eq!(encode_uvol(&decode_uvol(&bytes).unwrap().into_uncertainty::<f32>().unwrap()).unwrap(), bytes);

        let bm = BinaryMask::new(d, sp, m).unwrap();
        let bytes = encode_uvol(&bm).unwrap();
        let back = decode_uvol(&bytes).unwrap().into_mask().unwrap();
        prop_assert_eq!(&back, &bm);
        prop_assert_eq!(encode_uvol(&back).unwrap(), bytes);
        Ok(())
    })
}

pub fn normalize_idempotent_monotone(cases: u32) -> Result<(), String> {
    let s = dims_strategy(2, 6).prop_flat_map(|d| (Just(d), vec(-3000f64..3000.0, d.len()), -1000f64..500.0, 1f64..2000.0));
    run(cases, s, |(d, v, lo, span)| {
        let hi = lo + span;
        let vol = Volume::new(d, Spacing::default(), v.clone()).unwrap();
        let n = normalize_intensity(&vol, lo, hi).unwrap();
        prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
        let again = normalize_intensity(&n, 0.0, 1.0).unwrap();
        prop_assert_eq!(&again, &n);
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] <= v[j] {
                    prop_assert!(n.data()[i] <= n.data()[j]);
                }
            }
        }
        Ok(())
    })
}

pub fn linear_index_convention(cases: u32) -> Result<(), String> {
    let s = dims_strategy(6, 12).prop_flat_map(|d| (Just(d), 0..d.depth, 0..d.height, 0..d.width));
    run(cases, s, |(d, z, y, x)| {
        let g = Grid::new(d, Spacing::default(), (0..d.len() as u32).collect()).unwrap();
        let i = (z * d.height + y) * d.width + x;
        prop_assert_eq!(g.get(z, y, x) as usize, i);
        prop_assert_eq!(d.index(z, y, x), i);
        prop_assert_eq!(d.coords(i), (z, y, x));
        let plane = g.slice(z).unwrap();
        prop_assert_eq!(plane.get(0, y, x) as usize, i);
        Ok(())
    })
}

pub fn augmented_boxes_valid_and_bounded(cases: u32) -> Result<(), String> {
    let s = (dims_strategy(4, 1).prop_map(|d| d.depth), 4usize..80, 4usize..80).prop_flat_map(|(depth, h, w)| {
        (
            Just(Dims::new(depth, h, w).unwrap()),
            0..depth,
            region_in(h, w),
            1usize..8,
            prop_oneof![Just(0.0), Just(0.01), Just(0.1), 0.0f64..=0.5],
            any::<u64>(),
            any::<bool>(),
            any::<bool>(),
        )
    });
    run(cases, s, |(d, z, r, n, ratio, seed, translate, box_basis)| {
        let bbox = Box2::from(r).at_slice(z);
        let cfg = PromptAugConfig {
            n,
            ratio,
            seed,
            mode: if translate { ShiftMode::Translate } else { ShiftMode::Corner },
            basis: if box_basis { ShiftBasis::Box } else { ShiftBasis::Image },
        };
        let out = augment_prompts(&bbox, &cfg, d).unwrap();
        prop_assert_eq!(out.len(), n);
        let by = cfg.shift_bound(&bbox, d, 1) as usize;
        let bx = cfg.shift_bound(&bbox, d, 2) as usize;
        for b in &out {
            prop_assert!(b.fits(d));
            prop_assert_eq!((b.min[0], b.max[0]), (z, z));
            prop_assert!(b.min[1].abs_diff(bbox.min[1]) <= by && b.max[1].abs_diff(bbox.max[1]) <= by);
            prop_assert!(b.min[2].abs_diff(bbox.min[2]) <= bx && b.max[2].abs_diff(bbox.max[2]) <= bx);
            if ratio == 0.0 {
                prop_assert_eq!(b, &bbox);
            }
        }
        Ok(())
    })
}

pub fn relative_offset_bounded_odd(cases: u32) -> Result<(), String> {
    let s = (1usize..8).prop_flat_map(|k| (vec(-50f64..50.0, k), vec(-50f64..50.0, k), 1e-3f64..1e3));
    run(cases, s, |(a, b, r)| {
        let (va, vb) = (LatentVector::new(a).unwrap(), LatentVector::new(b).unwrap());
        let ab = relative_offset(&va, &vb, r).unwrap();
        let ba = relative_offset(&vb, &va, r).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            prop_assert!(x.abs() < r);
            prop_assert_eq!(*x, -*y);
        }
        Ok(())
    })
}

pub fn synthetic_backend_deterministic(cases: u32) -> Result<(), String> {
    let s = (4usize..24, 4usize..24).prop_flat_map(|(h, w)| (Just((h, w)), vec(0u8..=1, h * w), region_in(h, w), any::<u64>()));
    run(cases, s, |((h, w), gt, r, seed)| {
        let gt = mask(Dims::new(1, h, w).unwrap(), gt);
        let req = SegmentRequest {
            id: 1,
            height: h,
            width: w,
            slice: vec![0.0; h * w],
            prompt: Box2::from(r),
        };
        let cfg = SyntheticConfig::default();
        let a = synthetic_segment(&req, &gt, seed, &cfg).unwrap();
        let b = synthetic_segment(&req, &gt, seed, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.prob.iter().all(|p| (0.0..=1.0).contains(p)));
        Ok(())
    })
}

pub fn entropy_symmetric(cases: u32) -> Result<(), String> {
    let s = prop_oneof![0u32..=(1 << 20), Just(0), Just(1 << 20), Just(1 << 19)];
    run(cases, s, |k| {
        let p = f64::from(k) / f64::from(1u32 << 20);
        let (a, b) = (binary_entropy(p), binary_entropy(1.0 - p));
        prop_assert!((a - b).abs() <= 1e-15, "{} vs {}", a, b);
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&a));
        let pm = ProbMap::new(Dims::new(1, 1, 2).unwrap(), Spacing::default(), vec![p, 1.0 - p]).unwrap();
        let u = entropy_map(&pm);
        prop_assert!((u.data()[0] - u.data()[1]).abs() <= 1e-15);
        Ok(())
    })
}

pub fn entropy_zero_iff_unanimous(cases: u32) -> Result<(), String> {
    let s = (1usize..9, 1usize..40).prop_flat_map(|(n, len)| vec(vec(0u8..=1, len), n));
    run(cases, s, |votes| {
        let len = votes[0].len();
        let d = Dims::new(1, 1, len).unwrap();
        let preds: Vec<ProbMap<f64>> = votes
            .iter()
            .map(|v| ProbMap::new(d, Spacing::default(), v.iter().map(|&b| f64::from(b)).collect()).unwrap())
            .collect();
        let u = entropy_map(&ensemble(&preds).unwrap());
        for i in 0..len {
            let unanimous = votes.iter().all(|v| v[i] == votes[0][i]);
            prop_assert_eq!(u.data()[i] == 0.0, unanimous);
        }
        Ok(())
    })
}

pub fn threshold_monotone_in_segmented_area(cases: u32) -> Result<(), String> {
    let s = (vec(0f64..=std::f64::consts::LN_2, 1..64), 1usize..200, 0usize..250, 0usize..250);
    run(cases, s, |(u, s_b, a, b)| {
        let (s1, s2) = (a.min(b), a.max(b));
        let d = Dims::new(1, 1, u.len()).unwrap();
        let um = UncertaintyMap::new(d, Spacing::default(), u.clone()).unwrap();
        let region = BoundingBox::full(d);
        let t1 = class_threshold(&um, &region, s1, s_b).unwrap();
        let t2 = class_threshold(&um, &region, s2, s_b).unwrap();
        let lo = u.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(t1 <= t2);
        prop_assert!(lo <= t1 && t2 <= hi);
        Ok(())
    })
}

pub fn unc_mask_monotone_in_threshold(cases: u32) -> Result<(), String> {
    let s = (vec(0f64..1.0, 1..64), 0f64..1.0, 0f64..1.0);
    run(cases, s, |(u, a, b)| {
        let d = Dims::new(1, 1, u.len()).unwrap();
        let um = UncertaintyMap::new(d, Spacing::default(), u).unwrap();
        let (t1, t2) = (a.min(b), a.max(b));
        let m1 = uncertainty_mask(&um, t1);
        let m2 = uncertainty_mask(&um, t2);
        prop_assert!(m1.count() >= m2.count());
        for i in 0..m1.data().len() {
            prop_assert!(m1.is_set(i) || !m2.is_set(i));
        }
        Ok(())
    })
}

pub fn identical_votes_give_empty_unc_mask(cases: u32) -> Result<(), String> {
    let s = (1usize..8, dims_strategy(1, 10)).prop_flat_map(|(n, d)| (Just(n), Just(d), vec(0u8..=1, d.len()), any::<bool>()));
    run(cases, s, |(n, d, bits, fixed)| {
        let p = ProbMap::new(d, Spacing::default(), bits.iter().map(|&b| f64::from(b)).collect()).unwrap();
        let preds = vec![p; n];
        let mode = if fixed { ThresholdMode::Fixed } else { ThresholdMode::ClassSpecific };
        let res = analyze(&preds, &BoundingBox::full(d), mode, 0.5).unwrap();
        prop_assert!(res.unc_mask.is_empty_mask());
        prop_assert_eq!(res.t_unc, 0.0);
        for t in [0.0, 0.1, 1.0] {
            prop_assert!(uncertainty_mask(&res.unc, t).is_empty_mask());
        }
        Ok(())
    })
}

pub fn ur_keeps_target_drops_background(cases: u32) -> Result<(), String> {
    run(cases, fixture_strategy(), |f| {
        let (image, ens, unc, region, cfg) = fixture_inputs(&f);
        let out = rectify_ur_in(&image, &ens, &unc, &cfg, &region).unwrap();
        let part = partition_regions_in(&ens, &unc, &region).unwrap();
        let fallback = part.target.is_empty_mask();
        for i in 0..out.data().len() {
            if part.target.is_set(i) {
                prop_assert!(out.is_set(i));
            }
            if part.background.is_set(i) {
                prop_assert!(!out.is_set(i));
            }
            let (_, y, x) = out.dims().coords(i);
            if !region.contains(0, y, x) || fallback {
                prop_assert_eq!(out.is_set(i), ens.is_set(i));
            }
        }
        Ok(())
    })
}

pub fn fp_ensemble_fn_nested(cases: u32) -> Result<(), String> {
    run(cases, mask_pair(), |(d, e, u)| {
        let (e, u) = (mask(d, e), mask(d, u));
        let fp = rectify_fp(&e, &u).unwrap();
        let fnc = rectify_fn(&e, &u).unwrap();
        for i in 0..d.len() {
            prop_assert!(!fp.is_set(i) || e.is_set(i));
            prop_assert!(!e.is_set(i) || fnc.is_set(i));
        }
        Ok(())
    })
}

pub fn fpnc_involution(cases: u32) -> Result<(), String> {
    run(cases, mask_pair(), |(d, e, u)| {
        let (e, u) = (mask(d, e), mask(d, u));
        let once = rectify_fpnc(&e, &u).unwrap();
        prop_assert_eq!(&rectify_fpnc(&once, &u).unwrap(), &e);
        for i in 0..d.len() {
            prop_assert_eq!(once.is_set(i) != e.is_set(i), u.is_set(i));
        }
        Ok(())
    })
}

pub fn ur_invariant_under_affine_uncertainty(cases: u32) -> Result<(), String> {
    let s = fixture_strategy().prop_flat_map(|f| {
        let n = f.height() * f.width();
        (Just(f), vec(0u32..=710, n), -3i32..=3, 0u32..=2048)
    });
    run(cases, s, |(f, k, e, shift)| {
        let (image, ens, _, region, cfg) = fixture_inputs(&f);
        let d = image.dims();
        let u: Vec<f64> = k.iter().map(|&k| f64::from(k) / 1024.0).collect();
        let (a, b) = (2f64.powi(e), f64::from(shift) / 1024.0);
        let v: Vec<f64> = u.iter().map(|&x| a * x + b).collect();
        let s_b = region.indices(d).count();
        let s_y = region.indices(d).filter(|&i| ens.is_set(i)).count();
        let mk = |vals: Vec<f64>| {
            let um = UncertaintyMap::new(d, Spacing::default(), vals).unwrap();
            let t = class_threshold(&um, &region, s_y, s_b).unwrap();
            uncertainty_mask_in(&um, t, &region)
        };
        let (m1, m2) = (mk(u), mk(v));
        prop_assert_eq!(&m1, &m2);
        let o1 = rectify_ur_in(&image, &ens, &m1, &cfg, &region).unwrap();
        let o2 = rectify_ur_in(&image, &ens, &m2, &cfg, &region).unwrap();
        prop_assert_eq!(o1, o2);
        prop_assert!(threshold_from_range(0.0, 1.0, s_y, s_b).is_ok());
        Ok(())
    })
}

pub fn partition_exact(cases: u32) -> Result<(), String> {
    let s = mask_pair().prop_flat_map(|(d, e, u)| (Just((d, e, u)), region_in(d.height, d.width), 0..d.depth, 0..d.depth));
    run(cases, s, |((d, e, u), r, za, zb)| {
        let (e, u) = (mask(d, e), mask(d, u));
        let region = BoundingBox::new([za.min(zb), r[0], r[1]], [za.max(zb), r[2], r[3]]).unwrap();
        let p = partition_regions_in(&e, &u, &region).unwrap();
        let mut covered = 0;
        for i in 0..d.len() {
            let (z, y, x) = d.coords(i);
            let n = [&p.target, &p.background, &p.uncertain].iter().filter(|m| m.is_set(i)).count();
            if region.contains(z, y, x) {
                prop_assert_eq!(n, 1);
                covered += 1;
                prop_assert_eq!(p.target.is_set(i), e.is_set(i) && !u.is_set(i));
                prop_assert_eq!(p.background.is_set(i), !e.is_set(i) && !u.is_set(i));
            } else {
                prop_assert_eq!(n, 0);
            }
        }
        prop_assert_eq!(p.target.count() + p.background.count() + p.uncertain.count(), covered);
        Ok(())
    })
}

pub fn dsc_symmetric_bounded(cases: u32) -> Result<(), String> {
    run(cases, mask_pair(), |(d, g, s)| {
        let (g, s) = (mask(d, g), mask(d, s));
        let a = dsc(&g, &s).unwrap();
        prop_assert_eq!(a, dsc(&s, &g).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(dsc(&g, &g).unwrap(), 1.0);
        Ok(())
    })
}

pub fn dsc_permutation_invariant(cases: u32) -> Result<(), String> {
    let s = mask_pair().prop_flat_map(|(d, g, s)| {
        let idx: Vec<usize> = (0..d.len()).collect();
        (Just((d, g, s)), Just(idx).prop_shuffle())
    });
    run(cases, s, |((d, g, s), perm)| {
        let pg: Vec<u8> = perm.iter().map(|&i| g[i]).collect();
        let ps: Vec<u8> = perm.iter().map(|&i| s[i]).collect();
        prop_assert_eq!(dsc(&mask(d, g), &mask(d, s)).unwrap(), dsc(&mask(d, pg), &mask(d, ps)).unwrap());
        Ok(())
    })
}
