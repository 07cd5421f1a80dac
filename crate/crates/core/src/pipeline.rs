//! End-to-end orchestration: boxes, augmented prompts, backend calls,
//! ensembling, uncertainty, rectification, scoring and artifact output.
//!
//! The unit of work is one `(case, organ, slice)`. Every random draw is keyed
//! by those coordinates, so results do not depend on the number of workers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, evaluate_case, sort_records, EvalRecord, Method, RecordParams, ReportFormat};
use crate::prompt::{augment_prompts, bbox_from_mask, simulate_manual_prompt, BoundingBox, Box2, PromptAugConfig, PromptError, ShiftBasis, ShiftMode};
use crate::rectify::{rectify, LowerBoundMode, RectifyConfig, RectifyError, RectifyMode, ThresholdMode};
use crate::rng::{Purpose, StreamKey};
use crate::segmenter::{ProcessPool, SegmentError, SegmentRequest, Segmenter, SyntheticConfig, SyntheticSegmenter, DEFAULT_TIMEOUT};
use crate::uncertainty::{analyze, binarize, UncertaintyError};
use crate::volume::{
    normalize_intensity, read_uvol, write_uvol, BinaryMask, Dims, Grid, ProbMap, UncertaintyMap, UvolError, Volume,
    VolumeError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Uvol { path: String, source: UvolError },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Rectify(#[from] RectifyError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Report(Box<eval::EvalError>),
}

impl From<eval::EvalError> for PipelineError {
    fn from(e: eval::EvalError) -> Self {
        PipelineError::Report(Box::new(e))
    }
}

impl PipelineError {
    pub fn is_backend(&self) -> bool {
        matches!(self, PipelineError::Segment(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn uvol_err(path: &Path) -> impl FnOnce(UvolError) -> PipelineError + '_ {
    move |source| PipelineError::Uvol {
        path: path.display().to_string(),
        source,
    }
}

/// Where predictions come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    /// Built-in deterministic stand-in that degrades the ground truth.
    Synthetic,
    /// Child process speaking the line protocol, split on whitespace.
    Exec(Vec<String>),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "builtin:synthetic" {
            return Ok(Self::Synthetic);
        }
        if let Some(cmd) = s.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err("exec backend needs a command".into());
            }
            return Ok(Self::Exec(argv));
        }
        Err(format!("unknown backend {s:?} (expected builtin:synthetic or exec:<command>)"))
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synthetic => f.write_str("builtin:synthetic"),
            Self::Exec(argv) => write!(f, "exec:{}", argv.join(" ")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Augmentation count, ratio and shift model. `aug.seed` is ignored;
    /// per-slice seeds are derived from `seed`.
    pub aug: PromptAugConfig,
    pub rectify: RectifyConfig,
    /// Box growth in voxels per side along (z, y, x).
    pub extension: [usize; 3],
    pub manual_max_shift: usize,
    /// Corner noise applied to ground-truth derived boxes to mimic a
    /// localization model.
    pub auto_shift: usize,
    /// Intensity window mapped to [0, 1].
    pub window: (f64, f64),
    pub backend: BackendSpec,
    pub synthetic: SyntheticConfig,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            aug: PromptAugConfig::default(),
            rectify: RectifyConfig::default(),
            extension: [2, 10, 10],
            manual_max_shift: 20,
            auto_shift: 3,
            window: (-500.0, 1000.0),
            backend: BackendSpec::Synthetic,
            synthetic: SyntheticConfig::default(),
            seed: 0,
            jobs: 1,
        }
    }
}

fn parse_list<T: FromStr, const N: usize>(v: &str) -> Result<[T; N], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated values, got {v:?}"));
    }
    let mut out = Vec::with_capacity(N);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("bad value {p:?}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{key}: {e}"))
}

impl PipelineConfig {
    /// Config keys, matching the long CLI flag names.
    pub const KEYS: [&'static str; 17] = [
        "n",
        "ratio",
        "mode",
        "alpha-h",
        "threshold-mode",
        "fixed-fraction",
        "lower-bound",
        "seed",
        "jobs",
        "backend",
        "extension",
        "manual-max-shift",
        "auto-shift",
        "window",
        "shift-mode",
        "shift-basis",
        "synthetic-noise",
    ];

    /// Sets one option by name. Underscores and dashes are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        let key = key.trim().replace('_', "-");
        let v = value.trim();
        let r: Result<(), String> = (|| {
            match key.as_str() {
                "n" => self.aug.n = parse_value(&key, v)?,
                "ratio" => self.aug.ratio = parse_value(&key, v)?,
                "mode" => self.rectify.mode = v.parse::<RectifyMode>()?,
                "alpha-h" => self.rectify.alpha_h = parse_value(&key, v)?,
                "threshold-mode" => self.rectify.threshold_mode = v.parse::<ThresholdMode>()?,
                "fixed-fraction" => self.rectify.fixed_fraction = parse_value(&key, v)?,
                "lower-bound" => self.rectify.lower_bound = v.parse::<LowerBoundMode>()?,
                "seed" => self.seed = parse_value(&key, v)?,
                "jobs" => self.jobs = parse_value(&key, v)?,
                "backend" => self.backend = v.parse()?,
                "extension" => self.extension = parse_list(v)?,
                "manual-max-shift" => self.manual_max_shift = parse_value(&key, v)?,
                "auto-shift" => self.auto_shift = parse_value(&key, v)?,
                "window" => {
                    let [lo, hi] = parse_list::<f64, 2>(v)?;
                    self.window = (lo, hi);
                }
                "shift-mode" => {
                    self.aug.mode = match v {
                        "corner" => ShiftMode::Corner,
                        "translate" => ShiftMode::Translate,
                        _ => return Err(format!("unknown shift mode {v:?}")),
                    }
                }
                "shift-basis" => {
                    self.aug.basis = match v {
                        "image" => ShiftBasis::Image,
                        "box" => ShiftBasis::Box,
                        _ => return Err(format!("unknown shift basis {v:?}")),
                    }
                }
                "synthetic-noise" => self.synthetic.flip_prob = parse_value(&key, v)?,
                _ => return Err(format!("unknown key {key:?}")),
            }
            Ok(())
        })();
        r.map_err(PipelineError::Config)
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_config_text(&mut self, text: &str) -> Result<(), PipelineError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| PipelineError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_config_file(&mut self, path: &Path) -> Result<(), PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        self.apply_config_text(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.aug.validate()?;
        self.rectify.validate()?;
        if self.jobs == 0 {
            return Err(PipelineError::Config("jobs must be at least 1".into()));
        }
        let (lo, hi) = self.window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(PipelineError::Config(format!("bad intensity window ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.synthetic.flip_prob) {
            return Err(PipelineError::Config("synthetic noise outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn record_params(&self) -> RecordParams {
        RecordParams {
            n: self.aug.n,
            ratio: self.aug.ratio,
            alpha_h: self.rectify.alpha_h,
            threshold_mode: self.rectify.threshold_mode.as_str().to_string(),
            lower_bound: self.rectify.lower_bound.as_str().to_string(),
        }
    }
}

/// A live backend shared by all work units.
pub enum Backend {
    Synthetic(SyntheticConfig),
    Process(ProcessPool),
}

impl Backend {
    pub fn open(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        Ok(match &cfg.backend {
            BackendSpec::Synthetic => Backend::Synthetic(cfg.synthetic),
            BackendSpec::Exec(argv) => Backend::Process(ProcessPool::spawn(argv.clone(), cfg.jobs, DEFAULT_TIMEOUT)?),
        })
    }

    /// `gt_plane` and `seed` only feed the synthetic backend.
    fn segment(&self, req: &SegmentRequest, gt_plane: &BinaryMask, seed: u64) -> Result<ProbMap<f32>, PipelineError> {
        let resp = match self {
            Backend::Synthetic(c) => SyntheticSegmenter::new(gt_plane.clone(), seed, *c).segment(req)?,
            Backend::Process(pool) => pool.segment(req)?,
        };
        Ok(resp.into_prob_map(gt_plane.spacing())?)
    }
}

pub struct Case {
    pub id: String,
    /// Raw intensities (HU for CT).
    pub image: Volume<f32>,
    pub gt: BTreeMap<String, BinaryMask>,
    /// Externally supplied boxes per organ; ground-truth boxes otherwise.
    pub boxes: Option<BTreeMap<String, BoundingBox>>,
}

impl Case {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (organ, m) in &self.gt {
            if m.dims() != self.image.dims() {
                return Err(PipelineError::Input(format!(
                    "case {}: mask {organ} has dims {:?}, image has {:?}",
                    self.id,
                    m.dims().as_array(),
                    self.image.dims().as_array()
                )));
            }
        }
        if let Some(boxes) = &self.boxes {
            for (organ, b) in boxes {
                b.validate(self.image.dims())
                    .map_err(|e| PipelineError::Input(format!("case {}: box for {organ}: {e}", self.id)))?;
            }
        }
        Ok(())
    }

    /// Loads `image` plus every `*.uvol` mask in `gt_dir`, named by file stem.
    pub fn load(id: &str, image: &Path, gt_dir: &Path) -> Result<Self, PipelineError> {
        let img = read_uvol(image).map_err(uvol_err(image))?.into_volume::<f32>().map_err(uvol_err(image))?;
        let mut gt = BTreeMap::new();
        let entries = fs::read_dir(gt_dir).map_err(io_err(gt_dir))?;
        for entry in entries {
            let path = entry.map_err(io_err(gt_dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("uvol") {
                continue;
            }
            let organ = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| PipelineError::Input(format!("bad mask file name {}", path.display())))?
                .to_string();
            let mask = read_uvol(&path).map_err(uvol_err(&path))?.into_mask().map_err(uvol_err(&path))?;
            gt.insert(organ, mask);
        }
        let case = Case {
            id: id.to_string(),
            image: img,
            gt,
            boxes: None,
        };
        case.validate()?;
        Ok(case)
    }
}

/// Organ to box map read from JSON `{"organ": [z0, y0, x0, z1, y1, x1]}`.
pub fn read_box_file(path: &Path) -> Result<BTreeMap<String, BoundingBox>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

pub struct Dataset {
    pub cases: Vec<Case>,
}

impl Dataset {
    /// Reads every `<root>/<case>/image.uvol` with masks in `<root>/<case>/gt/`
    /// and optional boxes in `<root>/<case>/boxes.json`. Cases are sorted by id.
    pub fn load_dir(root: &Path) -> Result<Self, PipelineError> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(io_err(root))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("image.uvol").is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(PipelineError::Input(format!("no cases under {}", root.display())));
        }
        let cases = dirs
            .iter()
            .map(|d| {
                let id = d.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                let mut case = Case::load(&id, &d.join("image.uvol"), &d.join("gt"))?;
                let boxes = d.join("boxes.json");
                if boxes.is_file() {
                    case.boxes = Some(read_box_file(&boxes)?);
                    case.validate()?;
                }
                Ok(case)
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(Dataset { cases })
    }

    /// Writes the layout read by [`Dataset::load_dir`].
    pub fn write_dir(&self, root: &Path) -> Result<(), PipelineError> {
        for case in &self.cases {
            let dir = root.join(&case.id);
            let image = dir.join("image.uvol");
            write_uvol(&case.image, &image).map_err(uvol_err(&image))?;
            for (organ, mask) in &case.gt {
                let p = dir.join("gt").join(format!("{organ}.uvol"));
                write_uvol(mask, &p).map_err(uvol_err(&p))?;
            }
            if let Some(boxes) = &case.boxes {
                let p = dir.join("boxes.json");
                let json = serde_json::to_string(boxes).expect("boxes serialize");
                fs::write(&p, json).map_err(io_err(&p))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    /// Organ had an empty ground-truth mask.
    Skipped,
    Backend,
    Invalid,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunFailure {
    pub case: String,
    pub organ: String,
    pub kind: FailureKind,
    pub message: String,
}

impl RunFailure {
    pub fn whole_run(message: String) -> Self {
        Self {
            case: "*".into(),
            organ: "*".into(),
            kind: FailureKind::Invalid,
            message,
        }
    }
}

/// Per-slice threshold statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub case: String,
    pub organ: String,
    pub z: usize,
    /// Threshold region (the unaugmented prompt).
    pub region: Box2,
    pub s_y: usize,
    pub s_b: usize,
    pub t_unc: f64,
    pub u_min: f64,
    pub u_max: f64,
}

/// Everything produced for one organ.
pub struct OrganRun {
    pub organ: String,
    /// Final, extended and noised 3D box.
    pub bbox: BoundingBox,
    pub prob: ProbMap<f32>,
    pub unc: UncertaintyMap<f32>,
    /// High-uncertainty mask.
    pub unc_mask: BinaryMask,
    pub masks: BTreeMap<Method, BinaryMask>,
    pub slices: Vec<SliceStats>,
    pub records: Vec<EvalRecord>,
}

impl OrganRun {
    /// Writes `<dir>/{prob,unc,mask_<method>}.uvol`.
    pub fn persist(&self, dir: &Path) -> Result<(), PipelineError> {
        let p = dir.join("prob.uvol");
        write_uvol(&self.prob, &p).map_err(uvol_err(&p))?;
        let p = dir.join("unc.uvol");
        write_uvol(&self.unc, &p).map_err(uvol_err(&p))?;
        for (method, mask) in &self.masks {
            let p = dir.join(format!("mask_{method}.uvol"));
            write_uvol(mask, &p).map_err(uvol_err(&p))?;
        }
        Ok(())
    }
}

pub struct CaseRun {
    pub case: String,
    pub organs: Vec<OrganRun>,
    pub failures: Vec<RunFailure>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetRun {
    pub records: Vec<EvalRecord>,
    pub slices: Vec<SliceStats>,
    pub failures: Vec<RunFailure>,
}

impl DatasetRun {
    pub fn has_backend_failure(&self) -> bool {
        self.failures.iter().any(|f| f.kind == FailureKind::Backend)
    }
}

struct SliceOut {
    prob: Vec<f32>,
    unc: Vec<f32>,
    unc_mask: Vec<u8>,
    masks: BTreeMap<Method, Vec<u8>>,
    stats: SliceStats,
}

/// Box handed to the backend for `organ`: the external box if one is given,
/// the tight ground-truth box otherwise; then extended, then (for derived
/// boxes only) perturbed in-plane by `auto_shift`.
pub fn organ_box(case: &Case, organ: &str, gt: &BinaryMask, cfg: &PipelineConfig) -> Result<BoundingBox, PipelineError> {
    let dims = gt.dims();
    if let Some(b) = case.boxes.as_ref().and_then(|m| m.get(organ)) {
        return Ok(extend_box(b, cfg.extension, dims));
    }
    let extended = bbox_from_mask(gt, cfg.extension)?;
    let seed = StreamKey {
        master: cfg.seed,
        case: &case.id,
        organ,
        slice: u64::MAX,
        purpose: Purpose::AutoPrompt,
    }
    .seed();
    Ok(simulate_manual_prompt(&extended, cfg.auto_shift, seed, dims))
}

/// Grows `b` by `ext` on both sides of each axis, clamped to `dims`.
pub fn extend_box(b: &BoundingBox, ext: [usize; 3], dims: Dims) -> BoundingBox {
    let d = dims.as_array();
    let mut out = *b;
    for a in 0..3 {
        out.min[a] = b.min[a].saturating_sub(ext[a]);
        out.max[a] = (b.max[a] + ext[a]).min(d[a] - 1);
    }
    out
}

fn run_slice(
    case: &str,
    organ: &str,
    z: usize,
    image: &Volume<f32>,
    gt: &BinaryMask,
    bbox: &BoundingBox,
    cfg: &PipelineConfig,
    backend: &Backend,
) -> Result<SliceOut, PipelineError> {
    let dims = image.dims();
    let plane_dims = dims.plane();
    let key = |purpose| {
        StreamKey {
            master: cfg.seed,
            case,
            organ,
            slice: z as u64,
            purpose,
        }
        .seed()
    };
    let img = image.slice(z)?;
    let gt_plane = gt.slice(z)?;
    let slice = img.data().to_vec();
    let backend_seed = key(Purpose::Backend);
    let call = |prompt: &BoundingBox, id: u64| {
        let req = SegmentRequest {
            id,
            height: dims.height,
            width: dims.width,
            slice: slice.clone(),
            prompt: prompt.plane_box(),
        };
        backend.segment(&req, &gt_plane, backend_seed)
    };

    let region = bbox.plane_box().at_slice(0);
    let aug = PromptAugConfig {
        seed: key(Purpose::Augment),
        ..cfg.aug
    };
    let prompts = augment_prompts(&region, &aug, plane_dims)?;
    let preds = prompts
        .iter()
        .enumerate()
        .map(|(i, p)| call(p, i as u64 + 1))
        .collect::<Result<Vec<_>, _>>()?;
    let auto = call(&region, 0)?;

    let res = analyze(&preds, &region, cfg.rectify.threshold_mode, cfg.rectify.fixed_fraction)?;

    let mut masks = BTreeMap::new();
    masks.insert(Method::Auto, binarize(&auto, 0.5)?.into_grid().into_data());
    masks.insert(Method::Ensemble, res.mask.data().to_vec());
    for mode in RectifyMode::ALL {
        let c = RectifyConfig { mode, ..cfg.rectify };
        let out = rectify(&img, &res.mask, &res.unc_mask, &c, &region)?;
        let method = match mode {
            RectifyMode::Ur => Method::Ur,
            RectifyMode::Fpc => Method::Fpc,
            RectifyMode::Fnc => Method::Fnc,
            RectifyMode::Fpnc => Method::Fpnc,
        };
        masks.insert(method, out.into_grid().into_data());
    }
    let manual = if gt_plane.is_empty_mask() {
        vec![0; plane_dims.len()]
    } else {
        let tight = bbox_from_mask(&gt_plane, [0, 0, 0])?;
        let p = simulate_manual_prompt(&tight, cfg.manual_max_shift, key(Purpose::ManualPrompt), plane_dims);
        let prob = call(&p, u64::from(u32::MAX))?;
        binarize(&prob, 0.5)?.into_grid().into_data()
    };
    masks.insert(Method::Manual, manual);

    Ok(SliceOut {
        prob: res.prob.data().to_vec(),
        unc: res.unc.data().to_vec(),
        unc_mask: res.unc_mask.data().to_vec(),
        masks,
        stats: SliceStats {
            case: case.to_string(),
            organ: organ.to_string(),
            z,
            region: region.plane_box(),
            s_y: res.s_y,
            s_b: res.s_b,
            t_unc: f64::from(res.t_unc),
            u_min: f64::from(res.u_min),
            u_max: f64::from(res.u_max),
        },
    })
}

/// Runs one organ over every slice of its box.
pub fn run_organ(
    case: &Case,
    image: &Volume<f32>,
    organ: &str,
    cfg: &PipelineConfig,
    backend: &Backend,
) -> Result<OrganRun, PipelineError> {
    let gt = case
        .gt
        .get(organ)
        .ok_or_else(|| PipelineError::Input(format!("no mask for organ {organ}")))?;
    let bbox = organ_box(case, organ, gt, cfg)?;
    let dims = image.dims();
    let outs = (bbox.min[0]..=bbox.max[0])
        .into_par_iter()
        .map(|z| run_slice(&case.id, organ, z, image, gt, &bbox, cfg, backend))
        .collect::<Result<Vec<_>, _>>()?;

    let plane = dims.plane_len();
    let mut prob = vec![0.0f32; dims.len()];
    let mut unc = vec![0.0f32; dims.len()];
    let mut unc_mask = vec![0u8; dims.len()];
    let mut masks: BTreeMap<Method, Vec<u8>> = Method::ALL.iter().map(|&m| (m, vec![0u8; dims.len()])).collect();
    let mut slices = Vec::with_capacity(outs.len());
    for out in outs {
        let at = out.stats.z * plane;
        let dst = at..at + plane;
        prob[dst.clone()].copy_from_slice(&out.prob);
        unc[dst.clone()].copy_from_slice(&out.unc);
        unc_mask[dst.clone()].copy_from_slice(&out.unc_mask);
        for (m, v) in &out.masks {
            masks.get_mut(m).expect("all methods present")[dst.clone()].copy_from_slice(v);
        }
        slices.push(out.stats);
    }
    let spacing = image.spacing();
    let masks = masks
        .into_iter()
        .map(|(m, v)| Ok((m, BinaryMask::new(dims, spacing, v)?)))
        .collect::<Result<BTreeMap<_, _>, VolumeError>>()?;
    let records = evaluate_case(&case.id, organ, gt, &masks, &cfg.record_params())?;
    Ok(OrganRun {
        organ: organ.to_string(),
        bbox,
        prob: ProbMap::new(dims, spacing, prob)?,
        unc: UncertaintyMap::new(dims, spacing, unc)?,
        unc_mask: BinaryMask::new(dims, spacing, unc_mask)?,
        masks,
        slices,
        records,
    })
}

fn normalized(case: &Case, cfg: &PipelineConfig) -> Result<Volume<f32>, PipelineError> {
    Ok(normalize_intensity(&case.image, cfg.window.0 as f32, cfg.window.1 as f32)?)
}

fn failure(case: &str, organ: &str, e: &PipelineError) -> RunFailure {
    RunFailure {
        case: case.to_string(),
        organ: organ.to_string(),
        kind: if e.is_backend() {
            FailureKind::Backend
        } else {
            FailureKind::Invalid
        },
        message: e.to_string(),
    }
}

fn skipped(case: &str, organ: &str) -> RunFailure {
    RunFailure {
        case: case.to_string(),
        organ: organ.to_string(),
        kind: FailureKind::Skipped,
        message: "empty ground-truth mask".into(),
    }
}

/// Runs every organ of one case. Organs with an empty mask are skipped and
/// organs whose backend fails are recorded; neither stops the others.
pub fn run_case(case: &Case, cfg: &PipelineConfig, backend: &Backend) -> Result<CaseRun, PipelineError> {
    cfg.validate()?;
    case.validate()?;
    let image = normalized(case, cfg)?;
    let results: Vec<Result<Option<OrganRun>, RunFailure>> = case
        .gt
        .par_iter()
        .map(|(organ, gt)| {
            if gt.is_empty_mask() {
                return Err(skipped(&case.id, organ));
            }
            run_organ(case, &image, organ, cfg, backend)
                .map(Some)
                .map_err(|e| failure(&case.id, organ, &e))
        })
        .collect();
    let mut organs = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(Some(o)) => organs.push(o),
            Ok(None) => {}
            Err(f) => failures.push(f),
        }
    }
    Ok(CaseRun {
        case: case.id.clone(),
        organs,
        failures,
    })
}

/// Runs the whole dataset on a pool of `cfg.jobs` threads. With `out_dir`,
/// per-organ artifacts go to `<out_dir>/<case>/<organ>/`. Outputs are sorted
/// so they do not depend on scheduling.
pub fn run_dataset(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    backend: &Backend,
    out_dir: Option<&Path>,
) -> Result<DatasetRun, PipelineError> {
    cfg.validate()?;
    for case in &dataset.cases {
        case.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let units: Vec<(&Case, &String)> = dataset
        .cases
        .iter()
        .flat_map(|c| c.gt.keys().map(move |o| (c, o)))
        .collect();
    let images = pool.install(|| {
        dataset
            .cases
            .par_iter()
            .map(|c| Ok((c.id.as_str(), normalized(c, cfg)?)))
            .collect::<Result<BTreeMap<_, _>, PipelineError>>()
    })?;

    type Unit = Result<(Vec<EvalRecord>, Vec<SliceStats>), RunFailure>;
    let results: Vec<Unit> = pool.install(|| {
        units
            .par_iter()
            .map(|&(case, organ)| {
                if case.gt[organ].is_empty_mask() {
                    return Err(skipped(&case.id, organ));
                }
                let run = run_organ(case, &images[case.id.as_str()], organ, cfg, backend)
                    .and_then(|run| {
                        if let Some(dir) = out_dir {
                            run.persist(&dir.join(&case.id).join(organ))?;
                        }
                        Ok(run)
                    })
                    .map_err(|e| failure(&case.id, organ, &e))?;
                Ok((run.records, run.slices))
            })
            .collect()
    });

    let mut out = DatasetRun::default();
    for r in results {
        match r {
            Ok((records, slices)) => {
                out.records.extend(records);
                out.slices.extend(slices);
            }
            Err(f) => out.failures.push(f),
        }
    }
    sort_records(&mut out.records);
    out.slices.sort_by(|a, b| (&a.case, &a.organ, a.z).cmp(&(&b.case, &b.organ, b.z)));
    out.failures.sort();
    Ok(out)
}

pub fn render_slices_csv(slices: &[SliceStats]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["case", "organ", "z", "y0", "x0", "y1", "x1", "s_y", "s_b", "t_unc", "u_min", "u_max"])
        .expect("in-memory write");
    for s in slices {
        w.write_record([
            s.case.clone(),
            s.organ.clone(),
            s.z.to_string(),
            s.region.y0.to_string(),
            s.region.x0.to_string(),
            s.region.y1.to_string(),
            s.region.x1.to_string(),
            s.s_y.to_string(),
            s.s_b.to_string(),
            s.t_unc.to_string(),
            s.u_min.to_string(),
            s.u_max.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn render_failures_csv(failures: &[RunFailure]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["case", "organ", "kind", "message"]).expect("in-memory write");
    for f in failures {
        let kind = serde_json::to_value(f.kind).expect("kind serializes");
        w.write_record([&f.case, &f.organ, kind.as_str().unwrap_or_default(), &f.message])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Writes `report` (CSV) plus `report.md`, `summary.json`, `slices.csv` and
/// `failures.csv` next to it.
pub fn write_run_reports(run: &DatasetRun, report: &Path) -> Result<(), PipelineError> {
    eval::write_report(&run.records, report, ReportFormat::Csv)?;
    let dir = report.parent().unwrap_or(Path::new(""));
    eval::write_report(&run.records, dir.join("report.md"), ReportFormat::Markdown)?;
    eval::write_summary(&run.records, dir.join("summary.json"))?;
    let p = dir.join("slices.csv");
    fs::write(&p, render_slices_csv(&run.slices)).map_err(io_err(&p))?;
    let p = dir.join("failures.csv");
    fs::write(&p, render_failures_csv(&run.failures)).map_err(io_err(&p))?;
    Ok(())
}

/// Reads a mask or probability artifact back as a grid of `f32`.
pub fn read_f32_grid(path: &Path) -> Result<Grid<f32>, PipelineError> {
    read_uvol(path).map_err(uvol_err(path))?.into_f32().map_err(uvol_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Spacing;

    fn tiny_case() -> Case {
        let dims = Dims::new(6, 24, 24).unwrap();
        let s = Spacing::default();
        let mut img = vec![400.0f32; dims.len()];
        let mut gt = vec![0u8; dims.len()];
        for z in 2..4 {
            for y in 8..14 {
                for x in 9..15 {
                    let i = dims.index(z, y, x);
                    img[i] = 100.0;
                    gt[i] = 1;
                }
            }
        }
        Case {
            id: "c0".into(),
            image: Volume::new(dims, s, img).unwrap(),
            gt: BTreeMap::from([
                ("a".to_string(), BinaryMask::new(dims, s, gt).unwrap()),
                ("empty".to_string(), BinaryMask::zeros(dims, s)),
            ]),
            boxes: None,
        }
    }

    #[test]
    fn config_file_and_overrides() {
        let mut c = PipelineConfig::default();
        c.apply_config_text("# comment\nn = 5\nratio=0.05\nalpha_h = 1.3\nmode = fpc\nextension = 1, 2, 3\nwindow = -100, 200\n\n")
            .unwrap();
        assert_eq!(c.aug.n, 5);
        assert_eq!(c.aug.ratio, 0.05);
        assert_eq!(c.rectify.alpha_h, 1.3);
        assert_eq!(c.rectify.mode, RectifyMode::Fpc);
        assert_eq!(c.extension, [1, 2, 3]);
        assert_eq!(c.window, (-100.0, 200.0));
        c.set("n", "7").unwrap();
        assert_eq!(c.aug.n, 7);
        assert!(c.apply_config_text("bogus = 1").is_err());
        assert!(c.apply_config_text("n 3").is_err());
        assert!(c.set("backend", "grpc:x").is_err());
    }

    #[test]
    fn backend_spec_parsing() {
        assert_eq!("builtin:synthetic".parse::<BackendSpec>().unwrap(), BackendSpec::Synthetic);
        let e: BackendSpec = "exec:python3 bridge.py --x".parse().unwrap();
        assert_eq!(e, BackendSpec::Exec(vec!["python3".into(), "bridge.py".into(), "--x".into()]));
        assert_eq!(e.to_string(), "exec:python3 bridge.py --x");
        assert!("exec:".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn extend_box_clamps() {
        let dims = Dims::new(5, 10, 10).unwrap();
        let b = BoundingBox::new([1, 1, 8], [2, 3, 9]).unwrap();
        assert_eq!(extend_box(&b, [2, 10, 1], dims).to_array(), [0, 0, 7, 4, 9, 9]);
    }

    #[test]
    fn degenerate_pipeline_identity() {
        let case = tiny_case();
        let mut cfg = PipelineConfig::default();
        cfg.aug.n = 1;
        cfg.aug.ratio = 0.0;
        cfg.synthetic = SyntheticConfig::noiseless();
        let backend = Backend::open(&cfg).unwrap();
        let run = run_case(&case, &cfg, &backend).unwrap();
        assert_eq!(run.organs.len(), 1);
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].kind, FailureKind::Skipped);
        let o = &run.organs[0];
        assert_eq!(o.masks[&Method::Ensemble], o.masks[&Method::Auto]);
        if o.unc_mask.is_empty_mask() {
            assert_eq!(o.masks[&Method::Ur], o.masks[&Method::Auto]);
        }
        let empty_unc = BinaryMask::zeros(o.unc_mask.dims(), o.unc_mask.spacing());
        let image = normalized(&case, &cfg).unwrap();
        let ur = rectify(
            &image,
            &o.masks[&Method::Ensemble],
            &empty_unc,
            &cfg.rectify,
            &BoundingBox::full(image.dims()),
        )
        .unwrap();
        assert_eq!(ur, o.masks[&Method::Auto]);
    }

    #[test]
    fn artifacts_consistent() {
        let case = tiny_case();
        let cfg = PipelineConfig::default();
        let backend = Backend::open(&cfg).unwrap();
        let run = run_case(&case, &cfg, &backend).unwrap();
        let o = &run.organs[0];
        for s in &o.slices {
            let plane = o.unc.slice(s.z).unwrap();
            let ens = o.masks[&Method::Ensemble].slice(s.z).unwrap();
            let unc_mask = o.unc_mask.slice(s.z).unwrap();
            let ur = o.masks[&Method::Ur].slice(s.z).unwrap();
            for i in 0..plane.dims().len() {
                let (_, y, x) = plane.dims().coords(i);
                let inside = s.region.contains(y, x);
                assert_eq!(unc_mask.is_set(i), inside && plane.data()[i] > s.t_unc as f32);
                if ens.is_set(i) && !unc_mask.is_set(i) {
                    assert!(ur.is_set(i));
                }
            }
        }
        for r in &o.records {
            assert!((0.0..=1.0).contains(&r.dsc));
        }
    }

    #[test]
    fn parallelism_does_not_change_results() {
        let ds = Dataset {
            cases: vec![tiny_case()],
        };
        let mut a = PipelineConfig::default();
        a.aug.ratio = 0.1;
        let mut b = a.clone();
        b.jobs = 4;
        let backend = Backend::open(&a).unwrap();
        let ra = run_dataset(&ds, &a, &backend, None).unwrap();
        let rb = run_dataset(&ds, &b, &backend, None).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.records.len(), Method::ALL.len());
    }

    #[test]
    fn mismatched_mask_rejected() {
        let mut case = tiny_case();
        case.gt
            .insert("bad".into(), BinaryMask::zeros(Dims::new(1, 2, 2).unwrap(), Spacing::default()));
        assert!(matches!(case.validate(), Err(PipelineError::Input(_))));
    }
}
