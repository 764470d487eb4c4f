//! Synthetic patient-study corpus: procedurally rendered grayscale views with
//! verifiable lesions, templated free-text reports that name every positive
//! finding with a location word, multi-hot labels, and the screening /
//! subsampling stages of the training pipeline.

pub mod augment;
pub mod pgm;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::word_tokens;

pub use augment::{apply_image, augment, swap_left_right, AugmentParams, CROP_MARGIN};
pub use pgm::{read_pgm, write_pgm};

/// Square grayscale image, intensities in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(size: usize) -> Self {
        GrayImage { size, pixels: vec![0.0; size * size] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.size + x]
    }
}

// ── findings ──────────────────────────────────────────────────────────────

pub const NUM_CLASSES: usize = 6;

/// The six synthetic finding classes. `NoFinding` marks a clean study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Finding {
    DiskLeft,
    DiskRight,
    BarUpper,
    BarLower,
    HazeDiffuse,
    NoFinding,
}

impl Finding {
    pub const ALL: [Finding; NUM_CLASSES] = [
        Finding::DiskLeft,
        Finding::DiskRight,
        Finding::BarUpper,
        Finding::BarLower,
        Finding::HazeDiffuse,
        Finding::NoFinding,
    ];

    pub const LESIONS: [Finding; 5] = [
        Finding::DiskLeft,
        Finding::DiskRight,
        Finding::BarUpper,
        Finding::BarLower,
        Finding::HazeDiffuse,
    ];

    pub fn index(self) -> usize {
        match self {
            Finding::DiskLeft => 0,
            Finding::DiskRight => 1,
            Finding::BarUpper => 2,
            Finding::BarLower => 3,
            Finding::HazeDiffuse => 4,
            Finding::NoFinding => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Finding::DiskLeft => "disk-left",
            Finding::DiskRight => "disk-right",
            Finding::BarUpper => "bar-upper",
            Finding::BarLower => "bar-lower",
            Finding::HazeDiffuse => "haze-diffuse",
            Finding::NoFinding => "none",
        }
    }

    pub fn from_name(name: &str) -> Option<Finding> {
        Finding::ALL.iter().copied().find(|f| f.name() == name)
    }
}

// ── manifest ──────────────────────────────────────────────────────────────

pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_VAL: &str = "val";
pub const SPLIT_TEST: &str = "test";

/// One manifest line; view paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    pub views: Vec<String>,
    pub report: String,
    pub labels: Vec<u8>,
    pub split: String,
}

/// Axis-aligned pixel box, inclusive-exclusive, in canonical coordinates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LesionRecord {
    pub study_id: String,
    pub view: String,
    pub class: String,
    pub bbox: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<StudyRecord>,
    /// Directory all view paths are relative to.
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: StudyRecord = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?;
            if rec.labels.len() != NUM_CLASSES {
                return Err(Error::Data(format!(
                    "manifest line {}: expected {} labels, got {}",
                    i + 1,
                    NUM_CLASSES,
                    rec.labels.len()
                )));
            }
            records.push(rec);
        }
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Manifest { records, root })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for rec in &self.records {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn split(&self, tag: &str) -> Vec<&StudyRecord> {
        self.records.iter().filter(|r| r.split == tag).collect()
    }

    pub fn view_path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Remove every study whose report has fewer than 3 tokens.
pub fn screen(manifest: &Manifest) -> Manifest {
    let records = manifest
        .records
        .iter()
        .filter(|r| word_tokens(&r.report).len() >= 3)
        .cloned()
        .collect();
    Manifest { records, root: manifest.root.clone() }
}

/// Uniform sample without replacement of `ceil(ratio·N)` studies, in stable
/// (original) order. `ratio` must lie in `(0,1]`; `ratio == 1` is the identity.
pub fn label_ratio_sample<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<Vec<T>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("label ratio {ratio} outside (0, 1]")));
    }
    if ratio == 1.0 {
        return Ok(items.to_vec());
    }
    let k = (ratio * items.len() as f64).ceil() as usize;
    let mut indices: Vec<usize> = (0..items.len()).collect();
    let mut rng = derive_rng(seed, &[0x6c61_6265_6c72]);
    indices.shuffle(&mut rng);
    let mut chosen: Vec<usize> = indices.into_iter().take(k).collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| items[i].clone()).collect())
}

/// Deterministic sub-stream rng: every consumer mixes the global seed with
/// its own tags so results are independent of scheduling order.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        h ^= t.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
    }
    ChaCha8Rng::seed_from_u64(h)
}

// ── generation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub n_studies: usize,
    /// Canonical stored image side; the model consumes `canonical - 32`.
    pub canonical_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { n_studies: 100, canonical_size: 256 }
    }
}

/// A fully materialized study before it is written to disk.
#[derive(Debug, Clone)]
pub struct GeneratedStudy {
    pub study_id: String,
    pub views: Vec<GrayImage>,
    /// Per view, the rendered lesions with their canonical-space boxes.
    pub lesions: Vec<Vec<(Finding, [usize; 4])>>,
    pub report: String,
    pub labels: Vec<u8>,
    pub split: String,
}

struct LesionGeometry {
    finding: Finding,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    bump: f32,
    kind: LesionKind,
}

#[derive(Clone, Copy, PartialEq)]
enum LesionKind {
    Disk,
    Bar,
    Haze,
}

const REPORT_TEMPLATES: [(&str, [&str; 4]); 5] = [
    (
        "disk-left",
        [
            "round opacity in the left lung field .",
            "a bright disk is seen on the left side .",
            "focal disk like density at the left zone .",
            "left sided circular opacity noted .",
        ],
    ),
    (
        "disk-right",
        [
            "round opacity in the right lung field .",
            "a bright disk is seen on the right side .",
            "focal disk like density at the right zone .",
            "right sided circular opacity noted .",
        ],
    ),
    (
        "bar-upper",
        [
            "band like opacity across the upper zone .",
            "horizontal bar density in the upper field .",
            "upper zone shows a linear band .",
            "streak of increased density in the upper region .",
        ],
    ),
    (
        "bar-lower",
        [
            "band like opacity across the lower zone .",
            "horizontal bar density in the lower field .",
            "lower zone shows a linear band .",
            "streak of increased density in the lower region .",
        ],
    ),
    (
        "haze-diffuse",
        [
            "diffuse hazy opacity over the central region .",
            "widespread haze with diffuse ground glass pattern .",
            "diffuse veiling opacity is present .",
            "hazy diffuse shadowing of the mid zones .",
        ],
    ),
];

const NORMAL_TEMPLATES: [&str; 4] = [
    "no acute findings .",
    "clear fields bilaterally with no focal lesion .",
    "no focal abnormality seen .",
    "unremarkable study with normal appearance .",
];

const FILLER_TEMPLATES: [&str; 3] = [
    "cardiac silhouette is within normal limits .",
    "bony structures appear intact .",
    "no device hardware is present .",
];

/// Deterministically generate a corpus in memory. The same `(config, seed)`
/// always produces identical studies regardless of call order, because each
/// study derives its own rng stream.
pub fn generate_corpus(cfg: &GenConfig, seed: u64) -> Result<Vec<GeneratedStudy>> {
    if cfg.n_studies == 0 {
        return Err(Error::Config("corpus needs at least one study".to_string()));
    }
    if cfg.canonical_size <= CROP_MARGIN {
        return Err(Error::Config(format!(
            "canonical size {} too small for the {}-pixel crop margin",
            cfg.canonical_size, CROP_MARGIN
        )));
    }

    // split assignment: seeded shuffle, then 70/10/20 by position
    let mut order: Vec<usize> = (0..cfg.n_studies).collect();
    order.shuffle(&mut derive_rng(seed, &[0x73706c_6974]));
    let n_train = (cfg.n_studies as f64 * 0.7).floor() as usize;
    let n_val = (cfg.n_studies as f64 * 0.1).floor() as usize;
    let mut split_of = vec![SPLIT_TEST; cfg.n_studies];
    for (pos, &idx) in order.iter().enumerate() {
        split_of[idx] = if pos < n_train {
            SPLIT_TRAIN
        } else if pos < n_train + n_val {
            SPLIT_VAL
        } else {
            SPLIT_TEST
        };
    }

    let mut studies = Vec::with_capacity(cfg.n_studies);
    for i in 0..cfg.n_studies {
        studies.push(generate_study(cfg, seed, i, split_of[i])?);
    }
    Ok(studies)
}

fn generate_study(cfg: &GenConfig, seed: u64, index: usize, split: &str) -> Result<GeneratedStudy> {
    let mut rng = derive_rng(seed, &[0x7374_7564_79, index as u64]);
    let s = cfg.canonical_size as f64;

    // findings: 25% clean, 55% one lesion, 20% two distinct lesions
    let roll: f64 = rng.gen();
    let mut findings: Vec<Finding> = if roll < 0.25 {
        vec![]
    } else if roll < 0.80 {
        vec![*Finding::LESIONS.choose(&mut rng).unwrap()]
    } else {
        let mut pair = Finding::LESIONS.to_vec();
        pair.shuffle(&mut rng);
        pair.truncate(2);
        pair
    };
    findings.sort();

    let mut labels = vec![0u8; NUM_CLASSES];
    if findings.is_empty() {
        labels[Finding::NoFinding.index()] = 1;
    } else {
        for f in &findings {
            labels[f.index()] = 1;
        }
    }

    // study-level geometry; each view jitters around it
    let base_geoms: Vec<LesionGeometry> =
        findings.iter().map(|&f| sample_geometry(f, s, &mut rng)).collect();

    let n_views = match rng.gen::<f64>() {
        r if r < 0.3 => 1,
        r if r < 0.6 => 2,
        r if r < 0.8 => 3,
        r if r < 0.9 => 4,
        _ => 5,
    };

    let mut views = Vec::with_capacity(n_views);
    let mut lesions = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let mut vrng = derive_rng(seed, &[0x7669_6577, index as u64, v as u64]);
        let mut img = render_background(cfg.canonical_size, &mut vrng);
        let mut view_lesions = Vec::new();
        for g in &base_geoms {
            let jittered = jitter_geometry(g, s, &mut vrng);
            let bbox = render_lesion(&mut img, &jittered);
            view_lesions.push((g.finding, bbox));
        }
        views.push(img);
        lesions.push(view_lesions);
    }

    // report: one templated sentence per finding (or a normal statement),
    // plus an occasional filler sentence
    let mut report = String::new();
    if findings.is_empty() {
        report.push_str(NORMAL_TEMPLATES.choose(&mut rng).unwrap());
    } else {
        for (i, f) in findings.iter().enumerate() {
            if i > 0 {
                report.push(' ');
            }
            let templates = REPORT_TEMPLATES
                .iter()
                .find(|(name, _)| *name == f.name())
                .map(|(_, t)| t)
                .expect("every lesion class has templates");
            report.push_str(templates.choose(&mut rng).unwrap());
        }
    }
    if rng.gen_bool(0.4) {
        report.push(' ');
        report.push_str(FILLER_TEMPLATES.choose(&mut rng).unwrap());
    }

    Ok(GeneratedStudy {
        study_id: format!("study{index:05}"),
        views,
        lesions,
        report,
        labels,
        split: split.to_string(),
    })
}

fn sample_geometry(finding: Finding, s: f64, rng: &mut impl Rng) -> LesionGeometry {
    match finding {
        Finding::DiskLeft | Finding::DiskRight => {
            let r = s * rng.gen_range(0.085..0.13);
            let cx = if finding == Finding::DiskLeft {
                s * rng.gen_range(0.20..0.33)
            } else {
                s * rng.gen_range(0.67..0.80)
            };
            LesionGeometry {
                finding,
                cx,
                cy: s * rng.gen_range(0.30..0.70),
                rx: r,
                ry: r,
                bump: rng.gen_range(0.44..0.54),
                kind: LesionKind::Disk,
            }
        }
        Finding::BarUpper | Finding::BarLower => {
            let cy = if finding == Finding::BarUpper {
                s * rng.gen_range(0.16..0.28)
            } else {
                s * rng.gen_range(0.72..0.84)
            };
            LesionGeometry {
                finding,
                cx: s * 0.5,
                cy,
                rx: s * rng.gen_range(0.30..0.36),
                ry: s * rng.gen_range(0.040..0.060),
                bump: rng.gen_range(0.44..0.54),
                kind: LesionKind::Bar,
            }
        }
        Finding::HazeDiffuse => LesionGeometry {
            finding,
            cx: s * rng.gen_range(0.45..0.55),
            cy: s * rng.gen_range(0.45..0.55),
            rx: s * rng.gen_range(0.30..0.38),
            ry: s * rng.gen_range(0.30..0.38),
            bump: rng.gen_range(0.42..0.50),
            kind: LesionKind::Haze,
        },
        Finding::NoFinding => unreachable!("no geometry for a clean study"),
    }
}

fn jitter_geometry(g: &LesionGeometry, s: f64, rng: &mut impl Rng) -> LesionGeometry {
    LesionGeometry {
        finding: g.finding,
        cx: g.cx + s * rng.gen_range(-0.02..0.02),
        cy: g.cy + s * rng.gen_range(-0.02..0.02),
        rx: g.rx * rng.gen_range(0.92..1.08),
        ry: g.ry * rng.gen_range(0.92..1.08),
        bump: (g.bump + rng.gen_range(-0.03..0.03)).max(0.40),
        kind: g.kind,
    }
}

/// Backgrounds vary noticeably across studies (base level and a smooth
/// horizontal/vertical ramp) so study identity is visible to pooled features
/// from the start; lesion bumps sit well above the whole range.
fn render_background(size: usize, rng: &mut impl Rng) -> GrayImage {
    let base: f32 = 0.22 + rng.gen_range(-0.10..0.10);
    let ramp_x: f32 = rng.gen_range(-0.08..0.08);
    let ramp_y: f32 = rng.gen_range(-0.08..0.08);
    let mut img = GrayImage::new(size);
    for y in 0..size {
        let fy = y as f32 / size as f32 - 0.5;
        for x in 0..size {
            let fx = x as f32 / size as f32 - 0.5;
            let noise: f32 = rng.gen_range(-0.04..0.04);
            img.pixels[y * size + x] =
                (base + ramp_x * fx + ramp_y * fy + noise).clamp(0.0, 1.0);
        }
    }
    img
}

/// Render one lesion and return its tight canonical-space bounding box.
fn render_lesion(img: &mut GrayImage, g: &LesionGeometry) -> [usize; 4] {
    let n = img.size;
    let sf = n as f64;
    let x0 = ((g.cx - g.rx).floor().max(0.0)) as usize;
    let y0 = ((g.cy - g.ry).floor().max(0.0)) as usize;
    let x1 = ((g.cx + g.rx).ceil().min(sf)) as usize;
    let y1 = ((g.cy + g.ry).ceil().min(sf)) as usize;

    // edge softness as a fraction of the radius
    let soft = match g.kind {
        LesionKind::Disk | LesionKind::Bar => 0.12,
        LesionKind::Haze => 0.25,
    };
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = (x as f64 + 0.5 - g.cx) / g.rx;
            let dy = (y as f64 + 0.5 - g.cy) / g.ry;
            let d = match g.kind {
                LesionKind::Disk | LesionKind::Haze => (dx * dx + dy * dy).sqrt(),
                LesionKind::Bar => dx.abs().max(dy.abs()),
            };
            if d < 1.0 {
                // full bump inside (1-soft), smooth fade to the rim
                let w = if d <= 1.0 - soft { 1.0 } else { (1.0 - d) / soft };
                let p = &mut img.pixels[y * n + x];
                *p = (*p + g.bump * w as f32).clamp(0.0, 1.0);
            }
        }
    }
    [x0, y0, x1.max(x0 + 1), y1.max(y0 + 1)]
}

// ── disk layout ───────────────────────────────────────────────────────────

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const LESIONS_FILE: &str = "lesions.jsonl";

/// Write a generated corpus: one PGM per view under `studies/<id>/`, the
/// manifest, and a lesion-box sidecar used by localization evaluation.
pub fn write_corpus(studies: &[GeneratedStudy], out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(studies.len());
    let mut lesion_lines = String::new();
    for study in studies {
        let mut view_paths = Vec::with_capacity(study.views.len());
        for (v, img) in study.views.iter().enumerate() {
            let rel = format!("studies/{}/view{v}.pgm", study.study_id);
            write_pgm(img, &out_dir.join(&rel))?;
            for (finding, bbox) in &study.lesions[v] {
                let rec = LesionRecord {
                    study_id: study.study_id.clone(),
                    view: rel.clone(),
                    class: finding.name().to_string(),
                    bbox: *bbox,
                };
                let _ = writeln!(lesion_lines, "{}", serde_json::to_string(&rec).unwrap());
            }
            view_paths.push(rel);
        }
        records.push(StudyRecord {
            study_id: study.study_id.clone(),
            views: view_paths,
            report: study.report.clone(),
            labels: study.labels.clone(),
            split: study.split.clone(),
        });
    }
    std::fs::write(out_dir.join(LESIONS_FILE), lesion_lines)?;
    let manifest = Manifest { records, root: out_dir.to_path_buf() };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn load_lesions(dir: &Path) -> Result<Vec<LesionRecord>> {
    let text = std::fs::read_to_string(dir.join(LESIONS_FILE))
        .map_err(|e| Error::Data(format!("cannot read lesion sidecar: {e}")))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        out.push(
            serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("lesion sidecar: {e}")))?,
        );
    }
    Ok(out)
}

/// Mean intensity inside a lesion's bounding box versus the clean
/// background (pixels outside every box in `exclude`) — the generator
/// self-check that every positive label is visible in pixels.
pub fn lesion_contrast(img: &GrayImage, bbox: &[usize; 4], exclude: &[[usize; 4]]) -> (f32, f32) {
    let in_box = |b: &[usize; 4], x: usize, y: usize| {
        x >= b[0] && x < b[2] && y >= b[1] && y < b[3]
    };
    let mut inside = (0.0f64, 0usize);
    let mut outside = (0.0f64, 0usize);
    for y in 0..img.size {
        for x in 0..img.size {
            let v = img.get(x, y) as f64;
            if in_box(bbox, x, y) {
                inside.0 += v;
                inside.1 += 1;
            } else if !exclude.iter().any(|b| in_box(b, x, y)) {
                outside.0 += v;
                outside.1 += 1;
            }
        }
    }
    (
        (inside.0 / inside.1.max(1) as f64) as f32,
        (outside.0 / outside.1.max(1) as f64) as f32,
    )
}

/// Study ids of each split must be pairwise disjoint and cover the corpus.
pub fn check_split_partition(manifest: &Manifest) -> Result<()> {
    let mut seen = BTreeSet::new();
    for rec in &manifest.records {
        if !seen.insert(rec.study_id.clone()) {
            return Err(Error::Data(format!("duplicated study id {}", rec.study_id)));
        }
        if ![SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST].contains(&rec.split.as_str()) {
            return Err(Error::Data(format!("unknown split tag {}", rec.split)));
        }
    }
    Ok(())
}
