//! Landmark-driven region masks (eyes, nose, mouth), dataset construction and
//! the identity-suppression analysis.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::OnceLock;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::{similarity, IdentityEmbedding, IdentityEncoder};
use crate::imageio::{ensure_parent, save_mask_raster};
use crate::manifest::{Manifest, ManifestRow, Region};

/// Landmark indices of each facial region for one detector topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionIndex {
    pub profile: String,
    pub points: usize,
    pub left_eye: Vec<usize>,
    pub right_eye: Vec<usize>,
    pub nose: Vec<usize>,
    pub lips: Vec<usize>,
    pub face_oval: Vec<usize>,
}

impl RegionIndex {
    pub fn indices(&self, region: Region) -> Vec<usize> {
        match region {
            Region::Eyes => self
                .left_eye
                .iter()
                .chain(&self.right_eye)
                .copied()
                .collect(),
            Region::Nose => self.nose.clone(),
            Region::Mouth => self.lips.clone(),
        }
    }
}

/// Index sets of the 468-point face mesh.
pub fn facemesh() -> &'static RegionIndex {
    static INDEX: OnceLock<RegionIndex> = OnceLock::new();
    INDEX.get_or_init(|| {
        serde_json::from_str(include_str!("../data/facemesh_regions.json"))
            .expect("bundled region index is valid JSON")
    })
}

/// Normalized `(x, y)` image coordinates plus relative depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceLandmarks {
    points: Vec<[f64; 3]>,
}

impl FaceLandmarks {
    pub fn new(points: Vec<[f64; 3]>, expected: usize) -> Result<Self> {
        if points.len() != expected {
            return Err(Error::Data(format!(
                "expected {expected} landmarks, found {}",
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            let inside = (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
            if !inside || !p[2].is_finite() {
                return Err(Error::Data(format!(
                    "landmark {i} at ({}, {}, {}) is outside the normalized image",
                    p[0], p[1], p[2]
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Parses one `x,y,z` triple per line (commas or whitespace).
    pub fn parse(text: &str, expected: usize) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("landmark line {}: {e}", n + 1)))?;
            if vals.len() != 3 {
                return Err(Error::Data(format!(
                    "landmark line {} has {} values, expected 3",
                    n + 1,
                    vals.len()
                )));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        Self::new(points, expected)
    }

    pub fn load(path: &Path, expected: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, expected).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            s.push_str(&format!("{:.6},{:.6},{:.6}\n", p[0], p[1], p[2]));
        }
        s
    }

    fn centroid(&self, idx: &[usize]) -> [f64; 2] {
        let n = idx.len() as f64;
        let (sx, sy) = idx.iter().fold((0.0, 0.0), |(x, y), &i| {
            (x + self.points[i][0], y + self.points[i][1])
        });
        [sx / n, sy / n]
    }
}

/// Axis-aligned box in pixel units, half-open: `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionBox {
    pub region: Region,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl RegionBox {
    pub fn area(&self) -> usize {
        (self.x1.saturating_sub(self.x0)) * (self.y1.saturating_sub(self.y0))
    }

    pub fn intersection_area(&self, other: &RegionBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }
}

/// Unclipped envelope of a region's landmarks in pixel units, `[x0, y0, x1, y1]`,
/// padded on all sides by `pad_frac` times the inter-ocular distance for eyes.
pub fn region_envelope(
    lm: &FaceLandmarks,
    region: Region,
    index: &RegionIndex,
    width: usize,
    height: usize,
    pad_frac: f64,
) -> Result<[f64; 4]> {
    if !(pad_frac.is_finite() && pad_frac >= 0.0) {
        return Err(Error::Argument(format!(
            "pad_frac must be >= 0, got {pad_frac}"
        )));
    }
    let idx = index.indices(region);
    if idx.iter().any(|&i| i >= lm.points.len()) || idx.is_empty() {
        return Err(Error::Data(format!(
            "landmark set does not cover the {region} indices"
        )));
    }
    let (w, h) = (width as f64, height as f64);
    let mut env = [
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    for &i in &idx {
        let (x, y) = (lm.points[i][0] * w, lm.points[i][1] * h);
        env = [env[0].min(x), env[1].min(y), env[2].max(x), env[3].max(y)];
    }
    if region == Region::Eyes && pad_frac > 0.0 {
        let l = lm.centroid(&index.left_eye);
        let r = lm.centroid(&index.right_eye);
        let iod = ((l[0] - r[0]) * w).hypot((l[1] - r[1]) * h);
        let pad = pad_frac * iod;
        env = [env[0] - pad, env[1] - pad, env[2] + pad, env[3] + pad];
    }
    Ok(env)
}

// Snapping tolerance: coordinates within this of an integer count as integral.
const SNAP_EPS: f64 = 1e-9;

/// Pixel box of a region, snapped outward to whole pixels and clipped to the
/// image.
pub fn region_box(
    lm: &FaceLandmarks,
    region: Region,
    index: &RegionIndex,
    width: usize,
    height: usize,
    pad_frac: f64,
) -> Result<RegionBox> {
    let env = region_envelope(lm, region, index, width, height, pad_frac)?;
    let lo = |v: f64, max: usize| ((v + SNAP_EPS).floor().max(0.0) as usize).min(max);
    let hi = |v: f64, max: usize| ((v - SNAP_EPS).ceil().max(0.0) as usize).min(max);
    let b = RegionBox {
        region,
        x0: lo(env[0], width),
        y0: lo(env[1], height),
        x1: hi(env[2], width),
        y1: hi(env[3], height),
    };
    if b.x1 <= b.x0 || b.y1 <= b.y0 {
        return Err(Error::Geometry(format!(
            "{region} landmarks span a zero-area box {:?}",
            (b.x0, b.y0, b.x1, b.y1)
        )));
    }
    Ok(b)
}

/// Removes overlaps by shrinking lower-priority boxes (eyes > nose > mouth).
///
/// Each overlapping box is cut back to one side of the higher-priority box;
/// of the four candidate cuts (top, bottom, left, right) the one keeping the
/// largest area wins, earlier candidates winning ties.
pub fn resolve_overlaps(boxes: [RegionBox; 3], face: &str) -> Result<[RegionBox; 3]> {
    let mut sorted = boxes;
    sorted.sort_by_key(|b| b.region);
    if sorted.iter().map(|b| b.region).collect::<Vec<_>>() != Region::ALL {
        return Err(Error::Argument(format!(
            "{face}: expected one box per region"
        )));
    }
    let mut out: Vec<RegionBox> = Vec::with_capacity(3);
    for mut b in sorted {
        for fixed in &out {
            if b.intersection_area(fixed) == 0 {
                continue;
            }
            let candidates = [
                RegionBox {
                    y0: fixed.y1.max(b.y0),
                    ..b
                },
                RegionBox {
                    y1: fixed.y0.min(b.y1),
                    ..b
                },
                RegionBox {
                    x0: fixed.x1.max(b.x0),
                    ..b
                },
                RegionBox {
                    x1: fixed.x0.min(b.x1),
                    ..b
                },
            ];
            let best = candidates
                .iter()
                .filter(|c| c.x1 > c.x0 && c.y1 > c.y0)
                .fold(None::<RegionBox>, |acc, c| match acc {
                    Some(a) if a.area() >= c.area() => Some(a),
                    _ => Some(*c),
                });
            b = best.ok_or_else(|| {
                Error::Geometry(format!(
                    "{face}: the {} box is annihilated by the {} box",
                    b.region, fixed.region
                ))
            })?;
        }
        out.push(b);
    }
    Ok([out[0], out[1], out[2]])
}

/// Binary raster (row-major, 1 inside the box).
pub fn rasterize(b: &RegionBox, height: usize, width: usize) -> Result<Vec<u8>> {
    if b.x1 > width || b.y1 > height || b.x0 >= b.x1 || b.y0 >= b.y1 {
        return Err(Error::Argument(format!(
            "box {:?} is not inside a {width}x{height} image",
            (b.x0, b.y0, b.x1, b.y1)
        )));
    }
    let mut data = vec![0u8; width * height];
    for y in b.y0..b.y1 {
        data[y * width + b.x0..y * width + b.x1].fill(1);
    }
    Ok(data)
}

/// The three non-overlapping boxes of one face.
pub fn face_boxes(
    lm: &FaceLandmarks,
    index: &RegionIndex,
    width: usize,
    height: usize,
    pad_frac: f64,
    face: &str,
) -> Result<[RegionBox; 3]> {
    let boxes = [
        region_box(lm, Region::Eyes, index, width, height, pad_frac)?,
        region_box(lm, Region::Nose, index, width, height, pad_frac)?,
        region_box(lm, Region::Mouth, index, width, height, pad_frac)?,
    ];
    resolve_overlaps(boxes, face)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EMaskConfig {
    /// Eye padding as a fraction of the inter-ocular distance.
    pub pad_frac: f64,
    /// Landmarks expected per face.
    pub landmark_points: usize,
    /// Gray level, in `[-1, 1]`, written into masked pixels for analysis.
    pub fill: f32,
}

impl Default for EMaskConfig {
    fn default() -> Self {
        Self {
            pad_frac: 0.25,
            landmark_points: 468,
            fill: 0.0,
        }
    }
}

/// Result of [`build_dataset`].
#[derive(Debug, Clone)]
pub struct BuildSummary {
    pub manifest_path: PathBuf,
    pub rows: usize,
    pub skipped: Vec<(String, String)>,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let ext = p
            .extension()
            .map(|s| s.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Reads `identities.csv` (`image,identity`) next to the images, if present.
fn read_identities(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join("identities.csv");
    let mut map = BTreeMap::new();
    if !path.is_file() {
        return Ok(map);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for (n, line) in text.lines().enumerate() {
        if n == 0 && line.starts_with("image") || line.trim().is_empty() {
            continue;
        }
        let (img, id) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: expected image,identity",
                path.display(),
                n + 1
            ))
        })?;
        map.insert(img.trim().to_string(), id.trim().to_string());
    }
    Ok(map)
}

/// `path` relative to `base` when both resolve on disk.
pub(crate) fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let (Ok(p), Ok(b)) = (path.canonicalize(), base.canonicalize()) else {
        return path.to_path_buf();
    };
    let pc: Vec<Component> = p.components().collect();
    let bc: Vec<Component> = b.components().collect();
    let common = pc.iter().zip(&bc).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &pc[common..] {
        out.push(c);
    }
    out
}

/// Writes eye/nose/mouth masks for every image with a landmark file and a
/// manifest (`manifest.jsonl`) under `out_dir`. With `dry_run` nothing is
/// written.
pub fn build_dataset(
    images_dir: &Path,
    landmarks_dir: &Path,
    out_dir: &Path,
    config: &EMaskConfig,
    dry_run: bool,
) -> Result<BuildSummary> {
    for d in [images_dir, landmarks_dir] {
        if !d.is_dir() {
            return Err(Error::Data(format!(
                "directory {} does not exist",
                d.display()
            )));
        }
    }
    let index = facemesh();
    if config.landmark_points != index.points {
        return Err(Error::Config(format!(
            "landmark profile {} has {} points, config expects {}",
            index.profile, index.points, config.landmark_points
        )));
    }
    let identities = read_identities(images_dir)?;
    let images = list_images(images_dir)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut pending = Vec::new();
    for img_path in &images {
        let name = img_path.file_name().unwrap().to_string_lossy().into_owned();
        let stem = img_path.file_stem().unwrap().to_string_lossy().into_owned();
        let lm_path = landmarks_dir.join(format!("{stem}.txt"));
        if !lm_path.is_file() {
            log::warn!("skipping {name}: no landmark file {}", lm_path.display());
            skipped.push((name, format!("missing landmark file {}", lm_path.display())));
            continue;
        }
        let (w, h) = image::image_dimensions(img_path).map_err(|e| Error::image(img_path, e))?;
        let (w, h) = (w as usize, h as usize);
        let boxes = FaceLandmarks::load(&lm_path, config.landmark_points)
            .and_then(|lm| face_boxes(&lm, index, w, h, config.pad_frac, &name));
        let boxes = match boxes {
            Ok(b) => b,
            Err(e @ (Error::Geometry(_) | Error::Data(_))) => {
                log::warn!("skipping {name}: {e}");
                skipped.push((name, e.to_string()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut mask_paths = Vec::new();
        for b in &boxes {
            let rel = format!("masks/{stem}_{}.png", b.region);
            pending.push((out_dir.join(&rel), rasterize(b, h, w)?, w, h));
            mask_paths.push(rel);
        }
        rows.push((
            img_path.clone(),
            lm_path,
            identities
                .get(&name)
                .cloned()
                .unwrap_or_else(|| stem.clone()),
            mask_paths,
        ));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "no usable faces in {} ({} skipped)",
            images_dir.display(),
            skipped.len()
        )));
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    if dry_run {
        return Ok(BuildSummary {
            manifest_path,
            rows: rows.len(),
            skipped,
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (path, data, w, h) in &pending {
        save_mask_raster(path, data, *w, *h)?;
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        rows: rows
            .into_iter()
            .map(|(img, lm, id, masks)| ManifestRow {
                image_path: relative_to(&img, out_dir).to_string_lossy().into_owned(),
                identity_id: id,
                eyes_mask: masks[0].clone(),
                nose_mask: masks[1].clone(),
                mouth_mask: masks[2].clone(),
                landmark_path: relative_to(&lm, out_dir).to_string_lossy().into_owned(),
            })
            .collect(),
    };
    manifest.save(&manifest_path)?;
    Ok(BuildSummary {
        manifest_path,
        rows: manifest.rows.len(),
        skipped,
    })
}

/// Summary statistics of a similarity distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                q25: f64::NAN,
                median: f64::NAN,
                q75: f64::NAN,
                max: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let q = |p: f64| {
            let pos = p * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
        };
        Self {
            count: n,
            mean,
            std: var.sqrt(),
            min: s[0],
            q25: q(0.25),
            median: q(0.5),
            q75: q(0.75),
            max: s[n - 1],
        }
    }
}

/// Masked-vs-unmasked embedding similarities per region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub images: Vec<String>,
    pub regions: BTreeMap<Region, Vec<f64>>,
    /// Similarity of each image to a uniformly filled image.
    pub full_mask: Vec<f64>,
    pub summary: BTreeMap<String, Stats>,
    pub fill: f32,
}

impl SuppressionReport {
    pub fn mean(&self, region: Region) -> f64 {
        self.summary[region.name()].mean
    }

    /// `image,region,similarity` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,region,similarity\n");
        for (i, img) in self.images.iter().enumerate() {
            for r in Region::ALL {
                s.push_str(&format!("{img},{r},{:.8}\n", self.regions[&r][i]));
            }
        }
        s
    }

    /// Writes `suppression.json` and `suppression.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("suppression.json");
        let mut f = std::fs::File::create(&json).map_err(|e| Error::io(&json, e))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n").map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("suppression.csv");
        ensure_parent(&csv)?;
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// `image * (1 - mask) + fill * mask` for `[B, 3, H, W]` images and
/// `[B, 1, H, W]` masks.
pub fn apply_fill(images: &Tensor, masks: &Tensor, fill: f32) -> Result<Tensor> {
    let keep = (1.0 - masks)?;
    Ok((images.broadcast_mul(&keep)?
        + masks
            .affine(fill as f64, 0.0)?
            .broadcast_as(images.shape())?)?)
}

fn embed_rows(encoder: &dyn IdentityEncoder, images: &Tensor) -> Result<Vec<IdentityEmbedding>> {
    let n = images.dims()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(64) {
        let len = (n - start).min(64);
        out.extend(IdentityEmbedding::from_rows(
            &encoder.embed(&images.narrow(0, start, len)?)?,
        )?);
    }
    Ok(out)
}

/// Similarities from in-memory tensors: `images [N, 3, H, W]` and one
/// `[N, 1, H, W]` mask tensor per region.
pub fn suppression_from_tensors(
    names: &[String],
    images: &Tensor,
    masks: &BTreeMap<Region, Tensor>,
    encoder: &dyn IdentityEncoder,
    fill: f32,
) -> Result<SuppressionReport> {
    let n = images.dims()[0];
    if n == 0 || names.len() != n {
        return Err(Error::Data(
            "suppression analysis needs a non-empty corpus".into(),
        ));
    }
    let base = embed_rows(encoder, images)?;
    let mut regions = BTreeMap::new();
    let mut summary = BTreeMap::new();
    for r in Region::ALL {
        let m = masks
            .get(&r)
            .ok_or_else(|| Error::Argument(format!("no {r} masks supplied")))?;
        let masked = embed_rows(encoder, &apply_fill(images, m, fill)?)?;
        let sims = base
            .iter()
            .zip(&masked)
            .map(|(a, b)| similarity(a, b))
            .collect::<Result<Vec<f64>>>()?;
        summary.insert(r.name().to_string(), Stats::of(&sims));
        regions.insert(r, sims);
    }
    let (_, c, h, w) = images.dims4()?;
    let flat = Tensor::full(fill, (1, c, h, w), images.device())?;
    let flat_emb = embed_rows(encoder, &flat)?.remove(0);
    let full_mask = base
        .iter()
        .map(|a| similarity(a, &flat_emb))
        .collect::<Result<Vec<f64>>>()?;
    summary.insert("full".into(), Stats::of(&full_mask));
    Ok(SuppressionReport {
        images: names.to_vec(),
        regions,
        full_mask,
        summary,
        fill,
    })
}

/// Suppression analysis over every manifest row.
pub fn analyze_suppression(
    manifest: &Manifest,
    encoder: &dyn IdentityEncoder,
    fill: f32,
) -> Result<SuppressionReport> {
    if manifest.rows.is_empty() {
        return Err(Error::Data("manifest is empty".into()));
    }
    let images = manifest.load_images()?;
    let mut masks = BTreeMap::new();
    for r in Region::ALL {
        masks.insert(r, manifest.load_masks(r)?);
    }
    let names: Vec<String> = manifest.rows.iter().map(ManifestRow::key).collect();
    suppression_from_tensors(&names, &images, &masks, encoder, fill)
}
