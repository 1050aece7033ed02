//! Distribution and identity metrics: Fréchet distance, kernel distance,
//! masked Fréchet distance, identity similarity and a feature-space
//! perceptual proxy.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::emask::Stats;
use crate::error::{Error, Result};
use crate::identity::{similarity, FeatureExtractor, IdentityEmbedding, IdentityEncoder};
use crate::imageio::{ensure_parent, load_image, resize_bilinear};
use crate::manifest::{Manifest, Region};
use crate::params::flat_f32;
use crate::random;

const CHUNK: usize = 64;

/// Feature rows of one image collection.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: DMatrix<f64>,
    pub extractor: String,
    pub source: String,
}

impl FeatureSet {
    pub fn new(features: DMatrix<f64>, extractor: &str, source: &str) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite features in {source}")));
        }
        Ok(Self {
            features,
            extractor: extractor.to_string(),
            source: source.to_string(),
        })
    }

    /// Builds a set from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], extractor: &str, source: &str) -> Result<Self> {
        let f = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != f) {
            return Err(Error::Argument("feature rows of different length".into()));
        }
        let m = DMatrix::from_fn(rows.len(), f, |i, j| rows[i][j]);
        Self::new(m, extractor, source)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).iter().copied().collect()
    }
}

fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// One feature row per image of `[N, 3, H, W]`, computed in fixed-size chunks.
pub fn extract_features(
    images: &Tensor,
    extractor: &dyn FeatureExtractor,
    source: &str,
) -> Result<FeatureSet> {
    let n = images.dims4()?.0;
    if n == 0 {
        return Err(Error::Data(format!(
            "no images to extract features from ({source})"
        )));
    }
    let mut rows = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let len = (n - start).min(CHUNK);
        rows.extend(tensor_rows(
            &extractor.features(&images.narrow(0, start, len)?)?,
        )?);
    }
    FeatureSet::from_rows(&rows, &extractor.extractor_id()?, source)
}

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn of(set: &FeatureSet) -> Result<Self> {
        let n = set.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "{} has {n} feature rows; Fréchet statistics need at least 2",
                set.source
            )));
        }
        let x = &set.features;
        let mean = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n as f64);
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The trace of the product root is taken as the sum of root eigenvalues of
/// the symmetric `S_a^{1/2} S_b S_a^{1/2}`, which shares its spectrum with
/// `S_a S_b`; eigenvalues below zero are numerical noise and clamp to zero.
pub fn frechet_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::Argument(format!(
            "feature dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let ra = sym_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_root: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_root;
    if !d.is_finite() {
        let ea = SymmetricEigen::new(a.cov.clone()).eigenvalues;
        let eb = SymmetricEigen::new(b.cov.clone()).eigenvalues;
        let range = |e: &DVector<f64>| (e.min(), e.max());
        return Err(Error::Numerical(format!(
            "Fréchet distance is not finite; covariance eigenvalue ranges {:?} and {:?}",
            range(&ea),
            range(&eb)
        )));
    }
    // Cancellation can leave tiny negatives for identical distributions.
    Ok(d.max(0.0))
}

pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    frechet_from_stats(&GaussianStats::of(a)?, &GaussianStats::of(b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KidConfig {
    pub subset_size: usize,
    pub subsets: usize,
    pub seed: u64,
}

impl Default for KidConfig {
    fn default() -> Self {
        Self {
            subset_size: 100,
            subsets: 10,
            seed: 0,
        }
    }
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD between two equal-size samples.
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let m = x.len();
    if m < 2 || y.len() != m {
        return Err(Error::Argument(format!(
            "unbiased MMD needs two samples of equal size >= 2, got {} and {}",
            m,
            y.len()
        )));
    }
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    acc += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        acc / (m * (m - 1)) as f64
    };
    let mut cross = 0.0;
    for xi in x {
        for yj in y {
            cross += poly_kernel(xi, yj);
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (m * m) as f64)
}

fn lexical(a: &FeatureSet, b: &FeatureSet) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.features
            .iter()
            .zip(b.features.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Kernel distance averaged over random subsets; per-subset values are
/// returned alongside the mean.
///
/// The two sets are put in a canonical order first, so `kid(a, b)` and
/// `kid(b, a)` draw the same subsets and agree bit for bit.
pub fn kid_subsets(a: &FeatureSet, b: &FeatureSet, config: &KidConfig) -> Result<(f64, Vec<f64>)> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Data(
            "KID needs at least 2 feature rows per set".into(),
        ));
    }
    if config.subsets == 0 || config.subset_size < 2 {
        return Err(Error::Config(
            "KID needs subsets >= 1 and subset_size >= 2".into(),
        ));
    }
    let (x, y) = if lexical(a, b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    };
    let m = config.subset_size.min(x.len()).min(y.len());
    let mut rng = random::derived(config.seed, "kid");
    let mut values = Vec::with_capacity(config.subsets);
    for _ in 0..config.subsets {
        let xs: Vec<Vec<f64>> = sample_indices(&mut rng, x.len(), m)
            .iter()
            .map(|i| x.row(i))
            .collect();
        let ys: Vec<Vec<f64>> = sample_indices(&mut rng, y.len(), m)
            .iter()
            .map(|i| y.row(i))
            .collect();
        values.push(mmd2_unbiased(&xs, &ys)?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok((mean, values))
}

pub fn kid(a: &FeatureSet, b: &FeatureSet, config: &KidConfig) -> Result<f64> {
    Ok(kid_subsets(a, b, config)?.0)
}

/// Tight bounding box `[y0, y1) x [x0, x1)` of a `[1, H, W]` or `[H, W]` mask.
pub fn mask_bbox(mask: &Tensor) -> Result<Option<(usize, usize, usize, usize)>> {
    let dims = mask.dims();
    let (h, w) = match dims {
        [1, h, w] | [h, w] => (*h, *w),
        d => {
            return Err(Error::Argument(format!(
                "mask must be [1, H, W], got {d:?}"
            )))
        }
    };
    let v = flat_f32(mask)?;
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if v[y * w + x] > 0.5 {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    Ok((y1 > y0).then_some((y0, y1, x0, x1)))
}

/// Crops each image to its mask's bounding box and resizes the crop to
/// `size`. Returns the crops and the kept indices; zero-area masks are
/// skipped with a warning.
pub fn mask_crops(images: &Tensor, masks: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let n = images.dims4()?.0;
    if masks.dims4()?.0 != n {
        return Err(Error::Argument(format!(
            "{} masks for {n} images",
            masks.dims()[0]
        )));
    }
    let mut crops = Vec::new();
    let mut kept = Vec::new();
    for i in 0..n {
        match mask_bbox(&masks.get(i)?)? {
            None => log::warn!("mask {i} is empty; skipped for masked FID"),
            Some((y0, y1, x0, x1)) => {
                let c = images
                    .get(i)?
                    .narrow(1, y0, y1 - y0)?
                    .narrow(2, x0, x1 - x0)?;
                crops.push(resize_bilinear(&c, size, size)?);
                kept.push(i);
            }
        }
    }
    if crops.is_empty() {
        return Err(Error::Data(
            "every mask is empty; masked FID is undefined".into(),
        ));
    }
    Ok((Tensor::stack(&crops, 0)?, kept))
}

/// Fréchet distance between features of the mask-box crops of `generated`
/// and `reference`.
pub fn masked_fid(
    generated: &Tensor,
    reference: &Tensor,
    masks: &Tensor,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    if generated.dims() != reference.dims() {
        return Err(Error::Argument(format!(
            "generated {:?} and reference {:?} differ in shape",
            generated.dims(),
            reference.dims()
        )));
    }
    let size = extractor.input_size();
    let (g, _) = mask_crops(generated, masks, size)?;
    let (r, _) = mask_crops(reference, masks, size)?;
    frechet_distance(
        &extract_features(&g, extractor, "generated crops")?,
        &extract_features(&r, extractor, "reference crops")?,
    )
}

fn embed_chunked(images: &Tensor, encoder: &dyn IdentityEncoder) -> Result<Vec<IdentityEmbedding>> {
    let n = images.dims4()?.0;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let len = (n - start).min(CHUNK);
        out.extend(IdentityEmbedding::from_rows(
            &encoder.embed(&images.narrow(0, start, len)?)?,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityScores {
    pub per_image: Vec<f64>,
    pub mean: f64,
}

/// Cosine similarity between embeddings of paired generated and reference
/// images.
pub fn identity_score(
    generated: &Tensor,
    reference: &Tensor,
    encoder: &dyn IdentityEncoder,
) -> Result<IdentityScores> {
    let (ng, nr) = (generated.dims4()?.0, reference.dims4()?.0);
    if ng != nr {
        return Err(Error::Argument(format!(
            "{ng} generated images paired with {nr} references"
        )));
    }
    if ng == 0 {
        return Err(Error::Data("no image pairs to score".into()));
    }
    let g = embed_chunked(generated, encoder)?;
    let r = embed_chunked(reference, encoder)?;
    let per_image = g
        .iter()
        .zip(&r)
        .map(|(a, b)| Ok(similarity(a, b)?.clamp(-1.0, 1.0)))
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(IdentityScores { per_image, mean })
}

/// Per-pair root-mean-square difference of the extractor's feature maps.
pub fn perceptual_distances(
    generated: &Tensor,
    reference: &Tensor,
    extractor: &dyn FeatureExtractor,
) -> Result<Vec<f64>> {
    if generated.dims() != reference.dims() {
        return Err(Error::Argument(format!(
            "generated {:?} and reference {:?} differ in shape",
            generated.dims(),
            reference.dims()
        )));
    }
    let n = generated.dims4()?.0;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let len = (n - start).min(CHUNK);
        let a = extractor.feature_maps(&generated.narrow(0, start, len)?)?;
        let b = extractor.feature_maps(&reference.narrow(0, start, len)?)?;
        let d = (a - b)?.sqr()?.flatten_from(1)?.mean(1)?.sqrt()?;
        out.extend(d.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub region: Region,
    pub kid: KidConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            region: Region::Eyes,
            kid: KidConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySummary {
    pub mean: f64,
    pub std: f64,
    pub per_image: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub rows: usize,
    pub evaluated: usize,
    pub missing: usize,
}

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub id_similarity: IdentitySummary,
    pub fid: f64,
    pub mfid: f64,
    pub kid: f64,
    pub perceptual: f64,
    pub counts: Counts,
    pub missing: Vec<String>,
    pub encoder_hash: String,
    pub extractor_hash: String,
    pub config: EvalConfig,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-image identity similarity, one row per evaluated image.
    pub fn identity_csv(&self) -> String {
        let mut s = String::from("image,similarity\n");
        for (k, v) in &self.id_similarity.per_image {
            s.push_str(&format!("{k},{v:.6}\n"));
        }
        s
    }

    /// Writes `report.json` and `identity.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let j = dir.join("report.json");
        ensure_parent(&j)?;
        std::fs::write(&j, self.to_json()?).map_err(|e| Error::io(&j, e))?;
        let c = dir.join("identity.csv");
        std::fs::write(&c, self.identity_csv()).map_err(|e| Error::io(&c, e))
    }
}

/// Path of the generated image for a manifest row inside a run directory.
pub fn generated_path(run: &Path, key: &str) -> PathBuf {
    run.join(format!("{key}.png"))
}

/// Scores generated images (`{run}/{key}.png`) against the manifest's
/// ground truth. Rows without an output are listed and left out.
pub fn evaluate<E>(
    run: &Path,
    manifest: &Manifest,
    encoder: &E,
    config: &EvalConfig,
) -> Result<MetricsReport>
where
    E: IdentityEncoder + FeatureExtractor,
{
    let mut keys = Vec::new();
    let mut missing = Vec::new();
    let mut gen = Vec::new();
    let mut refs = Vec::new();
    let mut masks = Vec::new();
    for row in &manifest.rows {
        let key = row.key();
        let p = generated_path(run, &key);
        if !p.is_file() {
            missing.push(key);
            continue;
        }
        gen.push(load_image(&p)?);
        refs.push(load_image(&manifest.resolve(&row.image_path))?);
        masks.push(crate::imageio::load_mask(
            &manifest.resolve(row.mask(config.region)),
        )?);
        keys.push(key);
    }
    if keys.is_empty() {
        return Err(Error::Data(format!(
            "no generated images for the manifest rows found in {}",
            run.display()
        )));
    }
    for k in &missing {
        log::warn!("no generated image for {k}");
    }
    let stack = |v: &[Tensor], what: &str| crate::manifest::stack_same_size(v, what);
    let g = stack(&gen, "generated image")?;
    let r = stack(&refs, "reference image")?;
    let m = stack(&masks, "mask")?;
    if g.dims() != r.dims() {
        return Err(Error::Data(format!(
            "generated images {:?} differ in size from references {:?}",
            g.dims(),
            r.dims()
        )));
    }
    let ids = identity_score(&g, &r, encoder)?;
    let stats = Stats::of(&ids.per_image);
    let fg = extract_features(&g, encoder, "generated")?;
    let fr = extract_features(&r, encoder, "reference")?;
    let fid = frechet_distance(&fg, &fr)?;
    let kid = kid(&fg, &fr, &config.kid)?;
    let mfid = masked_fid(&g, &r, &m, encoder)?;
    let perc = perceptual_distances(&g, &r, encoder)?;
    let perceptual = perc.iter().sum::<f64>() / perc.len() as f64;
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA,
        id_similarity: IdentitySummary {
            mean: ids.mean,
            std: stats.std,
            per_image: keys
                .iter()
                .cloned()
                .zip(ids.per_image.iter().copied())
                .collect(),
        },
        fid,
        mfid,
        kid,
        perceptual,
        counts: Counts {
            rows: manifest.rows.len(),
            evaluated: keys.len(),
            missing: missing.len(),
        },
        missing,
        encoder_hash: encoder.extractor_id()?,
        extractor_hash: encoder.extractor_id()?,
        config: config.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> FeatureSet {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        FeatureSet::from_rows(&v, "t", "t").unwrap()
    }

    #[test]
    fn one_dimensional_analytic_case() {
        let a = GaussianStats {
            mean: DVector::from_element(1, 0.0),
            cov: DMatrix::from_element(1, 1, 1.0),
        };
        let b = GaussianStats {
            mean: DVector::from_element(1, 1.0),
            cov: DMatrix::from_element(1, 1, 4.0),
        };
        assert!((frechet_from_stats(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn stats_are_unbiased() {
        let s = GaussianStats::of(&set(&[&[1.0, 0.0], &[3.0, 2.0]])).unwrap();
        assert_eq!(s.mean.as_slice(), &[2.0, 1.0]);
        assert_eq!(s.cov[(0, 0)], 2.0);
        assert_eq!(s.cov[(0, 1)], 2.0);
    }

    #[test]
    fn too_few_rows_is_a_data_error() {
        let a = set(&[&[1.0]]);
        assert!(matches!(frechet_distance(&a, &a), Err(Error::Data(_))));
    }

    #[test]
    fn kid_point_masses() {
        // x = {0, 0}, y = {r, r} in one dimension: k(0,0)=1, k(r,r)=(r^2+1)^3, k(0,r)=1.
        let r = 2.0;
        let a = set(&[&[0.0], &[0.0]]);
        let b = set(&[&[r], &[r]]);
        let want = 1.0 + (r * r + 1.0f64).powi(3) - 2.0;
        let got = kid(&a, &b, &KidConfig::default()).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn bbox_of_mask() {
        let mut v = vec![0f32; 5 * 6];
        v[6 + 2] = 1.0;
        v[3 * 6 + 4] = 1.0;
        let m = Tensor::from_vec(v, (1, 5, 6), &candle_core::Device::Cpu).unwrap();
        assert_eq!(mask_bbox(&m).unwrap(), Some((1, 4, 2, 5)));
        let z = Tensor::zeros((1, 5, 6), DType::F32, &candle_core::Device::Cpu).unwrap();
        assert_eq!(mask_bbox(&z).unwrap(), None);
    }
}
