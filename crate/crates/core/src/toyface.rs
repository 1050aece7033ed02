//! Procedural face corpus with known identities and matching 468-point
//! landmarks.
//!
//! Identity is carried mostly by the eyes (iris color, eye size and spacing,
//! brows), less by the nose and only weakly by the mouth. Pose, lighting,
//! skin, hair, lip color and background vary per image.

use std::f64::consts::PI;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::emask::{face_boxes, facemesh, rasterize, FaceLandmarks};
use crate::error::{Error, Result};
use crate::imageio::{ensure_parent, rgb_to_tensor};
use crate::manifest::Region;
use crate::random::{self, SeededRng};

/// Stable per-identity appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub iris: [f64; 3],
    pub brow_color: [f64; 3],
    pub eye_sep: f64,
    pub eye_w: f64,
    pub eye_h: f64,
    pub brow_thick: f64,
    pub brow_tilt: f64,
    pub nose_w: f64,
    pub nose_len: f64,
    pub mouth_w: f64,
    pub mouth_h: f64,
    pub face_w: f64,
    pub face_h: f64,
}

/// Per-image variation unrelated to identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub light: f64,
    pub skin: [f64; 3],
    pub background: [f64; 3],
    pub hair: [f64; 3],
    pub lips: [f64; 3],
    pub gaze: f64,
    pub noise: f64,
    pub noise_seed: u64,
}

fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h * 6.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl IdentityParams {
    pub fn sample(rng: &mut SeededRng) -> Self {
        let iris = hsv(
            uniform(rng, 0.0, 1.0),
            uniform(rng, 0.6, 1.0),
            uniform(rng, 0.45, 0.95),
        );
        let bv = uniform(rng, 0.05, 0.55);
        let brow_color = hsv(uniform(rng, 0.0, 0.15), uniform(rng, 0.2, 0.7), bv);
        Self {
            iris,
            brow_color,
            eye_sep: uniform(rng, 0.26, 0.34),
            eye_w: uniform(rng, 0.075, 0.10),
            eye_h: uniform(rng, 0.035, 0.055),
            brow_thick: uniform(rng, 0.012, 0.032),
            brow_tilt: uniform(rng, -0.3, 0.3),
            nose_w: uniform(rng, 0.04, 0.08),
            nose_len: uniform(rng, 0.12, 0.16),
            mouth_w: uniform(rng, 0.085, 0.115),
            mouth_h: uniform(rng, 0.02, 0.032),
            face_w: uniform(rng, 0.30, 0.35),
            face_h: uniform(rng, 0.38, 0.41),
        }
    }
}

impl Nuisance {
    pub fn sample(rng: &mut SeededRng) -> Self {
        let skin_v = uniform(rng, 0.55, 0.95);
        Self {
            dx: uniform(rng, -0.025, 0.025),
            dy: uniform(rng, -0.02, 0.02),
            scale: uniform(rng, 0.96, 1.04),
            light: uniform(rng, 0.85, 1.15),
            skin: hsv(uniform(rng, 0.03, 0.1), uniform(rng, 0.25, 0.5), skin_v),
            background: [
                uniform(rng, 0.1, 0.9),
                uniform(rng, 0.1, 0.9),
                uniform(rng, 0.1, 0.9),
            ],
            hair: hsv(
                uniform(rng, 0.0, 1.0),
                uniform(rng, 0.1, 0.6),
                uniform(rng, 0.05, 0.6),
            ),
            lips: hsv(
                uniform(rng, 0.93, 1.0),
                uniform(rng, 0.35, 0.7),
                uniform(rng, 0.5, 0.85),
            ),
            gaze: uniform(rng, -0.2, 0.2),
            noise: 0.015,
            noise_seed: rng.random(),
        }
    }
}

/// Face-local geometry shared by the renderer and the landmark generator.
struct Layout {
    cx: f64,
    cy: f64,
    s: f64,
    eye_y: f64,
    brow_y: f64,
    nose_top: f64,
    nose_bottom: f64,
    mouth_y: f64,
}

impl Layout {
    fn new(id: &IdentityParams, nz: &Nuisance) -> Self {
        let eye_y = -0.08;
        let nose_top = eye_y + id.eye_h * 0.5;
        let nose_bottom = eye_y + 0.08 + id.nose_len;
        Self {
            cx: 0.5 + nz.dx,
            cy: 0.5 + nz.dy,
            s: nz.scale,
            eye_y,
            brow_y: eye_y - id.eye_h - 0.03 - id.brow_thick * 0.5,
            nose_top,
            nose_bottom,
            mouth_y: nose_bottom + 0.045 + id.mouth_h,
        }
    }

    /// Face-local to normalized image coordinates.
    fn to_image(&self, x: f64, y: f64) -> (f64, f64) {
        (self.cx + self.s * x, self.cy + self.s * y)
    }

    fn to_local(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) / self.s, (v - self.cy) / self.s)
    }
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

fn nose_half_width(id: &IdentityParams, lay: &Layout, y: f64) -> Option<f64> {
    if y < lay.nose_top || y > lay.nose_bottom {
        return None;
    }
    let f = (y - lay.nose_top) / (lay.nose_bottom - lay.nose_top);
    Some(0.012 + (id.nose_w - 0.012) * f.powf(1.5))
}

fn shade(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

/// Color of one face-local sample point.
fn color_at(id: &IdentityParams, nz: &Nuisance, lay: &Layout, x: f64, y: f64) -> [f64; 3] {
    let skin = shade(nz.skin, nz.light);
    let mut c = nz.background;
    if in_ellipse(x, y, 0.0, -0.12, id.face_w * 1.12, id.face_h * 0.85) {
        c = shade(nz.hair, nz.light);
    }
    if in_ellipse(x, y, 0.0, 0.02, id.face_w, id.face_h) {
        c = skin;
    }
    for side in [-1.0, 1.0] {
        let ex = side * id.eye_sep * 0.5;
        // Brow: a tilted bar above each eye, mirrored between sides.
        let (bx, by) = (x - ex, y - lay.brow_y);
        let tilt = side * id.brow_tilt;
        let along = bx * tilt.cos() + by * tilt.sin();
        let across = -bx * tilt.sin() + by * tilt.cos();
        if along.abs() <= id.eye_w * 1.1 && across.abs() <= id.brow_thick * 0.5 {
            c = shade(id.brow_color, nz.light);
        }
        if in_ellipse(x, y, ex, lay.eye_y, id.eye_w, id.eye_h) {
            c = shade([0.95, 0.95, 0.93], nz.light);
            let r_iris = (id.eye_h * 0.95).min(id.eye_w * 0.6);
            let ix = ex + nz.gaze * id.eye_w;
            if in_ellipse(x, y, ix, lay.eye_y, r_iris, r_iris) {
                c = shade(id.iris, nz.light);
            }
            if in_ellipse(x, y, ix, lay.eye_y, r_iris * 0.4, r_iris * 0.4) {
                c = [0.03, 0.03, 0.03];
            }
        }
    }
    if let Some(hw) = nose_half_width(id, lay, y) {
        if x.abs() <= hw {
            c = shade(skin, 0.8);
        }
    }
    for side in [-1.0, 1.0] {
        if in_ellipse(
            x,
            y,
            side * id.nose_w * 0.55,
            lay.nose_bottom - 0.01,
            id.nose_w * 0.28,
            0.01,
        ) {
            c = shade(skin, 0.45);
        }
    }
    if in_ellipse(x, y, 0.0, lay.mouth_y, id.mouth_w, id.mouth_h) {
        c = shade(nz.lips, nz.light);
        if (y - lay.mouth_y).abs() <= 0.004 {
            c = shade(nz.lips, 0.4);
        }
    }
    c
}

const SUPERSAMPLE: usize = 4;

/// Renders one `size x size` RGB face.
pub fn render(id: &IdentityParams, nz: &Nuisance, size: usize) -> Vec<u8> {
    let lay = Layout::new(id, nz);
    let mut noise_rng = random::rng(nz.noise_seed);
    let mut out = vec![0u8; size * size * 3];
    let inv = 1.0 / (size * SUPERSAMPLE) as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = ((px * SUPERSAMPLE + sx) as f64 + 0.5) * inv;
                    let v = ((py * SUPERSAMPLE + sy) as f64 + 0.5) * inv;
                    let (x, y) = lay.to_local(u, v);
                    let c = color_at(id, nz, &lay, x, y);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for k in 0..3 {
                let e: f64 = noise_rng.sample(StandardNormal);
                let v = acc[k] / n + nz.noise * e;
                out[(py * size + px) * 3 + k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// 468 landmarks consistent with [`render`]'s geometry.
pub fn landmarks(id: &IdentityParams, nz: &Nuisance) -> Result<FaceLandmarks> {
    let lay = Layout::new(id, nz);
    let idx = facemesh();
    let mut pts: Vec<Option<(f64, f64)>> = vec![None; idx.points];
    let ring = |n: usize, cx: f64, cy: f64, rx: f64, ry: f64| -> Vec<(f64, f64)> {
        (0..n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect()
    };
    let mut place = |indices: &[usize], local: Vec<(f64, f64)>| {
        for (&i, p) in indices.iter().zip(local) {
            pts[i] = Some(p);
        }
    };
    place(
        &idx.left_eye,
        ring(16, -id.eye_sep * 0.5, lay.eye_y, id.eye_w, id.eye_h),
    );
    place(
        &idx.right_eye,
        ring(16, id.eye_sep * 0.5, lay.eye_y, id.eye_w, id.eye_h),
    );
    let mut nose = Vec::new();
    for k in 0..8 {
        let y = lay.nose_top + (lay.nose_bottom - lay.nose_top) * k as f64 / 7.0;
        let hw = nose_half_width(id, &lay, y).unwrap_or(0.012);
        nose.push((-hw, y));
        nose.push((hw, y));
    }
    for k in 0..4 {
        nose.push((id.nose_w * (-0.6 + 0.4 * k as f64), lay.nose_bottom));
    }
    for k in 0..4 {
        let y = lay.nose_top + (lay.nose_bottom - lay.nose_top) * (k as f64 + 0.5) / 4.0;
        nose.push((0.0, y));
    }
    place(&idx.nose, nose);
    let mut lips = ring(20, 0.0, lay.mouth_y, id.mouth_w, id.mouth_h);
    lips.extend(ring(
        20,
        0.0,
        lay.mouth_y,
        id.mouth_w * 0.8,
        id.mouth_h * 0.35,
    ));
    place(&idx.lips, lips);
    place(&idx.face_oval, ring(36, 0.0, 0.02, id.face_w, id.face_h));
    let rest: Vec<usize> = (0..idx.points).filter(|&i| pts[i].is_none()).collect();
    let golden = PI * (3.0 - 5f64.sqrt());
    for (j, &i) in rest.iter().enumerate() {
        let r = 0.15 + 0.8 * (j as f64 + 0.5) / rest.len() as f64;
        let a = golden * j as f64;
        pts[i] = Some((id.face_w * r * a.cos(), 0.02 + id.face_h * r * a.sin()));
    }
    let points = pts
        .into_iter()
        .map(|p| {
            let (x, y) = p.expect("every landmark placed");
            let rx = x / id.face_w;
            let ry = (y - 0.02) / id.face_h;
            let z = -0.1 * (1.0 - rx * rx - ry * ry).max(0.0).sqrt();
            let (u, v) = lay.to_image(x, y);
            [u, v, z]
        })
        .collect();
    FaceLandmarks::new(points, idx.points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyFaceConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub image_size: usize,
    /// Seed of the identity parameters.
    pub identity_seed: u64,
    /// Seed of the per-image variation.
    pub sample_seed: u64,
}

impl Default for ToyFaceConfig {
    fn default() -> Self {
        Self {
            identities: 24,
            images_per_identity: 8,
            image_size: 64,
            identity_seed: 0,
            sample_seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FaceSample {
    pub name: String,
    pub identity: usize,
    pub pixels: Vec<u8>,
    pub landmarks: FaceLandmarks,
}

pub fn identity_params(identity_seed: u64, identity: usize) -> IdentityParams {
    let mut rng = random::derived(
        identity_seed.wrapping_add(identity as u64 * 0x9E37_79B9),
        "toy-identity",
    );
    IdentityParams::sample(&mut rng)
}

pub fn nuisance(sample_seed: u64, identity: usize, k: usize) -> Nuisance {
    let key = sample_seed ^ ((identity as u64) << 32) ^ k as u64;
    let mut rng = random::derived(key, "toy-nuisance");
    Nuisance::sample(&mut rng)
}

/// Renders the whole corpus, identity-major.
pub fn generate(cfg: &ToyFaceConfig) -> Result<Vec<FaceSample>> {
    if cfg.identities == 0 || cfg.images_per_identity == 0 || cfg.image_size < 8 {
        return Err(Error::Config(
            "toy corpus needs identities, images and size >= 8".into(),
        ));
    }
    let mut out = Vec::with_capacity(cfg.identities * cfg.images_per_identity);
    for i in 0..cfg.identities {
        let id = identity_params(cfg.identity_seed, i);
        for k in 0..cfg.images_per_identity {
            let nz = nuisance(cfg.sample_seed, i, k);
            out.push(FaceSample {
                name: format!("id{i:03}_{k:02}"),
                identity: i,
                pixels: render(&id, &nz, cfg.image_size),
                landmarks: landmarks(&id, &nz)?,
            });
        }
    }
    Ok(out)
}

/// `[N, 3, S, S]` images in `[-1, 1]` and identity labels.
pub fn to_tensors(samples: &[FaceSample], size: usize) -> Result<(Tensor, Vec<usize>)> {
    let imgs = samples
        .iter()
        .map(|s| rgb_to_tensor(&s.pixels, size, size))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Tensor::stack(&imgs, 0)?,
        samples.iter().map(|s| s.identity).collect(),
    ))
}

/// E-Mask boxes rasterized in memory: one `[N, 1, S, S]` tensor per region,
/// in [`Region::ALL`] order.
pub fn region_masks(
    samples: &[FaceSample],
    size: usize,
    pad_frac: f64,
) -> Result<Vec<(Region, Tensor)>> {
    let mut per_region: Vec<Vec<f32>> = vec![Vec::new(); 3];
    for s in samples {
        let boxes = face_boxes(&s.landmarks, facemesh(), size, size, pad_frac, &s.name)?;
        for (r, b) in boxes.iter().enumerate() {
            per_region[r].extend(rasterize(b, size, size)?.iter().map(|&v| v as f32));
        }
    }
    Region::ALL
        .iter()
        .zip(per_region)
        .map(|(&r, v)| {
            Ok((
                r,
                Tensor::from_vec(v, (samples.len(), 1, size, size), &Device::Cpu)?,
            ))
        })
        .collect()
}

/// Writes `images/*.png`, `images/identities.csv` and `landmarks/*.txt`.
pub fn write_corpus(samples: &[FaceSample], size: usize, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let lms = dir.join("landmarks");
    let mut csv = String::from("image,identity\n");
    for s in samples {
        let p = images.join(format!("{}.png", s.name));
        ensure_parent(&p)?;
        image::RgbImage::from_raw(size as u32, size as u32, s.pixels.clone())
            .ok_or_else(|| Error::Argument("pixel buffer size mismatch".into()))?
            .save(&p)
            .map_err(|e| Error::image(&p, e))?;
        let l = lms.join(format!("{}.txt", s.name));
        ensure_parent(&l)?;
        std::fs::write(&l, s.landmarks.to_text()).map_err(|e| Error::io(&l, e))?;
        csv.push_str(&format!("{}.png,id{:03}\n", s.name, s.identity));
    }
    let c = images.join("identities.csv");
    std::fs::write(&c, csv).map_err(|e| Error::io(&c, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emask::region_envelope;

    #[test]
    fn deterministic_and_identity_stable() {
        let cfg = ToyFaceConfig {
            identities: 2,
            images_per_identity: 2,
            image_size: 16,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a[3].pixels, b[3].pixels);
        assert_ne!(a[0].pixels, a[1].pixels);
        assert_eq!(identity_params(0, 1), identity_params(0, 1));
        assert_ne!(identity_params(0, 1), identity_params(0, 2));
    }

    #[test]
    fn landmarks_give_valid_disjoint_boxes() {
        for i in 0..200 {
            let id = identity_params(3, i);
            let nz = nuisance(5, i, 0);
            let lm = landmarks(&id, &nz).unwrap();
            let boxes = face_boxes(&lm, facemesh(), 32, 32, 0.25, "toy").unwrap();
            for a in 0..3 {
                for b in a + 1..3 {
                    assert_eq!(boxes[a].intersection_area(&boxes[b]), 0);
                }
            }
            let env = region_envelope(&lm, Region::Eyes, facemesh(), 32, 32, 0.25).unwrap();
            assert!(env[0] > 0.0 && env[2] < 32.0);
        }
    }
}
