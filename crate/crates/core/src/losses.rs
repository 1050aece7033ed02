//! Training objective: noise regression, identity consistency, in-batch
//! triplet term and their weighted sum.
//!
//! Tensor versions are differentiable and used by the trainer; the `*_value`
//! helpers evaluate the same quantities on [`IdentityEmbedding`] slices.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::{cosine_distance, IdentityEmbedding};
use crate::nn::scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_trip: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_id: 0.1,
            lambda_trip: 0.05,
            margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_id", self.lambda_id),
            ("lambda_trip", self.lambda_trip),
            ("margin", self.margin),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// True when neither embedding term contributes to the objective.
    pub fn is_plain_diffusion(&self) -> bool {
        self.lambda_id == 0.0 && self.lambda_trip == 0.0
    }
}

/// Per-step loss values, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub denoise: f64,
    pub id: f64,
    pub triplet: f64,
    pub total: f64,
}

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Argument(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn embedding_batch(a: &Tensor, b: &Tensor, what: &str) -> Result<usize> {
    same_dims(a, b, what)?;
    match a.dims() {
        [0, _] => Err(Error::Argument(format!("{what}: empty batch"))),
        [n, _] => Ok(*n),
        d => Err(Error::Argument(format!(
            "{what}: expected [N, D] embeddings, got {d:?}"
        ))),
    }
}

/// Mean squared error over all elements.
pub fn denoise_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    same_dims(eps, eps_hat, "denoise loss")?;
    if eps.elem_count() == 0 {
        return Err(Error::Argument("denoise loss: empty tensors".into()));
    }
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

/// Row-wise cosine distance `1 - <a, b>` of unit rows.
///
/// Inputs are assumed normalized; normalization happens where embeddings are
/// produced, not here.
fn row_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((1.0 - (a * b)?.sum(D::Minus1)?)?)
}

/// `max(0, x)` with zero gradient at the kink.
fn hinge(x: &Tensor) -> Result<Tensor> {
    let active = x.gt(0.0)?.to_dtype(x.dtype())?;
    Ok((x * active)?)
}

/// Mean cosine distance between generated and conditioning embeddings.
pub fn id_loss(e_gen: &Tensor, e_cond: &Tensor) -> Result<Tensor> {
    embedding_batch(e_gen, e_cond, "identity loss")?;
    Ok(row_distance(e_gen, e_cond)?.mean_all()?)
}

/// `mean(max(0, d(gen, pos) - d(gen, neg) + margin))`.
pub fn triplet_loss(e_gen: &Tensor, e_pos: &Tensor, e_neg: &Tensor, margin: f64) -> Result<Tensor> {
    embedding_batch(e_gen, e_pos, "triplet loss (positive)")?;
    embedding_batch(e_gen, e_neg, "triplet loss (negative)")?;
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(Error::Argument(format!(
            "triplet margin must be >= 0, got {margin}"
        )));
    }
    let d_pos = row_distance(e_gen, e_pos)?;
    let d_neg = row_distance(e_gen, e_neg)?;
    Ok(hinge(&((d_pos - d_neg)? + margin)?)?.mean_all()?)
}

/// Identity loss on embedding values.
pub fn id_loss_value(e_gen: &[IdentityEmbedding], e_cond: &[IdentityEmbedding]) -> Result<f64> {
    if e_gen.is_empty() || e_gen.len() != e_cond.len() {
        return Err(Error::Argument(format!(
            "identity loss needs equal non-empty batches, got {} and {}",
            e_gen.len(),
            e_cond.len()
        )));
    }
    let mut sum = 0.0;
    for (g, c) in e_gen.iter().zip(e_cond) {
        sum += cosine_distance(g, c)?;
    }
    Ok(sum / e_gen.len() as f64)
}

/// Triplet loss on embedding values.
pub fn triplet_loss_value(
    e_gen: &[IdentityEmbedding],
    e_pos: &[IdentityEmbedding],
    e_neg: &[IdentityEmbedding],
    margin: f64,
) -> Result<f64> {
    if e_gen.is_empty() || e_gen.len() != e_pos.len() || e_gen.len() != e_neg.len() {
        return Err(Error::Argument(format!(
            "triplet loss needs equal non-empty batches, got {}, {}, {}",
            e_gen.len(),
            e_pos.len(),
            e_neg.len()
        )));
    }
    let mut sum = 0.0;
    for ((g, p), n) in e_gen.iter().zip(e_pos).zip(e_neg) {
        sum += (cosine_distance(g, p)? - cosine_distance(g, n)? + margin).max(0.0);
    }
    Ok(sum / e_gen.len() as f64)
}

/// Combines component values into a [`LossBreakdown`].
pub fn total_loss(
    denoise: f64,
    id: f64,
    triplet: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [("denoise", denoise), ("id", id), ("triplet", triplet)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBreakdown {
        denoise,
        id,
        triplet,
        total: denoise + weights.lambda_id * id + weights.lambda_trip * triplet,
    })
}

/// Differentiable weighted sum. Terms with a zero weight are left out of the
/// graph entirely, so they contribute no gradient.
pub fn total_loss_tensor(
    denoise: &Tensor,
    id: Option<&Tensor>,
    triplet: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let mut total = denoise.clone();
    let mut values = (scalar(denoise)?, 0.0, 0.0);
    if let Some(id) = id {
        values.1 = scalar(id)?;
        if weights.lambda_id != 0.0 {
            total = (total + (id * weights.lambda_id)?)?;
        }
    }
    if let Some(tr) = triplet {
        values.2 = scalar(tr)?;
        if weights.lambda_trip != 0.0 {
            total = (total + (tr * weights.lambda_trip)?)?;
        }
    }
    let breakdown = total_loss(values.0, values.1, values.2, weights)?;
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t2(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn denoise_cases() {
        let z = Tensor::new(&[0f64], &Device::Cpu).unwrap();
        let two = Tensor::new(&[2f64], &Device::Cpu).unwrap();
        assert_eq!(val(&denoise_loss(&z, &two).unwrap()), 4.0);
        assert_eq!(val(&denoise_loss(&two, &two).unwrap()), 0.0);
        let other = Tensor::zeros((2,), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(denoise_loss(&z, &other), Err(Error::Argument(_))));
    }

    #[test]
    fn id_cases() {
        let a = t2(&[&[1.0, 0.0]]);
        let b = t2(&[&[0.0, 1.0]]);
        assert_eq!(val(&id_loss(&a, &a).unwrap()), 0.0);
        assert_eq!(val(&id_loss(&a, &b).unwrap()), 1.0);
        // distances 0.2 and 0.6
        let (c2, c6) = (0.8f64, 0.4f64);
        let g = t2(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let c = t2(&[&[c2, (1.0 - c2 * c2).sqrt()], &[c6, (1.0 - c6 * c6).sqrt()]]);
        assert!((val(&id_loss(&g, &c).unwrap()) - 0.4).abs() < 1e-12);
        let empty = Tensor::zeros((0, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(id_loss(&empty, &empty), Err(Error::Argument(_))));
    }

    fn unit_at(cos: f64) -> [f64; 2] {
        [cos, (1.0 - cos * cos).sqrt()]
    }

    #[test]
    fn triplet_cases() {
        let g = t2(&[&[1.0, 0.0]]);
        // d_pos = 0.2, d_neg = 0.9
        let p = t2(&[&unit_at(0.8)]);
        let n = t2(&[&unit_at(0.1)]);
        assert_eq!(val(&triplet_loss(&g, &p, &n, 0.5).unwrap()), 0.0);
        // d_pos = d_neg
        assert!((val(&triplet_loss(&g, &p, &p, 0.3).unwrap()) - 0.3).abs() < 1e-12);
        // hinges 0 and 0.3
        let g2 = t2(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let p2 = t2(&[&unit_at(0.8), &unit_at(0.8)]);
        let n2 = t2(&[&unit_at(0.1), &unit_at(0.8)]);
        assert!((val(&triplet_loss(&g2, &p2, &n2, 0.3).unwrap()) - 0.15).abs() < 1e-12);
        assert!(matches!(
            triplet_loss(&g2, &p, &n2, 0.3),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn totals() {
        let w = LossWeights::default();
        let b = total_loss(1.0, 0.5, 0.2, &w).unwrap();
        assert!((b.total - 1.06).abs() < 1e-12);
        let zero = LossWeights {
            lambda_id: 0.0,
            lambda_trip: 0.0,
            margin: 0.3,
        };
        assert_eq!(total_loss(0.7, 0.5, 0.2, &zero).unwrap().total, 0.7);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, &w),
            Err(Error::Numerical(_))
        ));
        assert!(LossWeights {
            lambda_id: -1.0,
            ..w
        }
        .validate()
        .is_err());
    }

    #[test]
    fn value_helpers_agree_with_tensors() {
        let a = IdentityEmbedding::new(vec![1.0, 0.0]).unwrap();
        let b = IdentityEmbedding::new(unit_at(0.8).to_vec()).unwrap();
        let c = IdentityEmbedding::new(unit_at(0.1).to_vec()).unwrap();
        let v = triplet_loss_value(&[a.clone()], &[b.clone()], &[c.clone()], 0.9).unwrap();
        let t = triplet_loss(
            &t2(&[&[1.0, 0.0]]),
            &t2(&[&unit_at(0.8)]),
            &t2(&[&unit_at(0.1)]),
            0.9,
        )
        .unwrap();
        assert!((v - val(&t)).abs() < 1e-12);
        assert!((id_loss_value(&[a], &[b]).unwrap() - 0.2).abs() < 1e-12);
    }
}
