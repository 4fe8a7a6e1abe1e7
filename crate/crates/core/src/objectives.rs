//! Contrastive and margin losses over cosine similarities, with gradients.

use serde::{Deserialize, Serialize};

use crate::encoders::l2_normalize;
use crate::tensor::{dot, shape_err, Real, Tensor, TensorError};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Hinge margin `gamma`.
    pub margin: f64,
    /// Softmax temperature `tau`.
    pub temperature: f64,
    /// Also place each sample's negative captions in its image-to-text
    /// softmax denominator.
    pub neg_in_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            temperature: DEFAULT_TEMPERATURE,
            neg_in_denominator: false,
        }
    }
}

/// Cosine similarity.
pub fn similarity<F: Real>(u: &[F], v: &[F]) -> Result<F, TensorError> {
    if u.len() != v.len() {
        return Err(shape_err(
            "similarity",
            format!("{} vs {}", u.len(), v.len()),
        ));
    }
    let (u, _) = l2_normalize(u)?;
    let (v, _) = l2_normalize(v)?;
    Ok(dot(&u, &v))
}

/// `values[i][j] = <image_i, text_j>` of unit vectors, with temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<F = f32> {
    pub values: Tensor<F>,
    pub temperature: F,
}

impl<F: Real> SimilarityMatrix<F> {
    pub fn new(values: Tensor<F>, temperature: F) -> Result<Self, TensorError> {
        if values.shape().len() != 2 || values.rows() != values.cols() || values.rows() == 0 {
            return Err(shape_err(
                "similarity matrix",
                format!("{:?} is not square", values.shape()),
            ));
        }
        if !(temperature > F::zero()) {
            return Err(shape_err("similarity matrix", "temperature must be > 0"));
        }
        Ok(Self {
            values,
            temperature,
        })
    }

    /// Inputs must already be unit vectors.
    pub fn from_unit_embeddings(
        images: &[Vec<F>],
        texts: &[Vec<F>],
        temperature: F,
    ) -> Result<Self, TensorError> {
        if images.len() != texts.len() {
            return Err(shape_err(
                "similarity matrix",
                format!("{} images vs {} texts", images.len(), texts.len()),
            ));
        }
        let n = images.len();
        let mut values = Tensor::zeros(&[n, n]);
        for (i, img) in images.iter().enumerate() {
            for (j, txt) in texts.iter().enumerate() {
                values.data_mut()[i * n + j] = dot(img, txt);
            }
        }
        Self::new(values, temperature)
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }
}

/// `max(0, gamma - d + d_neg)` with `d`, `d_neg` similarities.
pub fn hinge_loss<F: Real>(d: F, d_neg: F, margin: F) -> F {
    (margin - d + d_neg).max(F::zero())
}

/// `(dL/dd, dL/dd_neg)`. At the kink the subgradient 0 is used.
pub fn hinge_loss_grad<F: Real>(d: F, d_neg: F, margin: F) -> (F, F) {
    if margin - d + d_neg > F::zero() {
        (-F::one(), F::one())
    } else {
        (F::zero(), F::zero())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNce<F> {
    pub i2t: F,
    pub t2i: F,
    pub itcl: F,
}

/// Gradients of `itcl` with respect to the similarity entries (not the
/// logits) and to any extra image-to-text negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad<F> {
    pub d_values: Tensor<F>,
    pub d_extra: Vec<Vec<F>>,
}

/// Row-wise cross entropy with targets on the diagonal; returns the mean
/// loss and `dL/dlogit` per row. `extra[i]` holds additional logits
/// appended to row `i`.
fn softmax_xent_rows<F: Real>(
    logits: &[F],
    n: usize,
    extra: &[Vec<F>],
    transpose: bool,
) -> (F, Vec<F>, Vec<Vec<F>>) {
    let at = |i: usize, j: usize| {
        if transpose {
            logits[j * n + i]
        } else {
            logits[i * n + j]
        }
    };
    let inv_n = F::one() / F::lit(n as f64);
    let mut loss = F::zero();
    let mut grad = vec![F::zero(); n * n];
    let mut grad_extra = Vec::with_capacity(n);
    for i in 0..n {
        let ex: &[F] = extra.get(i).map_or(&[], Vec::as_slice);
        let m = (0..n)
            .map(|j| at(i, j))
            .chain(ex.iter().copied())
            .fold(F::neg_infinity(), F::max);
        let mut z = (0..n).map(|j| (at(i, j) - m).exp()).sum::<F>();
        for &e in ex {
            z += (e - m).exp();
        }
        let log_z = z.ln() + m;
        loss += log_z - at(i, i);
        for j in 0..n {
            let p = (at(i, j) - log_z).exp();
            let g = (p - if i == j { F::one() } else { F::zero() }) * inv_n;
            let idx = if transpose { j * n + i } else { i * n + j };
            grad[idx] = g;
        }
        grad_extra.push(ex.iter().map(|&e| (e - log_z).exp() * inv_n).collect());
    }
    (loss * inv_n, grad, grad_extra)
}

/// Symmetric InfoNCE with optional extra image-to-text logits (similarities,
/// before temperature scaling) and its gradient.
pub fn info_nce_with_grad<F: Real>(
    sim: &SimilarityMatrix<F>,
    extra_i2t: &[Vec<F>],
) -> (InfoNce<F>, InfoNceGrad<F>) {
    let n = sim.n();
    let tau = sim.temperature;
    let logits: Vec<F> = sim.values.data().iter().map(|&s| s / tau).collect();
    let extra: Vec<Vec<F>> = extra_i2t
        .iter()
        .map(|e| e.iter().map(|&s| s / tau).collect())
        .collect();
    let (i2t, g_r, g_extra) = softmax_xent_rows(&logits, n, &extra, false);
    let (t2i, g_c, _) = softmax_xent_rows(&logits, n, &[], true);
    let half = F::lit(0.5);
    let d_values: Vec<F> = g_r
        .iter()
        .zip(&g_c)
        .map(|(&a, &b)| half * (a + b) / tau)
        .collect();
    let d_extra = g_extra
        .iter()
        .map(|row| row.iter().map(|&g| half * g / tau).collect())
        .collect();
    (
        InfoNce {
            i2t,
            t2i,
            itcl: half * (i2t + t2i),
        },
        InfoNceGrad {
            d_values: Tensor::new(vec![n, n], d_values).expect("square"),
            d_extra,
        },
    )
}

pub fn info_nce<F: Real>(sim: &SimilarityMatrix<F>) -> InfoNce<F> {
    info_nce_with_grad(sim, &[]).0
}

/// Mean of the available hinge terms plus the contrastive loss.
pub fn final_loss<F: Real>(batch_hinge_losses: &[F], itcl: F) -> F {
    mean_or_zero(batch_hinge_losses) + itcl
}

pub fn mean_or_zero<F: Real>(xs: &[F]) -> F {
    if xs.is_empty() {
        F::zero()
    } else {
        xs.iter().copied().sum::<F>() / F::lit(xs.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::rng::SeededRng;
    use crate::tensor::ParamStore;
    use approx::assert_abs_diff_eq;

    fn sim(rows: &[Vec<f64>], tau: f64) -> SimilarityMatrix<f64> {
        SimilarityMatrix::new(Tensor::from_rows(rows).unwrap(), tau).unwrap()
    }

    #[test]
    fn similarity_examples() {
        assert_abs_diff_eq!(
            similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            similarity(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert_eq!(
            similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(TensorError::ZeroVector)
        );
    }

    #[test]
    fn hinge_examples() {
        assert_abs_diff_eq!(hinge_loss(0.3, 0.3, 0.2), 0.2, epsilon = 1e-12);
        assert_eq!(hinge_loss(0.75, 0.5, 0.25), 0.0);
        assert_eq!(hinge_loss(1.0, 0.0, 0.2), 0.0);
    }

    #[test]
    fn info_nce_examples() {
        let one = info_nce(&sim(&[vec![0.4]], 0.07));
        assert_eq!((one.i2t, one.t2i, one.itcl), (0.0, 0.0, 0.0));
        let flat = info_nce(&sim(&[vec![0.3; 3], vec![0.3; 3], vec![0.3; 3]], 0.07));
        assert_abs_diff_eq!(flat.i2t, 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(flat.t2i, 3f64.ln(), epsilon = 1e-12);
        let id = info_nce(&sim(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0));
        assert_abs_diff_eq!(id.i2t, (1.0 + (-1f64).exp()).ln(), epsilon = 1e-12);
    }

    #[test]
    fn cold_temperature_drives_loss_to_zero() {
        let rows = [
            vec![0.9, 0.2, -0.1],
            vec![0.3, 0.5, 0.4],
            vec![0.0, 0.1, 0.2],
        ];
        let cold = info_nce(&sim(&rows, 1e-3));
        assert!(cold.i2t < 1e-3, "{}", cold.i2t);
        assert!(cold.i2t < info_nce(&sim(&rows, 0.07)).i2t);
    }

    #[test]
    fn final_loss_examples() {
        assert_eq!(final_loss(&[], 0.5), 0.5);
        assert_eq!(final_loss(&[0.0, 0.0], 0.5), 0.5);
        assert_abs_diff_eq!(final_loss(&[0.1], 0.5), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_matrix() {
        assert!(SimilarityMatrix::new(Tensor::<f64>::zeros(&[2, 3]), 0.1).is_err());
        assert!(SimilarityMatrix::new(Tensor::<f64>::zeros(&[2, 2]), 0.0).is_err());
    }

    fn loss_through_params(
        store: &mut ParamStore<f64>,
        backward: bool,
        extra: bool,
    ) -> Result<f64, TensorError> {
        let id = store.id("s").unwrap();
        let ide = store.id("neg").unwrap();
        let s = SimilarityMatrix::new(store.value(id).clone(), 0.5)?;
        let negs: Vec<Vec<f64>> = if extra {
            store.value(ide).data().iter().map(|&v| vec![v]).collect()
        } else {
            vec![]
        };
        let (nce, g) = info_nce_with_grad(&s, &negs);
        let n = s.n();
        let mut hinges = Vec::new();
        let mut dh = vec![(0.0, 0.0); n];
        for i in 0..n {
            let d = s.values.get(i, i);
            let dn = store.value(ide).data()[i];
            hinges.push(hinge_loss(d, dn, 0.3));
            dh[i] = hinge_loss_grad(d, dn, 0.3);
        }
        if backward {
            let inv = 1.0 / n as f64;
            let gs = store.grad_mut(id);
            gs.add_assign(&g.d_values)?;
            for (i, &(a, _)) in dh.iter().enumerate() {
                gs.data_mut()[i * n + i] += a * inv;
            }
            let gn = store.grad_mut(ide);
            for (i, &(_, b)) in dh.iter().enumerate() {
                gn.data_mut()[i] += b * inv + if extra { g.d_extra[i][0] } else { 0.0 };
            }
        }
        Ok(final_loss(&hinges, nce.itcl))
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for extra in [false, true] {
            let mut rng = SeededRng::new(9);
            let mut store = ParamStore::new();
            store.insert("s", Tensor::randn(&[4, 4], 0.5, &mut rng));
            store.insert("neg", Tensor::randn(&[4], 0.5, &mut rng));
            let report = finite_diff_check(
                |p, b| loss_through_params(p, b, extra),
                &mut store,
                1e-5,
                40,
                &mut rng,
            )
            .unwrap();
            assert!(report.max_relative_error < 1e-6, "{extra}: {report:?}");
        }
    }
}
