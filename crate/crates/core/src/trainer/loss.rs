use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::real::Real;

/// Mean loss over the anchors and its gradient on the anchor rows.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Array2<T>,
}

fn norms<T: Real>(m: ArrayView2<'_, T>) -> Array1<T> {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn unit<T: Real>(v: ArrayView1<'_, T>, n: T) -> Array1<T> {
    if n > T::zero() {
        v.mapv(|x| x / n)
    } else {
        v.to_owned()
    }
}

/// NCE loss with cosine similarities over decoded code vectors.
///
/// Row `i` of `anchors` is contrasted against row `i` of `positives` and the
/// rows `negatives[selected[i]]`. Positives and negatives are constants; the
/// gradient covers the anchors only.
pub fn contrastive_loss<T: Real>(
    anchors: ArrayView2<'_, T>,
    positives: ArrayView2<'_, T>,
    negatives: ArrayView2<'_, T>,
    selected: &[Vec<usize>],
    temperature: T,
) -> Result<LossOutput<T>> {
    let n = anchors.nrows();
    let m = anchors.ncols();
    if positives.dim() != (n, m) || selected.len() != n {
        return Err(Error::invalid("anchor, positive and selection counts differ"));
    }
    if negatives.ncols() != m && negatives.nrows() > 0 {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: negatives.ncols(),
        });
    }
    if let Some(&bad) = selected.iter().flatten().find(|&&j| j >= negatives.nrows()) {
        return Err(Error::invalid(format!("negative index {bad} out of range")));
    }
    if temperature <= T::zero() {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut grad = Array2::zeros((n, m));
    if n == 0 {
        return Ok(LossOutput { loss: T::zero(), grad });
    }
    let a_norm = norms(anchors);
    let p_norm = norms(positives);
    let n_norm = norms(negatives);
    let inv_tau = T::one() / temperature;
    let scale = T::one() / T::lit(n as f64);
    let mut total = T::zero();

    for i in 0..n {
        let a = unit(anchors.row(i), a_norm[i]);
        let mut keys = Vec::with_capacity(1 + selected[i].len());
        keys.push(unit(positives.row(i), p_norm[i]));
        keys.extend(selected[i].iter().map(|&j| unit(negatives.row(j), n_norm[j])));
        let logits: Vec<T> = keys.iter().map(|k| a.dot(k) * inv_tau).collect();
        let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let weights: Vec<T> = logits.iter().map(|&z| (z - top).exp()).collect();
        let z: T = weights.iter().copied().sum();
        total += top + z.ln() - logits[0];

        // d loss / d a_hat = (sum_k softmax_k * k - k_pos) / tau
        let mut g = keys[0].mapv(|v| -v);
        for (k, &w) in keys.iter().zip(&weights) {
            g.scaled_add(w / z, k);
        }
        g.mapv_inplace(|v| v * inv_tau * scale);
        // through a_hat = a / |a|
        if a_norm[i] > T::zero() {
            let proj = g.dot(&a);
            g.scaled_add(-proj, &a);
            g.mapv_inplace(|v| v / a_norm[i]);
        }
        grad.row_mut(i).assign(&g);
    }
    Ok(LossOutput {
        loss: total * scale,
        grad,
    })
}
