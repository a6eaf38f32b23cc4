//! Contrastive disentanglement between the shared and specific banks.

use crate::error::{Error, Result};
use crate::promptbank::PromptBank;
use crate::tensor::{dot, l2_norm, log_sum_exp, softmax_in_place, Matrix, Real};

fn unit_rows<T: Real>(bank: &PromptBank<T>) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut rows = Vec::with_capacity(bank.len());
    let mut norms = Vec::with_capacity(bank.len());
    for r in 0..bank.len() {
        let row: Vec<f64> = bank.values.row(r).iter().map(|x| x.as_f64()).collect();
        let n = l2_norm(&row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numeric(format!("{} prompt row {r} has norm {n}", bank.kind)));
        }
        rows.push(row.iter().map(|x| x / n).collect());
        norms.push(n);
    }
    Ok((rows, norms))
}

struct Similarities {
    shared: Vec<Vec<f64>>,
    spec: Vec<Vec<f64>>,
    spec_norms: Vec<f64>,
    cos: Vec<Vec<f64>>,
}

fn similarities<T: Real>(shared: &PromptBank<T>, spec: &PromptBank<T>, tau: f64) -> Result<Similarities> {
    if shared.len() != spec.len() || shared.dim() != spec.dim() {
        return Err(Error::Shape(format!(
            "banks differ: shared {}x{} vs specific {}x{}",
            shared.len(),
            shared.dim(),
            spec.len(),
            spec.dim()
        )));
    }
    if shared.is_empty() {
        return Err(Error::Shape("prompt banks have no rows".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let (a, _) = unit_rows(shared)?;
    let (b, spec_norms) = unit_rows(spec)?;
    let cos = a.iter().map(|ai| b.iter().map(|bj| dot(ai, bj)).collect()).collect();
    Ok(Similarities {
        shared: a,
        spec: b,
        spec_norms,
        cos,
    })
}

/// `−(1/L) Σ_i log softmax_j(cos(s_i, p_j)/τ)[i]`.
pub fn disentanglement_loss<T: Real>(shared: &PromptBank<T>, spec: &PromptBank<T>, tau: f64) -> Result<f64> {
    let sim = similarities(shared, spec, tau)?;
    Ok(loss_from(&sim.cos, tau))
}

fn loss_from(cos: &[Vec<f64>], tau: f64) -> f64 {
    let l = cos.len();
    cos.iter()
        .enumerate()
        .map(|(i, row)| {
            let logits: Vec<f64> = row.iter().map(|c| c / tau).collect();
            log_sum_exp(&logits) - logits[i]
        })
        .sum::<f64>()
        / l as f64
}

/// Loss and its gradient with respect to the specific bank only.
pub fn disentanglement_spec_gradient<T: Real>(
    shared: &PromptBank<T>,
    spec: &PromptBank<T>,
    tau: f64,
) -> Result<(f64, Matrix<f64>)> {
    let sim = similarities(shared, spec, tau)?;
    let (l, d) = (spec.len(), spec.dim());
    let mut grad = Matrix::zeros(l, d);
    for (i, row) in sim.cos.iter().enumerate() {
        let mut p: Vec<f64> = row.iter().map(|c| c / tau).collect();
        softmax_in_place(&mut p);
        p[i] -= 1.0;
        for (j, &pij) in p.iter().enumerate() {
            // d cos(a_i, p_j) / d p_j = (a_i − cos·b_j) / |p_j|
            let coef = pij / (tau * l as f64 * sim.spec_norms[j]);
            let g = grad.row_mut(j);
            for k in 0..d {
                g[k] += coef * (sim.shared[i][k] - row[j] * sim.spec[j][k]);
            }
        }
    }
    Ok((loss_from(&sim.cos, tau), grad))
}
