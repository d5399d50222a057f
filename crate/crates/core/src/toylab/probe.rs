use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full-batch gradient descent budget for the logistic probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 200,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

/// Held-out accuracy of a multinomial logistic classifier predicting camera
/// from embeddings. Within each camera, items alternate between the fitting
/// half and the scoring half in order of appearance.
/// Features are standardized with fit-set statistics; prediction ties go to
/// the lowest camera id.
pub fn camera_probe(embeddings: &[Vec<f64>], cameras: &[u32]) -> Result<f64> {
    camera_probe_with(embeddings, cameras, &ProbeConfig::default())
}

pub fn camera_probe_with(embeddings: &[Vec<f64>], cameras: &[u32], config: &ProbeConfig) -> Result<f64> {
    if embeddings.len() != cameras.len() {
        return Err(Error::invalid(format!(
            "{} embeddings but {} camera labels",
            embeddings.len(),
            cameras.len()
        )));
    }
    if embeddings.len() < 2 {
        return Err(Error::Empty("camera probe needs at least two samples".into()));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::invalid("embeddings differ in length"));
    }
    let mut classes: Vec<u32> = cameras.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("camera probe needs at least two cameras"));
    }
    let class_of = |c: u32| classes.binary_search(&c).expect("label drawn from classes");
    let k = classes.len();

    let mut seen = vec![0usize; k];
    let (mut fit, mut score) = (Vec::new(), Vec::new());
    for (i, &c) in cameras.iter().enumerate() {
        let slot = &mut seen[class_of(c)];
        if slot.is_multiple_of(2) { fit.push(i) } else { score.push(i) }
        *slot += 1;
    }
    if score.is_empty() {
        return Err(Error::Empty("no camera has a second sample to score".into()));
    }

    let nf = fit.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| fit.iter().map(|&i| embeddings[i][j]).sum::<f64>() / nf)
        .collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            let v = fit.iter().map(|&i| (embeddings[i][j] - mean[j]).powi(2)).sum::<f64>() / nf;
            v.sqrt()
        })
        .collect();
    let standardize = |i: usize| -> Vec<f64> {
        (0..dim)
            .map(|j| if std[j] > 1e-12 { (embeddings[i][j] - mean[j]) / std[j] } else { 0.0 })
            .collect()
    };
    let xs: Vec<Vec<f64>> = fit.iter().map(|&i| standardize(i)).collect();
    let ys: Vec<usize> = fit.iter().map(|&i| class_of(cameras[i])).collect();

    // weights[c] holds dim coefficients followed by the bias.
    let mut weights = vec![vec![0.0; dim + 1]; k];
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[dim] + wc[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..config.iterations {
        let mut grad = vec![vec![0.0; dim + 1]; k];
        for (x, &y) in xs.iter().zip(&ys) {
            let z = logits(&weights, x);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..k {
                let d = e[c] / total - if c == y { 1.0 } else { 0.0 };
                for j in 0..dim {
                    grad[c][j] += d * x[j];
                }
                grad[c][dim] += d;
            }
        }
        for (wc, gc) in weights.iter_mut().zip(&grad) {
            for j in 0..=dim {
                let reg = if j < dim { config.l2 * wc[j] } else { 0.0 };
                wc[j] -= config.learning_rate * (gc[j] / nf + reg);
            }
        }
    }

    let correct = score
        .iter()
        .filter(|&&i| {
            let z = logits(&weights, &standardize(i));
            let mut best = 0;
            for c in 1..k {
                if z[c] > z[best] {
                    best = c;
                }
            }
            best == class_of(cameras[i])
        })
        .count();
    Ok(correct as f64 / score.len() as f64)
}
