use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::N_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmHyper {
    /// Inverse regularization strength.
    pub c: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SvmHyper {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iter: 1000,
            tol: 1e-4,
        }
    }
}

/// One-vs-rest linear SVM on standardized inputs. The bias is learned as the
/// weight of a constant feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dual coordinate descent for the L2-regularized hinge loss.
fn fit_binary(
    z: &[Vec<f64>],
    sign: &[f64],
    hyper: &SvmHyper,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64) {
    let n = z.len();
    let d = z[0].len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut alpha = vec![0.0; n];
    let qd: Vec<f64> = z.iter().map(|x| dot(x, x) + 1.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..hyper.max_iter {
        order.shuffle(rng);
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for &i in &order {
            let g = sign[i] * (dot(&w, &z[i]) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == hyper.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, hyper.c);
                let delta = (alpha[i] - old) * sign[i];
                for (wj, xj) in w.iter_mut().zip(&z[i]) {
                    *wj += delta * xj;
                }
                b += delta;
            }
        }
        if pg_max - pg_min <= hyper.tol {
            break;
        }
    }
    (w, b)
}

pub fn fit_svm(x: &[Vec<f64>], y: &[usize], hyper: &SvmHyper, seed: u64) -> LinearSvm {
    let n = x.len() as f64;
    let d = x[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = x.iter().map(|r| standardized(r, &mean, &scale)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(N_CLASSES);
    let mut bias = Vec::with_capacity(N_CLASSES);
    for class in 0..N_CLASSES {
        let sign: Vec<f64> = y
            .iter()
            .map(|&c| if c == class { 1.0 } else { -1.0 })
            .collect();
        let (w, b) = fit_binary(&z, &sign, hyper, &mut rng);
        weights.push(w);
        bias.push(b);
    }
    LinearSvm {
        mean,
        scale,
        weights,
        bias,
    }
}

fn standardized(x: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(mean)
        .zip(scale)
        .map(|((v, m), s)| (v - m) / s)
        .collect()
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> [f64; N_CLASSES] {
        let z = standardized(x, &self.mean, &self.scale);
        let mut out = [0.0; N_CLASSES];
        for (k, o) in out.iter_mut().enumerate() {
            *o = dot(&self.weights[k], &z) + self.bias[k];
        }
        out
    }
}
