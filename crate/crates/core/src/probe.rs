//! Multinomial logistic-regression probe for measuring linear decodability.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::softmax;
use crate::error::{Error, Result};
use crate::evidential::argmax;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Softmax regression on standardised features, fit by full-batch gradient descent.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `classes x (dim + 1)`, bias last.
    weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    pub fn fit(xs: &[Vec<f64>], labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(Error::Shape("probe needs aligned, non-empty inputs".into()));
        }
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
        }
        let mut scale = vec![0.0; d];
        for x in xs {
            scale
                .iter_mut()
                .zip(x.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        // constant features are dropped by giving them zero scale
        scale.iter_mut().for_each(|s| {
            *s = if *s > 1e-18 { 1.0 / s.sqrt() } else { 0.0 };
        });
        let mut probe = Self {
            mean,
            scale,
            weights: vec![vec![0.0; d + 1]; classes],
        };
        let standardised: Vec<Vec<f64>> = xs.iter().map(|x| probe.standardise(x)).collect();
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for _ in 0..cfg.iterations {
            grad.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            for (x, &label) in standardised.iter().zip(labels) {
                let p = softmax(&probe.logits_std(x));
                for (c, g) in grad.iter_mut().enumerate() {
                    let r = p[c] - if c == label { 1.0 } else { 0.0 };
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += r * xj / n;
                    }
                    g[d] += r / n;
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                for j in 0..=d {
                    let reg = if j < d { cfg.l2 * w[j] } else { 0.0 };
                    w[j] -= cfg.lr * (g[j] + reg);
                }
            }
        }
        Ok(probe)
    }

    fn standardise(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) * s)
            .collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        self.weights
            .iter()
            .map(|w| w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d])
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits_std(&self.standardise(x)))
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], labels: &[usize]) -> f64 {
        let correct = xs
            .iter()
            .zip(labels)
            .filter(|(x, &l)| self.predict(x) == l)
            .count();
        correct as f64 / xs.len() as f64
    }
}

/// Held-out accuracy of a fresh probe predicting `groups` from `xs`.
///
/// Every group is subsampled to the size of the smallest one, so chance
/// level is `1 / num_groups`. Half of each group trains the probe, the other
/// half is scored.
pub fn balanced_group_probe(
    xs: &[Vec<f64>],
    groups: &[usize],
    num_groups: usize,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if xs.len() != groups.len() {
        return Err(Error::Shape("features and groups differ in length".into()));
    }
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); num_groups];
    for (i, &g) in groups.iter().enumerate() {
        if g >= num_groups {
            return Err(Error::Domain(format!("group {g} out of range")));
        }
        by_group[g].push(i);
    }
    let per_group = by_group.iter().map(Vec::len).min().unwrap_or(0);
    if per_group < 2 {
        return Err(Error::Empty("each group needs at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (vec![], vec![], vec![], vec![]);
    for (g, idx) in by_group.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        let half = per_group / 2;
        for (k, &i) in idx[..per_group].iter().enumerate() {
            if k < half {
                train_x.push(xs[i].clone());
                train_y.push(g);
            } else {
                test_x.push(xs[i].clone());
                test_y.push(g);
            }
        }
    }
    let probe = LinearProbe::fit(&train_x, &train_y, num_groups, cfg)?;
    Ok(probe.accuracy(&test_x, &test_y))
}
