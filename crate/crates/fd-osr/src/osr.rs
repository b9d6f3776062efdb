//! Centroid-based open-set recognition: per-class (or per-cluster)
//! centroids over content features, a percentile outlier threshold, and
//! the reject-or-classify decision rule. Includes the K-Means path for
//! the unsupervised scenario.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Verdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CentroidMode {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Centroid {
    pub id: usize,
    pub values: Vec<f64>,
}

/// The entire OSR decision state: centroids plus the outlier threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CentroidModel {
    pub mode: CentroidMode,
    pub threshold: f64,
    pub centroids: Vec<Centroid>,
}

#[derive(Debug, Clone)]
pub struct OsrPrediction {
    pub verdict: Verdict,
    pub outlier_score: f64,
    pub class_probabilities: Vec<f64>,
}

impl CentroidModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].values.len()
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}", self.dim()),
                actual: format!("{}", z.len()),
            });
        }
        Ok(())
    }

    /// Min over centroids of the squared Euclidean distance to `z`.
    pub fn outlier_score(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        Ok(self
            .centroids
            .iter()
            .map(|c| sq_dist(&c.values, z))
            .fold(f64::INFINITY, f64::min))
    }

    /// Softmax over negative squared distances, with max-subtraction.
    pub fn class_probabilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let logits: Vec<f64> = self
            .centroids
            .iter()
            .map(|c| -sq_dist(&c.values, z))
            .collect();
        Ok(stable_softmax(&logits))
    }

    /// The open-set decision: reject when the outlier score exceeds the
    /// threshold, otherwise classify by the applicable probabilities.
    ///
    /// `classifier_probs` carries the class-head softmax for runs
    /// fine-tuned with a classification loss; when absent, the
    /// distance-based probabilities are used. Argmax ties break toward
    /// the smallest centroid id.
    pub fn predict(&self, z: &[f64], classifier_probs: Option<&[f64]>) -> Result<OsrPrediction> {
        let score = self.outlier_score(z)?;
        let probs = match classifier_probs {
            Some(p) => {
                if p.len() != self.k() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{}", self.k()),
                        actual: format!("{}", p.len()),
                    });
                }
                p.to_vec()
            }
            None => self.class_probabilities(z)?,
        };
        let verdict = if score > self.threshold {
            Verdict::Unknown
        } else {
            let mut best = 0;
            for i in 1..probs.len() {
                if probs[i] > probs[best] {
                    best = i;
                }
            }
            Verdict::Known(self.centroids[best].id)
        };
        Ok(OsrPrediction {
            verdict,
            outlier_score: score,
            class_probabilities: probs,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-class componentwise means of the content features.
pub fn compute_centroids(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Centroid>> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::Eval("empty or mismatched embedding table".into()));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let dim = embeddings[0].len();
    let mut out = Vec::with_capacity(classes.len());
    for c in classes {
        let mut mu = vec![0.0; dim];
        let mut n = 0usize;
        for (e, &l) in embeddings.iter().zip(labels) {
            if l == c {
                for (m, v) in mu.iter_mut().zip(e) {
                    *m += v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Eval(format!("class {c} has no samples")));
        }
        for m in &mut mu {
            *m /= n as f64;
        }
        out.push(Centroid { id: c, values: mu });
    }
    Ok(out)
}

/// Nearest-rank percentile of the training-set outlier scores: the value
/// at 1-based index ceil(q * n) of the ascending sort.
pub fn compute_threshold(model: &CentroidModel, train_embeddings: &[Vec<f64>], q: f64) -> Result<f64> {
    if train_embeddings.is_empty() {
        return Err(Error::Eval("empty threshold reference set".into()));
    }
    let mut scores: Vec<f64> = train_embeddings
        .iter()
        .map(|z| model.outlier_score(z))
        .collect::<Result<_>>()?;
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = scores.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    Ok(scores[rank - 1])
}

/// K-Means over content features with k-means++ seeding. Deterministic
/// for a given seed; iterates until assignments stabilize (max 300).
pub fn cluster_contents(embeddings: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Centroid>> {
    let n = embeddings.len();
    if n < k {
        return Err(Error::Eval(format!("{n} samples < k = {k}")));
    }
    let dim = embeddings[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(embeddings[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = embeddings
        .iter()
        .map(|e| sq_dist(e, &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(embeddings[next].clone());
        for (i, e) in embeddings.iter().enumerate() {
            let d = sq_dist(e, centers.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for (i, e) in embeddings.iter().enumerate() {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (c, mu) in centers.iter().enumerate() {
                let d = sq_dist(e, mu);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (e, &a) in embeddings.iter().zip(&assign) {
            for (s, v) in sums[a].iter_mut().zip(e) {
                *s += v;
            }
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in &mut sums[c] {
                    *s /= counts[c] as f64;
                }
                centers[c] = sums[c].clone();
            }
            // empty clusters keep their previous center
        }
    }

    Ok(centers
        .into_iter()
        .enumerate()
        .map(|(id, values)| Centroid { id, values })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn pad6(v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        out.resize(6, 0.0);
        out
    }

    fn model(centroids: Vec<(usize, Vec<f64>)>, t: f64) -> CentroidModel {
        CentroidModel {
            mode: CentroidMode::Supervised,
            threshold: t,
            centroids: centroids
                .into_iter()
                .map(|(id, values)| Centroid { id, values })
                .collect(),
        }
    }

    #[test]
    fn centroid_basics() {
        let emb = vec![pad6(&[0.0, 0.0]), pad6(&[2.0, 2.0])];
        let c = compute_centroids(&emb, &[4, 4]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].values, pad6(&[1.0, 1.0]));
        // single point per class -> centroid equals the point
        let c = compute_centroids(&emb, &[1, 2]).unwrap();
        assert_eq!(c[0].values, emb[0]);
        assert_eq!(c[1].values, emb[1]);
    }

    #[test]
    fn centroids_match_naive_mean_oracle_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.gen_range(5..60);
            let emb: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect())
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let got = compute_centroids(&emb, &labels).unwrap();
            for c in got {
                // naive per-class mean, written independently
                let mut sum = vec![0.0; 6];
                let mut cnt = 0.0;
                for (e, &l) in emb.iter().zip(&labels) {
                    if l == c.id {
                        for (s, v) in sum.iter_mut().zip(e) {
                            *s += v;
                        }
                        cnt += 1.0;
                    }
                }
                for (g, s) in c.values.iter().zip(&sum) {
                    assert!((g - s / cnt).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn outlier_score_examples() {
        let m = model(vec![(0, pad6(&[0.0, 0.0])), (1, pad6(&[10.0, 0.0]))], 1.0);
        assert_eq!(m.outlier_score(&pad6(&[0.0, 0.0])).unwrap(), 0.0);
        // z=(3,4): min(25, 65) = 25
        assert_abs_diff_eq!(
            m.outlier_score(&pad6(&[3.0, 4.0])).unwrap(),
            25.0,
            epsilon = 1e-12
        );
        let single = model(vec![(0, pad6(&[0.0, 0.0]))], 1.0);
        assert_abs_diff_eq!(
            single.outlier_score(&pad6(&[1.0, 1.0])).unwrap(),
            2.0,
            epsilon = 1e-12
        );
        assert!(m.outlier_score(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn threshold_nearest_rank() {
        let m = model(vec![(0, vec![0.0])], 0.0);
        // scores are squared distances from 0, so feed sqrt values
        let emb: Vec<Vec<f64>> = (1..=100).map(|i| vec![(i as f64).sqrt()]).collect();
        let t = compute_threshold(&m, &emb, 0.99).unwrap();
        assert_abs_diff_eq!(t, 99.0, epsilon = 1e-9);
        let emb10: Vec<Vec<f64>> = (1..=10).map(|i| vec![(i as f64).sqrt()]).collect();
        assert_abs_diff_eq!(
            compute_threshold(&m, &emb10, 0.99).unwrap(),
            10.0,
            epsilon = 1e-9
        );
        let same = vec![vec![2.0]; 7];
        assert_abs_diff_eq!(
            compute_threshold(&m, &same, 0.99).unwrap(),
            4.0,
            epsilon = 1e-12
        );
        assert!(compute_threshold(&m, &[], 0.99).is_err());
    }

    #[test]
    fn class_probability_examples() {
        let single = model(vec![(0, pad6(&[0.0]))], 1.0);
        assert_eq!(single.class_probabilities(&pad6(&[3.0])).unwrap(), vec![1.0]);

        let m = model(vec![(0, pad6(&[0.0, 0.0])), (1, pad6(&[2.0, 0.0]))], 1.0);
        let p = m.class_probabilities(&pad6(&[1.0, 5.0])).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);

        // z at centroid 0: softmax(0, -4)
        let p = m.class_probabilities(&pad6(&[0.0, 0.0])).unwrap();
        let want0 = 1.0 / (1.0 + (-4.0f64).exp());
        assert_abs_diff_eq!(p[0], want0, epsilon = 1e-9);
        assert_abs_diff_eq!(p[0], 0.9820, epsilon = 1e-4);
        assert_abs_diff_eq!(p[1], 0.0180, epsilon = 1e-4);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn predict_cases() {
        let m = model(vec![(0, pad6(&[0.0])), (1, pad6(&[2.0]))], 0.5);
        // score > t -> UNKNOWN regardless of supplied probabilities
        let p = m.predict(&pad6(&[10.0]), Some(&[0.0, 1.0])).unwrap();
        assert_eq!(p.verdict, Verdict::Unknown);
        // score <= t, argmax of supplied probs
        let p = m.predict(&pad6(&[0.1]), Some(&[0.1, 0.9])).unwrap();
        assert_eq!(p.verdict, Verdict::Known(1));
        // without classifier probs, falls back to distance softmax
        let p = m.predict(&pad6(&[0.1]), None).unwrap();
        assert_eq!(p.verdict, Verdict::Known(0));
    }

    /// Brute-force re-implementation of the decision rule, evaluated over
    /// a grid of test points against three centroids.
    #[test]
    fn predict_matches_bruteforce_on_grid() {
        let cents = [
            (0usize, pad6(&[0.0, 0.0])),
            (3, pad6(&[3.0, 1.0])),
            (7, pad6(&[-2.0, 2.5])),
        ];
        let m = model(cents.to_vec(), 3.0);
        for i in -12..12 {
            for j in -12..12 {
                let z = pad6(&[i as f64 * 0.5, j as f64 * 0.5]);
                let got = m.predict(&z, None).unwrap();
                // oracle: direct transcription of the decision equations
                let dists: Vec<f64> = cents
                    .iter()
                    .map(|(_, c)| {
                        c.iter()
                            .zip(&z)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .collect();
                let score = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                let want = if score > 3.0 {
                    Verdict::Unknown
                } else {
                    let exps: Vec<f64> = dists.iter().map(|d| (-d).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    let mut best = 0;
                    for c in 1..3 {
                        if exps[c] / total > exps[best] / total {
                            best = c;
                        }
                    }
                    Verdict::Known(cents[best].0)
                };
                assert_eq!(got.verdict, want, "at {z:?}");
                assert!((got.outlier_score - score).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn kmeans_identical_points() {
        let emb = vec![pad6(&[1.0, 1.0]); 8];
        let c = cluster_contents(&emb, 2, 0).unwrap();
        for cent in &c {
            assert_eq!(cent.values, pad6(&[1.0, 1.0]));
        }
    }

    #[test]
    fn kmeans_two_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut emb = Vec::new();
        for _ in 0..50 {
            emb.push(pad6(&[rng.gen_range(-0.01..0.01), 5.0 + rng.gen_range(-0.01..0.01)]));
        }
        for _ in 0..50 {
            emb.push(pad6(&[10.0 + rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01)]));
        }
        let c = cluster_contents(&emb, 2, 3).unwrap();
        let mut xs: Vec<f64> = c.iter().map(|c| c.values[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // blob means within 1e-2 wobble of (0,5) and (10,0); use actual means
        let mean_a: f64 = emb[..50].iter().map(|e| e[0]).sum::<f64>() / 50.0;
        let mean_b: f64 = emb[50..].iter().map(|e| e[0]).sum::<f64>() / 50.0;
        assert!((xs[0] - mean_a).abs() < 1e-6);
        assert!((xs[1] - mean_b).abs() < 1e-6);
    }

    #[test]
    fn kmeans_deterministic_and_validates() {
        let emb: Vec<Vec<f64>> = (0..20)
            .map(|i| pad6(&[(i % 5) as f64, (i / 5) as f64]))
            .collect();
        let a = cluster_contents(&emb, 4, 11).unwrap();
        let b = cluster_contents(&emb, 4, 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.values, y.values);
        }
        assert!(cluster_contents(&emb[..3], 4, 0).is_err());
    }

    proptest! {
        #[test]
        fn verdict_biconditional_and_scale_invariance(
            z0 in -6.0f64..6.0,
            z1 in -6.0f64..6.0,
            t in 0.0f64..20.0,
            scale in 0.1f64..10.0,
        ) {
            let m = model(vec![(0, pad6(&[0.0, 0.0])), (2, pad6(&[3.0, 0.0]))], t);
            let z = pad6(&[z0, z1]);
            let p = m.predict(&z, None).unwrap();
            prop_assert_eq!(p.verdict == Verdict::Unknown, p.outlier_score > t);
            prop_assert!((p.class_probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.class_probabilities.iter().all(|&v| v >= 0.0));
            // argmax invariance under uniform scaling of supplied probabilities
            let probs = p.class_probabilities.clone();
            let scaled: Vec<f64> = probs.iter().map(|v| v * scale).collect();
            let a = m.predict(&z, Some(&probs)).unwrap();
            let b = m.predict(&z, Some(&scaled)).unwrap();
            prop_assert_eq!(a.verdict, b.verdict);
        }

        #[test]
        fn kmeans_objective_nonincreasing(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 12..40),
            seed in 0u64..20,
        ) {
            let emb: Vec<Vec<f64>> = pts.iter().map(|(x, y)| vec![*x, *y]).collect();
            let cents = cluster_contents(&emb, 3, seed).unwrap();
            // final objective must be <= objective of any single Lloyd step
            // from the final centroids (fixed point check)
            let obj = |centers: &[Centroid]| -> f64 {
                emb.iter()
                    .map(|e| {
                        centers
                            .iter()
                            .map(|c| sq_dist(&c.values, e))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .sum()
            };
            let before = obj(&cents);
            // one more Lloyd step
            let mut sums = vec![vec![0.0; 2]; 3];
            let mut counts = vec![0usize; 3];
            for e in &emb {
                let mut best = 0;
                for c in 1..3 {
                    if sq_dist(&cents[c].values, e) < sq_dist(&cents[best].values, e) {
                        best = c;
                    }
                }
                for (s, v) in sums[best].iter_mut().zip(e) {
                    *s += v;
                }
                counts[best] += 1;
            }
            let stepped: Vec<Centroid> = (0..3)
                .map(|c| Centroid {
                    id: c,
                    values: if counts[c] > 0 {
                        sums[c].iter().map(|s| s / counts[c] as f64).collect()
                    } else {
                        cents[c].values.clone()
                    },
                })
                .collect();
            prop_assert!(obj(&stepped) <= before + 1e-9);
        }
    }
}
