//! Batch-all triplet loss on flattened sequence features.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Summed hinges divided by `2M` times the number of triplets.
    Paper2M,
    /// Mean over triplets with a positive hinge; zero when none is active.
    PlainMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignConvention {
    /// `max(M + d_ap - d_an, 0)`
    Standard,
    /// `max(M - d_ap + d_an, 0)`, the printed form; pushes positives apart.
    AsWritten,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Paper2M => "paper_2M",
            Normalization::PlainMean => "plain_mean",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_2M" | "paper_2m" => Ok(Normalization::Paper2M),
            "plain_mean" => Ok(Normalization::PlainMean),
            other => Err(Error::Config(format!(
                "unknown normalization `{other}` (expected paper_2M or plain_mean)"
            ))),
        }
    }
}

impl fmt::Display for SignConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignConvention::Standard => "standard",
            SignConvention::AsWritten => "as_written",
        })
    }
}

impl FromStr for SignConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SignConvention::Standard),
            "as_written" => Ok(SignConvention::AsWritten),
            other => Err(Error::Config(format!(
                "unknown sign convention `{other}` (expected standard or as_written)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletConfig {
    pub margin: f64,
    pub normalization: Normalization,
    pub sign: SignConvention,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: 0.2,
            normalization: Normalization::Paper2M,
            sign: SignConvention::Standard,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "triplet.margin {} must be > 0",
                self.margin
            )));
        }
        Ok(())
    }

    pub fn hinge(&self, d_ap: f64, d_an: f64) -> f64 {
        let v = match self.sign {
            SignConvention::Standard => self.margin + d_ap - d_an,
            SignConvention::AsWritten => self.margin - d_ap + d_an,
        };
        v.max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub nonzero_fraction: f64,
    pub triplets: usize,
    pub active: usize,
    /// `d loss / d feature` for each input feature.
    pub grads: Vec<Vec<f64>>,
}

/// Number of (anchor, positive, negative) triplets in a labeled batch.
pub fn triplet_count(labels: &[u32]) -> usize {
    let n = labels.len();
    labels
        .iter()
        .map(|a| {
            let same = labels.iter().filter(|l| *l == a).count();
            (same - 1) * (n - same)
        })
        .sum()
}

/// Pairwise Euclidean distances.
pub fn distance_matrix(features: &[&[f64]]) -> Vec<Vec<f64>> {
    let n = features.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = crate::model::forward::euclidean(features[i], features[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Batch-all triplet loss and its gradient with respect to each feature.
/// The batch must hold at least two subjects and some subject with two
/// features; otherwise no triplet exists.
pub fn triplet_loss_ba(
    features: &[&[f64]],
    labels: &[u32],
    cfg: &TripletConfig,
) -> Result<TripletOutput> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::BatchComposition(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let count = triplet_count(labels);
    if count == 0 {
        return Err(Error::BatchComposition(
            "batch needs at least two subjects and a subject with two features".into(),
        ));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().position(|f| f.len() != dim) {
        return Err(Error::BatchComposition(format!(
            "feature {bad} has length {}, expected {dim}",
            features[bad].len()
        )));
    }

    let n = features.len();
    let d = distance_matrix(features);
    // coef[i][j]: derivative of the summed hinge with respect to d[i][j].
    let mut coef = vec![vec![0.0; n]; n];
    let (mut total, mut active) = (0.0, 0usize);
    let sign = match cfg.sign {
        SignConvention::Standard => 1.0,
        SignConvention::AsWritten => -1.0,
    };
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let h = cfg.hinge(d[a][p], d[a][q]);
                if h > 0.0 {
                    total += h;
                    active += 1;
                    coef[a][p] += sign;
                    coef[a][q] -= sign;
                }
            }
        }
    }
    let scale = match cfg.normalization {
        Normalization::Paper2M => 1.0 / (2.0 * cfg.margin * count as f64),
        Normalization::PlainMean if active > 0 => 1.0 / active as f64,
        Normalization::PlainMean => 0.0,
    };

    let mut grads = vec![vec![0.0; dim]; n];
    for i in 0..n {
        for j in i + 1..n {
            let w = (coef[i][j] + coef[j][i]) * scale;
            // The distance is not differentiable at zero; use the zero subgradient.
            if w == 0.0 || d[i][j] == 0.0 {
                continue;
            }
            let s = w / d[i][j];
            let (gi, gj) = split_pair(&mut grads, i, j);
            for ((x, y), (a, b)) in features[i]
                .iter()
                .zip(features[j])
                .zip(gi.iter_mut().zip(gj.iter_mut()))
            {
                let g = s * (x - y);
                *a += g;
                *b -= g;
            }
        }
    }
    Ok(TripletOutput {
        loss: total * scale,
        nonzero_fraction: active as f64 / count as f64,
        triplets: count,
        active,
        grads,
    })
}

fn split_pair(v: &mut [Vec<f64>], i: usize, j: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions, Probe, Tensor};
    use proptest::prelude::*;

    fn one_d(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn hinge_examples() {
        let cfg = TripletConfig::default();
        assert_eq!(cfg.hinge(0.0, 1.0), 0.0);
        assert!((cfg.hinge(0.5, 0.5) - 0.2).abs() < 1e-15);
        // Single triplet: a=0, p=0.5 (same subject), n=0.5 on the other side.
        let f = one_d(&[0.0, 0.5, -0.5]);
        let out = triplet_loss_ba(&refs(&f), &[1, 1, 2], &cfg).unwrap();
        // Two triplets (either subject-1 feature as anchor); anchor 0 gives
        // d_ap = d_an = 0.5, hinge 0.2 → 0.5 after normalization.
        assert_eq!(out.triplets, 2);
        let anchor0 = 0.2 / (2.0 * 0.2);
        let anchor1 = cfg.hinge(0.5, 1.0) / (2.0 * 0.2);
        assert!((out.loss - (anchor0 + anchor1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn counts_for_the_published_batch() {
        let labels: Vec<u32> = (0..8).flat_map(|s| std::iter::repeat_n(s, 6)).collect();
        assert_eq!(triplet_count(&labels), 10_080);
    }

    #[test]
    fn composition_errors() {
        let f = one_d(&[0.0, 1.0]);
        let cfg = TripletConfig::default();
        assert!(matches!(
            triplet_loss_ba(&refs(&f), &[1, 1], &cfg),
            Err(Error::BatchComposition(_))
        ));
        assert!(matches!(
            triplet_loss_ba(&refs(&f), &[1, 2], &cfg),
            Err(Error::BatchComposition(_))
        ));
    }

    #[test]
    fn identical_features_activate_every_triplet() {
        let f = vec![vec![0.3, -0.1]; 6];
        let out =
            triplet_loss_ba(&refs(&f), &[1, 1, 2, 2, 3, 3], &TripletConfig::default()).unwrap();
        assert_eq!(out.nonzero_fraction, 1.0);
        assert!((out.loss - 0.5).abs() < 1e-12);
        assert!(out.grads.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn plain_mean_averages_active_triplets() {
        let cfg = TripletConfig {
            normalization: Normalization::PlainMean,
            ..TripletConfig::default()
        };
        let f = one_d(&[0.0, 0.1, 5.0, 5.1]);
        let out = triplet_loss_ba(&refs(&f), &[1, 1, 2, 2], &cfg).unwrap();
        assert_eq!((out.active, out.loss), (0, 0.0));
        let f = one_d(&[0.0, 0.1, 0.15, 0.3]);
        let out = triplet_loss_ba(&refs(&f), &[1, 1, 2, 2], &cfg).unwrap();
        assert!(out.active > 0);
        let d = |a: f64, b: f64| (a - b).abs();
        let x = [0.0, 0.1, 0.15, 0.3];
        let l = [1, 1, 2, 2];
        let mut hs = Vec::new();
        for a in 0..4 {
            for p in 0..4 {
                for q in 0..4 {
                    if p != a && l[p] == l[a] && l[q] != l[a] {
                        let h = cfg.hinge(d(x[a], x[p]), d(x[a], x[q]));
                        if h > 0.0 {
                            hs.push(h);
                        }
                    }
                }
            }
        }
        assert!((out.loss - hs.iter().sum::<f64>() / hs.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn as_written_flips_the_sign() {
        let cfg = TripletConfig {
            sign: SignConvention::AsWritten,
            ..TripletConfig::default()
        };
        assert!((cfg.hinge(0.0, 1.0) - 1.2).abs() < 1e-15);
        assert_eq!(cfg.hinge(1.0, 0.0), 0.0);
    }

    fn features_from(t: &Tensor, n: usize) -> Vec<Vec<f64>> {
        t.data().chunks(t.len() / n).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let labels = [1, 1, 1, 2, 2, 3];
        let x = Tensor::from_fn(&[6, 5], |i| ((i * 37 % 29) as f64 - 14.0) * 0.02);
        for sign in [SignConvention::Standard, SignConvention::AsWritten] {
            for normalization in [Normalization::Paper2M, Normalization::PlainMean] {
                let cfg = TripletConfig {
                    margin: 0.2,
                    normalization,
                    sign,
                };
                let r = grad_check(
                    |t, want| {
                        let f = features_from(t, 6);
                        let out = triplet_loss_ba(&refs(&f), &labels, &cfg)?;
                        // Active set as the branch signature.
                        let sig = distance_signature(&f, &labels, &cfg);
                        Ok(Probe {
                            value: out.loss,
                            grad: want
                                .then(|| Tensor::new(vec![6, 5], out.grads.concat()).unwrap()),
                            signature: Some(sig),
                        })
                    },
                    &x,
                    &GradCheckOptions {
                        tol: 1e-5,
                        ..GradCheckOptions::default()
                    },
                )
                .unwrap();
                assert!(r.passed(), "{sign} {normalization}: {r:?}");
            }
        }
    }

    fn distance_signature(f: &[Vec<f64>], labels: &[u32], cfg: &TripletConfig) -> u64 {
        let d = distance_matrix(&refs(f));
        let mut h = 0u64;
        for a in 0..f.len() {
            for p in 0..f.len() {
                for q in 0..f.len() {
                    if p != a && labels[p] == labels[a] && labels[q] != labels[a] {
                        h = h
                            .wrapping_mul(31)
                            .wrapping_add(u64::from(cfg.hinge(d[a][p], d[a][q]) > 0.0));
                    }
                }
            }
        }
        h
    }

    proptest! {
        #[test]
        fn loss_zero_iff_all_satisfied(values in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let f = one_d(&values);
            let labels = [1, 1, 2, 2, 3, 3];
            let cfg = TripletConfig::default();
            let out = triplet_loss_ba(&refs(&f), &labels, &cfg).unwrap();
            let d = distance_matrix(&refs(&f));
            let mut all = true;
            for a in 0..6 {
                for p in 0..6 {
                    for q in 0..6 {
                        if p != a && labels[p] == labels[a] && labels[q] != labels[a] {
                            all &= d[a][q] - d[a][p] >= cfg.margin;
                        }
                    }
                }
            }
            prop_assert_eq!(out.loss == 0.0, all);
            prop_assert!((0.0..=1.0).contains(&out.nonzero_fraction));
        }

        #[test]
        fn relabeling_is_harmless(values in proptest::collection::vec(-2.0f64..2.0, 8), shift in 1u32..100) {
            let f = one_d(&values);
            let labels = [1, 1, 2, 2, 3, 3, 3, 4];
            let renamed: Vec<u32> = labels.iter().map(|l| (l * 7 + shift) % 1000).collect();
            let cfg = TripletConfig::default();
            let a = triplet_loss_ba(&refs(&f), &labels, &cfg).unwrap();
            let b = triplet_loss_ba(&refs(&f), &renamed, &cfg).unwrap();
            prop_assert_eq!(a.loss, b.loss);
            prop_assert_eq!(a.nonzero_fraction, b.nonzero_fraction);
        }
    }
}
