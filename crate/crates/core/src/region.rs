//! Trusted/untrusted region split of target images.
//!
//! A pixel is trusted when its normalised prediction entropy is strictly
//! below `λ`. Pixels whose pseudo-label is a rare class have their entropy
//! halved first, so rare classes are not wholesale marked untrusted.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// Per-class entropy multiplier for rare classes.
pub const RARE_ENTROPY_FACTOR: f64 = 0.5;
/// A class is rare when it holds fewer than this fraction of all pseudo-labels.
pub const RARE_FRACTION: f64 = 0.01;
/// λ used for the 19-class Cityscapes label set, and that label-set size.
const REFERENCE_LAMBDA: f64 = 0.01;
const REFERENCE_CLASSES: f64 = 19.0;

/// `e_i = -(1/(K ln K)) Σ_k p_ik ln p_ik` per pixel, `[B, K, H, W] -> [B, H, W]`,
/// with `0 ln 0 = 0`. With `checked`, distributions that do not sum to one
/// within `1e-6` are rejected.
pub fn entropy_map(probs: &Tensor, checked: bool) -> Result<Tensor> {
    let (b, k, h, w) = probs.dims4()?;
    if k < 2 {
        return Err(Error::invalid("entropy_map", "needs at least two classes"));
    }
    let hw = h * w;
    let norm = 1.0 / (k as f64 * (k as f64).ln());
    let p = probs.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for s in 0..hw {
            let mut total = 0.0;
            let mut acc = 0.0;
            for c in 0..k {
                let v = p[(bi * k + c) * hw + s];
                total += v;
                if v > 0.0 {
                    acc -= v * v.ln();
                }
            }
            if checked && (total - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(
                    "entropy_map",
                    format!("pixel {s} of image {bi} sums to {total}, not 1"),
                ));
            }
            out.push(acc * norm);
        }
    }
    Tensor::new(vec![b, h, w], out)
}

/// Entropy of a two-way tie, `ln 2 / (K ln K)`: the least uncertain
/// prediction that still cannot pick a class.
pub fn two_way_tie_entropy(classes: usize) -> f64 {
    let k = classes as f64;
    2f64.ln() / (k * k.ln())
}

/// 0.01 at `K = 19`, scaled with the tie entropy for other `K`:
/// `0.01 · (19 ln 19) / (K ln K)`, roughly `0.807 · ln 2 / (K ln K)`. Always
/// strictly below [`two_way_tie_entropy`].
pub fn default_lambda(classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::invalid("default_lambda", format!("need K >= 2, got {classes}")));
    }
    let k = classes as f64;
    let r = REFERENCE_CLASSES;
    Ok(REFERENCE_LAMBDA * ((r * r.ln()) / (k * k.ln())))
}

/// Per-pixel argmax over classes, ties to the lowest index.
pub fn pseudo_labels(probs: &Tensor) -> Result<LabelMap> {
    let (b, k, h, w) = probs.dims4()?;
    let hw = h * w;
    let p = probs.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for s in 0..hw {
            let mut best = 0;
            let mut best_v = p[bi * k * hw + s];
            for c in 1..k {
                let v = p[(bi * k + c) * hw + s];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u32);
        }
    }
    LabelMap::new(b, h, w, out)
}

pub fn class_counts<'a>(maps: impl IntoIterator<Item = &'a LabelMap>, classes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; classes];
    for m in maps {
        for &l in m.data() {
            let slot = counts
                .get_mut(l as usize)
                .ok_or_else(|| Error::invalid("class_counts", format!("label {l} >= {classes}")))?;
            *slot += 1;
        }
    }
    Ok(counts)
}

/// Classes whose dataset-wide pixel count is strictly below
/// `RARE_FRACTION` of all pixels.
pub fn find_rare_classes(counts: &[u64]) -> Result<BTreeSet<usize>> {
    rare_classes_with(counts, RARE_FRACTION)
}

pub fn rare_classes_with(counts: &[u64], fraction: f64) -> Result<BTreeSet<usize>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("find_rare_classes", "no pseudo-labelled pixels"));
    }
    let threshold = total as f64 * fraction;
    Ok(counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| (c as f64) < threshold)
        .map(|(k, _)| k)
        .collect())
}

/// Split of one batch of target images.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSplit {
    /// Normalised entropy `[B, H, W]`.
    pub entropy: Tensor,
    /// 1 where trusted, `[B, H, W]`.
    pub trusted: Tensor,
    /// `1 - trusted`.
    pub untrusted: Tensor,
    pub pseudo: LabelMap,
    pub rare_classes: BTreeSet<usize>,
    pub lambda: f64,
}

impl RegionSplit {
    pub fn untrusted_fraction(&self) -> f64 {
        self.untrusted.data().iter().sum::<f64>() / self.untrusted.len() as f64
    }

    pub fn untrusted_count(&self) -> usize {
        self.untrusted.data().iter().filter(|&&v| v == 1.0).count()
    }
}

pub fn split_regions(
    entropy: &Tensor,
    pseudo: &LabelMap,
    rare_classes: &BTreeSet<usize>,
    lambda: f64,
) -> Result<RegionSplit> {
    split_regions_with(entropy, pseudo, rare_classes, lambda, RARE_ENTROPY_FACTOR)
}

pub fn split_regions_with(
    entropy: &Tensor,
    pseudo: &LabelMap,
    rare_classes: &BTreeSet<usize>,
    lambda: f64,
    rare_factor: f64,
) -> Result<RegionSplit> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("split_regions", format!("λ must be > 0, got {lambda}")));
    }
    if entropy.shape() != pseudo.shape() {
        return Err(Error::ShapeMismatch {
            op: "split_regions",
            lhs: entropy.shape().to_vec(),
            rhs: pseudo.shape().to_vec(),
        });
    }
    let trusted: Vec<f64> = entropy
        .data()
        .iter()
        .zip(pseudo.data())
        .map(|(&e, &y)| {
            let e = if rare_classes.contains(&(y as usize)) { e * rare_factor } else { e };
            if e < lambda {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let untrusted = trusted.iter().map(|m| 1.0 - m).collect();
    let shape = entropy.shape().to_vec();
    Ok(RegionSplit {
        entropy: entropy.clone(),
        trusted: Tensor::new(shape.clone(), trusted)?,
        untrusted: Tensor::new(shape, untrusted)?,
        pseudo: pseudo.clone(),
        rare_classes: rare_classes.clone(),
        lambda,
    })
}

/// Dataset-level summary written next to the per-image split artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub images: usize,
    pub classes: usize,
    pub lambda: f64,
    pub rare_classes: Vec<usize>,
    pub pseudo_label_counts: Vec<u64>,
    pub untrusted_fraction: f64,
    pub mean_entropy_untrusted: f64,
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pixel(p: &[f64]) -> Tensor {
        Tensor::new(vec![1, p.len(), 1, 1], p.to_vec()).unwrap()
    }

    #[test]
    fn entropy_reference_values() {
        let mut one_hot = vec![0.0; 19];
        one_hot[4] = 1.0;
        assert_eq!(entropy_map(&pixel(&one_hot), true).unwrap().data()[0], 0.0);
        let e = entropy_map(&pixel(&[1.0 / 19.0; 19]), true).unwrap().data()[0];
        assert_abs_diff_eq!(e, 1.0 / 19.0, epsilon = 1e-15);
        let mut tie = vec![0.0; 19];
        tie[2] = 0.5;
        tie[11] = 0.5;
        let e = entropy_map(&pixel(&tie), true).unwrap().data()[0];
        assert_abs_diff_eq!(e, 0.012390, epsilon = 1e-6);
        assert_abs_diff_eq!(e, two_way_tie_entropy(19), epsilon = 1e-15);
    }

    #[test]
    fn entropy_rejects_unnormalised_input() {
        assert!(entropy_map(&pixel(&[0.5, 0.6]), true).is_err());
        assert!(entropy_map(&pixel(&[0.5, 0.6]), false).is_ok());
    }

    #[test]
    fn lambda_defaults() {
        assert_eq!(default_lambda(19).unwrap(), 0.01);
        assert_abs_diff_eq!(default_lambda(2).unwrap(), 0.403553, epsilon = 1e-6);
        assert!(default_lambda(1).is_err());
        for k in 2..=100 {
            assert!(default_lambda(k).unwrap() < two_way_tie_entropy(k));
        }
    }

    #[test]
    fn argmax_with_ties() {
        assert_eq!(pseudo_labels(&pixel(&[0.1, 0.7, 0.2])).unwrap().data(), &[1]);
        assert_eq!(pseudo_labels(&pixel(&[0.5, 0.5])).unwrap().data(), &[0]);
    }

    fn map_of(counts: &[u32]) -> LabelMap {
        let data: Vec<u32> = counts
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat(k as u32).take(n as usize))
            .collect();
        LabelMap::new(1, 1, data.len(), data).unwrap()
    }

    #[test]
    fn rare_class_counting() {
        let all_zero = map_of(&[10, 0, 0]);
        let counts = class_counts([&all_zero], 3).unwrap();
        assert_eq!(find_rare_classes(&counts).unwrap(), BTreeSet::from([1, 2]));

        let counts = class_counts([&map_of(&[50, 30, 15, 4, 1])], 5).unwrap();
        assert!(find_rare_classes(&counts).unwrap().is_empty());
        let counts = class_counts([&map_of(&[96, 1, 1, 1, 1])], 5).unwrap();
        assert!(find_rare_classes(&counts).unwrap().is_empty());
        let counts = class_counts([&map_of(&[970, 5, 5, 10, 10])], 5).unwrap();
        assert_eq!(find_rare_classes(&counts).unwrap(), BTreeSet::from([1, 2]));

        assert!(find_rare_classes(&[0, 0]).is_err());
    }

    #[test]
    fn split_rules() {
        let pseudo = LabelMap::new(1, 1, 3, vec![0, 1, 1]).unwrap();
        let e = Tensor::new(vec![1, 1, 3], vec![0.005, 0.018, 0.02]).unwrap();
        let rare = BTreeSet::from([1]);
        let s = split_regions(&e, &pseudo, &rare, 0.01).unwrap();
        assert_eq!(s.trusted.data(), &[1.0, 1.0, 0.0]);
        assert_eq!(s.untrusted.data(), &[0.0, 0.0, 1.0]);
        assert!(split_regions(&e, &pseudo, &rare, 0.0).is_err());
        let s = split_regions(&e, &pseudo, &BTreeSet::new(), 0.01).unwrap();
        assert_eq!(s.trusted.data(), &[1.0, 0.0, 0.0]);
    }

    fn random_probs(raw: &[f64], k: usize) -> Tensor {
        let n = raw.len() / k;
        let mut data = vec![0.0; n * k];
        for s in 0..n {
            let z: f64 = (0..k).map(|c| raw[s * k + c].exp()).sum();
            for c in 0..k {
                data[c * n + s] = raw[s * k + c].exp() / z;
            }
        }
        Tensor::new(vec![1, k, 1, n], data).unwrap()
    }

    proptest! {
        #[test]
        fn masks_partition_and_are_monotone(
            raw in prop::collection::vec(-6.0f64..6.0, 5 * 16),
            lam_lo in 0.001f64..0.2,
            lam_gap in 0.0f64..0.2,
            rare in prop::collection::btree_set(0usize..5, 0..3),
        ) {
            let p = random_probs(&raw, 5);
            let e = entropy_map(&p, true).unwrap();
            prop_assert!(e.data().iter().all(|&v| (0.0..=0.2 + 1e-12).contains(&v)));
            let y = pseudo_labels(&p).unwrap();
            let lo = split_regions(&e, &y, &rare, lam_lo).unwrap();
            let hi = split_regions(&e, &y, &rare, lam_lo + lam_gap).unwrap();
            let plain = split_regions(&e, &y, &BTreeSet::new(), lam_lo).unwrap();
            for i in 0..e.len() {
                prop_assert_eq!(lo.trusted.data()[i] + lo.untrusted.data()[i], 1.0);
                prop_assert!(lo.trusted.data()[i] <= hi.trusted.data()[i]);
                prop_assert!(plain.trusted.data()[i] <= lo.trusted.data()[i]);
            }
        }

        #[test]
        fn argmax_ignores_temperature(raw in prop::collection::vec(-5.0f64..5.0, 4 * 6), t in 0.05f64..20.0) {
            let p = random_probs(&raw, 4);
            let scaled: Vec<f64> = raw.iter().map(|z| z / t).collect();
            let q = random_probs(&scaled, 4);
            prop_assert_eq!(pseudo_labels(&p).unwrap(), pseudo_labels(&q).unwrap());
        }
    }
}
