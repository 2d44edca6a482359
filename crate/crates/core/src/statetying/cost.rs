use std::str::FromStr;

use crate::numerics::{floor_renormalize, kl_raw, Distribution, KL_FLOOR};

/// How a cluster's representative distribution is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centroid {
    /// Count-weighted mean of the member distributions.
    #[default]
    Arithmetic,
    /// Count-weighted geometric mean, renormalized.
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `Σ count · KL(member ‖ centroid)`.
    #[default]
    MemberToCentroid,
    /// `Σ count · KL(centroid ‖ member)`.
    CentroidToMember,
}

impl FromStr for Centroid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "arithmetic" => Ok(Centroid::Arithmetic),
            "geometric" => Ok(Centroid::Geometric),
            _ => Err(format!("expected `arithmetic` or `geometric`, got `{s}`")),
        }
    }
}

impl FromStr for KlDirection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "member_to_centroid" => Ok(KlDirection::MemberToCentroid),
            "centroid_to_member" => Ok(KlDirection::CentroidToMember),
            _ => Err(format!(
                "expected `member_to_centroid` or `centroid_to_member`, got `{s}`"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostOptions {
    pub centroid: Centroid,
    pub direction: KlDirection,
}

fn centroid(members: &[(f64, &Distribution)], kind: Centroid) -> Vec<f64> {
    let dim = members[0].1.len();
    let total: f64 = members.iter().map(|(c, _)| c).sum();
    let mut acc = vec![0.0; dim];
    match kind {
        Centroid::Arithmetic => {
            for (c, d) in members {
                for (a, p) in acc.iter_mut().zip(d.probs()) {
                    *a += c * p;
                }
            }
            for a in &mut acc {
                *a /= total;
            }
        }
        Centroid::Geometric => {
            for (c, d) in members {
                for (a, p) in acc.iter_mut().zip(d.smoothed().probs()) {
                    *a += c * p.ln();
                }
            }
            let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for a in &mut acc {
                *a = (*a / total - max / total).exp();
            }
        }
    }
    floor_renormalize(&acc, KL_FLOOR).probs().to_vec()
}

/// KL-divergence spread of weighted member distributions around their
/// centroid. Zero for a single member or identical members.
pub fn cluster_cost(members: &[(f64, &Distribution)], opts: &CostOptions) -> f64 {
    if members.len() < 2 {
        return 0.0;
    }
    let m = centroid(members, opts.centroid);
    members
        .iter()
        .map(|(c, d)| {
            c * match opts.direction {
                KlDirection::MemberToCentroid => kl_raw(d.probs(), &m),
                KlDirection::CentroidToMember => kl_raw(&m, d.smoothed().probs()),
            }
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn single_and_identical_members_cost_nothing() {
        let a = dist(&[0.2, 0.3, 0.5]);
        let opts = CostOptions::default();
        assert_eq!(cluster_cost(&[(4.0, &a)], &opts), 0.0);
        assert_abs_diff_eq!(cluster_cost(&[(4.0, &a), (2.0, &a)], &opts), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn hand_set_pair_matches_scalar_evaluation() {
        // 40-digit reference: 0.6968187973754637429384276002238095466104
        let p1 = dist(&[0.7, 0.2, 0.1]);
        let p2 = dist(&[0.1, 0.3, 0.6]);
        let c = cluster_cost(&[(3.0, &p1), (1.0, &p2)], &CostOptions::default());
        assert_abs_diff_eq!(c, 0.696_818_797_375_463_7, epsilon = 1e-12);
    }

    #[test]
    fn geometric_and_reverse_options_are_nonnegative() {
        let p1 = dist(&[0.7, 0.2, 0.1]);
        let p2 = dist(&[0.1, 0.3, 0.6]);
        for centroid in [Centroid::Arithmetic, Centroid::Geometric] {
            for direction in [KlDirection::MemberToCentroid, KlDirection::CentroidToMember] {
                let c = cluster_cost(&[(3.0, &p1), (1.0, &p2)], &CostOptions { centroid, direction });
                assert!(c > 0.0);
            }
        }
    }

    fn arb_members() -> impl Strategy<Value = Vec<(f64, Vec<f64>)>> {
        prop::collection::vec(
            (1.0f64..20.0, prop::collection::vec(0.01f64..1.0, 4)),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn permutation_and_count_scaling(members in arb_members(), scale in 0.1f64..10.0) {
            let ds: Vec<(f64, Distribution)> = members
                .iter()
                .map(|(c, w)| (*c, Distribution::normalized(w.clone()).unwrap()))
                .collect();
            let refs: Vec<(f64, &Distribution)> = ds.iter().map(|(c, d)| (*c, d)).collect();
            let opts = CostOptions::default();
            let base = cluster_cost(&refs, &opts);
            prop_assert!(base >= 0.0);
            let mut rev = refs.clone();
            rev.reverse();
            prop_assert!((cluster_cost(&rev, &opts) - base).abs() <= 1e-9 * (1.0 + base));
            let scaled: Vec<(f64, &Distribution)> = refs.iter().map(|(c, d)| (c * scale, *d)).collect();
            prop_assert!((cluster_cost(&scaled, &opts) - scale * base).abs() <= 1e-9 * (1.0 + scale * base));
        }
    }
}
