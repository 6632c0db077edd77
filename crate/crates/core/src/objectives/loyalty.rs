//! Matching likelihoods, weight rewards, the loyalty matrix and the soft
//! discriminative loss built on it.

use ndarray::{Array1, Array2};

use super::contrastive::SimilarityMatrix;
use crate::error::{IntentError, Result};

pub const LOYALTY_EPS: f64 = 1e-8;

/// Diagonal pseudo-labels: every query's own target is its positive.
pub fn diagonal_labels(b: usize) -> Array2<f64> {
    Array2::eye(b)
}

fn check_labels(s: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if s.nrows() != s.ncols() || s.shape() != y.shape() {
        return Err(IntentError::Shape(format!(
            "similarity {:?} and labels {:?} must be equal square matrices",
            s.shape(),
            y.shape()
        )));
    }
    for (i, row) in y.outer_iter().enumerate() {
        if row.iter().any(|v| *v != 0.0 && *v != 1.0) || row.sum() != 1.0 {
            return Err(IntentError::InvalidArgument(format!(
                "label row {i} must contain exactly one 1 and zeros elsewhere"
            )));
        }
    }
    Ok(())
}

/// Index of the largest value; the first one wins ties.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingLikelihoods {
    pub p_plus: Array1<f64>,
    pub p_minus: Array1<f64>,
    plus_at: Vec<usize>,
    minus_at: Vec<usize>,
}

/// `p⁺_i = max_j s_ij y_ij` and `p⁻_i = max_j s_ij (1 - y_ij)`.
pub fn matching_likelihoods(s: &Array2<f64>, y: &Array2<f64>) -> Result<MatchingLikelihoods> {
    check_labels(s, y)?;
    let b = s.nrows();
    let mut out = MatchingLikelihoods {
        p_plus: Array1::zeros(b),
        p_minus: Array1::zeros(b),
        plus_at: Vec::with_capacity(b),
        minus_at: Vec::with_capacity(b),
    };
    for i in 0..b {
        let (jp, vp) = argmax((0..b).map(|j| s[[i, j]] * y[[i, j]]));
        let (jm, vm) = argmax((0..b).map(|j| s[[i, j]] * (1.0 - y[[i, j]])));
        out.p_plus[i] = vp;
        out.p_minus[i] = vm;
        out.plus_at.push(jp);
        out.minus_at.push(jm);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RewardOptions {
    pub enable_pwr: bool,
    pub enable_nwr: bool,
    /// Treat `N` and `R` as constants in the backward pass.
    pub detach: bool,
}

impl Default for RewardOptions {
    fn default() -> Self {
        RewardOptions {
            enable_pwr: true,
            enable_nwr: true,
            detach: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardMatrices {
    /// Negative weight reward, `(1 - p⁺_i)(1 - y_ij)`.
    pub n: Array2<f64>,
    /// Positive weight reward, `(1 - p⁻_i) y_ij`.
    pub r: Array2<f64>,
    pub likelihoods: MatchingLikelihoods,
}

pub fn reward_matrices(s: &Array2<f64>, y: &Array2<f64>, opts: RewardOptions) -> Result<RewardMatrices> {
    let likelihoods = matching_likelihoods(s, y)?;
    let b = s.nrows();
    let n = Array2::from_shape_fn((b, b), |(i, j)| {
        if opts.enable_nwr {
            (1.0 - likelihoods.p_plus[i]) * (1.0 - y[[i, j]])
        } else {
            0.0
        }
    });
    let r = Array2::from_shape_fn((b, b), |(i, j)| {
        if opts.enable_pwr {
            (1.0 - likelihoods.p_minus[i]) * y[[i, j]]
        } else {
            0.0
        }
    });
    Ok(RewardMatrices { n, r, likelihoods })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoyaltyMatrix {
    pub entries: Array2<f64>,
    /// Pre-clamp values `(S + N + R) / 2`.
    pub unclamped: Array2<f64>,
    pub rewards: RewardMatrices,
}

pub fn loyalty_matrix(s: &Array2<f64>, y: &Array2<f64>, opts: RewardOptions) -> Result<LoyaltyMatrix> {
    let rewards = reward_matrices(s, y, opts)?;
    let unclamped = (s + &rewards.n + &rewards.r) / 2.0;
    let entries = unclamped.mapv(|v| v.clamp(LOYALTY_EPS, 1.0));
    Ok(LoyaltyMatrix {
        entries,
        unclamped,
        rewards,
    })
}

/// `-(1/B) Σ_ij y_ij log(l_ij)`.
pub fn soft_discriminative_loss(loyalty: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let b = loyalty.nrows() as f64;
    -loyalty
        .iter()
        .zip(y.iter())
        .filter(|(_, yv)| **yv != 0.0)
        .map(|(l, yv)| yv * l.ln())
        .sum::<f64>()
        / b
}

#[derive(Clone, Debug)]
pub struct SodLoss {
    pub value: f64,
    pub loyalty: LoyaltyMatrix,
    /// Gradient with respect to the entries of `S`.
    pub grad_s: Array2<f64>,
}

/// Soft discriminative loss of `S` with its gradient, routing the `max`
/// subgradients of `p⁺`/`p⁻` to their argmax entries.
pub fn sod_loss(s: &SimilarityMatrix, y: &Array2<f64>, opts: RewardOptions) -> Result<SodLoss> {
    let sm = &s.entries;
    let loyalty = loyalty_matrix(sm, y, opts)?;
    let value = soft_discriminative_loss(&loyalty.entries, y);
    let b = sm.nrows();

    let mut d_pre = Array2::zeros((b, b));
    for ((i, j), pre) in loyalty.unclamped.indexed_iter() {
        if y[[i, j]] != 0.0 && (LOYALTY_EPS..=1.0).contains(pre) {
            d_pre[[i, j]] = -y[[i, j]] / (b as f64 * pre);
        }
    }
    let d_sum = d_pre / 2.0;
    let mut grad_s = d_sum.clone();
    if !opts.detach {
        let lk = &loyalty.rewards.likelihoods;
        for i in 0..b {
            if opts.enable_nwr {
                let d_p_plus: f64 = -(0..b).map(|j| d_sum[[i, j]] * (1.0 - y[[i, j]])).sum::<f64>();
                let j = lk.plus_at[i];
                grad_s[[i, j]] += d_p_plus * y[[i, j]];
            }
            if opts.enable_pwr {
                let d_p_minus: f64 = -(0..b).map(|j| d_sum[[i, j]] * y[[i, j]]).sum::<f64>();
                let j = lk.minus_at[i];
                grad_s[[i, j]] += d_p_minus * (1.0 - y[[i, j]]);
            }
        }
    }
    Ok(SodLoss {
        value,
        loyalty,
        grad_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn sim(entries: Array2<f64>) -> SimilarityMatrix {
        SimilarityMatrix { entries, tau: 1.0 }
    }

    #[test]
    fn likelihood_examples() {
        let s = array![[0.2, 0.5, 0.3], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4]];
        let y = diagonal_labels(3);
        let lk = matching_likelihoods(&s, &y).unwrap();
        assert_eq!(lk.p_plus[0], 0.2);
        assert_eq!(lk.p_minus[0], 0.5);
        // tie between columns 0 and 1 resolves to column 0
        assert_eq!(lk.minus_at[2], 0);

        let uniform = Array2::from_elem((4, 4), 0.25);
        let lk = matching_likelihoods(&uniform, &diagonal_labels(4)).unwrap();
        assert!(lk.p_plus.iter().chain(lk.p_minus.iter()).all(|v| *v == 0.25));

        let near = array![[1.0 - 1e-9, 1e-9], [1e-9, 1.0 - 1e-9]];
        let lk = matching_likelihoods(&near, &diagonal_labels(2)).unwrap();
        assert!(lk.p_plus.iter().all(|v| *v > 1.0 - 1e-8));
        assert!(lk.p_minus.iter().all(|v| *v < 1e-8));
    }

    #[test]
    fn malformed_labels_are_rejected() {
        let s = Array2::from_elem((2, 2), 0.5);
        assert!(matching_likelihoods(&s, &array![[1.0, 1.0], [0.0, 1.0]]).is_err());
        assert!(matching_likelihoods(&s, &array![[0.0, 0.0], [0.0, 1.0]]).is_err());
        assert!(matching_likelihoods(&s, &array![[0.5, 0.5], [0.0, 1.0]]).is_err());
        assert!(matching_likelihoods(&s, &diagonal_labels(3)).is_err());
    }

    #[test]
    fn loyalty_examples() {
        let y = diagonal_labels(2);
        let l = loyalty_matrix(&Array2::eye(2), &y, RewardOptions::default()).unwrap();
        assert_eq!(l.entries, array![[1.0, LOYALTY_EPS], [LOYALTY_EPS, 1.0]]);

        let s = array![[0.9, 0.1], [0.2, 0.8]];
        let l = loyalty_matrix(&s, &y, RewardOptions::default()).unwrap();
        for (a, b) in l.entries.iter().zip(s.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let n = array![[0.0, 0.1], [0.2, 0.0]];
        let r = array![[0.9, 0.0], [0.0, 0.8]];
        assert!(l.rewards.n.iter().zip(n.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(l.rewards.r.iter().zip(r.iter()).all(|(a, b)| (a - b).abs() < 1e-12));

        let u = Array2::from_elem((2, 2), 0.5);
        let l = loyalty_matrix(&u, &y, RewardOptions::default()).unwrap();
        assert!(l.entries.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn disabling_both_rewards_halves_similarity() {
        let s = array![[0.7, 0.2, 0.1], [0.3, 0.3, 0.4], [0.0, 0.5, 0.5]];
        let opts = RewardOptions { enable_pwr: false, enable_nwr: false, detach: false };
        let l = loyalty_matrix(&s, &diagonal_labels(3), opts).unwrap();
        assert_eq!(l.entries, s.mapv(|v| (v / 2.0).clamp(LOYALTY_EPS, 1.0)));
    }

    #[test]
    fn sod_examples() {
        let y = diagonal_labels(2);
        let id = sod_loss(&sim(Array2::eye(2)), &y, RewardOptions::default()).unwrap();
        assert!(id.value.abs() < 1e-12);
        let s = array![[0.9, 0.1], [0.2, 0.8]];
        let out = sod_loss(&sim(s), &y, RewardOptions::default()).unwrap();
        let expected = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 0.16425).abs() < 1e-5);
        let u = sod_loss(&sim(Array2::from_elem((2, 2), 0.5)), &y, RewardOptions::default()).unwrap();
        assert!((u.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sod_argmin_is_identity_on_grid() {
        let y = diagonal_labels(2);
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..=100 {
            for b in 0..=100 {
                let (p, q) = (a as f64 / 100.0, b as f64 / 100.0);
                let s = array![[p, 1.0 - p], [1.0 - q, q]];
                let v = sod_loss(&sim(s), &y, RewardOptions::default()).unwrap().value;
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
        assert_eq!((best.1, best.2), (100, 100));
        assert!(best.0.abs() < 1e-12);
    }

    fn fd_grad_s(s: &Array2<f64>, opts: RewardOptions) {
        let y = diagonal_labels(s.nrows());
        let out = sod_loss(&sim(s.clone()), &y, opts).unwrap();
        let eps = 1e-6;
        for ((i, j), g) in out.grad_s.indexed_iter() {
            let eval = |d: f64| {
                let mut t = s.clone();
                t[[i, j]] += d;
                sod_loss(&sim(t), &y, opts).unwrap().value
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let err = (numeric - g).abs();
            assert!(err < 1e-7 || err / numeric.abs().max(g.abs()) < 1e-4, "({i},{j}) {numeric} vs {g}");
        }
    }

    #[test]
    fn sod_gradient_matches_finite_differences() {
        let s = array![[0.5, 0.3, 0.2], [0.15, 0.25, 0.6], [0.33, 0.17, 0.5]];
        for pwr in [true, false] {
            for nwr in [true, false] {
                fd_grad_s(&s, RewardOptions { enable_pwr: pwr, enable_nwr: nwr, detach: false });
            }
        }
    }

    #[test]
    fn detached_rewards_pass_only_direct_gradient() {
        let s = array![[0.5, 0.3, 0.2], [0.15, 0.25, 0.6], [0.33, 0.17, 0.5]];
        let y = diagonal_labels(3);
        let opts = RewardOptions { detach: true, ..Default::default() };
        let out = sod_loss(&sim(s.clone()), &y, opts).unwrap();
        for ((i, j), g) in out.grad_s.indexed_iter() {
            if i == j {
                assert!((g + 1.0 / (6.0 * out.loyalty.unclamped[[i, i]])).abs() < 1e-12);
            } else {
                assert_eq!(*g, 0.0);
            }
        }
    }

    fn row_stochastic(b: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(0.01f64..1.0, b * b).prop_map(move |v| {
            let mut m = Array2::from_shape_vec((b, b), v).unwrap();
            for mut row in m.outer_iter_mut() {
                let t = row.sum();
                row /= t;
            }
            m
        })
    }

    proptest! {
        #[test]
        fn loyalty_bounds_and_reward_structure(s in (2usize..6).prop_flat_map(row_stochastic)) {
            let b = s.nrows();
            let l = loyalty_matrix(&s, &diagonal_labels(b), RewardOptions::default()).unwrap();
            for ((i, j), v) in l.entries.indexed_iter() {
                prop_assert!((LOYALTY_EPS..=1.0).contains(v));
                let (n, r) = (l.rewards.n[[i, j]], l.rewards.r[[i, j]]);
                prop_assert!(n >= 0.0 && r >= 0.0);
                if i == j { prop_assert_eq!(n, 0.0); } else { prop_assert_eq!(r, 0.0); }
                prop_assert!(n == 0.0 || r == 0.0);
            }
        }

        #[test]
        fn rewards_vanish_with_confident_likelihoods(b in 2usize..6, i in 0usize..6, delta in 1e-9f64..1e-4) {
            let i = i % b;
            let y = diagonal_labels(b);
            // confident positive in row i
            let mut s = Array2::from_elem((b, b), 1.0 / b as f64);
            for j in 0..b { s[[i, j]] = delta / (b - 1) as f64; }
            s[[i, i]] = 1.0 - delta;
            let rw = reward_matrices(&s, &y, RewardOptions::default()).unwrap();
            prop_assert!(rw.n.row(i).iter().all(|v| *v <= delta + 1e-15));
            // confident negative in row i
            let j = (i + 1) % b;
            for k in 0..b { s[[i, k]] = delta / (b - 1) as f64; }
            s[[i, j]] = 1.0 - delta;
            let rw = reward_matrices(&s, &y, RewardOptions::default()).unwrap();
            prop_assert!(rw.r[[i, i]] <= delta + 1e-15);
        }
    }
}
