//! Convergence diagnostics: rank-normalized split R-hat and effective sample
//! size (Geyer initial monotone sequence over split chains).

use statrs::distribution::{ContinuousCDF, Normal};

/// Classic split R-hat on already-split sequences of equal length.
fn rhat_of_split(split: &[Vec<f64>]) -> f64 {
    let m = split.len() as f64;
    let n = split[0].len() as f64;
    let means: Vec<f64> = split.iter().map(|c| mean(c)).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = split
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Splits each chain into two halves; the middle draw of odd-length chains
/// is dropped.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replaces every value by the normal quantile of its fractional pooled rank
/// `(r - 3/8) / (S + 1/4)`, with ties sharing their average rank.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, xs)| xs.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total = pooled.len() as f64;
    let normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut start = 0;
    while start < pooled.len() {
        let mut end = start + 1;
        while end < pooled.len() && pooled[end].0 == pooled[start].0 {
            end += 1;
        }
        // ranks are 1-based: start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        let z = normal.inverse_cdf((rank - 0.375) / (total + 0.25));
        for &(_, c, i) in &pooled[start..end] {
            out[c][i] = z;
        }
        start = end;
    }
    out
}

fn is_degenerate(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|&x| x == first) || chains.iter().flatten().any(|x| !x.is_finite())
}

/// Rank-normalized split R-hat: the larger of the bulk value and the value
/// computed on draws folded around the pooled median. `NaN` when every draw
/// is identical.
pub fn rank_normalized_rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split.len() < 2 || split[0].len() < 2 || is_degenerate(&split) {
        return f64::NAN;
    }
    let bulk = rhat_of_split(&rank_normalize(&split));
    let median = pooled_median(chains);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|x| (x - median).abs()).collect())
        .collect();
    let tail = if is_degenerate(&folded) {
        bulk
    } else {
        rhat_of_split(&rank_normalize(&folded))
    };
    bulk.max(tail)
}

fn pooled_median(chains: &[Vec<f64>]) -> f64 {
    let mut all: Vec<f64> = chains.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let n = all.len();
    if n % 2 == 1 {
        all[n / 2]
    } else {
        0.5 * (all[n / 2 - 1] + all[n / 2])
    }
}

/// Effective sample size of the given sequences (not split or normalized
/// here). Autocovariances are computed lag by lag only as far as the initial
/// positive sequence needs them.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 || is_degenerate(chains) {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let nf = n as f64;
    let acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| {
                (0..n - lag)
                    .map(|i| (c[i] - mu) * (c[i + lag] - mu))
                    .sum::<f64>()
                    / nf
            })
            .sum::<f64>()
            / m as f64
    };
    let acov0 = acov(0);
    let mean_var = acov0 * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        let grand = mean(&means);
        var_plus += means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    }
    let rho = |lag: usize| 1.0 - (mean_var - acov(lag)) / var_plus;

    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut rho_even = 1.0;
    let mut rho_odd = rho(1);
    rho_hat[1] = rho_odd;
    let mut t = 1;
    while t < n - 5 && rho_even + rho_odd > 0.0 {
        rho_even = rho(t + 1);
        rho_odd = rho(t + 2);
        if rho_even + rho_odd >= 0.0 {
            rho_hat[t + 1] = rho_even;
            rho_hat[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho_hat[max_t + 1] = rho_even;
    }
    // enforce a monotone sequence of paired sums
    let mut t = 1;
    while t + 2 <= max_t {
        let prev = rho_hat[t - 1] + rho_hat[t];
        if rho_hat[t + 1] + rho_hat[t + 2] > prev {
            rho_hat[t + 1] = prev / 2.0;
            rho_hat[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let draws = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho_hat[..=max_t].iter().sum::<f64>() + rho_hat[max_t + 1];
    let tau = tau.max(1.0 / draws.log10());
    draws / tau
}

/// Bulk ESS: [`ess`] of the rank-normalized split chains.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    if split[0].len() < 4 || is_degenerate(&split) {
        return f64::NAN;
    }
    ess(&rank_normalize(&split))
}

/// ESS for estimating the mean: [`ess`] of the raw split chains.
pub fn mean_ess(chains: &[Vec<f64>]) -> f64 {
    ess(&split_chains(chains))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::RngSeed;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_chains(seed: u64, m: usize, n: usize, shift: &[f64]) -> Vec<Vec<f64>> {
        let mut rng = RngSeed(seed).rng();
        (0..m)
            .map(|c| {
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + shift.get(c).copied().unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn iid_chains_have_unit_rhat() {
        let chains = normal_chains(3, 4, 1000, &[]);
        let r = rank_normalized_rhat(&chains);
        assert!((0.99..=1.01).contains(&r), "rhat {r}");
        let e = bulk_ess(&chains);
        assert!(e > 2500.0 && e < 6000.0, "ess {e}");
    }

    #[test]
    fn separated_chains_have_large_rhat() {
        let chains = normal_chains(4, 2, 500, &[-10.0, 10.0]);
        assert!(rank_normalized_rhat(&chains) > 1.5);
    }

    #[test]
    fn constant_chains_are_degenerate() {
        let chains = vec![vec![1.0; 100], vec![1.0; 100]];
        assert!(rank_normalized_rhat(&chains).is_nan());
        assert!(bulk_ess(&chains).is_nan());
    }

    #[test]
    fn autocorrelated_chain_has_reduced_ess() {
        // AR(1) with phi = 0.9 has integrated autocorrelation time 19
        let mut rng = RngSeed(5).rng();
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..5000)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x = 0.9 * x + z;
                        x
                    })
                    .collect()
            })
            .collect();
        let e = mean_ess(&chains);
        let expected = 20_000.0 / 19.0;
        assert!(e > 0.7 * expected && e < 1.3 * expected, "ess {e} vs {expected}");
    }

    #[test]
    fn ranks_average_ties() {
        let z = rank_normalize(&[vec![1.0, 2.0], vec![2.0, 3.0]]);
        assert_eq!(z[0][1], z[1][0]);
        assert!(z[0][0] < z[0][1] && z[1][0] < z[1][1]);
        assert!((z[0][0] + z[1][1]).abs() < 1e-12);
    }
}
