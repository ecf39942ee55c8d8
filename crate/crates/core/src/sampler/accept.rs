//! Log acceptance ratios of the four block updates.
//!
//! All functions return `log α` before truncation at zero; callers compare
//! against `ln U`.

/// β or c move: `Σ_k ΔN_k ln r_k + ΔY_k ln λ_k`.
pub fn log_alpha_partition(
    log_ratios: &[f64],
    rates: &[f64],
    n_current: &[usize],
    n_proposed: &[usize],
    y_current: &[usize],
    y_proposed: &[usize],
) -> f64 {
    let mut total = 0.0;
    for k in 0..rates.len() {
        let dn = n_proposed[k] as f64 - n_current[k] as f64;
        let dy = y_proposed[k] as f64 - y_current[k] as f64;
        if dn != 0.0 {
            total += dn * log_ratios[k];
        }
        if dy != 0.0 {
            total += dy * rates[k].ln();
        }
    }
    total
}

/// Fresh auxiliary points in one square: `Σ_k (|Ṅ_{l,k}| − |N_{l,k}|) ln r_k`.
pub fn log_alpha_square(log_ratios: &[f64], current: &[usize], proposed: &[usize]) -> f64 {
    log_ratios
        .iter()
        .zip(current.iter().zip(proposed))
        .filter(|(_, (c, p))| c != p)
        .map(|(r, (&c, &p))| (p as f64 - c as f64) * r)
        .sum()
}

/// Likelihood part of the rate move for one time slice:
/// `−μ(S)(λ̈_m − λ_m) + Σ_k |N̈_k| ln r̈_k − |N_k| ln r_k + |Y_k| ln(λ̈_k/λ_k)`.
#[allow(clippy::too_many_arguments)]
pub fn log_alpha_rates(
    area: f64,
    rates: &[f64],
    proposed: &[f64],
    log_ratios: &[f64],
    proposed_log_ratios: &[f64],
    n_current: &[usize],
    n_proposed: &[usize],
    y_counts: &[usize],
) -> f64 {
    let min = |v: &[f64]| v.iter().copied().fold(f64::MAX, f64::min);
    let mut total = -area * (min(proposed) - min(rates));
    for k in 0..rates.len() {
        if n_proposed[k] > 0 {
            total += n_proposed[k] as f64 * proposed_log_ratios[k];
        }
        if n_current[k] > 0 {
            total -= n_current[k] as f64 * log_ratios[k];
        }
        if y_counts[k] > 0 {
            total += y_counts[k] as f64 * (proposed[k] / rates[k]).ln();
        }
    }
    total
}

/// Jacobian of a random walk on `ln λ`: `Σ_k ln(λ̈_k / λ_k)`.
pub fn log_walk_jacobian(rates: &[f64], proposed: &[f64]) -> f64 {
    rates.iter().zip(proposed).map(|(a, b)| (b / a).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::RateVector;
    use crate::priors::{rg_log_density_unnorm, RGSpec};

    fn lr(rates: &[f64], delta: f64) -> Vec<f64> {
        RateVector::new(rates.to_vec()).unwrap().log_ratios(delta)
    }

    #[test]
    fn identical_proposals_accept() {
        let r = [1.0, 4.0, 12.0];
        let l = lr(&r, 2.0);
        let n = [4, 5, 6];
        let y = [1, 2, 3];
        assert_eq!(log_alpha_partition(&l, &r, &n, &n, &y, &y), 0.0);
        assert_eq!(log_alpha_square(&l, &n, &n), 0.0);
        assert_eq!(log_alpha_rates(100.0, &r, &r, &l, &l, &n, &n, &y), 0.0);
        assert_eq!(log_walk_jacobian(&r, &r), 0.0);
    }

    #[test]
    fn single_level_moves_always_accept() {
        let r = [3.0];
        let l = lr(&r, 2.0);
        assert_eq!(log_alpha_partition(&l, &r, &[4], &[9], &[2], &[2]), 0.0);
        assert_eq!(log_alpha_square(&l, &[4], &[0]), 0.0);
    }

    #[test]
    fn data_point_moving_to_top_region() {
        // λ = (1, 4, 12), one event from region 1 to region 3
        let r = [1.0, 4.0, 12.0];
        let l = lr(&r, 2.0);
        let n = [3, 3, 3];
        let a = log_alpha_partition(&l, &r, &n, &n, &[2, 0, 0], &[1, 0, 1]);
        assert!((a - 12f64.ln()).abs() < 1e-14);
        assert!(a.min(0.0) == 0.0);
    }

    #[test]
    fn square_losing_a_point() {
        // λ = (1, 2), δ = 2: r = (1, 2/3); one point of region 2 removed
        let l = lr(&[1.0, 2.0], 2.0);
        let a = log_alpha_square(&l, &[0, 1], &[0, 0]);
        assert!((a - 1.5f64.ln()).abs() < 1e-14);
        assert_eq!(a.min(0.0), 0.0);
        // a region-1 point has ratio 1, so losing it leaves α = 1 as well
        assert_eq!(log_alpha_square(&l, &[1, 0], &[0, 0]), 0.0);
        // gaining a region-2 point is accepted with probability 2/3
        let b = log_alpha_square(&l, &[0, 0], &[0, 1]);
        assert!((b - (2.0f64 / 3.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn auxiliary_point_moving_down_a_level() {
        // one N point from region 2 to 1: (3/3)^{+1} (2/3)^{-1}
        let r = [1.0, 2.0];
        let l = lr(&r, 2.0);
        let a = log_alpha_partition(&l, &r, &[2, 2], &[3, 1], &[0, 0], &[0, 0]);
        assert!((a - 1.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn single_level_rate_move_against_closed_form() {
        // K = 1, λ 5 → 6, |Y| = 50, μ(S) = 1 with the default gamma prior
        let prior = RGSpec::default_for(1);
        let lik = log_alpha_rates(1.0, &[5.0], &[6.0], &[0.0], &[0.0], &[7], &[11], &[50]);
        let a = lik + rg_log_density_unnorm(&[6.0], &prior) - rg_log_density_unnorm(&[5.0], &prior);
        let want = -1.0 + 50.0 * 1.2f64.ln() + 0.2 * 1.2f64.ln() - 0.04;
        assert!((a - want).abs() < 1e-12);
        // The Gamma(α+|Y|, η+μ) posterior kernel ratio is the same quantity.
        let post = |l: f64| (1.2 + 50.0 - 1.0) * f64::ln(l) - 1.04 * l;
        assert!((a - (post(6.0) - post(5.0))).abs() < 1e-12);
        assert!((log_walk_jacobian(&[5.0], &[6.0]) - 1.2f64.ln()).abs() < 1e-15);
    }
}
