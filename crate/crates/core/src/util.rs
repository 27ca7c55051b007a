//! Small numerical helpers shared across modules.

/// Kahan-compensated sum. Face sums and Monte Carlo reductions add many
/// small terms to a running total whose magnitude dwarfs them, where naive
/// summation rounds every term away.
pub(crate) fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_keeps_terms_below_one_ulp_of_the_total() {
        // 1e8 followed by a million copies of 5e-9: each copy is under half
        // an ulp of the total (2^-27 of 2^26..2^27 is ~7.45e-9), so naive
        // summation rounds every single one away while Kahan keeps them.
        let terms = std::iter::once(1e8).chain(std::iter::repeat(5e-9).take(1_000_000));
        let sum = kahan_sum(terms.clone());
        assert!((sum - (1e8 + 0.005)).abs() < 1e-6, "kahan: {sum}");
        let naive: f64 = terms.sum();
        assert_eq!(naive, 1e8, "naive should drop sub-half-ulp terms");
    }
}
