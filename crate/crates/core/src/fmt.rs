//! Deterministic decimal formatting shared by the text writers.

/// Formats `x` with 10 significant digits.
///
/// Fixed notation is used for magnitudes in `[1e-4, 1e15)`, scientific
/// otherwise. The output depends only on the bits of `x`.
pub fn sig10(x: f64) -> String {
    if x == 0.0 {
        return "0.000000000".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..15).contains(&exp) {
        let decimals = (9 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.9e}")
    }
}

#[cfg(test)]
mod tests {
    use super::sig10;

    #[test]
    fn significant_digits() {
        assert_eq!(sig10(1.1879), "1.187900000");
        assert_eq!(sig10(-0.7586), "-0.7586000000");
        assert_eq!(sig10(123.456), "123.4560000");
        assert_eq!(sig10(0.0), "0.000000000");
        assert_eq!(sig10(2.5e-9), "2.500000000e-9");
    }

    #[test]
    fn parses_back_within_precision() {
        for &x in &[std::f64::consts::PI, -1e-3 / 7.0, 9.87654321012e7, 4.2e-12] {
            let y: f64 = sig10(x).parse().unwrap();
            assert!((x - y).abs() <= 1e-9 * x.abs(), "{x} -> {y}");
        }
    }
}
