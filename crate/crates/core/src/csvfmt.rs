//! Shortest round-trip decimal formatting for CSV output.

/// Formats `x` with the shortest decimal string that parses back to the same
/// bits, switching to exponent notation for very small or very large magnitudes.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let a = x.abs();
    if (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for &x in &[0.1, -2.5, 1.0 / 3.0, 1e-300, 6.02e23, 123456.789, -0.0, 1e-5, 9.999e15] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(fmt_f64(1.0), "1");
        assert_eq!(fmt_f64(1e-7), "1e-7");
    }
}
