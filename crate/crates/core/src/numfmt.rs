//! Number formatting for CSV output.

/// Formats `x` with `digits` significant digits in the style of C's `%g`:
/// fixed notation for moderate exponents, scientific otherwise, trailing
/// zeros trimmed. Non-finite values print as `nan`, `inf` and `-inf`.
pub fn sig(x: f64, digits: usize) -> String {
    let digits = digits.max(1);
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    // Round first so that e.g. 9.999996 picks the exponent of 10.0.
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::sig;

    #[test]
    fn matches_printf_g() {
        assert_eq!(sig(0.0, 6), "0");
        assert_eq!(sig(1.0, 6), "1");
        assert_eq!(sig(0.1, 6), "0.1");
        assert_eq!(sig(99.9173, 6), "99.9173");
        assert_eq!(sig(21.119_734_2, 6), "21.1197");
        assert_eq!(sig(123_456_789.0, 6), "1.23457e+08");
        assert_eq!(sig(0.000_012_345_67, 6), "1.23457e-05");
        assert_eq!(sig(0.000_123_456_7, 6), "0.000123457");
        assert_eq!(sig(-2.5, 6), "-2.5");
        assert_eq!(sig(9.999_999_9, 6), "10");
        assert_eq!(sig(999_999.7, 6), "1e+06");
        assert_eq!(sig(f64::INFINITY, 6), "inf");
    }
}
