//! Final-answer extraction and verification.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};

const BOXED_MARKER: &str = "\\boxed{";

/// Extracts the answer from raw model output: the content of the last
/// brace-balanced `\boxed{…}`, or the trimmed first line when no balanced
/// box exists.
pub fn extract_answer(raw: &str) -> String {
    let mut last: Option<&str> = None;
    let mut search = 0usize;
    while let Some(found) = raw[search..].find(BOXED_MARKER) {
        let open = search + found + BOXED_MARKER.len();
        if let Some(content) = balanced_content(&raw[open..]) {
            last = Some(content);
        }
        search = open;
    }
    match last {
        Some(content) => content.to_string(),
        None => raw.lines().next().unwrap_or("").trim().to_string(),
    }
}

/// Returns the text up to the brace that balances an already-open `{`,
/// or `None` when the braces never balance.
fn balanced_content(rest: &str) -> Option<&str> {
    let mut depth = 1usize;
    for (i, ch) in rest.char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&rest[..i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Strips surrounding whitespace and matched outer `$` pairs.
fn normalize(answer: &str) -> &str {
    let mut s = answer.trim();
    while s.len() > 1 && s.starts_with('$') && s.ends_with('$') {
        s = s[1..s.len() - 1].trim();
    }
    s
}

/// A parsed numeric answer: an exact rational plus whether the surface
/// form was decimal (decimal forms compare with a small tolerance).
struct Numeric {
    value: BigRational,
    decimal_form: bool,
}

fn parse_numeric(s: &str) -> Option<Numeric> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    if let Some((num, den)) = s.split_once('/') {
        let num: BigInt = num.trim().parse().ok()?;
        let den: BigInt = den.trim().parse().ok()?;
        if den.is_zero() {
            return None;
        }
        return Some(Numeric {
            value: BigRational::new(num, den),
            decimal_form: false,
        });
    }
    parse_decimal(s)
}

/// Parses `[+-]?digits[.digits][eE[+-]digits]` into an exact rational.
fn parse_decimal(s: &str) -> Option<Numeric> {
    let (mantissa, exponent) = match s.split_once(['e', 'E']) {
        Some((m, e)) => (m, Some(e)),
        None => (s, None),
    };
    let exponent: i64 = match exponent {
        Some(e) => e.parse().ok()?,
        None => 0,
    };
    let negative = mantissa.starts_with('-');
    let unsigned = mantissa.strip_prefix(['-', '+']).unwrap_or(mantissa);
    let (int_part, frac_part) = match unsigned.split_once('.') {
        Some((i, f)) => (i, f),
        None => (unsigned, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let mut value = BigRational::new(digits.parse().ok()?, BigInt::from(1));
    let scale = i32::try_from(exponent - frac_part.len() as i64).ok()?;
    let ten = BigRational::new(BigInt::from(10), BigInt::from(1));
    value *= ten.pow(scale);
    if negative {
        value = -value;
    }
    Some(Numeric {
        value,
        decimal_form: !frac_part.is_empty() || s.contains(['e', 'E']),
    })
}

/// Verifies a candidate answer against the ground truth.
///
/// Both sides go through [`extract_answer`] and normalization; equal
/// strings verify. Otherwise both must parse numerically: exact forms
/// (integers, fractions) compare exactly, and when either side is a
/// decimal the values compare within `1e-9`.
pub fn verify_answer(candidate: &str, ground_truth: &str) -> bool {
    let a = extract_answer(candidate);
    let b = extract_answer(ground_truth);
    let a = normalize(&a);
    let b = normalize(&b);
    if a == b {
        return true;
    }
    let (Some(x), Some(y)) = (parse_numeric(a), parse_numeric(b)) else {
        return false;
    };
    if x.value == y.value {
        return true;
    }
    if x.decimal_form || y.decimal_form {
        let diff = (x.value - y.value).abs();
        return diff.to_f64().map(|d| d <= 1e-9).unwrap_or(false);
    }
    false
}
