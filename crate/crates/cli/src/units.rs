//! Flag parsing for quantities with SI suffixes: times take ps/ns/us/ms/s,
//! frequency ratios take ppb/ppm or a plain dimensionless number.

use wcps_core::timetag::{TimeTick, TICKS_PER_SEC};

fn split_suffix(s: &str) -> (&str, &str) {
    let idx = s
        .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E')
        .unwrap_or(s.len());
    // Guard against the exponent of scientific notation ("1e-3").
    let (num, suffix) = s.split_at(idx);
    (num.trim(), suffix.trim())
}

/// Parses a time with an explicit suffix into integer picosecond ticks.
pub fn parse_ticks(s: &str) -> Result<TimeTick, String> {
    let (num, suffix) = split_suffix(s);
    let value: f64 = num
        .parse()
        .map_err(|e| format!("bad number in {s:?}: {e}"))?;
    let scale = match suffix {
        "ps" => 1.0,
        "ns" => 1e3,
        "us" => 1e6,
        "ms" => 1e9,
        "s" => 1e12,
        "" => return Err(format!("{s:?} needs a time suffix (ps, ns, us, ms, s)")),
        other => return Err(format!("unknown time suffix {other:?} in {s:?}")),
    };
    Ok(TimeTick((value * scale).round() as i64))
}

/// Parses a duration in seconds (same suffixes as [`parse_ticks`]).
pub fn parse_seconds(s: &str) -> Result<f64, String> {
    Ok(parse_ticks(s)?.0 as f64 / TICKS_PER_SEC as f64)
}

/// Parses a fractional frequency offset: `4ppm`, `50ppb`, or a plain ratio
/// like `1e-6`.
pub fn parse_ratio(s: &str) -> Result<f64, String> {
    let (num, suffix) = split_suffix(s);
    let value: f64 = num
        .parse()
        .map_err(|e| format!("bad number in {s:?}: {e}"))?;
    let scale = match suffix {
        "ppm" => 1e-6,
        "ppb" => 1e-9,
        "" => 1.0,
        other => return Err(format!("unknown ratio suffix {other:?} in {s:?}")),
    };
    Ok(value * scale)
}

/// Parses an attenuation in dB (plain number, must be ≤ 0 at the point of
/// use; range checking stays with the source model).
pub fn parse_db(s: &str) -> Result<f64, String> {
    s.trim()
        .trim_end_matches("dB")
        .trim_end_matches("db")
        .trim()
        .parse()
        .map_err(|e| format!("bad dB value {s:?}: {e}"))
}
