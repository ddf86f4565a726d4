//! Deterministic low-discrepancy sampling of boxes.

/// First primes, one per coordinate of the Halton sequence.
const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut out = 0.0;
    while index > 0 {
        out += (index % base) as f64 * scale;
        index /= base;
        scale *= inv;
    }
    out
}

/// Halton points in the axis-aligned box `[lo_i, hi_i]`.
///
/// The first point of the raw sequence (the origin) is skipped.
pub fn halton_box(lo: &[f64], hi: &[f64], count: usize) -> Vec<Vec<f64>> {
    assert_eq!(lo.len(), hi.len(), "box bounds must have equal length");
    assert!(lo.len() <= PRIMES.len(), "at most {} dimensions", PRIMES.len());
    (1..=count as u64)
        .map(|k| {
            lo.iter()
                .zip(hi)
                .zip(PRIMES)
                .map(|((a, b), base)| a + (b - a) * radical_inverse(k, base))
                .collect()
        })
        .collect()
}
