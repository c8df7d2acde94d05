//! Summation and floating-point comparison helpers.
//!
//! Allocation identities are only as good as the sums that produce them, so
//! every report total in this crate goes through [`fsum`], which returns the
//! correctly rounded sum of its inputs. A correctly rounded sum does not
//! depend on the order of its inputs, which is what lets two different
//! groupings of the same trades report bit-identical totals.

use sha2::{Digest, Sha256};

/// Correctly rounded sum of a sequence of `f64`.
///
/// Keeps a list of non-overlapping partial sums (Shewchuk's algorithm) and
/// rounds the exact total once at the end. Non-finite inputs fall back to
/// ordinary IEEE addition of the non-finite terms.
pub fn fsum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    let mut special = 0.0;
    let mut saw_special = false;
    for value in values {
        if !value.is_finite() {
            special += value;
            saw_special = true;
            continue;
        }
        let mut x = value;
        let mut kept = 0;
        for idx in 0..partials.len() {
            let mut y = partials[idx];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        partials.truncate(kept);
        partials.push(x);
    }
    if saw_special {
        return special;
    }

    let Some(&top) = partials.last() else {
        return 0.0;
    };
    let mut idx = partials.len() - 1;
    let mut hi = top;
    let mut lo = 0.0;
    while idx > 0 {
        idx -= 1;
        let x = hi;
        let y = partials[idx];
        hi = x + y;
        let y_rounded = hi - x;
        lo = y - y_rounded;
        if lo != 0.0 {
            break;
        }
    }
    // Half-way case: the remaining partials decide the rounding direction.
    if idx > 0 && ((lo < 0.0 && partials[idx - 1] < 0.0) || (lo > 0.0 && partials[idx - 1] > 0.0))
    {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Compensated running sum (Neumaier). Cheaper than [`fsum`] and accurate to
/// a couple of ulps of the result for the path-sized sums used internally.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<T: IntoIterator<Item = f64>>(iter: T) -> Self {
        let mut acc = NeumaierSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Unit in the last place of `x` (spacing to the next representable value
/// away from zero). `ulp(0.0)` is the smallest subnormal.
pub fn ulp(x: f64) -> f64 {
    let x = x.abs();
    if !x.is_finite() {
        return f64::NAN;
    }
    if x < f64::MIN_POSITIVE {
        return f64::from_bits(1);
    }
    let next = f64::from_bits(x.to_bits() + 1);
    next - x
}

/// Distance between `a` and `b` in ulps of `max(|a|, |b|, scale)`.
///
/// `scale` is the magnitude of the terms that produced `a` and `b` (for a sum,
/// the sum of absolute values). When an identity involves cancellation the
/// result can be far smaller than its summands, and rounding error is
/// proportional to the summands, not to the result.
pub fn ulps_apart(a: f64, b: f64, scale: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let reference = a.abs().max(b.abs()).max(scale.abs());
    (a - b).abs() / ulp(reference)
}

pub fn within_ulps(a: f64, b: f64, scale: f64, ulps: f64) -> bool {
    ulps_apart(a, b, scale) <= ulps
}

/// Short stable content hash (hex) of any serializable value.
pub(crate) fn content_hash<T: serde::Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("content hash input serializes");
    hash_bytes(&bytes)
}

pub(crate) fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a list of float arrays by exact bit pattern.
pub(crate) fn hash_f64_rows<'a, I: IntoIterator<Item = &'a [f64]>>(tag: &str, rows: I) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    for row in rows {
        hasher.update((row.len() as u64).to_le_bytes());
        for v in row {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
