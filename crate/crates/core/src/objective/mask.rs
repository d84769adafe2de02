use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Split of `n` patch positions into masked and visible sets, both sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    pub n: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
}

impl MaskSet {
    /// Builds a mask from an explicit masked set.
    pub fn from_masked(n: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        if masked.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Mask("duplicate masked position".into()));
        }
        if masked.last().is_some_and(|&m| m >= n) {
            return Err(Error::Mask(format!("masked position outside 0..{n}")));
        }
        let mut flags = vec![false; n];
        masked.iter().for_each(|&i| flags[i] = true);
        let visible = (0..n).filter(|&i| !flags[i]).collect();
        Ok(MaskSet { n, masked, visible })
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// `floor(r * n)` evaluated exactly on the binary value of `r`.
pub fn mask_count(n: usize, r: f64) -> Result<usize> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Mask(format!("ratio {r} outside (0, 1)")));
    }
    let bits = r.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1 << 52) - 1);
    // r = mant / 2^shift with shift > 0 because r < 1.
    let (mant, shift) = if exp == 0 {
        (frac, 1074)
    } else {
        (frac | (1 << 52), 1075 - exp)
    };
    if shift >= 120 {
        return Ok(0);
    }
    Ok(((mant as u128 * n as u128) >> shift) as usize)
}

/// Uniformly samples `floor(r * n)` masked positions without replacement.
///
/// Ratios outside `(0, 1)` are rejected; inside it the floor always leaves
/// at least one visible hint.
pub fn sample_mask<R: Rng>(n: usize, r: f64, rng: &mut R) -> Result<MaskSet> {
    if n == 0 {
        return Err(Error::Mask("no patch positions".into()));
    }
    let k = mask_count(n, r)?;
    if k == n {
        return Err(Error::Mask(format!(
            "ratio {r} masks all {n} positions and leaves no visible hints"
        )));
    }
    let masked = rand::seq::index::sample(rng, n, k).into_vec();
    MaskSet::from_masked(n, masked)
}
