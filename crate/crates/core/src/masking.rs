//! Random time-step masks and their meaning inside self-attention.
//!
//! A masked time step is removed as a key/value for every *other* query, but
//! always keeps its own self-key, so each attention row has at least one
//! visible entry. At rate 1.0 this leaves only the diagonal: no attention
//! between any two distinct time steps.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrix {
    kept: Vec<bool>,
    masked: usize,
}

impl MaskMatrix {
    pub fn all_visible(len: usize) -> Self {
        MaskMatrix {
            kept: vec![true; len],
            masked: 0,
        }
    }

    /// Build from an explicit visibility vector (`true` = visible).
    pub fn from_kept(kept: Vec<bool>) -> Self {
        let masked = kept.iter().filter(|k| !**k).count();
        MaskMatrix { kept, masked }
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn is_masked(&self, t: usize) -> bool {
        !self.kept[t]
    }

    pub fn masked_count(&self) -> usize {
        self.masked
    }

    pub fn rate(&self) -> f64 {
        if self.kept.is_empty() {
            0.0
        } else {
            self.masked as f64 / self.kept.len() as f64
        }
    }

    /// Whether query `q` may not attend to key `k`.
    pub fn blocks(&self, q: usize, k: usize) -> bool {
        q != k && !self.kept[k]
    }

    /// Row-major `len x len` table of [`Self::blocks`].
    pub fn blocked_pairs(&self) -> Vec<bool> {
        let n = self.len();
        (0..n * n).map(|i| self.blocks(i / n, i % n)).collect()
    }
}

/// Number of masked steps for `rate` over `len` steps.
pub fn masked_count(len: usize, rate: f64) -> usize {
    ((rate * len as f64).round() as usize).min(len)
}

pub fn check_rate(rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("masking rate {rate} not in [0, 1]")))
    }
}

/// Mask exactly `round(rate * len)` positions, chosen uniformly without
/// replacement.
pub fn generate_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Result<MaskMatrix> {
    check_rate(rate)?;
    let count = masked_count(len, rate);
    let mut kept = vec![true; len];
    if count == len {
        kept.iter_mut().for_each(|k| *k = false);
    } else if count > 0 {
        for i in index::sample(rng, len, count) {
            kept[i] = false;
        }
    }
    Ok(MaskMatrix { kept, masked: count })
}

/// Additive attention bias: `-inf` where a query may not see a key, else 0.
pub fn attention_bias(mask: &MaskMatrix) -> Vec<Vec<f64>> {
    let n = mask.len();
    (0..n)
        .map(|q| {
            (0..n)
                .map(|k| if mask.blocks(q, k) { f64::NEG_INFINITY } else { 0.0 })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forty_percent_of_five_masks_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = generate_mask(5, 0.4, &mut rng).unwrap();
        assert_eq!(m.masked_count(), 2);
        assert_eq!(m.kept().iter().filter(|k| !**k).count(), 2);
    }

    #[test]
    fn extreme_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(generate_mask(96, 0.0, &mut rng).unwrap().kept().iter().all(|&k| k));
        assert!(generate_mask(96, 1.0, &mut rng).unwrap().kept().iter().all(|&k| !k));
        assert!(generate_mask(96, 1.5, &mut rng).is_err());
        assert!(generate_mask(96, -0.1, &mut rng).is_err());
    }

    #[test]
    fn bias_examples() {
        let visible = attention_bias(&MaskMatrix::all_visible(4));
        assert!(visible.iter().flatten().all(|&b| b == 0.0));

        let m = MaskMatrix::from_kept(vec![true, false, true]);
        let b = attention_bias(&m);
        let ninf = f64::NEG_INFINITY;
        assert_eq!(b, vec![vec![0.0, ninf, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, ninf, 0.0]]);

        let all = attention_bias(&MaskMatrix::from_kept(vec![false; 4]));
        for (q, row) in all.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                assert_eq!(v, if q == k { 0.0 } else { ninf });
            }
        }
    }

    #[test]
    fn same_stream_same_mask() {
        let a = generate_mask(96, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_mask(96, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
