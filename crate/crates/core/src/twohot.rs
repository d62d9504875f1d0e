//! Two-hot encoding of a scalar onto a fixed bin grid.
//!
//! A value is represented as a weight vector over bin centres with at most
//! two adjacent nonzero entries that sum to one; the expectation of the bin
//! centres under those weights reproduces the (clipped) value exactly. Used
//! by the reward and value heads, whose targets live on a symlog-spaced grid.

use crate::num::{symlog, Real};

/// Strictly increasing bin centres for two-hot encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Bins<F> {
    centres: Vec<F>,
}

impl<F: Real> Bins<F> {
    /// Builds bins from explicit centres.
    ///
    /// Panics if fewer than two centres are given or they are not strictly
    /// increasing — both are caller contract violations.
    pub fn new(centres: Vec<F>) -> Self {
        assert!(
            centres.len() >= 2,
            "two-hot bins need at least 2 centres, got {}",
            centres.len()
        );
        for w in centres.windows(2) {
            assert!(
                w[0] < w[1],
                "two-hot bin centres must be strictly increasing, got {} then {}",
                w[0],
                w[1]
            );
        }
        Self { centres }
    }

    /// `k` centres uniformly spaced in symlog space over `[-limit, limit]`,
    /// i.e. covering raw values in that range after symlog compression.
    pub fn symlog_spaced(k: usize, limit: F) -> Self {
        assert!(k >= 2, "need at least 2 bins, got {k}");
        assert!(limit > F::zero(), "bin limit must be positive, got {limit}");
        let lo = symlog(-limit);
        let hi = symlog(limit);
        let step = (hi - lo) / F::of((k - 1) as f64);
        let centres = (0..k).map(|i| lo + step * F::of(i as f64)).collect();
        Self::new(centres)
    }

    pub fn len(&self) -> usize {
        self.centres.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor guarantees >= 2 centres
    }

    pub fn centres(&self) -> &[F] {
        &self.centres
    }

    /// Encodes `v` as a weight vector over the centres.
    ///
    /// Values outside the grid clip to the extreme bin. Non-finite input is a
    /// contract violation.
    pub fn encode(&self, v: F) -> Vec<F> {
        assert!(v.is_finite(), "two-hot encode of non-finite value {v}");
        let k = self.centres.len();
        let mut w = vec![F::zero(); k];
        if v <= self.centres[0] {
            w[0] = F::one();
            return w;
        }
        if v >= self.centres[k - 1] {
            w[k - 1] = F::one();
            return w;
        }
        // Find the segment [c_i, c_{i+1}] containing v; linear weights.
        let i = match self
            .centres
            .binary_search_by(|c| c.partial_cmp(&v).expect("finite centres"))
        {
            Ok(exact) => {
                w[exact] = F::one();
                return w;
            }
            Err(ins) => ins - 1,
        };
        let lo = self.centres[i];
        let hi = self.centres[i + 1];
        let upper = (v - lo) / (hi - lo);
        w[i + 1] = upper;
        w[i] = F::one() - upper;
        w
    }

    /// Expectation of the centres under weight vector `w`.
    pub fn decode(&self, w: &[F]) -> F {
        assert_eq!(
            w.len(),
            self.centres.len(),
            "two-hot decode weight length {} does not match bin count {}",
            w.len(),
            self.centres.len()
        );
        w.iter()
            .zip(&self.centres)
            .map(|(&wi, &ci)| wi * ci)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_bins() -> Bins<f64> {
        Bins::new(vec![-1.0, 0.0, 1.0])
    }

    #[test]
    fn encode_hits_centre_exactly() {
        assert_eq!(unit_bins().encode(0.0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn encode_splits_between_adjacent_bins() {
        assert_eq!(unit_bins().encode(0.5), vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn encode_clips_out_of_range() {
        assert_eq!(unit_bins().encode(1.7), vec![0.0, 0.0, 1.0]);
        assert_eq!(unit_bins().encode(-3.0), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_decode_round_trips_in_range() {
        let bins = Bins::<f64>::symlog_spaced(41, 120.0);
        let mut v = symlog(-119.0);
        while v < symlog(119.0) {
            let w = bins.encode(v);
            let nonzero = w.iter().filter(|&&x| x != 0.0).count();
            assert!(nonzero <= 2, "more than two nonzero weights at v={v}");
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "weights must sum to 1");
            assert!(
                (bins.decode(&w) - v).abs() < 1e-12,
                "round trip failed at v={v}"
            );
            v += 0.0913;
        }
    }

    #[test]
    fn nonzero_weights_are_adjacent() {
        let bins = Bins::<f64>::symlog_spaced(41, 120.0);
        let w = bins.encode(1.2345);
        let idx: Vec<usize> = (0..w.len()).filter(|&i| w[i] != 0.0).collect();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx[1], idx[0] + 1, "nonzero weights must be adjacent");
    }

    #[test]
    fn decode_clips_like_encode() {
        let bins = unit_bins();
        assert_eq!(bins.decode(&bins.encode(9.0)), 1.0);
        assert_eq!(bins.decode(&bins.encode(-9.0)), -1.0);
    }

    #[test]
    fn symlog_grid_covers_reward_range() {
        // The default reward head must be able to represent the terminal
        // bonus magnitude (100) without clipping.
        let bins = Bins::<f64>::symlog_spaced(41, 120.0);
        assert!(bins.centres()[0] < symlog(-100.0));
        assert!(*bins.centres().last().unwrap() > symlog(100.0));
    }

    #[test]
    #[should_panic(expected = "strictly increasing")]
    fn non_monotone_bins_rejected() {
        let _ = Bins::new(vec![0.0, 1.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "at least 2")]
    fn single_bin_rejected() {
        let _ = Bins::new(vec![0.0]);
    }
}
