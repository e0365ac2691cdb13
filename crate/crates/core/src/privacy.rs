//! Label masking with a device-secret nonce.
//!
//! The device sends `Δy = Label − y_pre + R` instead of labels. `R` is drawn
//! once per session from `(−1, 1)^C` and stays on the device; the trained side
//! network is only useful after `y_pre + y_side − R`.
//!
//! `R` and `y_pre` are snapped to multiples of [`MASK_GRID`] before masking.
//! Every operand then sits on a 2^-32 grid with magnitude below 4, so the
//! sums below are exact in `f64` and `fuse(y_pre, Δy, R) == Label` holds
//! bit-for-bit. The snap moves `y_pre` by at most 2^-33.

use crate::numerics::{SeededRng, ShapeError, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("row {row} is not a one-hot label")]
    NotOneHot { row: usize },
    #[error("nonce has {nonce} entries but outputs have {classes} classes")]
    ClassCount { nonce: usize, classes: usize },
}

/// Spacing of the fixed-point grid used by the masking arithmetic.
pub const MASK_GRID: f64 = 1.0 / 4_294_967_296.0;

/// Rounds to the nearest multiple of [`MASK_GRID`].
pub fn snap(x: f64) -> f64 {
    (x / MASK_GRID).round() * MASK_GRID
}

/// Session-secret nonce `R`. Deliberately has no wire encoding.
#[derive(Clone, PartialEq)]
pub struct NonceKey {
    values: Vec<f64>,
    session_id: u64,
    seed: u64,
}

impl std::fmt::Debug for NonceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NonceKey")
            .field("session_id", &self.session_id)
            .field("classes", &self.values.len())
            .finish_non_exhaustive()
    }
}

impl NonceKey {
    /// Builds a key from explicit values (snapped to the mask grid); every
    /// entry must lie in `(−1, 1)`.
    pub fn from_values(values: Vec<f64>, session_id: u64) -> Option<Self> {
        let values: Vec<f64> = values.into_iter().map(snap).collect();
        if values.is_empty() || values.iter().any(|v| v.is_nan() || v.abs() >= 1.0) {
            return None;
        }
        Some(Self {
            values,
            session_id,
            seed: 0,
        })
    }

    /// The all-zero key, i.e. no masking.
    pub fn zero(classes: usize, session_id: u64) -> Self {
        Self {
            values: vec![0.0; classes],
            session_id,
            seed: 0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn classes(&self) -> usize {
        self.values.len()
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Draws `R` i.i.d. uniform on the open interval `(−1, 1)`.
pub fn generate_nonce(classes: usize, seed: u64, session_id: u64) -> NonceKey {
    assert!(classes >= 1, "nonce needs at least one class");
    let mut rng = SeededRng::new(seed);
    let values = (0..classes)
        .map(|_| loop {
            let v = snap(rng.uniform_open(-1.0, 1.0));
            if v.abs() < 1.0 {
                break v;
            }
        })
        .collect();
    NonceKey {
        values,
        session_id,
        seed,
    }
}

fn check_classes(t: &Tensor, nonce: &NonceKey) -> Result<(), PrivacyError> {
    if t.cols() != nonce.classes() {
        return Err(PrivacyError::ClassCount {
            nonce: nonce.classes(),
            classes: t.cols(),
        });
    }
    Ok(())
}

/// `Δy = Label − y_pre + R`, with the same `R` on every row.
pub fn delta_target(
    label: &Tensor,
    y_pre: &Tensor,
    nonce: &NonceKey,
) -> Result<Tensor, PrivacyError> {
    check_classes(label, nonce)?;
    for r in 0..label.rows() {
        let row = label.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(PrivacyError::NotOneHot { row: r });
        }
    }
    let diff = label.sub(&y_pre.map(snap))?;
    Ok(diff.add_row_vector(nonce.values())?)
}

/// `y_output = y_pre + y_side − R`.
pub fn fuse_output(
    y_pre: &Tensor,
    y_side: &Tensor,
    nonce: &NonceKey,
) -> Result<Tensor, PrivacyError> {
    check_classes(y_pre, nonce)?;
    let mut out = y_pre.map(snap).add(y_side)?;
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        for (v, r) in row.iter_mut().zip(nonce.values()) {
            *v -= r;
        }
    }
    Ok(out)
}

/// Adversary model: the unique positive entry if there is exactly one,
/// otherwise the argmax (lowest index on ties).
pub fn sign_leak_decode(delta_y_row: &[f64]) -> usize {
    let mut positives = delta_y_row
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i);
    if let (Some(i), None) = (positives.next(), positives.next()) {
        return i;
    }
    argmax(delta_y_row)
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One-hot `[B × C]` tensor from class indices.
pub fn one_hot(classes: &[usize], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[classes.len().max(1), num_classes]);
    for (r, &c) in classes.iter().enumerate() {
        t.row_mut(r)[c] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v]).unwrap()
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
    }

    #[test]
    fn worked_example_unmasked() {
        let y_pre = row(&[0.3, 0.6, 0.1]);
        let label = row(&[0.0, 1.0, 0.0]);
        let d = delta_target(&label, &y_pre, &NonceKey::zero(3, 1)).unwrap();
        assert!(close(d.data(), &[-0.3, 0.4, -0.1]));
        assert_eq!(sign_leak_decode(d.data()), 1);
    }

    #[test]
    fn worked_example_masked() {
        let y_pre = row(&[0.3, 0.6, 0.1]);
        let label = row(&[0.0, 1.0, 0.0]);
        let r = NonceKey::from_values(vec![0.9, 0.2, -0.3], 1).unwrap();
        let d = delta_target(&label, &y_pre, &r).unwrap();
        assert!(d
            .data()
            .iter()
            .zip([0.6, 0.6, -0.4])
            .all(|(x, y)| (x - y).abs() < 1e-9));
        // The masked row has two positive entries; the tie-break picks class 0.
        assert_eq!(sign_leak_decode(&[0.6, 0.6, -0.4]), 0);
        let fused = fuse_output(&y_pre, &row(&[0.6, 0.6, -0.4]), &r).unwrap();
        assert!(fused
            .data()
            .iter()
            .zip([0.0, 1.0, 0.0])
            .all(|(x, y)| (x - y).abs() < 1e-9));
        assert_eq!(fuse_output(&y_pre, &d, &r).unwrap(), label);
    }

    #[test]
    fn argmax_label_gets_largest_positive_delta() {
        let y_pre = row(&[0.2, 0.5, 0.3]);
        let label = row(&[0.0, 1.0, 0.0]);
        let d = delta_target(&label, &y_pre, &NonceKey::zero(3, 0)).unwrap();
        let mags: Vec<f64> = d.data().iter().map(|v| v.abs()).collect();
        assert_eq!(argmax(&mags), 1);
        assert!(d.data()[1] > 0.0);
    }

    #[test]
    fn fuse_cancellation_cases() {
        let y_pre = row(&[0.25, 0.75]);
        let r = NonceKey::from_values(vec![0.5, -0.125], 2).unwrap();
        let fused = fuse_output(&y_pre, &row(r.values()), &r).unwrap();
        assert_eq!(fused, y_pre);
        let label = row(&[1.0, 0.0]);
        let d = delta_target(&label, &y_pre, &r).unwrap();
        assert_eq!(fuse_output(&y_pre, &d, &r).unwrap(), label);
    }

    #[test]
    fn rejects_non_one_hot_labels() {
        let y_pre = row(&[0.5, 0.5]);
        let r = NonceKey::zero(2, 0);
        assert!(matches!(
            delta_target(&row(&[1.0, 1.0]), &y_pre, &r),
            Err(PrivacyError::NotOneHot { row: 0 })
        ));
        assert!(matches!(
            delta_target(&row(&[0.5, 0.5]), &y_pre, &r),
            Err(PrivacyError::NotOneHot { .. })
        ));
        assert!(matches!(
            delta_target(&row(&[0.0, 1.0]), &y_pre, &NonceKey::zero(3, 0)),
            Err(PrivacyError::ClassCount { .. })
        ));
    }

    #[test]
    fn nonce_is_deterministic_and_in_range() {
        let a = generate_nonce(16, 42, 1);
        let b = generate_nonce(16, 42, 1);
        assert_eq!(a, b);
        assert!(a.values().iter().all(|v| v.abs() < 1.0));
        assert_ne!(a, generate_nonce(16, 43, 1));
        assert!(NonceKey::from_values(vec![1.0], 0).is_none());
        assert!(NonceKey::from_values(vec![-1.0], 0).is_none());
        assert!(NonceKey::from_values(vec![f64::NAN], 0).is_none());
    }

    #[test]
    fn nonce_mean_is_near_zero() {
        // 10^5 draws from one stream.
        let r = generate_nonce(100_000, 7, 0);
        let mean = r.values().iter().sum::<f64>() / 100_000.0;
        assert!(mean.abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn masking_round_trip_is_exact_for_awkward_values() {
        let mut rng = SeededRng::new(99);
        for _ in 0..2000 {
            let p = rng.uniform_open(0.0, 1.0);
            let y_pre = row(&[p, 1.0 - p]);
            let label = if rng.unit() < 0.5 {
                row(&[1.0, 0.0])
            } else {
                row(&[0.0, 1.0])
            };
            let r = generate_nonce(2, rng.next_u64(), 0);
            let d = delta_target(&label, &y_pre, &r).unwrap();
            assert!(d.data().iter().all(|v| v.abs() < 2.0));
            assert_eq!(fuse_output(&y_pre, &d, &r).unwrap(), label);
        }
    }

    #[test]
    fn debug_does_not_print_nonce_values() {
        let r = NonceKey::from_values(vec![0.123456], 9).unwrap();
        assert!(!format!("{r:?}").contains("0.123456"));
    }
}
