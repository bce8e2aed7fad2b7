//! Rotary phase tables. The temporal and channel axes keep separate tables;
//! frequencies follow the usual geometric spacing and stay fixed.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Cosine/sine tables for a run of consecutive positions, shaped `[len, d_h/2]`.
pub struct RopeTables<T> {
    pub cos: Tensor<T>,
    pub sin: Tensor<T>,
}

/// Tables for positions `start .. start + len`.
pub fn rope_tables<T: Scalar>(start: usize, len: usize, d_h: usize, base: f64) -> RopeTables<T> {
    assert!(d_h % 2 == 0, "rotary tables need an even head width");
    let half = d_h / 2;
    let mut cos = Tensor::zeros(&[len, half]);
    let mut sin = Tensor::zeros(&[len, half]);
    for i in 0..len {
        let pos = (start + i) as f64;
        for j in 0..half {
            let theta = base.powf(-2.0 * j as f64 / d_h as f64);
            let angle = pos * theta;
            cos.set(&[i, j], T::cst(angle.cos()));
            sin.set(&[i, j], T::cst(angle.sin()));
        }
    }
    RopeTables { cos, sin }
}

/// Identity tables (angle zero everywhere), used when rotation is disabled.
pub fn identity_tables<T: Scalar>(len: usize, d_h: usize) -> RopeTables<T> {
    assert!(d_h % 2 == 0);
    RopeTables { cos: Tensor::full(&[len, d_h / 2], T::one()), sin: Tensor::zeros(&[len, d_h / 2]) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_has_zero_angle() {
        let t = rope_tables::<f64>(0, 4, 8, 10_000.0);
        for j in 0..4 {
            assert_eq!(t.cos.at(&[0, j]), 1.0);
            assert_eq!(t.sin.at(&[0, j]), 0.0);
        }
    }

    #[test]
    fn offset_tables_continue_the_sequence() {
        let full = rope_tables::<f64>(0, 6, 4, 10_000.0);
        let tail = rope_tables::<f64>(4, 2, 4, 10_000.0);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(full.cos.at(&[4 + i, j]), tail.cos.at(&[i, j]));
                assert_eq!(full.sin.at(&[4 + i, j]), tail.sin.at(&[i, j]));
            }
        }
    }

    #[test]
    fn frequencies_decay_geometrically() {
        let t = rope_tables::<f64>(1, 1, 8, 10_000.0);
        // At position 1 the angle equals the frequency itself.
        let angles: Vec<f64> = (0..4).map(|j| t.sin.at(&[0, j]).asin()).collect();
        assert!((angles[0] - 1.0).abs() < 1e-12);
        for w in angles.windows(2) {
            assert!(w[1] < w[0]);
        }
    }
}
