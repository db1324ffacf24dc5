//! Rotary query/key encoding driven by Unix timestamps.
//!
//! Each per-head vector is split into `d/2` two-dimensional components and
//! component `i` is rotated by an angle `t * theta_i`, where `t` is the
//! token's timestamp in milliseconds. Frequencies span the lookback window:
//! the slowest component accumulates exactly `phi_min` radians over
//! `delta_t_max_ms`, and `base` controls how quickly frequencies rise for
//! short-horizon structure. Attention scores then depend only on timestamp
//! differences, never on sequence position.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct RopeConfig {
    /// Lookback window: the largest timestamp difference the encoding must
    /// resolve, in milliseconds.
    pub delta_t_max_ms: i64,
    /// Rotation (radians) of the slowest component across the full window.
    pub phi_min: f64,
    /// Frequency growth factor across components.
    pub base: f64,
    /// Per-head vector width; must be even.
    pub head_dim: usize,
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope head_dim must be a positive even integer, got {}",
                self.head_dim
            )));
        }
        if self.phi_min <= 0.0 {
            return Err(Error::Config("rope phi_min must be > 0".into()));
        }
        if self.base <= 1.0 {
            return Err(Error::Config(
                "rope base must be > 1 (all frequencies would coincide)".into(),
            ));
        }
        if self.delta_t_max_ms <= 0 {
            return Err(Error::Config("rope delta_t_max_ms must be > 0".into()));
        }
        Ok(())
    }

    /// Production-scale constants: one-year lookback, phi_min 1e-4, base 6e5.
    pub fn default_for_head_dim(head_dim: usize) -> Self {
        RopeConfig {
            delta_t_max_ms: 365 * 86_400_000,
            phi_min: 1e-4,
            base: 600_000.0,
            head_dim,
        }
    }
}

/// Rotation frequencies in rad/ms, one per two-dimensional component,
/// strictly increasing: `theta_i = (phi_min / delta_t_max) * base^(2i/d)`.
pub fn frequencies(config: &RopeConfig) -> Vec<f64> {
    let d = config.head_dim as f64;
    let theta0 = config.phi_min / config.delta_t_max_ms as f64;
    (0..config.head_dim / 2)
        .map(|i| theta0 * config.base.powf(2.0 * i as f64 / d))
        .collect()
}

/// Rotate a per-head vector in place by the angles for timestamp `t`.
/// Angles and the rotation itself are computed in f64 before casting back;
/// `t * theta` spans many orders of magnitude and must not be truncated.
pub fn rotate_in_place<T: Scalar>(vec: &mut [T], timestamp_ms: i64, freqs: &[f64]) {
    debug_assert_eq!(vec.len(), freqs.len() * 2);
    let t = timestamp_ms as f64;
    for (i, &theta) in freqs.iter().enumerate() {
        let angle = t * theta;
        let (sin, cos) = angle.sin_cos();
        let x = vec[2 * i].as_f64();
        let y = vec[2 * i + 1].as_f64();
        vec[2 * i] = T::from_f64(x * cos - y * sin);
        vec[2 * i + 1] = T::from_f64(x * sin + y * cos);
    }
}

/// The inverse rotation; used by backward passes (rotations are orthogonal,
/// so the transpose is the rotation by `-t`).
pub fn rotate_inverse_in_place<T: Scalar>(vec: &mut [T], timestamp_ms: i64, freqs: &[f64]) {
    debug_assert_eq!(vec.len(), freqs.len() * 2);
    let t = timestamp_ms as f64;
    for (i, &theta) in freqs.iter().enumerate() {
        let angle = t * theta;
        let (sin, cos) = angle.sin_cos();
        let x = vec[2 * i].as_f64();
        let y = vec[2 * i + 1].as_f64();
        vec[2 * i] = T::from_f64(x * cos + y * sin);
        vec[2 * i + 1] = T::from_f64(-x * sin + y * cos);
    }
}

pub fn rotate<T: Scalar>(vec: &[T], timestamp_ms: i64, config: &RopeConfig) -> Vec<T> {
    let freqs = frequencies(config);
    let mut out = vec.to_vec();
    rotate_in_place(&mut out, timestamp_ms, &freqs);
    out
}

/// Dot product of the rotated query and key; depends only on `t_q - t_k`.
pub fn rotated_dot<T: Scalar>(
    q: &[T],
    t_q: i64,
    k: &[T],
    t_k: i64,
    config: &RopeConfig,
) -> f64 {
    let rq = rotate(q, t_q, config);
    let rk = rotate(k, t_k, config);
    rq.iter()
        .zip(rk.iter())
        .map(|(a, b)| a.as_f64() * b.as_f64())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const YEAR_MS: i64 = 365 * 86_400_000;

    fn cfg(head_dim: usize) -> RopeConfig {
        RopeConfig {
            delta_t_max_ms: YEAR_MS,
            phi_min: 1e-4,
            base: 600_000.0,
            head_dim,
        }
    }

    #[test]
    fn theta0_matches_production_constants() {
        let f = frequencies(&cfg(88));
        // 1e-4 / 31_536_000_000 ms
        assert!((f[0] - 3.17098e-15).abs() < 1e-19, "theta0 = {:e}", f[0]);
    }

    #[test]
    fn slowest_component_spans_phi_min_exactly() {
        let c = cfg(16);
        let f = frequencies(&c);
        let accumulated = f[0] * c.delta_t_max_ms as f64;
        assert_eq!(accumulated, c.phi_min);
    }

    #[test]
    fn frequencies_strictly_increasing() {
        let f = frequencies(&cfg(32));
        for w in f.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn base_one_rejected() {
        let mut c = cfg(8);
        c.base = 1.0;
        assert!(c.validate().is_err());
        c.base = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn odd_head_dim_rejected() {
        let mut c = cfg(8);
        c.head_dim = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_timestamp_is_identity() {
        let c = cfg(8);
        let v: Vec<f64> = vec![0.3, -1.2, 0.0, 2.5, -0.7, 0.1, 1.0, -1.0];
        assert_eq!(rotate(&v, 0, &c), v);
    }

    #[test]
    fn rotation_preserves_norm() {
        let c = cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t: i64 = rng.random_range(0..YEAR_MS);
            let r = rotate(&v, t, &c);
            let n0: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-9);
        }
    }

    #[test]
    fn quarter_turn_on_unit_vector() {
        // d = 2, theta_0 = pi/2 per unit t, v = (1, 0), t = 1 -> (0, 1)
        let c = RopeConfig {
            delta_t_max_ms: 1,
            phi_min: std::f64::consts::FRAC_PI_2,
            base: 2.0,
            head_dim: 2,
        };
        let r = rotate(&[1.0f64, 0.0], 1, &c);
        assert!(r[0].abs() < 1e-12);
        assert!((r[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_dot_equals_plain_dot_at_equal_times() {
        let c = cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = 123_456_789;
        let plain: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        assert!((rotated_dot(&q, t, &k, t, &c) - plain).abs() < 1e-9);
    }

    #[test]
    fn rotated_dot_shift_invariant() {
        let c = cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t_q: i64 = rng.random_range(0..YEAR_MS / 2);
            let t_k: i64 = rng.random_range(0..YEAR_MS / 2);
            let a = rotated_dot(&q, t_q, &k, t_k, &c);
            let b = rotated_dot(&q, t_q + 1_000_000_000, &k, t_k + 1_000_000_000, &c);
            assert!((a - b).abs() < 1e-9, "shift changed dot: {a} vs {b}");
        }
    }

    #[test]
    fn rotated_dot_matches_compose_oracle() {
        let c = cfg(6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t_q: i64 = rng.random_range(0..YEAR_MS);
            let t_k: i64 = rng.random_range(0..YEAR_MS);
            let rq = rotate(&q, t_q, &c);
            let rk = rotate(&k, t_k, &c);
            let oracle: f64 = rq.iter().zip(&rk).map(|(a, b)| a * b).sum();
            assert!((rotated_dot(&q, t_q, &k, t_k, &c) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_rotation_round_trips() {
        let c = cfg(8);
        let f = frequencies(&c);
        let v: Vec<f64> = vec![0.5, -0.25, 1.5, 2.0, -1.0, 0.75, 0.1, -0.9];
        let mut r = v.clone();
        rotate_in_place(&mut r, 987_654_321, &f);
        rotate_inverse_in_place(&mut r, 987_654_321, &f);
        for (a, b) in v.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
