//! Shared helpers for unit, property, and integration tests. Not part of
//! the public API surface.

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::BusState;

/// Deterministic small-state RNG for tests.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A plausible operating state: voltages near 1 per-unit with the kind of
/// magnitude and angle scatter seen in normal grid operation.
pub fn random_state(d: usize, rng: &mut ChaCha8Rng) -> BusState {
    let u = DVector::from_iterator(
        d,
        (0..d).map(|_| {
            let v = 1.0 + rng.random_range(-0.06..0.06);
            let t = rng.random_range(-0.15..0.15);
            Complex64::from_polar(v, t)
        }),
    );
    BusState::from_rectangular(u)
}

/// A mild complex load profile (consumption negative) with a zero slack
/// entry, suitable for Newton iteration on the bundled fixture.
pub fn random_loads(d: usize, slack: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
    (0..d)
        .map(|i| {
            if i == slack {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::new(
                    -rng.random_range(0.05..0.30),
                    -rng.random_range(0.02..0.12),
                )
            }
        })
        .collect()
}
