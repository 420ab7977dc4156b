//! Reactive nodal-current features.
//!
//! A fault that moves the bus voltages from u⁰ to u′ injects the nodal
//! current ψ = Y⁰ (u′ − u⁰). Classifiers consume its imaginary part ψ_q,
//! which in real components expands to
//!
//! ```text
//! ψ_q = Y_p⁰ Δu_q + Y_q⁰ Δu_p ,
//! ```
//!
//! with Y_p/Y_q the conductance/susceptance parts of Y⁰ and Δu_p/Δu_q the
//! real/imaginary parts of the voltage change. The expansion is the
//! production path; the complex product Im(Y⁰Δu) serves as a cross-check
//! oracle (both are exposed, and tests pin their agreement to 1e−12).
//!
//! Voltage deviations enter the map in percent of nominal rather than
//! per-unit (see [`VOLTAGE_PERCENT`]): a fault that moves a bus by a few
//! percent then produces features of order ten, so a fixed-value trigger
//! in the tens sits a few standard deviations out instead of being an
//! absurd outlier that any sweep would saturate on immediately.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{AdmittanceMatrix, BusState};

/// Unit convention of the feature map: voltage deviations are expressed
/// in percent of nominal, so ψ = Y⁰ · (100 Δu). Both feature forms and
/// the pull-back used by measurement-level attacks share this constant.
pub const VOLTAGE_PERCENT: f64 = 100.0;

/// Nodal-current feature of one sample, in percent-voltage units.
/// `psi_q` is the classifier input; `psi_p` is kept for diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub psi_q: Vec<f64>,
    pub psi_p: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.psi_q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.psi_q.iter().chain(&self.psi_p).all(|x| x.is_finite())
    }
}

/// Features from a pre/post-fault state pair: Δu = u′ − u⁰, ψ = Y⁰Δu.
pub fn extract_features(
    y0: &AdmittanceMatrix,
    u0: &BusState,
    u_post: &BusState,
) -> Result<FeatureVector> {
    let d = y0.dim();
    if u0.len() != d || u_post.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: u0.len().max(u_post.len()),
            context: "extract_features states",
        });
    }
    let delta = u_post.voltages() - u0.voltages();
    features_from_delta(y0, &delta)
}

/// Features directly from a voltage increment, via the real expansion
/// ψ_q = Y_p Δu_q + Y_q Δu_p (and ψ_p = Y_p Δu_p − Y_q Δu_q).
pub fn features_from_delta(
    y0: &AdmittanceMatrix,
    delta_u: &DVector<Complex64>,
) -> Result<FeatureVector> {
    let d = y0.dim();
    if delta_u.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: delta_u.len(),
            context: "features_from_delta increment",
        });
    }
    let du_p = DVector::from_iterator(d, delta_u.iter().map(|c| VOLTAGE_PERCENT * c.re));
    let du_q = DVector::from_iterator(d, delta_u.iter().map(|c| VOLTAGE_PERCENT * c.im));
    let yp = y0.conductance();
    let yq = y0.susceptance();
    let psi_q = &yp * &du_q + &yq * &du_p;
    let psi_p = &yp * &du_p - &yq * &du_q;
    Ok(FeatureVector {
        psi_q: psi_q.iter().copied().collect(),
        psi_p: psi_p.iter().copied().collect(),
    })
}

/// Cross-check oracle: the same feature through the complex product
/// ψ = Y⁰Δu, returned as (ψ_p, ψ_q).
pub fn features_product_form(
    y0: &AdmittanceMatrix,
    delta_u: &DVector<Complex64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = y0.dim();
    if delta_u.len() != d {
        return Err(Error::Dimension {
            expected: d,
            actual: delta_u.len(),
            context: "features_product_form increment",
        });
    }
    let psi = y0.matrix() * delta_u.map(|c| VOLTAGE_PERCENT * c);
    Ok((
        psi.iter().map(|c| c.re).collect(),
        psi.iter().map(|c| c.im).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridModel;
    use nalgebra::DMatrix;

    fn random_delta(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> DVector<Complex64> {
        use rand::Rng;
        DVector::from_iterator(
            d,
            (0..d).map(|_| Complex64::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1))),
        )
    }

    #[test]
    fn identical_states_give_zero_features() {
        let grid = GridModel::fixture_14bus();
        let mut rng = crate::testutil::rng(1);
        let state = crate::testutil::random_state(grid.bus_count(), &mut rng);
        let f = extract_features(&grid.admittance(), &state, &state).unwrap();
        assert!(f.psi_q.iter().all(|&x| x == 0.0));
        assert!(f.psi_p.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn real_admittance_and_real_delta_give_zero_psi_q() {
        // With Y_q = 0 and Δu_q = 0 both expansion terms vanish.
        let m = DMatrix::from_row_slice(
            2,
            2,
            &[
                Complex64::new(2.0, 0.0),
                Complex64::new(-2.0, 0.0),
                Complex64::new(-2.0, 0.0),
                Complex64::new(2.0, 0.0),
            ],
        );
        let y = AdmittanceMatrix::from_matrix(m).unwrap();
        let delta = DVector::from_vec(vec![Complex64::new(0.03, 0.0), Complex64::new(-0.07, 0.0)]);
        let f = features_from_delta(&y, &delta).unwrap();
        assert!(f.psi_q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn expansion_matches_complex_product_within_1e12() {
        let grid = GridModel::fixture_14bus();
        let y = grid.admittance();
        let mut rng = crate::testutil::rng(2);
        for _ in 0..100 {
            let delta = random_delta(grid.bus_count(), &mut rng);
            let f = features_from_delta(&y, &delta).unwrap();
            let (psi_p, psi_q) = features_product_form(&y, &delta).unwrap();
            for i in 0..grid.bus_count() {
                assert!((f.psi_q[i] - psi_q[i]).abs() < 1e-12);
                assert!((f.psi_p[i] - psi_p[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_map_is_linear_in_delta() {
        let grid = GridModel::fixture_14bus();
        let y = grid.admittance();
        let mut rng = crate::testutil::rng(3);
        for _ in 0..20 {
            let a = random_delta(grid.bus_count(), &mut rng);
            let b = random_delta(grid.bus_count(), &mut rng);
            let fa = features_from_delta(&y, &a).unwrap();
            let fb = features_from_delta(&y, &b).unwrap();
            let fsum = features_from_delta(&y, &(&a + &b)).unwrap();
            let fscaled = features_from_delta(&y, &(&a * Complex64::new(2.5, 0.0))).unwrap();
            for i in 0..grid.bus_count() {
                assert!((fsum.psi_q[i] - (fa.psi_q[i] + fb.psi_q[i])).abs() < 1e-12);
                assert!((fscaled.psi_q[i] - 2.5 * fa.psi_q[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let grid = GridModel::fixture_14bus();
        let y = grid.admittance();
        let small = DVector::from_element(3, Complex64::default());
        assert!(matches!(
            features_from_delta(&y, &small).unwrap_err(),
            Error::Dimension { .. }
        ));
    }
}
