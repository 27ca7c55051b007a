//! The five 4x4 gamma matrices spanning the chiral model.
//!
//! Basis ordering is |στ⟩ with the electron qubit σ first: |00⟩, |01⟩,
//! |10⟩, |11⟩. The matrices are
//!
//! γ0 = σz⊗τz, γ1 = σx⊗1, γ2 = σy⊗1, γ3 = σz⊗τx, γ4 = σz⊗τy,
//!
//! pairwise anticommuting, Hermitian and squaring to the identity.

use std::sync::OnceLock;

use crate::{C64, CMat4};
use nalgebra::Matrix2;

type CMat2 = Matrix2<C64>;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn pauli_x() -> CMat2 {
    CMat2::new(c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.))
}

pub fn pauli_y() -> CMat2 {
    CMat2::new(c(0., 0.), c(0., -1.), c(0., 1.), c(0., 0.))
}

pub fn pauli_z() -> CMat2 {
    CMat2::new(c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.))
}

pub fn pauli_id() -> CMat2 {
    CMat2::identity()
}

/// Kronecker product with the electron factor on the left.
pub fn kron(a: &CMat2, b: &CMat2) -> CMat4 {
    let mut out = CMat4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    out[(2 * i + k, 2 * j + l)] = a[(i, j)] * b[(k, l)];
                }
            }
        }
    }
    out
}

fn build_all() -> [CMat4; 5] {
    [
        kron(&pauli_z(), &pauli_z()),
        kron(&pauli_x(), &pauli_id()),
        kron(&pauli_y(), &pauli_id()),
        kron(&pauli_z(), &pauli_x()),
        kron(&pauli_z(), &pauli_y()),
    ]
}

/// All five gamma matrices, built once.
pub fn gammas() -> &'static [CMat4; 5] {
    static GAMMAS: OnceLock<[CMat4; 5]> = OnceLock::new();
    GAMMAS.get_or_init(build_all)
}

/// A single gamma matrix, index 0..=4.
pub fn gamma(i: usize) -> &'static CMat4 {
    &gammas()[i]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frob(m: &CMat4) -> f64 {
        m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    #[test]
    fn gammas_are_hermitian() {
        for g in gammas() {
            assert!(frob(&(g - g.adjoint())) < 1e-15);
        }
    }

    #[test]
    fn gammas_square_to_identity() {
        for g in gammas() {
            assert!(frob(&(g * g - CMat4::identity())) < 1e-15);
        }
    }

    #[test]
    fn gammas_pairwise_anticommute() {
        for i in 0..5 {
            for j in 0..5 {
                if i == j {
                    continue;
                }
                let a = gamma(i) * gamma(j) + gamma(j) * gamma(i);
                assert!(frob(&a) < 1e-15, "γ{i} and γ{j} fail to anticommute");
            }
        }
    }

    #[test]
    fn gammas_are_traceless() {
        for g in gammas() {
            assert!(g.trace().norm() < 1e-15);
        }
    }

    #[test]
    fn gamma0_is_diagonal_signature() {
        let g0 = gamma(0);
        let diag: Vec<f64> = (0..4).map(|i| g0[(i, i)].re).collect();
        assert_eq!(diag, vec![1.0, -1.0, -1.0, 1.0]);
    }
}
