//! Exact SO(3) kernels in the real irreducible basis.
//!
//! Conventions, fixed once for the whole crate:
//!
//! - Real spherical harmonics are orthonormal on the unit sphere and carry no
//!   Condon–Shortley sign: `Y_{1,(-1,0,1)} = sqrt(3/4π) (y, z, x)`.
//! - Components of order `l` are indexed by `m` in `-l..=l`, stored at
//!   position `m + l`.
//! - Complex intermediates (Wigner-d, Clebsch–Gordan) use the Condon–Shortley
//!   phase and are mapped to the real basis with [`complex_to_real`].
//! - [`wigner_d`] satisfies `Y_l(g r) = D^l(g) Y_l(r)`.

mod clebsch;
mod complex;
mod harmonics;
mod rotation;
mod wigner;

pub use clebsch::{clebsch_gordan, complex_clebsch_gordan, triangle, CgCache, CgTensor};
pub use complex::complex_to_real;
pub use harmonics::{real_sh_polynomials, real_spherical_harmonics, sh_index, sh_width};
pub use rotation::{random_rotation, random_rotation_with, Rotation};
pub use wigner::{complex_wigner_d, wigner_d, wigner_small_d, WignerBlock};

/// Largest order supported by the factorial-sum kernels.
pub const MAX_L: usize = 8;

pub(crate) fn factorial(n: i64) -> f64 {
    debug_assert!(n >= 0);
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}
