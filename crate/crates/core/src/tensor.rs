//! Plane-strain constitutive tensor and Voigt conventions.
//!
//! Voigt ordering is (11, 22, 12) with the engineering shear convention:
//! strain vectors are `(e11, e22, 2*e12)` and stress vectors `(s11, s22, s12)`,
//! so that `sigma = D * eps` and `0.5 * eps . D . eps` is the strain energy
//! density.

use nalgebra::{Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Plane-strain elasticity tensor in Voigt form (GPa).
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticTensor<S: Scalar = f64> {
    pub voigt: Matrix3<S>,
}

impl<S: Scalar> ElasticTensor<S> {
    /// Isotropic plane-strain Hooke law from Young's modulus (GPa) and
    /// Poisson ratio.
    pub fn plane_strain(young: S, nu: S) -> Result<Self> {
        let zero = S::zero();
        let one = S::one();
        let half = S::from_f64_lossy(0.5);
        if young <= zero {
            return Err(Error::Material(format!(
                "Young modulus must be positive, got {young:?}"
            )));
        }
        if nu >= half {
            return Err(Error::Material(format!(
                "Poisson ratio {nu:?} >= 0.5: incompressible limit not supported"
            )));
        }
        if nu <= -one {
            return Err(Error::Material(format!("Poisson ratio {nu:?} <= -1")));
        }
        let two = S::from_f64_lossy(2.0);
        let c = young / ((one + nu) * (one - two * nu));
        let d11 = c * (one - nu);
        let d12 = c * nu;
        let mu = young / (two * (one + nu));
        let mut voigt = Matrix3::zeros();
        voigt[(0, 0)] = d11;
        voigt[(1, 1)] = d11;
        voigt[(0, 1)] = d12;
        voigt[(1, 0)] = d12;
        voigt[(2, 2)] = mu;
        Ok(Self { voigt })
    }

    /// Stress response to an engineering strain vector.
    pub fn stress(&self, eps: &Vector3<S>) -> Vector3<S> {
        self.voigt * eps
    }
}

/// Free-function alias: plane-strain tensor from (E, nu).
pub fn plane_strain_tensor<S: Scalar>(young: S, nu: S) -> Result<ElasticTensor<S>> {
    ElasticTensor::plane_strain(young, nu)
}

/// Engineering Voigt vector of a symmetric 2x2 strain tensor.
pub fn strain_to_voigt(e: &Matrix2<f64>) -> Vector3<f64> {
    Vector3::new(e[(0, 0)], e[(1, 1)], e[(0, 1)] + e[(1, 0)])
}

/// Symmetric 2x2 tensor from a stress Voigt vector.
pub fn voigt_to_stress(s: &Vector3<f64>) -> Matrix2<f64> {
    Matrix2::new(s[0], s[2], s[2], s[1])
}

/// The three unit macro-strain modes behind the Voigt columns.
/// The shear mode carries tensor components 1/2 so that a strain
/// `E = e11*M11 + e22*M22 + gamma*M12` reproduces the engineering vector
/// `(e11, e22, gamma)`.
pub fn unit_strain_modes() -> [Matrix2<f64>; 3] {
    [
        Matrix2::new(1.0, 0.0, 0.0, 0.0),
        Matrix2::new(0.0, 0.0, 0.0, 1.0),
        Matrix2::new(0.0, 0.5, 0.5, 0.0),
    ]
}
