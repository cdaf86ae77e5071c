//! Fine-scale reference solutions and error measures.

use crate::error::{Error, Result};
use crate::fem::FineSystem;
use crate::wave::{run, RunOptions, ThetaScheme, WaveProblem, WaveTrajectory};

/// Reference norms below this are treated as zero.
pub const REFERENCE_FLOOR: f64 = 1e-14;

/// θ-scheme on the fine matrices; `problem` holds fine interior-dof data
/// with loads `M_h g`.
pub fn reference_solve(fine: &FineSystem, problem: &WaveProblem, scheme: ThetaScheme) -> Result<WaveTrajectory> {
    run(fine, scheme, problem, RunOptions::default())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorNorms {
    pub energy_abs: f64,
    pub l2_abs: f64,
    /// Relative errors, or the absolute ones if `relative` is false.
    pub energy: f64,
    pub l2: f64,
    pub relative: bool,
}

/// Energy and L² norms of `approx − reference`, both fine interior-dof
/// vectors, relative to the reference.
pub fn error_norms(fine: &FineSystem, approx: &[f64], reference: &[f64]) -> ErrorNorms {
    let e: Vec<f64> = approx.iter().zip(reference).map(|(a, b)| a - b).collect();
    let energy_abs = fine.energy_norm(&e);
    let l2_abs = fine.l2_norm(&e);
    let (re, rl) = (fine.energy_norm(reference), fine.l2_norm(reference));
    let relative = re >= REFERENCE_FLOOR && rl >= REFERENCE_FLOOR;
    ErrorNorms {
        energy_abs,
        l2_abs,
        energy: if relative { energy_abs / re } else { energy_abs },
        l2: if relative { l2_abs / rl } else { l2_abs },
        relative,
    }
}

/// Experimental orders `log(e_i / e_{i+1}) / log(s_i / s_{i+1})`.
pub fn eoc(errors: &[f64], steps: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(errors.len(), steps.len());
    if let Some(&bad) = errors.iter().find(|&&e| !(e > 0.0)) {
        return Err(Error::NonPositiveError(bad));
    }
    Ok(errors
        .windows(2)
        .zip(steps.windows(2))
        .map(|(e, s)| (e[0] / e[1]).ln() / (s[0] / s[1]).ln())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficient::CoefficientField;
    use crate::fem::{assemble, assemble_stiffness};
    use crate::mesh::MeshHierarchy;

    #[test]
    fn eoc_arithmetic() {
        let e = eoc(&[1.0, 0.25], &[1.0, 0.5]).unwrap();
        assert!((e[0] - 2.0).abs() < 1e-14);
        let e = eoc(&[1.0, 1.0 / 16.0], &[1.0, 0.5]).unwrap();
        assert!((e[0] - 4.0).abs() < 1e-14);
        assert_eq!(eoc(&[0.3, 0.3, 0.3], &[1.0, 0.5, 0.25]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(eoc(&[1.0, 0.0], &[1.0, 0.5]), Err(Error::NonPositiveError(_))));
    }

    #[test]
    fn identical_states_have_zero_error() {
        let mesh = MeshHierarchy::new(1, 2, 3).unwrap();
        let a = CoefficientField::checkerboard(&mesh, 1, 1.0, 5.0).unwrap();
        let fine = assemble(&mesh, &a);
        let v: Vec<f64> = (0..fine.n_dofs()).map(|i| (i as f64).sin()).collect();
        let e = error_norms(&fine, &v, &v);
        assert_eq!((e.energy, e.l2), (0.0, 0.0));
        assert!(e.relative);
        let z = vec![0.0; fine.n_dofs()];
        let e = error_norms(&fine, &v, &z);
        assert!(!e.relative);
        assert!((e.energy - fine.energy_norm(&v)).abs() < 1e-15);
    }

    #[test]
    fn energy_norm_is_bracketed_by_coefficient_bounds() {
        let mesh = MeshHierarchy::new(1, 3, 4).unwrap();
        let a = CoefficientField::checkerboard(&mesh, 9, 1.0, 10.0).unwrap();
        let fine = assemble(&mesh, &a);
        let lap = assemble_stiffness(&mesh, &vec![1.0; mesh.n_fine_cells()]);
        for k in 0..20 {
            let v: Vec<f64> = (0..fine.n_dofs()).map(|i| ((i * 31 + k * 17) as f64).cos()).collect();
            let ratio = fine.stiffness.quad_form(&v) / lap.quad_form(&v);
            assert!(ratio >= a.alpha() - 1e-12 && ratio <= a.beta() + 1e-12);
        }
    }
}
