//! Browser bindings: coefficient field, single basis functions and short
//! wave runs on a small mesh.

use plod::coarse::MomentMap;
use plod::coefficient::CoefficientField;
use plod::fem::{assemble, embed, interpolate, FineSystem};
use plod::mesh::MeshHierarchy;
use plod::multiscale::{build_basis, CorrectorContext, GalerkinSpace};
use plod::wave::{cfl_check, run, RunOptions, SourceTerm, Store, ThetaScheme, TimeProfile, WaveProblem, InitialStep};
use wasm_bindgen::prelude::*;

fn js(e: plod::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    mesh: MeshHierarchy,
    coefficient: CoefficientField,
    fine: FineSystem,
}

#[wasm_bindgen]
impl Demo {
    /// Random checkerboard with values in `[lo, hi]` on `2^eps_exp` cells
    /// per direction, discretized with `2^fine_exp` fine cells.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, eps_exp: u32, fine_exp: u32, lo: f64, hi: f64) -> Result<Demo, JsError> {
        let mesh = MeshHierarchy::new(0, eps_exp, fine_exp).map_err(js)?;
        let coefficient = CoefficientField::checkerboard(&mesh, seed as u64, lo, hi).map_err(js)?;
        let fine = assemble(&mesh, &coefficient);
        Ok(Demo { mesh, coefficient, fine })
    }

    /// Fine cells per direction.
    pub fn cells(&self) -> usize {
        self.mesh.fine_cells_per_dim()
    }

    /// Coefficient per fine cell, row by row from `y = 0`.
    pub fn coefficient(&self) -> Vec<f64> {
        self.coefficient.values().to_vec()
    }

    /// Nodal values (all `(cells + 1)²` vertices) of basis function
    /// `(element, mode)` for patch radius `ell`.
    pub fn basis_function(&self, coarse_exp: u32, degree: usize, ell: usize, element: usize, mode: usize) -> Result<Vec<f64>, JsError> {
        let mesh = self.coarse_mesh(coarse_exp)?;
        let moments = MomentMap::new(&mesh, degree);
        if element >= mesh.n_elements() || mode >= moments.modes() {
            return Err(JsError::new("element or mode out of range"));
        }
        let ctx = CorrectorContext::new(&self.coefficient, &self.fine, &moments).map_err(js)?;
        let columns = ctx.columns(&[element], ell).map_err(js)?;
        Ok(embed(&mesh, &columns[mode].to_dense(&mesh)))
    }

    /// Runs the multiscale θ-scheme from `u0 = sin(πx) sin(πy)`, `v0 = 0`
    /// with source `sin(πx) sin(πy) sin(t + 1)`.
    pub fn simulate(&self, coarse_exp: u32, degree: usize, ell: usize, theta: f64, tau: f64, steps: usize) -> Result<Simulation, JsError> {
        let mesh = self.coarse_mesh(coarse_exp)?;
        let moments = MomentMap::new(&mesh, degree);
        let basis = build_basis(&self.coefficient, &self.fine, &moments, ell).map_err(js)?;
        let space = GalerkinSpace::from_multiscale(basis, &self.fine, &moments);
        let shape = interpolate(&self.mesh, |x, y| (std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin());
        let problem = WaveProblem {
            u0: space.coefficients_of(&self.fine, &shape).map_err(js)?,
            v0: vec![0.0; space.dim()],
            source: vec![SourceTerm {
                load: space.load(&self.fine, &shape),
                profile: TimeProfile::SinShifted,
            }],
        };
        let scheme = ThetaScheme::new(theta, tau, steps, InitialStep::FourthOrder).map_err(js)?;
        let cfl = cfl_check(&space, &scheme).map_err(js)?;
        let options = RunOptions {
            store: Store::Final,
            record_energy: true,
        };
        let (energies, snapshot, status) = match run(&space, scheme, &problem, options) {
            Ok(t) => (t.energies.clone(), embed(&self.mesh, &space.lift(t.final_state())), "ok".to_string()),
            Err(e) => (Vec::new(), vec![0.0; self.mesh.n_fine_vertices()], e.to_string()),
        };
        Ok(Simulation {
            energies,
            snapshot,
            tau_bound: cfl.tau_bound.unwrap_or(f64::INFINITY),
            status,
        })
    }

    fn coarse_mesh(&self, coarse_exp: u32) -> Result<MeshHierarchy, JsError> {
        MeshHierarchy::new(coarse_exp, self.mesh.eps_exp(), self.mesh.fine_exp()).map_err(js)
    }
}

#[wasm_bindgen]
pub struct Simulation {
    energies: Vec<f64>,
    snapshot: Vec<f64>,
    tau_bound: f64,
    status: String,
}

#[wasm_bindgen]
impl Simulation {
    /// Discrete energy after every step.
    pub fn energies(&self) -> Vec<f64> {
        self.energies.clone()
    }

    /// Final state at all fine vertices.
    pub fn snapshot(&self) -> Vec<f64> {
        self.snapshot.clone()
    }

    /// Largest stable step, infinite for θ ≥ 1/4.
    pub fn tau_bound(&self) -> f64 {
        self.tau_bound
    }

    /// `ok` or the reason the run stopped.
    pub fn status(&self) -> String {
        self.status.clone()
    }
}
