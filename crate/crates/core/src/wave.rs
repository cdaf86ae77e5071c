//! θ-weighted two-step time stepping for `M ü + S u = f`.
//!
//! The same code drives the coarse multiscale system (dense matrices) and
//! the fine reference system (sparse matrices) through [`WaveSpace`].

use std::path::Path;
use crate::Stopwatch;

use faer::Mat;
use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::fem::FineSystem;
use crate::linalg::{dense_mul_vec, dot, DenseCholesky, SparseCholesky};
use crate::multiscale::GalerkinSpace;

/// Divergence guard factor on the positive part of the energy.
pub const DIVERGENCE_FACTOR: f64 = 1e6;
/// Safety margin of the spectral CFL bound.
pub const CFL_SAFETY: f64 = 0.05;
const POWER_TOLERANCE: f64 = 1e-6;
const POWER_MAX_ITER: usize = 200_000;

pub trait LinearSolve {
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>>;
}

/// Mass and stiffness of a Galerkin space.
pub trait WaveSpace: Sync {
    type Factor: LinearSolve;
    fn dim(&self) -> usize;
    fn mul_stiffness(&self, x: &[f64]) -> Vec<f64>;
    fn mul_mass(&self, x: &[f64]) -> Vec<f64>;
    /// Factors `M + w S`.
    fn factor(&self, w: f64) -> Result<Self::Factor>;
}

pub struct DenseFactor {
    chol: DenseCholesky,
}

impl DenseFactor {
    /// Factors `mass + w·stiffness`.
    pub fn new(mass: &Mat<f64>, stiffness: &Mat<f64>, w: f64) -> Result<Self> {
        let mut matrix = stiffness.clone();
        for j in 0..matrix.ncols() {
            for i in j..matrix.nrows() {
                matrix[(i, j)] = mass[(i, j)] + w * matrix[(i, j)];
            }
        }
        Ok(Self {
            chol: DenseCholesky::new(matrix)?,
        })
    }
}

impl LinearSolve for DenseFactor {
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(self.chol.solve(b))
    }
}

impl WaveSpace for GalerkinSpace {
    type Factor = DenseFactor;

    fn dim(&self) -> usize {
        self.stiffness.nrows()
    }

    fn mul_stiffness(&self, x: &[f64]) -> Vec<f64> {
        dense_mul_vec(&self.stiffness, x)
    }

    fn mul_mass(&self, x: &[f64]) -> Vec<f64> {
        dense_mul_vec(&self.mass, x)
    }

    fn factor(&self, w: f64) -> Result<DenseFactor> {
        DenseFactor::new(&self.mass, &self.stiffness, w)
    }
}

impl LinearSolve for SparseCholesky {
    fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        SparseCholesky::solve(self, b)
    }
}

impl WaveSpace for FineSystem {
    type Factor = SparseCholesky;

    fn dim(&self) -> usize {
        self.n_dofs()
    }

    fn mul_stiffness(&self, x: &[f64]) -> Vec<f64> {
        self.stiffness.mul_vec(x)
    }

    fn mul_mass(&self, x: &[f64]) -> Vec<f64> {
        self.mass.mul_vec(x)
    }

    fn factor(&self, w: f64) -> Result<SparseCholesky> {
        SparseCholesky::new(&self.mass.add_scaled(&self.stiffness, w))
    }
}

/// Scalar time factor of a separable source term.
#[derive(Clone, Copy, Debug)]
pub enum TimeProfile {
    Zero,
    One,
    /// `sin⁴ t`
    Sin4,
    /// `sin(t + 1)`
    SinShifted,
    /// Values only; no derivatives available.
    Sampled(fn(f64) -> f64),
}

impl TimeProfile {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::One => 1.0,
            Self::Sin4 => t.sin().powi(4),
            Self::SinShifted => (t + 1.0).sin(),
            Self::Sampled(f) => f(t),
        }
    }

    pub fn derivative(&self, t: f64) -> Option<f64> {
        match self {
            Self::Zero | Self::One => Some(0.0),
            Self::Sin4 => Some(4.0 * t.sin().powi(3) * t.cos()),
            Self::SinShifted => Some((t + 1.0).cos()),
            Self::Sampled(_) => None,
        }
    }

    pub fn second_derivative(&self, t: f64) -> Option<f64> {
        match self {
            Self::Zero | Self::One => Some(0.0),
            Self::Sin4 => {
                let (s, c) = t.sin_cos();
                Some(12.0 * s * s * c * c - 4.0 * s.powi(4))
            }
            Self::SinShifted => Some(-(t + 1.0).sin()),
            Self::Sampled(_) => None,
        }
    }
}

/// A load vector `(g, ·)` in the space times a time profile.
#[derive(Clone, Debug)]
pub struct SourceTerm {
    pub load: Vec<f64>,
    pub profile: TimeProfile,
}

/// Discrete data in space coordinates: initial state, initial velocity and
/// the source loads.
#[derive(Clone, Debug)]
pub struct WaveProblem {
    pub u0: Vec<f64>,
    pub v0: Vec<f64>,
    pub source: Vec<SourceTerm>,
}

impl WaveProblem {
    pub fn zero(n: usize) -> Self {
        Self {
            u0: vec![0.0; n],
            v0: vec![0.0; n],
            source: Vec::new(),
        }
    }

    fn combine(&self, n: usize, g: impl Fn(&TimeProfile) -> Option<f64>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; n];
        for term in &self.source {
            let s = g(&term.profile).ok_or(Error::MissingSourceDerivatives)?;
            if s != 0.0 {
                out.iter_mut().zip(&term.load).for_each(|(o, l)| *o += s * l);
            }
        }
        Ok(out)
    }

    pub fn load_at(&self, t: f64) -> Vec<f64> {
        self.combine(self.u0.len(), |p| Some(p.value(t))).expect("values always exist")
    }

    /// `f^{n;θ}` from pointwise samples at `t_{n−1}, t_n, t_{n+1}`.
    pub fn theta_load(&self, n: usize, tau: f64, theta: f64) -> Vec<f64> {
        let t = n as f64 * tau;
        theta_combine(&self.load_at(t - tau), &self.load_at(t), &self.load_at(t + tau), theta)
    }
}

/// `θ v_next + (1 − 2θ) v_now + θ v_prev`.
pub fn theta_combine(v_prev: &[f64], v_now: &[f64], v_next: &[f64], theta: f64) -> Vec<f64> {
    assert!(v_prev.len() == v_now.len() && v_now.len() == v_next.len());
    v_prev
        .iter()
        .zip(v_now)
        .zip(v_next)
        .map(|((p, c), n)| theta * n + (1.0 - 2.0 * theta) * c + theta * p)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialStep {
    FourthOrder,
    Reduced,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThetaScheme {
    pub theta: f64,
    pub tau: f64,
    pub n_steps: usize,
    pub initial: InitialStep,
}

impl ThetaScheme {
    pub fn new(theta: f64, tau: f64, n_steps: usize, initial: InitialStep) -> Result<Self> {
        if !(0.0..=0.5).contains(&theta) {
            return Err(Error::InvalidScheme(format!("theta = {theta} outside [0, 1/2]")));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidScheme(format!("tau = {tau} must be positive")));
        }
        if n_steps < 2 {
            return Err(Error::InvalidScheme(format!("{n_steps} steps, need at least 2")));
        }
        Ok(Self {
            theta,
            tau,
            n_steps,
            initial,
        })
    }

    /// Scheme with `n_steps = round(t_end / tau)`.
    pub fn until(theta: f64, tau: f64, t_end: f64, initial: InitialStep) -> Result<Self> {
        Self::new(theta, tau, (t_end / tau).round() as usize, initial)
    }

    pub fn final_time(&self) -> f64 {
        self.n_steps as f64 * self.tau
    }
}

/// A prepared stepper: the factorization of `M + τ² θ S` is computed once.
pub struct Stepper<'a, S: WaveSpace> {
    space: &'a S,
    scheme: ThetaScheme,
    factor: S::Factor,
}

impl<'a, S: WaveSpace> Stepper<'a, S> {
    pub fn new(space: &'a S, scheme: ThetaScheme) -> Result<Self> {
        let factor = space.factor(scheme.tau * scheme.tau * scheme.theta)?;
        Ok(Self { space, scheme, factor })
    }

    pub fn scheme(&self) -> &ThetaScheme {
        &self.scheme
    }

    /// `ũ¹` from `ũ⁰` and the initial data.
    pub fn initial_step(&self, problem: &WaveProblem) -> Result<Vec<f64>> {
        let tau = self.scheme.tau;
        let n = self.space.dim();
        let s_u0 = self.space.mul_stiffness(&problem.u0);
        let m_v0 = self.space.mul_mass(&problem.v0);
        let f0 = problem.load_at(0.0);
        let mut rhs: Vec<f64> = (0..n)
            .map(|i| tau * m_v0[i] - 0.5 * tau * tau * s_u0[i] + 0.5 * tau * tau * f0[i])
            .collect();
        if self.scheme.initial == InitialStep::FourthOrder {
            let s_v0 = self.space.mul_stiffness(&problem.v0);
            let df = problem.combine(n, |p| p.derivative(0.0))?;
            let ddf = problem.combine(n, |p| p.second_derivative(0.0))?;
            let (t3, t4) = (tau.powi(3), tau.powi(4));
            for i in 0..n {
                rhs[i] += -t3 / 12.0 * s_v0[i] + t3 / 6.0 * df[i] + t4 / 24.0 * ddf[i];
            }
        }
        let du = self.factor.solve(&rhs)?;
        Ok(problem.u0.iter().zip(&du).map(|(u, d)| u + d).collect())
    }

    /// `ũ^{n+1}` from `ũ^{n−1}`, `ũ^n` and `f^{n;θ}`.
    pub fn step(&self, u_prev: &[f64], u_now: &[f64], f_theta: &[f64]) -> Result<Vec<f64>> {
        let (tau, theta) = (self.scheme.tau, self.scheme.theta);
        let t2 = tau * tau;
        let a: Vec<f64> = u_now.iter().zip(u_prev).map(|(c, p)| 2.0 * c - p).collect();
        let b: Vec<f64> = u_now
            .iter()
            .zip(u_prev)
            .map(|(c, p)| (1.0 - 2.0 * theta) * c + theta * p)
            .collect();
        let ma = self.space.mul_mass(&a);
        let sb = self.space.mul_stiffness(&b);
        let rhs: Vec<f64> = (0..a.len()).map(|i| t2 * f_theta[i] + ma[i] - t2 * sb[i]).collect();
        self.factor.solve(&rhs)
    }

    pub fn energy(&self, u_now: &[f64], u_next: &[f64]) -> f64 {
        energy_parts(self.space, &self.scheme, u_now, u_next).total()
    }
}

/// Terms of `E^{n+1/2}`.
#[derive(Clone, Copy, Debug)]
pub struct EnergyParts {
    pub kinetic: f64,
    pub potential: f64,
    pub correction: f64,
}

impl EnergyParts {
    pub fn total(&self) -> f64 {
        self.kinetic + self.potential + self.correction
    }

    pub fn positive(&self) -> f64 {
        self.kinetic + self.potential
    }
}

/// `E^{n+1/2} = ½[‖D‖²_M + |ū|²_S + τ²(θ − ¼)|D|²_S]` with the difference
/// quotient `D` and mean `ū` of `u_now`, `u_next`.
pub fn energy_parts<S: WaveSpace>(space: &S, scheme: &ThetaScheme, u_now: &[f64], u_next: &[f64]) -> EnergyParts {
    let tau = scheme.tau;
    let d: Vec<f64> = u_next.iter().zip(u_now).map(|(a, b)| (a - b) / tau).collect();
    let mean: Vec<f64> = u_next.iter().zip(u_now).map(|(a, b)| 0.5 * (a + b)).collect();
    let sd = space.mul_stiffness(&d);
    EnergyParts {
        kinetic: 0.5 * dot(&d, &space.mul_mass(&d)),
        potential: 0.5 * dot(&mean, &space.mul_stiffness(&mean)),
        correction: 0.5 * tau * tau * (scheme.theta - 0.25) * dot(&d, &sd),
    }
}

pub fn energy<S: WaveSpace>(space: &S, scheme: &ThetaScheme, u_now: &[f64], u_next: &[f64]) -> f64 {
    energy_parts(space, scheme, u_now, u_next).total()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CflReport {
    /// Largest eigenvalue of `S x = λ M x`, if it was needed.
    pub lambda_max: Option<f64>,
    /// Largest admissible step, `None` if unconditionally stable.
    pub tau_bound: Option<f64>,
    pub stable: bool,
}

/// Largest eigenvalue of the pencil `(S, M)` by power iteration on `M⁻¹S`.
pub fn lambda_max<S: WaveSpace>(space: &S) -> Result<f64> {
    let n = space.dim();
    let mass = space.factor(0.0)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(0x5eed);
    let mut x: Vec<f64> = (0..n).map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5).collect();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let sx = space.mul_stiffness(&x);
        let mx = space.mul_mass(&x);
        let next_lambda = dot(&x, &sx) / dot(&x, &mx);
        if !next_lambda.is_finite() || next_lambda <= 0.0 {
            return Err(Error::PowerIteration(0));
        }
        if (next_lambda - lambda).abs() <= POWER_TOLERANCE * next_lambda {
            return Ok(next_lambda);
        }
        lambda = next_lambda;
        let y = mass.solve(&sx)?;
        let norm = dot(&y, &space.mul_mass(&y)).sqrt();
        x = y.into_iter().map(|v| v / norm).collect();
    }
    Err(Error::PowerIteration(POWER_MAX_ITER))
}

/// Stability check `τ²(¼ − θ) λ_max ≤ (1 − δ)²`.
pub fn cfl_check<S: WaveSpace>(space: &S, scheme: &ThetaScheme) -> Result<CflReport> {
    if scheme.theta >= 0.25 {
        return Ok(CflReport {
            lambda_max: None,
            tau_bound: None,
            stable: true,
        });
    }
    let lambda = lambda_max(space)?;
    let bound = cfl_bound(lambda, scheme.theta);
    Ok(CflReport {
        lambda_max: Some(lambda),
        tau_bound: Some(bound),
        stable: scheme.tau <= bound,
    })
}

/// Largest stable `τ` for `θ < ¼`.
pub fn cfl_bound(lambda_max: f64, theta: f64) -> f64 {
    (1.0 - CFL_SAFETY) / ((0.25 - theta) * lambda_max).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Store {
    All,
    Final,
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub store: Store,
    pub record_energy: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            store: Store::Final,
            record_energy: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WaveTrajectory {
    pub tau: f64,
    pub theta: f64,
    /// Step indices of `states`.
    pub steps: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    /// `E^{n+1/2}` for `n = 0, …, N−1` when recorded.
    pub energies: Vec<f64>,
    /// `‖u^{n+1}‖_M` next to each recorded energy.
    pub mass_norms: Vec<f64>,
    pub seconds: f64,
}

impl WaveTrajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("at least the final state is stored")
    }

    /// Columns `n, t, energy, state_norm`; one row per half step.
    pub fn write_energy_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["n", "t", "energy", "state_norm"])?;
        for (n, e) in self.energies.iter().enumerate() {
            let norm = self.mass_norms.get(n).map_or(String::new(), |v| format!("{v:e}"));
            w.write_record([
                n.to_string(),
                format!("{:e}", (n as f64 + 0.5) * self.tau),
                format!("{e:e}"),
                norm,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the scheme over `n_steps` steps. Fails with [`Error::Diverged`] when
/// the positive part of the energy exceeds [`DIVERGENCE_FACTOR`] times the
/// initial energy plus the accumulated source work. The guard runs for
/// `θ < ¼` and whenever energies are recorded.
pub fn run<S: WaveSpace>(space: &S, scheme: ThetaScheme, problem: &WaveProblem, options: RunOptions) -> Result<WaveTrajectory> {
    let start = Stopwatch::start();
    let stepper = Stepper::new(space, scheme)?;
    let mut traj = WaveTrajectory {
        tau: scheme.tau,
        theta: scheme.theta,
        steps: Vec::new(),
        states: Vec::new(),
        energies: Vec::new(),
        mass_norms: Vec::new(),
        seconds: 0.0,
    };
    let mut prev = problem.u0.clone();
    let mut now = stepper.initial_step(problem)?;
    if options.store == Store::All {
        traj.steps.extend([0, 1]);
        traj.states.extend([prev.clone(), now.clone()]);
    }
    // the guard is only needed below the unconditional stability range
    let track = options.record_energy || scheme.theta < 0.25;
    let parts = energy_parts(space, &scheme, &prev, &now);
    let base = parts.positive();
    let mut work = 0.0;
    let record = |traj: &mut WaveTrajectory, parts: &EnergyParts, u: &[f64]| {
        if options.record_energy {
            traj.energies.push(parts.total());
            traj.mass_norms.push(dot(u, &space.mul_mass(u)).max(0.0).sqrt());
        }
    };
    record(&mut traj, &parts, &now);
    for n in 1..scheme.n_steps {
        let f = if problem.source.is_empty() {
            vec![0.0; space.dim()]
        } else {
            problem.theta_load(n, scheme.tau, scheme.theta)
        };
        let next = stepper.step(&prev, &now, &f)?;
        if track {
            let diff: Vec<f64> = next.iter().zip(&prev).map(|(a, b)| a - b).collect();
            work += 0.5 * dot(&f, &diff).abs();
            let parts = energy_parts(space, &scheme, &now, &next);
            let budget = base + work;
            if budget > 0.0 && !(parts.positive() <= DIVERGENCE_FACTOR * budget) {
                return Err(Error::Diverged {
                    step: n + 1,
                    ratio: parts.positive() / budget,
                });
            }
            record(&mut traj, &parts, &next);
        }
        prev = now;
        now = next;
        if options.store == Store::All {
            traj.steps.push(n + 1);
            traj.states.push(now.clone());
        }
    }
    if options.store == Store::Final {
        traj.steps.push(scheme.n_steps);
        traj.states.push(now);
    }
    traj.seconds = start.seconds();
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A 2×2 toy space with dense matrices.
    struct Toy {
        s: Mat<f64>,
        m: Mat<f64>,
    }

    impl WaveSpace for Toy {
        type Factor = DenseFactor;
        fn dim(&self) -> usize {
            self.s.nrows()
        }
        fn mul_stiffness(&self, x: &[f64]) -> Vec<f64> {
            dense_mul_vec(&self.s, x)
        }
        fn mul_mass(&self, x: &[f64]) -> Vec<f64> {
            dense_mul_vec(&self.m, x)
        }
        fn factor(&self, w: f64) -> Result<DenseFactor> {
            DenseFactor::new(&self.m, &self.s, w)
        }
    }

    fn toy() -> Toy {
        Toy {
            s: Mat::from_fn(2, 2, |i, j| [[2.0, -1.0], [-1.0, 2.0]][i][j]),
            m: Mat::from_fn(2, 2, |i, j| [[1.0, 0.25], [0.25, 1.0]][i][j]),
        }
    }

    #[test]
    fn theta_combine_weights() {
        let (a, b, c) = ([1.0], [2.0], [4.0]);
        assert_eq!(theta_combine(&a, &b, &c, 0.0), vec![2.0]);
        assert_eq!(theta_combine(&[3.0], &[3.0], &[3.0], 0.25), vec![3.0]);
        assert_eq!(theta_combine(&a, &b, &c, 0.25), vec![(1.0 + 4.0 + 4.0) / 4.0]);
    }

    #[test]
    fn scheme_validation() {
        assert!(ThetaScheme::new(0.6, 0.1, 10, InitialStep::Reduced).is_err());
        assert!(ThetaScheme::new(0.25, 0.0, 10, InitialStep::Reduced).is_err());
        assert!(ThetaScheme::new(0.25, 0.1, 1, InitialStep::Reduced).is_err());
        assert_eq!(ThetaScheme::until(0.25, 0.125, 1.0, InitialStep::Reduced).unwrap().n_steps, 8);
    }

    #[test]
    fn profile_derivatives() {
        for p in [TimeProfile::Sin4, TimeProfile::SinShifted] {
            let t = 0.7;
            let e = 1e-5;
            let fd = (p.value(t + e) - p.value(t - e)) / (2.0 * e);
            assert!((fd - p.derivative(t).unwrap()).abs() < 1e-8);
            let fd2 = (p.derivative(t + e).unwrap() - p.derivative(t - e).unwrap()) / (2.0 * e);
            assert!((fd2 - p.second_derivative(t).unwrap()).abs() < 1e-8);
        }
        assert_eq!(TimeProfile::Sampled(f64::sin).derivative(0.0), None);
    }

    #[test]
    fn zero_data_stays_zero() {
        let sp = toy();
        let scheme = ThetaScheme::new(0.25, 0.1, 20, InitialStep::FourthOrder).unwrap();
        let tr = run(&sp, scheme, &WaveProblem::zero(2), RunOptions { store: Store::All, record_energy: true }).unwrap();
        assert!(tr.states.iter().flatten().all(|&v| v == 0.0));
        assert!(tr.energies.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn missing_derivatives_signal() {
        let sp = toy();
        let mut pb = WaveProblem::zero(2);
        pb.source.push(SourceTerm {
            load: vec![1.0, 0.0],
            profile: TimeProfile::Sampled(f64::sin),
        });
        let four = ThetaScheme::new(0.25, 0.1, 4, InitialStep::FourthOrder).unwrap();
        assert!(matches!(run(&sp, four, &pb, RunOptions::default()), Err(Error::MissingSourceDerivatives)));
        let red = ThetaScheme::new(0.25, 0.1, 4, InitialStep::Reduced).unwrap();
        assert!(run(&sp, red, &pb, RunOptions::default()).is_ok());
    }

    #[test]
    fn leapfrog_reduced_initial_step() {
        let sp = toy();
        let tau = 0.1;
        let scheme = ThetaScheme::new(0.0, tau, 2, InitialStep::Reduced).unwrap();
        let pb = WaveProblem {
            u0: vec![1.0, -0.5],
            v0: vec![0.3, 0.2],
            source: vec![SourceTerm {
                load: vec![0.5, 1.0],
                profile: TimeProfile::SinShifted,
            }],
        };
        let st = Stepper::new(&sp, scheme).unwrap();
        let u1 = st.initial_step(&pb).unwrap();
        let mu1 = sp.mul_mass(&u1);
        let (mu0, mv0, su0) = (sp.mul_mass(&pb.u0), sp.mul_mass(&pb.v0), sp.mul_stiffness(&pb.u0));
        let f0 = pb.load_at(0.0);
        for i in 0..2 {
            let expected = mu0[i] + tau * mv0[i] - 0.5 * tau * tau * su0[i] + 0.5 * tau * tau * f0[i];
            assert!((mu1[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn unit_amplification_for_crank_nicolson() {
        // scalar s = m = 1, θ = ¼: u_{n+1} − 2c u_n + u_{n−1} = 0 with |c| < 1
        for &tau in &[0.01f64, 1.0, 10.0, 1000.0] {
            let t2 = tau * tau;
            let k = 1.0 + 0.25 * t2;
            let trace = (2.0 - 0.5 * t2) / k;
            let det = (1.0 + 0.25 * t2) / k;
            let disc = trace * trace - 4.0 * det;
            let radius = if disc < 0.0 { det.sqrt() } else { ((trace.abs() + disc.sqrt()) / 2.0).max(0.0) };
            assert!((radius - 1.0).abs() < 1e-12, "tau {tau}");
        }
    }

    #[test]
    fn toy_lambda() {
        let sp = Toy {
            s: Mat::from_fn(1, 1, |_, _| 2.0),
            m: Mat::from_fn(1, 1, |_, _| 1.0),
        };
        assert_eq!(lambda_max(&sp).unwrap(), 2.0);
        let t = toy();
        // eigenvalues of M⁻¹S for this pair: 1/1.25 and 3/0.75
        assert!((lambda_max(&t).unwrap() - 4.0).abs() < 1e-5);
        let s = ThetaScheme::new(0.5, 100.0, 2, InitialStep::Reduced).unwrap();
        assert!(cfl_check(&t, &s).unwrap().stable);
    }

    #[test]
    fn reversible_crank_nicolson() {
        let sp = toy();
        let scheme = ThetaScheme::new(0.25, 0.3, 50, InitialStep::Reduced).unwrap();
        let st = Stepper::new(&sp, scheme).unwrap();
        let zero = vec![0.0; 2];
        let (mut a, mut b) = (vec![1.0, 0.2], vec![0.9, 0.3]);
        let (a0, b0) = (a.clone(), b.clone());
        for _ in 0..50 {
            let c = st.step(&a, &b, &zero).unwrap();
            a = b;
            b = c;
        }
        for _ in 0..50 {
            let c = st.step(&b, &a, &zero).unwrap();
            b = a;
            a = c;
        }
        for i in 0..2 {
            assert!((a[i] - a0[i]).abs() < 1e-10 && (b[i] - b0[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn energy_vanishes_at_rest_and_ignores_theta_quarter_term() {
        let sp = toy();
        let s = ThetaScheme::new(0.25, 0.1, 2, InitialStep::Reduced).unwrap();
        assert_eq!(energy(&sp, &s, &[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(energy_parts(&sp, &s, &[1.0, 0.0], &[0.0, 1.0]).correction, 0.0);
    }
}
