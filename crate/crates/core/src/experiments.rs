//! Config-driven convergence, localization, temporal and energy studies.
//!
//! Every study returns typed rows; [`write_table`] turns them into CSV files
//! whose first line is a `# schema` comment. Rows come out in config order
//! and all numbers are printed with a fixed format, so two runs of the same
//! config produce identical files apart from the timing columns.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use crate::Stopwatch;

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::coarse::{modes_per_element, MomentMap};
use crate::coefficient::{CoefficientDescriptor, CoefficientField};
use crate::error::{Error, Result};
use crate::fem::{assemble, interpolate, FineSystem};
use crate::linalg::dot;
use crate::mesh::MeshHierarchy;
use crate::multiscale::{build_basis, coarse_fem_basis, localization_decay, GalerkinSpace, InitialMap, MultiscaleBasis};
use crate::reference::{eoc, error_norms, reference_solve, ErrorNorms};
use crate::wave::{
    cfl_check, energy_parts, run, RunOptions, SourceTerm, Store, ThetaScheme, TimeProfile, WaveProblem, WaveSpace,
    InitialStep,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Spatial functions available as initial data and source shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialFn {
    Zero,
    /// `sin(πx) sin(πy)`
    SinPi,
    /// `sin⁴(πx) sin⁴(πy)`
    Sin4Pi,
    /// `sin(2πx) sin(πy)`
    Sin2PiPi,
}

impl SpatialFn {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            Self::Zero => 0.0,
            Self::SinPi => (PI * x).sin() * (PI * y).sin(),
            Self::Sin4Pi => ((PI * x).sin() * (PI * y).sin()).powi(4),
            Self::Sin2PiPi => (2.0 * PI * x).sin() * (PI * y).sin(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    Zero,
    One,
    Sin4,
    SinShifted,
}

impl ProfileName {
    pub fn profile(&self) -> TimeProfile {
        match self {
            Self::Zero => TimeProfile::Zero,
            Self::One => TimeProfile::One,
            Self::Sin4 => TimeProfile::Sin4,
            Self::SinShifted => TimeProfile::SinShifted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    /// `log₂(1/H)` for each grid point.
    pub coarse_exps: Vec<u32>,
    pub eps_exp: u32,
    pub fine_exp: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientConfig {
    /// Seeded from the top-level `seed`.
    Checkerboard { lo: f64, hi: f64 },
    Analytic,
    Constant { value: f64 },
}

impl CoefficientConfig {
    pub fn descriptor(&self, seed: u64, eps_exp: u32) -> CoefficientDescriptor {
        match *self {
            Self::Checkerboard { lo, hi } => CoefficientDescriptor::Checkerboard { seed, eps_exp, lo, hi },
            Self::Analytic => CoefficientDescriptor::Analytic,
            Self::Constant { value } => CoefficientDescriptor::Constant { value },
        }
    }
}

/// Localization parameter per grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllRule {
    /// `max(1, ceil(c (p + 2) log₂(1/H) / 3))`
    Rule(f64),
    Fixed(usize),
    /// Patches cover the whole domain.
    Saturated,
}

impl EllRule {
    pub fn resolve(&self, coarse_exp: u32, degree: usize) -> usize {
        let saturated = 1usize << coarse_exp;
        let ell = match *self {
            Self::Rule(c) => ((c * (degree as f64 + 2.0) * coarse_exp as f64 / 3.0).ceil() as usize).max(1),
            Self::Fixed(l) => l,
            Self::Saturated => saturated,
        };
        ell.min(saturated)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default = "default_degrees")]
    pub degrees: Vec<usize>,
    #[serde(default = "default_ell")]
    pub ell: EllRule,
    /// Per-point radii that take precedence over `ell`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<EllOverride>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllOverride {
    pub coarse_exp: u32,
    pub degree: usize,
    pub ell: usize,
}

impl BasisConfig {
    /// Radius used for grid point `(H = 2^-coarse_exp, p)`.
    pub fn ell_for(&self, coarse_exp: u32, degree: usize) -> usize {
        self.overrides
            .iter()
            .find(|o| o.coarse_exp == coarse_exp && o.degree == degree)
            .map_or_else(|| self.ell.resolve(coarse_exp, degree), |o| o.ell.min(1 << coarse_exp))
    }
}

fn default_degrees() -> Vec<usize> {
    vec![0, 1, 2]
}

fn default_ell() -> EllRule {
    EllRule::Rule(1.0)
}

impl Default for BasisConfig {
    fn default() -> Self {
        Self {
            degrees: default_degrees(),
            ell: default_ell(),
            overrides: Vec::new(),
        }
    }
}

/// Coarse time step per grid point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauRule {
    Fixed(f64),
    /// `c · H`
    Coarse(f64),
    /// `c · h`
    Fine(f64),
}

impl TauRule {
    pub fn resolve(&self, coarse_size: f64, fine_size: f64) -> f64 {
        match *self {
            Self::Fixed(t) => t,
            Self::Coarse(c) => c * coarse_size,
            Self::Fine(c) => c * fine_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default = "quarter")]
    pub theta: f64,
    #[serde(default = "default_tau")]
    pub tau: TauRule,
    #[serde(default = "one")]
    pub t_end: f64,
    #[serde(default = "fourth_order")]
    pub initial: InitialStep,
}

fn quarter() -> f64 {
    0.25
}

fn one() -> f64 {
    1.0
}

fn fourth_order() -> InitialStep {
    InitialStep::FourthOrder
}

fn default_tau() -> TauRule {
    TauRule::Fixed(1.0 / 256.0)
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            theta: quarter(),
            tau: default_tau(),
            t_end: one(),
            initial: fourth_order(),
        }
    }
}

/// Time step of the fine reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceTau {
    /// The coarse step of the grid point.
    Same,
    /// Coarse step divided by `d`.
    Divisor(u32),
    Fixed(f64),
    /// `c · h`
    Fine(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    #[serde(default = "quarter")]
    pub theta: f64,
    #[serde(default = "same")]
    pub tau: ReferenceTau,
}

fn same() -> ReferenceTau {
    ReferenceTau::Same
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            theta: quarter(),
            tau: same(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default = "zero_fn")]
    pub u0: SpatialFn,
    #[serde(default = "zero_fn")]
    pub v0: SpatialFn,
    #[serde(default = "sin_pi")]
    pub source: SpatialFn,
    #[serde(default = "sin4")]
    pub profile: ProfileName,
}

fn zero_fn() -> SpatialFn {
    SpatialFn::Zero
}

fn sin_pi() -> SpatialFn {
    SpatialFn::SinPi
}

fn sin4() -> ProfileName {
    ProfileName::Sin4
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            u0: zero_fn(),
            v0: zero_fn(),
            source: sin_pi(),
            profile: sin4(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesConfig {
    pub theta: f64,
    pub initial: InitialStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalConfig {
    pub coarse_exp: u32,
    pub degree: usize,
    pub taus: Vec<f64>,
    pub series: Vec<SeriesConfig>,
    /// Reference step is the smallest `tau` divided by this.
    pub reference_divisor: u32,
    pub reference_theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationConfig {
    /// Coarse mesh of the decay table.
    pub decay_coarse_exp: u32,
    pub degree: usize,
    /// Radii of the decay table; the saturated radius is appended.
    pub decay_ells: Vec<usize>,
    /// Radii of the error table, run on every `mesh.coarse_exps` entry.
    pub error_ells: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyAuditConfig {
    pub coarse_exp: u32,
    pub degree: usize,
    pub ell: usize,
    pub thetas: Vec<f64>,
    pub n_steps: usize,
    pub forced_steps: usize,
    /// Step for `θ ≥ ¼`; below that the spectral bound is used.
    pub tau: f64,
    /// Multiples of the spectral bound run for `θ = 0`.
    pub cfl_factors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FemCompareConfig {
    pub degree: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub mesh: MeshConfig,
    pub coefficient: CoefficientConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub problem: ProblemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<TemporalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localization: Option<LocalizationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_audit: Option<EnergyAuditConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fem: Option<FemCompareConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Panics for a seed of `2^63` or more, which `validate` rejects.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn descriptor(&self) -> CoefficientDescriptor {
        self.coefficient.descriptor(self.seed, self.mesh.eps_exp)
    }

    /// Checks nesting and the fine-to-coarse ratio of every grid point.
    pub fn validate(&self) -> Result<()> {
        let m = &self.mesh;
        let mut exps: Vec<(u32, usize)> = Vec::new();
        for &c in &m.coarse_exps {
            for &p in &self.basis.degrees {
                exps.push((c, p));
            }
        }
        if let Some(t) = &self.temporal {
            exps.push((t.coarse_exp, t.degree));
            if t.taus.is_empty() || t.series.is_empty() || t.reference_divisor == 0 {
                return Err(Error::Config("temporal: need taus, series and a positive reference_divisor".into()));
            }
        }
        if let Some(l) = &self.localization {
            exps.push((l.decay_coarse_exp, l.degree));
        }
        if let Some(e) = &self.energy_audit {
            exps.push((e.coarse_exp, e.degree));
        }
        for (c, p) in exps {
            let mesh = MeshHierarchy::new(c, m.eps_exp, m.fine_exp)?;
            if mesh.fine_per_coarse() < p + 2 {
                return Err(Error::MeshTooCoarse {
                    fine_per_coarse: mesh.fine_per_coarse(),
                    degree: p,
                    required: p + 2,
                });
            }
        }
        if !(0.0..=0.5).contains(&self.time.theta) || !(0.0..=0.5).contains(&self.reference.theta) {
            return Err(Error::Config("theta must lie in [0, 1/2]".into()));
        }
        if !(self.time.t_end > 0.0) {
            return Err(Error::Config("t_end must be positive".into()));
        }
        // TOML integers are signed 64-bit
        if i64::try_from(self.seed).is_err() {
            return Err(Error::Config(format!("seed {} does not fit a config file (max 2^63 - 1)", self.seed)));
        }
        Ok(())
    }

    /// Switches to the published resolution: `h = 2⁻⁸`, `ε = 2⁻⁶` and a fixed
    /// step of `2⁻⁹` where a fixed step is used.
    pub fn paper_scale(mut self) -> Self {
        self.mesh.fine_exp = 8;
        if matches!(self.coefficient, CoefficientConfig::Checkerboard { .. }) {
            self.mesh.eps_exp = 6;
        } else {
            self.mesh.eps_exp = self.mesh.eps_exp.min(8);
        }
        if let TauRule::Fixed(_) = self.time.tau {
            self.time.tau = TauRule::Fixed(1.0 / 512.0);
        }
        self
    }
}

/// Built-in configurations, one per study.
pub mod presets {
    use super::*;

    fn base(name: &str, coefficient: CoefficientConfig) -> ExperimentConfig {
        ExperimentConfig {
            name: name.to_string(),
            seed: 1,
            mesh: MeshConfig {
                coarse_exps: vec![1, 2, 3, 4, 5],
                eps_exp: 5,
                fine_exp: 7,
            },
            coefficient,
            basis: BasisConfig::default(),
            time: TimeConfig::default(),
            reference: ReferenceConfig::default(),
            problem: ProblemConfig::default(),
            temporal: None,
            localization: None,
            energy_audit: None,
            fem: None,
        }
    }

    /// Random checkerboard in [1, 10], Crank–Nicolson with `τ = 2⁻⁸`. The
    /// rule constant 2 makes the localization error negligible at every
    /// point of the grid.
    pub fn rough() -> ExperimentConfig {
        let mut c = base("rough", CoefficientConfig::Checkerboard { lo: 1.0, hi: 10.0 });
        c.basis.ell = EllRule::Rule(2.0);
        c
    }

    /// Smooth coefficient, `θ = 1/12`, `τ = 2⁻⁵ H`, saturated patches.
    pub fn smooth() -> ExperimentConfig {
        let mut c = base("smooth", CoefficientConfig::Analytic);
        c.mesh.coarse_exps = vec![1, 2, 3, 4];
        c.basis.ell = EllRule::Saturated;
        c.time = TimeConfig {
            theta: 1.0 / 12.0,
            tau: TauRule::Coarse(1.0 / 32.0),
            t_end: 1.0,
            initial: InitialStep::FourthOrder,
        };
        c.reference = ReferenceConfig {
            theta: 1.0 / 12.0,
            tau: ReferenceTau::Fine(1.0 / 32.0),
        };
        c.problem.source = SpatialFn::Sin4Pi;
        c
    }

    pub fn temporal() -> ExperimentConfig {
        let mut c = base("temporal", CoefficientConfig::Analytic);
        c.mesh.coarse_exps = vec![];
        c.basis = BasisConfig {
            degrees: vec![],
            ell: EllRule::Saturated,
            overrides: Vec::new(),
        };
        c.problem = ProblemConfig {
            u0: SpatialFn::SinPi,
            v0: SpatialFn::Sin2PiPi,
            source: SpatialFn::SinPi,
            profile: ProfileName::SinShifted,
        };
        let twelfth = 1.0 / 12.0;
        c.temporal = Some(TemporalConfig {
            coarse_exp: 3,
            degree: 1,
            taus: vec![1.0 / 64.0, 1.0 / 128.0, 1.0 / 256.0],
            series: vec![
                SeriesConfig {
                    theta: 0.25,
                    initial: InitialStep::FourthOrder,
                },
                SeriesConfig {
                    theta: twelfth,
                    initial: InitialStep::FourthOrder,
                },
                SeriesConfig {
                    theta: twelfth,
                    initial: InitialStep::Reduced,
                },
            ],
            reference_divisor: 16,
            reference_theta: twelfth,
        });
        c
    }

    pub fn localization() -> ExperimentConfig {
        let mut c = rough();
        c.name = "localization".into();
        c.mesh.coarse_exps = vec![3, 4, 5];
        c.basis.degrees = vec![1];
        c.localization = Some(LocalizationConfig {
            decay_coarse_exp: 4,
            degree: 1,
            decay_ells: vec![1, 2, 3, 4, 5, 6],
            error_ells: vec![1, 2, 3],
        });
        c
    }

    /// Checkerboard in [1, 9] with a different seed, `H ≥ ε`.
    pub fn fem_compare() -> ExperimentConfig {
        let mut c = base("fem_compare", CoefficientConfig::Checkerboard { lo: 1.0, hi: 9.0 });
        c.seed = 2;
        c.mesh.coarse_exps = vec![1, 2, 3, 4];
        c.basis.degrees = vec![0];
        c.fem = Some(FemCompareConfig { degree: 0 });
        c
    }

    pub fn energy_audit() -> ExperimentConfig {
        let mut c = rough();
        c.name = "energy_audit".into();
        c.mesh = MeshConfig {
            coarse_exps: vec![],
            eps_exp: 4,
            fine_exp: 5,
        };
        c.basis.degrees = vec![];
        c.problem = ProblemConfig {
            u0: SpatialFn::Zero,
            v0: SpatialFn::Zero,
            source: SpatialFn::SinPi,
            profile: ProfileName::SinShifted,
        };
        c.energy_audit = Some(EnergyAuditConfig {
            coarse_exp: 2,
            degree: 1,
            ell: 1,
            thetas: vec![0.0, 1.0 / 12.0, 0.25, 0.5],
            n_steps: 2000,
            forced_steps: 500,
            tau: 1.0 / 64.0,
            cfl_factors: vec![1.0, 1.5],
        });
        c
    }

    /// One multiscale run with energies recorded.
    pub fn solve() -> ExperimentConfig {
        let mut c = rough();
        c.name = "solve".into();
        c.mesh.coarse_exps = vec![3];
        c.basis.degrees = vec![1];
        c
    }
}

/// Run-wide options that are not part of the physics.
#[derive(Clone, Debug, Default)]
pub struct RunContext {
    pub cache_dir: Option<PathBuf>,
}

/// Fine problem data: nodal interpolants on interior dofs.
#[derive(Clone, Debug)]
pub struct FineData {
    pub u0: Vec<f64>,
    pub v0: Vec<f64>,
    pub source_shape: Vec<f64>,
    pub profile: TimeProfile,
    pub has_source: bool,
}

impl FineData {
    pub fn new(mesh: &MeshHierarchy, problem: &ProblemConfig) -> Self {
        let sample = |f: SpatialFn| interpolate(mesh, |x, y| f.eval(x, y));
        Self {
            u0: sample(problem.u0),
            v0: sample(problem.v0),
            source_shape: sample(problem.source),
            profile: problem.profile.profile(),
            has_source: problem.source != SpatialFn::Zero && problem.profile != ProfileName::Zero,
        }
    }

    pub fn fine_problem(&self, fine: &FineSystem) -> WaveProblem {
        WaveProblem {
            u0: self.u0.clone(),
            v0: self.v0.clone(),
            source: self.source_terms(|g| fine.mass.mul_vec(g)),
        }
    }

    pub fn coarse_problem(&self, space: &GalerkinSpace, fine: &FineSystem) -> Result<WaveProblem> {
        Ok(WaveProblem {
            u0: space.coefficients_of(fine, &self.u0)?,
            v0: space.coefficients_of(fine, &self.v0)?,
            source: self.source_terms(|g| space.load(fine, g)),
        })
    }

    fn source_terms(&self, load: impl Fn(&[f64]) -> Vec<f64>) -> Vec<SourceTerm> {
        if self.has_source {
            vec![SourceTerm {
                load: load(&self.source_shape),
                profile: self.profile,
            }]
        } else {
            Vec::new()
        }
    }
}

/// Fine matrices, coefficient and data shared by all grid points of a study.
pub struct Setting {
    pub fine: FineSystem,
    pub coefficient: CoefficientField,
    pub data: FineData,
    eps_exp: u32,
    fine_exp: u32,
}

impl Setting {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mesh = MeshHierarchy::new(0, cfg.mesh.eps_exp, cfg.mesh.fine_exp)?;
        let coefficient = CoefficientField::from_descriptor(&mesh, &cfg.descriptor())?;
        Ok(Self {
            fine: assemble(&mesh, &coefficient),
            data: FineData::new(&mesh, &cfg.problem),
            coefficient,
            eps_exp: cfg.mesh.eps_exp,
            fine_exp: cfg.mesh.fine_exp,
        })
    }

    pub fn mesh(&self, coarse_exp: u32) -> Result<MeshHierarchy> {
        MeshHierarchy::new(coarse_exp, self.eps_exp, self.fine_exp)
    }

    /// Builds the basis, or loads it from the cache directory if present.
    pub fn basis(&self, coarse_exp: u32, degree: usize, ell: usize, ctx: &RunContext) -> Result<(MultiscaleBasis, MomentMap)> {
        let mesh = self.mesh(coarse_exp)?;
        let moments = MomentMap::new(&mesh, degree);
        let key = crate::multiscale::CacheKey {
            coarse_exp,
            eps_exp: self.eps_exp,
            fine_exp: self.fine_exp,
            coefficient_hash: self.coefficient.descriptor().hash(),
            degree: degree as u32,
            ell: ell as u32,
        };
        if let Some(dir) = &ctx.cache_dir {
            let path = dir.join(key.file_name());
            if path.exists() {
                if let Some(b) = MultiscaleBasis::read_cache(&path, &key)? {
                    log::info!("basis loaded from {}", path.display());
                    return Ok((b, moments));
                }
            }
        }
        let basis = build_basis(&self.coefficient, &self.fine, &moments, ell)?;
        if let Some(dir) = &ctx.cache_dir {
            std::fs::create_dir_all(dir)?;
            basis.write_cache(&dir.join(key.file_name()))?;
        }
        Ok((basis, moments))
    }

    pub fn multiscale_space(&self, coarse_exp: u32, degree: usize, ell: usize, ctx: &RunContext) -> Result<GalerkinSpace> {
        let (basis, moments) = self.basis(coarse_exp, degree, ell, ctx)?;
        Ok(GalerkinSpace::from_multiscale(basis, &self.fine, &moments))
    }

    pub fn fem_space(&self, coarse_exp: u32) -> Result<GalerkinSpace> {
        let mesh = self.mesh(coarse_exp)?;
        Ok(GalerkinSpace::new(coarse_fem_basis(&mesh), &self.fine, InitialMap::L2))
    }

    /// Final fine state of the coarse run lifted to the fine space.
    pub fn solve_coarse(&self, space: &GalerkinSpace, scheme: ThetaScheme) -> Result<Vec<f64>> {
        let problem = self.data.coarse_problem(space, &self.fine)?;
        if scheme.theta < 0.25 {
            let report = cfl_check(space, &scheme)?;
            if !report.stable {
                return Err(Error::InvalidScheme(format!(
                    "tau = {:e} exceeds the stability bound {:e}",
                    scheme.tau,
                    report.tau_bound.unwrap_or(0.0)
                )));
            }
        }
        let traj = run(space, scheme, &problem, RunOptions::default())?;
        Ok(space.lift(traj.final_state()))
    }

    pub fn solve_reference(&self, scheme: ThetaScheme) -> Result<Vec<f64>> {
        let traj = reference_solve(&self.fine, &self.data.fine_problem(&self.fine), scheme)?;
        Ok(traj.final_state().to_vec())
    }
}

/// Number of steps to reach `t_end`; `tau` must divide it.
fn steps_for(t_end: f64, tau: f64) -> Result<usize> {
    let n = (t_end / tau).round();
    if n < 2.0 || ((n * tau) - t_end).abs() > 1e-9 * t_end {
        return Err(Error::Config(format!("tau = {tau:e} does not divide t_end = {t_end}")));
    }
    Ok(n as usize)
}

/// Fine references keyed by their time step.
struct References<'a> {
    setting: &'a Setting,
    cfg: &'a ExperimentConfig,
    cache: BTreeMap<u64, Vec<f64>>,
}

impl<'a> References<'a> {
    fn new(setting: &'a Setting, cfg: &'a ExperimentConfig) -> Self {
        Self {
            setting,
            cfg,
            cache: BTreeMap::new(),
        }
    }

    fn tau_for(&self, coarse_tau: f64) -> f64 {
        let h = 1.0 / (1u64 << self.cfg.mesh.fine_exp) as f64;
        match self.cfg.reference.tau {
            ReferenceTau::Same => coarse_tau,
            ReferenceTau::Divisor(d) => coarse_tau / d as f64,
            ReferenceTau::Fixed(t) => t,
            ReferenceTau::Fine(c) => c * h,
        }
    }

    fn get(&mut self, coarse_tau: f64) -> Result<&Vec<f64>> {
        let tau = self.tau_for(coarse_tau);
        let key = tau.to_bits();
        if !self.cache.contains_key(&key) {
            let t_end = self.cfg.time.t_end;
            let scheme = ThetaScheme::new(self.cfg.reference.theta, tau, steps_for(t_end, tau)?, InitialStep::FourthOrder)?;
            let start = Stopwatch::start();
            let r = self.setting.solve_reference(scheme)?;
            log::info!("reference with tau = {tau:e} in {:.1}s", start.seconds());
            self.cache.insert(key, r);
        }
        Ok(&self.cache[&key])
    }
}

/// A table row with a fixed CSV layout.
pub trait CsvRow {
    const SCHEMA: &'static str;
    const HEADER: &'static [&'static str];
    fn record(&self) -> Vec<String>;
}

fn num(v: f64) -> String {
    format!("{v:.6e}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

fn secs(v: f64) -> String {
    format!("{v:.3}")
}

/// Writes `# schema <name> v<version>` followed by the CSV table.
pub fn write_table<R: CsvRow>(path: &Path, rows: &[R]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# schema {} v{}", R::SCHEMA, SCHEMA_VERSION)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(R::HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

fn status_of<T>(r: &Result<T>) -> String {
    match r {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    }
}

#[derive(Clone, Debug)]
pub struct ConvergenceRow {
    pub coefficient: String,
    pub method: String,
    pub p: usize,
    pub ell: usize,
    pub coarse_exp: u32,
    pub dofs: usize,
    pub tau: f64,
    pub a_err: Option<f64>,
    pub l2_err: Option<f64>,
    pub eoc_a: Option<f64>,
    pub eoc_l2: Option<f64>,
    pub build_seconds: f64,
    pub solve_seconds: f64,
    pub status: String,
}

impl ConvergenceRow {
    pub fn coarse_size(&self) -> f64 {
        1.0 / (1u64 << self.coarse_exp) as f64
    }
}

impl CsvRow for ConvergenceRow {
    const SCHEMA: &'static str = "convergence";
    const HEADER: &'static [&'static str] = &[
        "coefficient",
        "method",
        "p",
        "ell",
        "H",
        "dofs",
        "tau",
        "a_err_rel",
        "l2_err_rel",
        "eoc_a",
        "eoc_l2",
        "build_seconds",
        "solve_seconds",
        "status",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.coefficient.clone(),
            self.method.clone(),
            self.p.to_string(),
            self.ell.to_string(),
            num(self.coarse_size()),
            self.dofs.to_string(),
            num(self.tau),
            opt(self.a_err),
            opt(self.l2_err),
            opt(self.eoc_a),
            opt(self.eoc_l2),
            secs(self.build_seconds),
            secs(self.solve_seconds),
            self.status.clone(),
        ]
    }
}

/// Fills the EOC columns between consecutive successful rows of a series.
fn fill_eoc(rows: &mut [ConvergenceRow]) {
    let mut prev: Option<usize> = None;
    for i in 0..rows.len() {
        let (Some(a), Some(l)) = (rows[i].a_err, rows[i].l2_err) else {
            continue;
        };
        if let Some(j) = prev {
            let steps = [rows[j].coarse_size(), rows[i].coarse_size()];
            if let (Ok(ea), Ok(el)) = (
                eoc(&[rows[j].a_err.unwrap(), a], &steps),
                eoc(&[rows[j].l2_err.unwrap(), l], &steps),
            ) {
                rows[i].eoc_a = Some(ea[0]);
                rows[i].eoc_l2 = Some(el[0]);
            }
        }
        prev = Some(i);
    }
}

enum Method {
    Multiscale { degree: usize },
    Fem,
}

fn convergence_point(
    setting: &Setting,
    cfg: &ExperimentConfig,
    refs: &mut References,
    ctx: &RunContext,
    coarse_exp: u32,
    method: &Method,
    ell_override: Option<usize>,
) -> ConvergenceRow {
    let big_h = 1.0 / (1u64 << coarse_exp) as f64;
    let h = 1.0 / (1u64 << cfg.mesh.fine_exp) as f64;
    let tau = cfg.time.tau.resolve(big_h, h);
    let n = 1usize << coarse_exp;
    let (name, p, ell, dofs) = match method {
        Method::Multiscale { degree } => (
            "plod",
            *degree,
            ell_override.unwrap_or_else(|| cfg.basis.ell_for(coarse_exp, *degree)),
            modes_per_element(*degree) * n * n,
        ),
        Method::Fem => ("fem", 1, 0, (n - 1) * (n - 1)),
    };
    let mut row = ConvergenceRow {
        coefficient: cfg.descriptor().label(),
        method: name.to_string(),
        p,
        ell,
        coarse_exp,
        dofs,
        tau,
        a_err: None,
        l2_err: None,
        eoc_a: None,
        eoc_l2: None,
        build_seconds: 0.0,
        solve_seconds: 0.0,
        status: String::new(),
    };
    let result = (|| -> Result<ErrorNorms> {
        let start = Stopwatch::start();
        let space = match method {
            Method::Multiscale { degree } => setting.multiscale_space(coarse_exp, *degree, ell, ctx)?,
            Method::Fem => setting.fem_space(coarse_exp)?,
        };
        row.build_seconds = start.seconds();
        let start = Stopwatch::start();
        let scheme = ThetaScheme::new(cfg.time.theta, tau, steps_for(cfg.time.t_end, tau)?, cfg.time.initial)?;
        let u = setting.solve_coarse(&space, scheme)?;
        row.solve_seconds = start.seconds();
        let reference = refs.get(tau)?;
        Ok(error_norms(&setting.fine, &u, reference))
    })();
    row.status = status_of(&result);
    if let Ok(e) = result {
        row.a_err = Some(e.energy);
        row.l2_err = Some(e.l2);
    }
    log::info!("{} p={} H=2^-{} ell={} -> {}", row.method, row.p, coarse_exp, row.ell, row.status);
    row
}

/// Error against the fine reference over `H` for every degree.
pub fn run_convergence(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<ConvergenceRow>> {
    cfg.validate()?;
    let setting = Setting::new(cfg)?;
    let mut refs = References::new(&setting, cfg);
    let mut rows = Vec::new();
    for &p in &cfg.basis.degrees {
        let mut series: Vec<ConvergenceRow> = cfg
            .mesh
            .coarse_exps
            .iter()
            .map(|&c| convergence_point(&setting, cfg, &mut refs, ctx, c, &Method::Multiscale { degree: p }, None))
            .collect();
        fill_eoc(&mut series);
        rows.extend(series);
    }
    Ok(rows)
}

/// Standard Q1 elements on the coarse mesh next to the multiscale method.
pub fn run_fem_comparison(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<ConvergenceRow>> {
    cfg.validate()?;
    let setting = Setting::new(cfg)?;
    let mut refs = References::new(&setting, cfg);
    let degree = cfg.fem.as_ref().map_or(0, |f| f.degree);
    let mut rows = Vec::new();
    for method in [Method::Fem, Method::Multiscale { degree }] {
        let mut series: Vec<ConvergenceRow> = cfg
            .mesh
            .coarse_exps
            .iter()
            .map(|&c| convergence_point(&setting, cfg, &mut refs, ctx, c, &method, None))
            .collect();
        fill_eoc(&mut series);
        rows.extend(series);
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct DecayRow {
    pub coarse_exp: u32,
    pub p: usize,
    pub ell: usize,
    pub decay: f64,
}

impl CsvRow for DecayRow {
    const SCHEMA: &'static str = "localization_decay";
    const HEADER: &'static [&'static str] = &["H", "p", "ell", "decay"];

    fn record(&self) -> Vec<String> {
        vec![
            num(1.0 / (1u64 << self.coarse_exp) as f64),
            self.p.to_string(),
            self.ell.to_string(),
            num(self.decay),
        ]
    }
}

/// Central elements of the coarse grid: the 2×2 block around the midpoint.
pub fn center_probes(mesh: &MeshHierarchy) -> Vec<usize> {
    let n = mesh.coarse_cells_per_dim();
    if n == 1 {
        return vec![0];
    }
    let c = n / 2;
    vec![
        mesh.element_index(c - 1, c - 1),
        mesh.element_index(c, c - 1),
        mesh.element_index(c - 1, c),
        mesh.element_index(c, c),
    ]
}

/// Decay of the basis-column localization error towards saturation.
pub fn run_localization_decay(cfg: &ExperimentConfig) -> Result<Vec<DecayRow>> {
    let loc = cfg
        .localization
        .as_ref()
        .ok_or_else(|| Error::Config("missing [localization] section".into()))?;
    let setting = Setting::new(cfg)?;
    let mesh = setting.mesh(loc.decay_coarse_exp)?;
    let moments = MomentMap::new(&mesh, loc.degree);
    let saturated = mesh.coarse_cells_per_dim();
    let mut ells: Vec<usize> = loc.decay_ells.iter().copied().filter(|&l| l < saturated).collect();
    ells.push(saturated);
    let table = localization_decay(&setting.coefficient, &setting.fine, &moments, &ells, &center_probes(&mesh))?;
    Ok(table
        .into_iter()
        .map(|(ell, decay)| DecayRow {
            coarse_exp: loc.decay_coarse_exp,
            p: loc.degree,
            ell,
            decay,
        })
        .collect())
}

/// Wave errors for fixed radii on every coarse mesh of the config.
pub fn run_localization_errors(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<ConvergenceRow>> {
    let loc = cfg
        .localization
        .as_ref()
        .ok_or_else(|| Error::Config("missing [localization] section".into()))?;
    let setting = Setting::new(cfg)?;
    let mut refs = References::new(&setting, cfg);
    let mut rows = Vec::new();
    for &ell in &loc.error_ells {
        let mut series: Vec<ConvergenceRow> = cfg
            .mesh
            .coarse_exps
            .iter()
            .map(|&c| {
                let method = Method::Multiscale { degree: loc.degree };
                convergence_point(&setting, cfg, &mut refs, ctx, c, &method, Some(ell.min(1 << c)))
            })
            .collect();
        fill_eoc(&mut series);
        rows.extend(series);
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct TemporalRow {
    pub theta: f64,
    pub initial: InitialStep,
    pub tau: f64,
    pub a_err: Option<f64>,
    pub l2_err: Option<f64>,
    pub eoc_a: Option<f64>,
    pub eoc_l2: Option<f64>,
    pub status: String,
}

fn initial_label(i: InitialStep) -> &'static str {
    match i {
        InitialStep::FourthOrder => "fourth_order",
        InitialStep::Reduced => "reduced",
    }
}

impl CsvRow for TemporalRow {
    const SCHEMA: &'static str = "temporal";
    const HEADER: &'static [&'static str] = &["theta", "initial", "tau", "a_err_rel", "l2_err_rel", "eoc_a", "eoc_l2", "status"];

    fn record(&self) -> Vec<String> {
        vec![
            num(self.theta),
            initial_label(self.initial).to_string(),
            num(self.tau),
            opt(self.a_err),
            opt(self.l2_err),
            opt(self.eoc_a),
            opt(self.eoc_l2),
            self.status.clone(),
        ]
    }
}

/// Time-step errors in one fixed multiscale space against a run with a much
/// smaller step in the same space.
pub fn run_temporal(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<TemporalRow>> {
    cfg.validate()?;
    let tc = cfg
        .temporal
        .as_ref()
        .ok_or_else(|| Error::Config("missing [temporal] section".into()))?;
    let setting = Setting::new(cfg)?;
    let ell = cfg.basis.ell_for(tc.coarse_exp, tc.degree);
    let space = setting.multiscale_space(tc.coarse_exp, tc.degree, ell, ctx)?;
    let problem = setting.data.coarse_problem(&space, &setting.fine)?;
    let t_end = cfg.time.t_end;
    let tau_min = tc.taus.iter().copied().fold(f64::INFINITY, f64::min);
    let tau_ref = tau_min / tc.reference_divisor as f64;
    let ref_scheme = ThetaScheme::new(tc.reference_theta, tau_ref, steps_for(t_end, tau_ref)?, InitialStep::FourthOrder)?;
    let reference = space.lift(run(&space, ref_scheme, &problem, RunOptions::default())?.final_state());
    let mut rows = Vec::new();
    for s in &tc.series {
        let mut series: Vec<TemporalRow> = Vec::new();
        for &tau in &tc.taus {
            let result = (|| -> Result<ErrorNorms> {
                let scheme = ThetaScheme::new(s.theta, tau, steps_for(t_end, tau)?, s.initial)?;
                if s.theta < 0.25 && !cfl_check(&space, &scheme)?.stable {
                    return Err(Error::InvalidScheme(format!("tau = {tau:e} violates the stability bound")));
                }
                let traj = run(&space, scheme, &problem, RunOptions::default())?;
                Ok(error_norms(&setting.fine, &space.lift(traj.final_state()), &reference))
            })();
            let mut row = TemporalRow {
                theta: s.theta,
                initial: s.initial,
                tau,
                a_err: None,
                l2_err: None,
                eoc_a: None,
                eoc_l2: None,
                status: status_of(&result),
            };
            if let Ok(e) = result {
                row.a_err = Some(e.energy);
                row.l2_err = Some(e.l2);
                if let Some(prev) = series.last().filter(|r| r.a_err.is_some()) {
                    let steps = [prev.tau, tau];
                    row.eoc_a = eoc(&[prev.a_err.unwrap(), e.energy], &steps).ok().map(|v| v[0]);
                    row.eoc_l2 = eoc(&[prev.l2_err.unwrap(), e.l2], &steps).ok().map(|v| v[0]);
                }
            }
            series.push(row);
        }
        rows.extend(series);
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct EnergyRow {
    /// `free` (no source) or `forced`.
    pub kind: String,
    pub theta: f64,
    pub tau: f64,
    pub cfl_factor: Option<f64>,
    pub cfl_bound: Option<f64>,
    pub steps: usize,
    /// Free runs: largest `|E^{n+1/2} − E^{1/2}| / E^{1/2}`. Forced runs:
    /// largest relative defect of the per-step energy identity.
    pub defect: Option<f64>,
    pub status: String,
}

impl CsvRow for EnergyRow {
    const SCHEMA: &'static str = "energy_audit";
    const HEADER: &'static [&'static str] = &["kind", "theta", "tau", "cfl_factor", "cfl_bound", "steps", "defect", "status"];

    fn record(&self) -> Vec<String> {
        vec![
            self.kind.clone(),
            num(self.theta),
            num(self.tau),
            opt(self.cfl_factor),
            opt(self.cfl_bound),
            self.steps.to_string(),
            opt(self.defect),
            self.status.clone(),
        ]
    }
}

/// Coefficients uniform in [-1, 1] from a seeded generator.
pub fn random_state(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..n)
        .map(|_| 2.0 * ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) - 1.0)
        .collect()
}

/// Largest relative deviation of the recorded energies from the first one.
pub fn energy_drift(energies: &[f64]) -> f64 {
    let e0 = energies[0];
    energies.iter().map(|e| (e - e0).abs() / e0.abs()).fold(0.0, f64::max)
}

/// Largest relative defect of `2(E^{n+1/2} − E^{n−1/2}) = f^{n;θ}ᵀ(u^{n+1} − u^{n−1})`
/// along a trajectory with all states stored.
pub fn energy_identity_defect<S: WaveSpace>(space: &S, scheme: &ThetaScheme, problem: &WaveProblem, states: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    let mut e_prev = energy_parts(space, scheme, &states[0], &states[1]).total();
    for n in 1..states.len() - 1 {
        let e_next = energy_parts(space, scheme, &states[n], &states[n + 1]).total();
        let f = problem.theta_load(n, scheme.tau, scheme.theta);
        let diff: Vec<f64> = states[n + 1].iter().zip(&states[n - 1]).map(|(a, b)| a - b).collect();
        let work = dot(&f, &diff);
        let scale = e_next.abs() + e_prev.abs() + work.abs();
        if scale > 0.0 {
            worst = worst.max((2.0 * (e_next - e_prev) - work).abs() / scale);
        }
        e_prev = e_next;
    }
    worst
}

/// Energy conservation without source, the energy identity with source and
/// the spectral stability bound, all in one multiscale space.
pub fn run_energy_audit(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<EnergyRow>> {
    cfg.validate()?;
    let ec = cfg
        .energy_audit
        .as_ref()
        .ok_or_else(|| Error::Config("missing [energy_audit] section".into()))?;
    let setting = Setting::new(cfg)?;
    let space = setting.multiscale_space(ec.coarse_exp, ec.degree, ec.ell, ctx)?;
    let n = WaveSpace::dim(&space);
    let free = WaveProblem {
        u0: random_state(n, cfg.seed),
        v0: random_state(n, cfg.seed.wrapping_add(1)),
        source: Vec::new(),
    };
    let mut rows = Vec::new();
    let lambda = crate::wave::lambda_max(&space)?;
    for &theta in &ec.thetas {
        let bound = (theta < 0.25).then(|| crate::wave::cfl_bound(lambda, theta));
        let factors: Vec<Option<f64>> = match bound {
            Some(_) if theta == 0.0 => ec.cfl_factors.iter().map(|&f| Some(f)).collect(),
            Some(_) => vec![Some(1.0)],
            None => vec![None],
        };
        for factor in factors {
            let tau = match (bound, factor) {
                (Some(b), Some(f)) => b * f,
                _ => ec.tau,
            };
            let result = ThetaScheme::new(theta, tau, ec.n_steps, InitialStep::Reduced).and_then(|scheme| {
                run(&space, scheme, &free, RunOptions { store: Store::Final, record_energy: true })
            });
            rows.push(EnergyRow {
                kind: "free".into(),
                theta,
                tau,
                cfl_factor: factor,
                cfl_bound: bound,
                steps: ec.n_steps,
                defect: result.as_ref().ok().map(|t| energy_drift(&t.energies)),
                status: status_of(&result),
            });
        }
    }
    let mut forced = setting.data.coarse_problem(&space, &setting.fine)?;
    forced.u0 = free.u0.clone();
    forced.v0 = free.v0.clone();
    for &theta in &ec.thetas {
        let bound = (theta < 0.25).then(|| crate::wave::cfl_bound(lambda, theta));
        let tau = bound.unwrap_or(ec.tau);
        let result = ThetaScheme::new(theta, tau, ec.forced_steps, InitialStep::FourthOrder).and_then(|scheme| {
            let t = run(&space, scheme, &forced, RunOptions { store: Store::All, record_energy: false })?;
            Ok(energy_identity_defect(&space, &scheme, &forced, &t.states))
        });
        rows.push(EnergyRow {
            kind: "forced".into(),
            theta,
            tau,
            cfl_factor: bound.map(|_| 1.0),
            cfl_bound: bound,
            steps: ec.forced_steps,
            defect: result.as_ref().ok().copied(),
            status: status_of(&result),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct BasisRow {
    pub coarse_exp: u32,
    pub p: usize,
    pub ell: usize,
    pub ncols: usize,
    pub nnz: usize,
    pub seconds: f64,
    pub status: String,
}

impl CsvRow for BasisRow {
    const SCHEMA: &'static str = "basis";
    const HEADER: &'static [&'static str] = &["H", "p", "ell", "ncols", "nnz", "build_seconds", "status"];

    fn record(&self) -> Vec<String> {
        vec![
            num(1.0 / (1u64 << self.coarse_exp) as f64),
            self.p.to_string(),
            self.ell.to_string(),
            self.ncols.to_string(),
            self.nnz.to_string(),
            secs(self.seconds),
            self.status.clone(),
        ]
    }
}

/// Builds (and caches, if a cache directory is set) every basis of the grid.
pub fn run_build_basis(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<Vec<BasisRow>> {
    cfg.validate()?;
    let setting = Setting::new(cfg)?;
    let mut rows = Vec::new();
    for &p in &cfg.basis.degrees {
        for &c in &cfg.mesh.coarse_exps {
            let ell = cfg.basis.ell_for(c, p);
            let start = Stopwatch::start();
            let result = setting.basis(c, p, ell, ctx);
            rows.push(BasisRow {
                coarse_exp: c,
                p,
                ell,
                ncols: result.as_ref().map_or(0, |(b, _)| b.matrix.ncols()),
                nnz: result.as_ref().map_or(0, |(b, _)| b.matrix.nnz()),
                seconds: start.seconds(),
                status: status_of(&result),
            });
        }
    }
    Ok(rows)
}

/// One run on the first grid point, with its energy log and final errors.
pub fn run_solve(cfg: &ExperimentConfig, ctx: &RunContext, energy_csv: &Path) -> Result<Vec<ConvergenceRow>> {
    cfg.validate()?;
    let c = *cfg.mesh.coarse_exps.first().ok_or_else(|| Error::Config("no coarse mesh".into()))?;
    let p = *cfg.basis.degrees.first().ok_or_else(|| Error::Config("no degree".into()))?;
    let setting = Setting::new(cfg)?;
    let ell = cfg.basis.ell_for(c, p);
    let start = Stopwatch::start();
    let space = setting.multiscale_space(c, p, ell, ctx)?;
    let build_seconds = start.seconds();
    let big_h = 1.0 / (1u64 << c) as f64;
    let tau = cfg.time.tau.resolve(big_h, 1.0 / (1u64 << cfg.mesh.fine_exp) as f64);
    let scheme = ThetaScheme::new(cfg.time.theta, tau, steps_for(cfg.time.t_end, tau)?, cfg.time.initial)?;
    let problem = setting.data.coarse_problem(&space, &setting.fine)?;
    let start = Stopwatch::start();
    let traj = run(&space, scheme, &problem, RunOptions { store: Store::Final, record_energy: true })?;
    let solve_seconds = start.seconds();
    traj.write_energy_csv(energy_csv)?;
    let mut refs = References::new(&setting, cfg);
    let e = error_norms(&setting.fine, &space.lift(traj.final_state()), refs.get(tau)?);
    Ok(vec![ConvergenceRow {
        coefficient: cfg.descriptor().label(),
        method: "plod".into(),
        p,
        ell,
        coarse_exp: c,
        dofs: space.dim(),
        tau,
        a_err: Some(e.energy),
        l2_err: Some(e.l2),
        eoc_a: None,
        eoc_l2: None,
        build_seconds,
        solve_seconds,
        status: "ok".into(),
    }])
}

/// Run record written next to the CSV files.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ell_rule() {
        assert_eq!(EllRule::Rule(1.0).resolve(1, 0), 1);
        assert_eq!(EllRule::Rule(1.0).resolve(5, 2), 7);
        assert_eq!(EllRule::Rule(1.0).resolve(3, 1), 3);
        assert_eq!(EllRule::Saturated.resolve(3, 1), 8);
        assert_eq!(EllRule::Fixed(20).resolve(2, 0), 4);
    }

    #[test]
    fn presets_roundtrip_through_toml() {
        for cfg in [
            presets::rough(),
            presets::smooth(),
            presets::temporal(),
            presets::localization(),
            presets::fem_compare(),
            presets::energy_audit(),
            presets::solve(),
        ] {
            let text = cfg.to_toml();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg, "{text}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = presets::rough().to_toml();
        text = text.replace("[mesh]", "[mesh]\nfine_exps = 3");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_ratio_is_rejected() {
        let mut cfg = presets::rough();
        cfg.mesh.fine_exp = 6;
        cfg.mesh.eps_exp = 5;
        assert!(matches!(cfg.validate(), Err(Error::MeshTooCoarse { .. })));
    }

    #[test]
    fn steps_must_divide() {
        assert_eq!(steps_for(1.0, 0.125).unwrap(), 8);
        assert!(steps_for(1.0, 0.3).is_err());
    }

    #[test]
    fn eoc_fill_skips_failures() {
        let row = |c: u32, a: Option<f64>| ConvergenceRow {
            coefficient: String::new(),
            method: String::new(),
            p: 0,
            ell: 1,
            coarse_exp: c,
            dofs: 0,
            tau: 0.1,
            a_err: a,
            l2_err: a,
            eoc_a: None,
            eoc_l2: None,
            build_seconds: 0.0,
            solve_seconds: 0.0,
            status: String::new(),
        };
        let mut rows = vec![row(1, Some(1.0)), row(2, None), row(3, Some(1.0 / 16.0))];
        fill_eoc(&mut rows);
        assert!(rows[1].eoc_a.is_none());
        assert!((rows[2].eoc_a.unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn table_has_schema_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![DecayRow {
            coarse_exp: 2,
            p: 1,
            ell: 1,
            decay: 0.5,
        }];
        write_table(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# schema localization_decay v1\nH,p,ell,decay\n"));
    }
}
