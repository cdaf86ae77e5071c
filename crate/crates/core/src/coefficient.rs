//! Scalar diffusion coefficients, piecewise constant on the fine grid.
//!
//! Random checkerboards draw one value per ε-cell from SplitMix64 (Steele,
//! Lea and Flood 2014; the `rand_xoshiro` implementation). The generator is
//! seeded with the raw 64-bit seed and advanced once per ε-cell in row-major
//! order:
//!
//! ```text
//! state = state + 0x9e3779b97f4a7c15
//! z = (state ^ (state >> 30)) * 0xbf58476d1ce4e5b9
//! z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//! out = z ^ (z >> 31)
//! value = lo + (hi - lo) * (out >> 11) * 2^-53
//! ```
//!
//! All arithmetic is wrapping 64-bit, so the fields are reproducible on any
//! platform and in any language.

use std::io::Write;
use std::path::Path;

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mesh::MeshHierarchy;

/// How a coefficient field was produced. Serialized into experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientDescriptor {
    Checkerboard {
        seed: u64,
        eps_exp: u32,
        lo: f64,
        hi: f64,
    },
    /// `1 + sin(x1) sin(2 x2) / 2`
    Analytic,
    Constant {
        value: f64,
    },
}

impl CoefficientDescriptor {
    /// Canonical `key=value` rendering, used for hashing and CSV labels.
    pub fn canonical(&self) -> String {
        match self {
            Self::Checkerboard {
                seed,
                eps_exp,
                lo,
                hi,
            } => format!("kind=checkerboard;seed={seed};eps_exp={eps_exp};lo={lo:?};hi={hi:?}"),
            Self::Analytic => "kind=analytic".to_string(),
            Self::Constant { value } => format!("kind=constant;value={value:?}"),
        }
    }

    /// First eight bytes of the SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn label(&self) -> String {
        match self {
            Self::Checkerboard { seed, lo, hi, .. } => format!("checkerboard[{lo},{hi}]#{seed}"),
            Self::Analytic => "smooth".to_string(),
            Self::Constant { value } => format!("constant({value})"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoefficientField {
    values: Vec<f64>,
    alpha: f64,
    beta: f64,
    descriptor: CoefficientDescriptor,
}

pub fn smooth_a3(x: f64, y: f64) -> f64 {
    1.0 + 0.5 * x.sin() * (2.0 * y).sin()
}

impl CoefficientField {
    pub fn checkerboard(mesh: &MeshHierarchy, seed: u64, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidCoefficientRange { lo, hi });
        }
        let ne = mesh.eps_cells_per_dim();
        let mut rng = SplitMix64::seed_from_u64(seed);
        let eps_values: Vec<f64> = (0..ne * ne)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                lo + (hi - lo) * u
            })
            .collect();
        let values = (0..mesh.n_fine_cells())
            .map(|c| eps_values[mesh.eps_cell_of_fine_cell(c)])
            .collect();
        Ok(Self {
            values,
            alpha: lo,
            beta: hi,
            descriptor: CoefficientDescriptor::Checkerboard {
                seed,
                eps_exp: mesh.eps_exp(),
                lo,
                hi,
            },
        })
    }

    /// The smooth coefficient sampled at fine-cell centers.
    pub fn analytic_smooth(mesh: &MeshHierarchy) -> Self {
        let nf = mesh.fine_cells_per_dim();
        let h = mesh.fine_size();
        let values = (0..mesh.n_fine_cells())
            .map(|c| {
                let (cx, cy) = (c % nf, c / nf);
                smooth_a3((cx as f64 + 0.5) * h, (cy as f64 + 0.5) * h)
            })
            .collect();
        Self {
            values,
            alpha: 0.5,
            beta: 1.5,
            descriptor: CoefficientDescriptor::Analytic,
        }
    }

    pub fn constant(mesh: &MeshHierarchy, value: f64) -> Result<Self> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::InvalidCoefficientRange { lo: value, hi: value });
        }
        Ok(Self {
            values: vec![value; mesh.n_fine_cells()],
            alpha: value,
            beta: value,
            descriptor: CoefficientDescriptor::Constant { value },
        })
    }

    /// Rebuilds a field from its descriptor. Checkerboards use the ε of the
    /// descriptor, so it must be compatible with the mesh.
    pub fn from_descriptor(mesh: &MeshHierarchy, descriptor: &CoefficientDescriptor) -> Result<Self> {
        match *descriptor {
            CoefficientDescriptor::Checkerboard {
                seed,
                eps_exp,
                lo,
                hi,
            } => {
                let m = MeshHierarchy::new(mesh.coarse_exp().min(eps_exp), eps_exp, mesh.fine_exp())?;
                let mut field = Self::checkerboard(&m, seed, lo, hi)?;
                field.descriptor = descriptor.clone();
                Ok(field)
            }
            CoefficientDescriptor::Analytic => Ok(Self::analytic_smooth(mesh)),
            CoefficientDescriptor::Constant { value } => Self::constant(mesh, value),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, fine_cell: usize) -> f64 {
        self.values[fine_cell]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn descriptor(&self) -> &CoefficientDescriptor {
        &self.descriptor
    }

    /// Returns a copy with the values of the given fine cells replaced.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        assert_eq!(values.len(), self.values.len());
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo > 0.0) {
            return Err(Error::InvalidCoefficientRange { lo, hi });
        }
        Ok(Self {
            values,
            alpha: lo.min(self.alpha),
            beta: hi.max(self.beta),
            descriptor: self.descriptor.clone(),
        })
    }

    /// Raw values as little-endian `f64`, fine cells row-major.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh() -> MeshHierarchy {
        MeshHierarchy::new(2, 4, 6).unwrap()
    }

    #[test]
    fn degenerate_range_is_constant() {
        let a = CoefficientField::checkerboard(&mesh(), 3, 1.0, 1.0).unwrap();
        assert!(a.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_nonpositive_lower_bound() {
        assert!(CoefficientField::checkerboard(&mesh(), 3, 0.0, 1.0).is_err());
        assert!(CoefficientField::checkerboard(&mesh(), 3, -1.0, 1.0).is_err());
        assert!(CoefficientField::checkerboard(&mesh(), 3, 2.0, 1.0).is_err());
    }

    #[test]
    fn checkerboard_bounds_and_determinism() {
        let m = MeshHierarchy::new(3, 6, 8).unwrap();
        let a = CoefficientField::checkerboard(&m, 42, 1.0, 10.0).unwrap();
        let b = CoefficientField::checkerboard(&m, 42, 1.0, 10.0).unwrap();
        assert!(a.values().iter().all(|&v| (1.0..=10.0).contains(&v)));
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = CoefficientField::checkerboard(&m, 43, 1.0, 10.0).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn splitmix_first_draw_is_pinned() {
        // SplitMix64 seeded with 0: first output 0xe220a8397b1dcdaf
        let m = MeshHierarchy::new(0, 0, 0).unwrap();
        let a = CoefficientField::checkerboard(&m, 0, 0.5, 1.5).unwrap();
        let expected = 0.5 + (0xe220a8397b1dcdafu64 >> 11) as f64 / (1u64 << 53) as f64;
        assert_eq!(a.value(0), expected);
    }

    #[test]
    fn checkerboard_constant_on_eps_cells() {
        let m = mesh();
        let a = CoefficientField::checkerboard(&m, 7, 1.0, 9.0).unwrap();
        let mut seen = vec![None; m.eps_cells_per_dim().pow(2)];
        for c in 0..m.n_fine_cells() {
            let e = m.eps_cell_of_fine_cell(c);
            match seen[e] {
                None => seen[e] = Some(a.value(c)),
                Some(v) => assert_eq!(v, a.value(c)),
            }
        }
    }

    #[test]
    fn smooth_field_values() {
        assert_eq!(smooth_a3(0.0, 0.0), 1.0);
        let v = smooth_a3(std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_4);
        assert!((v - 1.5).abs() < 1e-15);
        let a = CoefficientField::analytic_smooth(&mesh());
        assert!((a.value(0) - 1.0).abs() < 1e-3);
        assert!(a.values().iter().all(|&v| (0.5..=1.5).contains(&v)));
    }

    #[test]
    fn descriptor_roundtrip() {
        let m = mesh();
        let a = CoefficientField::checkerboard(&m, 11, 1.0, 10.0).unwrap();
        let b = CoefficientField::from_descriptor(&m, a.descriptor()).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.descriptor().hash(), b.descriptor().hash());
        assert_ne!(a.descriptor().hash(), CoefficientDescriptor::Analytic.hash());
    }
}
