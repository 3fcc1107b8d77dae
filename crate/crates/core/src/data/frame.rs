use serde::{Deserialize, Serialize};

use super::DataError;
use crate::elements::MAX_ATOMIC_NUMBER;

pub type Vec3 = [f64; 3];

/// One molecule. Positions in Å, forces in eV/Å, energy in eV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularFrame {
    pub atomic_numbers: Vec<u32>,
    pub positions: Vec<Vec3>,
    pub forces: Option<Vec<Vec3>>,
    pub energy: Option<f64>,
    pub charge: i32,
    pub spin: u32,
}

impl MolecularFrame {
    pub fn new(atomic_numbers: Vec<u32>, positions: Vec<Vec3>) -> Result<Self, DataError> {
        let frame = Self {
            atomic_numbers,
            positions,
            forces: None,
            energy: None,
            charge: 0,
            spin: 0,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn with_labels(mut self, energy: f64, forces: Vec<Vec3>) -> Result<Self, DataError> {
        self.energy = Some(energy);
        self.forces = Some(forces);
        self.validate()?;
        Ok(self)
    }

    pub fn n_atoms(&self) -> usize {
        self.atomic_numbers.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.atomic_numbers.len();
        if self.positions.len() != n {
            return Err(DataError::Shape(format!(
                "{} atomic numbers but {} position rows",
                n,
                self.positions.len()
            )));
        }
        if let Some(forces) = &self.forces {
            if forces.len() != n {
                return Err(DataError::Shape(format!(
                    "{} position rows but {} force rows",
                    n,
                    forces.len()
                )));
            }
        }
        if let Some(&z) = self
            .atomic_numbers
            .iter()
            .find(|&&z| z == 0 || z > MAX_ATOMIC_NUMBER)
        {
            return Err(DataError::Element(z));
        }
        Ok(())
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        distance(&self.positions[i], &self.positions[j])
    }

    /// Full n×n distance matrix.
    pub fn distance_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.n_atoms();
        (0..n)
            .map(|i| (0..n).map(|j| self.distance(i, j)).collect())
            .collect()
    }

    /// Reorder atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            atomic_numbers: perm.iter().map(|&i| self.atomic_numbers[i]).collect(),
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            forces: self
                .forces
                .as_ref()
                .map(|f| perm.iter().map(|&i| f[i]).collect()),
            energy: self.energy,
            charge: self.charge,
            spin: self.spin,
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.n_atoms().max(1) as f64;
        let mut c = [0.0; 3];
        for p in &self.positions {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }
}

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}
