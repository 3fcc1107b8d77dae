//! Lennard-Jones oracle: analytic energies and forces for argon-like clusters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, MolecularFrame, Vec3};

pub const ARGON: u32 = 18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LennardJones {
    /// Well depth (eV).
    pub epsilon: f64,
    /// Zero-crossing distance (Å).
    pub sigma: f64,
}

impl Default for LennardJones {
    fn default() -> Self {
        Self {
            epsilon: 0.0104,
            sigma: 3.4,
        }
    }
}

impl LennardJones {
    pub fn pair_energy(&self, r: f64) -> f64 {
        let s6 = (self.sigma / r).powi(6);
        4.0 * self.epsilon * (s6 * s6 - s6)
    }

    /// -dV/dr
    pub fn pair_force(&self, r: f64) -> f64 {
        let s6 = (self.sigma / r).powi(6);
        24.0 * self.epsilon * (2.0 * s6 * s6 - s6) / r
    }

    pub fn minimum_distance(&self) -> f64 {
        2f64.powf(1.0 / 6.0) * self.sigma
    }

    /// Total energy (eV) and forces (eV/Å), F = -∇E.
    pub fn energy_forces(&self, positions: &[Vec3]) -> (f64, Vec<Vec3>) {
        let n = positions.len();
        let mut energy = 0.0;
        let mut forces = vec![[0.0; 3]; n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = [
                    positions[i][0] - positions[j][0],
                    positions[i][1] - positions[j][1],
                    positions[i][2] - positions[j][2],
                ];
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                energy += self.pair_energy(r);
                let f = self.pair_force(r) / r;
                for a in 0..3 {
                    forces[i][a] += f * d[a];
                    forces[j][a] -= f * d[a];
                }
            }
        }
        (energy, forces)
    }

    pub fn energy(&self, positions: &[Vec3]) -> f64 {
        self.energy_forces(positions).0
    }

    /// Label a frame in place with the analytic energy and forces.
    pub fn label(&self, frame: &mut MolecularFrame) {
        let (e, f) = self.energy_forces(&frame.positions);
        frame.energy = Some(e);
        frame.forces = Some(f);
    }
}

/// Cluster sampling parameters for the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LjClusterConfig {
    pub potential: LennardJones,
    /// Rejection threshold on the closest pair, in units of sigma.
    pub min_distance: f64,
    /// Atoms are placed uniformly in a ball of radius
    /// `sigma * (radius_offset + radius_per_atom * n^(1/3))`.
    pub radius_offset: f64,
    pub radius_per_atom: f64,
}

impl Default for LjClusterConfig {
    fn default() -> Self {
        Self {
            potential: LennardJones::default(),
            min_distance: 0.8,
            radius_offset: 0.35,
            radius_per_atom: 0.55,
        }
    }
}

fn sample_in_ball<G: Rng + ?Sized>(rng: &mut G, radius: f64) -> Vec3 {
    loop {
        let p: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
            return p.map(|v| v * radius);
        }
    }
}

/// One labelled argon cluster with `n` atoms, centred on its centroid.
pub fn sample_lj_cluster<G: Rng + ?Sized>(
    n: usize,
    config: &LjClusterConfig,
    rng: &mut G,
) -> MolecularFrame {
    let sigma = config.potential.sigma;
    let radius = sigma * (config.radius_offset + config.radius_per_atom * (n as f64).cbrt());
    let min_d = config.min_distance * sigma;
    let mut positions: Vec<Vec3> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while positions.len() < n {
        let p = sample_in_ball(rng, radius);
        if positions.iter().all(|q| super::frame::distance(&p, q) >= min_d) {
            positions.push(p);
        } else {
            attempts += 1;
            if attempts > 1000 {
                positions.clear();
                attempts = 0;
            }
        }
    }
    let c = {
        let inv = 1.0 / n as f64;
        let mut c = [0.0; 3];
        for p in &positions {
            for a in 0..3 {
                c[a] += p[a] * inv;
            }
        }
        c
    };
    for p in &mut positions {
        for a in 0..3 {
            p[a] -= c[a];
        }
    }
    let mut frame = MolecularFrame {
        atomic_numbers: vec![ARGON; n],
        positions,
        forces: None,
        energy: None,
        charge: 0,
        spin: 0,
    };
    config.potential.label(&mut frame);
    frame
}

pub fn generate_lj_dataset<G: Rng + ?Sized>(
    n_frames: usize,
    atoms_min: usize,
    atoms_max: usize,
    rng: &mut G,
) -> Result<Vec<MolecularFrame>, DataError> {
    generate_lj_dataset_with(n_frames, atoms_min, atoms_max, &LjClusterConfig::default(), rng)
}

pub fn generate_lj_dataset_with<G: Rng + ?Sized>(
    n_frames: usize,
    atoms_min: usize,
    atoms_max: usize,
    config: &LjClusterConfig,
    rng: &mut G,
) -> Result<Vec<MolecularFrame>, DataError> {
    if !(2 <= atoms_min && atoms_min <= atoms_max && atoms_max <= 16) {
        return Err(DataError::InvalidArgument(format!(
            "atom range must satisfy 2 <= min <= max <= 16, got {atoms_min}..={atoms_max}"
        )));
    }
    Ok((0..n_frames)
        .map(|_| {
            let n = rng.random_range(atoms_min..=atoms_max);
            sample_lj_cluster(n, config, rng)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dimer_at_sigma_has_zero_energy() {
        let lj = LennardJones::default();
        let (e, _) = lj.energy_forces(&[[0.0; 3], [0.0, 0.0, lj.sigma]]);
        assert!(e.abs() < 1e-15);
    }

    #[test]
    fn dimer_at_minimum() {
        let lj = LennardJones::default();
        let (e, f) = lj.energy_forces(&[[0.0; 3], [0.0, 0.0, lj.minimum_distance()]]);
        assert!((e + lj.epsilon).abs() < 1e-10);
        for row in f {
            for c in row {
                assert!(c.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forces_match_finite_differences() {
        let lj = LennardJones::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = generate_lj_dataset(20, 2, 8, &mut rng).unwrap();
        let h = 1e-5;
        for frame in &frames {
            let forces = frame.forces.as_ref().unwrap();
            let scale = forces
                .iter()
                .flatten()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..frame.n_atoms() {
                for a in 0..3 {
                    let mut p = frame.positions.clone();
                    p[i][a] += h;
                    let ep = lj.energy(&p);
                    p[i][a] -= 2.0 * h;
                    let em = lj.energy(&p);
                    let fd = -(ep - em) / (2.0 * h);
                    assert!(
                        (fd - forces[i][a]).abs() <= 1e-6 * scale.max(1e-12),
                        "fd {fd} analytic {}",
                        forces[i][a]
                    );
                }
            }
        }
    }

    #[test]
    fn newton_third_law_and_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = LjClusterConfig::default();
        for frame in generate_lj_dataset(200, 2, 16, &mut rng).unwrap() {
            let f = frame.forces.as_ref().unwrap();
            for a in 0..3 {
                let s: f64 = f.iter().map(|r| r[a]).sum();
                assert!(s.abs() <= 1e-9);
            }
            let n = frame.n_atoms();
            for i in 0..n {
                for j in (i + 1)..n {
                    assert!(frame.distance(i, j) >= cfg.min_distance * cfg.potential.sigma);
                }
            }
        }
    }

    #[test]
    fn invalid_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate_lj_dataset(1, 1, 4, &mut rng).is_err());
        assert!(generate_lj_dataset(1, 5, 4, &mut rng).is_err());
        assert!(generate_lj_dataset(1, 2, 17, &mut rng).is_err());
    }
}
