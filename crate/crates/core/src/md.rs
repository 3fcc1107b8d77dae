//! Molecular dynamics over pluggable force providers.
//!
//! Internal units: eV, Å, amu. One internal time unit is
//! `1 Å · sqrt(amu / eV)`, about 10.18 fs; see [`fs_per_time_unit`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::QuantileCodebook;
use crate::data::{write_xyz, LennardJones, MolecularFrame, Vec3};
use crate::elements;
use crate::model::{Model, ModelError};
use crate::nn::Real;
use crate::tokenizer::{encode_frame, DualSequence, Mode, TokenType, TokenizerError, Vocabulary};

pub const AMU_KG: f64 = 1.660_539_066_60e-27;
pub const EV_J: f64 = 1.602_176_634e-19;
pub const ANGSTROM_M: f64 = 1e-10;
/// Boltzmann constant in eV/K.
pub const K_B: f64 = 8.617_333_262e-5;

/// Femtoseconds per internal time unit.
pub fn fs_per_time_unit() -> f64 {
    ANGSTROM_M * (AMU_KG / EV_J).sqrt() * 1e15
}

#[derive(Debug, Error)]
pub enum MdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("force provider failed at step {step}: {message}")]
    Provider { step: usize, message: String },
    #[error("non-finite state at step {0}")]
    NonFinite(usize),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("histogram binning mismatch")]
    BinningMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// `(positions, elements, charge, spin) → (energy, forces)`.
pub trait ForceProvider {
    fn compute(
        &self,
        positions: &[Vec3],
        atomic_numbers: &[u32],
        charge: i32,
        spin: u32,
    ) -> Result<(f64, Vec<Vec3>), MdError>;
}

impl ForceProvider for LennardJones {
    fn compute(&self, positions: &[Vec3], _: &[u32], _: i32, _: u32) -> Result<(f64, Vec<Vec3>), MdError> {
        Ok(self.energy_forces(positions))
    }
}

/// Harmonic springs `½k|x|²` to the origin (oscillator tests).
#[derive(Debug, Clone, Copy)]
pub struct HarmonicWell {
    pub k: f64,
}

impl ForceProvider for HarmonicWell {
    fn compute(&self, positions: &[Vec3], _: &[u32], _: i32, _: u32) -> Result<(f64, Vec<Vec3>), MdError> {
        let mut e = 0.0;
        let f = positions
            .iter()
            .map(|p| {
                e += 0.5 * self.k * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
                [-self.k * p[0], -self.k * p[1], -self.k * p[2]]
            })
            .collect();
        Ok((e, f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForceKind {
    /// Force head output.
    Direct,
    /// `−∂E/∂r` through the energy head.
    Conservative,
}

/// How discrete tokens follow the atoms.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenPolicy {
    /// Re-tokenize every call; position cells may switch between steps.
    Refresh,
    /// Keep the discrete stream of a reference frame and update only the
    /// continuous coordinates, making the energy smooth in positions.
    Frozen(DualSequence),
}

pub struct ModelProvider<'a, R> {
    pub model: &'a Model<R>,
    pub codebook: &'a QuantileCodebook,
    pub vocab: &'a Vocabulary,
    pub kind: ForceKind,
    pub tokens: TokenPolicy,
}

impl<'a, R: Real> ModelProvider<'a, R> {
    pub fn new(
        model: &'a Model<R>,
        codebook: &'a QuantileCodebook,
        vocab: &'a Vocabulary,
        kind: ForceKind,
    ) -> Self {
        Self {
            model,
            codebook,
            vocab,
            kind,
            tokens: TokenPolicy::Refresh,
        }
    }

    /// Freeze tokens at `frame`.
    pub fn frozen_at(mut self, frame: &MolecularFrame) -> Result<Self, MdError> {
        self.tokens = TokenPolicy::Frozen(encode_frame(frame, self.codebook, self.vocab, Mode::Finetune)?);
        Ok(self)
    }
}

impl<R: Real> ForceProvider for ModelProvider<'_, R> {
    fn compute(
        &self,
        positions: &[Vec3],
        atomic_numbers: &[u32],
        charge: i32,
        spin: u32,
    ) -> Result<(f64, Vec<Vec3>), MdError> {
        let seq = match &self.tokens {
            TokenPolicy::Refresh => {
                let mut frame = MolecularFrame::new(atomic_numbers.to_vec(), positions.to_vec())
                    .map_err(|e| MdError::InvalidArgument(e.to_string()))?;
                frame.charge = charge;
                frame.spin = spin;
                encode_frame(&frame, self.codebook, self.vocab, Mode::Finetune)?
            }
            TokenPolicy::Frozen(base) => {
                if base.n_atoms != positions.len() {
                    return Err(MdError::InvalidArgument("frozen sequence atom count differs".into()));
                }
                let mut seq = base.clone();
                for (t, row) in seq.continuous.iter_mut().enumerate() {
                    if let (TokenType::Position, Some(a)) = (seq.type_tags[t], seq.atom_index[t]) {
                        row[..3].copy_from_slice(&positions[a as usize]);
                    }
                }
                seq
            }
        };
        let p = match self.kind {
            ForceKind::Direct => self.model.predict_energy_forces(&seq)?,
            ForceKind::Conservative => self.model.conservative_forces(&seq)?,
        };
        Ok((p.energy, p.forces))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdState {
    pub positions: Vec<Vec3>,
    /// Å per internal time unit.
    pub velocities: Vec<Vec3>,
    /// amu.
    pub masses: Vec<f64>,
    pub atomic_numbers: Vec<u32>,
    pub charge: i32,
    pub spin: u32,
    /// Forces and potential energy at the current positions.
    pub forces: Vec<Vec3>,
    pub potential: f64,
}

fn finite3(v: &[Vec3]) -> bool {
    v.iter().flatten().all(|x| x.is_finite())
}

impl MdState {
    /// State at rest with element masses; forces evaluated once.
    pub fn from_frame<P: ForceProvider + ?Sized>(frame: &MolecularFrame, provider: &P) -> Result<Self, MdError> {
        let masses = frame
            .atomic_numbers
            .iter()
            .map(|&z| elements::mass(z).ok_or_else(|| MdError::InvalidArgument(format!("element {z}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mut s = Self {
            positions: frame.positions.clone(),
            velocities: vec![[0.0; 3]; frame.n_atoms()],
            masses,
            atomic_numbers: frame.atomic_numbers.clone(),
            charge: frame.charge,
            spin: frame.spin,
            forces: Vec::new(),
            potential: 0.0,
        };
        s.refresh_forces(provider, 0)?;
        Ok(s)
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.len()
    }

    pub fn refresh_forces<P: ForceProvider + ?Sized>(&mut self, provider: &P, step: usize) -> Result<(), MdError> {
        let (e, f) = provider
            .compute(&self.positions, &self.atomic_numbers, self.charge, self.spin)
            .map_err(|e| MdError::Provider {
                step,
                message: e.to_string(),
            })?;
        if f.len() != self.n_atoms() {
            return Err(MdError::Provider {
                step,
                message: format!("{} force rows for {} atoms", f.len(), self.n_atoms()),
            });
        }
        if !e.is_finite() || !finite3(&f) {
            return Err(MdError::NonFinite(step));
        }
        self.potential = e;
        self.forces = f;
        Ok(())
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.velocities
            .iter()
            .zip(&self.masses)
            .map(|(v, m)| 0.5 * m * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]))
            .sum()
    }

    pub fn total_energy(&self) -> f64 {
        self.potential + self.kinetic_energy()
    }

    /// Instantaneous temperature `2·KE / (3·n·k_B)`.
    pub fn temperature(&self) -> f64 {
        2.0 * self.kinetic_energy() / (3.0 * self.n_atoms() as f64 * K_B)
    }

    pub fn to_frame(&self) -> MolecularFrame {
        MolecularFrame {
            atomic_numbers: self.atomic_numbers.clone(),
            positions: self.positions.clone(),
            forces: Some(self.forces.clone()),
            energy: Some(self.potential),
            charge: self.charge,
            spin: self.spin,
        }
    }

    fn kick(&mut self, h: f64) {
        for ((v, f), m) in self.velocities.iter_mut().zip(&self.forces).zip(&self.masses) {
            for k in 0..3 {
                v[k] += h * f[k] / m;
            }
        }
    }

    fn drift(&mut self, h: f64) {
        for (x, v) in self.positions.iter_mut().zip(&self.velocities) {
            for k in 0..3 {
                x[k] += h * v[k];
            }
        }
    }

    fn check(&self, step: usize) -> Result<(), MdError> {
        if finite3(&self.positions) && finite3(&self.velocities) {
            Ok(())
        } else {
            Err(MdError::NonFinite(step))
        }
    }
}

/// Maxwell–Boltzmann velocities at `temperature` with zero total momentum.
pub fn maxwell_boltzmann<G: Rng + ?Sized>(state: &mut MdState, temperature: f64, rng: &mut G) {
    for (v, m) in state.velocities.iter_mut().zip(&state.masses) {
        let s = (K_B * temperature / m).sqrt();
        for c in v.iter_mut() {
            *c = s * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let total_mass: f64 = state.masses.iter().sum();
    let mut p = [0.0; 3];
    for (v, m) in state.velocities.iter().zip(&state.masses) {
        for k in 0..3 {
            p[k] += m * v[k];
        }
    }
    for v in state.velocities.iter_mut() {
        for k in 0..3 {
            v[k] -= p[k] / total_mass;
        }
    }
}

fn internal_dt(dt_fs: f64) -> Result<f64, MdError> {
    if !(dt_fs > 0.0 && dt_fs.is_finite()) {
        return Err(MdError::InvalidArgument(format!("timestep {dt_fs} fs")));
    }
    Ok(dt_fs / fs_per_time_unit())
}

/// Kick–drift–force–kick.
pub fn velocity_verlet_step<P: ForceProvider + ?Sized>(
    state: &mut MdState,
    provider: &P,
    dt_fs: f64,
    step: usize,
) -> Result<(), MdError> {
    let dt = internal_dt(dt_fs)?;
    state.kick(0.5 * dt);
    state.drift(dt);
    state.check(step)?;
    state.refresh_forces(provider, step)?;
    state.kick(0.5 * dt);
    state.check(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Langevin {
    /// Kelvin.
    pub temperature: f64,
    /// fs⁻¹.
    pub friction: f64,
}

/// BAOAB splitting: half kick, half drift, Ornstein–Uhlenbeck velocity
/// update, half drift, force, half kick.
pub fn langevin_step<P: ForceProvider + ?Sized, G: Rng + ?Sized>(
    state: &mut MdState,
    provider: &P,
    dt_fs: f64,
    thermostat: Langevin,
    rng: &mut G,
    step: usize,
) -> Result<(), MdError> {
    let dt = internal_dt(dt_fs)?;
    if !(thermostat.temperature >= 0.0) || !(thermostat.friction >= 0.0) {
        return Err(MdError::InvalidArgument("temperature and friction must be >= 0".into()));
    }
    let c1 = (-thermostat.friction * dt_fs).exp();
    let c2 = (1.0 - c1 * c1).max(0.0).sqrt();
    state.kick(0.5 * dt);
    state.drift(0.5 * dt);
    for (v, m) in state.velocities.iter_mut().zip(&state.masses) {
        let s = c2 * (K_B * thermostat.temperature / m).sqrt();
        for c in v.iter_mut() {
            let xi: f64 = rng.sample(StandardNormal);
            *c = c1 * *c + s * xi;
        }
    }
    state.drift(0.5 * dt);
    state.check(step)?;
    state.refresh_forces(provider, step)?;
    state.kick(0.5 * dt);
    state.check(step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub step: usize,
    pub positions: Vec<Vec3>,
    pub potential: f64,
    pub kinetic: f64,
}

impl Sample {
    pub fn total(&self) -> f64 {
        self.potential + self.kinetic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt_fs: f64,
    pub stride: usize,
    pub thermostat: Option<Langevin>,
    pub atomic_numbers: Vec<u32>,
    pub samples: Vec<Sample>,
    /// Set when the run stopped early on a non-finite state or provider failure.
    pub unstable: Option<String>,
}

impl Trajectory {
    pub fn mean_kinetic(&self) -> f64 {
        self.samples.iter().map(|s| s.kinetic).sum::<f64>() / self.samples.len().max(1) as f64
    }

    pub fn mean_temperature(&self) -> f64 {
        2.0 * self.mean_kinetic() / (3.0 * self.atomic_numbers.len() as f64 * K_B)
    }

    pub fn frames(&self) -> Vec<MolecularFrame> {
        self.samples
            .iter()
            .map(|s| MolecularFrame {
                atomic_numbers: self.atomic_numbers.clone(),
                positions: s.positions.clone(),
                forces: None,
                energy: Some(s.total()),
                charge: 0,
                spin: 0,
            })
            .collect()
    }

    /// Extended-xyz with the total energy of each sample.
    pub fn to_xyz(&self) -> String {
        write_xyz(&self.frames())
    }
}

fn sample(state: &MdState, step: usize) -> Sample {
    Sample {
        step,
        positions: state.positions.clone(),
        potential: state.potential,
        kinetic: state.kinetic_energy(),
    }
}

/// Integrate `n_steps`, sampling step 0 and every `stride`-th step.
/// A failure ends the run and returns the partial trajectory flagged
/// unstable.
pub fn run_md<P: ForceProvider + ?Sized, G: Rng + ?Sized>(
    initial: &MdState,
    provider: &P,
    dt_fs: f64,
    n_steps: usize,
    stride: usize,
    thermostat: Option<Langevin>,
    rng: &mut G,
) -> Result<(Trajectory, MdState), MdError> {
    if stride == 0 {
        return Err(MdError::InvalidArgument("stride must be positive".into()));
    }
    internal_dt(dt_fs)?;
    let mut state = initial.clone();
    let mut traj = Trajectory {
        dt_fs,
        stride,
        thermostat,
        atomic_numbers: state.atomic_numbers.clone(),
        samples: vec![sample(&state, 0)],
        unstable: None,
    };
    for step in 1..=n_steps {
        let r = match thermostat {
            Some(t) => langevin_step(&mut state, provider, dt_fs, t, rng, step),
            None => velocity_verlet_step(&mut state, provider, dt_fs, step),
        };
        if let Err(e) = r {
            traj.unstable = Some(e.to_string());
            break;
        }
        if step % stride == 0 {
            traj.samples.push(sample(&state, step));
        }
    }
    Ok((traj, state))
}

pub fn run_nve<P: ForceProvider + ?Sized>(
    initial: &MdState,
    provider: &P,
    dt_fs: f64,
    n_steps: usize,
    stride: usize,
) -> Result<(Trajectory, MdState), MdError> {
    let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    run_md(initial, provider, dt_fs, n_steps, stride, None, &mut unused)
}

pub fn run_nvt<P: ForceProvider + ?Sized, G: Rng + ?Sized>(
    initial: &MdState,
    provider: &P,
    dt_fs: f64,
    n_steps: usize,
    stride: usize,
    thermostat: Langevin,
    rng: &mut G,
) -> Result<(Trajectory, MdState), MdError> {
    run_md(initial, provider, dt_fs, n_steps, stride, Some(thermostat), rng)
}

/// `max_t |E(t) − E(0)| / max(|E(0)|, 1e-12)` over total energies.
pub fn energy_drift(traj: &Trajectory) -> Result<f64, MdError> {
    let first = traj.samples.first().ok_or(MdError::EmptyTrajectory)?;
    let e0 = first.total();
    let max_dev = traj
        .samples
        .iter()
        .map(|s| (s.total() - e0).abs())
        .fold(0.0, f64::max);
    Ok(max_dev / e0.abs().max(1e-12))
}

/// Pair-distance distribution on uniform bins over `[0, r_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    pub r_max: f64,
    /// Probability mass per bin.
    pub mass: Vec<f64>,
}

impl DistanceHistogram {
    pub fn bin_width(&self) -> f64 {
        self.r_max / self.mass.len() as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.mass.len()).map(|k| (k as f64 + 0.5) * w).collect()
    }

    /// Density `h(r)` per bin (mass / width).
    pub fn density(&self) -> Vec<f64> {
        let w = self.bin_width();
        self.mass.iter().map(|m| m / w).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("r,h\n");
        for (r, h) in self.centers().iter().zip(self.density()) {
            s.push_str(&format!("{r},{h}\n"));
        }
        s
    }
}

/// `h(r) = 1/(n(n−1)) Σ_{i≠j} δ(r − |X_i − X_j|)` averaged over samples,
/// with the delta realized as a bin indicator. Pairs at or beyond `r_max`
/// are dropped.
pub fn h_of_r_frames(frames: &[Vec<Vec3>], r_max: f64, n_bins: usize) -> Result<DistanceHistogram, MdError> {
    if !(r_max > 0.0) || n_bins == 0 {
        return Err(MdError::InvalidArgument("r_max > 0 and n_bins > 0 required".into()));
    }
    if frames.is_empty() {
        return Err(MdError::EmptyTrajectory);
    }
    let width = r_max / n_bins as f64;
    let mut mass = vec![0.0; n_bins];
    for pos in frames {
        let n = pos.len();
        if n < 2 {
            continue;
        }
        let w = 1.0 / (n * (n - 1)) as f64 / frames.len() as f64;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let r = crate::data::distance(&pos[i], &pos[j]);
                if r < r_max {
                    mass[((r / width) as usize).min(n_bins - 1)] += w;
                }
            }
        }
    }
    Ok(DistanceHistogram { r_max, mass })
}

pub fn h_of_r(traj: &Trajectory, r_max: f64, n_bins: usize) -> Result<DistanceHistogram, MdError> {
    let frames: Vec<Vec<Vec3>> = traj.samples.iter().map(|s| s.positions.clone()).collect();
    h_of_r_frames(&frames, r_max, n_bins)
}

/// `Σ_bins Δr · |h_a(r) − h_b(r)|`.
pub fn h_mae(a: &DistanceHistogram, b: &DistanceHistogram) -> Result<f64, MdError> {
    if a.mass.len() != b.mass.len() || a.r_max != b.r_max {
        return Err(MdError::BinningMismatch);
    }
    let w = a.bin_width();
    Ok(a.density()
        .iter()
        .zip(b.density())
        .map(|(x, y)| w * (x - y).abs())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn argon(positions: Vec<Vec3>) -> MolecularFrame {
        MolecularFrame::new(vec![18; positions.len()], positions).unwrap()
    }

    #[test]
    fn time_unit_constant() {
        assert!((fs_per_time_unit() - 10.180_505).abs() < 1e-5);
    }

    #[test]
    fn free_motion() {
        let frame = MolecularFrame::new(vec![18], vec![[0.0; 3]]).unwrap();
        let zero = HarmonicWell { k: 0.0 };
        let mut s = MdState::from_frame(&frame, &zero).unwrap();
        s.velocities[0] = [0.01, -0.02, 0.03];
        velocity_verlet_step(&mut s, &zero, fs_per_time_unit(), 1).unwrap();
        assert_eq!(s.positions[0], [0.01, -0.02, 0.03]);
        assert_eq!(s.velocities[0], [0.01, -0.02, 0.03]);
    }

    #[test]
    fn harmonic_period() {
        let k = 0.5;
        let frame = MolecularFrame::new(vec![18], vec![[1.0, 0.0, 0.0]]).unwrap();
        let well = HarmonicWell { k };
        let s0 = MdState::from_frame(&frame, &well).unwrap();
        let period_units = 2.0 * std::f64::consts::PI * (s0.masses[0] / k).sqrt();
        let period_fs = period_units * fs_per_time_unit();
        let dt = period_fs / 1000.0;
        let mut s = s0.clone();
        let mut prev_v = 0.0;
        let mut crossings = Vec::new();
        for step in 1..=3000 {
            velocity_verlet_step(&mut s, &well, dt, step).unwrap();
            let v = s.velocities[0][0];
            // velocity sign change from negative to positive marks x minimum
            if prev_v < 0.0 && v >= 0.0 {
                let frac = prev_v / (prev_v - v);
                crossings.push((step as f64 - 1.0 + frac) * dt);
            }
            prev_v = v;
        }
        assert!(crossings.len() >= 2);
        let measured = crossings[1] - crossings[0];
        assert!((measured / period_fs - 1.0).abs() < 1e-3, "{measured} vs {period_fs}");
    }

    #[test]
    fn langevin_limit_matches_verlet() {
        let lj = LennardJones::default();
        let frame = argon(vec![[0.0; 3], [3.9, 0.0, 0.0], [1.8, 3.3, 0.0]]);
        let mut a = MdState::from_frame(&frame, &lj).unwrap();
        maxwell_boltzmann(&mut a, 50.0, &mut ChaCha8Rng::seed_from_u64(0));
        let mut b = a.clone();
        let t = Langevin {
            temperature: 0.0,
            friction: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for step in 1..=200 {
            velocity_verlet_step(&mut a, &lj, 1.0, step).unwrap();
            langevin_step(&mut b, &lj, 1.0, t, &mut rng, step).unwrap();
        }
        for (x, y) in a.positions.iter().flatten().zip(b.positions.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_removed() {
        let frame = argon(vec![[0.0; 3], [4.0, 0.0, 0.0], [0.0, 4.0, 0.0]]);
        let mut s = MdState::from_frame(&frame, &LennardJones::default()).unwrap();
        maxwell_boltzmann(&mut s, 300.0, &mut ChaCha8Rng::seed_from_u64(3));
        for k in 0..3 {
            let p: f64 = s.velocities.iter().zip(&s.masses).map(|(v, m)| m * v[k]).sum();
            assert!(p.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_single_sample_and_stride() {
        let lj = LennardJones::default();
        let frame = argon(vec![[0.0; 3], [3.8, 0.0, 0.0]]);
        let s = MdState::from_frame(&frame, &lj).unwrap();
        let (t, _) = run_nve(&s, &lj, 1.0, 0, 1).unwrap();
        assert_eq!(t.samples.len(), 1);
        let (t, _) = run_nve(&s, &lj, 1.0, 100, 10).unwrap();
        assert_eq!(t.samples.len(), 11);
        assert!(t.samples.iter().enumerate().all(|(k, x)| x.step == 10 * k));
    }

    #[test]
    fn dimer_histogram() {
        let h = h_of_r_frames(&[vec![[0.0; 3], [0.0, 0.0, 2.0]]], 10.0, 200).unwrap();
        assert!((h.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h.mass[40], 1.0);
        assert_eq!(h_mae(&h, &h).unwrap(), 0.0);
        assert!(h_of_r_frames(&[vec![[0.0; 3]]], 0.0, 10).is_err());
    }

    #[test]
    fn drift_of_ramp() {
        let mk = |e: f64, step| Sample {
            step,
            positions: vec![],
            potential: e,
            kinetic: 0.0,
        };
        let t = Trajectory {
            dt_fs: 1.0,
            stride: 1,
            thermostat: None,
            atomic_numbers: vec![],
            samples: (0..5).map(|k| mk(-2.0 + 0.1 * k as f64, k)).collect(),
            unstable: None,
        };
        assert!((energy_drift(&t).unwrap() - 0.2).abs() < 1e-12);
    }
}
