use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::MolecularFrame;
use crate::tokenizer::{DualSequence, TokenType, N_SPECIAL};

/// Linear energy baseline `E ≈ Σ_Z n_Z · c_Z + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReference {
    pub coefficients: BTreeMap<u32, f64>,
    pub offset: f64,
}

impl EnergyReference {
    pub fn zero() -> Self {
        Self {
            coefficients: BTreeMap::new(),
            offset: 0.0,
        }
    }

    pub fn predict(&self, atomic_numbers: &[u32]) -> f64 {
        self.offset
            + atomic_numbers
                .iter()
                .map(|z| self.coefficients.get(z).copied().unwrap_or(0.0))
                .sum::<f64>()
    }

    pub fn predict_frame(&self, frame: &MolecularFrame) -> f64 {
        self.predict(&frame.atomic_numbers)
    }

    /// Reference for a tokenized frame, read from its element tokens.
    pub fn predict_sequence(&self, seq: &DualSequence) -> f64 {
        let zs: Vec<u32> = seq
            .token_ids
            .iter()
            .zip(&seq.type_tags)
            .filter(|(_, t)| **t == TokenType::Element)
            .map(|(&id, _)| id - N_SPECIAL + 1)
            .collect();
        self.predict(&zs)
    }
}

/// Least-squares fit over per-element counts plus a constant. A
/// rank-deficient design falls back to a mean energy per atom.
pub fn fit_energy_reference(frames: &[MolecularFrame]) -> Result<EnergyReference, TrainError> {
    if frames.is_empty() {
        return Err(TrainError::InvalidArgument("no frames for energy reference".into()));
    }
    let mut energies = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        energies.push(f.energy.ok_or(TrainError::MissingLabels { frame: i })?);
    }
    let elements: Vec<u32> = frames
        .iter()
        .flat_map(|f| f.atomic_numbers.iter().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let cols = elements.len() + 1;
    let a = DMatrix::from_fn(frames.len(), cols, |r, c| {
        if c == elements.len() {
            1.0
        } else {
            frames[r]
                .atomic_numbers
                .iter()
                .filter(|&&z| z == elements[c])
                .count() as f64
        }
    });
    let b = DVector::from_vec(energies.clone());
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > smax * 1e-10)
        .count();
    if rank == cols {
        let x = svd
            .solve(&b, smax * 1e-12)
            .map_err(|e| TrainError::InvalidArgument(e.to_string()))?;
        if x.iter().all(|v| v.is_finite()) {
            let coefficients = elements
                .iter()
                .enumerate()
                .map(|(k, &z)| (z, x[k]))
                .collect();
            return Ok(EnergyReference {
                coefficients,
                offset: x[elements.len()],
            });
        }
    }
    let atoms: usize = frames.iter().map(|f| f.n_atoms()).sum();
    let per_atom = energies.iter().sum::<f64>() / atoms as f64;
    Ok(EnergyReference {
        coefficients: elements.iter().map(|&z| (z, per_atom)).collect(),
        offset: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(zs: Vec<u32>, e: f64) -> MolecularFrame {
        let n = zs.len();
        let pos = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mut f = MolecularFrame::new(zs, pos).unwrap();
        f.energy = Some(e);
        f
    }

    #[test]
    fn exact_single_element() {
        let frames: Vec<_> = (2..7).map(|n| frame(vec![18; n], -2.0 * n as f64)).collect();
        let r = fit_energy_reference(&frames).unwrap();
        assert!((r.coefficients[&18] + 2.0).abs() < 1e-10);
        assert!(r.offset.abs() < 1e-9);
        for f in &frames {
            assert!((r.predict_frame(f) - f.energy.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn residuals_have_zero_mean() {
        let frames: Vec<_> = (0..40)
            .map(|i| {
                let n = 2 + i % 5;
                let mut zs = vec![1; n];
                zs[0] = 8;
                let noise = ((i * 37) % 11) as f64 * 0.01 - 0.05;
                frame(zs, -13.6 * (n - 1) as f64 - 75.0 + 0.3 + noise)
            })
            .collect();
        let r = fit_energy_reference(&frames).unwrap();
        let mean: f64 = frames
            .iter()
            .map(|f| f.energy.unwrap() - r.predict_frame(f))
            .sum::<f64>()
            / frames.len() as f64;
        assert!(mean.abs() < 1e-9, "mean residual {mean}");
    }

    #[test]
    fn rank_deficient_falls_back() {
        let frames = vec![frame(vec![18; 3], -3.0), frame(vec![18; 3], -3.6)];
        let r = fit_energy_reference(&frames).unwrap();
        assert_eq!(r.offset, 0.0);
        assert!((r.coefficients[&18] + 1.1).abs() < 1e-12);
    }

    #[test]
    fn missing_energy_is_error() {
        let mut f = frame(vec![1, 1], 0.0);
        f.energy = None;
        assert!(fit_energy_reference(&[f]).is_err());
    }
}
