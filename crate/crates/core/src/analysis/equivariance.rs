use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::codebook::QuantileCodebook;
use crate::data::{augment_rotate, random_rotation, MolecularFrame, RotationMatrix, Vec3};
use crate::model::Model;
use crate::nn::Real;
use crate::tokenizer::{encode_frame, Mode, Vocabulary};

/// Anything mapping a frame to per-atom forces.
pub trait ForcePredictor {
    fn forces(&self, frame: &MolecularFrame) -> Result<Vec<Vec3>, AnalysisError>;
}

/// Direct force head of a fine-tuned model; frames are re-tokenized per call.
pub struct ModelForces<'a, R> {
    pub model: &'a Model<R>,
    pub codebook: &'a QuantileCodebook,
    pub vocab: &'a Vocabulary,
}

impl<R: Real> ForcePredictor for ModelForces<'_, R> {
    fn forces(&self, frame: &MolecularFrame) -> Result<Vec<Vec3>, AnalysisError> {
        let seq = encode_frame(frame, self.codebook, self.vocab, Mode::Finetune)?;
        Ok(self.model.predict_energy_forces(&seq)?.forces)
    }
}

/// Wraps a closure as a predictor.
pub struct FnForces<F>(pub F);

impl<F> ForcePredictor for FnForces<F>
where
    F: Fn(&MolecularFrame) -> Vec<Vec3>,
{
    fn forces(&self, frame: &MolecularFrame) -> Result<Vec<Vec3>, AnalysisError> {
        Ok((self.0)(frame))
    }
}

/// `mean_R Rᵀ · F(R·r)` over a fixed rotation set.
pub struct FrameAveraged<'a, P: ?Sized> {
    pub inner: &'a P,
    pub rotations: Vec<RotationMatrix>,
}

impl<P: ForcePredictor + ?Sized> ForcePredictor for FrameAveraged<'_, P> {
    fn forces(&self, frame: &MolecularFrame) -> Result<Vec<Vec3>, AnalysisError> {
        frame_average_forces_with(self.inner, frame, &self.rotations)
    }
}

pub fn frame_average_forces_with<P: ForcePredictor + ?Sized>(
    predictor: &P,
    frame: &MolecularFrame,
    rotations: &[RotationMatrix],
) -> Result<Vec<Vec3>, AnalysisError> {
    if rotations.is_empty() {
        return Err(AnalysisError::InvalidArgument("no rotations to average over".into()));
    }
    let mut acc = vec![[0.0; 3]; frame.n_atoms()];
    for r in rotations {
        let f = predictor.forces(&augment_rotate(frame, r))?;
        let rt = r.transpose();
        for (a, v) in acc.iter_mut().zip(&f) {
            let back = rt.apply(v);
            for k in 0..3 {
                a[k] += back[k];
            }
        }
    }
    let s = 1.0 / rotations.len() as f64;
    acc.iter_mut().for_each(|a| a.iter_mut().for_each(|v| *v *= s));
    Ok(acc)
}

pub fn frame_average_forces<P: ForcePredictor + ?Sized, G: Rng + ?Sized>(
    predictor: &P,
    frame: &MolecularFrame,
    n_rotations: usize,
    rng: &mut G,
) -> Result<Vec<Vec3>, AnalysisError> {
    let rotations: Vec<_> = (0..n_rotations).map(|_| random_rotation(rng)).collect();
    frame_average_forces_with(predictor, frame, &rotations)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub mean_cossim: f64,
    pub per_rotation: Vec<f64>,
    /// Rotations skipped because one of the force sets was all zero.
    pub excluded: usize,
}

/// Cosine similarity of two flattened `n × 3` arrays, `None` if either is zero.
pub fn cosine_similarity(a: &[Vec3], b: &[Vec3]) -> Option<f64> {
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    (aa > 0.0 && bb > 0.0).then(|| dot / (aa * bb).sqrt())
}

/// `cossim(R·F(r), F(R·r))` for each given rotation.
pub fn equivariance_cossim_with<P: ForcePredictor + ?Sized>(
    predictor: &P,
    frame: &MolecularFrame,
    rotations: &[RotationMatrix],
) -> Result<EquivarianceReport, AnalysisError> {
    let base = predictor.forces(frame)?;
    let mut per_rotation = Vec::with_capacity(rotations.len());
    let mut excluded = 0;
    for r in rotations {
        let rotated_base: Vec<Vec3> = base.iter().map(|v| r.apply(v)).collect();
        let pred = predictor.forces(&augment_rotate(frame, r))?;
        match cosine_similarity(&rotated_base, &pred) {
            Some(c) => per_rotation.push(c),
            None => excluded += 1,
        }
    }
    if per_rotation.is_empty() {
        return Err(AnalysisError::Degenerate("all force predictions were zero".into()));
    }
    Ok(EquivarianceReport {
        mean_cossim: per_rotation.iter().sum::<f64>() / per_rotation.len() as f64,
        per_rotation,
        excluded,
    })
}

pub fn equivariance_cossim<P: ForcePredictor + ?Sized, G: Rng + ?Sized>(
    predictor: &P,
    frame: &MolecularFrame,
    n_rotations: usize,
    rng: &mut G,
) -> Result<EquivarianceReport, AnalysisError> {
    let rotations: Vec<_> = (0..n_rotations).map(|_| random_rotation(rng)).collect();
    equivariance_cossim_with(predictor, frame, &rotations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LennardJones;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame() -> MolecularFrame {
        MolecularFrame::new(
            vec![18; 3],
            vec![[0.0, 0.0, 0.0], [3.7, 0.2, 0.0], [1.5, 3.1, 0.4]],
        )
        .unwrap()
    }

    fn lj() -> FnForces<impl Fn(&MolecularFrame) -> Vec<Vec3>> {
        FnForces(|f: &MolecularFrame| LennardJones::default().energy_forces(&f.positions).1)
    }

    #[test]
    fn identity_is_exactly_one() {
        let odd = FnForces(|f: &MolecularFrame| {
            f.positions.iter().map(|p| [p[0].sin(), p[1] * p[2], 1.0]).collect()
        });
        let r = equivariance_cossim_with(&odd, &frame(), &[RotationMatrix::IDENTITY]).unwrap();
        assert_eq!(r.mean_cossim, 1.0);
    }

    #[test]
    fn exact_equivariant_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = equivariance_cossim(&lj(), &frame(), 20, &mut rng).unwrap();
        assert!((r.mean_cossim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn averaging_equivariant_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = frame();
        let plain = lj().forces(&f).unwrap();
        let avg = frame_average_forces(&lj(), &f, 8, &mut rng).unwrap();
        for (a, b) in plain.iter().flatten().zip(avg.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        let id = frame_average_forces_with(&lj(), &f, &[RotationMatrix::IDENTITY]).unwrap();
        assert_eq!(id, plain);
    }

    #[test]
    fn zero_forces_are_excluded() {
        let zero = FnForces(|f: &MolecularFrame| vec![[0.0; 3]; f.n_atoms()]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(equivariance_cossim(&zero, &frame(), 3, &mut rng).is_err());
    }
}
