use serde::{Deserialize, Serialize};

use super::{pretrain_loss, TrainError};
use crate::codebook::QuantileCodebook;
use crate::data::MolecularFrame;
use crate::model::{Model, Prediction};
use crate::nn::{Real, Tape};
use crate::tokenizer::{encode_frame, DualSequence, Mode, Vocabulary};

/// Frames per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_frames: usize,
    /// Mean absolute total-energy error per structure (meV).
    pub energy_mae_mev: f64,
    /// Mean absolute force error over atoms and components (meV/Å).
    pub force_mae_mev_per_a: f64,
    /// Cosine similarity of all predicted vs reference force components.
    pub force_cosine: f64,
    /// Standard deviation of reference force components (meV/Å).
    pub force_std_mev_per_a: f64,
    /// Mean norm of the per-frame summed predicted force (meV/Å).
    pub net_force_mev_per_a: f64,
    pub ce_loss: Option<f64>,
}

pub fn metrics_from_predictions(
    predictions: &[Prediction],
    frames: &[MolecularFrame],
) -> Result<EvalMetrics, TrainError> {
    if predictions.len() != frames.len() || frames.is_empty() {
        return Err(TrainError::InvalidArgument(format!(
            "{} predictions for {} frames",
            predictions.len(),
            frames.len()
        )));
    }
    let mut e_abs = 0.0;
    let mut net = 0.0;
    let (mut f_abs, mut dot, mut pp, mut tt) = (0.0, 0.0, 0.0, 0.0);
    let mut comps = Vec::new();
    for (i, (p, f)) in predictions.iter().zip(frames).enumerate() {
        let (Some(e), Some(fs)) = (f.energy, f.forces.as_ref()) else {
            return Err(TrainError::MissingLabels { frame: i });
        };
        if p.forces.len() != fs.len() {
            return Err(TrainError::InvalidArgument(format!(
                "frame {i}: {} predicted force rows for {} atoms",
                p.forces.len(),
                fs.len()
            )));
        }
        e_abs += (p.energy - e).abs();
        let sum = p.forces.iter().fold([0.0; 3], |s, f| [s[0] + f[0], s[1] + f[1], s[2] + f[2]]);
        net += (sum[0] * sum[0] + sum[1] * sum[1] + sum[2] * sum[2]).sqrt();
        for (a, b) in p.forces.iter().flatten().zip(fs.iter().flatten()) {
            f_abs += (a - b).abs();
            dot += a * b;
            pp += a * a;
            tt += b * b;
            comps.push(*b);
        }
    }
    let n = comps.len() as f64;
    let mean = comps.iter().sum::<f64>() / n;
    let std = (comps.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n).sqrt();
    let cosine = if pp > 0.0 && tt > 0.0 {
        dot / (pp.sqrt() * tt.sqrt())
    } else {
        0.0
    };
    Ok(EvalMetrics {
        n_frames: frames.len(),
        energy_mae_mev: 1e3 * e_abs / frames.len() as f64,
        force_mae_mev_per_a: 1e3 * f_abs / n,
        force_cosine: cosine,
        force_std_mev_per_a: 1e3 * std,
        net_force_mev_per_a: 1e3 * net / frames.len() as f64,
        ce_loss: None,
    })
}

/// Direct-head energy and force errors on labelled frames.
pub fn evaluate<R: Real>(
    model: &Model<R>,
    frames: &[MolecularFrame],
    codebook: &QuantileCodebook,
    vocab: &Vocabulary,
) -> Result<(EvalMetrics, Vec<Prediction>), TrainError> {
    let mut predictions = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(EVAL_CHUNK) {
        let seqs = chunk
            .iter()
            .map(|f| Ok(encode_frame(f, codebook, vocab, Mode::Finetune)?))
            .collect::<Result<Vec<_>, TrainError>>()?;
        let refs: Vec<&DualSequence> = seqs.iter().collect();
        predictions.extend(model.predict_batch(&refs)?);
    }
    let metrics = metrics_from_predictions(&predictions, frames)?;
    Ok((metrics, predictions))
}

/// Token-averaged next-token cross-entropy over pre-training sequences.
pub fn cross_entropy_loss<R: Real>(
    model: &Model<R>,
    seqs: &[DualSequence],
) -> Result<f64, TrainError> {
    let mut weighted = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let refs: Vec<&DualSequence> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let l = pretrain_loss(model, &mut tape, &bound, &refs)?;
        let n: usize = chunk.iter().map(|s| s.len().saturating_sub(1)).sum();
        weighted += tape.value(l).item().f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(TrainError::InvalidArgument("no predicted tokens".into()));
    }
    Ok(weighted / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> MolecularFrame {
        let mut f = MolecularFrame::new(vec![18, 18], vec![[0.0; 3], [0.0, 0.0, 3.8]]).unwrap();
        f.energy = Some(-0.0104);
        f.forces = Some(vec![[0.01, -0.02, 0.03], [-0.01, 0.02, -0.03]]);
        f
    }

    fn exact(f: &MolecularFrame) -> Prediction {
        Prediction {
            energy: f.energy.unwrap(),
            forces: f.forces.clone().unwrap(),
        }
    }

    #[test]
    fn perfect_predictions() {
        let f = frame();
        let m = metrics_from_predictions(&[exact(&f)], &[f]).unwrap();
        assert_eq!(m.energy_mae_mev, 0.0);
        assert_eq!(m.force_mae_mev_per_a, 0.0);
        assert!((m.force_cosine - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_energy_offset() {
        let f = frame();
        let mut p = exact(&f);
        p.energy += 0.25;
        let m = metrics_from_predictions(&[p.clone(), p], &[f.clone(), f]).unwrap();
        assert!((m.energy_mae_mev - 250.0).abs() < 1e-9);
    }

    #[test]
    fn missing_labels() {
        let mut f = frame();
        let p = exact(&f);
        f.forces = None;
        assert!(metrics_from_predictions(&[p], &[f]).is_err());
    }
}
