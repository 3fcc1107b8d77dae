//! Attention analytics, equivariance measurement, log-probability
//! uncertainty, and scaling-law fitting.

mod attention;
mod equivariance;
mod scaling;

use thiserror::Error;

pub use attention::{
    atom_attention_rows, attention_by_token_type, attention_by_token_type_pooled,
    attention_vs_distance, bucket_tokens, effective_radii, effective_radius, per_head_curves,
    position_pairs, radius_vs_density, Bucket, CurvePoint, DistanceCurve, PerHeadCurves,
    QuantileBuckets, TokenTypeMass,
};
pub use equivariance::{
    cosine_similarity, equivariance_cossim, equivariance_cossim_with, frame_average_forces,
    frame_average_forces_with, EquivarianceReport, FnForces, ForcePredictor, FrameAveraged,
    ModelForces,
};
pub use scaling::{
    fit_joint_scaling, fit_power_law, isoflop_curve, isoflop_optimum_closed_form, linear_fit,
    six_n, IsoFlopCurve, JointScalingFit, ScalingFit,
};

use crate::model::{Model, ModelError};
use crate::nn::Real;
use crate::tokenizer::{DualSequence, Mode, TokenizerError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{what}: {a} vs {b}")]
    LengthMismatch { what: &'static str, a: usize, b: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("{pairs} pairs cannot fill {quantiles} quantiles")]
    TooFewPairs { pairs: usize, quantiles: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// `Σ_t log softmax(logits_t)[token_{t+1}]` under the causal model.
pub fn sequence_log_prob<R: Real>(model: &Model<R>, seq: &DualSequence) -> Result<f64, AnalysisError> {
    if seq.mode != Mode::Pretrain {
        return Err(AnalysisError::InvalidArgument(
            "log-probability needs a pre-training sequence".into(),
        ));
    }
    let (logits, _) = model.forward_causal(seq, false)?;
    let mut total = 0.0;
    for t in 0..seq.len().saturating_sub(1) {
        let row = logits.row(t);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += row[seq.token_ids[t + 1] as usize] - lse;
    }
    Ok(total)
}
