use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    fit_energy_reference, lr_schedule, InstabilityGuard, Stage, StepRecord, TrainConfig,
    TrainError,
};
use crate::codebook::QuantileCodebook;
use crate::data::{augment_rotate, random_rotation, MolecularFrame};
use crate::model::{Batch, Bound, HeadCalibration, Model};
use crate::nn::{adam_step, clip_global_norm, AdamConfig, AdamState, Real, Tape, Tensor, Var};
use crate::tokenizer::{encode_frame, DualSequence, Mode, Vocabulary};

/// Frames plus the codebook and vocabulary used to tokenize them.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub frames: &'a [MolecularFrame],
    pub codebook: &'a QuantileCodebook,
    pub vocab: &'a Vocabulary,
}

impl TrainingSet<'_> {
    fn encode_all(&self, mode: Mode) -> Result<Vec<DualSequence>, TrainError> {
        self.frames
            .iter()
            .map(|f| Ok(encode_frame(f, self.codebook, self.vocab, mode)?))
            .collect()
    }

    fn check_labels(&self) -> Result<(), TrainError> {
        for (i, f) in self.frames.iter().enumerate() {
            if f.energy.is_none() || f.forces.is_none() {
                return Err(TrainError::MissingLabels { frame: i });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<R> {
    pub history: Vec<StepRecord>,
    pub guard: InstabilityGuard,
    pub optimizer: AdamState<R>,
    pub steps: usize,
}

impl<R> TrainReport<R> {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Token-averaged next-token cross-entropy; the last token of every
/// sequence has no successor and carries zero weight.
pub fn pretrain_loss<R: Real>(
    model: &Model<R>,
    tape: &mut Tape<R>,
    bound: &Bound,
    seqs: &[&DualSequence],
) -> Result<Var, TrainError> {
    let batch = Batch::new(seqs);
    let (logits, _) = model.logits(tape, bound, &batch, false)?;
    let mut targets = Vec::with_capacity(batch.n_tokens());
    let mut weights = Vec::with_capacity(batch.n_tokens());
    for &(off, t) in &batch.segments {
        for i in 0..t {
            if i + 1 < t {
                targets.push(batch.ids[off + i + 1]);
                weights.push(1.0);
            } else {
                targets.push(0);
                weights.push(0.0);
            }
        }
    }
    Ok(tape.cross_entropy(logits, &targets, Some(&weights))?)
}

/// `λ_E · mean_b |ΔE_b| / n_b + λ_F · mean |ΔF|`.
pub fn finetune_loss<R: Real>(
    model: &Model<R>,
    tape: &mut Tape<R>,
    bound: &Bound,
    seqs: &[&DualSequence],
    frames: &[&MolecularFrame],
    lambda_energy: f64,
    lambda_force: f64,
) -> Result<Var, TrainError> {
    let batch = Batch::new(seqs);
    let out = model.heads(tape, bound, seqs, &batch, None)?;
    let mut energies = Vec::with_capacity(frames.len());
    let mut weights = Vec::with_capacity(frames.len());
    let mut forces = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let (Some(e), Some(fs)) = (f.energy, f.forces.as_ref()) else {
            return Err(TrainError::MissingLabels { frame: i });
        };
        energies.push(e);
        weights.push(1.0 / f.n_atoms() as f64);
        forces.extend(fs.iter().flatten().copied());
    }
    let e_target = Tensor::from_f64(frames.len(), 1, &energies);
    let f_target = Tensor::from_f64(forces.len() / 3, 3, &forces);
    let le = tape.mean_abs_error(out.energy, &e_target, Some(&weights))?;
    let le = tape.scale(le, R::of(lambda_energy));
    let lf = tape.mean_abs_error(out.forces, &f_target, None)?;
    let lf = tape.scale(lf, R::of(lambda_force));
    Ok(tape.add(le, lf)?)
}

/// Energy reference plus head output scales (per-atom residual energy
/// spread and force-component RMS) fit on training frames.
pub fn fit_calibration(frames: &[MolecularFrame]) -> Result<HeadCalibration, TrainError> {
    let reference = fit_energy_reference(frames)?;
    let mut per_atom = Vec::with_capacity(frames.len());
    let mut sq = 0.0;
    let mut count = 0usize;
    for (i, f) in frames.iter().enumerate() {
        let (Some(e), Some(fs)) = (f.energy, f.forces.as_ref()) else {
            return Err(TrainError::MissingLabels { frame: i });
        };
        per_atom.push((e - reference.predict_frame(f)) / f.n_atoms() as f64);
        for v in fs.iter().flatten() {
            sq += v * v;
            count += 1;
        }
    }
    let mean = per_atom.iter().sum::<f64>() / per_atom.len() as f64;
    let var = per_atom.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / per_atom.len() as f64;
    let positive_or_one = |x: f64| if x > 1e-12 && x.is_finite() { x } else { 1.0 };
    Ok(HeadCalibration {
        energy_scale: positive_or_one(var.sqrt()),
        force_scale: positive_or_one((sq / count.max(1) as f64).sqrt()),
        reference,
    })
}

type StepLoss<'s, R> =
    dyn FnMut(&Model<R>, &mut Tape<R>, &Bound, &[usize], &mut ChaCha8Rng) -> Result<Var, TrainError> + 's;

fn train_loop<R: Real>(
    model: &mut Model<R>,
    n_frames: usize,
    config: &TrainConfig,
    step_loss: &mut StepLoss<'_, R>,
) -> Result<TrainReport<R>, TrainError> {
    config.validate()?;
    if n_frames == 0 {
        return Err(TrainError::InvalidArgument("empty training set".into()));
    }
    let total = config.total_steps(n_frames);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n_frames).collect();
    let mut optimizer = AdamState::new(&model.params.tensors, AdamConfig::default());
    let mut guard = InstabilityGuard::default();
    let mut history = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let lr = lr_schedule(step, total, config.warmup_fraction, config.peak_lr)?
                * guard.lr_multiplier;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let loss = step_loss(model, &mut tape, &bound, chunk, &mut rng)?;
            let loss_value = tape.value(loss).item().f64();
            let mut grad_norm = f64::NAN;
            let mut applied = false;
            if loss_value.is_finite() {
                let mut g = tape.backward(loss)?;
                let mut grads: Vec<Option<Tensor<R>>> =
                    bound.vars.iter().map(|v| g.take(*v)).collect();
                let clip = clip_global_norm(&mut grads, config.clip_norm)?;
                grad_norm = clip.norm;
                if clip.finite {
                    adam_step(
                        &mut model.params.tensors,
                        &grads,
                        &mut optimizer,
                        lr,
                        config.weight_decay,
                    )?;
                    applied = true;
                }
            }
            if !applied {
                guard.record_skip(step);
            }
            history.push(StepRecord {
                step,
                lr,
                loss: loss_value,
                grad_norm,
                skips: guard.total_skips,
            });
            step += 1;
        }
    }
    Ok(TrainReport {
        history,
        guard,
        optimizer,
        steps: step,
    })
}

fn check_stage(config: &TrainConfig, stage: Stage) -> Result<(), TrainError> {
    if config.stage != stage {
        return Err(TrainError::InvalidArgument(format!(
            "config stage {:?} used for {:?}",
            config.stage, stage
        )));
    }
    Ok(())
}

/// Causal next-token pre-training. With `rotation_augment`, every sampled
/// frame is rotated and re-encoded.
pub fn pretrain<R: Real>(
    model: &mut Model<R>,
    data: &TrainingSet<'_>,
    config: &TrainConfig,
) -> Result<TrainReport<R>, TrainError> {
    check_stage(config, Stage::Pretrain)?;
    data.check_labels()?;
    let encoded = data.encode_all(Mode::Pretrain)?;
    let augment = config.rotation_augment;
    let mut step_loss = |m: &Model<R>,
                         tape: &mut Tape<R>,
                         bound: &Bound,
                         idx: &[usize],
                         rng: &mut ChaCha8Rng|
     -> Result<Var, TrainError> {
        if augment {
            let seqs = idx
                .iter()
                .map(|&i| {
                    let r = random_rotation(rng);
                    let f = augment_rotate(&data.frames[i], &r);
                    Ok(encode_frame(&f, data.codebook, data.vocab, Mode::Pretrain)?)
                })
                .collect::<Result<Vec<_>, TrainError>>()?;
            let refs: Vec<&DualSequence> = seqs.iter().collect();
            pretrain_loss(m, tape, bound, &refs)
        } else {
            let refs: Vec<&DualSequence> = idx.iter().map(|&i| &encoded[i]).collect();
            pretrain_loss(m, tape, bound, &refs)
        }
    };
    train_loop(model, data.frames.len(), config, &mut step_loss)
}

/// Bidirectional energy/force fine-tuning from the model's current weights.
pub fn finetune<R: Real>(
    model: &mut Model<R>,
    data: &TrainingSet<'_>,
    config: &TrainConfig,
) -> Result<TrainReport<R>, TrainError> {
    check_stage(config, Stage::Finetune)?;
    data.check_labels()?;
    if config.fit_calibration {
        model.calibration = fit_calibration(data.frames)?;
    }
    let encoded = data.encode_all(Mode::Finetune)?;
    let (augment, le, lf) = (
        config.rotation_augment,
        config.lambda_energy,
        config.lambda_force,
    );
    let mut step_loss = |m: &Model<R>,
                         tape: &mut Tape<R>,
                         bound: &Bound,
                         idx: &[usize],
                         rng: &mut ChaCha8Rng|
     -> Result<Var, TrainError> {
        if augment {
            let frames: Vec<MolecularFrame> = idx
                .iter()
                .map(|&i| augment_rotate(&data.frames[i], &random_rotation(rng)))
                .collect();
            let seqs = frames
                .iter()
                .map(|f| Ok(encode_frame(f, data.codebook, data.vocab, Mode::Finetune)?))
                .collect::<Result<Vec<_>, TrainError>>()?;
            let refs: Vec<&DualSequence> = seqs.iter().collect();
            let frefs: Vec<&MolecularFrame> = frames.iter().collect();
            finetune_loss(m, tape, bound, &refs, &frefs, le, lf)
        } else {
            let refs: Vec<&DualSequence> = idx.iter().map(|&i| &encoded[i]).collect();
            let frefs: Vec<&MolecularFrame> = idx.iter().map(|&i| &data.frames[i]).collect();
            finetune_loss(m, tape, bound, &refs, &frefs, le, lf)
        }
    };
    train_loop(model, data.frames.len(), config, &mut step_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{fit_codebook, CodebookConfig, PositionEncoding};
    use crate::data::generate_lj_dataset;
    use crate::model::{init_model, ModelConfig, Precision};
    use crate::tokenizer::build_vocab;

    fn setup(n: usize) -> (Vec<MolecularFrame>, QuantileCodebook, Vocabulary) {
        let frames = generate_lj_dataset(n, 2, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = CodebookConfig {
            grid_bins: 3,
            force_bins: 8,
            energy_bins: 4,
            fit_position_1d: false,
            ..CodebookConfig::default()
        };
        let cb = fit_codebook(&frames, &cfg).unwrap();
        let vocab = build_vocab(&cfg, PositionEncoding::Joint);
        (frames, cb, vocab)
    }

    fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            n_layers: 1,
            intermediate_size: 32,
            n_heads: 2,
            vocab_size: vocab,
            precision: Precision::F64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn pretrain_is_deterministic_and_starts_near_uniform() {
        let (frames, cb, vocab) = setup(8);
        let data = TrainingSet {
            frames: &frames,
            codebook: &cb,
            vocab: &vocab,
        };
        let mut cfg = TrainConfig::pretrain();
        cfg.batch_size = 4;
        cfg.epochs = 2;
        let run = || {
            let mut m: Model<f64> =
                init_model(&tiny(vocab.size()), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let rep = pretrain(&mut m, &data, &cfg).unwrap();
            (m.params, rep.losses())
        };
        let (p1, l1) = run();
        let (p2, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(p1, p2);
        let ln_v = (vocab.size() as f64).ln();
        assert!((l1[0] - ln_v).abs() < 0.1 * ln_v);
    }

    #[test]
    fn zero_heads_give_mean_abs_force_loss() {
        let (frames, cb, vocab) = setup(6);
        let m: Model<f64> = init_model(&tiny(vocab.size()), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let seqs: Vec<_> = frames
            .iter()
            .map(|f| encode_frame(f, &cb, &vocab, Mode::Finetune).unwrap())
            .collect();
        let refs: Vec<&DualSequence> = seqs.iter().collect();
        let frefs: Vec<&MolecularFrame> = frames.iter().collect();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let loss = finetune_loss(&m, &mut tape, &bound, &refs, &frefs, 0.0, 1.0).unwrap();
        let comps: Vec<f64> = frames
            .iter()
            .flat_map(|f| f.forces.as_ref().unwrap().iter().flatten().copied())
            .collect();
        let mean_abs = comps.iter().map(|v| v.abs()).sum::<f64>() / comps.len() as f64;
        assert!((tape.value(loss).item() - mean_abs).abs() < 1e-15);
    }

    #[test]
    fn zero_force_weight_zeroes_force_head_gradients() {
        let (frames, cb, vocab) = setup(4);
        let mut m: Model<f64> =
            init_model(&tiny(vocab.size()), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let w = m.params.get_mut("force_head.w_out").unwrap();
        w.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f64);
        let seqs: Vec<_> = frames
            .iter()
            .map(|f| encode_frame(f, &cb, &vocab, Mode::Finetune).unwrap())
            .collect();
        let refs: Vec<&DualSequence> = seqs.iter().collect();
        let frefs: Vec<&MolecularFrame> = frames.iter().collect();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, true);
        let loss = finetune_loss(&m, &mut tape, &bound, &refs, &frefs, 1.0, 0.0).unwrap();
        let g = tape.backward(loss).unwrap();
        for name in ["force_head.w_gate", "force_head.w_up", "force_head.w_out"] {
            let k = m.params.names.iter().position(|n| n == name).unwrap();
            if let Some(t) = g.get(bound.vars[k]) {
                assert!(t.data.iter().all(|v| *v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn finetune_reduces_loss() {
        let (frames, cb, vocab) = setup(8);
        let data = TrainingSet {
            frames: &frames,
            codebook: &cb,
            vocab: &vocab,
        };
        let mut m: Model<f64> =
            init_model(&tiny(vocab.size()), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut cfg = TrainConfig::finetune();
        cfg.batch_size = 8;
        cfg.epochs = 300;
        cfg.peak_lr = 1e-2;
        cfg.rotation_augment = false;
        let rep = finetune(&mut m, &data, &cfg).unwrap();
        let l = rep.losses();
        assert!(l[l.len() - 1] < 0.7 * l[0], "{} vs {}", l[l.len() - 1], l[0]);
        assert_eq!(rep.guard.total_skips, 0);
    }
}
