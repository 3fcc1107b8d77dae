//! Graph-free transformer over dual sequences.
//!
//! `h_t = E[token_t] + W_cont · c_t` (no positional term), followed by
//! pre-norm blocks of multi-head self-attention and a SiLU-gated feed-forward
//! network. Pre-training reads logits from a linear head under a causal mask;
//! fine-tuning runs bidirectionally and reads per-atom energies and forces from
//! gated MLP heads at each atom's position token.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{NnError, Real, Tape, Tensor, Var};
use crate::tokenizer::{DualSequence, Mode, TokenType, CONTINUOUS_WIDTH};
use crate::train::EnergyReference;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence lacks an atom map for atom {0}")]
    MissingAtomMap(usize),
    #[error("expected a {expected:?}-mode sequence")]
    WrongMode { expected: Mode },
    #[error("non-finite energy {0}")]
    NonFiniteEnergy(f64),
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub intermediate_size: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub continuous_width: usize,
    pub precision: Precision,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            n_layers: 4,
            intermediate_size: 256,
            n_heads: 4,
            vocab_size: 7272,
            continuous_width: CONTINUOUS_WIDTH,
            precision: Precision::F32,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            self.hidden_dim,
            self.intermediate_size,
            self.n_heads,
            self.vocab_size,
            self.continuous_width,
        ];
        if positive.contains(&0) {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

/// Which parameters are initialised to zero / one / random.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Parameter layout: `(name, rows, cols, init, is_embedding)`.
fn layout(c: &ModelConfig) -> Vec<(String, usize, usize, Init, bool)> {
    let (d, i, v) = (c.hidden_dim, c.intermediate_size, c.vocab_size);
    let mut out = vec![
        ("embed".to_string(), v, d, Init::Normal, true),
        ("cont_proj".to_string(), c.continuous_width, d, Init::Normal, false),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.push((p("attn_norm"), 1, d, Init::Ones, false));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((p(w), d, d, Init::Normal, false));
        }
        out.push((p("ffn_norm"), 1, d, Init::Ones, false));
        out.push((p("w_gate"), d, i, Init::Normal, false));
        out.push((p("w_up"), d, i, Init::Normal, false));
        out.push((p("w_down"), i, d, Init::Normal, false));
    }
    out.push(("final_norm".into(), 1, d, Init::Ones, false));
    out.push(("lm_head".into(), d, v, Init::Normal, true));
    for (head, width) in [("energy_head", 1), ("force_head", 3)] {
        out.push((format!("{head}.w_gate"), d, d, Init::Normal, false));
        out.push((format!("{head}.w_up"), d, d, Init::Normal, false));
        out.push((format!("{head}.w_out"), d, width, Init::Zeros, false));
    }
    out
}

/// Closed-form `(total, non_embedding)` parameter counts. The embedding table
/// and the logit head are the embedding parameters.
pub fn count_params(config: &ModelConfig) -> (usize, usize) {
    let (d, i, v) = (config.hidden_dim, config.intermediate_size, config.vocab_size);
    let per_layer = 2 * d + 4 * d * d + 3 * d * i;
    let heads = (2 * d * d + d) + (2 * d * d + 3 * d);
    let non_embedding = config.continuous_width * d + config.n_layers * per_layer + d + heads;
    (non_embedding + 2 * v * d, non_embedding)
}

/// Training-compute estimate `6 · N · tokens` with N the non-embedding count.
pub fn estimate_flops(config: &ModelConfig, n_tokens: f64) -> f64 {
    6.0 * count_params(config).1 as f64 * n_tokens
}

/// Scales and offset that map head outputs to physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCalibration {
    pub energy_scale: f64,
    pub force_scale: f64,
    pub reference: EnergyReference,
}

impl Default for HeadCalibration {
    fn default() -> Self {
        Self {
            energy_scale: 1.0,
            force_scale: 1.0,
            reference: EnergyReference::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<R> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<R>>,
}

impl<R: Real> ModelParameters<R> {
    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Post-softmax attention per layer and head, `T × T` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor<f64>>>,
}

impl AttentionRecord {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    pub fn seq_len(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, |t| t.rows)
    }

    /// Head-averaged attention of one layer.
    pub fn head_mean(&self, layer: usize) -> Tensor<f64> {
        let heads = &self.layers[layer];
        let mut out = Tensor::zeros(heads[0].rows, heads[0].cols);
        for h in heads {
            out.add_assign(h);
        }
        out.scale_in_place(1.0 / heads.len() as f64);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<R> {
    pub config: ModelConfig,
    pub params: ModelParameters<R>,
    pub calibration: HeadCalibration,
}

/// Parameters placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Concatenated sequences of one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub continuous: Vec<f64>,
    /// `(offset, length)` of every sequence.
    pub segments: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new(seqs: &[&DualSequence]) -> Self {
        let mut ids = Vec::new();
        let mut continuous = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            segments.push((ids.len(), s.len()));
            ids.extend(s.token_ids.iter().map(|&i| i as usize));
            for row in &s.continuous {
                continuous.extend_from_slice(row);
            }
        }
        Self {
            ids,
            continuous,
            segments,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.ids.len()
    }
}

/// Outputs of the fine-tuning heads on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// `B × 1` total energies (eV) including the reference.
    pub energy: Var,
    /// `A × 3` forces (eV/Å) for all atoms of the batch in order.
    pub forces: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub energy: f64,
    pub forces: Vec<[f64; 3]>,
}

fn causal_mask(t: usize) -> Vec<bool> {
    let mut m = vec![false; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            m[i * t + j] = true;
        }
    }
    m
}

pub fn init_model<R: Real, G: Rng + ?Sized>(
    config: &ModelConfig,
    rng: &mut G,
) -> Result<Model<R>, ModelError> {
    config.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, rows, cols, init, _) in layout(config) {
        let t = match init {
            Init::Normal => Tensor::truncated_normal(rows, cols, 0.02, rng),
            Init::Ones => Tensor::filled(rows, cols, R::one()),
            Init::Zeros => Tensor::zeros(rows, cols),
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(Model {
        config: *config,
        params: ModelParameters { names, tensors },
        calibration: HeadCalibration::default(),
    })
}

struct Ids {
    embed: usize,
    cont: usize,
    layers: Vec<[usize; 9]>,
    final_norm: usize,
    lm_head: usize,
    energy: [usize; 3],
    force: [usize; 3],
}

impl<R: Real> Model<R> {
    fn ids(&self) -> Ids {
        // Indices follow `layout` order.
        let l = self.config.n_layers;
        let layers = (0..l)
            .map(|k| std::array::from_fn(|j| 2 + 9 * k + j))
            .collect();
        let base = 2 + 9 * l;
        Ids {
            embed: 0,
            cont: 1,
            layers,
            final_norm: base,
            lm_head: base + 1,
            energy: [base + 2, base + 3, base + 4],
            force: [base + 5, base + 6, base + 7],
        }
    }

    /// Indices of parameters counted as embedding parameters.
    pub fn embedding_param_indices(&self) -> Vec<usize> {
        let ids = self.ids();
        vec![ids.embed, ids.lm_head]
    }

    /// Put parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> Bound {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn check_ids(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.ids.is_empty() || batch.segments.iter().any(|s| s.1 == 0) {
            return Err(ModelError::EmptySequence);
        }
        if let Some(&id) = batch.ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id: id as u32,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// `E[token] + W_cont · c` for every token. `continuous` overrides the
    /// batch's continuous stream (used to differentiate w.r.t. positions).
    pub fn embed_inputs(
        &self,
        tape: &mut Tape<R>,
        bound: &Bound,
        batch: &Batch,
        continuous: Option<Var>,
    ) -> Result<Var, ModelError> {
        self.check_ids(batch)?;
        let ids = self.ids();
        let e = tape.embedding_lookup(bound.vars[ids.embed], &batch.ids)?;
        let c = match continuous {
            Some(v) => v,
            None => tape.constant(Tensor::from_f64(
                batch.n_tokens(),
                self.config.continuous_width,
                &batch.continuous,
            )),
        };
        let proj = tape.matmul(c, bound.vars[ids.cont])?;
        Ok(tape.add(e, proj)?)
    }

    /// Transformer trunk; returns final-normed hidden states `N × d` and,
    /// when `capture`, one attention record per sequence.
    pub fn trunk(
        &self,
        tape: &mut Tape<R>,
        bound: &Bound,
        batch: &Batch,
        causal: bool,
        capture: bool,
        continuous: Option<Var>,
    ) -> Result<(Var, Option<Vec<AttentionRecord>>), ModelError> {
        let ids = self.ids();
        let cfg = &self.config;
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let scale = R::of(1.0 / (dh as f64).sqrt());
        let mut x = self.embed_inputs(tape, bound, batch, continuous)?;
        let mut records: Option<Vec<AttentionRecord>> = capture.then(|| {
            batch
                .segments
                .iter()
                .map(|_| AttentionRecord {
                    layers: Vec::with_capacity(cfg.n_layers),
                })
                .collect()
        });
        let masks: Vec<Option<Vec<bool>>> = batch
            .segments
            .iter()
            .map(|&(_, t)| causal.then(|| causal_mask(t)))
            .collect();
        for layer in &ids.layers {
            let v = |k: usize| bound.vars[layer[k]];
            let h = tape.rms_norm(x, v(0), cfg.norm_eps)?;
            let q = tape.matmul(h, v(1))?;
            let k = tape.matmul(h, v(2))?;
            let val = tape.matmul(h, v(3))?;
            let mut seg_outs = Vec::with_capacity(batch.segments.len());
            if let Some(recs) = records.as_mut() {
                for r in recs.iter_mut() {
                    r.layers.push(Vec::with_capacity(nh));
                }
            }
            for (s, &(off, t)) in batch.segments.iter().enumerate() {
                let mut head_outs = Vec::with_capacity(nh);
                for hd in 0..nh {
                    let qs = tape.slice(q, off, t, hd * dh, dh)?;
                    let ks = tape.slice(k, off, t, hd * dh, dh)?;
                    let vs = tape.slice(val, off, t, hd * dh, dh)?;
                    let scores = tape.matmul_t(qs, ks, false, true)?;
                    let mut scores = tape.scale(scores, scale);
                    if let Some(mask) = &masks[s] {
                        scores = tape.masked_fill(scores, mask)?;
                    }
                    let p = tape.softmax_lastdim(scores);
                    if let Some(recs) = records.as_mut() {
                        let pv = tape.value(p);
                        recs[s]
                            .layers
                            .last_mut()
                            .expect("layer pushed")
                            .push(pv.cast());
                    }
                    head_outs.push(tape.matmul(p, vs)?);
                }
                seg_outs.push(if nh == 1 {
                    head_outs[0]
                } else {
                    tape.concat_cols(&head_outs)?
                });
            }
            let attn = if seg_outs.len() == 1 {
                seg_outs[0]
            } else {
                tape.concat_rows(&seg_outs)?
            };
            let o = tape.matmul(attn, v(4))?;
            x = tape.add(x, o)?;
            let h = tape.rms_norm(x, v(5), cfg.norm_eps)?;
            let g = tape.matmul(h, v(6))?;
            let u = tape.matmul(h, v(7))?;
            let a = tape.silu_gate(g, u)?;
            let o = tape.matmul(a, v(8))?;
            x = tape.add(x, o)?;
        }
        let x = tape.rms_norm(x, bound.vars[ids.final_norm], cfg.norm_eps)?;
        Ok((x, records))
    }

    /// `N × V` next-token logits under the causal mask.
    pub fn logits(
        &self,
        tape: &mut Tape<R>,
        bound: &Bound,
        batch: &Batch,
        capture: bool,
    ) -> Result<(Var, Option<Vec<AttentionRecord>>), ModelError> {
        let (h, rec) = self.trunk(tape, bound, batch, true, capture, None)?;
        let logits = tape.matmul(h, bound.vars[self.ids().lm_head])?;
        Ok((logits, rec))
    }

    fn gated_head(
        &self,
        tape: &mut Tape<R>,
        bound: &Bound,
        x: Var,
        w: [usize; 3],
    ) -> Result<Var, ModelError> {
        let g = tape.matmul(x, bound.vars[w[0]])?;
        let u = tape.matmul(x, bound.vars[w[1]])?;
        let a = tape.silu_gate(g, u)?;
        Ok(tape.matmul(a, bound.vars[w[2]])?)
    }

    /// Energy and force heads for a batch of fine-tuning sequences.
    pub fn heads(
        &self,
        tape: &mut Tape<R>,
        bound: &Bound,
        seqs: &[&DualSequence],
        batch: &Batch,
        continuous: Option<Var>,
    ) -> Result<HeadOutputs, ModelError> {
        let (h, _) = self.trunk(tape, bound, batch, false, false, continuous)?;
        let mut rows = Vec::new();
        let mut owner = Vec::new();
        let mut reference = Vec::with_capacity(seqs.len());
        for (s, (seq, &(off, _))) in seqs.iter().zip(&batch.segments).enumerate() {
            let readout = seq.readout_indices();
            if let Some(a) = readout.iter().position(|&r| r == usize::MAX) {
                return Err(ModelError::MissingAtomMap(a));
            }
            rows.extend(readout.iter().map(|r| off + r));
            owner.extend(std::iter::repeat_n(s, readout.len()));
            reference.push(self.calibration.reference.predict_sequence(seq));
        }
        let atoms = tape.embedding_lookup(h, &rows)?;
        let ids = self.ids();
        let e_atom = self.gated_head(tape, bound, atoms, ids.energy)?;
        let f_atom = self.gated_head(tape, bound, atoms, ids.force)?;
        let mut sum = Tensor::zeros(seqs.len(), rows.len());
        for (a, &s) in owner.iter().enumerate() {
            sum.set(s, a, R::one());
        }
        let sum = tape.constant(sum);
        let e = tape.matmul(sum, e_atom)?;
        let e = tape.scale(e, R::of(self.calibration.energy_scale));
        let offset = tape.constant(Tensor::from_f64(seqs.len(), 1, &reference));
        let energy = tape.add(e, offset)?;
        let forces = tape.scale(f_atom, R::of(self.calibration.force_scale));
        Ok(HeadOutputs { energy, forces })
    }

    fn single(seq: &DualSequence, mode: Mode) -> Result<Batch, ModelError> {
        if seq.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if seq.mode != mode {
            return Err(ModelError::WrongMode { expected: mode });
        }
        Ok(Batch::new(&[seq]))
    }

    /// Next-token logits `T × V` (f64) and optional attention capture.
    pub fn forward_causal(
        &self,
        seq: &DualSequence,
        capture_attention: bool,
    ) -> Result<(Tensor<f64>, Option<AttentionRecord>), ModelError> {
        let batch = Self::single(seq, Mode::Pretrain)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (l, rec) = self.logits(&mut tape, &bound, &batch, capture_attention)?;
        Ok((tape.value(l).cast(), rec.map(|mut r| r.remove(0))))
    }

    /// Final hidden states `T × d` under full attention.
    pub fn forward_bidirectional(
        &self,
        seq: &DualSequence,
        capture_attention: bool,
    ) -> Result<(Tensor<f64>, Option<AttentionRecord>), ModelError> {
        let batch = Self::single(seq, Mode::Finetune)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (h, rec) = self.trunk(&mut tape, &bound, &batch, false, capture_attention, None)?;
        Ok((tape.value(h).cast(), rec.map(|mut r| r.remove(0))))
    }

    /// Direct-head energy (eV) and forces (eV/Å) for a batch.
    pub fn predict_batch(&self, seqs: &[&DualSequence]) -> Result<Vec<Prediction>, ModelError> {
        for s in seqs {
            if s.mode != Mode::Finetune {
                return Err(ModelError::WrongMode {
                    expected: Mode::Finetune,
                });
            }
        }
        let batch = Batch::new(seqs);
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.heads(&mut tape, &bound, seqs, &batch, None)?;
        let e = tape.value(out.energy);
        let f = tape.value(out.forces);
        let mut row = 0;
        Ok(seqs
            .iter()
            .enumerate()
            .map(|(s, seq)| {
                let forces = (0..seq.n_atoms)
                    .map(|a| {
                        let r = f.row(row + a);
                        [r[0].f64(), r[1].f64(), r[2].f64()]
                    })
                    .collect();
                row += seq.n_atoms;
                Prediction {
                    energy: e.at(s, 0).f64(),
                    forces,
                }
            })
            .collect())
    }

    pub fn predict_energy_forces(&self, seq: &DualSequence) -> Result<Prediction, ModelError> {
        Self::single(seq, Mode::Finetune)?;
        Ok(self.predict_batch(&[seq])?.remove(0))
    }

    /// Energy and `F_i = -∂E/∂r_i`, differentiating through the continuous
    /// position channels with the discrete tokens held fixed.
    pub fn conservative_forces(&self, seq: &DualSequence) -> Result<Prediction, ModelError> {
        let batch = Self::single(seq, Mode::Finetune)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let cont = tape.leaf(Tensor::from_f64(
            batch.n_tokens(),
            self.config.continuous_width,
            &batch.continuous,
        ));
        let out = self.heads(&mut tape, &bound, &[seq], &batch, Some(cont))?;
        let energy = tape.value(out.energy).item().f64();
        if !energy.is_finite() {
            return Err(ModelError::NonFiniteEnergy(energy));
        }
        let total = tape.sum_all(out.energy);
        let grads = tape.backward(total)?;
        let mut forces = vec![[0.0; 3]; seq.n_atoms];
        if let Some(g) = grads.get(cont) {
            for (t, (tag, atom)) in seq.type_tags.iter().zip(&seq.atom_index).enumerate() {
                if let (TokenType::Position, Some(a)) = (tag, atom) {
                    for (c, f) in forces[*a as usize].iter_mut().enumerate() {
                        *f -= g.at(t, c).f64();
                    }
                }
            }
        }
        Ok(Prediction { energy, forces })
    }

    /// Parameter-count check against [`count_params`].
    pub fn count_params(&self) -> (usize, usize) {
        let emb: usize = self
            .embedding_param_indices()
            .iter()
            .map(|&i| self.params.tensors[i].len())
            .sum();
        let total = self.params.count();
        (total, total - emb)
    }

    /// Set every head output weight to zero (cold-start heads).
    pub fn zero_head_outputs(&mut self) {
        for name in ["energy_head.w_out", "force_head.w_out"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data.iter_mut().for_each(|v| *v = R::zero());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden_dim: 16,
            n_layers: 2,
            intermediate_size: 32,
            n_heads: 2,
            vocab_size: 300,
            precision: Precision::F64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn table_six_five_million_row() {
        let cfg = ModelConfig {
            hidden_dim: 256,
            n_layers: 4,
            intermediate_size: 1024,
            n_heads: 4,
            ..ModelConfig::default()
        };
        let (_, non_emb) = count_params(&cfg);
        let rel = (non_emb as f64 - 5e6).abs() / 5e6;
        assert!(rel < 0.15, "non-embedding {non_emb}");
    }

    #[test]
    fn zero_layers_counts_norm_and_heads() {
        let cfg = ModelConfig {
            n_layers: 0,
            ..tiny()
        };
        let d = cfg.hidden_dim;
        let (_, n) = count_params(&cfg);
        assert_eq!(n, 4 * d + d + (2 * d * d + d) + (2 * d * d + 3 * d));
    }

    #[test]
    fn enumeration_matches_closed_form() {
        for cfg in [tiny(), ModelConfig::default()] {
            let m: Model<f32> = init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(m.count_params(), count_params(&cfg));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a: Model<f64> = init_model(&tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: Model<f64> = init_model(&tiny(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flops_rule() {
        let cfg = tiny();
        let n = count_params(&cfg).1 as f64;
        assert_eq!(estimate_flops(&cfg, 10.0), 60.0 * n);
        assert_eq!(estimate_flops(&cfg, 20.0), 2.0 * estimate_flops(&cfg, 10.0));
    }

    #[test]
    fn invalid_head_split() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..tiny()
        };
        assert!(init_model::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
