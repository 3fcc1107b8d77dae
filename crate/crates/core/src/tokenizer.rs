//! Dual discrete/continuous sequences.
//!
//! Pre-training layout (`5n + 11` tokens with the joint grid):
//!
//! ```text
//! <BOS> [CHARGE] [SPIN] [POS] (a_Z <NUM_cell>)×n [POS_END]
//! [TARGET] <NUM_target_b> [TARGET_END] [FORCE] (<NUM_force_bx> <NUM_force_by> <NUM_force_bz>)×n [FORCE_END] <EOS>
//! ```
//!
//! Fine-tuning drops the energy and force sections and keeps `[TARGET]` as a
//! readout anchor: `<BOS> [CHARGE] [SPIN] [POS] (a_Z <NUM_cell>)×n [POS_END] [TARGET] <EOS>`,
//! `2n + 7` tokens.
//!
//! The continuous stream is `T × 4`: position tokens carry `(x, y, z)` in
//! columns 0..3, energy/force/charge/spin tokens carry their scalar in column 3,
//! every other row is zero.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{
    decode_bin, encode_value, CodebookConfig, CodebookError, PositionEncoding, QuantileCodebook,
};
use crate::data::MolecularFrame;
use crate::elements::MAX_ATOMIC_NUMBER;

pub const CONTINUOUS_WIDTH: usize = 4;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("frame has no atoms")]
    NoAtoms,
    #[error("pre-training sequence needs {0}")]
    MissingLabels(&'static str),
    #[error("grammar violation at token {index}: {message}")]
    Grammar { index: usize, message: String },
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error("record stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Pretrain,
    Finetune,
}

/// Fixed special tokens, ids `0..10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Special {
    Bos = 0,
    Eos,
    Pos,
    PosEnd,
    Target,
    TargetEnd,
    Force,
    ForceEnd,
    Charge,
    Spin,
}

pub const N_SPECIAL: u32 = 10;

impl Special {
    const ALL: [Special; 10] = [
        Special::Bos,
        Special::Eos,
        Special::Pos,
        Special::PosEnd,
        Special::Target,
        Special::TargetEnd,
        Special::Force,
        Special::ForceEnd,
        Special::Charge,
        Special::Spin,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            Special::Bos => "<BOS>",
            Special::Eos => "<EOS>",
            Special::Pos => "[POS]",
            Special::PosEnd => "[POS_END]",
            Special::Target => "[TARGET]",
            Special::TargetEnd => "[TARGET_END]",
            Special::Force => "[FORCE]",
            Special::ForceEnd => "[FORCE_END]",
            Special::Charge => "[CHARGE]",
            Special::Spin => "[SPIN]",
        }
    }
}

/// Token-type tag, stored as one byte in record streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TokenType {
    Special = 0,
    Element = 1,
    Position = 2,
    Energy = 3,
    Force = 4,
    Charge = 5,
    Spin = 6,
}

impl TokenType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Special,
            1 => Self::Element,
            2 => Self::Position,
            3 => Self::Energy,
            4 => Self::Force,
            5 => Self::Charge,
            6 => Self::Spin,
            _ => return None,
        })
    }
}

/// What a token id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special(Special),
    Element(u32),
    PositionCell(usize),
    Energy(usize),
    Force(usize),
    Position1d(usize),
}

/// Contiguous id ranges: specials, elements a_1..a_118, position cells,
/// energy bins, force bins, then (1D mode only) per-axis position bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_cells: usize,
    pub n_energy: usize,
    pub n_force: usize,
    pub n_position_1d: usize,
    pub position_encoding: PositionEncoding,
}

pub fn build_vocab(config: &CodebookConfig, position_encoding: PositionEncoding) -> Vocabulary {
    Vocabulary {
        n_cells: config.grid_cells(),
        n_energy: config.energy_bins,
        n_force: config.force_bins,
        n_position_1d: match position_encoding {
            PositionEncoding::Joint => 0,
            PositionEncoding::Axis1d => config.position_1d_bins,
        },
        position_encoding,
    }
}

impl Vocabulary {
    pub fn element_base(&self) -> u32 {
        N_SPECIAL
    }
    pub fn position_base(&self) -> u32 {
        N_SPECIAL + MAX_ATOMIC_NUMBER
    }
    pub fn energy_base(&self) -> u32 {
        self.position_base() + self.n_cells as u32
    }
    pub fn force_base(&self) -> u32 {
        self.energy_base() + self.n_energy as u32
    }
    pub fn position_1d_base(&self) -> u32 {
        self.force_base() + self.n_force as u32
    }
    pub fn size(&self) -> usize {
        self.position_1d_base() as usize + self.n_position_1d
    }

    pub fn element_token(&self, z: u32) -> u32 {
        self.element_base() + z - 1
    }
    pub fn position_token(&self, cell: usize) -> u32 {
        self.position_base() + cell as u32
    }
    pub fn energy_token(&self, bin: usize) -> u32 {
        self.energy_base() + bin as u32
    }
    pub fn force_token(&self, bin: usize) -> u32 {
        self.force_base() + bin as u32
    }
    pub fn position_1d_token(&self, bin: usize) -> u32 {
        self.position_1d_base() + bin as u32
    }

    /// Id ranges `(name, start..end)` in layout order.
    pub fn ranges(&self) -> Vec<(&'static str, std::ops::Range<u32>)> {
        let mut r = vec![
            ("special", 0..N_SPECIAL),
            ("element", self.element_base()..self.position_base()),
            ("position", self.position_base()..self.energy_base()),
            ("energy", self.energy_base()..self.force_base()),
            ("force", self.force_base()..self.position_1d_base()),
        ];
        if self.n_position_1d > 0 {
            r.push(("position_1d", self.position_1d_base()..self.size() as u32));
        }
        r
    }

    pub fn kind(&self, id: u32) -> Option<TokenKind> {
        Some(if id < N_SPECIAL {
            TokenKind::Special(Special::ALL[id as usize])
        } else if id < self.position_base() {
            TokenKind::Element(id - self.element_base() + 1)
        } else if id < self.energy_base() {
            TokenKind::PositionCell((id - self.position_base()) as usize)
        } else if id < self.force_base() {
            TokenKind::Energy((id - self.energy_base()) as usize)
        } else if id < self.position_1d_base() {
            TokenKind::Force((id - self.force_base()) as usize)
        } else if (id as usize) < self.size() {
            TokenKind::Position1d((id - self.position_1d_base()) as usize)
        } else {
            return None;
        })
    }

    /// Human-readable token text (`a_35`, `<NUM_579>`, `<NUM_target_125>`, ...).
    pub fn token_name(&self, id: u32) -> String {
        match self.kind(id) {
            Some(TokenKind::Special(s)) => s.name().to_string(),
            Some(TokenKind::Element(z)) => format!("a_{z}"),
            Some(TokenKind::PositionCell(c)) => format!("<NUM_{c}>"),
            Some(TokenKind::Energy(b)) => format!("<NUM_target_{b}>"),
            Some(TokenKind::Force(b)) => format!("<NUM_force_{b}>"),
            Some(TokenKind::Position1d(b)) => format!("<NUM_pos1d_{b}>"),
            None => format!("<UNK_{id}>"),
        }
    }

    fn tokens_per_atom(&self) -> usize {
        match self.position_encoding {
            PositionEncoding::Joint => 2,
            PositionEncoding::Axis1d => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSequence {
    pub token_ids: Vec<u32>,
    pub continuous: Vec<[f64; CONTINUOUS_WIDTH]>,
    pub type_tags: Vec<TokenType>,
    pub atom_index: Vec<Option<u32>>,
    pub mode: Mode,
    pub n_atoms: usize,
    /// Set for sequences whose continuous rows are placeholders only (e.g.
    /// sampled token streams); decoding then falls back to bin representatives.
    pub discrete_only: bool,
}

impl DualSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Index of the token whose embedding represents each atom: the first
    /// position token of the atom.
    pub fn readout_indices(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.n_atoms];
        for (t, (tag, atom)) in self.type_tags.iter().zip(&self.atom_index).enumerate() {
            if *tag == TokenType::Position {
                if let Some(a) = atom {
                    let slot = &mut out[*a as usize];
                    if *slot == usize::MAX {
                        *slot = t;
                    }
                }
            }
        }
        out
    }

    /// Indices of every position token, in atom order.
    pub fn position_token_indices(&self) -> Vec<usize> {
        self.type_tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == TokenType::Position)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn sequence_length(
    n_atoms: usize,
    mode: Mode,
    position_encoding: PositionEncoding,
) -> Result<usize, TokenizerError> {
    if n_atoms < 1 {
        return Err(TokenizerError::NoAtoms);
    }
    let per_atom = match position_encoding {
        PositionEncoding::Joint => 2,
        PositionEncoding::Axis1d => 4,
    };
    Ok(match mode {
        Mode::Pretrain => (per_atom + 3) * n_atoms + 11,
        Mode::Finetune => per_atom * n_atoms + 7,
    })
}

struct Builder {
    seq: DualSequence,
}

impl Builder {
    fn push(&mut self, id: u32, row: [f64; CONTINUOUS_WIDTH], tag: TokenType, atom: Option<u32>) {
        self.seq.token_ids.push(id);
        self.seq.continuous.push(row);
        self.seq.type_tags.push(tag);
        self.seq.atom_index.push(atom);
    }

    fn special(&mut self, s: Special) {
        self.push(s.id(), [0.0; 4], TokenType::Special, None);
    }

    fn scalar(&mut self, id: u32, value: f64, tag: TokenType, atom: Option<u32>) {
        self.push(id, [0.0, 0.0, 0.0, value], tag, atom);
    }
}

pub fn encode_frame(
    frame: &MolecularFrame,
    codebook: &QuantileCodebook,
    vocab: &Vocabulary,
    mode: Mode,
) -> Result<DualSequence, TokenizerError> {
    let n = frame.n_atoms();
    if n == 0 {
        return Err(TokenizerError::NoAtoms);
    }
    let labels = match mode {
        Mode::Pretrain => Some((
            frame.energy.ok_or(TokenizerError::MissingLabels("energy"))?,
            frame
                .forces
                .as_ref()
                .ok_or(TokenizerError::MissingLabels("forces"))?,
        )),
        Mode::Finetune => None,
    };
    let t = sequence_length(n, mode, vocab.position_encoding)?;
    let mut b = Builder {
        seq: DualSequence {
            token_ids: Vec::with_capacity(t),
            continuous: Vec::with_capacity(t),
            type_tags: Vec::with_capacity(t),
            atom_index: Vec::with_capacity(t),
            mode,
            n_atoms: n,
            discrete_only: false,
        },
    };
    b.special(Special::Bos);
    b.scalar(Special::Charge.id(), frame.charge as f64, TokenType::Charge, None);
    b.scalar(Special::Spin.id(), frame.spin as f64, TokenType::Spin, None);
    b.special(Special::Pos);
    for (i, (&z, p)) in frame.atomic_numbers.iter().zip(&frame.positions).enumerate() {
        let atom = Some(i as u32);
        b.push(vocab.element_token(z), [0.0; 4], TokenType::Element, atom);
        let row = [p[0], p[1], p[2], 0.0];
        match vocab.position_encoding {
            PositionEncoding::Joint => {
                let cell = codebook.encode_position(p)?;
                b.push(vocab.position_token(cell), row, TokenType::Position, atom);
            }
            PositionEncoding::Axis1d => {
                for a in 0..3 {
                    let bin = encode_value(p[a], &codebook.position_1d_edges[a])?;
                    b.push(vocab.position_1d_token(bin), row, TokenType::Position, atom);
                }
            }
        }
    }
    b.special(Special::PosEnd);
    b.special(Special::Target);
    if let Some((energy, forces)) = labels {
        let bin = encode_value(energy, &codebook.energy_edges)?;
        b.scalar(vocab.energy_token(bin), energy, TokenType::Energy, None);
        b.special(Special::TargetEnd);
        b.special(Special::Force);
        for (i, f) in forces.iter().enumerate() {
            for a in 0..3 {
                let bin = encode_value(f[a], &codebook.force_axis_edges[a])?;
                b.scalar(vocab.force_token(bin), f[a], TokenType::Force, Some(i as u32));
            }
        }
        b.special(Special::ForceEnd);
    }
    b.special(Special::Eos);
    debug_assert_eq!(b.seq.len(), t);
    Ok(b.seq)
}

/// Render the discrete stream in the multi-line listing style.
pub fn render_sequence(seq: &DualSequence, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    let mut t = 0;
    let ids = &seq.token_ids;
    let per_atom = vocab.tokens_per_atom();
    while t < ids.len() {
        let id = ids[t];
        match vocab.kind(id) {
            Some(TokenKind::Element(_)) => {
                let parts: Vec<String> = ids[t + 1..(t + per_atom).min(ids.len())]
                    .iter()
                    .map(|&i| vocab.token_name(i))
                    .collect();
                out.push_str(&format!("{}: {}\n", vocab.token_name(id), parts.join(" ")));
                t += per_atom;
                continue;
            }
            Some(TokenKind::Force(_)) => {
                let parts: Vec<String> = ids[t..(t + 3).min(ids.len())]
                    .iter()
                    .map(|&i| vocab.token_name(i))
                    .collect();
                out.push_str(&parts.join(" "));
                out.push('\n');
                t += 3;
                continue;
            }
            Some(TokenKind::Special(Special::Target)) if seq.mode == Mode::Pretrain => {
                let parts: Vec<String> = ids[t..(t + 3).min(ids.len())]
                    .iter()
                    .map(|&i| vocab.token_name(i))
                    .collect();
                out.push_str(&parts.join(" "));
                out.push('\n');
                t += 3;
                continue;
            }
            _ => {
                out.push_str(&vocab.token_name(id));
                out.push('\n');
            }
        }
        t += 1;
    }
    out
}

struct Cursor<'a> {
    seq: &'a DualSequence,
    vocab: &'a Vocabulary,
    t: usize,
}

impl Cursor<'_> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T, TokenizerError> {
        Err(TokenizerError::Grammar {
            index: self.t,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<TokenKind> {
        self.seq
            .token_ids
            .get(self.t)
            .and_then(|&id| self.vocab.kind(id))
    }

    fn next(&mut self) -> Result<TokenKind, TokenizerError> {
        match self.seq.token_ids.get(self.t) {
            None => self.fail("sequence ends early"),
            Some(&id) => match self.vocab.kind(id) {
                None => self.fail(format!("token id {id} outside vocabulary")),
                Some(k) => {
                    self.t += 1;
                    Ok(k)
                }
            },
        }
    }

    fn expect(&mut self, s: Special) -> Result<(), TokenizerError> {
        match self.next()? {
            TokenKind::Special(got) if got == s => Ok(()),
            other => {
                self.t -= 1;
                self.fail(format!("expected {}, found {other:?}", s.name()))
            }
        }
    }

    fn row(&self, t: usize) -> &[f64; CONTINUOUS_WIDTH] {
        &self.seq.continuous[t]
    }
}

/// Rebuild a (possibly partial) frame from a grammatical sequence.
pub fn decode_sequence(
    seq: &DualSequence,
    codebook: &QuantileCodebook,
    vocab: &Vocabulary,
) -> Result<MolecularFrame, TokenizerError> {
    if seq.continuous.len() != seq.token_ids.len() {
        return Err(TokenizerError::Grammar {
            index: seq.continuous.len().min(seq.token_ids.len()),
            message: "continuous stream length differs from token stream".into(),
        });
    }
    let use_cont = !seq.discrete_only;
    let mut c = Cursor { seq, vocab, t: 0 };
    c.expect(Special::Bos)?;
    c.expect(Special::Charge)?;
    let charge = if use_cont { c.row(c.t - 1)[3].round() as i32 } else { 0 };
    c.expect(Special::Spin)?;
    let spin = if use_cont { c.row(c.t - 1)[3].round().max(0.0) as u32 } else { 0 };
    c.expect(Special::Pos)?;
    let mut numbers = Vec::new();
    let mut positions = Vec::new();
    while let Some(TokenKind::Element(z)) = c.peek() {
        c.t += 1;
        numbers.push(z);
        let p = match vocab.position_encoding {
            PositionEncoding::Joint => match c.next()? {
                TokenKind::PositionCell(cell) => {
                    if use_cont {
                        let r = c.row(c.t - 1);
                        [r[0], r[1], r[2]]
                    } else {
                        codebook.decode_position(cell)?
                    }
                }
                other => {
                    c.t -= 1;
                    return c.fail(format!("expected position cell after element, found {other:?}"));
                }
            },
            PositionEncoding::Axis1d => {
                let mut p = [0.0; 3];
                for a in 0..3 {
                    match c.next()? {
                        TokenKind::Position1d(bin) => {
                            p[a] = if use_cont {
                                c.row(c.t - 1)[a]
                            } else {
                                decode_bin(bin, &codebook.position_1d_edges[a])?
                            };
                        }
                        other => {
                            c.t -= 1;
                            return c.fail(format!("expected 1D position token, found {other:?}"));
                        }
                    }
                }
                p
            }
        };
        positions.push(p);
    }
    if numbers.is_empty() {
        return c.fail("no atoms in [POS] section");
    }
    c.expect(Special::PosEnd)?;
    c.expect(Special::Target)?;
    let mut frame = MolecularFrame::new(numbers, positions)
        .map_err(|e| TokenizerError::InvalidArgument(e.to_string()))?;
    frame.charge = charge;
    frame.spin = spin;
    let n = frame.n_atoms();
    match c.peek() {
        Some(TokenKind::Special(Special::Eos)) => {
            c.t += 1;
        }
        _ => {
            let energy = match c.next()? {
                TokenKind::Energy(bin) => {
                    if use_cont {
                        c.row(c.t - 1)[3]
                    } else {
                        decode_bin(bin, &codebook.energy_edges)?
                    }
                }
                other => {
                    c.t -= 1;
                    return c.fail(format!("expected energy token, found {other:?}"));
                }
            };
            c.expect(Special::TargetEnd)?;
            c.expect(Special::Force)?;
            let mut comps = Vec::with_capacity(3 * n);
            while let Some(TokenKind::Force(bin)) = c.peek() {
                let axis = comps.len() % 3;
                c.t += 1;
                comps.push(if use_cont {
                    c.row(c.t - 1)[3]
                } else {
                    decode_bin(bin, &codebook.force_axis_edges[axis])?
                });
            }
            if comps.len() != 3 * n {
                return c.fail(format!(
                    "found {} force tokens, expected {} for {n} atoms",
                    comps.len(),
                    3 * n
                ));
            }
            c.expect(Special::ForceEnd)?;
            c.expect(Special::Eos)?;
            frame.energy = Some(energy);
            frame.forces = Some(comps.chunks(3).map(|f| [f[0], f[1], f[2]]).collect());
        }
    }
    if c.t != seq.len() {
        return c.fail("trailing tokens after <EOS>");
    }
    Ok(frame)
}

/// Append sequences to a record stream: per record `T: u32, n: u32`, then
/// `T` token ids (u32), `T × 4` continuous values (f64, row-major), `T` tags
/// (u8). All little-endian.
pub fn write_records<W: Write>(mut w: W, seqs: &[DualSequence]) -> Result<(), TokenizerError> {
    for s in seqs {
        w.write_all(&(s.len() as u32).to_le_bytes())?;
        w.write_all(&(s.n_atoms as u32).to_le_bytes())?;
        for id in &s.token_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        for row in &s.continuous {
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        let tags: Vec<u8> = s.type_tags.iter().map(|t| *t as u8).collect();
        w.write_all(&tags)?;
    }
    Ok(())
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool, TokenizerError> {
    let mut filled = 0;
    while filled < buf.len() {
        let k = r.read(&mut buf[filled..])?;
        if k == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(TokenizerError::InvalidArgument("truncated record header".into()));
        }
        filled += k;
    }
    Ok(true)
}

/// Read a record stream written by [`write_records`]. Mode and atom indices are
/// recovered from the tags.
pub fn read_records<R: Read>(mut r: R) -> Result<Vec<DualSequence>, TokenizerError> {
    let mut out = Vec::new();
    let mut header = [0u8; 8];
    while read_exact_or_eof(&mut r, &mut header)? {
        let t = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; t * 4 + t * 32 + t];
        r.read_exact(&mut buf)?;
        let token_ids: Vec<u32> = buf[..4 * t]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let continuous: Vec<[f64; 4]> = buf[4 * t..36 * t]
            .chunks_exact(32)
            .map(|row| std::array::from_fn(|k| f64::from_le_bytes(row[8 * k..8 * k + 8].try_into().unwrap())))
            .collect();
        let type_tags = buf[36 * t..]
            .iter()
            .map(|&b| {
                TokenType::from_u8(b)
                    .ok_or_else(|| TokenizerError::InvalidArgument(format!("bad tag byte {b}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut atom_index = vec![None; t];
        let (mut elem, mut pos, mut force) = (0u32, 0usize, 0u32);
        let per_atom_pos = {
            let np = type_tags.iter().filter(|&&g| g == TokenType::Position).count();
            (np / n.max(1)).max(1)
        };
        for (k, tag) in type_tags.iter().enumerate() {
            atom_index[k] = match tag {
                TokenType::Element => {
                    elem += 1;
                    Some(elem - 1)
                }
                TokenType::Position => {
                    pos += 1;
                    Some(((pos - 1) / per_atom_pos) as u32)
                }
                TokenType::Force => {
                    force += 1;
                    Some((force - 1) / 3)
                }
                _ => None,
            };
        }
        let mode = if type_tags.contains(&TokenType::Force) {
            Mode::Pretrain
        } else {
            Mode::Finetune
        };
        out.push(DualSequence {
            token_ids,
            continuous,
            type_tags,
            atom_index,
            mode,
            n_atoms: n,
            discrete_only: false,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::fit_codebook;
    use crate::data::generate_lj_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_codebook() -> (Vec<MolecularFrame>, QuantileCodebook, Vocabulary) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = generate_lj_dataset(200, 2, 8, &mut rng).unwrap();
        let cfg = CodebookConfig {
            position_1d_bins: 64,
            force_bins: 128,
            energy_bins: 32,
            ..CodebookConfig::default()
        };
        let cb = fit_codebook(&frames, &cfg).unwrap();
        let vocab = build_vocab(&cfg, PositionEncoding::Joint);
        (frames, cb, vocab)
    }

    #[test]
    fn default_vocabulary_size() {
        let v = build_vocab(&CodebookConfig::default(), PositionEncoding::Joint);
        assert_eq!(v.size(), 7272);
        assert_eq!(Special::Bos.id(), 0);
        let ranges = v.ranges();
        for w in ranges.windows(2) {
            assert_eq!(w[0].1.end, w[1].1.start);
        }
        assert_eq!(v.token_name(v.element_token(35)), "a_35");
        assert_eq!(v.token_name(v.position_token(579)), "<NUM_579>");
        assert_eq!(v.token_name(v.energy_token(125)), "<NUM_target_125>");
        assert_eq!(v.token_name(v.force_token(214)), "<NUM_force_214>");
        let v1 = build_vocab(&CodebookConfig::default(), PositionEncoding::Axis1d);
        assert_eq!(v1.size(), 7272 + 512);
    }

    #[test]
    fn lengths() {
        let j = PositionEncoding::Joint;
        assert_eq!(sequence_length(8, Mode::Pretrain, j).unwrap(), 51);
        assert_eq!(sequence_length(1, Mode::Pretrain, j).unwrap(), 16);
        assert_eq!(sequence_length(1, Mode::Finetune, j).unwrap(), 9);
        assert!(sequence_length(0, Mode::Finetune, j).is_err());
    }

    #[test]
    fn placeholders_are_zero() {
        let (frames, cb, vocab) = small_codebook();
        let s = encode_frame(&frames[0], &cb, &vocab, Mode::Pretrain).unwrap();
        for (tag, row) in s.type_tags.iter().zip(&s.continuous) {
            if matches!(tag, TokenType::Special | TokenType::Element) {
                assert_eq!(*row, [0.0; 4]);
            }
        }
    }

    #[test]
    fn finetune_has_no_label_tokens() {
        let (frames, cb, vocab) = small_codebook();
        for f in &frames[..20] {
            let s = encode_frame(f, &cb, &vocab, Mode::Finetune).unwrap();
            assert_eq!(s.len(), 2 * f.n_atoms() + 7);
            for &id in &s.token_ids {
                assert!(id < vocab.energy_base() || id >= vocab.position_1d_base());
            }
        }
    }

    #[test]
    fn round_trip_pretrain_and_truncation() {
        let (frames, cb, vocab) = small_codebook();
        for f in &frames[..20] {
            let s = encode_frame(f, &cb, &vocab, Mode::Pretrain).unwrap();
            let back = decode_sequence(&s, &cb, &vocab).unwrap();
            assert_eq!(&back, f);
            let mut cut = s.clone();
            cut.token_ids.truncate(s.len() - 3);
            cut.continuous.truncate(s.len() - 3);
            assert!(matches!(
                decode_sequence(&cut, &cb, &vocab),
                Err(TokenizerError::Grammar { .. })
            ));
        }
    }

    #[test]
    fn missing_labels_in_pretrain() {
        let (frames, cb, vocab) = small_codebook();
        let mut f = frames[0].clone();
        f.forces = None;
        assert!(matches!(
            encode_frame(&f, &cb, &vocab, Mode::Pretrain),
            Err(TokenizerError::MissingLabels("forces"))
        ));
        assert!(encode_frame(&f, &cb, &vocab, Mode::Finetune).is_ok());
    }

    #[test]
    fn discrete_only_decodes_to_representatives() {
        let (frames, cb, vocab) = small_codebook();
        let mut s = encode_frame(&frames[3], &cb, &vocab, Mode::Pretrain).unwrap();
        s.discrete_only = true;
        let back = decode_sequence(&s, &cb, &vocab).unwrap();
        assert_eq!(back.atomic_numbers, frames[3].atomic_numbers);
        for (p, q) in back.positions.iter().zip(&frames[3].positions) {
            assert_eq!(cb.encode_position(p).unwrap(), cb.encode_position(q).unwrap());
        }
    }

    #[test]
    fn axis1d_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = generate_lj_dataset(100, 2, 6, &mut rng).unwrap();
        let cfg = CodebookConfig {
            position_1d_bins: 16,
            force_bins: 64,
            energy_bins: 16,
            ..CodebookConfig::default()
        };
        let cb = fit_codebook(&frames, &cfg).unwrap();
        let vocab = build_vocab(&cfg, PositionEncoding::Axis1d);
        let f = &frames[0];
        let s = encode_frame(f, &cb, &vocab, Mode::Pretrain).unwrap();
        assert_eq!(s.len(), 7 * f.n_atoms() + 11);
        assert_eq!(decode_sequence(&s, &cb, &vocab).unwrap(), *f);
        let ft = encode_frame(f, &cb, &vocab, Mode::Finetune).unwrap();
        assert_eq!(ft.len(), 4 * f.n_atoms() + 7);
        assert_eq!(ft.readout_indices().len(), f.n_atoms());
    }

    #[test]
    fn record_stream_round_trip() {
        let (frames, cb, vocab) = small_codebook();
        let mut seqs = Vec::new();
        for f in &frames[..10] {
            seqs.push(encode_frame(f, &cb, &vocab, Mode::Pretrain).unwrap());
            seqs.push(encode_frame(f, &cb, &vocab, Mode::Finetune).unwrap());
        }
        let mut buf = Vec::new();
        write_records(&mut buf, &seqs).unwrap();
        let expected: usize = seqs.iter().map(|s| 8 + 4 * s.len() + 32 * s.len() + s.len()).sum();
        assert_eq!(buf.len(), expected);
        assert_eq!(read_records(&buf[..]).unwrap(), seqs);
        assert!(read_records(&buf[..buf.len() - 1]).is_err());
    }
}
