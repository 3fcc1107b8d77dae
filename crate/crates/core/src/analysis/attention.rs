use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::data::MolecularFrame;
use crate::model::AttentionRecord;
use crate::nn::Tensor;
use crate::tokenizer::{DualSequence, TokenType};

/// Semantic key/query groups for token-type attention mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    Positions,
    Charge,
    Spin,
    Delimiter,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [
        Bucket::Positions,
        Bucket::Charge,
        Bucket::Spin,
        Bucket::Delimiter,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Positions => "positions",
            Bucket::Charge => "charge",
            Bucket::Spin => "spin",
            Bucket::Delimiter => "delimiter",
        }
    }
}

pub fn bucket_tokens(seq: &DualSequence) -> Vec<Bucket> {
    seq.type_tags
        .iter()
        .map(|t| match t {
            TokenType::Element | TokenType::Position => Bucket::Positions,
            TokenType::Charge => Bucket::Charge,
            TokenType::Spin => Bucket::Spin,
            _ => Bucket::Delimiter,
        })
        .collect()
}

/// Per layer and query bucket: the fraction of attention mass sent to each
/// key bucket. `None` rows have no queries in that bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTypeMass {
    pub layers: Vec<[Option<[f64; 4]>; 4]>,
    pub query_counts: [usize; 4],
}

fn check_record(record: &AttentionRecord, t: usize) -> Result<(), AnalysisError> {
    if record.n_layers() == 0 || record.n_heads() == 0 {
        return Err(AnalysisError::Empty("attention record"));
    }
    if record.seq_len() != t {
        return Err(AnalysisError::LengthMismatch {
            what: "attention record vs sequence",
            a: record.seq_len(),
            b: t,
        });
    }
    Ok(())
}

/// Head-averaged token-type mass fractions pooled over sequences.
pub fn attention_by_token_type_pooled(
    items: &[(&AttentionRecord, &[Bucket])],
) -> Result<TokenTypeMass, AnalysisError> {
    let first = items.first().ok_or(AnalysisError::Empty("records"))?;
    let n_layers = first.0.n_layers();
    let mut mass = vec![[[0.0f64; 4]; 4]; n_layers];
    let mut query_counts = [0usize; 4];
    for (record, buckets) in items {
        check_record(record, buckets.len())?;
        if record.n_layers() != n_layers {
            return Err(AnalysisError::LengthMismatch {
                what: "layer count",
                a: record.n_layers(),
                b: n_layers,
            });
        }
        for b in buckets.iter() {
            query_counts[b.index()] += 1;
        }
        for (l, m) in mass.iter_mut().enumerate() {
            let a = record.head_mean(l);
            for (i, qb) in buckets.iter().enumerate() {
                for (j, kb) in buckets.iter().enumerate() {
                    m[qb.index()][kb.index()] += a.at(i, j);
                }
            }
        }
    }
    let layers = mass
        .into_iter()
        .map(|m| {
            std::array::from_fn(|q| {
                let total: f64 = m[q].iter().sum();
                (query_counts[q] > 0 && total > 0.0).then(|| m[q].map(|v| v / total))
            })
        })
        .collect();
    Ok(TokenTypeMass {
        layers,
        query_counts,
    })
}

pub fn attention_by_token_type(
    record: &AttentionRecord,
    buckets: &[Bucket],
) -> Result<TokenTypeMass, AnalysisError> {
    attention_by_token_type_pooled(&[(record, buckets)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Bucket midpoint (Å, or rank for rank curves).
    pub x: f64,
    pub mean: f64,
    pub count: usize,
}

/// One attention curve; `head` is `None` for head-averaged curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceCurve {
    pub layer: usize,
    pub head: Option<usize>,
    pub points: Vec<CurvePoint>,
}

/// Quantile bucketing of `(key, value)` pairs: interior boundaries at the
/// `k/n` order statistics of the pooled keys, values averaged per bucket,
/// empty buckets dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileBuckets {
    pub min: f64,
    pub max: f64,
    pub interior: Vec<f64>,
}

impl QuantileBuckets {
    pub fn fit(keys: &[f64], n: usize) -> Result<Self, AnalysisError> {
        if n == 0 {
            return Err(AnalysisError::InvalidArgument("need at least one quantile".into()));
        }
        if keys.len() < n {
            return Err(AnalysisError::TooFewPairs {
                pairs: keys.len(),
                quantiles: n,
            });
        }
        let mut s = keys.to_vec();
        s.sort_by(f64::total_cmp);
        let m = s.len();
        Ok(Self {
            min: s[0],
            max: s[m - 1],
            interior: (1..n).map(|k| s[k * m / n]).collect(),
        })
    }

    pub fn n_buckets(&self) -> usize {
        self.interior.len() + 1
    }

    pub fn index(&self, x: f64) -> usize {
        self.interior.partition_point(|b| *b <= x)
    }

    pub fn midpoint(&self, k: usize) -> f64 {
        let lo = if k == 0 { self.min } else { self.interior[k - 1] };
        let hi = if k + 1 == self.n_buckets() {
            self.max
        } else {
            self.interior[k]
        };
        0.5 * (lo + hi)
    }

    pub fn average(&self, pairs: &[(f64, f64)]) -> Vec<CurvePoint> {
        let mut sum = vec![0.0; self.n_buckets()];
        let mut count = vec![0usize; self.n_buckets()];
        for &(x, v) in pairs {
            let k = self.index(x);
            sum[k] += v;
            count[k] += 1;
        }
        (0..self.n_buckets())
            .filter(|&k| count[k] > 0)
            .map(|k| CurvePoint {
                x: self.midpoint(k),
                mean: sum[k] / count[k] as f64,
                count: count[k],
            })
            .collect()
    }
}

fn check_inputs(
    records: &[AttentionRecord],
    seqs: &[DualSequence],
    frames: &[MolecularFrame],
) -> Result<(), AnalysisError> {
    if records.is_empty() {
        return Err(AnalysisError::Empty("records"));
    }
    if records.len() != seqs.len() || seqs.len() != frames.len() {
        return Err(AnalysisError::LengthMismatch {
            what: "records/sequences/frames",
            a: records.len(),
            b: frames.len(),
        });
    }
    for ((r, s), f) in records.iter().zip(seqs).zip(frames) {
        check_record(r, s.len())?;
        if s.n_atoms != f.n_atoms() {
            return Err(AnalysisError::LengthMismatch {
                what: "sequence atoms vs frame atoms",
                a: s.n_atoms,
                b: f.n_atoms(),
            });
        }
    }
    Ok(())
}

/// `(distance, score)` for every ordered pair of position tokens belonging
/// to different atoms.
pub fn position_pairs(attn: &Tensor<f64>, seq: &DualSequence, frame: &MolecularFrame) -> Vec<(f64, f64)> {
    let pos = seq.position_token_indices();
    let mut out = Vec::with_capacity(pos.len() * pos.len());
    for &i in &pos {
        let ai = seq.atom_index[i].expect("position token has atom") as usize;
        for &j in &pos {
            let aj = seq.atom_index[j].expect("position token has atom") as usize;
            if ai != aj {
                out.push((frame.distance(ai, aj), attn.at(i, j)));
            }
        }
    }
    out
}

fn distance_curves_with<F>(
    records: &[AttentionRecord],
    seqs: &[DualSequence],
    frames: &[MolecularFrame],
    n_quantiles: usize,
    matrix: F,
    heads: Option<usize>,
) -> Result<Vec<DistanceCurve>, AnalysisError>
where
    F: Fn(&AttentionRecord, usize, usize) -> Tensor<f64>,
{
    check_inputs(records, seqs, frames)?;
    let n_layers = records[0].n_layers();
    let head_ids: Vec<Option<usize>> = match heads {
        None => vec![None],
        Some(h) => (0..h).map(Some).collect(),
    };
    let mut keys = Vec::new();
    for (s, f) in seqs.iter().zip(frames) {
        let zero = Tensor::zeros(s.len(), s.len());
        keys.extend(position_pairs(&zero, s, f).into_iter().map(|p| p.0));
    }
    let buckets = QuantileBuckets::fit(&keys, n_quantiles)?;
    let mut curves = Vec::new();
    for layer in 0..n_layers {
        for &head in &head_ids {
            let mut pairs = Vec::with_capacity(keys.len());
            for ((r, s), f) in records.iter().zip(seqs).zip(frames) {
                let a = matrix(r, layer, head.unwrap_or(0));
                pairs.extend(position_pairs(&a, s, f));
            }
            curves.push(DistanceCurve {
                layer,
                head,
                points: buckets.average(&pairs),
            });
        }
    }
    Ok(curves)
}

/// Head-averaged attention vs interatomic distance, one curve per layer.
pub fn attention_vs_distance(
    records: &[AttentionRecord],
    seqs: &[DualSequence],
    frames: &[MolecularFrame],
    n_quantiles: usize,
) -> Result<Vec<DistanceCurve>, AnalysisError> {
    distance_curves_with(records, seqs, frames, n_quantiles, |r, l, _| r.head_mean(l), None)
}

/// Attention vs distance and vs neighbour rank for every (layer, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerHeadCurves {
    pub distance: Vec<DistanceCurve>,
    pub rank: Vec<DistanceCurve>,
}

pub fn per_head_curves(
    records: &[AttentionRecord],
    seqs: &[DualSequence],
    frames: &[MolecularFrame],
    n_quantiles: usize,
) -> Result<PerHeadCurves, AnalysisError> {
    check_inputs(records, seqs, frames)?;
    let n_heads = records[0].n_heads();
    let distance = distance_curves_with(
        records,
        seqs,
        frames,
        n_quantiles,
        |r, l, h| r.layers[l][h].clone(),
        Some(n_heads),
    )?;
    let mut rank = Vec::new();
    for layer in 0..records[0].n_layers() {
        for head in 0..n_heads {
            let mut sum: Vec<f64> = Vec::new();
            let mut count: Vec<usize> = Vec::new();
            for ((r, s), f) in records.iter().zip(seqs).zip(frames) {
                let a = &r.layers[layer][head];
                for (d_rank, score) in rank_pairs(a, s, f) {
                    if sum.len() < d_rank {
                        sum.resize(d_rank, 0.0);
                        count.resize(d_rank, 0);
                    }
                    sum[d_rank - 1] += score;
                    count[d_rank - 1] += 1;
                }
            }
            let points = (0..sum.len())
                .filter(|&k| count[k] > 0)
                .map(|k| CurvePoint {
                    x: (k + 1) as f64,
                    mean: sum[k] / count[k] as f64,
                    count: count[k],
                })
                .collect();
            rank.push(DistanceCurve {
                layer,
                head: Some(head),
                points,
            });
        }
    }
    Ok(PerHeadCurves { distance, rank })
}

/// `(neighbour rank, atom-level score)` for every ordered atom pair, ranks
/// starting at 1 for the nearest other atom.
fn rank_pairs(attn: &Tensor<f64>, seq: &DualSequence, frame: &MolecularFrame) -> Vec<(usize, f64)> {
    let rows = atom_attention_rows(attn, seq);
    let n = frame.n_atoms();
    let mut out = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| frame.distance(i, a).total_cmp(&frame.distance(i, b)).then(a.cmp(&b)));
        for (r, &j) in others.iter().enumerate() {
            out.push((r + 1, row[j]));
        }
    }
    out
}

/// Atom-to-atom attention: the query is atom i's readout token, each key
/// atom collects the attention on all of its tokens; rows renormalized over
/// atoms (self included).
pub fn atom_attention_rows(attn: &Tensor<f64>, seq: &DualSequence) -> Vec<Vec<f64>> {
    let n = seq.n_atoms;
    let readout = seq.readout_indices();
    readout
        .iter()
        .map(|&q| {
            let mut row = vec![0.0; n];
            for (t, atom) in seq.atom_index.iter().enumerate() {
                if let (Some(a), TokenType::Element | TokenType::Position) = (atom, seq.type_tags[t]) {
                    row[*a as usize] += attn.at(q, t);
                }
            }
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
            row
        })
        .collect()
}

/// Smallest distance whose ball around atom i holds at least `delta` of its
/// (renormalized) attention; equal distances enter together.
pub fn effective_radius(attention: &[f64], distances: &[f64], delta: f64) -> Result<f64, AnalysisError> {
    if attention.is_empty() {
        return Err(AnalysisError::Empty("attention row"));
    }
    if attention.len() != distances.len() {
        return Err(AnalysisError::LengthMismatch {
            what: "attention vs distances",
            a: attention.len(),
            b: distances.len(),
        });
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(AnalysisError::InvalidArgument(format!("delta {delta} outside (0, 1]")));
    }
    let total: f64 = attention.iter().sum();
    if !(total > 0.0) || attention.iter().any(|a| *a < 0.0 || !a.is_finite()) {
        return Err(AnalysisError::InvalidArgument(
            "attention row must be non-negative with positive mass".into(),
        ));
    }
    let mut order: Vec<usize> = (0..attention.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    let threshold = delta * (1.0 - 1e-12);
    let mut cum = 0.0;
    let mut k = 0;
    while k < order.len() {
        let d = distances[order[k]];
        while k < order.len() && distances[order[k]] == d {
            cum += attention[order[k]] / total;
            k += 1;
        }
        if cum >= threshold {
            return Ok(d);
        }
    }
    Ok(distances[order[order.len() - 1]])
}

/// Effective radius of every atom at one layer (head-averaged).
pub fn effective_radii(
    record: &AttentionRecord,
    seq: &DualSequence,
    frame: &MolecularFrame,
    layer: usize,
    delta: f64,
) -> Result<Vec<f64>, AnalysisError> {
    let rows = atom_attention_rows(&record.head_mean(layer), seq);
    let dm = frame.distance_matrix();
    rows.iter()
        .zip(&dm)
        .map(|(row, d)| effective_radius(row, d, delta))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Mean effective radius against median neighbour distance, bucketed by
/// percentiles of the latter; one curve per layer.
pub fn radius_vs_density(
    records: &[AttentionRecord],
    seqs: &[DualSequence],
    frames: &[MolecularFrame],
    delta: f64,
    n_percentiles: usize,
) -> Result<Vec<DistanceCurve>, AnalysisError> {
    check_inputs(records, seqs, frames)?;
    let mut medians = Vec::new();
    for f in frames {
        let dm = f.distance_matrix();
        for (i, row) in dm.iter().enumerate() {
            if row.len() > 1 {
                medians.push(median(
                    row.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, d)| *d).collect(),
                ));
            }
        }
    }
    let buckets = QuantileBuckets::fit(&medians, n_percentiles.min(medians.len()).max(1))?;
    let mut curves = Vec::new();
    for layer in 0..records[0].n_layers() {
        let mut pairs = Vec::with_capacity(medians.len());
        let mut k = 0;
        for ((r, s), f) in records.iter().zip(seqs).zip(frames) {
            if f.n_atoms() < 2 {
                continue;
            }
            for radius in effective_radii(r, s, f, layer, delta)? {
                pairs.push((medians[k], radius));
                k += 1;
            }
        }
        curves.push(DistanceCurve {
            layer,
            head: None,
            points: buckets.average(&pairs),
        });
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let a = [0.2; 5];
        let d = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(effective_radius(&a, &d, 0.9).unwrap(), 4.0);
        assert_eq!(effective_radius(&[1.0], &[0.0], 0.9).unwrap(), 0.0);
    }

    #[test]
    fn full_mass_reaches_last_nonzero() {
        let a = [0.5, 0.3, 0.2, 0.0];
        let d = [0.0, 2.0, 1.0, 5.0];
        assert_eq!(effective_radius(&a, &d, 1.0).unwrap(), 2.0);
    }

    #[test]
    fn ties_enter_together() {
        let a = [0.1, 0.45, 0.45];
        let d = [0.0, 3.0, 3.0];
        assert_eq!(effective_radius(&a, &d, 0.5).unwrap(), 3.0);
    }

    #[test]
    fn invalid_rows() {
        assert!(effective_radius(&[], &[], 0.9).is_err());
        assert!(effective_radius(&[0.0], &[0.0], 0.9).is_err());
        assert!(effective_radius(&[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn quantile_buckets_constant_keys() {
        let b = QuantileBuckets::fit(&[2.0, 2.0], 2).unwrap();
        let pts = b.average(&[(2.0, 0.3), (2.0, 0.5)]);
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].x, 2.0);
        assert!((pts[0].mean - 0.4).abs() < 1e-15);
        assert!(QuantileBuckets::fit(&[1.0], 2).is_err());
    }
}
