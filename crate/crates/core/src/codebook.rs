//! Quantile codebooks: equal-count bin edges per channel, value encoding and
//! the joint 3D position grid.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{MolecularFrame, Vec3};

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("channel '{channel}': cannot fit {k} bins to {distinct} distinct values (duplicate edges)")]
    DuplicateEdge {
        channel: String,
        k: usize,
        distinct: usize,
    },
    #[error("channel '{0}': no values to fit")]
    Empty(String),
    #[error("bin count must be at least 2, got {0}")]
    TooFewBins(usize),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("bin {bin} out of range for {k} bins")]
    BinOutOfRange { bin: usize, k: usize },
    #[error("channel '{0}' was not fit")]
    MissingChannel(String),
    #[error("frame {frame} lacks {what} required by channel '{channel}'")]
    MissingLabels {
        frame: usize,
        what: &'static str,
        channel: String,
    },
    #[error("codebook file {0}: {1}")]
    Io(String, String),
}

/// Bin edges and per-bin representatives for one channel.
///
/// Bin `b` is the left-closed interval `[edges[b-1], edges[b])` with the outer
/// bins extending to ±∞.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileEdges {
    #[serde(rename = "K")]
    pub k: usize,
    pub edges: Vec<f64>,
    pub representatives: Vec<f64>,
}

impl QuantileEdges {
    pub fn is_fit(&self) -> bool {
        self.edges.len() + 1 == self.k && self.representatives.len() == self.k
    }

    fn unfit(k: usize) -> Self {
        Self {
            k,
            edges: Vec::new(),
            representatives: Vec::new(),
        }
    }

    /// Closed interval `[lower, upper]` of bin `b` (infinite at the ends).
    pub fn bin_bounds(&self, b: usize) -> (f64, f64) {
        let lo = if b == 0 {
            f64::NEG_INFINITY
        } else {
            self.edges[b - 1]
        };
        let hi = if b + 1 == self.k {
            f64::INFINITY
        } else {
            self.edges[b]
        };
        (lo, hi)
    }
}

fn median_of_sorted(v: &[f64]) -> f64 {
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Interior edges at the i/K sample quantiles; representatives are per-bin
/// training medians.
pub fn fit_quantile_edges(
    values: &[f64],
    k: usize,
    channel: &str,
) -> Result<QuantileEdges, CodebookError> {
    if k < 2 {
        return Err(CodebookError::TooFewBins(k));
    }
    if values.is_empty() {
        return Err(CodebookError::Empty(channel.to_string()));
    }
    if let Some(&x) = values.iter().find(|v| !v.is_finite()) {
        return Err(CodebookError::NonFinite(x));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let distinct = 1 + sorted.windows(2).filter(|w| w[0] != w[1]).count();
    let duplicate = || CodebookError::DuplicateEdge {
        channel: channel.to_string(),
        k,
        distinct,
    };
    if k > distinct {
        return Err(duplicate());
    }
    let m = sorted.len();
    let mut edges = Vec::with_capacity(k - 1);
    for i in 1..k {
        let mut c = i * m / k;
        if sorted[c - 1] == sorted[c] {
            // A tied run straddles the cut: keep the whole run in the lower bin.
            c = sorted.partition_point(|&v| v <= sorted[c - 1]);
            if c == m {
                return Err(duplicate());
            }
        }
        let (below, above) = (sorted[c - 1], sorted[c]);
        let mut edge = 0.5 * (below + above);
        // Midpoints of adjacent floats can round onto the lower value, which
        // would move it into the upper bin.
        if edge <= below {
            edge = above;
        }
        edges.push(edge);
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(duplicate());
    }
    let mut representatives = Vec::with_capacity(k);
    let mut start = 0;
    for b in 0..k {
        let end = if b + 1 == k {
            m
        } else {
            sorted.partition_point(|&v| v < edges[b])
        };
        if end <= start {
            return Err(duplicate());
        }
        representatives.push(median_of_sorted(&sorted[start..end]));
        start = end;
    }
    Ok(QuantileEdges {
        k,
        edges,
        representatives,
    })
}

/// Bin index of `x`; out-of-range values clamp to the outer bins.
pub fn encode_value(x: f64, edges: &QuantileEdges) -> Result<usize, CodebookError> {
    if !x.is_finite() {
        return Err(CodebookError::NonFinite(x));
    }
    Ok(edges.edges.partition_point(|&e| e <= x))
}

pub fn decode_bin(bin: usize, edges: &QuantileEdges) -> Result<f64, CodebookError> {
    edges
        .representatives
        .get(bin)
        .copied()
        .ok_or(CodebookError::BinOutOfRange { bin, k: edges.k })
}

/// How atom positions become discrete tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// One token per atom: a cell of the joint K×K×K grid.
    #[default]
    Joint,
    /// Three tokens per atom, one 1D bin per axis.
    Axis1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub grid_bins: usize,
    pub position_1d_bins: usize,
    pub force_bins: usize,
    pub energy_bins: usize,
    pub fit_position_1d: bool,
    pub fit_forces: bool,
    pub fit_energy: bool,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            grid_bins: 10,
            position_1d_bins: 512,
            force_bins: 4096,
            energy_bins: 2048,
            fit_position_1d: true,
            fit_forces: true,
            fit_energy: true,
        }
    }
}

impl CodebookConfig {
    pub fn grid_cells(&self) -> usize {
        self.grid_bins.pow(3)
    }
}

const AXES: [&str; 3] = ["x", "y", "z"];

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileCodebook {
    pub position_axis_edges: [QuantileEdges; 3],
    pub position_1d_edges: [QuantileEdges; 3],
    pub force_axis_edges: [QuantileEdges; 3],
    pub energy_edges: QuantileEdges,
}

fn pooled<F: Fn(&MolecularFrame) -> Option<Vec<f64>>>(
    frames: &[MolecularFrame],
    channel: &str,
    what: &'static str,
    get: F,
) -> Result<Vec<f64>, CodebookError> {
    let mut out = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        out.extend(get(f).ok_or_else(|| CodebookError::MissingLabels {
            frame: i,
            what,
            channel: channel.to_string(),
        })?);
    }
    Ok(out)
}

pub fn fit_codebook(
    frames: &[MolecularFrame],
    config: &CodebookConfig,
) -> Result<QuantileCodebook, CodebookError> {
    let axis_values = |a: usize| -> Vec<f64> {
        frames
            .iter()
            .flat_map(|f| f.positions.iter().map(move |p| p[a]))
            .collect()
    };
    let mut grid = Vec::with_capacity(3);
    let mut oned = Vec::with_capacity(3);
    let mut force = Vec::with_capacity(3);
    for (a, axis) in AXES.iter().enumerate() {
        let vals = axis_values(a);
        grid.push(fit_quantile_edges(&vals, config.grid_bins, &format!("pos_grid_{axis}"))?);
        oned.push(if config.fit_position_1d {
            fit_quantile_edges(&vals, config.position_1d_bins, &format!("pos_1d_{axis}"))?
        } else {
            QuantileEdges::unfit(config.position_1d_bins)
        });
        force.push(if config.fit_forces {
            let name = format!("force_{axis}");
            let vals = pooled(frames, &name, "forces", |f| {
                f.forces.as_ref().map(|fs| fs.iter().map(|r| r[a]).collect())
            })?;
            fit_quantile_edges(&vals, config.force_bins, &name)?
        } else {
            QuantileEdges::unfit(config.force_bins)
        });
    }
    let energy_edges = if config.fit_energy {
        let vals = pooled(frames, "energy", "energy", |f| f.energy.map(|e| vec![e]))?;
        fit_quantile_edges(&vals, config.energy_bins, "energy")?
    } else {
        QuantileEdges::unfit(config.energy_bins)
    };
    let arr = |v: Vec<QuantileEdges>| -> [QuantileEdges; 3] { v.try_into().expect("three axes") };
    Ok(QuantileCodebook {
        position_axis_edges: arr(grid),
        position_1d_edges: arr(oned),
        force_axis_edges: arr(force),
        energy_edges,
    })
}

impl QuantileCodebook {
    pub fn config(&self) -> CodebookConfig {
        CodebookConfig {
            grid_bins: self.position_axis_edges[0].k,
            position_1d_bins: self.position_1d_edges[0].k,
            force_bins: self.force_axis_edges[0].k,
            energy_bins: self.energy_edges.k,
            fit_position_1d: self.position_1d_edges[0].is_fit(),
            fit_forces: self.force_axis_edges[0].is_fit(),
            fit_energy: self.energy_edges.is_fit(),
        }
    }

    pub fn channels(&self) -> BTreeMap<String, &QuantileEdges> {
        let mut m = BTreeMap::new();
        for (a, axis) in AXES.iter().enumerate() {
            m.insert(format!("pos_grid_{axis}"), &self.position_axis_edges[a]);
            m.insert(format!("pos_1d_{axis}"), &self.position_1d_edges[a]);
            m.insert(format!("force_{axis}"), &self.force_axis_edges[a]);
        }
        m.insert("energy".to_string(), &self.energy_edges);
        m
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.channels()).expect("codebook serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CodebookError> {
        let bad = |e: String| CodebookError::Io("<json>".into(), e);
        let mut map: BTreeMap<String, QuantileEdges> =
            serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        let mut take = |name: String| -> Result<QuantileEdges, CodebookError> {
            let ch = map
                .remove(&name)
                .ok_or_else(|| CodebookError::MissingChannel(name.clone()))?;
            let consistent = ch.k >= 2
                && (ch.is_fit() || (ch.edges.is_empty() && ch.representatives.is_empty()))
                && ch.edges.iter().all(|e| e.is_finite())
                && ch.edges.windows(2).all(|w| w[0] < w[1]);
            if !consistent {
                return Err(bad(format!("channel '{name}' is malformed")));
            }
            Ok(ch)
        };
        let mut axis = |prefix: &str| -> Result<[QuantileEdges; 3], CodebookError> {
            Ok([
                take(format!("{prefix}_x"))?,
                take(format!("{prefix}_y"))?,
                take(format!("{prefix}_z"))?,
            ])
        };
        let position_axis_edges = axis("pos_grid")?;
        let position_1d_edges = axis("pos_1d")?;
        let force_axis_edges = axis("force")?;
        let energy_edges = take("energy".into())?;
        Ok(Self {
            position_axis_edges,
            position_1d_edges,
            force_axis_edges,
            energy_edges,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CodebookError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| CodebookError::Io(path.display().to_string(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CodebookError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CodebookError::Io(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }

    /// Joint grid cell `(bx*K + by)*K + bz`.
    pub fn encode_position(&self, xyz: &Vec3) -> Result<usize, CodebookError> {
        let k = self.position_axis_edges[0].k;
        let mut cell = 0;
        for a in 0..3 {
            let edges = &self.position_axis_edges[a];
            if !edges.is_fit() {
                return Err(CodebookError::MissingChannel(format!("pos_grid_{}", AXES[a])));
            }
            cell = cell * k + encode_value(xyz[a], edges)?;
        }
        Ok(cell)
    }

    /// Per-axis bins of a grid cell.
    pub fn decompose_cell(&self, cell: usize) -> [usize; 3] {
        let k = self.position_axis_edges[0].k;
        [cell / (k * k), (cell / k) % k, cell % k]
    }

    /// Representative coordinates of a grid cell.
    pub fn decode_position(&self, cell: usize) -> Result<Vec3, CodebookError> {
        let bins = self.decompose_cell(cell);
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = decode_bin(bins[a], &self.position_axis_edges[a])?;
        }
        Ok(out)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn median_split() {
        let e = fit_quantile_edges(&[1.0, 2.0, 3.0, 4.0], 2, "t").unwrap();
        assert_eq!(e.edges, vec![2.5]);
        assert_eq!(e.representatives, vec![1.5, 3.5]);
        assert_eq!(encode_value(1.0, &e).unwrap(), 0);
        assert_eq!(encode_value(2.0, &e).unwrap(), 0);
        assert_eq!(encode_value(3.0, &e).unwrap(), 1);
    }

    #[test]
    fn constant_input_is_rejected() {
        let err = fit_quantile_edges(&[5.0, 5.0, 5.0], 2, "energy").unwrap_err();
        match err {
            CodebookError::DuplicateEdge { channel, .. } => assert_eq!(channel, "energy"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clamping_and_left_closed_edges() {
        let e = fit_quantile_edges(&[1.0, 2.0, 3.0, 4.0], 2, "t").unwrap();
        assert_eq!(encode_value(1e9, &e).unwrap(), 1);
        assert_eq!(encode_value(-1e9, &e).unwrap(), 0);
        assert_eq!(encode_value(2.5, &e).unwrap(), 1);
        assert!(encode_value(f64::NAN, &e).is_err());
        assert!(decode_bin(2, &e).is_err());
    }

    #[test]
    fn ties_break_toward_lower_bin_edge() {
        // Sorted [1,2,2,2,3,4]: cut between index 2 and 3 lands inside the tie.
        let e = fit_quantile_edges(&[2.0, 1.0, 2.0, 3.0, 2.0, 4.0], 2, "t").unwrap();
        assert_eq!(e.edges, vec![2.5]);
        assert_eq!(e.representatives, vec![2.0, 3.5]);
    }

    #[test]
    fn grid_cells() {
        let vals: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let ed = fit_quantile_edges(&vals, 10, "g").unwrap();
        let cb = QuantileCodebook {
            position_axis_edges: [ed.clone(), ed.clone(), ed.clone()],
            position_1d_edges: [ed.clone(), ed.clone(), ed.clone()],
            force_axis_edges: [ed.clone(), ed.clone(), ed.clone()],
            energy_edges: ed,
        };
        assert_eq!(cb.encode_position(&[0.0, 0.0, 0.0]).unwrap(), 0);
        assert_eq!(cb.encode_position(&[99.0, 99.0, 99.0]).unwrap(), 999);
        assert_eq!(cb.encode_position(&[35.0, 72.0, 5.0]).unwrap(), 370);
        assert_eq!(cb.decompose_cell(370), [3, 7, 0]);
        assert!(cb.encode_position(&[f64::INFINITY, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn encode_is_monotone(mut vals in proptest::collection::vec(-1e3f64..1e3, 20..200),
                              a in -2e3f64..2e3, b in -2e3f64..2e3) {
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            prop_assume!(vals.len() >= 8);
            let e = fit_quantile_edges(&vals, 8, "p").unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(encode_value(lo, &e).unwrap() <= encode_value(hi, &e).unwrap());
        }

        #[test]
        fn representatives_lie_in_their_bins(vals in proptest::collection::vec(-50f64..50.0, 30..300),
                                             k in 2usize..12) {
            let mut d = vals.clone();
            d.sort_by(f64::total_cmp);
            d.dedup();
            prop_assume!(d.len() >= k);
            let e = fit_quantile_edges(&vals, k, "p").unwrap();
            for b in 0..k {
                let (lo, hi) = e.bin_bounds(b);
                let r = e.representatives[b];
                prop_assert!(lo <= r && r <= hi);
                prop_assert_eq!(encode_value(decode_bin(b, &e).unwrap(), &e).unwrap(), b);
            }
        }
    }
}
