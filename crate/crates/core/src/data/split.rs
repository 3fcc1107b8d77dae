use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Largest-remainder rounding of `n * fractions`; ties go to the earlier split.
fn split_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut remaining = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[k] += 1;
        remaining -= 1;
    }
    sizes
}

/// Shuffle `0..n` and cut it into train/val/test by `fractions`.
pub fn split_dataset<G: Rng + ?Sized>(
    n: usize,
    fractions: [f64; 3],
    rng: &mut G,
) -> Result<DatasetSplit, DataError> {
    if fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
        return Err(DataError::InvalidArgument(
            "split fractions must be positive".into(),
        ));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidArgument(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    if n < fractions.len() {
        return Err(DataError::InvalidArgument(format!(
            "cannot split {n} items into {} parts",
            fractions.len()
        )));
    }
    let sizes = split_sizes(n, &fractions);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let test = idx.split_off(sizes[0] + sizes[1]);
    let val = idx.split_off(sizes[0]);
    Ok(DatasetSplit {
        train: idx,
        val,
        test,
    })
}

/// JSON manifest listing the source files of a frame collection and the split
/// over the concatenated frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub files: Vec<PathBuf>,
    pub frames_per_file: Vec<usize>,
    pub split: DatasetSplit,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| DataError::InvalidArgument(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| DataError::Io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DataError::Io(path.display().to_string(), e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| DataError::InvalidArgument(format!("{}: {e}", path.display())))?;
        let total: usize = m.frames_per_file.iter().sum();
        let mut seen = vec![false; total];
        for &i in m.split.train.iter().chain(&m.split.val).chain(&m.split.test) {
            if i >= total || std::mem::replace(&mut seen[i], true) {
                return Err(DataError::InvalidArgument(format!(
                    "{}: split index {i} is out of range or repeated",
                    path.display()
                )));
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eighty_ten_ten() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = split_dataset(10, [0.8, 0.1, 0.1], &mut rng).unwrap();
        assert_eq!(s.sizes(), (8, 1, 1));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = split_dataset(50, [0.6, 0.2, 0.2], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = split_dataset(50, [0.6, 0.2, 0.2], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disjoint_and_covering_over_many_seeds() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = split_dataset(1000, [0.7, 0.15, 0.15], &mut rng).unwrap();
            let mut seen = vec![0u8; 1000];
            for &i in s.train.iter().chain(&s.val).chain(&s.test) {
                seen[i] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(split_dataset(2, [0.8, 0.1, 0.1], &mut rng).is_err());
        assert!(split_dataset(10, [0.8, 0.1, 0.2], &mut rng).is_err());
        assert!(split_dataset(10, [1.0, 0.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = DatasetManifest {
            files: vec!["a.xyz".into()],
            frames_per_file: vec![3],
            split: DatasetSplit {
                train: vec![0, 2],
                val: vec![1],
                test: vec![],
            },
        };
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }
}
