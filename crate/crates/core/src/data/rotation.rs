use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{MolecularFrame, Vec3};

/// Proper rotation in 3D (orthogonal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub const IDENTITY: Self = Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Rotation from a (not necessarily normalized) quaternion `w + xi + yj + zk`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Self([
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ])
    }

    /// Rotation by `angle` radians about the unit axis `axis`.
    pub fn about_axis(axis: Vec3, angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (s, c) = (angle / 2.0).sin_cos();
        Self::from_quaternion(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        let mut t = [[0.0; 3]; 3];
        for (i, row) in t.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[j][i];
            }
        }
        Self(t)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest entry of |RᵀR − I|.
    pub fn orthogonality_error(&self) -> f64 {
        let m = &self.0;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Uniform sample from SO(3): a normalized 4D Gaussian is a uniform unit quaternion.
pub fn random_rotation<G: Rng + ?Sized>(rng: &mut G) -> RotationMatrix {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    RotationMatrix::from_quaternion(q[0], q[1], q[2], q[3])
}

/// Rotate positions and forces (row vectors times Rᵀ). Scalars are untouched.
pub fn augment_rotate(frame: &MolecularFrame, r: &RotationMatrix) -> MolecularFrame {
    let mut out = frame.clone();
    for p in &mut out.positions {
        *p = r.apply(p);
    }
    if let Some(forces) = &mut out.forces {
        for f in forces.iter_mut() {
            *f = r.apply(f);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_are_proper_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            assert!(r.orthogonality_error() < 1e-10);
            assert!((r.determinant() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_so3_entry_statistics() {
        // Under Haar measure every entry has mean 0 and variance 1/3.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut sums = [[0.0f64; 3]; 3];
        for _ in 0..n {
            let r = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    sums[i][j] += r.0[i][j];
                }
            }
        }
        let sigma = (1.0f64 / 3.0 / n as f64).sqrt();
        for row in sums {
            for s in row {
                assert!((s / n as f64).abs() < 3.0 * sigma, "mean {}", s / n as f64);
            }
        }
    }

    #[test]
    fn identity_leaves_frame_unchanged() {
        let f = MolecularFrame::new(vec![1, 8], vec![[0.1, 0.2, 0.3], [1.0, -2.0, 0.5]])
            .unwrap()
            .with_labels(-3.0, vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
            .unwrap();
        assert_eq!(augment_rotate(&f, &RotationMatrix::IDENTITY), f);
    }

    #[test]
    fn axis_rotation_quarter_turn() {
        let r = RotationMatrix::about_axis([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let v = r.apply(&[1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }
}
