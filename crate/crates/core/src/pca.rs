//! Principal axes of the anchor positions and the coordinate maps built on them.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{CodecError, Result};

/// Mean and principal directions of a point set.
///
/// `directions` holds PC1, PC2, PC3 as rows, ordered by descending
/// eigenvalue. Each row is signed so that its largest-magnitude component
/// is positive, which makes the fit deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: [f64; 3],
    pub directions: [[f64; 3]; 3],
    /// Population variances along each direction. Zero for a basis rebuilt
    /// from transmitted values, which do not carry them.
    pub eigenvalues: [f64; 3],
    /// The f32 directions this basis is rebuilt from. Transmitting these
    /// rather than `directions` keeps the rebuild exact on the decoder side.
    pub stored_directions: [[f32; 3]; 3],
}

impl PcaBasis {
    pub fn identity() -> Self {
        PcaBasis {
            mean: [0.0; 3],
            directions: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            eigenvalues: [0.0; 3],
            stored_directions: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rebuilds a basis from f32 mean and directions; Gram-Schmidt restores
    /// exact orthonormality so encoder and decoder share one frame.
    pub fn from_transmitted(mean: [f32; 3], directions: [[f32; 3]; 3]) -> Self {
        let rows: Vec<Vector3<f64>> = directions
            .iter()
            .map(|r| Vector3::new(r[0] as f64, r[1] as f64, r[2] as f64))
            .collect();
        let e0 = rows[0].normalize();
        let e1 = (rows[1] - e0 * e0.dot(&rows[1])).normalize();
        let e2 = e0.cross(&e1);
        let e2 = if e2.dot(&rows[2]) < 0.0 { -e2 } else { e2 };
        PcaBasis {
            mean: mean.map(|v| v as f64),
            directions: [e0.into(), e1.into(), e2.into()],
            eigenvalues: [0.0; 3],
            stored_directions: directions,
        }
    }

    /// The basis rounded to its transmitted precision.
    pub fn transmitted(&self) -> Self {
        PcaBasis::from_transmitted(
            self.mean.map(|v| v as f32),
            self.directions.map(|r| r.map(|v| v as f32)),
        )
    }

    pub fn to_pca(&self, x: &[f64; 3]) -> [f64; 3] {
        let d = [x[0] - self.mean[0], x[1] - self.mean[1], x[2] - self.mean[2]];
        self.directions.map(|row| row[0] * d[0] + row[1] * d[1] + row[2] * d[2])
    }

    pub fn from_pca(&self, xp: &[f64; 3]) -> [f64; 3] {
        let r = &self.directions;
        std::array::from_fn(|c| self.mean[c] + r[0][c] * xp[0] + r[1][c] * xp[1] + r[2][c] * xp[2])
    }
}

pub fn fit_pca(points: &[[f64; 3]]) -> Result<PcaBasis> {
    if points.len() < 4 {
        return Err(CodecError::Degenerate(format!(
            "PCA needs at least 4 points, got {}",
            points.len()
        )));
    }
    if points.iter().all(|p| p == &points[0]) {
        return Err(CodecError::Degenerate("all points are identical".into()));
    }
    let n = points.len() as f64;
    let mut mean = Vector3::zeros();
    for p in points {
        mean += Vector3::from(*p);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - mean;
        cov += d * d.transpose();
    }
    cov /= n;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    // Stable sort keeps the solver's order for ties.
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut directions = [[0.0; 3]; 3];
    let mut eigenvalues = [0.0; 3];
    for (row, &k) in order.iter().enumerate() {
        let mut v: Vector3<f64> = eig.eigenvectors.column(k).into_owned();
        v.normalize_mut();
        let lead = (0..3).fold(0, |best, c| if v[c].abs() > v[best].abs() { c } else { best });
        if v[lead] < 0.0 {
            v = -v;
        }
        directions[row] = v.into();
        eigenvalues[row] = eig.eigenvalues[k].max(0.0);
    }
    Ok(PcaBasis {
        mean: mean.into(),
        directions,
        eigenvalues,
        stored_directions: directions.map(|r| r.map(|v| v as f32)),
    })
}

/// Axis-aligned extent of the anchors in the PCA frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn of(basis: &PcaBasis, points: &[[f64; 3]]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in points {
            let xp = basis.to_pca(p);
            for c in 0..3 {
                min[c] = min[c].min(xp[c]);
                max[c] = max[c].max(xp[c]);
            }
        }
        SceneBounds { min, max }
    }

    pub fn transmitted(&self) -> Self {
        let r = |v: [f64; 3]| v.map(|x| (x as f32) as f64);
        SceneBounds {
            min: r(self.min),
            max: r(self.max),
        }
    }
}

/// Maps a PCA-frame point to plane coordinates `(u, v)` in the unit square
/// and an axis coordinate `w` in [-1, 1], clamping anything outside the bounds.
pub fn normalize_coords(bounds: &SceneBounds, xp: &[f64; 3]) -> [f64; 3] {
    let unit = |c: usize| {
        let extent = bounds.max[c] - bounds.min[c];
        if extent > 0.0 {
            ((xp[c] - bounds.min[c]) / extent).clamp(0.0, 1.0)
        } else {
            0.5
        }
    };
    [unit(0), unit(1), 2.0 * unit(2) - 1.0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    #[test]
    fn collinear_points() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let pts: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 * s, i as f64 * s, 0.0]).collect();
        let b = fit_pca(&pts).unwrap();
        assert!((b.directions[0][0] - s).abs() < 1e-9);
        assert!((b.directions[0][1] - s).abs() < 1e-9);
        assert!(b.directions[0][2].abs() < 1e-9);
        assert!(b.eigenvalues[1].abs() < 1e-9 && b.eigenvalues[2].abs() < 1e-9);
    }

    #[test]
    fn coplanar_points() {
        let pts = [
            [0.0, 0.0, 2.0],
            [1.0, 0.0, 2.0],
            [0.0, 3.0, 2.0],
            [4.0, 1.0, 2.0],
            [2.0, 2.0, 2.0],
        ];
        let b = fit_pca(&pts).unwrap();
        assert!(b.eigenvalues[2].abs() < 1e-9);
        assert!(b.directions[2][2] > 0.999_999);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(fit_pca(&[[1.0, 2.0, 3.0]; 6]), Err(CodecError::Degenerate(_))));
        assert!(fit_pca(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).is_err());
    }

    #[test]
    fn orthonormal_sorted_and_signed() {
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|i| {
                let t = i as f64;
                [
                    (t * 0.7).sin() * 5.0 + t * 0.1,
                    (t * 1.3).cos() * 2.0,
                    (t * 2.9).sin() * 0.5 - t * 0.02,
                ]
            })
            .collect();
        let b = fit_pca(&pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&b.directions[i], &b.directions[j]) - expect).abs() < 1e-9);
            }
            let row = b.directions[i];
            let lead = (0..3).max_by(|&x, &y| row[x].abs().total_cmp(&row[y].abs())).unwrap();
            assert!(row[lead] > 0.0);
        }
        assert!(b.eigenvalues[0] >= b.eigenvalues[1] && b.eigenvalues[1] >= b.eigenvalues[2]);
        // Each eigenvalue is the variance of the projections.
        for k in 0..3 {
            let proj: Vec<f64> = pts.iter().map(|p| b.to_pca(p)[k]).collect();
            let var = proj.iter().map(|v| v * v).sum::<f64>() / proj.len() as f64;
            assert!((var - b.eigenvalues[k]).abs() <= 1e-9 * b.eigenvalues[k].max(1e-12));
        }
    }

    #[test]
    fn frame_maps() {
        let b = PcaBasis::identity();
        assert_eq!(b.to_pca(&[1.0, -2.0, 3.5]), [1.0, -2.0, 3.5]);
        assert_eq!(b.from_pca(&[1.0, -2.0, 3.5]), [1.0, -2.0, 3.5]);
        let pts = [
            [0.0, 0.0, 0.0],
            [2.0, 1.0, 0.0],
            [1.0, 3.0, 1.0],
            [4.0, 0.5, 2.0],
            [1.0, 1.0, 5.0],
        ];
        let b = fit_pca(&pts).unwrap();
        assert!(b.to_pca(&b.mean).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(b.from_pca(&[0.0; 3]), b.mean);
    }

    #[test]
    fn transmitted_basis_is_orthonormal() {
        let pts = [
            [0.0, 0.0, 0.0],
            [2.0, 1.0, 0.3],
            [1.0, 3.0, 1.0],
            [4.0, 0.5, 2.0],
            [1.0, 1.0, 5.0],
        ];
        let full = fit_pca(&pts).unwrap();
        let b = full.transmitted();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&b.directions[i], &b.directions[j]) - expect).abs() < 1e-14);
            }
        }
        for (r, s) in b.directions.iter().zip(&full.directions) {
            assert!(r.iter().zip(s).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn coordinate_normalization() {
        let bounds = SceneBounds {
            min: [-2.0, 0.0, -1.0],
            max: [2.0, 4.0, 3.0],
        };
        assert_eq!(normalize_coords(&bounds, &bounds.min), [0.0, 0.0, -1.0]);
        assert_eq!(normalize_coords(&bounds, &[0.0, 2.0, 1.0]), [0.5, 0.5, 0.0]);
        assert_eq!(normalize_coords(&bounds, &[9.0, -9.0, 9.0]), [1.0, 0.0, 1.0]);
        let flat = SceneBounds {
            min: [1.0; 3],
            max: [1.0; 3],
        };
        assert_eq!(normalize_coords(&flat, &[5.0, 5.0, 5.0]), [0.5, 0.5, 0.0]);
    }
}
