//! Second-order smoothness penalty on a displacement grid.

use crate::grid::{linear_index, DisplacementField};

/// Mean squared second difference over the three components and the three
/// axes, with its exact gradient. Each axis contributes at every voxel that
/// has both neighbours along that axis, so only fields that are linear along
/// every axis (trilinear in the corners) cost nothing.
///
/// A grid shorter than three voxels along every axis has no terms; the
/// energy is then zero.
pub fn bending_energy(u: &DisplacementField) -> (f64, Vec<f64>) {
    let dims = u.dims();
    let data = u.data();
    let mut grad = vec![0.0; data.len()];
    let terms: usize = (0..3)
        .map(|a| if dims[a] < 3 { 0 } else { (dims[a] - 2) * dims[(a + 1) % 3] * dims[(a + 2) % 3] })
        .sum();
    if terms == 0 {
        return (0.0, grad);
    }
    let norm = (terms * 3) as f64;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut value = 0.0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let i = linear_index(dims, x, y, z);
                for (a, (s, c)) in strides.iter().zip([x, y, z]).enumerate() {
                    if c == 0 || c + 1 >= dims[a] {
                        continue;
                    }
                    let (lo, hi) = (i - s, i + s);
                    for c in 0..3 {
                        let d2 = data[hi * 3 + c] - 2.0 * data[i * 3 + c] + data[lo * 3 + c];
                        value += d2 * d2;
                        let g = 2.0 * d2 / norm;
                        grad[hi * 3 + c] += g;
                        grad[i * 3 + c] -= 2.0 * g;
                        grad[lo * 3 + c] += g;
                    }
                }
            }
        }
    }
    (value / norm, grad)
}
