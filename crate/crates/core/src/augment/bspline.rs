use serde::{Deserialize, Serialize};

/// Control-point displacements of a uniform cubic B-spline grid spanning the
/// volume, `points_per_axis` per axis, x fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlLattice {
    pub points_per_axis: usize,
    pub displacements: Vec<[f64; 3]>,
}

impl ControlLattice {
    pub fn zeros(points_per_axis: usize) -> Self {
        ControlLattice {
            points_per_axis,
            displacements: vec![[0.0; 3]; points_per_axis.pow(3)],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.displacements.iter().all(|d| d.iter().all(|&c| c == 0.0))
    }

    fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let n = self.points_per_axis;
        self.displacements[i + n * (j + n * k)]
    }
}

#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Displacement at `point` (voxel coordinates) of a volume with `dims`.
///
/// Control points sit at equal spacing from the first to the last voxel;
/// indices beyond the lattice are clamped, so the basis weights always form
/// a partition of unity and every component is bounded by the largest
/// control displacement.
pub fn elastic_displacement(lattice: &ControlLattice, dims: [usize; 3], point: [f64; 3]) -> [f64; 3] {
    let n = lattice.points_per_axis;
    if n == 0 {
        return [0.0; 3];
    }
    let mut base = [0isize; 3];
    let mut w = [[0.0; 4]; 3];
    for a in 0..3 {
        let u = if dims[a] > 1 && n > 1 {
            point[a] * (n - 1) as f64 / (dims[a] - 1) as f64
        } else {
            0.0
        };
        let fl = u.floor();
        base[a] = fl as isize - 1;
        w[a] = cubic_weights(u - fl);
    }
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut out = [0.0; 3];
    for (dk, wk) in w[2].iter().enumerate() {
        let k = clamp(base[2] + dk as isize);
        for (dj, wj) in w[1].iter().enumerate() {
            let j = clamp(base[1] + dj as isize);
            let wjk = wj * wk;
            for (di, wi) in w[0].iter().enumerate() {
                let i = clamp(base[0] + di as isize);
                let c = lattice.at(i, j, k);
                let weight = wi * wjk;
                out[0] += weight * c[0];
                out[1] += weight * c[1];
                out[2] += weight * c[2];
            }
        }
    }
    out
}
