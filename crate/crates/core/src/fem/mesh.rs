//! Structured Lagrange quadrilateral meshes of a rectangle.

use serde::{Deserialize, Serialize};

/// Shape-function order of the quadrilateral elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    /// Bilinear, 4 nodes.
    Q4,
    /// Biquadratic, 9 nodes.
    Q9,
}

impl ElementKind {
    pub fn order(self) -> usize {
        match self {
            ElementKind::Q4 => 1,
            ElementKind::Q9 => 2,
        }
    }
}

/// Gauss–Legendre rule with three points on [-1, 1]; exact to degree 5.
pub(crate) const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

/// 1D Lagrange basis of order `p` on equispaced nodes of [-1, 1] and its derivative.
pub(crate) fn lagrange_1d(p: usize, t: f64) -> ([f64; 3], [f64; 3]) {
    let mut val = [0.0; 3];
    let mut der = [0.0; 3];
    let node = |k: usize| -1.0 + 2.0 * k as f64 / p as f64;
    for a in 0..=p {
        let mut v = 1.0;
        let mut dv = 0.0;
        for k in (0..=p).filter(|&k| k != a) {
            let denom = node(a) - node(k);
            let factor = (t - node(k)) / denom;
            dv = dv * factor + v / denom;
            v *= factor;
        }
        val[a] = v;
        der[a] = dv;
    }
    (val, der)
}

/// Structured grid of `nx × nz` elements over `[0, length] × [0, height]`.
///
/// Element columns may have different widths so that prescribed points on the
/// horizontal edges (electrode ends) fall on element boundaries. Nodes are
/// numbered column by column (all `z` for the first `x`, then the next `x`),
/// which keeps the semi-bandwidth proportional to the short side.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub kind: ElementKind,
    pub nx: usize,
    pub nz: usize,
    pub length: f64,
    pub height: f64,
    x_breaks: Vec<f64>,
}

impl Mesh {
    pub fn new(kind: ElementKind, nx: usize, nz: usize, length: f64, height: f64) -> Self {
        assert!(nx > 0 && nz > 0, "mesh needs at least one element per direction");
        let x_breaks = (0..=nx).map(|k| length * k as f64 / nx as f64).collect();
        Self {
            kind,
            nx,
            nz,
            length,
            height,
            x_breaks,
        }
    }

    /// Splits `[0, length]` at `points` and shares `nx` element columns among
    /// the pieces in proportion to their lengths (largest remainder, at least
    /// one per piece). Falls back to a uniform grid when `nx` is too small.
    pub fn fitted(kind: ElementKind, nx: usize, nz: usize, length: f64, height: f64, points: &[f64]) -> Self {
        let mut cuts: Vec<f64> = points.iter().copied().filter(|x| *x > 0.0 && *x < length).collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * length);
        let mut ends = vec![0.0];
        ends.extend(cuts);
        ends.push(length);
        let pieces = ends.len() - 1;
        if nx < pieces {
            return Self::new(kind, nx, nz, length, height);
        }
        let share: Vec<f64> = ends.windows(2).map(|w| (w[1] - w[0]) / length * nx as f64).collect();
        let mut counts: Vec<usize> = share.iter().map(|s| (s.floor() as usize).max(1)).collect();
        // hand out the remaining columns to mirror pairs of pieces, so a
        // symmetric set of points gives a symmetric mesh
        loop {
            let missing = nx - counts.iter().sum::<usize>();
            if missing == 0 {
                break;
            }
            let best = (0..pieces.div_ceil(2))
                .filter(|&k| if 2 * k + 1 == pieces { 1 } else { 2 } <= missing)
                .max_by(|&a, &b| {
                    let ra = share[a] - counts[a] as f64;
                    let rb = share[b] - counts[b] as f64;
                    ra.total_cmp(&rb).then(b.cmp(&a))
                });
            let Some(k) = best else {
                // an odd remainder without a middle piece: give it to the first piece
                counts[0] += 1;
                continue;
            };
            counts[k] += 1;
            if 2 * k + 1 != pieces {
                counts[pieces - 1 - k] += 1;
            }
        }
        while counts.iter().sum::<usize>() > nx {
            let k = (0..pieces)
                .filter(|&k| counts[k] > 1)
                .min_by(|&a, &b| {
                    let ra = share[a] - counts[a] as f64;
                    let rb = share[b] - counts[b] as f64;
                    ra.total_cmp(&rb).then(a.cmp(&b))
                })
                .expect("some piece has spare elements");
            counts[k] -= 1;
        }
        let mut x_breaks = vec![0.0];
        for (w, c) in ends.windows(2).zip(&counts) {
            for j in 1..=*c {
                x_breaks.push(w[0] + (w[1] - w[0]) * j as f64 / *c as f64);
            }
        }
        *x_breaks.last_mut().expect("nonempty") = length;
        Self {
            kind,
            nx,
            nz,
            length,
            height,
            x_breaks,
        }
    }

    pub fn order(&self) -> usize {
        self.kind.order()
    }

    pub fn nodes_x(&self) -> usize {
        self.order() * self.nx + 1
    }

    pub fn nodes_z(&self) -> usize {
        self.order() * self.nz + 1
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes_x() * self.nodes_z()
    }

    pub fn num_elements(&self) -> usize {
        self.nx * self.nz
    }

    pub fn x_breaks(&self) -> &[f64] {
        &self.x_breaks
    }

    pub fn node(&self, ix: usize, iz: usize) -> usize {
        ix * self.nodes_z() + iz
    }

    pub fn node_coords(&self, node: usize) -> (f64, f64) {
        let p = self.order();
        let ix = node / self.nodes_z();
        let iz = node % self.nodes_z();
        let (ex, a) = (ix / p, ix % p);
        let x = if ex == self.nx {
            self.length
        } else {
            let (x0, x1) = (self.x_breaks[ex], self.x_breaks[ex + 1]);
            x0 + (x1 - x0) * a as f64 / p as f64
        };
        (x, self.height * iz as f64 / (self.nodes_z() - 1) as f64)
    }

    /// Width and height of element `(ex, ·)`.
    pub fn element_size(&self, ex: usize) -> (f64, f64) {
        (self.x_breaks[ex + 1] - self.x_breaks[ex], self.height / self.nz as f64)
    }

    /// Lower-left corner of element `(ex, ez)`.
    pub fn element_origin(&self, ex: usize, ez: usize) -> (f64, f64) {
        (self.x_breaks[ex], ez as f64 * self.height / self.nz as f64)
    }

    /// Global node of local node `(a, b)`, `a` along x and `b` along z.
    pub fn element_node(&self, ex: usize, ez: usize, a: usize, b: usize) -> usize {
        let p = self.order();
        self.node(p * ex + a, p * ez + b)
    }

    /// Global nodes of an element in local order `a * (p + 1) + b`.
    pub fn element_nodes(&self, ex: usize, ez: usize) -> Vec<usize> {
        let p = self.order();
        let mut out = Vec::with_capacity((p + 1) * (p + 1));
        for a in 0..=p {
            for b in 0..=p {
                out.push(self.element_node(ex, ez, a, b));
            }
        }
        out
    }

    /// Largest node-index difference within any element.
    pub fn semi_bandwidth(&self) -> usize {
        let p = self.order();
        p * self.nodes_z() + p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lagrange_partition_of_unity() {
        for p in 1..=2 {
            for t in [-1.0, -0.3, 0.0, 0.55, 1.0] {
                let (v, d) = lagrange_1d(p, t);
                let s: f64 = v[..=p].iter().sum();
                let ds: f64 = d[..=p].iter().sum();
                assert!((s - 1.0).abs() < 1e-14);
                assert!(ds.abs() < 1e-13);
            }
        }
        let (v, _) = lagrange_1d(2, 0.0);
        assert_eq!(v, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn lagrange_derivative_matches_difference() {
        let h = 1e-6;
        for t in [-0.7, 0.1, 0.9] {
            let (_, d) = lagrange_1d(2, t);
            let (vp, _) = lagrange_1d(2, t + h);
            let (vm, _) = lagrange_1d(2, t - h);
            for a in 0..3 {
                assert!((d[a] - (vp[a] - vm[a]) / (2.0 * h)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn default_mesh_sizes() {
        let m = Mesh::new(ElementKind::Q9, 50, 6, 20.0, 2.0);
        assert_eq!(m.num_nodes(), 101 * 13);
        assert_eq!(m.semi_bandwidth(), 28);
        assert_eq!(m.node_coords(m.node(100, 12)), (20.0, 2.0));
        let nodes = m.element_nodes(1, 0);
        assert_eq!(nodes[0], m.node(2, 0));
        assert_eq!(nodes[8], m.node(4, 2));
        assert_eq!(m.node_coords(m.node(6, 1)), (1.2, 1.0 / 6.0));
    }

    #[test]
    fn fitted_mesh_hits_points() {
        let gap = 5.0 / 3.0;
        let points: Vec<f64> = (0..5)
            .flat_map(|k| {
                let s = gap + k as f64 * (2.0 + gap);
                [s, s + 2.0]
            })
            .collect();
        let m = Mesh::fitted(ElementKind::Q9, 50, 6, 20.0, 2.0, &points);
        assert_eq!(m.x_breaks().len(), 51);
        for p in &points {
            assert!(m.x_breaks().iter().any(|x| (x - p).abs() < 1e-12));
        }
        assert!(m.x_breaks().windows(2).all(|w| w[1] > w[0]));
        for (a, b) in m.x_breaks().iter().zip(m.x_breaks().iter().rev()) {
            assert!((a + b - 20.0).abs() < 1e-12);
        }
        let coarse = Mesh::fitted(ElementKind::Q4, 5, 1, 20.0, 2.0, &points);
        assert_eq!(coarse.x_breaks().len(), 6);
    }
}
