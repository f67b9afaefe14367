//! Complete electrode model of a two-ply laminate in the x–z plane.
//!
//! The body `[0, L] × [0, H]` carries two plies separated by a horizontal
//! interface; the top ply has fiber angle `η1`, the bottom ply `η2`. Ten
//! electrodes sit on the top and bottom edges. For given angles the map from
//! electrode currents to electrode potentials is linear, so the forward model
//! computes the full `10 × 9` current-to-voltage matrix `G(q)` once per `q` and
//! uses it both as `h(q, d) = G(q) d` and as the design Jacobian.

mod mesh;
mod sparse;

pub use mesh::{ElementKind, Mesh};
pub use sparse::{BandedCholesky, CsrMatrix};

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::forward::{AbsLinearConstraint, DesignDomain, EvalCounter, ForwardModel, ModelDims};
use crate::prob::UniformBoxRv;
use mesh::{lagrange_1d, GAUSS3};

pub const NUM_ELECTRODES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Top,
    Bottom,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub edge: Edge,
    pub start: f64,
    pub end: f64,
}

impl Electrode {
    pub fn width(&self) -> f64 {
        self.end - self.start
    }
}

/// How electrodes 6..10 on the bottom edge are numbered.
/// Electrodes 1..5 always run left to right along the top edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElectrodeNumbering {
    /// Bottom electrodes run left to right, so electrode `k` sits under `k + 5`.
    LeftToRight,
    /// Bottom electrodes run right to left, numbering around the boundary.
    AroundBoundary,
}

/// Body, plies, electrodes and contact impedance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EitGeometry {
    pub length: f64,
    pub height: f64,
    /// Height of the ply interface; the top ply lies above it.
    pub interface: f64,
    pub electrodes: Vec<Electrode>,
    pub contact_impedance: f64,
}

impl EitGeometry {
    /// `[0, 20] × [0, 2]`, interface at mid-height, five electrodes of width 2
    /// per edge separated by equal gaps, contact impedance 0.1.
    pub fn standard(numbering: ElectrodeNumbering) -> Self {
        let (length, height) = (20.0, 2.0);
        let width = 2.0;
        let gap = (length - 5.0 * width) / 6.0;
        let span = |k: usize| {
            let start = gap + k as f64 * (width + gap);
            (start, start + width)
        };
        let mut electrodes = Vec::with_capacity(NUM_ELECTRODES);
        for k in 0..5 {
            let (start, end) = span(k);
            electrodes.push(Electrode {
                edge: Edge::Top,
                start,
                end,
            });
        }
        for k in 0..5 {
            let slot = match numbering {
                ElectrodeNumbering::LeftToRight => k,
                ElectrodeNumbering::AroundBoundary => 4 - k,
            };
            let (start, end) = span(slot);
            electrodes.push(Electrode {
                edge: Edge::Bottom,
                start,
                end,
            });
        }
        Self {
            length,
            height,
            interface: 1.0,
            electrodes,
            contact_impedance: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.electrodes.len() != NUM_ELECTRODES {
            return Err(Error::InvalidArgument(format!(
                "expected {NUM_ELECTRODES} electrodes, got {}",
                self.electrodes.len()
            )));
        }
        if !(self.length > 0.0 && self.height > 0.0 && self.contact_impedance > 0.0) {
            return Err(Error::InvalidArgument("non-positive geometry parameter".into()));
        }
        if !(self.interface > 0.0 && self.interface < self.height) {
            return Err(Error::InvalidArgument("ply interface outside the body".into()));
        }
        for (i, e) in self.electrodes.iter().enumerate() {
            // strict inequalities keep electrodes off the corners
            if !(e.start > 0.0 && e.end < self.length && e.start < e.end) {
                return Err(Error::InvalidArgument(format!("electrode {} is misplaced", i + 1)));
            }
            for f in &self.electrodes[i + 1..] {
                if e.edge == f.edge && e.start < f.end && f.start < e.end {
                    return Err(Error::InvalidArgument("overlapping electrodes".into()));
                }
            }
        }
        Ok(())
    }
}

/// Orthotropic ply conductivity rotated by the fiber angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlyConductivity {
    /// Principal conductivities `diag(σ̄)`.
    pub base: [f64; 3],
}

impl Default for PlyConductivity {
    fn default() -> Self {
        Self {
            base: [1e-2, 1e-3, 1e-3],
        }
    }
}

impl PlyConductivity {
    /// `(x, z)` block of `R(η)ᵀ diag(σ̄) R(η)` with `R` rotating in the x–z plane.
    pub fn in_plane(&self, eta: f64) -> Result<[[f64; 2]; 2]> {
        if !eta.is_finite() {
            return Err(Error::InvalidArgument(format!("fiber angle {eta}")));
        }
        let (s, c) = eta.sin_cos();
        let r = SMatrix::<f64, 3, 3>::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        let sigma = r.transpose() * SMatrix::<f64, 3, 3>::from_diagonal(&SVector::from(self.base)) * r;
        let t = [[sigma[(0, 0)], sigma[(0, 2)]], [sigma[(2, 0)], sigma[(2, 2)]]];
        let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
        if !(t[0][0] > 0.0 && det > 0.0) {
            return Err(Error::NotPositiveDefinite(format!("{t:?} at angle {eta}")));
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    pub nx: usize,
    pub nz: usize,
    pub element: ElementKind,
    /// Place element boundaries on the electrode ends.
    #[serde(default = "default_fit")]
    pub fit_electrodes: bool,
}

fn default_fit() -> bool {
    true
}

impl Default for MeshSpec {
    fn default() -> Self {
        Self {
            nx: 50,
            nz: 6,
            element: ElementKind::Q9,
            fit_electrodes: true,
        }
    }
}

impl MeshSpec {
    /// Same mesh with `factor` times as many elements per direction.
    pub fn refined(self, factor: usize) -> Self {
        Self {
            nx: self.nx * factor,
            nz: self.nz * factor,
            ..self
        }
    }
}

/// Assembled system
///
/// ```text
/// [ K + M   C   0 ] [u]   [0]
/// [ Cᵀ      D   1 ] [U] = [I]
/// [ 0       1ᵀ  0 ] [λ]   [0]
/// ```
///
/// with the last row imposing `Σ U_l = 0`.
#[derive(Clone, Debug)]
pub struct FemSystem {
    pub matrix: CsrMatrix,
    pub num_nodes: usize,
    pub bandwidth: usize,
}

impl FemSystem {
    pub fn dim(&self) -> usize {
        self.num_nodes + NUM_ELECTRODES + 1
    }

    pub fn electrode_index(&self, l: usize) -> usize {
        self.num_nodes + l
    }

    /// Factors the interior block and forms the electrode Schur complement.
    pub fn factor(&self) -> Result<FactoredSystem> {
        let n = self.num_nodes;
        let chol = BandedCholesky::factor(&self.matrix, n, self.bandwidth)?;
        let mut coupling = DMatrix::zeros(n, NUM_ELECTRODES);
        for i in 0..n {
            for (j, v) in self.matrix.row(i) {
                if j >= n && j < n + NUM_ELECTRODES {
                    coupling[(i, j - n)] = v;
                }
            }
        }
        let mut x = coupling.clone();
        for l in 0..NUM_ELECTRODES {
            chol.solve_in_place(x.column_mut(l).as_mut_slice());
        }
        // bordered Schur complement [[D - CᵀX, 1], [1ᵀ, 0]]
        let mut bordered = DMatrix::zeros(NUM_ELECTRODES + 1, NUM_ELECTRODES + 1);
        let ctx = coupling.transpose() * &x;
        for l in 0..NUM_ELECTRODES {
            for k in 0..NUM_ELECTRODES {
                bordered[(l, k)] = self.matrix.get(n + l, n + k) - ctx[(l, k)];
            }
            bordered[(l, NUM_ELECTRODES)] = self.matrix.get(n + l, n + NUM_ELECTRODES);
            bordered[(NUM_ELECTRODES, l)] = self.matrix.get(n + NUM_ELECTRODES, n + l);
        }
        let inverse = bordered
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("electrode Schur complement".into()))?;
        Ok(FactoredSystem {
            x,
            inverse,
            num_nodes: n,
        })
    }
}

/// Interior solves `X = (K + M)⁻¹ C` and the inverse of the bordered Schur complement.
#[derive(Clone, Debug)]
pub struct FactoredSystem {
    x: DMatrix<f64>,
    inverse: DMatrix<f64>,
    num_nodes: usize,
}

/// Solution of one current pattern.
#[derive(Clone, Debug)]
pub struct FemSolution {
    pub nodal: DVector<f64>,
    pub electrode: DVector<f64>,
    pub multiplier: f64,
}

impl FactoredSystem {
    /// Electrode potentials per unit current on each electrode, `10 × 10`.
    /// Symmetric because the bilinear form is.
    pub fn impedance(&self) -> DMatrix<f64> {
        self.inverse.view((0, 0), (NUM_ELECTRODES, NUM_ELECTRODES)).into_owned()
    }

    /// `G(q)` with `I_10 = -Σ I_l` folded in: column `k` is the response to `e_k - e_10`.
    pub fn current_to_voltage(&self) -> DMatrix<f64> {
        let z = self.impedance();
        let last = NUM_ELECTRODES - 1;
        DMatrix::from_fn(NUM_ELECTRODES, NUM_ELECTRODES - 1, |j, k| z[(j, k)] - z[(j, last)])
    }

    pub fn solve(&self, currents: &[f64]) -> Result<FemSolution> {
        check_dim(NUM_ELECTRODES, currents.len())?;
        check_kirchhoff(currents)?;
        let mut rhs = DVector::zeros(NUM_ELECTRODES + 1);
        rhs.rows_mut(0, NUM_ELECTRODES).copy_from_slice(currents);
        let sol = &self.inverse * rhs;
        let electrode = sol.rows(0, NUM_ELECTRODES).into_owned();
        let nodal = -(&self.x * &electrode);
        debug_assert_eq!(nodal.len(), self.num_nodes);
        Ok(FemSolution {
            nodal,
            electrode,
            multiplier: sol[NUM_ELECTRODES],
        })
    }
}

fn check_kirchhoff(currents: &[f64]) -> Result<()> {
    let sum: f64 = currents.iter().sum();
    let scale = currents.iter().map(|c| c.abs()).sum::<f64>().max(1.0);
    if sum.abs() > 1e-12 * scale {
        return Err(Error::KirchhoffViolation(sum));
    }
    Ok(())
}

/// Full 10-electrode currents from the nine free ones.
pub fn full_currents(d: &[f64]) -> Vec<f64> {
    let mut out = d.to_vec();
    out.push(-d.iter().sum::<f64>());
    out
}

/// Discretizes the complete electrode model for fiber angles `(η1, η2)`.
pub struct EitSolver {
    geometry: EitGeometry,
    mesh: Mesh,
    conductivity: PlyConductivity,
}

impl EitSolver {
    pub fn new(geometry: EitGeometry, mesh: MeshSpec, conductivity: PlyConductivity) -> Result<Self> {
        geometry.validate()?;
        if mesh.nx == 0 || mesh.nz == 0 {
            return Err(Error::InvalidArgument("empty mesh".into()));
        }
        let mesh = if mesh.fit_electrodes {
            let ends: Vec<f64> = geometry.electrodes.iter().flat_map(|e| [e.start, e.end]).collect();
            Mesh::fitted(mesh.element, mesh.nx, mesh.nz, geometry.length, geometry.height, &ends)
        } else {
            Mesh::new(mesh.element, mesh.nx, mesh.nz, geometry.length, geometry.height)
        };
        Ok(Self {
            geometry,
            mesh,
            conductivity,
        })
    }

    pub fn geometry(&self) -> &EitGeometry {
        &self.geometry
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn assemble(&self, angles: &[f64]) -> Result<FemSystem> {
        check_dim(2, angles.len())?;
        let sigma_top = self.conductivity.in_plane(angles[0])?;
        let sigma_bottom = self.conductivity.in_plane(angles[1])?;
        let mesh = &self.mesh;
        let p = mesh.order();
        let nloc = (p + 1) * (p + 1);
        let n = mesh.num_nodes();
        let element_matrix = |sigma: &[[f64; 2]; 2], hx: f64, hz: f64| {
            let det = 0.25 * hx * hz;
            let mut ke = vec![0.0; nloc * nloc];
            for &(gx, wx) in &GAUSS3 {
                let (vx, dx) = lagrange_1d(p, gx);
                for &(gz, wz) in &GAUSS3 {
                    let (vz, dz) = lagrange_1d(p, gz);
                    let mut grad = vec![[0.0; 2]; nloc];
                    for a in 0..=p {
                        for b in 0..=p {
                            grad[a * (p + 1) + b] = [dx[a] * vz[b] * 2.0 / hx, vx[a] * dz[b] * 2.0 / hz];
                        }
                    }
                    let w = wx * wz * det;
                    for i in 0..nloc {
                        let sg = [
                            sigma[0][0] * grad[i][0] + sigma[0][1] * grad[i][1],
                            sigma[1][0] * grad[i][0] + sigma[1][1] * grad[i][1],
                        ];
                        for j in 0..nloc {
                            ke[i * nloc + j] += w * (sg[0] * grad[j][0] + sg[1] * grad[j][1]);
                        }
                    }
                }
            }
            ke
        };

        let mut triplets = Vec::with_capacity(mesh.num_elements() * nloc * nloc + 64 * n / mesh.nodes_z());
        for ex in 0..mesh.nx {
            let (hx, hz) = mesh.element_size(ex);
            let k_top = element_matrix(&sigma_top, hx, hz);
            let k_bottom = element_matrix(&sigma_bottom, hx, hz);
            for ez in 0..mesh.nz {
                let (_, z0) = mesh.element_origin(ex, ez);
                let ke = if z0 + 0.5 * hz > self.geometry.interface {
                    &k_top
                } else {
                    &k_bottom
                };
                let nodes = mesh.element_nodes(ex, ez);
                for i in 0..nloc {
                    for j in 0..nloc {
                        triplets.push((nodes[i], nodes[j], ke[i * nloc + j]));
                    }
                }
            }
        }

        let inv_z = 1.0 / self.geometry.contact_impedance;
        for (l, el) in self.geometry.electrodes.iter().enumerate() {
            let row_u = n + l;
            let (ez, b) = match el.edge {
                Edge::Top => (mesh.nz - 1, p),
                Edge::Bottom => (0, 0),
            };
            for ex in 0..mesh.nx {
                let (x0, _) = mesh.element_origin(ex, ez);
                let (hx, _) = mesh.element_size(ex);
                let lo = el.start.max(x0);
                let hi = el.end.min(x0 + hx);
                if hi <= lo {
                    continue;
                }
                let nodes: Vec<usize> = (0..=p).map(|a| mesh.element_node(ex, ez, a, b)).collect();
                let half = 0.5 * (hi - lo);
                let mid = 0.5 * (hi + lo);
                let mut mass = [[0.0; 3]; 3];
                let mut load = [0.0; 3];
                for &(g, w) in &GAUSS3 {
                    let x = mid + half * g;
                    let t = 2.0 * (x - x0) / hx - 1.0;
                    let (v, _) = lagrange_1d(p, t);
                    for i in 0..=p {
                        load[i] += w * half * v[i];
                        for j in 0..=p {
                            mass[i][j] += w * half * v[i] * v[j];
                        }
                    }
                }
                for i in 0..=p {
                    for j in 0..=p {
                        triplets.push((nodes[i], nodes[j], inv_z * mass[i][j]));
                    }
                    triplets.push((nodes[i], row_u, -inv_z * load[i]));
                    triplets.push((row_u, nodes[i], -inv_z * load[i]));
                }
            }
            triplets.push((row_u, row_u, el.width() * inv_z));
            triplets.push((row_u, n + NUM_ELECTRODES, 1.0));
            triplets.push((n + NUM_ELECTRODES, row_u, 1.0));
        }
        let dim = n + NUM_ELECTRODES + 1;
        Ok(FemSystem {
            matrix: CsrMatrix::from_triplets(dim, dim, triplets),
            num_nodes: n,
            bandwidth: mesh.semi_bandwidth(),
        })
    }

    pub fn factor(&self, angles: &[f64]) -> Result<FactoredSystem> {
        self.assemble(angles)?.factor()
    }

    /// Electrode potentials for all ten currents.
    pub fn solve(&self, angles: &[f64], currents: &[f64]) -> Result<FemSolution> {
        check_dim(NUM_ELECTRODES, currents.len())?;
        check_kirchhoff(currents)?;
        self.factor(angles)?.solve(currents)
    }

    pub fn current_to_voltage_map(&self, angles: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.factor(angles)?.current_to_voltage())
    }
}

/// `[-1, 1]⁹` with `|Σ I_l| ≤ 1`.
pub fn current_design_domain() -> DesignDomain {
    DesignDomain::new(
        vec![-1.0; NUM_ELECTRODES - 1],
        vec![1.0; NUM_ELECTRODES - 1],
        Some(AbsLinearConstraint {
            coeffs: vec![1.0; NUM_ELECTRODES - 1],
            bound: 1.0,
        }),
    )
    .expect("valid domain")
}

/// Ply-angle prior: `η1 ~ U(π/4.5, π/3.5)`, `η2 ~ U(-π/3.5, -π/4.5)`.
pub fn angle_prior() -> UniformBoxRv {
    use std::f64::consts::PI;
    UniformBoxRv::new(vec![PI / 4.5, -PI / 3.5], vec![PI / 3.5, -PI / 4.5]).expect("valid box")
}

/// FEM-backed EIT forward model: `q = (η1, η2)`, `d = (I_1..I_9)`, `y = (U_1..U_10)`.
pub struct EitModel {
    solver: EitSolver,
    domain: DesignDomain,
    counter: EvalCounter,
}

impl EitModel {
    pub fn new(solver: EitSolver) -> Self {
        Self {
            solver,
            domain: current_design_domain(),
            counter: EvalCounter::default(),
        }
    }

    pub fn standard() -> Self {
        let solver = EitSolver::new(
            EitGeometry::standard(ElectrodeNumbering::LeftToRight),
            MeshSpec::default(),
            PlyConductivity::default(),
        )
        .expect("standard configuration is valid");
        Self::new(solver)
    }

    pub fn solver(&self) -> &EitSolver {
        &self.solver
    }
}

impl ForwardModel for EitModel {
    fn dims(&self) -> ModelDims {
        ModelDims {
            n: 2,
            m: NUM_ELECTRODES,
            delta: NUM_ELECTRODES - 1,
        }
    }

    fn domain(&self) -> &DesignDomain {
        &self.domain
    }

    fn counter(&self) -> &EvalCounter {
        &self.counter
    }

    fn compute(&self, q: &[f64], d: &[f64]) -> Result<DVector<f64>> {
        let g = self.solver.current_to_voltage_map(q)?;
        Ok(g * DVector::from_column_slice(d))
    }

    fn compute_design_jacobian(&self, q: &[f64], _d: &[f64]) -> Result<DMatrix<f64>> {
        self.solver.current_to_voltage_map(q)
    }

    fn compute_with_jacobian(&self, q: &[f64], d: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let g = self.solver.current_to_voltage_map(q)?;
        Ok((&g * DVector::from_column_slice(d), g))
    }
}
