//! Tight-binding models with non-reciprocal couplings.
//!
//! Conventions, fixed once and used everywhere:
//!
//! * `H[to, from]` — a hop of amplitude `t` from site `j` to site `i`
//!   contributes `t` to entry `(i, j)`.
//! * On sublattice 1 the hop in the `+x` direction has amplitude `lambda_x`
//!   and the reverse hop `lambda'_x`; sublattice 2 carries the opposite
//!   chirality. Axis 2 (and axis 3) hops couple the two sublattices with the
//!   sigma_x (sigma_y) structure of the Bloch Hamiltonian.
//! * With `H(k) = sum_d e^{i k d} H_d` the periodic real-space matrix
//!   block-diagonalizes into `build_bloch` values; this consistency is what
//!   pins the orientation convention above.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

type C64 = Complex64;

/// Boundary condition for real-space construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Open,
    Periodic,
}

/// Geometry and couplings of the quantum model; the source of truth for
/// everything downstream (spectra, perturbation theory, circuit synthesis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    /// Spatial dimension N (1, 2 or 3 for real-space construction).
    pub order: usize,
    /// Cells per axis, L_1..L_N.
    pub extent: Vec<usize>,
    /// Per-axis coupling pair (lambda_j, lambda'_j).
    pub couplings: Vec<(f64, f64)>,
    /// Reciprocal coupling between the two sublattices inside each cell
    /// (circuit-side C0 analog). Default 0 per the model definition.
    #[serde(default)]
    pub intra_cell: f64,
}

impl LatticeSpec {
    pub fn new(
        order: usize,
        extent: Vec<usize>,
        couplings: Vec<(f64, f64)>,
        intra_cell: f64,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidLattice("order must be >= 1".into()));
        }
        if extent.len() != order || couplings.len() != order {
            return Err(Error::InvalidLattice(format!(
                "extent/couplings length must equal order {order}"
            )));
        }
        if extent.iter().any(|&l| l == 0) {
            return Err(Error::InvalidLattice("zero extent".into()));
        }
        if couplings.iter().any(|&(a, b)| a <= 0.0 || b <= 0.0) {
            return Err(Error::InvalidLattice("couplings must be > 0".into()));
        }
        if intra_cell < 0.0 {
            return Err(Error::InvalidLattice("intra_cell must be >= 0".into()));
        }
        Ok(Self {
            order,
            extent,
            couplings,
            intra_cell,
        })
    }

    /// Square lattice of the second-order model, the common case.
    pub fn square(l: usize, lambda: f64, lambda_p: f64) -> Result<Self> {
        Self::new(2, vec![l, l], vec![(lambda, lambda_p); 2], 0.0)
    }

    /// Number of sites: two sublattices per cell.
    pub fn sites(&self) -> usize {
        2 * self.extent.iter().product::<usize>()
    }

    /// Per-axis skin ratio r_j = lambda_j / lambda'_j.
    pub fn ratios(&self) -> Vec<f64> {
        self.couplings.iter().map(|&(a, b)| a / b).collect()
    }

    /// Row/column index of (cell, sublattice). Cells are 1-based, axis 1
    /// slowest; sublattice in {0, 1} fastest.
    pub fn site_index(&self, cell: &[usize], sublattice: usize) -> Result<usize> {
        if cell.len() != self.order
            || sublattice > 1
            || cell
                .iter()
                .zip(&self.extent)
                .any(|(&m, &l)| m == 0 || m > l)
        {
            return Err(Error::SiteOutOfRange(cell.to_vec()));
        }
        let mut rank = 0;
        for (j, &m) in cell.iter().enumerate() {
            rank = rank * self.extent[j] + (m - 1);
        }
        Ok(rank * 2 + sublattice)
    }

    /// Inverse of [`site_index`](Self::site_index).
    pub fn site_coords(&self, index: usize) -> (Vec<usize>, usize) {
        let sublattice = index % 2;
        let mut rank = index / 2;
        let mut cell = vec![0usize; self.order];
        for j in (0..self.order).rev() {
            cell[j] = rank % self.extent[j] + 1;
            rank /= self.extent[j];
        }
        (cell, sublattice)
    }

    /// Whether all extents are odd (required by the analytic zero-mode
    /// indexing chi_j = (m_j - 1) / 2).
    pub fn extents_odd(&self) -> bool {
        self.extent.iter().all(|&l| l % 2 == 1)
    }
}

/// 2x2 Bloch Hamiltonian at a wave vector.
#[derive(Debug, Clone)]
pub struct BlochHamiltonian {
    pub k: Vec<f64>,
    pub matrix: Array2<C64>,
}

const I: C64 = C64::new(0.0, 1.0);

fn sigma(pauli: usize) -> Array2<C64> {
    let z = C64::new(0.0, 0.0);
    let o = C64::new(1.0, 0.0);
    match pauli {
        0 => ndarray::array![[o, z], [z, o]],
        1 => ndarray::array![[z, o], [o, z]],
        2 => ndarray::array![[z, -I], [I, z]],
        _ => ndarray::array![[o, z], [z, -o]],
    }
}

/// Bloch Hamiltonian of the second- or third-order model.
///
/// N=2: (l_x+l'_x)cos k_x s0 + [(l_y+l'_y)cos k_y + i(l_y-l'_y)sin k_y] s_x
///      + i(l_x-l'_x)sin k_x s_z.
/// N=3 adds the axis-3 term on s_y. Amplitude convention lambda_j = t_j+g_j,
/// so that per-bond hopping amplitudes are exactly lambda_j / lambda'_j (the
/// printed third-order form carries 2t_j cos k factors; dividing by 2 keeps
/// the zero-mode amplitude ratios exact).
pub fn build_bloch(spec: &LatticeSpec, k: &[f64]) -> Result<BlochHamiltonian> {
    if spec.order != 2 && spec.order != 3 {
        return Err(Error::NoBlochForm(spec.order));
    }
    if k.len() != spec.order {
        return Err(Error::InvalidLattice(format!(
            "wave vector needs {} components",
            spec.order
        )));
    }
    // f_j(k) = lambda e^{ik} + lambda' e^{-ik} = (l+l')cos k + i(l-l')sin k
    let f = |j: usize| -> C64 {
        let (l, lp) = spec.couplings[j];
        C64::new((l + lp) * k[j].cos(), (l - lp) * k[j].sin())
    };
    // axis 1 on sigma_0/sigma_z split: diag(f_1, conj-profile swap), axis 2 on
    // sigma_x, axis 3 on sigma_y; intra-cell coupling adds on sigma_x.
    let (l1, lp1) = spec.couplings[0];
    let diag0 = C64::new((l1 + lp1) * k[0].cos(), 0.0);
    let diagz = I * (l1 - lp1) * k[0].sin();
    let mut m = sigma(0).mapv(|e| e * diag0) + sigma(3).mapv(|e| e * diagz);
    m = m + sigma(1).mapv(|e| e * (f(1) + spec.intra_cell));
    if spec.order == 3 {
        m = m + sigma(2).mapv(|e| e * f(2));
    }
    Ok(BlochHamiltonian {
        k: k.to_vec(),
        matrix: m,
    })
}

/// Dense real-space hopping matrix with its site indexing.
#[derive(Debug, Clone)]
pub struct RealSpaceMatrix {
    pub spec: LatticeSpec,
    pub entries: Array2<C64>,
    pub boundary: Boundary,
}

impl RealSpaceMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }
}

/// Open- or periodic-boundary real-space Hamiltonian.
pub fn build_obc_hamiltonian(spec: &LatticeSpec, boundary: Boundary) -> Result<RealSpaceMatrix> {
    if spec.order > 3 {
        return Err(Error::InvalidLattice(
            "no real-space construction for order > 3".into(),
        ));
    }
    let n = spec.sites();
    let mut h = Array2::<C64>::zeros((n, n));
    let cells = all_cells(spec);
    let mut add = |to: usize, from: usize, amp: C64| h[[to, from]] += amp;
    for cell in &cells {
        for axis in 0..spec.order {
            let (l, lp) = spec.couplings[axis];
            let next = match neighbor(spec, cell, axis, boundary) {
                Some(c) => c,
                None => continue,
            };
            let here = |s| spec.site_index(cell, s).unwrap();
            let there = |s| spec.site_index(&next, s).unwrap();
            match axis {
                0 => {
                    // sublattice-diagonal, opposite chirality on the two legs
                    add(there(0), here(0), l.into());
                    add(here(0), there(0), lp.into());
                    add(there(1), here(1), lp.into());
                    add(here(1), there(1), l.into());
                }
                1 => {
                    // sigma_x structure: inter-cell, sublattice-swapping
                    add(there(0), here(1), l.into());
                    add(here(1), there(0), lp.into());
                    add(there(1), here(0), l.into());
                    add(here(0), there(1), lp.into());
                }
                _ => {
                    // sigma_y structure: H_10 = i f(k), H_01 = -i f(k) with
                    // f = l e^{ik} + lp e^{-ik}, so both hop directions of a
                    // row carry the same sign of i
                    add(there(0), here(1), -I * l);
                    add(here(0), there(1), -I * lp);
                    add(there(1), here(0), I * l);
                    add(here(1), there(0), I * lp);
                }
            }
        }
        if spec.intra_cell > 0.0 {
            let a = spec.site_index(cell, 0).unwrap();
            let b = spec.site_index(cell, 1).unwrap();
            add(a, b, spec.intra_cell.into());
            add(b, a, spec.intra_cell.into());
        }
    }
    Ok(RealSpaceMatrix {
        spec: spec.clone(),
        entries: h,
        boundary,
    })
}

fn all_cells(spec: &LatticeSpec) -> Vec<Vec<usize>> {
    let mut cells = vec![vec![]];
    for &l in &spec.extent {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                (1..=l).map(move |m| {
                    let mut c2 = c.clone();
                    c2.push(m);
                    c2
                })
            })
            .collect();
    }
    cells
}

fn neighbor(
    spec: &LatticeSpec,
    cell: &[usize],
    axis: usize,
    boundary: Boundary,
) -> Option<Vec<usize>> {
    let l = spec.extent[axis];
    let mut next = cell.to_vec();
    if cell[axis] < l {
        next[axis] += 1;
        Some(next)
    } else if boundary == Boundary::Periodic && l > 2 {
        next[axis] = 1;
        Some(next)
    } else {
        None
    }
}

/// A zero-energy corner mode with its biorthogonal partner.
#[derive(Debug, Clone)]
pub struct ZeroMode {
    pub eigenvalue: C64,
    /// Right eigenvector psi_R.
    pub right: Array1<C64>,
    /// Left eigenvector psi_L (row-acting: psi_L . H = E psi_L).
    pub left: Array1<C64>,
    pub residual_right: f64,
    pub residual_left: f64,
    pub origin: ModeOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeOrigin {
    Analytic,
    Numeric,
}

/// Closed-form corner zero mode of the open-boundary model.
///
/// The mode lives on sublattice 1 only and, solving the three decoupled
/// one-dimensional recursions lambda psi(m-1) + lambda' psi(m+1) = 0, is
/// supported on cells with all-odd coordinates:
///
///   psi_R(m_1..m_N) = prod_j (-lambda_j/lambda'_j)^{chi_j},  chi_j=(m_j-1)/2,
///
/// with psi_L the reciprocal profile (ratios inverted). Note the support is
/// the odd sub-grid — prod_j (L_j+1)/2 entries — not every cell.
pub fn analytic_zero_mode(spec: &LatticeSpec) -> Result<ZeroMode> {
    if spec.order != 2 && spec.order != 3 {
        return Err(Error::InvalidLattice(
            "analytic zero mode requires order 2 or 3".into(),
        ));
    }
    if !spec.extents_odd() {
        return Err(Error::InvalidLattice(
            "analytic zero mode requires odd extents".into(),
        ));
    }
    if spec.intra_cell != 0.0 {
        return Err(Error::InvalidLattice(
            "analytic zero mode requires intra_cell = 0".into(),
        ));
    }
    let n = spec.sites();
    let mut right = Array1::<C64>::zeros(n);
    let mut left = Array1::<C64>::zeros(n);
    for cell in all_cells(spec) {
        if cell.iter().any(|&m| m % 2 == 0) {
            continue;
        }
        let mut amp_r = 1.0f64;
        let mut amp_l = 1.0f64;
        for (j, &m) in cell.iter().enumerate() {
            let chi = ((m - 1) / 2) as i32;
            let (l, lp) = spec.couplings[j];
            amp_r *= (-l / lp).powi(chi);
            amp_l *= (-lp / l).powi(chi);
        }
        let i = spec.site_index(&cell, 0).unwrap();
        right[i] = amp_r.into();
        left[i] = amp_l.into();
    }
    let h = build_obc_hamiltonian(spec, Boundary::Open)?;
    let (rr, rl) = mode_residuals(&h.entries, &right, &left);
    Ok(ZeroMode {
        eigenvalue: C64::new(0.0, 0.0),
        right,
        left,
        residual_right: rr,
        residual_left: rl,
        origin: ModeOrigin::Analytic,
    })
}

/// ||H v - E v|| / ||v|| for the right vector and the transposed problem for
/// the left one, at E = 0.
pub fn mode_residuals(h: &Array2<C64>, right: &Array1<C64>, left: &Array1<C64>) -> (f64, f64) {
    let norm = |v: &Array1<C64>| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let hr = h.dot(right);
    let lh = left.dot(h);
    (norm(&hr) / norm(right), norm(&lh) / norm(left))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn bloch_k0_all_cos() {
        // all sines vanish at k = 0
        let spec = LatticeSpec::new(2, vec![5, 5], vec![(2.0, 1e-3), (2.0, 1e-3)], 0.0).unwrap();
        let b = build_bloch(&spec, &[0.0, 0.0]).unwrap();
        for &(i, j) in &[(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!(close(b.matrix[[i, j]], C64::new(2.001, 0.0), 1e-12));
        }
    }

    #[test]
    fn bloch_k_half_pi() {
        let spec = LatticeSpec::new(2, vec![5, 5], vec![(2.0, 1e-3), (2.0, 1e-3)], 0.0).unwrap();
        let b = build_bloch(&spec, &[std::f64::consts::FRAC_PI_2, 0.0]).unwrap();
        assert!(close(b.matrix[[0, 0]], C64::new(0.0, 1.999), 1e-12));
        assert!(close(b.matrix[[1, 1]], C64::new(0.0, -1.999), 1e-12));
        assert!(close(b.matrix[[0, 1]], C64::new(2.001, 0.0), 1e-12));
        assert!(close(b.matrix[[1, 0]], C64::new(2.001, 0.0), 1e-12));
    }

    #[test]
    fn bloch_hermitian_limit() {
        let spec = LatticeSpec::new(3, vec![3, 3, 3], vec![(1.3, 1.3); 3], 0.0).unwrap();
        for k in [[0.3, -1.1, 0.7], [1.9, 0.2, -2.4]] {
            let b = build_bloch(&spec, &k).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert!(close(b.matrix[[i, j]], b.matrix[[j, i]].conj(), 1e-12));
                }
            }
        }
    }

    #[test]
    fn bloch_rejects_unsupported_order() {
        let spec = LatticeSpec::new(1, vec![5], vec![(1.9, 0.1)], 0.0).unwrap();
        assert!(matches!(
            build_bloch(&spec, &[0.0]),
            Err(Error::NoBlochForm(1))
        ));
    }

    #[test]
    fn single_cell_is_zero_matrix() {
        let spec = LatticeSpec::new(2, vec![1, 1], vec![(1.9, 0.1); 2], 0.0).unwrap();
        let h = build_obc_hamiltonian(&spec, Boundary::Open).unwrap();
        assert_eq!(h.dim(), 2);
        assert!(h.entries.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn hermitian_limit_real_space() {
        let spec = LatticeSpec::new(2, vec![4, 3], vec![(1.2, 1.2), (0.7, 0.7)], 0.3).unwrap();
        let h = build_obc_hamiltonian(&spec, Boundary::Open).unwrap();
        let n = h.dim();
        for i in 0..n {
            for j in 0..n {
                assert!(close(h.entries[[i, j]], h.entries[[j, i]].conj(), 1e-14));
            }
        }
    }

    #[test]
    fn strip_orientation() {
        // 2x1 strip: sublattice-1 forward hop lambda_x, backward lambda'_x
        let spec = LatticeSpec::new(2, vec![2, 1], vec![(1.9, 0.1), (1.0, 1.0)], 0.0).unwrap();
        let h = build_obc_hamiltonian(&spec, Boundary::Open).unwrap();
        let from = spec.site_index(&[1, 1], 0).unwrap();
        let to = spec.site_index(&[2, 1], 0).unwrap();
        assert!(close(h.entries[[to, from]], C64::new(1.9, 0.0), 1e-14));
        assert!(close(h.entries[[from, to]], C64::new(0.1, 0.0), 1e-14));
        // sublattice 2 carries the opposite chirality
        let from2 = spec.site_index(&[1, 1], 1).unwrap();
        let to2 = spec.site_index(&[2, 1], 1).unwrap();
        assert!(close(h.entries[[to2, from2]], C64::new(0.1, 0.0), 1e-14));
        assert!(close(h.entries[[from2, to2]], C64::new(1.9, 0.0), 1e-14));
    }

    #[test]
    fn analytic_mode_residual_9x9() {
        let spec = LatticeSpec::square(9, 1.9, 0.1).unwrap();
        let zm = analytic_zero_mode(&spec).unwrap();
        assert!(zm.residual_right < 1e-10, "residual {}", zm.residual_right);
        assert!(zm.residual_left < 1e-10, "residual {}", zm.residual_left);
    }

    #[test]
    fn analytic_mode_support_is_odd_subgrid() {
        let spec = LatticeSpec::square(5, 1.9, 0.1).unwrap();
        let zm = analytic_zero_mode(&spec).unwrap();
        let nz = zm.right.iter().filter(|z| z.norm() > 0.0).count();
        assert_eq!(nz, 9); // (5+1)/2 squared
        for (i, z) in zm.right.iter().enumerate() {
            if z.norm() > 0.0 {
                let (cell, s) = spec.site_coords(i);
                assert_eq!(s, 0);
                assert!(cell.iter().all(|m| m % 2 == 1));
            }
        }
    }

    #[test]
    fn analytic_mode_3d_residual() {
        let spec = LatticeSpec::new(3, vec![5, 5, 5], vec![(1.9, 0.1); 3], 0.0).unwrap();
        let zm = analytic_zero_mode(&spec).unwrap();
        assert!(zm.residual_right < 1e-10, "residual {}", zm.residual_right);
        assert!(zm.residual_left < 1e-10, "residual {}", zm.residual_left);
    }

    #[test]
    fn single_cell_mode_trivial() {
        let spec = LatticeSpec::new(2, vec![1, 1], vec![(1.9, 0.1); 2], 0.0).unwrap();
        let zm = analytic_zero_mode(&spec).unwrap();
        assert_abs_diff_eq!(zm.right[0].re, 1.0);
        assert_abs_diff_eq!(zm.right[1].norm(), 0.0);
    }

    #[test]
    fn even_extent_rejected() {
        let spec = LatticeSpec::new(2, vec![4, 5], vec![(1.9, 0.1); 2], 0.0).unwrap();
        assert!(analytic_zero_mode(&spec).is_err());
    }

    #[test]
    fn site_index_roundtrip() {
        let spec = LatticeSpec::new(3, vec![3, 5, 7], vec![(1.5, 0.5); 3], 0.0).unwrap();
        for i in 0..spec.sites() {
            let (cell, s) = spec.site_coords(i);
            assert_eq!(spec.site_index(&cell, s).unwrap(), i);
        }
    }
}
