//! Circuit synthesis: lattice model -> capacitor/buffer/inductor network.
//!
//! Every non-reciprocal bond (forward c1, reverse c2) is realized as a plain
//! capacitor c2 in parallel with an ideal unity-gain buffer driving c1 - c2
//! into the forward node: the forward admittance is then i*w*c1 and the
//! reverse i*w*c2. (The printed closed form in circulation for the two-node
//! block has couplings C1 and C1+C2, which would make the two directions
//! nearly equal for C2 << C1 and kill the skin effect; the text around it and
//! the measured ratios require c1/c2, so that is what we build.)
//!
//! With redundant-capacitor grounding every node's total incident capacitance
//! is topped up to C_tot, giving J(w) = -i*w*H_c + k(w) I with
//! k(w) = i*w*C_tot + 1/(i*w*L): the circuit Laplacian is the lattice
//! Hamiltonian up to a scalar, and J is singular exactly when H_c has the
//! eigenvalue C_tot - 1/(w^2 L).

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::lattice::LatticeSpec;
use crate::{Error, Result};

type C64 = Complex64;

/// Grounding variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundScheme {
    /// Negative-impedance converters cancel the coupling-incident capacitance
    /// at each node; a uniform C_tot capacitor and the inductor are then
    /// added, so the resonance matches the redundant scheme.
    NegativeImpedance,
    /// Per-node ground capacitor sized so couplings + ground sum to C_tot.
    RedundantCapacitor,
}

/// Electrical parameters of the synthesized network (SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    /// Forward coupling capacitance (lambda analog), farads.
    pub c1: f64,
    /// Reverse (buffer-path) coupling capacitance (lambda' analog), farads.
    pub c2: f64,
    /// Intra-cell reciprocal coupling, farads.
    pub c0: f64,
    /// Per-node grounding inductor, henries.
    pub ground_l: f64,
    pub ground_scheme: GroundScheme,
    /// Number of 3x3 sensing units chained along the diagonal.
    pub units: usize,
    /// Uniform diagonal capacitance target C_tot, farads.
    pub c_ground_total: f64,
}

impl CircuitParams {
    /// Paper-style defaults around c1; c0 defaults to c1, C_tot to 2 c1,
    /// L to 1 nH (the only inductance consistent with f0 = 1.59 GHz).
    pub fn new(c1: f64, c2: f64, units: usize) -> Self {
        CircuitParams {
            c1,
            c2,
            c0: c1,
            ground_l: 1e-9,
            ground_scheme: GroundScheme::RedundantCapacitor,
            units,
            c_ground_total: 2.0 * c1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 <= 0.0
            || self.c2 <= 0.0
            || self.c0 < 0.0
            || self.ground_l <= 0.0
            || self.c_ground_total <= 0.0
        {
            return Err(Error::InvalidCircuit("element values must be > 0".into()));
        }
        if self.c2 >= self.c1 {
            return Err(Error::InvalidCircuit(
                "sensing regime requires c2 < c1".into(),
            ));
        }
        if !(1..=12).contains(&self.units) {
            return Err(Error::InvalidCircuit("units must be in 1..=12".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Capacitor,
    BufferCapacitor,
    InductorToGround,
    CapacitorToGround,
    NegativeCapacitorToGround,
}

/// One circuit element. Ground elements keep `to == from`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurand {
    pub node_a: usize,
    pub node_b: usize,
    pub c_gamma: f64,
}

/// A circuit node: one lattice site of the diagonal union geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitNode {
    pub cell: (usize, usize),
    pub sublattice: usize,
}

/// The synthesized network. Immutable topology; measurand / parasitic /
/// calibration are optional post-synthesis attachments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitGraph {
    pub params: CircuitParams,
    pub nodes: Vec<CircuitNode>,
    /// Boundary probe nodes "Node 1..units+1": the diagonal block corners
    /// (2k-1, 2k-1), first sublattice.
    pub probe_nodes: Vec<usize>,
    pub edges: Vec<Edge>,
    pub measurand: Option<Measurand>,
    /// Parasitic capacitance to ground at `parasitic_node`.
    pub parasitic: Option<f64>,
    /// Calibration capacitance applied with negative sign (ideal
    /// negative-impedance converter) at the same node.
    pub calibration: Option<f64>,
    pub parasitic_node: usize,
}

/// Cells of the units-chained union: 3x3 blocks along the diagonal, block k
/// spanning rows/columns 2k-1 .. 2k+1; adjacent blocks share one corner cell.
pub fn union_cells(units: usize) -> Vec<(usize, usize)> {
    let mut set = std::collections::BTreeSet::new();
    for k in 1..=units {
        for i in (2 * k - 1)..=(2 * k + 1) {
            for j in (2 * k - 1)..=(2 * k + 1) {
                set.insert((i, j));
            }
        }
    }
    set.into_iter().collect()
}

/// Build the network for the diagonal-chained union geometry.
///
/// `lattice` pins the logical model (order 2, extent (2 units + 1) square);
/// coupling magnitudes come from `params` (c1 = lambda, c2 = lambda').
pub fn synthesize_circuit(lattice: &LatticeSpec, params: &CircuitParams) -> Result<CircuitGraph> {
    params.validate()?;
    if lattice.order != 2 {
        return Err(Error::InvalidCircuit("circuit synthesis needs order 2".into()));
    }
    let m = 2 * params.units + 1;
    if lattice.extent != vec![m, m] {
        return Err(Error::InvalidCircuit(format!(
            "lattice extent must be {m}x{m} for {} units",
            params.units
        )));
    }
    let cells = union_cells(params.units);
    let mut cell_index = BTreeMap::new();
    for (i, &c) in cells.iter().enumerate() {
        cell_index.insert(c, i);
    }
    let idx = |c: (usize, usize), s: usize| cell_index[&c] * 2 + s;
    let mut nodes = Vec::with_capacity(cells.len() * 2);
    for &c in &cells {
        for s in 0..2 {
            nodes.push(CircuitNode {
                cell: c,
                sublattice: s,
            });
        }
    }
    let n = nodes.len();

    // one bond per ordered lattice hop pair: forward c1, reverse c2,
    // realized as parallel cap c2 + buffer (c1 - c2) into the forward node
    let mut edges = Vec::new();
    let bond = |from: usize, to: usize, edges: &mut Vec<Edge>| {
        edges.push(Edge {
            from,
            to,
            kind: EdgeKind::Capacitor,
            value: params.c2,
        });
        edges.push(Edge {
            from,
            to,
            kind: EdgeKind::BufferCapacitor,
            value: params.c1 - params.c2,
        });
    };
    for &(i, j) in &cells {
        // x bonds: sublattice 1 hops forward with c1, sublattice 2 reversed
        if cell_index.contains_key(&(i + 1, j)) {
            bond(idx((i, j), 0), idx((i + 1, j), 0), &mut edges);
            bond(idx((i + 1, j), 1), idx((i, j), 1), &mut edges);
        }
        // y bonds: two inter-sublattice pairs per neighbor
        if cell_index.contains_key(&(i, j + 1)) {
            bond(idx((i, j), 1), idx((i, j + 1), 0), &mut edges);
            bond(idx((i, j), 0), idx((i, j + 1), 1), &mut edges);
        }
        if params.c0 > 0.0 {
            edges.push(Edge {
                from: idx((i, j), 0),
                to: idx((i, j), 1),
                kind: EdgeKind::Capacitor,
                value: params.c0,
            });
        }
    }

    // grounding: one inductor per node, plus the scheme-dependent capacitors
    let mut incident = vec![0.0f64; n];
    for e in &edges {
        match e.kind {
            EdgeKind::Capacitor => {
                incident[e.from] += e.value;
                incident[e.to] += e.value;
            }
            EdgeKind::BufferCapacitor => incident[e.to] += e.value,
            _ => {}
        }
    }
    for (node, &inc) in incident.iter().enumerate() {
        edges.push(Edge {
            from: node,
            to: node,
            kind: EdgeKind::InductorToGround,
            value: params.ground_l,
        });
        match params.ground_scheme {
            // top-up to C_tot; nodes driven by two incoming buffers carry
            // slightly more than C_tot and get a small negative-impedance
            // ground element instead (one of the pictorial grounding variants)
            GroundScheme::RedundantCapacitor => {
                let topup = params.c_ground_total - inc;
                edges.push(Edge {
                    from: node,
                    to: node,
                    kind: if topup >= 0.0 {
                        EdgeKind::CapacitorToGround
                    } else {
                        EdgeKind::NegativeCapacitorToGround
                    },
                    value: topup.abs(),
                });
            }
            GroundScheme::NegativeImpedance => {
                edges.push(Edge {
                    from: node,
                    to: node,
                    kind: EdgeKind::NegativeCapacitorToGround,
                    value: inc,
                });
                edges.push(Edge {
                    from: node,
                    to: node,
                    kind: EdgeKind::CapacitorToGround,
                    value: params.c_ground_total,
                });
            }
        }
    }

    let probe_nodes: Vec<usize> = (0..=params.units).map(|k| idx((2 * k + 1, 2 * k + 1), 0)).collect();
    let parasitic_node = probe_nodes[0];
    Ok(CircuitGraph {
        params: params.clone(),
        nodes,
        probe_nodes,
        edges,
        measurand: None,
        parasitic: None,
        calibration: None,
        parasitic_node,
    })
}

impl CircuitGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Internal node index of a (cell, sublattice) pair.
    pub fn node_index(&self, cell: (usize, usize), sublattice: usize) -> Result<usize> {
        self.nodes
            .iter()
            .position(|nd| nd.cell == cell && nd.sublattice == sublattice)
            .ok_or_else(|| Error::SiteOutOfRange(vec![cell.0, cell.1]))
    }

    /// Attach the measurand capacitor C_Gamma between two nodes.
    pub fn with_measurand(mut self, node_a: usize, node_b: usize, c_gamma: f64) -> Result<Self> {
        if node_a >= self.node_count() || node_b >= self.node_count() || node_a == node_b {
            return Err(Error::InvalidCircuit("bad measurand nodes".into()));
        }
        if c_gamma < 0.0 {
            return Err(Error::InvalidCircuit("c_gamma must be >= 0".into()));
        }
        self.measurand = Some(Measurand {
            node_a,
            node_b,
            c_gamma,
        });
        Ok(self)
    }

    /// Corner-to-corner measurand (cells (1,1) and (M,M), first sublattice).
    pub fn with_corner_measurand(self, c_gamma: f64) -> Result<Self> {
        let m = 2 * self.params.units + 1;
        let a = self.node_index((1, 1), 0)?;
        let b = self.node_index((m, m), 0)?;
        self.with_measurand(a, b, c_gamma)
    }

    pub fn with_parasitic(mut self, c_para: f64) -> Result<Self> {
        if c_para < 0.0 {
            return Err(Error::InvalidCircuit("c_para must be >= 0".into()));
        }
        self.parasitic = Some(c_para);
        Ok(self)
    }

    pub fn with_calibration(mut self, c_cali: f64) -> Self {
        self.calibration = Some(c_cali);
        self
    }

    /// Pure capacitive part of the Laplacian: J(w) = i w C + (1/(i w L)) I_L.
    fn capacitance_matrix(&self) -> Array2<f64> {
        let n = self.node_count();
        let mut c = Array2::<f64>::zeros((n, n));
        for e in &self.edges {
            match e.kind {
                EdgeKind::Capacitor => {
                    c[[e.from, e.from]] += e.value;
                    c[[e.to, e.to]] += e.value;
                    c[[e.from, e.to]] -= e.value;
                    c[[e.to, e.from]] -= e.value;
                }
                // ideal buffer: no input load, output drives its capacitor
                EdgeKind::BufferCapacitor => {
                    c[[e.to, e.to]] += e.value;
                    c[[e.to, e.from]] -= e.value;
                }
                EdgeKind::CapacitorToGround => c[[e.from, e.from]] += e.value,
                EdgeKind::NegativeCapacitorToGround => c[[e.from, e.from]] -= e.value,
                EdgeKind::InductorToGround => {}
            }
        }
        if let Some(m) = &self.measurand {
            c[[m.node_a, m.node_a]] += m.c_gamma;
            c[[m.node_b, m.node_b]] += m.c_gamma;
            c[[m.node_a, m.node_b]] -= m.c_gamma;
            c[[m.node_b, m.node_a]] -= m.c_gamma;
        }
        let p = self.parasitic_node;
        if let Some(cp) = self.parasitic {
            c[[p, p]] += cp;
        }
        if let Some(cc) = self.calibration {
            c[[p, p]] -= cc;
        }
        c
    }

    /// Capacitance-weighted Hamiltonian H_c with J(w) = -i w H_c + k(w) I.
    /// Off-diagonal hops carry c1/c2; attachments appear as the standard
    /// physical-capacitor stamp (+C off-diagonal, -C on both diagonals).
    pub fn effective_hamiltonian(&self) -> Array2<f64> {
        let n = self.node_count();
        let c = self.capacitance_matrix();
        let mut h = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                h[[i, j]] = if i == j {
                    self.params.c_ground_total - c[[i, i]]
                } else {
                    -c[[i, j]]
                };
            }
        }
        h
    }
}

/// J(w) with its coupling/diagonal decomposition.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    pub omega: f64,
    pub entries: Array2<C64>,
    pub coupling: Array2<C64>,
    pub diagonal: Array1<C64>,
}

/// Kirchhoff Laplacian at angular frequency `omega`.
pub fn admittance(graph: &CircuitGraph, omega: f64) -> Result<AdmittanceMatrix> {
    if omega <= 0.0 {
        return Err(Error::InvalidCircuit("omega must be > 0".into()));
    }
    let n = graph.node_count();
    let c = graph.capacitance_matrix();
    let iw = C64::new(0.0, omega);
    let mut entries = Array2::<C64>::zeros((n, n));
    let mut coupling = Array2::<C64>::zeros((n, n));
    let mut diagonal = Array1::<C64>::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let v = iw * c[[i, j]];
            entries[[i, j]] = v;
            if i == j {
                diagonal[i] += v;
            } else {
                coupling[[i, j]] = v;
            }
        }
    }
    for e in &graph.edges {
        if e.kind == EdgeKind::InductorToGround {
            let y = (iw * e.value).finv();
            entries[[e.from, e.from]] += y;
            diagonal[e.from] += y;
        }
    }
    Ok(AdmittanceMatrix {
        omega,
        entries,
        coupling,
        diagonal,
    })
}

/// f0 = 1 / (2 pi sqrt(L C_tot)); with C_tot = 2 c1 this is the paper's
/// eigenfrequency formula.
pub fn resonance_frequency(params: &CircuitParams) -> f64 {
    1.0 / (2.0 * std::f64::consts::PI * (params.ground_l * params.c_ground_total).sqrt())
}

/// Flat netlist export, one element per line.
pub fn to_netlist(graph: &CircuitGraph) -> String {
    let mut out = String::from("# nh-sense netlist v1\n");
    // ground is node 0; internal nodes are 1-based
    for e in &graph.edges {
        let (kind, a, b) = match e.kind {
            EdgeKind::Capacitor => ("CAP", e.from + 1, e.to + 1),
            EdgeKind::BufferCapacitor => ("BUF", e.from + 1, e.to + 1),
            EdgeKind::InductorToGround => ("IND", e.from + 1, 0),
            EdgeKind::CapacitorToGround => ("CAPG", e.from + 1, 0),
            EdgeKind::NegativeCapacitorToGround => ("NCAPG", e.from + 1, 0),
        };
        let _ = writeln!(out, "{kind} {a} {b} {:e}", e.value);
    }
    if let Some(m) = &graph.measurand {
        let _ = writeln!(out, "CAP {} {} {:e}", m.node_a + 1, m.node_b + 1, m.c_gamma);
    }
    if let Some(cp) = graph.parasitic {
        let _ = writeln!(out, "CAPG {} 0 {:e}", graph.parasitic_node + 1, cp);
    }
    if let Some(cc) = graph.calibration {
        let _ = writeln!(out, "NCAPG {} 0 {:e}", graph.parasitic_node + 1, cc);
    }
    out
}

/// Standard lattice spec matching a units-chained circuit (couplings c1/c2,
/// extent (2 units + 1) square). The circuit geometry is the diagonal union,
/// a sub-lattice of this bounding spec.
pub fn bounding_lattice(params: &CircuitParams) -> Result<LatticeSpec> {
    let m = 2 * params.units + 1;
    LatticeSpec::new(
        2,
        vec![m, m],
        vec![(params.c1, params.c2); 2],
        params.c0,
    )
}
