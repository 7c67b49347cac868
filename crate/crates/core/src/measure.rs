//! Frequency-domain measurement engines.
//!
//! Two eigenfrequency measurement methods are modeled:
//!
//! * voltage sweep — drive one boundary node, record per-node amplitude in dB
//!   relative to the drive node; the resonance shows up as a deep minimum at
//!   a remote probe (the skin effect suppresses back-propagation);
//! * impedance scan — ground impedance of a node peaks (diverges) at the
//!   resonance; near-singular solves are capped at 1e12 ohm and flagged, the
//!   flag being the measurement target, not an error.
//!
//! Crosstalk is modeled as K seeded single-frequency current injections at
//! random nodes. Their steady-state responses add to the measured amplitude
//! in quadrature (different frequencies do not interfere coherently). Because
//! traces are normalized to the drive-node amplitude, interference is
//! negligible where the main response is resonant (f0) and dominant where it
//! is not (f1) — which is exactly the robustness contrast in the experiments.

use ndarray::{Array1, Array2};
use ndarray_linalg::Solve;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{admittance, resonance_frequency, AdmittanceMatrix, CircuitGraph};
use crate::{Error, Result};

type C64 = Complex64;

/// Impedance cap for near-singular solves (ohms).
pub const IMPEDANCE_CAP: f64 = 1e12;
/// Default thermal noise floor (dB relative to drive).
pub const DEFAULT_NOISE_FLOOR_DB: f64 = -80.0;
/// Number of crosstalk tones per trial.
pub const CROSSTALK_TONES: usize = 8;

/// Signal injection description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveSpec {
    /// Driven circuit node index.
    pub node: usize,
    /// Drive amplitude, volts (0.1 V per the experimental setup).
    pub amplitude: f64,
    /// Disordered-crosstalk amplitude as a fraction of the drive.
    pub crosstalk_fraction: f64,
    pub crosstalk_seed: u64,
    /// Band the interferer tones are drawn from. Defaults to the sweep grid
    /// span; robustness trials pin it to the full instrument band so that
    /// near-resonant tones are present in every measurement.
    #[serde(default)]
    pub crosstalk_band: Option<(f64, f64)>,
}

impl DriveSpec {
    pub fn new(node: usize) -> Self {
        DriveSpec {
            node,
            amplitude: 0.1,
            crosstalk_fraction: 0.0,
            crosstalk_seed: 0,
            crosstalk_band: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.amplitude <= 0.0 {
            return Err(Error::InvalidSweep("drive amplitude must be > 0".into()));
        }
        if self.crosstalk_fraction < 0.0 {
            return Err(Error::InvalidSweep("crosstalk fraction must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMethod {
    MinVoltage,
    PeakImpedance,
    NoiseOnset,
}

/// One frequency sweep with its extraction result.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    /// Column labels (probe node numbers for CSV headers).
    pub columns: Vec<String>,
    /// Floor-clipped traces, one row per grid point (dB for voltage mode,
    /// ohms for impedance mode).
    pub values: Array2<f64>,
    /// Pre-clipping traces.
    pub raw: Array2<f64>,
    /// Per-grid-point flag: solve was singular within tolerance (capped).
    pub flagged: Vec<bool>,
    pub noise_floor_db: f64,
    pub extracted_f: f64,
    pub method: ExtractionMethod,
    /// Column used for extraction.
    pub probe_column: usize,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidSweep("empty frequency grid".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] <= 0.0 {
        return Err(Error::InvalidSweep(
            "grid must be strictly ascending and positive".into(),
        ));
    }
    Ok(())
}

/// Solve J V = I with a current injection `amplitude` at the drive node.
/// A singular (or cap-exceeding) system is reported through the flag, with
/// voltages capped at amplitude * 1e12 — resonance is data, not an error.
pub fn solve_node_voltages(j: &AdmittanceMatrix, drive: &DriveSpec) -> Result<(Array1<C64>, bool)> {
    drive.validate()?;
    let n = j.entries.nrows();
    if drive.node >= n {
        return Err(Error::InvalidSweep("drive node out of range".into()));
    }
    let mut rhs = Array1::<C64>::zeros(n);
    rhs[drive.node] = C64::new(drive.amplitude, 0.0);
    let cap = drive.amplitude * IMPEDANCE_CAP;
    let rescale = |v: Array1<C64>| {
        let vmax = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if vmax.is_finite() && vmax <= cap {
            (v, false)
        } else {
            // overall scale is capped but the mode shape is data
            (v.mapv(|z| z * (cap / vmax)), true)
        }
    };
    if let Ok(v) = j.entries.solve(&rhs) {
        if v.iter().all(|z| z.norm().is_finite()) {
            return Ok(rescale(v));
        }
    }
    // exactly singular: the resonance condition itself. Regularize with a
    // small diagonal admittance so the solve returns the resonant mode
    // profile rather than garbage, then cap the magnitude.
    let scale = j.entries.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1.0);
    for boost in [1e-12, 1e-9, 1e-6] {
        let mut a = j.entries.clone();
        for i in 0..n {
            a[[i, i]] += C64::new(scale * boost, 0.0);
        }
        if let Ok(v) = a.solve(&rhs) {
            if v.iter().all(|z| z.norm().is_finite()) {
                let (v, _) = rescale(v);
                return Ok((v, true));
            }
        }
    }
    Ok((Array1::from_elem(n, C64::new(cap, 0.0)), true))
}

/// One crosstalk tone: a steady interferer at its own frequency.
#[derive(Debug, Clone)]
struct Tone {
    node: usize,
    freq: f64,
    amplitude: f64,
    phase: f64,
}

fn draw_tones(drive: &DriveSpec, n_nodes: usize, f_lo: f64, f_hi: f64) -> Vec<Tone> {
    if drive.crosstalk_fraction == 0.0 {
        return Vec::new();
    }
    let (f_lo, f_hi) = drive.crosstalk_band.unwrap_or((f_lo, f_hi));
    let mut rng = ChaCha12Rng::seed_from_u64(drive.crosstalk_seed);
    (0..CROSSTALK_TONES)
        .map(|_| Tone {
            node: rng.gen_range(0..n_nodes),
            freq: f_lo + (f_hi - f_lo) * rng.gen::<f64>(),
            amplitude: drive.crosstalk_fraction * drive.amplitude,
            phase: rng.gen::<f64>() * std::f64::consts::TAU,
        })
        .collect()
}

/// Per-node RMS amplitude contributed by the tones (frequency-independent:
/// each tone rings at its own frequency throughout the sweep).
fn tone_power(graph: &CircuitGraph, tones: &[Tone]) -> Result<Array1<f64>> {
    let n = graph.node_count();
    let mut power = Array1::<f64>::zeros(n);
    for t in tones {
        let j = admittance(graph, std::f64::consts::TAU * t.freq)?;
        let d = DriveSpec {
            node: t.node,
            amplitude: t.amplitude,
            crosstalk_fraction: 0.0,
            crosstalk_seed: 0,
            crosstalk_band: None,
        };
        let (v, _) = solve_node_voltages(&j, &d)?;
        let rot = C64::from_polar(1.0, t.phase);
        for i in 0..n {
            power[i] += (v[i] * rot).norm_sqr();
        }
    }
    Ok(power)
}

/// Voltage-mode sweep over `grid`, traces recorded at the boundary probe
/// nodes in dB relative to the drive node, clipped at the noise floor.
/// Extraction: minimum of the probe trace, or the noise-onset surrogate when
/// the minimum is buried in the floor.
pub fn voltage_sweep(
    graph: &CircuitGraph,
    drive: &DriveSpec,
    probe: usize,
    grid: &[f64],
) -> Result<SweepResult> {
    drive.validate()?;
    check_grid(grid)?;
    let probes = graph.probe_nodes.clone();
    let probe_column = probes
        .iter()
        .position(|&p| p == probe)
        .ok_or_else(|| Error::InvalidSweep("probe must be a boundary node".into()))?;
    let tones = draw_tones(drive, graph.node_count(), grid[0], *grid.last().unwrap());
    let noise = tone_power(graph, &tones)?;
    let rows: Vec<(Vec<f64>, bool)> = grid
        .par_iter()
        .map(|&f| -> Result<(Vec<f64>, bool)> {
            let j = admittance(graph, std::f64::consts::TAU * f)?;
            let (v, flag) = solve_node_voltages(&j, drive)?;
            let meas = |node: usize| (v[node].norm_sqr() + noise[node]).sqrt();
            let vd = meas(drive.node).max(f64::MIN_POSITIVE);
            Ok((
                probes.iter().map(|&p| 20.0 * (meas(p) / vd).log10()).collect(),
                flag,
            ))
        })
        .collect::<Result<_>>()?;
    let ncol = probes.len();
    let mut raw = Array2::<f64>::zeros((grid.len(), ncol));
    let mut flagged = Vec::with_capacity(grid.len());
    for (i, (row, flag)) in rows.into_iter().enumerate() {
        for (jc, v) in row.into_iter().enumerate() {
            raw[[i, jc]] = v;
        }
        flagged.push(flag);
    }
    let floor = DEFAULT_NOISE_FLOOR_DB;
    let values = raw.mapv(|v| v.max(floor));
    let mut result = SweepResult {
        grid: grid.to_vec(),
        columns: (1..=ncol).map(|k| format!("node_{k}_db")).collect(),
        values,
        raw,
        flagged,
        noise_floor_db: floor,
        extracted_f: grid[0],
        method: ExtractionMethod::MinVoltage,
        probe_column,
    };
    let trace = result.values.column(probe_column);
    let clipped = trace.iter().any(|&v| v <= floor + 1e-9);
    if clipped {
        result.extracted_f = noise_onset_estimate(&result)?;
        result.method = ExtractionMethod::NoiseOnset;
    } else {
        let (imin, _) = trace
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        result.extracted_f = grid[imin];
        result.method = ExtractionMethod::MinVoltage;
    }
    Ok(result)
}

/// Ground-impedance scan of one node: solve J x = e_node per frequency and
/// record |x_node| (ohms), capped and flagged near singularities.
pub fn impedance_scan(graph: &CircuitGraph, node: usize, grid: &[f64]) -> Result<SweepResult> {
    check_grid(grid)?;
    if node >= graph.node_count() {
        return Err(Error::InvalidSweep("scan node out of range".into()));
    }
    let pts: Vec<(f64, bool)> = grid
        .par_iter()
        .map(|&f| -> Result<(f64, bool)> {
            let j = admittance(graph, std::f64::consts::TAU * f)?;
            let mut rhs = Array1::<C64>::zeros(graph.node_count());
            rhs[node] = C64::new(1.0, 0.0);
            match j.entries.solve(&rhs) {
                Ok(x) => {
                    let z = x[node].norm();
                    if z.is_finite() && z < IMPEDANCE_CAP {
                        Ok((z, false))
                    } else {
                        Ok((IMPEDANCE_CAP, true))
                    }
                }
                Err(_) => Ok((IMPEDANCE_CAP, true)),
            }
        })
        .collect::<Result<_>>()?;
    let mut values = Array2::<f64>::zeros((grid.len(), 1));
    let mut flagged = Vec::with_capacity(grid.len());
    for (i, (z, fl)) in pts.into_iter().enumerate() {
        values[[i, 0]] = z;
        flagged.push(fl);
    }
    let (imax, _) = values
        .column(0)
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    Ok(SweepResult {
        grid: grid.to_vec(),
        columns: vec!["impedance_ohm".into()],
        raw: values.clone(),
        values,
        flagged,
        noise_floor_db: DEFAULT_NOISE_FLOOR_DB,
        extracted_f: grid[imax],
        method: ExtractionMethod::PeakImpedance,
        probe_column: 0,
    })
}

/// Lowest grid frequency at which the clipped trace first reaches the noise
/// floor — the f0 surrogate when the true minimum is buried.
pub fn noise_onset_estimate(sweep: &SweepResult) -> Result<f64> {
    let floor = sweep.noise_floor_db;
    let trace = sweep.values.column(sweep.probe_column);
    trace
        .iter()
        .position(|&v| v <= floor + 1e-9)
        .map(|i| sweep.grid[i])
        .ok_or(Error::NoClippedRegion)
}

fn uniform_grid(center: f64, span: f64, step: f64) -> Vec<f64> {
    let k = (span / step).round() as i64;
    (-k..=k).map(|i| center + i as f64 * step).collect()
}

/// Coarse (1 MHz) impedance scan with widen-and-retry when the peak lands on
/// the window boundary, then a fine (1 kHz) pass around the coarse peak.
pub fn two_stage_peak(graph: &CircuitGraph, node: usize) -> Result<(f64, SweepResult, SweepResult)> {
    let f0 = resonance_frequency(&graph.params);
    let coarse_step = 1e6;
    let fine_step = 1e3;
    let mut span = 10e6;
    let mut coarse = impedance_scan(graph, node, &uniform_grid(f0, span, coarse_step))?;
    for _ in 0..3 {
        let edge = coarse.extracted_f == *coarse.grid.first().unwrap()
            || coarse.extracted_f == *coarse.grid.last().unwrap();
        if !edge {
            break;
        }
        span *= 2.0;
        coarse = impedance_scan(graph, node, &uniform_grid(f0, span, coarse_step))?;
    }
    if coarse.extracted_f == *coarse.grid.first().unwrap()
        || coarse.extracted_f == *coarse.grid.last().unwrap()
    {
        return Err(Error::ExtremumOnBoundary);
    }
    let fine = impedance_scan(graph, node, &uniform_grid(coarse.extracted_f, 1.5e6, fine_step))?;
    if fine.extracted_f == *fine.grid.first().unwrap()
        || fine.extracted_f == *fine.grid.last().unwrap()
    {
        return Err(Error::ExtremumOnBoundary);
    }
    Ok((fine.extracted_f, coarse, fine))
}

/// Shift measurement output: both raw sweeps are retained.
#[derive(Debug, Clone)]
pub struct ShiftReport {
    pub f0: f64,
    pub f0_prime: f64,
    pub delta_f: f64,
    pub sweep_clean_fine: SweepResult,
    pub sweep_perturbed_fine: SweepResult,
}

/// Delta f = |f0 - f0'| from the impedance method, measurand on vs off,
/// identical staged grids. `position` defaults to corner-to-corner.
pub fn eigenfrequency_shift(
    graph: &CircuitGraph,
    c_gamma: f64,
    position: Option<(usize, usize)>,
) -> Result<ShiftReport> {
    if c_gamma < 0.0 {
        return Err(Error::InvalidCircuit("c_gamma must be >= 0".into()));
    }
    let mut clean = graph.clone();
    clean.measurand = None;
    let perturbed = match position {
        Some((a, b)) => clean.clone().with_measurand(a, b, c_gamma)?,
        None => clean.clone().with_corner_measurand(c_gamma)?,
    };
    let node = graph.probe_nodes[0];
    let (f0, _, sweep_clean) = two_stage_peak(&clean, node)?;
    let (f0p, _, sweep_pert) = two_stage_peak(&perturbed, node)?;
    Ok(ShiftReport {
        f0,
        f0_prime: f0p,
        delta_f: (f0 - f0p).abs(),
        sweep_clean_fine: sweep_clean,
        sweep_perturbed_fine: sweep_pert,
    })
}

/// Per-trial robustness outcome.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub f0: f64,
    pub delta_f: f64,
    /// Relative deviation of delta_f from the clean (no-crosstalk) value.
    pub deviation: f64,
    /// Pearson correlation of the dB profile with the clean profile at f0.
    pub profile_corr_f0: f64,
    /// Same at the off-resonance frequency f1.
    pub profile_corr_f1: f64,
}

#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub clean_delta_f: f64,
    pub trials: Vec<TrialOutcome>,
    pub max_deviation: f64,
}

/// Grid/geometry knobs for robustness trials.
#[derive(Debug, Clone)]
pub struct CrosstalkConfig {
    /// Half-width of the fine extraction window around f0, Hz.
    pub fine_span: f64,
    pub fine_step: f64,
    /// Off-resonance comparison frequency (the paper uses 1.27 GHz).
    pub f1: f64,
}

impl Default for CrosstalkConfig {
    fn default() -> Self {
        CrosstalkConfig {
            fine_span: 150e3,
            fine_step: 1e3,
            f1: 1.27e9,
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    num / (va * vb).sqrt()
}

/// Probe-node profile at one frequency, normalized to its own maximum and
/// clipped at the noise floor — the form the skin profile is plotted in.
fn profile_at(graph: &CircuitGraph, drive: &DriveSpec, f: f64) -> Result<Vec<f64>> {
    let sweep = voltage_sweep(graph, drive, graph.probe_nodes[0], &[f * 0.999_999, f])?;
    let row = sweep.raw.row(1);
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(row
        .iter()
        .map(|&v| (v - mx).max(DEFAULT_NOISE_FLOOR_DB))
        .collect())
}

/// Peak-impedance f0 extraction in the presence of interferer tones: the
/// tone responses add in power to the probed voltage, exactly like the
/// instrument sees them. The resonant peak itself is orders of magnitude
/// above any tone, which is what makes the extraction robust.
fn peak_extract(graph: &CircuitGraph, drive: &DriveSpec, cfg: &CrosstalkConfig) -> Result<f64> {
    let f0 = resonance_frequency(&graph.params);
    let node = graph.probe_nodes[0];
    let tones = draw_tones(drive, graph.node_count(), f0 - cfg.fine_span, f0 + cfg.fine_span);
    let noise = tone_power(graph, &tones)?;
    let grid = uniform_grid(f0, cfg.fine_span, cfg.fine_step);
    let vals: Vec<f64> = grid
        .par_iter()
        .map(|&f| -> Result<f64> {
            let j = admittance(graph, std::f64::consts::TAU * f)?;
            let mut rhs = Array1::<C64>::zeros(graph.node_count());
            rhs[node] = C64::new(drive.amplitude, 0.0);
            let cap = drive.amplitude * IMPEDANCE_CAP;
            let v = match j.entries.solve(&rhs) {
                Ok(x) if x[node].norm().is_finite() => x[node].norm().min(cap),
                _ => cap,
            };
            Ok((v * v + noise[node]).sqrt())
        })
        .collect::<Result<_>>()?;
    let imax = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(grid[imax])
}

/// Seeded crosstalk robustness trials. The measurand configured on `graph`
/// defines the sensing task; each trial re-measures f0 (measurand off) and
/// f0' (measurand on) under the same interferer draw, so the surrogate error
/// cancels between the two sweeps.
pub fn crosstalk_trial(
    graph: &CircuitGraph,
    drive: &DriveSpec,
    trials: usize,
    cfg: &CrosstalkConfig,
) -> Result<RobustnessReport> {
    drive.validate()?;
    if trials == 0 {
        return Err(Error::InvalidSweep("trials must be >= 1".into()));
    }
    if drive.crosstalk_fraction > 1.0 {
        return Err(Error::InvalidSweep("crosstalk fraction must be <= 1".into()));
    }
    let mut clean_graph = graph.clone();
    clean_graph.measurand = None;
    let f0_nominal = resonance_frequency(&graph.params);
    let band = (
        cfg.f1.min(f0_nominal) - 5e6,
        cfg.f1.max(f0_nominal) + 5e6,
    );
    let drive = &DriveSpec {
        crosstalk_band: Some(band),
        ..drive.clone()
    };
    let quiet = DriveSpec {
        crosstalk_fraction: 0.0,
        ..drive.clone()
    };
    let f0_clean = peak_extract(&clean_graph, &quiet, cfg)?;
    let fp_clean = peak_extract(graph, &quiet, cfg)?;
    let clean_delta_f = (f0_clean - fp_clean).abs();
    let prof0_clean = profile_at(&clean_graph, &quiet, f0_clean)?;
    let prof1_clean = profile_at(&clean_graph, &quiet, cfg.f1)?;
    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<TrialOutcome> {
            let d = DriveSpec {
                crosstalk_seed: drive
                    .crosstalk_seed
                    .wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                ..drive.clone()
            };
            let f0_t = peak_extract(&clean_graph, &d, cfg)?;
            let fp_t = peak_extract(graph, &d, cfg)?;
            let delta = (f0_t - fp_t).abs();
            let deviation = if clean_delta_f > 0.0 {
                (delta - clean_delta_f).abs() / clean_delta_f
            } else {
                delta
            };
            let p0 = profile_at(&clean_graph, &d, f0_clean)?;
            let p1 = profile_at(&clean_graph, &d, cfg.f1)?;
            Ok(TrialOutcome {
                trial: t,
                f0: f0_t,
                delta_f: delta,
                deviation,
                profile_corr_f0: pearson(&prof0_clean, &p0),
                profile_corr_f1: pearson(&prof1_clean, &p1),
            })
        })
        .collect::<Result<_>>()?;
    let max_deviation = outcomes.iter().map(|o| o.deviation).fold(0.0, f64::max);
    Ok(RobustnessReport {
        clean_delta_f,
        trials: outcomes,
        max_deviation,
    })
}

/// CSV serialization: `# meta:` JSON line, header row, one row per frequency.
/// Im Z at the scan node. All admittance entries are purely imaginary for
/// the lossless network, so Z_pp is too; near a resonance 1/Im Z crosses
/// zero linearly, which makes the pole position bisectable. An exactly
/// singular solve means the frequency sits on the pole.
fn inv_im_impedance(graph: &CircuitGraph, node: usize, f: f64) -> Result<Option<f64>> {
    let j = admittance(graph, std::f64::consts::TAU * f)?;
    let mut rhs = Array1::<C64>::zeros(graph.node_count());
    rhs[node] = C64::new(1.0, 0.0);
    match j.entries.solve(&rhs) {
        Ok(x) if x[node].im != 0.0 && x[node].im.is_finite() => Ok(Some(1.0 / x[node].im)),
        _ => Ok(None),
    }
}

/// Continuous estimate of the impedance-pole frequency nearest `guess`:
/// widen a window until 1/Im Z changes sign between adjacent samples (taking
/// the crossing with the smallest |1/Im Z|, i.e. a pole rather than a zero
/// of Z), then bisect the crossing down to f64 resolution.
fn refine_pole(graph: &CircuitGraph, node: usize, guess: f64) -> Result<f64> {
    let samples = 64usize;
    let mut half_width = 2e3;
    for _ in 0..24 {
        let mut prev: Option<(f64, f64)> = None;
        let mut best: Option<(f64, f64, f64)> = None;
        for i in 0..=samples {
            let f = guess - half_width + 2.0 * half_width * i as f64 / samples as f64;
            if f <= 0.0 {
                continue;
            }
            let s = match inv_im_impedance(graph, node, f)? {
                Some(s) => s,
                None => return Ok(f),
            };
            if let Some((fp, sp)) = prev {
                if sp.signum() != s.signum() {
                    let score = sp.abs().min(s.abs());
                    if best.is_none_or(|(_, _, b)| score < b) {
                        best = Some((fp, f, score));
                    }
                }
            }
            prev = Some((f, s));
        }
        if let Some((mut lo, mut hi, _)) = best {
            let mut s_lo = match inv_im_impedance(graph, node, lo)? {
                Some(s) => s,
                None => return Ok(lo),
            };
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if mid == lo || mid == hi {
                    break;
                }
                let s_mid = match inv_im_impedance(graph, node, mid)? {
                    Some(s) => s,
                    None => return Ok(mid),
                };
                if s_mid.signum() == s_lo.signum() {
                    lo = mid;
                    s_lo = s_mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
        half_width *= 2.0;
    }
    Err(Error::CalibrationFailure(
        "no impedance pole near the scan window".into(),
    ))
}

/// One-shot parasitic calibration: root-find on c_cali until the measured
/// resonance returns to `f0`. The ideal negative-converter model cancels the
/// parasitic exactly, so the root is c_cali = c_para; the routine only sees
/// the measured pole frequency, never the parasitic value itself.
pub fn calibrate_parasitic(graph: &CircuitGraph, f0: f64) -> Result<f64> {
    if graph.parasitic.unwrap_or(0.0) == 0.0 {
        return Ok(0.0);
    }
    let node = graph.parasitic_node;
    let with = |c: f64| -> Result<CircuitGraph> { Ok(graph.clone().with_calibration(c)) };
    // Locate the shifted peak once by scanning, then track the pole as the
    // calibration capacitance walks it back toward f0.
    let (f_scan, _, _) = two_stage_peak(graph, node)?;
    let mut f_prev = refine_pole(graph, node, f_scan)?;
    let shift = |c: f64, start: f64| -> Result<f64> {
        let g = with(c)?;
        Ok(refine_pole(&g, node, start)? - f0)
    };
    let g_lo = f_prev - f0;
    if g_lo == 0.0 {
        return Ok(0.0);
    }
    if g_lo > 0.0 {
        return Err(Error::CalibrationFailure(
            "peak already above f0; parasitic model expects a downshift".into(),
        ));
    }
    // Bracket upward: extra calibration capacitance raises the peak back.
    let mut lo = 0.0f64;
    let mut hi = 1e-16;
    let mut g_hi;
    loop {
        let g = with(hi)?;
        let f = refine_pole(&g, node, f_prev)?;
        f_prev = f;
        g_hi = f - f0;
        if g_hi >= 0.0 {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > 1e-9 {
            return Err(Error::CalibrationFailure(
                "no calibration bracket below 1 nF".into(),
            ));
        }
    }
    for _ in 0..100 {
        if hi - lo <= 1e-9 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let g_mid = shift(mid, f_prev)?;
        if g_mid < 0.0 {
            lo = mid;
        } else {
            hi = mid;
            if g_mid == 0.0 {
                break;
            }
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn sweep_to_csv(sweep: &SweepResult, meta: &serde_json::Value) -> String {
    let mut out = String::new();
    out.push_str(&format!("# meta: {meta}\n"));
    out.push_str("freq_hz");
    for c in &sweep.columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (i, &f) in sweep.grid.iter().enumerate() {
        out.push_str(&format!("{f:.6}"));
        for j in 0..sweep.columns.len() {
            out.push_str(&format!(",{:.10e}", sweep.values[[i, j]]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{bounding_lattice, synthesize_circuit, CircuitParams};

    fn graph(units: usize, ratio: f64) -> CircuitGraph {
        let mut p = CircuitParams::new(5e-12, 5e-12 / ratio, units);
        p.c0 = 0.0;
        let lat = bounding_lattice(&p).unwrap();
        synthesize_circuit(&lat, &p).unwrap()
    }

    #[test]
    fn calibration_without_parasitic_is_zero() {
        let g = graph(1, 160.0);
        let f0 = resonance_frequency(&g.params);
        assert_eq!(calibrate_parasitic(&g, f0).unwrap(), 0.0);
    }

    #[test]
    fn calibration_recovers_parasitic_value() {
        let c_para = 5e-15;
        let g = graph(4, 160.0).with_parasitic(c_para).unwrap();
        let f0 = resonance_frequency(&g.params);
        // The parasitic visibly moves the scan peak off f0.
        let (f_pre, _, _) = two_stage_peak(&g, g.parasitic_node).unwrap();
        assert!((f_pre - f0).abs() > 1e4, "pre-calibration peak at {f_pre}");
        let c_cali = calibrate_parasitic(&g, f0).unwrap();
        assert!(
            ((c_cali - c_para) / c_para).abs() < 1e-6,
            "c_cali {c_cali:e} vs c_para {c_para:e}"
        );
        let gc = g.with_calibration(c_cali);
        let (f_post, _, _) = two_stage_peak(&gc, gc.parasitic_node).unwrap();
        assert!((f_post - f0).abs() <= 1e3, "post-calibration peak {f_post}");
    }

    #[test]
    fn zero_drive_rejected_zero_voltages() {
        let g = graph(1, 160.0);
        let j = admittance(&g, 2.0 * std::f64::consts::TAU * 1e9).unwrap();
        let mut d = DriveSpec::new(g.probe_nodes[0]);
        d.amplitude = 0.0;
        assert!(solve_node_voltages(&j, &d).is_err());
    }

    #[test]
    fn solve_residual_small_off_resonance() {
        let g = graph(1, 160.0);
        let w = std::f64::consts::TAU * 1.3e9;
        let j = admittance(&g, w).unwrap();
        let d = DriveSpec::new(g.probe_nodes[1]);
        let (v, flag) = solve_node_voltages(&j, &d).unwrap();
        assert!(!flag);
        let mut rhs = Array1::<C64>::zeros(g.node_count());
        rhs[d.node] = C64::new(d.amplitude, 0.0);
        let res = &j.entries.dot(&v) - &rhs;
        let rn = res.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let bn = rhs.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(rn / bn < 1e-10, "residual {}", rn / bn);
    }

    #[test]
    fn impedance_peak_at_f0() {
        let g = graph(1, 160.0);
        let f0 = resonance_frequency(&g.params);
        // 1 MHz grid anchored off f0 (the paper's instrument grid)
        let grid: Vec<f64> = (0..81).map(|i| 1.5515e9 + i as f64 * 1e6).collect();
        let scan = impedance_scan(&g, g.probe_nodes[0], &grid).unwrap();
        assert!((scan.extracted_f - f0).abs() <= 0.5e6);
        let zmax = scan.values.column(0).iter().cloned().fold(0.0, f64::max);
        assert!(zmax > 1e3 && zmax < 1e8, "peak {zmax:e}");
        assert_eq!(scan.method, ExtractionMethod::PeakImpedance);
    }

    #[test]
    fn singular_point_capped_and_flagged() {
        let g = graph(1, 160.0);
        let f0 = resonance_frequency(&g.params);
        let grid = vec![f0 - 1.0, f0, f0 + 1.0];
        let scan = impedance_scan(&g, g.probe_nodes[0], &grid).unwrap();
        // exact resonance: J singular (zero mode), capped peak
        assert!(scan.flagged.iter().any(|&f| f));
        assert_eq!(scan.extracted_f, f0);
        assert!(scan.values[[1, 0]] >= IMPEDANCE_CAP * 0.99);
    }

    #[test]
    fn two_stage_agrees_with_spectral_condition() {
        let g = graph(2, 160.0);
        let (f, _, _) = two_stage_peak(&g, g.probe_nodes[0]).unwrap();
        let f0 = resonance_frequency(&g.params);
        // zero mode => k(2 pi f0) = 0 => extracted f equals f0 within fine step
        assert!((f - f0).abs() <= 1e3, "extracted {f} vs f0 {f0}");
    }

    #[test]
    fn voltage_dip_and_skin_profile() {
        let g = graph(6, 160.0);
        let f0 = resonance_frequency(&g.params);
        let drive = DriveSpec::new(*g.probe_nodes.last().unwrap());
        let grid = uniform_grid(f0, 10e6, 1e6);
        let sweep = voltage_sweep(&g, &drive, g.probe_nodes[0], &grid).unwrap();
        // relative to the drive node, the weak-corner transfer is extremal
        // at resonance (the skin-mode ratio exceeds the off-resonant
        // background); a per-frequency-max normalization shows the same
        // feature as a dip
        let (iext, _) = sweep
            .raw
            .column(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert!((sweep.grid[iext] - f0).abs() <= 1e6);
        // profile at f0 decays monotonically away from the drive
        let mid = grid.len() / 2;
        let row = sweep.raw.row(mid);
        for k in 0..row.len() - 1 {
            assert!(row[k] <= row[k + 1] + 1e-9, "profile not monotone at {k}");
        }
        // clipped trace is never below the floor
        assert!(sweep.values.iter().all(|&v| v >= DEFAULT_NOISE_FLOOR_DB));
    }

    #[test]
    fn noise_onset_surrogate() {
        let g = graph(6, 160.0);
        let f0 = resonance_frequency(&g.params);
        let drive = DriveSpec::new(*g.probe_nodes.last().unwrap());
        let grid = uniform_grid(f0, 30e6, 1e6);
        let sweep = voltage_sweep(&g, &drive, g.probe_nodes[0], &grid).unwrap();
        assert_eq!(sweep.method, ExtractionMethod::NoiseOnset);
        let onset = noise_onset_estimate(&sweep).unwrap();
        assert!(onset < f0, "onset {onset} must precede f0 {f0}");
        // no clipped region -> error path
        let shallow = voltage_sweep(&g, &drive, *g.probe_nodes.last().unwrap(), &grid).unwrap();
        if shallow
            .values
            .column(shallow.probe_column)
            .iter()
            .all(|&v| v > DEFAULT_NOISE_FLOOR_DB + 1e-9)
        {
            assert!(matches!(
                noise_onset_estimate(&shallow),
                Err(Error::NoClippedRegion)
            ));
        }
    }

    #[test]
    fn zero_gamma_zero_shift() {
        let g = graph(1, 160.0);
        let report = eigenfrequency_shift(&g, 0.0, None).unwrap();
        assert_eq!(report.delta_f, 0.0);
    }

    #[test]
    fn csv_round_shape() {
        let g = graph(1, 160.0);
        let grid = vec![1.58e9, 1.59e9, 1.60e9];
        let drive = DriveSpec::new(*g.probe_nodes.last().unwrap());
        let sweep = voltage_sweep(&g, &drive, g.probe_nodes[0], &grid).unwrap();
        let csv = sweep_to_csv(&sweep, &serde_json::json!({"experiment": "test"}));
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# meta: "));
        assert_eq!(lines.next().unwrap(), "freq_hz,node_1_db,node_2_db");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn deterministic_crosstalk() {
        let g = graph(1, 160.0);
        let mut drive = DriveSpec::new(*g.probe_nodes.last().unwrap());
        drive.crosstalk_fraction = 0.5;
        drive.crosstalk_seed = 42;
        let tones_a = draw_tones(&drive, g.node_count(), 1.5e9, 1.7e9);
        let tones_b = draw_tones(&drive, g.node_count(), 1.5e9, 1.7e9);
        for (a, b) in tones_a.iter().zip(&tones_b) {
            assert_eq!(a.node, b.node);
            assert_eq!(a.freq, b.freq);
            assert_eq!(a.phase, b.phase);
        }
    }

    #[test]
    fn crosstalk_zero_fraction_zero_deviation() {
        let g = graph(1, 160.0).with_corner_measurand(1e-17).unwrap();
        let drive = DriveSpec::new(*g.probe_nodes.last().unwrap());
        let cfg = CrosstalkConfig {
            fine_span: 50e3,
            fine_step: 1e3,
            ..Default::default()
        };
        let rep = crosstalk_trial(&g, &drive, 2, &cfg).unwrap();
        assert_eq!(rep.max_deviation, 0.0);
    }
}
