//! Acceptance suite: one test per release criterion, each printing a single
//! PASS/FAIL line (run with `-- --nocapture` to see the lines for passing
//! criteria). Criteria that the idealized model cannot honestly meet are
//! asserted literally and left red rather than weakened.

use ndarray::Array2;
use num_complex::Complex64 as C64;

use nh_sense_core::circuit::{
    bounding_lattice, resonance_frequency, synthesize_circuit, CircuitParams, GroundScheme,
};
use nh_sense_core::lattice::{analytic_zero_mode, build_obc_hamiltonian, mode_residuals, Boundary};
use nh_sense_core::measure::{
    calibrate_parasitic, crosstalk_trial, eigenfrequency_shift, two_stage_peak, voltage_sweep,
    CrosstalkConfig, DriveSpec,
};
use nh_sense_core::sensing::{
    perturbation_matrix, sensitivity_curve, shift_exact, shift_first_order, PerturbationSpec,
    DEFAULT_DEVIATION_CAP,
};
use nh_sense_core::spectral::{
    auto_eigendecompose, density_of_states, eigendecompose, numeric_zero_mode, ConditionFlag,
    Spectrum,
};
use nh_sense_core::{CircuitGraph, LatticeSpec};

fn report(criterion: usize, ok: bool, detail: &str) {
    println!(
        "criterion {criterion:2}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion}: {detail}");
}

fn graph(units: usize, ratio: f64) -> CircuitGraph {
    let mut p = CircuitParams::new(5e-12, 5e-12 / ratio, units);
    p.c0 = 0.0;
    let lat = bounding_lattice(&p).unwrap();
    synthesize_circuit(&lat, &p).unwrap()
}

#[test]
fn criterion_01_resonance_at_1p59155_ghz() {
    let g = graph(1, 160.0);
    let (f, _, _) = two_stage_peak(&g, g.probe_nodes[0]).unwrap();
    let target = 1.59155e9;
    let rel = (f - target).abs() / target;
    report(
        1,
        rel < 1e-3,
        &format!("impedance peak {f:.0} Hz, {:.2e} relative off 1.59155 GHz", rel),
    );
}

#[test]
fn criterion_02_analytic_zero_mode_residual() {
    let spec = LatticeSpec::square(9, 1.9, 0.1).unwrap();
    let h = build_obc_hamiltonian(&spec, Boundary::Open).unwrap();
    let mode = analytic_zero_mode(&spec).unwrap();
    let (rr, rl) = mode_residuals(&h.entries, &mode.right, &mode.left);
    report(
        2,
        rr < 1e-10 && rl < 1e-10,
        &format!("9x9 lambda=1.9/0.1 residuals right {rr:.2e}, left {rl:.2e}"),
    );
}

#[test]
fn criterion_03_first_order_matches_oracle() {
    let gamma = 1e-10;
    let mut worst = 0.0f64;
    for l in [5usize, 7, 9] {
        let spec = LatticeSpec::square(l, 1.9, 0.1).unwrap();
        let pert = PerturbationSpec::corner_to(2, vec![l, l], gamma);
        let first = shift_first_order(&spec, &pert).unwrap().delta_e;
        let exact = shift_exact(&spec, &pert).unwrap().delta_e;
        worst = worst.max((first - exact).abs() / exact);
    }
    // At Gamma = 1e-10 the L = 9 point is already at its saturation onset
    // (consistent with criterion 5's own onset scaling), so the 1% figure is
    // not attainable there; L in {5,7} agree to 1e-11 and 1e-6.
    report(
        3,
        worst < 0.01,
        &format!("worst |dE_first - dE_exact|/dE_exact over L in {{5,7,9}}: {worst:.2e}"),
    );
}

#[test]
fn criterion_04_exponential_law_slope() {
    // Regression of ln(dE_exact/Gamma) against chi_x + chi_y. Sweeping the
    // attachment position on a fixed lattice keeps the biorthogonal-norm
    // prefactor constant, so the slope isolates kappa = ln(19); a size sweep
    // would fold the exactly-known ln C = -ln((L+1)/2)^2 term into it.
    let spec = LatticeSpec::square(13, 1.9, 0.1).unwrap();
    let gamma = 1e-18;
    let pts: Vec<(f64, f64)> = [5usize, 7, 9, 11, 13]
        .iter()
        .map(|&m| {
            let pert = PerturbationSpec::corner_to(2, vec![m, m], gamma);
            let est = shift_exact(&spec, &pert).unwrap();
            (est.chi.iter().sum::<f64>(), (est.delta_e / gamma).ln())
        })
        .collect();
    let n = pts.len() as f64;
    let xm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - xm).powi(2)).sum::<f64>();
    let kappa = 19f64.ln();
    report(
        4,
        (slope - kappa).abs() / kappa < 0.05,
        &format!("slope {slope:.4} vs ln 19 = {kappa:.4}"),
    );
}

#[test]
fn criterion_05_saturation_onsets() {
    let template = LatticeSpec::square(5, 1.9, 0.1).unwrap();
    let onset = |sizes: &[usize], gamma: f64| -> Option<usize> {
        sensitivity_curve(&template, sizes, &[gamma], DEFAULT_DEVIATION_CAP)
            .unwrap()
            .iter()
            .find(|p| p.saturated)
            .map(|p| p.size)
    };
    let o18 = onset(&[13, 15, 17, 19], 1e-18);
    let o26 = onset(&[19, 21, 23, 25], 1e-26);
    // plain double precision must refuse these dynamic ranges
    let h17 = build_obc_hamiltonian(&LatticeSpec::square(17, 1.9, 0.1).unwrap(), Boundary::Open)
        .unwrap();
    let plain = eigendecompose(&h17.entries).unwrap();
    let ok = matches!(o18, Some(s) if (15..=19).contains(&s))
        && matches!(o26, Some(s) if (21..=25).contains(&s))
        && plain.condition_flag == ConditionFlag::Unreliable;
    report(
        5,
        ok,
        &format!(
            "onset(1e-18) {o18:?} (want 17±2), onset(1e-26) {o26:?} (want 23±2), plain flag {:?}",
            plain.condition_flag
        ),
    );
}

#[test]
fn criterion_06_skin_effect_sweep() {
    let g = graph(12, 160.0);
    let f0 = resonance_frequency(&g.params);
    // drive the weak corner, as in the skin-profile figure: the profile then
    // rises toward the strong corner at every frequency, steeply at f0
    let drive = DriveSpec::new(g.probe_nodes[0]);
    let grid: Vec<f64> = (-10..=10).map(|i| f0 + i as f64 * 1e6).collect();
    let sweep = voltage_sweep(&g, &drive, g.probe_nodes[0], &grid).unwrap();
    let row = sweep.raw.row(grid.len() / 2);
    let monotone = (0..row.len() - 1).all(|k| row[k] <= row[k + 1] + 1e-9);
    let drop_f0 = row[row.len() - 1] - row[0];
    let grid1: Vec<f64> = vec![1.27e9 - 1e6, 1.27e9, 1.27e9 + 1e6];
    let sweep1 = voltage_sweep(&g, &drive, g.probe_nodes[0], &grid1).unwrap();
    let row1 = sweep1.raw.row(1);
    let drop_f1 = row1[row1.len() - 1] - row1[0];
    // The ideal-buffer model has no dissipative limit, so the unclipped
    // drop far exceeds the paper's 66 dB measurement.
    let ok = monotone && drop_f0 >= 55.0 && drop_f1 < 0.5 * drop_f0;
    report(
        6,
        ok,
        &format!(
            "monotone {monotone}, drop(f0) {drop_f0:.1} dB, drop(1.27 GHz) {drop_f1:.1} dB"
        ),
    );
}

#[test]
fn criterion_07_extreme_measurand() {
    // C_Gamma = 1e-20 fF = 1e-35 F. A symmetric measurand is orthogonal to
    // the sublattice-0 corner mode actually tracked by the scan, so the
    // extracted shift stays at the grid floor; asserted literally and red.
    let c_gamma = 1e-35;
    let r6 = eigenfrequency_shift(&graph(6, 300.0), c_gamma, None).unwrap();
    let r12 = eigenfrequency_shift(&graph(12, 300.0), c_gamma, None).unwrap();
    let ratio = if r6.delta_f > 0.0 {
        r12.delta_f / r6.delta_f
    } else {
        f64::INFINITY
    };
    let ok = r6.delta_f >= 0.2e6 / 3.0
        && r6.delta_f <= 0.2e6 * 3.0
        && r12.delta_f >= 6e6 / 3.0
        && r12.delta_f <= 6e6 * 3.0
        && ratio >= 10.0
        && r6.delta_f > 1e3;
    report(
        7,
        ok,
        &format!(
            "df(6u) {:.3e} Hz (want 0.2 MHz x3), df(12u) {:.3e} Hz (want 6 MHz x3)",
            r6.delta_f, r12.delta_f
        ),
    );
}

#[test]
fn criterion_08_crosstalk_robustness() {
    // 6-unit chain, measurand sized for a ~60 kHz clean shift (60x the fine
    // grid step, so a 5% deviation is resolvable).
    let g = graph(6, 160.0).with_corner_measurand(5e-41).unwrap();
    let mut drive = DriveSpec::new(g.probe_nodes[0]);
    drive.crosstalk_fraction = 0.5;
    drive.crosstalk_seed = 7;
    let cfg = CrosstalkConfig::default();
    let rep = crosstalk_trial(&g, &drive, 20, &cfg).unwrap();
    let worst_corr_f1 = rep
        .trials
        .iter()
        .map(|t| t.profile_corr_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_corr_f0 = rep
        .trials
        .iter()
        .map(|t| t.profile_corr_f0)
        .fold(f64::INFINITY, f64::min);
    // With ideal buffers the skin step is 88 dB per unit, so at f1 the
    // clipped profile keeps its top-node ramp and the correlation floors
    // near 0.6; the <0.5 clause presumes the hardware's 66 dB total span.
    // Asserted literally and left red.
    let ok = rep.max_deviation < 0.05 && worst_corr_f1 < 0.5;
    report(
        8,
        ok,
        &format!(
            "max delta_f deviation {:.3e} (clean df {:.3e} Hz), f0 correlation >= {worst_corr_f0:.3}, worst f1 correlation {worst_corr_f1:.3} (want < 0.5)",
            rep.max_deviation, rep.clean_delta_f
        ),
    );
}

#[test]
fn criterion_09_grounding_schemes_agree() {
    let mut detail = String::new();
    let mut ok = true;
    for units in [1usize, 3] {
        let mut pa = CircuitParams::new(5e-12, 5e-12 / 160.0, units);
        pa.c0 = 0.0;
        let mut pb = pa.clone();
        pb.ground_scheme = GroundScheme::NegativeImpedance;
        let ga = synthesize_circuit(&bounding_lattice(&pa).unwrap(), &pa).unwrap();
        let gb = synthesize_circuit(&bounding_lattice(&pb).unwrap(), &pb).unwrap();
        let (fa, _, _) = two_stage_peak(&ga, ga.probe_nodes[0]).unwrap();
        let (fb, _, _) = two_stage_peak(&gb, gb.probe_nodes[0]).unwrap();
        ok &= (fa - fb).abs() <= 1e6;
        detail.push_str(&format!("{units}u: {fa:.0} vs {fb:.0} Hz; "));
    }
    report(9, ok, detail.trim_end_matches("; "));
}

#[test]
fn criterion_10_parasitic_calibration() {
    let f0 = resonance_frequency(&graph(4, 160.0).params);
    let mut detail = String::new();
    let mut ok = true;
    for c_para in [0.1e-15, 1e-15, 5e-15] {
        let g = graph(4, 160.0).with_parasitic(c_para).unwrap();
        let c_cali = calibrate_parasitic(&g, f0).unwrap();
        let rel = ((c_cali - c_para) / c_para).abs();
        let gc = g.with_calibration(c_cali);
        let (f_post, _, _) = two_stage_peak(&gc, gc.parasitic_node).unwrap();
        ok &= rel < 1e-6 && (f_post - f0).abs() <= 1e3;
        detail.push_str(&format!(
            "{:.1} fF: rel {rel:.1e}, |f-f0| {:.0} Hz; ",
            c_para * 1e15,
            (f_post - f0).abs()
        ));
    }
    report(10, ok, detail.trim_end_matches("; "));
}

#[test]
fn criterion_11_topological_protection_contrast() {
    let spec = LatticeSpec::square(13, 1.0, 0.9).unwrap();
    let h = build_obc_hamiltonian(&spec, Boundary::Open).unwrap();
    let pert = PerturbationSpec::corner_to(2, vec![13, 13], 1e-12);
    let hp = &h.entries + &perturbation_matrix(&spec, &pert).unwrap().entries;
    let s0 = auto_eigendecompose(&h).unwrap();
    let sp = eigendecompose(&hp).unwrap();
    let track = |s: &Spectrum, m: &Array2<C64>, target: f64| -> Vec<f64> {
        let zm = numeric_zero_mode(s, m, C64::new(target, 0.0), 0.4).unwrap();
        density_of_states(&zm).unwrap().weights
    };
    let rel = |a: &[f64], b: &[f64]| -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = a.iter().map(|x| x * x).sum();
        (num / den).sqrt()
    };
    let zero_drift = rel(
        &track(&s0, &h.entries, 0.0),
        &track(&sp, &hp, 0.0),
    );
    let finite_drift = rel(
        &track(&s0, &h.entries, 0.68),
        &track(&sp, &hp, 0.68),
    );
    // The E≈0.68 state is one member of an exactly degenerate doublet whose
    // intra-pair basis is already pinned by the perturbation at this Gamma;
    // the honest rotation is ~1%, so the >10% clause is asserted literally
    // and stays red.
    let ok = zero_drift < 1e-6 && finite_drift > 0.10;
    report(
        11,
        ok,
        &format!("zero-mode drift {zero_drift:.2e} (< 1e-6), 0.68-mode drift {finite_drift:.2e} (> 0.1)"),
    );
}
