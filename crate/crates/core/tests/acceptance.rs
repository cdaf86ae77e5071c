//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line and
//! then asserts. The heavy studies share a lock so that at most one of them
//! holds its matrices at a time.

use std::sync::{Mutex, MutexGuard, OnceLock};

use plod::coarse::MomentMap;
use plod::coefficient::CoefficientField;
use plod::experiments::{
    presets, run_convergence, run_energy_audit, run_fem_comparison, run_localization_decay, run_temporal,
    ConvergenceRow, EnergyRow, RunContext,
};
use plod::fem::{assemble, embed};
use plod::mesh::MeshHierarchy;
use plod::multiscale::{compute_iota, compute_nu, CorrectorContext, ReferenceBubbles};
use plod::wave::InitialStep;

static HEAVY: Mutex<()> = Mutex::new(());

fn heavy() -> MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    println!("{} [{id}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
}

fn num(x: Option<f64>) -> String {
    x.map_or("missing".into(), |x| format!("{x:.2}"))
}

// ---------------------------------------------------------------------------
// Independent moment oracle: per-fine-cell 3-point Gauss quadrature of the
// bilinear interpolant against explicitly written shifted Legendre
// polynomials.

const GAUSS: [(f64, f64); 3] = [(-0.774_596_669_241_483_4, 5.0 / 9.0), (0.0, 8.0 / 9.0), (0.774_596_669_241_483_4, 5.0 / 9.0)];

fn shifted_legendre(q: usize, t: f64) -> f64 {
    match q {
        0 => 1.0,
        1 => 3f64.sqrt() * (2.0 * t - 1.0),
        2 => 5f64.sqrt() * (6.0 * t * t - 6.0 * t + 1.0),
        _ => unreachable!("degree ≤ 2"),
    }
}

/// All moments `∫_K v Λ_{K,(q1,q2)}` of a vertex field, element-major.
fn oracle_moments(mesh: &MeshHierarchy, degree: usize, vertex_values: &[f64]) -> Vec<f64> {
    let m = (degree + 1) * (degree + 1);
    let n = mesh.fine_cells_per_dim();
    let (h, big_h) = (mesh.fine_size(), mesh.coarse_size());
    let r = mesh.fine_per_coarse();
    let mut out = vec![0.0; mesh.n_elements() * m];
    for cy in 0..n {
        for cx in 0..n {
            let v = |a: usize, b: usize| vertex_values[(cy + b) * (n + 1) + cx + a];
            let (v00, v10, v01, v11) = (v(0, 0), v(1, 0), v(0, 1), v(1, 1));
            if v00 == 0.0 && v10 == 0.0 && v01 == 0.0 && v11 == 0.0 {
                continue;
            }
            let k = mesh.element_index(cx / r, cy / r);
            let (kx, ky) = ((cx / r) as f64 * big_h, (cy / r) as f64 * big_h);
            for &(gx, wx) in &GAUSS {
                for &(gy, wy) in &GAUSS {
                    let (s, t) = (0.5 * (gx + 1.0), 0.5 * (gy + 1.0));
                    let val = v00 * (1.0 - s) * (1.0 - t) + v10 * s * (1.0 - t) + v01 * (1.0 - s) * t + v11 * s * t;
                    let (x, y) = ((cx as f64 + s) * h, (cy as f64 + t) * h);
                    let (xh, yh) = ((x - kx) / big_h, (y - ky) / big_h);
                    let w = wx * wy * 0.25 * h * h * val / big_h;
                    for j in 0..m {
                        let (q1, q2) = (j % (degree + 1), j / (degree + 1));
                        out[k * m + j] += w * shifted_legendre(q1, xh) * shifted_legendre(q2, yh);
                    }
                }
            }
        }
    }
    out
}

/// Largest deviation of the oracle moments from the unit vector `(K, j)`.
fn unit_residual(moments: &[f64], index: usize) -> f64 {
    moments
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - if i == index { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

#[test]
fn c01_projection_identities() {
    let mesh = MeshHierarchy::new(3, 5, 6).unwrap();
    let a = CoefficientField::checkerboard(&mesh, 1, 1.0, 10.0).unwrap();
    let fine = assemble(&mesh, &a);
    let (mut bubbles_worst, mut extended_worst, mut columns_worst) = (0.0f64, 0.0f64, 0.0f64);
    for p in 0..=2 {
        let mm = MomentMap::new(&mesh, p);
        let m = mm.modes();
        let bubbles = ReferenceBubbles::new(&mm).unwrap();
        for k in 0..mesh.n_elements() {
            for j in 0..m {
                let b = oracle_moments(&mesh, p, &embed(&mesh, &bubbles.on_element(&mesh, k, j)));
                bubbles_worst = bubbles_worst.max(unit_residual(&b, k * m + j));
            }
            let iota = compute_iota(&mesh, k);
            let (nu, _) = compute_nu(&mm, &bubbles, k);
            let sum: Vec<f64> = iota.iter().zip(&nu).map(|(x, y)| x + y).collect();
            let e = oracle_moments(&mesh, p, &embed(&mesh, &sum));
            extended_worst = extended_worst.max(unit_residual(&e, k * m));
        }
        let ctx = CorrectorContext::new(&a, &fine, &mm).unwrap();
        let all: Vec<usize> = (0..mesh.n_elements()).collect();
        for col in ctx.columns(&all, 2).unwrap() {
            let c = oracle_moments(&mesh, p, &embed(&mesh, &col.to_dense(&mesh)));
            columns_worst = columns_worst.max(unit_residual(&c, col.element * m + col.mode));
        }
    }
    let worst = bubbles_worst.max(extended_worst).max(columns_worst);
    let ok = worst <= 1e-9;
    report(
        1,
        "projection identities",
        ok,
        &format!("bubbles {bubbles_worst:.2e}, extended bubbles {extended_worst:.2e}, corrected columns {columns_worst:.2e} (tol 1e-9)"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------

fn energy_rows() -> &'static [EnergyRow] {
    static ROWS: OnceLock<Vec<EnergyRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let _g = heavy();
        run_energy_audit(&presets::energy_audit(), &RunContext::default()).unwrap()
    })
}

#[test]
fn c02_energy_conservation() {
    let rows: Vec<&EnergyRow> = energy_rows()
        .iter()
        .filter(|r| r.kind == "free" && r.cfl_factor.map_or(true, |f| f == 1.0))
        .collect();
    let thetas: Vec<f64> = rows.iter().map(|r| r.theta).collect();
    let worst = rows.iter().map(|r| r.defect.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    let ok = thetas == [0.0, 1.0 / 12.0, 0.25, 0.5] && rows.iter().all(|r| r.status == "ok" && r.steps == 2000) && worst <= 1e-9;
    report(2, "energy conservation", ok, &format!("θ {thetas:?}, max drift {worst:.2e} over 2000 steps (tol 1e-9)"));
    assert!(ok);
}

#[test]
fn c03_energy_identity() {
    let rows: Vec<&EnergyRow> = energy_rows().iter().filter(|r| r.kind == "forced").collect();
    let worst = rows.iter().map(|r| r.defect.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
    let ok = rows.len() == 4 && rows.iter().all(|r| r.status == "ok" && r.steps == 500) && worst <= 1e-9;
    report(3, "energy identity with source", ok, &format!("max relative defect {worst:.2e} over 500 steps (tol 1e-9)"));
    assert!(ok);
}

#[test]
fn c10_cfl_sharpness() {
    let leapfrog = |f: f64| {
        energy_rows()
            .iter()
            .find(|r| r.kind == "free" && r.theta == 0.0 && r.cfl_factor == Some(f))
            .unwrap()
    };
    let (at, beyond) = (leapfrog(1.0), leapfrog(1.5));
    let ok = at.status == "ok" && at.steps == 2000 && at.defect.is_some_and(|d| d < 1e-9) && beyond.status.contains("energy grew");
    report(
        10,
        "CFL sharpness",
        ok,
        &format!("at bound: {} (drift {:?}); at 1.5x bound: {}", at.status, at.defect, beyond.status),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------

#[test]
fn c04_localization_decay() {
    let rows = {
        let _g = heavy();
        run_localization_decay(&presets::localization()).unwrap()
    };
    let e: Vec<f64> = rows.iter().map(|r| r.decay).collect();
    let shown: Vec<String> = e.iter().map(|v| format!("{v:.3e}")).collect();
    let monotone = e.windows(2).all(|w| w[1] < w[0]);
    let mean_ratio = (e[1] / e[0] + e[2] / e[1] + e[3] / e[2]) / 3.0;
    let ok = rows[0].coarse_exp == 4 && rows[0].p == 1 && monotone && mean_ratio < 0.7;
    report(
        4,
        "localization decay",
        ok,
        &format!("e(ℓ) = [{}], monotone {monotone}, mean ratio ℓ=1..3 {mean_ratio:.3} (< 0.7)", shown.join(", ")),
    );
    assert!(ok);
}

#[test]
fn c05_temporal_orders() {
    let rows = {
        let _g = heavy();
        run_temporal(&presets::temporal(), &RunContext::default()).unwrap()
    };
    let eocs = |theta: f64| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.theta == theta && r.initial == InitialStep::FourthOrder)
            .filter_map(|r| r.eoc_a)
            .collect()
    };
    let (cn, fourth) = (eocs(0.25), eocs(1.0 / 12.0));
    let ok = cn.len() == 2
        && fourth.len() == 2
        && cn.iter().all(|e| (e - 2.0).abs() <= 0.3)
        && fourth.iter().all(|e| (e - 4.0).abs() <= 0.5);
    report(
        5,
        "temporal orders",
        ok,
        &format!("θ=1/4 EOC {cn:.2?} (2 ± 0.3); θ=1/12 EOC {fourth:.2?} (4 ± 0.5)"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------

fn series<'a>(rows: &'a [ConvergenceRow], method: &str, p: usize) -> Vec<&'a ConvergenceRow> {
    let mut s: Vec<&ConvergenceRow> = rows.iter().filter(|r| r.method == method && r.p == p).collect();
    s.sort_by_key(|r| r.coarse_exp);
    s
}

#[test]
fn c06_smooth_spatial_rates() {
    let rows = {
        let _g = heavy();
        run_convergence(&presets::smooth(), &RunContext::default()).unwrap()
    };
    let finest = |p: usize| series(&rows, "plod", p).last().and_then(|r| r.eoc_a);
    let (e0, e1, e2) = (finest(0), finest(1), finest(2));
    let ok = rows.iter().all(|r| r.status == "ok")
        && e0.is_some_and(|e| e >= 1.5)
        && e1.is_some_and(|e| e >= 2.5)
        && e2.is_some_and(|e| (e - 4.0).abs() <= 0.5);
    report(
        6,
        "smooth coefficient rates",
        ok,
        &format!("finest-pair EOC p=0 {} (≥ 1.5), p=1 {} (≥ 2.5), p=2 {} (4 ± 0.5)", num(e0), num(e1), num(e2)),
    );
    assert!(ok);
}

fn rough_rows() -> &'static [ConvergenceRow] {
    static ROWS: OnceLock<Vec<ConvergenceRow>> = OnceLock::new();
    ROWS.get_or_init(|| {
        let _g = heavy();
        run_convergence(&presets::rough(), &RunContext::default()).unwrap()
    })
}

#[test]
fn c07_rough_rate_cap() {
    let rows = rough_rows();
    let mut ok = rows.iter().all(|r| r.status == "ok");
    let mut detail = Vec::new();
    for p in 0..=2 {
        let e = series(rows, "plod", p).last().and_then(|r| r.eoc_a);
        ok &= e.is_some_and(|e| (1.7..=3.2).contains(&e));
        detail.push(format!("p={p} EOC {}", num(e)));
    }
    // p = 1 on H has as many unknowns as p = 0 on H/2
    let (s0, s1) = (series(rows, "plod", 0), series(rows, "plod", 1));
    for r1 in &s1 {
        if let Some(r0) = s0.iter().find(|r| r.dofs == r1.dofs) {
            let better = matches!((r1.a_err, r0.a_err), (Some(a), Some(b)) if a < b);
            ok &= better;
            detail.push(format!("{} dofs: p=1 {:.2e} vs p=0 {:.2e}", r1.dofs, r1.a_err.unwrap_or(f64::NAN), r0.a_err.unwrap_or(f64::NAN)));
        }
    }
    report(7, "rough coefficient rate cap", ok, &format!("{} (EOC in [1.7, 3.2])", detail.join("; ")));
    assert!(ok);
}

#[test]
fn c08_l2_gain() {
    let rows = rough_rows();
    let mut ok = true;
    let mut detail = Vec::new();
    for p in 0..=2 {
        let last = series(rows, "plod", p).last().copied();
        let gain = last.and_then(|r| Some(r.eoc_l2? - r.eoc_a?));
        ok &= gain.is_some_and(|g| (0.7..=1.3).contains(&g));
        detail.push(format!("p={p} gain {}", num(gain)));
    }
    report(8, "L2 gain", ok, &format!("{} (in [0.7, 1.3])", detail.join("; ")));
    assert!(ok);
}

#[test]
fn c09_fem_pre_asymptotics() {
    let rows = {
        let _g = heavy();
        run_fem_comparison(&presets::fem_compare(), &RunContext::default()).unwrap()
    };
    let errs = |method: &str, p: usize| -> Vec<f64> { series(&rows, method, p).iter().filter_map(|r| r.a_err).collect() };
    let (fem, lod) = (errs("fem", 1), errs("plod", 0));
    let spread = fem.iter().cloned().fold(0.0, f64::max) / fem.iter().cloned().fold(f64::INFINITY, f64::min);
    let drop = lod[0] / lod[lod.len() - 1];
    let ok = fem.len() == 4 && lod.len() == 4 && spread < 3.0 && drop >= 10.0;
    report(
        9,
        "FEM pre-asymptotics",
        ok,
        &format!("FEM max/min {spread:.2} (< 3), p=0 multiscale drop {drop:.1}x (≥ 10)"),
    );
    assert!(ok);
}
