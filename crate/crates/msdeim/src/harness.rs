//! End-to-end experiment drivers: nonlinear function approximation, steady
//! and parabolic solves, and a parameter sweep, with error tables and
//! reproducible run directories.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coeff::{generate_permeability, ChannelSpec, FnId, NonlinearFn, PermField};
use crate::fem::{
    apply_dirichlet, assemble_load, assemble_mass, assemble_stiffness, lumped_mass, CsrMatrix,
};
use crate::gmsfem::{build_offline_basis, MultiscaleBasis};
use crate::grid::{
    build_grids, build_neighborhoods, build_partition_of_unity, CoarseGrid, FineMesh,
    Neighborhood, PartitionOfUnity,
};
use crate::interp::{build_msdeim, build_weight, MsDeim, PodSize, PodWeight};
use crate::solver::{
    backward_euler_march, solve_steady, DeimTarget, Mode, NewtonConfig, ReducedModel,
    SolveReport,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    FnApprox,
    Steady,
    Parabolic,
    ParamSweep,
}

/// Full description of one run; serialized verbatim into the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default = "default_n_coarse")]
    pub n_coarse: usize,
    #[serde(default = "default_n_sub")]
    pub n_sub: usize,
    /// "case1", "case2", or "homogeneous".
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Contrast exponent: channel permeability is `10^eta`.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Offline eigenmodes kept per coarse region.
    #[serde(default = "default_m_off")]
    pub m_off: usize,
    #[serde(default = "default_one")]
    pub m_min: usize,
    #[serde(default = "default_m_max")]
    pub m_max: usize,
    /// Test parameter of the nonlinearity.
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Training parameters for interpolation snapshots.
    #[serde(default)]
    pub mu_train: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_max_iter")]
    pub newton_max_iter: usize,
    #[serde(default = "default_true")]
    pub weighted_pod: bool,
    /// Cap on pooled training states (most recent kept).
    #[serde(default = "default_snapshot_cap")]
    pub snapshot_cap: usize,
    /// Parabolic interpolation target: "multiplier" (interpolate `b(u)`
    /// alone, robust at small point counts) or "product" (interpolate
    /// `b(u) u` directly, kept for comparison).
    #[serde(default = "default_deim_target")]
    pub deim_target: String,
    /// Directory holding a persisted offline bundle to reuse; validated
    /// against this config's grid, field, and mode count via the bundle
    /// manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle_dir: Option<std::path::PathBuf>,
}

fn default_n_coarse() -> usize {
    10
}
fn default_n_sub() -> usize {
    10
}
fn default_preset() -> String {
    "case1".into()
}
fn default_eta() -> f64 {
    4.0
}
fn default_m_off() -> usize {
    3
}
fn default_one() -> usize {
    1
}
fn default_m_max() -> usize {
    6
}
fn default_mu() -> f64 {
    0.5
}
fn default_dt() -> f64 {
    1e-2
}
fn default_t_end() -> f64 {
    0.1
}
fn default_newton_tol() -> f64 {
    1e-12
}
fn default_newton_max_iter() -> usize {
    50
}
fn default_true() -> bool {
    true
}
fn default_deim_target() -> String {
    "multiplier".into()
}
fn default_snapshot_cap() -> usize {
    200
}

impl RunConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let mut cfg = RunConfig {
            experiment,
            n_coarse: default_n_coarse(),
            n_sub: default_n_sub(),
            preset: default_preset(),
            eta: default_eta(),
            seed: 0,
            m_off: default_m_off(),
            m_min: 1,
            m_max: default_m_max(),
            mu: default_mu(),
            mu_train: vec![],
            dt: default_dt(),
            t_end: default_t_end(),
            newton_tol: default_newton_tol(),
            newton_max_iter: default_newton_max_iter(),
            weighted_pod: true,
            snapshot_cap: default_snapshot_cap(),
            deim_target: default_deim_target(),
            bundle_dir: None,
        };
        match experiment {
            Experiment::FnApprox => {
                cfg.mu = 0.5;
                cfg.mu_train = vec![0.1, 0.3, 0.5, 0.7, 0.9];
            }
            Experiment::Steady => {
                cfg.mu = 0.5;
            }
            Experiment::Parabolic => {
                cfg.mu = 10.0;
            }
            Experiment::ParamSweep => {
                cfg.mu = 8.5;
                cfg.mu_train = vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
            }
        }
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 || self.n_sub < 2 {
            return Err(Error::Config("need at least 2x2 coarse and sub grids".into()));
        }
        if self.m_min == 0 || self.m_min > self.m_max {
            return Err(Error::Config("need 1 <= m_min <= m_max".into()));
        }
        if self.m_off == 0 {
            return Err(Error::Config("need at least one offline mode".into()));
        }
        if self.dt <= 0.0 || self.t_end < self.dt {
            return Err(Error::Config("need dt > 0 and t_end >= dt".into()));
        }
        if self.newton_tol <= 0.0 {
            return Err(Error::Config("newton_tol must be positive".into()));
        }
        let needs_train = matches!(self.experiment, Experiment::FnApprox | Experiment::ParamSweep);
        if needs_train && self.mu_train.is_empty() {
            return Err(Error::Config("experiment needs training parameters".into()));
        }
        match self.deim_target.as_str() {
            "multiplier" | "product" => {}
            other => {
                return Err(Error::Config(format!("unknown deim_target '{other}'")));
            }
        }
        match self.preset.as_str() {
            "case1" | "case2" | "homogeneous" => Ok(()),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    fn multiplier_target(&self) -> bool {
        self.deim_target == "multiplier"
    }

    fn newton(&self) -> NewtonConfig {
        NewtonConfig {
            tol: self.newton_tol,
            max_iter: self.newton_max_iter,
        }
    }
}

/// Relative l2 error `||f - f_approx|| / ||f_approx||`; note the denominator
/// is the approximation.
pub fn error_l2(f: &[f64], f_approx: &[f64]) -> Result<f64> {
    if f.len() != f_approx.len() {
        return Err(Error::DimensionMismatch {
            expected: f.len(),
            got: f_approx.len(),
            context: "error_l2",
        });
    }
    let num: f64 = f
        .iter()
        .zip(f_approx)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = f_approx.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::Config("error_l2: zero denominator".into()));
    }
    Ok(num / den)
}

/// Relative energy error `sqrt((u-v)^T A (u-v) / u^T A u)` in the fine
/// stiffness norm.
pub fn error_energy(u: &[f64], v: &[f64], a: &CsrMatrix) -> Result<f64> {
    if u.len() != v.len() || u.len() != a.n_rows {
        return Err(Error::DimensionMismatch {
            expected: a.n_rows,
            got: u.len().max(v.len()),
            context: "error_energy",
        });
    }
    let quad = |x: &[f64]| -> f64 {
        let ax = a.matvec(x);
        x.iter().zip(&ax).map(|(p, q)| p * q).sum()
    };
    let diff: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
    let den = quad(u);
    if den <= 0.0 {
        return Err(Error::Config("error_energy: zero denominator".into()));
    }
    Ok((quad(&diff) / den).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy)]
pub struct ErrorRow {
    /// Interpolation points per region (the largest across regions when they
    /// differ due to rank limits).
    pub m: usize,
    pub l2: f64,
    pub energy: f64,
}

#[derive(Debug, Clone)]
pub struct ErrorTable {
    pub label: String,
    pub rows: Vec<ErrorRow>,
}

impl ErrorTable {
    pub fn new(label: impl Into<String>) -> Self {
        ErrorTable {
            label: label.into(),
            rows: vec![],
        }
    }

    /// Append a row; `m` must strictly increase.
    pub fn push(&mut self, row: ErrorRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.m <= last.m {
                return Err(Error::Config(format!(
                    "table {}: m must increase, got {} after {}",
                    self.label, row.m, last.m
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// Nonincreasing in `m` within a fractional noise tolerance.
    pub fn is_monotone(&self, noise_frac: f64, floor: f64) -> bool {
        self.rows.windows(2).all(|w| {
            w[1].l2 <= w[0].l2 * (1.0 + noise_frac) + floor
                && w[1].energy <= w[0].energy * (1.0 + noise_frac) + floor
        })
    }
}

#[derive(Debug, Default)]
pub struct ExperimentOutput {
    pub tables: Vec<ErrorTable>,
    pub reports: Vec<(String, SolveReport)>,
    pub notes: Vec<String>,
    /// (name, hash) pairs of run artifacts, recorded in the manifest.
    pub artifacts: Vec<(String, String)>,
}

/// Shared per-run geometry, field, basis, and fine-grid operators.
pub struct Workspace {
    pub mesh: FineMesh,
    pub coarse: CoarseGrid,
    pub nbhds: Vec<Neighborhood>,
    pub pu: PartitionOfUnity,
    pub field: PermField,
    pub basis: MultiscaleBasis,
    pub a_bc: CsrMatrix,
    pub m_bc: CsrMatrix,
    pub lump_bc: Vec<f64>,
    pub weight: PodWeight,
}

pub fn build_workspace(cfg: &RunConfig) -> Result<Workspace> {
    let (mesh, coarse) = build_grids(cfg.n_coarse, cfg.n_sub)?;
    let nbhds = build_neighborhoods(&coarse, &mesh);
    let pu = build_partition_of_unity(&coarse, &mesh);
    let field = if cfg.preset == "homogeneous" {
        PermField::homogeneous(&mesh)
    } else {
        generate_permeability(&ChannelSpec::preset(&cfg.preset)?, cfg.eta, &mesh, cfg.seed)
    };
    let basis = match &cfg.bundle_dir {
        Some(dir) if dir.join("basis.txt").exists() => {
            let expected = bundle_manifest(cfg, &field);
            crate::gmsfem::load_bundle(dir, &expected, &nbhds)?.basis
        }
        _ => build_offline_basis(&mesh, &coarse, &nbhds, &pu, &field, cfg.m_off)?,
    };
    let a = assemble_stiffness(&mesh, &field.values)?;
    let m = assemble_mass(&mesh);
    let zeros = vec![0.0; mesh.n_nodes()];
    let (a_bc, _) = apply_dirichlet(&a, &zeros, &mesh.boundary_mask);
    let (m_bc, _) = apply_dirichlet(&m, &zeros, &mesh.boundary_mask);
    let mut lump_bc = lumped_mass(&mesh);
    for (l, &b) in lump_bc.iter_mut().zip(&mesh.boundary_mask) {
        if b {
            *l = 0.0;
        }
    }
    let weight = if cfg.weighted_pod {
        build_weight(&basis, &field, &mesh)
    } else {
        PodWeight::identity(mesh.n_nodes())
    };
    Ok(Workspace {
        mesh,
        coarse,
        nbhds,
        pu,
        field,
        basis,
        a_bc,
        m_bc,
        lump_bc,
        weight,
    })
}

/// The parabolic source `h(x) = 1 + sin(2 pi x1) sin(2 pi x2)`, zeroed on the
/// Dirichlet boundary.
fn parabolic_load(ws: &Workspace) -> Vec<f64> {
    let tau = 2.0 * std::f64::consts::PI;
    let h = assemble_load(&ws.mesh, |x, y| 1.0 + (tau * x).sin() * (tau * y).sin());
    h.iter()
        .zip(&ws.mesh.boundary_mask)
        .map(|(&v, &b)| if b { 0.0 } else { v })
        .collect()
}

fn parabolic_target(cfg: &RunConfig) -> DeimTarget {
    if cfg.multiplier_target() {
        DeimTarget::Multiplier
    } else {
        DeimTarget::Product
    }
}

/// Keep the most recent `cap` states.
fn cap_states(mut states: Vec<Vec<f64>>, cap: usize) -> Vec<Vec<f64>> {
    if states.len() > cap {
        states.drain(..states.len() - cap);
    }
    states
}

/// Requested per-region sizes for the table sweep: `m_min..=m_max`, then a
/// full-rank run appended when it adds points beyond `m_max`.
fn size_schedule(cfg: &RunConfig) -> Vec<(usize, PodSize)> {
    let mut v: Vec<(usize, PodSize)> = (cfg.m_min..=cfg.m_max)
        .map(|m| (m, PodSize::Count(m)))
        .collect();
    v.push((usize::MAX, PodSize::FullRank));
    v
}

fn max_points(ms: &MsDeim) -> usize {
    ms.regions.iter().map(|r| r.op.n_points()).max().unwrap_or(0)
}

/// Build the interpolation of the nonlinear function catalog entries and
/// tabulate reconstruction errors for each interpolation size. The error is
/// measured at the multiscale solution of the unit-forcing elliptic problem;
/// training snapshots evaluate each training parameter on a small family of
/// coarse elliptic solves with varied forcings (the unit forcing plus three
/// oscillatory ones), so the interpolation is trained on a state manifold
/// rather than on the single test state.
pub fn run_fn_approx(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let ws = build_workspace(cfg)?;
    let mut out = ExperimentOutput::default();
    out.artifacts.push(("field_hash".into(), ws.field.hash()));

    // Training states: coarse Galerkin solutions of -div(kappa grad u) = f
    // for a fixed forcing family; the first (unit forcing) is the test state.
    let pi = std::f64::consts::PI;
    let forcings: Vec<Box<dyn Fn(f64, f64) -> f64>> = vec![
        Box::new(|_, _| 1.0),
        Box::new(move |x, y| (2.0 * pi * x).sin() * (pi * y).sin()),
        Box::new(move |x, y| (pi * x).sin() * (2.0 * pi * y).sin()),
        Box::new(move |x, y| (2.0 * pi * x).cos() * (2.0 * pi * y).cos()),
    ];
    let a_t = ws.basis.project_matrix(&ws.a_bc);
    let a_lu = a_t.lu();
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(forcings.len());
    for f in &forcings {
        let load = assemble_load(&ws.mesh, |x, y| f(x, y));
        let h_bc: Vec<f64> = load
            .iter()
            .zip(&ws.mesh.boundary_mask)
            .map(|(&v, &b)| if b { 0.0 } else { v })
            .collect();
        let h_t = nalgebra::DVector::from_column_slice(&ws.basis.restrict(&h_bc)?);
        let zf = a_lu
            .solve(&h_t)
            .ok_or(Error::Config("coarse elliptic solve failed".into()))?;
        states.push(zf.as_slice().to_vec());
    }
    let z: Vec<f64> = states[0].clone();
    let u = ws.basis.prolong(&z)?;

    for id in [FnId::F1, FnId::F2] {
        let label = match id {
            FnId::F1 => "F1",
            FnId::F2 => "F2",
            _ => unreachable!(),
        };
        let mut table = ErrorTable::new(label);
        let fns: Vec<NonlinearFn> = cfg
            .mu_train
            .iter()
            .map(|&mu| NonlinearFn::new(id, mu))
            .collect();
        let closures: Vec<Box<dyn Fn(f64) -> f64>> = fns
            .iter()
            .map(|f| {
                let f = f.clone();
                Box::new(move |x: f64| f.value(x)) as Box<dyn Fn(f64) -> f64>
            })
            .collect();
        let mut samples: Vec<(&dyn Fn(f64) -> f64, &[f64])> = vec![];
        for c in &closures {
            for state in &states {
                samples.push((c.as_ref() as &dyn Fn(f64) -> f64, state.as_slice()));
            }
        }

        let test = NonlinearFn::new(id, cfg.mu);
        let mut exact = vec![0.0; ws.mesh.n_nodes()];
        for (i, &ui) in u.iter().enumerate() {
            exact[i] = test.value_at(ui, i)?;
        }
        let test_c: &dyn Fn(f64) -> f64 = &|x| test.value(x);

        for (m_label, size) in size_schedule(cfg) {
            let ms = build_msdeim(&samples, &ws.basis, &ws.nbhds, &ws.pu, &ws.weight, size)?;
            let points = max_points(&ms);
            let row_m = if m_label == usize::MAX { points } else { m_label };
            if table.rows.last().map_or(false, |r| row_m <= r.m) {
                continue;
            }
            let mut meter = crate::interp::EvalMeter::default();
            let approx = ms.apply(test_c, &z, &ws.basis, &ws.nbhds, &mut meter)?;
            let l2 = error_l2(&exact, &approx)?;
            let energy = error_energy(&exact, &approx, &ws.a_bc)?;
            table.push(ErrorRow { m: row_m, l2, energy })?;
        }
        out.tables.push(table);
    }
    Ok(out)
}

/// Steady solves `div(kappa grad u) = g(u)` in full and interpolated modes;
/// errors compare the two prolonged coarse solutions.
pub fn run_steady(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let ws = build_workspace(cfg)?;
    let mut out = ExperimentOutput::default();
    out.artifacts.push(("field_hash".into(), ws.field.hash()));
    let newton = cfg.newton();
    let g = NonlinearFn::new(FnId::GForce, cfg.mu);

    let full = ReducedModel::steady(
        &ws.basis,
        &ws.nbhds,
        &ws.a_bc,
        ws.lump_bc.clone(),
        g.clone(),
        Mode::Full,
        None,
    )?;
    let (z_full, rep_full) = solve_steady(&full, &newton)?;
    let u_full = ws.basis.prolong(z_full.as_slice())?;
    let states = cap_states(rep_full.iterates.clone(), cfg.snapshot_cap);
    out.reports.push((
        "steady_full".into(),
        SolveReport {
            steps: vec![rep_full],
            total_evals: 0,
            wall_seconds: 0.0,
        },
    ));

    let g_c: &dyn Fn(f64) -> f64 = &|x| g.value(x);
    let samples: Vec<(&dyn Fn(f64) -> f64, &[f64])> =
        states.iter().map(|s| (g_c, s.as_slice())).collect();

    let mut table = ErrorTable::new("steady");
    for (m_label, size) in size_schedule(cfg) {
        let mut ms = build_msdeim(&samples, &ws.basis, &ws.nbhds, &ws.pu, &ws.weight, size)?;
        ms.project_through_diagonal(&ws.lump_bc, &ws.basis, &ws.nbhds)?;
        let points = max_points(&ms);
        let row_m = if m_label == usize::MAX { points } else { m_label };
        if table.rows.last().map_or(false, |r| row_m <= r.m) {
            continue;
        }
        let red = ReducedModel::steady(
            &ws.basis,
            &ws.nbhds,
            &ws.a_bc,
            ws.lump_bc.clone(),
            g.clone(),
            Mode::MsDeim,
            Some(ms),
        )?;
        match solve_steady(&red, &newton) {
            Ok((z_red, rep)) => {
                let u_red = ws.basis.prolong(z_red.as_slice())?;
                let l2 = error_l2(&u_full, &u_red)?;
                let energy = error_energy(&u_full, &u_red, &ws.a_bc)?;
                table.push(ErrorRow { m: row_m, l2, energy })?;
                out.reports.push((
                    format!("steady_msdeim_m{row_m}"),
                    SolveReport {
                        steps: vec![rep],
                        total_evals: 0,
                        wall_seconds: 0.0,
                    },
                ));
            }
            Err(e) => out
                .notes
                .push(format!("steady m={row_m}: Newton failed ({e})")),
        }
    }
    out.tables.push(table);
    Ok(out)
}

/// Run one full-mode time march and harvest Newton iterates as training
/// states.
fn full_march_states(
    ws: &Workspace,
    h_bc: &[f64],
    nonlin: &NonlinearFn,
    cfg: &RunConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, SolveReport)> {
    let model = ReducedModel::parabolic(
        &ws.basis,
        &ws.nbhds,
        &ws.a_bc,
        &ws.m_bc,
        h_bc,
        nonlin.clone(),
        Mode::Full,
        None,
    )?;
    let z0 = vec![0.0; ws.basis.n_coarse()];
    let out = backward_euler_march(&model, &z0, cfg.dt, cfg.t_end, &cfg.newton(), 1)?;
    if let Some((step, e)) = out.diverged {
        return Err(Error::Config(format!(
            "full-mode march diverged at step {step}: {e}"
        )));
    }
    let states: Vec<Vec<f64>> = out
        .report
        .steps
        .iter()
        .flat_map(|s| s.iterates.iter().cloned())
        .collect();
    Ok((out.trajectory, states, out.report))
}

/// Parabolic march at `mu`, full vs interpolated, error at the final time.
pub fn run_parabolic(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let ws = build_workspace(cfg)?;
    let mut out = ExperimentOutput::default();
    out.artifacts.push(("field_hash".into(), ws.field.hash()));
    let h_bc = parabolic_load(&ws);
    let b = NonlinearFn::new(FnId::BExp, cfg.mu);
    let (traj_full, states, rep_full) = full_march_states(&ws, &h_bc, &b, cfg)?;
    let states = cap_states(states, cfg.snapshot_cap);
    let u_full = ws.basis.prolong(traj_full.last().unwrap())?;
    out.reports.push(("parabolic_full".into(), rep_full));

    let mult = cfg.multiplier_target();
    let w_c: &dyn Fn(f64) -> f64 = &|x| b.value(x) * x;
    let b_c: &dyn Fn(f64) -> f64 = &|x| b.value(x);
    let target_fn = if mult { b_c } else { w_c };
    let samples: Vec<(&dyn Fn(f64) -> f64, &[f64])> =
        states.iter().map(|s| (target_fn, s.as_slice())).collect();

    let mut table = ErrorTable::new("parabolic");
    for (m_label, size) in size_schedule(cfg) {
        let mut ms = build_msdeim(&samples, &ws.basis, &ws.nbhds, &ws.pu, &ws.weight, size)?;
        if !mult {
            ms.project_through(&ws.a_bc, &ws.basis, &ws.nbhds)?;
        }
        let points = max_points(&ms);
        let row_m = if m_label == usize::MAX { points } else { m_label };
        if table.rows.last().map_or(false, |r| row_m <= r.m) {
            continue;
        }
        let red = ReducedModel::parabolic(
            &ws.basis,
            &ws.nbhds,
            &ws.a_bc,
            &ws.m_bc,
            &h_bc,
            b.clone(),
            Mode::MsDeim,
            Some(ms),
        )?
        .with_target(parabolic_target(cfg))?;
        let z0 = vec![0.0; ws.basis.n_coarse()];
        let march = backward_euler_march(&red, &z0, cfg.dt, cfg.t_end, &cfg.newton(), 1)?;
        match march.diverged {
            None => {
                let u_red = ws.basis.prolong(march.trajectory.last().unwrap())?;
                let l2 = error_l2(&u_full, &u_red)?;
                let energy = error_energy(&u_full, &u_red, &ws.a_bc)?;
                table.push(ErrorRow { m: row_m, l2, energy })?;
                out.reports
                    .push((format!("parabolic_msdeim_m{row_m}"), march.report));
            }
            Some((step, e)) => out
                .notes
                .push(format!("parabolic m={row_m}: diverged at step {step} ({e})")),
        }
    }
    out.tables.push(table);
    Ok(out)
}

/// Parameter sweep: train the interpolation on pooled full-mode iterates at
/// `mu_train`, test on a held-out `mu`.
pub fn run_param_sweep(cfg: &RunConfig) -> Result<ExperimentOutput> {
    let ws = build_workspace(cfg)?;
    let mut out = ExperimentOutput::default();
    out.artifacts.push(("field_hash".into(), ws.field.hash()));
    let h_bc = parabolic_load(&ws);

    // Pooled training pairs: each iterate tagged with its own parameter.
    let mut pooled: Vec<(f64, Vec<f64>)> = vec![];
    for &mu in &cfg.mu_train {
        let b = NonlinearFn::new(FnId::BExp, mu);
        let (_, states, _) = full_march_states(&ws, &h_bc, &b, cfg)?;
        pooled.extend(states.into_iter().map(|s| (mu, s)));
    }
    if pooled.len() > cfg.snapshot_cap {
        pooled.drain(..pooled.len() - cfg.snapshot_cap);
    }
    let mult = cfg.multiplier_target();
    let closures: Vec<Box<dyn Fn(f64) -> f64>> = pooled
        .iter()
        .map(|(mu, _)| {
            let f = NonlinearFn::new(FnId::BExp, *mu);
            if mult {
                Box::new(move |x: f64| f.value(x)) as Box<dyn Fn(f64) -> f64>
            } else {
                Box::new(move |x: f64| f.value(x) * x) as Box<dyn Fn(f64) -> f64>
            }
        })
        .collect();
    let samples: Vec<(&dyn Fn(f64) -> f64, &[f64])> = closures
        .iter()
        .zip(&pooled)
        .map(|(c, (_, s))| (c.as_ref() as &dyn Fn(f64) -> f64, s.as_slice()))
        .collect();

    // Reference: full-mode march at the test parameter.
    let b_test = NonlinearFn::new(FnId::BExp, cfg.mu);
    let (traj_full, _, rep_full) = full_march_states(&ws, &h_bc, &b_test, cfg)?;
    let u_full = ws.basis.prolong(traj_full.last().unwrap())?;
    out.reports.push(("sweep_full".into(), rep_full));

    let mut table = ErrorTable::new("sweep");
    for (m_label, size) in size_schedule(cfg) {
        let mut ms = build_msdeim(&samples, &ws.basis, &ws.nbhds, &ws.pu, &ws.weight, size)?;
        if !mult {
            ms.project_through(&ws.a_bc, &ws.basis, &ws.nbhds)?;
        }
        let points = max_points(&ms);
        let row_m = if m_label == usize::MAX { points } else { m_label };
        if table.rows.last().map_or(false, |r| row_m <= r.m) {
            continue;
        }
        let red = ReducedModel::parabolic(
            &ws.basis,
            &ws.nbhds,
            &ws.a_bc,
            &ws.m_bc,
            &h_bc,
            b_test.clone(),
            Mode::MsDeim,
            Some(ms),
        )?
        .with_target(parabolic_target(cfg))?;
        let z0 = vec![0.0; ws.basis.n_coarse()];
        let march = backward_euler_march(&red, &z0, cfg.dt, cfg.t_end, &cfg.newton(), 1)?;
        match march.diverged {
            None => {
                let u_red = ws.basis.prolong(march.trajectory.last().unwrap())?;
                let l2 = error_l2(&u_full, &u_red)?;
                let energy = error_energy(&u_full, &u_red, &ws.a_bc)?;
                table.push(ErrorRow { m: row_m, l2, energy })?;
                out.reports
                    .push((format!("sweep_msdeim_m{row_m}"), march.report));
            }
            Some((step, e)) => out
                .notes
                .push(format!("sweep m={row_m}: diverged at step {step} ({e})")),
        }
    }
    out.tables.push(table);
    Ok(out)
}

/// Manifest keys identifying an offline bundle's provenance.
pub fn bundle_manifest(cfg: &RunConfig, field: &PermField) -> Vec<(String, String)> {
    vec![
        ("n_coarse".into(), cfg.n_coarse.to_string()),
        ("n_sub".into(), cfg.n_sub.to_string()),
        ("preset".into(), cfg.preset.clone()),
        ("eta".into(), format!("{:.16e}", cfg.eta)),
        ("seed".into(), cfg.seed.to_string()),
        ("m_off".into(), cfg.m_off.to_string()),
        ("field_hash".into(), field.hash()),
    ]
}

/// Build the offline basis and persist it for later reuse.
pub fn build_offline_bundle(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    let (mesh, _coarse) = build_grids(cfg.n_coarse, cfg.n_sub)?;
    let nbhds = build_neighborhoods(&_coarse, &mesh);
    let pu = build_partition_of_unity(&_coarse, &mesh);
    let field = if cfg.preset == "homogeneous" {
        PermField::homogeneous(&mesh)
    } else {
        generate_permeability(&ChannelSpec::preset(&cfg.preset)?, cfg.eta, &mesh, cfg.seed)
    };
    let spaces = crate::gmsfem::build_offline_spaces(&mesh, &nbhds, &field, cfg.m_off)?;
    let basis = crate::gmsfem::build_basis(&spaces, &pu, &nbhds, &mesh)?;
    let manifest = bundle_manifest(cfg, &field);
    crate::gmsfem::save_bundle(dir, &basis, &spaces, &manifest)
}

/// Run only the full-evaluation reference of an experiment (no interpolation
/// comparison); error tables stay empty.
pub fn run_full_only(cfg: &RunConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let ws = build_workspace(cfg)?;
    let mut out = ExperimentOutput::default();
    out.artifacts.push(("field_hash".into(), ws.field.hash()));
    match cfg.experiment {
        Experiment::FnApprox => {
            out.notes
                .push("fn_approx has no full-only variant; nothing to run".into());
        }
        Experiment::Steady => {
            let g = NonlinearFn::new(FnId::GForce, cfg.mu);
            let model = ReducedModel::steady(
                &ws.basis,
                &ws.nbhds,
                &ws.a_bc,
                ws.lump_bc.clone(),
                g,
                Mode::Full,
                None,
            )?;
            let (_, rep) = solve_steady(&model, &cfg.newton())?;
            out.reports.push((
                "steady_full".into(),
                SolveReport {
                    steps: vec![rep],
                    total_evals: 0,
                    wall_seconds: 0.0,
                },
            ));
        }
        Experiment::Parabolic | Experiment::ParamSweep => {
            let h_bc = parabolic_load(&ws);
            let b = NonlinearFn::new(FnId::BExp, cfg.mu);
            let (_, _, rep) = full_march_states(&ws, &h_bc, &b, cfg)?;
            out.reports.push(("full".into(), rep));
        }
    }
    Ok(out)
}

/// Quick self-checks for the `verify` CLI subcommand: each returns a named
/// pass/fail.
pub fn verify_suite() -> Vec<(String, bool)> {
    let mut results = vec![];
    let mut check = |name: &str, f: &dyn Fn() -> Result<bool>| {
        let ok = f().unwrap_or(false);
        results.push((name.to_string(), ok));
    };

    check("partition_of_unity_sums_to_one", &|| {
        let (mesh, coarse) = build_grids(10, 10)?;
        let pu = build_partition_of_unity(&coarse, &mesh);
        let nbhds = build_neighborhoods(&coarse, &mesh);
        let mut sums = vec![0.0; mesh.n_nodes()];
        for (i, nbhd) in nbhds.iter().enumerate() {
            for (l, &g) in nbhd.fine_nodes.iter().enumerate() {
                sums[g] += pu.chi[i][l];
            }
        }
        Ok(sums.iter().all(|s| (s - 1.0).abs() <= 1e-12))
    });

    check("fn_approx_full_rank_exact", &|| {
        let mut cfg = RunConfig::defaults(Experiment::FnApprox);
        cfg.n_coarse = 2;
        cfg.n_sub = 4;
        cfg.preset = "homogeneous".into();
        cfg.m_off = 2;
        cfg.m_max = 3;
        let out = run_fn_approx(&cfg)?;
        Ok(out
            .tables
            .iter()
            .all(|t| t.rows.last().map_or(false, |r| r.l2 <= 1e-10)))
    });

    check("steady_full_rank_exact", &|| {
        let mut cfg = RunConfig::defaults(Experiment::Steady);
        cfg.n_coarse = 2;
        cfg.n_sub = 4;
        cfg.preset = "homogeneous".into();
        cfg.m_off = 2;
        cfg.m_max = 3;
        let out = run_steady(&cfg)?;
        Ok(out.notes.is_empty()
            && out.tables[0].rows.last().map_or(false, |r| r.l2 <= 1e-10))
    });

    results
}

pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::FnApprox => run_fn_approx(cfg),
        Experiment::Steady => run_steady(cfg),
        Experiment::Parabolic => run_parabolic(cfg),
        Experiment::ParamSweep => run_param_sweep(cfg),
    }
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write `manifest.txt`, `errors.csv`, and `report.csv`; reruns with the same
/// config produce byte-identical files.
pub fn write_outputs(dir: &Path, cfg: &RunConfig, out: &ExperimentOutput) -> Result<()> {
    fs::create_dir_all(dir)?;

    let mut manifest = String::new();
    manifest.push_str(&cfg.to_toml());
    for (k, v) in &out.artifacts {
        manifest.push_str(&format!("{k} = \"{v}\"\n"));
    }
    for (i, n) in out.notes.iter().enumerate() {
        manifest.push_str(&format!("note_{i} = \"{n}\"\n"));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;

    let mut errors = String::from("table,m,relative_l2_error,relative_energy_error\n");
    for t in &out.tables {
        for r in &t.rows {
            errors.push_str(&format!(
                "{},{},{},{}\n",
                t.label,
                r.m,
                fmt17(r.l2),
                fmt17(r.energy)
            ));
        }
    }
    fs::write(dir.join("errors.csv"), errors)?;

    let mut report = String::from("run,step,t,newton_iters,final_step_norm,evals\n");
    for (name, rep) in &out.reports {
        for (i, s) in rep.steps.iter().enumerate() {
            report.push_str(&format!(
                "{},{},{},{},{},{}\n",
                name,
                i,
                fmt17(s.t),
                s.newton_iters,
                fmt17(s.final_step_norm),
                s.evals
            ));
        }
    }
    fs::write(dir.join("report.csv"), report)?;
    Ok(())
}
