//! Command runners behind the `toda` binary. Every command writes
//! `report.json` plus its own artifacts into the output directory.

pub mod config;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::design::{certify, design_nodes, NodeSet};
use crate::error::{Error, Result};
use crate::green::{representation_error, verify_region_bound, DiskGreen, HarmonicCorrector, RegionStat};
use crate::linearization::{
    active_params, companion_fields, dparam_numerator, fd_agreement, imag_sign_check, linearized_residual, Chart,
    LinearMode, ParamTag,
};
use crate::matching::{
    coordinates, fit_decay_exponent, from_coordinates, parameter_error, recover, recover_lsq, sample_grid,
    slope_fit_init, synthesize, verify_apcor, verify_mainest, EstimateSpec, Recovery,
};
use crate::report::{read_json, write_csv, write_json, Check, Report};
use crate::suite::{run_suite, RESIDUAL_TOL};
use crate::system::{cartan_apply, diagnostic_grid, mass_identity_rhs, Component, TodaParams, TodaSolution};

pub use config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    Kernel,
    Design,
    Recover,
    Verify,
    GreenCheck,
    Suite,
    /// Writes the config with every default filled in.
    Dump,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Kernel => "kernel",
            Command::Design => "design",
            Command::Recover => "recover",
            Command::Verify => "verify",
            Command::GreenCheck => "green-check",
            Command::Suite => "suite",
            Command::Dump => "dump",
        }
    }
}

/// Contents of `design.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignArtifact {
    pub params: TodaParams,
    pub design: NodeSet,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct GreenArtifact {
    regions: Vec<RegionStat>,
    pass: bool,
}

pub fn run(command: Command, cfg: &RunConfig, out: &Path) -> Result<Report> {
    fs::create_dir_all(out)?;
    let report = match command {
        Command::Solve => solve(cfg, out)?,
        Command::Kernel => kernel(cfg, out)?,
        Command::Design => design(cfg, out)?,
        Command::Recover => recover_cmd(cfg, out)?,
        Command::Verify => verify(cfg, out)?,
        Command::GreenCheck => green_check(cfg, out)?,
        Command::Suite => suite(cfg, out)?,
        Command::Dump => {
            write_json(&out.join("config.json"), cfg)?;
            Report::new("dump", cfg.seed, Vec::new())
        }
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn solve(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let p = cfg.params()?;
    let sol = TodaSolution::build(&p)?;
    let n = p.n();
    let grid = diagnostic_grid();
    let residual = sol.residual_sup(&grid)?;
    let masses: Vec<f64> = (1..=n).map(|i| sol.mass(i)).collect::<Result<_>>()?;
    let lhs = cartan_apply(&masses);
    let mass_err = (1..=n)
        .map(|i| {
            let rhs = mass_identity_rhs(&p.weights, i);
            (lhs[i - 1] - rhs).abs() / rhs.abs()
        })
        .fold(0.0, f64::max);

    let mut header = vec!["r".to_string(), "theta".to_string()];
    header.extend((1..=n).map(|i| format!("u{i}")));
    header.extend((1..=n).map(|i| format!("residual{i}")));
    let mut rows = Vec::with_capacity(grid.len());
    for &(r, t) in &grid {
        let lp = sol.ladder_point(r, t)?;
        let mut row = vec![r, t];
        row.extend((1..=n).map(|i| sol.component_from(&lp, Component::Lower, i)));
        row.extend((1..=n).map(|i| lp.residual(i)));
        rows.push(row);
    }
    write_csv(&out.join("profile.csv"), &header, &rows)?;
    write_json(&out.join("solution.json"), &serde_json::json!({ "params": p, "masses": masses }))?;

    let mut mass = Check::below("mass_identity", "total mass identity", mass_err, 1e-6);
    for (i, m) in masses.iter().enumerate() {
        mass = mass.with(&format!("m{}", i + 1), *m);
    }
    Ok(Report::new(
        "solve",
        cfg.seed,
        vec![
            Check::below("pde_residual", "toda system residual", residual, RESIDUAL_TOL),
            mass,
        ],
    ))
}

fn kernel_points() -> Vec<(f64, f64)> {
    (0..12)
        .map(|k| (10f64.powf(-1.5 + 3.0 * k as f64 / 11.0), (0.7 + 1.3 * k as f64) % (2.0 * PI)))
        .collect()
}

fn tag_name(tag: ParamTag) -> String {
    match tag {
        ParamTag::Lambda(i) => format!("lambda{i}"),
        ParamTag::CRe(i, j) => format!("re_c{i}{j}"),
        ParamTag::CIm(i, j) => format!("im_c{i}{j}"),
    }
}

#[derive(Serialize)]
struct KernelEntry {
    tag: ParamTag,
    mkk: Vec<f64>,
    /// `(k, l, re, im)`.
    mkl: Vec<(usize, usize, f64, f64)>,
    /// Only meaningful when every `c_ij` vanishes.
    #[serde(skip_serializing_if = "Option::is_none")]
    trace_defect: Option<f64>,
}

fn kernel(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let p = cfg.params()?;
    let sol = TodaSolution::build(&p)?;
    let w = &p.weights;
    let pts = kernel_points();
    let fd = fd_agreement(&sol, Chart::LastDependent, &pts)?.max(fd_agreement(&sol, Chart::ZeroDependent, &pts)?);
    let mut lin: f64 = 0.0;
    let mut entries = Vec::new();
    let mut trace = Check::below("trace_identity", "trace identity of kernel modes", 0.0, 1e-12);
    let c_free = crate::system::CoeffTable::slots(p.n()).all(|(i, j)| p.c.get(i, j).norm() == 0.0);
    for tag in active_params(w, Chart::LastDependent) {
        let fields = companion_fields(&sol, tag, Chart::LastDependent)?;
        for &(r, t) in &pts {
            for v in linearized_residual(&sol, &fields, r, t)? {
                lin = lin.max(if v.is_nan() { f64::INFINITY } else { v.abs() });
            }
        }
        let mode = LinearMode::from_numerator(&p, &dparam_numerator(&sol, tag, Chart::LastDependent)?)?;
        let scale = mode.mkk.iter().zip(&p.lambda).map(|(m, l)| (m / l).abs()).fold(0.0, f64::max);
        let defect = mode.trace_defect(&p).abs() / scale.max(1e-300);
        if c_free && matches!(tag, ParamTag::Lambda(_)) {
            trace.measured = trace.measured.max(defect);
            trace = trace.with(&tag_name(tag), defect);
        }
        entries.push(KernelEntry {
            tag,
            mkl: mode.mkl.iter().map(|(&(k, l), v)| (k, l, v.re, v.im)).collect(),
            mkk: mode.mkk,
            trace_defect: c_free.then_some(defect),
        });
    }
    trace.pass = trace.measured < trace.threshold;
    write_json(&out.join("kernel.json"), &entries)?;
    let sign = imag_sign_check(&sol, &pts)?;
    let mut checks = vec![Check::below("linearized_kernel", "parameter derivative fields", fd, 1e-5)
        .with("linearized_residual", lin)
        .with("imag_sign", sign.imag_sign as f64)
        .and(lin < 1e-4)];
    if c_free {
        checks.push(trace);
    }
    Ok(Report::new("kernel", cfg.seed, checks))
}

fn design(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let p = cfg.params()?;
    let sol = TodaSolution::build(&p)?;
    let config = cfg.design.resolve();
    let d = design_nodes(&sol, &config)?;
    let cert = certify(&d);
    write_json(
        &out.join("design.json"),
        &DesignArtifact {
            params: p,
            design: d.node_set(),
        },
    )?;
    let rows: Vec<Vec<f64>> = d.nodes.iter().map(|n| vec![n.ln_r, n.theta]).collect();
    write_csv(&out.join("nodes.csv"), &["ln_r".to_string(), "theta".to_string()], &rows)?;
    let cond = d.cond_m.max(d.cond_m1);
    Ok(Report::new(
        "design",
        cfg.seed,
        vec![Check::below("node_design", "node design invertibility", cond, config.cond_ceiling * (1.0 + 1e-12))
            .with("cond_m", d.cond_m)
            .with("cond_m1", d.cond_m1)
            .with("escalations", d.escalations as f64)
            .with("eps", d.eps)
            .with("certified", if cert.pass { 1.0 } else { 0.0 })],
    ))
}

/// The design artifact from `design_file`, or computed in process.
fn load_design(cfg: &RunConfig) -> Result<DesignArtifact> {
    match &cfg.design_file {
        Some(path) => read_json(path).map_err(|e| match e {
            Error::ConfigInvalid { message, .. } => Error::config("design_file", message),
            other => other,
        }),
        None => {
            let params = cfg.params()?;
            let sol = TodaSolution::build(&params)?;
            let design = design_nodes(&sol, &cfg.design.resolve())?.node_set();
            Ok(DesignArtifact { params, design })
        }
    }
}

struct RecoveryRun {
    truth: TodaParams,
    sample: crate::matching::BubblingSample,
    recovery: Recovery,
}

fn run_recovery(cfg: &RunConfig) -> Result<RecoveryRun> {
    let art = load_design(cfg)?;
    let s = &cfg.sample;
    let mut nodes = art.design.nodes.clone();
    nodes.extend(sample_grid(s.r_max, s.per_decade, s.angles));
    let sample = synthesize(&art.params, s.epsilon, s.eta, cfg.noise_seed()?, &nodes)?;
    let tags = &art.design.params;
    let init = match cfg.recovery.init {
        config::InitMode::SlopeFit => slope_fit_init(&sample)?,
        config::InitMode::Perturbed => {
            let signs = cfg.start_signs(tags.len())?;
            let x: Vec<f64> = coordinates(&art.params, tags)
                .iter()
                .zip(&signs)
                .map(|(v, s)| v * (1.0 + s * cfg.recovery.perturbation))
                .collect();
            from_coordinates(&art.params, tags, &x)?
        }
    };
    let recovery = match cfg.recovery.mode {
        config::RecoveryMode::Lsq => recover_lsq(&sample, tags, &init)?,
        config::RecoveryMode::Newton => recover(&sample, &art.design, &init)?,
    };
    Ok(RecoveryRun {
        truth: art.params,
        sample,
        recovery,
    })
}

fn recover_cmd(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let run = run_recovery(cfg)?;
    write_json(&out.join("recovery.json"), &run.recovery)?;
    let t = &run.recovery.trace;
    let ratio = if t.len() >= 2 { t[t.len() - 1] / t[t.len() - 2] } else { 0.0 };
    let err = parameter_error(&run.recovery.params, &run.truth);
    let threshold = 1e-9 + 1e3 * cfg.sample.eta;
    Ok(Report::new(
        "recover",
        cfg.seed,
        vec![Check::below("recovery", "recovery of the approximating solution", err, threshold)
            .with("iterations", run.recovery.iterations as f64)
            .with("final_residual_ratio", ratio)
            .with("jacobian_cond", run.recovery.jacobian_cond)
            .and(run.recovery.converged || cfg.sample.eta > 0.0)],
    ))
}

fn verify(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let run = run_recovery(cfg)?;
    let w = &run.truth.weights;
    let n = w.n();
    let sol = TodaSolution::build(&run.truth)?;
    let mut checks = Vec::new();

    let stats = verify_apcor(&sol, cfg.far_field.r_max)?;
    let change = stats.iter().map(|s| s.sup_doubled / s.sup).fold(0.0, f64::max);
    let mut apcor = Check::below("far_field_correction", "far-field correction", change, 2.0)
        .and(stats.iter().all(|s| s.pass));
    for s in &stats {
        apcor = apcor.with(&format!("sup{}", s.component), s.sup);
    }
    checks.push(apcor);

    let (lo, hi) = cfg.far_field.decay_window;
    let mut decay_err: f64 = 0.0;
    let mut decay = Vec::new();
    for i in 1..=n {
        let fit = fit_decay_exponent(&sol, i, lo, hi)?;
        decay_err = decay_err.max((fit + sol.decay_exponent(i)).abs());
        decay.push(fit);
    }
    let mut dc = Check::below("decay_exponent", "far-field decay of the densities", decay_err, 0.05);
    for (i, f) in decay.iter().enumerate() {
        dc = dc.with(&format!("slope{}", i + 1), *f);
    }
    checks.push(dc);

    let spec = EstimateSpec::new(w, cfg.estimate.sigma_for(w))?;
    let est = verify_mainest(&run.sample, &run.recovery.params, &spec)?;
    let mut header = vec!["r".to_string(), "theta".to_string()];
    header.extend((1..=n).map(|i| format!("deviation{i}")));
    header.push("rate".to_string());
    let rows: Vec<Vec<f64>> = est
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.r, r.theta];
            row.extend(&r.deviation);
            row.push(r.rate);
            row
        })
        .collect();
    write_csv(&out.join("mainest.csv"), &header, &rows)?;
    checks.push(
        Check::below("main_estimate", "deviation against the branch rate", est.constant, f64::INFINITY)
            .with("sigma", spec.sigma)
            .with("max_deviation", est.max_deviation),
    );
    Ok(Report::new("verify", cfg.seed, checks))
}

fn green_check(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let seed = cfg.seed_required("green-check")?;
    let g = &cfg.green;
    let bound = verify_region_bound(&DiskGreen::new(g.radius)?, g.samples, seed)?;
    write_json(
        &out.join("green.json"),
        &GreenArtifact {
            regions: bound.regions.clone(),
            pass: bound.pass,
        },
    )?;
    let mut rep: f64 = 0.0;
    for (_, e) in representation_error(&DiskGreen::new(g.radius)?)? {
        rep = rep.max(e);
    }
    let mut rng = crate::suite::instance_rng(seed, 10, 0, 0);
    let (mut growth, mut max_principle) = (0.0f64, true);
    for _ in 0..g.corrector_sets {
        let scan = HarmonicCorrector::from_fn(g.radius, crate::green::random_trig_data(&mut rng))?.scan();
        growth = growth.max(scan.normalized);
        max_principle &= scan.maximum_principle();
    }
    let mut region = Check::below(
        "region_constants",
        "region bounds of the disk Green's function",
        bound.regions.iter().map(|s| s.empirical_c).fold(0.0, f64::max),
        f64::INFINITY,
    )
    .and(bound.pass);
    for s in &bound.regions {
        region = region.with(&s.name, s.empirical_c);
    }
    Ok(Report::new(
        "green-check",
        Some(seed),
        vec![
            Check::below("representation", "representation formula", rep, 1e-6),
            region,
            Check::below("corrector_growth", "harmonic corrector growth", growth, 2.0 * (1.0 + 1e-12))
                .and(max_principle),
        ],
    ))
}

fn suite(cfg: &RunConfig, out: &Path) -> Result<Report> {
    let seed = cfg.seed_required("suite")?;
    let outcome = run_suite(&cfg.grid, seed)?;
    let timings: std::collections::BTreeMap<String, f64> = outcome.timings.into_iter().collect();
    write_json(&out.join("timings.json"), &timings)?;
    Ok(Report::new("suite", Some(seed), outcome.checks))
}
