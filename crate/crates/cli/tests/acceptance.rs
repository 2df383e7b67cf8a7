//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dynemu_cli::commands::{self, BenchSpec};
use dynemu_cli::config;
use dynemu_cli::files::{self, Provenance, Sampling};
use dynemu_core::artifact::{from_bytes, load, save, to_bytes, ArtifactMeta};
use dynemu_core::coupling::coupling_matrix;
use dynemu_core::covariance::{assemble_replica_kernels, mean_recursion, sigma_prime};
use dynemu_core::emulator::dense_oracle;
use dynemu_core::kernels::{drift_k, eigendecompose, noise_block_g, sigma_const, DEFAULT_COND_THRESHOLD};
use dynemu_core::logspm::{closed_form_eigen, LogSpmParams};
use dynemu_core::simulator::{integrate_ode, projected_moments, sample_linear_sde};
use dynemu_core::{
    condition, emulate, AffineModel, ConditionConfig, DesignSet, InputTrajectory, MetricFlavor, MetricSpec,
    ObservationSet, SimulationModel, TimeGrid,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_psd, random_stable, rel, Switching};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn kernel_quadrature() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for case in 0..120 {
        let m = 1 + case % 3;
        let a_a = random_stable(&mut rng, m, 0.05);
        let a_b = random_stable(&mut rng, m, 0.05);
        let cct = random_psd(&mut rng, m) + DMatrix::identity(m, m) * 0.1;
        let dt = rng.random_range(0.05..1.5);
        let w = rng.random_range(0.2..1.0);
        let ea = eigendecompose(&a_a, DEFAULT_COND_THRESHOLD).map_err(|e| e.to_string())?;
        let eb = eigendecompose(&a_b, DEFAULT_COND_THRESHOLD).map_err(|e| e.to_string())?;
        let g = noise_block_g(&ea, &eb, &cct, dt, w).g;
        worst = worst.max(rel(&g, &common::noise_block(&a_a, &a_b, &cct, dt, w)));
        let b = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        let k = drift_k(&ea, &b, dt);
        let kq = common::drift(&a_a, &b, dt);
        worst = worst.max((&k - &kq).norm() / kq.norm());
    }
    check(worst < 1e-8, format!("120 systems, worst relative error {worst:.2e} (limit 1e-8)"))
}

fn recursion_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let m = 1 + seed % 3;
        let n = 1 + (seed / 3) % 3;
        let n_steps = 1 + seed % 6;
        let grid = TimeGrid::uniform(0.0, rng.random_range(0.1..0.7), n_steps).unwrap();
        let model = AffineModel::new(
            random_stable(&mut rng, m, 0.2),
            vec![DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.2..0.2))],
            DVector::zeros(m),
            DMatrix::zeros(m, 0),
            DMatrix::identity(m, m),
        )
        .unwrap();
        let design = DesignSet::new(
            (0..n)
                .map(|_| InputTrajectory::new(vec![rng.random_range(-1.0..1.0)], vec![vec![]; n_steps], &grid).unwrap())
                .collect(),
        )
        .unwrap();
        let cct = random_psd(&mut rng, m) + DMatrix::identity(m, m) * 0.1;
        let metric = MetricSpec::new(vec![0], vec![1.0], MetricFlavor::SquaredEuclidean).unwrap();
        let weights = coupling_matrix(&design, None, &metric).unwrap();
        let kernels: Vec<_> = design
            .inputs
            .iter()
            .map(|x| assemble_replica_kernels(&model, x, &grid, DEFAULT_COND_THRESHOLD).unwrap())
            .collect();
        let cond: Vec<usize> = (1..=n_steps).collect();
        let blocks = sigma_prime(&kernels, &cct, &weights, &cond).unwrap();
        let t = grid.times();
        for a in 0..n {
            for b in 0..n {
                for (pi, &i) in cond.iter().enumerate() {
                    for (pj, &j) in cond.iter().enumerate().take(pi + 1) {
                        let want = sigma_const(&kernels[a].ed[0], &kernels[b].ed[0], &cct, t[i], t[j], t[0], weights[(a, b)]);
                        let err = (blocks.block(pi, a, pj, b) - &want).norm() / want.norm().max(1.0);
                        worst = worst.max(err);
                    }
                }
            }
        }
    }
    check(worst < 1e-10, format!("100 seeds, worst block error {worst:.2e} (limit 1e-10)"))
}

fn monte_carlo() -> Outcome {
    let model = AffineModel::new(
        DMatrix::from_element(1, 1, -0.5),
        vec![DMatrix::from_element(1, 1, -1.0)],
        DVector::from_element(1, 0.3),
        DMatrix::zeros(1, 0),
        DMatrix::identity(1, 1),
    )
    .unwrap();
    let grid = TimeGrid::uniform(0.0, 0.5, 3).unwrap();
    let design = DesignSet::new(
        [0.0, 0.4]
            .iter()
            .map(|p| InputTrajectory::new(vec![*p], vec![vec![]; 3], &grid).unwrap())
            .collect(),
    )
    .unwrap();
    let metric = MetricSpec::new(vec![0], vec![0.5], MetricFlavor::SquaredEuclidean).unwrap();
    let weights = coupling_matrix(&design, None, &metric).unwrap();
    let kernels: Vec<_> = design
        .inputs
        .iter()
        .map(|x| assemble_replica_kernels(&model, x, &grid, DEFAULT_COND_THRESHOLD).unwrap())
        .collect();
    let cct = DMatrix::from_element(1, 1, 0.4);
    let xi0 = DVector::from_element(1, 0.5);
    let times = [1, 2, 3];
    let sigma = sigma_prime(&kernels, &cct, &weights, &times).unwrap().to_symmetric();
    let means: Vec<_> = kernels.iter().map(|k| mean_recursion(k, &xi0).z).collect();
    let coupling = weights.component_mul(&weights);
    let set = sample_linear_sde(&kernels, &cct, &coupling, &grid, &xi0, 100_000, 7, 400).map_err(|e| e.to_string())?;
    let picks: Vec<(usize, usize)> = times.iter().flat_map(|&i| (0..2).map(move |a| (a, i))).collect();
    let mom = projected_moments(&set, &[DMatrix::identity(1, 1), DMatrix::identity(1, 1)], &picks);

    let mut worst: f64 = 0.0;
    for (f, &(a, i)) in picks.iter().enumerate() {
        worst = worst.max((mom.mean[f] - means[a][i][0]).abs() / mom.mean_std_error(f));
    }
    for r in 0..picks.len() {
        for c in 0..=r {
            worst = worst.max((mom.cov[(r, c)] - sigma[(r, c)]).abs() / mom.cov_std_error(r, c));
        }
    }
    check(worst <= 3.0, format!("1e5 paths, worst deviation {worst:.2} standard errors (limit 3)"))
}

fn dense_conditioning() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst, mut worst_cond) = (0.0f64, 0.0f64);
    for seed in 0..120 {
        let m = 1 + seed % 3;
        let n = 1 + (seed / 3) % 3;
        let n_steps = 1 + seed % 6;
        let mo = 1 + rng.random_range(0..m);
        let model = Switching {
            a0: random_stable(&mut rng, m, 0.3),
            a1: DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.2..0.2)),
            a2: DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.2..0.2)),
            obs: DMatrix::from_fn(mo, m, |_, _| rng.random_range(-1.0..1.0)),
        };
        let grid = TimeGrid::uniform(0.0, rng.random_range(0.2..0.8), n_steps).unwrap();
        let forcing: Vec<Vec<f64>> = (0..n_steps).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        // design points at least 0.25 apart, as in any usable design
        let mut points: Vec<f64> = Vec::with_capacity(n);
        while points.len() < n {
            let p = rng.random_range(-1.0..1.0);
            if points.iter().all(|q| (p - q).abs() >= 0.25) {
                points.push(p);
            }
        }
        let input = |p: f64| InputTrajectory::new(vec![p], forcing.clone(), &grid).unwrap();
        let design = DesignSet::new(points.iter().map(|p| input(*p)).collect()).unwrap();
        let x_new = input(rng.random_range(-1.0..1.0));
        let runs = ObservationSet::new(
            (0..n)
                .map(|_| (0..=n_steps).map(|_| DVector::from_fn(mo, |_, _| rng.random_range(-1.0..1.0))).collect())
                .collect(),
        )
        .unwrap();
        let metric = MetricSpec::new(vec![0], vec![rng.random_range(0.3..1.0)], MetricFlavor::SquaredEuclidean).unwrap();
        let cct = random_psd(&mut rng, m) + DMatrix::identity(m, m) * 0.2;
        let xi0 = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let config = ConditionConfig::new(xi0, cct, metric);

        let ce = condition(&model, &design, &runs, &grid, &config).map_err(|e| e.to_string())?;
        let res = emulate(&ce, &model, &x_new, true).map_err(|e| e.to_string())?;
        let dense = dense_oracle(&model, &design, &runs, &x_new, &grid, &config).map_err(|e| e.to_string())?;
        let stack = |v: &[DVector<f64>]| DVector::from_iterator(v.iter().map(|x| x.len()).sum(), v.iter().flatten().copied());
        let (got, want) = (stack(&res.mean), stack(&dense.mean));
        worst = worst.max((&got - &want).norm() / want.norm().max(1e-300));
        let var = res.variance.unwrap();
        let blocks = dense.marginal_blocks();
        let diff: f64 = var.iter().zip(&blocks).map(|(g, w)| (g - w).norm_squared()).sum();
        let norm: f64 = blocks.iter().map(|w| w.norm_squared()).sum();
        worst = worst.max((diff / norm.max(1e-300)).sqrt());
        let weights = coupling_matrix(&design, None, &ce.metric).unwrap();
        let eig = sigma_prime(&ce.design_kernels, &ce.cct, &weights, &ce.cond_times).unwrap().to_symmetric().symmetric_eigenvalues();
        worst_cond = worst_cond.max(eig.max() / eig.min());
    }
    check(
        worst < 1e-8,
        format!("120 cases, worst relative error {worst:.2e} (limit 1e-8), largest cond(Σ′) {worst_cond:.1e}"),
    )
}

fn interpolation() -> Outcome {
    let model = common::logspm_fixture::model();
    let (grid, design) = common::logspm_fixture::design(10, 50, 5);
    let mut config = common::logspm_fixture::config();
    config.jitter_schedule = vec![0.0];
    let series: Vec<Vec<DVector<f64>>> = design
        .inputs
        .iter()
        .map(|x| {
            let h = model.observation(&x.params);
            integrate_ode(&model, x, &grid, &config.xi0, 10).unwrap().iter().map(|s| &h * s).collect()
        })
        .collect();
    let runs = ObservationSet::new(series).unwrap();
    let ce = condition(&model, &design, &runs, &grid, &config).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (a, x) in design.inputs.iter().enumerate() {
        let res = emulate(&ce, &model, x, false).map_err(|e| e.to_string())?;
        for (got, want) in res.mean.iter().zip(&runs.series[a]) {
            worst = worst.max((got - want).norm() / want.norm());
        }
    }
    check(
        ce.jitter == 0.0 && worst <= 1e-6,
        format!("n = 10, N = 50, jitter {}, worst pointwise relative error {worst:.2e} (limit 1e-6)", ce.jitter),
    )
}

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/dynemu.json")
}

fn complexity() -> Outcome {
    let cfg = config::load(&shipped_config()).map_err(|e| e.to_string())?;
    let spec = BenchSpec::default();
    let r = commands::bench(&cfg, &spec, cfg.run.seeds.bench).map_err(|e| e.to_string())?;
    let ok = |s: f64| (0.8..=1.3).contains(&s);
    check(
        ok(r.slope_vs_n_steps) && ok(r.slope_vs_n_design),
        format!(
            "slope vs N {:.3} (N {:?}, n = {}), slope vs n {:.3} (n {:?}, N = {}); limits [0.8, 1.3]",
            r.slope_vs_n_steps, spec.n_steps, spec.fixed_n, r.slope_vs_n_design, spec.n_designs, spec.fixed_n_steps
        ),
    )
}

fn logspm_identities() -> Outcome {
    let model = common::logspm_fixture::model();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (mut balance, mut secant, mut resid, mut max_lambda) = (0.0f64, 0.0f64, 0.0f64, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let raw = common::logspm_fixture::draw(&mut rng);
        let p = LogSpmParams::from_slice(&raw).map_err(|e| e.to_string())?;
        let forcing = [rng.random_range(0.0..30.0), rng.random_range(0.0..6.0)];
        let state = DVector::from_fn(3, |_, _| rng.random_range(0.0..150.0));

        let f = model.rhs(&state, &raw, &forcing);
        let (_, f_et) = p.fractions(state[0]);
        let outflow = forcing[0] - f_et * forcing[1] - p.k_dp * state[1] - p.k_r * state[2];
        balance = balance.max((f.sum() - outflow).abs() / (1.0 + outflow.abs()));

        let (a_sat, a_et) = model.secants(&p);
        let (fs1, _) = p.fractions(model.h_s1);
        let (_, fe2) = p.fractions(model.h_s2);
        secant = secant.max((a_sat * model.h_s1 - fs1).abs() / fs1).max((a_et * model.h_s2 - fe2).abs() / fe2);

        let e = model.entries(&p, &forcing).map_err(|e| e.to_string())?;
        let (m, lambda) = closed_form_eigen(&e).map_err(|e| e.to_string())?;
        let a = e.matrix();
        resid = resid.max((&a * &m - &m * DMatrix::from_diagonal(&lambda)).norm() / a.norm());
        max_lambda = max_lambda.max(lambda.max());
    }
    check(
        balance < 1e-12 && secant < 1e-14 && resid < 1e-10 && max_lambda < 0.0,
        format!(
            "1000 draws: mass balance {balance:.1e}, secant {secant:.1e}, eigen residual {resid:.1e}, max eigenvalue {max_lambda:.3e}"
        ),
    )
}

fn desk_reproduction(out_dir: &Path) -> Outcome {
    let cfg = config::load(&shipped_config()).map_err(|e| e.to_string())?;
    let seed = cfg.run.seeds.design;
    let d = commands::design(&cfg, 50, seed, Sampling::Uniform);
    let design = commands::inputs(&cfg.grid, &cfg.forcing, &d.sets).map_err(|e| e.to_string())?;
    let (observed, _) = commands::simulate_all(&cfg, &cfg.grid, &design).map_err(|e| e.to_string())?;
    let cc = cfg.condition_config().map_err(|e| e.to_string())?;
    let runs = ObservationSet::new(observed).map_err(|e| e.to_string())?;
    let ce = condition(&cfg.model, &design, &runs, &cfg.grid, &cc).map_err(|e| e.to_string())?;
    let heldout = commands::sample_params(&cfg.ranges, 5, cfg.run.seeds.heldout, Sampling::Uniform);
    let prov = Provenance::new(&cfg.hash, &[("design", seed), ("heldout", cfg.run.seeds.heldout)]);
    let (report, csvs) = commands::validate(&cfg, &ce, &heldout, &prov).map_err(|e| e.to_string())?;
    for (name, bytes) in &csvs {
        files::write_bytes(&out_dir.join(name), bytes).map_err(|e| e.to_string())?;
    }
    files::write_json(&out_dir.join("report.json"), &report).map_err(|e| e.to_string())?;
    let ds: Vec<String> = report.sets.iter().map(|s| format!("{:.4}", s.d_value)).collect();
    let s = &report.summary;
    check(
        s.all_finite && s.median_d_value < s.median_prior_d_value && csvs.len() == 5,
        format!(
            "d-values [{}], median {:.4} vs prior median {:.4}; CSVs in {}",
            ds.join(", "),
            s.median_d_value,
            s.median_prior_d_value,
            out_dir.display()
        ),
    )
}

fn artifact_round_trip(dir: &Path) -> Outcome {
    let model = common::logspm_fixture::model();
    let (grid, design) = common::logspm_fixture::design(20, 100, 9);
    let config = common::logspm_fixture::config();
    let series: Vec<Vec<DVector<f64>>> = design
        .inputs
        .iter()
        .map(|x| {
            let h = model.observation(&x.params);
            integrate_ode(&model, x, &grid, &config.xi0, 10).unwrap().iter().map(|s| &h * s).collect()
        })
        .collect();
    let ce = condition(&model, &design, &ObservationSet::new(series).unwrap(), &grid, &config).map_err(|e| e.to_string())?;
    let path = dir.join("roundtrip.dynemu");
    let meta = ArtifactMeta {
        format_version: 0,
        model_id: model.id().to_string(),
        tool_version: dynemu_cli::TOOL_VERSION.to_string(),
        metric: ce.metric.clone(),
        sigma_dim: 0,
        jitter: 0.0,
        seeds: Default::default(),
        config_hash: None,
        checksum: String::new(),
    };
    let start = Instant::now();
    save(&path, &ce, &meta).map_err(|e| e.to_string())?;
    let (loaded, _) = load(&path).map_err(|e| e.to_string())?;
    let io_time = start.elapsed();
    let bytes = to_bytes(&ce).map_err(|e| e.to_string())?;
    let same_bytes = bytes == to_bytes(&loaded).map_err(|e| e.to_string())?
        && bytes == std::fs::read(&path).map_err(|e| e.to_string())?;
    let same_struct = loaded == ce && from_bytes(&bytes).map_err(|e| e.to_string())? == ce;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut same_output = true;
    for _ in 0..3 {
        let x = design.inputs[0].with_params(common::logspm_fixture::draw(&mut rng));
        let a = emulate(&ce, &model, &x, true).map_err(|e| e.to_string())?;
        let b = emulate(&loaded, &model, &x, true).map_err(|e| e.to_string())?;
        same_output &= a.mean == b.mean && a.variance == b.variance;
    }
    check(
        same_bytes && same_struct && same_output,
        format!(
            "{} bytes, save+load {:.2}s; bytes equal {same_bytes}, structure equal {same_struct}, emulation identical {same_output}",
            bytes.len(),
            io_time.as_secs_f64()
        ),
    )
}

fn main() {
    let work = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&work).expect("scratch directory");
    let desk = work.join("desk");
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 kernel quadrature equivalence", Duration::from_secs(10), Box::new(kernel_quadrature)),
        ("2 recursion equals closed form", Duration::from_secs(10), Box::new(recursion_closed_form)),
        ("3 Monte-Carlo oracle", Duration::from_secs(60), Box::new(monte_carlo)),
        ("4 dense-conditioning oracle", Duration::from_secs(30), Box::new(dense_conditioning)),
        ("5 interpolation exactness", Duration::from_secs(10), Box::new(interpolation)),
        ("6 emulation cost linear in N and n", Duration::from_secs(300), Box::new(complexity)),
        ("7 logSPM structural identities", Duration::from_secs(10), Box::new(logspm_identities)),
        ("8 desk reproduction", Duration::from_secs(300), Box::new(move || desk_reproduction(&desk))),
        ("9 artifact round trip", Duration::from_secs(5), Box::new(move || artifact_round_trip(&work))),
    ];
    let mut failed = 0;
    for (name, budget, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let within = took <= *budget;
        let (tag, detail) = match (&outcome, within) {
            (Ok(d), true) => ("PASS", d.clone()),
            (Ok(d), false) => ("FAIL", format!("{d}; over the {}s budget", budget.as_secs())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} [{name}] {detail} ({:.2}s)", took.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
