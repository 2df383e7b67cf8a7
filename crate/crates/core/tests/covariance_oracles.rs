mod common;

use dynemu_core::coupling::coupling_matrix;
use dynemu_core::covariance::{assemble_replica_kernels, sigma_prime};
use dynemu_core::kernels::{sigma_const, DEFAULT_COND_THRESHOLD};
use dynemu_core::{
    AffineModel, DesignSet, EmuError, InputTrajectory, MetricFlavor, MetricSpec, TimeGrid,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_psd, random_stable, rel, Switching};

#[test]
fn blocks_match_quadrature_of_two_time_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..12 {
        let m = 1 + case % 3;
        let n = 1 + (case / 3) % 3;
        let n_steps = 2 + case % 4;
        let model = Switching {
            a0: random_stable(&mut rng, m, 0.3),
            a1: DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.1..0.1)),
            a2: DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.1..0.1)),
            obs: DMatrix::from_fn(1 + m / 2, m, |_, _| rng.random_range(-1.0..1.0)),
        };
        let times: Vec<f64> = (0..=n_steps)
            .scan(0.0, |t, _| {
                let out = *t;
                *t += rng.random_range(0.2..0.8);
                Some(out)
            })
            .collect();
        let grid = TimeGrid::new(times.clone()).unwrap();
        let forcing: Vec<Vec<f64>> = (0..n_steps).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let design = DesignSet::new(
            (0..n)
                .map(|_| InputTrajectory::new(vec![rng.random_range(-1.0..1.0)], forcing.clone(), &grid).unwrap())
                .collect(),
        )
        .unwrap();
        let cct = random_psd(&mut rng, m) + DMatrix::identity(m, m) * 0.2;
        let metric = MetricSpec::new(vec![0], vec![0.8], MetricFlavor::SquaredEuclidean).unwrap();
        let weights = coupling_matrix(&design, None, &metric).unwrap();
        let kernels: Vec<_> = design
            .inputs
            .iter()
            .map(|x| assemble_replica_kernels(&model, x, &grid, DEFAULT_COND_THRESHOLD).unwrap())
            .collect();
        let cond: Vec<usize> = (1..=n_steps).collect();
        let blocks = sigma_prime(&kernels, &cct, &weights, &cond).unwrap();

        for a in 0..n {
            for b in 0..n {
                let da: Vec<_> = kernels[a].a.clone();
                let db: Vec<_> = kernels[b].a.clone();
                for (pi, &i) in cond.iter().enumerate() {
                    for (pj, &j) in cond.iter().enumerate() {
                        let want = &model.obs
                            * common::two_time_covariance(&da, &db, &cct, weights[(a, b)], &times, i, j)
                            * model.obs.transpose();
                        let got = blocks.block(pi, a, pj, b);
                        assert!(
                            rel(&got, &want) < 1e-6,
                            "case {case} block ({i},{a})x({j},{b}): {}",
                            rel(&got, &want)
                        );
                    }
                }
            }
        }
        let full = blocks.to_symmetric();
        assert_eq!(full, full.transpose());
    }
}

#[test]
fn constant_input_blocks_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for seed in 0..100 {
        let m = 1 + seed % 3;
        let n = 1 + (seed / 3) % 3;
        let n_steps = 1 + seed % 6;
        let dt = rng.random_range(0.1..0.7);
        let grid = TimeGrid::uniform(0.0, dt, n_steps).unwrap();
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
        for a in 0..n {
            for b in 0..n {
                for (pi, &i) in cond.iter().enumerate() {
                    for (pj, &j) in cond.iter().enumerate().take(pi + 1) {
                        let t = grid.times();
                        let want = sigma_const(&kernels[a].ed[0], &kernels[b].ed[0], &cct, t[i], t[j], t[0], weights[(a, b)]);
                        let got = blocks.block(pi, a, pj, b);
                        let err = (&got - &want).norm() / want.norm().max(1.0);
                        assert!(err < 1e-10, "seed {seed}: block ({i},{a})x({j},{b}) off by {err}");
                    }
                }
            }
        }
    }
}

#[test]
fn logspm_sigma_prime_is_psd_at_desk_scale() {
    let model = common::logspm_fixture::model();
    let (grid, design) = common::logspm_fixture::design(10, 50, 1);
    let config = common::logspm_fixture::config();
    let weights = coupling_matrix(&design, None, &config.metric).unwrap();
    let kernels: Vec<_> = design
        .inputs
        .iter()
        .map(|x| assemble_replica_kernels(&model, x, &grid, config.cond_threshold).unwrap())
        .collect();
    let cond = grid.conditioning_times(1).unwrap();
    let full = sigma_prime(&kernels, &config.cct, &weights, &cond).unwrap().to_symmetric();
    let max_diag = full.diagonal().max();
    let min_eig = full.symmetric_eigenvalues().min();
    assert!(min_eig >= -1e-8 * max_diag, "min eigenvalue {min_eig}, max diagonal {max_diag}");
}

#[test]
fn mismatched_grids_are_rejected() {
    let model = AffineModel::new(
        DMatrix::from_element(1, 1, -1.0),
        vec![],
        DVector::zeros(1),
        DMatrix::zeros(1, 0),
        DMatrix::identity(1, 1),
    )
    .unwrap();
    let g1 = TimeGrid::uniform(0.0, 1.0, 3).unwrap();
    let g2 = TimeGrid::uniform(0.0, 0.5, 3).unwrap();
    let x = InputTrajectory::new(vec![], vec![vec![]; 3], &g1).unwrap();
    assert!(matches!(
        assemble_replica_kernels(&model, &x, &g2, DEFAULT_COND_THRESHOLD),
        Err(EmuError::MismatchedGrids)
    ));
    let k1 = assemble_replica_kernels(&model, &x, &g1, DEFAULT_COND_THRESHOLD).unwrap();
    let y = InputTrajectory::new(vec![], vec![vec![]; 3], &g2).unwrap();
    let k2 = assemble_replica_kernels(&model, &y, &g2, DEFAULT_COND_THRESHOLD).unwrap();
    let w = DMatrix::from_element(2, 2, 1.0);
    assert!(matches!(
        sigma_prime(&[k1, k2], &DMatrix::identity(1, 1), &w, &[1, 2, 3]),
        Err(EmuError::MismatchedGrids)
    ));
}
