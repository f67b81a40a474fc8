use pdemap::estimator::{map_estimate, prediction_error, MapConfig};
use pdemap::fnspace::{build_grid, GridFunction, SpectralField};
use pdemap::mc_oracle::{fk_darcy, fk_schrodinger, McConfig};
use pdemap::model::{generate_dataset, synthesize_truth, Dataset, ForwardProblem};
use pdemap::pde::{DarcyProblem, PdeKind, PdeProblem};

#[test]
fn darcy_solver_matches_feynman_kac_for_a_random_coefficient() {
    let grid = build_grid(1, 128).unwrap();
    let fp = ForwardProblem::default_darcy(grid).unwrap();
    let theta = SpectralField::new(grid, 3, vec![0.8, -0.4, 0.3]).unwrap();
    let f = fp.coefficient(&theta).unwrap();
    let g = DarcyProblem::sine_source(grid, 1.0);
    let u = PdeProblem::Darcy(DarcyProblem::new(g.clone(), 0.5).unwrap()).solve(&f).unwrap();
    let cfg = McConfig::new(20_000, 1e-4, 9);
    for x in [0.25, 0.5, 0.75] {
        let mc = fk_darcy(&f, &g, &[x], &cfg).unwrap();
        let fd = u.interpolate(&[x]).unwrap();
        assert!(mc.agrees_with(fd, 0.01), "x = {x}: {mc:?} vs {fd}");
    }
}

#[test]
fn schrodinger_solver_matches_feynman_kac_in_two_dimensions() {
    let grid = build_grid(2, 32).unwrap();
    let fp = ForwardProblem::default_schrodinger(grid).unwrap();
    let theta = SpectralField::new(grid, 2, vec![0.5, 0.2, -0.3, 0.1]).unwrap();
    let f = fp.coefficient(&theta).unwrap();
    let g = GridFunction::constant(grid, 1.0);
    let u = fp.forward(&theta).unwrap();
    let mc = fk_schrodinger(&f, &g, &[0.5, 0.5], &McConfig::new(20_000, 1e-4, 3)).unwrap();
    let fd = u.interpolate(&[0.5, 0.5]).unwrap();
    assert!(mc.agrees_with(fd, 0.01), "{mc:?} vs {fd}");
}

#[test]
fn simulate_save_load_estimate_round_trip() {
    let grid = build_grid(1, 64).unwrap();
    let fp = ForwardProblem::default_darcy(grid).unwrap();
    let truth = synthesize_truth(&fp, 2.0, 6, 5, 1.5).unwrap();
    let data = generate_dataset(&fp, &truth, 512, 0.02, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path(), "obs", PdeKind::Darcy).unwrap();
    let loaded = Dataset::load(dir.path().join("obs.csv"), dir.path().join("obs.json")).unwrap();
    assert_eq!(loaded, data);

    let cfg = MapConfig::scheduled(&fp, loaded.len(), 2.0, 1.0);
    let fit = map_estimate(&fp, &loaded, &cfg).unwrap();
    assert!(fit.converged);
    let zero = SpectralField::zeros(grid, cfg.modes).unwrap();
    let fitted = prediction_error(&fp, &fit.theta_hat, &truth.theta).unwrap();
    let baseline = prediction_error(&fp, &zero, &truth.theta).unwrap();
    assert!(fitted < 0.25 * baseline, "{fitted} vs {baseline}");
}

#[test]
fn schrodinger_estimation_reduces_prediction_error() {
    let grid = build_grid(1, 64).unwrap();
    let fp = ForwardProblem::default_schrodinger(grid).unwrap();
    let truth = synthesize_truth(&fp, 2.0, 6, 15, 2.0).unwrap();
    let data = generate_dataset(&fp, &truth, 1024, 0.01, 16).unwrap();
    let cfg = MapConfig::scheduled(&fp, data.len(), 2.0, 1.0);
    let fit = map_estimate(&fp, &data, &cfg).unwrap();
    assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    let zero = SpectralField::zeros(grid, cfg.modes).unwrap();
    let fitted = prediction_error(&fp, &fit.theta_hat, &truth.theta).unwrap();
    let baseline = prediction_error(&fp, &zero, &truth.theta).unwrap();
    assert!(fitted < 0.5 * baseline, "{fitted} vs {baseline}");
}
