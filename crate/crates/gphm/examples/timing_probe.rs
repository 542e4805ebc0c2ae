use gphm::kernels::KernelKind;
use gphm::model::Grid;
use gphm::optim::{train_with_callback, TrainConfig};
use gphm::pde::make_problem;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let problem = make_problem("poisson1d_mix_k20").unwrap();
    let grid = Grid::for_problem(&problem, &[400]).unwrap();
    let cfg = TrainConfig {
        q: 10,
        ending_frequency: 10.0,
        max_iters: iters,
        trace_every: 500,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train_with_callback(&problem, &grid, &cfg, KernelKind::StM, &mut |row| {
        eprintln!(
            "iter {:6}  loss {:14.4}  bmse {:10.3e}  rmse {:10.3e}  t {:7.1}s",
            row.iteration, row.loss, row.boundary_mse, row.residual_mse, row.wall_seconds
        );
    })
    .unwrap();
    let dt = t0.elapsed().as_secs_f64();
    eprintln!(
        "ran {} iterations in {:.1}s ({:.1} ms/iter), stopped early: {}",
        out.iterations_run,
        dt,
        1000.0 * dt / out.iterations_run.max(1) as f64,
        out.stopped_by_threshold
    );
    // Report the solution error against the exact solution on a 10x grid.
    let fine: Vec<Vec<f64>> = {
        let (lo, hi) = problem.bounds[0];
        let n = 4000;
        (0..=n)
            .map(|i| vec![lo + (hi - lo) * i as f64 / n as f64])
            .collect()
    };
    let pred = gphm::model::predict_offgrid(&out.state, &grid, &fine).unwrap();
    let exact: Vec<f64> = fine.iter().map(|x| (problem.exact)(x)).collect();
    let rel = gphm::pde::relative_l2(&pred, &exact).unwrap();
    eprintln!("off-grid relative L2: {rel:.3e}");
    eprintln!("log_tau1 {:.3} log_tau2 {:.3}", out.state.log_tau1, out.state.log_tau2);
    for c in &out.report.dims[0] {
        if !c.pruned {
            eprintln!(
                "  comp: w {:9.3e} rel {:8.3e} omega {:8.4}",
                c.weight, c.relative_weight, c.omega_angular
            );
        }
    }
}
// probe internals appended below: nothing
