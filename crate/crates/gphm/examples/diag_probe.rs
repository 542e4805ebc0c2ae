use gphm::autodiff::Tape;
use gphm::kernels::KernelKind;
use gphm::model::{BoundaryData, Grid, ObjectiveContext};
use gphm::optim::{initialize, AdamState, TrainConfig};
use gphm::pde::{make_problem, relative_l2};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let problem = make_problem("poisson1d_mix_k20").unwrap();
    let grid = Grid::for_problem(&problem, &[400]).unwrap();
    let cfg = TrainConfig {
        q: 10,
        ending_frequency: std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10.0),
        ..TrainConfig::default()
    };
    let init = initialize(&grid, &cfg, KernelKind::StM);
    let boundary = BoundaryData::from_exact(&grid, &problem.exact);
    let ctx =
        ObjectiveContext::new(grid.clone(), problem.clone(), boundary, 500.0, init.clone())
            .unwrap();
    let template = init.to_params();
    let mut params: Vec<f64> = template.values().to_vec();
    let mut adam = AdamState::new(params.len());
    let mut grads = vec![0.0; params.len()];
    let exact_grid: Vec<f64> = grid.evaluate(&problem.exact).iter().copied().collect();
    let m = grid.total_points();

    for iter in 0..iters {
        let mut tape = Tape::new();
        let built = ctx.build(&mut tape, &params).unwrap();
        let loss = tape.scalar_value(built.loss);
        let rmse = tape.scalar_value(built.residual_sq) / m as f64;

        if iter % 250 == 0 {
            let state = init.from_params(&template.with_values(params.clone()));
            let bundle = gphm::model::build_bundle(&state, &grid, &[]).unwrap();
            let jitter = bundle.dims[0].jitter_used;
            let wsum = state.kernel_params[0].weight_sum();
            let rel = relative_l2(
                &state.u.iter().copied().collect::<Vec<_>>(),
                &exact_grid,
            )
            .unwrap();
            let mut omegas: Vec<(f64, f64)> = state.kernel_params[0]
                .components
                .iter()
                .map(|c| (c.weight(), 2.0 * std::f64::consts::PI * c.frequency.abs()))
                .collect();
            omegas.sort_by(|a, b| b.0.total_cmp(&a.0));
            eprintln!(
                "it {iter:6} loss {loss:12.1} rmse {rmse:9.2e} relL2 {rel:8.2e} jit {jitter:8.2e} \
                 sumw {wsum:8.3} lt1 {:6.2} lt2 {:6.2} top {:?}",
                state.log_tau1,
                state.log_tau2,
                omegas
                    .iter()
                    .take(4)
                    .map(|(w, o)| format!("{o:.1}w{w:.2}"))
                    .collect::<Vec<_>>()
            );
        }
        let g = tape.gradient(built.loss).unwrap();
        grads.fill(0.0);
        for (var, range) in &built.leaves {
            let lg = g.wrt(&tape, *var);
            for (slot, gv) in grads[range.clone()].iter_mut().zip(lg.iter()) {
                *slot += gv;
            }
        }
        adam.step(&mut params, &grads, cfg.learning_rate);
    }
}
