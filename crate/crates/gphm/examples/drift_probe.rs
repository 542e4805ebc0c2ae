use gphm::autodiff::Tape;
use gphm::kernels::KernelKind;
use gphm::model::{BoundaryData, Grid, ObjectiveContext};
use gphm::optim::{initialize, AdamState, TrainConfig};
use gphm::pde::make_problem;

// Tracks the sin(x)-aligned amplitude of u and gradient scales.
// args: kernel f_end iters
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let kind = KernelKind::parse(args.get(1).map(String::as_str).unwrap_or("stm")).unwrap();
    let f_end: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let problem = make_problem("poisson1d_mix_k20").unwrap();
    let grid = Grid::for_problem(&problem, &[400]).unwrap();
    let cfg = TrainConfig {
        q: 10,
        ending_frequency: f_end,
        ..TrainConfig::default()
    };
    let init = initialize(&grid, &cfg, kind);
    let boundary = BoundaryData::from_exact(&grid, &problem.exact);
    let ctx =
        ObjectiveContext::new(grid.clone(), problem.clone(), boundary, 500.0, init.clone())
            .unwrap();
    let template = init.to_params();
    let mut params: Vec<f64> = template.values().to_vec();
    let mut adam = AdamState::new(params.len());
    let mut grads = vec![0.0; params.len()];
    let m = grid.total_points();
    let v: Vec<f64> = grid.nodes[0].iter().map(|&x| x.sin()).collect();
    let v_norm2: f64 = v.iter().map(|x| x * x).sum();

    for iter in 0..=iters {
        let mut tape = Tape::new();
        let built = ctx.build(&mut tape, &params).unwrap();
        let g = tape.gradient(built.loss).unwrap();
        grads.fill(0.0);
        for (var, range) in &built.leaves {
            let lg = g.wrt(&tape, *var);
            for (slot, gv) in grads[range.clone()].iter_mut().zip(lg.iter()) {
                *slot += gv;
            }
        }
        if iter % 200 == 0 {
            let a: f64 = params[..m]
                .iter()
                .zip(v.iter())
                .map(|(u, vi)| u * vi)
                .sum::<f64>()
                / v_norm2;
            let g_along: f64 = grads[..m]
                .iter()
                .zip(v.iter())
                .map(|(g, vi)| g * vi)
                .sum::<f64>();
            let g_u_norm: f64 = grads[..m].iter().map(|x| x * x).sum::<f64>().sqrt();
            let rmse = tape.scalar_value(built.residual_sq) / m as f64;
            let state = init.from_params(&template.with_values(params.clone()));
            let mut omegas: Vec<(f64, f64, f64)> = state.kernel_params[0]
                .components
                .iter()
                .map(|c| {
                    (
                        c.weight(),
                        2.0 * std::f64::consts::PI * c.frequency.abs(),
                        c.lengthscale(),
                    )
                })
                .collect();
            omegas.sort_by(|a, b| b.0.total_cmp(&a.0));
            eprintln!(
                "it {iter:5} a {a:+.4} dL/da {g_along:+10.2} |g_u| {g_u_norm:9.2e} rmse {rmse:9.3e} top {:?}",
                omegas
                    .iter()
                    .take(3)
                    .map(|(w, o, r)| format!("o{o:.1}w{w:.3}r{r:.2}"))
                    .collect::<Vec<_>>()
            );
        }
        adam.step(&mut params, &grads, cfg.learning_rate);
    }
}
