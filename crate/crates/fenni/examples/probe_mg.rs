use fenni::loss::potential_energy_2d;
use fenni::model::AdaptMode;
use fenni::oracle::*;
use fenni::quadrature::gauss_tri;
use fenni::optim::LbfgsConfig;
use fenni::train::*;
use std::time::Instant;

fn main() {
    let problem = PlateProblem::default();
    let mat = problem.material();
    let rule = gauss_tri(1).unwrap();
    let loss: LossFn = Box::new(move |tape, model, binding| {
        potential_energy_2d(tape, model, binding, &mat, &rule)
    });
    let stop = StopRule { tol: 1e-9, tol_abs: 1e-30, max_iterations: 800, check_every: 20 };
    let opt = OptimizerKind::Lbfgs(LbfgsConfig::default());

    // Multigrid r-adaptive over levels 0..=2.
    let t0 = Instant::now();
    let levels: Vec<_> = (0..=2).map(|l| problem.build_model(l, AdaptMode::RAdaptive).unwrap()).collect();
    let (mg_model, mg_report) = train_multigrid(levels, &loss, &opt, &stop, None, 0.05).unwrap();
    println!("multigrid r [0,1,2]: {:.2}s", t0.elapsed().as_secs_f64());
    for l in &mg_report.levels {
        println!("  level {} nodes {}->{} iters {} outcome {:?} final {:.8e}",
            l.level, l.n_nodes_initial, l.n_nodes_final, l.iterations, l.outcome, l.final_loss);
    }

    // Single-level r-adaptive at level 2 from uniform init.
    let t0 = Instant::now();
    let mut single = problem.build_model(2, AdaptMode::RAdaptive).unwrap();
    match train_r_adaptive(&mut single, &loss, &opt, &stop, 0.05) {
        Ok(rep) => println!("single-level r at 2: iters {} outcome {:?} final {:.8e} ({:.2}s)",
            rep.iterations, rep.outcome, rep.final_loss, t0.elapsed().as_secs_f64()),
        Err(e) => println!("single-level r at 2 FAILED: {e}"),
    }

    // Compare errors vs reference.
    let cache = std::env::temp_dir().join("fenni-probe-cache");
    let reference = plate_reference_solution(&cache, &problem, 4).unwrap();
    let n = error_norms_2d(&mg_model, &reference, &problem.material()).unwrap();
    println!("mg r: e_ux {:.3e} e_uy {:.3e} e_vm {:.3e} ratio {:.4}", n.e_ux, n.e_uy, n.e_vm, n.vm_max_ratio);
}
