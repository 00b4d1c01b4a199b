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
    let stop = StopRule { tol: 1e-16, tol_abs: 1e-30, max_iterations: 6000, check_every: 50 };
    for level in 0..=2usize {
        let t0 = Instant::now();
        let mut model = problem.build_model(level, AdaptMode::Fixed).unwrap();
        let report = train_fixed(&mut model, &loss, &OptimizerKind::Lbfgs(LbfgsConfig::default()), &stop).unwrap();
        let exact = fem_solve_2d(&model.mesh, &problem.material(), &problem.bcs(&model.mesh)).unwrap();
        let mut num = 0.0; let mut den = 0.0;
        for (n, v) in exact.iter().enumerate() {
            for c in 0..2 {
                let d = model.params.u[2*n+c] - v[c];
                num += d*d; den += v[c]*v[c];
            }
        }
        println!("level {level}: rel nodal {:.3e}, iters {}, outcome {:?}, {:.2}s",
            (num/den).sqrt(), report.iterations, report.outcome, t0.elapsed().as_secs_f64());
    }
}
