use fenni::loss::potential_energy_2d;
use fenni::model::AdaptMode;
use fenni::oracle::*;
use fenni::quadrature::gauss_tri;
use fenni::optim::LbfgsConfig;
use fenni::train::*;
use fenni::loss::von_mises_plane_strain;
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
    let cache = std::env::temp_dir().join("fenni-probe-cache");
    let reference = plate_reference_solution(&cache, &problem, 4).unwrap();

    let max_level: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let t_dj: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let ci: u64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(10);

    for top in 0..=max_level {
        // r multigrid
        let levels: Vec<_> = (0..=top).map(|l| problem.build_model(l, AdaptMode::RAdaptive).unwrap()).collect();
        let (r_model, _r_rep) = train_multigrid(levels, &loss, &opt, &stop, None, 0.05).unwrap();
        let rn = error_norms_2d(&r_model, &reference, &problem.material()).unwrap();

        // rh multigrid
        let t0 = Instant::now();
        let cfg = AdaptivityConfig { t_delta_j: t_dj, check_interval: ci, max_splits: 1, inversion_floor: 0.05 };
        let levels: Vec<_> = (0..=top).map(|l| problem.build_model(l, AdaptMode::RhAdaptive).unwrap()).collect();
        let (rh_model, rh_rep) = train_multigrid(levels, &loss, &opt, &stop, Some(&cfg), 0.05).unwrap();
        let hn = error_norms_2d(&rh_model, &reference, &problem.material()).unwrap();
        let lvl = rh_rep.levels.last().unwrap();
        let frac = (lvl.n_nodes_final as f64 - lvl.n_nodes_initial as f64) / lvl.n_nodes_initial as f64;

        // VM over split elements vs mesh mean (final rh model)
        let mut vm_split = (0.0, 0usize);
        let mut vm_all = (0.0, 0usize);
        for e in 0..rh_model.mesh.n_elements() {
            let vm = von_mises_plane_strain(&rh_model.strain_in(e).unwrap(), &problem.material());
            vm_all.0 += vm; vm_all.1 += 1;
            if rh_model.mesh.elements[e].split_count >= 1 { vm_split.0 += vm; vm_split.1 += 1; }
        }
        println!("top {top} (t={t_dj}): nodes {}->{} frac {:.3} | r: e_ux {:.3e} e_uy {:.3e} ratio {:.4} | rh: e_ux {:.3e} e_uy {:.3e} ratio {:.4} | vm split {:.3} vs all {:.3} | {:.1}s",
            lvl.n_nodes_initial, lvl.n_nodes_final, frac,
            rn.e_ux, rn.e_uy, rn.vm_max_ratio, hn.e_ux, hn.e_uy, hn.vm_max_ratio,
            vm_split.0 / vm_split.1.max(1) as f64, vm_all.0 / vm_all.1 as f64,
            t0.elapsed().as_secs_f64());
    }
}
