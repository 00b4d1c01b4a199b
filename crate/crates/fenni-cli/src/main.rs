mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{RunConfig, StudyConfig};
use run::{execute, study_row, write_outputs, write_study_csv, RunError};

/// Trainable finite element interpolation: solve physics problems by
/// optimizing nodal values (and coordinates) against energy, residual,
/// or weak-form losses, with mesh adaptivity and multigrid schedules.
#[derive(Parser)]
#[command(name = "fenni", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write solution, report, and history.
    Solve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a matrix of configurations and write study.csv.
    Study {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a summary and conformity audit of an MSH file.
    Mesh {
        #[arg(long)]
        inspect: PathBuf,
    },
    /// Check the closed-form bar solution against a fine direct solve
    /// and print the relative mismatch.
    ValidateAnalytic {
        #[arg(long, default_value_t = 10_000)]
        elements: usize,
    },
}

fn cache_dir_for(output_dir: &std::path::Path) -> PathBuf {
    std::env::var_os("FENNI_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| output_dir.join("cache"))
}

fn thread_pool() -> rayon::ThreadPool {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var("FENNI_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        builder = builder.num_threads(n.max(1));
    }
    builder.build().expect("thread pool")
}

fn cmd_solve(path: &PathBuf) -> Result<(), RunError> {
    let text = std::fs::read_to_string(path)?;
    let cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("parse error: {e}")))?;
    cfg.validate().map_err(RunError::Config)?;
    let cache = cache_dir_for(&cfg.output_dir);
    let artifacts = execute(&cfg, &cache)?;
    write_outputs(&cfg, &artifacts, &cfg.output_dir.clone())?;
    if let Some(n) = artifacts.norms_1d {
        println!("e_u = {:.6e}, e_grad = {:.6e}", n.e_u, n.e_du);
    }
    if let Some(n) = artifacts.norms_2d {
        println!(
            "e_ux = {:.6e}, e_uy = {:.6e}, e_vm = {:.6e}, vm_max_ratio = {:.6}",
            n.e_ux, n.e_uy, n.e_vm, n.vm_max_ratio
        );
    }
    println!(
        "{} iterations, final loss {:.9e}, outputs in {}",
        artifacts.report.iterations,
        artifacts.report.final_loss,
        cfg.output_dir.display()
    );
    Ok(())
}

fn cmd_study(path: &PathBuf) -> Result<(), RunError> {
    let text = std::fs::read_to_string(path)?;
    let study: StudyConfig =
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("parse error: {e}")))?;
    if study.runs.is_empty() {
        return Err(RunError::Config("study has no runs".to_string()));
    }
    for (i, cfg) in study.runs.iter().enumerate() {
        cfg.validate()
            .map_err(|m| RunError::Config(format!("run {i}: {m}")))?;
    }
    std::fs::create_dir_all(&study.output_dir)?;
    let cache = cache_dir_for(&study.output_dir);
    let pool = thread_pool();
    let outcomes: Vec<Result<run::RunArtifacts, RunError>> = pool.install(|| {
        use rayon::prelude::*;
        study
            .runs
            .par_iter()
            .map(|cfg| execute(cfg, &cache))
            .collect()
    });
    let rows: Vec<run::StudyRow> = study
        .runs
        .iter()
        .zip(&outcomes)
        .enumerate()
        .map(|(i, (cfg, outcome))| study_row(i, cfg, outcome))
        .collect();
    write_study_csv(&rows, &study.output_dir.join("study.csv"))?;
    let ok = outcomes.iter().filter(|o| o.is_ok()).count();
    println!(
        "{}/{} runs succeeded, study.csv in {}",
        ok,
        study.runs.len(),
        study.output_dir.display()
    );
    if ok == 0 {
        return Err(RunError::Failed("every study run failed".to_string()));
    }
    Ok(())
}

fn cmd_mesh_inspect(path: &PathBuf) -> Result<(), RunError> {
    let read = fenni::mesh::read_gmsh(path).map_err(|e| RunError::Failed(e.to_string()))?;
    let mesh = &read.mesh;
    println!("dimension:     {}", mesh.dim);
    println!("nodes:         {}", mesh.n_nodes());
    println!("elements:      {}", mesh.n_elements());
    println!("skipped types: {}", read.skipped_elements);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for n in &mesh.nodes {
        for c in 0..2 {
            lo[c] = lo[c].min(n.coords[c]);
            hi[c] = hi[c].max(n.coords[c]);
        }
    }
    println!(
        "bounding box:  [{:.6}, {:.6}] x [{:.6}, {:.6}]",
        lo[0], hi[0], lo[1], hi[1]
    );
    println!("measure:       {:.9}", mesh.domain_measure());
    let mut tags: Vec<String> = mesh
        .nodes
        .iter()
        .filter_map(|n| n.boundary_tag.clone())
        .collect();
    tags.sort();
    tags.dedup();
    println!("boundary tags: {}", if tags.is_empty() { "(none)".to_string() } else { tags.join(", ") });
    match mesh.audit_conformity() {
        Ok(()) => println!("conformity:    ok"),
        Err(e) => println!("conformity:    FAILED ({e})"),
    }
    Ok(())
}

fn cmd_validate_analytic(elements: usize) -> Result<(), RunError> {
    let bar = fenni::oracle::Bar1d::default();
    let mismatch = fenni::oracle::validate_analytic_1d(&bar, elements)
        .map_err(|e| RunError::Failed(e.to_string()))?;
    println!(
        "closed-form vs direct solve on {elements} elements: relative nodal L2 mismatch = {mismatch:.3e}"
    );
    if mismatch < 1e-6 {
        println!("gate: PASS (< 1e-6)");
        Ok(())
    } else {
        Err(RunError::Failed(format!(
            "gate: FAIL (mismatch {mismatch:.3e} >= 1e-6)"
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve { config } => cmd_solve(config),
        Command::Study { config } => cmd_study(config),
        Command::Mesh { inspect } => cmd_mesh_inspect(inspect),
        Command::ValidateAnalytic { elements } => cmd_validate_analytic(*elements),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
