use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ddrom::fem::ParameterSample;
use ddrom::harness::{run_pipeline, snapshots_stage, sweep_hyperparams, train_stage, ArtifactPaths, Experiment, ExperimentConfig};
use ddrom::mesh::build_subdomain_meshes;
use ddrom::rom_offline::RomModel;
use ddrom::rom_online::{reconstruct, rom_solve, rom_solve_unsteady};

#[derive(Parser)]
#[command(name = "ddrom", version, about = "Reduced-order Dirichlet-Neumann domain decomposition")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate training snapshots into <out>/snapshots.
    Snapshots {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a reduced model into <out>/model, reusing stored snapshots.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Online solve for one parameter; prints diagnostics as JSON lines.
    Solve {
        /// Model directory written by `train`.
        model: PathBuf,
        /// alpha,beta[,gamma1,gamma2]
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_negative_numbers = true)]
        mu: Vec<f64>,
        /// Experiment config; defaults to config.json next to the model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the reconstructed fields as legacy VTK (`<prefix>_slave.vtk`, `<prefix>_master.vtk`).
        #[arg(long)]
        vtk: Option<PathBuf>,
    },
    /// Full pipeline with FOM references; writes report.csv and summary.json.
    Bench {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hyper-parameter sweep over the config's grid; writes sweep.csv.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, out: Option<PathBuf>) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("[config] {}", path.display()))?;
    let dir = out.unwrap_or_else(|| cfg.output_dir());
    Ok((cfg, dir))
}

fn parse_mu(v: &[f64]) -> Result<ParameterSample> {
    match v {
        [a, b] => Ok(ParameterSample::new(*a, *b)),
        [a, b, g1, g2] => Ok(ParameterSample::new(*a, *b).with_sources(*g1, *g2)),
        _ => bail!("[solve] --mu takes 2 or 4 values, got {}", v.len()),
    }
}

fn solve(model_dir: &Path, mu: &[f64], config: Option<PathBuf>, vtk: Option<PathBuf>) -> Result<()> {
    let mu = parse_mu(mu)?;
    let model = RomModel::load(model_dir).with_context(|| format!("[load model] {}", model_dir.display()))?;
    let cfg_path = config.or_else(|| {
        let p = model_dir.parent().map(|d| ArtifactPaths::new(d).config())?;
        p.exists().then_some(p)
    });
    let cfg = match &cfg_path {
        Some(p) => Some(ExperimentConfig::load(p).with_context(|| format!("[config] {}", p.display()))?),
        None => None,
    };
    let dn = cfg.as_ref().map(|c| c.dn()).unwrap_or_default();
    let scheme = cfg.as_ref().and_then(|c| c.time.clone());
    let states = match &scheme {
        Some(s) => rom_solve_unsteady(&model, &mu, &dn, s).context("[solve]")?,
        None => vec![rom_solve(&model, &mu, &dn).context("[solve]")?],
    };
    let stdout = std::io::stdout();
    for (n, st) in states.iter().enumerate() {
        let mut tagged = mu.clone();
        if scheme.is_some() {
            tagged.t_index = Some(n + 1);
        }
        st.diagnostics(&tagged).write_json_line(stdout.lock())?;
    }
    if let Some(prefix) = vtk {
        let cfg = cfg.context("[vtk] meshes need the experiment config (--config)")?;
        let (m1, m2) = build_subdomain_meshes(&cfg.geometry, &cfg.boundary, &cfg.cells_slave, &cfg.cells_master)
            .context("[vtk]")?;
        let last = states.last().expect("at least one state");
        let (u1, u2) = reconstruct(&model, last);
        for (mesh, u, tag) in [(&m1, &u1, "slave"), (&m2, &u2, "master")] {
            let path = PathBuf::from(format!("{}_{tag}.vtk", prefix.display()));
            let f = fs::File::create(&path).with_context(|| format!("[vtk] {}", path.display()))?;
            mesh.write_vtk(std::io::BufWriter::new(f), &[("u", u.as_slice())]).context("[vtk]")?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Snapshots { config, out } => {
            let (cfg, dir) = load_config(&config, out)?;
            let exp = Experiment::build(&cfg)?;
            let (set, t) = snapshots_stage(&exp, Some(&dir))?;
            eprintln!("{} snapshot columns in {t:.2}s -> {}", set.n_columns(), ArtifactPaths::new(&dir).snapshots().display());
        }
        Cmd::Train { config, out } => {
            let (cfg, dir) = load_config(&config, out)?;
            let exp = Experiment::build(&cfg)?;
            let (model, _, t) = train_stage(&exp, Some(&dir))?;
            println!("{}", serde_json::to_string(&model.ranks())?);
            eprintln!("trained in {t:.2}s -> {}", ArtifactPaths::new(&dir).model().display());
        }
        Cmd::Solve { model, mu, config, vtk } => solve(&model, &mu, config, vtk)?,
        Cmd::Bench { config, out } => {
            let (cfg, dir) = load_config(&config, out)?;
            let report = run_pipeline(&cfg, Some(&dir))?;
            println!("{}", serde_json::to_string_pretty(&report.summary)?);
        }
        Cmd::Sweep { config, out } => {
            let (cfg, dir) = load_config(&config, out)?;
            let report = sweep_hyperparams(&cfg, Some(&dir))?;
            eprintln!("{} grid points -> {}", report.rows.len(), dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
