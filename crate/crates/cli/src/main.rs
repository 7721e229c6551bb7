use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contrec_core::config::RunConfig;
use contrec_core::pipeline::{
    evaluate_checkpoints, export_meshes, generate_data, load_dataset, train_stream, write_report,
    write_resolved_config, OutputDir,
};

#[derive(Parser)]
#[command(
    name = "contrec",
    version,
    about = "Continual single-image 3D reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic session dataset.
    GenData(Common),
    /// Train through every session.
    Train(Common),
    /// Rebuild the IOU matrix from stored checkpoints.
    Eval(Common),
    /// Reconstruct test objects to OBJ meshes with the latest checkpoint.
    ExportMesh {
        #[command(flatten)]
        common: Common,
        /// Object id, e.g. sphere_test_0. Repeat for several objects.
        #[arg(long = "object", required = true)]
        objects: Vec<String>,
    },
    /// Write metrics.json and summary.txt from a finished run.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> contrec_core::Result<(RunConfig, OutputDir)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.validate()?;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        let out = OutputDir::new(cfg.output_dir.clone());
        write_resolved_config(&cfg, &out)?;
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> contrec_core::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = c.resolve()?;
            let sessions = generate_data(&cfg, &out)?;
            let n: usize = sessions.iter().map(|s| s.instances().count()).sum();
            println!(
                "wrote {n} objects in {} sessions to {}",
                sessions.len(),
                out.dataset().display()
            );
        }
        Command::Train(c) => {
            let (cfg, out) = c.resolve()?;
            let sessions = load_dataset(&cfg, &out)?;
            let done = train_stream(&cfg, &sessions, Some(&out))?;
            for r in &done.reports {
                println!("session {}: final loss {:.5}", r.session, r.final_loss);
            }
            println!(
                "checkpoints, reports and iou matrix in {}",
                out.root().display()
            );
        }
        Command::Eval(c) => {
            let (cfg, out) = c.resolve()?;
            let sessions = load_dataset(&cfg, &out)?;
            let m = evaluate_checkpoints(&cfg, &sessions, &out)?;
            print!("{}", m.to_csv());
        }
        Command::ExportMesh { common, objects } => {
            let (cfg, out) = common.resolve()?;
            let sessions = load_dataset(&cfg, &out)?;
            for (path, mesh) in export_meshes(&cfg, &sessions, &out, &objects)? {
                println!(
                    "{}: {} vertices, {} triangles",
                    path.display(),
                    mesh.vertices.len(),
                    mesh.triangles.len()
                );
            }
        }
        Command::Report(c) => {
            let (cfg, out) = c.resolve()?;
            write_report(&cfg, &out)?;
            print!(
                "{}",
                std::fs::read_to_string(out.summary()).unwrap_or_default()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
