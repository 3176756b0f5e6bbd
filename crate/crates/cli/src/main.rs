use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use iep_core::checkpoint::Checkpoint;
use iep_core::config::TrainConfig;
use iep_core::data::DatasetHandle;
use iep_core::{train, viz, Result};

#[derive(Parser)]
#[command(name = "iep", version, about = "Embedding-procedure distillation on small convolutional nets")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set seed=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the target task.
    TrainTeacher,
    /// Fit IPCA and the message-passing nets on the frozen teacher.
    TrainMpnn,
    /// Train the student with the teacher's embedding knowledge.
    Distill,
    /// Print test accuracy of `eval.checkpoint` (default: the student checkpoint).
    Evaluate,
    /// Write affinity, message and display-coordinate tables to `<out_dir>/viz`.
    ExportViz,
    /// Print the resolved config and its hash.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            println!("# hash = {}", cfg.hash());
        }
        Command::TrainTeacher => {
            let data = DatasetHandle::from_config(&cfg)?;
            let ck = train::train_teacher(&cfg, &data)?;
            let acc = train::evaluate(&ck, &data)?;
            println!("teacher {} test_accuracy {acc:.6}", cfg.teacher_checkpoint().display());
        }
        Command::TrainMpnn => {
            let teacher = Checkpoint::load(&cfg.teacher_checkpoint())?;
            let data = DatasetHandle::from_config(&cfg)?;
            train::train_mpnn(&cfg, &data, &teacher)?;
            println!("frame {}", cfg.frame_checkpoint().display());
        }
        Command::Distill => {
            let frame = Checkpoint::load(&cfg.frame_checkpoint())?;
            let data = DatasetHandle::from_config(&cfg)?;
            let ck = train::train_student(&cfg, &data, &frame)?;
            let acc = train::evaluate(&ck, &data)?;
            println!("student {} test_accuracy {acc:.6}", cfg.student_checkpoint().display());
        }
        Command::Evaluate => {
            let path = cfg.eval_checkpoint.clone().unwrap_or_else(|| cfg.student_checkpoint());
            let ck = Checkpoint::load(&path)?;
            let data = DatasetHandle::from_config(&cfg)?;
            let acc = train::evaluate(&ck, &data)?;
            println!("accuracy {acc:.6} over {} test images", data.test.len());
        }
        Command::ExportViz => {
            let frame = Checkpoint::load(&cfg.frame_checkpoint())?;
            frame.expect_kind(&["frame"])?;
            let frame = frame.frame()?;
            let data = DatasetHandle::from_config(&cfg)?;
            let n = cfg.viz_count.min(data.test.len());
            let images = data.test.subset(&(0..n).collect::<Vec<_>>()).images;
            let records = viz::viz_records(&frame, &images, cfg.cvis_literal)?;
            let dir = cfg.out_dir.join("viz");
            let files = viz::write_records(&records, &dir)?;
            info!("wrote {} files", files.len());
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", category.as_str());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}

