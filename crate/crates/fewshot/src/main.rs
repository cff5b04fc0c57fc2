use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fewshot::datasets::{generate_glyph_dataset, split_classes, GlyphSpec};
use fewshot::harness::{
    apply_overrides, gradcheck_report, group_table, parse_config, plot_from_dirs, run_experiment,
    run_group, Budget, HarnessError, MAX_WALL_SECONDS,
};
use fewshot::methods::{eval_loop, train_loop, Method, Model, TrainConfig};
use fewshot::nn::BackboneConfig;
use fewshot::rng::SeedTree;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;
const EXIT_TIMEOUT: u8 = 4;

#[derive(Parser)]
#[command(
    name = "fewshot",
    about = "Few-shot classification and detection experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate one method from a config file.
    Run {
        /// Path to a `key: value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Override config entries, e.g. --set train.epochs=2
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Wall-clock limit in seconds.
        #[arg(long, default_value_t = MAX_WALL_SECONDS)]
        max_seconds: u64,
    },
    /// Run several methods under one config and a shared eval seed.
    Group {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated method list.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value_t = MAX_WALL_SECONDS)]
        max_seconds: u64,
    },
    /// Aggregate eval.json files from run directories into plot-ready CSV.
    Plot {
        /// X axis: k_shot, n_way, or noise_swaps.
        #[arg(long, default_value = "k_shot")]
        x: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run directories containing eval.json.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Check every differentiable op against finite differences.
    Gradcheck {
        /// Number of random seeds per op.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Small end-to-end training run that finishes in under a minute.
    Demo {
        #[arg(long, default_value_t = fewshot::harness::DEFAULT_SEED)]
        seed: u64,
    },
}

fn load_config(path: &PathBuf, overrides: &[String]) -> Result<fewshot::harness::ExperimentConfig, (u8, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| (EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    apply_overrides(&mut cfg, overrides).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    cfg.validate().map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    Ok(cfg)
}

fn exit_for(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_) => EXIT_CONFIG,
        HarnessError::TimedOut { .. } => EXIT_TIMEOUT,
        _ => EXIT_RUN,
    }
}

fn demo(seed: u64) -> Result<(), (u8, String)> {
    let fail = |e: String| (EXIT_RUN, e);
    println!("generating 20 glyph classes x 12 samples ...");
    let glyphs = GlyphSpec {
        n_classes: 20,
        samples_per_class: 12,
        image_size: 28,
        ..GlyphSpec::default()
    };
    let tree = SeedTree::new(seed);
    let set = generate_glyph_dataset(&glyphs, tree.derive("data").seed());
    let split = split_classes(20, (0.5, 0.25, 0.25), tree.derive("split").seed())
        .map_err(|e| fail(e.to_string()))?;
    let tcfg = TrainConfig {
        spec: fewshot::episodes::EpisodeSpec {
            n_way: 5,
            k_shot: 1,
            n_query: 8,
        },
        epochs: 1,
        episodes_per_epoch: 30,
        val_episodes: 10,
        ..TrainConfig::default()
    };
    let backbone = BackboneConfig {
        blocks: 4,
        channels: 16,
        in_channels: 1,
        image_size: 28,
        keep_spatial: 0,
    };
    let mut rng = SeedTree::new(tree.derive("model").seed()).rng();
    let model: Model<f32> = Model::new(Method::Proto, backbone, &mut rng);
    println!("training prototype method, 1 epoch x 30 episodes ...");
    let (model, history) = train_loop(model, &set, &split, &tcfg, tree.derive("train").seed())
        .map_err(|e| fail(e.to_string()))?;
    for row in &history {
        println!(
            "  epoch {}  train_loss {:.4}  val_acc {:.3}",
            row.epoch, row.train_loss, row.val_acc
        );
    }
    let report = eval_loop(&model, &set, &split.test, tcfg.spec, 30, seed, 0, &tcfg)
        .map_err(|e| fail(e.to_string()))?;
    println!("5-way 1-shot on held-out classes: {}", report.format_line());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), (u8, String)> {
    match cli.cmd {
        Cmd::Run {
            config,
            set,
            max_seconds,
        } => {
            let cfg = load_config(&config, &set)?;
            let budget = Budget::seconds(max_seconds);
            let outcome =
                run_experiment(&cfg, &budget).map_err(|e| (exit_for(&e), e.to_string()))?;
            println!("{}", outcome.summary);
            println!("artifacts: {}", outcome.dir.display());
            Ok(())
        }
        Cmd::Group {
            config,
            methods,
            set,
            max_seconds,
        } => {
            let cfg = load_config(&config, &set)?;
            let budget = Budget::seconds(max_seconds);
            let group =
                run_group(&cfg, &methods, &budget).map_err(|e| (exit_for(&e), e.to_string()))?;
            print!("{}", group_table(&group));
            if group.runs.is_empty() {
                return Err((EXIT_RUN, "every method in the group failed".into()));
            }
            Ok(())
        }
        Cmd::Plot { x, out, dirs } => {
            let csv = plot_from_dirs(&dirs, &x).map_err(|e| (exit_for(&e), e.to_string()))?;
            match out {
                Some(path) => std::fs::write(&path, csv)
                    .map_err(|e| (EXIT_RUN, format!("{}: {e}", path.display())))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Cmd::Gradcheck { seeds } => {
            let (report, ok) = gradcheck_report(seeds);
            print!("{report}");
            if ok {
                println!("gradcheck: all ops match finite differences");
                Ok(())
            } else {
                Err((EXIT_RUN, "gradcheck found mismatches".into()))
            }
        }
        Cmd::Demo { seed } => demo(seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
