use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nhl::cost::{count_macs, export_report, reduction, Convention, CostReport, Report, ReportFormat};
use nhl::expert::{expert_count, extract_expert, verify_logit_equivalence, ExpertSpec, ExtractOptions};
use nhl::pipeline::{
    evaluate, evaluate_params, load_checkpoint, load_checkpoint_for, load_cifar10_binary, load_idx_dir, save_checkpoint,
    train, Dataset, OptimizerKind, Split, TrainConfig,
};
use nhl::runtime::{parameter_manifest, Tensor};
use nhl::taxonomy::{parse_taxonomy, Taxonomy};
use nhl::topology::{
    build_baseline, build_nhl, build_trunk, Backbone, BranchConfig, ComputeGraph, HeadPlacement, Shape,
    TopologyError,
};
use nhl::Error;

#[derive(Parser)]
#[command(name = "nhl", version, about = "Build, analyze, train and slice nest-at-high-level networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetKind {
    Cifar10,
    Idx,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Build a baseline or NHL graph and write it as JSON.
    Build {
        #[arg(long, default_value = "resnet50")]
        backbone: String,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Build the plain backbone with a K-way classifier instead of an NHL graph.
        #[arg(long)]
        baseline_classes: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        branch_schedule: Option<Vec<usize>>,
        #[arg(long, default_value = "per-leaf")]
        head_placement: String,
        #[arg(long, default_value_t = 1)]
        blocks_per_node: usize,
        #[arg(long, default_value_t = 2)]
        level1_stride: usize,
        /// Input shape CxHxW; defaults to the backbone's native size.
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count parameters and MACs.
    Analyze {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        include_elementwise: bool,
        /// Restrict the report to taxonomy-tagged branch nodes.
        #[arg(long)]
        branch_only: bool,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cut the expert serving a category subset out of a full graph.
    Extract {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        categories: String,
        #[arg(long)]
        keep_whole_heads: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write the parameter names the expert reads from a checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a graph and write a checkpoint after every epoch.
    Train {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        dataset: DatasetKind,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, value_enum, default_value = "adam")]
        optimizer: Optimizer,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 0.0)]
        weight_decay: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train_limit: Option<usize>,
        #[arg(long)]
        val_limit: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-epoch metrics as JSON lines.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy on the test split, optionally restricted to categories.
    Eval {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "idx")]
        dataset: DatasetKind,
        #[arg(long)]
        categories: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
        /// Skip the graph hash check.
        #[arg(long)]
        force: bool,
    },
    /// Check that an expert reproduces the full model's logits.
    Verify {
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
        /// Use dataset images instead of seeded random inputs.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "idx")]
        dataset: DatasetKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Reduction table between two cost reports.
    Compare {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        variant: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Number of distinct experts over N categories.
    Experts {
        #[arg(long)]
        n: u64,
    },
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_graph(path: &Path) -> Result<ComputeGraph, Error> {
    Ok(ComputeGraph::from_json(&read(path)?)?.with_shapes()?)
}

fn load_taxonomy(path: &Path) -> Result<Taxonomy, Error> {
    Ok(parse_taxonomy(&read(path)?)?)
}

fn parse_shape(s: &str) -> Result<Shape, Error> {
    s.parse::<Shape>()
        .map_err(|e| Error::Topology(TopologyError::Malformed(e.to_string())))
}

fn default_input(backbone: Backbone) -> Shape {
    match backbone {
        Backbone::Resnet50 => Shape::new(3, 224, 224),
        Backbone::Resnet50Small => Shape::new(3, 32, 32),
        Backbone::Mini => Shape::new(1, 28, 28),
    }
}

fn load_split(path: &Path, kind: DatasetKind, split: Split) -> Result<Dataset, Error> {
    Ok(match kind {
        DatasetKind::Idx => load_idx_dir(path, split)?,
        DatasetKind::Cifar10 => load_cifar10_binary(path, split)?,
    })
}

fn limit(d: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) => d.take(n),
        None => d,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Build {
            backbone,
            taxonomy,
            baseline_classes,
            branch_schedule,
            head_placement,
            blocks_per_node,
            level1_stride,
            input,
            out,
        } => {
            let backbone: Backbone = backbone.parse()?;
            let input = match input {
                Some(s) => parse_shape(&s)?,
                None => default_input(backbone),
            };
            let g = match (baseline_classes, taxonomy) {
                (Some(k), _) => build_baseline(&backbone.config(), k, input)?,
                (None, Some(tax)) => {
                    let tax = load_taxonomy(&tax)?;
                    let mut cfg = BranchConfig {
                        head_placement: head_placement
                            .parse::<HeadPlacement>()
                            .map_err(TopologyError::InvalidBranchConfig)?,
                        blocks_per_node,
                        level1_stride,
                        ..Default::default()
                    };
                    if let Some(s) = branch_schedule {
                        cfg.channel_schedule = s;
                    }
                    build_nhl(&build_trunk(backbone, input)?, &tax, &cfg)?
                }
                (None, None) => {
                    return Err(TopologyError::InvalidBranchConfig(
                        "either --taxonomy or --baseline-classes is required".into(),
                    )
                    .into())
                }
            };
            write(&out, g.to_json())?;
            let cost = count_macs(&g, g.input_shape, Convention::default())?;
            println!(
                "{} nodes, {} categories, {} parameters, {} GMACs -> {}",
                g.len(),
                g.logit_layout.len(),
                cost.total_params,
                nhl::cost::format_gmacs(cost.total_macs),
                out.display()
            );
        }
        Command::Analyze {
            graph,
            input,
            include_elementwise,
            branch_only,
            format,
            out,
        } => {
            let g = load_graph(&graph)?;
            let input = match input {
                Some(s) => parse_shape(&s)?,
                None => g.input_shape,
            };
            let mut report = count_macs(&g, input, Convention { include_elementwise })?;
            if branch_only {
                report = report.branch_region();
            }
            let fmt = match format {
                Format::Json => ReportFormat::Json,
                Format::Csv => ReportFormat::Csv,
            };
            let bytes = export_report(Report::Cost(&report), fmt);
            match out {
                Some(path) => {
                    write(&path, bytes)?;
                    println!(
                        "params {} | GMACs {} -> {}",
                        report.total_params,
                        nhl::cost::format_gmacs(report.total_macs),
                        path.display()
                    );
                }
                None => println!("{}", String::from_utf8_lossy(&bytes).trim_end()),
            }
        }
        Command::Extract {
            graph,
            taxonomy,
            categories,
            keep_whole_heads,
            out,
            manifest,
        } => {
            let g = load_graph(&graph)?;
            let tax = load_taxonomy(&taxonomy)?;
            let spec = ExpertSpec::parse(&categories, tax.num_categories())?;
            let e = extract_expert(&g, &tax, &spec, ExtractOptions { keep_whole_heads })?;
            write(&out, e.to_json())?;
            if let Some(path) = manifest {
                let names: Vec<String> = parameter_manifest(&e).into_iter().map(|s| s.name).collect();
                write(&path, names.join("\n") + "\n")?;
            }
            println!(
                "expert with {} of {} nodes serving {} categories -> {}",
                e.len(),
                g.len(),
                e.logit_layout.len(),
                out.display()
            );
        }
        Command::Train {
            graph,
            data,
            dataset,
            epochs,
            batch,
            lr,
            optimizer,
            momentum,
            weight_decay,
            seed,
            train_limit,
            val_limit,
            resume,
            metrics,
            out,
        } => {
            let g = load_graph(&graph)?;
            let train_set = limit(load_split(&data, dataset, Split::Train)?, train_limit);
            let val = limit(load_split(&data, dataset, Split::Test)?, val_limit);
            let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
            let cfg = TrainConfig {
                epochs,
                batch_size: batch,
                lr,
                optimizer: match optimizer {
                    Optimizer::Sgd => OptimizerKind::Sgd { momentum },
                    Optimizer::Adam => OptimizerKind::Adam {
                        beta1: 0.9,
                        beta2: 0.999,
                    },
                },
                weight_decay,
                seed,
                checkpoint_path: Some(out.clone()),
                ..Default::default()
            };
            let start = Instant::now();
            let mut lines = String::new();
            let outcome = train(&g, &train_set, Some(&val), &cfg, resume, |m| {
                println!(
                    "epoch {} loss {:.4} val top-1 {:.4} ({:.0}s)",
                    m.epoch,
                    m.train_loss,
                    m.val_top1.unwrap_or(f64::NAN),
                    start.elapsed().as_secs_f64()
                );
                lines.push_str(&serde_json::to_string(m).expect("metrics serialize"));
                lines.push('\n');
            })?;
            if let Some(path) = metrics {
                write(&path, lines)?;
            }
            save_checkpoint(&out, &outcome.checkpoint)?;
            println!("checkpoint -> {}", out.display());
        }
        Command::Eval {
            graph,
            checkpoint,
            data,
            dataset,
            categories,
            limit: n,
            force,
        } => {
            let g = load_graph(&graph)?;
            let ckpt = load_checkpoint_for(&checkpoint, &g, force)?;
            let test = limit(load_split(&data, dataset, Split::Test)?, n);
            let max_cat = g.categories().map(|c| c.0 + 1).max().unwrap_or(0);
            let spec = categories
                .map(|c| ExpertSpec::parse(&c, max_cat))
                .transpose()?;
            let top1 = if force {
                evaluate_params(&g, &ckpt.params.subset_for(&g)?, &test, spec.as_ref(), 256)?
            } else {
                evaluate(&g, &ckpt, &test, spec.as_ref())?
            };
            println!("{}", serde_json::json!({ "top1": top1 }));
        }
        Command::Verify {
            full,
            expert,
            checkpoint,
            samples,
            tol,
            data,
            dataset,
            seed,
            force,
        } => {
            let g = load_graph(&full)?;
            let e = load_graph(&expert)?;
            let ckpt = load_checkpoint_for(&checkpoint, &g, force)?;
            let s = g.input_shape;
            let inputs: Vec<Tensor<f32>> = match data {
                Some(dir) => {
                    let d = load_split(&dir, dataset, Split::Test)?.take(samples);
                    vec![d.images]
                }
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (0..samples)
                        .map(|_| Tensor::from_fn(&[1, s.c, s.h, s.w], |_| rng.random_range(-2.0..2.0)))
                        .collect()
                }
            };
            let report = verify_logit_equivalence(&g, &e, &ckpt.params, &inputs)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            if !report.passes(tol) {
                return Err(nhl::expert::ExpertError::GraphMismatch(format!(
                    "expert deviates: max_abs_diff {} (tol {tol}), argmax agreement {}",
                    report.max_abs_diff, report.argmax_agreement
                ))
                .into());
            }
        }
        Command::Compare { base, variant, json } => {
            let base = CostReport::from_json(&read(&base)?)?;
            let variant = CostReport::from_json(&read(&variant)?)?;
            let r = reduction(&base, &variant)?;
            if json {
                let rows: serde_json::Map<String, serde_json::Value> = r
                    .table_rows()
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v.into()))
                    .collect();
                println!("{}", serde_json::Value::Object(rows));
            } else {
                print!("{}", r.render_table());
            }
        }
        Command::Experts { n } => println!("{}", expert_count(n)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
