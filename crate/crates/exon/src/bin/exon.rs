//! Command-line entry points: train, evaluate, analyze, interpolate, grid,
//! perturb. Every command resolves one run configuration (file plus flag
//! overrides), writes it into its artifacts directory before any compute,
//! and exits nonzero with a single-line JSON error on failure.

use clap::{Args, Parser, Subcommand};
use exon::analysis::{self, GridSpec, ZIntegration};
use exon::config::{Overrides, RunConfig};
use exon::data::{load_dataset, split_labeled, take_rows, DatasetSplit};
use exon::error::ExonError;
use exon::networks::checkpoint::load_checkpoint;
use exon::networks::ModelParameters;
use exon::stochastic::sample_component;
use exon::trainer::{self, fit};
use ndarray::{Array1, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "exon",
    version,
    about = "Semi-supervised VAE with customized mixture priors and latent-space analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonOverrides {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset tag when no config file is given (mnist | cifar10).
    #[arg(long)]
    dataset: Option<String>,
    /// Decoder observation variance.
    #[arg(long)]
    beta: Option<f64>,
    /// Supervised / labeled-SCI weight.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Number of labeled training examples.
    #[arg(long = "n-labeled")]
    n_labeled: Option<usize>,
    /// Optimization seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset root (overrides the config file and EXON_DATA_ROOT).
    #[arg(long = "data-root")]
    data_root: Option<PathBuf>,
    /// Artifacts directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full training loop (resumes if the output directory already
    /// holds checkpoints).
    Train(CommonOverrides),
    /// Classification error, KL metric, and grid diversity of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// V-nat report, activated subspaces, bound certificate, MI
    /// decomposition, and the V-nat correlation matrix.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Activation threshold.
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        /// Monte Carlo draws for the MI latent terms.
        #[arg(long = "mc-samples", default_value_t = 10_000)]
        mc_samples: usize,
        /// Population cap for the MI decomposition.
        #[arg(long = "mi-subset", default_value_t = 512)]
        mi_subset: usize,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Decode the straight path between two latent points (prior-component
    /// samples or explicit coordinates).
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample the start point from this prior component.
        #[arg(long = "class-a")]
        class_a: Option<usize>,
        /// Sample the end point from this prior component.
        #[arg(long = "class-b")]
        class_b: Option<usize>,
        /// Explicit start coordinates, comma separated.
        #[arg(long = "point-a", allow_hyphen_values = true)]
        point_a: Option<String>,
        /// Explicit end coordinates, comma separated.
        #[arg(long = "point-b", allow_hyphen_values = true)]
        point_b: Option<String>,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Decode a rectangular grid over a 2-D latent space.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 31)]
        points: usize,
        /// Half-width of the square grid; defaults to the prior support.
        #[arg(long)]
        extent: Option<f64>,
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Perturb a latent draw on the activated subspace of a class (or its
    /// complement) and decode both.
    Perturb {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        class: usize,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        /// Uniform noise half-range.
        #[arg(long = "noise-range", default_value_t = 2.0)]
        noise_range: f64,
        /// Perturb the complement of the activated subspace instead.
        #[arg(long)]
        complement: bool,
        #[command(flatten)]
        common: CommonOverrides,
    },
}

fn exit_code_for(err: &ExonError) -> u8 {
    match err {
        ExonError::Config(_) => 3,
        ExonError::Dataset(_) => 4,
        ExonError::Checkpoint(_) => 5,
        ExonError::InvalidArgument(_) => 6,
        ExonError::NonFiniteLoss { .. } => 7,
        _ => 1,
    }
}

fn kind_for(err: &ExonError) -> &'static str {
    match err {
        ExonError::Config(_) => "config",
        ExonError::Dataset(_) => "dataset",
        ExonError::Checkpoint(_) => "checkpoint",
        ExonError::InvalidArgument(_) => "invalid_argument",
        ExonError::NonFiniteLoss { .. } => "non_finite_loss",
        _ => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = serde_json::json!({
                "error": err.to_string(),
                "kind": kind_for(&err),
            });
            eprintln!("{line}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// Resolve the run configuration: explicit file, file next to a checkpoint,
/// or dataset defaults; then apply flag overrides.
fn resolve_config(
    common: &CommonOverrides,
    checkpoint: Option<&Path>,
) -> Result<RunConfig, ExonError> {
    let mut cfg = if let Some(path) = &common.config {
        RunConfig::load(path)?
    } else if let Some(near) = checkpoint
        .and_then(|c| c.parent())
        .map(|p| p.join("config.toml"))
        .filter(|p| p.exists())
    {
        let training = toml::from_str(&std::fs::read_to_string(&near)?)
            .map_err(|e| ExonError::Config(format!("bad config near checkpoint: {e}")))?;
        RunConfig {
            training,
            prior_file: None,
            data_root: None,
            out_dir: None,
        }
    } else if let Some(tag) = &common.dataset {
        RunConfig::default_for(tag.parse()?)
    } else {
        return Err(ExonError::Config(
            "no configuration: pass --config, --dataset, or a checkpoint with an adjacent config.toml".into(),
        ));
    };
    cfg.apply_overrides(&Overrides {
        beta: common.beta,
        lambda1: common.lambda1,
        n_labeled: common.n_labeled,
        seed: common.seed,
        epochs: common.epochs,
        data_root: common.data_root.clone(),
        out_dir: common.out.clone(),
    });
    Ok(cfg)
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit, ExonError> {
    let root = cfg.resolved_data_root()?;
    let raw = load_dataset(cfg.training.dataset, &root)?;
    split_labeled(&raw, cfg.training.n_labeled, cfg.training.split_seed)
}

fn open_checkpoint(path: &Path) -> Result<ModelParameters, ExonError> {
    let (model, _) = load_checkpoint(path)?;
    Ok(model)
}

/// Write the resolved configuration before any compute.
fn snapshot_config(cfg: &RunConfig, out_dir: &Path) -> Result<(), ExonError> {
    std::fs::create_dir_all(out_dir)?;
    cfg.save(&out_dir.join("run-config.toml"))
}

fn default_out(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| {
        PathBuf::from(format!(
            "runs/{}-beta{}-seed{}",
            cfg.training.dataset, cfg.training.beta, cfg.training.seed
        ))
    })
}

fn run(command: Command) -> Result<(), ExonError> {
    match command {
        Command::Train(common) => {
            let cfg = resolve_config(&common, None)?;
            let out_dir = default_out(&cfg);
            snapshot_config(&cfg, &out_dir)?;
            let prior = cfg.resolved_prior()?;
            let split = load_split(&cfg)?;
            let artifacts = fit(&cfg.training, &split, &prior, &out_dir)?;
            std::fs::write(
                out_dir.join("artifacts.json"),
                serde_json::to_vec_pretty(&artifacts)
                    .map_err(|e| ExonError::Serialization(e.to_string()))?,
            )?;
            println!("{}", serde_json::to_string(&artifacts).unwrap());
            Ok(())
        }
        Command::Evaluate { checkpoint, common } => {
            let cfg = resolve_config(&common, Some(&checkpoint))?;
            let out_dir = common.out.clone().unwrap_or_else(|| checkpoint.clone());
            snapshot_config(&cfg, &out_dir)?;
            let model = open_checkpoint(&checkpoint)?;
            let prior = cfg.resolved_prior()?;
            let split = load_split(&cfg)?;
            let error =
                analysis::classification_error(&model, &split.test_images, &split.test_labels)?;
            let kl = analysis::kl_metric(&model, &prior, &split.test_images)?;
            let negative_ssim = if model.arch.latent_dim == 2 {
                let grid = GridSpec::square(trainer::grid_extent(&prior), cfg.training.grid_points);
                Some(analysis::negative_ssim(&analysis::grid_generate(
                    &model, &grid,
                )?)?)
            } else {
                None
            };
            #[derive(Serialize)]
            struct Evaluation {
                error: f64,
                kl_metric: f64,
                negative_ssim: Option<f64>,
                test_images: usize,
            }
            let eval = Evaluation {
                error,
                kl_metric: kl,
                negative_ssim,
                test_images: split.test_images.shape()[0],
            };
            let text = serde_json::to_string_pretty(&eval)
                .map_err(|e| ExonError::Serialization(e.to_string()))?;
            std::fs::write(out_dir.join("evaluation.json"), &text)?;
            println!("{text}");
            Ok(())
        }
        Command::Analyze {
            checkpoint,
            delta,
            mc_samples,
            mi_subset,
            common,
        } => {
            let cfg = resolve_config(&common, Some(&checkpoint))?;
            let out_dir = common.out.clone().unwrap_or_else(|| checkpoint.clone());
            snapshot_config(&cfg, &out_dir)?;
            let model = open_checkpoint(&checkpoint)?;
            let prior = cfg.resolved_prior()?;
            let split = load_split(&cfg)?;

            let report = analysis::vnat_report(
                &model,
                &prior,
                &split.test_images,
                &split.test_labels,
                delta,
            )?;
            let corr = analysis::vnat_correlation(
                &model,
                &prior,
                &split.test_images,
                &split.test_labels,
            )?;
            let subset: Vec<usize> = (0..split.test_images.shape()[0].min(mi_subset)).collect();
            let enc =
                analysis::encode_in_batches(&model, &take_rows(&split.test_images, &subset), 256)?;
            let mi = analysis::mi_decomposition(
                &enc,
                &prior,
                ZIntegration::MonteCarlo {
                    samples: mc_samples,
                    seed: cfg.training.seed,
                },
            )?;

            #[derive(Serialize)]
            struct Analysis {
                delta: f64,
                report: analysis::VNatReport,
                mi: analysis::MIDecomposition,
                vnat_correlation: Vec<Vec<f64>>,
            }
            let out = Analysis {
                delta,
                report,
                mi,
                vnat_correlation: corr.rows().into_iter().map(|r| r.to_vec()).collect(),
            };
            let text = serde_json::to_string_pretty(&out)
                .map_err(|e| ExonError::Serialization(e.to_string()))?;
            std::fs::write(out_dir.join("analysis.json"), &text)?;
            for (k, set) in out.report.activated.iter().enumerate() {
                println!(
                    "class {k}: |activated(delta={delta})| = {} of {}",
                    set.len(),
                    out.report.per_class_vnat[k].len()
                );
            }
            println!(
                "certificate: lower {:.6} <= mid {:.6} <= upper {:.6} (holds: {})",
                out.report.bound.lower,
                out.report.bound.mid,
                out.report.bound.upper,
                out.report.bound.holds_within(3.0)
            );
            println!(
                "mi identity gap: {:.3e} (se {:.3e})",
                out.mi.gap(),
                out.mi.mc_standard_error
            );
            Ok(())
        }
        Command::Interpolate {
            checkpoint,
            class_a,
            class_b,
            point_a,
            point_b,
            steps,
            common,
        } => {
            let cfg = resolve_config(&common, Some(&checkpoint))?;
            let out_dir = common
                .out
                .clone()
                .unwrap_or_else(|| checkpoint.join("interpolate"));
            snapshot_config(&cfg, &out_dir)?;
            let model = open_checkpoint(&checkpoint)?;
            let prior = cfg.resolved_prior()?;
            let seed = cfg.training.seed;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let resolve_point = |class: Option<usize>,
                                     point: &Option<String>,
                                     rng: &mut ChaCha20Rng|
             -> Result<Array1<f64>, ExonError> {
                match (class, point) {
                    (_, Some(text)) => parse_point(text, model.arch.latent_dim),
                    (Some(k), None) => {
                        if k >= prior.num_components() {
                            return Err(ExonError::invalid(format!("class {k} out of range")));
                        }
                        Ok(sample_component(&prior, k, rng))
                    }
                    (None, None) => Err(ExonError::invalid(
                        "give --class-a/--class-b or --point-a/--point-b",
                    )),
                }
            };
            let za = resolve_point(class_a, &point_a, &mut rng)?;
            let zb = resolve_point(class_b, &point_b, &mut rng)?;
            let frames = analysis::interpolate(&model, &za, &zb, steps)?;
            let mut index = Vec::new();
            for s in 0..steps {
                let t = s as f64 / (steps - 1) as f64;
                let z: Vec<f64> = (0..za.len())
                    .map(|j| (1.0 - t) * za[j] + t * zb[j])
                    .collect();
                let name = format!("interpolate_{s:03}.png");
                save_png(
                    &out_dir.join(&name),
                    &frames.index_axis(Axis(0), s).to_owned(),
                )?;
                index.push(serde_json::json!({ "file": name, "latent": z }));
            }
            write_manifest(&out_dir, "interpolate", index)?;
            println!("wrote {} frames to {}", steps, out_dir.display());
            Ok(())
        }
        Command::Grid {
            checkpoint,
            points,
            extent,
            common,
        } => {
            let cfg = resolve_config(&common, Some(&checkpoint))?;
            let out_dir = common.out.clone().unwrap_or_else(|| checkpoint.join("grid"));
            snapshot_config(&cfg, &out_dir)?;
            let model = open_checkpoint(&checkpoint)?;
            let prior = cfg.resolved_prior()?;
            let extent = extent.unwrap_or_else(|| trainer::grid_extent(&prior));
            let grid = GridSpec::square(extent, points);
            let images = analysis::grid_generate(&model, &grid)?;
            let coords = grid.points();
            let mut index = Vec::new();
            for (i, (x, y)) in coords.iter().enumerate() {
                let name = format!("grid_{i:04}.png");
                save_png(
                    &out_dir.join(&name),
                    &images.index_axis(Axis(0), i).to_owned(),
                )?;
                index.push(serde_json::json!({ "file": name, "latent": [x, y] }));
            }
            write_manifest(&out_dir, "grid", index)?;
            let nssim = analysis::negative_ssim(&images)?;
            println!(
                "{}",
                serde_json::json!({ "points": points, "extent": extent, "negative_ssim": nssim })
            );
            Ok(())
        }
        Command::Perturb {
            checkpoint,
            class,
            delta,
            noise_range,
            complement,
            common,
        } => {
            let cfg = resolve_config(&common, Some(&checkpoint))?;
            let out_dir = common
                .out
                .clone()
                .unwrap_or_else(|| checkpoint.join("perturb"));
            snapshot_config(&cfg, &out_dir)?;
            let model = open_checkpoint(&checkpoint)?;
            let prior = cfg.resolved_prior()?;
            let split = load_split(&cfg)?;
            if class >= prior.num_components() {
                return Err(ExonError::invalid(format!("class {class} out of range")));
            }
            // activated subspace of the class, estimated on its test images
            let members: Vec<usize> = split
                .test_labels
                .iter()
                .enumerate()
                .filter(|(_, y)| **y == class)
                .map(|(i, _)| i)
                .collect();
            let class_images = take_rows(&split.test_images, &members);
            let vnat = analysis::vnat(&model, &prior, &class_images, class)?;
            let activated = analysis::activated_subspace(&vnat, delta);
            let targets: Vec<usize> = if complement {
                (0..model.arch.latent_dim)
                    .filter(|j| !activated.contains(j))
                    .collect()
            } else {
                activated.clone()
            };
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.training.seed);
            let z = sample_component(&prior, class, &mut rng);
            let (original, perturbed, noise) =
                analysis::perturb_subspace(&model, &z, &targets, noise_range, cfg.training.seed)?;
            save_png(&out_dir.join("perturb_original.png"), &original)?;
            save_png(&out_dir.join("perturb_perturbed.png"), &perturbed)?;
            let index = vec![serde_json::json!({
                "original": "perturb_original.png",
                "perturbed": "perturb_perturbed.png",
                "class": class,
                "delta": delta,
                "complement": complement,
                "activated": activated,
                "perturbed_coordinates": targets,
                "latent": z.to_vec(),
                "noise": noise.to_vec(),
            })];
            write_manifest(&out_dir, "perturb", index)?;
            println!(
                "{}",
                serde_json::json!({
                    "activated": activated.len(),
                    "perturbed_coordinates": targets.len(),
                    "mean_abs_change": mean_abs_change(&original, &perturbed),
                })
            );
            Ok(())
        }
    }
}

fn parse_point(text: &str, d: usize) -> Result<Array1<f64>, ExonError> {
    let vals: Result<Vec<f64>, _> = text.split(',').map(|t| t.trim().parse::<f64>()).collect();
    let vals = vals.map_err(|e| ExonError::invalid(format!("bad latent point: {e}")))?;
    if vals.len() != d {
        return Err(ExonError::invalid(format!(
            "latent point has {} coordinates, model needs {d}",
            vals.len()
        )));
    }
    Ok(Array1::from_vec(vals))
}

fn mean_abs_change(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64
}

/// Write one `[H, W, C]` image in `[-1, 1]` as an 8-bit PNG.
fn save_png(path: &Path, img: &ArrayD<f64>) -> Result<(), ExonError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        other => {
            return Err(ExonError::invalid(format!(
                "cannot write {other}-channel image as png"
            )))
        }
    };
    let mut bytes = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = ((img[[y, x, ch]] + 1.0) * 127.5).round().clamp(0.0, 255.0);
                bytes.push(v as u8);
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| ExonError::Serialization(format!("png: {e}")))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| ExonError::Serialization(format!("png: {e}")))?;
    Ok(())
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    entries: Vec<serde_json::Value>,
) -> Result<(), ExonError> {
    let manifest = serde_json::json!({ "command": command, "images": entries });
    std::fs::write(
        out_dir.join(format!("{command}_manifest.json")),
        serde_json::to_vec_pretty(&manifest)
            .map_err(|e| ExonError::Serialization(e.to_string()))?,
    )?;
    Ok(())
}
