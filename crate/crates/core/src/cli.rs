//! `wsol` command line: dataset generation, training, evaluation, map export
//! and the attention-gradient self-check.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 I/O or file format
//! error, 3 validation failure (shape mismatch, failed gradient check).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attribution::{self, MapSource};
use crate::config::RunConfig;
use crate::dataset::{self, Split};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::image_io::{self, RawImage};
use crate::metrics::{self, BBox};
use crate::model::{checkpoint, ModelConfig, Vit};
use crate::tensor::Tensor;
use crate::trainer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

/// Gradient check tolerance on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "wsol", version, about = "Weakly supervised localization with vision transformers")]
struct Cli {
    /// Worker threads for per-image and per-sample work (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for the model, training and dataset.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a classifier on a dataset's train split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score localization maps on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// ar, gar or lrp.
        #[arg(long)]
        method: Option<String>,
        /// ground_truth, predicted or protocol.
        #[arg(long)]
        class_source: Option<String>,
        #[arg(long)]
        tau_steps: Option<usize>,
        /// largest or all.
        #[arg(long)]
        policy: Option<String>,
    },
    /// Export the localization map of one image.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        method: Option<String>,
        /// Target class (default: predicted).
        #[arg(long)]
        class: Option<usize>,
        /// Binarization threshold for the overlay box.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Compare analytic attention gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        /// Drop the softmax Jacobian term (negative control).
        #[arg(long)]
        sabotage: bool,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Shape(_) | Error::InvalidArgument(_) => EXIT_VALIDATION,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        // fails only when a pool already exists, as in repeated in-process runs
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Train { common, data } => train(&common, &data),
        Command::Eval {
            common,
            data,
            checkpoint,
            split,
            method,
            class_source,
            tau_steps,
            policy,
        } => {
            let mut extra = Vec::new();
            let mut push = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    extra.push((k.to_string(), v));
                }
            };
            push("method", method);
            push("class_source", class_source);
            push("tau_steps", tau_steps.map(|t| t.to_string()));
            push("component_policy", policy);
            eval(&common, &data, &checkpoint, &split, &extra)
        }
        Command::Explain {
            common,
            image,
            checkpoint,
            method,
            class,
            tau,
        } => explain(&common, &image, &checkpoint, method, class, tau),
        Command::Gradcheck { common, eps, sabotage } => gradcheck(&common, eps, sabotage),
    }
}

fn load_config(common: &Common, base: RunConfig, extra: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (line, k, v) in crate::kv::parse(&text, path)? {
            cfg.set(&k, &v).map_err(|e| Error::Parse {
                path: path.clone(),
                line,
                msg: e.to_string(),
            })?;
        }
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(common: &Common) -> Result<i32> {
    let cfg = load_config(common, RunConfig::default(), &[])?;
    cfg.data.validate()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let summary = dataset::generate(&cfg.data, &out)?;
    println!("wrote {} train and {} test images to {}", summary.train, summary.test, out.display());
    for (class, n) in summary.per_class.iter().enumerate() {
        println!("class {class} ({}): {n}", dataset::Shape::for_class(class));
    }
    Ok(EXIT_OK)
}

/// Takes `num_classes` and `image_size` from the dataset unless the config
/// sets them, in which case they must agree.
fn adopt_dataset_shape(cfg: &mut RunConfig, spec: &dataset::DatasetSpec) -> Result<()> {
    for (key, ours, theirs) in [
        ("num_classes", cfg.model.num_classes, spec.num_classes),
        ("image_size", cfg.model.image_size, spec.image_size),
    ] {
        if ours != theirs && cfg.is_set(key) {
            return Err(Error::Shape(format!("config sets {key}={ours} but the dataset has {theirs}")));
        }
    }
    cfg.model.num_classes = spec.num_classes;
    cfg.model.image_size = spec.image_size;
    Ok(())
}

fn train(common: &Common, data: &Path) -> Result<i32> {
    let mut cfg = load_config(common, RunConfig::default(), &[])?;
    let (spec, samples) = dataset::load_split(&dataset::split_dir(data, Split::Train))?;
    adopt_dataset_shape(&mut cfg, &spec)?;
    cfg.validate()?;
    let out = out_dir(common, "run")?;
    write(&out.join("config.txt"), &cfg.render())?;
    println!(
        "training on {} images, {} epochs, p-ADL {}",
        samples.len(),
        cfg.train.epochs,
        if cfg.train.padl_enabled { "on" } else { "off" }
    );
    let outcome = trainer::train_to_dir(&cfg.model, &cfg.train, &samples, &out, |e| {
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  acc {:.2}",
            e.epoch, e.lr, e.train_loss, e.train_acc
        );
    })?;
    println!(
        "wrote {} ({} parameters)",
        out.join(trainer::CHECKPOINT_FILE).display(),
        outcome.model.params.parameter_count()
    );
    Ok(EXIT_OK)
}

/// Model keys set explicitly in the config must match the checkpoint.
fn check_against_checkpoint(cfg: &RunConfig, model: &ModelConfig) -> Result<()> {
    let ours = cfg.model.to_pairs();
    for (k, v) in model.to_pairs() {
        if k == "seed" || !cfg.is_set(k) {
            continue;
        }
        let mine = &ours.iter().find(|p| p.0 == k).expect("same keys").1;
        if *mine != v {
            return Err(Error::Shape(format!("config sets {k}={mine} but the checkpoint has {k}={v}")));
        }
    }
    Ok(())
}

fn eval(common: &Common, data: &Path, ckpt: &Path, split: &str, extra: &[(String, String)]) -> Result<i32> {
    let cfg = load_config(common, RunConfig::default(), extra)?;
    cfg.validate()?;
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        s => return Err(Error::Config(format!("unknown split {s:?} (train, test)"))),
    };
    let vit = checkpoint::load(ckpt)?;
    check_against_checkpoint(&cfg, &vit.config)?;
    let (_, samples) = dataset::load_split(&dataset::split_dir(data, split))?;
    let report = trainer::evaluate(&vit, &samples, &cfg.eval)?;
    let out = out_dir(common, "eval")?;
    write(&out.join("report.txt"), &report.to_text())?;
    write(&out.join("report.tsv"), &report.to_tsv())?;
    print!("{}", report.to_text());
    Ok(EXIT_OK)
}

fn map_tsv(grid: &Tensor) -> String {
    let n = grid.shape()[1];
    let mut s = String::new();
    for row in grid.data().chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        let _ = writeln!(s, "{}", cells.join("\t"));
    }
    s
}

/// Black → red → yellow → white.
fn heat_color(v: f64) -> [f64; 3] {
    [(3.0 * v).clamp(0.0, 1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// Image blended with the heat colors, with `bbox` outlined in green.
pub fn overlay(image: &Tensor, heat: &Tensor, bbox: Option<BBox>) -> Result<RawImage> {
    let (h, w) = heat.dims2()?;
    if image.shape() != [h, w, 3] {
        return Err(Error::shape("overlay image and map sizes differ"));
    }
    let mut px = Vec::with_capacity(h * w * 3);
    for (i, &v) in heat.data().iter().enumerate() {
        let c = heat_color(v);
        for k in 0..3 {
            px.push(0.5 * image.data()[3 * i + k] + 0.5 * c[k]);
        }
    }
    if let Some(b) = bbox {
        let mut paint = |x: usize, y: usize| {
            px[3 * (y * w + x)..3 * (y * w + x) + 3].copy_from_slice(&[0.0, 1.0, 0.0]);
        };
        for x in b.x0..b.x1 {
            paint(x, b.y0);
            paint(x, b.y1 - 1);
        }
        for y in b.y0..b.y1 {
            paint(b.x0, y);
            paint(b.x1 - 1, y);
        }
    }
    RawImage::from_tensor(&Tensor::from_parts(vec![h, w, 3], px))
}

fn explain(
    common: &Common,
    image_path: &Path,
    ckpt: &Path,
    method: Option<String>,
    class: Option<usize>,
    tau: f64,
) -> Result<i32> {
    let extra: Vec<(String, String)> = method.into_iter().map(|m| ("method".to_string(), m)).collect();
    let cfg = load_config(common, RunConfig::default(), &extra)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("--tau {tau} outside [0, 1]")));
    }
    let vit = checkpoint::load(ckpt)?;
    check_against_checkpoint(&cfg, &vit.config)?;
    if let Some(c) = class.filter(|&c| c >= vit.config.num_classes) {
        return Err(Error::Shape(format!("class {c} but the checkpoint has {} classes", vit.config.num_classes)));
    }
    let n = vit.config.image_size;
    let image = image_io::read_image(image_path, Some((n, n)))?;
    let ex = attribution::explain(&vit, &image, class, &cfg.eval.map)?;
    let heat = metrics::normalize_map(&attribution::upsample_map(&ex.map.grid, n)?);
    let bbox = metrics::box_from_mask(&metrics::binarize(&heat, tau)?);

    let out = out_dir(common, "explain")?;
    write(&out.join("map.tsv"), &map_tsv(&ex.map.grid))?;
    image_io::write_pgm(&out.join("heatmap.pgm"), &heat)?;
    image_io::write(&out.join("overlay.ppm"), &overlay(&image, &heat, bbox)?)?;

    let target = match (ex.map.source, ex.map.target_class) {
        (MapSource::Ar, _) => "none (class-agnostic)".to_string(),
        (_, Some(c)) => c.to_string(),
        (_, None) => ex.predicted.to_string(),
    };
    println!("predicted class {}  map {}  target {target}", ex.predicted, ex.map.source);
    match bbox {
        Some(b) => println!("box at tau={tau}: {b}"),
        None => println!("box at tau={tau}: none (empty mask)"),
    }
    println!("wrote {}", out.display());
    Ok(EXIT_OK)
}

fn gradcheck(common: &Common, eps: f64, sabotage: bool) -> Result<i32> {
    let mut base = RunConfig::default();
    base.model = ModelConfig::toy();
    let cfg = load_config(common, base, &[])?;
    cfg.model.validate()?;
    let vit = Vit::new(cfg.model.clone())?;
    let image = gradcheck::random_image(&cfg.model, cfg.model.seed);
    let (k, h, s) = (cfg.model.depth, cfg.model.heads, cfg.model.seq_len());
    println!("toy model: K={k} d={} h={h} s={s}  eps={eps:e}", cfg.model.embed_dim);
    let mut worst: Option<(usize, gradcheck::Comparison)> = None;
    for class in 0..cfg.model.num_classes {
        let report = gradcheck::check(&vit, &image, class, cfg.eval.map.grad_target, eps, sabotage)?;
        if class == 0 {
            for (b, g) in report.analytic.blocks().iter().enumerate() {
                println!("block {b}: gradient {:?}", g.shape());
            }
        }
        let c = report.comparison;
        println!("class {class}: max rel error {:.3e}  max abs error {:.3e}", c.max_rel_error, c.max_abs_error);
        if worst.as_ref().is_none_or(|w| c.max_rel_error > w.1.max_rel_error) {
            worst = Some((class, c));
        }
    }
    let (class, c) = worst.expect("at least one class");
    println!("max rel error {:.3e} (tolerance {GRADCHECK_TOL:e})", c.max_rel_error);
    if c.max_rel_error < GRADCHECK_TOL {
        println!("PASS");
        return Ok(EXIT_OK);
    }
    match c.worst {
        Some(e) => println!(
            "FAIL: worst entry class {class} block {} head {} ({}, {})",
            e.block, e.head, e.row, e.col
        ),
        None => println!("FAIL"),
    }
    Ok(EXIT_VALIDATION)
}
