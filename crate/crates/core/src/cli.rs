//! Command-line front end. Every subcommand echoes its resolved settings
//! to stderr and repeats them as `#` comment lines at the top of each CSV
//! it writes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backbone::{
    build_model, count_flops, count_params, load_checkpoint, save_checkpoint, ArchSpec,
    ModelConfig, Variant,
};
use crate::data::{encode_pgm, gen_synthetic, load_dataset_at, load_image, split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::nas::{search, Budget, SearchConfig, SearchSpace, DEFAULT_BETA};
use crate::tensor::{write_rt01, Tensor};
use crate::train::{evaluate, fit, history_csv, TrainConfig};

/// Environment variable naming the default dataset root.
pub const DATA_ENV: &str = "STANET_DATA";

const SPLIT: (f64, f64, f64) = (0.6, 0.2, 0.2);

#[derive(Debug, Parser)]
#[command(
    name = "stanet",
    version,
    about = "Shape-texture attention network toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Training-free architecture search under parameter and MAC budgets.
    Search(SearchArgs),
    /// Instantiate an architecture and print its per-layer costs.
    Build(BuildArgs),
    /// Train on a class-per-directory dataset (60/20/20 split).
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Write the attention maps of every STAM site for a set of images.
    AttnDump(AttnDumpArgs),
    /// Generate the synthetic shape/texture dataset as PPM files.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Search-space TOML; the built-in space when omitted.
    #[arg(long)]
    pub space: Option<PathBuf>,
    #[arg(long, default_value_t = 320_000)]
    pub max_params: u64,
    #[arg(long, default_value_t = 45_000_000)]
    pub max_macs: u64,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight of the depth-uniformity penalty in the score.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Classifier width used when costing candidates.
    #[arg(long, default_value_t = 22)]
    pub classes: usize,
    #[arg(long, default_value = "searched.arch")]
    pub out: PathBuf,
    /// Candidate log CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Architecture table; the shipped one when omitted.
    pub arch: Option<PathBuf>,
    #[arg(long, default_value_t = Variant::SeStam)]
    pub variant: Variant,
    #[arg(long, default_value_t = 22)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Save the freshly initialized model as a checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Architecture table; the shipped one when omitted.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    #[arg(long, default_value_t = Variant::SeStam)]
    pub variant: Variant,
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    /// TOML with any `TrainConfig` fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Seeds the split, initialization, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Split seed; must match the one used for training.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttnDumpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// An image file or a directory searched recursively.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value = "attn")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub per_class: usize,
    #[arg(long, default_value_t = 224)]
    pub side: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search(a) => cmd_search(&a),
        Command::Build(a) => cmd_build(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::AttnDump(a) => cmd_attn_dump(&a),
        Command::GenSynth(a) => cmd_gen_synth(&a),
    }
}

/// `key = value` lines describing one invocation.
#[derive(Default)]
struct Header(String);

impl Header {
    fn new(command: &str) -> Self {
        let mut h = Self::default();
        h.set("command", command);
        h.set("version", env!("CARGO_PKG_VERSION"));
        h
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.0, "{key} = {value}");
        self
    }

    fn extend(&mut self, toml: &str) -> &mut Self {
        self.0 += toml;
        if !toml.ends_with('\n') {
            self.0.push('\n');
        }
        self
    }

    fn echo(&self) {
        eprint!("{}", self.commented());
    }

    fn commented(&self) -> String {
        self.0.lines().map(|l| format!("# {l}\n")).collect()
    }

    fn lines(&self) -> &str {
        &self.0
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_arch(path: Option<&Path>) -> Result<ArchSpec> {
    match path {
        Some(p) => ArchSpec::load(p),
        None => Ok(ArchSpec::stanet()),
    }
}

fn arch_label(path: Option<&Path>) -> String {
    path.map_or_else(|| "built-in".to_string(), |p| p.display().to_string())
}

fn cmd_search(a: &SearchArgs) -> Result<()> {
    let space = match &a.space {
        Some(p) => SearchSpace::load(p)?,
        None => SearchSpace::default(),
    };
    let budget = Budget {
        classes: a.classes,
        ..Budget::new(a.max_params, a.max_macs)
    };
    let cfg = SearchConfig {
        beta: a.beta,
        ..SearchConfig::new(a.iters, a.seed)
    };
    let mut h = Header::new("search");
    h.set(
        "space",
        a.space
            .as_ref()
            .map_or("built-in".into(), |p| p.display().to_string()),
    )
    .set("max_params", a.max_params)
    .set("max_macs", a.max_macs)
    .set("iters", a.iters)
    .set("seed", a.seed)
    .set("beta", a.beta)
    .set("classes", a.classes);
    h.echo();
    let outcome = search(&space, &budget, &cfg)?;
    let text = format!("{}{}", h.commented(), outcome.best.to_text());
    write_file(&a.out, text)?;
    if let Some(log) = &a.log {
        write_file(log, format!("{}{}", h.commented(), outcome.log_csv()))?;
    }
    println!(
        "best score {:.4}  params {}  macs {}  blocks {}  -> {}",
        outcome.best_score,
        outcome.best_params,
        outcome.best_macs,
        outcome.best.blocks.len(),
        a.out.display()
    );
    Ok(())
}

fn millions(v: u64) -> String {
    format!("{:.3}", v as f64 / 1e6)
}

fn cmd_build(a: &BuildArgs) -> Result<()> {
    let spec = load_arch(a.arch.as_deref())?.with_classes(a.classes);
    let mut h = Header::new("build");
    h.set("arch", arch_label(a.arch.as_deref()))
        .set("variant", a.variant)
        .set("classes", a.classes)
        .set("seed", a.seed);
    h.echo();
    let config = ModelConfig::default();
    let model = build_model(&spec, a.variant, &config, a.seed)?;
    let flops = count_flops(&spec, a.variant, &config, spec.input_hw);
    let params = count_params(&model);
    if params.total_params() != flops.total_params() {
        return Err(Error::Arch(format!(
            "enumerated {} parameters but the analytic count is {}",
            params.total_params(),
            flops.total_params()
        )));
    }

    let mut table = format!(
        "{:<24} {:>10} {:>10} {:>10}\n",
        "layer", "params", "MACs(M)", "FLOPs(M)"
    );
    let mut csv = String::from("layer,params,macs,flops\n");
    for l in &flops.layers {
        let p = params.layer(&l.name).map_or(0, |c| c.params);
        let _ = writeln!(
            table,
            "{:<24} {:>10} {:>10} {:>10}",
            l.name,
            p,
            millions(l.macs),
            millions(l.flops())
        );
        let _ = writeln!(csv, "{},{},{},{}", l.name, p, l.macs, l.flops());
    }
    let _ = writeln!(
        table,
        "{:<24} {:>10} {:>10} {:>10}",
        "total",
        params.total_params(),
        millions(flops.total_macs()),
        millions(flops.total_flops())
    );
    let _ = writeln!(
        csv,
        "total,{},{},{}",
        params.total_params(),
        flops.total_macs(),
        flops.total_flops()
    );
    print!("{table}");
    println!(
        "{}: {}M params, {}M MACs, {}M FLOPs (MACs plus elementwise ops)",
        a.variant,
        millions(params.total_params()),
        millions(flops.total_macs()),
        millions(flops.total_flops())
    );
    if let Some(path) = &a.csv {
        write_file(path, format!("{}{csv}", h.commented()))?;
    }
    if let Some(path) = &a.out {
        save_checkpoint(&model, path)?;
    }
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
        cfg.warmup_epochs = cfg.warmup_epochs.min(v as f64);
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr_init = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn split(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    split_dataset(ds, SPLIT, seed)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    let mut spec = load_arch(a.arch.as_deref())?;
    let data = load_dataset_at(&a.data, spec.input_hw)?;
    match spec.num_classes {
        Some(k) if k != data.classes() => {
            return Err(Error::ClassCount {
                model: k,
                data: data.classes(),
            })
        }
        _ => spec = spec.with_classes(data.classes()),
    }
    let (train, val, test) = split(&data, cfg.seed)?;

    let mut h = Header::new("train");
    h.set("arch", arch_label(a.arch.as_deref()))
        .set("variant", a.variant)
        .set("data", a.data.display())
        .set("classes", data.classes())
        .set(
            "split",
            format!("{}/{}/{}", train.len(), val.len(), test.len()),
        )
        .extend(&cfg.to_toml());
    h.echo();

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_file(&a.out.join("config.toml"), cfg.to_toml())?;
    let mut model = build_model(&spec, a.variant, &ModelConfig::default(), cfg.seed)?;
    let history_path = a.out.join("history.csv");
    let mut records = Vec::new();
    let mut io_err = None;
    let val_set = (!val.is_empty()).then_some(&val);
    let outcome = fit(&mut model, &train, val_set, &cfg, Some(&a.out), &mut |r| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  train {:.3}  val {:.3}  val_f1 {:.3}  ema_val {:.3}",
            r.epoch, r.lr, r.train_loss, r.train_acc, r.val_acc, r.val_f1, r.ema_val_acc
        );
        records.push(r.clone());
        if let Err(e) = write_file(&history_path, history_csv(&records, h.lines())) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }

    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs: train acc {:.4}, val acc {:.4}, val macro-F1 {:.4}",
        last.epoch, last.train_acc, last.val_acc, last.val_f1
    );
    if !test.is_empty() {
        let best = load_checkpoint(&a.out.join("best.stck"))?;
        for (name, m) in [("best", &best), ("ema", &outcome.ema)] {
            let e = evaluate(m, &test, cfg.batch_size)?;
            println!(
                "test ({name}): top1 {:.4}  macro_f1 {:.4}",
                e.metrics.accuracy, e.metrics.macro_f1
            );
        }
    }
    println!("checkpoints and history in {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let data = load_dataset_at(&a.data, model.input_hw())?;
    if data.classes() != model.classes() {
        return Err(Error::ClassCount {
            model: model.classes(),
            data: data.classes(),
        });
    }
    let (train, val, test) = split(&data, a.seed)?;
    let (name, set) = match a.split {
        SplitName::Train => ("train", train),
        SplitName::Val => ("val", val),
        SplitName::Test => ("test", test),
        SplitName::All => ("all", data.clone()),
    };
    let mut h = Header::new("eval");
    h.set("ckpt", a.ckpt.display())
        .set("data", a.data.display())
        .set("split", name)
        .set("seed", a.seed)
        .set("items", set.len());
    h.echo();
    if set.is_empty() {
        return Err(Error::InvalidArgument(format!("the {name} split is empty")));
    }
    let e = evaluate(&model, &set, a.batch)?;
    let names = &data.class_names;
    write_file(
        &a.out.join("metrics.csv"),
        format!("{}{}", h.commented(), e.metrics.to_csv(names)),
    )?;
    write_file(
        &a.out.join("confusion.csv"),
        format!("{}{}", h.commented(), e.confusion.to_csv(names)),
    )?;
    println!(
        "top1 {:.4}  macro_f1 {:.4}",
        e.metrics.accuracy, e.metrics.macro_f1
    );
    Ok(())
}

fn image_files(root: &Path) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let rd = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in rd {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.file_name()
                .is_some_and(|n| n.to_string_lossy().starts_with('.'))
            {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no images under {}",
            root.display()
        )));
    }
    Ok(out)
}

/// Rescales a map so its extremes span `[0, 1]`; constant maps become 0.
fn min_max(v: &[f32]) -> Vec<f32> {
    let (lo, hi) = v
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| {
            (l.min(x), h.max(x))
        });
    let span = hi - lo;
    v.iter()
        .map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 })
        .collect()
}

fn cmd_attn_dump(a: &AttnDumpArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let files = image_files(&a.images)?;
    let mut h = Header::new("attn-dump");
    h.set("ckpt", a.ckpt.display())
        .set("images", files.len())
        .set("sites", format!("{:?}", model.stam_blocks()));
    h.echo();
    if model.stam_blocks().is_empty() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint variant `{}` has no STAM sites",
            model.variant
        )));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let root = if a.images.is_file() {
        a.images.parent().unwrap_or(Path::new(""))
    } else {
        &a.images
    };
    let mut written = 0;
    for file in &files {
        let img = load_image(file, model.input_hw())?;
        let side = model.input_hw();
        let batch = img.reshape(&[1, 3, side, side])?;
        let rel = file.strip_prefix(root).unwrap_or(file).with_extension("");
        let stem = rel.to_string_lossy().replace(['/', '\\'], "__");
        for site in model.attention_maps(&batch)? {
            for (kind, map) in [
                ("shape", &site.shape),
                ("texture", &site.texture),
                ("stam", &site.stam),
            ] {
                let [_, _, mh, mw] = *map.dims() else {
                    unreachable!("maps are 4-d")
                };
                let base = a.out.join(format!("{stem}_block{:02}_{kind}", site.block));
                write_file(
                    &base.with_extension("pgm"),
                    encode_pgm(&min_max(map.data()), mh, mw),
                )?;
                let plane = Tensor::new(&[mh, mw], map.data().to_vec())?;
                let mut bytes = Vec::new();
                write_rt01(&plane, &mut bytes).map_err(|e| Error::io(&base, e))?;
                write_file(&base.with_extension("rt"), bytes)?;
                written += 1;
            }
        }
    }
    println!(
        "{written} maps from {} images written to {}",
        files.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut h = Header::new("gen-synth");
    h.set("classes", a.classes)
        .set("per_class", a.per_class)
        .set("side", a.side)
        .set("seed", a.seed);
    h.echo();
    let ds = gen_synthetic(a.classes, a.per_class, a.side, a.seed)?;
    ds.write_ppm_tree(&a.out)?;
    println!(
        "{} images in {} classes written to {}",
        ds.len(),
        ds.classes(),
        a.out.display()
    );
    Ok(())
}
