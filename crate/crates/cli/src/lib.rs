//! The `freqnet` command line: corpus synthesis, training, evaluation,
//! spectrum analysis, input residuals, parameter counts and activation
//! maps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
//! 3 data contract violation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use freqnet_core::data::{
    decode_image, load_corpus, mean_spectrum, replica_positions, synth_corpus, CorpusManifest, Layout, Record,
};
use freqnet_core::freq::{hfri, FilterSpec};
use freqnet_core::model::Model;
use freqnet_core::tensor::io::write_real;
use freqnet_core::train::{evaluate, fake_probability, train, EpochLog};
use freqnet_core::{Error, Result, Tensor};

pub mod config;

use config::{echo, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "freqnet", version, about = "Frequency-domain detector of upsampling artifacts")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic real/fake corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Images per class.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Index of the first image, for disjoint splits.
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
    /// Train a detector and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Initialization and shuffling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a corpus with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report, per-source table and scores here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean log-magnitude spectrum of one class.
    Spectrum {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        class: Class,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// High-frequency residual of one image.
    Hfri {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Working size; defaults to the image's shorter side.
        #[arg(long)]
        size: Option<usize>,
        /// Low-frequency half-width as a fraction of each axis.
        #[arg(long, default_value = "1/4")]
        cut: String,
    },
    /// Print the trainable parameter count of a model configuration.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Class activation map of one image.
    Cam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// File of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, as `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Class {
    Real,
    Fake,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn in_pool<R: Send>(threads: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(f)
}

fn resolve(args: &ConfigArgs, threads: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, args: &ConfigArgs) -> Result<()> {
    for s in &args.set {
        cfg.set_assignment(s)?;
    }
    cfg.validate()
}

fn dispatch(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Synth { out, n, size, seed, start } => {
            let t = threads.unwrap_or(0);
            in_pool(t, || cmd_synth(&out, n, size, seed, start, t))
        }
        Command::Train { cfg, data, out, seed } => {
            let mut run = resolve(&cfg, threads)?;
            if data.is_some() {
                run.data = data;
            }
            if out.is_some() {
                run.out = out;
            }
            if let Some(s) = seed {
                run.set_seed(s);
            }
            apply_overrides(&mut run, &cfg)?;
            in_pool(run.threads, || cmd_train(&run))
        }
        Command::Eval { ckpt, data, out } => {
            let t = threads.unwrap_or(0);
            in_pool(t, || cmd_eval(&ckpt, &data, out.as_deref(), t))
        }
        Command::Spectrum { data, class, n, size, out } => {
            let t = threads.unwrap_or(0);
            in_pool(t, || cmd_spectrum(&data, class, n, size, &out, t))
        }
        Command::Hfri { image, out, size, cut } => {
            let t = threads.unwrap_or(0);
            let cut: FilterSpec = cut.parse()?;
            in_pool(t, || cmd_hfri(&image, &out, size, &cut))
        }
        Command::Params { cfg } => {
            let mut run = resolve(&cfg, threads)?;
            apply_overrides(&mut run, &cfg)?;
            let model = Model::<f32>::new(&run.model)?;
            println!("{}", model.param_count());
            Ok(())
        }
        Command::Cam { ckpt, image, out } => {
            let t = threads.unwrap_or(0);
            in_pool(t, || cmd_cam(&ckpt, &image, &out))
        }
    }
}

fn pairs(items: &[(&str, String)]) -> Vec<(String, String)> {
    items.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn save_image<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => io_err(path, io),
        other => Error::Decode { path: path.to_path_buf(), reason: other.to_string() },
    })
}

fn cmd_synth(out: &Path, n: usize, size: usize, seed: u64, start: usize, threads: usize) -> Result<()> {
    let manifest = synth_corpus(out, n, size, seed, start)?;
    echo(
        out,
        &pairs(&[
            ("synth.out", out.display().to_string()),
            ("synth.n", n.to_string()),
            ("synth.size", size.to_string()),
            ("synth.seed", seed.to_string()),
            ("synth.start", start.to_string()),
            ("run.threads", threads.to_string()),
        ]),
    )?;
    println!("wrote {} images to {}", manifest.records.len(), out.display());
    Ok(())
}

/// A file is read as a `path,label,source` manifest, a directory as
/// `real/` and `fake/` subdirectories.
fn open_corpus(data: &Path) -> Result<CorpusManifest> {
    let layout = if data.is_file() { Layout::Manifest(data.to_path_buf()) } else { Layout::Dirs };
    let manifest = load_corpus(data, &layout)?;
    for line in manifest.rejects_report().lines() {
        eprintln!("warning: skipped {line}");
    }
    Ok(manifest)
}

fn cmd_train(run: &RunConfig) -> Result<()> {
    let data = run.data.as_deref().ok_or_else(|| Error::Config("train needs --data or run.data".into()))?;
    let out = run.out.as_deref().ok_or_else(|| Error::Config("train needs --out or run.out".into()))?;
    let started = Instant::now();
    echo(out, &run.entries())?;
    let dataset = open_corpus(data)?.load_dataset::<f32>(run.model.input_size)?;
    let mut model = Model::<f32>::new(&run.model)?;
    println!("{} images, {} parameters", dataset.len(), model.param_count());
    println!("{}", EpochLog::HEADER);
    let logs = train(&mut model, &dataset, &run.train, |log| println!("{log}"))?;
    model.save(&out.join("checkpoint"))?;
    let mut text = format!("{}\n", EpochLog::HEADER);
    for log in &logs {
        text.push_str(&format!("{log}\n"));
    }
    text.push_str(&format!("# wall_seconds {:.1}\n", started.elapsed().as_secs_f64()));
    write_text(&out.join("train_log.csv"), &text)
}

fn cmd_eval(ckpt: &Path, data: &Path, out: Option<&Path>, threads: usize) -> Result<()> {
    let model = Model::<f32>::load(ckpt)?;
    let manifest = open_corpus(data)?;
    let dataset = manifest.load_dataset::<f32>(model.config().input_size)?;
    let report = evaluate(&model, &dataset)?;
    print!("{}\n{}", report.to_text(), report.per_source_csv());
    if let Some(out) = out {
        echo(
            out,
            &pairs(&[
                ("eval.ckpt", ckpt.display().to_string()),
                ("eval.data", data.display().to_string()),
                ("run.threads", threads.to_string()),
            ]),
        )?;
        write_text(&out.join("report.txt"), &report.to_text())?;
        write_text(&out.join("per_source.csv"), &report.per_source_csv())?;
        let mut scores = String::from("path,label,score\n");
        for (r, s) in manifest.records.iter().zip(&report.scores) {
            scores.push_str(&format!("{},{},{s:.9}\n", r.path.display(), r.label));
        }
        write_text(&out.join("scores.csv"), &scores)?;
    }
    Ok(())
}

fn cmd_spectrum(data: &Path, class: Class, n: usize, size: usize, out: &Path, threads: usize) -> Result<()> {
    let manifest = open_corpus(data)?;
    let label = usize::from(class == Class::Fake);
    let chosen: Vec<Record> = manifest.records.iter().filter(|r| r.label == label).cloned().collect();
    if chosen.len() < n && !chosen.is_empty() {
        eprintln!("warning: asked for {n} images, the class has {}", chosen.len());
    }
    let spectrum = mean_spectrum(&manifest, &chosen, n, size)?;
    let name = format!("{class:?}").to_lowercase();
    echo(
        out,
        &pairs(&[
            ("spectrum.data", data.display().to_string()),
            ("spectrum.class", name.clone()),
            ("spectrum.n", n.to_string()),
            ("spectrum.size", size.to_string()),
            ("run.threads", threads.to_string()),
        ]),
    )?;
    spectrum.save(&out.join("mean_spectrum"))?;
    println!("class = {name}\ncount = {}", spectrum.count);
    println!("row,col,peak_ratio");
    for (r, c) in replica_positions(size) {
        println!("{r},{c},{:.4}", spectrum.peak_ratio(r, c));
    }
    Ok(())
}

fn cmd_hfri(image: &Path, out: &Path, size: Option<usize>, cut: &FilterSpec) -> Result<()> {
    let size = match size {
        Some(s) => s,
        None => {
            let (w, h) = image::image_dimensions(image)
                .map_err(|e| Error::Decode { path: image.to_path_buf(), reason: e.to_string() })?;
            w.min(h) as usize
        }
    };
    let x = decode_image::<f32>(image, size)?.reshape(&[1, 3, size, size])?;
    let residual = hfri(&x, cut)?.reshape(&[3, size, size])?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_real(&out.join("hfri.fqt"), &residual)?;
    save_image(&residual_image(&residual), &out.join("hfri.png"))?;
    let rms = (residual.sum_sq() / residual.numel() as f32).sqrt();
    println!("size = {size}\ncut = {cut}\nrms = {rms:.6}");
    Ok(())
}

/// Residual magnitude per channel, clamped to [0, 1].
fn residual_image(r: &Tensor<f32>) -> image::RgbImage {
    let s = r.shape()[1];
    let d = r.data();
    image::RgbImage::from_fn(s as u32, s as u32, |x, y| {
        let p = y as usize * s + x as usize;
        let px = |ch: usize| (d[ch * s * s + p].abs().min(1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn cmd_cam(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let model = Model::<f32>::load(ckpt)?;
    let s = model.config().input_size;
    let x = decode_image::<f32>(image, s)?;
    let logits = model.logits(&x.clone().reshape(&[1, 3, s, s])?)?;
    let p = fake_probability(logits.data());
    let map = model.cam(&x)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_real(&out.join("cam.fqt"), &map)?;
    let img = image::GrayImage::from_fn(s as u32, s as u32, |c, r| {
        image::Luma([(map.data()[r as usize * s + c as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    save_image(&img, &out.join("cam.png"))?;
    let class = if p >= 0.5 { "fake" } else { "real" };
    println!("class = {class}\nfake_probability = {p:.6}");
    Ok(())
}
