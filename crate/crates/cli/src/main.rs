use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lbhic::container::Container;
use lbhic::metrics::{bd_rate, correlation_study, ms_ssim, psnr, satd, RdPoint};
use lbhic::pipeline::{bits_per_pixel, decode_image, encode_image, EncodeOptions, Model, StageTimings};
use lbhic::raster::Image;
use lbhic::weights::{save_weights, toy_init, ModelConfig};

const DEFAULT_WORKERS: &str = "8";

#[derive(Parser)]
#[command(name = "lbhic", version, about = "Block-based learned image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a PNG into an .lbhc stream.
    Encode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Must match the weights if given.
        #[arg(long, value_parser = ["low", "high"])]
        config: Option<String>,
        #[arg(long, default_value_t = 128)]
        block: usize,
        #[arg(long, env = "LBHIC_THREADS", default_value = DEFAULT_WORKERS)]
        workers: usize,
        /// Do not ask the decoder to postprocess.
        #[arg(long)]
        no_bpm: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode an .lbhc stream into a PNG.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, env = "LBHIC_THREADS", default_value = DEFAULT_WORKERS)]
        workers: usize,
        /// Skip postprocessing even if the stream requests it.
        #[arg(long)]
        no_bpm: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and MS-SSIM between two images.
    Metrics { reference: PathBuf, distorted: PathBuf },
    /// Sum of absolute Hadamard coefficients of an image, or of the
    /// difference to a second image.
    Satd {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        block: usize,
    },
    /// BD-rate of a test RD curve against an anchor (CSV with `bpp,quality`).
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Inter-block pixel correlation table as CSV.
    Correlate {
        #[arg(long, default_value_t = 128)]
        block: usize,
        #[arg(long, default_value_t = 8)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true, num_args = 2..)]
        images: Vec<PathBuf>,
    },
    /// Write deterministic random weights.
    Toygen {
        #[arg(long, value_parser = ["low", "high"], default_value = "low")]
        config: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_png(path: &Path) -> Result<Image> {
    Image::load_png(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading weights {}", path.display()))
}

fn print_timings(t: &StageTimings) {
    let total = t.total().as_secs_f64();
    for (name, d) in t.rows() {
        let s = d.as_secs_f64();
        let share = if total > 0.0 { 100.0 * s / total } else { 0.0 };
        println!("  {name:<24}{s:>10.3} s {share:>6.2}%");
    }
}

fn read_rd_curve(path: &Path) -> Result<Vec<RdPoint>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .with_context(|| format!("{}: missing `{name}` column", path.display()))
    };
    let (bpp_col, q_col) = (column("bpp")?, column("quality")?);
    let mut points = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| -> Result<f64> {
            record
                .get(i)
                .unwrap_or("")
                .trim()
                .parse()
                .with_context(|| format!("{}: bad number on row {}", path.display(), line + 1))
        };
        points.push(RdPoint::new(field(bpp_col)?, field(q_col)?));
    }
    Ok(points)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode {
            input,
            weights,
            config,
            block,
            workers,
            no_bpm,
            out,
        } => {
            let image = load_png(&input)?;
            let model = load_model(&weights)?;
            if let Some(name) = config {
                let want = ModelConfig::from_name(&name)?;
                if want.config_id != model.config.config_id {
                    bail!(
                        "--config {name} but {} holds `{}` weights",
                        weights.display(),
                        model.config.name()
                    );
                }
            }
            let opts = EncodeOptions {
                block_size: block,
                workers,
                bpm: !no_bpm,
            };
            let start = Instant::now();
            let enc = encode_image(&image, &model, &opts).context("encoding")?;
            let wall = start.elapsed();
            let bytes = enc.bytes();
            fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{} bytes, {:.6} bpp ({}x{}, block {block}, {workers} workers, {:.3} s)",
                bytes.len(),
                bits_per_pixel(bytes.len(), image.height(), image.width()),
                image.width(),
                image.height(),
                wall.as_secs_f64()
            );
            print_timings(&enc.timings);
        }
        Command::Decode {
            input,
            weights,
            workers,
            no_bpm,
            out,
        } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let container =
                Container::from_bytes(&bytes).with_context(|| format!("parsing {}", input.display()))?;
            let model = load_model(&weights)?;
            let start = Instant::now();
            let dec = decode_image(&container, &model, workers, container.meta.bpm() && !no_bpm)
                .context("decoding")?;
            let wall = start.elapsed();
            dec.image
                .save_png(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "{}x{}, postprocessing {}, {:.3} s",
                dec.image.width(),
                dec.image.height(),
                if dec.bpm_applied { "on" } else { "off" },
                wall.as_secs_f64()
            );
            print_timings(&dec.timings);
        }
        Command::Metrics { reference, distorted } => {
            let a = load_png(&reference)?;
            let b = load_png(&distorted)?;
            println!("psnr {:.4}", psnr(&a, &b)?);
            println!("ms_ssim {:.6}", ms_ssim(&a, &b)?);
        }
        Command::Satd {
            input,
            reference,
            block,
        } => {
            let a = load_png(&input)?.to_tensor();
            let signal = match reference {
                Some(r) => {
                    let b = load_png(&r)?.to_tensor();
                    if a.dims() != b.dims() {
                        bail!("image sizes differ: {:?} vs {:?}", a.dims(), b.dims());
                    }
                    a.sub(&b)?
                }
                None => a,
            };
            println!("satd {:.6}", satd(&signal.map(|v| v * 255.0), block)?);
        }
        Command::Bdrate { anchor, test } => {
            let value = bd_rate(&read_rd_curve(&anchor)?, &read_rd_curve(&test)?)?;
            println!("bd_rate {value:.4}%");
        }
        Command::Correlate {
            block,
            stride,
            out,
            images,
        } => {
            let images = images.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
            let table = correlation_study(&images, block, stride)?;
            let file = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            table.write_csv(file)?;
            println!(
                "{} pairs from {} blocks, {} skipped",
                table.rows.len(),
                table.samples,
                table.skipped
            );
        }
        Command::Toygen { config, seed, out } => {
            let store = toy_init(&ModelConfig::from_name(&config)?, seed);
            save_weights(&store, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("{} tensors written to {}", store.len(), out.display());
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
