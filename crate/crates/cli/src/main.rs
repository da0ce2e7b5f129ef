//! `mkanet` command-line tool.
//!
//! Exit codes: 0 success, 2 I/O or file-format error, 3 validation error
//! (bad flags, config, data or checkpoint mismatch), 4 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use mkanet::backbone::NetConfig;
use mkanet::boundary::sobel_boundary_target;
use mkanet::checkpoint::Checkpoint;
use mkanet::config::RunConfig;
use mkanet::dataset::{list_files, Dataset};
use mkanet::metrics::ConfusionMatrix;
use mkanet::mka::{mka_param_count, MkaConfig, MkaModule};
use mkanet::model::{argmax, complexity, measured_complexity, Model, Purpose};
use mkanet::param::ParamStore;
use mkanet::pnm::{read_image, read_mask, write_mask};
use mkanet::synth::synth_dataset;
use mkanet::tiling::{infer_whole, tiled_logits};
use mkanet::train::{log_csv, train};
use mkanet::{Error, Tensor};

#[derive(Parser)]
#[command(name = "mkanet", version, about = "Kernel-sharing atrous segmentation networks on the CPU")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the Sobel boundary target of a mask.
    GenBoundary {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory and keep the best checkpoint.
    Train {
        /// key = value run configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (images/, masks/, palette.txt).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Config override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Predict a mask for one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tile side; whole-image inference when absent.
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long, default_value_t = 32)]
        overlap: usize,
        /// CSV of per-pixel class probabilities.
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Per-class IoU and F1 of predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Class count; read from palette.txt next to the ground truth when absent.
        #[arg(long = "K")]
        classes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter count, MACs and wall time per image.
    Bench {
        /// Comma-separated variants.
        #[arg(long, default_value = "small,base,large")]
        variant: String,
        #[arg(long, default_value_t = 512)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        #[arg(long = "K", default_value_t = 6)]
        classes: usize,
    },
    /// Per-block parameter table, self-checked against the closed forms.
    Params {
        #[arg(long, default_value = "small")]
        variant: String,
        #[arg(long)]
        c: Option<usize>,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long = "K", default_value_t = 6)]
        classes: usize,
        /// Also check a standalone module with this many channels.
        #[arg(long = "N")]
        n: Option<usize>,
    },
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long = "K", default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Io(String),
    Invalid(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) | Error::Format(_) => Failure::Io(msg),
            Error::NonFinite(_) => Failure::Numeric(msg),
            Error::Shape(_) | Error::Config(_) | Error::Data(_) | Error::Checkpoint(_) => Failure::Invalid(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn gen_boundary(mask: &Path, d: usize, out: &Path) -> Outcome {
    let y = read_mask(mask)?;
    write_mask(out, &sobel_boundary_target(&y, d)?)?;
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, log: Option<&Path>, set: &[String]) -> Outcome {
    let mut run = match config {
        Some(p) => RunConfig::parse_text(&fs::read_to_string(p)?)
            .map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Invalid(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        run.set(k.trim(), v)?;
    }
    let dataset = Dataset::load(data)?;
    if run.classes.is_none() {
        run.classes = Some(dataset.classes());
    }
    let cfg = run.train_config()?;
    let outcome = train(&cfg, &dataset, |e| {
        eprintln!(
            "epoch {:>4}  l_m {:.4}  l_a {:.4}  l_b {:.4}  lr {:.2e}  miou {:.4}",
            e.epoch, e.l_m, e.l_a, e.l_b, e.lr, e.train_miou
        )
    })?;
    outcome.best.save(out)?;
    if let Some(p) = log {
        fs::write(p, log_csv(&outcome.log))?;
    }
    eprintln!("best epoch {} (train miou {:.4}) -> {}", outcome.best_epoch, outcome.best_miou, out.display());
    Ok(())
}

fn cmd_infer(ckpt: &Path, image: &Path, out: &Path, tile: Option<usize>, overlap: usize, probs: Option<&Path>) -> Outcome {
    let model: Model<f32> = Checkpoint::load(ckpt)?.into_model()?;
    let x: Tensor<f32> = read_image(image)?.to_tensor();
    let logits = match tile {
        Some(t) => tiled_logits(&model, &x, t, overlap)?,
        None => infer_whole(&model, &x)?,
    };
    write_mask(out, &argmax(&logits)[0])?;
    if let Some(p) = probs {
        let [_, k, h, w] = logits.dims();
        let mut s = String::from("y,x");
        for c in 0..k {
            let _ = write!(s, ",p{c}");
        }
        s.push('\n');
        for y in 0..h {
            for xx in 0..w {
                let z: Vec<f64> = (0..k).map(|c| logits.at(0, c, y, xx)).collect();
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = e.iter().sum();
                let _ = write!(s, "{y},{xx}");
                for v in e {
                    let _ = write!(s, ",{:?}", v / sum);
                }
                s.push('\n');
            }
        }
        fs::write(p, s)?;
    }
    Ok(())
}

/// Mask directory of a dataset, or the directory itself.
fn mask_dir(dir: &Path) -> PathBuf {
    let masks = dir.join("masks");
    if masks.is_dir() {
        masks
    } else {
        dir.to_path_buf()
    }
}

fn cmd_eval(pred: &Path, gt: &Path, classes: Option<usize>, out: Option<&Path>) -> Outcome {
    let classes = match classes {
        Some(k) => k,
        None => {
            let palette = [gt.join("palette.txt"), gt.join("../palette.txt")]
                .into_iter()
                .find(|p| p.is_file())
                .ok_or_else(|| Failure::Invalid("no palette.txt next to the ground truth; pass --K".into()))?;
            mkanet::palette::Palette::parse(&fs::read_to_string(palette)?)?.len()
        }
    };
    let gt_dir = mask_dir(gt);
    let pred_dir = mask_dir(pred);
    let mut cm = ConfusionMatrix::new(classes);
    let files = list_files(&gt_dir, "pgm")?;
    if files.is_empty() {
        return Err(Failure::Invalid(format!("{}: no .pgm masks", gt_dir.display())));
    }
    for g in files {
        let name = g.file_name().expect("listed file");
        let p = pred_dir.join(name);
        if !p.is_file() {
            return Err(Failure::Invalid(format!("no prediction for {}", name.to_string_lossy())));
        }
        let (gm, pm) = (read_mask(&g)?, read_mask(&p)?);
        cm.accumulate(&pm, &gm)
            .map_err(|e| Failure::Invalid(format!("{}: {e}", name.to_string_lossy())))?;
    }
    let (iou, f1) = (cm.miou(), cm.mf1());
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:?}"));
    let mut s = String::from("class,iou,f1\n");
    for c in 0..classes {
        let _ = writeln!(s, "{c},{},{}", fmt(iou.per_class[c]), fmt(f1.per_class[c]));
    }
    let _ = writeln!(s, "mean,{:?},{:?}", iou.mean, f1.mean);
    emit(out, &s)
}

fn cmd_bench(variants: &str, size: usize, repeat: usize, classes: usize) -> Outcome {
    if repeat == 0 {
        return Err(Failure::Invalid("--repeat must be >= 1".into()));
    }
    let mut s = String::from("variant,size,params,macs,min_s,median_s\n");
    for v in variants.split(',').map(str::trim) {
        let cfg = NetConfig::from_variant(v, classes)?;
        let report = complexity(&cfg, size, size, Purpose::Inference)?;
        let model = Model::<f32>::new(&cfg, Purpose::Inference, 0)?;
        let x = Tensor::<f32>::full([1, 3, size, size], 0.5);
        let mut times: Vec<f64> = (0..repeat)
            .map(|_| {
                let t = Instant::now();
                model.infer_logits(&x).map(|_| t.elapsed().as_secs_f64())
            })
            .collect::<Result<_, _>>()?;
        times.sort_by(f64::total_cmp);
        let _ = writeln!(
            s,
            "{v},{size},{},{},{:.6},{:.6}",
            report.total_params(),
            report.total_macs(),
            times[0],
            times[times.len() / 2]
        );
    }
    emit(None, &s)
}

fn cmd_params(variant: &str, c: Option<usize>, r: Option<usize>, m: Option<usize>, classes: usize, n: Option<usize>) -> Outcome {
    let mut cfg = NetConfig::from_variant(variant, classes)?;
    cfg.width = c.unwrap_or(cfg.width);
    cfg.repeats = r.unwrap_or(cfg.repeats);
    cfg.branches = m.unwrap_or(cfg.branches);
    cfg.validate()?;
    let size = 64;
    let formula = complexity(&cfg, size, size, Purpose::Train)?;
    let model = Model::<f32>::new(&cfg, Purpose::Train, 0)?;
    let counted = measured_complexity(&model, size, size)?;

    let mut s = String::from("block,channels,params,conv_weights,mka_counted,mka_formula,part1,part2,part3,ok\n");
    let mut ok_all = true;
    let channels = cfg.stage_channels();
    for (i, (f, k)) in formula.blocks.iter().zip(&counted.blocks).enumerate() {
        let (ch, parts) = if i < 5 {
            let p = mka_param_count(MkaConfig::new(channels[i], cfg.branches));
            let rep = if i >= 2 { cfg.repeats } else { 0 };
            (channels[i].to_string(), [p.part1 * rep, p.part2 * rep, p.part3 * rep])
        } else {
            (String::new(), [0; 3])
        };
        let ok = f.params == k.params && f.conv_weights == k.conv_weights && f.mka_conv_weights == k.mka_conv_weights
            && k.mka_conv_weights == parts.iter().sum::<usize>();
        ok_all &= ok;
        let _ = writeln!(
            s,
            "{},{ch},{},{},{},{},{},{},{},{ok}",
            k.name, k.params, k.conv_weights, k.mka_conv_weights, f.mka_conv_weights, parts[0], parts[1], parts[2]
        );
    }
    if let Some(n) = n {
        let mut store = ParamStore::<f32>::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let module = MkaModule::new(&mut store, &mut rng, "mka", MkaConfig::new(n, cfg.branches));
        let got = module.conv_weight_count(&store);
        let p = mka_param_count(MkaConfig::new(n, cfg.branches));
        let ok = got == p.total;
        ok_all &= ok;
        let _ = writeln!(
            s,
            "mka,{n},{},{got},{got},{},{},{},{},{ok}",
            store.count_where(|q| q.trainable),
            p.total,
            p.part1,
            p.part2,
            p.part3
        );
    }
    let _ = writeln!(s, "total,,{},{},,,,,,{ok_all}", counted.total_params(), formula.total_params());
    print!("{s}");
    if ok_all {
        Ok(())
    } else {
        Err(Failure::Numeric("counted parameters differ from the closed forms".into()))
    }
}

fn cmd_synth(n: usize, size: usize, classes: usize, seed: u64, out: &Path) -> Outcome {
    let set = synth_dataset(n, size, classes, seed)?;
    set.dataset.save(out)?;
    eprintln!(
        "{n} images of {size}x{size}, K={classes}, thin-structure boundary share {:.3}",
        set.thin_boundary_fraction()
    );
    Ok(())
}

fn threads_from_env() -> Result<Option<usize>, Failure> {
    match std::env::var("MKANET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Failure::Invalid(format!("MKANET_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Invalid(e.to_string()))?;
    }
    match cli.cmd {
        Cmd::GenBoundary { mask, d, out } => gen_boundary(&mask, d, &out),
        Cmd::Train {
            config,
            data,
            out,
            log,
            set,
        } => cmd_train(config.as_deref(), &data, &out, log.as_deref(), &set),
        Cmd::Infer {
            ckpt,
            image,
            out,
            tile,
            overlap,
            probs,
        } => cmd_infer(&ckpt, &image, &out, tile, overlap, probs.as_deref()),
        Cmd::Eval { pred, gt, classes, out } => cmd_eval(&pred, &gt, classes, out.as_deref()),
        Cmd::Bench {
            variant,
            size,
            repeat,
            classes,
        } => cmd_bench(&variant, size, repeat, classes),
        Cmd::Params {
            variant,
            c,
            r,
            m,
            classes,
            n,
        } => cmd_params(&variant, c, r, m, classes, n),
        Cmd::Synth {
            n,
            size,
            classes,
            seed,
            out,
        } => cmd_synth(n, size, classes, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(3),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(4)
        }
    }
}
