//! Subcommands of the `fovdit` binary. Each returns the text it prints on stdout.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fovdit_core::bench::{measure, predict_flops};
use fovdit_core::generate::{evaluate_pair, psnr, timed, Generator, SampleConfig};
use fovdit_core::mask::{
    centered_for_ratio, from_bboxes, from_saliency, load_mask, make_circle, make_rect, make_trajectory, save_mask, union, BBox,
    ControlPoint, FoveationMask, GrayMap,
};
use fovdit_core::pnm;
use fovdit_core::tokenizer::{Image, TokenLayout};
use fovdit_core::train::{Checkpoint, MaskStrategy, Trainer};
use fovdit_core::Error;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "fovdit", version, about = "Mask-driven mixed-resolution diffusion transformer")]
pub struct Cli {
    /// Worker threads for data-parallel work (recorded in reports).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a foveation mask, write it as PGM and print its token statistics.
    Mask(MaskArgs),
    /// Train a model from a JSON run config.
    Train(TrainArgs),
    /// Generate an image from a checkpoint.
    Sample(SampleArgs),
    /// Foveated vs naive vs full-resolution triptychs plus an evaluation CSV.
    Compare(CompareArgs),
    /// Forward-pass timing sweep over token ratios.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Latent grid extents, e.g. 16x16.
    #[arg(long, value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 1)]
    pub frames: usize,
    /// cy,cx,r in latent cells.
    #[arg(long, group = "shape")]
    pub circle: Option<String>,
    /// y0,x0,y1,x1 (half-open).
    #[arg(long, group = "shape")]
    pub rect: Option<String>,
    /// Comma-separated mask files to OR together.
    #[arg(long, group = "shape")]
    pub union: Option<String>,
    /// Grayscale saliency map (PGM); needs --budget.
    #[arg(long, group = "shape", requires = "budget")]
    pub saliency: Option<PathBuf>,
    /// Fraction of 2x2 blocks kept at high resolution.
    #[arg(long)]
    pub budget: Option<f64>,
    /// Text file with one `y0 x0 y1 x1` box per line.
    #[arg(long, group = "shape")]
    pub bboxes: Option<PathBuf>,
    /// Control points `frame:cy:cx:r` separated by `;`.
    #[arg(long, group = "shape")]
    pub trajectory: Option<String>,
    /// Centered block mask with the token ratio closest to this value.
    #[arg(long, group = "shape")]
    pub ratio: Option<f64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for model.ckpt and loss.csv.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Continue from this checkpoint (its optimizer state and step count).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Foveated,
    Naive,
    Full,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Mask file (PGM, or `<stem>_NNN.pgm` frames); defaults to the config's mask section or all ones.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// `naive` expects a checkpoint trained at full resolution.
    #[arg(long, value_enum, default_value_t = Mode::Foveated)]
    pub mode: Mode,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Checkpoint trained on foveated targets.
    #[arg(long)]
    pub foveated: PathBuf,
    /// Checkpoint trained at full resolution (drives the naive and full paths).
    #[arg(long)]
    pub full: PathBuf,
    /// Comma-separated mask files.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub masks: Vec<PathBuf>,
    /// Comma-separated seeds; empty gives a header-only CSV.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub seeds: Vec<u64>,
    /// Class for every sample; by default classes cycle with the seed.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model to time; a freshly initialized model from --config otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated token ratios; the first should be 1.0.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Validation(msg.into()).into()
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW")?;
    Ok((h.trim().parse().map_err(|_| "bad height")?, w.trim().parse().map_err(|_| "bad width")?))
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split([',', ':'])
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| invalid(format!("{what}: cannot parse {s:?}")))?;
    if v.len() != n || v.iter().any(|x| !x.is_finite()) {
        return Err(invalid(format!("{what}: expected {n} finite numbers, got {s:?}")));
    }
    Ok(v)
}

fn parse_usizes(s: &str, n: usize, what: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| invalid(format!("{what}: cannot parse {s:?}")))?;
    if v.len() != n {
        return Err(invalid(format!("{what}: expected {n} integers, got {s:?}")));
    }
    Ok(v)
}

pub fn parse_trajectory(s: &str) -> Result<Vec<ControlPoint>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let v = parse_floats(p, 4, "trajectory point")?;
            if v[0] < 0.0 || v[0].fract() != 0.0 {
                return Err(invalid(format!("trajectory frame must be a non-negative integer, got {}", v[0])));
            }
            Ok(ControlPoint { frame: v[0] as usize, cy: v[1], cx: v[2], r: v[3] })
        })
        .collect()
}

pub fn parse_bboxes(text: &str) -> Result<Vec<BBox>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap().trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v = parse_usizes(l, 4, "bbox")?;
            Ok((v[0], v[1], v[2], v[3]))
        })
        .collect()
}

pub fn stats_line(mask: &FoveationMask) -> String {
    let s = mask.sequence_length();
    format!("m={} L={} ratio={:.3}", s.m, s.l, s.ratio)
}

pub fn cmd_mask(args: &MaskArgs) -> Result<String> {
    let (h, w) = args.size;
    let f = args.frames;
    let stack = |m: FoveationMask| FoveationMask::stack(&vec![m; f]);
    let mut notes = String::new();
    let mask = if let Some(c) = &args.circle {
        let v = parse_floats(c, 3, "--circle")?;
        if !(0.0..=h as f64).contains(&v[0]) || !(0.0..=w as f64).contains(&v[1]) {
            return Err(invalid("circle center outside the grid"));
        }
        stack(make_circle(h, w, (v[0], v[1]), v[2])?)?
    } else if let Some(r) = &args.rect {
        let v = parse_usizes(r, 4, "--rect")?;
        stack(make_rect(h, w, (v[0], v[1]), (v[2], v[3]))?)?
    } else if let Some(u) = &args.union {
        let parts = u.split(',').map(|p| load_mask(Path::new(p.trim()))).collect::<fovdit_core::Result<Vec<_>>>()?;
        union(&parts)?
    } else if let Some(p) = &args.saliency {
        let (g, _) = pnm::read_pgm(p)?;
        stack(from_saliency(&GrayMap::from_gray8(&g), h, w, args.budget.unwrap())?)?
    } else if let Some(p) = &args.bboxes {
        let boxes = parse_bboxes(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
        let (m, dropped) = from_bboxes(h, w, &boxes)?;
        if !dropped.is_empty() {
            let _ = writeln!(notes, "dropped zero-area boxes {dropped:?}");
        }
        stack(m)?
    } else if let Some(t) = &args.trajectory {
        make_trajectory(f, h, w, &parse_trajectory(t)?)?
    } else if let Some(r) = args.ratio {
        stack(centered_for_ratio(h, w, r)?)?
    } else {
        return Err(invalid("one of --circle, --rect, --union, --saliency, --bboxes, --trajectory, --ratio is required"));
    };
    if (mask.height(), mask.width()) != (h, w) {
        return Err(invalid(format!("mask is {}x{}, expected {h}x{w}", mask.height(), mask.width())));
    }
    let mut out = notes;
    if let Some(path) = &args.out {
        for p in save_mask(&mask, path)? {
            let _ = writeln!(out, "wrote {}", p.display());
        }
    }
    let s = mask.sequence_length();
    if mask.frames() > 1 {
        let _ = writeln!(out, "per_frame_L={:?}", s.per_frame_l);
    }
    let _ = writeln!(out, "{}", stats_line(&mask));
    Ok(out)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => RunConfig::parse("{}"),
    }
}

pub fn cmd_train(args: &TrainArgs, threads: usize) -> Result<String> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut trainer = match &args.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.meta.model != cfg.model {
                return Err(invalid("resume checkpoint was trained with a different model config"));
            }
            Trainer::resume(&ck, cfg.train.clone())?
        }
        None => Trainer::new(cfg.train.clone(), cfg.model.clone())?,
    };
    trainer.dump_path = Some(args.out.join("dump.ckpt"));
    let csv_path = args.out.join("loss.csv");
    let mut csv = if args.resume.is_some() && csv_path.exists() {
        fs::read_to_string(&csv_path)?
    } else {
        format!("# threads={threads}\nstep,loss\n")
    };
    let every = cfg.train.checkpoint_every;
    let out_dir = args.out.clone();
    let total = cfg.train.steps;
    let result = trainer.run(|tr, step, loss| {
        let _ = writeln!(csv, "{step},{loss:.7}");
        if step % 100 == 0 || step == total {
            eprintln!("step {step}/{total} loss {loss:.5}");
        }
        if every > 0 && step % every == 0 && step < total {
            tr.checkpoint().save(&out_dir.join(format!("step_{step:06}.ckpt")))?;
        }
        Ok(())
    });
    fs::write(&csv_path, &csv)?;
    result?;
    let path = args.out.join("model.ckpt");
    trainer.checkpoint().save(&path)?;
    Ok(format!("wrote {} (step {})\nwrote {}\n", path.display(), trainer.step, csv_path.display()))
}

/// Latent extents of the images a checkpoint was trained on.
fn latent_extents(ck: &Checkpoint) -> Result<(usize, usize)> {
    Ok(ck.meta.model.codec.latent_extents(ck.meta.train.data.height, ck.meta.train.data.width)?)
}

fn write_frames(images: &[Image<f64>], path: &Path) -> Result<Vec<PathBuf>> {
    let paths = fovdit_core::mask::frame_paths(path, images.len());
    for (img, p) in images.iter().zip(&paths) {
        pnm::write_ppm(p, &img.to_rgb8())?;
    }
    Ok(paths)
}

pub fn cmd_sample(args: &SampleArgs) -> Result<String> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (h, w) = latent_extents(&ck)?;
    let cfg = load_config(args.config.as_deref())?;
    let mut sc = cfg.sample.clone();
    if let Some(c) = args.class {
        sc.class_id = c;
    }
    if let Some(s) = args.seed {
        sc.seed = s;
    }
    if let Some(s) = args.steps {
        sc.steps = s;
    }
    let mask = match (&args.mask, args.mode) {
        (_, Mode::Full) => FoveationMask::all_ones(1, h, w)?,
        (Some(p), _) => load_mask(p)?,
        (None, _) if args.config.is_some() => cfg.mask.spec.build(cfg.mask.frames, h, w)?,
        (None, _) => FoveationMask::all_ones(1, h, w)?,
    };
    if (mask.height(), mask.width()) != (h, w) {
        return Err(invalid(format!("mask is {}x{} but the checkpoint expects a {h}x{w} latent", mask.height(), mask.width())));
    }
    if args.mode == Mode::Naive && ck.meta.train.strategy != MaskStrategy::None {
        return Err(invalid("naive mode needs a checkpoint trained at full resolution (strategy none)"));
    }
    let generator = Generator::from_checkpoint(&ck)?;
    let (images, secs) = timed(|| generator.sample(&mask, &sc));
    let paths = write_frames(&images?, &args.out)?;
    let mut out = String::new();
    for p in paths {
        let _ = writeln!(out, "wrote {}", p.display());
    }
    let _ = writeln!(out, "{} seconds={secs:.3}", stats_line(&mask));
    Ok(out)
}

pub const COMPARE_HEADER: &str =
    "mask,seed,class,seam_foveated,seam_naive,seam_full,psnr_down_foveated_naive,psnr_down_foveated_full,psnr_down_naive_full,seconds_foveated,seconds_naive,seconds_full";

pub fn cmd_compare(args: &CompareArgs, threads: usize) -> Result<String> {
    let fov = Checkpoint::load(&args.foveated)?;
    let full = Checkpoint::load(&args.full)?;
    if fov.meta.model != full.meta.model || latent_extents(&fov)? != latent_extents(&full)? {
        return Err(invalid("checkpoints differ in model config or image size"));
    }
    let (h, w) = latent_extents(&fov)?;
    let masks = args.masks.iter().map(|p| Ok((p.clone(), load_mask(p)?))).collect::<Result<Vec<_>>>()?;
    for (p, m) in &masks {
        if (m.frames(), m.height(), m.width()) != (1, h, w) {
            return Err(invalid(format!("{} is not a single {h}x{w} frame", p.display())));
        }
    }
    fs::create_dir_all(&args.out)?;
    let gen_fov = Generator::from_checkpoint(&fov)?;
    let gen_full = Generator::from_checkpoint(&full)?;
    let classes = fov.meta.model.num_classes;
    let mut csv = format!("# threads={threads} steps={}\n{COMPARE_HEADER}\n", args.steps);
    let mut wins = 0usize;
    let mut rows = 0usize;
    let mut out = String::new();
    for (mi, (path, mask)) in masks.iter().enumerate() {
        for &seed in &args.seeds {
            let class_id = args.class.unwrap_or((seed % classes as u64) as usize);
            let sc = SampleConfig { steps: args.steps, seed, class_id };
            let (a, ta) = timed(|| gen_fov.sample(mask, &sc));
            let (b, tb) = timed(|| gen_full.sample(mask, &sc));
            let (c, tc) = timed(|| gen_full.sample_full(1, h, w, &sc));
            let (a, b, c) = (a?.remove(0), b?.remove(0), c?.remove(0));
            let ab = evaluate_pair(&a, &b, mask)?;
            let seam_full = fovdit_core::generate::seam_energy(&c, mask)?;
            let (da, db, dc) = (a.down2()?, b.down2()?, c.down2()?);
            let _ = writeln!(
                csv,
                "{},{seed},{class_id},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{ta:.4},{tb:.4},{tc:.4}",
                path.display(),
                ab.seam_a,
                ab.seam_b,
                seam_full,
                ab.psnr_down,
                psnr(&da, &dc),
                psnr(&db, &dc)
            );
            if ab.seam_a < ab.seam_b {
                wins += 1;
            }
            rows += 1;
            let trip = Image::hconcat(&[a, b, c])?;
            let p = args.out.join(format!("triptych_m{mi:02}_s{seed}.ppm"));
            pnm::write_ppm(&p, &trip.to_rgb8())?;
        }
    }
    let csv_path = args.out.join("eval.csv");
    fs::write(&csv_path, &csv)?;
    let _ = writeln!(out, "wrote {}", csv_path.display());
    if rows > 0 {
        let _ = writeln!(out, "seam win rate (foveated < naive): {wins}/{rows} = {:.3}", wins as f64 / rows as f64);
    } else {
        let _ = writeln!(out, "no (mask, seed) pairs; header only");
    }
    Ok(out)
}

pub fn cmd_bench(args: &BenchArgs, threads: usize) -> Result<String> {
    let cfg = load_config(args.config.as_deref())?;
    let model = match &args.checkpoint {
        Some(p) => Checkpoint::load(p)?.model()?,
        None => fovdit_core::model::DiT::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let ratios = args.ratios.clone().unwrap_or(cfg.bench.ratios.clone());
    if ratios.is_empty() || ratios.iter().any(|r| !(0.25..=1.0).contains(r)) {
        return Err(invalid("ratios must be non-empty and lie in [0.25, 1]"));
    }
    let g = cfg.bench.grid;
    let layouts = ratios
        .iter()
        .map(|&r| Ok((format!("{r:.2}"), centered_for_ratio(g, g, r)?)))
        .collect::<Result<Vec<_>>>()?;
    for (label, m) in &layouts {
        let flops = predict_flops(&TokenLayout::new(m)?, &model.config).total;
        log::info!("layout {label}: {} flops={flops}", stats_line(m));
    }
    let report = measure(&model, &layouts, args.reps.unwrap_or(cfg.bench.reps), threads)?;
    let csv = report.to_csv();
    let mut out = String::new();
    if let Some(p) = &args.out {
        fs::write(p, &csv)?;
        let _ = writeln!(out, "wrote {}", p.display());
    } else {
        out.push_str(&csv);
    }
    let _ = writeln!(out, "speedup monotone (5% noise): {}", report.speedup_monotone(0.05));
    let _ = writeln!(out, "flop ordering agrees with time: {}", report.flop_order_agrees());
    Ok(out)
}

pub fn run(cli: &Cli) -> Result<String> {
    if cli.threads == 0 {
        bail!(invalid("--threads must be positive"));
    }
    // an already-initialized pool (tests calling run twice) is fine
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    match &cli.command {
        Command::Mask(a) => cmd_mask(a),
        Command::Train(a) => cmd_train(a, cli.threads),
        Command::Sample(a) => cmd_sample(a),
        Command::Compare(a) => cmd_compare(a, cli.threads),
        Command::Bench(a) => cmd_bench(a, cli.threads),
    }
}

/// 3 for numerical failures, 2 for everything else the user can fix.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Error::NonFinite(_)) = cause.downcast_ref::<Error>() {
            return 3;
        }
    }
    2
}
