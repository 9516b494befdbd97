use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use ililt::grad::{gradcheck_suite, Checkpoint};
use ililt::harness::{build_dataset, load_dataset, RunConfig};
use ililt::ilt::ilt_optimize;
use ililt::litho::{load_kernels, resist_threshold, save_kernels, simulate_intensity, synth_kernels, KernelSet};
use ililt::model::{infer, LithoContext, Model};
use ililt::raster::{load_binary_png, save_binary_png, save_png, GrayImage, Grid};
use ililt::trainer::{evaluate, init_model, split_indices, train, Sample};
use ililt::{Error, Result};

#[derive(Parser)]
#[command(name = "ililt", version, about = "Lithography simulation, ILT and learned mask optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a kernel set.
    GenKernels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate designs and golden ILT masks.
    GenDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kernels: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of tiles; overrides the configuration.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Image a mask and print it at nominal condition.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        kernels: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run numerical ILT on one design.
    Ilt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        kernels: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the update operator on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a trained operator on one design.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        design: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        kernels: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a trained operator on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Restrict to the seeded validation split.
        #[arg(long)]
        val_only: bool,
    },
    /// Finite-difference check of every differentiable primitive.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

/// Paths created by the current command, removed unless committed.
struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    lock: Option<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            dirs: Vec::new(),
            lock: None,
            committed: false,
        }
    }

    fn dir(&mut self, path: &Path) -> Result<PathBuf> {
        if !path.exists() {
            fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            self.dirs.push(path.to_path_buf());
        }
        Ok(path.to_path_buf())
    }

    /// Creates `out_dir` and takes its lock file.
    fn locked_dir(&mut self, path: &Path) -> Result<PathBuf> {
        let dir = self.dir(path)?;
        let lock = dir.join(".ililt.lock");
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::InvalidArgument(format!("{} is locked by another ililt process", dir.display()))
            } else {
                Error::io(&lock, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        self.lock = Some(lock);
        Ok(dir)
    }

    /// Registers a file for cleanup unless it already existed.
    fn file(&mut self, path: PathBuf) -> PathBuf {
        if !path.exists() {
            self.files.push(path.clone());
        }
        path
    }

    fn commit(&mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
            for d in self.dirs.iter().rev() {
                let _ = fs::remove_dir_all(d);
            }
        }
        if let Some(lock) = &self.lock {
            let _ = fs::remove_file(lock);
        }
    }
}

fn write_config(out: &mut Outputs, cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.write(&out.file(dir.join("run_config.json")))
}

fn save_intensity(grid: &Grid, ps: f64, path: &Path) -> Result<()> {
    let peak = grid.max().max(1e-12);
    let scaled = grid.map(|v| v / peak);
    save_png(&GrayImage::from_grid_clamped(&scaled, ps)?, path)
}

fn context(ks: &KernelSet, side_w: usize, side_h: usize, cfg: &RunConfig) -> Result<LithoContext> {
    LithoContext::new(ks, side_w, side_h, cfg.ilt.nominal.clone(), cfg.ilt.relax)
}

fn load_model(path: &Path) -> Result<Model> {
    Model::from_checkpoint(Checkpoint::load(path)?)
}

fn run(cmd: Command) -> Result<()> {
    let mut out = Outputs::new();
    match cmd {
        Command::GenKernels { common, out: path } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
            let k = &cfg.kernels;
            let ks = synth_kernels(cfg.seed, k.count, k.size, k.sigma_nm, k.pixel_size_nm)?;
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                out.dir(parent)?;
            }
            out.file(path.clone());
            out.file(ililt::litho::kernel_sidecar_path(&path));
            save_kernels(&ks, &path)?;
            cfg.write(&out.file(path.with_extension("run.json")))?;
            println!("kernels={} count={} size={}", path.display(), ks.count(), ks.size());
        }
        Command::GenDataset { common, kernels, out_dir, n } => {
            let mut cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
            if let Some(n) = n {
                cfg.dataset_size = n;
            }
            let dir = out.locked_dir(&out_dir)?;
            for sub in ["designs", "masks"] {
                out.dir(&dir.join(sub))?;
            }
            out.file(dir.join("manifest.json"));
            out.file(dir.join(ililt::harness::dataset::KERNEL_FILE));
            out.file(dir.join("kernels.json"));
            let m = build_dataset(cfg.dataset_size, cfg.seed, &kernels, &cfg.tiles, &cfg.ilt, &cfg.epe, &dir)?;
            write_config(&mut out, &cfg, &dir)?;
            let flagged = m.entries.iter().filter(|e| e.flagged).count();
            println!("tiles={} flagged={} manifest={}", m.entries.len(), flagged, dir.join("manifest.json").display());
        }
        Command::Simulate { common, mask, kernels, out_dir } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
            let ks = load_kernels(&kernels)?;
            let m = load_binary_png(&mask, ks.pixel_size_nm())?;
            let dir = out.locked_dir(&out_dir)?;
            let intensity = simulate_intensity(&m.to_gray(), &ks)?;
            let wafer = resist_threshold(&intensity, &cfg.ilt.nominal, m.pixel_size())?;
            save_intensity(&intensity, m.pixel_size(), &out.file(dir.join("intensity.png")))?;
            save_binary_png(&wafer, out.file(dir.join("wafer.png")))?;
            write_config(&mut out, &cfg, &dir)?;
            println!("peak_intensity={} printed_pixels={}", intensity.max(), wafer.count_ones());
        }
        Command::Ilt { common, design, kernels, out_dir } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
            let ks = load_kernels(&kernels)?;
            let d = load_binary_png(&design, ks.pixel_size_nm())?;
            let dir = out.locked_dir(&out_dir)?;
            let started = Instant::now();
            let (mask, trace) = ilt_optimize(&d, &ks, &cfg.ilt)?;
            let seconds = started.elapsed().as_secs_f64();
            save_binary_png(&mask, out.file(dir.join("mask.png")))?;
            trace.write_csv(out.file(dir.join("trace.csv")))?;
            if !trace.snapshots.is_empty() {
                let snaps = out.dir(&dir.join("snapshots"))?;
                for (it, g) in &trace.snapshots {
                    let p = out.file(snaps.join(format!("iter_{it:04}.png")));
                    save_png(&GrayImage::from_grid_clamped(g, d.pixel_size())?, p)?;
                }
            }
            let intensity = simulate_intensity(&mask.to_gray(), &ks)?;
            let wafer = resist_threshold(&intensity, &cfg.ilt.nominal, d.pixel_size())?;
            save_binary_png(&wafer, out.file(dir.join("wafer.png")))?;
            let (epe, _) = ililt::metrics::epe_violations(&wafer, &d, &cfg.epe)?;
            write_config(&mut out, &cfg, &dir)?;
            println!(
                "iterations={} best_loss={} best_iteration={} epe_violations={} seconds={:.3}",
                trace.losses.len(),
                trace.best_loss,
                trace.best_iteration,
                epe,
                seconds
            );
        }
        Command::Train { common, dataset, out_dir } => {
            let mut cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
            let ds = load_dataset(&dataset)?;
            let dir = out.locked_dir(&out_dir)?;
            cfg.train.checkpoint_dir = Some(out.dir(&dir.join("checkpoints"))?);
            let (tr, va) = split_indices(ds.samples.len(), cfg.train.val_fraction, cfg.seed);
            let pick = |idx: &[usize]| idx.iter().map(|&i| ds.samples[i].clone()).collect::<Vec<Sample>>();
            let (train_set, val_set) = (pick(&tr), pick(&va));
            let side = ds.manifest.tile_side;
            let ctx = context(&ds.kernels, side, side, &cfg)?;
            let mut model = init_model(&cfg.train, cfg.backbone)?;
            let report = train(&mut model, &train_set, &val_set, &cfg.train, &ctx, &cfg.epe)?;
            let final_path = out.file(dir.join("model.ckpt"));
            model.to_checkpoint(model.operators()[0].params().step())?.save(&final_path)?;
            let rp = out.file(dir.join("train_report.json"));
            fs::write(&rp, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&rp, e))?;
            write_config(&mut out, &cfg, &dir)?;
            println!(
                "epochs={} final_loss={} params={} checkpoint={}",
                report.epoch_loss.len(),
                report.epoch_loss.last().copied().unwrap_or(f64::NAN),
                report.parameter_count,
                final_path.display()
            );
        }
        Command::Infer { common, design, ckpt, kernels, out_dir } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
            let ks = load_kernels(&kernels)?;
            let d = load_binary_png(&design, ks.pixel_size_nm())?;
            let model = load_model(&ckpt)?;
            let dir = out.locked_dir(&out_dir)?;
            let ctx = context(&ks, d.width(), d.height(), &cfg)?;
            let run = infer(&d, &model, &cfg.infer, &ctx)?;
            save_binary_png(&run.mask, out.file(dir.join("mask.png")))?;
            let intensity = simulate_intensity(&run.mask.to_gray(), &ks)?;
            let wafer = resist_threshold(&intensity, &cfg.ilt.nominal, d.pixel_size())?;
            save_binary_png(&wafer, out.file(dir.join("wafer.png")))?;
            let mut csv = String::from("step,residual\n");
            for (t, r) in run.residuals.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", t + 1, r));
            }
            let rp = out.file(dir.join("residuals.csv"));
            fs::write(&rp, csv).map_err(|e| Error::io(&rp, e))?;
            write_config(&mut out, &cfg, &dir)?;
            println!("steps={} mask={}", run.residuals.len(), dir.join("mask.png").display());
        }
        Command::Eval { common, dataset, ckpt, out_dir, val_only } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
            let ds = load_dataset(&dataset)?;
            let model = load_model(&ckpt)?;
            let dir = out.locked_dir(&out_dir)?;
            let samples: Vec<Sample> = if val_only {
                let (_, va) = split_indices(ds.samples.len(), cfg.train.val_fraction, cfg.seed);
                va.iter().map(|&i| ds.samples[i].clone()).collect()
            } else {
                ds.samples.clone()
            };
            let side = ds.manifest.tile_side;
            let ctx = context(&ds.kernels, side, side, &cfg)?;
            let corners = cfg.corners.corners(ds.kernels.label())?;
            let summary = evaluate(&samples, &model, &cfg.infer, &ctx, &corners, &cfg.epe)?;
            let tiles = out.file(dir.join("tiles.csv"));
            fs::write(&tiles, summary.tiles_csv()).map_err(|e| Error::io(&tiles, e))?;
            let sp = out.file(dir.join("summary.csv"));
            fs::write(&sp, summary.summary_csv()).map_err(|e| Error::io(&sp, e))?;
            write_config(&mut out, &cfg, &dir)?;
            println!(
                "tiles={} EPE={} PVB={} Throughput={}",
                summary.tiles.len(),
                summary.mean_epe,
                summary.mean_pvb_nm2,
                summary.throughput_s_per_tile
            );
        }
        Command::Gradcheck { common } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), common.seed)?;
            let results = gradcheck_suite(cfg.seed)?;
            let mut failed = Vec::new();
            for r in &results {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!("primitive={} max_rel_err={:.3e} probes={} {status}", r.name, r.max_rel_err, r.probes);
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(Error::InvalidArgument(format!("gradcheck failed for {}", failed.join(","))));
            }
        }
    }
    out.commit();
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({"status": "error", "kind": kind, "message": message}).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
