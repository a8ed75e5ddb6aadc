//! `volseg`: phantom generation, training, detection, segmentation,
//! post-processing, evaluation and cross-validation from the command line.
//!
//! Every successful command writes `manifest.json` into its output directory;
//! `volseg replay --manifest <path>` runs the recorded command again and
//! checks that every output is byte-identical.
//!
//! Exit codes: 0 success, 1 other failure, 2 no region of interest, 3 bad
//! configuration or arguments, 4 training divergence.

mod manifest;
mod overlay;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use volseg_core::arch::{self, ArchName, NetworkSpec, Scale};
use volseg_core::config::KvConfig;
use volseg_core::detect::Roi3D;
use volseg_core::grad::{checkpoint, ParamStore};
use volseg_core::metrics::{mean_std, observer_stats, overlap_report, AggregateReport, MetricsReport, METRIC_COLUMNS};
use volseg_core::optim::{TrainConfig, TrainReport};
use volseg_core::phantom::{generate_phantom, list_phantoms, make_folds, read_phantom, write_phantom, Phantom, PhantomSpec};
use volseg_core::volume::{payload_path, read_volume, write_volume, ValueKind, Volume};
use volseg_core::workflow::{
    detect_volume, finish_mask, run_detect_crossval, run_end2end, run_seg_crossval, segment_roi, train_detector,
    train_segmentation, PipelineConfig, VolumeDetection,
};
use volseg_core::CoreError;

use manifest::{now_ms, FileDigest, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "volseg", version, about = "Thrombus detection and segmentation on CT volumes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` file with pipeline, training or phantom settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// FCN14, FCN26, FCN46, HED, MODIFIED_HED or DETECTOR.
    #[arg(long, global = true)]
    arch: Option<String>,
    /// drop_lowest or keep_highest.
    #[arg(long, global = true)]
    policy: Option<String>,
    /// 6 or 26.
    #[arg(long, global = true)]
    connectivity: Option<String>,
    #[arg(long, global = true)]
    margin_x_mm: Option<f64>,
    #[arg(long, global = true)]
    margin_y_mm: Option<f64>,
    #[arg(long, global = true)]
    run_length: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cluster the raw probabilities instead of the z-smoothed ones.
    #[arg(long, global = true)]
    no_smooth: bool,
    /// Also write PNG overlays of predicted and reference contours.
    #[arg(long, global = true)]
    overlay: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate seeded synthetic volumes with masks and observer intervals.
    GenPhantom {
        #[arg(long, default_value_t = 12)]
        count: usize,
    },
    /// Train the slice detector on every phantom in a directory.
    TrainDetect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a segmentation network on every phantom in a directory.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the detector over a volume and reconstruct the region of interest.
    Detect {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        detector: PathBuf,
    },
    /// Foreground probabilities for every slice of a region.
    Segment {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        roi: PathBuf,
    },
    /// Smoothing, clustering, binarization and largest component.
    Postproc {
        #[arg(long)]
        probability: PathBuf,
        #[arg(long)]
        roi: PathBuf,
    },
    /// Overlap metrics, and the detection miss rate when observers are given.
    Evaluate {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, requires = "detection")]
        observers: Option<PathBuf>,
        #[arg(long, requires = "observers")]
        detection: Option<PathBuf>,
    },
    /// K-fold cross-validation of one architecture over a phantom directory.
    Crossval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        folds: usize,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Detect, segment and post-process one volume.
    End2end {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        segmenter: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Re-run the command recorded in a manifest and compare outputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenPhantom { .. } => "gen-phantom",
            Command::TrainDetect { .. } => "train-detect",
            Command::TrainSeg { .. } => "train-seg",
            Command::Detect { .. } => "detect",
            Command::Segment { .. } => "segment",
            Command::Postproc { .. } => "postproc",
            Command::Evaluate { .. } => "evaluate",
            Command::Crossval { .. } => "crossval",
            Command::End2end { .. } => "end2end",
            Command::Replay { .. } => "replay",
        }
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(CoreError::Config(msg.into()))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        match cause.downcast_ref::<CoreError>() {
            Some(CoreError::NoRoi(_)) => return 2,
            Some(CoreError::Config(_)) => return 3,
            Some(CoreError::Divergence { .. }) => return 4,
            _ => {}
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run_args(args, true) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run_args(args: Vec<String>, allow_replay: bool) -> Result<u8> {
    let argv = std::iter::once("volseg".to_string()).chain(args.iter().cloned());
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(0);
        }
        Err(e) => {
            let text = e.to_string();
            return Err(config_error(text.trim_end().trim_start_matches("error: ").to_string()));
        }
    };
    if let Command::Replay { manifest } = &cli.command {
        if !allow_replay {
            bail!(config_error("a manifest cannot record a replay"));
        }
        return replay(manifest, cli.common.out.as_deref());
    }
    let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let started = now_ms();
    let mut run = Run { out: out.clone(), inputs: Vec::new(), outputs: Vec::new() };
    let settings = Settings::resolve(&cli.common, &mut run)?;
    let code = execute(&cli, &settings, &mut run)?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        args,
        cwd: std::env::current_dir()?,
        config: match &cli.common.config {
            Some(p) => Some(FileDigest::of(p, p.display().to_string())?),
            None => None,
        },
        seed: cli.common.seed,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        out_dir: out.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: run.digests_of_inputs()?,
        outputs: run.digests_of_outputs()?,
    };
    let path = manifest.write()?;
    log::info!("wrote {}", path.display());
    Ok(code)
}

fn replay(manifest_path: &Path, out: Option<&Path>) -> Result<u8> {
    let manifest = RunManifest::read(manifest_path)?;
    let out = match out {
        Some(o) => std::path::absolute(o)?,
        None => manifest.cwd.join(&manifest.out_dir),
    };
    std::env::set_current_dir(&manifest.cwd)
        .with_context(|| format!("entering recorded directory {}", manifest.cwd.display()))?;
    let args = manifest::with_out(&manifest.args, &out);
    log::info!("replaying `{}` into {}", manifest.command, out.display());
    let code = run_args(args, false)?;
    let bad = manifest.mismatches(&out)?;
    if !bad.is_empty() {
        bail!("{} output(s) differ from the manifest: {}", bad.len(), bad.join(", "));
    }
    println!("{} outputs identical to {}", manifest.outputs.len(), manifest_path.display());
    Ok(code)
}

/// Files read and written by one command.
struct Run {
    out: PathBuf,
    inputs: Vec<PathBuf>,
    /// Relative to `out`.
    outputs: Vec<PathBuf>,
}

impl Run {
    fn input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    fn input_volume(&mut self, path: &Path) -> Result<Volume> {
        self.input(path);
        self.input(&payload_path(path));
        read_volume(path).with_context(|| format!("reading {}", path.display()))
    }

    fn output(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let name = name.as_ref().to_path_buf();
        let full = self.out.join(&name);
        if !self.outputs.contains(&name) {
            self.outputs.push(name);
        }
        full
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.output(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write_text(name, &serde_json::to_string_pretty(value)?)
    }

    fn write_volume(&mut self, name: &str, v: &Volume) -> Result<()> {
        let path = self.output(name);
        self.output(Path::new(name).with_extension("raw"));
        write_volume(v, &path).with_context(|| format!("writing {}", path.display()))
    }

    fn write_checkpoint(&mut self, name: &str, params: &ParamStore) -> Result<()> {
        let path = self.output(name);
        self.output(checkpoint::payload_path(Path::new(name)));
        checkpoint::save(&path, params.iter())?;
        Ok(())
    }

    fn load_checkpoint(&mut self, path: &Path, net: &NetworkSpec) -> Result<ParamStore> {
        self.input(path);
        self.input(&checkpoint::payload_path(path));
        let mut params = ParamStore::zeros(&net.graph);
        checkpoint::load_into(path, &mut params)
            .with_context(|| format!("{} is not a {} checkpoint", path.display(), net.name))?;
        Ok(params)
    }

    fn load_phantoms(&mut self, dir: &Path) -> Result<Vec<Phantom>> {
        let stems = list_phantoms(dir).with_context(|| format!("listing {}", dir.display()))?;
        if stems.is_empty() {
            bail!(config_error(format!("no *_image.mhd volumes in {}", dir.display())));
        }
        let mut phantoms = Vec::with_capacity(stems.len());
        for stem in &stems {
            for suffix in ["_image.mhd", "_image.raw", "_mask.mhd", "_mask.raw", "_observers.json", "_spec.json"] {
                self.input(&dir.join(format!("{stem}{suffix}")));
            }
            phantoms.push(read_phantom(dir, stem).with_context(|| format!("reading phantom {stem}"))?);
        }
        Ok(phantoms)
    }

    fn digests_of_inputs(&self) -> Result<Vec<FileDigest>> {
        self.inputs.iter().map(|p| FileDigest::of(p, p.display().to_string())).collect()
    }

    fn digests_of_outputs(&self) -> Result<Vec<FileDigest>> {
        self.outputs
            .iter()
            .map(|p| FileDigest::of(&self.out.join(p), p.display().to_string()))
            .collect()
    }
}

/// Configuration file merged with command-line overrides.
struct Settings {
    pipeline: PipelineConfig,
    /// Keys not consumed by the pipeline: training or phantom settings.
    rest: KvConfig,
    seed: Option<u64>,
    arch: Option<ArchName>,
}

impl Settings {
    fn resolve(c: &Common, run: &mut Run) -> Result<Self> {
        let mut kv = match &c.config {
            Some(p) => {
                run.input(p);
                KvConfig::load(p)?
            }
            None => KvConfig::default(),
        };
        let mut pipeline = PipelineConfig::default().take_from(&mut kv)?;
        if let Some(p) = &c.policy {
            pipeline.postproc.policy = p.parse()?;
        }
        if let Some(n) = &c.connectivity {
            pipeline.postproc.connectivity = n.parse()?;
        }
        if let Some(v) = c.margin_x_mm {
            pipeline.margin_x_mm = v;
        }
        if let Some(v) = c.margin_y_mm {
            pipeline.margin_y_mm = v;
        }
        if let Some(v) = c.run_length {
            pipeline.run_length = v;
        }
        if c.no_smooth {
            pipeline.postproc.smooth = false;
        }
        pipeline.validate()?;
        let arch = match &c.arch {
            Some(a) => Some(a.parse::<ArchName>().map_err(|e| config_error(e.to_string()))?),
            None => None,
        };
        Ok(Self { pipeline, rest: kv, seed: c.seed, arch })
    }

    fn segmentation_arch(&self) -> Result<ArchName> {
        let a = self.arch.unwrap_or(ArchName::ModifiedHed);
        if a == ArchName::Detector {
            bail!(config_error("--arch must name a segmentation network here"));
        }
        Ok(a)
    }

    fn train_config(&self, base: TrainConfig, epochs: Option<usize>) -> Result<TrainConfig> {
        let mut tc = base.apply(self.rest.clone())?;
        if let Some(s) = self.seed {
            tc.seed = s;
        }
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        tc.validate()?;
        Ok(tc)
    }

    /// Commands that do not train still reject unknown keys.
    fn check_rest(&self) -> Result<()> {
        TrainConfig::detection().apply(self.rest.clone())?;
        Ok(())
    }
}

fn threads() -> usize {
    std::env::var("PIPE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn read_roi(run: &mut Run, path: &Path) -> Result<Roi3D> {
    run.input(path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn detector_net() -> Result<NetworkSpec> {
    Ok(arch::build_detector(arch::DEFAULT_CELL_SIZE, Scale::Desk)?)
}

fn execute(cli: &Cli, s: &Settings, run: &mut Run) -> Result<u8> {
    match &cli.command {
        Command::GenPhantom { count } => {
            let base = s.seed.unwrap_or(0);
            for i in 0..*count {
                let spec = PhantomSpec::desk_with(base + i as u64, s.rest.clone())?;
                let p = generate_phantom(&spec)?;
                let stem = format!("phantom_{i:02}");
                write_phantom(&p, &run.out, &stem)?;
                for suffix in ["_image.mhd", "_image.raw", "_mask.mhd", "_mask.raw", "_observers.json", "_spec.json"] {
                    run.output(format!("{stem}{suffix}"));
                }
            }
            log::info!("generated {count} phantoms in {}", run.out.display());
        }
        Command::TrainDetect { data, epochs } => {
            let phantoms = run.load_phantoms(data)?;
            let refs: Vec<&Phantom> = phantoms.iter().collect();
            let net = detector_net()?;
            let tc = s.train_config(TrainConfig::detection(), *epochs)?;
            let trained = train_detector(&net, &refs, &tc, &s.pipeline)?;
            run.write_checkpoint("detector.ckpt", &trained.params)?;
            run.write_text("curves.csv", &trained.report.to_csv())?;
            run.write_text("train.cfg", &tc.to_kv())?;
        }
        Command::TrainSeg { data, epochs } => {
            let arch_name = s.segmentation_arch()?;
            let phantoms = run.load_phantoms(data)?;
            let refs: Vec<&Phantom> = phantoms.iter().collect();
            let net = arch::build(arch_name, Scale::Desk, 2)?;
            let tc = s.train_config(TrainConfig::segmentation(arch_name), *epochs)?;
            let trained = train_segmentation(&net, &refs, &tc, &s.pipeline)?;
            run.write_checkpoint("segmenter.ckpt", &trained.params)?;
            run.write_text("curves.csv", &trained.report.to_csv())?;
            run.write_text("train.cfg", &tc.to_kv())?;
        }
        Command::Detect { volume, detector } => {
            s.check_rest()?;
            let image = run.input_volume(volume)?;
            let net = detector_net()?;
            let params = run.load_checkpoint(detector, &net)?;
            let det = detect_volume(&net, &params, &image, &s.pipeline)?;
            let roi = det.roi.ok_or_else(|| no_roi(&s.pipeline, image.nz()))?;
            run.write_json("detection.json", &det)?;
            run.write_json("roi.json", &roi)?;
        }
        Command::Segment { volume, segmenter, roi } => {
            s.check_rest()?;
            let net = arch::build(s.segmentation_arch()?, Scale::Desk, 2)?;
            let image = run.input_volume(volume)?;
            let roi = read_roi(run, roi)?;
            let params = run.load_checkpoint(segmenter, &net)?;
            let prob = segment_roi(&net, &params, &image, &roi, &s.pipeline)?;
            run.write_volume("probability.mhd", &prob)?;
        }
        Command::Postproc { probability, roi } => {
            s.check_rest()?;
            let prob = run.input_volume(probability)?.with_kind(ValueKind::Probability)?;
            let roi = read_roi(run, roi)?;
            let mask = finish_mask(&prob, &roi, &s.pipeline)?;
            run.write_volume("mask.mhd", &mask)?;
        }
        Command::Evaluate { mask, truth, observers, detection } => {
            s.check_rest()?;
            let m = run.input_volume(mask)?;
            let t = run.input_volume(truth)?;
            let report = overlap_report(&m, &t)?;
            let name = mask.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            run.write_text("metrics.csv", &format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row(&name)))?;
            run.write_json("metrics.json", &report)?;
            if let (Some(obs), Some(det)) = (observers, detection) {
                run.input(obs);
                run.input(det);
                let rec: volseg_core::phantom::ObserverRecord = serde_json::from_str(&std::fs::read_to_string(obs)?)?;
                let d: VolumeDetection = serde_json::from_str(&std::fs::read_to_string(det)?)?;
                let stats = observer_stats(&rec.observers)?;
                let fnr = volseg_core::metrics::detection_slice_fnr(d.span, stats.reference)?;
                run.write_json(
                    "detection_eval.json",
                    &serde_json::json!({ "predicted": d.span, "reference": stats.reference, "observers": stats, "fnr": fnr }),
                )?;
            }
        }
        Command::Crossval { data, folds, epochs } => return crossval(s, run, data, *folds, *epochs),
        Command::End2end { volume, detector, segmenter, truth } => {
            s.check_rest()?;
            let seg_net = arch::build(s.segmentation_arch()?, Scale::Desk, 2)?;
            let det_net = detector_net()?;
            let image = run.input_volume(volume)?;
            let det_params = run.load_checkpoint(detector, &det_net)?;
            let seg_params = run.load_checkpoint(segmenter, &seg_net)?;
            let truth = match truth {
                Some(t) => Some(run.input_volume(t)?),
                None => None,
            };
            let result = run_end2end((&det_net, &det_params), (&seg_net, &seg_params), &image, &s.pipeline)?;
            run.write_volume("mask.mhd", &result.mask)?;
            run.write_json("roi.json", &result.roi)?;
            run.write_json("detection.json", &result.detection)?;
            let mut report = String::from("key,value\n");
            let roi = result.roi;
            let _ = writeln!(report, "roi_z,{}-{}", roi.zmin, roi.zmax);
            let _ = writeln!(report, "roi_xy,{}-{}x{}-{}", roi.xmin, roi.xmax, roi.ymin, roi.ymax);
            let _ = writeln!(report, "foreground_voxels,{}", result.mask.count_foreground());
            let _ = writeln!(report, "foreground_ml,{}", result.mask.count_foreground() as f64 * result.mask.voxel_volume() / 1000.0);
            if let Some(t) = &truth {
                let m = overlap_report(&result.mask, t)?;
                for (k, v) in METRIC_COLUMNS.iter().zip(m.values()) {
                    let _ = writeln!(report, "{k},{v}");
                }
            }
            run.write_text("report.csv", &report)?;
            if cli.common.overlay {
                let dir = run.out.join("overlay");
                for p in overlay::write_overlays(&image, &result.mask, truth.as_ref(), roi.zmin..=roi.zmax, &dir)? {
                    let rel = p.strip_prefix(&run.out).expect("under out").to_path_buf();
                    run.output(rel);
                }
            }
        }
        Command::Replay { .. } => unreachable!("handled before execution"),
    }
    Ok(0)
}

fn no_roi(cfg: &PipelineConfig, nz: usize) -> anyhow::Error {
    anyhow!(CoreError::NoRoi(format!(
        "no run of {} consecutive candidate slices among {nz} slices",
        cfg.run_length
    )))
}

fn agg_row(label: &str, agg: &AggregateReport) -> String {
    let mut row = label.to_string();
    for (_, ms) in agg.as_pairs() {
        let _ = write!(row, ",{},{}", ms.mean, ms.std);
    }
    row
}

fn agg_header(first: &str) -> String {
    let mut h = first.to_string();
    for c in METRIC_COLUMNS {
        let _ = write!(h, ",{c}_mean,{c}_std");
    }
    h
}

fn curves_and_checkpoint(run: &mut Run, fold: usize, kind: &str, report: &TrainReport, params: &ParamStore) -> Result<()> {
    run.write_checkpoint(&format!("fold{fold}_{kind}.ckpt"), params)?;
    run.write_text(&format!("fold{fold}_curves.csv"), &report.to_csv())
}

fn crossval(s: &Settings, run: &mut Run, data: &Path, folds: usize, epochs: Option<usize>) -> Result<u8> {
    let phantoms = run.load_phantoms(data)?;
    let ids: Vec<usize> = (0..phantoms.len()).collect();
    let plan = make_folds(&ids, folds, s.seed.unwrap_or(0))?;
    run.write_json("folds.json", &plan)?;
    let arch_name = s.arch.unwrap_or(ArchName::ModifiedHed);
    let threads = threads();
    let mut failures = Vec::new();
    if arch_name == ArchName::Detector {
        let tc = s.train_config(TrainConfig::detection(), epochs)?;
        let outcomes = run_detect_crossval(&phantoms, &plan, Scale::Desk, &tc, &s.pipeline, threads)?;
        let mut csv = String::from("fold,dataset,pred_zmin,pred_zmax,ref_zmin,ref_zmax,fnr\n");
        let mut fnrs = Vec::new();
        for o in &outcomes {
            if let Some(t) = &o.trained {
                curves_and_checkpoint(run, o.fold, "detector", &t.report, &t.params)?;
            }
            failures.extend(o.failure.iter().map(|f| format!("fold {}: {f}", o.fold)));
            for e in &o.results {
                let (p0, p1) = e.predicted.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
                let _ = writeln!(csv, "{},{},{p0},{p1},{},{},{}", o.fold, e.dataset, e.reference.0, e.reference.1, e.fnr);
                fnrs.push(e.fnr);
            }
        }
        run.write_text("per_dataset.csv", &csv)?;
        let ms = mean_std(&fnrs);
        run.write_text("aggregate.csv", &format!("method,fnr_mean,fnr_std\nDETECTOR,{},{}\n", ms.mean, ms.std))?;
        log::info!("detection FNR {:.4} ± {:.4}", ms.mean, ms.std);
    } else {
        let tc = s.train_config(TrainConfig::segmentation(arch_name), epochs)?;
        let cv = run_seg_crossval(&phantoms, &plan, arch_name, Scale::Desk, &tc, &s.pipeline, threads)?;
        let mut per_dataset = format!("fold,{}\n", MetricsReport::csv_header());
        let mut per_fold = format!("{}\n", agg_header("fold"));
        for o in &cv.folds {
            if let Some(t) = &o.trained {
                curves_and_checkpoint(run, o.fold, "segmenter", &t.report, &t.params)?;
                let _ = writeln!(per_fold, "{}", agg_row(&o.fold.to_string(), &cv.fold_aggregate(o.fold)?));
            }
            failures.extend(o.failure.iter().map(|f| format!("fold {}: {f}", o.fold)));
            for (id, r) in &o.results {
                let _ = writeln!(per_dataset, "{},{}", o.fold, r.csv_row(&id.to_string()));
            }
        }
        run.write_text("per_dataset.csv", &per_dataset)?;
        run.write_text("per_fold.csv", &per_fold)?;
        if cv.reports().is_empty() {
            bail!(CoreError::Divergence { epoch: 0, iteration: 0, loss: f64::NAN });
        }
        let agg = cv.aggregate()?;
        run.write_text("aggregate.csv", &format!("{}\n{}\n", agg_header("method"), agg_row(arch_name.as_str(), &agg)))?;
        log::info!("{arch_name} dice {:.4} ± {:.4}, rvd {:.4}", agg.dice.mean, agg.dice.std, agg.relative_volume_diff.mean);
    }
    run.write_json("summary.json", &serde_json::json!({ "arch": arch_name.as_str(), "partial": !failures.is_empty(), "failures": failures }))?;
    if failures.is_empty() {
        Ok(0)
    } else {
        for f in &failures {
            eprintln!("warning: {f}");
        }
        Ok(4)
    }
}
