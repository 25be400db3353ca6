//! Pipeline stages behind the subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use shape_transfer::checkpoint::{self, Checkpoint};
use shape_transfer::data::{load_dataset, load_unlabeled, preprocess_mask, Dataset, MaskReadProbe};
use shape_transfer::image::LabelMask;
use shape_transfer::imageio::{self, Raster};
use shape_transfer::manifest::{resolve, DatasetManifest, Domain, ManifestEntry, MANIFEST_FILE};
use shape_transfer::metrics::{self, evaluate_volume, CohortSummary, MetricsReport, Structure};
use shape_transfer::phantom::{generate_dataset, PhantomSpec};
use shape_transfer::train::{
    pretrain_segmentor, run_mode, run_mode_pretrained, run_session, seg_log_csv, segment_dataset, train_segmentor_on_translated, CheckpointSink, GanSession,
    Mode, PartitionAudit, SegEpoch, TrainingLog, LOG_HEADER,
};
use shape_transfer::{Bundle32, Checkpoint32};

use crate::config::{EvalConfig, RunConfig};
use crate::plot;

pub const LOSS_CSV: &str = "loss.csv";
pub const FINAL_CKPT: &str = "final.ckpt";

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug)]
pub struct PhantomArgs {
    pub spec: Option<PathBuf>,
    pub domain: Domain,
    pub patients: u32,
    pub slices: u32,
    pub seed: u64,
    pub out: PathBuf,
    pub overwrite: bool,
}

pub fn cmd_phantom(cfg: &RunConfig, args: &PhantomArgs) -> anyhow::Result<DatasetManifest> {
    let mut cfg = cfg.clone();
    if let Some(p) = &args.spec {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading phantom spec {}", p.display()))?;
        cfg.phantom = toml::from_str::<PhantomSpec>(&text).with_context(|| format!("parsing phantom spec {}", p.display()))?;
    }
    cfg.phantom.validate()?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let m = generate_dataset(&cfg.phantom, args.patients, args.slices, args.domain, args.seed, &args.out, args.overwrite)?;
    cfg.out_dir = args.out.clone();
    cfg.write_resolved(&args.out)?;
    Ok(m)
}

/// Artifacts of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: Bundle32,
    pub pretrain_log: Vec<SegEpoch>,
    pub gan_log: Option<TrainingLog>,
    pub post_log: Vec<SegEpoch>,
    pub target_mask_reads: u64,
    pub out_dir: PathBuf,
}

impl TrainOutcome {
    pub fn audit(&self) -> PartitionAudit {
        self.gan_log.as_ref().map(|l| l.audit).unwrap_or_default()
    }
}

fn data_path<'a>(p: &'a Option<PathBuf>, name: &str) -> anyhow::Result<&'a Path> {
    match p {
        Some(p) if DatasetManifest::locate(p).exists() => Ok(p),
        Some(p) => bail!("data.{name}: no manifest at {}", DatasetManifest::locate(p).display()),
        None => bail!("data.{name} is not set"),
    }
}

fn load_training_data(cfg: &RunConfig) -> anyhow::Result<(Dataset, Dataset)> {
    let mut problems = cfg.problems();
    let src = data_path(&cfg.data.source, "source").map_err(|e| problems.push(e.to_string())).ok();
    let tgt = data_path(&cfg.data.target, "target").map_err(|e| problems.push(e.to_string())).ok();
    if !problems.is_empty() {
        bail!("configuration has {} problem(s):\n  {}", problems.len(), problems.join("\n  "));
    }
    let size = cfg.arch.image_size;
    let source = load_dataset(src.expect("checked"), true, size).context("loading source data")?;
    let target = load_unlabeled(tgt.expect("checked"), size).context("loading target data")?;
    Ok((source, target))
}

/// Writes the logs, plot and final checkpoint of a run into `out`.
fn write_train_artifacts(out: &Path, cfg: &RunConfig, o: &TrainOutcome, loss_csv: Option<String>) -> anyhow::Result<()> {
    if !o.pretrain_log.is_empty() {
        write(&out.join("pretrain_log.csv"), &seg_log_csv(&o.pretrain_log))?;
    }
    if !o.post_log.is_empty() {
        write(&out.join("post_seg_log.csv"), &seg_log_csv(&o.post_log))?;
    }
    if let Some(log) = &o.gan_log {
        write(&out.join(LOSS_CSV), &loss_csv.unwrap_or_else(|| log.csv()))?;
        if !log.epoch_means.is_empty() {
            plot::loss_curves(&out.join("loss_curve.svg"), &log.epoch_means)?;
        }
    }
    let mut ckpt = Checkpoint::initial(o.bundle.clone(), cfg.train.clone());
    ckpt.epoch = if o.gan_log.is_some() { cfg.train.epochs } else { 0 };
    checkpoint::save(&ckpt, &out.join(FINAL_CKPT))?;
    Ok(())
}

/// Trains one mode on the configured datasets and writes its artifacts.
pub fn cmd_train(cfg: &RunConfig, mode: Mode) -> anyhow::Result<TrainOutcome> {
    let (source, target) = load_training_data(cfg)?;
    let out = cfg.out_dir.clone();
    cfg.write_resolved(&out)?;
    let o = train_on(cfg, mode, &source, &target, &out, None)?;
    write_train_artifacts(&out, cfg, &o, None)?;
    Ok(o)
}

fn train_on(
    cfg: &RunConfig,
    mode: Mode,
    source: &Dataset,
    target: &Dataset,
    out: &Path,
    pretrained: Option<&(Bundle32, Vec<SegEpoch>)>,
) -> anyhow::Result<TrainOutcome> {
    let sink = CheckpointSink::to(&out.join("checkpoints"));
    let r = match pretrained {
        Some((b, log)) => run_mode_pretrained(mode, source, target, b.clone(), log.clone(), &cfg.train, &sink),
        None => run_mode::<f32>(mode, source, target, &cfg.arch, &cfg.train, &sink),
    }
    .with_context(|| format!("training mode {}", mode.as_str()))?;
    if r.target_mask_reads != 0 {
        bail!("training read {} target-domain masks", r.target_mask_reads);
    }
    Ok(TrainOutcome {
        bundle: r.bundle,
        pretrain_log: r.pretrain_log,
        gan_log: r.gan_log,
        post_log: r.post_log,
        target_mask_reads: r.target_mask_reads,
        out_dir: out.to_path_buf(),
    })
}

/// Continues adversarial training from a checkpoint. Log rows of earlier
/// epochs already present in `loss.csv` are kept.
pub fn cmd_resume(cfg: &RunConfig, mode: Mode, ckpt_path: &Path) -> anyhow::Result<TrainOutcome> {
    if mode == Mode::Unet {
        bail!("mode unet has no adversarial phase to resume");
    }
    let (source, target) = load_training_data(cfg)?;
    let ckpt: Checkpoint32 = checkpoint::load(ckpt_path)?;
    let start_epoch = ckpt.epoch;
    let mut session = GanSession::from_checkpoint(ckpt)?;
    let out = cfg.out_dir.clone();
    cfg.write_resolved(&out)?;
    let probe = MaskReadProbe::start();
    let log = run_session(&mut session, &source, &target, &CheckpointSink::to(&out.join("checkpoints")))?;
    let mut bundle = session.bundle;
    let mut post_log = Vec::new();
    if mode == Mode::Noshape && !session.cfg.noshape_joint {
        post_log = train_segmentor_on_translated(&mut bundle, &source, &session.cfg)?;
    }
    let reads = probe.since(Domain::Target);
    if reads != 0 {
        bail!("training read {reads} target-domain masks");
    }
    let mut csv = String::from(LOG_HEADER);
    csv.push('\n');
    if let Ok(old) = std::fs::read_to_string(out.join(LOSS_CSV)) {
        for line in old.lines().skip(1) {
            let epoch: usize = line.split(',').next().and_then(|e| e.parse().ok()).unwrap_or(usize::MAX);
            if epoch < start_epoch {
                csv.push_str(line);
                csv.push('\n');
            }
        }
    }
    csv.push_str(&log.csv()[LOG_HEADER.len() + 1..]);
    let o = TrainOutcome {
        bundle,
        pretrain_log: Vec::new(),
        gan_log: Some(log),
        post_log,
        target_mask_reads: reads,
        out_dir: out.clone(),
    };
    let mut run_cfg = cfg.clone();
    run_cfg.train = session.cfg.clone();
    write_train_artifacts(&out, &run_cfg, &o, Some(csv))?;
    Ok(o)
}

/// Predicted masks for every image of `input`, written under `out`.
pub fn cmd_segment(cfg: &RunConfig, ckpt_path: &Path, input: &Path, out: &Path) -> anyhow::Result<DatasetManifest> {
    let ckpt: Checkpoint32 = checkpoint::load(ckpt_path)?;
    let bundle = ckpt.bundle;
    let size = bundle.arch.image_size;
    let mpath = DatasetManifest::locate(input);
    let manifest = DatasetManifest::load(&mpath)?;
    for e in &manifest.samples {
        let p = resolve(&mpath, &e.image_path);
        let raw = imageio::read_gray(&p)?;
        if raw.width.min(raw.height) != size {
            bail!(
                "{}: image is {}x{} but the checkpoint segments {size}x{size} inputs",
                p.display(),
                raw.height,
                raw.width
            );
        }
    }
    let ds = load_unlabeled(&mpath, size)?;
    let preds = segment_dataset(&bundle, &ds, cfg.train.batch_size)?;
    let mask_dir = out.join("masks");
    std::fs::create_dir_all(&mask_dir).with_context(|| format!("creating {}", mask_dir.display()))?;
    let mut entries = Vec::with_capacity(preds.len());
    for (e, m) in manifest.samples.iter().zip(&preds) {
        let name = format!("p{:03}_s{:02}.png", e.patient_id, e.slice_index);
        let mask_path = PathBuf::from("masks").join(&name);
        let full = out.join(&mask_path);
        imageio::write_mask(&full, m.width, m.height, &m.labels)?;
        let image_path = resolve(&mpath, &e.image_path);
        let image_path = std::fs::canonicalize(&image_path).unwrap_or(image_path);
        entries.push(ManifestEntry {
            patient_id: e.patient_id,
            slice_index: e.slice_index,
            domain: e.domain,
            image_path,
            mask_path: Some(mask_path),
            seed: e.seed,
        });
    }
    let pred = DatasetManifest::new(entries);
    pred.save(&out.join(MANIFEST_FILE))?;
    let mut resolved = cfg.clone();
    resolved.out_dir = out.to_path_buf();
    resolved.write_resolved(out)?;
    Ok(pred)
}

/// Per-patient stacks of (predicted, reference) masks keyed by patient id.
type Volumes = BTreeMap<u32, (Vec<LabelMask>, Vec<LabelMask>)>;

fn read_label_mask(path: &Path) -> anyhow::Result<Raster<u8>> {
    Ok(imageio::read_mask(path)?)
}

fn collect_volumes(pred: &Path, gt: &Path) -> anyhow::Result<Volumes> {
    let (pp, gp) = (DatasetManifest::locate(pred), DatasetManifest::locate(gt));
    let pm = DatasetManifest::load(&pp)?;
    let gm = DatasetManifest::load(&gp)?;
    let mut gt_by_key: BTreeMap<(u32, u32), &ManifestEntry> = BTreeMap::new();
    for e in &gm.samples {
        gt_by_key.insert((e.patient_id, e.slice_index), e);
    }
    let mut vols: Volumes = BTreeMap::new();
    let mut pred_sorted: Vec<&ManifestEntry> = pm.samples.iter().collect();
    pred_sorted.sort_by_key(|e| (e.patient_id, e.slice_index));
    for e in pred_sorted {
        let key = (e.patient_id, e.slice_index);
        let g = gt_by_key
            .get(&key)
            .with_context(|| format!("{}: no reference entry for patient {} slice {}", gp.display(), key.0, key.1))?;
        let pmask = e.mask_path.as_ref().with_context(|| format!("{}: prediction without mask", pp.display()))?;
        let gmask = g.mask_path.as_ref().with_context(|| {
            format!("{}: reference patient {} slice {} has no mask", gp.display(), key.0, key.1)
        })?;
        let praw = read_label_mask(&resolve(&pp, pmask))?;
        let graw = read_label_mask(&resolve(&gp, gmask))?;
        let p = LabelMask::new(praw.height, praw.width, praw.pixels)?;
        let g = if (graw.height, graw.width) == (p.height, p.width) {
            LabelMask::new(graw.height, graw.width, graw.pixels)?
        } else {
            preprocess_mask(&graw, p.height)?
        };
        let v = vols.entry(e.patient_id).or_default();
        v.0.push(p);
        v.1.push(g);
    }
    if vols.is_empty() {
        bail!("{}: no predictions to evaluate", pp.display());
    }
    Ok(vols)
}

/// Scores volumes and returns per-patient reports.
pub fn score_volumes(vols: &Volumes, eval: &EvalConfig) -> anyhow::Result<Vec<MetricsReport>> {
    vols.iter()
        .map(|(&pid, (p, g))| Ok(evaluate_volume(pid, p, g, eval.spacing(), eval.mode())?))
        .collect()
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub reports: Vec<MetricsReport>,
    pub summary: CohortSummary,
    pub table: String,
}

pub fn cmd_evaluate(cfg: &RunConfig, pred: &Path, gt: &Path, out: &Path) -> anyhow::Result<EvalOutcome> {
    cfg.evaluate.spacing().validate()?;
    let vols = collect_volumes(pred, gt)?;
    let reports = score_volumes(&vols, &cfg.evaluate)?;
    let summary = metrics::aggregate_cohort(&reports)?;
    let table = metrics::summary_table(&summary, &cfg.evaluate.distance_unit);
    write(&out.join("metrics.csv"), &metrics::report_csv(&reports))?;
    write(&out.join("summary.txt"), &table)?;
    let mut resolved = cfg.clone();
    resolved.out_dir = out.to_path_buf();
    resolved.write_resolved(out)?;
    Ok(EvalOutcome { reports, summary, table })
}

/// Result of one (seed, mode) run of the ablation.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub seed: u64,
    pub mode: Mode,
    /// Cohort mean Dice per structure, ordered like [`Structure::ALL`].
    pub dice: [f64; 3],
    pub reports: Vec<MetricsReport>,
    /// Mean cycle loss of the first and last adversarial epoch.
    pub cycle_first_last: Option<(f64, f64)>,
    pub audit: PartitionAudit,
    pub target_mask_reads: u64,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub runs: Vec<AblationRun>,
    /// Per mode: mean over seeds of the cohort mean Dice, per structure.
    pub mean_dice: Vec<(Mode, [f64; 3])>,
    pub csv: String,
}

impl AblationOutcome {
    pub fn mean_of(&self, mode: Mode, s: Structure) -> f64 {
        let i = Structure::ALL.iter().position(|&x| x == s).expect("structure");
        self.mean_dice.iter().find(|(m, _)| *m == mode).expect("mode ran").1[i]
    }
}

/// Seeds of the three phantom sets of one master seed.
fn phantom_seeds(master: u64) -> [u64; 3] {
    [master * 3 + 1_000, master * 3 + 1_001, master * 3 + 1_002]
}

const RUNS_HEADER: &str = "seed,method,LV,RV,Myo,cyc_first,cyc_last,target_mask_reads";

fn runs_csv(runs: &[AblationRun]) -> String {
    let mut out = format!("{RUNS_HEADER}\n");
    for r in runs {
        let (a, b) = r.cycle_first_last.map_or(("NA".into(), "NA".into()), |(a, b)| (format!("{a:.6}"), format!("{b:.6}")));
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{a},{b},{}",
            r.seed,
            r.mode.as_str(),
            r.dice[0],
            r.dice[1],
            r.dice[2],
            r.target_mask_reads
        );
    }
    out
}

fn method_label(m: Mode) -> &'static str {
    match m {
        Mode::Unet => "U-Net",
        Mode::Noshape => "No-Shape GAN",
        Mode::Shapetransfer => "Shape-Transfer GAN",
    }
}

/// Runs every mode for every master seed on fresh phantom data and scores
/// each on held-out labeled target slices.
pub fn cmd_ablate(cfg: &RunConfig) -> anyhow::Result<AblationOutcome> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    cfg.write_resolved(&out)?;
    let a = &cfg.ablation;
    let size = cfg.arch.image_size;
    let phantom = PhantomSpec { image_size: size, ..cfg.phantom.clone() };
    let mut runs: Vec<AblationRun> = Vec::new();
    for &seed in &a.seeds {
        let data = out.join(format!("seed_{seed}")).join("data");
        let [s_src, s_tgt, s_eval] = phantom_seeds(seed);
        generate_dataset(&phantom, a.source_patients, a.source_slices, Domain::Source, s_src, &data.join("source"), true)?;
        generate_dataset(&phantom, a.target_patients, a.target_slices, Domain::Target, s_tgt, &data.join("target"), true)?;
        generate_dataset(&phantom, a.eval_patients, a.eval_slices, Domain::Target, s_eval, &data.join("eval"), true)?;
        let source = load_dataset(&data.join("source"), true, size)?;
        let target = load_unlabeled(&data.join("target"), size)?;
        let eval = load_dataset(&data.join("eval"), true, size)?;
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        let probe = MaskReadProbe::start();
        let pretrained = pretrain_segmentor::<f32>(&source, &cfg.arch, &run_cfg.train).context("pretraining segmentor")?;
        let pretrain_reads = probe.since(Domain::Target);
        for mode in Mode::ALL {
            let dir = out.join(format!("seed_{seed}")).join(mode.as_str());
            run_cfg.out_dir = dir.clone();
            run_cfg.data.source = Some(data.join("source"));
            run_cfg.data.target = Some(data.join("target"));
            run_cfg.data.eval = Some(data.join("eval"));
            run_cfg.write_resolved(&dir)?;
            let mut o = train_on(&run_cfg, mode, &source, &target, &dir, Some(&pretrained))?;
            o.target_mask_reads += pretrain_reads;
            write_train_artifacts(&dir, &run_cfg, &o, None)?;
            let preds = segment_dataset(&o.bundle, &eval, cfg.train.batch_size)?;
            let mut vols: Volumes = BTreeMap::new();
            for (p, s) in preds.into_iter().zip(&eval.samples) {
                let v = vols.entry(s.patient_id).or_default();
                v.0.push(p);
                v.1.push(s.mask().context("evaluation slice without mask")?.clone());
            }
            let reports = score_volumes(&vols, &cfg.evaluate)?;
            write(&dir.join("metrics.csv"), &metrics::report_csv(&reports))?;
            let summary = metrics::aggregate_cohort(&reports)?;
            write(&dir.join("summary.txt"), &metrics::summary_table(&summary, &cfg.evaluate.distance_unit))?;
            let dice = Structure::ALL.map(|s| summary.get("dice", s.name()).and_then(|c| c.mean).unwrap_or(f64::NAN));
            let cycle_first_last = o.gan_log.as_ref().and_then(|l| {
                Some((l.epoch_means.first()?.l_cyc, l.epoch_means.last()?.l_cyc))
            });
            runs.push(AblationRun {
                seed,
                mode,
                dice,
                reports,
                cycle_first_last,
                audit: o.audit(),
                target_mask_reads: o.target_mask_reads,
            });
            write(&out.join("ablation_runs.csv"), &runs_csv(&runs))?;
        }
    }

    let mut csv = String::from("method,LV_mean,LV_std,RV_mean,RV_std,Myo_mean,Myo_std\n");
    let mut mean_dice = Vec::new();
    for mode in Mode::ALL {
        let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.mode == mode).collect();
        let mut means = [0.0; 3];
        let _ = write!(csv, "{}", method_label(mode));
        for i in 0..3 {
            means[i] = mine.iter().map(|r| r.dice[i]).sum::<f64>() / mine.len() as f64;
            let all: Vec<f64> = mine.iter().flat_map(|r| r.reports.iter().map(move |p| p.dice[i])).collect();
            let (_, std) = metrics::mean_std(&all);
            let _ = write!(csv, ",{:.4},{:.4}", means[i], std);
        }
        csv.push('\n');
        mean_dice.push((mode, means));
    }
    write(&out.join("ablation.csv"), &csv)?;
    let labels: Vec<&str> = Mode::ALL.iter().map(|&m| method_label(m)).collect();
    let names: Vec<&str> = Structure::ALL.iter().map(|s| s.name()).collect();
    let values: Vec<Vec<f64>> = mean_dice.iter().map(|(_, d)| d.to_vec()).collect();
    plot::ablation_bars(&out.join("ablation.svg"), &labels, &names, &values)?;
    Ok(AblationOutcome { runs, mean_dice, csv })
}
