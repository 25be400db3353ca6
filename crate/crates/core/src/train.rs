//! Segmentor pretraining, joint adversarial training and inference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{batch_iterator, epoch_permutation, make_batch, Batch, Dataset, MaskReadProbe};
use crate::error::{Error, Result};
use crate::image::{LabelMask, MYO};
use crate::losses::{self, AdversarialTerms, CycleTerms, LossReport, LossWeights};
use crate::manifest::Domain;
use crate::metrics;
use crate::nets::{self, ArchConfig, ModelBundle, ParamSet};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_gan: f64,
    pub lr_seg: f64,
    /// Segmentor learning rate for pretraining when it should differ from
    /// `lr_seg`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_pretrain: Option<f64>,
    /// Discriminator learning rate when it should differ from `lr_gan`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_disc: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub pretrain_epochs: usize,
    /// Epochs of segmentor training on translated source images after an
    /// adversarial run without the shape term.
    pub post_seg_epochs: usize,
    /// Without the shape term, still update the segmentor on translated
    /// images during adversarial training instead of afterwards.
    pub noshape_joint: bool,
    /// Record zero wall times so logs are byte-reproducible.
    pub deterministic: bool,
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr_gan: 1e-4,
            lr_seg: 1e-5,
            lr_pretrain: None,
            lr_disc: None,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 10,
            log_every: 1,
            pretrain_epochs: 30,
            post_seg_epochs: 30,
            noshape_joint: false,
            deterministic: true,
            device: "cpu".into(),
        }
    }
}

impl TrainConfig {
    /// Every invalid field, in declaration order.
    pub fn problems(&self) -> Vec<Error> {
        let mut out = Vec::new();
        for (name, v) in [("train.epochs", self.epochs), ("train.batch_size", self.batch_size), ("train.log_every", self.log_every)] {
            if v == 0 {
                out.push(Error::validation(name, "must be at least 1"));
            }
        }
        let lrs = [
            ("train.lr_gan", self.lr_gan),
            ("train.lr_seg", self.lr_seg),
            ("train.lr_pretrain", self.lr_pretrain()),
            ("train.lr_disc", self.lr_disc()),
        ];
        for (name, v) in lrs {
            if !(v.is_finite() && v >= 0.0) {
                out.push(Error::validation(name, format!("{v} must be finite and non-negative")));
            }
        }
        for (name, v) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                out.push(Error::validation(name, format!("{v} must lie in [0, 1)")));
            }
        }
        out.extend(self.weights.problems());
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn lr_pretrain(&self) -> f64 {
        self.lr_pretrain.unwrap_or(self.lr_seg)
    }

    pub fn lr_disc(&self) -> f64 {
        self.lr_disc.unwrap_or(self.lr_gan)
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig::new(lr, self.adam_beta1, self.adam_beta2)
    }
}

/// Optimizer moments of every parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub g1: Adam<T>,
    pub g2: Adam<T>,
    pub d1: Adam<T>,
    pub d2: Adam<T>,
    pub s: Adam<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(bundle: &ModelBundle<T>) -> Self {
        Self {
            g1: Adam::new(&bundle.g1.tensors),
            g2: Adam::new(&bundle.g2.tensors),
            d1: Adam::new(&bundle.d1.tensors),
            d2: Adam::new(&bundle.d2.tensors),
            s: Adam::new(&bundle.s.tensors),
        }
    }

    pub fn groups(&self) -> [&Adam<T>; 5] {
        [&self.g1, &self.g2, &self.d1, &self.d2, &self.s]
    }
}

/// One row of the loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub report: LossReport,
    pub wall_time_s: f64,
}

pub const LOG_HEADER: &str = "epoch,step,l_gan1,l_gan2,l_gan,l_cyc,l_shape,l_total,wall_time_s";

impl LogRow {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.3}",
            self.epoch, self.step, r.l_gan1, r.l_gan2, r.l_gan, r.l_cyc, r.l_shape, r.l_total, self.wall_time_s
        )
    }
}

/// Counts of parameter-partition checks made during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PartitionAudit {
    pub d_steps: u64,
    pub g_steps: u64,
    pub s_steps: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    /// Mean report of each completed epoch.
    pub epoch_means: Vec<LossReport>,
    pub audit: PartitionAudit,
    /// Target-domain mask reads observed during training.
    pub target_mask_reads: u64,
}

impl TrainingLog {
    pub fn csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }
}

/// Per-epoch record of segmentor-only training.
#[derive(Clone, Debug, PartialEq)]
pub struct SegEpoch {
    pub epoch: usize,
    pub mean_ce: f64,
    /// Mean per-slice Myo Dice of the segmentor on its training images.
    pub train_myo_dice: f64,
}

pub fn seg_log_csv(rows: &[SegEpoch]) -> String {
    let mut out = String::from("epoch,mean_ce,train_myo_dice\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.9e},{:.6}", r.epoch, r.mean_ce, r.train_myo_dice);
    }
    out
}

fn splitmix(seed: u64, salt: u64) -> u64 {
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_image_size(ds: &Dataset, arch: &ArchConfig) -> Result<()> {
    match ds.image_size() {
        Some(s) if s == arch.image_size => Ok(()),
        Some(s) => Err(Error::Shape(format!(
            "{}: images are {s} px but the architecture expects {}",
            ds.manifest_path.display(),
            arch.image_size
        ))),
        None => Err(Error::EmptyDataset),
    }
}

fn grads_of<T: Scalar>(grads: &mut crate::autograd::Gradients<T>, vars: &[Var]) -> Vec<Option<Tensor<T>>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Argmax over the class channel of `(B, C, H, W)` logits; ties go to the
/// lower class index.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<LabelMask>> {
    let [b, c, h, w] = logits.dims4()?;
    let d = logits.data();
    let plane = h * w;
    (0..b)
        .map(|n| {
            let base = n * c * plane;
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[base + k * plane + p] > d[base + best * plane + p] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(h, w, labels)
        })
        .collect()
}

/// Predicted label masks for a `(B, 1, S, S)` image batch.
pub fn segment<T: Scalar>(bundle: &ModelBundle<T>, images: &Tensor<T>) -> Result<Vec<LabelMask>> {
    argmax_labels(&nets::segmentor_forward(&bundle.s, &bundle.arch, images)?)
}

/// Segments a whole dataset in manifest order, `batch` images at a time.
pub fn segment_dataset<T: Scalar>(bundle: &ModelBundle<T>, ds: &Dataset, batch: usize) -> Result<Vec<LabelMask>> {
    check_image_size(ds, &bundle.arch)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(batch.max(1)) {
        let b: Batch<T> = make_batch(ds, chunk, false);
        out.extend(segment(bundle, &b.images)?);
    }
    Ok(out)
}

/// Mean per-slice Myo Dice of `preds` against the dataset masks.
fn mean_myo_dice(preds: &[LabelMask], ds: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(&ds.samples) {
        let gt = s.mask().ok_or_else(|| Error::validation("dataset", "mask required"))?;
        total += metrics::dice(&p.region(&[MYO]), &gt.region(&[MYO]))?;
    }
    Ok(total / preds.len() as f64)
}

/// One cross-entropy step of `S` on `(images, labels)`; returns the loss.
fn seg_step<T: Scalar>(
    s: &mut ParamSet<T>,
    opt: &mut Adam<T>,
    arch: &ArchConfig,
    cfg: &AdamConfig,
    images: Tensor<T>,
    labels: &[u8],
) -> Result<f64> {
    let mut g = Graph::new();
    let p = s.attach(&mut g, true);
    let x = g.constant(images);
    let logits = nets::segmentor(&mut g, &p, arch, x)?;
    let l = losses::shape(&mut g, labels, logits)?;
    let value = finite(g.value(l).item().to_f64().unwrap(), "segmentation loss")?;
    let mut grads = g.backward(l)?;
    opt.update(cfg, &mut s.tensors, &grads_of(&mut grads, &p))?;
    Ok(value)
}

/// Trains `S` alone with pixel cross-entropy. `translate` optionally maps
/// every input batch through a fixed generator first.
fn train_segmentor<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    opt: &mut Adam<T>,
    ds: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    epochs: usize,
    translate: Option<&ParamSet<T>>,
    salt: u64,
) -> Result<Vec<SegEpoch>> {
    let adam = cfg.adam(lr);
    let arch = bundle.arch.clone();
    let seed = splitmix(cfg.seed, salt);
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut ce = 0.0;
        let mut n = 0;
        for batch in batch_iterator::<T>(ds, cfg.batch_size, seed, epoch as u64)?.with_masks()? {
            let images = match translate {
                Some(g1) => nets::generator_forward(g1, &arch, &batch.images)?,
                None => batch.images,
            };
            let labels = batch.masks.expect("masks requested");
            ce += seg_step(&mut bundle.s, opt, &arch, &adam, images, &labels)?;
            n += 1;
            bundle.step += 1;
        }
        let preds = match translate {
            Some(g1) => {
                let idx: Vec<usize> = (0..ds.len()).collect();
                let mut out = Vec::new();
                for chunk in idx.chunks(cfg.batch_size) {
                    let b: Batch<T> = make_batch(ds, chunk, false);
                    out.extend(segment(bundle, &nets::generator_forward(g1, &arch, &b.images)?)?);
                }
                out
            }
            None => segment_dataset(bundle, ds, cfg.batch_size)?,
        };
        log.push(SegEpoch { epoch, mean_ce: ce / n as f64, train_myo_dice: mean_myo_dice(&preds, ds)? });
    }
    Ok(log)
}

/// Initializes a bundle from `cfg.seed` and trains its segmentor on the
/// labeled source images for `cfg.pretrain_epochs` at `cfg.lr_pretrain()`.
pub fn pretrain_segmentor<T: Scalar>(
    source: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ModelBundle<T>, Vec<SegEpoch>)> {
    cfg.validate()?;
    let mut bundle = ModelBundle::init(arch, cfg.seed)?;
    check_image_size(source, arch)?;
    source.require_masks()?;
    let mut opt = Adam::new(&bundle.s.tensors);
    let log = train_segmentor(&mut bundle, &mut opt, source, cfg, cfg.lr_pretrain(), cfg.pretrain_epochs, None, 1)?;
    bundle.step = 0;
    Ok((bundle, log))
}

/// Continues training `S` on `(G1(x), m_x)` pairs with the generator fixed.
pub fn train_segmentor_on_translated<T: Scalar>(
    bundle: &mut ModelBundle<T>,
    source: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<SegEpoch>> {
    cfg.validate()?;
    check_image_size(source, &bundle.arch)?;
    let g1 = bundle.g1.clone();
    let mut opt = Adam::new(&bundle.s.tensors);
    let step = bundle.step;
    let log = train_segmentor(bundle, &mut opt, source, cfg, cfg.lr_seg, cfg.post_seg_epochs, Some(&g1), 3)?;
    bundle.step = step;
    Ok(log)
}

/// Which groups a sub-step is allowed to change, as fingerprint indices.
const G_GROUPS: [usize; 2] = [0, 1];
const D_GROUPS: [usize; 2] = [2, 3];
const S_GROUPS: [usize; 1] = [4];

fn check_partition(before: [u64; 5], after: [u64; 5], own: &[usize], step: &str) -> Result<()> {
    for i in 0..5 {
        if !own.contains(&i) && before[i] != after[i] {
            return Err(Error::validation(
                "update partition",
                format!("{step} modified parameter group {}", ["G1", "G2", "D1", "D2", "S"][i]),
            ));
        }
    }
    Ok(())
}

/// Outputs of one joint training step.
struct StepOutcome {
    report: LossReport,
}

/// State of a joint adversarial run: parameters, optimizer moments and the
/// epoch counter. Checkpoints capture exactly this.
#[derive(Clone, Debug)]
pub struct GanSession<T> {
    pub bundle: ModelBundle<T>,
    pub opt: OptimizerState<T>,
    pub cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub audit: PartitionAudit,
}

impl<T: Scalar> GanSession<T> {
    pub fn new(bundle: ModelBundle<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        bundle.validate()?;
        let opt = OptimizerState::new(&bundle);
        Ok(Self { bundle, opt, cfg, epoch: 0, audit: PartitionAudit::default() })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.bundle.validate()?;
        Ok(Self { bundle: ckpt.bundle, opt: ckpt.optimizer, cfg: ckpt.config, epoch: ckpt.epoch, audit: PartitionAudit::default() })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            bundle: self.bundle.clone(),
            optimizer: self.opt.clone(),
            config: self.cfg.clone(),
            epoch: self.epoch,
            format_version: checkpoint::FORMAT_VERSION,
        }
    }

    fn update_segmentor(&self) -> bool {
        self.cfg.weights.lambda_shape > 0.0 || self.cfg.noshape_joint
    }

    /// Target batch order for `epoch`: whole shuffled passes over the
    /// target set, concatenated until `needed` indices are available.
    fn target_order(&self, n_target: usize, needed: usize, epoch: usize) -> Vec<usize> {
        let seed = splitmix(self.cfg.seed, 2);
        let mut order = Vec::with_capacity(needed + n_target);
        let mut pass = 0u64;
        while order.len() < needed {
            order.extend(epoch_permutation(n_target, seed, ((epoch as u64) << 20) | pass));
            pass += 1;
        }
        order
    }

    fn step(&mut self, x: &Batch<T>, y: &Batch<T>) -> Result<StepOutcome> {
        let arch = self.bundle.arch.clone();
        let w = self.cfg.weights;
        let adam_gan = self.cfg.adam(self.cfg.lr_gan);
        let adam_disc = self.cfg.adam(self.cfg.lr_disc());
        let adam_seg = self.cfg.adam(self.cfg.lr_seg);
        let mask_x = x.masks.as_deref().expect("source batch carries masks");

        // Generator graph: translations and reconstructions.
        let mut gg = Graph::new();
        let pg1 = self.bundle.g1.attach(&mut gg, true);
        let pg2 = self.bundle.g2.attach(&mut gg, true);
        let xv = gg.constant(x.images.clone());
        let yv = gg.constant(y.images.clone());
        let fake_y = nets::generator(&mut gg, &pg1, &arch, xv)?;
        let fake_x = nets::generator(&mut gg, &pg2, &arch, yv)?;
        let rec_x = nets::generator(&mut gg, &pg2, &arch, fake_y)?;
        let rec_y = nets::generator(&mut gg, &pg1, &arch, fake_x)?;

        // (a) discriminators on detached translations
        let before = self.bundle.fingerprints();
        let (l_gan1, l_gan2) = {
            let mut g = Graph::new();
            let pd1 = self.bundle.d1.attach(&mut g, true);
            let pd2 = self.bundle.d2.attach(&mut g, true);
            let real_y = g.constant(y.images.clone());
            let real_x = g.constant(x.images.clone());
            let fy = g.constant(gg.value(fake_y).clone());
            let fx = g.constant(gg.value(fake_x).clone());
            let s_real_y = nets::discriminator(&mut g, &pd1, &arch, real_y)?;
            let s_fake_y = nets::discriminator(&mut g, &pd1, &arch, fy)?;
            let s_real_x = nets::discriminator(&mut g, &pd2, &arch, real_x)?;
            let s_fake_x = nets::discriminator(&mut g, &pd2, &arch, fx)?;
            let v1 = losses::adversarial_d(&mut g, s_real_y, s_fake_y)?;
            let v2 = losses::adversarial_d(&mut g, s_real_x, s_fake_x)?;
            let sum = g.add(v1, v2)?;
            let target = g.scale(sum, -0.5);
            let l1 = finite(g.value(v1).item().to_f64().unwrap(), "l_gan1")?;
            let l2 = finite(g.value(v2).item().to_f64().unwrap(), "l_gan2")?;
            let mut grads = g.backward(target)?;
            self.opt.d1.update(&adam_disc, &mut self.bundle.d1.tensors, &grads_of(&mut grads, &pd1))?;
            self.opt.d2.update(&adam_disc, &mut self.bundle.d2.tensors, &grads_of(&mut grads, &pd2))?;
            (l1, l2)
        };
        let after_d = self.bundle.fingerprints();
        check_partition(before, after_d, &D_GROUPS, "discriminator step")?;
        self.audit.d_steps += 1;

        // (b) generators against the updated discriminators
        let pd1 = self.bundle.d1.attach(&mut gg, false);
        let pd2 = self.bundle.d2.attach(&mut gg, false);
        let s_fy = nets::discriminator(&mut gg, &pd1, &arch, fake_y)?;
        let s_fx = nets::discriminator(&mut gg, &pd2, &arch, fake_x)?;
        let g_adv1 = losses::adversarial_g(&mut gg, s_fy)?;
        let g_adv2 = losses::adversarial_g(&mut gg, s_fx)?;
        let c1 = losses::cycle(&mut gg, xv, rec_x)?;
        let c2 = losses::cycle(&mut gg, yv, rec_y)?;
        let adv = gg.add(g_adv1, g_adv2)?;
        let adv = gg.scale(adv, 0.5);
        let cyc = gg.add(c1, c2)?;
        let cyc = gg.scale(cyc, 0.5);
        let cyc_w = gg.scale(cyc, w.lambda_cyc);
        let mut target = gg.add(adv, cyc_w)?;
        let mut l_shape = 0.0;
        if w.lambda_shape > 0.0 {
            let ps = self.bundle.s.attach(&mut gg, false);
            let logits = nets::segmentor(&mut gg, &ps, &arch, fake_y)?;
            let sh = losses::shape(&mut gg, mask_x, logits)?;
            l_shape = gg.value(sh).item().to_f64().unwrap();
            let sh_w = gg.scale(sh, w.lambda_shape);
            target = gg.add(target, sh_w)?;
        }
        let val = |g: &Graph<T>, v: Var| g.value(v).item().to_f64().unwrap();
        let adv_terms = AdversarialTerms { l_gan1, l_gan2, g_adv1: val(&gg, g_adv1), g_adv2: val(&gg, g_adv2) };
        let cyc_terms = CycleTerms { l_cyc1: val(&gg, c1), l_cyc2: val(&gg, c2), l_cyc: val(&gg, cyc) };
        finite(val(&gg, target), "generator objective")?;
        let mut grads = gg.backward(target)?;
        self.opt.g1.update(&adam_gan, &mut self.bundle.g1.tensors, &grads_of(&mut grads, &pg1))?;
        self.opt.g2.update(&adam_gan, &mut self.bundle.g2.tensors, &grads_of(&mut grads, &pg2))?;
        drop(grads);
        drop(gg);
        let after_g = self.bundle.fingerprints();
        check_partition(after_d, after_g, &G_GROUPS, "generator step")?;
        self.audit.g_steps += 1;

        // (c) segmentor on fresh translations
        if self.update_segmentor() {
            let fresh = nets::generator_forward(&self.bundle.g1, &arch, &x.images)?;
            seg_step(&mut self.bundle.s, &mut self.opt.s, &arch, &adam_seg, fresh, mask_x)?;
            let after_s = self.bundle.fingerprints();
            check_partition(after_g, after_s, &S_GROUPS, "segmentor step")?;
            self.audit.s_steps += 1;
        }

        let (report, _) = losses::total_objective(&adv_terms, &cyc_terms, l_shape, &w)?;
        debug_assert!(report.is_consistent(&w));
        self.bundle.step += 1;
        Ok(StepOutcome { report })
    }

    /// Runs one epoch over the source set, appending rows to `log`.
    pub fn run_epoch(&mut self, source: &Dataset, target: &Dataset, log: &mut TrainingLog) -> Result<()> {
        let clock = Instant::now();
        let probe = MaskReadProbe::start();
        let seed = splitmix(self.cfg.seed, 1);
        let epoch = self.epoch;
        let batches = batch_iterator::<T>(source, self.cfg.batch_size, seed, epoch as u64)?.with_masks()?;
        let steps = batches.num_batches();
        let t_order = self.target_order(target.len(), steps * self.cfg.batch_size, epoch);
        let mut reports = Vec::with_capacity(steps);
        for (i, x) in batches.enumerate() {
            let lo = i * self.cfg.batch_size;
            let y: Batch<T> = make_batch(target, &t_order[lo..lo + x.len()], false);
            let out = self.step(&x, &y)?;
            if self.bundle.step % self.cfg.log_every as u64 == 0 {
                let wall = if self.cfg.deterministic { 0.0 } else { clock.elapsed().as_secs_f64() };
                log.rows.push(LogRow { epoch, step: self.bundle.step, report: out.report, wall_time_s: wall });
            }
            reports.push(out.report);
        }
        log.epoch_means.push(mean_report(&reports));
        log.audit = self.audit;
        log.target_mask_reads += probe.since(Domain::Target);
        self.epoch += 1;
        Ok(())
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        l_gan1: avg(|r| r.l_gan1),
        l_gan2: avg(|r| r.l_gan2),
        l_gan: avg(|r| r.l_gan),
        l_cyc1: avg(|r| r.l_cyc1),
        l_cyc2: avg(|r| r.l_cyc2),
        l_cyc: avg(|r| r.l_cyc),
        l_shape: avg(|r| r.l_shape),
        l_total: avg(|r| r.l_total),
    }
}

/// Where a joint run writes periodic and diagnostic checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
}

impl CheckpointSink {
    pub fn to(dir: &Path) -> Self {
        Self { dir: Some(dir.to_path_buf()) }
    }

    fn save<T: Scalar>(&self, session: &GanSession<T>, name: &str) -> Result<Option<PathBuf>> {
        match &self.dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join(name);
                checkpoint::save(&session.checkpoint(), &p)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }
}

/// Continues `session` until `session.cfg.epochs` epochs are complete.
pub fn run_session<T: Scalar>(
    session: &mut GanSession<T>,
    source: &Dataset,
    target: &Dataset,
    sink: &CheckpointSink,
) -> Result<TrainingLog> {
    check_image_size(source, &session.bundle.arch)?;
    check_image_size(target, &session.bundle.arch)?;
    source.require_masks()?;
    let mut log = TrainingLog::default();
    while session.epoch < session.cfg.epochs {
        let snapshot = session.clone();
        if let Err(e) = session.run_epoch(source, target, &mut log) {
            if matches!(e, Error::NonFinite(_)) {
                if let Some(p) = sink.save(&snapshot, "diagnostic.ckpt")? {
                    return Err(Error::NonFinite(format!("{e}; last good state saved to {}", p.display())));
                }
            }
            return Err(e);
        }
        let every = session.cfg.checkpoint_every;
        if every > 0 && (session.epoch % every == 0 || session.epoch == session.cfg.epochs) {
            sink.save(session, &format!("epoch_{:04}.ckpt", session.epoch))?;
        }
    }
    Ok(log)
}

/// Joint adversarial training from `bundle` for `cfg.epochs` epochs.
pub fn train_shape_transfer_gan<T: Scalar>(
    source: &Dataset,
    target: &Dataset,
    bundle: ModelBundle<T>,
    cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<(ModelBundle<T>, TrainingLog)> {
    let mut session = GanSession::new(bundle, cfg.clone())?;
    let log = run_session(&mut session, source, target, sink)?;
    Ok((session.bundle, log))
}

/// The three compared training pipelines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Segmentor trained on source images only.
    Unet,
    /// Adversarial translation without the shape term.
    Noshape,
    /// Full objective with the embedded segmentor.
    Shapetransfer,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Unet, Mode::Noshape, Mode::Shapetransfer];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Unet => "unet",
            Mode::Noshape => "noshape",
            Mode::Shapetransfer => "shapetransfer",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::validation("mode", format!("unknown mode {s:?} (unet|noshape|shapetransfer)")))
    }
}

#[derive(Clone, Debug)]
pub struct ModeOutcome<T> {
    pub bundle: ModelBundle<T>,
    pub pretrain_log: Vec<SegEpoch>,
    pub gan_log: Option<TrainingLog>,
    pub post_log: Vec<SegEpoch>,
    pub target_mask_reads: u64,
}

/// Runs one complete pipeline. Target masks are never consulted.
pub fn run_mode<T: Scalar>(
    mode: Mode,
    source: &Dataset,
    target: &Dataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<ModeOutcome<T>> {
    let probe = MaskReadProbe::start();
    let (bundle, pretrain_log) = pretrain_segmentor::<T>(source, arch, cfg)?;
    let mut out = run_mode_pretrained(mode, source, target, bundle, pretrain_log, cfg, sink)?;
    out.target_mask_reads = probe.since(Domain::Target);
    Ok(out)
}

/// Runs the stages of `mode` that follow segmentor pretraining, starting
/// from an already pretrained bundle.
pub fn run_mode_pretrained<T: Scalar>(
    mode: Mode,
    source: &Dataset,
    target: &Dataset,
    bundle: ModelBundle<T>,
    pretrain_log: Vec<SegEpoch>,
    cfg: &TrainConfig,
    sink: &CheckpointSink,
) -> Result<ModeOutcome<T>> {
    let probe = MaskReadProbe::start();
    let mut out = ModeOutcome { bundle, pretrain_log, gan_log: None, post_log: Vec::new(), target_mask_reads: 0 };
    match mode {
        Mode::Unet => {}
        Mode::Shapetransfer => {
            let (b, log) = train_shape_transfer_gan(source, target, out.bundle, cfg, sink)?;
            out.bundle = b;
            out.gan_log = Some(log);
        }
        Mode::Noshape => {
            let mut c = cfg.clone();
            c.weights.lambda_shape = 0.0;
            let (mut b, log) = train_shape_transfer_gan(source, target, out.bundle, &c, sink)?;
            if !c.noshape_joint {
                out.post_log = train_segmentor_on_translated(&mut b, source, &c)?;
            }
            out.bundle = b;
            out.gan_log = Some(log);
        }
    }
    out.target_mask_reads = probe.since(Domain::Target);
    Ok(out)
}
