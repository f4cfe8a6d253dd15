//! Stage runners: source training, CDA, region split, CRA and its
//! comparison variants, with resumable snapshots and per-stage reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::checkpoint::{Checkpoint, Stage, MANIFEST};
use crate::error::{Error, ErrorKind, Result};
use crate::labels::LabelMap;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::nn::{Discriminator, SegModel, SegTrain};
use crate::optim::PolySchedule;
use crate::region::{class_counts, entropy_map, find_rare_classes, pseudo_labels, split_regions, SplitSummary};
use crate::synth::{generate_dataset, splitmix64, Dataset, Domain};
use crate::tensor::Tensor;

use super::config::{RunConfig, SourceSlot, StageBudget};
use super::data::{
    draw, iteration_rng, read_split_summary, write_split_images, write_split_summary, ImageStore, RegionStore,
};
use super::log::MetricsLog;
use super::steps::{cda_iteration, cra_iteration, seg_step, GradRouting, Learner, Losses, Variant};

/// Non-config knobs of one invocation.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    /// Accept checkpoints and splits produced by a different config hash.
    pub allow_hash_mismatch: bool,
    /// Stop after this many iterations of this stage, leaving a resumable
    /// snapshot (or the complete checkpoint when the stage just finished).
    pub stop_after: Option<(Stage, usize)>,
    /// Echo metrics log lines to standard output.
    pub echo_logs: bool,
}

/// Pseudo-label quality and region statistics after the split, measured
/// against held-out target labels. Diagnostics only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitTelemetry {
    pub lambda: f64,
    pub rare_classes: Vec<usize>,
    pub untrusted_fraction: f64,
    pub trusted_pseudo_accuracy: Option<f64>,
    pub untrusted_pseudo_accuracy: Option<f64>,
    pub mean_entropy_trusted: f64,
    pub mean_entropy_untrusted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config_hash: String,
    pub seed: u64,
    pub config: Value,
    /// Source-only, CDA, split (the CDA model with region statistics), CRA.
    pub stages: Vec<MetricsReport>,
    pub split: SplitTelemetry,
}

impl PipelineReport {
    pub fn without_timing(&self) -> PipelineReport {
        PipelineReport {
            stages: self.stages.iter().map(|r| r.without_timing()).collect(),
            ..self.clone()
        }
    }

    pub fn stage(&self, stage: Stage) -> Option<&MetricsReport> {
        self.stages.iter().find(|r| r.stage == stage.as_str())
    }
}

/// CDA baseline followed by the three variants trained from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<MetricsReport>,
}

impl ComparisonReport {
    pub fn row(&self, stage: Stage) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.stage == stage.as_str())
    }
}

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|k| if k == 0 { "bg".to_string() } else { format!("c{k}") })
        .collect()
}

enum LoopEnd {
    Completed,
    Stopped,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn as_diverged(stage: Stage, iteration: usize, e: Error) -> Error {
    if e.kind() == ErrorKind::Numerical {
        Error::Diverged {
            stage: stage.as_str(),
            iteration,
            detail: e.to_string(),
        }
    } else {
        e
    }
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ salt)
}

/// Generates the dataset described by `cfg.data` under its root.
pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.data;
    generate_dataset(&d.scene, &d.root, d.source_train, d.target_train, d.target_eval)?;
    Ok(())
}

/// Opens the configured dataset, generating it first when absent.
pub fn ensure_dataset(cfg: &RunConfig) -> Result<()> {
    if !cfg.data.root.join("dataset.json").exists() {
        gen_data(cfg)?;
    }
    Ok(())
}

/// One experiment directory bound to one config.
pub struct Run {
    cfg: RunConfig,
    hash: String,
    control: RunControl,
    log: MetricsLog,
    dataset: Dataset,
    eval: Option<(Tensor, LabelMap)>,
}

impl Run {
    pub fn open(cfg: RunConfig, control: RunControl) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash()?;
        let dataset = Dataset::open(&cfg.data.root)?;
        let m = dataset.manifest();
        let d = &cfg.data;
        if m.spec != d.scene || (m.source_train, m.target_train, m.target_eval) != (d.source_train, d.target_train, d.target_eval)
        {
            return Err(Error::Config(format!(
                "dataset at {} was generated from a different data config; rerun gen-data",
                d.root.display()
            )));
        }
        let log = MetricsLog::open(&cfg.output_dir.join("metrics.jsonl"), control.echo_logs)?;
        Ok(Self {
            cfg,
            hash,
            control,
            log,
            dataset,
            eval: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn checkpoint_dir(&self, stage: Stage) -> PathBuf {
        self.cfg.output_dir.join("checkpoints").join(stage.as_str())
    }

    fn partial_dir(&self, stage: Stage) -> PathBuf {
        self.cfg.output_dir.join("checkpoints").join(format!("{}.partial", stage.as_str()))
    }

    pub fn split_dir(&self) -> PathBuf {
        self.cfg.output_dir.join("split")
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join("reports").join(format!("{name}.json"))
    }

    fn fresh_learner(&self) -> Learner {
        let c = &self.cfg;
        let k = c.classes();
        let seg = SegModel::init(&c.model, 3, k, derive_seed(c.seed, 1));
        let disc = Discriminator::init(&c.model, k, derive_seed(c.seed, 2));
        Learner::new(seg, disc, &c.optim)
    }

    /// The finished checkpoint of `stage`, or the prerequisite error naming
    /// `command`.
    pub fn load_complete(&self, stage: Stage, command: &'static str) -> Result<Checkpoint> {
        let dir = self.checkpoint_dir(stage);
        if !dir.join(MANIFEST).exists() {
            return Err(Error::MissingPrerequisite {
                what: format!("{stage} checkpoint at {}", dir.display()),
                command,
            });
        }
        let ck = Checkpoint::load_verified(&dir, &self.hash, self.control.allow_hash_mismatch)?;
        if ck.stage != stage || !ck.complete {
            return Err(Error::StageOrder(format!(
                "{} holds a {} checkpoint (complete: {}), expected a finished {stage}",
                dir.display(),
                ck.stage,
                ck.complete
            )));
        }
        Ok(ck)
    }

    fn learner_from(&self, stage: Stage, command: &'static str) -> Result<Learner> {
        let ck = self.load_complete(stage, command)?;
        let mut l = self.fresh_learner();
        l.restore_networks(&ck, &self.cfg.optim)?;
        Ok(l)
    }

    fn eval_set(&mut self) -> Result<&(Tensor, LabelMap)> {
        if self.eval.is_none() {
            let b = self.dataset.load_eval()?;
            let labels = b.labels.ok_or_else(|| Error::invalid("eval", "evaluation batch without labels"))?;
            self.eval = Some((b.images, labels));
        }
        Ok(self.eval.as_ref().expect("just loaded"))
    }

    /// Confusion matrix of `seg` on the held-out target images.
    pub fn confusion(&mut self, seg: &SegModel) -> Result<ConfusionMatrix> {
        let k = self.cfg.classes();
        let chunk = self.cfg.eval_batch;
        let (images, labels) = self.eval_set()?;
        let n = images.dims4()?.0;
        let mut cm = ConfusionMatrix::new(k);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let (_, _, p) = seg.predict(&images.batch_slice(start, end)?)?;
            let pred = pseudo_labels(&p)?;
            let truth = LabelMap::stack(&(start..end).map(|i| labels.image(i)).collect::<Vec<_>>())?;
            cm.accumulate(&pred, &truth)?;
        }
        Ok(cm)
    }

    pub fn evaluate(&mut self, seg: &SegModel, name: &str, stage: Stage, secs: f64) -> Result<MetricsReport> {
        let cm = self.confusion(seg)?;
        let iou = cm.iou();
        Ok(MetricsReport {
            name: name.to_string(),
            stage: stage.as_str().to_string(),
            per_class_iou: iou.per_class,
            miou: iou.miou,
            pixel_accuracy: cm.accuracy(),
            untrusted_fraction: None,
            seed: self.cfg.seed,
            config_hash: self.hash.clone(),
            config: self.cfg.echo()?,
            wall_clock_secs: secs,
        })
    }

    fn finish_report(&mut self, report: &MetricsReport) -> Result<()> {
        write_json(&self.report_path(&report.stage), report)?;
        self.log.event(
            "eval",
            &report.stage,
            0,
            json!({"miou": report.miou, "per_class_iou": report.per_class_iou, "name": report.name}),
        )
    }

    /// Shared iteration loop: schedules, logging, snapshots and resume.
    fn train_loop<F>(&mut self, stage: Stage, budget: StageBudget, l: &mut Learner, mut step: F) -> Result<LoopEnd>
    where
        F: FnMut(&mut Learner, usize, f64, f64) -> Result<(Losses, Map<String, Value>)>,
    {
        let n = budget.iterations;
        let partial = self.partial_dir(stage);
        let mut start = 0;
        if partial.join(MANIFEST).exists() {
            let ck = Checkpoint::load_verified(&partial, &self.hash, self.control.allow_hash_mismatch)?;
            if ck.stage != stage || ck.complete || ck.iteration >= n {
                return Err(Error::StageOrder(format!(
                    "{} is not a resumable {stage} snapshot",
                    partial.display()
                )));
            }
            l.restore_all(&ck)?;
            start = ck.iteration;
            self.log.event("resume", stage.as_str(), start, json!({}))?;
        }
        let o = self.cfg.optim.clone();
        let sched_g = PolySchedule::new(o.sgd_lr, o.poly_power, n);
        let sched_d = PolySchedule::new(o.adam_lr, o.poly_power, n);
        for t in start..n {
            let lr_g = sched_g.lr(t)?;
            let lr_d = sched_d.lr(t)?;
            let (losses, extra) = step(l, t, lr_g, lr_d).map_err(|e| as_diverged(stage, t, e))?;
            if let Some((name, v)) = losses.iter().find(|(_, v)| !v.is_finite()) {
                return Err(Error::Diverged {
                    stage: stage.as_str(),
                    iteration: t,
                    detail: format!("{name} loss is {v}"),
                });
            }
            let done = t + 1;
            if t % self.cfg.log_interval == 0 || done == n {
                let mut fields = Map::new();
                fields.insert("lr_g".into(), json!(lr_g));
                fields.insert("lr_d".into(), json!(lr_d));
                fields.insert("losses".into(), json!(losses));
                fields.extend(extra);
                self.log.event("train", stage.as_str(), t, Value::Object(fields))?;
            }
            if self.cfg.eval_interval > 0 && done % self.cfg.eval_interval == 0 && done < n {
                let miou = self.confusion(&l.seg)?.iou().miou;
                self.log.event("eval", stage.as_str(), done, json!({"miou": miou}))?;
            }
            let stop = self.control.stop_after == Some((stage, done));
            let snapshot = self.cfg.checkpoint_interval > 0 && done % self.cfg.checkpoint_interval == 0;
            if done < n && (stop || snapshot) {
                l.to_checkpoint(stage, done, false, &self.hash).save(&partial)?;
            }
            if stop && done < n {
                self.log.event("stopped", stage.as_str(), done, json!({}))?;
                return Ok(LoopEnd::Stopped);
            }
        }
        l.to_checkpoint(stage, n, true, &self.hash).save(&self.checkpoint_dir(stage))?;
        if partial.exists() {
            fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        }
        if self.control.stop_after == Some((stage, n)) {
            return Ok(LoopEnd::Stopped);
        }
        Ok(LoopEnd::Completed)
    }

    /// Returns the finished learner of `stage` when its checkpoint exists.
    fn finished(&self, stage: Stage) -> Result<Option<Learner>> {
        if !self.checkpoint_dir(stage).join(MANIFEST).exists() {
            return Ok(None);
        }
        let ck = self.load_complete(stage, "")?;
        let mut l = self.fresh_learner();
        l.restore_all(&ck)?;
        Ok(Some(l))
    }

    /// Supervised training on the source domain. `None` when stopped early.
    pub fn train_source(&mut self) -> Result<Option<MetricsReport>> {
        let clock = Instant::now();
        let l = match self.finished(Stage::Source)? {
            Some(l) => l,
            None => {
                let mut l = self.fresh_learner();
                let source = ImageStore::new(self.dataset.load_all(Domain::Source)?)?;
                let (cfg, seed) = (self.cfg.clone(), self.cfg.seed);
                let end = self.train_loop(Stage::Source, cfg.source, &mut l, |l, t, lr_g, _| {
                    let d = draw(
                        &mut iteration_rng(seed, Stage::Source, 0, t),
                        source.len(),
                        cfg.source.batch,
                        source.image_size(),
                        cfg.crop,
                    );
                    let (s, _) = seg_step(
                        l,
                        &source.images(&d)?,
                        &source.labels(&d)?,
                        None,
                        SegTrain::All,
                        cfg.weights.seg,
                        lr_g,
                    )?;
                    s.routing.expect("source seg", GradRouting::G)?;
                    Ok((Losses::from([("seg", s.loss)]), Map::new()))
                })?;
                if let LoopEnd::Stopped = end {
                    return Ok(None);
                }
                l
            }
        };
        let report = self.evaluate(&l.seg, "Source only", Stage::Source, clock.elapsed().as_secs_f64())?;
        self.finish_report(&report)?;
        Ok(Some(report))
    }

    /// Fraction of probe pixels whose domain `D` identifies correctly.
    fn disc_domain_accuracy(l: &Learner, source: &Tensor, target: &Tensor) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (images, want_source) in [(source, true), (target, false)] {
            let (f, _, _) = l.seg.predict(images)?;
            let p = l.disc.predict(&f)?;
            let (b, c, h, w) = p.dims4()?;
            let (k, hw) = (c / 2, h * w);
            for bi in 0..b {
                for s in 0..hw {
                    let block = |off: usize| (0..k).map(|j| p.data()[(bi * c + off + j) * hw + s]).sum::<f64>();
                    let says_source = block(0) > block(k);
                    correct += (says_source == want_source) as usize;
                    total += 1;
                }
            }
        }
        Ok(correct as f64 / total as f64)
    }

    /// Adversarial cross-domain alignment starting from the source model.
    pub fn train_cda(&mut self) -> Result<Option<MetricsReport>> {
        let clock = Instant::now();
        let l = match self.finished(Stage::Cda)? {
            Some(l) => l,
            None => {
                let mut l = self.learner_from(Stage::Source, "train-source")?;
                let source = ImageStore::new(self.dataset.load_all(Domain::Source)?)?;
                let target = ImageStore::new(self.dataset.load_all(Domain::Target)?)?;
                let probe_n = 4.min(source.len()).min(self.cfg.data.target_eval);
                let probe_source = source.range(source.len() - probe_n, source.len())?;
                let probe_target = self.eval_set()?.0.batch_slice(0, probe_n)?;
                let (cfg, seed) = (self.cfg.clone(), self.cfg.seed);
                let end = self.train_loop(Stage::Cda, cfg.cda, &mut l, |l, t, lr_g, lr_d| {
                    let mut rng = iteration_rng(seed, Stage::Cda, 0, t);
                    let ds = draw(&mut rng, source.len(), cfg.cda.batch, source.image_size(), cfg.crop);
                    let dt = draw(&mut rng, target.len(), cfg.cda.batch, target.image_size(), cfg.crop);
                    let (losses, _) = cda_iteration(
                        l,
                        &cfg,
                        (&source.images(&ds)?, &source.labels(&ds)?),
                        &target.images(&dt)?,
                        lr_g,
                        lr_d,
                    )?;
                    let mut extra = Map::new();
                    if t % cfg.log_interval == 0 || t + 1 == cfg.cda.iterations {
                        let acc = Self::disc_domain_accuracy(l, &probe_source, &probe_target)?;
                        extra.insert("disc_domain_accuracy".into(), json!(acc));
                    }
                    Ok((losses, extra))
                })?;
                if let LoopEnd::Stopped = end {
                    return Ok(None);
                }
                l
            }
        };
        let report = self.evaluate(&l.seg, "CDA", Stage::Cda, clock.elapsed().as_secs_f64())?;
        self.finish_report(&report)?;
        Ok(Some(report))
    }

    /// Pseudo-labels, entropy maps and trusted masks of the target pool
    /// under the CDA model, persisted per image.
    pub fn split_regions(&mut self) -> Result<(SplitSummary, SplitTelemetry, MetricsReport)> {
        let clock = Instant::now();
        let ck = self.load_complete(Stage::Cda, "train-cda")?;
        let mut l = self.fresh_learner();
        l.restore_networks(&ck, &self.cfg.optim)?;
        let k = self.cfg.classes();
        let lambda = self.cfg.lambda_value()?;
        let target = ImageStore::new(self.dataset.load_all(Domain::Target)?)?;
        let n = target.len();
        let chunk = self.cfg.eval_batch;
        let mut entropies = Vec::new();
        let mut pseudos = Vec::new();
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let (_, _, p) = l.seg.predict(&target.range(start, end)?)?;
            entropies.push(entropy_map(&p, true)?);
            pseudos.push(pseudo_labels(&p)?);
        }
        let counts = class_counts(&pseudos, k)?;
        let rare = find_rare_classes(&counts)?;
        let dir = self.split_dir();
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let truth = self.dataset.load_target_train_truth()?;
        let mut untrusted_px = 0usize;
        let mut total_px = 0usize;
        let (mut ent_t, mut ent_u) = (0.0, 0.0);
        let (mut hit_t, mut n_t, mut hit_u, mut n_u) = (0usize, 0usize, 0usize, 0usize);
        let mut first = 0;
        for (e, y) in entropies.iter().zip(&pseudos) {
            let s = split_regions(e, y, &rare, lambda)?;
            write_split_images(&dir, first, e, &s.trusted, y)?;
            let hw = y.pixels_per_image();
            for i in 0..y.len() {
                let truth_label = truth.data()[first * hw + i];
                let right = (y.data()[i] == truth_label) as usize;
                let ev = e.data()[i];
                if s.trusted.data()[i] == 1.0 {
                    hit_t += right;
                    n_t += 1;
                    ent_t += ev;
                } else {
                    hit_u += right;
                    n_u += 1;
                    ent_u += ev;
                }
            }
            untrusted_px += s.untrusted_count();
            total_px += y.len();
            first += y.batch();
        }
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let mean = |s: f64, c: usize| if c > 0 { s / c as f64 } else { 0.0 };
        let summary = SplitSummary {
            images: n,
            classes: k,
            lambda,
            rare_classes: rare.iter().copied().collect(),
            pseudo_label_counts: counts,
            untrusted_fraction: untrusted_px as f64 / total_px as f64,
            mean_entropy_untrusted: mean(ent_u, n_u),
            config_hash: self.hash.clone(),
        };
        write_split_summary(&dir, &summary)?;
        let telemetry = SplitTelemetry {
            lambda,
            rare_classes: summary.rare_classes.clone(),
            untrusted_fraction: summary.untrusted_fraction,
            trusted_pseudo_accuracy: ratio(hit_t, n_t),
            untrusted_pseudo_accuracy: ratio(hit_u, n_u),
            mean_entropy_trusted: mean(ent_t, n_t),
            mean_entropy_untrusted: mean(ent_u, n_u),
        };
        write_json(&self.report_path("split-telemetry"), &telemetry)?;
        self.log.event("split", Stage::Split.as_str(), 0, serde_json::to_value(&telemetry)?)?;
        let mut report = self.evaluate(&l.seg, "CDA (split)", Stage::Split, clock.elapsed().as_secs_f64())?;
        report.untrusted_fraction = Some(summary.untrusted_fraction);
        self.finish_report(&report)?;
        Ok((summary, telemetry, report))
    }

    /// The persisted split, checked against the current config hash.
    pub fn load_split(&self) -> Result<SplitSummary> {
        let summary = read_split_summary(&self.split_dir())?;
        if summary.config_hash != self.hash {
            if !self.control.allow_hash_mismatch {
                return Err(Error::HashMismatch {
                    what: format!("region split {}", self.split_dir().display()),
                    expected: self.hash.clone(),
                    found: summary.config_hash,
                });
            }
            log::warn!("region split comes from config {}", summary.config_hash);
        }
        Ok(summary)
    }

    /// Mean entropy over the untrusted pixels of the target pool.
    fn untrusted_entropy(&self, seg: &SegModel, target: &ImageStore, regions: &RegionStore) -> Result<f64> {
        let trusted = regions.trusted_all()?;
        let chunk = self.cfg.eval_batch;
        let n = target.len();
        let (mut sum, mut count) = (0.0, 0usize);
        for start in (0..n).step_by(chunk) {
            let end = (start + chunk).min(n);
            let (_, _, p) = seg.predict(&target.range(start, end)?)?;
            let e = entropy_map(&p, false)?;
            let hw = e.len() / (end - start);
            let m = &trusted.data()[start * hw..end * hw];
            for (&ev, &mv) in e.data().iter().zip(m) {
                if mv == 0.0 {
                    sum += ev;
                    count += 1;
                }
            }
        }
        Ok(if count > 0 { sum / count as f64 } else { 0.0 })
    }

    /// CRA, or one of its comparison variants, fine-tuning the CDA model on
    /// the persisted region split.
    pub fn train_variant(&mut self, variant: Variant) -> Result<Option<MetricsReport>> {
        let clock = Instant::now();
        let stage = variant.stage();
        let summary = self.load_split()?;
        let l = match self.finished(stage)? {
            Some(l) => l,
            None => {
                let mut l = self.learner_from(Stage::Cda, "train-cda")?;
                let target = ImageStore::new(self.dataset.load_all(Domain::Target)?)?;
                let regions = RegionStore::load(&self.split_dir(), target.len())?;
                let source = match (variant, self.cfg.cra_source_slot) {
                    (Variant::Cra, SourceSlot::SourceDomain) => {
                        Some(ImageStore::new(self.dataset.load_all(Domain::Source)?)?)
                    }
                    _ => None,
                };
                let before = self.untrusted_entropy(&l.seg, &target, &regions)?;
                let (cfg, seed) = (self.cfg.clone(), self.cfg.seed);
                let end = self.train_loop(stage, cfg.cra, &mut l, |l, t, lr_g, lr_d| {
                    let mut rng = iteration_rng(seed, Stage::Cra, 0, t);
                    let d = draw(&mut rng, target.len(), cfg.cra.batch, target.image_size(), cfg.crop);
                    let batch = regions.batch(&target, &d)?;
                    let src = match &source {
                        Some(s) => {
                            let ds = draw(&mut rng, s.len(), cfg.cra.batch, s.image_size(), cfg.crop);
                            Some(s.images(&ds)?)
                        }
                        None => None,
                    };
                    let (losses, _) = cra_iteration(l, &cfg, variant, &batch, src.as_ref(), lr_g, lr_d)?;
                    let frac = batch.untrusted.data().iter().sum::<f64>() / batch.untrusted.len() as f64;
                    let mut extra = Map::new();
                    extra.insert("untrusted_fraction".into(), json!(frac));
                    Ok((losses, extra))
                })?;
                if let LoopEnd::Stopped = end {
                    return Ok(None);
                }
                let after = self.untrusted_entropy(&l.seg, &target, &regions)?;
                self.log.event(
                    "untrusted-entropy",
                    stage.as_str(),
                    cfg.cra.iterations,
                    json!({"start": before, "end": after}),
                )?;
                l
            }
        };
        let mut report = self.evaluate(&l.seg, variant.label(), stage, clock.elapsed().as_secs_f64())?;
        report.untrusted_fraction = Some(summary.untrusted_fraction);
        self.finish_report(&report)?;
        Ok(Some(report))
    }

    /// Evaluation report of an existing finished checkpoint.
    pub fn evaluate_stage(&mut self, stage: Stage, name: &str) -> Result<MetricsReport> {
        let command = match stage {
            Stage::Source => "train-source",
            Stage::Cda | Stage::Split => "train-cda",
            Stage::Cra => "train-cra",
            Stage::PseudoOnly | Stage::EntropyMin => "compare-baselines",
        };
        let ck_stage = if stage == Stage::Split { Stage::Cda } else { stage };
        let ck = self.load_complete(ck_stage, command)?;
        let mut l = self.fresh_learner();
        l.restore_networks(&ck, &self.cfg.optim)?;
        self.evaluate(&l.seg, name, stage, 0.0)
    }
}

/// Source → CDA → split → CRA, skipping stages whose finished checkpoints
/// exist. `None` when stopped by [`RunControl::stop_after`].
pub fn run_pipeline(cfg: &RunConfig, control: RunControl) -> Result<Option<PipelineReport>> {
    ensure_dataset(cfg)?;
    let mut run = Run::open(cfg.clone(), control)?;
    let Some(source) = run.train_source()? else { return Ok(None) };
    let Some(cda) = run.train_cda()? else { return Ok(None) };
    if matches!(run.control.stop_after, Some((Stage::Split, _))) {
        run.split_regions()?;
        return Ok(None);
    }
    let (_, telemetry, split) = match run.load_split() {
        Ok(summary) => {
            let telemetry: SplitTelemetry = read_json(&run.report_path("split-telemetry"))?;
            let mut report = run.evaluate_stage(Stage::Split, "CDA (split)")?;
            report.untrusted_fraction = Some(summary.untrusted_fraction);
            (summary, telemetry, report)
        }
        Err(Error::MissingPrerequisite { .. }) => run.split_regions()?,
        Err(e) => return Err(e),
    };
    let Some(cra) = run.train_variant(Variant::Cra)? else { return Ok(None) };
    let report = PipelineReport {
        config_hash: run.hash.clone(),
        seed: cfg.seed,
        config: cfg.echo()?,
        stages: vec![source, cda, split, cra],
        split: telemetry,
    };
    write_json(&run.report_path("pipeline"), &report)?;
    Ok(Some(report))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// CDA baseline plus pseudo-labels-only, entropy minimization and CRA, all
/// fine-tuned from the same CDA checkpoint and region split.
pub fn run_comparison(cfg: &RunConfig, control: RunControl) -> Result<Option<ComparisonReport>> {
    let mut run = Run::open(cfg.clone(), control)?;
    run.load_split()?;
    let mut rows = vec![run.evaluate_stage(Stage::Cda, "CDA")?];
    for v in [Variant::PseudoOnly, Variant::EntropyMin, Variant::Cra] {
        match run.train_variant(v)? {
            Some(r) => rows.push(r),
            None => return Ok(None),
        }
    }
    let report = ComparisonReport {
        config_hash: run.hash.clone(),
        seed: cfg.seed,
        rows,
    };
    write_json(&run.report_path("comparison"), &report)?;
    Ok(Some(report))
}
