//! The training loop: caption and replay branches, pseudo-captioning,
//! optimization, per-epoch validation and checkpoint selection.

mod optim;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::corpus::{mix_batches, CaptionSplit, ReplaySample, TrainItem};
use crate::decode::{caption_image, BeamConfig, DecodeMethod};
use crate::error::{Error, Result};
use crate::losses::{
    caption_ce_grad, distill_loss_grad, kpred_loss_grad, DistillTemperature, LossBundle,
    LossWeights,
};
use crate::model::Model;
use crate::rng::derive_seed;
use crate::tensor::Mat;
use crate::text::{Keyword, TokenSequence, Vocabulary, PAD};

pub use optim::{cosine_lr, AdamW, AdamWConfig, Scheduler};

/// Model that writes the pseudo-captions for replay images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PseudoSource {
    Teacher,
    Student,
}

impl std::str::FromStr for PseudoSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(PseudoSource::Teacher),
            "student" => Ok(PseudoSource::Student),
            other => Err(Error::Config(format!("unknown pseudo-caption source {other:?}"))),
        }
    }
}

impl PseudoSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PseudoSource::Teacher => "teacher",
            PseudoSource::Student => "student",
        }
    }
}

/// Primary validation metric used to pick the kept checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectBy {
    /// Concept recognition, then generic CIDEr, then the earlier step.
    Recognition,
    /// Generic CIDEr, then concept recognition, then the earlier step.
    Cider,
    /// The last validated checkpoint.
    Last,
}

impl std::str::FromStr for SelectBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recognition" => Ok(SelectBy::Recognition),
            "cider" => Ok(SelectBy::Cider),
            "last" => Ok(SelectBy::Last),
            other => Err(Error::Config(format!("unknown selection criterion {other:?}"))),
        }
    }
}

impl SelectBy {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectBy::Recognition => "recognition",
            SelectBy::Cider => "cider",
            SelectBy::Last => "last",
        }
    }
}

impl std::fmt::Display for PseudoSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::fmt::Display for SelectBy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub use_cosine_schedule: bool,
    pub label_smoothing: f64,
    pub lambda_k: f64,
    pub lambda_d: f64,
    pub distill_temperature: f64,
    pub pseudo_caption_method: DecodeMethod,
    pub pseudo_caption_source: PseudoSource,
    pub beam_width: usize,
    pub pseudo_max_len: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Validate and checkpoint after every this many epochs (and always after
    /// the last one).
    pub checkpoint_every: usize,
    pub select_by: SelectBy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            lr_max: 3e-3,
            lr_min: 3e-5,
            use_cosine_schedule: true,
            label_smoothing: 0.1,
            lambda_k: 1.0,
            lambda_d: 1.0,
            distill_temperature: 16.0,
            pseudo_caption_method: DecodeMethod::Beam,
            pseudo_caption_source: PseudoSource::Teacher,
            beam_width: 5,
            pseudo_max_len: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
            checkpoint_every: 1,
            select_by: SelectBy::Recognition,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 <= lr_min ({}) <= lr_max ({})", self.lr_min, self.lr_max));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("optimizer needs betas in [0, 1), eps > 0, weight_decay >= 0".into());
        }
        self.weights()?;
        self.temperature()?;
        self.beam()?;
        Ok(())
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_k, self.lambda_d)
    }

    pub fn temperature(&self) -> Result<DistillTemperature> {
        DistillTemperature::new(self.distill_temperature)
    }

    pub fn beam(&self) -> Result<BeamConfig> {
        let b = BeamConfig {
            width: self.beam_width,
            max_len: self.pseudo_max_len,
            length_penalty: 0.0,
        };
        b.validate()?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionExample {
    pub patches: Mat,
    pub tokens: TokenSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayExample {
    pub patches: Mat,
    pub keyword: Keyword,
}

/// Tokenized training pools.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainData {
    pub captions: Vec<CaptionExample>,
    pub replay: Vec<ReplayExample>,
}

impl TrainData {
    /// One example per annotation of `split`.
    pub fn captions_from(split: &CaptionSplit, vocab: &Vocabulary, max_len: usize) -> Result<Vec<CaptionExample>> {
        split
            .annotations
            .iter()
            .map(|a| {
                let tokens = vocab.encode(&a.caption);
                if tokens.len() > max_len {
                    return Err(Error::Data(format!(
                        "caption {:?} has {} tokens, model max_len is {max_len}",
                        a.caption,
                        tokens.len()
                    )));
                }
                let img = split.images.get(a.image_id as usize).ok_or_else(|| {
                    Error::Data(format!("annotation {} references unknown image {}", a.id, a.image_id))
                })?;
                Ok(CaptionExample {
                    patches: img.patches.clone(),
                    tokens,
                })
            })
            .collect()
    }

    pub fn replay_from(samples: &[ReplaySample], vocab: &Vocabulary) -> Result<Vec<ReplayExample>> {
        samples
            .iter()
            .map(|s| {
                Ok(ReplayExample {
                    patches: s.image.patches.clone(),
                    keyword: s.keyword_tokens(vocab)?,
                })
            })
            .collect()
    }
}

/// A pseudo-caption with the teacher's logits over it.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTarget {
    pub tokens: TokenSequence,
    pub teacher_logits: Mat,
}

pub fn pseudo_caption(source: &Model, patches: &Mat, cfg: &TrainConfig) -> Result<TokenSequence> {
    Ok(caption_image(source, patches, cfg.pseudo_caption_method, &cfg.beam()?)?.tokens)
}

pub fn pseudo_target(source: &Model, teacher: &Model, patches: &Mat, cfg: &TrainConfig) -> Result<PseudoTarget> {
    let tokens = pseudo_caption(source, patches, cfg)?;
    let teacher_logits = teacher.forward(patches, &tokens)?;
    Ok(PseudoTarget {
        tokens,
        teacher_logits,
    })
}

/// Batch losses (each branch averaged over its own samples) and the gradient
/// of the weighted total. `targets[i]` must be filled for every replay item.
pub fn loss_and_gradients(
    student: &Model,
    batch: &[TrainItem],
    data: &TrainData,
    targets: &[Option<PseudoTarget>],
    cfg: &TrainConfig,
) -> Result<(LossBundle, Gradients)> {
    let weights = cfg.weights()?;
    let temperature = cfg.temperature()?;
    let nc = batch.iter().filter(|i| matches!(i, TrainItem::Caption(_))).count();
    let nr = batch.len() - nc;
    let mut grads = student.zero_grads();
    let (mut ce, mut cov, mut rep, mut dist) = (0.0, 0.0, 0.0, 0.0);
    let replay_has_gradient = weights.lambda_k != 0.0 || weights.lambda_d != 0.0;
    for item in batch {
        match *item {
            TrainItem::Caption(i) => {
                let ex = data.captions.get(i).ok_or_else(|| Error::Data(format!("caption index {i}")))?;
                let pass = student.forward_pass(&ex.patches, &ex.tokens)?;
                let (l, mut g) = caption_ce_grad(pass.logits(), &ex.tokens, cfg.label_smoothing, Some(PAD))?;
                g.scale(1.0 / nc as f64);
                student.accumulate_backward(&pass, &g, &mut grads)?;
                ce += l;
            }
            TrainItem::Replay(i) => {
                let ex = data.replay.get(i).ok_or_else(|| Error::Data(format!("replay index {i}")))?;
                let t = targets
                    .get(i)
                    .and_then(Option::as_ref)
                    .ok_or_else(|| Error::Data(format!("no pseudo-caption for replay sample {i}")))?;
                let pass = student.forward_pass(&ex.patches, &t.tokens)?;
                let (parts, gk) = kpred_loss_grad(pass.logits(), &ex.keyword)?;
                let (ld, gd) = distill_loss_grad(&t.teacher_logits, pass.logits(), temperature)?;
                if replay_has_gradient {
                    let mut g = gk;
                    g.scale(weights.lambda_k);
                    let mut gd = gd;
                    gd.scale(weights.lambda_d);
                    g.add_assign(&gd);
                    g.scale(1.0 / nr as f64);
                    student.accumulate_backward(&pass, &g, &mut grads)?;
                }
                cov += parts.coverage;
                rep += parts.repetition;
                dist += ld;
            }
        }
    }
    let mean = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    let bundle = LossBundle::assemble(
        mean(ce, nc),
        mean(cov, nr),
        mean(rep, nr),
        mean(dist, nr),
        weights,
        nc,
        nr,
    );
    Ok((bundle, grads))
}

/// One logged optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub bundle: LossBundle,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,l_ce,l_cov,l_rep,l_kpred,l_distill,l_total,lr";

pub fn loss_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let b = &r.bundle;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step, b.l_ce, b.l_cov, b.l_rep, b.l_kpred, b.l_distill, b.l_total, r.lr
        );
    }
    s
}

/// Owns the student, optimizer, schedule and pseudo-caption cache of a run.
pub struct Trainer<'t> {
    config: TrainConfig,
    student: Model,
    teacher: Option<&'t Model>,
    optimizer: AdamW,
    scheduler: Scheduler,
    cache: Vec<Option<PseudoTarget>>,
    step: usize,
}

impl<'t> Trainer<'t> {
    /// `total_steps` sizes the schedule. Replay needs a teacher.
    pub fn new(
        student: Model,
        teacher: Option<&'t Model>,
        config: TrainConfig,
        replay_len: usize,
        total_steps: usize,
    ) -> Result<Self> {
        config.validate()?;
        if student.is_frozen() {
            return Err(Error::Frozen);
        }
        if replay_len > 0 && teacher.is_none() {
            return Err(Error::Config("replay samples need a teacher model".into()));
        }
        if let Some(t) = teacher {
            if t.config().vocab_size != student.config().vocab_size {
                return Err(Error::Config("teacher and student vocabularies differ".into()));
            }
        }
        let optimizer = AdamW::new(student.params(), config.optimizer);
        let scheduler = Scheduler::new(config.lr_max, config.lr_min, total_steps, config.use_cosine_schedule)?;
        Ok(Trainer {
            config,
            student,
            teacher,
            optimizer,
            scheduler,
            cache: vec![None; replay_len],
            step: 0,
        })
    }

    pub fn student(&self) -> &Model {
        &self.student
    }

    pub fn into_student(self) -> Model {
        self.student
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    fn prepare_targets(&mut self, batch: &[TrainItem], data: &TrainData) -> Result<()> {
        let Some(teacher) = self.teacher else {
            return Ok(());
        };
        for item in batch {
            let TrainItem::Replay(i) = *item else { continue };
            let ex = data.replay.get(i).ok_or_else(|| Error::Data(format!("replay index {i}")))?;
            match self.config.pseudo_caption_source {
                // frozen teacher: the target never changes
                PseudoSource::Teacher if self.cache[i].is_some() => {}
                PseudoSource::Teacher => {
                    self.cache[i] = Some(pseudo_target(teacher, teacher, &ex.patches, &self.config)?);
                }
                PseudoSource::Student => {
                    self.cache[i] = Some(pseudo_target(&self.student, teacher, &ex.patches, &self.config)?);
                }
            }
        }
        Ok(())
    }

    /// Loss, backward and one optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[TrainItem], data: &TrainData) -> Result<LogRow> {
        if batch.iter().any(|i| matches!(i, TrainItem::Replay(_))) && self.teacher.is_none() {
            return Err(Error::Config("replay samples need a teacher model".into()));
        }
        self.prepare_targets(batch, data)?;
        let (bundle, grads) = loss_and_gradients(&self.student, batch, data, &self.cache, &self.config)?;
        if !bundle.is_finite() || !grads.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("non-finite loss or gradient: {bundle:?}"),
            });
        }
        let lr = self.scheduler.lr();
        self.optimizer.step(self.student.params_mut()?, &grads, lr)?;
        if !self.student.params().tensors().iter().all(Mat::is_finite) {
            return Err(Error::Divergence {
                step: self.step,
                detail: "non-finite parameters after update".into(),
            });
        }
        self.scheduler.advance();
        let row = LogRow {
            step: self.step,
            bundle,
            lr,
        };
        self.step += 1;
        Ok(row)
    }
}

/// Validation metrics of one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub generic_cider: f64,
    pub concept_rec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
    pub epoch: usize,
    pub metrics: ValMetrics,
    pub path: String,
}

/// Index of the preferred checkpoint under `criterion`.
pub fn select_best_checkpoint(metas: &[CheckpointMeta], criterion: SelectBy) -> Result<usize> {
    if metas.is_empty() {
        return Err(Error::Data("no checkpoints to select from".into()));
    }
    let key = |m: &CheckpointMeta| match criterion {
        SelectBy::Recognition => (m.metrics.concept_rec, m.metrics.generic_cider),
        SelectBy::Cider => (m.metrics.generic_cider, m.metrics.concept_rec),
        SelectBy::Last => (m.step as f64, 0.0),
    };
    let mut best = 0;
    for (i, m) in metas.iter().enumerate().skip(1) {
        let (a, b) = (key(m), key(&metas[best]));
        let better = a.0 > b.0 || (a.0 == b.0 && (a.1 > b.1 || (a.1 == b.1 && m.step < metas[best].step)));
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// Result of a full training run.
pub struct RunOutcome {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<CheckpointMeta>,
    pub best: usize,
    pub best_model: Model,
    pub final_model: Model,
    pub final_lr: f64,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Trains for `cfg.epochs` epochs over the mixed pool, validating every
/// `checkpoint_every` epochs. With `out` set, writes `epoch-{e}.ckpt`,
/// `best.ckpt`, `checkpoints.json` and `loss.csv`.
pub fn run_training(
    student: Model,
    teacher: Option<&Model>,
    data: &TrainData,
    cfg: &TrainConfig,
    mut validate: impl FnMut(&Model) -> Result<ValMetrics>,
    out: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let pool = data.captions.len() + data.replay.len();
    if pool == 0 {
        return Err(Error::EmptyCorpus);
    }
    let per_epoch = pool.div_ceil(cfg.batch_size);
    let mut trainer = Trainer::new(student, teacher, *cfg, data.replay.len(), per_epoch * cfg.epochs)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = Vec::with_capacity(per_epoch * cfg.epochs);
    let mut checkpoints = Vec::new();
    let mut models = Vec::new();
    for epoch in 0..cfg.epochs {
        let seed = derive_seed(cfg.seed, &format!("epoch-{epoch}"));
        for batch in mix_batches(&data.captions, &data.replay, cfg.batch_size, seed)? {
            log.push(trainer.train_step(&batch, data)?);
        }
        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.checkpoint_every == 0 || last {
            let metrics = validate(trainer.student())?;
            let name = format!("epoch-{}.ckpt", epoch + 1);
            if let Some(dir) = out {
                trainer.student().save(&dir.join(&name))?;
            }
            checkpoints.push(CheckpointMeta {
                step: trainer.steps(),
                epoch: epoch + 1,
                metrics,
                path: name,
            });
            models.push(trainer.student().clone());
        }
    }
    let best = select_best_checkpoint(&checkpoints, cfg.select_by)?;
    let final_lr = trainer.scheduler().lr();
    let final_model = trainer.into_student();
    let best_model = models.swap_remove(best);
    if let Some(dir) = out {
        best_model.save(&dir.join(BEST_CHECKPOINT))?;
        crate::corpus::io::write_json(&dir.join("checkpoints.json"), &checkpoints)?;
        let csv = dir.join("loss.csv");
        std::fs::write(&csv, loss_csv(&log)).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(RunOutcome {
        log,
        checkpoints,
        best,
        best_model,
        final_model,
        final_lr,
    })
}

#[cfg(test)]
mod tests;
