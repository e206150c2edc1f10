//! The phases behind each command: data generation, pretraining, generic
//! fine-tuning, fine-tuning with knowledge replay, evaluation and decoding.
//! Every phase writes its outputs plus a `run.json` record into one directory.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::corpus::{
    generate_concept_bank, generate_corpora, generate_fillers, read_corpora, write_corpora,
    ConceptBank, Corpora, DatasetManifest, SplitKind,
};
use crate::decode::{caption_image, DecodeMethod};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport, TEST_TARGETS, VAL_TARGETS};
use crate::model::Model;
use crate::rng::derive_seed;
use crate::train::{run_training, RunOutcome, TrainConfig, TrainData, ValMetrics};

pub const RUN_RECORD: &str = "run.json";

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    version: &'static str,
    config: &'a RunConfig,
}

fn write_record(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let record = RunRecord {
        command,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    crate::corpus::io::write_json(&out.join(RUN_RECORD), &record)
}

fn required(path: &str, key: &str) -> Result<PathBuf> {
    if path.is_empty() {
        return Err(Error::Config(format!("{key} is not set")));
    }
    let p = PathBuf::from(path);
    if !p.exists() {
        return Err(Error::MissingArtifact(p));
    }
    Ok(p)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let seed = derive_seed(cfg.seed, "data");
    let concepts = generate_concept_bank(cfg.num_concepts, cfg.num_unseen, cfg.signature_dim, seed)?;
    let fillers = generate_fillers(&concepts, cfg.num_fillers, seed)?;
    let spec = cfg.corpus_spec();
    let corpora = generate_corpora(ConceptBank { concepts, fillers }, &spec, seed)?;
    let manifest = write_corpora(out, &corpora, &spec, seed)?;
    write_record(out, "gen-data", cfg)?;
    Ok(manifest)
}

pub fn load_data(cfg: &RunConfig) -> Result<Corpora> {
    let dir = cfg.data_path();
    if !dir.join(crate::corpus::io::MANIFEST_FILE).exists() {
        return Err(Error::MissingArtifact(dir.join(crate::corpus::io::MANIFEST_FILE)));
    }
    Ok(read_corpora(&dir)?.1)
}

/// Generic CIDEr and concept recognition on the validation splits.
pub fn validation_metrics(model: &Model, corpora: &Corpora, cfg: &RunConfig) -> Result<ValMetrics> {
    let r = evaluate_model(model, corpora, &VAL_TARGETS, &cfg.decode_settings())?;
    let get = |name: &str| r.get(name).ok_or_else(|| Error::Data(format!("missing {name}")));
    Ok(ValMetrics {
        generic_cider: get("generic_val")?.cider,
        concept_rec: get("concept_val")?.rec.unwrap_or(0.0),
    })
}

fn fresh_model(cfg: &RunConfig, corpora: &Corpora) -> Result<Model> {
    let mc = cfg.model_config(corpora.vocab.len(), cfg.corpus_spec().grid, corpora.bank.dim());
    Model::init(mc, derive_seed(cfg.seed, "model-init"))
}

fn load_model(path: &str, key: &str) -> Result<Model> {
    Model::load(&required(path, key)?)
}

fn train_phase(
    cfg: &RunConfig,
    corpora: &Corpora,
    student: Model,
    teacher: Option<&Model>,
    data: &TrainData,
    tc: &TrainConfig,
    out: &Path,
) -> Result<RunOutcome> {
    run_training(
        student,
        teacher,
        data,
        tc,
        |m| validation_metrics(m, corpora, cfg),
        Some(out),
    )
}

/// Concept-rich pretraining from a fresh initialization.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let corpora = load_data(cfg)?;
    let student = fresh_model(cfg, &corpora)?;
    let data = TrainData {
        captions: TrainData::captions_from(corpora.split(SplitKind::Pretrain), &corpora.vocab, cfg.max_len)?,
        replay: Vec::new(),
    };
    let tc = TrainConfig {
        epochs: cfg.pretrain_epochs,
        lr_max: cfg.pretrain_lr_max,
        select_by: cfg.pretrain_select_by,
        seed: derive_seed(cfg.seed, "pretrain"),
        ..cfg.train_config()
    };
    write_record(out, "pretrain", cfg)?;
    train_phase(cfg, &corpora, student, None, &data, &tc, out)
}

fn downstream_student(cfg: &RunConfig) -> Result<Model> {
    let mut student = load_model(&cfg.base_checkpoint, "base_checkpoint")?;
    student.set_patch_self_attention(cfg.use_patch_self_attention, derive_seed(cfg.seed, "patch-attn"))?;
    Ok(student)
}

fn generic_captions(cfg: &RunConfig, corpora: &Corpora) -> Result<Vec<crate::train::CaptionExample>> {
    TrainData::captions_from(corpora.split(SplitKind::GenericTrain), &corpora.vocab, cfg.max_len)
}

/// Generic fine-tuning of the base model with caption loss only.
pub fn finetune(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let corpora = load_data(cfg)?;
    let student = downstream_student(cfg)?;
    let data = TrainData {
        captions: generic_captions(cfg, &corpora)?,
        replay: Vec::new(),
    };
    let tc = TrainConfig {
        select_by: cfg.finetune_select_by,
        seed: derive_seed(cfg.seed, "finetune"),
        ..cfg.train_config()
    };
    write_record(out, "finetune", cfg)?;
    train_phase(cfg, &corpora, student, None, &data, &tc, out)
}

/// Generic fine-tuning of the base model interleaved with knowledge replay
/// against the frozen fine-tuned teacher. Shares the fine-tuning seed stream,
/// so without replay samples it retraces [`finetune`] exactly.
pub fn kreplay_train(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let corpora = load_data(cfg)?;
    let teacher = load_model(&cfg.teacher_checkpoint, "teacher_checkpoint")?.clone_frozen();
    let student = downstream_student(cfg)?;
    let replay = if cfg.use_replay {
        TrainData::replay_from(&corpora.replay, &corpora.vocab)?
    } else {
        Vec::new()
    };
    let data = TrainData {
        captions: generic_captions(cfg, &corpora)?,
        replay,
    };
    let tc = TrainConfig {
        select_by: cfg.kreplay_select_by,
        seed: derive_seed(cfg.seed, "finetune"),
        ..cfg.train_config()
    };
    write_record(out, "kreplay-train", cfg)?;
    train_phase(cfg, &corpora, student, Some(&teacher), &data, &tc, out)
}

/// Test-split report (generic, seen, unseen) for `cfg.checkpoint`.
pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    cfg.decode_settings().beam.validate()?;
    let model = load_model(&cfg.checkpoint, "checkpoint")?;
    let corpora = load_data(cfg)?;
    let report = evaluate_model(&model, &corpora, &TEST_TARGETS, &cfg.decode_settings())?;
    write_record(out, "eval", cfg)?;
    report.save(out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodedCaption {
    pub image_id: u64,
    pub caption: String,
    pub logprob: f64,
    pub method: DecodeMethod,
    /// Beam width; 1 for greedy.
    pub b: usize,
}

fn parse_ids(text: &str, available: usize) -> Result<Vec<u64>> {
    if text.trim().is_empty() {
        return Ok((0..available as u64).collect());
    }
    text.split(',')
        .map(|s| {
            let id: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid image id {s:?}")))?;
            if id as usize >= available {
                return Err(Error::MissingArtifact(PathBuf::from(format!("image {id}"))));
            }
            Ok(id)
        })
        .collect()
}

/// Captions for `cfg.image_ids` (all images when empty) of `cfg.decode_split`.
pub fn decode(cfg: &RunConfig) -> Result<Vec<DecodedCaption>> {
    let settings = cfg.decode_settings();
    settings.beam.validate()?;
    let model = load_model(&cfg.checkpoint, "checkpoint")?;
    let corpora = load_data(cfg)?;
    let images: Vec<&crate::corpus::SyntheticImage> = if cfg.decode_split == "replay" {
        corpora.replay.iter().map(|r| &r.image).collect()
    } else {
        let kind = SplitKind::parse(&cfg.decode_split)
            .ok_or_else(|| Error::Config(format!("unknown split {:?}", cfg.decode_split)))?;
        corpora.split(kind).images.iter().collect()
    };
    parse_ids(&cfg.image_ids, images.len())?
        .into_iter()
        .map(|id| {
            let img = images[id as usize];
            let h = caption_image(&model, &img.patches, settings.method, &settings.beam)?;
            Ok(DecodedCaption {
                image_id: id,
                caption: corpora.vocab.decode(&h.tokens)?,
                logprob: h.logprob,
                method: settings.method,
                b: match settings.method {
                    DecodeMethod::Greedy => 1,
                    DecodeMethod::Beam => settings.beam.width,
                },
            })
        })
        .collect()
}
