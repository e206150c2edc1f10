//! Caption quality and keyword recognition, per split.

mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionSplit, Corpora, SplitKind, SyntheticImage};
use crate::decode::{caption_image, BeamConfig, DecodeMethod};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::text::Vocabulary;

pub use metrics::{
    bleu, cider, cider_scores, recognition_accuracy, recognizes, rouge_l, Candidates,
    KeywordList, ReferenceSet, CIDER_SIGMA, ROUGE_BETA,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Absent for splits without keywords.
    pub rec: Option<f64>,
    pub count: usize,
}

impl SplitScores {
    pub fn is_finite(&self) -> bool {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.cider]
            .iter()
            .chain(self.rec.iter())
            .all(|x| x.is_finite())
    }
}

/// Scores a set of captions against references and, when given, keywords.
pub fn score_split(
    candidates: &Candidates,
    refs: &ReferenceSet,
    keywords: Option<&KeywordList>,
) -> Result<SplitScores> {
    Ok(SplitScores {
        bleu1: bleu(candidates, refs, 1)?,
        bleu2: bleu(candidates, refs, 2)?,
        bleu3: bleu(candidates, refs, 3)?,
        bleu4: bleu(candidates, refs, 4)?,
        rouge_l: rouge_l(candidates, refs)?,
        cider: cider(candidates, refs)?,
        rec: keywords
            .map(|k| recognition_accuracy(candidates, k))
            .transpose()?,
        count: candidates.len(),
    })
}

/// Scores keyed by report split name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalReport {
    pub splits: BTreeMap<String, SplitScores>,
}

const CSV_HEADER: &str = "split,bleu1,bleu2,bleu3,bleu4,rouge_l,cider,rec,count";

impl EvalReport {
    pub fn get(&self, split: &str) -> Option<&SplitScores> {
        self.splits.get(split)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (name, r) in &self.splits {
            let rec = r.rec.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{},{rec},{}",
                r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l, r.cider, r.count
            );
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::corpus::io::write_json(&dir.join("report.json"), self)?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::corpus::io::read_json(path)
    }
}

/// Which part of a split to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    All,
    /// Images whose concepts are all replay-eligible.
    Seen,
    /// Images containing a concept held out of replay.
    Unseen,
}

/// A named slice of one split.
#[derive(Debug, Clone, Copy)]
pub struct EvalTarget {
    pub name: &'static str,
    pub split: SplitKind,
    pub subset: Subset,
}

/// Generic quality plus seen and unseen concept recognition on the test
/// splits.
pub const TEST_TARGETS: [EvalTarget; 3] = [
    EvalTarget { name: "generic", split: SplitKind::GenericTest, subset: Subset::All },
    EvalTarget { name: "seen", split: SplitKind::ConceptTest, subset: Subset::Seen },
    EvalTarget { name: "unseen", split: SplitKind::ConceptTest, subset: Subset::Unseen },
];

pub const VAL_TARGETS: [EvalTarget; 2] = [
    EvalTarget { name: "generic_val", split: SplitKind::GenericVal, subset: Subset::All },
    EvalTarget { name: "concept_val", split: SplitKind::ConceptVal, subset: Subset::All },
];

/// Decoding settings used for every evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeSettings {
    pub method: DecodeMethod,
    pub beam: BeamConfig,
}

pub fn caption_images(
    model: &Model,
    vocab: &Vocabulary,
    images: &[&SyntheticImage],
    decode: &DecodeSettings,
) -> Result<Candidates> {
    images
        .iter()
        .map(|img| {
            let h = caption_image(model, &img.patches, decode.method, &decode.beam)?;
            Ok((img.image_id, vocab.decode(&h.tokens)?))
        })
        .collect()
}

fn select<'a>(corpora: &Corpora, split: &'a CaptionSplit, subset: Subset) -> Vec<&'a SyntheticImage> {
    let seen = |img: &SyntheticImage| {
        img.concept_ids
            .iter()
            .all(|&c| corpora.bank.concepts[c].replay_eligible)
    };
    split
        .images
        .iter()
        .filter(|img| match subset {
            Subset::All => true,
            Subset::Seen => !img.concept_ids.is_empty() && seen(img),
            Subset::Unseen => !seen(img),
        })
        .collect()
}

/// Decodes and scores each target; concept splits also get recognition.
pub fn evaluate_model(
    model: &Model,
    corpora: &Corpora,
    targets: &[EvalTarget],
    decode: &DecodeSettings,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for t in targets {
        let split = corpora.split(t.split);
        let images = select(corpora, split, t.subset);
        if images.is_empty() {
            return Err(Error::Data(format!("evaluation split {} is empty", t.name)));
        }
        let candidates = caption_images(model, &corpora.vocab, &images, decode)?;
        let all_refs = split.references();
        let refs: ReferenceSet = candidates
            .keys()
            .map(|id| (*id, all_refs.get(id).cloned().unwrap_or_default()))
            .collect();
        let has_concepts = images.iter().any(|i| !i.concept_ids.is_empty());
        let keywords: Option<KeywordList> = has_concepts.then(|| {
            images
                .iter()
                .map(|i| {
                    let names = i
                        .concept_ids
                        .iter()
                        .map(|&c| corpora.bank.concepts[c].name.clone())
                        .collect();
                    (i.image_id, names)
                })
                .collect()
        });
        let scores = score_split(&candidates, &refs, keywords.as_ref())?;
        report.splits.insert(t.name.to_owned(), scores);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_json_and_csv() {
        let c: Candidates = [(0, "a dog".to_string()), (1, "a cat".to_string())].into();
        let r: ReferenceSet = [(0, vec!["a dog".to_string()]), (1, vec!["a cat".to_string()])].into();
        let k: KeywordList = [(0, vec!["dog".to_string()]), (1, vec!["horse".to_string()])].into();
        let s = score_split(&c, &r, Some(&k)).unwrap();
        assert_eq!(s.rec, Some(0.5));
        assert_eq!(s.bleu1, 1.0);
        assert!(s.is_finite());
        let mut rep = EvalReport::default();
        rep.splits.insert("seen".into(), s);
        let json = serde_json::to_value(&rep).unwrap();
        assert_eq!(json["seen"]["count"], 2);
        assert_eq!(json["seen"]["rec"], 0.5);
        let csv = rep.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 2);
        let dir = tempfile::tempdir().unwrap();
        rep.save(dir.path()).unwrap();
        assert_eq!(EvalReport::load(&dir.path().join("report.json")).unwrap(), rep);
    }
}
