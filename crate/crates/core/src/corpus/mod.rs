//! Synthetic concept corpora.
//!
//! Every image is a grid of patch vectors. Named concepts and generic filler
//! objects each own a unit-norm signature; an object placed in an image fills
//! a rectangular block of patches with its signature plus Gaussian noise, and
//! every other patch is pure noise.
//!
//! Splits:
//! - `pretrain`: concept images captioned with the concept name, all concepts.
//! - `generic_*`: filler-only images with captions that never name a concept.
//! - `replay`: concept images paired with their keyword, replay-eligible
//!   concepts only.
//! - `concept_val`, `concept_test`: concept images with concept-naming
//!   references; the test split is reported separately for seen and unseen
//!   concepts.

mod batch;
pub(crate) mod io;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::{dot, Mat};
use crate::text::{Keyword, Vocabulary};

pub use batch::{mix_batches, Batch, TrainItem};
pub use io::{
    load_captions, load_patches, load_replay, read_corpora, save_captions, save_patches, save_replay,
    write_corpora, DatasetManifest,
};

/// Upper bound on |cosine| between any two signatures.
pub const MAX_ABS_COSINE: f64 = 0.5;
const MAX_SIGNATURE_TRIES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub signature: Vec<f64>,
    pub replay_eligible: bool,
}

/// A generic object that may appear in any caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillerSpec {
    pub name: String,
    pub signature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub concepts: Vec<ConceptSpec>,
    pub fillers: Vec<FillerSpec>,
}

impl ConceptBank {
    pub fn dim(&self) -> usize {
        self.concepts
            .first()
            .map(|c| c.signature.len())
            .unwrap_or(0)
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn filler_index(&self, name: &str) -> Option<usize> {
        self.fillers.iter().position(|f| f.name == name)
    }

    pub fn seen(&self) -> impl Iterator<Item = (usize, &ConceptSpec)> {
        self.concepts.iter().enumerate().filter(|(_, c)| c.replay_eligible)
    }
}

const CONCEPT_NAMES: &[&str] = &[
    "mcdonalds",
    "golden gate bridge",
    "eiffel tower",
    "starbucks",
    "pikachu",
    "big ben",
    "audi",
    "colosseum",
    "taj mahal",
    "mount fuji",
    "lego",
    "nike",
    "coca cola",
    "sydney opera house",
    "kfc",
    "iphone",
    "tesla",
    "stonehenge",
    "mona lisa",
    "batman",
    "mickey mouse",
    "space needle",
    "burj khalifa",
    "adidas",
    "pepsi",
    "ikea",
    "ferrari",
    "great wall",
    "times square",
    "louvre",
    "lamborghini",
    "spongebob",
    "kremlin",
    "angkor wat",
    "machu picchu",
    "playstation",
];

const FILLER_NAMES: &[&str] = &[
    "dog", "cat", "table", "chair", "ball", "cup", "tree", "bench", "kite", "boat", "horse",
    "bicycle",
];

const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ru", "ze", "to", "vin", "dar", "pel", "sho"];

/// Name of the `i`-th concept; indices past the built-in list get invented
/// single-word names.
pub fn concept_name(i: usize) -> String {
    if let Some(n) = CONCEPT_NAMES.get(i) {
        return (*n).to_owned();
    }
    let mut k = i - CONCEPT_NAMES.len();
    let mut name = String::from("q");
    loop {
        name.push_str(SYLLABLES[k % SYLLABLES.len()]);
        k /= SYLLABLES.len();
        if k == 0 {
            break;
        }
    }
    name
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let n = dot(&v, &v).sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

/// Rejection-samples `count` unit vectors whose pairwise |cosine| (and |cosine|
/// with every vector in `existing`) stays below [`MAX_ABS_COSINE`].
fn sample_signatures(
    rng: &mut ChaCha8Rng,
    count: usize,
    dim: usize,
    existing: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let mut all: Vec<Vec<f64>> = existing.to_vec();
    let mut out = Vec::with_capacity(count);
    for placed in 0..count {
        let mut accepted = None;
        for _ in 0..MAX_SIGNATURE_TRIES {
            let v = unit_gaussian(rng, dim);
            if all.iter().all(|u| dot(u, &v).abs() < MAX_ABS_COSINE) {
                accepted = Some(v);
                break;
            }
        }
        let v = accepted.ok_or(Error::ConceptBankInfeasible {
            placed: existing.len() + placed,
            requested: existing.len() + count,
            dim,
        })?;
        all.push(v.clone());
        out.push(v);
    }
    Ok(out)
}

/// Deterministic bank of `num_concepts` concepts, `num_unseen` of which are
/// held out of replay.
pub fn generate_concept_bank(
    num_concepts: usize,
    num_unseen: usize,
    dim: usize,
    seed: u64,
) -> Result<Vec<ConceptSpec>> {
    if num_concepts == 0 || num_unseen >= num_concepts {
        return Err(Error::Config(format!(
            "need 0 <= num_unseen ({num_unseen}) < num_concepts ({num_concepts})"
        )));
    }
    if dim < 4 {
        return Err(Error::Config(format!("signature dimension {dim} below 4")));
    }
    let mut rng = substream(seed, "concept-bank");
    let signatures = sample_signatures(&mut rng, num_concepts, dim, &[])?;
    let mut order: Vec<usize> = (0..num_concepts).collect();
    order.shuffle(&mut rng);
    let mut unseen = vec![false; num_concepts];
    for &i in &order[..num_unseen] {
        unseen[i] = true;
    }
    Ok(signatures
        .into_iter()
        .enumerate()
        .map(|(i, signature)| ConceptSpec {
            name: concept_name(i),
            signature,
            replay_eligible: !unseen[i],
        })
        .collect())
}

/// Filler objects whose signatures also keep clear of the concepts.
pub fn generate_fillers(
    concepts: &[ConceptSpec],
    num_fillers: usize,
    seed: u64,
) -> Result<Vec<FillerSpec>> {
    if num_fillers < 2 || num_fillers > FILLER_NAMES.len() {
        return Err(Error::Config(format!(
            "num_fillers must be in 2..={}",
            FILLER_NAMES.len()
        )));
    }
    let dim = concepts.first().map(|c| c.signature.len()).unwrap_or(0);
    let existing: Vec<Vec<f64>> = concepts.iter().map(|c| c.signature.clone()).collect();
    let mut rng = substream(seed, "fillers");
    let sigs = sample_signatures(&mut rng, num_fillers, dim, &existing)?;
    Ok(sigs
        .into_iter()
        .zip(FILLER_NAMES)
        .map(|(signature, name)| FillerSpec {
            name: (*name).to_owned(),
            signature,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

/// An object to stamp into an image.
#[derive(Debug, Clone)]
pub struct Block<'a> {
    pub signature: &'a [f64],
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: u64,
    /// `H·W × d` patch vectors in raster order.
    pub patches: Mat,
    pub concept_ids: Vec<usize>,
    pub filler_ids: Vec<usize>,
}

/// Renders blocks at random free positions; returns the patches and each
/// block's top-left raster index. Values are rounded through `f32` so the
/// image survives the binary patch file unchanged.
pub fn render_image(
    blocks: &[Block],
    grid: Grid,
    dim: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Mat, Vec<usize>)> {
    let mut occupied = vec![false; grid.h * grid.w];
    let mut placed = Vec::with_capacity(blocks.len());
    let mut sig_at: Vec<Option<&[f64]>> = vec![None; grid.h * grid.w];
    for b in blocks {
        if b.signature.len() != dim {
            return Err(Error::Shape(format!(
                "signature of length {} in a {dim}-dim image",
                b.signature.len()
            )));
        }
        let mut free = Vec::new();
        if b.h <= grid.h && b.w <= grid.w {
            for r in 0..=grid.h - b.h {
                for c in 0..=grid.w - b.w {
                    let fits = (r..r + b.h)
                        .all(|rr| (c..c + b.w).all(|cc| !occupied[rr * grid.w + cc]));
                    if fits {
                        free.push(r * grid.w + c);
                    }
                }
            }
        }
        let &at = free.choose(rng).ok_or_else(|| {
            Error::GridTooSmall(format!(
                "no room for a {}x{} block in a {}x{} grid",
                b.h, b.w, grid.h, grid.w
            ))
        })?;
        let (r0, c0) = (at / grid.w, at % grid.w);
        for rr in r0..r0 + b.h {
            for cc in c0..c0 + b.w {
                occupied[rr * grid.w + cc] = true;
                sig_at[rr * grid.w + cc] = Some(b.signature);
            }
        }
        placed.push(at);
    }
    let mut patches = Mat::zeros(grid.h * grid.w, dim);
    let normal = (noise > 0.0).then(|| Normal::new(0.0, noise).unwrap());
    for (p, sig) in sig_at.iter().enumerate() {
        for (k, out) in patches.row_mut(p).iter_mut().enumerate() {
            let base = sig.map(|s| s[k]).unwrap_or(0.0);
            let eps = normal.as_ref().map(|n| n.sample(rng)).unwrap_or(0.0);
            *out = ((base + eps) as f32) as f64;
        }
    }
    Ok((patches, placed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub pretrain: usize,
    pub generic_train: usize,
    pub generic_val: usize,
    pub generic_test: usize,
    pub replay: usize,
    pub concept_val: usize,
    pub concept_test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            pretrain: 1200,
            generic_train: 864,
            generic_val: 64,
            generic_test: 128,
            replay: 160,
            concept_val: 96,
            concept_test: 192,
        }
    }
}

/// Everything the generator needs besides the bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub sizes: CorpusSizes,
    pub grid: Grid,
    pub noise: f64,
    pub concept_block: (usize, usize),
    pub filler_block: (usize, usize),
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            sizes: CorpusSizes::default(),
            grid: Grid { h: 4, w: 4 },
            noise: 0.15,
            concept_block: (2, 2),
            filler_block: (1, 2),
        }
    }
}

const CONCEPT_TEMPLATES: &[&str] = &["a photo of the {c} with a {f}", "a photo of the {c} near a {f}"];
const GENERIC_TEMPLATES: &[&str] = &["a {f1} next to a {f2}", "a {f1} and a {f2}"];

pub fn concept_caption(template: usize, concept: &str, filler: &str) -> String {
    CONCEPT_TEMPLATES[template % CONCEPT_TEMPLATES.len()]
        .replace("{c}", concept)
        .replace("{f}", filler)
}

pub fn generic_caption(template: usize, first: &str, second: &str) -> String {
    GENERIC_TEMPLATES[template % GENERIC_TEMPLATES.len()]
        .replace("{f1}", first)
        .replace("{f2}", second)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Pretrain,
    GenericTrain,
    GenericVal,
    GenericTest,
    ConceptVal,
    ConceptTest,
}

impl SplitKind {
    pub const ALL: [SplitKind; 6] = [
        SplitKind::Pretrain,
        SplitKind::GenericTrain,
        SplitKind::GenericVal,
        SplitKind::GenericTest,
        SplitKind::ConceptVal,
        SplitKind::ConceptTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Pretrain => "pretrain",
            SplitKind::GenericTrain => "generic_train",
            SplitKind::GenericVal => "generic_val",
            SplitKind::GenericTest => "generic_test",
            SplitKind::ConceptVal => "concept_val",
            SplitKind::ConceptTest => "concept_test",
        }
    }

    pub fn parse(name: &str) -> Option<SplitKind> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    fn is_training(self) -> bool {
        matches!(self, SplitKind::Pretrain | SplitKind::GenericTrain)
    }

    fn is_concept(self) -> bool {
        matches!(
            self,
            SplitKind::Pretrain | SplitKind::ConceptVal | SplitKind::ConceptTest
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: u64,
    pub id: u64,
    pub caption: String,
}

/// Images of one split with their reference captions. Training splits carry
/// one caption per image; evaluation splits carry every template.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSplit {
    pub images: Vec<SyntheticImage>,
    pub annotations: Vec<Annotation>,
}

impl CaptionSplit {
    pub fn references(&self) -> std::collections::BTreeMap<u64, Vec<String>> {
        let mut refs: std::collections::BTreeMap<u64, Vec<String>> = Default::default();
        for a in &self.annotations {
            refs.entry(a.image_id).or_default().push(a.caption.clone());
        }
        refs
    }
}

/// An image paired with one of its concept keywords.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySample {
    pub image: SyntheticImage,
    pub keyword: String,
}

impl ReplaySample {
    pub fn keyword_tokens(&self, vocab: &Vocabulary) -> Result<Keyword> {
        vocab.tokenize_keyword(&self.keyword)
    }
}

fn concept_image(
    bank: &ConceptBank,
    spec: &CorpusSpec,
    image_id: u64,
    concept: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(SyntheticImage, usize)> {
    let filler = rng.random_range(0..bank.fillers.len());
    let blocks = [
        Block {
            signature: &bank.concepts[concept].signature,
            h: spec.concept_block.0,
            w: spec.concept_block.1,
        },
        Block {
            signature: &bank.fillers[filler].signature,
            h: spec.filler_block.0,
            w: spec.filler_block.1,
        },
    ];
    let (patches, _) = render_image(&blocks, spec.grid, bank.dim(), spec.noise, rng)?;
    Ok((
        SyntheticImage {
            image_id,
            patches,
            concept_ids: vec![concept],
            filler_ids: vec![filler],
        },
        filler,
    ))
}

/// Cycles through `pool` in a freshly shuffled order each round so every
/// concept is covered evenly.
fn balanced_cycle(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut round = pool.to_vec();
        round.shuffle(rng);
        out.extend(round.into_iter().take(n - out.len()));
    }
    out
}

fn generate_caption_split(
    kind: SplitKind,
    count: usize,
    bank: &ConceptBank,
    spec: &CorpusSpec,
    seed: u64,
) -> Result<CaptionSplit> {
    let mut rng = substream(seed, kind.name());
    let mut images = Vec::with_capacity(count);
    let mut annotations = Vec::new();
    let templates = if kind.is_concept() {
        CONCEPT_TEMPLATES.len()
    } else {
        GENERIC_TEMPLATES.len()
    };
    let all: Vec<usize> = (0..bank.concepts.len()).collect();
    let concepts = if kind.is_concept() {
        balanced_cycle(&all, count, &mut rng)
    } else {
        Vec::new()
    };
    for i in 0..count {
        let image_id = i as u64;
        let captions: Vec<String>;
        if kind.is_concept() {
            let c = concepts[i];
            let (img, f) = concept_image(bank, spec, image_id, c, &mut rng)?;
            let make = |t| concept_caption(t, &bank.concepts[c].name, &bank.fillers[f].name);
            captions = if kind.is_training() {
                vec![make(rng.random_range(0..templates))]
            } else {
                (0..templates).map(make).collect()
            };
            images.push(img);
        } else {
            let picks: Vec<usize> = rand::seq::index::sample(&mut rng, bank.fillers.len(), 2).into_vec();
            let blocks: Vec<Block> = picks
                .iter()
                .map(|&f| Block {
                    signature: &bank.fillers[f].signature,
                    h: spec.filler_block.0,
                    w: spec.filler_block.1,
                })
                .collect();
            let (patches, at) = render_image(&blocks, spec.grid, bank.dim(), spec.noise, &mut rng)?;
            // the caption names objects in raster order of their blocks
            let (first, second) = if at[0] < at[1] {
                (picks[0], picks[1])
            } else {
                (picks[1], picks[0])
            };
            let make = |t| generic_caption(t, &bank.fillers[first].name, &bank.fillers[second].name);
            captions = if kind.is_training() {
                vec![make(rng.random_range(0..templates))]
            } else {
                (0..templates).map(make).collect()
            };
            images.push(SyntheticImage {
                image_id,
                patches,
                concept_ids: Vec::new(),
                filler_ids: vec![first, second],
            });
        }
        for caption in captions {
            let id = annotations.len() as u64;
            annotations.push(Annotation {
                image_id,
                id,
                caption,
            });
        }
    }
    Ok(CaptionSplit {
        images,
        annotations,
    })
}

fn generate_replay(
    count: usize,
    bank: &ConceptBank,
    spec: &CorpusSpec,
    seed: u64,
) -> Result<Vec<ReplaySample>> {
    let seen: Vec<usize> = bank.seen().map(|(i, _)| i).collect();
    if count > 0 && seen.is_empty() {
        return Err(Error::Data(
            "replay samples requested but no concept is replay-eligible".into(),
        ));
    }
    let mut rng = substream(seed, "replay");
    let picks = balanced_cycle(&seen, count, &mut rng);
    picks
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let (image, _) = concept_image(bank, spec, i as u64, c, &mut rng)?;
            Ok(ReplaySample {
                image,
                keyword: bank.concepts[c].name.clone(),
            })
        })
        .collect()
}

/// Every split of a generated corpus, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub bank: ConceptBank,
    pub vocab: Vocabulary,
    pub splits: Vec<(SplitKind, CaptionSplit)>,
    pub replay: Vec<ReplaySample>,
}

impl Corpora {
    pub fn split(&self, kind: SplitKind) -> &CaptionSplit {
        &self
            .splits
            .iter()
            .find(|(k, _)| *k == kind)
            .expect("all splits are generated")
            .1
    }
}

/// All concept and filler words plus every caption template.
fn vocabulary_texts(bank: &ConceptBank) -> Vec<String> {
    let mut texts: Vec<String> = Vec::new();
    for c in &bank.concepts {
        for t in 0..CONCEPT_TEMPLATES.len() {
            texts.push(concept_caption(t, &c.name, &bank.fillers[0].name));
        }
    }
    for f in &bank.fillers {
        for t in 0..GENERIC_TEMPLATES.len() {
            texts.push(generic_caption(t, &f.name, &f.name));
        }
    }
    texts
}

pub fn generate_corpora(bank: ConceptBank, spec: &CorpusSpec, seed: u64) -> Result<Corpora> {
    if bank.concepts.is_empty() || bank.fillers.len() < 2 {
        return Err(Error::Config(
            "bank needs at least one concept and two fillers".into(),
        ));
    }
    let s = &spec.sizes;
    let counts = [
        (SplitKind::Pretrain, s.pretrain),
        (SplitKind::GenericTrain, s.generic_train),
        (SplitKind::GenericVal, s.generic_val),
        (SplitKind::GenericTest, s.generic_test),
        (SplitKind::ConceptVal, s.concept_val),
        (SplitKind::ConceptTest, s.concept_test),
    ];
    for (kind, n) in counts {
        if n == 0 {
            return Err(Error::Config(format!("split {} must be non-empty", kind.name())));
        }
    }
    let vocab = Vocabulary::build(&vocabulary_texts(&bank), 1)?;
    let mut splits = Vec::with_capacity(counts.len());
    for (kind, n) in counts {
        splits.push((kind, generate_caption_split(kind, n, &bank, spec, seed)?));
    }
    let replay = generate_replay(s.replay, &bank, spec, seed)?;
    Ok(Corpora {
        bank,
        vocab,
        splits,
        replay,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::words;
    use rand::SeedableRng;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            sizes: CorpusSizes {
                pretrain: 40,
                generic_train: 30,
                generic_val: 6,
                generic_test: 8,
                replay: 20,
                concept_val: 12,
                concept_test: 24,
            },
            ..CorpusSpec::default()
        }
    }

    fn bank(seed: u64) -> ConceptBank {
        let concepts = generate_concept_bank(24, 12, 16, seed).unwrap();
        let fillers = generate_fillers(&concepts, 8, seed).unwrap();
        ConceptBank { concepts, fillers }
    }

    #[test]
    fn bank_counts_and_similarity() {
        let b = generate_concept_bank(24, 12, 16, 42).unwrap();
        assert_eq!(b.len(), 24);
        assert_eq!(b.iter().filter(|c| !c.replay_eligible).count(), 12);
        for (i, a) in b.iter().enumerate() {
            assert!((dot(&a.signature, &a.signature) - 1.0).abs() < 1e-12);
            for c in &b[i + 1..] {
                assert!(dot(&a.signature, &c.signature).abs() < MAX_ABS_COSINE);
            }
        }
        assert_eq!(b, generate_concept_bank(24, 12, 16, 42).unwrap());
        let two = generate_concept_bank(2, 0, 16, 7).unwrap();
        assert!(two.iter().all(|c| c.replay_eligible));
    }

    #[test]
    fn bank_infeasible_in_four_dims() {
        assert!(matches!(
            generate_concept_bank(100, 50, 4, 1),
            Err(Error::ConceptBankInfeasible { .. })
        ));
        assert!(generate_concept_bank(4, 4, 16, 1).is_err());
        assert!(generate_concept_bank(4, 1, 3, 1).is_err());
    }

    #[test]
    fn invented_names_are_distinct_words() {
        let names: Vec<String> = (0..200).map(concept_name).collect();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names[CONCEPT_NAMES.len()..]
            .iter()
            .all(|n| words(n).len() == 1));
    }

    #[test]
    fn render_zero_noise_and_capacity() {
        let sig = [0.5, -0.5, 0.5, -0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = Grid { h: 4, w: 4 };
        let (p, at) = render_image(&[Block { signature: &sig, h: 2, w: 2 }], grid, 4, 0.0, &mut rng).unwrap();
        let (r0, c0) = (at[0] / 4, at[0] % 4);
        for r in 0..4 {
            for c in 0..4 {
                let inside = (r0..r0 + 2).contains(&r) && (c0..c0 + 2).contains(&c);
                let want: &[f64] = if inside { &sig } else { &[0.0; 4] };
                assert_eq!(p.row(r * 4 + c), want);
            }
        }
        let (p, at) = render_image(&[], grid, 4, 0.3, &mut rng).unwrap();
        assert!(at.is_empty() && p.is_finite());
        let b = Block { signature: &sig, h: 2, w: 2 };
        let err = render_image(&[b.clone(), b.clone(), b], Grid { h: 2, w: 2 }, 4, 0.1, &mut rng);
        assert!(matches!(err, Err(Error::GridTooSmall(_))));
    }

    #[test]
    fn corpora_respect_split_contracts() {
        let b = bank(3);
        let c = generate_corpora(b.clone(), &small_spec(), 9).unwrap();
        assert_eq!(c.replay.len(), 20);
        let names: Vec<&str> = b.concepts.iter().map(|c| c.name.as_str()).collect();
        for kind in [SplitKind::GenericTrain, SplitKind::GenericVal, SplitKind::GenericTest] {
            for a in &c.split(kind).annotations {
                let padded = format!(" {} ", a.caption);
                assert!(names.iter().all(|n| !padded.contains(&format!(" {n} "))), "{}", a.caption);
            }
            assert!(c.split(kind).images.iter().all(|i| i.concept_ids.is_empty()));
        }
        for s in &c.replay {
            let ci = b.concept_index(&s.keyword).unwrap();
            assert!(b.concepts[ci].replay_eligible);
            assert!(s.image.concept_ids.contains(&ci));
            s.keyword_tokens(&c.vocab).unwrap();
        }
        // pretraining mentions every concept
        let pre = c.split(SplitKind::Pretrain);
        for n in &names {
            assert!(pre.annotations.iter().any(|a| a.caption.contains(n)));
        }
        // the test split covers both seen and unseen concepts
        let test = c.split(SplitKind::ConceptTest);
        let unseen = test
            .images
            .iter()
            .filter(|i| !b.concepts[i.concept_ids[0]].replay_eligible)
            .count();
        assert!(unseen > 0 && unseen < test.images.len());
        // every caption survives the vocabulary
        for (_, split) in &c.splits {
            for a in &split.annotations {
                assert_eq!(c.vocab.decode(&c.vocab.encode(&a.caption)).unwrap(), a.caption);
            }
        }
        assert_eq!(c, generate_corpora(b, &small_spec(), 9).unwrap());
    }

    #[test]
    fn replay_needs_eligible_concepts() {
        let mut b = bank(3);
        for c in &mut b.concepts {
            c.replay_eligible = false;
        }
        assert!(matches!(
            generate_corpora(b, &small_spec(), 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn replay_concept_blocks_are_grounded() {
        let b = bank(5);
        let mut spec = small_spec();
        spec.noise = 0.0;
        let c = generate_corpora(b.clone(), &spec, 2).unwrap();
        for s in &c.replay {
            let sig = &b.concepts[s.image.concept_ids[0]].signature;
            let hits = (0..s.image.patches.rows)
                .filter(|&r| {
                    s.image
                        .patches
                        .row(r)
                        .iter()
                        .zip(sig)
                        .all(|(a, b)| (a - b).abs() < 1e-6)
                })
                .count();
            assert_eq!(hits, 4);
        }
    }
}
