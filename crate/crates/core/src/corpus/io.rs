//! Dataset files: caption JSON, replay JSON, binary patch tensors, the concept
//! bank and a manifest tying them together.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    Annotation, CaptionSplit, ConceptBank, Corpora, CorpusSpec, Grid, ReplaySample, SplitKind,
    SyntheticImage,
};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::text::Vocabulary;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BANK_FILE: &str = "bank.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const REPLAY_NAME: &str = "replay";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub spec: CorpusSpec,
    pub dim: usize,
    /// Image count per split name (replay included).
    pub counts: BTreeMap<String, usize>,
    /// Relative file names per split: `[captions_json, patches]`.
    pub files: BTreeMap<String, [String; 2]>,
    pub bank: String,
    pub vocab: String,
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    id: u64,
    #[serde(default)]
    concepts: Vec<usize>,
    #[serde(default)]
    fillers: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CaptionFile {
    images: Vec<ImageEntry>,
    annotations: Vec<Annotation>,
}

#[derive(Serialize, Deserialize)]
struct ReplayEntry {
    image_id: u64,
    keyword: String,
    #[serde(default)]
    concepts: Vec<usize>,
    #[serde(default)]
    fillers: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ReplayFile {
    replay: Vec<ReplayEntry>,
}

fn parse_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    File::open(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?))
        .map_err(|e| parse_error(path, e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn save_patches(path: &Path, images: &[SyntheticImage], grid: Grid) -> Result<()> {
    let dim = images.first().map(|i| i.patches.cols).unwrap_or(0);
    let mut buf = Vec::with_capacity(16 + images.len() * grid.h * grid.w * dim * 4);
    for v in [images.len(), grid.h, grid.w, dim] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for img in images {
        if img.patches.rows != grid.h * grid.w || img.patches.cols != dim {
            return Err(Error::Shape(format!(
                "image {} has {}x{} patches, expected {}x{dim}",
                img.image_id,
                img.patches.rows,
                img.patches.cols,
                grid.h * grid.w
            )));
        }
        for x in &img.patches.data {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a patch file; returns the grid and one `H·W × d` matrix per record.
pub fn load_patches(path: &Path) -> Result<(Grid, Vec<Mat>)> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(parse_error(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (count, h, w, d) = (word(0), word(1), word(2), word(3));
    let per = h * w * d;
    let expected = 16 + count * per * 4;
    if bytes.len() != expected {
        return Err(parse_error(
            path,
            format!("expected {expected} bytes for {count} records, found {}", bytes.len()),
        ));
    }
    let floats: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(k) = floats.iter().position(|x| !x.is_finite()) {
        return Err(parse_error(
            path,
            format!("non-finite value at byte offset {}", 16 + 4 * k),
        ));
    }
    let mats = floats
        .chunks(per.max(1))
        .take(count)
        .map(|c| Mat::from_vec(h * w, d, c.to_vec()))
        .collect();
    Ok((Grid { h, w }, mats))
}

pub fn save_captions(json: &Path, patches: &Path, split: &CaptionSplit, grid: Grid) -> Result<()> {
    let file = CaptionFile {
        images: split
            .images
            .iter()
            .map(|i| ImageEntry {
                id: i.image_id,
                concepts: i.concept_ids.clone(),
                fillers: i.filler_ids.clone(),
            })
            .collect(),
        annotations: split.annotations.clone(),
    };
    write_json(json, &file)?;
    save_patches(patches, &split.images, grid)
}

fn check_record_ids<'a>(path: &Path, ids: impl Iterator<Item = &'a u64>) -> Result<()> {
    for (k, &id) in ids.enumerate() {
        if id != k as u64 {
            return Err(parse_error(
                path,
                format!("record {k} has image id {id}; ids must equal record indices"),
            ));
        }
    }
    Ok(())
}

pub fn load_captions(json: &Path, patches: &Path) -> Result<(Grid, CaptionSplit)> {
    let file: CaptionFile = read_json(json)?;
    check_record_ids(json, file.images.iter().map(|i| &i.id))?;
    let (grid, mats) = load_patches(patches)?;
    if mats.len() != file.images.len() {
        return Err(Error::Data(format!(
            "{} lists {} images but {} holds {}",
            json.display(),
            file.images.len(),
            patches.display(),
            mats.len()
        )));
    }
    let mut seen_ids = BTreeSet::new();
    for (k, a) in file.annotations.iter().enumerate() {
        if a.image_id as usize >= file.images.len() {
            return Err(Error::Data(format!(
                "{}: annotation {k} references unknown image_id {}",
                json.display(),
                a.image_id
            )));
        }
        if !seen_ids.insert(a.id) {
            return Err(Error::Data(format!(
                "{}: duplicate annotation id {}",
                json.display(),
                a.id
            )));
        }
    }
    let images = file
        .images
        .into_iter()
        .zip(mats)
        .map(|(e, patches)| SyntheticImage {
            image_id: e.id,
            patches,
            concept_ids: e.concepts,
            filler_ids: e.fillers,
        })
        .collect();
    Ok((
        grid,
        CaptionSplit {
            images,
            annotations: file.annotations,
        },
    ))
}

pub fn save_replay(json: &Path, patches: &Path, replay: &[ReplaySample], grid: Grid) -> Result<()> {
    let file = ReplayFile {
        replay: replay
            .iter()
            .map(|s| ReplayEntry {
                image_id: s.image.image_id,
                keyword: s.keyword.clone(),
                concepts: s.image.concept_ids.clone(),
                fillers: s.image.filler_ids.clone(),
            })
            .collect(),
    };
    write_json(json, &file)?;
    let images: Vec<SyntheticImage> = replay.iter().map(|s| s.image.clone()).collect();
    save_patches(patches, &images, grid)
}

pub fn load_replay(json: &Path, patches: &Path) -> Result<(Grid, Vec<ReplaySample>)> {
    let file: ReplayFile = read_json(json)?;
    check_record_ids(json, file.replay.iter().map(|r| &r.image_id))?;
    let (grid, mats) = load_patches(patches)?;
    if mats.len() != file.replay.len() {
        return Err(Error::Data(format!(
            "{} lists {} replay pairs but {} holds {}",
            json.display(),
            file.replay.len(),
            patches.display(),
            mats.len()
        )));
    }
    let samples = file
        .replay
        .into_iter()
        .zip(mats)
        .map(|(e, patches)| ReplaySample {
            image: SyntheticImage {
                image_id: e.image_id,
                patches,
                concept_ids: e.concepts,
                filler_ids: e.fillers,
            },
            keyword: e.keyword,
        })
        .collect();
    Ok((grid, samples))
}

fn split_files(name: &str) -> [String; 2] {
    [format!("{name}.json"), format!("{name}.patches")]
}

/// Writes every split plus bank, vocabulary and manifest into `dir`.
pub fn write_corpora(dir: &Path, corpora: &Corpora, spec: &CorpusSpec, seed: u64) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut counts = BTreeMap::new();
    let mut files = BTreeMap::new();
    for (kind, split) in &corpora.splits {
        let f = split_files(kind.name());
        save_captions(&dir.join(&f[0]), &dir.join(&f[1]), split, spec.grid)?;
        counts.insert(kind.name().to_owned(), split.images.len());
        files.insert(kind.name().to_owned(), f);
    }
    let f = split_files(REPLAY_NAME);
    save_replay(&dir.join(&f[0]), &dir.join(&f[1]), &corpora.replay, spec.grid)?;
    counts.insert(REPLAY_NAME.to_owned(), corpora.replay.len());
    files.insert(REPLAY_NAME.to_owned(), f);
    write_json(&dir.join(BANK_FILE), &corpora.bank)?;
    corpora.vocab.save(&dir.join(VOCAB_FILE))?;
    let manifest = DatasetManifest {
        seed,
        spec: *spec,
        dim: corpora.bank.dim(),
        counts,
        files,
        bank: BANK_FILE.to_owned(),
        vocab: VOCAB_FILE.to_owned(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads a directory written by [`write_corpora`] and checks it against its
/// manifest.
pub fn read_corpora(dir: &Path) -> Result<(DatasetManifest, Corpora)> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let bank: ConceptBank = read_json(&dir.join(&manifest.bank))?;
    let vocab = Vocabulary::load(&dir.join(&manifest.vocab))?;
    let files = |name: &str| -> Result<[PathBuf; 2]> {
        let f = manifest
            .files
            .get(name)
            .ok_or_else(|| Error::Data(format!("manifest lists no files for split {name}")))?;
        Ok([dir.join(&f[0]), dir.join(&f[1])])
    };
    let check = |name: &str, grid: Grid, n: usize| -> Result<()> {
        if manifest.counts.get(name) != Some(&n) {
            return Err(Error::Data(format!(
                "split {name}: manifest count {:?} but files hold {n}",
                manifest.counts.get(name)
            )));
        }
        if grid != manifest.spec.grid && n > 0 {
            return Err(Error::Data(format!("split {name}: grid differs from manifest")));
        }
        Ok(())
    };
    let mut splits = Vec::new();
    for kind in SplitKind::ALL {
        let [json, patches] = files(kind.name())?;
        let (grid, split) = load_captions(&json, &patches)?;
        check(kind.name(), grid, split.images.len())?;
        splits.push((kind, split));
    }
    let [json, patches] = files(REPLAY_NAME)?;
    let (grid, mut replay) = load_replay(&json, &patches)?;
    check(REPLAY_NAME, grid, replay.len())?;
    for s in &mut replay {
        let c = bank.concept_index(&s.keyword).ok_or_else(|| {
            Error::Data(format!("replay keyword {:?} is not in the concept bank", s.keyword))
        })?;
        if s.image.concept_ids.is_empty() {
            s.image.concept_ids.push(c);
        } else if !s.image.concept_ids.contains(&c) {
            return Err(Error::Data(format!(
                "replay image {} does not contain its keyword concept",
                s.image.image_id
            )));
        }
    }
    Ok((
        manifest,
        Corpora {
            bank,
            vocab,
            splits,
            replay,
        },
    ))
}
