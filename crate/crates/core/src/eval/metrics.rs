//! Caption metrics over tokenized corpora. All inputs are keyed by image id,
//! so corpus order never affects a score.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::text::words;

/// Generated caption per image id.
pub type Candidates = BTreeMap<u64, String>;
/// Reference captions per image id.
pub type ReferenceSet = BTreeMap<u64, Vec<String>>;
/// Acceptable keywords per image id.
pub type KeywordList = BTreeMap<u64, Vec<String>>;

pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;
const MAX_N: usize = 4;

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram<'_>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Tokenized candidate and references for each image, in id order.
fn tokenize<'a>(
    candidates: &'a Candidates,
    refs: &'a ReferenceSet,
) -> Result<Vec<(Vec<String>, Vec<Vec<String>>)>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    candidates
        .iter()
        .map(|(id, c)| match refs.get(id) {
            Some(r) if !r.is_empty() => Ok((words(c), r.iter().map(|x| words(x)).collect())),
            _ => Err(Error::MissingReference(*id)),
        })
        .collect()
}

/// Corpus-level BLEU-n with clipped counts, closest reference length (ties go
/// to the shorter reference) and no smoothing.
pub fn bleu(candidates: &Candidates, refs: &ReferenceSet, n: usize) -> Result<f64> {
    if !(1..=MAX_N).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..=4")));
    }
    let corpus = tokenize(candidates, refs)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, rs) in &corpus {
        c_len += cand.len();
        r_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap();
        for k in 1..=n {
            let mut max_ref: HashMap<Ngram, usize> = HashMap::new();
            for r in rs {
                for (g, c) in ngram_counts(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in ngram_counts(cand, k) {
                matched[k - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if matched[k] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
    }
    let bp = (1.0 - r_len as f64 / c_len as f64).min(0.0).exp();
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

fn rouge_f(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over candidates of the best LCS F-measure against any reference.
pub fn rouge_l(candidates: &Candidates, refs: &ReferenceSet) -> Result<f64> {
    let corpus = tokenize(candidates, refs)?;
    let sum: f64 = corpus
        .iter()
        .map(|(c, rs)| rs.iter().map(|r| rouge_f(c, r)).fold(0.0, f64::max))
        .sum();
    Ok(sum / corpus.len() as f64)
}

/// TF-IDF vectors of one caption, one per order, with their norms.
struct TfIdf<'a> {
    vecs: Vec<HashMap<Ngram<'a>, f64>>,
    norms: Vec<f64>,
    /// Number of bigrams; only differences of this length enter the penalty.
    length: f64,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<Ngram, usize>, log_n: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for k in 1..=MAX_N {
        let v: HashMap<Ngram, f64> = ngram_counts(tokens, k)
            .into_iter()
            .map(|(g, tf)| {
                let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
                (g, tf as f64 * (log_n - d.ln()))
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf {
        vecs,
        norms,
        length: tokens.len().saturating_sub(1) as f64,
    }
}

/// Per-order similarity of a candidate to one reference, clipped and
/// length-penalized.
fn cider_pair(h: &TfIdf, r: &TfIdf, sigma: f64) -> [f64; MAX_N] {
    let delta = h.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
    let mut out = [0.0; MAX_N];
    for k in 0..MAX_N {
        let mut v: f64 = h.vecs[k]
            .iter()
            .map(|(g, &x)| {
                let y = r.vecs[k].get(g).copied().unwrap_or(0.0);
                x.min(y) * y
            })
            .sum();
        if h.norms[k] != 0.0 && r.norms[k] != 0.0 {
            v /= h.norms[k] * r.norms[k];
        }
        out[k] = v * penalty;
    }
    out
}

/// Per-image CIDEr-D scores with penalty width `sigma`.
pub fn cider_scores(
    candidates: &Candidates,
    refs: &ReferenceSet,
    sigma: f64,
) -> Result<BTreeMap<u64, f64>> {
    let corpus = tokenize(candidates, refs)?;
    if corpus.len() < 2 {
        return Err(Error::DegenerateDocumentFrequency);
    }
    let mut df: HashMap<Ngram, usize> = HashMap::new();
    for (_, rs) in &corpus {
        let mut present: HashSet<Ngram> = HashSet::new();
        for r in rs {
            for k in 1..=MAX_N {
                present.extend(ngram_counts(r, k).into_keys());
            }
        }
        for g in present {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (corpus.len() as f64).ln();
    Ok(candidates
        .keys()
        .zip(&corpus)
        .map(|(&id, (c, rs))| {
            let h = tfidf(c, &df, log_n);
            let mut acc = 0.0;
            for r in rs {
                let s = cider_pair(&h, &tfidf(r, &df, log_n), sigma);
                acc += s.iter().sum::<f64>() / MAX_N as f64;
            }
            (id, 10.0 * acc / rs.len() as f64)
        })
        .collect())
}

/// Corpus CIDEr-D: mean of the per-image scores.
pub fn cider(candidates: &Candidates, refs: &ReferenceSet) -> Result<f64> {
    let s = cider_scores(candidates, refs, CIDER_SIGMA)?;
    Ok(s.values().sum::<f64>() / s.len() as f64)
}

/// True iff the normalized `caption` contains one of `keywords` as a
/// contiguous run of words.
pub fn recognizes<S: AsRef<str>>(caption: &str, keywords: &[S]) -> bool {
    let cap = words(caption);
    keywords.iter().any(|k| {
        let kw = words(k.as_ref());
        !kw.is_empty() && cap.windows(kw.len()).any(|w| w == kw.as_slice())
    })
}

/// Fraction of candidates whose caption mentions an accepted keyword.
pub fn recognition_accuracy(candidates: &Candidates, keywords: &KeywordList) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut hits = 0usize;
    for (id, c) in candidates {
        let ks = keywords.get(id).ok_or(Error::MissingReference(*id))?;
        if ks.iter().any(|k| words(k).is_empty()) {
            return Err(Error::Data(format!("image {id} has an empty keyword")));
        }
        hits += recognizes(c, ks) as usize;
    }
    Ok(hits as f64 / candidates.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(pairs: &[(u64, &str, &[&str])]) -> (Candidates, ReferenceSet) {
        let c = pairs.iter().map(|(i, c, _)| (*i, c.to_string())).collect();
        let r = pairs
            .iter()
            .map(|(i, _, r)| (*i, r.iter().map(|s| s.to_string()).collect()))
            .collect();
        (c, r)
    }

    #[test]
    fn bleu_examples() {
        let (c, r) = one(&[(0, "the cat sat", &["the cat sat down"])]);
        let want = (1.0f64 - 4.0 / 3.0).exp();
        assert!((bleu(&c, &r, 1).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.7165).abs() < 1e-4);
        let (c, r) = one(&[(0, "a b c d e", &["a b c d e"]), (1, "x y z", &["x y z"])]);
        for n in 1..=4 {
            assert!((bleu(&c, &r, n).unwrap() - 1.0).abs() < 1e-12);
        }
        let (c, r) = one(&[(0, "p q", &["a b"])]);
        assert_eq!(bleu(&c, &r, 1).unwrap(), 0.0);
        assert!(bleu(&c, &r, 5).is_err());
        let (c, _) = one(&[(0, "p q", &["a b"])]);
        assert!(matches!(bleu(&c, &ReferenceSet::new(), 1), Err(Error::MissingReference(0))));
    }

    #[test]
    fn closest_reference_prefers_shorter_on_ties() {
        // candidate length 3, references of length 2 and 4: r = 2, no penalty
        let (c, r) = one(&[(0, "a b c", &["a b c d", "a b"])]);
        assert!((bleu(&c, &r, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        let (c, r) = one(&[(0, "a b c d", &["a c b d"])]);
        assert!((rouge_l(&c, &r).unwrap() - 0.75).abs() < 1e-12);
        let (c, r) = one(&[(0, "a b", &["a b"]), (1, "x", &["y"])]);
        assert!((rouge_l(&c, &r).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cider_examples() {
        let (c, r) = one(&[
            (0, "red fox jumps high", &["red fox jumps high"]),
            (1, "blue whale swims deep", &["blue whale swims deep"]),
            (2, "green frog sits still", &["green frog sits still"]),
        ]);
        assert!((cider(&c, &r).unwrap() - 10.0).abs() < 1e-9);
        let (c2, _) = one(&[
            (0, "zz yy", &[]),
            (1, "blue whale swims deep", &[]),
            (2, "green frog sits still", &[]),
        ]);
        assert_eq!(cider_scores(&c2, &r, CIDER_SIGMA).unwrap()[&0], 0.0);
        let (c, r) = one(&[(0, "a b", &["a b"])]);
        assert!(matches!(cider(&c, &r), Err(Error::DegenerateDocumentFrequency)));
    }

    #[test]
    fn recognition_examples() {
        let kw = |k: &str| -> KeywordList { [(0u64, vec![k.to_string()])].into() };
        let cand = |c: &str| -> Candidates { [(0u64, c.to_string())].into() };
        let acc = |c: &str, k: &str| recognition_accuracy(&cand(c), &kw(k)).unwrap();
        assert_eq!(acc("a mcdonalds breakfast sandwich with scrambled eggs and hash browns", "mcdonalds"), 1.0);
        assert_eq!(acc("a close up of a fast food meal in a box", "mcdonalds"), 0.0);
        assert_eq!(acc("a view of the golden gate bridge from a boat", "golden gate bridge"), 1.0);
        assert_eq!(acc("A McDonalds, sandwich!", "mcdonalds"), 1.0);
        assert_eq!(acc("the golden bridge gate", "golden gate bridge"), 0.0);
        assert_eq!(acc("audits", "audi"), 0.0);
        assert!(recognition_accuracy(&cand("x"), &KeywordList::new()).is_err());
    }
}
