//! Word-level vocabulary, caption tokenization and keyword decomposition.
//!
//! Captions are normalized by lowercasing and turning every character that is
//! not alphanumeric into a space. The same normalization is used by the
//! recognition metric, so a keyword found by the tokenizer is found by the
//! metric and vice versa.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub fn is_special(id: TokenId) -> bool {
    id < SPECIALS.len()
}

/// Lowercases and replaces punctuation with spaces.
pub fn normalize(text: &str) -> String {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect()
}

/// Normalized whitespace-separated words of `text`.
pub fn words(text: &str) -> Vec<String> {
    normalize(text)
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a deterministic vocabulary: content tokens ordered by descending
    /// count, then lexicographically. Tokens seen fewer than `min_count` times
    /// are left out and encode to `UNK`.
    pub fn build<S: AsRef<str>>(corpus_texts: &[S], min_count: usize) -> Result<Self> {
        if corpus_texts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus_texts {
            for w in words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t)))
    }

    fn from_tokens(content: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(content);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(8);
        ids.push(BOS);
        ids.extend(words(text).iter().map(|w| self.id(w).unwrap_or(UNK)));
        ids.push(EOS);
        TokenSequence(ids)
    }

    /// Joins the tokens between `BOS` and the first `EOS`, skipping specials.
    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        let mut out = String::new();
        for &id in seq.ids() {
            if id >= self.len() {
                return Err(Error::InvalidTokenId {
                    id,
                    vocab_size: self.len(),
                });
            }
        }
        for &id in seq.ids() {
            if id == EOS {
                break;
            }
            if is_special(id) {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&self.id_to_token[id]);
        }
        Ok(out)
    }

    pub fn tokenize_keyword(&self, surface: &str) -> Result<Keyword> {
        let ws = words(surface);
        if ws.is_empty() {
            return Err(Error::KeywordNotRepresentable(surface.to_owned()));
        }
        let mut subword_ids = Vec::with_capacity(ws.len());
        for w in &ws {
            match self.id(w) {
                Some(id) if !is_special(id) => subword_ids.push(id),
                _ => return Err(Error::KeywordNotRepresentable(surface.to_owned())),
            }
        }
        Ok(Keyword {
            surface: ws.join(" "),
            subword_ids,
        })
    }

    /// `<token>\t<id>` lines, ids ascending.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.id_to_token.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: &str| Error::Parse {
            path: "vocabulary".into(),
            message: format!("line {}: {msg}", line + 1),
        };
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(n, "expected <token>\\t<id>"))?;
            let id: usize = id.parse().map_err(|_| parse_err(n, "bad id"))?;
            if id != n {
                return Err(parse_err(n, "ids must be consecutive from 0"));
            }
            if n < SPECIALS.len() && tok != SPECIALS[n] {
                return Err(parse_err(n, "special tokens must come first"));
            }
            tokens.push(tok.to_owned());
        }
        if tokens.len() <= SPECIALS.len() {
            return Err(parse_err(tokens.len(), "vocabulary has no content tokens"));
        }
        let mut seen = std::collections::HashSet::new();
        if !tokens.iter().all(|t| seen.insert(t.as_str())) {
            return Err(parse_err(0, "duplicate token"));
        }
        Ok(Self::from_tokens(tokens.into_iter().skip(SPECIALS.len())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }
}

/// Token ids of one caption, `BOS`-initiated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.0.first() == Some(&BOS) && self.0.last() == Some(&EOS) && self.0.len() >= 2
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Keyword {
    pub surface: String,
    pub subword_ids: Vec<TokenId>,
}

impl Keyword {
    pub fn len(&self) -> usize {
        self.subword_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subword_ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cars() -> Vocabulary {
        Vocabulary::build(&["a red car", "a blue car"], 1).unwrap()
    }

    #[test]
    fn build_counts_distinct_tokens() {
        let v = cars();
        assert_eq!(v.len(), 8);
        // a and car twice, then blue < red lexicographically
        assert_eq!(&v.tokens()[4..], &["a", "car", "blue", "red"]);
    }

    #[test]
    fn build_rejects_empty_corpus() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&empty, 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn min_count_threshold() {
        let v = Vocabulary::build(&["x x x", "y"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode("y").ids(), &[BOS, UNK, EOS]);
    }

    #[test]
    fn encode_examples() {
        let v = cars();
        let a = v.id("a").unwrap();
        let red = v.id("red").unwrap();
        let car = v.id("car").unwrap();
        assert_eq!(v.encode("A red car.").ids(), &[BOS, a, red, car, EOS]);
        assert_eq!(v.encode("").ids(), &[BOS, EOS]);
        assert_eq!(v.encode("zzz").ids(), &[BOS, UNK, EOS]);
    }

    #[test]
    fn decode_examples() {
        let v = cars();
        assert_eq!(v.decode(&v.encode("A red car.")).unwrap(), "a red car");
        assert_eq!(v.decode(&TokenSequence(vec![BOS, EOS])).unwrap(), "");
        assert!(matches!(
            v.decode(&TokenSequence(vec![BOS, 9999, EOS])),
            Err(Error::InvalidTokenId { id: 9999, .. })
        ));
    }

    #[test]
    fn keywords() {
        let v = Vocabulary::build(&["the golden gate bridge", "a mcdonalds bag"], 1).unwrap();
        let k = v.tokenize_keyword("Golden Gate  bridge").unwrap();
        assert_eq!(k.len(), 3);
        assert_eq!(k.surface, "golden gate bridge");
        assert_eq!(v.tokenize_keyword("mcdonalds").unwrap().len(), 1);
        assert!(matches!(
            v.tokenize_keyword("qqq"),
            Err(Error::KeywordNotRepresentable(_))
        ));
        assert!(v.tokenize_keyword(" ... ").is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = cars();
        let text = v.to_text();
        assert!(text.starts_with("<pad>\t0\n<bos>\t1\n<eos>\t2\n<unk>\t3\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert!(Vocabulary::from_text("<pad>\t0\n<bos>\t2\n").is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(idx in proptest::collection::vec(0usize..6, 0..12)) {
            let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta"];
            let v = Vocabulary::build(&[words.join(" ")], 1).unwrap();
            let s = idx.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
        }

        #[test]
        fn keyword_ids_are_content(n in 1usize..4) {
            let v = Vocabulary::build(&["one two three four"], 1).unwrap();
            let surface = ["one", "two", "three"][..n].join(" ");
            let k = v.tokenize_keyword(&surface).unwrap();
            prop_assert!(k.subword_ids.iter().all(|&id| !is_special(id)));
            prop_assert_eq!(k.len(), n);
        }
    }
}
