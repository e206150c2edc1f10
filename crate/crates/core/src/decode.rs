//! Greedy and beam-search caption generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IncrementalDecoder, Model};
use crate::tensor::Mat;
use crate::text::{TokenId, TokenSequence, BOS, EOS};

/// A left-to-right next-token distribution over a fixed vocabulary.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn start(&self) -> Self::State;

    /// Consumes `token` and returns log-probabilities for the next token.
    fn step(&self, state: &mut Self::State, token: TokenId) -> Vec<f64>;
}

impl StepScorer for IncrementalDecoder<'_> {
    type State = crate::model::DecoderState;

    fn vocab_size(&self) -> usize {
        self.model().config().vocab_size
    }

    fn start(&self) -> Self::State {
        IncrementalDecoder::start(self)
    }

    fn step(&self, state: &mut Self::State, token: TokenId) -> Vec<f64> {
        IncrementalDecoder::step(self, state, token)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: TokenSequence,
    pub logprob: f64,
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 5,
            max_len: 16,
            length_penalty: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if !(self.length_penalty.is_finite() && self.length_penalty >= 0.0) {
            return Err(Error::Config("length penalty must be non-negative".into()));
        }
        Ok(())
    }

    fn score(&self, logprob: f64, generated: usize) -> f64 {
        if self.length_penalty == 0.0 {
            logprob
        } else {
            logprob / (generated as f64).powf(self.length_penalty)
        }
    }
}

/// Decoding strategy used for pseudo-captions and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMethod {
    Greedy,
    Beam,
}

impl std::str::FromStr for DecodeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMethod::Greedy),
            "beam" => Ok(DecodeMethod::Beam),
            other => Err(Error::Config(format!("unknown decode method {other:?}"))),
        }
    }
}

impl DecodeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMethod::Greedy => "greedy",
            DecodeMethod::Beam => "beam",
        }
    }
}

impl std::fmt::Display for DecodeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Picks the arg-max token at every step, lowest id on ties. A sequence that
/// reaches `max_len - 1` tokens without `EOS` is completed with `EOS`.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Hypothesis {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut state = scorer.start();
    let mut tokens = vec![BOS];
    let mut logprob = 0.0;
    loop {
        let lp = scorer.step(&mut state, *tokens.last().unwrap());
        let next = if tokens.len() == max_len - 1 {
            EOS
        } else {
            argmax_lowest(&lp)
        };
        logprob += lp[next];
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Hypothesis {
        tokens: TokenSequence(tokens),
        logprob,
        complete: true,
    }
}

#[derive(Clone)]
struct Live<St> {
    tokens: Vec<TokenId>,
    logprob: f64,
    state: St,
    next: Vec<f64>,
}

/// Result of a beam search: the best finished hypothesis and every finished
/// hypothesis, best first.
#[derive(Debug, Clone)]
pub struct BeamOutput {
    pub best: Hypothesis,
    pub finished: Vec<Hypothesis>,
}

/// Ranks by score, then higher log-probability, then smaller token ids.
fn better(cfg: &BeamConfig, a: (&[TokenId], f64), b: (&[TokenId], f64)) -> std::cmp::Ordering {
    let sa = cfg.score(a.1, a.0.len() - 1);
    let sb = cfg.score(b.1, b.0.len() - 1);
    sb.total_cmp(&sa)
        .then(b.1.total_cmp(&a.1))
        .then_with(|| a.0.cmp(b.0))
}

/// Standard beam search. Each step expands every live hypothesis over the
/// whole vocabulary and keeps the global top `width` candidates; candidates
/// ending in `EOS` retire to the finished pool. Search stops once no live
/// hypothesis can outscore the best finished one, or at `max_len`.
pub fn beam_decode<S: StepScorer>(scorer: &S, cfg: &BeamConfig) -> Result<BeamOutput> {
    cfg.validate()?;
    let mut state = scorer.start();
    let next = scorer.step(&mut state, BOS);
    let mut live = vec![Live {
        tokens: vec![BOS],
        logprob: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let max_generated = cfg.max_len - 1;

    while !live.is_empty() {
        let last_step = live[0].tokens.len() == cfg.max_len - 1;
        let mut cands: Vec<(usize, TokenId, f64, Vec<TokenId>)> = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let choices: Box<dyn Iterator<Item = TokenId>> = if last_step {
                Box::new(std::iter::once(EOS))
            } else {
                Box::new(0..scorer.vocab_size())
            };
            for tok in choices {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                cands.push((h, tok, hyp.logprob + hyp.next[tok], tokens));
            }
        }
        cands.sort_by(|a, b| better(cfg, (&a.3, a.2), (&b.3, b.2)));
        cands.truncate(cfg.width);

        let mut next_live = Vec::with_capacity(cfg.width);
        for (h, tok, logprob, tokens) in cands {
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens: TokenSequence(tokens),
                    logprob,
                    complete: true,
                });
            } else {
                let mut state = live[h].state.clone();
                let next = scorer.step(&mut state, tok);
                next_live.push(Live {
                    tokens,
                    logprob,
                    state,
                    next,
                });
            }
        }
        live = next_live;

        if let Some(best) = finished
            .iter()
            .map(|f| cfg.score(f.logprob, f.tokens.len() - 1))
            .max_by(f64::total_cmp)
        {
            // log-probabilities only fall, so a live hypothesis is bounded by
            // its current log-probability spread over the longest length
            let bound = live
                .iter()
                .map(|l| {
                    if cfg.length_penalty == 0.0 {
                        l.logprob
                    } else {
                        l.logprob / (max_generated as f64).powf(cfg.length_penalty)
                    }
                })
                .max_by(f64::total_cmp);
            if bound.is_none_or(|b| best >= b) {
                break;
            }
        }
    }

    finished.sort_by(|a, b| better(cfg, (a.tokens.ids(), a.logprob), (b.tokens.ids(), b.logprob)));
    let best = finished
        .first()
        .cloned()
        .expect("the final step only admits EOS");
    Ok(BeamOutput { best, finished })
}

/// Decodes one image with a model.
pub fn caption_image(
    model: &Model,
    patches: &Mat,
    method: DecodeMethod,
    beam: &BeamConfig,
) -> Result<Hypothesis> {
    let dec = model.decoder_for(patches)?;
    let max_len = beam.max_len.min(model.config().max_len);
    match method {
        DecodeMethod::Greedy => Ok(greedy_decode(&dec, max_len)),
        DecodeMethod::Beam => {
            let cfg = BeamConfig { max_len, ..*beam };
            Ok(beam_decode(&dec, &cfg)?.best)
        }
    }
}

/// Sum of per-step log-probabilities of `tokens` under the scorer.
pub fn rescore<S: StepScorer>(scorer: &S, tokens: &[TokenId]) -> f64 {
    let mut state = scorer.start();
    let mut total = 0.0;
    for w in tokens.windows(2) {
        total += scorer.step(&mut state, w[0])[w[1]];
    }
    total
}
