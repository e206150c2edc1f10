//! Token-by-token decoding with cached attention keys and values.

use super::{Attention, FeedForward, Model, Norm};
use crate::autograd::gelu;
use crate::tensor::{dot, log_softmax, Mat};
use crate::text::TokenId;

const LN_EPS: f64 = 1e-5;

/// Decoder bound to one encoded image.
pub struct IncrementalDecoder<'m> {
    model: &'m Model,
    cross: Vec<(Mat, Mat)>,
}

/// Self-attention cache for one partial hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pos: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl<'m> IncrementalDecoder<'m> {
    pub(super) fn new(model: &'m Model, memory: Mat) -> Self {
        let p = &model.params;
        let cross = model
            .layout
            .decoder
            .iter()
            .map(|l| {
                (
                    memory.matmul(p.get(l.cross_attn.wk)),
                    memory.matmul(p.get(l.cross_attn.wv)),
                )
            })
            .collect();
        IncrementalDecoder { model, cross }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn start(&self) -> DecoderState {
        let n = self.model.layout.decoder.len();
        DecoderState {
            pos: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    /// Feeds `token` at the next position and returns log-probabilities of
    /// the following token. Panics past `max_len - 1` positions.
    pub fn step(&self, state: &mut DecoderState, token: TokenId) -> Vec<f64> {
        let cfg = &self.model.config;
        assert!(state.pos < cfg.max_len, "decoder position past max_len");
        let p = &self.model.params;
        let lay = &self.model.layout;
        let d = cfg.d_model;
        let mut x: Vec<f64> = p
            .get(lay.tok_emb)
            .row(token)
            .iter()
            .zip(p.get(lay.tok_pos).row(state.pos))
            .map(|(a, b)| a + b)
            .collect();
        for (l, layer) in lay.decoder.iter().enumerate() {
            let h = self.norm(&layer.norm1, &x);
            let q = vec_mat(&h, p.get(layer.self_attn.wq));
            state.keys[l].extend(vec_mat(&h, p.get(layer.self_attn.wk)));
            state.values[l].extend(vec_mat(&h, p.get(layer.self_attn.wv)));
            let n = state.pos + 1;
            let a = self.attend(&q, &state.keys[l], &state.values[l], n, &layer.self_attn);
            add_in(&mut x, &a);

            let h = self.norm(&layer.norm2, &x);
            let q = vec_mat(&h, p.get(layer.cross_attn.wq));
            let (ck, cv) = &self.cross[l];
            let a = self.attend(&q, &ck.data, &cv.data, ck.rows, &layer.cross_attn);
            add_in(&mut x, &a);

            let h = self.norm(&layer.norm3, &x);
            let f = self.feed_forward(&layer.ff, &h);
            add_in(&mut x, &f);
        }
        state.pos += 1;
        let h = self.norm(&lay.dec_norm, &x);
        let mut logits = vec_mat(&h, p.get(lay.out_w));
        for (z, b) in logits.iter_mut().zip(&p.get(lay.out_b).data) {
            *z += b;
        }
        debug_assert_eq!(x.len(), d);
        log_softmax(&logits, 1.0)
    }

    fn norm(&self, n: &Norm, x: &[f64]) -> Vec<f64> {
        let p = &self.model.params;
        let cols = x.len() as f64;
        let mean = x.iter().sum::<f64>() / cols;
        let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .zip(&p.get(n.gain).data)
            .zip(&p.get(n.bias).data)
            .map(|((a, g), b)| (a - mean) * inv * g + b)
            .collect()
    }

    /// Multi-head attention of one query row over `n` cached key/value rows.
    fn attend(&self, q: &[f64], keys: &[f64], values: &[f64], n: usize, attn: &Attention) -> Vec<f64> {
        let cfg = &self.model.config;
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut joined = vec![0.0; d];
        let mut scores = vec![0.0; n];
        for h in 0..cfg.n_heads {
            let qh = &q[h * hd..(h + 1) * hd];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qh, &keys[j * d + h * hd..j * d + (h + 1) * hd]);
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = ((*s - max) * scale).exp();
                sum += *s;
            }
            let out = &mut joined[h * hd..(h + 1) * hd];
            for (j, s) in scores.iter().enumerate() {
                let w = s / sum;
                for (o, v) in out.iter_mut().zip(&values[j * d + h * hd..j * d + (h + 1) * hd]) {
                    *o += w * v;
                }
            }
        }
        vec_mat(&joined, self.model.params.get(attn.wo))
    }

    fn feed_forward(&self, ff: &FeedForward, x: &[f64]) -> Vec<f64> {
        let p = &self.model.params;
        let mut h = vec_mat(x, p.get(ff.w1));
        for (a, b) in h.iter_mut().zip(&p.get(ff.b1).data) {
            *a = gelu(*a + b);
        }
        let mut o = vec_mat(&h, p.get(ff.w2));
        add_in(&mut o, &p.get(ff.b2).data);
        o
    }
}

fn vec_mat(x: &[f64], m: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for (k, &a) in x.iter().enumerate() {
        for (o, b) in out.iter_mut().zip(m.row(k)) {
            *o += a * b;
        }
    }
    out
}

fn add_in(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::text::{TokenSequence, BOS, EOS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn incremental_matches_teacher_forced() {
        let cfg = ModelConfig {
            vocab_size: 20,
            max_len: 10,
            ..ModelConfig::default()
        };
        let m = Model::init(cfg.clone(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Mat::from_vec(
            16,
            16,
            (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let toks = TokenSequence(vec![BOS, 7, 9, 4, 4, 12, EOS]);
        let full = m.forward(&img, &toks).unwrap();
        let dec = m.decoder_for(&img).unwrap();
        let mut st = dec.start();
        for (r, &t) in toks.ids()[..toks.len() - 1].iter().enumerate() {
            let lp = dec.step(&mut st, t);
            let reference = log_softmax(full.row(r), 1.0);
            for (a, b) in lp.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-10, "row {r}: {a} vs {b}");
            }
        }
    }
}
