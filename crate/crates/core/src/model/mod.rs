//! Miniature encoder-decoder captioner.
//!
//! Image patches are linearly projected, given learned positional embeddings,
//! optionally passed through extra patch self-attention blocks, and then
//! through pre-norm transformer encoder layers. The decoder is a pre-norm
//! transformer with causal self-attention and cross-attention over the patch
//! states, projecting to vocabulary logits.

mod checkpoint;
mod infer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::text::{TokenId, TokenSequence};

pub use infer::{DecoderState, IncrementalDecoder};

/// Per-position vocabulary logits; row `r` predicts token `r + 1`.
pub type LogitsMatrix = Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub d_patch: usize,
    pub max_len: usize,
    pub use_patch_self_attention: bool,
    pub patch_attn_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 2,
            d_ff: 64,
            vocab_size: 64,
            grid_h: 4,
            grid_w: 4,
            d_patch: 16,
            max_len: 16,
            use_patch_self_attention: true,
            patch_attn_layers: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("d_patch", self.d_patch),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.use_patch_self_attention && self.patch_attn_layers == 0 {
            return Err(Error::Config(
                "patch_attn_layers must be at least 1 when patch self-attention is on".into(),
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct PatchBlock {
    norm: Norm,
    attn: Attention,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: Attention,
    norm2: Norm,
    cross_attn: Attention,
    norm3: Norm,
    ff: FeedForward,
}

/// Parameter ids resolved by name.
#[derive(Debug, Clone)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    patch_pos: ParamId,
    patch_blocks: Vec<PatchBlock>,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    tok_emb: ParamId,
    tok_pos: ParamId,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out_w: ParamId,
    out_b: ParamId,
}

/// Expected shape of every named parameter, in creation order.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.d_model;
    let mut specs = vec![
        ("patch.proj.w".to_string(), cfg.d_patch, d, Init::Uniform),
        ("patch.proj.b".to_string(), 1, d, Init::Zero),
        ("patch.pos".to_string(), cfg.num_patches(), d, Init::Uniform),
    ];
    if cfg.use_patch_self_attention {
        for l in 0..cfg.patch_attn_layers {
            specs.extend(patch_block_specs(cfg, l));
        }
    }
    let norm = |p: &str| {
        [
            (format!("{p}.gain"), 1, d, Init::One),
            (format!("{p}.bias"), 1, d, Init::Zero),
        ]
    };
    let attn = |p: &str| {
        ["wq", "wk", "wv", "wo"].map(|w| (format!("{p}.{w}"), d, d, Init::Uniform))
    };
    let ff = |p: &str| {
        [
            (format!("{p}.w1"), d, cfg.d_ff, Init::Uniform),
            (format!("{p}.b1"), 1, cfg.d_ff, Init::Zero),
            (format!("{p}.w2"), cfg.d_ff, d, Init::Uniform),
            (format!("{p}.b2"), 1, d, Init::Zero),
        ]
    };
    for l in 0..cfg.n_enc_layers {
        specs.extend(norm(&format!("enc.{l}.norm1")));
        specs.extend(attn(&format!("enc.{l}.attn")));
        specs.extend(norm(&format!("enc.{l}.norm2")));
        specs.extend(ff(&format!("enc.{l}.ff")));
    }
    specs.extend(norm("enc.norm"));
    specs.push(("tok.emb".into(), cfg.vocab_size, d, Init::Uniform));
    specs.push(("tok.pos".into(), cfg.max_len, d, Init::Uniform));
    for l in 0..cfg.n_dec_layers {
        specs.extend(norm(&format!("dec.{l}.norm1")));
        specs.extend(attn(&format!("dec.{l}.self")));
        specs.extend(norm(&format!("dec.{l}.norm2")));
        specs.extend(attn(&format!("dec.{l}.cross")));
        specs.extend(norm(&format!("dec.{l}.norm3")));
        specs.extend(ff(&format!("dec.{l}.ff")));
    }
    specs.extend(norm("dec.norm"));
    specs.push(("out.w".into(), d, cfg.vocab_size, Init::Uniform));
    specs.push(("out.b".into(), 1, cfg.vocab_size, Init::Zero));
    specs
}

fn patch_block_specs(cfg: &ModelConfig, l: usize) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.d_model;
    let p = format!("patch_attn.{l}");
    let mut v = vec![
        (format!("{p}.norm.gain"), 1, d, Init::One),
        (format!("{p}.norm.bias"), 1, d, Init::Zero),
    ];
    v.extend(["wq", "wk", "wv", "wo"].map(|w| (format!("{p}.attn.{w}"), d, d, Init::Uniform)));
    v
}

const PATCH_ATTN_PREFIX: &str = "patch_attn.";

#[derive(Debug, Clone, Copy)]
enum Init {
    Uniform,
    Zero,
    One,
}

fn init_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, init: Init, bound: f64) -> Mat {
    match init {
        Init::Zero => Mat::zeros(rows, cols),
        Init::One => Mat::filled(rows, cols, 1.0),
        Init::Uniform => Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        ),
    }
}

impl Layout {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Layout> {
        for (name, rows, cols, _) in param_specs(cfg) {
            let id = store
                .find(&name)
                .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
            if store.get(id).shape() != (rows, cols) {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    store.get(id).shape(),
                    (rows, cols)
                )));
            }
        }
        if store.len() != param_specs(cfg).len() {
            return Err(Error::Shape(format!(
                "store has {} parameters, config expects {}",
                store.len(),
                param_specs(cfg).len()
            )));
        }
        let id = |n: &str| store.find(n).expect("checked above");
        let norm = |p: &str| Norm {
            gain: id(&format!("{p}.gain")),
            bias: id(&format!("{p}.bias")),
        };
        let attn = |p: &str| Attention {
            wq: id(&format!("{p}.wq")),
            wk: id(&format!("{p}.wk")),
            wv: id(&format!("{p}.wv")),
            wo: id(&format!("{p}.wo")),
        };
        let ff = |p: &str| FeedForward {
            w1: id(&format!("{p}.w1")),
            b1: id(&format!("{p}.b1")),
            w2: id(&format!("{p}.w2")),
            b2: id(&format!("{p}.b2")),
        };
        let patch_blocks = if cfg.use_patch_self_attention {
            (0..cfg.patch_attn_layers)
                .map(|l| PatchBlock {
                    norm: norm(&format!("patch_attn.{l}.norm")),
                    attn: attn(&format!("patch_attn.{l}.attn")),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Layout {
            patch_w: id("patch.proj.w"),
            patch_b: id("patch.proj.b"),
            patch_pos: id("patch.pos"),
            patch_blocks,
            encoder: (0..cfg.n_enc_layers)
                .map(|l| EncoderLayer {
                    norm1: norm(&format!("enc.{l}.norm1")),
                    attn: attn(&format!("enc.{l}.attn")),
                    norm2: norm(&format!("enc.{l}.norm2")),
                    ff: ff(&format!("enc.{l}.ff")),
                })
                .collect(),
            enc_norm: norm("enc.norm"),
            tok_emb: id("tok.emb"),
            tok_pos: id("tok.pos"),
            decoder: (0..cfg.n_dec_layers)
                .map(|l| DecoderLayer {
                    norm1: norm(&format!("dec.{l}.norm1")),
                    self_attn: attn(&format!("dec.{l}.self")),
                    norm2: norm(&format!("dec.{l}.norm2")),
                    cross_attn: attn(&format!("dec.{l}.cross")),
                    norm3: norm(&format!("dec.{l}.norm3")),
                    ff: ff(&format!("dec.{l}.ff")),
                })
                .collect(),
            dec_norm: norm("dec.norm"),
            out_w: id("out.w"),
            out_b: id("out.b"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    frozen: bool,
}

/// A recorded teacher-forced pass, kept for backward.
pub struct ForwardPass<'m> {
    graph: Graph<'m>,
    logits: NodeId,
}

impl ForwardPass<'_> {
    pub fn logits(&self) -> &LogitsMatrix {
        self.graph.value(self.logits)
    }
}

impl Model {
    /// Weights uniform in ±1/√d_model, norm gains one, biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (config.d_model as f64).sqrt();
        let mut params = ParamStore::new();
        for (name, rows, cols, init) in param_specs(&config) {
            params.add(name, init_tensor(&mut rng, rows, cols, init, bound));
        }
        Self::from_parts(config, params)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let layout = Layout::resolve(&params, &config)?;
        Ok(Model {
            config,
            params,
            layout,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable parameter access; refused for frozen models.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn clone_frozen(&self) -> Model {
        let mut m = self.clone();
        m.frozen = true;
        m
    }

    /// Adds or removes the patch self-attention blocks. Newly added blocks are
    /// initialized from `seed`; removal drops their parameters entirely.
    pub fn set_patch_self_attention(&mut self, enabled: bool, seed: u64) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if enabled == self.config.use_patch_self_attention {
            return Ok(());
        }
        let mut config = self.config.clone();
        config.use_patch_self_attention = enabled;
        let mut params = self.params.clone();
        if enabled {
            config.patch_attn_layers = config.patch_attn_layers.max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bound = 1.0 / (config.d_model as f64).sqrt();
            for l in 0..config.patch_attn_layers {
                for (name, rows, cols, init) in patch_block_specs(&config, l) {
                    params.add(name, init_tensor(&mut rng, rows, cols, init, bound));
                }
            }
        } else {
            params.remove_prefix(PATCH_ATTN_PREFIX);
        }
        *self = Model::from_parts(config, params)?;
        Ok(())
    }

    fn check_image(&self, patches: &Mat) -> Result<()> {
        let want = (self.config.num_patches(), self.config.d_patch);
        if patches.shape() != want {
            return Err(Error::Shape(format!(
                "image patches {:?}, model expects {:?}",
                patches.shape(),
                want
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() < 2 {
            return Err(Error::Shape("token sequence needs at least two ids".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Shape(format!(
                "token sequence of length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidTokenId {
                id: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn attention(
        &self,
        g: &mut Graph,
        attn: &Attention,
        query_in: NodeId,
        kv_in: NodeId,
        causal: bool,
    ) -> NodeId {
        let (wq, wk, wv, wo) = (
            g.param(attn.wq),
            g.param(attn.wk),
            g.param(attn.wv),
            g.param(attn.wo),
        );
        let q = g.matmul(query_in, wq);
        let k = g.matmul(kv_in, wk);
        let v = g.matmul(kv_in, wv);
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let heads: Vec<NodeId> = (0..self.config.n_heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * hd, hd);
                let kh = g.slice_cols(k, h * hd, hd);
                let vh = g.slice_cols(v, h * hd, hd);
                let scores = g.matmul_t(qh, kh);
                let probs = g.softmax_rows(scores, scale, causal);
                g.matmul(probs, vh)
            })
            .collect();
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        g.matmul(joined, wo)
    }

    fn norm(g: &mut Graph, n: &Norm, x: NodeId) -> NodeId {
        let (gain, bias) = (g.param(n.gain), g.param(n.bias));
        g.layer_norm(x, gain, bias)
    }

    fn feed_forward(g: &mut Graph, ff: &FeedForward, x: NodeId) -> NodeId {
        let (w1, b1, w2, b2) = (g.param(ff.w1), g.param(ff.b1), g.param(ff.w2), g.param(ff.b2));
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let h = g.matmul(h, w2);
        g.add_row(h, b2)
    }

    /// Records the image encoder; returns the patch-state node.
    fn encode_graph(&self, g: &mut Graph, patches: &Mat) -> NodeId {
        let lay = &self.layout;
        let x = g.constant(patches.clone());
        let w = g.param(lay.patch_w);
        let h = g.matmul(x, w);
        let b = g.param(lay.patch_b);
        let h = g.add_row(h, b);
        let pos = g.param(lay.patch_pos);
        let mut h = g.add(h, pos);
        for block in &lay.patch_blocks {
            let n = Self::norm(g, &block.norm, h);
            let a = self.attention(g, &block.attn, n, n, false);
            h = g.add(h, a);
        }
        for layer in &lay.encoder {
            let n = Self::norm(g, &layer.norm1, h);
            let a = self.attention(g, &layer.attn, n, n, false);
            h = g.add(h, a);
            let n = Self::norm(g, &layer.norm2, h);
            let f = Self::feed_forward(g, &layer.ff, n);
            h = g.add(h, f);
        }
        Self::norm(g, &lay.enc_norm, h)
    }

    fn decode_graph(&self, g: &mut Graph, memory: NodeId, inputs: &[TokenId]) -> NodeId {
        let lay = &self.layout;
        let emb = g.param(lay.tok_emb);
        let pos_table = g.param(lay.tok_pos);
        let tok = g.gather(emb, inputs);
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let pos = g.gather(pos_table, &positions);
        let mut x = g.add(tok, pos);
        for layer in &lay.decoder {
            let n = Self::norm(g, &layer.norm1, x);
            let a = self.attention(g, &layer.self_attn, n, n, true);
            x = g.add(x, a);
            let n = Self::norm(g, &layer.norm2, x);
            let c = self.attention(g, &layer.cross_attn, n, memory, false);
            x = g.add(x, c);
            let n = Self::norm(g, &layer.norm3, x);
            let f = Self::feed_forward(g, &layer.ff, n);
            x = g.add(x, f);
        }
        let x = Self::norm(g, &lay.dec_norm, x);
        let w = g.param(lay.out_w);
        let logits = g.matmul(x, w);
        let b = g.param(lay.out_b);
        g.add_row(logits, b)
    }

    /// Patch states (H·W × d_model).
    pub fn encode_image(&self, patches: &Mat) -> Result<Mat> {
        self.check_image(patches)?;
        let mut g = Graph::new(&self.params);
        let out = self.encode_graph(&mut g, patches);
        Ok(g.value(out).clone())
    }

    /// Teacher-forced pass recorded for backward.
    pub fn forward_pass(&self, patches: &Mat, tokens: &TokenSequence) -> Result<ForwardPass<'_>> {
        self.check_image(patches)?;
        self.check_tokens(tokens.ids())?;
        let mut graph = Graph::new(&self.params);
        let memory = self.encode_graph(&mut graph, patches);
        let inputs = &tokens.ids()[..tokens.len() - 1];
        let logits = self.decode_graph(&mut graph, memory, inputs);
        Ok(ForwardPass { graph, logits })
    }

    /// Teacher-forced logits, one row per predicted position.
    pub fn forward(&self, patches: &Mat, tokens: &TokenSequence) -> Result<LogitsMatrix> {
        Ok(self.forward_pass(patches, tokens)?.logits().clone())
    }

    /// Adds the parameter gradients of a loss whose gradient with respect to
    /// the pass's logits is `dlogits`.
    pub fn accumulate_backward(
        &self,
        pass: &ForwardPass,
        dlogits: &Mat,
        grads: &mut Gradients,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if dlogits.shape() != pass.logits().shape() {
            return Err(Error::Shape(format!(
                "logit gradient {:?} vs logits {:?}",
                dlogits.shape(),
                pass.logits().shape()
            )));
        }
        pass.graph.backward(&[(pass.logits, dlogits)], grads);
        Ok(())
    }

    pub fn backward(&self, pass: &ForwardPass, dlogits: &Mat) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(&self.params);
        self.accumulate_backward(pass, dlogits, &mut grads)?;
        Ok(grads)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients::zeros_like(&self.params)
    }

    /// Incremental decoder over one image, for generation.
    pub fn decoder_for(&self, patches: &Mat) -> Result<IncrementalDecoder<'_>> {
        let memory = self.encode_image(patches)?;
        Ok(IncrementalDecoder::new(self, memory))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;
    use crate::text::{BOS, EOS};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 2,
            d_ff: 16,
            vocab_size: 10,
            grid_h: 2,
            grid_w: 2,
            d_patch: 4,
            max_len: 8,
            use_patch_self_attention: true,
            patch_attn_layers: 1,
        }
    }

    fn image(seed: u64, cfg: &ModelConfig) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(
            cfg.num_patches(),
            cfg.d_patch,
            (0..cfg.num_patches() * cfg.d_patch)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(tiny(), 5).unwrap();
        let b = Model::init(tiny(), 5).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Model::init(tiny(), 6).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = ModelConfig {
            d_model: 32,
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(Model::init(cfg, 0), Err(Error::Config(_))));
        let cfg = ModelConfig {
            max_len: 1,
            ..ModelConfig::default()
        };
        assert!(Model::init(cfg, 0).is_err());
    }

    #[test]
    fn forward_shapes_and_normalization() {
        let cfg = tiny();
        let m = Model::init(cfg.clone(), 1).unwrap();
        let img = image(2, &cfg);
        let l = m.forward(&img, &TokenSequence(vec![BOS, EOS])).unwrap();
        assert_eq!(l.shape(), (1, cfg.vocab_size));
        let l = m
            .forward(&img, &TokenSequence(vec![BOS, 5, 6, 7, EOS]))
            .unwrap();
        assert_eq!(l.rows, 4);
        assert!(l.is_finite());
        for r in 0..l.rows {
            let s: f64 = softmax(l.row(r), 1.0).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_rejects_overlong_and_bad_images() {
        let cfg = tiny();
        let m = Model::init(cfg.clone(), 1).unwrap();
        let img = image(2, &cfg);
        let long = TokenSequence(vec![BOS; cfg.max_len + 1]);
        assert!(matches!(m.forward(&img, &long), Err(Error::Shape(_))));
        assert!(m.forward(&Mat::zeros(3, 4), &TokenSequence(vec![BOS, EOS])).is_err());
    }

    #[test]
    fn decoder_is_causal() {
        let cfg = tiny();
        let m = Model::init(cfg.clone(), 3).unwrap();
        let img = image(4, &cfg);
        let short = m.forward(&img, &TokenSequence(vec![BOS, 4, 5, 6])).unwrap();
        let long = m
            .forward(&img, &TokenSequence(vec![BOS, 4, 5, 6, 9, 8]))
            .unwrap();
        for r in 0..short.rows {
            assert_eq!(short.row(r), long.row(r), "row {r}");
        }
    }

    #[test]
    fn toggle_off_skips_patch_block() {
        let cfg = tiny();
        let mut with = Model::init(cfg.clone(), 7).unwrap();
        let img = image(8, &cfg);
        let mut without = with.clone();
        without.set_patch_self_attention(false, 0).unwrap();
        assert!(without.params().iter().all(|(_, n, _)| !n.starts_with("patch_attn")));
        // same states as a model that never had the block
        let mut never_cfg = cfg.clone();
        never_cfg.use_patch_self_attention = false;
        let mut never = Model::init(never_cfg, 0).unwrap();
        for (id, name, _) in never.params().clone().iter() {
            let src = without.params().find(name).unwrap();
            *never.params_mut().unwrap().get_mut(id) = without.params().get(src).clone();
        }
        assert_eq!(
            without.encode_image(&img).unwrap(),
            never.encode_image(&img).unwrap()
        );
        assert_ne!(
            with.encode_image(&img).unwrap(),
            without.encode_image(&img).unwrap()
        );
        with.set_patch_self_attention(true, 0).unwrap();
    }

    #[test]
    fn zero_image_and_projection_leave_only_positions() {
        let mut cfg = tiny();
        cfg.use_patch_self_attention = false;
        cfg.n_enc_layers = 0;
        let mut m = Model::init(cfg.clone(), 1).unwrap();
        let w = m.params().find("patch.proj.w").unwrap();
        *m.params_mut().unwrap().get_mut(w) = Mat::zeros(cfg.d_patch, cfg.d_model);
        let a = m.encode_image(&Mat::zeros(4, 4)).unwrap();
        let b = m.encode_image(&image(1, &cfg)).unwrap();
        assert_eq!(a, b);
        // a different positional table changes the states
        let pos = m.params().find("patch.pos").unwrap();
        m.params_mut().unwrap().get_mut(pos).data[0] += 1.0;
        assert_ne!(m.encode_image(&Mat::zeros(4, 4)).unwrap(), a);
    }

    #[test]
    fn patch_attention_mixes_patches() {
        let mut cfg = tiny();
        cfg.n_enc_layers = 0;
        let m = Model::init(cfg.clone(), 11).unwrap();
        let img = image(12, &cfg);
        let mut bumped = img.clone();
        bumped.row_mut(0)[0] += 0.5;
        let a = m.encode_image(&img).unwrap();
        let b = m.encode_image(&bumped).unwrap();
        let changed = (0..a.rows).filter(|&r| a.row(r) != b.row(r)).count();
        assert!(changed >= 2, "only {changed} rows changed");

        cfg.use_patch_self_attention = false;
        let m = Model::init(cfg, 11).unwrap();
        let a = m.encode_image(&img).unwrap();
        let b = m.encode_image(&bumped).unwrap();
        let changed = (0..a.rows).filter(|&r| a.row(r) != b.row(r)).count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn frozen_clone_is_isolated() {
        let cfg = tiny();
        let mut student = Model::init(cfg.clone(), 1).unwrap();
        let teacher = student.clone_frozen();
        let img = image(3, &cfg);
        let toks = TokenSequence(vec![BOS, 4, EOS]);
        assert_eq!(
            student.forward(&img, &toks).unwrap(),
            teacher.forward(&img, &toks).unwrap()
        );
        student.params_mut().unwrap().tensors_mut()[0].data[0] += 1.0;
        assert_ne!(student.params(), teacher.params());
        let pass = teacher.forward_pass(&img, &toks).unwrap();
        let d = Mat::zeros(2, cfg.vocab_size);
        assert!(matches!(teacher.backward(&pass, &d), Err(Error::Frozen)));
        let twice = teacher.clone_frozen();
        assert!(twice.is_frozen());
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let cfg = tiny();
        let m = Model::init(cfg.clone(), 1).unwrap();
        let img = image(3, &cfg);
        let pass = m
            .forward_pass(&img, &TokenSequence(vec![BOS, 4, EOS]))
            .unwrap();
        let mut d = Mat::zeros(2, cfg.vocab_size);
        d.data[3] = 1.0;
        let grads = m.backward(&pass, &d).unwrap();
        // positions beyond the sequence never enter the computation
        let pos = m.params().find("tok.pos").unwrap();
        let gp = grads.get(pos);
        for r in 2..cfg.max_len {
            assert!(gp.row(r).iter().all(|&x| x == 0.0));
        }
        // embeddings of tokens absent from the input
        let emb = m.params().find("tok.emb").unwrap();
        assert!(grads.get(emb).row(9).iter().all(|&x| x == 0.0));
    }
}
