//! Vision-language surrogate models: a trainable toy dual-encoder with a
//! cross-attention fusion head, the attention-map extraction used for patch
//! placement, and an adapter registry for externally supplied checkpoints.
//!
//! The toy architecture mirrors fusion-style retrieval models structurally:
//! a patch-embedding transformer produces a grid of visual tokens, a small
//! text transformer produces token embeddings, and one cross-attention block
//! (text queries, image keys/values) feeds a scalar match head. A dot-product
//! variant without a fusion block stands in for alignment-style models; its
//! saliency map comes from a documented pseudo-attention fallback.

use crate::error::{Error, Result};
use crate::eval;
use crate::nn::{self, Adam, ParamBinding, ParamSet};
use crate::raster::Raster;
use crate::tape::{BufId, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const MODEL_KIND: &str = "toy_dual_encoder";

// ── Vocabulary and text batches ──────────────────────────────────────

/// Closed whitespace-tokenized vocabulary, one token per line on disk.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Tokenizer(format!("duplicate token '{t}'")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn from_captions<'a>(captions: impl Iterator<Item = &'a str>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut seen = HashMap::new();
        for caption in captions {
            for word in caption.split_whitespace() {
                let w = word.to_lowercase();
                if !seen.contains_key(&w) {
                    seen.insert(w.clone(), tokens.len());
                    tokens.push(w);
                }
            }
        }
        Vocabulary::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Result<Vec<usize>> = text
            .split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.index
                    .get(&w)
                    .copied()
                    .ok_or_else(|| Error::Tokenizer(format!("token '{w}' not in vocabulary")))
            })
            .collect();
        let ids = ids?;
        if ids.is_empty() {
            return Err(Error::Tokenizer("empty caption".into()));
        }
        Ok(ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocabulary::new(text.lines().map(|l| l.to_string()).collect())
    }
}

/// Tokenized caption pool.
#[derive(Debug, Clone)]
pub struct TextBatch {
    sequences: Vec<Vec<usize>>,
    vocab_size: usize,
}

impl TextBatch {
    pub fn new(sequences: Vec<Vec<usize>>, vocab_size: usize) -> Result<Self> {
        for (i, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Tokenizer(format!("sequence {i} is empty")));
            }
            if let Some(&bad) = seq.iter().find(|&&id| id >= vocab_size) {
                return Err(Error::Tokenizer(format!(
                    "sequence {i} has token id {bad} outside vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(TextBatch { sequences, vocab_size })
    }

    pub fn from_captions(vocab: &Vocabulary, captions: &[String]) -> Result<Self> {
        let sequences: Result<Vec<Vec<usize>>> =
            captions.iter().map(|c| vocab.tokenize(c)).collect();
        TextBatch::new(sequences?, vocab.len())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn sequence(&self, i: usize) -> &[usize] {
        &self.sequences[i]
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).max().unwrap_or(0)
    }
}

// ── Attention maps ───────────────────────────────────────────────────

/// Text-side attention mass per visual token, reduced over heads and text
/// query tokens; the placement saliency signal.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub grid: usize,
    values: Vec<f64>,
    pub source: String,
}

impl AttentionMap {
    pub fn new(grid: usize, values: Vec<f64>, source: &str) -> Result<Self> {
        if values.len() != grid * grid {
            return Err(Error::shape("attention map", grid * grid, values.len()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("attention map entries must be finite and non-negative".into()));
        }
        Ok(AttentionMap { grid, values, source: source.to_string() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid + col]
    }
}

// ── Descriptor ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// One cross-attention block with text queries over image tokens.
    CrossAttention,
    /// Pooled dot-product score without a fusion block.
    DotProduct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// Linear embedding of non-overlapping patch_embed x patch_embed tiles.
    PatchEmbed,
    /// Three conv/pool stages (8x downsample); translation-equivariant
    /// features, markedly better shape generalization on the toy corpus.
    ConvStem,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub image_size: usize,
    /// Token downsample factor; the conv stem requires 8.
    pub patch_embed: usize,
    pub grid: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub stem: StemKind,
    pub fusion: FusionKind,
    /// Whether the dot-product variant may synthesize a saliency map from
    /// visual-token/pooled-text similarities.
    pub pseudo_attention: bool,
}

/// Final text-token embeddings for one caption; computed once and reused
/// across attack iterations.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub tokens: Vec<f64>,
    pub len: usize,
    pub d_model: usize,
}

/// Tape handles produced by a fusion evaluation.
pub struct FusionTrace {
    pub score: BufId,
    /// Per-head attention weights (text rows x visual tokens); empty when the
    /// model has no fusion block.
    pub attention: Vec<BufId>,
}

// ── Surrogate contract ───────────────────────────────────────────────

/// White-box surrogate: encoders and fusion are traceable so attack gradients
/// can flow from the match score back to image pixels.
pub trait SurrogateModel: Send + Sync {
    fn descriptor(&self) -> &ModelDescriptor;
    fn vocabulary(&self) -> &Vocabulary;

    /// Register model weights on a tape.
    fn bind(&self, tape: &mut Tape) -> ParamBinding;

    /// Image -> grid of visual tokens (n x d_model).
    fn encode_image_traced(&self, tape: &mut Tape, binding: &ParamBinding, image: BufId) -> BufId;

    /// Frozen text-side features for one caption.
    fn text_features(&self, caption: &[usize]) -> Result<TextFeatures>;

    /// Fuse visual tokens with cached text features into a match score.
    fn fuse_traced(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        vis: BufId,
        text: &TextFeatures,
    ) -> FusionTrace;

    fn validate_image(&self, image: &Raster) -> Result<()> {
        let d = self.descriptor();
        if image.height() != d.image_size || image.width() != d.image_size || image.channels() != 3 {
            return Err(Error::shape(
                "model image input",
                format!("{}x{}x3", d.image_size, d.image_size),
                image.shape_string(),
            ));
        }
        Ok(())
    }

    /// Match-score matrix over a pool: entry (i, j) scores image i against
    /// text j.
    fn score_pairs(&self, images: &[Raster], texts: &TextBatch) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() || texts.is_empty() {
            return Err(Error::InvalidInput("score_pairs: empty image or text pool".into()));
        }
        if texts.vocab_size() != self.vocabulary().len() {
            return Err(Error::Tokenizer(format!(
                "text batch vocabulary {} does not match model vocabulary {}",
                texts.vocab_size(),
                self.vocabulary().len()
            )));
        }
        for image in images {
            self.validate_image(image)?;
        }
        let features: Result<Vec<TextFeatures>> =
            (0..texts.len()).map(|j| self.text_features(texts.sequence(j))).collect();
        let features = features?;
        let mut out = Vec::with_capacity(images.len());
        for image in images {
            let mut tape = Tape::new();
            let binding = self.bind(&mut tape);
            let img_id = tape.leaf(
                image.data().to_vec(),
                vec![image.height(), image.width(), image.channels()],
            );
            let vis = self.encode_image_traced(&mut tape, &binding, img_id);
            let mut row = Vec::with_capacity(features.len());
            for tf in &features {
                let trace = self.fuse_traced(&mut tape, &binding, vis, tf);
                row.push(tape.scalar(trace.score));
            }
            out.push(row);
        }
        Ok(out)
    }

    /// Saliency map for one caption over the image token grid. Real
    /// cross-attention when the model has a fusion block; otherwise the
    /// pseudo-attention fallback when enabled.
    fn cross_attention_map(&self, image: &Raster, caption: &[usize]) -> Result<AttentionMap> {
        self.validate_image(image)?;
        let d = self.descriptor();
        let tf = self.text_features(caption)?;
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let img_id = tape.leaf(
            image.data().to_vec(),
            vec![image.height(), image.width(), image.channels()],
        );
        let vis = self.encode_image_traced(&mut tape, &binding, img_id);
        let trace = self.fuse_traced(&mut tape, &binding, vis, &tf);
        let n = d.grid * d.grid;
        if !trace.attention.is_empty() {
            let heads = trace.attention.len() as f64;
            let rows = tf.len as f64;
            let mut reduced = vec![0.0; n];
            for &attn in &trace.attention {
                let data = tape.data(attn);
                for r in 0..tf.len {
                    for c in 0..n {
                        reduced[c] += data[r * n + c];
                    }
                }
            }
            for v in reduced.iter_mut() {
                *v /= heads * rows;
            }
            AttentionMap::new(d.grid, reduced, "cross_attention mean over heads and text tokens")
        } else if d.pseudo_attention {
            // Similarity of each visual token to the pooled text embedding,
            // normalized over tokens.
            let tf_id = tape.leaf(tf.tokens.clone(), vec![tf.len, tf.d_model]);
            let pooled = tape.mean_rows(tf_id, tf.len, tf.d_model);
            let sims = tape.matmul_tb(vis, pooled, n, d.d_model, 1);
            let scaled = tape.scale(sims, 1.0 / (d.d_model as f64).sqrt());
            let weights = tape.softmax_rows(scaled, 1, n);
            AttentionMap::new(d.grid, tape.data(weights).to_vec(), "pseudo_attention over visual tokens")
        } else {
            Err(Error::ContractViolation(
                "model has no fusion block and pseudo-attention is disabled".into(),
            ))
        }
    }
}

// ── Toy dual encoder ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ToyDualEncoder {
    descriptor: ModelDescriptor,
    vocab: Vocabulary,
    params: ParamSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub patch_embed: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Halve the learning rate every this many epochs; 0 keeps it fixed.
    pub lr_half_life: usize,
    /// Clean text-retrieval R@1 the held-out split must reach.
    pub recall_floor: f64,
    /// Maximum absolute pixel shift for train-time jitter augmentation;
    /// 0 disables.
    pub augment_shift: f64,
    /// Maximum relative rescale for train-time jitter augmentation
    /// (e.g. 0.12 draws scales in [0.88, 1.12]); 0 disables.
    pub augment_scale: f64,
    /// Print an epoch progress line every N epochs; 0 silences.
    pub log_every: usize,
    pub stem: StemKind,
    pub fusion: FusionKind,
    pub pseudo_attention: bool,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            d_model: 32,
            heads: 2,
            ffn_hidden: 64,
            patch_embed: 8,
            max_epochs: 500,
            batch_size: 8,
            learning_rate: 2e-3,
            lr_half_life: 0,
            recall_floor: 0.9,
            augment_shift: 3.0,
            augment_scale: 0.12,
            log_every: 0,
            stem: StemKind::ConvStem,
            fusion: FusionKind::CrossAttention,
            pseudo_attention: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub clean_recall_at_1: f64,
    pub train_recall_at_1: f64,
    pub epoch_losses: Vec<f64>,
    pub epoch_recall: Vec<f64>,
}

fn attention_block(
    tape: &mut Tape,
    binding: &ParamBinding,
    prefix: &str,
    queries: BufId,
    keys_values: BufId,
    q_rows: usize,
    kv_rows: usize,
    d_model: usize,
    heads: usize,
) -> (BufId, Vec<BufId>) {
    let dh = d_model / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut acc: Option<BufId> = None;
    let mut attn_ids = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.matmul(queries, binding.id(&format!("{prefix}.wq.{h}")), q_rows, d_model, dh);
        let k = tape.matmul(keys_values, binding.id(&format!("{prefix}.wk.{h}")), kv_rows, d_model, dh);
        let v = tape.matmul(keys_values, binding.id(&format!("{prefix}.wv.{h}")), kv_rows, d_model, dh);
        let logits = tape.matmul_tb(q, k, q_rows, dh, kv_rows);
        let scaled = tape.scale(logits, scale);
        let attn = tape.softmax_rows(scaled, q_rows, kv_rows);
        attn_ids.push(attn);
        let ctx = tape.matmul(attn, v, q_rows, kv_rows, dh);
        let proj = tape.matmul(ctx, binding.id(&format!("{prefix}.wo.{h}")), q_rows, dh, d_model);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, proj),
            None => proj,
        });
    }
    (acc.expect("at least one head"), attn_ids)
}

fn layer_norm_affine(
    tape: &mut Tape,
    binding: &ParamBinding,
    prefix: &str,
    x: BufId,
    rows: usize,
    cols: usize,
) -> BufId {
    let normed = tape.layer_norm_rows(x, rows, cols, 1e-5);
    let scaled = tape.mul_row_vec(normed, binding.id(&format!("{prefix}.g")), rows, cols);
    tape.add_row_vec(scaled, binding.id(&format!("{prefix}.b")), rows, cols)
}

fn encoder_block(
    tape: &mut Tape,
    binding: &ParamBinding,
    prefix: &str,
    x: BufId,
    rows: usize,
    d_model: usize,
    heads: usize,
    ffn: usize,
) -> BufId {
    let normed = layer_norm_affine(tape, binding, &format!("{prefix}.ln1"), x, rows, d_model);
    let (attn_out, _) =
        attention_block(tape, binding, &format!("{prefix}.attn"), normed, normed, rows, rows, d_model, heads);
    let x = tape.add(x, attn_out);
    let normed2 = layer_norm_affine(tape, binding, &format!("{prefix}.ln2"), x, rows, d_model);
    let h1 = tape.matmul(normed2, binding.id(&format!("{prefix}.mlp.w1")), rows, d_model, ffn);
    let h1 = tape.add_row_vec(h1, binding.id(&format!("{prefix}.mlp.b1")), rows, ffn);
    let h1 = tape.relu(h1);
    let h2 = tape.matmul(h1, binding.id(&format!("{prefix}.mlp.w2")), rows, ffn, d_model);
    let h2 = tape.add_row_vec(h2, binding.id(&format!("{prefix}.mlp.b2")), rows, d_model);
    tape.add(x, h2)
}

impl ToyDualEncoder {
    pub fn init(descriptor: ModelDescriptor, vocab: Vocabulary, seed: u64) -> Self {
        assert_eq!(descriptor.d_model % descriptor.heads, 0, "d_model must split across heads");
        assert_eq!(descriptor.grid * descriptor.patch_embed, descriptor.image_size);
        if descriptor.stem == StemKind::ConvStem {
            assert_eq!(descriptor.patch_embed, 8, "conv stem downsamples by exactly 8");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = descriptor.d_model;
        let dh = d / descriptor.heads;
        let n_vis = descriptor.grid * descriptor.grid;
        let mut p = ParamSet::new();

        match descriptor.stem {
            StemKind::PatchEmbed => {
                let patch_dim = descriptor.patch_embed * descriptor.patch_embed * 3;
                p.insert(
                    "img.embed.w",
                    vec![patch_dim, d],
                    nn::init_normal(&mut rng, patch_dim, patch_dim * d),
                );
                p.insert("img.embed.b", vec![d], vec![0.0; d]);
            }
            StemKind::ConvStem => {
                let c1 = d / 2;
                p.insert("img.stem1.w", vec![c1, 3, 3, 3], nn::init_normal(&mut rng, 27, c1 * 27));
                p.insert("img.stem1.b", vec![c1], vec![0.0; c1]);
                p.insert(
                    "img.stem2.w",
                    vec![d, 3, 3, c1],
                    nn::init_normal(&mut rng, 9 * c1, d * 9 * c1),
                );
                p.insert("img.stem2.b", vec![d], vec![0.0; d]);
                p.insert(
                    "img.stem3.w",
                    vec![d, 3, 3, d],
                    nn::init_normal(&mut rng, 9 * d, d * 9 * d),
                );
                p.insert("img.stem3.b", vec![d], vec![0.0; d]);
            }
        }
        p.insert("img.pos", vec![n_vis, d], nn::init_normal(&mut rng, d, n_vis * d));
        p.insert("txt.embed", vec![descriptor.vocab_size, d], nn::init_normal(&mut rng, d, descriptor.vocab_size * d));
        p.insert("txt.pos", vec![descriptor.max_text_len, d], nn::init_normal(&mut rng, d, descriptor.max_text_len * d));

        for enc in ["img", "txt"] {
            for h in 0..descriptor.heads {
                p.insert(&format!("{enc}.attn.wq.{h}"), vec![d, dh], nn::init_normal(&mut rng, d, d * dh));
                p.insert(&format!("{enc}.attn.wk.{h}"), vec![d, dh], nn::init_normal(&mut rng, d, d * dh));
                p.insert(&format!("{enc}.attn.wv.{h}"), vec![d, dh], nn::init_normal(&mut rng, d, d * dh));
                p.insert(&format!("{enc}.attn.wo.{h}"), vec![dh, d], nn::init_normal(&mut rng, dh, dh * d));
            }
            for ln in ["ln1", "ln2", "lnf"] {
                p.insert(&format!("{enc}.{ln}.g"), vec![d], vec![1.0; d]);
                p.insert(&format!("{enc}.{ln}.b"), vec![d], vec![0.0; d]);
            }
            let f = descriptor.ffn_hidden;
            p.insert(&format!("{enc}.mlp.w1"), vec![d, f], nn::init_normal(&mut rng, d, d * f));
            p.insert(&format!("{enc}.mlp.b1"), vec![f], vec![0.0; f]);
            p.insert(&format!("{enc}.mlp.w2"), vec![f, d], nn::init_normal(&mut rng, f, f * d));
            p.insert(&format!("{enc}.mlp.b2"), vec![d], vec![0.0; d]);
        }

        if descriptor.fusion == FusionKind::CrossAttention {
            for h in 0..descriptor.heads {
                p.insert(&format!("fus.wq.{h}"), vec![d, dh], nn::init_normal(&mut rng, d, d * dh));
                p.insert(&format!("fus.wk.{h}"), vec![d, dh], nn::init_normal(&mut rng, d, d * dh));
                p.insert(&format!("fus.wv.{h}"), vec![d, dh], nn::init_normal(&mut rng, d, d * dh));
                p.insert(&format!("fus.wo.{h}"), vec![dh, d], nn::init_normal(&mut rng, dh, dh * d));
            }
            p.insert("fus.ln.g", vec![d], vec![1.0; d]);
            p.insert("fus.ln.b", vec![d], vec![0.0; d]);
            p.insert("fus.head.w1", vec![d, d], nn::init_normal(&mut rng, d, d * d));
            p.insert("fus.head.b1", vec![d], vec![0.0; d]);
            p.insert("fus.head.w2", vec![d, 1], nn::init_normal(&mut rng, d, d));
            p.insert("fus.head.b2", vec![1], vec![0.0]);
        }

        ToyDualEncoder { descriptor, vocab: vocab.clone(), params: p }
    }

    /// Text encoding on an existing tape, gradients flowing to text params.
    pub fn encode_text_traced(&self, tape: &mut Tape, binding: &ParamBinding, ids: &[usize]) -> BufId {
        let d = &self.descriptor;
        assert!(!ids.is_empty() && ids.len() <= d.max_text_len, "caption length out of range");
        let len = ids.len();
        let emb = tape.embed_rows(binding.id("txt.embed"), ids, d.d_model);
        let pos = tape.slice_rows(binding.id("txt.pos"), 0, len, d.d_model);
        let x = tape.add(emb, pos);
        let x = encoder_block(tape, binding, "txt", x, len, d.d_model, d.heads, d.ffn_hidden);
        layer_norm_affine(tape, binding, "txt.lnf", x, len, d.d_model)
    }

    /// Deterministic training on (image, caption) pairs with a symmetric
    /// in-batch contrastive objective; stops once the held-out split clears
    /// the recall floor.
    pub fn train(
        vocab: &Vocabulary,
        train_set: &[(Raster, Vec<usize>)],
        eval_set: &[(Raster, Vec<usize>)],
        cfg: &ToyTrainConfig,
        seed: u64,
    ) -> Result<(Self, TrainReport)> {
        if train_set.len() < 2 {
            return Err(Error::Training(format!(
                "toy training needs at least 2 images with captions, got {}",
                train_set.len()
            )));
        }
        if eval_set.is_empty() {
            return Err(Error::Training("empty held-out split".into()));
        }
        let image_size = train_set[0].0.height();
        for (img, ids) in train_set.iter().chain(eval_set.iter()) {
            if img.height() != image_size || img.width() != image_size || img.channels() != 3 {
                return Err(Error::Training(format!(
                    "corpus image shape {} differs from {image_size}x{image_size}x3",
                    img.shape_string()
                )));
            }
            if ids.is_empty() {
                return Err(Error::Training("caption with no tokens".into()));
            }
        }
        if image_size % cfg.patch_embed != 0 {
            return Err(Error::Training(format!(
                "image size {image_size} not divisible by patch embed {}",
                cfg.patch_embed
            )));
        }
        let max_text_len = train_set
            .iter()
            .chain(eval_set.iter())
            .map(|(_, ids)| ids.len())
            .max()
            .unwrap_or(1);
        let descriptor = ModelDescriptor {
            image_size,
            patch_embed: cfg.patch_embed,
            grid: image_size / cfg.patch_embed,
            d_model: cfg.d_model,
            heads: cfg.heads,
            ffn_hidden: cfg.ffn_hidden,
            vocab_size: vocab.len(),
            max_text_len,
            stem: cfg.stem,
            fusion: cfg.fusion,
            pseudo_attention: cfg.pseudo_attention,
        };
        let mut model = ToyDualEncoder::init(descriptor, vocab.clone(), seed);
        let mut adam = Adam::new(cfg.learning_rate, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed2700a3f6c4d1);

        let recall_over = |model: &ToyDualEncoder, set: &[(Raster, Vec<usize>)]| -> Result<f64> {
            let images: Vec<Raster> = set.iter().map(|(img, _)| img.clone()).collect();
            let texts = TextBatch::new(set.iter().map(|(_, ids)| ids.clone()).collect(), vocab.len())?;
            let matched: Vec<std::collections::BTreeSet<usize>> =
                (0..set.len()).map(|i| std::collections::BTreeSet::from([i])).collect();
            let scores = model.score_pairs(&images, &texts)?;
            let matrix = eval::ScoreMatrix::new(scores, matched)?;
            Ok(eval::recall_at_n(&matrix, eval::Direction::TextRetrieval, 1)?.rate)
        };

        let mut epoch_losses = Vec::new();
        let mut epoch_recall = Vec::new();
        let mut clean_r1 = 0.0;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        for epoch in 0..cfg.max_epochs {
            if cfg.lr_half_life > 0 {
                adam.learning_rate =
                    cfg.learning_rate * 0.5f64.powf(epoch as f64 / cfg.lr_half_life as f64);
            }
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                epoch_loss += model.train_batch(chunk, train_set, cfg, &mut adam, &mut rng);
                batches += 1;
            }
            epoch_losses.push(epoch_loss / batches.max(1) as f64);

            clean_r1 = recall_over(&model, eval_set)?;
            epoch_recall.push(clean_r1);
            if cfg.log_every > 0 && (epoch + 1) % cfg.log_every == 0 {
                eprintln!(
                    "epoch {:4}  loss {:.4}  heldout R@1 {:.3}",
                    epoch + 1,
                    epoch_losses.last().unwrap(),
                    clean_r1
                );
            }
            if clean_r1 >= cfg.recall_floor {
                let train_r1 = recall_over(&model, train_set)?;
                return Ok((
                    model,
                    TrainReport {
                        epochs_run: epoch + 1,
                        clean_recall_at_1: clean_r1,
                        train_recall_at_1: train_r1,
                        epoch_losses,
                        epoch_recall,
                    },
                ));
            }
        }
        let train_r1 = recall_over(&model, train_set)?;
        Err(Error::Training(format!(
            "held-out R@1 {clean_r1:.3} (train R@1 {train_r1:.3}) below floor {} after {} epochs",
            cfg.recall_floor, cfg.max_epochs
        )))
    }

    fn train_batch(
        &mut self,
        batch: &[usize],
        pairs: &[(Raster, Vec<usize>)],
        cfg: &ToyTrainConfig,
        adam: &mut Adam,
        rng: &mut ChaCha8Rng,
    ) -> f64 {
        let b = batch.len();
        let d = self.descriptor.clone();
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape);
        let mut vis_ids = Vec::with_capacity(b);
        let mut txt_ids = Vec::with_capacity(b);
        for &idx in batch {
            let (img, ids) = &pairs[idx];
            // Random subpixel shifts and rescales stand in for the nuisance
            // jitter the held-out split carries.
            let img = if cfg.augment_shift > 0.0 || cfg.augment_scale > 0.0 {
                let dr = if cfg.augment_shift > 0.0 {
                    rng.random_range(-cfg.augment_shift..=cfg.augment_shift)
                } else {
                    0.0
                };
                let dc = if cfg.augment_shift > 0.0 {
                    rng.random_range(-cfg.augment_shift..=cfg.augment_shift)
                } else {
                    0.0
                };
                let scale = if cfg.augment_scale > 0.0 {
                    rng.random_range(1.0 - cfg.augment_scale..=1.0 + cfg.augment_scale)
                } else {
                    1.0
                };
                img.scale_shift(scale, dr, dc)
            } else {
                img.clone()
            };
            let img_id = tape.leaf(img.data().to_vec(), vec![img.height(), img.width(), 3]);
            vis_ids.push(self.encode_image_traced(&mut tape, &binding, img_id));
            txt_ids.push(self.encode_text_traced(&mut tape, &binding, ids));
        }
        let mut scores = vec![0usize; b * b];
        for i in 0..b {
            for j in 0..b {
                let trace = self.fuse_from_token_ids(
                    &mut tape,
                    &binding,
                    vis_ids[i],
                    txt_ids[j],
                    pairs[batch[j]].1.len(),
                );
                scores[i * b + j] = trace.score;
            }
        }
        let row_major: Vec<BufId> = scores.clone();
        let col_major: Vec<BufId> = (0..b * b).map(|k| scores[(k % b) * b + k / b]).collect();
        let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();

        let ce = |tape: &mut Tape, ids: &[BufId]| -> BufId {
            let m = tape.stack_scalars(ids);
            let soft = tape.softmax_rows(m, b, b);
            let lsm = tape.ln(soft);
            let picked = tape.gather(lsm, &diag);
            let total = tape.sum_all(picked);
            tape.scale(total, -1.0 / b as f64)
        };
        let loss_rows = ce(&mut tape, &row_major);
        let loss_cols = ce(&mut tape, &col_major);
        let total = tape.add(loss_rows, loss_cols);
        let loss = tape.scale(total, 0.5);
        let loss_value = tape.scalar(loss);
        tape.backward(loss);
        let grads = binding.gradients(&tape, &self.params);
        adam.step(&mut self.params, &grads);
        let _ = d;
        loss_value
    }

    /// Fusion taking text tokens already on the tape (training path).
    fn fuse_from_token_ids(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        vis: BufId,
        txt: BufId,
        txt_len: usize,
    ) -> FusionTrace {
        let d = &self.descriptor;
        let n = d.grid * d.grid;
        match d.fusion {
            FusionKind::CrossAttention => {
                let (ctx, attn) =
                    attention_block(tape, binding, "fus", txt, vis, txt_len, n, d.d_model, d.heads);
                let fused = tape.add(txt, ctx);
                let fused = layer_norm_affine(tape, binding, "fus.ln", fused, txt_len, d.d_model);
                let pooled = tape.mean_rows(fused, txt_len, d.d_model);
                let h1 = tape.matmul(pooled, binding.id("fus.head.w1"), 1, d.d_model, d.d_model);
                let h1 = tape.add_row_vec(h1, binding.id("fus.head.b1"), 1, d.d_model);
                let h1 = tape.relu(h1);
                let s = tape.matmul(h1, binding.id("fus.head.w2"), 1, d.d_model, 1);
                let s = tape.add_row_vec(s, binding.id("fus.head.b2"), 1, 1);
                FusionTrace { score: s, attention: attn }
            }
            FusionKind::DotProduct => {
                let pooled_img = tape.mean_rows(vis, n, d.d_model);
                let pooled_txt = tape.mean_rows(txt, txt_len, d.d_model);
                let prod = tape.mul(pooled_img, pooled_txt);
                let total = tape.sum_all(prod);
                let s = tape.scale(total, 1.0 / (d.d_model as f64).sqrt());
                FusionTrace { score: s, attention: Vec::new() }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "descriptor": self.descriptor,
            "vocab": self.vocab.tokens(),
        });
        crate::checkpoint::save(path, MODEL_KIND, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (kind, meta, params) = crate::checkpoint::load(path)?;
        if kind != MODEL_KIND {
            return Err(Error::Checkpoint(format!("expected {MODEL_KIND} checkpoint, found '{kind}'")));
        }
        let descriptor: ModelDescriptor = serde_json::from_value(meta["descriptor"].clone())?;
        let tokens: Vec<String> = serde_json::from_value(meta["vocab"].clone())?;
        Ok(ToyDualEncoder { descriptor, vocab: Vocabulary::new(tokens)?, params })
    }
}

impl SurrogateModel for ToyDualEncoder {
    fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn bind(&self, tape: &mut Tape) -> ParamBinding {
        self.params.bind(tape)
    }

    fn encode_image_traced(&self, tape: &mut Tape, binding: &ParamBinding, image: BufId) -> BufId {
        let d = &self.descriptor;
        let n = d.grid * d.grid;
        let x = match d.stem {
            StemKind::PatchEmbed => {
                let patch_dim = d.patch_embed * d.patch_embed * 3;
                let rows = tape.im2rows(image, d.image_size, d.image_size, 3, d.patch_embed);
                let x = tape.matmul(rows, binding.id("img.embed.w"), n, patch_dim, d.d_model);
                tape.add_row_vec(x, binding.id("img.embed.b"), n, d.d_model)
            }
            StemKind::ConvStem => {
                let s = d.image_size;
                let c1 = d.d_model / 2;
                let h1 = tape.conv2d_3x3(image, binding.id("img.stem1.w"), s, s, 3, c1);
                let h1 = tape.add_channel_bias(h1, binding.id("img.stem1.b"), s * s, c1);
                let h1 = tape.relu(h1);
                let h1 = tape.avg_pool2(h1, s, s, c1);
                let s2 = s / 2;
                let h2 = tape.conv2d_3x3(h1, binding.id("img.stem2.w"), s2, s2, c1, d.d_model);
                let h2 = tape.add_channel_bias(h2, binding.id("img.stem2.b"), s2 * s2, d.d_model);
                let h2 = tape.relu(h2);
                let h2 = tape.avg_pool2(h2, s2, s2, d.d_model);
                let s3 = s2 / 2;
                let h3 = tape.conv2d_3x3(h2, binding.id("img.stem3.w"), s3, s3, d.d_model, d.d_model);
                let h3 = tape.add_channel_bias(h3, binding.id("img.stem3.b"), s3 * s3, d.d_model);
                let h3 = tape.relu(h3);
                // Final pool leaves a grid x grid token map laid out
                // channel-last, which is exactly rows of d_model features.
                tape.avg_pool2(h3, s3, s3, d.d_model)
            }
        };
        let x = tape.add(x, binding.id("img.pos"));
        let x = encoder_block(tape, binding, "img", x, n, d.d_model, d.heads, d.ffn_hidden);
        layer_norm_affine(tape, binding, "img.lnf", x, n, d.d_model)
    }

    fn text_features(&self, caption: &[usize]) -> Result<TextFeatures> {
        let d = &self.descriptor;
        if caption.is_empty() || caption.len() > d.max_text_len {
            return Err(Error::Tokenizer(format!(
                "caption length {} outside [1, {}]",
                caption.len(),
                d.max_text_len
            )));
        }
        if let Some(&bad) = caption.iter().find(|&&id| id >= d.vocab_size) {
            return Err(Error::Tokenizer(format!("token id {bad} outside vocabulary")));
        }
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape);
        let out = self.encode_text_traced(&mut tape, &binding, caption);
        Ok(TextFeatures {
            tokens: tape.data(out).to_vec(),
            len: caption.len(),
            d_model: d.d_model,
        })
    }

    fn fuse_traced(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        vis: BufId,
        text: &TextFeatures,
    ) -> FusionTrace {
        let txt = tape.leaf(text.tokens.clone(), vec![text.len, text.d_model]);
        self.fuse_from_token_ids(tape, binding, vis, txt, text.len)
    }
}

// ── Adapter registry ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub adapter: String,
    pub checkpoint: std::path::PathBuf,
}

type AdapterLoader = Box<dyn Fn(&AdapterSpec) -> Result<Box<dyn SurrogateModel>> + Send + Sync>;

/// Named loaders for surrogate checkpoints. The bundled "toy" adapter loads
/// [`ToyDualEncoder`] archives; external adapters register alongside it.
pub struct AdapterRegistry {
    loaders: Vec<(String, AdapterLoader)>,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        let mut registry = AdapterRegistry { loaders: Vec::new() };
        registry.register("toy", |spec| {
            Ok(Box::new(ToyDualEncoder::load(&spec.checkpoint)?) as Box<dyn SurrogateModel>)
        });
        registry
    }
}

impl AdapterRegistry {
    pub fn register(
        &mut self,
        name: &str,
        loader: impl Fn(&AdapterSpec) -> Result<Box<dyn SurrogateModel>> + Send + Sync + 'static,
    ) {
        self.loaders.push((name.to_string(), Box::new(loader)));
    }

    pub fn available(&self) -> Vec<String> {
        self.loaders.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Load a checkpoint through a named adapter and probe the resulting
    /// model against the surrogate contract.
    pub fn load_external_model(&self, spec: &AdapterSpec) -> Result<Box<dyn SurrogateModel>> {
        let loader = self
            .loaders
            .iter()
            .find(|(n, _)| n == &spec.adapter)
            .map(|(_, l)| l)
            .ok_or_else(|| Error::UnknownAdapter {
                name: spec.adapter.clone(),
                available: self.available(),
            })?;
        let model = loader(spec)?;
        probe_contract(model.as_ref())?;
        Ok(model)
    }
}

/// Self-test: a deterministic probe image and caption must produce finite
/// scores and a valid saliency map.
fn probe_contract(model: &dyn SurrogateModel) -> Result<()> {
    let d = model.descriptor();
    if model.vocabulary().is_empty() {
        return Err(Error::ContractViolation("empty vocabulary".into()));
    }
    let size = d.image_size;
    let data: Vec<f64> = (0..size * size * 3)
        .map(|i| ((i % 17) as f64) / 17.0)
        .collect();
    let probe = Raster::new(size, size, 3, data).expect("probe raster");
    let caption: Vec<usize> = (0..model.vocabulary().len().min(4)).collect();
    let texts = TextBatch::new(vec![caption.clone()], model.vocabulary().len())?;
    let scores = model.score_pairs(std::slice::from_ref(&probe), &texts)?;
    if !scores[0][0].is_finite() {
        return Err(Error::ContractViolation(format!(
            "probe score is not finite: {}",
            scores[0][0]
        )));
    }
    if d.fusion == FusionKind::CrossAttention || d.pseudo_attention {
        let map = model.cross_attention_map(&probe, &caption)?;
        if map.values().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::ContractViolation("probe attention map invalid".into()));
        }
    }
    Ok(())
}

/// Convenience wrapper over the default registry.
pub fn load_external_model(spec: &AdapterSpec) -> Result<Box<dyn SurrogateModel>> {
    AdapterRegistry::default().load_external_model(spec)
}
