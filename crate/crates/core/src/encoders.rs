//! Encoders mapping images, captions and knowledge triples into one joint
//! embedding space.
//!
//! - Word embeddings: one row per vocabulary word; a multi-word phrase such
//!   as the relation "sit in" embeds as the mean of its word rows.
//! - Triple encoder: `(h, r, t) -> w_h + w_r - w_t`. Reversing head and tail
//!   changes the result, which is what lets the knowledge path tell
//!   "cow is white" from "white is cow". The `sum` and `concat` variants exist
//!   for ablations.
//! - Knowledge encoder: the triple vectors of a caption form a set (no
//!   positional encodings), pass through pre-norm transformer layers, are
//!   mean-pooled and projected to the joint space.
//! - Text encoder: token plus learned position embeddings, transformer
//!   layers, mean pooling, projection.
//! - Image encoder: `linear -> gelu -> linear` over a feature vector.
//! - Fusion: `unit(z + lambda * e_knowledge)`; image embeddings are
//!   normalized the same way.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, Linear, ParamInit, PooledEncoder, PooledEncoderCache};
use crate::rng::SeededRng;
use crate::tensor::{axpy, dot, ParamId, ParamStore, Real, Tensor, TensorError};
use crate::textgraph::{
    parse_scene_graph, scene_graph_to_triples, tokenize, Lexicon, PosTag, Triple,
};

pub const UNK: &str = "<unk>";

/// Word to row index; index 0 is always [`UNK`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Lowercases, deduplicates and sorts `words`, then prepends `UNK`.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| w != UNK && !w.is_empty())
            .collect();
        Self::from_ordered(std::iter::once(UNK.to_string()).chain(set).collect())
    }

    /// Uses `words` as given; the first entry must be `UNK`.
    pub fn from_ordered(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripleFusion {
    /// `w_h + w_r - w_t`
    HeadRelationMinusTail,
    /// `w_h + w_r + w_t`, blind to head/tail order.
    HeadRelationPlusTail,
    /// `[w_h; w_r; w_t]`, projected to the model width.
    Concat,
}

impl FromStr for TripleFusion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "head_relation_minus_tail" | "minus" => Ok(Self::HeadRelationMinusTail),
            "head_relation_plus_tail" | "sum" => Ok(Self::HeadRelationPlusTail),
            "concat" => Ok(Self::Concat),
            other => Err(format!("unknown triple fusion {other:?}")),
        }
    }
}

impl fmt::Display for TripleFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HeadRelationMinusTail => "head_relation_minus_tail",
            Self::HeadRelationPlusTail => "head_relation_plus_tail",
            Self::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeeConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Weight of the knowledge embedding in the fused text embedding.
    pub lambda: f64,
    pub k_max: usize,
    pub fusion: TripleFusion,
}

impl Default for KeeConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 4,
            dim: 64,
            lambda: 0.2,
            k_max: 8,
            fusion: TripleFusion::HeadRelationMinusTail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            max_len: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageEncoderConfig {
    /// Feature vector length; 0 means "take it from the dataset".
    pub input_dim: usize,
    pub hidden: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            hidden: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub joint_dim: usize,
    /// Feed-forward width as a multiple of the layer width.
    pub ffn_mult: usize,
    pub init_std: f64,
    pub kee: KeeConfig,
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            word_dim: 64,
            joint_dim: 64,
            ffn_mult: 4,
            init_std: 0.02,
            kee: KeeConfig::default(),
            text: TextEncoderConfig::default(),
            image: ImageEncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.kee.layers < 1 {
            return fail("kee.layers must be >= 1".into());
        }
        if self.kee.heads == 0 || self.kee.dim % self.kee.heads != 0 {
            return fail(format!(
                "kee.dim {} not divisible by kee.heads {}",
                self.kee.dim, self.kee.heads
            ));
        }
        if self.text.heads == 0 || self.text.dim % self.text.heads != 0 {
            return fail(format!(
                "text.dim {} not divisible by text.heads {}",
                self.text.dim, self.text.heads
            ));
        }
        if !(self.kee.lambda >= 0.0) {
            return fail("kee.lambda must be >= 0".into());
        }
        if self.kee.k_max < 1 || self.text.max_len < 1 {
            return fail("kee.k_max and text.max_len must be >= 1".into());
        }
        if self.image.input_dim == 0 {
            return fail("image.input_dim is not set".into());
        }
        if self.word_dim == 0 || self.joint_dim == 0 || self.ffn_mult == 0 || self.image.hidden == 0
        {
            return fail("dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn triple_dim(&self) -> usize {
        match self.kee.fusion {
            TripleFusion::Concat => 3 * self.word_dim,
            _ => self.word_dim,
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    word_emb: ParamId,
    kee_in: Option<Linear>,
    kee: PooledEncoder,
    kee_out: Linear,
    tok_emb: ParamId,
    pos_emb: ParamId,
    text: PooledEncoder,
    text_out: Linear,
    img_hidden: Linear,
    img_out: Linear,
}

impl Layout {
    fn build<F: Real>(cfg: &ModelConfig, vocab_len: usize, init: &mut ParamInit<'_, F>) -> Self {
        let word_emb = init.gaussian("word_emb", &[vocab_len, cfg.word_dim]);
        let kee_in = (cfg.triple_dim() != cfg.kee.dim)
            .then(|| init.linear("kee.input", cfg.triple_dim(), cfg.kee.dim));
        let kee = PooledEncoder {
            blocks: (0..cfg.kee.layers)
                .map(|l| {
                    init.block(
                        &format!("kee.layer{l}"),
                        cfg.kee.dim,
                        cfg.kee.heads,
                        cfg.kee.dim * cfg.ffn_mult,
                    )
                })
                .collect(),
            ln_final: init.layer_norm("kee.ln_final", cfg.kee.dim),
        };
        let kee_out = init.linear("kee.proj", cfg.kee.dim, cfg.joint_dim);
        let tok_emb = init.gaussian("text.tok_emb", &[vocab_len, cfg.text.dim]);
        let pos_emb = init.gaussian("text.pos_emb", &[cfg.text.max_len, cfg.text.dim]);
        let text = PooledEncoder {
            blocks: (0..cfg.text.layers)
                .map(|l| {
                    init.block(
                        &format!("text.layer{l}"),
                        cfg.text.dim,
                        cfg.text.heads,
                        cfg.text.dim * cfg.ffn_mult,
                    )
                })
                .collect(),
            ln_final: init.layer_norm("text.ln_final", cfg.text.dim),
        };
        let text_out = init.linear("text.proj", cfg.text.dim, cfg.joint_dim);
        let img_hidden = init.linear("image.hidden", cfg.image.input_dim, cfg.image.hidden);
        let img_out = init.linear("image.proj", cfg.image.hidden, cfg.joint_dim);
        Self {
            word_emb,
            kee_in,
            kee,
            kee_out,
            tok_emb,
            pos_emb,
            text,
            text_out,
            img_hidden,
            img_out,
        }
    }
}

/// Vocabulary indices of the words of one triple slot, with the slot's sign
/// (`+1` or `-1`) and column offset in the triple vector.
#[derive(Debug, Clone)]
struct SlotRows {
    ids: Vec<usize>,
    sign: f64,
    offset: usize,
}

#[derive(Debug, Clone)]
pub struct KnowledgeCache<F> {
    slots: Vec<Vec<SlotRows>>,
    triple_input: Tensor<F>,
    encoder: PooledEncoderCache<F>,
    pooled: Tensor<F>,
}

impl<F: Real> KnowledgeCache<F> {
    pub fn encoder(&self) -> &PooledEncoderCache<F> {
        &self.encoder
    }
}

#[derive(Debug, Clone)]
pub struct TextCache<F> {
    ids: Vec<usize>,
    encoder: PooledEncoderCache<F>,
    pooled: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct ImageCache<F> {
    input: Tensor<F>,
    pre: Tensor<F>,
    act: Tensor<F>,
}

/// Unit-norm fused text embedding plus what backward needs.
#[derive(Debug, Clone)]
pub struct TextEmbedding<F> {
    pub unit: Vec<F>,
    norm: F,
    text: TextCache<F>,
    knowledge: Option<KnowledgeCache<F>>,
    lambda: F,
}

#[derive(Debug, Clone)]
pub struct ImageEmbedding<F> {
    pub unit: Vec<F>,
    norm: F,
    cache: ImageCache<F>,
}

/// Unit-norm embeddings of several images sharing one cache.
#[derive(Debug, Clone)]
pub struct ImageBatch<F> {
    pub units: Vec<Vec<F>>,
    norms: Vec<F>,
    cache: ImageCache<F>,
}

/// `x / |x|` and `|x|`.
pub fn l2_normalize<F: Real>(x: &[F]) -> Result<(Vec<F>, F), TensorError> {
    let norm = dot(x, x).sqrt();
    if norm == F::zero() || !norm.is_finite() {
        return Err(TensorError::ZeroVector);
    }
    Ok((x.iter().map(|&v| v / norm).collect(), norm))
}

/// Gradient through `y = x / |x|`: `(dy - y (y . dy)) / |x|`.
pub fn l2_normalize_backward<F: Real>(unit: &[F], norm: F, d_unit: &[F]) -> Vec<F> {
    let s = dot(unit, d_unit);
    unit.iter()
        .zip(d_unit)
        .map(|(&y, &dy)| (dy - y * s) / norm)
        .collect()
}

/// `unit(z + lambda * e)`.
pub fn fuse<F: Real>(z_text: &[F], e_knowledge: &[F], lambda: F) -> Result<Vec<F>, TensorError> {
    if z_text.len() != e_knowledge.len() {
        return Err(crate::tensor::shape_err(
            "fuse",
            format!("{} vs {}", z_text.len(), e_knowledge.len()),
        ));
    }
    let mut raw = z_text.to_vec();
    axpy(lambda, e_knowledge, &mut raw);
    l2_normalize(&raw).map(|(u, _)| u)
}

#[derive(Debug, Clone)]
pub struct Model<F = f32> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub lexicon: Lexicon,
    pub params: ParamStore<F>,
    layout: Layout,
}

impl<F: Real> Model<F> {
    /// Fresh model with Gaussian weights drawn from `seed`.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        lexicon: Lexicon,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let layout = Layout::build(
            &config,
            vocab.len(),
            &mut ParamInit {
                store: &mut params,
                rng: &mut rng,
                std: config.init_std,
            },
        );
        Ok(Self {
            config,
            vocab,
            lexicon,
            params,
            layout,
        })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            lexicon: self.lexicon.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn lambda(&self) -> F {
        F::lit(self.config.kee.lambda)
    }

    fn phrase_ids(&self, phrase: &str) -> Vec<usize> {
        let ids: Vec<usize> = phrase
            .split_whitespace()
            .map(|w| self.vocab.id(w))
            .collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    fn mean_rows(&self, table: ParamId, ids: &[usize], out: &mut [F], sign: F) {
        let emb = self.params.value(table);
        let scale = sign / F::lit(ids.len() as f64);
        for &id in ids {
            axpy(scale, emb.row(id), out);
        }
    }

    /// Embedding of a word or phrase (mean of its word rows; unknown words
    /// use the `UNK` row).
    pub fn word_embed(&self, phrase: &str) -> Vec<F> {
        let mut out = vec![F::zero(); self.config.word_dim];
        self.mean_rows(
            self.layout.word_emb,
            &self.phrase_ids(phrase),
            &mut out,
            F::one(),
        );
        out
    }

    fn triple_slots(&self, t: &Triple) -> Vec<SlotRows> {
        let d = self.config.word_dim;
        let (tail_sign, concat) = match self.config.kee.fusion {
            TripleFusion::HeadRelationMinusTail => (-1.0, false),
            TripleFusion::HeadRelationPlusTail => (1.0, false),
            TripleFusion::Concat => (1.0, true),
        };
        [(&t.head, 1.0), (&t.relation, 1.0), (&t.tail, tail_sign)]
            .into_iter()
            .enumerate()
            .map(|(k, (phrase, sign))| SlotRows {
                ids: self.phrase_ids(phrase),
                sign,
                offset: if concat { k * d } else { 0 },
            })
            .collect()
    }

    fn triple_vector(&self, slots: &[SlotRows]) -> Vec<F> {
        let d = self.config.word_dim;
        let mut out = vec![F::zero(); self.config.triple_dim()];
        for s in slots {
            self.mean_rows(
                self.layout.word_emb,
                &s.ids,
                &mut out[s.offset..s.offset + d],
                F::lit(s.sign),
            );
        }
        out
    }

    /// Triple vector; `w_h + w_r - w_t` under the default fusion.
    pub fn encode_triple(&self, t: &Triple) -> Vec<F> {
        self.triple_vector(&self.triple_slots(t))
    }

    /// Knowledge embedding of a triple set, in the joint space. Returns the
    /// zero vector (and no cache) for an empty set. Lists longer than
    /// `k_max` are truncated.
    pub fn encode_knowledge(
        &self,
        triples: &[Triple],
    ) -> Result<(Vec<F>, Option<KnowledgeCache<F>>)> {
        if triples.is_empty() {
            return Ok((vec![F::zero(); self.config.joint_dim], None));
        }
        let triples = if triples.len() > self.config.kee.k_max {
            log::warn!(
                "truncating {} triples to k_max = {}",
                triples.len(),
                self.config.kee.k_max
            );
            &triples[..self.config.kee.k_max]
        } else {
            triples
        };
        let slots: Vec<Vec<SlotRows>> = triples.iter().map(|t| self.triple_slots(t)).collect();
        let rows: Vec<Vec<F>> = slots.iter().map(|s| self.triple_vector(s)).collect();
        let triple_input = Tensor::from_rows(&rows)?;
        let encoder_input = match &self.layout.kee_in {
            Some(lin) => lin.forward(&self.params, &triple_input)?,
            None => triple_input.clone(),
        };
        let (pooled, encoder) = self.layout.kee.forward(&self.params, encoder_input)?;
        let out = self.layout.kee_out.forward(&self.params, &pooled)?;
        Ok((
            out.into_data(),
            Some(KnowledgeCache {
                slots,
                triple_input,
                encoder,
                pooled,
            }),
        ))
    }

    fn backward_knowledge(&mut self, cache: &KnowledgeCache<F>, d_out: &[F]) {
        let d_out = Tensor::new(vec![1, d_out.len()], d_out.to_vec()).expect("joint vector");
        let dpooled = self
            .layout
            .kee_out
            .backward(&mut self.params, &cache.pooled, &d_out);
        let dinput = self
            .layout
            .kee
            .backward(&mut self.params, &cache.encoder, &dpooled);
        let dtriples = match &self.layout.kee_in {
            Some(lin) => lin.backward(&mut self.params, &cache.triple_input, &dinput),
            None => dinput,
        };
        let d = self.config.word_dim;
        let demb = self.params.grad_mut(self.layout.word_emb);
        for (k, slots) in cache.slots.iter().enumerate() {
            let g = dtriples.row(k);
            for s in slots {
                let scale = F::lit(s.sign / s.ids.len() as f64);
                for &id in &s.ids {
                    axpy(scale, &g[s.offset..s.offset + d], demb.row_mut(id));
                }
            }
        }
    }

    fn text_ids(&self, caption: &str) -> Result<Vec<usize>> {
        let tokens = tokenize(caption)?;
        if tokens.len() > self.config.text.max_len {
            log::warn!(
                "caption has {} tokens, truncating to {}",
                tokens.len(),
                self.config.text.max_len
            );
        }
        Ok(tokens
            .iter()
            .take(self.config.text.max_len)
            .map(|t| self.vocab.id(&t.text))
            .collect())
    }

    /// Sentence embedding `z` of the caption (before fusion).
    pub fn encode_text(&self, caption: &str) -> Result<(Vec<F>, TextCache<F>)> {
        let ids = self.text_ids(caption)?;
        let d = self.config.text.dim;
        let tok = self.params.value(self.layout.tok_emb);
        let pos = self.params.value(self.layout.pos_emb);
        let mut x = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            let row = x.row_mut(i);
            row.copy_from_slice(tok.row(id));
            axpy(F::one(), pos.row(i), row);
        }
        let (pooled, encoder) = self.layout.text.forward(&self.params, x)?;
        let z = self.layout.text_out.forward(&self.params, &pooled)?;
        Ok((
            z.into_data(),
            TextCache {
                ids,
                encoder,
                pooled,
            },
        ))
    }

    fn backward_text_encoder(&mut self, cache: &TextCache<F>, dz: &[F]) {
        let dz = Tensor::new(vec![1, dz.len()], dz.to_vec()).expect("joint vector");
        let dpooled = self
            .layout
            .text_out
            .backward(&mut self.params, &cache.pooled, &dz);
        let dx = self
            .layout
            .text
            .backward(&mut self.params, &cache.encoder, &dpooled);
        {
            let dtok = self.params.grad_mut(self.layout.tok_emb);
            for (i, &id) in cache.ids.iter().enumerate() {
                axpy(F::one(), dx.row(i), dtok.row_mut(id));
            }
        }
        let dpos = self.params.grad_mut(self.layout.pos_emb);
        for i in 0..cache.ids.len() {
            axpy(F::one(), dx.row(i), dpos.row_mut(i));
        }
    }

    /// Image embedding before normalization.
    pub fn encode_image(&self, features: &[F]) -> Result<(Vec<F>, ImageCache<F>)> {
        let (out, cache) = self.encode_images(&[features])?;
        Ok((out.into_data(), cache))
    }

    /// Encodes several images as one `n x d_img` matrix; row `i` of the
    /// output is bit-identical to encoding image `i` alone.
    pub fn encode_images(&self, features: &[&[F]]) -> Result<(Tensor<F>, ImageCache<F>)> {
        let d = self.config.image.input_dim;
        if let Some(bad) = features.iter().find(|f| f.len() != d) {
            return Err(crate::tensor::shape_err(
                "encode_image",
                format!("got {} features, model expects {d}", bad.len()),
            )
            .into());
        }
        let input = Tensor::new(vec![features.len(), d], features.concat())?;
        let pre = self.layout.img_hidden.forward(&self.params, &input)?;
        let mut act = pre.clone();
        act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let out = self.layout.img_out.forward(&self.params, &act)?;
        Ok((out, ImageCache { input, pre, act }))
    }

    /// `dv` holds one row per encoded image.
    fn backward_image_encoder(&mut self, cache: &ImageCache<F>, dv: &Tensor<F>) {
        let mut dact = self
            .layout
            .img_out
            .backward(&mut self.params, &cache.act, dv);
        for (g, &p) in dact.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= gelu_grad(p);
        }
        self.layout
            .img_hidden
            .backward_params_only(&mut self.params, &cache.input, &dact);
    }

    /// Fused, normalized text embedding for a caption with known triples.
    /// The knowledge path is skipped when `lambda == 0`.
    pub fn embed_text(&self, caption: &str, triples: &[Triple]) -> Result<TextEmbedding<F>> {
        let (z, text) = self.encode_text(caption)?;
        let lambda = self.lambda();
        let mut raw = z;
        let mut knowledge = None;
        if lambda != F::zero() {
            let (e, cache) = self.encode_knowledge(triples)?;
            axpy(lambda, &e, &mut raw);
            knowledge = cache;
        }
        let (unit, norm) = l2_normalize(&raw)?;
        Ok(TextEmbedding {
            unit,
            norm,
            text,
            knowledge,
            lambda,
        })
    }

    /// Triples of a caption under the model's lexicon.
    pub fn caption_triples(&self, caption: &str) -> Result<Vec<Triple>> {
        Ok(scene_graph_to_triples(&parse_scene_graph(
            caption,
            &self.lexicon,
        )?))
    }

    /// Parses the caption with the model's lexicon, then [`Self::embed_text`].
    pub fn embed_caption(&self, caption: &str) -> Result<TextEmbedding<F>> {
        let triples = self.caption_triples(caption)?;
        self.embed_text(caption, &triples)
    }

    pub fn embed_image(&self, features: &[F]) -> Result<ImageEmbedding<F>> {
        let (v, cache) = self.encode_image(features)?;
        let (unit, norm) = l2_normalize(&v)?;
        Ok(ImageEmbedding { unit, norm, cache })
    }

    /// Normalized embeddings of a batch of images.
    pub fn embed_images(&self, features: &[&[F]]) -> Result<ImageBatch<F>> {
        let (v, cache) = self.encode_images(features)?;
        let mut units = Vec::with_capacity(features.len());
        let mut norms = Vec::with_capacity(features.len());
        for i in 0..features.len() {
            let (u, n) = l2_normalize(v.row(i))?;
            units.push(u);
            norms.push(n);
        }
        Ok(ImageBatch {
            units,
            norms,
            cache,
        })
    }

    /// Accumulates parameter gradients given `dL/d(unit text embedding)`.
    pub fn backward_text(&mut self, emb: &TextEmbedding<F>, d_unit: &[F]) {
        let draw = l2_normalize_backward(&emb.unit, emb.norm, d_unit);
        self.backward_text_encoder(&emb.text, &draw);
        if let Some(k) = &emb.knowledge {
            let de: Vec<F> = draw.iter().map(|&g| g * emb.lambda).collect();
            self.backward_knowledge(k, &de);
        }
    }

    pub fn backward_image(&mut self, emb: &ImageEmbedding<F>, d_unit: &[F]) {
        let draw = l2_normalize_backward(&emb.unit, emb.norm, d_unit);
        let dv = Tensor::new(vec![1, draw.len()], draw).expect("joint vector");
        self.backward_image_encoder(&emb.cache, &dv);
    }

    /// Batched [`Self::backward_image`]; `d_units[i]` belongs to image `i`.
    pub fn backward_images(&mut self, batch: &ImageBatch<F>, d_units: &[Vec<F>]) {
        let mut rows = Vec::with_capacity(d_units.len() * self.config.joint_dim);
        for ((u, &n), d) in batch.units.iter().zip(&batch.norms).zip(d_units) {
            rows.extend(l2_normalize_backward(u, n, d));
        }
        let dv = Tensor::new(vec![d_units.len(), self.config.joint_dim], rows).expect("joint rows");
        self.backward_image_encoder(&batch.cache, &dv);
    }
}

impl<F: Real> Model<F> {
    /// Serializes config, vocabulary, lexicon and every parameter (as `f32`).
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = Map::new();
        meta.insert(
            "model".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        meta.insert("vocab".into(), Value::from(self.vocab.words().to_vec()));
        let lex: Vec<Value> = self
            .lexicon
            .entries()
            .into_iter()
            .map(|(w, t)| Value::from(vec![w.to_string(), t.to_string()]))
            .collect();
        meta.insert("lexicon".into(), Value::from(lex));
        let mut ck = Checkpoint::new(meta);
        for p in self.params.iter() {
            ck.push(p.name.clone(), p.value.cast());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ck.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Data("checkpoint has no model config".into()))?,
        )?;
        let words: Vec<String> = serde_json::from_value(
            ck.meta
                .get("vocab")
                .cloned()
                .ok_or_else(|| Error::Data("checkpoint has no vocabulary".into()))?,
        )?;
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Data("vocabulary must start with <unk>".into()));
        }
        let lex_entries: Vec<(String, String)> = serde_json::from_value(
            ck.meta
                .get("lexicon")
                .cloned()
                .unwrap_or(Value::Array(vec![])),
        )?;
        let mut lexicon = Lexicon::new();
        for (w, t) in lex_entries {
            let tag: PosTag = t.parse().map_err(Error::Data)?;
            lexicon.insert(&w, tag);
        }
        let mut model = Self::new(config, Vocabulary::from_ordered(words), lexicon, 0)?;
        if ck.tensors.len() != model.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model layout needs {}",
                ck.tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in &ck.tensors {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Data(format!("unexpected tensor {name}")))?;
            if model.params.value(id).shape() != t.shape() {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?}",
                    t.shape()
                )));
            }
            *model.params.value_mut(id) = t.cast();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn tiny_config(fusion: TripleFusion) -> ModelConfig {
        ModelConfig {
            word_dim: 8,
            joint_dim: 6,
            ffn_mult: 2,
            init_std: 0.3,
            kee: KeeConfig {
                layers: 2,
                heads: 2,
                dim: 8,
                lambda: 0.5,
                k_max: 4,
                fusion,
            },
            text: TextEncoderConfig {
                layers: 1,
                heads: 2,
                dim: 8,
                max_len: 12,
            },
            image: ImageEncoderConfig {
                input_dim: 5,
                hidden: 7,
            },
        }
    }

    fn model(fusion: TripleFusion) -> Model<f64> {
        let lex = Lexicon::builtin();
        let vocab = Vocabulary::new(lex.entries().into_iter().map(|(w, _)| w));
        Model::new(tiny_config(fusion), vocab, lex, 3).unwrap()
    }

    #[test]
    fn batched_images_match_single_encodes() {
        let mut m = model(TripleFusion::HeadRelationMinusTail);
        let mut rng = SeededRng::new(5);
        let feats: Vec<Vec<f64>> = (0..3)
            .map(|_| Tensor::randn(&[5], 1.0, &mut rng).into_data())
            .collect();
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        let batch = m.embed_images(&refs).unwrap();
        let d_units: Vec<Vec<f64>> = (0..3)
            .map(|_| Tensor::randn(&[6], 1.0, &mut rng).into_data())
            .collect();
        m.params.zero_grads();
        m.backward_images(&batch, &d_units);
        let batched: Vec<Tensor<f64>> = m.params.iter().map(|p| p.grad.clone()).collect();
        m.params.zero_grads();
        for (f, d) in refs.iter().zip(&d_units) {
            let single = m.embed_image(f).unwrap();
            m.backward_image(&single, d);
        }
        for (p, g) in m.params.iter().zip(&batched) {
            for (a, b) in p.grad.data().iter().zip(g.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
        for (i, f) in refs.iter().enumerate() {
            assert_eq!(m.embed_image(f).unwrap().unit, batch.units[i]);
        }
    }

    #[test]
    fn vocabulary_has_unk_first() {
        let v = Vocabulary::new(["b", "A", "a"]);
        assert_eq!(v.words(), ["<unk>", "a", "b"]);
        assert_eq!(v.id("zzz"), 0);
        assert_eq!(v.id("B"), 2);
    }

    #[test]
    fn word_embed_lookup_and_phrase_mean() {
        let m = model(TripleFusion::HeadRelationMinusTail);
        let table = m.params.value(m.layout.word_emb);
        assert_eq!(m.word_embed("cow"), table.row(m.vocab.id("cow")));
        assert_eq!(m.word_embed("xyzzy"), table.row(0));
        let sit = m.word_embed("sit");
        let inn = m.word_embed("in");
        for (i, v) in m.word_embed("sit in").iter().enumerate() {
            assert_abs_diff_eq!(*v, (sit[i] + inn[i]) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn triple_identities() {
        let m = model(TripleFusion::HeadRelationMinusTail);
        let wr = m.word_embed("is");
        let same = m.encode_triple(&Triple::new("cow", "is", "cow"));
        for (a, b) in same.iter().zip(&wr) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let fwd = m.encode_triple(&Triple::new("cow", "is", "white"));
        let rev = m.encode_triple(&Triple::new("white", "is", "cow"));
        for i in 0..wr.len() {
            assert_abs_diff_eq!(fwd[i] + rev[i], 2.0 * wr[i], epsilon = 1e-12);
        }
        assert_ne!(fwd, rev);
    }

    #[test]
    fn sum_fusion_is_order_blind() {
        let m = model(TripleFusion::HeadRelationPlusTail);
        let a = m.encode_triple(&Triple::new("cow", "is", "white"));
        let b = m.encode_triple(&Triple::new("white", "is", "cow"));
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let c = model(TripleFusion::Concat);
        assert_eq!(
            c.encode_triple(&Triple::new("cow", "is", "white")).len(),
            24
        );
    }

    #[test]
    fn knowledge_empty_and_permutation() {
        let m = model(TripleFusion::HeadRelationMinusTail);
        let (e, cache) = m.encode_knowledge(&[]).unwrap();
        assert_eq!(e, vec![0.0; 6]);
        assert!(cache.is_none());
        let ts = vec![
            Triple::new("cows", "sit in", "hay"),
            Triple::new("cows", "is", "black"),
            Triple::new("hay", "is", "yellow"),
        ];
        let (a, _) = m.encode_knowledge(&ts).unwrap();
        let rev: Vec<_> = ts.iter().rev().cloned().collect();
        let (b, _) = m.encode_knowledge(&rev).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn fuse_examples() {
        let z = [3.0f64, 4.0];
        assert_eq!(fuse(&z, &[10.0, -2.0], 0.0).unwrap(), vec![0.6, 0.8]);
        assert_eq!(fuse(&z, &[0.0, 0.0], 5.0).unwrap(), vec![0.6, 0.8]);
        let u = fuse(&z, &z, 1.0).unwrap();
        assert_abs_diff_eq!(u[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(u[1], 0.8, epsilon = 1e-12);
        assert_eq!(
            fuse(&[1.0, 0.0], &[-1.0, 0.0], 1.0),
            Err(TensorError::ZeroVector)
        );
    }

    #[test]
    fn image_encoder_contracts() {
        let mut m = model(TripleFusion::HeadRelationMinusTail);
        // zero the biases: zero input must give a zero output
        for p in m.params.iter_mut() {
            if p.name.starts_with("image.") && p.name.ends_with(".bias") {
                p.value.fill_zero();
            }
        }
        let (v, _) = m.encode_image(&[0.0; 5]).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        let f = [0.1, -0.2, 0.3, 0.0, 1.0];
        assert_eq!(m.encode_image(&f).unwrap().0, m.encode_image(&f).unwrap().0);
        assert!(matches!(
            m.encode_image(&[0.0; 4]),
            Err(Error::Tensor(TensorError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn text_encoder_contracts() {
        let m = model(TripleFusion::HeadRelationMinusTail);
        let a = m.encode_text("the red dress").unwrap().0;
        assert_eq!(a, m.encode_text("the red dress").unwrap().0);
        assert!(matches!(m.encode_text("  "), Err(Error::Text(_))));
        assert_eq!(m.encode_text("dress").unwrap().0.len(), 6);
    }

    #[test]
    fn lambda_zero_matches_plain_text_direction() {
        let mut cfg = tiny_config(TripleFusion::HeadRelationMinusTail);
        cfg.kee.lambda = 0.0;
        let lex = Lexicon::builtin();
        let vocab = Vocabulary::new(lex.entries().into_iter().map(|(w, _)| w));
        let m: Model<f64> = Model::new(cfg, vocab, lex, 1).unwrap();
        let cap = "the red dress and the blue book";
        let fused = m.embed_caption(cap).unwrap();
        let (z, _) = m.encode_text(cap).unwrap();
        assert_eq!(fused.unit, l2_normalize(&z).unwrap().0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m: Model<f32> = model(TripleFusion::HeadRelationMinusTail).cast();
        let ck = m.to_checkpoint();
        let back = Model::<f32>::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.lexicon, m.lexicon);
        assert_eq!(back.config, m.config);
    }
}
