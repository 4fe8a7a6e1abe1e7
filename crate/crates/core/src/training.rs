//! Synthetic data, batching with attached negatives, AdamW and the training
//! loop.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint::Checkpoint;
use crate::encoders::{Model, ModelConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::negsample::{all_negatives, sample_negative, sample_random_negative, NegativeSample};
use crate::objectives::{
    hinge_loss, hinge_loss_grad, info_nce_with_grad, LossConfig, SimilarityMatrix,
};
use crate::rng::SeededRng;
use crate::tensor::{axpy, dot, ParamStore, Real, Tensor, TensorError};
use crate::textgraph::{
    parse_scene_graph, scene_graph_to_triples, tokenize, Lexicon, PosTag, SceneGraph, Triple,
    ATTRIBUTE_RELATION,
};

/// One image/caption pair. `triples` is derived from `scene_graph` by
/// [`Sample::prepare`] and not serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub caption: String,
    pub image_features: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_graph: Option<SceneGraph>,
    #[serde(skip)]
    pub triples: Vec<Triple>,
}

impl Sample {
    /// Parses the caption (unless a graph was supplied) and caches triples.
    pub fn prepare(&mut self, lexicon: &Lexicon) -> Result<()> {
        if self.scene_graph.is_none() {
            self.scene_graph = Some(parse_scene_graph(&self.caption, lexicon)?);
        }
        let sg = self.scene_graph.as_ref().expect("set above");
        if !sg.is_well_formed() {
            return Err(Error::Data(format!(
                "sample {}: malformed scene graph",
                self.id
            )));
        }
        self.triples = scene_graph_to_triples(sg);
        Ok(())
    }
}

pub fn prepare_dataset(samples: &mut [Sample], lexicon: &Lexicon) -> Result<()> {
    samples.iter_mut().try_for_each(|s| s.prepare(lexicon))
}

/// Reads a JSONL dataset and prepares every sample.
pub fn load_dataset(path: &Path, lexicon: &Lexicon) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut s: Sample = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        s.prepare(lexicon)?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticGenConfig {
    pub nouns: Vec<String>,
    pub adjectives: Vec<String>,
    /// Relation phrases; may be several words ("next to").
    pub relations: Vec<String>,
    /// Number of "the A1 N1 and the A2 N2" captions.
    pub attribute_count: usize,
    /// Number of "the A1 N1 R the A2 N2" captions.
    pub relation_count: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Trailing samples set aside by [`split_held_out`].
    pub held_out: usize,
}

fn strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        Self {
            nouns: strings(&[
                "dog", "cat", "horse", "cow", "bird", "car", "truck", "bus", "boat", "chair",
                "table", "lamp", "book", "cup", "bottle", "ball", "box", "bag", "hat", "shirt",
                "dress", "tree", "plate", "bench",
            ]),
            adjectives: strings(&[
                "red", "blue", "green", "yellow", "black", "white", "small", "large", "wooden",
                "striped",
            ]),
            relations: strings(&["on", "under", "near", "behind", "holding", "next to"]),
            attribute_count: 2500,
            relation_count: 2500,
            noise_std: 0.02,
            seed: 0,
            held_out: 1000,
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.nouns.len() < 2 || self.adjectives.len() < 2 {
            return fail("synthetic data needs at least two nouns and two adjectives");
        }
        if self.relation_count > 0 && self.relations.is_empty() {
            return fail("relation captions requested but no relations given");
        }
        if !(self.noise_std >= 0.0) {
            return fail("noise_std must be >= 0");
        }
        let mut seen = std::collections::BTreeSet::new();
        for w in self
            .nouns
            .iter()
            .chain(&self.adjectives)
            .chain(self.relations.iter())
        {
            for part in w.split_whitespace() {
                if !seen.insert(part.to_lowercase()) {
                    return fail(&format!(
                        "word {part:?} appears in more than one vocabulary slot"
                    ));
                }
            }
            if w.split_whitespace().next().is_none() {
                return fail("empty vocabulary entry");
            }
        }
        Ok(())
    }

    /// Built-in lexicon extended with the generator vocabulary.
    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::builtin();
        for n in &self.nouns {
            lex.insert(n, PosTag::Noun);
        }
        for a in &self.adjectives {
            lex.insert(a, PosTag::Adj);
        }
        let builtin = Lexicon::builtin();
        for r in &self.relations {
            for w in r.split_whitespace() {
                if !matches!(builtin.lookup(w), PosTag::Verb | PosTag::Adp) {
                    lex.insert(w, PosTag::Adp);
                }
            }
        }
        lex
    }

    pub fn feature_dim(&self) -> usize {
        let (a, n, r) = (
            self.adjectives.len(),
            self.nouns.len(),
            self.relations.len(),
        );
        a * n + n * r * n
    }
}

/// Generates captions from the two templates, shuffled together. Image
/// features are a multi-hot over (adjective, noun) pairs followed by a
/// multi-hot over (noun, relation, noun) triples, plus Gaussian noise.
pub fn gen_synthetic(cfg: &SyntheticGenConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let lexicon = cfg.lexicon();
    let mut rng = SeededRng::new(cfg.seed);
    let mut kinds: Vec<bool> = std::iter::repeat(false)
        .take(cfg.attribute_count)
        .chain(std::iter::repeat(true).take(cfg.relation_count))
        .collect();
    rng.shuffle(&mut kinds);
    let (na, nn, nr) = (cfg.adjectives.len(), cfg.nouns.len(), cfg.relations.len());
    let attr_block = na * nn;
    let distinct_pair = |rng: &mut SeededRng, n: usize| {
        let a = rng.below(n);
        let b = (a + 1 + rng.below(n - 1)) % n;
        (a, b)
    };
    let mut out = Vec::with_capacity(kinds.len());
    for (k, with_relation) in kinds.into_iter().enumerate() {
        let (n1, n2) = distinct_pair(&mut rng, nn);
        let (a1, a2) = distinct_pair(&mut rng, na);
        let mut features = vec![0f32; cfg.feature_dim()];
        features[a1 * nn + n1] = 1.0;
        features[a2 * nn + n2] = 1.0;
        let (ad1, ad2, no1, no2) = (
            &cfg.adjectives[a1],
            &cfg.adjectives[a2],
            &cfg.nouns[n1],
            &cfg.nouns[n2],
        );
        let caption = if with_relation {
            let r = rng.below(nr);
            features[attr_block + (n1 * nr + r) * nn + n2] = 1.0;
            format!("the {ad1} {no1} {} the {ad2} {no2}", cfg.relations[r])
        } else {
            format!("the {ad1} {no1} and the {ad2} {no2}")
        };
        if cfg.noise_std > 0.0 {
            for f in &mut features {
                *f += (cfg.noise_std * rng.normal()) as f32;
            }
        }
        let mut sample = Sample {
            id: format!("syn-{k:06}"),
            caption,
            image_features: features,
            scene_graph: None,
            triples: Vec::new(),
        };
        sample.prepare(&lexicon)?;
        out.push(sample);
    }
    Ok(out)
}

/// Splits off the last `cfg.held_out` samples (all of them if fewer).
pub fn split_held_out(mut samples: Vec<Sample>, held_out: usize) -> (Vec<Sample>, Vec<Sample>) {
    let cut = samples.len().saturating_sub(held_out);
    let rest = samples.split_off(cut);
    (samples, rest)
}

/// Vocabulary over the lexicon, the dataset's caption words, and the
/// attribute relation word.
pub fn build_vocabulary(samples: &[Sample], lexicon: &Lexicon) -> Result<Vocabulary> {
    let mut words: Vec<String> = lexicon
        .entries()
        .into_iter()
        .map(|(w, _)| w.to_string())
        .collect();
    for s in samples {
        words.extend(tokenize(&s.caption)?.iter().map(|t| t.lemma()));
    }
    words.push(ATTRIBUTE_RELATION.to_string());
    Ok(Vocabulary::new(words))
}

/// Fresh model sized for `samples` (vocabulary and image width).
pub fn init_model(
    mut config: ModelConfig,
    samples: &[Sample],
    lexicon: &Lexicon,
    seed: u64,
) -> Result<Model<f32>> {
    let d = samples
        .first()
        .map(|s| s.image_features.len())
        .ok_or_else(|| Error::Data("empty dataset".into()))?;
    if config.image.input_dim == 0 {
        config.image.input_dim = d;
    }
    let vocab = build_vocabulary(samples, lexicon)?;
    Model::new(config, vocab, lexicon.clone(), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Semantic,
    Random,
    None,
}

impl FromStr for SamplerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "semantic" => Ok(Self::Semantic),
            "random" => Ok(Self::Random),
            "none" => Ok(Self::None),
            other => Err(format!(
                "unknown sampler mode {other:?} (semantic|random|none)"
            )),
        }
    }
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Semantic => "semantic",
            Self::Random => "random",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub epoch: usize,
    pub index: usize,
    pub samples: Vec<&'a Sample>,
    /// Negatives attached to each sample, parallel to `samples`.
    pub negatives: Vec<Vec<NegativeSample>>,
}

impl Batch<'_> {
    pub fn negative_count(&self) -> usize {
        self.negatives.iter().map(Vec::len).sum()
    }
}

/// Shuffles the dataset and attaches one negative per sample. Semantic mode
/// needs prepared samples; samples without a usable swap get `None`.
pub fn make_batches<'a>(
    dataset: &'a [Sample],
    batch_size: usize,
    rng: &mut SeededRng,
    mode: SamplerMode,
    per_sample: usize,
    epoch: usize,
) -> Result<Vec<Batch<'a>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if per_sample == 0 && mode == SamplerMode::Random {
        return Err(Error::Config(
            "random negatives need a finite count per sample".into(),
        ));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::with_capacity(dataset.len().div_ceil(batch_size));
    for (index, chunk) in order.chunks(batch_size).enumerate() {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
        let mut negatives = Vec::with_capacity(samples.len());
        for s in &samples {
            let neg = match mode {
                SamplerMode::None => Vec::new(),
                SamplerMode::Random => (0..per_sample)
                    .filter_map(|_| sample_random_negative(&s.caption, rng).ok())
                    .collect(),
                SamplerMode::Semantic => {
                    let sg = s
                        .scene_graph
                        .as_ref()
                        .ok_or_else(|| Error::Data(format!("sample {} is not prepared", s.id)))?;
                    if per_sample == 1 {
                        sample_negative(&s.caption, sg, rng).into_iter().collect()
                    } else {
                        let mut all = all_negatives(&s.caption, sg).unwrap_or_default();
                        if per_sample > 0 && all.len() > per_sample {
                            rng.shuffle(&mut all);
                            all.truncate(per_sample);
                        }
                        all
                    }
                }
            };
            negatives.push(neg);
        }
        batches.push(Batch {
            epoch,
            index,
            samples,
            negatives,
        });
    }
    Ok(batches)
}

/// One row of the loss: a positive pair and its negative captions.
#[derive(Debug, Clone, Copy)]
pub struct LossItem<'a> {
    pub caption: &'a str,
    pub triples: &'a [Triple],
    pub image: &'a [f32],
    pub negatives: &'a [(String, Vec<Triple>)],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F> {
    pub final_loss: F,
    pub hinge: F,
    pub itcl: F,
    /// Number of (sample, negative) pairs in the hinge average.
    pub negatives: usize,
}

/// Forward pass of the combined loss over a batch. With `backward` the
/// model's gradient buffers are zeroed and then filled.
pub fn batch_loss<F: Real>(
    model: &mut Model<F>,
    items: &[LossItem<'_>],
    cfg: &LossConfig,
    backward: bool,
) -> Result<LossBreakdown<F>> {
    if items.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let n = items.len();
    let feats: Vec<Vec<F>> = items
        .iter()
        .map(|it| it.image.iter().map(|&x| F::lit(x as f64)).collect())
        .collect();
    let feat_refs: Vec<&[F]> = feats.iter().map(Vec::as_slice).collect();
    let images = model.embed_images(&feat_refs)?;
    let mut texts = Vec::with_capacity(n);
    let mut negs = Vec::with_capacity(n);
    for it in items {
        texts.push(model.embed_text(it.caption, it.triples)?);
        negs.push(
            it.negatives
                .iter()
                .map(|(c, t)| model.embed_text(c, t))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let img_units = &images.units;
    let txt_units: Vec<Vec<F>> = texts.iter().map(|e| e.unit.clone()).collect();
    let sim =
        SimilarityMatrix::from_unit_embeddings(img_units, &txt_units, F::lit(cfg.temperature))?;
    let margin = F::lit(cfg.margin);

    let neg_sims: Vec<Vec<F>> = negs
        .iter()
        .zip(img_units.iter())
        .map(|(es, v)| es.iter().map(|e| dot(v, &e.unit)).collect())
        .collect();
    let extra: &[Vec<F>] = if cfg.neg_in_denominator {
        &neg_sims
    } else {
        &[]
    };
    let (nce, nce_grad) = info_nce_with_grad(&sim, extra);

    let n_neg: usize = neg_sims.iter().map(Vec::len).sum();
    let mut hinge_sum = F::zero();
    let mut hinge_grads: Vec<Vec<(F, F)>> = Vec::with_capacity(n);
    for (i, row) in neg_sims.iter().enumerate() {
        let d = sim.values.get(i, i);
        hinge_grads.push(
            row.iter()
                .map(|&dn| hinge_loss_grad(d, dn, margin))
                .collect(),
        );
        for &dn in row {
            hinge_sum += hinge_loss(d, dn, margin);
        }
    }
    let hinge = if n_neg > 0 {
        hinge_sum / F::lit(n_neg as f64)
    } else {
        F::zero()
    };
    let final_loss = hinge + nce.itcl;

    if backward {
        model.params.zero_grads();
        let inv_neg = if n_neg > 0 {
            F::one() / F::lit(n_neg as f64)
        } else {
            F::zero()
        };
        let dim = img_units[0].len();
        let g = nce_grad.d_values.data();
        let mut d_img = vec![vec![F::zero(); dim]; n];
        let mut d_txt = vec![vec![F::zero(); dim]; n];
        for i in 0..n {
            for j in 0..n {
                let gij = g[i * n + j];
                axpy(gij, &txt_units[j], &mut d_img[i]);
                axpy(gij, &img_units[i], &mut d_txt[j]);
            }
        }
        for i in 0..n {
            for (k, neg) in negs[i].iter().enumerate() {
                let (gd, gdn) = hinge_grads[i][k];
                let mut gdn = gdn * inv_neg;
                if cfg.neg_in_denominator {
                    gdn += nce_grad.d_extra[i][k];
                }
                let gd = gd * inv_neg;
                axpy(gd, &txt_units[i], &mut d_img[i]);
                axpy(gdn, &neg.unit, &mut d_img[i]);
                axpy(gd, &img_units[i], &mut d_txt[i]);
                let d_neg: Vec<F> = img_units[i].iter().map(|&v| v * gdn).collect();
                model.backward_text(neg, &d_neg);
            }
        }
        model.backward_images(&images, &d_img);
        for i in 0..n {
            model.backward_text(&texts[i], &d_txt[i]);
        }
    }
    Ok(LossBreakdown {
        final_loss,
        hinge,
        itcl: nce.itcl,
        negatives: n_neg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to every parameter.
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        // fine-tuning a pretrained model uses lr 2e-6; from scratch needs
        // a much larger step
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F = f32> {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: OptimConfig, params: &ParamStore<F>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<F>) {
        self.step += 1;
        let c = &self.config;
        let lr = F::lit(c.lr);
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let eps = F::lit(c.eps);
        let decay = F::one() - lr * F::lit(c.weight_decay);
        let bc1 = F::one() - F::lit(c.beta1.powi(self.step as i32));
        let bc2 = F::one() - F::lit(c.beta2.powi(self.step as i32));
        for (k, p) in params.iter_mut().enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for ((w, &g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (F::one() - b1) * g;
                *vi = b2 * *vi + (F::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn to_checkpoint(&self, params: &ParamStore<F>) -> Checkpoint {
        let mut meta = Map::new();
        meta.insert(
            "optimizer".into(),
            serde_json::to_value(&self.config).expect("serializable"),
        );
        meta.insert("step".into(), Value::from(self.step));
        let mut ck = Checkpoint::new(meta);
        for (k, p) in params.iter().enumerate() {
            ck.push(format!("m/{}", p.name), self.m[k].cast());
            ck.push(format!("v/{}", p.name), self.v[k].cast());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, params: &ParamStore<F>) -> Result<Self> {
        let config: OptimConfig = serde_json::from_value(
            ck.meta
                .get("optimizer")
                .cloned()
                .ok_or_else(|| Error::Data("optimizer state has no config".into()))?,
        )?;
        let step = ck
            .meta
            .get("step")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Data("optimizer state has no step".into()))?;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for p in params.iter() {
            for (prefix, out) in [("m", &mut m), ("v", &mut v)] {
                let t = ck.get(&format!("{prefix}/{}", p.name)).ok_or_else(|| {
                    Error::Data(format!("optimizer state lacks {prefix}/{}", p.name))
                })?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Data(format!(
                        "optimizer state {prefix}/{} has wrong shape",
                        p.name
                    )));
                }
                out.push(t.cast());
            }
        }
        Ok(Self { config, step, m, v })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: SamplerMode,
    /// Negatives drawn per sample and epoch; 0 takes every usable semantic
    /// swap.
    pub negatives_per_sample: usize,
    /// Seeds the parameter initialization.
    pub model_seed: u64,
    /// Seeds shuffling and negative sampling (one stream per epoch).
    pub batch_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            mode: SamplerMode::Semantic,
            negatives_per_sample: 1,
            model_seed: 1,
            batch_seed: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "final")]
    pub final_loss: f64,
    pub hinge: f64,
    pub itcl: f64,
}

/// Negative captions of a batch with the triples the model's lexicon
/// extracts from them.
pub fn negative_texts<F: Real>(
    model: &Model<F>,
    batch: &Batch<'_>,
) -> Result<Vec<Vec<(String, Vec<Triple>)>>> {
    batch
        .negatives
        .iter()
        .map(|ns| {
            ns.iter()
                .map(|n| {
                    Ok((
                        n.negative_caption.clone(),
                        model.caption_triples(&n.negative_caption)?,
                    ))
                })
                .collect()
        })
        .collect()
}

pub fn loss_items<'a>(
    batch: &Batch<'a>,
    negatives: &'a [Vec<(String, Vec<Triple>)>],
) -> Vec<LossItem<'a>> {
    batch
        .samples
        .iter()
        .zip(negatives)
        .map(|(s, n)| LossItem {
            caption: &s.caption,
            triples: &s.triples,
            image: &s.image_features,
            negatives: n,
        })
        .collect()
}

/// Model plus optimizer plus position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(
        model: Model<f32>,
        train: TrainConfig,
        loss: LossConfig,
        optim: OptimConfig,
    ) -> Self {
        let optimizer = AdamW::new(optim, &model.params);
        Self {
            model,
            optimizer,
            train,
            loss,
            epoch: 0,
        }
    }

    /// One forward/backward/update on `batch`.
    pub fn train_step(&mut self, batch: &Batch<'_>) -> Result<StepMetrics> {
        let neg_texts = negative_texts(&self.model, batch)?;
        let items = loss_items(batch, &neg_texts);
        let step = self.optimizer.step + 1;
        let parts = batch_loss(&mut self.model, &items, &self.loss, true)?;
        let value = parts.final_loss as f64;
        if !parts.final_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                value,
            });
        }
        self.optimizer.update(&mut self.model.params);
        if !self.model.params.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                value: f64::NAN,
            });
        }
        Ok(StepMetrics {
            step,
            final_loss: value,
            hinge: parts.hinge as f64,
            itcl: parts.itcl as f64,
        })
    }

    /// Runs the next epoch; `on_step` sees every step's metrics.
    pub fn run_epoch(
        &mut self,
        dataset: &[Sample],
        on_step: &mut dyn FnMut(&StepMetrics),
    ) -> Result<()> {
        let mut rng = SeededRng::with_stream(self.train.batch_seed, self.epoch as u64);
        let batches = make_batches(
            dataset,
            self.train.batch_size,
            &mut rng,
            self.train.mode,
            self.train.negatives_per_sample,
            self.epoch,
        )?;
        for batch in &batches {
            let m = self.train_step(batch)?;
            on_step(&m);
        }
        self.epoch += 1;
        log::info!(
            "epoch {} done ({} steps total)",
            self.epoch,
            self.optimizer.step
        );
        Ok(())
    }

    /// Runs epochs until `train.epochs` have completed.
    pub fn run(&mut self, dataset: &[Sample], on_step: &mut dyn FnMut(&StepMetrics)) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        while self.epoch < self.train.epochs {
            self.run_epoch(dataset, on_step)?;
        }
        Ok(())
    }

    /// Model checkpoint; the schedule position rides along in the metadata.
    pub fn model_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.meta.insert(
            "training".into(),
            serde_json::json!({
                "epochs_completed": self.epoch,
                "train": self.train,
                "loss": self.loss,
            }),
        );
        ck
    }

    pub fn optimizer_checkpoint(&self) -> Checkpoint {
        self.optimizer.to_checkpoint(&self.model.params)
    }

    /// Restores a run saved with [`Self::model_checkpoint`] and
    /// [`Self::optimizer_checkpoint`]. `train` may extend the epoch count.
    pub fn resume(
        model_ck: &Checkpoint,
        optim_ck: &Checkpoint,
        train: Option<TrainConfig>,
    ) -> Result<Self> {
        let model = Model::from_checkpoint(model_ck)?;
        let optimizer = AdamW::from_checkpoint(optim_ck, &model.params)?;
        let info = model_ck
            .meta
            .get("training")
            .ok_or_else(|| Error::Data("checkpoint has no training state".into()))?;
        let epoch = info["epochs_completed"]
            .as_u64()
            .ok_or_else(|| Error::Data("checkpoint has no epoch count".into()))?
            as usize;
        let saved: TrainConfig = serde_json::from_value(info["train"].clone())?;
        let loss: LossConfig = serde_json::from_value(info["loss"].clone())?;
        Ok(Self {
            model,
            optimizer,
            train: train.unwrap_or(saved),
            loss,
            epoch,
        })
    }
}

pub fn write_metrics(w: &mut impl Write, m: &StepMetrics) -> Result<()> {
    serde_json::to_writer(&mut *w, m)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Trains a fresh model on `dataset`; returns the trainer and the metrics log.
pub fn train(
    dataset: &[Sample],
    model: ModelConfig,
    lexicon: &Lexicon,
    train: TrainConfig,
    loss: LossConfig,
    optim: OptimConfig,
) -> Result<(Trainer, Vec<StepMetrics>)> {
    let model = init_model(model, dataset, lexicon, train.model_seed)?;
    let mut trainer = Trainer::new(model, train, loss, optim);
    let mut log = Vec::new();
    trainer.run(dataset, &mut |m| log.push(*m))?;
    Ok((trainer, log))
}

/// Finite-difference check of the full loss (both encoders, fusion,
/// knowledge encoder, triple encoder, hinge and contrastive terms) on a small
/// synthetic batch with every usable semantic negative attached, in `F`
/// precision.
pub fn full_loss_gradient_check<F: Real>(
    config: &ModelConfig,
    loss: &LossConfig,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let gen = SyntheticGenConfig {
        attribute_count: 3,
        relation_count: 3,
        noise_std: 0.1,
        seed,
        ..SyntheticGenConfig::default()
    };
    let data = gen_synthetic(&gen)?;
    let lexicon = gen.lexicon();
    let mut model: Model<F> = init_model(config.clone(), &data, &lexicon, seed)?.cast();
    let mut rng = SeededRng::with_stream(seed, 1);
    let batch = make_batches(&data, data.len(), &mut rng, SamplerMode::Semantic, 0, 0)?.remove(0);
    let neg_texts = negative_texts(&model, &batch)?;
    let items = loss_items(&batch, &neg_texts);
    let mut params = std::mem::take(&mut model.params);
    let mut failure = None;
    let report = finite_diff_check(
        |p: &mut ParamStore<F>, backward: bool| {
            std::mem::swap(&mut model.params, p);
            let r = batch_loss(&mut model, &items, loss, backward);
            std::mem::swap(&mut model.params, p);
            match r {
                Ok(parts) => Ok(parts.final_loss),
                Err(Error::Tensor(e)) => Err(e),
                Err(e) => {
                    let msg = e.to_string();
                    failure = Some(e);
                    Err(TensorError::ShapeMismatch {
                        op: "loss",
                        detail: msg,
                    })
                }
            }
        },
        &mut params,
        F::lit(eps),
        samples,
        &mut rng,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(report?)
}
