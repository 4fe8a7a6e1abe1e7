//! Swapped-caption discrimination and image/text retrieval.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::negsample::{sample_negative, SwapKind};
use crate::objectives::similarity;
use crate::rng::SeededRng;
use crate::tensor::{dot, Real};
use crate::textgraph::{parse_scene_graph, Lexicon};
use crate::training::Sample;

/// An image with its caption and a swapped caption built from the same words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: String,
    pub image_features: Vec<f32>,
    pub aligned_caption: String,
    pub unaligned_caption: String,
    pub kind: SwapKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCases {
    pub cases: Vec<EvalCase>,
    /// Samples whose caption had no usable swap.
    pub skipped: usize,
}

/// One case per sample via [`sample_negative`]; the kind follows the swap.
pub fn build_eval_cases(
    dataset: &[Sample],
    lexicon: &Lexicon,
    rng: &mut SeededRng,
) -> Result<EvalCases> {
    let mut cases = Vec::with_capacity(dataset.len());
    let mut skipped = 0;
    for s in dataset {
        let parsed;
        let sg = match &s.scene_graph {
            Some(sg) => sg,
            None => {
                parsed = parse_scene_graph(&s.caption, lexicon)?;
                &parsed
            }
        };
        match sample_negative(&s.caption, sg, rng) {
            Ok(neg) => cases.push(EvalCase {
                id: s.id.clone(),
                image_features: s.image_features.clone(),
                aligned_caption: s.caption.clone(),
                unaligned_caption: neg.negative_caption,
                kind: neg.swap.kind(),
            }),
            Err(crate::negsample::SwapError::NoSwapAvailable) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(EvalCases { cases, skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub kind: SwapKind,
    pub aligned_similarity: f64,
    pub unaligned_similarity: f64,
    pub margin: f64,
    pub correct: bool,
}

/// Cosine similarities of the image to both captions; correct only when the
/// aligned caption scores strictly higher.
pub fn discriminate<F: Real>(
    image: &[F],
    aligned: &[F],
    unaligned: &[F],
) -> Result<(f64, f64, bool)> {
    let a = similarity(image, aligned)?;
    let u = similarity(image, unaligned)?;
    Ok((a.as_f64(), u.as_f64(), a > u))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_margin: f64,
}

impl KindStats {
    fn from_results<'a>(results: impl Iterator<Item = &'a CaseResult>) -> Self {
        let (mut count, mut correct, mut margin) = (0, 0, 0.0);
        for r in results {
            count += 1;
            correct += usize::from(r.correct);
            margin += r.margin;
        }
        let div = count.max(1) as f64;
        Self {
            count,
            correct,
            accuracy: correct as f64 / div,
            mean_margin: margin / div,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: KindStats,
    pub per_kind: BTreeMap<SwapKind, KindStats>,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalReport>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy
    }

    pub fn kind_accuracy(&self, kind: SwapKind) -> Option<f64> {
        self.per_kind.get(&kind).map(|k| k.accuracy)
    }
}

pub fn summarize(results: &[CaseResult], skipped: usize) -> EvalReport {
    let mut per_kind = BTreeMap::new();
    for kind in [SwapKind::Relation, SwapKind::Attribute, SwapKind::Random] {
        if results.iter().any(|r| r.kind == kind) {
            per_kind.insert(
                kind,
                KindStats::from_results(results.iter().filter(|r| r.kind == kind)),
            );
        }
    }
    EvalReport {
        overall: KindStats::from_results(results.iter()),
        per_kind,
        skipped,
        retrieval: None,
    }
}

/// Scores every case with the model's fused text embeddings.
pub fn eval_swap_discrimination<F: Real>(
    model: &Model<F>,
    cases: &EvalCases,
) -> Result<(EvalReport, Vec<CaseResult>)> {
    let mut results = Vec::with_capacity(cases.cases.len());
    for c in &cases.cases {
        let feats: Vec<F> = c.image_features.iter().map(|&x| F::lit(x as f64)).collect();
        let img = model.embed_image(&feats)?;
        let a = model.embed_caption(&c.aligned_caption)?;
        let u = model.embed_caption(&c.unaligned_caption)?;
        let (sa, su, correct) = discriminate(&img.unit, &a.unit, &u.unit)?;
        results.push(CaseResult {
            id: c.id.clone(),
            kind: c.kind,
            aligned_similarity: sa,
            unaligned_similarity: su,
            margin: sa - su,
            correct,
        });
    }
    Ok((summarize(&results, cases.skipped), results))
}

pub fn write_margins_csv(w: &mut impl Write, results: &[CaseResult]) -> Result<()> {
    writeln!(
        w,
        "id,kind,aligned_similarity,unaligned_similarity,margin,correct"
    )?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.id, r.kind, r.aligned_similarity, r.unaligned_similarity, r.margin, r.correct
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Image to text, keyed by K.
    pub text_retrieval: BTreeMap<usize, f64>,
    /// Text to image, keyed by K.
    pub image_retrieval: BTreeMap<usize, f64>,
}

/// Position of `target` when `scores` is sorted descending with ties broken
/// by lower index.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let s_t = scores.clone().nth(target).expect("target in range");
    scores
        .enumerate()
        .filter(|&(j, s)| s > s_t || (s == s_t && j < target))
        .count()
}

/// Recall@K from an `N x N` similarity table (`sim[i][j]` = image i, text j).
pub fn recall_at_k(sim: &[Vec<f64>], ks: &[usize]) -> Result<RetrievalReport> {
    let n = sim.len();
    if n == 0 || sim.iter().any(|r| r.len() != n) {
        return Err(Error::Data(
            "retrieval needs a non-empty square similarity table".into(),
        ));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(Error::Config(format!("K = {k} is outside 1..={n}")));
    }
    let tr_ranks: Vec<usize> = (0..n).map(|i| rank_of(sim[i].iter().copied(), i)).collect();
    let ir_ranks: Vec<usize> = (0..n)
        .map(|j| rank_of(sim.iter().map(|r| r[j]), j))
        .collect();
    let recall =
        |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    Ok(RetrievalReport {
        text_retrieval: ks.iter().map(|&k| (k, recall(&tr_ranks, k))).collect(),
        image_retrieval: ks.iter().map(|&k| (k, recall(&ir_ranks, k))).collect(),
    })
}

/// Ranks every caption for every image and vice versa.
pub fn eval_retrieval<F: Real>(
    model: &Model<F>,
    dataset: &[Sample],
    ks: &[usize],
) -> Result<RetrievalReport> {
    let mut images = Vec::with_capacity(dataset.len());
    let mut texts = Vec::with_capacity(dataset.len());
    for s in dataset {
        let feats: Vec<F> = s.image_features.iter().map(|&x| F::lit(x as f64)).collect();
        images.push(model.embed_image(&feats)?.unit);
        texts.push(model.embed_text(&s.caption, &s.triples)?.unit);
    }
    let sim: Vec<Vec<f64>> = images
        .iter()
        .map(|v| texts.iter().map(|t| dot(v, t).as_f64()).collect())
        .collect();
    recall_at_k(&sim, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{gen_synthetic, SyntheticGenConfig};

    #[test]
    fn case_kinds_follow_templates() {
        let cfg = SyntheticGenConfig {
            attribute_count: 10,
            relation_count: 10,
            ..SyntheticGenConfig::default()
        };
        let data = gen_synthetic(&cfg).unwrap();
        let cases = build_eval_cases(&data, &cfg.lexicon(), &mut SeededRng::new(3)).unwrap();
        assert_eq!(cases.cases.len() + cases.skipped, data.len());
        for (c, s) in cases.cases.iter().zip(&data) {
            if s.triples.len() == 2 {
                assert_eq!(c.kind, SwapKind::Attribute);
            }
            assert_ne!(c.aligned_caption, c.unaligned_caption);
        }
    }

    #[test]
    fn skipped_counts_captions_without_swaps() {
        let lex = Lexicon::builtin();
        let mut data = Vec::new();
        for (i, cap) in [
            "the red dress and the blue book",
            "a dog",
            "black and white cows",
        ]
        .iter()
        .enumerate()
        {
            let mut s = Sample {
                id: i.to_string(),
                caption: cap.to_string(),
                image_features: vec![0.0; 2],
                scene_graph: None,
                triples: vec![],
            };
            s.prepare(&lex).unwrap();
            data.push(s);
        }
        let cases = build_eval_cases(&data, &lex, &mut SeededRng::new(0)).unwrap();
        assert_eq!(cases.cases.len(), 1);
        assert_eq!(cases.skipped, 2);
    }

    #[test]
    fn ties_are_failures() {
        let (_, _, ok) = discriminate(&[1.0f64, 0.0], &[0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert!(!ok);
        let r = CaseResult {
            id: "x".into(),
            kind: SwapKind::Relation,
            aligned_similarity: 0.1,
            unaligned_similarity: 0.1,
            margin: 0.0,
            correct: false,
        };
        let rep = summarize(&[r.clone(), r], 0);
        assert_eq!(rep.overall.accuracy, 0.0);
        assert_eq!(rep.kind_accuracy(SwapKind::Relation), Some(0.0));
    }

    #[test]
    fn recall_examples() {
        let flat = vec![vec![0.5; 4]; 4];
        let r = recall_at_k(&flat, &[1, 4]).unwrap();
        assert_eq!(r.text_retrieval[&1], 0.25);
        assert_eq!(r.image_retrieval[&1], 0.25);
        assert_eq!(r.text_retrieval[&4], 1.0);
        let one = recall_at_k(&[vec![-0.3]], &[1]).unwrap();
        assert_eq!(one.text_retrieval[&1], 1.0);
        assert!(recall_at_k(&flat, &[5]).is_err());
    }
}
