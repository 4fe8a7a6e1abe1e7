//! Semantic negative captions built from scene-graph swaps.
//!
//! A relation `(O1, R, O2)` is turned into `(O2, R, O1)` by exchanging the
//! two object head nouns in the caption. Two attribute pairs `(A1, O1)`,
//! `(A2, O2)` on different objects become `(A2, O1)`, `(A1, O2)` by
//! exchanging the two adjectives. Pairs on the same object are skipped: "black
//! and white cows" means the same thing as "white and black cows".
//!
//! Rendering only permutes words, so a negative caption has the same word
//! multiset as its source, up to `a`/`an` agreement which is repaired in
//! front of every moved word.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::textgraph::{tokenize, SceneGraph, TextGraphError, Token};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SwapError {
    #[error("swap references missing element {0}")]
    IndexOutOfRange(usize),
    #[error("no swap yields a caption different from the source")]
    NoSwapAvailable,
    #[error("word-position swaps have no scene graph counterpart")]
    NotAGraphSwap,
    #[error(transparent)]
    Text(#[from] TextGraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SwapCandidate {
    /// Reverse the direction of relation `index`.
    Relation { index: usize },
    /// Exchange the adjectives of attributes `first` and `second`.
    Attribute { first: usize, second: usize },
    /// Exchange two arbitrary token positions. Only produced by the random
    /// baseline sampler, never by [`enumerate_swaps`].
    WordPositions { first: usize, second: usize },
}

impl SwapCandidate {
    pub fn kind(&self) -> SwapKind {
        match self {
            Self::Relation { .. } => SwapKind::Relation,
            Self::Attribute { .. } => SwapKind::Attribute,
            Self::WordPositions { .. } => SwapKind::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapKind {
    Relation,
    Attribute,
    Random,
}

impl fmt::Display for SwapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relation => "relation",
            Self::Attribute => "attribute",
            Self::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub negative_caption: String,
    pub swap: SwapCandidate,
    pub source_caption: String,
}

/// All graph swaps: one per relation, then one per unordered attribute pair on
/// distinct objects with distinct adjectives, in index order.
pub fn enumerate_swaps(sg: &SceneGraph) -> Vec<SwapCandidate> {
    let mut out: Vec<SwapCandidate> = (0..sg.relations.len())
        .map(|index| SwapCandidate::Relation { index })
        .collect();
    for i in 0..sg.attributes.len() {
        for j in i + 1..sg.attributes.len() {
            let (a, b) = (&sg.attributes[i], &sg.attributes[j]);
            if a.object != b.object && a.lemma != b.lemma {
                out.push(SwapCandidate::Attribute {
                    first: i,
                    second: j,
                });
            }
        }
    }
    out
}

pub fn apply_swap(sg: &SceneGraph, swap: SwapCandidate) -> Result<SceneGraph, SwapError> {
    let mut out = sg.clone();
    match swap {
        SwapCandidate::Relation { index } => {
            let r = out
                .relations
                .get_mut(index)
                .ok_or(SwapError::IndexOutOfRange(index))?;
            std::mem::swap(&mut r.subject, &mut r.object);
        }
        SwapCandidate::Attribute { first, second } => {
            for i in [first, second] {
                if i >= out.attributes.len() {
                    return Err(SwapError::IndexOutOfRange(i));
                }
            }
            let a = out.attributes[first].lemma.clone();
            out.attributes[first].lemma = std::mem::replace(&mut out.attributes[second].lemma, a);
        }
        SwapCandidate::WordPositions { .. } => return Err(SwapError::NotAGraphSwap),
    }
    Ok(out)
}

/// Token position of attribute `attr`: the closest token left of its object's
/// head noun whose lowercased text is the attribute lemma.
fn attribute_token(tokens: &[Token], sg: &SceneGraph, attr: usize) -> Option<usize> {
    let a = sg.attributes.get(attr)?;
    let head = sg.objects.get(a.object)?.token_index;
    (0..head.min(tokens.len()))
        .rev()
        .find(|&i| tokens[i].lemma() == a.lemma)
}

/// Token positions exchanged by a swap.
pub fn swap_positions(
    tokens: &[Token],
    sg: &SceneGraph,
    swap: SwapCandidate,
) -> Option<(usize, usize)> {
    let (p, q) = match swap {
        SwapCandidate::Relation { index } => {
            let r = sg.relations.get(index)?;
            (
                sg.objects.get(r.subject)?.token_index,
                sg.objects.get(r.object)?.token_index,
            )
        }
        SwapCandidate::Attribute { first, second } => (
            attribute_token(tokens, sg, first)?,
            attribute_token(tokens, sg, second)?,
        ),
        SwapCandidate::WordPositions { first, second } => (first, second),
    };
    (p < tokens.len() && q < tokens.len()).then_some((p, q))
}

fn starts_with_vowel(word: &str) -> bool {
    word.chars()
        .next()
        .is_some_and(|c| matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u'))
}

fn capitalize(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn decapitalize(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(first) => first.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Exchanges the words at token positions `p` and `q`, repairs `a`/`an` in
/// front of both, and keeps the caption's sentence-initial capitalization.
/// Text between tokens (spacing, punctuation) is kept as is.
pub fn render_word_swap(caption: &str, tokens: &[Token], p: usize, q: usize) -> String {
    let mut words: Vec<String> = tokens.iter().map(|t| t.text.clone()).collect();
    if p == q {
        return caption.to_string();
    }
    words.swap(p, q);
    let initial_upper = tokens
        .first()
        .and_then(|t| t.text.chars().next())
        .is_some_and(char::is_uppercase);
    if initial_upper && (p == 0 || q == 0) {
        let moved = if p == 0 { q } else { p };
        words[0] = capitalize(&words[0]);
        words[moved] = decapitalize(&words[moved]);
    }
    for s in [p, q] {
        if s == 0 {
            continue;
        }
        let article = words[s - 1].to_lowercase();
        if article == "a" || article == "an" {
            let fixed = if starts_with_vowel(&words[s]) {
                "an"
            } else {
                "a"
            };
            let upper = words[s - 1].chars().next().is_some_and(char::is_uppercase);
            words[s - 1] = if upper {
                capitalize(fixed)
            } else {
                fixed.to_string()
            };
        }
    }
    let mut out = String::with_capacity(caption.len() + 2);
    let mut cursor = 0;
    for (t, w) in tokens.iter().zip(&words) {
        out.push_str(&caption[cursor..t.span.start]);
        out.push_str(w);
        cursor = t.span.end;
    }
    out.push_str(&caption[cursor..]);
    out
}

/// Surface text of the caption after applying `swap`.
pub fn render_negative(
    caption: &str,
    tokens: &[Token],
    sg: &SceneGraph,
    swap: SwapCandidate,
) -> String {
    match swap_positions(tokens, sg, swap) {
        Some((p, q)) => render_word_swap(caption, tokens, p, q),
        None => caption.to_string(),
    }
}

fn differs(a: &str, b: &str) -> bool {
    a.to_lowercase() != b.to_lowercase()
}

/// Every graph swap whose rendering differs from the source caption.
pub fn all_negatives(caption: &str, sg: &SceneGraph) -> Result<Vec<NegativeSample>, SwapError> {
    let tokens = tokenize(caption)?;
    Ok(enumerate_swaps(sg)
        .into_iter()
        .filter_map(|swap| {
            let neg = render_negative(caption, &tokens, sg, swap);
            differs(&neg, caption).then(|| NegativeSample {
                negative_caption: neg,
                swap,
                source_caption: caption.to_string(),
            })
        })
        .collect())
}

/// Draws one semantic negative uniformly from the usable swaps.
pub fn sample_negative(
    caption: &str,
    sg: &SceneGraph,
    rng: &mut SeededRng,
) -> Result<NegativeSample, SwapError> {
    let mut candidates = all_negatives(caption, sg)?;
    if candidates.is_empty() {
        return Err(SwapError::NoSwapAvailable);
    }
    let pick = rng.below(candidates.len());
    Ok(candidates.swap_remove(pick))
}

/// Baseline sampler: exchanges two uniformly chosen positions holding
/// different words, ignoring the scene graph.
pub fn sample_random_negative(
    caption: &str,
    rng: &mut SeededRng,
) -> Result<NegativeSample, SwapError> {
    let tokens = tokenize(caption)?;
    let lower: Vec<String> = tokens.iter().map(Token::lemma).collect();
    let pairs: Vec<(usize, usize)> = (0..tokens.len())
        .flat_map(|i| (i + 1..tokens.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| lower[i] != lower[j])
        .collect();
    if pairs.is_empty() {
        return Err(SwapError::NoSwapAvailable);
    }
    let (first, second) = pairs[rng.below(pairs.len())];
    Ok(NegativeSample {
        negative_caption: render_word_swap(caption, &tokens, first, second),
        swap: SwapCandidate::WordPositions { first, second },
        source_caption: caption.to_string(),
    })
}

/// Lowercased word counts with `an` folded into `a`.
pub fn word_multiset(caption: &str) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    if let Ok(tokens) = tokenize(caption) {
        for t in tokens {
            let mut w = t.lemma();
            if w == "an" {
                w = "a".into();
            }
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Human-readable description of a swap for corpus output.
pub fn describe_swap(sg: &SceneGraph, swap: SwapCandidate) -> String {
    match swap {
        SwapCandidate::Relation { index } => match sg.relations.get(index) {
            Some(r) => {
                let (s, o) = (sg.object_lemma(r.subject), sg.object_lemma(r.object));
                format!("({s}, {p}, {o}) -> ({o}, {p}, {s})", p = r.phrase)
            }
            None => format!("relation {index}"),
        },
        SwapCandidate::Attribute { first, second } => {
            match (sg.attributes.get(first), sg.attributes.get(second)) {
                (Some(a), Some(b)) => {
                    let (oa, ob) = (sg.object_lemma(a.object), sg.object_lemma(b.object));
                    format!(
                        "({}, {oa}), ({}, {ob}) -> ({}, {oa}), ({}, {ob})",
                        a.lemma, b.lemma, b.lemma, a.lemma
                    )
                }
                _ => format!("attributes {first}, {second}"),
            }
        }
        SwapCandidate::WordPositions { first, second } => format!("tokens {first} <-> {second}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textgraph::{parse_scene_graph, Lexicon};

    fn sg(caption: &str) -> SceneGraph {
        parse_scene_graph(caption, &Lexicon::builtin()).unwrap()
    }

    const COWS: &str = "Black and white cows sit in a pile of yellow hay";

    #[test]
    fn astronaut_swaps() {
        let g = sg("An astronaut is riding a horse");
        assert_eq!(enumerate_swaps(&g), [SwapCandidate::Relation { index: 0 }]);
    }

    #[test]
    fn cows_swaps_skip_same_object_pair() {
        let g = sg(COWS);
        assert_eq!(
            enumerate_swaps(&g),
            [
                SwapCandidate::Relation { index: 0 },
                SwapCandidate::Attribute {
                    first: 0,
                    second: 2
                },
                SwapCandidate::Attribute {
                    first: 1,
                    second: 2
                },
            ]
        );
    }

    #[test]
    fn single_attribute_no_swaps() {
        let g = sg("a red dog");
        assert!(enumerate_swaps(&g).is_empty());
    }

    #[test]
    fn apply_relation_swap_and_involution() {
        let g = sg("An astronaut is riding a horse");
        let s = SwapCandidate::Relation { index: 0 };
        let swapped = apply_swap(&g, s).unwrap();
        assert_eq!(swapped.object_lemma(swapped.relations[0].subject), "horse");
        assert_eq!(
            swapped.object_lemma(swapped.relations[0].object),
            "astronaut"
        );
        assert_eq!(apply_swap(&swapped, s).unwrap(), g);
    }

    #[test]
    fn apply_attribute_swap() {
        let g = sg("the red dress and the blue book");
        let swapped = apply_swap(
            &g,
            SwapCandidate::Attribute {
                first: 0,
                second: 1,
            },
        )
        .unwrap();
        let pairs: Vec<_> = swapped
            .attributes
            .iter()
            .map(|a| (a.lemma.as_str(), swapped.object_lemma(a.object)))
            .collect();
        assert_eq!(pairs, [("blue", "dress"), ("red", "book")]);
    }

    #[test]
    fn apply_out_of_range() {
        let g = sg("a red dog");
        assert_eq!(
            apply_swap(&g, SwapCandidate::Relation { index: 0 }),
            Err(SwapError::IndexOutOfRange(0))
        );
        assert_eq!(
            apply_swap(
                &g,
                SwapCandidate::Attribute {
                    first: 0,
                    second: 4
                }
            ),
            Err(SwapError::IndexOutOfRange(4))
        );
    }

    #[test]
    fn render_examples() {
        let cap = "An astronaut is riding a horse";
        let g = sg(cap);
        let toks = tokenize(cap).unwrap();
        assert_eq!(
            render_negative(cap, &toks, &g, SwapCandidate::Relation { index: 0 }),
            "A horse is riding an astronaut"
        );
        let cap = "the red dress and the blue book";
        let g = sg(cap);
        let toks = tokenize(cap).unwrap();
        assert_eq!(
            render_negative(
                cap,
                &toks,
                &g,
                SwapCandidate::Attribute {
                    first: 0,
                    second: 1
                }
            ),
            "the blue dress and the red book"
        );
    }

    #[test]
    fn render_identical_words_returns_input() {
        let cap = "the red dress and the red book";
        let toks = tokenize(cap).unwrap();
        assert_eq!(render_word_swap(cap, &toks, 1, 5), cap);
    }

    #[test]
    fn render_keeps_punctuation() {
        let cap = "A dog, near a cat.";
        let toks = tokenize(cap).unwrap();
        assert_eq!(render_word_swap(cap, &toks, 1, 4), "A cat, near a dog.");
    }

    #[test]
    fn sample_forced_choice() {
        let cap = "An astronaut is riding a horse";
        let g = sg(cap);
        for seed in 0..20 {
            let neg = sample_negative(cap, &g, &mut SeededRng::new(seed)).unwrap();
            assert_eq!(neg.negative_caption, "A horse is riding an astronaut");
        }
    }

    #[test]
    fn sample_never_swaps_black_white() {
        let g = sg(COWS);
        let mut rng = SeededRng::new(9);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..300 {
            let neg = sample_negative(COWS, &g, &mut rng).unwrap();
            assert_ne!(
                neg.swap,
                SwapCandidate::Attribute {
                    first: 0,
                    second: 1
                }
            );
            assert!(!neg.negative_caption.starts_with("White and black"));
            seen.insert(neg.swap);
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn no_swap_available() {
        let g = sg("a dog");
        assert_eq!(
            sample_negative("a dog", &g, &mut SeededRng::new(0)),
            Err(SwapError::NoSwapAvailable)
        );
        let g = sg("the red dress and the red book");
        assert_eq!(
            sample_negative("the red dress and the red book", &g, &mut SeededRng::new(0)),
            Err(SwapError::NoSwapAvailable)
        );
    }

    #[test]
    fn random_sampler_preserves_words() {
        let mut rng = SeededRng::new(4);
        for _ in 0..100 {
            let neg = sample_random_negative(COWS, &mut rng).unwrap();
            assert_ne!(neg.negative_caption.to_lowercase(), COWS.to_lowercase());
            assert_eq!(word_multiset(&neg.negative_caption), word_multiset(COWS));
        }
        assert_eq!(
            sample_random_negative("dog dog", &mut rng),
            Err(SwapError::NoSwapAvailable)
        );
    }

    #[test]
    fn random_sampler_can_produce_false_negative() {
        let mut rng = SeededRng::new(0);
        let hit = (0..2000).any(|_| {
            sample_random_negative(COWS, &mut rng)
                .unwrap()
                .negative_caption
                .starts_with("White and black cows")
        });
        assert!(hit);
    }

    #[test]
    fn swap_details_are_readable() {
        let g = sg(COWS);
        assert_eq!(
            describe_swap(&g, SwapCandidate::Relation { index: 0 }),
            "(cows, sit in, hay) -> (hay, sit in, cows)"
        );
        assert_eq!(
            describe_swap(
                &g,
                SwapCandidate::Attribute {
                    first: 0,
                    second: 2
                }
            ),
            "(black, cows), (yellow, hay) -> (yellow, cows), (black, hay)"
        );
    }
}
