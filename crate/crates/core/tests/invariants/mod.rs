//! Randomized invariant checks shared by the property tests and the
//! acceptance run. Each function panics on the first counterexample.

use std::sync::OnceLock;

use proptest::prelude::*;
use sgclip::encoders::{fuse, Model, ModelConfig, Vocabulary};
use sgclip::evaluation::{discriminate, recall_at_k};
use sgclip::negsample::{
    all_negatives, apply_swap, enumerate_swaps, sample_negative, sample_random_negative,
    word_multiset, SwapCandidate,
};
use sgclip::nn::{layer_norm, multi_head_attention, ParamInit};
use sgclip::objectives::{hinge_loss, info_nce, SimilarityMatrix};
use sgclip::rng::SeededRng;
use sgclip::tensor::{dot, matmul, softmax_rows, ParamStore, Tensor};
use sgclip::textgraph::{parse_scene_graph, scene_graph_to_triples, tokenize, Lexicon, Triple};

pub const CASES: u32 = 1000;

fn config() -> ProptestConfig {
    ProptestConfig {
        failure_persistence: None,
        ..ProptestConfig::with_cases(CASES)
    }
}

const DETS: &[&str] = &["a", "an", "the", "A", "The", "some"];
const ADJS: &[&str] = &[
    "black", "white", "red", "blue", "green", "yellow", "big", "small", "old", "wooden", "striped",
];
const NOUNS: &[&str] = &[
    "astronaut",
    "horse",
    "cows",
    "hay",
    "dress",
    "book",
    "man",
    "dog",
    "cat",
    "table",
    "apple",
    "bench",
    "owl",
];
const RELS: &[&str] = &[
    "on",
    "under",
    "near",
    "is riding",
    "sits in",
    "holding",
    "next to",
    "behind",
    "is eating",
];
const FILLER: &[&str] = &["and", "of", "pile", "very", "quickly", "with"];

fn noun_phrase() -> impl Strategy<Value = String> {
    (
        prop::sample::select(DETS),
        prop::collection::vec(prop::sample::select(ADJS), 0..3),
        prop::sample::select(NOUNS),
    )
        .prop_map(|(d, adjs, n)| {
            let mut words = vec![d.to_string()];
            for (i, a) in adjs.iter().enumerate() {
                if i > 0 {
                    words.push("and".into());
                }
                words.push(a.to_string());
            }
            words.push(n.to_string());
            words.join(" ")
        })
}

fn caption() -> impl Strategy<Value = String> {
    prop_oneof![
        (noun_phrase(), prop::sample::select(RELS), noun_phrase())
            .prop_map(|(a, r, b)| format!("{a} {r} {b}")),
        (noun_phrase(), noun_phrase()).prop_map(|(a, b)| format!("{a} and {b}")),
        (
            noun_phrase(),
            prop::sample::select(RELS),
            noun_phrase(),
            noun_phrase()
        )
            .prop_map(|(a, r, b, c)| format!("{a} {r} {b} and {c}")),
        prop::collection::vec(
            prop::sample::select([DETS, ADJS, NOUNS, RELS, FILLER].concat()),
            1..12
        )
        .prop_map(|w| w.join(" ")),
    ]
}

fn lowercase_tokens(caption: &str) -> Vec<String> {
    tokenize(caption)
        .map(|t| t.iter().map(|t| t.lemma()).collect())
        .unwrap_or_default()
}

pub fn parsed_graphs_are_well_formed_and_grounded() {
    proptest!(config(), |(c in caption())| {
        let lex = Lexicon::builtin();
        let sg = parse_scene_graph(&c, &lex).unwrap();
        prop_assert!(sg.is_well_formed());
        prop_assert_eq!(&sg, &parse_scene_graph(&c, &lex).unwrap());
        let words = lowercase_tokens(&c);
        let has = |w: &str| words.iter().any(|t| t == w);
        for o in &sg.objects {
            prop_assert!(has(&o.lemma), "{}", o.lemma);
        }
        for a in &sg.attributes {
            prop_assert!(has(&a.lemma));
        }
        for r in &sg.relations {
            for w in r.phrase.split(' ') {
                prop_assert!(has(w), "{}", w);
            }
        }
        prop_assert_eq!(scene_graph_to_triples(&sg).len(), sg.attributes.len() + sg.relations.len());
    });
}

pub fn semantic_negatives_preserve_words() {
    proptest!(config(), |(c in caption(), seed in any::<u64>())| {
        let lex = Lexicon::builtin();
        let sg = parse_scene_graph(&c, &lex).unwrap();
        let negs = all_negatives(&c, &sg).unwrap();
        for n in &negs {
            prop_assert_eq!(word_multiset(&n.negative_caption), word_multiset(&c));
            prop_assert_ne!(n.negative_caption.to_lowercase(), c.to_lowercase());
            if let SwapCandidate::Attribute { first, second } = n.swap {
                prop_assert_ne!(sg.attributes[first].object, sg.attributes[second].object);
            }
        }
        let a = sample_negative(&c, &sg, &mut SeededRng::new(seed));
        let b = sample_negative(&c, &sg, &mut SeededRng::new(seed));
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.is_ok(), !negs.is_empty());
    });
}

pub fn random_negatives_preserve_words() {
    proptest!(config(), |(c in caption(), seed in any::<u64>())| {
        if let Ok(n) = sample_random_negative(&c, &mut SeededRng::new(seed)) {
            prop_assert_eq!(word_multiset(&n.negative_caption), word_multiset(&c));
            prop_assert_ne!(n.negative_caption.to_lowercase(), c.to_lowercase());
        }
    });
}

pub fn swaps_are_involutions() {
    proptest!(config(), |(c in caption())| {
        let sg = parse_scene_graph(&c, &Lexicon::builtin()).unwrap();
        for swap in enumerate_swaps(&sg) {
            let twice = apply_swap(&apply_swap(&sg, swap).unwrap(), swap).unwrap();
            prop_assert_eq!(&twice, &sg);
        }
    });
}

pub fn softmax_rows_sum_to_one_and_ignore_shifts() {
    proptest!(config(), |( rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 5), 1..6), shift in -50.0f64..50.0)| {
        let x = Tensor::from_rows(&rows).unwrap();
        let y = softmax_rows(&x);
        for i in 0..y.rows() {
            prop_assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted = Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect::<Vec<_>>()).unwrap();
        let ys = softmax_rows(&shifted);
        for (a, b) in y.data().iter().zip(ys.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    });
}

pub fn layer_norm_rows_are_standardized() {
    proptest!(config(), |( rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 8), 1..5), scale in 0.5f64..20.0, offset in -5.0f64..5.0)| {
        let x = Tensor::from_rows(&rows).unwrap();
        prop_assume!((0..x.rows()).all(|i| {
            let r = x.row(i);
            let m = r.iter().sum::<f64>() / 8.0;
            r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0 > 1e-2
        }));
        let (y, _) = layer_norm(&x, &[1.0; 8], &[0.0; 8], 1e-12).unwrap();
        for i in 0..y.rows() {
            let r = y.row(i);
            let m = r.iter().sum::<f64>() / 8.0;
            let v = r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 8.0;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
        let affine = Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|v| v * scale + offset).collect()).collect::<Vec<_>>()).unwrap();
        let (ya, _) = layer_norm(&affine, &[1.0; 8], &[0.0; 8], 1e-12).unwrap();
        for (a, b) in y.data().iter().zip(ya.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    });
}

pub fn identity_matmul_is_exact() {
    proptest!(config(), |(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 7), 1..9))| {
        let x = Tensor::from_rows(&rows).unwrap();
        prop_assert_eq!(&matmul(&Tensor::identity(x.rows()), &x).unwrap(), &x);
        prop_assert_eq!(&matmul(&x, &Tensor::identity(7)).unwrap(), &x);
    });
}

pub fn hinge_is_nonnegative_with_exact_zero_set() {
    proptest!(config(), |(d in -1.0f64..1.0, dn in -1.0f64..1.0, gamma in 0.0f64..1.0)| {
        let h = hinge_loss(d, dn, gamma);
        prop_assert!(h >= 0.0);
        prop_assert_eq!(h == 0.0, gamma - d + dn <= 0.0);
    });
}

pub fn info_nce_shift_invariance() {
    proptest!(config(), |( n in 1usize..6, seed in any::<u64>(), tau in 0.05f64..2.0)| {
        let mut rng = SeededRng::new(seed);
        let s = Tensor::randn(&[n, n], 1.0, &mut rng);
        let base = info_nce(&SimilarityMatrix::new(s.clone(), tau).unwrap());
        let shifts: Vec<f64> = (0..n).map(|_| rng.uniform() * 4.0 - 2.0).collect();
        let mut rows = s.clone();
        let mut cols = s.clone();
        for i in 0..n {
            for j in 0..n {
                rows.data_mut()[i * n + j] += shifts[i];
                cols.data_mut()[i * n + j] += shifts[j];
            }
        }
        let r = info_nce(&SimilarityMatrix::new(rows, tau).unwrap());
        let c = info_nce(&SimilarityMatrix::new(cols, tau).unwrap());
        prop_assert!((r.i2t - base.i2t).abs() < 1e-9 * (1.0 + base.i2t.abs()));
        prop_assert!((c.t2i - base.t2i).abs() < 1e-9 * (1.0 + base.t2i.abs()));
    });
}

pub fn symmetric_similarity_gives_equal_directions() {
    proptest!(config(), |(n in 1usize..7, seed in any::<u64>())| {
        let mut rng = SeededRng::new(seed);
        let a: Tensor<f64> = Tensor::randn(&[n, n], 1.0, &mut rng);
        let mut s = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                s.data_mut()[i * n + j] = a.get(i, j) + a.get(j, i);
            }
        }
        let l = info_nce(&SimilarityMatrix::new(s, 0.07).unwrap());
        prop_assert_eq!(l.i2t, l.t2i);
    });
}

pub fn fuse_without_knowledge_is_normalization() {
    proptest!(config(), |( z in prop::collection::vec(-5.0f64..5.0, 6), e in prop::collection::vec(-5.0f64..5.0, 6), lambda in 0.0f64..3.0)| {
        prop_assume!(dot(&z, &z) > 1e-6);
        let n = dot(&z, &z).sqrt();
        let plain = fuse(&z, &e, 0.0).unwrap();
        for (a, b) in plain.iter().zip(&z) {
            prop_assert!((a - b / n).abs() < 1e-12);
        }
        let sum: Vec<f64> = z.iter().zip(&e).map(|(a, b)| a + lambda * b).collect();
        if dot(&sum, &sum) > 1e-6 {
            let f = fuse(&z, &e, lambda).unwrap();
            prop_assert!((dot(&f, &f).sqrt() - 1.0).abs() < 1e-6);
        }
    });
}

pub fn recall_is_monotone_in_k() {
    proptest!(config(), |(n in 1usize..12, seed in any::<u64>())| {
        let mut rng = SeededRng::new(seed);
        let sim: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| (rng.below(5) as f64) / 4.0).collect()).collect();
        let ks: Vec<usize> = (1..=n).collect();
        let r = recall_at_k(&sim, &ks).unwrap();
        for w in ks.windows(2) {
            prop_assert!(r.text_retrieval[&w[0]] <= r.text_retrieval[&w[1]]);
            prop_assert!(r.image_retrieval[&w[0]] <= r.image_retrieval[&w[1]]);
        }
        prop_assert_eq!(r.text_retrieval[&n], 1.0);
    });
}

pub fn discrimination_ignores_positive_rescaling() {
    proptest!(config(), |( img in prop::collection::vec(-1.0f64..1.0, 5), a in prop::collection::vec(-1.0f64..1.0, 5), u in prop::collection::vec(-1.0f64..1.0, 5), s in 1e-3f64..1e3)| {
        prop_assume!(dot(&img, &img) > 1e-6 && dot(&a, &a) > 1e-6 && dot(&u, &u) > 1e-6);
        let scale = |v: &[f64]| v.iter().map(|x| x * s).collect::<Vec<_>>();
        let (sa, su, ok) = discriminate(&img, &a, &u).unwrap();
        prop_assume!((sa - su).abs() > 1e-9);
        let (_, _, ok2) = discriminate(&scale(&img), &scale(&a), &scale(&u)).unwrap();
        prop_assert_eq!(ok, ok2);
    });
}

fn small_model() -> &'static Model<f64> {
    static MODEL: OnceLock<Model<f64>> = OnceLock::new();
    MODEL.get_or_init(build_model)
}

fn build_model() -> Model<f64> {
    let mut config = ModelConfig::default();
    config.image.input_dim = 4;
    let words: Vec<&str> = [
        ADJS,
        NOUNS,
        &["on", "under", "near", "is", "riding", "sits", "in"],
    ]
    .concat();
    Model::new(config, Vocabulary::new(words), Lexicon::builtin(), 11).unwrap()
}

fn triple() -> impl Strategy<Value = Triple> {
    (
        prop::sample::select(NOUNS),
        prop::sample::select(&["on", "under", "near", "is", "is riding", "sits in"][..]),
        prop::sample::select([NOUNS, ADJS].concat()),
    )
        .prop_map(|(h, r, t)| Triple::new(h, r, t))
}

pub fn triple_encoder_identities() {
    proptest!(config(), |(h in prop::sample::select(NOUNS), r in prop::sample::select(&["on", "near", "is riding"][..]), t in prop::sample::select(NOUNS))| {
        let m = small_model();
        let w = |p: &str| m.word_embed(p);
        let same = m.encode_triple(&Triple::new(h, r, h));
        for (a, b) in same.iter().zip(w(r)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let fwd = m.encode_triple(&Triple::new(h, r, t));
        let rev = m.encode_triple(&Triple::new(t, r, h));
        let (wh, wt) = (w(h), w(t));
        for i in 0..fwd.len() {
            prop_assert!((fwd[i] - rev[i] - 2.0 * (wh[i] - wt[i])).abs() < 1e-12);
        }
        if h != t {
            prop_assert!(fwd != rev);
        }
    });
}

pub fn knowledge_encoder_is_permutation_invariant() {
    proptest!(config(), |( triples in prop::collection::vec(triple(), 1..8), seed in any::<u64>())| {
        let m = small_model();
        let mut shuffled = triples.clone();
        SeededRng::new(seed).shuffle(&mut shuffled);
        let (a, _) = m.encode_knowledge(&triples).unwrap();
        let (b, _) = m.encode_knowledge(&shuffled).unwrap();
        let scale = dot(&a, &a).sqrt().max(1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() / scale <= 1e-5);
        }
    });
}

pub fn attention_is_row_permutation_equivariant() {
    proptest!(config(), |(n in 1usize..7, seed in any::<u64>())| {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let attn = ParamInit { store: &mut store, rng: &mut rng, std: 0.3 }.attention("a", 8, 2);
        let x = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row(p).to_vec()).collect();
        let y = multi_head_attention(&x, &store, &attn).unwrap();
        let yp = multi_head_attention(&Tensor::from_rows(&rows).unwrap(), &store, &attn).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in yp.row(i).iter().zip(y.row(p)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    });
}

/// Every check with its name, in a fixed order.
#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    (
        "parsed_graphs_are_well_formed_and_grounded",
        parsed_graphs_are_well_formed_and_grounded,
    ),
    (
        "semantic_negatives_preserve_words",
        semantic_negatives_preserve_words,
    ),
    (
        "random_negatives_preserve_words",
        random_negatives_preserve_words,
    ),
    ("swaps_are_involutions", swaps_are_involutions),
    (
        "softmax_rows_sum_to_one_and_ignore_shifts",
        softmax_rows_sum_to_one_and_ignore_shifts,
    ),
    (
        "layer_norm_rows_are_standardized",
        layer_norm_rows_are_standardized,
    ),
    ("identity_matmul_is_exact", identity_matmul_is_exact),
    (
        "hinge_is_nonnegative_with_exact_zero_set",
        hinge_is_nonnegative_with_exact_zero_set,
    ),
    ("info_nce_shift_invariance", info_nce_shift_invariance),
    (
        "symmetric_similarity_gives_equal_directions",
        symmetric_similarity_gives_equal_directions,
    ),
    (
        "fuse_without_knowledge_is_normalization",
        fuse_without_knowledge_is_normalization,
    ),
    ("recall_is_monotone_in_k", recall_is_monotone_in_k),
    (
        "discrimination_ignores_positive_rescaling",
        discrimination_ignores_positive_rescaling,
    ),
    ("triple_encoder_identities", triple_encoder_identities),
    (
        "knowledge_encoder_is_permutation_invariant",
        knowledge_encoder_is_permutation_invariant,
    ),
    (
        "attention_is_row_permutation_equivariant",
        attention_is_row_permutation_equivariant,
    ),
];
