//! Caption tokenization, lexicon tagging and rule-based scene graph parsing.
//!
//! A scene graph holds the objects a caption mentions, the attribute pairs
//! attached to them and the relation triples between them. Parsing is a
//! deterministic function of the caption and the [`Lexicon`]:
//!
//! 1. every `NOUN` token becomes an object (measure nouns such as "pile" are
//!    tagged `MEASURE` and never become objects);
//! 2. the run of adjectives in front of a noun, possibly coordinated with
//!    `CONJ` ("black and white cows") and followed by determiners, attaches
//!    each adjective to that noun;
//! 3. between two consecutive objects, a span made only of verbs,
//!    adpositions, determiners, measure nouns and unknown words (ignoring the
//!    second noun's own adjectives) yields a relation whose phrase is the
//!    verbs and adpositions in order. `DET? MEASURE of` is absorbed, so
//!    "sit in a pile of" becomes "sit in";
//! 4. attributes and relations come out in left-to-right order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextGraphError {
    #[error("caption contains no words")]
    EmptyCaption,
    #[error("lexicon line {line}: {reason}")]
    BadLexicon { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Adj,
    Verb,
    Adp,
    Det,
    Conj,
    Measure,
    Other,
}

impl FromStr for PosTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "NOUN" => Self::Noun,
            "ADJ" => Self::Adj,
            "VERB" => Self::Verb,
            "ADP" => Self::Adp,
            "DET" => Self::Det,
            "CONJ" => Self::Conj,
            "MEASURE" => Self::Measure,
            "OTHER" => Self::Other,
            other => return Err(format!("unknown tag {other:?}")),
        })
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Noun => "NOUN",
            Self::Adj => "ADJ",
            Self::Verb => "VERB",
            Self::Adp => "ADP",
            Self::Det => "DET",
            Self::Conj => "CONJ",
            Self::Measure => "MEASURE",
            Self::Other => "OTHER",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// Surface form as written in the caption.
    pub text: String,
    pub pos: PosTag,
    pub index: usize,
    /// Byte range of the token in the caption.
    pub span: Range<usize>,
}

impl Token {
    pub fn lemma(&self) -> String {
        self.text.to_lowercase()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Splits a caption into word tokens. Punctuation and whitespace separate
/// tokens and are dropped. Every token starts out tagged `OTHER`.
pub fn tokenize(caption: &str) -> Result<Vec<Token>, TextGraphError> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in caption
        .char_indices()
        .chain(std::iter::once((caption.len(), ' ')))
    {
        match (start, is_word_char(c)) {
            (None, true) => start = Some(i),
            (Some(s), false) => {
                let text = &caption[s..i];
                // A lone apostrophe is punctuation.
                if text.chars().any(char::is_alphanumeric) {
                    tokens.push(Token {
                        text: text.to_string(),
                        pos: PosTag::Other,
                        index: tokens.len(),
                        span: s..i,
                    });
                }
                start = None;
            }
            _ => {}
        }
    }
    if tokens.is_empty() {
        return Err(TextGraphError::EmptyCaption);
    }
    Ok(tokens)
}

/// Word to part-of-speech map with a separate set of measure nouns.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: HashMap<String, PosTag>,
    measure_nouns: HashSet<String>,
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces an entry. A `MEASURE` tag registers a measure noun.
    pub fn insert(&mut self, word: &str, tag: PosTag) {
        let w = word.to_lowercase();
        if tag == PosTag::Measure {
            self.measure_nouns.insert(w.clone());
        } else {
            self.measure_nouns.remove(&w);
        }
        self.entries.insert(w, tag);
    }

    pub fn lookup(&self, word: &str) -> PosTag {
        let w = word.to_lowercase();
        if self.measure_nouns.contains(&w) {
            return PosTag::Measure;
        }
        self.entries.get(&w).copied().unwrap_or(PosTag::Other)
    }

    pub fn is_measure(&self, word: &str) -> bool {
        self.measure_nouns.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries sorted by word.
    pub fn entries(&self) -> Vec<(&str, PosTag)> {
        let mut v: Vec<_> = self.entries.iter().map(|(w, &t)| (w.as_str(), t)).collect();
        v.sort_unstable();
        v
    }

    pub fn merge(&mut self, other: &Lexicon) {
        for (w, t) in other.entries() {
            self.insert(w, t);
        }
    }

    /// Parses the `word<TAB>TAG` format; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, TextGraphError> {
        let mut lex = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| TextGraphError::BadLexicon {
                line: n + 1,
                reason,
            };
            let (word, tag) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected word<TAB>TAG".into()))?;
            let word = word.trim();
            if word.is_empty() {
                return Err(bad("empty word".into()));
            }
            let tag: PosTag = tag.trim().parse().map_err(bad)?;
            lex.insert(word, tag);
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> std::io::Result<Result<Self, TextGraphError>> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn to_file_format(&self) -> String {
        let mut out = String::from("# word\tTAG\n");
        for (w, t) in self.entries() {
            out.push_str(w);
            out.push('\t');
            out.push_str(&t.to_string());
            out.push('\n');
        }
        out
    }

    /// Small built-in English lexicon: function words plus the vocabulary of
    /// the running examples in the docs and tests.
    pub fn builtin() -> Self {
        use PosTag::*;
        let mut lex = Self::new();
        let groups: &[(PosTag, &[&str])] = &[
            (
                Det,
                &[
                    "a", "an", "the", "this", "that", "these", "those", "some", "its", "their",
                    "his", "her",
                ],
            ),
            (Conj, &["and", "or", "but"]),
            (
                Adp,
                &[
                    "in", "on", "at", "of", "with", "under", "over", "near", "behind", "beside",
                    "above", "below", "into", "onto", "by", "next", "to", "from", "inside",
                    "across",
                ],
            ),
            (
                Verb,
                &[
                    "is", "are", "was", "were", "be", "being", "riding", "rides", "ride", "sit",
                    "sits", "sitting", "holds", "holding", "hold", "eats", "eating", "wears",
                    "wearing", "stands", "standing", "watches", "watching", "chases", "chasing",
                    "carries", "carrying", "has", "have", "lies", "lying", "looks", "looking",
                ],
            ),
            (
                Measure,
                &[
                    "pile", "group", "pair", "bunch", "herd", "stack", "couple", "piece", "set",
                ],
            ),
            (
                Adj,
                &[
                    "black", "white", "red", "blue", "green", "yellow", "brown", "gray", "grey",
                    "orange", "pink", "purple", "big", "small", "large", "tall", "short", "old",
                    "young", "wooden", "metal", "striped", "dark", "bright",
                ],
            ),
            (
                Noun,
                &[
                    "astronaut",
                    "horse",
                    "cow",
                    "cows",
                    "hay",
                    "dress",
                    "book",
                    "sky",
                    "truck",
                    "man",
                    "woman",
                    "dog",
                    "cat",
                    "table",
                    "chair",
                    "shirt",
                    "grass",
                    "car",
                    "tree",
                    "person",
                    "girl",
                    "boy",
                    "bird",
                    "plate",
                    "bowl",
                    "street",
                    "building",
                    "bench",
                    "field",
                    "water",
                ],
            ),
        ];
        for (tag, words) in groups {
            for w in *words {
                lex.insert(w, *tag);
            }
        }
        lex
    }
}

/// Sets each token's tag from the lexicon (`OTHER` when absent).
pub fn tag(mut tokens: Vec<Token>, lexicon: &Lexicon) -> Vec<Token> {
    for t in &mut tokens {
        t.pos = lexicon.lookup(&t.text);
    }
    tokens
}

pub fn tokenize_and_tag(caption: &str, lexicon: &Lexicon) -> Result<Vec<Token>, TextGraphError> {
    Ok(tag(tokenize(caption)?, lexicon))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub lemma: String,
    pub token_index: usize,
}

/// Attribute pair `(attribute lemma, object id)`; serialized as a 2-array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(String, usize)", into = "(String, usize)")]
pub struct Attribute {
    pub lemma: String,
    pub object: usize,
}

impl From<(String, usize)> for Attribute {
    fn from((lemma, object): (String, usize)) -> Self {
        Self { lemma, object }
    }
}

impl From<Attribute> for (String, usize) {
    fn from(a: Attribute) -> Self {
        (a.lemma, a.object)
    }
}

/// Relation `(subject id, phrase, object id)`; serialized as a 3-array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, String, usize)", into = "(usize, String, usize)")]
pub struct Relation {
    pub subject: usize,
    pub phrase: String,
    pub object: usize,
}

impl From<(usize, String, usize)> for Relation {
    fn from((subject, phrase, object): (usize, String, usize)) -> Self {
        Self {
            subject,
            phrase,
            object,
        }
    }
}

impl From<Relation> for (usize, String, usize) {
    fn from(r: Relation) -> Self {
        (r.subject, r.phrase, r.object)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: Vec<SceneObject>,
    pub attributes: Vec<Attribute>,
    pub relations: Vec<Relation>,
}

impl SceneGraph {
    /// Checks that every attribute and relation endpoint names an existing
    /// object and that no pair or triple is repeated.
    pub fn is_well_formed(&self) -> bool {
        let n = self.objects.len();
        let attrs_ok = self.attributes.iter().all(|a| a.object < n);
        let rels_ok = self
            .relations
            .iter()
            .all(|r| r.subject < n && r.object < n && !r.phrase.is_empty());
        let uniq_attrs: HashSet<_> = self.attributes.iter().collect();
        let uniq_rels: HashSet<_> = self.relations.iter().collect();
        attrs_ok
            && rels_ok
            && uniq_attrs.len() == self.attributes.len()
            && uniq_rels.len() == self.relations.len()
    }

    pub fn object_lemma(&self, id: usize) -> &str {
        &self.objects[id].lemma
    }
}

/// Parses a caption into a scene graph. See the module docs for the rules.
pub fn parse_scene_graph(caption: &str, lexicon: &Lexicon) -> Result<SceneGraph, TextGraphError> {
    let tokens = tokenize_and_tag(caption, lexicon)?;
    Ok(parse_tagged(&tokens))
}

/// Adjective tokens attached to the noun at `head`, and the index of the
/// first token of its modifier span (adjectives plus determiners in between).
fn adjective_run(tokens: &[Token], head: usize) -> (Vec<usize>, usize) {
    let mut adjs = Vec::new();
    let mut j = head;
    // determiners directly before the head ("red, the dress" style input)
    while j > 0 && tokens[j - 1].pos == PosTag::Det {
        j -= 1;
    }
    let det_start = j;
    loop {
        if j == 0 {
            break;
        }
        match tokens[j - 1].pos {
            PosTag::Adj => {
                adjs.push(j - 1);
                j -= 1;
            }
            PosTag::Conj if !adjs.is_empty() && j >= 2 && tokens[j - 2].pos == PosTag::Adj => {
                j -= 1;
            }
            _ => break,
        }
    }
    if adjs.is_empty() {
        return (adjs, head);
    }
    adjs.reverse();
    (adjs, j.min(det_start))
}

pub fn parse_tagged(tokens: &[Token]) -> SceneGraph {
    let mut sg = SceneGraph::default();
    let heads: Vec<usize> = tokens
        .iter()
        .filter(|t| t.pos == PosTag::Noun)
        .map(|t| t.index)
        .collect();
    for &h in &heads {
        sg.objects.push(SceneObject {
            lemma: tokens[h].lemma(),
            token_index: h,
        });
    }

    let mut attrs: Vec<(usize, Attribute)> = Vec::new();
    let mut modifier_start = Vec::with_capacity(heads.len());
    for (obj, &h) in heads.iter().enumerate() {
        let (adjs, start) = adjective_run(tokens, h);
        modifier_start.push(start);
        for a in adjs {
            let attr = Attribute {
                lemma: tokens[a].lemma(),
                object: obj,
            };
            if !attrs.iter().any(|(_, x)| *x == attr) {
                attrs.push((a, attr));
            }
        }
    }
    attrs.sort_by_key(|(pos, _)| *pos);
    sg.attributes = attrs.into_iter().map(|(_, a)| a).collect();

    for obj in 1..heads.len() {
        let left = heads[obj - 1];
        let right_start = modifier_start[obj];
        if right_start <= left + 1 {
            continue;
        }
        if let Some(phrase) = relation_phrase(&tokens[left + 1..right_start]) {
            let rel = Relation {
                subject: obj - 1,
                phrase,
                object: obj,
            };
            if !sg.relations.contains(&rel) {
                sg.relations.push(rel);
            }
        }
    }
    sg
}

/// Relation phrase for the tokens strictly between two objects, or `None`
/// when the span is not a relation (contains a conjunction, a stray
/// adjective, or no verb/adposition).
fn relation_phrase(span: &[Token]) -> Option<String> {
    let mut absorbed = vec![false; span.len()];
    for (i, t) in span.iter().enumerate() {
        if t.pos == PosTag::Measure {
            absorbed[i] = true;
            if i > 0 && span[i - 1].pos == PosTag::Det {
                absorbed[i - 1] = true;
            }
            if i + 1 < span.len() && span[i + 1].pos == PosTag::Adp && span[i + 1].lemma() == "of" {
                absorbed[i + 1] = true;
            }
        }
    }
    let mut words = Vec::new();
    for (t, &skip) in span.iter().zip(&absorbed) {
        if skip {
            continue;
        }
        match t.pos {
            PosTag::Verb | PosTag::Adp => words.push(t.lemma()),
            PosTag::Det | PosTag::Other | PosTag::Measure => {}
            PosTag::Adj | PosTag::Conj | PosTag::Noun => return None,
        }
    }
    if words.is_empty() {
        None
    } else {
        Some(words.join(" "))
    }
}

/// A knowledge triple `(head, relation, tail)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// The conjunction used to turn an attribute pair into a triple.
pub const ATTRIBUTE_RELATION: &str = "is";

/// Relations become `(subject, phrase, object)`; attribute pairs `(A, O)`
/// become `(O, "is", A)`. Relations first, then attributes.
pub fn scene_graph_to_triples(sg: &SceneGraph) -> Vec<Triple> {
    let rels = sg.relations.iter().map(|r| Triple {
        head: sg.object_lemma(r.subject).to_string(),
        relation: r.phrase.clone(),
        tail: sg.object_lemma(r.object).to_string(),
    });
    let attrs = sg.attributes.iter().map(|a| Triple {
        head: sg.object_lemma(a.object).to_string(),
        relation: ATTRIBUTE_RELATION.to_string(),
        tail: a.lemma.clone(),
    });
    rels.chain(attrs).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn tokenize_examples() {
        let t = tokenize("An astronaut is riding a horse").unwrap();
        assert_eq!(texts(&t), ["An", "astronaut", "is", "riding", "a", "horse"]);
        assert_eq!(
            t.iter().map(|t| t.index).collect::<Vec<_>>(),
            (0..6).collect::<Vec<_>>()
        );
        let t = tokenize("Black and white cows sit in a pile of yellow hay").unwrap();
        assert_eq!(t.len(), 11);
        assert_eq!(tokenize(""), Err(TextGraphError::EmptyCaption));
        assert_eq!(tokenize(" ,.;! "), Err(TextGraphError::EmptyCaption));
    }

    #[test]
    fn tokenize_drops_punctuation_and_keeps_spans() {
        let cap = "A dog, on the grass.";
        let t = tokenize(cap).unwrap();
        assert_eq!(texts(&t), ["A", "dog", "on", "the", "grass"]);
        assert_eq!(&cap[t[1].span.clone()], "dog");
    }

    #[test]
    fn tag_lookup() {
        let mut lex = Lexicon::new();
        lex.insert("cows", PosTag::Noun);
        lex.insert("pile", PosTag::Measure);
        let t = tag(tokenize("Cows pile xyzzy").unwrap(), &lex);
        assert_eq!(
            t.iter().map(|t| t.pos).collect::<Vec<_>>(),
            [PosTag::Noun, PosTag::Measure, PosTag::Other]
        );
    }

    #[test]
    fn lexicon_file_format() {
        let lex = Lexicon::parse("# comment\ncows\tNOUN\npile\tMEASURE\n\nRed\tADJ\n").unwrap();
        assert_eq!(lex.lookup("COWS"), PosTag::Noun);
        assert_eq!(lex.lookup("red"), PosTag::Adj);
        assert!(lex.is_measure("pile"));
        let again = Lexicon::parse(&lex.to_file_format()).unwrap();
        assert_eq!(again, lex);
        assert!(matches!(
            Lexicon::parse("cows NOUN"),
            Err(TextGraphError::BadLexicon { line: 1, .. })
        ));
        assert!(Lexicon::parse("cows\tNOUNISH").is_err());
    }

    #[test]
    fn cows_example() {
        let sg = parse_scene_graph(
            "Black and white cows sit in a pile of yellow hay",
            &Lexicon::builtin(),
        )
        .unwrap();
        let objs: Vec<_> = sg.objects.iter().map(|o| o.lemma.as_str()).collect();
        assert_eq!(objs, ["cows", "hay"]);
        let attrs: Vec<_> = sg
            .attributes
            .iter()
            .map(|a| (a.lemma.as_str(), sg.object_lemma(a.object)))
            .collect();
        assert_eq!(
            attrs,
            [("black", "cows"), ("white", "cows"), ("yellow", "hay")]
        );
        assert_eq!(
            sg.relations,
            [Relation {
                subject: 0,
                phrase: "sit in".into(),
                object: 1
            }]
        );
    }

    #[test]
    fn astronaut_example() {
        let sg = parse_scene_graph("An astronaut is riding a horse", &Lexicon::builtin()).unwrap();
        assert_eq!(sg.objects.len(), 2);
        assert!(sg.attributes.is_empty());
        assert_eq!(sg.relations[0].phrase, "is riding");
        assert_eq!(sg.object_lemma(sg.relations[0].subject), "astronaut");
        assert_eq!(sg.object_lemma(sg.relations[0].object), "horse");
    }

    #[test]
    fn coordinated_objects_have_no_relation() {
        let sg = parse_scene_graph("the red dress and the blue book", &Lexicon::builtin()).unwrap();
        let attrs: Vec<_> = sg
            .attributes
            .iter()
            .map(|a| (a.lemma.as_str(), sg.object_lemma(a.object)))
            .collect();
        assert_eq!(attrs, [("red", "dress"), ("blue", "book")]);
        assert!(sg.relations.is_empty());
    }

    #[test]
    fn scene_graph_json_schema() {
        let sg = parse_scene_graph("An astronaut is riding a horse", &Lexicon::builtin()).unwrap();
        let json = serde_json::to_value(&sg).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "objects": [{"lemma": "astronaut", "token_index": 1}, {"lemma": "horse", "token_index": 5}],
                "attributes": [],
                "relations": [[0, "is riding", 1]]
            })
        );
        let back: SceneGraph = serde_json::from_value(json).unwrap();
        assert_eq!(back, sg);
    }

    #[test]
    fn triples_unify_pairs() {
        let sg = parse_scene_graph(
            "Black and white cows sit in a pile of yellow hay",
            &Lexicon::builtin(),
        )
        .unwrap();
        let triples = scene_graph_to_triples(&sg);
        assert_eq!(
            triples,
            [
                Triple::new("cows", "sit in", "hay"),
                Triple::new("cows", "is", "black"),
                Triple::new("cows", "is", "white"),
                Triple::new("hay", "is", "yellow"),
            ]
        );
        assert!(scene_graph_to_triples(&SceneGraph::default()).is_empty());
    }

    #[test]
    fn white_cow_pair_becomes_is_triple() {
        let sg = parse_scene_graph("a white cow", &Lexicon::builtin()).unwrap();
        assert_eq!(
            scene_graph_to_triples(&sg),
            [Triple::new("cow", "is", "white")]
        );
    }
}
