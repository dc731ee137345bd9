//! Referring-expression tokenization, cue-phrase matching, and token maps.
//!
//! Cue phrases annotated per grounding attribute are located in the tokenized
//! expression by a windowed fuzzy matcher (per-token normalized Levenshtein
//! similarity with synonym handling). Matches become binary positive maps,
//! which soften into equal-mass probability maps and combine with the
//! public-context map into per-attribute masks over the joint
//! visual+text sequence.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt;

/// Maximum accepted expression length, in tokens.
pub const MAX_TOKENS: usize = 128;

/// Per-token similarity threshold of the fuzzy matcher.
pub const FUZZY_THRESHOLD: f64 = 0.8;

/// The four grounding attribute categories, in fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum AttributeKind {
    Appearance,
    Status,
    RelationToViewer,
    RelationToOthers,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 4] = [
        AttributeKind::Appearance,
        AttributeKind::Status,
        AttributeKind::RelationToViewer,
        AttributeKind::RelationToOthers,
    ];

    pub fn index(self) -> usize {
        match self {
            AttributeKind::Appearance => 0,
            AttributeKind::Status => 1,
            AttributeKind::RelationToViewer => 2,
            AttributeKind::RelationToOthers => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeKind::Appearance => "appearance",
            AttributeKind::Status => "status",
            AttributeKind::RelationToViewer => "relation_to_viewer",
            AttributeKind::RelationToOthers => "relation_to_others",
        }
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which token map a [`PositiveMap`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Attribute(AttributeKind),
    PublicContext,
}

/// A tokenized expression with per-token character spans into the original.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    /// Half-open `(start, end)` character offsets into the original expression.
    pub char_spans: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Cue phrases annotated for one expression, per attribute.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttributeSpans {
    pub appearance: Vec<String>,
    pub status: Vec<String>,
    pub relation_to_viewer: Vec<String>,
    pub relation_to_others: Vec<String>,
}

impl AttributeSpans {
    pub fn get(&self, kind: AttributeKind) -> &[String] {
        match kind {
            AttributeKind::Appearance => &self.appearance,
            AttributeKind::Status => &self.status,
            AttributeKind::RelationToViewer => &self.relation_to_viewer,
            AttributeKind::RelationToOthers => &self.relation_to_others,
        }
    }

    pub fn get_mut(&mut self, kind: AttributeKind) -> &mut Vec<String> {
        match kind {
            AttributeKind::Appearance => &mut self.appearance,
            AttributeKind::Status => &mut self.status,
            AttributeKind::RelationToViewer => &mut self.relation_to_viewer,
            AttributeKind::RelationToOthers => &mut self.relation_to_others,
        }
    }
}

/// Binary token mask over an expression.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveMap {
    pub bits: Vec<bool>,
    pub kind: MapKind,
}

impl PositiveMap {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Probability-normalized token map: uniform mass on the positive positions,
/// or all-zero (with `empty` set) when the source map had no positives.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftTokenMap {
    pub probs: Vec<f64>,
    pub empty: bool,
}

/// Binary mask over the joint visual+text sequence for one attribute.
/// Visual positions always pass; text positions are `m_i OR m_0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeMask {
    pub bits: Vec<bool>,
    pub visual_len: usize,
    pub kind: AttributeKind,
}

/// Word -> canonical-word table used by the fuzzy matcher's synonym check.
#[derive(Debug, Clone, Default)]
pub struct SynonymTable {
    canonical: HashMap<String, String>,
}

impl SynonymTable {
    pub fn empty() -> Self {
        SynonymTable::default()
    }

    /// The table shipped with the seven traffic classes.
    pub fn default_classes() -> Self {
        let mut table = SynonymTable::default();
        for (word, canon) in [
            ("vehicle", "car"),
            ("person", "pedestrian"),
            ("bicycle", "bike"),
            ("motor", "motorcycle"),
            ("coach", "bus"),
            ("lorry", "truck"),
            ("cyclist", "rider"),
        ] {
            table.insert(word, canon);
        }
        table
    }

    pub fn insert(&mut self, word: &str, canonical: &str) {
        self.canonical.insert(word.to_lowercase(), canonical.to_lowercase());
    }

    /// Parse the one-`word->canonical`-pair-per-line text format. Blank lines
    /// and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table = SynonymTable::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, canon) = line.split_once("->").ok_or_else(|| {
                Error::Format(format!("synonym line {} lacks '->': {line}", lineno + 1))
            })?;
            let (word, canon) = (word.trim(), canon.trim());
            if word.is_empty() || canon.is_empty() {
                return Err(Error::Format(format!("synonym line {} incomplete", lineno + 1)));
            }
            table.insert(word, canon);
        }
        Ok(table)
    }

    fn canon<'a>(&'a self, word: &'a str) -> &'a str {
        self.canonical.get(word).map(String::as_str).unwrap_or(word)
    }

    /// Two words are synonyms when they share a canonical form.
    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.canon(a) == self.canon(b)
    }
}

/// Lowercase, split on whitespace, and strip leading/trailing ASCII
/// punctuation per token; empty tokens are dropped. Character spans index the
/// original string.
pub fn tokenize(expression: &str) -> Result<TokenSeq> {
    if expression.trim().is_empty() {
        return Err(Error::InvalidExpression("expression is empty".into()));
    }
    let chars: Vec<char> = expression.chars().collect();
    let mut tokens = Vec::new();
    let mut char_spans = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let (mut s, mut e) = (start, i);
        while s < e && chars[s].is_ascii_punctuation() {
            s += 1;
        }
        while e > s && chars[e - 1].is_ascii_punctuation() {
            e -= 1;
        }
        if s < e {
            tokens.push(chars[s..e].iter().collect::<String>().to_lowercase());
            char_spans.push((s, e));
        }
    }
    if tokens.is_empty() {
        return Err(Error::InvalidExpression("expression has no word tokens".into()));
    }
    if tokens.len() > MAX_TOKENS {
        return Err(Error::InvalidExpression(format!(
            "expression has {} tokens, maximum is {MAX_TOKENS}",
            tokens.len()
        )));
    }
    Ok(TokenSeq { tokens, char_spans })
}

/// Levenshtein distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=a.len()).collect();
    let mut cur = vec![0; a.len() + 1];
    for (j, bc) in b.iter().enumerate() {
        cur[0] = j + 1;
        for (i, ac) in a.iter().enumerate() {
            let cost = usize::from(ac != bc);
            cur[i + 1] = (prev[i + 1] + 1).min(cur[i] + 1).min(prev[i] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[a.len()]
}

/// Normalized similarity `1 - dist / max(len)`, in `[0, 1]`.
pub fn token_similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / max_len as f64
}

fn tokens_match(expr_token: &str, cue_token: &str, synonyms: &SynonymTable) -> bool {
    synonyms.are_synonyms(expr_token, cue_token)
        || token_similarity(expr_token, cue_token) >= FUZZY_THRESHOLD
}

/// Mark every token window where one of the attribute's cue phrases occurs.
///
/// A cue phrase matches a window of equal token length when every aligned
/// token pair is a synonym pair or has similarity at least
/// [`FUZZY_THRESHOLD`]. All occurrences are marked; an empty cue list yields
/// an all-zero map.
pub fn fuzzy_match_spans(
    tokens: &TokenSeq,
    spans: &AttributeSpans,
    kind: AttributeKind,
    synonyms: &SynonymTable,
) -> PositiveMap {
    let mut bits = vec![false; tokens.len()];
    for cue in spans.get(kind) {
        let cue_tokens = match tokenize(cue) {
            Ok(seq) => seq.tokens,
            Err(_) => continue,
        };
        if cue_tokens.is_empty() || cue_tokens.len() > tokens.len() {
            continue;
        }
        for start in 0..=(tokens.len() - cue_tokens.len()) {
            let window_matches = cue_tokens
                .iter()
                .enumerate()
                .all(|(k, cue_tok)| tokens_match(&tokens.tokens[start + k], cue_tok, synonyms));
            if window_matches {
                for bit in &mut bits[start..start + cue_tokens.len()] {
                    *bit = true;
                }
            }
        }
    }
    PositiveMap { bits, kind: MapKind::Attribute(kind) }
}

/// Public-context map: the tokens claimed by none of the four attribute maps.
pub fn build_public_context(maps: &[PositiveMap; 4]) -> Result<PositiveMap> {
    let len = maps[0].bits.len();
    if maps.iter().any(|m| m.bits.len() != len) {
        return Err(Error::InvalidArgument("attribute maps differ in length".into()));
    }
    let bits = (0..len).map(|j| maps.iter().all(|m| !m.bits[j])).collect();
    Ok(PositiveMap { bits, kind: MapKind::PublicContext })
}

/// Spread unit mass uniformly over the positive positions. An all-zero map
/// softens to the all-zero vector with the `empty` flag set; the caller
/// decides the fallback.
pub fn soften(map: &PositiveMap) -> SoftTokenMap {
    let k = map.popcount();
    if k == 0 {
        return SoftTokenMap { probs: vec![0.0; map.bits.len()], empty: true };
    }
    let mass = 1.0 / k as f64;
    let probs = map.bits.iter().map(|&b| if b { mass } else { 0.0 }).collect();
    SoftTokenMap { probs, empty: false }
}

/// Joint mask of length `visual_len + C_tok`: all visual positions pass, text
/// positions are `map_i OR public`.
pub fn build_attribute_mask(
    map_i: &PositiveMap,
    public: &PositiveMap,
    visual_len: usize,
) -> Result<AttributeMask> {
    if map_i.bits.len() != public.bits.len() {
        return Err(Error::InvalidArgument("map lengths differ".into()));
    }
    let kind = match map_i.kind {
        MapKind::Attribute(kind) => kind,
        MapKind::PublicContext => {
            return Err(Error::InvalidArgument("mask must be built from an attribute map".into()))
        }
    };
    let mut bits = vec![true; visual_len];
    bits.extend(map_i.bits.iter().zip(public.bits.iter()).map(|(&a, &b)| a || b));
    Ok(AttributeMask { bits, visual_len, kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(text: &str) -> TokenSeq {
        tokenize(text).unwrap()
    }

    fn spans_with(kind: AttributeKind, cues: &[&str]) -> AttributeSpans {
        let mut spans = AttributeSpans::default();
        *spans.get_mut(kind) = cues.iter().map(|s| s.to_string()).collect();
        spans
    }

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        let seq = seq("The red car, moving left.");
        assert_eq!(seq.tokens, vec!["the", "red", "car", "moving", "left"]);
    }

    #[test]
    fn tokenize_trims_whitespace() {
        assert_eq!(seq("  Bus  ").tokens, vec!["bus"]);
    }

    #[test]
    fn tokenize_char_offsets_match_independent_scan() {
        let text = "two pedestrians walking together";
        let seq = seq(text);
        assert_eq!(seq.len(), 4);
        // Oracle: recompute offsets by scanning for each word.
        let chars: Vec<char> = text.chars().collect();
        for (token, &(s, e)) in seq.tokens.iter().zip(&seq.char_spans) {
            let slice: String = chars[s..e].iter().collect();
            assert_eq!(slice.to_lowercase(), *token);
        }
        assert_eq!(seq.char_spans, vec![(0, 3), (4, 15), (16, 23), (24, 32)]);
    }

    #[test]
    fn tokenize_rejects_empty_input() {
        assert!(matches!(tokenize("   "), Err(Error::InvalidExpression(_))));
        assert!(matches!(tokenize("!!!"), Err(Error::InvalidExpression(_))));
        let long = vec!["word"; MAX_TOKENS + 1].join(" ");
        assert!(matches!(tokenize(&long), Err(Error::InvalidExpression(_))));
    }

    #[test]
    fn status_cue_marks_its_window() {
        let tokens = seq("the red car moving left");
        let spans = spans_with(AttributeKind::Status, &["moving left"]);
        let map = fuzzy_match_spans(&tokens, &spans, AttributeKind::Status, &SynonymTable::empty());
        assert_eq!(map.bits, vec![false, false, false, true, true]);
    }

    #[test]
    fn appearance_cue_exact_match() {
        let tokens = seq("the red car moving left");
        let spans = spans_with(AttributeKind::Appearance, &["red car"]);
        let map =
            fuzzy_match_spans(&tokens, &spans, AttributeKind::Appearance, &SynonymTable::empty());
        assert_eq!(map.bits, vec![false, true, true, false, false]);
    }

    #[test]
    fn synonym_cue_marks_canonical_token() {
        let tokens = seq("the red car moving left");
        let spans = spans_with(AttributeKind::Appearance, &["vehicle"]);
        let mut synonyms = SynonymTable::empty();
        synonyms.insert("vehicle", "car");
        let map = fuzzy_match_spans(&tokens, &spans, AttributeKind::Appearance, &synonyms);
        // Oracle: exhaustive window scan with the same similarity function.
        let expected: Vec<bool> = tokens
            .tokens
            .iter()
            .map(|tok| tokens_match(tok, "vehicle", &synonyms))
            .collect();
        assert_eq!(map.bits, expected);
        assert_eq!(map.bits, vec![false, false, true, false, false]);
    }

    #[test]
    fn near_miss_spelling_matches_at_threshold() {
        let tokens = seq("a pedestrain crossing");
        let spans = spans_with(AttributeKind::Appearance, &["pedestrian"]);
        let map =
            fuzzy_match_spans(&tokens, &spans, AttributeKind::Appearance, &SynonymTable::empty());
        assert_eq!(map.bits, vec![false, true, false]);
    }

    #[test]
    fn empty_cue_list_yields_zero_map() {
        let tokens = seq("the red car");
        let spans = AttributeSpans::default();
        let map = fuzzy_match_spans(&tokens, &spans, AttributeKind::Status, &SynonymTable::empty());
        assert_eq!(map.popcount(), 0);
    }

    fn raw_map(bits: &[u8], kind: MapKind) -> PositiveMap {
        PositiveMap { bits: bits.iter().map(|&b| b != 0).collect(), kind }
    }

    #[test]
    fn public_context_is_complement_of_union() {
        let maps = [
            raw_map(&[0, 1, 1, 0, 0], MapKind::Attribute(AttributeKind::Appearance)),
            raw_map(&[0, 0, 0, 1, 1], MapKind::Attribute(AttributeKind::Status)),
            raw_map(&[0, 0, 0, 0, 0], MapKind::Attribute(AttributeKind::RelationToViewer)),
            raw_map(&[0, 0, 0, 0, 0], MapKind::Attribute(AttributeKind::RelationToOthers)),
        ];
        let public = build_public_context(&maps).unwrap();
        assert_eq!(public.bits, vec![true, false, false, false, false]);

        let zeros = [
            raw_map(&[0, 0, 0], MapKind::Attribute(AttributeKind::Appearance)),
            raw_map(&[0, 0, 0], MapKind::Attribute(AttributeKind::Status)),
            raw_map(&[0, 0, 0], MapKind::Attribute(AttributeKind::RelationToViewer)),
            raw_map(&[0, 0, 0], MapKind::Attribute(AttributeKind::RelationToOthers)),
        ];
        assert_eq!(build_public_context(&zeros).unwrap().popcount(), 3);

        let mut ones = zeros;
        ones[0] = raw_map(&[1, 1, 1], MapKind::Attribute(AttributeKind::Appearance));
        assert_eq!(build_public_context(&ones).unwrap().popcount(), 0);
    }

    #[test]
    fn public_context_rejects_length_mismatch() {
        let maps = [
            raw_map(&[0, 1], MapKind::Attribute(AttributeKind::Appearance)),
            raw_map(&[0], MapKind::Attribute(AttributeKind::Status)),
            raw_map(&[0, 0], MapKind::Attribute(AttributeKind::RelationToViewer)),
            raw_map(&[0, 0], MapKind::Attribute(AttributeKind::RelationToOthers)),
        ];
        assert!(build_public_context(&maps).is_err());
    }

    #[test]
    fn soften_spreads_equal_mass() {
        let map = raw_map(&[0, 1, 1, 0, 0], MapKind::Attribute(AttributeKind::Appearance));
        assert_eq!(soften(&map).probs, vec![0.0, 0.5, 0.5, 0.0, 0.0]);

        let single = raw_map(&[1, 0, 0, 0], MapKind::Attribute(AttributeKind::Appearance));
        assert_eq!(soften(&single).probs, vec![1.0, 0.0, 0.0, 0.0]);

        let empty = raw_map(&[0, 0, 0], MapKind::Attribute(AttributeKind::Status));
        let softened = soften(&empty);
        assert!(softened.empty);
        assert!(softened.probs.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn attribute_mask_concatenates_and_ors() {
        let map_i = raw_map(&[0, 1, 0], MapKind::Attribute(AttributeKind::Status));
        let public = raw_map(&[1, 0, 0], MapKind::PublicContext);
        let mask = build_attribute_mask(&map_i, &public, 2).unwrap();
        assert_eq!(mask.bits, vec![true, true, true, true, false]);

        let empty_attr = raw_map(&[0, 0, 0], MapKind::Attribute(AttributeKind::Status));
        let all_public = raw_map(&[1, 1, 1], MapKind::PublicContext);
        let mask = build_attribute_mask(&empty_attr, &all_public, 2).unwrap();
        assert!(mask.bits.iter().all(|&b| b));

        let mask = build_attribute_mask(&map_i, &public, 0).unwrap();
        assert_eq!(mask.bits, vec![true, true, false]);
    }

    fn full_tiling(expr: &str, cue_sets: [&[&str]; 4]) -> ([PositiveMap; 4], PositiveMap) {
        let tokens = seq(expr);
        let synonyms = SynonymTable::default_classes();
        let mut spans = AttributeSpans::default();
        for (kind, cues) in AttributeKind::ALL.iter().zip(cue_sets.iter()) {
            *spans.get_mut(*kind) = cues.iter().map(|s| s.to_string()).collect();
        }
        let maps: [PositiveMap; 4] = AttributeKind::ALL
            .map(|kind| fuzzy_match_spans(&tokens, &spans, kind, &synonyms));
        let public = build_public_context(&maps).unwrap();
        (maps, public)
    }

    #[test]
    fn attribute_and_public_maps_tile_token_positions() {
        let (maps, public) = full_tiling(
            "the large dark car moving left, on the left, next to a bus",
            [&["large dark car"], &["moving left"], &["on the left"], &["next to a bus"]],
        );
        let len = public.bits.len();
        for j in 0..len {
            let in_attr = maps.iter().any(|m| m.bits[j]);
            assert!(in_attr ^ public.bits[j], "position {j} must be claimed exactly once");
        }
    }

    proptest! {
        #[test]
        fn soften_sums_to_one_on_support(bits in proptest::collection::vec(any::<bool>(), 1..40)) {
            let map = PositiveMap { bits, kind: MapKind::PublicContext };
            let soft = soften(&map);
            let total: f64 = soft.probs.iter().sum();
            if map.popcount() > 0 {
                prop_assert!((total - 1.0).abs() < 1e-9);
                let mass = 1.0 / map.popcount() as f64;
                for (p, b) in soft.probs.iter().zip(&map.bits) {
                    prop_assert_eq!(*p, if *b { mass } else { 0.0 });
                }
            } else {
                prop_assert_eq!(total, 0.0);
                prop_assert!(soft.empty);
            }
        }

        #[test]
        fn cue_order_is_irrelevant(perm in 0usize..6) {
            let tokens = seq("the small light truck moving up near the center");
            let mut cues =
                vec!["small light truck".to_string(), "moving up".to_string(), "truck".to_string()];
            // apply one of six permutations
            cues.rotate_left(perm % 3);
            if perm >= 3 {
                cues.swap(0, 1);
            }
            let mut spans = AttributeSpans::default();
            spans.appearance = cues;
            let map = fuzzy_match_spans(
                &tokens, &spans, AttributeKind::Appearance, &SynonymTable::empty());
            let mut base = AttributeSpans::default();
            base.appearance = vec![
                "small light truck".to_string(), "moving up".to_string(), "truck".to_string()];
            let reference = fuzzy_match_spans(
                &tokens, &base, AttributeKind::Appearance, &SynonymTable::empty());
            prop_assert_eq!(map, reference);
        }

        #[test]
        fn exact_substring_always_found(start in 0usize..8, len in 1usize..4) {
            let tokens = seq("one two three four five six seven eight nine ten");
            let end = (start + len).min(tokens.len());
            let cue = tokens.tokens[start..end].join(" ");
            let spans = spans_with(AttributeKind::Status, &[cue.as_str()]);
            let map = fuzzy_match_spans(
                &tokens, &spans, AttributeKind::Status, &SynonymTable::empty());
            for j in start..end {
                prop_assert!(map.bits[j]);
            }
        }

        #[test]
        fn mask_text_positions_superset_of_inputs(
            attr in proptest::collection::vec(any::<bool>(), 1..20),
            visual_len in 0usize..10,
        ) {
            let n = attr.len();
            let map_i = PositiveMap { bits: attr, kind: MapKind::Attribute(AttributeKind::Status) };
            let others = [
                map_i.clone(),
                PositiveMap { bits: vec![false; n], kind: MapKind::Attribute(AttributeKind::Appearance) },
                PositiveMap { bits: vec![false; n], kind: MapKind::Attribute(AttributeKind::RelationToViewer) },
                PositiveMap { bits: vec![false; n], kind: MapKind::Attribute(AttributeKind::RelationToOthers) },
            ];
            let public = build_public_context(&others).unwrap();
            let mask = build_attribute_mask(&map_i, &public, visual_len).unwrap();
            prop_assert_eq!(mask.bits.len(), visual_len + n);
            for j in 0..n {
                if map_i.bits[j] || public.bits[j] {
                    prop_assert!(mask.bits[visual_len + j]);
                }
            }
            for v in 0..visual_len {
                prop_assert!(mask.bits[v]);
            }
        }
    }
}
