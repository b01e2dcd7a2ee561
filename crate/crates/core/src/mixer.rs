//! Context assembly: place a target function among distractor functions at a
//! controlled position and key every line.
//!
//! Two properties describe where the target sits in the token stream:
//!
//! * **granularity** `n2 / (n1 + n2)`: how small the target (`n1` tokens)
//!   is relative to the whole context (`n2` distractor tokens);
//! * **concentration** `n1 / (last - first + 1)` over the target's token
//!   slots: 1 for a contiguous block, below 1 when fragmented.
//!
//! The mixer always inserts the target as one contiguous block between
//! whole distractor functions, so every assembled context has
//! concentration 1.

use std::collections::HashSet;
use std::fmt;

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DistractorFunction, TokenEstimator};
use crate::seed;
use crate::tasks::TargetSnippet;

/// Number of distinct 6-hex-digit keys.
pub const KEY_SPACE: usize = 1 << 24;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MixError {
    #[error("need at least 2 positions, got {0}")]
    TooFewPositions(usize),
    #[error("position index {index} out of range for {positions} positions")]
    PositionOutOfRange { index: usize, positions: usize },
    #[error("context has {0} lines, more than the {KEY_SPACE} available keys")]
    KeySpaceExhausted(usize),
    #[error("target function has no lines")]
    EmptyTarget,
    #[error("target must have at least one token")]
    EmptyTargetTokens,
    #[error("position vector has no set bits")]
    EmptyPositionVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Origin {
    Target,
    Distractor(String),
    /// Blank line between two functions.
    Separator,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Target => f.write_str("target"),
            Origin::Separator => f.write_str("separator"),
            Origin::Distractor(id) => write!(f, "distractor:{id}"),
        }
    }
}

impl From<Origin> for String {
    fn from(o: Origin) -> String {
        o.to_string()
    }
}

impl TryFrom<String> for Origin {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        match s.as_str() {
            "target" => Ok(Origin::Target),
            "separator" => Ok(Origin::Separator),
            other => other
                .strip_prefix("distractor:")
                .map(|id| Origin::Distractor(id.to_string()))
                .ok_or_else(|| format!("unknown line origin {other:?}")),
        }
    }
}

impl Serialize for Origin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Origin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Origin::try_from(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLine {
    pub key: String,
    pub text: String,
    pub origin: Origin,
}

impl ContextLine {
    /// `"{key} {text}"`, or just the key for an empty line.
    pub fn keyed(&self) -> String {
        if self.text.is_empty() {
            self.key.clone()
        } else {
            format!("{} {}", self.key, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledContext {
    pub lines: Vec<ContextLine>,
    /// Inclusive line range of the target.
    pub target_span: (usize, usize),
    pub position_index: usize,
    pub positions: usize,
    pub distractor_count: usize,
    /// Distractor functions placed before the target.
    pub prefix_count: usize,
    pub n1: u64,
    pub n2: u64,
    pub granularity: Ratio<u64>,
    pub concentration: Ratio<u64>,
}

/// Number of distractors preceding the target at `position_index` of
/// `positions` equally spaced slots: `round(i * n / (positions - 1))`.
pub fn prefix_count(position_index: usize, positions: usize, n: usize) -> usize {
    let denom = positions - 1;
    (2 * position_index * n + denom) / (2 * denom)
}

/// `n2 / (n1 + n2)`.
pub fn granularity(n1: u64, n2: u64) -> Result<Ratio<u64>, MixError> {
    if n1 == 0 {
        return Err(MixError::EmptyTargetTokens);
    }
    Ok(Ratio::new(n2, n1 + n2))
}

/// 0/1 vector over token slots; set bits belong to the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositionVector {
    pub bits: Vec<bool>,
    pub n1: u64,
    pub n2: u64,
}

impl PositionVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let n1 = bits.iter().filter(|b| **b).count() as u64;
        let n2 = bits.len() as u64 - n1;
        Self { bits, n1, n2 }
    }

    /// Token-level position vector for an assembled context.
    pub fn from_context(ctx: &AssembledContext, tokens: &dyn TokenEstimator) -> Self {
        let mut bits = Vec::new();
        for line in &ctx.lines {
            let n = tokens.count(&line.text);
            bits.extend(std::iter::repeat_n(line.origin == Origin::Target, n));
        }
        Self::from_bits(bits)
    }
}

/// `n1 / (max - min + 1)` over the set bits; exactly 1 iff contiguous.
pub fn concentration(pos: &PositionVector) -> Result<Ratio<u64>, MixError> {
    let first = pos.bits.iter().position(|b| *b);
    let last = pos.bits.iter().rposition(|b| *b);
    match (first, last) {
        (Some(lo), Some(hi)) => Ok(Ratio::new(pos.n1, (hi - lo + 1) as u64)),
        _ => Err(MixError::EmptyPositionVector),
    }
}

fn draw_keys(count: usize, seed: u64) -> Result<Vec<String>, MixError> {
    if count > KEY_SPACE {
        return Err(MixError::KeySpaceExhausted(count));
    }
    let mut rng = seed::rng(seed);
    let mut seen = HashSet::with_capacity(count);
    let mut keys = Vec::with_capacity(count);
    while keys.len() < count {
        let k: u32 = rng.gen_range(0..KEY_SPACE as u32);
        if seen.insert(k) {
            keys.push(format!("{k:06x}"));
        }
    }
    Ok(keys)
}

fn source_lines(src: &str) -> impl Iterator<Item = &str> {
    src.split('\n')
}

/// Assemble `target` among `distractors` at `position_index` of `positions`.
pub fn mix(
    target: &TargetSnippet,
    distractors: &[DistractorFunction],
    position_index: usize,
    positions: usize,
    seed: u64,
    tokens: &dyn TokenEstimator,
) -> Result<AssembledContext, MixError> {
    if positions < 2 {
        return Err(MixError::TooFewPositions(positions));
    }
    if position_index >= positions {
        return Err(MixError::PositionOutOfRange {
            index: position_index,
            positions,
        });
    }
    if target.source.is_empty() {
        return Err(MixError::EmptyTarget);
    }
    let n = distractors.len();
    let prefix = prefix_count(position_index, positions, n);

    let mut blocks: Vec<(&str, Origin)> = Vec::with_capacity(n + 1);
    for d in &distractors[..prefix] {
        blocks.push((&d.source, Origin::Distractor(d.id.clone())));
    }
    blocks.push((&target.source, Origin::Target));
    for d in &distractors[prefix..] {
        blocks.push((&d.source, Origin::Distractor(d.id.clone())));
    }

    let mut raw: Vec<(String, Origin)> = Vec::new();
    let mut span = (0, 0);
    for (i, (src, origin)) in blocks.into_iter().enumerate() {
        if i > 0 {
            raw.push((String::new(), Origin::Separator));
        }
        let first = raw.len();
        let is_target = origin == Origin::Target;
        raw.extend(source_lines(src).map(|l| (l.to_string(), origin.clone())));
        if is_target {
            span = (first, raw.len() - 1);
        }
    }

    let keys = draw_keys(raw.len(), seed)?;
    let lines: Vec<ContextLine> = raw
        .into_iter()
        .zip(keys)
        .map(|((text, origin), key)| ContextLine { key, text, origin })
        .collect();

    let n1 = tokens.count(&target.source) as u64;
    let n2: u64 = distractors.iter().map(|d| tokens.count(&d.source) as u64).sum();
    let mut ctx = AssembledContext {
        lines,
        target_span: span,
        position_index,
        positions,
        distractor_count: n,
        prefix_count: prefix,
        n1,
        n2,
        granularity: granularity(n1, n2)?,
        concentration: Ratio::from_integer(1),
    };
    ctx.concentration = concentration(&PositionVector::from_context(&ctx, tokens))?;
    Ok(ctx)
}

/// Sources recovered from a context, keys removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stripped {
    pub target: String,
    /// `(id, source)` in context order.
    pub distractors: Vec<(String, String)>,
}

/// Undo [`mix`]: drop keys and separators and regroup lines by origin.
pub fn strip(ctx: &AssembledContext) -> Stripped {
    let mut target: Vec<&str> = Vec::new();
    let mut distractors: Vec<(String, Vec<&str>)> = Vec::new();
    let mut prev: Option<&Origin> = None;
    for line in &ctx.lines {
        match &line.origin {
            Origin::Target => target.push(&line.text),
            Origin::Distractor(id) => {
                if prev != Some(&line.origin) {
                    distractors.push((id.clone(), Vec::new()));
                }
                distractors
                    .last_mut()
                    .expect("pushed above")
                    .1
                    .push(&line.text);
            }
            Origin::Separator => {}
        }
        prev = Some(&line.origin);
    }
    Stripped {
        target: target.join("\n"),
        distractors: distractors
            .into_iter()
            .map(|(id, lines)| (id, lines.join("\n")))
            .collect(),
    }
}

impl AssembledContext {
    /// The code block shown to the model, optionally with line keys.
    pub fn code_block(&self, with_keys: bool) -> String {
        let lines: Vec<String> = if with_keys {
            self.lines.iter().map(ContextLine::keyed).collect()
        } else {
            self.lines.iter().map(|l| l.text.clone()).collect()
        };
        lines.join("\n")
    }

    pub fn target_lines(&self) -> &[ContextLine] {
        &self.lines[self.target_span.0..=self.target_span.1]
    }

    pub fn line_by_key(&self, key: &str) -> Option<&ContextLine> {
        self.lines.iter().find(|l| l.key == key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SimpleTokenizer;
    use proptest::prelude::*;

    fn target(src: &str) -> TargetSnippet {
        TargetSnippet::new("t", src)
    }

    fn distractors(n: usize) -> Vec<DistractorFunction> {
        (0..n)
            .map(|i| DistractorFunction::new(format!("d{i}"), format!("def g{i}(a):\n    return a * {i}")))
            .collect()
    }

    #[test]
    fn equal_spacing_endpoints_and_midpoint() {
        let counts: Vec<usize> = (0..11).map(|i| prefix_count(i, 11, 80)).collect();
        assert_eq!(counts, vec![0, 8, 16, 24, 32, 40, 48, 56, 64, 72, 80]);
        assert_eq!(prefix_count(0, 3, 5), 0);
        assert_eq!(prefix_count(1, 3, 5), 3);
        assert_eq!(prefix_count(2, 3, 5), 5);
    }

    #[test]
    fn prefix_is_monotone() {
        for n in 0..50 {
            for p in 2..15 {
                let v: Vec<usize> = (0..p).map(|i| prefix_count(i, p, n)).collect();
                assert!(v.windows(2).all(|w| w[0] <= w[1]));
                assert_eq!((v[0], v[p - 1]), (0, n));
            }
        }
    }

    #[test]
    fn granularity_values() {
        assert_eq!(granularity(200, 0).unwrap(), Ratio::from_integer(0));
        assert_eq!(granularity(200, 200).unwrap(), Ratio::new(1, 2));
        let g = granularity(200, 16_000).unwrap();
        assert_eq!(g, Ratio::new(80, 81));
        assert!((*g.numer() as f64 / *g.denom() as f64 - 0.988).abs() < 1e-3);
        assert_eq!(granularity(0, 5), Err(MixError::EmptyTargetTokens));
    }

    #[test]
    fn concentration_values() {
        let block = PositionVector::from_bits([vec![false; 7], vec![true; 50], vec![false; 3]].concat());
        assert_eq!(concentration(&block).unwrap(), Ratio::from_integer(1));
        let gap = PositionVector::from_bits(vec![true, false, true]);
        assert_eq!(concentration(&gap).unwrap(), Ratio::new(2, 3));
        let one = PositionVector::from_bits(vec![false, true, false]);
        assert_eq!(concentration(&one).unwrap(), Ratio::from_integer(1));
        let none = PositionVector::from_bits(vec![false; 4]);
        assert_eq!(concentration(&none), Err(MixError::EmptyPositionVector));
    }

    #[test]
    fn mix_places_and_keys() {
        let t = target("def f(x):\n    return x");
        let ds = distractors(80);
        let ctx = mix(&t, &ds, 5, 11, 1, &SimpleTokenizer).unwrap();
        assert_eq!(ctx.prefix_count, 40);
        let before = ctx.lines[..ctx.target_span.0]
            .iter()
            .filter(|l| matches!(l.origin, Origin::Distractor(_)) && l.text.starts_with("def "))
            .count();
        assert_eq!(before, 40);
        assert_eq!(ctx.concentration, Ratio::from_integer(1));
        let keys: HashSet<_> = ctx.lines.iter().map(|l| &l.key).collect();
        assert_eq!(keys.len(), ctx.lines.len());
        assert!(ctx
            .lines
            .iter()
            .all(|l| l.key.len() == 6 && l.key.chars().all(|c| matches!(c, '0'..='9' | 'a'..='f'))));
        assert_eq!(strip(&ctx).target, t.source);
    }

    #[test]
    fn mix_rejects_bad_positions() {
        let t = target("def f(x):\n    return x");
        let ds = distractors(3);
        assert_eq!(
            mix(&t, &ds, 11, 11, 0, &SimpleTokenizer),
            Err(MixError::PositionOutOfRange { index: 11, positions: 11 })
        );
        assert_eq!(mix(&t, &ds, 0, 1, 0, &SimpleTokenizer), Err(MixError::TooFewPositions(1)));
    }

    #[test]
    fn rekeying_does_not_change_sources() {
        let t = target("def f(x):\n\n    return x\n");
        let ds = distractors(6);
        let a = strip(&mix(&t, &ds, 2, 4, 1, &SimpleTokenizer).unwrap());
        let b = strip(&mix(&t, &ds, 2, 4, 99, &SimpleTokenizer).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.target, t.source);
    }

    #[test]
    fn context_json_shape() {
        let ctx = mix(&target("def f(x):\n    return x"), &distractors(1), 0, 2, 3, &SimpleTokenizer).unwrap();
        let v = serde_json::to_value(&ctx).unwrap();
        assert_eq!(v["lines"][0]["origin"], "target");
        assert_eq!(v["lines"][2]["origin"], "separator");
        assert_eq!(v["lines"][3]["origin"], "distractor:d0");
        let back: AssembledContext = serde_json::from_value(v).unwrap();
        assert_eq!(back, ctx);
    }

    fn arb_source() -> impl Strategy<Value = String> {
        prop::collection::vec("[ -~]{0,30}", 1..8).prop_map(|lines| {
            let mut s = String::from("def h(x):");
            for l in lines {
                s.push('\n');
                s.push_str(&l);
            }
            s
        })
    }

    proptest! {
        #[test]
        fn strip_inverts_mix(
            tsrc in arb_source(),
            dsrcs in prop::collection::vec(arb_source(), 1..12),
            pos_frac in 0.0f64..1.0,
            positions in 2usize..12,
            seed in any::<u64>(),
        ) {
            let t = target(&tsrc);
            let ds: Vec<_> = dsrcs
                .iter()
                .enumerate()
                .map(|(i, s)| DistractorFunction::new(format!("d{i}"), s.clone()))
                .collect();
            let idx = ((pos_frac * positions as f64) as usize).min(positions - 1);
            let ctx = mix(&t, &ds, idx, positions, seed, &SimpleTokenizer).unwrap();
            let s = strip(&ctx);
            prop_assert_eq!(&s.target, &tsrc);
            let got: Vec<_> = s.distractors.iter().map(|(_, src)| src.clone()).collect();
            prop_assert_eq!(got, dsrcs);
            prop_assert_eq!(ctx.concentration, Ratio::from_integer(1));
            prop_assert_eq!(ctx.granularity, Ratio::new(ctx.n2, ctx.n1 + ctx.n2));
        }
    }
}
