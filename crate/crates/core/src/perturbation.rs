//! Interpretable features, coalition masks and perturbation sample weights.
//!
//! A [`FeatureSegmentation`] splits raw text into ordered, non-overlapping
//! segments (words, sentences or in-context example blocks). A [`Mask`] keeps
//! or deletes each segment; [`apply_mask`] renders the surviving segments back
//! into text using the original separators.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default LIME kernel width for the ×100 scaled cosine distance.
pub const DEFAULT_KERNEL_WIDTH: f64 = 25.0;

/// Default number of perturbation samples per explanation.
pub const DEFAULT_SAMPLES: usize = 1000;

/// Largest feature count accepted by the exhaustive strategy.
pub const MAX_EXHAUSTIVE_FEATURES: usize = 24;

/// Default delimiter between in-context examples.
pub const DEFAULT_EXAMPLE_DELIMITER: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SegmentationMode {
    Word,
    Sentence,
    ExampleBlock { delimiter: String },
}

impl SegmentationMode {
    pub fn example_block() -> Self {
        SegmentationMode::ExampleBlock { delimiter: DEFAULT_EXAMPLE_DELIMITER.to_string() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SegmentationMode::Word => "word",
            SegmentationMode::Sentence => "sentence",
            SegmentationMode::ExampleBlock { .. } => "example-block",
        }
    }

    /// Parses `word`, `sentence` or `example-block`; example blocks use the
    /// default delimiter.
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "word" => Some(SegmentationMode::Word),
            "sentence" => Some(SegmentationMode::Sentence),
            "example-block" => Some(SegmentationMode::example_block()),
            _ => None,
        }
    }
}

impl fmt::Display for SegmentationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Byte range `[start, end)` of one feature in the raw input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub text: String,
}

/// Ordered, non-overlapping segments covering the interpretable features of a
/// text. Everything outside the segments is separator text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSegmentation {
    pub mode: SegmentationMode,
    raw: String,
    segments: Vec<Segment>,
}

impl FeatureSegmentation {
    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn n(&self) -> usize {
        self.segments.len()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().map(|s| s.text.as_str())
    }

    /// Separator text before segment `i`; index `n` is the trailing text.
    pub fn separator_before(&self, i: usize) -> &str {
        let start = if i == 0 { 0 } else { self.segments[i - 1].end };
        let end = if i == self.segments.len() { self.raw.len() } else { self.segments[i].start };
        &self.raw[start..end]
    }
}

/// Splits `text` into interpretable features.
pub fn segment(text: &str, mode: &SegmentationMode) -> Result<FeatureSegmentation> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    let ranges = match mode {
        SegmentationMode::Word => word_ranges(text),
        SegmentationMode::Sentence => sentence_ranges(text),
        SegmentationMode::ExampleBlock { delimiter } => {
            if delimiter.is_empty() {
                return Err(Error::InvalidArgument("example delimiter is empty".to_string()));
            }
            let ranges = block_ranges(text, delimiter);
            if ranges.len() < 2 {
                return Err(Error::DegenerateSegmentation(delimiter.clone()));
            }
            ranges
        }
    };
    let segments = ranges
        .into_iter()
        .map(|(start, end)| Segment { start, end, text: text[start..end].to_string() })
        .collect();
    Ok(FeatureSegmentation { mode: mode.clone(), raw: text.to_string(), segments })
}

fn word_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_closing(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '\u{201d}' | '\u{2019}')
}

fn sentence_ranges(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        while i < chars.len() && chars[i].1.is_whitespace() {
            i += 1;
        }
        if i == chars.len() {
            break;
        }
        let start = chars[i].0;
        let mut end = text.len();
        while i < chars.len() {
            if is_terminal(chars[i].1) {
                let mut j = i;
                while j < chars.len() && (is_terminal(chars[j].1) || is_closing(chars[j].1)) {
                    j += 1;
                }
                if j == chars.len() || chars[j].1.is_whitespace() {
                    end = if j == chars.len() { text.len() } else { chars[j].0 };
                    i = j;
                    break;
                }
                i = j;
            } else {
                i += 1;
            }
        }
        // Trailing text without terminal punctuation: trim trailing whitespace.
        let end = start + text[start..end].trim_end().len();
        out.push((start, end));
    }
    out
}

fn block_ranges(text: &str, delimiter: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut push = |from: usize, to: usize| {
        let piece = &text[from..to];
        let lead = piece.len() - piece.trim_start().len();
        let trimmed = piece.trim();
        if !trimmed.is_empty() {
            out.push((from + lead, from + lead + trimmed.len()));
        }
    };
    let mut from = 0;
    for (pos, _) in text.match_indices(delimiter) {
        push(from, pos);
        from = pos + delimiter.len();
    }
    push(from, text.len());
    out
}

/// Binary coalition vector over interpretable features; `true` keeps a feature.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mask {
    bits: Vec<bool>,
    ones: usize,
}

impl Mask {
    pub fn new(bits: Vec<bool>) -> Self {
        let ones = bits.iter().filter(|b| **b).count();
        Mask { bits, ones }
    }

    pub fn full(n: usize) -> Self {
        Mask { bits: vec![true; n], ones: n }
    }

    pub fn empty(n: usize) -> Self {
        Mask { bits: vec![false; n], ones: 0 }
    }

    /// Bit `i` of `code` is feature `i`.
    pub fn from_index(code: u64, n: usize) -> Self {
        Mask::new((0..n).map(|i| code >> i & 1 == 1).collect())
    }

    /// Mask keeping every feature except those in `removed`.
    pub fn without(n: usize, removed: &[usize]) -> Self {
        let mut bits = vec![true; n];
        for &i in removed {
            bits[i] = false;
        }
        Mask::new(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.ones
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn is_full(&self) -> bool {
        self.ones == self.bits.len()
    }

    pub fn is_all_zero(&self) -> bool {
        self.ones == 0
    }

    pub fn complement(&self) -> Self {
        Mask { bits: self.bits.iter().map(|b| !b).collect(), ones: self.bits.len() - self.ones }
    }

    /// Compact `0`/`1` string, feature 0 first.
    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|b| if *b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(Error::InvalidArgument(format!("bad mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Mask::new)
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}

impl Serialize for Mask {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_bitstring())
    }
}

impl<'de> Deserialize<'de> for Mask {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Mask::from_bitstring(&s).map_err(serde::de::Error::custom)
    }
}

/// Renders the segments kept by `mask`.
///
/// Consecutive survivors are joined by the separator that originally followed
/// the earlier one; leading and trailing text survive only with the first and
/// last segment respectively. The all-zero mask renders as the empty string.
pub fn apply_mask(seg: &FeatureSegmentation, mask: &Mask) -> Result<String> {
    if mask.len() != seg.n() {
        return Err(Error::MaskShape { expected: seg.n(), got: mask.len() });
    }
    let mut out = String::with_capacity(seg.raw.len());
    let mut last: Option<usize> = None;
    for (i, s) in seg.segments.iter().enumerate() {
        if !mask.get(i) {
            continue;
        }
        match last {
            None if i == 0 => out.push_str(seg.separator_before(0)),
            None => {}
            Some(prev) => out.push_str(seg.separator_before(prev + 1)),
        }
        out.push_str(&s.text);
        last = Some(i);
    }
    if last == Some(seg.n() - 1) {
        out.push_str(seg.separator_before(seg.n()));
    }
    Ok(out)
}

/// Mask sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    /// Removal count uniform in `1..=n`, then a uniform subset of that size.
    LimeUniformSize,
    /// Coalition sizes drawn proportionally to the Shapley kernel mass.
    ShapKernel,
    /// Every one of the `2^n` masks.
    Exhaustive,
}

/// Whether `sample_masks` enumerates every coalition for these arguments.
pub fn is_exhaustive(n: usize, budget: usize, strategy: SamplingStrategy) -> bool {
    match strategy {
        SamplingStrategy::Exhaustive => true,
        SamplingStrategy::LimeUniformSize => false,
        SamplingStrategy::ShapKernel => n < 64 && (1u64 << n) - 2 <= budget as u64,
    }
}

/// Draws coalition masks for `n` features.
///
/// `budget` counts sampled masks; LIME additionally receives the all-ones mask
/// and kernel SHAP receives both the all-ones and the all-zero mask. When
/// kernel SHAP can enumerate every proper coalition within budget it does so.
pub fn sample_masks(n: usize, budget: usize, strategy: SamplingStrategy, seed: u64) -> Result<Vec<Mask>> {
    if n == 0 {
        return Err(Error::InvalidArgument("feature count must be at least 1".to_string()));
    }
    if budget == 0 && strategy != SamplingStrategy::Exhaustive {
        return Err(Error::InvalidArgument("sample budget must be at least 1".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match strategy {
        SamplingStrategy::Exhaustive => {
            if n > MAX_EXHAUSTIVE_FEATURES {
                return Err(Error::SizeLimit { what: "exhaustive feature count", got: n, max: MAX_EXHAUSTIVE_FEATURES });
            }
            Ok((0..1u64 << n).map(|code| Mask::from_index(code, n)).collect())
        }
        SamplingStrategy::LimeUniformSize => {
            let mut masks = Vec::with_capacity(budget + 1);
            for _ in 0..budget {
                let removed = rng.gen_range(1..=n);
                let picked = index::sample(&mut rng, n, removed);
                masks.push(Mask::without(n, &picked.into_vec()));
            }
            masks.push(Mask::full(n));
            Ok(masks)
        }
        SamplingStrategy::ShapKernel => {
            if budget < 2 {
                return Err(Error::InsufficientBudget(budget));
            }
            let mut masks = Vec::new();
            if is_exhaustive(n, budget, strategy) {
                masks.extend((1..(1u64 << n) - 1).map(|code| Mask::from_index(code, n)));
            } else {
                let cumulative = kernel_size_cdf(n);
                for _ in 0..budget {
                    let u: f64 = rng.gen();
                    let size = 1 + cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1);
                    let kept = index::sample(&mut rng, n, size).into_vec();
                    let mut bits = vec![false; n];
                    for i in kept {
                        bits[i] = true;
                    }
                    masks.push(Mask::new(bits));
                }
            }
            masks.push(Mask::full(n));
            masks.push(Mask::empty(n));
            Ok(masks)
        }
    }
}

/// Cumulative distribution over coalition sizes `1..n-1` proportional to the
/// total Shapley kernel mass of each size, `(n-1) / (s (n-s))`.
fn kernel_size_cdf(n: usize) -> Vec<f64> {
    let mass: Vec<f64> = (1..n).map(|s| 1.0 / (s as f64 * (n - s) as f64)).collect();
    let total: f64 = mass.iter().sum();
    let mut acc = 0.0;
    mass.iter()
        .map(|m| {
            acc += m / total;
            acc
        })
        .collect()
}

/// LIME exponential kernel on the ×100 scaled cosine distance to the all-ones
/// vector.
pub fn lime_weight(mask: &Mask, kernel_width: f64) -> f64 {
    let n = mask.len() as f64;
    let ones = mask.ones() as f64;
    let cosine_distance = if mask.ones() == 0 { 1.0 } else { 1.0 - ones / libm::sqrt(n * ones) };
    let d = 100.0 * cosine_distance;
    libm::exp(-(d * d) / (kernel_width * kernel_width))
}

/// `C(n, k)` as a float.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Shapley kernel weight `(n-1) / (C(n,|z|) |z| (n-|z|))` of a proper coalition.
pub fn shap_weight(mask: &Mask) -> Result<f64> {
    let n = mask.len();
    let s = mask.ones();
    if s == 0 || s == n {
        return Err(Error::InfiniteWeight { ones: s, n });
    }
    Ok((n - 1) as f64 / (binomial(n, s) * s as f64 * (n - s) as f64))
}

/// A mask with its regression weight and rendered text.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub mask: Mask,
    pub weight: f64,
    pub perturbed_text: String,
}
