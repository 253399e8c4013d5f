//! Static and dynamic negation prompts, and the repulsive preference term.
//!
//! Dynamic negation starts from modifier-attribute pairs (MAPs) such as
//! `red | jacket` extracted from the positive prompt. MAPs are ranked by
//! modifier saliency, then each attribute takes its neighbour's modifier.
//! Sided MAPs also yield a mirrored copy, and each attribute can name
//! commonly confused objects that should not appear.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::preference::{PreferenceError, PreferenceSignal};
use crate::protocol::{AnalyzeRequest, AnalyzeResponse, HttpClient, ProtocolError};

pub const DEFAULT_STATIC_NEGATIONS: [&str; 10] = [
    "blurry",
    "oversaturated",
    "noisy",
    "lowres",
    "deformed",
    "extra limbs",
    "bad anatomy",
    "watermark",
    "text",
    "jpeg artifacts",
];

pub fn default_static_negations() -> Vec<String> {
    DEFAULT_STATIC_NEGATIONS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Error)]
pub enum NegationError {
    #[error("static negation list is empty")]
    EmptyStatic,
    #[error("llm client: {0}")]
    Client(String),
    #[error("negation asset: {0}")]
    Asset(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spatial {
    Left,
    Right,
    #[default]
    None,
}

impl Spatial {
    pub fn reversed(self) -> Spatial {
        match self {
            Spatial::Left => Spatial::Right,
            Spatial::Right => Spatial::Left,
            Spatial::None => Spatial::None,
        }
    }

    fn word(self) -> Option<&'static str> {
        match self {
            Spatial::Left => Some("left"),
            Spatial::Right => Some("right"),
            Spatial::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModifierAttributePair {
    pub modifier: String,
    pub attribute: String,
    #[serde(default)]
    pub spatial: Spatial,
    /// Body part named in the spatial phrase, e.g. `hand`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
    /// Byte range of `modifier … attribute` in the source prompt.
    pub span: (usize, usize),
}

impl ModifierAttributePair {
    pub fn new(modifier: &str, attribute: &str) -> Self {
        Self {
            modifier: modifier.into(),
            attribute: attribute.into(),
            spatial: Spatial::None,
            anchor: None,
            span: (0, 0),
        }
    }

    pub fn with_spatial(mut self, spatial: Spatial, anchor: Option<&str>) -> Self {
        self.spatial = spatial;
        self.anchor = anchor.map(str::to_string);
        self
    }
}

impl fmt::Display for ModifierAttributePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.modifier, self.attribute)?;
        if let Some(side) = self.spatial.word() {
            write!(f, " on the {side}")?;
            if let Some(anchor) = &self.anchor {
                write!(f, " {anchor}")?;
            }
        }
        Ok(())
    }
}

/// Garment and accessory nouns recognized as attributes.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    attributes: HashSet<String>,
    longest: usize,
    modifiers: HashSet<String>,
}

impl Vocabulary {
    pub fn new<I: IntoIterator<Item = String>>(attributes: I, modifiers: I) -> Self {
        let attributes: HashSet<String> = attributes.into_iter().map(|a| a.to_lowercase()).collect();
        let longest = attributes.iter().map(|a| a.split_whitespace().count()).max().unwrap_or(1);
        let modifiers = modifiers.into_iter().map(|m| m.to_lowercase()).collect();
        Self { attributes, longest, modifiers }
    }

    pub fn bundled() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let garments: Vec<String> =
                serde_json::from_str(include_str!("../assets/garments.json")).expect("bundled garments");
            let lexicon = RuleBasedClient::bundled().saliency.keys().cloned().collect();
            Vocabulary::new(garments, lexicon)
        })
    }

    pub fn contains(&self, attribute: &str) -> bool {
        self.attributes.contains(&attribute.to_lowercase())
    }
}

#[derive(Clone, Copy, Debug)]
struct Token<'a> {
    text: &'a str,
    start: usize,
    end: usize,
}

const CLAUSE_BREAKS: [&str; 4] = ["and", "with", "wearing", "plus"];
const DETERMINERS: [&str; 10] = ["a", "an", "the", "some", "pair", "of", "his", "her", "their", "its"];

fn clauses(text: &str) -> Vec<Vec<Token<'_>>> {
    let mut out = vec![Vec::new()];
    let mut idx = 0;
    for word in text.split_inclusive(char::is_whitespace) {
        let start = idx;
        idx += word.len();
        let trimmed = word.trim_end();
        let core = trimmed.trim_end_matches([',', ';', '.', ':', '!', '?']);
        let breaks = core.len() < trimmed.len();
        let lead = core.len() - core.trim_start_matches(['(', '"', '\'']).len();
        let core = &core[lead..];
        if !core.is_empty() {
            if CLAUSE_BREAKS.contains(&core.to_lowercase().as_str()) {
                out.push(Vec::new());
            } else {
                let s = start + lead;
                out.last_mut().expect("never empty").push(Token { text: core, start: s, end: s + core.len() });
            }
        }
        if breaks {
            out.push(Vec::new());
        }
    }
    out.retain(|c| !c.is_empty());
    out
}

fn lower(t: &Token<'_>) -> String {
    t.text.to_lowercase()
}

/// Splits a trailing `on the left hand` style phrase off a clause.
fn split_spatial<'a, 'b>(tokens: &'b [Token<'a>]) -> (&'b [Token<'a>], Spatial, Option<String>) {
    let Some(on) = tokens.iter().rposition(|t| lower(t) == "on") else { return (tokens, Spatial::None, None) };
    let tail = &tokens[on + 1..];
    let mut rest = tail;
    if let Some(first) = rest.first() {
        if DETERMINERS.contains(&lower(first).as_str()) {
            rest = &rest[1..];
        }
    }
    let side = match rest.first().map(lower).as_deref() {
        Some("left") => Spatial::Left,
        Some("right") => Spatial::Right,
        _ => return (tokens, Spatial::None, None),
    };
    let anchor = match &rest[1..] {
        [] => None,
        [a] => Some(lower(a)),
        _ => return (tokens, Spatial::None, None),
    };
    (&tokens[..on], side, anchor)
}

/// Rule-based MAP extraction with the bundled vocabulary.
pub fn extract_maps(text: &str) -> Vec<ModifierAttributePair> {
    extract_maps_with(text, Vocabulary::bundled())
}

pub fn extract_maps_with(text: &str, vocab: &Vocabulary) -> Vec<ModifierAttributePair> {
    let mut maps = Vec::new();
    for clause in clauses(text) {
        let (body, spatial, anchor) = split_spatial(&clause);
        let skip = body.iter().take_while(|t| DETERMINERS.contains(&lower(t).as_str())).count();
        let body = &body[skip..];
        if body.len() < 2 {
            continue;
        }
        let words: Vec<String> = body.iter().map(lower).collect();
        // longest vocabulary suffix is the attribute
        let known = (1..=vocab.longest.min(body.len() - 1))
            .rev()
            .find(|&k| vocab.attributes.contains(&words[body.len() - k..].join(" ")));
        let split = match known {
            Some(k) => body.len() - k,
            // free-form: a run of lexicon modifiers followed by a short noun phrase
            None => {
                let run = words.iter().take_while(|w| vocab.modifiers.contains(*w)).count();
                if run == 0 || run == body.len() || body.len() - run > 3 {
                    continue;
                }
                run
            }
        };
        let (m0, m1) = (body[0].start, body[split - 1].end);
        let (a0, a1) = (body[split].start, body[body.len() - 1].end);
        maps.push(ModifierAttributePair {
            modifier: text[m0..m1].to_string(),
            attribute: text[a0..a1].to_string(),
            spatial,
            anchor: anchor.clone(),
            span: (m0, a1),
        });
    }
    maps
}

/// Saliency ranking and irrelevant-element estimation.
pub trait LlmClient: Send + Sync {
    fn name(&self) -> &str;
    /// One saliency value per MAP, higher is more visually dominant.
    fn saliency(&self, prompt: &str, maps: &[ModifierAttributePair]) -> Result<Vec<f64>, NegationError>;
    /// Objects likely to be confused with the prompt's attributes.
    fn irrelevant(&self, prompt: &str, maps: &[ModifierAttributePair]) -> Result<Vec<String>, NegationError>;
}

/// Deterministic client backed by a saliency lexicon and a confusable table.
#[derive(Clone, Debug)]
pub struct RuleBasedClient {
    pub saliency: BTreeMap<String, f64>,
    pub confusables: BTreeMap<String, Vec<String>>,
}

impl RuleBasedClient {
    pub fn bundled() -> &'static RuleBasedClient {
        static CLIENT: OnceLock<RuleBasedClient> = OnceLock::new();
        CLIENT.get_or_init(|| RuleBasedClient {
            saliency: serde_json::from_str(include_str!("../assets/saliency.json")).expect("bundled lexicon"),
            confusables: serde_json::from_str(include_str!("../assets/confusables.json")).expect("bundled confusables"),
        })
    }

    pub fn from_files(saliency: &Path, confusables: &Path) -> Result<Self, NegationError> {
        let client = Self {
            saliency: serde_json::from_str(&std::fs::read_to_string(saliency)?)?,
            confusables: serde_json::from_str(&std::fs::read_to_string(confusables)?)?,
        };
        if client.saliency.values().any(|v| !v.is_finite()) {
            return Err(NegationError::Asset("saliency values must be finite".into()));
        }
        Ok(client)
    }

    /// Highest lexicon score among the modifier's words; unknown words score 0.
    pub fn modifier_saliency(&self, modifier: &str) -> f64 {
        modifier
            .split(|c: char| c.is_whitespace() || c == '-')
            .filter_map(|w| self.saliency.get(&w.to_lowercase()))
            .fold(0.0, |a, &b| f64::max(a, b))
    }
}

impl LlmClient for RuleBasedClient {
    fn name(&self) -> &str {
        "rule-based"
    }

    fn saliency(&self, _: &str, maps: &[ModifierAttributePair]) -> Result<Vec<f64>, NegationError> {
        Ok(maps.iter().map(|m| self.modifier_saliency(&m.modifier)).collect())
    }

    fn irrelevant(&self, _: &str, maps: &[ModifierAttributePair]) -> Result<Vec<String>, NegationError> {
        Ok(maps.iter().filter_map(|m| self.confusables.get(&m.attribute.to_lowercase())).flatten().cloned().collect())
    }
}

/// Client behind `POST /analyze`.
#[derive(Clone, Debug)]
pub struct RemoteLlmClient {
    client: HttpClient,
}

impl RemoteLlmClient {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self { client: HttpClient::new(base_url, timeout) }
    }

    fn analyze(&self, prompt: &str) -> Result<AnalyzeResponse, NegationError> {
        Ok(self.client.post_json("/analyze", &AnalyzeRequest { prompt: prompt.to_string() })?)
    }
}

impl LlmClient for RemoteLlmClient {
    fn name(&self) -> &str {
        "remote"
    }

    fn saliency(&self, prompt: &str, maps: &[ModifierAttributePair]) -> Result<Vec<f64>, NegationError> {
        let resp = self.analyze(prompt)?;
        maps.iter()
            .map(|m| {
                resp.maps
                    .iter()
                    .find(|r| {
                        r.modifier.eq_ignore_ascii_case(&m.modifier) && r.attribute.eq_ignore_ascii_case(&m.attribute)
                    })
                    .map(|r| r.saliency)
                    .ok_or_else(|| NegationError::Client(format!("no saliency returned for `{m}`")))
            })
            .collect()
    }

    fn irrelevant(&self, prompt: &str, _: &[ModifierAttributePair]) -> Result<Vec<String>, NegationError> {
        Ok(self.analyze(prompt)?.irrelevant)
    }
}

/// Descending saliency, ties by attribute. Falls back to the bundled rules
/// when the client fails, recording a warning.
pub fn rank_saliency(
    prompt: &str,
    maps: &[ModifierAttributePair],
    client: &dyn LlmClient,
    warnings: &mut Vec<String>,
) -> Vec<ModifierAttributePair> {
    let scores = match client.saliency(prompt, maps) {
        Ok(s) if s.len() == maps.len() && s.iter().all(|v| v.is_finite()) => s,
        Ok(s) => {
            warnings.push(format!(
                "{} returned {} saliency values for {} MAPs; using rules",
                client.name(),
                s.len(),
                maps.len()
            ));
            rule_saliency(maps)
        }
        Err(e) => {
            warnings.push(format!("{} saliency failed ({e}); using rules", client.name()));
            rule_saliency(maps)
        }
    };
    let mut order: Vec<usize> = (0..maps.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| maps[a].attribute.cmp(&maps[b].attribute)));
    order.into_iter().map(|i| maps[i].clone()).collect()
}

fn rule_saliency(maps: &[ModifierAttributePair]) -> Vec<f64> {
    RuleBasedClient::bundled().saliency("", maps).expect("rule client is infallible")
}

/// Each attribute takes the modifier of the next MAP, cyclically.
pub fn recombine_maps(ordered: &[ModifierAttributePair]) -> Vec<ModifierAttributePair> {
    let n = ordered.len();
    (0..n)
        .map(|i| ModifierAttributePair { modifier: ordered[(i + 1) % n].modifier.clone(), ..ordered[i].clone() })
        .collect()
}

pub fn reverse_spatial(map: &ModifierAttributePair) -> ModifierAttributePair {
    ModifierAttributePair { spatial: map.spatial.reversed(), ..map.clone() }
}

/// Confusable objects for the MAPs' attributes, first occurrence kept.
pub fn irrelevant_elements(
    prompt: &str,
    maps: &[ModifierAttributePair],
    client: &dyn LlmClient,
    warnings: &mut Vec<String>,
) -> Vec<String> {
    let raw = client.irrelevant(prompt, maps).unwrap_or_else(|e| {
        warnings.push(format!("{} irrelevant-element estimate failed ({e}); using rules", client.name()));
        RuleBasedClient::bundled().irrelevant(prompt, maps).expect("rule client is infallible")
    });
    let mut seen = HashSet::new();
    raw.into_iter().filter(|s| !s.trim().is_empty() && seen.insert(s.to_lowercase())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegationSet {
    pub prompt: String,
    pub maps: Vec<ModifierAttributePair>,
    pub static_phrases: Vec<String>,
    pub negated_maps: Vec<ModifierAttributePair>,
    pub spatial_reversals: Vec<String>,
    pub irrelevant: Vec<String>,
    /// Comma-joined `static ++ negated ++ reversals ++ irrelevant`.
    pub text: String,
    pub warnings: Vec<String>,
}

impl NegationSet {
    pub fn dynamic_phrases(&self) -> Vec<String> {
        self.negated_maps
            .iter()
            .map(ToString::to_string)
            .chain(self.spatial_reversals.iter().cloned())
            .chain(self.irrelevant.iter().cloned())
            .collect()
    }
}

pub fn build_negation_set(
    prompt: &str,
    client: &dyn LlmClient,
    static_phrases: &[String],
) -> Result<NegationSet, NegationError> {
    if static_phrases.is_empty() {
        return Err(NegationError::EmptyStatic);
    }
    let mut warnings = Vec::new();
    let maps = extract_maps(prompt);
    let ranked = rank_saliency(prompt, &maps, client, &mut warnings);
    // a recombined MAP equal to its source negates nothing
    let negated_maps: Vec<_> = recombine_maps(&ranked)
        .into_iter()
        .zip(&ranked)
        .filter(|(neg, orig)| !neg.modifier.eq_ignore_ascii_case(&orig.modifier))
        .map(|(neg, _)| neg)
        .collect();
    let spatial_reversals =
        maps.iter().filter(|m| m.spatial != Spatial::None).map(|m| reverse_spatial(m).to_string()).collect();
    let irrelevant = irrelevant_elements(prompt, &maps, client, &mut warnings);
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut set = NegationSet {
        prompt: prompt.to_string(),
        maps,
        static_phrases: static_phrases.to_vec(),
        negated_maps,
        spatial_reversals,
        irrelevant,
        text: String::new(),
        warnings,
    };
    set.text = set.static_phrases.iter().cloned().chain(set.dynamic_phrases()).collect::<Vec<_>>().join(", ");
    Ok(set)
}

/// `C⁻ = −(1/N) Σ ∇s_i(X, Y_neg)`; `literal` drops the minus sign.
pub fn negative_preference_grad(signals: &[PreferenceSignal], literal: bool) -> Result<Image, NegationError> {
    let first = signals.first().ok_or(PreferenceError::NoScorers)?;
    let mut out = Image::zeros(first.gradient.width(), first.gradient.height());
    let factor = if literal { 1.0 } else { -1.0 } / signals.len() as f64;
    for s in signals {
        out.add_scaled(&s.gradient, factor)?;
    }
    Ok(out)
}

/// `C_all = C⁺ + C⁻`
pub fn contrastive_grad(positive: &Image, negative: &Image) -> Result<Image, NegationError> {
    let mut out = positive.clone();
    out.add_scaled(negative, 1.0)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(maps: &[ModifierAttributePair]) -> Vec<(String, String, Spatial)> {
        maps.iter().map(|m| (m.modifier.clone(), m.attribute.clone(), m.spatial)).collect()
    }

    fn p(m: &str, a: &str) -> (String, String, Spatial) {
        (m.into(), a.into(), Spatial::None)
    }

    #[test]
    fn extracts_basic_maps() {
        let text = "white canvas shoes, red jacket";
        let maps = extract_maps(text);
        assert_eq!(pairs(&maps), vec![p("white", "canvas shoes"), p("red", "jacket")]);
        assert_eq!(&text[maps[0].span.0..maps[0].span.1], "white canvas shoes");
        assert_eq!(&text[maps[1].span.0..maps[1].span.1], "red jacket");
        assert!(extract_maps("").is_empty());
    }

    #[test]
    fn extracts_spatial_maps() {
        let maps = extract_maps("black glove on the left hand");
        assert_eq!(pairs(&maps), vec![("black".into(), "glove".into(), Spatial::Left)]);
        assert_eq!(maps[0].anchor.as_deref(), Some("hand"));
        assert_eq!(reverse_spatial(&maps[0]).to_string(), "black glove on the right hand");
    }

    #[test]
    fn extracts_from_sentences() {
        let maps = extract_maps("A tall woman wearing a bright red leather jacket and a pair of blue jeans, with a silver watch on her right wrist.");
        assert_eq!(
            pairs(&maps),
            vec![
                p("bright red", "leather jacket"),
                p("blue", "jeans"),
                ("silver".into(), "watch".into(), Spatial::Right)
            ]
        );
        // free-form noun phrase after a lexicon modifier
        assert_eq!(pairs(&extract_maps("emerald velvet cloak")), vec![p("emerald velvet", "cloak")]);
        assert!(extract_maps("a young man from Oceania").is_empty());
    }

    #[test]
    fn saliency_examples() {
        let client = RuleBasedClient::bundled();
        let mut w = Vec::new();
        let maps = vec![ModifierAttributePair::new("white", "shoes"), ModifierAttributePair::new("red", "jacket")];
        assert_eq!(rank_saliency("", &maps, client, &mut w)[0].attribute, "jacket");
        let single = vec![ModifierAttributePair::new("white", "shoes")];
        assert_eq!(rank_saliency("", &single, client, &mut w), single);
        let tie = vec![ModifierAttributePair::new("red", "scarf"), ModifierAttributePair::new("red", "belt")];
        let ranked = rank_saliency("", &tie, client, &mut w);
        assert_eq!((ranked[0].attribute.as_str(), ranked[1].attribute.as_str()), ("belt", "scarf"));
        assert!(w.is_empty());
    }

    struct Broken;

    impl LlmClient for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn saliency(&self, _: &str, _: &[ModifierAttributePair]) -> Result<Vec<f64>, NegationError> {
            Err(NegationError::Client("offline".into()))
        }
        fn irrelevant(&self, _: &str, _: &[ModifierAttributePair]) -> Result<Vec<String>, NegationError> {
            Err(NegationError::Client("offline".into()))
        }
    }

    #[test]
    fn client_failure_falls_back_with_warning() {
        let prompt = "white canvas shoes, red jacket, navy baseball cap";
        let fallback = build_negation_set(prompt, &Broken, &default_static_negations()).unwrap();
        let rules = build_negation_set(prompt, RuleBasedClient::bundled(), &default_static_negations()).unwrap();
        assert_eq!(fallback.text, rules.text);
        assert_eq!(fallback.warnings.len(), 2);
    }

    #[test]
    fn recombination_examples() {
        let m = |a: &str, b: &str| ModifierAttributePair::new(a, b);
        let swapped = recombine_maps(&[m("white", "canvas shoes"), m("red", "jacket")]);
        assert_eq!(pairs(&swapped), vec![p("red", "canvas shoes"), p("white", "jacket")]);
        assert_eq!(recombine_maps(&[m("a", "X")]), vec![m("a", "X")]);
        let three = recombine_maps(&[m("a", "X"), m("b", "Y"), m("c", "Z")]);
        assert_eq!(pairs(&three), vec![p("b", "X"), p("c", "Y"), p("a", "Z")]);
    }

    #[test]
    fn spatial_reversal_cases() {
        let g = ModifierAttributePair::new("black", "glove");
        assert_eq!(reverse_spatial(&g.clone().with_spatial(Spatial::Left, None)).spatial, Spatial::Right);
        assert_eq!(reverse_spatial(&g.clone().with_spatial(Spatial::Right, None)).spatial, Spatial::Left);
        assert_eq!(reverse_spatial(&g), g);
    }

    #[test]
    fn irrelevant_examples() {
        let client = RuleBasedClient::bundled();
        let mut w = Vec::new();
        let cap = ModifierAttributePair::new("red", "baseball cap");
        assert_eq!(irrelevant_elements("", std::slice::from_ref(&cap), client, &mut w), vec!["baseball glove"]);
        assert!(irrelevant_elements("", &[ModifierAttributePair::new("red", "jacket")], client, &mut w).is_empty());
        assert_eq!(irrelevant_elements("", &[cap.clone(), cap], client, &mut w), vec!["baseball glove"]);
    }

    #[test]
    fn negation_set_examples() {
        let statics = default_static_negations();
        let set = build_negation_set("white canvas shoes, red jacket", RuleBasedClient::bundled(), &statics).unwrap();
        assert!(set.text.starts_with("blurry, oversaturated, noisy"));
        assert!(set.text.contains("red canvas shoes"));
        assert!(set.text.contains("white jacket"));
        let again = build_negation_set("white canvas shoes, red jacket", RuleBasedClient::bundled(), &statics).unwrap();
        assert_eq!(set, again);

        let empty = build_negation_set("a person standing", RuleBasedClient::bundled(), &statics).unwrap();
        assert_eq!(empty.text, statics.join(", "));
        assert!(matches!(build_negation_set("x", RuleBasedClient::bundled(), &[]), Err(NegationError::EmptyStatic)));
    }

    fn sig(v: f64) -> PreferenceSignal {
        PreferenceSignal { scorer: "c".into(), score: 0.0, gradient: Image::filled(2, 2, [v; 3]) }
    }

    #[test]
    fn negative_grad_examples() {
        let zero = negative_preference_grad(&[sig(0.0), sig(0.0)], false).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let two = negative_preference_grad(&[sig(1.0), sig(3.0)], false).unwrap();
        assert!(two.data().iter().all(|&v| v == -2.0));
        let literal = negative_preference_grad(&[sig(1.0), sig(3.0)], true).unwrap();
        assert!(literal.data().iter().all(|&v| v == 2.0));
        let all = contrastive_grad(&Image::filled(2, 2, [0.5; 3]), &two).unwrap();
        assert!(all.data().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn spatial_serializes_lowercase() {
        assert_eq!(serde_json::to_string(&Spatial::Left).unwrap(), "\"left\"");
        let m: ModifierAttributePair =
            serde_json::from_str(r#"{"modifier":"red","attribute":"jacket","span":[0,10]}"#).unwrap();
        assert_eq!(m.spatial, Spatial::None);
    }
}
