//! Template-driven corpus of long human descriptions.
//!
//! Every slot draws from its own shuffle bag, so marginals stay balanced in
//! any corpus prefix, and duplicates are rejected by text.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("requested {requested} prompts but the template only has {available} distinct combinations")]
    Capacity { requested: usize, available: u128 },
    #[error("requested {requested} of {available} prompts")]
    Range { requested: usize, available: usize },
    #[error("invalid template: {0}")]
    Template(String),
    #[error("gave up after {0} duplicate draws in a row")]
    Exhausted(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApparelSlot {
    pub modifiers: Vec<String>,
    pub items: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessoryItem {
    pub name: String,
    /// Body part for a sided phrase such as `on the left hand`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessorySlot {
    pub modifiers: Vec<String>,
    pub items: Vec<AccessoryItem>,
    pub sides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Apparel {
    pub upper: ApparelSlot,
    pub lower: ApparelSlot,
    pub shoes: ApparelSlot,
    pub accessory: AccessorySlot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct People {
    pub age: Vec<String>,
    pub body_shape: Vec<String>,
    pub gender: Vec<String>,
    pub region: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Placeholders: `{age} {body_shape} {gender} {region} {upper} {lower} {shoes} {accessory}`.
    pub frame: String,
    pub people: People,
    pub apparel: Apparel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub text: String,
    pub slots: BTreeMap<String, String>,
    pub seed: u64,
}

const PLACEHOLDERS: [&str; 8] = ["age", "body_shape", "gender", "region", "upper", "lower", "shoes", "accessory"];

impl PromptTemplate {
    pub fn bundled() -> &'static PromptTemplate {
        static T: OnceLock<PromptTemplate> = OnceLock::new();
        T.get_or_init(|| {
            let t: PromptTemplate =
                serde_json::from_str(include_str!("../assets/prompt_template.json")).expect("bundled template");
            t.validate().expect("bundled template is valid");
            t
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let t: PromptTemplate = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for p in PLACEHOLDERS {
            if !self.frame.contains(&format!("{{{p}}}")) {
                return Err(PromptError::Template(format!("frame lacks {{{p}}}")));
            }
        }
        for (name, len) in self.pool_sizes() {
            if len == 0 {
                return Err(PromptError::Template(format!("slot `{name}` has an empty pool")));
            }
        }
        Ok(())
    }

    /// `(slot, pool size)` for every independently drawn slot.
    pub fn pool_sizes(&self) -> Vec<(&'static str, usize)> {
        let (p, a) = (&self.people, &self.apparel);
        vec![
            ("age", p.age.len()),
            ("body_shape", p.body_shape.len()),
            ("gender", p.gender.len()),
            ("region", p.region.len()),
            ("upper_modifier", a.upper.modifiers.len()),
            ("upper", a.upper.items.len()),
            ("lower_modifier", a.lower.modifiers.len()),
            ("lower", a.lower.items.len()),
            ("shoes_modifier", a.shoes.modifiers.len()),
            ("shoes", a.shoes.items.len()),
            ("accessory_modifier", a.accessory.modifiers.len()),
            ("accessory", a.accessory.items.len()),
            ("side", a.accessory.sides.len()),
        ]
    }

    /// Upper bound on distinct prompts (sides only multiply anchored items).
    pub fn combinations(&self) -> u128 {
        let acc = &self.apparel.accessory;
        let sided = acc.items.iter().filter(|i| i.anchor.is_some()).count() as u128;
        let unsided = acc.items.len() as u128 - sided;
        let accessories = unsided + sided * acc.sides.len() as u128;
        self.pool_sizes()
            .iter()
            .filter(|(n, _)| !matches!(*n, "accessory" | "side"))
            .fold(accessories, |acc, (_, len)| acc.saturating_mul(*len as u128))
    }

    fn value(&self, slot: &str, i: usize) -> String {
        let (p, a) = (&self.people, &self.apparel);
        match slot {
            "age" => p.age[i].clone(),
            "body_shape" => p.body_shape[i].clone(),
            "gender" => p.gender[i].clone(),
            "region" => p.region[i].clone(),
            "upper_modifier" => a.upper.modifiers[i].clone(),
            "upper" => a.upper.items[i].clone(),
            "lower_modifier" => a.lower.modifiers[i].clone(),
            "lower" => a.lower.items[i].clone(),
            "shoes_modifier" => a.shoes.modifiers[i].clone(),
            "shoes" => a.shoes.items[i].clone(),
            "accessory_modifier" => a.accessory.modifiers[i].clone(),
            "accessory" => a.accessory.items[i].name.clone(),
            "side" => a.accessory.sides[i].clone(),
            _ => unreachable!("unknown slot {slot}"),
        }
    }

    /// Renders slot assignments; `side` is ignored for unanchored accessories.
    pub fn render(&self, slots: &BTreeMap<String, String>) -> Result<String, PromptError> {
        let get = |k: &str| {
            slots.get(k).map(String::as_str).ok_or_else(|| PromptError::Template(format!("missing slot `{k}`")))
        };
        let garment = |k: &str| -> Result<String, PromptError> {
            let item = get(k)?;
            Ok(with_article(&format!("{} {item}", get(&format!("{k}_modifier"))?), is_plural(item)))
        };
        let mut accessory = garment("accessory")?;
        let item = get("accessory")?;
        if let Some(anchor) =
            self.apparel.accessory.items.iter().find(|i| i.name == item).and_then(|i| i.anchor.as_ref())
        {
            accessory = format!("{accessory} on the {} {anchor}", get("side")?);
        }
        let mut text = self.frame.clone();
        for (k, v) in [
            ("age", get("age")?.to_string()),
            ("body_shape", get("body_shape")?.to_string()),
            ("gender", get("gender")?.to_string()),
            ("region", get("region")?.to_string()),
            ("upper", garment("upper")?),
            ("lower", garment("lower")?),
            ("shoes", garment("shoes")?),
            ("accessory", accessory),
        ] {
            text = text.replace(&format!("{{{k}}}"), &v);
        }
        Ok(fix_articles(&text))
    }
}

fn is_plural(item: &str) -> bool {
    let last = item.rsplit(' ').next().unwrap_or(item);
    last.ends_with('s') && !last.ends_with("ss")
}

fn with_article(phrase: &str, plural: bool) -> String {
    if plural {
        phrase.to_string()
    } else {
        format!("a {phrase}")
    }
}

fn starts_with_vowel(word: &str) -> bool {
    word.chars().next().is_some_and(|c| "aeioAEIO".contains(c))
}

/// `a` → `an` before a vowel-initial word.
fn fix_articles(text: &str) -> String {
    let words: Vec<&str> = text.split(' ').collect();
    let mut out = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        let next_vowel = words.get(i + 1).is_some_and(|n| starts_with_vowel(n));
        out.push(match *w {
            "a" if next_vowel => "an",
            "A" if next_vowel => "An",
            other => other,
        });
    }
    out.join(" ")
}

/// Draws without replacement from a pool, refilling when empty.
struct ShuffleBag {
    size: usize,
    bag: Vec<usize>,
}

impl ShuffleBag {
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.bag.is_empty() {
            self.bag = (0..self.size).collect();
            self.bag.shuffle(rng);
        }
        self.bag.pop().expect("refilled")
    }
}

pub fn generate_corpus(template: &PromptTemplate, n: usize, seed: u64) -> Result<Vec<PromptRecord>, PromptError> {
    template.validate()?;
    let available = template.combinations();
    if n as u128 > available {
        return Err(PromptError::Capacity { requested: n, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bags: Vec<(&'static str, ShuffleBag)> =
        template.pool_sizes().into_iter().map(|(name, size)| (name, ShuffleBag { size, bag: Vec::new() })).collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut misses = 0;
    let limit = 1000 + 10 * n;
    while out.len() < n {
        let slots: BTreeMap<String, String> =
            bags.iter_mut().map(|(name, bag)| (name.to_string(), template.value(name, bag.draw(&mut rng)))).collect();
        let text = template.render(&slots)?;
        if !seen.insert(text.clone()) {
            misses += 1;
            if misses > limit {
                return Err(PromptError::Exhausted(misses));
            }
            continue;
        }
        misses = 0;
        out.push(PromptRecord { id: format!("prompt-{:05}", out.len()), text, slots, seed });
    }
    Ok(out)
}

/// Uniform sample without replacement, in sampled order.
pub fn sample_eval_subset(corpus: &[PromptRecord], k: usize, seed: u64) -> Result<Vec<PromptRecord>, PromptError> {
    if k > corpus.len() {
        return Err(PromptError::Range { requested: k, available: corpus.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, corpus.len(), k).into_iter().map(|i| corpus[i].clone()).collect())
}
