//! Stable prompt-keyed values. These must not change between builds, so
//! they use FNV-1a rather than the std hasher.

pub fn key_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A color in `[0.15, 0.85]³` derived from `(text, salt)`.
pub fn keyed_color(text: &str, salt: &str) -> [f64; 3] {
    let h = key_hash(&format!("{salt}\u{1f}{text}"));
    [0, 1, 2].map(|k| 0.15 + 0.7 * ((h >> (16 * k)) & 0xffff) as f64 / 65535.0)
}

/// Named colors recognized in prompts, as linear RGB in `[0,1]`.
pub const COLOR_NAMES: &[(&str, [f64; 3])] = &[
    ("red", [0.85, 0.1, 0.1]),
    ("crimson", [0.75, 0.05, 0.2]),
    ("orange", [0.95, 0.5, 0.1]),
    ("yellow", [0.95, 0.85, 0.15]),
    ("green", [0.15, 0.65, 0.2]),
    ("olive", [0.45, 0.45, 0.15]),
    ("teal", [0.1, 0.5, 0.5]),
    ("blue", [0.15, 0.3, 0.85]),
    ("navy", [0.1, 0.12, 0.4]),
    ("purple", [0.5, 0.2, 0.65]),
    ("pink", [0.95, 0.5, 0.7]),
    ("brown", [0.45, 0.28, 0.15]),
    ("beige", [0.85, 0.78, 0.62]),
    ("black", [0.05, 0.05, 0.05]),
    ("white", [0.95, 0.95, 0.95]),
    ("gray", [0.5, 0.5, 0.5]),
    ("grey", [0.5, 0.5, 0.5]),
    ("silver", [0.75, 0.75, 0.78]),
    ("gold", [0.85, 0.68, 0.2]),
];

pub fn color_by_name(word: &str) -> Option<[f64; 3]> {
    COLOR_NAMES.iter().find(|(n, _)| n.eq_ignore_ascii_case(word)).map(|(_, c)| *c)
}

/// First named color among the words of `text`.
pub fn first_color(text: &str) -> Option<(&'static str, [f64; 3])> {
    text.split(|c: char| !c.is_ascii_alphabetic())
        .find_map(|w| COLOR_NAMES.iter().find(|(n, _)| n.eq_ignore_ascii_case(w)).copied())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_pinned() {
        // FNV-1a reference values
        assert_eq!(key_hash(""), 0xcbf29ce484222325);
        assert_eq!(key_hash("a"), 0xaf63dc4c8601ec8c);
        assert_eq!(keyed_color("x", "s"), keyed_color("x", "s"));
        assert_ne!(keyed_color("x", "s"), keyed_color("y", "s"));
    }

    #[test]
    fn finds_colors() {
        assert_eq!(first_color("a man in a Red jacket").unwrap().0, "red");
        assert!(first_color("reddish").is_none());
    }
}
