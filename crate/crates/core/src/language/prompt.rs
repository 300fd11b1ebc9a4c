//! Prompt rendering for object categories and relationship triplets.

use std::sync::OnceLock;

use crate::error::{Error, Result};

const TEMPLATE_FILE: &str = include_str!("../../data/prompt_templates.txt");

/// Predicate rendered as a plain conjunction.
pub const NO_INTERACTION: &str = "no-interaction";

/// The bundled object prompt templates, each with a single `{}` placeholder.
pub fn templates() -> &'static [String] {
    static TEMPLATES: OnceLock<Vec<String>> = OnceLock::new();
    TEMPLATES.get_or_init(|| parse_templates(TEMPLATE_FILE))
}

/// Parses a template file: one template per non-empty line.
pub fn parse_templates(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn prompt_object(label: &str, template_index: usize) -> Result<String> {
    let all = templates();
    let template = all.get(template_index).ok_or_else(|| Error::InvalidArgument {
        arg: "template_index",
        reason: format!("{template_index} is outside [0, {})", all.len()),
    })?;
    Ok(template.replacen("{}", label, 1))
}

/// Relationship triplet as seen by the prompt renderer. `object` is `None`
/// for subject-only categories.
#[derive(Clone, Copy, Debug)]
pub struct PromptTriplet<'a> {
    pub subject: &'a str,
    pub predicate: &'a str,
    pub object: Option<&'a str>,
}

impl<'a> PromptTriplet<'a> {
    pub fn new(subject: &'a str, predicate: &'a str, object: &'a str) -> Self {
        Self {
            subject,
            predicate,
            object: Some(object),
        }
    }
}

/// Verbs that take no object; objectless triplets with any other predicate
/// are rendered with a placeholder object.
const INTRANSITIVE: &[&str] = &[
    "dance", "fall", "jump", "laugh", "lie", "point", "run", "sit", "sleep", "smile", "stand", "swim",
    "walk",
];

pub fn prompt_relation(t: PromptTriplet<'_>) -> Result<String> {
    let subject = t.subject.trim();
    let predicate = t.predicate.trim();
    if subject.is_empty() || predicate.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "triplet",
            reason: "subject and predicate must be non-empty".into(),
        });
    }
    let is_no_interaction = predicate.eq_ignore_ascii_case(NO_INTERACTION);
    let verb = if is_no_interaction {
        "and".to_string()
    } else {
        conjugate_ing(predicate)
    };
    Ok(match t.object.map(str::trim).filter(|o| !o.is_empty()) {
        Some(object) => format!("a {subject} {verb} a {object}"),
        None => {
            let head = predicate.split_whitespace().next().unwrap_or("");
            if is_no_interaction || INTRANSITIVE.contains(&head.to_ascii_lowercase().as_str()) {
                format!("a {subject} {verb}")
            } else {
                format!("a {subject} {verb} something")
            }
        }
    })
}

/// Heads that are not verbs and stay as written.
const UNCONJUGATED: &[&str] = &[
    "above", "across", "against", "along", "and", "at", "behind", "below", "beneath", "beside",
    "between", "beyond", "by", "for", "from", "in", "inside", "into", "left", "leftward", "near",
    "next", "of", "on", "onto", "over", "right", "rightward", "through", "to", "toward", "under",
    "underneath", "with", "within",
];

/// Irregular present participles.
const EXCEPTIONS: &[(&str, &str)] = &[
    ("admit", "admitting"),
    ("be", "being"),
    ("begin", "beginning"),
    ("bring", "bringing"),
    ("cling", "clinging"),
    ("die", "dying"),
    ("fling", "flinging"),
    ("flee", "fleeing"),
    ("forget", "forgetting"),
    ("lie", "lying"),
    ("panic", "panicking"),
    ("picnic", "picnicking"),
    ("ring", "ringing"),
    ("see", "seeing"),
    ("sing", "singing"),
    ("sling", "slinging"),
    ("spring", "springing"),
    ("sting", "stinging"),
    ("string", "stringing"),
    ("swing", "swinging"),
    ("tie", "tying"),
    ("wing", "winging"),
    ("wring", "wringing"),
];

fn is_vowel(c: u8) -> bool {
    matches!(c, b'a' | b'e' | b'i' | b'o' | b'u')
}

fn vowel_groups(w: &[u8]) -> usize {
    let mut groups = 0;
    let mut prev = false;
    for &c in w {
        let v = is_vowel(c) || (c == b'y' && groups > 0);
        if v && !prev {
            groups += 1;
        }
        prev = v;
    }
    groups
}

fn conjugate_word(verb: &str) -> String {
    let lower = verb.to_ascii_lowercase();
    if let Some((_, ing)) = EXCEPTIONS.iter().find(|(base, _)| *base == lower) {
        return (*ing).to_string();
    }
    if UNCONJUGATED.contains(&lower.as_str()) || (lower.ends_with("ing") && lower.len() > 4) {
        return verb.to_string();
    }
    let b = verb.as_bytes();
    let n = b.len();
    if n >= 2 && verb.ends_with("ie") {
        return format!("{}ying", &verb[..n - 2]);
    }
    if n >= 2 && b[n - 1] == b'e' && !matches!(b[n - 2], b'e' | b'o' | b'y') {
        return format!("{}ing", &verb[..n - 1]);
    }
    if n >= 3 {
        let (c1, v, c2) = (b[n - 3], b[n - 2], b[n - 1]);
        let cvc = !is_vowel(c1) && is_vowel(v) && !is_vowel(c2) && !matches!(c2, b'w' | b'x' | b'y');
        if cvc && vowel_groups(b) == 1 {
            return format!("{verb}{}ing", c2 as char);
        }
    }
    format!("{verb}ing")
}

/// Present participle of the head (first) word of a verb phrase.
pub fn conjugate_ing(verb: &str) -> String {
    let mut words = verb.split_whitespace();
    let Some(head) = words.next() else {
        return String::new();
    };
    let mut out = conjugate_word(head);
    for w in words {
        out.push(' ');
        out.push_str(w);
    }
    out
}
