//! Every fixed sentence template the pipeline emits. The text
//! vocabulary is derived from these, so anything generated here is
//! guaranteed to tokenize without unknowns.

pub const SCENE_CAPTION_TWO: &str = "a {scene} containing a {a} near a {b}";
pub const SCENE_CAPTION_ONE: &str = "a {scene} containing a {a}";
pub const SCENE_CAPTION_EMPTY: &str = "an empty {scene}";
pub const OBJECT_CAPTION: &str = "a {label} at {range} range";
pub const RANGE_WORDS: [&str; 3] = ["near", "middle", "far"];

pub const ZERO_SHOT_PROMPT: &str = "a {label}";

pub const Q_SCENE: &str = "which scene is this: {options}?";
pub const Q_RECOGNITION: &str = "what object is in {region}: {options}?";
pub const Q_DISTANCE: &str = "which is farther: {a} or {b}?";
pub const Q_SECURITY: &str = "which object is not in this scene: {options}?";

pub const I_DESCRIBE: &str = "describe this depth map in detail.";
pub const A_DESCRIBE: &str = "this is a depth map of a {scene}. {contents} {order}";
pub const A_CONTENTS: &str = "it contains {list}.";
pub const A_CONTENTS_EMPTY: &str = "it contains no objects.";
pub const A_ORDER: &str = "from near to far: {labels}.";
pub const I_CLOSER: &str = "which is closer: {a} or {b}?";
pub const A_CLOSER: &str = "{a} is closer to the camera.";
pub const A_FARTHER: &str = "{a} is farther from the camera.";
pub const I_WHAT: &str = "what object is in {region}?";
pub const A_WHAT: &str = "a {label}.";

/// Filler words that appear only inside placeholders.
pub const EXTRA_WORDS: &[&str] = &["or", "and", "region"];

pub const ALL_TEMPLATES: &[&str] = &[
    SCENE_CAPTION_TWO,
    SCENE_CAPTION_ONE,
    SCENE_CAPTION_EMPTY,
    OBJECT_CAPTION,
    ZERO_SHOT_PROMPT,
    Q_SCENE,
    Q_RECOGNITION,
    Q_DISTANCE,
    Q_SECURITY,
    I_DESCRIBE,
    A_DESCRIBE,
    A_CONTENTS,
    A_CONTENTS_EMPTY,
    A_ORDER,
    I_CLOSER,
    A_CLOSER,
    A_FARTHER,
    I_WHAT,
    A_WHAT,
];

/// Substitutes `{key}` placeholders.
pub fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    pairs
        .iter()
        .fold(template.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}

/// `a, b or c` style enumeration with the given final conjunction.
pub fn enumerate(items: &[String], conj: &str) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} {conj} {last}", init.join(", ")),
    }
}

/// Template text with its placeholders removed.
pub(crate) fn literal_text(template: &str) -> String {
    let mut out = String::new();
    let mut depth = 0;
    for c in template.chars() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                out.push(' ');
            }
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    out
}
