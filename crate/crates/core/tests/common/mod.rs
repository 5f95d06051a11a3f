#![allow(dead_code)]

use ebama::prompt_graph::{GraphRecord, ObjectGraph};

/// Hand-derived object graphs: `(prompt, [(object, [modifiers])])`.
pub const EXPECTED_GRAPHS: &[(&str, &[(&str, &[&str])])] = &[
    ("a purple crown and a blue suitcase", &[("crown", &["purple"]), ("suitcase", &["blue"])]),
    ("a red suitcase and a blue apple", &[("suitcase", &["red"]), ("apple", &["blue"])]),
    ("an orange backpack and a purple car", &[("backpack", &["orange"]), ("car", &["purple"])]),
    (
        "a purple modern camera and a spotted baby dog and a sliced tomato",
        &[("camera", &["purple", "modern"]), ("dog", &["spotted", "baby"]), ("tomato", &["sliced"])],
    ),
    (
        "a red metal crown and a white bear and a wooden chair",
        &[("crown", &["red", "metal"]), ("bear", &["white"]), ("chair", &["wooden"])],
    ),
    (
        "an orange suitcase and a sliced strawberry and a baby mouse",
        &[("suitcase", &["orange"]), ("strawberry", &["sliced"]), ("mouse", &["baby"])],
    ),
    (
        "A man with glasses, earrings, and a red shirt with blue tie.",
        &[("man", &[]), ("glasses", &[]), ("earrings", &[]), ("shirt", &["red"]), ("tie", &["blue"])],
    ),
    (
        "A red kitty cat sitting on a floor near a dish and a white towel.",
        &[("cat", &["red", "kitty"]), ("floor", &[]), ("dish", &[]), ("towel", &["white"])],
    ),
    (
        "Two tan boats on dock next to large white buildings.",
        &[("boats", &["tan"]), ("dock", &[]), ("buildings", &["large", "white"])],
    ),
    ("a red metal crown", &[("crown", &["red", "metal"])]),
    ("a cat and a frog", &[("cat", &[]), ("frog", &[])]),
    ("a cat", &[("cat", &[])]),
    (
        "a sliced apple and a purple camera and a teal lion",
        &[("apple", &["sliced"]), ("camera", &["purple"]), ("lion", &["teal"])],
    ),
    (
        "a brown bear with red hat and scarf and a small stuffed bear",
        &[("bear", &["brown"]), ("hat", &["red"]), ("scarf", &[]), ("bear", &["small", "stuffed"])],
    ),
    ("a gray crown and a purple apple", &[("crown", &["gray"]), ("apple", &["purple"])]),
    ("a yellow guitar", &[("guitar", &["yellow"])]),
    ("a green guitar", &[("guitar", &["green"])]),
    ("a frog on a pink bench", &[("frog", &[]), ("bench", &["pink"])]),
    ("a blue frog on a pink bench", &[("frog", &["blue"]), ("bench", &["pink"])]),
    ("a green backpack and a black apple", &[("backpack", &["green"]), ("apple", &["black"])]),
    (
        "a dog is playing a leather drum on the beach",
        &[("dog", &[]), ("drum", &["leather"]), ("beach", &[])],
    ),
    (
        "an orange and white cat sitting in the grass near some yellow flowers",
        &[("cat", &["orange", "white"]), ("grass", &[]), ("flowers", &["yellow"])],
    ),
    ("red roses in a square green vase", &[("roses", &["red"]), ("vase", &["square", "green"])]),
    (
        "A room with pink walls and white display shelves and chair",
        &[("room", &[]), ("walls", &["pink"]), ("shelves", &["white", "display"]), ("chair", &[])],
    ),
    ("a blue zebra and a spotted crown", &[("zebra", &["blue"]), ("crown", &["spotted"])]),
    (
        "a living room with white walls and blue trim",
        &[("room", &["living"]), ("walls", &["white"]), ("trim", &["blue"])],
    ),
    (
        "a green and white sign on a black pole and some buildings",
        &[("sign", &["green", "white"]), ("pole", &["black"]), ("buildings", &[])],
    ),
    ("a Tesla company", &[("company", &["Tesla"])]),
];

/// Object and modifier words of a parsed graph, in index order.
pub fn graph_words(prompt: &str, words: &[String], graph: &ObjectGraph) -> Vec<(String, Vec<String>)> {
    GraphRecord::new(prompt, words, graph)
        .objects
        .into_iter()
        .map(|o| (o.text, o.modifiers.into_iter().map(|m| m.text).collect()))
        .collect()
}

pub fn expected_words(expected: &[(&str, &[&str])]) -> Vec<(String, Vec<String>)> {
    expected
        .iter()
        .map(|(o, ms)| (o.to_string(), ms.iter().map(|m| m.to_string()).collect()))
        .collect()
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}
