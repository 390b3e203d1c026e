//! The closed word set of the synthetic corpus.

pub const CATEGORIES: [&str; 16] = [
    "fish", "bird", "frog", "cat", "dog", "fox", "owl", "bear", "wolf", "deer", "crab", "seal",
    "hare", "moth", "bee", "newt",
];
pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "black", "white", "orange", "purple",
];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const STAGES: [&str; 2] = ["juvenile", "adult"];
pub const PATTERNS: [&str; 3] = ["plain", "spotted", "striped"];
pub const SCENE_ADJECTIVES: [&str; 8] = [
    "north", "south", "east", "west", "misty", "sunny", "quiet", "windy",
];
pub const SCENE_PLACES: [&str; 8] = [
    "meadow", "river", "forest", "lake", "hill", "valley", "marsh", "coast",
];
pub const FUNCTION_WORDS: [&str; 21] = [
    "a", "the", "this", "one", "in", "of", "form", "show", "version", "from", "here", "is", "and",
    "seen", "at", "retrieve", "image", "that", "answers", "describe", "retrieved",
];

/// Retriever instruction tag prepended to every question.
pub const INSTRUCTION: &str = "retrieve the image that answers";
/// Closing instruction of the static retrieval-augmented prompt.
pub const ANSWER_INSTRUCTION: &str = "describe the retrieved image";

pub fn all_words() -> impl Iterator<Item = &'static str> {
    CATEGORIES
        .iter()
        .chain(&COLORS)
        .chain(&SIZES)
        .chain(&STAGES)
        .chain(&PATTERNS)
        .chain(&SCENE_ADJECTIVES)
        .chain(&SCENE_PLACES)
        .chain(&FUNCTION_WORDS)
        .copied()
}
