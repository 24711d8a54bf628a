//! Deterministic templated corpora.
//!
//! `PublicCorpus` stands in for the large public pretraining text: general
//! subject/verb/object sentences plus review-style sentences that use the
//! sentiment lexicon with unlabeled, mixed polarity. `SentimentToy` is the
//! private downstream set: short reviews whose label is fixed by the lexicon.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabeledDocument;
use crate::rng::{purpose, stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    PublicCorpus,
    SentimentToy,
}

const NAMES: &[&str] = &[
    "alice", "bob", "carol", "david", "emma", "frank", "grace", "henry", "irene", "jack", "kate", "leo", "mia",
    "nora", "oscar", "paul", "quinn", "rosa", "sam", "tina", "uma", "victor", "wendy", "xavier", "yara", "zack",
    "anna", "ben", "clara", "dan",
];

const PEOPLE: &[&str] = &[
    "teacher", "doctor", "farmer", "child", "student", "painter", "driver", "sailor", "baker", "nurse", "pilot",
    "singer", "writer", "lawyer", "miner", "guard", "judge", "clerk", "tailor", "hunter", "soldier", "artist",
    "banker", "dancer", "builder", "cook", "poet", "king", "queen", "stranger",
];

const ANIMALS: &[&str] = &[
    "dog", "cat", "horse", "bird", "fox", "wolf", "bear", "rabbit", "mouse", "goat", "sheep", "cow", "duck",
    "owl", "deer", "frog", "snake", "tiger", "lion", "monkey", "goose", "pig", "hen", "bee", "whale", "seal",
    "crow", "eagle", "turtle", "donkey",
];

const OBJECTS: &[&str] = &[
    "box", "letter", "key", "lamp", "chair", "table", "rope", "basket", "bottle", "map", "coin", "ring", "hat",
    "coat", "boot", "bag", "stone", "stick", "cup", "plate", "knife", "spoon", "clock", "mirror", "candle",
    "ladder", "bucket", "blanket", "pencil", "drum", "flag", "bell", "wheel", "hammer", "shovel", "kettle",
    "brush", "glove", "scarf", "jar", "barrel", "feather", "shell", "ticket", "radio", "wagon", "boat", "kite",
    "sword", "crown",
];

const PLACES: &[&str] = &[
    "garden", "river", "forest", "market", "station", "village", "harbor", "bridge", "castle", "school",
    "library", "church", "tower", "field", "valley", "mountain", "island", "beach", "lake", "farm", "road",
    "square", "house", "barn", "cave", "hill", "desert", "city", "park", "office", "kitchen", "cellar", "attic",
    "yard", "street", "shop", "museum", "palace", "tunnel", "meadow",
];

const VERBS: &[&str] = &[
    "found", "carried", "painted", "watched", "followed", "dropped", "lifted", "pushed", "pulled", "opened",
    "closed", "cleaned", "moved", "hid", "sold", "bought", "built", "broke", "fixed", "touched", "kicked",
    "chased", "visited", "noticed", "counted", "washed", "packed", "stole", "buried", "tied", "threw", "caught",
    "held", "left", "brought", "sent", "showed", "drew", "took", "gave",
];

const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "brown", "grey", "purple", "orange", "small", "large",
    "tiny", "huge", "tall", "short", "long", "round", "square", "heavy", "light", "old", "young", "new", "ancient",
    "wooden", "metal", "soft", "hard", "quiet", "loud", "bright", "dark", "wide", "narrow", "thin", "thick",
    "empty", "full", "strange",
];

const ADVERBS: &[&str] = &[
    "slowly", "quickly", "carefully", "quietly", "gently", "suddenly", "happily", "sadly", "bravely", "softly",
    "loudly", "calmly", "eagerly", "firmly", "lazily", "neatly", "proudly", "rarely", "boldly", "swiftly",
];

const TIMES: &[&str] = &[
    "yesterday", "today", "tomorrow", "monday", "tuesday", "wednesday", "thursday", "friday", "saturday",
    "sunday", "tonight", "later", "early", "again", "once", "twice", "soon", "recently", "finally", "afterwards",
];

const PREPOSITIONS: &[&str] = &[
    "in", "on", "near", "under", "behind", "beside", "inside", "outside", "above", "below", "across", "around",
];

const NUMBERS: &[&str] = &[
    "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve", "twenty",
];

const ITEMS: &[&str] = &[
    "food", "meal", "pizza", "soup", "pasta", "burger", "salad", "coffee", "dessert", "service", "staff", "waiter",
    "movie", "film", "plot", "acting", "music", "ending", "book", "story", "hotel", "room", "bed", "view", "price",
    "phone", "battery", "screen", "camera", "game",
];

pub const LEXICON_POSITIVE: &[&str] = &[
    "good", "great", "excellent", "wonderful", "amazing", "delicious", "lovely", "fantastic", "superb", "perfect",
    "pleasant", "brilliant", "fresh", "friendly", "tasty", "charming", "delightful", "outstanding", "enjoyable",
    "beautiful", "splendid", "awesome", "fine", "nice", "cozy",
];

pub const LEXICON_NEGATIVE: &[&str] = &[
    "bad", "terrible", "awful", "horrible", "disgusting", "bland", "boring", "dull", "poor", "rude", "cold",
    "stale", "greasy", "noisy", "dirty", "broken", "slow", "weak", "mediocre", "disappointing", "dreadful",
    "lousy", "nasty", "gross", "painful",
];

const VERBS_POSITIVE: &[&str] = &["loved", "enjoyed", "liked", "adored", "praised", "admired"];
const VERBS_NEGATIVE: &[&str] = &["hated", "disliked", "regretted", "despised", "avoided", "wasted"];
const INTENSIFIERS: &[&str] = &[
    "really", "truly", "quite", "so", "very", "extremely", "totally", "absolutely", "rather", "pretty",
];

fn pick<'a>(rng: &mut StreamRng, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("word lists are nonempty")
}

fn pick_two<'a>(rng: &mut StreamRng, words: &[&'a str]) -> (&'a str, &'a str) {
    let a = pick(rng, words);
    loop {
        let b = pick(rng, words);
        if b != a {
            return (a, b);
        }
    }
}

fn noun<'a>(rng: &mut StreamRng) -> &'a str {
    match rng.gen_range(0..3) {
        0 => pick(rng, PEOPLE),
        1 => pick(rng, ANIMALS),
        _ => pick(rng, OBJECTS),
    }
}

fn agent(rng: &mut StreamRng) -> String {
    if rng.gen_bool(0.4) {
        pick(rng, NAMES).to_string()
    } else {
        format!("the {}", if rng.gen_bool(0.5) { pick(rng, PEOPLE) } else { pick(rng, ANIMALS) })
    }
}

fn general_sentence(rng: &mut StreamRng) -> String {
    match rng.gen_range(0..6) {
        0 => format!(
            "{} {} the {} {} {} the {}",
            agent(rng),
            pick(rng, VERBS),
            pick(rng, ADJECTIVES),
            pick(rng, OBJECTS),
            pick(rng, PREPOSITIONS),
            pick(rng, PLACES)
        ),
        1 => format!(
            "{} {} a {} {} {}",
            agent(rng),
            pick(rng, VERBS),
            pick(rng, ADJECTIVES),
            noun(rng),
            pick(rng, TIMES)
        ),
        2 => format!(
            "the {} {} was {} the {}",
            pick(rng, ADJECTIVES),
            noun(rng),
            pick(rng, PREPOSITIONS),
            pick(rng, PLACES)
        ),
        3 => format!(
            "{} {} {} the {} at {}",
            agent(rng),
            pick(rng, ADVERBS),
            pick(rng, VERBS),
            pick(rng, OBJECTS),
            pick(rng, NUMBERS)
        ),
        4 => format!(
            "{} and {} {} the {} {}",
            pick(rng, NAMES),
            pick(rng, NAMES),
            pick(rng, VERBS),
            noun(rng),
            pick(rng, TIMES)
        ),
        _ => format!(
            "a {} {} lived {} the {} {} the {}",
            pick(rng, ADJECTIVES),
            noun(rng),
            pick(rng, PREPOSITIONS),
            pick(rng, PLACES),
            pick(rng, PREPOSITIONS),
            pick(rng, PLACES)
        ),
    }
}

/// Review-shaped sentence. `polarity` picks the lexicon; `None` mixes both.
fn review_sentence(rng: &mut StreamRng, polarity: Option<bool>) -> String {
    let mut pol = || polarity.unwrap_or_else(|| rng.gen_bool(0.5));
    let adj = |rng: &mut StreamRng, p: bool| pick(rng, if p { LEXICON_POSITIVE } else { LEXICON_NEGATIVE });
    let verb = |rng: &mut StreamRng, p: bool| pick(rng, if p { VERBS_POSITIVE } else { VERBS_NEGATIVE });
    let (p1, p2) = (pol(), pol());
    let (i1, i2) = pick_two(rng, ITEMS);
    match rng.gen_range(0..6) {
        0 => format!("the {i1} was {} {}", pick(rng, INTENSIFIERS), adj(rng, p1)),
        1 => format!("i {} the {i1} and the {i2}", verb(rng, p1)),
        2 => format!(
            "{} {} {i1} , {} {} {i2}",
            pick(rng, INTENSIFIERS),
            adj(rng, p1),
            pick(rng, INTENSIFIERS),
            adj(rng, p2)
        ),
        3 => format!("we {} this {i1} because it was {}", verb(rng, p1), adj(rng, p2)),
        4 => format!("the {i1} is {} and the {i2} is {}", adj(rng, p1), adj(rng, p2)),
        _ => format!("my {i1} was {} but the {i2} was {}", adj(rng, p1), adj(rng, p2)),
    }
}

/// Pure function of `(kind, count, seed)`.
pub fn generate_synthetic(kind: CorpusKind, count: usize, seed: u64) -> Vec<LabeledDocument> {
    let mut rng = stream(seed, purpose::GENERATOR);
    (0..count)
        .map(|i| match kind {
            CorpusKind::PublicCorpus => {
                let text = if rng.gen_bool(0.4) {
                    review_sentence(&mut rng, None)
                } else {
                    general_sentence(&mut rng)
                };
                LabeledDocument::new(text, "public")
            }
            CorpusKind::SentimentToy => {
                let positive = i % 2 == 0;
                let text = review_sentence(&mut rng, Some(positive));
                LabeledDocument::new(text, if positive { "positive" } else { "negative" })
            }
        })
        .collect()
}
