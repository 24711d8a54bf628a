//! Datasets: JSON-lines loading, word-level tokenisation, vocabularies and splits.

mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::model::{TokenSequence, BOS, EOS, MASK, PAD, RESERVED, UNK};
use crate::rng::{purpose, stream};

pub use synthetic::{generate_synthetic, CorpusKind, LEXICON_NEGATIVE, LEXICON_POSITIVE};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledDocument {
    pub text: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub individual_id: Option<String>,
}

impl LabeledDocument {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        LabeledDocument {
            text: text.into(),
            label: label.into(),
            individual_id: None,
        }
    }
}

/// Reads one JSON object per line. Every malformed line is reported before
/// failing; blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<LabeledDocument>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LabeledDocument>(line) {
            Ok(d) if d.label.is_empty() => errors.push((i + 1, "empty `label`".to_string())),
            Ok(d) => docs.push(d),
            Err(e) => errors.push((i + 1, e.to_string())),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            errors,
        });
    }
    if docs.is_empty() {
        log::warn!("{} contains no documents", path.display());
    }
    Ok(docs)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Lowercases and splits into runs of alphanumerics; every other
/// non-whitespace character is a token of its own.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<unk>", "<mask>", "<bos>", "<eos>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub max_size: usize,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, max_size: usize) -> Result<Self> {
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return invalid_arg("vocabulary contains a duplicate token");
        }
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(r) {
                return invalid_arg(format!("id {i} must be the reserved token {r}"));
            }
        }
        Ok(Vocab {
            tokens,
            index,
            max_size,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    pub fn to_json(&self) -> Result<String> {
        let map: serde_json::Map<String, serde_json::Value> =
            self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i.into())).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: HashMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, i) in map {
            match tokens.get_mut(i) {
                Some(slot) if slot.is_empty() => *slot = t,
                _ => return invalid_arg(format!("vocabulary ids are not a permutation (id {i})")),
            }
        }
        let size = tokens.len();
        Self::from_tokens(tokens, size)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// The `max_size − 5` most frequent tokens (ties in lexicographic order) after
/// the reserved ones.
pub fn build_vocab<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab> {
    if max_size <= RESERVED {
        return invalid_arg(format!("max_size must exceed the {RESERVED} reserved tokens"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for t in texts {
        any = true;
        for w in words(t) {
            *counts.entry(w).or_default() += 1;
        }
    }
    if !any {
        return invalid_arg("cannot build a vocabulary from an empty corpus");
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| !RESERVED_TOKENS.contains(&w.as_str())).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size - RESERVED).map(|(w, _)| w));
    Vocab::from_tokens(tokens, max_size)
}

/// `[begin, words…, end]`, truncated then padded to exactly `l` ids.
pub fn tokenize(text: &str, vocab: &Vocab, l: usize) -> TokenSequence {
    let mut ids = Vec::with_capacity(l + 2);
    ids.push(BOS);
    ids.extend(words(text).iter().map(|w| vocab.id(w)));
    ids.push(EOS);
    TokenSequence::from_ids(ids, l)
}

/// Joins non-reserved tokens with single spaces, stopping at the first end marker.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    let mut out: Vec<&str> = Vec::new();
    for &id in ids {
        if id == EOS {
            break;
        }
        if id == PAD || id == UNK || id == MASK || id == BOS || id >= vocab.len() {
            continue;
        }
        out.push(&vocab.tokens[id]);
    }
    out.join(" ")
}

/// Lowercased, re-spaced form that `detokenize(tokenize(s))` reproduces for
/// in-vocabulary text.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

/// Seeded shuffle, then contiguous `(train, val, test)` blocks.
pub fn split<T: Clone>(items: &[T], fractions: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return invalid_arg(format!("split fractions must be in [0, 1] and sum to 1, got ({a}, {b}, {c})"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut stream(seed, purpose::SPLIT));
    let n = items.len() as f64;
    let n_train = (n * a).round() as usize;
    let n_val = ((n * b).round() as usize).min(items.len() - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<T>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// Jaccard index of two token sets.
pub fn vocabulary_overlap<'a>(a: impl IntoIterator<Item = &'a str>, b: impl IntoIterator<Item = &'a str>) -> f64 {
    use std::collections::BTreeSet;
    let a: BTreeSet<&str> = a.into_iter().collect();
    let b: BTreeSet<&str> = b.into_iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_of(text: &str) -> Vocab {
        build_vocab([text], 64).unwrap()
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = build_vocab(["a a b"], 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(0), Some("<pad>"));
        assert_eq!(v.token(4), Some("<eos>"));
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab(["y x"], 6).unwrap();
        assert!(v.contains("x"));
        assert!(!v.contains("y"));
    }

    #[test]
    fn tokenize_example() {
        let v = vocab_of("hello , world");
        let t = tokenize("Hello, world", &v, 20);
        assert_eq!(t.ids.len(), 20);
        assert_eq!(&t.ids[..5], &[BOS, v.id("hello"), v.id(","), v.id("world"), EOS]);
        assert!(t.ids[5..].iter().all(|&i| i == PAD));
        assert_eq!(detokenize(&t.ids, &v), "hello , world");
    }

    #[test]
    fn long_input_is_truncated() {
        let text: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let text = text.join(" ");
        let v = vocab_of(&text);
        let t = tokenize(&text, &v, 20);
        assert_eq!(t.ids.len(), 20);
        assert_eq!(t.len, 20);
        assert_eq!(t.ids[0], BOS);
        assert_eq!(t.ids[19], v.id("w18"));
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = vocab_of("one two two three");
        let back = Vocab::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back.words(), v.words());
        assert_eq!(back.id("two"), v.id("two"));
    }

    #[test]
    fn jsonl_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut f = fs::File::create(&p).unwrap();
        writeln!(f, r#"{{"text": "a b", "label": "x"}}"#).unwrap();
        writeln!(f, r#"{{"text": "c", "label": "y", "individual_id": "u1"}}"#).unwrap();
        drop(f);
        let docs = load_jsonl(&p).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[1].individual_id.as_deref(), Some("u1"));

        let q = dir.path().join("bad.jsonl");
        fs::write(&q, "{\"text\": \"a\", \"label\": \"x\"}\n{\"text\": \"b\"}\nnot json\n").unwrap();
        match load_jsonl(&q) {
            Err(Error::Malformed { errors, .. }) => {
                assert_eq!(errors.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 3]);
                assert!(errors[0].1.contains("label"));
            }
            other => panic!("expected malformed, got {other:?}"),
        }

        let e = dir.path().join("empty.jsonl");
        fs::write(&e, "").unwrap();
        assert!(load_jsonl(&e).unwrap().is_empty());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let items: Vec<u32> = (0..100).collect();
        let (a, b, c) = split(&items, (0.6, 0.2, 0.2), 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (60, 20, 20));
        assert_eq!(split(&items, (0.6, 0.2, 0.2), 5).unwrap(), (a.clone(), b.clone(), c.clone()));
        let mut all: Vec<u32> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split(&items, (0.6, 0.2, 0.3), 5).is_err());
    }

    #[test]
    fn overlap_is_jaccard() {
        assert_eq!(vocabulary_overlap(["a", "b"], ["b", "c"]), 1.0 / 3.0);
    }
}
