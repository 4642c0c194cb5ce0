//! Surrogate confounder vocabularies: rule-based (subject, verb, object)
//! extraction from captions and per-set prior probabilities
//! `p(z) = #z / sum_i #i`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARTICLES: &[&str] = &["a", "an", "the"];
const AUXILIARIES: &[&str] = &["is", "are", "was", "were", "be", "been", "being", "to"];
/// Prepositions that terminate the direct-object zone.
const ZONE_PREPS: &[&str] =
    &["into", "onto", "with", "in", "on", "at", "of", "from", "by", "for", "under", "over"];
/// Prepositions whose object may stand in when there is no direct object.
const FALLBACK_PREPS: &[&str] = &["into", "onto", "with"];

/// One verb-centered relation tuple. Empty fields mean "not found".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvoTuple {
    #[serde(default)]
    pub subject: String,
    #[serde(default)]
    pub verb: String,
    #[serde(default)]
    pub object: String,
}

/// Lowercase word tokens; splits on anything that is not alphanumeric,
/// a hyphen, or an apostrophe.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .filter(|s| !s.is_empty())
        .map(|s| s.to_string())
        .collect()
}

fn has_verbal_suffix(tok: &str) -> bool {
    tok.len() > 3 && (tok.ends_with("ing") || tok.ends_with("ed"))
        || tok.len() > 2 && tok.ends_with('s')
}

fn is_article(tok: &str) -> bool {
    ARTICLES.contains(&tok)
}

fn is_aux(tok: &str) -> bool {
    AUXILIARIES.contains(&tok)
}

fn is_zone_prep(tok: &str) -> bool {
    ZONE_PREPS.contains(&tok)
}

/// Deterministic SVO heuristic. Exact on the synthetic query template
/// "<role> <action> a <object>"; approximate on free text. The verb scan
/// prefers tokens with a verbal suffix (-ing/-ed/-es/-s) so that passive
/// participles after auxiliaries ("are shown throwing ...") do not shadow
/// the content verb; the object is the head (last) token of the direct
/// object zone before any preposition.
pub fn extract_svo(caption: &str) -> SvoTuple {
    let tokens = tokenize(caption);
    let mut out = SvoTuple { subject: String::new(), verb: String::new(), object: String::new() };

    let mut pos = 0;
    while pos < tokens.len() && is_article(&tokens[pos]) {
        pos += 1;
    }
    if pos >= tokens.len() {
        return out;
    }

    // Subject: the first remaining token, unless it already looks like a
    // gerund or an auxiliary (single-verb captions have no subject).
    let first = &tokens[pos];
    if !is_aux(first) && !(first.len() > 3 && first.ends_with("ing")) {
        out.subject = first.clone();
        pos += 1;
    }

    // Verb: first suffix-bearing token outside the stoplists; fall back to
    // the first plain content token when no inflected form exists.
    let mut verb_at = None;
    let mut fallback_at = None;
    for (i, tok) in tokens.iter().enumerate().skip(pos) {
        if is_aux(tok) || is_article(tok) || is_zone_prep(tok) {
            continue;
        }
        if has_verbal_suffix(tok) {
            verb_at = Some(i);
            break;
        }
        if fallback_at.is_none() {
            fallback_at = Some(i);
        }
    }
    let verb_at = match verb_at.or(fallback_at) {
        Some(i) => i,
        None => return out,
    };
    out.verb = tokens[verb_at].clone();

    // Object: head of the direct-object zone; otherwise, the object of the
    // first into/onto/with phrase.
    let rest = &tokens[verb_at + 1..];
    let zone_end = rest.iter().position(|t| is_zone_prep(t)).unwrap_or(rest.len());
    let direct: Vec<&String> =
        rest[..zone_end].iter().filter(|t| !is_article(t) && !is_aux(t)).collect();
    if let Some(head) = direct.last() {
        out.object = (*head).clone();
    } else if zone_end < rest.len() && FALLBACK_PREPS.contains(&rest[zone_end].as_str()) {
        let after = &rest[zone_end + 1..];
        let end = after.iter().position(|t| is_zone_prep(t)).unwrap_or(after.len());
        let indirect: Vec<&String> =
            after[..end].iter().filter(|t| !is_article(t) && !is_aux(t)).collect();
        if let Some(head) = indirect.last() {
            out.object = (*head).clone();
        }
    }
    out
}

/// Which of the three confounder sets a phrase belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SetId {
    Role,
    Action,
    Object,
}

impl fmt::Display for SetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SetId::Role => write!(f, "role"),
            SetId::Action => write!(f, "action"),
            SetId::Object => write!(f, "object"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseEntry {
    pub phrase: String,
    pub count: u64,
    pub prior: f64,
}

/// One confounder set: phrases with occurrence counts and normalized priors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhraseSet {
    pub entries: Vec<PhraseEntry>,
}

impl PhraseSet {
    fn from_counts(counts: BTreeMap<String, u64>) -> Self {
        let total: u64 = counts.values().sum();
        let entries = counts
            .into_iter()
            .map(|(phrase, count)| PhraseEntry {
                phrase,
                count,
                prior: count as f64 / total as f64,
            })
            .collect();
        PhraseSet { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prior(&self, phrase: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.phrase == phrase).map(|e| e.prior)
    }

    pub fn priors(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.prior).collect()
    }
}

/// The three phrase sets with priors (roles, actions, objects).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfounderVocab {
    pub roles: PhraseSet,
    pub actions: PhraseSet,
    pub objects: PhraseSet,
    /// Hash of whatever configuration produced the source captions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_hash: Option<String>,
}

impl ConfounderVocab {
    pub fn set(&self, id: SetId) -> &PhraseSet {
        match id {
            SetId::Role => &self.roles,
            SetId::Action => &self.actions,
            SetId::Object => &self.objects,
        }
    }

    pub fn prior(&self, id: SetId, phrase: &str) -> Result<f64> {
        self.set(id)
            .prior(phrase)
            .ok_or_else(|| Error::VocabLookup { set: id.to_string(), phrase: phrase.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json("confounder vocab", e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}

/// Build the confounder vocabulary by running the SVO heuristic over captions.
pub fn build_vocab(captions: &[String]) -> Result<ConfounderVocab> {
    if captions.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from zero captions".into()));
    }
    let tuples: Vec<SvoTuple> = captions.iter().map(|c| extract_svo(c)).collect();
    Ok(vocab_from_tuples(&tuples))
}

/// Build the vocabulary from externally produced SVO tuples (bypasses the
/// heuristic; the import path for real corpora).
pub fn vocab_from_tuples(tuples: &[SvoTuple]) -> ConfounderVocab {
    let mut roles: BTreeMap<String, u64> = BTreeMap::new();
    let mut actions: BTreeMap<String, u64> = BTreeMap::new();
    let mut objects: BTreeMap<String, u64> = BTreeMap::new();
    for t in tuples {
        if !t.subject.is_empty() {
            *roles.entry(t.subject.clone()).or_insert(0) += 1;
        }
        if !t.verb.is_empty() {
            *actions.entry(t.verb.clone()).or_insert(0) += 1;
        }
        if !t.object.is_empty() {
            *objects.entry(t.object.clone()).or_insert(0) += 1;
        }
    }
    ConfounderVocab {
        roles: PhraseSet::from_counts(roles),
        actions: PhraseSet::from_counts(actions),
        objects: PhraseSet::from_counts(objects),
        source_hash: None,
    }
}

/// Read `{subject, verb, object}` records from a JSON Lines file.
pub fn load_svo_jsonl(path: &Path) -> Result<Vec<SvoTuple>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tuples = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: SvoTuple = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), lineno + 1), e))?;
        tuples.push(t);
    }
    Ok(tuples)
}

/// Query-token vocabulary for the trainable word embeddings. Id 0 is the
/// out-of-vocabulary bucket.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    words: Vec<String>,
}

pub const UNK_TOKEN: &str = "<unk>";

impl TokenVocab {
    pub fn build<S: AsRef<str>>(texts: &[S]) -> Self {
        let uniq: BTreeSet<String> =
            texts.iter().flat_map(|t| tokenize(t.as_ref())).collect();
        let mut words = vec![UNK_TOKEN.to_string()];
        words.extend(uniq);
        TokenVocab { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .into_iter()
            .map(|tok| self.words.iter().position(|w| *w == tok).unwrap_or(0))
            .collect()
    }
}
