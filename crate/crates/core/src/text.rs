//! Vocabulary, whitespace tokenisation and the synthetic factor corpus.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::nn::seeded_rng;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Upper bound on the size of an enumerated synthetic corpus.
pub const MAX_CORPUS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Tokens seen at least `min_count` times, in order of first appearance,
    /// after the four reserved specials.
    pub fn build<S: AsRef<str>>(lines: &[S], min_count: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut order = Vec::new();
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                let c = counts.entry(tok).or_insert(0);
                if *c == 0 {
                    order.push(tok);
                }
                *c += 1;
            }
        }
        if order.is_empty() {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(order.into_iter().filter(|t| counts[t] >= min_count && !SPECIALS.contains(t)).map(str::to_string));
        Ok(tokens.into())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[BOS, ids..., EOS]`; unknown words map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(text.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)));
        ids.push(EOS);
        ids
    }

    /// Drops PAD/BOS/EOS and joins with single spaces. UNK is kept as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Token ids with specials removed (UNK retained).
    pub fn content_ids(ids: &[usize]) -> Vec<usize> {
        ids.iter().copied().filter(|&i| i != PAD && i != BOS && i != EOS).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<String>,
    /// One label vector per sentence, all of equal length.
    pub factors: Option<Vec<Vec<usize>>>,
}

impl Corpus {
    pub fn new(sentences: Vec<String>, factors: Option<Vec<Vec<usize>>>) -> Result<Self> {
        if let Some(f) = &factors {
            if f.len() != sentences.len() {
                return Err(Error::data(format!("{} factor rows for {} sentences", f.len(), sentences.len())));
            }
            if let Some(first) = f.first() {
                if f.iter().any(|r| r.len() != first.len()) {
                    return Err(Error::data("factor vectors must all have the same length"));
                }
            }
        }
        Ok(Corpus { sentences, factors })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn encode(&self, vocab: &Vocab) -> Vec<Vec<usize>> {
        self.sentences.iter().map(|s| vocab.encode(s)).collect()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.as_ref().and_then(|f| f.first()).map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Piece {
    Word(String),
    Slot(usize),
}

/// Sentence template with factor slots; every slot choice is one token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub slots: Vec<Slot>,
    pub template: Vec<Piece>,
}

const BANKS: [&[&str]; 5] = [
    &["mars", "jupiter", "venus", "saturn", "mercury", "earth", "moon", "comet", "pluto", "neptune", "uranus", "sun"],
    &["contains", "reflects", "absorbs", "produces", "requires", "releases", "stores", "attracts", "blocks", "carries"],
    &["ice", "water", "light", "heat", "gas", "dust", "rock", "energy", "metal", "oxygen", "carbon", "salt"],
    &["slowly", "quickly", "rarely", "often", "always", "sometimes", "seldom", "usually"],
    &["today", "tonight", "outside", "underground", "nearby", "overhead", "everywhere", "inside"],
];

const KINDS: [&str; 10] = ["planet", "substance", "object", "body", "material", "solid", "liquid", "mineral", "element", "form"];

impl GrammarSpec {
    /// `template` uses `{i}` for slot `i`; other tokens are literal words.
    pub fn new(slots: Vec<Slot>, template: &str) -> Result<Self> {
        let template = template
            .split_whitespace()
            .map(|tok| match tok.strip_prefix('{').and_then(|r| r.strip_suffix('}')).map(str::parse::<usize>) {
                Some(Ok(i)) => Piece::Slot(i),
                Some(Err(_)) => Piece::Word(tok.to_string()),
                None => Piece::Word(tok.to_string()),
            })
            .collect();
        let spec = GrammarSpec { slots, template };
        spec.validate()?;
        Ok(spec)
    }

    /// Built-in lexicon with the given slot sizes. Two slots use the
    /// taxonomic template `{0} is a kind of {1}`.
    pub fn with_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::data("at least one slot is required"));
        }
        let pick = |bank: &[&str], slot: usize, n: usize| -> Vec<String> {
            (0..n).map(|j| bank.get(j).map_or_else(|| format!("s{slot}w{j}"), |w| w.to_string())).collect()
        };
        let (slots, template) = if sizes.len() == 2 {
            (
                vec![
                    Slot { name: "subject".into(), choices: pick(BANKS[0], 0, sizes[0]) },
                    Slot { name: "kind".into(), choices: pick(&KINDS, 1, sizes[1]) },
                ],
                "{0} is a kind of {1}".to_string(),
            )
        } else {
            let names = ["subject", "relation", "object", "manner", "place"];
            let slots = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let bank: &[&str] = BANKS.get(i).copied().unwrap_or(&[]);
                    Slot { name: names.get(i).map_or_else(|| format!("slot{i}"), |s| s.to_string()), choices: pick(bank, i, n) }
                })
                .collect();
            let template = (0..sizes.len()).map(|i| format!("{{{i}}}")).collect::<Vec<_>>().join(" ");
            (slots, template)
        };
        Self::new(slots, &template)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.choices.len() < 2 {
                return Err(Error::data(format!("slot `{}` needs at least two choices", slot.name)));
            }
            for c in &slot.choices {
                if c.is_empty() || c.contains(char::is_whitespace) {
                    return Err(Error::data(format!("slot choice `{c}` must be a single token")));
                }
                if seen.insert(c, i).is_some() {
                    return Err(Error::data(format!("word `{c}` appears in more than one slot position")));
                }
            }
        }
        for piece in &self.template {
            match piece {
                Piece::Slot(i) if *i >= self.slots.len() => {
                    return Err(Error::data(format!("template references missing slot {i}")));
                }
                Piece::Word(w) if seen.contains_key(w.as_str()) => {
                    return Err(Error::data(format!("template word `{w}` collides with a slot choice")));
                }
                _ => {}
            }
        }
        for i in 0..self.slots.len() {
            if !self.template.contains(&Piece::Slot(i)) {
                return Err(Error::data(format!("slot {i} does not appear in the template")));
            }
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.choices.len()).collect()
    }

    pub fn combinations(&self) -> usize {
        self.slots.iter().map(|s| s.choices.len()).fold(1usize, |acc, n| acc.saturating_mul(n))
    }

    pub fn render(&self, factors: &[usize]) -> String {
        self.template
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.as_str(),
                Piece::Slot(i) => self.slots[*i].choices[factors[*i]].as_str(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Recover slot choices from a rendered sentence.
    pub fn parse(&self, sentence: &str) -> Option<Vec<usize>> {
        let toks: Vec<&str> = sentence.split_whitespace().collect();
        if toks.len() != self.template.len() {
            return None;
        }
        let mut factors = vec![usize::MAX; self.slots.len()];
        for (tok, piece) in toks.iter().zip(&self.template) {
            match piece {
                Piece::Word(w) if w == tok => {}
                Piece::Word(_) => return None,
                Piece::Slot(i) => {
                    let k = self.slots[*i].choices.iter().position(|c| c == tok)?;
                    if factors[*i] != usize::MAX && factors[*i] != k {
                        return None;
                    }
                    factors[*i] = k;
                }
            }
        }
        Some(factors)
    }
}

/// Full cross product of slot choices in a seeded order, labelled with the
/// per-slot choice indices.
pub fn generate_synthetic_corpus(spec: &GrammarSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let total = spec.combinations();
    if total > MAX_CORPUS {
        return Err(Error::data(format!("cross product of {total} sentences exceeds the cap of {MAX_CORPUS}")));
    }
    let sizes = spec.sizes();
    let mut labels: Vec<Vec<usize>> = (0..total)
        .map(|mut n| {
            let mut f = vec![0; sizes.len()];
            for (slot, &size) in sizes.iter().enumerate().rev() {
                f[slot] = n % size;
                n /= size;
            }
            f
        })
        .collect();
    labels.shuffle(&mut seeded_rng(seed));
    let sentences = labels.iter().map(|f| spec.render(f)).collect();
    Corpus::new(sentences, Some(labels))
}

/// Non-empty trimmed lines of a UTF-8 file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
}

pub fn factor_tsv(corpus: &Corpus) -> Result<String> {
    let factors = corpus.factors.as_ref().ok_or_else(|| Error::data("corpus has no factor labels"))?;
    let mut out = String::from("sentence");
    for k in 0..corpus.num_factors() {
        write!(out, "\tf{k}").unwrap();
    }
    out.push('\n');
    for (s, f) in corpus.sentences.iter().zip(factors) {
        out.push_str(s);
        for v in f {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parse a `sentence<TAB>f0<TAB>f1...` file.
pub fn parse_factor_tsv(text: &str) -> Result<Corpus> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::data("empty factor TSV"))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.first() != Some(&"sentence") {
        return Err(Error::data("factor TSV header must start with `sentence`"));
    }
    let nf = cols.len() - 1;
    let mut sentences = Vec::new();
    let mut factors = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != nf + 1 {
            return Err(Error::data(format!("row {}: expected {} columns, got {}", lineno + 2, nf + 1, fields.len())));
        }
        sentences.push(fields[0].trim().to_string());
        let row = fields[1..]
            .iter()
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::data(format!("row {}: {e}", lineno + 2)))?;
        factors.push(row);
    }
    Corpus::new(sentences, Some(factors))
}
