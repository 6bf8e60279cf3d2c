use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{read_to_string, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotKind {
    Noun,
    Verb,
    Adj,
    Prep,
}

impl FromStr for SlotKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "noun" => Ok(Self::Noun),
            "verb" => Ok(Self::Verb),
            "adj" => Ok(Self::Adj),
            "prep" => Ok(Self::Prep),
            other => Err(format!("unknown slot type `{other}`")),
        }
    }
}

/// Which half of the unpaired data a template or filler belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Corpus,
    Image,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Corpus => "corpus",
            Domain::Image => "image",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    Slot(SlotKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub pieces: Vec<Piece>,
    pub domains: Vec<Domain>,
}

/// Template grammar with typed slots. Nouns are shared across domains and
/// double as the visual dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub templates: Vec<Template>,
    fillers: HashMap<(SlotKind, Option<Domain>), Vec<String>>,
}

const DESK: &str = include_str!("../../data/desk_grammar.txt");

impl Grammar {
    /// The grammar shipped with the crate (about 120 vocabulary words).
    pub fn desk_default() -> Self {
        Self::parse(DESK, "desk_grammar.txt").expect("bundled grammar parses")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Parse {
            path: origin.to_string(),
            line,
            detail,
        };
        let mut templates = Vec::new();
        let mut fillers: HashMap<(SlotKind, Option<Domain>), Vec<String>> = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, body) = line
                .split_once(':')
                .ok_or_else(|| err(n + 1, "expected `key: values`".into()))?;
            let (key, domain) = match head.trim().split_once('@') {
                Some((k, "corpus")) => (k, Some(Domain::Corpus)),
                Some((k, "image")) => (k, Some(Domain::Image)),
                Some((_, d)) => return Err(err(n + 1, format!("unknown domain `{d}`"))),
                None => (head.trim(), None),
            };
            let words = body.split_whitespace().map(str::to_lowercase);
            if key == "template" {
                let pieces = words
                    .map(|w| match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                        Some(slot) => slot.parse().map(Piece::Slot).map_err(|e| err(n + 1, e)),
                        None => Ok(Piece::Word(w)),
                    })
                    .collect::<Result<Vec<_>>>()?;
                if !(4..=12).contains(&pieces.len()) {
                    return Err(err(n + 1, format!("template has {} tokens, need 4..=12", pieces.len())));
                }
                let domains = domain.map_or(vec![Domain::Corpus, Domain::Image], |d| vec![d]);
                templates.push(Template { pieces, domains });
            } else {
                let kind: SlotKind = key.parse().map_err(|e| err(n + 1, e))?;
                if kind == SlotKind::Noun && domain.is_some() {
                    return Err(err(n + 1, "nouns are shared and take no domain".into()));
                }
                fillers.entry((kind, domain)).or_default().extend(words);
            }
        }
        let g = Self { templates, fillers };
        g.validate(origin)?;
        Ok(g)
    }

    fn validate(&self, origin: &str) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: 0,
                detail: "grammar has no templates".into(),
            });
        }
        for t in &self.templates {
            for &d in &t.domains {
                for p in &t.pieces {
                    if let Piece::Slot(k) = p {
                        let need = t.pieces.iter().filter(|q| *q == p).count();
                        if self.slot_fillers(*k, d).len() < need {
                            return Err(Error::Parse {
                                path: origin.to_string(),
                                line: 0,
                                detail: format!("not enough {k:?} fillers for the {d} domain"),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Fillers for a slot in a domain: domain-specific words plus shared ones.
    pub fn slot_fillers(&self, kind: SlotKind, domain: Domain) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for key in [(kind, None), (kind, Some(domain))] {
            if let Some(ws) = self.fillers.get(&key) {
                out.extend(ws.iter().map(String::as_str));
            }
        }
        out
    }

    pub fn nouns(&self) -> Vec<&str> {
        self.slot_fillers(SlotKind::Noun, Domain::Corpus)
    }

    pub fn templates_for(&self, domain: Domain) -> Vec<&Template> {
        self.templates.iter().filter(|t| t.domains.contains(&domain)).collect()
    }

    /// Every word the grammar can emit, in first-seen order.
    pub fn all_words(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        let mut push = |w: &str| {
            if seen.insert(w.to_string()) {
                out.push(w.to_string());
            }
        };
        for t in &self.templates {
            for p in &t.pieces {
                if let Piece::Word(w) = p {
                    push(w);
                }
            }
        }
        let mut keys: Vec<_> = self.fillers.keys().copied().collect();
        keys.sort_by_key(|(k, d)| (*k, d.map(|d| d == Domain::Image)));
        for k in keys {
            for w in &self.fillers[&k] {
                push(w);
            }
        }
        out
    }

    /// Samples one sentence from `template`; repeated slots of one kind get distinct fillers.
    pub fn fill(&self, template: &Template, domain: Domain, rng: &mut impl Rng) -> Vec<String> {
        let mut used: HashMap<SlotKind, Vec<&str>> = HashMap::new();
        let mut out = Vec::with_capacity(template.pieces.len());
        for p in &template.pieces {
            match p {
                Piece::Word(w) => out.push(w.clone()),
                Piece::Slot(k) => {
                    let pool = self.slot_fillers(*k, domain);
                    let taken = used.entry(*k).or_default();
                    let choice = loop {
                        let c = *pool.choose(rng).expect("validated non-empty");
                        if !taken.contains(&c) {
                            break c;
                        }
                    };
                    taken.push(choice);
                    out.push(choice.to_string());
                }
            }
        }
        out
    }

    /// Draws a template uniformly, returning its index and the sentence.
    pub fn sample(&self, domain: Domain, rng: &mut impl Rng) -> (usize, Vec<String>) {
        let ts = self.templates_for(domain);
        let k = rng.random_range(0..ts.len());
        let idx = self
            .templates
            .iter()
            .position(|t| std::ptr::eq(t, ts[k]))
            .expect("template from self");
        (idx, self.fill(ts[k], domain, rng))
    }
}
