//! Character vocabulary with reserved control and switching tokens.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const DISF_ON: u32 = 4;
pub const DISF_OFF: u32 = 5;
pub const PUNC_ON: u32 = 6;
pub const PUNC_OFF: u32 = 7;

pub const NUM_RESERVED: u32 = 8;

pub const RESERVED_NAMES: [&str; NUM_RESERVED as usize] = [
    "[pad]",
    "[bos]",
    "[eos]",
    "[unk]",
    "[disf_on]",
    "[disf_off]",
    "[punc_on]",
    "[punc_off]",
];

pub fn is_reserved(id: u32) -> bool {
    id < NUM_RESERVED
}

pub type TokenSequence = Vec<u32>;

/// Bijective map between characters and ids; ids `0..8` are reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the given characters, sorted by code point.
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let sorted: BTreeSet<char> = chars.into_iter().collect();
        let chars: Vec<char> = sorted.into_iter().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + NUM_RESERVED))
            .collect();
        Self { chars, index }
    }

    pub fn size(&self) -> usize {
        self.chars.len() + NUM_RESERVED as usize
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    /// Printable name of an id: the character itself or a bracketed reserved name.
    pub fn token(&self, id: u32) -> Option<String> {
        if is_reserved(id) {
            Some(RESERVED_NAMES[id as usize].to_string())
        } else {
            self.chars.get((id - NUM_RESERVED) as usize).map(|c| c.to_string())
        }
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        text.chars().map(|c| self.id_of(c).unwrap_or(UNK)).collect()
    }

    /// Inverse of [`encode`](Self::encode); reserved ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= self.size() {
                return Err(Error::TokenOutOfRange { id, size: self.size() });
            }
            if !is_reserved(id) {
                out.push(self.chars[(id - NUM_RESERVED) as usize]);
            }
        }
        Ok(out)
    }

    /// `id<TAB>token` per line, reserved ids first. Whitespace characters are
    /// escaped (`\s`, `\t`, `\n`, `\\`) so each entry stays on one line.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (id, name) in RESERVED_NAMES.iter().enumerate() {
            out.push_str(&format!("{id}\t{name}\n"));
        }
        for (i, &c) in self.chars.iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", i as u32 + NUM_RESERVED, escape(c)));
        }
        out
    }

    pub fn from_file_string(text: &str) -> std::result::Result<Self, String> {
        let mut chars = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {line_no}: expected id<TAB>token"))?;
            let id: u32 = id
                .parse()
                .map_err(|_| format!("line {line_no}: bad id {id:?}"))?;
            if id as usize != idx {
                return Err(format!("line {line_no}: ids must be consecutive from 0"));
            }
            if is_reserved(id) {
                if tok != RESERVED_NAMES[idx] {
                    return Err(format!("line {line_no}: reserved id {id} must be {}", RESERVED_NAMES[idx]));
                }
                continue;
            }
            chars.push(unescape(tok).ok_or_else(|| format!("line {line_no}: bad token {tok:?}"))?);
        }
        let vocab = Vocabulary::from_chars(chars.iter().copied());
        if vocab.chars != chars {
            return Err("characters must be unique and sorted by code point".into());
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        })
    }
}

fn escape(c: char) -> String {
    match c {
        ' ' => "\\s".into(),
        '\t' => "\\t".into(),
        '\n' => "\\n".into(),
        '\r' => "\\r".into(),
        '\\' => "\\\\".into(),
        c => c.to_string(),
    }
}

fn unescape(tok: &str) -> Option<char> {
    match tok {
        "\\s" => Some(' '),
        "\\t" => Some('\t'),
        "\\n" => Some('\n'),
        "\\r" => Some('\r'),
        "\\\\" => Some('\\'),
        _ => {
            let mut it = tok.chars();
            let c = it.next()?;
            it.next().is_none().then_some(c)
        }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.chars.iter().map(|c| c.to_string()).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> std::result::Result<Self, String> {
        let chars = tokens
            .iter()
            .map(|t| {
                let mut it = t.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(format!("token {t:?} is not a single character")),
                }
            })
            .collect::<std::result::Result<Vec<char>, String>>()?;
        Ok(Vocabulary::from_chars(chars))
    }
}

/// Collects every character of every source and target.
pub fn build_vocab<'a>(datasets: impl IntoIterator<Item = &'a Dataset>) -> Result<Vocabulary> {
    let mut chars = BTreeSet::new();
    let mut any = false;
    for ds in datasets {
        for p in &ds.pairs {
            any = true;
            chars.extend(p.source.chars());
            chars.extend(p.target.chars());
        }
    }
    if !any {
        return Err(Error::Empty("no pairs to build a vocabulary from".into()));
    }
    Ok(Vocabulary::from_chars(chars))
}
