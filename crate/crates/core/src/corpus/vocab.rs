use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: usize = 0;
pub const MASK: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;

pub const CLS_TOKEN: &str = "[CLS]";
/// The masking symbol. Masked words are written as this string and map to [`MASK`].
pub const MASK_TOKEN: &str = "*";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

const RESERVED: [&str; 4] = [CLS_TOKEN, MASK_TOKEN, PAD_TOKEN, UNK_TOKEN];

/// Bijection between token strings and ids. Ids 0..4 are reserved.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the reserved entries.
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    /// Reserved entries followed by `tokens` in order, duplicates dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for t in tokens {
            v.insert(t.as_ref());
        }
        v
    }

    /// Returns the id of `token`, adding it if absent.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line number = id.
    pub fn save_txt(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_txt(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(text.lines().map(str::to_string).collect(), path)
    }

    pub(crate) fn from_lines(lines: Vec<String>, origin: &Path) -> Result<Self> {
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 1,
                message: "vocabulary must start with the reserved tokens [CLS], *, [PAD], [UNK]".into(),
            });
        }
        let mut v = Self::new();
        for (i, t) in lines.iter().enumerate().skip(RESERVED.len()) {
            if v.id(t).is_some() {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: format!("duplicate token {t:?}"),
                });
            }
            v.insert(t);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::from_tokens(["flood", "tree"]);
        assert_eq!(v.id(CLS_TOKEN), Some(CLS));
        assert_eq!(v.id(MASK_TOKEN), Some(MASK));
        assert_eq!(v.id(PAD_TOKEN), Some(PAD));
        assert_eq!(v.id(UNK_TOKEN), Some(UNK));
        assert_eq!(v.id("flood"), Some(4));
        assert_eq!(v.token(5), Some("tree"));
    }

    #[test]
    fn txt_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::from_tokens(["a", "b", "c"]);
        v.save_txt(&path).unwrap();
        assert_eq!(Vocab::load_txt(&path).unwrap(), v);
    }

    #[test]
    fn rejects_duplicate_lines() {
        let lines = ["[CLS]", "*", "[PAD]", "[UNK]", "x", "x"]
            .map(String::from)
            .to_vec();
        assert!(Vocab::from_lines(lines, Path::new("v")).is_err());
    }
}
