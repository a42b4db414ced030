//! Token inventory. Ids `0..len` are real tokens; the KEEP and BLANK labels
//! sit just past the end (`len` and `len + 1`) and are never serialized.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a real token in a [`Vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Vocab(format!("token {i} is empty")));
            }
            if tok.chars().any(|c| c == '\n' || c == '\r') {
                return Err(Error::Vocab(format!("token {i} contains a line break")));
            }
            if index.insert(tok.clone(), TokenId(i as u32)).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        if tokens.len() >= u32::MAX as usize - 2 {
            return Err(Error::Vocab("too many tokens".into()));
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Lattice column of the KEEP label.
    pub fn keep_column(&self) -> usize {
        self.tokens.len()
    }

    /// Lattice column of the BLANK label in a copy-aware lattice.
    pub fn blank_column(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.tokens.len()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref()).ok_or_else(|| Error::UnknownToken {
                    token: t.as_ref().to_string(),
                    line: None,
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(Error::UnknownTokenId(id.0))
            })
            .collect()
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocab::new(text.lines())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Vocab::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_columns_follow_tokens() {
        let v = Vocab::new(["a", "b", "c"]).unwrap();
        assert_eq!(v.keep_column(), 3);
        assert_eq!(v.blank_column(), 4);
        assert!(!v.contains(TokenId(3)));
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        assert!(Vocab::new(["a", "a"]).is_err());
        assert!(Vocab::new(["a", ""]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let v = Vocab::new(["I", "like", "an", "dog", "dogs"]).unwrap();
        let text = v.to_text();
        assert_eq!(text, "I\nlike\nan\ndog\ndogs\n");
        assert_eq!(Vocab::from_text(&text).unwrap(), v);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(TokenId(i as u32)));
            assert_eq!(v.token(TokenId(i as u32)), Some(t.as_str()));
        }
    }

    #[test]
    fn encode_reports_unknown() {
        let v = Vocab::new(["a"]).unwrap();
        match v.encode(&["a", "zz"]) {
            Err(Error::UnknownToken { token, .. }) => assert_eq!(token, "zz"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
