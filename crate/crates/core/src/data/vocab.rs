use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;
/// Integer-encoded symbol sequence without start/end markers.
pub type TokenSequence = Vec<TokenId>;

pub const SOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
pub const RESERVED: [&str; 3] = ["<sos>", "<eos>", "<pad>"];

/// Bijective map between symbol strings and ids; ids 0..3 are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from symbol tokens (reserved markers are prepended).
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for s in symbols {
            let s = s.as_ref();
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid token {s:?}")));
            }
            if ids.contains_key(s) {
                return Err(Error::Vocabulary(format!("duplicate token {s:?}")));
            }
            ids.insert(s.to_string(), tokens.len() as TokenId);
            tokens.push(s.to_string());
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Number of classes K seen by the decoder, reserved ids included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Symbol tokens, reserved entries excluded.
    pub fn symbols(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    /// Splits on single spaces and maps each token; reserved markers are rejected.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        text.split(' ')
            .map(|t| match self.id(t) {
                Some(id) if !Self::is_reserved(id) => Ok(id),
                Some(_) => Err(Error::Vocabulary(format!("reserved marker {t:?} inside a target"))),
                None => Err(Error::Vocabulary(format!("unknown token {t:?}"))),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let parts: Result<Vec<&str>> = ids
            .iter()
            .map(|&i| {
                self.token(i)
                    .ok_or_else(|| Error::Vocabulary(format!("token id {i} outside vocabulary of {}", self.len())))
            })
            .collect();
        Ok(parts?.join(" "))
    }

    /// One token per line; the first three lines are the reserved markers, so
    /// the 0-based line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Vocabulary(format!(
                "vocabulary must start with the reserved markers {RESERVED:?}"
            )));
        }
        Self::new(&lines[RESERVED.len()..])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_roundtrip() {
        let v = Vocabulary::new(&["x", "+", "1"]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<sos>"), Some(SOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<pad>"), Some(PAD));
        let ids = v.tokenize("x + 1").unwrap();
        assert_eq!(ids, vec![3, 4, 5]);
        assert_eq!(v.detokenize(&ids).unwrap(), "x + 1");
        assert_eq!(Vocabulary::parse(&v.to_file_string()).unwrap(), v);
    }

    #[test]
    fn bad_tokens() {
        let v = Vocabulary::new(&["x"]).unwrap();
        assert!(matches!(v.tokenize("x y"), Err(Error::Vocabulary(_))));
        assert!(matches!(v.tokenize("x <eos>"), Err(Error::Vocabulary(_))));
        assert!(Vocabulary::new(&["x", "x"]).is_err());
        assert!(Vocabulary::parse("x\ny\n").is_err());
    }
}
