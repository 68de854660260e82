//! Learned token embeddings standing in for a text encoder.

use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::diffmath::{container, ParamVector, SeedRng};
use crate::{Error, Result};

pub const TOKEN_PREFIX: &str = "token";
pub const IDENTIFIER_LEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Class,
    Identifier,
    Edit,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "tokens")]
pub enum ConditionTag {
    Null,
    Class(String),
    Identifier(String, String),
    Edit(String),
}

/// A conditioning vector and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub embedding: Vec<f64>,
    pub tag: ConditionTag,
}

impl Condition {
    /// The reserved all-zeros condition used for unconditional prediction.
    pub fn null(dim: usize) -> Self {
        Self {
            embedding: vec![0.0; dim],
            tag: ConditionTag::Null,
        }
    }

    pub fn is_null(&self) -> bool {
        self.tag == ConditionTag::Null
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub name: String,
    pub kind: TokenKind,
    pub frozen: bool,
}

/// Closed vocabulary of class nouns, edit prompts and per-keyframe
/// identifiers, each with a `dim`-wide embedding in `params`
/// (`token.<name>`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBook {
    pub dim: usize,
    pub entries: Vec<ConceptEntry>,
    pub params: ParamVector,
}

pub fn token_group(name: &str) -> String {
    format!("{TOKEN_PREFIX}.{name}")
}

pub fn validate_identifier(id: &str) -> Result<()> {
    if id.len() != IDENTIFIER_LEN || !id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()) {
        return Err(Error::invalid(format!(
            "identifier `{id}` must be {IDENTIFIER_LEN} lowercase letters or digits"
        )));
    }
    Ok(())
}

impl ConceptBook {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("condition width must be positive".into()));
        }
        Ok(Self {
            dim,
            entries: Vec::new(),
            params: ParamVector::new(),
        })
    }

    pub fn entry(&self, name: &str) -> Option<&ConceptEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self, kind: TokenKind) -> Vec<&str> {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.name.as_str()).collect()
    }

    /// Register a token with a random embedding of the given scale.
    pub fn add(&mut self, name: &str, kind: TokenKind, rng: &mut SeedRng, scale: f64) -> Result<()> {
        if name.is_empty() || name.contains(['.', '/', ' ']) {
            return Err(Error::invalid(format!("bad token name `{name}`")));
        }
        if kind == TokenKind::Identifier {
            validate_identifier(name)?;
        }
        if self.entry(name).is_some() {
            return Err(Error::invalid(format!("token `{name}` already registered")));
        }
        let v = rng.normal_vec(self.dim).into_iter().map(|x| x * scale).collect();
        self.params.add_group(&token_group(name), &[self.dim], v)?;
        self.entries.push(ConceptEntry {
            name: name.to_string(),
            kind,
            frozen: false,
        });
        Ok(())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let e = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::invalid(format!("unknown token `{name}`")))?;
        e.frozen = frozen;
        Ok(())
    }

    pub fn embedding(&self, name: &str) -> Result<&[f64]> {
        if self.entry(name).is_none() {
            return Err(Error::invalid(format!("unknown token `{name}`")));
        }
        self.params.group(&token_group(name))
    }

    fn sum(&self, names: &[&str]) -> Result<Vec<f64>> {
        let mut s = vec![0.0; self.dim];
        for n in names {
            for (a, b) in s.iter_mut().zip(self.embedding(n)?) {
                *a += b;
            }
        }
        Ok(s)
    }

    pub fn class(&self, class: &str) -> Result<Condition> {
        Ok(Condition {
            embedding: self.sum(&[class])?,
            tag: ConditionTag::Class(class.to_string()),
        })
    }

    /// "photo of a [identifier] [class]": identifier plus class embedding.
    pub fn identifier(&self, id: &str, class: &str) -> Result<Condition> {
        match self.entry(id) {
            Some(e) if e.kind == TokenKind::Identifier => {}
            _ => return Err(Error::invalid(format!("`{id}` is not a registered identifier"))),
        }
        Ok(Condition {
            embedding: self.sum(&[id, class])?,
            tag: ConditionTag::Identifier(id.to_string(), class.to_string()),
        })
    }

    pub fn edit(&self, prompt: &str) -> Result<Condition> {
        Ok(Condition {
            embedding: self.sum(&[prompt])?,
            tag: ConditionTag::Edit(prompt.to_string()),
        })
    }

    pub fn null(&self) -> Condition {
        Condition::null(self.dim)
    }

    /// Resolve a tag back to its current embedding.
    pub fn resolve(&self, tag: &ConditionTag) -> Result<Condition> {
        match tag {
            ConditionTag::Null => Ok(self.null()),
            ConditionTag::Class(c) => self.class(c),
            ConditionTag::Identifier(i, c) => self.identifier(i, c),
            ConditionTag::Edit(p) => self.edit(p),
        }
    }

    /// Whether a parameter group is an unfrozen token embedding.
    pub fn is_trainable_group(&self, group: &str) -> bool {
        group
            .strip_prefix(TOKEN_PREFIX)
            .and_then(|r| r.strip_prefix('.'))
            .and_then(|n| self.entry(n))
            .is_some_and(|e| !e.frozen)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&BookMeta {
            kind: "concept_book".into(),
            dim: self.dim,
            entries: self.entries.clone(),
        })
        .expect("book meta serializes");
        container::encode(&self.params, &meta, container::Dtype::F64)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck = container::decode(bytes)?;
        let meta: BookMeta = serde_json::from_str(&ck.meta).map_err(|e| Error::Format {
            what: "concept book",
            detail: e.to_string(),
        })?;
        if meta.kind != "concept_book" {
            return Err(Error::Format {
                what: "concept book",
                detail: format!("checkpoint holds `{}`", meta.kind),
            });
        }
        if ck.params.groups().len() != meta.entries.len() {
            return Err(Error::Format {
                what: "concept book",
                detail: "embedding count differs from the token list".into(),
            });
        }
        Self::from_parts(meta.dim, meta.entries, ck.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn entries_json(&self) -> Result<String> {
        serde_json::to_string(&self.entries).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_parts(dim: usize, entries: Vec<ConceptEntry>, params: ParamVector) -> Result<Self> {
        let mut book = Self::new(dim)?;
        for e in &entries {
            if book.entry(&e.name).is_some() {
                return Err(Error::Format {
                    what: "concept book",
                    detail: format!("duplicate token `{}`", e.name),
                });
            }
            if e.kind == TokenKind::Identifier {
                validate_identifier(&e.name)?;
            }
            let g = params.group(&token_group(&e.name)).map_err(|_| Error::Format {
                what: "concept book",
                detail: format!("missing embedding for `{}`", e.name),
            })?;
            if g.len() != dim {
                return Err(Error::Format {
                    what: "concept book",
                    detail: format!("embedding for `{}` has width {}, expected {dim}", e.name, g.len()),
                });
            }
            book.entries.push(e.clone());
        }
        book.params = params;
        Ok(book)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BookMeta {
    kind: String,
    dim: usize,
    entries: Vec<ConceptEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book() -> ConceptBook {
        let mut b = ConceptBook::new(4).unwrap();
        let mut rng = SeedRng::new(1);
        b.add("warm", TokenKind::Class, &mut rng, 1.0).unwrap();
        b.add("abcdefghij", TokenKind::Identifier, &mut rng, 0.1).unwrap();
        b
    }

    #[test]
    fn identifier_rules() {
        let mut b = book();
        let mut rng = SeedRng::new(2);
        assert!(b.add("abcdefghij", TokenKind::Identifier, &mut rng, 0.1).is_err());
        assert!(b.add("short", TokenKind::Identifier, &mut rng, 0.1).is_err());
        assert!(b.add("ABCDEFGHIJ", TokenKind::Identifier, &mut rng, 0.1).is_err());
        assert!(b.add("0123456789", TokenKind::Identifier, &mut rng, 0.1).is_ok());
    }

    #[test]
    fn identifier_condition_is_sum() {
        let b = book();
        let c = b.identifier("abcdefghij", "warm").unwrap();
        for k in 0..4 {
            let e = b.embedding("abcdefghij").unwrap()[k] + b.embedding("warm").unwrap()[k];
            assert_eq!(c.embedding[k], e);
        }
        assert!(b.null().embedding.iter().all(|&v| v == 0.0));
        assert_eq!(b.resolve(&c.tag).unwrap(), c);
        assert!(b.identifier("warm", "warm").is_err());
    }

    #[test]
    fn frozen_tokens_are_not_trainable() {
        let mut b = book();
        assert!(b.is_trainable_group("token.warm"));
        b.set_frozen("warm", true).unwrap();
        assert!(!b.is_trainable_group("token.warm"));
        assert!(b.is_trainable_group("token.abcdefghij"));
        assert!(!b.is_trainable_group("tokenx.abcdefghij"));
    }

    #[test]
    fn rebuild_from_parts() {
        let b = book();
        let r = ConceptBook::from_parts(4, b.entries.clone(), b.params.clone()).unwrap();
        assert_eq!(r, b);
        assert!(ConceptBook::from_parts(5, b.entries.clone(), b.params.clone()).is_err());
    }

    #[test]
    fn book_bytes_round_trip() {
        let b = book();
        assert_eq!(ConceptBook::from_bytes(&b.to_bytes()).unwrap(), b);
        let mut bytes = b.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(ConceptBook::from_bytes(&bytes).is_err());
    }
}
