use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{MianError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Item,
    Behavior,
    User,
    Context,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Item, Group::Behavior, Group::User, Group::Context];

    pub fn tag(self) -> &'static str {
        match self {
            Group::Item => "item",
            Group::Behavior => "behavior",
            Group::User => "user",
            Group::Context => "context",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Categorical { vocab: usize },
    Numerical,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub group: Group,
}

impl FieldSpec {
    pub fn categorical(name: &str, vocab: usize, group: Group) -> Self {
        Self {
            name: name.to_string(),
            kind: FieldKind::Categorical { vocab },
            group,
        }
    }

    pub fn numerical(name: &str, group: Group) -> Self {
        Self {
            name: name.to_string(),
            kind: FieldKind::Numerical,
            group,
        }
    }

    /// `name:cat:<vocab>` or `name:num`.
    fn encode(&self) -> String {
        match self.kind {
            FieldKind::Categorical { vocab } => format!("{}:cat:{vocab}", self.name),
            FieldKind::Numerical => format!("{}:num", self.name),
        }
    }

    fn decode(s: &str, group: Group) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || MianError::Schema(format!("bad field spec `{s}`"));
        match parts.as_slice() {
            [name, "cat", vocab] => Ok(Self::categorical(name, vocab.parse().map_err(|_| bad())?, group)),
            [name, "num"] => Ok(Self::numerical(name, group)),
            _ => Err(bad()),
        }
    }
}

/// Field layout of a dataset: the four feature groups plus the behavior window length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    pub seq_len: usize,
    pub item: Vec<FieldSpec>,
    pub behavior: Vec<FieldSpec>,
    pub user: Vec<FieldSpec>,
    pub context: Vec<FieldSpec>,
}

pub const HEADER_MAGIC: &str = "#mian-dataset";
pub const HEADER_VERSION: &str = "v1";

impl Schema {
    pub fn group(&self, g: Group) -> &[FieldSpec] {
        match g {
            Group::Item => &self.item,
            Group::Behavior => &self.behavior,
            Group::User => &self.user,
            Group::Context => &self.context,
        }
    }

    /// Number of user fields (`J`).
    pub fn num_user(&self) -> usize {
        self.user.len()
    }

    /// Number of context fields (`K`).
    pub fn num_context(&self) -> usize {
        self.context.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(MianError::Schema("T must be at least 1".into()));
        }
        for g in Group::ALL {
            let fields = self.group(g);
            if fields.is_empty() {
                return Err(MianError::Schema(format!("group `{g}` declares no fields")));
            }
            let mut seen = HashSet::new();
            for f in fields {
                if f.group != g {
                    return Err(MianError::Schema(format!("field `{}` tagged {} inside group {g}", f.name, f.group)));
                }
                if f.name.is_empty() || f.name.contains([':', ',', '\t', '|', '=']) {
                    return Err(MianError::Schema(format!("invalid field name `{}`", f.name)));
                }
                if !seen.insert(f.name.as_str()) {
                    return Err(MianError::Schema(format!("duplicate field `{}` in group {g}", f.name)));
                }
                if let FieldKind::Categorical { vocab: 0 } = f.kind {
                    return Err(MianError::Schema(format!("field `{}` has empty vocabulary", f.name)));
                }
            }
        }
        Ok(())
    }

    /// The dataset header line (without trailing newline).
    pub fn header_line(&self) -> String {
        let group = |g: Group| {
            let fields: Vec<String> = self.group(g).iter().map(FieldSpec::encode).collect();
            format!("{}={}", g.tag(), fields.join(","))
        };
        format!(
            "{HEADER_MAGIC}\t{HEADER_VERSION}\tT={}\tJ={}\tK={}\t{}\t{}\t{}\t{}",
            self.seq_len,
            self.num_user(),
            self.num_context(),
            group(Group::Item),
            group(Group::Behavior),
            group(Group::User),
            group(Group::Context),
        )
    }

    /// First 16 hex digits of the SHA-256 of the header line.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.header_line().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl FromStr for Schema {
    type Err = MianError;

    fn from_str(line: &str) -> Result<Self> {
        let tokens: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        if tokens.len() != 9 || tokens[0] != HEADER_MAGIC {
            return Err(MianError::Schema("missing or malformed dataset header".into()));
        }
        if tokens[1] != HEADER_VERSION {
            return Err(MianError::Schema(format!("unsupported dataset version `{}`", tokens[1])));
        }
        let kv = |tok: &str, key: &str| -> Result<String> {
            tok.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| MianError::Schema(format!("expected `{key}=` in header, found `{tok}`")))
        };
        let num = |tok: &str, key: &str| -> Result<usize> {
            kv(tok, key)?
                .parse()
                .map_err(|_| MianError::Schema(format!("`{key}` is not a count")))
        };
        let seq_len = num(tokens[2], "T")?;
        let j = num(tokens[3], "J")?;
        let k = num(tokens[4], "K")?;
        let fields = |tok: &str, g: Group| -> Result<Vec<FieldSpec>> {
            let body = kv(tok, g.tag())?;
            if body.is_empty() {
                return Ok(Vec::new());
            }
            body.split(',').map(|s| FieldSpec::decode(s, g)).collect()
        };
        let schema = Schema {
            seq_len,
            item: fields(tokens[5], Group::Item)?,
            behavior: fields(tokens[6], Group::Behavior)?,
            user: fields(tokens[7], Group::User)?,
            context: fields(tokens[8], Group::Context)?,
        };
        if schema.num_user() != j || schema.num_context() != k {
            return Err(MianError::Schema(format!(
                "header declares J={j}, K={k} but lists {} user and {} context fields",
                schema.num_user(),
                schema.num_context()
            )));
        }
        schema.validate()?;
        Ok(schema)
    }
}
