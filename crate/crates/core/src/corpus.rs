//! API corpus and invocation database.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::value::ValueRepr;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is not valid JSON for the corpus schema: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema violation in entry {entry}: {reason}")]
    Schema { entry: String, reason: String },
    #[error("duplicate api {0}")]
    DuplicateApi(String),
    #[error("unknown api {0}")]
    UnknownApi(String),
    #[error("invocation of {api} does not fit its signature: {reason}")]
    Arity { api: String, reason: String },
}

/// One argument of an API signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgSpec {
    pub name: String,
    pub position: usize,
    #[serde(default)]
    pub optional: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ValueRepr>,
    #[serde(default)]
    pub observed_types: BTreeSet<String>,
}

impl ArgSpec {
    pub fn required(name: impl Into<String>, position: usize) -> Self {
        Self {
            name: name.into(),
            position,
            optional: false,
            default: None,
            observed_types: BTreeSet::new(),
        }
    }

    pub fn with_default(name: impl Into<String>, position: usize, default: ValueRepr) -> Self {
        Self {
            name: name.into(),
            position,
            optional: true,
            default: Some(default),
            observed_types: BTreeSet::new(),
        }
    }

    pub fn with_types<I, S>(mut self, types: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.observed_types = types.into_iter().map(Into::into).collect();
        self
    }
}

/// A documented API. Method-style APIs carry their receiver as argument 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiEntry {
    pub name: String,
    #[serde(default)]
    pub args: Vec<ArgSpec>,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub code_blocks: Vec<String>,
    /// Outputs depend on hidden randomness; value comparison is skipped.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub nondeterministic: bool,
}

impl ApiEntry {
    pub fn new(name: impl Into<String>, args: Vec<ArgSpec>) -> Self {
        Self {
            name: name.into(),
            args,
            description: String::new(),
            code_blocks: Vec::new(),
            nondeterministic: false,
        }
    }

    pub fn arity(&self) -> usize {
        self.args.len()
    }

    pub fn arg(&self, name: &str) -> Option<&ArgSpec> {
        self.args.iter().find(|a| a.name == name)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let schema = |reason: String| CorpusError::Schema {
            entry: self.name.clone(),
            reason,
        };
        if self.name.trim().is_empty() {
            return Err(schema("empty api name".into()));
        }
        let mut seen = BTreeSet::new();
        for (i, arg) in self.args.iter().enumerate() {
            if arg.position != i {
                return Err(schema(format!(
                    "argument {} has position {}, expected {}",
                    arg.name, arg.position, i
                )));
            }
            if !seen.insert(arg.name.as_str()) {
                return Err(schema(format!("argument name {} repeated", arg.name)));
            }
            if arg.optional != arg.default.is_some() {
                return Err(schema(format!(
                    "argument {}: optional arguments need a default and required ones must not have one",
                    arg.name
                )));
            }
            if let Some(d) = &arg.default {
                d.validate().map_err(schema)?;
            }
        }
        Ok(())
    }

    /// Binds an invocation to a full by-position value list, filling defaults.
    pub fn bind(&self, rec: &InvocationRecord) -> Result<Vec<ValueRepr>, CorpusError> {
        let arity = |reason: String| CorpusError::Arity {
            api: self.name.clone(),
            reason,
        };
        if rec.positional.len() > self.args.len() {
            return Err(arity(format!(
                "{} positional values for {} arguments",
                rec.positional.len(),
                self.args.len()
            )));
        }
        let mut slots: Vec<Option<ValueRepr>> = rec.positional.iter().cloned().map(Some).collect();
        slots.resize(self.args.len(), None);
        for (name, value) in &rec.keyword {
            let spec = self
                .arg(name)
                .ok_or_else(|| arity(format!("unexpected keyword argument {name}")))?;
            if slots[spec.position].is_some() {
                return Err(arity(format!("argument {name} given twice")));
            }
            slots[spec.position] = Some(value.clone());
        }
        slots
            .into_iter()
            .zip(&self.args)
            .map(|(slot, spec)| match slot {
                Some(v) => Ok(v),
                None => spec
                    .default
                    .clone()
                    .ok_or_else(|| arity(format!("missing required argument {}", spec.name))),
            })
            .collect()
    }
}

/// Where an invocation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Seed,
    Synthesized { iteration: usize },
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Seed => f.write_str("seed"),
            Origin::Synthesized { iteration } => write!(f, "synthesized@{iteration}"),
        }
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "seed" {
            return Ok(Origin::Seed);
        }
        s.strip_prefix("synthesized@")
            .and_then(|n| n.parse().ok())
            .map(|iteration| Origin::Synthesized { iteration })
            .ok_or_else(|| format!("invalid origin tag {s:?}"))
    }
}

impl Serialize for Origin {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Origin {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_origin() -> Origin {
    Origin::Seed
}

/// Concrete argument values passed to one API call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub api: String,
    #[serde(default)]
    pub positional: Vec<ValueRepr>,
    #[serde(default)]
    pub keyword: BTreeMap<String, ValueRepr>,
    #[serde(default = "default_origin")]
    pub origin: Origin,
}

impl InvocationRecord {
    pub fn new(api: impl Into<String>, positional: Vec<ValueRepr>) -> Self {
        Self {
            api: api.into(),
            positional,
            keyword: BTreeMap::new(),
            origin: Origin::Seed,
        }
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    /// Hex digest of the argument values, independent of origin.
    pub fn input_hash(&self) -> String {
        input_hash(&self.api, &self.positional, &self.keyword)
    }
}

/// Short hex digest identifying one call's arguments.
pub fn input_hash(api: &str, positional: &[ValueRepr], keyword: &BTreeMap<String, ValueRepr>) -> String {
    use sha2::{Digest, Sha256};
    let canonical = serde_json::to_vec(&(api, positional, keyword)).expect("values always serialize");
    hex::encode(&Sha256::digest(&canonical)[..8])
}

/// On-disk layout of a corpus.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorpusFile {
    pub apis: Vec<ApiEntry>,
    #[serde(default)]
    pub invocations: Vec<InvocationRecord>,
}

/// In-memory corpus with its invocation database.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusDb {
    entries: BTreeMap<String, ApiEntry>,
    invocations: BTreeMap<String, Vec<InvocationRecord>>,
    covered: BTreeSet<String>,
}

impl CorpusDb {
    pub fn from_file(file: CorpusFile) -> Result<Self, CorpusError> {
        let mut db = CorpusDb::default();
        for entry in file.apis {
            entry.validate()?;
            if db.entries.contains_key(&entry.name) {
                return Err(CorpusError::DuplicateApi(entry.name));
            }
            db.entries.insert(entry.name.clone(), entry);
        }
        for rec in file.invocations {
            db.push(rec)?;
        }
        Ok(db)
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn to_file(&self) -> CorpusFile {
        CorpusFile {
            apis: self.entries.values().cloned().collect(),
            invocations: self.invocations.values().flatten().cloned().collect(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("corpus always serializes")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ApiEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Entries in name order.
    pub fn entries(&self) -> impl Iterator<Item = &ApiEntry> {
        self.entries.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn covered(&self) -> &BTreeSet<String> {
        &self.covered
    }

    pub fn is_covered(&self, name: &str) -> bool {
        self.covered.contains(name)
    }

    pub fn invocation_count(&self, name: &str) -> usize {
        self.invocations.get(name).map_or(0, Vec::len)
    }

    /// All traced invocations of `api`, in insertion order.
    pub fn all_invocations(&self, api: &str) -> Result<&[InvocationRecord], CorpusError> {
        if !self.contains(api) {
            return Err(CorpusError::UnknownApi(api.to_string()));
        }
        Ok(self.invocations.get(api).map_or(&[][..], Vec::as_slice))
    }

    /// The first `cap` invocations of `api`, in insertion order.
    pub fn valid_invocations(&self, api: &str, cap: usize) -> Result<Vec<InvocationRecord>, CorpusError> {
        let all = self.all_invocations(api)?;
        Ok(all.iter().take(cap).cloned().collect())
    }

    /// Appends an invocation. Returns true when `rec.api` was not covered before.
    pub fn record_new_invocation(&mut self, rec: InvocationRecord) -> Result<bool, CorpusError> {
        self.push(rec)
    }

    fn push(&mut self, rec: InvocationRecord) -> Result<bool, CorpusError> {
        let entry = self
            .entries
            .get_mut(&rec.api)
            .ok_or_else(|| CorpusError::UnknownApi(rec.api.clone()))?;
        let bound = entry.bind(&rec)?;
        for v in rec.positional.iter().chain(rec.keyword.values()) {
            v.validate().map_err(|reason| CorpusError::Arity {
                api: rec.api.clone(),
                reason,
            })?;
        }
        // every traced value widens the argument's observed type set
        let explicit = rec.positional.len();
        for (i, (spec, value)) in entry.args.iter_mut().zip(&bound).enumerate() {
            if i < explicit || rec.keyword.contains_key(&spec.name) {
                spec.observed_types.insert(value.type_tag().to_string());
            }
        }
        let newly = self.covered.insert(rec.api.clone());
        self.invocations.entry(rec.api.clone()).or_default().push(rec);
        Ok(newly)
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<CorpusDb, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    CorpusDb::from_json(&text)
}
