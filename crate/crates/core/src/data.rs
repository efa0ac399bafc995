//! Dataset, vocabulary, and embedding ingestion.
//!
//! File formats: datasets are `label<TAB>text` per line; embeddings are
//! `token v1 .. vd` per line; substitution tables are
//! `token<TAB>repl1 repl2 ..` with `#` comments. Every parse error names
//! the file and line.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::TokenId;
use crate::perturb::SubstitutionTable;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Word,
    Char,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Word => "word",
            Level::Char => "char",
        })
    }
}

/// Token string to id map. The OOV id exists on every vocabulary; OOV
/// tokens are never perturbable and (for word models) embed to a zero row.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    oov: TokenId,
}

pub const OOV_TOKEN: &str = "<oov>";

impl Vocab {
    /// Builds from unique token strings; appends the OOV sentinel.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len() + 1);
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let mut tokens = tokens;
        let oov = tokens.len();
        tokens.push(OOV_TOKEN.to_string());
        index.insert(OOV_TOKEN.to_string(), oov);
        Ok(Vocab { tokens, index, oov })
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_oov(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(self.oov)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn oov(&self) -> TokenId {
        self.oov
    }

    /// Vocabulary size including the OOV slot.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn render(&self, ids: &[TokenId], level: Level) -> String {
        let parts: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        match level {
            Level::Word => parts.join(" "),
            Level::Char => parts.concat(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub level: Level,
    pub split: String,
}

/// Raw `label<TAB>text` records before tokenization.
pub fn parse_raw_dataset(content: &str, path: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (ln, line) in content.lines().enumerate() {
        let ln = ln + 1;
        if line.is_empty() {
            continue;
        }
        let Some((label_str, text)) = line.split_once('\t') else {
            return Err(Error::parse(path, ln, "expected `label<TAB>text`"));
        };
        let label: usize = label_str
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, ln, format!("bad label `{label_str}`")))?;
        out.push((label, text.to_string()));
    }
    if out.is_empty() {
        return Err(Error::parse(path, 0, "dataset file has no examples"));
    }
    Ok(out)
}

/// Splits text into token strings for the level: whitespace words, or
/// lowercased codepoints truncated to `char_limit`.
pub fn split_text(text: &str, level: Level, char_limit: Option<usize>) -> Vec<String> {
    match level {
        Level::Word => text.split_whitespace().map(str::to_string).collect(),
        Level::Char => {
            let lower = text.to_lowercase();
            let it = lower.chars().map(|c| c.to_string());
            match char_limit {
                Some(n) => it.take(n).collect(),
                None => it.collect(),
            }
        }
    }
}

/// Character vocabulary: every distinct character of the (lowercased,
/// truncated) training texts, sorted for determinism.
pub fn char_vocab(texts: &[(usize, String)], char_limit: Option<usize>) -> Result<Vocab> {
    let mut chars: Vec<String> = Vec::new();
    for (_, text) in texts {
        for c in split_text(text, Level::Char, char_limit) {
            chars.push(c);
        }
    }
    chars.sort();
    chars.dedup();
    Vocab::new(chars)
}

/// Encodes raw records against a vocabulary. Labels are range-checked;
/// sequences shorter than `min_len` are right-padded with OOV (padding is
/// never perturbable); empty texts are an error.
pub fn encode_dataset(
    raw: &[(usize, String)],
    level: Level,
    vocab: &Vocab,
    class_count: usize,
    char_limit: Option<usize>,
    min_len: usize,
    path: &str,
    split: &str,
) -> Result<Dataset> {
    let mut examples = Vec::with_capacity(raw.len());
    for (i, (label, text)) in raw.iter().enumerate() {
        let ln = i + 1;
        if *label >= class_count {
            return Err(Error::LabelOutOfRange {
                label: *label,
                classes: class_count,
                path: path.to_string(),
                line: ln,
            });
        }
        let mut tokens: Vec<TokenId> = split_text(text, level, char_limit)
            .iter()
            .map(|t| vocab.id_or_oov(t))
            .collect();
        if tokens.is_empty() {
            return Err(Error::parse(path, ln, "text is empty after tokenization"));
        }
        while tokens.len() < min_len {
            tokens.push(vocab.oov());
        }
        examples.push(Example {
            tokens,
            label: *label,
        });
    }
    Ok(Dataset {
        examples,
        level,
        split: split.to_string(),
    })
}

pub fn load_raw_dataset(path: &Path) -> Result<Vec<(usize, String)>> {
    let content = std::fs::read_to_string(path)?;
    parse_raw_dataset(&content, &path.display().to_string())
}

/// Word-embedding file: builds the vocabulary in file order (duplicates:
/// last row wins, with a warning) and appends a zero OOV row.
pub fn parse_embedding_file<F: Scalar>(
    content: &str,
    path: &str,
    expected_dim: usize,
) -> Result<(Vocab, Tensor<F>)> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<F>> = HashMap::new();
    for (ln, line) in content.lines().enumerate() {
        let ln = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| Error::parse(path, ln, "missing token"))?
            .to_string();
        let mut row = Vec::with_capacity(expected_dim);
        for p in parts {
            let v: f64 = p
                .parse()
                .map_err(|_| Error::parse(path, ln, format!("bad float `{p}`")))?;
            row.push(F::from_f64(v));
        }
        if row.len() != expected_dim {
            return Err(Error::parse(
                path,
                ln,
                format!("expected {expected_dim} values, found {}", row.len()),
            ));
        }
        if rows.insert(token.clone(), row).is_some() {
            log::warn!("{path}:{ln}: duplicate embedding for `{token}`, keeping the last");
        } else {
            order.push(token);
        }
    }
    if order.is_empty() {
        return Err(Error::parse(path, 0, "embedding file has no rows"));
    }
    let vocab = Vocab::new(order.clone())?;
    let mut table = Tensor::zeros(vec![vocab.len(), expected_dim]);
    for (i, token) in order.iter().enumerate() {
        table.row_mut(i).copy_from_slice(&rows[token]);
    }
    // The OOV row (last) stays zero.
    table.check_finite("embedding matrix")?;
    Ok((vocab, table))
}

pub fn load_embedding_file<F: Scalar>(path: &Path, expected_dim: usize) -> Result<(Vocab, Tensor<F>)> {
    let content = std::fs::read_to_string(path)?;
    parse_embedding_file(&content, &path.display().to_string(), expected_dim)
}

/// Substitution-table file against a vocabulary. Lines whose source token
/// is unknown are skipped; unknown or self replacements are dropped. All
/// drops are logged, none are errors: a table may legitimately cover more
/// vocabulary than one dataset uses.
pub fn parse_table_file(content: &str, path: &str, vocab: &Vocab) -> Result<SubstitutionTable> {
    let mut table = SubstitutionTable::new(vocab.len());
    for (ln, line) in content.lines().enumerate() {
        let ln = ln + 1;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((token_str, repls_str)) = line.split_once('\t') else {
            return Err(Error::parse(path, ln, "expected `token<TAB>replacements`"));
        };
        let Some(token) = vocab.id(token_str) else {
            log::warn!("{path}:{ln}: token `{token_str}` not in vocabulary, line skipped");
            continue;
        };
        if token == vocab.oov() {
            log::warn!("{path}:{ln}: OOV token is not perturbable, line skipped");
            continue;
        }
        let mut repl_ids = Vec::new();
        for r in repls_str.split_whitespace() {
            match vocab.id(r) {
                Some(id) if id == token => {
                    log::warn!("{path}:{ln}: self replacement `{r}` dropped");
                }
                Some(id) if id == vocab.oov() => {
                    log::warn!("{path}:{ln}: OOV replacement `{r}` dropped");
                }
                Some(id) => repl_ids.push(id),
                None => {
                    log::warn!("{path}:{ln}: replacement `{r}` not in vocabulary, dropped");
                }
            }
        }
        if !repl_ids.is_empty() {
            table.add(token, &repl_ids)?;
        }
    }
    Ok(table)
}

pub fn load_table_file(path: &Path, vocab: &Vocab) -> Result<SubstitutionTable> {
    let content = std::fs::read_to_string(path)?;
    parse_table_file(&content, &path.display().to_string(), vocab)
}
