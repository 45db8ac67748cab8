//! Character-level vocabulary with reserved control tokens.
//!
//! Content tokens are single characters. Control tokens occupy the first
//! nine ids in a fixed order so serialized contexts and checkpoints stay
//! comparable across vocabularies.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
/// Opens the typed-prefix segment.
pub const PREFIX_MARK_ID: TokenId = 2;
/// Opens the cached-candidates segment.
pub const CAND_MARK_ID: TokenId = 3;
/// Opens the hot-words segment.
pub const HOT_MARK_ID: TokenId = 4;
/// Opens the behavior-history segment.
pub const BEH_MARK_ID: TokenId = 5;
/// Opens the user-profile segment.
pub const PROF_MARK_ID: TokenId = 6;
/// Separates items inside a list segment.
pub const SEP_ID: TokenId = 7;
/// End-of-suggestion stop token.
pub const EOSUG_ID: TokenId = 8;

pub const RESERVED: [&str; 9] = [
    "<PAD>", "<UNK>", "<P>", "<C>", "<H>", "<B>", "<U>", "<SEP>", "<EOSUG>",
];

/// Token table. Ids `0..9` are the reserved tokens above; the rest are
/// single-character content tokens in sorted order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(try_from = "VocabularyData", into = "VocabularyData")]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyData {
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabularyData {
    fn from(v: Vocabulary) -> Self {
        VocabularyData { tokens: v.tokens }
    }
}

impl TryFrom<VocabularyData> for Vocabulary {
    type Error = CoreError;

    fn try_from(data: VocabularyData) -> Result<Self> {
        Vocabulary::from_tokens(data.tokens)
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose content tokens are the distinct characters
    /// of `corpus`, sorted by code point.
    pub fn char_level<I: IntoIterator<Item = char>>(corpus: I) -> Self {
        let chars: BTreeSet<char> = corpus.into_iter().collect();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(chars.into_iter().map(String::from));
        Self::from_tokens(tokens).expect("reserved prefix is well formed")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()]
                .iter()
                .zip(RESERVED)
                .any(|(t, r)| t != r)
        {
            return Err(CoreError::Input(
                "vocabulary must start with the reserved token block".into(),
            ));
        }
        let mut lookup = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if lookup.insert(tok.clone(), id as TokenId).is_some() {
                return Err(CoreError::Input(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, lookup })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    pub fn stop_ids(&self) -> BTreeSet<TokenId> {
        BTreeSet::from([EOSUG_ID])
    }

    /// All reserved ids, useful for head pruning which must retain them.
    pub fn reserved_ids(&self) -> BTreeSet<TokenId> {
        (0..RESERVED.len() as TokenId).collect()
    }

    /// Maps a string to content tokens. Unknown characters become `<UNK>`;
    /// the second component counts those replacements.
    pub fn tokenize(&self, s: &str) -> (Vec<TokenId>, usize) {
        let mut ids = Vec::with_capacity(s.chars().count());
        let mut unk = 0;
        let mut buf = [0u8; 4];
        for c in s.chars() {
            match self.lookup.get(c.encode_utf8(&mut buf) as &str) {
                Some(&id) => ids.push(id),
                None => {
                    ids.push(UNK_ID);
                    unk += 1;
                }
            }
        }
        (ids, unk)
    }

    /// Concatenates content tokens back into a string. Reserved ids and
    /// out-of-range ids contribute nothing.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_reserved(id) {
                continue;
            }
            if let Some(tok) = self.token(id) {
                out.push_str(tok);
            }
        }
        out
    }
}
