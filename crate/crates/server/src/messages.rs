//! Message catalog shared by the API and the client UI.

use protorec_core::ontology::Closeness;
use protorec_core::recognition::Outcome;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const BUNDLED_MESSAGES: &str = include_str!("../data/messages.json");

#[derive(Debug, thiserror::Error)]
pub enum MessageError {
    #[error("message catalog lacks `{0}`")]
    Missing(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageCatalog {
    pub outcomes: BTreeMap<String, String>,
    pub closeness: BTreeMap<String, String>,
}

impl MessageCatalog {
    pub fn parse(text: &str) -> Result<Self, MessageError> {
        let c: Self = serde_json::from_str(text)?;
        for o in Outcome::all() {
            if !c.outcomes.contains_key(&o.key()) {
                return Err(MessageError::Missing(o.key()));
            }
        }
        for k in [Closeness::Correct, Closeness::VeryClose, Closeness::Close, Closeness::TotallyWrong] {
            if !c.closeness.contains_key(k.as_str()) {
                return Err(MessageError::Missing(k.as_str().into()));
            }
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MessageError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_MESSAGES).expect("bundled catalog is complete")
    }

    /// Text for `outcome`, with `{lemma}` filled in.
    pub fn outcome(&self, outcome: Outcome, lemma: &str) -> String {
        self.outcomes[&outcome.key()].replace("{lemma}", lemma)
    }

    pub fn closeness(&self, c: Closeness) -> &str {
        &self.closeness[c.as_str()]
    }
}
