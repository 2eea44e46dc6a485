//! Domain records shared by every pipeline stage.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::{normalize_text, token_count};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Seeker,
    Supporter,
}

impl Speaker {
    pub const ALL: [Speaker; 2] = [Speaker::Seeker, Speaker::Supporter];

    /// Role word used in the instruction text format.
    pub fn role_prompt(self) -> &'static str {
        match self {
            Speaker::Seeker => "Human",
            Speaker::Supporter => "AI",
        }
    }

    pub fn from_role_prompt(role: &str) -> Option<Speaker> {
        match role {
            "Human" => Some(Speaker::Seeker),
            "AI" => Some(Speaker::Supporter),
            _ => None,
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::Seeker => Speaker::Supporter,
            Speaker::Supporter => Speaker::Seeker,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Seeker => "seeker",
            Speaker::Supporter => "supporter",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One line of a dialogue. Text is normalized on construction (NFC, single
/// spaces, trimmed) so it never contains a newline and is never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawUtterance")]
pub struct Utterance {
    speaker: Speaker,
    text: String,
}

#[derive(Deserialize)]
struct RawUtterance {
    speaker: Speaker,
    text: String,
}

impl TryFrom<RawUtterance> for Utterance {
    type Error = Error;

    fn try_from(raw: RawUtterance) -> Result<Self> {
        Utterance::new(raw.speaker, &raw.text)
    }
}

impl Utterance {
    pub fn new(speaker: Speaker, text: &str) -> Result<Self> {
        let text = normalize_text(text);
        if text.is_empty() {
            return Err(Error::InvalidUtterance("empty text".into()));
        }
        Ok(Utterance { speaker, text })
    }

    pub fn speaker(&self) -> Speaker {
        self.speaker
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn token_len(&self) -> usize {
        token_count(&self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Crowdsourced,
    Completion,
    SimulatedChat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub nucleus_p: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: u32,
    pub epochs: u32,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            nucleus_p: 0.9,
            repetition_penalty: 1.05,
            max_new_tokens: 1500,
            epochs: 10,
            seed: 0,
        }
    }
}

impl GenerationParams {
    /// Field-level problems, empty when the parameters are usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            out.push(format!(
                "nucleus_p: must be in (0, 1], got {}",
                self.nucleus_p
            ));
        }
        if !(self.repetition_penalty >= 1.0) {
            out.push(format!(
                "repetition_penalty: must be >= 1, got {}",
                self.repetition_penalty
            ));
        }
        if self.max_new_tokens == 0 {
            out.push("max_new_tokens: must be positive".into());
        }
        if self.epochs == 0 {
            out.push("epochs: must be positive".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().as_slice() {
            [] => Ok(()),
            problems => Err(Error::Config(problems.join("; "))),
        }
    }
}

/// An ordered, role-tagged transcript with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DialogueRecord")]
pub struct Dialogue {
    pub id: String,
    pub source: Source,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_post_id: Option<String>,
    utterances: Vec<Utterance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gen_params: Option<GenerationParams>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct DialogueRecord {
    id: String,
    source: Source,
    #[serde(default)]
    seed_post_id: Option<String>,
    utterances: Vec<Utterance>,
    #[serde(default)]
    gen_params: Option<GenerationParams>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

impl TryFrom<DialogueRecord> for Dialogue {
    type Error = Error;

    fn try_from(r: DialogueRecord) -> Result<Self> {
        let mut d = Dialogue::new(r.id, r.source, r.utterances)?;
        d.seed_post_id = r.seed_post_id;
        d.gen_params = r.gen_params;
        d.metadata = r.metadata;
        Ok(d)
    }
}

impl Dialogue {
    pub fn new(id: impl Into<String>, source: Source, utterances: Vec<Utterance>) -> Result<Self> {
        let id = id.into();
        if utterances.is_empty() {
            return Err(Error::InvalidDialogue {
                id,
                reason: "no utterances".into(),
            });
        }
        if matches!(source, Source::Completion | Source::SimulatedChat)
            && utterances[0].speaker() != Speaker::Seeker
        {
            return Err(Error::InvalidDialogue {
                id,
                reason: "generated dialogues must open with the seeker".into(),
            });
        }
        Ok(Dialogue {
            id,
            source,
            seed_post_id: None,
            utterances,
            gen_params: None,
            metadata: BTreeMap::new(),
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn count(&self, speaker: Speaker) -> usize {
        self.utterances
            .iter()
            .filter(|u| u.speaker() == speaker)
            .count()
    }
}

/// A screened distress post; `token_length` is always recomputed from `text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SeedPostRecord")]
pub struct SeedPost {
    pub id: String,
    pub text: String,
    pub emotion_label: String,
    token_length: usize,
}

#[derive(Deserialize)]
struct SeedPostRecord {
    id: String,
    text: String,
    emotion_label: String,
}

impl TryFrom<SeedPostRecord> for SeedPost {
    type Error = Error;

    fn try_from(r: SeedPostRecord) -> Result<Self> {
        SeedPost::new(r.id, &r.text, r.emotion_label)
    }
}

impl SeedPost {
    pub fn new(
        id: impl Into<String>,
        text: &str,
        emotion_label: impl Into<String>,
    ) -> Result<Self> {
        let text = normalize_text(text);
        if text.is_empty() {
            return Err(Error::InvalidUtterance("seed post text is empty".into()));
        }
        Ok(SeedPost {
            id: id.into(),
            token_length: token_count(&text),
            text,
            emotion_label: emotion_label.into(),
        })
    }

    pub fn token_length(&self) -> usize {
        self.token_length
    }
}

impl FromStr for Speaker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seeker" => Ok(Speaker::Seeker),
            "supporter" => Ok(Speaker::Supporter),
            other => Err(Error::InvalidUtterance(format!(
                "unknown speaker `{other}`"
            ))),
        }
    }
}
