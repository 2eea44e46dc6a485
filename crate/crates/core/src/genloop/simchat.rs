use serde::{Deserialize, Serialize};

use crate::backend::{request_seed, with_retry, CompletionBackend, CompletionRequest, RetryPolicy};
use crate::error::{Error, Result};
use crate::prompt::PromptTemplate;
use crate::types::{Dialogue, GenerationParams, SeedPost, Source, Speaker, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimChatOptions {
    pub max_utterances: usize,
    pub stop_word: String,
    pub retry: RetryPolicy,
}

impl Default for SimChatOptions {
    fn default() -> Self {
        SimChatOptions {
            max_utterances: 40,
            stop_word: "bye".into(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Two backends take turns, the supporter answering the seed post first.
/// The chat ends at `max_utterances` or once a generated utterance contains
/// the stop word. A backend failure truncates the dialogue at the last good
/// utterance and records why in `metadata["truncated"]`.
pub fn simulate_chat(
    post: &SeedPost,
    seeker: &dyn CompletionBackend,
    supporter: &dyn CompletionBackend,
    template: &PromptTemplate,
    params: &GenerationParams,
    options: &SimChatOptions,
) -> Result<Dialogue> {
    if options.max_utterances < 2 {
        return Err(Error::Config(
            "simchat.max_utterances: must be at least 2".into(),
        ));
    }
    let mut utterances = vec![Utterance::new(Speaker::Seeker, &post.text)?];
    let mut truncated = None;

    while utterances.len() < options.max_utterances {
        let speaker = utterances
            .last()
            .map(|u| u.speaker().other())
            .unwrap_or(Speaker::Supporter);
        let backend = match speaker {
            Speaker::Seeker => seeker,
            Speaker::Supporter => supporter,
        };
        let request = CompletionRequest {
            prompt: turn_prompt(&utterances, speaker, template),
            nucleus_p: params.nucleus_p,
            repetition_penalty: params.repetition_penalty,
            max_new_tokens: params.max_new_tokens,
            seed: request_seed(params.seed, &post.id, utterances.len() as u32),
            stop: vec!["\n".into()],
        };
        let reply = match with_retry(&options.retry, || backend.complete(&request)) {
            Ok(r) => r,
            Err(e) => {
                truncated = Some(format!("{speaker} backend failed: {e}"));
                break;
            }
        };
        let line = reply
            .text
            .lines()
            .find(|l| !l.trim().is_empty())
            .unwrap_or("");
        let line = strip_role_prefix(line.trim(), speaker, template);
        match Utterance::new(speaker, line) {
            Ok(u) => utterances.push(u),
            Err(_) => {
                truncated = Some(format!("{speaker} backend returned an empty reply"));
                break;
            }
        }
        if says_stop_word(utterances.last().unwrap().text(), &options.stop_word) {
            break;
        }
    }

    let mut d = Dialogue::new(
        format!("{}-sim", post.id),
        Source::SimulatedChat,
        utterances,
    )?;
    d.seed_post_id = Some(post.id.clone());
    d.gen_params = Some(*params);
    if let Some(reason) = truncated {
        d.metadata.insert("truncated".into(), reason);
    }
    Ok(d)
}

fn turn_prompt(utterances: &[Utterance], next: Speaker, template: &PromptTemplate) -> String {
    let mut prompt = String::new();
    if !template.task_description.is_empty() {
        prompt.push_str(&template.task_description);
        prompt.push_str(&template.turn_separator);
        prompt.push_str(&template.turn_separator);
    }
    for u in utterances {
        prompt.push_str(template.prefix(u.speaker()));
        prompt.push_str(u.text());
        prompt.push_str(&template.turn_separator);
    }
    prompt.push_str(template.prefix(next).trim_end());
    prompt
}

fn strip_role_prefix<'a>(line: &'a str, speaker: Speaker, template: &PromptTemplate) -> &'a str {
    line.strip_prefix(template.prefix(speaker).trim_end())
        .unwrap_or(line)
}

/// Case-insensitive match of the stop word against each alphabetic word of
/// `text`, also accepting compounds that end in it ("goodbye", "bye-bye").
pub fn says_stop_word(text: &str, stop_word: &str) -> bool {
    let stop = stop_word.to_lowercase();
    if stop.is_empty() {
        return false;
    }
    text.split(|c: char| !c.is_alphabetic())
        .map(str::to_lowercase)
        .any(|w| w.ends_with(&stop))
}
