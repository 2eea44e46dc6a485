//! The flat `Human:` / `AI:` instruction format.
//!
//! A dialogue renders as an optional task-description paragraph, a blank
//! line, then one line per utterance prefixed by its role prompt. A
//! completion prompt is the same text cut after the seed post, ending in the
//! bare supporter prefix (`AI:`), so the first generated line belongs to the
//! supporter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dialogue, GenerationParams, SeedPost, Source, Speaker, Utterance};

pub const DEFAULT_TASK_DESCRIPTION: &str = "The following is a conversation between a Human \
seeking emotional support and an AI supporter. The Human talks about a problem in daily life \
that causes emotional distress. The AI listens patiently, asks questions to understand the \
situation, shows empathy and understanding, and gives comfort and practical suggestions that \
help the Human feel better.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplate {
    pub task_description: String,
    pub seeker_prefix: String,
    pub supporter_prefix: String,
    pub turn_separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            task_description: DEFAULT_TASK_DESCRIPTION.to_string(),
            seeker_prefix: "Human: ".into(),
            supporter_prefix: "AI: ".into(),
            turn_separator: "\n".into(),
        }
    }
}

impl PromptTemplate {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let (s, p) = (
            self.seeker_prefix.trim_end(),
            self.supporter_prefix.trim_end(),
        );
        if s.is_empty() || p.is_empty() {
            out.push("template: role prefixes must not be blank".to_string());
        }
        if s.starts_with(p) || p.starts_with(s) {
            out.push("template: one role prefix must not be a prefix of the other".to_string());
        }
        if self.turn_separator.is_empty() {
            out.push("template.turn_separator: must not be empty".to_string());
        }
        if self
            .task_description
            .lines()
            .any(|l| l.trim_start().starts_with(s) || l.trim_start().starts_with(p))
        {
            out.push("template.task_description: no line may start with a role prefix".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().as_slice() {
            [] => Ok(()),
            p => Err(Error::Config(p.join("; "))),
        }
    }

    pub fn prefix(&self, speaker: Speaker) -> &str {
        match speaker {
            Speaker::Seeker => &self.seeker_prefix,
            Speaker::Supporter => &self.supporter_prefix,
        }
    }

    /// Role words (prefixes without colon or whitespace) that must not leak
    /// into generated utterances.
    fn role_words(&self) -> [&str; 2] {
        fn word(p: &str) -> &str {
            p.trim_end().trim_end_matches(':')
        }
        [word(&self.seeker_prefix), word(&self.supporter_prefix)]
    }

    fn header(&self) -> String {
        if self.task_description.is_empty() {
            String::new()
        } else {
            format!(
                "{}{sep}{sep}",
                self.task_description,
                sep = self.turn_separator
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Eos,
    LengthCap,
    BackendError,
}

/// One backend generation for a (seed post, epoch) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCompletion {
    pub seed_post_id: String,
    pub epoch: u32,
    pub prompt_text: String,
    pub generated_text: String,
    pub finish_reason: FinishReason,
    pub gen_params: GenerationParams,
    pub backend_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    NonDialogue,
    UnfinishedGeneration,
    PromptWordLeakage,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParseOutcome {
    Success(Dialogue),
    Failure { kind: ParseFailure, detail: String },
}

impl ParseOutcome {
    fn fail(kind: ParseFailure, detail: impl Into<String>) -> Self {
        ParseOutcome::Failure {
            kind,
            detail: detail.into(),
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, ParseOutcome::Success(_))
    }
}

pub fn render_dialogue(
    dialogue: &Dialogue,
    template: &PromptTemplate,
    include_description: bool,
) -> String {
    let body = render_lines(dialogue.utterances(), template);
    if include_description {
        template.header() + &body
    } else {
        body
    }
}

fn render_lines(utterances: &[Utterance], template: &PromptTemplate) -> String {
    utterances
        .iter()
        .map(|u| format!("{}{}", template.prefix(u.speaker()), u.text()))
        .collect::<Vec<_>>()
        .join(&template.turn_separator)
}

pub fn build_completion_prompt(post: &SeedPost, template: &PromptTemplate) -> String {
    format!(
        "{}{}{}{}{}",
        template.header(),
        template.seeker_prefix,
        post.text,
        template.turn_separator,
        template.supporter_prefix.trim_end()
    )
}

/// The text a backend would have to generate, after the completion prompt,
/// to reproduce `dialogue`. `None` when the dialogue cannot come out of a
/// completion (fewer than two utterances, or the second is not the supporter).
pub fn continuation_text(dialogue: &Dialogue, template: &PromptTemplate) -> Option<String> {
    let rest = dialogue.utterances().get(1..)?;
    if rest.first()?.speaker() != Speaker::Supporter {
        return None;
    }
    let tail = render_lines(rest, template);
    Some(tail[template.supporter_prefix.trim_end().len()..].to_string())
}

pub fn parse_completion(
    post: &SeedPost,
    completion: &RawCompletion,
    template: &PromptTemplate,
) -> ParseOutcome {
    match completion.finish_reason {
        FinishReason::Eos => {}
        FinishReason::LengthCap => {
            return ParseOutcome::fail(
                ParseFailure::UnfinishedGeneration,
                "generation hit the length cap",
            )
        }
        FinishReason::BackendError => {
            let detail = completion.error.as_deref().unwrap_or("backend error");
            return ParseOutcome::fail(ParseFailure::UnfinishedGeneration, detail);
        }
    }

    let full = format!(
        "{}{}",
        template.supporter_prefix.trim_end(),
        completion.generated_text
    );
    let prefixes = [
        (template.seeker_prefix.trim_end(), Speaker::Seeker),
        (template.supporter_prefix.trim_end(), Speaker::Supporter),
    ];

    let mut utterances = Vec::new();
    match Utterance::new(Speaker::Seeker, &post.text) {
        Ok(u) => utterances.push(u),
        Err(e) => return ParseOutcome::fail(ParseFailure::NonDialogue, format!("seed post: {e}")),
    }
    for (i, line) in full.split(template.turn_separator.as_str()).enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((rest, speaker)) = prefixes
            .iter()
            .find_map(|(p, s)| line.strip_prefix(p).map(|rest| (rest, *s)))
        else {
            return ParseOutcome::fail(
                ParseFailure::NonDialogue,
                format!("line {} has no role prefix", i + 1),
            );
        };
        match Utterance::new(speaker, rest) {
            Ok(u) => utterances.push(u),
            Err(_) => {
                return ParseOutcome::fail(
                    ParseFailure::NonDialogue,
                    format!("line {} is empty", i + 1),
                )
            }
        }
    }

    let role_words = template.role_words();
    for (i, u) in utterances.iter().enumerate().skip(1) {
        if let Some(word) = role_words.iter().find(|w| contains_word(u.text(), w)) {
            return ParseOutcome::fail(
                ParseFailure::PromptWordLeakage,
                format!("utterance {} contains `{word}`", i + 1),
            );
        }
    }

    let id = format!("{}-e{}", completion.seed_post_id, completion.epoch);
    match Dialogue::new(id, Source::Completion, utterances) {
        Ok(mut d) => {
            d.seed_post_id = Some(post.id.clone());
            d.gen_params = Some(completion.gen_params);
            ParseOutcome::Success(d)
        }
        Err(e) => ParseOutcome::fail(ParseFailure::NonDialogue, e.to_string()),
    }
}

/// Case-sensitive whole-word search: the match may not touch an
/// alphanumeric character or underscore on either side.
pub fn contains_word(text: &str, word: &str) -> bool {
    if word.is_empty() {
        return false;
    }
    let is_word_char = |c: char| c.is_alphanumeric() || c == '_';
    text.match_indices(word).any(|(i, _)| {
        let before = text[..i].chars().next_back();
        let after = text[i + word.len()..].chars().next();
        !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
    })
}

/// A fine-tuning example; the loss covers `[loss_start, loss_end)` in
/// Unicode code points, i.e. the dialogue lines without the description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub text: String,
    pub loss_start: usize,
    pub loss_end: usize,
}

pub fn export_finetune_record(dialogue: &Dialogue, template: &PromptTemplate) -> FinetuneRecord {
    let header = template.header();
    let body = render_lines(dialogue.utterances(), template);
    let loss_start = header.chars().count();
    let loss_end = loss_start + body.chars().count();
    FinetuneRecord {
        text: header + &body,
        loss_start,
        loss_end,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tpl(desc: &str) -> PromptTemplate {
        PromptTemplate {
            task_description: desc.into(),
            ..Default::default()
        }
    }

    fn dialogue(turns: &[(Speaker, &str)]) -> Dialogue {
        let utts = turns
            .iter()
            .map(|(s, t)| Utterance::new(*s, t).unwrap())
            .collect();
        Dialogue::new("d", Source::Crowdsourced, utts).unwrap()
    }

    fn completion(text: &str, finish: FinishReason) -> RawCompletion {
        RawCompletion {
            seed_post_id: "p1".into(),
            epoch: 1,
            prompt_text: String::new(),
            generated_text: text.into(),
            finish_reason: finish,
            gen_params: GenerationParams::default(),
            backend_label: "test".into(),
            error: None,
        }
    }

    fn post() -> SeedPost {
        SeedPost::new("p1", "I lost my job", "sad").unwrap()
    }

    #[test]
    fn render_examples() {
        let d = dialogue(&[(Speaker::Seeker, "hi")]);
        assert_eq!(render_dialogue(&d, &tpl("D"), true), "D\n\nHuman: hi");
        let d = dialogue(&[(Speaker::Seeker, "hi"), (Speaker::Supporter, "hello")]);
        assert_eq!(
            render_dialogue(&d, &tpl("D"), false),
            "Human: hi\nAI: hello"
        );
    }

    #[test]
    fn prompt_examples() {
        assert_eq!(
            build_completion_prompt(&post(), &tpl("D")),
            "D\n\nHuman: I lost my job\nAI:"
        );
        let p = SeedPost::new("x", "x", "sad").unwrap();
        assert_eq!(build_completion_prompt(&p, &tpl("")), "Human: x\nAI:");
        assert!(build_completion_prompt(&post(), &PromptTemplate::default()).ends_with("\nAI:"));
    }

    #[test]
    fn parse_success_trace() {
        let out = parse_completion(
            &post(),
            &completion(" I'm sorry to hear that.\nHuman: thanks", FinishReason::Eos),
            &tpl("D"),
        );
        let ParseOutcome::Success(d) = out else {
            panic!("{out:?}")
        };
        let got: Vec<_> = d
            .utterances()
            .iter()
            .map(|u| (u.speaker(), u.text()))
            .collect();
        assert_eq!(
            got,
            [
                (Speaker::Seeker, "I lost my job"),
                (Speaker::Supporter, "I'm sorry to hear that."),
                (Speaker::Seeker, "thanks"),
            ]
        );
        assert_eq!(d.source, Source::Completion);
        assert_eq!(d.seed_post_id.as_deref(), Some("p1"));
    }

    #[test]
    fn parse_failures() {
        let t = tpl("D");
        let kind = |text: &str, f| match parse_completion(&post(), &completion(text, f), &t) {
            ParseOutcome::Failure { kind, .. } => Some(kind),
            ParseOutcome::Success(_) => None,
        };
        use ParseFailure::*;
        assert_eq!(
            kind(" fine\nHuman: ok", FinishReason::LengthCap),
            Some(UnfinishedGeneration)
        );
        assert_eq!(
            kind("", FinishReason::BackendError),
            Some(UnfinishedGeneration)
        );
        assert_eq!(
            kind(" As an AI I think...", FinishReason::Eos),
            Some(PromptWordLeakage)
        );
        assert_eq!(
            kind(" ok\nSo what happened?", FinishReason::Eos),
            Some(NonDialogue)
        );
        assert_eq!(kind("\nHuman: hi", FinishReason::Eos), Some(NonDialogue));
        assert_eq!(
            kind(" sure\nHuman: the Human race", FinishReason::Eos),
            Some(PromptWordLeakage)
        );
        // lowercase and embedded occurrences are not leakage
        assert_eq!(
            kind(" ai and human and AIDS\n\nHuman: HUMANE", FinishReason::Eos),
            None
        );
    }

    #[test]
    fn word_boundaries() {
        assert!(contains_word("AI's view", "AI"));
        assert!(contains_word("(AI)", "AI"));
        assert!(!contains_word("SAID", "AI"));
        assert!(!contains_word("AI_x", "AI"));
        assert!(!contains_word("Humane", "Human"));
    }

    #[test]
    fn finetune_loss_span() {
        let d = dialogue(&[(Speaker::Seeker, "hi")]);
        let r = export_finetune_record(&d, &tpl("D"));
        assert_eq!(r.text, "D\n\nHuman: hi");
        assert_eq!((r.loss_start, r.loss_end), (3, 12));

        let r = export_finetune_record(&d, &tpl(""));
        assert_eq!((r.loss_start, r.loss_end), (0, r.text.chars().count()));

        let d = dialogue(&[(Speaker::Seeker, "café ☕"), (Speaker::Supporter, "oh")]);
        let r = export_finetune_record(&d, &tpl("Dé"));
        assert_eq!(r.loss_end, r.text.chars().count());
        let span: String = r.text.chars().skip(r.loss_start).collect();
        assert!(span.starts_with("Human: "));
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::default().validate().is_ok());
        assert!(tpl("intro\nHuman: hi").validate().is_err());
    }

    #[test]
    fn continuation_round_trip() {
        let d = dialogue(&[
            (Speaker::Seeker, "I lost my job"),
            (Speaker::Supporter, "oh no"),
            (Speaker::Supporter, "what happened?"),
            (Speaker::Seeker, "they let me go"),
        ]);
        let text = continuation_text(&d, &PromptTemplate::default()).unwrap();
        assert_eq!(text, " oh no\nAI: what happened?\nHuman: they let me go");
        let ParseOutcome::Success(back) = parse_completion(
            &post(),
            &completion(&text, FinishReason::Eos),
            &PromptTemplate::default(),
        ) else {
            panic!()
        };
        assert_eq!(back.utterances(), d.utterances());
    }
    use proptest::prelude::*;

    fn utterance_text() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-zé'?!,.0-9]{1,8}", 1..10).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn continuation_parses_back(
            texts in proptest::collection::vec((proptest::bool::ANY, utterance_text()), 2..25),
        ) {
            let turns: Vec<(Speaker, &str)> = texts
                .iter()
                .enumerate()
                .map(|(i, (s, t))| {
                    let speaker = match i {
                        0 => Speaker::Seeker,
                        1 => Speaker::Supporter,
                        _ if *s => Speaker::Seeker,
                        _ => Speaker::Supporter,
                    };
                    (speaker, t.as_str())
                })
                .collect();
            let d = dialogue(&turns);
            let template = PromptTemplate::default();
            let post = SeedPost::new("p1", d.utterances()[0].text(), "x").unwrap();
            let text = continuation_text(&d, &template).unwrap();
            match parse_completion(&post, &completion(&text, FinishReason::Eos), &template) {
                ParseOutcome::Success(back) => prop_assert_eq!(back.utterances(), d.utterances()),
                other => prop_assert!(false, "{other:?}"),
            }
        }
    }
}
