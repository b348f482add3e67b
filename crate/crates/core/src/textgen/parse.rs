use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredOutput {
    pub think: String,
    /// Whitespace-trimmed.
    pub answer: String,
    pub raw: String,
}

fn span<'a>(raw: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = raw.find(open)? + open.len();
    let end = raw[start..].find(close)? + start;
    Some(&raw[start..end])
}

/// Extracts the first `<think>` block and the first `<answer>` block.
pub fn parse_structured_output(raw: &str) -> Result<StructuredOutput> {
    let think = span(raw, "<think>", "</think>").ok_or_else(|| Error::MalformedOutput("no closed <think> block".into()))?;
    let answer =
        span(raw, "<answer>", "</answer>").ok_or_else(|| Error::MalformedOutput("no closed <answer> block".into()))?;
    Ok(StructuredOutput { think: think.to_string(), answer: answer.trim().to_string(), raw: raw.to_string() })
}

pub fn format_output(think: &str, answer: &str) -> String {
    format!("<think>{think}</think>\n<answer>{answer}</answer>")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic() {
        let o = parse_structured_output("<think>x</think><answer>Item A</answer>").unwrap();
        assert_eq!((o.think.as_str(), o.answer.as_str()), ("x", "Item A"));
    }

    #[test]
    fn answer_alone_is_malformed() {
        assert!(matches!(parse_structured_output("<answer>A</answer>"), Err(Error::MalformedOutput(_))));
    }

    #[test]
    fn first_answer_wins() {
        let o = parse_structured_output("<think>t</think><answer> A </answer><answer>B</answer>").unwrap();
        assert_eq!(o.answer, "A");
    }

    #[test]
    fn unclosed_is_malformed() {
        assert!(parse_structured_output("<think>t</think><answer>A").is_err());
        assert!(parse_structured_output("<think>t<answer>A</answer>").is_err());
    }

    #[test]
    fn inner_spans_are_substrings() {
        let raw = format_output("why", "  what ");
        let o = parse_structured_output(&raw).unwrap();
        assert!(o.raw.contains(&o.think) && o.raw.contains(&o.answer));
    }
}
