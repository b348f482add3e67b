use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datasets::ItemDescription;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Rec,
    Pattern,
    Reason,
    Update,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Rec => "rec",
            PromptKind::Pattern => "pattern",
            PromptKind::Reason => "reason",
            PromptKind::Update => "update",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Slots a prompt may draw on. Which ones must be present depends on the kind.
#[derive(Clone, Debug, Default)]
pub struct PromptContext<'a> {
    /// Chronological history descriptions.
    pub history: Option<Vec<&'a ItemDescription>>,
    /// Candidate list in display order.
    pub candidates: Option<Vec<&'a ItemDescription>>,
    pub pattern: Option<&'a str>,
    pub item: Option<&'a ItemDescription>,
}

/// Template text with `{history}`, `{candidates}`, `{pattern}` and `{item}` placeholders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub rec: String,
    pub pattern: String,
    pub reason: String,
    pub update: String,
    /// Per-item description budget in characters.
    pub item_chars: usize,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            rec: "You are a recommendation assistant. The user has interacted with the following items, oldest first:\n\
{history}\n\
Analyze these descriptions, infer the user's interest pattern, and pick the single most relevant item from the candidate list below.\n\
Candidates:\n{candidates}\n\
Reason step by step inside <think> </think> tags, then give the chosen item's title or label inside <answer> </answer> tags."
                .into(),
            pattern: "The user has interacted with the following items, oldest first:\n\
{history}\n\
Analyze the user's interests from multiple perspectives, including but not limited to genre, category and director. \
Reason inside <think> </think> tags and write a concise summary of the user's interest pattern inside <answer> </answer> tags."
                .into(),
            reason: "The user has interacted with the following items, oldest first:\n\
{history}\n\
Target item:\n{item}\n\
Identify what the user's interests have in common with the target item and explain why the user would favor it. \
Reason inside <think> </think> tags and write a one-sentence recommendation reason inside <answer> </answer> tags."
                .into(),
            update: "Current interest pattern of the user:\n{pattern}\n\
The user has just interacted with:\n{item}\n\
Update the interest pattern to reflect this interaction and explain why the user favors the item. \
Reason inside <think> </think> tags. Inside <answer> </answer> tags write the updated pattern on the first line \
and the recommendation reason on the second line."
                .into(),
            item_chars: 512,
        }
    }
}

fn truncate(s: &str, budget: usize) -> &str {
    match s.char_indices().nth(budget) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl PromptTemplates {
    pub fn template(&self, kind: PromptKind) -> &str {
        match kind {
            PromptKind::Rec => &self.rec,
            PromptKind::Pattern => &self.pattern,
            PromptKind::Reason => &self.reason,
            PromptKind::Update => &self.update,
        }
    }

    /// Renders the template for `kind`; every slot the kind needs must be present.
    pub fn render(&self, kind: PromptKind, ctx: &PromptContext<'_>) -> Result<String> {
        let missing = |slot| Error::MissingSlot { kind: kind.as_str(), slot };
        let needs: &[&'static str] = match kind {
            PromptKind::Rec => &["history", "candidates"],
            PromptKind::Pattern => &["history"],
            PromptKind::Reason => &["history", "item"],
            PromptKind::Update => &["pattern", "item"],
        };
        let mut out = self.template(kind).to_string();
        for &slot in needs {
            let text = match slot {
                "history" => {
                    let h = ctx.history.as_ref().ok_or_else(|| missing("history"))?;
                    h.iter()
                        .enumerate()
                        .map(|(k, d)| format!("{}. {}", k + 1, truncate(&d.text, self.item_chars)))
                        .collect::<Vec<_>>()
                        .join("\n")
                }
                "candidates" => {
                    let c = ctx.candidates.as_ref().ok_or_else(|| missing("candidates"))?;
                    c.iter()
                        .enumerate()
                        .map(|(k, d)| format!("({}) {}", k + 1, truncate(&d.text, self.item_chars)))
                        .collect::<Vec<_>>()
                        .join("\n")
                }
                "pattern" => ctx.pattern.ok_or_else(|| missing("pattern"))?.to_string(),
                _ => truncate(&ctx.item.ok_or_else(|| missing("item"))?.text, self.item_chars).to_string(),
            };
            out = out.replace(&format!("{{{slot}}}"), &text);
        }
        Ok(out)
    }
}

/// Renders with the default templates.
pub fn render_prompt(kind: PromptKind, ctx: &PromptContext<'_>) -> Result<String> {
    PromptTemplates::default().render(kind, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, text: &str) -> ItemDescription {
        ItemDescription { item_id: id.into(), title: text.into(), text: text.into(), attributes: vec![] }
    }

    #[test]
    fn pattern_prompt_keeps_chronology() {
        let (a, b) = (item("1", "Alpha first"), item("2", "Beta second"));
        let ctx = PromptContext { history: Some(vec![&a, &b]), ..Default::default() };
        let p = render_prompt(PromptKind::Pattern, &ctx).unwrap();
        let (ia, ib) = (p.find("Alpha first").unwrap(), p.find("Beta second").unwrap());
        assert!(ia < ib);
    }

    #[test]
    fn rec_prompt_labels_candidates() {
        let h = item("0", "seen");
        let cands: Vec<ItemDescription> = (1..=5).map(|k| item(&k.to_string(), &format!("Cand {k}"))).collect();
        let ctx = PromptContext {
            history: Some(vec![&h]),
            candidates: Some(cands.iter().collect()),
            ..Default::default()
        };
        let p = render_prompt(PromptKind::Rec, &ctx).unwrap();
        for k in 1..=5 {
            assert!(p.contains(&format!("({k}) Cand {k}")));
        }
    }

    #[test]
    fn update_prompt_has_pattern_and_item() {
        let it = item("9", "Heartbreak Ridge");
        let ctx = PromptContext { pattern: Some("likes action"), item: Some(&it), ..Default::default() };
        let p = render_prompt(PromptKind::Update, &ctx).unwrap();
        assert!(p.contains("likes action") && p.contains("Heartbreak Ridge"));
    }

    #[test]
    fn missing_slot_named() {
        let it = item("9", "x");
        let ctx = PromptContext { item: Some(&it), ..Default::default() };
        let err = render_prompt(PromptKind::Reason, &ctx).unwrap_err();
        assert!(err.to_string().contains("history"));
    }

    #[test]
    fn descriptions_truncated() {
        let long = item("1", &"é".repeat(600));
        let ctx = PromptContext { history: Some(vec![&long]), ..Default::default() };
        let p = render_prompt(PromptKind::Pattern, &ctx).unwrap();
        assert!(p.contains(&"é".repeat(512)) && !p.contains(&"é".repeat(513)));
    }
}
