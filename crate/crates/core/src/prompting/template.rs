use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template `{name}`: {message}")]
    Syntax { name: String, message: String },
    #[error("template `{name}` references slot {{{{{slot}}}}} which is not supplied")]
    UnknownSlot { name: String, slot: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("cannot read templates from {path}: {message}")]
    Io { path: String, message: String },
}

/// A prompt pattern with `{{slot}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    text: String,
    slots: BTreeSet<String>,
}

impl Template {
    pub fn parse(name: &str, text: &str) -> Result<Self, TemplateError> {
        let mut slots = BTreeSet::new();
        let mut rest = text;
        while let Some(open) = rest.find("{{") {
            let after = &rest[open + 2..];
            let close = after.find("}}").ok_or_else(|| TemplateError::Syntax {
                name: name.into(),
                message: "unterminated `{{`".into(),
            })?;
            let slot = after[..close].trim();
            if slot.is_empty() || !slot.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(TemplateError::Syntax {
                    name: name.into(),
                    message: format!("bad slot name `{slot}`"),
                });
            }
            slots.insert(slot.to_string());
            rest = &after[close + 2..];
        }
        Ok(Self {
            name: name.into(),
            text: text.into(),
            slots,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn slots(&self) -> &BTreeSet<String> {
        &self.slots
    }

    /// Fails if the template uses a slot outside `available`.
    pub fn check_slots(&self, available: &[&str]) -> Result<(), TemplateError> {
        match self.slots.iter().find(|s| !available.contains(&s.as_str())) {
            Some(slot) => Err(TemplateError::UnknownSlot {
                name: self.name.clone(),
                slot: slot.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len() * 2);
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            let close = after.find("}}").expect("checked at parse time");
            let slot = after[..close].trim();
            let value = values.get(slot).ok_or_else(|| TemplateError::UnknownSlot {
                name: self.name.clone(),
                slot: slot.to_string(),
            })?;
            out.push_str(value);
            rest = &after[close + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// (name, slots the renderer supplies, built-in text)
pub(crate) const BUILTINS: &[(&str, &[&str], &str)] = &[
    (
        "direct",
        &["contexts", "question", "options"],
        "{{contexts}}\nQUESTION: {{question}}\n{{options}}\nReply with the letter of the correct option in the form \"Answer: <letter>\".",
    ),
    (
        "cot",
        &["contexts", "question", "options"],
        "{{contexts}}\nQUESTION: {{question}}\n{{options}}\nLet's think step by step, then give the final answer in the form \"Answer: <letter>\".",
    ),
    (
        "cove_draft",
        &["contexts", "question", "options"],
        "{{contexts}}\nQUESTION: {{question}}\n{{options}}\nDraft an answer with a short justification, ending with \"Answer: <letter>\".",
    ),
    (
        "cove_plan",
        &["contexts", "question", "options", "draft"],
        "{{contexts}}\nQUESTION: {{question}}\n{{options}}\nDraft response:\n{{draft}}\nPlan verification questions for fact-checking the draft. Write one question per line.",
    ),
    (
        "cove_answer",
        &["contexts", "verification_question"],
        "{{contexts}}\nAnswer the following question concisely using the context.\n{{verification_question}}",
    ),
    (
        "cove_final",
        &["contexts", "question", "options", "draft", "verification"],
        "{{contexts}}\nQUESTION: {{question}}\n{{options}}\nDraft response:\n{{draft}}\nVerification:\n{{verification}}\nGiven the verification, revise the draft if needed and give the final answer in the form \"Answer: <letter>\".",
    ),
    (
        "voc_plan",
        &["contexts", "question", "options", "option"],
        "{{contexts}}\nQUESTION: {{question}}\n{{options}}\nThink about why the answer is {{option}}.",
    ),
    (
        "voc_execute",
        &["contexts", "question", "options", "explanations", "choices"],
        "{{contexts}}\nQUESTION: {{question}}\n{{options}}\n{{explanations}}\nPlease judge the {{choices}} thinking process according to its logical completeness and context.",
    ),
    (
        "voc_final",
        &["contexts", "question", "options", "verification"],
        "{{contexts}}\nQUESTION: {{question}}\n{{options}}\nJudgment: {{verification}}\nGenerate Final Response: give the final answer in the form \"Answer: <letter>\".",
    ),
    (
        "annotate_long_answer",
        &["question", "options", "long_answer"],
        "LONG ANSWER: {{long_answer}}\nQUESTION: {{question}}\n{{options}}\nBased on the long answer, reply with the letter of the correct option in the form \"Answer: <letter>\".",
    ),
];

pub(crate) fn available_slots(name: &str) -> Option<&'static [&'static str]> {
    BUILTINS.iter().find(|(n, _, _)| *n == name).map(|(_, s, _)| *s)
}

/// Named templates, starting from the built-ins.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = BUILTINS
            .iter()
            .map(|(name, _, text)| {
                (
                    name.to_string(),
                    Template::parse(name, text).expect("built-in templates parse"),
                )
            })
            .collect();
        Self { templates }
    }
}

impl TemplateSet {
    pub fn get(&self, name: &str) -> Result<&Template, TemplateError> {
        self.templates
            .get(name)
            .ok_or_else(|| TemplateError::UnknownTemplate(name.into()))
    }

    /// Replaces a built-in. The override may only use slots the built-in's
    /// renderer supplies.
    pub fn set(&mut self, name: &str, text: &str) -> Result<(), TemplateError> {
        let slots = available_slots(name).ok_or_else(|| TemplateError::UnknownTemplate(name.into()))?;
        let tpl = Template::parse(name, text)?;
        tpl.check_slots(slots)?;
        self.templates.insert(name.into(), tpl);
        Ok(())
    }

    /// Loads every `<name>.txt` in `dir` as an override of template `name`.
    pub fn load_dir(&mut self, dir: &Path) -> Result<(), TemplateError> {
        let io = |e: std::io::Error| TemplateError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .collect::<Result<_, _>>()
            .map_err(io)?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path).map_err(io)?;
            self.set(name, text.trim_end_matches('\n'))?;
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_only_use_supplied_slots() {
        let set = TemplateSet::default();
        for (name, slots, _) in BUILTINS {
            set.get(name).unwrap().check_slots(slots).unwrap();
        }
    }

    #[test]
    fn render_and_missing_slot() {
        let t = Template::parse("t", "Q: {{question}} / {{ options }}").unwrap();
        let mut v = BTreeMap::new();
        v.insert("question", "why".to_string());
        assert!(matches!(t.render(&v), Err(TemplateError::UnknownSlot { .. })));
        v.insert("options", "A) yes".to_string());
        assert_eq!(t.render(&v).unwrap(), "Q: why / A) yes");
    }

    #[test]
    fn overrides_are_slot_checked() {
        let mut set = TemplateSet::default();
        set.set("voc_plan", "Why {{option}}? {{question}}").unwrap();
        assert!(matches!(
            set.set("voc_plan", "{{verification}}"),
            Err(TemplateError::UnknownSlot { .. })
        ));
        assert!(matches!(
            set.set("nope", "x"),
            Err(TemplateError::UnknownTemplate(_))
        ));
        assert!(Template::parse("bad", "{{oops").is_err());
    }
}
