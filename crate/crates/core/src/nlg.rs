//! Template realisation of act lists for the rule-based participants.

use std::collections::HashMap;
use std::path::Path;

use crate::model::{DialogueAct, Speaker};

const BUNDLED: &str = include_str!("../templates/nlg.txt");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NlgError {
    #[error("no template for {speaker:?} act {act}")]
    MissingTemplate { speaker: Speaker, act: String },
    #[error("cannot realise an empty act list")]
    EmptyActList,
    #[error("template file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("template file: {0}")]
    Io(String),
}

type Key = (String, String, String);

#[derive(Debug, Clone, Default)]
pub struct TemplateNlg {
    user: HashMap<Key, String>,
    system: HashMap<Key, String>,
}

impl TemplateNlg {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED).expect("bundled NLG templates parse")
    }

    pub fn load(path: &Path) -> Result<Self, NlgError> {
        let text = std::fs::read_to_string(path).map_err(|e| NlgError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, NlgError> {
        let mut nlg = Self::default();
        let mut section: Option<Speaker> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |message: &str| NlgError::Parse { line: i + 1, message: message.to_string() };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[user]" => section = Some(Speaker::User),
                "[system]" => section = Some(Speaker::System),
                _ => {
                    let fields: Vec<&str> = line.splitn(4, '|').map(str::trim).collect();
                    let [intent, domain, slot, template] = fields[..] else {
                        return Err(err("expected `intent | domain | slot | template`"));
                    };
                    if intent.is_empty() || domain.is_empty() || slot.is_empty() || template.is_empty() {
                        return Err(err("empty field"));
                    }
                    let table = match section {
                        Some(Speaker::User) => &mut nlg.user,
                        Some(Speaker::System) => &mut nlg.system,
                        None => return Err(err("template outside a [user] or [system] section")),
                    };
                    let key = (intent.to_lowercase(), domain.to_lowercase(), slot.to_lowercase());
                    if table.insert(key, template.to_string()).is_some() {
                        return Err(err("duplicate template key"));
                    }
                }
            }
        }
        Ok(nlg)
    }

    fn lookup(&self, speaker: Speaker, act: &DialogueAct) -> Option<&str> {
        let table = match speaker {
            Speaker::User => &self.user,
            Speaker::System => &self.system,
        };
        let slot = if act.slot.is_empty() { "-".to_string() } else { act.slot.clone() };
        let value = act.value.to_lowercase();
        let slot_keys = [format!("{slot}={value}"), format!("*={value}"), slot, "*".to_string()];
        for s in &slot_keys {
            for d in [act.domain.as_str(), "*"] {
                let key = (act.intent.as_str().to_string(), d.to_string(), s.clone());
                if let Some(t) = table.get(&key) {
                    return Some(t);
                }
            }
        }
        None
    }

    pub fn realize(&self, speaker: Speaker, acts: &[DialogueAct]) -> Result<String, NlgError> {
        if acts.is_empty() {
            return Err(NlgError::EmptyActList);
        }
        let mut parts = Vec::with_capacity(acts.len());
        for act in acts {
            let template = self
                .lookup(speaker, act)
                .ok_or_else(|| NlgError::MissingTemplate { speaker, act: act.to_string() })?;
            parts.push(
                template.replace("{value}", &act.value).replace("{domain}", &act.domain).replace("{slot}", &act.slot),
            );
        }
        let mut out = String::new();
        for (i, part) in parts.iter().enumerate() {
            if i + 1 == parts.len() {
                out.push_str(part);
            } else if let Some(stripped) = part.strip_suffix('.') {
                out.push_str(stripped);
                out.push_str(". ");
            } else {
                out.push_str(part);
                out.push(' ');
            }
        }
        Ok(out)
    }
}
