//! Versioned prompt template file.
//!
//! ```text
//! [meta]
//! version = report-v1
//!
//! [system]
//! ...system prompt...
//!
//! [user]
//! ...instruction...
//! {fixation_block}
//! ```
//!
//! `{fixation_block}` is the only placeholder. When the user section omits
//! it, the block is appended on its own line.

use super::PromptError;

pub const DEFAULT_TEMPLATE: &str = include_str!("../../templates/report_v1.txt");
const FIXATION_PLACEHOLDER: &str = "{fixation_block}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    pub system: String,
    pub user: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template parses")
    }
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut version = None;
        let mut system: Option<String> = None;
        let mut user: Option<String> = None;
        let mut current: Option<(String, Vec<&str>)> = None;

        let mut finish = |sec: Option<(String, Vec<&str>)>| -> Result<(), PromptError> {
            let Some((name, lines)) = sec else {
                return Ok(());
            };
            let body = lines.join("\n").trim_matches('\n').trim_end().to_string();
            match name.as_str() {
                "meta" => {
                    for l in body.lines().filter(|l| !l.trim().is_empty()) {
                        let (k, v) = l
                            .split_once('=')
                            .ok_or_else(|| PromptError::Template(format!("bad meta line {l:?}")))?;
                        if k.trim() == "version" {
                            version = Some(v.trim().to_string());
                        }
                    }
                }
                "system" => system = Some(body),
                "user" => user = Some(body),
                other => return Err(PromptError::Template(format!("unknown section [{other}]"))),
            }
            Ok(())
        };

        for line in text.lines() {
            let t = line.trim();
            if t.starts_with('[') && t.ends_with(']') && !t.contains(' ') && t.len() > 2 {
                finish(current.take())?;
                current = Some((t[1..t.len() - 1].to_string(), Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            } else if !t.is_empty() {
                return Err(PromptError::Template(format!(
                    "text before first section: {line:?}"
                )));
            }
        }
        finish(current.take())?;

        let missing = |what: &str| PromptError::Template(format!("missing {what}"));
        Ok(Self {
            version: version.ok_or_else(|| missing("meta version"))?,
            system: system.ok_or_else(|| missing("[system] section"))?,
            user: user.ok_or_else(|| missing("[user] section"))?,
        })
    }

    /// User text with no fixation block.
    pub fn base_text(&self) -> String {
        self.render_user("")
    }

    pub fn render_user(&self, fixation_block: &str) -> String {
        if self.user.contains(FIXATION_PLACEHOLDER) {
            self.user
                .replace(FIXATION_PLACEHOLDER, fixation_block)
                .trim_end()
                .to_string()
        } else if fixation_block.is_empty() {
            self.user.trim_end().to_string()
        } else {
            format!("{}\n{}", self.user.trim_end(), fixation_block)
        }
    }
}
