//! Role prompt templates with `{placeholder}` substitution.
//!
//! Placeholders: `{round}`, `{question}`, `{options}`, `{proposal}`,
//! `{history}`, `{evidence}`, `{current_round}`. Unknown placeholders are
//! left untouched.

use std::collections::BTreeMap;
use std::path::Path;

use crate::model::Role;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleTemplate {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    templates: BTreeMap<Role, RoleTemplate>,
}

fn builtin(role: Role) -> RoleTemplate {
    let (system, user) = match role {
        Role::Reasoning => (
            include_str!("../../prompts/reasoning.system.txt"),
            include_str!("../../prompts/reasoning.user.txt"),
        ),
        Role::Knowledge => (
            include_str!("../../prompts/knowledge.system.txt"),
            include_str!("../../prompts/knowledge.user.txt"),
        ),
        Role::Safety => (
            include_str!("../../prompts/safety.system.txt"),
            include_str!("../../prompts/safety.user.txt"),
        ),
        Role::Judge => (
            include_str!("../../prompts/judge.system.txt"),
            include_str!("../../prompts/judge.user.txt"),
        ),
    };
    RoleTemplate {
        system: system.trim_end().to_string(),
        user: user.to_string(),
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            templates: Role::ALL.into_iter().map(|r| (r, builtin(r))).collect(),
        }
    }
}

impl PromptTemplates {
    /// Loads `{role}.system.txt` / `{role}.user.txt` from `dir`, keeping the
    /// built-in text for any file that is absent.
    pub fn load_dir(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        let mut out = Self::default();
        for role in Role::ALL {
            let entry = out.templates.get_mut(&role).unwrap();
            let system = dir.join(format!("{role}.system.txt"));
            if system.exists() {
                entry.system = std::fs::read_to_string(system)?.trim_end().to_string();
            }
            let user = dir.join(format!("{role}.user.txt"));
            if user.exists() {
                entry.user = std::fs::read_to_string(user)?;
            }
        }
        Ok(out)
    }

    pub fn set(&mut self, role: Role, template: RoleTemplate) {
        self.templates.insert(role, template);
    }

    pub fn get(&self, role: Role) -> &RoleTemplate {
        &self.templates[&role]
    }

    /// Renders the (system, user) pair for `role`.
    pub fn render(&self, role: Role, vars: &BTreeMap<&str, String>) -> (String, String) {
        let t = self.get(role);
        (fill(&t.system, vars), fill(&t.user, vars))
    }
}

/// Single-pass substitution, so values containing braces are never re-expanded.
pub fn fill(template: &str, vars: &BTreeMap<&str, String>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_end = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let name = &after[..name_end];
        match (after[name_end..].starts_with('}'), vars.get(name)) {
            (true, Some(value)) if !name.is_empty() => {
                out.push_str(value);
                rest = &after[name_end + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
