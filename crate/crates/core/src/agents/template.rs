//! `{{placeholder}}` templates for the agent system prompts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use thiserror::Error;

pub const THERAPIST_TEMPLATE_FILE: &str = "therapist.txt";
pub const INTERLOCUTOR_TEMPLATE_FILE: &str = "interlocutor.txt";

const DEFAULT_THERAPIST: &str = include_str!("../../assets/therapist_template.txt");
const DEFAULT_INTERLOCUTOR: &str = include_str!("../../assets/interlocutor_template.txt");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("template placeholder `{{{{{0}}}}}` has no value")]
    Unbound(String),
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

/// Replaces every `{{name}}` with its value. Names are trimmed, so
/// `{{ name }}` works too. A placeholder with no value is an error.
pub fn render(template: &str, vars: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    let mut offset = 0;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or(TemplateError::Unterminated(offset + start))?;
        let name = after[..end].trim();
        let value = vars
            .get(name)
            .ok_or_else(|| TemplateError::Unbound(name.to_string()))?;
        out.push_str(value);
        let consumed = start + 2 + end + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn placeholders(template: &str) -> Vec<String> {
    let mut names = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else { break };
        names.push(after[..end].trim().to_string());
        rest = &after[end + 2..];
    }
    names
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub therapist: String,
    pub interlocutor: String,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self {
            therapist: DEFAULT_THERAPIST.to_string(),
            interlocutor: DEFAULT_INTERLOCUTOR.to_string(),
        }
    }
}

impl TemplateSet {
    /// Loads templates from `dir`, falling back to the bundled text for any
    /// file that is absent.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let read = |name: &str, fallback: &str| -> Result<String, TemplateError> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(text) => Ok(text),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(fallback.to_string()),
                Err(e) => Err(TemplateError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                }),
            }
        };
        Ok(Self {
            therapist: read(THERAPIST_TEMPLATE_FILE, DEFAULT_THERAPIST)?,
            interlocutor: read(INTERLOCUTOR_TEMPLATE_FILE, DEFAULT_INTERLOCUTOR)?,
        })
    }
}

/// Shared, reloadable template set.
#[derive(Debug, Default)]
pub struct TemplateStore {
    dir: Option<PathBuf>,
    current: RwLock<TemplateSet>,
}

impl TemplateStore {
    pub fn bundled() -> Self {
        Self::default()
    }

    pub fn from_dir(dir: impl Into<PathBuf>) -> Result<Self, TemplateError> {
        let dir = dir.into();
        let set = TemplateSet::load_dir(&dir)?;
        Ok(Self {
            dir: Some(dir),
            current: RwLock::new(set),
        })
    }

    pub fn current(&self) -> TemplateSet {
        self.current.read().clone()
    }

    /// Re-reads the template directory. A failed read keeps the previous set.
    pub fn reload(&self) -> Result<(), TemplateError> {
        if let Some(dir) = &self.dir {
            let set = TemplateSet::load_dir(dir)?;
            *self.current.write() = set;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&'static str, &str)]) -> BTreeMap<&'static str, String> {
        pairs.iter().map(|(k, v)| (*k, v.to_string())).collect()
    }

    #[test]
    fn substitutes_and_trims_names() {
        let out = render("Hi {{name}}, at {{ place }}.", &vars(&[("name", "Hui"), ("place", "school")]));
        assert_eq!(out.unwrap(), "Hi Hui, at school.");
    }

    #[test]
    fn unbound_and_unterminated() {
        assert_eq!(
            render("{{who}}", &BTreeMap::new()),
            Err(TemplateError::Unbound("who".into()))
        );
        assert_eq!(render("ab {{x", &vars(&[("x", "1")])), Err(TemplateError::Unterminated(3)));
    }

    #[test]
    fn bundled_templates_declare_expected_placeholders() {
        let set = TemplateSet::default();
        let t = placeholders(&set.therapist);
        assert!(t.iter().all(|p| p == "therapist_name" || p == "patient_description"));
        let i = placeholders(&set.interlocutor);
        for p in ["characteristic", "scenario", "base_traits", "name"] {
            assert!(i.iter().any(|x| x == p), "missing {p}");
        }
    }

    #[test]
    fn reload_picks_up_edits() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(THERAPIST_TEMPLATE_FILE), "v1 {{therapist_name}}").unwrap();
        let store = TemplateStore::from_dir(dir.path()).unwrap();
        assert_eq!(store.current().therapist, "v1 {{therapist_name}}");
        assert_eq!(store.current().interlocutor, DEFAULT_INTERLOCUTOR);
        std::fs::write(dir.path().join(THERAPIST_TEMPLATE_FILE), "v2").unwrap();
        store.reload().unwrap();
        assert_eq!(store.current().therapist, "v2");
    }
}
