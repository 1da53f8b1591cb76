//! Plain-text prompt templates with `{name}` placeholders. Templates load
//! from a directory so operators can edit them; the crate ships defaults that
//! are embedded as a fallback.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {0} not found")]
    Missing(String),
    #[error("template directory unreadable: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: HashMap<String, String>,
}

impl TemplateSet {
    /// The templates bundled with the crate.
    pub fn builtin() -> Self {
        let mut templates = HashMap::new();
        templates.insert("decompose".into(), include_str!("../templates/decompose.txt").into());
        templates.insert("revise".into(), include_str!("../templates/revise.txt").into());
        templates.insert("react".into(), include_str!("../templates/react.txt").into());
        templates.insert(
            "codegen_python".into(),
            include_str!("../templates/codegen_python.txt").into(),
        );
        templates.insert("codegen_c".into(), include_str!("../templates/codegen_c.txt").into());
        templates.insert("codegen_cpp".into(), include_str!("../templates/codegen_cpp.txt").into());
        templates.insert("rubric".into(), include_str!("../templates/rubric.txt").into());
        TemplateSet { templates }
    }

    /// Loads every `*.txt` file in `dir` (keyed by file stem), on top of the
    /// builtin set so partial overrides work.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = TemplateSet::builtin();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    set.templates
                        .insert(stem.to_string(), std::fs::read_to_string(&path)?);
                }
            }
        }
        Ok(set)
    }

    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        let template = self
            .templates
            .get(name)
            .ok_or_else(|| TemplateError::Missing(name.to_string()))?;
        let mut out = template.clone();
        for (key, value) in vars {
            out = out.replace(&format!("{{{key}}}"), value);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_templates_render() {
        let set = TemplateSet::builtin();
        let text = set
            .render("react", &[("subtask_description", "copy a string"), ("tools", "-"), ("history", "-")])
            .unwrap();
        assert!(text.contains("copy a string"));
        assert!(!text.contains("{subtask_description}"));
    }

    #[test]
    fn missing_template_errors() {
        let set = TemplateSet::builtin();
        assert!(matches!(
            set.render("nope", &[]),
            Err(TemplateError::Missing(_))
        ));
    }

    #[test]
    fn dir_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("react.txt"), "custom {subtask_description}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        let text = set
            .render("react", &[("subtask_description", "x")])
            .unwrap();
        assert_eq!(text, "custom x");
    }
}
