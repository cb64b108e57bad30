//! Prompt templates with `{name}` placeholders.

use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub decomposer: String,
    pub generator_primary: String,
    pub generator_fallback: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            decomposer: include_str!("../prompts/decomposer.txt").to_string(),
            generator_primary: include_str!("../prompts/generator_primary.txt").to_string(),
            generator_fallback: include_str!("../prompts/generator_fallback.txt").to_string(),
        }
    }
}

impl PromptTemplates {
    /// Load templates from `dir`, keeping the built-in text for any file that is absent.
    pub fn load_dir(dir: &Path) -> io::Result<Self> {
        let mut t = Self::default();
        for (file, slot) in [
            ("decomposer.txt", &mut t.decomposer),
            ("generator_primary.txt", &mut t.generator_primary),
            ("generator_fallback.txt", &mut t.generator_fallback),
        ] {
            let path = dir.join(file);
            if path.is_file() {
                *slot = fs::read_to_string(path)?;
            }
        }
        Ok(t)
    }
}

/// Substitute `{name}` placeholders in one pass; substituted text is never rescanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_known_placeholders_once() {
        let s = render("Q: {question} / {unknown} / {plan}", &[("question", "{plan}"), ("plan", "P")]);
        assert_eq!(s, "Q: {plan} / {unknown} / P");
    }

    #[test]
    fn builtin_templates_have_placeholders() {
        let t = PromptTemplates::default();
        for p in ["{catalog}", "{segments}", "{evidence}", "{question}"] {
            assert!(t.decomposer.contains(p), "{p}");
        }
        for p in ["{failed_sql}", "{errors}", "{warnings}", "{plan}"] {
            assert!(t.generator_fallback.contains(p), "{p}");
        }
    }

    #[test]
    fn directory_overrides_single_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("generator_primary.txt"), "custom {question}").unwrap();
        let t = PromptTemplates::load_dir(dir.path()).unwrap();
        assert_eq!(t.generator_primary, "custom {question}");
        assert_eq!(t.decomposer, PromptTemplates::default().decomposer);
    }
}
