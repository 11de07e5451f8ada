//! Prompt templates for the remote language-model backends.
//!
//! Templates are plain UTF-8 with `{name}` placeholders. The defaults are
//! compiled in; a directory holding `quality.txt`, `behavior.txt` or
//! `translate.txt` overrides them file by file.

use std::path::Path;

use ethoclip::ethogram::Ethogram;

use crate::backend::GlossaryEntry;

const QUALITY: &str = include_str!("../assets/prompts/quality.txt");
const BEHAVIOR: &str = include_str!("../assets/prompts/behavior.txt");
const TRANSLATE: &str = include_str!("../assets/prompts/translate.txt");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    pub quality: String,
    pub behavior: String,
    pub translate: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            quality: QUALITY.into(),
            behavior: BEHAVIOR.into(),
            translate: TRANSLATE.into(),
        }
    }
}

impl PromptSet {
    pub fn load_overrides(dir: &Path) -> Result<Self, String> {
        let mut set = Self::default();
        for (file, slot) in [
            ("quality.txt", &mut set.quality),
            ("behavior.txt", &mut set.behavior),
            ("translate.txt", &mut set.translate),
        ] {
            let path = dir.join(file);
            if path.exists() {
                *slot = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            }
        }
        set.validate()?;
        Ok(set)
    }

    /// Each template must consume the transcript; the behaviour prompt also
    /// needs the ethogram and the translation prompt the glossary.
    pub fn validate(&self) -> Result<(), String> {
        let need = [
            ("quality", &self.quality, &["transcript"][..]),
            ("behavior", &self.behavior, &["transcript", "ethogram"][..]),
            ("translate", &self.translate, &["transcript", "glossary"][..]),
        ];
        for (name, tpl, keys) in need {
            for k in keys {
                if !tpl.contains(&format!("{{{k}}}")) {
                    return Err(format!("{name} prompt is missing the {{{k}}} placeholder"));
                }
            }
        }
        Ok(())
    }
}

/// Substitutes `{key}` for each pair. Other braces are left alone.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = tail
            .find('}')
            .and_then(|close| vars.iter().find(|(k, _)| *k == &tail[..close]).map(|(_, v)| (close, v)));
        match hit {
            Some((close, v)) => {
                out.push_str(v);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn render_ethogram(ethogram: &Ethogram) -> String {
    ethogram.render()
}

/// Glossary lines plus one line per monkey name.
pub fn render_glossary(glossary: &[GlossaryEntry], names: &[String]) -> String {
    let mut lines: Vec<String> = glossary
        .iter()
        .map(|g| format!("- \"{}\" means \"{}\"", g.source, g.target))
        .collect();
    lines.extend(names.iter().map(|n| format!("- \"{n}\" is a monkey name: write \"the monkey\"")));
    if lines.is_empty() {
        lines.push("- (none)".into());
    }
    lines.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        PromptSet::default().validate().unwrap();
    }

    #[test]
    fn render_substitutes_known_keys_only() {
        let out = render("a {x} b {y} {\"json\": 1} {x}", &[("x", "1"), ("y", "{x}")]);
        assert_eq!(out, "a 1 b {x} {\"json\": 1} 1");
    }

    #[test]
    fn behavior_prompt_lists_every_action() {
        let e = Ethogram::capuchin();
        let p = render(&PromptSet::default().behavior, &[("ethogram", &render_ethogram(&e)), ("transcript", "t")]);
        for name in e.names() {
            assert!(p.contains(&format!("- {name}: ")), "{name}");
        }
    }

    #[test]
    fn overrides_replace_per_file() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        std::fs::write(dir.join("quality.txt"), "Q {transcript}").unwrap();
        let set = PromptSet::load_overrides(dir).unwrap();
        assert_eq!(set.quality, "Q {transcript}");
        assert_eq!(set.behavior, PromptSet::default().behavior);
        std::fs::write(dir.join("quality.txt"), "no placeholder").unwrap();
        assert!(PromptSet::load_overrides(dir).is_err());
    }
}
