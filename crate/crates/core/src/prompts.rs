//! Versioned prompt templates with `{{key}}` placeholders.

pub const VIEWFRAMES: Template =
    Template { name: "viewframes.v1", text: include_str!("../templates/viewframes.v1.txt") };
pub const ANNOTATE: Template = Template { name: "annotate.v1", text: include_str!("../templates/annotate.v1.txt") };
pub const RETARGET: Template = Template { name: "retarget.v1", text: include_str!("../templates/retarget.v1.txt") };

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub text: &'static str,
}

impl Template {
    /// Substitutes every `{{key}}`. Placeholders without a value are left
    /// in place so they show up in the audit log.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = self.text.to_string();
        for (k, v) in vars {
            out = out.replace(&format!("{{{{{k}}}}}"), v);
        }
        out
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        let mut rest = self.text;
        while let Some(start) = rest.find("{{") {
            let Some(len) = rest[start + 2..].find("}}") else { break };
            let name = &rest[start + 2..start + 2 + len];
            if !names.contains(&name) {
                names.push(name);
            }
            rest = &rest[start + 2 + len + 2..];
        }
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placeholders_are_discoverable() {
        assert_eq!(VIEWFRAMES.placeholders(), vec!["task", "cadence", "last_t", "summary", "max_frames"]);
        assert_eq!(ANNOTATE.placeholders(), vec!["task", "last_t", "summary", "frames"]);
        assert_eq!(RETARGET.placeholders(), vec!["task", "description", "keyposes", "observation"]);
    }

    #[test]
    fn render_fills_all_slots() {
        let vars: Vec<(&str, &str)> = RETARGET.placeholders().into_iter().map(|k| (k, "X")).collect();
        let out = RETARGET.render(&vars);
        assert!(!out.contains("{{"));
        assert!(RETARGET.render(&[]).contains("{{task}}"));
    }
}
