use std::fs;
use std::io;
use std::path::Path;

/// Marker used in place of the reference list when there are no references.
pub const NO_REFERENCES: &str = "(none)";

/// Prompt templates. Placeholders are `{name}`; unknown placeholders are left
/// as written.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub pricing_user: String,
    pub system_price: String,
    pub system_rationale: String,
    pub system_datagen: String,
    pub backward: String,
    pub forward: String,
}

const FILES: [&str; 6] = [
    "pricing_user.txt",
    "system_price.txt",
    "system_rationale.txt",
    "system_datagen.txt",
    "backward.txt",
    "forward.txt",
];

impl Default for Templates {
    fn default() -> Self {
        let t = |s: &str| s.trim_end().to_string();
        Self {
            pricing_user: t(include_str!("../../templates/pricing_user.txt")),
            system_price: t(include_str!("../../templates/system_price.txt")),
            system_rationale: t(include_str!("../../templates/system_rationale.txt")),
            system_datagen: t(include_str!("../../templates/system_datagen.txt")),
            backward: t(include_str!("../../templates/backward.txt")),
            forward: t(include_str!("../../templates/forward.txt")),
        }
    }
}

impl Templates {
    /// Built-in templates, overridden by any same-named file in `dir`.
    pub fn from_dir(dir: &Path) -> io::Result<Self> {
        let mut t = Self::default();
        for name in FILES {
            let path = dir.join(name);
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path)?.trim_end().to_string();
            let slot = match name {
                "pricing_user.txt" => &mut t.pricing_user,
                "system_price.txt" => &mut t.system_price,
                "system_rationale.txt" => &mut t.system_rationale,
                "system_datagen.txt" => &mut t.system_datagen,
                "backward.txt" => &mut t.backward,
                _ => &mut t.forward,
            };
            *slot = text;
        }
        Ok(t)
    }
}

/// Single-pass placeholder substitution; substituted text is never rescanned.
pub(crate) fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match replaced {
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
