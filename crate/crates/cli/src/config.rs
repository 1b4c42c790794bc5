//! Plain-text `key = value` configs with `#` comments.

use std::path::{Path, PathBuf};

use crate::error::CliError;

/// Ordered key/value pairs; later entries win.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    pub entries: Vec<(String, String)>,
}

impl KvConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Config(format!("{origin}:{}: empty key", lineno + 1)));
            }
            entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(KvConfig { entries })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// File values (if any) followed by `--set` overrides.
    pub fn load(path: Option<&PathBuf>, overrides: &[String]) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::read(p)?,
            None => KvConfig::default(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{o}`")))?;
            cfg.entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(cfg)
    }
}

/// Renders pairs in the same format [`KvConfig::parse`] reads.
pub fn render(header: &str, pairs: &[(String, String)]) -> String {
    let mut out = format!("# {header}\n");
    for (k, v) in pairs {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blanks_and_spacing() {
        let c = KvConfig::parse("# header\n\nloss = softmax  # trailing\nseed=3\n", "t").unwrap();
        assert_eq!(
            c.entries,
            vec![("loss".into(), "softmax".into()), ("seed".into(), "3".into())]
        );
    }

    #[test]
    fn malformed_lines_are_config_errors() {
        assert!(matches!(KvConfig::parse("loss softmax", "t"), Err(CliError::Config(_))));
        assert!(matches!(KvConfig::parse(" = 3", "t"), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_come_last() {
        let c = KvConfig::load(None, &["seed=4".into()]).unwrap();
        assert_eq!(c.entries, vec![("seed".into(), "4".into())]);
        assert!(KvConfig::load(None, &["seed".into()]).is_err());
    }

    #[test]
    fn render_round_trips() {
        let pairs = vec![("a".to_string(), "1,2".to_string()), ("b.c".into(), "x".into())];
        let text = render("echo", &pairs);
        assert_eq!(KvConfig::parse(&text, "t").unwrap().entries, pairs);
    }
}
