//! `key = value` text blocks with `#` comments.

use indexmap::IndexMap;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// later duplicates replace earlier ones.
pub fn parse(text: &str) -> Result<IndexMap<String, String>, String> {
    let mut out = IndexMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", lineno + 1));
        }
        out.insert(k.replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

/// Renders pairs as `key = value` lines, LF-terminated.
pub fn render<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("not a boolean: {v:?}")),
    }
}
