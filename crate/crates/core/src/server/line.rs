//! Client line protocol: `verb arg key=value "quoted value" ...`.
//!
//! Replies are single lines starting `OK` or `ERR <code>`; asynchronous
//! notifications start `EVENT <name>`.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandLine {
    pub verb: String,
    pub positional: Vec<String>,
    pub named: Vec<(String, String)>,
}

impl CommandLine {
    pub fn new(verb: impl Into<String>) -> Self {
        Self { verb: verb.into(), positional: Vec::new(), named: Vec::new() }
    }

    pub fn arg(mut self, value: impl Into<String>) -> Self {
        self.positional.push(value.into());
        self
    }

    pub fn kv(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.named.push((key.into(), value.into()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.named.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Quotes a token only when it would not survive re-tokenizing.
pub fn quote(value: &str) -> String {
    let plain = !value.is_empty() && !value.chars().any(|c| c.is_whitespace() || c == '"' || c == '\\' || c == '=');
    if plain {
        return value.to_string();
    }
    let mut out = String::with_capacity(value.len() + 2);
    out.push('"');
    for c in value.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

impl fmt::Display for CommandLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.verb)?;
        for p in &self.positional {
            write!(f, " {}", quote(p))?;
        }
        for (k, v) in &self.named {
            write!(f, " {k}={}", quote(v))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("column {column}: {message}")]
pub struct LineError {
    /// 1-based character column.
    pub column: usize,
    pub message: String,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Tokens with the column they start at.
fn tokens(line: &str) -> Result<Vec<(usize, String, bool)>, LineError> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let mut text = String::new();
        let mut quoted = false;
        while i < chars.len() && !chars[i].is_whitespace() {
            if chars[i] == '"' {
                quoted = true;
                let open = i;
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(LineError { column: open + 1, message: "unterminated quote".into() }),
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => {
                            let Some(&c) = chars.get(i + 1) else {
                                return Err(LineError { column: i + 1, message: "dangling escape".into() });
                            };
                            text.push(c);
                            i += 2;
                        }
                        Some(&c) => {
                            text.push(c);
                            i += 1;
                        }
                    }
                }
            } else {
                text.push(chars[i]);
                i += 1;
            }
        }
        out.push((start + 1, text, quoted));
    }
    Ok(out)
}

pub fn parse_line(line: &str) -> Result<CommandLine, LineError> {
    let toks = tokens(line.trim_end_matches(['\r', '\n']))?;
    let mut it = toks.into_iter();
    let Some((col, verb, quoted)) = it.next() else {
        return Err(LineError { column: 1, message: "empty command".into() });
    };
    if quoted || !is_ident(&verb) {
        return Err(LineError { column: col, message: format!("expected a verb, found `{verb}`") });
    }
    let mut cmd = CommandLine::new(verb);
    for (col, tok, _) in it {
        // `key=value` only when the part before `=` was unquoted; the
        // tokenizer folds quotes away so look at the source instead.
        match split_named(line, col, &tok) {
            Some((k, v)) => {
                if !is_ident(&k) {
                    return Err(LineError { column: col, message: format!("invalid key `{k}`") });
                }
                cmd.named.push((k, v));
            }
            None => cmd.positional.push(tok),
        }
    }
    Ok(cmd)
}

fn split_named(line: &str, col: usize, tok: &str) -> Option<(String, String)> {
    let src: String = line.chars().skip(col - 1).take_while(|c| !c.is_whitespace()).collect();
    let eq = src.find('=')?;
    if src[..eq].contains('"') {
        return None;
    }
    let key = src[..eq].to_string();
    let value = tok[key.len() + 1..].to_string();
    if key.is_empty() {
        return None;
    }
    Some((key, value))
}

/// Reply line helpers.
pub fn ok(text: impl fmt::Display) -> String {
    let t = text.to_string();
    if t.is_empty() {
        "OK".into()
    } else {
        format!("OK {t}")
    }
}

pub fn err(code: &str, detail: impl fmt::Display) -> String {
    let d = detail.to_string();
    if d.is_empty() {
        format!("ERR {code}")
    } else {
        format!("ERR {code} {d}")
    }
}

pub fn event(name: &str, fields: &[(&str, String)]) -> String {
    let mut s = format!("EVENT {name}");
    for (k, v) in fields {
        s.push_str(&format!(" {k}={}", quote(v)));
    }
    s
}

/// Splits `key=value` fields out of a reply or event line.
pub fn fields(line: &str) -> Vec<(String, String)> {
    parse_line(line).map(|c| c.named).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn verbs_args_and_pairs() {
        let c = parse_line("setup type=dark exptime=2.5 roi=0,0,64,64").unwrap();
        assert_eq!(c.verb, "setup");
        assert_eq!(c.get("exptime"), Some("2.5"));
        assert_eq!(c.get("roi"), Some("0,0,64,64"));
        let c = parse_line("set ccd-temp 173.0").unwrap();
        assert_eq!(c.positional, vec!["ccd-temp", "173.0"]);
    }

    #[test]
    fn quoted_values() {
        let c = parse_line(r#"run_cmd device lamp "on now" note="a \"b\"""#).unwrap();
        assert_eq!(c.positional, vec!["device", "lamp", "on now"]);
        assert_eq!(c.get("note"), Some(r#"a "b""#));
        // `=` inside quotes does not make a pair.
        let c = parse_line(r#"print "a=b""#).unwrap();
        assert_eq!(c.positional, vec!["a=b"]);
    }

    #[test]
    fn errors_carry_column() {
        assert_eq!(parse_line("setup x=\"abc").unwrap_err().column, 9);
        assert_eq!(parse_line("  =x").unwrap_err().column, 3);
        assert_eq!(parse_line("").unwrap_err().column, 1);
        assert_eq!(parse_line("setup 9x=1").unwrap_err().column, 7);
    }

    #[test]
    fn event_fields_parse_back() {
        let e = event("readout-complete", &[("frame", "0".into()), ("file", "/tmp/a b.fits".into())]);
        assert_eq!(e, r#"EVENT readout-complete frame=0 file="/tmp/a b.fits""#);
        let f = fields(&e);
        assert_eq!(f[1], ("file".to_string(), "/tmp/a b.fits".to_string()));
    }

    proptest! {
        #[test]
        fn display_reparses(
            verb in "[a-z][a-z_]{0,8}",
            pos in proptest::collection::vec("[ -~]{1,12}", 0..4),
            named in proptest::collection::vec(("[a-z][a-z0-9_]{0,6}", "[ -~]{0,12}"), 0..4),
        ) {
            let mut c = CommandLine::new(verb);
            c.positional = pos;
            c.named = named;
            let text = c.to_string();
            prop_assert_eq!(parse_line(&text).unwrap(), c);
        }
    }
}
