//! The batch macro language.
//!
//! ```text
//! # comment
//! let exp = 30s
//! setup type=object exptime=$exp n=2
//! repeat 3 {
//!     try observe
//!     wait readout-complete 60s
//!     print "frame done"
//! }
//! ```
//!
//! Statements are separated by newlines or `;`. Any line that does not start
//! with a keyword is a server command. `$name` or `${name}` expands inside
//! words and quoted strings; `$$` is a literal dollar. Expansion builds the
//! command structurally, so expanded text is never re-tokenized.

use std::collections::HashSet;
use std::fmt;

/// 1-based source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Pos {
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}", self.line, self.column)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagCode {
    UnknownVariable,
    UnterminatedBlock,
    RepeatCount,
    UnterminatedQuote,
    UnmatchedBrace,
    Expected,
    BadDuration,
    BadTry,
}

impl DiagCode {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagCode::UnknownVariable => "unknown-variable",
            DiagCode::UnterminatedBlock => "unterminated-block",
            DiagCode::RepeatCount => "repeat-count",
            DiagCode::UnterminatedQuote => "unterminated-quote",
            DiagCode::UnmatchedBrace => "unmatched-brace",
            DiagCode::Expected => "expected",
            DiagCode::BadDuration => "bad-duration",
            DiagCode::BadTry => "bad-try",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub code: DiagCode,
    pub pos: Pos,
    pub message: String,
    /// What the parser would have accepted here.
    pub expected: Vec<String>,
}

impl Diagnostic {
    fn new(code: DiagCode, pos: Pos, message: impl Into<String>) -> Self {
        Self { code, pos, message: message.into(), expected: Vec::new() }
    }

    fn expecting(mut self, what: &[&str]) -> Self {
        self.expected = what.iter().map(|s| s.to_string()).collect();
        self
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} [{}]", self.pos, self.message, self.code.as_str())?;
        if !self.expected.is_empty() {
            write!(f, " (expected {})", self.expected.join(" or "))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// AST

#[derive(Debug, Clone, PartialEq)]
pub enum Part {
    Lit(String),
    Var(String),
}

/// Text with variable references. Adjacent literals are merged and empty
/// ones dropped, so equal texts compare equal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Template(pub Vec<Part>);

impl Template {
    pub fn lit(s: &str) -> Self {
        let mut t = Template::default();
        t.push_lit(s);
        t
    }

    fn push_lit(&mut self, s: &str) {
        if s.is_empty() {
            return;
        }
        if let Some(Part::Lit(last)) = self.0.last_mut() {
            last.push_str(s);
        } else {
            self.0.push(Part::Lit(s.to_string()));
        }
    }

    fn push_var(&mut self, name: &str) {
        self.0.push(Part::Var(name.to_string()));
    }

    /// The variable name when the template is exactly one reference.
    pub fn as_var(&self) -> Option<&str> {
        match self.0.as_slice() {
            [Part::Var(n)] => Some(n),
            _ => None,
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = &str> {
        self.0.iter().filter_map(|p| match p {
            Part::Var(n) => Some(n.as_str()),
            Part::Lit(_) => None,
        })
    }

    fn literal_text(&self) -> Option<String> {
        match self.0.as_slice() {
            [] => Some(String::new()),
            [Part::Lit(s)] => Some(s.clone()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arg {
    Positional(Template),
    Named(String, Template),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Int(i64),
    Real(f64),
    /// Seconds.
    Duration(f64),
    Text(Template),
}

#[derive(Debug, Clone, PartialEq)]
pub enum WaitTarget {
    For(Expr),
    Event { name: String, timeout: Option<Expr> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StmtKind {
    Command { try_: bool, verb: String, args: Vec<Arg> },
    Let { name: String, value: Expr },
    Repeat { count: u64, body: Vec<Stmt> },
    Wait { try_: bool, target: WaitTarget },
    Print(Vec<Expr>),
    Comment(String),
}

#[derive(Debug, Clone)]
pub struct Stmt {
    pub kind: StmtKind,
    pub pos: Pos,
}

/// Statements compare by content; positions are diagnostics only.
impl PartialEq for Stmt {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Script {
    pub statements: Vec<Stmt>,
}

pub const KEYWORDS: [&str; 5] = ["let", "repeat", "wait", "print", "try"];
pub const MAX_REPEAT: u64 = 1_000_000;

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    /// A word: its template, whether any part was quoted, the raw source
    /// text up to the first unquoted `=` (for `key=value` splitting).
    Word { text: Template, quoted: bool, key: Option<String>, value: Option<Template>, value_quoted: bool },
    Semi,
    Open,
    Close,
    Comment(String),
    Newline,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: Pos,
}

fn ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn is_ident(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(ch) if ident_start(ch)) && c.all(ident_char)
}

/// Verbs and keys follow the server line grammar.
fn is_line_ident(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(ch) if ident_start(ch)) && c.all(|ch| ch.is_ascii_alphanumeric() || matches!(ch, '_' | '-' | '.'))
}

fn lex(text: &str) -> Result<Vec<Token>, Diagnostic> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        let mut at_stmt_start = true;
        while i < chars.len() {
            let c = chars[i];
            let pos = Pos { line: ln + 1, column: i + 1 };
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == '#' && at_stmt_start {
                let rest: String = chars[i + 1..].iter().collect();
                out.push(Token { tok: Tok::Comment(rest.trim().to_string()), pos });
                break;
            }
            if c == ';' {
                out.push(Token { tok: Tok::Semi, pos });
                at_stmt_start = true;
                i += 1;
                continue;
            }
            let bare_brace = |ch: char| chars.get(i) == Some(&ch) && chars.get(i + 1).map_or(true, |n| n.is_whitespace() || *n == ';');
            if bare_brace('{') {
                out.push(Token { tok: Tok::Open, pos });
                at_stmt_start = true;
                i += 1;
                continue;
            }
            if bare_brace('}') {
                out.push(Token { tok: Tok::Close, pos });
                at_stmt_start = true;
                i += 1;
                continue;
            }
            let (tok, next) = lex_word(&chars, i, ln + 1)?;
            out.push(Token { tok, pos });
            at_stmt_start = false;
            i = next;
        }
        out.push(Token { tok: Tok::Newline, pos: Pos { line: ln + 1, column: chars.len() + 1 } });
    }
    Ok(out)
}

fn lex_word(chars: &[char], mut i: usize, line: usize) -> Result<(Tok, usize), Diagnostic> {
    let mut text = Template::default();
    let mut quoted = false;
    let mut key: Option<String> = None;
    let mut value = Template::default();
    let mut value_quoted = false;
    let mut raw_key = String::new();
    let mut key_clean = true;
    let mut in_value = false;
    let mut lit = String::new();

    // Flushes pending literal text into the word and, after `=`, the value.
    fn flush(lit: &mut String, text: &mut Template, value: &mut Template, in_value: bool) {
        text.push_lit(lit);
        if in_value {
            value.push_lit(lit);
        }
        lit.clear();
    }

    let var = |chars: &[char], i: usize| -> Result<Option<(String, usize)>, Diagnostic> {
        // chars[i] == '$'
        match chars.get(i + 1) {
            Some('$') => Ok(None),
            Some('{') => {
                let end = chars[i + 2..].iter().position(|&c| c == '}').map(|p| i + 2 + p);
                let Some(end) = end else {
                    return Err(Diagnostic::new(DiagCode::Expected, Pos { line, column: i + 1 }, "unclosed `${`")
                        .expecting(&["}"]));
                };
                let name: String = chars[i + 2..end].iter().collect();
                if !is_ident(&name) {
                    return Err(Diagnostic::new(DiagCode::Expected, Pos { line, column: i + 3 }, format!("invalid variable name `{name}`"))
                        .expecting(&["variable name"]));
                }
                Ok(Some((name, end + 1)))
            }
            Some(&c) if ident_start(c) => {
                let mut j = i + 1;
                while j < chars.len() && ident_char(chars[j]) {
                    j += 1;
                }
                Ok(Some((chars[i + 1..j].iter().collect(), j)))
            }
            _ => Err(Diagnostic::new(DiagCode::Expected, Pos { line, column: i + 2 }, "`$` must start a variable reference")
                .expecting(&["variable name", "$$"])),
        }
    };

    while i < chars.len() && !chars[i].is_whitespace() && chars[i] != ';' {
        match chars[i] {
            '"' => {
                quoted = true;
                if in_value {
                    value_quoted = true;
                } else {
                    key_clean = false;
                }
                let open = i;
                i += 1;
                loop {
                    match chars.get(i) {
                        None => {
                            return Err(Diagnostic::new(DiagCode::UnterminatedQuote, Pos { line, column: open + 1 }, "unterminated quote")
                                .expecting(&["\""]))
                        }
                        Some('"') => {
                            i += 1;
                            break;
                        }
                        Some('\\') => match chars.get(i + 1) {
                            Some(&c) => {
                                lit.push(c);
                                i += 2;
                            }
                            None => {
                                return Err(Diagnostic::new(DiagCode::UnterminatedQuote, Pos { line, column: i + 1 }, "dangling escape"))
                            }
                        },
                        Some('$') => match var(chars, i)? {
                            None => {
                                lit.push('$');
                                i += 2;
                            }
                            Some((name, next)) => {
                                flush(&mut lit, &mut text, &mut value, in_value);
                                text.push_var(&name);
                                if in_value {
                                    value.push_var(&name);
                                }
                                i = next;
                            }
                        },
                        Some(&c) => {
                            lit.push(c);
                            i += 1;
                        }
                    }
                }
            }
            '$' => match var(chars, i)? {
                None => {
                    lit.push('$');
                    if !in_value {
                        raw_key.push('$');
                        key_clean = false;
                    }
                    i += 2;
                }
                Some((name, next)) => {
                    flush(&mut lit, &mut text, &mut value, in_value);
                    text.push_var(&name);
                    if in_value {
                        value.push_var(&name);
                    } else {
                        key_clean = false;
                    }
                    i = next;
                }
            },
            '=' if !in_value && key_clean && !raw_key.is_empty() => {
                flush(&mut lit, &mut text, &mut value, in_value);
                text.push_lit("=");
                key = Some(std::mem::take(&mut raw_key));
                in_value = true;
                i += 1;
            }
            c => {
                lit.push(c);
                if !in_value {
                    raw_key.push(c);
                }
                i += 1;
            }
        }
    }
    flush(&mut lit, &mut text, &mut value, in_value);
    let value = key.as_ref().map(|_| value);
    Ok((Tok::Word { text, quoted, key, value, value_quoted }, i))
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    toks: Vec<Token>,
    at: usize,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Word { text, .. } => match text.literal_text() {
            Some(s) => format!("`{s}`"),
            None => "a word".into(),
        },
        Tok::Semi => "`;`".into(),
        Tok::Open => "`{`".into(),
        Tok::Close => "`}`".into(),
        Tok::Comment(_) => "a comment".into(),
        Tok::Newline => "end of line".into(),
    }
}

fn number(s: &str) -> Option<Expr> {
    if let Ok(i) = s.parse::<i64>() {
        return Some(Expr::Int(i));
    }
    let numeric = |t: &str| !t.is_empty() && t.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '-' | '+')) && t.chars().any(|c| c.is_ascii_digit());
    if numeric(s) {
        return s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Expr::Real);
    }
    None
}

/// `500ms`, `2s`, `1.5min`, `1h`; `None` when `s` is not shaped like one.
fn duration(s: &str) -> Option<Result<f64, ()>> {
    let split = s.find(|c: char| c.is_ascii_alphabetic())?;
    let (num, unit) = s.split_at(split);
    if num.is_empty() || !num.chars().all(|c| c.is_ascii_digit() || c == '.') || !num.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    let scale = match unit {
        "ms" => 1e-3,
        "s" => 1.0,
        "min" => 60.0,
        "h" => 3600.0,
        _ => return Some(Err(())),
    };
    let v: f64 = num.parse().map_err(|_| ()).ok()?;
    Some(Ok(v * scale))
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.at.min(self.toks.len() - 1)]
    }

    fn bump(&mut self) -> Token {
        let t = self.peek().clone();
        self.at += 1;
        t
    }

    fn done(&self) -> bool {
        self.at >= self.toks.len()
    }

    fn end_pos(&self) -> Pos {
        self.toks.last().map(|t| t.pos).unwrap_or(Pos { line: 1, column: 1 })
    }

    fn is_end_of_stmt(&self) -> bool {
        self.done() || matches!(self.peek().tok, Tok::Newline | Tok::Semi | Tok::Close)
    }

    fn block(&mut self, defined: &mut HashSet<String>, open: Option<Pos>) -> Result<Vec<Stmt>, Diagnostic> {
        let mut body = Vec::new();
        loop {
            if self.done() {
                return match open {
                    Some(p) => Err(Diagnostic::new(DiagCode::UnterminatedBlock, p, "unterminated block: `{` has no matching `}`")
                        .expecting(&["}"])),
                    None => Ok(body),
                };
            }
            let t = self.peek().clone();
            match t.tok {
                Tok::Newline | Tok::Semi => {
                    self.at += 1;
                }
                Tok::Close => {
                    self.at += 1;
                    return match open {
                        Some(_) => Ok(body),
                        None => Err(Diagnostic::new(DiagCode::UnmatchedBrace, t.pos, "`}` without an open block")),
                    };
                }
                Tok::Open => {
                    return Err(Diagnostic::new(DiagCode::Expected, t.pos, "unexpected `{`").expecting(&["statement"]));
                }
                Tok::Comment(c) => {
                    self.at += 1;
                    body.push(Stmt { kind: StmtKind::Comment(c), pos: t.pos });
                }
                Tok::Word { .. } => {
                    let s = self.statement(defined)?;
                    body.push(s);
                    if !self.is_end_of_stmt() {
                        let n = self.peek();
                        return Err(Diagnostic::new(DiagCode::Expected, n.pos, format!("unexpected {}", describe(&n.tok)))
                            .expecting(&["end of statement"]));
                    }
                }
            }
        }
    }

    fn word_text(t: &Token) -> Option<String> {
        match &t.tok {
            Tok::Word { text, quoted: false, .. } => text.literal_text(),
            _ => None,
        }
    }

    fn check_vars(t: &Template, pos: Pos, defined: &HashSet<String>) -> Result<(), Diagnostic> {
        for v in t.vars() {
            if !defined.contains(v) {
                return Err(Diagnostic::new(DiagCode::UnknownVariable, pos, format!("unknown variable `${v}`"))
                    .expecting(&["a variable defined earlier with `let`"]));
            }
        }
        Ok(())
    }

    fn expr(&mut self, defined: &HashSet<String>, what: &str) -> Result<Expr, Diagnostic> {
        if self.is_end_of_stmt() {
            let p = if self.done() { self.end_pos() } else { self.peek().pos };
            return Err(Diagnostic::new(DiagCode::Expected, p, format!("missing {what}")).expecting(&[what]));
        }
        let t = self.bump();
        let Tok::Word { text, quoted, .. } = &t.tok else {
            return Err(Diagnostic::new(DiagCode::Expected, t.pos, format!("unexpected {}", describe(&t.tok))).expecting(&[what]));
        };
        if !quoted {
            if let Some(s) = text.literal_text() {
                if let Some(n) = number(&s) {
                    return Ok(n);
                }
                match duration(&s) {
                    Some(Ok(d)) => return Ok(Expr::Duration(d)),
                    Some(Err(())) => {
                        return Err(Diagnostic::new(DiagCode::BadDuration, t.pos, format!("bad duration `{s}`"))
                            .expecting(&["ms", "s", "min", "h"]))
                    }
                    None => {}
                }
            }
        }
        Self::check_vars(text, t.pos, defined)?;
        Ok(Expr::Text(text.clone()))
    }

    fn statement(&mut self, defined: &mut HashSet<String>) -> Result<Stmt, Diagnostic> {
        let first = self.bump();
        let pos = first.pos;
        let head = Self::word_text(&first);
        match head.as_deref() {
            Some("try") => {
                if self.is_end_of_stmt() {
                    return Err(Diagnostic::new(DiagCode::BadTry, pos, "`try` needs a command").expecting(&["command", "wait"]));
                }
                let inner = self.statement(defined)?;
                match inner.kind {
                    StmtKind::Command { try_: false, verb, args } => Ok(Stmt { kind: StmtKind::Command { try_: true, verb, args }, pos }),
                    StmtKind::Wait { try_: false, target } => Ok(Stmt { kind: StmtKind::Wait { try_: true, target }, pos }),
                    _ => Err(Diagnostic::new(DiagCode::BadTry, inner.pos, "`try` applies to commands and waits only")
                        .expecting(&["command", "wait"])),
                }
            }
            Some("let") => {
                let name_tok = if self.is_end_of_stmt() { None } else { Some(self.bump()) };
                let name = name_tok.as_ref().and_then(Self::word_text).filter(|n| is_ident(n) && !KEYWORDS.contains(&n.as_str()));
                let Some(name) = name else {
                    let p = name_tok.map(|t| t.pos).unwrap_or(pos);
                    return Err(Diagnostic::new(DiagCode::Expected, p, "expected a variable name after `let`").expecting(&["name"]));
                };
                let eq = if self.is_end_of_stmt() { None } else { Some(self.bump()) };
                if eq.as_ref().and_then(Self::word_text).as_deref() != Some("=") {
                    let p = eq.map(|t| t.pos).unwrap_or(pos);
                    return Err(Diagnostic::new(DiagCode::Expected, p, "expected `=`").expecting(&["="]));
                }
                let value = self.expr(defined, "value")?;
                defined.insert(name.clone());
                Ok(Stmt { kind: StmtKind::Let { name, value }, pos })
            }
            Some("repeat") => {
                let count_tok = if self.is_end_of_stmt() { None } else { Some(self.bump()) };
                let count = count_tok.as_ref().and_then(Self::word_text).and_then(|s| s.parse::<u64>().ok());
                let Some(count) = count.filter(|&c| c <= MAX_REPEAT) else {
                    let p = count_tok.map(|t| t.pos).unwrap_or(pos);
                    return Err(Diagnostic::new(DiagCode::RepeatCount, p, "repeat count must be integer literal")
                        .expecting(&["integer from 0 to 1000000"]));
                };
                let open = self.peek().clone();
                if self.done() || open.tok != Tok::Open {
                    return Err(Diagnostic::new(DiagCode::Expected, open.pos, format!("expected `{{`, found {}", describe(&open.tok)))
                        .expecting(&["{"]));
                }
                self.at += 1;
                // Definitions inside the body outlive it only if it runs.
                let mut inner = defined.clone();
                let body = self.block(&mut inner, Some(open.pos))?;
                if count > 0 {
                    *defined = inner;
                }
                Ok(Stmt { kind: StmtKind::Repeat { count, body }, pos })
            }
            Some("wait") => {
                let t = if self.is_end_of_stmt() { None } else { Some(self.peek().clone()) };
                let event = t.as_ref().and_then(Self::word_text).filter(|s| is_line_ident(s) && number(s).is_none() && duration(s).is_none());
                let target = match event {
                    Some(name) => {
                        self.at += 1;
                        let timeout = if self.is_end_of_stmt() { None } else { Some(self.expr(defined, "timeout")?) };
                        WaitTarget::Event { name, timeout }
                    }
                    None => WaitTarget::For(self.expr(defined, "duration or event name")?),
                };
                Ok(Stmt { kind: StmtKind::Wait { try_: false, target }, pos })
            }
            Some("print") => {
                let mut items = Vec::new();
                while !self.is_end_of_stmt() {
                    items.push(self.expr(defined, "value")?);
                }
                Ok(Stmt { kind: StmtKind::Print(items), pos })
            }
            _ => {
                let Some(verb) = head.filter(|h| is_line_ident(h)) else {
                    return Err(Diagnostic::new(DiagCode::Expected, pos, format!("expected a statement, found {}", describe(&first.tok)))
                        .expecting(&["command", "let", "repeat", "wait", "print", "try"]));
                };
                let mut args = Vec::new();
                while !self.is_end_of_stmt() {
                    let t = self.bump();
                    let Tok::Word { text, key, value, .. } = t.tok else {
                        return Err(Diagnostic::new(DiagCode::Expected, t.pos, format!("unexpected {}", describe(&t.tok)))
                            .expecting(&["argument", "end of statement"]));
                    };
                    match (key, value) {
                        (Some(k), Some(v)) if is_line_ident(&k) => {
                            Self::check_vars(&v, t.pos, defined)?;
                            args.push(Arg::Named(k, v));
                        }
                        (Some(k), _) => {
                            return Err(Diagnostic::new(DiagCode::Expected, t.pos, format!("invalid key `{k}`")).expecting(&["key=value"]))
                        }
                        _ => {
                            Self::check_vars(&text, t.pos, defined)?;
                            args.push(Arg::Positional(text));
                        }
                    }
                }
                Ok(Stmt { kind: StmtKind::Command { try_: false, verb, args }, pos })
            }
        }
    }
}

/// Parses a script. Variables must be defined before use.
pub fn parse_script(text: &str) -> Result<Script, Diagnostic> {
    parse_script_with(text, &mut HashSet::new())
}

/// Parses with variables already in scope, adding any the script defines.
pub fn parse_script_with(text: &str, defined: &mut HashSet<String>) -> Result<Script, Diagnostic> {
    let toks = lex(text)?;
    let mut p = Parser { toks, at: 0 };
    let mut scope = defined.clone();
    let statements = p.block(&mut scope, None)?;
    *defined = scope;
    Ok(Script { statements })
}

/// Whether `text` has more `{` than `}` (a block still open).
pub fn needs_more(text: &str) -> bool {
    match lex(text) {
        Ok(toks) => toks.iter().fold(0i64, |d, t| match t.tok {
            Tok::Open => d + 1,
            Tok::Close => d - 1,
            _ => d,
        }) > 0,
        Err(_) => false,
    }
}

// ---------------------------------------------------------------------------
// Pretty-printer

fn render(t: &Template, force_quote: bool) -> String {
    let safe = |s: &str| s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/' | ':' | ',' | '+' | '@' | '%'));
    let quote = force_quote
        || t.0.is_empty()
        || t.0.iter().any(|p| matches!(p, Part::Lit(s) if !safe(s)))
        || matches!(t.0.first(), Some(Part::Lit(s)) if s.starts_with('#'));
    let mut out = String::new();
    if quote {
        out.push('"');
    }
    for p in &t.0 {
        match p {
            Part::Var(n) => {
                out.push_str("${");
                out.push_str(n);
                out.push('}');
            }
            Part::Lit(s) => {
                for c in s.chars() {
                    match c {
                        '"' | '\\' => {
                            out.push('\\');
                            out.push(c);
                        }
                        '$' => out.push_str("$$"),
                        _ => out.push(c),
                    }
                }
            }
        }
    }
    if quote {
        out.push('"');
    }
    out
}

fn render_expr(e: &Expr) -> String {
    match e {
        Expr::Int(i) => i.to_string(),
        Expr::Real(r) => format!("{r:?}"),
        Expr::Duration(d) => format!("{d:?}s"),
        Expr::Text(t) => match t.as_var() {
            Some(n) => format!("${n}"),
            None => render(t, true),
        },
    }
}

fn pretty_stmt(s: &Stmt, depth: usize, out: &mut String) {
    let indent = "    ".repeat(depth);
    out.push_str(&indent);
    match &s.kind {
        StmtKind::Comment(c) => {
            out.push('#');
            if !c.is_empty() {
                out.push(' ');
                out.push_str(c);
            }
        }
        StmtKind::Let { name, value } => out.push_str(&format!("let {name} = {}", render_expr(value))),
        StmtKind::Print(items) => {
            out.push_str("print");
            for i in items {
                out.push(' ');
                out.push_str(&render_expr(i));
            }
        }
        StmtKind::Wait { try_, target } => {
            if *try_ {
                out.push_str("try ");
            }
            out.push_str("wait ");
            match target {
                WaitTarget::For(e) => out.push_str(&render_expr(e)),
                WaitTarget::Event { name, timeout } => {
                    out.push_str(name);
                    if let Some(t) = timeout {
                        out.push(' ');
                        out.push_str(&render_expr(t));
                    }
                }
            }
        }
        StmtKind::Command { try_, verb, args } => {
            if *try_ {
                out.push_str("try ");
            }
            out.push_str(verb);
            for a in args {
                out.push(' ');
                match a {
                    // A literal `=` would read back as a key.
                    Arg::Positional(t) => {
                        let eq = t.0.iter().any(|p| matches!(p, Part::Lit(s) if s.contains('=')));
                        let kw = t.literal_text().is_some_and(|s| s == "{" || s == "}");
                        out.push_str(&render(t, eq || kw));
                    }
                    Arg::Named(k, v) => {
                        out.push_str(k);
                        out.push('=');
                        out.push_str(&render(v, false));
                    }
                }
            }
        }
        StmtKind::Repeat { count, body } => {
            out.push_str(&format!("repeat {count} {{\n"));
            for b in body {
                pretty_stmt(b, depth + 1, out);
            }
            out.push_str(&indent);
            out.push('}');
        }
    }
    out.push('\n');
}

/// Canonical source text for a script.
pub fn pretty(script: &Script) -> String {
    let mut out = String::new();
    for s in &script.statements {
        pretty_stmt(s, 0, &mut out);
    }
    out
}

impl fmt::Display for Script {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&pretty(self))
    }
}
