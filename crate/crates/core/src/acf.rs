//! Access-security files: parsing, rendering, merging per-IOC files into a
//! gateway file, adding the gateway account, and evaluating decisions.
//!
//! Grammar (whitespace and newlines are insignificant, `#` starts a comment
//! that runs to the end of the line):
//!
//! ```text
//! UAG(name){user1, user2}
//! HAG(name){host1}
//! ASG(name){
//!     RULE(1, READ)
//!     RULE(1, WRITE){UAG(a, b) HAG(c)}
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::proto::Identity;

pub const DEFAULT_ASG: &str = "DEFAULT";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AcfError {
    #[error("parse error at {line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("rule in ASG {asg} references undefined {kind} {name}")]
    UndefinedGroup {
        asg: String,
        kind: GroupKind,
        name: String,
    },
    #[error("conflicting definitions of {0} in strict merge")]
    MergeConflict(String),
    #[error("nothing to merge")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Uag,
    Hag,
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKind::Uag => "UAG",
            GroupKind::Hag => "HAG",
        })
    }
}

/// WRITE implies READ, hence the derived ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Read,
    Write,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Read => "READ",
            Level::Write => "WRITE",
        })
    }
}

impl std::str::FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "READ" => Ok(Level::Read),
            "WRITE" => Ok(Level::Write),
            _ => Err(format!("unknown access level {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rule {
    /// Access security level column; carried through but not interpreted.
    pub asl: u8,
    pub level: Level,
    /// `None` means the rule has no UAG clause and matches every user.
    pub uags: Option<BTreeSet<String>>,
    pub hags: Option<BTreeSet<String>>,
}

impl Rule {
    pub fn new(level: Level) -> Self {
        Rule {
            asl: 1,
            level,
            uags: None,
            hags: None,
        }
    }

    pub fn with_uags<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.uags = Some(names.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_hags<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.hags = Some(names.into_iter().map(Into::into).collect());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessSecurityConfig {
    pub uags: BTreeMap<String, BTreeSet<String>>,
    pub hags: BTreeMap<String, BTreeSet<String>>,
    pub asgs: BTreeMap<String, Vec<Rule>>,
}

impl Default for AccessSecurityConfig {
    fn default() -> Self {
        let mut asgs = BTreeMap::new();
        asgs.insert(DEFAULT_ASG.to_string(), Vec::new());
        AccessSecurityConfig {
            uags: BTreeMap::new(),
            hags: BTreeMap::new(),
            asgs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessDecision {
    pub allow: bool,
    /// ASG actually consulted (after DEFAULT fallback) and rule index.
    pub matched_rule: Option<(String, usize)>,
}

impl AccessSecurityConfig {
    /// Checks that every group referenced by a rule exists and that DEFAULT
    /// is present.
    pub fn validate(&mut self) -> Result<(), AcfError> {
        self.asgs.entry(DEFAULT_ASG.to_string()).or_default();
        for (asg, rules) in &self.asgs {
            for rule in rules {
                for (kind, names, defined) in [
                    (GroupKind::Uag, &rule.uags, &self.uags),
                    (GroupKind::Hag, &rule.hags, &self.hags),
                ] {
                    for name in names.iter().flatten() {
                        if !defined.contains_key(name) {
                            return Err(AcfError::UndefinedGroup {
                                asg: asg.clone(),
                                kind,
                                name: name.clone(),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Name of the ASG that governs `asg`, falling back to DEFAULT.
    pub fn effective_asg<'a>(&self, asg: &'a str) -> &'a str {
        if self.asgs.contains_key(asg) {
            asg
        } else {
            DEFAULT_ASG
        }
    }

    fn rule_matches(&self, rule: &Rule, who: &Identity) -> bool {
        let user_ok = rule.uags.as_ref().is_none_or(|names| {
            names
                .iter()
                .filter_map(|n| self.uags.get(n))
                .any(|users| users.contains(&who.user))
        });
        let host_ok = rule.hags.as_ref().is_none_or(|names| {
            names
                .iter()
                .filter_map(|n| self.hags.get(n))
                .any(|hosts| hosts.iter().any(|h| h.eq_ignore_ascii_case(&who.host)))
        });
        user_ok && host_ok
    }

    pub fn evaluate(&self, asg: &str, who: &Identity, level: Level) -> AccessDecision {
        let name = self.effective_asg(asg);
        let hit = self.asgs.get(name).and_then(|rules| {
            rules
                .iter()
                .position(|r| r.level >= level && self.rule_matches(r, who))
        });
        AccessDecision {
            allow: hit.is_some(),
            matched_rule: hit.map(|i| (name.to_string(), i)),
        }
    }

    pub fn allows(&self, asg: &str, who: &Identity, level: Level) -> bool {
        self.evaluate(asg, who, level).allow
    }

    /// Canonical text form; reparsing it yields an equal config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (kind, groups) in [("UAG", &self.uags), ("HAG", &self.hags)] {
            for (name, members) in groups {
                let list: Vec<&str> = members.iter().map(String::as_str).collect();
                let _ = writeln!(out, "{kind}({name}) {{{}}}", list.join(", "));
            }
        }
        for (name, rules) in &self.asgs {
            let _ = writeln!(out, "ASG({name}) {{");
            for rule in rules {
                let _ = write!(out, "    RULE({}, {})", rule.asl, rule.level);
                let mut clauses = Vec::new();
                if let Some(u) = &rule.uags {
                    clauses.push(format!("UAG({})", join(u)));
                }
                if let Some(h) = &rule.hags {
                    clauses.push(format!("HAG({})", join(h)));
                }
                if !clauses.is_empty() {
                    let _ = write!(out, " {{{}}}", clauses.join(" "));
                }
                out.push('\n');
            }
            out.push_str("}\n");
        }
        out
    }
}

fn join(names: &BTreeSet<String>) -> String {
    names
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(", ")
}

impl fmt::Display for AccessSecurityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::str::FromStr for AccessSecurityConfig {
    type Err = AcfError;

    fn from_str(s: &str) -> Result<Self, AcfError> {
        parse_acf(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(String),
    Punct(char),
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: usize,
    column: usize,
}

fn is_word_char(c: char) -> bool {
    !c.is_whitespace() && !matches!(c, '(' | ')' | '{' | '}' | ',' | '#' | '"')
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer {
            chars: text.chars().peekable(),
            line: 1,
            column: 1,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn tokens(mut self) -> Result<Vec<(Tok, usize, usize)>, AcfError> {
        let mut out = Vec::new();
        while let Some(&c) = self.chars.peek() {
            let (line, column) = (self.line, self.column);
            if c.is_whitespace() {
                self.bump();
            } else if c == '#' {
                while let Some(c) = self.bump() {
                    if c == '\n' {
                        break;
                    }
                }
            } else if matches!(c, '(' | ')' | '{' | '}' | ',') {
                self.bump();
                out.push((Tok::Punct(c), line, column));
            } else if c == '"' {
                self.bump();
                let mut word = String::new();
                loop {
                    match self.bump() {
                        Some('"') => break,
                        Some(ch) => word.push(ch),
                        None => {
                            return Err(AcfError::Parse {
                                line,
                                column,
                                message: "unterminated quoted string".into(),
                            })
                        }
                    }
                }
                out.push((Tok::Word(word), line, column));
            } else {
                let mut word = String::new();
                while let Some(&ch) = self.chars.peek() {
                    if !is_word_char(ch) {
                        break;
                    }
                    word.push(ch);
                    self.bump();
                }
                out.push((Tok::Word(word), line, column));
            }
        }
        Ok(out)
    }
}

struct Parser {
    toks: Vec<(Tok, usize, usize)>,
    pos: usize,
    eof: (usize, usize),
}

impl Parser {
    fn err<T>(&self, message: impl Into<String>) -> Result<T, AcfError> {
        let (line, column) = self
            .toks
            .get(self.pos)
            .map(|(_, l, c)| (*l, *c))
            .unwrap_or(self.eof);
        Err(AcfError::Parse {
            line,
            column,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _, _)| t)
    }

    fn peek_punct(&self, p: char) -> bool {
        self.peek() == Some(&Tok::Punct(p))
    }

    fn expect_punct(&mut self, p: char) -> Result<(), AcfError> {
        if self.peek_punct(p) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected '{p}'"))
        }
    }

    fn word(&mut self, what: &str) -> Result<String, AcfError> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    /// `a, b, c` up to (not including) `close`; commas are optional.
    fn name_list(&mut self, close: char, what: &str) -> Result<BTreeSet<String>, AcfError> {
        let mut names = BTreeSet::new();
        while !self.peek_punct(close) {
            names.insert(self.word(what)?);
            if self.peek_punct(',') {
                self.pos += 1;
            }
        }
        self.pos += 1;
        Ok(names)
    }

    fn paren_name(&mut self) -> Result<String, AcfError> {
        self.expect_punct('(')?;
        let name = self.word("a name")?;
        self.expect_punct(')')?;
        Ok(name)
    }

    fn rule(&mut self) -> Result<Rule, AcfError> {
        self.expect_punct('(')?;
        let asl_word = self.word("an access security level")?;
        let Ok(asl) = asl_word.parse::<u8>() else {
            self.pos -= 1;
            return self.err(format!("bad access security level {asl_word:?}"));
        };
        self.expect_punct(',')?;
        let level_word = self.word("READ or WRITE")?;
        let level = match level_word.parse::<Level>() {
            Ok(l) => l,
            Err(e) => {
                self.pos -= 1;
                return self.err(e);
            }
        };
        self.expect_punct(')')?;
        let mut rule = Rule {
            asl,
            level,
            uags: None,
            hags: None,
        };
        if self.peek_punct('{') {
            self.pos += 1;
            while !self.peek_punct('}') {
                let kw = self.word("UAG or HAG")?;
                self.expect_punct('(')?;
                let names = self.name_list(')', "a group name")?;
                let slot = match kw.as_str() {
                    "UAG" => &mut rule.uags,
                    "HAG" => &mut rule.hags,
                    other => {
                        self.pos -= 1;
                        return self.err(format!("unexpected {other:?} in rule body"));
                    }
                };
                slot.get_or_insert_with(BTreeSet::new).extend(names);
                if self.peek_punct(',') {
                    self.pos += 1;
                }
                if self.peek().is_none() {
                    return self.err("unterminated rule body");
                }
            }
            self.pos += 1;
        }
        Ok(rule)
    }

    fn config(&mut self) -> Result<AccessSecurityConfig, AcfError> {
        let mut cfg = AccessSecurityConfig {
            uags: BTreeMap::new(),
            hags: BTreeMap::new(),
            asgs: BTreeMap::new(),
        };
        while self.peek().is_some() {
            let start = self.pos;
            let kw = self.word("UAG, HAG or ASG")?;
            match kw.as_str() {
                "UAG" | "HAG" => {
                    let name = self.paren_name()?;
                    let members = if self.peek_punct('{') {
                        self.pos += 1;
                        self.name_list('}', "a member")?
                    } else {
                        BTreeSet::new()
                    };
                    let groups = if kw == "UAG" {
                        &mut cfg.uags
                    } else {
                        &mut cfg.hags
                    };
                    if groups.insert(name.clone(), members).is_some() {
                        self.pos = start;
                        return self.err(format!("duplicate {kw}({name})"));
                    }
                }
                "ASG" => {
                    let name = self.paren_name()?;
                    let mut rules = Vec::new();
                    if self.peek_punct('{') {
                        self.pos += 1;
                        while !self.peek_punct('}') {
                            match self.word("RULE")?.as_str() {
                                "RULE" => rules.push(self.rule()?),
                                other => {
                                    self.pos -= 1;
                                    return self.err(format!("unexpected {other:?} in ASG body"));
                                }
                            }
                        }
                        self.pos += 1;
                    }
                    if cfg.asgs.insert(name.clone(), rules).is_some() {
                        self.pos = start;
                        return self.err(format!("duplicate ASG({name})"));
                    }
                }
                other => {
                    self.pos = start;
                    return self.err(format!("unexpected {other:?}"));
                }
            }
        }
        Ok(cfg)
    }
}

pub fn parse_acf(text: &str) -> Result<AccessSecurityConfig, AcfError> {
    let lexer = Lexer::new(text);
    let toks = lexer.tokens()?;
    let eof = text
        .lines()
        .enumerate()
        .last()
        .map_or((1, 1), |(i, l)| (i + 1, l.chars().count() + 1));
    let mut parser = Parser { toks, pos: 0, eof };
    let mut cfg = parser.config()?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeMode {
    Strict,
    #[default]
    Union,
}

/// Builds the gateway's file as the sum of per-IOC files.
///
/// Group and ASG namespaces are unioned. In [`MergeMode::Union`], same-named
/// groups take the union of their members and same-named ASGs the
/// concatenation of their distinct rules. [`MergeMode::Strict`] reports a
/// same-named group or ASG with a different body as a conflict; an empty
/// DEFAULT ASG counts as absent.
///
/// An input that lacks an ASG defined by another input governs that ASG
/// through its DEFAULT, so its DEFAULT rules are folded into the merged ASG.
/// This keeps every decision allowed by some input allowed by the result.
pub fn merge_acf(
    configs: &[AccessSecurityConfig],
    mode: MergeMode,
) -> Result<AccessSecurityConfig, AcfError> {
    let (first, rest) = configs.split_first().ok_or(AcfError::Empty)?;
    if rest.is_empty() {
        return Ok(first.clone());
    }
    let mut out = AccessSecurityConfig::default();
    for cfg in configs {
        for (groups, merged) in [(&cfg.uags, &mut out.uags), (&cfg.hags, &mut out.hags)] {
            for (name, members) in groups {
                match merged.get_mut(name) {
                    None => {
                        merged.insert(name.clone(), members.clone());
                    }
                    Some(existing) if existing == members => {}
                    Some(_) if mode == MergeMode::Strict => {
                        return Err(AcfError::MergeConflict(name.clone()))
                    }
                    Some(existing) => existing.extend(members.iter().cloned()),
                }
            }
        }
    }
    if mode == MergeMode::Strict {
        let mut seen: BTreeMap<&str, &Vec<Rule>> = BTreeMap::new();
        for cfg in configs {
            for (name, rules) in &cfg.asgs {
                if name == DEFAULT_ASG && rules.is_empty() {
                    continue;
                }
                if let Some(prev) = seen.insert(name, rules) {
                    if prev != rules {
                        return Err(AcfError::MergeConflict(name.clone()));
                    }
                }
            }
        }
    }
    let names: BTreeSet<&String> = configs.iter().flat_map(|c| c.asgs.keys()).collect();
    for name in names {
        let mut rules: Vec<Rule> = Vec::new();
        for cfg in configs {
            let source = cfg
                .asgs
                .get(name)
                .or_else(|| cfg.asgs.get(DEFAULT_ASG))
                .map(Vec::as_slice)
                .unwrap_or_default();
            for rule in source {
                if !rules.contains(rule) {
                    rules.push(rule.clone());
                }
            }
        }
        out.asgs.insert(name.clone(), rules);
    }
    Ok(out)
}

/// Returns a copy of `config` in which the gateway account can perform every
/// write some user could: its user joins each UAG named by a WRITE rule and
/// its host joins each HAG named by a WRITE rule. Unrestricted rules are left
/// as they are.
pub fn augment_for_gateway(
    config: &AccessSecurityConfig,
    gateway: &Identity,
) -> AccessSecurityConfig {
    let mut out = config.clone();
    let write_rules = config
        .asgs
        .values()
        .flatten()
        .filter(|r| r.level == Level::Write);
    for rule in write_rules {
        for name in rule.uags.iter().flatten() {
            if let Some(users) = out.uags.get_mut(name) {
                users.insert(gateway.user.clone());
            }
        }
        if !gateway.host.is_empty() {
            for name in rule.hags.iter().flatten() {
                if let Some(hosts) = out.hags.get_mut(name) {
                    if !hosts.iter().any(|h| h.eq_ignore_ascii_case(&gateway.host)) {
                        hosts.insert(gateway.host.clone());
                    }
                }
            }
        }
    }
    out
}
