//! R1: parse the snippet, keep it only if it yields method-level units.

use rustpython_parser::ast::{self, Constant, Expr, Ranged, Stmt};
use rustpython_parser::Parse;

use super::{FilterError, FilterOutcome, Rule};
use crate::corpus::CodeSample;

/// A function or method cut out of a larger snippet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionUnit {
    pub name: String,
    /// `Class.method` for methods, the bare name otherwise.
    pub qualname: String,
    /// Source of the definition including decorators, dedented.
    pub code: String,
    /// Docstring, or the `#` comment block directly above the definition.
    pub docstring: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseOutcome {
    Parsed(Vec<FunctionUnit>),
    SyntaxError(String),
}

/// A parser that separates "input does not parse" (an outcome) from a
/// failure of the parser itself (an error).
pub trait CodeParser: Send + Sync {
    fn parse(&self, source: &str) -> Result<ParseOutcome, FilterError>;
}

/// Python parser. Collects module-level functions and class methods
/// (recursing into nested classes, not into function bodies).
#[derive(Debug, Clone, Copy, Default)]
pub struct PythonParser;

impl CodeParser for PythonParser {
    fn parse(&self, source: &str) -> Result<ParseOutcome, FilterError> {
        let suite = match ast::Suite::parse(source, "<snippet>") {
            Ok(s) => s,
            Err(e) => return Ok(ParseOutcome::SyntaxError(e.to_string())),
        };
        let mut units = Vec::new();
        collect(source, &suite, "", &mut units);
        Ok(ParseOutcome::Parsed(units))
    }
}

fn collect(source: &str, body: &[Stmt], prefix: &str, out: &mut Vec<FunctionUnit>) {
    for stmt in body {
        match stmt {
            Stmt::FunctionDef(f) => {
                out.push(unit(source, stmt, f.name.as_str(), prefix, &f.body, &f.decorator_list))
            }
            Stmt::AsyncFunctionDef(f) => {
                out.push(unit(source, stmt, f.name.as_str(), prefix, &f.body, &f.decorator_list))
            }
            Stmt::ClassDef(c) => {
                let nested = format!("{prefix}{}.", c.name.as_str());
                collect(source, &c.body, &nested, out);
            }
            _ => {}
        }
    }
}

fn unit(
    source: &str,
    stmt: &Stmt,
    name: &str,
    prefix: &str,
    body: &[Stmt],
    decorators: &[Expr],
) -> FunctionUnit {
    let def_start = stmt.start().to_usize();
    let start = decorators
        .iter()
        .map(|d| d.start().to_usize())
        .chain(std::iter::once(def_start))
        .min()
        .unwrap_or(def_start);
    let line_start = source[..start].rfind('\n').map_or(0, |i| i + 1);
    let end = stmt.end().to_usize();
    let code = dedent(&source[line_start..end]);

    let docstring = body
        .first()
        .and_then(|s| match s {
            Stmt::Expr(e) => match e.value.as_ref() {
                Expr::Constant(c) => match &c.value {
                    Constant::Str(s) => Some(clean_doc(s)),
                    _ => None,
                },
                _ => None,
            },
            _ => None,
        })
        .filter(|d| !d.is_empty())
        .or_else(|| leading_comment(&source[..line_start]));

    FunctionUnit {
        name: name.to_string(),
        qualname: format!("{prefix}{name}"),
        code,
        docstring,
    }
}

/// Removes the first line's indentation from every line that carries it.
fn dedent(text: &str) -> String {
    let indent: String = text.chars().take_while(|c| *c == ' ' || *c == '\t').collect();
    if indent.is_empty() {
        return text.to_string();
    }
    text.split('\n')
        .map(|l| l.strip_prefix(indent.as_str()).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Docstring normalization in the manner of `inspect.cleandoc`.
fn clean_doc(raw: &str) -> String {
    let lines: Vec<&str> = raw.split('\n').collect();
    let margin = lines
        .iter()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.len() - l.trim_start().len())
        .min()
        .unwrap_or(0);
    let mut out: Vec<String> = Vec::with_capacity(lines.len());
    out.push(lines[0].trim_start().to_string());
    for l in &lines[1..] {
        let cut = margin.min(l.len() - l.trim_start().len());
        out.push(l[cut..].trim_end().to_string());
    }
    while out.last().is_some_and(|l| l.trim().is_empty()) {
        out.pop();
    }
    while out.first().is_some_and(|l| l.trim().is_empty()) {
        out.remove(0);
    }
    out.join("\n").trim_end().to_string()
}

/// The contiguous `#` comment block ending right above `before`'s end.
fn leading_comment(before: &str) -> Option<String> {
    let mut lines: Vec<&str> = Vec::new();
    for l in before.trim_end_matches('\n').rsplit('\n') {
        let t = l.trim();
        match t.strip_prefix('#') {
            Some(c) => lines.push(c.trim()),
            None => break,
        }
    }
    if lines.is_empty() {
        return None;
    }
    lines.reverse();
    let text = lines.join("\n").trim().to_string();
    (!text.is_empty()).then_some(text)
}

/// Outcome of R1 for one snippet plus the method-level samples it yielded.
#[derive(Debug, Clone)]
pub struct SyntaxRun {
    pub outcome: FilterOutcome,
    pub units: Vec<CodeSample>,
}

/// R1. A single extracted unit keeps the sample id; several units get
/// `<id>::<qualname>` ids.
pub fn filter_syntax(sample: &CodeSample, parser: &dyn CodeParser) -> Result<SyntaxRun, FilterError> {
    let units = match parser.parse(&sample.code)? {
        ParseOutcome::SyntaxError(msg) => {
            return Ok(SyntaxRun {
                outcome: FilterOutcome::drop(Rule::R1, format!("syntax error: {msg}")),
                units: Vec::new(),
            })
        }
        ParseOutcome::Parsed(units) => units,
    };
    if units.is_empty() {
        return Ok(SyntaxRun {
            outcome: FilterOutcome::drop(Rule::R1, "no function definition"),
            units: Vec::new(),
        });
    }
    let single = units.len() == 1;
    let units = units
        .into_iter()
        .map(|u| CodeSample {
            id: if single {
                sample.id.clone()
            } else {
                format!("{}::{}", sample.id, u.qualname)
            },
            prompt: sample.prompt.clone(),
            code: u.code,
            docstring: u.docstring,
            origin: sample.origin,
        })
        .collect();
    Ok(SyntaxRun {
        outcome: FilterOutcome::keep(Rule::R1),
        units,
    })
}
