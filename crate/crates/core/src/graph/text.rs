//! Line-oriented text format.
//!
//! ```text
//! diffgraph v1
//! # comment
//! 0 input shape=[2]
//! 1 elementwise:exp 0
//! 2 reduce:sum 1
//! output 2
//! ```
//!
//! Each node line is `id kind attrs... parents...`. Ids must count up from 0.
//! Composite nodes are inlined on output.

use std::fmt::Write as _;

use super::{Graph, Node, Primitive, Reduction, Tensor, Unary};
use crate::error::{Error, Result};

const HEADER: &str = "diffgraph v1";

fn fmt_list<T: std::fmt::Display>(xs: &[T]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

pub fn serialize(graph: &Graph) -> String {
    let g = graph
        .inline_composites()
        .expect("inlining a valid graph cannot fail");
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    for (k, node) in g.nodes().iter().enumerate() {
        write!(out, "{k} {}", node.primitive.kind()).unwrap();
        match &node.primitive {
            Primitive::Input { shape } => write!(out, " shape={}", fmt_list(shape)).unwrap(),
            Primitive::Constant(t) => write!(
                out,
                " shape={} data={}",
                fmt_list(t.shape()),
                fmt_list(t.data())
            )
            .unwrap(),
            Primitive::Elementwise(Unary::Scale(c)) | Primitive::Elementwise(Unary::Offset(c)) => {
                write!(out, " c={c}").unwrap()
            }
            Primitive::Elementwise(Unary::Powi(n)) => write!(out, " n={n}").unwrap(),
            Primitive::Slice { start, len } => write!(out, " start={start} len={len}").unwrap(),
            _ => {}
        }
        for p in &node.parents {
            write!(out, " {p}").unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "output {}", g.output()).unwrap();
    out
}

struct Tok<'a> {
    text: &'a str,
    col: usize,
}

fn tokenize(line: &str) -> Vec<Tok<'_>> {
    let mut toks = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                toks.push(Tok { text: &line[s..i], col: s + 1 });
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        toks.push(Tok { text: &line[s..], col: s + 1 });
    }
    toks
}

fn perr(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, line: usize, col: usize) -> Result<Vec<T>> {
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| perr(line, col, format!("expected a bracketed list, got `{s}`")))?;
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|x| {
            x.parse::<T>()
                .map_err(|_| perr(line, col, format!("bad list entry `{x}`")))
        })
        .collect()
}

fn parse_scalar<T: std::str::FromStr>(s: &str, line: usize, col: usize) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| perr(line, col, format!("bad value `{s}`")))
}

fn parse_unary(name: &str, attr: &dyn Fn(&str) -> Option<(String, usize)>, line: usize, col: usize) -> Result<Unary> {
    let need = |key: &str| {
        attr(key).ok_or_else(|| perr(line, col, format!("elementwise:{name} needs {key}=")))
    };
    Ok(match name {
        "neg" => Unary::Neg,
        "exp" => Unary::Exp,
        "log" => Unary::Log,
        "sqrt" => Unary::Sqrt,
        "sin" => Unary::Sin,
        "cos" => Unary::Cos,
        "tanh" => Unary::Tanh,
        "square" => Unary::Square,
        "relu" => Unary::Relu,
        "logistic" => Unary::Logistic,
        "softplus" => Unary::Softplus,
        "recip" => Unary::Recip,
        "scale" => {
            let (v, c) = need("c")?;
            Unary::Scale(parse_scalar(&v, line, c)?)
        }
        "offset" => {
            let (v, c) = need("c")?;
            Unary::Offset(parse_scalar(&v, line, c)?)
        }
        "powi" => {
            let (v, c) = need("n")?;
            Unary::Powi(parse_scalar(&v, line, c)?)
        }
        _ => return Err(perr(line, col, format!("unknown elementwise function `{name}`"))),
    })
}

pub fn deserialize(text: &str) -> Result<Graph> {
    let mut lines = text.lines().enumerate();
    let header_ok = loop {
        match lines.next() {
            None => break false,
            Some((_, l)) if l.trim().is_empty() || l.trim_start().starts_with('#') => continue,
            Some((_, l)) => break l.trim() == HEADER,
        }
    };
    if !header_ok {
        return Err(perr(1, 1, format!("expected header `{HEADER}`")));
    }

    let mut nodes: Vec<Node> = Vec::new();
    let mut output: Option<usize> = None;
    let mut last_line = 1;
    for (i, raw) in lines {
        let ln = i + 1;
        last_line = ln;
        let content = raw.split('#').next().unwrap_or("");
        let toks = tokenize(content);
        if toks.is_empty() {
            continue;
        }
        if toks[0].text == "output" {
            if toks.len() != 2 {
                return Err(perr(ln, toks[0].col, "expected `output <id>`"));
            }
            output = Some(parse_scalar(toks[1].text, ln, toks[1].col)?);
            continue;
        }
        if output.is_some() {
            return Err(perr(ln, toks[0].col, "node after output line"));
        }
        let id: usize = parse_scalar(toks[0].text, ln, toks[0].col)?;
        if id != nodes.len() {
            return Err(perr(ln, toks[0].col, format!("expected node id {}, got {id}", nodes.len())));
        }
        let kind = toks
            .get(1)
            .ok_or_else(|| perr(ln, raw.len() + 1, "missing node kind"))?;
        let mut attrs: Vec<(String, String, usize)> = Vec::new();
        let mut parents = Vec::new();
        for t in &toks[2..] {
            if let Some((k, v)) = t.text.split_once('=') {
                if !parents.is_empty() {
                    return Err(perr(ln, t.col, "attributes must precede parents"));
                }
                attrs.push((k.to_string(), v.to_string(), t.col));
            } else {
                parents.push(parse_scalar::<usize>(t.text, ln, t.col)?);
            }
        }
        let attr = |key: &str| {
            attrs
                .iter()
                .find(|(k, _, _)| k == key)
                .map(|(_, v, c)| (v.clone(), *c))
        };
        let need = |key: &str| {
            attr(key).ok_or_else(|| perr(ln, kind.col, format!("`{}` needs {key}=", kind.text)))
        };
        let primitive = match kind.text {
            "input" => {
                let (v, c) = need("shape")?;
                Primitive::Input { shape: parse_list(&v, ln, c)? }
            }
            "constant" => {
                let (s, sc) = need("shape")?;
                let (d, dc) = need("data")?;
                let t = Tensor::new(parse_list(&s, ln, sc)?, parse_list(&d, ln, dc)?)
                    .map_err(|e| perr(ln, dc, e.to_string()))?;
                Primitive::Constant(t)
            }
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "matvec" => Primitive::Matvec,
            "matmul" => Primitive::Matmul,
            "concat" => Primitive::Concat,
            "dup" => Primitive::Dup,
            "slice" => {
                let (s, sc) = need("start")?;
                let (l, lc) = need("len")?;
                Primitive::Slice {
                    start: parse_scalar(&s, ln, sc)?,
                    len: parse_scalar(&l, ln, lc)?,
                }
            }
            k if k.starts_with("elementwise:") => {
                Primitive::Elementwise(parse_unary(&k["elementwise:".len()..], &attr, ln, kind.col)?)
            }
            k if k.starts_with("reduce:") => Primitive::Reduce(match &k["reduce:".len()..] {
                "sum" => Reduction::Sum,
                "mean" => Reduction::Mean,
                "logsumexp" => Reduction::LogSumExp,
                "max" => Reduction::Max,
                other => return Err(perr(ln, kind.col, format!("unknown reduction `{other}`"))),
            }),
            other => return Err(perr(ln, kind.col, format!("unknown node kind `{other}`"))),
        };
        nodes.push(Node { primitive, parents });
    }
    let output = output.ok_or_else(|| perr(last_line, 1, "missing `output <id>` line"))?;
    Graph::new(nodes, output)
}
