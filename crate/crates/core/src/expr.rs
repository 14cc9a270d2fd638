//! A tiny expression language for coefficient and data fields.
//!
//! Grammar: numbers, `pi`, the coordinates `x` and `y`, `+ - * / ^`, unary
//! minus, parentheses, and the functions `sin`, `cos`, `exp`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::spectral::{SpectralField, TorusGrid};

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Func {
    Sin,
    Cos,
    Exp,
}

/// A parsed scalar expression in the coordinates `x` (and `y` in two dimensions).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Expr {
    source: String,
    root: Node,
    max_var: Option<usize>,
}

impl Expr {
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Parser {
            chars: text.chars().collect(),
            pos: 0,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos < p.chars.len() {
            return Err(p.err("unexpected trailing input"));
        }
        let max_var = max_var(&root);
        Ok(Expr {
            source: text.trim().to_string(),
            root,
            max_var,
        })
    }

    pub fn constant(v: f64) -> Self {
        Expr {
            source: format!("{v}"),
            root: Node::Num(v),
            max_var: None,
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Whether the expression is identically the literal zero.
    pub fn is_zero(&self) -> bool {
        self.root == Node::Num(0.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        eval(&self.root, x)
    }

    /// Samples the expression on a grid after checking that it only uses available coordinates.
    pub fn sample(&self, grid: &Arc<TorusGrid>) -> Result<Vec<f64>> {
        if let Some(v) = self.max_var {
            if v >= grid.dim() {
                return Err(Error::Expression {
                    column: 0,
                    message: format!("`{}` uses `y` on a one-dimensional grid", self.source),
                });
            }
        }
        Ok(grid.nodes().iter().map(|x| self.eval(x)).collect())
    }

    pub fn to_field(&self, grid: &Arc<TorusGrid>) -> Result<SpectralField> {
        SpectralField::from_physical(grid, 1, &self.sample(grid)?)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl TryFrom<String> for Expr {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Expr::parse(&s)
    }
}

impl From<Expr> for String {
    fn from(e: Expr) -> String {
        e.source
    }
}

impl FromStr for Expr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Expr::parse(s)
    }
}

fn max_var(n: &Node) -> Option<usize> {
    match n {
        Node::Num(_) => None,
        Node::Var(i) => Some(*i),
        Node::Neg(a) | Node::Call(_, a) => max_var(a),
        Node::Bin(_, a, b) => match (max_var(a), max_var(b)) {
            (Some(p), Some(q)) => Some(p.max(q)),
            (p, q) => p.or(q),
        },
    }
}

fn eval(n: &Node, x: &[f64]) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(i) => x.get(*i).copied().unwrap_or(0.0),
        Node::Neg(a) => -eval(a, x),
        Node::Bin(op, a, b) => {
            let (p, q) = (eval(a, x), eval(b, x));
            match op {
                '+' => p + q,
                '-' => p - q,
                '*' => p * q,
                '/' => p / q,
                _ => p.powf(q),
            }
        }
        Node::Call(f, a) => {
            let v = eval(a, x);
            match f {
                Func::Sin => v.sin(),
                Func::Cos => v.cos(),
                Func::Exp => v.exp(),
            }
        }
    }
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn err(&self, msg: &str) -> Error {
        Error::Expression {
            column: self.pos + 1,
            message: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(c, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(c, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek() {
            Some('-') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.peek() == Some('^') {
            self.pos += 1;
            // right associative, binds tighter than unary minus on the left
            let exp = self.unary()?;
            return Ok(Node::Bin('^', Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            None => Err(self.err("unexpected end of expression")),
            Some('(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == '.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let name: String = self.chars[start..self.pos].iter().collect();
                let func = match name.as_str() {
                    "pi" => return Ok(Node::Num(std::f64::consts::PI)),
                    "x" => return Ok(Node::Var(0)),
                    "y" => return Ok(Node::Var(1)),
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "exp" => Func::Exp,
                    _ => {
                        self.pos = start;
                        return Err(self.err(&format!("unknown identifier `{name}`")));
                    }
                };
                if self.peek() != Some('(') {
                    return Err(self.err(&format!("expected `(` after `{name}`")));
                }
                self.pos += 1;
                let arg = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                Ok(Node::Call(func, Box::new(arg)))
            }
            Some(c) => Err(self.err(&format!("unexpected character `{c}`"))),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        let n = self.chars.len();
        while self.pos < n && (self.chars[self.pos].is_ascii_digit() || self.chars[self.pos] == '.') {
            self.pos += 1;
        }
        if self.pos < n && matches!(self.chars[self.pos], 'e' | 'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < n && matches!(self.chars[self.pos], '+' | '-') {
                self.pos += 1;
            }
            if self.pos < n && self.chars[self.pos].is_ascii_digit() {
                while self.pos < n && self.chars[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse::<f64>().map(Node::Num).map_err(|_| {
            self.pos = start;
            self.err(&format!("bad number `{text}`"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn evaluates_arithmetic() {
        let e = Expr::parse("1 + 2*3 - 4/2").unwrap();
        assert_eq!(e.eval(&[0.0]), 5.0);
        let e = Expr::parse("-2^2").unwrap();
        assert_eq!(e.eval(&[0.0]), -4.0);
        let e = Expr::parse("2^-1").unwrap();
        assert_eq!(e.eval(&[0.0]), 0.5);
        let e = Expr::parse("1.5e-1 * 2").unwrap();
        assert!((e.eval(&[0.0]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn evaluates_functions_of_coordinates() {
        let e = Expr::parse("0.05*sin(2*pi*x) + cos(2*pi*y)").unwrap();
        let v = e.eval(&[0.25, 0.5]);
        assert!((v - (0.05 - 1.0)).abs() < 1e-14);
        let e = Expr::parse("exp(-x)").unwrap();
        assert!((e.eval(&[1.0]) - (-1f64).exp()).abs() < 1e-15);
        assert!((Expr::parse("pi").unwrap().eval(&[]) - PI).abs() == 0.0);
    }

    #[test]
    fn reports_column() {
        match Expr::parse("1 + foo(x)") {
            Err(Error::Expression { column, .. }) => assert_eq!(column, 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Expr::parse("(1 + x").is_err());
        assert!(Expr::parse("1 +").is_err());
        assert!(Expr::parse("1 2").is_err());
    }

    #[test]
    fn rejects_y_in_one_dimension() {
        let g = TorusGrid::new(1, 8, 1.0).unwrap();
        assert!(Expr::parse("y").unwrap().sample(&g).is_err());
        assert!(Expr::parse("x").unwrap().sample(&g).is_ok());
    }
}
