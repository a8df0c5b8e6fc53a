//! Species, reactions, propensity expressions and the model file parser.
//!
//! Model files are line oriented:
//!
//! ```text
//! # comment
//! species A B deterministic diffscale=0.5
//! species E
//! const k = 0.5 * zeta
//! gamma = 1e-4
//! let a = A / vol
//! reaction prod: 0 -> A : k * E / (1 + a / 30)
//! A + B -> 0 : massaction(0.01, A, B)
//! ```
//!
//! `let` introduces an alias that is expanded in place. Constants may be
//! bound by the caller before parsing (see [`parse_model_with`]).
//!
//! Stoichiometry is stored as `n_r = reactants - products`, and firing `r`
//! in cell `j` maps `x_j` to `x_j - n_r`.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::mesh::Mesh;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown identifier `{name}`")]
    UnknownIdentifier { line: usize, name: String },
    #[error("line {line}: unknown species `{name}`")]
    UnknownSpecies { line: usize, name: String },
    #[error("line {line}: `{name}` is already defined")]
    Duplicate { line: usize, name: String },
    #[error("line {line}: denominator `{expr}` is not provably positive")]
    DenominatorNotPositive { line: usize, expr: String },
    #[error("line {line}: rate `{expr}` is not provably nonnegative")]
    RateNotNonNegative { line: usize, expr: String },
    #[error("line {line}: reaction `{reaction}` changes no species")]
    ZeroStoichiometry { line: usize, reaction: String },
    #[error("reaction `{reaction}` is infeasible in cell {cell}")]
    Infeasible { reaction: String, cell: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SimulationMode {
    Stochastic,
    DeterministicDiffusion,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Species {
    pub name: String,
    pub mode: SimulationMode,
    pub diffusion_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Var {
    Species(usize),
    Const(usize),
    Vol,
    Cx,
    Cy,
    Rho,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Func {
    Heaviside,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
    /// `c·vol`, `c·x`, `(c/vol)·x·y` or `(c/vol)·x(x-1)/2` by reactant list.
    MassAction(Box<Expr>, Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reaction {
    pub name: String,
    /// `(species, coefficient)` as written on the left-hand side.
    pub reactants: Vec<(usize, u32)>,
    pub products: Vec<(usize, u32)>,
    /// `n_r`, indexed by species.
    pub change: Vec<i64>,
    pub propensity: Expr,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReactionModel {
    pub species: Vec<Species>,
    pub reactions: Vec<Reaction>,
    pub constants: Vec<(String, f64)>,
    pub gamma: Option<f64>,
}

/// Geometry a propensity may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellGeometry {
    pub vol: f64,
    pub cx: f64,
    pub cy: f64,
    pub rho: f64,
}

impl CellGeometry {
    pub fn new(vol: f64, cx: f64, cy: f64) -> Self {
        CellGeometry { vol, cx, cy, rho: cx.hypot(cy) }
    }
}

/// Per-cell geometry with `vol = A_jj` and the centroid placed at the
/// vertex that owns the dual cell.
pub fn cell_geometry(mesh: &Mesh, lumped_mass: &[f64]) -> Vec<CellGeometry> {
    mesh.vertices()
        .iter()
        .zip(lumped_mass)
        .map(|(v, &a)| CellGeometry::new(a, v[0], v[1]))
        .collect()
}

impl Expr {
    pub fn eval(&self, x: &[f64], g: &CellGeometry, consts: &[(String, f64)]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(v) => match v {
                Var::Species(i) => x[*i],
                Var::Const(i) => consts[*i].1,
                Var::Vol => g.vol,
                Var::Cx => g.cx,
                Var::Cy => g.cy,
                Var::Rho => g.rho,
            },
            Expr::Neg(e) => -e.eval(x, g, consts),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x, g, consts), b.eval(x, g, consts));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                }
            }
            Expr::Call(f, args) => {
                let a = args[0].eval(x, g, consts);
                match f {
                    Func::Heaviside => {
                        if a >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Func::Min => a.min(args[1].eval(x, g, consts)),
                    Func::Max => a.max(args[1].eval(x, g, consts)),
                }
            }
            Expr::MassAction(c, sp) => {
                let c = c.eval(x, g, consts);
                match sp.as_slice() {
                    [] => c * g.vol,
                    [i] => c * x[*i],
                    [i, j] if i == j => (c / g.vol * x[*i] * (x[*i] - 1.0) / 2.0).max(0.0),
                    [i, j] => c / g.vol * x[*i] * x[*j],
                    _ => unreachable!("massaction arity checked at parse time"),
                }
            }
        }
    }
}

impl ReactionModel {
    pub fn num_species(&self) -> usize {
        self.species.len()
    }

    pub fn num_reactions(&self) -> usize {
        self.reactions.len()
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn constant(&self, name: &str) -> Option<f64> {
        self.constants.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn is_deterministic(&self, i: usize) -> bool {
        self.species[i].mode == SimulationMode::DeterministicDiffusion
    }

    /// Copy of the model with every species in `mode`.
    pub fn with_all_modes(&self, mode: SimulationMode) -> Self {
        let mut m = self.clone();
        for s in &mut m.species {
            s.mode = mode;
        }
        m
    }

    /// Propensity of reaction `r` for cell state `x`. Negative or NaN
    /// results cannot arise from validated expressions on nonnegative
    /// states; they are clamped to zero defensively.
    pub fn propensity(&self, r: usize, x: &[f64], g: &CellGeometry) -> f64 {
        let w = self.reactions[r].propensity.eval(x, g, &self.constants);
        if w > 0.0 {
            w
        } else {
            0.0
        }
    }

    /// Whether firing `r` keeps every count of `x` nonnegative.
    pub fn is_feasible(&self, r: usize, x: &[f64]) -> bool {
        self.reactions[r].change.iter().zip(x).all(|(&n, &v)| v - n as f64 >= 0.0)
    }

    /// Fires reaction `r` in `cell`.
    pub fn apply_reaction(&self, state: &mut SystemState, r: usize, cell: usize) -> Result<()> {
        let x = state.cell_mut(cell);
        if !self.reactions[r].change.iter().zip(x.iter()).all(|(&n, &v)| v - n as f64 >= 0.0) {
            return Err(ModelError::Infeasible { reaction: self.reactions[r].name.clone(), cell });
        }
        for (v, &n) in x.iter_mut().zip(&self.reactions[r].change) {
            *v -= n as f64;
        }
        Ok(())
    }

    /// Model file text that parses back to an identical model.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sp in &self.species {
            let _ = write!(s, "species {}", sp.name);
            if sp.mode == SimulationMode::DeterministicDiffusion {
                s.push_str(" deterministic");
            }
            if sp.diffusion_scale != 1.0 {
                let _ = write!(s, " diffscale={:?}", sp.diffusion_scale);
            }
            s.push('\n');
        }
        for (n, v) in &self.constants {
            let _ = writeln!(s, "const {n} = {}", Printer { e: &Expr::Num(*v), m: self });
        }
        if let Some(g) = self.gamma {
            let _ = writeln!(s, "gamma = {g:?}");
        }
        for r in &self.reactions {
            let side = |terms: &[(usize, u32)]| {
                if terms.is_empty() {
                    return "0".to_string();
                }
                terms
                    .iter()
                    .map(|&(i, c)| {
                        if c == 1 {
                            self.species[i].name.clone()
                        } else {
                            format!("{c} {}", self.species[i].name)
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" + ")
            };
            let _ = writeln!(
                s,
                "reaction {}: {} -> {} : {}",
                r.name,
                side(&r.reactants),
                side(&r.products),
                Printer { e: &r.propensity, m: self }
            );
        }
        s
    }

    pub fn expr_to_string(&self, e: &Expr) -> String {
        Printer { e, m: self }.to_string()
    }
}

struct Printer<'a> {
    e: &'a Expr,
    m: &'a ReactionModel,
}

impl fmt::Display for Printer<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sub = |e| Printer { e, m: self.m };
        match self.e {
            Expr::Num(v) if v.is_sign_negative() => write!(f, "({v:?})"),
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(v) => match v {
                Var::Species(i) => f.write_str(&self.m.species[*i].name),
                Var::Const(i) => f.write_str(&self.m.constants[*i].0),
                Var::Vol => f.write_str("vol"),
                Var::Cx => f.write_str("cx"),
                Var::Cy => f.write_str("cy"),
                Var::Rho => f.write_str("rho"),
            },
            Expr::Neg(e) => write!(f, "(-{})", sub(e)),
            Expr::Bin(op, a, b) => {
                let op = match op {
                    BinOp::Add => "+",
                    BinOp::Sub => "-",
                    BinOp::Mul => "*",
                    BinOp::Div => "/",
                    BinOp::Pow => "^",
                };
                write!(f, "({} {op} {})", sub(a), sub(b))
            }
            Expr::Call(func, args) => {
                let name = match func {
                    Func::Heaviside => "heaviside",
                    Func::Min => "min",
                    Func::Max => "max",
                };
                write!(f, "{name}(")?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{}", sub(a))?;
                }
                f.write_str(")")
            }
            Expr::MassAction(c, sp) => {
                write!(f, "massaction({}", sub(c))?;
                for &i in sp {
                    write!(f, ", {}", self.m.species[i].name)?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Copy numbers (or real amounts for deterministic species) for every
/// species in every cell, stored cell-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemState {
    n_species: usize,
    n_cells: usize,
    values: Vec<f64>,
    pub t: f64,
}

impl SystemState {
    pub fn zeros(n_species: usize, n_cells: usize) -> Self {
        SystemState { n_species, n_cells, values: vec![0.0; n_species * n_cells], t: 0.0 }
    }

    /// Builds a state from per-species rows `rows[i][j]`.
    pub fn from_species_rows(rows: &[Vec<f64>]) -> Self {
        let n_cells = rows.first().map_or(0, Vec::len);
        let mut s = Self::zeros(rows.len(), n_cells);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n_cells, "ragged species rows");
            for (j, &v) in row.iter().enumerate() {
                s.set(j, i, v);
            }
        }
        s
    }

    pub fn num_species(&self) -> usize {
        self.n_species
    }

    pub fn num_cells(&self) -> usize {
        self.n_cells
    }

    pub fn get(&self, cell: usize, species: usize) -> f64 {
        self.values[cell * self.n_species + species]
    }

    pub fn set(&mut self, cell: usize, species: usize, v: f64) {
        self.values[cell * self.n_species + species] = v;
    }

    pub fn add(&mut self, cell: usize, species: usize, dv: f64) {
        self.values[cell * self.n_species + species] += dv;
    }

    pub fn cell(&self, j: usize) -> &[f64] {
        &self.values[j * self.n_species..(j + 1) * self.n_species]
    }

    pub fn cell_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.n_species..(j + 1) * self.n_species]
    }

    pub fn species_row(&self, i: usize) -> Vec<f64> {
        (0..self.n_cells).map(|j| self.get(j, i)).collect()
    }

    pub fn set_species_row(&mut self, i: usize, row: &[f64]) {
        assert_eq!(row.len(), self.n_cells);
        for (j, &v) in row.iter().enumerate() {
            self.set(j, i, v);
        }
    }

    pub fn totals(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.n_species];
        for j in 0..self.n_cells {
            for (ti, v) in t.iter_mut().zip(self.cell(j)) {
                *ti += v;
            }
        }
        t
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Checks shape and per-mode value constraints against `model`.
    pub fn validate(&self, model: &ReactionModel) -> Result<()> {
        if self.n_species != model.num_species() {
            return Err(ModelError::InvalidState(format!(
                "state has {} species, model has {}",
                self.n_species,
                model.num_species()
            )));
        }
        for j in 0..self.n_cells {
            for (i, &v) in self.cell(j).iter().enumerate() {
                let ok = match model.species[i].mode {
                    SimulationMode::Stochastic => v >= 0.0 && v.fract() == 0.0,
                    SimulationMode::DeterministicDiffusion => v >= 0.0 && v.is_finite(),
                };
                if !ok {
                    return Err(ModelError::InvalidState(format!(
                        "species {} in cell {j} has invalid value {v}",
                        model.species[i].name
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_model(text: &str) -> Result<ReactionModel> {
    parse_model_with(text, &[])
}

/// Parses `text` with constants in `bindings` predeclared.
pub fn parse_model_with(text: &str, bindings: &[(&str, f64)]) -> Result<ReactionModel> {
    let mut p = ModelParser::default();
    for &(n, v) in bindings {
        p.declare(0, n)?;
        p.model.constants.push((n.to_string(), v));
    }
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let l = raw.split('#').next().unwrap_or("").trim();
        if l.is_empty() {
            continue;
        }
        let first = l.split_whitespace().next().unwrap_or("");
        match first {
            "species" => p.species_line(line, &l["species".len()..])?,
            "const" => p.const_line(line, &l["const".len()..])?,
            "let" => p.let_line(line, &l["let".len()..])?,
            "reaction" => {
                let rest = &l["reaction".len()..];
                let colon = rest.find(':').ok_or_else(|| syntax(line, "expected `reaction NAME: ...`"))?;
                let name = rest[..colon].trim();
                if !is_ident(name) {
                    return Err(syntax(line, format!("bad reaction name `{name}`")));
                }
                p.reaction_line(line, Some(name), &rest[colon + 1..])?;
            }
            _ if l.starts_with("gamma") && l["gamma".len()..].trim_start().starts_with('=') => {
                let v = l.split_once('=').unwrap().1.trim();
                let g: f64 = v.parse().map_err(|_| syntax(line, format!("bad gamma `{v}`")))?;
                if !(g > 0.0) || !g.is_finite() {
                    return Err(syntax(line, "gamma must be positive"));
                }
                p.model.gamma = Some(g);
            }
            _ if l.contains("->") => p.reaction_line(line, None, l)?,
            _ => return Err(syntax(line, format!("unrecognized line `{l}`"))),
        }
    }
    Ok(p.model)
}

fn syntax(line: usize, msg: impl Into<String>) -> ModelError {
    ModelError::Syntax { line, msg: msg.into() }
}

fn is_ident(s: &str) -> bool {
    let mut c = s.chars();
    matches!(c.next(), Some(ch) if ch.is_ascii_alphabetic() || ch == '_')
        && c.all(|ch| ch.is_ascii_alphanumeric() || ch == '_')
}

const RESERVED: &[&str] = &[
    "vol", "cx", "cy", "rho", "heaviside", "min", "max", "massaction", "species", "const", "reaction", "gamma",
    "let", "deterministic", "stochastic",
];

#[derive(Default)]
struct ModelParser {
    model: ReactionModel,
    aliases: HashMap<String, Expr>,
}

impl Default for ReactionModel {
    fn default() -> Self {
        ReactionModel { species: Vec::new(), reactions: Vec::new(), constants: Vec::new(), gamma: None }
    }
}

impl ModelParser {
    fn declare(&self, line: usize, name: &str) -> Result<()> {
        if !is_ident(name) || RESERVED.contains(&name) {
            return Err(syntax(line, format!("`{name}` is not a valid name")));
        }
        let taken = self.model.species.iter().any(|s| s.name == name)
            || self.model.constants.iter().any(|(n, _)| n == name)
            || self.aliases.contains_key(name);
        if taken {
            return Err(ModelError::Duplicate { line, name: name.to_string() });
        }
        Ok(())
    }

    fn species_line(&mut self, line: usize, rest: &str) -> Result<()> {
        let mut names = Vec::new();
        let mut mode = SimulationMode::Stochastic;
        let mut scale = 1.0;
        for tok in rest.split_whitespace() {
            if tok == "deterministic" {
                mode = SimulationMode::DeterministicDiffusion;
            } else if tok == "stochastic" {
                mode = SimulationMode::Stochastic;
            } else if let Some(v) = tok.strip_prefix("diffscale=") {
                scale = v.parse().map_err(|_| syntax(line, format!("bad diffscale `{v}`")))?;
                if !(scale >= 0.0) || !f64::is_finite(scale) {
                    return Err(syntax(line, "diffscale must be a nonnegative number"));
                }
            } else {
                self.declare(line, tok)?;
                if names.contains(&tok) {
                    return Err(ModelError::Duplicate { line, name: tok.to_string() });
                }
                names.push(tok);
            }
        }
        if names.is_empty() {
            return Err(syntax(line, "species declaration without a name"));
        }
        for n in names {
            self.model.species.push(Species { name: n.to_string(), mode, diffusion_scale: scale });
        }
        Ok(())
    }

    fn const_line(&mut self, line: usize, rest: &str) -> Result<()> {
        let (name, expr) = rest.split_once('=').ok_or_else(|| syntax(line, "expected `const NAME = VALUE`"))?;
        let name = name.trim();
        self.declare(line, name)?;
        let e = self.expr(line, expr)?;
        let value = analyze(&e, line, &self.model)?
            .value
            .ok_or_else(|| syntax(line, "constant must be a number or an expression of constants"))?;
        if !value.is_finite() {
            return Err(syntax(line, "constant is not finite"));
        }
        self.model.constants.push((name.to_string(), value));
        Ok(())
    }

    fn let_line(&mut self, line: usize, rest: &str) -> Result<()> {
        let (name, expr) = rest.split_once('=').ok_or_else(|| syntax(line, "expected `let NAME = EXPR`"))?;
        let name = name.trim();
        self.declare(line, name)?;
        let e = self.expr(line, expr)?;
        analyze(&e, line, &self.model)?;
        self.aliases.insert(name.to_string(), e);
        Ok(())
    }

    fn reaction_line(&mut self, line: usize, name: Option<&str>, rest: &str) -> Result<()> {
        let (lhs, tail) = rest.split_once("->").ok_or_else(|| syntax(line, "expected `->`"))?;
        let (rhs, rate) = tail.split_once(':').ok_or_else(|| syntax(line, "expected `: RATE` after products"))?;
        let name = match name {
            Some(n) => n.to_string(),
            None => format!("R{}", self.model.reactions.len() + 1),
        };
        if self.model.reactions.iter().any(|r| r.name == name) {
            return Err(ModelError::Duplicate { line, name });
        }
        let reactants = self.side(line, lhs)?;
        let products = self.side(line, rhs)?;
        let mut change = vec![0i64; self.model.species.len()];
        for &(i, c) in &reactants {
            change[i] += c as i64;
        }
        for &(i, c) in &products {
            change[i] -= c as i64;
        }
        if change.iter().all(|&c| c == 0) {
            return Err(ModelError::ZeroStoichiometry { line, reaction: name });
        }
        let propensity = self.expr(line, rate)?;
        let sign = analyze(&propensity, line, &self.model)?;
        if !sign.sign.nonneg() {
            return Err(ModelError::RateNotNonNegative { line, expr: self.model.expr_to_string(&propensity) });
        }
        self.model.reactions.push(Reaction { name, reactants, products, change, propensity });
        Ok(())
    }

    fn side(&self, line: usize, text: &str) -> Result<Vec<(usize, u32)>> {
        let text = text.trim();
        if text.is_empty() || text == "0" {
            return Ok(Vec::new());
        }
        let mut out: Vec<(usize, u32)> = Vec::new();
        for term in text.split('+') {
            let term = term.trim();
            let digits = term.len() - term.trim_start_matches(|c: char| c.is_ascii_digit()).len();
            let (coef, name) = term.split_at(digits);
            let name = name.trim();
            let coef: u32 = if coef.is_empty() {
                1
            } else {
                coef.parse().map_err(|_| syntax(line, format!("bad coefficient in `{term}`")))?
            };
            if coef == 0 || !is_ident(name) {
                return Err(syntax(line, format!("bad reaction term `{term}`")));
            }
            let i = self
                .model
                .species_index(name)
                .ok_or_else(|| ModelError::UnknownSpecies { line, name: name.to_string() })?;
            match out.iter_mut().find(|(s, _)| *s == i) {
                Some((_, c)) => *c += coef,
                None => out.push((i, coef)),
            }
        }
        Ok(out)
    }

    fn expr(&self, line: usize, text: &str) -> Result<Expr> {
        let tokens = lex(line, text)?;
        let mut ep = ExprParser { tokens, pos: 0, line, owner: self };
        let e = ep.sum()?;
        if ep.pos != ep.tokens.len() {
            return Err(syntax(line, format!("unexpected `{}` in expression", ep.tokens[ep.pos])));
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Sym(char),
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Num(v) => write!(f, "{v}"),
            Tok::Ident(s) => f.write_str(s),
            Tok::Sym(c) => write!(f, "{c}"),
        }
    }
}

fn lex(line: usize, text: &str) -> Result<Vec<Tok>> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_digit() || b[i] == b'.') {
                i += 1;
            }
            if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
                let mut k = i + 1;
                if k < b.len() && (b[k] == b'+' || b[k] == b'-') {
                    k += 1;
                }
                if k < b.len() && b[k].is_ascii_digit() {
                    i = k;
                    while i < b.len() && b[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s = &text[start..i];
            out.push(Tok::Num(s.parse().map_err(|_| syntax(line, format!("bad number `{s}`")))?));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < b.len() && ((b[i] as char).is_ascii_alphanumeric() || b[i] == b'_') {
                i += 1;
            }
            out.push(Tok::Ident(text[start..i].to_string()));
        } else if "+-*/^(),".contains(c) {
            out.push(Tok::Sym(c));
            i += 1;
        } else {
            return Err(syntax(line, format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

struct ExprParser<'a> {
    tokens: Vec<Tok>,
    pos: usize,
    line: usize,
    owner: &'a ModelParser,
}

impl ExprParser<'_> {
    fn peek_sym(&self, c: char) -> bool {
        matches!(self.tokens.get(self.pos), Some(Tok::Sym(s)) if *s == c)
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.peek_sym(c) {
            self.pos += 1;
            Ok(())
        } else {
            let found = self.tokens.get(self.pos).map_or("end of line".to_string(), |t| format!("`{t}`"));
            Err(syntax(self.line, format!("expected `{c}`, found {found}")))
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut e = self.product()?;
        loop {
            let op = if self.peek_sym('+') {
                BinOp::Add
            } else if self.peek_sym('-') {
                BinOp::Sub
            } else {
                return Ok(e);
            };
            self.pos += 1;
            e = Expr::Bin(op, Box::new(e), Box::new(self.product()?));
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut e = self.unary()?;
        loop {
            let op = if self.peek_sym('*') {
                BinOp::Mul
            } else if self.peek_sym('/') {
                BinOp::Div
            } else {
                return Ok(e);
            };
            self.pos += 1;
            e = Expr::Bin(op, Box::new(e), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.peek_sym('-') {
            self.pos += 1;
            return Ok(match self.unary()? {
                Expr::Num(v) => Expr::Num(-v),
                e => Expr::Neg(Box::new(e)),
            });
        }
        let base = self.primary()?;
        if self.peek_sym('^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr> {
        let line = self.line;
        match self.tokens.get(self.pos).cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::Sym('(')) => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(')')?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.peek_sym('(') {
                    self.pos += 1;
                    return self.call(&name);
                }
                let m = &self.owner.model;
                Ok(match name.as_str() {
                    "vol" => Expr::Var(Var::Vol),
                    "cx" => Expr::Var(Var::Cx),
                    "cy" => Expr::Var(Var::Cy),
                    "rho" => Expr::Var(Var::Rho),
                    _ => {
                        if let Some(i) = m.species_index(&name) {
                            Expr::Var(Var::Species(i))
                        } else if let Some(i) = m.constants.iter().position(|(n, _)| *n == name) {
                            Expr::Var(Var::Const(i))
                        } else if let Some(e) = self.owner.aliases.get(&name) {
                            e.clone()
                        } else {
                            return Err(ModelError::UnknownIdentifier { line, name });
                        }
                    }
                })
            }
            Some(t) => Err(syntax(line, format!("unexpected `{t}` in expression"))),
            None => Err(syntax(line, "unexpected end of expression")),
        }
    }

    fn call(&mut self, name: &str) -> Result<Expr> {
        let line = self.line;
        if name == "massaction" {
            let c = self.sum()?;
            let mut species = Vec::new();
            while self.peek_sym(',') {
                self.pos += 1;
                match self.tokens.get(self.pos).cloned() {
                    Some(Tok::Ident(s)) => {
                        self.pos += 1;
                        let i = self
                            .owner
                            .model
                            .species_index(&s)
                            .ok_or(ModelError::UnknownSpecies { line, name: s })?;
                        species.push(i);
                    }
                    _ => return Err(syntax(line, "massaction reactants must be species names")),
                }
            }
            self.expect(')')?;
            if species.len() > 2 {
                return Err(syntax(line, "massaction supports at most two reactants"));
            }
            return Ok(Expr::MassAction(Box::new(c), species));
        }
        let (func, arity) = match name {
            "heaviside" => (Func::Heaviside, 1),
            "min" => (Func::Min, 2),
            "max" => (Func::Max, 2),
            _ => return Err(ModelError::UnknownIdentifier { line, name: name.to_string() }),
        };
        let mut args = vec![self.sum()?];
        while self.peek_sym(',') {
            self.pos += 1;
            args.push(self.sum()?);
        }
        self.expect(')')?;
        if args.len() != arity {
            return Err(syntax(line, format!("{name} takes {arity} argument(s), got {}", args.len())));
        }
        Ok(Expr::Call(func, args))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sign {
    Positive,
    NonNeg,
    Unknown,
}

impl Sign {
    fn of(v: f64) -> Sign {
        if v > 0.0 {
            Sign::Positive
        } else if v >= 0.0 {
            Sign::NonNeg
        } else {
            Sign::Unknown
        }
    }

    fn nonneg(self) -> bool {
        self != Sign::Unknown
    }
}

#[derive(Debug, Clone, Copy)]
struct Facts {
    sign: Sign,
    /// Folded value when the expression depends on constants only.
    value: Option<f64>,
}

impl Facts {
    fn constant(v: f64) -> Self {
        Facts { sign: Sign::of(v), value: Some(v) }
    }

    fn sign(sign: Sign) -> Self {
        Facts { sign, value: None }
    }
}

/// Conservative sign analysis over nonnegative species counts, rejecting
/// denominators that are not provably positive.
fn analyze(e: &Expr, line: usize, m: &ReactionModel) -> Result<Facts> {
    use Sign::*;
    Ok(match e {
        Expr::Num(v) => Facts::constant(*v),
        Expr::Var(v) => match v {
            Var::Const(i) => Facts::constant(m.constants[*i].1),
            Var::Species(_) | Var::Rho => Facts::sign(NonNeg),
            Var::Vol => Facts::sign(Positive),
            Var::Cx | Var::Cy => Facts::sign(Unknown),
        },
        Expr::Neg(a) => match analyze(a, line, m)?.value {
            Some(v) => Facts::constant(-v),
            None => Facts::sign(Unknown),
        },
        Expr::Bin(op, a, b) => {
            let (fa, fb) = (analyze(a, line, m)?, analyze(b, line, m)?);
            if *op == BinOp::Div && fb.sign != Positive {
                return Err(ModelError::DenominatorNotPositive { line, expr: m.expr_to_string(b) });
            }
            if let (Some(x), Some(y)) = (fa.value, fb.value) {
                let v = match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Pow => x.powf(y),
                };
                return Ok(Facts::constant(v));
            }
            let sign = match op {
                BinOp::Add => add_sign(fa.sign, fb.sign),
                BinOp::Sub => match fb.value {
                    Some(y) => add_sign(fa.sign, Sign::of(-y)),
                    None => Unknown,
                },
                BinOp::Mul => mul_sign(fa.sign, fb.sign),
                BinOp::Div => fa.sign,
                BinOp::Pow => match (fa.sign, fb.value) {
                    (Positive, _) => Positive,
                    (NonNeg, _) => NonNeg,
                    (Unknown, Some(y)) if y.fract() == 0.0 && (y / 2.0).fract() == 0.0 => NonNeg,
                    _ => Unknown,
                },
            };
            Facts::sign(sign)
        }
        Expr::Call(f, args) => {
            let facts = args.iter().map(|a| analyze(a, line, m)).collect::<Result<Vec<_>>>()?;
            let values: Option<Vec<f64>> = facts.iter().map(|f| f.value).collect();
            if let Some(v) = values {
                return Ok(Facts::constant(match f {
                    Func::Heaviside => {
                        if v[0] >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Func::Min => v[0].min(v[1]),
                    Func::Max => v[0].max(v[1]),
                }));
            }
            let (a, b) = (facts[0].sign, facts.get(1).map_or(Unknown, |f| f.sign));
            Facts::sign(match f {
                Func::Heaviside => NonNeg,
                Func::Min => match (a, b) {
                    (Positive, Positive) => Positive,
                    (x, y) if x.nonneg() && y.nonneg() => NonNeg,
                    _ => Unknown,
                },
                Func::Max => {
                    if a == Positive || b == Positive {
                        Positive
                    } else if a.nonneg() || b.nonneg() {
                        NonNeg
                    } else {
                        Unknown
                    }
                }
            })
        }
        Expr::MassAction(c, _) => {
            if !analyze(c, line, m)?.sign.nonneg() {
                return Err(ModelError::RateNotNonNegative { line, expr: m.expr_to_string(c) });
            }
            Facts::sign(NonNeg)
        }
    })
}

fn add_sign(a: Sign, b: Sign) -> Sign {
    use Sign::*;
    match (a, b) {
        (Positive, x) | (x, Positive) if x.nonneg() => Positive,
        (NonNeg, NonNeg) => NonNeg,
        _ => Unknown,
    }
}

fn mul_sign(a: Sign, b: Sign) -> Sign {
    use Sign::*;
    match (a, b) {
        (Positive, Positive) => Positive,
        (x, y) if x.nonneg() && y.nonneg() => NonNeg,
        _ => Unknown,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(vol: f64) -> CellGeometry {
        CellGeometry::new(vol, 0.0, 0.0)
    }

    #[test]
    fn bimolecular_massaction() {
        let m = parse_model("species A B\nA + B -> 0 : massaction(0.0005*zeta^2, A, B)").unwrap_err();
        assert_eq!(m, ModelError::UnknownIdentifier { line: 2, name: "zeta".into() });

        let m = parse_model_with("species A B\nA + B -> 0 : massaction(0.0005*zeta^2, A, B)", &[("zeta", 2.0)])
            .unwrap();
        assert_eq!(m.reactions[0].change, vec![1, 1]);
        let w = m.propensity(0, &[3.0, 5.0], &g(4.0));
        assert!((w - 0.002 / 4.0 * 15.0).abs() < 1e-15);
    }

    #[test]
    fn massaction_examples() {
        let m = parse_model("species A B\nA + B -> 0 : massaction(2, A, B)\n2 A -> B : massaction(1, A, A)\n0 -> A : massaction(3)")
            .unwrap();
        assert_eq!(m.propensity(0, &[3.0, 5.0], &g(4.0)), 7.5);
        assert_eq!(m.propensity(0, &[0.0, 5.0], &g(4.0)), 0.0);
        assert_eq!(m.propensity(0, &[3.0, 5.0], &g(8.0)), 3.75);
        assert_eq!(m.propensity(1, &[4.0, 0.0], &g(2.0)), 3.0);
        assert_eq!(m.propensity(1, &[1.0, 0.0], &g(2.0)), 0.0);
        assert_eq!(m.propensity(2, &[0.0, 0.0], &g(2.0)), 6.0);
        assert_eq!(m.reactions[1].change, vec![2, -1]);
    }

    #[test]
    fn localized_creation() {
        let text = "species A deterministic\nspecies EA\nconst kEA = 0.5\nconst kR = 30\nlet a = A/vol\n\
                    reaction prodEA: 0 -> EA : heaviside(0.2 - rho) * kEA / (1 + a/kR)";
        let m = parse_model(text).unwrap();
        assert_eq!(m.reactions[0].change, vec![0, -1]);
        let inside = CellGeometry::new(2.0, 0.1, 0.0);
        let outside = CellGeometry::new(2.0, 0.3, 0.0);
        assert!((m.propensity(0, &[60.0, 0.0], &inside) - 0.5 / 2.0).abs() < 1e-15);
        assert_eq!(m.propensity(0, &[60.0, 0.0], &outside), 0.0);
        // Gate is closed exactly at the threshold from the other side only.
        assert_eq!(m.propensity(0, &[0.0, 0.0], &CellGeometry::new(1.0, 0.2, 0.0)), 0.5);
    }

    #[test]
    fn rejects_unprovable_denominator() {
        let e = parse_model("species A\nA -> : 1/(A - 3)").unwrap_err();
        assert!(matches!(e, ModelError::DenominatorNotPositive { line: 2, .. }), "{e}");
        assert!(parse_model("species A\nA -> : 1/(A + 3)").is_ok());
        assert!(parse_model("species A\nA -> : 1/A").is_err());
        assert!(matches!(
            parse_model("species A\nA -> : cx * A").unwrap_err(),
            ModelError::RateNotNonNegative { .. }
        ));
        assert!(parse_model("species A\nA -> : (cx - 1)^2 * A").is_ok());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_model("species A\nB -> 0 : 1").unwrap_err(), ModelError::UnknownSpecies { .. }));
        assert!(matches!(parse_model("species A\nA -> A : 1").unwrap_err(), ModelError::ZeroStoichiometry { .. }));
        assert!(matches!(parse_model("species A A").unwrap_err(), ModelError::Duplicate { .. }));
        assert!(matches!(parse_model("species A\nA -> 0 : 1 +").unwrap_err(), ModelError::Syntax { .. }));
        assert!(matches!(parse_model("species A\nA -> 0 : foo(A)").unwrap_err(), ModelError::UnknownIdentifier { .. }));
        assert!(matches!(parse_model("species vol").unwrap_err(), ModelError::Syntax { .. }));
        assert!(matches!(parse_model("species A\nconst c = A").unwrap_err(), ModelError::Syntax { .. }));
        assert!(matches!(parse_model("species A\nA -> 0").unwrap_err(), ModelError::Syntax { .. }));
        assert!(matches!(parse_model("hello").unwrap_err(), ModelError::Syntax { line: 1, .. }));
    }

    #[test]
    fn species_options_and_gamma() {
        let m = parse_model("species A B deterministic diffscale=0.5\nspecies C\ngamma = 1e-3\nconst k = 2*3").unwrap();
        assert!(m.is_deterministic(0) && m.is_deterministic(1) && !m.is_deterministic(2));
        assert_eq!(m.species[1].diffusion_scale, 0.5);
        assert_eq!(m.gamma, Some(1e-3));
        assert_eq!(m.constant("k"), Some(6.0));
    }

    #[test]
    fn apply_reaction_updates() {
        let m = parse_model("species A B C\nA + B -> C : massaction(1, A, B)\n0 -> A : 1\nA -> 0 : A").unwrap();
        let mut s = SystemState::zeros(3, 3);
        s.set(2, 0, 1.0);
        s.set(2, 1, 1.0);
        m.apply_reaction(&mut s, 0, 2).unwrap();
        assert_eq!(s.cell(2), &[0.0, 0.0, 1.0]);
        assert_eq!(s.cell(0), &[0.0, 0.0, 0.0]);
        m.apply_reaction(&mut s, 1, 2).unwrap();
        assert_eq!(s.get(2, 0), 1.0);
        let mut z = SystemState::zeros(3, 1);
        assert!(matches!(m.apply_reaction(&mut z, 2, 0), Err(ModelError::Infeasible { .. })));
        assert!(!m.is_feasible(2, z.cell(0)));
    }

    #[test]
    fn state_validation() {
        let m = parse_model("species A\nspecies B deterministic").unwrap();
        let mut s = SystemState::from_species_rows(&[vec![1.0, 2.0], vec![0.5, 0.25]]);
        assert!(s.validate(&m).is_ok());
        assert_eq!(s.totals(), vec![3.0, 0.75]);
        s.set(0, 0, 0.5);
        assert!(s.validate(&m).is_err());
        assert!(SystemState::zeros(3, 2).validate(&m).is_err());
    }

    #[test]
    fn round_trip_of_handwritten_model() {
        let text = "species A B deterministic\nspecies E diffscale=0\nconst k = -2.5\ngamma = 0.001\n\
                    let a = A/vol\nreaction r1: 2 A + B -> E : massaction(1e-5, A, B) * heaviside(k + cx) \n\
                    0 -> A : max(a, 0.1) + min(E, 1) ^ 2 + -(3) * k";
        let m = parse_model(text).unwrap();
        let again = parse_model(&m.to_text()).unwrap();
        assert_eq!(m, again);
    }

    fn leaf(n_species: usize) -> impl Strategy<Value = String> {
        prop_oneof![
            (0..n_species).prop_map(|i| format!("S{i}")),
            (0.0f64..1e3).prop_map(|v| format!("{v:?}")),
            Just("vol".to_string()),
            Just("rho".to_string()),
            Just("k0".to_string()),
        ]
    }

    fn rate(n_species: usize) -> impl Strategy<Value = String> {
        leaf(n_species).prop_recursive(4, 24, 2, move |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("({a} + {b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a} * {b}")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("{a} / (1 + {b})")),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| format!("min({a}, {b})")),
                (inner.clone(), 0..3u32).prop_map(|(a, p)| format!("({a})^{p}")),
                (-1.0f64..1.0).prop_map(|c| format!("heaviside({c:?} - cx)")),
                (inner.clone(), 0..n_species).prop_map(|(a, i)| format!("massaction({a}, S{i})")),
                (inner, 0..n_species, 0..n_species).prop_map(|(a, i, j)| format!("massaction({a}, S{i}, S{j})")),
            ]
        })
    }

    fn model_text() -> impl Strategy<Value = String> {
        (1usize..4).prop_flat_map(|n| {
            let reaction = (
                proptest::collection::vec((0..n, 1u32..3), 0..3),
                proptest::collection::vec((0..n, 1u32..3), 0..3),
                rate(n),
            );
            (Just(n), proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(reaction, 1..4))
        })
        .prop_map(|(n, det, reactions)| {
            let mut s = String::new();
            for i in 0..n {
                s += &format!("species S{i}{}\n", if det[i] { " deterministic" } else { "" });
            }
            s += "const k0 = 0.125\n";
            let side = |t: &[(usize, u32)]| {
                if t.is_empty() {
                    "0".to_string()
                } else {
                    t.iter().map(|(i, c)| format!("{c} S{i}")).collect::<Vec<_>>().join(" + ")
                }
            };
            for (lhs, rhs, r) in reactions {
                s += &format!("{} -> {} : {r}\n", side(&lhs), side(&rhs));
            }
            s
        })
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(text in model_text()) {
            match parse_model(&text) {
                Ok(m) => {
                    let again = parse_model(&m.to_text()).unwrap();
                    prop_assert_eq!(&m, &again);
                    let third = parse_model(&again.to_text()).unwrap();
                    prop_assert_eq!(m, third);
                }
                // Random sides can cancel to a zero net change.
                Err(ModelError::ZeroStoichiometry { .. }) => {}
                Err(e) => prop_assert!(false, "{e}\n{text}"),
            }
        }

        #[test]
        fn massaction_rates_vanish_without_reactants(a in 0u32..50, b in 0u32..50, vol in 0.1f64..10.0, c in 0.0f64..5.0) {
            let m = parse_model(&format!("species A B\nA + B -> 0 : massaction({c:?}, A, B)\nA -> 0 : massaction({c:?}, A)\n2 A -> 0 : massaction({c:?}, A, A)")).unwrap();
            let x = [a as f64, b as f64];
            let geo = CellGeometry::new(vol, 0.3, 0.4);
            for r in 0..3 {
                let w = m.propensity(r, &x, &geo);
                prop_assert!(w.is_finite() && w >= 0.0);
                if a == 0 || (r == 0 && b == 0) || (r == 2 && a < 2) {
                    prop_assert_eq!(w, 0.0);
                }
            }
            let doubled = m.propensity(0, &x, &CellGeometry::new(2.0 * vol, 0.3, 0.4));
            prop_assert!((2.0 * doubled - m.propensity(0, &x, &geo)).abs() <= 1e-12 * (1.0 + doubled));
        }

        #[test]
        fn rates_are_nonnegative_on_nonnegative_states(text in model_text(), xs in proptest::collection::vec(0.0f64..100.0, 3), vol in 0.01f64..10.0, cx in -1.0f64..1.0) {
            if let Ok(m) = parse_model(&text) {
                let x = &xs[..m.num_species()];
                let geo = CellGeometry::new(vol, cx, 0.0);
                for r in 0..m.num_reactions() {
                    let raw = m.reactions[r].propensity.eval(x, &geo, &m.constants);
                    prop_assert!(raw >= 0.0 || raw.is_nan(), "{raw} for {}", m.expr_to_string(&m.reactions[r].propensity));
                }
            }
        }
    }
}
