//! Bounded LTL formulas over uncertainty-dependent polyhedral atomic
//! propositions: parsing, positive normal form, and finite-trajectory
//! semantics without loops.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Evaluator signature for callback propositions: maps a stage disturbance
/// `w_k` to the polyhedron `(P(w), rho(w))` with `r` rows.
pub type PropEvaluator = Arc<dyn Fn(&DVector<f64>) -> (DMatrix<f64>, DVector<f64>) + Send + Sync>;

/// How an atomic proposition's polyhedron depends on the disturbance.
#[derive(Clone)]
pub enum PropShape {
    /// `P x <= rho0 + RhoW w`, with a constant row matrix.
    AffineInW {
        p: DMatrix<f64>,
        rho0: DVector<f64>,
        rho_w: DMatrix<f64>,
    },
    /// Arbitrary nonlinear dependence via an evaluator callback.
    Callback(PropEvaluator),
    /// Rectangular obstacle centered at `(w[center[0]], w[center[1]])`,
    /// rotated by `w[angle]`, with side lengths `sides`.
    RotatedBox {
        center: [usize; 2],
        angle: usize,
        sides: [f64; 2],
    },
}

impl fmt::Debug for PropShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropShape::AffineInW { p, .. } => write!(f, "AffineInW(r={})", p.nrows()),
            PropShape::Callback(_) => write!(f, "Callback"),
            PropShape::RotatedBox { sides, .. } => write!(f, "RotatedBox(sides={sides:?})"),
        }
    }
}

/// An atomic proposition `p_i` with polyhedron `P_i(w) x <= rho_i(w)`.
#[derive(Clone, Debug)]
pub struct AtomicProposition {
    pub id: String,
    /// Number of inequality rows `r_i`.
    pub r: usize,
    pub shape: PropShape,
}

fn rotation(angle: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()])
}

impl AtomicProposition {
    pub fn affine(id: &str, p: DMatrix<f64>, rho0: DVector<f64>, rho_w: DMatrix<f64>) -> Self {
        assert_eq!(p.nrows(), rho0.len());
        assert_eq!(p.nrows(), rho_w.nrows());
        AtomicProposition {
            id: id.to_string(),
            r: p.nrows(),
            shape: PropShape::AffineInW { p, rho0, rho_w },
        }
    }

    pub fn rotated_box(id: &str, center: [usize; 2], angle: usize, sides: [f64; 2]) -> Self {
        AtomicProposition {
            id: id.to_string(),
            r: 4,
            shape: PropShape::RotatedBox { center, angle, sides },
        }
    }

    pub fn callback(id: &str, r: usize, eval: PropEvaluator) -> Self {
        AtomicProposition { id: id.to_string(), r, shape: PropShape::Callback(eval) }
    }

    /// Evaluates the polyhedron at a stage disturbance `w_k`.
    pub fn evaluate(&self, w: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        match &self.shape {
            PropShape::AffineInW { p, rho0, rho_w } => (p.clone(), rho0 + rho_w * w),
            PropShape::Callback(f) => {
                let (p, rho) = f(w);
                assert_eq!(p.nrows(), self.r, "callback row count mismatch for `{}`", self.id);
                (p, rho)
            }
            PropShape::RotatedBox { center, angle, sides } => {
                let rot = rotation(w[*angle]);
                let c = DVector::from_column_slice(&[w[center[0]], w[center[1]]]);
                let mut p = DMatrix::zeros(4, 2);
                p.view_mut((0, 0), (2, 2)).copy_from(&rot);
                p.view_mut((2, 0), (2, 2)).copy_from(&(-&rot));
                let half = DVector::from_column_slice(&[
                    sides[0] / 2.0,
                    sides[1] / 2.0,
                    sides[0] / 2.0,
                    sides[1] / 2.0,
                ]);
                let rho = &p * &c + half;
                (p, rho)
            }
        }
    }

    /// True when membership rows depend only on specific state coordinates.
    /// Rotated boxes act on the first two state coordinates; affine and
    /// callback rows carry `n_x` columns already.
    pub fn state_cols(&self, n_x: usize) -> usize {
        match &self.shape {
            PropShape::RotatedBox { .. } => 2.min(n_x),
            PropShape::AffineInW { p, .. } => p.ncols(),
            PropShape::Callback(_) => n_x,
        }
    }
}

/// Bounded LTL syntax tree. `Neg` over non-atoms only survives until
/// [`to_pnf`]; all downstream consumers see the six PNF node kinds plus
/// the constants.
#[derive(Clone, Debug, PartialEq)]
pub enum Formula {
    True,
    False,
    Atom(String),
    NegAtom(String),
    Neg(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Next(Box<Formula>),
    Until(Box<Formula>, Box<Formula>),
    Release(Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn always(f: Formula) -> Formula {
        Formula::Release(Box::new(Formula::False), Box::new(f))
    }

    pub fn eventually(f: Formula) -> Formula {
        Formula::Until(Box::new(Formula::True), Box::new(f))
    }

    /// True when negation appears only directly on atoms.
    pub fn is_pnf(&self) -> bool {
        match self {
            Formula::Neg(_) => false,
            Formula::True | Formula::False | Formula::Atom(_) | Formula::NegAtom(_) => true,
            Formula::And(fs) | Formula::Or(fs) => fs.iter().all(Formula::is_pnf),
            Formula::Next(f) => f.is_pnf(),
            Formula::Until(a, b) | Formula::Release(a, b) => a.is_pnf() && b.is_pnf(),
        }
    }

    /// Atom ids referenced by the formula, sorted and deduplicated.
    pub fn atoms(&self) -> Vec<String> {
        fn walk(f: &Formula, out: &mut Vec<String>) {
            match f {
                Formula::Atom(id) | Formula::NegAtom(id) => out.push(id.clone()),
                Formula::Neg(g) | Formula::Next(g) => walk(g, out),
                Formula::And(fs) | Formula::Or(fs) => fs.iter().for_each(|g| walk(g, out)),
                Formula::Until(a, b) | Formula::Release(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                Formula::True | Formula::False => {}
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out.sort();
        out.dedup();
        out
    }
}

/// Rewrites a formula into positive normal form by pushing negations onto
/// atoms with the dual rewrites (De Morgan and temporal duality).
pub fn to_pnf(f: &Formula) -> Formula {
    fn pos(f: &Formula) -> Formula {
        match f {
            Formula::True => Formula::True,
            Formula::False => Formula::False,
            Formula::Atom(id) => Formula::Atom(id.clone()),
            Formula::NegAtom(id) => Formula::NegAtom(id.clone()),
            Formula::Neg(g) => neg(g),
            Formula::And(fs) => Formula::And(fs.iter().map(pos).collect()),
            Formula::Or(fs) => Formula::Or(fs.iter().map(pos).collect()),
            Formula::Next(g) => Formula::Next(Box::new(pos(g))),
            Formula::Until(a, b) => Formula::Until(Box::new(pos(a)), Box::new(pos(b))),
            Formula::Release(a, b) => Formula::Release(Box::new(pos(a)), Box::new(pos(b))),
        }
    }
    fn neg(f: &Formula) -> Formula {
        match f {
            Formula::True => Formula::False,
            Formula::False => Formula::True,
            Formula::Atom(id) => Formula::NegAtom(id.clone()),
            Formula::NegAtom(id) => Formula::Atom(id.clone()),
            Formula::Neg(g) => pos(g),
            Formula::And(fs) => Formula::Or(fs.iter().map(neg).collect()),
            Formula::Or(fs) => Formula::And(fs.iter().map(neg).collect()),
            Formula::Next(g) => Formula::Next(Box::new(neg(g))),
            Formula::Until(a, b) => Formula::Release(Box::new(neg(a)), Box::new(neg(b))),
            Formula::Release(a, b) => Formula::Until(Box::new(neg(a)), Box::new(neg(b))),
        }
    }
    pos(f)
}

/// A sampled state/disturbance trajectory of length `N+1`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub x: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(x: Vec<DVector<f64>>, w: Vec<DVector<f64>>) -> Result<Self> {
        if x.len() != w.len() || x.is_empty() {
            return Err(Error::Dimension(format!(
                "trajectory lengths differ: {} states vs {} disturbances",
                x.len(),
                w.len()
            )));
        }
        Ok(Trajectory { x, w })
    }

    pub fn horizon(&self) -> usize {
        self.x.len() - 1
    }
}

/// Evaluates a bounded formula over a finite trajectory with no-loop
/// semantics starting at time index `k`. Next at `k = N` evaluates its
/// child as false (strong next). Atom membership is `P(w_k) x_k <=
/// rho(w_k) + tol` elementwise.
///
/// `Neg` over non-atoms is a parsing convenience whose meaning is *defined*
/// by the dual rewrites of [`to_pnf`]; the formula is normalized before
/// evaluation. (Complement semantics would differ for a negated `Next`
/// landing exactly on the horizon, where strong next is not self-dual.)
pub fn eval_bounded(
    f: &Formula,
    traj: &Trajectory,
    props: &BTreeMap<String, AtomicProposition>,
    k: usize,
    tol: f64,
) -> Result<bool> {
    if !f.is_pnf() {
        return eval_bounded(&to_pnf(f), traj, props, k, tol);
    }
    let n = traj.horizon();
    assert!(k <= n, "time index {k} out of range 0..={n}");
    let atom_holds = |id: &str, j: usize| -> Result<bool> {
        let prop = props.get(id).ok_or_else(|| Error::UnknownAtom(id.to_string()))?;
        let (p, rho) = prop.evaluate(&traj.w[j]);
        let xs = traj.x[j].rows(0, p.ncols()).into_owned();
        let lhs = &p * xs;
        Ok((0..p.nrows()).all(|r| lhs[r] <= rho[r] + tol))
    };
    fn rec(
        f: &Formula,
        k: usize,
        n: usize,
        atom: &dyn Fn(&str, usize) -> Result<bool>,
    ) -> Result<bool> {
        Ok(match f {
            Formula::True => true,
            Formula::False => false,
            Formula::Atom(id) => atom(id, k)?,
            Formula::NegAtom(id) => !atom(id, k)?,
            Formula::Neg(g) => !rec(g, k, n, atom)?,
            Formula::And(fs) => {
                for g in fs {
                    if !rec(g, k, n, atom)? {
                        return Ok(false);
                    }
                }
                true
            }
            Formula::Or(fs) => {
                for g in fs {
                    if rec(g, k, n, atom)? {
                        return Ok(true);
                    }
                }
                false
            }
            Formula::Next(g) => {
                if k == n {
                    false
                } else {
                    rec(g, k + 1, n, atom)?
                }
            }
            Formula::Until(a, b) => {
                let mut holds = false;
                for j in k..=n {
                    if rec(b, j, n, atom)? {
                        holds = true;
                        break;
                    }
                    if !rec(a, j, n, atom)? {
                        break;
                    }
                }
                holds
            }
            Formula::Release(a, b) => {
                let mut holds = true;
                for j in k..=n {
                    if !rec(b, j, n, atom)? {
                        holds = false;
                        break;
                    }
                    if rec(a, j, n, atom)? {
                        break;
                    }
                }
                holds
            }
        })
    }
    rec(f, k, n, &atom_holds)
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    True,
    False,
    Not,
    And,
    Or,
    Next,
    Until,
    Release,
    Always,
    Eventually,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(src: &'a str) -> Result<Vec<(Tok, usize)>> {
        let mut lx = Lexer { src: src.as_bytes(), pos: 0 };
        let mut out = Vec::new();
        while lx.pos < lx.src.len() {
            let start = lx.pos;
            let c = lx.src[lx.pos] as char;
            match c {
                ' ' | '\t' | '\n' | '\r' => {
                    lx.pos += 1;
                    continue;
                }
                '!' => {
                    lx.pos += 1;
                    out.push((Tok::Not, start));
                }
                '&' => {
                    lx.pos += 1;
                    out.push((Tok::And, start));
                }
                '|' => {
                    lx.pos += 1;
                    out.push((Tok::Or, start));
                }
                '(' => {
                    lx.pos += 1;
                    out.push((Tok::LParen, start));
                }
                ')' => {
                    lx.pos += 1;
                    out.push((Tok::RParen, start));
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let mut end = lx.pos + 1;
                    while end < lx.src.len() {
                        let d = lx.src[end] as char;
                        if d.is_ascii_alphanumeric() || d == '_' {
                            end += 1;
                        } else {
                            break;
                        }
                    }
                    let word = &src[lx.pos..end];
                    lx.pos = end;
                    let tok = match word {
                        "true" => Tok::True,
                        "false" => Tok::False,
                        "X" => Tok::Next,
                        "U" => Tok::Until,
                        "R" => Tok::Release,
                        "G" => Tok::Always,
                        "F" => Tok::Eventually,
                        _ => Tok::Ident(word.to_string()),
                    };
                    out.push((tok, start));
                }
                _ => {
                    return Err(Error::Syntax {
                        offset: start,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            }
        }
        Ok(out)
    }
}

struct Parser<'a> {
    toks: &'a [(Tok, usize)],
    idx: usize,
    src_len: usize,
    known: &'a dyn Fn(&str) -> bool,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.idx).map(|(_, o)| *o).unwrap_or(self.src_len)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.idx).map(|(t, _)| t.clone());
        self.idx += 1;
        t
    }

    // or-expr := and-expr ('|' and-expr)*
    fn parse_or(&mut self) -> Result<Formula> {
        let mut parts = vec![self.parse_and()?];
        while self.peek() == Some(&Tok::Or) {
            self.bump();
            parts.push(self.parse_and()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Formula::Or(parts) })
    }

    // and-expr := until-expr ('&' until-expr)*
    fn parse_and(&mut self) -> Result<Formula> {
        let mut parts = vec![self.parse_until()?];
        while self.peek() == Some(&Tok::And) {
            self.bump();
            parts.push(self.parse_until()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Formula::And(parts) })
    }

    // until-expr := unary (('U' | 'R') until-expr)?   (right-associative)
    fn parse_until(&mut self) -> Result<Formula> {
        let left = self.parse_unary()?;
        match self.peek() {
            Some(Tok::Until) => {
                self.bump();
                let right = self.parse_until()?;
                Ok(Formula::Until(Box::new(left), Box::new(right)))
            }
            Some(Tok::Release) => {
                self.bump();
                let right = self.parse_until()?;
                Ok(Formula::Release(Box::new(left), Box::new(right)))
            }
            _ => Ok(left),
        }
    }

    fn parse_unary(&mut self) -> Result<Formula> {
        let off = self.offset();
        match self.bump() {
            Some(Tok::Not) => Ok(match self.parse_unary()? {
                // fold negation onto atoms immediately; other negations are
                // kept and normalized by `to_pnf`
                Formula::Atom(id) => Formula::NegAtom(id),
                Formula::NegAtom(id) => Formula::Atom(id),
                g => Formula::Neg(Box::new(g)),
            }),
            Some(Tok::Next) => Ok(Formula::Next(Box::new(self.parse_unary()?))),
            Some(Tok::Always) => Ok(Formula::always(self.parse_unary()?)),
            Some(Tok::Eventually) => Ok(Formula::eventually(self.parse_unary()?)),
            Some(Tok::True) => Ok(Formula::True),
            Some(Tok::False) => Ok(Formula::False),
            Some(Tok::Ident(id)) => {
                if (self.known)(&id) {
                    Ok(Formula::Atom(id))
                } else {
                    Err(Error::UnknownAtom(id))
                }
            }
            Some(Tok::LParen) => {
                let inner = self.parse_or()?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(inner),
                    _ => Err(Error::Syntax { offset: self.offset(), message: "expected `)`".into() }),
                }
            }
            other => Err(Error::Syntax {
                offset: off,
                message: format!("expected a formula, found {other:?}"),
            }),
        }
    }
}

/// Parses a formula. Derived operators `G`/`F` are desugared at parse time,
/// so only the PNF node kinds (plus `Neg`) appear in the result; negation
/// is left in place and removed by [`to_pnf`].
pub fn parse_formula<S: AsRef<str>>(text: &str, known_atoms: &[S]) -> Result<Formula> {
    let toks = Lexer::tokens(text)?;
    let known = |id: &str| known_atoms.iter().any(|a| a.as_ref() == id);
    let mut parser = Parser { toks: &toks, idx: 0, src_len: text.len(), known: &known };
    let f = parser.parse_or()?;
    if parser.idx != toks.len() {
        return Err(Error::Syntax {
            offset: parser.offset(),
            message: "trailing input after formula".into(),
        });
    }
    Ok(f)
}

/// Pretty-prints a formula in the concrete grammar. `Release(false, f)` and
/// `Until(true, f)` print as the `G`/`F` sugar they desugar from.
pub fn pretty(f: &Formula) -> String {
    // precedence: 0 = or, 1 = and, 2 = until/release, 3 = unary/atom
    fn go(f: &Formula, out: &mut String, parent: u8) {
        let prec = match f {
            Formula::Or(_) => 0,
            Formula::And(_) => 1,
            Formula::Until(a, _) if **a != Formula::True => 2,
            Formula::Release(a, _) if **a != Formula::False => 2,
            _ => 3,
        };
        let need = prec < parent;
        if need {
            out.push('(');
        }
        match f {
            Formula::True => out.push_str("true"),
            Formula::False => out.push_str("false"),
            Formula::Atom(id) => out.push_str(id),
            Formula::NegAtom(id) => {
                out.push('!');
                out.push_str(id);
            }
            Formula::Neg(g) => {
                out.push('!');
                go(g, out, 3);
            }
            Formula::And(fs) => {
                for (i, g) in fs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" & ");
                    }
                    go(g, out, 2);
                }
            }
            Formula::Or(fs) => {
                for (i, g) in fs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(" | ");
                    }
                    go(g, out, 1);
                }
            }
            Formula::Next(g) => {
                out.push_str("X ");
                go(g, out, 3);
            }
            Formula::Until(a, b) if **a == Formula::True => {
                out.push_str("F ");
                go(b, out, 3);
            }
            Formula::Release(a, b) if **a == Formula::False => {
                out.push_str("G ");
                go(b, out, 3);
            }
            Formula::Until(a, b) => {
                go(a, out, 3);
                out.push_str(" U ");
                go(b, out, 2);
            }
            Formula::Release(a, b) => {
                go(a, out, 3);
                out.push_str(" R ");
                go(b, out, 2);
            }
        }
        if need {
            out.push(')');
        }
    }
    let mut s = String::new();
    go(f, &mut s, 0);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn atoms() -> Vec<&'static str> {
        vec!["p", "q", "r", "truck", "obs"]
    }

    #[test]
    fn parses_always_negation() {
        let f = parse_formula("G !truck", &atoms()).unwrap();
        assert_eq!(f, Formula::always(Formula::NegAtom("truck".into())));
    }

    #[test]
    fn parses_precedence_case() {
        let f = parse_formula("p U (q & X r)", &atoms()).unwrap();
        assert_eq!(
            f,
            Formula::Until(
                Box::new(Formula::Atom("p".into())),
                Box::new(Formula::And(vec![
                    Formula::Atom("q".into()),
                    Formula::Next(Box::new(Formula::Atom("r".into()))),
                ]))
            )
        );
    }

    #[test]
    fn until_binds_tighter_than_and() {
        let f = parse_formula("p U q & r", &atoms()).unwrap();
        assert_eq!(
            f,
            Formula::And(vec![
                Formula::Until(
                    Box::new(Formula::Atom("p".into())),
                    Box::new(Formula::Atom("q".into()))
                ),
                Formula::Atom("r".into()),
            ])
        );
    }

    #[test]
    fn parser_leaves_negation_unnormalized() {
        let f = parse_formula("!(p & q)", &atoms()).unwrap();
        assert_eq!(
            f,
            Formula::Neg(Box::new(Formula::And(vec![
                Formula::Atom("p".into()),
                Formula::Atom("q".into())
            ])))
        );
    }

    #[test]
    fn syntax_error_reports_offset() {
        let err = parse_formula("p & #", &atoms()).unwrap_err();
        match err {
            Error::Syntax { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_atom_is_rejected() {
        let err = parse_formula("p & zz", &atoms()).unwrap_err();
        assert!(matches!(err, Error::UnknownAtom(id) if id == "zz"));
    }

    #[test]
    fn pnf_de_morgan() {
        let f = parse_formula("!(p & q)", &atoms()).unwrap();
        assert_eq!(
            to_pnf(&f),
            Formula::Or(vec![
                Formula::NegAtom("p".into()),
                Formula::NegAtom("q".into())
            ])
        );
    }

    #[test]
    fn pnf_temporal_duality() {
        let f = parse_formula("!(p U q)", &atoms()).unwrap();
        assert_eq!(
            to_pnf(&f),
            Formula::Release(
                Box::new(Formula::NegAtom("p".into())),
                Box::new(Formula::NegAtom("q".into()))
            )
        );
    }

    #[test]
    fn pnf_of_always_neg_atom() {
        let f = to_pnf(&parse_formula("G !p", &atoms()).unwrap());
        assert_eq!(
            f,
            Formula::Release(
                Box::new(Formula::False),
                Box::new(Formula::NegAtom("p".into()))
            )
        );
        assert!(f.is_pnf());
    }

    fn interval_prop(id: &str, lo: f64, hi: f64) -> AtomicProposition {
        // lo <= x <= hi on a 1-D state, no disturbance dependence
        AtomicProposition::affine(
            id,
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_column_slice(&[hi, -lo]),
            DMatrix::zeros(2, 1),
        )
    }

    fn props_1d() -> BTreeMap<String, AtomicProposition> {
        let mut m = BTreeMap::new();
        for (id, lo, hi) in [("p", 0.0, 1.0), ("q", 0.5, 2.0), ("r", -1.0, 0.25)] {
            m.insert(id.to_string(), interval_prop(id, lo, hi));
        }
        m
    }

    fn traj_1d(xs: &[f64]) -> Trajectory {
        let n = xs.len();
        Trajectory::new(
            xs.iter().map(|&x| DVector::from_column_slice(&[x])).collect(),
            (0..n).map(|_| DVector::zeros(1)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn next_at_horizon_is_false() {
        let f = Formula::Next(Box::new(Formula::Atom("p".into())));
        let traj = traj_1d(&[0.5, 0.5]);
        assert!(!eval_bounded(&f, &traj, &props_1d(), 1, 1e-6).unwrap());
        assert!(eval_bounded(&f, &traj, &props_1d(), 0, 1e-6).unwrap());
    }

    #[test]
    fn always_avoid_holds_when_outside() {
        let f = Formula::always(Formula::NegAtom("p".into()));
        let traj = traj_1d(&[-2.0, -3.0, 5.0]);
        assert!(eval_bounded(&f, &traj, &props_1d(), 0, 1e-6).unwrap());
        let traj2 = traj_1d(&[-2.0, 0.5, 5.0]);
        assert!(!eval_bounded(&f, &traj2, &props_1d(), 0, 1e-6).unwrap());
    }

    /// Brute-force expansion of Until as a disjunction over the witness time.
    fn until_oracle(
        a: &Formula,
        b: &Formula,
        traj: &Trajectory,
        props: &BTreeMap<String, AtomicProposition>,
        k: usize,
    ) -> bool {
        let n = traj.horizon();
        (k..=n).any(|j| {
            eval_bounded(b, traj, props, j, 1e-6).unwrap()
                && (k..j).all(|l| eval_bounded(a, traj, props, l, 1e-6).unwrap())
        })
    }

    #[test]
    fn until_matches_enumeration_oracle() {
        let props = props_1d();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..500 {
            let xs: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..2.5)).collect();
            let traj = traj_1d(&xs);
            let a = Formula::Atom("p".into());
            let b = Formula::Atom("q".into());
            for k in 0..=3 {
                let f = Formula::Until(Box::new(a.clone()), Box::new(b.clone()));
                assert_eq!(
                    eval_bounded(&f, &traj, &props, k, 1e-6).unwrap(),
                    until_oracle(&a, &b, &traj, &props, k)
                );
            }
        }
    }

    fn random_formula(rng: &mut StdRng, depth: usize) -> Formula {
        let ids = ["p", "q", "r"];
        if depth == 0 || rng.gen_bool(0.3) {
            let id = ids[rng.gen_range(0..ids.len())].to_string();
            return if rng.gen_bool(0.5) { Formula::Atom(id) } else { Formula::NegAtom(id) };
        }
        match rng.gen_range(0..7) {
            0 => Formula::Neg(Box::new(random_formula(rng, depth - 1))),
            1 => Formula::And(vec![
                random_formula(rng, depth - 1),
                random_formula(rng, depth - 1),
            ]),
            2 => Formula::Or(vec![
                random_formula(rng, depth - 1),
                random_formula(rng, depth - 1),
            ]),
            3 => Formula::Next(Box::new(random_formula(rng, depth - 1))),
            4 => Formula::Until(
                Box::new(random_formula(rng, depth - 1)),
                Box::new(random_formula(rng, depth - 1)),
            ),
            5 => Formula::Release(
                Box::new(random_formula(rng, depth - 1)),
                Box::new(random_formula(rng, depth - 1)),
            ),
            _ => Formula::Neg(Box::new(Formula::Until(
                Box::new(random_formula(rng, depth - 1)),
                Box::new(random_formula(rng, depth - 1)),
            ))),
        }
    }

    #[test]
    fn pnf_preserves_bounded_semantics() {
        let props = props_1d();
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..10_000 {
            let f = random_formula(&mut rng, 3);
            let g = to_pnf(&f);
            assert!(g.is_pnf());
            let n = rng.gen_range(1..=5);
            let xs: Vec<f64> = (0..=n).map(|_| rng.gen_range(-1.5..2.5)).collect();
            let traj = traj_1d(&xs);
            let k = rng.gen_range(0..=n);
            assert_eq!(
                eval_bounded(&f, &traj, &props, k, 1e-6).unwrap(),
                eval_bounded(&g, &traj, &props, k, 1e-6).unwrap(),
                "formula {f:?}"
            );
        }
    }

    /// Replicates the parser's folding of negation over atoms, which is the
    /// only rewrite the parser applies; round-tripping is exact modulo it.
    fn fold_atom_negs(f: &Formula) -> Formula {
        match f {
            Formula::Neg(g) => match fold_atom_negs(g) {
                Formula::Atom(id) => Formula::NegAtom(id),
                Formula::NegAtom(id) => Formula::Atom(id),
                h => Formula::Neg(Box::new(h)),
            },
            Formula::And(fs) => Formula::And(fs.iter().map(fold_atom_negs).collect()),
            Formula::Or(fs) => Formula::Or(fs.iter().map(fold_atom_negs).collect()),
            Formula::Next(g) => Formula::Next(Box::new(fold_atom_negs(g))),
            Formula::Until(a, b) => Formula::Until(
                Box::new(fold_atom_negs(a)),
                Box::new(fold_atom_negs(b)),
            ),
            Formula::Release(a, b) => Formula::Release(
                Box::new(fold_atom_negs(a)),
                Box::new(fold_atom_negs(b)),
            ),
            other => other.clone(),
        }
    }

    #[test]
    fn pretty_parse_round_trip() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..2_000 {
            let f = random_formula(&mut rng, 3);
            let s = pretty(&f);
            let g = parse_formula(&s, &atoms()).unwrap();
            assert_eq!(fold_atom_negs(&f), g, "printed `{s}`");
        }
        // canonical strings reparse to the same text
        for s in ["G !truck", "p U (q & X r)", "F (p | q)", "p U q & r"] {
            let f = parse_formula(s, &atoms()).unwrap();
            assert_eq!(pretty(&f), s);
        }
    }

    #[test]
    fn rotated_box_at_zero_angle_is_axis_aligned() {
        let sides = [3.0, 1.0];
        let prop = AtomicProposition::rotated_box("obs", [0, 1], 2, sides);
        let w = DVector::from_column_slice(&[2.0, -1.0, 0.0]);
        let (p, rho) = prop.evaluate(&w);
        // axis-aligned equivalent: |x - c| <= b/2
        let p_ref = DMatrix::from_row_slice(4, 2, &[1., 0., 0., 1., -1., 0., 0., -1.]);
        let rho_ref = DVector::from_column_slice(&[2.0 + 1.5, -1.0 + 0.5, -2.0 + 1.5, 1.0 + 0.5]);
        assert!((p - p_ref).abs().max() < 1e-12);
        assert!((rho - rho_ref).abs().max() < 1e-12);
    }

    #[test]
    fn rotated_box_membership() {
        let prop = AtomicProposition::rotated_box("obs", [0, 1], 2, [4.0, 2.0]);
        // box centered at origin rotated 90 degrees: long axis along y
        let w = DVector::from_column_slice(&[0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let (p, rho) = prop.evaluate(&w);
        let inside = DVector::from_column_slice(&[0.5, 1.5]);
        let outside = DVector::from_column_slice(&[1.5, 0.5]);
        let holds = |x: &DVector<f64>| {
            let lhs = &p * x;
            (0..4).all(|r| lhs[r] <= rho[r] + 1e-9)
        };
        assert!(holds(&inside));
        assert!(!holds(&outside));
    }
}
