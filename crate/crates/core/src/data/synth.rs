//! Synthetic handwritten-style expressions: a small LaTeX grammar, a parser
//! for the token streams it emits, and a stroke renderer.
//!
//! Glyphs are polylines in a unit box drawn at 16 px. Every sample gets its
//! own slant and per-point jitter, so two renderings of the same label differ.
//! Scripts are drawn at 60% size and offset from the baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bitmap::Bitmap;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
/// `d` is reserved for the integration differential.
const LETTERS: [&str; 7] = ["a", "b", "c", "k", "n", "x", "y"];
const OPERATORS: [&str; 3] = ["+", "-", "="];

/// Every token the generator can emit, in vocabulary order.
pub fn synthetic_symbols() -> Vec<&'static str> {
    let mut s: Vec<&str> = DIGITS.to_vec();
    s.extend(LETTERS);
    s.push("d");
    s.extend(OPERATORS);
    s.extend(["(", ")", "{", "}", "^", "_", "\\frac", "\\sqrt", "\\int"]);
    s
}

pub fn synthetic_vocabulary() -> Vocabulary {
    Vocabulary::new(&synthetic_symbols()).expect("synthetic symbols are distinct")
}

/// Layout tree of an expression.
#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Symbol(String),
    Row(Vec<Node>),
    Sup(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Frac(Box<Node>, Box<Node>),
    Sqrt(Box<Node>),
    Paren(Box<Node>),
    /// `\int body d x`
    Integral(Box<Node>),
}

impl Node {
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.emit(&mut out);
        out
    }

    fn emit(&self, out: &mut Vec<String>) {
        let group = |out: &mut Vec<String>, n: &Node| {
            out.push("{".into());
            n.emit(out);
            out.push("}".into());
        };
        match self {
            Node::Symbol(s) => out.push(s.clone()),
            Node::Row(items) => items.iter().for_each(|n| n.emit(out)),
            Node::Sup(b, s) | Node::Sub(b, s) => {
                b.emit(out);
                out.push(if matches!(self, Node::Sup(..)) { "^" } else { "_" }.into());
                group(out, s);
            }
            Node::Frac(n, d) => {
                out.push("\\frac".into());
                group(out, n);
                group(out, d);
            }
            Node::Sqrt(b) => {
                out.push("\\sqrt".into());
                group(out, b);
            }
            Node::Paren(b) => {
                out.push("(".into());
                b.emit(out);
                out.push(")".into());
            }
            Node::Integral(b) => {
                out.push("\\int".into());
                b.emit(out);
                out.push("d".into());
                out.push("x".into());
            }
        }
    }
}

fn is_atom(t: &str) -> bool {
    DIGITS.contains(&t) || LETTERS.contains(&t) || t == "d"
}

/// Recursive-descent parser for the generator's grammar.
pub fn parse(tokens: &[&str]) -> Result<Node> {
    let mut p = Parser { tokens, pos: 0 };
    let node = p.row(&[])?;
    if p.pos != tokens.len() {
        return Err(Error::Input(format!("unexpected {:?} at token {}", tokens[p.pos], p.pos)));
    }
    if let Node::Row(items) = &node {
        if items.is_empty() {
            return Err(Error::Input("empty expression".into()));
        }
    }
    Ok(node)
}

struct Parser<'a> {
    tokens: &'a [&'a str],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).copied()
    }

    fn expect(&mut self, t: &str) -> Result<()> {
        match self.peek() {
            Some(x) if x == t => {
                self.pos += 1;
                Ok(())
            }
            other => Err(Error::Input(format!("expected {t:?} at token {}, found {other:?}", self.pos))),
        }
    }

    fn at_differential(&self) -> bool {
        self.peek() == Some("d") && self.tokens.get(self.pos + 1) == Some(&"x")
    }

    /// Items until a closing token in `stop` (not consumed) or the end.
    fn row(&mut self, stop: &[&str]) -> Result<Node> {
        let mut items = Vec::new();
        while let Some(t) = self.peek() {
            if stop.contains(&t) || (stop.contains(&"d") && self.at_differential()) {
                break;
            }
            items.push(self.item()?);
        }
        Ok(Node::Row(items))
    }

    fn group(&mut self) -> Result<Node> {
        self.expect("{")?;
        let n = self.row(&["}"])?;
        self.expect("}")?;
        Ok(n)
    }

    fn item(&mut self) -> Result<Node> {
        let t = self.peek().expect("caller checked");
        self.pos += 1;
        let node = match t {
            "\\frac" => {
                let n = self.group()?;
                let d = self.group()?;
                Node::Frac(Box::new(n), Box::new(d))
            }
            "\\sqrt" => Node::Sqrt(Box::new(self.group()?)),
            "(" => {
                let b = self.row(&[")"])?;
                self.expect(")")?;
                Node::Paren(Box::new(b))
            }
            "\\int" => {
                let b = self.row(&["d"])?;
                self.expect("d")?;
                self.expect("x")?;
                Node::Integral(Box::new(b))
            }
            t if is_atom(t) || OPERATORS.contains(&t) => Node::Symbol(t.to_string()),
            t => return Err(Error::Input(format!("unexpected {t:?} at token {}", self.pos - 1))),
        };
        if matches!(node, Node::Symbol(ref s) if is_atom(s)) {
            match self.peek() {
                Some("^") => {
                    self.pos += 1;
                    return Ok(Node::Sup(Box::new(node), Box::new(self.group()?)));
                }
                Some("_") => {
                    self.pos += 1;
                    return Ok(Node::Sub(Box::new(node), Box::new(self.group()?)));
                }
                _ => {}
            }
        }
        Ok(node)
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub min_len: usize,
    pub max_len: usize,
    /// Maximum nesting of fractions, roots, parentheses and integrals.
    pub max_depth: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_len: 3,
            max_len: 8,
            max_depth: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length bounds [{}, {}] are invalid",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

fn pick<'a, R: Rng>(rng: &mut R, set: &[&'a str]) -> &'a str {
    set[rng.random_range(0..set.len())]
}

fn atom<R: Rng>(rng: &mut R) -> Node {
    if rng.random_bool(0.5) {
        Node::Symbol(pick(rng, &DIGITS).into())
    } else {
        Node::Symbol(pick(rng, &LETTERS).into())
    }
}

fn script<R: Rng>(rng: &mut R) -> Node {
    if rng.random_bool(0.75) {
        Node::Row(vec![atom(rng)])
    } else {
        Node::Row(vec![atom(rng), Node::Symbol(pick(rng, &["+", "-"]).into()), atom(rng)])
    }
}

fn operand<R: Rng>(rng: &mut R, depth: usize, max_depth: usize, budget: usize) -> Node {
    let deep = depth < max_depth && budget >= 5;
    let roll = rng.random_range(0..100);
    match roll {
        0..=44 => atom(rng),
        45..=64 => {
            let base = Box::new(atom(rng));
            let s = Box::new(script(rng));
            if rng.random_bool(0.6) {
                Node::Sup(base, s)
            } else {
                Node::Sub(base, s)
            }
        }
        65..=76 if deep => Node::Frac(
            Box::new(expr(rng, depth + 1, max_depth, budget / 2)),
            Box::new(expr(rng, depth + 1, max_depth, budget / 2)),
        ),
        77..=86 if deep => Node::Sqrt(Box::new(expr(rng, depth + 1, max_depth, budget - 3))),
        87..=94 if deep => Node::Paren(Box::new(expr(rng, depth + 1, max_depth, budget - 2))),
        95..=99 if deep && depth == 0 => Node::Integral(Box::new(expr(rng, depth + 1, max_depth, budget - 3))),
        _ => atom(rng),
    }
}

fn expr<R: Rng>(rng: &mut R, depth: usize, max_depth: usize, budget: usize) -> Node {
    let mut items = vec![operand(rng, depth, max_depth, budget)];
    let mut used = items[0].tokens().len();
    while used + 2 <= budget && rng.random_bool(0.6) {
        items.push(Node::Symbol(pick(rng, &OPERATORS).into()));
        let o = operand(rng, depth, max_depth, budget - used - 1);
        used += 1 + o.tokens().len();
        items.push(o);
    }
    Node::Row(items)
}

/// Draws one expression whose token count lies in the configured bounds.
pub fn random_expression<R: Rng>(rng: &mut R, config: &SynthConfig) -> Node {
    let goal = rng.random_range(config.min_len..=config.max_len);
    for _ in 0..500 {
        let node = expr(rng, 0, config.max_depth, goal);
        if node.tokens().len() == goal {
            return node;
        }
    }
    // A digit string is well formed at every length.
    Node::Row((0..goal).map(|_| Node::Symbol(pick(rng, &DIGITS).into())).collect())
}

/// Stroke-level handwriting variation for one sample.
struct Style {
    slant: f64,
    jitter: f64,
    seed: u64,
}

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, from: f64, to: f64) -> Stroke {
    let n = 14;
    (0..=n)
        .map(|i| {
            let a = (from + (to - from) * i as f64 / n as f64).to_radians();
            (cx + rx * a.cos(), cy - ry * a.sin())
        })
        .collect()
}

/// Strokes of a glyph in the unit box (x right, y down; baseline at 0.75).
fn glyph(sym: &str) -> Vec<Stroke> {
    let l = |pts: &[(f64, f64)]| pts.to_vec();
    match sym {
        "0" => vec![ellipse(0.5, 0.5, 0.25, 0.38, 0.0, 360.0)],
        "1" => vec![l(&[(0.35, 0.25), (0.52, 0.12), (0.52, 0.88)])],
        "2" => vec![l(&[(0.25, 0.3), (0.35, 0.15), (0.55, 0.1), (0.72, 0.2), (0.72, 0.38), (0.25, 0.88), (0.78, 0.88)])],
        "3" => vec![l(&[(0.25, 0.15), (0.7, 0.15), (0.45, 0.45), (0.7, 0.6), (0.7, 0.8), (0.5, 0.9), (0.25, 0.85)])],
        "4" => vec![l(&[(0.65, 0.9), (0.65, 0.1), (0.2, 0.65), (0.8, 0.65)])],
        "5" => vec![l(&[(0.75, 0.12), (0.32, 0.12), (0.3, 0.45), (0.6, 0.42), (0.75, 0.6), (0.7, 0.85), (0.5, 0.92), (0.25, 0.85)])],
        "6" => vec![l(&[(0.7, 0.12), (0.45, 0.15), (0.3, 0.4), (0.28, 0.75), (0.45, 0.9), (0.65, 0.85), (0.72, 0.65), (0.55, 0.5), (0.3, 0.6)])],
        "7" => vec![l(&[(0.22, 0.12), (0.78, 0.12), (0.4, 0.9)])],
        "8" => vec![ellipse(0.5, 0.3, 0.2, 0.18, 0.0, 360.0), ellipse(0.5, 0.7, 0.24, 0.2, 0.0, 360.0)],
        "9" => vec![ellipse(0.5, 0.33, 0.2, 0.2, 0.0, 360.0), l(&[(0.7, 0.33), (0.65, 0.9)])],
        "a" => vec![ellipse(0.45, 0.65, 0.2, 0.22, 0.0, 360.0), l(&[(0.66, 0.42), (0.68, 0.9)])],
        "b" => vec![l(&[(0.3, 0.1), (0.3, 0.9)]), ellipse(0.5, 0.68, 0.2, 0.22, 0.0, 360.0)],
        "c" => vec![ellipse(0.5, 0.65, 0.22, 0.24, 45.0, 315.0)],
        "d" => vec![ellipse(0.45, 0.68, 0.2, 0.22, 0.0, 360.0), l(&[(0.68, 0.1), (0.68, 0.9)])],
        "k" => vec![l(&[(0.3, 0.1), (0.3, 0.9)]), l(&[(0.7, 0.4), (0.3, 0.68), (0.72, 0.9)])],
        "n" => vec![l(&[(0.3, 0.42), (0.3, 0.9)]), l(&[(0.3, 0.55), (0.45, 0.42), (0.62, 0.45), (0.7, 0.6), (0.7, 0.9)])],
        "x" => vec![l(&[(0.25, 0.42), (0.75, 0.9)]), l(&[(0.75, 0.42), (0.25, 0.9)])],
        "y" => vec![l(&[(0.25, 0.42), (0.5, 0.72)]), l(&[(0.75, 0.42), (0.4, 0.98)])],
        "+" => vec![l(&[(0.5, 0.3), (0.5, 0.8)]), l(&[(0.25, 0.55), (0.75, 0.55)])],
        "-" => vec![l(&[(0.25, 0.55), (0.75, 0.55)])],
        "=" => vec![l(&[(0.25, 0.45), (0.75, 0.45)]), l(&[(0.25, 0.65), (0.75, 0.65)])],
        _ => Vec::new(),
    }
}

/// Laid-out box: strokes relative to (left edge, baseline).
struct Layout {
    width: f64,
    ascent: f64,
    descent: f64,
    strokes: Vec<(Stroke, f64)>,
}

const GLYPH: f64 = 16.0;
/// Distance from the top of a glyph box to the baseline, in glyph units.
const BASE: f64 = 0.75;
/// Height of the math axis above the baseline, in glyph units.
const AXIS: f64 = 0.2;

impl Layout {
    fn empty() -> Self {
        Layout {
            width: 0.0,
            ascent: 0.0,
            descent: 0.0,
            strokes: Vec::new(),
        }
    }

    fn place(&mut self, other: Layout, dx: f64, dy: f64) {
        for (s, r) in other.strokes {
            self.strokes.push((s.into_iter().map(|(x, y)| (x + dx, y + dy)).collect(), r));
        }
    }

    fn unit_strokes(strokes: Vec<Stroke>, w: f64, top: f64, h: f64, thick: f64) -> Vec<(Stroke, f64)> {
        strokes
            .into_iter()
            .map(|s| (s.into_iter().map(|(x, y)| (x * w, top + y * h)).collect(), thick))
            .collect()
    }
}

fn thickness(scale: f64) -> f64 {
    (0.9 * scale).max(0.6)
}

fn layout(node: &Node, scale: f64) -> Layout {
    let size = GLYPH * scale;
    let gap = 1.0 * scale;
    match node {
        Node::Symbol(s) => Layout {
            width: size * 0.85,
            ascent: size * BASE,
            descent: size * (1.0 - BASE),
            strokes: Layout::unit_strokes(glyph(s), size * 0.85, -size * BASE, size, thickness(scale)),
        },
        Node::Row(items) => {
            let mut out = Layout::empty();
            for (i, item) in items.iter().enumerate() {
                let l = layout(item, scale);
                let x = if i == 0 { out.width } else { out.width + gap };
                out.ascent = out.ascent.max(l.ascent);
                out.descent = out.descent.max(l.descent);
                let w = l.width;
                out.place(l, x, 0.0);
                out.width = x + w;
            }
            out
        }
        Node::Sup(base, script) | Node::Sub(base, script) => {
            let b = layout(base, scale);
            let s = layout(script, scale * 0.6);
            let shift = if matches!(node, Node::Sup(..)) {
                -(b.ascent * 0.6)
            } else {
                b.descent + s.ascent * 0.4
            };
            let mut out = Layout {
                width: b.width + 0.5 * scale + s.width,
                ascent: b.ascent.max(s.ascent - shift),
                descent: b.descent.max(s.descent + shift),
                strokes: Vec::new(),
            };
            let bw = b.width;
            out.place(b, 0.0, 0.0);
            out.place(s, bw + 0.5 * scale, shift);
            out
        }
        Node::Frac(num, den) => {
            let inner = (scale * 0.85).max(0.55);
            let n = layout(num, inner);
            let d = layout(den, inner);
            let width = n.width.max(d.width) + 4.0 * scale;
            let bar = -size * AXIS;
            let pad = 2.0 * scale;
            let mut out = Layout {
                width,
                ascent: -bar + pad + n.ascent + n.descent,
                descent: bar + pad + d.ascent + d.descent,
                strokes: vec![(vec![(scale, bar), (width - scale, bar)], thickness(scale))],
            };
            let (nw, nd) = (n.width, n.descent);
            out.place(n, (width - nw) / 2.0, bar - pad - nd);
            let (dw, da) = (d.width, d.ascent);
            out.place(d, (width - dw) / 2.0, bar + pad + da);
            out
        }
        Node::Sqrt(body) => {
            let b = layout(body, scale);
            let lead = 8.0 * scale;
            let top = -b.ascent - 2.0 * scale;
            let radical = vec![
                (0.0, -size * AXIS),
                (2.0 * scale, -size * AXIS - scale),
                (4.0 * scale, b.descent),
                (lead - scale, top),
                (lead + b.width + scale, top),
            ];
            let mut out = Layout {
                width: lead + b.width + 2.0 * scale,
                ascent: -top + scale,
                descent: b.descent + scale,
                strokes: vec![(radical, thickness(scale))],
            };
            out.place(b, lead, 0.0);
            out
        }
        Node::Paren(body) => {
            let b = layout(body, scale);
            let (asc, desc) = (b.ascent.max(size * BASE), b.descent.max(size * (1.0 - BASE)));
            let h = asc + desc;
            let w = 5.0 * scale;
            let arc = |mirror: bool| -> Stroke {
                ellipse(0.0, 0.0, 1.0, 1.0, 120.0, 240.0)
                    .into_iter()
                    .map(|(x, y)| {
                        let x = 0.5 + x * 0.5; // x in [0, 0.25]
                        let x = if mirror { w - x * w } else { x * w };
                        (x, -asc + (y + 1.0) / 2.0 * h)
                    })
                    .collect()
            };
            let bw = b.width;
            let mut out = Layout {
                width: bw + 2.0 * w + 2.0 * gap,
                ascent: asc,
                descent: desc,
                strokes: vec![(arc(false), thickness(scale))],
            };
            out.place(b, w + gap, 0.0);
            let close: Stroke = arc(true).into_iter().map(|(x, y)| (x + w + bw + 2.0 * gap, y)).collect();
            out.strokes.push((close, thickness(scale)));
            out
        }
        Node::Integral(body) => {
            let w = 8.0 * scale;
            let (top, bottom) = (-size * 1.0, size * 0.5);
            let h = bottom - top;
            let sign: Stroke = [(0.9, 0.08), (0.75, 0.0), (0.55, 0.1), (0.5, 0.5), (0.45, 0.9), (0.25, 1.0), (0.1, 0.92)]
                .iter()
                .map(|&(x, y)| (x * w, top + y * h))
                .collect();
            let b = layout(body, scale);
            let dx = [Node::Symbol("d".into()), Node::Symbol("x".into())];
            let d = layout(&Node::Row(dx.to_vec()), scale);
            let mut out = Layout {
                width: w + gap + b.width + 2.0 * gap + d.width,
                ascent: (-top).max(b.ascent).max(d.ascent),
                descent: bottom.max(b.descent).max(d.descent),
                strokes: vec![(sign, thickness(scale))],
            };
            let bw = b.width;
            out.place(b, w + gap, 0.0);
            out.place(d, w + gap + bw + 2.0 * gap, 0.0);
            out
        }
    }
}

fn draw_segment(img: &mut Bitmap, a: (f64, f64), b: (f64, f64), radius: f64) {
    let reach = radius + 1.0;
    let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
    let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + reach).ceil() as usize).min(img.width.saturating_sub(1));
    let y1 = ((a.1.max(b.1) + reach).ceil() as usize).min(img.height.saturating_sub(1));
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            let d = (cx * cx + cy * cy).sqrt();
            let ink = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
            if ink > img.get(y, x) {
                img.set(y, x, ink);
            }
        }
    }
}

fn render_with(node: &Node, style: &Style) -> Bitmap {
    let l = layout(node, 1.0);
    let margin = 3.0;
    let height = (l.ascent + l.descent + 2.0 * margin).ceil() as usize;
    let width = (l.width + 2.0 * margin + (l.ascent + l.descent) * style.slant.abs()).ceil() as usize;
    let mut img = Bitmap::new(height, width);
    let origin_y = margin + l.ascent;
    let mut rng = ChaCha8Rng::seed_from_u64(style.seed);
    let shear_base = if style.slant > 0.0 { l.descent } else { -l.ascent };
    for (stroke, radius) in &l.strokes {
        let pts: Vec<(f64, f64)> = stroke
            .iter()
            .map(|&(x, y)| {
                let jx = rng.random_range(-style.jitter..=style.jitter);
                let jy = rng.random_range(-style.jitter..=style.jitter);
                let x = x + margin - (y - shear_base) * style.slant;
                (x + jx, y + origin_y + jy)
            })
            .collect();
        for pair in pts.windows(2) {
            draw_segment(&mut img, pair[0], pair[1], *radius);
        }
    }
    img.quantize();
    img
}

/// Renders without handwriting variation.
pub fn render(node: &Node) -> Bitmap {
    render_with(
        node,
        &Style {
            slant: 0.0,
            jitter: 0.0,
            seed: 0,
        },
    )
}

/// A generated sample: id, image, and its token strings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub image: Bitmap,
    pub tokens: Vec<String>,
}

/// Generates `count` samples deterministically from `seed`.
pub fn gen_synthetic(config: &SynthConfig, count: usize, seed: u64) -> Result<Vec<SynthSample>> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = count.to_string().len().max(4);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let node = random_expression(&mut rng, config);
        let style = Style {
            slant: rng.random_range(-0.15..0.15),
            jitter: rng.random_range(0.0..0.6),
            seed: rng.random(),
        };
        out.push(SynthSample {
            id: format!("syn{i:0width$}"),
            image: render_with(&node, &style),
            tokens: node.tokens(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_covers_generator_tokens() {
        let v = synthetic_vocabulary();
        assert_eq!(v.len(), 3 + synthetic_symbols().len());
        for s in gen_synthetic(&SynthConfig::default(), 40, 3).unwrap() {
            assert!(v.tokenize(&s.tokens.join(" ")).is_ok());
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic(&SynthConfig::default(), 10, 9).unwrap();
        let b = gen_synthetic(&SynthConfig::default(), 10, 9).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SynthConfig::default(), 10, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lengths_respect_bounds() {
        let cfg = SynthConfig {
            min_len: 3,
            max_len: 8,
            max_depth: 2,
        };
        for s in gen_synthetic(&cfg, 200, 1).unwrap() {
            assert!((3..=8).contains(&s.tokens.len()), "{:?}", s.tokens);
        }
        let long = SynthConfig {
            min_len: 10,
            max_len: 25,
            max_depth: 2,
        };
        for s in gen_synthetic(&long, 50, 2).unwrap() {
            assert!((10..=25).contains(&s.tokens.len()));
        }
    }

    #[test]
    fn braces_balance_and_tokens_reparse() {
        let cfg = SynthConfig {
            min_len: 3,
            max_len: 20,
            max_depth: 2,
        };
        for s in gen_synthetic(&cfg, 300, 5).unwrap() {
            let mut depth = 0i32;
            for t in &s.tokens {
                depth += match t.as_str() {
                    "{" => 1,
                    "}" => -1,
                    _ => 0,
                };
                assert!(depth >= 0);
            }
            assert_eq!(depth, 0);
            let toks: Vec<&str> = s.tokens.iter().map(String::as_str).collect();
            let node = parse(&toks).unwrap();
            assert_eq!(node.tokens(), s.tokens);
        }
    }

    #[test]
    fn parser_rejects_malformed_streams() {
        assert!(parse(&["\\frac", "{", "1", "}"]).is_err());
        assert!(parse(&["(", "1"]).is_err());
        assert!(parse(&["}"]).is_err());
        assert!(parse(&[]).is_err());
    }

    #[test]
    fn scripts_render_smaller_and_offset() {
        let plain = render(&parse(&["x", "2"]).unwrap());
        let sup = render(&parse(&["x", "^", "{", "2", "}"]).unwrap());
        assert!(sup.width < plain.width);
        assert!(sup.height > plain.height);
        let ink = |b: &Bitmap| b.data.iter().sum::<f32>();
        assert!(ink(&sup) < ink(&plain));
    }

    #[test]
    fn images_have_ink_in_range() {
        for s in gen_synthetic(&SynthConfig::default(), 20, 8).unwrap() {
            assert!(s.image.height >= 16 && s.image.width >= 16);
            assert!(s.image.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.image.data.iter().any(|&v| v > 0.9));
        }
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(matches!(gen_synthetic(&SynthConfig::default(), 0, 1), Err(Error::Config(_))));
    }
}
