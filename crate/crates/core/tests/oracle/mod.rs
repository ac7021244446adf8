//! Independent reference implementations used as test oracles. Nothing
//! here calls into the crate's numeric or parsing code.

#![allow(dead_code)]

use std::collections::BTreeSet;

// ---------------------------------------------------------------- metrics

pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;

/// Mean absolute difference by direct summation.
pub fn sip(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut total = 0.0;
    for i in 0..a.len() {
        total += (f64::from(a[i]) - f64::from(b[i])).abs();
    }
    total / a.len() as f64
}

pub fn cpg(f: f64, c: f64) -> f64 {
    if f > c {
        f - c
    } else {
        c - f
    }
}

pub fn flipped(f: f64, c: f64, t: f64) -> bool {
    let before = f >= t;
    let after = c >= t;
    before != after
}

pub fn cfr(pairs: &[(f64, f64)], t: f64) -> f64 {
    let mut n = 0usize;
    for &(f, c) in pairs {
        if flipped(f, c, t) {
            n += 1;
        }
    }
    n as f64 / pairs.len() as f64
}

/// Two-dimensional 11x11 Gaussian weights (sigma 1.5), normalized.
pub fn gaussian_2d() -> [[f64; 11]; 11] {
    let mut w = [[0.0; 11]; 11];
    let mut sum = 0.0;
    for (j, row) in w.iter_mut().enumerate() {
        for (i, cell) in row.iter_mut().enumerate() {
            let dx = i as f64 - 5.0;
            let dy = j as f64 - 5.0;
            *cell = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            sum += *cell;
        }
    }
    for row in w.iter_mut() {
        for cell in row.iter_mut() {
            *cell /= sum;
        }
    }
    w
}

/// Mean SSIM over every full 11x11 window, each window evaluated directly.
pub fn ssim(a: &[f32], b: &[f32], width: usize, height: usize) -> f64 {
    let w = gaussian_2d();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - 11 {
        for x0 in 0..=width - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    let k = (y0 + j) * width + x0 + i;
                    let (va, vb) = (f64::from(a[k]), f64::from(b[k]));
                    let g = w[j][i];
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2));
            count += 1;
        }
    }
    total / count as f64
}

// ---------------------------------------------------------------- scenes

pub struct Rng(u64);

impl Rng {
    pub fn new(seed: u64) -> Self {
        let s = seed ^ 0x9E37_79B9_7F4A_7C15;
        Rng(if s == 0 { 0x9E37_79B9_7F4A_7C15 } else { s })
    }

    pub fn next(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next() >> 11) as f64 / 9_007_199_254_740_992.0
    }
}

pub fn in_disk(x: usize, y: usize, cx: f64, cy: f64, r: f64) -> bool {
    let dx = x as f64 - cx;
    let dy = y as f64 - cy;
    dx * dx + dy * dy <= r * r
}

/// Lesion-free background of a seeded scene.
pub fn background(seed: u64, width: usize, height: usize) -> Vec<f32> {
    let mut rng = Rng::new(seed);
    let g0 = 0.30 + 0.10 * rng.unit();
    let g1 = g0 + 0.05 * (2.0 * rng.unit() - 1.0);
    let mut out = Vec::new();
    for y in 0..height {
        let g = g0 + (g1 - g0) * (y as f64 / (height - 1) as f64);
        for _ in 0..width {
            out.push((g + 0.02 * (2.0 * rng.unit() - 1.0)).clamp(0.0, 1.0) as f32);
        }
    }
    out
}

/// Background plus an additive disk of amplitude `a`.
pub fn scene(seed: u64, width: usize, height: usize, lesion: Option<(f64, f64, f64, f64)>) -> Vec<f32> {
    let mut px = background(seed, width, height);
    if let Some((cx, cy, r, a)) = lesion {
        for y in 0..height {
            for x in 0..width {
                if in_disk(x, y, cx, cy, r) {
                    let p = &mut px[y * width + x];
                    *p = (f64::from(*p) + a).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    px
}

/// `clamp01(4 (p99 - mean))` with p99 interpolated between order statistics.
pub fn classify(px: &[f32]) -> f64 {
    let n = px.len();
    let mut sorted: Vec<f64> = px.iter().map(|&p| f64::from(p)).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let rank = 0.99 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let p99 = if lo + 1 < n { sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac } else { sorted[lo] };
    (4.0 * (p99 - mean)).clamp(0.0, 1.0)
}

/// Region editor on raw pixels, same f32 arithmetic as the tool.
pub fn edit_region(px: &[f32], bg: &[f32], width: usize, disk: (f64, f64, f64), s: f64) -> Vec<f32> {
    let s = s as f32;
    px.iter()
        .zip(bg)
        .enumerate()
        .map(|(i, (&p, &b))| {
            let m = if in_disk(i % width, i / width, disk.0, disk.1, disk.2) { s } else { 0.0 };
            (p * (1.0 - m) + b * m).clamp(0.0, 1.0)
        })
        .collect()
}

/// 5x5 mean with clamped edges.
pub fn blur(px: &[f32], width: usize, height: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; px.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0f64;
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let yy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                    acc += f64::from(px[yy * width + xx]);
                }
            }
            out[y * width + x] = (acc / 25.0) as f32;
        }
    }
    out
}

pub fn edit_global(px: &[f32], width: usize, height: usize, s: f64) -> Vec<f32> {
    let b = blur(px, width, height);
    let s = s as f32;
    px.iter().zip(&b).map(|(&p, &q)| (p - s * (p - q).max(0.0)).clamp(0.0, 1.0)).collect()
}

// ---------------------------------------------------------------- selection

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub index: usize,
    pub cpg: f64,
    pub sip: f64,
    pub ssim: f64,
}

/// Linear scan: best score, then best ssim, then lowest index.
pub fn select(cands: &[Scored], lambda: f64) -> usize {
    let score = |c: &Scored| c.cpg - lambda * c.sip;
    let mut best = cands[0];
    for c in &cands[1..] {
        let better = score(c) > score(&best)
            || (score(c) == score(&best) && c.ssim > best.ssim)
            || (score(c) == score(&best) && c.ssim == best.ssim && c.index < best.index);
        if better {
            best = *c;
        }
    }
    best.index
}

// ---------------------------------------------------------------- grammar

/// Token alphabet for exhaustive checks. Tokens are joined by one space.
pub const TOKENS: [&str; 15] =
    ["f", "final_answer", "text", "artifacts", "(", ")", ",", "=", "1", "2.5", "true", "\"s\"", "@ab", "[", "]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Ident,
    Open,
    Close,
    Comma,
    Eq,
    Int,
    Real,
    Bool,
    Str,
    Art,
    LBrack,
    RBrack,
}

/// Identifiers are lowercase words, so `true` can also name an argument
/// or a tool.
fn is_ident(tok: &str) -> bool {
    let mut bytes = tok.bytes();
    matches!(bytes.next(), Some(b'a'..=b'z' | b'_'))
        && bytes.all(|b| matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'_'))
}

fn kind(tok: &str) -> Kind {
    match tok {
        "(" => Kind::Open,
        ")" => Kind::Close,
        "," => Kind::Comma,
        "=" => Kind::Eq,
        "1" => Kind::Int,
        "2.5" => Kind::Real,
        "true" => Kind::Bool,
        "\"s\"" => Kind::Str,
        "@ab" => Kind::Art,
        "[" => Kind::LBrack,
        "]" => Kind::RBrack,
        _ => Kind::Ident,
    }
}

/// Parse outcome of a value: where it ended and what it was.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Val {
    Scalar(Kind),
    List(Vec<Val>),
}

/// Every way to derive a value starting at `i`. `None` as the end means
/// the input ran out inside the value.
fn values(t: &[Kind], i: usize) -> Vec<(Option<usize>, Val)> {
    let Some(&k) = t.get(i) else { return vec![(None, Val::Scalar(Kind::Int))] };
    match k {
        Kind::Int | Kind::Real | Kind::Bool | Kind::Str | Kind::Art => vec![(Some(i + 1), Val::Scalar(k))],
        Kind::LBrack => {
            let mut out = Vec::new();
            match t.get(i + 1) {
                None => return vec![(None, Val::List(vec![]))],
                Some(Kind::RBrack) => out.push((Some(i + 2), Val::List(vec![]))),
                _ => {}
            }
            // value ("," value)* "]"
            let mut frontier: Vec<(usize, Vec<Val>)> = vec![(i + 1, vec![])];
            while let Some((at, items)) = frontier.pop() {
                for (end, v) in values(t, at) {
                    let mut items = items.clone();
                    items.push(v);
                    let Some(e) = end else {
                        out.push((None, Val::List(items)));
                        continue;
                    };
                    match t.get(e) {
                        None => out.push((None, Val::List(items))),
                        Some(Kind::RBrack) => out.push((Some(e + 1), Val::List(items))),
                        Some(Kind::Comma) => frontier.push((e + 1, items)),
                        _ => {}
                    }
                }
            }
            out
        }
        _ => vec![],
    }
}

/// Derivations of `args` from `i`, carrying the (name, value) list.
fn arg_lists(toks: &[&str], t: &[Kind], i: usize) -> Vec<(Option<usize>, Vec<(String, Val)>)> {
    let mut out = Vec::new();
    let mut frontier: Vec<(usize, Vec<(String, Val)>)> = vec![(i, vec![])];
    while let Some((at, args)) = frontier.pop() {
        match t.get(at) {
            None => {
                out.push((None, args));
                continue;
            }
            Some(_) if is_ident(toks[at]) => {}
            _ => continue,
        }
        let name = toks[at].to_string();
        match t.get(at + 1) {
            None => {
                let mut a = args.clone();
                a.push((name, Val::Scalar(Kind::Int)));
                out.push((None, a));
                continue;
            }
            Some(Kind::Eq) => {}
            _ => continue,
        }
        for (end, v) in values(t, at + 2) {
            let mut a = args.clone();
            a.push((name.clone(), v));
            let Some(e) = end else {
                out.push((None, a));
                continue;
            };
            match t.get(e) {
                Some(Kind::Comma) => frontier.push((e + 1, a)),
                _ => out.push((Some(e), a)),
            }
        }
    }
    out
}

fn names_unique(args: &[(String, Val)]) -> bool {
    let set: BTreeSet<&str> = args.iter().map(|(n, _)| n.as_str()).collect();
    set.len() == args.len()
}

/// Final-answer argument rules; `complete` also requires `text`.
fn final_ok(args: &[(String, Val)], complete: bool, partial_last: bool) -> bool {
    let mut has_text = false;
    for (k, (name, v)) in args.iter().enumerate() {
        let open = partial_last && k + 1 == args.len();
        match name.as_str() {
            "text" => {
                if !open && *v != Val::Scalar(Kind::Str) {
                    return false;
                }
                has_text = true;
            }
            "artifacts" => {
                let ok = match v {
                    Val::List(items) => items.iter().all(|x| *x == Val::Scalar(Kind::Art)),
                    Val::Scalar(_) => open,
                };
                if !ok {
                    return false;
                }
            }
            _ => return false,
        }
    }
    !complete || has_text
}

/// Which rules a check applies on top of the context-free grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rules {
    Syntax,
    UniqueNames,
    Full,
}

/// Number of complete derivations of the token sequence as an action, and
/// whether it is a viable prefix of some action.
pub fn derivations(toks: &[&str]) -> (usize, bool) {
    analyse(toks, Rules::Full)
}

pub fn analyse(toks: &[&str], rules: Rules) -> (usize, bool) {
    let t: Vec<Kind> = toks.iter().map(|s| kind(s)).collect();
    if t.is_empty() {
        return (0, true);
    }
    if !is_ident(toks[0]) {
        return (0, false);
    }
    let is_final = toks[0] == "final_answer" && rules == Rules::Full;
    match t.get(1) {
        None => return (0, true),
        Some(Kind::Open) => {}
        _ => return (0, false),
    }
    let mut complete = 0;
    let mut viable = false;
    let mut lists = arg_lists(toks, &t, 2);
    if toks[0] != "final_answer" {
        lists.push((Some(2), vec![]));
    }
    for (end, args) in lists {
        let partial = end.is_none();
        if rules != Rules::Syntax && !names_unique(&args) {
            // a repeated name can still be mid-typing only if it is the last
            // and incomplete; the parser rejects it as soon as it is read
            continue;
        }
        if is_final && !final_ok(&args, false, partial) {
            continue;
        }
        match end {
            None => viable = true,
            Some(e) => match t.get(e) {
                None => viable = true,
                Some(Kind::Close) if e + 1 == t.len() => {
                    if !is_final || final_ok(&args, true, false) {
                        complete += 1;
                        viable = true;
                    } else if is_final {
                        // missing text: rejected at ')' and nothing can follow
                    }
                }
                _ => {}
            },
        }
    }
    (complete, viable)
}

/// Byte offset of token `k` when tokens are joined with single spaces.
pub fn token_offset(toks: &[&str], k: usize) -> usize {
    toks[..k].iter().map(|s| s.len() + 1).sum()
}

// ---------------------------------------------------------------- generators

pub mod gen {
    use std::collections::BTreeMap;

    use cfagent_core::{Action, ArgValue, ArtifactId};
    use rand::Rng;

    const IDENT_HEAD: &[u8] = b"abcdefghijklmnopqrstuvwxyz_";
    const IDENT_TAIL: &[u8] = b"abcdefghijklmnopqrstuvwxyz_0123456789";

    pub fn ident(rng: &mut impl Rng) -> String {
        loop {
            let len = rng.gen_range(1..10);
            let mut s = String::new();
            s.push(IDENT_HEAD[rng.gen_range(0..IDENT_HEAD.len())] as char);
            for _ in 1..len {
                s.push(IDENT_TAIL[rng.gen_range(0..IDENT_TAIL.len())] as char);
            }
            if s != "final_answer" {
                return s;
            }
        }
    }

    pub fn text(rng: &mut impl Rng) -> String {
        const PIECES: [&str; 10] = ["a", "Z", " ", "\"", "\\", "\n", "\t", "é", "→", "@1"];
        (0..rng.gen_range(0..12)).map(|_| PIECES[rng.gen_range(0..PIECES.len())]).collect()
    }

    pub fn artifact(rng: &mut impl Rng) -> ArtifactId {
        let len = rng.gen_range(1..65);
        let hex: String = (0..len).map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap()).collect();
        ArtifactId::new(hex).unwrap()
    }

    pub fn real(rng: &mut impl Rng) -> f64 {
        match rng.gen_range(0..4) {
            0 => rng.gen_range(-1.0..1.0),
            1 => rng.gen_range(-1e6..1e6),
            2 => f64::from(rng.gen_range(-100i32..100)),
            _ => f64::from_bits(rng.gen::<u64>()).clamp(-1e300, 1e300),
        }
    }

    pub fn value(rng: &mut impl Rng, depth: usize) -> ArgValue {
        let top = if depth == 0 { 5 } else { 6 };
        match rng.gen_range(0..top) {
            0 => ArgValue::Int(if rng.gen_bool(0.2) { rng.gen() } else { rng.gen_range(-1000..1000) }),
            1 => {
                let r = real(rng);
                ArgValue::Real(if r.is_nan() { 0.5 } else { r })
            }
            2 => ArgValue::Bool(rng.gen()),
            3 => ArgValue::Str(text(rng)),
            4 => ArgValue::Artifact(artifact(rng)),
            _ => ArgValue::List((0..rng.gen_range(0..4)).map(|_| value(rng, depth - 1)).collect()),
        }
    }

    pub fn action(rng: &mut impl Rng) -> Action {
        if rng.gen_bool(0.25) {
            Action::Final {
                answer: text(rng),
                artifacts: (0..rng.gen_range(0..3)).map(|_| artifact(rng)).collect(),
            }
        } else {
            let args: BTreeMap<String, ArgValue> =
                (0..rng.gen_range(0..5)).map(|_| (ident(rng), value(rng, 2))).collect();
            Action::Call { tool: ident(rng), args }
        }
    }
}
