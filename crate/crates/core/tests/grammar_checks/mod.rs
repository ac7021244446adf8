//! Parser checks against the derivation counter in the oracle module.
//! Failures panic with the offending input.

#![allow(dead_code)]

use cfagent_core::{parse_action, render_action, ParseError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::oracle::{self, Rules, TOKENS};

/// Renders `n` generated actions and parses them back.
pub fn round_trip(n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let action = oracle::gen::action(&mut rng);
        let text = render_action(&action);
        let back = parse_action(&text).unwrap_or_else(|e| panic!("{text:?}: {e}"));
        assert_eq!(back, action, "{text}");
        assert_eq!(render_action(&back), text);
    }
}

/// Checks one token sequence against the derivation counter. Returns
/// whether the sequence is a viable prefix.
pub fn check(toks: &[&str]) -> bool {
    let text = toks.join(" ");
    let (count, viable) = oracle::derivations(toks);
    assert!(count <= 1, "{text:?} has {count} derivations");
    let parsed = parse_action(&text);
    assert_eq!(parsed.is_ok(), count == 1, "{text:?}: {parsed:?}");
    if let Err(e) = &parsed {
        // the parser blames the first token that kills the prefix under the
        // rules it was checking; final-answer rules are applied at ')'
        let rules = match e {
            ParseError::SyntaxError { .. } => Rules::Syntax,
            ParseError::DuplicateArg { .. } => Rules::UniqueNames,
            ParseError::InvalidFinal { .. } => return viable,
            ParseError::UnknownEscape { .. } => panic!("{text:?}: no escapes in the alphabet"),
        };
        let want = match (0..toks.len()).find(|&k| !oracle::analyse(&toks[..=k], rules).1) {
            Some(k) => oracle::token_offset(toks, k),
            None => text.len(),
        };
        assert_eq!(e.position(), want, "{text:?}: {e}");
    }
    viable
}

/// Every sequence over the full alphabet up to `depth` tokens. Returns the
/// number of sequences visited, the empty one included.
pub fn exhaustive(depth: usize) -> usize {
    fn walk<'a>(seq: &mut Vec<&'a str>, depth: usize) -> usize {
        let mut n = 1;
        if depth == 0 {
            return n;
        }
        for t in TOKENS {
            seq.push(t);
            check(seq);
            n += walk(seq, depth - 1);
            seq.pop();
        }
        n
    }
    walk(&mut Vec::new(), depth)
}

/// Viable sequences up to `depth` tokens over a reduced alphabet. Only
/// viable prefixes are extended; every dead extension is still checked
/// once, so any rejected sequence is covered by its first dead prefix.
/// Returns the number of accepted sequences.
pub fn viable_walk(depth: usize) -> usize {
    const ALPHABET: [&str; 13] = ["f", "final_answer", "text", "artifacts", "(", ")", ",", "=", "\"s\"", "@ab", "[", "]", "1"];
    fn walk<'a>(seq: &mut Vec<&'a str>, depth: usize, accepted: &mut usize) {
        if depth == 0 {
            return;
        }
        for t in ALPHABET {
            seq.push(t);
            if check(seq) {
                if oracle::derivations(seq).0 == 1 {
                    *accepted += 1;
                }
                walk(seq, depth - 1, accepted);
            }
            seq.pop();
        }
    }
    let mut accepted = 0;
    walk(&mut Vec::new(), depth, &mut accepted);
    accepted
}

pub const MALFORMED: &[(&str, usize)] = &[
    ("", 0),
    ("classify", 8),
    ("classify(", 9),
    ("classify(image)", 14),
    ("classify(image=)", 15),
    ("classify(image=@)", 16),
    ("classify(image=@zz)", 16),
    ("classify(x=1,)", 13),
    ("classify(x=1 y=2)", 13),
    ("classify(x=1) extra", 14),
    ("Classify(x=1)", 0),
    ("classify(x=[1,)", 14),
    ("classify(x=\"open)", 17),
    ("classify(x=1, x=2)", 14),
    ("classify(x=-)", 12),
    ("classify(x=1.)", 13),
    ("classify(x=tru)", 11),
    ("classify(x=\"a\\qb\")", 13),
    ("final_answer()", 13),
    ("final_answer(text=1)", 13),
    ("final_answer(text=\"a\", artifacts=[1])", 23),
    ("final_answer(text=\"a\", extra=1)", 23),
];

pub fn malformed_table() {
    for &(text, pos) in MALFORMED {
        let err = parse_action(text).expect_err(text);
        assert_eq!(err.position(), pos, "{text:?}: {err}");
    }
}
