mod grammar_checks;
mod oracle;

use oracle::TOKENS;

#[test]
fn render_then_parse_is_identity() {
    grammar_checks::round_trip(500, 42);
}

#[test]
fn every_short_sequence_has_at_most_one_parse() {
    let visited = grammar_checks::exhaustive(5);
    assert_eq!(visited, (0..=5).map(|k| TOKENS.len().pow(k)).sum::<usize>());
}

#[test]
fn viable_sequences_up_to_twelve_tokens() {
    let accepted = grammar_checks::viable_walk(12);
    assert!(accepted > 1000, "{accepted}");
}

#[test]
fn malformed_inputs_report_their_position() {
    grammar_checks::malformed_table();
}
