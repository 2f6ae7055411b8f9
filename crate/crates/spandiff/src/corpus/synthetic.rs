//! Deterministic synthetic review corpus for desk-scale experiments.
//!
//! Sentences follow a handful of templates in which sentiment adjectives cue
//! polarity and noun compounds of length 1..3 form the aspect spans, so a
//! small model can actually learn the mapping. Every sentence carries at
//! least one aspect; a fraction carries two.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedExample, AspectAnnotation, DependencyEdge, Polarity, Vocabularies};

const FUNCTION_WORDS: [(&str, &str); 7] = [
    ("the", "DT"),
    ("was", "VBD"),
    ("and", "CC"),
    ("we", "PRP"),
    ("tried", "VBD"),
    ("very", "RB"),
    ("here", "RB"),
];

const POSITIVE_ADJS: [&str; 5] = ["great", "amazing", "tasty", "lovely", "superb"];
const NEGATIVE_ADJS: [&str; 5] = ["awful", "bland", "rude", "soggy", "stale"];
const NEUTRAL_ADJS: [&str; 2] = ["average", "ordinary"];

const BASE_NOUNS: [&str; 14] = [
    "pasta", "service", "menu", "wine", "staff", "decor", "sushi", "salad", "cake", "tea",
    "bread", "soup", "patio", "bar",
];

struct Inventory {
    positive: Vec<String>,
    negative: Vec<String>,
    neutral: Vec<String>,
    nouns: Vec<String>,
}

fn build_inventory(vocab_size: usize) -> (Inventory, Vec<String>) {
    assert!(vocab_size >= 25, "synthetic corpus needs at least 25 word types");
    let mut words: Vec<String> = FUNCTION_WORDS.iter().map(|(w, _)| w.to_string()).collect();
    let positive: Vec<String> = POSITIVE_ADJS.iter().map(|s| s.to_string()).collect();
    let negative: Vec<String> = NEGATIVE_ADJS.iter().map(|s| s.to_string()).collect();
    let neutral: Vec<String> = NEUTRAL_ADJS.iter().map(|s| s.to_string()).collect();
    words.extend(positive.iter().cloned());
    words.extend(negative.iter().cloned());
    words.extend(neutral.iter().cloned());

    let noun_budget = vocab_size - words.len();
    let mut nouns: Vec<String> = BASE_NOUNS
        .iter()
        .take(noun_budget)
        .map(|s| s.to_string())
        .collect();
    for i in BASE_NOUNS.len()..noun_budget {
        nouns.push(format!("dish{i}"));
    }
    words.extend(nouns.iter().cloned());
    assert_eq!(words.len(), vocab_size);

    (
        Inventory {
            positive,
            negative,
            neutral,
            nouns,
        },
        words,
    )
}

fn pos_tag(word: &str, inv: &Inventory) -> &'static str {
    for (w, tag) in FUNCTION_WORDS {
        if w == word {
            return tag;
        }
    }
    if inv.nouns.iter().any(|n| n == word) {
        "NN"
    } else {
        "JJ"
    }
}

/// Generate `n_sentences` annotated sentences over exactly `vocab_size`
/// word types. Returns the examples, the fitted vocabularies, and the full
/// word inventory. Deterministic in `seed`.
pub fn synthetic_corpus(
    seed: u64,
    n_sentences: usize,
    vocab_size: usize,
) -> (Vec<AnnotatedExample>, Vocabularies, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (inv, words) = build_inventory(vocab_size);
    let mut vocabs = Vocabularies::new();
    let mut examples = Vec::with_capacity(n_sentences);

    for i in 0..n_sentences {
        // Cycle templates so every corpus mixes aspect lengths, polarities,
        // and both single- and double-aspect sentences.
        let ex = match i % 10 {
            1 => template_two_aspects(&mut rng, &inv),
            6 => template_tried(&mut rng, &inv),
            0 | 5 => template_copula(&mut rng, &inv, true),
            _ => template_copula(&mut rng, &inv, false),
        };
        examples.push(finish(ex, &inv, &mut vocabs));
    }
    (examples, vocabs, words)
}

struct Draft {
    tokens: Vec<String>,
    deps: Vec<(usize, usize, &'static str)>,
    gold: Vec<AspectAnnotation>,
}

fn noun_phrase(rng: &mut ChaCha8Rng, inv: &Inventory) -> Vec<String> {
    let len = match rng.gen_range(0..10) {
        0..=4 => 1,
        5..=7 => 2,
        _ => 3,
    };
    let mut picked = Vec::with_capacity(len);
    while picked.len() < len {
        let w = inv.nouns.choose(rng).unwrap().clone();
        if !picked.contains(&w) {
            picked.push(w);
        }
    }
    picked
}

fn pick_adj(rng: &mut ChaCha8Rng, inv: &Inventory) -> (String, Polarity) {
    match rng.gen_range(0..10) {
        0..=3 => (inv.positive.choose(rng).unwrap().clone(), Polarity::Positive),
        4..=7 => (inv.negative.choose(rng).unwrap().clone(), Polarity::Negative),
        _ => (inv.neutral.choose(rng).unwrap().clone(), Polarity::Neutral),
    }
}

/// "the NP was [very] ADJ"
fn template_copula(rng: &mut ChaCha8Rng, inv: &Inventory, intensify: bool) -> Draft {
    let np = noun_phrase(rng, inv);
    let (adj, pol) = pick_adj(rng, inv);
    let len = np.len();
    let mut tokens = vec!["the".to_string()];
    tokens.extend(np);
    tokens.push("was".to_string());
    if intensify {
        tokens.push("very".to_string());
    }
    tokens.push(adj);

    let head = 1 + len; // last noun, 1-based
    let verb = head + 1;
    let adj_pos = tokens.len();
    let mut deps = vec![
        (head, 1, "det"),
        (verb, head, "nsubj"),
        (verb, adj_pos, "acomp"),
    ];
    for k in 2..=len {
        deps.push((head, k, "compound"));
    }
    if intensify {
        deps.push((adj_pos, adj_pos - 1, "advmod"));
    }
    Draft {
        tokens,
        deps,
        gold: vec![AspectAnnotation::new(2, 1 + len, pol)],
    }
}

/// "ADJ NP and ADJ NP" — two aspects with independent polarities.
fn template_two_aspects(rng: &mut ChaCha8Rng, inv: &Inventory) -> Draft {
    let np1 = noun_phrase(rng, inv);
    let np2 = noun_phrase(rng, inv);
    let (adj1, pol1) = pick_adj(rng, inv);
    let (adj2, pol2) = pick_adj(rng, inv);
    let (l1, l2) = (np1.len(), np2.len());

    let mut tokens = vec![adj1];
    tokens.extend(np1);
    tokens.push("and".to_string());
    tokens.push(adj2);
    tokens.extend(np2);

    let head1 = 1 + l1;
    let cc = head1 + 1;
    let adj2_pos = cc + 1;
    let head2 = adj2_pos + l2;
    let mut deps = vec![
        (head1, 1, "amod"),
        (head1, cc, "cc"),
        (head1, head2, "conj"),
        (head2, adj2_pos, "amod"),
    ];
    for k in 2..=l1 {
        deps.push((head1, k, "compound"));
    }
    for k in 1..l2 {
        deps.push((head2, adj2_pos + k, "compound"));
    }
    Draft {
        tokens,
        deps,
        gold: vec![
            AspectAnnotation::new(2, 1 + l1, pol1),
            AspectAnnotation::new(adj2_pos + 1, head2, pol2),
        ],
    }
}

/// "we tried the NP here" — neutral mention.
fn template_tried(rng: &mut ChaCha8Rng, inv: &Inventory) -> Draft {
    let np = noun_phrase(rng, inv);
    let len = np.len();
    let mut tokens = vec!["we".to_string(), "tried".to_string(), "the".to_string()];
    tokens.extend(np);
    tokens.push("here".to_string());

    let head = 3 + len;
    let mut deps = vec![
        (2, 1, "nsubj"),
        (2, head, "obj"),
        (head, 3, "det"),
        (2, head + 1, "advmod"),
    ];
    for k in 4..3 + len {
        deps.push((head, k, "compound"));
    }
    Draft {
        tokens,
        deps,
        gold: vec![AspectAnnotation::new(4, 3 + len, Polarity::Neutral)],
    }
}

fn finish(draft: Draft, inv: &Inventory, vocabs: &mut Vocabularies) -> AnnotatedExample {
    let pos_ids = draft
        .tokens
        .iter()
        .map(|w| vocabs.intern_pos(pos_tag(w, inv), false))
        .collect();
    let edges = draft
        .deps
        .iter()
        .map(|&(head, dependent, label)| DependencyEdge {
            head,
            dependent,
            label_id: vocabs.intern_dep(label, false),
        })
        .collect();
    AnnotatedExample {
        tokens: draft.tokens,
        pos_ids,
        edges,
        gold: draft.gold,
    }
}
